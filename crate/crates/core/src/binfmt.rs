//! Little-endian `f32` blobs with SHA-256 digests, shared by the model and
//! checkpoint file formats.

use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Appends `values` narrowed to `f32`, little-endian.
pub fn push_f32_le(out: &mut Vec<u8>, values: &[f64]) {
    out.reserve(values.len() * 4);
    for v in values {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
}

/// Decodes a blob of little-endian `f32` values; `None` if the length is not
/// a multiple of four.
pub fn read_f32_le(bytes: &[u8]) -> Option<Vec<f64>> {
    if !bytes.len().is_multiple_of(4) {
        return None;
    }
    Some(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect())
}

/// Rounds through `f32`, matching what a save/load cycle does to a value.
pub fn round_to_f32(values: &mut [f64]) {
    for v in values {
        *v = *v as f32 as f64;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn f32_round_trip() {
        let mut buf = Vec::new();
        push_f32_le(&mut buf, &[1.5, -2.25, 0.1]);
        assert_eq!(buf.len(), 12);
        let back = read_f32_le(&buf).unwrap();
        assert_eq!(back[..2], [1.5, -2.25]);
        assert_eq!(back[2], 0.1f32 as f64);
        assert!(read_f32_le(&buf[..5]).is_none());
    }
}
