//! `model.json` + `model.bin` on-disk format.
//!
//! The manifest lists every tensor with its shape; the blob holds those
//! tensors back to back as little-endian `f32`, row-major, in manifest order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{layer_specs, EmbeddingTable, LmEncoder, LmError, LmMode, LmShape, Sentinels, Vocabulary};
use crate::autodiff::Tensor;
use crate::binfmt;

pub const LM_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "model.json";
pub const BLOB_FILE: &str = "model.bin";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmManifest {
    pub schema_version: u32,
    pub mode: LmMode,
    pub vocab_size: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub max_len: usize,
    pub vocabulary: Vec<String>,
    pub sentinels: Sentinels,
    pub tensors: Vec<TensorEntry>,
    /// Blob file name, relative to the manifest's directory.
    pub blob: String,
    pub sha256: String,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> LmError + '_ {
    move |source| LmError::Io { path: path.display().to_string(), source }
}

fn expected_entries(mode: LmMode, v: usize, d: usize, shape: &LmShape) -> Vec<TensorEntry> {
    let mut out = vec![TensorEntry { name: "embeddings".into(), shape: vec![v, d] }];
    if mode == LmMode::Transformer {
        out.push(TensorEntry { name: "positions".into(), shape: vec![shape.max_len, d] });
        for i in 0..shape.layers {
            out.extend(layer_specs(i, d, shape.ff_dim).into_iter().map(|(name, shape)| TensorEntry { name, shape }));
        }
    }
    out
}

impl LmEncoder {
    /// Writes `model.json` and `model.bin` into `dir`, returning the
    /// manifest path.
    pub fn save(&self, dir: &Path) -> Result<PathBuf, LmError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let shape = self.shape();
        let tensors = expected_entries(self.mode(), self.vocab().len(), self.dim(), &shape);
        let mut blob = Vec::new();
        for p in self.parameters() {
            binfmt::push_f32_le(&mut blob, p);
        }
        let manifest = LmManifest {
            schema_version: LM_SCHEMA_VERSION,
            mode: self.mode(),
            vocab_size: self.vocab().len(),
            dim: self.dim(),
            layers: shape.layers,
            heads: shape.heads,
            ff_dim: shape.ff_dim,
            max_len: shape.max_len,
            vocabulary: self.vocab().tokens().to_vec(),
            sentinels: self.vocab().sentinels(),
            tensors,
            blob: BLOB_FILE.into(),
            sha256: binfmt::sha256_hex(&blob),
        };
        let blob_path = dir.join(BLOB_FILE);
        fs::write(&blob_path, &blob).map_err(io_err(&blob_path))?;
        let manifest_path = dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(&manifest).map_err(|e| LmError::Manifest(e.to_string()))?;
        fs::write(&manifest_path, json).map_err(io_err(&manifest_path))?;
        Ok(manifest_path)
    }

    /// Loads an encoder from a manifest path, or from a directory holding
    /// `model.json`.
    pub fn load(path: &Path) -> Result<Self, LmError> {
        let manifest_path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
        let m: LmManifest = serde_json::from_str(&text).map_err(|e| LmError::Manifest(e.to_string()))?;
        if m.schema_version != LM_SCHEMA_VERSION {
            return Err(LmError::Manifest(format!("unsupported schema version {}", m.schema_version)));
        }
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        let blob_path = dir.join(&m.blob);
        let blob = fs::read(&blob_path).map_err(io_err(&blob_path))?;
        let actual = binfmt::sha256_hex(&blob);
        if !actual.eq_ignore_ascii_case(&m.sha256) {
            return Err(LmError::ChecksumMismatch { expected: m.sha256.clone(), actual });
        }

        if m.vocabulary.len() != m.vocab_size {
            return Err(LmError::Dimension(format!(
                "vocab_size {} but vocabulary lists {} tokens",
                m.vocab_size,
                m.vocabulary.len()
            )));
        }
        let vocab = Vocabulary::new(m.vocabulary.clone(), m.sentinels)?;
        let shape = LmShape { layers: m.layers, heads: m.heads, ff_dim: m.ff_dim, max_len: m.max_len };
        if m.mode == LmMode::Identity && m.layers != 0 {
            return Err(LmError::Dimension(format!("identity mode declares {} layers", m.layers)));
        }
        let expected = expected_entries(m.mode, m.vocab_size, m.dim, &shape);
        // check the embedding entry first so row-count errors read naturally
        if let Some(e) = m.tensors.first() {
            if e.name == "embeddings" && e.shape != expected[0].shape {
                return Err(LmError::Dimension(format!(
                    "embeddings declared as {:?} but vocabulary has {} tokens of width {}",
                    e.shape, m.vocab_size, m.dim
                )));
            }
        }
        if m.tensors != expected {
            return Err(LmError::Dimension(format!(
                "tensor list does not match a {:?} encoder with V={}, d={}, {} layers",
                m.mode, m.vocab_size, m.dim, m.layers
            )));
        }
        let values = binfmt::read_f32_le(&blob).ok_or_else(|| LmError::Dimension("blob length is not a multiple of 4".into()))?;
        let total: usize = expected.iter().map(|e| e.shape.iter().product::<usize>()).sum();
        if values.len() != total {
            return Err(LmError::Dimension(format!("blob holds {} values, manifest declares {}", values.len(), total)));
        }
        let mut offset = 0;
        let mut tensors = Vec::with_capacity(expected.len());
        for e in &expected {
            let n: usize = e.shape.iter().product();
            let t = Tensor::new(e.shape.clone(), values[offset..offset + n].to_vec())?;
            if !t.is_finite() {
                return Err(LmError::NonFinite(e.name.clone()));
            }
            tensors.push(t);
            offset += n;
        }
        let mut tensors = tensors.into_iter();
        let embeddings = tensors.next().expect("embeddings entry");
        let table = EmbeddingTable::new(m.vocab_size, m.dim, embeddings.into_data())?;
        match m.mode {
            LmMode::Identity => LmEncoder::identity(vocab, table, m.max_len),
            LmMode::Transformer => {
                let positions = tensors.next().expect("positions entry");
                let per_layer = layer_specs(0, m.dim, m.ff_dim).len();
                let rest: Vec<Tensor> = tensors.collect();
                let layers = rest.chunks(per_layer).map(<[Tensor]>::to_vec).collect();
                LmEncoder::transformer(vocab, table, shape, positions, layers)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_identity(v: usize, rows: usize, d: usize) -> LmEncoder {
        let vocab = Vocabulary::with_sentinels((0..v - 4).map(|i| format!("w{i}"))).unwrap();
        let data = (0..rows * d).map(|i| i as f64 * 0.25).collect();
        LmEncoder::identity(vocab, EmbeddingTable::new(rows, d, data).unwrap(), 16).unwrap()
    }

    #[test]
    fn identity_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let lm = toy_identity(10, 10, 4);
        let path = lm.save(dir.path()).unwrap();
        let back = LmEncoder::load(&path).unwrap();
        assert_eq!(back.mode(), LmMode::Identity);
        assert_eq!(back.vocab(), lm.vocab());
        assert_eq!(back.embeddings(), lm.embeddings());
        let x = back.embed_tokens(&[5]).unwrap();
        assert_eq!(back.contextualize_values(&x).unwrap(), x);
    }

    #[test]
    fn transformer_round_trip_within_f32() {
        let dir = tempfile::tempdir().unwrap();
        let vocab = Vocabulary::with_sentinels(["a", "b", "c"]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data = (0..7 * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let lm = LmEncoder::random_transformer(
            vocab,
            EmbeddingTable::new(7, 8, data).unwrap(),
            LmShape { layers: 2, heads: 2, ff_dim: 12, max_len: 10 },
            3,
        )
        .unwrap();
        lm.save(dir.path()).unwrap();
        let back = LmEncoder::load(dir.path()).unwrap();
        assert_eq!(back.shape(), lm.shape());
        for (a, b) in back.parameters().iter().zip(lm.parameters()) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn corrupted_blob_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        toy_identity(10, 10, 4).save(dir.path()).unwrap();
        let blob = dir.path().join(BLOB_FILE);
        let mut bytes = fs::read(&blob).unwrap();
        bytes[3] ^= 0x01;
        fs::write(&blob, bytes).unwrap();
        assert!(matches!(LmEncoder::load(dir.path()), Err(LmError::ChecksumMismatch { .. })));
    }

    fn rewrite_manifest(dir: &Path, edit: impl FnOnce(&mut LmManifest)) {
        let p = dir.join(MANIFEST_FILE);
        let mut m: LmManifest = serde_json::from_str(&fs::read_to_string(&p).unwrap()).unwrap();
        edit(&mut m);
        fs::write(&p, serde_json::to_string(&m).unwrap()).unwrap();
    }

    #[test]
    fn nine_rows_for_ten_tokens_is_a_dimension_error() {
        let dir = tempfile::tempdir().unwrap();
        // write a consistent 9-row file, then claim a tenth token
        let lm = toy_identity(9, 9, 4);
        lm.save(dir.path()).unwrap();
        rewrite_manifest(dir.path(), |m| {
            m.vocabulary.push("extra".into());
            m.vocab_size = 10;
            m.tensors[0].shape = vec![9, 4];
        });
        assert!(matches!(LmEncoder::load(dir.path()), Err(LmError::Dimension(_))));
    }

    #[test]
    fn missing_sentinel_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        toy_identity(10, 10, 4).save(dir.path()).unwrap();
        rewrite_manifest(dir.path(), |m| m.sentinels.unk = 42);
        assert!(matches!(LmEncoder::load(dir.path()), Err(LmError::MissingSentinel(_))));
        rewrite_manifest(dir.path(), |m| m.sentinels.unk = m.sentinels.bos);
        assert!(matches!(LmEncoder::load(dir.path()), Err(LmError::MissingSentinel(_))));
    }
}
