use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::LmError;

pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";

/// Indices of the four sentinel tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentinels {
    pub bos: usize,
    pub eos: usize,
    pub pad: usize,
    pub unk: usize,
}

/// Ordered token inventory with its sentinels.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    sentinels: Sentinels,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>, sentinels: Sentinels) -> Result<Self, LmError> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(LmError::Vocabulary(format!("duplicate token `{t}`")));
            }
        }
        let Sentinels { bos, eos, pad, unk } = sentinels;
        for (name, idx) in [("bos", bos), ("eos", eos), ("pad", pad), ("unk", unk)] {
            if idx >= tokens.len() {
                return Err(LmError::MissingSentinel(format!("{name} index {idx} outside vocabulary of {}", tokens.len())));
            }
        }
        let mut ids = [bos, eos, pad, unk];
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(LmError::MissingSentinel(format!("sentinel indices are not distinct: {sentinels:?}")));
        }
        Ok(Self { tokens, index, sentinels })
    }

    /// `<pad> <bos> <eos> <unk>` followed by `words` in order.
    pub fn with_sentinels<I, S>(words: I) -> Result<Self, LmError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens: Vec<String> = [PAD, BOS, EOS, UNK].iter().map(|s| s.to_string()).collect();
        tokens.extend(words.into_iter().map(Into::into));
        Self::new(tokens, Sentinels { pad: 0, bos: 1, eos: 2, unk: 3 })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn sentinels(&self) -> Sentinels {
        self.sentinels
    }

    pub fn bos(&self) -> usize {
        self.sentinels.bos
    }

    pub fn eos(&self) -> usize {
        self.sentinels.eos
    }

    pub fn pad(&self) -> usize {
        self.sentinels.pad
    }

    pub fn unk(&self) -> usize {
        self.sentinels.unk
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Index of `token`, or of `<unk>` when absent.
    pub fn id(&self, token: &str) -> usize {
        self.get(token).unwrap_or(self.sentinels.unk)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    /// Whitespace-tokenised ids of `text`, without sentinels.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    /// Space-joined tokens with bos/eos/pad removed.
    pub fn decode(&self, ids: &[usize]) -> String {
        self.strip(ids).iter().map(|&i| self.token(i)).collect::<Vec<_>>().join(" ")
    }

    /// Whether `id` is bos, eos or pad. `<unk>` is an ordinary token here.
    pub fn is_structural(&self, id: usize) -> bool {
        id == self.sentinels.bos || id == self.sentinels.eos || id == self.sentinels.pad
    }

    /// `ids` without bos, eos and pad.
    pub fn strip(&self, ids: &[usize]) -> Vec<usize> {
        ids.iter().copied().filter(|&i| !self.is_structural(i)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sentinels_must_be_present_and_distinct() {
        let toks = |n: usize| (0..n).map(|i| format!("t{i}")).collect::<Vec<_>>();
        assert!(Vocabulary::new(toks(4), Sentinels { bos: 0, eos: 1, pad: 2, unk: 3 }).is_ok());
        assert!(matches!(
            Vocabulary::new(toks(4), Sentinels { bos: 0, eos: 1, pad: 2, unk: 2 }),
            Err(LmError::MissingSentinel(_))
        ));
        assert!(matches!(
            Vocabulary::new(toks(3), Sentinels { bos: 0, eos: 1, pad: 2, unk: 3 }),
            Err(LmError::MissingSentinel(_))
        ));
        let dup = vec!["a".to_string(), "a".to_string(), "b".into(), "c".into()];
        assert!(matches!(
            Vocabulary::new(dup, Sentinels { bos: 0, eos: 1, pad: 2, unk: 3 }),
            Err(LmError::Vocabulary(_))
        ));
    }

    #[test]
    fn encode_decode_strip() {
        let v = Vocabulary::with_sentinels(["a", "b"]).unwrap();
        assert_eq!(v.encode("a b zzz"), vec![4, 5, v.unk()]);
        assert_eq!(v.decode(&[v.bos(), 4, 5, v.eos(), v.pad()]), "a b");
        assert_eq!(v.strip(&[v.unk(), v.bos()]), vec![v.unk()]);
    }
}
