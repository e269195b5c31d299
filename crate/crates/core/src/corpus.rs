//! Parallel text corpora: `<split>.src` / `<split>.tgt`, one sentence per
//! line, whitespace tokenised, lowercased on ingest.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lm::{LmError, Vocabulary};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{split} split has {src} source lines but {tgt} target lines")]
    CountMismatch { split: Split, src: usize, tgt: usize },
    #[error("{file}:{line}: empty sentence")]
    EmptyLine { file: String, line: usize },
    #[error("{0} split is empty")]
    Empty(Split),
    #[error("unknown split {0:?}")]
    UnknownSplit(String),
    #[error(transparent)]
    Vocabulary(#[from] LmError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(CorpusError::UnknownSplit(other.into())),
        }
    }
}

/// Aligned sentence pairs for one split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParallelCorpus {
    pub split: Split,
    pub pairs: Vec<(String, String)>,
}

fn normalize(line: &str) -> String {
    line.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

fn read_lines(path: &Path) -> Result<Vec<String>, CorpusError> {
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io { path: path.display().to_string(), source })?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let n = normalize(line);
        if n.is_empty() {
            return Err(CorpusError::EmptyLine { file: path.display().to_string(), line: i + 1 });
        }
        out.push(n);
    }
    Ok(out)
}

impl ParallelCorpus {
    pub fn new(split: Split, pairs: Vec<(String, String)>) -> Self {
        Self { split, pairs }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn load(dir: &Path, split: Split) -> Result<Self, CorpusError> {
        let src = read_lines(&dir.join(format!("{split}.src")))?;
        let tgt = read_lines(&dir.join(format!("{split}.tgt")))?;
        if src.len() != tgt.len() {
            return Err(CorpusError::CountMismatch { split, src: src.len(), tgt: tgt.len() });
        }
        if src.is_empty() {
            return Err(CorpusError::Empty(split));
        }
        Ok(Self { split, pairs: src.into_iter().zip(tgt).collect() })
    }

    pub fn save(&self, dir: &Path) -> Result<(), CorpusError> {
        fs::create_dir_all(dir).map_err(|source| CorpusError::Io { path: dir.display().to_string(), source })?;
        for (ext, side) in [("src", 0), ("tgt", 1)] {
            let path = dir.join(format!("{}.{ext}", self.split));
            let mut text = String::new();
            for (s, t) in &self.pairs {
                text.push_str(if side == 0 { s } else { t });
                text.push('\n');
            }
            fs::write(&path, text).map_err(|source| CorpusError::Io { path: path.display().to_string(), source })?;
        }
        Ok(())
    }

    /// Token ids for every pair. Targets are wrapped in `<bos>` ... `<eos>`.
    pub fn encode(&self, src_vocab: &Vocabulary, tgt_vocab: &Vocabulary) -> Vec<Example> {
        self.pairs
            .iter()
            .map(|(s, t)| {
                let mut target = vec![tgt_vocab.bos()];
                target.extend(tgt_vocab.encode(t));
                target.push(tgt_vocab.eos());
                Example { source: src_vocab.encode(s), target }
            })
            .collect()
    }
}

/// One encoded pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub source: Vec<usize>,
    /// `<bos>`, tokens, `<eos>`.
    pub target: Vec<usize>,
}

impl Example {
    /// Target tokens without `<bos>` / `<eos>`.
    pub fn reference(&self) -> &[usize] {
        &self.target[1..self.target.len() - 1]
    }
}

/// Source-side vocabulary: sentinels, then the distinct tokens of
/// `corpus` in sorted order.
pub fn build_source_vocab(corpus: &ParallelCorpus) -> Result<Vocabulary, CorpusError> {
    let mut words: Vec<&str> = corpus.pairs.iter().flat_map(|(s, _)| s.split_whitespace()).collect();
    words.sort_unstable();
    words.dedup();
    Ok(Vocabulary::with_sentinels(words)?)
}
