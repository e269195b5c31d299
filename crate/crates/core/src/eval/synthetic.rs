//! Synonym-cluster translation task. Source tokens name a cluster; each
//! target token is a synonym drawn uniformly from that cluster. The matching
//! identity-mode encoder places synonyms of one cluster close together and
//! different clusters nearly orthogonal.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::corpus::{ParallelCorpus, Split};
use crate::lm::{EmbeddingTable, LmEncoder, Vocabulary};

pub const CLUSTERS_FILE: &str = "clusters.json";
pub const LM_DIR: &str = "lm";

/// Minimum cosine between synonyms of one cluster.
pub const WITHIN_CLUSTER_MIN: f64 = 0.99;
/// Maximum cosine between tokens of different clusters.
pub const CROSS_CLUSTER_MAX: f64 = 0.1;

/// Size of the perturbation that separates synonyms from their centroid.
const SYNONYM_SPREAD: f64 = 0.04;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub clusters: usize,
    pub synonyms: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub train_size: usize,
    pub valid_size: usize,
    pub test_size: usize,
    pub dim: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            clusters: 20,
            synonyms: 3,
            min_len: 3,
            max_len: 8,
            train_size: 2000,
            valid_size: 200,
            test_size: 200,
            dim: 32,
            seed: 0,
        }
    }
}

/// Which cluster each target word belongs to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterMap {
    pub clusters: usize,
    pub synonyms: usize,
    pub members: BTreeMap<String, usize>,
}

impl ClusterMap {
    pub fn cluster_of(&self, token: &str) -> Option<usize> {
        self.members.get(token).copied()
    }

    /// Whether two token strings agree cluster by cluster.
    pub fn same_clusters(&self, candidate: &str, reference: &str) -> bool {
        let c: Vec<_> = candidate.split_whitespace().map(|t| self.cluster_of(t)).collect();
        let r: Vec<_> = reference.split_whitespace().map(|t| self.cluster_of(t)).collect();
        c == r && c.iter().all(Option::is_some)
    }

    pub fn load(dir: &Path) -> Result<Self, EvalError> {
        let path = dir.join(CLUSTERS_FILE);
        let text = fs::read_to_string(&path).map_err(|e| EvalError::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| EvalError::Format(format!("{}: {e}", path.display())))
    }
}

impl ClusterMap {
    /// Replaces each token id by its cluster; ids outside every cluster map
    /// to `clusters + id` so they stay distinct.
    pub fn class_ids(&self, vocab: &Vocabulary, ids: &[usize]) -> Vec<usize> {
        ids.iter().map(|&i| self.cluster_of(vocab.token(i)).unwrap_or(self.clusters + i)).collect()
    }
}

/// Fraction of pairs whose tokens fall in the same clusters position by
/// position.
pub fn cluster_exact_match(map: &ClusterMap, candidates: &[String], references: &[String]) -> Result<f64, EvalError> {
    if candidates.len() != references.len() {
        return Err(EvalError::CountMismatch { candidates: candidates.len(), references: references.len() });
    }
    if candidates.is_empty() {
        return Ok(0.0);
    }
    let hits = candidates.iter().zip(references).filter(|(c, r)| map.same_clusters(c, r)).count();
    Ok(hits as f64 / candidates.len() as f64)
}

pub struct SyntheticTask {
    pub spec: SyntheticSpec,
    pub train: ParallelCorpus,
    pub valid: ParallelCorpus,
    pub test: ParallelCorpus,
    pub lm: LmEncoder,
    pub clusters: ClusterMap,
}

pub fn source_token(cluster: usize) -> String {
    format!("c{cluster}")
}

/// With one synonym per cluster the target word equals the source word, so
/// the task degenerates to copying.
pub fn target_token(spec: &SyntheticSpec, cluster: usize, synonym: usize) -> String {
    if spec.synonyms == 1 {
        source_token(cluster)
    } else {
        format!("c{cluster}_{synonym}")
    }
}

/// Draws a target sentence for a sequence of source clusters.
pub fn sample_reference<R: Rng + ?Sized>(spec: &SyntheticSpec, clusters: &[usize], rng: &mut R) -> String {
    clusters
        .iter()
        .map(|&c| target_token(spec, c, rng.random_range(0..spec.synonyms)))
        .collect::<Vec<_>>()
        .join(" ")
}

fn unit(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
}

/// `count` orthonormal random vectors in `dim` dimensions.
fn orthonormal(count: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        for b in &basis {
            let p = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        if dot(&v, &v) > 1e-6 {
            unit(&mut v);
            basis.push(v);
        }
    }
    basis
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |m: String| Err(EvalError::InvalidSpec(m));
        if self.clusters == 0 || self.synonyms == 0 {
            return bad("clusters and synonyms must be positive".into());
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad(format!("sentence length range {}..={} is empty", self.min_len, self.max_len));
        }
        if self.clusters + 4 > self.dim {
            return bad(format!(
                "{} clusters plus 4 sentinels need at least as many dimensions, got {}",
                self.clusters, self.dim
            ));
        }
        if self.train_size == 0 || self.valid_size == 0 || self.test_size == 0 {
            return bad("every split needs at least one pair".into());
        }
        Ok(())
    }
}

/// Builds the task in memory and checks its embedding geometry.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticTask, EvalError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (c, s, d) = (spec.clusters, spec.synonyms, spec.dim);

    let mut words = Vec::with_capacity(c * s);
    let mut members = BTreeMap::new();
    for k in 0..c {
        for j in 0..s {
            let w = target_token(spec, k, j);
            members.insert(w.clone(), k);
            words.push(w);
        }
    }
    let vocab = Vocabulary::with_sentinels(words)?;

    let basis = orthonormal(c + 4, d, &mut rng);
    let mut rows = vec![Vec::new(); vocab.len()];
    for (slot, id) in [vocab.pad(), vocab.bos(), vocab.eos(), vocab.unk()].into_iter().enumerate() {
        rows[id] = basis[c + slot].clone();
    }
    for k in 0..c {
        let centroid = &basis[k];
        for j in 0..s {
            let mut noise: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let p = dot(&noise, centroid);
            noise.iter_mut().zip(centroid).for_each(|(x, y)| *x -= p * y);
            unit(&mut noise);
            let spread = if s == 1 { 0.0 } else { SYNONYM_SPREAD };
            let mut v: Vec<f64> = centroid.iter().zip(&noise).map(|(a, b)| a + spread * b).collect();
            unit(&mut v);
            rows[vocab.id(&target_token(spec, k, j))] = v;
        }
    }

    for a in 0..c {
        for b in a + 1..c {
            let cos = cosine(&basis[a], &basis[b]);
            if cos > CROSS_CLUSTER_MAX {
                return Err(EvalError::Geometry(format!("centroids {a} and {b} have cosine {cos}")));
            }
        }
    }
    let word_ids: Vec<(usize, usize)> = members.iter().map(|(w, &k)| (vocab.id(w), k)).collect();
    for (i, &(x, kx)) in word_ids.iter().enumerate() {
        for &(y, ky) in &word_ids[i + 1..] {
            let cos = cosine(&rows[x], &rows[y]);
            let ok = if kx == ky { cos >= WITHIN_CLUSTER_MIN } else { cos <= CROSS_CLUSTER_MAX };
            if !ok {
                return Err(EvalError::Geometry(format!(
                    "tokens {} and {} have cosine {cos}",
                    vocab.token(x),
                    vocab.token(y)
                )));
            }
        }
    }

    let table = EmbeddingTable::new(vocab.len(), d, rows.concat())?;
    let lm = LmEncoder::identity(vocab, table, 64.max(spec.max_len + 2))?;

    let mut split = |split: Split, size: usize| {
        let pairs = (0..size)
            .map(|_| {
                let len = rng.random_range(spec.min_len..=spec.max_len);
                let cl: Vec<usize> = (0..len).map(|_| rng.random_range(0..c)).collect();
                let src = cl.iter().map(|&k| source_token(k)).collect::<Vec<_>>().join(" ");
                (src, sample_reference(spec, &cl, &mut rng))
            })
            .collect();
        ParallelCorpus::new(split, pairs)
    };
    let train = split(Split::Train, spec.train_size);
    let valid = split(Split::Valid, spec.valid_size);
    let test = split(Split::Test, spec.test_size);
    Ok(SyntheticTask { spec: *spec, train, valid, test, lm, clusters: ClusterMap { clusters: c, synonyms: s, members } })
}

/// Generates the task and writes the three splits, `clusters.json` and the
/// encoder under `lm/` into `out_dir`.
pub fn make_synthetic_corpus(spec: &SyntheticSpec, out_dir: &Path) -> Result<SyntheticTask, EvalError> {
    let task = generate_synthetic(spec)?;
    for corpus in [&task.train, &task.valid, &task.test] {
        corpus.save(out_dir)?;
    }
    task.lm.save(&out_dir.join(LM_DIR))?;
    let path = out_dir.join(CLUSTERS_FILE);
    let json = serde_json::to_string_pretty(&task.clusters).map_err(|e| EvalError::Format(e.to_string()))?;
    fs::write(&path, json).map_err(|e| EvalError::io(&path, e))?;
    Ok(task)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(c: usize, s: usize) -> SyntheticSpec {
        SyntheticSpec { clusters: c, synonyms: s, train_size: 30, valid_size: 5, test_size: 5, ..SyntheticSpec::default() }
    }

    #[test]
    fn single_cluster_single_synonym_is_copying() {
        let task = generate_synthetic(&small(1, 1)).unwrap();
        for (s, t) in &task.train.pairs {
            assert_eq!(s, t);
        }
    }

    #[test]
    fn twenty_clusters_have_separated_geometry() {
        let task = generate_synthetic(&small(20, 3)).unwrap();
        let e = task.lm.embeddings();
        let v = task.lm.vocab();
        let mut centroids = vec![vec![0.0; 32]; 20];
        for (w, &k) in &task.clusters.members {
            for (a, b) in centroids[k].iter_mut().zip(e.row(v.id(w))) {
                *a += b;
            }
        }
        for a in 0..20 {
            for b in a + 1..20 {
                assert!(cosine(&centroids[a], &centroids[b]) <= CROSS_CLUSTER_MAX);
            }
        }
        assert!(cosine(e.row(v.id("c4_0")), e.row(v.id("c4_2"))) >= WITHIN_CLUSTER_MIN);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic(&small(5, 2)).unwrap();
        let b = generate_synthetic(&small(5, 2)).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.lm.parameter_fingerprint(), b.lm.parameter_fingerprint());
    }

    #[test]
    fn resampled_references_differ_only_within_clusters() {
        let spec = small(6, 3);
        let task = generate_synthetic(&spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let clusters = [0, 3, 5, 3];
        let a = sample_reference(&spec, &clusters, &mut rng);
        let b = sample_reference(&spec, &clusters, &mut rng);
        assert!(task.clusters.same_clusters(&a, &b));
    }

    #[test]
    fn too_many_clusters_is_rejected() {
        let spec = SyntheticSpec { clusters: 40, ..small(1, 1) };
        assert!(matches!(generate_synthetic(&spec), Err(EvalError::InvalidSpec(_))));
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let task = make_synthetic_corpus(&small(3, 2), dir.path()).unwrap();
        assert_eq!(ParallelCorpus::load(dir.path(), Split::Valid).unwrap(), task.valid);
        assert_eq!(ClusterMap::load(dir.path()).unwrap(), task.clusters);
        let lm = LmEncoder::load(&dir.path().join(LM_DIR)).unwrap();
        assert_eq!(lm.vocab(), task.lm.vocab());
    }
}
