//! Synthetic few-shot benchmarks with a class taxonomy and per-domain shift.
//!
//! Node semantic vectors diffuse down a balanced tree (`child = parent +
//! N(0, tau^2 I)`); word vectors are noisy copies of them. Leaf classes
//! become dataset classes whose feature-space mean is a fixed random linear
//! map of their semantic vector. Each non-target domain applies
//! `x -> x + gamma * ((R - I) x + t)` with a random orthogonal `R` and
//! standard normal `t`; domain 0 is the target and is left untouched.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::episodes::{write_file, FeatureDataset, Splits};
use crate::kg::{self, ConceptGraph};
use crate::{rng, Error, Result};

pub const EDGES_FILE: &str = "edges.tsv";
pub const VECTORS_FILE: &str = "vectors.txt";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub branching: usize,
    pub depth: usize,
    pub feature_dim: usize,
    pub word_dim: usize,
    pub domains: usize,
    pub samples_per_class_per_domain: usize,
    pub train_classes: usize,
    pub val_classes: usize,
    pub test_classes: usize,
    /// Training classes that keep their target-domain samples for `tgt`
    /// and `src+tgt`.
    pub target_train_classes: usize,
    /// Semantic diffusion scale per tree level.
    pub tau: f64,
    /// Within-class feature noise.
    pub sigma: f64,
    /// Domain transform strength.
    pub gamma: f64,
    /// Noise added to semantic vectors to form word vectors.
    pub word_noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self::easy_shift()
    }
}

impl SynthConfig {
    pub fn easy_shift() -> Self {
        Self {
            branching: 3,
            depth: 3,
            feature_dim: 32,
            word_dim: 32,
            domains: 3,
            samples_per_class_per_domain: 40,
            train_classes: 16,
            val_classes: 4,
            test_classes: 6,
            target_train_classes: 8,
            tau: 1.0,
            sigma: 2.0,
            gamma: 0.5,
            word_noise: 0.1,
            seed: 7,
        }
    }

    pub fn hard_shift() -> Self {
        Self {
            gamma: 1.5,
            ..Self::easy_shift()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "easy-shift" => Some(Self::easy_shift()),
            "hard-shift" => Some(Self::hard_shift()),
            _ => None,
        }
    }

    pub fn preset_names() -> &'static [&'static str] {
        &["easy-shift", "hard-shift"]
    }

    pub fn class_count(&self) -> usize {
        self.train_classes + self.val_classes + self.test_classes
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.branching == 0 || self.depth == 0 {
            return bad("taxonomy needs branching and depth of at least 1".into());
        }
        let leaves = (self.branching as u128).checked_pow(self.depth as u32);
        if leaves.is_none_or(|l| l > 1_000_000) {
            return bad(format!("taxonomy {}^{} is too large", self.branching, self.depth));
        }
        if leaves.unwrap() < self.class_count() as u128 {
            return bad(format!(
                "{} leaves cannot hold {} classes",
                leaves.unwrap(),
                self.class_count()
            ));
        }
        if self.feature_dim == 0 || self.word_dim == 0 || self.domains == 0 {
            return bad("dimensions and domain count must be positive".into());
        }
        if self.samples_per_class_per_domain == 0 || self.train_classes == 0 {
            return bad("need at least one training class and one sample per class".into());
        }
        if self.target_train_classes > self.train_classes {
            return bad(format!(
                "{} target-available classes exceed {} training classes",
                self.target_train_classes, self.train_classes
            ));
        }
        for (name, v) in [
            ("tau", self.tau),
            ("sigma", self.sigma),
            ("gamma", self.gamma),
            ("word_noise", self.word_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Taxonomy {
    pub graph: ConceptGraph,
    pub edges: Vec<(String, String)>,
    /// Noise-free semantic vector of every node.
    pub semantic: BTreeMap<String, Vec<f64>>,
    pub leaves: Vec<String>,
    pub parent: BTreeMap<String, String>,
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect()
}

/// Balanced tree with diffused semantic vectors and noisy word vectors.
pub fn generate_taxonomy(config: &SynthConfig) -> Result<Taxonomy> {
    config.validate()?;
    let mut rng = rng::seeded(rng::derive_seed(config.seed, "taxonomy"));
    let j = config.word_dim;
    let mut semantic = BTreeMap::new();
    let mut parent = BTreeMap::new();
    let mut edges = Vec::new();
    let root = "t".to_string();
    semantic.insert(root.clone(), gaussian(&mut rng, j, 1.0));
    let mut level = vec![root];
    for _ in 0..config.depth {
        let mut next = Vec::with_capacity(level.len() * config.branching);
        for p in &level {
            let base = semantic[p].clone();
            for c in 0..config.branching {
                let name = format!("{p}_{c}");
                let step = gaussian(&mut rng, j, config.tau);
                let v = base.iter().zip(&step).map(|(a, b)| a + b).collect();
                semantic.insert(name.clone(), v);
                parent.insert(name.clone(), p.clone());
                edges.push((p.clone(), name.clone()));
                next.push(name);
            }
        }
        level = next;
    }
    let mut words = BTreeMap::new();
    for (name, v) in &semantic {
        let noise = gaussian(&mut rng, j, config.word_noise);
        words.insert(name.clone(), v.iter().zip(&noise).map(|(a, b)| a + b).collect());
    }
    let graph = ConceptGraph::build(&edges, &words)?;
    Ok(Taxonomy {
        graph,
        edges,
        semantic,
        leaves: level,
        parent,
    })
}

/// Random orthogonal matrix by Gram-Schmidt on Gaussian columns (row-major).
fn random_orthogonal(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(d);
    while cols.len() < d {
        let mut v = gaussian(rng, d, 1.0);
        for u in &cols {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            for (x, y) in v.iter_mut().zip(u) {
                *x -= dot * y;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            cols.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    let mut out = vec![0.0; d * d];
    for (c, col) in cols.iter().enumerate() {
        for (r, v) in col.iter().enumerate() {
            out[r * d + c] = *v;
        }
    }
    out
}

struct DomainShift {
    rotation: Vec<f64>,
    translation: Vec<f64>,
}

impl DomainShift {
    fn apply(&self, x: &[f64], gamma: f64) -> Vec<f64> {
        let d = x.len();
        (0..d)
            .map(|r| {
                let rx: f64 = (0..d).map(|c| self.rotation[r * d + c] * x[c]).sum();
                x[r] + gamma * (rx - x[r] + self.translation[r])
            })
            .collect()
    }
}

/// Samples for every chosen leaf class in every domain.
pub fn generate_dataset(config: &SynthConfig, taxonomy: &Taxonomy) -> Result<FeatureDataset> {
    config.validate()?;
    let (d, j) = (config.feature_dim, config.word_dim);
    if taxonomy.leaves.len() < config.class_count() {
        return Err(Error::InvalidConfig("taxonomy has too few leaves".into()));
    }

    let mut leaf_rng = rng::seeded(rng::derive_seed(config.seed, "classes"));
    let mut leaves = taxonomy.leaves.clone();
    leaves.shuffle(&mut leaf_rng);
    leaves.truncate(config.class_count());
    // class ids follow name order so the dataset does not depend on shuffle layout
    leaves.sort();
    let mut order: Vec<usize> = (0..leaves.len()).collect();
    order.shuffle(&mut leaf_rng);
    let (train, rest) = order.split_at(config.train_classes);
    let (val, test) = rest.split_at(config.val_classes);
    let mut splits = Splits {
        train: train.to_vec(),
        val: val.to_vec(),
        test: test.to_vec(),
    };
    splits.train.sort_unstable();
    splits.val.sort_unstable();
    splits.test.sort_unstable();
    let mut target_train = train[..config.target_train_classes].to_vec();
    target_train.sort_unstable();

    let mut map_rng = rng::seeded(rng::derive_seed(config.seed, "embedding"));
    let projection = gaussian(&mut map_rng, d * j, 1.0 / (j as f64).sqrt());
    let means: Vec<Vec<f64>> = leaves
        .iter()
        .map(|leaf| {
            let s = &taxonomy.semantic[leaf];
            (0..d)
                .map(|r| (0..j).map(|c| projection[r * j + c] * s[c]).sum())
                .collect()
        })
        .collect();

    let mut shift_rng = rng::seeded(rng::derive_seed(config.seed, "domains"));
    let shifts: Vec<DomainShift> = (1..config.domains)
        .map(|_| DomainShift {
            rotation: random_orthogonal(d, &mut shift_rng),
            translation: gaussian(&mut shift_rng, d, 1.0),
        })
        .collect();

    let mut sample_rng = rng::seeded(rng::derive_seed(config.seed, "samples"));
    let total = leaves.len() * config.domains * config.samples_per_class_per_domain;
    let mut features = Vec::with_capacity(total * d);
    let mut labels = Vec::with_capacity(total);
    let mut domains = Vec::with_capacity(total);
    for (class, mean) in means.iter().enumerate() {
        for domain in 0..config.domains {
            let center = if domain == 0 {
                mean.clone()
            } else {
                shifts[domain - 1].apply(mean, config.gamma)
            };
            for _ in 0..config.samples_per_class_per_domain {
                let noise = gaussian(&mut sample_rng, d, config.sigma);
                features.extend(center.iter().zip(&noise).map(|(c, e)| f64::from((c + e) as f32)));
                labels.push(class);
                domains.push(domain);
            }
        }
    }
    let features = Tensor::matrix(total, d, features)?;
    Ok(FeatureDataset::new(
        features,
        labels,
        domains,
        leaves,
        splits,
        0,
        Some(target_train),
    )?)
}

/// A generated benchmark in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub dataset: FeatureDataset,
    pub graph: Arc<ConceptGraph>,
}

impl Benchmark {
    pub fn generate(config: &SynthConfig) -> Result<Self> {
        let taxonomy = generate_taxonomy(config)?;
        let dataset = generate_dataset(config, &taxonomy)?;
        Ok(Self {
            dataset,
            graph: Arc::new(taxonomy.graph),
        })
    }

    /// Loads `manifest.json` plus the graph files next to it.
    pub fn load(dir: &Path) -> Result<Self> {
        let dataset = FeatureDataset::load(&dir.join(MANIFEST_FILE))?;
        let graph = load_graph(&dir.join(EDGES_FILE), &dir.join(VECTORS_FILE))?;
        Ok(Self {
            dataset,
            graph: Arc::new(graph),
        })
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        write_benchmark(&self.dataset, &self.graph, dir)
    }
}

pub fn load_graph(edges: &Path, vectors: &Path) -> Result<ConceptGraph> {
    let edge_list = kg::read_edge_list(edges)?;
    let table = kg::read_word_vectors(vectors)?;
    Ok(ConceptGraph::build(&edge_list, &table)?)
}

/// Writes the dataset files plus `edges.tsv` and `vectors.txt`; returns the
/// manifest path.
pub fn write_benchmark(dataset: &FeatureDataset, graph: &ConceptGraph, dir: &Path) -> Result<PathBuf> {
    if !dir.is_dir() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "output directory does not exist"),
        ));
    }
    let manifest = dataset.write(dir)?;
    write_file(&dir.join(EDGES_FILE), kg::format_edge_list(&graph.edge_names()).as_bytes())?;
    write_file(&dir.join(VECTORS_FILE), kg::format_word_vectors(&graph.vector_table()).as_bytes())?;
    Ok(manifest)
}

/// Creates `dir` (and parents) if needed, then writes the benchmark.
pub fn write_benchmark_creating(bench: &Benchmark, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    bench.write(dir)
}

#[cfg(test)]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episodes::{Split, ShiftSetting};

    fn small() -> SynthConfig {
        SynthConfig {
            branching: 2,
            depth: 3,
            feature_dim: 6,
            word_dim: 5,
            domains: 2,
            samples_per_class_per_domain: 4,
            train_classes: 4,
            val_classes: 2,
            test_classes: 2,
            target_train_classes: 2,
            ..SynthConfig::easy_shift()
        }
    }

    #[test]
    fn smallest_tree() {
        let cfg = SynthConfig {
            branching: 2,
            depth: 1,
            train_classes: 1,
            val_classes: 1,
            test_classes: 0,
            target_train_classes: 1,
            ..SynthConfig::easy_shift()
        };
        let t = generate_taxonomy(&cfg).unwrap();
        assert_eq!(t.graph.node_count(), 3);
        assert_eq!(t.graph.edges().len(), 2);
        assert_eq!(t.leaves, vec!["t_0", "t_1"]);
    }

    #[test]
    fn zero_diffusion_collapses_to_root() {
        let cfg = SynthConfig { tau: 0.0, ..small() };
        let t = generate_taxonomy(&cfg).unwrap();
        let root = &t.semantic["t"];
        assert!(t.semantic.values().all(|v| v == root));
    }

    #[test]
    fn siblings_are_closer() {
        let mut sib = 0.0;
        let mut non = 0.0;
        for seed in 0..20 {
            let t = generate_taxonomy(&SynthConfig { seed, ..SynthConfig::easy_shift() }).unwrap();
            let (mut s, mut ns, mut n, mut nn) = (0.0, 0usize, 0.0, 0usize);
            for (i, a) in t.leaves.iter().enumerate() {
                for b in &t.leaves[i + 1..] {
                    let d = sq_dist(&t.semantic[a], &t.semantic[b]);
                    if t.parent[a] == t.parent[b] {
                        s += d;
                        ns += 1;
                    } else {
                        n += d;
                        nn += 1;
                    }
                }
            }
            sib += s / ns as f64;
            non += n / nn as f64;
        }
        assert!(sib < non, "{sib} vs {non}");
    }

    #[test]
    fn splits_and_determinism() {
        let cfg = small();
        let a = Benchmark::generate(&cfg).unwrap();
        let b = Benchmark::generate(&cfg).unwrap();
        assert_eq!(a, b);
        let s = a.dataset.splits();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (4, 2, 2));
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), 8);
        assert_eq!(a.dataset.len(), 8 * 2 * 4);
        let other = Benchmark::generate(&SynthConfig { seed: 8, ..cfg }).unwrap();
        assert_ne!(a.dataset, other.dataset);
    }

    #[test]
    fn degenerate_single_class() {
        let cfg = SynthConfig {
            branching: 1,
            depth: 1,
            domains: 1,
            train_classes: 1,
            val_classes: 0,
            test_classes: 0,
            target_train_classes: 1,
            sigma: 0.0,
            ..small()
        };
        let b = Benchmark::generate(&cfg).unwrap();
        let f = b.dataset.features();
        for i in 1..b.dataset.len() {
            assert_eq!(f.row(i), f.row(0));
        }
    }

    #[test]
    fn no_shift_means_identical_domains() {
        let cfg = SynthConfig { gamma: 0.0, sigma: 0.0, ..small() };
        let b = Benchmark::generate(&cfg).unwrap();
        let f = b.dataset.features();
        let per = cfg.samples_per_class_per_domain;
        // class 0: domain 0 rows then domain 1 rows
        assert_eq!(f.row(0), f.row(per));
        let src = b.dataset.eligible_samples(b.dataset.splits().train[0], Split::Train, ShiftSetting::SrcTgt);
        let full = b.dataset.eligible_samples(b.dataset.splits().train[0], Split::Train, ShiftSetting::FullTgt);
        assert!(src.len() >= full.len());
    }

    #[test]
    fn large_shift_dominates_noise() {
        let cfg = SynthConfig { gamma: 3.0, ..SynthConfig::easy_shift() };
        let b = Benchmark::generate(&cfg).unwrap();
        let data = &b.dataset;
        let f = data.features();
        let (mut total, mut count) = (0.0, 0usize);
        for i in 0..data.len() {
            for j in i + 1..data.len() {
                if data.labels()[i] == data.labels()[j] && data.domains()[i] != data.domains()[j] {
                    total += sq_dist(f.row(i), f.row(j)).sqrt();
                    count += 1;
                }
            }
        }
        let mean = total / count as f64;
        let noise_scale = cfg.sigma * (2.0 * cfg.feature_dim as f64).sqrt();
        assert!(mean > noise_scale, "{mean} vs {noise_scale}");
    }

    #[test]
    fn orthogonal_matrix() {
        let mut r = rng::seeded(3);
        let d = 7;
        let q = random_orthogonal(d, &mut r);
        for a in 0..d {
            for b in 0..d {
                let dot: f64 = (0..d).map(|k| q[k * d + a] * q[k * d + b]).sum();
                let expect = if a == b { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn write_load_write_is_byte_identical() {
        let b = Benchmark::generate(&small()).unwrap();
        let one = tempfile::tempdir().unwrap();
        let two = tempfile::tempdir().unwrap();
        b.write(one.path()).unwrap();
        let back = Benchmark::load(one.path()).unwrap();
        assert_eq!(back, b);
        back.write(two.path()).unwrap();
        for name in [MANIFEST_FILE, "features.f32", "labels.txt", "domains.txt", EDGES_FILE, VECTORS_FILE] {
            assert_eq!(
                fs::read(one.path().join(name)).unwrap(),
                fs::read(two.path().join(name)).unwrap(),
                "{name}"
            );
        }
        assert!(b.write(&one.path().join("nope")).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(SynthConfig { branching: 2, depth: 2, ..SynthConfig::easy_shift() }.validate().is_err());
        assert!(SynthConfig { sigma: -1.0, ..small() }.validate().is_err());
        assert!(SynthConfig { target_train_classes: 9, ..small() }.validate().is_err());
        assert!(SynthConfig::preset("hard-shift").is_some());
        assert!(SynthConfig::preset("medium").is_none());
        assert!(SynthConfig::hard_shift().gamma > SynthConfig::easy_shift().gamma);
    }
}
