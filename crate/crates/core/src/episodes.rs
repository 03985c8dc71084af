//! Labelled, domain-tagged feature datasets and N-way K-shot episode
//! sampling under the three shift settings.
//!
//! Training episodes follow the active [`ShiftSetting`]:
//!
//! | setting   | training classes          | training samples                                  |
//! |-----------|---------------------------|---------------------------------------------------|
//! | `tgt`     | target-available subset   | target domain only                                |
//! | `src+tgt` | all training classes      | every auxiliary-domain sample plus target samples of the target-available subset |
//! | `fulltgt` | all training classes      | target domain only                                |
//!
//! Validation and test episodes always draw from the target domain.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::{rng, Error, Result};

/// Default query samples per class.
pub const DEFAULT_QUERIES: usize = 15;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EpisodeError {
    #[error("{split} split has {available} eligible classes, episode needs {needed}")]
    InsufficientClasses {
        split: Split,
        needed: usize,
        available: usize,
    },
    #[error("class {class} has {available} eligible samples, episode needs {needed}")]
    InsufficientSamples {
        class: usize,
        needed: usize,
        available: usize,
    },
    #[error("episode has {found} classes, expected {expected}")]
    Cardinality { expected: usize, found: usize },
    #[error("class {0} appears more than once in the episode")]
    DuplicateClass(usize),
    #[error("{set} set has {found} samples, expected {expected}")]
    SetSize {
        set: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("{set} set has {found} samples of class position {class_idx}, expected {expected}")]
    PerClassCount {
        set: &'static str,
        class_idx: usize,
        expected: usize,
        found: usize,
    },
    #[error("sample {0} is in both the support and the query set")]
    Overlap(usize),
    #[error("sample {0} appears twice in one set")]
    RepeatedSample(usize),
    #[error("class position {class_idx} out of range for a {n_way}-way episode")]
    ClassOutOfRange { class_idx: usize, n_way: usize },
    #[error("{set} features have {found} rows for {expected} samples")]
    FeatureRows {
        set: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("class {0} is assigned to more than one split")]
    SplitOverlap(usize),
    #[error("invalid dataset: {0}")]
    Dataset(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ShiftSetting {
    #[serde(rename = "tgt")]
    Tgt,
    #[serde(rename = "src+tgt")]
    SrcTgt,
    #[serde(rename = "fulltgt")]
    FullTgt,
}

impl fmt::Display for ShiftSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShiftSetting::Tgt => "tgt",
            ShiftSetting::SrcTgt => "src+tgt",
            ShiftSetting::FullTgt => "fulltgt",
        })
    }
}

impl FromStr for ShiftSetting {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "tgt" => Ok(ShiftSetting::Tgt),
            "src+tgt" => Ok(ShiftSetting::SrcTgt),
            "fulltgt" => Ok(ShiftSetting::FullTgt),
            other => Err(format!(
                "unknown setting {other:?} (expected tgt, src+tgt or fulltgt)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    pub fn get(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// On-disk dataset description. File paths are relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub feature_file: PathBuf,
    pub feature_dim: usize,
    pub count: usize,
    pub labels_file: PathBuf,
    pub domains_file: PathBuf,
    pub class_names: Vec<String>,
    pub splits: Splits,
    pub target_domain: usize,
    /// Training classes whose target-domain samples are used by `tgt` and
    /// `src+tgt`. Absent means every training class.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_train_classes: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDataset {
    features: Tensor,
    labels: Vec<usize>,
    domains: Vec<usize>,
    class_names: Vec<String>,
    splits: Splits,
    target_domain: usize,
    target_train_classes: Vec<usize>,
    by_class: Vec<Vec<usize>>,
}

impl FeatureDataset {
    pub fn new(
        features: Tensor,
        labels: Vec<usize>,
        domains: Vec<usize>,
        class_names: Vec<String>,
        splits: Splits,
        target_domain: usize,
        target_train_classes: Option<Vec<usize>>,
    ) -> std::result::Result<Self, EpisodeError> {
        let bad = |m: String| EpisodeError::Dataset(m);
        let (m, _) = features
            .dims2()
            .ok_or_else(|| bad("features must be a matrix".into()))?;
        if labels.len() != m || domains.len() != m {
            return Err(bad(format!(
                "{m} feature rows but {} labels and {} domains",
                labels.len(),
                domains.len()
            )));
        }
        let classes = class_names.len();
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(bad(format!("label {l} but only {classes} class names")));
        }
        let mut assigned = BTreeSet::new();
        for &c in splits.train.iter().chain(&splits.val).chain(&splits.test) {
            if c >= classes {
                return Err(bad(format!("split references unknown class {c}")));
            }
            if !assigned.insert(c) {
                return Err(EpisodeError::SplitOverlap(c));
            }
        }
        let target_train_classes = target_train_classes.unwrap_or_else(|| splits.train.clone());
        if let Some(&c) = target_train_classes
            .iter()
            .find(|c| !splits.train.contains(c))
        {
            return Err(bad(format!(
                "target-available class {c} is not a training class"
            )));
        }
        let mut by_class = vec![Vec::new(); classes];
        for (i, &l) in labels.iter().enumerate() {
            by_class[l].push(i);
        }
        Ok(Self {
            features,
            labels,
            domains,
            class_names,
            splits,
            target_domain,
            target_train_classes,
            by_class,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn domains(&self) -> &[usize] {
        &self.domains
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn splits(&self) -> &Splits {
        &self.splits
    }

    pub fn target_domain(&self) -> usize {
        self.target_domain
    }

    pub fn target_train_classes(&self) -> &[usize] {
        &self.target_train_classes
    }

    /// Classes that may appear in episodes of `split` under `setting`.
    pub fn eligible_classes(&self, split: Split, setting: ShiftSetting) -> &[usize] {
        match (split, setting) {
            (Split::Train, ShiftSetting::Tgt) => &self.target_train_classes,
            _ => self.splits.get(split),
        }
    }

    fn sample_allowed(&self, index: usize, split: Split, setting: ShiftSetting) -> bool {
        let on_target = self.domains[index] == self.target_domain;
        match (split, setting) {
            (Split::Train, ShiftSetting::SrcTgt) => {
                !on_target || self.target_train_classes.contains(&self.labels[index])
            }
            _ => on_target,
        }
    }

    /// Dataset rows of `class` usable in `split` under `setting`.
    pub fn eligible_samples(&self, class: usize, split: Split, setting: ShiftSetting) -> Vec<usize> {
        self.by_class[class]
            .iter()
            .copied()
            .filter(|&i| self.sample_allowed(i, split, setting))
            .collect()
    }

    /// Checks that every eligible class can supply `k + q` samples and that
    /// there are at least `n` such classes.
    pub fn check_capacity(&self, spec: &EpisodeSpec) -> std::result::Result<(), EpisodeError> {
        let classes = self.eligible_classes(spec.split, spec.setting);
        if classes.len() < spec.n_way {
            return Err(EpisodeError::InsufficientClasses {
                split: spec.split,
                needed: spec.n_way,
                available: classes.len(),
            });
        }
        let needed = spec.k_shot + spec.n_query;
        for &c in classes {
            let available = self.eligible_samples(c, spec.split, spec.setting).len();
            if available < needed {
                return Err(EpisodeError::InsufficientSamples {
                    class: c,
                    needed,
                    available,
                });
            }
        }
        Ok(())
    }

    fn rows(&self, indices: &[usize]) -> Tensor {
        let d = self.feature_dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.features.row(i));
        }
        Tensor::matrix(indices.len(), d, data).expect("non-empty selection")
    }

    /// Reads a manifest and the files it names.
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| Error::format(manifest_path, e.to_string()))?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));

        let feature_path = base.join(&manifest.feature_file);
        let bytes = fs::read(&feature_path).map_err(|e| Error::io(&feature_path, e))?;
        let expected = manifest.count * manifest.feature_dim * 4;
        if bytes.len() != expected {
            return Err(Error::format(
                &feature_path,
                format!("{} bytes, expected {expected}", bytes.len()),
            ));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect();
        let features = Tensor::matrix(manifest.count, manifest.feature_dim, data)?;
        let labels = read_int_lines(&base.join(&manifest.labels_file), manifest.count)?;
        let domains = read_int_lines(&base.join(&manifest.domains_file), manifest.count)?;
        Ok(Self::new(
            features,
            labels,
            domains,
            manifest.class_names,
            manifest.splits,
            manifest.target_domain,
            manifest.target_train_classes,
        )?)
    }

    pub fn manifest(&self) -> DatasetManifest {
        let all_train = self.target_train_classes == self.splits.train;
        DatasetManifest {
            feature_file: "features.f32".into(),
            feature_dim: self.feature_dim(),
            count: self.len(),
            labels_file: "labels.txt".into(),
            domains_file: "domains.txt".into(),
            class_names: self.class_names.clone(),
            splits: self.splits.clone(),
            target_domain: self.target_domain,
            target_train_classes: (!all_train).then(|| self.target_train_classes.clone()),
        }
    }

    /// Writes `manifest.json`, `features.f32`, `labels.txt` and `domains.txt`
    /// into an existing directory. Features are stored as `f32`.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        if !dir.is_dir() {
            return Err(Error::io(
                dir,
                std::io::Error::new(std::io::ErrorKind::NotFound, "output directory does not exist"),
            ));
        }
        let manifest = self.manifest();
        let mut bytes = Vec::with_capacity(self.features.len() * 4);
        for &v in self.features.data() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        write_file(&dir.join(&manifest.feature_file), &bytes)?;
        write_file(&dir.join(&manifest.labels_file), int_lines(&self.labels).as_bytes())?;
        write_file(&dir.join(&manifest.domains_file), int_lines(&self.domains).as_bytes())?;
        let mut json = serde_json::to_string_pretty(&manifest)?;
        json.push('\n');
        let path = dir.join("manifest.json");
        write_file(&path, json.as_bytes())?;
        Ok(path)
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn int_lines(values: &[usize]) -> String {
    let mut out = String::with_capacity(values.len() * 3);
    for v in values {
        out.push_str(&v.to_string());
        out.push('\n');
    }
    out
}

fn read_int_lines(path: &Path, count: usize) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let values = text
        .lines()
        .filter(|l| !l.is_empty())
        .map(|l| l.trim().parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::format(path, e.to_string()))?;
    if values.len() != count {
        return Err(Error::format(
            path,
            format!("{} values, manifest says {count}", values.len()),
        ));
    }
    Ok(values)
}

/// Shape and source of an episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpisodeSpec {
    pub split: Split,
    pub n_way: usize,
    pub k_shot: usize,
    pub n_query: usize,
    pub setting: ShiftSetting,
}

impl EpisodeSpec {
    pub fn new(split: Split, n_way: usize, k_shot: usize, n_query: usize, setting: ShiftSetting) -> Self {
        Self {
            split,
            n_way,
            k_shot,
            n_query,
            setting,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Sample {
    /// Row in the source dataset.
    pub index: usize,
    /// Position of the sample's class within the episode.
    pub class_idx: usize,
    pub domain: usize,
}

/// One N-way K-shot task. Support and query sets are class-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub class_ids: Vec<usize>,
    pub n_way: usize,
    pub k_shot: usize,
    pub n_query: usize,
    pub setting: ShiftSetting,
    pub support: Vec<Sample>,
    pub query: Vec<Sample>,
    pub support_features: Tensor,
    pub query_features: Tensor,
}

impl Episode {
    pub fn query_labels(&self) -> Vec<usize> {
        self.query.iter().map(|s| s.class_idx).collect()
    }

    /// Support row positions of each class, in episode class order.
    pub fn support_groups(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::with_capacity(self.k_shot); self.n_way];
        for (row, s) in self.support.iter().enumerate() {
            groups[s.class_idx].push(row);
        }
        groups
    }

    /// Number of distinct domains among the support samples.
    pub fn support_domain_count(&self) -> usize {
        self.support.iter().map(|s| s.domain).collect::<BTreeSet<_>>().len()
    }

    pub fn validate(&self) -> std::result::Result<(), EpisodeError> {
        validate_episode(self)
    }
}

pub fn sample_episode(
    data: &FeatureDataset,
    spec: &EpisodeSpec,
    rng: &mut impl Rng,
) -> std::result::Result<Episode, EpisodeError> {
    data.check_capacity(spec)?;
    let eligible = data.eligible_classes(spec.split, spec.setting);
    let picked = index::sample(rng, eligible.len(), spec.n_way);
    let class_ids: Vec<usize> = picked.iter().map(|i| eligible[i]).collect();

    let per_class = spec.k_shot + spec.n_query;
    let mut support = Vec::with_capacity(spec.n_way * spec.k_shot);
    let mut query = Vec::with_capacity(spec.n_way * spec.n_query);
    for (class_idx, &c) in class_ids.iter().enumerate() {
        let pool = data.eligible_samples(c, spec.split, spec.setting);
        let chosen = index::sample(rng, pool.len(), per_class);
        for (j, pos) in chosen.iter().enumerate() {
            let index = pool[pos];
            let sample = Sample {
                index,
                class_idx,
                domain: data.domains[index],
            };
            if j < spec.k_shot {
                support.push(sample);
            } else {
                query.push(sample);
            }
        }
    }
    let rows = |set: &[Sample]| data.rows(&set.iter().map(|s| s.index).collect::<Vec<_>>());
    Ok(Episode {
        support_features: rows(&support),
        query_features: rows(&query),
        class_ids,
        n_way: spec.n_way,
        k_shot: spec.k_shot,
        n_query: spec.n_query,
        setting: spec.setting,
        support,
        query,
    })
}

pub fn validate_episode(e: &Episode) -> std::result::Result<(), EpisodeError> {
    if e.class_ids.len() != e.n_way {
        return Err(EpisodeError::Cardinality {
            expected: e.n_way,
            found: e.class_ids.len(),
        });
    }
    let mut distinct = BTreeSet::new();
    for &c in &e.class_ids {
        if !distinct.insert(c) {
            return Err(EpisodeError::DuplicateClass(c));
        }
    }
    for (set, samples, per_class, features) in [
        ("support", &e.support, e.k_shot, &e.support_features),
        ("query", &e.query, e.n_query, &e.query_features),
    ] {
        let expected = e.n_way * per_class;
        if samples.len() != expected {
            return Err(EpisodeError::SetSize {
                set,
                expected,
                found: samples.len(),
            });
        }
        if features.shape()[0] != samples.len() {
            return Err(EpisodeError::FeatureRows {
                set,
                expected: samples.len(),
                found: features.shape()[0],
            });
        }
        let mut counts = vec![0usize; e.n_way];
        let mut seen = BTreeSet::new();
        for s in samples.iter() {
            if s.class_idx >= e.n_way {
                return Err(EpisodeError::ClassOutOfRange {
                    class_idx: s.class_idx,
                    n_way: e.n_way,
                });
            }
            if !seen.insert(s.index) {
                return Err(EpisodeError::RepeatedSample(s.index));
            }
            counts[s.class_idx] += 1;
        }
        if let Some((class_idx, &found)) = counts.iter().enumerate().find(|(_, &n)| n != per_class) {
            return Err(EpisodeError::PerClassCount {
                set,
                class_idx,
                expected: per_class,
                found,
            });
        }
    }
    let support: BTreeSet<usize> = e.support.iter().map(|s| s.index).collect();
    if let Some(s) = e.query.iter().find(|s| support.contains(&s.index)) {
        return Err(EpisodeError::Overlap(s.index));
    }
    Ok(())
}

/// `count` episodes, episode `i` drawn from substream `i` of `seed`.
#[derive(Debug, Clone)]
pub struct EpisodeStream<'a> {
    data: &'a FeatureDataset,
    spec: EpisodeSpec,
    seed: u64,
    next: usize,
    count: usize,
}

impl<'a> EpisodeStream<'a> {
    pub fn new(data: &'a FeatureDataset, spec: EpisodeSpec, seed: u64, count: usize) -> Self {
        Self {
            data,
            spec,
            seed,
            next: 0,
            count,
        }
    }

    /// Episode `i` of the stream, independent of what was consumed before.
    pub fn episode(&self, i: usize) -> std::result::Result<Episode, EpisodeError> {
        let mut rng: ChaCha8Rng = rng::substream(self.seed, i as u64);
        sample_episode(self.data, &self.spec, &mut rng)
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }
}

impl Iterator for EpisodeStream<'_> {
    type Item = std::result::Result<Episode, EpisodeError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.count {
            return None;
        }
        let e = self.episode(self.next);
        self.next += 1;
        Some(e)
    }

    fn nth(&mut self, n: usize) -> Option<Self::Item> {
        self.next = self.next.saturating_add(n);
        self.next()
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = self.count.saturating_sub(self.next);
        (left, Some(left))
    }
}

pub fn episode_stream(data: &FeatureDataset, spec: EpisodeSpec, seed: u64, count: usize) -> EpisodeStream<'_> {
    EpisodeStream::new(data, spec, seed, count)
}
