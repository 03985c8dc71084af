//! Episodic training with validation-based checkpoint selection, parallel
//! evaluation, lambda sweeps and ablation runs.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::episodes::{sample_episode, EpisodeSpec, EpisodeStream, FeatureDataset, ShiftSetting, Split};
use crate::kg::ConceptGraph;
use crate::model::{GpnModel, ModelConfig, SharedBranch};
use crate::optim::{OptimizerConfig, StepDecay};
use crate::{rng, Error, Result};

pub const DEFAULT_VAL_EVERY: usize = 250;
pub const DEFAULT_VAL_EPISODES: usize = 200;
pub const DEFAULT_TEST_EPISODES: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub encoder_opt: OptimizerConfig,
    pub gcn_opt: OptimizerConfig,
    pub schedule: StepDecay,
    pub n_way: usize,
    pub k_shot: usize,
    pub n_query: usize,
    pub setting: ShiftSetting,
    pub seed: u64,
    /// Validate every this many iterations; 0 disables validation.
    pub val_every: usize,
    pub val_episodes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Synthetic desk-scale preset.
    pub fn desk() -> Self {
        Self {
            iterations: 2000,
            encoder_opt: OptimizerConfig::sgd(0.001),
            gcn_opt: OptimizerConfig::adam(0.005),
            schedule: StepDecay { every: 1000, factor: 0.5 },
            n_way: 5,
            k_shot: 1,
            n_query: crate::episodes::DEFAULT_QUERIES,
            setting: ShiftSetting::SrcTgt,
            seed: 0,
            val_every: DEFAULT_VAL_EVERY,
            val_episodes: DEFAULT_VAL_EPISODES,
        }
    }

    /// Schedule used for the shifted product-image benchmarks.
    pub fn office_home() -> Self {
        Self {
            iterations: 5000,
            encoder_opt: OptimizerConfig::sgd(0.001),
            gcn_opt: OptimizerConfig::adam(0.005),
            schedule: StepDecay { every: 2000, factor: 0.5 },
            ..Self::desk()
        }
    }

    /// Long schedule with tenfold decay.
    pub fn mini_imagenet() -> Self {
        Self {
            iterations: 40_000,
            encoder_opt: OptimizerConfig::sgd(0.1),
            gcn_opt: OptimizerConfig::adam(0.005),
            schedule: StepDecay { every: 10_000, factor: 0.1 },
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(Self::desk()),
            "office-home" => Some(Self::office_home()),
            "mini-imagenet" => Some(Self::mini_imagenet()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidConfig("iterations must be positive".into()));
        }
        if self.n_way < 2 || self.k_shot == 0 || self.n_query == 0 {
            return Err(Error::InvalidConfig(format!(
                "episodes need n_way >= 2, k_shot >= 1 and n_query >= 1, got {}, {}, {}",
                self.n_way, self.k_shot, self.n_query
            )));
        }
        self.encoder_opt.validate()?;
        self.gcn_opt.validate()?;
        self.schedule.validate()
    }

    pub fn episode_spec(&self) -> EpisodeSpec {
        EpisodeSpec::new(Split::Train, self.n_way, self.k_shot, self.n_query, self.setting)
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub iter: usize,
    pub loss: f64,
    pub lr_encoder: f64,
    pub lr_gcn: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_acc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best validated model, or the final one when validation is off.
    pub model: GpnModel,
    pub log: Vec<LogEntry>,
    pub best_iter: Option<usize>,
    pub best_val: Option<f64>,
}

pub fn write_log(log: &[LogEntry], out: &mut impl Write) -> std::io::Result<()> {
    for entry in log {
        let line = serde_json::to_string(entry).map_err(std::io::Error::other)?;
        writeln!(out, "{line}")?;
    }
    Ok(())
}

/// Validation episodes use `min(n_way, validation classes)` classes.
fn val_spec(data: &FeatureDataset, config: &TrainConfig) -> EpisodeSpec {
    let n = config.n_way.min(data.splits().val.len());
    EpisodeSpec::new(Split::Val, n, config.k_shot, config.n_query, config.setting)
}

fn grads(tape: &Tape, vars: &[Var]) -> Vec<Tensor> {
    vars.iter()
        .map(|&v| {
            tape.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()).expect("non-empty"))
        })
        .collect()
}

/// Episodic training. One episode and one update per iteration.
pub fn train(mut model: GpnModel, data: &FeatureDataset, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if data.feature_dim() != model.encoder().input_dim() {
        return Err(Error::Dimension(format!(
            "dataset features have dimension {} but the encoder expects {}",
            data.feature_dim(),
            model.encoder().input_dim()
        )));
    }
    let spec = config.episode_spec();
    data.check_capacity(&spec)?;
    let validating = config.val_every > 0 && config.val_episodes > 0;
    let vspec = val_spec(data, config);
    if validating {
        data.check_capacity(&vspec)?;
    }

    let train_seed = rng::derive_seed(config.seed, "train-episodes");
    let val_seed = rng::derive_seed(config.seed, "val-episodes");
    let mut enc_opt = config.encoder_opt.build();
    let mut gcn_opt = config.gcn_opt.build();
    let mut log = Vec::with_capacity(config.iterations);
    let mut best: Option<(usize, f64, GpnModel)> = None;

    for it in 0..config.iterations {
        let episode = sample_episode(data, &spec, &mut rng::substream(train_seed, it as u64))?;
        let mut tape = Tape::new();
        let params = model.bind(&mut tape, true);
        let (loss, _) = model.episode_loss_with(&mut tape, &params, &episode)?;
        let loss_value = tape.value(loss).item();
        if !loss_value.is_finite() {
            return Err(Error::Diverged { iteration: it + 1, loss: loss_value });
        }
        tape.backward(loss)?;
        let enc_grads = grads(&tape, &params.encoder);
        let gcn_grads = grads(&tape, &params.gcn);
        drop(tape);

        let lr_encoder = config.schedule.lr_at(config.encoder_opt.lr(), it);
        let lr_gcn = config.schedule.lr_at(config.gcn_opt.lr(), it);
        enc_opt.step(model.encoder_mut().parameters_mut(), &enc_grads, lr_encoder);
        gcn_opt.step(model.gcn_mut().parameters_mut(), &gcn_grads, lr_gcn);

        let iter = it + 1;
        let mut val_acc = None;
        if validating && (iter % config.val_every == 0 || iter == config.iterations) {
            let acc = evaluate(&model, data, &vspec, config.val_episodes, val_seed, None)?.mean;
            log::debug!("iteration {iter}: loss {loss_value:.4}, val {acc:.4}");
            if best.as_ref().is_none_or(|(_, b, _)| acc > *b) {
                best = Some((iter, acc, model.clone()));
            }
            val_acc = Some(acc);
        }
        log.push(LogEntry { iter, loss: loss_value, lr_encoder, lr_gcn, val_acc });
    }

    Ok(match best {
        Some((iter, acc, m)) => TrainOutcome { model: m, log, best_iter: Some(iter), best_val: Some(acc) },
        None => TrainOutcome { model, log, best_iter: None, best_val: None },
    })
}

/// Mean accuracy over episodes with a normal-approximation 95% interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub mean: f64,
    pub ci95: f64,
    #[serde(skip)]
    pub accuracies: Vec<f64>,
}

impl EvalReport {
    /// `ci95 = 1.96 * s / sqrt(n)` with the `n - 1` sample deviation; zero for `n < 2`.
    pub fn from_accuracies(accuracies: Vec<f64>) -> Self {
        let n = accuracies.len();
        if n == 0 {
            return Self { n, mean: 0.0, ci95: 0.0, accuracies };
        }
        let mean = accuracies.iter().sum::<f64>() / n as f64;
        let ci95 = if n < 2 {
            0.0
        } else {
            let ss: f64 = accuracies.iter().map(|a| (a - mean) * (a - mean)).sum();
            1.96 * (ss / (n - 1) as f64).sqrt() / (n as f64).sqrt()
        };
        Self { n, mean, ci95, accuracies }
    }

    pub fn interval(&self) -> (f64, f64) {
        (self.mean - self.ci95, self.mean + self.ci95)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plain numbers")
    }

    pub fn write_csv(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "episode,accuracy")?;
        for (i, a) in self.accuracies.iter().enumerate() {
            writeln!(out, "{i},{a}")?;
        }
        Ok(())
    }
}

/// Accuracy over `episodes` episodes of `spec`, episode `i` drawn from
/// substream `i` of `seed`. `workers` > 1 evaluates on a local thread pool;
/// the report is identical for any worker count.
pub fn evaluate(
    model: &GpnModel,
    data: &FeatureDataset,
    spec: &EpisodeSpec,
    episodes: usize,
    seed: u64,
    workers: Option<usize>,
) -> Result<EvalReport> {
    if data.feature_dim() != model.encoder().input_dim() {
        return Err(Error::Dimension(format!(
            "dataset features have dimension {} but the encoder expects {}",
            data.feature_dim(),
            model.encoder().input_dim()
        )));
    }
    data.check_capacity(spec)?;
    let frozen = model.freeze()?;
    let stream = EpisodeStream::new(data, *spec, seed, episodes);
    let one = |i: usize| -> Result<f64> { frozen.episode_accuracy(&stream.episode(i)?) };
    let accuracies = match workers {
        Some(w) if w > 1 => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(w)
                .build()
                .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
            pool.install(|| (0..episodes).into_par_iter().map(one).collect::<Result<Vec<_>>>())?
        }
        _ => (0..episodes).map(one).collect::<Result<Vec<_>>>()?,
    };
    Ok(EvalReport::from_accuracies(accuracies))
}

/// Test-time protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n_way: usize,
    pub k_shot: usize,
    pub n_query: usize,
    pub episodes: usize,
    pub seed: u64,
    pub workers: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_way: 5,
            k_shot: 1,
            n_query: crate::episodes::DEFAULT_QUERIES,
            episodes: DEFAULT_TEST_EPISODES,
            seed: 0,
            workers: 1,
        }
    }
}

impl EvalConfig {
    pub fn spec(&self) -> EpisodeSpec {
        // test episodes are target-only whatever the setting
        EpisodeSpec::new(Split::Test, self.n_way, self.k_shot, self.n_query, ShiftSetting::Tgt)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationKind {
    /// Random node vectors instead of word vectors.
    Rand,
    /// Per-node fully connected layers instead of graph convolution.
    Fc,
}

impl fmt::Display for AblationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AblationKind::Rand => "rand",
            AblationKind::Fc => "fc",
        })
    }
}

impl FromStr for AblationKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "rand" => Ok(AblationKind::Rand),
            "fc" => Ok(AblationKind::Fc),
            other => Err(format!("unknown ablation {other:?} (expected rand or fc)")),
        }
    }
}

/// Everything needed to train one model and score it on the test split.
#[derive(Debug, Clone)]
pub struct Experiment<'a> {
    pub data: &'a FeatureDataset,
    pub graph: Arc<ConceptGraph>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub outcome: TrainOutcome,
    pub report: EvalReport,
}

impl Experiment<'_> {
    pub fn build_model(&self) -> Result<GpnModel> {
        self.model
            .build(self.data.feature_dim(), self.graph.clone(), self.data.class_names(), self.train.seed)
    }

    pub fn run_model(&self, model: GpnModel) -> Result<ExperimentResult> {
        let outcome = train(model, self.data, &self.train)?;
        let report = evaluate(
            &outcome.model,
            self.data,
            &self.eval.spec(),
            self.eval.episodes,
            self.eval.seed,
            Some(self.eval.workers),
        )?;
        Ok(ExperimentResult { outcome, report })
    }

    pub fn run(&self) -> Result<ExperimentResult> {
        self.run_model(self.build_model()?)
    }

    pub fn with_lambda(&self, lambda: f64) -> Self {
        let mut e = self.clone();
        e.model.lambda = lambda;
        e
    }
}

/// Trains and evaluates one model per grid value with shared seeds; rows
/// come back in grid order.
pub fn sweep_lambda(exp: &Experiment<'_>, grid: &[f64]) -> Result<Vec<(f64, EvalReport)>> {
    if let Some(bad) = grid.iter().find(|l| !(0.0..=1.0).contains(*l)) {
        return Err(Error::InvalidConfig(format!("lambda grid value {bad} outside [0, 1]")));
    }
    grid.iter()
        .map(|&lambda| Ok((lambda, exp.with_lambda(lambda).run()?.report)))
        .collect()
}

/// Runs the experiment with one component replaced; all else identical.
pub fn run_ablation(exp: &Experiment<'_>, kind: AblationKind) -> Result<ExperimentResult> {
    match kind {
        AblationKind::Rand => {
            let seed = rng::derive_seed(exp.train.seed, "random-vectors");
            exp.run_model(exp.build_model()?.with_random_vectors(seed))
        }
        AblationKind::Fc => {
            let mut e = exp.clone();
            e.model.branch = SharedBranch::Fc;
            e.run()
        }
    }
}

/// Writes `param,mean,ci95` rows.
pub fn write_table(rows: &[(String, EvalReport)], out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "param,mean,ci95")?;
    for (param, r) in rows {
        writeln!(out, "{param},{},{}", r.mean, r.ci95)?;
    }
    Ok(())
}

pub fn write_log_file(log: &[LogEntry], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_log(log, &mut buf).map_err(|e| Error::io(path, e))?;
    crate::episodes::write_file(path, &buf)
}
