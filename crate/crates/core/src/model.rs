//! Encoder, prototype construction and mixing, distance-softmax
//! classification and the episode loss.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{argmax, softmax_rows, Tape, Tensor, Var};
use crate::checkpoint;
use crate::episodes::Episode;
use crate::gcn::{glorot, select_prototypes, validate_dims, Activation, GcnModel, Propagation};
use crate::kg::{ClassNodeMap, ConceptGraph};
use crate::{rng, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMode {
    #[default]
    Squared,
    Unsquared,
}

/// Which network produces the task-shared prototypes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SharedBranch {
    /// Graph convolution over the taxonomy.
    #[default]
    Gcn,
    /// Same layers applied to each node independently.
    Fc,
}

impl SharedBranch {
    fn propagation(self) -> Propagation {
        match self {
            SharedBranch::Gcn => Propagation::Graph,
            SharedBranch::Fc => Propagation::Independent,
        }
    }
}

/// Where the graph's node vectors come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WordVectorSource {
    #[default]
    File,
    Random { seed: u64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EncoderHeader {
    dims: Vec<usize>,
    activations: Vec<Activation>,
    seed: u64,
}

/// Multi-layer perceptron `f` mapping features to the embedding space.
///
/// Parameters are stored as `[w0, b0, w1, b1, ...]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    dims: Vec<usize>,
    params: Vec<Tensor>,
    activations: Vec<Activation>,
    seed: u64,
}

impl Encoder {
    /// Glorot weights and zero biases.
    pub fn init(dims: &[usize], seed: u64) -> Result<Self> {
        validate_dims(dims, "encoder")?;
        let mut rng = rng::seeded(seed);
        let mut params = Vec::with_capacity(2 * (dims.len() - 1));
        for w in dims.windows(2) {
            params.push(glorot(w[0], w[1], &mut rng));
            params.push(Tensor::zeros(&[w[1]])?);
        }
        Ok(Self {
            dims: dims.to_vec(),
            params,
            activations: Activation::stack(dims.len() - 1),
            seed,
        })
    }

    /// Single linear layer with identity weights.
    pub fn identity(dim: usize) -> Result<Self> {
        Self::from_layers(
            vec![(Tensor::eye(dim)?, Tensor::zeros(&[dim])?)],
            vec![Activation::Identity],
        )
    }

    pub fn from_layers(layers: Vec<(Tensor, Tensor)>, activations: Vec<Activation>) -> Result<Self> {
        if layers.is_empty() || layers.len() != activations.len() {
            return Err(Error::InvalidConfig("need one activation per encoder layer".into()));
        }
        if activations.last() != Some(&Activation::Identity) {
            return Err(Error::InvalidConfig("final encoder activation must be identity".into()));
        }
        let mut dims = Vec::new();
        let mut params = Vec::with_capacity(2 * layers.len());
        for (i, (w, b)) in layers.into_iter().enumerate() {
            let (r, c) = w
                .dims2()
                .ok_or_else(|| Error::Dimension(format!("encoder layer {i} weight is not a matrix")))?;
            if b.shape() != [c] {
                return Err(Error::Dimension(format!(
                    "encoder layer {i} bias has shape {:?}, expected [{c}]",
                    b.shape()
                )));
            }
            match dims.last() {
                Some(&prev) if prev != r => {
                    return Err(Error::Dimension(format!(
                        "encoder layer {i} expects {r} inputs but previous layer yields {prev}"
                    )))
                }
                Some(_) => {}
                None => dims.push(r),
            }
            dims.push(c);
            params.push(w);
            params.push(b);
        }
        if !params.iter().all(Tensor::is_finite) {
            return Err(Error::InvalidConfig("encoder weights must be finite".into()));
        }
        Ok(Self { dims, params, activations, seed: 0 })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().expect("at least two dims")
    }

    pub fn parameters(&self) -> &[Tensor] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.clone(), requires_grad)).collect()
    }

    /// Embeds the rows of `x` using the bound parameters.
    pub fn forward(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var> {
        let cols = tape.value(x).shape().last().copied().unwrap_or(0);
        if cols != self.input_dim() {
            return Err(Error::Dimension(format!(
                "features have dimension {cols} but the encoder expects {}",
                self.input_dim()
            )));
        }
        let mut h = x;
        for (layer, act) in params.chunks_exact(2).zip(&self.activations) {
            h = tape.matmul(h, layer[0])?;
            h = tape.add_bias(h, layer[1])?;
            h = act.apply(tape, h)?;
        }
        Ok(h)
    }

    /// Embedding of every row of `x`, outside any training tape.
    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let x = tape.constant(x.clone());
        let out = self.forward(&mut tape, &params, x)?;
        Ok(tape.value(out).clone())
    }

    fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let header = EncoderHeader {
            dims: self.dims.clone(),
            activations: self.activations.clone(),
            seed: self.seed,
        };
        checkpoint::write_header(w, &header)?;
        checkpoint::write_tensors(w, &self.params.iter().collect::<Vec<_>>())
    }

    fn read_from<R: BufRead>(r: &mut R) -> Result<Self> {
        let header: EncoderHeader = checkpoint::read_header(r)?;
        validate_dims(&header.dims, "encoder checkpoint")?;
        if header.activations.len() + 1 != header.dims.len() {
            return Err(Error::InvalidConfig(
                "encoder checkpoint activation count does not match dims".into(),
            ));
        }
        let mut layers = Vec::with_capacity(header.activations.len());
        for w in header.dims.windows(2) {
            let weight = checkpoint::read_tensor(r, &[w[0], w[1]])?;
            let bias = checkpoint::read_tensor(r, &[w[1]])?;
            layers.push((weight, bias));
        }
        let mut enc = Self::from_layers(layers, header.activations)?;
        enc.seed = header.seed;
        Ok(enc)
    }
}

/// Prototypes of one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    pub classes: Vec<usize>,
    pub specific: Tensor,
    pub shared: Tensor,
    pub mixed: Tensor,
}

/// Parameters of a [`GpnModel`] registered on a tape.
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub encoder: Vec<Var>,
    pub gcn: Vec<Var>,
}

/// Architecture and mixing hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder_hidden: Vec<usize>,
    pub embed_dim: usize,
    pub gcn_hidden: Vec<usize>,
    pub lambda: f64,
    pub distance: DistanceMode,
    pub branch: SharedBranch,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder_hidden: vec![64],
            embed_dim: 32,
            gcn_hidden: vec![64],
            lambda: 0.5,
            distance: DistanceMode::Squared,
            branch: SharedBranch::Gcn,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        check_lambda(self.lambda)?;
        if self.embed_dim == 0 || self.encoder_hidden.contains(&0) || self.gcn_hidden.contains(&0) {
            return Err(Error::InvalidConfig("layer widths must be positive".into()));
        }
        Ok(())
    }

    /// Fresh model whose encoder reads `feature_dim` inputs.
    pub fn build(
        &self,
        feature_dim: usize,
        graph: Arc<ConceptGraph>,
        class_names: &[String],
        seed: u64,
    ) -> Result<GpnModel> {
        self.validate()?;
        let mut enc_dims = vec![feature_dim];
        enc_dims.extend(&self.encoder_hidden);
        enc_dims.push(self.embed_dim);
        let mut gcn_dims = vec![graph.word_dim()];
        gcn_dims.extend(&self.gcn_hidden);
        gcn_dims.push(self.embed_dim);
        let encoder = Encoder::init(&enc_dims, rng::derive_seed(seed, "encoder"))?;
        let gcn = GcnModel::init(&gcn_dims, rng::derive_seed(seed, "gcn"))?;
        GpnModel::new(encoder, gcn, graph, class_names, self.lambda, self.distance, self.branch)
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidConfig(format!("lambda must be in [0, 1], got {lambda}")));
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelHeader {
    lambda: f64,
    distance_mode: DistanceMode,
    branch: SharedBranch,
    word_vectors: WordVectorSource,
    encoder_dims: Vec<usize>,
    gcn_dims: Vec<usize>,
}

/// Prototypical classifier whose prototypes mix support means with
/// graph-predicted class representations.
#[derive(Debug, Clone, PartialEq)]
pub struct GpnModel {
    encoder: Encoder,
    gcn: GcnModel,
    graph: Arc<ConceptGraph>,
    class_map: ClassNodeMap,
    lambda: f64,
    distance: DistanceMode,
    branch: SharedBranch,
    word_vectors: WordVectorSource,
}

impl GpnModel {
    pub fn new(
        encoder: Encoder,
        gcn: GcnModel,
        graph: Arc<ConceptGraph>,
        class_names: &[String],
        lambda: f64,
        distance: DistanceMode,
        branch: SharedBranch,
    ) -> Result<Self> {
        check_lambda(lambda)?;
        if encoder.output_dim() != gcn.output_dim() {
            return Err(Error::Dimension(format!(
                "encoder output {} differs from gcn output {}",
                encoder.output_dim(),
                gcn.output_dim()
            )));
        }
        if gcn.input_dim() != graph.word_dim() {
            return Err(Error::Dimension(format!(
                "gcn input {} differs from word vector dimension {}",
                gcn.input_dim(),
                graph.word_dim()
            )));
        }
        let class_map = ClassNodeMap::new(&graph, class_names)?;
        Ok(Self {
            encoder,
            gcn,
            graph,
            class_map,
            lambda,
            distance,
            branch,
            word_vectors: WordVectorSource::File,
        })
    }

    /// Replaces the node vectors with seeded standard normal draws.
    pub fn with_random_vectors(mut self, seed: u64) -> Self {
        self.graph = Arc::new(self.graph.randomize_vectors(seed));
        self.word_vectors = WordVectorSource::Random { seed };
        self
    }

    pub fn with_lambda(mut self, lambda: f64) -> Result<Self> {
        check_lambda(lambda)?;
        self.lambda = lambda;
        Ok(self)
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn encoder_mut(&mut self) -> &mut Encoder {
        &mut self.encoder
    }

    pub fn gcn(&self) -> &GcnModel {
        &self.gcn
    }

    pub fn gcn_mut(&mut self) -> &mut GcnModel {
        &mut self.gcn
    }

    pub fn graph(&self) -> &ConceptGraph {
        &self.graph
    }

    pub fn class_map(&self) -> &ClassNodeMap {
        &self.class_map
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn distance_mode(&self) -> DistanceMode {
        self.distance
    }

    pub fn branch(&self) -> SharedBranch {
        self.branch
    }

    pub fn word_vector_source(&self) -> WordVectorSource {
        self.word_vectors
    }

    pub fn embed_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> BoundParams {
        BoundParams {
            encoder: self.encoder.bind(tape, requires_grad),
            gcn: self.gcn.bind(tape, requires_grad),
        }
    }

    /// Task-shared output for every graph node (`L x V`).
    pub fn shared_table(&self) -> Result<Tensor> {
        let mut tape = Tape::new();
        let weights = self.gcn.bind(&mut tape, false);
        let out = self.gcn.forward(&mut tape, &weights, &self.graph, self.branch.propagation())?;
        Ok(tape.value(out).clone())
    }

    /// Episode loss on `tape` with bound parameters; returns `(loss, logits)`.
    pub fn episode_loss_with(
        &self,
        tape: &mut Tape,
        params: &BoundParams,
        episode: &Episode,
    ) -> Result<(Var, Var)> {
        let all = self
            .gcn
            .forward(tape, &params.gcn, &self.graph, self.branch.propagation())?;
        self.loss_from_shared(tape, &params.encoder, all, episode)
    }

    fn loss_from_shared(
        &self,
        tape: &mut Tape,
        encoder: &[Var],
        all_shared: Var,
        episode: &Episode,
    ) -> Result<(Var, Var)> {
        let (specific, query) = specific_and_query(&self.encoder, tape, encoder, episode)?;
        let shared = select_prototypes(tape, all_shared, &self.class_map, &episode.class_ids)?;
        let mixed = tape.axpby(self.lambda, specific, 1.0 - self.lambda, shared)?;
        let logits = neg_distances(tape, query, mixed, self.distance)?;
        let loss = tape.softmax_cross_entropy(logits, &episode.query_labels())?;
        Ok((loss, logits))
    }

    /// Mean query negative log-likelihood.
    pub fn episode_loss(&self, episode: &Episode) -> Result<f64> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let (loss, _) = self.episode_loss_with(&mut tape, &params, episode)?;
        Ok(tape.value(loss).item())
    }

    /// Mean support embedding per episode class (`N x V`).
    pub fn task_specific_prototypes(&self, episode: &Episode) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.encoder.bind(&mut tape, false);
        let (specific, _) = specific_and_query(&self.encoder, &mut tape, &params, episode)?;
        Ok(tape.value(specific).clone())
    }

    /// Graph-predicted prototypes of `classes`, in order.
    pub fn shared_prototypes(&self, classes: &[usize]) -> Result<Tensor> {
        self.freeze()?.shared_prototypes(classes)
    }

    /// `lambda * specific + (1 - lambda) * shared`, rowwise.
    pub fn mix_prototypes(&self, classes: &[usize], specific: &Tensor, shared: &Tensor) -> Result<PrototypeSet> {
        mix(self.lambda, classes, specific, shared)
    }

    pub fn prototypes(&self, episode: &Episode) -> Result<PrototypeSet> {
        self.freeze()?.prototypes(episode)
    }

    /// Posterior over the episode's classes for every query (`Q x N`).
    pub fn classify(&self, episode: &Episode, protos: &PrototypeSet) -> Result<Tensor> {
        if protos.classes.len() != episode.n_way || protos.mixed.shape()[0] != episode.n_way {
            return Err(Error::Dimension(format!(
                "{} prototypes for a {}-way episode",
                protos.mixed.shape()[0],
                episode.n_way
            )));
        }
        let query = self.encoder.embed(&episode.query_features)?;
        posteriors(&query, &protos.mixed, self.distance)
    }

    pub fn predict(&self, episode: &Episode) -> Result<Vec<usize>> {
        self.freeze()?.predict(episode)
    }

    pub fn episode_accuracy(&self, episode: &Episode) -> Result<f64> {
        self.freeze()?.episode_accuracy(episode)
    }

    /// Read-only view with the shared table computed once.
    pub fn freeze(&self) -> Result<FrozenModel<'_>> {
        Ok(FrozenModel {
            model: self,
            shared: self.shared_table()?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let header = ModelHeader {
            lambda: self.lambda,
            distance_mode: self.distance,
            branch: self.branch,
            word_vectors: self.word_vectors,
            encoder_dims: self.encoder.dims.clone(),
            gcn_dims: self.gcn.dims().to_vec(),
        };
        checkpoint::write_header(w, &header)?;
        self.encoder.write_to(w)?;
        self.gcn.write_to(w)
    }

    /// Loads a checkpoint. `graph` must be the file-backed graph; random
    /// node vectors recorded in the checkpoint are regenerated from their seed.
    pub fn load(path: &Path, graph: Arc<ConceptGraph>, class_names: &[String]) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let model = Self::read_from(&mut r, graph, class_names).map_err(|e| match e {
            Error::Format { detail, .. } => Error::format(path, detail),
            other => other,
        })?;
        let mut rest = Vec::new();
        r.read_to_end(&mut rest).map_err(|e| Error::io(path, e))?;
        if !rest.is_empty() {
            return Err(Error::format(path, "trailing bytes after model payload"));
        }
        Ok(model)
    }

    pub fn read_from<R: BufRead>(r: &mut R, graph: Arc<ConceptGraph>, class_names: &[String]) -> Result<Self> {
        let header: ModelHeader = checkpoint::read_header(r)?;
        let encoder = Encoder::read_from(r)?;
        let gcn = GcnModel::read_from(r)?;
        if encoder.dims != header.encoder_dims || gcn.dims() != header.gcn_dims {
            return Err(Error::Dimension("checkpoint sections disagree with header dims".into()));
        }
        let model = Self::new(
            encoder,
            gcn,
            graph,
            class_names,
            header.lambda,
            header.distance_mode,
            header.branch,
        )?;
        Ok(match header.word_vectors {
            WordVectorSource::File => model,
            WordVectorSource::Random { seed } => model.with_random_vectors(seed),
        })
    }
}

/// A model plus its cached task-shared table, for evaluation.
#[derive(Debug, Clone)]
pub struct FrozenModel<'a> {
    model: &'a GpnModel,
    shared: Tensor,
}

impl FrozenModel<'_> {
    pub fn model(&self) -> &GpnModel {
        self.model
    }

    pub fn shared_prototypes(&self, classes: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let all = tape.constant(self.shared.clone());
        let rows = select_prototypes(&mut tape, all, &self.model.class_map, classes)?;
        Ok(tape.value(rows).clone())
    }

    pub fn prototypes(&self, episode: &Episode) -> Result<PrototypeSet> {
        let specific = self.model.task_specific_prototypes(episode)?;
        let shared = self.shared_prototypes(&episode.class_ids)?;
        mix(self.model.lambda, &episode.class_ids, &specific, &shared)
    }

    /// Loss and `-distance` logits, same arithmetic as training.
    pub fn loss_and_logits(&self, episode: &Episode) -> Result<(f64, Tensor)> {
        let mut tape = Tape::new();
        let encoder = self.model.encoder.bind(&mut tape, false);
        let all = tape.constant(self.shared.clone());
        let (loss, logits) = self.model.loss_from_shared(&mut tape, &encoder, all, episode)?;
        Ok((tape.value(loss).item(), tape.value(logits).clone()))
    }

    pub fn predict(&self, episode: &Episode) -> Result<Vec<usize>> {
        Ok(predict_from_logits(&self.loss_and_logits(episode)?.1))
    }

    pub fn episode_accuracy(&self, episode: &Episode) -> Result<f64> {
        Ok(accuracy(&self.predict(episode)?, &episode.query_labels()))
    }
}

fn mix(lambda: f64, classes: &[usize], specific: &Tensor, shared: &Tensor) -> Result<PrototypeSet> {
    let mut tape = Tape::new();
    let s = tape.constant(specific.clone());
    let g = tape.constant(shared.clone());
    let mixed = tape.axpby(lambda, s, 1.0 - lambda, g)?;
    if specific.shape()[0] != classes.len() {
        return Err(Error::Dimension(format!(
            "{} prototype rows for {} classes",
            specific.shape()[0],
            classes.len()
        )));
    }
    Ok(PrototypeSet {
        classes: classes.to_vec(),
        specific: specific.clone(),
        shared: shared.clone(),
        mixed: tape.value(mixed).clone(),
    })
}

/// Support prototypes and query embeddings on `tape`.
fn specific_and_query(
    encoder: &Encoder,
    tape: &mut Tape,
    params: &[Var],
    episode: &Episode,
) -> Result<(Var, Var)> {
    let support_x = tape.constant(episode.support_features.clone());
    let support = encoder.forward(tape, params, support_x)?;
    let mut rows = Vec::with_capacity(episode.n_way);
    for group in episode.support_groups() {
        if group.is_empty() {
            return Err(Error::InvalidConfig("episode class without support samples".into()));
        }
        let members = tape.gather_rows(support, &group)?;
        rows.push(tape.row_mean(members)?);
    }
    let specific = tape.stack_rows(&rows)?;
    let query_x = tape.constant(episode.query_features.clone());
    let query = encoder.forward(tape, params, query_x)?;
    Ok((specific, query))
}

fn neg_distances(tape: &mut Tape, query: Var, protos: Var, mode: DistanceMode) -> Result<Var> {
    let d = match mode {
        DistanceMode::Squared => tape.pairwise_sq_dist(query, protos)?,
        DistanceMode::Unsquared => tape.pairwise_dist(query, protos)?,
    };
    Ok(tape.scale(d, -1.0)?)
}

/// Softmax over negative distances between query embeddings and prototypes.
pub fn posteriors(query: &Tensor, protos: &Tensor, mode: DistanceMode) -> Result<Tensor> {
    let mut tape = Tape::new();
    let q = tape.constant(query.clone());
    let p = tape.constant(protos.clone());
    let logits = neg_distances(&mut tape, q, p, mode)?;
    Ok(softmax_rows(tape.value(logits)))
}

/// Row-wise argmax; exact ties go to the lowest class position.
pub fn predict_from_logits(scores: &Tensor) -> Vec<usize> {
    let n = scores.shape().last().copied().unwrap_or(1);
    scores.data().chunks_exact(n).map(|row| argmax(row).0).collect()
}

pub fn accuracy(predicted: &[usize], truth: &[usize]) -> f64 {
    let hits = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    hits as f64 / truth.len() as f64
}

/// Prototypical-network path with no graph branch at all.
pub mod reference {
    use super::*;

    fn run(encoder: &Encoder, mode: DistanceMode, episode: &Episode) -> Result<(f64, Tensor)> {
        let mut tape = Tape::new();
        let params = encoder.bind(&mut tape, false);
        let (protos, query) = specific_and_query(encoder, &mut tape, &params, episode)?;
        let logits = neg_distances(&mut tape, query, protos, mode)?;
        let loss = tape.softmax_cross_entropy(logits, &episode.query_labels())?;
        Ok((tape.value(loss).item(), tape.value(logits).clone()))
    }

    pub fn episode_loss(encoder: &Encoder, mode: DistanceMode, episode: &Episode) -> Result<f64> {
        Ok(run(encoder, mode, episode)?.0)
    }

    pub fn predict(encoder: &Encoder, mode: DistanceMode, episode: &Episode) -> Result<Vec<usize>> {
        Ok(predict_from_logits(&run(encoder, mode, episode)?.1))
    }
}
