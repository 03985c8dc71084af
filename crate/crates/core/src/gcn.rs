//! Graph convolution `H(l+1) = act(D^-1 A H(l) W(l))` mapping every node's
//! word vector to a prototype in the encoder's embedding space.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::checkpoint;
use crate::kg::{ClassNodeMap, ConceptGraph};
use crate::{rng, Error, Result};

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    #[serde(rename = "leaky_relu")]
    LeakyRelu,
    #[serde(rename = "identity")]
    Identity,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Activation::LeakyRelu => Ok(tape.leaky_relu(x, LEAKY_SLOPE)?),
            Activation::Identity => Ok(x),
        }
    }

    /// LeakyReLU on every layer but the last.
    pub(crate) fn stack(layers: usize) -> Vec<Activation> {
        (0..layers)
            .map(|i| {
                if i + 1 == layers {
                    Activation::Identity
                } else {
                    Activation::LeakyRelu
                }
            })
            .collect()
    }
}

/// How node features are mixed before each layer's weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Propagation {
    /// Multiply by `D^-1 A`.
    Graph,
    /// Transform every node on its own (fully connected ablation).
    Independent,
}

/// Glorot-uniform weight matrix.
pub(crate) fn glorot(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    Tensor::matrix(fan_in, fan_out, data).expect("positive dims")
}

pub(crate) fn validate_dims(dims: &[usize], what: &str) -> Result<()> {
    if dims.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "{what} needs at least an input and an output dimension, got {dims:?}"
        )));
    }
    if dims.contains(&0) {
        return Err(Error::InvalidConfig(format!(
            "{what} dimensions must be positive, got {dims:?}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GcnHeader {
    dims: Vec<usize>,
    activations: Vec<Activation>,
    seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GcnModel {
    dims: Vec<usize>,
    weights: Vec<Tensor>,
    activations: Vec<Activation>,
    seed: u64,
}

impl GcnModel {
    /// Glorot-initialised layers `dims[0] -> dims[1] -> ...`.
    pub fn init(dims: &[usize], seed: u64) -> Result<Self> {
        validate_dims(dims, "gcn")?;
        let mut rng = rng::seeded(seed);
        let weights = dims
            .windows(2)
            .map(|w| glorot(w[0], w[1], &mut rng))
            .collect();
        Ok(Self {
            dims: dims.to_vec(),
            weights,
            activations: Activation::stack(dims.len() - 1),
            seed,
        })
    }

    /// Model with explicit weights. The last activation must be identity.
    pub fn from_weights(weights: Vec<Tensor>, activations: Vec<Activation>) -> Result<Self> {
        if weights.is_empty() || weights.len() != activations.len() {
            return Err(Error::InvalidConfig(
                "need one activation per weight matrix".into(),
            ));
        }
        if activations.last() != Some(&Activation::Identity) {
            return Err(Error::InvalidConfig(
                "final gcn activation must be identity".into(),
            ));
        }
        let mut dims = Vec::with_capacity(weights.len() + 1);
        for (i, w) in weights.iter().enumerate() {
            let (r, c) = w
                .dims2()
                .ok_or_else(|| Error::Dimension(format!("gcn layer {i} is not a matrix")))?;
            if let Some(&prev) = dims.last() {
                if prev != r {
                    return Err(Error::Dimension(format!(
                        "gcn layer {i} expects {r} inputs but previous layer yields {prev}"
                    )));
                }
            } else {
                dims.push(r);
            }
            dims.push(c);
        }
        Ok(Self {
            dims,
            weights,
            activations,
            seed: 0,
        })
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

    pub fn depth(&self) -> usize {
        self.weights.len()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn parameters(&self) -> &[Tensor] {
        &self.weights
    }

    pub fn parameters_mut(&mut self) -> &mut [Tensor] {
        &mut self.weights
    }

    /// Registers the weights on `tape`.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Vec<Var> {
        self.weights
            .iter()
            .map(|w| tape.leaf(w.clone(), requires_grad))
            .collect()
    }

    fn check_graph(&self, graph: &ConceptGraph) -> Result<()> {
        if graph.word_dim() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "graph word vectors have dimension {} but the gcn expects {}",
                graph.word_dim(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Forward pass on `tape` using the bound `weights`; returns `L x V`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        weights: &[Var],
        graph: &ConceptGraph,
        propagation: Propagation,
    ) -> Result<Var> {
        self.check_graph(graph)?;
        let mut h = tape.constant(graph.word_vectors().clone());
        let adj = match propagation {
            Propagation::Graph => Some(tape.constant(graph.norm_adj().clone())),
            Propagation::Independent => None,
        };
        for (w, act) in weights.iter().zip(&self.activations) {
            if let Some(adj) = adj {
                h = tape.matmul(adj, h)?;
            }
            h = tape.matmul(h, *w)?;
            h = act.apply(tape, h)?;
        }
        Ok(h)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let model = Self::read_from(&mut r)?;
        let mut rest = Vec::new();
        r.read_to_end(&mut rest).map_err(|e| Error::io(path, e))?;
        if !rest.is_empty() {
            return Err(Error::format(path, "trailing bytes after gcn payload"));
        }
        Ok(model)
    }

    pub(crate) fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let header = GcnHeader {
            dims: self.dims.clone(),
            activations: self.activations.clone(),
            seed: self.seed,
        };
        checkpoint::write_header(w, &header)?;
        checkpoint::write_tensors(w, &self.weights.iter().collect::<Vec<_>>())
    }

    pub(crate) fn read_from<R: std::io::BufRead>(r: &mut R) -> Result<Self> {
        let header: GcnHeader = checkpoint::read_header(r)?;
        validate_dims(&header.dims, "gcn checkpoint")?;
        if header.activations.len() + 1 != header.dims.len() {
            return Err(Error::InvalidConfig(
                "gcn checkpoint activation count does not match dims".into(),
            ));
        }
        let weights = header
            .dims
            .windows(2)
            .map(|w| checkpoint::read_tensor(r, &[w[0], w[1]]))
            .collect::<Result<Vec<_>>>()?;
        let mut model = Self::from_weights(weights, header.activations)?;
        model.seed = header.seed;
        Ok(model)
    }
}

/// Graph-convolution output for every node, outside any training tape.
pub fn gcn_forward(model: &GcnModel, graph: &ConceptGraph) -> Result<Tensor> {
    run_detached(model, graph, Propagation::Graph)
}

/// Same layers with `D^-1 A` replaced by the identity.
pub fn mlp_forward_ablation(model: &GcnModel, graph: &ConceptGraph) -> Result<Tensor> {
    run_detached(model, graph, Propagation::Independent)
}

fn run_detached(model: &GcnModel, graph: &ConceptGraph, propagation: Propagation) -> Result<Tensor> {
    let mut tape = Tape::new();
    let weights = model.bind(&mut tape, false);
    let out = model.forward(&mut tape, &weights, graph, propagation)?;
    Ok(tape.value(out).clone())
}

/// Rows of the all-node output belonging to `classes`, in the given order.
pub fn select_prototypes(
    tape: &mut Tape,
    all: Var,
    map: &ClassNodeMap,
    classes: &[usize],
) -> Result<Var> {
    let mut rows = Vec::with_capacity(classes.len());
    for (i, &c) in classes.iter().enumerate() {
        if classes[..i].contains(&c) {
            return Err(Error::InvalidConfig(format!(
                "class {c} appears twice in one episode"
            )));
        }
        let node = map
            .node(c)
            .ok_or_else(|| Error::InvalidConfig(format!("class {c} has no graph node")))?;
        rows.push(node);
    }
    Ok(tape.gather_rows(all, &rows)?)
}
