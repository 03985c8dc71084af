//! Concept graph: class-name nodes carrying word vectors, linked by
//! taxonomy edges, with the row-normalised adjacency `D^-1 A` used by the
//! graph convolution.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GraphError {
    #[error("no word vector for node(s): {}", .0.join(", "))]
    MissingVector(Vec<String>),
    #[error("word vector for {name} has dimension {found}, expected {expected}")]
    InconsistentDimension {
        name: String,
        expected: usize,
        found: usize,
    },
    #[error("edge list is empty but the vector table has {0} nodes")]
    NoEdges(usize),
    #[error("vector table is empty")]
    NoNodes,
    #[error("unknown class name(s): {}", .0.join(", "))]
    UnknownClasses(Vec<String>),
    #[error("class name {0} appears more than once")]
    DuplicateClass(String),
}

/// Undirected graph over named concepts.
///
/// Nodes are ordered lexicographically by name, which fixes the row layout
/// of the word-vector and adjacency matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptGraph {
    names: Vec<String>,
    word_vectors: Tensor,
    edges: BTreeSet<(usize, usize)>,
    norm_adj: Tensor,
}

impl ConceptGraph {
    /// Builds the graph from name pairs and a name-to-vector table.
    ///
    /// Every entry of `vectors` becomes a node; self-loops are added to all
    /// nodes, and repeated or reversed edges collapse into one.
    pub fn build(
        edge_list: &[(String, String)],
        vectors: &BTreeMap<String, Vec<f64>>,
    ) -> std::result::Result<Self, GraphError> {
        let Some(dim) = vectors.values().next().map(Vec::len) else {
            return Err(GraphError::NoNodes);
        };
        if let Some((name, v)) = vectors.iter().find(|(_, v)| v.len() != dim || v.is_empty()) {
            return Err(GraphError::InconsistentDimension {
                name: name.clone(),
                expected: dim,
                found: v.len(),
            });
        }
        if edge_list.is_empty() && vectors.len() > 1 {
            return Err(GraphError::NoEdges(vectors.len()));
        }

        let names: Vec<String> = vectors.keys().cloned().collect();
        let index: HashMap<&str, usize> = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.as_str(), i))
            .collect();

        let mut missing = BTreeSet::new();
        let mut edges = BTreeSet::new();
        for (a, b) in edge_list {
            match (index.get(a.as_str()), index.get(b.as_str())) {
                (Some(&i), Some(&j)) => {
                    if i != j {
                        edges.insert((i.min(j), i.max(j)));
                    }
                }
                (ia, ib) => {
                    if ia.is_none() {
                        missing.insert(a.clone());
                    }
                    if ib.is_none() {
                        missing.insert(b.clone());
                    }
                }
            }
        }
        if !missing.is_empty() {
            return Err(GraphError::MissingVector(missing.into_iter().collect()));
        }

        let l = names.len();
        let mut data = Vec::with_capacity(l * dim);
        for v in vectors.values() {
            data.extend_from_slice(v);
        }
        let word_vectors = Tensor::matrix(l, dim, data).expect("non-empty table");
        let norm_adj = normalized_adjacency(l, &edges);
        Ok(Self {
            names,
            word_vectors,
            edges,
            norm_adj,
        })
    }

    pub fn node_count(&self) -> usize {
        self.names.len()
    }

    pub fn word_dim(&self) -> usize {
        self.word_vectors.shape()[1]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn node_index(&self, name: &str) -> Option<usize> {
        self.names.binary_search_by(|n| n.as_str().cmp(name)).ok()
    }

    /// `L x J` matrix of input vectors, one row per node.
    pub fn word_vectors(&self) -> &Tensor {
        &self.word_vectors
    }

    /// Undirected edges as `(i, j)` with `i < j`; self-loops are implicit.
    pub fn edges(&self) -> &BTreeSet<(usize, usize)> {
        &self.edges
    }

    pub fn norm_adj(&self) -> &Tensor {
        &self.norm_adj
    }

    /// Dense adjacency with self-loops.
    pub fn adjacency(&self) -> Tensor {
        let l = self.node_count();
        let mut a = Tensor::eye(l).expect("non-empty graph");
        for &(i, j) in &self.edges {
            a.data_mut()[i * l + j] = 1.0;
            a.data_mut()[j * l + i] = 1.0;
        }
        a
    }

    /// Copy with i.i.d. standard-normal input vectors of the same shape.
    pub fn randomize_vectors(&self, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = self.word_vectors.shape().to_vec();
        let data = (0..self.word_vectors.len())
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Self {
            word_vectors: Tensor::new(shape, data).expect("same shape"),
            ..self.clone()
        }
    }

    /// Nodes in `targets` not reachable from any node in `sources`.
    pub fn unreachable_from(&self, sources: &[usize], targets: &[usize]) -> Vec<usize> {
        let l = self.node_count();
        let mut neighbours = vec![Vec::new(); l];
        for &(i, j) in &self.edges {
            neighbours[i].push(j);
            neighbours[j].push(i);
        }
        let mut seen = vec![false; l];
        let mut queue: VecDeque<usize> = sources.iter().copied().collect();
        for &s in sources {
            seen[s] = true;
        }
        while let Some(u) = queue.pop_front() {
            for &v in &neighbours[u] {
                if !seen[v] {
                    seen[v] = true;
                    queue.push_back(v);
                }
            }
        }
        targets.iter().copied().filter(|&t| !seen[t]).collect()
    }

    /// Name pairs in canonical order, for writing back out.
    pub fn edge_names(&self) -> Vec<(String, String)> {
        self.edges
            .iter()
            .map(|&(i, j)| (self.names[i].clone(), self.names[j].clone()))
            .collect()
    }

    pub fn vector_table(&self) -> BTreeMap<String, Vec<f64>> {
        self.names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), self.word_vectors.row(i).to_vec()))
            .collect()
    }
}

fn normalized_adjacency(l: usize, edges: &BTreeSet<(usize, usize)>) -> Tensor {
    let mut degree = vec![1usize; l];
    for &(i, j) in edges {
        degree[i] += 1;
        degree[j] += 1;
    }
    let mut data = vec![0.0; l * l];
    for i in 0..l {
        data[i * l + i] = 1.0 / degree[i] as f64;
    }
    for &(i, j) in edges {
        data[i * l + j] = 1.0 / degree[i] as f64;
        data[j * l + i] = 1.0 / degree[j] as f64;
    }
    Tensor::matrix(l, l, data).expect("l > 0")
}

/// Dataset class id to graph node index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassNodeMap {
    nodes: Vec<usize>,
}

impl ClassNodeMap {
    /// Maps each class name (class id = position) to its node.
    pub fn new(graph: &ConceptGraph, class_names: &[String]) -> std::result::Result<Self, GraphError> {
        let mut seen = BTreeSet::new();
        for name in class_names {
            if !seen.insert(name.as_str()) {
                return Err(GraphError::DuplicateClass(name.clone()));
            }
        }
        let mut missing = Vec::new();
        let mut nodes = Vec::with_capacity(class_names.len());
        for name in class_names {
            match graph.node_index(name) {
                Some(i) => nodes.push(i),
                None => missing.push(name.clone()),
            }
        }
        if !missing.is_empty() {
            return Err(GraphError::UnknownClasses(missing));
        }
        Ok(Self { nodes })
    }

    pub fn node(&self, class: usize) -> Option<usize> {
        self.nodes.get(class).copied()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[usize] {
        &self.nodes
    }
}

/// Tab-separated node-name pairs, one edge per line; `#` starts a comment line.
pub fn read_edge_list(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_edge_list(&text).map_err(|detail| Error::format(path, detail))
}

pub fn parse_edge_list(text: &str) -> std::result::Result<Vec<(String, String)>, String> {
    let mut edges = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        match (parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => {
                edges.push((a.to_string(), b.to_string()))
            }
            _ => return Err(format!("line {}: expected two tab-separated names", n + 1)),
        }
    }
    Ok(edges)
}

pub fn format_edge_list(edges: &[(String, String)]) -> String {
    let mut out = String::new();
    for (a, b) in edges {
        let _ = writeln!(out, "{a}\t{b}");
    }
    out
}

/// Header `count dim`, then `name<TAB>v1 v2 ... vdim` per node.
pub fn read_word_vectors(path: &Path) -> Result<BTreeMap<String, Vec<f64>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_word_vectors(&text).map_err(|detail| Error::format(path, detail))
}

pub fn parse_word_vectors(text: &str) -> std::result::Result<BTreeMap<String, Vec<f64>>, String> {
    let mut lines = text.lines();
    let header = lines.next().ok_or("missing header line")?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    let (count, dim) = match fields.as_slice() {
        [c, d] => (
            c.parse::<usize>().map_err(|e| format!("header count: {e}"))?,
            d.parse::<usize>().map_err(|e| format!("header dim: {e}"))?,
        ),
        _ => return Err("header must be `count dim`".into()),
    };
    let mut table = BTreeMap::new();
    for (n, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let (name, rest) = line
            .split_once('\t')
            .ok_or_else(|| format!("line {}: missing tab after name", n + 2))?;
        let values = rest
            .split(' ')
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| format!("line {}: {e}", n + 2))?;
        if values.len() != dim {
            return Err(format!(
                "line {}: {} values for dimension {dim}",
                n + 2,
                values.len()
            ));
        }
        if table.insert(name.to_string(), values).is_some() {
            return Err(format!("line {}: duplicate name {name}", n + 2));
        }
    }
    if table.len() != count {
        return Err(format!("header announces {count} vectors, found {}", table.len()));
    }
    Ok(table)
}

pub fn format_word_vectors(table: &BTreeMap<String, Vec<f64>>) -> String {
    let dim = table.values().next().map_or(0, Vec::len);
    let mut out = format!("{} {dim}\n", table.len());
    for (name, values) in table {
        out.push_str(name);
        out.push('\t');
        for (i, v) in values.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            let _ = write!(out, "{v}");
        }
        out.push('\n');
    }
    out
}
