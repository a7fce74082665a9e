//! Latent concept graph: thresholded cosine-similarity graph over concept
//! states, GCN propagation of the concept keys, and the graph summary.

mod export;

pub use export::{export_graph, kmeans, GraphExport, GraphJson, JsonEdge, JsonNode};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::init::{glorot, zeros};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphSettings {
    /// Similarity threshold for keeping an edge.
    pub mu: f64,
    /// Unit edge weights instead of similarity weights.
    pub binary_adjacency: bool,
}

impl Default for GraphSettings {
    fn default() -> Self {
        Self {
            mu: 0.25,
            binary_adjacency: false,
        }
    }
}

/// Snapshot of the graph used as a constant during one mini-batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentConceptGraph<T> {
    /// `Â = A + I`, symmetric.
    pub adjacency: Tensor<T>,
    /// Diagonal of `D̂`: row sums of `Â`.
    pub degree: Vec<T>,
    /// Number of graph rebuilds before this one.
    pub built_at: u64,
}

pub fn cosine<T: Scalar>(a: &[T], b: &[T]) -> Option<T> {
    let dot: T = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    let na: T = a.iter().map(|&x| x * x).sum::<T>().sqrt();
    let nb: T = b.iter().map(|&x| x * x).sum::<T>().sqrt();
    if na == T::zero() || nb == T::zero() {
        return None;
    }
    Some((dot / (na * nb)).max(-T::one()).min(T::one()))
}

/// Builds the graph from concept-state rows `[N, d_v]`.
pub fn build_graph<T: Scalar>(states: &Tensor<T>, settings: &GraphSettings, built_at: u64) -> LatentConceptGraph<T> {
    let n = states.rows();
    let mu = T::lit(settings.mu);
    let mut adjacency = Tensor::identity(n);
    let mut degenerate = false;
    for i in 0..n {
        for j in (i + 1)..n {
            let sim = cosine(states.row(i), states.row(j)).unwrap_or_else(|| {
                degenerate = true;
                T::zero()
            });
            if sim >= mu && sim > T::zero() {
                let w = if settings.binary_adjacency { T::one() } else { sim };
                adjacency.data_mut()[i * n + j] = w;
                adjacency.data_mut()[j * n + i] = w;
            }
        }
    }
    if degenerate {
        log::warn!("concept state has a zero-norm row; its similarities are treated as 0");
    }
    let degree = (0..n).map(|i| adjacency.row(i).iter().copied().sum()).collect();
    LatentConceptGraph {
        adjacency,
        degree,
        built_at,
    }
}

impl<T: Scalar> LatentConceptGraph<T> {
    /// Self-loops only.
    pub fn isolated(n: usize) -> Self {
        Self {
            adjacency: Tensor::identity(n),
            degree: vec![T::one(); n],
            built_at: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.degree.len()
    }

    pub fn is_empty(&self) -> bool {
        self.degree.is_empty()
    }

    pub fn degree_matrix(&self) -> Tensor<T> {
        let n = self.len();
        let mut d = Tensor::zeros(&[n, n]);
        for (i, &v) in self.degree.iter().enumerate() {
            d.data_mut()[i * n + i] = v;
        }
        d
    }

    /// `D̂^{-1/2} Â D̂^{-1/2}`.
    pub fn propagation(&self) -> Tensor<T> {
        let n = self.len();
        let inv: Vec<T> = self.degree.iter().map(|&d| T::one() / d.sqrt()).collect();
        let mut s = self.adjacency.clone();
        for i in 0..n {
            for j in 0..n {
                s.data_mut()[i * n + j] *= inv[i] * inv[j];
            }
        }
        s
    }

    /// Undirected non-self edges `(i, j, weight)` with `i < j`.
    pub fn edges(&self) -> Vec<(usize, usize, T)> {
        let n = self.len();
        let mut out = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                let w = self.adjacency.at(i, j);
                if w != T::zero() {
                    out.push((i, j, w));
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GcnParams<T> {
    /// One `[d_k, d_k]` weight per layer.
    pub layers: Vec<Tensor<T>>,
    /// `[N, d_k]` graph summary layer.
    pub summary_w: Tensor<T>,
    pub summary_b: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct GcnVars {
    pub layers: Vec<Var>,
    pub summary_w: Var,
    pub summary_b: Var,
}

const LAYER_NAMES: [&str; 8] = [
    "gcn.layer0",
    "gcn.layer1",
    "gcn.layer2",
    "gcn.layer3",
    "gcn.layer4",
    "gcn.layer5",
    "gcn.layer6",
    "gcn.layer7",
];

pub const MAX_GCN_LAYERS: usize = LAYER_NAMES.len();

impl<T: Scalar> GcnParams<T> {
    pub fn new<R: Rng + ?Sized>(concepts: usize, key_dim: usize, num_layers: usize, rng: &mut R) -> Result<Self> {
        if num_layers == 0 || num_layers > MAX_GCN_LAYERS {
            return Err(Error::Config(format!(
                "gcn_layers must lie in [1, {MAX_GCN_LAYERS}], got {num_layers}"
            )));
        }
        Ok(Self {
            layers: (0..num_layers).map(|_| glorot(rng, key_dim, key_dim)).collect(),
            summary_w: glorot(rng, concepts, key_dim),
            summary_b: zeros(concepts),
        })
    }

    pub fn named(&self) -> Vec<(&'static str, &Tensor<T>)> {
        let mut out: Vec<(&'static str, &Tensor<T>)> = LAYER_NAMES.iter().copied().zip(&self.layers).collect();
        out.push(("gcn.summary_w", &self.summary_w));
        out.push(("gcn.summary_b", &self.summary_b));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        let mut out: Vec<(&'static str, &mut Tensor<T>)> =
            LAYER_NAMES.iter().copied().zip(self.layers.iter_mut()).collect();
        out.push(("gcn.summary_w", &mut self.summary_w));
        out.push(("gcn.summary_b", &mut self.summary_b));
        out
    }

    pub fn register(&self, tape: &mut Tape<T>) -> GcnVars {
        GcnVars {
            layers: self.layers.iter().map(|w| tape.param(w.clone())).collect(),
            summary_w: tape.param(self.summary_w.clone()),
            summary_b: tape.param(self.summary_b.clone()),
        }
    }
}

impl GcnVars {
    pub fn list(&self) -> Vec<Var> {
        let mut out = self.layers.clone();
        out.push(self.summary_w);
        out.push(self.summary_b);
        out
    }
}

/// `H^{l+1} = relu(S H^l W^l)` starting from `H^0 = M_k`; `S` is a constant.
pub fn gcn_forward<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &GcnVars,
    concept_keys: Var,
    graph: &LatentConceptGraph<T>,
) -> Result<Var> {
    let s = tape.constant(graph.propagation());
    let mut h = concept_keys;
    for &w in &vars.layers {
        let mixed = tape.matmul(s, h)?;
        let projected = tape.matmul(mixed, w)?;
        h = tape.relu(projected)?;
    }
    Ok(h)
}

/// `z_g = tanh(W_g (Σ_i w_t(i) H(i)) + b_g)`.
pub fn graph_summary<T: Scalar>(tape: &mut Tape<T>, vars: &GcnVars, weights: Var, hidden: Var) -> Result<Var> {
    let attended = tape.matmul(weights, hidden)?;
    let pre = tape.affine(vars.summary_w, attended, vars.summary_b)?;
    tape.tanh(pre)
}
