//! Heterogeneous graph transformer encoder.
//!
//! Each layer, for target node `j`, head `h` and in-neighbor `i` over
//! relation `r`:
//!
//! ```text
//! Q_h(j)   = X(j) · Qlin_h[type(j)]
//! K_h(i)   = X(i) · Klin_h[type(i)]
//! att_h    = (Q_h(j) · Theta_h[r] · K_h(i)^T) · mu[r] / sqrt(d)
//! w_h(i)   = softmax of att_h over all in-neighbors of j
//! X'(j)    = mean over i of MLP(concat_h w_h(i) · K_h(i))
//! ```
//!
//! Messages are the weighted key vectors themselves (there is no value
//! projection) and by default there is no residual connection. Setting
//! [`HgtConfig::residual`] adds the layer input back, `X'(j) += X(j)`. `mu` holds one scalar
//! per relation triplet per layer; since each relation connects exactly one
//! (source type, target type) pair, it is indexed by relation.
//!
//! The forward pass is recorded on a [`Tape`] so gradients of any downstream
//! scalar reach both the parameters and the input features.

use std::cell::Cell;
use std::sync::Arc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kgraph::{NodeId, NodeType, PromptGraph, Relation};
use crate::params::{ParamSet, TensorVisitor};
use crate::tape::{Gradients, Tape, Var};

#[derive(Debug, Error, PartialEq)]
pub enum HgtError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value at layer {layer}, head {head}: {what}")]
    Numeric {
        layer: usize,
        head: usize,
        what: &'static str,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HgtConfig {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    /// Affine layers in the message MLP, with `tanh` between them.
    pub mlp_depth: usize,
    /// Add each layer's input to its output.
    pub residual: bool,
}

impl Default for HgtConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            heads: 2,
            layers: 2,
            mlp_depth: 1,
            residual: false,
        }
    }
}

impl HgtConfig {
    pub fn validate(&self) -> Result<(), HgtError> {
        if self.dim < 2 {
            return Err(HgtError::Config("dim must be at least 2".into()));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(HgtError::Config(format!(
                "head count {} does not divide dim {}",
                self.heads, self.dim
            )));
        }
        if self.mlp_depth == 0 {
            return Err(HgtError::Config("mlp_depth must be at least 1".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    /// Indexed by [`NodeType::index`]; `dim × head_dim`.
    pub q_lin: [Array2<f64>; 2],
    pub k_lin: [Array2<f64>; 2],
    /// Indexed by [`Relation::index`]; `head_dim × head_dim`.
    pub theta: [Array2<f64>; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub weight: Array2<f64>,
    /// `1 × dim`.
    pub bias: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub heads: Vec<HeadParams>,
    /// Indexed by [`Relation::index`].
    pub mu: [f64; 3],
    pub mlp: Vec<Affine>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HgtParams {
    pub config: HgtConfig,
    pub layers: Vec<LayerParams>,
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let s = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-s..=s))
}

impl HgtParams {
    /// Xavier-uniform matrices, `mu = 1`, zero MLP biases.
    pub fn init(config: HgtConfig, seed: u64) -> Result<Self, HgtError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, dh) = (config.dim, config.head_dim());
        let layers = (0..config.layers)
            .map(|_| LayerParams {
                heads: (0..config.heads)
                    .map(|_| HeadParams {
                        q_lin: [xavier(&mut rng, d, dh), xavier(&mut rng, d, dh)],
                        k_lin: [xavier(&mut rng, d, dh), xavier(&mut rng, d, dh)],
                        theta: [
                            xavier(&mut rng, dh, dh),
                            xavier(&mut rng, dh, dh),
                            xavier(&mut rng, dh, dh),
                        ],
                    })
                    .collect(),
                mu: [1.0; 3],
                mlp: (0..config.mlp_depth)
                    .map(|_| Affine {
                        weight: xavier(&mut rng, d, d),
                        bias: Array2::zeros((1, d)),
                    })
                    .collect(),
            })
            .collect();
        Ok(Self { config, layers })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut(&mut |_, data| data.fill(0.0));
        z
    }
}

impl ParamSet for HgtParams {
    fn visit(&self, f: &mut TensorVisitor<'_>) {
        for (l, layer) in self.layers.iter().enumerate() {
            for (h, head) in layer.heads.iter().enumerate() {
                for t in NodeType::ALL {
                    let m = &head.q_lin[t.index()];
                    f(&format!("hgt.l{l}.h{h}.q_lin.{}", t.name()), &[m.nrows(), m.ncols()], m.as_slice().unwrap());
                }
                for t in NodeType::ALL {
                    let m = &head.k_lin[t.index()];
                    f(&format!("hgt.l{l}.h{h}.k_lin.{}", t.name()), &[m.nrows(), m.ncols()], m.as_slice().unwrap());
                }
                for r in Relation::ALL {
                    let m = &head.theta[r.index()];
                    f(&format!("hgt.l{l}.h{h}.theta.{}", r.name()), &[m.nrows(), m.ncols()], m.as_slice().unwrap());
                }
            }
            f(&format!("hgt.l{l}.mu"), &[3], &layer.mu);
            for (k, aff) in layer.mlp.iter().enumerate() {
                let w = &aff.weight;
                f(&format!("hgt.l{l}.mlp{k}.weight"), &[w.nrows(), w.ncols()], w.as_slice().unwrap());
                f(&format!("hgt.l{l}.mlp{k}.bias"), &[aff.bias.ncols()], aff.bias.as_slice().unwrap());
            }
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        for (l, layer) in self.layers.iter_mut().enumerate() {
            for (h, head) in layer.heads.iter_mut().enumerate() {
                for t in NodeType::ALL {
                    f(&format!("hgt.l{l}.h{h}.q_lin.{}", t.name()), head.q_lin[t.index()].as_slice_mut().unwrap());
                }
                for t in NodeType::ALL {
                    f(&format!("hgt.l{l}.h{h}.k_lin.{}", t.name()), head.k_lin[t.index()].as_slice_mut().unwrap());
                }
                for r in Relation::ALL {
                    f(&format!("hgt.l{l}.h{h}.theta.{}", r.name()), head.theta[r.index()].as_slice_mut().unwrap());
                }
            }
            f(&format!("hgt.l{l}.mu"), &mut layer.mu);
            for (k, aff) in layer.mlp.iter_mut().enumerate() {
                f(&format!("hgt.l{l}.mlp{k}.weight"), aff.weight.as_slice_mut().unwrap());
                f(&format!("hgt.l{l}.mlp{k}.bias"), aff.bias.as_slice_mut().unwrap());
            }
        }
    }
}

thread_local! {
    static INVOCATIONS: Cell<u64> = const { Cell::new(0) };
}

/// Number of forward passes run on the current thread.
pub fn invocation_count() -> u64 {
    INVOCATIONS.with(Cell::get)
}

/// `(target, source)` position in a score matrix.
type Entry = (usize, usize);

/// Edge bookkeeping shared by every layer and head.
struct EdgeIndex {
    /// Relation-major; within a relation sorted by (target, source).
    src: Arc<Vec<usize>>,
    dst: Arc<Vec<usize>>,
    /// Per relation, the `(target, source)` entries of the score matrix.
    gather: Vec<(Relation, Arc<Vec<Entry>>)>,
}

impl EdgeIndex {
    fn new(graph: &PromptGraph) -> Self {
        let mut per_rel: Vec<Vec<(usize, usize)>> = vec![Vec::new(); 3];
        for j in 0..graph.num_nodes() {
            for &(src, rel) in graph.neighbors(NodeId(j)).expect("valid node") {
                per_rel[rel.index()].push((j, src.0));
            }
        }
        let mut src = Vec::new();
        let mut dst = Vec::new();
        let mut gather = Vec::new();
        for r in Relation::ALL {
            let list = std::mem::take(&mut per_rel[r.index()]);
            if list.is_empty() {
                continue;
            }
            dst.extend(list.iter().map(|&(j, _)| j));
            src.extend(list.iter().map(|&(_, i)| i));
            gather.push((r, Arc::new(list)));
        }
        Self {
            src: Arc::new(src),
            dst: Arc::new(dst),
            gather,
        }
    }
}

struct HeadVars {
    q_lin: [Var; 2],
    k_lin: [Var; 2],
    theta: [Var; 3],
}

struct LayerVars {
    heads: Vec<HeadVars>,
    mu: [Var; 3],
    mlp: Vec<(Var, Var)>,
    /// Attention weights per head, in edge order.
    attention: Vec<Var>,
}

/// Recorded forward pass; call [`HgtTrace::backward`] with the adjoint of
/// the output embeddings.
pub struct HgtTrace {
    tape: Tape,
    input: Var,
    output: Var,
    layers: Vec<LayerVars>,
    edges: EdgeIndex,
    config: HgtConfig,
}

impl HgtTrace {
    pub fn output(&self) -> &Array2<f64> {
        self.tape.value(self.output)
    }

    /// `(source, target, weight)` for every edge at the given layer/head.
    pub fn attention(&self, layer: usize, head: usize) -> Vec<(usize, usize, f64)> {
        let w = self.tape.value(self.layers[layer].attention[head]);
        (0..self.edges.src.len())
            .map(|k| (self.edges.src[k], self.edges.dst[k], w[[k, 0]]))
            .collect()
    }

    /// Gradients w.r.t. every parameter and w.r.t. the input features.
    pub fn backward(&self, d_output: Array2<f64>) -> (HgtParams, Array2<f64>) {
        let grads = self.tape.backward(self.output, d_output);
        let mut params = HgtParams {
            config: self.config,
            layers: Vec::with_capacity(self.layers.len()),
        };
        for lv in &self.layers {
            params.layers.push(LayerParams {
                heads: lv
                    .heads
                    .iter()
                    .map(|hv| HeadParams {
                        q_lin: hv.q_lin.map(|v| grads.wrt(v)),
                        k_lin: hv.k_lin.map(|v| grads.wrt(v)),
                        theta: hv.theta.map(|v| grads.wrt(v)),
                    })
                    .collect(),
                mu: lv.mu.map(|v| grads.wrt(v)[[0, 0]]),
                mlp: lv
                    .mlp
                    .iter()
                    .map(|&(w, b)| Affine {
                        weight: grads.wrt(w),
                        bias: grads.wrt(b),
                    })
                    .collect(),
            });
        }
        (params, input_grad(&grads, self.input))
    }
}

fn input_grad(grads: &Gradients, input: Var) -> Array2<f64> {
    grads.wrt(input)
}

fn check_finite(values: &Array2<f64>, layer: usize, head: usize, what: &'static str) -> Result<(), HgtError> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(HgtError::Numeric { layer, head, what })
    }
}

/// Runs the encoder on the graph's initial features.
pub fn encode(graph: &PromptGraph, params: &HgtParams) -> Result<Array2<f64>, HgtError> {
    encode_traced(graph, params).map(|(x, _)| x)
}

pub fn encode_traced(graph: &PromptGraph, params: &HgtParams) -> Result<(Array2<f64>, HgtTrace), HgtError> {
    encode_features_traced(graph, graph.features(), params)
}

/// Like [`encode_traced`] but with caller-supplied input features laid out
/// like [`PromptGraph::features`].
pub fn encode_features_traced(
    graph: &PromptGraph,
    features: &Array2<f64>,
    params: &HgtParams,
) -> Result<(Array2<f64>, HgtTrace), HgtError> {
    let config = params.config;
    config.validate()?;
    let (d, dh) = (config.dim, config.head_dim());
    let n = graph.num_candidates();
    if features.dim() != (n + 1, d) {
        return Err(HgtError::Shape(format!(
            "features are {:?}, expected ({}, {d})",
            features.dim(),
            n + 1
        )));
    }
    if params.layers.len() != config.layers {
        return Err(HgtError::Shape("layer count disagrees with config".into()));
    }
    check_finite(features, 0, 0, "input features")?;
    INVOCATIONS.with(|c| c.set(c.get() + 1));

    let edges = EdgeIndex::new(graph);
    let mut tape = Tape::new();
    let input = tape.leaf(features.clone());
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    let mut x = input;
    let mut layer_vars = Vec::with_capacity(config.layers);

    for (l, layer) in params.layers.iter().enumerate() {
        if layer.heads.len() != config.heads || layer.mlp.is_empty() {
            return Err(HgtError::Shape(format!("layer {l} has inconsistent heads or MLP")));
        }
        let xc = tape.slice_rows(x, 0, n);
        let xq = tape.slice_rows(x, n, 1);
        let mu = layer.mu.map(|m| tape.leaf(Array2::from_elem((1, 1), m)));
        let mut head_vars = Vec::with_capacity(config.heads);
        let mut attention = Vec::with_capacity(config.heads);
        let mut messages = Vec::with_capacity(config.heads);

        for (h, head) in layer.heads.iter().enumerate() {
            for m in head.q_lin.iter().chain(&head.k_lin) {
                if m.dim() != (d, dh) {
                    return Err(HgtError::Shape(format!("layer {l} head {h}: projection is {:?}", m.dim())));
                }
            }
            let q_lin = head.q_lin.clone().map(|m| tape.leaf(m));
            let k_lin = head.k_lin.clone().map(|m| tape.leaf(m));
            let theta = head.theta.clone().map(|m| tape.leaf(m));

            let project = |tape: &mut Tape, lin: &[Var; 2]| {
                let c = tape.matmul(xc, lin[NodeType::Candidate.index()]);
                let q = tape.matmul(xq, lin[NodeType::Query.index()]);
                tape.concat_rows(&[c, q])
            };
            let q = project(&mut tape, &q_lin);
            let k = project(&mut tape, &k_lin);
            let kt = tape.transpose(k);

            let mut logits = Vec::with_capacity(edges.gather.len());
            for (rel, at) in &edges.gather {
                let qt = tape.matmul(q, theta[rel.index()]);
                let scores = tape.matmul(qt, kt);
                let picked = tape.gather(scores, at.clone());
                let scaled = tape.scale(picked, mu[rel.index()]);
                logits.push(tape.scale_const(scaled, inv_sqrt_d));
            }
            let logits = tape.concat_rows(&logits);
            check_finite(tape.value(logits), l, h, "attention logits")?;
            let weights = tape.segment_softmax(logits, edges.dst.clone());
            check_finite(tape.value(weights), l, h, "attention weights")?;
            let keys = tape.select_rows(k, edges.src.clone());
            messages.push(tape.mul_col(keys, weights));
            attention.push(weights);
            head_vars.push(HeadVars { q_lin, k_lin, theta });
        }

        let mut m = tape.concat_cols(&messages);
        let mut mlp_vars = Vec::with_capacity(layer.mlp.len());
        for (k, aff) in layer.mlp.iter().enumerate() {
            if aff.weight.dim() != (d, d) || aff.bias.dim() != (1, d) {
                return Err(HgtError::Shape(format!("layer {l} MLP {k} has wrong shape")));
            }
            if k > 0 {
                m = tape.tanh(m);
            }
            let w = tape.leaf(aff.weight.clone());
            let b = tape.leaf(aff.bias.clone());
            let mw = tape.matmul(m, w);
            m = tape.add_row(mw, b);
            mlp_vars.push((w, b));
        }
        let update = tape.segment_mean(m, edges.dst.clone());
        x = if config.residual { tape.add(x, update) } else { update };
        check_finite(tape.value(x), l, 0, "layer output")?;
        layer_vars.push(LayerVars {
            heads: head_vars,
            mu,
            mlp: mlp_vars,
            attention,
        });
    }

    let out = tape.value(x).clone();
    Ok((
        out,
        HgtTrace {
            tape,
            input,
            output: x,
            layers: layer_vars,
            edges,
            config,
        },
    ))
}
