//! Heterogeneous graph encoder: a feature projection shared by all
//! metapaths, one normalized graph convolution per metapath subgraph, and
//! semantic attention that fuses the per-metapath embeddings.

use std::rc::Rc;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sprs::CsMat;

use crate::augment::AugmentedView;
use crate::diffmath::{glorot, Matrix, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::MetapathSubgraph;
use crate::rng::Stream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Elu,
    Tanh,
    Linear,
}

impl Activation {
    pub fn apply(self, tape: &Tape, x: Var) -> Var {
        match self {
            Activation::Elu => tape.elu(x),
            Activation::Tanh => tape.tanh(x),
            Activation::Linear => x,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub hidden_dim: usize,
    /// Number of linear layers in the feature projection.
    pub projection_depth: usize,
    pub activation: Activation,
    pub attention_dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 64,
            projection_depth: 1,
            activation: Activation::Elu,
            attention_dropout: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.projection_depth == 0 {
            return Err(Error::config("encoder dimensions must be positive"));
        }
        if !(0.0..=0.5).contains(&self.attention_dropout) {
            return Err(Error::config(format!(
                "attention dropout {} not in [0, 0.5]",
                self.attention_dropout
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub projection: Vec<Linear>,
    pub att_weight: Matrix,
    pub att_bias: Matrix,
    pub att_query: Matrix,
    pub activation: Activation,
    pub attention_dropout: f64,
}

impl EncoderParams {
    pub fn init(in_dim: usize, config: &EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_dim;
        let projection = (0..config.projection_depth)
            .map(|k| {
                let fan_in = if k == 0 { in_dim } else { d };
                Linear {
                    weight: glorot(fan_in, d, rng),
                    bias: Array2::zeros((1, d)),
                }
            })
            .collect();
        Ok(Self {
            projection,
            att_weight: glorot(d, d, rng),
            att_bias: Array2::zeros((1, d)),
            att_query: glorot(d, 1, rng),
            activation: config.activation,
            attention_dropout: config.attention_dropout,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.projection[0].weight.nrows()
    }

    pub fn dim(&self) -> usize {
        self.att_weight.nrows()
    }

    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut out: Vec<&Matrix> = Vec::new();
        for l in &self.projection {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        out.extend([&self.att_weight, &self.att_bias, &self.att_query]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = Vec::new();
        for l in &mut self.projection {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out.extend([&mut self.att_weight, &mut self.att_bias, &mut self.att_query]);
        out
    }

    /// Rebuilds parameters from tensors in [`tensors`](Self::tensors) order.
    pub fn with_tensors(&self, tensors: &[Matrix]) -> Self {
        let mut out = self.clone();
        for (dst, src) in out.tensors_mut().into_iter().zip(tensors) {
            dst.clone_from(src);
        }
        out
    }

    /// Puts every tensor on the tape as a trainable leaf.
    pub fn bind(&self, tape: &Tape) -> BoundEncoder {
        let vars: Vec<Var> = self.tensors().into_iter().map(|m| tape.param(m.clone())).collect();
        BoundEncoder::from_vars(self, &vars)
    }
}

/// Encoder parameters recorded on a tape.
#[derive(Clone, Debug)]
pub struct BoundEncoder {
    pub projection: Vec<(Var, Var)>,
    pub att_weight: Var,
    pub att_bias: Var,
    pub att_query: Var,
    pub activation: Activation,
    pub attention_dropout: f64,
}

impl BoundEncoder {
    /// Wraps vars given in [`EncoderParams::tensors`] order.
    pub fn from_vars(params: &EncoderParams, vars: &[Var]) -> Self {
        let depth = params.projection.len();
        assert_eq!(vars.len(), 2 * depth + 3, "encoder var count");
        Self {
            projection: (0..depth).map(|k| (vars[2 * k], vars[2 * k + 1])).collect(),
            att_weight: vars[2 * depth],
            att_bias: vars[2 * depth + 1],
            att_query: vars[2 * depth + 2],
            activation: params.activation,
            attention_dropout: params.attention_dropout,
        }
    }

    pub fn vars(&self) -> Vec<Var> {
        let mut out: Vec<Var> = self.projection.iter().flat_map(|&(w, b)| [w, b]).collect();
        out.extend([self.att_weight, self.att_bias, self.att_query]);
        out
    }
}

/// `(D + I)^{-1/2} (A + I) (D + I)^{-1/2}` over the binarized adjacency.
pub fn propagation_matrix(sub: &MetapathSubgraph) -> CsMat<f64> {
    let adj = sub.adjacency();
    debug_assert!(adj.is_csr());
    let n = sub.num_nodes();
    let scale: Vec<f64> = (0..n).map(|i| 1.0 / ((sub.degree(i) + 1) as f64).sqrt()).collect();
    let mut indptr = Vec::with_capacity(n + 1);
    let mut indices = Vec::with_capacity(adj.nnz() + n);
    let mut data = Vec::with_capacity(adj.nnz() + n);
    indptr.push(0);
    for (i, row) in adj.outer_iterator().enumerate() {
        // rows are sorted and diagonal-free; slot the self loop in order
        let mut self_loop = Some(i);
        for (j, _) in row.iter() {
            if let Some(d) = self_loop.filter(|&d| d < j) {
                indices.push(d);
                data.push(scale[d] * scale[d]);
                self_loop = None;
            }
            indices.push(j);
            data.push(scale[i] * scale[j]);
        }
        if let Some(d) = self_loop {
            indices.push(d);
            data.push(scale[d] * scale[d]);
        }
        indptr.push(indices.len());
    }
    CsMat::new((n, n), indptr, indices, data)
}

/// Feature projection `act(... act(X W1 + b1) ...)`.
pub fn project_features(tape: &Tape, x: Var, enc: &BoundEncoder) -> Var {
    enc.projection.iter().fold(x, |h, &(w, b)| {
        let z = tape.add_row(tape.matmul(h, w), b);
        enc.activation.apply(tape, z)
    })
}

pub fn gcn_propagate(tape: &Tape, projected: Var, propagation: &Rc<CsMat<f64>>) -> Var {
    tape.sparse_matmul(Rc::clone(propagation), projected)
}

/// Fuses per-metapath embeddings. Returns `(H, beta)` with `beta` as `1 x M`.
/// Dropout on the attention activations is applied only when `rng` is given.
pub fn semantic_attention(
    tape: &Tape,
    per_metapath: &[Var],
    enc: &BoundEncoder,
    mut rng: Option<&mut Stream>,
) -> (Var, Var) {
    assert!(!per_metapath.is_empty(), "semantic attention over zero metapaths");
    let scores: Vec<Var> = per_metapath
        .iter()
        .map(|&h| {
            let mut a = tape.tanh(tape.add_row(tape.matmul(h, enc.att_weight), enc.att_bias));
            let rate = enc.attention_dropout;
            if let Some(rng) = rng.as_deref_mut() {
                if rate > 0.0 {
                    let (r, c) = tape.shape(a);
                    let keep = 1.0 - rate;
                    let mask = Array2::from_shape_fn((r, c), |_| {
                        if rng.gen::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    });
                    a = tape.mul(a, tape.constant(mask));
                }
            }
            tape.mean(tape.matmul(a, enc.att_query))
        })
        .collect();
    let beta = tape.row_softmax(tape.concat_columns(&scores));
    let fused = per_metapath
        .iter()
        .enumerate()
        .map(|(m, &h)| tape.scale_by(h, tape.element(beta, 0, m)))
        .reduce(|acc, t| tape.add(acc, t))
        .expect("nonempty");
    (fused, beta)
}

/// Tape handles of one encoded view.
#[derive(Clone, Debug)]
pub struct EncodedView {
    pub projected: Var,
    pub per_metapath: Vec<Var>,
    pub fused: Var,
    pub beta: Var,
}

fn check_view(view: &AugmentedView, params: &EncoderParams) -> Result<()> {
    let n = view.features.nrows();
    if view.features.ncols() != params.in_dim() {
        return Err(Error::shape(
            "encode",
            format!("{} feature columns, encoder expects {}", view.features.ncols(), params.in_dim()),
        ));
    }
    if view.subgraphs.is_empty() {
        return Err(Error::config("encode needs at least one metapath subgraph"));
    }
    if let Some(s) = view.subgraphs.iter().find(|s| s.num_nodes() != n) {
        return Err(Error::shape(
            "encode",
            format!("metapath {} has {} nodes, features have {n} rows", s.spec.name, s.num_nodes()),
        ));
    }
    Ok(())
}

/// Full encoder pass on the tape. `rng` enables attention dropout.
pub fn encode(
    tape: &Tape,
    view: &AugmentedView,
    params: &EncoderParams,
    enc: &BoundEncoder,
    rng: Option<&mut Stream>,
) -> Result<EncodedView> {
    check_view(view, params)?;
    let x = tape.constant(view.features.clone());
    let projected = project_features(tape, x, enc);
    let per_metapath: Vec<Var> = view
        .subgraphs
        .iter()
        .map(|s| gcn_propagate(tape, projected, &Rc::new(propagation_matrix(s))))
        .collect();
    let (fused, beta) = semantic_attention(tape, &per_metapath, enc, rng);
    Ok(EncodedView {
        projected,
        per_metapath,
        fused,
        beta,
    })
}

/// Plain-matrix results of an encoder pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewEmbeddings {
    pub projected: Matrix,
    pub per_metapath: Vec<Matrix>,
    pub fused: Matrix,
    pub beta: Vec<f64>,
}

impl ViewEmbeddings {
    pub fn from_tape(tape: &Tape, enc: &EncodedView) -> Self {
        Self {
            projected: (*tape.value(enc.projected)).clone(),
            per_metapath: enc.per_metapath.iter().map(|&v| (*tape.value(v)).clone()).collect(),
            fused: (*tape.value(enc.fused)).clone(),
            beta: tape.value(enc.beta).iter().copied().collect(),
        }
    }
}

/// Inference pass without dropout.
pub fn encode_values(view: &AugmentedView, params: &EncoderParams) -> Result<ViewEmbeddings> {
    let tape = Tape::new();
    let enc = params.bind(&tape);
    let out = encode(&tape, view, params, &enc, None)?;
    Ok(ViewEmbeddings::from_tape(&tape, &out))
}
