//! Multi-view self-expression.
//!
//! Two solvers produce the raw coefficient matrix `S`: a closed form that
//! uses the Woodbury identity so only an `Md x Md` system is factorized, and
//! a per-view network whose soft-thresholded inner products give `S^m`.
//! The raw matrix is then normalized into an affinity, turned into a
//! false-negative mask, and purified into the sparse matrix that builds the
//! self-expressive view.

use std::rc::Rc;

use nalgebra::DMatrix;
use ndarray::{s, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sprs::TriMat;

use crate::diffmath::{frobenius_sq, glorot, normalize_rows, Matrix, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Solver {
    Network,
    ClosedForm,
}

/// Population over which percentile thresholds are taken.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PercentileScope {
    /// All off-diagonal entries.
    Global,
    /// Off-diagonal entries of each row separately.
    PerRow,
}

/// Which side of the purification threshold survives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PurifyRule {
    /// Entries below the threshold are zeroed.
    KeepAbove,
    /// Entries at or above the threshold are zeroed.
    ZeroAbove,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelfExprConfig {
    pub solver: Solver,
    pub alpha: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    /// L1/L2 balance of the elastic net.
    pub eta: f64,
    /// Weight of the self-expression loss in the network variant.
    pub mu: f64,
    pub eps1: f64,
    pub eps2: f64,
    /// Connection-strength threshold for the indicator prior.
    pub delta: u32,
    /// Neighbors per node in the attribute top-K prior.
    pub top_k: usize,
    pub percentile_scope: PercentileScope,
    pub purify_rule: PurifyRule,
    /// Epochs between closed-form recomputations.
    pub recompute_stride: usize,
    /// Hidden and output width of the per-view networks; defaults to the
    /// embedding width.
    pub network_dim: Option<usize>,
    pub phi_init: f64,
    /// Center per-metapath embeddings over nodes and row-normalize them
    /// before self-expression.
    #[serde(default = "default_true")]
    pub normalize_embeddings: bool,
    /// Factor applied to network coefficients; `None` means `1 / N`.
    #[serde(default)]
    pub coefficient_scale: Option<f64>,
    /// Center the network's codes over nodes and scale them to unit length, so
    /// coefficients are cosines around the mean code.
    #[serde(default = "default_true")]
    pub unit_codes: bool,
}

fn default_true() -> bool {
    true
}

impl SelfExprConfig {
    pub fn closed_form() -> Self {
        Self {
            solver: Solver::ClosedForm,
            alpha: 100.0,
            lambda1: 0.5,
            lambda2: 0.5,
            eta: 0.9,
            mu: 0.5,
            eps1: 0.8,
            eps2: 0.9,
            delta: 1,
            top_k: 10,
            percentile_scope: PercentileScope::Global,
            purify_rule: PurifyRule::KeepAbove,
            recompute_stride: 1,
            network_dim: None,
            phi_init: 0.1,
            normalize_embeddings: true,
            coefficient_scale: None,
            unit_codes: true,
        }
    }

    pub fn network() -> Self {
        Self {
            solver: Solver::Network,
            alpha: 0.01,
            lambda1: 0.01,
            lambda2: 0.01,
            ..Self::closed_form()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.lambda1 < 0.0 || self.lambda2 < 0.0 || self.mu < 0.0 {
            return Err(Error::config("self-expression coefficients must be nonnegative"));
        }
        if self.solver == Solver::ClosedForm && self.alpha + self.lambda1 + self.lambda2 <= 0.0 {
            return Err(Error::config("closed form needs alpha + lambda1 + lambda2 > 0"));
        }
        for (name, v) in [("eta", self.eta), ("eps1", self.eps1), ("eps2", self.eps2)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("{name} = {v} not in [0, 1]")));
            }
        }
        if self.delta < 1 || self.top_k < 1 || self.recompute_stride < 1 {
            return Err(Error::config("delta, top_k and recompute_stride must be at least 1"));
        }
        if self.phi_init < 0.0 {
            return Err(Error::config("phi_init must be nonnegative"));
        }
        if self.coefficient_scale.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::config("coefficient_scale must be positive"));
        }
        Ok(())
    }
}

/// `[sqrt(b_1) H_1, ..., sqrt(b_M) H_M]`.
pub fn weighted_concat(per_metapath: &[Matrix], beta: &[f64]) -> Result<Matrix> {
    if per_metapath.is_empty() || per_metapath.len() != beta.len() {
        return Err(Error::shape(
            "weighted_concat",
            format!("{} views, {} weights", per_metapath.len(), beta.len()),
        ));
    }
    let n = per_metapath[0].nrows();
    if per_metapath.iter().any(|h| h.nrows() != n) {
        return Err(Error::shape("weighted_concat", "views have different row counts"));
    }
    let views: Vec<Matrix> = per_metapath.iter().zip(beta).map(|(h, &b)| h * b.sqrt()).collect();
    let refs: Vec<_> = views.iter().map(|m| m.view()).collect();
    Ok(ndarray::concatenate(ndarray::Axis(1), &refs).expect("equal row counts"))
}

fn prior_target(hcat: &Matrix, p: &Matrix, k: &Matrix, l1: f64, l2: f64) -> Result<Matrix> {
    let n = hcat.nrows();
    if p.dim() != (n, n) || k.dim() != (n, n) {
        return Err(Error::shape(
            "solve_closed_form",
            format!("priors {:?} / {:?} for {n} nodes", p.dim(), k.dim()),
        ));
    }
    Ok(hcat.dot(&hcat.t()) + &(p * l1) + &(k * l2))
}

fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[[i, j]])
}

fn from_na(m: &DMatrix<f64>) -> Matrix {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

/// Closed-form consensus coefficients
/// `S = (Hc Hc^T + c I)^{-1} (Hc Hc^T + l1 P + l2 K)` with `c = alpha + l1 + l2`,
/// evaluated through the Woodbury identity
/// `(c I + Hc Hc^T)^{-1} = c^{-1} I - c^{-2} Hc (I + c^{-1} Hc^T Hc)^{-1} Hc^T`.
///
/// Embeddings are plain matrices: the solution never carries gradient.
pub fn solve_closed_form(
    per_metapath: &[Matrix],
    beta: &[f64],
    p: &Matrix,
    k: &Matrix,
    alpha: f64,
    lambda1: f64,
    lambda2: f64,
) -> Result<Matrix> {
    let c = alpha + lambda1 + lambda2;
    if !(c > 0.0) {
        return Err(Error::config("closed form needs alpha + lambda1 + lambda2 > 0"));
    }
    let hcat = weighted_concat(per_metapath, beta)?;
    let target = prior_target(&hcat, p, k, lambda1, lambda2)?;
    let md = hcat.ncols();

    let mut inner = hcat.t().dot(&hcat) / c;
    for i in 0..md {
        inner[[i, i]] += 1.0;
    }
    let chol = to_na(&inner)
        .cholesky()
        .ok_or_else(|| Error::Numerical("Woodbury inner system is not positive definite".into()))?;
    let projected = chol.solve(&to_na(&hcat.t().dot(&target)));
    let correction = hcat.dot(&from_na(&projected)) / c;
    let s = (target - correction) / c;
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("closed-form solver produced non-finite coefficients".into()));
    }
    Ok(s)
}

/// Reference for [`solve_closed_form`] that factorizes the full `N x N`
/// system with LU. Cubic in `N`; meant for checking the fast path.
pub fn solve_closed_form_direct(
    per_metapath: &[Matrix],
    beta: &[f64],
    p: &Matrix,
    k: &Matrix,
    alpha: f64,
    lambda1: f64,
    lambda2: f64,
) -> Result<Matrix> {
    let c = alpha + lambda1 + lambda2;
    let hcat = weighted_concat(per_metapath, beta)?;
    let target = prior_target(&hcat, p, k, lambda1, lambda2)?;
    let mut system = hcat.dot(&hcat.t());
    for i in 0..system.nrows() {
        system[[i, i]] += c;
    }
    let x = to_na(&system)
        .lu()
        .solve(&to_na(&target))
        .ok_or_else(|| Error::Numerical("direct closed-form system is singular".into()))?;
    Ok(from_na(&x))
}

/// Two-layer network of one view.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewNetwork {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

/// Per-view networks and the shared soft threshold. `phi = softplus(phi_raw)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SelfExprNetworkParams {
    pub views: Vec<ViewNetwork>,
    pub phi_raw: Matrix,
}

fn inverse_softplus(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

impl SelfExprNetworkParams {
    pub fn init(views: usize, dim: usize, hidden: usize, phi: f64, rng: &mut impl Rng) -> Self {
        Self {
            views: (0..views)
                .map(|_| ViewNetwork {
                    w1: glorot(dim, hidden, rng),
                    b1: Array2::zeros((1, hidden)),
                    w2: glorot(hidden, hidden, rng),
                    b2: Array2::zeros((1, hidden)),
                })
                .collect(),
            phi_raw: Array2::from_elem((1, 1), inverse_softplus(phi.max(1e-12))),
        }
    }

    pub fn phi(&self) -> f64 {
        let x = self.phi_raw[[0, 0]];
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }

    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut out: Vec<&Matrix> = self.views.iter().flat_map(|v| [&v.w1, &v.b1, &v.w2, &v.b2]).collect();
        out.push(&self.phi_raw);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = self
            .views
            .iter_mut()
            .flat_map(|v| [&mut v.w1, &mut v.b1, &mut v.w2, &mut v.b2])
            .collect();
        out.push(&mut self.phi_raw);
        out
    }

    pub fn with_tensors(&self, tensors: &[Matrix]) -> Self {
        let mut out = self.clone();
        for (dst, src) in out.tensors_mut().into_iter().zip(tensors) {
            dst.clone_from(src);
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|m| m.len()).sum()
    }

    pub fn bind(&self, tape: &Tape) -> BoundNetwork {
        let vars: Vec<Var> = self.tensors().into_iter().map(|m| tape.param(m.clone())).collect();
        BoundNetwork::from_vars(&vars)
    }
}

#[derive(Clone, Debug)]
pub struct BoundNetwork {
    pub views: Vec<[Var; 4]>,
    pub phi_raw: Var,
}

impl BoundNetwork {
    /// Wraps vars in [`SelfExprNetworkParams::tensors`] order.
    pub fn from_vars(vars: &[Var]) -> Self {
        assert!(vars.len() % 4 == 1, "network var count");
        Self {
            views: vars[..vars.len() - 1].chunks(4).map(|c| [c[0], c[1], c[2], c[3]]).collect(),
            phi_raw: vars[vars.len() - 1],
        }
    }

    pub fn vars(&self) -> Vec<Var> {
        let mut out: Vec<Var> = self.views.iter().flatten().copied().collect();
        out.push(self.phi_raw);
        out
    }
}

/// Per-metapath embeddings as seen by the self-expression terms: centered
/// over nodes and scaled to unit rows when `normalize_embeddings` is set.
pub fn self_expression_inputs(tape: &Tape, per_metapath: &[Var], config: &SelfExprConfig) -> Vec<Var> {
    if !config.normalize_embeddings {
        return per_metapath.to_vec();
    }
    let n = per_metapath.first().map_or(0, |&h| tape.shape(h).0);
    let centering = tape.constant(Array2::eye(n) - 1.0 / n.max(1) as f64);
    per_metapath
        .iter()
        .map(|&h| tape.row_l2_normalize(tape.matmul(centering, h)))
        .collect()
}

/// [`self_expression_inputs`] on plain matrices.
pub fn self_expression_values(per_metapath: &[Matrix], config: &SelfExprConfig) -> Vec<Matrix> {
    if !config.normalize_embeddings {
        return per_metapath.to_vec();
    }
    per_metapath
        .iter()
        .map(|h| match h.mean_axis(Axis(0)) {
            Some(mean) => normalize_rows(&(h - &mean)),
            None => h.clone(),
        })
        .collect()
}

/// Scale applied to network coefficients over `n` nodes.
pub fn coefficient_scale(config: &SelfExprConfig, n: usize) -> f64 {
    config.coefficient_scale.unwrap_or(1.0 / n.max(1) as f64)
}

/// `(S^1..S^M, S)` where `S^m_ij = scale * Gamma_phi(z_i . z_j)` off the
/// diagonal and `S = sum_m beta_m S^m` with `beta` treated as constants.
pub fn network_coefficients(
    tape: &Tape,
    per_metapath: &[Var],
    beta: &[f64],
    net: &BoundNetwork,
    scale: f64,
    unit_codes: bool,
) -> (Vec<Var>, Var) {
    assert_eq!(per_metapath.len(), net.views.len(), "one network per metapath");
    assert_eq!(per_metapath.len(), beta.len(), "one weight per metapath");
    let n = tape.shape(per_metapath[0]).0;
    let off_diagonal = tape.constant(Array2::from_shape_fn((n, n), |(i, j)| if i == j { 0.0 } else { scale }));
    let centering = unit_codes.then(|| tape.constant(Array2::eye(n) - 1.0 / n as f64));
    let phi = tape.softplus(net.phi_raw);
    let views: Vec<Var> = per_metapath
        .iter()
        .zip(&net.views)
        .map(|(&h, &[w1, b1, w2, b2])| {
            let hidden = tape.elu(tape.add_row(tape.matmul(h, w1), b1));
            let mut z = tape.add_row(tape.matmul(hidden, w2), b2);
            if let Some(c) = centering {
                z = tape.row_l2_normalize(tape.matmul(c, z));
            }
            let gram = tape.matmul(z, tape.transpose(z));
            tape.mul(tape.soft_threshold(gram, phi), off_diagonal)
        })
        .collect();
    let consensus = views
        .iter()
        .zip(beta)
        .map(|(&s, &b)| tape.scale(s, b))
        .reduce(|a, b| tape.add(a, b))
        .expect("at least one view");
    (views, consensus)
}

/// Multi-view self-expression objective with elastic-net regularization and
/// the strength / attribute priors, divided by the node count so that it is
/// on the per-node scale of the contrastive loss.
#[allow(clippy::too_many_arguments)]
pub fn self_expression_loss(
    tape: &Tape,
    per_metapath: &[Var],
    view_coefficients: &[Var],
    consensus: Var,
    beta: &[f64],
    p: &Matrix,
    k: &Matrix,
    config: &SelfExprConfig,
) -> Var {
    let mut terms = Vec::with_capacity(per_metapath.len() + 2);
    for ((&h, &sm), &b) in per_metapath.iter().zip(view_coefficients).zip(beta) {
        let recon = frobenius_sq(tape, tape.sub(h, tape.matmul(sm, h)));
        let l1 = tape.sum(tape.abs(sm));
        let l2 = frobenius_sq(tape, sm);
        let reg = tape.add(
            tape.scale(l1, config.alpha * config.eta),
            tape.scale(l2, config.alpha * (1.0 - config.eta) / 2.0),
        );
        terms.push(tape.scale(tape.add(recon, reg), b));
    }
    if config.lambda1 != 0.0 {
        let d = tape.sub(consensus, tape.constant(p.clone()));
        terms.push(tape.scale(frobenius_sq(tape, d), config.lambda1));
    }
    if config.lambda2 != 0.0 {
        let d = tape.sub(consensus, tape.constant(k.clone()));
        terms.push(tape.scale(frobenius_sq(tape, d), config.lambda2));
    }
    let n = tape.shape(consensus).0.max(1);
    let total = terms.into_iter().reduce(|a, b| tape.add(a, b)).expect("nonempty");
    tape.scale(total, 1.0 / n as f64)
}

/// Min-max scales `values` to `[0, 1]`; a constant slice maps to zeros.
pub fn min_max(values: &mut [f64]) {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    for v in values.iter_mut() {
        *v = if span > 0.0 { (*v - lo) / span } else { 0.0 };
    }
}

fn assert_affinity(s: &Matrix) {
    let n = s.nrows();
    for i in 0..n {
        assert_eq!(s[[i, i]], 0.0, "nonzero diagonal");
        for j in 0..n {
            assert!((0.0..=1.0).contains(&s[[i, j]]), "entry outside [0, 1]");
            assert_eq!(s[[i, j]].to_bits(), s[[j, i]].to_bits(), "asymmetric");
        }
    }
}

/// Row-wise min-max over off-diagonal entries, zero diagonal, then
/// `(|S| + |S|^T) / 2`.
pub fn postprocess(raw: &Matrix) -> Matrix {
    let n = raw.nrows();
    assert_eq!(raw.ncols(), n, "postprocess needs a square matrix");
    let mut scaled = Array2::zeros((n, n));
    let mut row = Vec::with_capacity(n.saturating_sub(1));
    for i in 0..n {
        row.clear();
        row.extend((0..n).filter(|&j| j != i).map(|j| raw[[i, j]]));
        min_max(&mut row);
        for (j, v) in (0..n).filter(|&j| j != i).zip(&row) {
            scaled[[i, j]] = *v;
        }
    }
    let mut out = Array2::zeros((n, n));
    for i in 0..n {
        for j in i + 1..n {
            let v = 0.5 * (f64::abs(scaled[[i, j]]) + f64::abs(scaled[[j, i]]));
            out[[i, j]] = v;
            out[[j, i]] = v;
        }
    }
    if cfg!(debug_assertions) {
        assert_affinity(&out);
    }
    out
}

/// Linear-interpolation percentile (`q` in `[0, 1]`) of unsorted values.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of nothing");
    let mut v = values.to_vec();
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let (_, &mut below, above) = v.select_nth_unstable_by(lo, f64::total_cmp);
    let next = if pos > lo as f64 {
        above.iter().copied().min_by(f64::total_cmp).unwrap_or(below)
    } else {
        below
    };
    below + (next - below) * (pos - lo as f64)
}

/// Percentile thresholds per row (one shared value under `Global`).
pub fn thresholds(s: &Matrix, q: f64, scope: PercentileScope) -> Vec<f64> {
    let n = s.nrows();
    let off = |i: usize| (0..n).filter(move |&j| j != i).map(move |j| s[[i, j]]);
    if n < 2 {
        return vec![f64::INFINITY; n];
    }
    match scope {
        PercentileScope::Global => {
            let all: Vec<f64> = (0..n).flat_map(off).collect();
            vec![percentile(&all, q); n]
        }
        PercentileScope::PerRow => (0..n).map(|i| percentile(&off(i).collect::<Vec<_>>(), q)).collect(),
    }
}

/// False-negative mask: entries at or above the `eps1` percentile become 1,
/// the rest keep their affinity.
pub fn fn_mask(s: &Matrix, eps1: f64, scope: PercentileScope) -> Matrix {
    let t = thresholds(s, eps1, scope);
    let mut out = s.clone();
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        row.mapv_inplace(|v| if v >= t[i] { 1.0 } else { v });
    }
    out
}

/// Applies a per-row threshold and L1-normalizes every nonzero row.
pub fn purify_at(s: &Matrix, thresholds: &[f64], rule: PurifyRule) -> Matrix {
    let mut out = s.clone();
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let t = thresholds[i];
        row.mapv_inplace(|v| {
            let keep = match rule {
                PurifyRule::KeepAbove => v >= t,
                PurifyRule::ZeroAbove => v < t,
            };
            if keep {
                v
            } else {
                0.0
            }
        });
        let total: f64 = row.sum();
        if total > 0.0 {
            row.mapv_inplace(|v| v / total);
        }
    }
    out
}

/// Sparsified, row-normalized affinity for the self-expressive view.
pub fn purify(s: &Matrix, eps2: f64, scope: PercentileScope, rule: PurifyRule) -> Matrix {
    purify_at(s, &thresholds(s, eps2, scope), rule)
}

/// `H^S = S_hat X_hat` with `S_hat` as a constant.
pub fn self_expressive_view(tape: &Tape, purified: &Matrix, projected: Var) -> Var {
    let (n, m) = purified.dim();
    let mut tri = TriMat::new((n, m));
    for ((i, j), &v) in purified.indexed_iter() {
        if v != 0.0 {
            tri.add_triplet(i, j, v);
        }
    }
    tape.sparse_matmul(Rc::new(tri.to_csr()), projected)
}

/// Raw coefficients and everything derived from them.
#[derive(Clone, Debug, PartialEq)]
pub struct SelfExpressiveMatrix {
    pub raw: Matrix,
    pub processed: Matrix,
    pub fn_mask: Matrix,
    pub purified: Matrix,
}

impl SelfExpressiveMatrix {
    pub fn derive(raw: Matrix, config: &SelfExprConfig) -> Self {
        let processed = postprocess(&raw);
        let fn_mask = fn_mask(&processed, config.eps1, config.percentile_scope);
        let purified = purify(&processed, config.eps2, config.percentile_scope, config.purify_rule);
        Self {
            raw,
            processed,
            fn_mask,
            purified,
        }
    }
}

/// Mean processed affinity within and across classes.
pub fn block_contrast(s: &Matrix, labels: &[usize]) -> (f64, f64) {
    let n = s.nrows();
    let (mut intra, mut ni, mut inter, mut nx) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            if labels[i] == labels[j] {
                intra += s[[i, j]];
                ni += 1;
            } else {
                inter += s[[i, j]];
                nx += 1;
            }
        }
    }
    (intra / ni.max(1) as f64, inter / nx.max(1) as f64)
}

/// The `rows x cols` top-left block, for diagnostics.
pub fn corner(s: &Matrix, rows: usize, cols: usize) -> Matrix {
    s.slice(s![..rows.min(s.nrows()), ..cols.min(s.ncols())]).to_owned()
}
