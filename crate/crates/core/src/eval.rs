//! Downstream evaluation: linear probe classification and k-means clustering.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffmath::{Adam, Matrix, Tape};
use crate::error::{Error, Result};
use crate::rng::Stream;

/// Train / validation / test node indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

impl Split {
    /// `n_per_class` training nodes per class; the rest is shuffled and
    /// halved into validation and test.
    pub fn stratified(labels: &[usize], n_per_class: usize, seed: u64) -> Result<Self> {
        let classes = labels.iter().max().map_or(0, |&m| m + 1);
        let mut rng = Stream::from_seed(seed);
        let mut train = Vec::with_capacity(classes * n_per_class);
        let mut rest = Vec::new();
        for c in 0..classes {
            let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
            if members.len() <= n_per_class {
                return Err(Error::config(format!(
                    "class {c} has {} nodes, need more than {n_per_class}",
                    members.len()
                )));
            }
            members.shuffle(&mut rng);
            train.extend_from_slice(&members[..n_per_class]);
            rest.extend_from_slice(&members[n_per_class..]);
        }
        rest.shuffle(&mut rng);
        let test = rest.split_off(rest.len() / 2);
        train.sort_unstable();
        Ok(Self {
            train,
            val: rest,
            test,
            seed,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { epochs: 200, lr: 0.01 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub macro_f1: f64,
    pub micro_f1: f64,
    pub auc: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusteringMetrics {
    pub nmi: f64,
    pub ari: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub macro_f1: Option<f64>,
    pub micro_f1: Option<f64>,
    pub auc: Option<f64>,
    pub nmi: Option<f64>,
    pub ari: Option<f64>,
}

impl Metrics {
    pub fn new(classification: Option<ClassificationMetrics>, clustering: Option<ClusteringMetrics>) -> Self {
        Self {
            macro_f1: classification.map(|c| c.macro_f1),
            micro_f1: classification.map(|c| c.micro_f1),
            auc: classification.map(|c| c.auc),
            nmi: clustering.map(|c| c.nmi),
            ari: clustering.map(|c| c.ari),
        }
    }
}

fn rows(h: &Matrix, idx: &[usize]) -> Matrix {
    Array2::from_shape_fn((idx.len(), h.ncols()), |(r, c)| h[[idx[r], c]])
}

fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

fn argmax_rows(scores: &Matrix) -> Vec<usize> {
    scores
        .rows()
        .into_iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

/// Fraction of matching predictions.
pub fn micro_f1(truth: &[usize], pred: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    truth.iter().zip(pred).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64
}

/// Unweighted mean of per-class F1 over `classes` classes; a class with no
/// true and no predicted members scores 0.
pub fn macro_f1(truth: &[usize], pred: &[usize], classes: usize) -> f64 {
    let mut total = 0.0;
    for c in 0..classes {
        let tp = truth.iter().zip(pred).filter(|&(&t, &p)| t == c && p == c).count() as f64;
        let fp = truth.iter().zip(pred).filter(|&(&t, &p)| t != c && p == c).count() as f64;
        let fn_ = truth.iter().zip(pred).filter(|&(&t, &p)| t == c && p != c).count() as f64;
        let denom = 2.0 * tp + fp + fn_;
        if denom > 0.0 {
            total += 2.0 * tp / denom;
        }
    }
    total / classes as f64
}

/// Area under the ROC curve from scores, counting ties as one half.
/// `None` when either class is empty.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    let n_pos = positive.iter().filter(|&&p| p).count() as f64;
    let n_neg = positive.len() as f64 - n_pos;
    if n_pos == 0.0 || n_neg == 0.0 {
        return None;
    }
    let rank_sum: f64 = ranks.iter().zip(positive).filter(|(_, &p)| p).map(|(r, _)| r).sum();
    Some((rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg))
}

/// One-vs-rest AUC averaged over classes that have both positives and
/// negatives in `truth`.
pub fn ovr_auc(probs: &Matrix, truth: &[usize]) -> f64 {
    let aucs: Vec<f64> = (0..probs.ncols())
        .filter_map(|c| {
            let scores: Vec<f64> = probs.column(c).to_vec();
            let positive: Vec<bool> = truth.iter().map(|&t| t == c).collect();
            binary_auc(&scores, &positive)
        })
        .collect();
    if aucs.is_empty() {
        0.0
    } else {
        aucs.iter().sum::<f64>() / aucs.len() as f64
    }
}

/// Softmax regression on frozen embeddings. The epoch with the best
/// validation micro-F1 (earliest on ties) is scored on the test nodes.
pub fn linear_probe(h: &Matrix, labels: &[usize], split: &Split, config: &ProbeConfig) -> Result<ClassificationMetrics> {
    if h.nrows() != labels.len() {
        return Err(Error::shape("linear_probe", format!("{} rows, {} labels", h.nrows(), labels.len())));
    }
    let classes = labels.iter().max().map_or(0, |&m| m + 1);
    for c in 0..classes {
        if !split.train.iter().any(|&i| labels[i] == c) {
            return Err(Error::config(format!("class {c} absent from the training split")));
        }
    }
    let x_train = rows(h, &split.train);
    let onehot = Array2::from_shape_fn((split.train.len(), classes), |(r, c)| {
        if labels[split.train[r]] == c {
            1.0
        } else {
            0.0
        }
    });
    let x_val = rows(h, &split.val);
    let y_val: Vec<usize> = split.val.iter().map(|&i| labels[i]).collect();

    let mut weight = Array2::zeros((h.ncols(), classes));
    let mut bias = Array2::zeros((1, classes));
    let mut adam = Adam::new(config.lr);
    let mut best = (f64::NEG_INFINITY, weight.clone(), bias.clone());
    let predict = |w: &Matrix, b: &Matrix, x: &Matrix| x.dot(w) + b;
    for _ in 0..config.epochs {
        let tape = Tape::new();
        let (w, b) = (tape.param(weight.clone()), tape.param(bias.clone()));
        let probs = tape.row_softmax(tape.add_row(tape.matmul(tape.constant(x_train.clone()), w), b));
        let picked = tape.mul(tape.log(probs), tape.constant(onehot.clone()));
        let loss = tape.scale(tape.sum(picked), -1.0 / split.train.len() as f64);
        let grads = tape.backward(loss)?;
        let g = [grads.wrt(w), grads.wrt(b)];
        adam.step(&mut [&mut weight, &mut bias], &g)?;

        let score = micro_f1(&y_val, &argmax_rows(&predict(&weight, &bias, &x_val)));
        if score > best.0 {
            best = (score, weight.clone(), bias.clone());
        }
    }
    if config.epochs == 0 || split.val.is_empty() {
        best = (0.0, weight, bias);
    }
    let (_, w, b) = best;
    let x_test = rows(h, &split.test);
    let y_test: Vec<usize> = split.test.iter().map(|&i| labels[i]).collect();
    let probs = softmax_rows(&predict(&w, &b, &x_test));
    let pred = argmax_rows(&probs);
    Ok(ClassificationMetrics {
        macro_f1: macro_f1(&y_test, &pred, classes),
        micro_f1: micro_f1(&y_test, &pred),
        auc: ovr_auc(&probs, &y_test),
    })
}

/// One k-means run.
#[derive(Clone, Debug, PartialEq)]
pub struct KMeansRun {
    pub assignment: Vec<usize>,
    pub centers: Matrix,
    /// Inertia after each assignment step.
    pub inertia: Vec<f64>,
}

fn sq_dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(x: ndarray::ArrayView1<f64>, centers: &Matrix) -> (usize, f64) {
    centers
        .rows()
        .into_iter()
        .enumerate()
        .map(|(c, row)| (c, sq_dist(x, row)))
        .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
}

fn plus_plus(x: ArrayView2<f64>, k: usize, rng: &mut Stream) -> Matrix {
    let n = x.nrows();
    let mut centers = Array2::zeros((k, x.ncols()));
    centers.row_mut(0).assign(&x.row(rng.gen_range(0..n)));
    let mut d2: Array1<f64> = x.rows().into_iter().map(|r| sq_dist(r, centers.row(0))).collect();
    for c in 1..k {
        let total = d2.sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            0
        };
        centers.row_mut(c).assign(&x.row(pick));
        for (i, r) in x.rows().into_iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(r, centers.row(c)));
        }
    }
    centers
}

/// Lloyd iterations from k-means++ seeds. Empty clusters keep their center.
pub fn kmeans(x: &Matrix, k: usize, max_iter: usize, rng: &mut Stream) -> KMeansRun {
    assert!(k >= 1 && k <= x.nrows(), "k = {k} for {} points", x.nrows());
    let mut centers = plus_plus(x.view(), k, rng);
    let mut assignment = vec![usize::MAX; x.nrows()];
    let mut inertia = Vec::new();
    for _ in 0..max_iter {
        let mut changed = false;
        let mut total = 0.0;
        for (i, r) in x.rows().into_iter().enumerate() {
            let (c, d) = nearest(r, &centers);
            total += d;
            if assignment[i] != c {
                assignment[i] = c;
                changed = true;
            }
        }
        inertia.push(total);
        if !changed {
            break;
        }
        let mut sums = Array2::<f64>::zeros(centers.dim());
        let mut counts = vec![0usize; k];
        for (i, r) in x.rows().into_iter().enumerate() {
            sums.row_mut(assignment[i]).scaled_add(1.0, &r);
            counts[assignment[i]] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers.row_mut(c).assign(&(&sums.row(c) / counts[c] as f64));
            }
        }
    }
    KMeansRun {
        assignment,
        centers,
        inertia,
    }
}

fn contingency(a: &[usize], b: &[usize]) -> (BTreeMap<(usize, usize), f64>, BTreeMap<usize, f64>, BTreeMap<usize, f64>) {
    let mut joint = BTreeMap::new();
    let mut ma = BTreeMap::new();
    let mut mb = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_insert(0.0) += 1.0;
        *ma.entry(x).or_insert(0.0) += 1.0;
        *mb.entry(y).or_insert(0.0) += 1.0;
    }
    (joint, ma, mb)
}

/// Mutual information normalized by the arithmetic mean of the entropies.
/// Two single-cluster labelings score 1.
pub fn nmi(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings differ in length");
    let n = a.len() as f64;
    let (joint, ma, mb) = contingency(a, b);
    let entropy = |m: &BTreeMap<usize, f64>| -m.values().map(|&c| c / n * (c / n).ln()).sum::<f64>();
    let (ha, hb) = (entropy(&ma), entropy(&mb));
    if ha + hb == 0.0 {
        return 1.0;
    }
    let mi: f64 = joint.iter().map(|(&(x, y), &c)| c / n * (c * n / (ma[&x] * mb[&y])).ln()).sum();
    (2.0 * mi / (ha + hb)).clamp(0.0, 1.0)
}

/// Adjusted Rand index.
pub fn ari(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings differ in length");
    let pairs = |c: f64| c * (c - 1.0) / 2.0;
    let (joint, ma, mb) = contingency(a, b);
    let index: f64 = joint.values().map(|&c| pairs(c)).sum();
    let sa: f64 = ma.values().map(|&c| pairs(c)).sum();
    let sb: f64 = mb.values().map(|&c| pairs(c)).sum();
    let expected = sa * sb / pairs(a.len() as f64);
    let max = (sa + sb) / 2.0;
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub restarts: usize,
    pub max_iter: usize,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            restarts: 10,
            max_iter: 300,
        }
    }
}

/// Best of `restarts` k-means runs by final inertia, scored against labels.
pub fn kmeans_cluster(
    h: &Matrix,
    classes: usize,
    labels: &[usize],
    config: &KMeansConfig,
    seed: u64,
) -> Result<ClusteringMetrics> {
    if classes < 2 {
        return Err(Error::config("clustering needs at least two clusters"));
    }
    if h.nrows() != labels.len() || h.nrows() < classes {
        return Err(Error::shape(
            "kmeans_cluster",
            format!("{} rows, {} labels, {classes} clusters", h.nrows(), labels.len()),
        ));
    }
    let mut rng = Stream::from_seed(seed);
    let best = (0..config.restarts.max(1))
        .map(|_| kmeans(h, classes, config.max_iter, &mut rng))
        .min_by(|a, b| a.inertia.last().unwrap().total_cmp(b.inertia.last().unwrap()))
        .expect("at least one restart");
    Ok(ClusteringMetrics {
        nmi: nmi(&best.assignment, labels),
        ari: ari(&best.assignment, labels),
    })
}
