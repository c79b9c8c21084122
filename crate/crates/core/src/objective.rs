//! Positive selection and the contrastive objectives.

use std::rc::Rc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::diffmath::{normalize_rows, ContrastMasks, Matrix, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{total_strength, MetapathSubgraph};

/// Tolerance used when checking `L_s <= L`.
pub const THEOREM_SLACK: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastConfig {
    pub tau: f64,
    pub k_pos: usize,
    /// Clamp cosine similarities at zero before exponentiation.
    #[serde(default)]
    pub clamp_sim_nonneg: bool,
    /// Optional minimum total strength for a positive.
    #[serde(default)]
    pub min_strength: Option<u32>,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            k_pos: 5,
            clamp_sim_nonneg: false,
            min_strength: None,
        }
    }
}

impl ContrastConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::config(format!("tau = {} must be positive", self.tau)));
        }
        if self.k_pos < 1 {
            return Err(Error::config("k_pos must be at least 1"));
        }
        Ok(())
    }
}

/// Per-node positive index sets. Negatives are the complement.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct PositiveSets {
    sets: Vec<Vec<usize>>,
}

impl PositiveSets {
    /// Builds sets from explicit lists; each node is added to its own set.
    pub fn from_sets(mut sets: Vec<Vec<usize>>) -> Result<Self> {
        let n = sets.len();
        for (i, set) in sets.iter_mut().enumerate() {
            if let Some(&j) = set.iter().find(|&&j| j >= n) {
                return Err(Error::shape("PositiveSets", format!("node {i} lists {j} of {n}")));
            }
            set.push(i);
            set.sort_unstable();
            set.dedup();
        }
        Ok(Self { sets })
    }

    /// Every node is its only positive.
    pub fn identity(n: usize) -> Self {
        Self {
            sets: (0..n).map(|i| vec![i]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    pub fn positives(&self, i: usize) -> &[usize] {
        &self.sets[i]
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.sets[i].binary_search(&j).is_ok()
    }

    pub fn negatives(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(move |&j| !self.contains(i, j))
    }

    /// 0/1 matrix with ones at positive pairs.
    pub fn mask(&self) -> Matrix {
        self.bool_mask().mapv(|b| if b { 1.0 } else { 0.0 })
    }

    pub fn bool_mask(&self) -> Array2<bool> {
        let n = self.len();
        let mut m = Array2::from_elem((n, n), false);
        for (i, set) in self.sets.iter().enumerate() {
            for &j in set {
                m[[i, j]] = true;
            }
        }
        m
    }

    /// Relabels nodes so that new node `k` is old node `order[k]`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        let mut inverse = vec![0; order.len()];
        for (k, &old) in order.iter().enumerate() {
            inverse[old] = k;
        }
        let sets = order
            .iter()
            .map(|&old| {
                let mut s: Vec<usize> = self.sets[old].iter().map(|&j| inverse[j]).collect();
                s.sort_unstable();
                s
            })
            .collect();
        Self { sets }
    }
}

/// Top `k_pos` peers by total connection strength across metapaths, ties by
/// ascending index, plus the node itself.
pub fn select_positives(
    subgraphs: &[MetapathSubgraph],
    k_pos: usize,
    min_strength: Option<u32>,
) -> Result<PositiveSets> {
    if k_pos < 1 {
        return Err(Error::config("k_pos must be at least 1"));
    }
    let total = total_strength(subgraphs)?;
    let floor = min_strength.unwrap_or(1).max(1);
    let sets = total
        .outer_iterator()
        .enumerate()
        .map(|(i, row)| {
            let mut peers: Vec<(usize, u32)> =
                row.iter().filter(|&(j, &v)| j != i && v >= floor).map(|(j, &v)| (j, v)).collect();
            peers.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
            let mut set: Vec<usize> = peers.into_iter().take(k_pos).map(|(j, _)| j).collect();
            set.push(i);
            set.sort_unstable();
            set
        })
        .collect();
    Ok(PositiveSets { sets })
}

fn contrast(
    tape: &Tape,
    u: Var,
    v: Var,
    fn_mask: Option<&Matrix>,
    positives: &PositiveSets,
    config: &ContrastConfig,
) -> Var {
    let (n, d) = tape.shape(u);
    assert_eq!(tape.shape(v), (n, d), "contrasted views differ in shape");
    assert_eq!(positives.len(), n, "positive sets cover a different node count");
    if let Some(m) = fn_mask {
        assert_eq!(m.dim(), (n, n), "mask shape");
    }
    let un = tape.row_l2_normalize(u);
    let vn = tape.row_l2_normalize(v);
    let mut sim = tape.matmul(un, tape.transpose(vn));
    if config.clamp_sim_nonneg {
        sim = tape.relu(sim);
    }
    let masks = Rc::new(ContrastMasks {
        positive: positives.bool_mask(),
        damping: fn_mask.map(|m| m.mapv(|v| 1.0 - v)),
    });
    let from_u = tape.info_nce_rows(sim, Rc::clone(&masks), config.tau);
    let from_v = tape.info_nce_rows(tape.transpose(sim), masks, config.tau);
    tape.scale(tape.add(tape.sum(from_u), tape.sum(from_v)), 0.5 / n as f64)
}

/// Contrastive loss whose negative logits are damped by the false-negative
/// mask: `exp(sim * (1 - mask) / tau)`.
pub fn contrastive_loss_s(
    tape: &Tape,
    u: Var,
    v: Var,
    fn_mask: &Matrix,
    positives: &PositiveSets,
    config: &ContrastConfig,
) -> Var {
    contrast(tape, u, v, Some(fn_mask), positives, config)
}

/// Standard two-way InfoNCE over the same positive sets.
pub fn baseline_loss(tape: &Tape, u: Var, v: Var, positives: &PositiveSets, config: &ContrastConfig) -> Var {
    contrast(tape, u, v, None, positives, config)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "HGMS_N")]
    HgmsN,
    #[serde(rename = "HGMS_C")]
    HgmsC,
}

/// Pretraining loss `L_s(H', H'') + L_s(H', H^S)`, plus `mu` times the
/// self-expression loss for the network variant. Passing no `self_view`
/// drops the second contrastive term.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_loss(
    tape: &Tape,
    h1: Var,
    h2: Var,
    self_view: Option<Var>,
    fn_mask: &Matrix,
    positives: &PositiveSets,
    config: &ContrastConfig,
    variant: Variant,
    self_expr: Option<(Var, f64)>,
) -> Result<Var> {
    let mut loss = contrastive_loss_s(tape, h1, h2, fn_mask, positives, config);
    if let Some(hs) = self_view {
        loss = tape.add(loss, contrastive_loss_s(tape, h1, hs, fn_mask, positives, config));
    }
    match (variant, self_expr) {
        (Variant::HgmsN, Some((se, mu))) => Ok(tape.add(loss, tape.scale(se, mu))),
        (Variant::HgmsN, None) => Err(Error::config("HGMS_N needs the self-expression loss")),
        (Variant::HgmsC, _) => Ok(loss),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TheoremCheck {
    pub baseline: f64,
    pub tailored: f64,
    pub holds: bool,
}

impl TheoremCheck {
    pub fn gap(&self) -> f64 {
        self.baseline - self.tailored
    }
}

/// Evaluates both losses on plain matrices and reports whether
/// `L_s <= L + THEOREM_SLACK`.
pub fn theorem1_check(
    u: &Matrix,
    v: &Matrix,
    fn_mask: &Matrix,
    positives: &PositiveSets,
    config: &ContrastConfig,
) -> TheoremCheck {
    let n = u.nrows();
    assert_eq!(u.dim(), v.dim(), "contrasted views differ in shape");
    assert_eq!(positives.len(), n, "positive sets cover a different node count");
    assert_eq!(fn_mask.dim(), (n, n), "mask shape");
    let mut sim = normalize_rows(u).dot(&normalize_rows(v).t());
    if config.clamp_sim_nonneg {
        sim.mapv_inplace(|x| x.max(0.0));
    }
    let sim_t = sim.t().to_owned();
    let mut masks = ContrastMasks {
        positive: positives.bool_mask(),
        damping: None,
    };
    let both_ways = |m: &ContrastMasks| (m.row_losses(&sim, config.tau).sum() + m.row_losses(&sim_t, config.tau).sum()) * (0.5 / n as f64);
    let baseline = both_ways(&masks);
    masks.damping = Some(fn_mask.mapv(|v| 1.0 - v));
    let tailored = both_ways(&masks);
    TheoremCheck {
        baseline,
        tailored,
        holds: tailored <= baseline + THEOREM_SLACK,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::{check_gradients, standard_normal};
    use crate::graph::{MetapathSpec, RelationMatrix};
    use crate::rng::Stream;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    fn loss_value(u: &Matrix, v: &Matrix, mask: Option<&Matrix>, pos: &PositiveSets, cfg: &ContrastConfig) -> f64 {
        let tape = Tape::new();
        let (a, b) = (tape.constant(u.clone()), tape.constant(v.clone()));
        let l = match mask {
            Some(m) => contrastive_loss_s(&tape, a, b, m, pos, cfg),
            None => baseline_loss(&tape, a, b, pos, cfg),
        };
        tape.scalar_value(l)
    }

    // Loop-by-loop evaluation of the masked loss.
    fn direct_loss(u: &Matrix, v: &Matrix, mask: &Matrix, pos: &PositiveSets, tau: f64) -> f64 {
        let n = u.nrows();
        let norm = |m: &Matrix, i: usize| m.row(i).dot(&m.row(i)).sqrt();
        let cos = |a: &Matrix, i: usize, b: &Matrix, j: usize| {
            let d = norm(a, i) * norm(b, j);
            if d == 0.0 {
                0.0
            } else {
                a.row(i).dot(&b.row(j)) / d
            }
        };
        let mut total = 0.0;
        for (a, b) in [(u, v), (v, u)] {
            for i in 0..n {
                let (mut p, mut q) = (0.0, 0.0);
                for j in 0..n {
                    let s = cos(a, i, b, j);
                    if pos.contains(i, j) {
                        p += (s / tau).exp();
                    } else {
                        q += (s * (1.0 - mask[[i, j]]) / tau).exp();
                    }
                }
                total += -(p / (p + q)).ln();
            }
        }
        total / (2 * n) as f64
    }

    fn random_positives(n: usize, rng: &mut Stream) -> PositiveSets {
        PositiveSets::from_sets((0..n).map(|_| (0..n).filter(|_| rng.gen_bool(0.2)).collect()).collect()).unwrap()
    }

    fn chain_graph(strengths: &[(usize, usize, u32)], n: usize) -> Vec<MetapathSubgraph> {
        // one attribute node per unit of strength
        let mut edges = Vec::new();
        let mut a = 0;
        for &(i, j, s) in strengths {
            for _ in 0..s {
                edges.push((i, a));
                edges.push((j, a));
                a += 1;
            }
        }
        let rel = RelationMatrix::from_edges("PA", "P", "A", (n, a.max(1)), &edges).unwrap();
        let g = crate::graph::HeteroGraph::new(
            vec![
                crate::graph::NodeType { name: "P".into(), count: n },
                crate::graph::NodeType { name: "A".into(), count: a.max(1) },
            ],
            vec![rel],
            "P",
            Array2::zeros((n, 1)),
            None,
        )
        .unwrap();
        crate::graph::compose_all(&g, &[MetapathSpec::new("PAP", &["PA", "PA^T"]).unwrap()]).unwrap()
    }

    #[test]
    fn positive_selection_rules() {
        let subs = chain_graph(&[(0, 1, 5), (0, 2, 2), (0, 3, 2)], 5);
        let pos = select_positives(&subs, 2, None).unwrap();
        assert_eq!(pos.positives(0), &[0, 1, 2]);
        assert_eq!(pos.positives(4), &[4]);
        assert_eq!(pos.positives(1), &[0, 1]);
        let strict = select_positives(&subs, 2, Some(3)).unwrap();
        assert_eq!(strict.positives(0), &[0, 1]);
        assert!(select_positives(&subs, 0, None).is_err());
        for i in 0..5 {
            assert!(pos.contains(i, i));
            let negs: Vec<usize> = pos.negatives(i).collect();
            assert_eq!(negs.len() + pos.positives(i).len(), 5);
            assert!(negs.iter().all(|&j| !pos.contains(i, j)));
        }
    }

    #[test]
    fn single_node_has_zero_loss() {
        let u = array![[0.3, -1.0]];
        let pos = PositiveSets::identity(1);
        let cfg = ContrastConfig::default();
        assert_eq!(loss_value(&u, &u, Some(&Array2::zeros((1, 1))), &pos, &cfg), 0.0);
    }

    #[test]
    fn one_positive_one_negative_closed_form() {
        let u = array![[1.0, 0.0], [0.0, 1.0]];
        let pos = PositiveSets::identity(2);
        let cfg = ContrastConfig { tau: 1.0, ..Default::default() };
        let e = std::f64::consts::E;
        let expected = -(e / (e + 1.0)).ln();
        assert!((loss_value(&u, &u, None, &pos, &cfg) - expected).abs() < 1e-12);
    }

    #[test]
    fn full_mask_turns_negatives_into_ones() {
        let mut rng = Stream::from_seed(1);
        let (u, v) = (standard_normal(6, 3, &mut rng), standard_normal(6, 3, &mut rng));
        let pos = random_positives(6, &mut rng);
        let tau = 0.7;
        let cfg = ContrastConfig { tau, ..Default::default() };
        let got = loss_value(&u, &v, Some(&Array2::ones((6, 6))), &pos, &cfg);
        // rows 0..6 are u, rows 6..12 are v
        let un = crate::graph::cosine_similarities(&ndarray::concatenate![ndarray::Axis(0), u, v]);
        let mut total = 0.0;
        for side in 0..2 {
            for i in 0..6 {
                let p: f64 = pos
                    .positives(i)
                    .iter()
                    .map(|&j| {
                        let s = if side == 0 { un[[i, 6 + j]] } else { un[[6 + i, j]] };
                        (s / tau).exp()
                    })
                    .sum();
                let q = pos.negatives(i).count() as f64;
                total += ((p + q) / p).ln();
            }
        }
        assert!((got - total / 12.0).abs() < 1e-10);
    }

    #[test]
    fn matches_loop_oracle_and_zero_mask_baseline() {
        let mut rng = Stream::from_seed(2);
        for _ in 0..10 {
            let (u, v) = (standard_normal(7, 4, &mut rng), standard_normal(7, 4, &mut rng));
            let mask = Array2::from_shape_fn((7, 7), |_| rng.gen::<f64>());
            let pos = random_positives(7, &mut rng);
            let cfg = ContrastConfig { tau: 0.6, ..Default::default() };
            let got = loss_value(&u, &v, Some(&mask), &pos, &cfg);
            assert!((got - direct_loss(&u, &v, &mask, &pos, 0.6)).abs() < 1e-10);
            let zero = Array2::zeros((7, 7));
            assert_eq!(
                loss_value(&u, &v, Some(&zero), &pos, &cfg).to_bits(),
                loss_value(&u, &v, None, &pos, &cfg).to_bits()
            );
        }
    }

    #[test]
    fn zero_rows_are_guarded() {
        let u = array![[0.0, 0.0], [1.0, 2.0]];
        let pos = PositiveSets::identity(2);
        let l = loss_value(&u, &u, Some(&Array2::zeros((2, 2))), &pos, &ContrastConfig::default());
        assert!(l.is_finite());
    }

    #[test]
    fn theorem_holds_in_the_nonnegative_regime() {
        let mut rng = Stream::from_seed(3);
        let cfg = ContrastConfig { clamp_sim_nonneg: true, ..Default::default() };
        for _ in 0..100 {
            let (u, v) = (standard_normal(8, 3, &mut rng), standard_normal(8, 3, &mut rng));
            let mask = Array2::from_shape_fn((8, 8), |_| rng.gen::<f64>());
            let pos = random_positives(8, &mut rng);
            let check = theorem1_check(&u, &v, &mask, &pos, &cfg);
            assert!(check.holds, "{check:?}");
            assert!(check.gap() > 0.0);
        }
        let (u, v) = (standard_normal(8, 3, &mut rng), standard_normal(8, 3, &mut rng));
        let zero = theorem1_check(&u, &v, &Array2::zeros((8, 8)), &PositiveSets::identity(8), &cfg);
        assert_eq!(zero.gap(), 0.0);
    }

    #[test]
    fn check_agrees_with_the_training_losses() {
        let mut rng = Stream::from_seed(6);
        for clamp in [false, true] {
            let cfg = ContrastConfig { clamp_sim_nonneg: clamp, ..Default::default() };
            let (u, v) = (standard_normal(9, 4, &mut rng), standard_normal(9, 4, &mut rng));
            let mask = Array2::from_shape_fn((9, 9), |_| rng.gen::<f64>());
            let pos = random_positives(9, &mut rng);
            let check = theorem1_check(&u, &v, &mask, &pos, &cfg);
            assert_eq!(check.baseline, loss_value(&u, &v, None, &pos, &cfg));
            assert_eq!(check.tailored, loss_value(&u, &v, Some(&mask), &pos, &cfg));
        }
    }

    #[test]
    fn pretrain_variants() {
        let mut rng = Stream::from_seed(4);
        let tape = Tape::new();
        let h1 = tape.constant(standard_normal(5, 3, &mut rng));
        let h2 = tape.constant(standard_normal(5, 3, &mut rng));
        let mask = Array2::from_shape_fn((5, 5), |_| rng.gen::<f64>());
        let pos = random_positives(5, &mut rng);
        let cfg = ContrastConfig::default();
        let se = tape.scalar(3.0);

        let c = pretrain_loss(&tape, h1, h2, Some(h2), &mask, &pos, &cfg, Variant::HgmsC, None).unwrap();
        let single = contrastive_loss_s(&tape, h1, h2, &mask, &pos, &cfg);
        assert!((tape.scalar_value(c) - 2.0 * tape.scalar_value(single)).abs() < 1e-12);

        let n0 = pretrain_loss(&tape, h1, h2, Some(h2), &mask, &pos, &cfg, Variant::HgmsN, Some((se, 0.0))).unwrap();
        assert_eq!(tape.scalar_value(n0), tape.scalar_value(c));
        let n1 = pretrain_loss(&tape, h1, h2, Some(h2), &mask, &pos, &cfg, Variant::HgmsN, Some((se, 0.5))).unwrap();
        assert!((tape.scalar_value(n1) - tape.scalar_value(c) - 1.5).abs() < 1e-12);
        assert!(pretrain_loss(&tape, h1, h2, None, &mask, &pos, &cfg, Variant::HgmsN, None).is_err());
    }

    #[test]
    fn contrastive_gradient_matches_finite_differences() {
        let mut rng = Stream::from_seed(5);
        let params = vec![standard_normal(6, 3, &mut rng), standard_normal(6, 3, &mut rng)];
        let mask = Array2::from_shape_fn((6, 6), |_| rng.gen::<f64>());
        let pos = random_positives(6, &mut rng);
        let cfg = ContrastConfig { tau: 0.5, ..Default::default() };
        let rep = check_gradients(&params, 1e-6, |t, v| contrastive_loss_s(t, v[0], v[1], &mask, &pos, &cfg));
        assert!(rep.max_rel_error <= 1e-5, "{rep:?}");
    }

    proptest! {
        #[test]
        fn loss_is_nonnegative_and_permutation_invariant(seed in 0u64..500, shift in 1usize..6) {
            let mut rng = Stream::from_seed(seed);
            let n = 6;
            let (u, v) = (standard_normal(n, 3, &mut rng), standard_normal(n, 3, &mut rng));
            let mask = Array2::from_shape_fn((n, n), |_| rng.gen::<f64>());
            let pos = random_positives(n, &mut rng);
            let cfg = ContrastConfig::default();
            let base = loss_value(&u, &v, Some(&mask), &pos, &cfg);
            prop_assert!(base >= 0.0);

            let order: Vec<usize> = (0..n).map(|k| (k * 5 + shift) % n).collect();
            let pu = Array2::from_shape_fn((n, 3), |(k, c)| u[[order[k], c]]);
            let pv = Array2::from_shape_fn((n, 3), |(k, c)| v[[order[k], c]]);
            let pm = Array2::from_shape_fn((n, n), |(a, b)| mask[[order[a], order[b]]]);
            let moved = loss_value(&pu, &pv, Some(&pm), &pos.permuted(&order), &cfg);
            prop_assert!((base - moved).abs() < 1e-12);
        }
    }

    #[test]
    fn config_validation() {
        assert!(ContrastConfig::default().validate().is_ok());
        assert!(ContrastConfig { tau: 0.0, ..Default::default() }.validate().is_err());
        assert!(ContrastConfig { k_pos: 0, ..Default::default() }.validate().is_err());
    }
}
