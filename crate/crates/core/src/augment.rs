//! Graph augmentation: heterogeneous edge dropping, metapath-level edge
//! dropping baselines, feature-row dropping, and random edge rewiring.

use std::collections::HashSet;

use ndarray::Array2;
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sprs::TriMat;

use crate::error::{Error, Result};
use crate::graph::{compose_all, compose_metapath, mhr, HeteroGraph, MetapathSpec, MetapathSubgraph};
use crate::rng::{Stream, StreamKey};

/// Upper bound on any per-edge drop probability under score-weighted dropping.
pub const SCORE_DROP_CAP: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Strategy {
    /// Drop edges of the heterogeneous relations, then recompose metapaths.
    HeRandom,
    /// Drop metapath edges uniformly.
    MpRandom,
    /// Drop metapath edges with probability decreasing in PathSim.
    MpPathsim,
    /// Drop metapath edges with probability decreasing in connection strength.
    MpWeight,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MetapathDropMode {
    Random,
    PathSim,
    Weight,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub strategy: Strategy,
    pub drop_ratio: f64,
    pub feature_drop_ratio: f64,
    pub seed: u64,
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.drop_ratio) {
            return Err(Error::config(format!("drop_ratio {} not in [0, 1)", self.drop_ratio)));
        }
        if !(0.0..1.0).contains(&self.feature_drop_ratio) {
            return Err(Error::config(format!(
                "feature_drop_ratio {} not in [0, 1)",
                self.feature_drop_ratio
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Provenance {
    pub config: Option<AugmentConfig>,
    pub draw: u64,
}

/// Metapath subgraphs and features of one augmented draw.
#[derive(Clone, Debug)]
pub struct AugmentedView {
    pub subgraphs: Vec<MetapathSubgraph>,
    pub features: Array2<f64>,
    pub provenance: Provenance,
}

impl AugmentedView {
    /// The unaugmented graph as a view.
    pub fn identity(subgraphs: Vec<MetapathSubgraph>, features: Array2<f64>) -> Self {
        Self {
            subgraphs,
            features,
            provenance: Provenance { config: None, draw: 0 },
        }
    }
}

fn check_ratio(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::config(format!("drop ratio {p} not in [0, 1)")));
    }
    Ok(())
}

/// Removes every stored relation entry independently with probability `p`.
pub fn thin_relations(graph: &HeteroGraph, p: f64, rng: &mut Stream) -> Result<HeteroGraph> {
    check_ratio(p)?;
    let relations = graph
        .relations()
        .iter()
        .map(|rel| {
            let mut tri = TriMat::new(rel.shape());
            for (i, j, v) in rel.edges() {
                if rng.gen::<f64>() >= p {
                    tri.add_triplet(i, j, v);
                }
            }
            rel.with_entries(tri.to_csr())
        })
        .collect::<Result<Vec<_>>>()?;
    graph.with_relations(relations)
}

/// Heterogeneous edge dropping: thin the relations, recompose every metapath.
pub fn he_drop(
    graph: &HeteroGraph,
    specs: &[MetapathSpec],
    p: f64,
    rng: &mut Stream,
) -> Result<AugmentedView> {
    let thinned = thin_relations(graph, p, rng)?;
    Ok(AugmentedView::identity(compose_all(&thinned, specs)?, graph.features().clone()))
}

/// Probability that a metapath edge of strength `n` built from paths of
/// length `l` survives when each heterogeneous edge is dropped with
/// probability `p`.
pub fn retention_probability(p: f64, n: u32, l: u32) -> f64 {
    let path_fails = 1.0 - (1.0 - p).powi(l as i32);
    1.0 - path_fails.powi(n as i32)
}

fn pathsim(sub: &MetapathSubgraph, i: usize, j: usize, n: u32) -> f64 {
    let denom = sub.self_paths()[i] as f64 + sub.self_paths()[j] as f64;
    if denom > 0.0 {
        2.0 * n as f64 / denom
    } else {
        0.0
    }
}

/// Per-edge drop probabilities from keep scores: `p (s_max - s) / (s_max - s_mean)`,
/// clamped to `[0, SCORE_DROP_CAP]`. Equal scores give uniform `p`.
pub fn score_drop_probabilities(scores: &[f64], p: f64) -> Vec<f64> {
    if scores.is_empty() {
        return Vec::new();
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    let spread = max - mean;
    if spread <= 1e-12 * max.abs().max(1.0) {
        return vec![p; scores.len()];
    }
    scores
        .iter()
        .map(|&s| (p * (max - s) / spread).clamp(0.0, SCORE_DROP_CAP))
        .collect()
}

/// Metapath-level edge dropping on already composed subgraphs.
pub fn mp_drop(
    subgraphs: &[MetapathSubgraph],
    p: f64,
    mode: MetapathDropMode,
    rng: &mut Stream,
) -> Result<Vec<MetapathSubgraph>> {
    check_ratio(p)?;
    Ok(subgraphs
        .iter()
        .map(|sub| {
            let edges = sub.edges();
            let probs = match mode {
                MetapathDropMode::Random => vec![p; edges.len()],
                MetapathDropMode::Weight => {
                    let s: Vec<f64> = edges.iter().map(|e| e.2 as f64).collect();
                    score_drop_probabilities(&s, p)
                }
                MetapathDropMode::PathSim => {
                    let s: Vec<f64> = edges.iter().map(|&(i, j, n)| pathsim(sub, i, j, n)).collect();
                    score_drop_probabilities(&s, p)
                }
            };
            let kept: Vec<_> = edges
                .into_iter()
                .zip(probs)
                .filter_map(|(e, q)| (rng.gen::<f64>() >= q).then_some(e))
                .collect();
            sub.with_edges(&kept)
        })
        .collect())
}

/// Zeroes a uniformly random `floor(q N)` subset of rows.
pub fn node_feature_drop(x: &Array2<f64>, q: f64, rng: &mut Stream) -> Result<Array2<f64>> {
    check_ratio(q)?;
    let n = x.nrows();
    let k = (q * n as f64).floor() as usize;
    let mut out = x.clone();
    for i in index::sample(rng, n, k) {
        out.row_mut(i).fill(0.0);
    }
    Ok(out)
}

/// Draws one augmented view. `base` must be the unaugmented composition of
/// `specs`; metapath-level strategies start from it.
pub fn augment_view(
    graph: &HeteroGraph,
    specs: &[MetapathSpec],
    base: &[MetapathSubgraph],
    config: &AugmentConfig,
    draw: u64,
) -> Result<AugmentedView> {
    config.validate()?;
    let key = StreamKey::new(config.seed).derive(draw);
    let mut structure = key.derive(0).stream();
    let mut features = key.derive(1).stream();
    let subgraphs = match config.strategy {
        Strategy::HeRandom => he_drop(graph, specs, config.drop_ratio, &mut structure)?.subgraphs,
        Strategy::MpRandom => mp_drop(base, config.drop_ratio, MetapathDropMode::Random, &mut structure)?,
        Strategy::MpPathsim => mp_drop(base, config.drop_ratio, MetapathDropMode::PathSim, &mut structure)?,
        Strategy::MpWeight => mp_drop(base, config.drop_ratio, MetapathDropMode::Weight, &mut structure)?,
    };
    Ok(AugmentedView {
        subgraphs,
        features: node_feature_drop(graph.features(), config.feature_drop_ratio, &mut features)?,
        provenance: Provenance {
            config: Some(config.clone()),
            draw,
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MhrStudy {
    pub base_mhr: f64,
    pub mean: f64,
    pub std: f64,
    pub trials: usize,
    /// Trials whose subgraph lost every edge.
    pub skipped: usize,
}

/// Mean and standard deviation of MHR over `trials` augmented draws of one
/// metapath. Trial `t` uses stream `derive(t)` of the config seed, so runs at
/// different ratios share random numbers and their drops are nested.
pub fn augmentation_mhr_study(
    graph: &HeteroGraph,
    spec: &MetapathSpec,
    labels: &[usize],
    config: &AugmentConfig,
    trials: usize,
) -> Result<MhrStudy> {
    config.validate()?;
    let base = compose_metapath(graph, spec)?;
    let base_mhr = mhr(&base, labels)?;
    let key = StreamKey::new(config.seed);
    let mut values = Vec::with_capacity(trials);
    let mut skipped = 0;
    for t in 0..trials {
        let mut rng = key.derive(t as u64).stream();
        let p = config.drop_ratio;
        let sub = match config.strategy {
            Strategy::HeRandom => compose_metapath(&thin_relations(graph, p, &mut rng)?, spec)?,
            Strategy::MpRandom => mp_drop(std::slice::from_ref(&base), p, MetapathDropMode::Random, &mut rng)?.remove(0),
            Strategy::MpPathsim => mp_drop(std::slice::from_ref(&base), p, MetapathDropMode::PathSim, &mut rng)?.remove(0),
            Strategy::MpWeight => mp_drop(std::slice::from_ref(&base), p, MetapathDropMode::Weight, &mut rng)?.remove(0),
        };
        match mhr(&sub, labels) {
            Ok(v) => values.push(v),
            Err(Error::Undefined(_)) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    if values.is_empty() {
        return Err(Error::Undefined("every augmentation trial produced an edgeless subgraph".into()));
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64;
    Ok(MhrStudy {
        base_mhr,
        mean,
        std: var.sqrt(),
        trials: values.len(),
        skipped,
    })
}

/// Random edge rewiring: per relation, `floor(ratio * nnz)` existing edges
/// are replaced by uniformly drawn pairs that were not edges before.
pub fn topology_attack(graph: &HeteroGraph, ratio: f64, rng: &mut Stream) -> Result<HeteroGraph> {
    check_ratio(ratio)?;
    let relations = graph
        .relations()
        .iter()
        .map(|rel| {
            let edges: Vec<(usize, usize, u32)> = rel.edges().collect();
            let k = (ratio * edges.len() as f64).floor() as usize;
            if k == 0 {
                return Ok(rel.clone());
            }
            let (rows, cols) = rel.shape();
            let existing: HashSet<(usize, usize)> = edges.iter().map(|e| (e.0, e.1)).collect();
            let free = rows * cols - existing.len();
            if free < k {
                return Err(Error::config(format!(
                    "relation {} too dense to rewire {k} edges ({free} free slots)",
                    rel.name
                )));
            }
            let removed: HashSet<usize> = index::sample(rng, edges.len(), k).into_iter().collect();
            let mut added: Vec<(usize, usize)> = Vec::with_capacity(k);
            if free >= 2 * k {
                let mut seen = HashSet::with_capacity(k);
                while added.len() < k {
                    let c = (rng.gen_range(0..rows), rng.gen_range(0..cols));
                    if !existing.contains(&c) && seen.insert(c) {
                        added.push(c);
                    }
                }
            } else {
                let slots: Vec<(usize, usize)> = (0..rows)
                    .flat_map(|i| (0..cols).map(move |j| (i, j)))
                    .filter(|c| !existing.contains(c))
                    .collect();
                added.extend(index::sample(rng, slots.len(), k).into_iter().map(|s| slots[s]));
            }
            let mut tri = TriMat::new((rows, cols));
            for (idx, &(i, j, v)) in edges.iter().enumerate() {
                if !removed.contains(&idx) {
                    tri.add_triplet(i, j, v);
                }
            }
            for (i, j) in added {
                tri.add_triplet(i, j, 1u32);
            }
            rel.with_entries(tri.to_csr())
        })
        .collect::<Result<Vec<_>>>()?;
    graph.with_relations(relations)
}
