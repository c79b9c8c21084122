//! Planted-partition heterogeneous graphs.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{HeteroGraph, MetapathSpec, NodeType, RelationMatrix};
use crate::rng::StreamKey;

/// One target-to-attribute relation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthRelation {
    pub name: String,
    pub node_type: String,
    pub count: usize,
    /// Edge probability between a target and an attribute of its class.
    pub q_in: f64,
    /// Edge probability across classes.
    pub q_out: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub targets: usize,
    pub target_type: String,
    pub relations: Vec<SynthRelation>,
    /// Class proportions; uniform when absent.
    #[serde(default)]
    pub class_weights: Option<Vec<f64>>,
    pub feature_dim: usize,
    /// Norm of each class mean.
    pub separation: f64,
    /// Standard deviation of the isotropic feature noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 3,
            targets: 600,
            target_type: "P".into(),
            relations: vec![
                SynthRelation {
                    name: "PA".into(),
                    node_type: "A".into(),
                    count: 300,
                    q_in: 0.03,
                    q_out: 0.002,
                },
                SynthRelation {
                    name: "PS".into(),
                    node_type: "S".into(),
                    count: 60,
                    q_in: 0.08,
                    q_out: 0.01,
                },
            ],
            class_weights: None,
            feature_dim: 64,
            separation: 1.5,
            noise: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    /// Denser relations over fewer attribute nodes, so that target pairs
    /// often share several attribute nodes and strength tracks homophily.
    pub fn strength_correlated() -> Self {
        let mut spec = Self::default();
        for (rel, (count, q_in, q_out)) in spec.relations.iter_mut().zip([(100, 0.1, 0.005), (20, 0.3, 0.03)]) {
            rel.count = count;
            rel.q_in = q_in;
            rel.q_out = q_out;
        }
        spec
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.targets < self.classes {
            return Err(Error::config("need at least two classes and one target per class"));
        }
        if self.relations.is_empty() {
            return Err(Error::config("synthetic graph needs at least one relation"));
        }
        for r in &self.relations {
            if !(0.0..=1.0).contains(&r.q_in) || !(0.0..=1.0).contains(&r.q_out) || r.q_in < r.q_out {
                return Err(Error::config(format!(
                    "relation {}: need 0 <= q_out <= q_in <= 1, got {} / {}",
                    r.name, r.q_in, r.q_out
                )));
            }
            if r.count == 0 {
                return Err(Error::config(format!("relation {} has no attribute nodes", r.name)));
            }
        }
        if let Some(w) = &self.class_weights {
            if w.len() != self.classes || w.iter().any(|&v| !(v >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
                return Err(Error::config("class_weights must be nonnegative, one per class"));
            }
        }
        if self.feature_dim == 0 || self.noise < 0.0 || self.separation < 0.0 {
            return Err(Error::config("invalid feature settings"));
        }
        Ok(())
    }

    /// One symmetric metapath per relation, e.g. `PA` gives `PAP`.
    pub fn metapaths(&self) -> Vec<MetapathSpec> {
        self.relations
            .iter()
            .map(|r| {
                let back = format!("{}^T", r.name);
                MetapathSpec::new(format!("{}{}", r.name, &self.target_type), &[r.name.as_str(), back.as_str()])
                    .expect("two-step chain")
            })
            .collect()
    }

    fn class_sizes(&self) -> Vec<usize> {
        let weights = self.class_weights.clone().unwrap_or_else(|| vec![1.0; self.classes]);
        let total: f64 = weights.iter().sum();
        let mut sizes: Vec<usize> =
            weights.iter().map(|w| (w / total * self.targets as f64).floor() as usize).collect();
        let assigned: usize = sizes.iter().sum();
        for k in 0..self.targets - assigned {
            sizes[k % self.classes] += 1;
        }
        sizes
    }
}

/// Draws a labeled graph from `spec`. The same spec always yields the same
/// graph.
pub fn synth_generate(spec: &SyntheticSpec) -> Result<HeteroGraph> {
    spec.validate()?;
    let key = StreamKey::new(spec.seed);
    let n = spec.targets;

    let mut labels: Vec<usize> =
        spec.class_sizes().iter().enumerate().flat_map(|(c, &k)| std::iter::repeat(c).take(k)).collect();
    labels.shuffle(&mut key.derive(0).stream());

    let mut node_types = vec![NodeType {
        name: spec.target_type.clone(),
        count: n,
    }];
    let mut relations = Vec::with_capacity(spec.relations.len());
    for (r, rel) in spec.relations.iter().enumerate() {
        let mut rng = key.derive(1 + r as u64).stream();
        let mut affinity: Vec<usize> = (0..rel.count).map(|a| a % spec.classes).collect();
        affinity.shuffle(&mut rng);
        let mut edges = Vec::new();
        for (i, &c) in labels.iter().enumerate() {
            for (a, &ca) in affinity.iter().enumerate() {
                let q = if c == ca { rel.q_in } else { rel.q_out };
                if rng.gen::<f64>() < q {
                    edges.push((i, a));
                }
            }
        }
        if !node_types.iter().any(|t| t.name == rel.node_type) {
            node_types.push(NodeType {
                name: rel.node_type.clone(),
                count: rel.count,
            });
        }
        relations.push(RelationMatrix::from_edges(
            &rel.name,
            &spec.target_type,
            &rel.node_type,
            (n, rel.count),
            &edges,
        )?);
    }

    let mut rng = key.derive(1000).stream();
    let d = spec.feature_dim;
    let means: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| {
            let g: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            g.into_iter().map(|v| v / norm * spec.separation).collect()
        })
        .collect();
    let mut features = Array2::zeros((n, d));
    for (i, &c) in labels.iter().enumerate() {
        for j in 0..d {
            let eps: f64 = rng.sample(StandardNormal);
            features[[i, j]] = means[c][j] + spec.noise * eps;
        }
    }
    HeteroGraph::new(node_types, relations, &spec.target_type, features, Some(labels))
}
