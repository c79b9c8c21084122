//! Experiment drivers shared by the command line and the test suite.

use rand::Rng;
use serde::Serialize;

use super::synth::{synth_generate, SynthRelation, SyntheticSpec};
use super::{train, Components, RunConfig};
use crate::augment::{augment_view, augmentation_mhr_study, topology_attack, AugmentConfig, AugmentedView, Strategy};
use crate::diffmath::{check_gradients, standard_normal, Matrix, Tape, Var};
use crate::encoder::{encode, project_features, BoundEncoder, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::graph::{build_topk_similarity, compose_all, mhr, strength_indicator, HeteroGraph, MetapathSpec};
use crate::objective::{contrastive_loss_s, pretrain_loss, select_positives, theorem1_check, ContrastConfig, PositiveSets, Variant};
use crate::rng::StreamKey;
use crate::selfexpr::{
    coefficient_scale, network_coefficients, self_expression_inputs, self_expression_loss, self_expressive_view,
    BoundNetwork, SelfExprConfig, SelfExprNetworkParams, SelfExpressiveMatrix,
};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MhrRow {
    pub metapath: String,
    pub edges: usize,
    /// `None` for an edgeless subgraph.
    pub mhr: Option<f64>,
}

pub fn mhr_table(graph: &HeteroGraph, specs: &[MetapathSpec]) -> Result<Vec<MhrRow>> {
    let labels = graph.labels().ok_or_else(|| Error::config("MHR needs labels"))?;
    compose_all(graph, specs)?
        .iter()
        .map(|sub| {
            Ok(MhrRow {
                metapath: sub.spec.name.clone(),
                edges: sub.num_edges(),
                mhr: match mhr(sub, labels) {
                    Ok(v) => Some(v),
                    Err(Error::Undefined(_)) => None,
                    Err(e) => return Err(e),
                },
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AugmentRow {
    pub metapath: String,
    pub strategy: Strategy,
    pub ratio: f64,
    pub base_mhr: f64,
    pub mean_mhr: f64,
    pub std_mhr: f64,
    pub skipped: usize,
}

/// Mean MHR of augmented subgraphs per metapath, strategy, and drop ratio.
pub fn augment_study(
    graph: &HeteroGraph,
    specs: &[MetapathSpec],
    strategies: &[Strategy],
    ratios: &[f64],
    trials: usize,
    seed: u64,
) -> Result<Vec<AugmentRow>> {
    let labels = graph.labels().ok_or_else(|| Error::config("augment study needs labels"))?;
    let mut rows = Vec::new();
    for spec in specs {
        for &strategy in strategies {
            for &ratio in ratios {
                let config = AugmentConfig {
                    strategy,
                    drop_ratio: ratio,
                    feature_drop_ratio: 0.0,
                    seed,
                };
                let study = augmentation_mhr_study(graph, spec, labels, &config, trials)?;
                rows.push(AugmentRow {
                    metapath: spec.name.clone(),
                    strategy,
                    ratio,
                    base_mhr: study.base_mhr,
                    mean_mhr: study.mean,
                    std_mhr: study.std,
                    skipped: study.skipped,
                });
            }
        }
    }
    Ok(rows)
}

/// Tolerance on the largest relative gradient error.
pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckEntry {
    pub loss: String,
    pub max_rel_error: f64,
    pub entries_checked: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckSuite {
    pub nodes: usize,
    pub tolerance: f64,
    pub entries: Vec<GradCheckEntry>,
    pub passed: bool,
}

struct GradFixture {
    views: [AugmentedView; 2],
    clean: AugmentedView,
    features: Matrix,
    encoder: EncoderParams,
    network: SelfExprNetworkParams,
    self_expr: SelfExprConfig,
    contrast: ContrastConfig,
    positives: PositiveSets,
    coefficients: SelfExpressiveMatrix,
    /// Attention weights at the starting point; detached like in training.
    beta: Vec<f64>,
    strength: Matrix,
    topk: Matrix,
}

impl GradFixture {
    fn new(nodes: usize, seed: u64) -> Result<Self> {
        let spec = SyntheticSpec {
            targets: nodes,
            relations: vec![
                SynthRelation {
                    name: "PA".into(),
                    node_type: "A".into(),
                    count: 12,
                    q_in: 0.4,
                    q_out: 0.05,
                },
                SynthRelation {
                    name: "PS".into(),
                    node_type: "S".into(),
                    count: 4,
                    q_in: 0.6,
                    q_out: 0.2,
                },
            ],
            feature_dim: 6,
            seed,
            ..SyntheticSpec::default()
        };
        let graph = synth_generate(&spec)?;
        let specs = spec.metapaths();
        let base = compose_all(&graph, &specs)?;
        let key = StreamKey::new(seed);
        let encoder_config = EncoderConfig {
            hidden_dim: 5,
            ..EncoderConfig::default()
        };
        let mut encoder = EncoderParams::init(spec.feature_dim, &encoder_config, &mut key.derive(0).stream())?;
        // zero biases put any node with no features and no neighbours at a
        // zero embedding, where row normalization varies on the scale of h
        let mut rng = key.derive(5).stream();
        for bias in encoder.tensors_mut().into_iter().filter(|t| t.nrows() == 1) {
            bias.mapv_inplace(|_| rng.gen_range(-0.1..0.1));
        }
        let network = SelfExprNetworkParams::init(specs.len(), encoder.dim(), 4, 0.05, &mut key.derive(1).stream());
        let view = |v: u64| AugmentConfig {
            strategy: Strategy::HeRandom,
            drop_ratio: 0.3,
            feature_drop_ratio: 0.2,
            seed: key.derive(2 + v).stream().gen(),
        };
        let views = [
            augment_view(&graph, &specs, &base, &view(0), 0)?,
            augment_view(&graph, &specs, &base, &view(1), 0)?,
        ];
        let mut self_expr = SelfExprConfig::network();
        self_expr.alpha = 0.2;
        self_expr.lambda1 = 0.1;
        self_expr.lambda2 = 0.1;
        self_expr.top_k = 3;
        let strength = strength_indicator(&base, self_expr.delta)?;
        let topk = build_topk_similarity(graph.features(), self_expr.top_k)?;
        let clean = AugmentedView::identity(base.clone(), graph.features().clone());

        // coefficients of the starting point act as constants in every loss
        let tape = Tape::new();
        let enc = encoder.bind(&tape);
        let h = encode(&tape, &clean, &encoder, &enc, None)?;
        let beta: Vec<f64> = tape.value(h.beta).iter().copied().collect();
        let inputs = self_expression_inputs(&tape, &h.per_metapath, &self_expr);
        let scale = coefficient_scale(&self_expr, nodes);
        let (_, s) = network_coefficients(&tape, &inputs, &beta, &network.bind(&tape), scale, self_expr.unit_codes);
        let coefficients = SelfExpressiveMatrix::derive((*tape.value(s)).clone(), &self_expr);

        Ok(Self {
            views,
            clean,
            features: graph.features().clone(),
            positives: select_positives(&base, 3, None)?,
            encoder,
            network,
            self_expr,
            contrast: ContrastConfig::default(),
            coefficients,
            beta,
            strength,
            topk,
        })
    }

    fn params(&self) -> Vec<Matrix> {
        self.encoder.tensors().into_iter().chain(self.network.tensors()).cloned().collect()
    }

    fn bind(&self, vars: &[Var]) -> (BoundEncoder, BoundNetwork) {
        let split = self.encoder.tensors().len();
        (BoundEncoder::from_vars(&self.encoder, &vars[..split]), BoundNetwork::from_vars(&vars[split..]))
    }

    fn self_expression(&self, tape: &Tape, enc: &BoundEncoder, net: &BoundNetwork) -> Var {
        let h = encode(tape, &self.clean, &self.encoder, enc, None).expect("fixture encodes");
        let inputs = self_expression_inputs(tape, &h.per_metapath, &self.self_expr);
        let scale = coefficient_scale(&self.self_expr, self.features.nrows());
        let (views, s) = network_coefficients(tape, &inputs, &self.beta, net, scale, self.self_expr.unit_codes);
        self_expression_loss(tape, &inputs, &views, s, &self.beta, &self.strength, &self.topk, &self.self_expr)
    }

    fn contrast_views(&self, tape: &Tape, enc: &BoundEncoder) -> (Var, Var) {
        let h1 = encode(tape, &self.views[0], &self.encoder, enc, None).expect("fixture encodes");
        let h2 = encode(tape, &self.views[1], &self.encoder, enc, None).expect("fixture encodes");
        (h1.fused, h2.fused)
    }
}

/// Finite-difference check of the self-expression, contrastive, and
/// pretraining losses, differentiated through the whole encoder and the
/// self-expressive networks.
pub fn grad_check_suite(nodes: usize, seed: u64) -> Result<GradCheckSuite> {
    let fx = GradFixture::new(nodes, seed)?;
    let params = fx.params();
    let h = 1e-6;
    let self_expression = check_gradients(&params, h, |t, v| {
        let (enc, net) = fx.bind(v);
        fx.self_expression(t, &enc, &net)
    });
    let contrastive = check_gradients(&params, h, |t, v| {
        let (enc, _) = fx.bind(v);
        let (h1, h2) = fx.contrast_views(t, &enc);
        contrastive_loss_s(t, h1, h2, &fx.coefficients.fn_mask, &fx.positives, &fx.contrast)
    });
    let pretraining = check_gradients(&params, h, |t, v| {
        let (enc, net) = fx.bind(v);
        let (h1, h2) = fx.contrast_views(t, &enc);
        let projected = project_features(t, t.constant(fx.features.clone()), &enc);
        let self_view = self_expressive_view(t, &fx.coefficients.purified, projected);
        let se = fx.self_expression(t, &enc, &net);
        pretrain_loss(
            t,
            h1,
            h2,
            Some(self_view),
            &fx.coefficients.fn_mask,
            &fx.positives,
            &fx.contrast,
            Variant::HgmsN,
            Some((se, fx.self_expr.mu)),
        )
        .expect("network variant with its self-expression loss")
    });
    let entries: Vec<GradCheckEntry> = [
        ("self_expression", self_expression),
        ("contrastive", contrastive),
        ("pretraining", pretraining),
    ]
    .into_iter()
    .map(|(loss, r)| GradCheckEntry {
        loss: loss.into(),
        max_rel_error: r.max_rel_error,
        entries_checked: r.entries_checked,
    })
    .collect();
    let passed = entries.iter().all(|e| e.max_rel_error <= GRAD_TOLERANCE);
    Ok(GradCheckSuite {
        nodes,
        tolerance: GRAD_TOLERANCE,
        entries,
        passed,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TheoremDraws {
    pub draws: usize,
    pub clamped: bool,
    pub violations: usize,
    /// Largest `L_s - L` seen; negative when every draw holds strictly.
    pub max_excess: f64,
}

/// Evaluates both losses on random embeddings, masks, and positive sets.
/// Draw `t` uses stream `derive(t)` of `seed`; sizes vary per draw.
pub fn theorem_draws(draws: usize, seed: u64, config: &ContrastConfig) -> Result<TheoremDraws> {
    config.validate()?;
    let key = StreamKey::new(seed);
    let (mut violations, mut max_excess) = (0, f64::NEG_INFINITY);
    for t in 0..draws {
        let mut rng = key.derive(t as u64).stream();
        let n = rng.gen_range(4..=32);
        let d = rng.gen_range(2..=16);
        let u = standard_normal(n, d, &mut rng);
        let v = standard_normal(n, d, &mut rng);
        let mut mask = Matrix::zeros((n, n));
        for i in 0..n {
            for j in i + 1..n {
                let m: f64 = rng.gen();
                mask[[i, j]] = m;
                mask[[j, i]] = m;
            }
        }
        let density: f64 = rng.gen_range(0.0..0.5);
        let sets = (0..n).map(|_| (0..n).filter(|_| rng.gen_bool(density)).collect()).collect();
        let check = theorem1_check(&u, &v, &mask, &PositiveSets::from_sets(sets)?, config);
        violations += usize::from(!check.holds);
        max_excess = max_excess.max(check.tailored - check.baseline);
    }
    Ok(TheoremDraws {
        draws,
        clamped: config.clamp_sim_nonneg,
        violations,
        max_excess,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttackRow {
    pub components: String,
    pub seed: u64,
    pub ratio: f64,
    pub nmi: f64,
}

/// Trains every component set on randomly rewired copies of `graph` and
/// records the clustering NMI. The rewiring for a `(seed, ratio)` pair is
/// shared by all component sets.
pub fn attack_eval(
    config: &RunConfig,
    graph: &HeteroGraph,
    specs: &[MetapathSpec],
    ratios: &[f64],
    seeds: &[u64],
    variants: &[Components],
) -> Result<Vec<AttackRow>> {
    let mut rows = Vec::new();
    for &seed in seeds {
        for (r, &ratio) in ratios.iter().enumerate() {
            let attacked = if ratio == 0.0 {
                graph.clone()
            } else {
                topology_attack(graph, ratio, &mut StreamKey::new(seed).derive(1000 + r as u64).stream())?
            };
            for &components in variants {
                let run = train(&config.clone().with_seed(seed).with_components(components), &attacked, specs)?;
                let nmi = run.metrics.nmi.ok_or_else(|| Error::config("attack evaluation needs labels"))?;
                rows.push(AttackRow {
                    components: components.label().into(),
                    seed,
                    ratio,
                    nmi,
                });
            }
        }
    }
    Ok(rows)
}

/// Mean over seeds of `NMI(0) - NMI(ratio)` for one component label.
pub fn mean_degradation(rows: &[AttackRow], components: &str, ratio: f64) -> Option<f64> {
    let at = |seed: u64, r: f64| {
        rows.iter()
            .find(|row| row.components == components && row.seed == seed && row.ratio == r)
            .map(|row| row.nmi)
    };
    let mut seeds: Vec<u64> = rows.iter().filter(|r| r.components == components).map(|r| r.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    let drops: Vec<f64> = seeds.iter().filter_map(|&s| Some(at(s, 0.0)? - at(s, ratio)?)).collect();
    (!drops.is_empty()).then(|| drops.iter().sum::<f64>() / drops.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradients_through_the_full_model() {
        let suite = grad_check_suite(12, 1).unwrap();
        assert!(suite.passed, "{suite:?}");
        assert_eq!(suite.entries.len(), 3);
    }

    #[test]
    fn clamped_draws_never_violate() {
        let cfg = ContrastConfig {
            clamp_sim_nonneg: true,
            ..ContrastConfig::default()
        };
        let r = theorem_draws(50, 2, &cfg).unwrap();
        assert_eq!(r.violations, 0, "{r:?}");
        assert!(r.max_excess <= 0.0);
    }

    #[test]
    fn degradation_averages_over_seeds() {
        let row = |seed, ratio, nmi| AttackRow {
            components: "full".into(),
            seed,
            ratio,
            nmi,
        };
        let rows = [row(0, 0.0, 0.8), row(0, 0.1, 0.6), row(1, 0.0, 0.7), row(1, 0.1, 0.6)];
        assert!((mean_degradation(&rows, "full", 0.1).unwrap() - 0.15).abs() < 1e-12);
        assert_eq!(mean_degradation(&rows, "w/o SEV", 0.1), None);
    }
}
