use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::Serialize;

use super::dataset::{create_dir, load_dataset, write_matrix};
use super::synth::synth_generate;
use super::{DataSource, RunConfig};
use crate::augment::{augment_view, AugmentedView, Strategy};
use crate::diffmath::{Adam, Matrix, Tape};
use crate::encoder::{encode, encode_values, project_features, EncoderParams};
use crate::error::{Error, Result};
use crate::eval::{kmeans_cluster, linear_probe, Metrics, Split};
use crate::graph::{build_topk_similarity, compose_all, mhr, strength_indicator, HeteroGraph, MetapathSpec};
use crate::objective::{pretrain_loss, select_positives, theorem1_check, TheoremCheck, Variant};
use crate::rng::StreamKey;
use crate::selfexpr::{
    coefficient_scale, network_coefficients, self_expression_inputs, self_expression_loss, self_expression_values,
    self_expressive_view, solve_closed_form, BoundNetwork, SelfExprNetworkParams, SelfExpressiveMatrix, Solver,
};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub check: TheoremCheck,
    pub beta: Vec<f64>,
    /// Mean MHR over the metapaths of each augmented view.
    pub view_mhr: [f64; 2],
}

#[derive(Clone, Debug)]
pub struct TrainRun {
    pub config: RunConfig,
    pub trace: Vec<EpochRecord>,
    pub params: EncoderParams,
    pub embeddings: Matrix,
    /// Coefficients of the final encoder, when the model uses them.
    pub coefficients: Option<SelfExpressiveMatrix>,
    pub metrics: Metrics,
}

impl TrainRun {
    pub fn theorem_violations(&self) -> usize {
        self.trace.iter().filter(|r| !r.check.holds).count()
    }
}

/// Loads or generates the graph and resolves the metapaths.
pub fn prepare(config: &RunConfig) -> Result<(HeteroGraph, Vec<MetapathSpec>)> {
    let (graph, mut specs) = match &config.data {
        DataSource::Path(dir) => {
            let ds = load_dataset(dir)?;
            (ds.graph, ds.metapaths)
        }
        DataSource::Synthetic(spec) => (synth_generate(spec)?, spec.metapaths()),
    };
    if !config.metapaths.is_empty() {
        specs = config.metapaths.clone();
    }
    if specs.is_empty() {
        return Err(Error::config("no metapaths configured"));
    }
    Ok((graph, specs))
}

fn mean_mhr(view: &AugmentedView, labels: Option<&[usize]>) -> f64 {
    let Some(labels) = labels else { return f64::NAN };
    let values: Vec<f64> = view.subgraphs.iter().filter_map(|s| mhr(s, labels).ok()).collect();
    if values.is_empty() {
        f64::NAN
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

struct Priors {
    strength: Matrix,
    topk: Matrix,
}

fn closed_form(
    view: &AugmentedView,
    params: &EncoderParams,
    priors: &Priors,
    config: &RunConfig,
) -> Result<SelfExpressiveMatrix> {
    let clean = encode_values(view, params)?;
    let c = &config.self_expr;
    let per_metapath = self_expression_values(&clean.per_metapath, c);
    let raw = solve_closed_form(
        &per_metapath,
        &clean.beta,
        &priors.strength,
        &priors.topk,
        c.alpha,
        c.lambda1,
        c.lambda2,
    )
    .map_err(|e| match e {
        Error::Numerical(msg) => Error::Numerical(format!("closed-form solver: {msg}")),
        other => other,
    })?;
    Ok(SelfExpressiveMatrix::derive(raw, c))
}

fn network_values(
    view: &AugmentedView,
    params: &EncoderParams,
    net: &SelfExprNetworkParams,
    config: &RunConfig,
) -> Result<SelfExpressiveMatrix> {
    let tape = Tape::new();
    let enc = params.bind(&tape);
    let clean = encode(&tape, view, params, &enc, None)?;
    let beta: Vec<f64> = tape.value(clean.beta).iter().copied().collect();
    let inputs = self_expression_inputs(&tape, &clean.per_metapath, &config.self_expr);
    let scale = coefficient_scale(&config.self_expr, view.features.nrows());
    let (_, s) = network_coefficients(&tape, &inputs, &beta, &net.bind(&tape), scale, config.self_expr.unit_codes);
    let raw = (*tape.value(s)).clone();
    check_finite(&raw, "network")?;
    Ok(SelfExpressiveMatrix::derive(raw, &config.self_expr))
}

fn check_finite(m: &Matrix, solver: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical(format!("{solver} solver produced non-finite coefficients")))
    }
}

/// Pretrains the encoder on `graph` and evaluates the resulting embeddings.
pub fn train(config: &RunConfig, graph: &HeteroGraph, specs: &[MetapathSpec]) -> Result<TrainRun> {
    config.validate()?;
    for spec in specs {
        spec.validate(graph)?;
    }
    let key = StreamKey::new(config.seed);
    let n = graph.num_targets();
    let base = compose_all(graph, specs)?;
    let clean = AugmentedView::identity(base.clone(), graph.features().clone());
    let positives = select_positives(&base, config.contrast.k_pos, config.contrast.min_strength)?;
    let components = config.components;
    let use_s = components.needs_self_expression();
    let solver = config.self_expr.solver;

    let mut params = EncoderParams::init(graph.features().ncols(), &config.encoder, &mut key.derive(0).stream())?;
    let mut network = (use_s && solver == Solver::Network).then(|| {
        let dim = config.self_expr.network_dim.unwrap_or(params.dim());
        SelfExprNetworkParams::init(specs.len(), params.dim(), dim, config.self_expr.phi_init, &mut key.derive(1).stream())
    });
    let priors = if use_s && (solver == Solver::ClosedForm || config.self_expr.lambda1 + config.self_expr.lambda2 > 0.0) {
        Priors {
            strength: strength_indicator(&base, config.self_expr.delta)?,
            topk: build_topk_similarity(graph.features(), config.self_expr.top_k.min(n.saturating_sub(1)).max(1))?,
        }
    } else {
        Priors {
            strength: Array2::zeros((n, n)),
            topk: Array2::zeros((n, n)),
        }
    };
    let views = config.views.clone().map(|mut v| {
        if !components.hga {
            v.strategy = Strategy::MpRandom;
        }
        v
    });
    let zero_mask = Array2::zeros((n, n));

    let mut adam = Adam::new(config.lr);
    let mut trace = Vec::with_capacity(config.epochs);
    let mut cached: Option<SelfExpressiveMatrix> = None;
    for epoch in 0..config.epochs {
        let epoch_key = key.derive(100 + epoch as u64);
        let tape = Tape::new();
        let enc = params.bind(&tape);
        let bound_net = network.as_ref().map(|p| p.bind(&tape));

        let drawn = [
            augment_view(graph, specs, &base, &views[0], epoch as u64)?,
            augment_view(graph, specs, &base, &views[1], epoch as u64)?,
        ];
        let h1 = encode(&tape, &drawn[0], &params, &enc, Some(&mut epoch_key.derive(0).stream()))?;
        let h2 = encode(&tape, &drawn[1], &params, &enc, Some(&mut epoch_key.derive(1).stream()))?;

        let mut self_expr = None;
        let coefficients = if !use_s {
            None
        } else if let Some(net) = &bound_net {
            let clean_enc = encode(&tape, &clean, &params, &enc, None)?;
            let beta: Vec<f64> = tape.value(clean_enc.beta).iter().copied().collect();
            let inputs = self_expression_inputs(&tape, &clean_enc.per_metapath, &config.self_expr);
            let scale = coefficient_scale(&config.self_expr, n);
            let (per_view, s) = network_coefficients(&tape, &inputs, &beta, net, scale, config.self_expr.unit_codes);
            let loss = self_expression_loss(
                &tape,
                &inputs,
                &per_view,
                s,
                &beta,
                &priors.strength,
                &priors.topk,
                &config.self_expr,
            );
            self_expr = Some((loss, config.self_expr.mu));
            let raw = (*tape.value(s)).clone();
            check_finite(&raw, "network")?;
            Some(SelfExpressiveMatrix::derive(raw, &config.self_expr))
        } else {
            if cached.is_none() || epoch % config.self_expr.recompute_stride == 0 {
                cached = Some(closed_form(&clean, &params, &priors, config)?);
            }
            cached.clone()
        };

        let fn_mask = match (&coefficients, components.fnf) {
            (Some(c), true) => &c.fn_mask,
            _ => &zero_mask,
        };
        let self_view = match (&coefficients, components.sev) {
            (Some(c), true) => {
                let projected = project_features(&tape, tape.constant(graph.features().clone()), &enc);
                Some(self_expressive_view(&tape, &c.purified, projected))
            }
            _ => None,
        };
        let variant = if self_expr.is_some() { Variant::HgmsN } else { Variant::HgmsC };
        let loss = pretrain_loss(
            &tape,
            h1.fused,
            h2.fused,
            self_view,
            fn_mask,
            &positives,
            &config.contrast,
            variant,
            self_expr,
        )?;
        let loss_value = tape.scalar_value(loss);
        if !loss_value.is_finite() {
            return Err(Error::Numerical(format!("epoch {epoch}: loss {loss_value}")));
        }
        let check = theorem1_check(&tape.value(h1.fused), &tape.value(h2.fused), fn_mask, &positives, &config.contrast);
        let beta: Vec<f64> = tape.value(h1.beta).iter().copied().collect();

        let enc_vars = enc.vars();
        let net_vars = bound_net.as_ref().map(BoundNetwork::vars).unwrap_or_default();
        let grads = tape.backward(loss)?;
        let g: Vec<Matrix> = enc_vars.iter().chain(&net_vars).map(|&v| grads.wrt(v)).collect();
        if g.iter().any(|m| m.iter().any(|v| !v.is_finite())) {
            return Err(Error::Numerical(format!("epoch {epoch}: non-finite gradient, loss {loss_value}")));
        }
        let mut tensors = params.tensors_mut();
        if let Some(net) = network.as_mut() {
            tensors.extend(net.tensors_mut());
        }
        adam.step(&mut tensors, &g)?;

        trace.push(EpochRecord {
            epoch,
            loss: loss_value,
            check,
            beta,
            view_mhr: [mean_mhr(&drawn[0], graph.labels()), mean_mhr(&drawn[1], graph.labels())],
        });
    }

    let embeddings = encode_values(&clean, &params)?.fused;
    let coefficients = match (&network, use_s) {
        (Some(net), true) => Some(network_values(&clean, &params, net, config)?),
        (None, true) => Some(closed_form(&clean, &params, &priors, config)?),
        _ => None,
    };
    let metrics = evaluate(&embeddings, graph, config)?;
    Ok(TrainRun {
        config: config.clone(),
        trace,
        params,
        embeddings,
        coefficients,
        metrics,
    })
}

/// Clustering and linear-probe scores of `embeddings`; empty without labels.
pub fn evaluate(embeddings: &Matrix, graph: &HeteroGraph, config: &RunConfig) -> Result<Metrics> {
    let (Some(labels), Some(classes)) = (graph.labels(), graph.num_classes()) else {
        return Ok(Metrics::default());
    };
    let clustering = kmeans_cluster(embeddings, classes, labels, &config.eval.kmeans, config.seed)?;
    let split = Split::stratified(labels, config.eval.n_per_class, config.seed)?;
    let classification = linear_probe(embeddings, labels, &split, &config.eval.probe)?;
    Ok(Metrics::new(Some(classification), Some(clustering)))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn trace_tsv(trace: &[EpochRecord]) -> String {
    let mut out = String::from("epoch\tloss\tbaseline\ttailored\tgap\tholds\tbeta\tmhr_view1\tmhr_view2\n");
    for r in trace {
        let beta: Vec<String> = r.beta.iter().map(|b| format!("{b:.6}")).collect();
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.epoch,
            r.loss,
            r.check.baseline,
            r.check.tailored,
            r.check.gap(),
            r.check.holds,
            beta.join(","),
            r.view_mhr[0],
            r.view_mhr[1]
        )
        .expect("write to string");
    }
    out
}

#[derive(Serialize)]
struct MetricsRecord<'a> {
    config_hash: String,
    seed: u64,
    variant: Variant,
    components: &'a str,
    theorem_violations: usize,
    #[serde(flatten)]
    metrics: Metrics,
}

impl TrainRun {
    /// Writes `run.json`, `trace.tsv`, `metrics.json`, `embeddings.tsv`,
    /// and `S.tsv` when coefficients exist.
    pub fn write(&self, out: &Path) -> Result<()> {
        create_dir(out)?;
        write_text(&out.join("run.json"), &self.config.to_json()?)?;
        write_text(&out.join("trace.tsv"), &trace_tsv(&self.trace))?;
        let record = MetricsRecord {
            config_hash: self.config.hash(),
            seed: self.config.seed,
            variant: self.config.variant,
            components: self.config.components.label(),
            theorem_violations: self.theorem_violations(),
            metrics: self.metrics,
        };
        write_text(&out.join("metrics.json"), &serde_json::to_string_pretty(&record)?)?;
        write_matrix(&out.join("embeddings.tsv"), &self.embeddings)?;
        if let Some(c) = &self.coefficients {
            write_matrix(&out.join("S.tsv"), &c.processed)?;
        }
        Ok(())
    }
}

/// [`prepare`], [`train`], and optionally write the outputs.
pub fn run(config: &RunConfig, out: Option<&Path>) -> Result<TrainRun> {
    let (graph, specs) = prepare(config)?;
    let result = train(config, &graph, &specs)?;
    if let Some(dir) = out {
        result.write(dir)?;
    }
    Ok(result)
}
