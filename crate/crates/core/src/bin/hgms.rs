use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hgms::augment::Strategy;
use hgms::error::{Error, Result};
use hgms::graph::{compose_all, mcs_homophily_profile};
use hgms::objective::Variant;
use hgms::pipeline::{
    attack_eval, augment_study, evaluate, grad_check_suite, matrix_tsv, mean_degradation, mhr_table, prepare,
    read_matrix, run, theorem_draws, write_dataset, Components, RunConfig,
};
use ndarray::Axis;

#[derive(Parser)]
#[command(name = "hgms", version, about = "Homophily-aware heterogeneous graph contrastive learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration as JSON; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory. Tables go to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Model variant for the default configuration.
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    N,
    C,
}

#[derive(Subcommand)]
enum Command {
    /// Edge count and homophily ratio of every metapath subgraph.
    AnalyzeMhr(Common),
    /// Homophily ratio per connection-strength bucket.
    McsProfile {
        #[command(flatten)]
        common: Common,
        /// Bucket lower bounds; the last bucket is open.
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        thresholds: Vec<u32>,
    },
    /// Mean homophily ratio of augmented subgraphs per strategy and ratio.
    AugmentStudy {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.3,0.4,0.5,0.6")]
        ratios: Vec<f64>,
        #[arg(long, default_value_t = 100)]
        trials: usize,
    },
    /// Trains the encoder and writes the run artifacts.
    Pretrain(Common),
    /// Clustering and probe metrics of an embedding matrix.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Embeddings TSV, one row per target node; raw features when omitted.
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
    /// Robustness to random relation rewiring against the ablation without
    /// self-expression.
    AttackEval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3")]
        ratios: Vec<f64>,
        /// Number of consecutive seeds starting at the run seed.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
    /// Finite-difference check of the composite losses.
    GradCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 20)]
        nodes: usize,
    },
    /// Checks that the masked contrastive loss never exceeds the unmasked one.
    TheoremCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1000)]
        draws: usize,
    },
    /// Trains, then writes S and its derived masks with nodes grouped by class.
    ExportHeatmap(Common),
    /// Writes the configured synthetic graph in the dataset format.
    Synth(Common),
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut config = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| Error::Io {
                    path: path.clone(),
                    source: e,
                })?;
                RunConfig::from_json(&text)?
            }
            None => RunConfig::new(match self.variant {
                Some(VariantArg::N) => Variant::HgmsN,
                _ => Variant::HgmsC,
            }),
        };
        if let (Some(v), Some(_)) = (self.variant, &self.config) {
            let wanted = match v {
                VariantArg::N => Variant::HgmsN,
                VariantArg::C => Variant::HgmsC,
            };
            if wanted != config.variant {
                return Err(Error::Config("--variant disagrees with the configuration file".into()));
            }
        }
        if let Some(seed) = self.seed {
            config = config.with_seed(seed);
        }
        Ok(config)
    }

    /// Writes `text` to `<out>/<name>`, or prints it.
    fn emit(&self, name: &str, text: &str) -> Result<()> {
        match &self.out {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
                let path = dir.join(name);
                fs::write(&path, text).map_err(|e| io_err(&path, e))
            }
            None => {
                print!("{text}");
                Ok(())
            }
        }
    }

    fn require_out(&self, command: &str) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| Error::Config(format!("{command} needs --out")))
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), |v| format!("{v:.6}"))
}

fn json<T: serde::Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::AnalyzeMhr(common) => {
            let (graph, specs) = prepare(&common.load()?)?;
            let mut out = String::from("metapath\tedges\tmhr\n");
            for row in mhr_table(&graph, &specs)? {
                writeln!(out, "{}\t{}\t{}", row.metapath, row.edges, opt(row.mhr)).unwrap();
            }
            common.emit("mhr.tsv", &out)
        }
        Command::McsProfile { common, thresholds } => {
            let (graph, specs) = prepare(&common.load()?)?;
            let labels = graph.labels().ok_or_else(|| Error::Config("profile needs labels".into()))?;
            let mut out = String::from("metapath\tlower\tupper\tedges\tmhr\n");
            for sub in compose_all(&graph, &specs)? {
                for b in mcs_homophily_profile(&sub, labels, &thresholds)? {
                    let upper = b.upper.map_or_else(|| "inf".into(), |u| u.to_string());
                    writeln!(out, "{}\t{}\t{upper}\t{}\t{}", sub.spec.name, b.lower, b.edges, opt(b.mhr)).unwrap();
                }
            }
            common.emit("mcs_profile.tsv", &out)
        }
        Command::AugmentStudy { common, ratios, trials } => {
            let config = common.load()?;
            let (graph, specs) = prepare(&config)?;
            let strategies = [Strategy::HeRandom, Strategy::MpRandom, Strategy::MpPathsim, Strategy::MpWeight];
            let rows = augment_study(&graph, &specs, &strategies, &ratios, trials, config.seed)?;
            let mut out = String::from("metapath\tstrategy\tratio\tbase_mhr\tmean_mhr\tstd_mhr\tskipped\n");
            for r in rows {
                writeln!(
                    out,
                    "{}\t{:?}\t{}\t{:.6}\t{:.6}\t{:.6}\t{}",
                    r.metapath, r.strategy, r.ratio, r.base_mhr, r.mean_mhr, r.std_mhr, r.skipped
                )
                .unwrap();
            }
            common.emit("augment_study.tsv", &out)
        }
        Command::Pretrain(common) => {
            let result = run(&common.load()?, common.out.as_deref())?;
            println!("{}", serde_json::to_string(&result.metrics)?);
            match result.theorem_violations() {
                0 => Ok(()),
                v => Err(Error::Assertion(format!("masked loss exceeded the baseline on {v} epochs"))),
            }
        }
        Command::Evaluate { common, embeddings } => {
            let config = common.load()?;
            let (graph, _) = prepare(&config)?;
            let h = match &embeddings {
                Some(path) => read_matrix(path, Some(graph.num_targets()))?,
                None => graph.features().clone(),
            };
            common.emit("metrics.json", &json(&evaluate(&h, &graph, &config)?)?)
        }
        Command::AttackEval { common, ratios, seeds } => {
            let config = common.load()?;
            let (graph, specs) = prepare(&config)?;
            if !ratios.contains(&0.0) {
                return Err(Error::Config("--ratios must include 0".into()));
            }
            let full = config.components;
            let ablation = Components {
                sev: false,
                fnf: false,
                ..full
            };
            let seeds: Vec<u64> = (config.seed..config.seed + seeds).collect();
            let rows = attack_eval(&config, &graph, &specs, &ratios, &seeds, &[full, ablation])?;
            let mut out = String::from("components\tseed\tratio\tnmi\n");
            for r in &rows {
                writeln!(out, "{}\t{}\t{}\t{:.6}", r.components, r.seed, r.ratio, r.nmi).unwrap();
            }
            common.emit("attack.tsv", &out)?;
            let attacked: Vec<f64> = ratios.iter().copied().filter(|&r| r != 0.0).collect();
            let mean = |label: &str| {
                attacked.iter().filter_map(|&r| mean_degradation(&rows, label, r)).sum::<f64>() / attacked.len() as f64
            };
            let (d_full, d_ablation) = (mean(full.label()), mean(ablation.label()));
            eprintln!("mean NMI drop: {} {d_full:.4}, {} {d_ablation:.4}", full.label(), ablation.label());
            if d_full < d_ablation {
                Ok(())
            } else {
                Err(Error::Assertion(format!(
                    "full model degraded by {d_full:.4}, ablation by {d_ablation:.4}"
                )))
            }
        }
        Command::GradCheck { common, nodes } => {
            let config = common.load()?;
            let suite = grad_check_suite(nodes, config.seed)?;
            common.emit("grad_check.json", &json(&suite)?)?;
            if suite.passed {
                Ok(())
            } else {
                Err(Error::Assertion("relative gradient error above tolerance".into()))
            }
        }
        Command::TheoremCheck { common, draws } => {
            let config = common.load()?;
            let report = theorem_draws(draws, config.seed, &config.contrast)?;
            common.emit("theorem_check.json", &json(&report)?)?;
            match report.violations {
                0 => Ok(()),
                v => Err(Error::Assertion(format!("{v} of {draws} draws violate the bound"))),
            }
        }
        Command::ExportHeatmap(common) => {
            let dir = common.require_out("export-heatmap")?;
            let config = common.load()?;
            let (graph, specs) = prepare(&config)?;
            let labels = graph.labels().ok_or_else(|| Error::Config("heatmap needs labels".into()))?;
            let result = hgms::pipeline::train(&config, &graph, &specs)?;
            let s = result
                .coefficients
                .ok_or_else(|| Error::Config("these components compute no self-expressive matrix".into()))?;
            let mut order: Vec<usize> = (0..labels.len()).collect();
            order.sort_by_key(|&i| labels[i]);
            let grouped = |m: &ndarray::Array2<f64>| matrix_tsv(&m.select(Axis(0), &order).select(Axis(1), &order));
            common.emit("S.tsv", &grouped(&s.processed))?;
            common.emit("fn_mask.tsv", &grouped(&s.fn_mask))?;
            common.emit("purified.tsv", &grouped(&s.purified))?;
            let mut rows = String::from("position\tnode\tlabel\n");
            for (p, &i) in order.iter().enumerate() {
                writeln!(rows, "{p}\t{i}\t{}", labels[i]).unwrap();
            }
            common.emit("order.tsv", &rows)?;
            eprintln!("wrote heatmap matrices to {}", dir.display());
            Ok(())
        }
        Command::Synth(common) => {
            let dir = common.require_out("synth")?;
            let (graph, specs) = prepare(&common.load()?)?;
            write_dataset(&graph, &specs, dir)?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
