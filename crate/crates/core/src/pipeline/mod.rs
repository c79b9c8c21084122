//! Dataset I/O, synthetic graphs, and training orchestration.

mod dataset;
mod studies;
mod synth;
mod train;

use std::path::PathBuf;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use dataset::{load_dataset, matrix_tsv, read_matrix, write_dataset, write_matrix, Dataset, Manifest, RelationDecl};
pub use studies::{
    attack_eval, augment_study, grad_check_suite, mean_degradation, mhr_table, theorem_draws, AttackRow, AugmentRow,
    GradCheckEntry, GradCheckSuite, MhrRow, TheoremDraws, GRAD_TOLERANCE,
};
pub use synth::{synth_generate, SynthRelation, SyntheticSpec};
pub use train::{evaluate, prepare, run, train, EpochRecord, TrainRun};

use crate::augment::{AugmentConfig, Strategy};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::eval::{KMeansConfig, ProbeConfig};
use crate::graph::MetapathSpec;
use crate::objective::{ContrastConfig, Variant};
use crate::rng::StreamKey;
use crate::selfexpr::SelfExprConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Path(PathBuf),
    Synthetic(SyntheticSpec),
}

/// Switches for the model components; all on is the complete model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Components {
    /// Heterogeneous edge dropping; off substitutes uniform metapath dropping.
    pub hga: bool,
    /// The contrast against the self-expressive view.
    pub sev: bool,
    /// False-negative masking of negatives.
    pub fnf: bool,
}

impl Default for Components {
    fn default() -> Self {
        Self {
            hga: true,
            sev: true,
            fnf: true,
        }
    }
}

impl Components {
    pub fn label(&self) -> &'static str {
        match (self.hga, self.sev, self.fnf) {
            (true, true, true) => "full",
            (false, true, true) => "w/o HGA",
            (true, false, true) => "w/o SEV",
            (true, true, false) => "w/o FNF",
            (true, false, false) => "w/o SEV&FNF",
            (false, false, false) => "w/o HGA&SEV&FNF",
            _ => "custom",
        }
    }

    pub fn needs_self_expression(&self) -> bool {
        self.sev || self.fnf
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub n_per_class: usize,
    pub probe: ProbeConfig,
    pub kmeans: KMeansConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_per_class: 20,
            probe: ProbeConfig::default(),
            kmeans: KMeansConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub data: DataSource,
    /// Metapaths to use; empty takes those of the dataset.
    #[serde(default)]
    pub metapaths: Vec<MetapathSpec>,
    pub variant: Variant,
    pub encoder: EncoderConfig,
    pub views: [AugmentConfig; 2],
    pub self_expr: SelfExprConfig,
    pub contrast: ContrastConfig,
    #[serde(default)]
    pub components: Components,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn new(variant: Variant) -> Self {
        let view = |drop_ratio, feature_drop_ratio| AugmentConfig {
            strategy: Strategy::HeRandom,
            drop_ratio,
            feature_drop_ratio,
            seed: 0,
        };
        Self {
            data: DataSource::Synthetic(SyntheticSpec::default()),
            metapaths: Vec::new(),
            variant,
            encoder: EncoderConfig::default(),
            views: [view(0.3, 0.1), view(0.4, 0.2)],
            self_expr: match variant {
                Variant::HgmsC => SelfExprConfig::closed_form(),
                Variant::HgmsN => SelfExprConfig::network(),
            },
            contrast: ContrastConfig::default(),
            components: Components::default(),
            lr: 1e-3,
            epochs: 120,
            seed: 0,
            eval: EvalConfig::default(),
        }
        .with_seed(0)
    }

    /// Sets the run seed and derives the augmentation seeds from it.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        for (v, view) in self.views.iter_mut().enumerate() {
            view.seed = StreamKey::new(seed).derive(1 + v as u64).stream().next_u64();
        }
        self
    }

    pub fn with_components(mut self, components: Components) -> Self {
        self.components = components;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        for v in &self.views {
            v.validate()?;
        }
        self.self_expr.validate()?;
        self.contrast.validate()?;
        if let DataSource::Synthetic(spec) = &self.data {
            spec.validate()?;
        }
        let expected = match self.variant {
            Variant::HgmsC => crate::selfexpr::Solver::ClosedForm,
            Variant::HgmsN => crate::selfexpr::Solver::Network,
        };
        if self.self_expr.solver != expected {
            return Err(Error::config(format!("{:?} needs the {expected:?} solver", self.variant)));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config(format!("learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    /// First 16 hex digits of the SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes()).iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}
