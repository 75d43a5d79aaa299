//! Run configuration: a flat TOML document with defaults for every key,
//! strict unknown-key rejection, range validation that names the offending
//! key, and CLI-flag overrides.

use crate::data::ShiftPreset;
use crate::error::{Error, Result};
use crate::train::{AblationMode, LpParams, StepSchedule, TrainerParams};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

fn d_seed() -> u64 {
    7
}
fn d_episodes() -> usize {
    100
}
fn d_way() -> usize {
    5
}
fn d_shot() -> usize {
    1
}
fn d_query_per_class() -> usize {
    15
}
fn d_input_dim() -> usize {
    16
}
fn d_source_classes() -> usize {
    8
}
fn d_target_classes() -> usize {
    8
}
fn d_per_class() -> usize {
    40
}
fn d_cluster_spread() -> f64 {
    0.6
}
fn d_preset() -> ShiftPreset {
    ShiftPreset::Near
}
fn d_steps() -> usize {
    20
}
fn d_max_epochs() -> usize {
    20
}
fn d_alpha() -> f64 {
    0.7
}
fn d_gamma() -> f64 {
    0.4
}
fn d_learning_rate() -> f64 {
    0.01
}
fn d_momentum() -> f64 {
    0.9
}
fn d_weight_decay() -> f64 {
    1e-3
}
fn d_epsilon() -> f64 {
    1e-5
}
fn d_ablation() -> AblationMode {
    AblationMode::Full
}
fn d_lp_neighbors() -> usize {
    10
}
fn d_lp_alpha() -> f64 {
    0.75
}
fn d_lp_iterations() -> usize {
    20
}
fn d_backbone_hidden() -> Vec<usize> {
    vec![64, 48, 32]
}
fn d_backbone_epochs() -> usize {
    30
}
fn d_backbone_lr() -> f64 {
    0.05
}
fn d_track_shift() -> bool {
    true
}
fn d_shift_cap() -> usize {
    32
}
fn d_histogram_bins() -> usize {
    16
}

/// Everything a run needs, flattened into scalar keys. Every key has a
/// default, so an empty document is a valid configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "d_seed")]
    pub seed: u64,
    #[serde(default = "d_episodes")]
    pub episodes: usize,
    /// Classes per episode (N).
    #[serde(default = "d_way")]
    pub way: usize,
    /// Labeled samples per class (K).
    #[serde(default = "d_shot")]
    pub shot: usize,
    #[serde(default = "d_query_per_class")]
    pub query_per_class: usize,
    #[serde(default = "d_input_dim")]
    pub input_dim: usize,
    #[serde(default = "d_source_classes")]
    pub source_classes: usize,
    #[serde(default = "d_target_classes")]
    pub target_classes: usize,
    /// Samples per class in each generated pool.
    #[serde(default = "d_per_class")]
    pub per_class: usize,
    #[serde(default = "d_cluster_spread")]
    pub cluster_spread: f64,
    #[serde(default = "d_preset")]
    pub preset: ShiftPreset,
    /// Alignment steps (E).
    #[serde(default = "d_steps")]
    pub steps: usize,
    /// Total classifier epochs, split evenly across the steps.
    #[serde(default = "d_max_epochs")]
    pub max_epochs: usize,
    /// Support mini-batch size; 0 means the full support set.
    #[serde(default)]
    pub support_batch: usize,
    #[serde(default = "d_alpha")]
    pub alpha: f64,
    #[serde(default = "d_gamma")]
    pub gamma: f64,
    /// Diversity weight; defaults per preset (2.0 near, 0.1 distant).
    #[serde(default)]
    pub sigma: Option<f64>,
    #[serde(default = "d_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "d_momentum")]
    pub momentum: f64,
    #[serde(default = "d_weight_decay")]
    pub weight_decay: f64,
    /// Variance floor inside the prompt's standardization.
    #[serde(default = "d_epsilon")]
    pub epsilon: f64,
    #[serde(default = "d_ablation")]
    pub ablation: AblationMode,
    #[serde(default = "d_lp_neighbors")]
    pub lp_neighbors: usize,
    #[serde(default = "d_lp_alpha")]
    pub lp_alpha: f64,
    #[serde(default = "d_lp_iterations")]
    pub lp_iterations: usize,
    #[serde(default = "d_backbone_hidden")]
    pub backbone_hidden: Vec<usize>,
    #[serde(default = "d_backbone_epochs")]
    pub backbone_epochs: usize,
    #[serde(default = "d_backbone_lr")]
    pub backbone_lr: f64,
    /// Load a serialized backbone instead of pretraining one.
    #[serde(default)]
    pub backbone_path: Option<PathBuf>,
    /// Override the derived source-pool seed.
    #[serde(default)]
    pub source_seed: Option<u64>,
    /// Override the derived target-pool seed.
    #[serde(default)]
    pub target_seed: Option<u64>,
    /// Report destination; stdout summary only when unset. Not echoed into
    /// reports: where a run is written must not change what it contains.
    #[serde(default, skip_serializing)]
    pub out: Option<PathBuf>,
    /// Worker threads for episode fan-out; 0 picks the runtime default.
    #[serde(default)]
    pub threads: usize,
    /// Record per-step prediction movement (costs a matching per step).
    #[serde(default = "d_track_shift")]
    pub track_shift: bool,
    /// Per-class sample cap for that matching.
    #[serde(default = "d_shift_cap")]
    pub shift_cap: usize,
    #[serde(default = "d_histogram_bins")]
    pub histogram_bins: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        toml::from_str("").expect("every key has a default")
    }
}

/// Flag-level overrides that win over file values.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub episodes: Option<usize>,
    pub ablation: Option<AblationMode>,
    pub preset: Option<ShiftPreset>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    /// Parse a TOML document; unknown keys and type mismatches are
    /// configuration errors carrying the parser's key-naming message.
    pub fn from_toml_str(doc: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(doc).map_err(|e| Error::config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let doc = std::fs::read_to_string(path)?;
        Self::from_toml_str(&doc)
    }

    pub fn apply_overrides(&mut self, ov: &Overrides) -> Result<()> {
        if let Some(seed) = ov.seed {
            self.seed = seed;
        }
        if let Some(episodes) = ov.episodes {
            self.episodes = episodes;
        }
        if let Some(ablation) = ov.ablation {
            self.ablation = ablation;
        }
        if let Some(preset) = ov.preset {
            self.preset = preset;
        }
        if let Some(out) = &ov.out {
            self.out = Some(out.clone());
        }
        self.validate()
    }

    /// The diversity weight in effect: the explicit value, else the
    /// preset's default.
    pub fn sigma_effective(&self) -> f64 {
        self.sigma.unwrap_or(match self.preset {
            ShiftPreset::Near => 2.0,
            ShiftPreset::Distant => 0.1,
        })
    }

    pub fn schedule(&self) -> Result<StepSchedule> {
        StepSchedule::new(self.steps, self.max_epochs, self.support_batch)
    }

    pub fn trainer_params(&self) -> Result<TrainerParams> {
        Ok(TrainerParams {
            schedule: self.schedule()?,
            mode: self.ablation,
            alpha: self.alpha,
            gamma: self.gamma,
            sigma: self.sigma_effective(),
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            epsilon: self.epsilon,
            lp: LpParams {
                neighbors: self.lp_neighbors,
                mixing: self.lp_alpha,
                iterations: self.lp_iterations,
            },
            track_shift: self.track_shift,
            shift_cap: self.shift_cap,
        })
    }

    pub fn validate(&self) -> Result<()> {
        fn positive(key: &str, v: usize) -> Result<()> {
            if v == 0 {
                return Err(Error::config(format!("{key} must be at least 1")));
            }
            Ok(())
        }
        fn finite_min(key: &str, v: f64, min: f64, strict: bool) -> Result<()> {
            let ok = v.is_finite() && if strict { v > min } else { v >= min };
            if !ok {
                let cmp = if strict { "above" } else { "at least" };
                return Err(Error::config(format!("{key} must be {cmp} {min}, got {v}")));
            }
            Ok(())
        }
        fn fraction(key: &str, v: f64) -> Result<()> {
            if !(v.is_finite() && v > 0.0 && v <= 1.0) {
                return Err(Error::config(format!(
                    "{key} must lie in (0, 1], got {v}"
                )));
            }
            Ok(())
        }

        positive("episodes", self.episodes)?;
        if self.way < 2 {
            return Err(Error::config(format!(
                "way must be at least 2, got {}",
                self.way
            )));
        }
        positive("shot", self.shot)?;
        positive("query_per_class", self.query_per_class)?;
        positive("input_dim", self.input_dim)?;
        if self.source_classes < 2 {
            return Err(Error::config(format!(
                "source_classes must be at least 2, got {}",
                self.source_classes
            )));
        }
        if self.target_classes < self.way {
            return Err(Error::config(format!(
                "target_classes ({}) must be at least way ({})",
                self.target_classes, self.way
            )));
        }
        let needed = self.shot + self.query_per_class;
        if self.per_class < needed {
            return Err(Error::config(format!(
                "per_class ({}) must cover shot + query_per_class ({needed})",
                self.per_class
            )));
        }
        finite_min("cluster_spread", self.cluster_spread, 0.0, true)?;
        self.schedule()?;
        fraction("alpha", self.alpha)?;
        fraction("gamma", self.gamma)?;
        if let Some(sigma) = self.sigma {
            finite_min("sigma", sigma, 0.0, false)?;
        }
        finite_min("learning_rate", self.learning_rate, 0.0, false)?;
        if !(self.momentum.is_finite() && (0.0..1.0).contains(&self.momentum)) {
            return Err(Error::config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        finite_min("weight_decay", self.weight_decay, 0.0, false)?;
        finite_min("epsilon", self.epsilon, 0.0, false)?;
        positive("lp_neighbors", self.lp_neighbors)?;
        if !(self.lp_alpha.is_finite() && (0.0..=1.0).contains(&self.lp_alpha)) {
            return Err(Error::config(format!(
                "lp_alpha must lie in [0, 1], got {}",
                self.lp_alpha
            )));
        }
        if self.backbone_hidden.is_empty() || self.backbone_hidden.contains(&0) {
            return Err(Error::config(
                "backbone_hidden must list at least one positive width",
            ));
        }
        finite_min("backbone_lr", self.backbone_lr, 0.0, true)?;
        positive("shift_cap", self.shift_cap)?;
        if self.histogram_bins < 2 {
            return Err(Error::config(format!(
                "histogram_bins must be at least 2, got {}",
                self.histogram_bins
            )));
        }
        // the target pool must never be the source pool in disguise
        if let (Some(s), Some(t)) = (self.source_seed, self.target_seed) {
            if s == t {
                return Err(Error::config(
                    "source_seed and target_seed must differ; the target pool may not reuse the source pool",
                ));
            }
        }
        Ok(())
    }
}
