//! Run configuration, dotted-path overrides and ablation variants.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::alignment::AdversarialForm;
use crate::error::{Error, Result};
use crate::networks::ArchConfig;
use crate::nn::OptimizerConfig;
use crate::synthdata::SceneSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectionSchedule {
    pub start: f64,
    pub step: f64,
    pub max: f64,
}

impl Default for SelectionSchedule {
    fn default() -> Self {
        SelectionSchedule {
            start: 0.35,
            step: 0.05,
            max: 0.50,
        }
    }
}

impl SelectionSchedule {
    /// Selection amount for the `round`-th label refresh, computed in
    /// integer hundredths-of-a-percent so that e.g. round 3 gives exactly 0.5.
    pub fn at(&self, round: usize) -> f64 {
        let q = |v: f64| (v * 10_000.0).round() as i64;
        let v = (q(self.start) + q(self.step) * round as i64).min(q(self.max));
        v as f64 / 10_000.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    /// Encoder and classifier.
    pub segmentation: OptimizerConfig,
    pub discriminator: OptimizerConfig,
    pub quantizer: OptimizerConfig,
    pub critic: OptimizerConfig,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            segmentation: OptimizerConfig::adam_poly(1e-3),
            discriminator: OptimizerConfig::adam(1e-3),
            quantizer: OptimizerConfig::adam(1e-3),
            critic: OptimizerConfig::adam(1e-3),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Entropy weight of the selection cost.
    pub gamma: f64,
    /// Weights of the critic, adversarial and divergence terms.
    pub xi1: f64,
    pub xi2: f64,
    pub xi3: f64,
    pub selection: SelectionSchedule,
    /// First epoch (0-based) trained with target pseudo labels.
    pub pseudo_start_epoch: usize,
    pub use_critic: bool,
    pub use_pseudo: bool,
    pub use_div: bool,
    /// Use the printed `1 − log D` source term in the adversarial loss.
    pub literal_eq1: bool,
    /// Divide the quantizer entropy by `ln 2` so transferability spans [0, 1].
    pub normalize_entropy: bool,
    /// Momentum of a running centroid average; `None` uses per-batch centroids.
    pub centroid_ema: Option<f64>,
    pub save_labels: bool,
    pub save_checkpoints: bool,
    /// Training scenes per domain.
    pub scenes: usize,
    /// Held-out scenes per domain used for evaluation.
    pub eval_scenes: usize,
    pub data: SceneSpec,
    pub model: ArchConfig,
    pub optim: OptimConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            epochs: 10,
            batch_size: 1,
            gamma: 0.25,
            xi1: 0.3,
            xi2: 0.001,
            xi3: 10.0,
            selection: SelectionSchedule::default(),
            pseudo_start_epoch: 1,
            use_critic: true,
            use_pseudo: true,
            use_div: true,
            literal_eq1: false,
            normalize_entropy: true,
            centroid_ema: None,
            save_labels: true,
            save_checkpoints: true,
            scenes: 200,
            eval_scenes: 100,
            data: SceneSpec::default(),
            model: ArchConfig::default(),
            optim: OptimConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::config("gamma", "must be > 0"));
        }
        for (name, v) in [("xi1", self.xi1), ("xi2", self.xi2), ("xi3", self.xi3)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(name, "weights must be finite and >= 0"));
            }
        }
        let s = &self.selection;
        if !(s.start > 0.0 && s.start <= 1.0)
            || !(s.max >= s.start && s.max <= 1.0)
            || !(s.step >= 0.0)
        {
            return Err(Error::config(
                "selection",
                "need 0 < start <= max <= 1 and step >= 0",
            ));
        }
        if let Some(m) = self.centroid_ema {
            if !(0.0..1.0).contains(&m) {
                return Err(Error::config("centroid_ema", "momentum must lie in [0, 1)"));
            }
        }
        self.data.validate()?;
        if self.scenes == 0 {
            return Err(Error::config("scenes", "must be >= 1"));
        }
        if self.eval_scenes == 0 {
            return Err(Error::config("eval_scenes", "must be >= 1"));
        }
        if self.batch_size > self.scenes {
            return Err(Error::config("batch_size", "larger than the training set"));
        }
        self.model.validate()?;
        if self.model.in_channels != self.data.channels {
            return Err(Error::config(
                "model.in_channels",
                format!(
                    "{} but data.channels is {}",
                    self.model.in_channels, self.data.channels
                ),
            ));
        }
        if self.model.num_classes != self.data.classes {
            return Err(Error::config(
                "model.num_classes",
                format!(
                    "{} but data.classes is {}",
                    self.model.num_classes, self.data.classes
                ),
            ));
        }
        let o = &self.optim;
        o.segmentation.validate("optim.segmentation")?;
        o.discriminator.validate("optim.discriminator")?;
        o.quantizer.validate("optim.quantizer")?;
        o.critic.validate("optim.critic")?;
        Ok(())
    }

    pub fn adversarial_form(&self) -> AdversarialForm {
        if self.literal_eq1 {
            AdversarialForm::Literal
        } else {
            AdversarialForm::Conventional
        }
    }

    /// Whether the discriminator is part of the model at all.
    pub fn uses_discriminator(&self) -> bool {
        self.xi2 > 0.0 || self.use_critic
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.scenes / self.batch_size
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text)
            .map_err(|e| Error::config(e.message().to_string(), "could not parse config"))
    }

    /// Parses a config file, applies `key=value` overrides and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config("<file>", e.message().to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: TrainConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config("<config>", e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Hex SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Sets `a.b.c=value` inside a TOML table. The value is read as a TOML
/// literal when possible and as a bare string otherwise.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(assignment, "override must look like key=value"))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(Error::config(assignment, "empty key"));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(key, format!("`{p}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Configurations compared by the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Full,
    WithoutCritic,
    WithoutPseudo,
    WithoutDivergence,
    SourceOnly,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::WithoutCritic,
        Variant::WithoutPseudo,
        Variant::WithoutDivergence,
        Variant::SourceOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::WithoutCritic => "w/oTC",
            Variant::WithoutPseudo => "w/oCG",
            Variant::WithoutDivergence => "w/oSD",
            Variant::SourceOnly => "source-only",
        }
    }

    /// Directory-safe name.
    pub fn slug(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::WithoutCritic => "wo-tc",
            Variant::WithoutPseudo => "wo-cg",
            Variant::WithoutDivergence => "wo-sd",
            Variant::SourceOnly => "source-only",
        }
    }

    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        match self {
            Variant::Full => {}
            Variant::WithoutCritic => c.use_critic = false,
            Variant::WithoutPseudo => c.use_pseudo = false,
            Variant::WithoutDivergence => c.use_div = false,
            Variant::SourceOnly => {
                c.use_critic = false;
                c.use_pseudo = false;
                c.use_div = false;
                c.xi2 = 0.0;
            }
        }
        c
    }
}
