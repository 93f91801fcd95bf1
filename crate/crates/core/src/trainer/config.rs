use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffcore::AdamWConfig;
use crate::encoders::MissingMode;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::moe::Fusion;

/// Architectural ablations of the full model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    None,
    NoMissingIndicator,
    NoSpecialization,
    NoDynamicGating,
    Top1,
}

impl AblationMode {
    pub const ALL: [AblationMode; 5] = [
        AblationMode::None,
        AblationMode::NoMissingIndicator,
        AblationMode::NoSpecialization,
        AblationMode::NoDynamicGating,
        AblationMode::Top1,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationMode::None => "none",
            AblationMode::NoMissingIndicator => "no_missing_indicator",
            AblationMode::NoSpecialization => "no_specialization",
            AblationMode::NoDynamicGating => "no_dynamic_gating",
            AblationMode::Top1 => "top1",
        }
    }

    /// Row label used in ablation tables.
    pub fn label(self) -> &'static str {
        match self {
            AblationMode::None => "Full model",
            AblationMode::NoMissingIndicator => "w/o Missing Indicator",
            AblationMode::NoSpecialization => "w/o Expert Specialization",
            AblationMode::NoDynamicGating => "w/o Dynamic Gating",
            AblationMode::Top1 => "w/o Top-k Routing (Top-1)",
        }
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                let known: Vec<&str> = Self::ALL.iter().map(|m| m.as_str()).collect();
                Error::Config(format!("unknown ablation mode `{s}`; expected one of {}", known.join(", ")))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub alpha: f64,
    pub k: usize,
    pub pretrain_epochs: usize,
    pub seed: u64,
    pub ablation: AblationMode,
    pub threshold: f64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 0.01,
            batch_size: 32,
            max_epochs: 50,
            patience: 5,
            alpha: 0.01,
            k: 2,
            pretrain_epochs: 5,
            seed: 0,
            ablation: AblationMode::None,
            threshold: 0.5,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
            ("patience", self.patience),
            ("k", self.k),
            ("d_h", self.model.encoder.d_h),
            ("rnn_hidden", self.model.encoder.rnn_hidden),
            ("token_dim", self.model.encoder.token_dim),
            ("image_hidden", self.model.encoder.image_hidden),
            ("expert_hidden", self.model.moe.expert_hidden),
            ("gate_hidden", self.model.moe.gate_hidden),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::Config("alpha must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config("threshold must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// What an ablation mode changes in the model and the training schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Wiring {
    pub model: ModelConfig,
    pub fusion: Fusion,
    pub pretrain: bool,
}

pub fn apply_ablation(config: &TrainConfig) -> Wiring {
    let mut wiring = Wiring {
        model: config.model,
        fusion: Fusion::TopK(config.k),
        pretrain: config.pretrain_epochs > 0,
    };
    match config.ablation {
        AblationMode::None => {}
        AblationMode::NoMissingIndicator => wiring.model.encoder.missing = MissingMode::Zero,
        AblationMode::NoSpecialization => wiring.pretrain = false,
        AblationMode::NoDynamicGating => wiring.fusion = Fusion::Uniform,
        AblationMode::Top1 => wiring.fusion = Fusion::TopK(1),
    }
    wiring
}
