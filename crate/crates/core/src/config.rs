//! Hyperparameters, read from `config.json`. Every field has a default, so
//! `{}` is a valid configuration.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::loss::Scope;
use crate::masking::MaskStrategy;
use crate::tape::Precision;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config: {0}")]
    Json(#[from] serde_json::Error),
    #[error("config: {0}")]
    Invalid(String),
}

/// Activation applied after attention aggregation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Elu,
    Tanh,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub lr: f64,
    pub l2: f64,
    pub steps: usize,
    pub seeds: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            l2: 1e-4,
            steps: 300,
            seeds: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub hidden_dim: usize,
    pub encoder_layers: usize,
    /// Hops walked from the middle of each meta-path toward the target end;
    /// `None` walks all of them.
    pub propagation_hops: Option<usize>,
    pub attention_slope: f64,
    pub activation: Activation,
    pub residual: bool,
    pub enhancement: bool,
    pub self_loops: bool,
    pub gat_self_loops: bool,

    pub mask_strategy: MaskStrategy,
    pub mask_rate: f64,
    pub node_mask_rate: f64,
    pub attr_mask_rate: f64,
    pub inverse_softmax_c: f64,

    pub gamma_feat: f64,
    pub gamma_mp: f64,
    pub lambda_feat: f64,
    pub lambda_mp: f64,
    pub loss_scope: Scope,
    pub strict: bool,

    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub seed: u64,
    pub precision: Precision,
    pub log_wall_time: bool,

    pub splits: Vec<u32>,
    pub probe: ProbeConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            hidden_dim: 64,
            encoder_layers: 2,
            propagation_hops: None,
            attention_slope: 0.2,
            activation: Activation::Elu,
            residual: true,
            enhancement: true,
            self_loops: false,
            gat_self_loops: false,
            mask_strategy: MaskStrategy::Degree,
            mask_rate: 0.5,
            node_mask_rate: 0.5,
            attr_mask_rate: 0.1,
            inverse_softmax_c: 0.0,
            gamma_feat: 2.0,
            gamma_mp: 2.0,
            lambda_feat: 1.0,
            lambda_mp: 1.0,
            loss_scope: Scope::All,
            strict: false,
            lr: 0.005,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 200,
            seed: 0,
            precision: Precision::F32,
            log_wall_time: false,
            splits: vec![20, 40, 60],
            probe: ProbeConfig::default(),
        }
    }
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let c: Config = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.hidden_dim == 0 {
            return bad("hidden_dim must be >= 1".into());
        }
        if self.encoder_layers == 0 {
            return bad("encoder_layers must be >= 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        for (name, r) in [
            ("mask_rate", self.mask_rate),
            ("node_mask_rate", self.node_mask_rate),
            ("attr_mask_rate", self.attr_mask_rate),
        ] {
            if !(0.0..1.0).contains(&r) {
                return bad(format!("{name} {r} outside [0, 1)"));
            }
        }
        for (name, g) in [("gamma_feat", self.gamma_feat), ("gamma_mp", self.gamma_mp)] {
            if !(g >= 1.0 && g.is_finite()) {
                return bad(format!("{name} {g} must be >= 1"));
            }
        }
        for (name, l) in [("lambda_feat", self.lambda_feat), ("lambda_mp", self.lambda_mp)] {
            if !(l >= 0.0 && l.is_finite()) {
                return bad(format!("{name} {l} must be >= 0"));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if !self.inverse_softmax_c.is_finite() || !self.attention_slope.is_finite() {
            return bad("inverse_softmax_c and attention_slope must be finite".into());
        }
        if self.splits.is_empty() {
            return bad("splits must not be empty".into());
        }
        if let Some(s) = self.splits.iter().find(|s| ![20, 40, 60].contains(*s)) {
            return bad(format!("split {s} not one of 20, 40, 60"));
        }
        if self.probe.steps == 0 || self.probe.seeds == 0 {
            return bad("probe steps and seeds must be >= 1".into());
        }
        Ok(())
    }
}
