use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};

/// Which injections a model carries.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Session embedding + step encoding, and the forgetting bias.
    #[default]
    Full,
    /// Learned absolute positions instead of session features; bias kept.
    NoSession,
    /// Session features kept; forgetting rate forced to zero.
    NoForgetting,
    /// Absolute positions, no bias, plus a raw time-lag input channel.
    Backbone,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Backbone, Variant::NoSession, Variant::NoForgetting, Variant::Full];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoSession => "no_session",
            Variant::NoForgetting => "no_forgetting",
            Variant::Backbone => "backbone",
        }
    }

    pub fn uses_sessions(self) -> bool {
        matches!(self, Variant::Full | Variant::NoForgetting)
    }

    pub fn uses_forgetting(self) -> bool {
        matches!(self, Variant::Full | Variant::NoSession)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| config_err!("unknown variant {s:?}; expected one of backbone, no_session, no_forgetting, full"))
    }
}

/// Where the layer norms sit inside an encoder block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormPlacement {
    /// Normalize the block input before attention and the sum after the
    /// feed-forward residual.
    #[default]
    PreAttention,
    /// Normalize after each residual sum.
    Post,
}

/// How elapsed minutes are scaled into `[0, 1]` before the log.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LagNorm {
    /// Divide row `t` by `max(ts_t - ts_first, 1)`. Causal.
    #[default]
    Prefix,
    /// Divide every row by `max(ts_last - ts_first, 1)` of the whole window.
    /// Row `t` then depends on the timestamps of later steps.
    Window,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    /// Number of distinct exercises; the exercise table has one extra padding row.
    pub vocab_size: usize,
    /// Rows of the session table; larger session ids wrap around.
    pub max_sessions: usize,
    pub max_len: usize,
    pub beta: f64,
    pub multi_rate: bool,
    pub lag_norm: LagNorm,
    pub dropout: f64,
    pub variant: Variant,
    pub norm: NormPlacement,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 128,
            layers: 2,
            heads: 8,
            d_ff: 512,
            vocab_size: 1,
            max_sessions: 512,
            max_len: 200,
            beta: 0.1,
            multi_rate: false,
            lag_norm: LagNorm::Prefix,
            dropout: 0.4,
            variant: Variant::Full,
            norm: NormPlacement::PreAttention,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    /// Width `d` with the feed-forward width tied to `4d`.
    pub fn with_width(mut self, d_model: usize) -> Self {
        self.d_model = d_model;
        self.d_ff = 4 * d_model;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn head_hidden(&self) -> usize {
        (self.d_model / 2).max(1)
    }

    /// β actually applied: zero for variants without the forgetting bias.
    pub fn effective_beta(&self) -> f64 {
        if self.variant.uses_forgetting() {
            self.beta
        } else {
            0.0
        }
    }

    /// Per-head rates are learned only for multi-rate models with the bias on.
    pub fn learns_rates(&self) -> bool {
        self.multi_rate && self.variant.uses_forgetting()
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("d_model", self.d_model),
            ("layers", self.layers),
            ("heads", self.heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_sessions", self.max_sessions),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(config_err!("{name} must be positive"));
        }
        if self.d_model % self.heads != 0 {
            return Err(config_err!("d_model {} is not divisible by heads {}", self.d_model, self.heads));
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(config_err!("beta must be a finite non-negative number, got {}", self.beta));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(config_err!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if self.multi_rate && !self.variant.uses_forgetting() {
            return Err(config_err!("multi_rate needs a variant with the forgetting bias, not {}", self.variant));
        }
        if !(self.init_std > 0.0) {
            return Err(config_err!("init_std must be positive"));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: ModelConfig = serde_json::from_str(text).map_err(|e| config_err!("invalid model config: {e}"))?;
        c.validate()?;
        Ok(c)
    }
}
