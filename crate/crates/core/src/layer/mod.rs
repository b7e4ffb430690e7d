//! The token-mixer layer around the chunkwise engine.
//!
//! Pipeline per token: linear projections, short depthwise causal
//! convolutions and SiLU on the q/k/v paths, L2-normalized q and k per head,
//! sigmoid erase/write gates, the log-decay branch, the recurrence per value
//! head, per-head RMSNorm, a SiLU output gate and the output projection.

mod backward;
mod forward;
mod params;

use std::fmt;
use std::str::FromStr;

pub use backward::{backward_layer, LayerGrads};
pub use forward::{
    broadcast_group_heads, causal_conv, compute_gates, compute_log_decay, decode_sequence, decode_step,
    forward_layer, forward_layer_from, project_qkv, DecodeState, Gates, LayerCache, LayerForward, LayerKernel,
    Projections,
};
pub use params::{init_params, LayerParams, PARAM_NAMES};

use crate::error::{Error, Result};
use crate::math::SolvePrecision;
use crate::rules::RuleKind;

/// Gate parameterization of the layer.
///
/// `Untied` is the full rule. The others constrain the gates so that the
/// layer reproduces a member of the tied family exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum GateMode {
    /// Channel-wise erase and write gates, channel-wise decay.
    #[default]
    Untied,
    /// One `β` per key head drives both gates; channel-wise decay.
    Kda,
    /// One `β` per key head; one decay per key head.
    Gdn,
    /// One `β` per key head; no decay.
    DeltaNet,
    /// Erase gate 0, write gate 1; one decay per key head.
    Mamba2,
}

impl GateMode {
    pub const ALL: [GateMode; 5] = [
        GateMode::Untied,
        GateMode::Kda,
        GateMode::Gdn,
        GateMode::DeltaNet,
        GateMode::Mamba2,
    ];

    /// The tokenwise rule this parameterization is equivalent to.
    pub fn rule(self) -> RuleKind {
        match self {
            GateMode::Untied => RuleKind::Gdr2,
            GateMode::Kda => RuleKind::Kda,
            GateMode::Gdn => RuleKind::GatedDeltaNet,
            GateMode::DeltaNet => RuleKind::DeltaNet,
            GateMode::Mamba2 => RuleKind::Mamba2,
        }
    }

    pub fn is_tied(self) -> bool {
        matches!(self, GateMode::Kda | GateMode::Gdn | GateMode::DeltaNet)
    }

    fn name(self) -> &'static str {
        match self {
            GateMode::Untied => "gdr2",
            GateMode::Kda => "kda",
            GateMode::Gdn => "gdn",
            GateMode::DeltaNet => "deltanet",
            GateMode::Mamba2 => "mamba2",
        }
    }
}

impl fmt::Display for GateMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GateMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GateMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::contract("GateMode::from_str", format!("unknown gate mode {s:?}")))
    }
}

/// Layer hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerConfig {
    pub d_model: usize,
    /// Key heads.
    pub heads: usize,
    /// Value heads, a multiple of `heads`.
    pub value_heads: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub conv_width: usize,
    pub chunk_size: usize,
    pub neg_eig: bool,
    pub gate_mode: GateMode,
    pub solve: SolvePrecision,
}

impl Default for LayerConfig {
    fn default() -> Self {
        LayerConfig {
            d_model: 32,
            heads: 2,
            value_heads: 2,
            d_k: 16,
            d_v: 16,
            conv_width: 4,
            chunk_size: 64,
            neg_eig: false,
            gate_mode: GateMode::Untied,
            solve: SolvePrecision::StrictBinary64,
        }
    }
}

impl LayerConfig {
    pub fn validate(&self) -> Result<()> {
        const OP: &str = "LayerConfig::validate";
        for (name, v) in [
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("value_heads", self.value_heads),
            ("d_k", self.d_k),
            ("d_v", self.d_v),
            ("conv_width", self.conv_width),
            ("chunk_size", self.chunk_size),
        ] {
            if v == 0 {
                return Err(Error::contract(OP, format!("{name} must be at least 1")));
            }
        }
        if self.value_heads % self.heads != 0 {
            return Err(Error::contract(
                OP,
                format!("{} value heads is not a multiple of {} key heads", self.value_heads, self.heads),
            ));
        }
        if self.neg_eig && self.gate_mode != GateMode::Untied {
            return Err(Error::contract(OP, "the widened erase range needs untied gates"));
        }
        Ok(())
    }

    /// Value heads per key head.
    pub fn group_factor(&self) -> usize {
        self.value_heads / self.heads
    }

    pub fn key_dim(&self) -> usize {
        self.heads * self.d_k
    }

    pub fn value_dim(&self) -> usize {
        self.value_heads * self.d_v
    }

    /// Output width of the erase-gate projection, if present.
    pub fn erase_width(&self) -> Option<usize> {
        match self.gate_mode {
            GateMode::Untied => Some(self.key_dim()),
            GateMode::Kda | GateMode::Gdn | GateMode::DeltaNet => Some(self.heads),
            GateMode::Mamba2 => None,
        }
    }

    /// Output width of the write-gate projection, if present.
    pub fn write_width(&self) -> Option<usize> {
        match self.gate_mode {
            GateMode::Untied => Some(self.value_dim()),
            _ => None,
        }
    }

    /// Output width of the decay projection, if present.
    pub fn decay_width(&self) -> Option<usize> {
        match self.gate_mode {
            GateMode::Untied | GateMode::Kda => Some(self.key_dim()),
            GateMode::Gdn | GateMode::Mamba2 => Some(self.heads),
            GateMode::DeltaNet => None,
        }
    }

    /// Decay channels per key head: `d_k`, or 1 for a scalar decay.
    pub fn decay_channels(&self) -> Option<usize> {
        self.decay_width().map(|w| w / self.heads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_contract() {
        assert!(LayerConfig::default().validate().is_ok());
        let bad = LayerConfig {
            value_heads: 3,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Contract { .. })));
        let bad = LayerConfig {
            neg_eig: true,
            gate_mode: GateMode::Kda,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        for m in GateMode::ALL {
            assert_eq!(m.to_string().parse::<GateMode>().unwrap(), m);
        }
    }
}
