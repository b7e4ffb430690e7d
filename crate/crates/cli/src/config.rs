//! `key = value` run configuration.
//!
//! One assignment per line; `#` starts a comment. Unknown or repeated keys are
//! errors. Dimension keys narrow a command's default sweep to that value.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use gdr2_core::layer::{GateMode, LayerConfig};
use gdr2_core::math::SolvePrecision;
use gdr2_core::Precision;
use thiserror::Error;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("config line {line}: {detail}")]
pub struct ConfigError {
    pub line: usize,
    pub detail: String,
}

impl ConfigError {
    fn new(line: usize, detail: impl Into<String>) -> Self {
        ConfigError {
            line,
            detail: detail.into(),
        }
    }
}

pub const KEYS: [&str; 19] = [
    "seed",
    "precision",
    "L",
    "C",
    "d_model",
    "H",
    "H_v",
    "d_k",
    "d_v",
    "conv_width",
    "neg_eig",
    "solve_precision",
    "gate_mode",
    "vocab",
    "pairs",
    "steps",
    "lr",
    "batch",
    "reps",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Option<Precision>,
    pub len: Option<usize>,
    pub chunk: Option<usize>,
    pub d_model: Option<usize>,
    pub heads: Option<usize>,
    pub value_heads: Option<usize>,
    pub d_k: Option<usize>,
    pub d_v: Option<usize>,
    pub conv_width: Option<usize>,
    pub neg_eig: bool,
    pub solve: SolvePrecision,
    pub gate_mode: Option<GateMode>,
    pub vocab: usize,
    pub pairs: usize,
    pub steps: usize,
    /// A single learning rate instead of the sweep.
    pub lr: Option<f64>,
    pub batch: usize,
    /// Timing repetitions per benchmark point; the fastest is kept.
    pub reps: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            precision: None,
            len: None,
            chunk: None,
            d_model: None,
            heads: None,
            value_heads: None,
            d_k: None,
            d_v: None,
            conv_width: None,
            neg_eig: false,
            solve: SolvePrecision::StrictBinary64,
            gate_mode: None,
            vocab: 16,
            pairs: 8,
            steps: 2000,
            lr: None,
            batch: 16,
            reps: 3,
        }
    }
}

fn parse_value<V: FromStr>(line: usize, key: &str, raw: &str) -> Result<V, ConfigError> {
    raw.parse()
        .map_err(|_| ConfigError::new(line, format!("{key}: cannot parse {raw:?}")))
}

fn parse_dim(line: usize, key: &str, raw: &str) -> Result<usize, ConfigError> {
    let v: usize = parse_value(line, key, raw)?;
    if v == 0 {
        return Err(ConfigError::new(line, format!("{key} must be at least 1")));
    }
    Ok(v)
}

impl FromStr for RunConfig {
    type Err = ConfigError;

    fn from_str(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        let mut seen: Vec<String> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (key, value) = body
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| ConfigError::new(line, format!("expected key = value, got {body:?}")))?;
            if !KEYS.contains(&key) {
                return Err(ConfigError::new(line, format!("unknown key {key:?}")));
            }
            if seen.iter().any(|k| k == key) {
                return Err(ConfigError::new(line, format!("{key} given twice")));
            }
            seen.push(key.to_string());
            match key {
                "seed" => cfg.seed = parse_value(line, key, value)?,
                "precision" => {
                    cfg.precision = Some(value.parse().map_err(|e: String| ConfigError::new(line, e))?)
                }
                "L" => cfg.len = Some(parse_dim(line, key, value)?),
                "C" => cfg.chunk = Some(parse_dim(line, key, value)?),
                "d_model" => cfg.d_model = Some(parse_dim(line, key, value)?),
                "H" => cfg.heads = Some(parse_dim(line, key, value)?),
                "H_v" => cfg.value_heads = Some(parse_dim(line, key, value)?),
                "d_k" => cfg.d_k = Some(parse_dim(line, key, value)?),
                "d_v" => cfg.d_v = Some(parse_dim(line, key, value)?),
                "conv_width" => cfg.conv_width = Some(parse_dim(line, key, value)?),
                "neg_eig" => cfg.neg_eig = parse_value(line, key, value)?,
                "solve_precision" => {
                    cfg.solve = match value {
                        "strict" | "binary64" | "f64" => SolvePrecision::StrictBinary64,
                        "input" => SolvePrecision::Input,
                        other => {
                            return Err(ConfigError::new(
                                line,
                                format!("solve_precision: expected strict or input, got {other:?}"),
                            ))
                        }
                    }
                }
                "gate_mode" => {
                    cfg.gate_mode = Some(value.parse().map_err(|e: gdr2_core::Error| ConfigError::new(line, e.to_string()))?)
                }
                "vocab" => cfg.vocab = parse_dim(line, key, value)?,
                "pairs" => cfg.pairs = parse_dim(line, key, value)?,
                "steps" => cfg.steps = parse_dim(line, key, value)?,
                "lr" => {
                    let lr: f64 = parse_value(line, key, value)?;
                    if !(lr.is_finite() && lr > 0.0) {
                        return Err(ConfigError::new(line, "lr must be positive"));
                    }
                    cfg.lr = Some(lr);
                }
                "batch" => cfg.batch = parse_dim(line, key, value)?,
                "reps" => cfg.reps = parse_dim(line, key, value)?,
                _ => unreachable!("key list and match arms agree"),
            }
        }
        Ok(cfg)
    }
}

/// Every set key, one per line; parses back to the same config.
impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "seed = {}", self.seed)?;
        if let Some(p) = self.precision {
            writeln!(f, "precision = {p}")?;
        }
        let dims = [
            ("L", self.len),
            ("C", self.chunk),
            ("d_model", self.d_model),
            ("H", self.heads),
            ("H_v", self.value_heads),
            ("d_k", self.d_k),
            ("d_v", self.d_v),
            ("conv_width", self.conv_width),
        ];
        for (key, v) in dims {
            if let Some(v) = v {
                writeln!(f, "{key} = {v}")?;
            }
        }
        writeln!(f, "neg_eig = {}", self.neg_eig)?;
        let solve = match self.solve {
            SolvePrecision::StrictBinary64 => "strict",
            SolvePrecision::Input => "input",
        };
        writeln!(f, "solve_precision = {solve}")?;
        if let Some(m) = self.gate_mode {
            writeln!(f, "gate_mode = {m}")?;
        }
        writeln!(f, "vocab = {}\npairs = {}\nsteps = {}", self.vocab, self.pairs, self.steps)?;
        if let Some(lr) = self.lr {
            writeln!(f, "lr = {lr:e}")?;
        }
        writeln!(f, "batch = {}\nreps = {}", self.batch, self.reps)
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Ok(text.parse()?)
    }

    /// `base` with every layer key present in the config applied.
    pub fn layer_config(&self, base: LayerConfig) -> Result<LayerConfig> {
        let cfg = LayerConfig {
            d_model: self.d_model.unwrap_or(base.d_model),
            heads: self.heads.unwrap_or(base.heads),
            value_heads: self.value_heads.unwrap_or(base.value_heads),
            d_k: self.d_k.unwrap_or(base.d_k),
            d_v: self.d_v.unwrap_or(base.d_v),
            conv_width: self.conv_width.unwrap_or(base.conv_width),
            chunk_size: self.chunk.unwrap_or(base.chunk_size),
            neg_eig: self.neg_eig || base.neg_eig,
            gate_mode: self.gate_mode.unwrap_or(base.gate_mode),
            solve: self.solve,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// The sweep values of one dimension: the configured value alone, or the defaults.
    pub fn sweep(value: Option<usize>, defaults: &[usize]) -> Vec<usize> {
        value.map_or_else(|| defaults.to_vec(), |v| vec![v])
    }

    /// Precisions to run: the configured one alone, or both.
    pub fn precisions(&self) -> Vec<Precision> {
        self.precision
            .map_or_else(|| vec![Precision::Binary64, Precision::Binary32], |p| vec![p])
    }
}
