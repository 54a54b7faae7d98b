//! Model, training, and decoding hyperparameters.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Which model family to build and train.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Plain attention encoder-decoder.
    Baseline,
    /// Baseline plus one extra unidirectional encoder layer with a
    /// residual connection.
    MultiLayer,
    /// Per-step vector context gate over the source states.
    Shallow,
    /// Gate followed by a second encoding pass.
    Deep,
    /// Per-position scalar gate (ablation of the vector gate).
    HardShallow,
    /// Scalar gate followed by re-encoding.
    HardDeep,
    /// Deep refining guarded by a learned refine/reuse policy.
    Conditional,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Baseline,
        Variant::MultiLayer,
        Variant::Shallow,
        Variant::Deep,
        Variant::HardShallow,
        Variant::HardDeep,
        Variant::Conditional,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::MultiLayer => "multi-layer",
            Variant::Shallow => "shallow",
            Variant::Deep => "deep",
            Variant::HardShallow => "hard-shallow",
            Variant::HardDeep => "hard-deep",
            Variant::Conditional => "conditional",
        }
    }

    pub fn has_refiner(self) -> bool {
        !matches!(self, Variant::Baseline | Variant::MultiLayer)
    }

    pub fn has_policy(self) -> bool {
        matches!(self, Variant::Conditional)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown variant {s:?}, expected one of: {}",
                    Variant::ALL.map(|v| v.name()).join(", ")
                ))
            })
    }
}

/// Architecture dimensions. The encoder is bidirectional, so source states
/// have dimension `2 * rnn_dim`; the decoder state matches that width.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub emb_dim: usize,
    pub rnn_dim: usize,
    pub attn_dim: usize,
    pub policy_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::Baseline,
            emb_dim: 32,
            rnn_dim: 64,
            attn_dim: 64,
            policy_dim: 32,
        }
    }
}

impl ModelConfig {
    /// Source-state width `d_h = 2 * rnn_dim`.
    pub fn hidden_dim(&self) -> usize {
        2 * self.rnn_dim
    }

    /// Decoder state width (equal to the source-state width).
    pub fn state_dim(&self) -> usize {
        self.hidden_dim()
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("emb-dim", self.emb_dim),
            ("rnn-dim", self.rnn_dim),
            ("attn-dim", self.attn_dim),
            ("policy-dim", self.policy_dim),
        ] {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Linear-in-epochs exponential temperature decay with a floor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TauSchedule {
    pub start: f64,
    pub floor: f64,
    pub decay: f64,
}

impl Default for TauSchedule {
    fn default() -> Self {
        TauSchedule {
            start: 1.0,
            floor: 0.5,
            decay: 0.8,
        }
    }
}

impl TauSchedule {
    pub fn at_epoch(&self, epoch: usize) -> f64 {
        (self.start * self.decay.powi(epoch as i32)).max(self.floor)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub dropout: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Early stopping: halt after this many non-improving dev evaluations.
    pub patience: usize,
    pub max_len: usize,
    /// Refine-penalty strength for the conditional variant.
    pub alpha: f64,
    pub tau: TauSchedule,
    pub seed: u64,
    /// Deep-path handover: epochs over which attention blends from the
    /// gated states to the re-encoded states (0 disables the ramp).
    pub deep_warmup: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 5e-4,
            clip_norm: 1.0,
            dropout: 0.3,
            batch_size: 16,
            epochs: 10,
            patience: 3,
            max_len: 50,
            alpha: 0.1,
            tau: TauSchedule::default(),
            seed: 1,
            deep_warmup: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::InvalidArgument("learning-rate must be positive".into()));
        }
        if self.clip_norm <= 0.0 {
            return Err(Error::InvalidArgument("clip-norm must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument("dropout must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.max_len == 0 {
            return Err(Error::InvalidArgument(
                "batch-size, epochs and max-len must be positive".into(),
            ));
        }
        if self.alpha < 0.0 {
            return Err(Error::InvalidArgument("alpha must be non-negative".into()));
        }
        if self.tau.start <= 0.0 || self.tau.floor <= 0.0 || !(0.0..=1.0).contains(&self.tau.decay)
        {
            return Err(Error::InvalidArgument("invalid tau schedule".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodeConfig {
    pub beam: usize,
    pub max_len: usize,
    /// Length-normalization exponent for beam scoring.
    pub length_norm: f64,
    /// Refine-probability threshold for the conditional policy.
    pub threshold: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam: 10,
            max_len: 50,
            length_norm: 1.0,
            threshold: 0.5,
        }
    }
}

impl DecodeConfig {
    pub fn greedy(max_len: usize) -> Self {
        DecodeConfig {
            beam: 1,
            max_len,
            ..Default::default()
        }
    }
}

// ── key = value files ───────────────────────────────────────────────────

/// Parses a `key = value` text file (used for run configs and corpus
/// manifests). `#` starts a comment; blank lines are ignored.
pub fn read_kv_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_kv(&text).map_err(|msg| Error::InvalidArgument(format!("{}: {msg}", path.display())))
}

pub fn parse_kv(text: &str) -> std::result::Result<BTreeMap<String, String>, String> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected key = value", lineno + 1))?;
        let key = key.trim().to_string();
        if map.insert(key.clone(), value.trim().to_string()).is_some() {
            return Err(format!("line {}: duplicate key {key:?}", lineno + 1));
        }
    }
    Ok(map)
}

pub fn write_kv_file(path: &Path, entries: &[(&str, String)]) -> Result<()> {
    let mut out = String::new();
    for (k, v) in entries {
        out.push_str(&format!("{k} = {v}\n"));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
