//! Small decoder-only LM with pluggable attention masks, explicit
//! position indices, per-demonstration label losses, and exact gradients.

mod checkpoint;
mod forward;
pub mod mask;
pub mod math;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError, Precision};
pub use forward::{forward, forward_cached, grad, per_demo_nll, trace_from_cache, ForwardCache,
                  LossNode, LossTerm};
pub use mask::{build_mask, MaskMode, MaskSpec};
pub use params::{Gradients, LayerParams, ModelDims, ModelParams};

use serde::{Deserialize, Serialize};

use crate::corpus::EOD;

/// Which context a trace was computed under: the full causal many-shot
/// sequence or its parallel-context zero-shot degradation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContextMode {
    ManyShot,
    ZeroShot,
}

impl ContextMode {
    pub fn mask_mode(&self) -> MaskMode {
        match self {
            Self::ManyShot => MaskMode::CausalFull,
            Self::ZeroShot => MaskMode::PcwParallel,
        }
    }
}

/// Per-demonstration mean label NLLs (nats) for one sequence; the input
/// to all reweighting math.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub sequence_id: String,
    pub mode: ContextMode,
    pub losses: Vec<f64>,
}

impl LossTrace {
    pub fn k(&self) -> usize {
        self.losses.len()
    }

    pub fn mean(&self) -> f64 {
        self.losses.iter().sum::<f64>() / self.losses.len() as f64
    }

    pub fn is_finite(&self) -> bool {
        self.losses.iter().all(|l| l.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelError {
    BadDims(&'static str),
    MissingSpans,
    EmptySequence,
    TokenOutOfRange { token: u32, vocab: usize },
    SequenceTooLong { position: usize, max_pos: usize },
    LossDisconnected,
    CoeffLengthMismatch { expected: usize, got: usize },
    PrefixTooLong { len: usize, max_pos: usize },
}

impl std::fmt::Display for ModelError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::BadDims(why) => write!(f, "invalid dims: {why}"),
            Self::MissingSpans => write!(f, "pcw-parallel mask requires demonstration spans"),
            Self::EmptySequence => write!(f, "empty token sequence"),
            Self::TokenOutOfRange { token, vocab } => {
                write!(f, "token id {token} out of range for vocab size {vocab}")
            }
            Self::SequenceTooLong { position, max_pos } => {
                write!(f, "position {position} exceeds max positions {max_pos}")
            }
            Self::LossDisconnected => {
                write!(f, "loss node was not produced by these parameters")
            }
            Self::CoeffLengthMismatch { expected, got } => {
                write!(f, "coefficient length {got} does not match K = {expected}")
            }
            Self::PrefixTooLong { len, max_pos } => {
                write!(f, "prefix length {len} exceeds max positions {max_pos}")
            }
        }
    }
}

impl std::error::Error for ModelError {}

/// Greedy decode after a prefix ending in SEP_Y: argmax per step (ties to
/// the lowest token id) until EOD or `max_label_len` tokens. The returned
/// tokens exclude the terminating EOD.
pub fn generate_label(
    params: &ModelParams,
    prefix: &[u32],
    max_label_len: usize,
) -> Result<Vec<u32>, ModelError> {
    if prefix.len() + max_label_len > params.dims.max_pos {
        return Err(ModelError::PrefixTooLong {
            len: prefix.len() + max_label_len,
            max_pos: params.dims.max_pos,
        });
    }
    let mask = MaskSpec::causal_full();
    let mut tokens = prefix.to_vec();
    let mut out = Vec::new();
    for _ in 0..max_label_len {
        let logits = forward(params, &tokens, &mask)?;
        let row = logits.row(logits.rows - 1);
        let mut best = 0usize;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        if best as u32 == EOD {
            break;
        }
        out.push(best as u32);
        tokens.push(best as u32);
    }
    Ok(out)
}
