//! The reweighting and differentiated-objective math over loss traces:
//! windowing, importance sampling, sampling loss, reward, cumulative
//! advantage, and the combined sequence objective.

use serde::{Deserialize, Serialize};

use crate::model::LossTrace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    DrIcl,
    MetaIcl,
    It,
}

impl std::str::FromStr for TrainMode {
    type Err = ObjectiveError;

    fn from_str(s: &str) -> Result<Self, ObjectiveError> {
        match s {
            "dricl" => Ok(Self::DrIcl),
            "metaicl" => Ok(Self::MetaIcl),
            "it" => Ok(Self::It),
            _ => Err(ObjectiveError::UnknownMode(s.to_string())),
        }
    }
}

/// Objective hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DrIclConfig {
    /// Many-/zero-shot trade-off in [-1, 1].
    pub alpha: f64,
    /// Reward temperature in nats; larger values flatten the advantages.
    pub gamma: f64,
    /// Reweighting window size W.
    pub window_size: usize,
    /// Demonstrations sampled from the preceding window, |S| <= W.
    pub sample_size: usize,
    /// Rewards are clipped to +-reward_clip nats before exponentiation,
    /// bounding every advantage in [exp(-clip/gamma), exp(clip/gamma)].
    pub reward_clip: f64,
    pub mode: TrainMode,
}

impl Default for DrIclConfig {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            gamma: 11.0,
            window_size: 10,
            sample_size: 1,
            reward_clip: 55.0,
            mode: TrainMode::DrIcl,
        }
    }
}

impl DrIclConfig {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if !(-1.0..=1.0).contains(&self.alpha) {
            return Err(ObjectiveError::BadHyper("alpha must be in [-1, 1]"));
        }
        if !(self.gamma > 0.0) {
            return Err(ObjectiveError::BadHyper("gamma must be positive"));
        }
        if self.window_size < 1 {
            return Err(ObjectiveError::BadHyper("window_size must be >= 1"));
        }
        if self.sample_size < 1 || self.sample_size > self.window_size {
            return Err(ObjectiveError::BadHyper(
                "sample_size must satisfy 1 <= S <= W",
            ));
        }
        if !(self.reward_clip > 0.0) {
            return Err(ObjectiveError::BadHyper("reward_clip must be positive"));
        }
        Ok(())
    }
}

/// Full audit of one demonstration's reweighting. Demonstration indices
/// (`k` and `sampled_indices`) are 1-based. When no sampling happens —
/// window 0, or a mode without local reweighting — `sampled_indices` is
/// empty, sampling_loss and reward are 0, and the advantage is exactly 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageRecord {
    pub k: usize,
    pub window: usize,
    pub sampled_indices: Vec<usize>,
    pub sampling_loss: f64,
    pub reward: f64,
    pub advantage: f64,
}

impl AdvantageRecord {
    fn neutral(k: usize, window: usize) -> Self {
        Self {
            k,
            window,
            sampled_indices: Vec::new(),
            sampling_loss: 0.0,
            reward: 0.0,
            advantage: 1.0,
        }
    }
}

/// Gaussian-vs-uniform importance weights over one sampling window.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceModel {
    pub mean: f64,
    pub std_dev: f64,
    /// (1-based demonstration index, weight), in ascending index order.
    pub weights: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ObjectiveError {
    UnknownMode(String),
    BadHyper(&'static str),
    EmptySamplingWindow { k: usize },
    EmptySelection,
    LengthMismatch { expected: usize, got: usize },
    EmptyTrace,
}

impl std::fmt::Display for ObjectiveError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::UnknownMode(s) => write!(f, "unknown mode: {s} (expected dricl|metaicl|it)"),
            Self::BadHyper(why) => write!(f, "invalid hyperparameter: {why}"),
            Self::EmptySamplingWindow { k } => {
                write!(f, "demonstration {k} has an empty sampling window")
            }
            Self::EmptySelection => write!(f, "sampling loss over an empty selection"),
            Self::LengthMismatch { expected, got } => {
                write!(f, "expected {expected} values, got {got}")
            }
            Self::EmptyTrace => write!(f, "trace has no demonstrations"),
        }
    }
}

impl std::error::Error for ObjectiveError {}

/// 0-based reweighting window of the 1-based demonstration index k:
/// window w covers demonstrations wW+1 ..= (w+1)W, so w = floor((k-1)/W).
pub fn window_index(k: usize, window_size: usize) -> usize {
    debug_assert!(k >= 1 && window_size >= 1);
    (k - 1) / window_size
}

/// 1-based demonstration indices of window w (full by construction for
/// every w >= 0 that precedes an occupied window).
fn window_members(w: usize, window_size: usize) -> std::ops::RangeInclusive<usize> {
    (w * window_size + 1)..=((w + 1) * window_size)
}

/// Fits a Gaussian to the sampling window (window w-1) of reweighting
/// window w and weighs each member by the density ratio against the
/// uniform density over the window's loss range. A degenerate window
/// (sigma < 1e-12) gets all-equal weights.
pub fn importance_weights(
    trace: &LossTrace,
    w: usize,
    _cfg: &DrIclConfig,
) -> Result<ImportanceModel, ObjectiveError> {
    if w < 1 {
        return Err(ObjectiveError::EmptySamplingWindow { k: 0 });
    }
    let members: Vec<usize> = window_members(w - 1, _cfg.window_size).collect();
    if members.is_empty() || *members.last().unwrap() > trace.k() {
        return Err(ObjectiveError::EmptySamplingWindow { k: w });
    }
    let losses: Vec<f64> = members.iter().map(|&i| trace.losses[i - 1]).collect();
    let n = losses.len() as f64;
    let mean = losses.iter().sum::<f64>() / n;
    let var = losses.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>() / n;
    let std_dev = var.sqrt();

    let weights = if std_dev < 1e-12 {
        members.iter().map(|&i| (i, 1.0)).collect()
    } else {
        let min = losses.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = losses.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let range = max - min;
        let norm = 1.0 / (std_dev * (2.0 * std::f64::consts::PI).sqrt());
        members
            .iter()
            .zip(&losses)
            .map(|(&i, &l)| {
                let z = (l - mean) / std_dev;
                let p = norm * (-0.5 * z * z).exp();
                (i, p * range)
            })
            .collect()
    };
    Ok(ImportanceModel { mean, std_dev, weights })
}

/// Indices of the min(S, window size) largest weights; exact ties go to
/// the lowest demonstration index.
pub fn select_samples(model: &ImportanceModel, sample_size: usize) -> Vec<usize> {
    let take = sample_size.min(model.weights.len());
    let mut chosen: Vec<bool> = vec![false; model.weights.len()];
    let mut out = Vec::with_capacity(take);
    for _ in 0..take {
        let mut best: Option<usize> = None;
        for (slot, &(_, w)) in model.weights.iter().enumerate() {
            if chosen[slot] {
                continue;
            }
            // strict > keeps the earliest index on exact ties
            match best {
                None => best = Some(slot),
                Some(b) if w > model.weights[b].1 => best = Some(slot),
                _ => {}
            }
        }
        let slot = best.expect("take <= weights.len()");
        chosen[slot] = true;
        out.push(model.weights[slot].0);
    }
    out
}

/// Mean many-shot loss over the selected demonstrations.
pub fn sampling_loss(trace: &LossTrace, sampled: &[usize]) -> Result<f64, ObjectiveError> {
    if sampled.is_empty() {
        return Err(ObjectiveError::EmptySelection);
    }
    let sum: f64 = sampled.iter().map(|&i| trace.losses[i - 1]).sum();
    Ok(sum / sampled.len() as f64)
}

/// R_k: how much worse the model did at position k than on the sampled
/// reference demonstrations.
pub fn reward(loss_k: f64, l_sampling: f64) -> f64 {
    loss_k - l_sampling
}

/// A_k = exp(clip(R_k) / gamma).
pub fn advantage(reward: f64, cfg: &DrIclConfig) -> f64 {
    (reward.clamp(-cfg.reward_clip, cfg.reward_clip) / cfg.gamma).exp()
}

/// (1/K) sum_k L[k] * A[k]. The advantages act as constants; gradients of
/// the result with respect to model parameters flow only through L.
pub fn reweighted_many_shot_loss(
    trace: &LossTrace,
    advantages: &[f64],
) -> Result<f64, ObjectiveError> {
    if advantages.len() != trace.k() {
        return Err(ObjectiveError::LengthMismatch {
            expected: trace.k(),
            got: advantages.len(),
        });
    }
    let sum: f64 = trace
        .losses
        .iter()
        .zip(advantages)
        .map(|(l, a)| l * a)
        .sum();
    Ok(sum / trace.k() as f64)
}

/// L_diff = (1 + alpha) * L_many + (1 - alpha) * L_zero.
pub fn differentiated_loss(l_many: f64, l_zero: f64, alpha: f64) -> f64 {
    (1.0 + alpha) * l_many + (1.0 - alpha) * l_zero
}

/// The scalar objective for one sequence plus the constant coefficient
/// each per-demonstration NLL carries in its gradient. The coefficients
/// bake in the frozen advantages, so differentiating the weighted NLLs
/// with these constants is exactly the stop-gradient objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveNode {
    /// The training objective value for the configured mode.
    pub value: f64,
    /// Advantage-weighted many-shot mean (dricl) or plain mean (others).
    pub l_many: f64,
    /// Plain zero-shot mean.
    pub l_zero: f64,
    pub many_coeffs: Vec<f64>,
    pub zero_coeffs: Vec<f64>,
}

/// Runs the full per-sequence pipeline for the configured mode:
/// windows, importance sampling, sampling loss, reward, advantage,
/// reweighted many-shot mean, and the differentiated combination.
/// Advantage records come back for every k; positions that sampled
/// nothing carry the neutral record.
pub fn compute_sequence_objective(
    many: &LossTrace,
    zero: &LossTrace,
    cfg: &DrIclConfig,
) -> Result<(ObjectiveNode, Vec<AdvantageRecord>), ObjectiveError> {
    cfg.validate()?;
    let k_total = many.k();
    if k_total == 0 {
        return Err(ObjectiveError::EmptyTrace);
    }
    if zero.k() != k_total {
        return Err(ObjectiveError::LengthMismatch {
            expected: k_total,
            got: zero.k(),
        });
    }

    let mut records = Vec::with_capacity(k_total);
    for k in 1..=k_total {
        let w = window_index(k, cfg.window_size);
        if w == 0 || cfg.mode != TrainMode::DrIcl {
            records.push(AdvantageRecord::neutral(k, w));
            continue;
        }
        let model = importance_weights(many, w, cfg)?;
        let sampled = select_samples(&model, cfg.sample_size);
        let l_sampling = sampling_loss(many, &sampled)?;
        let r = reward(many.losses[k - 1], l_sampling);
        records.push(AdvantageRecord {
            k,
            window: w,
            sampled_indices: sampled,
            sampling_loss: l_sampling,
            reward: r,
            advantage: advantage(r, cfg),
        });
    }

    let advantages: Vec<f64> = records.iter().map(|r| r.advantage).collect();
    let l_many_weighted = reweighted_many_shot_loss(many, &advantages)?;
    let l_many_plain = many.mean();
    let l_zero = zero.mean();
    let kf = k_total as f64;

    let node = match cfg.mode {
        TrainMode::DrIcl => ObjectiveNode {
            value: differentiated_loss(l_many_weighted, l_zero, cfg.alpha),
            l_many: l_many_weighted,
            l_zero,
            many_coeffs: advantages
                .iter()
                .map(|a| (1.0 + cfg.alpha) * a / kf)
                .collect(),
            zero_coeffs: vec![(1.0 - cfg.alpha) / kf; k_total],
        },
        TrainMode::MetaIcl => ObjectiveNode {
            value: l_many_plain,
            l_many: l_many_plain,
            l_zero,
            many_coeffs: vec![1.0 / kf; k_total],
            zero_coeffs: vec![0.0; k_total],
        },
        TrainMode::It => ObjectiveNode {
            value: l_zero,
            l_many: l_many_plain,
            l_zero,
            many_coeffs: vec![0.0; k_total],
            zero_coeffs: vec![1.0 / kf; k_total],
        },
    };
    Ok((node, records))
}
