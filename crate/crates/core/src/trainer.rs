//! The training loop: per-sequence objectives in the selected mode,
//! optimizer updates with frozen advantages, checkpoints, and a
//! replayable step log.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{PackedSequence, Vocabulary};
use crate::derive_seed;
use crate::model::{
    build_mask, forward_cached, grad, save_checkpoint, trace_from_cache, ContextMode,
    ForwardCache, Gradients, LossNode, LossTerm, ModelError, ModelParams, Precision,
};
use crate::objective::{
    compute_sequence_objective, AdvantageRecord, DrIclConfig, ObjectiveError,
};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            momentum: 0.0,
            weight_decay: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            learning_rate,
            momentum: 0.0,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub dricl: DrIclConfig,
    pub optimizer: OptimizerConfig,
    /// Passes over the corpus.
    pub iterations: usize,
    pub batch_size: usize,
    pub precision: Precision,
    pub seed: u64,
    /// Checkpoint every this many optimizer steps; 0 disables periodic
    /// checkpoints (the final one is always written when a dir is given).
    pub checkpoint_every: usize,
    /// Reshuffle the corpus each pass (seeded).
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dricl: DrIclConfig::default(),
            optimizer: OptimizerConfig::default(),
            iterations: 1,
            batch_size: 1,
            precision: Precision::F64,
            seed: 0,
            checkpoint_every: 0,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.dricl.validate().map_err(TrainError::Objective)?;
        if self.iterations < 1 {
            return Err(TrainError::BadConfig("iterations must be >= 1"));
        }
        if self.batch_size < 1 {
            return Err(TrainError::BadConfig("batch_size must be >= 1"));
        }
        if !(self.optimizer.learning_rate > 0.0) && self.optimizer.learning_rate != 0.0 {
            return Err(TrainError::BadConfig("learning rate must be >= 0"));
        }
        Ok(())
    }
}

/// Everything Algorithm-style intermediates produce for one sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub sequence_id: String,
    pub k: usize,
    pub many_losses: Vec<f64>,
    pub zero_losses: Vec<f64>,
    pub advantage_records: Vec<AdvantageRecord>,
    pub l_diff: f64,
}

/// Append-only training log: one record per processed sequence plus the
/// effective config echoed up front.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub config: TrainConfig,
    pub steps: Vec<StepRecord>,
}

impl TrainLog {
    /// Writes the log as line-delimited JSON: a header record with the
    /// config, then one line per step record.
    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let mut f = std::fs::File::create(path).map_err(|e| TrainError::Io(e.to_string()))?;
        let header = serde_json::json!({ "config": &self.config });
        writeln!(f, "{header}").map_err(|e| TrainError::Io(e.to_string()))?;
        for rec in &self.steps {
            writeln!(f, "{}", serde_json::to_string(rec).expect("serializable"))
                .map_err(|e| TrainError::Io(e.to_string()))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let body =
            std::fs::read_to_string(path).map_err(|e| TrainError::Io(e.to_string()))?;
        let mut lines = body.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or(TrainError::Io("empty log".into()))?;
        #[derive(Deserialize)]
        struct Header {
            config: TrainConfig,
        }
        let header: Header = serde_json::from_str(header)
            .map_err(|e| TrainError::Io(format!("bad header: {e}")))?;
        let mut steps = Vec::new();
        for line in lines {
            steps.push(
                serde_json::from_str(line)
                    .map_err(|e| TrainError::Io(format!("bad record: {e}")))?,
            );
        }
        Ok(Self { config: header.config, steps })
    }

    /// Writes the flat advantage audit log: one line per (sequence, k)
    /// carrying the demonstration's many-shot loss next to its record so
    /// the whole pipeline can be replayed offline.
    pub fn save_audit_log(&self, path: &Path) -> Result<(), TrainError> {
        let mut f = std::fs::File::create(path).map_err(|e| TrainError::Io(e.to_string()))?;
        let header = serde_json::json!({ "config": &self.config.dricl });
        writeln!(f, "{header}").map_err(|e| TrainError::Io(e.to_string()))?;
        for rec in &self.steps {
            for adv in &rec.advantage_records {
                let line = serde_json::json!({
                    "step": rec.step,
                    "sequence_id": rec.sequence_id,
                    "k": adv.k,
                    "loss": rec.many_losses[adv.k - 1],
                    "window": adv.window,
                    "sampled_indices": adv.sampled_indices,
                    "sampling_loss": adv.sampling_loss,
                    "reward": adv.reward,
                    "advantage": adv.advantage,
                });
                writeln!(f, "{line}").map_err(|e| TrainError::Io(e.to_string()))?;
            }
        }
        Ok(())
    }
}

#[derive(Debug)]
pub enum TrainError {
    BadConfig(&'static str),
    EmptyCorpus,
    Objective(ObjectiveError),
    Model(ModelError),
    NonFiniteLoss { step: usize, sequence_id: String },
    Io(String),
}

impl std::fmt::Display for TrainError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::BadConfig(why) => write!(f, "invalid train config: {why}"),
            Self::EmptyCorpus => write!(f, "training corpus is empty"),
            Self::Objective(e) => write!(f, "objective error: {e}"),
            Self::Model(e) => write!(f, "model error: {e}"),
            Self::NonFiniteLoss { step, sequence_id } => {
                write!(f, "non-finite loss at step {step} on sequence {sequence_id}; aborting")
            }
            Self::Io(msg) => write!(f, "io error: {msg}"),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        Self::Model(e)
    }
}

impl From<ObjectiveError> for TrainError {
    fn from(e: ObjectiveError) -> Self {
        Self::Objective(e)
    }
}

/// Adam / SGD state, kept flat in the parameters' documented order.
pub struct Optimizer {
    cfg: OptimizerConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: usize,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig, params: &ModelParams) -> Self {
        let n = params.param_count();
        Self {
            cfg,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// One in-place update. Bumps the params revision so stale forward
    /// caches can be detected.
    pub fn apply(&mut self, params: &mut ModelParams, grads: &Gradients) {
        self.t += 1;
        let g_flat = grads.to_flat_vec();
        let lr = self.cfg.learning_rate;
        let wd = self.cfg.weight_decay;
        let mut i = 0;
        match self.cfg.kind {
            OptimizerKind::Sgd => {
                let mu = self.cfg.momentum;
                params.visit_mut(|arr| {
                    for p in arr {
                        let g = g_flat[i] + wd * *p;
                        if mu != 0.0 {
                            self.m[i] = mu * self.m[i] + g;
                            *p -= lr * self.m[i];
                        } else {
                            *p -= lr * g;
                        }
                        i += 1;
                    }
                });
            }
            OptimizerKind::Adam => {
                let (b1, b2, eps) = (self.cfg.beta1, self.cfg.beta2, self.cfg.eps);
                let bc1 = 1.0 - b1.powi(self.t as i32);
                let bc2 = 1.0 - b2.powi(self.t as i32);
                params.visit_mut(|arr| {
                    for p in arr {
                        let g = g_flat[i] + wd * *p;
                        self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
                        self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
                        *p -= lr * (self.m[i] / bc1) / ((self.v[i] / bc2).sqrt() + eps);
                        i += 1;
                    }
                });
            }
        }
        params.revision += 1;
    }
}

/// Outcome of a full training run.
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: TrainLog,
}

struct SeqResult {
    cache_many: ForwardCache,
    cache_zero: ForwardCache,
    record: StepRecord,
    many_coeffs: Vec<f64>,
    zero_coeffs: Vec<f64>,
}

fn process_sequence(
    params: &ModelParams,
    seq: &PackedSequence,
    sequence_id: &str,
    step: usize,
    cfg: &DrIclConfig,
) -> Result<SeqResult, TrainError> {
    let mask_many = build_mask(seq, ContextMode::ManyShot.mask_mode())?;
    let cache_many = forward_cached(params, &seq.token_ids, &mask_many)?;
    let mut trace_many = trace_from_cache(&cache_many, seq, ContextMode::ManyShot);
    trace_many.sequence_id = sequence_id.to_string();

    let mask_zero = build_mask(seq, ContextMode::ZeroShot.mask_mode())?;
    let cache_zero = forward_cached(params, &seq.token_ids, &mask_zero)?;
    let mut trace_zero = trace_from_cache(&cache_zero, seq, ContextMode::ZeroShot);
    trace_zero.sequence_id = sequence_id.to_string();

    let (node, records) = compute_sequence_objective(&trace_many, &trace_zero, cfg)?;
    if !node.value.is_finite() {
        return Err(TrainError::NonFiniteLoss {
            step,
            sequence_id: sequence_id.to_string(),
        });
    }
    Ok(SeqResult {
        cache_many,
        cache_zero,
        record: StepRecord {
            step,
            sequence_id: sequence_id.to_string(),
            k: seq.k(),
            many_losses: trace_many.losses,
            zero_losses: trace_zero.losses,
            advantage_records: records,
            l_diff: node.value,
        },
        many_coeffs: node.many_coeffs,
        zero_coeffs: node.zero_coeffs,
    })
}

/// One optimizer step over a single sequence. Returns the step record;
/// the applied gradient is exactly the reverse-mode gradient of the
/// logged objective with the logged advantages held constant.
pub fn train_step(
    params: &mut ModelParams,
    opt: &mut Optimizer,
    seq: &PackedSequence,
    sequence_id: &str,
    step: usize,
    cfg: &DrIclConfig,
) -> Result<StepRecord, TrainError> {
    let res = process_sequence(params, seq, sequence_id, step, cfg)?;
    let node = LossNode {
        value: res.record.l_diff,
        terms: vec![
            LossTerm { cache: &res.cache_many, seq, coeffs: &res.many_coeffs },
            LossTerm { cache: &res.cache_zero, seq, coeffs: &res.zero_coeffs },
        ],
    };
    let grads = grad(params, &node)?;
    opt.apply(params, &grads);
    Ok(res.record)
}

/// Runs the full loop: `iterations` passes over the corpus, batches of
/// `batch_size` sequences per optimizer step (forward passes of a batch
/// run in parallel; gradients reduce in corpus order), checkpoints at the
/// configured cadence.
pub fn train(
    cfg: &TrainConfig,
    corpus: &[PackedSequence],
    init: ModelParams,
    vocab: &Vocabulary,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let mut params = init;
    let mut opt = Optimizer::new(cfg.optimizer, &params);
    let mut log = TrainLog { config: cfg.clone(), steps: Vec::new() };
    let mut step = 0usize;

    for iter in 0..cfg.iterations {
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        if cfg.shuffle {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x0e70 + iter as u64));
            order.shuffle(&mut rng);
        }
        for batch in order.chunks(cfg.batch_size) {
            step += 1;
            let results: Vec<Result<SeqResult, TrainError>> = par::par_map(batch, |&idx| {
                let id = format!("{}#{idx}", corpus[idx].task_id);
                process_sequence(&params, &corpus[idx], &id, step, &cfg.dricl)
            });
            let mut batch_results = Vec::with_capacity(results.len());
            for r in results {
                batch_results.push(r?);
            }
            // fixed reduction order: mean of per-sequence gradients in
            // batch order, regardless of worker count
            let scale = 1.0 / batch_results.len() as f64;
            let mut total = Gradients::zeros_like(&params);
            for (res, &idx) in batch_results.iter().zip(batch) {
                let node = LossNode {
                    value: res.record.l_diff,
                    terms: vec![
                        LossTerm {
                            cache: &res.cache_many,
                            seq: &corpus[idx],
                            coeffs: &res.many_coeffs,
                        },
                        LossTerm {
                            cache: &res.cache_zero,
                            seq: &corpus[idx],
                            coeffs: &res.zero_coeffs,
                        },
                    ],
                };
                total.add_assign(&grad(&params, &node)?);
            }
            total.scale(scale);
            opt.apply(&mut params, &total);
            for res in batch_results {
                log.steps.push(res.record);
            }

            if let (Some(dir), true) = (checkpoint_dir, cfg.checkpoint_every > 0) {
                if step % cfg.checkpoint_every == 0 {
                    let path = checkpoint_path(dir, step);
                    save_checkpoint(&params, vocab, cfg.precision, &path)
                        .map_err(|e| TrainError::Io(e.to_string()))?;
                }
            }
        }
    }

    if let Some(dir) = checkpoint_dir {
        let path = dir.join("checkpoint_final.bin");
        save_checkpoint(&params, vocab, cfg.precision, &path)
            .map_err(|e| TrainError::Io(e.to_string()))?;
    }
    Ok(TrainOutcome { params, log })
}

pub fn checkpoint_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(format!("checkpoint_step{step:06}.bin"))
}
