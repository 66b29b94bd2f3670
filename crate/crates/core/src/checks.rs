//! Self-contained verification suites pairing the engine against the
//! brute-force oracle: advantage replay, parallel-context mask
//! equivalence, forward-pass agreement, and gradient checking. Each suite
//! generates its own fixtures from a base seed and reports the worst
//! observed error.

use crate::corpus::{generate_synthetic_tasks, pack_sequence, TaskFamily, Vocabulary};
use crate::derive_seed;
use crate::model::{
    build_mask, forward, forward_cached, grad, per_demo_nll, ContextMode,
    LossNode, LossTerm, MaskMode, ModelDims, ModelParams,
};
use crate::objective::compute_sequence_objective;
use crate::oracle::{self, max_rel_err};
use crate::par;

/// Deliberate bugs the check harness can inject into the engine side to
/// prove the replay suite actually detects divergence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultInjection {
    None,
    /// Recompute advantages without the reward clip.
    MissingClip,
}

impl std::str::FromStr for FaultInjection {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "none" => Ok(Self::None),
            "missing-clip" => Ok(Self::MissingClip),
            other => Err(format!("unknown fault: {other} (expected none|missing-clip)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub max_err: f64,
    pub tolerance: f64,
    pub cases: usize,
    /// Seed of the first failing fixture, when any.
    pub failing_seed: Option<u64>,
}

impl SuiteResult {
    pub fn line(&self) -> String {
        format!(
            "{} {:<10} cases={:<5} max_err={:.3e} tol={:.1e}{}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.cases,
            self.max_err,
            self.tolerance,
            match self.failing_seed {
                Some(s) => format!(" failing_seed={s}"),
                None => String::new(),
            }
        )
    }
}

/// Engine advantage records vs oracle replay over seeded random traces,
/// field by field at 1e-12 relative error.
pub fn run_advantage_suite(fixtures: usize, base_seed: u64, fault: FaultInjection) -> SuiteResult {
    let tolerance = 1e-12;
    let seeds: Vec<u64> = (0..fixtures as u64).map(|i| derive_seed(base_seed, i)).collect();
    let errs: Vec<(f64, bool)> = par::par_map(&seeds, |&seed| {
        let fx = oracle::fixture(seed);
        let trace = crate::model::LossTrace {
            sequence_id: format!("fixture-{seed}"),
            mode: ContextMode::ManyShot,
            losses: fx.losses.clone(),
        };
        let zero = crate::model::LossTrace {
            sequence_id: trace.sequence_id.clone(),
            mode: ContextMode::ZeroShot,
            losses: fx.losses.clone(),
        };
        let (_, mut engine) = compute_sequence_objective(&trace, &zero, &fx.cfg)
            .expect("fixture configs are valid");
        if fault == FaultInjection::MissingClip {
            for rec in &mut engine {
                if !rec.sampled_indices.is_empty() {
                    rec.advantage = (rec.reward / fx.cfg.gamma).exp();
                }
            }
        }
        let reference = oracle::replay_advantages(&fx);
        let mut worst = 0.0f64;
        let mut structural_mismatch = false;
        for (e, r) in engine.iter().zip(&reference) {
            if e.k != r.k || e.window != r.window || e.sampled_indices != r.sampled_indices {
                structural_mismatch = true;
            }
            for (a, b) in [
                (e.sampling_loss, r.sampling_loss),
                (e.reward, r.reward),
                (e.advantage, r.advantage),
            ] {
                let err = (a - b).abs() / a.abs().max(b.abs()).max(1e-30);
                worst = worst.max(err);
            }
        }
        (worst, structural_mismatch)
    });

    let mut max_err = 0.0f64;
    let mut failing_seed = None;
    for (seed, (err, structural)) in seeds.iter().zip(&errs) {
        max_err = max_err.max(*err);
        if (*structural || *err > tolerance) && failing_seed.is_none() {
            failing_seed = Some(*seed);
        }
    }
    SuiteResult {
        name: "advantage",
        passed: failing_seed.is_none(),
        max_err,
        tolerance,
        cases: fixtures,
        failing_seed,
    }
}

fn random_sequence(seed: u64, k_max: usize) -> (crate::corpus::PackedSequence, Vocabulary) {
    let families = [
        TaskFamily::LabelPermutation { num_classes: 5 },
        TaskFamily::KeyValueLookup { num_keys: 6 },
        TaskFamily::ModularArithmetic { modulus: 7 },
        TaskFamily::PatternCopy { length: 3 },
    ];
    let fam = families[(seed % 4) as usize];
    let set = generate_synthetic_tasks(fam, 24, derive_seed(seed, 0xda7a)).unwrap();
    let vocab = Vocabulary::build(&[&set.train]);
    let k_target = 1 + (derive_seed(seed, 0x6e) as usize % k_max);
    let seq = pack_sequence(&set.train, k_target, 4096, &vocab, derive_seed(seed, 0x9e)).unwrap();
    (seq, vocab)
}

/// Zero-shot losses from one pcw-parallel pass vs the standalone
/// "instruction + demonstration" computation, |delta| <= 1e-9.
pub fn run_mask_equivalence_suite(sequences: usize, base_seed: u64) -> SuiteResult {
    let tolerance = 1e-9;
    let seeds: Vec<u64> = (0..sequences as u64).map(|i| derive_seed(base_seed, 101 + i)).collect();
    let errs: Vec<f64> = par::par_map(&seeds, |&seed| {
        let (seq, vocab) = random_sequence(seed, 12);
        let dims = ModelDims::new(vocab.size(), 16, 2, 2, 4096);
        let params = ModelParams::init(dims, derive_seed(seed, 0x0de1)).unwrap();
        let zero = per_demo_nll(&params, &seq, ContextMode::ZeroShot).unwrap();
        let mut worst = 0.0f64;
        for k in 1..=seq.k() {
            let alone = seq.standalone(k);
            let alone_trace = per_demo_nll(&params, &alone, ContextMode::ManyShot).unwrap();
            worst = worst.max((zero.losses[k - 1] - alone_trace.losses[0]).abs());
        }
        worst
    });
    summarize("maskequiv", &seeds, &errs, tolerance)
}

/// Engine forward vs the oracle's naive loop re-implementation, both
/// masks, elementwise |delta| <= 1e-9.
pub fn run_forward_suite(cases: usize, base_seed: u64) -> SuiteResult {
    let tolerance = 1e-9;
    let seeds: Vec<u64> = (0..cases as u64).map(|i| derive_seed(base_seed, 2001 + i)).collect();
    let errs: Vec<f64> = par::par_map(&seeds, |&seed| {
        let (seq, vocab) = random_sequence(seed, 6);
        let dims = ModelDims::new(vocab.size(), 16, 1, 2, 4096);
        let params = ModelParams::init(dims, derive_seed(seed, 0xf0)).unwrap();
        let mut worst = 0.0f64;
        for mode in [MaskMode::CausalFull, MaskMode::PcwParallel] {
            let mask = build_mask(&seq, mode).unwrap();
            let engine = forward(&params, &seq.token_ids, &mask).unwrap();
            let naive = oracle::naive_forward(&params, &seq.token_ids, &mask).unwrap();
            for (t, row) in naive.iter().enumerate() {
                for (v, &nv) in engine.row(t).iter().zip(row) {
                    worst = worst.max((v - nv).abs());
                }
            }
        }
        worst
    });
    summarize("forward", &seeds, &errs, tolerance)
}

/// Autodiff of the full differentiated objective (advantages frozen)
/// against central finite differences on a sub-5000-parameter model,
/// max relative error (1e-3 floor) <= 1e-6.
pub fn run_gradcheck_suite(cases: usize, base_seed: u64) -> SuiteResult {
    let tolerance = 1e-6;
    let seeds: Vec<u64> = (0..cases as u64).map(|i| derive_seed(base_seed, 3001 + i)).collect();
    let errs: Vec<f64> = par::par_map(&seeds, |&seed| {
        let (seq, vocab) = random_sequence(seed, 8);
        // max_pos dominates the parameter count; 256 keeps the model
        // under the 5,000-scalar budget while fitting every fixture
        let dims = ModelDims::new(vocab.size(), 8, 1, 2, 256);
        let params = ModelParams::init(dims, derive_seed(seed, 0x96ad)).unwrap();
        assert!(params.param_count() <= 5000, "gradcheck model too large");
        let cfg = crate::objective::DrIclConfig {
            window_size: 3,
            ..Default::default()
        };

        // freeze the advantages (and therefore the coefficients) at the
        // base parameters
        let many = per_demo_nll(&params, &seq, ContextMode::ManyShot).unwrap();
        let zero = per_demo_nll(&params, &seq, ContextMode::ZeroShot).unwrap();
        let (node, _) = compute_sequence_objective(&many, &zero, &cfg).unwrap();

        let loss_frozen = |p: &ModelParams| {
            let many = per_demo_nll(p, &seq, ContextMode::ManyShot).unwrap();
            let zero = per_demo_nll(p, &seq, ContextMode::ZeroShot).unwrap();
            let m: f64 = many
                .losses
                .iter()
                .zip(&node.many_coeffs)
                .map(|(l, c)| l * c)
                .sum();
            let z: f64 = zero
                .losses
                .iter()
                .zip(&node.zero_coeffs)
                .map(|(l, c)| l * c)
                .sum();
            m + z
        };

        let mask_many = build_mask(&seq, MaskMode::CausalFull).unwrap();
        let cache_many = forward_cached(&params, &seq.token_ids, &mask_many).unwrap();
        let mask_zero = build_mask(&seq, MaskMode::PcwParallel).unwrap();
        let cache_zero = forward_cached(&params, &seq.token_ids, &mask_zero).unwrap();
        let loss_node = LossNode {
            value: node.value,
            terms: vec![
                LossTerm { cache: &cache_many, seq: &seq, coeffs: &node.many_coeffs },
                LossTerm { cache: &cache_zero, seq: &seq, coeffs: &node.zero_coeffs },
            ],
        };
        let auto = grad(&params, &loss_node).unwrap().to_flat_vec();
        // h = 5e-6: small enough that the h^2 truncation of central
        // differences sits well under the 1e-6 gate, large enough that
        // f64 roundoff stays negligible
        let fd = oracle::finite_diff_grad(&params, loss_frozen, 5e-6).unwrap();
        max_rel_err(&auto, &fd, 1e-3)
    });
    summarize("gradcheck", &seeds, &errs, tolerance)
}

fn summarize(name: &'static str, seeds: &[u64], errs: &[f64], tolerance: f64) -> SuiteResult {
    let mut max_err = 0.0f64;
    let mut failing_seed = None;
    for (seed, &err) in seeds.iter().zip(errs) {
        max_err = max_err.max(err);
        if err > tolerance && failing_seed.is_none() {
            failing_seed = Some(*seed);
        }
    }
    SuiteResult {
        name,
        passed: failing_seed.is_none(),
        max_err,
        tolerance,
        cases: seeds.len(),
        failing_seed,
    }
}

/// Runs the named suite ("advantage", "maskequiv", "forward",
/// "gradcheck") or all of them, sized for an interactive check.
pub fn run_suites(which: Option<&str>, base_seed: u64, fault: FaultInjection) -> Vec<SuiteResult> {
    let mut out = Vec::new();
    let all = which.is_none();
    let is = |name: &str| which == Some(name);
    if all || is("advantage") {
        out.push(run_advantage_suite(1000, base_seed, fault));
    }
    if all || is("maskequiv") {
        out.push(run_mask_equivalence_suite(50, base_seed));
    }
    if all || is("forward") {
        out.push(run_forward_suite(25, base_seed));
    }
    if all || is("gradcheck") {
        out.push(run_gradcheck_suite(2, base_seed));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn advantage_suite_passes_clean() {
        let r = run_advantage_suite(100, 7, FaultInjection::None);
        assert!(r.passed, "{}", r.line());
        assert!(r.max_err <= 1e-12);
    }

    #[test]
    fn injected_clip_bug_is_caught() {
        let r = run_advantage_suite(200, 7, FaultInjection::MissingClip);
        assert!(!r.passed);
        assert!(r.failing_seed.is_some());
    }

    #[test]
    fn forward_suite_small() {
        let r = run_forward_suite(4, 11);
        assert!(r.passed, "{}", r.line());
    }

    #[test]
    fn mask_suite_small() {
        let r = run_mask_equivalence_suite(4, 13);
        assert!(r.passed, "{}", r.line());
    }

    #[test]
    fn gradcheck_suite_small() {
        let r = run_gradcheck_suite(1, 17);
        assert!(r.passed, "{}", r.line());
    }
}
