//! The k-shot evaluation protocol: sweeps, exact-match accuracy, AVG/MAX
//! summaries, and variance analyses.

use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{pack_query, CorpusError, TaskPool, Vocabulary};
use crate::derive_seed;
use crate::model::{generate_label, ModelError, ModelParams};
use crate::par;
use crate::trainer::TrainLog;

/// Per-k accuracy with summary statistics over the k grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task_id: String,
    /// (k, exact-match accuracy) for every k that packed successfully.
    pub points: Vec<(usize, f64)>,
    pub avg: f64,
    pub max: f64,
    pub variance: f64,
    /// (k, reason) for grid entries that could not be evaluated.
    pub skipped: Vec<(usize, String)>,
}

#[derive(Debug)]
pub enum EvalError {
    Corpus(CorpusError),
    Model(ModelError),
    TooFewValues(usize),
    EmptyBucket { bucket: usize },
    EmptyLog,
    BadGrid(&'static str),
    Io(String),
}

impl std::fmt::Display for EvalError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Corpus(e) => write!(f, "corpus error: {e}"),
            Self::Model(e) => write!(f, "model error: {e}"),
            Self::TooFewValues(n) => write!(f, "variance needs >= 2 values, got {n}"),
            Self::EmptyBucket { bucket } => write!(f, "progress bucket {bucket} is empty"),
            Self::EmptyLog => write!(f, "train log has no steps"),
            Self::BadGrid(why) => write!(f, "bad evaluation grid: {why}"),
            Self::Io(msg) => write!(f, "io error: {msg}"),
        }
    }
}

impl std::error::Error for EvalError {}

impl From<CorpusError> for EvalError {
    fn from(e: CorpusError) -> Self {
        Self::Corpus(e)
    }
}

impl From<ModelError> for EvalError {
    fn from(e: ModelError) -> Self {
        Self::Model(e)
    }
}

/// Population variance (divide by N).
pub fn performance_variance(values: &[f64]) -> Result<f64, EvalError> {
    if values.len() < 2 {
        return Err(EvalError::TooFewValues(values.len()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    Ok(values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n)
}

struct QueryPlan {
    demo_indices: Vec<usize>,
    query_index: usize,
}

/// Sweeps the k grid: for each k, `n_per_k` queries are drawn from the
/// test pool, each packed behind k seeded train-pool demonstrations, and
/// greedy-decoded until EOD or the pool's longest label length. Accuracy
/// is exact string match. k = 0 packs instruction + query only.
///
/// All sampling happens up front from one seeded stream, so the decode
/// work can fan out in parallel without touching determinism; matches
/// reduce as integer counts.
pub fn kshot_sweep(
    params: &ModelParams,
    vocab: &Vocabulary,
    test_pool: &TaskPool,
    train_pool: &TaskPool,
    k_grid: &[usize],
    n_per_k: usize,
    budget: usize,
    seed: u64,
) -> Result<EvalReport, EvalError> {
    if k_grid.is_empty() {
        return Err(EvalError::BadGrid("empty k grid"));
    }
    if n_per_k < 1 {
        return Err(EvalError::BadGrid("n_per_k must be >= 1"));
    }
    if test_pool.examples.is_empty() || train_pool.examples.is_empty() {
        return Err(EvalError::Corpus(CorpusError::EmptyPool));
    }
    let max_label = test_pool
        .max_label_chars()
        .max(train_pool.max_label_chars());

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xe7a1));
    let mut points = Vec::new();
    let mut skipped = Vec::new();

    for &k in k_grid {
        // draw the full plan for this k before any decoding
        let mut plans = Vec::with_capacity(n_per_k);
        for _ in 0..n_per_k {
            let query_index = rng.gen_range(0..test_pool.examples.len());
            let demo_indices = if k == 0 {
                Vec::new()
            } else if train_pool.examples.len() >= k {
                let mut idx: Vec<usize> = (0..train_pool.examples.len()).collect();
                for i in 0..k {
                    let j = rng.gen_range(i..idx.len());
                    idx.swap(i, j);
                }
                idx.truncate(k);
                idx
            } else {
                (0..k)
                    .map(|_| rng.gen_range(0..train_pool.examples.len()))
                    .collect()
            };
            plans.push(QueryPlan { demo_indices, query_index });
        }

        // pack every prefix; any overflow marks this k as unpackable
        let mut prefixes = Vec::with_capacity(plans.len());
        let mut overflow = false;
        for plan in &plans {
            let demos: Vec<_> = plan
                .demo_indices
                .iter()
                .map(|&i| &train_pool.examples[i])
                .collect();
            let query = &test_pool.examples[plan.query_index];
            match pack_query(
                &test_pool.instruction_text,
                &demos,
                &query.input_text,
                budget,
                vocab,
            )? {
                Some(prefix) if prefix.len() + max_label <= params.dims.max_pos => {
                    prefixes.push((prefix, query.label_text.clone()));
                }
                _ => {
                    overflow = true;
                    break;
                }
            }
        }
        if overflow {
            skipped.push((k, "demonstrations do not fit the budget".to_string()));
            continue;
        }

        let matches: Vec<Result<bool, ModelError>> = par::par_map(&prefixes, |(prefix, gold)| {
            let tokens = generate_label(params, prefix, max_label)?;
            Ok(vocab.decode(&tokens) == *gold)
        });
        let mut hits = 0usize;
        for m in matches {
            hits += m? as usize;
        }
        points.push((k, hits as f64 / n_per_k as f64));
    }

    let accs: Vec<f64> = points.iter().map(|&(_, a)| a).collect();
    let (avg, max, variance) = if accs.is_empty() {
        (0.0, 0.0, 0.0)
    } else {
        let avg = accs.iter().sum::<f64>() / accs.len() as f64;
        let max = accs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let variance = if accs.len() >= 2 {
            performance_variance(&accs)?
        } else {
            0.0
        };
        (avg, max, variance)
    };

    Ok(EvalReport {
        task_id: test_pool.task_id.clone(),
        points,
        avg,
        max,
        variance,
        skipped,
    })
}

/// Partitions the log's steps into `n_buckets` equal progress buckets and
/// returns the population variance of all per-k many-shot losses inside
/// each bucket.
pub fn loss_variance_by_progress(log: &TrainLog, n_buckets: usize) -> Result<Vec<f64>, EvalError> {
    if log.steps.is_empty() {
        return Err(EvalError::EmptyLog);
    }
    if n_buckets < 1 {
        return Err(EvalError::BadGrid("n_buckets must be >= 1"));
    }
    let total = log.steps.len();
    let mut out = Vec::with_capacity(n_buckets);
    for b in 0..n_buckets {
        let lo = b * total / n_buckets;
        let hi = (b + 1) * total / n_buckets;
        if lo >= hi {
            return Err(EvalError::EmptyBucket { bucket: b });
        }
        let losses: Vec<f64> = log.steps[lo..hi]
            .iter()
            .flat_map(|s| s.many_losses.iter().copied())
            .collect();
        let n = losses.len() as f64;
        let mean = losses.iter().sum::<f64>() / n;
        out.push(losses.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>() / n);
    }
    Ok(out)
}

/// Writes the report as csv: a `k,accuracy` header, one row per grid
/// point, skipped entries as comments, then AVG/MAX/VAR summary rows.
pub fn write_report_csv(report: &EvalReport, path: &Path) -> Result<(), EvalError> {
    std::fs::write(path, report_to_csv(report)).map_err(|e| EvalError::Io(e.to_string()))
}

pub fn report_to_csv(report: &EvalReport) -> String {
    let mut out = String::from("k,accuracy\n");
    for (k, acc) in &report.points {
        out.push_str(&format!("{k},{acc}\n"));
    }
    for (k, reason) in &report.skipped {
        out.push_str(&format!("# skipped k={k}: {reason}\n"));
    }
    out.push_str(&format!("AVG,{}\n", report.avg));
    out.push_str(&format!("MAX,{}\n", report.max));
    out.push_str(&format!("VAR,{}\n", report.variance));
    out
}

/// Parses a csv produced by `report_to_csv`.
pub fn report_from_csv(task_id: &str, body: &str) -> Result<EvalReport, EvalError> {
    let mut points = Vec::new();
    let mut skipped = Vec::new();
    let mut avg = 0.0;
    let mut max = 0.0;
    let mut variance = 0.0;
    for line in body.lines().skip(1) {
        if let Some(rest) = line.strip_prefix("# skipped k=") {
            if let Some((k, reason)) = rest.split_once(": ") {
                skipped.push((
                    k.parse().map_err(|_| EvalError::Io("bad skip row".into()))?,
                    reason.to_string(),
                ));
            }
            continue;
        }
        let (head, value) = line
            .split_once(',')
            .ok_or_else(|| EvalError::Io(format!("bad csv row: {line}")))?;
        let value: f64 = value
            .parse()
            .map_err(|_| EvalError::Io(format!("bad csv value: {line}")))?;
        match head {
            "AVG" => avg = value,
            "MAX" => max = value,
            "VAR" => variance = value,
            k => points.push((
                k.parse()
                    .map_err(|_| EvalError::Io(format!("bad k: {line}")))?,
                value,
            )),
        }
    }
    Ok(EvalReport {
        task_id: task_id.to_string(),
        points,
        avg,
        max,
        variance,
        skipped,
    })
}

/// Plain-text side-by-side comparison of several reports over a shared
/// k grid.
pub fn side_by_side_table(reports: &[(&str, &EvalReport)]) -> String {
    let mut ks: Vec<usize> = reports
        .iter()
        .flat_map(|(_, r)| r.points.iter().map(|&(k, _)| k))
        .collect();
    ks.sort_unstable();
    ks.dedup();
    let mut out = String::from("k");
    for (name, _) in reports {
        out.push_str(&format!("\t{name}"));
    }
    out.push('\n');
    for k in ks {
        out.push_str(&k.to_string());
        for (_, r) in reports {
            match r.points.iter().find(|&&(pk, _)| pk == k) {
                Some((_, acc)) => out.push_str(&format!("\t{acc:.3}")),
                None => out.push_str("\t-"),
            }
        }
        out.push('\n');
    }
    for (label, pick) in [
        ("AVG", 0usize),
        ("MAX", 1),
        ("VAR", 2),
    ] {
        out.push_str(label);
        for (_, r) in reports {
            let v = [r.avg, r.max, r.variance][pick];
            out.push_str(&format!("\t{v:.4}"));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variance_convention_is_population() {
        // the published accuracy row whose variance output pins divide-by-N
        let row = [0.69, 0.72, 0.77, 0.77, 0.78, 0.76, 0.76, 0.76, 0.80, 0.76, 0.76];
        let var = performance_variance(&row).unwrap();
        assert!((var - 8.00e-4).abs() <= 5e-5, "var = {var:e}");
    }

    #[test]
    fn variance_basics() {
        assert_eq!(performance_variance(&[0.5, 0.5, 0.5]).unwrap(), 0.0);
        assert_eq!(performance_variance(&[0.0, 1.0]).unwrap(), 0.25);
        assert!(matches!(
            performance_variance(&[1.0]),
            Err(EvalError::TooFewValues(1))
        ));
    }

    #[test]
    fn csv_round_trip() {
        let report = EvalReport {
            task_id: "t".into(),
            points: vec![(0, 0.25), (1, 0.5), (5, 0.875)],
            avg: 0.5416666666666666,
            max: 0.875,
            variance: 0.06684027777777778,
            skipped: vec![(50, "demonstrations do not fit the budget".into())],
        };
        let csv = report_to_csv(&report);
        let back = report_from_csv("t", &csv).unwrap();
        assert_eq!(report, back);
    }

    #[test]
    fn empty_grid_report_is_header_only() {
        let report = EvalReport {
            task_id: "t".into(),
            points: vec![],
            avg: 0.0,
            max: 0.0,
            variance: 0.0,
            skipped: vec![],
        };
        let csv = report_to_csv(&report);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "k,accuracy");
        assert_eq!(lines.len(), 4); // header + AVG + MAX + VAR
    }

    #[test]
    fn side_by_side_lists_all_modes() {
        let a = EvalReport {
            task_id: "t".into(),
            points: vec![(0, 0.2), (5, 0.8)],
            avg: 0.5,
            max: 0.8,
            variance: 0.09,
            skipped: vec![],
        };
        let b = EvalReport {
            points: vec![(0, 0.3), (5, 0.6)],
            ..a.clone()
        };
        let table = side_by_side_table(&[("dricl", &a), ("metaicl", &b)]);
        assert!(table.contains("dricl\tmetaicl"));
        assert!(table.lines().count() >= 6);
    }
}
