//! Batch CLI for corpus generation, packing, training, evaluation, and
//! verification.
//!
//! Exit codes: 0 ok, 1 verification failure, 2 usage error, 3 runtime
//! abort.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use dricl_core::checks::{self, FaultInjection};
use dricl_core::corpus::{
    self, balance_corpus, generate_synthetic_tasks, inject_label_noise, kshot_histogram,
    pack_sequence, PackedSequence, Split, TaskFamily, TaskPool, Vocabulary,
};
use dricl_core::derive_seed;
use dricl_core::eval::{kshot_sweep, performance_variance, report_to_csv, write_report_csv};
use dricl_core::model::{load_checkpoint, ModelDims, ModelParams};
use dricl_core::trainer::{train, TrainError};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "dricl", version, about = "Many-shot in-context learning engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic task pools and a packed training corpus.
    GenData(GenDataArgs),
    /// Pack existing task files into a training corpus.
    Pack(PackArgs),
    /// Train a model on a packed corpus.
    Train(TrainArgs),
    /// Run the k-shot evaluation sweep against a checkpoint.
    Eval(EvalArgs),
    /// Run the oracle verification suites.
    Check(CheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Task family: label-perm[:classes] | lookup[:keys] | modular[:p] | copy[:len]
    #[arg(long)]
    family: String,
    /// Train examples per task.
    #[arg(long)]
    count: usize,
    /// Token budget per packed sequence.
    #[arg(long, default_value_t = 512)]
    budget: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of tasks to generate.
    #[arg(long, default_value_t = 8)]
    tasks: usize,
    /// Packed sequences per task.
    #[arg(long, default_value_t = 10)]
    seqs: usize,
    /// Demonstrations are drawn with k targets in 1..=k_max.
    #[arg(long, default_value_t = 20)]
    k_max: usize,
    /// Probability of replacing a train label with a wrong one.
    #[arg(long, default_value_t = 0.0)]
    label_noise: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PackArgs {
    /// Comma-separated task files (jsonl with task_id, input, label).
    #[arg(long, value_delimiter = ',')]
    tasks: Vec<PathBuf>,
    /// Override the templated instruction for every pool.
    #[arg(long)]
    instruction: Option<String>,
    #[arg(long, default_value_t = 10)]
    k_target: usize,
    #[arg(long, default_value_t = 512)]
    budget: usize,
    #[arg(long, default_value_t = 10)]
    seqs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// TOML config file; command-line flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Pool demonstrations are drawn from.
    #[arg(long)]
    train_pool: PathBuf,
    /// Pool queries are drawn from.
    #[arg(long)]
    test_pool: PathBuf,
    /// Comma-separated k grid.
    #[arg(long, value_delimiter = ',', default_values_t = [0usize, 1, 3, 5, 10])]
    k: Vec<usize>,
    /// Queries per k.
    #[arg(long, default_value_t = 50)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2048)]
    budget: usize,
    /// Instruction override; by default an instructions.json sidecar
    /// next to the pool files is consulted.
    #[arg(long)]
    instruction: Option<String>,
    /// Output csv path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CheckArgs {
    /// advantage | maskequiv | forward | gradcheck (default: all).
    #[arg(long)]
    suite: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Inject a deliberate engine bug to prove the suite detects it.
    #[arg(long, default_value = "none")]
    inject_fault: String,
}

enum CliError {
    Usage(String),
    Verification(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        Self::Runtime(e)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Verification(msg)) => {
            eprintln!("verification failure: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Pack(args) => cmd_pack(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Check(args) => cmd_check(args),
    }
}

fn ensure_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Looks up the task's instruction in an instructions.json sitting next
/// to a pool file.
fn sidecar_instruction(pool_path: &Path, task_id: &str) -> Option<String> {
    let path = pool_path.parent()?.join("instructions.json");
    let body = std::fs::read_to_string(path).ok()?;
    let map: serde_json::Value = serde_json::from_str(&body).ok()?;
    map.get(task_id)?.as_str().map(str::to_string)
}

fn cmd_gen_data(args: GenDataArgs) -> Result<(), CliError> {
    let family: TaskFamily = args
        .family
        .parse()
        .map_err(|e| CliError::Usage(format!("{e}")))?;
    if args.count < 2 {
        return Err(CliError::Usage("--count must be >= 2".into()));
    }
    ensure_dir(&args.out).map_err(CliError::Runtime)?;

    println!(
        "gen-data family={} count={} tasks={} seqs={} k_max={} budget={} seed={} label_noise={}",
        args.family, args.count, args.tasks, args.seqs, args.k_max, args.budget, args.seed,
        args.label_noise
    );

    let mut train_pools = Vec::new();
    let mut test_pools = Vec::new();
    for t in 0..args.tasks {
        let set = generate_synthetic_tasks(family, args.count, derive_seed(args.seed, t as u64))
            .map_err(|e| CliError::Runtime(e.into()))?;
        let train = if args.label_noise > 0.0 {
            inject_label_noise(&set.train, args.label_noise, derive_seed(args.seed, 0xffff + t as u64))
        } else {
            set.train
        };
        train_pools.push(train);
        test_pools.push(set.test);
    }
    let train_pools = balance_corpus(&train_pools, args.seed);

    let all_refs: Vec<&TaskPool> = train_pools.iter().chain(test_pools.iter()).collect();
    let vocab = Vocabulary::build(&all_refs);

    let mut sequences: Vec<PackedSequence> = Vec::new();
    for (t, pool) in train_pools.iter().enumerate() {
        for s in 0..args.seqs {
            let salt = (t * args.seqs + s) as u64;
            let k_target = 1 + (derive_seed(args.seed, 0x4b + salt) as usize % args.k_max);
            let seq = pack_sequence(pool, k_target, args.budget, &vocab, derive_seed(args.seed, salt))
                .map_err(|e| CliError::Runtime(e.into()))?;
            sequences.push(seq);
        }
    }

    let mut instructions = serde_json::Map::new();
    for (train, test) in train_pools.iter().zip(&test_pools) {
        let base = args.out.join(&train.task_id);
        corpus::save_task_pool(train, &base.with_extension("train.jsonl"))
            .map_err(|e| CliError::Runtime(e.into()))?;
        corpus::save_task_pool(test, &base.with_extension("test.jsonl"))
            .map_err(|e| CliError::Runtime(e.into()))?;
        instructions.insert(
            train.task_id.clone(),
            serde_json::Value::String(train.instruction_text.clone()),
        );
    }
    std::fs::write(
        args.out.join("instructions.json"),
        serde_json::to_string_pretty(&serde_json::Value::Object(instructions)).expect("json"),
    )
    .map_err(|e| CliError::Runtime(e.into()))?;
    corpus::save_packed_corpus(&sequences, &args.out.join("corpus.jsonl"))
        .map_err(|e| CliError::Runtime(e.into()))?;
    corpus::save_vocabulary(&vocab, &args.out.join("vocab.json"))
        .map_err(|e| CliError::Runtime(e.into()))?;

    println!("k-shot histogram ({} sequences):", sequences.len());
    for (k, count) in kshot_histogram(&sequences) {
        println!("  k={k:<4} {count}");
    }
    println!("wrote {}", args.out.display());
    Ok(())
}

fn cmd_pack(args: PackArgs) -> Result<(), CliError> {
    if args.tasks.is_empty() {
        return Err(CliError::Usage("--tasks requires at least one file".into()));
    }
    ensure_dir(&args.out).map_err(CliError::Runtime)?;
    let mut pools = Vec::new();
    for path in &args.tasks {
        let mut pool = corpus::load_task_pool(path, Split::Train)
            .with_context(|| format!("loading {}", path.display()))
            .map_err(CliError::Runtime)?;
        if let Some(instruction) = &args.instruction {
            pool.instruction_text = instruction.clone();
        }
        pool.validate().map_err(|e| CliError::Runtime(e.into()))?;
        pools.push(pool);
    }
    println!(
        "pack files={} k_target={} budget={} seqs={} seed={}",
        args.tasks.len(),
        args.k_target,
        args.budget,
        args.seqs,
        args.seed
    );
    let refs: Vec<&TaskPool> = pools.iter().collect();
    let vocab = Vocabulary::build(&refs);
    let mut sequences = Vec::new();
    for (t, pool) in pools.iter().enumerate() {
        for s in 0..args.seqs {
            let salt = (t * args.seqs + s) as u64;
            let seq = pack_sequence(pool, args.k_target, args.budget, &vocab, derive_seed(args.seed, salt))
                .map_err(|e| CliError::Runtime(e.into()))?;
            sequences.push(seq);
        }
    }
    corpus::save_packed_corpus(&sequences, &args.out.join("corpus.jsonl"))
        .map_err(|e| CliError::Runtime(e.into()))?;
    corpus::save_vocabulary(&vocab, &args.out.join("vocab.json"))
        .map_err(|e| CliError::Runtime(e.into()))?;
    println!("k-shot histogram ({} sequences):", sequences.len());
    for (k, count) in kshot_histogram(&sequences) {
        println!("  k={k:<4} {count}");
    }
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let mut run_cfg = match &args.config {
        Some(path) => RunConfig::load(path).map_err(|e| CliError::Usage(format!("{e:#}")))?,
        None => RunConfig::default(),
    };
    run_cfg.apply_train_overrides(&args.mode, args.alpha, args.gamma, args.window, args.samples,
                                  args.iterations, args.lr, args.batch, args.seed)
        .map_err(CliError::Usage)?;
    let train_cfg = run_cfg.to_train_config().map_err(CliError::Usage)?;
    println!("effective config:\n{}", run_cfg.echo());

    let sequences = corpus::load_packed_corpus(&args.corpus)
        .with_context(|| format!("loading {}", args.corpus.display()))
        .map_err(CliError::Runtime)?;
    let vocab = corpus::load_vocabulary(&args.vocab)
        .with_context(|| format!("loading {}", args.vocab.display()))
        .map_err(CliError::Runtime)?;
    ensure_dir(&args.out).map_err(CliError::Runtime)?;

    let dims = ModelDims::new(
        vocab.size(),
        run_cfg.model.d_model,
        run_cfg.model.layers,
        run_cfg.model.heads,
        run_cfg.model.max_pos,
    );
    let params = ModelParams::init(dims, derive_seed(train_cfg.seed, 0x1217))
        .map_err(|e| CliError::Runtime(e.into()))?;
    println!(
        "model: vocab={} d={} layers={} heads={} params={}",
        dims.vocab,
        dims.d_model,
        dims.layers,
        dims.heads,
        params.param_count()
    );

    let outcome = match train(&train_cfg, &sequences, params, &vocab, Some(&args.out)) {
        Ok(outcome) => outcome,
        Err(e @ TrainError::NonFiniteLoss { .. }) => {
            return Err(CliError::Runtime(anyhow::anyhow!("{e}")));
        }
        Err(e) => return Err(CliError::Runtime(anyhow::anyhow!("{e}"))),
    };
    outcome
        .log
        .save(&args.out.join("train_log.jsonl"))
        .map_err(|e| CliError::Runtime(anyhow::anyhow!("{e}")))?;
    outcome
        .log
        .save_audit_log(&args.out.join("advantage_audit.jsonl"))
        .map_err(|e| CliError::Runtime(anyhow::anyhow!("{e}")))?;

    let n = sequences.len().min(outcome.log.steps.len());
    let tail = &outcome.log.steps[outcome.log.steps.len() - n..];
    let mean = |f: fn(&dricl_core::trainer::StepRecord) -> f64| {
        tail.iter().map(f).sum::<f64>() / tail.len() as f64
    };
    println!(
        "final (last pass): l_diff={:.4} many={:.4} zero={:.4}",
        mean(|r| r.l_diff),
        mean(|r| r.many_losses.iter().sum::<f64>() / r.k as f64),
        mean(|r| r.zero_losses.iter().sum::<f64>() / r.k as f64),
    );
    println!("wrote {}", args.out.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    if args.k.is_empty() {
        return Err(CliError::Usage("--k requires at least one value".into()));
    }
    let (params, vocab) = load_checkpoint(&args.checkpoint)
        .map_err(|e| CliError::Runtime(anyhow::anyhow!("{e}")))?;
    let mut train_pool = corpus::load_task_pool(&args.train_pool, Split::Train)
        .map_err(|e| CliError::Runtime(e.into()))?;
    let mut test_pool = corpus::load_task_pool(&args.test_pool, Split::Test)
        .map_err(|e| CliError::Runtime(e.into()))?;
    let sidecar = sidecar_instruction(&args.test_pool, &test_pool.task_id)
        .or_else(|| sidecar_instruction(&args.train_pool, &train_pool.task_id));
    if let Some(instruction) = args.instruction.clone().or(sidecar) {
        train_pool.instruction_text = instruction.clone();
        test_pool.instruction_text = instruction;
    }

    println!(
        "eval task={} k={:?} n={} seed={} budget={}",
        test_pool.task_id, args.k, args.n, args.seed, args.budget
    );
    let report = kshot_sweep(
        &params, &vocab, &test_pool, &train_pool, &args.k, args.n, args.budget, args.seed,
    )
    .map_err(|e| CliError::Runtime(anyhow::anyhow!("{e}")))?;
    print!("{}", report_to_csv(&report));
    for (k, reason) in &report.skipped {
        eprintln!("note: k={k} skipped: {reason}");
    }
    if report.points.len() >= 2 {
        let accs: Vec<f64> = report.points.iter().map(|&(_, a)| a).collect();
        let var = performance_variance(&accs).map_err(|e| CliError::Runtime(anyhow::anyhow!("{e}")))?;
        println!("cross-k population variance: {var:.3e}");
    }
    write_report_csv(&report, &args.out).map_err(|e| CliError::Runtime(anyhow::anyhow!("{e}")))?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn cmd_check(args: CheckArgs) -> Result<(), CliError> {
    let fault: FaultInjection = args
        .inject_fault
        .parse()
        .map_err(CliError::Usage)?;
    if let Some(suite) = &args.suite {
        if !["advantage", "maskequiv", "forward", "gradcheck"].contains(&suite.as_str()) {
            return Err(CliError::Usage(format!(
                "unknown suite {suite} (expected advantage|maskequiv|forward|gradcheck)"
            )));
        }
    }
    println!(
        "check suite={} seed={} fault={:?}",
        args.suite.as_deref().unwrap_or("all"),
        args.seed,
        fault
    );
    let results = checks::run_suites(args.suite.as_deref(), args.seed, fault);
    let mut all_ok = true;
    for r in &results {
        println!("{}", r.line());
        all_ok &= r.passed;
    }
    if all_ok {
        Ok(())
    } else {
        let failing = results
            .iter()
            .filter(|r| !r.passed)
            .map(|r| match r.failing_seed {
                Some(s) => format!("{} (seed {s})", r.name),
                None => r.name.to_string(),
            })
            .collect::<Vec<_>>()
            .join(", ");
        Err(CliError::Verification(failing))
    }
}
