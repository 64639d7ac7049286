//! `dicolab` command line: world generation, pre-training, fine-tuning,
//! evaluation, regime comparison and curve extraction.
//!
//! Relative artifact paths (`--out`, `--world`, `--start`, `--checkpoint`,
//! `--run`) resolve against the output root: `$DICOLAB_RUN_DIR` when set,
//! otherwise the working directory. `--config` files resolve against the
//! working directory.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 bad data on disk.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dicolab::captioner::{load_checkpoint, save_checkpoint, Captioner, Checkpoint, ModelConfig};
use dicolab::report::{check_records, metric_series, read_jsonl, write_jsonl, MetricReport, RunRecord};
use dicolab::testbed::{generate_world, Split, World};
use dicolab::trainer::{
    evaluate, finetune, pretrain_xe, reference_examples, synthesize_pairs, train_reward_head, HeadTrainConfig,
    Regime, RewardHead, TrainConfig, XeConfig, REWARD_HEAD_ID,
};
use dicolab::DicoError;

const RUN_DIR_ENV: &str = "DICOLAB_RUN_DIR";

#[derive(Parser)]
#[command(name = "dicolab", version, about = "Preference fine-tuning lab for small captioners")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic world management.
    World {
        #[command(subcommand)]
        action: WorldAction,
    },
    /// Cross-entropy pre-training on the world's references.
    Pretrain(PretrainArgs),
    /// Fine-tune a checkpoint with one regime.
    Finetune(FinetuneArgs),
    /// Decode a split and write a metric report.
    Evaluate(EvaluateArgs),
    /// Fine-tune two regimes from the same start and seed, then tabulate test metrics.
    Compare(CompareArgs),
    /// Extract a metric-vs-step series from a run as CSV.
    Curves(CurvesArgs),
}

#[derive(Subcommand)]
enum WorldAction {
    /// Generate a world directory.
    Gen(WorldGenArgs),
}

#[derive(Args)]
struct WorldGenArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Total vocabulary size including the three special tokens.
    #[arg(long, default_value_t = 40)]
    vocab_size: usize,
    #[arg(long, default_value_t = 480)]
    contexts: usize,
    /// Context feature and embedding dimension.
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    world: PathBuf,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    d_model: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 128)]
    ff_dim: usize,
    /// Run directory to create.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long)]
    world: PathBuf,
    /// Starting checkpoint; also the frozen reference.
    #[arg(long)]
    start: PathBuf,
    /// Flat `key = value` training config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set beta=0.1`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Preference pairs used to fit the reward head (rlhf_lite only).
    #[arg(long, default_value_t = 200)]
    pairs: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    world: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Reference for `kl_to_ref`; defaults to the evaluated checkpoint.
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    /// JSON-lines report file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    world: PathBuf,
    #[arg(long)]
    start: PathBuf,
    /// Exactly two regimes, comma separated.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    regimes: Vec<String>,
    /// Reward evaluator shared by both regimes.
    #[arg(long, default_value = "clipS")]
    reward: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, default_value_t = 200)]
    pairs: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CurvesArgs {
    /// Fine-tuning run directory holding records.jsonl.
    #[arg(long)]
    run: PathBuf,
    /// `loss`, `reward_mean`, `kl_to_ref` or any validation metric.
    #[arg(long)]
    metric: String,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Lab(#[from] DicoError),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Lab(DicoError::Config(_) | DicoError::Input(_)) => 1,
            CliError::Lab(_) => 2,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Lab(DicoError::Io(e))
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(CliError::Usage(msg.into()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let root = std::env::var_os(RUN_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."));
    match run(cli.command, &root) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(command: Command, root: &Path) -> CliResult<()> {
    match command {
        Command::World { action: WorldAction::Gen(a) } => world_gen(a, root),
        Command::Pretrain(a) => pretrain(a, root),
        Command::Finetune(a) => finetune_cmd(a, root),
        Command::Evaluate(a) => evaluate_cmd(a, root),
        Command::Compare(a) => compare(a, root),
        Command::Curves(a) => curves(a, root),
    }
}

fn resolve(root: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

fn load_world(root: &Path, p: &Path) -> CliResult<World> {
    Ok(World::load(&resolve(root, p))?)
}

fn load_model(root: &Path, p: &Path, world: &World) -> CliResult<Captioner> {
    let ckpt = load_checkpoint(&resolve(root, p))?;
    ckpt.check_vocab(&world.vocabulary)?;
    Ok(ckpt.model)
}

fn parse_split(name: &str) -> CliResult<Split> {
    match name {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => usage(format!("unknown split {other:?}: expected train, val or test")),
    }
}

fn apply_overrides(cfg: &mut TrainConfig, overrides: &[String]) -> CliResult<()> {
    for o in overrides {
        let Some((k, v)) = o.split_once('=') else {
            return usage(format!("--set expects KEY=VALUE, got {o:?}"));
        };
        cfg.set(k.trim(), v.trim())?;
    }
    Ok(())
}

fn world_gen(a: WorldGenArgs, root: &Path) -> CliResult<()> {
    let world = generate_world(a.seed, a.vocab_size, a.contexts, a.dim)?;
    let out = resolve(root, &a.out);
    world.save(&out)?;
    println!("wrote world to {}", out.display());
    Ok(())
}

fn pretrain(a: PretrainArgs, root: &Path) -> CliResult<()> {
    let world = load_world(root, &a.world)?;
    let mc = ModelConfig::new(&world.vocabulary, world.dim, world.max_len).with_width(a.d_model, a.heads, a.ff_dim);
    let cfg = XeConfig { epochs: a.epochs, lr: a.lr, batch_size: a.batch_size, seed: a.seed };
    let out = resolve(root, &a.out);
    fs::create_dir_all(out.join("checkpoints"))?;
    fs::create_dir_all(out.join("reports"))?;
    let config_text = format!(
        "epochs = {}\nlr = {}\nbatch_size = {}\nseed = {}\nd_model = {}\nheads = {}\nff_dim = {}\n",
        a.epochs, a.lr, a.batch_size, a.seed, a.d_model, a.heads, a.ff_dim
    );
    fs::write(out.join("config.txt"), config_text)?;

    let outcome = pretrain_xe(&world, mc, &cfg)?;
    let n_train = reference_examples(&world, Split::Train).len();
    let steps_per_epoch = n_train.div_ceil(a.batch_size) as u64;
    let ckpt_rel = "checkpoints/xe.ckpt";
    let records: Vec<RunRecord> = outcome
        .val_xe
        .iter()
        .enumerate()
        .map(|(epoch, &xe)| RunRecord {
            step: epoch as u64 * steps_per_epoch,
            epoch: epoch as u64,
            loss: xe,
            reward_mean: 0.0,
            kl_to_ref: 0.0,
            val_metrics: [("val_xe".to_string(), xe)].into_iter().collect(),
            checkpoint_path: (epoch == a.epochs).then(|| ckpt_rel.to_string()),
        })
        .collect();
    write_jsonl(&out.join("records.jsonl"), &records)?;
    save_checkpoint(&out.join(ckpt_rel), &Checkpoint::new(&world.vocabulary, outcome.model, Some(outcome.optimizer)))?;
    let last = outcome.val_xe.last().copied().unwrap_or(f64::NAN);
    println!("validation xe {:.4} -> {last:.4}; checkpoint {}", outcome.val_xe[0], out.join(ckpt_rel).display());
    Ok(())
}

/// Fits the reward head on pairs synthesized from the training split, with
/// `start` as the frozen body.
fn fit_head(world: &World, start: &Captioner, n_pairs: usize, seed: u64, reports: &Path) -> CliResult<RewardHead> {
    let pairs = synthesize_pairs(world, Split::Train, n_pairs, seed)?;
    let held_out = synthesize_pairs(world, Split::Val, n_pairs.div_ceil(2), seed.wrapping_add(1))?;
    let (head, report) = train_reward_head(&pairs, start, &HeadTrainConfig { seed, ..HeadTrainConfig::default() })?;
    let acc = dicolab::trainer::pair_accuracy(&head, &held_out);
    let mut rows = MetricReport::default();
    rows.push(0, "head_initial_loss", report.initial_loss);
    rows.push(0, "head_final_loss", report.epoch_losses.last().copied().unwrap_or(report.initial_loss));
    rows.push(0, "head_val_accuracy", acc);
    rows.write(&reports.join("reward_head.jsonl"))?;
    Ok(head)
}

/// Runs one fine-tuning job into `out` and returns the test report of the
/// best checkpoint.
fn run_finetune(cfg: &TrainConfig, world: &World, start: &Captioner, n_pairs: usize, out: &Path) -> CliResult<MetricReport> {
    cfg.validate()?;
    let reports = out.join("reports");
    fs::create_dir_all(out.join("checkpoints"))?;
    fs::create_dir_all(&reports)?;
    fs::write(out.join("config.txt"), cfg.to_kv_string())?;
    let head = if cfg.regime == Regime::RlhfLite || cfg.reward_evaluator == REWARD_HEAD_ID || cfg.early_stop_metric == REWARD_HEAD_ID {
        Some(fit_head(world, start, n_pairs, cfg.seed, &reports)?)
    } else {
        None
    };
    let mut outcome = finetune(cfg, start, world, head.as_ref())?;
    let vocab = &world.vocabulary;
    save_checkpoint(&out.join("checkpoints/best.ckpt"), &Checkpoint::new(vocab, outcome.best.clone(), None))?;
    save_checkpoint(&out.join("checkpoints/final.ckpt"), &Checkpoint::new(vocab, outcome.final_model.clone(), None))?;
    if let Some(last) = outcome.records.last_mut() {
        last.checkpoint_path = Some("checkpoints/final.ckpt".into());
    }
    write_jsonl(&out.join("records.jsonl"), &outcome.records)?;
    let step = outcome.records.last().map_or(0, |r| r.step);
    let report = evaluate(&outcome.best, start, world, Split::Test, step)?;
    report.write(&reports.join("test.jsonl"))?;
    Ok(report)
}

fn finetune_cmd(a: FinetuneArgs, root: &Path) -> CliResult<()> {
    let world = load_world(root, &a.world)?;
    let start = load_model(root, &a.start, &world)?;
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::from_kv_str(&fs::read_to_string(p)?)?,
        None => TrainConfig::default(),
    };
    apply_overrides(&mut cfg, &a.overrides)?;
    let out = resolve(root, &a.out);
    let report = run_finetune(&cfg, &world, &start, a.pairs, &out)?;
    print!("{}", table(&[cfg.regime.name()], &[&report]));
    Ok(())
}

fn evaluate_cmd(a: EvaluateArgs, root: &Path) -> CliResult<()> {
    let split = parse_split(&a.split)?;
    let world = load_world(root, &a.world)?;
    let model = load_model(root, &a.checkpoint, &world)?;
    let reference = match &a.reference {
        Some(p) => load_model(root, p, &world)?,
        None => model.clone(),
    };
    let report = evaluate(&model, &reference, &world, split, 0)?;
    report.write(&resolve(root, &a.out))?;
    print!("{}", table(&[split.name()], &[&report]));
    Ok(())
}

fn compare(a: CompareArgs, root: &Path) -> CliResult<()> {
    if a.regimes.len() != 2 {
        return usage(format!("--regimes takes exactly two regimes, got {}", a.regimes.len()));
    }
    let regimes = a.regimes.iter().map(|r| r.parse::<Regime>()).collect::<Result<Vec<_>, _>>()?;
    if regimes[0] == regimes[1] {
        return usage("--regimes must name two different regimes");
    }
    let world = load_world(root, &a.world)?;
    let start = load_model(root, &a.start, &world)?;
    let out = resolve(root, &a.out);
    let mut reports = Vec::new();
    for &regime in &regimes {
        let mut cfg = TrainConfig::for_regime(regime);
        cfg.reward_evaluator = if regime == Regime::RlhfLite { REWARD_HEAD_ID.into() } else { a.reward.clone() };
        cfg.seed = a.seed;
        apply_overrides(&mut cfg, &a.overrides)?;
        reports.push(run_finetune(&cfg, &world, &start, a.pairs, &out.join(regime.name()))?);
    }
    let names: Vec<&str> = regimes.iter().map(|r| r.name()).collect();
    let refs: Vec<&MetricReport> = reports.iter().collect();
    let text = table(&names, &refs);
    fs::create_dir_all(out.join("reports"))?;
    fs::write(out.join("reports/compare.tsv"), text.replace("  ", "\t"))?;
    print!("{text}");
    Ok(())
}

fn curves(a: CurvesArgs, root: &Path) -> CliResult<()> {
    let path = resolve(root, &a.run).join("records.jsonl");
    let records: Vec<RunRecord> = read_jsonl(&path)?;
    check_records(&records)?;
    let series = metric_series(&records, &a.metric);
    if series.is_empty() {
        return Err(DicoError::Data(format!("metric {:?} not found in {}", a.metric, path.display())).into());
    }
    let mut csv = format!("step,{}\n", a.metric);
    for (step, v) in series {
        let _ = writeln!(csv, "{step},{v}");
    }
    match &a.out {
        Some(p) => fs::write(resolve(root, p), csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

/// One row per metric, one value column per report, separated by two spaces.
fn table(columns: &[&str], reports: &[&MetricReport]) -> String {
    let mut out = String::from("metric");
    for c in columns {
        let _ = write!(out, "  {c}");
    }
    out.push('\n');
    let Some(first) = reports.first() else { return out };
    for row in &first.rows {
        out.push_str(&row.metric_id);
        for r in reports {
            let _ = write!(out, "  {:.6}", r.get(&row.metric_id).unwrap_or(f64::NAN));
        }
        out.push('\n');
    }
    out
}
