//! `medcl`: data generation, training, evaluation, ablation, supervision
//! sweeps and self-checks.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error, 3 self-check
//! failure.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use medcl_core::evalkit::{
    ablate, evaluate, plot_losses, plot_sweep, sensitivity_sweep, spearman, summary_table, sweep_rows, write_eval_csv,
    write_long_csv, AblationRow, EvalOptions, SweepResult,
};
use medcl_core::par::Exec;
use medcl_core::phantom::{
    generate_split, read_dataset, write_dataset, DatasetManifest, ManifestEntry, PhantomMode, PhantomSpec,
    FORMAT_VERSION, SPLITS,
};
use medcl_core::segnet::Checkpoint;
use medcl_core::selfcheck::{self, Fault};
use medcl_core::trainer::{train_from, TrainConfig, TrainData, TrainState};

use config::UsageError;

#[derive(Parser, Debug)]
#[command(
    name = "medcl",
    version,
    about = "Weakly-supervised segmentation on synthetic phantoms"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// JSON training config; omitted fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set trainer.epochs=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Output root. Runs go to `<out>/<run dir>`; gen-data writes here directly.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    /// Base seed (training seed, or dataset seed for gen-data).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 1 forces sequential execution.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Run directory name, replacing `<command>-<config hash>-<timestamp>`.
    #[arg(long, global = true)]
    run_name: Option<String>,
    /// More output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate train/val/test phantom datasets.
    GenData(GenDataArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Train and score loss-ablation rows over several seeds.
    Ablate(AblateArgs),
    /// Vary the number of scribble-annotated training images.
    Sweep(SweepArgs),
    /// Run the built-in correctness checks.
    Selfcheck(SelfcheckArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    Structure,
    Pathology,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long, value_enum, default_value = "structure")]
    mode: Mode,
    /// Foreground classes.
    #[arg(long, default_value_t = 3)]
    m: usize,
    #[arg(long, default_value_t = 40)]
    train: usize,
    #[arg(long, default_value_t = 10)]
    val: usize,
    #[arg(long, default_value_t = 20)]
    test: usize,
    /// Image side length in pixels.
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Scribble coverage per class region.
    #[arg(long, default_value_t = medcl_core::phantom::DEFAULT_COVERAGE)]
    coverage: f64,
    #[arg(long)]
    noise: Option<f64>,
}

#[derive(Args, Debug)]
struct DataArg {
    /// Dataset root holding one directory per split (sets `data.root`).
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArg,
    /// Continue from a training-state checkpoint (`last.ckpt`).
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArg,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Percentile Hausdorff (e.g. 95) instead of the maximum.
    #[arg(long)]
    hd_percentile: Option<f64>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    data: DataArg,
    /// Comma-separated rows: 1, 2, 3, 4, full.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,full")]
    rows: Vec<AblationRow>,
    /// Number of seeds, counting up from the base seed.
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    /// Split the trained models are scored on.
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    data: DataArg,
    /// Comma-separated numbers of scribble-annotated training images.
    #[arg(long, value_delimiter = ',', default_value = "1,3,5,10")]
    counts: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Args, Debug)]
struct SelfcheckArgs {
    /// Print a machine-readable JSON report.
    #[arg(long)]
    json: bool,
    /// Break a component on purpose to confirm the checks notice.
    #[arg(long, hide = true, value_name = "FAULT")]
    inject_fault: Option<Fault>,
}

/// Failure classes mapped onto exit codes.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
    Check,
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        if e.is::<UsageError>() {
            Failure::Usage(e)
        } else {
            Failure::Runtime(e)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Check) => ExitCode::from(3),
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let g = &cli.global;
    if let Some(jobs) = g.jobs {
        if jobs == 0 {
            return Err(Failure::Usage(UsageError::new("--jobs must be at least 1").into()));
        }
        init_pool(jobs);
    }
    match &cli.command {
        Command::GenData(a) => gen_data(g, a),
        Command::Train(a) => train(g, a),
        Command::Eval(a) => eval(g, a),
        Command::Ablate(a) => ablation(g, a),
        Command::Sweep(a) => sweep(g, a),
        Command::Selfcheck(a) => check(a),
    }
}

#[cfg(feature = "parallel")]
fn init_pool(jobs: usize) {
    // Only fails if a pool already exists, which cannot happen this early.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
}

#[cfg(not(feature = "parallel"))]
fn init_pool(_jobs: usize) {}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(UsageError::new(msg).into())
}

/// Config from file, overrides and global flags.
fn load_config(g: &Global, data: Option<&DataArg>) -> Result<TrainConfig, Failure> {
    let mut cfg = config::load(g.config.as_deref(), &g.overrides)?;
    if let Some(seed) = g.seed {
        cfg.trainer.seed = seed;
    }
    if let Some(root) = data.and_then(|d| d.data.clone()) {
        cfg.data.root = Some(root);
    }
    if g.jobs == Some(1) {
        cfg.trainer.exec = Exec::Sequential;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

/// Creates `<out>/<name>` where `name` is `--run-name` or
/// `<command>-<hash>-<timestamp>`.
fn run_dir(g: &Global, command: &str, cfg: &TrainConfig, extra: &str) -> anyhow::Result<PathBuf> {
    let name = match &g.run_name {
        Some(name) => name.clone(),
        None => {
            let hash = config::run_hash(cfg, &format!("{command} {extra}"));
            let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
            format!("{command}-{hash}-{stamp}")
        }
    };
    let dir = g.out.join(name);
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    std::fs::write(dir.join("config.json"), serde_json::to_vec_pretty(cfg)?)?;
    Ok(dir)
}

fn log(g: &Global, level: u8, msg: impl AsRef<str>) {
    if g.verbose >= level {
        eprintln!("{}", msg.as_ref());
    }
}

fn gen_data(g: &Global, a: &GenDataArgs) -> Result<(), Failure> {
    let defaults = PhantomSpec::default();
    let spec = PhantomSpec {
        height: a.size,
        width: a.size,
        num_classes: a.m,
        mode: match a.mode {
            Mode::Structure => PhantomMode::Structure,
            Mode::Pathology => PhantomMode::Pathology,
        },
        noise_sigma: a.noise.unwrap_or(defaults.noise_sigma),
        scribble_coverage: a.coverage,
        ..defaults
    };
    spec.validate().map_err(|e| usage(e.to_string()))?;
    let seed = g.seed.unwrap_or(0);
    let counts = [a.train, a.val, a.test];
    println!("{:<6} {:>7}  path", "split", "samples");
    for (split, (&name, &count)) in SPLITS.iter().zip(&counts).enumerate() {
        if count == 0 {
            continue;
        }
        let samples = generate_split(&spec, seed, split, count).map_err(|e| usage(e.to_string()))?;
        let manifest = DatasetManifest {
            format_version: FORMAT_VERSION,
            split: name.to_string(),
            generator: spec.clone(),
            samples: samples
                .iter()
                .enumerate()
                .map(|(i, (s, sample))| ManifestEntry {
                    id: format!("{name}-{i:04}"),
                    image: String::new(),
                    labels: String::new(),
                    scribbles: String::new(),
                    present_classes: sample.present_classes.clone(),
                    seed: *s,
                    sha256: Default::default(),
                })
                .collect(),
        };
        let dir = g.out.join(name);
        let images: Vec<_> = samples.into_iter().map(|(_, s)| s).collect();
        write_dataset(&images, &manifest, &dir).with_context(|| format!("writing {}", dir.display()))?;
        println!("{name:<6} {count:>7}  {}", dir.display());
    }
    Ok(())
}

fn train(g: &Global, a: &TrainArgs) -> Result<(), Failure> {
    let cfg = load_config(g, Some(&a.data))?;
    let data = TrainData::load(&cfg.data).map_err(|e| Failure::Runtime(e.into()))?;
    let state = match &a.resume {
        Some(path) => Some(TrainState::load(path).with_context(|| format!("loading {}", path.display()))?),
        None => None,
    };
    let dir = run_dir(g, "train", &cfg, "")?;
    log(g, 1, format!("run directory {}", dir.display()));
    let outcome = train_from(&cfg, &data, state, Some(&dir), None).context("training")?;
    if !outcome.log.steps.is_empty() {
        plot_losses(&outcome.log, &dir.join("losses")).context("plotting losses")?;
    }
    for r in outcome.log.steps.iter().filter(|_| g.verbose >= 2) {
        eprintln!("epoch {} step {} total {:.5}", r.epoch, r.step, r.losses.total);
    }
    println!("run: {}", dir.display());
    println!("steps: {}", outcome.log.steps.len());
    if let Some(last) = outcome.log.steps.last() {
        let names = medcl_core::losses::TERM_NAMES;
        let terms = last.losses.terms().as_array();
        let parts: Vec<String> = names.iter().zip(terms).map(|(n, v)| format!("{n}={v:.4}")).collect();
        println!("final losses: total={:.4} {}", last.losses.total, parts.join(" "));
    }
    match outcome.best_val_dice {
        Some(d) => println!("best validation Dice: {d:.4}"),
        None => println!("best validation Dice: n/a (no validation split)"),
    }
    Ok(())
}

fn split_samples(
    cfg: &TrainConfig,
    split: &str,
) -> Result<(Vec<medcl_core::phantom::PhantomSample>, DatasetManifest), Failure> {
    let dir = cfg
        .data
        .split_dir(split)
        .ok_or_else(|| usage("no dataset: pass --data or set data.root"))?;
    read_dataset(&dir)
        .with_context(|| format!("reading {}", dir.display()))
        .map_err(Failure::Runtime)
}

fn eval(g: &Global, a: &EvalArgs) -> Result<(), Failure> {
    let cfg = load_config(g, Some(&a.data))?;
    let (samples, manifest) = split_samples(&cfg, &a.split)?;
    let ckpt = Checkpoint::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let params = ckpt.params().context("reading parameters")?;
    let ids: Vec<String> = manifest.samples.iter().map(|s| s.id.clone()).collect();
    let opts = EvalOptions {
        hd_percentile: a.hd_percentile,
        exec: cfg.trainer.exec,
    };
    let report = evaluate(&params, &samples, &ids, manifest.generator.num_classes, opts).context("evaluating")?;
    let dir = run_dir(g, "eval", &cfg, &format!("{} {}", a.checkpoint.display(), a.split))?;
    write_eval_csv(&dir.join("eval.csv"), &report).context("writing eval.csv")?;
    std::fs::write(
        dir.join("summary.json"),
        serde_json::to_vec_pretty(&report.summary).map_err(anyhow::Error::from)?,
    )
    .map_err(anyhow::Error::from)?;
    println!("{} cases, split {}", report.records.len(), a.split);
    print!("{}", summary_table(&report.summary));
    println!("run: {}", dir.display());
    Ok(())
}

fn seeds(g: &Global, n: u64) -> Result<Vec<u64>, Failure> {
    if n == 0 {
        return Err(usage("--seeds must be at least 1"));
    }
    let base = g.seed.unwrap_or(0);
    Ok((base..base + n).collect())
}

fn write_sweep(dir: &Path, stem: &str, result: &SweepResult) -> anyhow::Result<()> {
    write_long_csv(&dir.join(format!("{stem}.csv")), &sweep_rows(result))?;
    plot_sweep(result, &dir.join(stem))?;
    std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_vec_pretty(result)?)?;
    Ok(())
}

fn ablation(g: &Global, a: &AblateArgs) -> Result<(), Failure> {
    let cfg = load_config(g, Some(&a.data))?;
    let seeds = seeds(g, a.seeds)?;
    if a.rows.len() < 2 {
        return Err(usage("ablation needs at least two rows"));
    }
    let data = TrainData::load(&cfg.data).map_err(|e| Failure::Runtime(e.into()))?;
    let (eval_set, _) = split_samples(&cfg, &a.split)?;
    let rows: Vec<String> = a.rows.iter().map(|r| r.label().to_string()).collect();
    let dir = run_dir(g, "ablate", &cfg, &format!("{rows:?} {seeds:?} {}", a.split))?;
    log(
        g,
        1,
        format!("{} runs into {}", a.rows.len() * seeds.len(), dir.display()),
    );
    let result = ablate(&cfg, &data, &eval_set, &a.rows, &seeds, cfg.trainer.exec).context("ablation")?;
    write_sweep(&dir, "ablation", &result)?;
    print!("{}", result.table());
    println!("run: {}", dir.display());
    Ok(())
}

fn sweep(g: &Global, a: &SweepArgs) -> Result<(), Failure> {
    let cfg = load_config(g, Some(&a.data))?;
    let seeds = seeds(g, a.seeds)?;
    let data = TrainData::load(&cfg.data).map_err(|e| Failure::Runtime(e.into()))?;
    if let Some(&c) = a.counts.iter().find(|&&c| c > data.train.len()) {
        return Err(usage(format!(
            "count {c} exceeds the {} training images",
            data.train.len()
        )));
    }
    let (eval_set, _) = split_samples(&cfg, &a.split)?;
    let dir = run_dir(g, "sweep", &cfg, &format!("{:?} {seeds:?} {}", a.counts, a.split))?;
    let result = sensitivity_sweep(&cfg, &data, &eval_set, &a.counts, &seeds, cfg.trainer.exec).context("sweep")?;
    write_sweep(&dir, "sweep", &result)?;
    print!("{}", result.table());
    let (x, y): (Vec<f64>, Vec<f64>) = result.points.iter().map(|p| (p.value, p.dice.mean)).unzip();
    match spearman(&x, &y) {
        Some(r) => println!("spearman(count, mean dice) = {r:.3}"),
        None => println!("spearman(count, mean dice) = undefined"),
    }
    println!("run: {}", dir.display());
    Ok(())
}

fn check(a: &SelfcheckArgs) -> Result<(), Failure> {
    let report = selfcheck::run(a.inject_fault);
    if a.json {
        println!(
            "{}",
            serde_json::to_string_pretty(&report).map_err(anyhow::Error::from)?
        );
    } else {
        for c in &report.checks {
            let status = if c.passed { "PASS" } else { "FAIL" };
            println!("{status} {:<22} {:>7.3}s  {}", c.name, c.seconds, c.detail);
        }
    }
    if report.passed {
        Ok(())
    } else {
        let failed: Vec<&str> = report.failed().map(|c| c.name.as_str()).collect();
        eprintln!("self-check failed: {}", failed.join(", "));
        Err(Failure::Check)
    }
}
