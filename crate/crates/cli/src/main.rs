use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use promptinv::pipeline::{
    cmd_attack, cmd_eval, cmd_synth, AttackRunConfig, BackendSpec, EvalRunConfig, SynthRunConfig,
};
use promptinv::refine::Feedback;

/// Reconstruct recommender prompts from model logits, and build and score the datasets for it.
#[derive(Parser)]
#[command(name = "promptinv", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize an instruction dataset from a rating dump.
    Synth(SynthArgs),
    /// Attack every sample of a dataset and write the reconstructions.
    Attack(AttackArgs),
    /// Score reconstructions against the dataset they came from.
    Eval(EvalArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    ratings: Option<PathBuf>,
    #[arg(long)]
    templates: Option<PathBuf>,
    /// Rating threshold: ratings >= k are preferred.
    #[arg(long)]
    k: Option<f64>,
    #[arg(long)]
    n_min: Option<usize>,
    /// Exclusive upper bound of the item limit.
    #[arg(long)]
    n_max: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated task names.
    #[arg(long, value_delimiter = ',')]
    tasks: Option<Vec<String>>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum FeedbackArg {
    Selected,
    Correction,
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// `toy` or the base URL of a model server.
    #[arg(long)]
    victim: Option<BackendSpec>,
    #[arg(long)]
    inverter: Option<BackendSpec>,
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    max_iterations: Option<usize>,
    #[arg(long, value_enum)]
    feedback: Option<FeedbackArg>,
    /// Projection weights JSON.
    #[arg(long)]
    projection: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Skip samples already reconstructed in the output directory.
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    limit: Option<usize>,
    /// Remote request timeout in seconds.
    #[arg(long)]
    timeout: Option<f64>,
    #[arg(long)]
    retries: Option<u32>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    predictions: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Skip the CSV exports.
    #[arg(long)]
    no_csv: bool,
}

fn load_config<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Relative paths in a config file are relative to the file itself.
fn rebase(config: Option<&Path>, p: &mut PathBuf) {
    if let Some(dir) = config.and_then(Path::parent) {
        if p.is_relative() && !p.as_os_str().is_empty() {
            *p = dir.join(&*p);
        }
    }
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let cfg_path = a.config.as_deref();
    let mut cfg: SynthRunConfig = load_config(cfg_path)?;
    rebase(cfg_path, &mut cfg.ratings);
    rebase(cfg_path, &mut cfg.out);
    if let Some(t) = cfg.templates.as_mut() {
        rebase(cfg_path, t);
    }
    set(&mut cfg.ratings, a.ratings);
    if a.templates.is_some() {
        cfg.templates = a.templates;
    }
    set(&mut cfg.k, a.k);
    set(&mut cfg.n_min, a.n_min);
    set(&mut cfg.n_max, a.n_max);
    set(&mut cfg.seed, a.seed);
    set(&mut cfg.tasks, a.tasks);
    set(&mut cfg.out, a.out);

    let s = cmd_synth(&cfg)?;
    println!("users: {}", s.users);
    println!("samples: {}", s.samples);
    println!("skipped: {}", s.skipped.values().sum::<usize>());
    for (reason, n) in &s.skipped {
        println!("  {reason:?}: {n}");
    }
    println!("dropped rows: {}", s.dropped_rows);
    println!("dataset: {}", s.dataset.display());
    Ok(())
}

fn attack(a: AttackArgs) -> Result<()> {
    let cfg_path = a.config.as_deref();
    let mut cfg: AttackRunConfig = load_config(cfg_path)?;
    rebase(cfg_path, &mut cfg.dataset);
    rebase(cfg_path, &mut cfg.out);
    if let Some(p) = cfg.projection.as_mut() {
        rebase(cfg_path, p);
    }
    set(&mut cfg.dataset, a.dataset);
    set(&mut cfg.victim, a.victim);
    set(&mut cfg.inverter, a.inverter);
    set(&mut cfg.refinement.beam_width, a.beam);
    set(&mut cfg.refinement.epsilon, a.epsilon);
    set(&mut cfg.refinement.max_iterations, a.max_iterations);
    if let Some(f) = a.feedback {
        cfg.refinement.feedback = match f {
            FeedbackArg::Selected => Feedback::Selected,
            FeedbackArg::Correction => Feedback::Correction,
        };
    }
    if a.projection.is_some() {
        cfg.projection = a.projection;
    }
    set(&mut cfg.out, a.out);
    cfg.resume |= a.resume;
    set(&mut cfg.workers, a.workers);
    if a.limit.is_some() {
        cfg.limit = a.limit;
    }
    set(&mut cfg.remote.timeout_secs, a.timeout);
    set(&mut cfg.remote.retries, a.retries);

    let s = cmd_attack(&cfg)?;
    println!("samples: {}", s.samples);
    println!("attacked: {}", s.processed);
    println!("resumed: {}", s.resumed);
    println!("failed: {}", s.failed);
    println!("reconstructions: {}", s.reconstructions.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let cfg_path = a.config.as_deref();
    let mut cfg: EvalRunConfig = load_config(cfg_path)?;
    rebase(cfg_path, &mut cfg.dataset);
    rebase(cfg_path, &mut cfg.predictions);
    rebase(cfg_path, &mut cfg.out);
    set(&mut cfg.dataset, a.dataset);
    set(&mut cfg.predictions, a.predictions);
    set(&mut cfg.out, a.out);
    if a.no_csv {
        cfg.csv = false;
    }

    let s = cmd_eval(&cfg)?;
    if !s.report.unknown_sample_ids.is_empty() {
        eprintln!("excluded unknown sample ids: {}", s.report.unknown_sample_ids.join(", "));
    }
    print!("{}", s.table);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Attack(a) => attack(a),
        Command::Eval(a) => eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::debug!("{e:?}");
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
