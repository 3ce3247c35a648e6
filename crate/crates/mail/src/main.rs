//! Command-line entry point: dataset generation, training, evaluation,
//! ablations, latent export and parameter reports.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mail::arch::PolicyNet;
use mail::error::{Error, Result};
use mail::harness::{
    self, ablation, load_checkpoint, save_checkpoint, Checkpoint, TrainConfig,
};
use mail::toy::{self, Task};

#[derive(Parser)]
#[command(name = "mail", version, about = "Selective state-space policy lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a demonstration dataset with a scripted expert.
    GenData(GenDataArgs),
    /// Train a policy from a config file.
    Train(TrainArgs),
    /// Evaluate a checkpoint with seeded rollouts.
    Eval(EvalArgs),
    /// Success rate across evaluation-time occlusion rates.
    AblateOcclusion(AblateOcclusionArgs),
    /// Train and evaluate across dataset fractions.
    AblateDatasize(AblateDatasizeArgs),
    /// Export pre-head latent representations per trajectory step.
    ExportLatents(ExportLatentsArgs),
    /// Parameter count report for a config.
    Params(ParamsArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Task name: multimodal-reach or delayed-cue.
    task: String,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u32,
    #[arg(long)]
    out: PathBuf,
    /// Cue visibility length for delayed-cue.
    #[arg(long, default_value_t = 3)]
    k_needed: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value_t = 200)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Evaluation-time occlusion rate.
    #[arg(long, default_value_t = 0.0)]
    occlusion: f64,
}

#[derive(Args)]
struct AblateOcclusionArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Comma-separated occlusion rates, e.g. 0.0,0.5,1.0.
    #[arg(long)]
    rates: String,
    #[arg(long, default_value_t = 200)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateDatasizeArgs {
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated dataset fractions, e.g. 0.2,1.0.
    #[arg(long)]
    fractions: String,
    #[arg(long, default_value_t = 200)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportLatentsArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write a seeded 2-D PCA projection next to the output.
    #[arg(long)]
    pca: bool,
    #[arg(long, default_value_t = 0)]
    pca_seed: u64,
}

#[derive(Args)]
struct ParamsArgs {
    #[arg(long)]
    config: PathBuf,
}

fn parse_list(text: &str, what: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|e| Error::Config(format!("bad {what} entry '{p}': {e}")))
        })
        .collect()
}

fn load_config(path: &PathBuf) -> Result<TrainConfig> {
    TrainConfig::parse(&fs::read_to_string(path)?)
}

/// Resolve a config against its dataset and construct the (untrained) net.
fn config_net(cfg: &TrainConfig) -> Result<(TrainConfig, PolicyNet)> {
    if cfg.dataset.is_empty() {
        return Err(Error::Config("config has no dataset path".into()));
    }
    let ds = toy::load_dataset(&PathBuf::from(&cfg.dataset))?;
    let resolved = cfg.resolved(&ds)?;
    let net = PolicyNet::new(resolved.net_config()?, resolved.seed)?;
    Ok((resolved, net))
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::GenData(args) => {
            let task = Task::from_name(&args.task, args.k_needed)?;
            let ds = toy::generate_dataset(task, args.n, args.seed)?;
            toy::save_dataset(&ds, &args.out)?;
            println!(
                "wrote {} trajectories ({} steps) for task {} to {}",
                ds.trajectories.len(),
                ds.total_steps(),
                ds.task,
                args.out.display()
            );
        }
        Command::Train(args) => {
            let cfg = load_config(&args.config)?;
            if cfg.dataset.is_empty() {
                return Err(Error::Config("config has no dataset path".into()));
            }
            let ds = toy::load_dataset(&PathBuf::from(&cfg.dataset))?;
            fs::create_dir_all(&args.out_dir)?;
            let run = harness::train_on(&cfg, &ds)?;
            let metrics_path = args.out_dir.join("metrics.jsonl");
            ablation::atomic_write(
                &metrics_path,
                harness::metrics_to_jsonl(&run.metrics).as_bytes(),
            )?;
            let ckpt = Checkpoint::from_net(
                run.cfg.clone(),
                &run.net,
                run.cfg.epochs as u64,
                run.rng_seed,
                run.rng_word_pos,
            );
            let ckpt_path = args.out_dir.join("checkpoint.mck");
            save_checkpoint(&ckpt, &ckpt_path)?;
            let last = run.metrics.last().map(|m| m.loss).unwrap_or(f64::NAN);
            println!(
                "trained {} {} for {} epochs (final loss {last:.6}); checkpoint {} metrics {}",
                run.cfg.policy.as_str(),
                run.cfg.variant,
                run.cfg.epochs,
                ckpt_path.display(),
                metrics_path.display()
            );
        }
        Command::Eval(args) => {
            let ckpt = load_checkpoint(&args.ckpt)?;
            let net = ckpt.restore_net()?;
            let success = harness::evaluate_with_occlusion(
                &ckpt.config,
                &net,
                args.episodes,
                args.seed,
                args.occlusion,
            )?;
            println!(
                "success_rate {success} over {} episodes (seed {}, occlusion {})",
                args.episodes, args.seed, args.occlusion
            );
        }
        Command::AblateOcclusion(args) => {
            let rates = parse_list(&args.rates, "rate")?;
            let ckpt = load_checkpoint(&args.ckpt)?;
            let net = ckpt.restore_net()?;
            let rows =
                ablation::run_occlusion_ablation(&ckpt.config, &net, &rates, args.episodes, args.seed)?;
            for (rate, success) in &rows {
                println!("rho {rate} success {success}");
            }
            if let Some(out) = args.out {
                ablation::write_rate_table(&out, "rho", &rows)?;
                println!("table written to {}", out.display());
            }
        }
        Command::AblateDatasize(args) => {
            let fractions = parse_list(&args.fractions, "fraction")?;
            let cfg = load_config(&args.config)?;
            if cfg.dataset.is_empty() {
                return Err(Error::Config("config has no dataset path".into()));
            }
            let ds = toy::load_dataset(&PathBuf::from(&cfg.dataset))?;
            let rows =
                ablation::run_datasize_ablation(&cfg, &ds, &fractions, args.episodes, args.seed)?;
            for (fraction, success) in &rows {
                println!("fraction {fraction} success {success}");
            }
            if let Some(out) = args.out {
                ablation::write_rate_table(&out, "fraction", &rows)?;
                println!("table written to {}", out.display());
            }
        }
        Command::ExportLatents(args) => {
            let ckpt = load_checkpoint(&args.ckpt)?;
            let net = ckpt.restore_net()?;
            let ds = toy::load_dataset(&args.data)?;
            let pca = args.pca.then_some(args.pca_seed);
            let summary = ablation::export_latents(&ckpt.config, &net, &ds, &args.out, pca)?;
            println!(
                "wrote {} latent rows of dim {} to {}",
                summary.rows,
                summary.dim,
                args.out.display()
            );
            if let Some(p) = summary.pca {
                println!(
                    "pca projection ({}% variance) at {}",
                    (p.explained * 100.0).round(),
                    p.path.display()
                );
            }
        }
        Command::Params(args) => {
            let cfg = load_config(&args.config)?;
            let (resolved, net) = config_net(&cfg)?;
            println!("variant {} ({})", resolved.variant, resolved.policy.as_str());
            for (module, count) in net.parameter_report() {
                println!("  {module:<10} {count}");
            }
            println!("total {}", net.count_parameters());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
