//! `gatn` command-line front end.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gatn::envs::{EnvSpec, PerturbationConfig, StartDist};
use gatn::harness::{
    bench, evaluate, grad_check_suite, load_checkpoint, load_library, parse_config, pretrain_sources, run_seed_into,
    save_checkpoint, save_source, source_path, write_metrics_csv, Checkpoint, ExperimentConfig, Preset, RunMetrics,
};
use gatn::{GatnError, Result};

/// Gated attention transfer experiments on small tabular worlds.
#[derive(Parser, Debug)]
#[command(name = "gatn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one seed of a config and write its metrics CSV and checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Greedy evaluation of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Environment to evaluate on, e.g. `grid-world(6,6)`.
        #[arg(long)]
        env: String,
        /// Perturbation, e.g. `noise=0.1,drift=0.3927`.
        #[arg(long)]
        perturb: Option<String>,
        /// Also evaluate from held-out starts and report the gap.
        #[arg(long)]
        heldout: bool,
        /// Defaults to the checkpoint config's `eval.episodes`.
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Run a preset against its comparator on seeds 0..k.
    Bench {
        #[arg(long)]
        experiment: String,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
    /// Finite-difference check of every trained loss.
    GradCheck {
        #[arg(long, default_value_t = 50)]
        probes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the config's source tasks and store them for `train`.
    PretrainSources {
        #[arg(long)]
        config: PathBuf,
    },
}

fn read_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| GatnError::io(path, e))?;
    parse_config(&text)
}

/// `sources.dir` resolved against the config's directory, or `sources/`
/// next to the config.
fn sources_dir(config: &ExperimentConfig, config_path: &Path) -> PathBuf {
    let base = config_path.parent().unwrap_or(Path::new(""));
    match &config.source_dir {
        Some(dir) if dir.is_absolute() => dir.clone(),
        Some(dir) => base.join(dir),
        None => base.join("sources"),
    }
}

fn train(config_path: &Path, seed: u64, out: &Path) -> Result<()> {
    let config = read_config(config_path)?;
    let library = load_library(&config, &sources_dir(&config, config_path))?;
    let mut rows = Vec::new();
    let result = run_seed_into(&config, library, seed, &mut rows);
    let csv = out.join(format!("metrics-seed{seed}.csv"));
    let metrics = RunMetrics::new(rows);
    write_metrics_csv(&metrics, &csv)?;
    let (config, agent, rng) = result?;
    let ckpt = out.join(format!("checkpoint-seed{seed}.ckpt"));
    save_checkpoint(&Checkpoint::capture(&agent, &config, &rng), &ckpt)?;
    let k = metrics.rows.len();
    println!(
        "seed {seed}: {k} episodes, mean return {:.4} (last {}), {} source forward passes",
        metrics.mean_return(k.saturating_sub(49).max(1), k),
        k.min(50),
        metrics.forward_passes()
    );
    println!("wrote {} and {}", csv.display(), ckpt.display());
    Ok(())
}

fn eval(path: &Path, env: &str, perturb: Option<&str>, heldout: bool, episodes: Option<usize>) -> Result<()> {
    let (config, mut agent, _) = load_checkpoint(path)?.restore()?;
    let spec: EnvSpec = env.parse()?;
    let perturbation: PerturbationConfig = perturb.map(str::parse).transpose()?.unwrap_or_default();
    let episodes = episodes.unwrap_or(config.eval.episodes);
    let seed = config.hyper.seed;
    let train = evaluate(&mut agent, &spec, episodes, StartDist::Train, perturbation, seed)?;
    println!("{spec} [{perturbation}] train starts: mean return {train:.6} over {episodes} episodes");
    if heldout {
        let held = evaluate(&mut agent, &spec, episodes, StartDist::Heldout, perturbation, seed)?;
        println!("{spec} [{perturbation}] held-out starts: mean return {held:.6}");
        println!("generalization gap {:.6}", train - held);
    }
    Ok(())
}

fn run_bench(experiment: &str, seeds: u64) -> Result<()> {
    let preset: Preset = experiment.parse()?;
    let seeds: Vec<u64> = (0..seeds).collect();
    let report = bench(preset, &seeds)?;
    println!("{report}");
    println!("{}: {}", preset, if report.passed() { "PASS" } else { "FAIL" });
    Ok(())
}

fn grad_check(probes: usize, seed: u64) -> Result<()> {
    let mut worst = 0.0f64;
    for (name, report) in grad_check_suite(probes, seed)? {
        println!("{name:<20} max relative error {:.3e} over {} probes", report.max_rel_error, report.probes.len());
        worst = worst.max(report.max_rel_error);
    }
    if worst > 1e-4 {
        return Err(GatnError::numerical("grad-check", format!("max relative error {worst:.3e} exceeds 1e-4")));
    }
    println!("all gradients agree within 1e-4");
    Ok(())
}

fn pretrain(config_path: &Path) -> Result<()> {
    let config = read_config(config_path)?;
    if config.sources.is_empty() {
        return Err(GatnError::config("config lists no sources"));
    }
    let dir = sources_dir(&config, config_path);
    for (i, (net, report)) in pretrain_sources(&config)?.into_iter().enumerate() {
        let env = &config.sources[i].env;
        if !report.reached {
            log::warn!("source {i} ({env}) stopped below its threshold");
        }
        let path = source_path(&dir, i);
        save_source(&path, env, &net)?;
        println!(
            "source {i} {env}: greedy return {:.4} (target {:.4}) after {} episodes -> {}",
            report.greedy_return,
            report.target_return,
            report.episodes,
            path.display()
        );
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, seed, out } => train(&config, seed, &out),
        Command::Eval {
            checkpoint,
            env,
            perturb,
            heldout,
            episodes,
        } => eval(&checkpoint, &env, perturb.as_deref(), heldout, episodes),
        Command::Bench { experiment, seeds } => run_bench(&experiment, seeds),
        Command::GradCheck { probes, seed } => grad_check(probes, seed),
        Command::PretrainSources { config } => pretrain(&config),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
