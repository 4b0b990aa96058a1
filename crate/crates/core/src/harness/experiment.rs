use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::thread;

use super::checkpoint::{network_from_group, write_group, Checkpoint, Reader};
use super::config::{ExperimentConfig, SourceSpec};
use super::metrics::RunMetrics;
use crate::adapter::{ActionAligner, SourceEntry, SourceLibrary};
use crate::diffcore::{Network, ParamGroup};
use crate::envs::{Env, EnvSpec, StateMapper};
use crate::error::{GatnError, Result};
use crate::rng::RunRng;
use crate::trainer::{pretrain_source, pretrain_vae, train_run, Agent, EpisodeRow, PretrainReport};

fn source_entry(target: &EnvSpec, i: usize, spec: &SourceSpec, network: Network) -> Result<SourceEntry> {
    let mapper = match spec.mapper.as_deref() {
        None | Some("auto") => StateMapper::infer(target, &spec.env),
        Some(mode) => StateMapper::for_envs(mode, target, &spec.env)?,
    };
    let aligner = match spec.aligner.as_deref() {
        Some(table) => ActionAligner::parse(table, target.action_count())?,
        None if spec.env.action_count() == target.action_count() => ActionAligner::identity(target.action_count()),
        None => {
            return Err(GatnError::config(format!(
                "source {i} ({}) has {} actions but the target has {}; set env.aligner.{i}",
                spec.env,
                spec.env.action_count(),
                target.action_count()
            )))
        }
    };
    let params = ParamGroup::from_values(&format!("source.{i}"), network.params.values().to_vec(), network.params.shapes().to_vec());
    Ok(SourceEntry {
        env: spec.env.clone(),
        network: Network::from_params(network.spec, params)?,
        mapper,
        aligner,
    })
}

/// Wraps trained source networks with the config's mappers and aligners.
pub fn assemble_library(config: &ExperimentConfig, networks: Vec<Network>) -> Result<SourceLibrary> {
    if networks.len() != config.sources.len() {
        return Err(GatnError::config(format!(
            "{} source networks for {} configured sources",
            networks.len(),
            config.sources.len()
        )));
    }
    let entries = config
        .sources
        .iter()
        .zip(networks)
        .enumerate()
        .map(|(i, (spec, net))| source_entry(&config.target, i, spec, net))
        .collect::<Result<_>>()?;
    SourceLibrary::new(entries)
}

/// Trains every configured source with a scratch DQN, one thread each.
pub fn pretrain_sources(config: &ExperimentConfig) -> Result<Vec<(Network, PretrainReport)>> {
    thread::scope(|scope| {
        let handles: Vec<_> = config
            .sources
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let seed = config.source_seed.wrapping_add(i as u64);
                scope.spawn(move || pretrain_source(&s.env, &config.hyper, &config.pretrain, seed))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("pretraining thread panicked")).collect()
    })
}

/// Pretrains the sources and assembles them into a library.
pub fn build_library(config: &ExperimentConfig) -> Result<Arc<SourceLibrary>> {
    if !config.variant.uses_sources() {
        return Ok(Arc::default());
    }
    let nets = pretrain_sources(config)?.into_iter().map(|(n, _)| n).collect();
    Ok(Arc::new(assemble_library(config, nets)?))
}

pub fn source_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("source-{i}.ckpt"))
}

pub fn save_source(path: &Path, env: &EnvSpec, network: &Network) -> Result<()> {
    let mut out = format!("gatn-source 1\nenv {env}\n");
    write_group(&mut out, &network.params);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| GatnError::io(dir, e))?;
    }
    fs::write(path, out).map_err(|e| GatnError::io(path, e))
}

pub fn load_source(path: &Path) -> Result<(EnvSpec, Network)> {
    let text = fs::read_to_string(path).map_err(|e| GatnError::io(path, e))?;
    let mut r = Reader::new(&text);
    let version: u32 = r.parsed("gatn-source")?;
    if version != 1 {
        return Err(GatnError::Parse {
            line: 1,
            message: format!("source file version {version} is not supported"),
        });
    }
    let env = r.parsed("env")?;
    Ok((env, network_from_group(r.group()?)?))
}

/// Loads the library from `dir`; every source file must exist and match
/// the configured env.
pub fn load_library(config: &ExperimentConfig, dir: &Path) -> Result<Arc<SourceLibrary>> {
    if !config.variant.uses_sources() {
        return Ok(Arc::default());
    }
    let mut nets = Vec::new();
    for (i, s) in config.sources.iter().enumerate() {
        let path = source_path(dir, i);
        if !path.exists() {
            return Err(GatnError::config(format!(
                "source checkpoint {} is missing; run pretrain-sources first",
                path.display()
            )));
        }
        let (env, net) = load_source(&path)?;
        if env != s.env {
            return Err(GatnError::config(format!("{} holds {env}, config expects {}", path.display(), s.env)));
        }
        nets.push(net);
    }
    Ok(Arc::new(assemble_library(config, nets)?))
}

/// A finished run.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub config: ExperimentConfig,
    pub metrics: RunMetrics,
    pub agent: Agent,
    pub rng: RunRng,
}

impl RunOutput {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.agent, &self.config, &self.rng)
    }
}

/// Builds, pretrains and trains one seed. Rows finished before a failure
/// are left in `rows`.
pub fn run_seed_into(
    config: &ExperimentConfig,
    library: Arc<SourceLibrary>,
    seed: u64,
    rows: &mut Vec<EpisodeRow>,
) -> Result<(ExperimentConfig, Agent, RunRng)> {
    let mut config = config.clone();
    config.hyper.seed = seed;
    config.validate()?;
    let mut agent = Agent::new(config.variant, config.hyper.clone(), config.target.clone(), library)?;
    pretrain_vae(&mut agent, seed)?;
    let mut env = Env::new(config.target.clone())?;
    let mut rng = RunRng::new(seed);
    train_run(&mut agent, &mut env, &mut rng, rows)?;
    Ok((config, agent, rng))
}

pub fn run_seed(config: &ExperimentConfig, library: Arc<SourceLibrary>, seed: u64) -> Result<RunOutput> {
    let mut rows = Vec::new();
    let (config, agent, rng) = run_seed_into(config, library, seed, &mut rows)?;
    Ok(RunOutput {
        config,
        metrics: RunMetrics::new(rows),
        agent,
        rng,
    })
}

/// Runs every seed on its own thread, sharing one frozen library.
pub fn run_seeds(config: &ExperimentConfig, library: Arc<SourceLibrary>, seeds: &[u64]) -> Result<Vec<RunOutput>> {
    thread::scope(|scope| {
        let handles: Vec<_> = seeds
            .iter()
            .map(|&seed| {
                let library = library.clone();
                scope.spawn(move || run_seed(config, library, seed))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("run thread panicked")).collect()
    })
}
