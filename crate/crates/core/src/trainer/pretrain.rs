use log::{info, warn};
use rand::seq::index::sample;
use rand::Rng;

use super::{run_greedy_episode, train_run, Agent, AgentVariant, Hyperparams};
use crate::adapter::SourceLibrary;
use crate::diffcore::Network;
use crate::envs::{sample_states, Env, EnvSpec, StartDist};
use crate::error::Result;
use crate::repr::pad_to;
use crate::rng::{substream, RunRng, Stream};

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub max_episodes: usize,
    /// Stop once the greedy return reaches this fraction of the way from
    /// the environment's worst to its best possible return.
    pub threshold: f64,
    pub check_every: usize,
    pub eval_episodes: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            max_episodes: 1000,
            threshold: 0.9,
            check_every: 25,
            eval_episodes: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainReport {
    pub episodes: usize,
    pub greedy_return: f64,
    pub target_return: f64,
    pub reached: bool,
}

/// Trains a scratch DQN on `spec` from every start cell until its greedy
/// return clears the threshold, and returns the frozen network.
pub fn pretrain_source(spec: &EnvSpec, hyper: &Hyperparams, cfg: &PretrainConfig, seed: u64) -> Result<(Network, PretrainReport)> {
    let hyper = Hyperparams {
        episodes: cfg.max_episodes,
        seed,
        ..hyper.clone()
    };
    let mut agent = Agent::new(AgentVariant::dqn_scratch(), hyper, spec.clone(), Default::default())?;
    agent.start = StartDist::Any;
    let (lo, hi) = spec.return_bounds();
    let target_return = lo + cfg.threshold * (hi - lo);
    let mut env = Env::new(spec.clone())?;
    let mut eval_env = Env::new(spec.clone())?;
    let mut rng = RunRng::new(seed);
    let mut eval_rng = substream(seed, Stream::Pretrain);
    let mut rows = Vec::new();
    let mut greedy_return = f64::NEG_INFINITY;
    while agent.episode < cfg.max_episodes {
        let chunk = cfg.check_every.max(1).min(cfg.max_episodes - agent.episode);
        agent.hyper.episodes = agent.episode + chunk;
        train_run(&mut agent, &mut env, &mut rng, &mut rows)?;
        agent.hyper.episodes = cfg.max_episodes;
        let mut total = 0.0;
        for _ in 0..cfg.eval_episodes {
            total += run_greedy_episode(&mut agent, &mut eval_env, StartDist::Any, &mut eval_rng)?;
        }
        greedy_return = total / cfg.eval_episodes.max(1) as f64;
        if greedy_return >= target_return {
            break;
        }
    }
    let report = PretrainReport {
        episodes: agent.episode,
        greedy_return,
        target_return,
        reached: greedy_return >= target_return,
    };
    if report.reached {
        info!("source {spec}: greedy return {greedy_return:.3} after {} episodes", report.episodes);
    } else {
        warn!(
            "source {spec}: greedy return {greedy_return:.3} below {target_return:.3} after {} episodes",
            report.episodes
        );
    }
    let mut net = agent.model.base;
    let name = format!("source.{spec}");
    net.params = crate::diffcore::ParamGroup::from_values(&name, net.params.values().to_vec(), net.params.shapes().to_vec());
    Ok((net, report))
}

/// Equal-sized random-rollout samples from the target and every source,
/// zero-padded to `dim`.
pub fn vae_corpus<R: Rng + ?Sized>(
    target: &EnvSpec,
    library: &SourceLibrary,
    per_task: usize,
    dim: usize,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::new();
    let tasks = std::iter::once(target).chain(library.entries().iter().map(|e| &e.env));
    for spec in tasks {
        out.extend(sample_states(spec, per_task, rng)?.iter().map(|s| pad_to(s, dim)));
    }
    Ok(out)
}

/// Minibatch SGD on the agent's VAE over a corpus drawn from all tasks.
/// Returns the per-step pre-update losses; empty without a VAE.
pub fn pretrain_vae(agent: &mut Agent, seed: u64) -> Result<Vec<f64>> {
    let mut rng = substream(seed, Stream::Pretrain);
    let Some(dim) = agent.vae.as_ref().map(|v| v.input_dim()) else {
        return Ok(Vec::new());
    };
    let corpus = vae_corpus(
        &agent.target,
        &agent.model.library,
        agent.hyper.vae_pretrain_samples,
        dim,
        &mut rng,
    )?;
    if corpus.is_empty() {
        return Ok(Vec::new());
    }
    let batch_size = agent.hyper.vae_batch.min(corpus.len());
    let (steps, lr) = (agent.hyper.vae_pretrain_steps, agent.hyper.lr_rep);
    let vae = agent.vae.as_mut().expect("checked above");
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        let batch: Vec<Vec<f64>> = sample(&mut rng, corpus.len(), batch_size)
            .into_iter()
            .map(|i| corpus[i].clone())
            .collect();
        losses.push(vae.update_rep(&batch, lr, &mut rng)?);
    }
    Ok(losses)
}
