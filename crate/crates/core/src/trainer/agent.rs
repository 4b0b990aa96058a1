use std::collections::VecDeque;
use std::sync::Arc;

use rand::seq::index::sample;
use rand::{Rng, RngCore};

use super::{select_action, update_base, AgentVariant, Hyperparams, VariantKind};
use crate::adapter::{update_adapter, AdapterHyper, AdapterStep, SourceLibrary, TransferModel};
use crate::diffcore::{MlpSpec, Network, ParamGroup, Parameterized};
use crate::envs::{Env, EnvSpec, StartDist};
use crate::error::{GatnError, Result};
use crate::repr::{pad_to, Vae, VaeConfig};
use crate::rng::{substream, RunRng, Stream};
use crate::sched::{top_m, Scheduler};

/// One row of the per-episode metrics table.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeRow {
    pub seed: u64,
    /// Counts from 1.
    pub episode: usize,
    pub ret: f64,
    pub epsilon: f64,
    pub td_loss: f64,
    pub vae_loss: f64,
    pub robust_loss: f64,
    pub selected: Vec<usize>,
    /// Mean weight per expert over the episode's steps, sources then base.
    pub gate_weights: Vec<f64>,
    /// Cumulative source forward passes at the end of the episode.
    pub forward_passes: u64,
}

#[derive(Clone, Debug)]
pub struct Agent {
    pub variant: AgentVariant,
    pub hyper: Hyperparams,
    pub target: EnvSpec,
    pub vae: Option<Vae>,
    pub model: TransferModel,
    pub scheduler: Option<Scheduler>,
    /// Recent padded states for the online VAE step.
    pub buffer: VecDeque<Vec<f64>>,
    /// Episodes completed so far.
    pub episode: usize,
    /// Start distribution used for training episodes.
    pub start: StartDist,
}

fn gate_input(vae: Option<&Vae>, state: &[f64]) -> Result<Vec<f64>> {
    match vae {
        Some(v) => v.encode_mean(&pad_to(state, v.input_dim())),
        None => Ok(state.to_vec()),
    }
}

impl Agent {
    /// Builds a fresh agent. Initial weights depend only on the seed and
    /// the network shapes, so variants sharing a seed share a base network.
    pub fn new(variant: AgentVariant, hyper: Hyperparams, target: EnvSpec, library: Arc<SourceLibrary>) -> Result<Self> {
        hyper.validate()?;
        let library = if variant.uses_sources() {
            if library.is_empty() {
                return Err(GatnError::config(format!("variant {variant} needs at least one source")));
            }
            library
        } else {
            Arc::new(SourceLibrary::default())
        };
        let n = library.len();
        let state_dim = target.state_dim();
        let d_max = library
            .entries()
            .iter()
            .map(|e| e.env.state_dim())
            .fold(state_dim, usize::max);

        let mut seeds = substream(hyper.seed, Stream::Init);
        let (vae_seed, gate_seed, base_seed, sched_seed) =
            (seeds.next_u64(), seeds.next_u64(), seeds.next_u64(), seeds.next_u64());

        let vae = if variant.vae {
            let config = VaeConfig {
                input_dim: d_max,
                latent_dim: hyper.latent_dim,
                hidden: hyper.hidden,
            };
            Some(Vae::new(config, vae_seed)?)
        } else {
            None
        };
        let gate_dim = vae.as_ref().map_or(state_dim, Vae::latent_dim);
        let gate = if variant.uses_sources() {
            let spec = MlpSpec::tanh_head(&[gate_dim, hyper.hidden, n + 1], gate_seed)?;
            Some(Network::new(spec, "gate"))
        } else {
            None
        };
        let base_spec = MlpSpec::tanh_head(&[state_dim, hyper.hidden, target.action_count()], base_seed)?;
        let model = TransferModel::new(gate, Network::new(base_spec, "base"), library)?;
        let scheduler = if variant.kind == VariantKind::Gatn && variant.scheduler {
            let mut s = Scheduler::new(gate_dim, n, hyper.hidden, hyper.m, sched_seed)?;
            s.eps_floor = hyper.eps_floor;
            s.baseline_decay = hyper.baseline_decay;
            Some(s)
        } else {
            None
        };
        Ok(Self {
            variant,
            hyper,
            target,
            vae,
            model,
            scheduler,
            buffer: VecDeque::new(),
            episode: 0,
            start: StartDist::Train,
        })
    }

    pub fn n_sources(&self) -> usize {
        self.model.n_sources()
    }

    pub fn gate_input(&self, state: &[f64]) -> Result<Vec<f64>> {
        gate_input(self.vae.as_ref(), state)
    }

    /// Sources used for an episode that starts from gate input `z0`.
    /// Training samples from the scheduler; evaluation takes the top `M`.
    pub fn choose_sources<R: Rng + ?Sized>(&self, z0: &[f64], rng: Option<&mut R>) -> Result<Vec<usize>> {
        let n = self.n_sources();
        match (&self.scheduler, rng) {
            (Some(s), Some(rng)) => Ok(s.select(z0, rng)?.indices),
            (Some(s), None) => Ok(top_m(&s.relevance_scores(z0)?.0, s.m)),
            (None, _) => Ok((0..n).collect()),
        }
    }

    fn check_env(&self, env: &Env) -> Result<()> {
        let spec = env.spec();
        if spec.state_dim() != self.target.state_dim() || spec.action_count() != self.target.action_count() {
            return Err(GatnError::config(format!(
                "environment {spec} does not match the agent's target {} ({} states, {} actions)",
                self.target,
                self.target.state_dim(),
                self.target.action_count()
            )));
        }
        Ok(())
    }

    fn remember(&mut self, state: &[f64]) {
        if let Some(vae) = &self.vae {
            if self.buffer.len() == self.hyper.vae_buffer {
                self.buffer.pop_front();
            }
            self.buffer.push_back(pad_to(state, vae.input_dim()));
        }
    }

    fn adapter_hyper(&self) -> AdapterHyper {
        AdapterHyper {
            gamma: self.hyper.gamma,
            lr: self.hyper.lr_adapt,
            lambda: if self.variant.robust { self.hyper.lambda } else { 0.0 },
            sigma: self.hyper.sigma,
            mode: self.hyper.robust_mode,
        }
    }

    /// Runs one training episode and returns its metrics row.
    pub fn train_episode(&mut self, env: &mut Env, rng: &mut RunRng) -> Result<EpisodeRow> {
        self.check_env(env)?;
        let n = self.n_sources();
        let epsilon = self.hyper.epsilon(self.episode);
        let limit = self.hyper.step_limit.unwrap_or(usize::MAX);
        self.episode += 1;
        let mut row = EpisodeRow {
            seed: self.hyper.seed,
            episode: self.episode,
            ret: 0.0,
            epsilon,
            td_loss: 0.0,
            vae_loss: 0.0,
            robust_loss: 0.0,
            selected: Vec::new(),
            gate_weights: vec![0.0; n + 1],
            forward_passes: self.model.forward_passes,
        };
        if limit == 0 {
            return Ok(row);
        }

        let s0 = env.reset(self.start, &mut rng.env);
        self.remember(&s0);
        let z0 = self.gate_input(&s0)?;
        let selection = self.choose_sources(&z0, Some(&mut rng.sched))?;
        let mut point = self.model.point(&s0, z0.clone(), &selection)?;
        let hyper = self.adapter_hyper();
        let (mut steps, mut td_sum, mut robust_sum) = (0usize, 0.0, 0.0);

        loop {
            let trace = self.model.forward(&point, &selection)?;
            for (acc, w) in row.gate_weights.iter_mut().zip(trace.weights.full(n)) {
                *acc += w;
            }
            let action = select_action(&trace.q, epsilon, &mut rng.explore);
            let mut t = env.step(action, &mut rng.env)?;
            steps += 1;
            row.ret += t.reward;
            t.done |= steps >= limit;
            self.remember(&t.next_state);
            let next = if t.done {
                None
            } else {
                let z = self.gate_input(&t.next_state)?;
                Some(self.model.point(&t.next_state, z, &selection)?)
            };

            if self.model.gate.is_some() {
                let step = AdapterStep {
                    current: &point,
                    next: next.as_ref(),
                    action,
                    reward: t.reward,
                };
                let vae = self.vae.as_ref();
                let encode = |s: &[f64]| gate_input(vae, s);
                let (td, robust) = update_adapter(&mut self.model, step, &selection, &hyper, &encode, &mut rng.robust)?;
                td_sum += td;
                robust_sum += robust;
                update_base(&mut self.model.base, &t, self.hyper.gamma, self.hyper.lr_base)?;
            } else {
                td_sum += update_base(&mut self.model.base, &t, self.hyper.gamma, self.hyper.lr_base)?;
            }

            match next {
                Some(p) => point = p,
                None => break,
            }
        }

        if let Some(vae) = self.vae.as_mut() {
            let k = self.hyper.vae_batch.min(self.buffer.len());
            let batch: Vec<Vec<f64>> = sample(&mut rng.vae, self.buffer.len(), k)
                .into_iter()
                .map(|i| self.buffer[i].clone())
                .collect();
            row.vae_loss = vae.update_rep(&batch, self.hyper.lr_rep, &mut rng.vae)?;
        }
        if let Some(s) = self.scheduler.as_mut() {
            s.update(&[(z0, selection.clone())], row.ret, self.hyper.lr_sched)?;
        }

        let k = steps as f64;
        row.td_loss = td_sum / k;
        row.robust_loss = robust_sum / k;
        row.gate_weights.iter_mut().for_each(|w| *w /= k);
        row.selected = selection;
        row.forward_passes = self.model.forward_passes;
        Ok(row)
    }

    /// Greedy composed Q-values for a fixed source selection.
    pub fn greedy_q(&mut self, state: &[f64], selection: &[usize]) -> Result<Vec<f64>> {
        let z = self.gate_input(state)?;
        let point = self.model.point(state, z, selection)?;
        Ok(self.model.forward(&point, selection)?.q)
    }

    /// Every trainable group, in checkpoint order.
    pub fn param_groups(&self) -> Vec<&ParamGroup> {
        let mut out = Vec::new();
        if let Some(v) = &self.vae {
            out.extend(v.groups());
        }
        out.extend(self.model.groups());
        if let Some(s) = &self.scheduler {
            out.push(&s.net.params);
        }
        out
    }

    pub fn param_groups_mut(&mut self) -> Vec<&mut ParamGroup> {
        let mut out = Vec::new();
        if let Some(v) = self.vae.as_mut() {
            out.extend(v.groups_mut());
        }
        out.extend(self.model.groups_mut());
        if let Some(s) = self.scheduler.as_mut() {
            out.push(&mut s.net.params);
        }
        out
    }
}

/// One greedy (epsilon = 0) episode; returns the undiscounted return.
/// Sources are fixed for the episode to the scheduler's top `M`.
pub fn run_greedy_episode<R: Rng + ?Sized>(agent: &mut Agent, env: &mut Env, start: StartDist, rng: &mut R) -> Result<f64> {
    agent.check_env(env)?;
    let limit = agent.hyper.step_limit.unwrap_or(usize::MAX);
    if limit == 0 {
        return Ok(0.0);
    }
    let s0 = env.reset(start, rng);
    let z0 = agent.gate_input(&s0)?;
    let selection = agent.choose_sources::<R>(&z0, None)?;
    let mut point = agent.model.point(&s0, z0, &selection)?;
    let (mut ret, mut steps) = (0.0, 0);
    loop {
        let q = agent.model.forward(&point, &selection)?.q;
        let t = env.step(super::argmax(&q), rng)?;
        ret += t.reward;
        steps += 1;
        if t.done || steps >= limit {
            return Ok(ret);
        }
        let z = agent.gate_input(&t.next_state)?;
        point = agent.model.point(&t.next_state, z, &selection)?;
    }
}

/// Runs the remaining episodes of the agent's configured run, pushing each
/// row as soon as it is complete so a failure leaves the finished rows.
pub fn train_run(agent: &mut Agent, env: &mut Env, rng: &mut RunRng, rows: &mut Vec<EpisodeRow>) -> Result<()> {
    while agent.episode < agent.hyper.episodes {
        let row = agent.train_episode(env, rng)?;
        rows.push(row);
    }
    Ok(())
}
