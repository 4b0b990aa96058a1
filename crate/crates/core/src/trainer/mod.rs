//! The GATN training loop and its baselines.
//!
//! One episode: encode the start state, let the scheduler pick `M` sources,
//! then act epsilon-greedily on the composed Q-vector, updating the gate
//! (TD plus robustness loss) and the base network (its own TD error) after
//! every step. The VAE takes one minibatch step on recent states and the
//! scheduler one REINFORCE step when the episode ends.

mod agent;
mod pretrain;

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::adapter::{td_target, RobustMode};
use crate::diffcore::{sgd_step, Network};
use crate::envs::Transition;
use crate::error::{GatnError, Result};

pub use agent::{run_greedy_episode, train_run, Agent, EpisodeRow};
pub use pretrain::{pretrain_source, pretrain_vae, vae_corpus, PretrainConfig, PretrainReport};

#[derive(Clone, Debug, PartialEq)]
pub struct Hyperparams {
    pub gamma: f64,
    pub lr_rep: f64,
    pub lr_adapt: f64,
    pub lr_base: f64,
    pub lr_sched: f64,
    pub latent_dim: usize,
    /// Hidden width of every network.
    pub hidden: usize,
    pub m: usize,
    pub eps_floor: f64,
    pub baseline_decay: f64,
    pub sigma: f64,
    pub lambda: f64,
    pub robust_mode: RobustMode,
    pub eps_start: f64,
    pub eps_end: f64,
    /// Fraction of the run over which epsilon decays linearly.
    pub decay_frac: f64,
    pub episodes: usize,
    pub seed: u64,
    /// Truncates episodes below the environment's own cap.
    pub step_limit: Option<usize>,
    pub vae_buffer: usize,
    pub vae_batch: usize,
    pub vae_pretrain_samples: usize,
    pub vae_pretrain_steps: usize,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lr_rep: 0.0005,
            lr_adapt: 0.0005,
            lr_base: 0.0025,
            lr_sched: 0.01,
            latent_dim: 8,
            hidden: 32,
            m: 2,
            eps_floor: crate::sched::DEFAULT_EPS_FLOOR,
            baseline_decay: crate::sched::DEFAULT_BASELINE_DECAY,
            sigma: 0.1,
            lambda: 0.1,
            robust_mode: RobustMode::Latent,
            eps_start: 1.0,
            eps_end: 0.05,
            decay_frac: 0.5,
            episodes: 500,
            seed: 0,
            step_limit: None,
            vae_buffer: 256,
            vae_batch: 32,
            vae_pretrain_samples: 1000,
            vae_pretrain_steps: 500,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(GatnError::config(msg));
        if !(0.0..1.0).contains(&self.gamma) {
            return bad(format!("gamma must lie in [0, 1), got {}", self.gamma));
        }
        for (name, lr) in [
            ("lr.rep", self.lr_rep),
            ("lr.adapt", self.lr_adapt),
            ("lr.base", self.lr_base),
            ("lr.sched", self.lr_sched),
        ] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return bad(format!("{name} must be a non-negative finite number, got {lr}"));
            }
        }
        if self.m == 0 {
            return bad("M must be ≥ 1".into());
        }
        if self.latent_dim == 0 || self.hidden == 0 {
            return bad("network widths must be positive".into());
        }
        if !(self.eps_floor > 0.0 && self.eps_floor.is_finite()) {
            return bad(format!("sched.eps_floor must be positive, got {}", self.eps_floor));
        }
        if !(0.0..1.0).contains(&self.baseline_decay) {
            return bad(format!("baseline decay must lie in [0, 1), got {}", self.baseline_decay));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) || !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("robust.sigma and robust.lambda must be non-negative".into());
        }
        let unit = 0.0..=1.0;
        if !unit.contains(&self.eps_start) || !unit.contains(&self.eps_end) || !unit.contains(&self.decay_frac) {
            return bad("exploration parameters must lie in [0, 1]".into());
        }
        if self.eps_end > self.eps_start {
            return bad(format!("eps_end {} exceeds eps_start {}", self.eps_end, self.eps_start));
        }
        if self.vae_batch == 0 || self.vae_buffer == 0 {
            return bad("VAE batch and buffer sizes must be positive".into());
        }
        Ok(())
    }

    /// Linear decay from `eps_start` to `eps_end` over the first
    /// `decay_frac` of the run; `episode` counts from 0.
    pub fn epsilon(&self, episode: usize) -> f64 {
        let horizon = self.decay_frac * self.episodes as f64;
        if horizon <= 0.0 {
            return self.eps_end;
        }
        let t = episode as f64 / horizon;
        if t >= 1.0 {
            return self.eps_end;
        }
        self.eps_start + (self.eps_end - self.eps_start) * t
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VariantKind {
    Gatn,
    A2tLike,
    DqnScratch,
}

/// Which agent to train, with the GATN feature switches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AgentVariant {
    pub kind: VariantKind,
    pub vae: bool,
    pub scheduler: bool,
    pub robust: bool,
}

impl AgentVariant {
    pub fn gatn() -> Self {
        Self {
            kind: VariantKind::Gatn,
            vae: true,
            scheduler: true,
            robust: true,
        }
    }

    /// All sources, raw-state gate, no VAE, no scheduler, no robustness loss.
    pub fn a2t_like() -> Self {
        Self {
            kind: VariantKind::A2tLike,
            vae: false,
            scheduler: false,
            robust: false,
        }
    }

    pub fn dqn_scratch() -> Self {
        Self {
            kind: VariantKind::DqnScratch,
            vae: false,
            scheduler: false,
            robust: false,
        }
    }

    pub fn uses_sources(&self) -> bool {
        self.kind != VariantKind::DqnScratch
    }
}

impl fmt::Display for AgentVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            VariantKind::A2tLike => f.write_str("a2t-like"),
            VariantKind::DqnScratch => f.write_str("dqn-scratch"),
            VariantKind::Gatn => {
                f.write_str("gatn")?;
                for (on, name) in [(self.vae, "vae"), (self.scheduler, "sched"), (self.robust, "robust")] {
                    if !on {
                        write!(f, "-no-{name}")?;
                    }
                }
                Ok(())
            }
        }
    }
}

impl FromStr for AgentVariant {
    type Err = GatnError;

    /// `gatn`, `a2t-like`, `dqn-scratch`, or `gatn` followed by any of
    /// `-no-vae`, `-no-sched`, `-no-robust`.
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "a2t-like" => return Ok(Self::a2t_like()),
            "dqn-scratch" => return Ok(Self::dqn_scratch()),
            _ => {}
        }
        let unknown = || GatnError::config(format!("unknown agent variant `{s}`"));
        let mut rest = s.trim().strip_prefix("gatn").ok_or_else(unknown)?;
        let mut v = Self::gatn();
        while !rest.is_empty() {
            let (flag, tail) = [("-no-vae", 0), ("-no-sched", 1), ("-no-robust", 2)]
                .iter()
                .find_map(|&(p, i)| rest.strip_prefix(p).map(|t| (i, t)))
                .ok_or_else(unknown)?;
            match flag {
                0 => v.vae = false,
                1 => v.scheduler = false,
                _ => v.robust = false,
            }
            rest = tail;
        }
        Ok(v)
    }
}

/// `r + gamma * max_a' Q(s', a') - Q(s, a)`; terminal transitions do not
/// bootstrap.
pub fn td_error(t: &Transition, gamma: f64, mut q: impl FnMut(&[f64]) -> Result<Vec<f64>>) -> Result<f64> {
    let next = if t.done { None } else { Some(q(&t.next_state)?) };
    let current = q(&t.state)?;
    Ok(td_target(t.reward, gamma, next.as_deref()) - current[t.action])
}

/// Epsilon-greedy; greedy ties go to the lowest index.
pub fn select_action<R: Rng + ?Sized>(q: &[f64], epsilon: f64, rng: &mut R) -> usize {
    if epsilon > 0.0 && rng.random::<f64>() < epsilon {
        return rng.random_range(0..q.len());
    }
    argmax(q)
}

pub fn argmax(q: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in q.iter().enumerate() {
        if *v > q[best] {
            best = i;
        }
    }
    best
}

/// One SGD step on `delta_B^2`, where `delta_B` uses the base network's
/// own Q-values. Returns `delta_B^2`.
pub fn update_base(base: &mut Network, t: &Transition, gamma: f64, lr: f64) -> Result<f64> {
    base.params.zero_grad();
    let next = if t.done { None } else { Some(base.predict(&t.next_state)?) };
    let target = td_target(t.reward, gamma, next.as_deref());
    let (q, tape) = base.forward(&t.state)?;
    let delta = target - q[t.action];
    let loss = delta * delta;
    if !loss.is_finite() {
        return Err(GatnError::numerical("base", format!("TD loss is {loss}")));
    }
    let mut dq = vec![0.0; q.len()];
    dq[t.action] = -2.0 * delta;
    base.backward(&tape, &dq)?;
    sgd_step(&mut base.params, lr)?;
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{grad_check, MlpSpec};
    use crate::rng::{substream, Stream};
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn transition(reward: f64, done: bool) -> Transition {
        Transition {
            state: vec![1.0, 0.0],
            action: 0,
            reward,
            next_state: vec![0.0, 1.0],
            done,
        }
    }

    fn table(current: Vec<f64>, next: Vec<f64>) -> impl FnMut(&[f64]) -> Result<Vec<f64>> {
        move |s: &[f64]| Ok(if s[0] == 1.0 { current.clone() } else { next.clone() })
    }

    #[test]
    fn td_error_examples() {
        let t = transition(1.0, false);
        assert_eq!(td_error(&t, 0.0, table(vec![0.0, 0.0], vec![5.0, 5.0])).unwrap(), 1.0);
        let d = td_error(&t, 0.9, table(vec![0.5, 9.0], vec![2.0, -1.0])).unwrap();
        assert!((d - 2.3).abs() < 1e-12);
        let t = transition(1.0, true);
        assert_eq!(td_error(&t, 0.9, table(vec![1.0, 0.0], vec![100.0, 100.0])).unwrap(), 0.0);
    }

    #[test]
    fn greedy_and_ties() {
        let mut rng = substream(0, Stream::Explore);
        assert_eq!(select_action(&[1.0, 3.0, 2.0], 0.0, &mut rng), 1);
        assert_eq!(select_action(&[2.0, 2.0, 1.0], 0.0, &mut rng), 0);
    }

    #[test]
    fn full_exploration_is_uniform() {
        let mut rng = substream(1, Stream::Explore);
        let mut counts = [0usize; 4];
        for _ in 0..10_000 {
            counts[select_action(&[0.0, 9.0, 0.0, 0.0], 1.0, &mut rng)] += 1;
        }
        let stat: f64 = counts.iter().map(|&c| (c as f64 - 2500.0).powi(2) / 2500.0).sum();
        let p = 1.0 - ChiSquared::new(3.0).unwrap().cdf(stat);
        assert!(p > 0.01, "{counts:?}");
    }

    #[test]
    fn epsilon_schedule() {
        let h = Hyperparams {
            episodes: 100,
            ..Hyperparams::default()
        };
        assert_eq!(h.epsilon(0), 1.0);
        assert!((h.epsilon(25) - 0.525).abs() < 1e-12);
        assert_eq!(h.epsilon(50), 0.05);
        assert_eq!(h.epsilon(99), 0.05);
    }

    #[test]
    fn variant_names_round_trip() {
        for name in ["gatn", "a2t-like", "dqn-scratch", "gatn-no-robust", "gatn-no-vae-no-sched"] {
            assert_eq!(name.parse::<AgentVariant>().unwrap().to_string(), name);
        }
        assert!("gatn-no-gate".parse::<AgentVariant>().is_err());
        assert!("dqn".parse::<AgentVariant>().is_err());
    }

    #[test]
    fn hyperparams_bounds() {
        assert!(Hyperparams::default().validate().is_ok());
        let bad = [
            Hyperparams { gamma: 1.0, ..Default::default() },
            Hyperparams { m: 0, ..Default::default() },
            Hyperparams { lr_base: -1.0, ..Default::default() },
            Hyperparams { eps_end: 0.5, eps_start: 0.1, ..Default::default() },
        ];
        for h in bad {
            assert!(h.validate().is_err(), "{h:?}");
        }
        let err = Hyperparams { m: 0, ..Default::default() }.validate().unwrap_err();
        assert!(err.to_string().contains("M must be ≥ 1"));
    }

    fn base_net() -> Network {
        Network::new(MlpSpec::tanh_head(&[2, 5, 3], 4).unwrap(), "base")
    }

    #[test]
    fn zero_td_error_leaves_base_unchanged() {
        let mut net = base_net();
        let q = net.predict(&[1.0, 0.0]).unwrap();
        let t = transition(q[0], true);
        let before = net.params.values().to_vec();
        let loss = update_base(&mut net, &t, 0.9, 0.1).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(net.params.values(), before.as_slice());
    }

    #[test]
    fn base_td_gradient_checks() {
        let mut net = base_net();
        let t = transition(0.7, false);
        // semi-gradient: the bootstrap target is a constant
        let target = td_target(t.reward, 0.9, Some(&net.predict(&t.next_state).unwrap()));
        let mut rng = substream(2, Stream::Check);
        let report = grad_check(&mut net.params, 30, 1e-5, &mut rng, |p| {
            let spec = MlpSpec::tanh_head(&[2, 5, 3], 4).unwrap();
            let (q, tape) = crate::diffcore::mlp_forward(&spec, p, &t.state)?;
            let delta = target - q[t.action];
            let mut dq = vec![0.0; 3];
            dq[t.action] = -2.0 * delta;
            crate::diffcore::backward(&spec, p, &tape, &dq)?;
            Ok(delta * delta)
        })
        .unwrap();
        assert!(report.max_rel_error <= 1e-4, "{:?}", report.worst());
    }

    #[test]
    fn base_update_reduces_its_error() {
        let mut net = base_net();
        let t = transition(1.0, true);
        let first = update_base(&mut net, &t, 0.9, 0.05).unwrap();
        let second = update_base(&mut net, &t, 0.9, 0.05).unwrap();
        assert!(second < first);
    }
}
