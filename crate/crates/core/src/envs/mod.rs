//! Toy MDPs with deliberately mismatched state spaces.
//!
//! * `line-world(L)`: one-hot over `L` cells, actions left/right, start at
//!   cell 0, goal at cell `L - 1`.
//! * `grid-world(W,H)`: one-hot over `W * H` cells (index `y * W + x`),
//!   actions up/down/left/right, goals in both bottom corners so the left
//!   and right halves are mirror images of each other.
//! * `intent-world(K,V)`: a noisy `V`-dimensional feature vector encodes
//!   one of `K` intents; the correct response is the intent index. Every
//!   episode is exactly eight steps long.
//!
//! Any of them can be wrapped as `negated(...)`, which flips the sign of
//! every base reward.

mod mapper;
pub mod oracle;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{GatnError, Result};

pub use mapper::{MapperMode, StateMapper};

pub const STEP_PENALTY: f64 = -0.01;
pub const GOAL_REWARD: f64 = 1.0;
pub const INTENT_CORRECT: f64 = 1.0;
pub const INTENT_WRONG: f64 = -0.1;
pub const INTENT_EPISODE_STEPS: usize = 8;
/// Standard deviation of the intrinsic feature noise in intent-world.
pub const INTENT_NOISE: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EnvKind {
    Line { length: usize },
    Grid { width: usize, height: usize },
    Intent { intents: usize, features: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StartDist {
    Train,
    Heldout,
    /// Every non-goal cell; used to pretrain source solutions.
    Any,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PerturbationConfig {
    pub obs_sigma: f64,
    pub slip: f64,
    pub drift: f64,
    pub reward_shift: f64,
}

impl PerturbationConfig {
    pub fn is_identity(&self) -> bool {
        *self == Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.obs_sigma, self.slip, self.drift, self.reward_shift]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(GatnError::config("perturbation values must be finite"));
        }
        if self.obs_sigma < 0.0 {
            return Err(GatnError::config(format!("observation sigma {} < 0", self.obs_sigma)));
        }
        if !(0.0..=1.0).contains(&self.slip) {
            return Err(GatnError::config(format!("slip probability {} outside [0,1]", self.slip)));
        }
        Ok(())
    }
}

impl fmt::Display for PerturbationConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "noise={},slip={},drift={},shift={}",
            self.obs_sigma, self.slip, self.drift, self.reward_shift
        )
    }
}

impl FromStr for PerturbationConfig {
    type Err = GatnError;

    /// `noise=0.1,slip=0.2,drift=0.39,shift=0`; omitted keys are zero.
    fn from_str(s: &str) -> Result<Self> {
        let mut cfg = PerturbationConfig::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| GatnError::config(format!("perturbation entry `{part}` is not key=value")))?;
            let value: f64 = value
                .trim()
                .parse()
                .map_err(|_| GatnError::config(format!("perturbation `{key}` has non-numeric value `{value}`")))?;
            match key.trim() {
                "noise" | "sigma" => cfg.obs_sigma = value,
                "slip" => cfg.slip = value,
                "drift" => cfg.drift = value,
                "shift" => cfg.reward_shift = value,
                other => return Err(GatnError::config(format!("unknown perturbation key `{other}`"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvSpec {
    pub kind: EnvKind,
    pub negated: bool,
    pub cap: usize,
    pub perturbation: PerturbationConfig,
}

impl EnvSpec {
    pub fn line(length: usize) -> Result<Self> {
        Self::new(EnvKind::Line { length })
    }

    pub fn grid(width: usize, height: usize) -> Result<Self> {
        Self::new(EnvKind::Grid { width, height })
    }

    pub fn intent(intents: usize, features: usize) -> Result<Self> {
        Self::new(EnvKind::Intent { intents, features })
    }

    pub fn new(kind: EnvKind) -> Result<Self> {
        let cap = match kind {
            EnvKind::Line { length } => {
                if length < 4 {
                    return Err(GatnError::config(format!("line-world needs at least 4 cells, got {length}")));
                }
                4 * length
            }
            EnvKind::Grid { width, height } => {
                if width < 2 || height < 2 {
                    return Err(GatnError::config(format!(
                        "grid-world needs at least 2x2 cells, got {width}x{height}"
                    )));
                }
                4 * width * height
            }
            EnvKind::Intent { intents, features } => {
                if intents < 2 || intents > features {
                    return Err(GatnError::config(format!(
                        "intent-world needs 2 <= K <= V, got K={intents}, V={features}"
                    )));
                }
                INTENT_EPISODE_STEPS
            }
        };
        Ok(Self {
            kind,
            negated: false,
            cap,
            perturbation: PerturbationConfig::default(),
        })
    }

    pub fn negate(mut self) -> Self {
        self.negated = !self.negated;
        self
    }

    pub fn state_dim(&self) -> usize {
        match self.kind {
            EnvKind::Line { length } => length,
            EnvKind::Grid { width, height } => width * height,
            EnvKind::Intent { features, .. } => features,
        }
    }

    pub fn action_count(&self) -> usize {
        match self.kind {
            EnvKind::Line { .. } => 2,
            EnvKind::Grid { .. } => 4,
            EnvKind::Intent { intents, .. } => intents,
        }
    }

    pub fn is_tabular(&self) -> bool {
        !matches!(self.kind, EnvKind::Intent { .. })
    }

    /// Inclusive bounds on any episode return, including the reward shift.
    pub fn return_bounds(&self) -> (f64, f64) {
        let sign = if self.negated { -1.0 } else { 1.0 };
        let shift = self.perturbation.reward_shift;
        let cap = self.cap as f64;
        match self.kind {
            EnvKind::Intent { .. } => {
                let a = sign * INTENT_CORRECT + shift;
                let b = sign * INTENT_WRONG + shift;
                (cap * a.min(b), cap * a.max(b))
            }
            _ => {
                let step = sign * STEP_PENALTY + shift;
                let goal = sign * GOAL_REWARD + shift;
                // returns are linear in episode length, so the extremes sit at
                // the shortest goal episode, the longest goal episode, or a timeout
                let candidates = [goal, (cap - 1.0) * step + goal, cap * step];
                let lo = candidates.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = candidates.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                (lo, hi)
            }
        }
    }

    /// Cells a start distribution draws from (tabular envs only).
    pub fn start_cells(&self, start: StartDist) -> Vec<usize> {
        match (self.kind, start) {
            (EnvKind::Line { .. }, StartDist::Train) => vec![0],
            (EnvKind::Line { length }, StartDist::Heldout) => (length.div_ceil(2)..length - 1).collect(),
            (EnvKind::Line { length }, StartDist::Any) => (0..length - 1).collect(),
            (EnvKind::Grid { width, height }, start) => {
                let half = width / 2;
                (0..width * height)
                    .filter(|&c| !self.is_goal(c))
                    .filter(|&c| {
                        let x = c % width;
                        match start {
                            StartDist::Train => x < half,
                            StartDist::Heldout => x >= width - half,
                            StartDist::Any => true,
                        }
                    })
                    .collect()
            }
            (EnvKind::Intent { .. }, _) => Vec::new(),
        }
    }

    pub fn is_goal(&self, cell: usize) -> bool {
        match self.kind {
            EnvKind::Line { length } => cell == length - 1,
            EnvKind::Grid { width, height } => cell == (height - 1) * width || cell == height * width - 1,
            EnvKind::Intent { .. } => false,
        }
    }

    /// Deterministic successor cell for a tabular env (no slip).
    pub fn move_cell(&self, cell: usize, action: usize) -> usize {
        match self.kind {
            EnvKind::Line { length } => match action {
                0 => cell.saturating_sub(1),
                _ => (cell + 1).min(length - 1),
            },
            EnvKind::Grid { width, height } => {
                let (x, y) = (cell % width, cell / width);
                let (x, y) = match action {
                    0 => (x, y.saturating_sub(1)),
                    1 => (x, (y + 1).min(height - 1)),
                    2 => (x.saturating_sub(1), y),
                    _ => ((x + 1).min(width - 1), y),
                };
                y * width + x
            }
            EnvKind::Intent { .. } => cell,
        }
    }

    /// Base reward for entering `next` (before negation and shift).
    fn cell_reward(&self, next: usize) -> (f64, bool) {
        if self.is_goal(next) {
            (GOAL_REWARD, true)
        } else {
            (STEP_PENALTY, false)
        }
    }

    /// Reward actually paid for a base reward.
    pub fn shape_reward(&self, base: f64) -> f64 {
        let r = if self.negated { -base } else { base };
        r + self.perturbation.reward_shift
    }

    pub fn name(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for EnvSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inner = match self.kind {
            EnvKind::Line { length } => format!("line-world({length})"),
            EnvKind::Grid { width, height } => format!("grid-world({width},{height})"),
            EnvKind::Intent { intents, features } => format!("intent-world({intents},{features})"),
        };
        if self.negated {
            write!(f, "negated({inner})")
        } else {
            f.write_str(&inner)
        }
    }
}

impl FromStr for EnvSpec {
    type Err = GatnError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (head, args) = s
            .strip_suffix(')')
            .and_then(|body| body.split_once('('))
            .ok_or_else(|| GatnError::config(format!("env `{s}` is not of the form kind(args)")))?;
        let head = head.trim();
        if head == "negated" {
            return Ok(args.parse::<EnvSpec>()?.negate());
        }
        let nums: Vec<usize> = args
            .split(',')
            .map(|a| {
                a.trim()
                    .parse()
                    .map_err(|_| GatnError::config(format!("env `{s}`: `{a}` is not a positive integer")))
            })
            .collect::<Result<_>>()?;
        match (head, nums.as_slice()) {
            ("line-world", &[length]) => EnvSpec::line(length),
            ("grid-world", &[width, height]) => EnvSpec::grid(width, height),
            ("intent-world", &[intents, features]) => EnvSpec::intent(intents, features),
            _ => Err(GatnError::config(format!("unknown env `{s}`"))),
        }
    }
}

/// Returns a copy of `spec` with the perturbation applied; `spec` is untouched.
pub fn apply_perturbation(spec: &EnvSpec, config: PerturbationConfig) -> Result<EnvSpec> {
    config.validate()?;
    if config.drift != 0.0 && spec.is_tabular() {
        return Err(GatnError::config(format!("intent drift applies only to intent-world, not {spec}")));
    }
    let mut out = spec.clone();
    out.perturbation = config;
    Ok(out)
}

/// One environment interaction.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
}

/// A running episode of one environment.
#[derive(Clone, Debug)]
pub struct Env {
    spec: EnvSpec,
    prototypes: Vec<Vec<f64>>,
    /// Cell index for tabular envs, current intent for intent-world.
    position: usize,
    steps: usize,
    last_obs: Vec<f64>,
}

impl Env {
    pub fn new(spec: EnvSpec) -> Result<Self> {
        spec.perturbation.validate()?;
        if spec.perturbation.drift != 0.0 && spec.is_tabular() {
            return Err(GatnError::config(format!("intent drift applies only to intent-world, not {spec}")));
        }
        let prototypes = match spec.kind {
            EnvKind::Intent { intents, features } => intent_prototypes(intents, features, spec.perturbation.drift),
            _ => Vec::new(),
        };
        Ok(Self {
            spec,
            prototypes,
            position: 0,
            steps: 0,
            last_obs: Vec::new(),
        })
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn prototypes(&self) -> &[Vec<f64>] {
        &self.prototypes
    }

    pub fn position(&self) -> usize {
        self.position
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn reset<R: Rng + ?Sized>(&mut self, start: StartDist, rng: &mut R) -> Vec<f64> {
        self.steps = 0;
        let obs = match self.spec.kind {
            EnvKind::Intent { intents, features } => {
                self.position = rng.random_range(0..intents);
                let mut noise: Vec<f64> = (0..features)
                    .map(|_| {
                        let n: f64 = StandardNormal.sample(rng);
                        INTENT_NOISE * n
                    })
                    .collect();
                noise[0] = match start {
                    StartDist::Train => noise[0].abs(),
                    StartDist::Heldout => -noise[0].abs().max(f64::MIN_POSITIVE),
                    StartDist::Any => noise[0],
                };
                let clean: Vec<f64> = self.prototypes[self.position]
                    .iter()
                    .zip(&noise)
                    .map(|(p, n)| p + n)
                    .collect();
                self.add_obs_noise(clean, rng)
            }
            _ => {
                let cells = self.spec.start_cells(start);
                self.position = cells[rng.random_range(0..cells.len())];
                self.observe(rng)
            }
        };
        self.last_obs = obs.clone();
        obs
    }

    /// Places a tabular agent at `cell` and returns its observation.
    pub fn reset_to<R: Rng + ?Sized>(&mut self, cell: usize, rng: &mut R) -> Result<Vec<f64>> {
        if !self.spec.is_tabular() || cell >= self.spec.state_dim() {
            return Err(GatnError::usage(format!("cell {cell} is not a state of {}", self.spec)));
        }
        self.steps = 0;
        self.position = cell;
        self.last_obs = self.observe(rng);
        Ok(self.last_obs.clone())
    }

    pub fn step<R: Rng + ?Sized>(&mut self, action: usize, rng: &mut R) -> Result<Transition> {
        let actions = self.spec.action_count();
        if action >= actions {
            return Err(GatnError::usage(format!(
                "action {action} out of range for {} ({actions} actions)",
                self.spec
            )));
        }
        self.steps += 1;
        let (base_reward, terminal) = match self.spec.kind {
            EnvKind::Intent { intents, .. } => {
                let correct = action == self.position;
                self.position = rng.random_range(0..intents);
                (if correct { INTENT_CORRECT } else { INTENT_WRONG }, false)
            }
            _ => {
                let mut effective = action;
                let slip = self.spec.perturbation.slip;
                if slip > 0.0 && rng.random::<f64>() < slip {
                    // uniform over the other actions
                    let k = rng.random_range(0..actions - 1);
                    effective = if k >= action { k + 1 } else { k };
                }
                self.position = self.spec.move_cell(self.position, effective);
                self.spec.cell_reward(self.position)
            }
        };
        let next = self.observe(rng);
        let transition = Transition {
            state: std::mem::replace(&mut self.last_obs, next.clone()),
            action,
            reward: self.spec.shape_reward(base_reward),
            next_state: next,
            done: terminal || self.steps >= self.spec.cap,
        };
        Ok(transition)
    }

    fn observe<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let clean = match self.spec.kind {
            EnvKind::Intent { .. } => self.prototypes[self.position]
                .iter()
                .map(|p| {
                    let n: f64 = StandardNormal.sample(rng);
                    p + INTENT_NOISE * n
                })
                .collect(),
            _ => {
                let mut v = vec![0.0; self.spec.state_dim()];
                v[self.position] = 1.0;
                v
            }
        };
        self.add_obs_noise(clean, rng)
    }

    fn add_obs_noise<R: Rng + ?Sized>(&self, mut obs: Vec<f64>, rng: &mut R) -> Vec<f64> {
        let sigma = self.spec.perturbation.obs_sigma;
        if sigma > 0.0 {
            for v in &mut obs {
                let n: f64 = StandardNormal.sample(rng);
                *v += sigma * n;
            }
        }
        obs
    }
}

/// Unit prototypes `e_k`, rotated by `drift` radians in the planes
/// `(i, i + V/2)`. The rotation is orthogonal, so pairwise geometry (and
/// with isotropic noise, the optimal decoding accuracy) is preserved.
pub fn intent_prototypes(intents: usize, features: usize, drift: f64) -> Vec<Vec<f64>> {
    let half = features / 2;
    let (sin, cos) = drift.sin_cos();
    (0..intents)
        .map(|k| {
            let mut p = vec![0.0; features];
            p[k] = 1.0;
            if drift != 0.0 {
                for i in 0..half {
                    let (a, b) = (p[i], p[i + half]);
                    p[i] = cos * a - sin * b;
                    p[i + half] = sin * a + cos * b;
                }
            }
            p
        })
        .collect()
}

/// Collects `count` observations from uniform-random rollouts that start
/// from the training distribution.
pub fn sample_states<R: Rng + ?Sized>(spec: &EnvSpec, count: usize, rng: &mut R) -> Result<Vec<Vec<f64>>> {
    let mut env = Env::new(spec.clone())?;
    let mut out = Vec::with_capacity(count);
    if count == 0 {
        return Ok(out);
    }
    out.push(env.reset(StartDist::Train, rng));
    while out.len() < count {
        let action = rng.random_range(0..spec.action_count());
        let t = env.step(action, rng)?;
        out.push(t.next_state);
        if t.done && out.len() < count {
            out.push(env.reset(StartDist::Train, rng));
        }
    }
    Ok(out)
}
