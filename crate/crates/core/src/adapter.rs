//! Robustness-aware policy adapter.
//!
//! A gate network reads the gate input (the latent code, or the raw state
//! for the A2T-style baseline) and emits `N + 1` logits, one per source
//! plus one for the base network. Logits of sources the scheduler did not
//! select are masked out, the rest go through a softmax, and the target
//! Q-vector is the resulting convex combination of the aligned source
//! Q-vectors and the base network's Q-vector.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::diffcore::{sgd_step, MlpTape, Network, ParamGroup, Parameterized};
use crate::envs::{EnvSpec, StateMapper};
use crate::error::{GatnError, Result};

/// Maps a source's actions onto the target action set.
///
/// `map[j]` is the target action that source action `j` stands for.
/// Target actions no source action maps to receive the mean source Q.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActionAligner {
    map: Vec<Option<usize>>,
    target_actions: usize,
}

impl ActionAligner {
    pub fn identity(n: usize) -> Self {
        Self {
            map: (0..n).map(Some).collect(),
            target_actions: n,
        }
    }

    pub fn new(map: Vec<Option<usize>>, target_actions: usize) -> Result<Self> {
        let mut used = vec![false; target_actions];
        for (j, t) in map.iter().enumerate() {
            if let Some(t) = *t {
                if t >= target_actions {
                    return Err(GatnError::config(format!(
                        "aligner maps source action {j} to target action {t}, but the target has {target_actions}"
                    )));
                }
                if std::mem::replace(&mut used[t], true) {
                    return Err(GatnError::config(format!(
                        "aligner maps two source actions onto target action {t}"
                    )));
                }
            }
        }
        Ok(Self { map, target_actions })
    }

    /// Parses `2,3` or `0,-,1`: one entry per source action, `-` = dropped.
    pub fn parse(text: &str, target_actions: usize) -> Result<Self> {
        let map = text
            .split(',')
            .map(str::trim)
            .map(|t| match t {
                "-" => Ok(None),
                t => t
                    .parse()
                    .map(Some)
                    .map_err(|_| GatnError::config(format!("aligner entry `{t}` is neither an index nor `-`"))),
            })
            .collect::<Result<_>>()?;
        Self::new(map, target_actions)
    }

    pub fn source_actions(&self) -> usize {
        self.map.len()
    }

    pub fn target_actions(&self) -> usize {
        self.target_actions
    }

    pub fn align(&self, source_q: &[f64]) -> Vec<f64> {
        let mean = source_q.iter().sum::<f64>() / source_q.len().max(1) as f64;
        let mut out = vec![mean; self.target_actions];
        for (j, t) in self.map.iter().enumerate() {
            if let Some(t) = *t {
                out[t] = source_q[j];
            }
        }
        out
    }
}

impl fmt::Display for ActionAligner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .map
            .iter()
            .map(|t| t.map_or_else(|| "-".to_string(), |t| t.to_string()))
            .collect();
        f.write_str(&parts.join(","))
    }
}

/// One frozen source solution with its state mapper and action aligner.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceEntry {
    pub env: EnvSpec,
    pub network: Network,
    pub mapper: StateMapper,
    pub aligner: ActionAligner,
}

/// The frozen source library. Never mutated after construction, so one
/// instance can be shared between concurrent runs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SourceLibrary {
    entries: Vec<SourceEntry>,
}

impl SourceLibrary {
    pub fn new(entries: Vec<SourceEntry>) -> Result<Self> {
        for (i, e) in entries.iter().enumerate() {
            if e.mapper.source_dim != e.network.input_dim() {
                return Err(GatnError::config(format!(
                    "source {i}: mapper emits {} values, network expects {}",
                    e.mapper.source_dim,
                    e.network.input_dim()
                )));
            }
            if e.aligner.source_actions() != e.network.output_dim() {
                return Err(GatnError::config(format!(
                    "source {i}: aligner covers {} actions, network emits {}",
                    e.aligner.source_actions(),
                    e.network.output_dim()
                )));
            }
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[SourceEntry] {
        &self.entries
    }

    /// `align_i(K_i(h_i(state)))`.
    pub fn expert_q(&self, i: usize, target_state: &[f64]) -> Result<Vec<f64>> {
        let e = self
            .entries
            .get(i)
            .ok_or_else(|| GatnError::usage(format!("source {i} not in a library of {}", self.entries.len())))?;
        let mapped = e.mapper.map_state(target_state)?;
        Ok(e.aligner.align(&e.network.predict(&mapped)?))
    }
}

/// Softmax weights over the selected sources followed by the base slot.
#[derive(Clone, Debug, PartialEq)]
pub struct GateWeights {
    pub weights: Vec<f64>,
    pub logits: Vec<f64>,
    pub selection: Vec<usize>,
}

impl GateWeights {
    pub fn base_weight(&self) -> f64 {
        *self.weights.last().unwrap()
    }

    /// Weights spread over all `n_sources + 1` slots, zero where unselected.
    pub fn full(&self, n_sources: usize) -> Vec<f64> {
        let mut out = vec![0.0; n_sources + 1];
        for (k, &i) in self.selection.iter().enumerate() {
            out[i] = self.weights[k];
        }
        out[n_sources] = self.base_weight();
        out
    }
}

/// Masked softmax. `all_logits` has one entry per source plus the base
/// network last; only the selected sources and the base participate.
pub fn gate_weights(all_logits: &[f64], selection: &[usize]) -> Result<GateWeights> {
    let n = all_logits
        .len()
        .checked_sub(1)
        .ok_or_else(|| GatnError::usage("gate emitted no logits"))?;
    let mut seen = vec![false; n];
    for &i in selection {
        if i >= n || std::mem::replace(&mut seen[i], true) {
            return Err(GatnError::usage(format!("invalid selection {selection:?} over {n} sources")));
        }
    }
    let logits: Vec<f64> = selection
        .iter()
        .map(|&i| all_logits[i])
        .chain(std::iter::once(all_logits[n]))
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|e| (e - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(GateWeights {
        weights: exps.iter().map(|e| e / sum).collect(),
        logits,
        selection: selection.to_vec(),
    })
}

/// Convex combination `sum_k w_k q_k`; `expert_qs` lists the selected
/// sources in selection order, then the base network.
pub fn compose(expert_qs: &[Vec<f64>], weights: &GateWeights) -> Result<Vec<f64>> {
    if expert_qs.len() != weights.weights.len() {
        return Err(GatnError::usage(format!(
            "{} expert Q-vectors for {} gate weights",
            expert_qs.len(),
            weights.weights.len()
        )));
    }
    let actions = expert_qs[0].len();
    let mut out = vec![0.0; actions];
    for (q, &w) in expert_qs.iter().zip(&weights.weights) {
        if q.len() != actions {
            return Err(GatnError::config("expert Q-vectors disagree on the target action count"));
        }
        for (o, v) in out.iter_mut().zip(q) {
            *o += w * v;
        }
    }
    Ok(out)
}

/// Where the robustness noise is injected.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RobustMode {
    /// Perturb the gate input (the latent code).
    Latent,
    /// Perturb the raw state and recompute everything downstream.
    State,
}

/// Everything `K_T` needs at one state.
#[derive(Clone, Debug, PartialEq)]
pub struct StatePoint {
    pub state: Vec<f64>,
    pub gate_input: Vec<f64>,
    /// Aligned Q-vectors of the selected sources, selection order.
    pub source_qs: Vec<Vec<f64>>,
}

/// Tapes and intermediates of one `K_T` evaluation.
#[derive(Clone, Debug)]
pub struct ComposeTrace {
    pub q: Vec<f64>,
    pub weights: GateWeights,
    experts: Vec<Vec<f64>>,
    gate_tape: Option<MlpTape>,
    base_tape: MlpTape,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GradTargets {
    pub gate: bool,
    pub base: bool,
}

impl GradTargets {
    pub const GATE: GradTargets = GradTargets { gate: true, base: false };
    pub const BASE: GradTargets = GradTargets { gate: false, base: true };
    pub const ALL: GradTargets = GradTargets { gate: true, base: true };
}

/// `K_T`: gate, base network and the shared frozen library.
#[derive(Clone, Debug)]
pub struct TransferModel {
    /// `None` for the scratch baseline, which is `K_B` alone.
    pub gate: Option<Network>,
    pub base: Network,
    pub library: Arc<SourceLibrary>,
    /// Total source-network evaluations so far.
    pub forward_passes: u64,
}

impl TransferModel {
    pub fn new(gate: Option<Network>, base: Network, library: Arc<SourceLibrary>) -> Result<Self> {
        if let Some(g) = &gate {
            if g.output_dim() != library.len() + 1 {
                return Err(GatnError::config(format!(
                    "gate emits {} logits for {} sources plus base",
                    g.output_dim(),
                    library.len()
                )));
            }
        }
        for (i, e) in library.entries().iter().enumerate() {
            if e.aligner.target_actions() != base.output_dim() {
                return Err(GatnError::config(format!(
                    "source {i} aligns onto {} actions, target has {}",
                    e.aligner.target_actions(),
                    base.output_dim()
                )));
            }
        }
        Ok(Self {
            gate,
            base,
            library,
            forward_passes: 0,
        })
    }

    pub fn n_sources(&self) -> usize {
        self.library.len()
    }

    /// Evaluates only the selected sources and bumps the pass counter.
    pub fn source_qs(&mut self, state: &[f64], selection: &[usize]) -> Result<Vec<Vec<f64>>> {
        let qs = selection
            .iter()
            .map(|&i| self.library.expert_q(i, state))
            .collect::<Result<Vec<_>>>()?;
        self.forward_passes += selection.len() as u64;
        Ok(qs)
    }

    pub fn point(&mut self, state: &[f64], gate_input: Vec<f64>, selection: &[usize]) -> Result<StatePoint> {
        Ok(StatePoint {
            state: state.to_vec(),
            source_qs: self.source_qs(state, selection)?,
            gate_input,
        })
    }

    pub fn weights(&self, gate_input: &[f64], selection: &[usize]) -> Result<GateWeights> {
        match &self.gate {
            Some(g) => gate_weights(&g.predict(gate_input)?, selection),
            None => gate_weights(&[0.0], &[]),
        }
    }

    pub fn forward(&self, point: &StatePoint, selection: &[usize]) -> Result<ComposeTrace> {
        if point.source_qs.len() != selection.len() {
            return Err(GatnError::usage("source Q-vectors do not match the selection"));
        }
        let (weights, gate_tape) = match &self.gate {
            Some(g) => {
                let (logits, tape) = g.forward(&point.gate_input)?;
                (gate_weights(&logits, selection)?, Some(tape))
            }
            None => {
                if !selection.is_empty() {
                    return Err(GatnError::usage("sources selected for a model without a gate"));
                }
                (gate_weights(&[0.0], &[])?, None)
            }
        };
        let (base_q, base_tape) = self.base.forward(&point.state)?;
        let mut experts = point.source_qs.clone();
        experts.push(base_q);
        let q = compose(&experts, &weights)?;
        Ok(ComposeTrace {
            q,
            weights,
            experts,
            gate_tape,
            base_tape,
        })
    }

    /// Backpropagates `d loss / d K_T` into the chosen groups.
    pub fn backward(&mut self, trace: &ComposeTrace, dq: &[f64], targets: GradTargets) -> Result<()> {
        let w = &trace.weights.weights;
        if targets.gate {
            if let (Some(gate), Some(tape)) = (self.gate.as_mut(), trace.gate_tape.as_ref()) {
                // dL/dw_k = dq . q_k, then through the softmax
                let dw: Vec<f64> = trace
                    .experts
                    .iter()
                    .map(|q| q.iter().zip(dq).map(|(a, b)| a * b).sum())
                    .collect();
                let mean: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
                let mut dlogits = vec![0.0; gate.output_dim()];
                let n = gate.output_dim() - 1;
                for (k, &i) in trace.weights.selection.iter().enumerate() {
                    dlogits[i] = w[k] * (dw[k] - mean);
                }
                let last = w.len() - 1;
                dlogits[n] = w[last] * (dw[last] - mean);
                gate.backward(tape, &dlogits)?;
            }
        }
        if targets.base {
            let wb = *w.last().unwrap();
            let g: Vec<f64> = dq.iter().map(|d| wb * d).collect();
            self.base.backward(&trace.base_tape, &g)?;
        }
        Ok(())
    }

    /// `|| K_T(perturbed) - K_T(clean) ||^2` with one Gaussian draw.
    ///
    /// With `grad = Some((scale, targets))` the scaled gradient is
    /// accumulated through both the clean and the perturbed branch.
    /// `encode` recomputes the gate input from a raw state (state mode).
    #[allow(clippy::too_many_arguments)]
    pub fn robust_loss<R: Rng + ?Sized>(
        &mut self,
        point: &StatePoint,
        selection: &[usize],
        sigma: f64,
        mode: RobustMode,
        encode: &dyn Fn(&[f64]) -> Result<Vec<f64>>,
        rng: &mut R,
        grad: Option<(f64, GradTargets)>,
    ) -> Result<f64> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(GatnError::config(format!("robustness sigma {sigma}")));
        }
        let normal = Normal::new(0.0, sigma).map_err(|e| GatnError::config(e.to_string()))?;
        let perturbed = match mode {
            RobustMode::Latent => {
                if self.gate.is_none() {
                    return Ok(0.0);
                }
                StatePoint {
                    state: point.state.clone(),
                    gate_input: point.gate_input.iter().map(|v| v + normal.sample(rng)).collect(),
                    source_qs: point.source_qs.clone(),
                }
            }
            RobustMode::State => {
                let state: Vec<f64> = point.state.iter().map(|v| v + normal.sample(rng)).collect();
                let gate_input = encode(&state)?;
                self.point(&state, gate_input, selection)?
            }
        };
        let clean = self.forward(point, selection)?;
        let noisy = self.forward(&perturbed, selection)?;
        let diff: Vec<f64> = noisy.q.iter().zip(&clean.q).map(|(a, b)| a - b).collect();
        let loss = diff.iter().map(|d| d * d).sum();
        if let Some((scale, targets)) = grad {
            let up: Vec<f64> = diff.iter().map(|d| 2.0 * scale * d).collect();
            let down: Vec<f64> = up.iter().map(|u| -u).collect();
            self.backward(&noisy, &up, targets)?;
            self.backward(&clean, &down, targets)?;
        }
        Ok(loss)
    }
}

impl Parameterized for TransferModel {
    fn groups(&self) -> Vec<&ParamGroup> {
        let mut out: Vec<&ParamGroup> = self.gate.iter().map(|g| &g.params).collect();
        out.push(&self.base.params);
        out
    }
    fn groups_mut(&mut self) -> Vec<&mut ParamGroup> {
        let mut out: Vec<&mut ParamGroup> = self.gate.iter_mut().map(|g| &mut g.params).collect();
        out.push(&mut self.base.params);
        out
    }
}

/// Hyperparameters of one adapter update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdapterHyper {
    pub gamma: f64,
    pub lr: f64,
    pub lambda: f64,
    pub sigma: f64,
    pub mode: RobustMode,
}

/// One online update of the adapter.
#[derive(Clone, Copy, Debug)]
pub struct AdapterStep<'a> {
    pub current: &'a StatePoint,
    /// `None` on terminal transitions (no bootstrap).
    pub next: Option<&'a StatePoint>,
    pub action: usize,
    pub reward: f64,
}

/// Semi-gradient TD target `r + gamma * max_a' Q(s', a')`.
pub fn td_target(reward: f64, gamma: f64, next_q: Option<&[f64]>) -> f64 {
    match next_q {
        Some(q) => reward + gamma * q.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        None => reward,
    }
}

/// SGD on `delta^2 + lambda * L_robust` with respect to the gate only.
/// Returns `(delta^2, L_robust)`; source networks and `K_B` are untouched.
pub fn update_adapter<R: Rng + ?Sized>(
    model: &mut TransferModel,
    step: AdapterStep<'_>,
    selection: &[usize],
    hyper: &AdapterHyper,
    encode: &dyn Fn(&[f64]) -> Result<Vec<f64>>,
    rng: &mut R,
) -> Result<(f64, f64)> {
    if model.gate.is_none() {
        return Err(GatnError::usage("adapter update on a model without a gate"));
    }
    model.gate.as_mut().unwrap().params.zero_grad();
    let next_q = match step.next {
        Some(p) => Some(model.forward(p, selection)?.q),
        None => None,
    };
    let target = td_target(step.reward, hyper.gamma, next_q.as_deref());
    let trace = model.forward(step.current, selection)?;
    let delta = target - trace.q[step.action];
    let mut dq = vec![0.0; trace.q.len()];
    dq[step.action] = -2.0 * delta;
    model.backward(&trace, &dq, GradTargets::GATE)?;

    let robust = if hyper.lambda > 0.0 {
        model.robust_loss(
            step.current,
            selection,
            hyper.sigma,
            hyper.mode,
            encode,
            rng,
            Some((hyper.lambda, GradTargets::GATE)),
        )?
    } else {
        0.0
    };
    let td_loss = delta * delta;
    if !(td_loss + hyper.lambda * robust).is_finite() {
        return Err(GatnError::numerical(
            "adapt",
            format!("loss is non-finite (td {td_loss}, robust {robust})"),
        ));
    }
    sgd_step(&mut model.gate.as_mut().unwrap().params, hyper.lr)?;
    Ok((td_loss, robust))
}
