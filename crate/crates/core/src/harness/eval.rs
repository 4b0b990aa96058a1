//! Greedy evaluation and the derived metrics: generalization gap,
//! normalized robustness and the source forward-pass cost ratio.

use crate::envs::{apply_perturbation, Env, EnvSpec, PerturbationConfig, StartDist};
use crate::error::{GatnError, Result};
use crate::rng::{substream, Rng, Stream};
use crate::trainer::{run_greedy_episode, Agent};

use super::metrics::RunMetrics;

/// Floor on the clean-return margin in the robustness denominator.
pub const ROBUSTNESS_DENOM: f64 = 1e-9;

/// Something that can play a greedy episode.
pub trait Policy {
    fn play(&mut self, env: &mut Env, start: StartDist, rng: &mut Rng) -> Result<f64>;
}

impl Policy for Agent {
    fn play(&mut self, env: &mut Env, start: StartDist, rng: &mut Rng) -> Result<f64> {
        run_greedy_episode(self, env, start, rng)
    }
}

/// A fixed action per tabular cell.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TabularPolicy {
    pub actions: Vec<usize>,
}

impl Policy for TabularPolicy {
    fn play(&mut self, env: &mut Env, start: StartDist, rng: &mut Rng) -> Result<f64> {
        if !env.spec().is_tabular() || self.actions.len() != env.spec().state_dim() {
            return Err(GatnError::config(format!(
                "tabular policy over {} cells cannot drive {}",
                self.actions.len(),
                env.spec()
            )));
        }
        env.reset(start, rng);
        let mut ret = 0.0;
        loop {
            let t = env.step(self.actions[env.position()], rng)?;
            ret += t.reward;
            if t.done {
                return Ok(ret);
            }
        }
    }
}

/// Mean greedy return over `episodes` episodes of the perturbed env.
pub fn evaluate<P: Policy + ?Sized>(
    policy: &mut P,
    spec: &EnvSpec,
    episodes: usize,
    start: StartDist,
    perturbation: PerturbationConfig,
    seed: u64,
) -> Result<f64> {
    if episodes == 0 {
        return Err(GatnError::EmptyEvaluation);
    }
    let mut env = Env::new(apply_perturbation(spec, perturbation)?)?;
    let mut rng = substream(seed, Stream::Eval);
    let mut total = 0.0;
    for _ in 0..episodes {
        total += policy.play(&mut env, start, &mut rng)?;
    }
    Ok(total / episodes as f64)
}

/// `evaluate(train starts) - evaluate(heldout starts)`.
pub fn generalization_gap<P: Policy + ?Sized>(policy: &mut P, spec: &EnvSpec, episodes: usize, seed: u64) -> Result<f64> {
    if spec.is_tabular() && spec.start_cells(StartDist::Heldout).is_empty() {
        return Err(GatnError::config(format!("{spec} has no held-out start states")));
    }
    let clean = PerturbationConfig::default();
    let train = evaluate(policy, spec, episodes, StartDist::Train, clean, seed)?;
    let heldout = evaluate(policy, spec, episodes, StartDist::Heldout, clean, seed)?;
    Ok(train - heldout)
}

/// `clamp((R_pert - R_min) / (max(R_clean, R_min + d) - R_min), 0, 1)`.
pub fn normalized_robustness(r_clean: f64, r_pert: f64, r_min: f64) -> f64 {
    let denom = r_clean.max(r_min + ROBUSTNESS_DENOM) - r_min;
    ((r_pert - r_min) / denom).clamp(0.0, 1.0)
}

/// Clean and perturbed evaluations share a seed.
pub fn robustness_score<P: Policy + ?Sized>(
    policy: &mut P,
    spec: &EnvSpec,
    perturbation: PerturbationConfig,
    episodes: usize,
    seed: u64,
) -> Result<f64> {
    let (r_min, _) = spec.return_bounds();
    let clean = evaluate(policy, spec, episodes, StartDist::Train, PerturbationConfig::default(), seed)?;
    let pert = evaluate(policy, spec, episodes, StartDist::Train, perturbation, seed)?;
    Ok(normalized_robustness(clean, pert, r_min))
}

/// Total source forward passes of `ours` divided by those of `comparator`.
pub fn compute_cost_report(ours: &RunMetrics, comparator: &RunMetrics) -> f64 {
    let num = ours.forward_passes();
    if num == 0 {
        return 0.0;
    }
    num as f64 / comparator.forward_passes() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::oracle::{optimal_return, value_iteration};
    use crate::trainer::EpisodeRow;

    fn optimal(spec: &EnvSpec) -> TabularPolicy {
        TabularPolicy {
            actions: value_iteration(spec, 1.0).unwrap().policy,
        }
    }

    #[test]
    fn empty_evaluation() {
        let spec = EnvSpec::line(10).unwrap();
        let err = evaluate(&mut optimal(&spec), &spec, 0, StartDist::Train, Default::default(), 0).unwrap_err();
        assert!(matches!(err, GatnError::EmptyEvaluation));
        assert!(err.to_string().contains("empty evaluation"));
    }

    #[test]
    fn optimal_line_policy() {
        let spec = EnvSpec::line(10).unwrap();
        let r = evaluate(&mut optimal(&spec), &spec, 20, StartDist::Train, Default::default(), 3).unwrap();
        assert!((r - (1.0 - 0.01 * 8.0)).abs() < 1e-12);
        assert!((r - optimal_return(&spec, StartDist::Train).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn optimal_grid_policy_has_no_gap() {
        let spec = EnvSpec::grid(6, 6).unwrap();
        let gap = generalization_gap(&mut optimal(&spec), &spec, 200, 5).unwrap();
        assert!(gap.abs() < 0.02, "{gap}");
        let exact = optimal_return(&spec, StartDist::Train).unwrap() - optimal_return(&spec, StartDist::Heldout).unwrap();
        assert!(exact.abs() < 1e-12);
    }

    #[test]
    fn robustness_arithmetic() {
        assert_eq!(normalized_robustness(1.0, 0.5, 0.0), 0.5);
        assert_eq!(normalized_robustness(1.0, -1.0, 0.0), 0.0);
        assert_eq!(normalized_robustness(1.0, 2.0, 0.0), 1.0);
        assert_eq!(normalized_robustness(-5.0, -5.0, -5.0), 0.0);
    }

    #[test]
    fn identity_perturbation_scores_one() {
        let spec = EnvSpec::grid(4, 4).unwrap();
        let s = robustness_score(&mut optimal(&spec), &spec, Default::default(), 30, 1).unwrap();
        assert_eq!(s, 1.0);
    }

    #[test]
    fn cost_ratios() {
        let rows = |per: u64| {
            RunMetrics::new(
                (1..=10)
                    .map(|e| EpisodeRow {
                        seed: 0,
                        episode: e,
                        ret: 0.0,
                        epsilon: 0.0,
                        td_loss: 0.0,
                        vae_loss: 0.0,
                        robust_loss: 0.0,
                        selected: vec![],
                        gate_weights: vec![],
                        forward_passes: per * 8 * e as u64,
                    })
                    .collect(),
            )
        };
        assert_eq!(compute_cost_report(&rows(2), &rows(4)), 0.5);
        assert_eq!(compute_cost_report(&rows(4), &rows(4)), 1.0);
        assert_eq!(compute_cost_report(&rows(0), &rows(4)), 0.0);
    }
}
