//! Exact reference solutions for the toy environments.

use std::collections::VecDeque;

use crate::envs::{EnvKind, EnvSpec, StartDist, GOAL_REWARD, STEP_PENALTY};
use crate::error::{GatnError, Result};

/// Index of the prototype closest (Euclidean) to `obs`.
pub fn nearest_prototype(prototypes: &[Vec<f64>], obs: &[f64]) -> usize {
    let dist = |p: &Vec<f64>| p.iter().zip(obs).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    let mut best = 0;
    for (k, p) in prototypes.iter().enumerate() {
        if dist(p) < dist(&prototypes[best]) {
            best = k;
        }
    }
    best
}

/// Cells reachable from the training starts (breadth-first; goals absorb).
pub fn reachable_cells(spec: &EnvSpec) -> Vec<bool> {
    let mut seen = vec![false; spec.state_dim()];
    if !spec.is_tabular() {
        return seen;
    }
    let mut queue: VecDeque<usize> = spec.start_cells(StartDist::Train).into();
    for &c in &queue {
        seen[c] = true;
    }
    while let Some(cell) = queue.pop_front() {
        if spec.is_goal(cell) {
            continue;
        }
        for a in 0..spec.action_count() {
            let next = spec.move_cell(cell, a);
            if !seen[next] {
                seen[next] = true;
                queue.push_back(next);
            }
        }
    }
    seen
}

#[derive(Clone, Debug, PartialEq)]
pub struct TabularSolution {
    pub values: Vec<f64>,
    pub policy: Vec<usize>,
}

/// Value iteration on the exact tabular model of a line/grid env,
/// including slip, negation and reward shift. Goals are absorbing with
/// value zero; the episode cap is not modelled.
pub fn value_iteration(spec: &EnvSpec, gamma: f64) -> Result<TabularSolution> {
    if !spec.is_tabular() {
        return Err(GatnError::config(format!("value iteration needs a tabular env, got {spec}")));
    }
    let n = spec.state_dim();
    let actions = spec.action_count();
    let slip = spec.perturbation.slip;
    let q = |values: &[f64], cell: usize, a: usize| -> f64 {
        let mut total = 0.0;
        for eff in 0..actions {
            let p = if eff == a {
                1.0 - slip
            } else {
                slip / (actions - 1) as f64
            };
            if p == 0.0 {
                continue;
            }
            let next = spec.move_cell(cell, eff);
            let (base, cont) = if spec.is_goal(next) {
                (GOAL_REWARD, 0.0)
            } else {
                (STEP_PENALTY, values[next])
            };
            total += p * (spec.shape_reward(base) + gamma * cont);
        }
        total
    };
    let mut values = vec![0.0; n];
    for _ in 0..100_000 {
        let mut delta: f64 = 0.0;
        let mut next_values = vec![0.0; n];
        for cell in 0..n {
            if spec.is_goal(cell) {
                continue;
            }
            let best = (0..actions).map(|a| q(&values, cell, a)).fold(f64::NEG_INFINITY, f64::max);
            delta = delta.max((best - values[cell]).abs());
            next_values[cell] = best;
        }
        values = next_values;
        if !values.iter().all(|v| v.is_finite()) {
            break;
        }
        if delta < 1e-13 {
            let policy = (0..n)
                .map(|cell| {
                    (0..actions).fold(0, |best, a| {
                        if q(&values, cell, a) > q(&values, cell, best) + 1e-12 {
                            a
                        } else {
                            best
                        }
                    })
                })
                .collect();
            return Ok(TabularSolution { values, policy });
        }
    }
    Err(GatnError::numerical(
        format!("value iteration on {spec}"),
        "did not converge (undiscounted positive-reward loop?)",
    ))
}

/// Optimal expected undiscounted return from a start distribution.
pub fn optimal_return(spec: &EnvSpec, start: StartDist) -> Result<f64> {
    let solution = value_iteration(spec, 1.0)?;
    let cells = spec.start_cells(start);
    Ok(cells.iter().map(|&c| solution.values[c]).sum::<f64>() / cells.len() as f64)
}

/// Grid dimensions, if `spec` is a grid.
pub fn grid_dims(spec: &EnvSpec) -> Option<(usize, usize)> {
    match spec.kind {
        EnvKind::Grid { width, height } => Some((width, height)),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{apply_perturbation, Env, PerturbationConfig};
    use crate::rng::{substream, Stream};
    use rand::Rng;

    #[test]
    fn line_world_optimum() {
        let spec = EnvSpec::line(10).unwrap();
        let sol = value_iteration(&spec, 1.0).unwrap();
        assert!((sol.values[0] - (1.0 - 0.01 * 8.0)).abs() < 1e-12);
        assert!(sol.policy[..9].iter().all(|&a| a == 1));
    }

    #[test]
    fn grid_halves_have_equal_optimal_returns() {
        let spec = EnvSpec::grid(6, 6).unwrap();
        let train = optimal_return(&spec, StartDist::Train).unwrap();
        let held = optimal_return(&spec, StartDist::Heldout).unwrap();
        assert!((train - held).abs() < 1e-12);
    }

    #[test]
    fn every_grid_cell_reachable() {
        assert!(reachable_cells(&EnvSpec::grid(4, 4).unwrap()).iter().all(|&r| r));
    }

    #[test]
    fn negated_undiscounted_diverges() {
        let spec = EnvSpec::line(10).unwrap().negate();
        assert!(value_iteration(&spec, 1.0).is_err());
        assert!(value_iteration(&spec, 0.9).is_ok());
    }

    #[test]
    fn drift_preserves_optimal_accuracy() {
        let spec = EnvSpec::intent(4, 8).unwrap();
        let drifted = apply_perturbation(
            &spec,
            PerturbationConfig {
                drift: std::f64::consts::FRAC_PI_8,
                ..Default::default()
            },
        )
        .unwrap();
        let accuracy = |spec: &EnvSpec| {
            let mut env = Env::new(spec.clone()).unwrap();
            let mut rng = substream(21, Stream::Env);
            let trials = 40_000;
            let hits = (0..trials)
                .filter(|_| {
                    let obs = env.reset(StartDist::Train, &mut rng);
                    nearest_prototype(env.prototypes(), &obs) == env.position()
                })
                .count();
            hits as f64 / trials as f64
        };
        let (a, b) = (accuracy(&spec), accuracy(&drifted));
        // binomial standard error is ~3e-4 at this accuracy
        assert!((a - b).abs() < 0.003, "{a} vs {b}");
    }

    #[test]
    fn slip_matches_tabulated_distribution() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let spec = apply_perturbation(
            &EnvSpec::grid(4, 4).unwrap(),
            PerturbationConfig {
                slip: 0.2,
                ..Default::default()
            },
        )
        .unwrap();
        let mut env = Env::new(spec.clone()).unwrap();
        let mut rng = substream(4, Stream::Env);
        // interior cell (1,1), action right: every direction lands somewhere distinct
        let start = 4 + 1;
        let trials = 10_000;
        let mut counts = [0usize; 4];
        for _ in 0..trials {
            env.reset_to(start, &mut rng).unwrap();
            env.step(3, &mut rng).unwrap();
            let landed = env.position();
            let dir = (0..4).find(|&a| spec.move_cell(start, a) == landed).unwrap();
            counts[dir] += 1;
        }
        let expected = [0.2 / 3.0, 0.2 / 3.0, 0.2 / 3.0, 0.8].map(|p| p * trials as f64);
        let stat: f64 = counts
            .iter()
            .zip(expected)
            .map(|(&o, e)| (o as f64 - e).powi(2) / e)
            .sum();
        let p = 1.0 - ChiSquared::new(3.0).unwrap().cdf(stat);
        assert!(p > 0.01, "chi2 {stat}, p {p}, counts {counts:?}");
        let _ = rng.random::<u8>();
    }
}
