//! Seeded comparisons behind each preset.

use std::fmt;
use std::sync::Arc;
use std::time::Instant;

use super::eval::{compute_cost_report, robustness_score};
use super::experiment::{build_library, run_seeds, RunOutput};
use super::presets::Preset;
use crate::error::{GatnError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SeedOutcome {
    pub seed: u64,
    pub ours: f64,
    pub theirs: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub preset: Preset,
    /// What `ours` and `theirs` measure.
    pub metric: &'static str,
    pub outcomes: Vec<SeedOutcome>,
    /// Seeds that must pass.
    pub required: usize,
    /// Wall-clock seconds of both sides; informational only.
    pub seconds: (f64, f64),
}

impl BenchReport {
    pub fn passes(&self) -> usize {
        self.outcomes.iter().filter(|o| o.pass).count()
    }

    pub fn passed(&self) -> bool {
        self.passes() >= self.required
    }
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} ({})", self.preset, self.metric)?;
        for o in &self.outcomes {
            writeln!(
                f,
                "  seed {:>3}  ours {:>12.6}  theirs {:>12.6}  {}",
                o.seed,
                o.ours,
                o.theirs,
                if o.pass { "ok" } else { "miss" }
            )?;
        }
        writeln!(
            f,
            "  wall clock {:.2}s vs {:.2}s (informational)",
            self.seconds.0, self.seconds.1
        )?;
        write!(f, "  {} of {} seeds pass, {} required", self.passes(), self.outcomes.len(), self.required)
    }
}

fn timed<T>(f: impl FnOnce() -> Result<T>) -> Result<(T, f64)> {
    let start = Instant::now();
    let out = f()?;
    Ok((out, start.elapsed().as_secs_f64()))
}

/// Runs a preset and its comparator on `seeds`.
pub fn bench(preset: Preset, seeds: &[u64]) -> Result<BenchReport> {
    if seeds.is_empty() {
        return Err(GatnError::config("bench needs at least one seed"));
    }
    let config = preset.config()?;
    let library = build_library(&config)?;
    let (ours, t_ours) = timed(|| run_seeds(&config, library.clone(), seeds))?;
    let (theirs, t_theirs) = match preset.comparator()? {
        Some(other) => {
            let lib = if other.variant.uses_sources() { library.clone() } else { Arc::default() };
            timed(|| run_seeds(&other, lib, seeds))?
        }
        None => (Vec::new(), 0.0),
    };
    let directional = (seeds.len() * 4).div_ceil(5);
    let (metric, required, outcomes) = match preset {
        Preset::Cross => (
            "mean return over episodes 1-200, gatn vs dqn-scratch",
            directional,
            pair(&ours, &theirs, |a, b| {
                let (x, y) = (a.metrics.mean_return(1, 200), b.metrics.mean_return(1, 200));
                Ok((x, y, x >= y))
            })?,
        ),
        Preset::Robust => {
            let perturbation = config.eval.perturbations[0];
            let episodes = config.eval.episodes;
            (
                "robustness score, robustness loss on vs off",
                directional,
                pair(&ours, &theirs, |a, b| {
                    let seed = a.config.hyper.seed;
                    let x = robustness_score(&mut a.agent.clone(), &config.target, perturbation, episodes, seed)?;
                    let y = robustness_score(&mut b.agent.clone(), &config.target, perturbation, episodes, seed)?;
                    Ok((x, y, x >= y))
                })?,
            )
        }
        Preset::Effic => {
            let expected = config.hyper.m as f64 / config.sources.len() as f64;
            (
                "source forward passes, gatn / a2t-like",
                seeds.len(),
                pair(&ours, &theirs, |a, b| {
                    let ratio = compute_cost_report(&a.metrics, &b.metrics);
                    Ok((ratio, expected, ratio == expected))
                })?,
            )
        }
        Preset::Negative => {
            let limit = 1.0 / (config.hyper.m as f64 + 1.0);
            let negated = config
                .sources
                .iter()
                .position(|s| s.env.negated)
                .ok_or_else(|| GatnError::config("NEGATIVE preset lacks a negated source"))?;
            let outcomes = ours
                .iter()
                .map(|a| {
                    let w = a.metrics.mean_gate_weight(negated, 50);
                    SeedOutcome {
                        seed: a.config.hyper.seed,
                        ours: w,
                        theirs: limit,
                        pass: w < limit,
                    }
                })
                .collect();
            ("mean gate weight on the negated source over the last 50 episodes vs 1/(M+1)", directional, outcomes)
        }
    };
    Ok(BenchReport {
        preset,
        metric,
        outcomes,
        required,
        seconds: (t_ours, t_theirs),
    })
}

fn pair(
    ours: &[RunOutput],
    theirs: &[RunOutput],
    mut f: impl FnMut(&RunOutput, &RunOutput) -> Result<(f64, f64, bool)>,
) -> Result<Vec<SeedOutcome>> {
    ours.iter()
        .zip(theirs)
        .map(|(a, b)| {
            let (x, y, pass) = f(a, b)?;
            Ok(SeedOutcome {
                seed: a.config.hyper.seed,
                ours: x,
                theirs: y,
                pass,
            })
        })
        .collect()
}
