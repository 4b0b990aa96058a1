//! Shipped experiment presets.

use std::fmt;
use std::str::FromStr;

use super::config::ExperimentConfig;
use crate::envs::{EnvSpec, PerturbationConfig};
use crate::error::{GatnError, Result};
use crate::trainer::AgentVariant;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// line-world(10) and grid-world(4,4) sources for a grid-world(6,6) target.
    Cross,
    /// Intent-world with the robustness loss on or off, scored under
    /// observation noise and prototype drift.
    Robust,
    /// Four sources, two selected per episode.
    Effic,
    /// One helpful intent-world source and a reward-negated copy.
    Negative,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::Cross, Preset::Robust, Preset::Effic, Preset::Negative];

    /// The GATN side of the preset's comparison.
    pub fn config(self) -> Result<ExperimentConfig> {
        let gatn = AgentVariant::gatn();
        let mut c = match self {
            Preset::Cross => ExperimentConfig::new(EnvSpec::grid(6, 6)?, gatn).with_sources(&[
                ("line-world(10)", None, Some("2,3")),
                ("grid-world(4,4)", Some("grid-rescale"), None),
            ])?,
            Preset::Robust => ExperimentConfig::new(EnvSpec::intent(4, 8)?, gatn).with_sources(&[
                ("intent-world(4,8)", None, None),
                ("negated(intent-world(4,8))", None, None),
            ])?,
            Preset::Effic => ExperimentConfig::new(EnvSpec::intent(4, 8)?, gatn).with_sources(&[
                ("intent-world(4,8)", None, None),
                ("intent-world(4,6)", None, None),
                ("intent-world(3,8)", None, Some("0,1,2")),
                ("negated(intent-world(4,8))", None, None),
            ])?,
            Preset::Negative => ExperimentConfig::new(EnvSpec::intent(4, 8)?, gatn).with_sources(&[
                ("intent-world(4,8)", None, None),
                ("negated(intent-world(4,8))", None, None),
            ])?,
        };
        if self == Preset::Robust {
            c.hyper.lambda = 10.0;
            c.hyper.sigma = 1.0;
            c.eval.episodes = 500;
            c.eval.perturbations = vec![PerturbationConfig {
                obs_sigma: 0.1,
                drift: std::f64::consts::FRAC_PI_8,
                ..Default::default()
            }];
        }
        c.hyper.episodes = match self {
            Preset::Cross => 200,
            Preset::Robust => 300,
            Preset::Effic => 50,
            Preset::Negative => 300,
        };
        c.seeds = (0..5).collect();
        Ok(c)
    }

    /// The other side of the comparison, if the preset has one.
    pub fn comparator(self) -> Result<Option<ExperimentConfig>> {
        let variant = match self {
            Preset::Cross => AgentVariant::dqn_scratch(),
            Preset::Robust => AgentVariant {
                robust: false,
                ..AgentVariant::gatn()
            },
            Preset::Effic => AgentVariant::a2t_like(),
            Preset::Negative => return Ok(None),
        };
        let mut c = self.config()?;
        c.variant = variant;
        if !variant.uses_sources() {
            c.sources.clear();
        }
        Ok(Some(c))
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Cross => "CROSS",
            Preset::Robust => "ROBUST",
            Preset::Effic => "EFFIC",
            Preset::Negative => "NEGATIVE",
        })
    }
}

impl FromStr for Preset {
    type Err = GatnError;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.to_string().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| GatnError::config(format!("unknown experiment `{s}`; expected CROSS, ROBUST, EFFIC or NEGATIVE")))
    }
}
