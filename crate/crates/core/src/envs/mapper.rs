use std::fmt;

use crate::envs::{EnvKind, EnvSpec};
use crate::error::{GatnError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MapperMode {
    Pad,
    Truncate,
    /// Scales grid coordinates from one grid size to another.
    GridRescale { from: (usize, usize), to: (usize, usize) },
}

/// Maps a target-task state into a source task's state space.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StateMapper {
    pub mode: MapperMode,
    pub source_dim: usize,
}

impl StateMapper {
    pub fn pad(source_dim: usize) -> Self {
        Self {
            mode: MapperMode::Pad,
            source_dim,
        }
    }

    pub fn truncate(source_dim: usize) -> Self {
        Self {
            mode: MapperMode::Truncate,
            source_dim,
        }
    }

    pub fn grid_rescale(from: (usize, usize), to: (usize, usize)) -> Self {
        Self {
            mode: MapperMode::GridRescale { from, to },
            source_dim: to.0 * to.1,
        }
    }

    /// Builds a mapper from its config name (`pad`, `truncate`,
    /// `grid-rescale`) for a given target/source pair.
    pub fn for_envs(mode: &str, target: &EnvSpec, source: &EnvSpec) -> Result<Self> {
        let mapper = match mode.trim() {
            "pad" => Self::pad(source.state_dim()),
            "truncate" => Self::truncate(source.state_dim()),
            "grid-rescale" => match (target.kind, source.kind) {
                (
                    EnvKind::Grid { width, height },
                    EnvKind::Grid {
                        width: sw,
                        height: sh,
                    },
                ) => Self::grid_rescale((width, height), (sw, sh)),
                _ => {
                    return Err(GatnError::config(format!(
                        "grid-rescale needs grid target and source, got {target} -> {source}"
                    )))
                }
            },
            other => return Err(GatnError::config(format!("unknown mapper mode `{other}`"))),
        };
        mapper.check_input_dim(target.state_dim())?;
        Ok(mapper)
    }

    /// Default mapper when the config names none.
    pub fn infer(target: &EnvSpec, source: &EnvSpec) -> Self {
        match (target.kind, source.kind) {
            (
                EnvKind::Grid { width, height },
                EnvKind::Grid {
                    width: sw,
                    height: sh,
                },
            ) => Self::grid_rescale((width, height), (sw, sh)),
            _ if target.state_dim() <= source.state_dim() => Self::pad(source.state_dim()),
            _ => Self::truncate(source.state_dim()),
        }
    }

    pub fn check_input_dim(&self, dim: usize) -> Result<()> {
        let ok = match self.mode {
            MapperMode::Pad => dim <= self.source_dim,
            MapperMode::Truncate => dim >= self.source_dim,
            MapperMode::GridRescale { from, .. } => dim == from.0 * from.1,
        };
        if ok {
            Ok(())
        } else {
            Err(GatnError::config(format!(
                "{self} cannot map a {dim}-dimensional state"
            )))
        }
    }

    pub fn map_state(&self, state: &[f64]) -> Result<Vec<f64>> {
        self.check_input_dim(state.len())?;
        Ok(match self.mode {
            MapperMode::Pad => {
                let mut out = state.to_vec();
                out.resize(self.source_dim, 0.0);
                out
            }
            MapperMode::Truncate => state[..self.source_dim].to_vec(),
            MapperMode::GridRescale { from, to } => {
                // argmax re-one-hots noisy observations; ties go to the lowest cell
                let cell = state
                    .iter()
                    .enumerate()
                    .fold(0, |best, (i, &v)| if v > state[best] { i } else { best });
                let (x, y) = (cell % from.0, cell / from.0);
                let (tx, ty) = (x * to.0 / from.0, y * to.1 / from.1);
                let mut out = vec![0.0; self.source_dim];
                out[ty * to.0 + tx] = 1.0;
                out
            }
        })
    }
}

impl fmt::Display for StateMapper {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.mode {
            MapperMode::Pad => write!(f, "pad->{}", self.source_dim),
            MapperMode::Truncate => write!(f, "truncate->{}", self.source_dim),
            MapperMode::GridRescale { from, to } => {
                write!(f, "grid-rescale {}x{}->{}x{}", from.0, from.1, to.0, to.1)
            }
        }
    }
}
