//! Plain-text checkpoints. Values are written with Rust's shortest
//! round-trip float formatting, so loading reproduces every bit.

use std::fs;
use std::path::Path;

use super::config::{parse_config, ExperimentConfig};
use super::experiment::assemble_library;
use crate::diffcore::{MlpSpec, Network, ParamGroup};
use crate::error::{GatnError, Result};
use crate::rng::RunRng;
use crate::trainer::Agent;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub config_hash: String,
    pub rng: String,
    pub episode: usize,
    pub forward_passes: u64,
    pub baseline: Option<f64>,
    /// Canonical config text the run was started from.
    pub config: String,
    /// Agent groups followed by the frozen source networks.
    pub groups: Vec<ParamGroup>,
}

fn shapes_text(shapes: &[(usize, usize)]) -> String {
    let parts: Vec<String> = shapes.iter().map(|(r, c)| format!("{r}x{c}")).collect();
    parts.join(",")
}

pub(crate) fn write_group(out: &mut String, g: &ParamGroup) {
    out.push_str(&format!("group {} {} {}\n", g.name(), shapes_text(g.shapes()), g.len()));
    let values: Vec<String> = g.values().iter().map(|v| v.to_string()).collect();
    out.push_str(&values.join(" "));
    out.push('\n');
}

/// Line-numbered reader over checkpoint text.
pub(crate) struct Reader<'a> {
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(text: &'a str) -> Self {
        Self {
            lines: text.lines().enumerate(),
        }
    }

    pub(crate) fn next_line(&mut self) -> Result<(usize, &'a str)> {
        self.lines.next().map(|(i, l)| (i + 1, l)).ok_or_else(|| GatnError::Parse {
            line: 0,
            message: "unexpected end of checkpoint".into(),
        })
    }

    /// Reads `<key> <rest>` and returns `rest`.
    pub(crate) fn field(&mut self, key: &str) -> Result<(usize, &'a str)> {
        let (n, line) = self.next_line()?;
        let rest = line
            .strip_prefix(key)
            .and_then(|r| r.strip_prefix(' ').or(if r.is_empty() { Some("") } else { None }))
            .ok_or_else(|| GatnError::Parse {
                line: n,
                message: format!("expected `{key}`"),
            })?;
        Ok((n, rest))
    }

    pub(crate) fn parsed<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        let (n, rest) = self.field(key)?;
        rest.trim().parse().map_err(|_| GatnError::Parse {
            line: n,
            message: format!("bad value for `{key}`: `{rest}`"),
        })
    }

    pub(crate) fn group(&mut self) -> Result<ParamGroup> {
        let (n, header) = self.field("group")?;
        let bad = |m: &str| GatnError::Parse {
            line: n,
            message: m.to_string(),
        };
        let parts: Vec<&str> = header.split_whitespace().collect();
        let [name, shapes, len] = parts[..] else {
            return Err(bad("group header needs a name, shapes and a length"));
        };
        let shapes: Vec<(usize, usize)> = shapes
            .split(',')
            .map(|s| {
                let (r, c) = s.split_once('x').ok_or_else(|| bad("bad shape"))?;
                Ok((r.parse().map_err(|_| bad("bad shape"))?, c.parse().map_err(|_| bad("bad shape"))?))
            })
            .collect::<Result<_>>()?;
        let len: usize = len.parse().map_err(|_| bad("bad length"))?;
        let expected: usize = shapes.iter().map(|(r, c)| r * c + r).sum();
        if expected != len {
            return Err(bad(&format!("shapes hold {expected} values but the length is {len}")));
        }
        let (m, line) = self.next_line()?;
        let values: Vec<f64> = line
            .split_whitespace()
            .map(|v| {
                v.parse().map_err(|_| GatnError::Parse {
                    line: m,
                    message: format!("bad value `{v}`"),
                })
            })
            .collect::<Result<_>>()?;
        if values.len() != len {
            return Err(GatnError::Parse {
                line: m,
                message: format!("group {name} has {} values, expected {len}", values.len()),
            });
        }
        Ok(ParamGroup::from_values(name, values, shapes))
    }
}

pub(crate) fn network_from_group(group: ParamGroup) -> Result<Network> {
    let spec = MlpSpec::from_shapes(group.shapes(), 0)?;
    Network::from_params(spec, group)
}

impl Checkpoint {
    pub fn capture(agent: &Agent, config: &ExperimentConfig, rng: &RunRng) -> Self {
        let mut groups: Vec<ParamGroup> = agent.param_groups().into_iter().cloned().collect();
        groups.extend(agent.model.library.entries().iter().map(|e| e.network.params.clone()));
        Self {
            version: CHECKPOINT_VERSION,
            config_hash: config.hash(),
            rng: rng.descriptor(),
            episode: agent.episode,
            forward_passes: agent.model.forward_passes,
            baseline: agent.scheduler.as_ref().and_then(|s| s.baseline),
            config: config.render(),
            groups,
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("gatn-checkpoint {}\n", self.version);
        out.push_str(&format!("config-sha256 {}\n", self.config_hash));
        out.push_str(&format!("rng {}\n", self.rng));
        out.push_str(&format!("episode {}\n", self.episode));
        out.push_str(&format!("forward-passes {}\n", self.forward_passes));
        match self.baseline {
            Some(b) => out.push_str(&format!("baseline {b}\n")),
            None => out.push_str("baseline none\n"),
        }
        let config_lines: Vec<&str> = self.config.lines().collect();
        out.push_str(&format!("config-lines {}\n", config_lines.len()));
        for l in &config_lines {
            out.push_str(l);
            out.push('\n');
        }
        out.push_str(&format!("groups {}\n", self.groups.len()));
        for g in &self.groups {
            write_group(&mut out, g);
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut r = Reader::new(text);
        let version: u32 = r.parsed("gatn-checkpoint")?;
        if version != CHECKPOINT_VERSION {
            return Err(GatnError::Parse {
                line: 1,
                message: format!("checkpoint version {version} is not supported"),
            });
        }
        let config_hash = r.field("config-sha256")?.1.trim().to_string();
        let rng = r.field("rng")?.1.to_string();
        let episode = r.parsed("episode")?;
        let forward_passes = r.parsed("forward-passes")?;
        let baseline = match r.field("baseline")? {
            (_, "none") => None,
            (n, v) => Some(v.parse().map_err(|_| GatnError::Parse {
                line: n,
                message: format!("bad baseline `{v}`"),
            })?),
        };
        let count: usize = r.parsed("config-lines")?;
        let mut config = String::new();
        for _ in 0..count {
            config.push_str(r.next_line()?.1);
            config.push('\n');
        }
        let groups = (0..r.parsed::<usize>("groups")?)
            .map(|_| r.group())
            .collect::<Result<_>>()?;
        Ok(Self {
            version,
            config_hash,
            rng,
            episode,
            forward_passes,
            baseline,
            config,
            groups,
        })
    }

    /// Rebuilds the config, the agent (with its frozen sources) and the RNG.
    pub fn restore(&self) -> Result<(ExperimentConfig, Agent, RunRng)> {
        let config = parse_config(&self.config)?;
        if config.hash() != self.config_hash {
            return Err(GatnError::config("checkpoint config does not match its recorded hash"));
        }
        let sources = (0..config.sources.len())
            .map(|i| {
                let name = format!("source.{i}");
                let g = self
                    .groups
                    .iter()
                    .find(|g| g.name() == name)
                    .ok_or_else(|| GatnError::config(format!("checkpoint lacks group {name}")))?;
                network_from_group(g.clone())
            })
            .collect::<Result<Vec<_>>>()?;
        let library = if config.variant.uses_sources() {
            std::sync::Arc::new(assemble_library(&config, sources)?)
        } else {
            Default::default()
        };
        let mut agent = Agent::new(config.variant, config.hyper.clone(), config.target.clone(), library)?;
        for g in agent.param_groups_mut() {
            let saved = self
                .groups
                .iter()
                .find(|s| s.name() == g.name())
                .ok_or_else(|| GatnError::config(format!("checkpoint lacks group {}", g.name())))?;
            if saved.shapes() != g.shapes() {
                return Err(GatnError::config(format!(
                    "group {} has shapes {} in the checkpoint, {} in the agent",
                    g.name(),
                    shapes_text(saved.shapes()),
                    shapes_text(g.shapes())
                )));
            }
            g.values_mut().copy_from_slice(saved.values());
        }
        agent.episode = self.episode;
        agent.model.forward_passes = self.forward_passes;
        if let Some(s) = agent.scheduler.as_mut() {
            s.baseline = self.baseline;
        }
        Ok((config, agent, RunRng::from_descriptor(&self.rng)?))
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| GatnError::io(dir, e))?;
    }
    fs::write(path, checkpoint.to_text()).map_err(|e| GatnError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path).map_err(|e| GatnError::io(path, e))?;
    Checkpoint::from_text(&text)
}
