//! Flat `key = value` experiment configs.
//!
//! One key per line, `#` starts a comment. Every key is optional except
//! `env.target` and `agent.variant`; transfer variants also need
//! `env.sources`.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::adapter::RobustMode;
use crate::envs::{EnvSpec, PerturbationConfig};
use crate::error::{GatnError, Result};
use crate::trainer::{AgentVariant, Hyperparams, PretrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct SourceSpec {
    pub env: EnvSpec,
    /// Mapper name; inferred from the env pair when absent.
    pub mapper: Option<String>,
    /// Aligner table; identity when absent.
    pub aligner: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub episodes: usize,
    pub perturbations: Vec<PerturbationConfig>,
    pub heldout: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 100,
            perturbations: Vec::new(),
            heldout: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub target: EnvSpec,
    pub sources: Vec<SourceSpec>,
    pub variant: AgentVariant,
    pub hyper: Hyperparams,
    pub pretrain: PretrainConfig,
    /// Seed for source pretraining, shared by every run seed.
    pub source_seed: u64,
    pub source_dir: Option<PathBuf>,
    pub eval: EvalConfig,
    pub out_dir: Option<PathBuf>,
    pub seeds: Vec<u64>,
}

impl ExperimentConfig {
    pub fn new(target: EnvSpec, variant: AgentVariant) -> Self {
        Self {
            target,
            sources: Vec::new(),
            variant,
            hyper: Hyperparams::default(),
            pretrain: PretrainConfig::default(),
            source_seed: 0,
            source_dir: None,
            eval: EvalConfig::default(),
            out_dir: None,
            seeds: vec![0],
        }
    }

    pub fn with_sources(mut self, sources: &[(&str, Option<&str>, Option<&str>)]) -> Result<Self> {
        self.sources = sources
            .iter()
            .map(|(env, mapper, aligner)| {
                Ok(SourceSpec {
                    env: env.parse()?,
                    mapper: mapper.map(str::to_string),
                    aligner: aligner.map(str::to_string),
                })
            })
            .collect::<Result<_>>()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        if self.variant.uses_sources() && self.sources.is_empty() {
            return Err(GatnError::config(format!("variant {} needs env.sources", self.variant)));
        }
        if self.eval.episodes == 0 {
            return Err(GatnError::config("eval.episodes must be ≥ 1"));
        }
        if !(0.0..=1.0).contains(&self.pretrain.threshold) {
            return Err(GatnError::config("sources.threshold must lie in [0, 1]"));
        }
        for p in &self.eval.perturbations {
            p.validate()?;
        }
        Ok(())
    }

    /// Canonical text form; `parse_config(render())` reproduces `self`.
    pub fn render(&self) -> String {
        let h = &self.hyper;
        let mut lines = vec![
            format!("env.target = {}", self.target),
            format!("agent.variant = {}", self.variant),
        ];
        if !self.sources.is_empty() {
            let names: Vec<String> = self.sources.iter().map(|s| s.env.to_string()).collect();
            lines.push(format!("env.sources = {}", names.join(", ")));
        }
        for (i, s) in self.sources.iter().enumerate() {
            if let Some(m) = &s.mapper {
                lines.push(format!("env.mapper.{i} = {m}"));
            }
            if let Some(a) = &s.aligner {
                lines.push(format!("env.aligner.{i} = {a}"));
            }
        }
        let mut push = |k: &str, v: String| lines.push(format!("{k} = {v}"));
        push("train.episodes", h.episodes.to_string());
        push("train.gamma", h.gamma.to_string());
        if let Some(limit) = h.step_limit {
            push("train.step_limit", limit.to_string());
        }
        push("lr.rep", h.lr_rep.to_string());
        push("lr.adapt", h.lr_adapt.to_string());
        push("lr.base", h.lr_base.to_string());
        push("lr.sched", h.lr_sched.to_string());
        push("net.hidden", h.hidden.to_string());
        push("vae.latent_dim", h.latent_dim.to_string());
        push("vae.buffer", h.vae_buffer.to_string());
        push("vae.batch", h.vae_batch.to_string());
        push("vae.pretrain_samples", h.vae_pretrain_samples.to_string());
        push("vae.pretrain_steps", h.vae_pretrain_steps.to_string());
        push("sched.M", h.m.to_string());
        push("sched.eps_floor", h.eps_floor.to_string());
        push("sched.baseline_decay", h.baseline_decay.to_string());
        push("robust.sigma", h.sigma.to_string());
        push("robust.lambda", h.lambda.to_string());
        push("robust.mode", robust_mode_name(h.robust_mode).to_string());
        push("explore.eps_start", h.eps_start.to_string());
        push("explore.eps_end", h.eps_end.to_string());
        push("explore.decay_frac", h.decay_frac.to_string());
        push("sources.seed", self.source_seed.to_string());
        push("sources.max_episodes", self.pretrain.max_episodes.to_string());
        push("sources.threshold", self.pretrain.threshold.to_string());
        if let Some(dir) = &self.source_dir {
            push("sources.dir", dir.display().to_string());
        }
        push("eval.episodes", self.eval.episodes.to_string());
        if !self.eval.perturbations.is_empty() {
            let p: Vec<String> = self.eval.perturbations.iter().map(|p| p.to_string()).collect();
            push("eval.perturb", p.join("; "));
        }
        push("eval.heldout", self.eval.heldout.to_string());
        if let Some(dir) = &self.out_dir {
            push("out.dir", dir.display().to_string());
        }
        let seeds: Vec<String> = self.seeds.iter().map(|s| s.to_string()).collect();
        push("seeds", seeds.join(", "));
        push("seed", h.seed.to_string());
        let mut out = lines.join("\n");
        out.push('\n');
        out
    }

    /// Hex SHA-256 of the canonical text.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.render().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn robust_mode_name(mode: RobustMode) -> &'static str {
    match mode {
        RobustMode::Latent => "latent",
        RobustMode::State => "state",
    }
}

/// Splits on commas that are not inside parentheses.
pub fn split_top_level(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut current = String::new();
    for c in text.chars() {
        match c {
            '(' => depth += 1,
            ')' => depth -= 1,
            ',' if depth == 0 => {
                out.push(current.trim().to_string());
                current.clear();
                continue;
            }
            _ => {}
        }
        current.push(c);
    }
    if !current.trim().is_empty() || !out.is_empty() {
        out.push(current.trim().to_string());
    }
    out
}

struct Entry {
    line: usize,
    value: String,
}

fn value_err(key: &str, e: &Entry, message: impl std::fmt::Display) -> GatnError {
    GatnError::Parse {
        line: e.line,
        message: format!("{key}: {message}"),
    }
}

fn parse_value<T: FromStr>(key: &str, e: &Entry, what: &str) -> Result<T> {
    e.value
        .parse()
        .map_err(|_| value_err(key, e, format!("expected {what}, got `{}`", e.value)))
}

/// Parses and validates a config document.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut entries: BTreeMap<String, Entry> = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content.split_once('=').ok_or_else(|| GatnError::Parse {
            line,
            message: format!("expected `key = value`, got `{content}`"),
        })?;
        let key = key.trim().to_string();
        if !known_key(&key) {
            return Err(GatnError::Parse {
                line,
                message: format!("unknown key `{key}`"),
            });
        }
        if let Some(prev) = entries.get(&key) {
            return Err(GatnError::Parse {
                line,
                message: format!("duplicate key `{key}` (first set on line {})", prev.line),
            });
        }
        entries.insert(
            key,
            Entry {
                line,
                value: value.trim().to_string(),
            },
        );
    }

    let required = |key: &str| {
        entries.get(key).ok_or_else(|| GatnError::Parse {
            line: 0,
            message: format!("missing required key `{key}`"),
        })
    };
    let target_entry = required("env.target")?;
    let target: EnvSpec = target_entry
        .value
        .parse()
        .map_err(|e: GatnError| value_err("env.target", target_entry, e))?;
    let variant_entry = required("agent.variant")?;
    let variant: AgentVariant = variant_entry
        .value
        .parse()
        .map_err(|e: GatnError| value_err("agent.variant", variant_entry, e))?;
    let mut config = ExperimentConfig::new(target, variant);

    if let Some(e) = entries.get("env.sources") {
        for name in split_top_level(&e.value) {
            let env = name.parse().map_err(|err: GatnError| value_err("env.sources", e, err))?;
            config.sources.push(SourceSpec {
                env,
                mapper: None,
                aligner: None,
            });
        }
    }
    let n = config.sources.len();
    for (key, e) in &entries {
        let (table, index) = match key.strip_prefix("env.mapper.") {
            Some(i) => ("mapper", i),
            None => match key.strip_prefix("env.aligner.") {
                Some(i) => ("aligner", i),
                None => continue,
            },
        };
        let i: usize = index
            .parse()
            .ok()
            .filter(|&i| i < n)
            .ok_or_else(|| value_err(key, e, format!("no source with index `{index}` ({n} sources)")))?;
        if table == "mapper" {
            config.sources[i].mapper = Some(e.value.clone());
        } else {
            config.sources[i].aligner = Some(e.value.clone());
        }
    }

    let h = &mut config.hyper;
    macro_rules! set {
        ($key:literal, $field:expr, $what:literal) => {
            if let Some(e) = entries.get($key) {
                $field = parse_value($key, e, $what)?;
            }
        };
    }
    set!("train.episodes", h.episodes, "a non-negative integer");
    set!("train.gamma", h.gamma, "a number");
    set!("lr.rep", h.lr_rep, "a number");
    set!("lr.adapt", h.lr_adapt, "a number");
    set!("lr.base", h.lr_base, "a number");
    set!("lr.sched", h.lr_sched, "a number");
    set!("net.hidden", h.hidden, "a positive integer");
    set!("vae.latent_dim", h.latent_dim, "a positive integer");
    set!("vae.buffer", h.vae_buffer, "a positive integer");
    set!("vae.batch", h.vae_batch, "a positive integer");
    set!("vae.pretrain_samples", h.vae_pretrain_samples, "a non-negative integer");
    set!("vae.pretrain_steps", h.vae_pretrain_steps, "a non-negative integer");
    set!("sched.M", h.m, "a non-negative integer");
    set!("sched.eps_floor", h.eps_floor, "a number");
    set!("sched.baseline_decay", h.baseline_decay, "a number");
    set!("robust.sigma", h.sigma, "a number");
    set!("robust.lambda", h.lambda, "a number");
    set!("explore.eps_start", h.eps_start, "a number");
    set!("explore.eps_end", h.eps_end, "a number");
    set!("explore.decay_frac", h.decay_frac, "a number");
    set!("seed", h.seed, "a non-negative integer");
    if let Some(e) = entries.get("train.step_limit") {
        h.step_limit = Some(parse_value("train.step_limit", e, "a non-negative integer")?);
    }
    if let Some(e) = entries.get("robust.mode") {
        h.robust_mode = match e.value.as_str() {
            "latent" => RobustMode::Latent,
            "state" => RobustMode::State,
            other => return Err(value_err("robust.mode", e, format!("expected `latent` or `state`, got `{other}`"))),
        };
    }
    set!("sources.seed", config.source_seed, "a non-negative integer");
    set!("sources.max_episodes", config.pretrain.max_episodes, "a non-negative integer");
    set!("sources.threshold", config.pretrain.threshold, "a number");
    set!("eval.episodes", config.eval.episodes, "a positive integer");
    set!("eval.heldout", config.eval.heldout, "`true` or `false`");
    if let Some(e) = entries.get("sources.dir") {
        config.source_dir = Some(PathBuf::from(&e.value));
    }
    if let Some(e) = entries.get("out.dir") {
        config.out_dir = Some(PathBuf::from(&e.value));
    }
    if let Some(e) = entries.get("eval.perturb") {
        config.eval.perturbations = e
            .value
            .split(';')
            .filter(|p| !p.trim().is_empty())
            .map(|p| p.parse().map_err(|err: GatnError| value_err("eval.perturb", e, err)))
            .collect::<Result<_>>()?;
    }
    if let Some(e) = entries.get("seeds") {
        config.seeds = e
            .value
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| value_err("seeds", e, format!("`{}` is not a seed", s.trim())))
            })
            .collect::<Result<_>>()?;
    } else {
        config.seeds = vec![config.hyper.seed];
    }

    if let Some(e) = entries.get("sched.M") {
        if config.hyper.m == 0 {
            return Err(value_err("sched.M", e, "M must be ≥ 1"));
        }
    }
    config.validate()?;
    Ok(config)
}

const KEYS: &[&str] = &[
    "env.target",
    "env.sources",
    "agent.variant",
    "train.episodes",
    "train.gamma",
    "train.step_limit",
    "lr.rep",
    "lr.adapt",
    "lr.base",
    "lr.sched",
    "net.hidden",
    "vae.latent_dim",
    "vae.buffer",
    "vae.batch",
    "vae.pretrain_samples",
    "vae.pretrain_steps",
    "sched.M",
    "sched.eps_floor",
    "sched.baseline_decay",
    "robust.sigma",
    "robust.lambda",
    "robust.mode",
    "explore.eps_start",
    "explore.eps_end",
    "explore.decay_frac",
    "sources.seed",
    "sources.max_episodes",
    "sources.threshold",
    "sources.dir",
    "eval.episodes",
    "eval.perturb",
    "eval.heldout",
    "out.dir",
    "seeds",
    "seed",
];

fn known_key(key: &str) -> bool {
    KEYS.contains(&key) || key.starts_with("env.mapper.") || key.starts_with("env.aligner.")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = parse_config("env.target = grid-world(6,6)\nagent.variant = dqn-scratch\n").unwrap();
        assert_eq!(c.hyper.gamma, 0.99);
        assert_eq!(c.hyper.lr_rep, 0.0005);
        assert_eq!(c.hyper.lr_adapt, 0.0005);
        assert_eq!(c.hyper.lr_base, 0.0025);
        assert_eq!(c.hyper.m, 2);
        assert_eq!(c.hyper.latent_dim, 8);
    }

    #[test]
    fn zero_m_is_rejected() {
        let err = parse_config("env.target = line-world(10)\nagent.variant = dqn-scratch\nsched.M = 0\n").unwrap_err();
        assert!(err.to_string().contains("M must be ≥ 1"), "{err}");
        assert!(matches!(err, GatnError::Parse { line: 3, .. }));
    }

    #[test]
    fn duplicate_key_names_the_key() {
        let text = "env.target = line-world(10)\nagent.variant = dqn-scratch\nlr.base = 0.1\nlr.base = 0.2\n";
        let err = parse_config(text).unwrap_err();
        assert!(err.to_string().contains("lr.base"), "{err}");
        assert!(matches!(err, GatnError::Parse { line: 4, .. }));
    }

    #[test]
    fn unknown_and_malformed_lines() {
        let err = parse_config("env.target = line-world(10)\n\n# note\nagent.variant = gatn\nlearning_rate = 3\n").unwrap_err();
        assert!(matches!(err, GatnError::Parse { line: 5, .. }), "{err}");
        let err = parse_config("env.target = line-world(10)\nagent.variant\n").unwrap_err();
        assert!(matches!(err, GatnError::Parse { line: 2, .. }));
        let err = parse_config("env.target = line-world(10)\nagent.variant = dqn-scratch\ntrain.gamma = high\n").unwrap_err();
        assert!(err.to_string().contains("train.gamma"));
    }

    #[test]
    fn missing_keys() {
        assert!(parse_config("agent.variant = gatn\n").unwrap_err().to_string().contains("env.target"));
        let err = parse_config("env.target = line-world(10)\nagent.variant = gatn\n").unwrap_err();
        assert!(err.to_string().contains("env.sources"));
    }

    #[test]
    fn sources_with_tables() {
        let text = "\
env.target = grid-world(6,6)   # the new task
env.sources = line-world(10), grid-world(4,4), negated(grid-world(4,4))
env.mapper.1 = grid-rescale
env.aligner.0 = 2,3
agent.variant = gatn
eval.perturb = noise=0.1,slip=0,drift=0,shift=0; slip=0.2
seeds = 1, 2, 3
";
        let c = parse_config(text).unwrap();
        assert_eq!(c.sources.len(), 3);
        assert!(c.sources[2].env.negated);
        assert_eq!(c.sources[1].mapper.as_deref(), Some("grid-rescale"));
        assert_eq!(c.sources[0].aligner.as_deref(), Some("2,3"));
        assert_eq!(c.eval.perturbations.len(), 2);
        assert_eq!(c.seeds, vec![1, 2, 3]);
        let again = parse_config(&c.render()).unwrap();
        assert_eq!(again, c);
        assert_eq!(again.hash(), c.hash());
        let err = parse_config(&format!("{text}env.mapper.3 = pad\n")).unwrap_err();
        assert!(matches!(err, GatnError::Parse { line: 8, .. }), "{err}");
    }

    #[test]
    fn paren_aware_split() {
        assert_eq!(
            split_top_level("grid-world(4,4), negated(line-world(5))"),
            vec!["grid-world(4,4)", "negated(line-world(5))"]
        );
        assert!(split_top_level("").is_empty());
    }
}
