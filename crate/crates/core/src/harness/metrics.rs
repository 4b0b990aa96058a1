use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{GatnError, Result};
use crate::trainer::EpisodeRow;

pub const CSV_HEADER: &str =
    "seed,episode,return,epsilon,td_loss,vae_loss,robust_loss,selected_sources,gate_weights,source_forward_passes";

/// Per-episode metrics of one run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunMetrics {
    pub rows: Vec<EpisodeRow>,
}

fn real(x: f64) -> String {
    format!("{x:.16e}")
}

impl RunMetrics {
    pub fn new(rows: Vec<EpisodeRow>) -> Self {
        Self { rows }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let selected: Vec<String> = r.selected.iter().map(|i| i.to_string()).collect();
            let weights: Vec<String> = r.gate_weights.iter().map(|&w| real(w)).collect();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                r.seed,
                r.episode,
                real(r.ret),
                real(r.epsilon),
                real(r.td_loss),
                real(r.vae_loss),
                real(r.robust_loss),
                selected.join(";"),
                weights.join(";"),
                r.forward_passes
            );
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h == CSV_HEADER => {}
            _ => {
                return Err(GatnError::Parse {
                    line: 1,
                    message: "metrics header does not match".into(),
                })
            }
        }
        let mut rows = Vec::new();
        for (i, line) in lines {
            let bad = |what: &str| GatnError::Parse {
                line: i + 1,
                message: format!("bad {what}"),
            };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 10 {
                return Err(bad("field count"));
            }
            let num = |j: usize, what: &str| f[j].parse::<f64>().map_err(|_| bad(what));
            rows.push(EpisodeRow {
                seed: f[0].parse().map_err(|_| bad("seed"))?,
                episode: f[1].parse().map_err(|_| bad("episode"))?,
                ret: num(2, "return")?,
                epsilon: num(3, "epsilon")?,
                td_loss: num(4, "td_loss")?,
                vae_loss: num(5, "vae_loss")?,
                robust_loss: num(6, "robust_loss")?,
                selected: split_list(f[7])
                    .map(|s| s.parse().map_err(|_| bad("selected_sources")))
                    .collect::<Result<_>>()?,
                gate_weights: split_list(f[8])
                    .map(|s| s.parse().map_err(|_| bad("gate_weights")))
                    .collect::<Result<_>>()?,
                forward_passes: f[9].parse().map_err(|_| bad("source_forward_passes"))?,
            });
        }
        Ok(Self { rows })
    }

    /// Total source forward passes over the run.
    pub fn forward_passes(&self) -> u64 {
        self.rows.last().map_or(0, |r| r.forward_passes)
    }

    /// Mean return over episodes `first..=last` (1-based, inclusive).
    pub fn mean_return(&self, first: usize, last: usize) -> f64 {
        let picked: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| (first..=last).contains(&r.episode))
            .map(|r| r.ret)
            .collect();
        picked.iter().sum::<f64>() / picked.len().max(1) as f64
    }

    /// Mean of the last `k` rows' gate weight on expert `slot`.
    pub fn mean_gate_weight(&self, slot: usize, k: usize) -> f64 {
        let tail = &self.rows[self.rows.len().saturating_sub(k)..];
        tail.iter().map(|r| r.gate_weights.get(slot).copied().unwrap_or(0.0)).sum::<f64>() / tail.len().max(1) as f64
    }
}

fn split_list(s: &str) -> impl Iterator<Item = &str> {
    s.split(';').filter(|x| !x.is_empty())
}

pub fn write_metrics_csv(metrics: &RunMetrics, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| GatnError::io(dir, e))?;
    }
    fs::write(path, metrics.to_csv()).map_err(|e| GatnError::io(path, e))
}

pub fn read_metrics_csv(path: &Path) -> Result<RunMetrics> {
    let text = fs::read_to_string(path).map_err(|e| GatnError::io(path, e))?;
    RunMetrics::from_csv(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(episode: usize) -> EpisodeRow {
        EpisodeRow {
            seed: 7,
            episode,
            ret: 0.1 + episode as f64,
            epsilon: 1.0 / 3.0,
            td_loss: 1e-300,
            vae_loss: -0.0,
            robust_loss: 0.0,
            selected: vec![2, 0],
            gate_weights: vec![0.25, 0.0, 0.5, 0.25],
            forward_passes: 2 * episode as u64,
        }
    }

    #[test]
    fn empty_table_is_header_only() {
        assert_eq!(RunMetrics::default().to_csv(), format!("{CSV_HEADER}\n"));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let m = RunMetrics::new(vec![row(1), row(2)]);
        let text = m.to_csv();
        assert!(text.lines().nth(1).unwrap().starts_with("7,1,1.1000000000000001e0,"));
        let back = RunMetrics::from_csv(&text).unwrap();
        assert_eq!(format!("{back:?}"), format!("{m:?}"));
        assert_eq!(back.to_csv(), text);
    }

    #[test]
    fn summaries() {
        let m = RunMetrics::new((1..=4).map(row).collect());
        assert_eq!(m.forward_passes(), 8);
        assert!((m.mean_return(1, 2) - 1.6).abs() < 1e-12);
        assert_eq!(m.mean_gate_weight(2, 2), 0.5);
    }

    #[test]
    fn io_errors_carry_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, "x").unwrap();
        let err = write_metrics_csv(&RunMetrics::default(), &blocker.join("m.csv")).unwrap_err();
        assert_eq!(err.exit_code(), 4);
        assert!(err.to_string().contains("file"));
    }
}
