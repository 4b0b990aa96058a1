//! Transfer scheduler: per-source relevance scores from the latent code,
//! M-of-N sampling proportional to the scores, and a REINFORCE update
//! that pushes the scores towards sources that pay off on the target.

use log::warn;
use rand::Rng;

use crate::diffcore::{sgd_step, MlpSpec, Network, ParamGroup, Parameterized};
use crate::error::{GatnError, Result};

pub const DEFAULT_EPS_FLOOR: f64 = 1e-6;
pub const DEFAULT_BASELINE_DECAY: f64 = 0.99;

/// Sigmoid outputs, one per source.
#[derive(Clone, Debug, PartialEq)]
pub struct RelevanceScores(pub Vec<f64>);

#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    /// Sources in draw order.
    pub indices: Vec<usize>,
    /// Log probability of this ordered draw.
    pub log_prob: f64,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Sequential sampling without replacement; each draw picks `j` among the
/// remaining sources with probability `(r_j + floor) / sum(r_k + floor)`.
pub fn sample_subset<R: Rng + ?Sized>(scores: &[f64], m: usize, eps_floor: f64, rng: &mut R) -> Selection {
    let n = scores.len();
    if m > n {
        warn!("asked for {m} sources but only {n} exist; selecting all of them");
    }
    let mut remaining: Vec<usize> = (0..n).collect();
    let mut indices = Vec::with_capacity(m.min(n));
    let mut log_prob = 0.0;
    for _ in 0..m.min(n) {
        let total: f64 = remaining.iter().map(|&k| scores[k] + eps_floor).sum();
        let mut u = rng.random::<f64>() * total;
        let mut pick = remaining.len() - 1;
        for (pos, &k) in remaining.iter().enumerate() {
            let w = scores[k] + eps_floor;
            if u < w {
                pick = pos;
                break;
            }
            u -= w;
        }
        let j = remaining.remove(pick);
        log_prob += (scores[j] + eps_floor).ln() - total.ln();
        indices.push(j);
    }
    Selection { indices, log_prob }
}

/// Exact log probability of an ordered draw.
pub fn selection_log_prob(scores: &[f64], indices: &[usize], eps_floor: f64) -> f64 {
    let mut remaining: Vec<usize> = (0..scores.len()).collect();
    let mut lp = 0.0;
    for &j in indices {
        let total: f64 = remaining.iter().map(|&k| scores[k] + eps_floor).sum();
        lp += (scores[j] + eps_floor).ln() - total.ln();
        remaining.retain(|&k| k != j);
    }
    lp
}

/// Gradient of [`selection_log_prob`] with respect to the scores.
pub fn selection_log_prob_grad(scores: &[f64], indices: &[usize], eps_floor: f64) -> Vec<f64> {
    let mut grad = vec![0.0; scores.len()];
    let mut remaining: Vec<usize> = (0..scores.len()).collect();
    for &j in indices {
        let total: f64 = remaining.iter().map(|&k| scores[k] + eps_floor).sum();
        for &k in &remaining {
            grad[k] -= 1.0 / total;
        }
        grad[j] += 1.0 / (scores[j] + eps_floor);
        remaining.retain(|&k| k != j);
    }
    grad
}

/// The `m` highest-scoring sources, ties to the lower index.
pub fn top_m(scores: &[f64], m: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(m);
    order
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scheduler {
    pub net: Network,
    pub m: usize,
    pub eps_floor: f64,
    pub baseline_decay: f64,
    /// Exponential moving average of episode returns; unset until the
    /// first update.
    pub baseline: Option<f64>,
}

impl Scheduler {
    pub fn new(input_dim: usize, n_sources: usize, hidden: usize, m: usize, seed: u64) -> Result<Self> {
        if m == 0 {
            return Err(GatnError::config("M must be ≥ 1"));
        }
        let spec = MlpSpec::tanh_head(&[input_dim, hidden, n_sources], seed)?;
        Ok(Self {
            net: Network::new(spec, "sched"),
            m,
            eps_floor: DEFAULT_EPS_FLOOR,
            baseline_decay: DEFAULT_BASELINE_DECAY,
            baseline: None,
        })
    }

    pub fn n_sources(&self) -> usize {
        self.net.output_dim()
    }

    pub fn relevance_scores(&self, z: &[f64]) -> Result<RelevanceScores> {
        Ok(RelevanceScores(self.net.predict(z)?.into_iter().map(sigmoid).collect()))
    }

    pub fn select<R: Rng + ?Sized>(&self, z: &[f64], rng: &mut R) -> Result<Selection> {
        let scores = self.relevance_scores(z)?;
        Ok(sample_subset(&scores.0, self.m, self.eps_floor, rng))
    }

    /// Adds `scale * grad log p(selection | z)` to the network gradients
    /// and returns `log p`.
    pub fn accumulate_log_prob(&mut self, z: &[f64], selection: &[usize], scale: f64) -> Result<f64> {
        let (logits, tape) = self.net.forward(z)?;
        let scores: Vec<f64> = logits.iter().map(|&l| sigmoid(l)).collect();
        let d_scores = selection_log_prob_grad(&scores, selection, self.eps_floor);
        let d_logits: Vec<f64> = d_scores
            .iter()
            .zip(&scores)
            .map(|(d, r)| scale * d * r * (1.0 - r))
            .collect();
        self.net.backward(&tape, &d_logits)?;
        Ok(selection_log_prob(&scores, selection, self.eps_floor))
    }

    /// REINFORCE with an EMA baseline: ascends `(G - b) * sum log p`.
    /// `draws` holds the scheduler input and realized selection of each
    /// scheduling decision in the episode.
    pub fn update(&mut self, draws: &[(Vec<f64>, Vec<usize>)], episode_return: f64, lr: f64) -> Result<()> {
        if !episode_return.is_finite() {
            return Err(GatnError::numerical("sched", format!("episode return {episode_return}")));
        }
        let baseline = *self.baseline.get_or_insert(episode_return);
        let advantage = episode_return - baseline;
        self.net.params.zero_grad();
        if advantage != 0.0 {
            for (z, indices) in draws {
                self.accumulate_log_prob(z, indices, -advantage)?;
            }
        }
        sgd_step(&mut self.net.params, lr)?;
        self.baseline = Some(self.baseline_decay * baseline + (1.0 - self.baseline_decay) * episode_return);
        Ok(())
    }
}

impl Parameterized for Scheduler {
    fn groups(&self) -> Vec<&ParamGroup> {
        vec![&self.net.params]
    }
    fn groups_mut(&mut self) -> Vec<&mut ParamGroup> {
        vec![&mut self.net.params]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::grad_check;
    use crate::rng::{substream, Stream};
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn chi_square_p(counts: &[usize], probs: &[f64]) -> f64 {
        let n: usize = counts.iter().sum();
        let stat: f64 = counts
            .iter()
            .zip(probs)
            .map(|(&o, &p)| {
                let e = p * n as f64;
                (o as f64 - e).powi(2) / e
            })
            .sum();
        1.0 - ChiSquared::new((counts.len() - 1) as f64).unwrap().cdf(stat)
    }

    #[test]
    fn zero_network_scores_half() {
        let mut s = Scheduler::new(3, 4, 5, 2, 0).unwrap();
        s.net.params.values_mut().iter_mut().for_each(|v| *v = 0.0);
        assert_eq!(s.relevance_scores(&[1.0, -2.0, 3.0]).unwrap().0, vec![0.5; 4]);
    }

    #[test]
    fn sigmoid_arithmetic() {
        assert!((sigmoid(3f64.ln()) - 0.75).abs() < 1e-15);
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(800.0) <= 1.0 && sigmoid(-800.0) >= 0.0);
    }

    fn pair_counts(seed: u64) -> [usize; 6] {
        let mut rng = substream(seed, Stream::Sched);
        let pairs = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)];
        let mut counts = [0usize; 6];
        for _ in 0..60_000 {
            let sel = sample_subset(&[0.5; 4], 2, DEFAULT_EPS_FLOOR, &mut rng);
            let (a, b) = (sel.indices[0].min(sel.indices[1]), sel.indices[0].max(sel.indices[1]));
            counts[pairs.iter().position(|&p| p == (a, b)).unwrap()] += 1;
        }
        counts
    }

    #[test]
    fn uniform_pairs() {
        let counts = pair_counts(11);
        let p = chi_square_p(&counts, &[1.0 / 6.0; 6]);
        assert!(p > 0.01, "{counts:?} p={p}");
        for c in counts {
            assert!((c as f64 / 60_000.0 - 1.0 / 6.0).abs() < 0.01);
        }
    }

    #[test]
    fn pair_test_rejects_rarely() {
        let rejections = (0..40u64)
            .filter(|&seed| chi_square_p(&pair_counts(100 + seed), &[1.0 / 6.0; 6]) <= 0.01)
            .count();
        assert!(rejections <= 3, "{rejections} of 40 seeds rejected");
    }

    #[test]
    fn collapsed_scores_pick_the_live_pair() {
        let scores = [0.5, 0.5, 0.0, 0.0];
        let eps = DEFAULT_EPS_FLOOR;
        let exact = selection_log_prob(&scores, &[0, 1], eps).exp() + selection_log_prob(&scores, &[1, 0], eps).exp();
        let by_hand = 2.0 * (0.500001 / 1.000004) * (0.500001 / 0.500003);
        assert!((exact - by_hand).abs() < 1e-15);
        assert!((0.999994..0.999995).contains(&exact), "{exact}");
        let mut rng = substream(2, Stream::Sched);
        let hits = (0..10_000)
            .filter(|_| {
                let mut s = sample_subset(&scores, 2, eps, &mut rng).indices;
                s.sort();
                s == [0, 1]
            })
            .count();
        assert!(hits >= 9_999);
    }

    #[test]
    fn clamps_to_available_sources() {
        let mut rng = substream(3, Stream::Sched);
        let sel = sample_subset(&[0.3], 2, DEFAULT_EPS_FLOOR, &mut rng);
        assert_eq!(sel.indices, vec![0]);
        assert_eq!(sel.log_prob, 0.0);
    }

    #[test]
    fn recorded_log_prob_is_exact() {
        let mut rng = substream(4, Stream::Sched);
        let scores = [0.9, 0.2, 0.6, 0.05, 0.4];
        for _ in 0..100 {
            let sel = sample_subset(&scores, 3, DEFAULT_EPS_FLOOR, &mut rng);
            let mut distinct = sel.indices.clone();
            distinct.sort();
            distinct.dedup();
            assert_eq!(distinct.len(), 3);
            assert!((sel.log_prob - selection_log_prob(&scores, &sel.indices, DEFAULT_EPS_FLOOR)).abs() < 1e-12);
        }
    }

    #[test]
    fn first_draw_frequencies() {
        let scores = [0.8, 0.1, 0.45, 0.3];
        let eps = DEFAULT_EPS_FLOOR;
        let total: f64 = scores.iter().map(|r| r + eps).sum();
        let probs: Vec<f64> = scores.iter().map(|r| (r + eps) / total).collect();
        let mut rng = substream(5, Stream::Sched);
        let mut counts = [0usize; 4];
        for _ in 0..100_000 {
            counts[sample_subset(&scores, 2, eps, &mut rng).indices[0]] += 1;
        }
        let p = chi_square_p(&counts, &probs);
        assert!(p > 0.01, "{counts:?} p={p}");
    }

    #[test]
    fn top_m_breaks_ties_low() {
        assert_eq!(top_m(&[0.2, 0.7, 0.7, 0.1], 2), vec![1, 2]);
        assert_eq!(top_m(&[0.5, 0.5], 5), vec![0, 1]);
    }

    #[test]
    fn centered_return_is_a_fixed_point() {
        let mut s = Scheduler::new(2, 3, 4, 2, 1).unwrap();
        s.baseline = Some(0.75);
        let before = s.net.params.values().to_vec();
        s.update(&[(vec![0.3, -0.1], vec![2, 0])], 0.75, 0.1).unwrap();
        assert_eq!(s.net.params.values(), before.as_slice());
        assert_eq!(s.baseline, Some(0.75));
    }

    #[test]
    fn log_prob_gradient_checks() {
        let mut s = Scheduler::new(3, 4, 5, 2, 2).unwrap();
        let mut rng = substream(6, Stream::Check);
        let z = crate::repr::standard_normal(3, &mut rng);
        let sel = s.select(&z, &mut rng).unwrap().indices;
        let report = grad_check(&mut s, 50, 1e-5, &mut rng, |s: &mut Scheduler| s.accumulate_log_prob(&z, &sel, 1.0)).unwrap();
        assert!(report.max_rel_error <= 1e-4, "{:?}", report.worst());
    }

    #[test]
    fn bandit_prefers_the_paying_source() {
        let mut s = Scheduler::new(2, 2, 8, 1, 3).unwrap();
        let mut rng = substream(7, Stream::Sched);
        let z = vec![1.0, -1.0];
        for _ in 0..2000 {
            let sel = s.select(&z, &mut rng).unwrap();
            let ret = if sel.indices[0] == 0 { 1.0 } else { 0.0 };
            s.update(&[(z.clone(), sel.indices)], ret, 0.01).unwrap();
        }
        let r = s.relevance_scores(&z).unwrap().0;
        assert!(r[0] - r[1] > 0.3, "{r:?}");
    }
}
