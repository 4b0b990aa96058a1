//! Shared state representation: a Gaussian-latent VAE over zero-padded
//! states from every task.

use log::warn;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diffcore::{sgd_step, MlpSpec, Network, ParamGroup, Parameterized};
use crate::error::{GatnError, Result};

pub const LOG_VAR_CLAMP: f64 = 10.0;

#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
    pub z: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VaeConfig {
    /// Padded state width shared by all tasks.
    pub input_dim: usize,
    pub latent_dim: usize,
    pub hidden: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct VaeLoss {
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
}

/// Zero-pads (never truncates) a state to `dim`.
pub fn pad_to(state: &[f64], dim: usize) -> Vec<f64> {
    debug_assert!(state.len() <= dim);
    let mut out = state.to_vec();
    out.resize(dim, 0.0);
    out
}

/// Squared reconstruction error plus the closed-form KL to `N(0, I)`.
pub fn vae_loss(state: &[f64], recon: &[f64], mean: &[f64], log_var: &[f64]) -> VaeLoss {
    let recon_err: f64 = state.iter().zip(recon).map(|(s, r)| (s - r) * (s - r)).sum();
    let kl = 0.5
        * mean
            .iter()
            .zip(log_var)
            .map(|(m, lv)| m * m + lv.exp() - 1.0 - lv)
            .sum::<f64>();
    VaeLoss {
        total: recon_err + kl,
        recon: recon_err,
        kl,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vae {
    pub config: VaeConfig,
    pub encoder: Network,
    pub decoder: Network,
}

impl Vae {
    pub fn new(config: VaeConfig, seed: u64) -> Result<Self> {
        if config.latent_dim == 0 || config.input_dim == 0 || config.hidden == 0 {
            return Err(GatnError::config(format!("degenerate VAE dimensions {config:?}")));
        }
        if config.latent_dim > config.input_dim {
            warn!(
                "latent dim {} exceeds padded input dim {}; the VAE does not compress",
                config.latent_dim, config.input_dim
            );
        }
        let encoder = MlpSpec::tanh_head(&[config.input_dim, config.hidden, 2 * config.latent_dim], seed)?;
        let decoder = MlpSpec::tanh_head(&[config.latent_dim, config.hidden, config.input_dim], seed.wrapping_add(1))?;
        Ok(Self {
            config,
            encoder: Network::new(encoder, "rep.encoder"),
            decoder: Network::new(decoder, "rep.decoder"),
        })
    }

    /// Wraps hand-built halves; the encoder must emit `[mean, log_var]`.
    pub fn from_networks(encoder: Network, decoder: Network) -> Result<Self> {
        let latent = decoder.input_dim();
        if encoder.output_dim() != 2 * latent || decoder.output_dim() != encoder.input_dim() {
            return Err(GatnError::config(format!(
                "encoder {}->{} does not pair with decoder {}->{}",
                encoder.input_dim(),
                encoder.output_dim(),
                decoder.input_dim(),
                decoder.output_dim()
            )));
        }
        Ok(Self {
            config: VaeConfig {
                input_dim: encoder.input_dim(),
                latent_dim: latent,
                hidden: 0,
            },
            encoder,
            decoder,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.decoder.input_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    /// Reparameterized encoding with caller-supplied standard-normal noise.
    pub fn encode(&self, state: &[f64], eta: &[f64]) -> Result<LatentCode> {
        let out = self.encoder.predict(state)?;
        Ok(split_code(&out, eta))
    }

    pub fn encode_sample<R: Rng + ?Sized>(&self, state: &[f64], rng: &mut R) -> Result<LatentCode> {
        let eta = standard_normal(self.latent_dim(), rng);
        self.encode(state, &eta)
    }

    /// Deterministic mean path used for acting and evaluation.
    pub fn encode_mean(&self, state: &[f64]) -> Result<Vec<f64>> {
        let mut out = self.encoder.predict(state)?;
        out.truncate(self.latent_dim());
        Ok(out)
    }

    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.decoder.predict(z)
    }

    /// Forward and backward for one state; gradients are scaled by `scale`
    /// and accumulated into both halves.
    pub fn accumulate_loss(&mut self, state: &[f64], eta: &[f64], scale: f64) -> Result<VaeLoss> {
        let latent = self.latent_dim();
        let (enc_out, enc_tape) = self.encoder.forward(state)?;
        let code = split_code(&enc_out, eta);
        let (recon, dec_tape) = self.decoder.forward(&code.z)?;
        let loss = vae_loss(state, &recon, &code.mean, &code.log_var);

        let g_recon: Vec<f64> = recon.iter().zip(state).map(|(r, s)| scale * 2.0 * (r - s)).collect();
        let g_z = self.decoder.backward(&dec_tape, &g_recon)?;
        let mut g_enc = vec![0.0; 2 * latent];
        for j in 0..latent {
            let lv = code.log_var[j];
            let sd = (0.5 * lv).exp();
            g_enc[j] = g_z[j] + scale * code.mean[j];
            let raw = enc_out[latent + j];
            // the clamp has zero slope outside its range
            if raw.abs() <= LOG_VAR_CLAMP {
                g_enc[latent + j] = g_z[j] * eta[j] * 0.5 * sd + scale * 0.5 * (lv.exp() - 1.0);
            }
        }
        self.encoder.backward(&enc_tape, &g_enc)?;
        Ok(loss)
    }

    /// Mean-over-batch VAE loss for fixed noise draws, no gradients.
    pub fn batch_loss(&self, batch: &[Vec<f64>], etas: &[Vec<f64>]) -> Result<VaeLoss> {
        let mut acc = VaeLoss::default();
        for (s, eta) in batch.iter().zip(etas) {
            let code = self.encode(s, eta)?;
            let recon = self.decode(&code.z)?;
            let l = vae_loss(s, &recon, &code.mean, &code.log_var);
            acc.total += l.total;
            acc.recon += l.recon;
            acc.kl += l.kl;
        }
        let n = batch.len().max(1) as f64;
        Ok(VaeLoss {
            total: acc.total / n,
            recon: acc.recon / n,
            kl: acc.kl / n,
        })
    }

    /// One SGD step on the mean VAE loss of `batch`; returns the pre-step loss.
    pub fn update_rep<R: Rng + ?Sized>(&mut self, batch: &[Vec<f64>], lr: f64, rng: &mut R) -> Result<f64> {
        if batch.is_empty() {
            return Err(GatnError::usage("VAE update on an empty batch"));
        }
        self.encoder.params.zero_grad();
        self.decoder.params.zero_grad();
        let scale = 1.0 / batch.len() as f64;
        let mut total = 0.0;
        for state in batch {
            let eta = standard_normal(self.latent_dim(), rng);
            total += self.accumulate_loss(state, &eta, scale)?.total;
        }
        let loss = total * scale;
        if !loss.is_finite() {
            return Err(GatnError::numerical("rep", format!("VAE loss is {loss}")));
        }
        sgd_step(&mut self.encoder.params, lr)?;
        sgd_step(&mut self.decoder.params, lr)?;
        Ok(loss)
    }

    /// Mean squared-L2 error of `decode(encode(s).mean)`.
    pub fn mean_reconstruction_error(&self, states: &[Vec<f64>]) -> Result<f64> {
        let mut total = 0.0;
        for s in states {
            let recon = self.decode(&self.encode_mean(s)?)?;
            total += s.iter().zip(&recon).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
        Ok(total / states.len().max(1) as f64)
    }
}

impl Parameterized for Vae {
    fn groups(&self) -> Vec<&ParamGroup> {
        vec![&self.encoder.params, &self.decoder.params]
    }
    fn groups_mut(&mut self) -> Vec<&mut ParamGroup> {
        vec![&mut self.encoder.params, &mut self.decoder.params]
    }
}

pub fn standard_normal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn split_code(enc_out: &[f64], eta: &[f64]) -> LatentCode {
    let latent = enc_out.len() / 2;
    let mean = enc_out[..latent].to_vec();
    let log_var: Vec<f64> = enc_out[latent..]
        .iter()
        .map(|v| v.clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP))
        .collect();
    let z = mean
        .iter()
        .zip(&log_var)
        .zip(eta)
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect();
    LatentCode { mean, log_var, z }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::grad_check;
    use crate::envs::{sample_states, EnvSpec};
    use crate::rng::{substream, Stream};

    fn zero_vae(input: usize, latent: usize) -> Vae {
        let mut vae = Vae::new(
            VaeConfig {
                input_dim: input,
                latent_dim: latent,
                hidden: 4,
            },
            0,
        )
        .unwrap();
        vae.encoder.params.values_mut().iter_mut().for_each(|v| *v = 0.0);
        vae.decoder.params.values_mut().iter_mut().for_each(|v| *v = 0.0);
        vae
    }

    #[test]
    fn zero_encoder_gives_standard_code() {
        let vae = zero_vae(5, 2);
        let code = vae.encode(&[1.0, 2.0, 3.0, 4.0, 5.0], &[0.3, -1.2]).unwrap();
        assert_eq!(code.mean, vec![0.0, 0.0]);
        assert_eq!(code.log_var, vec![0.0, 0.0]);
        assert_eq!(code.z, vec![0.3, -1.2]);
    }

    #[test]
    fn zero_noise_is_mean() {
        let vae = Vae::new(
            VaeConfig {
                input_dim: 4,
                latent_dim: 2,
                hidden: 6,
            },
            3,
        )
        .unwrap();
        let s = [0.1, 0.5, -0.2, 1.0];
        let code = vae.encode(&s, &[0.0, 0.0]).unwrap();
        assert_eq!(code.z, code.mean);
        assert_eq!(vae.encode_mean(&s).unwrap(), code.mean);
    }

    #[test]
    fn reparameterization_arithmetic() {
        let code = split_code(&[1.0, 1.0, 0.0, 0.0], &[0.5, -0.5]);
        assert_eq!(code.z, vec![1.5, 0.5]);
    }

    #[test]
    fn log_var_is_clamped() {
        let code = split_code(&[0.0, 50.0], &[1.0]);
        assert_eq!(code.log_var, vec![LOG_VAR_CLAMP]);
        let code = split_code(&[0.0, -50.0], &[1.0]);
        assert_eq!(code.log_var, vec![-LOG_VAR_CLAMP]);
    }

    #[test]
    fn zero_decoder_reconstructs_zeros() {
        let vae = zero_vae(3, 2);
        assert_eq!(vae.decode(&[4.0, -1.0]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn identity_autoencoder_reconstructs_exactly() {
        let d = 3;
        let enc_spec = MlpSpec::new(vec![d, 2 * d], vec![crate::diffcore::Activation::Identity], 0).unwrap();
        let mut enc = enc_spec.zeros("rep.encoder");
        for i in 0..d {
            enc.values_mut()[i * d + i] = 1.0;
        }
        let dec_spec = MlpSpec::new(vec![d, d], vec![crate::diffcore::Activation::Identity], 0).unwrap();
        let mut dec = dec_spec.zeros("rep.decoder");
        for i in 0..d {
            dec.values_mut()[i * d + i] = 1.0;
        }
        let vae = Vae::from_networks(
            Network::from_params(enc_spec, enc).unwrap(),
            Network::from_params(dec_spec, dec).unwrap(),
        )
        .unwrap();
        let s = [0.25, -1.5, 3.0];
        assert_eq!(vae.decode(&vae.encode_mean(&s).unwrap()).unwrap(), s.to_vec());
    }

    #[test]
    fn loss_examples() {
        assert_eq!(vae_loss(&[1.0, 2.0], &[1.0, 2.0], &[0.0, 0.0], &[0.0, 0.0]), VaeLoss::default());
        let l = vae_loss(&[1.0, 0.0], &[0.0, 0.0], &[0.0, 0.0], &[0.0, 0.0]);
        assert_eq!((l.recon, l.kl, l.total), (1.0, 0.0, 1.0));
        assert_eq!(vae_loss(&[], &[], &[1.0, 0.0], &[0.0, 0.0]).kl, 0.5);
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let mut vae = Vae::new(
            VaeConfig {
                input_dim: 10,
                latent_dim: 3,
                hidden: 8,
            },
            1,
        )
        .unwrap();
        let before = vae.clone();
        let mut rng = substream(0, Stream::Vae);
        let batch = sample_states(&EnvSpec::line(10).unwrap(), 16, &mut rng).unwrap();
        let loss = vae.update_rep(&batch, 0.0, &mut rng).unwrap();
        assert!(loss > 0.0);
        assert_eq!(vae.encoder.params.values(), before.encoder.params.values());
        assert_eq!(vae.decoder.params.values(), before.decoder.params.values());
    }

    #[test]
    fn empty_batch_is_rejected() {
        let mut vae = zero_vae(3, 1);
        let mut rng = substream(0, Stream::Vae);
        assert!(vae.update_rep(&[], 0.1, &mut rng).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut vae = Vae::new(
            VaeConfig {
                input_dim: 6,
                latent_dim: 3,
                hidden: 5,
            },
            7,
        )
        .unwrap();
        let mut rng = substream(2, Stream::Check);
        let batch: Vec<Vec<f64>> = (0..4).map(|_| standard_normal(6, &mut rng)).collect();
        let etas: Vec<Vec<f64>> = (0..4).map(|_| standard_normal(3, &mut rng)).collect();
        let report = grad_check(&mut vae, 50, 1e-5, &mut rng, |vae: &mut Vae| {
            let mut total = 0.0;
            for (s, e) in batch.iter().zip(&etas) {
                total += vae.accumulate_loss(s, e, 0.25)?.total;
            }
            Ok(total * 0.25)
        })
        .unwrap();
        assert!(report.max_rel_error <= 1e-4, "{:?}", report.worst());
    }

    #[test]
    fn training_reduces_loss() {
        let mut rng = substream(5, Stream::Vae);
        let line = EnvSpec::line(10).unwrap();
        let grid = EnvSpec::grid(4, 4).unwrap();
        let d_max = 16;
        let mut corpus: Vec<Vec<f64>> = sample_states(&line, 200, &mut rng)
            .unwrap()
            .iter()
            .map(|s| pad_to(s, d_max))
            .collect();
        corpus.extend(sample_states(&grid, 200, &mut rng).unwrap());
        let mut vae = Vae::new(
            VaeConfig {
                input_dim: d_max,
                latent_dim: 4,
                hidden: 16,
            },
            2,
        )
        .unwrap();
        let mut first = None;
        let mut last = 0.0;
        for _ in 0..500 {
            let batch: Vec<Vec<f64>> = (0..32).map(|_| corpus[rng.random_range(0..corpus.len())].clone()).collect();
            last = vae.update_rep(&batch, 0.0005, &mut rng).unwrap();
            first.get_or_insert(last);
        }
        assert!(last < first.unwrap(), "{last} vs {first:?}");
    }
}
