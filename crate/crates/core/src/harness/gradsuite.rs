//! Finite-difference checks of every trained loss on a freshly built agent.

use std::sync::Arc;

use super::experiment::assemble_library;
use super::presets::Preset;
use crate::adapter::{td_target, GradTargets, RobustMode, TransferModel};
use crate::diffcore::{grad_check, GradCheckReport, MlpSpec, Network};
use crate::envs::sample_states;
use crate::error::{GatnError, Result};
use crate::repr::{pad_to, standard_normal, Vae};
use crate::rng::{substream, Stream};
use crate::sched::Scheduler;
use crate::trainer::Agent;

/// Finite-difference step used by the suite.
pub const GRAD_CHECK_STEP: f64 = 1e-5;

/// Checks the VAE loss, both robustness-loss modes, the TD loss and the
/// scheduler log-probability, `probes` coordinates each.
pub fn grad_check_suite(probes: usize, seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    if probes == 0 {
        return Err(GatnError::usage("grad-check needs at least one probe"));
    }
    let config = Preset::Effic.config()?;
    let hidden = config.hyper.hidden;
    let nets = config
        .sources
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let spec = MlpSpec::tanh_head(&[s.env.state_dim(), hidden, s.env.action_count()], seed + 100 + i as u64)?;
            Ok(Network::new(spec, &format!("source.{i}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let library = Arc::new(assemble_library(&config, nets)?);
    let mut hyper = config.hyper.clone();
    hyper.seed = seed;
    let mut agent = Agent::new(config.variant, hyper, config.target.clone(), library)?;
    let mut rng = substream(seed, Stream::Check);
    let states = sample_states(&config.target, 6, &mut rng)?;
    let mut reports = Vec::new();

    let mut vae = agent.vae.take().ok_or_else(|| GatnError::config("grad-check agent has no VAE"))?;
    let batch: Vec<Vec<f64>> = states.iter().map(|s| pad_to(s, vae.input_dim())).collect();
    let etas: Vec<Vec<f64>> = batch.iter().map(|_| standard_normal(vae.latent_dim(), &mut rng)).collect();
    let scale = 1.0 / batch.len() as f64;
    reports.push((
        "vae",
        grad_check(&mut vae, probes, GRAD_CHECK_STEP, &mut rng, |v: &mut Vae| {
            let mut total = 0.0;
            for (s, e) in batch.iter().zip(&etas) {
                total += v.accumulate_loss(s, e, scale)?.total;
            }
            Ok(total * scale)
        })?,
    ));

    let dim = vae.input_dim();
    let encode = |s: &[f64]| vae.encode_mean(&pad_to(s, dim));
    let selection: Vec<usize> = (0..config.hyper.m).collect();
    let model = &mut agent.model;
    let current = model.point(&states[0], encode(&states[0])?, &selection)?;
    let next = model.point(&states[1], encode(&states[1])?, &selection)?;
    let sigma = config.hyper.sigma.max(0.1);
    for (name, mode) in [("robust (latent)", RobustMode::Latent), ("robust (state)", RobustMode::State)] {
        reports.push((
            name,
            grad_check(model, probes, GRAD_CHECK_STEP, &mut rng, |m: &mut TransferModel| {
                let mut noise = substream(seed, Stream::Robust);
                m.robust_loss(&current, &selection, sigma, mode, &encode, &mut noise, Some((1.0, GradTargets::ALL)))
            })?,
        ));
    }

    let next_q = model.forward(&next, &selection)?.q;
    let target = td_target(0.3, config.hyper.gamma, Some(&next_q));
    let action = 1;
    reports.push((
        "td",
        grad_check(model, probes, GRAD_CHECK_STEP, &mut rng, |m: &mut TransferModel| {
            let trace = m.forward(&current, &selection)?;
            let delta = target - trace.q[action];
            let mut dq = vec![0.0; trace.q.len()];
            dq[action] = -2.0 * delta;
            m.backward(&trace, &dq, GradTargets::ALL)?;
            Ok(delta * delta)
        })?,
    ));

    let mut sched = agent
        .scheduler
        .take()
        .ok_or_else(|| GatnError::config("grad-check agent has no scheduler"))?;
    let z = encode(&states[2])?;
    let drawn = sched.select(&z, &mut rng)?.indices;
    reports.push((
        "scheduler log-prob",
        grad_check(&mut sched, probes, GRAD_CHECK_STEP, &mut rng, |s: &mut Scheduler| {
            s.accumulate_log_prob(&z, &drawn, 1.0)
        })?,
    ));
    Ok(reports)
}
