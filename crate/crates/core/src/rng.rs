//! Seeded random substreams.
//!
//! Every run draws all of its randomness from a single seed. Each consumer
//! (environment, exploration, VAE sampling, robustness noise, scheduler)
//! gets its own ChaCha stream so that switching one feature off does not
//! shift the random sequence seen by the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{GatnError, Result};

pub type Rng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Env = 1,
    Explore = 2,
    Vae = 3,
    Robust = 4,
    Sched = 5,
    Eval = 6,
    Pretrain = 7,
    Check = 8,
    Init = 9,
}

pub fn substream(seed: u64, stream: Stream) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// The per-run bundle of substreams consumed by training.
#[derive(Clone, Debug)]
pub struct RunRng {
    pub seed: u64,
    pub env: Rng,
    pub explore: Rng,
    pub vae: Rng,
    pub robust: Rng,
    pub sched: Rng,
}

impl RunRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            env: substream(seed, Stream::Env),
            explore: substream(seed, Stream::Explore),
            vae: substream(seed, Stream::Vae),
            robust: substream(seed, Stream::Robust),
            sched: substream(seed, Stream::Sched),
        }
    }
}

impl RunRng {
    fn streams(&self) -> [(&'static str, &Rng); 5] {
        [
            ("env", &self.env),
            ("explore", &self.explore),
            ("vae", &self.vae),
            ("robust", &self.robust),
            ("sched", &self.sched),
        ]
    }

    /// `chacha8 seed=<s> env=<pos> ...` with each stream's word position.
    pub fn descriptor(&self) -> String {
        let mut out = format!("chacha8 seed={}", self.seed);
        for (name, rng) in self.streams() {
            out.push_str(&format!(" {name}={}", rng.get_word_pos()));
        }
        out
    }

    /// Inverse of [`RunRng::descriptor`].
    pub fn from_descriptor(text: &str) -> Result<Self> {
        let bad = || GatnError::config(format!("bad RNG descriptor `{text}`"));
        let mut parts = text.split_whitespace();
        if parts.next() != Some("chacha8") {
            return Err(bad());
        }
        let mut fields = std::collections::HashMap::new();
        for p in parts {
            let (k, v) = p.split_once('=').ok_or_else(bad)?;
            fields.insert(k, v.parse::<u128>().map_err(|_| bad())?);
        }
        let seed = u64::try_from(*fields.get("seed").ok_or_else(bad)?).map_err(|_| bad())?;
        let mut out = Self::new(seed);
        for (name, rng) in [
            ("env", &mut out.env),
            ("explore", &mut out.explore),
            ("vae", &mut out.vae),
            ("robust", &mut out.robust),
            ("sched", &mut out.sched),
        ] {
            rng.set_word_pos(*fields.get(name).ok_or_else(bad)?);
        }
        Ok(out)
    }
}
