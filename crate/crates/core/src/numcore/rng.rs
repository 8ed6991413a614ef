//! Counter-based Gaussian and uniform draws.
//!
//! Draw number `k` of a stream is a pure function of `(seed, k)`, so streams can
//! be split by label and consumed in any order without changing their values.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use super::Array;

/// ChaCha words consumed per draw (two `u64`).
const WORDS_PER_DRAW: u128 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub counter: u64,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self { seed, counter: 0 }
    }

    /// Independent stream named by `label`, starting at counter 0.
    pub fn derive(&self, label: &str) -> Self {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for b in label.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        Self::new(splitmix64(self.seed ^ splitmix64(h)))
    }

    /// Stream for shard `index` of a labelled family.
    pub fn derive_indexed(&self, label: &str, index: u64) -> Self {
        let base = self.derive(label);
        Self::new(splitmix64(
            base.seed.wrapping_add(index.wrapping_mul(0x9e37_79b9_7f4a_7c15)),
        ))
    }

    fn words(&self) -> ChaCha12Rng {
        let mut core = ChaCha12Rng::seed_from_u64(self.seed);
        core.set_word_pos(self.counter as u128 * WORDS_PER_DRAW);
        core
    }

    /// Fills `out` with standard normal draws and advances the counter.
    pub fn fill_normal(&mut self, out: &mut [f64]) {
        let mut core = self.words();
        for v in out.iter_mut() {
            let u1 = open_unit(core.next_u64());
            let u2 = open_unit(core.next_u64());
            *v = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        }
        self.counter += out.len() as u64;
    }

    /// Fills `out` with uniform draws on (0, 1) and advances the counter.
    pub fn fill_uniform(&mut self, out: &mut [f64]) {
        let mut core = self.words();
        for v in out.iter_mut() {
            *v = open_unit(core.next_u64());
            core.next_u64();
        }
        self.counter += out.len() as u64;
    }

    pub fn normals(&mut self, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; n];
        self.fill_normal(&mut out);
        out
    }

    pub fn uniforms(&mut self, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; n];
        self.fill_uniform(&mut out);
        out
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniforms(1)[0]
    }

    /// Uniform index in `0..n`.
    pub fn index(&mut self, n: usize) -> usize {
        ((self.uniforms(1)[0] * n as f64) as usize).min(n.saturating_sub(1))
    }
}

/// `n` i.i.d. standard normal draws and the advanced state.
pub fn gaussian(rng: RngState, n: usize) -> (Array, RngState) {
    let mut next = rng;
    let draws = next.normals(n);
    (Array::vector(draws), next)
}

fn open_unit(bits: u64) -> f64 {
    ((bits >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
