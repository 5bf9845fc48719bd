//! Counter-based random streams.
//!
//! Every stream is addressed by `(seed, stream id)`, so draws for one
//! `(timestep, branch)` never shift the draws of another.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::Tensor;

/// Stream ids reserved for sampler use.
pub mod branch {
    pub const STEP_NOISE: u64 = 0;
    pub const INITIAL_NOISE: u64 = 1;
    pub const COND: u64 = 2;
    pub const UNCOND: u64 = 3;
}

#[derive(Clone, Debug)]
pub struct SplitRng {
    inner: ChaCha8Rng,
}

/// Serializable position of a [`SplitRng`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

impl SplitRng {
    pub fn new(seed: u64) -> Self {
        Self::stream(seed, 0)
    }

    pub fn stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { inner }
    }

    /// Stream for diffusion step `t` and branch id `branch`.
    pub fn for_step(seed: u64, t: usize, branch: u64) -> Self {
        Self::stream(seed, ((t as u64) << 8) | (branch & 0xff))
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    pub fn normal_tensor(&mut self, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| self.normal())
    }

    pub fn uniform_tensor(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        Tensor::from_fn(shape, |_| lo + (hi - lo) * self.uniform())
    }
}

/// Resumable generator: remembers its seed so the full state can be checkpointed.
#[derive(Clone, Debug)]
pub struct TrackedRng {
    seed: u64,
    rng: SplitRng,
}

impl TrackedRng {
    pub fn new(seed: u64) -> Self {
        Self { seed, rng: SplitRng::new(seed) }
    }

    pub fn restore(state: RngState) -> Self {
        let mut rng = SplitRng::stream(state.seed, state.stream);
        rng.inner.set_word_pos(state.word_pos);
        Self { seed: state.seed, rng }
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.seed,
            stream: self.rng.inner.get_stream(),
            word_pos: self.rng.inner.get_word_pos(),
        }
    }

    pub fn rng(&mut self) -> &mut SplitRng {
        &mut self.rng
    }
}
