//! Seeded, splittable randomness.
//!
//! Every stochastic choice in the pipeline (weight init, shuffles, dropout,
//! Monte Carlo perturbations, synthetic data) draws from a [`SeededRng`]
//! identified by a `(seed, stream)` pair. Identical pairs produce identical
//! byte streams on every platform; distinct streams are independent. Streams
//! are derived, never shared, so parallel schedules cannot change results.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Tensor;

/// Deterministic random stream keyed by `(seed, stream)`.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl SeededRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        SeededRng { seed, stream, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Derive an independent child stream. The child's stream id mixes the
    /// parent stream with `tag`, so `derive(a) != derive(b)` for `a != b` and
    /// children of distinct parents never collide in practice.
    pub fn derive(&self, tag: u64) -> Self {
        let stream = splitmix64(self.stream ^ splitmix64(tag ^ 0xa076_1d64_78bd_642f));
        SeededRng::new(self.seed, stream)
    }

    /// One standard-normal draw.
    pub fn normal(&mut self) -> f64 {
        Normal::new(0.0f64, 1.0)
            .expect("unit normal is valid")
            .sample(&mut self.inner)
    }

    /// Fill `out` with independent draws from N(mean, std^2), stored as f32.
    pub fn fill_normal(&mut self, out: &mut [f32], mean: f64, std: f64) {
        let dist = Normal::new(mean, std).expect("finite mean/std");
        for v in out.iter_mut() {
            *v = dist.sample(&mut self.inner) as f32;
        }
    }

    /// A tensor of the given shape with i.i.d. N(mean, std^2) entries.
    pub fn sample_normal(&mut self, mean: f64, std: f64, shape: &[usize]) -> Tensor {
        let mut t = Tensor::zeros(shape);
        self.fill_normal(t.data_mut(), mean, std);
        t
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Fisher-Yates shuffle, deterministic in the stream.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        let n = items.len();
        if n < 2 {
            return;
        }
        for i in (1..n).rev() {
            let j = self.inner.random_range(0..=i);
            items.swap(i, j);
        }
    }

    /// Sample `k` distinct indices from `0..n` (k <= n), in draw order.
    pub fn choose_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        self.shuffle(&mut idx);
        idx.truncate(k.min(n));
        idx
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }
}
