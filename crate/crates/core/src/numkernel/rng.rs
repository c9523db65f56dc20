use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::Tensor;
use crate::error::{Error, Result};

/// Seeded, labelled random stream.
///
/// The generator state is derived from `(seed, label)` only, so two streams
/// with the same pair produce the same sequence no matter which thread or
/// in which order they are created. Child streams (`derive`) extend the label.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    label: String,
    rng: ChaCha8Rng,
}

fn splitmix(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn key_for(seed: u64, label: &str) -> [u8; 32] {
    // FNV-1a over the label, mixed with the seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut state = seed ^ h.rotate_left(17);
    let mut key = [0u8; 32];
    for chunk in key.chunks_mut(8) {
        chunk.copy_from_slice(&splitmix(&mut state).to_le_bytes());
    }
    key
}

impl RngStream {
    pub fn new(seed: u64, label: impl Into<String>) -> Self {
        let label = label.into();
        let rng = ChaCha8Rng::from_seed(key_for(seed, &label));
        Self { seed, label, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// Independent child stream `label/sub`.
    pub fn derive(&self, sub: impl std::fmt::Display) -> Self {
        Self::new(self.seed, format!("{}/{}", self.label, sub))
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in the inclusive range `[lo, hi]`.
    pub fn int_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        self.rng.random_range(lo..=hi)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn gauss(&mut self, shape: &[usize]) -> Tensor {
        let len = shape.iter().product();
        let data = (0..len).map(|_| self.normal()).collect();
        Tensor::from_raw(shape.to_vec(), data)
    }

    pub fn gauss_vec(&mut self, len: usize) -> Vec<f64> {
        (0..len).map(|_| self.normal()).collect()
    }

    /// Index drawn with probability proportional to `weights`.
    pub fn categorical(&mut self, weights: &[f64]) -> Result<usize> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidArgument(
                "categorical weights must be finite and non-negative".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::InvalidArgument("categorical weights are all zero".into()));
        }
        let target = self.uniform() * total;
        let mut acc = 0.0;
        let mut last_positive = 0;
        for (i, &w) in weights.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            last_positive = i;
            acc += w;
            if target < acc {
                return Ok(i);
            }
        }
        Ok(last_positive)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// `k` distinct indices from `0..n`, in draw order.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        let mut all: Vec<usize> = (0..n).collect();
        for i in 0..k.min(n) {
            let j = i + self.below(n - i);
            all.swap(i, j);
        }
        all.truncate(k.min(n));
        all
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_categorical() {
        let mut rng = RngStream::new(7, "cat");
        for _ in 0..100 {
            assert_eq!(rng.categorical(&[0.0, 1.0, 0.0]).unwrap(), 1);
        }
    }

    #[test]
    fn invalid_weights() {
        let mut rng = RngStream::new(7, "cat");
        assert!(rng.categorical(&[0.0, 0.0]).is_err());
        assert!(rng.categorical(&[1.0, -0.5]).is_err());
        assert!(rng.categorical(&[f64::NAN]).is_err());
    }

    #[test]
    fn same_seed_and_label_repeat() {
        let a = RngStream::new(3, "noise").gauss(&[4, 5]);
        let b = RngStream::new(3, "noise").gauss(&[4, 5]);
        assert_eq!(a, b);
        let c = RngStream::new(3, "other").gauss(&[4, 5]);
        assert_ne!(a, c);
    }

    #[test]
    fn gauss_mean_is_small() {
        let mut rng = RngStream::new(11, "mean");
        let n = 1_000_000;
        let mean = rng.gauss(&[n]).sum() / n as f64;
        assert!(mean.abs() < 0.005, "mean {mean}");
    }

    #[test]
    fn categorical_frequencies() {
        let mut rng = RngStream::new(5, "freq");
        let w = [1.0, 3.0];
        let hits = (0..20_000).filter(|_| rng.categorical(&w).unwrap() == 1).count();
        let p = hits as f64 / 20_000.0;
        assert!((p - 0.75).abs() < 0.02, "p {p}");
    }

    #[test]
    fn sample_indices_are_distinct() {
        let mut rng = RngStream::new(1, "idx");
        let mut s = rng.sample_indices(10, 6);
        s.sort_unstable();
        s.dedup();
        assert_eq!(s.len(), 6);
    }
}
