//! Seeded, splittable random streams.
//!
//! Every random draw in the crate goes through an [`RngStream`]. A stream is
//! identified by a 64-bit seed and a [`StreamLabel`]; the pair is hashed with
//! SplitMix64 into a sub-seed for a ChaCha8 generator, so two streams with the
//! same `(seed, label)` replay the same sequence on every platform and streams
//! with different labels do not share state. [`RngStream::derive`] splits off
//! child streams (per round, per client, per key, ...) the same way.
//!
//! Gaussian variates use the Box-Muller transform on two uniforms in (0, 1].

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Error, Result};

/// Purpose tag of a random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StreamLabel {
    Data,
    ModelInit,
    WatermarkKey,
    Verification,
    Noise,
    Attack,
}

impl StreamLabel {
    fn tag(self) -> u64 {
        match self {
            StreamLabel::Data => 0x6461_7461,
            StreamLabel::ModelInit => 0x6d6f_6465_6c69_6e69,
            StreamLabel::WatermarkKey => 0x0077_6d6b_6579,
            StreamLabel::Verification => 0x7665_7269_6679,
            StreamLabel::Noise => 0x006e_6f69_7365,
            StreamLabel::Attack => 0x6174_7461_636b,
        }
    }
}

/// SplitMix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    label: StreamLabel,
    key: u64,
    rng: ChaCha8Rng,
    spare_normal: Option<f64>,
}

impl RngStream {
    pub fn new(seed: u64, label: StreamLabel) -> Self {
        let key = mix64(mix64(seed) ^ label.tag());
        Self::with_key(seed, label, key)
    }

    fn with_key(seed: u64, label: StreamLabel, key: u64) -> Self {
        RngStream {
            seed,
            label,
            key,
            rng: ChaCha8Rng::seed_from_u64(key),
            spare_normal: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn label(&self) -> StreamLabel {
        self.label
    }

    /// Child stream for `index`; independent of how much of `self` has been consumed.
    pub fn derive(&self, index: u64) -> RngStream {
        let key = mix64(self.key ^ mix64(index.wrapping_add(0x5851_f42d_4c95_7f2d)));
        Self::with_key(self.seed, self.label, key)
    }

    /// Uniform in [0, 1) with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n` (multiply-shift; bias below 2^-32 for the sizes used here).
    pub fn index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.rng.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn bit(&mut self) -> bool {
        self.rng.next_u64() >> 63 == 1
    }

    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // 1 - U lies in (0, 1], keeping ln away from zero.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.standard_normal()).collect()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.index(i + 1);
            items.swap(i, j);
        }
    }

    /// Random permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        self.shuffle(&mut p);
        p
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

/// `rows × cols` matrix of IID N(0, 1) entries, filled row by row.
pub fn gaussian_matrix(rng: &mut RngStream, rows: usize, cols: usize) -> Result<Matrix> {
    if rows == 0 || cols == 0 {
        return Err(Error::invalid(format!(
            "gaussian_matrix needs non-zero dimensions, got {rows}x{cols}"
        )));
    }
    Matrix::from_vec(rows, cols, rng.normal_vec(rows * cols))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_and_label_replay() {
        let a = gaussian_matrix(&mut RngStream::new(7, StreamLabel::Data), 4, 4).unwrap();
        let b = gaussian_matrix(&mut RngStream::new(7, StreamLabel::Data), 4, 4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn seed_sensitivity() {
        let a = gaussian_matrix(&mut RngStream::new(7, StreamLabel::Data), 2, 3).unwrap();
        let b = gaussian_matrix(&mut RngStream::new(8, StreamLabel::Data), 2, 3).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn labels_give_distinct_streams() {
        let mut a = RngStream::new(7, StreamLabel::Data);
        let mut b = RngStream::new(7, StreamLabel::Noise);
        let xs: Vec<u64> = (0..4).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..4).map(|_| b.next_u64()).collect();
        assert_ne!(xs, ys);
    }

    #[test]
    fn derive_ignores_parent_consumption() {
        let parent = RngStream::new(3, StreamLabel::Attack);
        let mut used = parent.clone();
        used.uniform();
        assert_eq!(parent.derive(5).next_u64(), used.derive(5).next_u64());
        assert_ne!(parent.derive(5).next_u64(), parent.derive(6).next_u64());
    }

    #[test]
    fn zero_dimension_rejected() {
        let mut rng = RngStream::new(1, StreamLabel::Data);
        assert!(gaussian_matrix(&mut rng, 0, 3).is_err());
        assert!(gaussian_matrix(&mut rng, 3, 0).is_err());
    }

    #[test]
    fn normal_moments() {
        // 5σ bounds for n = 10000: mean ± 0.05, variance 1 ± 0.1 (var of s² ≈ 2/n)
        for seed in [1, 2, 3] {
            let m = gaussian_matrix(&mut RngStream::new(seed, StreamLabel::Data), 10_000, 1).unwrap();
            let xs = m.as_slice();
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
            assert!(mean.abs() < 0.05, "mean {mean}");
            assert!(var > 0.9 && var < 1.1, "var {var}");
        }
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let mut rng = RngStream::new(11, StreamLabel::Data);
        let mut p = rng.permutation(100);
        p.sort_unstable();
        assert_eq!(p, (0..100).collect::<Vec<_>>());
    }
}
