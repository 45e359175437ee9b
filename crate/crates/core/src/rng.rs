//! Deterministic, name-addressed random streams for weight initialization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeededRng {
    seed: u64,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent substream keyed by a hierarchical tensor name.
    pub fn stream(&self, name: &str) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&self.seed.to_le_bytes());
        key[8..16].copy_from_slice(&fnv1a(name.as_bytes()).to_le_bytes());
        key[16..24].copy_from_slice(&(name.len() as u64).to_le_bytes());
        ChaCha8Rng::from_seed(key)
    }

    pub fn uniform(&self, name: &str, shape: &[usize], bound: f32) -> Tensor {
        let mut rng = self.stream(name);
        Tensor::from_fn(shape, |_| rng.gen_range(-bound..=bound))
    }

    /// Uniform in ±√(1/fan_in).
    pub fn fan_in_uniform(&self, name: &str, shape: &[usize], fan_in: usize) -> Tensor {
        self.uniform(name, shape, (1.0 / fan_in.max(1) as f32).sqrt())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_name_same_values() {
        let a = SeededRng::new(7).uniform("fpn.enc.weight", &[4, 4], 1.0);
        let b = SeededRng::new(7).uniform("fpn.enc.weight", &[4, 4], 1.0);
        assert_eq!(a, b);
    }

    #[test]
    fn names_and_seeds_separate_streams() {
        let base = SeededRng::new(7).uniform("a", &[16], 1.0);
        assert_ne!(base, SeededRng::new(7).uniform("b", &[16], 1.0));
        assert_ne!(base, SeededRng::new(8).uniform("a", &[16], 1.0));
    }

    #[test]
    fn bound_respected() {
        let t = SeededRng::new(1).fan_in_uniform("w", &[1000], 4);
        assert!(t.data().iter().all(|v| v.abs() <= 0.5));
    }
}
