//! Seeded stream splitting.
//!
//! Every source of randomness in a run flows from one root seed through
//! named, indexed streams. Enabling or disabling a feature therefore never
//! perturbs the draws consumed by another feature: each consumer owns its
//! stream.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Tensor;

/// Derives child RNGs from a root seed via label + index mixing.
#[derive(Debug, Clone, Copy)]
pub struct SeedSplitter {
    root: u64,
}

impl SeedSplitter {
    pub fn new(root: u64) -> Self {
        SeedSplitter { root }
    }

    pub fn root(&self) -> u64 {
        self.root
    }

    /// Child seed for `(label, indices)`; FNV-1a over the label bytes and the
    /// little-endian index words, mixed with the root.
    pub fn child_seed(&self, label: &str, indices: &[u64]) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ self.root;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        eat(label.as_bytes());
        for &ix in indices {
            eat(&ix.to_le_bytes());
        }
        // splitmix64 finalizer to spread low-entropy inputs.
        let mut z = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    pub fn stream(&self, label: &str, indices: &[u64]) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(self.child_seed(label, indices))
    }
}

/// Standard-normal tensor drawn from the given stream.
pub fn normal_tensor(rng: &mut ChaCha12Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("normal draws are finite")
}

/// Uniform [0,1) tensor drawn from the given stream.
pub fn uniform_tensor(rng: &mut ChaCha12Rng, shape: &[usize]) -> Tensor {
    use rand::Rng;
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    Tensor::new(shape.to_vec(), data).expect("uniform draws are finite")
}
