//! Name-keyed, counter-based parameter initialization.
//!
//! Element `i` of a tensor named `name` is a pure function of
//! `(seed, name, i)`, so initial values do not depend on the order in which
//! parameters are created.

use super::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// U(-1/sqrt(fan_in), 1/sqrt(fan_in)) with `fan_in = shape[0]`
    /// (weights are stored `[in, out]`).
    UniformScaled,
    /// U(-bound, bound).
    Uniform(f32),
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Stateless generator: `at(i)` depends only on the key and `i`.
#[derive(Debug, Clone, Copy)]
pub struct CounterRng {
    key: u64,
}

impl CounterRng {
    pub fn new(seed: u64, name: &str) -> Self {
        Self {
            key: splitmix64(seed ^ splitmix64(fnv1a(name.as_bytes()))),
        }
    }

    pub fn bits(&self, i: u64) -> u64 {
        splitmix64(self.key ^ splitmix64(i))
    }

    /// Uniform in [0, 1) with 53 bits of resolution.
    pub fn uniform(&self, i: u64) -> f64 {
        (self.bits(i) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

pub fn seeded_init(name: &str, shape: &[usize], scheme: Init, seed: u64) -> Tensor {
    let n: usize = shape.iter().product();
    let fill = |bound: f64| {
        let rng = CounterRng::new(seed, name);
        (0..n as u64)
            .map(|i| ((2.0 * rng.uniform(i) - 1.0) * bound) as f32)
            .collect::<Vec<f32>>()
    };
    let data = match scheme {
        Init::Zeros => vec![0.0; n],
        Init::Ones => vec![1.0; n],
        Init::UniformScaled => {
            let fan_in = shape.first().copied().unwrap_or(1).max(1);
            fill(1.0 / (fan_in as f64).sqrt())
        }
        Init::Uniform(b) => fill(b as f64),
    };
    Tensor::new(shape.to_vec(), data).expect("length matches shape by construction")
}
