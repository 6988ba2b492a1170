//! Deterministic random streams keyed by integer tuples.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::{Lp, Tensor};

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent generator for `(seed, keys...)`; equal tuples give equal streams.
pub fn stream(seed: u64, keys: &[u64]) -> ChaCha8Rng {
    let mixed = keys.iter().fold(splitmix(seed), |acc, &k| splitmix(acc ^ splitmix(k)));
    ChaCha8Rng::seed_from_u64(mixed)
}

/// I.i.d. standard normal tensor.
pub fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("sized from shape")
}

/// Standard normal draw rescaled to unit `p`-norm.
pub fn unit_direction(rng: &mut ChaCha8Rng, shape: &[usize], p: Lp) -> Tensor {
    loop {
        let mut t = normal(rng, shape);
        if p.normalize(t.data_mut()) > 0.0 {
            return t;
        }
    }
}
