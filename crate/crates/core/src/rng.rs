//! Hierarchical seeding: every random stream is keyed by
//! `(root seed, component, item)`, so results do not depend on the order in
//! which independent jobs run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

pub fn derive_seed(root: u64, component: &str, item: u64) -> u64 {
    splitmix64(splitmix64(root ^ fnv1a(component)) ^ splitmix64(item.wrapping_add(0x5851_F42D)))
}

pub fn stream(root: u64, component: &str, item: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, component, item))
}

pub fn standard_normal_vec<R: rand::Rng>(rng: &mut R, n: usize) -> Vec<f32> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}
