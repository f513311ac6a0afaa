//! Seeded randomness helpers.
//!
//! All stochastic state in a run flows from one `u64` seed through
//! [`RunRng`]. Normals come from a fixed Box-Muller routine (two uniforms per
//! variate, cosine branch only) so draw consumption is identical across
//! platforms and library versions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// The stream cipher RNG used everywhere; seeded explicitly, never from OS entropy.
pub type RunRng = ChaCha8Rng;

/// Build the RNG for a given seed.
pub fn rng_from_seed(seed: u64) -> RunRng {
    RunRng::seed_from_u64(seed)
}

/// splitmix64 finalizer; decorrelates nearby seeds.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive an independent stream seed from a master seed and a run index.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    splitmix64(master ^ splitmix64(index.wrapping_add(1)))
}

/// One standard-normal variate. Consumes exactly two uniforms.
pub fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>(); // (0, 1]: keeps ln() finite
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Fill a buffer with iid standard normals in index order.
pub fn fill_standard_normal<R: Rng>(rng: &mut R, out: &mut [f64]) {
    for v in out.iter_mut() {
        *v = standard_normal(rng);
    }
}
