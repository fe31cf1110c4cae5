//! Seed plumbing. All randomness comes from PCG32 (the `rand_pcg` XSH-RR
//! 64/32 generator); child streams are derived by hashing a purpose tag and an
//! index into the master seed.

use rand::{Rng, SeedableRng};
use rand_pcg::Pcg32;

pub type Prng = Pcg32;

pub fn prng(seed: u64) -> Prng {
    Pcg32::seed_from_u64(seed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Child seed for `(tag, index)` under `master`. Distinct tags or indices give
/// unrelated seeds.
pub fn derive_seed(master: u64, tag: &str, index: u64) -> u64 {
    // FNV-1a over the tag bytes.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(splitmix64(master ^ h).wrapping_add(splitmix64(index)))
}

/// One standard normal draw by Box–Muller.
pub fn normal(rng: &mut Prng) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
