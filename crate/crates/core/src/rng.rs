//! Named random sub-streams derived from one experiment seed.
//!
//! Every consumer of randomness (split, pmf, policy-init, rollout, ...)
//! draws from its own ChaCha stream so that adding draws in one place never
//! shifts the values seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Stream `name` of experiment `seed`.
pub fn stream(seed: u64, name: &str) -> Rng {
    let mut rng = Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(name.as_bytes()));
    rng
}

/// Stream `name` further keyed by integer coordinates (round, user, ...).
/// Used where work is split across threads and each unit needs its own
/// reproducible generator.
pub fn substream(seed: u64, name: &str, keys: &[u64]) -> Rng {
    let mut s = splitmix(seed);
    for &k in keys {
        s = splitmix(s ^ k);
    }
    let mut rng = Rng::seed_from_u64(s);
    rng.set_stream(fnv1a(name.as_bytes()));
    rng
}
