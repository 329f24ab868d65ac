//! Named random streams derived from one run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fnv1a(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Independent generator for `name` under `seed`. Distinct names never
/// share a stream.
pub fn stream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(name));
    rng
}

/// Sub-seed for component `name`, e.g. network initialization.
pub fn derive(seed: u64, name: &str) -> u64 {
    seed ^ fnv1a(name).rotate_left(17)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn names_separate_streams() {
        let a = stream(7, "shuffle").next_u64();
        let b = stream(7, "init").next_u64();
        assert_ne!(a, b);
        assert_eq!(a, stream(7, "shuffle").next_u64());
    }
}
