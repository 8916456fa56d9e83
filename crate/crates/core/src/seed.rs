//! Deterministic seed derivation.
//!
//! Every random stream in a run is keyed by the root seed and a role string
//! such as `"init/c3"` or `"batches"`. The role is hashed with 64-bit FNV-1a,
//! mixed with the root seed, and finalized with SplitMix64, so streams for
//! different roles are independent and stable across platforms.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive(root: u64, role: &str) -> u64 {
    let mut h = FNV_OFFSET;
    for b in role.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    splitmix64(splitmix64(root) ^ h)
}

pub fn rng(root: u64, role: &str) -> Rng {
    Rng::seed_from_u64(derive(root, role))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn roles_give_distinct_streams() {
        assert_ne!(derive(7, "init/c1"), derive(7, "init/c2"));
        assert_ne!(derive(7, "batches"), derive(8, "batches"));
        assert_eq!(derive(7, "batches"), derive(7, "batches"));
    }

    #[test]
    fn fixed_values() {
        // Frozen so checkpoints and metrics stay reproducible across releases.
        assert_eq!(splitmix64(0), 0xe220_a839_7b1d_cdaf);
        let mut a = rng(1, "x");
        let mut b = rng(1, "x");
        assert_eq!(a.random::<u64>(), b.random::<u64>());
    }
}
