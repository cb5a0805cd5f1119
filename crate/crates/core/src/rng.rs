use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Folds a sequence of integers into one seed (splitmix64 finalizer per step),
/// used to give every layer, chunk, tree or candidate its own stream.
pub fn mix_seed(parts: &[u64]) -> u64 {
    mix_iter(parts.iter().copied())
}

pub fn mix_iter(parts: impl IntoIterator<Item = u64>) -> u64 {
    let mut h: u64 = 0x243f_6a88_85a3_08d3;
    for p in parts {
        h ^= p
            .wrapping_add(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(h << 6)
            .wrapping_add(h >> 2);
        h = splitmix(h);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn stream(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(parts))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distinct_parts_give_distinct_seeds() {
        assert_ne!(mix_seed(&[1, 2]), mix_seed(&[2, 1]));
        assert_ne!(mix_seed(&[0]), mix_seed(&[0, 0]));
        assert_eq!(mix_seed(&[7, 3, 9]), mix_seed(&[7, 3, 9]));
    }
}
