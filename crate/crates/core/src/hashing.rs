//! Seeded FNV-1a hashing: stable across platforms and runs, so bucket
//! assignments and structural fingerprints are portable.

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

pub fn fnv1a64(bytes: &[u8], seed: u64) -> u64 {
    let mut h = FNV_OFFSET ^ seed;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_changes_hash() {
        assert_ne!(fnv1a64(b"abc", 0), fnv1a64(b"abc", 1));
        assert_eq!(fnv1a64(b"abc", 7), fnv1a64(b"abc", 7));
    }
}
