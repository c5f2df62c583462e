//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! seeded from a base seed mixed with a tag, so runs are reproducible and
//! independent of scheduling order.

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a, stable across platforms and releases (unlike `DefaultHasher`).
pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Seed for an independent stream identified by `tag` under `base`.
pub fn derive_seed(base: u64, tag: &str) -> u64 {
    splitmix64(splitmix64(base) ^ fnv1a(tag.as_bytes()))
}
