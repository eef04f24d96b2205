//! Named random sub-streams derived from one base seed.

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a of `name`; stable across platforms and compiler versions.
fn fnv1a(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Seed for the sub-stream `name` of `base`.
pub fn substream(base: u64, name: &str) -> u64 {
    mix64(base ^ fnv1a(name))
}

/// Seed of sweep cell `(ratio, repeat)`: `base ^ hash(ratio, repeat)`.
pub fn cell_seed(base: u64, ratio: f64, repeat: usize) -> u64 {
    base ^ mix64(ratio.to_bits() ^ mix64(repeat as u64))
}
