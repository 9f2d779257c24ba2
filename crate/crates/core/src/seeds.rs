//! Named sub-seeds derived from one root seed.

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for the component `name` (e.g. "data", "init", "noise", "contour").
pub fn sub_seed(root: u64, name: &str) -> u64 {
    // FNV-1a of the name
    let h = name
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3));
    mix(root ^ mix(h))
}

/// Seed for the `index`-th repetition of `name` (epochs, trials, ...).
pub fn indexed_seed(root: u64, name: &str, index: u64) -> u64 {
    mix(sub_seed(root, name) ^ mix(index))
}
