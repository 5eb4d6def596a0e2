//! Counter-based deterministic PRNG. Every random decision in the simulator
//! is a pure function of (seed, key words), so streams are reproducible
//! regardless of execution order or host.

/// splitmix64 finalizer; full-period bijective mixer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hash an arbitrary key tuple with the seed into one u64.
#[inline]
pub fn hash_key(seed: u64, words: &[u64]) -> u64 {
    let mut acc = mix64(seed ^ 0x4cf5_ad43_2745_937f);
    for &w in words {
        acc = mix64(acc ^ mix64(w));
    }
    acc
}

/// Uniform f64 in [0, 1).
#[inline]
pub fn unit_f64(seed: u64, words: &[u64]) -> f64 {
    // 53 mantissa bits.
    (hash_key(seed, words) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform integer in [0, n). n must be nonzero.
#[inline]
pub fn below(seed: u64, words: &[u64], n: u64) -> u64 {
    debug_assert!(n > 0);
    // 128-bit multiply avoids modulo bias for the small ranges used here.
    ((hash_key(seed, words) as u128 * n as u128) >> 64) as u64
}
