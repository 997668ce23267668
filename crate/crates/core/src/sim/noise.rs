//! Counter-based noise: every draw is a pure function of its key, so
//! rendering order and thread count never change the output.

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes an ordered list of words into one 64-bit hash.
pub fn hash64(words: &[u64]) -> u64 {
    words
        .iter()
        .fold(0x243f_6a88_85a3_08d3u64, |h, &w| splitmix64(h ^ splitmix64(w)))
}

#[inline]
fn unit_open(bits: u64) -> f64 {
    // 53 random mantissa bits, shifted off zero.
    ((bits >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

/// Standard normal sample keyed on `(seed, x, y, channel)` via Box-Muller.
pub fn gaussian_at(seed: u64, x: u64, y: u64, channel: u64) -> f64 {
    let h = hash64(&[seed, x, y, channel]);
    let u1 = unit_open(h);
    let u2 = unit_open(splitmix64(h));
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
