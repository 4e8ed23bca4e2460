//! Counter-based pseudorandom functions.
//!
//! Every random quantity in the projection operators is a pure function of
//! `(seed, counters...)`, so projection matrices never need to be stored and
//! any entry can be regenerated independently of the others.

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hash of a seed and three counters.
#[inline]
pub fn hash3(seed: u64, a: u64, b: u64, c: u64) -> u64 {
    let mut h = mix64(seed.wrapping_add(GOLDEN));
    h = mix64(h ^ a.wrapping_mul(GOLDEN).wrapping_add(0x632b_e59b_d9b4_e019));
    h = mix64(h ^ b.wrapping_mul(0xd6e8_feb8_6659_fd93).wrapping_add(1));
    mix64(h ^ c.wrapping_mul(0xa076_1d64_78bd_642f).wrapping_add(2))
}

/// Uniform integer in `[0, n)` via the multiply-shift reduction.
#[inline]
pub fn below(h: u64, n: usize) -> usize {
    ((h as u128 * n as u128) >> 64) as usize
}

/// `+1.0` or `-1.0` from the top bit.
#[inline]
pub fn sign(h: u64) -> f64 {
    if h >> 63 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// Uniform in the open interval `(0, 1)`.
#[inline]
pub fn unit_open(h: u64) -> f64 {
    ((h >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

/// Standard normal draw keyed by `(seed, a, b)` using Box-Muller on two
/// independent counters.
#[inline]
pub fn gaussian(seed: u64, a: u64, b: u64) -> f64 {
    let u1 = unit_open(hash3(seed, a, b, 0x4741_5553));
    let u2 = unit_open(hash3(seed, a, b, 0x5353_4e32));
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
