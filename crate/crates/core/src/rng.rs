//! Counter-based Gaussian increment generator.
//!
//! Every Brownian increment is a pure function of (seed, path, step), so
//! paths can be simulated in any order, in parallel, or in windows without
//! changing a single draw. No generator state is carried between calls.

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;
const PATH_STREAM: u64 = 0xA076_1D64_78BD_642F;
const STEP_STREAM: u64 = 0xE703_7ED1_A0B4_28DB;

/// SplitMix64 finalizer; statistically strong 64-bit mixer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[inline]
fn key(seed: u64, path: u64, step: u64, lane: u64) -> u64 {
    let a = mix64(seed ^ PATH_STREAM.wrapping_mul(path).wrapping_add(lane));
    mix64(a ^ STEP_STREAM.wrapping_mul(step))
}

/// Uniform in (0, 1]: the +1 keeps log() finite.
#[inline]
fn uniform_open(bits: u64) -> f64 {
    (((bits >> 11) + 1) as f64) * (1.0 / 9_007_199_254_740_992.0)
}

/// Uniform in [0, 1).
#[inline]
fn uniform_half_open(bits: u64) -> f64 {
    ((bits >> 11) as f64) * (1.0 / 9_007_199_254_740_992.0)
}

/// Standard normal draw for the (seed, path, step) cell via Box-Muller.
#[inline]
pub fn standard_normal(seed: u64, path: u64, step: u64) -> f64 {
    let u1 = uniform_open(key(seed, path, step, 0));
    let u2 = uniform_half_open(key(seed, path, step, 1));
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Uniform draw in [lo, hi) for the given cell; used for seeded test points.
#[inline]
pub fn uniform_in(seed: u64, path: u64, step: u64, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * uniform_half_open(key(seed, path, step, 2))
}
