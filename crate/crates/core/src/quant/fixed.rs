//! Saturating 16-bit fixed-point arithmetic with power-of-two scales.
//!
//! A raw value `r` at scale `f` represents `r * 2^-f`. Rounding is half
//! away from zero unless a function says otherwise.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FixedPoint16 {
    pub raw: i16,
    pub scale_exp: i32,
}

impl FixedPoint16 {
    pub fn to_f64(self) -> f64 {
        dequantize(self.raw, self.scale_exp)
    }
}

/// `clamp(round(x * 2^f))` into the 16-bit range.
pub fn quantize(x: f64, f: i32) -> FixedPoint16 {
    FixedPoint16 { raw: quantize_raw(x, f), scale_exp: f }
}

pub fn quantize_raw(x: f64, f: i32) -> i16 {
    if x.is_nan() {
        return 0;
    }
    // f64::round rounds half away from zero.
    (x * (f as f64).exp2()).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16
}

pub fn dequantize(raw: i16, f: i32) -> f64 {
    raw as f64 * (-f as f64).exp2()
}

pub fn sat16(v: i64) -> i16 {
    v.clamp(i16::MIN as i64, i16::MAX as i64) as i16
}

pub fn sat32(v: i64) -> i32 {
    v.clamp(i32::MIN as i64, i32::MAX as i64) as i32
}

/// `v / 2^s` rounded half away from zero; a negative `s` shifts left,
/// saturating at the i64 range.
pub fn round_shift(v: i64, s: i32) -> i64 {
    if s <= 0 {
        let s = (-s) as u32;
        return if s >= 63 {
            if v == 0 {
                0
            } else if v > 0 {
                i64::MAX
            } else {
                i64::MIN
            }
        } else {
            v.saturating_mul(1i64 << s)
        };
    }
    if s >= 64 {
        return 0;
    }
    let mag = (v.unsigned_abs() as u128 + (1u128 << (s - 1))) >> s;
    let mag = mag.min(i64::MAX as u128) as i64;
    if v < 0 {
        -mag
    } else {
        mag
    }
}

/// `num / den` rounded half away from zero. `den` must be non-zero.
pub fn round_div(num: i128, den: i128) -> i128 {
    let q = (num.abs() + den.abs() / 2) / den.abs();
    if (num < 0) != (den < 0) {
        -q
    } else {
        q
    }
}

/// Floor square root.
pub fn isqrt(n: u128) -> u128 {
    if n < 2 {
        return n;
    }
    let mut x = (n as f64).sqrt() as u128;
    while x * x > n {
        x -= 1;
    }
    while (x + 1) * (x + 1) <= n {
        x += 1;
    }
    x
}

/// Lower input bound of the Taylor exponential: the real root of
/// 1 + x + x^2/2 + x^3/6, below which the 5-term polynomial decreases.
pub const TAYLOR_MIN_INPUT: f64 = -1.596_071_637_983_3;

/// `1 + x + x^2/2 + x^3/6 + x^4/24`, input and output at scale `f`.
///
/// Evaluated as the Horner form `(((x/4 + 1) x/3 + 1) x/2 + 1) x + 1`
/// scaled by 24, i.e. `((((X + 4)X + 12)X + 24)X + 24) / 24` on the raw
/// integer `X` with coefficients shifted to the matching scales, so every
/// intermediate is exact and only the final divide rounds.
pub fn exp_taylor5(x: i16, f: i32) -> i16 {
    assert!((0..=24).contains(&f), "taylor scale {f} outside 0..=24");
    let lo = (TAYLOR_MIN_INPUT * (f as f64).exp2()).ceil() as i128;
    let x = (x as i128).max(lo);
    let f = f as u32;
    let mut t = x + (4i128 << f);
    t = t * x + (12i128 << (2 * f));
    t = t * x + (24i128 << (3 * f));
    t = t * x + (24i128 << (4 * f));
    sat16(round_div(t.max(0), 24i128 << (3 * f)) as i64)
}

/// Float reference of the same five-term polynomial.
pub fn taylor5(x: f64) -> f64 {
    1.0 + x + x * x / 2.0 + x.powi(3) / 6.0 + x.powi(4) / 24.0
}

/// Softmax over one row of logits at scale `f` with the Taylor exponential.
/// Shifted logits are clamped to `[-2, 0]`. Output at scale `f`; a row whose
/// exponentials all vanish becomes uniform.
pub fn fixed_softmax(row: &[i16], f: i32) -> Vec<i16> {
    assert!(!row.is_empty(), "softmax row must be non-empty");
    let max = *row.iter().max().expect("non-empty") as i64;
    let lo = -(2i64 << f);
    let e: Vec<i64> = row.iter().map(|&b| exp_taylor5(sat16((b as i64 - max).max(lo)), f) as i64).collect();
    let sum: i64 = e.iter().sum();
    let one = 1i128 << f;
    if sum == 0 {
        let u = sat16(round_div(one, row.len() as i128) as i64);
        return vec![u; row.len()];
    }
    e.iter().map(|&ei| sat16(round_div(ei as i128 * one, sum as i128) as i64)).collect()
}

/// Guard bits kept by the square root in [`fixed_squash`].
pub const SQRT_GUARD_BITS: u32 = 8;

/// `v = s |s|^2 / ((1 + |s|^2) |s|)` with input at scale `f_in` and output
/// at scale `f_out`; `v = 0` when `s = 0`. The final divide truncates
/// toward zero so the output norm stays below one.
pub fn fixed_squash(s: &[i16], f_in: i32, f_out: i32) -> Result<Vec<i16>> {
    if !(0..=30).contains(&f_in) || !(0..=30).contains(&f_out) {
        return Err(Error::InvalidConfig(format!("squash scales {f_in}/{f_out} outside 0..=30")));
    }
    let n2: i128 = s.iter().map(|&x| x as i128 * x as i128).sum();
    if n2 == 0 {
        return Ok(vec![0; s.len()]);
    }
    // norm = |s| at scale f_in + guard bits
    let norm = isqrt((n2 as u128) << (2 * SQRT_GUARD_BITS)) as i128;
    let den = ((1i128 << (2 * f_in)) + n2) * norm;
    let k = n2 << (SQRT_GUARD_BITS as i32 + f_out);
    Ok(s.iter().map(|&x| sat16((x as i128 * k / den) as i64)).collect())
}
