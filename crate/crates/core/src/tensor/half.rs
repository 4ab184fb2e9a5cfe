//! IEEE binary16 rounding emulated with integer operations on the `f64` bit
//! pattern, so results do not depend on any platform half type.

/// Largest finite half-precision value.
pub const F16_MAX: f64 = 65504.0;

/// Smallest positive (subnormal) half-precision value, `2^-24`.
pub const F16_MIN_POSITIVE: f64 = 1.0 / 16_777_216.0;

const F64_MANT_BITS: i32 = 52;
const F16_MANT_BITS: i32 = 10;
const F16_MIN_NORMAL_EXP: i32 = -14;

/// Rounds `v` to the nearest binary16 value, ties to even.
///
/// Magnitudes beyond [`F16_MAX`] saturate to `±F16_MAX` instead of
/// overflowing to infinity. NaN is passed through unchanged.
pub fn round_f16(v: f64) -> f64 {
    if v.is_nan() {
        return v;
    }
    let bits = v.to_bits();
    let negative = bits >> 63 == 1;
    let biased = ((bits >> 52) & 0x7ff) as i32;
    let mantissa = bits & ((1u64 << 52) - 1);

    let magnitude = if biased == 0 {
        // f64 subnormals are far below half an f16 ulp.
        0.0
    } else if biased == 0x7ff {
        F16_MAX
    } else {
        let exp = biased - 1023;
        let significand = (1u64 << 52) | mantissa;
        let shift = if exp >= F16_MIN_NORMAL_EXP {
            F64_MANT_BITS - F16_MANT_BITS
        } else {
            F64_MANT_BITS - F16_MANT_BITS + (F16_MIN_NORMAL_EXP - exp)
        };
        if shift >= 64 {
            0.0
        } else {
            let shift = shift as u32;
            let mut q = significand >> shift;
            let rem = significand & ((1u64 << shift) - 1);
            let halfway = 1u64 << (shift - 1);
            if rem > halfway || (rem == halfway && q & 1 == 1) {
                q += 1;
            }
            let scaled = q as f64 * 2f64.powi(exp - F64_MANT_BITS + shift as i32);
            scaled.min(F16_MAX)
        }
    };
    if negative {
        -magnitude
    } else {
        magnitude
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_values_survive() {
        for v in [0.0, 1.0, -2.5, 0.5, 1.0 + 2f64.powi(-10), 2f64.powi(-24), 65504.0] {
            assert_eq!(round_f16(v), v, "{v}");
        }
    }

    #[test]
    fn ties_go_to_even() {
        assert_eq!(round_f16(1.0 + 2f64.powi(-11)), 1.0);
        assert_eq!(round_f16(1.0 + 3.0 * 2f64.powi(-11)), 1.0 + 2f64.powi(-9));
        assert_eq!(round_f16(2f64.powi(-25)), 0.0);
        assert_eq!(round_f16(3.0 * 2f64.powi(-25)), 2f64.powi(-23));
        assert_eq!(round_f16(-(1.0 + 2f64.powi(-11))), -1.0);
    }

    #[test]
    fn saturates_instead_of_overflowing() {
        assert_eq!(round_f16(65519.0), 65504.0);
        assert_eq!(round_f16(1e9), 65504.0);
        assert_eq!(round_f16(-1e9), -65504.0);
    }

    #[test]
    fn matches_nearest_grid_point() {
        // Brute-force: enumerate the f16 grid around v and pick the closest.
        let mut state = 0x9e37_79b9_7f4a_7c15u64;
        for _ in 0..20_000 {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            let u = (state >> 11) as f64 / (1u64 << 53) as f64;
            let v = (u - 0.5) * 2f64.powf(u * 40.0 - 26.0);
            let r = round_f16(v);
            let exp = if v == 0.0 {
                -24
            } else {
                (v.abs().log2().floor() as i32).max(-14) - 10
            };
            let ulp = 2f64.powi(exp);
            let below = (v / ulp).floor() * ulp;
            let above = below + ulp;
            let nearest = if (v - below).abs() < (above - v).abs() {
                below
            } else {
                above
            };
            assert!(
                (r - nearest).abs() <= 0.0 || (v - below).abs() == (above - v).abs(),
                "{v} -> {r} vs {nearest}"
            );
        }
    }
}
