//! Unit-bin probabilities for the two entropy models, with derivatives.
//!
//! Both are evaluated on the distance `v` from the location parameter. The
//! probability uses the mirrored form `F((½ − |v|)/s) − F((−½ − |v|)/s)` so
//! that far tails do not cancel catastrophically.

use std::f64::consts::{FRAC_1_SQRT_2, LN_2};

/// Probabilities below this are clamped before taking the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

fn norm_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sigmoid_prime(x: f64) -> f64 {
    let e = (-x.abs()).exp();
    e / ((1.0 + e) * (1.0 + e))
}

/// Bits for one symbol and their derivatives with respect to the offset `v`
/// and the log-scale.
#[derive(Clone, Copy, Debug)]
pub struct BinBits {
    pub bits: f64,
    pub d_offset: f64,
    pub d_log_scale: f64,
}

fn bits_from(p: f64, dp_dv: f64, dp_dlog_scale: f64) -> BinBits {
    if p < PROB_FLOOR {
        return BinBits { bits: -PROB_FLOOR.log2(), d_offset: 0.0, d_log_scale: 0.0 };
    }
    let scale = -1.0 / (p * LN_2);
    BinBits { bits: -p.log2(), d_offset: scale * dp_dv, d_log_scale: scale * dp_dlog_scale }
}

/// Gaussian with standard deviation `exp(log_sigma)`, integrated over
/// `[v − ½, v + ½]`.
pub fn gaussian_bits(v: f64, log_sigma: f64) -> BinBits {
    let sigma = log_sigma.exp();
    let a = v.abs();
    let p = norm_cdf((0.5 - a) / sigma) - norm_cdf((-0.5 - a) / sigma);
    let hi = (v + 0.5) / sigma;
    let lo = (v - 0.5) / sigma;
    let dp_dv = (norm_pdf(hi) - norm_pdf(lo)) / sigma;
    let dp_dls = -(hi * norm_pdf(hi) - lo * norm_pdf(lo));
    bits_from(p, dp_dv, dp_dls)
}

/// Logistic with scale `exp(log_scale)`, integrated over `[v − ½, v + ½]`.
pub fn logistic_bits(v: f64, log_scale: f64) -> BinBits {
    let s = log_scale.exp();
    let a = v.abs();
    let p = sigmoid((0.5 - a) / s) - sigmoid((-0.5 - a) / s);
    let hi = (v + 0.5) / s;
    let lo = (v - 0.5) / s;
    let dp_dv = (sigmoid_prime(hi) - sigmoid_prime(lo)) / s;
    let dp_dls = -(hi * sigmoid_prime(hi) - lo * sigmoid_prime(lo));
    bits_from(p, dp_dv, dp_dls)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn check_derivatives(f: fn(f64, f64) -> BinBits) {
        let h = 1e-6;
        for &(v, ls) in &[(0.0, 0.0), (0.3, -0.5), (-1.7, 0.4), (2.2, 1.1), (-0.05, -1.5)] {
            let b = f(v, ls);
            let dv = (f(v + h, ls).bits - f(v - h, ls).bits) / (2.0 * h);
            let dls = (f(v, ls + h).bits - f(v, ls - h).bits) / (2.0 * h);
            assert!((b.d_offset - dv).abs() < 1e-6 * (1.0 + dv.abs()), "v={v} ls={ls}");
            assert!((b.d_log_scale - dls).abs() < 1e-6 * (1.0 + dls.abs()), "v={v} ls={ls}");
        }
    }

    #[test]
    fn gaussian_derivatives() {
        check_derivatives(gaussian_bits);
    }

    #[test]
    fn logistic_derivatives() {
        check_derivatives(logistic_bits);
    }

    #[test]
    fn probabilities_are_proper() {
        // Bins tile the line, so summing over integers gives one.
        for f in [gaussian_bits as fn(f64, f64) -> BinBits, logistic_bits] {
            let total: f64 = (-60..=60).map(|k| 2f64.powf(-f(k as f64 + 0.3, 0.7).bits)).sum();
            assert!((total - 1.0).abs() < 1e-9, "{total}");
        }
    }

    #[test]
    fn far_tail_is_floored() {
        let b = gaussian_bits(50.0, -2.0);
        assert_eq!(b.bits, -PROB_FLOOR.log2());
        assert_eq!(b.d_offset, 0.0);
    }

    #[test]
    fn symmetric_in_offset() {
        let a = gaussian_bits(0.8, 0.1);
        let b = gaussian_bits(-0.8, 0.1);
        assert!((a.bits - b.bits).abs() < 1e-14);
        assert!((a.d_offset + b.d_offset).abs() < 1e-12);
    }
}
