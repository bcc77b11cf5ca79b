#![allow(clippy::excessive_precision)] // published coefficient tables

//! Closed-form reference quantities: normal distribution functions, moments
//! of the truncated Gaussian, and option-pricing formulas used as test
//! oracles and hypothesis bounds.

use std::f64::consts::PI;

/// 1/sqrt(pi)
const FRAC_1_SQRT_PI: f64 = 0.564_189_583_547_756_28;

/// Complementary error function, Cody's rational approximations.
///
/// Relative error below 1e-15 on the whole real line.
pub fn erfc(x: f64) -> f64 {
    let y = x.abs();
    let result = if y <= 0.46875 {
        return 1.0 - erf_small(x);
    } else if y <= 4.0 {
        erfc_mid(y)
    } else {
        erfc_far(y)
    };
    if x < 0.0 {
        2.0 - result
    } else {
        result
    }
}

/// Error function.
pub fn erf(x: f64) -> f64 {
    if x.abs() <= 0.46875 {
        erf_small(x)
    } else {
        1.0 - erfc(x)
    }
}

fn erf_small(x: f64) -> f64 {
    const A: [f64; 5] = [
        3.161_123_743_870_565_6e0,
        1.138_641_541_510_501_6e2,
        3.774_852_376_853_020_2e2,
        3.209_377_589_138_469_5e3,
        1.857_777_061_846_031_5e-1,
    ];
    const B: [f64; 4] = [
        2.360_129_095_234_412_1e1,
        2.440_246_379_344_441_7e2,
        1.282_616_526_077_372_3e3,
        2.844_236_833_439_170_6e3,
    ];
    let z = x * x;
    let mut num = A[4] * z;
    let mut den = z;
    for i in 0..3 {
        num = (num + A[i]) * z;
        den = (den + B[i]) * z;
    }
    x * (num + A[3]) / (den + B[3])
}

/// Joint evaluation of (Phi(x), phi(x)); both need exp(-x^2/2), which is
/// computed once. The kernel sweep calls this in its innermost loop.
pub fn normal_cdf_and_pdf(x: f64) -> (f64, f64) {
    const SQRT_2PI: f64 = 2.506_628_274_631_000_7;
    let a = x.abs() * std::f64::consts::FRAC_1_SQRT_2;
    if a <= 0.46875 {
        let cdf = 0.5 * (1.0 + erf_small(x * std::f64::consts::FRAC_1_SQRT_2));
        return (cdf, normal_pdf(x));
    }
    let ex = scaled_exp(a); // exp(-x^2/2)
    let pdf = ex / SQRT_2PI;
    let tail = if a <= 4.0 {
        ex * erfc_mid_rational(a)
    } else {
        ex * erfc_far_rational(a)
    };
    let cdf = if x < 0.0 { 0.5 * tail } else { 1.0 - 0.5 * tail };
    (cdf, pdf)
}

fn erfc_mid(y: f64) -> f64 {
    scaled_exp(y) * erfc_mid_rational(y)
}

fn erfc_mid_rational(y: f64) -> f64 {
    const C: [f64; 9] = [
        5.641_884_969_886_700_9e-1,
        8.883_149_794_388_375_9e0,
        6.611_919_063_714_163e1,
        2.986_351_381_974_001_3e2,
        8.819_522_212_417_69e2,
        1.712_047_612_634_070_6e3,
        2.051_078_377_826_071_5e3,
        1.230_339_354_797_997_2e3,
        2.153_115_354_744_038_5e-8,
    ];
    const D: [f64; 8] = [
        1.574_492_611_070_983_5e1,
        1.176_939_508_913_125e2,
        5.371_811_018_620_098_6e2,
        1.621_389_574_566_690_2e3,
        3.290_799_235_733_459_6e3,
        4.362_619_090_143_247e3,
        3.439_367_674_143_721_6e3,
        1.230_339_354_803_749_4e3,
    ];
    let mut num = C[8] * y;
    let mut den = y;
    for i in 0..7 {
        num = (num + C[i]) * y;
        den = (den + D[i]) * y;
    }
    (num + C[7]) / (den + D[7])
}

fn erfc_far(y: f64) -> f64 {
    scaled_exp(y) * erfc_far_rational(y)
}

fn erfc_far_rational(y: f64) -> f64 {
    const P: [f64; 6] = [
        3.053_266_349_612_323_4e-1,
        3.603_448_999_498_044_4e-1,
        1.257_817_261_112_292_5e-1,
        1.608_378_514_874_227_7e-2,
        6.587_491_615_298_378e-4,
        1.631_538_713_730_209_8e-2,
    ];
    const Q: [f64; 5] = [
        2.568_520_192_289_822_4e0,
        1.872_952_849_923_460_5e0,
        5.279_051_029_514_284e-1,
        6.051_834_131_244_132e-2,
        2.335_204_976_268_691_8e-3,
    ];
    if y >= 26.6 {
        return 0.0;
    }
    let ysq = 1.0 / (y * y);
    let mut num = P[5] * ysq;
    let mut den = ysq;
    for i in 0..4 {
        num = (num + P[i]) * ysq;
        den = (den + Q[i]) * ysq;
    }
    let r = ysq * (num + P[4]) / (den + Q[4]);
    (FRAC_1_SQRT_PI - r) / y
}

/// exp(-y^2) computed with the split trick to limit cancellation.
fn scaled_exp(y: f64) -> f64 {
    let ysq = (y * 16.0).trunc() / 16.0;
    let del = (y - ysq) * (y + ysq);
    (-ysq * ysq).exp() * (-del).exp()
}

/// Standard normal density.
#[inline]
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Standard normal CDF.
#[inline]
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x * std::f64::consts::FRAC_1_SQRT_2)
}

/// Upper tail P(G > x), accurate for large x.
#[inline]
pub fn normal_tail(x: f64) -> f64 {
    0.5 * erfc(x * std::f64::consts::FRAC_1_SQRT_2)
}

/// Mass P(|G| > s) assigned to the atom at zero of the truncated draw.
#[inline]
pub fn truncation_atom_mass(s: f64) -> f64 {
    if s.is_infinite() {
        0.0
    } else {
        2.0 * normal_tail(s)
    }
}

/// E|Z^s| where Z^s = G 1_{|G|<=s}: sqrt(2/pi) (1 - exp(-s^2/2)).
#[inline]
pub fn truncated_abs_moment(s: f64) -> f64 {
    let half = (2.0 / PI).sqrt();
    if s.is_infinite() {
        half
    } else {
        half * (-(-0.5 * s * s).exp_m1())
    }
}

/// E[(Z^s)^2] = 2 Phi(s) - 1 - 2 s phi(s).
#[inline]
pub fn truncated_second_moment(s: f64) -> f64 {
    if s.is_infinite() {
        1.0
    } else {
        1.0 - 2.0 * normal_tail(s) - 2.0 * s * normal_pdf(s)
    }
}

/// Zero-rate Black-Scholes call on a lognormal martingale.
pub fn black_scholes_call(spot: f64, strike: f64, vol: f64, t: f64) -> f64 {
    if t <= 0.0 || vol <= 0.0 {
        return (spot - strike).max(0.0);
    }
    let sd = vol * t.sqrt();
    let d1 = ((spot / strike).ln() + 0.5 * sd * sd) / sd;
    let d2 = d1 - sd;
    spot * normal_cdf(d1) - strike * normal_cdf(d2)
}

/// Call value on a normal terminal law with the given standard deviation.
pub fn bachelier_call(mean: f64, strike: f64, sd: f64) -> f64 {
    if sd <= 0.0 {
        return (mean - strike).max(0.0);
    }
    let d = (mean - strike) / sd;
    (mean - strike) * normal_cdf(d) + sd * normal_pdf(d)
}
