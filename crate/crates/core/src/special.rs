//! Scaled complementary error function and the Gaussian-convolved exponential.

use std::f64::consts::{PI, SQRT_2};

const FRAC_1_SQRT_PI: f64 = 0.564_189_583_547_756_3;
const ASYMPTOTIC_FROM: f64 = 25.0;

/// `exp(z²)·erfc(z)`, finite for all `z` above about -26.
pub fn erfcx(z: f64) -> f64 {
    if z < ASYMPTOTIC_FROM {
        (z * z).exp() * libm::erfc(z)
    } else {
        // erfcx(z) ~ 1/(z√π) Σ (-1)^k (2k-1)!! / (2z²)^k
        let inv = 1.0 / (2.0 * z * z);
        let mut term = 1.0;
        let mut sum = 1.0;
        for k in 1..12 {
            term *= -((2 * k - 1) as f64) * inv;
            sum += term;
        }
        sum * FRAC_1_SQRT_PI / z
    }
}

/// Standard normal CDF.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / SQRT_2)
}

/// Unit exponential decay convolved with a unit-area Gaussian IRF:
///
/// `E(x; τ, s) = ½ exp(s²/2τ² − x/τ) erfc((s/τ − x/s)/√2)`, with `x = t − t0`.
///
/// Tends to `exp(-x/τ)` for `x ≫ s` and to 0 for `x ≪ -s`.
pub fn exp_gauss(x: f64, tau: f64, s: f64) -> f64 {
    let z = (s / tau - x / s) / SQRT_2;
    if z > 0.0 {
        0.5 * (-0.5 * (x / s).powi(2)).exp() * erfcx(z)
    } else {
        0.5 * (0.5 * (s / tau).powi(2) - x / tau).exp() * libm::erfc(z)
    }
}

/// `E(x; τ, s)` together with `∂E/∂τ`.
pub fn exp_gauss_dtau(x: f64, tau: f64, s: f64) -> (f64, f64) {
    let e = exp_gauss(x, tau, s);
    let gauss = (-0.5 * (x / s).powi(2)).exp();
    let d = e * (x / (tau * tau) - s * s / (tau * tau * tau))
        + s / (tau * tau * (2.0 * PI).sqrt()) * gauss;
    (e, d)
}

/// 8-point Gauss-Legendre nodes and weights on [-1, 1].
pub const GL8: [(f64, f64); 8] = [
    (-0.960_289_856_497_536_3, 0.101_228_536_290_376_26),
    (-0.796_666_477_413_626_7, 0.222_381_034_453_374_47),
    (-0.525_532_409_916_329, 0.313_706_645_877_887_3),
    (-0.183_434_642_495_649_8, 0.362_683_783_378_362),
    (0.183_434_642_495_649_8, 0.362_683_783_378_362),
    (0.525_532_409_916_329, 0.313_706_645_877_887_3),
    (0.796_666_477_413_626_7, 0.222_381_034_453_374_47),
    (0.960_289_856_497_536_3, 0.101_228_536_290_376_26),
];
