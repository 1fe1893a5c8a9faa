//! Phase diagram and normalization constants.
//!
//! With `g = |γ|²`:
//!
//! * `v(ε) = ε^{(g−d)/2}(½∫e^{gℓ_θ})^{−1/2}` for `g > d`,
//!   `(π^{d/2}/Γ(d/2)·log(1/ε))^{−1/2}` on the circle `g = d`;
//! * `v̄(t) = e^{(d−g)t/2}(½∫e^{−gℓ_κ})^{−1/2}` for `g > d`,
//!   `(π^{d/2}t/Γ(d/2))^{−1/2}` on the circle;
//! * `a(s) = ∫Q_s(0,z)e^{gK̂_s(0,z)}dz` and its mollified analogue.

use crate::chaos::ComplexParam;
use crate::kernels::{KernelError, Mollifier, ScaleKernel};
use crate::quad::{self, sphere_area, QuadError};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

/// Relative width of the ties treated as region boundaries.
pub const PHASE_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScalingError {
    #[error("parameter outside the required phase: {0}")]
    OutOfPhase(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Quadrature(#[from] QuadError),
}

type Result<T> = std::result::Result<T, ScalingError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PhaseRegion {
    /// `α² + β² < d`, or `|α| ∈ (√(d/2), √(2d))` with `|α| + |β| < √(2d)`.
    Subcritical,
    /// `|α| + |β| > √(2d)` and `|α| > √(d/2)`, `β ≠ 0`.
    PhaseII,
    /// `α² + β² > d` and `|α| < √(d/2)`.
    PhaseIII,
    /// `α² + β² = d` and `|α| < √(d/2)`: the circle part of the closure.
    PhaseIIIClosure,
    /// Any other tie between regions.
    Boundary,
    /// `β = 0` and `|α| > √(2d)`.
    RealSupercritical,
    /// Non-finite input.
    Other,
}

fn near(x: f64, y: f64) -> bool {
    (x - y).abs() <= PHASE_TOL * y.abs().max(1.0)
}

pub fn classify_phase(alpha: f64, beta: f64, d: usize) -> PhaseRegion {
    if !(alpha.is_finite() && beta.is_finite()) || d == 0 {
        return PhaseRegion::Other;
    }
    let d = d as f64;
    let (a, b) = (alpha.abs(), beta.abs());
    let s = a * a + b * b;
    let half = (d / 2.0).sqrt();
    let two = (2.0 * d).sqrt();
    if near(s, d) {
        return if a < half && !near(a, half) { PhaseRegion::PhaseIIIClosure } else { PhaseRegion::Boundary };
    }
    if s < d {
        return PhaseRegion::Subcritical;
    }
    if near(a, half) {
        return PhaseRegion::Boundary;
    }
    if a < half {
        return PhaseRegion::PhaseIII;
    }
    if near(a + b, two) {
        return PhaseRegion::Boundary;
    }
    if a + b < two {
        PhaseRegion::Subcritical
    } else if b == 0.0 {
        PhaseRegion::RealSupercritical
    } else {
        PhaseRegion::PhaseII
    }
}

/// Membership of the closure `|α| < √(d/2)`, `α² + β² ≥ d`.
pub fn in_phase_iii_closure(gamma: &ComplexParam, d: usize) -> bool {
    matches!(
        classify_phase(gamma.alpha, gamma.beta, d),
        PhaseRegion::PhaseIII | PhaseRegion::PhaseIIIClosure
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    StrictPhaseIII,
    Circle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormIngredients {
    /// `∫e^{±gℓ}` over R^d (strict regime only).
    pub integral: Option<f64>,
    pub gamma_half_d: f64,
    /// `log(1/ε)` or `t` (circle regime only).
    pub log_factor: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormConstant {
    pub value: f64,
    pub regime: Regime,
    pub ingredients: NormIngredients,
}

fn regime(gamma: &ComplexParam, d: usize) -> Result<Regime> {
    let g = gamma.abs_sq();
    let df = d as f64;
    if (g - df).abs() <= PHASE_TOL * df {
        Ok(Regime::Circle)
    } else if g > df {
        Ok(Regime::StrictPhaseIII)
    } else {
        Err(ScalingError::OutOfPhase(format!("|γ|² = {g} is below d = {d}")))
    }
}

/// `∫_{R^d} e^{gℓ_θ(|z|)}dz` for `g > d`.
pub fn theta_integral(moll: &Mollifier, g: f64) -> Result<f64> {
    let d = moll.dim();
    let df = d as f64;
    if !(g > df) {
        return Err(ScalingError::OutOfPhase(format!("∫e^{{gℓ_θ}} diverges for g = {g} ≤ d = {d}")));
    }
    let ell = |r: f64| moll.ell_theta(r).unwrap_or(f64::NAN);
    let radial = |r: f64| (g * ell(r)).exp() * r.powi(d as i32 - 1);
    if d == 2 {
        // the log is harmonic: ℓ_θ(z) = log(1/|z|) exactly for |z| ≥ 2
        let inner = quad::integrate_breaks(radial, 0.0, 2.0, &[1.0], 1e-10, 1e-10)?.value;
        let tail = 2f64.powf(2.0 - g) / (g - 2.0);
        return Ok(sphere_area(2) * (inner + tail));
    }
    // d = 1: log(1/|z−w|) averaged against ψ equals −log z + Σ m_{2k}/(2k z^{2k})
    let m = |k: i32| {
        quad::integrate(|w| moll.autocorrelation(w) * w.powi(k), -2.0, 2.0, 1e-13, 1e-12).map(|q| q.value)
    };
    let (m2, m4) = (m(2)?, m(4)?);
    let r_max = 20.0;
    let inner = quad::integrate_breaks(radial, 0.0, r_max, &[1.0, 2.0, 4.0, 8.0], 1e-10, 1e-10)?.value;
    let a = g * m2 / 2.0;
    let c = g * m4 / 4.0 + a * a / 2.0;
    let tail = r_max.powf(1.0 - g) / (g - 1.0) + a * r_max.powf(-1.0 - g) / (g + 1.0) + c * r_max.powf(-3.0 - g) / (g + 3.0);
    Ok(2.0 * (inner + tail))
}

/// `∫_{R^d} e^{−gℓ_κ(|z|)}dz` for `g > d`.
pub fn kappa_integral(kappa: &ScaleKernel, g: f64) -> Result<f64> {
    let d = kappa.dim();
    let df = d as f64;
    if !(g > df) {
        return Err(ScalingError::OutOfPhase(format!("∫e^{{−gℓ_κ}} diverges for g = {g} ≤ d = {d}")));
    }
    let inner = if kappa.is_triangle() && d == 1 {
        // ℓ_κ(r) = r − 1 on [0, 1]
        ((g).exp() - 1.0) / g
    } else {
        quad::integrate(
            |r| (-g * kappa.ell_kappa(r).unwrap_or(f64::NAN)).exp() * r.powi(d as i32 - 1),
            0.0,
            1.0,
            1e-12,
            1e-12,
        )?
        .value
    };
    Ok(sphere_area(d) * (inner + 1.0 / (g - df)))
}

/// `v(ε, θ, γ)`.
pub fn v_eps(eps: f64, moll: &Mollifier, gamma: &ComplexParam) -> Result<NormConstant> {
    let d = moll.dim();
    if !(eps > 0.0 && eps < 1.0) {
        return Err(ScalingError::Invalid(format!("ε must lie in (0, 1), got {eps}")));
    }
    let gamma_half_d = quad::gamma(d as f64 / 2.0);
    match regime(gamma, d)? {
        Regime::Circle => {
            let lf = (1.0 / eps).ln();
            Ok(NormConstant {
                value: (PI.powf(d as f64 / 2.0) / gamma_half_d * lf).powf(-0.5),
                regime: Regime::Circle,
                ingredients: NormIngredients { integral: None, gamma_half_d, log_factor: Some(lf) },
            })
        }
        Regime::StrictPhaseIII => {
            let g = gamma.abs_sq();
            let i = theta_integral(moll, g)?;
            Ok(v_eps_from_integral(eps, d, g, i, gamma_half_d))
        }
    }
}

/// `v(ε)` from a precomputed `∫e^{gℓ_θ}`.
pub fn v_eps_from_integral(eps: f64, d: usize, g: f64, integral: f64, gamma_half_d: f64) -> NormConstant {
    NormConstant {
        value: eps.powf((g - d as f64) / 2.0) * (0.5 * integral).powf(-0.5),
        regime: Regime::StrictPhaseIII,
        ingredients: NormIngredients { integral: Some(integral), gamma_half_d, log_factor: None },
    }
}

/// `v̄(t, κ, γ)`.
pub fn v_bar(t: f64, kappa: &ScaleKernel, gamma: &ComplexParam) -> Result<NormConstant> {
    let d = kappa.dim();
    if !(t > 0.0) {
        return Err(ScalingError::Invalid(format!("t must be positive, got {t}")));
    }
    let gamma_half_d = quad::gamma(d as f64 / 2.0);
    match regime(gamma, d)? {
        Regime::Circle => Ok(NormConstant {
            value: (PI.powf(d as f64 / 2.0) * t / gamma_half_d).powf(-0.5),
            regime: Regime::Circle,
            ingredients: NormIngredients { integral: None, gamma_half_d, log_factor: Some(t) },
        }),
        Regime::StrictPhaseIII => {
            let g = gamma.abs_sq();
            let i = kappa_integral(kappa, g)?;
            Ok(NormConstant {
                value: ((d as f64 - g) * t / 2.0).exp() * (0.5 * i).powf(-0.5),
                regime: Regime::StrictPhaseIII,
                ingredients: NormIngredients { integral: Some(i), gamma_half_d, log_factor: None },
            })
        }
    }
}

/// `a(s, κ, γ) = ∫Q_s(0,z)e^{gK̂_s(0,z)}dz`, computed after `y = e^s z`.
pub fn a_const(s: f64, kappa: &ScaleKernel, gamma: &ComplexParam) -> Result<f64> {
    if !(s >= 0.0) {
        return Err(ScalingError::Invalid(format!("s must be nonnegative, got {s}")));
    }
    let d = kappa.dim();
    let g = gamma.abs_sq();
    let es = (-s).exp();
    let inner = if kappa.is_triangle() && d == 1 {
        // K̂_s(e^{−s}y) = s − y(1 − e^{−s})
        let k = g * (1.0 - es);
        let base = if k < 1e-6 { 0.5 - k / 6.0 + k * k / 24.0 } else { 1.0 / k - (1.0 - (-k).exp()) / (k * k) };
        return Ok(2.0 * ((g - 1.0) * s).exp() * base);
    } else {
        quad::integrate(
            |y| {
                let kh = kappa.k_hat(es * y, s).unwrap_or(f64::NAN);
                y.powi(d as i32 - 1) * kappa.eval(y).unwrap_or(f64::NAN) * (g * (kh - s)).exp()
            },
            0.0,
            1.0,
            1e-12,
            1e-11,
        )?
        .value
    };
    Ok(sphere_area(d) * ((g - d as f64) * s).exp() * inner)
}

/// `∫₀^t a(s)ds`.
pub fn a_integral(t: f64, kappa: &ScaleKernel, gamma: &ComplexParam) -> Result<f64> {
    let g = gamma.abs_sq();
    let d = kappa.dim() as f64;
    // integrate e^{−(g−d)s}a(s), smooth and bounded, against the exponential weight
    let q = quad::integrate(
        |s| a_const(s, kappa, gamma).unwrap_or(f64::NAN),
        0.0,
        t,
        1e-12 * ((g - d).max(0.0) * t).exp(),
        1e-11,
    )?;
    Ok(q.value)
}

/// `v̄(t)²|γ|²∫₀^t a(s)ds`, which tends to `2e^{−|γ|²j_κ}`.
pub fn martingale_limit(t: f64, kappa: &ScaleKernel, gamma: &ComplexParam) -> Result<LimitCheck> {
    let v = v_bar(t, kappa, gamma)?.value;
    let value = v * v * gamma.abs_sq() * a_integral(t, kappa, gamma)?;
    let target = 2.0 * (-gamma.abs_sq() * kappa.j_kappa()?).exp();
    Ok(LimitCheck { value, target, error: (value - target).abs() })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LimitCheck {
    pub value: f64,
    pub target: f64,
    pub error: f64,
}

/// `a(t, κ, γ, ε) = ∫Q_{t,ε}(0,z)e^{gK̂_{t,ε}(0,z)}dz`.
pub fn a_const_eps(t: f64, eps: f64, kappa: &ScaleKernel, moll: &Mollifier, gamma: &ComplexParam) -> Result<f64> {
    let d = kappa.dim();
    let g = gamma.abs_sq();
    let reach = (-t).exp() + 2.0 * eps;
    let breaks: Vec<f64> = [eps, 2.0 * eps, 4.0 * eps, (-t).exp()].into_iter().filter(|&b| b < reach).collect();
    let q = quad::integrate_breaks(
        |r| {
            let qv = kappa.q_t_eps(moll, r, t, eps).unwrap_or(f64::NAN);
            if qv == 0.0 {
                return 0.0;
            }
            let kh = kappa.k_hat_t_eps(moll, r, t, eps).unwrap_or(f64::NAN);
            r.powi(d as i32 - 1) * qv * (g * kh).exp()
        },
        0.0,
        reach,
        &breaks,
        0.0,
        1e-8,
    )?;
    Ok(sphere_area(d) * q.value)
}

/// `|γ|²∫₀^∞a(t,ε)dt = ∫(e^{gK̂_ε(0,z)} − 1)dz`.
pub fn a_integral_eps(eps: f64, kappa: &ScaleKernel, moll: &Mollifier, gamma: &ComplexParam) -> Result<f64> {
    let d = kappa.dim();
    let g = gamma.abs_sq();
    let reach = 1.0 + 2.0 * eps;
    let mut breaks = Vec::new();
    let mut b = eps / 4.0;
    while b < 1.0 {
        breaks.push(b);
        b *= 2.0;
    }
    breaks.extend_from_slice(&[1.0 - 2.0 * eps, 1.0]);
    let q = quad::integrate_breaks(
        |r| {
            let kh = kappa.k_hat_t_eps(moll, r, f64::INFINITY, eps).unwrap_or(f64::NAN);
            r.powi(d as i32 - 1) * (g * kh).exp_m1()
        },
        0.0,
        reach,
        &breaks,
        0.0,
        1e-9,
    )?;
    Ok(sphere_area(d) * q.value)
}

/// `v(ε)²|γ|²∫₀^∞a(t,ε)dt`, which tends to `2e^{−|γ|²j_κ}` as ε → 0.
pub fn convolution_limit(eps: f64, kappa: &ScaleKernel, moll: &Mollifier, gamma: &ComplexParam) -> Result<LimitCheck> {
    let v = v_eps(eps, moll, gamma)?.value;
    let value = v * v * a_integral_eps(eps, kappa, moll, gamma)?;
    let target = 2.0 * (-gamma.abs_sq() * kappa.j_kappa()?).exp();
    Ok(LimitCheck { value, target, error: (value - target).abs() })
}

/// Rescaling `(log 1/ε)^{3α/2}ε^{√(2d)α−d}` proposed for phase II; reported only.
pub fn phase_ii_rescaling(eps: f64, alpha: f64, d: usize) -> f64 {
    let d = d as f64;
    (1.0 / eps).ln().powf(1.5 * alpha.abs()) * eps.powf((2.0 * d).sqrt() * alpha.abs() - d)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phase_examples() {
        assert_eq!(classify_phase(0.5, 1.5, 2), PhaseRegion::PhaseIII);
        assert_eq!(classify_phase(0.1, 0.1, 2), PhaseRegion::Subcritical);
        for d in 1..=3 {
            assert_eq!(classify_phase(0.0, (d as f64).sqrt(), d), PhaseRegion::PhaseIIIClosure);
        }
        assert_eq!(classify_phase(1.9, 0.0, 1), PhaseRegion::RealSupercritical);
        assert_eq!(classify_phase(1.2, 0.1, 1), PhaseRegion::Subcritical);
        assert_eq!(classify_phase(1.2, 0.5, 1), PhaseRegion::PhaseII);
        assert_eq!(classify_phase(0.5f64.sqrt(), 2.0, 1), PhaseRegion::Boundary);
        assert_eq!(classify_phase(f64::NAN, 0.0, 1), PhaseRegion::Other);
    }

    #[test]
    fn triangle_kappa_integral_closed_form() {
        let i = kappa_integral(&ScaleKernel::triangle(), 2.0).unwrap();
        assert!((i - (2f64.exp() + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn a_at_zero_is_the_mass_of_kappa() {
        let g = ComplexParam::new(0.5, 1.3229);
        assert!((a_const(0.0, &ScaleKernel::triangle(), &g).unwrap() - 1.0).abs() < 1e-12);
        let ball = ScaleKernel::new(crate::kernels::ScaleForm::BallSelfConvolution, 2).unwrap();
        let g2 = ComplexParam::new(0.5, 1.5);
        assert!((a_const(0.0, &ball, &g2).unwrap() - ball.mass().unwrap()).abs() < 1e-9);
    }
}
