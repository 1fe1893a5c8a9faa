//! Covariance kernels of the log-correlated field.
//!
//! `K(x,y) = K₀(x,y) + ∫₀^∞ κ(e^t|x−y|)dt`. All scale-kernel quantities are
//! routed through the primitive `P(v) = ∫_v^1 (1−κ(w))/w dw`:
//!
//! * `∫_a^b κ(e^u r)du = log(v_b/v_a) − P(v_a) + P(v_b)` with `v_u = e^u r ∧ 1`,
//! * `ℓ_κ(r) = −P(r)` for `r ≤ 1` and `log r` for `r ≥ 1`,
//! * `j_κ = P(0)`.
//!
//! `ℓ_κ` uses the sign `∫₀^∞[κ(e^{−t}) − κ(e^{−t}r)]dt`, under which
//! `∫e^{−|γ|²ℓ_κ}` converges for `|γ|² > d`.
//!
//! Mollified kernels reduce to one radial integral against the
//! autocorrelation `ψ = θ ∗ θ`, tabulated once per mollifier.

use crate::quad::{self, HermiteTable, QuadError};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::sync::{Arc, OnceLock};
use thiserror::Error;

/// Absolute tolerance for scalar kernel functionals.
pub const KERNEL_TOL: f64 = 1e-9;
/// Absolute tolerance for mollified kernels and `ℓ_θ`.
pub const SMOOTHED_TOL: f64 = 1e-7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("argument {r} outside the tabulated range [{lo}, {hi}]")]
    OutOfTable { r: f64, lo: f64, hi: f64 },
    #[error("invalid kernel: {0}")]
    Invalid(String),
    #[error("domain violation: {0}")]
    Domain(String),
    #[error("kernel is not positive definite: {0}")]
    NotPositiveDefinite(String),
    #[error("unsupported kernel configuration: {0}")]
    Unsupported(String),
    #[error(transparent)]
    Quadrature(#[from] QuadError),
}

type Result<T> = std::result::Result<T, KernelError>;

// ---------------------------------------------------------------- scale kernel

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum ScaleForm {
    /// `(1 − r)₊`, positive definite in d = 1 only.
    Triangle,
    /// Normalized self-convolution of the indicator of the ball of radius ½.
    BallSelfConvolution,
    /// Piecewise linear through `(r, value)` samples starting at `r = 0`.
    Tabulated { samples: Vec<[f64; 2]> },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ScaleKernelSpec {
    #[serde(flatten)]
    form: ScaleForm,
    d: usize,
}

/// The seed κ of the scale decomposition.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "ScaleKernelSpec", into = "ScaleKernelSpec")]
pub struct ScaleKernel {
    form: ScaleForm,
    d: usize,
    lipschitz_bound: f64,
    primitive: Primitive,
}

#[derive(Clone, Debug)]
enum Primitive {
    Linear,
    Cubic,
    /// Cumulative values at the sample radii, for piecewise linear κ.
    Piecewise(Vec<f64>),
    /// `P` tabulated on a uniform grid over `[0, 1]`.
    Table(Arc<Vec<f64>>),
}

const PRIMITIVE_NODES: usize = 1 << 16;

impl TryFrom<ScaleKernelSpec> for ScaleKernel {
    type Error = KernelError;
    fn try_from(s: ScaleKernelSpec) -> Result<Self> {
        ScaleKernel::new(s.form, s.d)
    }
}

impl From<ScaleKernel> for ScaleKernelSpec {
    fn from(k: ScaleKernel) -> Self {
        ScaleKernelSpec { form: k.form, d: k.d }
    }
}

impl PartialEq for ScaleKernel {
    fn eq(&self, other: &Self) -> bool {
        self.form == other.form && self.d == other.d
    }
}

impl ScaleKernel {
    pub fn triangle() -> Self {
        Self::new(ScaleForm::Triangle, 1).expect("triangle kernel is valid")
    }

    /// The default kernel in dimension `d`.
    pub fn default_for(d: usize) -> Result<Self> {
        if d == 1 {
            Self::new(ScaleForm::Triangle, 1)
        } else {
            Self::new(ScaleForm::BallSelfConvolution, d)
        }
    }

    pub fn new(form: ScaleForm, d: usize) -> Result<Self> {
        if d == 0 {
            return Err(KernelError::Invalid("dimension must be positive".into()));
        }
        let (lipschitz_bound, primitive) = match &form {
            ScaleForm::Triangle => {
                if d != 1 {
                    return Err(KernelError::NotPositiveDefinite(format!(
                        "the triangle kernel is not positive definite in d = {d}"
                    )));
                }
                (1.0, Primitive::Linear)
            }
            ScaleForm::BallSelfConvolution => match d {
                1 => (1.0, Primitive::Linear),
                2 => (4.0 / PI, Primitive::Table(Arc::new(Vec::new()))),
                3 => (1.5, Primitive::Cubic),
                _ => {
                    return Err(KernelError::Unsupported(format!(
                        "ball self-convolution implemented for d ≤ 3, got {d}"
                    )))
                }
            },
            ScaleForm::Tabulated { samples } => {
                validate_samples(samples)?;
                if samples[samples.len() - 1][0] >= 1.0 {
                    if d == 1 {
                        check_fourier_nonnegative(samples)?;
                    } else {
                        check_lattice_gram(samples, d)?;
                    }
                }
                let lip = samples
                    .windows(2)
                    .map(|w| ((w[1][1] - w[0][1]) / (w[1][0] - w[0][0])).abs())
                    .fold(0.0, f64::max);
                let cum = piecewise_primitive(samples);
                (lip, Primitive::Piecewise(cum))
            }
        };
        let mut k = ScaleKernel { form, d, lipschitz_bound, primitive };
        if let Primitive::Table(_) = k.primitive {
            k.primitive = Primitive::Table(Arc::new(k.build_primitive_table()?));
        }
        Ok(k)
    }

    pub fn form(&self) -> &ScaleForm {
        &self.form
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn lipschitz_bound(&self) -> f64 {
        self.lipschitz_bound
    }

    /// Whether closed forms of the triangle family apply.
    pub fn is_triangle(&self) -> bool {
        matches!(self.primitive, Primitive::Linear)
    }

    /// κ(r); exactly 0 for r ≥ 1.
    pub fn eval(&self, r: f64) -> Result<f64> {
        if !(r >= 0.0) {
            return Err(KernelError::Domain(format!("κ needs r ≥ 0, got {r}")));
        }
        if r >= 1.0 {
            return Ok(0.0);
        }
        Ok(match &self.form {
            ScaleForm::Triangle => 1.0 - r,
            ScaleForm::BallSelfConvolution => match self.d {
                1 => 1.0 - r,
                2 => (2.0 / PI) * (r.acos() - r * (1.0 - r * r).sqrt()),
                _ => 1.0 - 1.5 * r + 0.5 * r * r * r,
            },
            ScaleForm::Tabulated { samples } => interpolate(samples, r)?,
        })
    }

    fn eval_unchecked(&self, r: f64) -> f64 {
        self.eval(r).unwrap_or(f64::NAN)
    }

    /// `P(v) = ∫_v^1 (1 − κ(w))/w dw`, zero for v ≥ 1.
    pub fn primitive(&self, v: f64) -> Result<f64> {
        if !(v >= 0.0) {
            return Err(KernelError::Domain(format!("primitive needs v ≥ 0, got {v}")));
        }
        if v >= 1.0 {
            return Ok(0.0);
        }
        Ok(match &self.primitive {
            Primitive::Linear => 1.0 - v,
            Primitive::Cubic => 1.5 * (1.0 - v) - (1.0 - v * v * v) / 6.0,
            Primitive::Piecewise(cum) => {
                let ScaleForm::Tabulated { samples } = &self.form else { unreachable!() };
                let last = samples[samples.len() - 1][0];
                if last < 1.0 {
                    return Err(KernelError::OutOfTable { r: v, lo: 0.0, hi: last });
                }
                let k = match samples.iter().position(|s| s[0] > v) {
                    Some(k) => k - 1,
                    None => samples.len() - 1,
                };
                let (r0, k0) = (samples[k][0], samples[k][1]);
                let (r1, k1) = (samples[k + 1][0], samples[k + 1][1]);
                let b = (k1 - k0) / (r1 - r0);
                let a = k0 - b * r0;
                cum[k + 1] + segment_primitive(a, b, v, r1.min(1.0))
            }
            Primitive::Table(tab) => {
                let u = v * (PRIMITIVE_NODES as f64);
                let i = (u.floor() as usize).min(PRIMITIVE_NODES - 1);
                let s = u - i as f64;
                tab[i] * (1.0 - s) + tab[i + 1] * s
            }
        })
    }

    fn build_primitive_table(&self) -> Result<Vec<f64>> {
        let n = PRIMITIVE_NODES;
        let mut tab = vec![0.0; n + 1];
        let dv = 1.0 / n as f64;
        for i in (0..n).rev() {
            let a = i as f64 * dv;
            let q = quad::integrate(
                |w| if w > 0.0 { (1.0 - self.eval_unchecked(w)) / w } else { 0.0 },
                a,
                a + dv,
                1e-15,
                1e-13,
            )?;
            tab[i] = tab[i + 1] + q.value;
        }
        Ok(tab)
    }

    /// `∫_a^b κ(e^u r)du` for `0 ≤ a ≤ b ≤ ∞`.
    pub fn layer_integral(&self, r: f64, a: f64, b: f64) -> Result<f64> {
        if r == 0.0 {
            return Ok(b - a);
        }
        let va = (a.exp() * r).min(1.0);
        if va >= 1.0 {
            return Ok(0.0);
        }
        let vb = if b.is_infinite() { 1.0 } else { (b.exp() * r).min(1.0) };
        if self.is_triangle() {
            return Ok((vb / va).ln() - (vb - va));
        }
        Ok((vb / va).ln() - self.primitive(va)? + self.primitive(vb)?)
    }

    /// `K̂_t(r) = ∫₀^t κ(e^u r)du`; `t = ∞` allowed for `r > 0`.
    pub fn k_hat(&self, r: f64, t: f64) -> Result<f64> {
        if r == 0.0 && t.is_infinite() {
            return Err(KernelError::Domain("K̂_∞ is infinite on the diagonal".into()));
        }
        self.layer_integral(r, 0.0, t)
    }

    /// `K̂_∞(r) − log(1/r)`, continuous on `[0, ∞)` with value `−j_κ` at 0.
    pub fn k_hat_regular(&self, r: f64) -> Result<f64> {
        if r >= 1.0 {
            Ok(r.ln())
        } else {
            Ok(-self.primitive(r)?)
        }
    }

    /// `ℓ_κ(r) = ∫₀^∞[κ(e^{−t}) − κ(e^{−t}r)]dt`.
    pub fn ell_kappa(&self, r: f64) -> Result<f64> {
        if r >= 1.0 {
            Ok(r.ln())
        } else {
            Ok(-self.primitive(r)?)
        }
    }

    /// `j_κ = ∫₀^∞ (1 − κ(e^{−t}))dt`.
    pub fn j_kappa(&self) -> Result<f64> {
        self.primitive(0.0)
    }

    /// `ψ_ε ∗ K̂_t` at distance `r`; `t = ∞` gives the star part of `K_ε`.
    pub fn k_hat_t_eps(&self, moll: &Mollifier, r: f64, t: f64, eps: f64) -> Result<f64> {
        if t.is_infinite() {
            let reg = |rho: f64| self.k_hat_regular(rho).unwrap_or(f64::NAN);
            moll.smooth_radial(r, eps, 1.0, &reg, &[1.0], SMOOTHED_TOL)
        } else {
            let reg = |rho: f64| self.k_hat(rho, t).unwrap_or(f64::NAN);
            moll.smooth_radial(r, eps, 0.0, &reg, &[(-t).exp(), 1.0], SMOOTHED_TOL)
        }
    }

    /// `Q_{t,ε}(r) = ψ_ε ∗ κ(e^t|·|)` at distance `r`.
    pub fn q_t_eps(&self, moll: &Mollifier, r: f64, t: f64, eps: f64) -> Result<f64> {
        let s = t.exp();
        let reg = |rho: f64| self.eval(s * rho).unwrap_or(f64::NAN);
        moll.smooth_radial(r, eps, 0.0, &reg, &[1.0 / s], SMOOTHED_TOL)
    }

    /// `∫_{R^d} κ(|z|)dz`.
    pub fn mass(&self) -> Result<f64> {
        if self.is_triangle() {
            return Ok(1.0);
        }
        let q = quad::integrate(
            |r| self.eval_unchecked(r) * r.powi(self.d as i32 - 1),
            0.0,
            1.0,
            KERNEL_TOL,
            0.0,
        )?;
        Ok(q.value * quad::sphere_area(self.d))
    }
}

fn validate_samples(samples: &[[f64; 2]]) -> Result<()> {
    if samples.len() < 2 {
        return Err(KernelError::Invalid("tabulated κ needs at least two samples".into()));
    }
    if samples[0][0] != 0.0 || (samples[0][1] - 1.0).abs() > 1e-12 {
        return Err(KernelError::Invalid("tabulated κ must start at (0, 1)".into()));
    }
    for w in samples.windows(2) {
        if !(w[1][0] > w[0][0]) {
            return Err(KernelError::Invalid("tabulated radii must increase strictly".into()));
        }
    }
    for s in samples {
        if !(s[1] >= 0.0) || !s[1].is_finite() {
            return Err(KernelError::Invalid(format!("κ({}) = {} is not a nonnegative number", s[0], s[1])));
        }
        if s[0] >= 1.0 && s[1] != 0.0 {
            return Err(KernelError::Invalid(format!("κ({}) must vanish for r ≥ 1", s[0])));
        }
    }
    Ok(())
}

fn interpolate(samples: &[[f64; 2]], r: f64) -> Result<f64> {
    let last = samples[samples.len() - 1][0];
    if r > last {
        return Err(KernelError::OutOfTable { r, lo: 0.0, hi: last });
    }
    let k = samples.partition_point(|s| s[0] <= r).clamp(1, samples.len() - 1);
    let (r0, v0) = (samples[k - 1][0], samples[k - 1][1]);
    let (r1, v1) = (samples[k][0], samples[k][1]);
    Ok(v0 + (v1 - v0) * (r - r0) / (r1 - r0))
}

/// `∫_lo^hi (1 − a − b w)/w dw`.
fn segment_primitive(a: f64, b: f64, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        return 0.0;
    }
    let log_part = if (1.0 - a).abs() < 1e-15 { 0.0 } else { (1.0 - a) * (hi / lo).ln() };
    log_part - b * (hi - lo)
}

/// Cumulative `P` at each sample radius (clipped to 1).
fn piecewise_primitive(samples: &[[f64; 2]]) -> Vec<f64> {
    let n = samples.len();
    let mut cum = vec![0.0; n];
    for k in (0..n - 1).rev() {
        let (r0, k0) = (samples[k][0], samples[k][1]);
        let (r1, k1) = (samples[k + 1][0], samples[k + 1][1]);
        if r0 >= 1.0 {
            continue;
        }
        let b = (k1 - k0) / (r1 - r0);
        let a = k0 - b * r0;
        cum[k] = cum[k + 1] + segment_primitive(a, b, r0, r1.min(1.0));
    }
    cum
}

/// Gram matrix of κ over a small cubic lattice must be positive semidefinite.
fn check_lattice_gram(samples: &[[f64; 2]], d: usize) -> Result<()> {
    let side: usize = if d == 2 { 14 } else { 6 };
    let spacing = 0.11;
    let n = side.pow(d as u32);
    let pts: Vec<Vec<f64>> = (0..n)
        .map(|mut i| {
            (0..d)
                .map(|_| {
                    let c = (i % side) as f64 * spacing;
                    i /= side;
                    c
                })
                .collect()
        })
        .collect();
    let gram = nalgebra::DMatrix::from_fn(n, n, |i, j| {
        let r = dist(&pts[i], &pts[j]);
        if r >= 1.0 {
            0.0
        } else {
            interpolate(samples, r).unwrap_or(0.0)
        }
    });
    let eig = gram.symmetric_eigenvalues();
    let (lo, hi) = (eig.min(), eig.max());
    if lo < -1e-8 * hi {
        return Err(KernelError::NotPositiveDefinite(format!(
            "lattice Gram matrix of tabulated κ has eigenvalue {lo:.3e}"
        )));
    }
    Ok(())
}

/// Cosine transform of a piecewise linear κ on `[0, ∞)` must stay nonnegative.
fn check_fourier_nonnegative(samples: &[[f64; 2]]) -> Result<()> {
    let transform = |xi: f64| -> f64 {
        let mut acc = 0.0;
        for w in samples.windows(2) {
            let (r0, v0, r1, v1) = (w[0][0], w[0][1], w[1][0], w[1][1]);
            let b = (v1 - v0) / (r1 - r0);
            let a = v0 - b * r0;
            if xi == 0.0 {
                acc += a * (r1 - r0) + 0.5 * b * (r1 * r1 - r0 * r0);
            } else {
                let prim = |r: f64| (a + b * r) * (xi * r).sin() / xi + b * (xi * r).cos() / (xi * xi);
                acc += prim(r1) - prim(r0);
            }
        }
        2.0 * acc
    };
    let zero = transform(0.0);
    for k in 1..=4000 {
        let xi = k as f64 * 0.05;
        let v = transform(xi);
        if v < -1e-8 * zero {
            return Err(KernelError::NotPositiveDefinite(format!(
                "Fourier transform of tabulated κ is {v:.3e} at ξ = {xi}"
            )));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- smooth part

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum SmoothForm {
    Zero,
    /// `amplitude · exp(−|x−y|²/(2 width²))`.
    GaussianBump { amplitude: f64, width: f64 },
    /// Samples `values[i][j] = K₀(axis[i], axis[j])` in d = 1, bilinear in between.
    #[serde(rename = "tabulated_2d")]
    Tabulated2d { axis: Vec<f64>, values: Vec<Vec<f64>> },
}

fn default_holder() -> f64 {
    1.0
}

/// Bounded continuous part K₀ of the covariance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothKernel {
    #[serde(flatten)]
    pub form: SmoothForm,
    /// Recorded as metadata only.
    #[serde(default = "default_holder")]
    pub holder_exponent: f64,
}

impl SmoothKernel {
    pub fn zero() -> Self {
        Self { form: SmoothForm::Zero, holder_exponent: 1.0 }
    }

    pub fn gaussian(amplitude: f64, width: f64) -> Self {
        Self { form: SmoothForm::GaussianBump { amplitude, width }, holder_exponent: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.holder_exponent > 0.0 && self.holder_exponent <= 1.0) {
            return Err(KernelError::Invalid("holder_exponent must lie in (0, 1]".into()));
        }
        match &self.form {
            SmoothForm::Zero => Ok(()),
            SmoothForm::GaussianBump { amplitude, width } => {
                if *amplitude < 0.0 || !(*width > 0.0) {
                    return Err(KernelError::Invalid("gaussian bump needs amplitude ≥ 0, width > 0".into()));
                }
                Ok(())
            }
            SmoothForm::Tabulated2d { axis, values } => {
                let n = axis.len();
                if n < 2 || values.len() != n || values.iter().any(|row| row.len() != n) {
                    return Err(KernelError::Invalid("tabulated K₀ must be a square table over its axis".into()));
                }
                if axis.windows(2).any(|w| !(w[1] > w[0])) {
                    return Err(KernelError::Invalid("tabulated K₀ axis must increase".into()));
                }
                for i in 0..n {
                    for j in 0..i {
                        if (values[i][j] - values[j][i]).abs() > 1e-12 * (1.0 + values[i][j].abs()) {
                            return Err(KernelError::Invalid("tabulated K₀ is not symmetric".into()));
                        }
                    }
                }
                Ok(())
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self.form, SmoothForm::Zero)
    }

    /// Whether K₀ depends on `x − y` only.
    pub fn is_stationary(&self) -> bool {
        !matches!(self.form, SmoothForm::Tabulated2d { .. })
    }

    /// Stationary profile as a function of distance.
    pub fn radial(&self, r: f64) -> f64 {
        match &self.form {
            SmoothForm::Zero => 0.0,
            SmoothForm::GaussianBump { amplitude, width } => amplitude * (-r * r / (2.0 * width * width)).exp(),
            SmoothForm::Tabulated2d { .. } => f64::NAN,
        }
    }

    pub fn value(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        match &self.form {
            SmoothForm::Zero => Ok(0.0),
            SmoothForm::GaussianBump { .. } => Ok(self.radial(dist(x, y))),
            SmoothForm::Tabulated2d { axis, values } => {
                if x.len() != 1 {
                    return Err(KernelError::Unsupported("tabulated K₀ is one-dimensional".into()));
                }
                let (i, s) = locate(axis, x[0])?;
                let (j, u) = locate(axis, y[0])?;
                let v = |a: usize, b: usize| values[a][b];
                Ok((1.0 - s) * (1.0 - u) * v(i, j)
                    + s * (1.0 - u) * v(i + 1, j)
                    + (1.0 - s) * u * v(i, j + 1)
                    + s * u * v(i + 1, j + 1))
            }
        }
    }
}

fn locate(axis: &[f64], x: f64) -> Result<(usize, f64)> {
    let (lo, hi) = (axis[0], axis[axis.len() - 1]);
    if !(x >= lo && x <= hi) {
        return Err(KernelError::OutOfTable { r: x, lo, hi });
    }
    let k = axis.partition_point(|&a| a <= x).clamp(1, axis.len() - 1);
    Ok((k - 1, (x - axis[k - 1]) / (axis[k] - axis[k - 1])))
}

pub fn dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

// ---------------------------------------------------------------- mollifier

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum MollifierForm {
    /// `exp(−1/(1−|x|²))` on the unit ball.
    StandardBump,
    /// Radial profile through `(r, value)` samples, zero beyond r = 1.
    Tabulated { samples: Vec<[f64; 2]> },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct MollifierSpec {
    #[serde(flatten)]
    form: MollifierForm,
    d: usize,
}

/// Radial mollifier θ normalized to unit mass; θ_ε(x) = ε^{−d}θ(x/ε).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "MollifierSpec", into = "MollifierSpec")]
pub struct Mollifier {
    form: MollifierForm,
    d: usize,
    normalization_constant: f64,
    autocorrelation: Arc<OnceLock<HermiteTable>>,
}

impl TryFrom<MollifierSpec> for Mollifier {
    type Error = KernelError;
    fn try_from(s: MollifierSpec) -> Result<Self> {
        Mollifier::new(s.form, s.d)
    }
}

impl From<Mollifier> for MollifierSpec {
    fn from(m: Mollifier) -> Self {
        MollifierSpec { form: m.form, d: m.d }
    }
}

impl PartialEq for Mollifier {
    fn eq(&self, other: &Self) -> bool {
        self.form == other.form && self.d == other.d
    }
}

impl Mollifier {
    pub fn standard(d: usize) -> Self {
        Self::new(MollifierForm::StandardBump, d).expect("standard bump is valid")
    }

    pub fn new(form: MollifierForm, d: usize) -> Result<Self> {
        if !(1..=2).contains(&d) {
            return Err(KernelError::Unsupported(format!("mollifiers implemented for d ∈ {{1, 2}}, got {d}")));
        }
        if let MollifierForm::Tabulated { samples } = &form {
            if samples.len() < 2 || samples[0][0] != 0.0 {
                return Err(KernelError::Invalid("tabulated θ must start at r = 0".into()));
            }
            if samples.windows(2).any(|w| !(w[1][0] > w[0][0])) {
                return Err(KernelError::Invalid("tabulated θ radii must increase".into()));
            }
            if samples.iter().any(|s| !(s[1] >= 0.0) || (s[0] >= 1.0 && s[1] != 0.0)) {
                return Err(KernelError::Invalid("tabulated θ must be nonnegative and vanish for r ≥ 1".into()));
            }
        }
        let mut m = Mollifier { form, d, normalization_constant: 1.0, autocorrelation: Arc::new(OnceLock::new()) };
        let q = quad::integrate(
            |r| m.profile(r) * r.powi(d as i32 - 1),
            0.0,
            1.0,
            1e-15,
            1e-13,
        )?;
        let z = q.value * quad::sphere_area(d);
        if !(z > 0.0) {
            return Err(KernelError::Invalid("θ has zero mass".into()));
        }
        m.normalization_constant = z;
        Ok(m)
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn form(&self) -> &MollifierForm {
        &self.form
    }

    pub fn normalization_constant(&self) -> f64 {
        self.normalization_constant
    }

    fn profile(&self, r: f64) -> f64 {
        if r >= 1.0 {
            return 0.0;
        }
        match &self.form {
            MollifierForm::StandardBump => (-1.0 / (1.0 - r * r)).exp(),
            MollifierForm::Tabulated { samples } => interpolate(samples, r).unwrap_or(0.0),
        }
    }

    /// θ at a point given by its norm.
    pub fn theta(&self, r: f64) -> f64 {
        self.profile(r.abs()) / self.normalization_constant
    }

    pub fn theta_eps(&self, r: f64, eps: f64) -> f64 {
        self.theta(r / eps) / eps.powi(self.d as i32)
    }

    /// `ψ(ρ) = ∫θ(u)θ(u + ρe₁)du`, supported in `ρ ≤ 2`.
    pub fn autocorrelation(&self, rho: f64) -> f64 {
        self.psi_table().eval(rho)
    }

    fn psi_table(&self) -> &HermiteTable {
        self.autocorrelation.get_or_init(|| {
            let n = if self.d == 1 { 4097 } else { 2049 };
            let vals = (0..n)
                .map(|i| self.autocorrelation_direct(2.0 * i as f64 / (n - 1) as f64))
                .collect();
            HermiteTable::new(2.0, vals, true)
        })
    }

    /// Direct quadrature of ψ, used to build the table.
    pub fn autocorrelation_direct(&self, rho: f64) -> f64 {
        if rho >= 2.0 {
            return 0.0;
        }
        match self.d {
            1 => quad::integrate(|u| self.theta(u) * self.theta(u + rho), -1.0, 1.0 - rho, 1e-14, 1e-12)
                .map(|q| q.value)
                .unwrap_or(f64::NAN),
            _ => quad::integrate(
                |u1| {
                    let m2 = (1.0 - u1 * u1).min(1.0 - (u1 + rho) * (u1 + rho));
                    if m2 <= 0.0 {
                        return 0.0;
                    }
                    let m = m2.sqrt();
                    quad::integrate(
                        |u2| self.theta((u1 * u1 + u2 * u2).sqrt()) * self.theta(((u1 + rho).powi(2) + u2 * u2).sqrt()),
                        -m,
                        m,
                        1e-13,
                        1e-10,
                    )
                    .map(|q| q.value)
                    .unwrap_or(f64::NAN)
                },
                -1.0,
                1.0 - rho,
                1e-12,
                1e-10,
            )
            .map(|q| q.value)
            .unwrap_or(f64::NAN),
        }
    }

    /// `∫ ψ_ε(w) g(|r e₁ − w|) dw` for a radial `g = log_coef·log(1/ρ) + regular(ρ)`
    /// whose regular part may have kinks at `breaks`.
    pub fn smooth_radial(
        &self,
        r: f64,
        eps: f64,
        log_coef: f64,
        regular: &dyn Fn(f64) -> f64,
        breaks: &[f64],
        tol: f64,
    ) -> Result<f64> {
        let r = r.abs();
        let support = 2.0 * eps;
        let psi = |w: f64| self.autocorrelation(w / eps) / eps.powi(self.d as i32);
        if self.d == 1 {
            let mut br = vec![r, -r];
            for &b in breaks {
                br.extend_from_slice(&[r - b, r + b]);
            }
            let mut total = quad::integrate_breaks(|w| psi(w) * regular((r - w).abs()), -support, support, &br, tol * 0.5, 0.0)?
                .value;
            if log_coef != 0.0 {
                let lg = if r < support {
                    quad::integrate_log_singular(psi, -support, support, r, &[-r], tol * 0.5)?.value
                } else {
                    quad::integrate(|w| psi(w) * (r - w).abs().ln(), -support, support, tol * 0.5, 0.0)?.value
                };
                total -= log_coef * lg;
            }
            Ok(total)
        } else {
            // polar coordinates centred at the singular point r e₁
            let inner = |phi: f64| -> f64 {
                let (s, c) = phi.sin_cos();
                let disc = support * support - r * r * s * s;
                if disc <= 0.0 {
                    return 0.0;
                }
                let sq = disc.sqrt();
                let hi = -r * c + sq;
                let lo = (-r * c - sq).max(0.0);
                if hi <= lo {
                    return 0.0;
                }
                let f = |rho: f64| {
                    if rho <= 0.0 {
                        return 0.0;
                    }
                    let w = (r * r + 2.0 * r * rho * c + rho * rho).sqrt();
                    let g = regular(rho) + if log_coef != 0.0 { -log_coef * rho.ln() } else { 0.0 };
                    psi(w) * g * rho
                };
                quad::integrate_breaks(f, lo, hi, breaks, tol * 0.05, 1e-10).map(|q| q.value).unwrap_or(f64::NAN)
            };
            let (a, b) = if r < support { (0.0, PI) } else { (PI - (support / r).asin(), PI) };
            let q = quad::integrate(inner, a, b, tol * 0.25, 0.0)?;
            Ok(2.0 * q.value)
        }
    }

    /// `ℓ_θ(z) = ∬ log(1/|z + z₁ − z₂|)θ(z₁)θ(z₂)dz₁dz₂`, a function of |z|.
    pub fn ell_theta(&self, z: f64) -> Result<f64> {
        self.smooth_radial(z, 1.0, 1.0, &|_| 0.0, &[], SMOOTHED_TOL * 0.1)
    }
}

// ---------------------------------------------------------------- kernel spec

/// Box in R^d on which continuum kernels are evaluated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Domain {
    pub fn cube(d: usize, lo: f64, hi: f64) -> Self {
        Self { lower: vec![lo; d], upper: vec![hi; d] }
    }

    fn check(&self, x: &[f64], margin: f64) -> Result<()> {
        if x.len() != self.lower.len() {
            return Err(KernelError::Domain(format!("point has dimension {}, domain {}", x.len(), self.lower.len())));
        }
        for (i, &xi) in x.iter().enumerate() {
            if xi - self.lower[i] < margin || self.upper[i] - xi < margin {
                return Err(KernelError::Domain(format!(
                    "coordinate {xi} is closer than {margin} to the boundary [{}, {}]",
                    self.lower[i], self.upper[i]
                )));
            }
        }
        Ok(())
    }
}

/// `K = K₀ + ∫₀^∞ κ(e^t|x−y|)dt` on a box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub k0: SmoothKernel,
    pub kappa: ScaleKernel,
    pub d: usize,
    pub domain: Domain,
}

impl KernelSpec {
    pub fn new(k0: SmoothKernel, kappa: ScaleKernel, domain: Domain) -> Result<Self> {
        let d = kappa.dim();
        if domain.lower.len() != d || domain.upper.len() != d {
            return Err(KernelError::Invalid("domain dimension differs from κ".into()));
        }
        k0.validate()?;
        if matches!(k0.form, SmoothForm::Tabulated2d { .. }) && d != 1 {
            return Err(KernelError::Unsupported("tabulated K₀ is one-dimensional".into()));
        }
        Ok(Self { k0, kappa, d, domain })
    }

    /// Pure star-scale kernel (K₀ = 0) with the default κ.
    pub fn star(d: usize, domain: Domain) -> Result<Self> {
        Self::new(SmoothKernel::zero(), ScaleKernel::default_for(d)?, domain)
    }

    /// `K(x,y)` for `x ≠ y`.
    pub fn k(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        self.domain.check(x, 0.0)?;
        self.domain.check(y, 0.0)?;
        let r = dist(x, y);
        if r == 0.0 {
            return Err(KernelError::Domain("K is infinite on the diagonal".into()));
        }
        Ok(self.k0.value(x, y)? + self.kappa.k_hat(r, f64::INFINITY)?)
    }

    /// `K_t(x,y) = K₀(x,y) + ∫₀^t κ(e^u|x−y|)du`.
    pub fn k_t(&self, x: &[f64], y: &[f64], t: f64) -> Result<f64> {
        if !(t >= 0.0) {
            return Err(KernelError::Domain(format!("t must be nonnegative, got {t}")));
        }
        self.domain.check(x, 0.0)?;
        self.domain.check(y, 0.0)?;
        Ok(self.k0.value(x, y)? + self.kappa.k_hat(dist(x, y), t)?)
    }

    /// `L(x,y) = K(x,y) − log(1/|x−y|)`; on the diagonal `K₀(x,x) − j_κ`.
    pub fn l(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        let r = dist(x, y);
        Ok(self.k0.value(x, y)? + self.kappa.k_hat_regular(r)?)
    }

    pub fn l_diag(&self, x: &[f64]) -> Result<f64> {
        Ok(self.k0.value(x, x)? - self.kappa.j_kappa()?)
    }

    /// `K_ε(x,y)`, the covariance of the mollified field.
    pub fn k_eps(&self, moll: &Mollifier, x: &[f64], y: &[f64], eps: f64) -> Result<f64> {
        self.smoothed(moll, x, y, eps, f64::INFINITY)
    }

    /// `K_{t,ε}(x,y)`.
    pub fn k_t_eps(&self, moll: &Mollifier, x: &[f64], y: &[f64], t: f64, eps: f64) -> Result<f64> {
        if !(t >= 0.0) {
            return Err(KernelError::Domain(format!("t must be nonnegative, got {t}")));
        }
        self.smoothed(moll, x, y, eps, t)
    }

    fn smoothed(&self, moll: &Mollifier, x: &[f64], y: &[f64], eps: f64, t: f64) -> Result<f64> {
        if !(eps > 0.0) {
            return Err(KernelError::Domain(format!("ε must be positive, got {eps}")));
        }
        if moll.dim() != self.d {
            return Err(KernelError::Invalid("mollifier dimension differs from the kernel".into()));
        }
        self.domain.check(x, 2.0 * eps)?;
        self.domain.check(y, 2.0 * eps)?;
        let r = dist(x, y);
        let star = self.kappa.k_hat_t_eps(moll, r, t, eps)?;
        let base = match &self.k0.form {
            SmoothForm::Zero => 0.0,
            SmoothForm::GaussianBump { .. } => {
                let reg = |rho: f64| self.k0.radial(rho);
                moll.smooth_radial(r, eps, 0.0, &reg, &[], SMOOTHED_TOL)?
            }
            SmoothForm::Tabulated2d { .. } => {
                let (x0, y0) = (x[0], y[0]);
                let th = |u: f64| moll.theta_eps(u, eps);
                let outer = quad::integrate(
                    |z1| {
                        quad::integrate(
                            |z2| th(x0 - z1) * th(y0 - z2) * self.k0.value(&[z1], &[z2]).unwrap_or(f64::NAN),
                            y0 - eps,
                            y0 + eps,
                            SMOOTHED_TOL * 0.1,
                            0.0,
                        )
                        .map(|q| q.value)
                        .unwrap_or(f64::NAN)
                    },
                    x0 - eps,
                    x0 + eps,
                    SMOOTHED_TOL,
                    0.0,
                )?;
                outer.value
            }
        };
        Ok(star + base)
    }
}

/// Largest `|K_ε(x,y) − log(1/(|x−y| ∨ ε))|` over the supplied samples.
pub fn fitted_log_constant(
    spec: &KernelSpec,
    moll: &Mollifier,
    samples: &[(Vec<f64>, Vec<f64>, f64)],
) -> Result<f64> {
    let mut c: f64 = 0.0;
    for (x, y, eps) in samples {
        let k = spec.k_eps(moll, x, y, *eps)?;
        let r = dist(x, y).max(*eps);
        c = c.max((k - (1.0 / r).ln()).abs());
    }
    Ok(c)
}
