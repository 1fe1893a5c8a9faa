//! Approximation of a log-correlated kernel by kernels with a star-scale part.
//!
//! For `η = (s − d)/2` and a seed `κ₀`,
//! `Δ^δ(r) = ηδ∫₀^∞ e^{−ηt}κ₀(e^t r)dt = ηδ r^η ∫_r^1 κ₀(u)u^{−η−1}du`,
//! and `K^δ = K + Δ^δ`. The remainder after removing the fine scales of `κ₀`,
//! `R_{t₀} = K^δ − ∫_{t₀}^∞ κ₀(e^t|x−y|)dt`, is finite on the diagonal:
//! `R_{t₀} = L + t₀ − K̂₀reg(e^{t₀}r) + Δ^δ` with `L = K − log(1/r)`.

use crate::kernels::{dist, KernelError, KernelSpec, ScaleKernel};
use crate::quad;
use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Relative eigenvalue floor for positive-definiteness checks.
pub const PD_TOL: f64 = 1e-8;
/// Largest `t₀` tried by [`find_t0`].
pub const T0_MAX: f64 = 30.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DecompError {
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Quadrature(#[from] quad::QuadError),
}

type Result<T> = std::result::Result<T, DecompError>;

/// A kernel `K(x,y) = log(1/|x−y|) + L(x,y)` to be approximated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TargetKernel {
    Spec { spec: KernelSpec },
    /// `spec − amplitude·exp(−|x−y|²/(2·width²))`.
    Perturbed { spec: KernelSpec, amplitude: f64, width: f64 },
}

impl TargetKernel {
    /// Star kernel with `κ₀` minus a small Gaussian, whose `L` is no longer of star form.
    pub fn synthetic(kappa0: &ScaleKernel, amplitude: f64, width: f64) -> Result<Self> {
        let d = kappa0.dim();
        let domain = crate::kernels::Domain::cube(d, -1e6, 1e6);
        let spec = KernelSpec::new(crate::kernels::SmoothKernel::zero(), kappa0.clone(), domain)?;
        Ok(Self::Perturbed { spec, amplitude, width })
    }

    fn spec(&self) -> &KernelSpec {
        match self {
            Self::Spec { spec } | Self::Perturbed { spec, .. } => spec,
        }
    }

    pub fn dim(&self) -> usize {
        self.spec().d
    }

    /// `L(x,y) = K(x,y) − log(1/|x−y|)`, finite on the diagonal.
    pub fn regular(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        let base = self.spec().l(x, y)?;
        Ok(match self {
            Self::Spec { .. } => base,
            Self::Perturbed { amplitude, width, .. } => {
                let r = dist(x, y);
                base - amplitude * (-r * r / (2.0 * width * width)).exp()
            }
        })
    }

    pub fn value(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        let r = dist(x, y);
        if r == 0.0 {
            return Err(DecompError::Invalid("K is infinite on the diagonal".into()));
        }
        Ok(self.regular(x, y)? - r.ln())
    }
}

/// `K^δ = K + Δ^δ` together with its ingredients.
#[derive(Clone, Debug)]
pub struct KDelta {
    pub target: TargetKernel,
    pub kappa0: ScaleKernel,
    pub delta: f64,
    pub s: f64,
    pub eta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecompositionReport {
    pub delta: f64,
    pub eta: f64,
    pub s: f64,
    pub points: usize,
    pub sup_diff: f64,
    pub min_eig_delta_part: f64,
    pub max_eig_delta_part: f64,
    pub t0_found: Option<f64>,
    pub min_eig_remainder: Option<f64>,
}

pub fn build_k_delta(target: TargetKernel, kappa0: ScaleKernel, delta: f64, s: f64) -> Result<KDelta> {
    let d = target.dim();
    if kappa0.dim() != d {
        return Err(DecompError::Invalid("κ₀ dimension differs from the kernel".into()));
    }
    if !(s > d as f64) {
        return Err(DecompError::Invalid(format!("s = {s} must exceed d = {d}")));
    }
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(DecompError::Invalid(format!("δ must be positive, got {delta}")));
    }
    Ok(KDelta { target, kappa0, delta, s, eta: (s - d as f64) / 2.0 })
}

impl KDelta {
    /// `Δ^δ(r)`; exactly `δ` at 0 and 0 for `r ≥ 1`.
    pub fn delta_part(&self, r: f64) -> Result<f64> {
        let (eta, delta) = (self.eta, self.delta);
        if !(r >= 0.0) {
            return Err(DecompError::Invalid(format!("distance must be nonnegative, got {r}")));
        }
        if r == 0.0 {
            return Ok(delta);
        }
        if r >= 1.0 {
            return Ok(0.0);
        }
        if self.kappa0.is_triangle() {
            let re = r.powf(eta);
            return Ok(if (eta - 1.0).abs() < 1e-12 {
                delta * (1.0 - r - r * (1.0 / r).ln())
            } else {
                delta * (1.0 - re - eta * (re - r) / (1.0 - eta))
            });
        }
        // t-form: the integrand is bounded and vanishes beyond log(1/r)
        let k = &self.kappa0;
        let tmax = (1.0 / r).ln();
        let q = quad::integrate(|t| (-eta * t).exp() * k.eval((t.exp() * r).min(1.0)).unwrap_or(f64::NAN), 0.0, tmax, 1e-13, 1e-12)?;
        Ok(eta * delta * q.value)
    }

    /// `K^δ(x,y)` for `x ≠ y`.
    pub fn value(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        Ok(self.target.value(x, y)? + self.delta_part(dist(x, y))?)
    }

    /// `∫_{t₀}^∞ κ₀(e^t r)dt` for `r > 0`.
    pub fn fine_part(&self, r: f64, t0: f64) -> Result<f64> {
        Ok(self.kappa0.k_hat((t0.exp() * r).max(0.0), f64::INFINITY)?)
    }

    /// `K^δ − ∫_{t₀}^∞ κ₀(e^t|x−y|)dt`, finite everywhere.
    pub fn remainder(&self, x: &[f64], y: &[f64], t0: f64) -> Result<f64> {
        let r = dist(x, y);
        Ok(self.target.regular(x, y)? + t0 - self.kappa0.k_hat_regular(t0.exp() * r)? + self.delta_part(r)?)
    }
}

fn eig_range(m: DMatrix<f64>) -> (f64, f64) {
    let e = SymmetricEigen::new(m).eigenvalues;
    (e.min(), e.max())
}

fn gram(points: &[Vec<f64>], f: impl Fn(&[f64], &[f64]) -> Result<f64>) -> Result<DMatrix<f64>> {
    let n = points.len();
    let mut g = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = f(&points[i], &points[j])?;
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    Ok(g)
}

/// Lemma-style checks on a point set: `sup|K^δ − K|` and the spectrum of `[Δ^δ]`.
pub fn verify_conditions(kd: &KDelta, points: &[Vec<f64>]) -> Result<DecompositionReport> {
    if points.is_empty() || points.len() > 512 {
        return Err(DecompError::Invalid(format!("need 1..=512 points, got {}", points.len())));
    }
    let mut sup: f64 = 0.0;
    for (i, x) in points.iter().enumerate() {
        for y in &points[..i] {
            if dist(x, y) == 0.0 {
                return Err(DecompError::Invalid("points must be pairwise distinct".into()));
            }
            sup = sup.max((kd.value(x, y)? - kd.target.value(x, y)?).abs());
        }
    }
    // on the diagonal K^δ − K = Δ^δ(0) = δ
    sup = sup.max(kd.delta_part(0.0)?);
    let (lo, hi) = eig_range(gram(points, |x, y| kd.delta_part(dist(x, y)))?);
    Ok(DecompositionReport {
        delta: kd.delta,
        eta: kd.eta,
        s: kd.s,
        points: points.len(),
        sup_diff: sup,
        min_eig_delta_part: lo,
        max_eig_delta_part: hi,
        t0_found: None,
        min_eig_remainder: None,
    })
}

/// `(min, max)` eigenvalue of the remainder Gram matrix at `t₀`.
pub fn remainder_spectrum(kd: &KDelta, points: &[Vec<f64>], t0: f64) -> Result<(f64, f64)> {
    Ok(eig_range(gram(points, |x, y| kd.remainder(x, y, t0))?))
}

/// Smallest `t₀ ∈ {0, ½, 1, …, 30}` whose remainder is positive semidefinite
/// on `points`, with its minimum eigenvalue; `None` if none qualifies.
pub fn find_t0(kd: &KDelta, points: &[Vec<f64>]) -> Result<Option<(f64, f64)>> {
    let mut t0 = 0.0;
    while t0 <= T0_MAX {
        let (lo, hi) = remainder_spectrum(kd, points, t0)?;
        if lo >= -PD_TOL * hi.abs() {
            return Ok(Some((t0, lo)));
        }
        t0 += 0.5;
    }
    Ok(None)
}

/// Full report: conditions plus the `t₀` search.
pub fn decompose(kd: &KDelta, points: &[Vec<f64>]) -> Result<DecompositionReport> {
    let mut rep = verify_conditions(kd, points)?;
    if let Some((t0, lo)) = find_t0(kd, points)? {
        rep.t0_found = Some(t0);
        rep.min_eig_remainder = Some(lo);
    }
    Ok(rep)
}
