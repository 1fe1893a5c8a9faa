//! Complex and real multiplicative chaos functionals on grids.
//!
//! All integrals are Riemann sums over the periodic grid. With
//! `u(x) = f(x)e^{γX(x) − γ²K(x,x)/2}` the chaos is `M = Σu·h^d`, and the
//! bracket integrands are
//! `A = ∬Q(x−y)u(x)ū(y)`, `B = ∬Q(x−y)u(x)u(y)`,
//! evaluated through the DFT of `u`.

use crate::fft::FftPlan;
use crate::synth::{FieldEnsemble, Grid, GridMollifier, Walker};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest real exponent accepted before reporting overflow.
pub const MAX_EXPONENT: f64 = 700.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChaosError {
    #[error("exponent {exponent:.1} at site {site} exceeds {MAX_EXPONENT} (field {field:.3}, variance {variance:.3})")]
    Overflow { exponent: f64, site: usize, field: f64, variance: f64 },
    #[error("parameter outside the required phase: {0}")]
    OutOfPhase(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("test function support leaves the shrunk domain: {0}")]
    Support(String),
}

type Result<T> = std::result::Result<T, ChaosError>;

/// The exponent `γ = α + iβ`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexParam {
    pub alpha: f64,
    pub beta: f64,
}

impl ComplexParam {
    pub fn new(alpha: f64, beta: f64) -> Self {
        Self { alpha, beta }
    }

    pub fn real(alpha: f64) -> Self {
        Self { alpha, beta: 0.0 }
    }

    pub fn gamma(&self) -> Complex64 {
        Complex64::new(self.alpha, self.beta)
    }

    /// `γ²` as a complex square.
    pub fn gamma_sq(&self) -> Complex64 {
        self.gamma() * self.gamma()
    }

    /// `|γ|² = α² + β²`.
    pub fn abs_sq(&self) -> f64 {
        self.alpha * self.alpha + self.beta * self.beta
    }

    pub fn is_finite(&self) -> bool {
        self.alpha.is_finite() && self.beta.is_finite()
    }
}

/// Sum in a fixed binary tree, independent of thread count.
pub fn pairwise_sum<T: Copy + Default + std::ops::Add<Output = T>>(xs: &[T]) -> T {
    if xs.len() <= 64 {
        return xs.iter().fold(T::default(), |a, &b| a + b);
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

// ---------------------------------------------------------------- test functions

/// A test function sampled on a grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestFunction {
    pub id: String,
    pub values: Vec<f64>,
    pub support: Vec<bool>,
    pub smoothness: String,
}

impl TestFunction {
    pub fn from_values(id: &str, values: Vec<f64>, smoothness: &str) -> Self {
        let support = values.iter().map(|&v| v != 0.0).collect();
        Self { id: id.into(), values, support, smoothness: smoothness.into() }
    }

    /// `amplitude·e·exp(−1/(1 − |x−c|²/R²))` inside the ball, zero outside.
    pub fn bump(grid: &Grid, center: &[f64], radius: f64, amplitude: f64) -> Self {
        let values = (0..grid.sites())
            .map(|i| {
                let x = grid.coord(i);
                let r2: f64 = x.iter().zip(center).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / (radius * radius);
                if r2 < 1.0 {
                    amplitude * (1.0 - 1.0 / (1.0 - r2)).exp()
                } else {
                    0.0
                }
            })
            .collect();
        let id = format!("bump(c={center:?},r={radius},a={amplitude})");
        Self::from_values(&id, values, "smooth")
    }

    pub fn zero(grid: &Grid) -> Self {
        Self::from_values("zero", vec![0.0; grid.sites()], "smooth")
    }

    /// Pointwise product, e.g. `ρ·f`.
    pub fn times(&self, other: &TestFunction) -> Self {
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a * b).collect();
        Self::from_values(&format!("{}*{}", self.id, other.id), values, &self.smoothness)
    }

    pub fn integral(&self, grid: &Grid) -> f64 {
        pairwise_sum(&self.values) * grid.cell()
    }

    /// Support inside `[margin, side − margin]^d`.
    pub fn check_support(&self, grid: &Grid, margin: f64) -> Result<()> {
        if self.values.len() != grid.sites() {
            return Err(ChaosError::Shape(format!("{} values for {} sites", self.values.len(), grid.sites())));
        }
        for (i, &s) in self.support.iter().enumerate() {
            if s && grid.coord(i).iter().any(|&c| c < margin || c > grid.side - margin) {
                return Err(ChaosError::Support(format!("site {i} is within {margin} of the boundary")));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------- chaos

/// `u(x) = f(x)e^{γX(x) − γ²v(x)/2}`, checked against overflow.
pub fn weights(x: &[f64], var: &[f64], gamma: &ComplexParam, f: &[f64]) -> Result<Vec<Complex64>> {
    if x.len() != var.len() || x.len() != f.len() {
        return Err(ChaosError::Shape(format!("field {}, variance {}, f {}", x.len(), var.len(), f.len())));
    }
    let g2 = gamma.gamma_sq();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        if f[i] == 0.0 {
            out.push(Complex64::default());
            continue;
        }
        let re = gamma.alpha * x[i] - 0.5 * g2.re * var[i];
        if re > MAX_EXPONENT {
            return Err(ChaosError::Overflow { exponent: re, site: i, field: x[i], variance: var[i] });
        }
        let im = gamma.beta * x[i] - 0.5 * g2.im * var[i];
        out.push(Complex64::from_polar(f[i] * re.exp(), im));
    }
    Ok(out)
}

/// `M^{(γ)}(f) = Σ f e^{γX − γ²v/2} h^d`.
pub fn gmc(x: &[f64], var: &[f64], gamma: &ComplexParam, f: &[f64], cell: f64) -> Result<Complex64> {
    Ok(pairwise_sum(&weights(x, var, gamma, f)?) * cell)
}

/// `ℜ(e^{−iω}z)`.
pub fn m_omega(z: Complex64, omega: f64) -> f64 {
    (Complex64::from_polar(1.0, -omega) * z).re
}

/// `M^{(2α)}(e^{cL}f²)` with `c = |γ|²` (or `−|γ|²` for the companion sign).
pub fn intensity_functional(
    x: &[f64],
    var: &[f64],
    alpha: f64,
    l_diag: &[f64],
    weight_exponent: f64,
    f: &[f64],
    cell: f64,
    d: usize,
) -> Result<f64> {
    if !((2.0 * alpha).abs() < (2.0 * d as f64).sqrt()) {
        return Err(ChaosError::OutOfPhase(format!("|2α| = {} is not below √(2d)", (2.0 * alpha).abs())));
    }
    if l_diag.len() != f.len() {
        return Err(ChaosError::Shape("L diagonal and f differ in length".into()));
    }
    let w: Vec<f64> = f.iter().zip(l_diag).map(|(v, l)| v * v * (weight_exponent * l).exp()).collect();
    Ok(gmc(x, var, &ComplexParam::real(2.0 * alpha), &w, cell)?.re)
}

// ---------------------------------------------------------------- brackets

/// `(A, B)` from `û` and a real even kernel spectrum `q̂` (half layout).
pub fn brackets_from_spectrum(plan: &FftPlan, u: &[Complex64], q_hat: &[f64], cell: f64) -> (f64, Complex64) {
    let mut uh = u.to_vec();
    plan.fft_complex(&mut uh);
    let sites = plan.sites();
    let a_terms: Vec<f64> = (0..sites).map(|k| q_hat[plan.half_index(k)] * uh[k].norm_sqr()).collect();
    let b_terms: Vec<Complex64> = (0..sites).map(|k| uh[k] * uh[plan.negate(k)] * q_hat[plan.half_index(k)]).collect();
    let scale = cell * cell / sites as f64;
    (pairwise_sum(&a_terms) * scale, pairwise_sum(&b_terms) * scale)
}

/// `(A, B)` by direct enumeration of site pairs within `radius` cells (d = 1 or 2).
pub fn brackets_direct(
    grid: &Grid,
    u: &[Complex64],
    q: impl Fn(f64) -> f64,
    radius: usize,
) -> (f64, Complex64) {
    let n = grid.n as i64;
    let r = radius as i64;
    let h = grid.h();
    let mut a = 0.0;
    let mut b = Complex64::default();
    let offsets: Vec<(i64, i64)> = if grid.d == 1 {
        (-r..=r).map(|k| (0, k)).collect()
    } else {
        (-r..=r).flat_map(|i| (-r..=r).map(move |j| (i, j))).collect()
    };
    let weights: Vec<f64> = offsets.iter().map(|&(i, j)| q(((i * i + j * j) as f64).sqrt() * h)).collect();
    for (x, ux) in u.iter().enumerate() {
        if *ux == Complex64::default() {
            continue;
        }
        let (x1, x2) = if grid.d == 1 { (0, x as i64) } else { ((x as i64) / n, (x as i64) % n) };
        for (&(i, j), &w) in offsets.iter().zip(&weights) {
            if w == 0.0 {
                continue;
            }
            let y = if grid.d == 1 {
                (x2 + j).rem_euclid(n) as usize
            } else {
                ((x1 + i).rem_euclid(n) * n + (x2 + j).rem_euclid(n)) as usize
            };
            a += w * (ux * u[y].conj()).re;
            b += ux * u[y] * w;
        }
    }
    let c = grid.cell() * grid.cell();
    (a * c, b * c)
}

/// Per-layer bracket integrands along one replica.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BracketPath {
    pub times: Vec<f64>,
    pub delta_t: f64,
    pub a: Vec<f64>,
    pub b: Vec<Complex64>,
}

impl BracketPath {
    /// `Σ Δt(½|γ|²A + ½ℜ(e^{−2iω}γ²B))` over the first `layers` layers.
    pub fn bracket(&self, gamma: &ComplexParam, omega: f64, layers: usize) -> f64 {
        let rot = Complex64::from_polar(1.0, -2.0 * omega) * gamma.gamma_sq();
        let terms: Vec<f64> = (0..layers.min(self.a.len()))
            .map(|i| self.delta_t * (0.5 * gamma.abs_sq() * self.a[i] + 0.5 * (rot * self.b[i]).re))
            .collect();
        pairwise_sum(&terms)
    }

    /// `(|γ|²∫A, ℜ(e^{−2iω}γ²∫B))` over the first `layers` layers.
    pub fn parts(&self, gamma: &ComplexParam, omega: f64, layers: usize) -> (f64, f64) {
        let k = layers.min(self.a.len());
        let ia = pairwise_sum(&self.a[..k]) * self.delta_t;
        let ib = pairwise_sum(&self.b[..k]) * self.delta_t;
        let rot = Complex64::from_polar(1.0, -2.0 * omega) * gamma.gamma_sq();
        (gamma.abs_sq() * ia, (rot * ib).re)
    }
}

/// A replica's martingale path `N_{t_i}` together with its bracket integrands.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReplicaPath {
    pub n: Vec<f64>,
    /// The complex chaos `M_{t_i}` at each layer time.
    pub m: Vec<Complex64>,
    pub brackets: Option<BracketPath>,
}

impl ReplicaPath {
    /// `Σ (N_{t_{i+1}} − N_{t_i})²` up to layer `layers`.
    pub fn squared_increments(&self, layers: usize) -> f64 {
        let sq: Vec<f64> = self.n.windows(2).take(layers).map(|w| (w[1] - w[0]).powi(2)).collect();
        pairwise_sum(&sq)
    }
}

/// Walks a replica through the schedule, recording `N_t = ℜ(e^{−iω}M_t)`
/// (mollified when `moll` is given) and optionally the bracket integrands,
/// whose kernel on layer `i` is the layer average of `Q` (times `θ̂_ε²`).
pub fn martingale_path(
    mut walker: Walker<'_>,
    moll: Option<&GridMollifier>,
    gamma: &ComplexParam,
    f: &TestFunction,
    omega: f64,
    layers: usize,
    with_brackets: bool,
) -> Result<ReplicaPath> {
    let ens = walker.ensemble();
    let grid = *ens.grid();
    let sched = *ens.schedule();
    let cell = grid.cell();
    let layers = layers.min(sched.steps);
    let cum = ens.layer_variances(moll);
    let base = ens.base_variance(moll);
    let sites = grid.sites();
    let mut out = ReplicaPath::default();
    let mut br = BracketPath { delta_t: sched.delta_t, ..Default::default() };
    let mut var = vec![0.0; sites];
    loop {
        let i = walker.index();
        for (k, v) in var.iter_mut().enumerate() {
            *v = cum[i] + base.as_ref().map_or(0.0, |b| b[k]);
        }
        let x = match moll {
            Some(m) => walker.mollified(m),
            None => walker.field(),
        };
        let u = weights(&x, &var, gamma, &f.values)?;
        let m = pairwise_sum(&u) * cell;
        out.m.push(m);
        out.n.push(m_omega(m, omega));
        if i >= layers {
            break;
        }
        if with_brackets {
            let q = layer_q_hat(ens, i, moll);
            let (a, b) = brackets_from_spectrum(ens.plan(), &u, &q, cell);
            br.times.push(sched.t(i));
            br.a.push(a);
            br.b.push(b);
        }
        walker.advance();
    }
    if with_brackets {
        out.brackets = Some(br);
    }
    Ok(out)
}

/// Layer-averaged `Q̂` on layer `i`, i.e. `λ_i/Δt`, times `θ̂_ε²` if mollified.
pub fn layer_q_hat(ens: &FieldEnsemble, i: usize, moll: Option<&GridMollifier>) -> Vec<f64> {
    let dt = ens.schedule().delta_t;
    let lam = ens.layer_spectrum(i);
    match moll {
        Some(m) => lam.iter().zip(m.hat()).map(|(l, t)| l / dt * t * t).collect(),
        None => lam.iter().map(|l| l / dt).collect(),
    }
}

/// `(A_s, B_s)` for the field at the walker's current time, with `Q_s`
/// evaluated pointwise at that time.
pub fn bracket_integrands(
    walker: &Walker<'_>,
    moll: Option<&GridMollifier>,
    gamma: &ComplexParam,
    f: &TestFunction,
) -> Result<(f64, Complex64)> {
    let ens = walker.ensemble();
    let i = walker.index();
    let var = ens.variance(i, moll);
    let x = match moll {
        Some(m) => walker.mollified(m),
        None => walker.field(),
    };
    let u = weights(&x, &var, gamma, &f.values)?;
    let q: Vec<f64> = match moll {
        Some(m) => ens.q_hat(i).iter().zip(m.hat()).map(|(q, t)| q * t * t).collect(),
        None => ens.q_hat(i).to_vec(),
    };
    Ok(brackets_from_spectrum(ens.plan(), &u, &q, ens.grid().cell()))
}

// ---------------------------------------------------------------- samples

/// Per-replica chaos values at one `(t, ε)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChaosSample {
    pub gamma: ComplexParam,
    pub t: f64,
    pub eps: Option<f64>,
    pub f_id: String,
    pub seed: u64,
    /// `M^{(γ)}(f)`.
    pub values: Vec<Complex64>,
    /// `M^{(2α)}(f)`.
    pub real_chaos: Vec<f64>,
    /// `M^{(2α)}(e^{|γ|²L}f²)`.
    pub intensity: Vec<f64>,
}

impl ChaosSample {
    /// Chaos, real chaos and intensity for every replica of `ens` at time `t`.
    pub fn compute(
        ens: &FieldEnsemble,
        moll: Option<&GridMollifier>,
        t: f64,
        gamma: &ComplexParam,
        f: &TestFunction,
    ) -> std::result::Result<Self, Box<dyn std::error::Error + Send + Sync>> {
        let i = ens.schedule().index_of(t).ok_or_else(|| format!("t = {t} is not a layer time"))?;
        let var = ens.variance(i, moll);
        let grid = *ens.grid();
        let l = l_diagonal(ens)?;
        let rows: Vec<Result<(Complex64, f64, f64)>> = ens.map_replicas(|mut w| {
            while w.index() < i {
                w.advance();
            }
            let x = match moll {
                Some(m) => w.mollified(m),
                None => w.field(),
            };
            let m = gmc(&x, &var, gamma, &f.values, grid.cell())?;
            let real = gmc(&x, &var, &ComplexParam::real(2.0 * gamma.alpha), &f.values, grid.cell())?.re;
            let z = intensity_functional(&x, &var, gamma.alpha, &l, gamma.abs_sq(), &f.values, grid.cell(), grid.d)?;
            Ok((m, real, z))
        });
        let mut s = Self {
            gamma: *gamma,
            t,
            eps: moll.map(|m| m.eps()),
            f_id: f.id.clone(),
            seed: ens.config().seed,
            values: Vec::new(),
            real_chaos: Vec::new(),
            intensity: Vec::new(),
        };
        for r in rows {
            let (m, real, z) = r?;
            s.values.push(m);
            s.real_chaos.push(real);
            s.intensity.push(z);
        }
        Ok(s)
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["replica", "re", "im", "real_chaos", "intensity", "alpha", "beta", "t", "eps", "f", "seed"])?;
        for r in 0..self.values.len() {
            out.write_record([
                r.to_string(),
                format!("{:.17e}", self.values[r].re),
                format!("{:.17e}", self.values[r].im),
                format!("{:.17e}", self.real_chaos[r]),
                format!("{:.17e}", self.intensity[r]),
                self.gamma.alpha.to_string(),
                self.gamma.beta.to_string(),
                self.t.to_string(),
                self.eps.map_or(String::new(), |e| e.to_string()),
                self.f_id.clone(),
                self.seed.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    /// Means and standard errors of the per-replica columns.
    pub fn summary(&self) -> serde_json::Value {
        let stat = |xs: &[f64]| {
            let n = xs.len() as f64;
            let m = pairwise_sum(xs) / n;
            let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0).max(1.0);
            serde_json::json!({ "mean": m, "stderr": (v / n).sqrt() })
        };
        let re: Vec<f64> = self.values.iter().map(|z| z.re).collect();
        let im: Vec<f64> = self.values.iter().map(|z| z.im).collect();
        let abs2: Vec<f64> = self.values.iter().map(|z| z.norm_sqr()).collect();
        serde_json::json!({
            "gamma": self.gamma,
            "t": self.t,
            "eps": self.eps,
            "f": self.f_id,
            "seed": self.seed,
            "replicas": self.values.len(),
            "re": stat(&re),
            "im": stat(&im),
            "abs_sq": stat(&abs2),
            "real_chaos": stat(&self.real_chaos),
            "intensity": stat(&self.intensity),
        })
    }
}

/// `L(x,x) = K₀(x,x) − j_κ` at every grid site.
pub fn l_diagonal(ens: &FieldEnsemble) -> std::result::Result<Vec<f64>, crate::kernels::KernelError> {
    let spec = &ens.config().kernel;
    let j = spec.kappa.j_kappa()?;
    let grid = ens.grid();
    (0..grid.sites())
        .map(|i| {
            let x = grid.coord(i);
            Ok(spec.k0.value(&x, &x)? - j)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairwise_matches_sequential() {
        let xs: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&xs), 499500.0);
    }

    #[test]
    fn omega_rotation() {
        let z = Complex64::new(1.0, 1.0);
        assert!((m_omega(z, 0.0) - 1.0).abs() < 1e-15);
        assert!((m_omega(z, std::f64::consts::FRAC_PI_2) - 1.0).abs() < 1e-15);
    }
}
