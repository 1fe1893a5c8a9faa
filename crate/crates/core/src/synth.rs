//! Spectral synthesis of layered log-correlated fields on periodic grids.
//!
//! Layer `i` of the schedule is a stationary field with covariance
//! `∫_{t_i}^{t_{i+1}} κ(e^u d(x,y))du` in torus distance. Its circulant
//! spectrum `λ_i` is computed once per ensemble. A replica draws Hermitian
//! noise `w_i` per layer and accumulates `S_t = Σ √λ_i w_i`, so that
//! `X_t = DFT⁻¹(S_t)/√(N^d)`; mollification multiplies `S_t` by `θ̂_ε`.
//!
//! Refined ensembles are coupled to the base ensemble with the same seed.
//! Halving `h` rotates each coarse frequency pair `(k, k+N)` so that the
//! fine field restricted to even sites reproduces the coarse field; halving
//! `Δt` rotates each layer into two children summing to the parent. Noise is
//! drawn in a fixed order: base layer, spatial refinements, time refinements.

use crate::fft::FftPlan;
use crate::kernels::{dist, KernelError, KernelSpec, Mollifier, SmoothForm};
use crate::rng::{self, kind, GENERATOR};
use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;
use std::sync::OnceLock;
use thiserror::Error;

/// Largest number of grid sites.
pub const MAX_SITES: usize = 1 << 22;
/// Largest clipped fraction of spectral mass.
pub const CLIP_LIMIT: f64 = 1e-3;
/// Largest point set for dense factorizations.
pub const MAX_DENSE: usize = 2048;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("clipped spectral mass {clipped:.3e} exceeds {limit:.0e}")]
    Accuracy { clipped: f64, limit: f64 },
    #[error("not positive definite: {0}")]
    NotPositiveDefinite(String),
    #[error("resolution: {0}")]
    Resolution(String),
    #[error("atom {0:?} is not on the grid")]
    OffGrid(Vec<f64>),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
}

type Result<T> = std::result::Result<T, SynthError>;

// ---------------------------------------------------------------- grid

/// Periodic lattice `[0, side)^d` with `n` points per axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub d: usize,
    pub n: usize,
    pub side: f64,
}

impl Grid {
    pub fn new(d: usize, n: usize, side: f64) -> Result<Self> {
        if !(d == 1 || d == 2) {
            return Err(SynthError::Grid(format!("dimension must be 1 or 2, got {d}")));
        }
        if n < 4 || !n.is_power_of_two() {
            return Err(SynthError::Grid(format!("points per axis must be a power of two ≥ 4, got {n}")));
        }
        if !(side > 0.0 && side.is_finite()) {
            return Err(SynthError::Grid(format!("side length must be positive, got {side}")));
        }
        match n.checked_pow(d as u32) {
            Some(s) if s <= MAX_SITES => Ok(Self { d, n, side }),
            _ => Err(SynthError::Grid(format!("{n}^{d} sites exceed the limit {MAX_SITES}"))),
        }
    }

    pub fn h(&self) -> f64 {
        self.side / self.n as f64
    }

    pub fn sites(&self) -> usize {
        self.n.pow(self.d as u32)
    }

    pub fn cell(&self) -> f64 {
        self.h().powi(self.d as i32)
    }

    pub fn refine(&self) -> Result<Self> {
        Self::new(self.d, 2 * self.n, self.side)
    }

    pub fn coord(&self, idx: usize) -> Vec<f64> {
        let h = self.h();
        if self.d == 1 {
            vec![idx as f64 * h]
        } else {
            vec![(idx / self.n) as f64 * h, (idx % self.n) as f64 * h]
        }
    }

    /// Signed wrapped offset of an axis index, in `[−n/2, n/2)`.
    fn wrap(&self, i: usize) -> f64 {
        let n = self.n as i64;
        let i = i as i64;
        (if i >= n / 2 { i - n } else { i }) as f64
    }

    /// Torus distance from site `idx` to the origin.
    pub fn origin_dist(&self, idx: usize) -> f64 {
        let h = self.h();
        if self.d == 1 {
            self.wrap(idx).abs() * h
        } else {
            let (a, b) = (self.wrap(idx / self.n), self.wrap(idx % self.n));
            (a * a + b * b).sqrt() * h
        }
    }

    pub fn torus_dist(&self, x: &[f64], y: &[f64]) -> f64 {
        x.iter()
            .zip(y)
            .map(|(a, b)| {
                let mut u = (a - b).rem_euclid(self.side);
                if u > self.side / 2.0 {
                    u = self.side - u;
                }
                u * u
            })
            .sum::<f64>()
            .sqrt()
    }

    /// `f(torus distance to the origin)` at every site.
    pub fn radial_row(&self, f: impl Fn(f64) -> f64 + Sync) -> Vec<f64> {
        (0..self.sites()).into_par_iter().map(|i| f(self.origin_dist(i))).collect()
    }

    /// Index of the nearest site; points outside `[−h/2, side − h/2)` are rejected.
    pub fn snap(&self, x: &[f64]) -> Result<usize> {
        if x.len() != self.d {
            return Err(SynthError::OffGrid(x.to_vec()));
        }
        let h = self.h();
        let mut idx = 0;
        for &c in x {
            let u = (c / h).round();
            if !(u >= 0.0 && u < self.n as f64) || (c - u * h).abs() > 0.5 * h {
                return Err(SynthError::OffGrid(x.to_vec()));
            }
            idx = idx * self.n + u as usize;
        }
        Ok(idx)
    }
}

// ---------------------------------------------------------------- schedule

/// Uniform layer times `t_i = iΔt`, `i = 0..=steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSchedule {
    pub delta_t: f64,
    pub steps: usize,
}

impl LayerSchedule {
    pub const DEFAULT_DT: f64 = std::f64::consts::LN_2 / 8.0;

    pub fn new(delta_t: f64, t_max: f64) -> Result<Self> {
        if !(delta_t > 0.0 && t_max > 0.0) {
            return Err(SynthError::Schedule(format!("need Δt > 0 and t_max > 0, got {delta_t}, {t_max}")));
        }
        let steps = (t_max / delta_t - 1e-9).ceil().max(1.0) as usize;
        Ok(Self { delta_t, steps })
    }

    /// Layers down to `log(1/h) + ∫κ/d`, which matches the variance of the
    /// discarded sub-grid layers.
    pub fn for_grid(grid: &Grid, spec: &KernelSpec, delta_t: f64) -> Result<Self> {
        let t_max = (1.0 / grid.h()).ln() + spec.kappa.mass()? / grid.d as f64;
        Self::new(delta_t, t_max)
    }

    pub fn t(&self, i: usize) -> f64 {
        i as f64 * self.delta_t
    }

    pub fn t_max(&self) -> f64 {
        self.t(self.steps)
    }

    pub fn t_values(&self) -> Vec<f64> {
        (0..=self.steps).map(|i| self.t(i)).collect()
    }

    /// Index `i` with `t_i = t` within 10⁻⁹.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let i = (t / self.delta_t).round();
        (i >= 0.0 && i as usize <= self.steps && (self.t(i as usize) - t).abs() < 1e-9).then_some(i as usize)
    }

    pub fn check_resolves(&self, grid: &Grid) -> Result<()> {
        if self.t_max() + 1e-12 < (1.0 / grid.h()).ln() {
            return Err(SynthError::Schedule(format!(
                "t_max = {} does not reach log(1/h) = {}",
                self.t_max(),
                (1.0 / grid.h()).ln()
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------- mollifier on grid

/// Discrete `θ_ε` on a grid, normalized to unit lattice mass.
#[derive(Clone, Debug)]
pub struct GridMollifier {
    eps: f64,
    hat: Vec<f64>,
}

impl GridMollifier {
    pub fn new(moll: &Mollifier, grid: &Grid, eps: f64) -> Result<Self> {
        if moll.dim() != grid.d {
            return Err(SynthError::Unsupported("mollifier dimension differs from the grid".into()));
        }
        if eps < 2.0 * grid.h() * (1.0 - 1e-12) {
            return Err(SynthError::Resolution(format!("ε = {eps} is below 2h = {}", 2.0 * grid.h())));
        }
        if eps > grid.side / 4.0 {
            return Err(SynthError::Resolution(format!("ε = {eps} exceeds a quarter of the period")));
        }
        let row = grid.radial_row(|r| moll.theta_eps(r, eps));
        let mass: f64 = row.iter().sum();
        let row: Vec<f64> = row.iter().map(|v| v / mass).collect();
        let plan = FftPlan::new(grid.d, grid.n);
        let mut spec = vec![Complex64::default(); plan.half_len()];
        plan.r2c(&row, &mut spec);
        Ok(Self { eps, hat: spec.iter().map(|c| c.re).collect() })
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn hat(&self) -> &[f64] {
        &self.hat
    }
}

// ---------------------------------------------------------------- ensemble

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub kernel: KernelSpec,
    /// Grid before spatial refinement.
    pub grid: Grid,
    /// Schedule before time refinement.
    pub schedule: LayerSchedule,
    pub replicas: usize,
    pub seed: u64,
    #[serde(default)]
    pub space_level: u32,
    #[serde(default)]
    pub time_level: u32,
}

impl EnsembleConfig {
    pub fn new(kernel: KernelSpec, grid: Grid, schedule: LayerSchedule, replicas: usize, seed: u64) -> Self {
        Self { kernel, grid, schedule, replicas, seed, space_level: 0, time_level: 0 }
    }

    /// The same experiment with `h` halved, coupled to this one.
    pub fn refine_space(&self) -> Result<Self> {
        let mut c = self.clone();
        c.space_level += 1;
        let fine = c.effective_grid()?;
        let t_max = (1.0 / fine.h()).ln() + c.kernel.kappa.mass()? / fine.d as f64;
        c.schedule.steps = c.schedule.steps.max((t_max / c.schedule.delta_t - 1e-9).ceil() as usize);
        Ok(c)
    }

    /// The same experiment with `Δt` halved, coupled to this one.
    pub fn refine_time(&self) -> Self {
        let mut c = self.clone();
        c.time_level += 1;
        c
    }

    pub fn effective_grid(&self) -> Result<Grid> {
        let mut g = self.grid;
        for _ in 0..self.space_level {
            g = g.refine()?;
        }
        Ok(g)
    }

    pub fn effective_schedule(&self) -> LayerSchedule {
        let f = 1usize << self.time_level;
        LayerSchedule { delta_t: self.schedule.delta_t / f as f64, steps: self.schedule.steps * f }
    }
}

#[derive(Debug)]
enum BaseField {
    None,
    /// Stationary K₀: spectral square roots on every grid level.
    Spectral(Vec<Vec<f32>>),
    /// Lower Cholesky factor of K₀ over the grid sites.
    Dense(DMatrix<f64>),
}

/// Lazily realized ensemble of layered fields.
#[derive(Debug)]
pub struct FieldEnsemble {
    config: EnsembleConfig,
    grid: Grid,
    schedule: LayerSchedule,
    plans: Vec<FftPlan>,
    /// `√λ` of base layer `b` on grid level `ℓ ≥ 1`, indexed `[ℓ − 1][b]`.
    space_sqrt: Vec<Vec<Vec<f32>>>,
    /// `√λ` of time-tree nodes on the final grid, indexed `[depth][node]`.
    node_sqrt: Vec<Vec<Vec<f32>>>,
    base: BaseField,
    clipped: f64,
    q_cache: Vec<OnceLock<Vec<f64>>>,
}

fn spectrum_of(plan: &FftPlan, row: &[f64]) -> (Vec<f64>, f64) {
    let mut spec = vec![Complex64::default(); plan.half_len()];
    plan.r2c(row, &mut spec);
    let (mut neg, mut tot) = (0.0, 0.0);
    let lam: Vec<f64> = spec
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let m = plan.multiplicity(i);
            tot += m * c.re.abs();
            if c.re < 0.0 {
                neg -= m * c.re;
                0.0
            } else {
                c.re
            }
        })
        .collect();
    (lam, if tot > 0.0 { neg / tot } else { 0.0 })
}

fn sqrt32(lam: &[f64]) -> Vec<f32> {
    lam.iter().map(|&l| l.sqrt() as f32).collect()
}

impl FieldEnsemble {
    pub fn new(config: EnsembleConfig) -> Result<Self> {
        let spec = &config.kernel;
        let grid = config.effective_grid()?;
        if spec.d != grid.d {
            return Err(SynthError::Grid(format!("kernel dimension {} differs from grid dimension {}", spec.d, grid.d)));
        }
        if config.replicas == 0 {
            return Err(SynthError::Grid("at least one replica is required".into()));
        }
        if !(grid.side > 2.0) {
            return Err(SynthError::Grid(format!(
                "κ has unit support, which must fit in half the period; side = {}",
                grid.side
            )));
        }
        if config.space_level > 0 && grid.d != 1 {
            return Err(SynthError::Unsupported("coupled spatial refinement is implemented for d = 1".into()));
        }
        let schedule = config.effective_schedule();
        schedule.check_resolves(&grid)?;
        let base_sched = config.schedule;
        let levels = config.space_level as usize;
        let mut plans = Vec::with_capacity(levels + 1);
        let mut g = config.grid;
        for l in 0..=levels {
            if l > 0 {
                g = g.refine()?;
            }
            plans.push(FftPlan::new(g.d, g.n));
        }
        let kappa = &spec.kappa;
        let mut clipped: f64 = 0.0;

        let layer_spectrum = |g: &Grid, plan: &FftPlan, a: f64, b: f64| -> (Vec<f64>, f64) {
            let reach = (-a).exp();
            let row = g.radial_row(|r| if r >= reach { 0.0 } else { kappa.layer_integral(r, a, b).unwrap_or(f64::NAN) });
            spectrum_of(plan, &row)
        };

        let mut space_sqrt = Vec::with_capacity(levels);
        let mut g = config.grid;
        for l in 1..=levels {
            g = g.refine()?;
            let mut per_layer = Vec::with_capacity(base_sched.steps);
            for b in 0..base_sched.steps {
                let (lam, c) = layer_spectrum(&g, &plans[l], base_sched.t(b), base_sched.t(b + 1));
                clipped = clipped.max(c);
                per_layer.push(sqrt32(&lam));
            }
            space_sqrt.push(per_layer);
        }

        let depth = config.time_level as usize;
        let fine_plan = &plans[levels];
        let mut node_sqrt = Vec::with_capacity(depth + 1);
        for dl in 0..=depth {
            let width = base_sched.delta_t / (1u64 << dl) as f64;
            let count = base_sched.steps << dl;
            let mut nodes = Vec::with_capacity(count);
            for j in 0..count {
                if dl == 0 && levels > 0 {
                    nodes.push(space_sqrt[levels - 1][j].clone());
                    continue;
                }
                let a = j as f64 * width;
                let (lam, c) = layer_spectrum(&grid, fine_plan, a, a + width);
                clipped = clipped.max(c);
                nodes.push(sqrt32(&lam));
            }
            node_sqrt.push(nodes);
        }

        let base = match &spec.k0.form {
            SmoothForm::Zero => BaseField::None,
            SmoothForm::GaussianBump { .. } => {
                let mut g = config.grid;
                let mut per_level = Vec::with_capacity(levels + 1);
                for (l, plan) in plans.iter().enumerate() {
                    if l > 0 {
                        g = g.refine()?;
                    }
                    let row = g.radial_row(|r| spec.k0.radial(r));
                    let (lam, c) = spectrum_of(plan, &row);
                    clipped = clipped.max(c);
                    per_level.push(sqrt32(&lam));
                }
                BaseField::Spectral(per_level)
            }
            SmoothForm::Tabulated2d { .. } => {
                if levels > 0 {
                    return Err(SynthError::Unsupported("coupled refinement of a dense K₀".into()));
                }
                let n = grid.sites();
                if n > MAX_DENSE {
                    return Err(SynthError::Unsupported(format!("dense K₀ factorization limited to {MAX_DENSE} sites")));
                }
                let coords: Vec<Vec<f64>> = (0..n).map(|i| grid.coord(i)).collect();
                let mut gram = DMatrix::zeros(n, n);
                for i in 0..n {
                    for j in 0..=i {
                        let v = spec.k0.value(&coords[i], &coords[j])?;
                        gram[(i, j)] = v;
                        gram[(j, i)] = v;
                    }
                }
                BaseField::Dense(cholesky_with_jitter(gram)?)
            }
        };

        if clipped > CLIP_LIMIT {
            return Err(SynthError::Accuracy { clipped, limit: CLIP_LIMIT });
        }
        let q_cache = (0..=schedule.steps).map(|_| OnceLock::new()).collect();
        Ok(Self { config, grid, schedule, plans, space_sqrt, node_sqrt, base, clipped, q_cache })
    }

    pub fn config(&self) -> &EnsembleConfig {
        &self.config
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn schedule(&self) -> &LayerSchedule {
        &self.schedule
    }

    pub fn replicas(&self) -> usize {
        self.config.replicas
    }

    pub fn plan(&self) -> &FftPlan {
        &self.plans[self.plans.len() - 1]
    }

    /// Largest clipped fraction of spectral mass over all layers.
    pub fn clipped_mass(&self) -> f64 {
        self.clipped
    }

    pub fn generator(&self) -> &'static str {
        GENERATOR
    }

    fn leaves(&self) -> &[Vec<f32>] {
        &self.node_sqrt[self.node_sqrt.len() - 1]
    }

    pub fn walker(&self, replica: usize) -> Walker<'_> {
        let plan = self.plan();
        let mut spectrum = vec![Complex64::default(); plan.half_len()];
        match &self.base {
            BaseField::None => {}
            BaseField::Spectral(levels) => {
                let w = self.refined_noise(replica, u64::MAX, kind::BASE, levels);
                let sq = &levels[levels.len() - 1];
                for ((s, w), a) in spectrum.iter_mut().zip(&w).zip(sq) {
                    *s += w * *a as f64;
                }
            }
            BaseField::Dense(l) => {
                let mut rng = rng::substream(&[self.config.seed, replica as u64, kind::BASE]);
                let g = nalgebra::DVector::from_fn(l.nrows(), |_, _| rng::normal(&mut rng));
                let b = l * g;
                let mut bs = vec![Complex64::default(); plan.half_len()];
                plan.r2c(b.as_slice(), &mut bs);
                let scale = 1.0 / (plan.sites() as f64).sqrt();
                for (s, v) in spectrum.iter_mut().zip(&bs) {
                    *s += v * scale;
                }
            }
        }
        Walker { ens: self, replica, next: 0, spectrum, pending: Vec::new() }
    }

    /// Hermitian noise on the base grid, carried through the spatial levels.
    fn refined_noise(&self, replica: usize, layer: u64, k: u64, base_sqrt: &[Vec<f32>]) -> Vec<Complex64> {
        let seed = self.config.seed;
        let mut rng = rng::substream(&[seed, replica as u64, k, layer]);
        let mut w = hermitian_noise(&mut rng, &self.plans[0]);
        for l in 1..self.plans.len() {
            let sq = if layer == u64::MAX { &base_sqrt[l] } else { &self.space_sqrt[l - 1][layer as usize] };
            let mut rng = rng::substream(&[seed, replica as u64, kind::SPACE, layer, l as u64]);
            w = refine_space(&w, sq, &mut rng);
        }
        w
    }

    /// Noise for every leaf of base layer `b`, in time order.
    fn leaf_noise(&self, replica: usize, b: usize) -> Vec<Vec<Complex64>> {
        let w = self.refined_noise(replica, b as u64, kind::LAYER, &[]);
        let mut nodes = vec![w];
        for dl in 0..self.config.time_level as usize {
            let children = &self.node_sqrt[dl + 1];
            let mut next = Vec::with_capacity(nodes.len() * 2);
            for (k, w) in nodes.into_iter().enumerate() {
                let mut rng = rng::substream(&[
                    self.config.seed,
                    replica as u64,
                    kind::TIME,
                    b as u64,
                    dl as u64,
                    k as u64,
                ]);
                let z = hermitian_noise(&mut rng, self.plan());
                let base = (b << (dl + 1)) + 2 * k;
                let (la, lb) = (&children[base], &children[base + 1]);
                let mut wa = w.clone();
                let mut wb = w;
                for i in 0..wa.len() {
                    let (a, c) = (la[i] as f64, lb[i] as f64);
                    let s = (a * a + c * c).sqrt();
                    let (p, q) = (wa[i], z[i]);
                    if s > 0.0 {
                        wa[i] = (p * a + q * c) / s;
                        wb[i] = (p * c - q * a) / s;
                    } else {
                        wa[i] = p;
                        wb[i] = q;
                    }
                }
                next.push(wa);
                next.push(wb);
            }
            nodes = next;
        }
        nodes
    }

    /// Cumulative lattice variance of `X_{t_i}` (or `X_{t_i,ε}`) for every
    /// schedule index, without the K₀ part.
    pub fn layer_variances(&self, moll: Option<&GridMollifier>) -> Vec<f64> {
        let plan = self.plan();
        let sites = plan.sites() as f64;
        let weights: Vec<f64> = (0..plan.half_len())
            .map(|i| plan.multiplicity(i) * moll.map_or(1.0, |m| m.hat[i] * m.hat[i]) / sites)
            .collect();
        let mut out = Vec::with_capacity(self.schedule.steps + 1);
        let mut acc = 0.0;
        out.push(0.0);
        for sq in self.leaves() {
            acc += sq.iter().zip(&weights).map(|(&a, w)| (a as f64) * (a as f64) * w).sum::<f64>();
            out.push(acc);
        }
        out
    }

    /// Per-site lattice variance of the K₀ part, if any.
    pub fn base_variance(&self, moll: Option<&GridMollifier>) -> Option<Vec<f64>> {
        let plan = self.plan();
        let sites = plan.sites();
        match &self.base {
            BaseField::None => None,
            BaseField::Spectral(levels) => {
                let sq = &levels[levels.len() - 1];
                let v: f64 = sq
                    .iter()
                    .enumerate()
                    .map(|(i, &a)| {
                        let t = moll.map_or(1.0, |m| m.hat[i] * m.hat[i]);
                        plan.multiplicity(i) * (a as f64) * (a as f64) * t
                    })
                    .sum::<f64>()
                    / sites as f64;
                Some(vec![v; sites])
            }
            BaseField::Dense(l) => {
                let mut var = vec![0.0; sites];
                let mut spec = vec![Complex64::default(); plan.half_len()];
                let mut col = vec![0.0; sites];
                for j in 0..l.ncols() {
                    col.copy_from_slice(l.column(j).as_slice());
                    if let Some(m) = moll {
                        plan.r2c(&col.clone(), &mut spec);
                        for (s, h) in spec.iter_mut().zip(&m.hat) {
                            *s *= *h;
                        }
                        plan.c2r(&spec, &mut col);
                        col.iter_mut().for_each(|v| *v /= sites as f64);
                    }
                    for (v, c) in var.iter_mut().zip(&col) {
                        *v += c * c;
                    }
                }
                Some(var)
            }
        }
    }

    /// Per-site variance at schedule index `i`.
    pub fn variance(&self, i: usize, moll: Option<&GridMollifier>) -> Vec<f64> {
        let v = self.layer_variances(moll)[i];
        match self.base_variance(moll) {
            None => vec![v; self.grid.sites()],
            Some(b) => b.into_iter().map(|x| x + v).collect(),
        }
    }

    /// Half spectrum of layer `i` (after clipping).
    pub fn layer_spectrum(&self, i: usize) -> Vec<f64> {
        self.leaves()[i].iter().map(|&a| (a as f64) * (a as f64)).collect()
    }

    /// Half spectrum of `κ(e^{t_i}·d)` on the grid.
    pub fn q_hat(&self, i: usize) -> &[f64] {
        self.q_cache[i].get_or_init(|| {
            let s = self.schedule.t(i).exp();
            let kappa = &self.config.kernel.kappa;
            let row = self.grid.radial_row(|r| kappa.eval(s * r).unwrap_or(f64::NAN));
            spectrum_of(self.plan(), &row).0
        })
    }

    /// Runs `f` on every replica's walker, in parallel, returning results in replica order.
    pub fn map_replicas<T: Send>(&self, f: impl Fn(Walker<'_>) -> T + Sync + Send) -> Vec<T> {
        (0..self.replicas()).into_par_iter().map(|r| f(self.walker(r))).collect()
    }

    /// `X_t` for one replica.
    pub fn sample(&self, replica: usize, t: f64) -> Result<Vec<f64>> {
        let mut w = self.walker(replica);
        w.advance_to(t)?;
        Ok(w.field())
    }

    /// `X_{t,ε}` for every replica.
    pub fn mollify(&self, moll: &GridMollifier, t: f64) -> Result<Vec<Vec<f64>>> {
        self.schedule.index_of(t).ok_or_else(|| SynthError::Schedule(format!("t = {t} is not a layer time")))?;
        self.map_replicas(|mut w| {
            w.advance_to(t)?;
            Ok(w.mollified(moll))
        })
        .into_iter()
        .collect()
    }

    /// `⟨X_t, μ⟩` for every replica.
    pub fn pair_with_measure(&self, mu: &DiscreteMeasure, t: f64) -> Result<Vec<f64>> {
        let snapped = mu.snap(&self.grid)?;
        self.map_replicas(|mut w| {
            w.advance_to(t)?;
            Ok(snapped.pair(&w.field()))
        })
        .into_iter()
        .collect()
    }

    /// Writes `stem.bin` (little-endian f64, replica × time × site) and `stem.json`.
    pub fn export(&self, stem: &Path, times: &[f64], moll: Option<&GridMollifier>) -> Result<()> {
        for &t in times {
            self.schedule.index_of(t).ok_or_else(|| SynthError::Schedule(format!("t = {t} is not a layer time")))?;
        }
        let mut bin = std::io::BufWriter::new(std::fs::File::create(stem.with_extension("bin"))?);
        for r in 0..self.replicas() {
            let mut w = self.walker(r);
            for &t in times {
                w.advance_to(t)?;
                let x = match moll {
                    Some(m) => w.mollified(m),
                    None => w.field(),
                };
                for v in x {
                    bin.write_all(&v.to_le_bytes())?;
                }
            }
        }
        bin.flush()?;
        let sidecar = serde_json::json!({
            "kernel": self.config.kernel,
            "grid": self.grid,
            "schedule": self.schedule,
            "seed": self.config.seed,
            "space_level": self.config.space_level,
            "time_level": self.config.time_level,
            "generator": GENERATOR,
            "clipped_spectral_mass": self.clipped,
            "mollifier_eps": moll.map(|m| m.eps),
            "times": times,
            "shape": [self.replicas(), times.len(), self.grid.sites()],
            "dtype": "f64",
            "byte_order": "little",
        });
        std::fs::write(stem.with_extension("json"), serde_json::to_string_pretty(&sidecar)?)?;
        Ok(())
    }
}

/// Independent Hermitian half-spectrum noise with unit variance per full frequency.
pub fn hermitian_noise<R: Rng>(rng: &mut R, plan: &FftPlan) -> Vec<Complex64> {
    let n = plan.n();
    let mut w = vec![Complex64::default(); plan.half_len()];
    let real = |rng: &mut R| Complex64::new(rng::normal(rng), 0.0);
    if plan.dim() == 1 {
        for (k, v) in w.iter_mut().enumerate() {
            *v = if k == 0 || k == n / 2 { real(rng) } else { rng::complex_normal(rng) };
        }
        return w;
    }
    let h2 = n / 2 + 1;
    for k1 in 0..n {
        for k2 in 1..n / 2 {
            w[k1 * h2 + k2] = rng::complex_normal(rng);
        }
    }
    for k2 in [0, n / 2] {
        for k1 in 0..=n / 2 {
            if k1 == 0 || k1 == n / 2 {
                w[k1 * h2 + k2] = real(rng);
            } else {
                let z = rng::complex_normal(rng);
                w[k1 * h2 + k2] = z;
                w[(n - k1) * h2 + k2] = z.conj();
            }
        }
    }
    w
}

/// Coarse noise of length `N/2 + 1` to fine noise of length `N + 1` (d = 1).
fn refine_space<R: Rng>(w: &[Complex64], fine_sqrt: &[f32], rng: &mut R) -> Vec<Complex64> {
    let n = 2 * (w.len() - 1);
    let half = n / 2;
    let mut out = vec![Complex64::default(); n + 1];
    for k in 0..=half {
        let a = fine_sqrt[k] as f64;
        let b = fine_sqrt[n - k] as f64;
        let z = if k == 0 {
            Complex64::new(rng::normal(rng), 0.0)
        } else if k == half {
            Complex64::new(0.0, rng::normal(rng))
        } else {
            rng::complex_normal(rng)
        };
        let wk = w[k];
        let s = (a * a + b * b).sqrt();
        let (p, q) = if s > 0.0 { ((wk * a + z * b) / s, (wk * b - z * a) / s) } else { (wk, z) };
        out[k] = p;
        if k == 0 {
            out[n] = q;
        } else if k < half {
            out[n - k] = q.conj();
        }
    }
    out
}

/// Walks one replica through the schedule, accumulating layers.
pub struct Walker<'a> {
    ens: &'a FieldEnsemble,
    replica: usize,
    next: usize,
    spectrum: Vec<Complex64>,
    pending: Vec<Vec<Complex64>>,
}

impl<'a> Walker<'a> {
    pub fn replica(&self) -> usize {
        self.replica
    }

    /// Number of layers accumulated so far; the current time is `t_index`.
    pub fn index(&self) -> usize {
        self.next
    }

    pub fn time(&self) -> f64 {
        self.ens.schedule.t(self.next)
    }

    pub fn ensemble(&self) -> &'a FieldEnsemble {
        self.ens
    }

    /// Adds the next layer; false once the schedule is exhausted.
    pub fn advance(&mut self) -> bool {
        if self.next >= self.ens.schedule.steps {
            return false;
        }
        let per = 1usize << self.ens.config.time_level;
        if self.pending.is_empty() {
            let mut leaves = self.ens.leaf_noise(self.replica, self.next / per);
            leaves.reverse();
            self.pending = leaves;
        }
        let w = self.pending.pop().expect("leaf noise available");
        let sq = &self.ens.leaves()[self.next];
        for ((s, w), &a) in self.spectrum.iter_mut().zip(&w).zip(sq) {
            *s += w * a as f64;
        }
        self.next += 1;
        true
    }

    pub fn advance_to(&mut self, t: f64) -> Result<()> {
        let target = self
            .ens
            .schedule
            .index_of(t)
            .ok_or_else(|| SynthError::Schedule(format!("t = {t} is not a layer time")))?;
        if target < self.next {
            return Err(SynthError::Schedule(format!("walker is already past t = {t}")));
        }
        while self.next < target {
            self.advance();
        }
        Ok(())
    }

    /// Accumulated half spectrum, scaled so that `X = DFT⁻¹(S)/√(N^d)`.
    pub fn spectrum(&self) -> &[Complex64] {
        &self.spectrum
    }

    pub fn field(&self) -> Vec<f64> {
        self.synthesize(None)
    }

    pub fn mollified(&self, moll: &GridMollifier) -> Vec<f64> {
        self.synthesize(Some(moll))
    }

    fn synthesize(&self, moll: Option<&GridMollifier>) -> Vec<f64> {
        let plan = self.ens.plan();
        let sites = plan.sites();
        let mut out = vec![0.0; sites];
        match moll {
            Some(m) => {
                let spec: Vec<Complex64> = self.spectrum.iter().zip(&m.hat).map(|(s, h)| s * *h).collect();
                plan.c2r(&spec, &mut out);
            }
            None => plan.c2r(&self.spectrum, &mut out),
        }
        let scale = 1.0 / (sites as f64).sqrt();
        out.iter_mut().for_each(|v| *v *= scale);
        out
    }
}

// ---------------------------------------------------------------- measures

/// Finite signed measure `Σ w_i δ_{x_i}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteMeasure {
    pub atoms: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

/// A measure snapped to grid sites, coincident atoms merged.
#[derive(Clone, Debug, PartialEq)]
pub struct SnappedMeasure {
    pub sites: Vec<usize>,
    pub weights: Vec<f64>,
}

impl DiscreteMeasure {
    pub fn dirac(x: Vec<f64>) -> Self {
        Self { atoms: vec![x], weights: vec![1.0] }
    }

    /// `density(x)·h^d` at every site where it is nonzero.
    pub fn from_density(grid: &Grid, density: impl Fn(&[f64]) -> f64) -> Self {
        let mut atoms = Vec::new();
        let mut weights = Vec::new();
        for i in 0..grid.sites() {
            let x = grid.coord(i);
            let v = density(&x);
            if v != 0.0 {
                weights.push(v * grid.cell());
                atoms.push(x);
            }
        }
        Self { atoms, weights }
    }

    pub fn snap(&self, grid: &Grid) -> Result<SnappedMeasure> {
        if self.atoms.len() != self.weights.len() {
            return Err(SynthError::Grid("measure atoms and weights differ in length".into()));
        }
        let mut map = std::collections::BTreeMap::new();
        for (x, w) in self.atoms.iter().zip(&self.weights) {
            *map.entry(grid.snap(x)?).or_insert(0.0) += w;
        }
        let (sites, weights) = map.into_iter().unzip();
        Ok(SnappedMeasure { sites, weights })
    }
}

impl SnappedMeasure {
    pub fn pair(&self, field: &[f64]) -> f64 {
        self.sites.iter().zip(&self.weights).map(|(&i, w)| w * field[i]).sum()
    }
}

// ---------------------------------------------------------------- oracle

fn cholesky_with_jitter(gram: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = gram.nrows();
    if let Some(c) = gram.clone().cholesky() {
        return Ok(c.l());
    }
    let jitter = 1e-10 * gram.trace() / n as f64;
    let mut g = gram;
    for i in 0..n {
        g[(i, i)] += jitter;
    }
    g.cholesky()
        .map(|c| c.l())
        .ok_or_else(|| SynthError::NotPositiveDefinite(format!("Gram matrix of {n} points after jitter {jitter:.2e}")))
}

/// Exact samples of `(X_ε(x_i))_i` from the Cholesky factor of `[K_ε(x_i, x_j)]`.
pub fn cholesky_oracle(
    spec: &KernelSpec,
    moll: &Mollifier,
    eps: f64,
    points: &[Vec<f64>],
    replicas: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let n = points.len();
    if n == 0 || n > MAX_DENSE {
        return Err(SynthError::Unsupported(format!("oracle needs 1..={MAX_DENSE} points, got {n}")));
    }
    let gram = oracle_gram(spec, moll, eps, points)?;
    let l = cholesky_with_jitter(gram)?;
    Ok((0..replicas)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng::substream(&[seed, r as u64, kind::ORACLE]);
            let g = nalgebra::DVector::from_fn(n, |_, _| rng::normal(&mut rng));
            (&l * g).as_slice().to_vec()
        })
        .collect())
}

/// `[K_ε(x_i, x_j)]`, reusing values for repeated distances when K is stationary.
pub fn oracle_gram(spec: &KernelSpec, moll: &Mollifier, eps: f64, points: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = points.len();
    let mut gram = DMatrix::zeros(n, n);
    let stationary = spec.k0.is_stationary();
    let mut memo = std::collections::HashMap::new();
    for i in 0..n {
        for j in 0..=i {
            let v = if stationary {
                let key = (dist(&points[i], &points[j]) * 1e12).round() as u64;
                match memo.get(&key) {
                    Some(&v) => v,
                    None => {
                        let v = spec.k_eps(moll, &points[i], &points[j], eps)?;
                        memo.insert(key, v);
                        v
                    }
                }
            } else {
                spec.k_eps(moll, &points[i], &points[j], eps)?
            };
            gram[(i, j)] = v;
            gram[(j, i)] = v;
        }
    }
    Ok(gram)
}
