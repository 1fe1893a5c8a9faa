//! Statistical checks on chaos ensembles.
//!
//! Estimators take per-replica arrays; standard errors come from a
//! nonparametric bootstrap over replicas with per-resample substreams. The
//! orchestration functions walk each replica once and pair every statistic
//! on the same replica.

use crate::chaos::{
    gmc, intensity_functional, l_diagonal, m_omega, martingale_path, pairwise_sum, ChaosError, ComplexParam,
    TestFunction,
};
use crate::fft::FftPlan;
use crate::kernels::Mollifier;
use crate::rng::{self, kind};
use crate::scaling::{self, in_phase_iii_closure, NormConstant};
use crate::synth::{DiscreteMeasure, FieldEnsemble, Grid, GridMollifier, SynthError};
use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const BOOTSTRAP_B: usize = 500;
pub const MIN_REPLICAS: usize = 100;
/// Bias allowance added to the characteristic-function tolerance.
pub const BIAS_ALLOWANCE: f64 = 0.05;
/// Default ξ grid, in units of the inverse standard deviation of `v·M(f,ω)`.
pub const XI_BASE: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("need at least {need} replicas, got {got}")]
    TooFewReplicas { need: usize, got: usize },
    #[error("data error: {0}")]
    Data(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error(transparent)]
    Chaos(#[from] ChaosError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Scaling(#[from] scaling::ScalingError),
    #[error(transparent)]
    Kernel(#[from] crate::kernels::KernelError),
}

type Result<T> = std::result::Result<T, AnalysisError>;

// ---------------------------------------------------------------- bootstrap

/// `b` resampled statistics; resample `k` uses the substream `(seed, k)`.
pub fn bootstrap<F>(replicas: usize, b: usize, seed: u64, stat: F) -> Vec<Vec<f64>>
where
    F: Fn(&[usize]) -> Vec<f64> + Sync,
{
    (0..b)
        .into_par_iter()
        .map(|k| {
            let mut rng = rng::substream(&[seed, k as u64, kind::BOOTSTRAP]);
            let idx: Vec<usize> = (0..replicas).map(|_| rng.gen_range(0..replicas)).collect();
            stat(&idx)
        })
        .collect()
}

/// Standard deviation of column `j` across resamples.
pub fn column_sd(draws: &[Vec<f64>], j: usize) -> f64 {
    let n = draws.len() as f64;
    let m = draws.iter().map(|d| d[j]).sum::<f64>() / n;
    (draws.iter().map(|d| (d[j] - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt()
}

/// Percentile `(lo, hi)` interval of column `j`.
pub fn column_interval(draws: &[Vec<f64>], j: usize, level: f64) -> (f64, f64) {
    let mut v: Vec<f64> = draws.iter().map(|d| d[j]).collect();
    v.sort_by(|a, b| a.total_cmp(b));
    let q = |p: f64| v[((p * (v.len() - 1) as f64).round() as usize).min(v.len() - 1)];
    ((q)((1.0 - level) / 2.0), (q)((1.0 + level) / 2.0))
}

pub fn mean(xs: &[f64]) -> f64 {
    pairwise_sum(xs) / xs.len() as f64
}

pub fn std_dev(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0).max(1.0)).sqrt()
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let (mx, my) = (mean(x), mean(y));
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    sxy / (sxx * syy).sqrt()
}

// ---------------------------------------------------------------- characteristic functions

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CFEstimate {
    pub xi: Vec<f64>,
    pub phi: Vec<Complex64>,
    pub stderr: Vec<f64>,
    pub replicas: usize,
}

fn cf_values(terms: impl Fn(usize, f64) -> Complex64, idx: &[usize], xi: &[f64]) -> Vec<Complex64> {
    xi.iter()
        .map(|&x| idx.iter().fold(Complex64::default(), |acc, &r| acc + terms(r, x)) / idx.len() as f64)
        .collect()
}

fn cf_with_errors(
    replicas: usize,
    xi: &[f64],
    seed: u64,
    terms: impl Fn(usize, f64) -> Complex64 + Sync,
) -> CFEstimate {
    let all: Vec<usize> = (0..replicas).collect();
    let phi = cf_values(&terms, &all, xi);
    let draws = bootstrap(replicas, BOOTSTRAP_B, seed, |idx| {
        cf_values(&terms, idx, xi).iter().flat_map(|z| [z.re, z.im]).collect()
    });
    let stderr = (0..xi.len()).map(|k| column_sd(&draws, 2 * k).hypot(column_sd(&draws, 2 * k + 1))).collect();
    CFEstimate { xi: xi.to_vec(), phi, stderr, replicas }
}

/// `φ̂(ξ) = R⁻¹Σ e^{iξ s_r}` with bootstrap errors.
pub fn cf_estimate(samples: &[f64], xi: &[f64], seed: u64) -> Result<CFEstimate> {
    if samples.len() < MIN_REPLICAS {
        return Err(AnalysisError::TooFewReplicas { need: MIN_REPLICAS, got: samples.len() });
    }
    Ok(cf_with_errors(samples.len(), xi, seed, |r, x| Complex64::from_polar(1.0, x * samples[r])))
}

/// `R⁻¹Σ e^{−ξ²Z_r/2}`, the characteristic function of a Gaussian mixture with variances `Z_r`.
pub fn limit_cf(intensity: &[f64], xi: &[f64], seed: u64) -> Result<CFEstimate> {
    if let Some(z) = intensity.iter().find(|z| !(**z >= 0.0)) {
        return Err(AnalysisError::Data(format!("negative or undefined intensity {z}")));
    }
    if intensity.len() < MIN_REPLICAS {
        return Err(AnalysisError::TooFewReplicas { need: MIN_REPLICAS, got: intensity.len() });
    }
    Ok(cf_with_errors(intensity.len(), xi, seed, |r, x| Complex64::new((-0.5 * x * x * intensity[r]).exp(), 0.0)))
}

// ---------------------------------------------------------------- stable limit

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum TestStatus {
    Ran { pass: bool },
    Skipped { reason: String },
}

/// Per-replica inputs at one `ε`: `v·M(f,ω)`, pairings `⟨X,μ_j⟩`, intensities.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StableLimitData {
    pub eps: f64,
    pub v: f64,
    pub vm: Vec<f64>,
    pub pairings: Vec<Vec<f64>>,
    pub intensity: Vec<f64>,
    pub intensity_companion: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CfPoint {
    /// Index into the measure list; `None` for `μ = 0`.
    pub mu: Option<usize>,
    pub xi: f64,
    pub lhs: Complex64,
    pub rhs: Complex64,
    pub rhs_companion: Complex64,
    pub stderr: f64,
    pub stderr_companion: f64,
}

impl CfPoint {
    pub fn discrepancy(&self) -> f64 {
        (self.lhs - self.rhs).norm()
    }

    pub fn discrepancy_companion(&self) -> f64 {
        (self.lhs - self.rhs_companion).norm()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StableLevel {
    pub eps: f64,
    pub v: f64,
    pub vm_sd: f64,
    pub points: Vec<CfPoint>,
    pub max_discrepancy: f64,
    pub max_discrepancy_companion: f64,
    /// Largest `|LHS − RHS| − 3·stderr`.
    pub max_excess: f64,
    pub max_excess_companion: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StableLimitReport {
    pub status: TestStatus,
    pub gamma: ComplexParam,
    pub omega: f64,
    pub levels: Vec<StableLevel>,
    /// Whether the companion weight `e^{−|γ|²L}` fits strictly worse at the finest ε.
    pub companion_worse: bool,
}

/// Compares `E[e^{i⟨X,μ⟩ + iξvM}]` with `E[e^{i⟨X,μ⟩ − ξ²Z/2}]` on the same replicas.
pub fn compare_stable_limit(data: &StableLimitData, xi: &[f64], seed: u64) -> Result<StableLevel> {
    let r = data.vm.len();
    if r < MIN_REPLICAS {
        return Err(AnalysisError::TooFewReplicas { need: MIN_REPLICAS, got: r });
    }
    if data.intensity.len() != r || data.intensity_companion.len() != r || data.pairings.iter().any(|p| p.len() != r) {
        return Err(AnalysisError::Data("per-replica arrays differ in length".into()));
    }
    if data.intensity.iter().chain(&data.intensity_companion).any(|z| !(*z >= 0.0)) {
        return Err(AnalysisError::Data("negative intensity".into()));
    }
    let mus: Vec<Option<usize>> = std::iter::once(None).chain((0..data.pairings.len()).map(Some)).collect();
    let pair = |mu: Option<usize>, k: usize| mu.map_or(0.0, |j| data.pairings[j][k]);
    // per point: lhs, rhs, rhs_companion as (re, im) triples
    let stat = |idx: &[usize]| -> Vec<f64> {
        let n = idx.len() as f64;
        let mut out = Vec::with_capacity(mus.len() * xi.len() * 6);
        for &mu in &mus {
            for &x in xi {
                let (mut l, mut a, mut b) = (Complex64::default(), Complex64::default(), Complex64::default());
                for &k in idx {
                    let p = Complex64::from_polar(1.0, pair(mu, k));
                    l += p * Complex64::from_polar(1.0, x * data.vm[k]);
                    a += p * (-0.5 * x * x * data.intensity[k]).exp();
                    b += p * (-0.5 * x * x * data.intensity_companion[k]).exp();
                }
                let (l, a, b) = (l / n, a / n, b / n);
                out.extend([l.re, l.im, (l - a).re, (l - a).im, (l - b).re, (l - b).im]);
            }
        }
        out
    };
    let all: Vec<usize> = (0..r).collect();
    let full = stat(&all);
    let draws = bootstrap(r, BOOTSTRAP_B, seed, stat);
    let mut points = Vec::new();
    let mut k = 0;
    for &mu in &mus {
        for &x in xi {
            let lhs = Complex64::new(full[6 * k], full[6 * k + 1]);
            let d = Complex64::new(full[6 * k + 2], full[6 * k + 3]);
            let dc = Complex64::new(full[6 * k + 4], full[6 * k + 5]);
            points.push(CfPoint {
                mu,
                xi: x,
                lhs,
                rhs: lhs - d,
                rhs_companion: lhs - dc,
                stderr: column_sd(&draws, 6 * k + 2).hypot(column_sd(&draws, 6 * k + 3)),
                stderr_companion: column_sd(&draws, 6 * k + 4).hypot(column_sd(&draws, 6 * k + 5)),
            });
            k += 1;
        }
    }
    let fold = |f: &dyn Fn(&CfPoint) -> f64| points.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
    Ok(StableLevel {
        eps: data.eps,
        v: data.v,
        vm_sd: std_dev(&data.vm),
        max_discrepancy: fold(&|p| p.discrepancy()),
        max_discrepancy_companion: fold(&|p| p.discrepancy_companion()),
        max_excess: fold(&|p| p.discrepancy() - 3.0 * p.stderr),
        max_excess_companion: fold(&|p| p.discrepancy_companion() - 3.0 * p.stderr_companion),
        points,
    })
}

/// Inputs shared by the ensemble-driven tests.
#[derive(Clone, Debug)]
pub struct LimitSetup<'a> {
    pub mollifier: &'a Mollifier,
    pub gamma: ComplexParam,
    pub f: &'a TestFunction,
    pub omega: f64,
}

/// Walks every replica once to `t_max` and gathers [`StableLimitData`] for each `ε`.
pub fn collect_stable_limit_data(
    ens: &FieldEnsemble,
    setup: &LimitSetup<'_>,
    mus: &[DiscreteMeasure],
    eps_ladder: &[f64],
) -> Result<Vec<StableLimitData>> {
    let grid = *ens.grid();
    let gamma = setup.gamma;
    let steps = ens.schedule().steps;
    let d = grid.d;
    let snapped: Vec<_> = mus.iter().map(|m| m.snap(&grid)).collect::<std::result::Result<_, _>>()?;
    let molls: Vec<GridMollifier> =
        eps_ladder.iter().map(|&e| GridMollifier::new(setup.mollifier, &grid, e)).collect::<std::result::Result<_, _>>()?;
    let vars: Vec<Vec<f64>> = molls.iter().map(|m| ens.variance(steps, Some(m))).collect();
    let vs: Vec<NormConstant> =
        eps_ladder.iter().map(|&e| scaling::v_eps(e, setup.mollifier, &gamma)).collect::<std::result::Result<_, _>>()?;
    let l = l_diagonal(ens)?;
    let g2 = gamma.abs_sq();
    let rows: Vec<Result<(Vec<f64>, Vec<[f64; 3]>)>> = ens.map_replicas(|mut w| {
        while w.advance() {}
        let x = w.field();
        let pairs = snapped.iter().map(|s| s.pair(&x)).collect();
        let mut per_eps = Vec::with_capacity(molls.len());
        for (j, m) in molls.iter().enumerate() {
            let xe = w.mollified(m);
            let mm = gmc(&xe, &vars[j], &gamma, &setup.f.values, grid.cell())?;
            let z = intensity_functional(&xe, &vars[j], gamma.alpha, &l, g2, &setup.f.values, grid.cell(), d)?;
            let zc = intensity_functional(&xe, &vars[j], gamma.alpha, &l, -g2, &setup.f.values, grid.cell(), d)?;
            per_eps.push([vs[j].value * m_omega(mm, setup.omega), z, zc]);
        }
        Ok((pairs, per_eps))
    });
    let rows: Vec<(Vec<f64>, Vec<[f64; 3]>)> = rows.into_iter().collect::<Result<_>>()?;
    Ok(eps_ladder
        .iter()
        .enumerate()
        .map(|(j, &eps)| StableLimitData {
            eps,
            v: vs[j].value,
            vm: rows.iter().map(|r| r.1[j][0]).collect(),
            pairings: (0..mus.len()).map(|m| rows.iter().map(|r| r.0[m]).collect()).collect(),
            intensity: rows.iter().map(|r| r.1[j][1]).collect(),
            intensity_companion: rows.iter().map(|r| r.1[j][2]).collect(),
        })
        .collect())
}

/// Runs the stable-convergence comparison on every `ε` of the ladder.
pub fn stable_limit_test(
    ens: &FieldEnsemble,
    setup: &LimitSetup<'_>,
    mus: &[DiscreteMeasure],
    eps_ladder: &[f64],
    seed: u64,
) -> Result<StableLimitReport> {
    let d = ens.grid().d;
    let skip = |reason: String| StableLimitReport {
        status: TestStatus::Skipped { reason },
        gamma: setup.gamma,
        omega: setup.omega,
        levels: Vec::new(),
        companion_worse: false,
    };
    if !in_phase_iii_closure(&setup.gamma, d) {
        return Ok(skip(format!("out of phase: γ = {:?} is not in the closure of phase III", setup.gamma)));
    }
    let finest = eps_ladder.iter().cloned().fold(f64::INFINITY, f64::min);
    setup.f.check_support(ens.grid(), 2.0 * eps_ladder.iter().cloned().fold(0.0, f64::max))?;
    let data = collect_stable_limit_data(ens, setup, mus, eps_ladder)?;
    let mut levels = Vec::new();
    for dat in &data {
        let sd = std_dev(&dat.vm);
        let xi: Vec<f64> = XI_BASE.iter().map(|b| b / sd).collect();
        levels.push(compare_stable_limit(dat, &xi, seed)?);
    }
    let fin = levels.iter().find(|l| l.eps == finest).expect("finest level present");
    let pass = fin.max_excess <= BIAS_ALLOWANCE;
    let companion_worse = fin.max_discrepancy_companion > fin.max_discrepancy;
    Ok(StableLimitReport {
        status: TestStatus::Ran { pass },
        gamma: setup.gamma,
        omega: setup.omega,
        companion_worse,
        levels,
    })
}

// ---------------------------------------------------------------- scaling fits

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentFit {
    pub eps: Vec<f64>,
    pub moments: Vec<f64>,
    pub moment_stderr: Vec<f64>,
    /// Slope of `log E|M|²` against `log ε`.
    pub slope: f64,
    pub slope_ci: (f64, f64),
    /// Slope and `R²` of `E|M|²` against `log(1/ε)`.
    pub log_slope: f64,
    pub log_r2: f64,
}

fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let (mx, my) = (mean(x), mean(y));
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let slope = sxy / sxx;
    let icpt = my - slope * mx;
    let ss_res: f64 = x.iter().zip(y).map(|(a, b)| (b - icpt - slope * a).powi(2)).sum();
    let ss_tot: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    (slope, icpt, 1.0 - ss_res / ss_tot)
}

/// Fits `E|M_ε|²` over a geometric ladder from per-replica `|M_ε|²` columns.
pub fn second_moment_fit(eps: &[f64], abs_sq: &[Vec<f64>], seed: u64) -> Result<MomentFit> {
    if eps.len() < 4 || abs_sq.len() != eps.len() {
        return Err(AnalysisError::Invalid("need at least four ε values with one column each".into()));
    }
    let ratio = eps[1] / eps[0];
    if eps.windows(2).any(|w| ((w[1] / w[0]) / ratio - 1.0).abs() > 1e-9) {
        return Err(AnalysisError::Invalid("ε ladder must be geometric".into()));
    }
    let r = abs_sq[0].len();
    let moments: Vec<f64> = abs_sq.iter().map(|c| mean(c)).collect();
    if moments.iter().any(|m| !(*m > 0.0)) {
        return Err(AnalysisError::Data("nonpositive moment estimate".into()));
    }
    let lx: Vec<f64> = eps.iter().map(|e| e.ln()).collect();
    let ly: Vec<f64> = moments.iter().map(|m| m.ln()).collect();
    let (slope, _, _) = linear_fit(&lx, &ly);
    let inv: Vec<f64> = eps.iter().map(|e| -e.ln()).collect();
    let (log_slope, _, log_r2) = linear_fit(&inv, &moments);
    let draws = bootstrap(r, BOOTSTRAP_B, seed, |idx| {
        let m: Vec<f64> = abs_sq.iter().map(|c| (idx.iter().map(|&k| c[k]).sum::<f64>() / r as f64).ln()).collect();
        vec![linear_fit(&lx, &m).0]
    });
    let moment_stderr = abs_sq.iter().map(|c| std_dev(c) / (r as f64).sqrt()).collect();
    Ok(MomentFit {
        eps: eps.to_vec(),
        moments,
        moment_stderr,
        slope,
        slope_ci: column_interval(&draws, 0, 0.95),
        log_slope,
        log_r2,
    })
}

/// `|M_ε(f)|²` per replica for every `ε`, one walk per replica.
pub fn chaos_abs_sq(
    ens: &FieldEnsemble,
    mollifier: &Mollifier,
    gamma: &ComplexParam,
    f: &TestFunction,
    eps: &[f64],
) -> Result<Vec<Vec<f64>>> {
    let grid = *ens.grid();
    let steps = ens.schedule().steps;
    let molls: Vec<GridMollifier> =
        eps.iter().map(|&e| GridMollifier::new(mollifier, &grid, e)).collect::<std::result::Result<_, _>>()?;
    let vars: Vec<Vec<f64>> = molls.iter().map(|m| ens.variance(steps, Some(m))).collect();
    let rows: Vec<Result<Vec<f64>>> = ens.map_replicas(|mut w| {
        while w.advance() {}
        molls
            .iter()
            .zip(&vars)
            .map(|(m, v)| Ok(gmc(&w.mollified(m), v, gamma, &f.values, grid.cell())?.norm_sqr()))
            .collect()
    });
    let rows: Vec<Vec<f64>> = rows.into_iter().collect::<Result<_>>()?;
    Ok((0..eps.len()).map(|j| rows.iter().map(|r| r[j]).collect()).collect())
}

// ---------------------------------------------------------------- quadratic variation

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QvMode {
    /// `v̄(t)²⟨N⟩_t` for the unmollified martingale.
    Martingale,
    /// `v(ε)²⟨N^{(ε)}⟩_∞` for the mollified martingale.
    Convolution,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QvCheckpoint {
    pub t: f64,
    pub normalization: f64,
    pub pearson: f64,
    pub mean_ratio: f64,
    /// Ensemble average of `|ℜ(e^{−2iω}γ²∫B)|/(|γ|²∫A)`.
    pub b_share: f64,
    /// `E[Σ(ΔN)²]/E[∫bracket] − 1`.
    pub estimator_gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QvReport {
    pub status: TestStatus,
    pub mode: QvMode,
    pub eps: Option<f64>,
    pub checkpoints: Vec<QvCheckpoint>,
    /// Per-replica normalized brackets and intensities at the last checkpoint.
    pub brackets: Vec<f64>,
    pub intensity: Vec<f64>,
}

/// Normalized bracket against the same-replica intensity at each checkpoint
/// time (martingale mode), or at `t_max` with mollifier `ε` (convolution mode).
pub fn qv_lln_test(
    ens: &FieldEnsemble,
    setup: &LimitSetup<'_>,
    mode: QvMode,
    eps: Option<f64>,
    checkpoints: &[f64],
) -> Result<QvReport> {
    let grid = *ens.grid();
    let gamma = setup.gamma;
    let d = grid.d;
    let sched = *ens.schedule();
    let skip = |reason: String| QvReport {
        status: TestStatus::Skipped { reason },
        mode,
        eps,
        checkpoints: Vec::new(),
        brackets: Vec::new(),
        intensity: Vec::new(),
    };
    if !in_phase_iii_closure(&gamma, d) {
        return Ok(skip(format!("out of phase: γ = {gamma:?} is not in the closure of phase III")));
    }
    let gm = match mode {
        QvMode::Martingale => None,
        QvMode::Convolution => {
            let e = eps.ok_or_else(|| AnalysisError::Invalid("convolution mode needs ε".into()))?;
            Some(GridMollifier::new(setup.mollifier, &grid, e)?)
        }
    };
    let idx: Vec<usize> = match mode {
        QvMode::Martingale => checkpoints
            .iter()
            .map(|&t| sched.index_of(t).ok_or_else(|| AnalysisError::Invalid(format!("t = {t} is not a layer time"))))
            .collect::<Result<_>>()?,
        QvMode::Convolution => vec![sched.steps],
    };
    let last = *idx.iter().max().ok_or_else(|| AnalysisError::Invalid("no checkpoints".into()))?;
    let norms: Vec<f64> = match mode {
        QvMode::Martingale => idx
            .iter()
            .map(|&i| scaling::v_bar(sched.t(i), &ens.config().kernel.kappa, &gamma).map(|v| v.value))
            .collect::<std::result::Result<_, _>>()?,
        QvMode::Convolution => vec![scaling::v_eps(eps.unwrap(), setup.mollifier, &gamma)?.value],
    };
    let l = l_diagonal(ens)?;
    let vars: Vec<Vec<f64>> = idx.iter().map(|&i| ens.variance(i, gm.as_ref())).collect();
    let rows: Vec<Result<Vec<[f64; 4]>>> = ens.map_replicas(|w| {
        let mut fields = Vec::with_capacity(idx.len());
        let path = {
            // re-walk to capture the field at each checkpoint
            let mut w2 = ens.walker(w.replica());
            for &i in &idx {
                while w2.index() < i {
                    w2.advance();
                }
                fields.push(match &gm {
                    Some(m) => w2.mollified(m),
                    None => w2.field(),
                });
            }
            martingale_path(w, gm.as_ref(), &gamma, setup.f, setup.omega, last, true)?
        };
        let br = path.brackets.as_ref().expect("bracket integrands requested");
        idx.iter()
            .enumerate()
            .map(|(k, &i)| {
                let z = intensity_functional(&fields[k], &vars[k], gamma.alpha, &l, gamma.abs_sq(), &setup.f.values, grid.cell(), d)?;
                let (ia, ib) = br.parts(&gamma, setup.omega, i);
                Ok([br.bracket(&gamma, setup.omega, i), z, ib.abs() / ia, path.squared_increments(i)])
            })
            .collect()
    });
    let rows: Vec<Vec<[f64; 4]>> = rows.into_iter().collect::<Result<_>>()?;
    let mut cps = Vec::new();
    for (k, &i) in idx.iter().enumerate() {
        let v2 = norms[k] * norms[k];
        let b: Vec<f64> = rows.iter().map(|r| v2 * r[k][0]).collect();
        let z: Vec<f64> = rows.iter().map(|r| r[k][1]).collect();
        let share = mean(&rows.iter().map(|r| r[k][2]).collect::<Vec<_>>());
        let sq = mean(&rows.iter().map(|r| r[k][3]).collect::<Vec<_>>());
        let raw = mean(&rows.iter().map(|r| r[k][0]).collect::<Vec<_>>());
        cps.push(QvCheckpoint {
            t: sched.t(i),
            normalization: norms[k],
            pearson: pearson(&b, &z),
            mean_ratio: mean(&b) / mean(&z),
            b_share: share,
            estimator_gap: sq / raw - 1.0,
        });
    }
    let k = idx.len() - 1;
    let v2 = norms[k] * norms[k];
    let fin = cps.last().expect("at least one checkpoint");
    let pass = fin.pearson >= 0.95 && (0.85..=1.15).contains(&fin.mean_ratio);
    Ok(QvReport {
        status: TestStatus::Ran { pass },
        mode,
        eps,
        brackets: rows.iter().map(|r| v2 * r[k][0]).collect(),
        intensity: rows.iter().map(|r| r[k][1]).collect(),
        checkpoints: cps,
    })
}

// ---------------------------------------------------------------- Sobolev diagnostics

/// `M̂(ξ_k + a·e₁) = Σ_x M(x)e^{−i(ξ_k + a e₁)·x}h^d` at `ξ_k = 2πk/side`, full layout.
pub fn fourier_transform(grid: &Grid, plan: &FftPlan, values: &[Complex64], shift: f64) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = values
        .iter()
        .enumerate()
        .map(|(i, v)| if shift == 0.0 { *v } else { v * Complex64::from_polar(1.0, -shift * grid.coord(i)[0]) })
        .collect();
    plan.fft_complex(&mut buf);
    let c = grid.cell();
    buf.iter_mut().for_each(|z| *z *= c);
    buf
}

/// Signed angular frequency vector of full-layout index `k`.
pub fn frequency(grid: &Grid, k: usize) -> Vec<f64> {
    let n = grid.n as i64;
    let w = |i: i64| (if i > n / 2 { i - n } else { i }) as f64 * 2.0 * std::f64::consts::PI / grid.side;
    if grid.d == 1 {
        vec![w(k as i64)]
    } else {
        vec![w((k / grid.n) as i64), w((k % grid.n) as i64)]
    }
}

/// `(2π)^{−d}∫(1+|ξ|²)^{−u}|M̂(ξ)|²dξ` as a lattice sum, so that `u = 0` gives `‖M‖²_{L²}`.
pub fn sobolev_norm_sq(grid: &Grid, mhat: &[Complex64], u: f64) -> f64 {
    let cell = grid.side.powi(-(grid.d as i32));
    let terms: Vec<f64> = (0..mhat.len())
        .map(|k| {
            let xi2: f64 = frequency(grid, k).iter().map(|x| x * x).sum();
            (1.0 + xi2).powf(-u) * mhat[k].norm_sqr() * cell
        })
        .collect();
    pairwise_sum(&terms)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SobolevProfile {
    pub u: f64,
    pub eps: Vec<f64>,
    /// `E‖vM_ε‖²_{H^{−u}}` per ε.
    pub norms: Vec<f64>,
    /// Frequencies `ξ_k`, `k = 0..kmax` along the first axis.
    pub xi: Vec<f64>,
    /// `E[v²|M̂_ε(ξ_k)|²]`, indexed `[ε][k]`.
    pub moments: Vec<Vec<f64>>,
    /// Shifts `a`.
    pub shifts: Vec<f64>,
    /// `E[v²|M̂_ε(ξ_k + a)−M̂_ε(ξ_k)|²]/a²`, indexed `[ε][a][k]`.
    pub increments: Vec<Vec<Vec<f64>>>,
    /// `E Σ_{|ξ|>ξ_tail}(1+|ξ|²)^{−u}v²|M̂_ε|²/side^d` per ε.
    pub tail_mass: Vec<f64>,
    pub tail_cut: f64,
}

impl SobolevProfile {
    /// `max/min` across ε of `sup_k E[v²|M̂_ε(ξ_k)|²]`.
    pub fn moment_spread(&self) -> f64 {
        let sups: Vec<f64> = self.moments.iter().map(|m| m.iter().cloned().fold(0.0, f64::max)).collect();
        sups.iter().cloned().fold(0.0, f64::max) / sups.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn norm_spread(&self) -> f64 {
        self.norms.iter().cloned().fold(0.0, f64::max) / self.norms.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// Largest increment ratio over ε, a and ξ.
    pub fn max_increment(&self) -> f64 {
        self.increments.iter().flatten().flatten().cloned().fold(0.0, f64::max)
    }
}

/// Fourier moments of `v(ε)M_ε(ρ·)` with density `ρf e^{γX_ε − γ²K_ε/2}`.
pub fn sobolev_diagnostics(
    ens: &FieldEnsemble,
    setup: &LimitSetup<'_>,
    eps: &[f64],
    u: f64,
    shifts: &[f64],
    kmax: usize,
) -> Result<SobolevProfile> {
    let grid = *ens.grid();
    if !(u > grid.d as f64 / 2.0) {
        return Err(AnalysisError::Invalid(format!("u = {u} must exceed d/2")));
    }
    let kmax = kmax.min(grid.n / 2);
    let steps = ens.schedule().steps;
    let molls: Vec<GridMollifier> =
        eps.iter().map(|&e| GridMollifier::new(setup.mollifier, &grid, e)).collect::<std::result::Result<_, _>>()?;
    let vars: Vec<Vec<f64>> = molls.iter().map(|m| ens.variance(steps, Some(m))).collect();
    let vs: Vec<f64> = eps
        .iter()
        .map(|&e| scaling::v_eps(e, setup.mollifier, &setup.gamma).map(|v| v.value))
        .collect::<std::result::Result<_, _>>()?;
    let tail_cut = 2.0 * std::f64::consts::PI / grid.side * kmax as f64;
    let cell = grid.side.powi(-(grid.d as i32));
    let index = |k: usize| if grid.d == 1 { k } else { k * grid.n };
    // per replica, per ε: [norm, tail, moments(kmax), increments(shifts × kmax)]
    let width = 2 + kmax + shifts.len() * kmax;
    let rows: Vec<Result<Vec<Vec<f64>>>> = ens.map_replicas(|mut w| {
        while w.advance() {}
        let mut out = Vec::with_capacity(eps.len());
        for (j, m) in molls.iter().enumerate() {
            let x = w.mollified(m);
            let dens = crate::chaos::weights(&x, &vars[j], &setup.gamma, &setup.f.values)?;
            let dens: Vec<Complex64> = dens.iter().map(|z| z * vs[j]).collect();
            let mh = fourier_transform(&grid, ens.plan(), &dens, 0.0);
            let mut row = Vec::with_capacity(width);
            row.push(sobolev_norm_sq(&grid, &mh, u));
            let tail: f64 = (0..mh.len())
                .filter_map(|k| {
                    let xi2: f64 = frequency(&grid, k).iter().map(|x| x * x).sum();
                    (xi2.sqrt() > tail_cut).then(|| (1.0 + xi2).powf(-u) * mh[k].norm_sqr() * cell)
                })
                .sum();
            row.push(tail);
            row.extend((0..kmax).map(|k| mh[index(k)].norm_sqr()));
            for &a in shifts {
                let sh = fourier_transform(&grid, ens.plan(), &dens, a);
                row.extend((0..kmax).map(|k| (sh[index(k)] - mh[index(k)]).norm_sqr() / (a * a)));
            }
            out.push(row);
        }
        Ok(out)
    });
    let rows: Vec<Vec<Vec<f64>>> = rows.into_iter().collect::<Result<_>>()?;
    let avg = |j: usize, c: usize| rows.iter().map(|r| r[j][c]).sum::<f64>() / rows.len() as f64;
    Ok(SobolevProfile {
        u,
        eps: eps.to_vec(),
        norms: (0..eps.len()).map(|j| avg(j, 0)).collect(),
        tail_mass: (0..eps.len()).map(|j| avg(j, 1)).collect(),
        xi: (0..kmax).map(|k| 2.0 * std::f64::consts::PI * k as f64 / grid.side).collect(),
        moments: (0..eps.len()).map(|j| (0..kmax).map(|k| avg(j, 2 + k)).collect()).collect(),
        shifts: shifts.to_vec(),
        increments: (0..eps.len())
            .map(|j| (0..shifts.len()).map(|s| (0..kmax).map(|k| avg(j, 2 + kmax + s * kmax + k)).collect()).collect())
            .collect(),
        tail_cut,
    })
}

// ---------------------------------------------------------------- two-sample test

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyTest {
    pub statistic: f64,
    pub p_value: f64,
    pub permutations: usize,
}

/// Energy-distance two-sample test with a permutation p-value.
pub fn energy_distance_test(x: &[Vec<f64>], y: &[Vec<f64>], permutations: usize, seed: u64) -> Result<EnergyTest> {
    let (n, m) = (x.len(), y.len());
    if n < 2 || m < 2 {
        return Err(AnalysisError::Invalid("each sample needs at least two points".into()));
    }
    let dim = x[0].len();
    if x.iter().chain(y).any(|p| p.len() != dim) {
        return Err(AnalysisError::Invalid("samples differ in dimension".into()));
    }
    let pts: Vec<&[f64]> = x.iter().chain(y).map(|p| p.as_slice()).collect();
    let total = n + m;
    // packed lower triangle of pairwise distances
    let dists: Vec<Vec<f32>> = (0..total)
        .into_par_iter()
        .map(|i| {
            (0..i)
                .map(|j| pts[i].iter().zip(pts[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() as f32)
                .collect()
        })
        .collect();
    let stat = |label: &[bool]| -> f64 {
        let (mut sxx, mut syy, mut sxy) = (0.0f64, 0.0f64, 0.0f64);
        for i in 0..total {
            let (mut a, mut b) = (0.0f64, 0.0f64);
            for (j, &dv) in dists[i].iter().enumerate() {
                if label[j] {
                    a += dv as f64;
                } else {
                    b += dv as f64;
                }
            }
            if label[i] {
                sxx += a;
                sxy += b;
            } else {
                syy += b;
                sxy += a;
            }
        }
        let (nf, mf) = (n as f64, m as f64);
        2.0 * sxy / (nf * mf) - 2.0 * sxx / (nf * nf) - 2.0 * syy / (mf * mf)
    };
    let labels: Vec<bool> = (0..total).map(|i| i < n).collect();
    let observed = stat(&labels);
    let exceed = (0..permutations)
        .into_par_iter()
        .filter(|&k| {
            use rand::seq::SliceRandom;
            let mut rng = rng::substream(&[seed, k as u64, kind::BOOTSTRAP, 1]);
            let mut l = labels.clone();
            l.shuffle(&mut rng);
            stat(&l) >= observed
        })
        .count();
    Ok(EnergyTest {
        statistic: observed * (n * m) as f64 / total as f64,
        p_value: (1 + exceed) as f64 / (1 + permutations) as f64,
        permutations,
    })
}
