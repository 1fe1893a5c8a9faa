use gmclab_core::analysis::*;
use gmclab_core::chaos::{ComplexParam, TestFunction};
use gmclab_core::fft::FftPlan;
use gmclab_core::kernels::{Domain, KernelSpec, Mollifier};
use gmclab_core::rng;
use gmclab_core::synth::*;
use num_complex::Complex64;

const SIDE: f64 = 2.5;

fn ensemble(n: usize, replicas: usize, seed: u64) -> FieldEnsemble {
    let grid = Grid::new(1, n, SIDE).unwrap();
    let spec = KernelSpec::star(1, Domain::cube(1, 0.0, SIDE)).unwrap();
    let sched = LayerSchedule::for_grid(&grid, &spec, LayerSchedule::DEFAULT_DT).unwrap();
    FieldEnsemble::new(EnsembleConfig::new(spec, grid, sched, replicas, seed)).unwrap()
}

fn normals(n: usize, seed: u64) -> Vec<f64> {
    let mut r = rng::substream(&[seed, rng::kind::AUX]);
    (0..n).map(|_| rng::normal(&mut r)).collect()
}

#[test]
fn cf_at_zero_and_symmetry() {
    let g = normals(400, 1);
    let sym: Vec<f64> = g.iter().flat_map(|x| [*x, -*x]).collect();
    let cf = cf_estimate(&sym, &[0.0, 0.5, 1.0, 2.0], 3).unwrap();
    assert_eq!(cf.phi[0], Complex64::new(1.0, 0.0));
    assert!(cf.phi.iter().all(|z| z.im == 0.0));
    assert_eq!(cf.stderr[0], 0.0);
}

#[test]
fn cf_of_gaussian() {
    let g = normals(4000, 2);
    let xi = [0.25, 0.5, 1.0, 2.0];
    let cf = cf_estimate(&g, &xi, 4).unwrap();
    for (k, x) in xi.iter().enumerate() {
        let want = (-x * x / 2.0).exp();
        assert!((cf.phi[k] - want).norm() < 3.0 * cf.stderr[k] + 1e-3, "ξ={x}: {:?}", cf.phi[k]);
        assert!(cf.stderr[k] > 0.0 && cf.stderr[k] < 0.05);
    }
    assert!(matches!(cf_estimate(&g[..50], &xi, 4), Err(AnalysisError::TooFewReplicas { .. })));
}

#[test]
fn limit_cf_cases() {
    let z = vec![2.0; 200];
    let cf = limit_cf(&z, &[0.0, 1.0, 3.0], 0).unwrap();
    assert_eq!(cf.phi[0].re, 1.0);
    assert!((cf.phi[1].re - (-1.0f64).exp()).abs() < 1e-14);
    assert!((cf.phi[2].re - (-9.0f64).exp()).abs() < 1e-14);
    let mut bad = z.clone();
    bad[7] = -1e-3;
    assert!(matches!(limit_cf(&bad, &[1.0], 0), Err(AnalysisError::Data(_))));
}

#[test]
fn bootstrap_is_deterministic() {
    let xs = normals(300, 5);
    let stat = |idx: &[usize]| vec![idx.iter().map(|&i| xs[i]).sum::<f64>() / idx.len() as f64];
    let a = bootstrap(xs.len(), 200, 9, stat);
    let b = bootstrap(xs.len(), 200, 9, stat);
    assert_eq!(a, b);
    let se = column_sd(&a, 0);
    assert!((se * (300f64).sqrt() - 1.0).abs() < 0.15, "bootstrap se {se}");
}

fn mixture_data(r: usize, seed: u64) -> StableLimitData {
    let g = normals(r, seed);
    let p = normals(r, seed + 1);
    let e = normals(r, seed + 2);
    let intensity: Vec<f64> = e.iter().map(|x| 0.5 + x * x).collect();
    StableLimitData {
        eps: 0.1,
        v: 1.0,
        vm: g.iter().zip(&intensity).map(|(g, z)| g * z.sqrt()).collect(),
        pairings: vec![p.iter().zip(&e).map(|(p, e)| 0.5 * p + 0.5 * e).collect()],
        intensity_companion: intensity.iter().map(|z| 4.0 * z).collect(),
        intensity,
    }
}

#[test]
fn stable_comparison_on_a_gaussian_mixture() {
    let data = mixture_data(3000, 10);
    let sd = std_dev(&data.vm);
    let xi: Vec<f64> = XI_BASE.iter().map(|b| b / sd).collect();
    let lvl = compare_stable_limit(&data, &xi, 11).unwrap();
    assert_eq!(lvl.points.len(), 2 * xi.len());
    assert!(lvl.max_excess <= BIAS_ALLOWANCE, "excess {}", lvl.max_excess);
    assert!(lvl.max_discrepancy_companion > lvl.max_discrepancy);
    assert!(lvl.max_excess_companion > 0.0);
}

#[test]
fn stable_comparison_rejects_bad_data() {
    let mut data = mixture_data(200, 12);
    data.intensity[3] = -1.0;
    assert!(matches!(compare_stable_limit(&data, &[1.0], 0), Err(AnalysisError::Data(_))));
    let mut data = mixture_data(200, 12);
    data.pairings[0].pop();
    assert!(compare_stable_limit(&data, &[1.0], 0).is_err());
}

#[test]
fn moment_fit_recovers_slopes() {
    let eps: Vec<f64> = (0..6).map(|k| 0.2 * 0.5f64.powi(k)).collect();
    let cols: Vec<Vec<f64>> = eps
        .iter()
        .enumerate()
        .map(|(k, e)| normals(2000, 20 + k as u64).iter().map(|g| g * g / e).collect())
        .collect();
    let fit = second_moment_fit(&eps, &cols, 1).unwrap();
    assert!((fit.slope + 1.0).abs() < 0.05, "slope {}", fit.slope);
    assert!(fit.slope_ci.0 < -1.0 && fit.slope_ci.1 > -1.0, "{:?}", fit.slope_ci);

    let cols: Vec<Vec<f64>> = eps
        .iter()
        .enumerate()
        .map(|(k, e)| normals(4000, 40 + k as u64).iter().map(|g| g * g * (1.0 / e).ln()).collect())
        .collect();
    let fit = second_moment_fit(&eps, &cols, 1).unwrap();
    assert!(fit.log_r2 > 0.95 && (fit.log_slope - 1.0).abs() < 0.1, "{fit:?}");

    let bad = [0.1, 0.05, 0.02, 0.01];
    assert!(second_moment_fit(&bad, &cols[..4], 0).is_err());
}

#[test]
fn fourier_transform_and_parseval() {
    let grid = Grid::new(1, 256, SIDE).unwrap();
    let plan = FftPlan::new(1, 256);
    let vals: Vec<Complex64> = normals(512, 30).chunks(2).map(|c| Complex64::new(c[0], c[1])).collect();
    let mh = fourier_transform(&grid, &plan, &vals, 0.0);
    let direct: f64 = vals.iter().map(|v| v.norm_sqr()).sum::<f64>() * grid.cell();
    assert!((sobolev_norm_sq(&grid, &mh, 0.0) / direct - 1.0).abs() < 1e-12);
    // a shift by one lattice frequency moves the index by one
    let a = 2.0 * std::f64::consts::PI / SIDE;
    let sh = fourier_transform(&grid, &plan, &vals, a);
    for k in 0..10 {
        assert!((sh[k] - mh[k + 1]).norm() < 1e-10 * mh[k + 1].norm().max(1.0));
    }
    let xi: Vec<f64> = (0..5).map(|k| frequency(&grid, k)[0]).collect();
    assert!((xi[3] - 3.0 * a).abs() < 1e-12);
    assert!((frequency(&grid, 255)[0] + a).abs() < 1e-12);
}

#[test]
fn energy_test_separates_shifted_samples() {
    let sample = |seed: u64, shift: f64| -> Vec<Vec<f64>> {
        normals(1200, seed).chunks(3).map(|c| c.iter().map(|x| x + shift).collect()).collect()
    };
    let same = energy_distance_test(&sample(1, 0.0), &sample(2, 0.0), 99, 5).unwrap();
    assert!(same.p_value > 0.01, "{same:?}");
    let diff = energy_distance_test(&sample(1, 0.0), &sample(3, 0.4), 99, 5).unwrap();
    assert!(diff.p_value <= 0.02, "{diff:?}");
    assert!(diff.statistic > same.statistic);
}

#[test]
fn out_of_phase_tests_are_skipped() {
    let ens = ensemble(256, 10, 1);
    let grid = *ens.grid();
    let f = TestFunction::bump(&grid, &[1.25], 0.6, 1.0);
    let m = Mollifier::standard(1);
    let setup = LimitSetup { mollifier: &m, gamma: ComplexParam::new(0.2, 0.3), f: &f, omega: 0.0 };
    let rep = stable_limit_test(&ens, &setup, &[], &[0.1], 0).unwrap();
    assert!(matches!(rep.status, TestStatus::Skipped { .. }));
    let rep = qv_lln_test(&ens, &setup, QvMode::Martingale, None, &[ens.schedule().t(10)]).unwrap();
    assert!(matches!(rep.status, TestStatus::Skipped { .. }));
}

#[test]
fn small_ensemble_runs_end_to_end() {
    let ens = ensemble(512, 120, 7);
    let grid = *ens.grid();
    let f = TestFunction::bump(&grid, &[1.25], 0.6, 1.0);
    let m = Mollifier::standard(1);
    let gamma = ComplexParam::new(0.5, 1.2);
    let setup = LimitSetup { mollifier: &m, gamma, f: &f, omega: 0.3 };
    let h = grid.h();
    let mu = DiscreteMeasure::from_density(&grid, |x| 0.3 * (-(x[0] - 1.0).powi(2) / 0.02).exp());
    let rep = stable_limit_test(&ens, &setup, &[mu], &[16.0 * h, 8.0 * h], 3).unwrap();
    assert!(matches!(rep.status, TestStatus::Ran { .. }));
    assert_eq!(rep.levels.len(), 2);
    assert_eq!(rep.levels[0].points.len(), 2 * XI_BASE.len());

    let s = ens.schedule();
    let cps = [s.t(s.steps / 2), s.t(s.steps)];
    let qv = qv_lln_test(&ens, &setup, QvMode::Martingale, None, &cps).unwrap();
    assert_eq!(qv.checkpoints.len(), 2);
    assert_eq!(qv.brackets.len(), 120);
    assert!(qv.checkpoints.iter().all(|c| c.pearson > 0.5 && c.estimator_gap.abs() < 0.2), "{:?}", qv.checkpoints);
    let qc = qv_lln_test(&ens, &setup, QvMode::Convolution, Some(8.0 * h), &[]).unwrap();
    assert_eq!(qc.checkpoints.len(), 1);

    let prof = sobolev_diagnostics(&ens, &setup, &[16.0 * h, 8.0 * h], 1.0, &[1.0, 0.5], 8).unwrap();
    assert_eq!(prof.moments.len(), 2);
    assert_eq!(prof.increments[0].len(), 2);
    assert!(prof.norms.iter().all(|n| *n > 0.0));
    assert!(prof.tail_mass.iter().zip(&prof.norms).all(|(t, n)| t < n));
    assert!(matches!(
        sobolev_diagnostics(&ens, &setup, &[8.0 * h], 0.5, &[1.0], 4),
        Err(AnalysisError::Invalid(_))
    ));
}
