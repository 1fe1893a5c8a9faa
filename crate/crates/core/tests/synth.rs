use gmclab_core::kernels::{Domain, KernelSpec, Mollifier, ScaleKernel, SmoothKernel};
use gmclab_core::synth::*;

const SIDE: f64 = 2.5;

fn star1(n: usize, replicas: usize, seed: u64) -> FieldEnsemble {
    let grid = Grid::new(1, n, SIDE).unwrap();
    let spec = KernelSpec::star(1, Domain::cube(1, 0.0, SIDE)).unwrap();
    let sched = LayerSchedule::for_grid(&grid, &spec, LayerSchedule::DEFAULT_DT).unwrap();
    FieldEnsemble::new(EnsembleConfig::new(spec, grid, sched, replicas, seed)).unwrap()
}

fn moments(x: &[f64], y: &[f64]) -> (f64, f64) {
    // sample covariance of mean-zero data and its standard error
    let n = x.len() as f64;
    let prods: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let m = prods.iter().sum::<f64>() / n;
    let v = prods.iter().map(|p| (p - m) * (p - m)).sum::<f64>() / (n - 1.0);
    (m, (v / n).sqrt())
}

#[test]
fn variance_and_covariance_match_k_t() {
    let ens = star1(4096, 2000, 7);
    let sched = *ens.schedule();
    let spec = ens.config().kernel.clone();
    let h = ens.grid().h();
    let (i0, j0) = (1000usize, 1008usize);
    let times = [2.0, 5.0, sched.t_max()];
    let idx: Vec<usize> = times.iter().map(|&t| (t / sched.delta_t).round() as usize).collect();
    let rows = ens.map_replicas(|mut w| {
        idx.iter()
            .map(|&i| {
                while w.index() < i {
                    w.advance();
                }
                let x = w.field();
                (x[i0], x[j0])
            })
            .collect::<Vec<_>>()
    });
    for (k, &i) in idx.iter().enumerate() {
        let t = sched.t(i);
        let xs: Vec<f64> = rows.iter().map(|r| r[k].0).collect();
        let ys: Vec<f64> = rows.iter().map(|r| r[k].1).collect();
        let (var, se_v) = moments(&xs, &xs);
        let (cov, se_c) = moments(&xs, &ys);
        let (x, y) = ([i0 as f64 * h], [j0 as f64 * h]);
        let want_v = spec.k_t(&x, &x, t).unwrap();
        let want_c = spec.k_t(&x, &y, t).unwrap();
        assert!((var - want_v).abs() < 3.0 * se_v, "t={t}: var {var} vs {want_v} ± {se_v}");
        assert!((cov - want_c).abs() < 3.0 * se_c, "t={t}: cov {cov} vs {want_c} ± {se_c}");
    }
}

#[test]
fn mollified_variance_matches_k_eps_and_decreases() {
    let ens = star1(1024, 2000, 11);
    let spec = ens.config().kernel.clone();
    let moll = Mollifier::standard(1);
    let h = ens.grid().h();
    let t = ens.schedule().t_max();
    let mut prev = f64::INFINITY;
    for k in [8.0, 16.0, 32.0] {
        let gm = GridMollifier::new(&moll, ens.grid(), k * h).unwrap();
        let fields = ens.mollify(&gm, t).unwrap();
        let xs: Vec<f64> = fields.iter().map(|f| f[512]).collect();
        let (var, se) = moments(&xs, &xs);
        let lattice = ens.variance(ens.schedule().steps, Some(&gm))[512];
        assert!(lattice < prev);
        prev = lattice;
        if k == 16.0 {
            let x = [512.0 * h];
            let want = spec.k_eps(&moll, &x, &x, k * h).unwrap();
            assert!((var - want).abs() < 3.0 * se, "var {var} vs K_eps {want} ± {se}");
            assert!((lattice - want).abs() < 0.02 * want, "lattice {lattice} vs {want}");
        }
    }
}

#[test]
fn mollifying_a_constant_is_identity() {
    let grid = Grid::new(1, 256, SIDE).unwrap();
    let gm = GridMollifier::new(&Mollifier::standard(1), &grid, 8.0 * grid.h()).unwrap();
    assert!((gm.hat()[0] - 1.0).abs() < 1e-14);
    assert!(matches!(
        GridMollifier::new(&Mollifier::standard(1), &grid, grid.h()),
        Err(SynthError::Resolution(_))
    ));
}

#[test]
fn deterministic_given_seed() {
    let t = star1(512, 1, 3).schedule().t(40);
    let a = star1(512, 1, 3).sample(0, t).unwrap();
    let b = star1(512, 1, 3).sample(0, t).unwrap();
    let c = star1(512, 1, 4).sample(0, t).unwrap();
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert!(a != c);
}

#[test]
fn increments_are_orthogonal_to_the_past() {
    let ens = star1(512, 2000, 5);
    let (s, t) = (ens.schedule().t(12), ens.schedule().t_max());
    let pairs = ens.map_replicas(|mut w| {
        w.advance_to(s).unwrap();
        let xs = w.field();
        w.advance_to(t).unwrap();
        let xt = w.field();
        (xt[100] - xs[100], xs[104])
    });
    let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    let (m, se) = moments(&a, &b);
    assert!(m.abs() < 3.0 * se, "{m} ± {se}");
}

#[test]
fn covariance_is_stationary() {
    let ens = star1(256, 2000, 9);
    let t = ens.schedule().t_max();
    let fields: Vec<Vec<f64>> = (0..ens.replicas()).map(|r| ens.sample(r, t).unwrap()).collect();
    let lag = 5;
    let mut ests = Vec::new();
    for x in [0usize, 60, 130, 250] {
        let a: Vec<f64> = fields.iter().map(|f| f[x]).collect();
        let b: Vec<f64> = fields.iter().map(|f| f[(x + lag) % 256]).collect();
        ests.push(moments(&a, &b));
    }
    let want = ens.config().kernel.kappa.k_hat(lag as f64 * ens.grid().h(), t).unwrap();
    for (m, se) in ests {
        assert!((m - want).abs() < 3.0 * se, "{m} vs {want} ± {se}");
    }
}

#[test]
fn pairing_with_measures() {
    let ens = star1(512, 2000, 13);
    let g = *ens.grid();
    let t = ens.schedule().t(32);
    let x = g.coord(200);
    let dirac = ens.pair_with_measure(&DiscreteMeasure::dirac(x.clone()), t).unwrap();
    for (r, v) in dirac.iter().enumerate().take(3) {
        assert_eq!(*v, ens.sample(r, t).unwrap()[200]);
    }
    let cancel = DiscreteMeasure { atoms: vec![x.clone(), x.clone()], weights: vec![0.7, -0.7] };
    assert!(ens.pair_with_measure(&cancel, t).unwrap().iter().all(|&v| v == 0.0));

    let mu = DiscreteMeasure { atoms: vec![g.coord(100), g.coord(110), g.coord(300)], weights: vec![1.0, -0.5, 2.0] };
    let vals = ens.pair_with_measure(&mu, t).unwrap();
    let (var, se) = moments(&vals, &vals);
    let spec = &ens.config().kernel;
    let mut want = 0.0;
    for (xi, wi) in mu.atoms.iter().zip(&mu.weights) {
        for (xj, wj) in mu.atoms.iter().zip(&mu.weights) {
            want += wi * wj * spec.k_t(xi, xj, t).unwrap();
        }
    }
    assert!((var - want).abs() < 3.0 * se, "{var} vs {want} ± {se}");
    let off = DiscreteMeasure::dirac(vec![-1.0]);
    assert!(matches!(ens.pair_with_measure(&off, t), Err(SynthError::OffGrid(_))));
}

#[test]
fn cholesky_oracle_two_points() {
    let spec = KernelSpec::star(1, Domain::cube(1, 0.0, SIDE)).unwrap();
    let moll = Mollifier::standard(1);
    let eps = 0.05;
    let pts = vec![vec![1.0], vec![1.1]];
    let s = cholesky_oracle(&spec, &moll, eps, &pts, 4000, 1).unwrap();
    let v = spec.k_eps(&moll, &pts[0], &pts[0], eps).unwrap();
    let c = spec.k_eps(&moll, &pts[0], &pts[1], eps).unwrap();
    let a: Vec<f64> = s.iter().map(|r| r[0]).collect();
    let b: Vec<f64> = s.iter().map(|r| r[1]).collect();
    let (sab, _) = moments(&a, &b);
    let (saa, _) = moments(&a, &a);
    let (sbb, _) = moments(&b, &b);
    let rho = sab / (saa * sbb).sqrt();
    let want = c / v;
    let se = (1.0 - want * want) / (a.len() as f64).sqrt();
    assert!((rho - want).abs() < 3.0 * se, "{rho} vs {want} ± {se}");
    let again = cholesky_oracle(&spec, &moll, eps, &pts, 1, 1).unwrap();
    assert_eq!(again[0], s[0]);
}

#[test]
fn gaussian_base_field_adds_its_variance() {
    let grid = Grid::new(1, 256, SIDE).unwrap();
    let spec =
        KernelSpec::new(SmoothKernel::gaussian(0.3, 0.2), ScaleKernel::triangle(), Domain::cube(1, 0.0, SIDE)).unwrap();
    let sched = LayerSchedule::for_grid(&grid, &spec, LayerSchedule::DEFAULT_DT).unwrap();
    let ens = FieldEnsemble::new(EnsembleConfig::new(spec, grid, sched, 1, 1)).unwrap();
    let v = ens.variance(0, None);
    assert!((v[17] - 0.3).abs() < 1e-6, "{}", v[17]);
}

#[test]
fn export_writes_container_and_sidecar() {
    let ens = star1(64, 2, 1);
    let dir = std::env::temp_dir().join(format!("gmclab-export-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let stem = dir.join("fields");
    let (t1, t2) = (ens.schedule().t(10), ens.schedule().t(20));
    ens.export(&stem, &[t1, t2], None).unwrap();
    let bytes = std::fs::read(stem.with_extension("bin")).unwrap();
    assert_eq!(bytes.len(), 2 * 2 * 64 * 8);
    let meta: serde_json::Value = serde_json::from_slice(&std::fs::read(stem.with_extension("json")).unwrap()).unwrap();
    assert_eq!(meta["seed"], 1);
    assert!(meta["generator"].as_str().unwrap().contains("chacha8"));
    let first = f64::from_le_bytes(bytes[..8].try_into().unwrap());
    assert_eq!(first, ens.sample(0, t1).unwrap()[0]);
    std::fs::remove_dir_all(dir).unwrap();
}
