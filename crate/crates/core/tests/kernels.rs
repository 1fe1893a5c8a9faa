use gmclab_core::kernels::*;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn trapezoid(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = 0.5 * (f(a) + f(b));
    for i in 1..n {
        s += f(a + i as f64 * h);
    }
    s * h
}

fn star_1d() -> KernelSpec {
    KernelSpec::star(1, Domain::cube(1, -10.0, 10.0)).unwrap()
}

fn min_max_eig(m: DMatrix<f64>) -> (f64, f64) {
    let e = m.symmetric_eigenvalues();
    (e.min(), e.max())
}

#[test]
fn k_t_on_the_diagonal_is_t() {
    let k = star_1d();
    for &t in &[0.0, 0.7, 3.0, 25.0] {
        assert_eq!(k.k_t(&[0.1], &[0.1], t).unwrap(), t);
    }
}

#[test]
fn k_t_vanishes_at_unit_distance() {
    let k = star_1d();
    assert_eq!(k.k_t(&[0.0], &[1.0], 5.0).unwrap(), 0.0);
}

#[test]
fn k_at_inverse_e_matches_trapezoid() {
    // (1 − e^{u−1})₊ integrated over u ∈ [0, 1]; zero beyond
    let oracle = trapezoid(|u| (1.0 - (u - 1.0f64).exp()).max(0.0), 0.0, 1.0, 1_000_000);
    let k = star_1d();
    let r = (-1.0f64).exp();
    let v = k.k(&[0.0], &[r]).unwrap();
    assert!((v - oracle).abs() < 1e-9, "{v} vs {oracle}");
    let vt = k.k_t(&[0.0], &[r], 40.0).unwrap();
    assert!((vt - oracle).abs() < 1e-9);
}

#[test]
fn k_t_matches_quadrature_for_ball_kernels() {
    for d in 2..=3 {
        let kappa = ScaleKernel::new(ScaleForm::BallSelfConvolution, d).unwrap();
        for &(r, t) in &[(0.05, 2.0), (0.3, 0.5), (0.001, 9.0)] {
            let oracle = trapezoid(|u| kappa.eval((u as f64).exp() * r).unwrap(), 0.0, t, 400_000);
            let v = kappa.k_hat(r, t).unwrap();
            assert!((v - oracle).abs() < 1e-8, "d={d} r={r} t={t}: {v} vs {oracle}");
        }
    }
}

#[test]
fn ell_kappa_triangle_closed_forms() {
    let k = ScaleKernel::triangle();
    assert_eq!(k.ell_kappa(1.0).unwrap(), 0.0);
    assert!((k.ell_kappa(std::f64::consts::E).unwrap() - 1.0).abs() < 1e-12);
    assert!((k.ell_kappa(0.5).unwrap() + 0.5).abs() < 1e-12);
    // direct integral of κ(e^{−t}) − κ(e^{−t}r)
    for &r in &[0.2, 0.9, 3.0] {
        let oracle = trapezoid(
            |t| k.eval((-t as f64).exp()).unwrap() - k.eval((-t as f64).exp() * r).unwrap(),
            0.0,
            60.0,
            2_000_000,
        );
        assert!((k.ell_kappa(r).unwrap() - oracle).abs() < 1e-8);
    }
}

#[test]
fn j_kappa_triangle_and_diagonal_identity() {
    let k = ScaleKernel::triangle();
    assert!((k.j_kappa().unwrap() - 1.0).abs() < 1e-9);
    let spec = star_1d();
    for &x in &[-3.0, 0.0, 4.5] {
        assert!((spec.l_diag(&[x]).unwrap() + 1.0).abs() < 1e-12);
        // L(x, y) → L(x, x) as y → x
        assert!((spec.l(&[x], &[x + 1e-9]).unwrap() - spec.l_diag(&[x]).unwrap()).abs() < 1e-8);
    }
}

#[test]
fn j_kappa_ball_kernels_match_quadrature() {
    for d in 1..=3 {
        let k = ScaleKernel::new(ScaleForm::BallSelfConvolution, d).unwrap();
        let oracle = trapezoid(|t| 1.0 - k.eval((-t as f64).exp()).unwrap(), 0.0, 50.0, 2_000_000);
        assert!((k.j_kappa().unwrap() - oracle).abs() < 1e-8, "d = {d}");
    }
}

#[test]
fn scale_kernel_conditions_on_dense_grid() {
    let kernels = vec![
        ScaleKernel::triangle(),
        ScaleKernel::new(ScaleForm::BallSelfConvolution, 2).unwrap(),
        ScaleKernel::new(ScaleForm::BallSelfConvolution, 3).unwrap(),
        ScaleKernel::new(
            ScaleForm::Tabulated { samples: vec![[0.0, 1.0], [0.2, 0.6], [0.5, 0.2], [1.0, 0.0]] },
            1,
        )
        .unwrap(),
    ];
    for k in kernels {
        assert_eq!(k.eval(0.0).unwrap(), 1.0);
        let rs: Vec<f64> = (0..1000).map(|i| 1.5 * i as f64 / 999.0).collect();
        for w in rs.windows(2) {
            let (a, b) = (k.eval(w[0]).unwrap(), k.eval(w[1]).unwrap());
            assert!(a >= 0.0);
            if w[0] >= 1.0 {
                assert_eq!(a, 0.0);
            }
            assert!((a - b).abs() <= k.lipschitz_bound() * (w[1] - w[0]) + 1e-12);
        }
    }
}

#[test]
fn gram_matrices_are_positive_semidefinite() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let tri = ScaleKernel::triangle();
    let pts: Vec<f64> = (0..512).map(|_| rng.gen_range(0.0..3.0)).collect();
    let g = DMatrix::from_fn(512, 512, |i, j| tri.eval((pts[i] - pts[j]).abs()).unwrap());
    let (lo, hi) = min_max_eig(g);
    assert!(lo >= -1e-8 * hi, "{lo} {hi}");

    let ball = ScaleKernel::new(ScaleForm::BallSelfConvolution, 2).unwrap();
    let p2: Vec<[f64; 2]> = (0..400).map(|_| [rng.gen_range(0.0..2.0), rng.gen_range(0.0..2.0)]).collect();
    let g = DMatrix::from_fn(400, 400, |i, j| ball.eval(dist(&p2[i], &p2[j])).unwrap());
    let (lo, hi) = min_max_eig(g);
    assert!(lo >= -1e-8 * hi, "{lo} {hi}");

    let k0 = SmoothKernel::gaussian(0.7, 0.5);
    let g = DMatrix::from_fn(512, 512, |i, j| k0.value(&[pts[i]], &[pts[j]]).unwrap());
    let (lo, hi) = min_max_eig(g);
    assert!(lo >= -1e-8 * hi);
}

#[test]
fn k_eps_approaches_k_off_diagonal() {
    let moll1 = Mollifier::standard(1);
    let spec = KernelSpec::new(SmoothKernel::gaussian(0.3, 1.0), ScaleKernel::triangle(), Domain::cube(1, -5.0, 5.0))
        .unwrap();
    for &r in &[0.05, 0.4, 1.3] {
        let (x, y) = ([0.2], [0.2 + r]);
        let v = spec.k_eps(&moll1, &x, &y, 1e-3 * r).unwrap();
        assert!((v - spec.k(&x, &y).unwrap()).abs() < 1e-3, "r = {r}");
    }
    let moll2 = Mollifier::standard(2);
    let spec2 = KernelSpec::star(2, Domain::cube(2, -3.0, 3.0)).unwrap();
    let (x, y) = ([0.0, 0.0], [0.12, 0.05]);
    let r = dist(&x, &y);
    let v = spec2.k_eps(&moll2, &x, &y, 1e-3 * r).unwrap();
    assert!((v - spec2.k(&x, &y).unwrap()).abs() < 1e-3);
}

#[test]
fn k_eps_of_a_constant_part_is_the_constant() {
    let moll = Mollifier::standard(1);
    let dom = Domain::cube(1, -5.0, 5.0);
    let with = KernelSpec::new(SmoothKernel::gaussian(2.5, 1e9), ScaleKernel::triangle(), dom.clone()).unwrap();
    let without = KernelSpec::star(1, dom).unwrap();
    for &eps in &[0.01, 0.1, 0.5] {
        let d = with.k_eps(&moll, &[0.0], &[0.3], eps).unwrap() - without.k_eps(&moll, &[0.0], &[0.3], eps).unwrap();
        assert!((d - 2.5).abs() < 1e-6);
    }
}

#[test]
fn k_eps_diagonal_against_direct_double_integral() {
    // ∬θ_ε(z₁)θ_ε(z₂)K̂_∞(|z₁−z₂|) by a fine midpoint rule away from the singular line
    let moll = Mollifier::standard(1);
    let spec = star_1d();
    let eps = 0.1;
    let v = spec.k_eps(&moll, &[0.0], &[0.0], eps).unwrap();
    let n = 4000;
    let h = 2.0 * eps / n as f64;
    let tri = ScaleKernel::triangle();
    let mut acc = 0.0;
    for i in 0..n {
        let z1 = -eps + (i as f64 + 0.5) * h;
        for j in 0..n {
            let z2 = -eps + (j as f64 + 0.25) * h;
            acc += moll.theta_eps(z1, eps) * moll.theta_eps(z2, eps) * tri.k_hat((z1 - z2).abs(), f64::INFINITY).unwrap();
        }
    }
    acc *= h * h;
    assert!((v - acc).abs() < 2e-3, "{v} vs {acc}");
}

#[test]
fn k_t_eps_is_between_and_converges() {
    let moll = Mollifier::standard(1);
    let spec = star_1d();
    let (x, y, eps) = ([0.0], [0.05], 0.01);
    let a = spec.k_t_eps(&moll, &x, &y, 3.0, eps).unwrap();
    let b = spec.k_t_eps(&moll, &x, &y, 6.0, eps).unwrap();
    let c = spec.k_t_eps(&moll, &x, &y, 40.0, eps).unwrap();
    let full = spec.k_eps(&moll, &x, &y, eps).unwrap();
    assert!(a <= b && b <= c + 1e-9);
    assert!((c - full).abs() < 1e-6, "{c} vs {full}");
}

#[test]
fn boundary_margin_is_enforced() {
    let moll = Mollifier::standard(1);
    let spec = KernelSpec::star(1, Domain::cube(1, 0.0, 1.0)).unwrap();
    assert!(matches!(spec.k_eps(&moll, &[0.05], &[0.5], 0.05), Err(KernelError::Domain(_))));
    assert!(spec.k_eps(&moll, &[0.15], &[0.5], 0.05).is_ok());
}

#[test]
fn log_estimates_hold_with_a_fitted_constant() {
    let moll = Mollifier::standard(1);
    let spec = star_1d();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut samples = Vec::new();
    for _ in 0..100 {
        let x = rng.gen_range(-2.0..2.0);
        let r = 10f64.powf(rng.gen_range(-4.0..0.5));
        let eps = 10f64.powf(rng.gen_range(-4.0..-1.0));
        samples.push((vec![x], vec![x + r], eps));
    }
    let c = fitted_log_constant(&spec, &moll, &samples).unwrap();
    assert!(c.is_finite() && c < 2.0, "C = {c}");

    let mut ct: f64 = 0.0;
    let mut cte: f64 = 0.0;
    for (x, y, eps) in samples.iter().take(40) {
        let t = rng.gen_range(0.0..12.0);
        let r = dist(x, y);
        let kt = spec.k_t(x, y, t).unwrap();
        ct = ct.max((kt - (1.0 / r.max((-t).exp())).ln()).abs());
        let kte = spec.k_t_eps(&moll, x, y, t, *eps).unwrap();
        cte = cte.max((kte - (1.0 / r.max((-t).exp()).max(*eps)).ln()).abs());
    }
    assert!(ct < 2.0 && cte < 2.0, "{ct} {cte}");
}

#[test]
fn local_regularity_bound() {
    let spec = KernelSpec::new(SmoothKernel::gaussian(0.5, 0.3), ScaleKernel::triangle(), Domain::cube(1, -5.0, 5.0))
        .unwrap();
    let eta = |r: f64| 0.5 * (1.0 - (-r * r / 0.18).exp());
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..500 {
        let x = rng.gen_range(-2.0..2.0);
        let r = 10f64.powf(rng.gen_range(-6.0..0.0));
        let t = rng.gen_range(0.0..15.0);
        let lhs = (spec.k_t(&[x], &[x + r], t).unwrap() - spec.k_t(&[x], &[x], t).unwrap()).abs();
        assert!(lhs <= eta(r) + spec.kappa.lipschitz_bound() * t.exp() * r + 1e-12);
    }
}

fn sample_bump(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let u: f64 = rng.gen_range(-1.0..1.0);
        if rng.gen::<f64>() < (-1.0 / (1.0 - u * u)).exp() / (-1.0f64).exp() {
            return u;
        }
    }
}

#[test]
fn ell_theta_at_zero_two_oracles() {
    let moll = Mollifier::standard(1);
    let v = moll.ell_theta(0.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let n = 10_000_000;
    let (mut s, mut s2) = (0.0, 0.0);
    for _ in 0..n {
        let z = -(sample_bump(&mut rng) - sample_bump(&mut rng)).abs().ln();
        s += z;
        s2 += z * z;
    }
    let mean = s / n as f64;
    let se = ((s2 / n as f64 - mean * mean) / n as f64).sqrt();
    assert!((v - mean).abs() < 3.0 * se, "{v} vs {mean} ± {se}");
}

#[test]
fn ell_theta_far_field() {
    // the radial logarithm is harmonic in d = 2, so the far field is exact
    let m2 = Mollifier::standard(2);
    assert!((m2.ell_theta(10.0).unwrap() + 10f64.ln()).abs() < 1e-6);
    assert!((m2.ell_theta(2.5).unwrap() + 2.5f64.ln()).abs() < 1e-6);
    // in d = 1 the smooth integrand ∫ψ(w)log|z − w| against a high-order rule
    let m1 = Mollifier::standard(1);
    let z = 10.0;
    let oracle = -gmclab_core::quad::integrate(|w| m1.autocorrelation_direct(w.abs()) * (z - w).ln(), -2.0, 2.0, 1e-12, 0.0)
        .unwrap()
        .value;
    assert!((m1.ell_theta(z).unwrap() - oracle).abs() < 1e-6);
}

#[test]
fn tabulated_kernel_from_json() {
    let s = r#"{"form":"tabulated","samples":[[0.0,1.0],[0.5,0.25],[1.0,0.0]],"d":1}"#;
    let k: ScaleKernel = serde_json::from_str(s).unwrap();
    assert_eq!(k.eval(0.25).unwrap(), 0.625);
    let back = serde_json::to_string(&k).unwrap();
    let again: ScaleKernel = serde_json::from_str(&back).unwrap();
    assert_eq!(k, again);
    let bad = r#"{"form":"triangle","d":2}"#;
    assert!(serde_json::from_str::<ScaleKernel>(bad).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn k_t_nondecreasing_in_t(r in 0.0f64..2.0, t in 0.0f64..20.0, dt in 0.0f64..5.0) {
        let k = ScaleKernel::triangle();
        prop_assert!(k.k_hat(r, t + dt).unwrap() >= k.k_hat(r, t).unwrap() - 1e-14);
    }

    #[test]
    fn layer_integrals_are_additive(r in 1e-6f64..1.5, a in 0.0f64..8.0, b in 0.0f64..8.0, c in 0.0f64..8.0) {
        let mut v = [a, b, c];
        v.sort_by(f64::total_cmp);
        for k in [ScaleKernel::triangle(), ScaleKernel::new(ScaleForm::BallSelfConvolution, 2).unwrap()] {
            let whole = k.layer_integral(r, v[0], v[2]).unwrap();
            let parts = k.layer_integral(r, v[0], v[1]).unwrap() + k.layer_integral(r, v[1], v[2]).unwrap();
            prop_assert!((whole - parts).abs() < 1e-12);
        }
    }

    #[test]
    fn diagonal_gap_is_bounded(t in 0.0f64..60.0) {
        let spec = KernelSpec::star(1, Domain::cube(1, -1.0, 1.0)).unwrap();
        prop_assert!((spec.k_t(&[0.0], &[0.0], t).unwrap() - t).abs() < 1e-12);
    }

    #[test]
    fn smooth_kernel_symmetry(x in -1.0f64..1.0, y in -1.0f64..1.0) {
        let k = SmoothKernel { form: SmoothForm::Tabulated2d {
            axis: vec![-1.0, 0.0, 1.0],
            values: vec![vec![1.0, 0.5, 0.1], vec![0.5, 1.0, 0.5], vec![0.1, 0.5, 1.0]],
        }, holder_exponent: 1.0 };
        prop_assert!((k.value(&[x], &[y]).unwrap() - k.value(&[y], &[x]).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn ell_theta_is_even(z in -4.0f64..4.0) {
        let m = Mollifier::standard(1);
        prop_assert_eq!(m.ell_theta(z).unwrap(), m.ell_theta(-z).unwrap());
    }
}
