use gmclab_core::chaos::ComplexParam;
use gmclab_core::kernels::{Mollifier, ScaleForm, ScaleKernel};
use gmclab_core::scaling::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn p3() -> ComplexParam {
    ComplexParam::new(0.5, (2.0f64 - 0.25).sqrt())
}

#[test]
fn circle_constants() {
    let m2 = Mollifier::standard(2);
    let g = ComplexParam::new(0.0, 2f64.sqrt());
    let v = v_eps((-1.0f64).exp(), &m2, &g).unwrap();
    assert_eq!(v.regime, Regime::Circle);
    assert!((v.value - 0.564_189_583_547_756_3).abs() < 1e-12);

    let g1 = ComplexParam::new(0.0, 1.0);
    let vb = v_bar(4.0, &ScaleKernel::triangle(), &g1).unwrap();
    assert_eq!(vb.regime, Regime::Circle);
    assert!((vb.value - 0.5).abs() < 1e-12);
}

#[test]
fn out_of_phase_rejected() {
    let g = ComplexParam::new(0.3, 0.3);
    assert!(matches!(v_bar(1.0, &ScaleKernel::triangle(), &g), Err(ScalingError::OutOfPhase(_))));
    assert!(matches!(v_eps(0.1, &Mollifier::standard(1), &g), Err(ScalingError::OutOfPhase(_))));
}

#[test]
fn v_bar_integral_and_ratio() {
    let k = ScaleKernel::triangle();
    let g = ComplexParam::new(0.0, 2f64.sqrt());
    let v = v_bar(3.0, &k, &g).unwrap();
    let i = v.ingredients.integral.unwrap();
    assert!((i - (2f64.exp() + 1.0)).abs() < 1e-6);
    let v1 = v_bar(4.0, &k, &g).unwrap();
    assert!((v1.value / v.value - (-0.5f64).exp()).abs() < 1e-14);
}

#[test]
fn v_eps_ratio_under_halving() {
    let m = Mollifier::standard(1);
    let g = p3();
    let a = v_eps(0.1, &m, &g).unwrap().value;
    let b = v_eps(0.05, &m, &g).unwrap().value;
    let want = 2f64.powf(-(g.abs_sq() - 1.0) / 2.0);
    assert!((b / a - want).abs() < 1e-12);
}

#[test]
fn theta_integral_monte_carlo_oracle() {
    // importance sampling with density ½(1+|z|)^{−2}
    let m = Mollifier::standard(1);
    let want = theta_integral(&m, 2.0).unwrap();
    let table: Vec<f64> = (0..=4000).map(|i| m.ell_theta(i as f64 * 0.01).unwrap()).collect();
    let ell = |z: f64| {
        if z >= 40.0 {
            // far field, accurate to 1e-4 beyond the table
            return -z.ln();
        }
        let u = z / 0.01;
        let i = u.floor() as usize;
        let s = u - i as f64;
        table[i] * (1.0 - s) + table[i + 1] * s
    };
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let n = 400_000;
    let (mut s, mut s2) = (0.0, 0.0);
    for _ in 0..n {
        let u: f64 = rng.gen();
        let r = 1.0 / (1.0 - u) - 1.0;
        let w = (2.0 * ell(r)).exp() * 2.0 * (1.0 + r) * (1.0 + r);
        s += w;
        s2 += w * w;
    }
    let mean = s / n as f64;
    let se = ((s2 / n as f64 - mean * mean) / n as f64).sqrt();
    assert!((mean - want).abs() < 3.0 * se + 1e-3 * want, "{want} vs {mean} ± {se}");
}

#[test]
fn theta_integral_tail_is_converged() {
    let m = Mollifier::standard(1);
    let g = 1.3;
    let i = theta_integral(&m, g).unwrap();
    // brute force out to a large radius with the known far field
    let near = gmclab_core::quad::integrate_breaks(
        |r| (g * m.ell_theta(r).unwrap()).exp(),
        0.0,
        200.0,
        &[1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0, 128.0],
        1e-10,
        1e-10,
    )
    .unwrap()
    .value;
    let tail = 200f64.powf(1.0 - g) / (g - 1.0);
    assert!(((2.0 * (near + tail)) - i).abs() < 1e-6 * i);
}

#[test]
fn a_triangle_matches_general_quadrature() {
    // the tabulated copy of the triangle goes through the generic path
    let tab = ScaleKernel::new(ScaleForm::Tabulated { samples: vec![[0.0, 1.0], [1.0, 0.0]] }, 1).unwrap();
    let tri = ScaleKernel::triangle();
    let g = p3();
    for &s in &[0.0, 0.5, 3.0, 9.0] {
        let a = a_const(s, &tri, &g).unwrap();
        let b = a_const(s, &tab, &g).unwrap();
        assert!((a - b).abs() < 1e-9 * a, "s = {s}: {a} vs {b}");
    }
}

#[test]
fn a_growth_rate() {
    let g = p3();
    for k in [ScaleKernel::triangle(), ScaleKernel::new(ScaleForm::BallSelfConvolution, 1).unwrap()] {
        let ts: Vec<f64> = (0..=8).map(|i| 4.0 + 0.5 * i as f64).collect();
        let ys: Vec<f64> = ts.iter().map(|&t| a_const(t, &k, &g).unwrap().ln()).collect();
        let n = ts.len() as f64;
        let (mt, my) = (ts.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
        let slope = ts.iter().zip(&ys).map(|(t, y)| (t - mt) * (y - my)).sum::<f64>()
            / ts.iter().map(|t| (t - mt) * (t - mt)).sum::<f64>();
        assert!((slope - (g.abs_sq() - 1.0)).abs() < 0.02 * (g.abs_sq() - 1.0), "slope {slope}");
    }
}

#[test]
fn martingale_limit_at_twelve() {
    let c = martingale_limit(12.0, &ScaleKernel::triangle(), &ComplexParam::new(0.0, 2f64.sqrt())).unwrap();
    assert!(c.error < 1e-2, "{c:?}");
    // independent oracle: after y = e^t z the finite-t integral has a closed form in s
    let g = 2.0;
    let direct = gmclab_core::quad::integrate(
        |s| {
            let k = g * (1.0 - (-s as f64).exp());
            let base = if k < 1e-6 { 0.5 } else { 1.0 / k - (1.0 - (-k).exp()) / (k * k) };
            2.0 * ((g - 1.0) * s).exp() * base
        },
        0.0,
        12.0,
        1e-9,
        1e-12,
    )
    .unwrap()
    .value;
    let v2 = 2.0 / (2f64.exp() + 1.0) * (-12.0f64).exp();
    assert!((v2 * g * direct - c.value).abs() < 1e-9);
}

#[test]
fn convolution_limit_at_fine_eps() {
    let m = Mollifier::standard(1);
    let g = p3();
    let c = convolution_limit(2f64.powi(-9), &ScaleKernel::triangle(), &m, &g).unwrap();
    assert!(c.error < 1e-2, "{c:?}");
}

#[test]
fn a_eps_integrates_to_the_exponential_moment() {
    let m = Mollifier::standard(1);
    let g = ComplexParam::new(0.0, 1.2);
    let k = ScaleKernel::triangle();
    let eps = 0.05;
    let total = a_integral_eps(eps, &k, &m, &g).unwrap();
    let integral = gmclab_core::quad::integrate(
        |t| a_const_eps(t, eps, &k, &m, &g).unwrap(),
        0.0,
        12.0,
        1e-7,
        1e-7,
    )
    .unwrap()
    .value;
    assert!((g.abs_sq() * integral - total).abs() < 1e-3 * total, "{} vs {total}", g.abs_sq() * integral);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn regions_are_total_and_closure_consistent(a in -3.0f64..3.0, b in -3.0f64..3.0, d in 1usize..4) {
        let r = classify_phase(a, b, d);
        prop_assert!(r != PhaseRegion::Other);
        let df = d as f64;
        let s = a * a + b * b;
        if r == PhaseRegion::PhaseIII {
            prop_assert!(s > df && a.abs() < (df / 2.0).sqrt());
        }
        if r == PhaseRegion::Subcritical && s >= df {
            prop_assert!(a.abs() > (df / 2.0).sqrt() && a.abs() + b.abs() < (2.0 * df).sqrt());
        }
        prop_assert_eq!(r, classify_phase(-a, -b, d));
    }

    #[test]
    fn v_bar_positive(t in 0.1f64..20.0, b in 1.0f64..3.0) {
        let v = v_bar(t, &ScaleKernel::triangle(), &ComplexParam::new(0.2, b)).unwrap();
        prop_assert!(v.value > 0.0);
    }
}
