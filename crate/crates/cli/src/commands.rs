//! Subcommand implementations. Each writes `<command>.json` and at least one CSV.

use crate::config::{ConfigError, ExperimentConfig};
use crate::record::{self, write_csv, write_json, ResultRecord};
use crate::Command;
use anyhow::{Context, Result};
use gmclab_core::acceptance::{self, AcceptanceConfig, CRITERIA};
use gmclab_core::analysis::{self, LimitSetup, QvMode, TestStatus};
use gmclab_core::chaos::ComplexParam;
use gmclab_core::decomp::{build_k_delta, decompose, TargetKernel};
use gmclab_core::rng::{self, kind};
use gmclab_core::scaling::{classify_phase, in_phase_iii_closure};
use gmclab_core::synth::{FieldEnsemble, GridMollifier};
use rand::Rng;
use serde_json::{json, Value};
use std::path::{Path, PathBuf};

pub struct Outcome {
    pub files: Vec<PathBuf>,
    /// `None` for commands without pass/fail semantics.
    pub pass: Option<bool>,
}

pub fn run(cmd: Command, cfg: &ExperimentConfig, out: &Path) -> Result<Outcome> {
    let started = record::now();
    let (name, report, pass, csvs) = match cmd {
        Command::Constants => constants(cfg)?,
        Command::Synthesize => synthesize(cfg, out)?,
        Command::LimitTest => limit_test(cfg)?,
        Command::QvTest => qv_test(cfg)?,
        Command::ScanPhase => scan_phase(cfg)?,
        Command::Tightness => tightness(cfg)?,
        Command::Decompose => decomp(cfg)?,
        Command::Accept => accept(cfg)?,
    };
    let constants = record::constants(cfg).context("constants")?;
    let rec = ResultRecord::new(name, cfg, constants, report, pass, started);
    let mut files = vec![write_json(out, &name.replace('-', "_"), &rec)?];
    for (stem, header, rows) in csvs {
        files.push(write_csv(out, stem, header, &rows)?);
    }
    Ok(Outcome { files, pass })
}

type Csv = (&'static str, &'static [&'static str], Vec<Vec<String>>);
type Produced = (&'static str, Value, Option<bool>, Vec<Csv>);

fn s(x: impl ToString) -> String {
    x.to_string()
}

fn ensemble(cfg: &ExperimentConfig) -> Result<FieldEnsemble> {
    FieldEnsemble::new(cfg.ensemble_config()?).context("synth: building the ensemble")
}

fn gammas(cfg: &ExperimentConfig) -> Vec<ComplexParam> {
    cfg.gammas.iter().map(|g| (*g).into()).collect()
}

fn constants(cfg: &ExperimentConfig) -> Result<Produced> {
    let c = record::constants(cfg)?;
    let mut rows = Vec::new();
    for g in c["gammas"].as_array().into_iter().flatten() {
        let (a, b, g2, ph) = (s(&g["alpha"]), s(&g["beta"]), s(&g["abs_sq"]), g["phase"].as_str().unwrap_or("").to_string());
        let mut row = |q: &str, x: &Value, v: &Value| rows.push(vec![a.clone(), b.clone(), g2.clone(), ph.clone(), q.into(), s(x), s(v)]);
        if let Some(vb) = g.get("v_bar") {
            row("v_bar", &vb["t"], &vb["value"]["value"]);
        }
        for ve in g.get("v_eps").and_then(Value::as_array).into_iter().flatten() {
            row("v_eps", &ve["eps"], &ve["value"]["value"]);
        }
        if let Some(m) = g.get("martingale_limit") {
            row("martingale_limit", &c["t_max"], &m["value"]);
        }
        if let Some(m) = g.get("convolution_limit") {
            row("convolution_limit", &m["eps"], &m["check"]["value"]);
        }
    }
    rows.push(vec![String::new(), String::new(), String::new(), String::new(), "j_kappa".into(), String::new(), s(&c["j_kappa"])]);
    Ok(("constants", c, None, vec![("constants", &["alpha", "beta", "abs_sq", "phase", "quantity", "x", "value"], rows)]))
}

fn synthesize(cfg: &ExperimentConfig, out: &Path) -> Result<Produced> {
    let ens = ensemble(cfg)?;
    let sched = *ens.schedule();
    let times = if cfg.export_times.is_empty() { vec![sched.t_max()] } else { cfg.export_times.clone() };
    let eps = cfg.eps_ladder.iter().cloned().reduce(f64::min);
    let gm = eps.map(|e| GridMollifier::new(&cfg.mollifier, ens.grid(), e)).transpose().context("synth: mollifier")?;
    std::fs::create_dir_all(out)?;
    ens.export(&out.join("fields"), &times, None).context("synth: export")?;
    if let Some(m) = &gm {
        ens.export(&out.join("fields_eps"), &times, Some(m)).context("synth: export")?;
    }
    let mut rows = Vec::new();
    for &t in &times {
        let i = sched.index_of(t).ok_or_else(|| ConfigError(format!("export time {t} is not a layer time")))?;
        for m in std::iter::once(None).chain(gm.as_ref().map(Some)) {
            let lattice = analysis::mean(&ens.variance(i, m));
            let samples: Vec<Vec<f64>> = ens.map_replicas(|mut w| {
                w.advance_to(t).map(|_| match m {
                    Some(g) => w.mollified(g),
                    None => w.field(),
                })
            })
            .into_iter()
            .collect::<Result<_, _>>()?;
            let r = samples.len() as f64;
            let sites = ens.grid().sites();
            let emp = (0..sites).map(|k| samples.iter().map(|x| x[k] * x[k]).sum::<f64>() / r).sum::<f64>() / sites as f64;
            rows.push(vec![s(t), m.map_or(String::new(), |g| s(g.eps())), s(lattice), s(emp)]);
        }
    }
    let report = json!({
        "times": times,
        "eps": eps,
        "replicas": ens.replicas(),
        "sites": ens.grid().sites(),
        "clipped_mass": ens.clipped_mass(),
        "files": ["fields.bin", "fields.json"],
    });
    Ok(("synthesize", report, None, vec![("synthesize", &["t", "eps", "lattice_variance", "empirical_variance"], rows)]))
}

fn limit_test(cfg: &ExperimentConfig) -> Result<Produced> {
    let ens = ensemble(cfg)?;
    let grid = *ens.grid();
    let f = cfg.test_function(&grid);
    let mus: Vec<_> = cfg.mu.iter().map(|m| m.build(&grid)).collect();
    let mut reports = Vec::new();
    let mut rows = Vec::new();
    let mut pass = true;
    for g in gammas(cfg) {
        let setup = LimitSetup { mollifier: &cfg.mollifier, gamma: g, f: &f, omega: cfg.omega };
        let rep = analysis::stable_limit_test(&ens, &setup, &mus, &cfg.eps_ladder, cfg.seed).context("analysis: stable_limit_test")?;
        if let TestStatus::Ran { pass: p } = rep.status {
            pass &= p && rep.companion_worse;
        }
        for lvl in &rep.levels {
            for p in &lvl.points {
                rows.push(vec![
                    s(g.alpha),
                    s(g.beta),
                    s(lvl.eps),
                    p.mu.map_or("0".into(), |m| s(m + 1)),
                    s(p.xi),
                    s(p.lhs.re),
                    s(p.lhs.im),
                    s(p.rhs.re),
                    s(p.rhs.im),
                    s(p.rhs_companion.re),
                    s(p.rhs_companion.im),
                    s(p.stderr),
                ]);
            }
        }
        reports.push(rep);
    }
    Ok((
        "limit-test",
        json!(reports),
        Some(pass),
        vec![(
            "limit_test",
            &["alpha", "beta", "eps", "mu", "xi", "lhs_re", "lhs_im", "rhs_re", "rhs_im", "companion_re", "companion_im", "stderr"],
            rows,
        )],
    ))
}

fn qv_test(cfg: &ExperimentConfig) -> Result<Produced> {
    let ens = ensemble(cfg)?;
    let grid = *ens.grid();
    let f = cfg.test_function(&grid);
    let sched = *ens.schedule();
    let cps = if cfg.qv.checkpoints.is_empty() { vec![sched.t_max()] } else { cfg.qv.checkpoints.clone() };
    let mut reports = Vec::new();
    let mut rows = Vec::new();
    let mut pass = true;
    for g in gammas(cfg) {
        let setup = LimitSetup { mollifier: &cfg.mollifier, gamma: g, f: &f, omega: cfg.omega };
        let mut runs = vec![(QvMode::Martingale, None)];
        if cfg.qv.convolution {
            if let Some(e) = cfg.eps_ladder.iter().cloned().reduce(f64::min) {
                runs.push((QvMode::Convolution, Some(e)));
            }
        }
        for (mode, eps) in runs {
            let rep = analysis::qv_lln_test(&ens, &setup, mode, eps, &cps).context("analysis: qv_lln_test")?;
            if let TestStatus::Ran { pass: p } = rep.status {
                pass &= p;
            }
            let t = rep.checkpoints.last().map_or(f64::NAN, |c| c.t);
            for (r, (b, z)) in rep.brackets.iter().zip(&rep.intensity).enumerate() {
                let mode_s = serde_json::to_value(mode)?.as_str().unwrap_or("").to_string();
                rows.push(vec![s(g.alpha), s(g.beta), mode_s, eps.map_or(String::new(), s), s(t), s(r), s(b), s(z)]);
            }
            reports.push(rep);
        }
    }
    Ok((
        "qv-test",
        json!(reports),
        Some(pass),
        vec![("qv_test", &["alpha", "beta", "mode", "eps", "t", "replica", "bracket", "intensity"], rows)],
    ))
}

fn scan_phase(cfg: &ExperimentConfig) -> Result<Produced> {
    let ens = ensemble(cfg)?;
    let grid = *ens.grid();
    let f = cfg.test_function(&grid);
    let d = grid.d;
    let mut fits = Vec::new();
    let mut rows = Vec::new();
    let mut moments = Vec::new();
    for g in gammas(cfg) {
        let cols = analysis::chaos_abs_sq(&ens, &cfg.mollifier, &g, &f, &cfg.eps_ladder).context("analysis: chaos_abs_sq")?;
        let fit = analysis::second_moment_fit(&cfg.eps_ladder, &cols, cfg.seed).context("analysis: second_moment_fit")?;
        let phase = serde_json::to_value(classify_phase(g.alpha, g.beta, d))?;
        let predicted = (d as f64 - g.abs_sq()).min(0.0);
        rows.push(vec![
            s(g.alpha),
            s(g.beta),
            s(g.abs_sq()),
            phase.as_str().unwrap_or("").to_string(),
            s(fit.slope),
            s(fit.slope_ci.0),
            s(fit.slope_ci.1),
            s(predicted),
            s(fit.log_slope),
            s(fit.log_r2),
        ]);
        for (k, e) in fit.eps.iter().enumerate() {
            moments.push(vec![s(g.alpha), s(g.beta), s(e), s(fit.moments[k]), s(fit.moment_stderr[k])]);
        }
        fits.push(json!({"alpha": g.alpha, "beta": g.beta, "phase": phase, "fit": fit}));
    }
    Ok((
        "scan-phase",
        json!(fits),
        None,
        vec![
            (
                "scan_phase",
                &["alpha", "beta", "abs_sq", "phase", "slope", "slope_lo", "slope_hi", "predicted_slope", "log_slope", "log_r2"],
                rows,
            ),
            ("scan_phase_moments", &["alpha", "beta", "eps", "moment", "stderr"], moments),
        ],
    ))
}

fn tightness(cfg: &ExperimentConfig) -> Result<Produced> {
    let ens = ensemble(cfg)?;
    let grid = *ens.grid();
    let f = cfg.test_function(&grid);
    let a0 = 2.0 * std::f64::consts::PI / grid.side;
    let shifts: Vec<f64> = cfg.tightness.shifts.iter().map(|a| a * a0).collect();
    let mut profiles = Vec::new();
    let mut rows = Vec::new();
    for g in gammas(cfg) {
        if !in_phase_iii_closure(&g, grid.d) {
            profiles.push(json!({"alpha": g.alpha, "beta": g.beta, "status": "skipped", "reason": "out of phase"}));
            continue;
        }
        let setup = LimitSetup { mollifier: &cfg.mollifier, gamma: g, f: &f, omega: cfg.omega };
        let p = analysis::sobolev_diagnostics(&ens, &setup, &cfg.eps_ladder, cfg.tightness.u, &shifts, cfg.tightness.kmax)
            .context("analysis: sobolev_diagnostics")?;
        for (j, e) in p.eps.iter().enumerate() {
            for (k, xi) in p.xi.iter().enumerate() {
                rows.push(vec![s(g.alpha), s(g.beta), s(e), s(xi), "moment".into(), String::new(), s(p.moments[j][k])]);
                for (a, shift) in p.shifts.iter().enumerate() {
                    rows.push(vec![s(g.alpha), s(g.beta), s(e), s(xi), "increment".into(), s(shift), s(p.increments[j][a][k])]);
                }
            }
            rows.push(vec![s(g.alpha), s(g.beta), s(e), String::new(), "norm".into(), String::new(), s(p.norms[j])]);
            rows.push(vec![s(g.alpha), s(g.beta), s(e), s(p.tail_cut), "tail_mass".into(), String::new(), s(p.tail_mass[j])]);
        }
        profiles.push(json!({
            "alpha": g.alpha,
            "beta": g.beta,
            "status": "ran",
            "moment_spread": p.moment_spread(),
            "norm_spread": p.norm_spread(),
            "max_increment": p.max_increment(),
            "profile": p,
        }));
    }
    Ok((
        "tightness",
        json!(profiles),
        None,
        vec![("tightness", &["alpha", "beta", "eps", "xi", "quantity", "shift", "value"], rows)],
    ))
}

fn decomp(cfg: &ExperimentConfig) -> Result<Produced> {
    let dc = cfg.decomp.as_ref().ok_or_else(|| ConfigError("decompose needs a \"decomp\" section".into()))?;
    let d = dc.kappa0.dim();
    let mut rng = rng::substream(&[cfg.seed, kind::AUX, 8]);
    let pts: Vec<Vec<f64>> = (0..dc.points).map(|_| (0..d).map(|_| rng.gen_range(dc.lower..dc.upper)).collect()).collect();
    let target = TargetKernel::synthetic(&dc.kappa0, dc.amplitude, dc.width).context("decomp: target kernel")?;
    let mut reports = Vec::new();
    let mut rows = Vec::new();
    let mut pass = true;
    for &delta in &dc.deltas {
        let kd = build_k_delta(target.clone(), dc.kappa0.clone(), delta, dc.s).context("decomp: build_k_delta")?;
        let rep = decompose(&kd, &pts).context("decomp: decompose")?;
        pass &= rep.t0_found.is_some() && rep.sup_diff <= delta + 1e-9;
        rows.push(vec![
            s(rep.delta),
            s(rep.s),
            s(rep.eta),
            s(rep.points),
            s(rep.sup_diff),
            s(rep.min_eig_delta_part),
            s(rep.max_eig_delta_part),
            rep.t0_found.map_or(String::new(), s),
            rep.min_eig_remainder.map_or(String::new(), s),
        ]);
        reports.push(rep);
    }
    Ok((
        "decompose",
        json!(reports),
        Some(pass),
        vec![(
            "decompose",
            &["delta", "s", "eta", "points", "sup_diff", "min_eig_delta_part", "max_eig_delta_part", "t0", "min_eig_remainder"],
            rows,
        )],
    ))
}

fn accept(cfg: &ExperimentConfig) -> Result<Produced> {
    let mut acfg = if cfg.acceptance.quick { AcceptanceConfig::quick() } else { AcceptanceConfig::default() };
    acfg.seed = cfg.seed;
    let ids: Vec<&str> = if cfg.acceptance.criteria.is_empty() {
        CRITERIA.iter().map(|c| c.0).collect()
    } else {
        cfg.acceptance.criteria.iter().map(String::as_str).collect()
    };
    let results: Vec<_> = ids.iter().map(|id| acceptance::run(id, &acfg)).collect();
    let pass = results.iter().all(|r| r.pass);
    let rows = results.iter().map(|r| vec![r.id.clone(), r.name.clone(), s(r.pass), r.summary.clone()]).collect();
    Ok((
        "accept",
        json!({"sizes": acfg, "criteria": results}),
        Some(pass),
        vec![("accept", &["id", "name", "pass", "summary"], rows)],
    ))
}
