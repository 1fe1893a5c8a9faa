//! Result records and file output.

use crate::config::ExperimentConfig;
use gmclab_core::chaos::ComplexParam;
use gmclab_core::kernels::Mollifier;
use gmclab_core::scaling::{self, classify_phase, in_phase_iii_closure};
use gmclab_core::rng::GENERATOR;
use serde::Serialize;
use serde_json::value::RawValue;
use serde_json::{json, Value};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

#[derive(Serialize)]
pub struct Environment {
    pub generator: &'static str,
    pub build: String,
    pub target: String,
}

impl Environment {
    pub fn current() -> Self {
        Self {
            generator: GENERATOR,
            build: format!("gmclab {}", env!("CARGO_PKG_VERSION")),
            target: format!("{}-{}", std::env::consts::ARCH, std::env::consts::OS),
        }
    }
}

#[derive(Serialize)]
pub struct Timestamps {
    pub started_unix: f64,
    pub finished_unix: f64,
}

/// Everything a subcommand reports; `timestamps` is the only nondeterministic field.
#[derive(Serialize)]
pub struct ResultRecord {
    pub command: String,
    pub config_hash: String,
    /// The canonical config, byte-for-byte what the hash covers.
    pub config: Box<RawValue>,
    pub constants: Value,
    pub report: Value,
    pub pass: Option<bool>,
    pub environment: Environment,
    pub timestamps: Timestamps,
}

pub fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

impl ResultRecord {
    pub fn new(command: &str, cfg: &ExperimentConfig, constants: Value, report: Value, pass: Option<bool>, started: f64) -> Self {
        Self {
            command: command.into(),
            config_hash: cfg.hash(),
            config: RawValue::from_string(cfg.canonical()).expect("canonical config is JSON"),
            constants,
            report,
            pass,
            environment: Environment::current(),
            timestamps: Timestamps { started_unix: started, finished_unix: now() },
        }
    }
}

/// Constant breakdowns for every configured `γ`.
pub fn constants(cfg: &ExperimentConfig) -> anyhow::Result<Value> {
    let spec = cfg.spec()?;
    let sched = cfg.schedule()?;
    let d = spec.d;
    let kappa = &spec.kappa;
    let moll: &Mollifier = &cfg.mollifier;
    let mut per_gamma = Vec::new();
    for g in &cfg.gammas {
        let gamma: ComplexParam = (*g).into();
        let phase = classify_phase(g.alpha, g.beta, d);
        let mut entry = json!({"alpha": g.alpha, "beta": g.beta, "abs_sq": gamma.abs_sq(), "phase": phase});
        if in_phase_iii_closure(&gamma, d) {
            let t = sched.t_max();
            entry["v_bar"] = json!({"t": t, "value": scaling::v_bar(t, kappa, &gamma)?});
            let v_eps: Vec<Value> = cfg
                .eps_ladder
                .iter()
                .map(|&e| scaling::v_eps(e, moll, &gamma).map(|v| json!({"eps": e, "value": v})))
                .collect::<Result<_, _>>()?;
            entry["v_eps"] = json!(v_eps);
            entry["martingale_limit"] = json!(scaling::martingale_limit(t, kappa, &gamma)?);
            if let Some(e) = cfg.eps_ladder.iter().cloned().reduce(f64::min) {
                entry["convolution_limit"] = json!({"eps": e, "check": scaling::convolution_limit(e, kappa, moll, &gamma)?});
            }
        }
        per_gamma.push(entry);
    }
    Ok(json!({
        "j_kappa": kappa.j_kappa()?,
        "kappa_mass": kappa.mass()?,
        "t_max": sched.t_max(),
        "delta_t": sched.delta_t,
        "gammas": per_gamma,
    }))
}

/// Writes `<dir>/<stem>.json`; returns its path.
pub fn write_json(dir: &Path, stem: &str, record: &ResultRecord) -> anyhow::Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(format!("{stem}.json"));
    std::fs::write(&path, serde_json::to_vec_pretty(record)?)?;
    Ok(path)
}

/// Writes `<dir>/<stem>.csv` from a header and rows of displayable cells.
pub fn write_csv(dir: &Path, stem: &str, header: &[&str], rows: &[Vec<String>]) -> anyhow::Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(format!("{stem}.csv"));
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(path)
}
