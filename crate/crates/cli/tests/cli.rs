use serde_json::Value;
use std::path::{Path, PathBuf};
use std::process::Command;

fn quick_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/quick.json")
}

fn gmclab(args: &[&str], out: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_gmclab"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("GMCLAB_OUT")
        .output()
        .expect("binary runs")
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

fn without_timestamps(mut v: Value) -> Value {
    v.as_object_mut().unwrap().remove("timestamps");
    v
}

#[test]
fn constants_reports_j_kappa_and_hash() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_config();
    let o = gmclab(&["constants", "--config", cfg.to_str().unwrap()], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rec = read_json(&dir.path().join("constants.json"));
    assert_eq!(rec["constants"]["j_kappa"].as_f64().unwrap(), 1.0);
    let csv = std::fs::read_to_string(dir.path().join("constants.csv")).unwrap();
    let j = csv.lines().find(|l| l.contains("j_kappa")).unwrap();
    assert_eq!(j.rsplit(',').next().unwrap().parse::<f64>().unwrap(), 1.0);

    // the hash covers the embedded config byte-for-byte
    use sha2::Digest;
    let text = std::fs::read_to_string(dir.path().join("constants.json")).unwrap();
    let start = text.find("\"config\": ").unwrap() + "\"config\": ".len();
    let embedded = &text[start..start + text[start..].find(",\n  \"constants\"").unwrap()];
    let hash: String = sha2::Sha256::digest(embedded.as_bytes()).iter().map(|b| format!("{b:02x}")).collect();
    assert_eq!(rec["config_hash"].as_str().unwrap(), hash);
}

#[test]
fn decompose_and_accept_are_deterministic() {
    let cfg = quick_config();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        let o = gmclab(&["accept", "--config", cfg.to_str().unwrap()], d.path());
        assert!(o.status.code().is_some_and(|c| c <= 1), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let ra = without_timestamps(read_json(&a.path().join("accept.json")));
    let rb = without_timestamps(read_json(&b.path().join("accept.json")));
    assert_eq!(ra, rb);
    assert_eq!(ra["report"]["criteria"].as_array().unwrap().len(), 3);

    let o = gmclab(&["decompose", "--config", cfg.to_str().unwrap()], a.path());
    assert!(o.status.success());
    let csv = std::fs::read_to_string(a.path().join("decompose.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn overrides_change_the_hash() {
    let cfg = quick_config();
    let dir = tempfile::tempdir().unwrap();
    let o = gmclab(&["constants", "--config", cfg.to_str().unwrap(), "--seed", "7", "--replicas", "3"], dir.path());
    assert!(o.status.success());
    let rec = read_json(&dir.path().join("constants.json"));
    assert_eq!(rec["config"]["seed"], 7);
    assert_eq!(rec["config"]["replicas"], 3);
    let dir2 = tempfile::tempdir().unwrap();
    gmclab(&["constants", "--config", cfg.to_str().unwrap()], dir2.path());
    assert_ne!(rec["config_hash"], read_json(&dir2.path().join("constants.json"))["config_hash"]);
}

#[test]
fn config_errors_carry_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\n  \"kernel\": {\n    \"kappa\": 3\n  }\n}\n").unwrap();
    let o = gmclab(&["constants", "--config", bad.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 3"), "{err}");

    let mut cfg: Value = serde_json::from_slice(&std::fs::read(quick_config()).unwrap()).unwrap();
    cfg["eps_ladder"] = serde_json::json!([0.1, 0.05, 0.02]);
    std::fs::write(&bad, serde_json::to_vec(&cfg).unwrap()).unwrap();
    let o = gmclab(&["constants", "--config", bad.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("geometric"));
}

#[test]
fn output_root_variable_applies_to_relative_paths() {
    let root = tempfile::tempdir().unwrap();
    let cfg = quick_config();
    let o = Command::new(env!("CARGO_BIN_EXE_gmclab"))
        .args(["constants", "--config", cfg.to_str().unwrap(), "--out", "rel"])
        .env("GMCLAB_OUT", root.path())
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(root.path().join("rel/constants.json").exists());
}

#[test]
fn statistical_commands_write_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_config();
    for (cmd, files) in [
        ("synthesize", &["synthesize.json", "synthesize.csv", "fields.bin", "fields.json", "fields_eps.bin"][..]),
        ("scan-phase", &["scan_phase.json", "scan_phase.csv", "scan_phase_moments.csv"][..]),
        ("tightness", &["tightness.json", "tightness.csv"][..]),
        ("limit-test", &["limit_test.json", "limit_test.csv"][..]),
        ("qv-test", &["qv_test.json", "qv_test.csv"][..]),
    ] {
        let o = gmclab(&[cmd, "--config", cfg.to_str().unwrap(), "--replicas", "100"], dir.path());
        assert!(o.status.code().is_some_and(|c| c <= 1), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
        for f in files {
            assert!(dir.path().join(f).exists(), "{cmd}: missing {f}");
        }
    }
    let scan = std::fs::read_to_string(dir.path().join("scan_phase.csv")).unwrap();
    let slopes: Vec<f64> = scan.lines().skip(1).map(|l| l.split(',').nth(4).unwrap().parse().unwrap()).collect();
    // the larger |γ|² has the steeper exponent
    assert!(slopes[0] < slopes[1], "{slopes:?}");
    let bin = std::fs::metadata(dir.path().join("fields.bin")).unwrap().len();
    assert_eq!(bin, 100 * 512 * 8);
}
