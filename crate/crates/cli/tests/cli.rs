use serde_json::Value;
use std::path::Path;
use std::process::{Command, Output};

fn spinscape(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spinscape"))
        .arg("--out-dir")
        .arg(dir)
        .args(args)
        .env_remove("SPINSCAPE_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn rows(path: &Path) -> Vec<Vec<f64>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect()
}

fn manifest(dir: &Path, name: &str) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join(format!("{name}.manifest.json"))).unwrap()).unwrap()
}

#[test]
fn thresholds_for_h20() {
    let dir = tempfile::tempdir().unwrap();
    let out = spinscape(dir.path(), &["thresholds", "--H", "20", "--kmax", "3"]);
    assert!(out.status.success());
    let r = rows(&dir.path().join("thresholds.csv"));
    assert_eq!(r.len(), 4);
    assert!(r.windows(2).all(|w| w[0][1] > w[1][1]));
    assert!((r[0][1] - 2.3406789983).abs() < 1e-9);
    let m = manifest(dir.path(), "thresholds");
    assert_eq!(m["config"]["H"], 20);
    assert_eq!(m["outputs"][0], "thresholds.csv");
}

#[test]
fn repeated_runs_write_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("thresholds.csv");
    spinscape(dir.path(), &["thresholds", "--H", "7", "--kmax", "5"]);
    let first = std::fs::read(&path).unwrap();
    spinscape(dir.path(), &["thresholds", "--H", "7", "--kmax", "5"]);
    assert_eq!(first, std::fs::read(&path).unwrap());
    let stray = std::fs::read_dir(dir.path())
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().contains(".tmp"))
        .count();
    assert_eq!(stray, 0);
}

#[test]
fn invalid_h_reports_json_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = spinscape(dir.path(), &["thresholds", "--H", "2"]);
    assert_eq!(out.status.code(), Some(2));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "invalid_argument");
    let out = spinscape(dir.path(), &["thresholds"]);
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "usage");
}

#[test]
fn curves_have_the_expected_shape() {
    let dir = tempfile::tempdir().unwrap();
    let out = spinscape(dir.path(), &["curves", "--H", "20", "--u-min", "-2.5", "--u-max", "0.5", "--points", "121"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r = rows(&dir.path().join("curves.csv"));
    assert_eq!(r.len(), 121);
    let plateau = 0.5 * 19f64.ln();
    for w in r.windows(2) {
        assert!(w[1][1] >= w[0][1] - 1e-12);
    }
    for row in &r {
        if row[0] >= 0.0 {
            assert!((row[1] - plateau).abs() < 1e-9);
        }
        assert!(row[2..].windows(2).all(|p| p[1] <= p[0]));
    }
    let svg = std::fs::read_to_string(dir.path().join("curves.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.matches("<polyline").count() >= 6);
}

#[test]
fn exact_term_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let out = spinscape(dir.path(), &["exact-term", "--H", "3", "--N", "100", "--rho", "0.1,0,0", "--u", "-1.8"]);
    assert!(out.status.success());
    let r: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("exact_term.json")).unwrap()).unwrap();
    let spec = spinscape::surrogate::SurrogateSpec::new(3, 100, vec![0.1, 0.0, 0.0]).unwrap();
    let lib = spinscape::complexity::exact_leading_complexity(&spec, -1.8, Default::default()).unwrap();
    assert!((r["log_leading"].as_f64().unwrap() - lib.log_leading).abs() < 1e-12);
    let out = spinscape(dir.path(), &["exact-term", "--H", "3", "--N", "100", "--u", "-1.0"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn thread_count_does_not_change_results() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args =
        ["mc-kacrice", "--H", "3", "--N", "4", "--rho", "0.2,0,0", "--u", "0.3", "--samples", "600", "--seed", "5"];
    let one = spinscape(a.path(), &[&["--threads", "1"], &args[..]].concat());
    let three = spinscape(b.path(), &[&["--threads", "3"], &args[..]].concat());
    assert!(one.status.success() && three.status.success());
    let read = |d: &Path| std::fs::read(d.join("mc_kacrice.json")).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
    assert_eq!(manifest(a.path(), "mc-kacrice")["seed"], 5);
}

#[test]
fn enumerate_and_probe_write_their_tables() {
    let dir = tempfile::tempdir().unwrap();
    let out =
        spinscape(dir.path(), &["enumerate", "--H", "3", "--N", "3", "--trials", "2", "--grid", "60", "--kmax", "1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let points = std::fs::read_to_string(dir.path().join("critical_points.csv")).unwrap();
    assert!(points.lines().count() > 2);
    let census = std::fs::read_to_string(dir.path().join("census.csv")).unwrap();
    assert_eq!(census.lines().count(), 1 + 4 * 3);

    let out = spinscape(dir.path(), &["probe", "--arch", "20,30,10", "--act", "hard-tanh", "--n", "300"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("probe.csv")).unwrap();
    assert!(csv.starts_with("scenario,piece,item,ratio\n"));
    let m = manifest(dir.path(), "probe");
    assert_eq!(m["config"]["act"], "hard-tanh");
    assert!(m["outputs"].as_array().unwrap().iter().any(|o| o == "probe.json"));
}

#[test]
fn output_dir_defaults_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_spinscape"))
        .args(["thresholds", "--H", "5"])
        .env("SPINSCAPE_OUT_DIR", dir.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.path().join("thresholds.manifest.json").exists());
}

#[test]
fn selfcheck_passes_quickly() {
    let dir = tempfile::tempdir().unwrap();
    let t = std::time::Instant::now();
    let out = spinscape(dir.path(), &["selfcheck"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(t.elapsed().as_secs() <= 60);
    assert!(!String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}
