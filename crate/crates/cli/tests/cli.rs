use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn abreu(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_abreu"))
        .args(args)
        .env("ABREU_LOG", "quiet")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn dir(root: &Path, name: &str) -> String {
    root.join(name).to_str().unwrap().to_string()
}

fn quadratic_run(root: &Path) -> PathBuf {
    let out = dir(root, "run1");
    let o = abreu(&[
        "solve-abreu", "--domain", "disk", "--n", "65", "--q", "2", "--phi", "quad", "--psi", "const:1", "--f0z",
        "const:2", "--out", &out,
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    PathBuf::from(out)
}

#[test]
fn exact_quadratic_run() {
    let tmp = tempfile::tempdir().unwrap();
    let run = quadratic_run(tmp.path());
    for f in ["u.fld", "w.fld", "report.json", "config.json", "timing.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let r = json(&run.join("report.json"));
    assert_eq!(r["converged"], true);
    assert!(r["exact"]["u_sup"].as_f64().unwrap() <= 5e-3);
    let c = json(&run.join("config.json"));
    assert_eq!(c["f0z"], "const:2");
    assert_eq!(c["max_outer"], 200);
}

#[test]
fn config_echo_reproduces_run() {
    let tmp = tempfile::tempdir().unwrap();
    let run = quadratic_run(tmp.path());
    let again = dir(tmp.path(), "again");
    let o = abreu(&["solve-abreu", "--config", run.join("config.json").to_str().unwrap(), "--out", &again]);
    assert_eq!(code(&o), 0);
    for f in ["u.fld", "w.fld", "config.json"] {
        assert_eq!(
            std::fs::read(run.join(f)).unwrap(),
            std::fs::read(Path::new(&again).join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn field_files_round_trip() {
    use abreu_core::geometry::{build_grid, fld, ConvexDomain};
    let tmp = tempfile::tempdir().unwrap();
    let run = quadratic_run(tmp.path());
    let grid = std::sync::Arc::new(build_grid(&ConvexDomain::disk(0.0, 0.0, 1.0), 65).unwrap());
    let text = std::fs::read_to_string(run.join("u.fld")).unwrap();
    let u = fld::parse(&text).unwrap().to_scalar(&grid).unwrap();
    assert_eq!(fld::scalar_to_string(&u, "u", None), text);
}

#[test]
fn delta_gate() {
    let tmp = tempfile::tempdir().unwrap();
    let o = abreu(&["solve-abreu", "--q", "1.5", "--delta", "0", "--out", &dir(tmp.path(), "x")]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("delta must be positive for q<2"), "{}", stderr(&o));
}

#[test]
fn manufactured_refinement_ratio() {
    let tmp = tempfile::tempdir().unwrap();
    let errs: Vec<f64> = ["33", "65"]
        .iter()
        .map(|n| {
            let out = dir(tmp.path(), n);
            let o = abreu(&["solve-abreu", "--n", n, "--phi", "exp", "--psi", "wexp", "--f0z", "mms", "--out", &out]);
            assert_eq!(code(&o), 0, "{}", stderr(&o));
            json(&Path::new(&out).join("report.json"))["exact"]["u_sup"].as_f64().unwrap()
        })
        .collect();
    let ratio = errs[0] / errs[1];
    assert!((3.0..=5.0).contains(&ratio), "{ratio}");
}

#[test]
fn duality_checks() {
    let tmp = tempfile::tempdir().unwrap();
    let run = quadratic_run(tmp.path());
    let o = abreu(&["check-duality", "--run", run.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r = json(&run.join("duality_report.json"));
    assert_eq!(r["pass"], true);
    assert_eq!(r["checks"].as_array().unwrap().len(), 4);

    let o = abreu(&[
        "check-duality", "--run", run.to_str().unwrap(), "--out", &dir(tmp.path(), "tight"), "--max-involution", "0",
        "--max-reciprocal", "0", "--max-lt", "0", "--max-plt", "0",
    ]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("involution"));
}

#[test]
fn corrupted_field_fails_reciprocal_check() {
    let tmp = tempfile::tempdir().unwrap();
    let run = quadratic_run(tmp.path());
    let path = run.join("u.fld");
    let mut lines: Vec<String> = std::fs::read_to_string(&path).unwrap().lines().map(String::from).collect();
    let (nx, ny) = {
        let t: Vec<usize> = lines[0].split_whitespace().take(2).map(|s| s.parse().unwrap()).collect();
        (t[0], t[1])
    };
    let k = (ny / 2) * nx + nx / 2 + 5;
    let v: f64 = lines[2 + k].parse().unwrap();
    lines[2 + k] = format!("{}", v + 0.5);
    std::fs::write(&path, lines.join("\n") + "\n").unwrap();
    let o = abreu(&["check-duality", "--run", run.to_str().unwrap()]);
    assert_eq!(code(&o), 3);
    let r = json(&run.join("duality_report.json"));
    let rec = r["checks"]
        .as_array()
        .unwrap()
        .iter()
        .find(|c| c["name"] == "reciprocal_det")
        .unwrap()
        .clone();
    assert_eq!(rec["pass"], false);
}

#[test]
fn classic_rc_run() {
    let tmp = tempfile::tempdir().unwrap();
    let out = dir(tmp.path(), "rc");
    let o = abreu(&["solve-rc", "--n", "33", "--eps", "0.1", "--out", &out]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r = json(&Path::new(&out).join("report.json"));
    assert_eq!(r["report"]["converged"], true);
    assert_eq!(r["convex"], true);
    assert!(r["penalty_l2"].as_f64().unwrap() >= 0.0);
    assert!(Path::new(&out).join("utilde.fld").exists());
}

#[test]
fn sweep_table_is_monotone() {
    let tmp = tempfile::tempdir().unwrap();
    let out = dir(tmp.path(), "sweep");
    let o = abreu(&["sweep", "--n", "33", "--eps-list", "0.3,0.1,0.03", "--jobs", "1", "--out", &out]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = std::fs::read_to_string(Path::new(&out).join("sweep.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "eps,dist_oracle,penalty_l2,energy,outer_iters,converged");
    let dist: Vec<f64> = lines.map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(dist.len(), 3);
    assert!(dist.windows(2).all(|w| w[1] <= 1.05 * w[0]), "{dist:?}");
    for e in ["0.3", "0.1", "0.03"] {
        let d = Path::new(&out).join(format!("eps_{e}"));
        assert!(d.join("u.fld").exists() && d.join("report.json").exists() && d.join("config.json").exists());
    }
}

#[test]
fn gamma_gate() {
    let tmp = tempfile::tempdir().unwrap();
    let o = abreu(&["solve-rc", "--q", "3", "--gamma", "linear:1,0.2,0", "--out", &dir(tmp.path(), "x")]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("gamma must be constant for q>2"), "{}", stderr(&o));
}

#[test]
fn oracle_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = dir(tmp.path(), "o");
    let o = abreu(&["oracle-min", "--n", "17", "--out", &out]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r = json(&Path::new(&out).join("report.json"));
    assert!(r["objective"].as_f64().unwrap().abs() < 1e-6);
    let o = abreu(&["oracle-min", "--n", "65", "--out", &out]);
    assert_eq!(code(&o), 2);
}

#[test]
fn configuration_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.json");
    std::fs::write(&cfg, r#"{"n": 33, "colour": "red"}"#).unwrap();
    let o = abreu(&["solve-abreu", "--config", cfg.to_str().unwrap(), "--out", &dir(tmp.path(), "x")]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("colour"));
    let o = abreu(&["solve-abreu", "--domain", "hexagon", "--out", &dir(tmp.path(), "y")]);
    assert_eq!(code(&o), 2);
    let o = abreu(&["sweep", "--eps-list", "0.1,0.3", "--out", &dir(tmp.path(), "z")]);
    assert_eq!(code(&o), 2);
    let o = abreu(&["check-duality", "--run", tmp.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn quiet_logging() {
    let tmp = tempfile::tempdir().unwrap();
    let o = abreu(&["solve-abreu", "--n", "17", "--out", &dir(tmp.path(), "q")]);
    assert_eq!(code(&o), 0);
    assert!(o.stderr.is_empty(), "{}", stderr(&o));
}
