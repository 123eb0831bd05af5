use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const ELLIPSE: &str = "dim = 2\nfamily = \"ellipsoid\"\n\n[params]\naxes = [1.0, 2.0]\n";
const DISC: &str = "dim = 2\nfamily = \"ball\"\n\n[params]\nradius = 1.0\n";
const BALL3: &str = "dim = 3\nfamily = \"ball\"\n\n[params]\nradius = 1.0\n";

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn hbm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hbm"))
        .current_dir(dir)
        .env_remove("HBM_OUT_DIR")
        .args(args)
        .output()
        .unwrap()
}

fn report(path: PathBuf) -> toml::Table {
    fs::read_to_string(&path).unwrap().parse().unwrap()
}

fn float(t: &toml::Table, section: &str, key: &str) -> f64 {
    t[section][key].as_float().unwrap()
}

#[test]
fn analyze_reports_pinching_of_ellipse_and_ball() {
    let dir = TempDir::new().unwrap();
    write(dir.path(), "ellipse.toml", ELLIPSE);
    write(dir.path(), "disc.toml", DISC);
    let out = hbm(dir.path(), &["analyze", "--spec", "ellipse.toml", "--out", "r"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let t = report(dir.path().join("r/ellipse-analyze.toml"));
    assert!((float(&t, "pinching", "gamma") - 4.0).abs() < 1e-8);
    assert!((float(&t, "pinching", "p_gamma") - 0.25).abs() < 1e-8);
    assert!((t["volume"].as_float().unwrap() - 2.0 * std::f64::consts::PI).abs() < 1e-10);
    assert!(t["non_rigorous"].as_bool().unwrap());
    assert_eq!(t["config"]["resolution"].as_integer(), Some(256));

    let out = hbm(dir.path(), &["analyze", "--spec", "disc.toml", "--out", "r"]);
    assert!(out.status.success());
    let t = report(dir.path().join("r/disc-analyze.toml"));
    assert!((float(&t, "pinching", "gamma") - 1.0).abs() < 1e-10);
    assert!((float(&t, "pinching", "p_gamma") + 2.0).abs() < 1e-10);
}

#[test]
fn malformed_specs_exit_with_input_error() {
    let dir = TempDir::new().unwrap();
    write(dir.path(), "bad.toml", "dim = 2\nfamily = \"ellipsoid\"\n[params]\naxes = [1.0]\n");
    let out = hbm(dir.path(), &["analyze", "--spec", "bad.toml"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("params.axes"));

    write(dir.path(), "typo.toml", "dim = 2\nfamly = \"ball\"\n");
    let out = hbm(dir.path(), &["analyze", "--spec", "typo.toml"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("famly"));

    let out = hbm(dir.path(), &["analyze", "--spec", "missing.toml"]);
    assert_eq!(out.status.code(), Some(1));
    let out = hbm(dir.path(), &["analyze"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn non_convex_body_is_listed() {
    let dir = TempDir::new().unwrap();
    write(
        dir.path(),
        "wobbly.toml",
        "dim = 2\nfamily = \"harmonic-perturbation\"\n[params]\nradius = 1.0\n[[params.modes]]\ndegree = 2\ncoefficient = 10.0\n",
    );
    let out = hbm(dir.path(), &["analyze", "--spec", "wobbly.toml", "--out", "r"]);
    assert_eq!(out.status.code(), Some(1));
    let t = report(dir.path().join("r/wobbly-analyze.toml"));
    assert!(!t["validity"]["pass"].as_bool().unwrap());
    assert!(!t["failures"].as_array().unwrap().is_empty());
}

#[test]
fn ball_spectrum_csv_and_determinism() {
    let dir = TempDir::new().unwrap();
    write(dir.path(), "ball3.toml", BALL3);
    let args = ["spectrum", "--spec", "ball3.toml", "--resolution", "32", "--degree", "8", "--seed", "7", "--out", "r"];
    let out = hbm(dir.path(), &args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("r/ball3-eigenvalues.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 81);
    let value = |r: &Vec<&str>| r[1].parse::<f64>().unwrap();
    assert!(value(&rows[0]).abs() < 1e-10 && rows[0][2] == "even");
    for r in &rows[1..4] {
        assert!((value(r) - 2.0).abs() < 1e-10 && r[2] == "odd" && r[4] == "true");
    }
    assert!((value(&rows[4]) - 6.0).abs() < 1e-10 && rows[4][2] == "even");

    let t = report(dir.path().join("r/ball3-spectrum.toml"));
    assert!(t["converged"].as_bool().unwrap());
    assert_eq!(t["lambda1_multiplicity"].as_integer(), Some(3));
    assert!(t["bochner"]["pass"].as_bool().unwrap() && t["local_bm"]["pass"].as_bool().unwrap());
    assert_eq!(t["config"]["seed"].as_integer(), Some(7));

    let first = fs::read(dir.path().join("r/ball3-spectrum.toml")).unwrap();
    let out = hbm(dir.path(), &args);
    assert!(out.status.success());
    assert_eq!(first, fs::read(dir.path().join("r/ball3-spectrum.toml")).unwrap());
}

#[test]
fn spectrum_resolution_problems() {
    let dir = TempDir::new().unwrap();
    write(dir.path(), "ball3.toml", BALL3);
    // basis does not fit the grid at all
    let out = hbm(dir.path(), &["spectrum", "--spec", "ball3.toml", "--resolution", "8", "--degree", "8", "--out", "r"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--resolution"));
    // basis fits but the refinement check does not
    let out = hbm(dir.path(), &["spectrum", "--spec", "ball3.toml", "--resolution", "16", "--degree", "6", "--out", "r"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("increase --resolution"));
    let t = report(dir.path().join("r/ball3-spectrum.toml"));
    assert!(!t["converged"].as_bool().unwrap());
}

#[test]
fn certify_entries_and_rejections() {
    let dir = TempDir::new().unwrap();
    write(dir.path(), "ellipse.toml", ELLIPSE);
    let out = hbm(dir.path(), &["certify", "--spec", "ellipse.toml", "--p-list", "0.5,0.1,-2,-3", "--out", "r"]);
    assert_eq!(out.status.code(), Some(1));
    let t = report(dir.path().join("r/ellipse-certify.toml"));
    let certs = t["certificates"].as_array().unwrap();
    let status: Vec<&str> = certs.iter().map(|c| c["status"].as_str().unwrap()).collect();
    assert_eq!(status, ["certified-by-pinching", "certified-by-spectrum", "not-certified", "rejected"]);
    assert!(certs[0]["certificate"]["disclaimer"].as_str().unwrap().contains("non-rigorous"));
    assert_eq!(t["bound_curve"].as_array().unwrap().len(), 50);

    let out = hbm(dir.path(), &["certify", "--spec", "ellipse.toml", "--p", "0.5", "--out", "r"]);
    assert!(out.status.success());
    let out = hbm(dir.path(), &["certify", "--spec", "ellipse.toml", "--out", "r"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn output_directory_from_environment() {
    let dir = TempDir::new().unwrap();
    write(dir.path(), "ellipse.toml", ELLIPSE);
    let out = Command::new(env!("CARGO_BIN_EXE_hbm"))
        .current_dir(dir.path())
        .env("HBM_OUT_DIR", "from-env")
        .args(["analyze", "--spec", "ellipse.toml", "--resolution", "128"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.path().join("from-env/ellipse-analyze.toml").exists());
}

#[test]
fn inequality_against_given_bodies() {
    let dir = TempDir::new().unwrap();
    write(dir.path(), "ellipse.toml", ELLIPSE);
    write(dir.path(), "disc.toml", DISC);
    let out = hbm(
        dir.path(),
        &["ineq", "--spec", "ellipse.toml", "--other", "disc.toml", "--other", "ellipse.toml", "--p-list=-1,0,1", "--out", "r"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let t = report(dir.path().join("r/ellipse-ineq.toml"));
    let rows = t["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 6);
    for r in rows {
        assert!(r["gap"].as_float().unwrap() >= -1e-6);
        assert!(r["coherent"].as_bool().unwrap());
    }
    // L = K is the equality case
    assert!(rows[3..].iter().all(|r| r["gap"].as_float().unwrap().abs() < 1e-8));

    let out = hbm(dir.path(), &["ineq", "--spec", "ellipse.toml", "--p", "-2", "--out", "r"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn flow_guards() {
    let dir = TempDir::new().unwrap();
    write(dir.path(), "ball3.toml", BALL3);
    write(dir.path(), "disc.toml", DISC);
    let out = hbm(dir.path(), &["flow", "--spec", "ball3.toml", "--p", "0", "--out", "r"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--allow-3d"));
    // critical exponent: refused, report still written
    let out = hbm(dir.path(), &["flow", "--spec", "disc.toml", "--p", "-2", "--out", "r"]);
    assert_eq!(out.status.code(), Some(1));
    let t = report(dir.path().join("r/disc-flow.toml"));
    assert_eq!(t["experiment"]["consistency"].as_str(), Some("refused"));
}

#[test]
fn flow_from_seeded_bodies_to_the_disc() {
    let dir = TempDir::new().unwrap();
    write(dir.path(), "disc.toml", DISC);
    let out = hbm(dir.path(), &["flow", "--spec", "disc.toml", "--p", "0", "--resolution", "64", "--degree", "8", "--seed", "3", "--out", "r"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let t = report(dir.path().join("r/disc-flow.toml"));
    assert_eq!(t["experiment"]["consistency"].as_str(), Some("consistent"));
    let series = t["series"].as_array().unwrap();
    assert_eq!(series.len(), 2);
    let csv = fs::read_to_string(dir.path().join("r").join(series[0].as_str().unwrap())).unwrap();
    assert!(csv.starts_with("step,time,dt,volume,residual,rate,min_h,max_h"));
}
