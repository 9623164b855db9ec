use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use specrnd::market::{bs_put, MarketParams, RNG_ALGORITHM};
use tempfile::TempDir;

fn specrnd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_specrnd"))
        .args(args)
        .env_remove("SPECRND_LOG")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = specrnd(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    specrnd(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn table1() -> (PathBuf, PathBuf) {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/data");
    (dir.join("sp500_20050105.csv"), dir.join("sp500_20050105.toml"))
}

/// Header and rows of a CSV file, numeric cells parsed.
fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<f64>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.unwrap().iter().map(|c| c.parse().unwrap()).collect())
        .collect();
    (header, rows)
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn assert_same_dirs(a: &Path, b: &Path) {
    let names = |d: &Path| {
        let mut v: Vec<_> = fs::read_dir(d)
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        v.sort();
        v
    };
    assert_eq!(names(a), names(b));
    for n in names(a) {
        assert_eq!(
            fs::read(a.join(&n)).unwrap(),
            fs::read(b.join(&n)).unwrap(),
            "{n:?} differs"
        );
    }
}

fn replay_matches(dir: &Path, tmp: &TempDir) {
    let again = tmp.path().join("replayed");
    ok(&["replay", "--manifest", s(&dir.join("manifest.json")), "--out", s(&again)]);
    assert_same_dirs(dir, &again);
}

#[test]
fn basis_tables() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("basis");
    ok(&["basis", "--n-max", "3", "--grid-points", "201", "--out", s(&out)]);

    let (header, eigen) = read_csv(&out.join("eigen.csv"));
    assert_eq!(header[1], "rho");
    assert!((eigen[0][1] - 1.875104069).abs() < 1e-8, "rho_0 = {}", eigen[0][1]);
    assert!(eigen.windows(2).all(|w| w[1][4] < w[0][4]), "lambda not decreasing");

    let (header, curves) = read_csv(&out.join("curves.csv"));
    assert_eq!(header.iter().filter(|h| h.starts_with("phi_")).count(), 4);
    assert_eq!(header.iter().filter(|h| h.starts_with("psi_")).count(), 4);
    assert_eq!(curves.len(), 201);
    assert!(out.join("basis.gp").exists());
    replay_matches(&out, &tmp);
}

#[test]
fn simulate_exports_two_cutoffs_and_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let args = |o: &Path| {
        vec!["simulate", "--strikes", "5", "--seed", "11", "--grid-points", "401", "--out"]
            .into_iter()
            .map(String::from)
            .chain([s(o).to_string()])
            .collect::<Vec<_>>()
    };
    let run = |o: &Path| {
        let v = args(o);
        ok(&v.iter().map(String::as_str).collect::<Vec<_>>())
    };
    run(&a);
    run(&b);
    assert_same_dirs(&a, &b);

    let m = manifest(&a);
    assert_eq!(m["rng_algorithm"], RNG_ALGORITHM);
    assert_eq!(m["config"]["seed"], 11);
    let n = m["result"]["first"]["N_star"].as_u64().unwrap();
    let (header, rows) = read_csv(&a.join("density.csv"));
    assert_eq!(header[1], format!("q_{n}"));
    assert_eq!(header[2], format!("q_{}", n + 1));
    assert_eq!(rows.len(), 401);
    replay_matches(&a, &tmp);
}

#[test]
fn simulated_fits_respect_all_fifty_bands() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("sim");
    ok(&["simulate", "--strikes", "50", "--seed", "2", "--grid-points", "101", "--out", s(&out)]);
    let (_, rows) = read_csv(&out.join("fitted.csv"));
    assert_eq!(rows.len(), 50);
    for r in &rows {
        for fit in &r[3..5] {
            assert!(*fit >= r[1] - 1e-6 && *fit <= r[2] + 1e-6, "{r:?}");
        }
    }
}

#[test]
fn estimate_on_simulated_sheet() {
    let tmp = TempDir::new().unwrap();
    let sim = tmp.path().join("sim");
    ok(&["simulate", "--strikes", "10", "--seed", "4", "--grid-points", "51", "--out", s(&sim)]);
    let out = tmp.path().join("est");
    let stdout = ok(&[
        "estimate",
        "--quotes",
        s(&sim.join("quotes.csv")),
        "--params",
        s(&sim.join("params.toml")),
        "--n-max",
        "40",
        "--grid-points",
        "101",
        "--out",
        s(&out),
    ]);
    assert!(stdout.starts_with("N_star = "));
    let diag: Value =
        serde_json::from_str(&fs::read_to_string(out.join("diagnostics.json")).unwrap()).unwrap();
    assert_eq!(diag["status"], "Optimal");
    assert!((diag["mass"].as_f64().unwrap() - 1.0).abs() < 1e-3);
    let (_, trace) = read_csv(&out.join("trace.csv"));
    assert_eq!(trace.last().unwrap()[0] as u64, diag["N_star"].as_u64().unwrap());
    assert_eq!(manifest(&out)["config"]["b_factor"], 2.0);
    replay_matches(&out, &tmp);
}

#[test]
fn estimate_table1_fits_inside_bands() {
    let tmp = TempDir::new().unwrap();
    let (quotes, params) = table1();
    let out = tmp.path().join("t1");
    ok(&[
        "estimate",
        "--quotes",
        s(&quotes),
        "--params",
        s(&params),
        "--grid-points",
        "201",
        "--out",
        s(&out),
    ]);
    // B factor comes from the params file
    assert_eq!(manifest(&out)["config"]["b_factor"], 1.4);
    let (_, rows) = read_csv(&out.join("fitted.csv"));
    assert!(rows.iter().all(|r| r[3] >= r[1] - 1e-6 && r[3] <= r[2] + 1e-6));
}

#[test]
fn fit_lognormal_table1() {
    let tmp = TempDir::new().unwrap();
    let (quotes, params) = table1();
    let out = tmp.path().join("fit");
    let stdout = ok(&["fit-lognormal", "--quotes", s(&quotes), "--params", s(&params), "--out", s(&out)]);
    let sigma: f64 = stdout
        .lines()
        .next()
        .and_then(|l| l.strip_prefix("sigma_opt = "))
        .unwrap()
        .parse()
        .unwrap();
    assert!((sigma - 0.143).abs() <= 0.002, "sigma = {sigma}");
    assert!(stdout.contains("OUTSIDE"));
    let (_, rows) = read_csv(&out.join("residuals.csv"));
    assert!(rows.iter().any(|r| r[6] == 1.0));
    replay_matches(&out, &tmp);
}

#[test]
fn fit_lognormal_zero_spread_sheet_has_zero_residuals() {
    let tmp = TempDir::new().unwrap();
    let p = MarketParams::new(100.0, 0.01, 0.0, 0.5).unwrap();
    let mut csv = String::from("strike,bid,ask\n");
    for k in [80.0, 90.0, 100.0, 110.0, 120.0] {
        let v = bs_put(&p, 0.25, k).unwrap();
        csv += &format!("{k},{v:.17e},{v:.17e}\n");
    }
    let quotes = tmp.path().join("q.csv");
    let params = tmp.path().join("p.toml");
    fs::write(&quotes, csv).unwrap();
    fs::write(&params, "S0 = 100.0\nr = 0.01\ndelta = 0.0\ntau = 0.5\n").unwrap();
    let out = tmp.path().join("fit");
    ok(&["fit-lognormal", "--quotes", s(&quotes), "--params", s(&params), "--out", s(&out)]);
    let (_, rows) = read_csv(&out.join("residuals.csv"));
    for r in rows {
        assert!(r[5].abs() < 1e-6, "residual {}", r[5]);
    }
}

#[test]
fn exit_codes() {
    let tmp = TempDir::new().unwrap();
    let (quotes, params) = table1();
    let out = tmp.path().join("x");
    let o = s(&out);
    assert_eq!(code(&["estimate", "--quotes", "/no/such.csv", "--params", s(&params), "--out", o]), 3);
    assert_eq!(code(&["estimate", "--bogus"]), 3);
    assert_eq!(code(&["basis", "--grid-points", "1", "--out", o]), 3);

    let bad = tmp.path().join("bad.csv");
    fs::write(&bad, "strike,bid,ask\n100,abc,2\n").unwrap();
    assert_eq!(code(&["fit-lognormal", "--quotes", s(&bad), "--params", s(&params)]), 3);

    // no cutoff this small fits the real quotes
    assert_eq!(
        code(&["estimate", "--quotes", s(&quotes), "--params", s(&params), "--n-max", "3", "--out", o]),
        2
    );
    assert_eq!(code(&["--help"]), 0);
}
