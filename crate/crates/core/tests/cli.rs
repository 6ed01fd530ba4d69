use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn nonrival(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nonrival"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_config(dir: &TempDir, body: &str) -> String {
    let p = dir.path().join("config.toml");
    fs::write(&p, body).unwrap();
    p.to_string_lossy().into_owned()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

const WORKED: &str = r#"
seed = 11
samples = 12
mc_samples = 20000

[market]
n_agents = 2
n_principals = 2

[contract]
a = [[2.0, 2.0], [2.0, 2.0]]
"#;

const COMPETING: &str = r#"
seed = 5
samples = 10
mc_samples = 20000

[market]
n_agents = 2
n_principals = 2
zeta = [[0.0, 1.0], [1.0, 0.0]]

[start]
a = [[2.0, 2.0], [2.0, 2.0]]
"#;

#[test]
fn simplex_rows_sum_to_six() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, WORKED);
    let out = dir.path().join("simplex");
    let res = nonrival(&["--config", &cfg, "--out", path_str(&out), "simplex"]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));

    let mut rdr = csv::Reader::from_path(out.join("simplex_points.csv")).unwrap();
    let header = rdr.headers().unwrap().clone();
    let col = |name: &str| header.iter().position(|h| h == name).unwrap();
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec.unwrap();
        rows += 1;
        for i in 0..2 {
            let total: f64 = (0..2)
                .map(|j| rec[col(&format!("c[{j}][{i}]"))].parse::<f64>().unwrap())
                .sum();
            assert!((total - 6.0).abs() < 1e-12, "{total}");
            for j in 0..2 {
                let c: f64 = rec[col(&format!("c[{j}][{i}]"))].parse().unwrap();
                assert!(c >= 2.0 - 1e-12, "{c}");
            }
        }
    }
    assert_eq!(rows, 12);

    let summary = json(&out.join("simplex.json"));
    assert_eq!(summary["g"][0].as_f64().unwrap(), 6.0);
    assert_eq!(summary["single_point"], Value::Bool(false));
    assert!(out.join("manifest.json").exists());
}

#[test]
fn run_on_competing_buyers() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, COMPETING);
    let out = dir.path().join("run");
    let res = nonrival(&["--config", &cfg, "--out", path_str(&out), "run"]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    assert_eq!(String::from_utf8_lossy(&res.stdout).trim(), "success");

    let r = json(&out.join("results.json"));
    let checks = &r["checks"];
    for key in [
        "feasibility",
        "ir_binding",
        "gne_deviation",
        "ve",
        "kkt_lambda",
        "kkt_stationarity",
    ] {
        assert_eq!(checks[key]["pass"], Value::Bool(true), "{key}");
    }
    assert_eq!(checks["points"].as_u64(), Some(10));
    assert_eq!(checks["interior_points"].as_u64(), Some(10));
    assert!(r["gne"]["note"]
        .as_str()
        .unwrap()
        .contains("not a global proof"));

    let eq = json(&out.join("equilibrium.json"));
    for row in eq["a"].as_array().unwrap() {
        for x in row.as_array().unwrap() {
            assert!((x.as_f64().unwrap() - 2.0).abs() < 1e-9);
        }
    }
    let manifest = json(&out.join("manifest.json"));
    assert_eq!(manifest["command"], "run");
    assert_eq!(manifest["seed"].as_u64(), Some(5));
}

#[test]
fn gne_then_verify_round_trip() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, COMPETING);
    let solved = dir.path().join("gne");
    let res = nonrival(&["--config", &cfg, "--out", path_str(&solved), "gne"]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let eq_path = solved.join("equilibrium.json");
    assert!(solved.join("gne.json").exists());

    let checked = dir.path().join("verify");
    let res = nonrival(&[
        "--out",
        path_str(&checked),
        "verify",
        "--equilibrium",
        path_str(&eq_path),
    ]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let v = json(&checked.join("verify.json"));
    assert_eq!(v["outcome"], "success");

    // Paying agent 0 an extra 0.1 leaves it a rent: IR no longer binds.
    let mut eq = json(&eq_path);
    let c00 = eq["c"][0][0].as_f64().unwrap();
    eq["c"][0][0] = Value::from(c00 + 0.1);
    let tampered = dir.path().join("tampered.json");
    fs::write(&tampered, serde_json::to_string_pretty(&eq).unwrap()).unwrap();
    let res = nonrival(&[
        "--out",
        path_str(&checked),
        "verify",
        "--equilibrium",
        path_str(&tampered),
    ]);
    assert_eq!(code(&res), 4, "{}", stderr(&res));
    let v = json(&checked.join("verify.json"));
    assert_eq!(v["outcome"], "verification-failed");
    assert_eq!(v["checks"]["ir_binding"]["pass"], Value::Bool(false));
    assert!((v["checks"]["ir_binding"]["worst"].as_f64().unwrap() - 0.1).abs() < 1e-9);
}

#[test]
fn stage2_and_simulate() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, WORKED);
    let out = dir.path().join("s2");
    let res = nonrival(&["--config", &cfg, "--out", path_str(&out), "stage2"]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let s2 = json(&out.join("stage2.json"));
    for e in s2["e_star"].as_array().unwrap() {
        assert!((e.as_f64().unwrap() - 2.0).abs() < 1e-12);
    }
    assert_eq!(s2["independent_of_c"], Value::Bool(true));

    let out = dir.path().join("sim");
    let res = nonrival(&[
        "--config",
        &cfg,
        "--out",
        path_str(&out),
        "--mc-samples",
        "5000",
        "simulate",
    ]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let sim = json(&out.join("simulation.json"));
    assert_eq!(sim["estimates"]["n_samples"].as_u64(), Some(5000));
    assert_eq!(sim["pass"], Value::Bool(true));
}

#[test]
fn zero_slopes_simulate_exactly() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        &dir,
        r#"
seed = 3
mc_samples = 1000

[market]
n_agents = 3
n_principals = 2

[contract]
a = [[0.0, 0.0, 0.0], [0.0, 0.0, 0.0]]
c = [[0.5, 0.25, 1.0], [0.0, 0.0, 2.0]]
efforts = [1.0, 2.0, 3.0]
"#,
    );
    let out = dir.path().join("sim");
    let res = nonrival(&["--config", &cfg, "--out", path_str(&out), "simulate"]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let sim = json(&out.join("simulation.json"));
    let c = [[0.5, 0.25, 1.0], [0.0, 0.0, 2.0]];
    for (j, row) in sim["estimates"]["payments"]
        .as_array()
        .unwrap()
        .iter()
        .enumerate()
    {
        for (i, est) in row.as_array().unwrap().iter().enumerate() {
            assert_eq!(est["std_error"].as_f64(), Some(0.0));
            assert_eq!(est["mean"].as_f64(), Some(c[j][i]));
        }
    }
    for est in sim["estimates"]["utilities"].as_array().unwrap() {
        assert_eq!(est["std_error"].as_f64(), Some(0.0));
    }
}

#[test]
fn bad_config_exits_two() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        &dir,
        r#"
seed = 1
[market]
n_agents = 2
n_principals = 2
[contract]
a = [[2.0, -1.0], [2.0, 2.0]]
"#,
    );
    let res = nonrival(&[
        "--config",
        &cfg,
        "--out",
        path_str(&dir.path().join("x")),
        "stage2",
    ]);
    assert_eq!(code(&res), 2);
    assert!(
        stderr(&res).contains("contract.a[0][1]"),
        "{}",
        stderr(&res)
    );

    let cfg = write_config(
        &dir,
        "seed = 1\n[market]\nn_agents = 2\nn_principals = 2\nbogus = 1\n",
    );
    let res = nonrival(&[
        "--config",
        &cfg,
        "--out",
        path_str(&dir.path().join("x")),
        "run",
    ]);
    assert_eq!(code(&res), 2);
    assert!(stderr(&res).contains("bogus"), "{}", stderr(&res));

    let res = nonrival(&["--out", path_str(&dir.path().join("x")), "run"]);
    assert_eq!(code(&res), 2, "{}", stderr(&res));

    let res = nonrival(&["--config", &cfg, "frobnicate"]);
    assert_eq!(code(&res), 2);
}

#[test]
fn free_riding_market_exits_three() {
    // Two buyers and two sources with no competition: best responses keep
    // raising the slopes and never settle.
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        &dir,
        r#"
seed = 2
samples = 5

[market]
n_agents = 2
n_principals = 2

[solver]
max_iters = 40
"#,
    );
    let out = dir.path().join("run");
    let res = nonrival(&["--config", &cfg, "--out", path_str(&out), "run"]);
    assert_eq!(code(&res), 3, "{}", stderr(&res));
    let r = json(&out.join("results.json"));
    assert_eq!(r["outcome"], "not-converged");
    assert_eq!(r["gne"]["converged"], Value::Bool(false));
}

#[test]
fn report_merges_runs() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, COMPETING);
    let run = dir.path().join("run");
    assert_eq!(
        code(&nonrival(&[
            "--config",
            &cfg,
            "--out",
            path_str(&run),
            "run"
        ])),
        0
    );
    let merged = dir.path().join("report");
    let res = nonrival(&["--out", path_str(&merged), "report", path_str(&run)]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let mut rdr = csv::Reader::from_path(merged.join("summary.csv")).unwrap();
    let header = rdr.headers().unwrap().clone();
    assert!(header.iter().any(|h| h == "ve"));
    let rows: Vec<_> = rdr.records().map(Result::unwrap).collect();
    let outcome = header.iter().position(|h| h == "outcome").unwrap();
    let sources: Vec<_> = rows
        .iter()
        .map(|r| (r[0].to_string(), r[outcome].to_string()))
        .collect();
    assert_eq!(sources.len(), 2, "{sources:?}");
    assert!(sources[0].0.ends_with("results.json") && sources[0].1 == "success");
    // Equilibrium files carry no outcome of their own.
    assert!(sources[1].0.ends_with("equilibrium.json") && sources[1].1.is_empty());
}

#[test]
fn same_seed_same_bytes() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, COMPETING);
    let (x, y) = (dir.path().join("x"), dir.path().join("y"));
    for out in [&x, &y] {
        assert_eq!(
            code(&nonrival(&[
                "--config",
                &cfg,
                "--out",
                path_str(out),
                "run"
            ])),
            0
        );
    }
    for f in ["results.json", "equilibrium.json", "simplex_samples.csv"] {
        assert_eq!(
            fs::read(x.join(f)).unwrap(),
            fs::read(y.join(f)).unwrap(),
            "{f}"
        );
    }
    let z = dir.path().join("z");
    assert_eq!(
        code(&nonrival(&[
            "--config",
            &cfg,
            "--out",
            path_str(&z),
            "--seed",
            "6",
            "run"
        ])),
        0
    );
    assert_ne!(
        fs::read(x.join("simplex_samples.csv")).unwrap(),
        fs::read(z.join("simplex_samples.csv")).unwrap()
    );
}
