use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

const BIN: &str = env!("CARGO_BIN_EXE_cmr");

fn cmr(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Rows drawn from a one-factor model with an LCG, so no extra deps.
fn write_data(path: &Path, n: usize, p: usize, seed: u64) {
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let mut unif = move || {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((state >> 11) as f64 + 0.5) / (1u64 << 53) as f64
    };
    let mut normal = move || {
        let (u1, u2) = (unif(), unif());
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    };
    let mut out = (0..p).map(|j| format!("x{j}")).collect::<Vec<_>>().join(",") + "\n";
    for _ in 0..n {
        let z = normal();
        let row: Vec<String> = (0..p).map(|_| format!("{:.6}", 3.0 + z + 0.6 * normal())).collect();
        out += &(row.join(",") + "\n");
    }
    fs::write(path, out).unwrap();
}

fn csv_files(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    v.sort();
    v
}

#[test]
fn fit_on_toy_data_writes_the_four_summaries() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("y.csv");
    write_data(&data, 10, 4, 1);
    let out = dir.path().join("fit");
    let o = cmr(&["fit", "--data", s(&data), "--iters", "300", "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let files = csv_files(&out);
    for f in [
        "posterior_correlation.csv",
        "stein_bayes_covariance.csv",
        "zero_inclusion.csv",
        "active_factors.csv",
        "manifest.json",
    ] {
        assert!(files.contains(&f.to_string()), "missing {f}: {files:?}");
    }
    let corr = fs::read_to_string(out.join("posterior_correlation.csv")).unwrap();
    assert_eq!(corr.lines().count(), 5);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["status"], "ok");
    assert_eq!(manifest["outputs"].as_array().unwrap().len(), 4);
}

#[test]
fn fit_is_reproducible_for_a_fixed_seed() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("y.csv");
    write_data(&data, 12, 5, 2);
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = cmr(&["fit", "--data", s(&data), "--iters", "300", "--seed", "9", "--out", s(&out)]);
        assert!(o.status.success());
        out
    };
    let (a, b) = (run("a"), run("b"));
    for f in csv_files(&a).iter().filter(|f| *f != "manifest.json") {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn censored_fit_writes_imputations() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("y.csv");
    fs::write(&data, "a,b,c\n1.0,2.0,0\n2.0,2.5,1.5\n1.5,3.0,2.0\n2.5,2.0,2.5\n3.0,3.5,3.0\n").unwrap();
    let mask = dir.path().join("m.csv");
    fs::write(&mask, "a,b,c\n0,0,1\n0,0,0\n0,0,0\n0,0,0\n0,0,0\n").unwrap();
    let lod = dir.path().join("lod.csv");
    fs::write(&lod, "a,b,c\n,,1.2\n").unwrap();
    let out = dir.path().join("fit");
    let o = cmr(&[
        "fit", "--data", s(&data), "--censored", s(&mask), "--lod", s(&lod), "--iters", "300", "--out", s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let imp = fs::read_to_string(out.join("imputed.csv")).unwrap();
    let line = imp.lines().nth(1).unwrap();
    let v: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
    assert!(line.starts_with("1,c,") && v < 1.2, "{line}");
}

#[test]
fn unknown_method_exits_2_and_lists_valid_tags() {
    let dir = tempfile::tempdir().unwrap();
    let o = cmr(&["simulate", "--p", "9", "--methods", "MLE,Bogus", "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("Bogus") && err.contains("MR.D"), "{err}");
}

#[test]
fn malformed_cell_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("y.csv");
    fs::write(&data, "a,b\n1,2\n3,oops\n4,5\n6,7\n").unwrap();
    let o = cmr(&["analyze", "--data", s(&data), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn design_of_wrong_length_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("y.csv");
    write_data(&data, 10, 4, 3);
    let groups = dir.path().join("g.csv");
    fs::write(&groups, "g\n1\n1\n2\n2\n2\n").unwrap();
    let o = cmr(&["fit", "--data", s(&data), "--groups", s(&groups), "--iters", "100", "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn meta_table_with_types_fits() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("y.csv");
    write_data(&data, 15, 4, 4);
    let meta = dir.path().join("meta.csv");
    fs::write(&meta, "class,mass,id\nA,1.0,w\nA,2.0,x\nB,3.5,y\nB,0.5,z\n").unwrap();
    let types = dir.path().join("types.csv");
    fs::write(&types, "name,kind\nclass,categorical\nmass,continuous\nid,drop\n").unwrap();
    let out = dir.path().join("o");
    let o = cmr(&[
        "fit", "--data", s(&data), "--meta-table", s(&meta), "--types", s(&types), "--ridge", "--iters", "200", "--out", s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["q"], 4);
}

#[test]
fn naive_impute_lod_is_fast() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("y.csv");
    write_data(&data, 40, 5, 5);
    let out = dir.path().join("o");
    let t = Instant::now();
    let o = cmr(&["impute-lod", "--data", s(&data), "--n-test", "4,8", "--methods", "naive", "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(t.elapsed().as_secs_f64() < 5.0);
    let rmse = fs::read_to_string(out.join("rmse.csv")).unwrap();
    assert_eq!(rmse.lines().next().unwrap(), "pct_detected,n_test,method,rmse");
    assert_eq!(rmse.lines().count(), 3);
    let truth = fs::read_to_string(out.join("heldout_truth.csv")).unwrap();
    assert_eq!(truth.lines().count(), 1 + 5 * (4 + 8));
}

#[test]
fn cmr_imputation_without_design_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("y.csv");
    write_data(&data, 20, 3, 6);
    let o = cmr(&["impute-lod", "--data", s(&data), "--n-test", "2", "--methods", "cmr", "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn analyze_rejects_a_duplicated_column() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("y.csv");
    let mut txt = String::from("a,b,c\n");
    for i in 0..30 {
        let x = ((i * 37) % 11) as f64 - 5.0;
        let z = ((i * 53) % 7) as f64 * 0.3;
        txt += &format!("{x},{},{z}\n", x + 0.001 * (i % 3) as f64);
    }
    fs::write(&data, txt).unwrap();
    let out = dir.path().join("o");
    let o = cmr(&["analyze", "--data", s(&data), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let reject = fs::read_to_string(out.join("reject.csv")).unwrap();
    let rows: Vec<Vec<&str>> = reject.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows[0][1], "1");
    assert_eq!(rows[1][0], "1");
}

#[test]
fn simulate_records_every_applicable_cell() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let o = cmr(&[
        "simulate", "--regime", "cor,kron", "--p", "4", "--n-rule", "3p", "--methods", "MLE,MR.D,Kron", "--reps", "2", "--iters",
        "200", "--out", s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let records = fs::read_to_string(out.join("records.csv")).unwrap();
    // cor: MLE; kron: MLE, MR.D, Kron; two replicates each.
    assert_eq!(records.lines().count(), 1 + 2 * 4);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary.as_array().unwrap().len(), 4);
}
