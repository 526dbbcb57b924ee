use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value as Json;

fn npgap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_npgap"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read_rows(p: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(p).unwrap();
    let header = r.headers().unwrap().iter().map(str::to_string).collect();
    let rows = r
        .records()
        .map(|rec| rec.unwrap().iter().map(str::to_string).collect())
        .collect();
    (header, rows)
}

fn col(header: &[String], name: &str) -> usize {
    header.iter().position(|h| h == name).unwrap()
}

#[test]
fn scalar_gap_matches_table_within_mc_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("t3.csv");
    let o = npgap(&[
        "scalar-gap", "--n", "5,100,2000", "--lengthscale", "0.3", "--draws", "100000", "--seed", "7",
        "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (h, rows) = read_rows(&out);
    assert_eq!(h, ["n", "alpha", "mc_gap", "formula", "ratio", "std_err", "seed"]);
    assert_eq!(rows.len(), 3);
    // Published Monte Carlo values at these n.
    let reference = [0.01591, 0.00122, 0.0000624];
    for (row, want) in rows.iter().zip(reference) {
        let mc: f64 = row[col(&h, "mc_gap")].parse().unwrap();
        let se: f64 = row[col(&h, "std_err")].parse().unwrap();
        assert!((mc - want).abs() < 3.0 * se + 5e-3 * want, "mc {mc} reference {want} se {se}");
        assert_eq!(row[col(&h, "seed")], "7");
    }
}

#[test]
fn same_seed_gives_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for (p, threads) in [(&a, "1"), (&b, "2")] {
        let o = npgap(&[
            "scalar-gap", "--n", "100", "--draws", "5000", "--seed", "11", "--threads", threads, "--out",
            p.to_str().unwrap(),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn usage_errors_exit_two() {
    let cases: [&[&str]; 5] = [
        &["scalar-gap", "--draws", "0", "--seed", "1"],
        &["scalar-gap", "--n", "100"],
        &["correlation", "--n", "10", "--draws", "10", "--seed", "1"],
        &["no-such-command"],
        &["contamination", "--seed", "1"],
    ];
    for args in cases {
        let o = npgap(args);
        assert_eq!(code(&o), 2, "{args:?}: {}", stderr(&o));
    }
}

#[test]
fn unwritable_output_is_a_computation_failure() {
    let o = npgap(&["pathology", "--out", "/nonexistent-dir/x.csv"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("/nonexistent-dir/x.csv"));
}

#[test]
fn pathology_prints_sigma_columns() {
    let o = npgap(&["pathology"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let h: Vec<String> = r.headers().unwrap().iter().map(str::to_string).collect();
    let rows: Vec<csv::StringRecord> = r.records().map(Result::unwrap).collect();
    let first: f64 = rows[0][col(&h, "sigma_p_inv")].parse().unwrap();
    assert!((first - 3.321).abs() < 5e-4);
    assert_eq!(rows.len(), 5);
}

#[test]
fn config_file_supplies_flags_and_is_not_modified() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.conf");
    let text = "# scalar gap at two sizes\nn = 10,20\ndraws = 2000\nseed = 5\n";
    std::fs::write(&cfg, text).unwrap();
    let out = dir.path().join("o.csv");
    let o = npgap(&[
        "scalar-gap", "--config", cfg.to_str().unwrap(), "--n", "50", "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (h, rows) = read_rows(&out);
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0][col(&h, "n")], "50");
    assert_eq!(rows[0][col(&h, "seed")], "5");
    assert_eq!(std::fs::read_to_string(&cfg).unwrap(), text);
}

fn strip_wall_time(mut m: Json) -> Json {
    for c in m["commands"].as_array_mut().unwrap() {
        c.as_object_mut().unwrap().remove("wall_time_s");
    }
    m
}

#[test]
fn suite_manifest_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let mut manifests = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let o = npgap(&["suite", "--fast", "--seed", "4", "--out", out.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let m: Json = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
        manifests.push(strip_wall_time(m));
    }
    assert_eq!(manifests[0], manifests[1]);
    let m = &manifests[0];
    assert_eq!(m["schema_version"], 1);
    let names: Vec<&str> = m["commands"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c["command"].as_str().unwrap())
        .collect();
    assert_eq!(
        names,
        ["scalar-gap", "correlation", "pathology", "agg-compare", "dim-scan", "bounds"]
    );
    for c in m["commands"].as_array().unwrap() {
        assert_eq!(c["status"], "ok");
        let f = dir.path().join("a").join(c["output"].as_str().unwrap());
        let (_, rows) = read_rows(&f);
        assert_eq!(rows.len() as u64, c["rows"].as_u64().unwrap());
        for (ra, rb) in rows.iter().zip(read_rows(&dir.path().join("b").join(c["output"].as_str().unwrap())).1) {
            assert_eq!(ra, &rb);
        }
    }
}

#[test]
fn suite_without_out_is_usage_error() {
    assert_eq!(code(&npgap(&["suite", "--seed", "1"])), 2);
}

#[test]
fn trained_checkpoint_feeds_both_model_commands() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.json");
    let manifest = dir.path().join("c.json");
    let o = npgap(&[
        "contamination", "--train", "--steps", "30", "--n", "5,50,200", "--resamples", "6",
        "--location-sets", "3", "--z-samples", "8", "--seed", "3", "--save-checkpoint",
        ckpt.to_str().unwrap(), "--manifest", manifest.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(text.lines().count(), 4);
    let m: Json = serde_json::from_str(&std::fs::read_to_string(&manifest).unwrap()).unwrap();
    assert_eq!(m["commands"][0]["params"]["checkpoint"], ckpt.to_str().unwrap());

    let o = npgap(&[
        "alignment", "--checkpoint", ckpt.to_str().unwrap(), "--lengthscale", "0.2", "--mode", "marginal",
        "--gp-samples", "3", "--grid", "200", "--j", "8", "--seed", "1",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let h: Vec<String> = r.headers().unwrap().iter().map(str::to_string).collect();
    assert_eq!(h, ["j", "lambda_j", "r2_j", "cos_theta_min", "seed"]);
    let cos: Vec<f64> = r
        .records()
        .map(|rec| rec.unwrap()[col(&h, "cos_theta_min")].parse().unwrap())
        .collect();
    assert_eq!(cos.len(), 8);
    assert!(cos.windows(2).all(|w| w[1] <= w[0] + 1e-12));
}

#[test]
fn corrupt_checkpoint_names_expected_format() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\"format\": \"something-else\"}").unwrap();
    for p in [bad.clone(), dir.path().join("missing.json")] {
        let o = npgap(&["alignment", "--checkpoint", p.to_str().unwrap(), "--seed", "1"]);
        assert_eq!(code(&o), 1);
        assert!(stderr(&o).contains("npgap-lnp version 1"), "{}", stderr(&o));
    }
}
