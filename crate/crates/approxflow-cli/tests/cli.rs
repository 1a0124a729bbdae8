//! Command-line contract: report schema, exit codes, determinism, and the
//! seed environment override.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use approxflow_cli::report::{self, CSV_HEADER};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_approxflow"));
    c.env_remove("APPROXFLOW_SEED");
    c
}

fn run_ok(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("binary runs");
    assert!(
        out.status.success(),
        "command {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn write_lines(path: &Path, lines: &[&str]) {
    std::fs::write(path, lines.join("\n") + "\n").unwrap();
}

fn synth_dir(dir: &Path, keys: u32, partitions: u32, items: u32, seed: u32) -> PathBuf {
    let data = dir.join(format!("data-{keys}-{partitions}-{items}-{seed}"));
    run_ok(&[
        "synth",
        "--out",
        data.to_str().unwrap(),
        "--keys",
        &keys.to_string(),
        "--partitions",
        &partitions.to_string(),
        "--items-per-partition",
        &items.to_string(),
        "--distribution",
        "zipf:1.1",
        "--value-dist",
        "uniform",
        "--seed",
        &seed.to_string(),
    ]);
    data
}

#[test]
fn csv_report_has_the_canonical_header_and_sorted_keys() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.txt");
    write_lines(&input, &["b a", "a c", "c b a"]);
    let out = run_ok(&[
        "run",
        "--pipeline",
        "wordcount",
        "--input",
        input.to_str().unwrap(),
        "--partitions",
        "2",
    ]);
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), CSV_HEADER);
    let keys: Vec<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(keys, vec!["a", "b", "c"]);
}

#[test]
fn full_rate_run_matches_exact_on_every_key() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.txt");
    write_lines(&input, &["a a b"]);
    let report_path = dir.path().join("r.csv");
    run_ok(&[
        "run",
        "--pipeline",
        "wordcount",
        "--input",
        input.to_str().unwrap(),
        "--partitions",
        "1",
        "--out",
        report_path.to_str().unwrap(),
    ]);
    let rows = report::read_csv(&report_path).unwrap();
    let by_key: BTreeMap<&str, &report::ReportRow> =
        rows.iter().map(|r| (r.key.as_str(), r)).collect();
    assert_eq!(by_key["a"].estimate, 2.0);
    assert_eq!(by_key["a"].epsilon, 0.0);
    assert_eq!(by_key["b"].estimate, 1.0);

    let exact_path = dir.path().join("e.csv");
    run_ok(&[
        "exact",
        "--pipeline",
        "wordcount",
        "--input",
        input.to_str().unwrap(),
        "--partitions",
        "1",
        "--out",
        exact_path.to_str().unwrap(),
    ]);
    let exact = report::read_exact(&exact_path).unwrap();
    assert_eq!(exact["a"], 2.0);
    assert_eq!(exact["b"], 1.0);
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_dir(dir.path(), 20, 4, 100, 5);
    let args = [
        "run",
        "--pipeline",
        "synth",
        "--input",
        data.to_str().unwrap(),
        "--partitions",
        "4",
        "--partition-rate",
        "0.5",
        "--item-rate",
        "0.6",
        "--seed",
        "9",
    ];
    let a = run_ok(&args);
    let b = run_ok(&args);
    assert_eq!(a.stdout, b.stdout, "CSV reports must be byte-identical");

    // JSON reports agree after dropping the wall-clock field.
    let mut json_args = args.to_vec();
    json_args.extend(["--format", "json"]);
    let a = run_ok(&json_args);
    let b = run_ok(&json_args);
    let mut ja: serde_json::Value = serde_json::from_slice(&a.stdout).unwrap();
    let mut jb: serde_json::Value = serde_json::from_slice(&b.stdout).unwrap();
    ja["metadata"]["wall_ms"] = 0.into();
    jb["metadata"]["wall_ms"] = 0.into();
    assert_eq!(ja, jb);
}

#[test]
fn synth_outputs_are_deterministic_and_cross_check_with_exact() {
    let dir = tempfile::tempdir().unwrap();
    let a = synth_dir(dir.path(), 10, 3, 60, 21);
    let b_dir = tempfile::tempdir().unwrap();
    let b = synth_dir(b_dir.path(), 10, 3, 60, 21);
    for i in 0..3 {
        let name = format!("part-{i:05}.txt");
        assert_eq!(
            std::fs::read(a.join(&name)).unwrap(),
            std::fs::read(b.join(&name)).unwrap()
        );
    }

    // Manifest ground truth matches the exact pipeline output.
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.join("_manifest.json")).unwrap()).unwrap();
    let exact_path = dir.path().join("exact.csv");
    run_ok(&[
        "exact",
        "--pipeline",
        "synth",
        "--input",
        a.to_str().unwrap(),
        "--partitions",
        "3",
        "--out",
        exact_path.to_str().unwrap(),
    ]);
    let exact = report::read_exact(&exact_path).unwrap();
    let true_sums = manifest["true_sums"].as_object().unwrap();
    assert_eq!(exact.len(), true_sums.len());
    for (key, value) in true_sums {
        let truth = value.as_f64().unwrap();
        let got = exact[key];
        assert!(
            (got - truth).abs() <= 1e-9 * truth.abs().max(1.0),
            "{key}: exact {got} vs manifest {truth}"
        );
    }
}

#[test]
fn constant_synth_emits_identical_lines() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("c");
    run_ok(&[
        "synth",
        "--out",
        data.to_str().unwrap(),
        "--keys",
        "1",
        "--partitions",
        "2",
        "--items-per-partition",
        "3",
        "--value-dist",
        "constant:1",
    ]);
    let mut all = Vec::new();
    for i in 0..2 {
        let text = std::fs::read_to_string(data.join(format!("part-{i:05}.txt"))).unwrap();
        all.extend(text.lines().map(str::to_string));
    }
    assert_eq!(all, vec!["key0,1"; 6]);
}

#[test]
fn seed_env_var_overrides_the_flag() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_dir(dir.path(), 20, 8, 100, 5);
    let args = [
        "run",
        "--pipeline",
        "synth",
        "--input",
        data.to_str().unwrap(),
        "--partitions",
        "8",
        "--partition-rate",
        "0.5",
        "--item-rate",
        "0.5",
        "--seed",
        "9",
    ];
    let flag_run = run_ok(&args);
    let env_run = bin()
        .args(args)
        .env("APPROXFLOW_SEED", "9000")
        .output()
        .unwrap();
    assert!(env_run.status.success());
    assert_ne!(flag_run.stdout, env_run.stdout, "override must change sampling");

    let env_same = bin()
        .args(args)
        .env("APPROXFLOW_SEED", "9")
        .output()
        .unwrap();
    assert_eq!(flag_run.stdout, env_same.stdout);

    let bad = bin()
        .args(args)
        .env("APPROXFLOW_SEED", "not-a-number")
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn exit_codes_follow_the_contract() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.txt");
    write_lines(&input, &["a,1", "b,2"]);

    // Usage errors: unknown flag, unknown pipeline, bad rate.
    let out = bin().args(["run", "--nope"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = bin()
        .args([
            "run",
            "--pipeline",
            "mystery",
            "--input",
            input.to_str().unwrap(),
            "--partitions",
            "1",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = bin()
        .args([
            "run",
            "--pipeline",
            "synth",
            "--input",
            input.to_str().unwrap(),
            "--partitions",
            "1",
            "--partition-rate",
            "1.5",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    // Pipeline errors: missing input.
    let out = bin()
        .args([
            "run",
            "--pipeline",
            "synth",
            "--input",
            dir.path().join("absent.txt").to_str().unwrap(),
            "--partitions",
            "1",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));

    // Infeasible targets.
    let out = bin()
        .args([
            "tune",
            "--pipeline",
            "synth",
            "--input",
            input.to_str().unwrap(),
            "--partitions",
            "2",
            "--target",
            "100=0",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn compare_reports_zero_loss_at_full_rates() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_dir(dir.path(), 8, 3, 50, 2);
    let approx = dir.path().join("a.csv");
    let exact = dir.path().join("e.csv");
    run_ok(&[
        "run",
        "--pipeline",
        "synth",
        "--input",
        data.to_str().unwrap(),
        "--partitions",
        "3",
        "--out",
        approx.to_str().unwrap(),
    ]);
    run_ok(&[
        "exact",
        "--pipeline",
        "synth",
        "--input",
        data.to_str().unwrap(),
        "--partitions",
        "3",
        "--out",
        exact.to_str().unwrap(),
    ]);
    let out = run_ok(&[
        "compare",
        "--approx",
        approx.to_str().unwrap(),
        "--exact",
        exact.to_str().unwrap(),
    ]);
    let cmp: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(cmp["key_loss_fraction"], 0.0);
    assert_eq!(cmp["ci_containment_fraction"], 1.0);
    assert_eq!(cmp["actual_error_percentiles"]["p100"], 0.0);

    // A key absent from the approximate report counts as lost.
    let mut exact_rows = std::fs::read_to_string(&exact).unwrap();
    exact_rows.push_str("ghost,5.0\n");
    std::fs::write(&exact, exact_rows).unwrap();
    let out = run_ok(&[
        "compare",
        "--approx",
        approx.to_str().unwrap(),
        "--exact",
        exact.to_str().unwrap(),
    ]);
    let cmp: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(cmp["key_loss_fraction"].as_f64().unwrap() > 0.0);
}

#[test]
fn provenance_dump_is_stable_and_golden() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.txt");
    write_lines(
        &input,
        &["a b c", "b c d", "c d e", "d e f", "a f b", "c a d"],
    );
    let args = [
        "run",
        "--pipeline",
        "wordcount",
        "--input",
        input.to_str().unwrap(),
        "--partitions",
        "3",
        "--item-rate",
        "0.5",
        "--seed",
        "11",
        "--dump-provenance",
        "--out",
    ];
    let out_a = dir.path().join("a.csv");
    let out_b = dir.path().join("b.csv");
    let a = run_ok(&[&args[..], &[out_a.to_str().unwrap()]].concat());
    let b = run_ok(&[&args[..], &[out_b.to_str().unwrap()]].concat());

    let dump = |stderr: &[u8]| -> String {
        let text = String::from_utf8_lossy(stderr);
        text.lines()
            .skip_while(|l| !l.starts_with("provenance tree:"))
            .take_while(|l| l.starts_with("provenance tree:") || l.starts_with("  level"))
            .collect::<Vec<_>>()
            .join("\n")
    };
    let golden = "\
provenance tree: d=3
  level 0: 1 node (root)
  level 1: 3 nodes (partitions), rate 1.0000
  level 2: 3 nodes, rate 0.5000
  level 3: 9 nodes (leaves), rate 1.0000";
    assert_eq!(dump(&a.stderr), golden);
    assert_eq!(dump(&a.stderr), dump(&b.stderr));
    assert_eq!(
        std::fs::read(&out_a).unwrap(),
        std::fs::read(&out_b).unwrap()
    );
}

#[test]
fn asrs_mode_produces_reports_and_respects_flag_pairing() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_dir(dir.path(), 10, 4, 200, 3);
    let out = run_ok(&[
        "run",
        "--pipeline",
        "synth",
        "--input",
        data.to_str().unwrap(),
        "--partitions",
        "4",
        "--asrs",
        "--reservoir-size",
        "200",
        "--format",
        "json",
    ]);
    let json: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(json["metadata"]["mode"], "stratified");
    assert!(json["rows"].as_array().unwrap().len() <= 10);

    let out = bin()
        .args([
            "run",
            "--pipeline",
            "synth",
            "--input",
            data.to_str().unwrap(),
            "--partitions",
            "4",
            "--asrs",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "--asrs needs --reservoir-size");
}
