//! End-to-end checks of the `rosa` binary: exit codes, report shapes, file
//! artifacts, and reproducibility.

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn rosa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rosa"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout_json(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "command failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

const TINY: &str = "16,2,2,1,2.0,32";

#[test]
fn unknown_command_is_usage_error() {
    let out = rosa(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn bad_flag_is_usage_error() {
    let out = rosa(&["eval", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn help_exits_zero() {
    let out = rosa(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn eval_larosa_p0_is_invariant_and_zero_sparse() {
    let out = rosa(&[
        "eval", "--synth", TINY, "--seed", "5", "--p", "0", "--mode", "larosa",
        "--calib-seqs", "4", "--calib-len", "16", "--eval-seqs", "2", "--eval-len", "8",
    ]);
    let v = stdout_json(&out);
    assert!(v["logit_error_max"].as_f64().unwrap() <= 1e-6);
    for site in v["sites"].as_array().unwrap() {
        assert_eq!(site["mean"].as_f64().unwrap(), 0.0);
        assert_eq!(site["std"].as_f64().unwrap(), 0.0);
    }
}

#[test]
fn eval_topk_sparsity_is_exact_with_zero_std() {
    let out = rosa(&[
        "eval", "--synth", TINY, "--seed", "7", "--p", "0.5", "--mode", "topk",
        "--calib-seqs", "2", "--calib-len", "8", "--eval-seqs", "3", "--eval-len", "10",
    ]);
    let v = stdout_json(&out);
    let plan: Vec<f64> = v["plan_site_sparsity"]
        .as_array()
        .unwrap()
        .iter()
        .map(|x| x.as_f64().unwrap())
        .collect();
    for site in v["sites"].as_array().unwrap() {
        let idx = match site["site"].as_str().unwrap() {
            "h1" => 0,
            "h2" => 1,
            "h3" => 2,
            "h4" => 3,
            other => panic!("unexpected site {other}"),
        };
        assert_eq!(site["mean"].as_f64().unwrap(), plan[idx]);
        assert_eq!(site["std"].as_f64().unwrap(), 0.0);
        assert_eq!(site["token0"].as_f64().unwrap(), plan[idx]);
    }
}

#[test]
fn eval_teal_fluctuates_on_held_out_data() {
    let out = rosa(&[
        "eval", "--synth", TINY, "--seed", "9", "--p", "0.5", "--mode", "teal",
        "--calib-seqs", "6", "--calib-len", "32", "--eval-seqs", "4", "--eval-len", "16",
    ]);
    let v = stdout_json(&out);
    let mut any_std = 0.0f64;
    let mut any_dev = 0.0f64;
    for site in v["sites"].as_array().unwrap() {
        any_std = any_std.max(site["std"].as_f64().unwrap());
        any_dev = any_dev.max((site["mean"].as_f64().unwrap() - 0.5).abs());
    }
    assert!(any_std > 0.0, "thresholded sparsity should fluctuate");
    assert!(any_dev > 0.0, "thresholded mean should deviate from target");
}

#[test]
fn eval_reports_are_reproducible() {
    let args = [
        "eval", "--synth", TINY, "--seed", "11", "--p", "0.25", "--mode", "larosa",
        "--calib-seqs", "3", "--calib-len", "12", "--eval-seqs", "2", "--eval-len", "8",
    ];
    let a = rosa(&args);
    let b = rosa(&args);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn synth_calibrate_merge_eval_pipeline_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let model_path = dir.path().join("model.rosa");
    let rot_path = dir.path().join("rotations.rosa");
    let merged_path = dir.path().join("merged.rosa");

    let out = rosa(&["synth", "--synth", TINY, "--seed", "13", "--out", model_path.to_str().unwrap()]);
    assert!(out.status.success());
    assert!(model_path.exists());

    let out = rosa(&[
        "calibrate", "--model", model_path.to_str().unwrap(), "--seed", "13",
        "--calib-seqs", "4", "--calib-len", "8", "--out", rot_path.to_str().unwrap(),
    ]);
    let v = stdout_json(&out);
    assert_eq!(v["layer_spectrum"].as_array().unwrap().len(), 2);
    assert!(rot_path.exists());

    let out = rosa(&[
        "merge", "--model", model_path.to_str().unwrap(), "--seed", "13",
        "--calib-seqs", "4", "--calib-len", "8", "--out", merged_path.to_str().unwrap(),
    ]);
    let v = stdout_json(&out);
    assert_eq!(v["adapters"].as_u64().unwrap(), 1);
    assert_eq!(v["embed_rotation_applied"].as_bool().unwrap(), true);

    // a loaded checkpoint evaluates like the in-memory synth
    let from_file = rosa(&[
        "eval", "--model", model_path.to_str().unwrap(), "--seed", "13", "--p", "0.5",
        "--mode", "topk", "--calib-seqs", "2", "--calib-len", "8",
        "--eval-seqs", "2", "--eval-len", "8",
    ]);
    let from_synth = rosa(&[
        "eval", "--synth", TINY, "--seed", "13", "--p", "0.5",
        "--mode", "topk", "--calib-seqs", "2", "--calib-len", "8",
        "--eval-seqs", "2", "--eval-len", "8",
    ]);
    assert_eq!(from_file.stdout, from_synth.stdout);
}

#[test]
fn malformed_weight_file_is_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("broken.rosa");
    std::fs::write(&path, 999_999u64.to_le_bytes()).unwrap();
    let out = rosa(&["eval", "--model", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));

    let missing = dir.path().join("does-not-exist.rosa");
    let out = rosa(&["eval", "--model", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn search_writes_full_trace() {
    let dir = tempfile::tempdir().unwrap();
    let trace_path = dir.path().join("trace.csv");
    let out = rosa(&[
        "search", "--synth", TINY, "--seed", "17", "--p", "0.5",
        "--calib-seqs", "2", "--calib-len", "8", "--eval-seqs", "1", "--eval-len", "6",
        "--out", trace_path.to_str().unwrap(),
    ]);
    let v = stdout_json(&out);
    assert_eq!(v["grid_points"].as_u64().unwrap(), 121);
    assert_eq!(v["evaluated"].as_u64().unwrap(), 121);
    assert!(v["objective"].as_f64().unwrap() <= v["uniform_objective"].as_f64().unwrap());

    let csv = std::fs::read_to_string(&trace_path).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "alpha1,alpha2,alpha3,alpha4,objective");
    assert_eq!(csv.lines().count(), 122);
}

#[test]
fn theory_emits_tables() {
    let dir = tempfile::tempdir().unwrap();
    let table_path = dir.path().join("errors.csv");
    let out = rosa(&[
        "theory", "--synth", TINY, "--seed", "19",
        "--mc-d-in", "512", "--mc-d-out", "64", "--mc-samples", "1000",
        "--calib-seqs", "2", "--calib-len", "12",
        "--out", table_path.to_str().unwrap(),
    ]);
    let v = stdout_json(&out);
    assert_eq!(v["endpoint_full_keep"].as_f64().unwrap(), 0.0);
    assert_eq!(v["endpoint_zero_keep"].as_f64().unwrap(), 1.0);
    let rows = v["mc_rows"].as_array().unwrap();
    assert_eq!(rows.len(), 3);
    for row in rows {
        assert!(row["relative_gap"].as_f64().unwrap() < 0.05);
    }
    let csv = std::fs::read_to_string(&table_path).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "sparsity,theory,rotated_topk,magnitude");
}

#[test]
fn bench_emits_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv_path = dir.path().join("bench.csv");
    let out = rosa(&[
        "bench", "--d-in", "128", "--d-out", "64", "--reps", "30",
        "--sparsity", "0.0,0.5", "--out", csv_path.to_str().unwrap(),
    ]);
    let v = stdout_json(&out);
    assert_eq!(v["report"]["rows"].as_array().unwrap().len(), 5);
    let csv = std::fs::read_to_string(&csv_path).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "d_in,d_out,sparsity,mode,median_ns,speedup");
}

#[test]
fn tokens_flag_reads_raw_ids() {
    let dir = tempfile::tempdir().unwrap();
    let tok_path = dir.path().join("ids.bin");
    let mut bytes = Vec::new();
    for id in (0u32..64).map(|i| i % 32) {
        bytes.extend_from_slice(&id.to_le_bytes());
    }
    std::fs::write(&tok_path, bytes).unwrap();
    let out = rosa(&[
        "eval", "--synth", TINY, "--seed", "23", "--p", "0.5", "--mode", "teal",
        "--calib-seqs", "4", "--calib-len", "16", "--tokens", tok_path.to_str().unwrap(),
        "--eval-seqs", "2", "--eval-len", "8",
    ]);
    let v = stdout_json(&out);
    assert_eq!(v["calib_source"].as_str().unwrap(), tok_path.to_str().unwrap());

    // too few ids for the requested split
    let out = rosa(&[
        "eval", "--synth", TINY, "--seed", "23", "--p", "0.5", "--mode", "teal",
        "--calib-seqs", "40", "--calib-len", "160", "--tokens", tok_path.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn infeasible_alpha_is_numeric_error() {
    // alpha1 = 1.4 forces alpha2 = 4 - 3*1.4 < 0
    let out = rosa(&[
        "eval", "--synth", TINY, "--p", "0.5", "--mode", "topk", "--alpha", "1.4,1.0",
        "--calib-seqs", "2", "--calib-len", "8", "--eval-seqs", "1", "--eval-len", "4",
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn eval_with_search_picks_coefficients() {
    let out = rosa(&[
        "eval", "--synth", "8,1,2,1,2.0,16", "--seed", "31", "--p", "0.5", "--mode", "larosa",
        "--search", "--calib-seqs", "2", "--calib-len", "6", "--eval-seqs", "1", "--eval-len", "5",
    ]);
    let v = stdout_json(&out);
    let alpha = v["alpha"].as_array().unwrap();
    assert_eq!(alpha.len(), 4);
    let a1 = alpha[0].as_f64().unwrap();
    let a2 = alpha[1].as_f64().unwrap();
    assert!((3.0 * a1 + a2 - 4.0).abs() < 1e-9);
}

#[test]
fn commands_do_not_mutate_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let model_path = dir.path().join("model.rosa");
    let out = rosa(&["synth", "--synth", TINY, "--seed", "29", "--out", model_path.to_str().unwrap()]);
    assert!(out.status.success());
    let before = std::fs::read(&model_path).unwrap();
    let merged = dir.path().join("merged.rosa");
    let out = rosa(&[
        "merge", "--model", model_path.to_str().unwrap(), "--seed", "29",
        "--calib-seqs", "2", "--calib-len", "8", "--out", merged.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    assert_eq!(before, std::fs::read(&model_path).unwrap());
    assert!(Path::new(&merged).exists());
}
