//! Acceptance suite: every criterion runs sequentially and prints one
//! PASS/FAIL line (run with `--nocapture` to see them); the test fails if
//! any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use rosa::forward::{
    calibrate_thresholds, calibration_pass, model_output_error, Mode, SiteStats,
};
use rosa::kernel::{bench, fused_topk_gemv, sparse_gemv, ColMajorWeight};
use rosa::mat::Mat;
use rosa::model::{synth_model, Model, ModelConfig};
use rosa::rng::{
    gaussian_vec, seeded_rng, token_stream_uniform, token_stream_zipf, STREAM_BENCH,
    STREAM_CALIB_TOKENS, STREAM_EVAL_TOKENS, ZIPF_CALIBRATION, ZIPF_HELD_OUT,
};
use rosa::rotation::{build_rotation, merge_rotations, RotatedModel, RotationMatrix};
use rosa::search::{grid_search, SearchSpace};
use rosa::sparsify::{solve_alpha_constraints, top_k_sparsify, SparsityPlan, SITES};
use rosa::theory::{
    monte_carlo_relative_errors, per_site_error_probes, theoretical_relative_error, MonteCarloSpec,
};

fn calib_seqs(cfg: &ModelConfig, seed: u64, n: usize, len: usize) -> Vec<Vec<u32>> {
    let mut rng = seeded_rng(seed, STREAM_CALIB_TOKENS);
    (0..n)
        .map(|_| token_stream_zipf(&mut rng, cfg.vocab, len, ZIPF_CALIBRATION))
        .collect()
}

fn held_out_seqs(cfg: &ModelConfig, seed: u64, n: usize, len: usize) -> Vec<Vec<u32>> {
    let mut rng = seeded_rng(seed, STREAM_EVAL_TOKENS);
    (0..n)
        .map(|_| token_stream_zipf(&mut rng, cfg.vocab, len, ZIPF_HELD_OUT))
        .collect()
}

fn pipeline(cfg: &ModelConfig, calib: &[Vec<u32>]) -> (Model, Vec<RotationMatrix>, RotatedModel) {
    let model = synth_model(cfg).unwrap();
    let accs = calibration_pass(&model, calib).unwrap();
    let rotations: Vec<RotationMatrix> = accs
        .iter()
        .map(|a| build_rotation(&a.finalize().unwrap()).unwrap())
        .collect();
    let merged = merge_rotations(&model, &rotations).unwrap();
    (model, rotations, merged)
}

/// Criterion 1: computational invariance. The merged rotated model at
/// p = 0 matches the original dense forward within 1e-6 relative logit
/// error across 11 (seed, dims) configurations.
fn c01_computational_invariance() -> String {
    let configs: [(usize, usize, usize, usize, f64, usize); 11] = [
        (16, 1, 2, 1, 2.0, 32),
        (16, 2, 2, 2, 1.5, 48),
        (24, 2, 3, 1, 4.0, 40),
        (32, 2, 4, 2, 2.6875, 64),
        (32, 3, 2, 1, 3.5, 64),
        (48, 2, 4, 4, 2.0, 96),
        (64, 4, 4, 2, 2.6875, 128),
        (64, 1, 8, 4, 3.5, 96),
        (96, 2, 6, 3, 2.5, 128),
        (128, 4, 8, 4, 2.6875, 256),
        (128, 2, 4, 2, 5.2857, 192),
    ];
    let mut worst = 0.0f64;
    for (i, &(d, layers, heads, kv_groups, m_ratio, vocab)) in configs.iter().enumerate() {
        let cfg = ModelConfig {
            d,
            layers,
            heads,
            kv_groups,
            m_ratio,
            vocab,
            seed: 1000 + i as u64,
        };
        let calib = calib_seqs(&cfg, cfg.seed, 4, 24);
        let (model, _, merged) = pipeline(&cfg, &calib);
        let plan = SparsityPlan::uniform(0.0, cfg.m_ratio, cfg.d, cfg.d_ff()).unwrap();

        let mut rng = seeded_rng(cfg.seed, STREAM_EVAL_TOKENS);
        for _ in 0..32 {
            let toks = token_stream_uniform(&mut rng, cfg.vocab, 12);
            let dense = model.forward(&toks, &Mode::Dense).unwrap();
            let rotated = merged.forward(&toks, &Mode::TopK(&plan)).unwrap();
            let err = model_output_error(&rotated, &dense).unwrap();
            worst = worst.max(err.max);
            assert!(
                err.max <= 1e-6,
                "config {i} ({d}x{layers}): relative error {} above 1e-6",
                err.max
            );
        }
    }
    format!("11 configs x 32 sequences, worst relative logit error {worst:.3e} <= 1e-6")
}

/// Criterion 2: exact sparsity. Rotated Top-K per-token sparsity equals
/// the plan at every site of every layer for every token (including token
/// 0) of 32 sequences, with standard deviation exactly 0.
fn c02_exact_sparsity() -> String {
    let cfg = ModelConfig::desk_scale(42);
    let calib = calib_seqs(&cfg, cfg.seed, 8, 48);
    let (_, _, merged) = pipeline(&cfg, &calib);
    let plan = SparsityPlan::new(0.5, 0.9, 0.8, cfg.m_ratio, cfg.d, cfg.d_ff()).unwrap();

    let eval = held_out_seqs(&cfg, cfg.seed, 32, 32);
    let mut stats = SiteStats::new(cfg.layers);
    for seq in &eval {
        let (_, s) = merged.forward_with_stats(seq, &Mode::TopK(&plan)).unwrap();
        stats.absorb(s);
    }
    let mut tokens_checked = 0usize;
    for layer in 0..cfg.layers {
        for site in SITES {
            let rec = stats.record(layer, site);
            assert_eq!(rec.sparsities.len(), 32 * 32);
            let expected = plan.site_sparsity(site);
            for (t, &s) in rec.sparsities.iter().enumerate() {
                assert!(
                    s == expected,
                    "layer {layer} site {site:?} token {t}: sparsity {s} != plan {expected}"
                );
            }
            assert_eq!(rec.std(), 0.0, "layer {layer} site {site:?}: nonzero std");
            tokens_checked += rec.sparsities.len();
        }
    }
    format!("{tokens_checked} (layer, site, token) sparsities equal the plan exactly; std = 0.0")
}

/// Criterion 3: calibrated-threshold fluctuation. On held-out sequences
/// from a different token distribution, per-token sparsity has nonzero
/// spread and its mean misses the target at every site.
fn c03_threshold_fluctuation() -> String {
    let cfg = ModelConfig::desk_scale(43);
    let model = synth_model(&cfg).unwrap();
    let p = 0.5;
    let calib = calib_seqs(&cfg, cfg.seed, 8, 64);
    let thresholds = calibrate_thresholds(&model, &calib, p).unwrap();

    let eval = held_out_seqs(&cfg, cfg.seed, 8, 32);
    let mut stats = SiteStats::new(cfg.layers);
    for seq in &eval {
        let (_, s) = model.forward_with_stats(seq, &Mode::Teal(&thresholds)).unwrap();
        stats.absorb(s);
    }
    let mut min_std = f64::INFINITY;
    let mut max_dev = 0.0f64;
    for layer in 0..cfg.layers {
        for site in SITES {
            let rec = stats.record(layer, site);
            let std = rec.std();
            let dev = (rec.mean() - p).abs();
            assert!(std > 0.0, "layer {layer} site {site:?}: sparsity did not fluctuate");
            assert!(dev > 0.0, "layer {layer} site {site:?}: mean exactly on target");
            min_std = min_std.min(std);
            max_dev = max_dev.max(dev);
        }
    }
    format!("all sites fluctuate: min std {min_std:.2e} > 0, largest |mean - target| {max_dev:.3}")
}

/// Criterion 4: closed-form error vs Monte-Carlo within 2% relative at
/// k/D in {0.25, 0.5, 0.75} with D = 4096, D_out = 1024, 2000 samples;
/// endpoints exact.
fn c04_theorem_agreement() -> String {
    assert_eq!(theoretical_relative_error(4096, 4096), 0.0);
    assert_eq!(theoretical_relative_error(0, 4096), 1.0);
    let exact_spec = MonteCarloSpec::new(512, 64, 512, 1.0, 1.0, 1000, 99).unwrap();
    assert_eq!(rosa::theory::monte_carlo_relative_error(&exact_spec), 0.0);

    let d = 4096;
    let ks = [d / 4, d / 2, 3 * d / 4];
    let mc = monte_carlo_relative_errors(d, 1024, &ks, 1.0, 1.0, 2000, 1234);
    let mut gaps = Vec::new();
    for (&k, &estimate) in ks.iter().zip(&mc) {
        let theory = theoretical_relative_error(k, d);
        let gap = (estimate - theory).abs() / theory;
        assert!(
            gap <= 0.02,
            "k/D = {}: |mc - theory|/theory = {gap:.4} above 2%",
            k as f64 / d as f64
        );
        gaps.push(format!("{:.2}%", 100.0 * gap));
    }
    format!("endpoints exact; relative gaps at k/D = 0.25/0.5/0.75: {}", gaps.join(", "))
}

/// Criterion 5: error dominance. At matched per-token actual sparsity
/// (0.25 and 0.5), the rotated Top-K per-site output error is at most the
/// magnitude-pruning error on at least 90% of (layer, site, seed) triples
/// over 5 seeds.
fn c05_error_dominance() -> String {
    let mut detail = Vec::new();
    for &sparsity in &[0.25, 0.5] {
        let mut wins = 0usize;
        let mut total = 0usize;
        for seed in 0..5u64 {
            let cfg = ModelConfig::desk_scale(500 + seed);
            let calib = calib_seqs(&cfg, cfg.seed, 4, 48);
            let (model, rotations, merged) = pipeline(&cfg, &calib);
            let probe = held_out_seqs(&cfg, cfg.seed, 2, 32);
            let probes =
                per_site_error_probes(&model, &merged, &rotations, &probe, sparsity).unwrap();
            for p in probes {
                total += 1;
                if p.rotated <= p.magnitude * (1.0 + 1e-9) {
                    wins += 1;
                }
            }
        }
        assert!(
            wins * 10 >= total * 9,
            "sparsity {sparsity}: rotated won only {wins}/{total} triples"
        );
        detail.push(format!("{wins}/{total} at sparsity {sparsity}"));
    }
    format!("rotated error <= magnitude error on {} (>= 90% required)", detail.join(" and "))
}

/// Criterion 6: the constraint system reproduces the reference coefficient
/// rows: alpha2 exactly, alpha4 within 0.01 of the printed values.
fn c06_constraint_system() -> String {
    let (a2, a4) = solve_alpha_constraints(0.90, 0.80, 2.6875).unwrap();
    assert!((a2 - 1.30).abs() < 1e-12, "alpha2 {a2} != 1.30");
    assert!((a4 - 1.15).abs() <= 0.01, "alpha4 {a4} not within 0.01 of 1.15");
    assert!((a4 - 1.1488372093023255).abs() < 1e-12);

    let (b2, b4) = solve_alpha_constraints(0.80, 0.80, 3.5).unwrap();
    assert!((b2 - 1.60).abs() < 1e-12, "alpha2 {b2} != 1.60");
    assert!((b4 - 1.12).abs() <= 0.01, "alpha4 {b4} not within 0.01 of 1.12");
    assert!((b4 - 1.1142857142857143).abs() < 1e-12);
    format!("(0.90, 0.80, m=2.6875) -> ({a2:.4}, {a4:.4}); (0.80, 0.80, m=3.5) -> ({b2:.4}, {b4:.4})")
}

/// Criterion 7: grid search covers the full 121-point grid, every output
/// satisfies both constraints to 1e-9, and the winner is no worse than the
/// uniform allocation.
fn c07_grid_search() -> String {
    let cfg = ModelConfig {
        d: 16,
        layers: 2,
        heads: 2,
        kv_groups: 1,
        m_ratio: 2.0,
        vocab: 32,
        seed: 77,
    };
    let calib = calib_seqs(&cfg, cfg.seed, 4, 16);
    let (model, _, merged) = pipeline(&cfg, &calib);
    let eval = held_out_seqs(&cfg, cfg.seed, 2, 12);
    let space = SearchSpace::default();
    let result = grid_search(&model, &merged, &eval, 0.5, &space).unwrap();

    assert_eq!(result.trace.len() + result.skipped.len(), 121, "grid not exhausted");
    for point in &result.trace {
        let a = point.alpha;
        assert!((3.0 * a[0] + a[1] - 4.0).abs() <= 1e-9);
        assert!((2.0 * a[2] + cfg.m_ratio * a[3] - (2.0 + cfg.m_ratio)).abs() <= 1e-9);
    }
    let uniform = result
        .trace
        .iter()
        .find(|t| (t.alpha[0] - 1.0).abs() < 1e-9 && (t.alpha[2] - 1.0).abs() < 1e-9)
        .expect("uniform point in trace");
    assert!(result.objective <= uniform.objective);
    format!(
        "121-point trace, constraints hold; best objective {:.5} <= uniform {:.5}",
        result.objective, uniform.objective
    )
}

/// Criterion 8: fused Top-K GEMV is bitwise identical to the two-step
/// sparsify-then-GEMV composition on 100 random cases per shape.
fn c08_kernel_bitwise() -> String {
    let shapes: [(usize, usize); 3] = [(128, 512), (2048, 2048), (8192, 2048)];
    let mut cases = 0usize;
    for (i, &(d_out, d_in)) in shapes.iter().enumerate() {
        let mut rng = seeded_rng(800 + i as u64, STREAM_BENCH);
        let w = ColMajorWeight::from_data(d_out, d_in, gaussian_vec(&mut rng, d_out * d_in, 1.0))
            .unwrap();
        for case in 0..100usize {
            let x = gaussian_vec(&mut rng, d_in, 1.0);
            let k = (case * d_in) / 100;
            let fused = fused_topk_gemv(&w, &x, k).unwrap();
            let two_step = sparse_gemv(&w, &top_k_sparsify(&x, k).unwrap()).unwrap();
            assert_eq!(fused, two_step, "shape {d_out}x{d_in}, k = {k}");
            cases += 1;
        }
    }
    format!("{cases} cases bitwise identical across shapes 128x512, 2048x2048, 8192x2048")
}

/// Criterion 9: kernel speedup trend at D_in = D_out = 8192. Hard
/// assertions are the hardware-portable ones: sparse speedups strictly
/// increase across 25/50/75% sparsity and the 75% level runs at least
/// 1.3x dense. The fused 0% ratio is reported alongside: its true
/// selection overhead on this CPU kernel is a fraction of a percent, so
/// the measured value hovers at 1.0 within host noise.
fn c09_kernel_speedup_trend() -> String {
    let report = bench(8192, 8192, &[0.0, 0.25, 0.5, 0.75], 30, 7).unwrap();
    let s25 = report.row(0.25, "sparse").unwrap().speedup;
    let s50 = report.row(0.5, "sparse").unwrap().speedup;
    let s75 = report.row(0.75, "sparse").unwrap().speedup;
    let fused0 = report.row(0.0, "fused").unwrap().speedup;
    assert!(s25 < s50 && s50 < s75, "speedups not strictly increasing: {s25} {s50} {s75}");
    assert!(s75 >= 1.3, "75% sparse speedup {s75} below 1.3x");
    format!("sparse speedups {s25:.2}x < {s50:.2}x < {s75:.2}x; 75% >= 1.3x; fused 0% reports {fused0:.3}x")
}

/// Criterion 10: mean relative logit error is non-decreasing in p over
/// {0, 0.25, 0.5, 0.75} in rotated Top-K mode, for 5 seeds.
fn c10_monotone_degradation() -> String {
    let ps = [0.0, 0.25, 0.5, 0.75];
    let mut all_errors = Vec::new();
    for seed in 0..5u64 {
        let cfg = ModelConfig::desk_scale(900 + seed);
        let calib = calib_seqs(&cfg, cfg.seed, 4, 32);
        let (model, _, merged) = pipeline(&cfg, &calib);
        let eval = held_out_seqs(&cfg, cfg.seed, 2, 16);
        let dense: Vec<Mat> = eval
            .iter()
            .map(|seq| model.forward(seq, &Mode::Dense).unwrap())
            .collect();
        let mut errors = Vec::new();
        for &p in &ps {
            let plan = SparsityPlan::uniform(p, cfg.m_ratio, cfg.d, cfg.d_ff()).unwrap();
            let mut sum = 0.0;
            let mut count = 0usize;
            for (seq, d) in eval.iter().zip(&dense) {
                let got = merged.forward(seq, &Mode::TopK(&plan)).unwrap();
                let err = model_output_error(&got, d).unwrap();
                sum += err.per_token.iter().sum::<f64>();
                count += err.per_token.len();
            }
            errors.push(sum / count as f64);
        }
        for w in errors.windows(2) {
            assert!(
                w[0] <= w[1],
                "seed {seed}: error decreased from {} to {} as p grew: {errors:?}",
                w[0],
                w[1]
            );
        }
        all_errors.push(format!("{:.3}", errors[3]));
    }
    format!("non-decreasing for 5 seeds over p = 0/0.25/0.5/0.75 (errors at p=0.75: {})", all_errors.join(", "))
}

#[test]
fn acceptance() {
    type Criterion = (usize, &'static str, u64, Box<dyn FnOnce() -> String>);
    let criteria: Vec<Criterion> = vec![
        (1, "computational invariance at p = 0", 30, Box::new(c01_computational_invariance)),
        (2, "exact per-token site sparsity", 10, Box::new(c02_exact_sparsity)),
        (3, "calibrated-threshold fluctuation", 10, Box::new(c03_threshold_fluctuation)),
        (4, "closed-form vs Monte-Carlo agreement", 60, Box::new(c04_theorem_agreement)),
        (5, "rotated-vs-magnitude error dominance", 120, Box::new(c05_error_dominance)),
        (6, "coefficient constraint system", 10, Box::new(c06_constraint_system)),
        (7, "exhaustive coefficient grid search", 300, Box::new(c07_grid_search)),
        (8, "fused kernel bitwise equivalence", 30, Box::new(c08_kernel_bitwise)),
        (9, "kernel speedup trend", 120, Box::new(c09_kernel_speedup_trend)),
        (10, "monotone degradation in p", 60, Box::new(c10_monotone_degradation)),
    ];

    let mut failures = Vec::new();
    for (id, name, budget_s, body) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(body));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => {
                println!("criterion {id:02} [{name}]: PASS ({secs:.1}s of {budget_s}s) - {detail}")
            }
            Err(panic) => {
                let msg = panic
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panic".to_string());
                println!("criterion {id:02} [{name}]: FAIL ({secs:.1}s of {budget_s}s) - {msg}");
                failures.push(id);
            }
        }
    }
    assert!(failures.is_empty(), "failed acceptance criteria: {failures:?}");
}
