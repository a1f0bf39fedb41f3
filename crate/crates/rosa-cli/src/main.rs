//! `rosa` — harness for the rotated sparse activation pipeline.
//!
//! Subcommands: `synth` (write a seeded checkpoint), `calibrate`
//! (covariances -> rotation file), `merge` (rotated model file), `eval`
//! (per-site sparsity and logit-error metrics per mode), `search`
//! (coefficient grid search trace), `theory` (closed-form vs Monte-Carlo
//! vs empirical error tables), `bench` (kernel CSV).
//!
//! Every JSON report embeds the full configuration and seed; re-running
//! with the same arguments reproduces the numbers (timings excluded).
//! Exit codes: 0 success, 1 usage, 2 input/schema error, 3 numeric failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use rosa::error::{Error, ErrorKind};
use rosa::forward::{calibrate_thresholds, calibration_pass, model_output_error, Mode, SiteStats};
use rosa::kernel::bench;
use rosa::mat::Mat;
use rosa::model::{synth_model, Model, ModelConfig};
use rosa::rng::{
    seeded_rng, token_stream_zipf, STREAM_CALIB_TOKENS, STREAM_EVAL_TOKENS, ZIPF_CALIBRATION,
    ZIPF_HELD_OUT,
};
use rosa::rotation::{build_rotation, merge_rotations, RotatedModel, RotationMatrix};
use rosa::search::{grid_search, trace_csv, SearchSpace};
use rosa::sparsify::{SparsityPlan, ThresholdTable, SITES};
use rosa::theory::{
    empirical_error_table, error_table_csv, monte_carlo_relative_errors, theoretical_relative_error,
    theory_curve,
};
use rosa::weights;

#[derive(Parser)]
#[command(name = "rosa", version, about = "Rotated sparse activation harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a seeded checkpoint and write it as a weight file
    Synth(SynthCmd),
    /// Compute per-layer PCA rotations from calibration covariances
    Calibrate(CalibrateCmd),
    /// Merge rotations into the weights; write the rotated model
    Merge(MergeCmd),
    /// Per-site sparsity and relative logit error for a forward mode
    Eval(EvalCmd),
    /// Exhaustive grid search over the sparsity coefficients
    Search(SearchCmd),
    /// Closed-form error vs Monte-Carlo vs empirical error tables
    Theory(TheoryCmd),
    /// Micro-benchmark of the sparse GEMV kernel
    Bench(BenchCmd),
}

#[derive(Args)]
struct SourceArgs {
    /// Load the model from a weight file
    #[arg(long, value_name = "PATH", conflicts_with = "synth")]
    model: Option<PathBuf>,
    /// Synthesize a model: D,LAYERS,HEADS,KV_GROUPS,M_RATIO,VOCAB
    /// (defaults to the desk-scale 64,4,4,2,2.6875,256)
    #[arg(long, value_name = "D,L,H,G,M,V", value_parser = parse_synth_spec)]
    synth: Option<SynthSpec>,
    /// Seed for model synthesis and every synthetic stream
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, Debug)]
struct SynthSpec {
    d: usize,
    layers: usize,
    heads: usize,
    kv_groups: usize,
    m_ratio: f64,
    vocab: usize,
}

fn parse_synth_spec(s: &str) -> Result<SynthSpec, String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 6 {
        return Err(format!("expected 6 comma-separated fields D,L,H,G,M,V, got {}", parts.len()));
    }
    let num = |i: usize| -> Result<usize, String> {
        parts[i].trim().parse().map_err(|_| format!("field {} ({:?}) is not an integer", i + 1, parts[i]))
    };
    Ok(SynthSpec {
        d: num(0)?,
        layers: num(1)?,
        heads: num(2)?,
        kv_groups: num(3)?,
        m_ratio: parts[4].trim().parse().map_err(|_| format!("field 5 ({:?}) is not a number", parts[4]))?,
        vocab: num(5)?,
    })
}

impl SourceArgs {
    fn load(&self) -> rosa::Result<Model> {
        if let Some(path) = &self.model {
            return weights::load_model(path);
        }
        let spec = self.synth.unwrap_or(SynthSpec {
            d: 64,
            layers: 4,
            heads: 4,
            kv_groups: 2,
            m_ratio: 2.6875,
            vocab: 256,
        });
        let config = ModelConfig {
            d: spec.d,
            layers: spec.layers,
            heads: spec.heads,
            kv_groups: spec.kv_groups,
            m_ratio: spec.m_ratio,
            vocab: spec.vocab,
            seed: self.seed,
        };
        synth_model(&config)
    }
}

#[derive(Args)]
struct CalibArgs {
    /// Calibration sequence count
    #[arg(long, default_value_t = 16)]
    calib_seqs: usize,
    /// Calibration sequence length (tokens)
    #[arg(long, default_value_t = 128)]
    calib_len: usize,
    /// Raw 32-bit little-endian token ids to calibrate on instead of the
    /// synthetic stream
    #[arg(long, value_name = "PATH")]
    tokens: Option<PathBuf>,
}

impl CalibArgs {
    fn sequences(&self, vocab: usize, seed: u64) -> rosa::Result<(Vec<Vec<u32>>, String)> {
        if let Some(path) = &self.tokens {
            let seqs = weights::load_token_file(path, self.calib_seqs, self.calib_len)?;
            return Ok((seqs, path.display().to_string()));
        }
        let mut rng = seeded_rng(seed, STREAM_CALIB_TOKENS);
        let seqs = (0..self.calib_seqs)
            .map(|_| token_stream_zipf(&mut rng, vocab, self.calib_len, ZIPF_CALIBRATION))
            .collect();
        Ok((seqs, format!("synthetic-zipf({ZIPF_CALIBRATION})")))
    }
}

fn eval_sequences(vocab: usize, seed: u64, n: usize, len: usize) -> Vec<Vec<u32>> {
    let mut rng = seeded_rng(seed, STREAM_EVAL_TOKENS);
    (0..n).map(|_| token_stream_zipf(&mut rng, vocab, len, ZIPF_HELD_OUT)).collect()
}

#[derive(Args)]
struct SynthCmd {
    #[command(flatten)]
    source: SourceArgs,
    /// Output checkpoint path
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
}

#[derive(Args)]
struct CalibrateCmd {
    #[command(flatten)]
    source: SourceArgs,
    #[command(flatten)]
    calib: CalibArgs,
    /// Output rotation file path
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
}

#[derive(Args)]
struct MergeCmd {
    #[command(flatten)]
    source: SourceArgs,
    #[command(flatten)]
    calib: CalibArgs,
    /// Output rotated-model path
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Dense,
    Larosa,
    Topk,
    Teal,
    Cats,
}

impl ModeArg {
    fn name(self) -> &'static str {
        match self {
            ModeArg::Dense => "dense",
            ModeArg::Larosa => "larosa",
            ModeArg::Topk => "topk",
            ModeArg::Teal => "teal",
            ModeArg::Cats => "cats",
        }
    }
}

#[derive(Args)]
struct EvalCmd {
    #[command(flatten)]
    source: SourceArgs,
    #[command(flatten)]
    calib: CalibArgs,
    /// Target model-level sparsity
    #[arg(long, default_value_t = 0.5)]
    p: f64,
    #[arg(long, value_enum, default_value_t = ModeArg::Larosa)]
    mode: ModeArg,
    /// Free coefficients "a1,a3"; the dependent pair is solved from the
    /// constraint system (default: uniform 1,1)
    #[arg(long, value_name = "A1,A3", conflicts_with = "search")]
    alpha: Option<String>,
    /// Run the coefficient grid search before evaluating
    #[arg(long)]
    search: bool,
    /// Held-out evaluation sequence count
    #[arg(long, default_value_t = 8)]
    eval_seqs: usize,
    /// Held-out evaluation sequence length
    #[arg(long, default_value_t = 64)]
    eval_len: usize,
    /// Also write the JSON report here
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SearchCmd {
    #[command(flatten)]
    source: SourceArgs,
    #[command(flatten)]
    calib: CalibArgs,
    #[arg(long, default_value_t = 0.5)]
    p: f64,
    #[arg(long, default_value_t = 8)]
    eval_seqs: usize,
    #[arg(long, default_value_t = 64)]
    eval_len: usize,
    /// Write the full trace CSV here
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TheoryCmd {
    #[command(flatten)]
    source: SourceArgs,
    #[command(flatten)]
    calib: CalibArgs,
    /// Monte-Carlo activation width
    #[arg(long, default_value_t = 4096)]
    mc_d_in: usize,
    /// Monte-Carlo output width
    #[arg(long, default_value_t = 1024)]
    mc_d_out: usize,
    /// Monte-Carlo samples per estimate
    #[arg(long, default_value_t = 2000)]
    mc_samples: usize,
    /// Write the empirical comparison CSV here
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchCmd {
    #[arg(long, default_value_t = 2048)]
    d_in: usize,
    #[arg(long, default_value_t = 2048)]
    d_out: usize,
    /// Timed repetitions per cell (5 warm-up reps are discarded)
    #[arg(long, default_value_t = 30)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Sparsity levels to time
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.0, 0.25, 0.5, 0.75])]
    sparsity: Vec<f64>,
    /// Write the timing CSV here
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind as ClapKind;
            let code = match e.kind() {
                ClapKind::DisplayHelp | ClapKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e.kind() {
                ErrorKind::Input => ExitCode::from(2),
                ErrorKind::Numeric => ExitCode::from(3),
            }
        }
    }
}

fn run(command: Command) -> rosa::Result<()> {
    match command {
        Command::Synth(cmd) => run_synth(cmd),
        Command::Calibrate(cmd) => run_calibrate(cmd),
        Command::Merge(cmd) => run_merge(cmd),
        Command::Eval(cmd) => run_eval(cmd),
        Command::Search(cmd) => run_search(cmd),
        Command::Theory(cmd) => run_theory(cmd),
        Command::Bench(cmd) => run_bench(cmd),
    }
}

fn emit_report<T: Serialize>(report: &T, copy: Option<&Path>) -> rosa::Result<()> {
    let json = serde_json::to_string_pretty(report).expect("serializable report");
    println!("{json}");
    if let Some(path) = copy {
        std::fs::write(path, json)?;
    }
    Ok(())
}

fn rotate_pipeline(
    model: &Model,
    calib: &[Vec<u32>],
) -> rosa::Result<(Vec<RotationMatrix>, RotatedModel)> {
    let accs = calibration_pass(model, calib)?;
    let mut rotations = Vec::with_capacity(accs.len());
    for acc in &accs {
        rotations.push(build_rotation(&acc.finalize()?)?);
    }
    let merged = merge_rotations(model, &rotations)?;
    Ok((rotations, merged))
}

#[derive(Serialize)]
struct SynthReport {
    command: &'static str,
    config: ModelConfig,
    out: String,
}

fn run_synth(cmd: SynthCmd) -> rosa::Result<()> {
    let model = cmd.source.load()?;
    weights::save_model(&model, &cmd.out)?;
    emit_report(
        &SynthReport {
            command: "synth",
            config: model.config,
            out: cmd.out.display().to_string(),
        },
        None,
    )
}

#[derive(Serialize)]
struct CalibrateReport {
    command: &'static str,
    config: ModelConfig,
    seed: u64,
    calib_seqs: usize,
    calib_len: usize,
    calib_source: String,
    /// Leading eigenvalue and total variance per layer, a quick look at
    /// how much structure the rotation has to exploit.
    layer_spectrum: Vec<LayerSpectrum>,
    out: String,
}

#[derive(Serialize)]
struct LayerSpectrum {
    layer: usize,
    top_eigenvalue: f64,
    trace: f64,
}

fn run_calibrate(cmd: CalibrateCmd) -> rosa::Result<()> {
    let model = cmd.source.load()?;
    let (calib, calib_source) = cmd.calib.sequences(model.config.vocab, cmd.source.seed)?;
    let accs = calibration_pass(&model, &calib)?;
    let mut rotations = Vec::new();
    let mut layer_spectrum = Vec::new();
    for (layer, acc) in accs.iter().enumerate() {
        let cov = acc.finalize()?;
        let trace = (0..cov.rows()).map(|i| cov.at(i, i)).sum();
        let rotation = build_rotation(&cov)?;
        // top eigenvalue = variance captured by the first principal column
        let q0: Vec<f64> = (0..cov.rows()).map(|i| rotation.mat().at(i, 0)).collect();
        let top_eigenvalue = quadratic_form(&cov, &q0);
        layer_spectrum.push(LayerSpectrum {
            layer,
            top_eigenvalue,
            trace,
        });
        rotations.push(rotation);
    }
    weights::save_rotations(&rotations, &model.config, &cmd.out)?;
    emit_report(
        &CalibrateReport {
            command: "calibrate",
            config: model.config,
            seed: cmd.source.seed,
            calib_seqs: cmd.calib.calib_seqs,
            calib_len: cmd.calib.calib_len,
            calib_source,
            layer_spectrum,
            out: cmd.out.display().to_string(),
        },
        None,
    )
}

fn quadratic_form(a: &Mat, v: &[f64]) -> f64 {
    let mut out = 0.0;
    for i in 0..a.rows() {
        let mut row = 0.0;
        for (j, &vj) in v.iter().enumerate() {
            row += a.at(i, j) * vj;
        }
        out += v[i] * row;
    }
    out
}

#[derive(Serialize)]
struct MergeReport {
    command: &'static str,
    config: ModelConfig,
    seed: u64,
    calib_seqs: usize,
    calib_len: usize,
    calib_source: String,
    adapters: usize,
    embed_rotation_applied: bool,
    head_rotation_applied: bool,
    out: String,
}

fn run_merge(cmd: MergeCmd) -> rosa::Result<()> {
    let model = cmd.source.load()?;
    let (calib, calib_source) = cmd.calib.sequences(model.config.vocab, cmd.source.seed)?;
    let (_, merged) = rotate_pipeline(&model, &calib)?;
    weights::save_rotated_model(&merged, &cmd.out)?;
    emit_report(
        &MergeReport {
            command: "merge",
            config: model.config,
            seed: cmd.source.seed,
            calib_seqs: cmd.calib.calib_seqs,
            calib_len: cmd.calib.calib_len,
            calib_source,
            adapters: merged.adapters.len(),
            embed_rotation_applied: merged.embed_rotation_applied,
            head_rotation_applied: merged.head_rotation_applied,
            out: cmd.out.display().to_string(),
        },
        None,
    )
}

#[derive(Serialize)]
struct SiteReport {
    layer: usize,
    site: &'static str,
    mean: f64,
    std: f64,
    min: f64,
    max: f64,
    /// Sparsity of the first token of the first sequence: the guarantee
    /// holds from token 0, with no initial-token exception.
    token0: f64,
}

#[derive(Serialize)]
struct EvalReport {
    command: &'static str,
    config: ModelConfig,
    seed: u64,
    mode: &'static str,
    p: f64,
    alpha: Option<[f64; 4]>,
    calib_seqs: usize,
    calib_len: usize,
    calib_source: String,
    eval_seqs: usize,
    eval_len: usize,
    eval_source: String,
    plan_site_sparsity: Option<Vec<f64>>,
    plan_model_sparsity: Option<f64>,
    measured_model_sparsity: f64,
    logit_error_mean: f64,
    logit_error_max: f64,
    sites: Vec<SiteReport>,
}

fn run_eval(cmd: EvalCmd) -> rosa::Result<()> {
    let model = cmd.source.load()?;
    let cfg = model.config;
    let (calib, calib_source) = cmd.calib.sequences(cfg.vocab, cmd.source.seed)?;
    let eval = eval_sequences(cfg.vocab, cmd.source.seed, cmd.eval_seqs, cmd.eval_len);

    let dense: Vec<Mat> = eval
        .iter()
        .map(|seq| model.forward(seq, &Mode::Dense))
        .collect::<rosa::Result<_>>()?;

    // coefficient selection for the Top-K modes
    let needs_plan = matches!(cmd.mode, ModeArg::Larosa | ModeArg::Topk);
    let plan: Option<SparsityPlan> = if needs_plan {
        let (a1, a3) = match (&cmd.alpha, cmd.search) {
            (Some(spec), _) => {
                let parts: Vec<&str> = spec.split(',').collect();
                if parts.len() != 2 {
                    return Err(Error::arg("eval", format!("--alpha expects \"a1,a3\", got {spec:?}")));
                }
                let a1: f64 = parts[0].trim().parse().map_err(|_| Error::arg("eval", "bad alpha1"))?;
                let a3: f64 = parts[1].trim().parse().map_err(|_| Error::arg("eval", "bad alpha3"))?;
                (a1, a3)
            }
            (None, true) => {
                let (_, merged) = rotate_pipeline(&model, &calib)?;
                let result = grid_search(&model, &merged, &eval, cmd.p, &SearchSpace::default())?;
                (result.alpha[0], result.alpha[2])
            }
            (None, false) => (1.0, 1.0),
        };
        Some(SparsityPlan::new(cmd.p, a1, a3, cfg.m_ratio, cfg.d, cfg.d_ff())?)
    } else {
        None
    };

    let thresholds: Option<ThresholdTable> = if matches!(cmd.mode, ModeArg::Teal | ModeArg::Cats) {
        Some(calibrate_thresholds(&model, &calib, cmd.p)?)
    } else {
        None
    };

    let mut stats = SiteStats::new(cfg.layers);
    let mut outputs: Vec<Mat> = Vec::with_capacity(eval.len());
    match cmd.mode {
        ModeArg::Dense => {
            for seq in &eval {
                let (logits, s) = model.forward_with_stats(seq, &Mode::Dense)?;
                outputs.push(logits);
                stats.absorb(s);
            }
        }
        ModeArg::Topk => {
            let mode = Mode::TopK(plan.as_ref().unwrap());
            for seq in &eval {
                let (logits, s) = model.forward_with_stats(seq, &mode)?;
                outputs.push(logits);
                stats.absorb(s);
            }
        }
        ModeArg::Larosa => {
            let (_, merged) = rotate_pipeline(&model, &calib)?;
            let mode = Mode::TopK(plan.as_ref().unwrap());
            for seq in &eval {
                let (logits, s) = merged.forward_with_stats(seq, &mode)?;
                outputs.push(logits);
                stats.absorb(s);
            }
        }
        ModeArg::Teal => {
            let mode = Mode::Teal(thresholds.as_ref().unwrap());
            for seq in &eval {
                let (logits, s) = model.forward_with_stats(seq, &mode)?;
                outputs.push(logits);
                stats.absorb(s);
            }
        }
        ModeArg::Cats => {
            let mode = Mode::Cats(thresholds.as_ref().unwrap());
            for seq in &eval {
                let (logits, s) = model.forward_with_stats(seq, &mode)?;
                outputs.push(logits);
                stats.absorb(s);
            }
        }
    }

    let mut err_mean_acc = 0.0;
    let mut err_max = 0.0f64;
    let mut tokens = 0usize;
    for (d, c) in dense.iter().zip(&outputs) {
        let err = model_output_error(c, d)?;
        err_mean_acc += err.per_token.iter().sum::<f64>();
        err_max = err_max.max(err.max);
        tokens += err.per_token.len();
    }

    let mut sites = Vec::new();
    let mut site_means = [0.0f64; 4];
    for layer in 0..cfg.layers {
        for site in SITES {
            let rec = stats.record(layer, site);
            site_means[site.index()] += rec.mean() / cfg.layers as f64;
            sites.push(SiteReport {
                layer,
                site: site.label(),
                mean: rec.mean(),
                std: rec.std(),
                min: rec.min(),
                max: rec.max(),
                token0: rec.sparsities[0],
            });
        }
    }
    let measured_model_sparsity = (3.0 * site_means[0]
        + site_means[1]
        + 2.0 * site_means[2]
        + cfg.m_ratio * site_means[3])
        / (6.0 + cfg.m_ratio);

    let report = EvalReport {
        command: "eval",
        config: cfg,
        seed: cmd.source.seed,
        mode: cmd.mode.name(),
        p: cmd.p,
        alpha: plan.as_ref().map(|p| p.alpha),
        calib_seqs: cmd.calib.calib_seqs,
        calib_len: cmd.calib.calib_len,
        calib_source,
        eval_seqs: cmd.eval_seqs,
        eval_len: cmd.eval_len,
        eval_source: format!("synthetic-zipf({ZIPF_HELD_OUT})"),
        plan_site_sparsity: plan
            .as_ref()
            .map(|p| SITES.iter().map(|&s| p.site_sparsity(s)).collect()),
        plan_model_sparsity: plan.as_ref().map(|p| p.model_sparsity()),
        measured_model_sparsity,
        logit_error_mean: err_mean_acc / tokens as f64,
        logit_error_max: err_max,
        sites,
    };
    emit_report(&report, cmd.out.as_deref())
}

#[derive(Serialize)]
struct SearchReport {
    command: &'static str,
    config: ModelConfig,
    seed: u64,
    p: f64,
    calib_seqs: usize,
    calib_len: usize,
    calib_source: String,
    eval_seqs: usize,
    eval_len: usize,
    grid_points: usize,
    evaluated: usize,
    skipped: usize,
    alpha: [f64; 4],
    objective: f64,
    uniform_objective: f64,
    trace_out: Option<String>,
}

fn run_search(cmd: SearchCmd) -> rosa::Result<()> {
    let model = cmd.source.load()?;
    let cfg = model.config;
    let (calib, calib_source) = cmd.calib.sequences(cfg.vocab, cmd.source.seed)?;
    let eval = eval_sequences(cfg.vocab, cmd.source.seed, cmd.eval_seqs, cmd.eval_len);
    let (_, merged) = rotate_pipeline(&model, &calib)?;
    let space = SearchSpace::default();
    let result = grid_search(&model, &merged, &eval, cmd.p, &space)?;
    if let Some(path) = &cmd.out {
        std::fs::write(path, trace_csv(&result.trace))?;
    }
    let uniform_objective = result
        .trace
        .iter()
        .find(|t| (t.alpha[0] - 1.0).abs() < 1e-9 && (t.alpha[2] - 1.0).abs() < 1e-9)
        .map(|t| t.objective)
        .unwrap_or(f64::NAN);
    emit_report(
        &SearchReport {
            command: "search",
            config: cfg,
            seed: cmd.source.seed,
            p: cmd.p,
            calib_seqs: cmd.calib.calib_seqs,
            calib_len: cmd.calib.calib_len,
            calib_source,
            eval_seqs: cmd.eval_seqs,
            eval_len: cmd.eval_len,
            grid_points: space.alpha1_values().len() * space.alpha3_values().len(),
            evaluated: result.trace.len(),
            skipped: result.skipped.len(),
            alpha: result.alpha,
            objective: result.objective,
            uniform_objective,
            trace_out: cmd.out.as_ref().map(|p| p.display().to_string()),
        },
        None,
    )
}

#[derive(Serialize)]
struct TheoryMcRow {
    keep_fraction: f64,
    k: usize,
    theory: f64,
    monte_carlo: f64,
    relative_gap: f64,
}

#[derive(Serialize)]
struct TheoryReport {
    command: &'static str,
    config: ModelConfig,
    seed: u64,
    mc_d_in: usize,
    mc_d_out: usize,
    mc_samples: usize,
    /// Exact endpoints of the closed form: 0 at full keep, 1 at zero keep.
    endpoint_full_keep: f64,
    endpoint_zero_keep: f64,
    /// The closed-form error curve over keep fractions, for plotting.
    curve: Vec<rosa::theory::TheoryPoint>,
    mc_rows: Vec<TheoryMcRow>,
    probe_layer: usize,
    empirical_rows: Vec<rosa::theory::ErrorTableRow>,
    table_out: Option<String>,
}

fn run_theory(cmd: TheoryCmd) -> rosa::Result<()> {
    let model = cmd.source.load()?;
    let cfg = model.config;
    let (calib, _) = cmd.calib.sequences(cfg.vocab, cmd.source.seed)?;

    let d = cmd.mc_d_in;
    let ks = [d / 4, d / 2, 3 * d / 4];
    if cmd.mc_samples < 1000 {
        return Err(Error::arg("theory", "need >= 1000 Monte-Carlo samples"));
    }
    let mc = monte_carlo_relative_errors(d, cmd.mc_d_out, &ks, 1.0, 1.0, cmd.mc_samples, cmd.source.seed);
    let mc_rows: Vec<TheoryMcRow> = ks
        .iter()
        .zip(&mc)
        .map(|(&k, &monte_carlo)| {
            let theory = theoretical_relative_error(k, d);
            TheoryMcRow {
                keep_fraction: k as f64 / d as f64,
                k,
                theory,
                monte_carlo,
                relative_gap: (monte_carlo - theory).abs() / theory,
            }
        })
        .collect();

    let (_, merged) = rotate_pipeline(&model, &calib)?;
    let probe_layer = cfg.layers / 2;
    let levels = [0.0, 0.25, 0.5, 0.75];
    let empirical_rows = empirical_error_table(&model, &merged, &calib, &levels, probe_layer)?;
    if let Some(path) = &cmd.out {
        std::fs::write(path, error_table_csv(&empirical_rows))?;
    }

    emit_report(
        &TheoryReport {
            command: "theory",
            config: cfg,
            seed: cmd.source.seed,
            mc_d_in: d,
            mc_d_out: cmd.mc_d_out,
            mc_samples: cmd.mc_samples,
            endpoint_full_keep: theoretical_relative_error(d, d),
            endpoint_zero_keep: theoretical_relative_error(0, d),
            curve: theory_curve(d, 20),
            mc_rows,
            probe_layer,
            empirical_rows,
            table_out: cmd.out.as_ref().map(|p| p.display().to_string()),
        },
        None,
    )
}

#[derive(Serialize)]
struct BenchJson {
    command: &'static str,
    d_in: usize,
    d_out: usize,
    reps: usize,
    seed: u64,
    sparsity_levels: Vec<f64>,
    report: rosa::kernel::BenchReport,
    csv_out: Option<String>,
}

fn run_bench(cmd: BenchCmd) -> rosa::Result<()> {
    let report = bench(cmd.d_in, cmd.d_out, &cmd.sparsity, cmd.reps, cmd.seed)?;
    if let Some(path) = &cmd.out {
        std::fs::write(path, report.to_csv())?;
    }
    emit_report(
        &BenchJson {
            command: "bench",
            d_in: cmd.d_in,
            d_out: cmd.d_out,
            reps: cmd.reps,
            seed: cmd.seed,
            sparsity_levels: cmd.sparsity.clone(),
            report,
            csv_out: cmd.out.as_ref().map(|p| p.display().to_string()),
        },
        None,
    )
}
