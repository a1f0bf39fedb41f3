//! Forward passes over the decoder stack: dense, Top-K, and the calibrated
//! magnitude baselines, plus calibration passes and per-site sparsity
//! instrumentation.
//!
//! Block structure per layer (pre-norm): RMSNorm -> Q/K/V projections ->
//! causal grouped-query attention -> O projection -> residual add, then
//! RMSNorm -> Up/Gate -> SiLU-gated product -> Down projection -> residual
//! add. Sparsification applies per token at the four projection inputs
//! (h1 = Q/K/V input, h2 = O input, h3 = Up/Gate input, h4 = Down input).
//! Positions are implicit in the causal mask; no rotary embedding.

use crate::error::{Error, Result};
use crate::mat::{matmul, matmul_nt, relative_l2_error, rmsnorm, Mat};
use crate::model::{LayerWeights, Model, ModelConfig, RMSNORM_EPS};
use crate::rotation::{CovarianceAccumulator, RotatedModel};
use crate::sparsify::{
    calibrate_magnitude_thresholds, top_k_sparsify, Site, SparsityPlan, ThresholdTable,
};

/// Sparsification mode of a forward pass.
///
/// `TopK` on a merged [`RotatedModel`] is the full rotated pipeline; on an
/// unrotated [`Model`] it is the plain Top-K baseline. The magnitude modes
/// run on the unrotated model: `Teal` thresholds every site, `Cats` only
/// the down-projection input.
#[derive(Debug, Clone, Copy)]
pub enum Mode<'a> {
    Dense,
    TopK(&'a SparsityPlan),
    Teal(&'a ThresholdTable),
    Cats(&'a ThresholdTable),
}

/// Per-token sparsity observations for one (layer, site).
#[derive(Debug, Clone, Default)]
pub struct SiteRecord {
    pub sparsities: Vec<f64>,
}

impl SiteRecord {
    pub fn mean(&self) -> f64 {
        if self.sparsities.is_empty() {
            return 0.0;
        }
        self.sparsities.iter().sum::<f64>() / self.sparsities.len() as f64
    }

    pub fn min(&self) -> f64 {
        self.sparsities.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.sparsities.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Population standard deviation; exactly 0.0 when all observations are
    /// identical (guarded via min == max so summation rounding cannot
    /// manufacture spurious spread).
    pub fn std(&self) -> f64 {
        if self.sparsities.len() < 2 || self.min() == self.max() {
            return 0.0;
        }
        let mean = self.mean();
        let var = self
            .sparsities
            .iter()
            .map(|s| (s - mean) * (s - mean))
            .sum::<f64>()
            / self.sparsities.len() as f64;
        var.sqrt()
    }
}

/// Sparsity observations for every (layer, site) of a pass.
#[derive(Debug, Clone)]
pub struct SiteStats {
    pub layers: Vec<[SiteRecord; 4]>,
}

impl SiteStats {
    pub fn new(layers: usize) -> Self {
        SiteStats {
            layers: (0..layers).map(|_| Default::default()).collect(),
        }
    }

    pub fn record(&self, layer: usize, site: Site) -> &SiteRecord {
        &self.layers[layer][site.index()]
    }

    /// Merges token observations from another pass (e.g. across sequences).
    pub fn absorb(&mut self, other: SiteStats) {
        assert_eq!(self.layers.len(), other.layers.len());
        for (dst, src) in self.layers.iter_mut().zip(other.layers) {
            for (d, s) in dst.iter_mut().zip(src) {
                d.sparsities.extend(s.sparsities);
            }
        }
    }
}

/// Sparsifies one token row in place per the mode, returning the sparsity
/// of the activation the projections will actually consume.
fn apply_site(row: &mut [f64], mode: &Mode<'_>, layer: usize, site: Site) -> Result<f64> {
    match mode {
        Mode::Dense => {}
        Mode::TopK(plan) => {
            if plan.site_dim(site) != row.len() {
                return Err(Error::dim("sparsity plan", plan.site_dim(site), row.len()));
            }
            let sv = top_k_sparsify(row, plan.k_for(site))?;
            row.fill(0.0);
            for (&i, &v) in sv.indices().iter().zip(sv.values()) {
                row[i] = v;
            }
        }
        Mode::Teal(tt) => {
            let eps = tt.eps(layer, site);
            for v in row.iter_mut() {
                if v.abs() <= eps {
                    *v = 0.0;
                }
            }
        }
        Mode::Cats(tt) => {
            if site == Site::MlpMid {
                let eps = tt.eps(layer, site);
                for v in row.iter_mut() {
                    if v.abs() <= eps {
                        *v = 0.0;
                    }
                }
            }
        }
    }
    let zeros = row.iter().filter(|&&v| v == 0.0).count();
    Ok(zeros as f64 / row.len() as f64)
}

fn sparsify_batch(
    batch: &mut Mat,
    mode: &Mode<'_>,
    layer: usize,
    site: Site,
    rec: &mut Option<&mut [SiteRecord; 4]>,
) -> Result<()> {
    for t in 0..batch.rows() {
        let s = apply_site(batch.row_mut(t), mode, layer, site)?;
        if let Some(rec) = rec {
            rec[site.index()].sparsities.push(s);
        }
    }
    Ok(())
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Causal grouped-query attention over already-sparsified inputs.
fn attention(h1: &Mat, lw: &LayerWeights, cfg: &ModelConfig) -> Result<Mat> {
    let q = matmul_nt(h1, &lw.wq)?;
    let k = matmul_nt(h1, &lw.wk)?;
    let v = matmul_nt(h1, &lw.wv)?;
    let n = h1.rows();
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let heads_per_group = cfg.heads / cfg.kv_groups;
    let mut out = Mat::zeros(n, cfg.d);
    let mut scores = Vec::new();
    for h in 0..cfg.heads {
        let g = h / heads_per_group;
        for i in 0..n {
            scores.clear();
            let mut max_s = f64::NEG_INFINITY;
            for j in 0..=i {
                let mut s = 0.0;
                for t in 0..hd {
                    s += q.at(i, h * hd + t) * k.at(j, g * hd + t);
                }
                s *= scale;
                max_s = max_s.max(s);
                scores.push(s);
            }
            let mut denom = 0.0;
            for s in scores.iter_mut() {
                *s = (*s - max_s).exp();
                denom += *s;
            }
            for t in 0..hd {
                let mut acc = 0.0;
                for (j, w) in scores.iter().enumerate() {
                    acc += w * v.at(j, g * hd + t);
                }
                out.set(i, h * hd + t, acc / denom);
            }
        }
    }
    Ok(out)
}

fn rmsnorm_rows(batch: &Mat, gain: &[f64]) -> Result<Mat> {
    let mut out = Mat::zeros(batch.rows(), batch.cols());
    for t in 0..batch.rows() {
        let normed = rmsnorm(batch.row(t), gain, RMSNORM_EPS)?;
        out.row_mut(t).copy_from_slice(&normed);
    }
    Ok(out)
}

fn add_rows(a: &Mat, b: &Mat) -> Mat {
    let mut out = Mat::zeros(a.rows(), a.cols());
    for t in 0..a.rows() {
        for j in 0..a.cols() {
            out.set(t, j, a.at(t, j) + b.at(t, j));
        }
    }
    out
}

/// One layer's outputs, with the pre-residual down-projection output kept
/// for error probes.
pub struct LayerTrace {
    pub state: Mat,
    pub down_projection: Mat,
}

fn run_layer(
    state: &Mat,
    lw: &LayerWeights,
    cfg: &ModelConfig,
    layer: usize,
    mode: &Mode<'_>,
    mut rec: Option<&mut [SiteRecord; 4]>,
) -> Result<LayerTrace> {
    // attention block
    let mut h1 = rmsnorm_rows(state, &lw.attn_norm_gain)?;
    sparsify_batch(&mut h1, mode, layer, Site::AttnIn, &mut rec)?;
    let mut h2 = attention(&h1, lw, cfg)?;
    sparsify_batch(&mut h2, mode, layer, Site::AttnMid, &mut rec)?;
    let o = matmul_nt(&h2, &lw.wo)?;
    let mid = add_rows(state, &o);

    // MLP block
    let mut h3 = rmsnorm_rows(&mid, &lw.mlp_norm_gain)?;
    sparsify_batch(&mut h3, mode, layer, Site::MlpIn, &mut rec)?;
    let up = matmul_nt(&h3, &lw.wup)?;
    let gate = matmul_nt(&h3, &lw.wgate)?;
    let mut h4 = Mat::zeros(state.rows(), cfg.d_ff());
    for t in 0..state.rows() {
        for j in 0..cfg.d_ff() {
            h4.set(t, j, silu(gate.at(t, j)) * up.at(t, j));
        }
    }
    sparsify_batch(&mut h4, mode, layer, Site::MlpMid, &mut rec)?;
    let down = matmul_nt(&h4, &lw.wdown)?;
    let out = add_rows(&mid, &down);
    Ok(LayerTrace {
        state: out,
        down_projection: down,
    })
}

/// One decoder layer applied to a token batch (rows = tokens).
pub fn layer_forward(
    state: &Mat,
    lw: &LayerWeights,
    cfg: &ModelConfig,
    layer: usize,
    mode: &Mode<'_>,
) -> Result<Mat> {
    if state.cols() != cfg.d {
        return Err(Error::dim("layer_forward", cfg.d, state.cols()));
    }
    validate_mode(cfg, layer + 1, mode)?;
    Ok(run_layer(state, lw, cfg, layer, mode, None)?.state)
}

/// Like [`layer_forward`] but also returns the pre-residual down-projection
/// output, the probe point for per-block error measurements.
pub fn layer_forward_traced(
    state: &Mat,
    lw: &LayerWeights,
    cfg: &ModelConfig,
    layer: usize,
    mode: &Mode<'_>,
) -> Result<LayerTrace> {
    if state.cols() != cfg.d {
        return Err(Error::dim("layer_forward", cfg.d, state.cols()));
    }
    validate_mode(cfg, layer + 1, mode)?;
    run_layer(state, lw, cfg, layer, mode, None)
}

fn validate_mode(cfg: &ModelConfig, layers: usize, mode: &Mode<'_>) -> Result<()> {
    match mode {
        Mode::Dense => Ok(()),
        Mode::TopK(plan) => {
            if plan.d_hidden != cfg.d || plan.d_intermediate != cfg.d_ff() {
                return Err(Error::dim(
                    "sparsity plan",
                    format!("dims ({}, {})", cfg.d, cfg.d_ff()),
                    format!("({}, {})", plan.d_hidden, plan.d_intermediate),
                ));
            }
            Ok(())
        }
        Mode::Teal(tt) | Mode::Cats(tt) => {
            if tt.layers() < layers {
                return Err(Error::dim("threshold table", layers, tt.layers()));
            }
            Ok(())
        }
    }
}

fn embed_tokens(model: &Model, tokens: &[u32]) -> Result<Mat> {
    if tokens.is_empty() {
        return Err(Error::arg("forward", "empty token sequence"));
    }
    let mut state = Mat::zeros(tokens.len(), model.config.d);
    for (t, &tok) in tokens.iter().enumerate() {
        if tok as usize >= model.config.vocab {
            return Err(Error::arg(
                "forward",
                format!("token id {tok} out of range for vocab {}", model.config.vocab),
            ));
        }
        state.row_mut(t).copy_from_slice(model.embed.row(tok as usize));
    }
    Ok(state)
}

fn forward_impl(
    model: &Model,
    adapters: Option<&[Mat]>,
    tokens: &[u32],
    mode: &Mode<'_>,
    mut stats: Option<&mut SiteStats>,
) -> Result<Mat> {
    validate_mode(&model.config, model.config.layers, mode)?;
    if let Some(adps) = adapters {
        if adps.len() + 1 != model.config.layers {
            return Err(Error::dim("adapters", model.config.layers - 1, adps.len()));
        }
    }
    let mut state = embed_tokens(model, tokens)?;
    for (l, lw) in model.layers.iter().enumerate() {
        let rec = stats.as_deref_mut().map(|s| &mut s.layers[l]);
        state = run_layer(&state, lw, &model.config, l, mode, rec)?.state;
        if let Some(adps) = adapters {
            if l + 1 < model.config.layers {
                state = matmul(&state, &adps[l])?;
            }
        }
    }
    let normed = rmsnorm_rows(&state, &model.final_norm_gain)?;
    matmul_nt(&normed, &model.head)
}

impl Model {
    /// Logits (`tokens x vocab`) for one sequence.
    pub fn forward(&self, tokens: &[u32], mode: &Mode<'_>) -> Result<Mat> {
        forward_impl(self, None, tokens, mode, None)
    }

    pub fn forward_with_stats(&self, tokens: &[u32], mode: &Mode<'_>) -> Result<(Mat, SiteStats)> {
        let mut stats = SiteStats::new(self.config.layers);
        let logits = forward_impl(self, None, tokens, mode, Some(&mut stats))?;
        Ok((logits, stats))
    }
}

impl RotatedModel {
    /// Forward with the residual adapters applied between layers.
    pub fn forward(&self, tokens: &[u32], mode: &Mode<'_>) -> Result<Mat> {
        forward_impl(&self.model, Some(&self.adapters), tokens, mode, None)
    }

    pub fn forward_with_stats(&self, tokens: &[u32], mode: &Mode<'_>) -> Result<(Mat, SiteStats)> {
        let mut stats = SiteStats::new(self.model.config.layers);
        let logits =
            forward_impl(&self.model, Some(&self.adapters), tokens, mode, Some(&mut stats))?;
        Ok((logits, stats))
    }
}

/// Residual-stream inputs of every layer during a dense pass.
pub fn layer_inputs_dense(model: &Model, tokens: &[u32]) -> Result<Vec<Mat>> {
    layer_inputs_impl(model, None, tokens)
}

fn layer_inputs_impl(model: &Model, adapters: Option<&[Mat]>, tokens: &[u32]) -> Result<Vec<Mat>> {
    let mut inputs = Vec::with_capacity(model.config.layers);
    let mut state = embed_tokens(model, tokens)?;
    for (l, lw) in model.layers.iter().enumerate() {
        inputs.push(state.clone());
        state = run_layer(&state, lw, &model.config, l, &Mode::Dense, None)?.state;
        if let Some(adps) = adapters {
            if l + 1 < model.config.layers {
                state = matmul(&state, &adps[l])?;
            }
        }
    }
    Ok(inputs)
}

impl RotatedModel {
    /// Residual-stream inputs of every layer during a dense pass, with the
    /// adapters applied; layer `l`'s input is in `Q_l`-rotated coordinates.
    pub fn layer_inputs_dense(&self, tokens: &[u32]) -> Result<Vec<Mat>> {
        layer_inputs_impl(&self.model, Some(&self.adapters), tokens)
    }
}

/// Accumulates per-layer covariances of the layer-input residual stream
/// over calibration sequences, all from one dense pass per sequence.
pub fn calibration_pass(model: &Model, seqs: &[Vec<u32>]) -> Result<Vec<CovarianceAccumulator>> {
    if seqs.is_empty() {
        return Err(Error::arg("calibration_pass", "no calibration sequences"));
    }
    let mut accs: Vec<CovarianceAccumulator> = (0..model.config.layers)
        .map(|_| CovarianceAccumulator::new(model.config.d))
        .collect();
    for seq in seqs {
        let inputs = layer_inputs_dense(model, seq)?;
        for (acc, x) in accs.iter_mut().zip(&inputs) {
            acc.accumulate(x)?;
        }
    }
    Ok(accs)
}

/// Dense-pass activations at the four sites of every layer, plus the
/// unit-gain normalized variants the gain-folded (rotated) pipeline sees.
pub struct LayerSites {
    /// h1: attention-norm output with gain applied.
    pub attn_in: Mat,
    /// Attention-norm output before the gain.
    pub attn_norm_unit: Mat,
    /// h2: attention output feeding the O projection.
    pub attn_mid: Mat,
    /// h3: MLP-norm output with gain applied.
    pub mlp_in: Mat,
    pub mlp_norm_unit: Mat,
    /// h4: gated product feeding the Down projection.
    pub mlp_mid: Mat,
}

/// Captures dense-pass site activations for error probes.
pub fn capture_sites(model: &Model, tokens: &[u32]) -> Result<Vec<LayerSites>> {
    let ones = vec![1.0; model.config.d];
    let cfg = &model.config;
    let mut out = Vec::with_capacity(cfg.layers);
    let mut state = embed_tokens(model, tokens)?;
    for lw in &model.layers {
        let attn_in = rmsnorm_rows(&state, &lw.attn_norm_gain)?;
        let attn_norm_unit = rmsnorm_rows(&state, &ones)?;
        let h2 = attention(&attn_in, lw, cfg)?;
        let o = matmul_nt(&h2, &lw.wo)?;
        let mid = add_rows(&state, &o);
        let mlp_in = rmsnorm_rows(&mid, &lw.mlp_norm_gain)?;
        let mlp_norm_unit = rmsnorm_rows(&mid, &ones)?;
        let up = matmul_nt(&mlp_in, &lw.wup)?;
        let gate = matmul_nt(&mlp_in, &lw.wgate)?;
        let mut mlp_mid = Mat::zeros(state.rows(), cfg.d_ff());
        for t in 0..state.rows() {
            for j in 0..cfg.d_ff() {
                mlp_mid.set(t, j, silu(gate.at(t, j)) * up.at(t, j));
            }
        }
        let down = matmul_nt(&mlp_mid, &lw.wdown)?;
        state = add_rows(&mid, &down);
        out.push(LayerSites {
            attn_in,
            attn_norm_unit,
            attn_mid: h2,
            mlp_in,
            mlp_norm_unit,
            mlp_mid,
        });
    }
    Ok(out)
}

/// Calibrates per-layer, per-site magnitude cutoffs at target sparsity `p`
/// from the pooled |activations| of the calibration sequences.
pub fn calibrate_thresholds(model: &Model, seqs: &[Vec<u32>], p: f64) -> Result<ThresholdTable> {
    if seqs.is_empty() {
        return Err(Error::arg("calibrate_thresholds", "no calibration sequences"));
    }
    let l = model.config.layers;
    let mut pools: Vec<[Vec<Vec<f64>>; 4]> = (0..l).map(|_| Default::default()).collect();
    for seq in seqs {
        let sites = capture_sites(model, seq)?;
        for (layer, s) in sites.iter().enumerate() {
            let mats = [&s.attn_in, &s.attn_mid, &s.mlp_in, &s.mlp_mid];
            for (site_idx, m) in mats.iter().enumerate() {
                for t in 0..m.rows() {
                    pools[layer][site_idx].push(m.row(t).to_vec());
                }
            }
        }
    }
    let mut eps = Vec::with_capacity(l);
    for layer_pools in &pools {
        let mut row = [0.0f64; 4];
        for (site_idx, pool) in layer_pools.iter().enumerate() {
            row[site_idx] = calibrate_magnitude_thresholds(pool, p)?;
        }
        eps.push(row);
    }
    ThresholdTable::new(eps)
}

/// Per-token relative L2 error of candidate logits against dense logits.
#[derive(Debug, Clone)]
pub struct OutputError {
    pub mean: f64,
    pub max: f64,
    pub per_token: Vec<f64>,
}

/// `||y_dense - y_sparse|| / ||y_dense||` per token row, with mean and max
/// over the batch.
pub fn model_output_error(sparse_logits: &Mat, dense_logits: &Mat) -> Result<OutputError> {
    if sparse_logits.rows() != dense_logits.rows() || sparse_logits.cols() != dense_logits.cols() {
        return Err(Error::dim(
            "model_output_error",
            format!("{}x{}", dense_logits.rows(), dense_logits.cols()),
            format!("{}x{}", sparse_logits.rows(), sparse_logits.cols()),
        ));
    }
    let per_token: Vec<f64> = (0..dense_logits.rows())
        .map(|t| relative_l2_error(dense_logits.row(t), sparse_logits.row(t)))
        .collect();
    let mean = per_token.iter().sum::<f64>() / per_token.len() as f64;
    let max = per_token.iter().copied().fold(0.0f64, f64::max);
    Ok(OutputError { mean, max, per_token })
}

/// Mean per-token relative logit error of candidate passes against dense
/// passes over several sequences.
pub fn mean_logit_error(dense_per_seq: &[Mat], candidate_per_seq: &[Mat]) -> Result<f64> {
    assert_eq!(dense_per_seq.len(), candidate_per_seq.len());
    let mut sum = 0.0;
    let mut count = 0usize;
    for (d, c) in dense_per_seq.iter().zip(candidate_per_seq) {
        let err = model_output_error(c, d)?;
        sum += err.per_token.iter().sum::<f64>();
        count += err.per_token.len();
    }
    Ok(sum / count as f64)
}
