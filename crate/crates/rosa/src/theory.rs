//! Closed-form distributional relative error of Top-K sparsification under
//! i.i.d. Gaussian activations and weights, the Monte-Carlo oracle that
//! validates it, and empirical error probes comparing the rotated Top-K
//! pipeline against count-matched magnitude pruning.

use crate::error::{Error, Result};
use crate::forward::{capture_sites, layer_forward_traced, Mode};
use crate::gauss::{std_normal_inv_cdf, std_normal_pdf};
use crate::mat::{matmul, matmul_nt, Mat};
use crate::model::Model;
use crate::rng::{seeded_fast_rng, STREAM_MONTE_CARLO};
use crate::rotation::{RotatedModel, RotationMatrix};
use crate::sparsify::{top_k_sparsify, Site, SparsityPlan, SITES};
use rand::distr::Distribution;
use rand_distr::StandardNormal;

/// Distributional relative error `E||y - y_S|| / E||y||` of keeping the
/// top `k` of `d_in` i.i.d. Gaussian entries:
/// `sqrt(1 - k/D - 2 t phi(t))` with `t = invcdf(1 - k/(2D))`.
///
/// Endpoints are exact: 0 at `k = d_in` and 1 at `k = 0` (`t phi(t) -> 0`
/// in the limit).
pub fn theoretical_relative_error(k: usize, d_in: usize) -> f64 {
    assert!(d_in >= 1, "d_in must be positive");
    assert!(k <= d_in, "k must not exceed d_in");
    if k == 0 {
        return 1.0;
    }
    if k == d_in {
        return 0.0;
    }
    let keep = k as f64 / d_in as f64;
    let t = std_normal_inv_cdf(1.0 - keep / 2.0).expect("argument in (0.5, 1)");
    let inner = 1.0 - keep - 2.0 * t * std_normal_pdf(t);
    inner.max(0.0).sqrt()
}

/// A point on the theoretical error curve.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct TheoryPoint {
    pub keep_fraction: f64,
    pub t_k: f64,
    pub predicted_error: f64,
}

/// Samples the theoretical curve at `points + 1` keep fractions in [0, 1].
pub fn theory_curve(d_in: usize, points: usize) -> Vec<TheoryPoint> {
    (0..=points)
        .map(|i| {
            let keep_fraction = i as f64 / points as f64;
            let k = ((keep_fraction * d_in as f64).round() as usize).min(d_in);
            let t_k = if k == 0 {
                f64::INFINITY
            } else {
                std_normal_inv_cdf(1.0 - k as f64 / (2.0 * d_in as f64)).unwrap_or(0.0)
            };
            TheoryPoint {
                keep_fraction,
                t_k,
                predicted_error: theoretical_relative_error(k, d_in),
            }
        })
        .collect()
}

/// Monte-Carlo estimation setup. Both the activation and the weight matrix
/// are redrawn for every sample.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct MonteCarloSpec {
    pub d_in: usize,
    pub d_out: usize,
    pub k: usize,
    pub sigma_x: f64,
    pub sigma_w: f64,
    pub samples: usize,
    pub seed: u64,
}

impl MonteCarloSpec {
    pub fn new(
        d_in: usize,
        d_out: usize,
        k: usize,
        sigma_x: f64,
        sigma_w: f64,
        samples: usize,
        seed: u64,
    ) -> Result<Self> {
        if d_in == 0 || d_out == 0 {
            return Err(Error::arg("MonteCarloSpec", "dimensions must be positive"));
        }
        if k > d_in {
            return Err(Error::arg("MonteCarloSpec", format!("k = {k} exceeds d_in = {d_in}")));
        }
        if !sigma_x.is_finite() || sigma_x <= 0.0 || !sigma_w.is_finite() || sigma_w <= 0.0 {
            return Err(Error::arg("MonteCarloSpec", "sigmas must be positive"));
        }
        if samples < 1000 {
            return Err(Error::arg("MonteCarloSpec", format!("need >= 1000 samples, got {samples}")));
        }
        Ok(MonteCarloSpec {
            d_in,
            d_out,
            k,
            sigma_x,
            sigma_w,
            samples,
            seed,
        })
    }
}

/// Monte-Carlo estimate of the Top-K distributional relative error.
///
/// Each sample draws a fresh Gaussian activation and a fresh Gaussian
/// weight matrix (row-major draw order), applies the real Top-K selection,
/// and accumulates `||y - y_S||` and `||y||`; the estimate is the ratio of
/// the two means. Deterministic under the spec seed.
pub fn monte_carlo_relative_error(spec: &MonteCarloSpec) -> f64 {
    monte_carlo_relative_errors(
        spec.d_in,
        spec.d_out,
        &[spec.k],
        spec.sigma_x,
        spec.sigma_w,
        spec.samples,
        spec.seed,
    )[0]
}

/// Batched Monte-Carlo: evaluates several `k` values against shared draws.
/// Each entry is the same estimator as [`monte_carlo_relative_error`] for
/// that `k`; sharing the draws only correlates estimates across `k`.
pub fn monte_carlo_relative_errors(
    d_in: usize,
    d_out: usize,
    ks: &[usize],
    sigma_x: f64,
    sigma_w: f64,
    samples: usize,
    seed: u64,
) -> Vec<f64> {
    assert!(!ks.is_empty());
    for &k in ks {
        assert!(k <= d_in);
    }
    let mut rng = seeded_fast_rng(seed, STREAM_MONTE_CARLO);

    // unique thresholds ascending; bucket of an entry = how many of the
    // kept-prefix thresholds its magnitude rank has passed
    let mut uk: Vec<usize> = ks.to_vec();
    uk.sort_unstable();
    uk.dedup();
    let nb = uk.len();

    let mut x = vec![0.0f64; d_in];
    let mut order: Vec<usize> = (0..d_in).collect();
    let mut bucket = vec![0u8; d_in];
    let mut sums = vec![0.0f64; nb + 1];
    let mut yhat2 = vec![0.0f64; nb];
    let mut norm_y_total = 0.0f64;
    let mut norm_yhat_total = vec![0.0f64; nb];

    for _ in 0..samples {
        for xj in x.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *xj = sigma_x * z;
        }
        // rank entries by (|x| desc, index asc) — the sparsifier's total
        // order — so the kept sets for all ks are nested prefixes
        for (i, o) in order.iter_mut().enumerate() {
            *o = i;
        }
        order.sort_unstable_by(|&a, &b| x[b].abs().total_cmp(&x[a].abs()).then(a.cmp(&b)));
        for (pos, &j) in order.iter().enumerate() {
            bucket[j] = uk.partition_point(|&k| k <= pos) as u8;
        }

        let mut y2 = 0.0f64;
        yhat2.iter_mut().for_each(|v| *v = 0.0);
        for _ in 0..d_out {
            sums.iter_mut().for_each(|v| *v = 0.0);
            for j in 0..d_in {
                let z: f64 = StandardNormal.sample(&mut rng);
                let w = sigma_w * z;
                sums[bucket[j] as usize] += w * x[j];
            }
            let yi: f64 = sums.iter().sum();
            y2 += yi * yi;
            // residual for threshold t sums the buckets beyond it
            let mut suffix = 0.0;
            for t in (0..nb).rev() {
                suffix += sums[t + 1];
                yhat2[t] += suffix * suffix;
            }
        }
        norm_y_total += y2.sqrt();
        for t in 0..nb {
            norm_yhat_total[t] += yhat2[t].sqrt();
        }
    }

    ks.iter()
        .map(|k| {
            let t = uk.binary_search(k).expect("k present");
            norm_yhat_total[t] / norm_y_total
        })
        .collect()
}

/// One row of the empirical comparison table.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct ErrorTableRow {
    pub sparsity: f64,
    pub theory: f64,
    pub rotated_topk: f64,
    pub magnitude: f64,
}

/// CSV with header `sparsity,theory,rotated_topk,magnitude`.
pub fn error_table_csv(rows: &[ErrorTableRow]) -> String {
    let mut out = String::from("sparsity,theory,rotated_topk,magnitude\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6}\n",
            r.sparsity, r.theory, r.rotated_topk, r.magnitude
        ));
    }
    out
}

/// Empirical error comparison at the down-projection output of one probe
/// layer, with all four sites of that layer sparsified.
///
/// Both routes drop the same per-token count at every site (k derived from
/// the row's sparsity), so their actual sparsity matches by construction:
/// the rotated route runs Top-K in the merged model's rotated coordinates,
/// the magnitude route prunes the smallest-|x| entries of the unrotated
/// activations. The theory column is the single-site Gaussian prediction at
/// the down input; the empirical numbers include all four sites, which is
/// why they sit above it.
pub fn empirical_error_table(
    model: &Model,
    rotated: &RotatedModel,
    calib: &[Vec<u32>],
    sparsity_levels: &[f64],
    probe_layer: usize,
) -> Result<Vec<ErrorTableRow>> {
    if probe_layer >= model.config.layers {
        return Err(Error::arg(
            "empirical_error_table",
            format!("probe layer {probe_layer} out of range"),
        ));
    }
    if calib.is_empty() {
        return Err(Error::arg("empirical_error_table", "no probe sequences"));
    }
    let cfg = &model.config;
    let mut orig_inputs = Vec::new();
    let mut rot_inputs = Vec::new();
    for seq in calib {
        orig_inputs.push(crate::forward::layer_inputs_dense(model, seq)?.swap_remove(probe_layer));
        rot_inputs.push(rotated.layer_inputs_dense(seq)?.swap_remove(probe_layer));
    }
    let lw_orig = &model.layers[probe_layer];
    let lw_rot = &rotated.model.layers[probe_layer];

    let mut rows = Vec::with_capacity(sparsity_levels.len());
    for &s in sparsity_levels {
        if !(0.0..=1.0).contains(&s) {
            return Err(Error::arg("empirical_error_table", format!("sparsity {s} outside [0, 1]")));
        }
        let plan = SparsityPlan::uniform(s, cfg.m_ratio, cfg.d, cfg.d_ff())?;
        let mode = Mode::TopK(&plan);

        let mut rot_num = 0.0;
        let mut rot_den = 0.0;
        let mut mag_num = 0.0;
        let mut mag_den = 0.0;
        for (xo, xr) in orig_inputs.iter().zip(&rot_inputs) {
            let ref_rot = layer_forward_traced(xr, lw_rot, cfg, probe_layer, &Mode::Dense)?.down_projection;
            let got_rot = layer_forward_traced(xr, lw_rot, cfg, probe_layer, &mode)?.down_projection;
            let ref_mag = layer_forward_traced(xo, lw_orig, cfg, probe_layer, &Mode::Dense)?.down_projection;
            let got_mag = layer_forward_traced(xo, lw_orig, cfg, probe_layer, &mode)?.down_projection;
            accumulate_frobenius(&ref_rot, &got_rot, &mut rot_num, &mut rot_den);
            accumulate_frobenius(&ref_mag, &got_mag, &mut mag_num, &mut mag_den);
        }
        rows.push(ErrorTableRow {
            sparsity: s,
            theory: theoretical_relative_error(plan.k_for(Site::MlpMid), cfg.d_ff()),
            rotated_topk: ratio(rot_num, rot_den),
            magnitude: ratio(mag_num, mag_den),
        });
    }
    Ok(rows)
}

fn accumulate_frobenius(reference: &Mat, candidate: &Mat, num: &mut f64, den: &mut f64) {
    for t in 0..reference.rows() {
        for j in 0..reference.cols() {
            let d = reference.at(t, j) - candidate.at(t, j);
            *num += d * d;
            let r = reference.at(t, j);
            *den += r * r;
        }
    }
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        if num == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (num / den).sqrt()
    }
}

/// Per-(layer, site) error of single-site sparsification at matched
/// per-token drop counts: rotated Top-K against magnitude pruning of the
/// unrotated activation, measured at the site's projection-stack output.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct SiteErrorProbe {
    pub layer: usize,
    pub site_index: usize,
    pub rotated: f64,
    pub magnitude: f64,
}

pub fn per_site_error_probes(
    model: &Model,
    rotated: &RotatedModel,
    rotations: &[RotationMatrix],
    seqs: &[Vec<u32>],
    sparsity: f64,
) -> Result<Vec<SiteErrorProbe>> {
    if rotations.len() != model.config.layers {
        return Err(Error::dim("per_site_error_probes", model.config.layers, rotations.len()));
    }
    let cfg = &model.config;
    let mut captures = Vec::new();
    for seq in seqs {
        captures.push(capture_sites(model, seq)?);
    }

    let mut probes = Vec::new();
    for layer in 0..cfg.layers {
        let lw = &model.layers[layer];
        let lw_rot = &rotated.model.layers[layer];
        let q = rotations[layer].mat();
        for site in SITES {
            let d_site = match site {
                Site::MlpMid => cfg.d_ff(),
                _ => cfg.d,
            };
            let k = ((1.0 - sparsity) * d_site as f64).round() as usize;
            let (mut rot_num, mut rot_den) = (0.0, 0.0);
            let (mut mag_num, mut mag_den) = (0.0, 0.0);
            for cap in &captures {
                let sites = &cap[layer];
                // (unrotated activation, rotated activation, weight stacks)
                let (h, h_rot, ws, ws_rot): (&Mat, Mat, Vec<&Mat>, Vec<&Mat>) = match site {
                    Site::AttnIn => (
                        &sites.attn_in,
                        matmul(&sites.attn_norm_unit, q)?,
                        vec![&lw.wq, &lw.wk, &lw.wv],
                        vec![&lw_rot.wq, &lw_rot.wk, &lw_rot.wv],
                    ),
                    Site::AttnMid => (
                        &sites.attn_mid,
                        sites.attn_mid.clone(),
                        vec![&lw.wo],
                        vec![&lw_rot.wo],
                    ),
                    Site::MlpIn => (
                        &sites.mlp_in,
                        matmul(&sites.mlp_norm_unit, q)?,
                        vec![&lw.wup, &lw.wgate],
                        vec![&lw_rot.wup, &lw_rot.wgate],
                    ),
                    Site::MlpMid => (
                        &sites.mlp_mid,
                        sites.mlp_mid.clone(),
                        vec![&lw.wdown],
                        vec![&lw_rot.wdown],
                    ),
                };
                let h_sparse = sparsify_rows_top_k(h, k)?;
                let h_rot_sparse = sparsify_rows_top_k(&h_rot, k)?;
                for (w, w_rot) in ws.iter().zip(&ws_rot) {
                    let r = matmul_nt(h, w)?;
                    let g = matmul_nt(&h_sparse, w)?;
                    accumulate_frobenius(&r, &g, &mut mag_num, &mut mag_den);
                    let rr = matmul_nt(&h_rot, w_rot)?;
                    let gr = matmul_nt(&h_rot_sparse, w_rot)?;
                    accumulate_frobenius(&rr, &gr, &mut rot_num, &mut rot_den);
                }
            }
            probes.push(SiteErrorProbe {
                layer,
                site_index: site.index(),
                rotated: ratio(rot_num, rot_den),
                magnitude: ratio(mag_num, mag_den),
            });
        }
    }
    Ok(probes)
}

fn sparsify_rows_top_k(batch: &Mat, k: usize) -> Result<Mat> {
    let mut out = Mat::zeros(batch.rows(), batch.cols());
    for t in 0..batch.rows() {
        let sv = top_k_sparsify(batch.row(t), k)?;
        for (&i, &v) in sv.indices().iter().zip(sv.values()) {
            out.set(t, i, v);
        }
    }
    Ok(out)
}
