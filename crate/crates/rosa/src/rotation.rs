//! Layerwise orthogonal rotations: covariance accumulation over calibration
//! sequences, PCA rotation construction, and absorption of the rotations
//! into model weights with residual adapters.
//!
//! The covariance is the uncentered second moment `(1/M) sum_i X_i^T X_i`
//! (no mean subtraction): the merge algebra requires a pure rotation of the
//! residual stream, and centering would introduce an affine term the
//! forward pass has nowhere to absorb.

use crate::eigen::jacobi_eigh;
use crate::error::{Error, Result};
use crate::mat::{matmul, matmul_tn, Mat};
use crate::model::{LayerWeights, Model};

/// Running sum of per-sequence feature covariances.
#[derive(Debug, Clone)]
pub struct CovarianceAccumulator {
    dim: usize,
    sum: Mat,
    sequences_seen: usize,
}

impl CovarianceAccumulator {
    pub fn new(dim: usize) -> Self {
        CovarianceAccumulator {
            dim,
            sum: Mat::zeros(dim, dim),
            sequences_seen: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sequences_seen(&self) -> usize {
        self.sequences_seen
    }

    pub fn sum(&self) -> &Mat {
        &self.sum
    }

    /// Adds one sequence's `X^T X` (rows of `batch` are tokens). The upper
    /// triangle is computed once and mirrored, so the sum stays exactly
    /// symmetric.
    pub fn accumulate(&mut self, batch: &Mat) -> Result<()> {
        if batch.cols() != self.dim {
            return Err(Error::dim("CovarianceAccumulator::accumulate", self.dim, batch.cols()));
        }
        for t in 0..batch.rows() {
            let row = batch.row(t);
            for a in 0..self.dim {
                let xa = row[a];
                for (b, &xb) in row.iter().enumerate().skip(a) {
                    let v = self.sum.at(a, b) + xa * xb;
                    self.sum.set(a, b, v);
                    if a != b {
                        self.sum.set(b, a, v);
                    }
                }
            }
        }
        self.sequences_seen += 1;
        Ok(())
    }

    /// Folds another accumulator in (sequence counts add). Merging in
    /// sequence-index order reproduces single-threaded accumulation.
    pub fn merge(&mut self, other: &CovarianceAccumulator) -> Result<()> {
        if other.dim != self.dim {
            return Err(Error::dim("CovarianceAccumulator::merge", self.dim, other.dim));
        }
        for a in 0..self.dim {
            for b in 0..self.dim {
                self.sum.set(a, b, self.sum.at(a, b) + other.sum.at(a, b));
            }
        }
        self.sequences_seen += other.sequences_seen;
        Ok(())
    }

    /// Finalized covariance `sum / M`.
    pub fn finalize(&self) -> Result<Mat> {
        if self.sequences_seen == 0 {
            return Err(Error::arg("CovarianceAccumulator::finalize", "no sequences accumulated"));
        }
        let m = self.sequences_seen as f64;
        let mut out = Mat::zeros(self.dim, self.dim);
        for a in 0..self.dim {
            for b in 0..self.dim {
                out.set(a, b, self.sum.at(a, b) / m);
            }
        }
        Ok(out)
    }
}

/// Orthogonal rotation whose columns are covariance eigenvectors in
/// descending eigenvalue order.
#[derive(Debug, Clone, PartialEq)]
pub struct RotationMatrix {
    q: Mat,
}

impl RotationMatrix {
    /// Wraps an orthogonal matrix; `||QQ^T - I||_F <= 1e-8 sqrt(dim)`.
    pub fn new(q: Mat) -> Result<Self> {
        if q.rows() != q.cols() {
            return Err(Error::dim("RotationMatrix::new", "square matrix", format!("{}x{}", q.rows(), q.cols())));
        }
        let qqt = matmul(&q, &q.transpose())?;
        let mut defect = 0.0f64;
        for i in 0..q.rows() {
            for j in 0..q.cols() {
                let target = if i == j { 1.0 } else { 0.0 };
                let d = qqt.at(i, j) - target;
                defect += d * d;
            }
        }
        let defect = defect.sqrt();
        if defect > 1e-8 * (q.rows() as f64).sqrt() {
            return Err(Error::arg(
                "RotationMatrix::new",
                format!("matrix is not orthogonal (||QQ^T - I||_F = {defect:e})"),
            ));
        }
        Ok(RotationMatrix { q })
    }

    pub fn identity(dim: usize) -> Self {
        RotationMatrix { q: Mat::identity(dim) }
    }

    pub fn dim(&self) -> usize {
        self.q.rows()
    }

    pub fn mat(&self) -> &Mat {
        &self.q
    }
}

/// PCA rotation from a covariance matrix: eigenvectors sorted by descending
/// eigenvalue, sign-normalized by the eigensolver's convention.
///
/// Eigenvalues down to `-1e-8 * trace` are tolerated as rank-deficiency
/// noise and clamped to zero; anything lower is rejected. Zero eigenvalues
/// keep their eigenvectors, so the basis stays complete.
pub fn build_rotation(cov: &Mat) -> Result<RotationMatrix> {
    let (values, vectors) = jacobi_eigh(cov)?;
    let trace: f64 = (0..cov.rows()).map(|i| cov.at(i, i)).sum();
    let tol = 1e-8 * trace.abs().max(f64::MIN_POSITIVE);
    if let Some(&min) = values.last() {
        if min < -tol {
            return Err(Error::NotPositiveSemidefinite { min_eigenvalue: min });
        }
    }
    RotationMatrix::new(vectors)
}

/// Residual adapter between consecutive layers: `Q_l^T Q_next`.
pub fn residual_adapter(q_l: &RotationMatrix, q_next: &RotationMatrix) -> Result<Mat> {
    if q_l.dim() != q_next.dim() {
        return Err(Error::dim("residual_adapter", q_l.dim(), q_next.dim()));
    }
    matmul_tn(q_l.mat(), q_next.mat())
}

/// A model with rotations absorbed into its weights.
///
/// The residual stream of layer `l` carries activations pre-rotated by
/// `Q_l`; adapters `Q_l^T Q_{l+1}` re-rotate the stream between layers, the
/// embedding absorbs `Q_0`, and the head absorbs the last rotation.
#[derive(Debug, Clone, PartialEq)]
pub struct RotatedModel {
    /// Merged weights. All norm gains are exactly 1 (folded into weights).
    pub model: Model,
    /// `layers - 1` adapters, each `Q_l^T Q_{l+1}`.
    pub adapters: Vec<Mat>,
    pub embed_rotation_applied: bool,
    pub head_rotation_applied: bool,
}

/// Folds every RMSNorm gain into the weight matrices it feeds and rewrites
/// the gains to 1. Exact algebra: `rmsnorm_g(x) W^T == rmsnorm_1(x) (W diag(g))^T`.
pub fn fold_norm_gains(model: &Model) -> Result<Model> {
    let mut out = model.clone();
    for lw in &mut out.layers {
        let LayerWeights {
            wq,
            wk,
            wv,
            wup,
            wgate,
            attn_norm_gain,
            mlp_norm_gain,
            ..
        } = lw;
        *wq = wq.scale_cols(attn_norm_gain)?;
        *wk = wk.scale_cols(attn_norm_gain)?;
        *wv = wv.scale_cols(attn_norm_gain)?;
        *wup = wup.scale_cols(mlp_norm_gain)?;
        *wgate = wgate.scale_cols(mlp_norm_gain)?;
        *attn_norm_gain = vec![1.0; model.config.d];
        *mlp_norm_gain = vec![1.0; model.config.d];
    }
    out.head = out.head.scale_cols(&out.final_norm_gain)?;
    out.final_norm_gain = vec![1.0; model.config.d];
    Ok(out)
}

/// Absorbs one rotation per layer into the model weights.
///
/// Norm gains are folded first (recorded by the unit gains of the result).
/// Per layer `l`: the Q/K/V and Up/Gate weights take `W Q_l` on their input
/// side; the O and Down weights keep an identity on their input (those
/// sites cannot carry a rotation past grouped-query attention or the
/// element-wise MLP product) and take `Q_l^T` on their output side so the
/// residual stream stays in rotated coordinates. The embedding absorbs
/// `Q_0`, the head absorbs the final rotation, and each layer boundary gets
/// the adapter `Q_l^T Q_{l+1}`.
pub fn merge_rotations(model: &Model, rotations: &[RotationMatrix]) -> Result<RotatedModel> {
    model.validate()?;
    if rotations.len() != model.config.layers {
        return Err(Error::dim("merge_rotations", model.config.layers, rotations.len()));
    }
    for r in rotations {
        if r.dim() != model.config.d {
            return Err(Error::dim("merge_rotations", model.config.d, r.dim()));
        }
    }

    let mut merged = fold_norm_gains(model)?;
    for (lw, rot) in merged.layers.iter_mut().zip(rotations) {
        let q = rot.mat();
        lw.wq = matmul(&lw.wq, q)?;
        lw.wk = matmul(&lw.wk, q)?;
        lw.wv = matmul(&lw.wv, q)?;
        lw.wup = matmul(&lw.wup, q)?;
        lw.wgate = matmul(&lw.wgate, q)?;
        lw.wo = matmul_tn(q, &lw.wo)?;
        lw.wdown = matmul_tn(q, &lw.wdown)?;
    }
    merged.embed = matmul(&merged.embed, rotations[0].mat())?;
    merged.head = matmul(&merged.head, rotations[model.config.layers - 1].mat())?;

    let mut adapters = Vec::with_capacity(model.config.layers - 1);
    for l in 0..model.config.layers - 1 {
        adapters.push(residual_adapter(&rotations[l], &rotations[l + 1])?);
    }

    Ok(RotatedModel {
        model: merged,
        adapters,
        embed_rotation_applied: true,
        head_rotation_applied: true,
    })
}
