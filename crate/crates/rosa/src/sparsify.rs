//! Sparsification functions and the sparsity coefficient system.
//!
//! Top-K keeps the k largest-magnitude entries and yields exact,
//! input-independent sparsity; magnitude thresholding (the calibrated
//! baseline) zeroes entries at or below a fixed cutoff and fluctuates with
//! the input. Per-site K budgets derive from a global sparsity target
//! through two linear constraints tying the four per-layer activation sites
//! together.

use crate::error::{Error, Result};

/// Tolerance for the two coefficient constraint equations.
pub const ALPHA_CONSTRAINT_TOL: f64 = 1e-9;

/// Sparse view of one token's activation: strictly increasing indices with
/// their (nonzero) values. Exact zeros are never stored.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseVec {
    dim: usize,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseVec {
    pub fn new(dim: usize, indices: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if indices.len() != values.len() {
            return Err(Error::dim("SparseVec::new", indices.len(), values.len()));
        }
        if indices.len() > dim {
            return Err(Error::dim("SparseVec::new", format!("<= {dim} entries"), indices.len()));
        }
        for w in indices.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::arg("SparseVec::new", "indices must be strictly increasing"));
            }
        }
        if let Some(&last) = indices.last() {
            if last >= dim {
                return Err(Error::arg("SparseVec::new", format!("index {last} out of range for dim {dim}")));
            }
        }
        if values.contains(&0.0) {
            return Err(Error::arg("SparseVec::new", "stored values must be nonzero"));
        }
        Ok(SparseVec { dim, indices, values })
    }

    /// Sparse view of a dense vector: drops exact zeros.
    pub fn from_dense(x: &[f64]) -> Self {
        let mut indices = Vec::new();
        let mut values = Vec::new();
        for (i, &v) in x.iter().enumerate() {
            if v != 0.0 {
                indices.push(i);
                values.push(v);
            }
        }
        SparseVec {
            dim: x.len(),
            indices,
            values,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn densify(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (&i, &v) in self.indices.iter().zip(&self.values) {
            out[i] = v;
        }
        out
    }

    /// Proportion of zero-valued elements.
    pub fn sparsity(&self) -> f64 {
        assert!(self.dim >= 1);
        (self.dim - self.nnz()) as f64 / self.dim as f64
    }
}

/// Proportion of zero-valued elements of a dense vector.
pub fn actual_sparsity(x: &[f64]) -> f64 {
    assert!(!x.is_empty());
    let zeros = x.iter().filter(|&&v| v == 0.0).count();
    zeros as f64 / x.len() as f64
}

/// Indices of the k largest-|x| entries, ascending. Ties at the cutoff
/// magnitude are broken toward the lower index. Shared by the sparsifier
/// and the fused kernel so both select identical sets.
pub(crate) fn top_k_indices(x: &[f64], k: usize) -> Vec<usize> {
    debug_assert!(k <= x.len());
    if k == 0 {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..x.len()).collect();
    if k < x.len() {
        order.select_nth_unstable_by(k - 1, |&a, &b| {
            x[b].abs().total_cmp(&x[a].abs()).then(a.cmp(&b))
        });
        order.truncate(k);
    }
    order.sort_unstable();
    order
}

/// Top-K sparsification: keep the k largest entries by absolute value,
/// zero the rest. A selected exact-zero input occupies a budget slot but
/// is not stored.
pub fn top_k_sparsify(x: &[f64], k: usize) -> Result<SparseVec> {
    if k > x.len() {
        return Err(Error::arg(
            "top_k_sparsify",
            format!("k = {k} exceeds dim = {}", x.len()),
        ));
    }
    let kept = top_k_indices(x, k);
    let mut indices = Vec::with_capacity(k);
    let mut values = Vec::with_capacity(k);
    for i in kept {
        if x[i] != 0.0 {
            indices.push(i);
            values.push(x[i]);
        }
    }
    Ok(SparseVec {
        dim: x.len(),
        indices,
        values,
    })
}

/// Entries to keep for one site: `k = round(alpha * (1 - p) * d_in)`,
/// half away from zero, clamped to `[0, d_in]`.
pub fn compute_k(alpha: f64, p: f64, d_in: usize) -> Result<usize> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::arg("compute_k", format!("p must lie in [0, 1], got {p}")));
    }
    if !alpha.is_finite() || alpha <= 0.0 {
        return Err(Error::arg("compute_k", format!("alpha must be positive, got {alpha}")));
    }
    let raw = alpha * (1.0 - p) * d_in as f64;
    let k = raw.round();
    Ok((k.max(0.0) as usize).min(d_in))
}

/// Solves the two allocation constraints for the dependent coefficients:
/// `alpha2 = 4 - 3*alpha1` and `alpha4 = (2 + m - 2*alpha3) / m`.
pub fn solve_alpha_constraints(alpha1: f64, alpha3: f64, m: f64) -> Result<(f64, f64)> {
    if !m.is_finite() || m <= 0.0 {
        return Err(Error::arg("solve_alpha_constraints", format!("m must be positive, got {m}")));
    }
    if !alpha1.is_finite() || alpha1 <= 0.0 || !alpha3.is_finite() || alpha3 <= 0.0 {
        return Err(Error::arg(
            "solve_alpha_constraints",
            format!("alpha1 and alpha3 must be positive, got ({alpha1}, {alpha3})"),
        ));
    }
    let alpha2 = 4.0 - 3.0 * alpha1;
    let alpha4 = (2.0 + m - 2.0 * alpha3) / m;
    if alpha2 <= 0.0 || alpha4 <= 0.0 {
        return Err(Error::InfeasibleCoefficients { alpha2, alpha4 });
    }
    Ok((alpha2, alpha4))
}

/// The four per-layer sparsification sites.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Site {
    /// Q/K/V projection input (3 reads of the hidden dim).
    AttnIn = 0,
    /// O projection input.
    AttnMid = 1,
    /// Up/Gate projection input (2 reads of the hidden dim).
    MlpIn = 2,
    /// Down projection input (one read of the intermediate dim).
    MlpMid = 3,
}

pub const SITES: [Site; 4] = [Site::AttnIn, Site::AttnMid, Site::MlpIn, Site::MlpMid];

impl Site {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn label(self) -> &'static str {
        match self {
            Site::AttnIn => "h1",
            Site::AttnMid => "h2",
            Site::MlpIn => "h3",
            Site::MlpMid => "h4",
        }
    }
}

/// Target sparsity `p` with coefficients redistributing the budget across
/// the four sites, plus the derived per-site K values for concrete dims.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsityPlan {
    pub p: f64,
    pub alpha: [f64; 4],
    pub m_ratio: f64,
    pub d_hidden: usize,
    pub d_intermediate: usize,
    k: [usize; 4],
}

impl SparsityPlan {
    /// Plan from the free coefficients; the dependent pair comes from the
    /// constraint system.
    pub fn new(
        p: f64,
        alpha1: f64,
        alpha3: f64,
        m_ratio: f64,
        d_hidden: usize,
        d_intermediate: usize,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::arg("SparsityPlan::new", format!("p must lie in [0, 1], got {p}")));
        }
        let (alpha2, alpha4) = solve_alpha_constraints(alpha1, alpha3, m_ratio)?;
        let alpha = [alpha1, alpha2, alpha3, alpha4];
        Self::validate_constraints(&alpha, m_ratio)?;
        let k = [
            compute_k(alpha1, p, d_hidden)?,
            compute_k(alpha2, p, d_hidden)?,
            compute_k(alpha3, p, d_hidden)?,
            compute_k(alpha4, p, d_intermediate)?,
        ];
        Ok(SparsityPlan {
            p,
            alpha,
            m_ratio,
            d_hidden,
            d_intermediate,
            k,
        })
    }

    /// Uniform allocation: all coefficients 1, satisfying both constraints
    /// for any intermediate ratio.
    pub fn uniform(p: f64, m_ratio: f64, d_hidden: usize, d_intermediate: usize) -> Result<Self> {
        Self::new(p, 1.0, 1.0, m_ratio, d_hidden, d_intermediate)
    }

    fn validate_constraints(alpha: &[f64; 4], m: f64) -> Result<()> {
        let attn = 3.0 * alpha[0] + alpha[1];
        let mlp = 2.0 * alpha[2] + m * alpha[3];
        if (attn - 4.0).abs() > ALPHA_CONSTRAINT_TOL || (mlp - (2.0 + m)).abs() > ALPHA_CONSTRAINT_TOL {
            return Err(Error::arg(
                "SparsityPlan",
                format!("constraint residuals ({:e}, {:e}) exceed tolerance", attn - 4.0, mlp - (2.0 + m)),
            ));
        }
        if alpha.iter().any(|&a| a <= 0.0) {
            return Err(Error::InfeasibleCoefficients {
                alpha2: alpha[1],
                alpha4: alpha[3],
            });
        }
        Ok(())
    }

    pub fn k_for(&self, site: Site) -> usize {
        self.k[site.index()]
    }

    pub fn site_dim(&self, site: Site) -> usize {
        match site {
            Site::MlpMid => self.d_intermediate,
            _ => self.d_hidden,
        }
    }

    /// Exact per-token sparsity Top-K produces at a site.
    pub fn site_sparsity(&self, site: Site) -> f64 {
        let d = self.site_dim(site);
        (d - self.k_for(site)) as f64 / d as f64
    }

    /// Model-level sparsity: site sparsities weighted by how many weight
    /// matrices read each site and by the site's width relative to the
    /// hidden size (3 for h1, 1 for h2, 2 for h3, M for h4).
    pub fn model_sparsity(&self) -> f64 {
        let s: Vec<f64> = SITES.iter().map(|&st| self.site_sparsity(st)).collect();
        (3.0 * s[0] + s[1] + 2.0 * s[2] + self.m_ratio * s[3]) / (6.0 + self.m_ratio)
    }
}

/// Per-layer, per-site magnitude cutoffs for the calibrated baselines.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdTable {
    eps: Vec<[f64; 4]>,
}

impl ThresholdTable {
    pub fn new(eps: Vec<[f64; 4]>) -> Result<Self> {
        for row in &eps {
            if row.iter().any(|&e| !e.is_finite() || e < 0.0) {
                return Err(Error::arg("ThresholdTable::new", "cutoffs must be >= 0"));
            }
        }
        Ok(ThresholdTable { eps })
    }

    pub fn layers(&self) -> usize {
        self.eps.len()
    }

    pub fn eps(&self, layer: usize, site: Site) -> f64 {
        self.eps[layer][site.index()]
    }
}

/// Empirical p-quantile (lower interpolation) of |x| pooled over all sample
/// vectors. This is the offline cutoff of the calibrated baselines; p = 0
/// yields 0 so nothing but exact zeros is pruned.
pub fn calibrate_magnitude_thresholds(samples: &[Vec<f64>], p: f64) -> Result<f64> {
    if samples.is_empty() || samples.iter().all(|s| s.is_empty()) {
        return Err(Error::arg("calibrate_magnitude_thresholds", "empty calibration pool"));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::arg(
            "calibrate_magnitude_thresholds",
            format!("p must lie in [0, 1], got {p}"),
        ));
    }
    if p == 0.0 {
        return Ok(0.0);
    }
    let mut pool: Vec<f64> = samples.iter().flatten().map(|v| v.abs()).collect();
    pool.sort_unstable_by(f64::total_cmp);
    let idx = (p * (pool.len() - 1) as f64).floor() as usize;
    Ok(pool[idx.min(pool.len() - 1)])
}

/// Magnitude-threshold sparsification: zero entries with `|x_i| <= eps`
/// (inclusive cutoff).
pub fn magnitude_sparsify(x: &[f64], eps: f64) -> Result<SparseVec> {
    if !eps.is_finite() || eps < 0.0 {
        return Err(Error::arg("magnitude_sparsify", format!("eps must be >= 0, got {eps}")));
    }
    let mut indices = Vec::new();
    let mut values = Vec::new();
    for (i, &v) in x.iter().enumerate() {
        if v.abs() > eps {
            indices.push(i);
            values.push(v);
        }
    }
    Ok(SparseVec {
        dim: x.len(),
        indices,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::SplitMix;
    use proptest::prelude::*;

    #[test]
    fn top_k_by_magnitude() {
        let sv = top_k_sparsify(&[3.0, -1.0, 0.5, 2.0], 2).unwrap();
        assert_eq!(sv.indices(), &[0, 3]);
        assert_eq!(sv.values(), &[3.0, 2.0]);
    }

    #[test]
    fn top_k_full_keep_round_trips() {
        let x = [0.5, 0.0, -2.0, 1.0];
        let sv = top_k_sparsify(&x, 4).unwrap();
        assert_eq!(sv.densify(), x.to_vec());
        // the exact zero consumed budget but is not stored
        assert_eq!(sv.nnz(), 3);
    }

    #[test]
    fn top_k_tie_breaks_to_lower_index() {
        let sv = top_k_sparsify(&[-2.0, 2.0, 1.0], 1).unwrap();
        assert_eq!(sv.indices(), &[0]);
        assert_eq!(sv.values(), &[-2.0]);
    }

    #[test]
    fn top_k_rejects_k_above_dim() {
        assert!(top_k_sparsify(&[1.0, 2.0], 3).is_err());
    }

    #[test]
    fn top_k_zero_selected_into_budget_is_dropped_from_storage() {
        // one nonzero, k = 3: two zeros consume budget but are not stored
        let sv = top_k_sparsify(&[0.0, 5.0, 0.0], 3).unwrap();
        assert_eq!(sv.indices(), &[1]);
        assert_eq!(sv.nnz(), 1);
    }

    #[test]
    fn compute_k_cases() {
        assert_eq!(compute_k(1.0, 0.5, 4096).unwrap(), 2048);
        // 0.8 * 0.5 * 4096 = 1638.4 rounds down
        assert_eq!(compute_k(0.8, 0.5, 4096).unwrap(), 1638);
        // 1.6 * 0.25 * 1024 = 409.6 rounds up
        assert_eq!(compute_k(1.6, 0.75, 1024).unwrap(), 410);
        // half away from zero
        assert_eq!(compute_k(1.0, 0.5, 4095).unwrap(), 2048);
        // clamp at d_in
        assert_eq!(compute_k(3.0, 0.0, 64).unwrap(), 64);
        assert!(compute_k(1.0, 1.5, 64).is_err());
        assert!(compute_k(0.0, 0.5, 64).is_err());
    }

    #[test]
    fn alpha_constraints_reference_rows() {
        // hidden-to-intermediate ratio 2.6875 row of the coefficient table
        let (a2, a4) = solve_alpha_constraints(0.90, 0.80, 2.6875).unwrap();
        assert!((a2 - 1.30).abs() < 1e-12);
        assert!((a4 - 1.1488372093023255).abs() < 1e-12);
        assert!((a4 - 1.15).abs() < 0.01);

        // ratio 3.5 row
        let (a2, a4) = solve_alpha_constraints(0.80, 0.80, 3.5).unwrap();
        assert!((a2 - 1.60).abs() < 1e-12);
        assert!((a4 - 1.1142857142857143).abs() < 1e-12);
        assert!((a4 - 1.12).abs() < 0.01);
    }

    #[test]
    fn alpha_constraints_uniform_fixed_point() {
        let (a2, a4) = solve_alpha_constraints(1.0, 1.0, 7.3).unwrap();
        assert_eq!(a2, 1.0);
        assert!((a4 - 1.0).abs() < 1e-15);
    }

    #[test]
    fn alpha_constraints_infeasible() {
        assert!(matches!(
            solve_alpha_constraints(1.4, 1.0, 2.0),
            Err(Error::InfeasibleCoefficients { .. })
        ));
        // alpha4 <= 0 requires alpha3 > (2 + m) / 2
        assert!(matches!(
            solve_alpha_constraints(1.0, 1.6, 1.0),
            Err(Error::InfeasibleCoefficients { .. })
        ));
    }

    #[test]
    fn plan_satisfies_both_constraints() {
        let plan = SparsityPlan::new(0.5, 0.9, 0.8, 2.6875, 64, 172).unwrap();
        let attn = 3.0 * plan.alpha[0] + plan.alpha[1];
        let mlp = 2.0 * plan.alpha[2] + plan.m_ratio * plan.alpha[3];
        assert!((attn - 4.0).abs() < 1e-9);
        assert!((mlp - (2.0 + plan.m_ratio)).abs() < 1e-9);
        // model-level sparsity equals the target when k values are exact
        // multiples; allow the integer-rounding wobble of small dims
        assert!((plan.model_sparsity() - 0.5).abs() < 0.01);
    }

    #[test]
    fn plan_uniform_site_sparsities_match_target() {
        let plan = SparsityPlan::uniform(0.5, 2.6875, 64, 172).unwrap();
        for site in SITES {
            assert_eq!(plan.site_sparsity(site), 0.5);
        }
        assert_eq!(plan.model_sparsity(), 0.5);
    }

    #[test]
    fn quantile_boundaries() {
        let samples = vec![vec![0.5, -1.5, 2.5, -3.5]];
        assert_eq!(calibrate_magnitude_thresholds(&samples, 0.0).unwrap(), 0.0);
        assert_eq!(calibrate_magnitude_thresholds(&samples, 1.0).unwrap(), 3.5);
        assert!(calibrate_magnitude_thresholds(&[], 0.5).is_err());
    }

    #[test]
    fn quantile_uniform_pool() {
        // uniform on [-1, 1]: median |x| is 0.5
        let mut rng = SplitMix::new(11);
        let pool: Vec<f64> = (0..200_000).map(|_| 2.0 * rng.next_f64() - 1.0).collect();
        let eps = calibrate_magnitude_thresholds(&[pool], 0.5).unwrap();
        assert!((eps - 0.5).abs() < 0.02, "eps = {eps}");
    }

    #[test]
    fn magnitude_inclusive_cutoff() {
        let sv = magnitude_sparsify(&[0.1, -0.5, 2.0], 0.5).unwrap();
        assert_eq!(sv.indices(), &[2]);
        assert_eq!(sv.values(), &[2.0]);
    }

    #[test]
    fn magnitude_zero_eps_drops_only_exact_zeros() {
        let sv = magnitude_sparsify(&[0.0, 1e-300, -1e-300, 2.0], 0.0).unwrap();
        assert_eq!(sv.indices(), &[1, 2, 3]);
    }

    #[test]
    fn sparsity_measurements() {
        assert_eq!(actual_sparsity(&[0.0, 0.0]), 1.0);
        assert_eq!(actual_sparsity(&[1.0, -2.0]), 0.0);
        assert_eq!(actual_sparsity(&[0.0, 1.0, 0.0, 2.0]), 0.5);
    }

    #[test]
    fn sparse_vec_validation() {
        assert!(SparseVec::new(4, vec![0, 2], vec![1.0, 2.0]).is_ok());
        assert!(SparseVec::new(4, vec![2, 0], vec![1.0, 2.0]).is_err());
        assert!(SparseVec::new(4, vec![0, 4], vec![1.0, 2.0]).is_err());
        assert!(SparseVec::new(4, vec![0, 1], vec![1.0]).is_err());
        assert!(SparseVec::new(4, vec![0, 1], vec![1.0, 0.0]).is_err());
    }

    proptest! {
        /// Exact-sparsity guarantee on inputs without exact zeros.
        #[test]
        fn top_k_exact_sparsity(seed in any::<u64>(), dim in 1usize..200, frac in 0.0f64..=1.0) {
            let mut rng = SplitMix::new(seed);
            let x: Vec<f64> = (0..dim).map(|_| rng.next_gauss() + 1e-12).collect();
            let k = (frac * dim as f64) as usize;
            let sv = top_k_sparsify(&x, k).unwrap();
            prop_assert_eq!(sv.nnz(), k);
            prop_assert_eq!(sv.sparsity(), (dim - k) as f64 / dim as f64);
        }

        /// Densified Top-K differs from x exactly on the dim-k
        /// smallest-magnitude positions.
        #[test]
        fn top_k_drops_smallest(seed in any::<u64>(), dim in 1usize..100) {
            let mut rng = SplitMix::new(seed);
            let x: Vec<f64> = (0..dim).map(|_| rng.next_gauss()).collect();
            let k = dim / 2;
            let dense = top_k_sparsify(&x, k).unwrap().densify();
            // oracle: sort indices by (|x|, index) and mark the k kept
            let mut order: Vec<usize> = (0..dim).collect();
            order.sort_by(|&a, &b| x[b].abs().total_cmp(&x[a].abs()).then(a.cmp(&b)));
            for (rank, &i) in order.iter().enumerate() {
                if rank < k {
                    prop_assert_eq!(dense[i], x[i]);
                } else {
                    prop_assert_eq!(dense[i], 0.0);
                }
            }
        }

        /// Magnitude pruning keeps exactly the entries |x| > eps.
        #[test]
        fn magnitude_matches_loop_oracle(seed in any::<u64>(), dim in 1usize..100, eps in 0.0f64..2.0) {
            let mut rng = SplitMix::new(seed);
            let x: Vec<f64> = (0..dim).map(|_| rng.next_gauss()).collect();
            let sv = magnitude_sparsify(&x, eps).unwrap();
            let expected = x.iter().filter(|v| v.abs() > eps).count();
            prop_assert_eq!(sv.nnz(), expected);
        }

        /// Constraint solutions always satisfy the plan invariants.
        #[test]
        fn solved_alphas_satisfy_invariants(
            a1 in 0.05f64..1.33,
            a3 in 0.05f64..1.4,
            m in 0.5f64..8.0,
        ) {
            if let Ok((a2, a4)) = solve_alpha_constraints(a1, a3, m) {
                prop_assert!((3.0 * a1 + a2 - 4.0).abs() <= 1e-9);
                prop_assert!((2.0 * a3 + m * a4 - (2.0 + m)).abs() <= 1e-9);
                prop_assert!(a2 > 0.0 && a4 > 0.0);
            }
        }
    }
}
