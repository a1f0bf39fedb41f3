//! Exhaustive grid search over the free sparsity coefficients.
//!
//! The two free coefficients sweep [0.7, 1.2] in steps of 0.05 (computed as
//! integer multiples of the step so the endpoints are hit exactly); the
//! dependent pair comes from the constraint system. The objective is the
//! mean relative logit error of the rotated Top-K pass against the dense
//! pass of the source model, evaluated on sequences disjoint from the
//! covariance-calibration set.

use crate::error::{Error, Result};
use crate::forward::{mean_logit_error, Mode};
use crate::mat::Mat;
use crate::model::Model;
use crate::rotation::RotatedModel;
use crate::sparsify::SparsityPlan;

/// Objective minimized by the search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum Objective {
    RelativeLogitError,
}

#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct SearchSpace {
    pub alpha1_lo: f64,
    pub alpha1_hi: f64,
    pub alpha3_lo: f64,
    pub alpha3_hi: f64,
    pub step: f64,
    pub objective: Objective,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            alpha1_lo: 0.7,
            alpha1_hi: 1.2,
            alpha3_lo: 0.7,
            alpha3_hi: 1.2,
            step: 0.05,
            objective: Objective::RelativeLogitError,
        }
    }
}

impl SearchSpace {
    fn axis(lo: f64, hi: f64, step: f64) -> Vec<f64> {
        // integer multiples of the step, upper bound checked with slack so
        // float accumulation cannot drop the endpoint
        let mut out = Vec::new();
        let mut i = 0u32;
        loop {
            let v = lo + f64::from(i) * step;
            if v > hi + 1e-9 {
                break;
            }
            out.push(v);
            i += 1;
        }
        out
    }

    pub fn alpha1_values(&self) -> Vec<f64> {
        Self::axis(self.alpha1_lo, self.alpha1_hi, self.step)
    }

    pub fn alpha3_values(&self) -> Vec<f64> {
        Self::axis(self.alpha3_lo, self.alpha3_hi, self.step)
    }
}

#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct TracePoint {
    pub alpha: [f64; 4],
    pub objective: f64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct SearchResult {
    pub alpha: [f64; 4],
    pub objective: f64,
    pub trace: Vec<TracePoint>,
    /// Grid points whose constraint solution was infeasible.
    pub skipped: Vec<(f64, f64)>,
}

/// CSV with header `alpha1,alpha2,alpha3,alpha4,objective`.
pub fn trace_csv(trace: &[TracePoint]) -> String {
    let mut out = String::from("alpha1,alpha2,alpha3,alpha4,objective\n");
    for p in trace {
        out.push_str(&format!(
            "{:.4},{:.4},{:.4},{:.4},{:.12}\n",
            p.alpha[0], p.alpha[1], p.alpha[2], p.alpha[3], p.objective
        ));
    }
    out
}

/// Exhaustive sweep of the coefficient grid at sparsity `p`.
///
/// Every feasible grid point is evaluated exactly once, in lexicographic
/// (alpha1, alpha3) order; strict improvement updates the winner, so ties
/// resolve to the lexicographically smallest pair. Infeasible points are
/// skipped and reported, not fatal.
pub fn grid_search(
    model: &Model,
    rotated: &RotatedModel,
    eval_seqs: &[Vec<u32>],
    p: f64,
    space: &SearchSpace,
) -> Result<SearchResult> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::arg("grid_search", format!("p must lie in (0, 1), got {p}")));
    }
    if eval_seqs.is_empty() {
        return Err(Error::arg("grid_search", "no evaluation sequences"));
    }
    if !space.step.is_finite() || space.step <= 0.0 {
        return Err(Error::arg("grid_search", "step must be positive"));
    }
    let cfg = &model.config;
    let dense: Vec<Mat> = eval_seqs
        .iter()
        .map(|seq| model.forward(seq, &Mode::Dense))
        .collect::<Result<_>>()?;

    let mut best: Option<(f64, [f64; 4])> = None;
    let mut trace = Vec::new();
    let mut skipped = Vec::new();
    for a1 in space.alpha1_values() {
        for a3 in space.alpha3_values() {
            let plan = match SparsityPlan::new(p, a1, a3, cfg.m_ratio, cfg.d, cfg.d_ff()) {
                Ok(plan) => plan,
                Err(Error::InfeasibleCoefficients { .. }) => {
                    skipped.push((a1, a3));
                    continue;
                }
                Err(e) => return Err(e),
            };
            let candidate: Vec<Mat> = eval_seqs
                .iter()
                .map(|seq| rotated.forward(seq, &Mode::TopK(&plan)))
                .collect::<Result<_>>()?;
            let objective = mean_logit_error(&dense, &candidate)?;
            trace.push(TracePoint {
                alpha: plan.alpha,
                objective,
            });
            if best.is_none_or(|(b, _)| objective < b) {
                best = Some((objective, plan.alpha));
            }
        }
    }
    let (objective, alpha) =
        best.ok_or_else(|| Error::arg("grid_search", "every grid point was infeasible"))?;
    Ok(SearchResult {
        alpha,
        objective,
        trace,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::calibration_pass;
    use crate::model::{synth_model, ModelConfig};
    use crate::rng::{seeded_rng, token_stream_zipf, STREAM_CALIB_TOKENS, STREAM_EVAL_TOKENS};
    use crate::rotation::{build_rotation, merge_rotations, RotationMatrix};

    #[test]
    fn default_grid_has_11_by_11_points() {
        let space = SearchSpace::default();
        assert_eq!(space.alpha1_values().len(), 11);
        assert_eq!(space.alpha3_values().len(), 11);
        let a1 = space.alpha1_values();
        assert!((a1[0] - 0.7).abs() < 1e-12);
        assert!((a1[10] - 1.2).abs() < 1e-9);
    }

    fn small_pipeline(seed: u64) -> (Model, RotatedModel, Vec<Vec<u32>>) {
        let cfg = ModelConfig {
            d: 16,
            layers: 2,
            heads: 2,
            kv_groups: 1,
            m_ratio: 2.0,
            vocab: 32,
            seed,
        };
        let model = synth_model(&cfg).unwrap();
        let mut crng = seeded_rng(seed, STREAM_CALIB_TOKENS);
        let calib: Vec<Vec<u32>> = (0..4)
            .map(|_| token_stream_zipf(&mut crng, cfg.vocab, 16, 1.1))
            .collect();
        let accs = calibration_pass(&model, &calib).unwrap();
        let rotations: Vec<RotationMatrix> = accs
            .iter()
            .map(|a| build_rotation(&a.finalize().unwrap()).unwrap())
            .collect();
        let rotated = merge_rotations(&model, &rotations).unwrap();
        let mut erng = seeded_rng(seed, STREAM_EVAL_TOKENS);
        let eval: Vec<Vec<u32>> = (0..2)
            .map(|_| token_stream_zipf(&mut erng, cfg.vocab, 12, 0.9))
            .collect();
        (model, rotated, eval)
    }

    #[test]
    fn search_covers_grid_and_beats_uniform() {
        let (model, rotated, eval) = small_pipeline(31);
        let space = SearchSpace::default();
        let result = grid_search(&model, &rotated, &eval, 0.5, &space).unwrap();
        assert_eq!(result.trace.len() + result.skipped.len(), 121);
        assert!(result.skipped.is_empty(), "all default points feasible for m = 2");

        // winner satisfies both constraints
        let a = result.alpha;
        assert!((3.0 * a[0] + a[1] - 4.0).abs() < 1e-9);
        assert!((2.0 * a[2] + 2.0 * a[3] - 4.0).abs() < 1e-9);

        // uniform allocation is on the grid, so the winner cannot lose to it
        let uniform = result
            .trace
            .iter()
            .find(|t| (t.alpha[0] - 1.0).abs() < 1e-9 && (t.alpha[2] - 1.0).abs() < 1e-9)
            .expect("uniform point present");
        assert!(result.objective <= uniform.objective);

        // every trace objective is at least the winner's
        for t in &result.trace {
            assert!(t.objective >= result.objective);
        }
    }

    #[test]
    fn search_is_deterministic() {
        let (model, rotated, eval) = small_pipeline(32);
        let space = SearchSpace::default();
        let a = grid_search(&model, &rotated, &eval, 0.5, &space).unwrap();
        let b = grid_search(&model, &rotated, &eval, 0.5, &space).unwrap();
        assert_eq!(a.alpha, b.alpha);
        assert_eq!(a.objective, b.objective);
        assert_eq!(a.trace.len(), b.trace.len());
        for (x, y) in a.trace.iter().zip(&b.trace) {
            assert_eq!(x.alpha, y.alpha);
            assert_eq!(x.objective, y.objective);
        }
    }

    #[test]
    fn search_rejects_bad_inputs() {
        let (model, rotated, eval) = small_pipeline(33);
        let space = SearchSpace::default();
        assert!(grid_search(&model, &rotated, &eval, 0.0, &space).is_err());
        assert!(grid_search(&model, &rotated, &eval, 1.0, &space).is_err());
        assert!(grid_search(&model, &rotated, &[], 0.5, &space).is_err());
    }

    #[test]
    fn infeasible_points_are_skipped_not_fatal() {
        let (model, rotated, eval) = small_pipeline(34);
        // alpha1 up to 1.4 makes alpha2 = 4 - 3*alpha1 nonpositive at the top
        let space = SearchSpace {
            alpha1_hi: 1.4,
            ..Default::default()
        };
        let result = grid_search(&model, &rotated, &eval, 0.5, &space).unwrap();
        assert!(!result.skipped.is_empty());
        assert_eq!(result.trace.len() + result.skipped.len(), 15 * 11);
    }

    #[test]
    fn trace_csv_header() {
        let csv = trace_csv(&[TracePoint {
            alpha: [1.0, 1.0, 1.0, 1.0],
            objective: 0.5,
        }]);
        assert!(csv.starts_with("alpha1,alpha2,alpha3,alpha4,objective\n"));
        assert_eq!(csv.lines().count(), 2);
    }
}
