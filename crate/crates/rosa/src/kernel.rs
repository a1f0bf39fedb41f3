//! Column-major sparse GEMV: the memory-bound unit this whole pipeline
//! accelerates.
//!
//! Weights are stored column-contiguous so the kernel loads only the
//! columns matching nonzero activation entries. The fused variant selects
//! the Top-K indices inline (partial selection, no full sort), normalizes
//! them to ascending order, and accumulates — bit-identical to running the
//! sparsifier and the sparse kernel separately, because both paths share
//! the selection routine and the same ascending accumulation order.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::rng::{gaussian_vec, seeded_rng, STREAM_BENCH};
use crate::sparsify::SparseVec;

/// `D_out x D_in` weight matrix stored column-contiguous.
#[derive(Debug, Clone)]
pub struct ColMajorWeight {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl ColMajorWeight {
    pub fn from_data(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim("ColMajorWeight::from_data", rows * cols, data.len()));
        }
        Ok(ColMajorWeight { rows, cols, data })
    }

    /// Packs a row-major `Mat` (rows = D_out) into column-major storage.
    pub fn from_mat(m: &crate::mat::Mat) -> Self {
        let mut data = vec![0.0; m.rows() * m.cols()];
        for j in 0..m.cols() {
            for i in 0..m.rows() {
                data[j * m.rows() + i] = m.at(i, j);
            }
        }
        ColMajorWeight {
            rows: m.rows(),
            cols: m.cols(),
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn column(&self, j: usize) -> &[f64] {
        &self.data[j * self.rows..(j + 1) * self.rows]
    }
}

/// Column loads observed by an instrumented kernel call.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct KernelStats {
    pub columns_loaded: usize,
}

/// The one axpy loop every kernel path accumulates through, so dense,
/// sparse, and fused timings differ only in which columns they touch.
#[inline]
fn axpy_column(y: &mut [f64], col: &[f64], v: f64) {
    for (yi, &wij) in y.iter_mut().zip(col) {
        *yi += v * wij;
    }
}

#[inline]
fn accumulate_columns(
    w: &ColMajorWeight,
    indices: &[usize],
    values: &[f64],
    y: &mut [f64],
    stats: &mut KernelStats,
) {
    for (&j, &v) in indices.iter().zip(values) {
        stats.columns_loaded += 1;
        axpy_column(y, w.column(j), v);
    }
}

/// `y = sum_j value(j) * column_j(W)` over the stored indices only.
pub fn sparse_gemv(w: &ColMajorWeight, sx: &SparseVec) -> Result<Vec<f64>> {
    Ok(sparse_gemv_with_stats(w, sx)?.0)
}

/// [`sparse_gemv`] plus column-load accounting.
pub fn sparse_gemv_with_stats(w: &ColMajorWeight, sx: &SparseVec) -> Result<(Vec<f64>, KernelStats)> {
    if sx.dim() != w.cols {
        return Err(Error::dim("sparse_gemv", w.cols, sx.dim()));
    }
    let mut y = vec![0.0; w.rows];
    let mut stats = KernelStats::default();
    accumulate_columns(w, sx.indices(), sx.values(), &mut y, &mut stats);
    Ok((y, stats))
}

/// Top-K selection fused into the GEMV: selects the k largest-|x| entries
/// (same tie rule as the sparsifier), then touches only those columns.
/// Bitwise identical to `sparse_gemv(w, top_k_sparsify(x, k))`.
pub fn fused_topk_gemv(w: &ColMajorWeight, x: &[f64], k: usize) -> Result<Vec<f64>> {
    if x.len() != w.cols {
        return Err(Error::dim("fused_topk_gemv", w.cols, x.len()));
    }
    if k > x.len() {
        return Err(Error::arg(
            "fused_topk_gemv",
            format!("k = {k} exceeds dim = {}", x.len()),
        ));
    }
    let kept = crate::sparsify::top_k_indices(x, k);
    let mut y = vec![0.0; w.rows];
    let mut stats = KernelStats::default();
    for &j in &kept {
        let v = x[j];
        if v == 0.0 {
            // selected exact zeros consume budget but load no column
            continue;
        }
        accumulate_columns(w, &[j], &[v], &mut y, &mut stats);
    }
    Ok(y)
}

/// Dense GEMV over column-major storage (every column touched, ascending),
/// the baseline the sparse paths are measured against.
pub fn dense_gemv_col_major(w: &ColMajorWeight, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != w.cols {
        return Err(Error::dim("dense_gemv_col_major", w.cols, x.len()));
    }
    let mut y = vec![0.0; w.rows];
    for (j, &v) in x.iter().enumerate() {
        axpy_column(&mut y, w.column(j), v);
    }
    Ok(y)
}

/// Median timing for one (sparsity, mode) cell of a benchmark run.
#[derive(Debug, Clone, serde::Serialize)]
pub struct BenchRow {
    pub d_in: usize,
    pub d_out: usize,
    pub sparsity: f64,
    pub mode: String,
    pub median_ns: u128,
    /// Median over interleaved measurement pairs of dense_time / this_time.
    pub speedup: f64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct BenchReport {
    pub d_in: usize,
    pub d_out: usize,
    pub repetitions: usize,
    pub seed: u64,
    pub dense_median_ns: u128,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    /// CSV with header `d_in,d_out,sparsity,mode,median_ns,speedup`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("d_in,d_out,sparsity,mode,median_ns,speedup\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{:.6}\n",
                r.d_in, r.d_out, r.sparsity, r.mode, r.median_ns, r.speedup
            ));
        }
        out
    }

    pub fn row(&self, sparsity: f64, mode: &str) -> Option<&BenchRow> {
        self.rows
            .iter()
            .find(|r| r.sparsity == sparsity && r.mode == mode)
    }
}

fn median_ns(samples: &mut [u128]) -> u128 {
    samples.sort_unstable();
    samples[samples.len() / 2]
}

struct PairedTiming {
    base_median: u128,
    cand_median: u128,
    /// Median of per-pair base/candidate ratios; adjacent passes share
    /// drift, so this is the most stable speedup estimate on busy hosts.
    ratio_median: f64,
}

/// Times `baseline` and `candidate` in strict alternation (5 discarded
/// warm-up pairs, then `reps` timed pairs) so clock and cache drift hit
/// both equally.
fn time_paired<B: FnMut(), C: FnMut()>(reps: usize, mut baseline: B, mut candidate: C) -> PairedTiming {
    const WARMUP: usize = 5;
    for _ in 0..WARMUP {
        baseline();
        candidate();
    }
    let mut base_samples = Vec::with_capacity(reps);
    let mut cand_samples = Vec::with_capacity(reps);
    let mut ratios = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t0 = Instant::now();
        baseline();
        let base = t0.elapsed().as_nanos();
        let t1 = Instant::now();
        candidate();
        let cand = t1.elapsed().as_nanos();
        base_samples.push(base);
        cand_samples.push(cand);
        ratios.push(base as f64 / cand.max(1) as f64);
    }
    ratios.sort_unstable_by(f64::total_cmp);
    PairedTiming {
        base_median: median_ns(&mut base_samples),
        cand_median: median_ns(&mut cand_samples),
        ratio_median: ratios[ratios.len() / 2],
    }
}

/// Warm-cache median timings of dense, pre-sparsified, and fused kernels
/// at the given sparsity levels. Inputs are seeded and deterministic;
/// timings of course are not. Single-threaded; each cell's speedup is its
/// own interleaved dense baseline divided by the cell median.
pub fn bench(
    d_in: usize,
    d_out: usize,
    sparsity_levels: &[f64],
    reps: usize,
    seed: u64,
) -> Result<BenchReport> {
    if reps < 30 {
        return Err(Error::arg("bench", format!("need >= 30 repetitions, got {reps}")));
    }
    for &s in sparsity_levels {
        if !(0.0..=1.0).contains(&s) {
            return Err(Error::arg("bench", format!("sparsity {s} outside [0, 1]")));
        }
    }
    let mut rng = seeded_rng(seed, STREAM_BENCH);
    let w = ColMajorWeight::from_data(d_out, d_in, gaussian_vec(&mut rng, d_out * d_in, 1.0))?;
    let x = gaussian_vec(&mut rng, d_in, 1.0);

    let dense_median = time_paired(
        reps,
        || {
            std::hint::black_box(dense_gemv_col_major(&w, &x).unwrap());
        },
        || {},
    )
    .base_median;

    let mut rows = vec![BenchRow {
        d_in,
        d_out,
        sparsity: 0.0,
        mode: "dense".into(),
        median_ns: dense_median,
        speedup: 1.0,
    }];
    for &s in sparsity_levels {
        let k = ((1.0 - s) * d_in as f64).round() as usize;
        let sx = crate::sparsify::top_k_sparsify(&x, k)?;

        let sparse = time_paired(
            reps,
            || {
                std::hint::black_box(dense_gemv_col_major(&w, &x).unwrap());
            },
            || {
                std::hint::black_box(sparse_gemv(&w, &sx).unwrap());
            },
        );
        rows.push(BenchRow {
            d_in,
            d_out,
            sparsity: s,
            mode: "sparse".into(),
            median_ns: sparse.cand_median,
            speedup: sparse.ratio_median,
        });

        let fused = time_paired(
            reps,
            || {
                std::hint::black_box(dense_gemv_col_major(&w, &x).unwrap());
            },
            || {
                std::hint::black_box(fused_topk_gemv(&w, &x, k).unwrap());
            },
        );
        rows.push(BenchRow {
            d_in,
            d_out,
            sparsity: s,
            mode: "fused".into(),
            median_ns: fused.cand_median,
            speedup: fused.ratio_median,
        });
    }
    Ok(BenchReport {
        d_in,
        d_out,
        repetitions: reps,
        seed,
        dense_median_ns: dense_median,
        rows,
    })
}
