//! Minimal f32 matrix type and the primitive kernels used by the models and
//! the decode engine.
//!
//! Every kernel bumps the dispatch counter once per invocation and every
//! fresh buffer bumps the alloc counter, so engine metrics can report kernel
//! launches and steady-state allocations. Kernels are written so that the
//! batched forms (one GEMM over a whole sequence) accumulate in exactly the
//! same order as the incremental forms (one matvec per token): row `i` of
//! `gemm` and `matvec` on the same inputs are bit-identical. Row-level ops
//! (softmax, rmsnorm, rotary) stay row-level on purpose; a batched forward
//! dispatches them once per row.

use crate::metrics::{bump_alloc, bump_dispatch};
use crate::par;

/// Row-major f32 matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        bump_alloc();
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length must match shape");
        Mat { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        bump_alloc();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Mat { rows, cols, data }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.cols.max(1))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Allocate a scratch buffer, counting the allocation.
pub fn alloc_buf(len: usize) -> Vec<f32> {
    bump_alloc();
    vec![0.0; len]
}

/// out[j] += alpha * x[j]
#[inline]
fn axpy(alpha: f32, x: &[f32], out: &mut [f32]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

/// out = x @ w for a single input row. `w` is (in_dim x out_dim).
/// Accumulates over k ascending; identical to one `gemm` output row.
pub fn matvec(x: &[f32], w: &Mat, out: &mut [f32]) {
    bump_dispatch();
    debug_assert_eq!(x.len(), w.rows);
    debug_assert_eq!(out.len(), w.cols);
    out.fill(0.0);
    for (k, &xk) in x.iter().enumerate() {
        axpy(xk, w.row(k), out);
    }
}

/// out = a @ b. Rows are independent and computed in parallel; each row uses
/// the same k-ascending accumulation as [`matvec`].
pub fn gemm(a: &Mat, b: &Mat, out: &mut Mat) {
    bump_dispatch();
    assert_eq!(a.cols, b.rows, "gemm inner dims");
    assert_eq!((out.rows, out.cols), (a.rows, b.cols), "gemm output shape");
    let cols = b.cols;
    let work = a.rows * a.cols * cols;
    if work < 1 << 14 {
        for i in 0..a.rows {
            let arow = a.row(i);
            let orow = out.row_mut(i);
            orow.fill(0.0);
            for (k, &aik) in arow.iter().enumerate() {
                axpy(aik, b.row(k), orow);
            }
        }
        return;
    }
    let a_ref = &*a;
    let b_ref = &*b;
    par::for_each_chunk_mut(&mut out.data, cols, |start, orow| {
        let i = start / cols;
        orow.fill(0.0);
        for (k, &aik) in a_ref.row(i).iter().enumerate() {
            axpy(aik, b_ref.row(k), orow);
        }
    });
}

/// Allocating wrapper over [`gemm`].
pub fn gemm_alloc(a: &Mat, b: &Mat) -> Mat {
    let mut out = Mat::zeros(a.rows, b.cols);
    gemm(a, b, &mut out);
    out
}

/// RMS-normalize one row: out = x / rms(x) * weight.
pub fn rmsnorm_row(x: &[f32], weight: &[f32], eps: f32, out: &mut [f32]) {
    bump_dispatch();
    debug_assert_eq!(x.len(), weight.len());
    let mut ss = 0.0f32;
    for &v in x {
        ss += v * v;
    }
    let inv = 1.0 / (ss / x.len() as f32 + eps).sqrt();
    for ((o, &v), &w) in out.iter_mut().zip(x).zip(weight) {
        *o = v * inv * w;
    }
}

/// In-place softmax over one row (max-subtracted).
pub fn softmax_row(x: &mut [f32]) {
    bump_dispatch();
    let mut m = f32::NEG_INFINITY;
    for &v in x.iter() {
        if v > m {
            m = v;
        }
    }
    let mut sum = 0.0f32;
    for v in x.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in x.iter_mut() {
        *v *= inv;
    }
}

/// Rotary position encoding applied in place to one row, rotating adjacent
/// pairs within each head span.
pub fn rotary_row(x: &mut [f32], pos: usize, head_dim: usize, base: f32) {
    bump_dispatch();
    debug_assert_eq!(x.len() % head_dim, 0);
    debug_assert_eq!(head_dim % 2, 0);
    let half = head_dim / 2;
    for head in x.chunks_exact_mut(head_dim) {
        for i in 0..half {
            let theta = pos as f32 * base.powf(-(2.0 * i as f32) / head_dim as f32);
            let (sin, cos) = theta.sin_cos();
            let a = head[2 * i];
            let b = head[2 * i + 1];
            head[2 * i] = a * cos - b * sin;
            head[2 * i + 1] = a * sin + b * cos;
        }
    }
}

/// Attention scores for one query head over the first `n_keys` rows of a
/// key buffer laid out as consecutive `head_stride`-wide rows, reading the
/// `head_dim` slice at `head_off`. `mask` (when given) is added to each
/// score; entries past the valid prefix carry -inf so the fixed-shape path
/// can run over full capacity.
#[allow(clippy::too_many_arguments)]
pub fn attn_scores(
    q: &[f32],
    keys: &[f32],
    n_keys: usize,
    head_stride: usize,
    head_off: usize,
    scale: f32,
    mask: Option<&[f32]>,
    out: &mut [f32],
) {
    bump_dispatch();
    debug_assert!(out.len() >= n_keys);
    for j in 0..n_keys {
        let krow = &keys[j * head_stride + head_off..j * head_stride + head_off + q.len()];
        let mut acc = 0.0f32;
        for (a, b) in q.iter().zip(krow) {
            acc += a * b;
        }
        let mut s = acc * scale;
        if let Some(m) = mask {
            s += m[j];
        }
        out[j] = s;
    }
}

/// out = sum_j probs[j] * values[j], same layout convention as
/// [`attn_scores`]. Accumulates over j ascending.
pub fn attn_mix(
    probs: &[f32],
    values: &[f32],
    n_keys: usize,
    head_stride: usize,
    head_off: usize,
    out: &mut [f32],
) {
    bump_dispatch();
    out.fill(0.0);
    for (j, &p) in probs.iter().enumerate().take(n_keys) {
        let vrow = &values[j * head_stride + head_off..j * head_stride + head_off + out.len()];
        axpy(p, vrow, out);
    }
}

/// dst += src, elementwise.
pub fn add_assign(dst: &mut [f32], src: &[f32]) {
    bump_dispatch();
    debug_assert_eq!(dst.len(), src.len());
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// In-place SiLU: x * sigmoid(x).
pub fn silu(x: &mut [f32]) {
    bump_dispatch();
    for v in x.iter_mut() {
        *v = *v / (1.0 + (-*v).exp());
    }
}

/// dst = src (counted copy; engine uses it to move data between buffers).
pub fn copy_into(src: &[f32], dst: &mut [f32]) {
    bump_dispatch();
    dst.copy_from_slice(src);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics;

    fn seeded_mat(rows: usize, cols: usize, seed: u32) -> Mat {
        let mut s = seed;
        Mat::from_fn(rows, cols, |_, _| {
            s = s.wrapping_mul(1664525).wrapping_add(1013904223);
            (s >> 8) as f32 / (1u32 << 24) as f32 - 0.5
        })
    }

    #[test]
    fn gemm_rows_match_matvec_bitwise() {
        let a = seeded_mat(33, 64, 7);
        let b = seeded_mat(64, 48, 11);
        let out = gemm_alloc(&a, &b);
        let mut row = vec![0.0f32; 48];
        for i in 0..a.rows {
            matvec(a.row(i), &b, &mut row);
            assert_eq!(out.row(i), &row[..], "row {i} differs");
        }
    }

    #[test]
    fn gemm_parallel_threshold_consistent() {
        // Large enough to take the parallel path; compare against the
        // sequential small-path result computed row by row.
        let a = seeded_mat(64, 96, 3);
        let b = seeded_mat(96, 80, 5);
        let big = gemm_alloc(&a, &b);
        let mut row = vec![0.0f32; 80];
        for i in 0..64 {
            matvec(a.row(i), &b, &mut row);
            assert_eq!(big.row(i), &row[..]);
        }
    }

    #[test]
    fn softmax_row_sums_to_one() {
        let mut x = vec![0.5f32, -1.0, 3.0, 0.0];
        softmax_row(&mut x);
        let s: f32 = x.iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
        assert!(x.iter().all(|&p| p > 0.0));
    }

    #[test]
    fn masked_full_capacity_softmax_matches_prefix() {
        // Scores over capacity with -inf tail must reproduce the prefix-only
        // result bit for bit: this is the fixed-shape attention contract.
        let prefix = vec![0.3f32, -0.7, 1.9];
        let mut full = vec![0.3f32, -0.7, 1.9, f32::NEG_INFINITY, f32::NEG_INFINITY];
        let mut short = prefix.clone();
        softmax_row(&mut short);
        softmax_row(&mut full);
        assert_eq!(&full[..3], &short[..]);
        assert_eq!(&full[3..], &[0.0, 0.0]);
    }

    #[test]
    fn rotary_preserves_norm() {
        let mut x: Vec<f32> = (0..8).map(|i| i as f32 / 3.0).collect();
        let n0: f32 = x.iter().map(|v| v * v).sum();
        rotary_row(&mut x, 17, 4, 10000.0);
        let n1: f32 = x.iter().map(|v| v * v).sum();
        assert!((n0 - n1).abs() < 1e-4);
    }

    #[test]
    fn kernels_bump_dispatch_and_alloc() {
        let ((), d, a) = metrics::measure(|| {
            let m = Mat::zeros(4, 4);
            let mut out = vec![0.0; 4];
            matvec(&[1.0, 0.0, 0.0, 0.0], &m, &mut out);
        });
        assert_eq!(d, 1);
        assert_eq!(a, 1);
    }
}
