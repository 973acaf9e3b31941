//! Minimal dense tensor algebra: row-major storage, mode-i
//! flattening/folding, batched matrix multiply and numerically stable row
//! softmax.
//!
//! Conventions used throughout the crate:
//!
//! - Tensors are row-major: the last index varies fastest.
//! - A sequence tensor has shape `(n_1, ..., n_m, d)` where the `m` leading
//!   extents are sequence modes and the trailing extent is the feature
//!   width. Mode indices are 1-based (`1..=m`), matching the level numbering
//!   of a decomposition plan.
//! - Operations allocate fresh outputs; inputs are never mutated. Reduction
//!   order in matmul is fixed (ascending over the inner dimension) so
//!   results are bit-reproducible.

use std::sync::atomic::{AtomicUsize, Ordering};

use crate::scalar::Scalar;
use thiserror::Error;

/// Errors from tensor construction and kernels.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TensorError {
    #[error("shape {shape:?} implies {expected} elements, data has {got}")]
    ShapeDataMismatch {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("shape {0:?} contains a zero extent")]
    ZeroExtent(Vec<usize>),
    #[error("tensor rank {rank} too low, need at least {needed}")]
    RankTooLow { rank: usize, needed: usize },
    #[error("mode {mode} out of range 1..={num_modes}")]
    ModeOutOfRange { mode: usize, num_modes: usize },
    #[error("cannot fold (batch {batch}, rows {rows}, cols {cols}) into shape {target:?} on mode {mode}")]
    FoldMismatch {
        batch: usize,
        rows: usize,
        cols: usize,
        target: Vec<usize>,
        mode: usize,
    },
    #[error("batched matmul mismatch: left is {left:?}, right is {right:?}")]
    MatmulMismatch {
        left: (usize, usize, usize),
        right: (usize, usize, usize),
    },
    #[error("cannot reshape {len} elements to {target:?}")]
    ReshapeMismatch { len: usize, target: Vec<usize> },
    #[error("{op}: input contains NaN")]
    NanInput { op: &'static str },
    #[error("softmax row {row} of batch {batch} has no finite entry")]
    UnnormalizableRow { batch: usize, row: usize },
}

static MAX_THREADS: AtomicUsize = AtomicUsize::new(1);

/// Set the worker-thread cap for batched kernels. Defaults to 1
/// (single-threaded); results are identical for any setting.
pub fn set_max_threads(n: usize) {
    MAX_THREADS.store(n.max(1), Ordering::Relaxed);
}

/// Current worker-thread cap for batched kernels.
pub fn max_threads() -> usize {
    MAX_THREADS.load(Ordering::Relaxed)
}

/// Dense multi-dimensional array, row-major, contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> DenseTensor<T> {
    /// Build a tensor from a shape and a flat row-major buffer.
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, TensorError> {
        if shape.iter().any(|&n| n == 0) {
            return Err(TensorError::ZeroExtent(shape));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeDataMismatch {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    /// All-zeros tensor. Panics on a zero extent (use `new` for fallible
    /// construction).
    pub fn zeros(shape: &[usize]) -> Self {
        assert!(
            shape.iter().all(|&n| n > 0),
            "zero extent in shape {shape:?}"
        );
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); len],
        }
    }

    /// Rank-2 convenience constructor.
    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self, TensorError> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Flat row-major offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut off = 0;
        for (i, &ix) in index.iter().enumerate() {
            debug_assert!(ix < self.shape[i]);
            off = off * self.shape[i] + ix;
        }
        off
    }

    pub fn get(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: T) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    /// Reinterpret the buffer under a new shape (row-major, so this is free
    /// of data movement).
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self, TensorError> {
        if shape.iter().any(|&n| n == 0) {
            return Err(TensorError::ZeroExtent(shape.to_vec()));
        }
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(TensorError::ReshapeMismatch {
                len: self.data.len(),
                target: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Maximum absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (*a - *b).abs().to_f64())
            .fold(0.0, f64::max)
    }

    /// Cast every element to another scalar type.
    pub fn cast<U: Scalar>(&self) -> DenseTensor<U> {
        DenseTensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }
}

/// Mode-i flattening of a sequence tensor: `batch` matrices of shape
/// `rows x cols` stored contiguously as `(batch, rows, cols)`.
///
/// `batch` enumerates the non-flattened sequence modes in row-major order,
/// `rows` is the flattened mode's extent and `cols` the feature width.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeMatrix<T> {
    batch: usize,
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> ModeMatrix<T> {
    pub fn new(batch: usize, rows: usize, cols: usize, data: Vec<T>) -> Result<Self, TensorError> {
        let shape = vec![batch, rows, cols];
        if shape.iter().any(|&n| n == 0) {
            return Err(TensorError::ZeroExtent(shape));
        }
        let expected = batch * rows * cols;
        if expected != data.len() {
            return Err(TensorError::ShapeDataMismatch {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Self {
            batch,
            rows,
            cols,
            data,
        })
    }

    pub fn zeros(batch: usize, rows: usize, cols: usize) -> Self {
        Self {
            batch,
            rows,
            cols,
            data: vec![T::zero(); batch * rows * cols],
        }
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// One batch slice as a row-major `rows x cols` block.
    pub fn slice(&self, b: usize) -> &[T] {
        let stride = self.rows * self.cols;
        &self.data[b * stride..(b + 1) * stride]
    }

    pub fn slice_mut(&mut self, b: usize) -> &mut [T] {
        let stride = self.rows * self.cols;
        &mut self.data[b * stride..(b + 1) * stride]
    }

    pub fn get(&self, b: usize, r: usize, c: usize) -> T {
        self.data[(b * self.rows + r) * self.cols + c]
    }

    pub fn set(&mut self, b: usize, r: usize, c: usize, value: T) {
        self.data[(b * self.rows + r) * self.cols + c] = value;
    }

    /// Transpose each batch slice, yielding `(batch, cols, rows)`.
    pub fn transpose_slices(&self) -> Self {
        let mut out = vec![T::zero(); self.data.len()];
        let stride = self.rows * self.cols;
        for b in 0..self.batch {
            let src = &self.data[b * stride..(b + 1) * stride];
            let dst = &mut out[b * stride..(b + 1) * stride];
            for r in 0..self.rows {
                for c in 0..self.cols {
                    dst[c * self.rows + r] = src[r * self.cols + c];
                }
            }
        }
        Self {
            batch: self.batch,
            rows: self.cols,
            cols: self.rows,
            data: out,
        }
    }

    /// Mean over the batch axis, yielding a single-slice `ModeMatrix`.
    pub fn mean_over_batch(&self) -> Self {
        let stride = self.rows * self.cols;
        let mut out = vec![T::zero(); stride];
        for b in 0..self.batch {
            let src = &self.data[b * stride..(b + 1) * stride];
            for (o, s) in out.iter_mut().zip(src.iter()) {
                *o += *s;
            }
        }
        let inv = T::from_f64(1.0 / self.batch as f64);
        for o in out.iter_mut() {
            *o *= inv;
        }
        Self {
            batch: 1,
            rows: self.rows,
            cols: self.cols,
            data: out,
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(
            (self.batch, self.rows, self.cols),
            (other.batch, other.rows, other.cols),
            "max_abs_diff shape mismatch"
        );
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (*a - *b).abs().to_f64())
            .fold(0.0, f64::max)
    }
}

fn split_modes(shape: &[usize], mode: usize) -> Result<(usize, usize, usize, usize), TensorError> {
    if shape.len() < 2 {
        return Err(TensorError::RankTooLow {
            rank: shape.len(),
            needed: 2,
        });
    }
    let num_modes = shape.len() - 1;
    if mode == 0 || mode > num_modes {
        return Err(TensorError::ModeOutOfRange { mode, num_modes });
    }
    let outer: usize = shape[..mode - 1].iter().product();
    let rows = shape[mode - 1];
    let tail: usize = shape[mode..num_modes].iter().product();
    let d = shape[num_modes];
    Ok((outer, rows, tail, d))
}

/// Mode-i flattening of a sequence tensor with shape `(n_1, ..., n_m, d)`.
///
/// Output element `(b, r, c)` is the tensor element whose mode-i digit is
/// `r`, whose remaining sequence digits decode `b` in row-major order over
/// modes `(1, ..., i-1, i+1, ..., m)`, and whose feature index is `c`.
pub fn mode_flatten<T: Scalar>(
    t: &DenseTensor<T>,
    mode: usize,
) -> Result<ModeMatrix<T>, TensorError> {
    let (outer, rows, tail, d) = split_modes(t.shape(), mode)?;
    let src = t.data();
    // Flattening the last sequence mode leaves the buffer untouched.
    if tail == 1 {
        return ModeMatrix::new(outer, rows, d, src.to_vec());
    }
    let mut out = vec![T::zero(); src.len()];
    for o in 0..outer {
        for r in 0..rows {
            for s in 0..tail {
                let src_off = ((o * rows + r) * tail + s) * d;
                let dst_off = ((o * tail + s) * rows + r) * d;
                out[dst_off..dst_off + d].copy_from_slice(&src[src_off..src_off + d]);
            }
        }
    }
    ModeMatrix::new(outer * tail, rows, d, out)
}

/// Exact inverse of [`mode_flatten`] for the same mode and target shape.
pub fn mode_fold<T: Scalar>(
    m: &ModeMatrix<T>,
    mode: usize,
    target_shape: &[usize],
) -> Result<DenseTensor<T>, TensorError> {
    let (outer, rows, tail, d) = split_modes(target_shape, mode)?;
    let mismatch = || TensorError::FoldMismatch {
        batch: m.batch(),
        rows: m.rows(),
        cols: m.cols(),
        target: target_shape.to_vec(),
        mode,
    };
    if m.rows() != rows || m.cols() != d || m.batch() != outer * tail {
        return Err(mismatch());
    }
    let src = m.data();
    if tail == 1 {
        return DenseTensor::new(target_shape.to_vec(), src.to_vec());
    }
    let mut out = vec![T::zero(); src.len()];
    for o in 0..outer {
        for r in 0..rows {
            for s in 0..tail {
                let dst_off = ((o * rows + r) * tail + s) * d;
                let src_off = ((o * tail + s) * rows + r) * d;
                out[dst_off..dst_off + d].copy_from_slice(&src[src_off..src_off + d]);
            }
        }
    }
    DenseTensor::new(target_shape.to_vec(), out)
}

fn matmul_block<T: Scalar>(a: &[T], b: &[T], out: &mut [T], p: usize, q: usize, r: usize) {
    // ikj ordering: inner dimension accumulates ascending, so the reduction
    // order is fixed and results are reproducible.
    for i in 0..p {
        let out_row = &mut out[i * r..(i + 1) * r];
        for k in 0..q {
            let aik = a[i * q + k];
            let b_row = &b[k * r..(k + 1) * r];
            for (o, &bv) in out_row.iter_mut().zip(b_row.iter()) {
                *o += aik * bv;
            }
        }
    }
}

fn matmul_transpose_b_block<T: Scalar>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    p: usize,
    q: usize,
    r: usize,
) {
    // out[i, j] = sum_k a[i, k] * b[j, k]; both operands walk contiguous rows.
    for i in 0..p {
        let a_row = &a[i * q..(i + 1) * q];
        for j in 0..r {
            let b_row = &b[j * q..(j + 1) * q];
            let mut acc = T::zero();
            for (&av, &bv) in a_row.iter().zip(b_row.iter()) {
                acc += av * bv;
            }
            out[i * r + j] = acc;
        }
    }
}

fn check_batches<T: Scalar>(
    a: &ModeMatrix<T>,
    b: &ModeMatrix<T>,
    b_rows_expected: usize,
) -> Result<usize, TensorError> {
    let compatible = a.batch() == b.batch() || a.batch() == 1 || b.batch() == 1;
    if !compatible || b.rows() != b_rows_expected {
        return Err(TensorError::MatmulMismatch {
            left: (a.batch(), a.rows(), a.cols()),
            right: (b.batch(), b.rows(), b.cols()),
        });
    }
    Ok(a.batch().max(b.batch()))
}

fn run_batched<T: Scalar>(
    batch: usize,
    per_slice_flops: usize,
    out: &mut ModeMatrix<T>,
    kernel: impl Fn(usize, &mut [T]) + Sync,
) {
    let threads = max_threads().min(batch);
    // Thread spawn overhead dominates below ~1M flops of work.
    if threads <= 1 || batch * per_slice_flops < (1 << 20) {
        for bi in 0..batch {
            kernel(bi, out.slice_mut(bi));
        }
        return;
    }
    let stride = out.rows() * out.cols();
    let chunk_batches = batch.div_ceil(threads);
    let data = out.data_mut();
    std::thread::scope(|scope| {
        for (ci, chunk) in data.chunks_mut(chunk_batches * stride).enumerate() {
            let kernel = &kernel;
            scope.spawn(move || {
                for (off, slice) in chunk.chunks_mut(stride).enumerate() {
                    kernel(ci * chunk_batches + off, slice);
                }
            });
        }
    });
}

/// Batched matrix product `(B, p, q) x (B, q, r) -> (B, p, r)`.
///
/// A batch count of 1 on either side broadcasts against the other.
pub fn batched_matmul<T: Scalar>(
    a: &ModeMatrix<T>,
    b: &ModeMatrix<T>,
) -> Result<ModeMatrix<T>, TensorError> {
    let batch = check_batches(a, b, a.cols())?;
    let (p, q, r) = (a.rows(), a.cols(), b.cols());
    let mut out = ModeMatrix::zeros(batch, p, r);
    run_batched(batch, p * q * r, &mut out, |bi, slice| {
        let sa = a.slice(if a.batch() == 1 { 0 } else { bi });
        let sb = b.slice(if b.batch() == 1 { 0 } else { bi });
        matmul_block(sa, sb, slice, p, q, r);
    });
    Ok(out)
}

/// Batched product against the per-slice transpose of `b`:
/// `(B, p, q) x (B, r, q)^T -> (B, p, r)`.
pub fn batched_matmul_transpose_b<T: Scalar>(
    a: &ModeMatrix<T>,
    b: &ModeMatrix<T>,
) -> Result<ModeMatrix<T>, TensorError> {
    let compatible = a.batch() == b.batch() || a.batch() == 1 || b.batch() == 1;
    if !compatible || b.cols() != a.cols() {
        return Err(TensorError::MatmulMismatch {
            left: (a.batch(), a.rows(), a.cols()),
            right: (b.batch(), b.rows(), b.cols()),
        });
    }
    let batch = a.batch().max(b.batch());
    let (p, q, r) = (a.rows(), a.cols(), b.rows());
    let mut out = ModeMatrix::zeros(batch, p, r);
    run_batched(batch, p * q * r, &mut out, |bi, slice| {
        let sa = a.slice(if a.batch() == 1 { 0 } else { bi });
        let sb = b.slice(if b.batch() == 1 { 0 } else { bi });
        matmul_transpose_b_block(sa, sb, slice, p, q, r);
    });
    Ok(out)
}

/// Row-wise softmax with max-subtraction, applied to every row of every
/// batch slice.
///
/// Entries may be `-inf` (they normalize to exactly 0); a row with no
/// finite entry or any NaN is an error.
pub fn row_softmax<T: Scalar>(m: &ModeMatrix<T>) -> Result<ModeMatrix<T>, TensorError> {
    let mut out = m.clone();
    row_softmax_in_place(&mut out)?;
    Ok(out)
}

pub(crate) fn row_softmax_in_place<T: Scalar>(m: &mut ModeMatrix<T>) -> Result<(), TensorError> {
    let (batch, rows, cols) = (m.batch(), m.rows(), m.cols());
    for b in 0..batch {
        let slice = m.slice_mut(b);
        for r in 0..rows {
            let row = &mut slice[r * cols..(r + 1) * cols];
            let mut max = T::neg_infinity();
            for &v in row.iter() {
                if v.is_nan() {
                    return Err(TensorError::NanInput { op: "row_softmax" });
                }
                if v > max {
                    max = v;
                }
            }
            if !max.is_finite() {
                return Err(TensorError::UnnormalizableRow { batch: b, row: r });
            }
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            let inv = T::one() / sum;
            for v in row.iter_mut() {
                *v *= inv;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor_f64(shape: &[usize], data: &[f64]) -> DenseTensor<f64> {
        DenseTensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn offset_round_trip() {
        let mut t = DenseTensor::<f64>::zeros(&[3, 4, 5, 2]);
        t.set(&[2, 1, 4, 0], 7.5);
        assert_eq!(t.get(&[2, 1, 4, 0]), 7.5);
        // Row-major contract: offset = sum_j i_j * prod_{l>j} n_l.
        assert_eq!(t.offset(&[2, 1, 4, 0]), 2 * 40 + 10 + 4 * 2);
    }

    #[test]
    fn new_rejects_length_mismatch() {
        let err = DenseTensor::<f64>::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, TensorError::ShapeDataMismatch { .. }));
    }

    #[test]
    fn new_rejects_zero_extent() {
        let err = DenseTensor::<f64>::new(vec![2, 0], vec![]).unwrap_err();
        assert!(matches!(err, TensorError::ZeroExtent(_)));
    }

    #[test]
    fn flatten_last_mode_is_identity_layout() {
        // shape (2, 3, 1), mode 2: two batch matrices [0,1,2] and [3,4,5].
        let t = tensor_f64(&[2, 3, 1], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        let m = mode_flatten(&t, 2).unwrap();
        assert_eq!((m.batch(), m.rows(), m.cols()), (2, 3, 1));
        assert_eq!(m.data(), &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn flatten_first_mode_interleaves() {
        // shape (2, 3, 1), mode 1: batches [[0],[3]], [[1],[4]], [[2],[5]].
        let t = tensor_f64(&[2, 3, 1], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        let m = mode_flatten(&t, 1).unwrap();
        assert_eq!((m.batch(), m.rows(), m.cols()), (3, 2, 1));
        assert_eq!(m.data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
    }

    #[test]
    fn flatten_fold_round_trip_all_modes() {
        let shape = [3, 4, 5, 2];
        let data: Vec<f64> = (0..120).map(|i| i as f64 * 0.25 - 7.0).collect();
        let t = tensor_f64(&shape, &data);
        for mode in 1..=3 {
            let m = mode_flatten(&t, mode).unwrap();
            let back = mode_fold(&m, mode, &shape).unwrap();
            assert_eq!(back, t, "round trip failed on mode {mode}");
        }
    }

    #[test]
    fn fold_single_batch_is_reinterpret() {
        let m = ModeMatrix::new(1, 4, 3, (0..12).map(|i| i as f64).collect()).unwrap();
        let t = mode_fold(&m, 1, &[4, 3]).unwrap();
        assert_eq!(t.shape(), &[4, 3]);
        assert_eq!(t.data(), m.data());
    }

    #[test]
    fn fold_rejects_shape_mismatch() {
        let m = ModeMatrix::new(2, 3, 1, vec![0.0; 6]).unwrap();
        let err = mode_fold(&m, 1, &[2, 2, 1]).unwrap_err();
        assert!(matches!(err, TensorError::FoldMismatch { .. }));
    }

    #[test]
    fn flatten_rejects_bad_mode() {
        let t = DenseTensor::<f64>::zeros(&[2, 3, 1]);
        assert!(matches!(
            mode_flatten(&t, 0),
            Err(TensorError::ModeOutOfRange { .. })
        ));
        assert!(matches!(
            mode_flatten(&t, 3),
            Err(TensorError::ModeOutOfRange { .. })
        ));
        let flat = DenseTensor::<f64>::zeros(&[4]);
        assert!(matches!(
            mode_flatten(&flat, 1),
            Err(TensorError::RankTooLow { .. })
        ));
    }

    /// Scalar triple-loop reference for one matrix product.
    fn naive_matmul(a: &[f64], b: &[f64], p: usize, q: usize, r: usize) -> Vec<f64> {
        let mut out = vec![0.0; p * r];
        for i in 0..p {
            for j in 0..r {
                let mut acc = 0.0;
                for k in 0..q {
                    acc += a[i * q + k] * b[k * r + j];
                }
                out[i * r + j] = acc;
            }
        }
        out
    }

    #[test]
    fn matmul_identity() {
        let eye = ModeMatrix::new(1, 2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = ModeMatrix::new(3, 2, 4, (0..24).map(|i| i as f64).collect()).unwrap();
        let out = batched_matmul(&eye, &m).unwrap();
        assert_eq!(out.data(), m.data());
    }

    #[test]
    fn matmul_one_by_one_is_elementwise() {
        let a = ModeMatrix::new(4, 1, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = ModeMatrix::new(4, 1, 1, vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let out = batched_matmul(&a, &b).unwrap();
        assert_eq!(out.data(), &[5.0, 12.0, 21.0, 32.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let (b, p, q, r) = (
                rng.gen_range(1..4usize),
                rng.gen_range(1..9usize),
                rng.gen_range(1..9usize),
                rng.gen_range(1..9usize),
            );
            let a_data: Vec<f64> = (0..b * p * q).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let b_data: Vec<f64> = (0..b * q * r).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let a = ModeMatrix::new(b, p, q, a_data).unwrap();
            let bm = ModeMatrix::new(b, q, r, b_data).unwrap();
            let got = batched_matmul(&a, &bm).unwrap();
            for bi in 0..b {
                let expect = naive_matmul(a.slice(bi), bm.slice(bi), p, q, r);
                for (g, e) in got.slice(bi).iter().zip(expect.iter()) {
                    assert!((g - e).abs() <= 1e-12, "got {g}, expected {e}");
                }
            }
        }
    }

    #[test]
    fn matmul_transpose_b_matches_explicit_transpose() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let a_data: Vec<f64> = (0..2 * 3 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b_data: Vec<f64> = (0..2 * 5 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a = ModeMatrix::new(2, 3, 4, a_data).unwrap();
        let b = ModeMatrix::new(2, 5, 4, b_data).unwrap();
        let direct = batched_matmul_transpose_b(&a, &b).unwrap();
        let via_transpose = batched_matmul(&a, &b.transpose_slices()).unwrap();
        assert!(direct.max_abs_diff(&via_transpose) <= 1e-12);
    }

    #[test]
    fn matmul_rejects_dimension_mismatch() {
        let a = ModeMatrix::<f64>::zeros(1, 2, 3);
        let b = ModeMatrix::<f64>::zeros(1, 4, 2);
        assert!(matches!(
            batched_matmul(&a, &b),
            Err(TensorError::MatmulMismatch { .. })
        ));
        let c = ModeMatrix::<f64>::zeros(3, 3, 2);
        assert!(matches!(
            batched_matmul(&ModeMatrix::<f64>::zeros(2, 2, 3), &c),
            Err(TensorError::MatmulMismatch { .. })
        ));
    }

    #[test]
    fn threaded_matmul_matches_single_thread() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let a_data: Vec<f64> = (0..8 * 64 * 64).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b_data: Vec<f64> = (0..8 * 64 * 64).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a = ModeMatrix::new(8, 64, 64, a_data).unwrap();
        let b = ModeMatrix::new(8, 64, 64, b_data).unwrap();
        let single = batched_matmul(&a, &b).unwrap();
        set_max_threads(4);
        let multi = batched_matmul(&a, &b).unwrap();
        set_max_threads(1);
        assert_eq!(single.data(), multi.data(), "threading changed results");
    }

    #[test]
    fn softmax_symmetric_row() {
        let m = ModeMatrix::new(1, 1, 2, vec![0.0, 0.0]).unwrap();
        let s = row_softmax(&m).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_closed_form() {
        let m = ModeMatrix::new(1, 1, 2, vec![std::f64::consts::LN_2, 0.0]).unwrap();
        let s = row_softmax(&m).unwrap();
        assert!((s.data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.data()[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_large_inputs_do_not_overflow() {
        let m = ModeMatrix::new(1, 1, 2, vec![1000.0f32, 1000.0]).unwrap();
        let s = row_softmax(&m).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_positive() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let data: Vec<f64> = (0..3 * 5 * 6).map(|_| rng.gen_range(-30.0..30.0)).collect();
        let m = ModeMatrix::new(3, 5, 6, data).unwrap();
        let s = row_softmax(&m).unwrap();
        for b in 0..3 {
            for r in 0..5 {
                let row = &s.slice(b)[r * 6..(r + 1) * 6];
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() <= 1e-6);
                assert!(row.iter().all(|&v| v > 0.0 && v <= 1.0));
            }
        }
    }

    #[test]
    fn softmax_rejects_nan_and_all_masked_rows() {
        let m = ModeMatrix::new(1, 1, 2, vec![f64::NAN, 0.0]).unwrap();
        assert!(matches!(
            row_softmax(&m),
            Err(TensorError::NanInput { .. })
        ));
        let m = ModeMatrix::new(1, 1, 2, vec![f64::NEG_INFINITY, f64::NEG_INFINITY]).unwrap();
        assert!(matches!(
            row_softmax(&m),
            Err(TensorError::UnnormalizableRow { batch: 0, row: 0 })
        ));
    }

    #[test]
    fn masked_entries_become_exact_zero() {
        let m = ModeMatrix::new(1, 1, 3, vec![1.0, f64::NEG_INFINITY, 2.0]).unwrap();
        let s = row_softmax(&m).unwrap();
        assert_eq!(s.data()[1], 0.0);
        assert!((s.data()[0] + s.data()[2] - 1.0).abs() < 1e-15);
    }
}
