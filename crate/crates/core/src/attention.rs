//! Kronecker-decomposed attention.
//!
//! A sequence of length `n = n_1 * ... * n_m` is reshaped into an order-m
//! tensor and attention is applied level by level: for each mode i the
//! queries and keys are mode-i flattened, an `n_i x n_i` attention matrix is
//! formed per batch slice (or one shared matrix from mean-pooled slices),
//! and the running value tensor is updated along that mode. With shared
//! factors the composite operator equals the Kronecker product of the
//! per-level matrices, which [`materialize_operator`] and [`kron_product`]
//! cross-check.
//!
//! Two factor modes ship:
//!
//! - `Batched`: each level's attention matrix varies with the other
//!   coordinates (one matrix per batch slice). This is the literal
//!   per-level flattening of the true queries/keys.
//! - `Shared`: queries/keys are mean-pooled over the batch axis first, so
//!   each level has a single matrix and the composite operator is exactly
//!   `A_1 (x) ... (x) A_m`. Only this mode is order-invariant.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::tensor::{
    batched_matmul, batched_matmul_transpose_b, mode_flatten, mode_fold, row_softmax_in_place,
    DenseTensor, ModeMatrix, TensorError,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttentionError {
    #[error("decomposition plan has no factors")]
    EmptyPlan,
    #[error("decomposition plan factor {0} must be >= 1")]
    ZeroFactor(usize),
    #[error("update order {0:?} is not a permutation of 1..={1}")]
    BadUpdateOrder(Vec<usize>, usize),
    #[error("sequence length {got} does not match plan length {expected}")]
    SeqLenMismatch { expected: usize, got: usize },
    #[error("input feature width {got} does not match configured head_dim {expected}")]
    HeadDimMismatch { expected: usize, got: usize },
    #[error("{what} has shape {got:?}, expected {expected:?}")]
    ShapeMismatch {
        what: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("mask for mode {mode} is {got}x{got}, expected {expected}x{expected}")]
    MaskSizeMismatch {
        mode: usize,
        expected: usize,
        got: usize,
    },
    #[error("mask row {row} allows no entries")]
    FullyMaskedRow { row: usize },
    #[error("{count} masks supplied for a {modes}-mode plan")]
    MaskCountMismatch { count: usize, modes: usize },
    #[error("Kronecker factor {index} is {rows}x{cols}, not square")]
    NonSquareFactor {
        index: usize,
        rows: usize,
        cols: usize,
    },
    #[error("Kronecker product needs at least one factor")]
    NoFactors,
    #[error("gradient shape {got:?} does not match forward output {expected:?}")]
    GradShapeMismatch {
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Whether each level's attention matrix varies per batch slice or is a
/// single matrix shared by all slices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FactorMode {
    Batched,
    Shared,
}

/// The level sizes `(n_1, ..., n_m)`, the order in which levels update the
/// value tensor, and the factor-sharing mode.
///
/// Mode 1 is the top (longest-range) level; mode m indexes adjacent
/// positions. `seq_len` is the product of the factors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecompositionPlan {
    factors: Vec<usize>,
    update_order: Vec<usize>,
    factor_mode: FactorMode,
}

impl DecompositionPlan {
    /// Plan with ascending update order and batched factors.
    pub fn new(factors: Vec<usize>) -> Result<Self, AttentionError> {
        if factors.is_empty() {
            return Err(AttentionError::EmptyPlan);
        }
        if let Some(&f) = factors.iter().find(|&&f| f == 0) {
            return Err(AttentionError::ZeroFactor(f));
        }
        let update_order = (1..=factors.len()).collect();
        Ok(Self {
            factors,
            update_order,
            factor_mode: FactorMode::Batched,
        })
    }

    pub fn with_factor_mode(mut self, mode: FactorMode) -> Self {
        self.factor_mode = mode;
        self
    }

    pub fn with_update_order(mut self, order: Vec<usize>) -> Result<Self, AttentionError> {
        let m = self.factors.len();
        let mut seen = vec![false; m + 1];
        let valid = order.len() == m
            && order.iter().all(|&i| {
                if i == 0 || i > m || seen[i] {
                    false
                } else {
                    seen[i] = true;
                    true
                }
            });
        if !valid {
            return Err(AttentionError::BadUpdateOrder(order, m));
        }
        self.update_order = order;
        Ok(self)
    }

    pub fn factors(&self) -> &[usize] {
        &self.factors
    }

    pub fn num_modes(&self) -> usize {
        self.factors.len()
    }

    pub fn seq_len(&self) -> usize {
        self.factors.iter().product()
    }

    pub fn update_order(&self) -> &[usize] {
        &self.update_order
    }

    pub fn factor_mode(&self) -> FactorMode {
        self.factor_mode
    }

    /// Batch count for mode i: the product of every other factor.
    pub fn batch_count(&self, mode: usize) -> usize {
        self.seq_len() / self.factors[mode - 1]
    }

    /// Tensor shape for sequences under this plan: factors plus a trailing
    /// feature width.
    pub fn tensor_shape(&self, d: usize) -> Vec<usize> {
        let mut shape = self.factors.clone();
        shape.push(d);
        shape
    }
}

impl fmt::Display for DecompositionPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.factors.iter().map(|n| n.to_string()).collect();
        write!(f, "{}", parts.join("x"))
    }
}

impl FromStr for DecompositionPlan {
    type Err = AttentionError;

    /// Parse factor lists like `"32x32"` or `"16x4x4x4"`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let factors = s
            .split('x')
            .map(|p| p.trim().parse::<usize>().map_err(|_| AttentionError::ZeroFactor(0)))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(factors)
    }
}

/// Per-mode boolean attention mask. `allowed[r * size + c]` states whether
/// row r may attend to column c; every row must allow at least one entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModeMask {
    size: usize,
    allowed: Vec<bool>,
}

impl ModeMask {
    pub fn new(size: usize, allowed: Vec<bool>) -> Result<Self, AttentionError> {
        if allowed.len() != size * size {
            return Err(AttentionError::MaskSizeMismatch {
                mode: 0,
                expected: size,
                got: allowed.len() / size.max(1),
            });
        }
        for r in 0..size {
            if !allowed[r * size..(r + 1) * size].iter().any(|&a| a) {
                return Err(AttentionError::FullyMaskedRow { row: r });
            }
        }
        Ok(Self { size, allowed })
    }

    pub fn identity(size: usize) -> Self {
        let mut allowed = vec![false; size * size];
        for i in 0..size {
            allowed[i * size + i] = true;
        }
        Self { size, allowed }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn is_allowed(&self, row: usize, col: usize) -> bool {
        self.allowed[row * self.size + col]
    }
}

/// Head width and optional per-mode masks for the decomposed attention.
#[derive(Debug, Clone, Default)]
pub struct AttentionConfig {
    head_dim: usize,
    masks: Vec<Option<ModeMask>>,
}

impl AttentionConfig {
    pub fn new(head_dim: usize) -> Self {
        Self {
            head_dim,
            masks: Vec::new(),
        }
    }

    /// Attach per-mode masks; the list length must equal the plan's mode
    /// count when the config is used.
    pub fn with_masks(mut self, masks: Vec<Option<ModeMask>>) -> Self {
        self.masks = masks;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn mask(&self, mode: usize) -> Option<&ModeMask> {
        self.masks.get(mode - 1).and_then(|m| m.as_ref())
    }

    fn validate(&self, plan: &DecompositionPlan) -> Result<(), AttentionError> {
        if !self.masks.is_empty() && self.masks.len() != plan.num_modes() {
            return Err(AttentionError::MaskCountMismatch {
                count: self.masks.len(),
                modes: plan.num_modes(),
            });
        }
        for (idx, mask) in self.masks.iter().enumerate() {
            if let Some(m) = mask {
                let expected = plan.factors()[idx];
                if m.size() != expected {
                    return Err(AttentionError::MaskSizeMismatch {
                        mode: idx + 1,
                        expected,
                        got: m.size(),
                    });
                }
            }
        }
        Ok(())
    }
}

/// The per-level attention matrices `A_i` for one (q, k, plan) triple.
///
/// Entry i-1 holds mode i's matrix: `(B_i, n_i, n_i)` in batched mode or
/// `(1, n_i, n_i)` in shared mode.
#[derive(Debug, Clone)]
pub struct FactorAttentionSet<T> {
    per_mode: Vec<ModeMatrix<T>>,
}

impl<T: Scalar> FactorAttentionSet<T> {
    /// Compute every mode's attention matrix from tensorized queries/keys.
    pub fn compute(
        q_tensor: &DenseTensor<T>,
        k_tensor: &DenseTensor<T>,
        plan: &DecompositionPlan,
        cfg: &AttentionConfig,
    ) -> Result<Self, AttentionError> {
        let per_mode = (1..=plan.num_modes())
            .map(|mode| factor_attention(q_tensor, k_tensor, plan, cfg, mode))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { per_mode })
    }

    pub fn factor(&self, mode: usize) -> &ModeMatrix<T> {
        &self.per_mode[mode - 1]
    }

    pub fn num_modes(&self) -> usize {
        self.per_mode.len()
    }
}

fn check_qk_tensors<T: Scalar>(
    q_tensor: &DenseTensor<T>,
    k_tensor: &DenseTensor<T>,
    plan: &DecompositionPlan,
    cfg: &AttentionConfig,
) -> Result<(), AttentionError> {
    let expected = plan.tensor_shape(cfg.head_dim());
    if q_tensor.shape() != expected.as_slice() {
        return Err(AttentionError::ShapeMismatch {
            what: "q tensor",
            expected,
            got: q_tensor.shape().to_vec(),
        });
    }
    if k_tensor.shape() != expected.as_slice() {
        return Err(AttentionError::ShapeMismatch {
            what: "k tensor",
            expected,
            got: k_tensor.shape().to_vec(),
        });
    }
    cfg.validate(plan)
}

fn apply_mask_in_place<T: Scalar>(scores: &mut ModeMatrix<T>, mask: &ModeMask) {
    let (batch, rows, cols) = (scores.batch(), scores.rows(), scores.cols());
    for b in 0..batch {
        let slice = scores.slice_mut(b);
        for r in 0..rows {
            for c in 0..cols {
                if !mask.is_allowed(r, c) {
                    slice[r * cols + c] = T::neg_infinity();
                }
            }
        }
    }
}

fn scale_in_place<T: Scalar>(m: &mut ModeMatrix<T>, s: T) {
    for v in m.data_mut() {
        *v *= s;
    }
}

/// Mode-i attention matrix per Eq.-4-style scoring: mode-i flatten the
/// query/key tensors, scale scores by `1/sqrt(d)`, apply the mode's mask
/// and row-softmax.
///
/// Batched mode yields one `n_i x n_i` matrix per batch slice; shared mode
/// mean-pools the flattened slices first and yields a single matrix.
pub fn factor_attention<T: Scalar>(
    q_tensor: &DenseTensor<T>,
    k_tensor: &DenseTensor<T>,
    plan: &DecompositionPlan,
    cfg: &AttentionConfig,
    mode: usize,
) -> Result<ModeMatrix<T>, AttentionError> {
    check_qk_tensors(q_tensor, k_tensor, plan, cfg)?;
    if mode == 0 || mode > plan.num_modes() {
        return Err(AttentionError::Tensor(TensorError::ModeOutOfRange {
            mode,
            num_modes: plan.num_modes(),
        }));
    }
    let qi = mode_flatten(q_tensor, mode)?;
    let ki = mode_flatten(k_tensor, mode)?;
    let (qi, ki) = match plan.factor_mode() {
        FactorMode::Batched => (qi, ki),
        FactorMode::Shared => (qi.mean_over_batch(), ki.mean_over_batch()),
    };
    let mut scores = batched_matmul_transpose_b(&qi, &ki)?;
    scale_in_place(&mut scores, T::from_f64(1.0 / (cfg.head_dim() as f64).sqrt()));
    if let Some(mask) = cfg.mask(mode) {
        apply_mask_in_place(&mut scores, mask);
    }
    row_softmax_in_place(&mut scores)?;
    Ok(scores)
}

fn check_flat_inputs<T: Scalar>(
    q: &DenseTensor<T>,
    k: &DenseTensor<T>,
    v: &DenseTensor<T>,
    plan: &DecompositionPlan,
    cfg: &AttentionConfig,
) -> Result<(usize, usize, usize), AttentionError> {
    if q.rank() != 2 {
        return Err(AttentionError::ShapeMismatch {
            what: "q",
            expected: vec![plan.seq_len(), cfg.head_dim()],
            got: q.shape().to_vec(),
        });
    }
    let (n, d) = (q.shape()[0], q.shape()[1]);
    if k.shape() != q.shape() {
        return Err(AttentionError::ShapeMismatch {
            what: "k",
            expected: q.shape().to_vec(),
            got: k.shape().to_vec(),
        });
    }
    if v.rank() != 2 || v.shape()[0] != n {
        return Err(AttentionError::ShapeMismatch {
            what: "v",
            expected: vec![n, v.shape().last().copied().unwrap_or(0)],
            got: v.shape().to_vec(),
        });
    }
    if d != cfg.head_dim() {
        return Err(AttentionError::HeadDimMismatch {
            expected: cfg.head_dim(),
            got: d,
        });
    }
    if n != plan.seq_len() {
        return Err(AttentionError::SeqLenMismatch {
            expected: plan.seq_len(),
            got: n,
        });
    }
    cfg.validate(plan)?;
    Ok((n, d, v.shape()[1]))
}

/// Reference dense attention: `o = softmax(q k^T / sqrt(d)) v`.
///
/// `q` and `k` must share a shape `(n, d)`; `v` is `(n, d_v)` with any
/// feature width.
pub fn full_attention<T: Scalar>(
    q: &DenseTensor<T>,
    k: &DenseTensor<T>,
    v: &DenseTensor<T>,
) -> Result<DenseTensor<T>, AttentionError> {
    if q.rank() != 2 || k.shape() != q.shape() || v.rank() != 2 || v.shape()[0] != q.shape()[0] {
        return Err(AttentionError::ShapeMismatch {
            what: "q/k/v",
            expected: q.shape().to_vec(),
            got: if k.shape() != q.shape() {
                k.shape().to_vec()
            } else {
                v.shape().to_vec()
            },
        });
    }
    let (n, d) = (q.shape()[0], q.shape()[1]);
    let dv = v.shape()[1];
    let qm = ModeMatrix::new(1, n, d, q.data().to_vec())?;
    let km = ModeMatrix::new(1, n, d, k.data().to_vec())?;
    let vm = ModeMatrix::new(1, n, dv, v.data().to_vec())?;
    let mut scores = batched_matmul_transpose_b(&qm, &km)?;
    scale_in_place(&mut scores, T::from_f64(1.0 / (d as f64).sqrt()));
    row_softmax_in_place(&mut scores)?;
    let out = batched_matmul(&scores, &vm)?;
    DenseTensor::new(vec![n, dv], out.data().to_vec()).map_err(Into::into)
}

struct StepRecord<T> {
    mode: usize,
    attn: ModeMatrix<T>,
    value_in: ModeMatrix<T>,
}

/// Intermediates saved by [`kron_attention_forward_cached`] for the
/// backward pass: the tensorized queries/keys and, per update step, the
/// attention matrix and the flattened value input it multiplied.
pub struct AttentionCache<T> {
    plan: DecompositionPlan,
    head_dim: usize,
    q_tensor: DenseTensor<T>,
    k_tensor: DenseTensor<T>,
    value_shape: Vec<usize>,
    steps: Vec<StepRecord<T>>,
}

/// Gradients of the decomposed attention with respect to its three inputs.
pub struct AttentionGrads<T> {
    pub grad_q: DenseTensor<T>,
    pub grad_k: DenseTensor<T>,
    pub grad_v: DenseTensor<T>,
}

fn forward_impl<T: Scalar>(
    q: &DenseTensor<T>,
    k: &DenseTensor<T>,
    v: &DenseTensor<T>,
    plan: &DecompositionPlan,
    cfg: &AttentionConfig,
    mut record: Option<&mut Vec<StepRecord<T>>>,
) -> Result<DenseTensor<T>, AttentionError> {
    let (n, d, dv) = check_flat_inputs(q, k, v, plan, cfg)?;
    let q_tensor = q.clone().reshape(&plan.tensor_shape(d))?;
    let k_tensor = k.clone().reshape(&plan.tensor_shape(d))?;
    let value_shape = plan.tensor_shape(dv);
    let mut out = v.clone().reshape(&value_shape)?;
    for &mode in plan.update_order() {
        let attn = factor_attention(&q_tensor, &k_tensor, plan, cfg, mode)?;
        let value_in = mode_flatten(&out, mode)?;
        let updated = batched_matmul(&attn, &value_in)?;
        out = mode_fold(&updated, mode, &value_shape)?;
        if let Some(steps) = record.as_deref_mut() {
            steps.push(StepRecord {
                mode,
                attn,
                value_in,
            });
        }
    }
    out.reshape(&[n, dv]).map_err(Into::into)
}

/// Sequential Kronecker-decomposed attention forward pass.
///
/// Tensorizes `q`, `k`, `v` to the plan shape, initializes the output with
/// the values, then for each mode in update order computes that level's
/// attention matrix and updates the value tensor along the mode. A
/// single-factor plan reproduces [`full_attention`].
pub fn kron_attention_forward<T: Scalar>(
    q: &DenseTensor<T>,
    k: &DenseTensor<T>,
    v: &DenseTensor<T>,
    plan: &DecompositionPlan,
    cfg: &AttentionConfig,
) -> Result<DenseTensor<T>, AttentionError> {
    forward_impl(q, k, v, plan, cfg, None)
}

/// Forward pass that also returns the cache consumed by
/// [`kron_attention_backward`].
pub fn kron_attention_forward_cached<T: Scalar>(
    q: &DenseTensor<T>,
    k: &DenseTensor<T>,
    v: &DenseTensor<T>,
    plan: &DecompositionPlan,
    cfg: &AttentionConfig,
) -> Result<(DenseTensor<T>, AttentionCache<T>), AttentionError> {
    let (_, d, dv) = check_flat_inputs(q, k, v, plan, cfg)?;
    let mut steps = Vec::with_capacity(plan.num_modes());
    let out = forward_impl(q, k, v, plan, cfg, Some(&mut steps))?;
    let cache = AttentionCache {
        plan: plan.clone(),
        head_dim: d,
        q_tensor: q.clone().reshape(&plan.tensor_shape(d))?,
        k_tensor: k.clone().reshape(&plan.tensor_shape(d))?,
        value_shape: plan.tensor_shape(dv),
        steps,
    };
    Ok((out, cache))
}

/// Row-wise softmax Jacobian application: given `a = softmax(z)` and
/// `da = dL/da`, returns `dL/dz = a * (da - sum(a * da))` per row.
fn softmax_backward<T: Scalar>(a: &ModeMatrix<T>, da: &ModeMatrix<T>) -> ModeMatrix<T> {
    let (batch, rows, cols) = (a.batch(), a.rows(), a.cols());
    let mut out = ModeMatrix::zeros(batch, rows, cols);
    for b in 0..batch {
        let (sa, sda) = (a.slice(b), da.slice(b));
        let so = out.slice_mut(b);
        for r in 0..rows {
            let off = r * cols;
            let mut dot = T::zero();
            for c in 0..cols {
                dot += sa[off + c] * sda[off + c];
            }
            for c in 0..cols {
                so[off + c] = sa[off + c] * (sda[off + c] - dot);
            }
        }
    }
    out
}

fn sum_over_batch<T: Scalar>(m: &ModeMatrix<T>) -> ModeMatrix<T> {
    let stride = m.rows() * m.cols();
    let mut out = vec![T::zero(); stride];
    for b in 0..m.batch() {
        for (o, s) in out.iter_mut().zip(m.slice(b).iter()) {
            *o += *s;
        }
    }
    ModeMatrix::new(1, m.rows(), m.cols(), out).expect("sum_over_batch shape")
}

fn replicate_batches<T: Scalar>(m: &ModeMatrix<T>, batch: usize) -> ModeMatrix<T> {
    let mut data = Vec::with_capacity(batch * m.rows() * m.cols());
    for _ in 0..batch {
        data.extend_from_slice(m.slice(0));
    }
    ModeMatrix::new(batch, m.rows(), m.cols(), data).expect("replicate shape")
}

fn add_assign<T: Scalar>(dst: &mut DenseTensor<T>, src: &DenseTensor<T>) {
    debug_assert_eq!(dst.shape(), src.shape());
    for (d, s) in dst.data_mut().iter_mut().zip(src.data().iter()) {
        *d += *s;
    }
}

/// Reverse-mode gradients for [`kron_attention_forward_cached`].
///
/// Walks the update steps in reverse, propagating the value gradient
/// through each mode's attention matrix and accumulating query/key
/// gradients through the softmax-score Jacobian.
pub fn kron_attention_backward<T: Scalar>(
    cache: &AttentionCache<T>,
    grad_o: &DenseTensor<T>,
) -> Result<AttentionGrads<T>, AttentionError> {
    let plan = &cache.plan;
    let n = plan.seq_len();
    let dv = *cache.value_shape.last().expect("value shape");
    if grad_o.shape() != [n, dv] {
        return Err(AttentionError::GradShapeMismatch {
            expected: vec![n, dv],
            got: grad_o.shape().to_vec(),
        });
    }
    let d = cache.head_dim;
    let inv_sqrt_d = T::from_f64(1.0 / (d as f64).sqrt());
    let qk_shape = plan.tensor_shape(d);
    let mut grad_q_tensor = DenseTensor::zeros(&qk_shape);
    let mut grad_k_tensor = DenseTensor::zeros(&qk_shape);
    let mut grad_value = grad_o.clone().reshape(&cache.value_shape)?;

    for step in cache.steps.iter().rev() {
        let mode = step.mode;
        let grad_out_flat = mode_flatten(&grad_value, mode)?;
        // Value path: dL/d(value_in) = A^T dL/d(value_out).
        let grad_value_in = batched_matmul(&step.attn.transpose_slices(), &grad_out_flat)?;
        // Attention path: dL/dA = dL/d(value_out) value_in^T, summed over
        // the batch when the factor is shared.
        let grad_attn_full = batched_matmul_transpose_b(&grad_out_flat, &step.value_in)?;
        let grad_attn = match plan.factor_mode() {
            FactorMode::Batched => grad_attn_full,
            FactorMode::Shared => sum_over_batch(&grad_attn_full),
        };
        let mut grad_scores = softmax_backward(&step.attn, &grad_attn);
        scale_in_place(&mut grad_scores, inv_sqrt_d);

        let qi = mode_flatten(&cache.q_tensor, mode)?;
        let ki = mode_flatten(&cache.k_tensor, mode)?;
        match plan.factor_mode() {
            FactorMode::Batched => {
                let dqi = batched_matmul(&grad_scores, &ki)?;
                let dki = batched_matmul(&grad_scores.transpose_slices(), &qi)?;
                add_assign(&mut grad_q_tensor, &mode_fold(&dqi, mode, &qk_shape)?);
                add_assign(&mut grad_k_tensor, &mode_fold(&dki, mode, &qk_shape)?);
            }
            FactorMode::Shared => {
                // Pooling averaged the slices, so each slice receives an
                // equal share of the pooled gradient.
                let batch = plan.batch_count(mode);
                let share = T::from_f64(1.0 / batch as f64);
                let qp = qi.mean_over_batch();
                let kp = ki.mean_over_batch();
                let mut dqp = batched_matmul(&grad_scores, &kp)?;
                let mut dkp = batched_matmul(&grad_scores.transpose_slices(), &qp)?;
                scale_in_place(&mut dqp, share);
                scale_in_place(&mut dkp, share);
                let dqi = replicate_batches(&dqp, batch);
                let dki = replicate_batches(&dkp, batch);
                add_assign(&mut grad_q_tensor, &mode_fold(&dqi, mode, &qk_shape)?);
                add_assign(&mut grad_k_tensor, &mode_fold(&dki, mode, &qk_shape)?);
            }
        }
        grad_value = mode_fold(&grad_value_in, mode, &cache.value_shape)?;
    }

    Ok(AttentionGrads {
        grad_q: grad_q_tensor.reshape(&[n, d])?,
        grad_k: grad_k_tensor.reshape(&[n, d])?,
        grad_v: grad_value.reshape(&[n, dv])?,
    })
}

/// Kronecker product of square factors, left factor most significant:
/// `out[(i_1 i_2...), (j_1 j_2...)] = prod_i A_i[i_i, j_i]` under row-major
/// digit encoding, so sequential shared-factor mode updates equal applying
/// this matrix to the row-major-vectorized values.
pub fn kron_product<T: Scalar>(
    factors: &[DenseTensor<T>],
) -> Result<DenseTensor<T>, AttentionError> {
    if factors.is_empty() {
        return Err(AttentionError::NoFactors);
    }
    for (index, f) in factors.iter().enumerate() {
        if f.rank() != 2 || f.shape()[0] != f.shape()[1] {
            return Err(AttentionError::NonSquareFactor {
                index,
                rows: f.shape().first().copied().unwrap_or(0),
                cols: f.shape().last().copied().unwrap_or(0),
            });
        }
    }
    let mut acc = factors[0].clone();
    for f in &factors[1..] {
        let (a, b) = (acc.shape()[0], f.shape()[0]);
        let n = a * b;
        let mut data = vec![T::zero(); n * n];
        for i1 in 0..a {
            for j1 in 0..a {
                let scale = acc.data()[i1 * a + j1];
                for i2 in 0..b {
                    for j2 in 0..b {
                        data[(i1 * b + i2) * n + (j1 * b + j2)] =
                            scale * f.data()[i2 * b + j2];
                    }
                }
            }
        }
        acc = DenseTensor::new(vec![n, n], data)?;
    }
    Ok(acc)
}

/// Materialize the decomposed attention as an explicit `n x n` operator by
/// running one forward pass per standard basis vector (single value
/// channel). The forward map is linear in the values, so `M v` equals the
/// forward output for every `v` by construction.
pub fn materialize_operator<T: Scalar>(
    q: &DenseTensor<T>,
    k: &DenseTensor<T>,
    plan: &DecompositionPlan,
    cfg: &AttentionConfig,
) -> Result<DenseTensor<T>, AttentionError> {
    let n = plan.seq_len();
    let mut out = DenseTensor::zeros(&[n, n]);
    for j in 0..n {
        let mut basis = DenseTensor::zeros(&[n, 1]);
        basis.data_mut()[j] = T::one();
        let col = kron_attention_forward(q, k, &basis, plan, cfg)?;
        for i in 0..n {
            out.data_mut()[i * n + j] = col.data()[i];
        }
    }
    Ok(out)
}

/// Analytic multiply-add costs (counted as 2 flops each) for the score and
/// value products of one attention forward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopCount {
    /// Score flops for the decomposed pass: `sum_i 2 n n_i d`.
    pub kron_score_flops: u128,
    /// Score plus value flops for the decomposed pass: `sum_i 4 n n_i d`.
    pub kron_total_flops: u128,
    /// Score flops for full attention: `2 n^2 d`.
    pub full_score_flops: u128,
    /// Score plus value flops for full attention: `4 n^2 d`.
    pub full_total_flops: u128,
}

/// Exact integer flop counts for a plan versus full attention at the same
/// length and head width.
pub fn flop_count(plan: &DecompositionPlan, head_dim: usize) -> FlopCount {
    let n = plan.seq_len() as u128;
    let d = head_dim as u128;
    let kron_score_flops: u128 = plan
        .factors()
        .iter()
        .map(|&ni| 2 * n * ni as u128 * d)
        .sum();
    FlopCount {
        kron_score_flops,
        kron_total_flops: 2 * kron_score_flops,
        full_score_flops: 2 * n * n * d,
        full_total_flops: 4 * n * n * d,
    }
}
