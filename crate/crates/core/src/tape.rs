//! Reverse-mode automatic differentiation over dense 2-D/3-D tensors.
//!
//! A [`Tape`] owns every tensor produced during a forward pass and records
//! which op produced it. [`Tape::backward`] walks the record in exact
//! reverse execution order and accumulates gradients into every tensor
//! that requires them. Tapes are built fresh per step and are confined to
//! one thread; separate tapes may run in parallel.

use crate::real::Real;
use crate::tensor::{Tensor, TensorError, TensorResult};

/// Handle to a tensor on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Val(usize);

/// Padding mode for [`Tape::conv1d_time`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Clone, Debug)]
enum Op<F: Real> {
    Leaf,
    /// a[p,q] @ b[q,r]
    Matmul { a: Val, b: Val },
    /// a[p,q] @ b[r,q]^T
    MatmulNT { a: Val, b: Val },
    Add { a: Val, b: Val },
    Sub { a: Val, b: Val },
    MulElem { a: Val, b: Val },
    Scale { x: Val, c: F },
    /// Row-broadcast bias add: x[t,d] + bias[d]
    AddBias { x: Val, bias: Val },
    Sigmoid { x: Val },
    Gelu { x: Val },
    /// Per-channel PReLU; slope has one entry per column of x.
    Prelu { x: Val, slope: Val },
    SoftmaxRows { x: Val },
    /// ln(max(x, floor)); gradient is zero in the clamped region.
    LogClamped { x: Val, floor: F },
    LayerNormRows { x: Val, gain: Val, bias: Val, eps: F },
    AvgPoolTime { x: Val },
    /// Repeat a 1-row tensor to `rows` rows.
    BroadcastRows { x: Val },
    ConcatTime { xs: Vec<Val> },
    ConcatFeat { xs: Vec<Val> },
    SliceRows { x: Val, start: usize },
    SliceCols { x: Val, start: usize },
    /// Embed x into a zero canvas of `total` rows at row `offset`.
    PadRows { x: Val, offset: usize },
    /// Convolution along the time axis; kernels are [ksize, c_in, c_out].
    Conv1dTime {
        x: Val,
        kernels: Val,
        stride: usize,
        pad_left: usize,
    },
    /// Nearest-neighbor row upsampling by an integer factor.
    UpsampleRows { x: Val, factor: usize },
    SumAll { x: Val },
    /// Negative log-likelihood of `label` read from a probability row.
    NllFromProbs { probs: Val, label: usize, floor: F },
}

struct Node<F: Real> {
    tensor: Tensor<F>,
    op: Op<F>,
    /// True when this node or any ancestor requires gradients.
    needs_grad: bool,
}

pub struct Tape<F: Real> {
    nodes: Vec<Node<F>>,
    backward_done: bool,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an existing tensor as a leaf (input or parameter).
    pub fn leaf(&mut self, tensor: Tensor<F>) -> Val {
        let needs = tensor.requires_grad;
        self.nodes.push(Node {
            tensor,
            op: Op::Leaf,
            needs_grad: needs,
        });
        Val(self.nodes.len() - 1)
    }

    /// Leaf from f64 data, converted to the tape element type.
    pub fn leaf_from_f64(&mut self, shape: Vec<usize>, data: &[f64], requires_grad: bool) -> TensorResult<Val> {
        let mut t = Tensor::<F>::from_f64_slice(shape, data)?;
        t.requires_grad = requires_grad;
        Ok(self.leaf(t))
    }

    pub fn value(&self, v: Val) -> &Tensor<F> {
        &self.nodes[v.0].tensor
    }

    pub fn data(&self, v: Val) -> &[F] {
        &self.nodes[v.0].tensor.data
    }

    pub fn shape(&self, v: Val) -> &[usize] {
        &self.nodes[v.0].tensor.shape
    }

    /// Scalar value of a 1-element tensor.
    pub fn scalar_value(&self, v: Val) -> F {
        debug_assert!(self.nodes[v.0].tensor.is_scalar());
        self.nodes[v.0].tensor.data[0]
    }

    pub fn grad(&self, v: Val) -> Option<&[F]> {
        self.nodes[v.0].tensor.grad.as_deref()
    }

    /// Test hook: overwrites one gradient entry with NaN so abort paths
    /// can be exercised.
    #[cfg(test)]
    pub(crate) fn poison_grad(&mut self, v: Val) {
        if let Some(g) = self.nodes[v.0].tensor.grad.as_mut() {
            g[0] = F::from_f64(f64::NAN);
        }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<F>, op: Op<F>, needs_grad: bool, opname: &'static str) -> TensorResult<Val> {
        let t = Tensor::new(shape, data)?;
        if !t.all_finite() {
            return Err(TensorError::NonFinite { op: opname });
        }
        self.nodes.push(Node {
            tensor: t,
            op,
            needs_grad,
        });
        Ok(Val(self.nodes.len() - 1))
    }

    fn needs(&self, v: Val) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn dims2(&self, v: Val, op: &'static str) -> TensorResult<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op,
                detail: format!("expected 2-D tensor, got shape {s:?}"),
            });
        }
        Ok((s[0], s[1]))
    }

    // ── Forward ops ──────────────────────────────────────────────────

    /// Standard matrix product a[p,q] @ b[q,r].
    pub fn matmul(&mut self, a: Val, b: Val) -> TensorResult<Val> {
        let (p, q) = self.dims2(a, "matmul")?;
        let (q2, r) = self.dims2(b, "matmul")?;
        if q != q2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                detail: format!("inner dimensions disagree: {p}x{q} @ {q2}x{r}"),
            });
        }
        let mut out = vec![F::ZERO; p * r];
        mm_nn_acc(&mut out, self.data(a), self.data(b), p, q, r);
        let needs = self.needs(a) || self.needs(b);
        self.push(vec![p, r], out, Op::Matmul { a, b }, needs, "matmul")
    }

    /// a[p,q] @ b[r,q]^T; used for attention scores without materializing
    /// a transpose.
    pub fn matmul_nt(&mut self, a: Val, b: Val) -> TensorResult<Val> {
        let (p, q) = self.dims2(a, "matmul_nt")?;
        let (r, q2) = self.dims2(b, "matmul_nt")?;
        if q != q2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_nt",
                detail: format!("inner dimensions disagree: {p}x{q} @ ({r}x{q2})^T"),
            });
        }
        let mut out = vec![F::ZERO; p * r];
        mm_nt_acc(&mut out, self.data(a), self.data(b), p, q, r);
        let needs = self.needs(a) || self.needs(b);
        self.push(vec![p, r], out, Op::MatmulNT { a, b }, needs, "matmul_nt")
    }

    fn same_shape(&self, a: Val, b: Val, op: &'static str) -> TensorResult<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Val, b: Val) -> TensorResult<Val> {
        self.same_shape(a, b, "add")?;
        let data: Vec<F> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        self.push(self.shape(a).to_vec(), data, Op::Add { a, b }, needs, "add")
    }

    pub fn sub(&mut self, a: Val, b: Val) -> TensorResult<Val> {
        self.same_shape(a, b, "sub")?;
        let data: Vec<F> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x - y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        self.push(self.shape(a).to_vec(), data, Op::Sub { a, b }, needs, "sub")
    }

    pub fn mul_elementwise(&mut self, a: Val, b: Val) -> TensorResult<Val> {
        self.same_shape(a, b, "mul_elementwise")?;
        let data: Vec<F> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        self.push(self.shape(a).to_vec(), data, Op::MulElem { a, b }, needs, "mul_elementwise")
    }

    pub fn scale(&mut self, x: Val, c: F) -> TensorResult<Val> {
        let data: Vec<F> = self.data(x).iter().map(|&v| v * c).collect();
        let needs = self.needs(x);
        self.push(self.shape(x).to_vec(), data, Op::Scale { x, c }, needs, "scale")
    }

    /// x[t,d] + bias broadcast over rows; bias has d entries.
    pub fn add_bias(&mut self, x: Val, bias: Val) -> TensorResult<Val> {
        let (t, d) = self.dims2(x, "add_bias")?;
        if self.value(bias).numel() != d {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                detail: format!("bias numel {} vs feature dim {d}", self.value(bias).numel()),
            });
        }
        let xd = self.data(x);
        let bd = self.data(bias);
        let mut data = vec![F::ZERO; t * d];
        for i in 0..t {
            for j in 0..d {
                data[i * d + j] = xd[i * d + j] + bd[j];
            }
        }
        let needs = self.needs(x) || self.needs(bias);
        self.push(vec![t, d], data, Op::AddBias { x, bias }, needs, "add_bias")
    }

    /// Per-timestep affine map x @ w + b.
    pub fn affine(&mut self, x: Val, w: Val, b: Val) -> TensorResult<Val> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    pub fn sigmoid(&mut self, x: Val) -> TensorResult<Val> {
        let data: Vec<F> = self.data(x).iter().map(|&v| sigmoid_stable(v)).collect();
        let needs = self.needs(x);
        self.push(self.shape(x).to_vec(), data, Op::Sigmoid { x }, needs, "sigmoid")
    }

    pub fn gelu(&mut self, x: Val) -> TensorResult<Val> {
        let data: Vec<F> = self.data(x).iter().map(|&v| gelu_tanh(v)).collect();
        let needs = self.needs(x);
        self.push(self.shape(x).to_vec(), data, Op::Gelu { x }, needs, "gelu")
    }

    /// PReLU with a learnable slope per channel (column).
    pub fn prelu(&mut self, x: Val, slope: Val) -> TensorResult<Val> {
        let (t, d) = self.dims2(x, "prelu")?;
        if self.value(slope).numel() != d {
            return Err(TensorError::ShapeMismatch {
                op: "prelu",
                detail: format!("slope numel {} vs channels {d}", self.value(slope).numel()),
            });
        }
        let xd = self.data(x);
        let sd = self.data(slope);
        let mut data = vec![F::ZERO; t * d];
        for i in 0..t {
            for j in 0..d {
                let v = xd[i * d + j];
                data[i * d + j] = if v > F::ZERO { v } else { sd[j] * v };
            }
        }
        let needs = self.needs(x) || self.needs(slope);
        self.push(vec![t, d], data, Op::Prelu { x, slope }, needs, "prelu")
    }

    /// Row-wise softmax, stabilized by row-max subtraction.
    pub fn softmax_rows(&mut self, x: Val) -> TensorResult<Val> {
        let (t, d) = self.dims2(x, "softmax_rows")?;
        let xd = self.data(x);
        let mut data = vec![F::ZERO; t * d];
        for i in 0..t {
            let row = &xd[i * d..(i + 1) * d];
            let mut m = row[0];
            for &v in row {
                m = m.maximum(v);
            }
            let mut sum = F::ZERO;
            for j in 0..d {
                let e = (row[j] - m).exp();
                data[i * d + j] = e;
                sum += e;
            }
            for j in 0..d {
                data[i * d + j] = data[i * d + j] / sum;
            }
        }
        let needs = self.needs(x);
        self.push(vec![t, d], data, Op::SoftmaxRows { x }, needs, "softmax_rows")
    }

    /// ln(max(x, floor)); the floor guards saturated probabilities.
    pub fn log_clamped(&mut self, x: Val, floor: F) -> TensorResult<Val> {
        let data: Vec<F> = self.data(x).iter().map(|&v| v.maximum(floor).ln()).collect();
        let needs = self.needs(x);
        self.push(self.shape(x).to_vec(), data, Op::LogClamped { x, floor }, needs, "log_clamped")
    }

    /// Row-wise layer normalization with learnable per-feature gain/bias.
    pub fn layer_norm_rows(&mut self, x: Val, gain: Val, bias: Val, eps: F) -> TensorResult<Val> {
        let (t, d) = self.dims2(x, "layer_norm_rows")?;
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm_rows",
                detail: format!(
                    "gain/bias numel {}/{} vs feature dim {d}",
                    self.value(gain).numel(),
                    self.value(bias).numel()
                ),
            });
        }
        let xd = self.data(x);
        let gd = self.data(gain);
        let bd = self.data(bias);
        let inv_d = F::ONE / F::from_f64(d as f64);
        let mut data = vec![F::ZERO; t * d];
        for i in 0..t {
            let row = &xd[i * d..(i + 1) * d];
            let mut mean = F::ZERO;
            for &v in row {
                mean += v;
            }
            mean *= inv_d;
            let mut var = F::ZERO;
            for &v in row {
                let c = v - mean;
                var += c * c;
            }
            var *= inv_d;
            let inv_std = F::ONE / (var + eps).sqrt();
            for j in 0..d {
                data[i * d + j] = (row[j] - mean) * inv_std * gd[j] + bd[j];
            }
        }
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(vec![t, d], data, Op::LayerNormRows { x, gain, bias, eps }, needs, "layer_norm_rows")
    }

    /// Arithmetic mean over the time axis: [t,d] -> [1,d].
    pub fn avg_pool_time(&mut self, x: Val) -> TensorResult<Val> {
        let (t, d) = self.dims2(x, "avg_pool_time")?;
        let xd = self.data(x);
        let inv_t = F::ONE / F::from_f64(t as f64);
        let mut data = vec![F::ZERO; d];
        for i in 0..t {
            for j in 0..d {
                data[j] += xd[i * d + j];
            }
        }
        for v in data.iter_mut() {
            *v *= inv_t;
        }
        let needs = self.needs(x);
        self.push(vec![1, d], data, Op::AvgPoolTime { x }, needs, "avg_pool_time")
    }

    /// Repeat a [1,d] row `rows` times.
    pub fn broadcast_rows(&mut self, x: Val, rows: usize) -> TensorResult<Val> {
        let (t, d) = self.dims2(x, "broadcast_rows")?;
        if t != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "broadcast_rows",
                detail: format!("expected a single row, got {t}"),
            });
        }
        let xd = self.data(x);
        let mut data = Vec::with_capacity(rows * d);
        for _ in 0..rows {
            data.extend_from_slice(xd);
        }
        let needs = self.needs(x);
        self.push(vec![rows, d], data, Op::BroadcastRows { x }, needs, "broadcast_rows")
    }

    /// Stack along the time axis; all inputs share the feature dim.
    pub fn concat_time(&mut self, xs: &[Val]) -> TensorResult<Val> {
        if xs.is_empty() {
            return Err(TensorError::InvalidArg {
                op: "concat_time",
                detail: "no inputs".into(),
            });
        }
        let (_, d) = self.dims2(xs[0], "concat_time")?;
        let mut total = 0;
        for &v in xs {
            let (tv, dv) = self.dims2(v, "concat_time")?;
            if dv != d {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_time",
                    detail: format!("feature dims disagree: {dv} vs {d}"),
                });
            }
            total += tv;
        }
        let mut data = Vec::with_capacity(total * d);
        for &v in xs {
            data.extend_from_slice(self.data(v));
        }
        let needs = xs.iter().any(|&v| self.needs(v));
        self.push(vec![total, d], data, Op::ConcatTime { xs: xs.to_vec() }, needs, "concat_time")
    }

    /// Concatenate along the feature axis; all inputs share the time dim.
    pub fn concat_feat(&mut self, xs: &[Val]) -> TensorResult<Val> {
        if xs.is_empty() {
            return Err(TensorError::InvalidArg {
                op: "concat_feat",
                detail: "no inputs".into(),
            });
        }
        let (t, _) = self.dims2(xs[0], "concat_feat")?;
        let mut total_d = 0;
        for &v in xs {
            let (tv, dv) = self.dims2(v, "concat_feat")?;
            if tv != t {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_feat",
                    detail: format!("time dims disagree: {tv} vs {t}"),
                });
            }
            total_d += dv;
        }
        let mut data = vec![F::ZERO; t * total_d];
        let mut col = 0;
        for &v in xs {
            let (_, dv) = self.dims2(v, "concat_feat")?;
            let vd = self.data(v);
            for i in 0..t {
                data[i * total_d + col..i * total_d + col + dv].copy_from_slice(&vd[i * dv..(i + 1) * dv]);
            }
            col += dv;
        }
        let needs = xs.iter().any(|&v| self.needs(v));
        self.push(vec![t, total_d], data, Op::ConcatFeat { xs: xs.to_vec() }, needs, "concat_feat")
    }

    pub fn slice_rows(&mut self, x: Val, start: usize, len: usize) -> TensorResult<Val> {
        let (t, d) = self.dims2(x, "slice_rows")?;
        if start + len > t {
            return Err(TensorError::ShapeMismatch {
                op: "slice_rows",
                detail: format!("slice [{start}, {}) out of {t} rows", start + len),
            });
        }
        let data = self.data(x)[start * d..(start + len) * d].to_vec();
        let needs = self.needs(x);
        self.push(vec![len, d], data, Op::SliceRows { x, start }, needs, "slice_rows")
    }

    pub fn slice_cols(&mut self, x: Val, start: usize, len: usize) -> TensorResult<Val> {
        let (t, d) = self.dims2(x, "slice_cols")?;
        if start + len > d {
            return Err(TensorError::ShapeMismatch {
                op: "slice_cols",
                detail: format!("slice [{start}, {}) out of {d} cols", start + len),
            });
        }
        let xd = self.data(x);
        let mut data = vec![F::ZERO; t * len];
        for i in 0..t {
            data[i * len..(i + 1) * len].copy_from_slice(&xd[i * d + start..i * d + start + len]);
        }
        let needs = self.needs(x);
        self.push(vec![t, len], data, Op::SliceCols { x, start }, needs, "slice_cols")
    }

    /// Zero-pad x into a `total`-row canvas with its rows at `offset`.
    pub fn pad_rows(&mut self, x: Val, total: usize, offset: usize) -> TensorResult<Val> {
        let (t, d) = self.dims2(x, "pad_rows")?;
        if offset + t > total {
            return Err(TensorError::ShapeMismatch {
                op: "pad_rows",
                detail: format!("rows [{offset}, {}) exceed canvas of {total}", offset + t),
            });
        }
        let mut data = vec![F::ZERO; total * d];
        data[offset * d..(offset + t) * d].copy_from_slice(self.data(x));
        let needs = self.needs(x);
        self.push(vec![total, d], data, Op::PadRows { x, offset }, needs, "pad_rows")
    }

    /// Convolution along the time axis treating features as channels.
    /// x is [t, c_in], kernels are [ksize, c_in, c_out].
    pub fn conv1d_time(&mut self, x: Val, kernels: Val, stride: usize, padding: Padding) -> TensorResult<Val> {
        if stride < 1 {
            return Err(TensorError::InvalidArg {
                op: "conv1d_time",
                detail: "stride must be >= 1".into(),
            });
        }
        let (t, c_in) = self.dims2(x, "conv1d_time")?;
        let ks = self.shape(kernels);
        if ks.len() != 3 {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d_time",
                detail: format!("kernels must be [ksize, c_in, c_out], got {ks:?}"),
            });
        }
        let (ksize, kc_in, c_out) = (ks[0], ks[1], ks[2]);
        if ksize < 1 {
            return Err(TensorError::InvalidArg {
                op: "conv1d_time",
                detail: "ksize must be >= 1".into(),
            });
        }
        if kc_in != c_in {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d_time",
                detail: format!("kernel c_in {kc_in} vs input channels {c_in}"),
            });
        }
        let (pad_total, pad_left) = match padding {
            Padding::Valid => (0usize, 0usize),
            Padding::Same => {
                let t_out = t.div_ceil(stride);
                let needed = (t_out - 1) * stride + ksize;
                let pad_total = needed.saturating_sub(t);
                (pad_total, pad_total / 2)
            }
        };
        if t + pad_total < ksize {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d_time",
                detail: format!("output length < 1 for t={t}, ksize={ksize}, stride={stride}"),
            });
        }
        let t_out = (t + pad_total - ksize) / stride + 1;
        let xd = self.data(x);
        let kd = self.data(kernels);
        let mut out = vec![F::ZERO; t_out * c_out];
        for tap in 0..ksize {
            let k_tap = &kd[tap * c_in * c_out..(tap + 1) * c_in * c_out];
            for o in 0..t_out {
                let r = (o * stride + tap) as isize - pad_left as isize;
                if r < 0 || r as usize >= t {
                    continue;
                }
                let xrow = &xd[r as usize * c_in..(r as usize + 1) * c_in];
                let orow = &mut out[o * c_out..(o + 1) * c_out];
                for (ci, &xv) in xrow.iter().enumerate() {
                    let krow = &k_tap[ci * c_out..(ci + 1) * c_out];
                    for j in 0..c_out {
                        orow[j] += xv * krow[j];
                    }
                }
            }
        }
        let needs = self.needs(x) || self.needs(kernels);
        self.push(
            vec![t_out, c_out],
            out,
            Op::Conv1dTime {
                x,
                kernels,
                stride,
                pad_left,
            },
            needs,
            "conv1d_time",
        )
    }

    /// Nearest-neighbor upsampling of rows by `factor`, truncated to
    /// `target_rows`. Restores length after a strided convolution.
    pub fn upsample_rows(&mut self, x: Val, factor: usize, target_rows: usize) -> TensorResult<Val> {
        if factor < 1 {
            return Err(TensorError::InvalidArg {
                op: "upsample_rows",
                detail: "factor must be >= 1".into(),
            });
        }
        let (t, d) = self.dims2(x, "upsample_rows")?;
        if target_rows > t * factor {
            return Err(TensorError::ShapeMismatch {
                op: "upsample_rows",
                detail: format!("target {target_rows} exceeds {t} * {factor}"),
            });
        }
        let xd = self.data(x);
        let mut data = vec![F::ZERO; target_rows * d];
        for r in 0..target_rows {
            let src = r / factor;
            data[r * d..(r + 1) * d].copy_from_slice(&xd[src * d..(src + 1) * d]);
        }
        let needs = self.needs(x);
        self.push(vec![target_rows, d], data, Op::UpsampleRows { x, factor }, needs, "upsample_rows")
    }

    /// Sum of all entries as a [1,1] scalar.
    pub fn sum_all(&mut self, x: Val) -> TensorResult<Val> {
        let mut s = F::ZERO;
        for &v in self.data(x) {
            s += v;
        }
        let needs = self.needs(x);
        self.push(vec![1, 1], vec![s], Op::SumAll { x }, needs, "sum_all")
    }

    /// Mean of all entries as a [1,1] scalar.
    pub fn mean_all(&mut self, x: Val) -> TensorResult<Val> {
        let n = self.value(x).numel();
        let s = self.sum_all(x)?;
        self.scale(s, F::ONE / F::from_f64(n as f64))
    }

    /// Negative log-likelihood of the true class read from a
    /// probability row; probs is [1,e].
    pub fn nll_from_probs(&mut self, probs: Val, label: usize, floor: F) -> TensorResult<Val> {
        let (t, e) = self.dims2(probs, "nll_from_probs")?;
        if t != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "nll_from_probs",
                detail: format!("expected a single probability row, got {t}"),
            });
        }
        if label >= e {
            return Err(TensorError::InvalidArg {
                op: "nll_from_probs",
                detail: format!("label {label} out of range for {e} classes"),
            });
        }
        let p = self.data(probs)[label];
        let loss = -(p.maximum(floor)).ln();
        let needs = self.needs(probs);
        self.push(vec![1, 1], vec![loss], Op::NllFromProbs { probs, label, floor }, needs, "nll_from_probs")
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Populates `grad` on every
    /// tensor whose `needs_grad` is set (zeros where unreachable).
    /// A tape supports exactly one backward pass.
    pub fn backward(&mut self, loss: Val) -> TensorResult<()> {
        if self.backward_done {
            return Err(TensorError::BackwardConsumed);
        }
        if !self.nodes[loss.0].tensor.is_scalar() {
            return Err(TensorError::NonScalarLoss {
                shape: self.shape(loss).to_vec(),
            });
        }
        self.backward_done = true;
        for node in self.nodes.iter_mut() {
            if node.needs_grad {
                node.tensor.reset_grad();
            }
        }
        if self.nodes[loss.0].needs_grad {
            self.nodes[loss.0].tensor.grad.as_mut().unwrap()[0] = F::ONE;
        }
        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            if matches!(op, Op::Leaf) {
                continue;
            }
            let gy = self.nodes[i].tensor.grad.clone().unwrap();
            self.propagate(i, &op, &gy);
        }
        Ok(())
    }

    fn add_to_grad(&mut self, v: Val, delta: &[F]) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let g = self.nodes[v.0].tensor.grad.as_mut().unwrap();
        for (gi, &d) in g.iter_mut().zip(delta) {
            *gi += d;
        }
    }

    fn propagate(&mut self, out_idx: usize, op: &Op<F>, gy: &[F]) {
        match *op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (p, q) = (self.shape(a)[0], self.shape(a)[1]);
                let r = self.shape(b)[1];
                if self.needs(a) {
                    // dA = dC @ B^T
                    let mut da = vec![F::ZERO; p * q];
                    mm_nt_acc(&mut da, gy, self.data(b), p, r, q);
                    self.add_to_grad(a, &da);
                }
                if self.needs(b) {
                    // dB = A^T @ dC
                    let mut db = vec![F::ZERO; q * r];
                    mm_tn_acc(&mut db, self.data(a), gy, p, q, r);
                    self.add_to_grad(b, &db);
                }
            }
            Op::MatmulNT { a, b } => {
                // C = A @ B^T with A [p,q], B [r,q], C [p,r]
                let (p, q) = (self.shape(a)[0], self.shape(a)[1]);
                let r = self.shape(b)[0];
                if self.needs(a) {
                    // dA = dC @ B
                    let mut da = vec![F::ZERO; p * q];
                    mm_nn_acc(&mut da, gy, self.data(b), p, r, q);
                    self.add_to_grad(a, &da);
                }
                if self.needs(b) {
                    // dB = dC^T @ A
                    let mut db = vec![F::ZERO; r * q];
                    mm_tn_acc(&mut db, gy, self.data(a), p, r, q);
                    self.add_to_grad(b, &db);
                }
            }
            Op::Add { a, b } => {
                self.add_to_grad(a, gy);
                self.add_to_grad(b, gy);
            }
            Op::Sub { a, b } => {
                self.add_to_grad(a, gy);
                if self.needs(b) {
                    let neg: Vec<F> = gy.iter().map(|&g| -g).collect();
                    self.add_to_grad(b, &neg);
                }
            }
            Op::MulElem { a, b } => {
                if self.needs(a) {
                    let da: Vec<F> = gy.iter().zip(self.data(b)).map(|(&g, &y)| g * y).collect();
                    self.add_to_grad(a, &da);
                }
                if self.needs(b) {
                    let db: Vec<F> = gy.iter().zip(self.data(a)).map(|(&g, &x)| g * x).collect();
                    self.add_to_grad(b, &db);
                }
            }
            Op::Scale { x, c } => {
                if self.needs(x) {
                    let dx: Vec<F> = gy.iter().map(|&g| g * c).collect();
                    self.add_to_grad(x, &dx);
                }
            }
            Op::AddBias { x, bias } => {
                let (t, d) = (self.shape(x)[0], self.shape(x)[1]);
                self.add_to_grad(x, gy);
                if self.needs(bias) {
                    let mut db = vec![F::ZERO; d];
                    for i in 0..t {
                        for j in 0..d {
                            db[j] += gy[i * d + j];
                        }
                    }
                    self.add_to_grad(bias, &db);
                }
            }
            Op::Sigmoid { x } => {
                if self.needs(x) {
                    let out = &self.nodes[out_idx].tensor.data;
                    let dx: Vec<F> = gy
                        .iter()
                        .zip(out)
                        .map(|(&g, &s)| g * s * (F::ONE - s))
                        .collect();
                    self.add_to_grad(x, &dx);
                }
            }
            Op::Gelu { x } => {
                if self.needs(x) {
                    let dx: Vec<F> = gy
                        .iter()
                        .zip(self.data(x))
                        .map(|(&g, &v)| g * gelu_tanh_grad(v))
                        .collect();
                    self.add_to_grad(x, &dx);
                }
            }
            Op::Prelu { x, slope } => {
                let (t, d) = (self.shape(x)[0], self.shape(x)[1]);
                if self.needs(x) {
                    let sd = self.data(slope);
                    let xd = self.data(x);
                    let mut dx = vec![F::ZERO; t * d];
                    for i in 0..t {
                        for j in 0..d {
                            let idx = i * d + j;
                            dx[idx] = gy[idx] * if xd[idx] > F::ZERO { F::ONE } else { sd[j] };
                        }
                    }
                    self.add_to_grad(x, &dx);
                }
                if self.needs(slope) {
                    let xd = self.data(x);
                    let mut ds = vec![F::ZERO; d];
                    for i in 0..t {
                        for j in 0..d {
                            let idx = i * d + j;
                            if xd[idx] <= F::ZERO {
                                ds[j] += gy[idx] * xd[idx];
                            }
                        }
                    }
                    self.add_to_grad(slope, &ds);
                }
            }
            Op::SoftmaxRows { x } => {
                if self.needs(x) {
                    let (t, d) = (self.shape(x)[0], self.shape(x)[1]);
                    let s = &self.nodes[out_idx].tensor.data;
                    let mut dx = vec![F::ZERO; t * d];
                    for i in 0..t {
                        let srow = &s[i * d..(i + 1) * d];
                        let grow = &gy[i * d..(i + 1) * d];
                        let mut dot = F::ZERO;
                        for j in 0..d {
                            dot += grow[j] * srow[j];
                        }
                        for j in 0..d {
                            dx[i * d + j] = srow[j] * (grow[j] - dot);
                        }
                    }
                    self.add_to_grad(x, &dx);
                }
            }
            Op::LogClamped { x, floor } => {
                if self.needs(x) {
                    let dx: Vec<F> = gy
                        .iter()
                        .zip(self.data(x))
                        .map(|(&g, &v)| if v > floor { g / v } else { F::ZERO })
                        .collect();
                    self.add_to_grad(x, &dx);
                }
            }
            Op::LayerNormRows { x, gain, bias, eps } => {
                let (t, d) = (self.shape(x)[0], self.shape(x)[1]);
                let inv_d = F::ONE / F::from_f64(d as f64);
                let xd = self.data(x).to_vec();
                let gd = self.data(gain).to_vec();
                let mut dx = vec![F::ZERO; t * d];
                let mut dgain = vec![F::ZERO; d];
                let mut dbias = vec![F::ZERO; d];
                for i in 0..t {
                    let row = &xd[i * d..(i + 1) * d];
                    let grow = &gy[i * d..(i + 1) * d];
                    let mut mean = F::ZERO;
                    for &v in row {
                        mean += v;
                    }
                    mean *= inv_d;
                    let mut var = F::ZERO;
                    for &v in row {
                        let c = v - mean;
                        var += c * c;
                    }
                    var *= inv_d;
                    let inv_std = F::ONE / (var + eps).sqrt();
                    // xhat_j = (x_j - mean) * inv_std
                    let mut mean_dxhat = F::ZERO;
                    let mut mean_dxhat_xhat = F::ZERO;
                    for j in 0..d {
                        let xhat = (row[j] - mean) * inv_std;
                        let dxhat = grow[j] * gd[j];
                        dgain[j] += grow[j] * xhat;
                        dbias[j] += grow[j];
                        mean_dxhat += dxhat;
                        mean_dxhat_xhat += dxhat * xhat;
                    }
                    mean_dxhat *= inv_d;
                    mean_dxhat_xhat *= inv_d;
                    for j in 0..d {
                        let xhat = (row[j] - mean) * inv_std;
                        let dxhat = grow[j] * gd[j];
                        dx[i * d + j] = (dxhat - mean_dxhat - xhat * mean_dxhat_xhat) * inv_std;
                    }
                }
                self.add_to_grad(x, &dx);
                self.add_to_grad(gain, &dgain);
                self.add_to_grad(bias, &dbias);
            }
            Op::AvgPoolTime { x } => {
                if self.needs(x) {
                    let (t, d) = (self.shape(x)[0], self.shape(x)[1]);
                    let inv_t = F::ONE / F::from_f64(t as f64);
                    let mut dx = vec![F::ZERO; t * d];
                    for i in 0..t {
                        for j in 0..d {
                            dx[i * d + j] = gy[j] * inv_t;
                        }
                    }
                    self.add_to_grad(x, &dx);
                }
            }
            Op::BroadcastRows { x } => {
                if self.needs(x) {
                    let d = self.shape(x)[1];
                    let rows = self.nodes[out_idx].tensor.shape[0];
                    let mut dx = vec![F::ZERO; d];
                    for r in 0..rows {
                        for j in 0..d {
                            dx[j] += gy[r * d + j];
                        }
                    }
                    self.add_to_grad(x, &dx);
                }
            }
            Op::ConcatTime { ref xs } => {
                let mut row = 0;
                for &v in xs {
                    let (tv, d) = (self.shape(v)[0], self.shape(v)[1]);
                    if self.needs(v) {
                        let dv = gy[row * d..(row + tv) * d].to_vec();
                        self.add_to_grad(v, &dv);
                    }
                    row += tv;
                }
            }
            Op::ConcatFeat { ref xs } => {
                let total_d = self.nodes[out_idx].tensor.shape[1];
                let t = self.nodes[out_idx].tensor.shape[0];
                let mut col = 0;
                for &v in xs {
                    let dv_width = self.shape(v)[1];
                    if self.needs(v) {
                        let mut dv = vec![F::ZERO; t * dv_width];
                        for i in 0..t {
                            dv[i * dv_width..(i + 1) * dv_width]
                                .copy_from_slice(&gy[i * total_d + col..i * total_d + col + dv_width]);
                        }
                        self.add_to_grad(v, &dv);
                    }
                    col += dv_width;
                }
            }
            Op::SliceRows { x, start } => {
                if self.needs(x) {
                    let (t, d) = (self.shape(x)[0], self.shape(x)[1]);
                    let len = self.nodes[out_idx].tensor.shape[0];
                    let mut dx = vec![F::ZERO; t * d];
                    dx[start * d..(start + len) * d].copy_from_slice(gy);
                    self.add_to_grad(x, &dx);
                }
            }
            Op::SliceCols { x, start } => {
                if self.needs(x) {
                    let (t, d) = (self.shape(x)[0], self.shape(x)[1]);
                    let len = self.nodes[out_idx].tensor.shape[1];
                    let mut dx = vec![F::ZERO; t * d];
                    for i in 0..t {
                        dx[i * d + start..i * d + start + len].copy_from_slice(&gy[i * len..(i + 1) * len]);
                    }
                    self.add_to_grad(x, &dx);
                }
            }
            Op::PadRows { x, offset } => {
                if self.needs(x) {
                    let (t, d) = (self.shape(x)[0], self.shape(x)[1]);
                    let dv = gy[offset * d..(offset + t) * d].to_vec();
                    self.add_to_grad(x, &dv);
                }
            }
            Op::Conv1dTime {
                x,
                kernels,
                stride,
                pad_left,
            } => {
                let (t, c_in) = (self.shape(x)[0], self.shape(x)[1]);
                let ks = self.shape(kernels).to_vec();
                let (ksize, c_out) = (ks[0], ks[2]);
                let t_out = self.nodes[out_idx].tensor.shape[0];
                if self.needs(x) {
                    let kd = self.data(kernels).to_vec();
                    let mut dx = vec![F::ZERO; t * c_in];
                    for tap in 0..ksize {
                        let k_tap = &kd[tap * c_in * c_out..(tap + 1) * c_in * c_out];
                        for o in 0..t_out {
                            let r = (o * stride + tap) as isize - pad_left as isize;
                            if r < 0 || r as usize >= t {
                                continue;
                            }
                            let grow = &gy[o * c_out..(o + 1) * c_out];
                            let dxrow = &mut dx[r as usize * c_in..(r as usize + 1) * c_in];
                            for ci in 0..c_in {
                                let krow = &k_tap[ci * c_out..(ci + 1) * c_out];
                                let mut s = F::ZERO;
                                for j in 0..c_out {
                                    s += grow[j] * krow[j];
                                }
                                dxrow[ci] += s;
                            }
                        }
                    }
                    self.add_to_grad(x, &dx);
                }
                if self.needs(kernels) {
                    let xd = self.data(x).to_vec();
                    let mut dk = vec![F::ZERO; ksize * c_in * c_out];
                    for tap in 0..ksize {
                        let dk_tap = &mut dk[tap * c_in * c_out..(tap + 1) * c_in * c_out];
                        for o in 0..t_out {
                            let r = (o * stride + tap) as isize - pad_left as isize;
                            if r < 0 || r as usize >= t {
                                continue;
                            }
                            let xrow = &xd[r as usize * c_in..(r as usize + 1) * c_in];
                            let grow = &gy[o * c_out..(o + 1) * c_out];
                            for (ci, &xv) in xrow.iter().enumerate() {
                                let krow = &mut dk_tap[ci * c_out..(ci + 1) * c_out];
                                for j in 0..c_out {
                                    krow[j] += xv * grow[j];
                                }
                            }
                        }
                    }
                    self.add_to_grad(kernels, &dk);
                }
            }
            Op::UpsampleRows { x, factor } => {
                if self.needs(x) {
                    let (t, d) = (self.shape(x)[0], self.shape(x)[1]);
                    let target = self.nodes[out_idx].tensor.shape[0];
                    let mut dx = vec![F::ZERO; t * d];
                    for r in 0..target {
                        let src = r / factor;
                        for j in 0..d {
                            dx[src * d + j] += gy[r * d + j];
                        }
                    }
                    self.add_to_grad(x, &dx);
                }
            }
            Op::SumAll { x } => {
                if self.needs(x) {
                    let n = self.nodes[x.0].tensor.numel();
                    let dx = vec![gy[0]; n];
                    self.add_to_grad(x, &dx);
                }
            }
            Op::NllFromProbs { probs, label, floor } => {
                if self.needs(probs) {
                    let e = self.shape(probs)[1];
                    let p = self.data(probs)[label];
                    let mut dp = vec![F::ZERO; e];
                    if p > floor {
                        dp[label] = -gy[0] / p;
                    }
                    self.add_to_grad(probs, &dp);
                }
            }
        }
    }
}

// ── Kernels ──────────────────────────────────────────────────────────

/// c[m,n] += a[m,k] @ b[k,n]
fn mm_nn_acc<F: Real>(c: &mut [F], a: &[F], b: &[F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

/// c[m,n] += a[m,k] @ b[n,k]^T
fn mm_nt_acc<F: Real>(c: &mut [F], a: &[F], b: &[F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (j, crj) in crow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = F::ZERO;
            for p in 0..k {
                s += arow[p] * brow[p];
            }
            *crj += s;
        }
    }
}

/// c[k,n] += a[m,k]^T @ b[m,n]
fn mm_tn_acc<F: Real>(c: &mut [F], a: &[F], b: &[F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let crow = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

fn sigmoid_stable<F: Real>(x: F) -> F {
    if x >= F::ZERO {
        F::ONE / (F::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::ONE + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_tanh<F: Real>(x: F) -> F {
    let c = F::from_f64(GELU_C);
    let a = F::from_f64(GELU_A);
    let half = F::from_f64(0.5);
    let inner = c * (x + a * x * x * x);
    half * x * (F::ONE + inner.tanh())
}

fn gelu_tanh_grad<F: Real>(x: F) -> F {
    let c = F::from_f64(GELU_C);
    let a = F::from_f64(GELU_A);
    let half = F::from_f64(0.5);
    let three = F::from_f64(3.0);
    let inner = c * (x + a * x * x * x);
    let th = inner.tanh();
    let sech2 = F::ONE - th * th;
    let dinner = c * (F::ONE + three * a * x * x);
    half * (F::ONE + th) + half * x * sech2 * dinner
}
