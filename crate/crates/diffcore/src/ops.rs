//! Forward definitions of every recorded op. Each method validates shapes,
//! computes the output and pushes a node; the matching vector-Jacobian
//! products live in `backward.rs`.

use crate::error::{invalid, mismatch, Result};
use crate::tape::{Op, Tape, Var};
use crate::tensor::{axis_layout, gemm_nn, gemm_nt};
use crate::{Scalar, Tensor};

/// Floor added by [`Tape::pos`]: `pos(x) = elu(x) + 1 + POS_EPS`.
pub const POS_EPS: f64 = 1e-6;
/// Variance floor inside [`Tape::layer_norm`].
pub const LN_EPS: f64 = 1e-5;
/// Fill value used for masked attention logits; finite so tapes stay checkable.
pub const MASK_FILL: f64 = -1e30;

impl<T: Scalar> Tape<T> {
    /// Matrix product. `a: [.., m, k] · b: [k, n]` applies one right operand to
    /// every row of `a`; `a: [B, m, k] · b: [B, k, n]` is a batched product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out = match (sa.len(), sb.len()) {
            (2 | 3, 2) => {
                let k = sa[sa.len() - 1];
                if sb[0] != k {
                    return Err(mismatch("matmul", &sa, &sb));
                }
                let n = sb[1];
                let m = self.value(a).numel() / k.max(1);
                let mut data = vec![T::zero(); m * n];
                gemm_nn(self.value(a).data(), self.value(b).data(), &mut data, m, k, n);
                let mut shape = sa.clone();
                *shape.last_mut().unwrap() = n;
                Tensor::from_vec(&shape, data)
            }
            (3, 3) => {
                if sa[0] != sb[0] || sa[2] != sb[1] {
                    return Err(mismatch("matmul", &sa, &sb));
                }
                let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let mut data = vec![T::zero(); batch * m * n];
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                for i in 0..batch {
                    gemm_nn(
                        &av[i * m * k..(i + 1) * m * k],
                        &bv[i * k * n..(i + 1) * k * n],
                        &mut data[i * m * n..(i + 1) * m * n],
                        m,
                        k,
                        n,
                    );
                }
                Tensor::from_vec(&[batch, m, n], data)
            }
            _ => return Err(mismatch("matmul", &sa, &sb)),
        };
        self.push(out, Op::MatMul { a, b })
    }

    /// Swaps the last two axes of a rank-2 or rank-3 tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 || s.len() > 3 {
            return Err(invalid("transpose", format!("needs rank 2 or 3, got {s:?}")));
        }
        let out = transpose_last2(self.value(a));
        self.push(out, Op::Transpose { a })
    }

    /// Elementwise sum of equal shapes, or `matrix + row-vector` when `b` is
    /// rank 1 and matches the last axis of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa == sb {
            let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
            return self.push(out, Op::Add { a, b });
        }
        if sb.len() == 1 && sa.last() == Some(&sb[0]) {
            let w = sb[0];
            let mut out = self.value(a).clone();
            let row = self.value(b).data();
            for chunk in out.data_mut().chunks_mut(w) {
                for (x, &r) in chunk.iter_mut().zip(row) {
                    *x = *x + r;
                }
            }
            return self.push(out, Op::AddRow { a, b });
        }
        Err(mismatch("add", sa, sb))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("sub", self.shape(a), self.shape(b)));
        }
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.push(out, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("mul", self.shape(a), self.shape(b)));
        }
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.push(out, Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale { a, c })
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -T::one())
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        let out = self.value(a).map(|x| x + c);
        self.push(out, Op::AddScalar { a })
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(invalid("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(mismatch("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_layout(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for v in inputs {
                let t = self.value(*v);
                let block = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        self.push(
            Tensor::from_vec(&shape, data),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        )
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(invalid(
                "slice",
                format!("[{start}, {}) out of range on axis {axis} of {s:?}", start + len),
            ));
        }
        let (outer, ext, inner) = axis_layout(&s, axis);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * ext * inner + start * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        self.push(Tensor::from_vec(&shape, data), Op::Slice { a, axis, start })
    }

    /// Splits along `axis` into consecutive pieces of the given sizes.
    pub fn split(&mut self, a: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let ext = *self
            .shape(a)
            .get(axis)
            .ok_or_else(|| invalid("split", format!("axis {axis} out of range")))?;
        if sizes.iter().sum::<usize>() != ext {
            return Err(invalid("split", format!("sizes {sizes:?} do not cover extent {ext}")));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &len in sizes {
            out.push(self.slice(a, axis, start, len)?);
            start += len;
        }
        Ok(out)
    }

    /// Sums out `axis`.
    pub fn sum(&mut self, a: Var, axis: usize) -> Result<Var> {
        let out = self.reduce_axis("sum", a, axis, T::one())?;
        self.push(out, Op::Sum { a, axis })
    }

    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ext = *self
            .shape(a)
            .get(axis)
            .ok_or_else(|| invalid("mean", format!("axis {axis} out of range")))?;
        let out = self.reduce_axis("mean", a, axis, T::one() / T::of(ext as f64))?;
        self.push(out, Op::Mean { a, axis })
    }

    fn reduce_axis(&self, op: &'static str, a: Var, axis: usize, factor: T) -> Result<Tensor<T>> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(invalid(op, format!("axis {axis} out of range for {s:?}")));
        }
        let (outer, len, inner) = axis_layout(&s, axis);
        let src = self.value(a).data();
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..len {
                let row = &src[(o * len + i) * inner..(o * len + i + 1) * inner];
                for (acc, &x) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc = *acc + x;
                }
            }
        }
        for x in &mut data {
            *x = *x * factor;
        }
        let mut shape = s;
        shape.remove(axis);
        Ok(Tensor::from_vec(&shape, data))
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::SumAll { a })
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        let s = self.sum_all(a)?;
        self.scale(s, T::one() / T::of(n.max(1) as f64))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let out = self.softmax_like(a, axis, false)?;
        self.push(out, Op::Softmax { a, axis })
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let out = self.softmax_like(a, axis, true)?;
        self.push(out, Op::LogSoftmax { a, axis })
    }

    fn softmax_like(&self, a: Var, axis: usize, log: bool) -> Result<Tensor<T>> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(invalid("softmax", format!("axis {axis} out of range for {s:?}")));
        }
        let (outer, len, inner) = axis_layout(&s, axis);
        let mut out = self.value(a).clone();
        let d = out.data_mut();
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| o * len * inner + i * inner + j;
                let max = (0..len).fold(T::neg_infinity(), |m, i| m.max(d[at(i)]));
                let mut total = T::zero();
                for i in 0..len {
                    let e = (d[at(i)] - max).exp();
                    total = total + e;
                    if !log {
                        d[at(i)] = e;
                    }
                }
                if log {
                    let lse = max + total.ln();
                    for i in 0..len {
                        d[at(i)] = d[at(i)] - lse;
                    }
                } else {
                    for i in 0..len {
                        d[at(i)] = d[at(i)] / total;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Normalizes every slice along `axis` to zero mean and unit variance, then
    /// applies `gain` and `bias` (both of the axis extent).
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(invalid("layer_norm", format!("axis {axis} out of range for {s:?}")));
        }
        let len = s[axis];
        if self.shape(gain) != [len] || self.shape(bias) != [len] {
            return Err(mismatch("layer_norm", &s, self.shape(gain)));
        }
        let (outer, _, inner) = axis_layout(&s, axis);
        let x = self.value(a).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let eps = T::of(LN_EPS);
        let n = T::of(len as f64);
        let mut normed = vec![T::zero(); x.len()];
        let mut inv_std = vec![T::zero(); outer * inner];
        let mut out = vec![T::zero(); x.len()];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| o * len * inner + i * inner + j;
                let mean = (0..len).map(|i| x[at(i)]).sum::<T>() / n;
                let var = (0..len).map(|i| (x[at(i)] - mean).powi(2)).sum::<T>() / n;
                let is = T::one() / (var + eps).sqrt();
                inv_std[o * inner + j] = is;
                for i in 0..len {
                    let xh = (x[at(i)] - mean) * is;
                    normed[at(i)] = xh;
                    out[at(i)] = g[i] * xh + b[i];
                }
            }
        }
        self.push(
            Tensor::from_vec(&s, out),
            Op::LayerNorm {
                a,
                gain,
                bias,
                axis,
                normed,
                inv_std,
            },
        )
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(T::zero()));
        self.push(out, Op::Relu { a })
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid { a })
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.tanh());
        self.push(out, Op::Tanh { a })
    }

    /// ELU with unit scale: `x` for `x > 0`, `exp(x) - 1` otherwise.
    pub fn elu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(elu);
        self.push(out, Op::Elu { a })
    }

    /// Strictly positive map `elu(x) + 1 + POS_EPS`.
    pub fn pos(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(pos);
        self.push(out, Op::Pos { a })
    }

    /// `sqrt(max(x, eps))`; the gradient is zero where the clamp is active.
    pub fn sqrt(&mut self, a: Var, eps: T) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(eps).sqrt());
        self.push(out, Op::Sqrt { a, eps })
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x * x);
        self.push(out, Op::Square { a })
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.exp());
        self.push(out, Op::Exp { a })
    }

    /// `ln(max(x, eps))`.
    pub fn log(&mut self, a: Var, eps: T) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(eps).ln());
        self.push(out, Op::Log { a, eps })
    }

    /// Scales each slice along `axis` to unit L2 norm.
    pub fn l2_normalize(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(invalid("l2_normalize", format!("axis {axis} out of range for {s:?}")));
        }
        let (outer, len, inner) = axis_layout(&s, axis);
        let mut out = self.value(a).clone();
        let d = out.data_mut();
        let floor = T::of(1e-12);
        let mut norms = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| o * len * inner + i * inner + j;
                let norm = (0..len).map(|i| d[at(i)] * d[at(i)]).sum::<T>().sqrt().max(floor);
                norms[o * inner + j] = norm;
                for i in 0..len {
                    d[at(i)] = d[at(i)] / norm;
                }
            }
        }
        self.push(out, Op::L2Normalize { a, axis, norms })
    }

    /// Pairwise cosine similarity between the rows of `a: [n, d]` and `b: [m, d]`.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(mismatch("cosine_similarity", sa, sb));
        }
        let na = self.l2_normalize(a, 1)?;
        let nb = self.l2_normalize(b, 1)?;
        let nbt = self.transpose(nb)?;
        self.matmul(na, nbt)
    }

    /// Selects rows along the first axis; repeated indices are allowed.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let s = t.shape().to_vec();
        let rows = *s
            .first()
            .ok_or_else(|| invalid("gather_rows", "cannot gather from a scalar"))?;
        let w = t.row_width();
        let mut data = Vec::with_capacity(index.len() * w);
        for &i in index {
            if i >= rows {
                return Err(invalid("gather_rows", format!("row {i} out of range for {s:?}")));
            }
            data.extend_from_slice(t.row(i));
        }
        let mut shape = s;
        shape[0] = index.len();
        self.push(
            Tensor::from_vec(&shape, data),
            Op::GatherRows {
                a,
                index: index.to_vec(),
            },
        )
    }

    /// `out[r] = a[r, cols[r]]` for `a: [rows, n]`.
    pub fn pick(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || s[0] != cols.len() {
            return Err(invalid("pick", format!("{} columns for shape {s:?}", cols.len())));
        }
        let n = s[1];
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(cols.len());
        for (r, &c) in cols.iter().enumerate() {
            if c >= n {
                return Err(invalid("pick", format!("column {c} out of range for {s:?}")));
            }
            data.push(src[r * n + c]);
        }
        self.push(
            Tensor::from_vec(&[cols.len()], data),
            Op::Pick {
                a,
                cols: cols.to_vec(),
            },
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape)?;
        self.push(out, Op::Reshape { a })
    }

    /// Replaces entries where `mask` is true with `value`; those entries get no gradient.
    pub fn masked_fill(&mut self, a: Var, mask: &[bool], value: T) -> Result<Var> {
        let t = self.value(a);
        if mask.len() != t.numel() {
            return Err(invalid(
                "masked_fill",
                format!("mask of {} for shape {:?}", mask.len(), t.shape()),
            ));
        }
        let mut out = t.clone();
        for (x, &m) in out.data_mut().iter_mut().zip(mask) {
            if m {
                *x = value;
            }
        }
        self.push(
            out,
            Op::MaskedFill {
                a,
                mask: mask.to_vec(),
            },
        )
    }

    /// Squared Euclidean distances between rows: `[n, d] × [m, d] → [n, m]`, or
    /// batched `[B, n, d] × [B, m, d] → [B, n, m]`.
    pub fn pairwise_sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (batch, n, m, d) = match (sa.len(), sb.len()) {
            (2, 2) if sa[1] == sb[1] => (1, sa[0], sb[0], sa[1]),
            (3, 3) if sa[0] == sb[0] && sa[2] == sb[2] => (sa[0], sa[1], sb[1], sa[2]),
            _ => return Err(mismatch("pairwise_sq_dist", &sa, &sb)),
        };
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut data = vec![T::zero(); batch * n * m];
        for bi in 0..batch {
            for i in 0..n {
                let ar = &av[(bi * n + i) * d..(bi * n + i + 1) * d];
                for j in 0..m {
                    let br = &bv[(bi * m + j) * d..(bi * m + j + 1) * d];
                    let mut acc = T::zero();
                    for (&x, &y) in ar.iter().zip(br) {
                        let diff = x - y;
                        acc = acc + diff * diff;
                    }
                    data[(bi * n + i) * m + j] = acc;
                }
            }
        }
        let shape = if sa.len() == 2 {
            vec![n, m]
        } else {
            vec![batch, n, m]
        };
        self.push(Tensor::from_vec(&shape, data), Op::PairwiseSqDist { a, b })
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn elu<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        x.exp() - T::one()
    }
}

pub(crate) fn pos<T: Scalar>(x: T) -> T {
    elu(x) + T::one() + T::of(POS_EPS)
}

pub(crate) fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape(), data)
}

pub(crate) fn transpose_last2<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let s = t.shape();
    let r = s.len();
    let (rows, cols) = (s[r - 2], s[r - 1]);
    let batch = t.numel() / (rows * cols).max(1);
    let src = t.data();
    let mut data = vec![T::zero(); t.numel()];
    for b in 0..batch {
        let off = b * rows * cols;
        for i in 0..rows {
            for j in 0..cols {
                data[off + j * rows + i] = src[off + i * cols + j];
            }
        }
    }
    let mut shape = s.to_vec();
    shape.swap(r - 2, r - 1);
    Tensor::from_vec(&shape, data)
}

/// `c = a · bᵀ` for plain matrices, used by backward.
pub(crate) fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    gemm_nt(a, b, &mut c, m, k, n);
    c
}
