use crate::error::{Error, Result};
use crate::ops::{matmul_nt, transpose_last2};
use crate::tape::{Op, Tape, Var};
use crate::tensor::{axis_layout, gemm_tn};
use crate::{Scalar, Tensor};

/// Gradients of a scalar loss with respect to every node that requires them.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `shape` when `v` did not reach the loss.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

impl<T: Scalar> Tape<T> {
    /// Reverse-mode sweep from a single-element `loss`. Nodes are visited once,
    /// in reverse recording order.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(lv.shape()));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            for (input, ig) in self.vjp(id, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&ig),
                    slot @ None => *slot = Some(ig),
                }
            }
            // keep the gradient of intermediate nodes available to callers
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn vjp(&self, id: usize, g: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let node = &self.nodes[id];
        let out = &node.value;
        let val = |v: &Var| &self.nodes[v.0].value;
        let needs = |v: &Var| self.nodes[v.0].requires_grad;

        match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul { a, b } => {
                let (ta, tb) = (val(a), val(b));
                let (sa, sb) = (ta.shape(), tb.shape());
                let mut res = Vec::new();
                if sb.len() == 2 {
                    let (k, n) = (sb[0], sb[1]);
                    let m = ta.numel() / k.max(1);
                    if needs(a) {
                        let da = matmul_nt(g.data(), tb.data(), m, n, k);
                        res.push((*a, Tensor::from_vec(sa, da)));
                    }
                    if needs(b) {
                        let mut db = vec![T::zero(); k * n];
                        gemm_tn(ta.data(), g.data(), &mut db, m, k, n);
                        res.push((*b, Tensor::from_vec(sb, db)));
                    }
                } else {
                    let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                    let mut da = vec![T::zero(); ta.numel()];
                    let mut db = vec![T::zero(); tb.numel()];
                    for i in 0..batch {
                        let gi = &g.data()[i * m * n..(i + 1) * m * n];
                        if needs(a) {
                            let bi = &tb.data()[i * k * n..(i + 1) * k * n];
                            let block = matmul_nt(gi, bi, m, n, k);
                            da[i * m * k..(i + 1) * m * k].copy_from_slice(&block);
                        }
                        if needs(b) {
                            let ai = &ta.data()[i * m * k..(i + 1) * m * k];
                            gemm_tn(ai, gi, &mut db[i * k * n..(i + 1) * k * n], m, k, n);
                        }
                    }
                    if needs(a) {
                        res.push((*a, Tensor::from_vec(sa, da)));
                    }
                    if needs(b) {
                        res.push((*b, Tensor::from_vec(sb, db)));
                    }
                }
                res
            }
            Op::Transpose { a } => vec![(*a, transpose_last2(g))],
            Op::Add { a, b } => vec![(*a, g.clone()), (*b, g.clone())],
            Op::AddRow { a, b } => {
                let w = val(b).numel();
                let mut db = vec![T::zero(); w];
                for chunk in g.data().chunks(w) {
                    for (acc, &x) in db.iter_mut().zip(chunk) {
                        *acc = *acc + x;
                    }
                }
                vec![(*a, g.clone()), (*b, Tensor::from_vec(&[w], db))]
            }
            Op::Sub { a, b } => vec![(*a, g.clone()), (*b, g.map(|x| -x))],
            Op::Mul { a, b } => {
                let ga = zip(g, val(b), |x, y| x * y);
                let gb = zip(g, val(a), |x, y| x * y);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale { a, c } => vec![(*a, g.map(|x| x * *c))],
            Op::AddScalar { a } | Op::Reshape { a } => {
                let ga = g.clone().reshaped(val(a).shape()).expect("same numel");
                vec![(*a, ga)]
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = axis_layout(out.shape(), *axis);
                let mut offset = 0;
                let mut res = Vec::with_capacity(inputs.len());
                for v in inputs {
                    let s = val(v).shape();
                    let len = s[*axis];
                    let mut data = Vec::with_capacity(val(v).numel());
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        data.extend_from_slice(&g.data()[base..base + len * inner]);
                    }
                    offset += len;
                    res.push((*v, Tensor::from_vec(s, data)));
                }
                res
            }
            Op::Slice { a, axis, start } => {
                let s = val(a).shape();
                let (outer, ext, inner) = axis_layout(s, *axis);
                let len = out.shape()[*axis];
                let mut ga = Tensor::zeros(s);
                let d = ga.data_mut();
                for o in 0..outer {
                    let dst = o * ext * inner + start * inner;
                    let src = o * len * inner;
                    d[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                vec![(*a, ga)]
            }
            Op::Sum { a, axis } | Op::Mean { a, axis } => {
                let s = val(a).shape();
                let (outer, len, inner) = axis_layout(s, *axis);
                let factor = if matches!(node.op, Op::Mean { .. }) {
                    T::one() / T::of(len as f64)
                } else {
                    T::one()
                };
                let mut ga = Tensor::zeros(s);
                let d = ga.data_mut();
                for o in 0..outer {
                    let grow = &g.data()[o * inner..(o + 1) * inner];
                    for i in 0..len {
                        let base = (o * len + i) * inner;
                        for (x, &gv) in d[base..base + inner].iter_mut().zip(grow) {
                            *x = gv * factor;
                        }
                    }
                }
                vec![(*a, ga)]
            }
            Op::SumAll { a } => vec![(*a, Tensor::full(val(a).shape(), g.item()))],
            Op::Softmax { a, axis } => {
                let (outer, len, inner) = axis_layout(out.shape(), *axis);
                let y = out.data();
                let mut ga = Tensor::zeros(out.shape());
                let d = ga.data_mut();
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |i: usize| o * len * inner + i * inner + j;
                        let dot: T = (0..len).map(|i| g.data()[at(i)] * y[at(i)]).sum();
                        for i in 0..len {
                            d[at(i)] = y[at(i)] * (g.data()[at(i)] - dot);
                        }
                    }
                }
                vec![(*a, ga)]
            }
            Op::LogSoftmax { a, axis } => {
                let (outer, len, inner) = axis_layout(out.shape(), *axis);
                let y = out.data();
                let mut ga = Tensor::zeros(out.shape());
                let d = ga.data_mut();
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |i: usize| o * len * inner + i * inner + j;
                        let total: T = (0..len).map(|i| g.data()[at(i)]).sum();
                        for i in 0..len {
                            d[at(i)] = g.data()[at(i)] - y[at(i)].exp() * total;
                        }
                    }
                }
                vec![(*a, ga)]
            }
            Op::LayerNorm {
                a,
                gain,
                bias,
                axis,
                normed,
                inv_std,
            } => {
                let s = out.shape();
                let (outer, len, inner) = axis_layout(s, *axis);
                let gam = val(gain).data();
                let n = T::of(len as f64);
                let mut dx = vec![T::zero(); out.numel()];
                let mut dg = vec![T::zero(); len];
                let mut db = vec![T::zero(); len];
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |i: usize| o * len * inner + i * inner + j;
                        let mut mean_dxh = T::zero();
                        let mut mean_dxh_xh = T::zero();
                        for i in 0..len {
                            let gv = g.data()[at(i)];
                            let xh = normed[at(i)];
                            dg[i] = dg[i] + gv * xh;
                            db[i] = db[i] + gv;
                            let dxh = gv * gam[i];
                            mean_dxh = mean_dxh + dxh;
                            mean_dxh_xh = mean_dxh_xh + dxh * xh;
                        }
                        mean_dxh = mean_dxh / n;
                        mean_dxh_xh = mean_dxh_xh / n;
                        let is = inv_std[o * inner + j];
                        for i in 0..len {
                            let dxh = g.data()[at(i)] * gam[i];
                            dx[at(i)] = is * (dxh - mean_dxh - normed[at(i)] * mean_dxh_xh);
                        }
                    }
                }
                vec![
                    (*a, Tensor::from_vec(s, dx)),
                    (*gain, Tensor::from_vec(&[len], dg)),
                    (*bias, Tensor::from_vec(&[len], db)),
                ]
            }
            Op::Relu { a } => {
                let ga = zip(g, val(a), |gv, x| if x > T::zero() { gv } else { T::zero() });
                vec![(*a, ga)]
            }
            Op::Sigmoid { a } => vec![(*a, zip(g, out, |gv, y| gv * y * (T::one() - y)))],
            Op::Tanh { a } => vec![(*a, zip(g, out, |gv, y| gv * (T::one() - y * y)))],
            Op::Elu { a } | Op::Pos { a } => {
                let ga = zip(g, val(a), |gv, x| if x > T::zero() { gv } else { gv * x.exp() });
                vec![(*a, ga)]
            }
            Op::Sqrt { a, eps } => {
                let x = val(a).data();
                let data = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .zip(x)
                    .map(|((&gv, &y), &xv)| {
                        if xv > *eps {
                            gv * T::of(0.5) / y
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                vec![(*a, Tensor::from_vec(out.shape(), data))]
            }
            Op::Square { a } => vec![(*a, zip(g, val(a), |gv, x| T::of(2.0) * x * gv))],
            Op::Exp { a } => vec![(*a, zip(g, out, |gv, y| gv * y))],
            Op::Log { a, eps } => {
                let ga = zip(g, val(a), |gv, x| if x > *eps { gv / x } else { T::zero() });
                vec![(*a, ga)]
            }
            Op::L2Normalize { a, axis, norms } => {
                let s = out.shape();
                let (outer, len, inner) = axis_layout(s, *axis);
                let y = out.data();
                let floor = T::of(1e-12);
                let mut ga = Tensor::zeros(s);
                let d = ga.data_mut();
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |i: usize| o * len * inner + i * inner + j;
                        let norm = norms[o * inner + j];
                        if norm <= floor {
                            for i in 0..len {
                                d[at(i)] = g.data()[at(i)] / norm;
                            }
                            continue;
                        }
                        let dot: T = (0..len).map(|i| g.data()[at(i)] * y[at(i)]).sum();
                        for i in 0..len {
                            d[at(i)] = (g.data()[at(i)] - y[at(i)] * dot) / norm;
                        }
                    }
                }
                vec![(*a, ga)]
            }
            Op::GatherRows { a, index } => {
                let s = val(a).shape();
                let w = val(a).row_width();
                let mut ga = Tensor::zeros(s);
                let d = ga.data_mut();
                for (r, &i) in index.iter().enumerate() {
                    let src = &g.data()[r * w..(r + 1) * w];
                    for (x, &gv) in d[i * w..(i + 1) * w].iter_mut().zip(src) {
                        *x = *x + gv;
                    }
                }
                vec![(*a, ga)]
            }
            Op::Pick { a, cols } => {
                let s = val(a).shape();
                let n = s[1];
                let mut ga = Tensor::zeros(s);
                let d = ga.data_mut();
                for (r, &c) in cols.iter().enumerate() {
                    d[r * n + c] = d[r * n + c] + g.data()[r];
                }
                vec![(*a, ga)]
            }
            Op::MaskedFill { a, mask } => {
                let data = g
                    .data()
                    .iter()
                    .zip(mask)
                    .map(|(&gv, &m)| if m { T::zero() } else { gv })
                    .collect();
                vec![(*a, Tensor::from_vec(g.shape(), data))]
            }
            Op::PairwiseSqDist { a, b } => {
                let (ta, tb) = (val(a), val(b));
                let (sa, sb) = (ta.shape(), tb.shape());
                let (batch, n, m, dim) = if sa.len() == 2 {
                    (1, sa[0], sb[0], sa[1])
                } else {
                    (sa[0], sa[1], sb[1], sa[2])
                };
                let (av, bv) = (ta.data(), tb.data());
                let mut da = vec![T::zero(); av.len()];
                let mut db = vec![T::zero(); bv.len()];
                let two = T::of(2.0);
                for bi in 0..batch {
                    for i in 0..n {
                        let ao = (bi * n + i) * dim;
                        for j in 0..m {
                            let gv = g.data()[(bi * n + i) * m + j];
                            if gv == T::zero() {
                                continue;
                            }
                            let bo = (bi * m + j) * dim;
                            for k in 0..dim {
                                let diff = two * gv * (av[ao + k] - bv[bo + k]);
                                da[ao + k] = da[ao + k] + diff;
                                db[bo + k] = db[bo + k] - diff;
                            }
                        }
                    }
                }
                vec![
                    (*a, Tensor::from_vec(sa, da)),
                    (*b, Tensor::from_vec(sb, db)),
                ]
            }
        }
    }
}

fn zip<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    crate::ops::zip_map(a, b, f)
}
