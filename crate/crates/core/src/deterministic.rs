//! Descriptive branch: contrastive refinement, feature sequences, the
//! hierarchical pivot transformer and session-level vanilla attention.
//!
//! Linear maps use the row convention `y = x·W + b` with `W: [in, out]`.
//! Batched activations are `[rows, seq, d]`.

use diffcore::{Binding, Scalar, Tape, Tensor, Var};

use crate::error::{Error, Result};

/// Affine layers in every MLP: `d → d → d → d` with ReLU in between.
pub const MLP_LAYERS: usize = 3;

pub fn linear<T: Scalar>(tape: &mut Tape<T>, p: &Binding, prefix: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{prefix}.w"))?;
    let y = tape.matmul(x, w)?;
    let bias = format!("{prefix}.b");
    if p.contains(&bias) {
        Ok(tape.add(y, p.get(&bias)?)?)
    } else {
        Ok(y)
    }
}

/// `prefix.0 … prefix.{layers-1}` affine maps with ReLU between them.
pub fn mlp<T: Scalar>(tape: &mut Tape<T>, p: &Binding, prefix: &str, x: Var, layers: usize) -> Result<Var> {
    let mut h = x;
    for i in 0..layers {
        h = linear(tape, p, &format!("{prefix}.{i}"), h)?;
        if i + 1 < layers {
            h = tape.relu(h)?;
        }
    }
    Ok(h)
}

/// InfoNCE with cosine similarity: anchor `i` must pick candidate
/// `positive[i]` among all candidates. Returns the mean over anchors of
/// `-log softmax(sim / tau)`; with `literal` the log is dropped and the
/// negated softmax ratio is averaged instead.
pub fn info_nce<T: Scalar>(
    tape: &mut Tape<T>,
    anchors: Var,
    candidates: Var,
    positive: &[usize],
    tau: f64,
    literal: bool,
) -> Result<Var> {
    let m = tape.shape(candidates)[0];
    if m < 2 {
        return Err(Error::ContrastiveBatch(m));
    }
    let sim = tape.cosine_similarity(anchors, candidates)?;
    let logits = tape.scale(sim, T::of(1.0 / tau))?;
    let picked = if literal {
        let s = tape.softmax(logits, 1)?;
        tape.pick(s, positive)?
    } else {
        let ls = tape.log_softmax(logits, 1)?;
        tape.pick(ls, positive)?
    };
    let mean = tape.mean_all(picked)?;
    Ok(tape.neg(mean)?)
}

/// Image term plus text term. Each term pairs an actual embedding with its own
/// pseudo embedding in the same space; the other rows of the pseudo matrix are
/// negatives.
pub fn contrastive_loss<T: Scalar>(
    tape: &mut Tape<T>,
    img: Var,
    pseimg: Var,
    txt: Var,
    psetxt: Var,
    tau: f64,
    literal: bool,
) -> Result<Var> {
    let b = tape.shape(img)[0];
    let diag: Vec<usize> = (0..b).collect();
    let li = info_nce(tape, img, pseimg, &diag, tau, literal)?;
    let lt = info_nce(tape, txt, psetxt, &diag, tau, literal)?;
    Ok(tape.add(li, lt)?)
}

/// Contrastive loss of the stored rows `batch` of four `[n, d]` matrices,
/// without any trainable refinement.
pub fn contrastive_loss_raw(
    img: &Tensor<f64>,
    pseimg: &Tensor<f64>,
    txt: &Tensor<f64>,
    psetxt: &Tensor<f64>,
    batch: &[usize],
    tau: f64,
) -> Result<f64> {
    if batch.len() < 2 {
        return Err(Error::ContrastiveBatch(batch.len()));
    }
    let mut tape = Tape::<f64>::new();
    let mut rows = |t: &Tensor<f64>| -> Result<Var> {
        let c = tape.constant(t.clone());
        Ok(tape.gather_rows(c, batch)?)
    };
    let (a, b, c, d) = (rows(img)?, rows(pseimg)?, rows(txt)?, rows(psetxt)?);
    let loss = contrastive_loss(&mut tape, a, b, c, d, tau, false)?;
    Ok(tape.value(loss).item())
}

/// `[n, d] → [n, C, d]`: row `k` of item `i` is `MLP_k(x_i)`.
pub fn feature_sequence<T: Scalar>(tape: &mut Tape<T>, p: &Binding, prefix: &str, x: Var, c: usize) -> Result<Var> {
    let (n, d) = (tape.shape(x)[0], tape.shape(x)[1]);
    let mut rows = Vec::with_capacity(c);
    for k in 0..c {
        let y = mlp(tape, p, &format!("{prefix}.{k}"), x, MLP_LAYERS)?;
        rows.push(tape.reshape(y, &[n, 1, d])?);
    }
    Ok(tape.concat(&rows, 1)?)
}

/// Pre-LN block: `F* = MSA(LN(F)) + F`, `out = FCL(LN(F*)) + F*`.
/// The FCL is `d → 2d → d` with ReLU. No positional information is used.
pub fn transformer_layer<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Binding,
    prefix: &str,
    f: Var,
    heads: usize,
) -> Result<Var> {
    let d = *tape.shape(f).last().expect("rank 3");
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("d={d} is not divisible by heads={heads}")));
    }
    let dh = d / heads;
    let g = |name: &str| p.get(&format!("{prefix}.{name}"));

    let x = tape.layer_norm(f, g("ln1.g")?, g("ln1.b")?, 2)?;
    let q = linear(tape, p, &format!("{prefix}.q"), x)?;
    let k = linear(tape, p, &format!("{prefix}.k"), x)?;
    let v = linear(tape, p, &format!("{prefix}.v"), x)?;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice(q, 2, h * dh, dh)?;
        let kh = tape.slice(k, 2, h * dh, dh)?;
        let vh = tape.slice(v, 2, h * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let s = tape.matmul(qh, kt)?;
        let s = tape.scale(s, T::of(1.0 / (dh as f64).sqrt()))?;
        let a = tape.softmax(s, 2)?;
        outs.push(tape.matmul(a, vh)?);
    }
    let o = if heads == 1 { outs[0] } else { tape.concat(&outs, 2)? };
    let o = linear(tape, p, &format!("{prefix}.o"), o)?;
    let f_star = tape.add(o, f)?;

    let y = tape.layer_norm(f_star, g("ln2.g")?, g("ln2.b")?, 2)?;
    let y = linear(tape, p, &format!("{prefix}.fc1"), y)?;
    let y = tape.relu(y)?;
    let y = linear(tape, p, &format!("{prefix}.fc2"), y)?;
    Ok(tape.add(y, f_star)?)
}

/// Shape of the pivot-transformer stack.
#[derive(Clone, Copy, Debug)]
pub struct PivotShape {
    pub layers: usize,
    pub tokens: usize,
    pub heads: usize,
}

/// Runs the pivot stack and returns the final pivot tokens `[n, T, d]`.
/// Each layer passes the pivot through the image sequence, averages, then
/// through the text sequence and averages again. A missing modality skips
/// its half of every layer.
pub fn pivot_stack<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Binding,
    z_img: Option<Var>,
    z_txt: Option<Var>,
    n: usize,
    shape: PivotShape,
) -> Result<Var> {
    let pivot = p.get("det.pivot")?;
    let (t, d) = (tape.shape(pivot)[0], tape.shape(pivot)[1]);
    if t != shape.tokens {
        return Err(Error::Config(format!("pivot has {t} tokens, expected {}", shape.tokens)));
    }
    let flat = tape.reshape(pivot, &[1, t * d])?;
    let tiled = tape.gather_rows(flat, &vec![0; n])?;
    let mut piv = tape.reshape(tiled, &[n, t, d])?;
    let (mut zi, mut zt) = (z_img, z_txt);

    let half = T::of(0.5);
    for l in 0..shape.layers {
        let through = |tape: &mut Tape<T>, z: Var, pv: Var, side: &str| -> Result<(Var, Var)> {
            let c = tape.shape(z)[1];
            let x = tape.concat(&[z, pv], 1)?;
            let y = transformer_layer(tape, p, &format!("det.hpt.{l}.{side}"), x, shape.heads)?;
            let parts = tape.split(y, 1, &[c, t])?;
            let sum = tape.add(parts[1], pv)?;
            Ok((parts[0], tape.scale(sum, half)?))
        };
        let p_star = match zi {
            Some(z) => {
                let (z_next, ps) = through(tape, z, piv, "img")?;
                zi = Some(z_next);
                ps
            }
            None => piv,
        };
        piv = match zt {
            Some(z) => {
                let (z_next, pn) = through(tape, z, p_star, "txt")?;
                zt = Some(z_next);
                pn
            }
            None => p_star,
        };
    }
    Ok(piv)
}

/// Final pivot tokens concatenated and passed through `det.out_mlp`.
pub fn pivot_fusion<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Binding,
    z_img: Option<Var>,
    z_txt: Option<Var>,
    n: usize,
    shape: PivotShape,
) -> Result<Var> {
    let piv = pivot_stack(tape, p, z_img, z_txt, n, shape)?;
    let (t, d) = (tape.shape(piv)[1], tape.shape(piv)[2]);
    let flat = tape.reshape(piv, &[n, t * d])?;
    mlp(tape, p, "det.out_mlp", flat, MLP_LAYERS)
}

/// Per-modality MLP maps, concatenated and fused by a `2d → d → d → d` MLP.
pub fn mlp_fusion<T: Scalar>(tape: &mut Tape<T>, p: &Binding, x_img: Var, x_txt: Var) -> Result<Var> {
    let a = mlp(tape, p, "det.fuse.img", x_img, MLP_LAYERS)?;
    let b = mlp(tape, p, "det.fuse.txt", x_txt, MLP_LAYERS)?;
    let cat = tape.concat(&[a, b], 1)?;
    mlp(tape, p, "det.fuse.out", cat, MLP_LAYERS)
}

/// `[B, L, d]` constant with ones on the first `lens[b]` rows of each batch entry.
pub fn length_mask<T: Scalar>(lens: &[usize], l: usize, width: usize) -> Tensor<T> {
    let mut m = Tensor::zeros(&[lens.len(), l, width]);
    for (b, &len) in lens.iter().enumerate() {
        let start = b * l * width;
        m.data_mut()[start..start + len.min(l) * width].fill(T::one());
    }
    m
}

/// `s_d = Σ_k α_k e_k` with `α_k = u · sigmoid(e_k A1 + ē A2 + b)` and `ē`
/// the mean of the valid rows. Weights are not normalized. Rows at or past
/// `lens[b]` are padding and are excluded from both the mean and the sum.
pub fn vanilla_attention<T: Scalar>(tape: &mut Tape<T>, p: &Binding, e: Var, lens: &[usize]) -> Result<Var> {
    let s = tape.shape(e).to_vec();
    let (bsz, l, d) = (s[0], s[1], s[2]);
    if lens.len() != bsz || lens.iter().any(|&n| n == 0 || n > l) {
        return Err(Error::Config(format!("session lengths {lens:?} invalid for padded length {l}")));
    }
    let mask = tape.constant(length_mask(lens, l, d));
    let masked = tape.mul(e, mask)?;
    let total = tape.sum(masked, 1)?;
    let inv = Tensor::from_fn(&[bsz, d], |i| T::of(1.0 / lens[i / d] as f64));
    let inv = tape.constant(inv);
    let e_bar = tape.mul(total, inv)?;

    let a1 = tape.matmul(e, p.get("det.va.a1")?)?;
    let a2 = tape.matmul(e_bar, p.get("det.va.a2")?)?;
    let rows: Vec<usize> = (0..bsz).flat_map(|b| std::iter::repeat_n(b, l)).collect();
    let a2 = tape.gather_rows(a2, &rows)?;
    let a2 = tape.reshape(a2, &[bsz, l, d])?;
    let pre = tape.add(a1, a2)?;
    let pre = tape.add(pre, p.get("det.va.b")?)?;
    let gate = tape.sigmoid(pre)?;
    let u = tape.reshape(p.get("det.va.u")?, &[d, 1])?;
    let alpha = tape.matmul(gate, u)?;
    let col_mask = tape.constant(length_mask(lens, l, 1));
    let alpha = tape.mul(alpha, col_mask)?;
    let at = tape.transpose(alpha)?;
    let sd = tape.matmul(at, e)?;
    Ok(tape.reshape(sd, &[bsz, d])?)
}
