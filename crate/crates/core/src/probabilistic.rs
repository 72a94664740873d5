//! Price branch: diagonal-Gaussian price embeddings, the closed-form
//! 2-Wasserstein distance and Wasserstein self-attention.

use diffcore::{Binding, Scalar, Tape, Tensor, Var, MASK_FILL};

use crate::error::{Error, Result};

/// Clamp applied to squared distances before the square root.
pub const SQRT_EPS: f64 = 1e-12;

/// A diagonal Gaussian with plain values; `sigma` holds the covariance diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl Gaussian {
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>) -> Self {
        debug_assert_eq!(mu.len(), sigma.len());
        Self { mu, sigma }
    }
}

/// `sqrt(‖μ1 − μ2‖² + ‖σ1^½ − σ2^½‖²)`.
pub fn w2_distance(a: &Gaussian, b: &Gaussian) -> f64 {
    let mean: f64 = a.mu.iter().zip(&b.mu).map(|(x, y)| (x - y).powi(2)).sum();
    let cov: f64 = a
        .sigma
        .iter()
        .zip(&b.sigma)
        .map(|(x, y)| (x.sqrt() - y.sqrt()).powi(2))
        .sum();
    (mean + cov).max(0.0).sqrt()
}

/// Rows of Gaussians on a tape: means and covariance diagonals of equal shape.
#[derive(Clone, Copy, Debug)]
pub struct GaussVars {
    pub mu: Var,
    pub sigma: Var,
}

fn check_range(what: &'static str, index: &[usize], size: usize) -> Result<()> {
    match index.iter().find(|&&i| i >= size) {
        Some(&i) => Err(Error::OutOfRange { what, index: i, size }),
        None => Ok(()),
    }
}

/// Per item: `μ = mu_table[level] + cat`, `σ = pos(sigma_raw[level] + cat)`.
pub fn price_embed<T: Scalar>(tape: &mut Tape<T>, p: &Binding, levels: &[usize], cats: &[usize]) -> Result<GaussVars> {
    let mu_table = p.get("prob.price.mu")?;
    let sigma_table = p.get("prob.price.sigma")?;
    let cat_table = p.get("prob.category")?;
    check_range("price level", levels, tape.shape(mu_table)[0])?;
    check_range("category", cats, tape.shape(cat_table)[0])?;
    let cat = tape.gather_rows(cat_table, cats)?;
    let mu = tape.gather_rows(mu_table, levels)?;
    let mu = tape.add(mu, cat)?;
    let raw = tape.gather_rows(sigma_table, levels)?;
    let raw = tape.add(raw, cat)?;
    let sigma = tape.pos(raw)?;
    Ok(GaussVars { mu, sigma })
}

/// Point price vectors `mu_table[level] + cat`.
pub fn price_point<T: Scalar>(tape: &mut Tape<T>, p: &Binding, levels: &[usize], cats: &[usize]) -> Result<Var> {
    let mu_table = p.get("prob.price.mu")?;
    let cat_table = p.get("prob.category")?;
    check_range("price level", levels, tape.shape(mu_table)[0])?;
    check_range("category", cats, tape.shape(cat_table)[0])?;
    let cat = tape.gather_rows(cat_table, cats)?;
    let mu = tape.gather_rows(mu_table, levels)?;
    Ok(tape.add(mu, cat)?)
}

/// Pairwise W2 between the rows of `a` and `b` (`[n,d]×[m,d] → [n,m]`,
/// or batched).
pub fn w2_pairwise<T: Scalar>(tape: &mut Tape<T>, a: GaussVars, b: GaussVars) -> Result<Var> {
    let dm = tape.pairwise_sq_dist(a.mu, b.mu)?;
    let ra = tape.sqrt(a.sigma, T::of(SQRT_EPS))?;
    let rb = tape.sqrt(b.sigma, T::of(SQRT_EPS))?;
    let ds = tape.pairwise_sq_dist(ra, rb)?;
    let total = tape.add(dm, ds)?;
    Ok(tape.sqrt(total, T::of(SQRT_EPS))?)
}

fn gauss_map<T: Scalar>(tape: &mut Tape<T>, p: &Binding, role: &str, g: GaussVars) -> Result<GaussVars> {
    let mu = tape.matmul(g.mu, p.get(&format!("prob.wsa.{role}.mu"))?)?;
    let s = tape.matmul(g.sigma, p.get(&format!("prob.wsa.{role}.sigma"))?)?;
    Ok(GaussVars {
        mu,
        sigma: tape.pos(s)?,
    })
}

/// Key-position mask for `[B, L, L]` attention: `true` where key `j` is padding.
fn key_padding(lens: &[usize], l: usize) -> Vec<bool> {
    let mut mask = Vec::with_capacity(lens.len() * l * l);
    for &len in lens {
        for _ in 0..l {
            mask.extend((0..l).map(|j| j >= len));
        }
    }
    mask
}

/// Wasserstein self-attention over `[B, L, d]` sequences. Returns the output
/// Gaussians and the attention weights `[B, L, L]`.
///
/// Default weights are `softmax_j(−W2(q_i, k_j))` over valid keys; with
/// `literal` the raw distances are used unnormalized. Means are mixed with
/// `w`, covariances with `w²`.
pub fn wasserstein_self_attention<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Binding,
    seq: GaussVars,
    lens: &[usize],
    literal: bool,
) -> Result<(GaussVars, Var)> {
    let s = tape.shape(seq.mu).to_vec();
    let (bsz, l) = (s[0], s[1]);
    if lens.len() != bsz || lens.iter().any(|&n| n == 0 || n > l) {
        return Err(Error::Config(format!("session lengths {lens:?} invalid for padded length {l}")));
    }
    let q = gauss_map(tape, p, "q", seq)?;
    let k = gauss_map(tape, p, "k", seq)?;
    let v = gauss_map(tape, p, "v", seq)?;
    let dist = w2_pairwise(tape, q, k)?;
    let pad = key_padding(lens, l);
    let w = if literal {
        let keep = Tensor::from_fn(&[bsz, l, l], |i| if pad[i] { T::zero() } else { T::one() });
        let keep = tape.constant(keep);
        tape.mul(dist, keep)?
    } else {
        let neg = tape.neg(dist)?;
        let masked = tape.masked_fill(neg, &pad, T::of(MASK_FILL))?;
        tape.softmax(masked, 2)?
    };
    let w2 = tape.square(w)?;
    let mu = tape.matmul(w, v.mu)?;
    let sigma = tape.matmul(w2, v.sigma)?;
    Ok((GaussVars { mu, sigma }, w))
}

/// Row `lens[b] − 1` of every batch entry: `[B, L, d] → [B, d]`.
pub fn last_valid<T: Scalar>(tape: &mut Tape<T>, x: Var, lens: &[usize]) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (bsz, l, d) = (s[0], s[1], s[2]);
    if lens.len() != bsz || lens.iter().any(|&n| n == 0 || n > l) {
        return Err(Error::Config(format!("cannot take the last position of lengths {lens:?}")));
    }
    let flat = tape.reshape(x, &[bsz * l, d])?;
    let rows: Vec<usize> = lens.iter().enumerate().map(|(b, &n)| b * l + n - 1).collect();
    Ok(tape.gather_rows(flat, &rows)?)
}

/// The acceptable price range: the attention output at the last real position.
pub fn user_price_range<T: Scalar>(tape: &mut Tape<T>, h: GaussVars, lens: &[usize]) -> Result<GaussVars> {
    Ok(GaussVars {
        mu: last_valid(tape, h.mu, lens)?,
        sigma: last_valid(tape, h.sigma, lens)?,
    })
}

/// Scaled dot-product self-attention over point vectors `[B, L, d]`, used by
/// the point-price ablation.
pub fn dot_self_attention<T: Scalar>(tape: &mut Tape<T>, p: &Binding, x: Var, lens: &[usize]) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (bsz, l, d) = (s[0], s[1], s[2]);
    let q = tape.matmul(x, p.get("prob.sa.q")?)?;
    let k = tape.matmul(x, p.get("prob.sa.k")?)?;
    let v = tape.matmul(x, p.get("prob.sa.v")?)?;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, T::of(1.0 / (d as f64).sqrt()))?;
    let pad = key_padding(lens, l);
    debug_assert_eq!(pad.len(), bsz * l * l);
    let masked = tape.masked_fill(scores, &pad, T::of(MASK_FILL))?;
    let w = tape.softmax(masked, 2)?;
    Ok(tape.matmul(w, v)?)
}
