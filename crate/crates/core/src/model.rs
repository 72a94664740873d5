//! Parameter layout and the full forward pass: catalog representations,
//! session scoring and the joint objective.

use diffcore::{Binding, ModelParams, Scalar, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{HyperParams, Negatives, Variant};
use crate::dataset::SessionCorpus;
use crate::deterministic::{
    feature_sequence, info_nce, linear, mlp, mlp_fusion, pivot_fusion, vanilla_attention, PivotShape, MLP_LAYERS,
};
use crate::embedding::ModalityBundle;
use crate::error::{Error, Result};
use crate::probabilistic::{
    dot_self_attention, last_valid, price_embed, price_point, user_price_range, w2_pairwise,
    wasserstein_self_attention, GaussVars,
};

/// Floor applied to probabilities before taking logs in the losses.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    Uniform,
    Ones,
    Zeros,
}

fn push_linear(out: &mut Vec<(String, Vec<usize>, Init)>, prefix: &str, fan_in: usize, fan_out: usize, bias: bool) {
    out.push((format!("{prefix}.w"), vec![fan_in, fan_out], Init::Uniform));
    if bias {
        out.push((format!("{prefix}.b"), vec![fan_out], Init::Zeros));
    }
}

fn push_mlp(out: &mut Vec<(String, Vec<usize>, Init)>, prefix: &str, fan_in: usize, d: usize) {
    for i in 0..MLP_LAYERS {
        push_linear(out, &format!("{prefix}.{i}"), if i == 0 { fan_in } else { d }, d, true);
    }
}

fn push_transformer(out: &mut Vec<(String, Vec<usize>, Init)>, prefix: &str, d: usize) {
    for ln in ["ln1", "ln2"] {
        out.push((format!("{prefix}.{ln}.g"), vec![d], Init::Ones));
        out.push((format!("{prefix}.{ln}.b"), vec![d], Init::Zeros));
    }
    for m in ["q", "k", "v", "o"] {
        push_linear(out, &format!("{prefix}.{m}"), d, d, true);
    }
    push_linear(out, &format!("{prefix}.fc1"), d, 2 * d, true);
    push_linear(out, &format!("{prefix}.fc2"), 2 * d, d, true);
}

/// Every parameter of the full model plus the extra parameters a variant
/// needs. Parameters an ablation bypasses stay in the set and simply receive
/// zero gradient.
fn layout(h: &HyperParams, variant: Variant, n_categories: usize) -> Vec<(String, Vec<usize>, Init)> {
    let d = h.d;
    let mut out = Vec::new();
    for m in ["img", "txt"] {
        push_linear(&mut out, &format!("det.refine.{m}"), d, d, true);
        push_linear(&mut out, &format!("det.con_head.{m}"), d, d, false);
        for k in 0..h.c_features {
            push_mlp(&mut out, &format!("det.feat.{m}.{k}"), d, d);
        }
    }
    for l in 0..h.r_layers {
        for m in ["img", "txt"] {
            push_transformer(&mut out, &format!("det.hpt.{l}.{m}"), d);
        }
    }
    out.push(("det.pivot".into(), vec![h.t_pivot, d], Init::Uniform));
    push_mlp(&mut out, "det.out_mlp", h.t_pivot * d, d);
    out.push(("det.va.u".into(), vec![d], Init::Uniform));
    out.push(("det.va.a1".into(), vec![d, d], Init::Uniform));
    out.push(("det.va.a2".into(), vec![d, d], Init::Uniform));
    out.push(("det.va.b".into(), vec![d], Init::Zeros));

    out.push(("prob.price.mu".into(), vec![h.rho, d], Init::Uniform));
    out.push(("prob.price.sigma".into(), vec![h.rho, d], Init::Zeros));
    out.push(("prob.category".into(), vec![n_categories, d], Init::Uniform));
    for role in ["q", "k", "v"] {
        for part in ["mu", "sigma"] {
            out.push((format!("prob.wsa.{role}.{part}"), vec![d, d], Init::Uniform));
        }
    }

    match variant {
        Variant::PseDirect => push_mlp(&mut out, "det.pse_proj", d, d),
        Variant::MlpFusion => {
            push_mlp(&mut out, "det.fuse.img", d, d);
            push_mlp(&mut out, "det.fuse.txt", d, d);
            push_mlp(&mut out, "det.fuse.out", 2 * d, d);
        }
        Variant::DePrice => {
            for role in ["q", "k", "v"] {
                out.push((format!("prob.sa.{role}"), vec![d, d], Init::Uniform));
            }
        }
        _ => {}
    }
    out
}

fn name_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a, so each tensor's draw is independent of which others exist
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Weights uniform in `[−1/√d, 1/√d]`, layer-norm gains 1, biases 0, raw
/// price covariances 0.
pub fn init_params(h: &HyperParams, variant: Variant, n_categories: usize, seed: u64) -> Result<ModelParams<f64>> {
    h.validate()?;
    if n_categories == 0 {
        return Err(Error::Config("the catalog has no categories".into()));
    }
    let bound = 1.0 / (h.d as f64).sqrt();
    let mut params = ModelParams::new();
    for (name, shape, init) in layout(h, variant, n_categories) {
        let t = match init {
            Init::Ones => Tensor::ones(&shape),
            Init::Zeros => Tensor::zeros(&shape),
            Init::Uniform => {
                let mut rng = ChaCha8Rng::seed_from_u64(name_seed(seed, &name));
                Tensor::from_fn(&shape, |_| rng.random_range(-bound..=bound))
            }
        };
        params.insert(name, t);
    }
    Ok(params)
}

/// Fixed per-item model inputs in catalog row order.
#[derive(Clone, Debug)]
pub struct ModelInputs<T> {
    pub img: Tensor<T>,
    pub txt: Tensor<T>,
    pub pseimg: Tensor<T>,
    pub psetxt: Tensor<T>,
    pub levels: Vec<usize>,
    pub cats: Vec<usize>,
}

impl<T: Scalar> ModelInputs<T> {
    pub fn new(bundle: &ModalityBundle, corpus: &SessionCorpus) -> Result<Self> {
        if bundle.n() != corpus.n_items() {
            return Err(Error::Config(format!(
                "embeddings have {} rows but the catalog has {} items",
                bundle.n(),
                corpus.n_items()
            )));
        }
        let (levels, cats) = corpus.price_features()?;
        Ok(Self {
            img: bundle.img.to_tensor(),
            txt: bundle.txt.to_tensor(),
            pseimg: bundle.pseimg.to_tensor(),
            psetxt: bundle.psetxt.to_tensor(),
            levels,
            cats,
        })
    }

    pub fn n(&self) -> usize {
        self.levels.len()
    }

    pub fn d(&self) -> usize {
        self.img.shape()[1]
    }
}

#[derive(Clone, Copy, Debug)]
pub enum PriceVars {
    Gauss(GaussVars),
    Point(Var),
    Off,
}

/// Catalog-wide representations on a tape.
#[derive(Clone, Copy, Debug)]
pub struct CatalogVars {
    /// Descriptive embedding per item, `[n, d]`.
    pub e: Var,
    pub price: PriceVars,
    /// Refined actual embeddings, `[n, d]`.
    pub img: Var,
    pub txt: Var,
}

/// Catalog values detached from their tape, for scoring many batches.
#[derive(Clone, Debug)]
pub struct FrozenCatalog<T> {
    e: Tensor<T>,
    price: Option<(Tensor<T>, Option<Tensor<T>>)>,
}

impl<T: Scalar> FrozenCatalog<T> {
    pub fn freeze(tape: &Tape<T>, c: &CatalogVars) -> Self {
        let price = match c.price {
            PriceVars::Gauss(g) => Some((tape.value(g.mu).clone(), Some(tape.value(g.sigma).clone()))),
            PriceVars::Point(v) => Some((tape.value(v).clone(), None)),
            PriceVars::Off => None,
        };
        Self {
            e: tape.value(c.e).clone(),
            price,
        }
    }

    pub fn load(&self, tape: &mut Tape<T>) -> CatalogVars {
        let e = tape.constant(self.e.clone());
        let price = match &self.price {
            Some((mu, Some(sigma))) => PriceVars::Gauss(GaussVars {
                mu: tape.constant(mu.clone()),
                sigma: tape.constant(sigma.clone()),
            }),
            Some((v, None)) => PriceVars::Point(tape.constant(v.clone())),
            None => PriceVars::Off,
        };
        CatalogVars { e, price, img: e, txt: e }
    }

    pub fn embeddings(&self) -> &Tensor<T> {
        &self.e
    }
}

/// Loss terms of one mini-batch.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub rec: Var,
    pub con: Option<Var>,
    pub total: Var,
}

/// Padded context batch: catalog rows (pad = row 0) and true lengths.
fn pad_contexts(contexts: &[Vec<usize>]) -> Result<(Vec<usize>, Vec<usize>, usize)> {
    let l = contexts.iter().map(Vec::len).max().unwrap_or(0);
    if contexts.is_empty() || contexts.iter().any(Vec::is_empty) {
        return Err(Error::Config("every session needs at least one context item".into()));
    }
    let mut rows = Vec::with_capacity(contexts.len() * l);
    for c in contexts {
        rows.extend_from_slice(c);
        rows.extend(std::iter::repeat_n(0, l - c.len()));
    }
    Ok((rows, contexts.iter().map(Vec::len).collect(), l))
}

/// Read-only model description: hyperparameters, wiring and fixed inputs.
pub struct Model<'a, T> {
    pub hyper: &'a HyperParams,
    pub variant: Variant,
    pub inputs: &'a ModelInputs<T>,
    /// Catalog rows that logits range over; all rows when `None`.
    candidates: Option<Vec<usize>>,
}

impl<'a, T: Scalar> Model<'a, T> {
    pub fn new(hyper: &'a HyperParams, variant: Variant, inputs: &'a ModelInputs<T>) -> Result<Self> {
        hyper.validate()?;
        if inputs.d() != hyper.d {
            return Err(Error::Config(format!(
                "embeddings have width {} but d={}",
                inputs.d(),
                hyper.d
            )));
        }
        Ok(Self {
            hyper,
            variant,
            inputs,
            candidates: None,
        })
    }

    /// Restricts logits (and so the softmax) to the given catalog rows, in
    /// that order. Training uses this to leave out items it never sees.
    pub fn with_candidates(mut self, rows: Vec<usize>) -> Result<Self> {
        let n = self.inputs.n();
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::OutOfRange {
                what: "candidate row",
                index: bad,
                size: n,
            });
        }
        if rows.is_empty() {
            return Err(Error::Config("the candidate set is empty".into()));
        }
        self.candidates = Some(rows);
        Ok(self)
    }

    pub fn candidates(&self) -> Option<&[usize]> {
        self.candidates.as_deref()
    }

    fn shape(&self) -> PivotShape {
        PivotShape {
            layers: self.hyper.r_layers,
            tokens: self.hyper.t_pivot,
            heads: self.hyper.heads,
        }
    }

    /// Descriptive and price representations for every catalog item.
    pub fn catalog(&self, tape: &mut Tape<T>, p: &Binding) -> Result<CatalogVars> {
        let n = self.inputs.n();
        let img = tape.constant(self.inputs.img.clone());
        let txt = tape.constant(self.inputs.txt.clone());
        let img = linear(tape, p, "det.refine.img", img)?;
        let txt = linear(tape, p, "det.refine.txt", txt)?;

        let e = if self.variant == Variant::MlpFusion {
            mlp_fusion(tape, p, img, txt)?
        } else {
            let c = self.hyper.c_features;
            let zi = match self.variant.uses_image() {
                true => Some(feature_sequence(tape, p, "det.feat.img", img, c)?),
                false => None,
            };
            let zt = match self.variant.uses_text() {
                true => Some(feature_sequence(tape, p, "det.feat.txt", txt, c)?),
                false => None,
            };
            pivot_fusion(tape, p, zi, zt, n, self.shape())?
        };

        let (levels, cats) = (&self.inputs.levels, &self.inputs.cats);
        let price = match self.variant {
            Variant::WoPrice => PriceVars::Off,
            Variant::DePrice => PriceVars::Point(price_point(tape, p, levels, cats)?),
            _ => PriceVars::Gauss(price_embed(tape, p, levels, cats)?),
        };
        Ok(CatalogVars { e, price, img, txt })
    }

    /// Logits `[B, n]` for each context: `e_i·s_d ± W2(e_i^pri, s_p)`. With a
    /// candidate set, column `j` belongs to candidate `j`.
    pub fn logits(&self, tape: &mut Tape<T>, p: &Binding, cat: &CatalogVars, contexts: &[Vec<usize>]) -> Result<Var> {
        let (rows, lens, l) = pad_contexts(contexts)?;
        let bsz = contexts.len();
        let d = self.hyper.d;
        let pick = |tape: &mut Tape<T>, v: Var| -> Result<Var> {
            match &self.candidates {
                Some(c) => Ok(tape.gather_rows(v, c)?),
                None => Ok(v),
            }
        };
        let seq = tape.gather_rows(cat.e, &rows)?;
        let seq = tape.reshape(seq, &[bsz, l, d])?;
        let s_d = vanilla_attention(tape, p, seq, &lens)?;
        let e_c = pick(tape, cat.e)?;
        let e_t = tape.transpose(e_c)?;
        let dot = tape.matmul(s_d, e_t)?;

        match cat.price {
            PriceVars::Off => Ok(dot),
            PriceVars::Gauss(g) => {
                let mu = tape.gather_rows(g.mu, &rows)?;
                let mu = tape.reshape(mu, &[bsz, l, d])?;
                let sigma = tape.gather_rows(g.sigma, &rows)?;
                let sigma = tape.reshape(sigma, &[bsz, l, d])?;
                let (h, _) = wasserstein_self_attention(tape, p, GaussVars { mu, sigma }, &lens, self.hyper.literal_eq23)?;
                let s_p = user_price_range(tape, h, &lens)?;
                let g_c = GaussVars {
                    mu: pick(tape, g.mu)?,
                    sigma: pick(tape, g.sigma)?,
                };
                let dist = w2_pairwise(tape, s_p, g_c)?;
                let term = tape.scale(dist, T::of(self.hyper.sign_w2.value()))?;
                Ok(tape.add(dot, term)?)
            }
            PriceVars::Point(v) => {
                let x = tape.gather_rows(v, &rows)?;
                let x = tape.reshape(x, &[bsz, l, d])?;
                let h = dot_self_attention(tape, p, x, &lens)?;
                let s_p = last_valid(tape, h, &lens)?;
                let v_c = pick(tape, v)?;
                let vt = tape.transpose(v_c)?;
                let price = tape.matmul(s_p, vt)?;
                Ok(tape.add(dot, price)?)
            }
        }
    }

    /// Recommendation loss of `logits` against `targets` (catalog rows).
    pub fn rec_loss(&self, tape: &mut Tape<T>, logits: Var, targets: &[usize]) -> Result<Var> {
        rec_loss(tape, logits, targets, self.hyper.literal_eq26)
    }

    /// Contrastive term over the distinct catalog rows in `items`.
    pub fn contrastive(&self, tape: &mut Tape<T>, p: &Binding, cat: &CatalogVars, items: &[usize]) -> Result<Var> {
        let h = self.hyper;
        if self.variant == Variant::PseDirect {
            let a = tape.gather_rows(cat.img, items)?;
            let b = tape.gather_rows(cat.txt, items)?;
            let a = mlp(tape, p, "det.pse_proj", a, MLP_LAYERS)?;
            let b = mlp(tape, p, "det.pse_proj", b, MLP_LAYERS)?;
            let diag: Vec<usize> = (0..items.len()).collect();
            let ab = info_nce(tape, a, b, &diag, h.tau, h.literal_eq6)?;
            let ba = info_nce(tape, b, a, &diag, h.tau, h.literal_eq6)?;
            return Ok(tape.add(ab, ba)?);
        }
        let term = |tape: &mut Tape<T>, actual: Var, pseudo: &Tensor<T>, m: &str| -> Result<Var> {
            let refine = format!("det.refine.{m}");
            let head = format!("det.con_head.{m}");
            let anchors = tape.gather_rows(actual, items)?;
            let anchors = linear(tape, p, &head, anchors)?;
            let pse = tape.constant(pseudo.clone());
            let (cands, positive) = match h.negatives {
                Negatives::Batch => (tape.gather_rows(pse, items)?, (0..items.len()).collect::<Vec<_>>()),
                Negatives::Catalog => (pse, items.to_vec()),
            };
            let cands = linear(tape, p, &refine, cands)?;
            let cands = linear(tape, p, &head, cands)?;
            info_nce(tape, anchors, cands, &positive, h.tau, h.literal_eq6)
        };
        let li = term(tape, cat.img, &self.inputs.pseimg, "img")?;
        let lt = term(tape, cat.txt, &self.inputs.psetxt, "txt")?;
        Ok(tape.add(li, lt)?)
    }

    /// `L_rec + λ·L_con` for one batch of (context, target) pairs.
    pub fn loss(&self, tape: &mut Tape<T>, p: &Binding, contexts: &[Vec<usize>], targets: &[usize]) -> Result<LossVars> {
        let cat = self.catalog(tape, p)?;
        let logits = self.logits(tape, p, &cat, contexts)?;
        let columns = match &self.candidates {
            Some(c) => targets
                .iter()
                .map(|&t| {
                    c.iter().position(|&r| r == t).ok_or(Error::OutOfRange {
                        what: "target outside the candidate set",
                        index: t,
                        size: c.len(),
                    })
                })
                .collect::<Result<Vec<_>>>()?,
            None => targets.to_vec(),
        };
        let rec = self.rec_loss(tape, logits, &columns)?;
        let lambda = self.variant.lambda(self.hyper.lambda);
        if lambda == 0.0 {
            return Ok(LossVars { rec, con: None, total: rec });
        }
        let mut items: Vec<usize> = contexts.iter().flatten().chain(targets).copied().collect();
        items.sort_unstable();
        items.dedup();
        if items.len() < 2 {
            return Ok(LossVars { rec, con: None, total: rec });
        }
        let con = self.contrastive(tape, p, &cat, &items)?;
        let total = joint_loss(tape, rec, con, lambda)?;
        Ok(LossVars {
            rec,
            con: Some(con),
            total,
        })
    }

    /// Logits for many sessions, computed in chunks against one catalog pass.
    /// Chunks run on the current rayon pool and are reassembled in order.
    pub fn score(&self, params: &ModelParams<T>, contexts: &[Vec<usize>], chunk: usize) -> Result<Vec<Vec<T>>> {
        let frozen = self.freeze_catalog(params)?;
        let parts = contexts
            .par_chunks(chunk.max(1))
            .map(|part| self.score_frozen(params, &frozen, part))
            .collect::<Result<Vec<_>>>()?;
        Ok(parts.into_iter().flatten().collect())
    }

    pub fn freeze_catalog(&self, params: &ModelParams<T>) -> Result<FrozenCatalog<T>> {
        let mut tape = Tape::new();
        let p = params.bind(&mut tape);
        let cat = self.catalog(&mut tape, &p)?;
        Ok(FrozenCatalog::freeze(&tape, &cat))
    }

    pub fn score_frozen(
        &self,
        params: &ModelParams<T>,
        frozen: &FrozenCatalog<T>,
        contexts: &[Vec<usize>],
    ) -> Result<Vec<Vec<T>>> {
        if contexts.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let p = params.bind(&mut tape);
        let cat = frozen.load(&mut tape);
        let logits = self.logits(&mut tape, &p, &cat, contexts)?;
        let t = tape.value(logits);
        Ok((0..contexts.len()).map(|b| t.row(b).to_vec()).collect())
    }
}

/// Cross-entropy `−log max(ŷ_target, 1e-12)` averaged over the batch, or the
/// negated full binary sum over the catalog when `literal` is set.
pub fn rec_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, targets: &[usize], literal: bool) -> Result<Var> {
    let s = tape.shape(logits).to_vec();
    let (bsz, n) = (s[0], s[1]);
    if let Some(&bad) = targets.iter().find(|&&t| t >= n) {
        return Err(Error::OutOfRange {
            what: "target",
            index: bad,
            size: n,
        });
    }
    let probs = tape.softmax(logits, 1)?;
    let logp = tape.log(probs, T::of(PROB_FLOOR))?;
    if !literal {
        let picked = tape.pick(logp, targets)?;
        let mean = tape.mean_all(picked)?;
        return Ok(tape.neg(mean)?);
    }
    let onehot = Tensor::from_fn(&[bsz, n], |i| if targets[i / n] == i % n { T::one() } else { T::zero() });
    let rest = onehot.map(|y| T::one() - y);
    let y = tape.constant(onehot);
    let not_y = tape.constant(rest);
    let neg_p = tape.neg(probs)?;
    let one_minus = tape.add_scalar(neg_p, T::one())?;
    let log1m = tape.log(one_minus, T::of(PROB_FLOOR))?;
    let a = tape.mul(y, logp)?;
    let b = tape.mul(not_y, log1m)?;
    let both = tape.add(a, b)?;
    let total = tape.sum_all(both)?;
    Ok(tape.scale(total, T::of(-1.0 / bsz as f64))?)
}

/// `l_rec + λ·l_con`.
pub fn joint_loss<T: Scalar>(tape: &mut Tape<T>, rec: Var, con: Var, lambda: f64) -> Result<Var> {
    let scaled = tape.scale(con, T::of(lambda))?;
    Ok(tape.add(rec, scaled)?)
}

/// Softmax of one logit row, in f64.
pub fn probabilities(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}
