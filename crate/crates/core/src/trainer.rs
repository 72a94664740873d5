//! Mini-batch Adam training with best-validation checkpoint selection.

use std::fmt;
use std::time::Instant;

use diffcore::{finite_diff_check, GradCheckReport, ModelParams, Scalar, Tape};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{HyperParams, Precision, Variant};
use crate::dataset::{Session, SessionCorpus};
use crate::embedding::ModalityBundle;
use crate::error::{Error, Result};
use crate::evalkit::{metrics_from_scores, EVAL_CHUNK};
use crate::model::{init_params, Model, ModelInputs};

/// Half-width of the bias offsets used by [`gradient_check`].
pub const BIAS_JITTER: f64 = 0.05;

/// Adam with the usual defaults (`β1 = 0.9`, `β2 = 0.999`, `ε = 1e-8`).
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: ModelParams<T>,
    v: ModelParams<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ModelParams<T>, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn update(&mut self, params: &mut ModelParams<T>, grads: &ModelParams<T>) -> Result<()> {
        self.step += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::of(1.0 - self.beta1.powi(self.step));
        let c2 = T::of(1.0 - self.beta2.powi(self.step));
        let (lr, eps) = (T::of(self.lr), T::of(self.eps));
        for (name, p) in params.iter_mut() {
            let g = grads.get(name)?.data();
            let m = self.m.get_mut(name)?.data_mut();
            for (mi, &gi) in m.iter_mut().zip(g) {
                *mi = b1 * *mi + (T::one() - b1) * gi;
            }
            let m = self.m.get(name)?.data();
            let v = self.v.get_mut(name)?.data_mut();
            for (vi, &gi) in v.iter_mut().zip(g) {
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
            }
            let v = self.v.get(name)?.data();
            for ((x, &mi), &vi) in p.data_mut().iter_mut().zip(m).zip(v) {
                let m_hat = mi / c1;
                let v_hat = vi / c2;
                *x = *x - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_prec20: f64,
    pub val_mrr20: f64,
    pub seconds: f64,
}

impl fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{:.6},{:.2},{:.2},{:.3}",
            self.epoch, self.mean_loss, self.val_prec20, self.val_mrr20, self.seconds
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    /// Parameters of the epoch with the best validation Prec@20 (initial
    /// parameters when no epoch ran).
    pub params: ModelParams<f64>,
    /// Parameters after the last epoch.
    pub last: ModelParams<f64>,
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl TrainOutput {
    pub fn log_text(&self) -> String {
        let mut s = String::from("epoch,mean_loss,val_prec20,val_mrr20,seconds\n");
        for r in &self.log {
            s.push_str(&r.to_string());
            s.push('\n');
        }
        s
    }
}

/// (context rows, target row) pairs of a split.
pub fn examples(corpus: &SessionCorpus, sessions: &[Session]) -> Result<(Vec<Vec<usize>>, Vec<usize>)> {
    let mut contexts = Vec::with_capacity(sessions.len());
    let mut targets = Vec::with_capacity(sessions.len());
    for s in sessions {
        let mut rows = corpus.encode(s)?;
        targets.push(rows.pop().expect("sessions hold two items"));
        contexts.push(rows);
    }
    Ok((contexts, targets))
}

pub fn train(corpus: &SessionCorpus, bundle: &ModalityBundle, hyper: &HyperParams, variant: Variant) -> Result<TrainOutput> {
    let init = init_params(hyper, variant, corpus.n_categories(), hyper.seed)?;
    train_from(corpus, bundle, hyper, variant, init)
}

/// Trains starting from the given parameters.
pub fn train_from(
    corpus: &SessionCorpus,
    bundle: &ModalityBundle,
    hyper: &HyperParams,
    variant: Variant,
    init: ModelParams<f64>,
) -> Result<TrainOutput> {
    if corpus.rho != hyper.rho {
        return Err(Error::Config(format!(
            "corpus uses rho={} but the model has rho={}",
            corpus.rho, hyper.rho
        )));
    }
    match hyper.precision {
        Precision::F32 => run::<f32>(corpus, bundle, hyper, variant, init.cast()),
        Precision::F64 => run::<f64>(corpus, bundle, hyper, variant, init),
    }
}

fn run<T: Scalar>(
    corpus: &SessionCorpus,
    bundle: &ModalityBundle,
    hyper: &HyperParams,
    variant: Variant,
    mut params: ModelParams<T>,
) -> Result<TrainOutput> {
    let inputs = ModelInputs::<T>::new(bundle, corpus)?;
    let model = Model::new(hyper, variant, &inputs)?;
    // items absent from training stay out of the training softmax, or every
    // step would push their scores down through the denominator
    let fit = Model::new(hyper, variant, &inputs)?.with_candidates(corpus.train_rows())?;
    let (contexts, targets) = examples(corpus, &corpus.sessions_train)?;
    let (val_ctx, val_tgt) = examples(corpus, &corpus.sessions_val)?;
    let mut opt = Adam::new(&params, hyper.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..contexts.len()).collect();

    let mut best = params.cast::<f64>();
    let mut best_prec = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut log = Vec::with_capacity(hyper.epochs);

    for epoch in 1..=hyper.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (bi, chunk) in order.chunks(hyper.batch).enumerate() {
            let ctx: Vec<Vec<usize>> = chunk.iter().map(|&i| contexts[i].clone()).collect();
            let tgt: Vec<usize> = chunk.iter().map(|&i| targets[i]).collect();
            // non-finite values are caught below, where the batch is known
            let mut tape = Tape::new().with_finite_check(false);
            let bound = params.bind(&mut tape);
            let loss = fit.loss(&mut tape, &bound, &ctx, &tgt)?;
            let value = tape.value(loss.total).item().as_f64();
            let grads = tape.backward(loss.total)?;
            let grads = params.collect_grads(&bound, &grads);
            if !value.is_finite() || !grads.all_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: bi,
                    param: worst_param(&grads),
                });
            }
            opt.update(&mut params, &grads)?;
            loss_sum += value;
            batches += 1;
        }

        let scores = model.score(&params, &val_ctx, EVAL_CHUNK)?;
        let m = metrics_from_scores(&scores, &val_tgt, &[20])?;
        let (prec, mrr) = m.first().map(|r| (r.prec, r.mrr)).unwrap_or((0.0, 0.0));
        if prec > best_prec {
            best_prec = prec;
            best_epoch = epoch;
            best = params.cast();
        }
        log.push(EpochRecord {
            epoch,
            mean_loss: loss_sum / batches.max(1) as f64,
            val_prec20: prec,
            val_mrr20: mrr,
            seconds: if hyper.log_timing {
                started.elapsed().as_secs_f64()
            } else {
                0.0
            },
        });
    }
    Ok(TrainOutput {
        params: best,
        last: params.cast(),
        log,
        best_epoch,
    })
}

/// Name of the parameter with a non-finite gradient, or with the largest one.
fn worst_param<T: Scalar>(grads: &ModelParams<T>) -> String {
    let mut worst = (String::from("<none>"), -1.0);
    for (name, g) in grads.iter() {
        if !g.all_finite() {
            return name.to_string();
        }
        let m = g.max_abs().as_f64();
        if m > worst.1 {
            worst = (name.to_string(), m);
        }
    }
    worst.0
}

/// Central-difference check of the joint loss on the first `batch` training
/// sessions, at the initial parameters of `hyper.seed` with every bias moved
/// by a small seeded offset. Always runs in f64.
///
/// Zero biases put a ReLU input exactly on its kink whenever the layer below
/// is fully inactive for some item; there the central difference averages two
/// one-sided slopes and cannot agree with any subgradient.
pub fn gradient_check(
    corpus: &SessionCorpus,
    bundle: &ModalityBundle,
    hyper: &HyperParams,
    variant: Variant,
    batch: usize,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let mut params = init_params(hyper, variant, corpus.n_categories(), hyper.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed ^ 0x6c_6b);
    for (name, t) in params.iter_mut() {
        if name.ends_with(".b") {
            for x in t.data_mut() {
                *x += rng.random_range(-BIAS_JITTER..BIAS_JITTER);
            }
        }
    }
    let inputs = ModelInputs::<f64>::new(bundle, corpus)?;
    let model = Model::new(hyper, variant, &inputs)?.with_candidates(corpus.train_rows())?;
    let take = batch.min(corpus.sessions_train.len());
    let (ctx, tgt) = examples(corpus, &corpus.sessions_train[..take])?;

    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let loss = model.loss(&mut tape, &bound, &ctx, &tgt)?;
    let grads = tape.backward(loss.total)?;
    let analytic = params.collect_grads(&bound, &grads);

    let loss_at = |p: &ModelParams<f64>| -> f64 {
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape);
        match model.loss(&mut tape, &bound, &ctx, &tgt) {
            Ok(l) => tape.value(l.total).item(),
            Err(_) => f64::NAN,
        }
    };
    Ok(finite_diff_check(&params, &analytic, loss_at, step, tolerance))
}
