//! Ranking metrics, split/bucket protocols, the popularity baseline and
//! ablation runs.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use diffcore::{ModelParams, Scalar};
use rayon::prelude::*;

use crate::config::{HyperParams, Precision, Variant};
use crate::dataset::{Session, SessionCorpus};
use crate::embedding::ModalityBundle;
use crate::error::{Error, Result};
use crate::model::{Model, ModelInputs};
use crate::trainer::{examples, train, TrainOutput};

/// Sessions scored per tape during evaluation.
pub const EVAL_CHUNK: usize = 128;
pub const DEFAULT_KS: [usize; 2] = [10, 20];
/// Context lengths at or below this count as short sessions.
pub const SHORT_MAX: usize = 3;

/// Catalog rows by descending score, ties by ascending row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RankedList {
    pub items: Vec<usize>,
}

impl RankedList {
    pub fn from_scores<T: Scalar>(scores: &[T]) -> Self {
        let mut items: Vec<usize> = (0..scores.len()).collect();
        items.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
        Self { items }
    }

    /// 1-based position of `target`.
    pub fn rank_of(&self, target: usize) -> Result<usize> {
        self.items
            .iter()
            .position(|&i| i == target)
            .map(|p| p + 1)
            .ok_or(Error::OutOfRange {
                what: "target",
                index: target,
                size: self.items.len(),
            })
    }
}

pub fn precision_at_k(ranked: &RankedList, target: usize, k: usize) -> Result<f64> {
    Ok(if ranked.rank_of(target)? <= k { 1.0 } else { 0.0 })
}

pub fn mrr_at_k(ranked: &RankedList, target: usize, k: usize) -> Result<f64> {
    let r = ranked.rank_of(target)?;
    Ok(if r <= k { 1.0 / r as f64 } else { 0.0 })
}

/// Rank of `target` under the same ordering as [`RankedList`], without sorting.
pub fn rank_in_scores<T: Scalar>(scores: &[T], target: usize) -> Result<usize> {
    let t = *scores.get(target).ok_or(Error::OutOfRange {
        what: "target",
        index: target,
        size: scores.len(),
    })?;
    let ahead = scores
        .iter()
        .enumerate()
        .filter(|&(i, &s)| s > t || (s == t && i < target))
        .count();
    Ok(ahead + 1)
}

/// Corpus-level metrics at one cutoff, in percent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KMetric {
    pub k: usize,
    pub prec: f64,
    pub mrr: f64,
}

pub fn metrics_from_ranks(ranks: &[usize], ks: &[usize]) -> Vec<KMetric> {
    ks.iter()
        .map(|&k| {
            let n = ranks.len().max(1) as f64;
            let hits = ranks.iter().filter(|&&r| r <= k).count() as f64;
            let rr: f64 = ranks.iter().filter(|&&r| r <= k).map(|&r| 1.0 / r as f64).sum();
            KMetric {
                k,
                prec: 100.0 * hits / n,
                mrr: 100.0 * rr / n,
            }
        })
        .collect()
}

pub fn metrics_from_scores<T: Scalar>(scores: &[Vec<T>], targets: &[usize], ks: &[usize]) -> Result<Vec<KMetric>> {
    let ranks = scores
        .iter()
        .zip(targets)
        .map(|(s, &t)| rank_in_scores(s, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(metrics_from_ranks(&ranks, ks))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Val,
    Test,
    TestPlus,
    /// Sessions of the cold-start split whose target is a cold item.
    ColdTargets,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Self::Val => "val",
            Self::Test => "test",
            Self::TestPlus => "test_plus",
            Self::ColdTargets => "cold_targets",
        }
    }

    pub fn sessions(self, corpus: &SessionCorpus) -> Vec<Session> {
        match self {
            Self::Val => corpus.sessions_val.clone(),
            Self::Test => corpus.sessions_test.clone(),
            Self::TestPlus => corpus.sessions_test_plus.clone(),
            Self::ColdTargets => corpus
                .sessions_test_plus
                .iter()
                .filter(|s| corpus.cold_items.contains(&s.target()))
                .cloned()
                .collect(),
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [Self::Val, Self::Test, Self::TestPlus, Self::ColdTargets]
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown split `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub variant: String,
    pub split: String,
    pub k: usize,
    pub prec: f64,
    pub mrr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BucketRow {
    pub bucket: String,
    pub count: usize,
    pub prec20: f64,
    pub mrr20: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<MetricRow>,
    pub buckets: Vec<BucketRow>,
}

/// `short`/`long` by context length, then `len_2 … len_8+` by session length.
/// Each family partitions the sessions.
pub fn bucket_report(sessions: &[Session], ranks: &[usize]) -> Vec<BucketRow> {
    let mut groups: BTreeMap<(u8, usize), Vec<usize>> = BTreeMap::new();
    for (s, &r) in sessions.iter().zip(ranks) {
        let ctx = s.len() - 1;
        groups.entry((0, usize::from(ctx > SHORT_MAX))).or_default().push(r);
        groups.entry((1, s.len().min(8))).or_default().push(r);
    }
    let mut out = Vec::new();
    for key in [(0, 0), (0, 1)].into_iter().chain((2..=8).map(|l| (1, l))) {
        let ranks = groups.get(&key).map(Vec::as_slice).unwrap_or(&[]);
        let m = metrics_from_ranks(ranks, &[20])[0];
        let bucket = match key {
            (0, 0) => "short".to_string(),
            (0, _) => "long".to_string(),
            (_, 8) => "len_8+".to_string(),
            (_, l) => format!("len_{l}"),
        };
        out.push(BucketRow {
            bucket,
            count: ranks.len(),
            prec20: if ranks.is_empty() { 0.0 } else { m.prec },
            mrr20: if ranks.is_empty() { 0.0 } else { m.mrr },
        });
    }
    out
}

fn ranks_for<T: Scalar>(
    params: &ModelParams<f64>,
    corpus: &SessionCorpus,
    bundle: &ModalityBundle,
    hyper: &HyperParams,
    variant: Variant,
    sessions: &[Session],
) -> Result<Vec<usize>> {
    let inputs = ModelInputs::<T>::new(bundle, corpus)?;
    let model = Model::new(hyper, variant, &inputs)?;
    let params = params.cast::<T>();
    let (ctx, tgt) = examples(corpus, sessions)?;
    let scores = model.score(&params, &ctx, EVAL_CHUNK)?;
    scores.iter().zip(&tgt).map(|(s, &t)| rank_in_scores(s, t)).collect()
}

/// Target ranks of `sessions` under trained parameters.
pub fn model_ranks(
    params: &ModelParams<f64>,
    corpus: &SessionCorpus,
    bundle: &ModalityBundle,
    hyper: &HyperParams,
    variant: Variant,
    sessions: &[Session],
) -> Result<Vec<usize>> {
    match hyper.precision {
        Precision::F32 => ranks_for::<f32>(params, corpus, bundle, hyper, variant, sessions),
        Precision::F64 => ranks_for::<f64>(params, corpus, bundle, hyper, variant, sessions),
    }
}

/// Prec@k / MRR@k per split plus the length buckets of the first split.
pub fn evaluate(
    params: &ModelParams<f64>,
    corpus: &SessionCorpus,
    bundle: &ModalityBundle,
    hyper: &HyperParams,
    variant: Variant,
    splits: &[Split],
    ks: &[usize],
) -> Result<EvalReport> {
    let mut rows = Vec::new();
    let mut buckets = Vec::new();
    for (i, &split) in splits.iter().enumerate() {
        let sessions = split.sessions(corpus);
        let ranks = model_ranks(params, corpus, bundle, hyper, variant, &sessions)?;
        rows.extend(to_rows(variant.name(), split, &metrics_from_ranks(&ranks, ks)));
        if i == 0 {
            buckets = bucket_report(&sessions, &ranks);
        }
    }
    Ok(EvalReport { rows, buckets })
}

fn to_rows(variant: &str, split: Split, m: &[KMetric]) -> Vec<MetricRow> {
    m.iter()
        .map(|m| MetricRow {
            variant: variant.to_string(),
            split: split.name().to_string(),
            k: m.k,
            prec: m.prec,
            mrr: m.mrr,
        })
        .collect()
}

/// Training-split item frequencies per catalog row.
pub fn popularity_scores(corpus: &SessionCorpus) -> Result<Vec<f64>> {
    let mut counts = vec![0.0; corpus.n_items()];
    for s in &corpus.sessions_train {
        for &i in &s.items {
            counts[corpus.index_of(i)?] += 1.0;
        }
    }
    Ok(counts)
}

/// Target ranks under the global training popularity ranking.
pub fn popularity_ranks(corpus: &SessionCorpus, sessions: &[Session]) -> Result<Vec<usize>> {
    let scores = popularity_scores(corpus)?;
    sessions
        .iter()
        .map(|s| rank_in_scores(&scores, corpus.index_of(s.target())?))
        .collect()
}

pub fn popularity_baseline(corpus: &SessionCorpus, splits: &[Split], ks: &[usize]) -> Result<Vec<MetricRow>> {
    let mut rows = Vec::new();
    for &split in splits {
        let ranks = popularity_ranks(corpus, &split.sessions(corpus))?;
        rows.extend(to_rows("popularity", split, &metrics_from_ranks(&ranks, ks)));
    }
    Ok(rows)
}

pub struct AblationRun {
    pub variant: Variant,
    pub output: TrainOutput,
    pub report: EvalReport,
}

/// Trains and evaluates each variant from the same seed. Runs execute on the
/// current rayon pool; each run is independent, so results do not depend on
/// the thread count.
pub fn ablate(
    corpus: &SessionCorpus,
    bundle: &ModalityBundle,
    hyper: &HyperParams,
    variants: &[Variant],
    splits: &[Split],
    ks: &[usize],
) -> Result<Vec<AblationRun>> {
    variants
        .par_iter()
        .map(|&variant| {
            let output = train(corpus, bundle, hyper, variant)?;
            let report = evaluate(&output.params, corpus, bundle, hyper, variant, splits, ks)?;
            Ok(AblationRun {
                variant,
                output,
                report,
            })
        })
        .collect()
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from("variant,split,k,prec,mrr\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{:.2},{:.2}", r.variant, r.split, r.k, r.prec, r.mrr);
    }
    s
}

pub fn buckets_csv(rows: &[BucketRow]) -> String {
    let mut s = String::from("bucket,count,prec20,mrr20\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{:.2},{:.2}", r.bucket, r.count, r.prec20, r.mrr20);
    }
    s
}
