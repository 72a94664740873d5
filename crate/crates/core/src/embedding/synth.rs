//! Small synthetic corpora with planted style and price preferences.
//!
//! Every item has a unit latent style drawn around one of `style_clusters`
//! centers. Image and text embeddings are two different random linear views
//! of that latent (plus Gaussian noise), so the two modality spaces are
//! heterogeneous. A pseudo embedding is the paired content blended with an
//! unrelated latent by `pseudo_fidelity` and rendered through the *other*
//! modality's generator, i.e. a pseudo image is produced from the text
//! content and lives in the image space.
//!
//! Each session belongs to a fresh user with a preferred style and an
//! acceptable relative-price band. Items are drawn without replacement with
//! weight `exp(AFFINITY * cos(user, item))`, multiplied by `1 - price_weight`
//! when the item's price falls outside the band.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{reduce_bundle, EmbeddingMatrix, Kind, ModalityBundle, PcaFit};
use crate::dataset::{CorpusConfig, Interaction, SessionCorpus};
use crate::error::{Error, Result};

/// Scale of the cosine affinity inside the sampling weight.
pub const AFFINITY: f64 = 6.0;
/// Half-width of a user's acceptable band on the relative-price axis.
pub const BAND_HALF_WIDTH: f64 = 0.15;
/// Spread of item and user styles around their cluster center.
const STYLE_SPREAD: f64 = 0.5;
/// Sampling boost of cold items once they become available.
const COLD_BOOST: f64 = 3.0;
const MAX_SESSION_LEN: usize = 8;
const SESSIONS_PER_DAY: usize = 50;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_items: usize,
    pub n_categories: usize,
    /// Width of the reduced bundle.
    pub d: usize,
    pub n_sessions: usize,
    pub style_clusters: usize,
    pub price_weight: f64,
    pub noise_sigma: f64,
    pub pseudo_fidelity: f64,
    pub seed: u64,
    /// Width of the generated (pre-PCA) embeddings.
    pub raw_dim: usize,
    /// Width of the latent style vectors.
    pub latent_dim: usize,
    /// Share of the style in the text content; the rest is item-specific noise.
    pub text_style: f64,
    /// Fraction of items withheld until the last tenth of the sessions.
    pub cold_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_items: 200,
            n_categories: 10,
            d: 16,
            n_sessions: 5000,
            style_clusters: 5,
            price_weight: 0.5,
            noise_sigma: 0.5,
            pseudo_fidelity: 0.8,
            seed: 1,
            raw_dim: 32,
            latent_dim: 8,
            text_style: 1.0,
            cold_fraction: 0.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_items", self.n_items),
            ("n_categories", self.n_categories),
            ("d", self.d),
            ("n_sessions", self.n_sessions),
            ("style_clusters", self.style_clusters),
            ("raw_dim", self.raw_dim),
            ("latent_dim", self.latent_dim),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        let unit = [
            ("price_weight", self.price_weight),
            ("pseudo_fidelity", self.pseudo_fidelity),
            ("text_style", self.text_style),
            ("cold_fraction", self.cold_fraction),
        ];
        for (name, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::Config("noise_sigma must be finite and ≥ 0".into()));
        }
        if self.d > self.raw_dim {
            return Err(Error::Config(format!("d={} exceeds raw_dim={}", self.d, self.raw_dim)));
        }
        Ok(())
    }
}

/// Ground truth of the generator, before sessions are drawn.
#[derive(Clone, Debug)]
pub struct World {
    pub styles: Vec<Vec<f64>>,
    pub clusters: Vec<usize>,
    pub centers: Vec<Vec<f64>>,
    pub categories: Vec<u32>,
    pub prices: Vec<f64>,
    /// Position of each price inside its category range, in `[0, 1]`.
    pub relative_prices: Vec<f64>,
    pub cold: BTreeSet<usize>,
}

#[derive(Clone, Debug)]
pub struct User {
    pub cluster: usize,
    pub style: Vec<f64>,
    pub band_center: f64,
}

impl World {
    pub fn n_items(&self) -> usize {
        self.styles.len()
    }

    pub fn draw_user(&self, rng: &mut impl Rng) -> User {
        let cluster = rng.random_range(0..self.centers.len());
        let q = self.centers[cluster].len();
        let style = jitter(rng, &self.centers[cluster], STYLE_SPREAD / (q as f64).sqrt());
        User {
            cluster,
            style,
            band_center: rng.random(),
        }
    }

    pub fn in_band(&self, user: &User, item: usize) -> bool {
        (self.relative_prices[item] - user.band_center).abs() <= BAND_HALF_WIDTH
    }

    /// Unnormalized sampling weight of every item for `user`.
    pub fn weights(&self, user: &User, price_weight: f64) -> Vec<f64> {
        (0..self.n_items())
            .map(|i| {
                let affinity = (AFFINITY * dot(&user.style, &self.styles[i])).exp();
                let price = if self.in_band(user, i) { 1.0 } else { 1.0 - price_weight };
                affinity * price
            })
            .collect()
    }
}

/// Generator output: the processed corpus, its raw and reduced embeddings,
/// and the log the corpus was built from.
#[derive(Clone, Debug)]
pub struct Synthetic {
    pub corpus: SessionCorpus,
    /// `raw_dim`-wide embeddings in catalog row order.
    pub raw: ModalityBundle,
    /// `d`-wide embeddings, PCA fit on training items per modality space.
    pub bundle: ModalityBundle,
    pub interactions: Vec<Interaction>,
    pub world: World,
}

pub fn synthesize_corpus(cfg: &SynthConfig) -> Result<(SessionCorpus, ModalityBundle)> {
    let s = synthesize(cfg, &CorpusConfig::default())?;
    Ok((s.corpus, s.bundle))
}

pub fn synthesize(cfg: &SynthConfig, corpus_cfg: &CorpusConfig) -> Result<Synthetic> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let q = cfg.latent_dim;
    let n = cfg.n_items;

    let centers: Vec<Vec<f64>> = (0..cfg.style_clusters).map(|_| unit(&mut rng, q)).collect();
    let mut clusters: Vec<usize> = (0..n).map(|i| i % cfg.style_clusters).collect();
    clusters.shuffle(&mut rng);
    let styles: Vec<Vec<f64>> = clusters
        .iter()
        .map(|&c| jitter(&mut rng, &centers[c], STYLE_SPREAD / (q as f64).sqrt()))
        .collect();

    let bounds: Vec<(f64, f64)> = (0..cfg.n_categories)
        .map(|_| {
            let lo = 5.0 + 45.0 * rng.random::<f64>();
            (lo, lo * (2.0 + 4.0 * rng.random::<f64>()))
        })
        .collect();
    let categories: Vec<u32> = (0..n).map(|_| rng.random_range(0..cfg.n_categories) as u32).collect();
    let relative_prices: Vec<f64> = (0..n).map(|_| rng.random()).collect();
    let prices: Vec<f64> = (0..n)
        .map(|i| {
            let (lo, hi) = bounds[categories[i] as usize];
            // cents, so the log round-trips through text exactly
            ((lo + (hi - lo) * relative_prices[i]) * 100.0).round() / 100.0
        })
        .collect();

    let n_cold = (cfg.cold_fraction * n as f64).round() as usize;
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    let cold: BTreeSet<usize> = perm[..n_cold].iter().copied().collect();

    let world = World {
        styles,
        clusters,
        centers,
        categories,
        prices,
        relative_prices,
        cold,
    };

    let raw_all = render_embeddings(&mut rng, &world, cfg)?;
    let interactions = draw_sessions(&mut rng, &world, cfg);

    let corpus = SessionCorpus::from_interactions(&interactions, corpus_cfg)?;
    let rows: Vec<usize> = corpus.items.iter().map(|r| r.id as usize).collect();
    let raw = raw_all.select_rows(&rows);
    let bundle = reduce_bundle(&raw, cfg.d, &corpus.train_rows(), PcaFit::PerSpace)?;
    Ok(Synthetic {
        corpus,
        raw,
        bundle,
        interactions,
        world,
    })
}

fn render_embeddings(rng: &mut ChaCha8Rng, w: &World, cfg: &SynthConfig) -> Result<ModalityBundle> {
    let (q, p, n) = (cfg.latent_dim, cfg.raw_dim, w.n_items());
    let view = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..p * q).map(|_| rng.sample(StandardNormal)).collect() };
    let v_img = view(rng);
    let v_txt = view(rng);

    let text_content: Vec<Vec<f64>> = w
        .styles
        .iter()
        .map(|s| {
            let u = unit(rng, q);
            normalized(&axpby(cfg.text_style, s, 1.0 - cfg.text_style, &u))
        })
        .collect();

    let f = cfg.pseudo_fidelity;
    let mut render = |v: &[f64], latent: &dyn Fn(&mut ChaCha8Rng, usize) -> Vec<f64>, kind: Kind| {
        let mut data = Vec::with_capacity(n * p);
        for i in 0..n {
            let z = latent(rng, i);
            for r in 0..p {
                let signal: f64 = (0..q).map(|c| v[r * q + c] * z[c]).sum();
                let noise: f64 = rng.sample(StandardNormal);
                data.push(signal + cfg.noise_sigma * noise);
            }
        }
        EmbeddingMatrix::new(kind, n, p, data)
    };
    let img = render(&v_img, &|_, i| w.styles[i].clone(), Kind::ActualImage)?;
    let txt = render(&v_txt, &|_, i| text_content[i].clone(), Kind::ActualText)?;
    // pseudo image: generated from the text, rendered in the image space
    let pseimg = render(
        &v_img,
        &|rng, i| axpby(f, &text_content[i], 1.0 - f, &unit(rng, q)),
        Kind::PseudoImage,
    )?;
    let psetxt = render(
        &v_txt,
        &|rng, i| axpby(f, &w.styles[i], 1.0 - f, &unit(rng, q)),
        Kind::PseudoText,
    )?;
    ModalityBundle::new(img, txt, pseimg, psetxt)
}

fn draw_sessions(rng: &mut ChaCha8Rng, w: &World, cfg: &SynthConfig) -> Vec<Interaction> {
    let cold_start = cfg.n_sessions - cfg.n_sessions / 10;
    let mut out = Vec::new();
    for s in 0..cfg.n_sessions {
        let user = w.draw_user(rng);
        let mut weights = w.weights(&user, cfg.price_weight);
        for &c in &w.cold {
            weights[c] *= if s < cold_start { 0.0 } else { COLD_BOOST };
        }
        let mut len = 2;
        while len < MAX_SESSION_LEN && rng.random::<f64>() < 0.5 {
            len += 1;
        }
        let day = (s / SESSIONS_PER_DAY) as f64;
        let start = day * 86_400.0 + (s % SESSIONS_PER_DAY) as f64 * 600.0;
        for k in 0..len {
            let Some(item) = sample_index(rng, &weights) else {
                break;
            };
            weights[item] = 0.0;
            out.push(Interaction {
                user_tag: format!("u{s}"),
                item_id: item as u32,
                timestamp: start + 5.0 * k as f64,
                price: w.prices[item],
                category_id: w.categories[item],
            });
        }
    }
    out
}

/// Draws an index with probability proportional to `weights`.
pub fn sample_index(rng: &mut impl Rng, weights: &[f64]) -> Option<usize> {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return None;
    }
    let mut u = rng.random::<f64>() * total;
    for (i, &wt) in weights.iter().enumerate() {
        if u < wt {
            return Some(i);
        }
        u -= wt;
    }
    weights.iter().rposition(|&wt| wt > 0.0)
}

fn unit(rng: &mut impl Rng, q: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..q).map(|_| rng.sample(StandardNormal)).collect();
        if dot(&v, &v) > 1e-12 {
            return normalized(&v);
        }
    }
}

fn jitter(rng: &mut impl Rng, center: &[f64], scale: f64) -> Vec<f64> {
    let v: Vec<f64> = center
        .iter()
        .map(|&c| c + scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    normalized(&v)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let n = dot(v, v).sqrt().max(1e-12);
    v.iter().map(|x| x / n).collect()
}

fn axpby(a: f64, x: &[f64], b: f64, y: &[f64]) -> Vec<f64> {
    x.iter().zip(y).map(|(x, y)| a * x + b * y).collect()
}
