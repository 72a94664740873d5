//! `key=value` run configuration with typed views for each module.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use mmsbr::config::{HyperParams, Variant};
use mmsbr::dataset::CorpusConfig;
use mmsbr::embedding::{PcaFit, SynthConfig};
use mmsbr::Error;

/// Every accepted key with its default. The model width defaults to the
/// small 16 that suits CPU runs rather than the library's 64.
fn defaults() -> BTreeMap<&'static str, String> {
    let h = HyperParams::default();
    let s = SynthConfig::default();
    let c = CorpusConfig::default();
    let mut m = BTreeMap::new();
    let mut put = |k: &'static str, v: &dyn Display| {
        m.insert(k, v.to_string());
    };
    put("d", &16);
    put("heads", &h.heads);
    put("batch", &h.batch);
    put("lr", &h.lr);
    put("r_layers", &h.r_layers);
    put("c_features", &h.c_features);
    put("t_pivot", &h.t_pivot);
    put("rho", &h.rho);
    put("lambda", &h.lambda);
    put("tau", &h.tau);
    put("epochs", &h.epochs);
    put("seed", &h.seed);
    put("sign_w2", &h.sign_w2);
    put("precision", &h.precision);
    put("negatives", &h.negatives);
    put("literal_eq6", &h.literal_eq6);
    put("literal_eq23", &h.literal_eq23);
    put("literal_eq26", &h.literal_eq26);
    put("log_timing", &h.log_timing);

    put("n_items", &s.n_items);
    put("n_categories", &s.n_categories);
    put("n_sessions", &s.n_sessions);
    put("style_clusters", &s.style_clusters);
    put("price_weight", &s.price_weight);
    put("noise_sigma", &s.noise_sigma);
    put("pseudo_fidelity", &s.pseudo_fidelity);
    put("raw_dim", &s.raw_dim);
    put("latent_dim", &s.latent_dim);
    put("text_style", &s.text_style);
    put("cold_fraction", &s.cold_fraction);

    put("min_item_freq", &c.min_item_freq);
    put("clamp_price", &c.clamp_price);
    put("pca_fit", &PcaFit::PerSpace);

    put("variant", &Variant::Full);
    put("variants", &"all");
    put("out", &"out");
    put("data", &"data");
    put("checkpoint", &"");
    put("save_checkpoints", &false);
    put("gradcheck_batch", &4);
    put("gradcheck_step", &1e-6);
    put("gradcheck_tol", &1e-3);
    m
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { values: defaults() }
    }
}

impl RunConfig {
    /// Parses `key=value` lines; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self, Error> {
        let mut cfg = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got `{line}`", i + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| anyhow::anyhow!("cannot read config {}: {e}", path.display()))?;
        Ok(Self::parse(&text)?)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), Error> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(Error::UnknownKey(key.to_string())),
        }
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    fn parsed<T: FromStr>(&self, key: &str) -> Result<T, Error>
    where
        T::Err: Display,
    {
        self.get(key)
            .parse()
            .map_err(|e| Error::Config(format!("`{key}`: {e}")))
    }

    /// The fully resolved configuration, one sorted `key=value` per line.
    pub fn render(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn hyper(&self) -> Result<HyperParams, Error> {
        let h = HyperParams {
            d: self.parsed("d")?,
            heads: self.parsed("heads")?,
            batch: self.parsed("batch")?,
            lr: self.parsed("lr")?,
            r_layers: self.parsed("r_layers")?,
            c_features: self.parsed("c_features")?,
            t_pivot: self.parsed("t_pivot")?,
            rho: self.parsed("rho")?,
            lambda: self.parsed("lambda")?,
            tau: self.parsed("tau")?,
            epochs: self.parsed("epochs")?,
            seed: self.parsed("seed")?,
            sign_w2: self.parsed("sign_w2")?,
            precision: self.parsed("precision")?,
            negatives: self.parsed("negatives")?,
            literal_eq6: self.parsed("literal_eq6")?,
            literal_eq23: self.parsed("literal_eq23")?,
            literal_eq26: self.parsed("literal_eq26")?,
            log_timing: self.parsed("log_timing")?,
        };
        h.validate()?;
        Ok(h)
    }

    pub fn synth(&self) -> Result<SynthConfig, Error> {
        let raw_dim: usize = self.parsed("raw_dim")?;
        let s = SynthConfig {
            n_items: self.parsed("n_items")?,
            n_categories: self.parsed("n_categories")?,
            d: self.parsed::<usize>("d")?.min(raw_dim),
            n_sessions: self.parsed("n_sessions")?,
            style_clusters: self.parsed("style_clusters")?,
            price_weight: self.parsed("price_weight")?,
            noise_sigma: self.parsed("noise_sigma")?,
            pseudo_fidelity: self.parsed("pseudo_fidelity")?,
            seed: self.parsed("seed")?,
            raw_dim,
            latent_dim: self.parsed("latent_dim")?,
            text_style: self.parsed("text_style")?,
            cold_fraction: self.parsed("cold_fraction")?,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn corpus(&self) -> Result<CorpusConfig, Error> {
        Ok(CorpusConfig {
            min_item_freq: self.parsed("min_item_freq")?,
            rho: self.parsed("rho")?,
            clamp_price: self.parsed("clamp_price")?,
            ..CorpusConfig::default()
        })
    }

    pub fn pca_fit(&self) -> Result<PcaFit, Error> {
        self.parsed("pca_fit")
    }

    pub fn variant(&self) -> Result<Variant, Error> {
        self.parsed("variant")
    }

    pub fn variants(&self) -> Result<Vec<Variant>, Error> {
        match self.get("variants") {
            "all" => Ok(Variant::ALL.to_vec()),
            list => list.split(',').map(|v| v.trim().parse()).collect(),
        }
    }

    pub fn out(&self) -> PathBuf {
        PathBuf::from(self.get("out"))
    }

    pub fn data(&self) -> PathBuf {
        PathBuf::from(self.get("data"))
    }

    /// `checkpoint`, or `checkpoint.ckpt` inside the output directory.
    pub fn checkpoint(&self) -> PathBuf {
        match self.get("checkpoint") {
            "" => self.out().join("checkpoint.ckpt"),
            p => PathBuf::from(p),
        }
    }

    pub fn save_checkpoints(&self) -> Result<bool, Error> {
        self.parsed("save_checkpoints")
    }

    pub fn gradcheck(&self) -> Result<(usize, f64, f64), Error> {
        Ok((
            self.parsed("gradcheck_batch")?,
            self.parsed("gradcheck_step")?,
            self.parsed("gradcheck_tol")?,
        ))
    }
}

/// Expands `R=3,4 C=4 T=4` into every combination of
/// (`r_layers`, `c_features`, `t_pivot`) overrides, in row-major order.
pub fn expand_grid(specs: &[String]) -> Result<Vec<Vec<(&'static str, String)>>, Error> {
    let mut axes: Vec<(&'static str, Vec<String>)> = Vec::new();
    for spec in specs {
        let (k, vs) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("grid entry `{spec}` is not KEY=v1,v2")))?;
        let key = match k.trim() {
            "R" | "r_layers" => "r_layers",
            "C" | "c_features" => "c_features",
            "T" | "t_pivot" => "t_pivot",
            other => return Err(Error::UnknownKey(other.to_string())),
        };
        let values: Vec<String> = vs.split(',').map(|v| v.trim().to_string()).collect();
        if values.iter().any(String::is_empty) {
            return Err(Error::Config(format!("grid entry `{spec}` has an empty value")));
        }
        axes.push((key, values));
    }
    let mut combos: Vec<Vec<(&'static str, String)>> = vec![Vec::new()];
    for (key, values) in &axes {
        combos = combos
            .into_iter()
            .flat_map(|c| {
                values.iter().map(move |v| {
                    let mut next = c.clone();
                    next.push((*key, v.clone()));
                    next
                })
            })
            .collect();
    }
    Ok(combos)
}
