use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Sign applied to the Wasserstein term of the item score.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SignW2 {
    /// Closer price distributions score higher.
    Minus,
    /// The distance is added to the logit.
    Plus,
}

impl SignW2 {
    pub fn value(self) -> f64 {
        match self {
            Self::Minus => -1.0,
            Self::Plus => 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

/// Where contrastive negatives come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Negatives {
    /// Other items of the current mini-batch.
    Batch,
    /// Every catalog item.
    Catalog,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HyperParams {
    pub d: usize,
    pub heads: usize,
    pub batch: usize,
    pub lr: f64,
    /// Stacked pivot-transformer layers.
    pub r_layers: usize,
    /// Feature MLPs per modality.
    pub c_features: usize,
    /// Pivot tokens.
    pub t_pivot: usize,
    pub rho: usize,
    pub lambda: f64,
    pub tau: f64,
    pub epochs: usize,
    pub seed: u64,
    pub sign_w2: SignW2,
    pub precision: Precision,
    pub negatives: Negatives,
    /// Contrastive term without the log.
    pub literal_eq6: bool,
    /// Raw distances (and their squares) as attention weights in the price branch.
    pub literal_eq23: bool,
    /// Full binary cross-entropy over the catalog.
    pub literal_eq26: bool,
    /// Record wall-clock seconds in the training log (breaks log reproducibility).
    pub log_timing: bool,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            d: 64,
            heads: 2,
            batch: 100,
            lr: 0.001,
            r_layers: 3,
            c_features: 4,
            t_pivot: 4,
            rho: 100,
            lambda: 0.01,
            tau: 1.0,
            epochs: 20,
            seed: 1,
            sign_w2: SignW2::Minus,
            precision: Precision::F32,
            negatives: Negatives::Batch,
            literal_eq6: false,
            literal_eq23: false,
            literal_eq26: false,
            log_timing: false,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("d", self.d),
            ("heads", self.heads),
            ("batch", self.batch),
            ("r_layers", self.r_layers),
            ("c_features", self.c_features),
            ("t_pivot", self.t_pivot),
            ("rho", self.rho),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "d={} is not divisible by heads={}",
                self.d, self.heads
            )));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("lr must be finite and ≥ 0, got {}", self.lr)));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be finite and ≥ 0, got {}", self.lambda)));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        Ok(())
    }
}

/// Model wiring: the full model or one of its ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    Full,
    /// No contrastive term.
    NoCon,
    /// Contrastive positives are the actual image and text after a shared projection.
    PseDirect,
    /// Concatenation + MLP instead of the pivot transformer.
    MlpFusion,
    /// Point price vectors, dot-product self-attention and a dot-product price score.
    DePrice,
    /// Image only refines through the contrastive term; fusion sees text only.
    WoImage,
    /// Text only refines through the contrastive term; fusion sees image only.
    WoText,
    /// No price branch in the score.
    WoPrice,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Full,
        Variant::NoCon,
        Variant::PseDirect,
        Variant::MlpFusion,
        Variant::DePrice,
        Variant::WoImage,
        Variant::WoText,
        Variant::WoPrice,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::NoCon => "no_con",
            Self::PseDirect => "pse_direct",
            Self::MlpFusion => "mlp_fusion",
            Self::DePrice => "de_price",
            Self::WoImage => "wo_image",
            Self::WoText => "wo_text",
            Self::WoPrice => "wo_price",
        }
    }

    pub fn uses_image(self) -> bool {
        self != Self::WoImage
    }

    pub fn uses_text(self) -> bool {
        self != Self::WoText
    }

    /// Effective contrastive weight.
    pub fn lambda(self, lambda: f64) -> f64 {
        if self == Self::NoCon {
            0.0
        } else {
            lambda
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

impl FromStr for SignW2 {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "minus" | "-" => Ok(Self::Minus),
            "plus" | "+" => Ok(Self::Plus),
            _ => Err(Error::Config(format!("sign_w2 must be minus or plus, got `{s}`"))),
        }
    }
}

impl fmt::Display for SignW2 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Minus => "minus",
            Self::Plus => "plus",
        })
    }
}

impl FromStr for Precision {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Self::F32),
            "f64" => Ok(Self::F64),
            _ => Err(Error::Config(format!("precision must be f32 or f64, got `{s}`"))),
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::F32 => "f32",
            Self::F64 => "f64",
        })
    }
}

impl FromStr for Negatives {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "batch" => Ok(Self::Batch),
            "catalog" => Ok(Self::Catalog),
            _ => Err(Error::Config(format!("negatives must be batch or catalog, got `{s}`"))),
        }
    }
}

impl fmt::Display for Negatives {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Batch => "batch",
            Self::Catalog => "catalog",
        })
    }
}
