//! Per-item modality embeddings: file formats, PCA reduction and the
//! synthetic corpus generator.

mod io;
mod pca;
pub mod synth;

use std::fmt;

use diffcore::{Scalar, Tensor};

use crate::error::{Error, Result};

pub use io::{load_modality_matrix, save_mmeb};
pub use pca::{pca_reduce, reduce_bundle, PcaBasis, PcaFit};
pub use synth::{synthesize, synthesize_corpus, SynthConfig, Synthetic};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Kind {
    ActualImage,
    ActualText,
    PseudoImage,
    PseudoText,
}

impl Kind {
    pub const ALL: [Kind; 4] = [
        Kind::ActualImage,
        Kind::ActualText,
        Kind::PseudoImage,
        Kind::PseudoText,
    ];

    /// Short name, also the embedding file stem.
    pub fn name(self) -> &'static str {
        match self {
            Kind::ActualImage => "img",
            Kind::ActualText => "txt",
            Kind::PseudoImage => "pseimg",
            Kind::PseudoText => "psetxt",
        }
    }

    pub fn is_image_space(self) -> bool {
        matches!(self, Kind::ActualImage | Kind::PseudoImage)
    }
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Dense `rows × dim` matrix, row `i` belonging to catalog row `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    pub kind: Kind,
    rows: usize,
    dim: usize,
    data: Vec<f64>,
}

impl EmbeddingMatrix {
    pub fn new(kind: Kind, rows: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * dim {
            return Err(Error::Config(format!(
                "{kind} matrix: {} values for {rows}×{dim}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::Config(format!(
                "{kind} matrix: non-finite value in row {}",
                bad / dim.max(1)
            )));
        }
        Ok(Self {
            kind,
            rows,
            dim,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Keeps the listed rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let data = rows.iter().flat_map(|&r| self.row(r).iter().copied()).collect();
        Self {
            kind: self.kind,
            rows: rows.len(),
            dim: self.dim,
            data,
        }
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_vec(
            &[self.rows, self.dim],
            self.data.iter().map(|&x| T::of(x)).collect(),
        )
    }
}

/// Actual and pseudo embeddings for both modalities, sharing row count and
/// width. Pseudo images live in the image space, pseudo texts in the text
/// space.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityBundle {
    pub img: EmbeddingMatrix,
    pub txt: EmbeddingMatrix,
    pub pseimg: EmbeddingMatrix,
    pub psetxt: EmbeddingMatrix,
}

impl ModalityBundle {
    pub fn new(
        img: EmbeddingMatrix,
        txt: EmbeddingMatrix,
        pseimg: EmbeddingMatrix,
        psetxt: EmbeddingMatrix,
    ) -> Result<Self> {
        let b = Self {
            img,
            txt,
            pseimg,
            psetxt,
        };
        let (n, d) = (b.img.rows, b.img.dim);
        for m in b.matrices() {
            if m.rows != n || m.dim != d {
                return Err(Error::Config(format!(
                    "{} is {}×{}, expected {n}×{d}",
                    m.kind, m.rows, m.dim
                )));
            }
        }
        Ok(b)
    }

    pub fn n(&self) -> usize {
        self.img.rows
    }

    pub fn dim(&self) -> usize {
        self.img.dim
    }

    pub fn get(&self, kind: Kind) -> &EmbeddingMatrix {
        match kind {
            Kind::ActualImage => &self.img,
            Kind::ActualText => &self.txt,
            Kind::PseudoImage => &self.pseimg,
            Kind::PseudoText => &self.psetxt,
        }
    }

    pub fn matrices(&self) -> [&EmbeddingMatrix; 4] {
        [&self.img, &self.txt, &self.pseimg, &self.psetxt]
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            img: self.img.select_rows(rows),
            txt: self.txt.select_rows(rows),
            pseimg: self.pseimg.select_rows(rows),
            psetxt: self.psetxt.select_rows(rows),
        }
    }

    pub fn load_dir(dir: &std::path::Path, expected_n: usize) -> Result<Self> {
        let load = |k: Kind| {
            let bin = dir.join(format!("{}.mmeb", k.name()));
            let path = if bin.exists() {
                bin
            } else {
                dir.join(format!("{}.csv", k.name()))
            };
            load_modality_matrix(&path, expected_n, k)
        };
        Self::new(
            load(Kind::ActualImage)?,
            load(Kind::ActualText)?,
            load(Kind::PseudoImage)?,
            load(Kind::PseudoText)?,
        )
    }

    pub fn save_dir(&self, dir: &std::path::Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for m in self.matrices() {
            save_mmeb(&dir.join(format!("{}.mmeb", m.kind.name())), m)?;
        }
        Ok(())
    }
}
