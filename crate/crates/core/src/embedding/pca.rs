use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::{EmbeddingMatrix, Kind, ModalityBundle};
use crate::error::{Error, Result};

/// Eigenvalues below this fraction of the largest are treated as zero and
/// their directions replaced by zero vectors.
const RANK_TOL: f64 = 1e-10;

/// Mean and top principal directions of a set of rows.
#[derive(Clone, Debug)]
pub struct PcaBasis {
    pub mean: DVector<f64>,
    /// `d × dim`, one component per row; zero rows pad rank deficiency.
    pub components: DMatrix<f64>,
    /// Eigenvalues of the row covariance (divided by the row count), descending.
    pub eigenvalues: Vec<f64>,
}

impl PcaBasis {
    /// Fits on the rows of `x` (`m × dim`).
    pub fn fit(x: &DMatrix<f64>, d: usize) -> Result<Self> {
        let (m, dim) = x.shape();
        if d > dim {
            return Err(Error::Config(format!("PCA target width {d} exceeds input width {dim}")));
        }
        if m == 0 {
            return Err(Error::Config("PCA needs at least one row".into()));
        }
        let mean = x.row_mean().transpose();
        let mut xc = x.clone();
        for mut row in xc.row_iter_mut() {
            row -= mean.transpose();
        }

        // eigenvectors of the smaller Gram matrix when there are few rows
        let (mut values, vectors) = if m < dim {
            let gram = &xc * xc.transpose() / m as f64;
            let eig = SymmetricEigen::new(gram);
            let mut v = xc.transpose() * &eig.eigenvectors;
            for (j, mut col) in v.column_iter_mut().enumerate() {
                let lam = eig.eigenvalues[j];
                let norm = col.norm();
                if lam > 0.0 && norm > 0.0 {
                    col /= norm;
                } else {
                    col.fill(0.0);
                }
            }
            (eig.eigenvalues.iter().copied().collect::<Vec<_>>(), v)
        } else {
            let cov = xc.transpose() * &xc / m as f64;
            let eig = SymmetricEigen::new(cov);
            (eig.eigenvalues.iter().copied().collect(), eig.eigenvectors)
        };

        let mut order: Vec<usize> = (0..values.len()).collect();
        order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
        let top = values.iter().copied().fold(0.0_f64, f64::max);
        let mut components = DMatrix::zeros(d, dim);
        for (slot, &j) in order.iter().take(d).enumerate() {
            if values[j] <= RANK_TOL * top || top <= 0.0 {
                continue;
            }
            let mut v = vectors.column(j).into_owned();
            // sign convention: largest-magnitude entry positive
            let pivot = v.iter().copied().fold(0.0_f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
            if pivot < 0.0 {
                v = -v;
            }
            components.set_row(slot, &v.transpose());
        }
        let mut sorted: Vec<f64> = order.iter().map(|&j| values[j].max(0.0)).collect();
        sorted.resize(dim, 0.0);
        values = sorted;
        Ok(Self {
            mean,
            components,
            eigenvalues: values,
        })
    }

    pub fn project(&self, m: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
        if m.dim() != self.mean.len() {
            return Err(Error::Config(format!(
                "{} has width {}, basis expects {}",
                m.kind,
                m.dim(),
                self.mean.len()
            )));
        }
        let d = self.components.nrows();
        let mut out = Vec::with_capacity(m.rows() * d);
        for i in 0..m.rows() {
            let x = DVector::from_iterator(m.dim(), m.row(i).iter().copied()) - &self.mean;
            let y = &self.components * x;
            out.extend(y.iter().copied());
        }
        EmbeddingMatrix::new(m.kind, m.rows(), d, out)
    }
}

fn stack(mats: &[&EmbeddingMatrix], rows: &[usize]) -> DMatrix<f64> {
    let dim = mats[0].dim();
    let mut data = Vec::with_capacity(mats.len() * rows.len() * dim);
    for m in mats {
        for &r in rows {
            data.extend_from_slice(m.row(r));
        }
    }
    DMatrix::from_row_slice(mats.len() * rows.len(), dim, &data)
}

/// Projects every row onto the top-`d` principal components of the
/// mean-centered `basis_from` rows.
pub fn pca_reduce(matrix: &EmbeddingMatrix, d: usize, basis_from: &[usize]) -> Result<EmbeddingMatrix> {
    let basis = PcaBasis::fit(&stack(&[matrix], basis_from), d)?;
    basis.project(matrix)
}

/// How bases are shared across the four matrices of a bundle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PcaFit {
    /// One basis per modality space, fit on actual and pseudo rows together,
    /// so a pseudo image stays comparable to its actual image after reduction.
    PerSpace,
    /// An independent basis per matrix.
    PerKind,
}

impl std::str::FromStr for PcaFit {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_space" => Ok(Self::PerSpace),
            "per_kind" => Ok(Self::PerKind),
            other => Err(Error::Config(format!("pca_fit must be per_space or per_kind, got `{other}`"))),
        }
    }
}

impl std::fmt::Display for PcaFit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::PerSpace => "per_space",
            Self::PerKind => "per_kind",
        })
    }
}

/// Reduces all four matrices to width `d`, fitting on `train_rows` only.
/// A bundle already at width `d` is still centered and rotated.
pub fn reduce_bundle(b: &ModalityBundle, d: usize, train_rows: &[usize], fit: PcaFit) -> Result<ModalityBundle> {
    let reduce = |kinds: &[Kind]| -> Result<Vec<EmbeddingMatrix>> {
        let mats: Vec<&EmbeddingMatrix> = kinds.iter().map(|&k| b.get(k)).collect();
        let basis = PcaBasis::fit(&stack(&mats, train_rows), d)?;
        mats.iter().map(|m| basis.project(m)).collect()
    };
    match fit {
        PcaFit::PerSpace => {
            let mut img = reduce(&[Kind::ActualImage, Kind::PseudoImage])?;
            let mut txt = reduce(&[Kind::ActualText, Kind::PseudoText])?;
            let pseimg = img.pop().expect("two");
            let psetxt = txt.pop().expect("two");
            ModalityBundle::new(img.pop().expect("one"), txt.pop().expect("one"), pseimg, psetxt)
        }
        PcaFit::PerKind => {
            let one = |k| reduce(&[k]).map(|mut v| v.pop().expect("one"));
            ModalityBundle::new(
                one(Kind::ActualImage)?,
                one(Kind::ActualText)?,
                one(Kind::PseudoImage)?,
                one(Kind::PseudoText)?,
            )
        }
    }
}
