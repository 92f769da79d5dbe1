//! Principal-component compression of embedding rows.
//!
//! The fitted mean and component matrix are rounded to `f32` precision at the
//! end of fitting, so the model written to VPEM files reloads bit-for-bit.

use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{load_embeddings, EmbeddingMatrix};

pub const MEAN_FILE: &str = "pca_mean.vpem";
pub const COMPONENTS_FILE: &str = "pca_components.vpem";
pub const SIDECAR_FILE: &str = "pca.json";

#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    mean: DVector<f64>,
    /// D x d' with orthonormal columns, strongest direction first.
    components: DMatrix<f64>,
    explained_variance: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaSidecar {
    pub d_prime: usize,
    pub explained_variance: Vec<f64>,
}

pub fn embedding_to_matrix(emb: &EmbeddingMatrix) -> DMatrix<f64> {
    DMatrix::from_fn(emb.rows(), emb.dim(), |r, c| f64::from(emb.row(r)[c]))
}

pub fn matrix_to_embedding(m: &DMatrix<f64>) -> Result<EmbeddingMatrix> {
    let mut data = Vec::with_capacity(m.nrows() * m.ncols());
    for r in 0..m.nrows() {
        data.extend(m.row(r).iter().map(|v| *v as f32));
    }
    EmbeddingMatrix::new(m.nrows(), m.ncols(), data)
}

fn round_f32(v: f64) -> f64 {
    f64::from(v as f32)
}

/// Flips `col` so its largest-magnitude entry (first on ties) is non-negative.
fn orient(col: &mut [f64]) {
    let mut pivot = 0;
    for (i, v) in col.iter().enumerate() {
        if v.abs() > col[pivot].abs() {
            pivot = i;
        }
    }
    if col[pivot] < 0.0 {
        col.iter_mut().for_each(|v| *v = -*v);
    }
}

/// Fits the top-`d_prime` principal directions of `data` (rows are samples).
///
/// Sample covariance uses the `n - 1` divisor. Rank-deficient data is accepted;
/// directions spanning a zero-variance subspace come out of the eigensolver
/// deterministically.
pub fn fit_pca(data: &DMatrix<f64>, d_prime: usize) -> Result<PcaModel> {
    let (n, dim) = data.shape();
    if n < 2 {
        return Err(Error::Precondition(format!(
            "PCA needs at least 2 rows, got {n}"
        )));
    }
    if d_prime == 0 || d_prime > n.min(dim) {
        return Err(Error::Precondition(format!(
            "PCA dimension {d_prime} outside 1..={} for {n}x{dim} data",
            n.min(dim)
        )));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Precondition(
            "PCA input has non-finite entries".into(),
        ));
    }

    let mean: DVector<f64> = data.row_mean().transpose();
    let mut centered = data.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = (centered.transpose() * &centered) / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);

    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let mut components = DMatrix::zeros(dim, d_prime);
    let mut explained_variance = Vec::with_capacity(d_prime);
    for (j, &src) in order.iter().take(d_prime).enumerate() {
        let mut col: Vec<f64> = eig.eigenvectors.column(src).iter().copied().collect();
        orient(&mut col);
        for (i, v) in col.into_iter().enumerate() {
            components[(i, j)] = round_f32(v);
        }
        explained_variance.push(eig.eigenvalues[src].max(0.0));
    }
    // sorting already gives non-increasing order; clamping can only tie
    Ok(PcaModel {
        mean: mean.map(round_f32),
        components,
        explained_variance,
    })
}

impl PcaModel {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn d_prime(&self) -> usize {
        self.components.ncols()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn components(&self) -> &DMatrix<f64> {
        &self.components
    }

    pub fn explained_variance(&self) -> &[f64] {
        &self.explained_variance
    }

    /// `(rows - mean) * components`
    pub fn project(&self, rows: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if rows.ncols() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "project expects {} columns, got {}",
                self.dim(),
                rows.ncols()
            )));
        }
        let mut centered = rows.clone();
        for mut row in centered.row_iter_mut() {
            row -= self.mean.transpose();
        }
        Ok(centered * &self.components)
    }

    /// `low * components^T + mean`
    pub fn reconstruct(&self, low: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if low.ncols() != self.d_prime() {
            return Err(Error::DimensionMismatch(format!(
                "reconstruct expects {} columns, got {}",
                self.d_prime(),
                low.ncols()
            )));
        }
        let mut out = low * self.components.transpose();
        for mut row in out.row_iter_mut() {
            row += self.mean.transpose();
        }
        Ok(out)
    }

    pub fn mean_matrix(&self) -> Result<EmbeddingMatrix> {
        matrix_to_embedding(&DMatrix::from_row_slice(
            1,
            self.dim(),
            self.mean.as_slice(),
        ))
    }

    pub fn components_matrix(&self) -> Result<EmbeddingMatrix> {
        matrix_to_embedding(&self.components)
    }

    pub fn sidecar(&self) -> PcaSidecar {
        PcaSidecar {
            d_prime: self.d_prime(),
            explained_variance: self.explained_variance.clone(),
        }
    }

    pub fn from_parts(
        mean: &EmbeddingMatrix,
        components: &EmbeddingMatrix,
        sidecar: PcaSidecar,
    ) -> Result<Self> {
        let ctx = "pca artifacts";
        if mean.rows() != 1 {
            return Err(Error::format(
                ctx,
                format!("mean must be 1xD, got {}x{}", mean.rows(), mean.dim()),
            ));
        }
        if components.rows() != mean.dim() || components.dim() != sidecar.d_prime {
            return Err(Error::format(
                ctx,
                format!(
                    "components are {}x{}, expected {}x{}",
                    components.rows(),
                    components.dim(),
                    mean.dim(),
                    sidecar.d_prime
                ),
            ));
        }
        if sidecar.explained_variance.len() != sidecar.d_prime {
            return Err(Error::format(
                ctx,
                "explained_variance length differs from d_prime",
            ));
        }
        Ok(Self {
            mean: DVector::from_iterator(mean.dim(), mean.row(0).iter().map(|v| f64::from(*v))),
            components: embedding_to_matrix(components),
            explained_variance: sidecar.explained_variance,
        })
    }
}

pub fn load_pca(dir: impl AsRef<Path>) -> Result<PcaModel> {
    let dir = dir.as_ref();
    let mean = load_embeddings(dir.join(MEAN_FILE))?;
    let components = load_embeddings(dir.join(COMPONENTS_FILE))?;
    let side_path = dir.join(SIDECAR_FILE);
    let text = std::fs::read_to_string(&side_path).map_err(|e| Error::io(&side_path, e))?;
    let sidecar: PcaSidecar = serde_json::from_str(&text).map_err(|e| {
        Error::format(
            format!("pca sidecar {}", side_path.display()),
            e.to_string(),
        )
    })?;
    PcaModel::from_parts(&mean, &components, sidecar)
}
