use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Fréchet distance between Gaussian fits, plus how many eigenvalues had
/// to be clamped at zero while taking matrix square roots.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Fid {
    pub value: f64,
    pub clamped: usize,
}

/// Mean and unbiased (1/(n-1)) covariance of row vectors.
pub fn mean_cov(set: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = set.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 feature vectors, got {n}")));
    }
    let d = set[0].len();
    if d == 0 || set.iter().any(|v| v.len() != d) {
        return Err(Error::DimensionMismatch {
            what: "feature set",
            detail: "vectors differ in length or are empty".into(),
        });
    }
    let x = DMatrix::from_fn(n, d, |i, j| set[i][j]);
    let mean = x.row_mean().transpose();
    let mut centered = x;
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    Ok((mean, cov))
}

/// Square root of a symmetric PSD matrix; negative eigenvalues are set to 0
/// and counted.
pub fn sqrtm_psd(m: &DMatrix<f64>, clamped: &mut usize) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| {
        if l < 0.0 {
            *clamped += 1;
            0.0
        } else {
            l.sqrt()
        }
    });
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `tr((Σa Σb)^{1/2})` as `tr((Σa^{1/2} Σb Σa^{1/2})^{1/2})`, which has the
/// same eigenvalues but is symmetric.
pub fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>, clamped: &mut usize) -> f64 {
    let sa = sqrtm_psd(a, clamped);
    let inner = &sa * b * &sa;
    let sym = (&inner + inner.transpose()) * 0.5;
    SymmetricEigen::new(sym)
        .eigenvalues
        .iter()
        .map(|&l| {
            if l < 0.0 {
                *clamped += 1;
                0.0
            } else {
                l.sqrt()
            }
        })
        .sum()
}

pub fn fid_from_stats(ma: &DVector<f64>, ca: &DMatrix<f64>, mb: &DVector<f64>, cb: &DMatrix<f64>) -> Result<Fid> {
    if ma.len() != mb.len() {
        return Err(Error::DimensionMismatch {
            what: "fid",
            detail: format!("{} vs {} features", ma.len(), mb.len()),
        });
    }
    let mut clamped = 0;
    let dm = (ma - mb).norm_squared();
    let tr = ca.trace() + cb.trace() - 2.0 * trace_sqrt_product(ca, cb, &mut clamped);
    Ok(Fid {
        value: (dm + tr).max(0.0),
        clamped,
    })
}

pub fn fid(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<Fid> {
    let (ma, ca) = mean_cov(a)?;
    let (mb, cb) = mean_cov(b)?;
    fid_from_stats(&ma, &ca, &mb, &cb)
}
