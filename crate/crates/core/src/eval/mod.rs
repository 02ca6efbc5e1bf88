//! Distribution and reconstruction metrics, and the Richardson–Lucy baseline.

mod sinkhorn;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

pub use sinkhorn::{
    sinkhorn_divergence, sinkhorn_divergence_sampled, subsample, SinkhornConfig, SinkhornResult,
};

use crate::channels::MatrixDescriptor;
use crate::numerics::{NumericsError, Tensor};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("dimension mismatch: {lhs} vs {rhs}")]
    Dimension { lhs: usize, rhs: usize },
    #[error("{0}")]
    Invalid(String),
    #[error("matrix square root of a non-PSD matrix (eigenvalue {0})")]
    NotPsd(f64),
}

/// Shrinkage added to fitted covariances before square roots.
pub const COV_SHRINK: f64 = 1e-6;

/// Sample mean and (n-1)-normalized covariance of the rows of `x`.
pub fn mean_cov(x: &Tensor) -> Result<(DVector<f64>, DMatrix<f64>), EvalError> {
    let (n, d) = x.dims2("mean_cov")?;
    if n < 2 {
        return Err(EvalError::Invalid("covariance needs at least 2 samples".into()));
    }
    let mut mean = DVector::zeros(d);
    for i in 0..n {
        mean += DVector::from_column_slice(x.row_slice(i));
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for i in 0..n {
        let c = DVector::from_column_slice(x.row_slice(i)) - &mean;
        cov += &c * c.transpose();
    }
    cov /= (n - 1) as f64;
    Ok((mean, cov))
}

/// Symmetric PSD square root; small negative eigenvalues are clipped to zero.
pub fn sqrtm_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>, EvalError> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    if let Some(v) = eig.eigenvalues.iter().find(|v| **v < -1e-8 * scale) {
        return Err(EvalError::NotPsd(*v));
    }
    let s = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&s) * eig.eigenvectors.transpose())
}

/// 2-Wasserstein distance squared between two Gaussians.
pub fn frechet_from_moments(
    mean_a: &DVector<f64>,
    cov_a: &DMatrix<f64>,
    mean_b: &DVector<f64>,
    cov_b: &DMatrix<f64>,
) -> Result<f64, EvalError> {
    let ra = sqrtm_psd(cov_a)?;
    let cross = sqrtm_psd(&(&ra * cov_b * &ra))?;
    let dm = mean_a - mean_b;
    Ok((dm.dot(&dm) + (cov_a + cov_b - cross * 2.0).trace()).max(0.0))
}

/// Fréchet distance between Gaussians fitted to two sample sets.
pub fn gaussian_frechet(a: &Tensor, b: &Tensor) -> Result<f64, EvalError> {
    sinkhorn::check_pair(a, b)?;
    let (ma, ca) = mean_cov(a)?;
    let (mb, cb) = mean_cov(b)?;
    let d = ma.len();
    let shrink = DMatrix::identity(d, d) * COV_SHRINK;
    frechet_from_moments(&ma, &(ca + &shrink), &mb, &(cb + shrink))
}

/// Floor applied to `K x` before dividing.
pub const RL_FLOOR: f64 = 1e-12;

/// Richardson–Lucy iterates and the data-fidelity value after each step.
#[derive(Clone, Debug, PartialEq)]
pub struct RlTrace {
    pub image: Vec<f64>,
    /// Generalized I-divergence `Σ y log(y/Kx) - y + Kx` after each iteration.
    pub fidelity: Vec<f64>,
}

/// Richardson–Lucy deconvolution with the normalized update
/// `x ← x / (Kᵀ1) · Kᵀ(y / Kx)`.
///
/// Negative inputs are shifted by their minimum, which is added back to the
/// result. Each iterate satisfies `Σ (K x) = Σ y`; for kernels whose columns
/// also sum to one this is `Σ x = Σ y`.
pub fn richardson_lucy(
    y: &[f64],
    kernel: &MatrixDescriptor,
    iterations: usize,
) -> Result<RlTrace, EvalError> {
    if iterations == 0 {
        return Err(EvalError::Invalid("Richardson-Lucy needs at least 1 iteration".into()));
    }
    let k = kernel.to_dense();
    let (r, c) = k.dims2("richardson_lucy")?;
    if r != c || r != y.len() {
        return Err(EvalError::Dimension { lhs: r, rhs: y.len() });
    }
    let shift = y.iter().copied().fold(f64::INFINITY, f64::min).min(0.0);
    let ys: Vec<f64> = y.iter().map(|v| v - shift).collect();
    let kd = k.data();
    let apply = |x: &[f64]| -> Vec<f64> {
        (0..r).map(|i| kd[i * c..(i + 1) * c].iter().zip(x).map(|(a, b)| a * b).sum()).collect()
    };
    let apply_t = |v: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                out[j] += kd[i * c + j] * v[i];
            }
        }
        out
    };
    let col_sums = apply_t(&vec![1.0; r]);
    let mut x = ys.clone();
    let mut fidelity = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let kx = apply(&x);
        let ratio: Vec<f64> = ys.iter().zip(&kx).map(|(a, b)| a / b.max(RL_FLOOR)).collect();
        let back = apply_t(&ratio);
        for ((xj, bj), sj) in x.iter_mut().zip(&back).zip(&col_sums) {
            *xj *= bj / sj.max(RL_FLOOR);
        }
        fidelity.push(i_divergence(&ys, &apply(&x)));
    }
    Ok(RlTrace {
        image: x.into_iter().map(|v| v + shift).collect(),
        fidelity,
    })
}

/// `Σ y log(y/m) - y + m`, with `0 log 0 = 0`.
pub fn i_divergence(y: &[f64], m: &[f64]) -> f64 {
    y.iter()
        .zip(m)
        .map(|(&a, &b)| {
            let b = b.max(RL_FLOOR);
            if a > 0.0 {
                a * (a / b).ln() - a + b
            } else {
                b
            }
        })
        .sum()
}

pub fn mse(a: &[f64], b: &[f64]) -> Result<f64, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::Dimension {
            lhs: a.len(),
            rhs: b.len(),
        });
    }
    if a.is_empty() {
        return Err(EvalError::Invalid("mse of empty vectors".into()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

/// `10 log10(peak² / mse)`; `+∞` for identical inputs.
pub fn psnr(a: &[f64], b: &[f64], peak: f64) -> Result<f64, EvalError> {
    if !(peak > 0.0) {
        return Err(EvalError::Invalid(format!("psnr peak = {peak}")));
    }
    let e = mse(a, b)?;
    if e == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / e).log10())
}
