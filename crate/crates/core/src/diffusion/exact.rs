use nalgebra::{DMatrix, DVector};

use super::{Denoiser, DiffusionError};
use crate::channels::Observation;
use crate::numerics::Tensor;

/// Exact denoiser for a Gaussian prior `N(μ, Σ)`, optionally conditioned on
/// linear-Gaussian observations with noise `σ_Y`.
///
/// Conditioning on `y` and on `x_t` are two sequential Kalman updates, so a
/// singular `Σ` is fine as long as the innovation covariances are invertible.
#[derive(Clone, Debug)]
pub struct GaussianDenoiser {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub sigma_y: Option<f64>,
}

/// Posterior `(m, C)` of `x ~ N(μ, Σ)` after observing `o = H x + N(0, R)`.
pub fn kalman_update(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    h: &DMatrix<f64>,
    r: &DMatrix<f64>,
    o: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>), DiffusionError> {
    let ph = cov * h.transpose();
    let s = h * &ph + r;
    let chol = s
        .cholesky()
        .ok_or_else(|| DiffusionError::Oracle("innovation covariance is not positive definite".into()))?;
    let gain_t = chol.solve(&ph.transpose());
    let m = mean + gain_t.transpose() * (o - h * mean);
    let c = cov - gain_t.transpose() * &ph.transpose();
    let c = (&c + c.transpose()) * 0.5;
    Ok((m, c))
}

impl GaussianDenoiser {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>, sigma_y: Option<f64>) -> Self {
        Self { mean, cov, sigma_y }
    }

    /// Prior conditioned on one observation.
    pub fn posterior(&self, obs: &Observation) -> Result<(DVector<f64>, DMatrix<f64>), DiffusionError> {
        let sy = self
            .sigma_y
            .filter(|s| *s > 0.0)
            .ok_or_else(|| DiffusionError::Oracle("conditioning needs sigma_y > 0".into()))?;
        let a = obs.a.to_dense();
        let (r, c) = (a.shape()[0], a.shape()[1]);
        let h = DMatrix::from_row_slice(r, c, a.data());
        let noise = DMatrix::identity(r, r) * (sy * sy);
        kalman_update(&self.mean, &self.cov, &h, &noise, &DVector::from_column_slice(&obs.y))
    }

    fn denoise_from(
        mean: &DVector<f64>,
        cov: &DMatrix<f64>,
        x: &[f64],
        sigma_sq: f64,
    ) -> Result<DVector<f64>, DiffusionError> {
        let d = mean.len();
        let h = DMatrix::identity(d, d);
        let r = DMatrix::identity(d, d) * sigma_sq;
        Ok(kalman_update(mean, cov, &h, &r, &DVector::from_column_slice(x))?.0)
    }
}

impl Denoiser for GaussianDenoiser {
    fn dim_x(&self) -> usize {
        self.mean.len()
    }

    fn denoise(
        &self,
        x_t: &Tensor,
        sigma_sq: f64,
        obs: Option<&[Observation]>,
    ) -> Result<Tensor, DiffusionError> {
        let (b, d) = x_t.dims2("gaussian denoiser")?;
        if d != self.mean.len() {
            return Err(DiffusionError::BatchMismatch {
                expected: self.mean.len(),
                got: d,
            });
        }
        let mut out = Vec::with_capacity(b * d);
        match obs {
            Some(obs) if self.sigma_y.is_some() => {
                if obs.len() != b {
                    return Err(DiffusionError::BatchMismatch {
                        expected: b,
                        got: obs.len(),
                    });
                }
                for (i, o) in obs.iter().enumerate() {
                    let (m, c) = self.posterior(o)?;
                    out.extend(Self::denoise_from(&m, &c, x_t.row_slice(i), sigma_sq)?.iter());
                }
            }
            _ => {
                // shared gain G = Σ (Σ + σ² I)^{-1}
                let s = &self.cov + DMatrix::identity(d, d) * sigma_sq;
                let chol = s.cholesky().ok_or_else(|| {
                    DiffusionError::Oracle("prior plus noise covariance is not positive definite".into())
                })?;
                let gain = chol.solve(&self.cov).transpose();
                for i in 0..b {
                    let x = DVector::from_column_slice(x_t.row_slice(i));
                    let v = &self.mean + &gain * (x - &self.mean);
                    out.extend(v.iter());
                }
            }
        }
        Ok(Tensor::new(vec![b, d], out)?)
    }
}
