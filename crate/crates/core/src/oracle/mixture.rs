use nalgebra::{DMatrix, DVector};

use super::{Gaussian, OracleError};
use crate::channels::Observation;
use crate::diffusion::{Denoiser, DiffusionError};
use crate::numerics::Tensor;

/// A finite Gaussian mixture prior; component covariances may be singular
/// (a zero covariance is a point mass).
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMixture {
    pub weights: Vec<f64>,
    pub components: Vec<Gaussian>,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, components: Vec<Gaussian>) -> Result<Self, OracleError> {
        if weights.len() != components.len() || weights.is_empty() {
            return Err(OracleError::Invalid("one weight per component required".into()));
        }
        let s: f64 = weights.iter().sum();
        if weights.iter().any(|w| *w < 0.0) || (s - 1.0).abs() > 1e-12 {
            return Err(OracleError::Invalid(format!("mixture weights sum to {s}")));
        }
        let d = components[0].dim();
        if components.iter().any(|c| c.dim() != d) {
            return Err(OracleError::Invalid("components differ in dimension".into()));
        }
        Ok(Self { weights, components })
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    /// Point masses at `atoms` with the given weights.
    pub fn atoms(weights: Vec<f64>, atoms: &[Vec<f64>]) -> Result<Self, OracleError> {
        let comps = atoms
            .iter()
            .map(|a| Gaussian::new(DVector::from_column_slice(a), DMatrix::zeros(a.len(), a.len())))
            .collect::<Result<_, _>>()?;
        Self::new(weights, comps)
    }
}

fn log_normal(o: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64, OracleError> {
    Gaussian {
        mean: mean.clone(),
        cov: cov.clone(),
    }
    .log_density(o)
}

/// `E[X0 | X_t = x_t, Y = y]` for a Gaussian-mixture prior, `y = A X0 + N(0, σ_Y² I)`
/// and `X_t = X0 + N(0, σ_t² I)`.
///
/// Each component is conditioned on the stacked observation `(x_t, y)`;
/// component responsibilities are combined with log-sum-exp.
pub fn mixture_posterior_mean(
    prior: &GaussianMixture,
    a: &DMatrix<f64>,
    sigma_y: f64,
    sigma_t: f64,
    x_t: &DVector<f64>,
    y: &DVector<f64>,
) -> Result<DVector<f64>, OracleError> {
    if !(sigma_y > 0.0 && sigma_t > 0.0) {
        return Err(OracleError::Invalid("sigma_y and sigma_t must be positive".into()));
    }
    let d = prior.dim();
    let r = a.nrows();
    if a.ncols() != d || x_t.len() != d || y.len() != r {
        return Err(OracleError::Invalid("dimension mismatch in mixture posterior".into()));
    }
    let mut h = DMatrix::zeros(d + r, d);
    h.view_mut((0, 0), (d, d)).copy_from(&DMatrix::identity(d, d));
    h.view_mut((d, 0), (r, d)).copy_from(a);
    let mut noise = DMatrix::zeros(d + r, d + r);
    for i in 0..d {
        noise[(i, i)] = sigma_t * sigma_t;
    }
    for i in 0..r {
        noise[(d + i, d + i)] = sigma_y * sigma_y;
    }
    let mut o = DVector::zeros(d + r);
    o.rows_mut(0, d).copy_from(x_t);
    o.rows_mut(d, r).copy_from(y);

    let mut logw = Vec::with_capacity(prior.components.len());
    let mut means = Vec::with_capacity(prior.components.len());
    for (w, c) in prior.weights.iter().zip(&prior.components) {
        if *w == 0.0 {
            continue;
        }
        let s = &h * &c.cov * h.transpose() + &noise;
        logw.push(w.ln() + log_normal(&o, &(&h * &c.mean), &s)?);
        let (m, _) = crate::diffusion::kalman_update(&c.mean, &c.cov, &h, &noise, &o)
            .map_err(|e| OracleError::Invalid(e.to_string()))?;
        means.push(m);
    }
    let top = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !top.is_finite() {
        return Err(OracleError::Underflow);
    }
    let mut out = DVector::zeros(d);
    let mut z = 0.0;
    for (lw, m) in logw.iter().zip(&means) {
        let w = (lw - top).exp();
        z += w;
        out += m * w;
    }
    Ok(out / z)
}

/// Exact denoiser of a Gaussian-mixture prior, optionally conditioned on `y`.
#[derive(Clone, Debug)]
pub struct MixtureDenoiser {
    pub prior: GaussianMixture,
    pub sigma_y: f64,
}

impl Denoiser for MixtureDenoiser {
    fn dim_x(&self) -> usize {
        self.prior.dim()
    }

    fn denoise(
        &self,
        x_t: &Tensor,
        sigma_sq: f64,
        obs: Option<&[Observation]>,
    ) -> Result<Tensor, DiffusionError> {
        let (b, d) = x_t.dims2("mixture denoiser")?;
        let sigma_t = sigma_sq.sqrt();
        let mut out = Vec::with_capacity(b * d);
        for i in 0..b {
            let x = DVector::from_column_slice(x_t.row_slice(i));
            let (a, y) = match obs {
                Some(o) => {
                    let dense = o[i].a.to_dense();
                    let (r, c) = (dense.shape()[0], dense.shape()[1]);
                    (
                        DMatrix::from_row_slice(r, c, dense.data()),
                        DVector::from_column_slice(&o[i].y),
                    )
                }
                // an uninformative observation: zero rows carry no information
                None => (DMatrix::zeros(1, d), DVector::zeros(1)),
            };
            let m = mixture_posterior_mean(&self.prior, &a, self.sigma_y.max(1e-12), sigma_t, &x, &y)
                .map_err(|e| DiffusionError::Oracle(e.to_string()))?;
            out.extend(m.iter());
        }
        Ok(Tensor::new(vec![b, d], out)?)
    }
}
