use nalgebra::{DMatrix, DVector};

use super::EmError;
use crate::channels::Observation;
use crate::diffusion::kalman_update;
use crate::numerics::Tensor;
use crate::oracle::Gaussian;
use crate::rng::stream;

/// Default number of closed-form EM iterations for the Gaussian fit.
pub const GAUSSIAN_INIT_ITERATIONS: usize = 16;

/// Result of the closed-form Gaussian EM initialization.
#[derive(Clone, Debug)]
pub struct GaussianInit {
    pub prior: Gaussian,
    /// One posterior sample per observation, in observation order.
    pub dataset: Tensor,
    /// Observed-data log-likelihood before each M-step and after the last.
    pub log_likelihood: Vec<f64>,
}

/// `A` with all-zero rows dropped (masked pixels), and the matching `y` entries.
fn informative_rows(o: &Observation) -> (DMatrix<f64>, DVector<f64>) {
    let a = o.a.to_dense();
    let (r, c) = (a.shape()[0], a.shape()[1]);
    let keep: Vec<usize> = (0..r)
        .filter(|&i| a.row_slice(i).iter().any(|v| *v != 0.0))
        .collect();
    let mut m = DMatrix::zeros(keep.len(), c);
    let mut y = DVector::zeros(keep.len());
    for (k, &i) in keep.iter().enumerate() {
        for j in 0..c {
            m[(k, j)] = a.row_slice(i)[j];
        }
        y[k] = o.y[i];
    }
    (m, y)
}

fn posterior(
    prior: &Gaussian,
    a: &DMatrix<f64>,
    y: &DVector<f64>,
    sigma_y: f64,
) -> Result<(DVector<f64>, DMatrix<f64>), EmError> {
    if a.nrows() == 0 {
        return Ok((prior.mean.clone(), prior.cov.clone()));
    }
    let noise = DMatrix::identity(a.nrows(), a.nrows()) * (sigma_y * sigma_y);
    kalman_update(&prior.mean, &prior.cov, a, &noise, y).map_err(|_| EmError::SingularPosterior)
}

/// `Σ_i log N(y_i; A_i μ, A_i Σ A_iᵀ + σ_Y² I)`.
pub fn gaussian_marginal_loglik(
    obs: &[Observation],
    prior: &Gaussian,
    sigma_y: f64,
) -> Result<f64, EmError> {
    let mut total = 0.0;
    for o in obs {
        let (a, y) = informative_rows(o);
        if a.nrows() == 0 {
            continue;
        }
        let cov = &a * &prior.cov * a.transpose()
            + DMatrix::identity(a.nrows(), a.nrows()) * (sigma_y * sigma_y);
        let g = Gaussian {
            mean: &a * &prior.mean,
            cov,
        };
        total += g.log_density(&y).map_err(|_| EmError::SingularPosterior)?;
    }
    Ok(total)
}

/// Fits `N(μ, Σ)` to the observations by closed-form EM, then draws one
/// posterior sample per observation.
///
/// Starts from `N(0, I)`. The sample for observation `i` uses the stream
/// `(seed, "init/gaussian", i)`.
pub fn init_gaussian_prior(
    obs: &[Observation],
    sigma_y: f64,
    iterations: usize,
    seed: u64,
) -> Result<GaussianInit, EmError> {
    if obs.is_empty() {
        return Err(EmError::EmptyDataset);
    }
    if !(sigma_y > 0.0) {
        return Err(EmError::Config(
            "Gaussian-prior init needs sigma_y > 0; set a small noise floor such as 1e-3".into(),
        ));
    }
    let d = obs[0].a.cols();
    let rows: Vec<_> = obs.iter().map(informative_rows).collect();
    let mut prior = Gaussian {
        mean: DVector::zeros(d),
        cov: DMatrix::identity(d, d),
    };
    let mut log_likelihood = Vec::with_capacity(iterations + 1);
    let n = obs.len() as f64;
    for _ in 0..iterations {
        log_likelihood.push(gaussian_marginal_loglik(obs, &prior, sigma_y)?);
        let mut post = Vec::with_capacity(obs.len());
        for (a, y) in &rows {
            post.push(posterior(&prior, a, y, sigma_y)?);
        }
        let mean = post.iter().fold(DVector::zeros(d), |acc, (m, _)| acc + m) / n;
        let mut cov = DMatrix::zeros(d, d);
        for (m, c) in &post {
            let dm = m - &mean;
            cov += c + &dm * dm.transpose();
        }
        cov /= n;
        prior = Gaussian {
            mean,
            cov: (&cov + cov.transpose()) * 0.5,
        };
    }
    log_likelihood.push(gaussian_marginal_loglik(obs, &prior, sigma_y)?);

    let mut data = Vec::with_capacity(obs.len() * d);
    for (i, (a, y)) in rows.iter().enumerate() {
        let (m, c) = posterior(&prior, a, y, sigma_y)?;
        let post = Gaussian { mean: m, cov: c };
        let mut rng = stream(seed, "init/gaussian", &[i as u64]);
        data.extend(post.sample(&mut rng).map_err(|_| EmError::SingularPosterior)?);
    }
    Ok(GaussianInit {
        prior,
        dataset: Tensor::new(vec![obs.len(), d], data)?,
        log_likelihood,
    })
}

/// Uses each observation `y_i` verbatim as a clean-space sample.
pub fn init_corrupted_prior(obs: &[Observation]) -> Result<Tensor, EmError> {
    if obs.is_empty() {
        return Err(EmError::EmptyDataset);
    }
    let d = obs[0].a.cols();
    let mut data = Vec::with_capacity(obs.len() * d);
    for o in obs {
        if o.y.len() != o.a.cols() {
            return Err(EmError::Config(format!(
                "corrupted-prior init needs dim(y) == dim(x), got {} and {}",
                o.y.len(),
                o.a.cols()
            )));
        }
        data.extend_from_slice(&o.y);
    }
    Ok(Tensor::new(vec![obs.len(), d], data)?)
}
