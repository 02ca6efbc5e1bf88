use nalgebra::{DMatrix, DVector};

use super::{LatentModel, OracleError};
use crate::rng::{normal_vec, Stream};

#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl Gaussian {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self, OracleError> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(OracleError::Invalid("covariance does not match the mean".into()));
        }
        Ok(Self { mean, cov })
    }

    pub fn scalar(mean: f64, var: f64) -> Self {
        Self {
            mean: DVector::from_element(1, mean),
            cov: DMatrix::from_element(1, 1, var),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Maximum-likelihood fit (covariance normalized by `n`).
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self, OracleError> {
        let n = rows.len();
        if n == 0 {
            return Err(OracleError::Invalid("cannot fit a Gaussian to no samples".into()));
        }
        let d = rows[0].len();
        let mut mean = DVector::zeros(d);
        for r in rows {
            mean += DVector::from_column_slice(r);
        }
        mean /= n as f64;
        let mut cov = DMatrix::zeros(d, d);
        for r in rows {
            let c = DVector::from_column_slice(r) - &mean;
            cov += &c * c.transpose();
        }
        cov /= n as f64;
        Ok(Self { mean, cov })
    }

    pub fn sample(&self, rng: &mut Stream) -> Result<Vec<f64>, OracleError> {
        let l = psd_factor(&self.cov)?;
        let z = DVector::from_vec(normal_vec(rng, self.dim()));
        Ok((&self.mean + l * z).iter().copied().collect())
    }

    pub fn log_density(&self, x: &DVector<f64>) -> Result<f64, OracleError> {
        let chol = self.cov.clone().cholesky().ok_or(OracleError::Singular("log density"))?;
        let r = x - &self.mean;
        let sol = chol.solve(&r);
        let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let d = self.dim() as f64;
        Ok(-0.5 * (r.dot(&sol) + logdet + d * (2.0 * std::f64::consts::PI).ln()))
    }
}

/// `L` with `L Lᵀ = Σ` for positive semidefinite `Σ` (eigen-based, so rank
/// deficiency is fine).
pub(crate) fn psd_factor(cov: &DMatrix<f64>) -> Result<DMatrix<f64>, OracleError> {
    if let Some(c) = cov.clone().cholesky() {
        return Ok(c.l());
    }
    let eig = cov.clone().symmetric_eigen();
    let scale = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if eig.eigenvalues.iter().any(|v| *v < -1e-10 * scale.max(1.0)) {
        return Err(OracleError::Singular("covariance is not positive semidefinite"));
    }
    let sqrt = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&sqrt))
}

/// A linear-Gaussian conditional `x | y ~ N(M y + b, C)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffinePosterior {
    pub m: DMatrix<f64>,
    pub b: DVector<f64>,
    pub c: DMatrix<f64>,
}

impl AffinePosterior {
    /// Shifts the mean map by `shift` and scales the covariance by `var_scale`.
    pub fn jitter(&self, shift: &DVector<f64>, var_scale: f64) -> Self {
        Self {
            m: self.m.clone(),
            b: &self.b + shift,
            c: &self.c * var_scale,
        }
    }
}

/// `x ~ N(μ*, Σ*)`, `y = A x + N(0, σ_Y² I)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianLinearModel {
    pub prior: Gaussian,
    pub a: DMatrix<f64>,
    pub sigma_y: f64,
}

impl GaussianLinearModel {
    pub fn new(prior: Gaussian, a: DMatrix<f64>, sigma_y: f64) -> Result<Self, OracleError> {
        if !(sigma_y > 0.0) {
            return Err(OracleError::Invalid("Gaussian oracle needs sigma_y > 0".into()));
        }
        if a.ncols() != prior.dim() {
            return Err(OracleError::Invalid("channel matrix does not match the prior".into()));
        }
        if prior.cov.clone().cholesky().is_none() {
            return Err(OracleError::Singular("prior covariance is not positive definite"));
        }
        Ok(Self { prior, a, sigma_y })
    }

    /// 1-d model `x ~ N(μ, Σ)`, `y = a x + N(0, σ_Y²)`.
    pub fn scalar(mu: f64, var: f64, a: f64, sigma_y: f64) -> Result<Self, OracleError> {
        Self::new(Gaussian::scalar(mu, var), DMatrix::from_element(1, 1, a), sigma_y)
    }

    fn noise(&self) -> DMatrix<f64> {
        DMatrix::identity(self.a.nrows(), self.a.nrows()) * (self.sigma_y * self.sigma_y)
    }

    /// Observation marginal `N(A μ, A Σ Aᵀ + σ_Y² I)` of a prior.
    pub fn push_forward(&self, pi: &Gaussian) -> Gaussian {
        Gaussian {
            mean: &self.a * &pi.mean,
            cov: &self.a * &pi.cov * self.a.transpose() + self.noise(),
        }
    }

    pub fn p_y(&self) -> Gaussian {
        self.push_forward(&self.prior)
    }

    /// Exact posterior map under prior `pi`:
    /// `C = (Σ⁻¹ + AᵀA/σ_Y²)⁻¹`, `M = C Aᵀ/σ_Y²`, `b = C Σ⁻¹ μ`.
    pub fn posterior_map(&self, pi: &Gaussian) -> Result<AffinePosterior, OracleError> {
        let s2 = self.sigma_y * self.sigma_y;
        let prec_prior = pi
            .cov
            .clone()
            .try_inverse()
            .ok_or(OracleError::Singular("prior covariance"))?;
        let prec = &prec_prior + self.a.transpose() * &self.a / s2;
        let c = prec.try_inverse().ok_or(OracleError::Singular("posterior precision"))?;
        let c = (&c + c.transpose()) * 0.5;
        let m = &c * self.a.transpose() / s2;
        let b = &c * &prec_prior * &pi.mean;
        Ok(AffinePosterior { m, b, c })
    }

    /// `E_{y ~ P_Y^*} q(· | y) = N(M E[y] + b, C + M Cov[y] Mᵀ)`.
    pub fn mix(&self, q: &AffinePosterior) -> Gaussian {
        let py = self.p_y();
        let cov = &q.c + &q.m * &py.cov * q.m.transpose();
        Gaussian {
            mean: &q.m * &py.mean + &q.b,
            cov: (&cov + cov.transpose()) * 0.5,
        }
    }
}

/// One exact EM step in the conjugate family.
pub fn gaussian_em_step(
    pi: &Gaussian,
    model: &GaussianLinearModel,
) -> Result<Gaussian, OracleError> {
    Ok(model.mix(&model.posterior_map(pi)?))
}

/// `KL(p ‖ q)` between Gaussians.
///
/// Uses the generalized eigenvalues `λ` of `(Σ_p, Σ_q)`:
/// `½ Σ (λ - 1 - ln λ) + ½ Δμᵀ Σ_q⁻¹ Δμ`, which stays accurate when `p ≈ q`.
pub fn kl_gaussian(p: &Gaussian, q: &Gaussian) -> Result<f64, OracleError> {
    let lq = q
        .cov
        .clone()
        .cholesky()
        .ok_or(OracleError::Singular("KL reference covariance"))?;
    let l = lq.l();
    let linv = l
        .clone()
        .solve_lower_triangular(&DMatrix::identity(l.nrows(), l.nrows()))
        .ok_or(OracleError::Singular("KL reference factor"))?;
    let w = &linv * &p.cov * linv.transpose();
    let w = (&w + w.transpose()) * 0.5;
    let eig = w.symmetric_eigen();
    let mut trace_term = 0.0;
    for &lam in eig.eigenvalues.iter() {
        if lam <= 0.0 {
            return Err(OracleError::Singular("KL source covariance"));
        }
        trace_term += lam - 1.0 - lam.ln();
    }
    let dm = &q.mean - &p.mean;
    let z = &linv * dm;
    Ok(0.5 * (trace_term + z.dot(&z)))
}

fn logdet_spd(m: &DMatrix<f64>) -> Result<f64, OracleError> {
    let c = m.clone().cholesky().ok_or(OracleError::Singular("log-determinant"))?;
    Ok(2.0 * c.l().diagonal().iter().map(|v| v.ln()).sum::<f64>())
}

impl LatentModel for GaussianLinearModel {
    type Prior = Gaussian;
    type Posterior = AffinePosterior;

    fn true_prior(&self) -> Gaussian {
        self.prior.clone()
    }

    fn exact_posterior(&self, pi: &Gaussian) -> Result<AffinePosterior, OracleError> {
        self.posterior_map(pi)
    }

    fn mixture(&self, q: &AffinePosterior) -> Result<Gaussian, OracleError> {
        Ok(self.mix(q))
    }

    fn kl_prior(&self, p: &Gaussian, q: &Gaussian) -> Result<f64, OracleError> {
        kl_gaussian(p, q)
    }

    fn kl_obs(&self, pi: &Gaussian) -> Result<f64, OracleError> {
        kl_gaussian(&self.p_y(), &self.push_forward(pi))
    }

    /// `E_y KL(N(M_q y + b_q, C_q) ‖ N(M y + b, C))` in closed form.
    fn eps_sm(&self, q: &AffinePosterior, exact: &AffinePosterior) -> Result<f64, OracleError> {
        let py = self.p_y();
        let cov_part = kl_gaussian(
            &Gaussian {
                mean: DVector::zeros(q.b.len()),
                cov: q.c.clone(),
            },
            &Gaussian {
                mean: DVector::zeros(q.b.len()),
                cov: exact.c.clone(),
            },
        )?;
        let prec = exact
            .c
            .clone()
            .try_inverse()
            .ok_or(OracleError::Singular("posterior covariance"))?;
        let dm = &q.m - &exact.m;
        let mean_delta = &dm * &py.mean + (&q.b - &exact.b);
        let quad = mean_delta.dot(&(&prec * &mean_delta))
            + (&prec * &dm * &py.cov * dm.transpose()).trace();
        Ok(cov_part + 0.5 * quad)
    }

    /// `E_{(X,Y) ~ P^*} [log N(X; M Y + b, C) - log N(X; M_q Y + b_q, C_q)]`.
    fn eps_tilde(&self, q: &AffinePosterior, exact: &AffinePosterior) -> Result<f64, OracleError> {
        let expected_log = |p: &AffinePosterior| -> Result<f64, OracleError> {
            let s = &self.prior.cov;
            let sy = self.p_y().cov;
            // residual r = X - M Y - b
            let mean = &self.prior.mean - &p.m * (&self.a * &self.prior.mean) - &p.b;
            let cross = s * self.a.transpose() * p.m.transpose();
            let cov = s - &cross - cross.transpose() + &p.m * &sy * p.m.transpose();
            let prec = p.c.clone().try_inverse().ok_or(OracleError::Singular("posterior covariance"))?;
            let quad = (&prec * cov).trace() + mean.dot(&(&prec * &mean));
            let d = p.b.len() as f64;
            Ok(-0.5 * (quad + logdet_spd(&p.c)? + d * (2.0 * std::f64::consts::PI).ln()))
        };
        Ok(expected_log(exact)? - expected_log(q)?)
    }
}
