//! Exact latent-variable models with closed-form EM, used to check the
//! convergence inequalities of EM with an imperfect M-step.
//!
//! Notation: `π^(k)` is the prior after `k` steps, `P^(k)(x|y)` its exact
//! posterior, `q^(k+1)(x|y)` the (possibly perturbed) posterior produced by the
//! M-step, and `π^(k+1) = E_{Y ~ P_Y^*} q^(k+1)(· | Y)`.

mod discrete;
mod gaussian;
mod mixture;
mod suite;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use discrete::{
    chi_square, dirichlet, discrete_em_step, discrete_posterior, kl_discrete, perturb_kernel,
    DiscreteModel, Kernel, MixTarget,
};
pub use gaussian::{
    gaussian_em_step, kl_gaussian, AffinePosterior, Gaussian, GaussianLinearModel,
};
pub use mixture::{mixture_posterior_mean, GaussianMixture, MixtureDenoiser};
pub use suite::{
    exact_em_reports, gaussian_rate_report, perturbed_reports, posterior_error_reports, run_suite,
    SuiteConfig,
};

use crate::rng::Stream;

/// Numerical zero floor applied before asserting an inequality.
pub const RESIDUAL_FLOOR: f64 = -1e-10;

/// Ratio above which a model is reported as not identifiable.
pub const NON_IDENTIFIABLE_RATIO: f64 = 1e6;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("invalid oracle input: {0}")]
    Invalid(String),
    #[error("observation {0} has zero marginal probability")]
    ZeroMarginal(usize),
    #[error("numerically singular matrix: {0}")]
    Singular(&'static str),
    #[error("all mixture responsibilities underflowed")]
    Underflow,
}

/// A latent-variable model whose EM quantities are computable exactly.
pub trait LatentModel {
    type Prior: Clone;
    type Posterior: Clone;

    fn true_prior(&self) -> Self::Prior;
    /// `P^π(· | y)` for every `y`.
    fn exact_posterior(&self, pi: &Self::Prior) -> Result<Self::Posterior, OracleError>;
    /// `E_{Y ~ P_Y^*} q(· | Y)`.
    fn mixture(&self, q: &Self::Posterior) -> Result<Self::Prior, OracleError>;
    fn kl_prior(&self, p: &Self::Prior, q: &Self::Prior) -> Result<f64, OracleError>;
    /// `KL(P_Y^* ‖ Q♯π)`.
    fn kl_obs(&self, pi: &Self::Prior) -> Result<f64, OracleError>;
    /// `E_{Y ~ P_Y^*} KL(q(·|Y) ‖ P(·|Y))`.
    fn eps_sm(&self, q: &Self::Posterior, exact: &Self::Posterior) -> Result<f64, OracleError>;
    /// `E_{(X,Y) ~ P^*} log P(X|Y)/q(X|Y)`.
    fn eps_tilde(&self, q: &Self::Posterior, exact: &Self::Posterior)
        -> Result<f64, OracleError>;
}

/// Every exactly evaluated quantity along an EM run with `steps` M-steps.
#[derive(Clone, Debug)]
pub struct Trajectory<P> {
    /// `π^(0) .. π^(steps)`.
    pub priors: Vec<P>,
    /// `KL(P_Y^* ‖ P_Y^(k))` for `k = 0..=steps`.
    pub kl_obs: Vec<f64>,
    /// `KL(P_X^* ‖ π^(k))` for `k = 0..=steps`.
    pub kl_latent: Vec<f64>,
    /// `KL(π^(k+1) ‖ π^(k))` for `k < steps`.
    pub kl_step: Vec<f64>,
    pub eps_sm: Vec<f64>,
    pub eps_tilde: Vec<f64>,
}

/// Runs `steps` EM iterations from `pi0`; `perturb(k, exact)` returns the
/// M-step's posterior `q^(k+1)` given the exact `P^(k)`.
pub fn run_trajectory<M: LatentModel>(
    model: &M,
    pi0: M::Prior,
    steps: usize,
    mut perturb: impl FnMut(usize, &M::Posterior) -> Result<M::Posterior, OracleError>,
) -> Result<Trajectory<M::Prior>, OracleError> {
    let truth = model.true_prior();
    let mut t = Trajectory {
        kl_obs: vec![model.kl_obs(&pi0)?],
        kl_latent: vec![model.kl_prior(&truth, &pi0)?],
        priors: vec![pi0],
        kl_step: Vec::with_capacity(steps),
        eps_sm: Vec::with_capacity(steps),
        eps_tilde: Vec::with_capacity(steps),
    };
    for k in 0..steps {
        let pi = t.priors.last().expect("starts non-empty");
        let exact = model.exact_posterior(pi)?;
        let q = perturb(k, &exact)?;
        let next = model.mixture(&q)?;
        t.kl_step.push(model.kl_prior(&next, pi)?);
        t.eps_sm.push(model.eps_sm(&q, &exact)?);
        t.eps_tilde.push(model.eps_tilde(&q, &exact)?);
        t.kl_obs.push(model.kl_obs(&next)?);
        t.kl_latent.push(model.kl_prior(&truth, &next)?);
        t.priors.push(next);
    }
    Ok(t)
}

/// Exact EM (no perturbation).
pub fn exact_trajectory<M: LatentModel>(
    model: &M,
    pi0: M::Prior,
    steps: usize,
) -> Result<Trajectory<M::Prior>, OracleError> {
    run_trajectory(model, pi0, steps, |_, exact| Ok(exact.clone()))
}

/// Structured outcome of one verification.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub check: String,
    pub kl_obs: Vec<f64>,
    pub kl_step: Vec<f64>,
    pub kl_latent: Vec<f64>,
    pub eps_sm: Vec<f64>,
    pub eps_tilde: Vec<f64>,
    /// Right-hand side minus left-hand side of every inequality checked.
    pub residuals: Vec<f64>,
    pub kappa: Option<f64>,
    pub empirical_rate: Option<f64>,
    pub hypotheses_met: bool,
    pub notes: Vec<String>,
}

impl TheoryReport {
    fn from_trajectory<P>(check: &str, t: &Trajectory<P>) -> Self {
        Self {
            check: check.to_string(),
            kl_obs: t.kl_obs.clone(),
            kl_step: t.kl_step.clone(),
            kl_latent: t.kl_latent.clone(),
            eps_sm: t.eps_sm.clone(),
            eps_tilde: t.eps_tilde.clone(),
            hypotheses_met: true,
            ..Self::default()
        }
    }

    pub fn min_residual(&self) -> f64 {
        self.residuals.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// All residuals clear the numerical floor (vacuously true when the
    /// hypotheses are unmet, since nothing is asserted then).
    pub fn holds(&self) -> bool {
        !self.hypotheses_met || self.residuals.iter().all(|r| *r >= RESIDUAL_FLOOR)
    }
}

/// `KL_Y(k+1) ≤ KL_Y(k) - KL(π^(k+1) ‖ π^(k)) + ε_SM^(k)` at every step.
pub fn verify_lemma1<P>(t: &Trajectory<P>) -> TheoryReport {
    let mut r = TheoryReport::from_trajectory("lemma1", t);
    r.residuals = (0..t.kl_step.len())
        .map(|k| t.kl_obs[k] - t.kl_step[k] + t.eps_sm[k] - t.kl_obs[k + 1])
        .collect();
    r
}

/// Average-iterate and last-iterate bounds over `k = 0..=K`, where
/// `K = steps - 1` (the trajectory must contain `π^(K+1)`).
///
/// * `(1/(K+1)) Σ_k KL_Y(k) ≤ KL_X(0)/(K+1) + max_k ε̃^(k)`
/// * `KL_Y(K) ≤ KL_X(0)/(K+1) + max_k ε̃^(k) + Σ_{k<K} ε_SM^(k)`
///
/// Also records the per-step inequality `KL_X(k+1) ≤ KL_X(k) - KL_Y(k) + ε̃^(k)`
/// that the average bound telescopes from.
pub fn verify_prop1<P>(t: &Trajectory<P>) -> TheoryReport {
    let mut r = TheoryReport::from_trajectory("prop1", t);
    let steps = t.kl_step.len();
    if steps == 0 {
        r.notes.push("empty trajectory".into());
        return r;
    }
    let big_k = steps - 1;
    let n = (big_k + 1) as f64;
    let max_tilde = t.eps_tilde.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let avg = t.kl_obs[..=big_k].iter().sum::<f64>() / n;
    let base = t.kl_latent[0] / n + max_tilde;
    r.residuals.push(base - avg);
    let sum_sm: f64 = t.eps_sm[..big_k].iter().sum();
    r.residuals.push(base + sum_sm - t.kl_obs[big_k]);
    for k in 0..steps {
        r.residuals
            .push(t.kl_latent[k] - t.kl_obs[k] + t.eps_tilde[k] - t.kl_latent[k + 1]);
    }
    r
}

/// `KL_X(K) ≤ exp(-K/(κ+1)) KL_X(0) + (κ+1) max_{k<K} ε̃^(k)` for every
/// `K ≤ steps`, under `KL_X(0) ≤ R` and `ε̃^(k) ≤ R/κ`.
pub fn verify_prop2<P>(t: &Trajectory<P>, kappa: f64, radius: f64) -> TheoryReport {
    let mut r = TheoryReport::from_trajectory("prop2", t);
    r.kappa = Some(kappa);
    if t.kl_latent[0] > radius {
        r.hypotheses_met = false;
        r.notes.push(format!(
            "hypotheses unmet: KL_X(0) = {} exceeds R = {radius}",
            t.kl_latent[0]
        ));
    }
    if let Some(e) = t.eps_tilde.iter().find(|e| **e > radius / kappa) {
        r.hypotheses_met = false;
        r.notes.push(format!("hypotheses unmet: eps_tilde = {e} exceeds R/kappa"));
    }
    let mut max_tilde = 0.0f64;
    for big_k in 0..t.kl_latent.len() {
        if big_k > 0 {
            max_tilde = max_tilde.max(t.eps_tilde[big_k - 1]);
        }
        let rhs = (-(big_k as f64) / (kappa + 1.0)).exp() * t.kl_latent[0]
            + (kappa + 1.0) * max_tilde;
        r.residuals.push(rhs - t.kl_latent[big_k]);
    }
    r.empirical_rate = empirical_rate(&t.kl_latent);
    r
}

/// Largest one-step ratio `KL(k+1)/KL(k)` over steps where `KL(k)` is
/// meaningfully above rounding noise.
pub fn empirical_rate(kl: &[f64]) -> Option<f64> {
    kl.windows(2)
        .filter(|w| w[0] > 1e-12)
        .map(|w| w[1] / w[0])
        .reduce(f64::max)
}

/// Prop. 3 (`ε̃ ≤ 2 sqrt((C+1) ε_SM)`, `C = E_Y χ²(P^*(·|Y) ‖ q(·|Y))`) and
/// Lemma 3 per outcome (`E_q (log p/q)_+² ≤ 4 KL(q ‖ p)`), by exact summation.
pub fn verify_prop3_lemma3(model: &DiscreteModel, pi: &[f64], q: &Kernel) -> TheoryReport {
    let exact = model.posterior_kernel(pi);
    let mut r = TheoryReport {
        check: "prop3_lemma3".into(),
        hypotheses_met: true,
        ..TheoryReport::default()
    };
    let eps = model.eps_sm(q, &exact).unwrap_or(f64::INFINITY);
    let tilde = model.eps_tilde(q, &exact).unwrap_or(f64::INFINITY);
    let mut c = 0.0;
    for (y, py) in model.p_y().iter().enumerate() {
        if *py > 0.0 {
            let star = discrete_posterior(model, y).expect("positive marginal");
            c += py * chi_square(&star, &q[y]);
        }
    }
    if !c.is_finite() {
        r.hypotheses_met = false;
        r.notes.push("support violation: chi-square is infinite".into());
    }
    r.eps_sm = vec![eps];
    r.eps_tilde = vec![tilde];
    r.notes.push(format!("chi_square_bound C = {c}"));
    r.residuals.push(2.0 * ((c + 1.0) * eps).sqrt() - tilde);
    for y in 0..model.n() {
        r.residuals.push(lemma3_residual(&exact[y], &q[y]));
    }
    r
}

/// `4 KL(q ‖ p) - E_q (log p/q)_+²`.
pub fn lemma3_residual(p: &[f64], q: &[f64]) -> f64 {
    let lhs: f64 = p
        .iter()
        .zip(q)
        .filter(|(_, b)| **b > 0.0)
        .map(|(a, b)| {
            let l = (a / b).ln().max(0.0);
            b * l * l
        })
        .sum();
    4.0 * kl_discrete(q, p) - lhs
}

/// Which random priors the κ search draws.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Perturbation {
    /// Mean shifts only (Gaussian); for discrete models same as `Full`.
    MeanOnly,
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KappaEstimate {
    /// Largest observed `KL(P_X^* ‖ P) / KL(P_Y^* ‖ Q♯P)`: a lower bound on κ.
    pub kappa: f64,
    pub accepted: usize,
    pub non_identifiable: bool,
}

/// Models that can draw random priors near the truth.
pub trait PerturbablePrior: LatentModel {
    fn random_prior_near(
        &self,
        radius: f64,
        family: Perturbation,
        rng: &mut Stream,
    ) -> Option<Self::Prior>;
}

impl PerturbablePrior for DiscreteModel {
    fn random_prior_near(&self, radius: f64, _: Perturbation, rng: &mut Stream) -> Option<Vec<f64>> {
        discrete::random_prior_near(self.prior(), radius, rng)
    }
}

impl PerturbablePrior for GaussianLinearModel {
    fn random_prior_near(
        &self,
        radius: f64,
        family: Perturbation,
        rng: &mut Stream,
    ) -> Option<Gaussian> {
        use nalgebra::{DMatrix, DVector};
        use rand::Rng;
        let d = self.prior.dim();
        let scale = rng.random::<f64>().powi(2);
        let dir = DVector::from_vec(crate::rng::normal_vec(rng, d));
        let l = gaussian::psd_factor(&self.prior.cov).ok()?;
        let mean = &self.prior.mean + l * dir * scale;
        let cov = match family {
            Perturbation::MeanOnly => self.prior.cov.clone(),
            Perturbation::Full => {
                let g = DMatrix::from_vec(d, d, crate::rng::normal_vec(rng, d * d)) * (0.3 * scale);
                let f = DMatrix::identity(d, d) + g;
                &f * &self.prior.cov * f.transpose()
            }
        };
        let p = Gaussian { mean, cov };
        let kl = kl_gaussian(&self.prior, &p).ok()?;
        (kl > 0.0 && kl <= radius).then_some(p)
    }
}

/// Randomized lower estimate of the identifiability constant κ within
/// KL-radius `radius` of the true prior.
pub fn estimate_kappa<M: PerturbablePrior>(
    model: &M,
    radius: f64,
    trials: usize,
    family: Perturbation,
    rng: &mut Stream,
) -> Result<KappaEstimate, OracleError> {
    if trials == 0 {
        return Err(OracleError::Invalid("kappa estimation needs trials >= 1".into()));
    }
    let truth = model.true_prior();
    let mut best = 0.0f64;
    let mut accepted = 0;
    for _ in 0..trials {
        let Some(p) = model.random_prior_near(radius, family, rng) else {
            continue;
        };
        let kx = model.kl_prior(&truth, &p)?;
        let ky = model.kl_obs(&p)?;
        if kx <= 0.0 {
            continue;
        }
        accepted += 1;
        let ratio = if ky > 0.0 { kx / ky } else { f64::INFINITY };
        best = best.max(ratio);
    }
    Ok(KappaEstimate {
        kappa: best,
        accepted,
        non_identifiable: best > NON_IDENTIFIABLE_RATIO,
    })
}
