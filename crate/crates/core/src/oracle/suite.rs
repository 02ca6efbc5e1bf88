//! The randomized verification suite behind `verify-theory`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    exact_trajectory, perturb_kernel, run_trajectory, verify_lemma1, verify_prop1, verify_prop2,
    verify_prop3_lemma3, DiscreteModel, Gaussian, GaussianLinearModel, LatentModel, MixTarget,
    OracleError, TheoryReport,
};
use crate::rng::stream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteConfig {
    /// Random discrete models for the exact-EM monotonicity check.
    #[serde(default = "default_models")]
    pub models: usize,
    /// EM iterations per exact run.
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_max_m")]
    pub max_m: usize,
    #[serde(default = "default_max_n")]
    pub max_n: usize,
    /// Randomized runs with injected posterior error.
    #[serde(default = "default_trials")]
    pub trials: usize,
    /// EM iterations per perturbed run.
    #[serde(default = "default_trial_steps")]
    pub trial_steps: usize,
    /// Total-variation bound on each injected posterior error.
    #[serde(default = "default_tv")]
    pub perturbation: f64,
    /// Instances for the single-step posterior-error bounds.
    #[serde(default = "default_instances")]
    pub instances: usize,
    /// Steps of the scalar Gaussian rate check.
    #[serde(default = "default_gaussian_steps")]
    pub gaussian_steps: usize,
}

fn default_models() -> usize {
    20
}
fn default_iterations() -> usize {
    50
}
fn default_max_m() -> usize {
    6
}
fn default_max_n() -> usize {
    8
}
fn default_trials() -> usize {
    200
}
fn default_trial_steps() -> usize {
    20
}
fn default_tv() -> f64 {
    0.1
}
fn default_instances() -> usize {
    100
}
fn default_gaussian_steps() -> usize {
    30
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            models: default_models(),
            iterations: default_iterations(),
            max_m: default_max_m(),
            max_n: default_max_n(),
            trials: default_trials(),
            trial_steps: default_trial_steps(),
            perturbation: default_tv(),
            instances: default_instances(),
            gaussian_steps: default_gaussian_steps(),
        }
    }
}

impl SuiteConfig {
    pub fn validate(&self) -> Result<(), OracleError> {
        if self.max_m < 2 || self.max_n < 2 {
            return Err(OracleError::Invalid("max_m and max_n must be >= 2".into()));
        }
        if !(0.0..=1.0).contains(&self.perturbation) {
            return Err(OracleError::Invalid("perturbation must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

fn random_model(cfg: &SuiteConfig, seed: u64, tag: &str, i: usize) -> DiscreteModel {
    let mut rng = stream(seed, tag, &[i as u64]);
    let m = rng.random_range(2..=cfg.max_m);
    let n = rng.random_range(2..=cfg.max_n);
    DiscreteModel::random(m, n, &mut rng)
}

/// Uniform starting prior.
fn start_prior(model: &DiscreteModel) -> Vec<f64> {
    vec![1.0 / model.m() as f64; model.m()]
}

/// Exact EM on random discrete models: the one-step inequality with zero
/// posterior error, which implies `KL(P_Y^* ‖ P_Y^(k))` never increases.
pub fn exact_em_reports(cfg: &SuiteConfig, seed: u64) -> Result<Vec<TheoryReport>, OracleError> {
    (0..cfg.models)
        .map(|i| {
            let model = random_model(cfg, seed, "theory/exact-model", i);
            let t = exact_trajectory(&model, start_prior(&model), cfg.iterations)?;
            let mut r = verify_lemma1(&t);
            r.check = "exact_em_monotone".into();
            r.residuals
                .extend(t.kl_obs.windows(2).map(|w| w[0] - w[1]));
            Ok(r)
        })
        .collect()
}

/// EM with posterior errors of total variation at most `cfg.perturbation`
/// injected at every step. Returns the one-step and the average/last-iterate
/// reports for each trial.
pub fn perturbed_reports(
    cfg: &SuiteConfig,
    seed: u64,
) -> Result<Vec<(TheoryReport, TheoryReport)>, OracleError> {
    let targets = [MixTarget::Uniform, MixTarget::TruePosterior, MixTarget::Random];
    (0..cfg.trials)
        .map(|i| {
            let model = random_model(cfg, seed, "theory/perturbed-model", i);
            let target = targets[i % targets.len()];
            let mut rng = stream(seed, "theory/perturbation", &[i as u64]);
            let pi0 = crate::oracle::dirichlet(model.m(), 1.0, &mut rng);
            let t = run_trajectory(&model, pi0, cfg.trial_steps, |_, exact| {
                let delta = cfg.perturbation * rng.random::<f64>();
                Ok(perturb_kernel(&model, exact, delta, target, &mut rng))
            })?;
            Ok((verify_lemma1(&t), verify_prop1(&t)))
        })
        .collect()
}

/// Exact EM on `x ~ N(1, 1)`, `y = x + N(0, 1)` from `π^(0) = N(0, 4)`,
/// checked against the linear-rate bound with κ = 2.
pub fn gaussian_rate_report(steps: usize) -> Result<TheoryReport, OracleError> {
    let model = GaussianLinearModel::scalar(1.0, 1.0, 1.0, 1.0)?;
    let pi0 = Gaussian::scalar(0.0, 4.0);
    let t = exact_trajectory(&model, pi0, steps)?;
    let radius = t.kl_latent[0];
    Ok(verify_prop2(&t, 2.0, radius))
}

/// Single-step bounds relating the two posterior-error measures, on random
/// models with random priors and random perturbed posteriors.
pub fn posterior_error_reports(cfg: &SuiteConfig, seed: u64) -> Result<Vec<TheoryReport>, OracleError> {
    let targets = [MixTarget::Uniform, MixTarget::TruePosterior, MixTarget::Random];
    (0..cfg.instances)
        .map(|i| {
            let model = random_model(cfg, seed, "theory/posterior-model", i);
            let mut rng = stream(seed, "theory/posterior", &[i as u64]);
            let pi = crate::oracle::dirichlet(model.m(), 1.0, &mut rng);
            let exact = model.exact_posterior(&pi)?;
            let delta = rng.random::<f64>();
            let q = perturb_kernel(&model, &exact, delta, targets[i % targets.len()], &mut rng);
            Ok(verify_prop3_lemma3(&model, &pi, &q))
        })
        .collect()
}

/// Every check in the suite, in a fixed order.
pub fn run_suite(cfg: &SuiteConfig, seed: u64) -> Result<Vec<TheoryReport>, OracleError> {
    cfg.validate()?;
    let mut out = exact_em_reports(cfg, seed)?;
    for (a, b) in perturbed_reports(cfg, seed)? {
        out.push(a);
        out.push(b);
    }
    out.push(gaussian_rate_report(cfg.gaussian_steps)?);
    out.extend(posterior_error_reports(cfg, seed)?);
    Ok(out)
}
