use rand::Rng;
use rand_distr::{Distribution, Gamma};

use super::{LatentModel, OracleError};
use crate::rng::Stream;

const SUM_TOL: f64 = 1e-12;

/// Finite latent space of size `m`, finite observation space of size `n`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteModel {
    prior: Vec<f64>,
    /// Row `x` is `Q(· | x)`.
    channel: Vec<Vec<f64>>,
    p_y: Vec<f64>,
}

/// A conditional `q(x | y)` stored as one row per outcome `y`.
pub type Kernel = Vec<Vec<f64>>;

fn check_distribution(p: &[f64], what: &str) -> Result<(), OracleError> {
    if p.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(OracleError::Invalid(format!("{what} has negative or non-finite entries")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > SUM_TOL {
        return Err(OracleError::Invalid(format!("{what} sums to {s}")));
    }
    Ok(())
}

impl DiscreteModel {
    pub fn new(prior: Vec<f64>, channel: Vec<Vec<f64>>) -> Result<Self, OracleError> {
        check_distribution(&prior, "prior")?;
        if channel.len() != prior.len() || channel.is_empty() {
            return Err(OracleError::Invalid("channel needs one row per latent state".into()));
        }
        let n = channel[0].len();
        for (x, row) in channel.iter().enumerate() {
            if row.len() != n {
                return Err(OracleError::Invalid("channel rows differ in length".into()));
            }
            check_distribution(row, &format!("channel row {x}"))?;
        }
        let p_y = push_forward_raw(&prior, &channel);
        Ok(Self { prior, channel, p_y })
    }

    /// Random model with a Dirichlet(1) prior and Dirichlet(1) channel rows.
    pub fn random(m: usize, n: usize, rng: &mut Stream) -> Self {
        let prior = dirichlet(m, 1.0, rng);
        let channel = (0..m).map(|_| dirichlet(n, 1.0, rng)).collect();
        Self::new(prior, channel).expect("Dirichlet draws are valid distributions")
    }

    pub fn prior(&self) -> &[f64] {
        &self.prior
    }

    pub fn channel(&self) -> &[Vec<f64>] {
        &self.channel
    }

    pub fn p_y(&self) -> &[f64] {
        &self.p_y
    }

    pub fn m(&self) -> usize {
        self.prior.len()
    }

    pub fn n(&self) -> usize {
        self.p_y.len()
    }

    /// Observation marginal `Q♯π`.
    pub fn push_forward(&self, pi: &[f64]) -> Vec<f64> {
        push_forward_raw(pi, &self.channel)
    }

    /// `p(x | y) ∝ π(x) Q(y | x)`.
    pub fn posterior(&self, pi: &[f64], y: usize) -> Result<Vec<f64>, OracleError> {
        if y >= self.n() {
            return Err(OracleError::Invalid(format!("outcome {y} out of range")));
        }
        let joint: Vec<f64> = pi.iter().zip(&self.channel).map(|(p, q)| p * q[y]).collect();
        let z: f64 = joint.iter().sum();
        if z <= 0.0 {
            return Err(OracleError::ZeroMarginal(y));
        }
        Ok(joint.into_iter().map(|v| v / z).collect())
    }

    /// Posterior kernel for every `y`; outcomes with zero marginal get the prior.
    pub fn posterior_kernel(&self, pi: &[f64]) -> Kernel {
        (0..self.n())
            .map(|y| self.posterior(pi, y).unwrap_or_else(|_| pi.to_vec()))
            .collect()
    }

    /// `Σ_y P_Y^*(y) q(· | y)`.
    pub fn mix(&self, q: &Kernel) -> Vec<f64> {
        let mut out = vec![0.0; self.m()];
        for (py, row) in self.p_y.iter().zip(q) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += py * v;
            }
        }
        out
    }
}

fn push_forward_raw(pi: &[f64], channel: &[Vec<f64>]) -> Vec<f64> {
    let n = channel[0].len();
    let mut out = vec![0.0; n];
    for (p, row) in pi.iter().zip(channel) {
        for (o, q) in out.iter_mut().zip(row) {
            *o += p * q;
        }
    }
    out
}

/// Posterior of the true prior at outcome `y`.
pub fn discrete_posterior(model: &DiscreteModel, y: usize) -> Result<Vec<f64>, OracleError> {
    model.posterior(model.prior(), y)
}

/// One exact EM step: the mixture of exact posteriors under `P_Y^*`.
pub fn discrete_em_step(pi: &[f64], model: &DiscreteModel) -> Vec<f64> {
    model.mix(&model.posterior_kernel(pi))
}

/// `Σ p log(p/q)`; `+∞` (with a warning) when `p` is not dominated by `q`.
pub fn kl_discrete(p: &[f64], q: &[f64]) -> f64 {
    let mut s = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        if a > 0.0 {
            if b <= 0.0 {
                log::warn!("kl_discrete: support violation, returning +inf");
                return f64::INFINITY;
            }
            s += a * (a / b).ln();
        }
    }
    s
}

/// `Σ p²/q - 1`.
pub fn chi_square(p: &[f64], q: &[f64]) -> f64 {
    let mut s = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        if a > 0.0 {
            if b <= 0.0 {
                return f64::INFINITY;
            }
            s += a * a / b;
        }
    }
    s - 1.0
}

pub fn dirichlet(k: usize, alpha: f64, rng: &mut Stream) -> Vec<f64> {
    let g = Gamma::new(alpha, 1.0).expect("positive shape");
    loop {
        let v: Vec<f64> = (0..k).map(|_| g.sample(rng)).collect();
        let s: f64 = v.iter().sum();
        if s > 0.0 {
            return v.into_iter().map(|x| x / s).collect();
        }
    }
}

/// What a perturbed posterior is mixed toward.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MixTarget {
    Uniform,
    /// The true-prior posterior `P^*(· | y)`; gives `q` an edge on
    /// `P^*`-typical pairs, which can make `ε̃` negative.
    TruePosterior,
    /// A random distribution per outcome.
    Random,
}

/// `(1 - δ) q(·|y) + δ target(·|y)`; the total-variation change is at most `δ`.
pub fn perturb_kernel(
    model: &DiscreteModel,
    exact: &Kernel,
    delta: f64,
    target: MixTarget,
    rng: &mut Stream,
) -> Kernel {
    let m = model.m();
    exact
        .iter()
        .enumerate()
        .map(|(y, row)| {
            let t = match target {
                MixTarget::Uniform => vec![1.0 / m as f64; m],
                MixTarget::TruePosterior => {
                    discrete_posterior(model, y).unwrap_or_else(|_| row.clone())
                }
                MixTarget::Random => dirichlet(m, 1.0, rng),
            };
            row.iter().zip(t).map(|(a, b)| (1.0 - delta) * a + delta * b).collect()
        })
        .collect()
}

/// Random prior at KL-distance at most `radius` from the truth, or `None`.
pub(crate) fn random_prior_near(
    truth: &[f64],
    radius: f64,
    rng: &mut Stream,
) -> Option<Vec<f64>> {
    let m = truth.len();
    let p = if rng.random::<bool>() {
        let s: f64 = rng.random::<f64>().powi(2);
        let d = dirichlet(m, 1.0, rng);
        truth.iter().zip(d).map(|(a, b)| (1.0 - s) * a + s * b).collect::<Vec<_>>()
    } else {
        // move a little mass between two states
        let i = rng.random_range(0..m);
        let j = rng.random_range(0..m);
        let mut p = truth.to_vec();
        let amount = truth[i] * rng.random::<f64>().powi(3);
        p[i] -= amount;
        p[j] += amount;
        p
    };
    let kl = kl_discrete(truth, &p);
    (kl > 0.0 && kl <= radius).then_some(p)
}

impl LatentModel for DiscreteModel {
    type Prior = Vec<f64>;
    type Posterior = Kernel;

    fn true_prior(&self) -> Vec<f64> {
        self.prior.clone()
    }

    fn exact_posterior(&self, pi: &Vec<f64>) -> Result<Kernel, OracleError> {
        Ok(self.posterior_kernel(pi))
    }

    fn mixture(&self, q: &Kernel) -> Result<Vec<f64>, OracleError> {
        Ok(self.mix(q))
    }

    fn kl_prior(&self, p: &Vec<f64>, q: &Vec<f64>) -> Result<f64, OracleError> {
        Ok(kl_discrete(p, q))
    }

    fn kl_obs(&self, pi: &Vec<f64>) -> Result<f64, OracleError> {
        Ok(kl_discrete(&self.p_y, &self.push_forward(pi)))
    }

    fn eps_sm(&self, q: &Kernel, exact: &Kernel) -> Result<f64, OracleError> {
        Ok(self
            .p_y
            .iter()
            .zip(q.iter().zip(exact))
            .filter(|(py, _)| **py > 0.0)
            .map(|(py, (a, b))| py * kl_discrete(a, b))
            .sum())
    }

    fn eps_tilde(&self, q: &Kernel, exact: &Kernel) -> Result<f64, OracleError> {
        let mut s = 0.0;
        for x in 0..self.m() {
            for y in 0..self.n() {
                let w = self.prior[x] * self.channel[x][y];
                if w > 0.0 {
                    if q[y][x] <= 0.0 {
                        return Ok(f64::INFINITY);
                    }
                    s += w * (exact[y][x] / q[y][x]).ln();
                }
            }
        }
        Ok(s)
    }
}
