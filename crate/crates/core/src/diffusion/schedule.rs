use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use super::DiffusionError;
use crate::rng::Stream;

/// Log-linear variance-exploding schedule.
///
/// By default `sigma_sq(t) = exp((1-t) ln σ₀ + t ln σ₁)`, so the endpoint
/// variances are σ₀ and σ₁ themselves. With `squared_endpoints` the endpoints
/// are read as standard deviations and the variances become σ₀² and σ₁².
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub sigma0: f64,
    pub sigma1: f64,
    #[serde(default)]
    pub squared_endpoints: bool,
}

impl NoiseSchedule {
    pub fn new(sigma0: f64, sigma1: f64) -> Result<Self, DiffusionError> {
        let s = Self {
            sigma0,
            sigma1,
            squared_endpoints: false,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), DiffusionError> {
        if !(self.sigma0 > 0.0 && self.sigma1 > self.sigma0 && self.sigma1.is_finite()) {
            return Err(DiffusionError::InvalidConfig(format!(
                "schedule needs 0 < sigma0 < sigma1, got {} and {}",
                self.sigma0, self.sigma1
            )));
        }
        Ok(())
    }

    fn log_endpoints(&self) -> (f64, f64) {
        let p = if self.squared_endpoints { 2.0 } else { 1.0 };
        (p * self.sigma0.ln(), p * self.sigma1.ln())
    }

    fn check(t: f64) -> Result<(), DiffusionError> {
        if (0.0..=1.0).contains(&t) {
            Ok(())
        } else {
            Err(DiffusionError::InvalidTime(t))
        }
    }

    pub fn sigma_sq(&self, t: f64) -> Result<f64, DiffusionError> {
        Self::check(t)?;
        Ok(self.sigma_sq_unchecked(t))
    }

    pub(crate) fn sigma_sq_unchecked(&self, t: f64) -> f64 {
        let (l0, l1) = self.log_endpoints();
        ((1.0 - t) * l0 + t * l1).exp()
    }

    /// `d sigma_sq / dt`.
    pub fn g_sq(&self, t: f64) -> Result<f64, DiffusionError> {
        Self::check(t)?;
        Ok(self.g_sq_unchecked(t))
    }

    pub(crate) fn g_sq_unchecked(&self, t: f64) -> f64 {
        let (l0, l1) = self.log_endpoints();
        self.sigma_sq_unchecked(t) * (l1 - l0)
    }
}

/// Beta(α, β) time density; the per-example loss weight is `(σ²+1)/σ²`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeighting {
    pub alpha: f64,
    pub beta: f64,
}

impl LossWeighting {
    pub fn new(alpha: f64, beta: f64) -> Result<Self, DiffusionError> {
        let w = Self { alpha, beta };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<(), DiffusionError> {
        if !(self.alpha > 0.0 && self.beta > 0.0 && self.alpha.is_finite() && self.beta.is_finite())
        {
            return Err(DiffusionError::InvalidConfig(format!(
                "loss weighting needs alpha, beta > 0, got {} and {}",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }

    pub fn sample_t(&self, rng: &mut Stream) -> f64 {
        Beta::new(self.alpha, self.beta)
            .expect("validated shape parameters")
            .sample(rng)
    }

    /// Weight applied to `||d - x0||²` at noise level `sigma_sq`.
    pub fn denoiser_weight(sigma_sq: f64) -> f64 {
        (sigma_sq + 1.0) / sigma_sq
    }

    /// Beta density `f(t; α, β)`.
    pub fn density(&self, t: f64) -> f64 {
        use statrs::distribution::{Beta as BetaPdf, Continuous};
        BetaPdf::new(self.alpha, self.beta)
            .expect("validated shape parameters")
            .pdf(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn beta_density_integrates_to_one() {
        let w = LossWeighting::new(3.5, 1.5).unwrap();
        let n = 200_000;
        let h = 1.0 / n as f64;
        let total: f64 = (0..n).map(|i| w.density((i as f64 + 0.5) * h) * h).sum();
        assert!((total - 1.0).abs() < 1e-6, "{total}");
    }

    #[test]
    fn squared_endpoint_reading() {
        let mut s = NoiseSchedule::new(0.1, 10.0).unwrap();
        s.squared_endpoints = true;
        assert!((s.sigma_sq(0.0).unwrap() - 0.01).abs() < 1e-15);
        assert!((s.sigma_sq(1.0).unwrap() - 100.0).abs() < 1e-12);
        let h = 1e-6;
        let fd = (s.sigma_sq(0.5 + h).unwrap() - s.sigma_sq(0.5 - h).unwrap()) / (2.0 * h);
        assert!((fd / s.g_sq(0.5).unwrap() - 1.0).abs() < 1e-6);
    }
}
