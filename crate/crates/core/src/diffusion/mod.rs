//! Variance-exploding diffusion: schedule, denoiser network, training loss
//! and reverse-time samplers.

mod exact;
mod model;
mod sampler;
mod schedule;

use std::collections::BTreeMap;

use thiserror::Error;

pub use exact::{kalman_update, GaussianDenoiser};
pub use model::{preconditioning, Architecture, ConditioningMode, DenoiserModel};
pub use sampler::{
    sample, sample_ancestral, sample_reverse_euler, sample_reverse_pc, Readout, SamplerConfig,
    SamplerKind,
};
pub use schedule::{LossWeighting, NoiseSchedule};

use crate::channels::{ChannelError, Observation};
use crate::numerics::{NumericsError, Tensor};
use crate::rng::{normal_vec, Stream};

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error("diffusion time {0} outside [0, 1]")]
    InvalidTime(f64),
    #[error("{0}")]
    InvalidConfig(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("batch mismatch: expected {expected}, got {got}")]
    BatchMismatch { expected: usize, got: usize },
    #[error("conditional denoiser called without observations")]
    MissingObservation,
    #[error("sampler state became non-finite at step {step} (row {row})")]
    NonFiniteState { step: usize, row: usize },
    #[error("{0}")]
    Oracle(String),
}

/// Width of the noise-level embedding.
pub const EMBED_WIDTH: usize = 16;

/// Sinusoidal features of `ln σ` at frequencies `10^(-1 + 2k/7)`, `k = 0..8`.
pub fn embed_sigma(sigma_sq: f64) -> [f64; EMBED_WIDTH] {
    let u = 0.5 * sigma_sq.ln();
    let mut out = [0.0; EMBED_WIDTH];
    for k in 0..EMBED_WIDTH / 2 {
        let freq = 10f64.powf(-1.0 + 2.0 * k as f64 / 7.0);
        out[2 * k] = (freq * u).sin();
        out[2 * k + 1] = (freq * u).cos();
    }
    out
}

/// Anything that maps `(x_t, σ², observation)` to an estimate of `E[x0 | x_t, y]`.
pub trait Denoiser {
    fn dim_x(&self) -> usize;

    /// Denoises a `[B, d]` batch sharing one noise level.
    fn denoise(
        &self,
        x_t: &Tensor,
        sigma_sq: f64,
        obs: Option<&[Observation]>,
    ) -> Result<Tensor, DiffusionError>;
}

impl Denoiser for DenoiserModel {
    fn dim_x(&self) -> usize {
        self.arch.dim_x
    }

    fn denoise(
        &self,
        x_t: &Tensor,
        sigma_sq: f64,
        obs: Option<&[Observation]>,
    ) -> Result<Tensor, DiffusionError> {
        let b = x_t.shape()[0];
        self.denoise_with(self.sampling_params(), x_t, &vec![sigma_sq; b], obs)
    }
}

/// `x_t = x0 + σ_t z`.
pub fn perturb(
    x0: &[f64],
    t: f64,
    schedule: &NoiseSchedule,
    rng: &mut Stream,
) -> Result<Vec<f64>, DiffusionError> {
    let sigma = schedule.sigma_sq(t)?.sqrt();
    let z = normal_vec(rng, x0.len());
    Ok(x0.iter().zip(z).map(|(x, z)| x + sigma * z).collect())
}

/// Tweedie: `∇ log p_t(x) = (E[x0 | x_t] - x_t) / σ_t²`.
pub fn score_from_denoiser(
    d_out: &[f64],
    x_t: &[f64],
    t: f64,
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>, DiffusionError> {
    let s = schedule.sigma_sq(t)?;
    Ok(d_out.iter().zip(x_t).map(|(d, x)| (d - x) / s).collect())
}

/// Monte Carlo conditional score-matching loss on one batch, with gradients.
///
/// Each example gets its own `t ~ Beta(α, β)` and noise `z`; the squared error
/// `||d(x_t, t | y) - x0||²` is weighted by `(σ_t² + 1)/σ_t²` and averaged.
pub fn sm_loss_batch(
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
    weighting: &LossWeighting,
    x0: &Tensor,
    obs: Option<&[Observation]>,
    rng: &mut Stream,
) -> Result<(f64, BTreeMap<String, Tensor>), DiffusionError> {
    let (b, d) = x0.dims2("sm_loss_batch")?;
    if b == 0 {
        return Err(DiffusionError::EmptyBatch);
    }
    let mut sigma_sq = Vec::with_capacity(b);
    let mut x_t = x0.clone();
    for i in 0..b {
        let t = weighting.sample_t(rng);
        let s = schedule.sigma_sq(t)?;
        sigma_sq.push(s);
        let sd = s.sqrt();
        for (v, z) in x_t.row_slice_mut(i).iter_mut().zip(normal_vec(rng, d)) {
            *v += sd * z;
        }
    }
    model.loss_and_grad(x0, &x_t, &sigma_sq, obs)
}

/// One-sample integrands of the two loss forms at `(x0, t, z)`.
///
/// Score form: `λ_t ||s_θ + z||²` where `s_θ = σ_t (d - x_t)/σ_t²` is the
/// noise-scaled score and `λ_t = (σ_t² + 1) f(t; α, β)`. Denoiser form:
/// `(λ_t/σ_t²) ||d - x0||²`. Returns `(score_form, denoiser_form)`.
pub fn loss_integrands(
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    weighting: &LossWeighting,
    x0: &[f64],
    t: f64,
    z: &[f64],
    obs: Option<&Observation>,
) -> Result<(f64, f64), DiffusionError> {
    let s = schedule.sigma_sq(t)?;
    let sigma = s.sqrt();
    let x_t: Vec<f64> = x0.iter().zip(z).map(|(x, z)| x + sigma * z).collect();
    let obs_slice = obs.map(std::slice::from_ref);
    let d = denoiser.denoise(&Tensor::row(x_t.clone()), s, obs_slice)?;
    let lambda = (s + 1.0) * weighting.density(t);
    let score_sq: f64 = d
        .data()
        .iter()
        .zip(&x_t)
        .zip(z)
        .map(|((d, x), z)| {
            let r = sigma * (d - x) / s + z;
            r * r
        })
        .sum();
    let den_sq: f64 = d.data().iter().zip(x0).map(|(d, x)| (d - x) * (d - x)).sum();
    Ok((lambda * score_sq, lambda / s * den_sq))
}
