use serde::{Deserialize, Serialize};

use super::{Denoiser, DiffusionError, NoiseSchedule};
use crate::channels::Observation;
use crate::numerics::Tensor;
use crate::rng::{normal_vec, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerKind {
    Euler,
    PredictorCorrector,
    Ancestral,
}

/// What the Euler and predictor-corrector samplers return.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Readout {
    /// Stop at `t = 1/steps` and return the denoiser output there.
    Denoiser,
    /// Integrate all the way to `t = 0` and return the state.
    RawState,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub steps: usize,
    #[serde(default = "default_corrector_steps")]
    pub corrector_steps: usize,
    #[serde(default = "default_snr")]
    pub snr: f64,
    #[serde(default = "default_readout")]
    pub readout: Readout,
}

fn default_corrector_steps() -> usize {
    1
}
fn default_snr() -> f64 {
    0.1
}
fn default_readout() -> Readout {
    Readout::Denoiser
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            kind: SamplerKind::PredictorCorrector,
            steps: 256,
            corrector_steps: default_corrector_steps(),
            snr: default_snr(),
            readout: default_readout(),
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), DiffusionError> {
        if self.steps == 0 {
            return Err(DiffusionError::InvalidConfig("sampler steps must be >= 1".into()));
        }
        if self.kind == SamplerKind::PredictorCorrector && !(self.snr > 0.0 && self.snr.is_finite())
        {
            return Err(DiffusionError::InvalidConfig(format!("corrector snr = {}", self.snr)));
        }
        Ok(())
    }
}

/// Runs the configured sampler; row `i` uses `streams[i]` and `obs[i]`.
pub fn sample(
    den: &dyn Denoiser,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    obs: Option<&[Observation]>,
    init_mean: Option<&[f64]>,
    streams: &mut [Stream],
) -> Result<Tensor, DiffusionError> {
    cfg.validate()?;
    match cfg.kind {
        SamplerKind::Euler => {
            sample_reverse_euler(den, schedule, cfg.steps, cfg.readout, obs, init_mean, streams)
        }
        SamplerKind::PredictorCorrector => sample_reverse_pc(
            den,
            schedule,
            cfg.steps,
            cfg.corrector_steps,
            cfg.snr,
            cfg.readout,
            obs,
            init_mean,
            streams,
        ),
        SamplerKind::Ancestral => {
            sample_ancestral(den, schedule, cfg.steps, obs, init_mean, streams)
        }
    }
}

/// `X_1 ~ N(m̂, σ²(1) I)`, one row per stream.
fn initial_state(
    dim: usize,
    schedule: &NoiseSchedule,
    init_mean: Option<&[f64]>,
    streams: &mut [Stream],
) -> Result<Tensor, DiffusionError> {
    if streams.is_empty() {
        return Err(DiffusionError::EmptyBatch);
    }
    if let Some(m) = init_mean {
        if m.len() != dim {
            return Err(DiffusionError::BatchMismatch {
                expected: dim,
                got: m.len(),
            });
        }
    }
    let sd = schedule.sigma_sq_unchecked(1.0).sqrt();
    let mut data = Vec::with_capacity(streams.len() * dim);
    for rng in streams.iter_mut() {
        let z = normal_vec(rng, dim);
        for (j, z) in z.into_iter().enumerate() {
            data.push(init_mean.map_or(0.0, |m| m[j]) + sd * z);
        }
    }
    Ok(Tensor::new(vec![streams.len(), dim], data)?)
}

fn check_obs(obs: Option<&[Observation]>, b: usize) -> Result<(), DiffusionError> {
    match obs {
        Some(o) if o.len() != b => Err(DiffusionError::BatchMismatch {
            expected: b,
            got: o.len(),
        }),
        _ => Ok(()),
    }
}

fn check_finite(x: &Tensor, step: usize) -> Result<(), DiffusionError> {
    let d = x.last_dim();
    match x.data().iter().position(|v| !v.is_finite()) {
        Some(p) => Err(DiffusionError::NonFiniteState { step, row: p / d }),
        None => Ok(()),
    }
}

/// One Euler–Maruyama step of the reverse SDE from grid index `i` to `i-1`.
fn euler_step(
    den: &dyn Denoiser,
    schedule: &NoiseSchedule,
    x: &mut Tensor,
    i: usize,
    steps: usize,
    obs: Option<&[Observation]>,
    streams: &mut [Stream],
) -> Result<(), DiffusionError> {
    let t = i as f64 / steps as f64;
    let dt = 1.0 / steps as f64;
    let s2 = schedule.sigma_sq_unchecked(t);
    let g2 = schedule.g_sq_unchecked(t);
    let d = den.denoise(x, s2, obs)?;
    let noise = (g2 * dt).sqrt();
    for (r, rng) in streams.iter_mut().enumerate() {
        let z = normal_vec(rng, x.last_dim());
        let dr = d.row_slice(r);
        for ((v, dv), z) in x.row_slice_mut(r).iter_mut().zip(dr).zip(z) {
            let score = (dv - *v) / s2;
            *v += g2 * score * dt + noise * z;
        }
    }
    check_finite(x, i)
}

/// Langevin corrections at grid time `t`.
///
/// `η` uses the mean score and noise norms over the batch. A per-row ratio
/// `||z|| / ||s||` is heavy-tailed in low dimension and occasionally throws a
/// sample far off.
#[allow(clippy::too_many_arguments)]
fn correct(
    den: &dyn Denoiser,
    schedule: &NoiseSchedule,
    x: &mut Tensor,
    t: f64,
    step: usize,
    n: usize,
    snr: f64,
    obs: Option<&[Observation]>,
    streams: &mut [Stream],
) -> Result<(), DiffusionError> {
    let s2 = schedule.sigma_sq_unchecked(t);
    let dim = x.last_dim();
    for _ in 0..n {
        let d = den.denoise(x, s2, obs)?;
        let mut score = d.data().to_vec();
        for (s, v) in score.iter_mut().zip(x.data()) {
            *s = (*s - v) / s2;
        }
        let noise: Vec<Vec<f64>> = streams.iter_mut().map(|r| normal_vec(r, dim)).collect();
        let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
        let (mut s_sum, mut z_sum, mut active) = (0.0, 0.0, 0usize);
        for (r, z) in noise.iter().enumerate() {
            let sn = norm(&score[r * dim..(r + 1) * dim]);
            if sn > 0.0 {
                s_sum += sn;
                z_sum += norm(z);
                active += 1;
            }
        }
        if active == 0 {
            continue;
        }
        let eta = 2.0 * (snr * z_sum / s_sum).powi(2);
        let amp = (2.0 * eta).sqrt();
        for (r, z) in noise.iter().enumerate() {
            let sr = &score[r * dim..(r + 1) * dim];
            if sr.iter().all(|v| *v == 0.0) {
                continue;
            }
            for ((v, s), z) in x.row_slice_mut(r).iter_mut().zip(sr).zip(z) {
                *v += eta * s + amp * z;
            }
        }
        check_finite(x, step)?;
    }
    Ok(())
}

fn finish(
    den: &dyn Denoiser,
    schedule: &NoiseSchedule,
    x: Tensor,
    steps: usize,
    readout: Readout,
    obs: Option<&[Observation]>,
) -> Result<Tensor, DiffusionError> {
    match readout {
        Readout::RawState => Ok(x),
        Readout::Denoiser => {
            let t = 1.0 / steps as f64;
            let out = den.denoise(&x, schedule.sigma_sq_unchecked(t), obs)?;
            check_finite(&out, 1)?;
            Ok(out)
        }
    }
}

fn last_index(readout: Readout) -> usize {
    match readout {
        Readout::Denoiser => 2,
        Readout::RawState => 1,
    }
}

/// Euler–Maruyama integration of the reverse SDE on a uniform grid in `t`.
pub fn sample_reverse_euler(
    den: &dyn Denoiser,
    schedule: &NoiseSchedule,
    steps: usize,
    readout: Readout,
    obs: Option<&[Observation]>,
    init_mean: Option<&[f64]>,
    streams: &mut [Stream],
) -> Result<Tensor, DiffusionError> {
    sample_reverse_pc(den, schedule, steps, 0, 1.0, readout, obs, init_mean, streams)
}

/// Euler–Maruyama predictor followed by Langevin corrector steps.
///
/// The step size is `η = 2 (snr ||z|| / ||s||)²` with norms averaged over
/// the batch; rows with a zero score skip the correction.
#[allow(clippy::too_many_arguments)]
pub fn sample_reverse_pc(
    den: &dyn Denoiser,
    schedule: &NoiseSchedule,
    steps: usize,
    corrector_steps: usize,
    snr: f64,
    readout: Readout,
    obs: Option<&[Observation]>,
    init_mean: Option<&[f64]>,
    streams: &mut [Stream],
) -> Result<Tensor, DiffusionError> {
    if steps == 0 {
        return Err(DiffusionError::InvalidConfig("sampler steps must be >= 1".into()));
    }
    if corrector_steps > 0 && !(snr > 0.0) {
        return Err(DiffusionError::InvalidConfig(format!("corrector snr = {snr}")));
    }
    check_obs(obs, streams.len())?;
    let mut x = initial_state(den.dim_x(), schedule, init_mean, streams)?;
    for i in (last_index(readout)..=steps).rev() {
        euler_step(den, schedule, &mut x, i, steps, obs, streams)?;
        if corrector_steps > 0 {
            let t = (i - 1) as f64 / steps as f64;
            correct(den, schedule, &mut x, t, i, corrector_steps, snr, obs, streams)?;
        }
    }
    finish(den, schedule, x, steps, readout, obs)
}

/// Ancestral sampling through the Gaussian transitions of the VE process.
///
/// `x_{t'} | x_t ~ N(r x_t + (1 - r) d, σ²(t') (1 - r))` with `r = σ²(t')/σ²(t)`;
/// returns the state at `t = 0`.
pub fn sample_ancestral(
    den: &dyn Denoiser,
    schedule: &NoiseSchedule,
    steps: usize,
    obs: Option<&[Observation]>,
    init_mean: Option<&[f64]>,
    streams: &mut [Stream],
) -> Result<Tensor, DiffusionError> {
    if steps == 0 {
        return Err(DiffusionError::InvalidConfig("sampler steps must be >= 1".into()));
    }
    check_obs(obs, streams.len())?;
    let mut x = initial_state(den.dim_x(), schedule, init_mean, streams)?;
    for i in (1..=steps).rev() {
        let s_hi = schedule.sigma_sq_unchecked(i as f64 / steps as f64);
        let s_lo = schedule.sigma_sq_unchecked((i - 1) as f64 / steps as f64);
        let r = s_lo / s_hi;
        let sd = (s_lo * (1.0 - r)).max(0.0).sqrt();
        let d = den.denoise(&x, s_hi, obs)?;
        for (row, rng) in streams.iter_mut().enumerate() {
            let z = normal_vec(rng, x.last_dim());
            let dr = d.row_slice(row);
            for ((v, dv), z) in x.row_slice_mut(row).iter_mut().zip(dr).zip(z) {
                *v = r * *v + (1.0 - r) * dv + sd * z;
            }
        }
        check_finite(&x, i)?;
    }
    Ok(x)
}
