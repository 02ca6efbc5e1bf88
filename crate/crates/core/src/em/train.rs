use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::EmError;
use crate::channels::{CorruptionChannel, Observation};
use crate::diffusion::{sm_loss_batch, DenoiserModel, LossWeighting, NoiseSchedule};
use crate::numerics::{adam_step, ema_update, Tensor};
use crate::rng::stream;

/// Optimization settings for one training phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_initial: f64,
    pub lr_final: f64,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    /// EMA decay; `None` disables the shadow parameters.
    #[serde(default)]
    pub ema_decay: Option<f64>,
    /// Fine-tune from the previous model instead of reinitializing.
    #[serde(default = "default_warm")]
    pub warm: bool,
}

fn default_clip() -> f64 {
    1.0
}
fn default_warm() -> bool {
    true
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), EmError> {
        let ok = self.epochs >= 1
            && self.batch_size >= 1
            && self.lr_initial > 0.0
            && self.lr_final > 0.0
            && self.clip_norm > 0.0
            && self.ema_decay.is_none_or(|d| (0.0..1.0).contains(&d));
        if ok {
            Ok(())
        } else {
            Err(EmError::Config(format!("invalid training settings {self:?}")))
        }
    }
}

/// Mean loss over the first and last 10% of optimizer steps, and overall.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    pub first: f64,
    pub last: f64,
    pub mean: f64,
    pub steps: usize,
}

impl LossSummary {
    pub fn from_losses(losses: &[f64]) -> Self {
        if losses.is_empty() {
            return Self::default();
        }
        let n = losses.len();
        let tenth = n.div_ceil(10);
        let avg = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        Self {
            first: avg(&losses[..tenth]),
            last: avg(&losses[n - tenth..]),
            mean: avg(losses),
            steps: n,
        }
    }
}

/// Trains `model` in place on `data`.
///
/// In conditional mode every visit of an example draws a fresh observation
/// `Y ~ Q(· | X)` from `channel`. Streams are derived from `(seed, phase, ...)`
/// so results depend only on the seed and the phase tag. Parameters are
/// rounded to `f32` at the end, matching what checkpoints store.
#[allow(clippy::too_many_arguments)]
pub fn train_model(
    model: &mut DenoiserModel,
    data: &Tensor,
    channel: Option<&CorruptionChannel>,
    schedule: &NoiseSchedule,
    weighting: &LossWeighting,
    cfg: &TrainConfig,
    seed: u64,
    phase: &str,
) -> Result<LossSummary, EmError> {
    cfg.validate()?;
    let (n, d) = data.dims2("training data")?;
    if n == 0 {
        return Err(EmError::EmptyDataset);
    }
    if d != model.arch.dim_x {
        return Err(EmError::Config(format!(
            "dataset dimension {d} does not match the model ({})",
            model.arch.dim_x
        )));
    }
    model.params.reset_optimizer();
    if cfg.ema_decay.is_some() && model.ema.is_none() {
        model.ema = Some(model.params.values_only());
    }
    if cfg.ema_decay.is_none() {
        model.ema = None;
    }
    let batches_per_epoch = n.div_ceil(cfg.batch_size);
    let total = cfg.epochs * batches_per_epoch;
    let mut losses = Vec::with_capacity(total);
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut stream(seed, &format!("{phase}/shuffle"), &[epoch as u64]));
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let x0 = data.select_rows(chunk);
            let obs: Option<Vec<Observation>> = match (model.mode, channel) {
                (crate::diffusion::ConditioningMode::Conditional, Some(ch)) => Some(
                    chunk
                        .iter()
                        .map(|&i| {
                            let mut rng =
                                stream(seed, &format!("{phase}/corrupt"), &[epoch as u64, i as u64]);
                            ch.observe(data.row_slice(i), &mut rng)
                        })
                        .collect::<Result<_, _>>()?,
                ),
                _ => None,
            };
            let mut rng = stream(seed, &format!("{phase}/loss"), &[epoch as u64, bi as u64]);
            let (loss, grads) =
                sm_loss_batch(model, schedule, weighting, &x0, obs.as_deref(), &mut rng)?;
            if !loss.is_finite() {
                return Err(EmError::NonFiniteLoss {
                    phase: phase.to_string(),
                    epoch,
                    batch: bi,
                });
            }
            let frac = if total > 1 { step as f64 / (total - 1) as f64 } else { 0.0 };
            let lr = cfg.lr_initial + (cfg.lr_final - cfg.lr_initial) * frac;
            adam_step(&mut model.params, &grads, lr, cfg.clip_norm)?;
            if let (Some(decay), Some(shadow)) = (cfg.ema_decay, model.ema.as_mut()) {
                ema_update(shadow, &model.params, decay)?;
            }
            losses.push(loss);
            step += 1;
        }
    }
    model.params.quantize_f32();
    if let Some(e) = model.ema.as_mut() {
        e.quantize_f32();
    }
    Ok(LossSummary::from_losses(&losses))
}

/// Mean of the rows.
pub fn column_means(x: &Tensor) -> Vec<f64> {
    let (n, d) = (x.shape()[0], x.last_dim());
    let mut m = vec![0.0; d];
    for i in 0..n {
        for (a, b) in m.iter_mut().zip(x.row_slice(i)) {
            *a += b;
        }
    }
    m.iter().map(|v| v / n as f64).collect()
}

/// Per-coordinate population variance of the rows.
pub fn column_variances(x: &Tensor) -> Vec<f64> {
    let n = x.shape()[0];
    let m = column_means(x);
    let mut v = vec![0.0; m.len()];
    for i in 0..n {
        for ((a, b), mu) in v.iter_mut().zip(x.row_slice(i)).zip(&m) {
            *a += (b - mu) * (b - mu);
        }
    }
    v.iter().map(|s| s / n as f64).collect()
}
