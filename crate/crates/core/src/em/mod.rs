//! The EM outer loop: reconstruct the clean dataset with the current
//! conditional model (E-step), retrain the model on it (M-step), repeat.

mod init;
mod train;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use init::{
    gaussian_marginal_loglik, init_corrupted_prior, init_gaussian_prior, GaussianInit,
    GAUSSIAN_INIT_ITERATIONS,
};
pub use train::{column_means, column_variances, train_model, LossSummary, TrainConfig};

use crate::channels::{ChannelError, CorruptionChannel, Observation};
use crate::diffusion::{
    sample, Architecture, ConditioningMode, DenoiserModel, Denoiser, DiffusionError,
    GaussianDenoiser, LossWeighting, NoiseSchedule, SamplerConfig,
};
use crate::eval::{gaussian_frechet, sinkhorn_divergence_sampled, EvalError, SinkhornConfig};
use crate::numerics::{NumericsError, Tensor};
use crate::oracle::Gaussian;
use crate::rng::{stream, Stream};

#[derive(Debug, Error)]
pub enum EmError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("invalid EM configuration: {0}")]
    Config(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("posterior covariance is singular")]
    SingularPosterior,
    #[error("non-finite loss in {phase} (epoch {epoch}, batch {batch})")]
    NonFiniteLoss {
        phase: String,
        epoch: usize,
        batch: usize,
    },
    #[error("sampler diverged on item {item} twice: {reason}")]
    Diverged { item: usize, reason: String },
    #[error("{0}")]
    Persist(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InitStrategy {
    /// Train θ^(0) on the observations themselves (needs dim(y) == dim(x)).
    CorruptedPrior,
    /// Closed-form Gaussian EM, then θ^(0) is trained on one posterior
    /// sample per observation.
    GaussianPrior {
        #[serde(default = "default_gaussian_iterations")]
        iterations: usize,
    },
    /// Start from an existing checkpoint.
    WarmStart { checkpoint: String },
}

fn default_gaussian_iterations() -> usize {
    GAUSSIAN_INIT_ITERATIONS
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmConfig {
    /// Number of E/M iterations `K`.
    pub iterations: usize,
    /// Draw a new set of observations for every E-step.
    #[serde(default)]
    pub fresh_samples: bool,
    pub init: InitStrategy,
    pub sampler: SamplerConfig,
    /// Training of θ^(0) on the initial dataset.
    pub init_train: TrainConfig,
    /// Training in each M-step.
    pub train: TrainConfig,
    /// Rows per sampler batch in the E-step.
    #[serde(default = "default_estep_batch")]
    pub estep_batch: usize,
    /// Start the reverse process at the current dataset mean.
    #[serde(default = "default_true")]
    pub init_at_dataset_mean: bool,
}

fn default_estep_batch() -> usize {
    1024
}
fn default_true() -> bool {
    true
}

impl EmConfig {
    pub fn validate(&self) -> Result<(), EmError> {
        if self.iterations == 0 || self.estep_batch == 0 {
            return Err(EmError::Config("iterations and estep_batch must be >= 1".into()));
        }
        self.sampler.validate()?;
        self.init_train.validate()?;
        self.train.validate()
    }
}

/// Learns the posterior sampler in each M-step.
pub trait PosteriorLearner {
    type Model: Denoiser + Clone + Sync;

    /// Fits a model to `data`; `prev` is the current model (absent for θ^(0)).
    /// `k` is the index of the model being produced.
    fn fit(
        &mut self,
        k: usize,
        data: &Tensor,
        prev: Option<&Self::Model>,
    ) -> Result<(Self::Model, LossSummary), EmError>;
}

/// The conditional MLP denoiser trained by score matching.
#[derive(Clone, Debug)]
pub struct NeuralLearner {
    pub arch: Architecture,
    pub channel: CorruptionChannel,
    pub schedule: NoiseSchedule,
    pub weighting: LossWeighting,
    pub init_train: TrainConfig,
    pub train: TrainConfig,
    pub seed: u64,
}

impl NeuralLearner {
    pub fn fresh_model(&self, k: usize) -> Result<DenoiserModel, EmError> {
        Ok(DenoiserModel::init(
            self.arch.clone(),
            ConditioningMode::Conditional,
            Some(self.channel.clone()),
            &mut stream(self.seed, "params/init", &[k as u64]),
        )?)
    }
}

impl PosteriorLearner for NeuralLearner {
    type Model = DenoiserModel;

    fn fit(
        &mut self,
        k: usize,
        data: &Tensor,
        prev: Option<&DenoiserModel>,
    ) -> Result<(DenoiserModel, LossSummary), EmError> {
        let cfg = if prev.is_none() { &self.init_train } else { &self.train };
        m_step(
            data,
            &self.channel,
            prev,
            || self.fresh_model(k),
            &self.schedule,
            &self.weighting,
            cfg,
            self.seed,
            k,
        )
    }
}

/// Exact stand-in for the learned model: fits a Gaussian to the dataset and
/// returns its exact conditional denoiser.
#[derive(Clone, Debug)]
pub struct GaussianOracleLearner {
    pub sigma_y: f64,
}

impl PosteriorLearner for GaussianOracleLearner {
    type Model = GaussianDenoiser;

    fn fit(
        &mut self,
        _k: usize,
        data: &Tensor,
        _prev: Option<&GaussianDenoiser>,
    ) -> Result<(GaussianDenoiser, LossSummary), EmError> {
        let (n, d) = data.dims2("oracle learner")?;
        let rows: Vec<Vec<f64>> = (0..n).map(|i| data.row_slice(i).to_vec()).collect();
        let g = Gaussian::fit(&rows).map_err(|e| EmError::Config(e.to_string()))?;
        let cov = g.cov + DMatrix::identity(d, d) * 1e-12;
        Ok((
            GaussianDenoiser::new(g.mean, cov, Some(self.sigma_y)),
            LossSummary::default(),
        ))
    }
}

/// Trains the next conditional model on `data`, fine-tuning `prev` when the
/// warm flag is set and starting from `fresh()` otherwise.
#[allow(clippy::too_many_arguments)]
pub fn m_step(
    data: &Tensor,
    channel: &CorruptionChannel,
    prev: Option<&DenoiserModel>,
    fresh: impl FnOnce() -> Result<DenoiserModel, EmError>,
    schedule: &NoiseSchedule,
    weighting: &LossWeighting,
    cfg: &TrainConfig,
    seed: u64,
    k: usize,
) -> Result<(DenoiserModel, LossSummary), EmError> {
    let mut model = match prev {
        Some(p) if cfg.warm => p.clone(),
        _ => fresh()?,
    };
    let summary = train_model(
        &mut model,
        data,
        Some(channel),
        schedule,
        weighting,
        cfg,
        seed,
        &format!("mstep/{k}"),
    )?;
    Ok((model, summary))
}

/// Trains an unconditional model (conditioning slots zeroed) on `data`.
#[allow(clippy::too_many_arguments)]
pub fn train_unconditional(
    data: &Tensor,
    arch: Architecture,
    channel: Option<CorruptionChannel>,
    schedule: &NoiseSchedule,
    weighting: &LossWeighting,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(DenoiserModel, LossSummary), EmError> {
    let mut model = DenoiserModel::init(
        arch,
        ConditioningMode::Unconditional,
        channel,
        &mut stream(seed, "params/unconditional", &[]),
    )?;
    let summary = train_model(
        &mut model,
        data,
        None,
        schedule,
        weighting,
        cfg,
        seed,
        "unconditional",
    )?;
    Ok((model, summary))
}

fn item_stream(seed: u64, k: usize, item: usize, attempt: u64) -> Stream {
    stream(seed, "estep", &[k as u64, item as u64, attempt])
}

/// One reconstruction per observation, in observation order.
///
/// Item `i` of iteration `k` uses the stream `(seed, "estep", k, i, 0)`. A batch
/// that diverges is re-run item by item; an item that diverges again is retried
/// once with attempt index 1, and a second failure is an error.
///
/// Batches of `batch` rows are distributed over threads. Batch boundaries do
/// not depend on the thread count, so results are bit-identical on any
/// machine.
#[allow(clippy::too_many_arguments)]
pub fn e_step(
    model: &(dyn Denoiser + Sync),
    obs: &[Observation],
    schedule: &NoiseSchedule,
    sampler: &SamplerConfig,
    init_mean: Option<&[f64]>,
    batch: usize,
    seed: u64,
    k: usize,
) -> Result<Tensor, EmError> {
    if obs.is_empty() {
        return Err(EmError::EmptyDataset);
    }
    let batch = batch.max(1);
    let chunks: Vec<(usize, &[Observation])> = obs
        .chunks(batch)
        .enumerate()
        .map(|(c, ch)| (c * batch, ch))
        .collect();
    let threads = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(chunks.len());
    let run = |start: usize, chunk: &[Observation]| {
        e_step_chunk(model, chunk, start, schedule, sampler, init_mean, seed, k)
    };
    let results: Vec<Result<Vec<f64>, EmError>> = if threads <= 1 {
        chunks.iter().map(|&(s, ch)| run(s, ch)).collect()
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let mut slots: Vec<Option<Result<Vec<f64>, EmError>>> = (0..chunks.len()).map(|_| None).collect();
        let done = std::sync::Mutex::new(&mut slots);
        std::thread::scope(|scope| {
            for _ in 0..threads {
                scope.spawn(|| loop {
                    let c = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                    let Some(&(s, ch)) = chunks.get(c) else { break };
                    let r = run(s, ch);
                    done.lock().expect("no panics while holding the lock")[c] = Some(r);
                });
            }
        });
        slots.into_iter().map(|r| r.expect("every chunk ran")).collect()
    };
    let d = model.dim_x();
    let mut out = Vec::with_capacity(obs.len() * d);
    for r in results {
        out.extend(r?);
    }
    Ok(Tensor::new(vec![obs.len(), d], out)?)
}

#[allow(clippy::too_many_arguments)]
fn e_step_chunk(
    model: &dyn Denoiser,
    chunk: &[Observation],
    start: usize,
    schedule: &NoiseSchedule,
    sampler: &SamplerConfig,
    init_mean: Option<&[f64]>,
    seed: u64,
    k: usize,
) -> Result<Vec<f64>, EmError> {
    let mut streams: Vec<Stream> = (0..chunk.len())
        .map(|j| item_stream(seed, k, start + j, 0))
        .collect();
    match sample(model, schedule, sampler, Some(chunk), init_mean, &mut streams) {
        Ok(x) => return Ok(x.into_data()),
        Err(DiffusionError::NonFiniteState { .. }) => {}
        Err(e) => return Err(e.into()),
    }
    let mut out = Vec::new();
    for (j, o) in chunk.iter().enumerate() {
        let item = start + j;
        let one = std::slice::from_ref(o);
        let mut s = [item_stream(seed, k, item, 0)];
        let x = match sample(model, schedule, sampler, Some(one), init_mean, &mut s) {
            Ok(x) => x,
            Err(DiffusionError::NonFiniteState { step, .. }) => {
                log::warn!("E-step item {item} diverged at step {step}; retrying");
                let mut s = [item_stream(seed, k, item, 1)];
                sample(model, schedule, sampler, Some(one), init_mean, &mut s).map_err(|e| {
                    EmError::Diverged {
                        item,
                        reason: e.to_string(),
                    }
                })?
            }
            Err(e) => return Err(e.into()),
        };
        out.extend_from_slice(x.data());
    }
    Ok(out)
}

/// Where each E-step gets its observations.
pub enum ObservationSource<'a> {
    /// One fixed dataset reused by every iteration.
    Fixed(Vec<Observation>),
    /// A new set per iteration; called with the iteration index.
    Fresh(Box<dyn FnMut(usize) -> Result<Vec<Observation>, EmError> + 'a>),
}

impl ObservationSource<'_> {
    fn get(&mut self, k: usize) -> Result<std::borrow::Cow<'_, [Observation]>, EmError> {
        match self {
            Self::Fixed(v) => Ok(std::borrow::Cow::Borrowed(v.as_slice())),
            Self::Fresh(f) => Ok(std::borrow::Cow::Owned(f(k)?)),
        }
    }
}

/// Evaluation against a clean reference set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    /// Compute metrics every `every` iterations (0 disables).
    #[serde(default = "default_every")]
    pub every: usize,
    #[serde(default)]
    pub sinkhorn: SinkhornConfig,
}

fn default_every() -> usize {
    1
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            every: 1,
            sinkhorn: SinkhornConfig::default(),
        }
    }
}

/// Metrics for record `k`: the loss of training θ^(k) and the quality of the
/// dataset it was trained on, `D^(k-1)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub k: usize,
    pub loss: LossSummary,
    pub dataset_mean: Vec<f64>,
    pub dataset_var: Vec<f64>,
    pub sinkhorn: Option<f64>,
    pub sinkhorn_converged: Option<bool>,
    pub frechet: Option<f64>,
}

/// State after `k` completed iterations.
#[derive(Clone, Debug)]
pub struct EmState<M> {
    pub k: usize,
    pub model: M,
    /// Mean of the latest dataset; starting point of the reverse process.
    pub init_mean: Vec<f64>,
    /// The latest reconstructed dataset, `D^(k-1)`.
    pub dataset: Tensor,
    pub history: Vec<IterationRecord>,
}

fn record(
    k: usize,
    loss: LossSummary,
    data: &Tensor,
    reference: Option<&Tensor>,
    eval: &EvalSettings,
    seed: u64,
) -> Result<IterationRecord, EmError> {
    let mut r = IterationRecord {
        k,
        loss,
        dataset_mean: column_means(data),
        dataset_var: column_variances(data),
        sinkhorn: None,
        sinkhorn_converged: None,
        frechet: None,
    };
    if let Some(reference) = reference {
        if eval.every > 0 && k % eval.every == 0 {
            let mut rng = stream(seed, "eval", &[k as u64]);
            let s = sinkhorn_divergence_sampled(data, reference, &eval.sinkhorn, &mut rng)?;
            r.sinkhorn = Some(s.value);
            r.sinkhorn_converged = Some(s.converged);
            r.frechet = Some(gaussian_frechet(data, reference)?);
        }
    }
    Ok(r)
}

/// Initial dataset `D^(-1)` for the configured strategy.
pub fn initial_dataset(
    init: &InitStrategy,
    obs: &[Observation],
    sigma_y: f64,
    seed: u64,
) -> Result<Tensor, EmError> {
    match init {
        InitStrategy::CorruptedPrior => init_corrupted_prior(obs),
        InitStrategy::GaussianPrior { iterations } => {
            Ok(init_gaussian_prior(obs, sigma_y, *iterations, seed)?.dataset)
        }
        InitStrategy::WarmStart { .. } => Err(EmError::Config(
            "warm-start initialization resumes from a checkpoint instead".into(),
        )),
    }
}

/// Builds `D^(-1)` and trains θ^(0) on it.
#[allow(clippy::too_many_arguments)]
pub fn initialize<L: PosteriorLearner>(
    cfg: &EmConfig,
    learner: &mut L,
    obs: &[Observation],
    sigma_y: f64,
    reference: Option<&Tensor>,
    eval: &EvalSettings,
    seed: u64,
) -> Result<EmState<L::Model>, EmError> {
    cfg.validate()?;
    let data = initial_dataset(&cfg.init, obs, sigma_y, seed)?;
    let (model, loss) = learner.fit(0, &data, None)?;
    let rec = record(0, loss, &data, reference, eval, seed)?;
    Ok(EmState {
        k: 0,
        model,
        init_mean: column_means(&data),
        dataset: data,
        history: vec![rec],
    })
}

/// One E-step with θ^(k) followed by the M-step producing θ^(k+1).
#[allow(clippy::too_many_arguments)]
pub fn em_iteration<L: PosteriorLearner>(
    state: &mut EmState<L::Model>,
    cfg: &EmConfig,
    learner: &mut L,
    obs: &[Observation],
    schedule: &NoiseSchedule,
    reference: Option<&Tensor>,
    eval: &EvalSettings,
    seed: u64,
) -> Result<(), EmError> {
    let k = state.k + 1;
    let mean = cfg.init_at_dataset_mean.then_some(state.init_mean.as_slice());
    let data = e_step(
        &state.model,
        obs,
        schedule,
        &cfg.sampler,
        mean,
        cfg.estep_batch,
        seed,
        k,
    )?;
    let (model, loss) = learner.fit(k, &data, Some(&state.model))?;
    let rec = record(k, loss, &data, reference, eval, seed)?;
    state.k = k;
    state.model = model;
    state.init_mean = column_means(&data);
    state.dataset = data;
    state.history.push(rec);
    Ok(())
}

/// Runs EM from `start` (or from a fresh initialization) up to
/// `cfg.iterations`.
///
/// `on_iteration` sees the state after each completed iteration (including
/// `k = 0` when initializing) and is where checkpoints and metric records
/// are persisted. An error stops the run; everything handed to
/// `on_iteration` before it stays persisted.
#[allow(clippy::too_many_arguments)]
pub fn run_em<L: PosteriorLearner>(
    cfg: &EmConfig,
    learner: &mut L,
    source: &mut ObservationSource<'_>,
    schedule: &NoiseSchedule,
    sigma_y: f64,
    start: Option<EmState<L::Model>>,
    reference: Option<&Tensor>,
    eval: &EvalSettings,
    seed: u64,
    mut on_iteration: impl FnMut(&EmState<L::Model>) -> Result<(), EmError>,
) -> Result<EmState<L::Model>, EmError> {
    cfg.validate()?;
    let mut state = match start {
        Some(s) => s,
        None => {
            let s = initialize(cfg, learner, &source.get(0)?, sigma_y, reference, eval, seed)?;
            on_iteration(&s)?;
            s
        }
    };
    while state.k < cfg.iterations {
        let obs = source.get(state.k + 1)?;
        em_iteration(&mut state, cfg, learner, &obs, schedule, reference, eval, seed)?;
        drop(obs);
        on_iteration(&state)?;
    }
    Ok(state)
}

/// Gaussian fitted to a dataset, for comparing against closed-form EM.
pub fn fitted_gaussian(data: &Tensor) -> Result<(DVector<f64>, DMatrix<f64>), EmError> {
    let n = data.shape()[0];
    let rows: Vec<Vec<f64>> = (0..n).map(|i| data.row_slice(i).to_vec()).collect();
    let g = Gaussian::fit(&rows).map_err(|e| EmError::Config(e.to_string()))?;
    Ok((g.mean, g.cov))
}
