use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::json;

use super::artifacts::{JsonLog, RunDir};
use super::config::{hex, RunConfig, Scope};
use super::data::{clean_dataset, corrupt_dataset};
use super::format::{
    check_fingerprint, load_observations, load_samples, save_observations, save_samples, Checkpoint,
};
use super::CliError;
use crate::channels::Observation;
use crate::diffusion::{sample, ConditioningMode, DenoiserModel};
use crate::em::{
    column_means, em_iteration, initialize, train_unconditional, EmState, InitStrategy,
    IterationRecord, LossSummary, NeuralLearner,
};
use crate::eval::{gaussian_frechet, sinkhorn_divergence_sampled};
use crate::numerics::Tensor;
use crate::oracle::run_suite;
use crate::rng::{stream, Stream};

pub const METRICS_FORMAT: &str = "diffem-metrics";
pub const TIMINGS_FORMAT: &str = "diffem-timings";
pub const THEORY_FORMAT: &str = "diffem-theory";

/// Everything a subcommand needs: the resolved config and run directory.
#[derive(Clone, Debug)]
pub struct Context {
    pub cfg: RunConfig,
    pub dir: RunDir,
    pub allow_mismatch: bool,
}

impl Context {
    fn learner(&self) -> NeuralLearner {
        NeuralLearner {
            arch: self.cfg.architecture(),
            channel: self.cfg.channel(),
            schedule: self.cfg.schedule,
            weighting: self.cfg.weighting,
            init_train: self.cfg.em.init_train.clone(),
            train: self.cfg.em.train.clone(),
            seed: self.cfg.seed,
        }
    }

    fn observations(&self, path: Option<&Path>) -> Result<(Vec<Observation>, PathBuf), CliError> {
        let path = path.map_or_else(|| self.dir.observations(), Path::to_path_buf);
        let (obs, fp) = load_observations(&path)?;
        check_fingerprint(
            &path.display().to_string(),
            &fp,
            &self.cfg.fingerprint(Scope::Data),
            self.allow_mismatch,
        )?;
        Ok((obs, path))
    }

    /// `clean.bin` beside the observation file, if there is one.
    fn reference(&self, obs_path: &Path) -> Result<Option<Tensor>, CliError> {
        let path = obs_path.with_file_name("clean.bin");
        if !path.exists() {
            return Ok(None);
        }
        let (x, fp) = load_samples(&path)?;
        check_fingerprint(
            &path.display().to_string(),
            &fp,
            &self.cfg.fingerprint(Scope::Data),
            self.allow_mismatch,
        )?;
        Ok(Some(x))
    }

    fn logs(&self, keep: Option<usize>) -> Result<(JsonLog, JsonLog), CliError> {
        let fp = self.cfg.fingerprint(Scope::Model);
        Ok((
            JsonLog::open(&self.dir.metrics(), METRICS_FORMAT, &fp, keep, self.allow_mismatch)?,
            JsonLog::open(&self.dir.timings(), TIMINGS_FORMAT, &fp, keep, self.allow_mismatch)?,
        ))
    }

    /// Writes the dataset, metric record, timing and checkpoint of `state.k`,
    /// in that order, so a checkpoint on disk implies its record is too.
    fn persist(
        &self,
        state: &EmState<DenoiserModel>,
        logs: &(JsonLog, JsonLog),
        seconds: f64,
    ) -> Result<(), CliError> {
        let fp = self.cfg.fingerprint(Scope::Model);
        save_samples(&self.dir.recon(state.k), &state.dataset, &fp)?;
        if let Some(rec) = state.history.last() {
            logs.0.append(rec)?;
        }
        logs.1.append(&json!({ "k": state.k, "wall_seconds": seconds }))?;
        Checkpoint {
            k: state.k,
            fingerprint: fp,
            model: state.model.clone(),
            schedule: self.cfg.schedule,
            weighting: self.cfg.weighting,
            init_mean: state.init_mean.clone(),
        }
        .save(&self.dir.checkpoint(state.k), false)
    }

    fn load_checkpoint(&self, path: &Path) -> Result<Checkpoint, CliError> {
        let ck = Checkpoint::load(path)?;
        check_fingerprint(
            &path.display().to_string(),
            &ck.fingerprint,
            &self.cfg.fingerprint(Scope::Model),
            self.allow_mismatch,
        )?;
        Ok(ck)
    }

    /// Observations for iteration `k`: the fixed set, or `n` fresh draws.
    fn fresh_observations(&self, k: usize, n: usize) -> Result<Vec<Observation>, CliError> {
        let d = &self.cfg.data;
        let clean = clean_dataset(d.task, n, d.side, self.cfg.seed, &format!("fresh/clean/{k}"));
        corrupt_dataset(&clean, &self.cfg.channel(), self.cfg.seed, &format!("fresh/corrupt/{k}"))
    }
}

pub fn cmd_generate_data(ctx: &Context, n: Option<usize>) -> Result<serde_json::Value, CliError> {
    let cfg = &ctx.cfg;
    let n = n.unwrap_or(cfg.data.n);
    if n == 0 {
        return Err(CliError::Usage("--n must be >= 1".into()));
    }
    ctx.dir.create()?;
    let _lock = ctx.dir.lock()?;
    let clean = clean_dataset(cfg.data.task, n, cfg.data.side, cfg.seed, "data/clean");
    let obs = corrupt_dataset(&clean, &cfg.channel(), cfg.seed, "data/corrupt")?;
    let fp = cfg.fingerprint(Scope::Data);
    save_samples(&ctx.dir.clean(), &clean, &fp)?;
    save_observations(&ctx.dir.observations(), &obs, &fp)?;
    Ok(json!({
        "command": "generate-data",
        "n": n,
        "clean": ctx.dir.clean(),
        "observations": ctx.dir.observations(),
        "fingerprint": hex(&fp),
    }))
}

/// Creates checkpoint 0. Assumes the lock is held and no checkpoint exists.
fn initialize_run(ctx: &Context, obs_path: Option<&Path>) -> Result<EmState<DenoiserModel>, CliError> {
    let cfg = &ctx.cfg;
    let logs = ctx.logs(Some(0))?;
    let start = Instant::now();
    let state = match &cfg.em.init {
        InitStrategy::WarmStart { checkpoint } => {
            let ck = Checkpoint::load(Path::new(checkpoint))?;
            let mut model = ck.model;
            if model.arch != cfg.architecture() {
                return Err(CliError::Config(format!(
                    "warm-start checkpoint architecture {:?} does not match the config",
                    model.arch
                )));
            }
            model.mode = ConditioningMode::Conditional;
            model.channel = Some(cfg.channel());
            let dim = model.arch.dim_x;
            EmState {
                k: 0,
                model,
                init_mean: ck.init_mean.clone(),
                dataset: Tensor::row(if ck.init_mean.len() == dim { ck.init_mean } else { vec![0.0; dim] }),
                history: vec![IterationRecord {
                    k: 0,
                    loss: LossSummary::default(),
                    dataset_mean: Vec::new(),
                    dataset_var: Vec::new(),
                    sinkhorn: None,
                    sinkhorn_converged: None,
                    frechet: None,
                }],
            }
        }
        _ => {
            let (obs, path) = ctx.observations(obs_path)?;
            let reference = ctx.reference(&path)?;
            let mut learner = ctx.learner();
            initialize(
                &cfg.em,
                &mut learner,
                &obs,
                cfg.channel().sigma_y,
                reference.as_ref(),
                &cfg.eval,
                cfg.seed,
            )?
        }
    };
    ctx.persist(&state, &logs, start.elapsed().as_secs_f64())?;
    Ok(state)
}

pub fn cmd_init(ctx: &Context, obs_path: Option<&Path>) -> Result<serde_json::Value, CliError> {
    ctx.dir.create()?;
    let _lock = ctx.dir.lock()?;
    if ctx.dir.latest_checkpoint()?.is_some() {
        return Err(CliError::Usage(format!(
            "{} already holds checkpoints",
            ctx.dir.root.display()
        )));
    }
    let state = initialize_run(ctx, obs_path)?;
    Ok(json!({
        "command": "init",
        "checkpoint": ctx.dir.checkpoint(0),
        "record": state.history.last(),
    }))
}

pub fn cmd_run_em(ctx: &Context, resume: bool, obs_path: Option<&Path>) -> Result<serde_json::Value, CliError> {
    let cfg = &ctx.cfg;
    ctx.dir.create()?;
    let _lock = ctx.dir.lock()?;
    let latest = ctx.dir.latest_checkpoint()?;
    let mut state = match (latest, resume) {
        (Some(k), true) => {
            let ck = ctx.load_checkpoint(&ctx.dir.checkpoint(k))?;
            let dataset = match load_samples(&ctx.dir.recon(k)) {
                Ok((x, _)) => x,
                Err(_) => Tensor::row(ck.init_mean.clone()),
            };
            EmState {
                k: ck.k,
                model: ck.model,
                init_mean: ck.init_mean,
                dataset,
                history: Vec::new(),
            }
        }
        (None, true) => {
            return Err(CliError::Usage(format!(
                "--resume: no checkpoint in {}",
                ctx.dir.root.display()
            )))
        }
        (Some(_), false) => {
            return Err(CliError::Usage(format!(
                "{} already holds checkpoints; pass --resume to continue",
                ctx.dir.root.display()
            )))
        }
        (None, false) => initialize_run(ctx, obs_path)?,
    };
    let logs = ctx.logs(Some(state.k))?;

    let needs_obs = state.k < cfg.em.iterations;
    let (fixed, reference) = if needs_obs || cfg.prior.is_some() {
        match &cfg.em.init {
            InitStrategy::WarmStart { .. } if ctx.dir.observations().exists() || obs_path.is_some() => {
                let (o, p) = ctx.observations(obs_path)?;
                let r = ctx.reference(&p)?;
                (o, r)
            }
            InitStrategy::WarmStart { .. } => {
                return Err(CliError::Usage("run-em needs an observation file".into()))
            }
            _ => {
                let (o, p) = ctx.observations(obs_path)?;
                let r = ctx.reference(&p)?;
                (o, r)
            }
        }
    } else {
        (Vec::new(), None)
    };
    let mut learner = ctx.learner();
    while state.k < cfg.em.iterations {
        let start = Instant::now();
        let k = state.k + 1;
        let fresh;
        let obs: &[Observation] = if cfg.em.fresh_samples {
            fresh = ctx.fresh_observations(k, fixed.len())?;
            &fresh
        } else {
            &fixed
        };
        em_iteration(
            &mut state,
            &cfg.em,
            &mut learner,
            obs,
            &cfg.schedule,
            reference.as_ref(),
            &cfg.eval,
            cfg.seed,
        )?;
        ctx.persist(&state, &logs, start.elapsed().as_secs_f64())?;
        log::info!("EM iteration {k} done");
    }

    // a prior left over from a shorter run belongs to older reconstructions
    let prior_current = ctx.dir.prior().exists()
        && Checkpoint::load(&ctx.dir.prior()).is_ok_and(|ck| ck.k == state.k);
    let prior = match &cfg.prior {
        Some(train) if !prior_current => {
            // train on exactly what was persisted, so resumed runs agree
            let (data, _) = load_samples(&ctx.dir.recon(state.k))?;
            let (mut model, loss) = train_unconditional(
                &data,
                cfg.architecture(),
                Some(cfg.channel()),
                &cfg.schedule,
                &cfg.weighting,
                train,
                cfg.seed,
            )?;
            model.mode = ConditioningMode::Unconditional;
            Checkpoint {
                k: state.k,
                fingerprint: cfg.fingerprint(Scope::Model),
                model,
                schedule: cfg.schedule,
                weighting: cfg.weighting,
                init_mean: column_means(&data),
            }
            .save(&ctx.dir.prior(), false)?;
            Some(loss)
        }
        _ => None,
    };
    Ok(json!({
        "command": "run-em",
        "k": state.k,
        "checkpoint": ctx.dir.checkpoint(state.k),
        "records": logs.0.records()?.len(),
        "prior_loss": prior,
    }))
}

pub fn cmd_sample(
    ctx: &Context,
    checkpoint: &Path,
    obs_path: Option<&Path>,
    n: Option<usize>,
) -> Result<serde_json::Value, CliError> {
    let cfg = &ctx.cfg;
    let ck = ctx.load_checkpoint(checkpoint)?;
    let obs = match obs_path {
        Some(p) => {
            let (mut o, _) = ctx.observations(Some(p))?;
            if let Some(n) = n {
                o.truncate(n);
            }
            Some(o)
        }
        None => None,
    };
    if obs.is_none() && ck.model.mode == ConditioningMode::Conditional {
        return Err(CliError::Usage(
            "conditional checkpoint: pass --observations, or sample from an unconditional prior".into(),
        ));
    }
    let count = obs.as_ref().map_or(n.unwrap_or(cfg.data.n), Vec::len);
    if count == 0 {
        return Err(CliError::Usage("nothing to sample".into()));
    }
    ctx.dir.create()?;
    let _lock = ctx.dir.lock()?;
    let batch = cfg.em.estep_batch;
    let mean = cfg.em.init_at_dataset_mean.then_some(ck.init_mean.as_slice());
    let mut out = Vec::with_capacity(count * ck.model.arch.dim_x);
    for start in (0..count).step_by(batch) {
        let end = (start + batch).min(count);
        let mut streams: Vec<Stream> = (start..end)
            .map(|i| stream(cfg.seed, "sample", &[i as u64]))
            .collect();
        let chunk = obs.as_ref().map(|o| &o[start..end]);
        let x = sample(&ck.model, &ck.schedule, &cfg.em.sampler, chunk, mean, &mut streams)?;
        out.extend_from_slice(x.data());
    }
    let x = Tensor::new(vec![count, ck.model.arch.dim_x], out)?;
    save_samples(&ctx.dir.samples(), &x, &ck.fingerprint)?;
    Ok(json!({
        "command": "sample",
        "n": count,
        "conditional": obs.is_some(),
        "samples": ctx.dir.samples(),
    }))
}

pub fn cmd_eval(ctx: &Context, a: &Path, b: &Path) -> Result<serde_json::Value, CliError> {
    let (xa, _) = load_samples(a)?;
    let (xb, _) = load_samples(b)?;
    let mut rng = stream(ctx.cfg.seed, "eval/cli", &[]);
    let s = sinkhorn_divergence_sampled(&xa, &xb, &ctx.cfg.eval.sinkhorn, &mut rng)?;
    let f = gaussian_frechet(&xa, &xb)?;
    Ok(json!({
        "command": "eval",
        "sinkhorn": s.value,
        "sinkhorn_converged": s.converged,
        "frechet": f,
    }))
}

pub fn cmd_verify_theory(ctx: &Context) -> Result<serde_json::Value, CliError> {
    let reports = run_suite(&ctx.cfg.theory, ctx.cfg.seed)?;
    ctx.dir.create()?;
    let _lock = ctx.dir.lock()?;
    let path = ctx.dir.theory();
    if path.exists() {
        std::fs::remove_file(&path).map_err(|e| CliError::io(&path, e))?;
    }
    let log = JsonLog::open(&path, THEORY_FORMAT, &ctx.cfg.fingerprint(Scope::Full), None, false)?;
    for r in &reports {
        log.append(r)?;
    }
    let failed = reports.iter().filter(|r| !r.holds()).count();
    let min = reports
        .iter()
        .filter(|r| r.hypotheses_met)
        .map(|r| r.min_residual())
        .fold(f64::INFINITY, f64::min);
    if failed > 0 {
        return Err(CliError::TheoryFailed {
            failed,
            total: reports.len(),
        });
    }
    Ok(json!({
        "command": "verify-theory",
        "reports": reports.len(),
        "failed": failed,
        "min_residual": min,
        "output": path,
    }))
}
