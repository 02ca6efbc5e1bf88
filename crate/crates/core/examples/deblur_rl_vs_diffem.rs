//! Deblurring 8×8 rectangle images: Richardson–Lucy against a conditional
//! model trained by EM on 100 blurred images only.
//!
//! ```text
//! cargo run --release --example deblur_rl_vs_diffem
//! ```

use diffem::channels::{ChannelKind, CorruptionChannel, Observation};
use diffem::cli::config::Task;
use diffem::cli::data::{clean_dataset, corrupt_dataset};
use diffem::diffusion::{
    sample, Architecture, LossWeighting, NoiseSchedule, SamplerConfig, SamplerKind,
};
use diffem::em::{
    column_means, run_em, EmConfig, EvalSettings, InitStrategy, NeuralLearner, ObservationSource,
    TrainConfig,
};
use diffem::eval::{mse, richardson_lucy};
use diffem::rng::{stream, Stream};

const SIDE: usize = 8;
const SEED: u64 = 11;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let channel = CorruptionChannel::new(
        ChannelKind::GaussianBlur { sigma: 2.0, height: SIDE, width: SIDE },
        0.01,
    )?;
    let train_clean = clean_dataset(Task::Squares, 100, SIDE, SEED, "deblur/train");
    let obs = corrupt_dataset(&train_clean, &channel, SEED, "deblur/train-obs")?;

    let train = TrainConfig {
        epochs: 4000,
        batch_size: 25,
        lr_initial: 1e-3,
        lr_final: 1e-5,
        clip_norm: 1.0,
        ema_decay: Some(0.999),
        warm: true,
    };
    let sampler = SamplerConfig { kind: SamplerKind::Ancestral, steps: 128, ..SamplerConfig::default() };
    let cfg = EmConfig {
        iterations: 8,
        fresh_samples: false,
        init: InitStrategy::CorruptedPrior,
        sampler: sampler.clone(),
        init_train: train.clone(),
        train: TrainConfig { epochs: 200, ..train.clone() },
        estep_batch: 100,
        init_at_dataset_mean: true,
    };
    let schedule = NoiseSchedule::new(1e-3, 10.0)?;
    let mut learner = NeuralLearner {
        arch: Architecture::for_channel(&channel, vec![256, 256]),
        channel: channel.clone(),
        schedule,
        weighting: LossWeighting::new(3.5, 1.5)?,
        init_train: cfg.init_train.clone(),
        train: cfg.train.clone(),
        seed: SEED,
    };
    let state = run_em(
        &cfg,
        &mut learner,
        &mut ObservationSource::Fixed(obs),
        &schedule,
        channel.sigma_y,
        None,
        None,
        &EvalSettings::default(),
        SEED,
        |s| {
            let mut err = 0.0;
            for i in 0..train_clean.shape()[0] {
                err += mse(s.dataset.row_slice(i), train_clean.row_slice(i))?;
            }
            log::info!("iteration {}: training reconstruction MSE {:.5}", s.k, err / train_clean.shape()[0] as f64);
            Ok(())
        },
    )?;

    // held-out images; the reconstruction is the average of several
    // posterior samples
    let test_clean = clean_dataset(Task::Squares, 50, SIDE, SEED, "deblur/test");
    let test_obs = corrupt_dataset(&test_clean, &channel, SEED, "deblur/test-obs")?;
    let draws = 8;
    let mean = column_means(&state.dataset);
    let (mut rl_err, mut em_err, mut blur_err) = (0.0, 0.0, 0.0);
    for (i, o) in test_obs.iter().enumerate() {
        let truth = test_clean.row_slice(i);
        let rl = richardson_lucy(&o.y, &o.a, 30)?;
        rl_err += mse(&rl.image, truth)?;
        blur_err += mse(&o.y, truth)?;
        let batch: Vec<Observation> = vec![o.clone(); draws];
        let mut streams: Vec<Stream> = (0..draws).map(|d| stream(SEED, "deblur/sample", &[i as u64, d as u64])).collect();
        let x = sample(&state.model, &schedule, &sampler, Some(&batch), Some(&mean), &mut streams)?;
        let avg = column_means(&x);
        em_err += mse(&avg, truth)?;
    }
    let n = test_obs.len() as f64;
    println!("held-out MSE: blurred {:.5}, Richardson-Lucy {:.5}, EM-trained model {:.5}", blur_err / n, rl_err / n, em_err / n);
    Ok(())
}
