//! The three reverse-time samplers driven by the exact denoiser of a 2-d
//! Gaussian, compared with exact draws by Fréchet distance.
//!
//! ```text
//! cargo run --release --example gaussian_sampler
//! ```

use diffem::diffusion::{sample, GaussianDenoiser, NoiseSchedule, SamplerConfig, SamplerKind};
use diffem::eval::{gaussian_frechet, mean_cov};
use diffem::rng::{stream, Stream};
use nalgebra::{DMatrix, DVector};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mean = DVector::from_vec(vec![1.0, -2.0]);
    let cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
    let den = GaussianDenoiser::new(mean.clone(), cov.clone(), None);
    let schedule = NoiseSchedule::new(1e-3, 100.0)?;
    let n = 4000;
    let reference = {
        let cfg = SamplerConfig { kind: SamplerKind::Ancestral, steps: 1024, ..SamplerConfig::default() };
        let mut streams: Vec<Stream> = (0..n).map(|i| stream(9, "reference", &[i])).collect();
        sample(&den, &schedule, &cfg, None, Some(mean.as_slice()), &mut streams)?
    };
    println!("target mean {:?}", mean.as_slice());
    for kind in [SamplerKind::Euler, SamplerKind::PredictorCorrector, SamplerKind::Ancestral] {
        for steps in [32, 128, 512] {
            let cfg = SamplerConfig { kind, steps, ..SamplerConfig::default() };
            let mut streams: Vec<Stream> = (0..n).map(|i| stream(9, "draws", &[i])).collect();
            let x = sample(&den, &schedule, &cfg, None, Some(mean.as_slice()), &mut streams)?;
            let (m, c) = mean_cov(&x)?;
            println!(
                "{kind:?} {steps:>4} steps: frechet {:.4}, mean ({:.3}, {:.3}), var ({:.3}, {:.3})",
                gaussian_frechet(&x, &reference)?, m[0], m[1], c[(0, 0)], c[(1, 1)]
            );
        }
    }
    Ok(())
}
