//! Synthetic clean-data families and their corrupted observations.

use std::f64::consts::{FRAC_1_SQRT_2, TAU};

use rand::Rng;

use super::config::Task;
use super::CliError;
use crate::channels::{CorruptionChannel, Observation};
use crate::numerics::Tensor;
use crate::rng::{stream, Stream};

pub const MANIFOLD_DIM: usize = 5;

/// The curve `x(u) = (sin u, cos u, sin 2u, cos 2u, sin 3u) / sqrt(2)`.
///
/// This parametrization is our own stand-in for the unspecified curve of the
/// reference experiment; it is versioned together with the dataset format.
pub fn manifold_point(u: f64) -> [f64; MANIFOLD_DIM] {
    [
        u.sin() * FRAC_1_SQRT_2,
        u.cos() * FRAC_1_SQRT_2,
        (2.0 * u).sin() * FRAC_1_SQRT_2,
        (2.0 * u).cos() * FRAC_1_SQRT_2,
        (3.0 * u).sin() * FRAC_1_SQRT_2,
    ]
}

/// A `side × side` image in `[0, 1]`: one or two axis-aligned rectangles of
/// random brightness on a dark background, overlapping by maximum.
pub fn squares_image(side: usize, rng: &mut Stream) -> Vec<f64> {
    let mut img = vec![0.0; side * side];
    let count = rng.random_range(1..=2);
    for _ in 0..count {
        let h = rng.random_range(2.max(side / 4)..=(side / 2 + 1).max(2)).min(side);
        let w = rng.random_range(2.max(side / 4)..=(side / 2 + 1).max(2)).min(side);
        let r0 = rng.random_range(0..=side - h);
        let c0 = rng.random_range(0..=side - w);
        let v: f64 = rng.random_range(0.5..1.0);
        for r in r0..r0 + h {
            for c in c0..c0 + w {
                let p = &mut img[r * side + c];
                *p = f64::max(*p, v);
            }
        }
    }
    img
}

/// Draws `n` clean points of `task`; point `i` uses stream `(seed, tag, i)`.
pub fn clean_dataset(task: Task, n: usize, side: usize, seed: u64, tag: &str) -> Tensor {
    let dim = match task {
        Task::Manifold => MANIFOLD_DIM,
        Task::Squares => side * side,
    };
    let mut data = Vec::with_capacity(n * dim);
    for i in 0..n {
        let mut rng = stream(seed, tag, &[i as u64]);
        match task {
            Task::Manifold => data.extend(manifold_point(rng.random_range(0.0..TAU))),
            Task::Squares => data.extend(squares_image(side, &mut rng)),
        }
    }
    Tensor::new(vec![n, dim], data).expect("n >= 1 and dim >= 1")
}

/// Corrupts every row of `clean`; row `i` uses stream `(seed, tag, i)`.
pub fn corrupt_dataset(
    clean: &Tensor,
    channel: &CorruptionChannel,
    seed: u64,
    tag: &str,
) -> Result<Vec<Observation>, CliError> {
    let n = clean.shape()[0];
    (0..n)
        .map(|i| {
            let mut rng = stream(seed, tag, &[i as u64]);
            Ok(channel.observe(clean.row_slice(i), &mut rng)?)
        })
        .collect()
}

/// Clean points and observations for the manifold experiment at noise
/// variance `sigma_y_sq` with 2 × 5 sphere matrices.
pub fn generate_manifold_dataset(
    n: usize,
    sigma_y_sq: f64,
    seed: u64,
) -> Result<(Tensor, Vec<Observation>), CliError> {
    if n == 0 {
        return Err(CliError::Usage("n must be >= 1".into()));
    }
    let channel = CorruptionChannel::new(
        crate::channels::ChannelKind::Sphere {
            rows: 2,
            dim: MANIFOLD_DIM,
        },
        sigma_y_sq.sqrt(),
    )?;
    let clean = clean_dataset(Task::Manifold, n, 0, seed, "data/clean");
    let obs = corrupt_dataset(&clean, &channel, seed, "data/corrupt")?;
    Ok((clean, obs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curve_equations() {
        for k in 0..100 {
            let x = manifold_point(k as f64 * 0.173);
            assert!((x[0] * x[0] + x[1] * x[1] - 0.5).abs() < 1e-12);
            assert!((x[2] * x[2] + x[3] * x[3] - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn squares_in_range() {
        let mut rng = stream(3, "t", &[]);
        for _ in 0..50 {
            let img = squares_image(8, &mut rng);
            assert!(img.iter().all(|v| (0.0..1.0).contains(v)));
            assert!(img.iter().any(|&v| v >= 0.5));
        }
    }
}
