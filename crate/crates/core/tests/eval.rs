mod common;

use common::{brute_force_assignment, hungarian, rng};
use diffem::channels::MatrixDescriptor;
use diffem::eval::{
    gaussian_frechet, i_divergence, mse, psnr, richardson_lucy, sinkhorn_divergence,
    sinkhorn_divergence_sampled, subsample, SinkhornConfig,
};
use diffem::numerics::Tensor;
use diffem::rng::normal_vec;
use proptest::prelude::*;

fn cfg(lambda: f64) -> SinkhornConfig {
    SinkhornConfig {
        lambda,
        max_iter: 5000,
        tol: 1e-10,
        sample_size: None,
    }
}

/// `n` draws of `N(mean, diag(var))`.
fn gaussian_set(n: usize, mean: &[f64], var: &[f64], tag: &str, i: u64) -> Tensor {
    let mut g = rng(tag, i);
    let d = mean.len();
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        let z = normal_vec(&mut g, d);
        for j in 0..d {
            data.push(mean[j] + var[j].sqrt() * z[j]);
        }
    }
    Tensor::new(vec![n, d], data).unwrap()
}

fn sq_cost(a: &Tensor, b: &Tensor) -> Vec<Vec<f64>> {
    (0..a.shape()[0])
        .map(|i| {
            (0..b.shape()[0])
                .map(|j| {
                    a.row_slice(i)
                        .iter()
                        .zip(b.row_slice(j))
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum()
                })
                .collect()
        })
        .collect()
}

#[test]
fn hungarian_oracle_matches_brute_force() {
    let mut g = rng("hungarian", 0);
    for n in 1..=6 {
        let cost: Vec<Vec<f64>> = (0..n).map(|_| normal_vec(&mut g, n)).collect();
        let assign = hungarian(&cost);
        let total: f64 = assign.iter().enumerate().map(|(i, j)| cost[i][*j]).sum();
        assert!((total - brute_force_assignment(&cost)).abs() < 1e-12);
    }
}

#[test]
fn divergence_of_a_set_with_itself_is_zero() {
    for i in 0..3 {
        let a = gaussian_set(60, &[0.0, 1.0, -1.0], &[1.0, 0.5, 2.0], "self", i);
        let s = sinkhorn_divergence(&a, &a, &cfg(1e-2)).unwrap();
        assert!(s.value.abs() <= 1e-9, "{}", s.value);
    }
}

#[test]
fn point_masses_give_the_squared_distance() {
    let a = Tensor::new(vec![2, 2], vec![0.0, 0.0, 0.0, 0.0]).unwrap();
    let b = Tensor::new(vec![2, 2], vec![0.6, 0.8, 0.6, 0.8]).unwrap();
    let s = sinkhorn_divergence(&a, &b, &cfg(1e-4)).unwrap();
    assert!((s.value - 1.0).abs() < 0.01, "{}", s.value);
}

#[test]
fn sinkhorn_matches_exact_transport_on_subsamples() {
    let a = gaussian_set(2048, &[0.0, 0.0], &[1.0, 1.0], "ot-a", 0);
    let b = gaussian_set(2048, &[1.0, 0.5], &[1.5, 0.7], "ot-b", 0);
    let sa = subsample(&a, 128, &mut rng("ot-sub", 0));
    let sb = subsample(&b, 128, &mut rng("ot-sub", 1));
    let cost = sq_cost(&sa, &sb);
    let assign = hungarian(&cost);
    let exact: f64 = assign.iter().enumerate().map(|(i, j)| cost[i][*j]).sum::<f64>() / 128.0;
    let s = sinkhorn_divergence(&sa, &sb, &cfg(1e-3)).unwrap();
    assert!(((s.value - exact) / exact).abs() < 0.1, "sinkhorn {} vs exact {exact}", s.value);
}

#[test]
fn sampled_divergence_replays_the_draw() {
    let a = gaussian_set(300, &[0.0, 0.0], &[1.0, 1.0], "sampled", 0);
    let mut c = cfg(1e-2);
    c.sample_size = Some(64);
    let s = sinkhorn_divergence_sampled(&a, &a.clone(), &c, &mut rng("sampled", 1)).unwrap();
    assert_eq!(s.value, 0.0);
    let b = gaussian_set(300, &[2.0, 0.0], &[1.0, 1.0], "sampled", 2);
    let s = sinkhorn_divergence_sampled(&a, &b, &c, &mut rng("sampled", 1)).unwrap();
    assert!(s.value > 1.0);
}

#[test]
fn sinkhorn_input_validation() {
    let a = gaussian_set(10, &[0.0, 0.0], &[1.0, 1.0], "val", 0);
    let b = gaussian_set(10, &[0.0, 0.0, 0.0], &[1.0, 1.0, 1.0], "val", 1);
    assert!(sinkhorn_divergence(&a, &b, &cfg(1e-2)).is_err());
    assert!(sinkhorn_divergence(&a, &a, &cfg(0.0)).is_err());
    let one = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
    assert!(sinkhorn_divergence(&one, &a, &cfg(1e-2)).is_err());
}

#[test]
fn frechet_closed_forms() {
    let a = gaussian_set(500, &[0.0, 0.0], &[1.0, 1.0], "fr", 0);
    assert!(gaussian_frechet(&a, &a).unwrap().abs() < 1e-9);

    // shifting one set by exactly 1 leaves the covariance identical
    let n = 1000;
    let x: Vec<f64> = normal_vec(&mut rng("fr", 1), n);
    let p = Tensor::new(vec![n, 1], x.clone()).unwrap();
    let q = Tensor::new(vec![n, 1], x.iter().map(|v| v + 1.0).collect()).unwrap();
    assert!((gaussian_frechet(&p, &q).unwrap() - 1.0).abs() < 1e-9);

    // diag(1,4) vs diag(4,1): (1-2)² + (2-1)² = 2, built from exactly
    // whitened samples so the fitted moments are exact
    let u = [1.0, -1.0, 1.0, -1.0];
    let v = [1.0, 1.0, -1.0, -1.0];
    let scale = (4.0f64 / 3.0).sqrt(); // unbiased covariance of ±1 patterns
    let mk = |sx: f64, sy: f64| {
        let data: Vec<f64> = (0..4).flat_map(|i| [sx * u[i] / scale, sy * v[i] / scale]).collect();
        Tensor::new(vec![4, 2], data).unwrap()
    };
    let f = gaussian_frechet(&mk(1.0, 2.0), &mk(2.0, 1.0)).unwrap();
    assert!((f - 2.0).abs() < 1e-5, "{f}");
}

#[test]
fn frechet_triangle_inequality() {
    let mut g = rng("triangle", 0);
    for i in 0..20 {
        let sets: Vec<Tensor> = (0..3)
            .map(|k| {
                let mean = normal_vec(&mut g, 2);
                let var: Vec<f64> = normal_vec(&mut g, 2).iter().map(|v| 0.2 + v * v).collect();
                gaussian_set(200, &mean, &var, "triangle-set", i * 3 + k)
            })
            .collect();
        let d = |a: &Tensor, b: &Tensor| gaussian_frechet(a, b).unwrap().sqrt();
        assert!(d(&sets[0], &sets[2]) <= d(&sets[0], &sets[1]) + d(&sets[1], &sets[2]) + 1e-9);
    }
}

fn test_image() -> Vec<f64> {
    let mut img = vec![0.1; 64];
    for i in 2..6 {
        for j in 1..4 {
            img[i * 8 + j] = 0.9;
        }
    }
    for k in 0..8 {
        img[k * 8 + 7 - k] = 0.6;
    }
    img
}

#[test]
fn richardson_lucy_beats_the_blurred_input() {
    let truth = test_image();
    let kernel = MatrixDescriptor::Blur { sigma: 2.0, height: 8, width: 8 };
    let blurred = kernel.apply(&truth).unwrap();
    let trace = richardson_lucy(&blurred, &kernel, 30).unwrap();
    let before = mse(&blurred, &truth).unwrap();
    let after = mse(&trace.image, &truth).unwrap();
    assert!(after < before, "RL {after} vs blurred {before}");
    for w in trace.fidelity.windows(2) {
        assert!(w[1] <= w[0] + 1e-12, "fidelity rose {} -> {}", w[0], w[1]);
    }
    // Σ K x = Σ y holds for every iterate, including border-renormalized kernels
    let kx = kernel.apply(&trace.image).unwrap();
    let (s_kx, s_y): (f64, f64) = (kx.iter().sum(), blurred.iter().sum());
    assert!(((s_kx - s_y) / s_y).abs() < 1e-6);
}

#[test]
fn richardson_lucy_preserves_flux_for_normalized_kernels() {
    // circulant 1-d blur: rows and columns both sum to one
    let n = 16;
    let w = [0.25, 0.5, 0.25];
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        for (o, wv) in w.iter().enumerate() {
            k[i * n + (i + n + o - 1) % n] = *wv;
        }
    }
    let kernel = MatrixDescriptor::Dense(Tensor::new(vec![n, n], k).unwrap());
    let y: Vec<f64> = (0..n).map(|i| 0.2 + (i as f64 * 0.9).sin().abs()).collect();
    let trace = richardson_lucy(&y, &kernel, 25).unwrap();
    let (sx, sy): (f64, f64) = (trace.image.iter().sum(), y.iter().sum());
    assert!(((sx - sy) / sy).abs() < 1e-6);
}

#[test]
fn richardson_lucy_identity_kernel_is_a_fixed_point() {
    let y = test_image();
    let id = MatrixDescriptor::Mask((0..64).map(|_| true).collect());
    for it in 1..5 {
        let out = richardson_lucy(&y, &id, it).unwrap();
        for (a, b) in out.image.iter().zip(&y) {
            assert!((a - b).abs() < 1e-14);
        }
    }
    assert!(richardson_lucy(&y, &id, 0).is_err());
}

#[test]
fn richardson_lucy_handles_negative_inputs() {
    let kernel = MatrixDescriptor::Blur { sigma: 1.0, height: 4, width: 4 };
    let y: Vec<f64> = (0..16).map(|i| (i as f64 * 0.7).sin()).collect();
    let out = richardson_lucy(&y, &kernel, 10).unwrap();
    assert!(out.image.iter().all(|v| v.is_finite()));
    let min = y.iter().copied().fold(f64::INFINITY, f64::min);
    assert!(out.image.iter().all(|v| *v >= min - 1e-12));
}

#[test]
fn pointwise_metrics() {
    let a = [0.1, 0.5, -0.3];
    assert_eq!(mse(&a, &a).unwrap(), 0.0);
    let b: Vec<f64> = a.iter().map(|v| v + 0.2).collect();
    assert!((mse(&a, &b).unwrap() - 0.04).abs() < 1e-15);
    let c: Vec<f64> = a.iter().map(|v| v + 0.1).collect();
    assert!((psnr(&a, &c, 1.0).unwrap() - 20.0).abs() < 1e-9);
    assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
    assert!(mse(&a, &[1.0]).is_err());
    assert!(psnr(&a, &c, 0.0).is_err());
    assert_eq!(i_divergence(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn sinkhorn_symmetric_and_nonnegative(seed in any::<u64>(), na in 2usize..30, nb in 2usize..30, shift in -2.0f64..2.0) {
        let a = gaussian_set(na, &[0.0, 0.0], &[1.0, 1.0], "prop-a", seed);
        let b = gaussian_set(nb, &[shift, 0.0], &[0.5, 2.0], "prop-b", seed);
        let c = cfg(5e-2);
        let ab = sinkhorn_divergence(&a, &b, &c).unwrap().value;
        let ba = sinkhorn_divergence(&b, &a, &c).unwrap().value;
        prop_assert!((ab - ba).abs() < 1e-9);
        prop_assert!(ab >= -1e-9);
    }
}
