//! Sinkhorn divergence and Gaussian Fréchet distance between two point
//! clouds, as the mean of one of them is moved away.
//!
//! ```text
//! cargo run --release --example sinkhorn_eval
//! ```

use diffem::eval::{gaussian_frechet, sinkhorn_divergence, SinkhornConfig};
use diffem::numerics::Tensor;
use diffem::rng::{normal_vec, stream};

fn cloud(n: usize, shift: f64, tag: &str) -> Tensor {
    let mut rng = stream(3, tag, &[]);
    let data = (0..n).flat_map(|_| {
        let z = normal_vec(&mut rng, 2);
        [z[0] + shift, 0.5 * z[1]]
    });
    Tensor::new(vec![n, 2], data.collect()).expect("n > 0")
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = SinkhornConfig { lambda: 1e-2, max_iter: 2000, tol: 1e-8, sample_size: None };
    let a = cloud(400, 0.0, "a");
    println!("{:>6} {:>10} {:>10} {:>10}", "shift", "sinkhorn", "frechet", "converged");
    for shift in [0.0, 0.25, 0.5, 1.0, 2.0] {
        let b = cloud(400, shift, "b");
        let s = sinkhorn_divergence(&a, &b, &cfg)?;
        let f = gaussian_frechet(&a, &b)?;
        println!("{shift:>6.2} {:>10.4} {f:>10.4} {:>10}", s.value, s.converged);
    }
    Ok(())
}
