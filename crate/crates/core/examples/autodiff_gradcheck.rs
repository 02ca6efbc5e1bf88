//! Reverse-mode gradients of a small two-layer network checked against
//! central finite differences.
//!
//! ```text
//! cargo run --release --example autodiff_gradcheck
//! ```

use diffem::numerics::{ParamStore, Tape, Tensor};
use diffem::rng::{normal_vec, stream};

fn loss(ps: &ParamStore, x: &Tensor) -> (f64, Option<diffem::numerics::Gradients>) {
    let mut t = Tape::new(ps);
    let input = t.input(x.clone()).unwrap();
    let w1 = t.param("w1").unwrap();
    let w2 = t.param("w2").unwrap();
    let h = t.matmul(input, w1).unwrap();
    let h = t.layer_norm(h).unwrap();
    let h = t.silu(h).unwrap();
    let out = t.matmul(h, w2).unwrap();
    let l = t.sum_squares(out).unwrap();
    let value = t.value(l).data()[0];
    (value, Some(t.backward(l).unwrap()))
}

fn main() {
    let mut rng = stream(4, "gradcheck", &[]);
    let mut tensor = |shape: &[usize]| {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), normal_vec(&mut rng, n)).unwrap()
    };
    let x = tensor(&[5, 3]);
    let mut ps = ParamStore::new();
    ps.insert("w1", tensor(&[3, 6]));
    ps.insert("w2", tensor(&[6, 2]));

    let (_, grads) = loss(&ps, &x);
    let grads = grads.unwrap().into_params();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for name in ["w1", "w2"] {
        let size = ps.get(name).unwrap().data().len();
        for i in 0..size {
            let mut plus = ps.clone();
            plus.get_mut(name).unwrap().data_mut()[i] += h;
            let mut minus = ps.clone();
            minus.get_mut(name).unwrap().data_mut()[i] -= h;
            let fd = (loss(&plus, &x).0 - loss(&minus, &x).0) / (2.0 * h);
            let ad = grads[name].data()[i];
            let rel = (fd - ad).abs() / fd.abs().max(ad.abs()).max(1e-8);
            worst = worst.max(rel);
        }
        println!("{name}: {size} entries checked");
    }
    println!("worst relative error {worst:.2e}");
}
