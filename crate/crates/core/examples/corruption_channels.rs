//! The four corruption channels applied to one 8×8 image, and the
//! Richardson–Lucy restoration of the blurred observation.
//!
//! ```text
//! cargo run --release --example corruption_channels
//! ```

use diffem::channels::{ChannelKind, CorruptionChannel};
use diffem::cli::data::squares_image;
use diffem::eval::{mse, richardson_lucy};
use diffem::rng::stream;

fn show(title: &str, values: &[f64], width: usize) {
    println!("{title}");
    for row in values.chunks(width) {
        let line: Vec<String> = row.iter().map(|v| format!("{v:5.2}")).collect();
        println!("  {}", line.join(" "));
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let side = 8;
    let mut rng = stream(1, "channels-example", &[]);
    let x = squares_image(side, &mut rng);
    show("clean", &x, side);

    let channels = [
        ("random mask, rho = 0.5", ChannelKind::RandomMask { rho: 0.5, dim: side * side }),
        ("gaussian blur, sigma = 2", ChannelKind::GaussianBlur { sigma: 2.0, height: side, width: side }),
        ("2 random sphere rows", ChannelKind::Sphere { rows: 2, dim: side * side }),
    ];
    for (name, kind) in channels {
        let ch = CorruptionChannel::new(kind, 0.01)?;
        let obs = ch.observe(&x, &mut rng)?;
        println!("{name}: y has {} entries, A^T y has norm {:.3}", obs.y.len(),
            obs.a.apply_transpose(&obs.y)?.iter().map(|v| v * v).sum::<f64>().sqrt());
        if matches!(ch.kind, ChannelKind::GaussianBlur { .. }) {
            show("blurred", &obs.y, side);
            let rl = richardson_lucy(&obs.y, &obs.a, 30)?;
            show("richardson-lucy, 30 iterations", &rl.image, side);
            println!("MSE blurred {:.4}, restored {:.4}", mse(&obs.y, &x)?, mse(&rl.image, &x)?);
        }
    }
    Ok(())
}
