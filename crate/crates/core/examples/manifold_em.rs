//! EM on a curve in R^5 seen through random 2×5 projections, through the
//! command-line pipeline: generate data, run EM, print the metric log.
//!
//! ```text
//! cargo run --release --example manifold_em [path/to/config.toml]
//! ```
//!
//! Defaults to `configs/smoke.toml`; `configs/manifold-desk.toml` is the
//! full-size run and takes about half an hour on one core.

use std::path::PathBuf;

use diffem::cli::{run, Cli, Command};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let config = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| {
        PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml")
    });
    let out = std::env::temp_dir().join(format!("diffem-manifold-{}", std::process::id()));
    let cli = |command| Cli {
        config: Some(config.clone()),
        seed: None,
        output: Some(out.clone()),
        allow_fingerprint_mismatch: false,
        command,
    };
    println!("{}", run(cli(Command::GenerateData { n: None }))?);
    println!("{}", run(cli(Command::RunEm { resume: false, observations: None }))?);
    let metrics = std::fs::read_to_string(out.join("metrics.jsonl"))?;
    print!("{metrics}");
    std::fs::remove_dir_all(&out)?;
    Ok(())
}
