//! Exact EM on small discrete and Gaussian models, with every convergence
//! inequality checked numerically.
//!
//! ```text
//! cargo run --release --example theory_oracle
//! ```

use std::collections::BTreeMap;

use diffem::oracle::{run_suite, SuiteConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = SuiteConfig::default();
    let reports = run_suite(&cfg, 7)?;
    println!("{:<20} {:>8} {:>14} {:>10}", "check", "count", "min residual", "holds");
    let mut groups: BTreeMap<&str, Vec<_>> = BTreeMap::new();
    for r in &reports {
        groups.entry(r.check.as_str()).or_default().push(r);
    }
    for (check, group) in groups {
        let min = group.iter().map(|r| r.min_residual()).fold(f64::INFINITY, f64::min);
        let holds = group.iter().all(|r| r.holds());
        println!("{check:<20} {:>8} {min:>14.3e} {holds:>10}", group.len());
    }
    if let Some(rate) = reports.iter().find_map(|r| r.empirical_rate) {
        println!("empirical linear rate on the scalar Gaussian model: {rate:.4}");
    }
    Ok(())
}
