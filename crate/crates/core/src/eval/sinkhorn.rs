use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::numerics::Tensor;
use crate::rng::Stream;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SinkhornConfig {
    /// Entropic regularization λ; the Gibbs kernel temperature is `2λ`.
    pub lambda: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    /// Points drawn per side before solving (`None` uses every point).
    #[serde(default = "default_sample_size")]
    pub sample_size: Option<usize>,
}

fn default_max_iter() -> usize {
    500
}
fn default_tol() -> f64 {
    1e-9
}
fn default_sample_size() -> Option<usize> {
    Some(4096)
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-3,
            max_iter: default_max_iter(),
            tol: default_tol(),
            sample_size: default_sample_size(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SinkhornResult {
    pub value: f64,
    /// All three transport problems met the tolerance.
    pub converged: bool,
}

/// Random subset of `k` rows (all rows when `k >= n`), in increasing order.
pub fn subsample(x: &Tensor, k: usize, rng: &mut Stream) -> Tensor {
    let n = x.shape()[0];
    if k >= n {
        return x.clone();
    }
    let mut idx = sample(rng, n, k).into_vec();
    idx.sort_unstable();
    x.select_rows(&idx)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `-ε log Σ_j w_j exp((g_j - c_j)/ε)` with uniform `w = 1/m`.
fn soft_min(cost_row: &[f64], g: &[f64], eps: f64, log_w: f64) -> f64 {
    let mut top = f64::NEG_INFINITY;
    for (c, gj) in cost_row.iter().zip(g) {
        top = top.max((gj - c) / eps);
    }
    let s: f64 = cost_row
        .iter()
        .zip(g)
        .map(|(c, gj)| ((gj - c) / eps - top).exp())
        .sum();
    -eps * (log_w + top + s.ln())
}

/// Entropic transport value `T_λ` between uniform empirical measures.
///
/// Log-domain, symmetric (averaged, simultaneous) dual updates with
/// ε-annealing from the cost diameter down to `ε = 2λ`. The result is exactly
/// symmetric in its arguments.
fn transport(a: &Tensor, b: &Tensor, cfg: &SinkhornConfig) -> (f64, bool) {
    let (n, m) = (a.shape()[0], b.shape()[0]);
    let mut cost = vec![0.0; n * m];
    let mut cost_t = vec![0.0; n * m];
    let mut diameter = 0.0f64;
    for i in 0..n {
        for j in 0..m {
            let c = sq_dist(a.row_slice(i), b.row_slice(j));
            cost[i * m + j] = c;
            cost_t[j * n + i] = c;
            diameter = diameter.max(c);
        }
    }
    let target = 2.0 * cfg.lambda;
    let (log_wa, log_wb) = (-(n as f64).ln(), -(m as f64).ln());
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let mut eps = diameter.max(target);
    let mut converged = false;
    let mut iters = 0;
    loop {
        let f_new: Vec<f64> = (0..n)
            .map(|i| soft_min(&cost[i * m..(i + 1) * m], &g, eps, log_wb))
            .collect();
        let g_new: Vec<f64> = (0..m)
            .map(|j| soft_min(&cost_t[j * n..(j + 1) * n], &f, eps, log_wa))
            .collect();
        let mut change = 0.0f64;
        for (x, y) in f.iter_mut().zip(&f_new) {
            let v = 0.5 * (*x + y);
            change = change.max((v - *x).abs());
            *x = v;
        }
        for (x, y) in g.iter_mut().zip(&g_new) {
            let v = 0.5 * (*x + y);
            change = change.max((v - *x).abs());
            *x = v;
        }
        if eps > target {
            eps = (eps * 0.5).max(target);
            continue;
        }
        iters += 1;
        if change < cfg.tol {
            converged = true;
            break;
        }
        if iters >= cfg.max_iter {
            break;
        }
    }
    // final exact half-steps leave the potentials on the dual-feasible surface
    let f_fin: Vec<f64> = (0..n)
        .map(|i| soft_min(&cost[i * m..(i + 1) * m], &g, eps, log_wb))
        .collect();
    let g_fin: Vec<f64> = (0..m)
        .map(|j| soft_min(&cost_t[j * n..(j + 1) * n], &f, eps, log_wa))
        .collect();
    let value = 0.5 * (mean(&f) + mean(&f_fin)) + 0.5 * (mean(&g) + mean(&g_fin));
    (value, converged)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Debiased Sinkhorn divergence `S_λ(a,b) = T(a,b) - ½(T(a,a) + T(b,b))`.
pub fn sinkhorn_divergence(
    a: &Tensor,
    b: &Tensor,
    cfg: &SinkhornConfig,
) -> Result<SinkhornResult, EvalError> {
    check_pair(a, b)?;
    if !(cfg.lambda > 0.0) {
        return Err(EvalError::Invalid(format!("sinkhorn lambda = {}", cfg.lambda)));
    }
    let (ab, c1) = transport(a, b, cfg);
    let (aa, c2) = transport(a, a, cfg);
    let (bb, c3) = transport(b, b, cfg);
    Ok(SinkhornResult {
        value: ab - 0.5 * (aa + bb),
        converged: c1 && c2 && c3,
    })
}

/// Subsamples both sides to `cfg.sample_size`, then computes the divergence.
///
/// Both sides replay the same index draw, so two copies of one set give
/// exactly zero.
pub fn sinkhorn_divergence_sampled(
    a: &Tensor,
    b: &Tensor,
    cfg: &SinkhornConfig,
    rng: &mut Stream,
) -> Result<SinkhornResult, EvalError> {
    check_pair(a, b)?;
    match cfg.sample_size {
        Some(k) => {
            let mut replay = rng.clone();
            let sa = subsample(a, k, rng);
            sinkhorn_divergence(&sa, &subsample(b, k, &mut replay), cfg)
        }
        None => sinkhorn_divergence(a, b, cfg),
    }
}

pub(crate) fn check_pair(a: &Tensor, b: &Tensor) -> Result<(), EvalError> {
    let (na, da) = a.dims2("sample set")?;
    let (nb, db) = b.dims2("sample set")?;
    if da != db {
        return Err(EvalError::Dimension { lhs: da, rhs: db });
    }
    if na < 2 || nb < 2 {
        return Err(EvalError::Invalid("sample sets need at least 2 points".into()));
    }
    Ok(())
}
