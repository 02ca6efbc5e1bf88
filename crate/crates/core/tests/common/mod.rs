//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use diffem::numerics::{ParamStore, Tensor};
use diffem::rng::{normal_vec, stream, Stream};

/// Relative error; coordinates smaller than `1e-3` are compared on the
/// absolute scale `1e-3`, where finite-difference round-off dominates.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Compares analytic parameter gradients with central differences on every
/// scalar of every parameter; returns the worst relative error.
pub fn fd_check_params(
    params: &ParamStore,
    analytic: &std::collections::BTreeMap<String, Tensor>,
    h: f64,
    mut loss: impl FnMut(&ParamStore) -> f64,
) -> f64 {
    let mut worst = 0.0f64;
    for (name, t) in params.iter() {
        let g = &analytic[name];
        for i in 0..t.numel() {
            let mut plus = params.clone();
            plus.get_mut(name).unwrap().data_mut()[i] += h;
            let mut minus = params.clone();
            minus.get_mut(name).unwrap().data_mut()[i] -= h;
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
            worst = worst.max(rel_err(g.data()[i], numeric));
        }
    }
    worst
}

pub fn random_tensor(rng: &mut Stream, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), normal_vec(rng, n)).unwrap()
}

pub fn rng(tag: &str, i: u64) -> Stream {
    stream(0xC0FFEE, tag, &[i])
}

/// Minimum-cost perfect matching on a square cost matrix (Hungarian
/// algorithm, O(n³) potentials form). Returns `assignment[row] = col`.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}

/// Brute-force minimum over all permutations, for checking `hungarian`.
pub fn brute_force_assignment(cost: &[Vec<f64>]) -> f64 {
    fn rec(cost: &[Vec<f64>], row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if row == cost.len() {
            *best = best.min(acc);
            return;
        }
        for j in 0..cost.len() {
            if !used[j] {
                used[j] = true;
                rec(cost, row + 1, used, acc + cost[row][j], best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    rec(cost, 0, &mut vec![false; cost.len()], 0.0, &mut best);
    best
}

/// Dense Gaussian conditioning of `x` on a linear observation, written out
/// with explicit block formulas (independent of the library's Kalman code).
pub fn condition_gaussian(
    mean: &nalgebra::DVector<f64>,
    cov: &nalgebra::DMatrix<f64>,
    h: &nalgebra::DMatrix<f64>,
    noise: &nalgebra::DMatrix<f64>,
    obs: &nalgebra::DVector<f64>,
) -> (nalgebra::DVector<f64>, nalgebra::DMatrix<f64>) {
    let s = h * cov * h.transpose() + noise;
    let s_inv = s.try_inverse().expect("innovation covariance invertible");
    let k = cov * h.transpose() * s_inv;
    let m = mean + &k * (obs - h * mean);
    let c = cov - &k * h * cov;
    (m, c)
}
