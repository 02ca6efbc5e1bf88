use std::collections::BTreeMap;

use super::{NumericsError, ParamStore, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub clip_norm: f64,
}

/// One Adam update with global gradient-norm clipping.
///
/// The global norm across all parameters is clipped to `clip_norm` before the
/// moments are updated. Non-finite gradients abort without touching `params`.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    lr: f64,
    clip_norm: f64,
) -> Result<(), NumericsError> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(NumericsError::InvalidSetting(format!("lr = {lr}")));
    }
    if !(clip_norm > 0.0) {
        return Err(NumericsError::InvalidSetting(format!("clip_norm = {clip_norm}")));
    }
    let mut sq = 0.0;
    for name in params.names() {
        let g = grads
            .get(name)
            .ok_or_else(|| NumericsError::UnknownParam(name.to_string()))?;
        if !g.all_finite() {
            return Err(NumericsError::NonFiniteGradient(name.to_string()));
        }
        let p = params.get(name).expect("name from store");
        if g.shape() != p.shape() {
            return Err(NumericsError::Shape {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        sq += g.sum_of_squares();
    }
    let norm = sq.sqrt();
    let scale = if norm > clip_norm { clip_norm / norm } else { 1.0 };

    let step = params.step() + 1;
    params.set_step(step);
    let bc1 = 1.0 - ADAM_BETA1.powi(step as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(step as i32);
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let g = &grads[&name];
        let p = params.param_mut(&name).expect("name from store");
        let (value, m, v) = (p.value.data_mut(), p.m.data_mut(), p.v.data_mut());
        // borrowck: the three buffers are distinct fields
        for i in 0..g.numel() {
            let gi = g.data()[i] * scale;
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gi;
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gi * gi;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            value[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// `shadow <- decay * shadow + (1 - decay) * params`, per tensor.
pub fn ema_update(
    shadow: &mut ParamStore,
    params: &ParamStore,
    decay: f64,
) -> Result<(), NumericsError> {
    if !(0.0..1.0).contains(&decay) {
        return Err(NumericsError::InvalidSetting(format!("ema decay = {decay}")));
    }
    if shadow.len() != params.len() {
        return Err(NumericsError::InvalidSetting(
            "ema shadow and parameters hold different tensors".into(),
        ));
    }
    for (name, p) in params.iter() {
        let s = shadow
            .get_mut(name)
            .ok_or_else(|| NumericsError::UnknownParam(name.to_string()))?;
        if s.shape() != p.shape() {
            return Err(NumericsError::Shape {
                op: "ema_update",
                lhs: s.shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
        for (a, b) in s.data_mut().iter_mut().zip(p.data()) {
            *a = decay * *a + (1.0 - decay) * b;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: Vec<f64>) -> ParamStore {
        let mut ps = ParamStore::new();
        ps.insert("w", Tensor::row(v));
        ps
    }

    fn grads(v: Vec<f64>) -> BTreeMap<String, Tensor> {
        BTreeMap::from([("w".to_string(), Tensor::row(v))])
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut ps = store(vec![1.5, -2.0]);
        adam_step(&mut ps, &grads(vec![0.0, 0.0]), 0.1, 1.0).unwrap();
        assert_eq!(ps.get("w").unwrap().data(), &[1.5, -2.0]);
        assert_eq!(ps.step(), 1);
    }

    #[test]
    fn first_step_magnitude_is_lr() {
        // m1 = 0.1, v1 = 0.001; mhat = 1, vhat = 1; step = lr / (1 + 1e-8).
        let mut ps = store(vec![0.0]);
        adam_step(&mut ps, &grads(vec![1.0]), 0.1, 10.0).unwrap();
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((ps.get("w").unwrap().data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn clipping_matches_prescaled_gradient() {
        let g = vec![6.0, 8.0]; // norm 10
        let mut a = store(vec![0.3, -0.7]);
        let mut b = a.clone();
        adam_step(&mut a, &grads(g.clone()), 0.01, 1.0).unwrap();
        adam_step(&mut b, &grads(g.iter().map(|x| x * 0.1).collect()), 0.01, 1e6).unwrap();
        for (x, y) in a.get("w").unwrap().data().iter().zip(b.get("w").unwrap().data()) {
            assert!((x - y).abs() < 1e-15);
        }
        let (ma, mb) = (a.param("w").unwrap(), b.param("w").unwrap());
        for (x, y) in ma.m.data().iter().zip(mb.m.data()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn non_finite_gradient_fails_loudly() {
        let mut ps = store(vec![1.0]);
        let before = ps.clone();
        assert!(adam_step(&mut ps, &grads(vec![f64::NAN]), 0.1, 1.0).is_err());
        assert_eq!(ps, before);
    }

    #[test]
    fn invalid_settings() {
        let mut ps = store(vec![1.0]);
        assert!(adam_step(&mut ps, &grads(vec![1.0]), 0.0, 1.0).is_err());
        assert!(adam_step(&mut ps, &grads(vec![1.0]), 0.1, 0.0).is_err());
    }

    #[test]
    fn ema_basics() {
        let mut shadow = store(vec![2.0]);
        let params = store(vec![4.0]);
        ema_update(&mut shadow, &params, 0.5).unwrap();
        assert_eq!(shadow.get("w").unwrap().data(), &[3.0]);
        ema_update(&mut shadow, &params, 0.0).unwrap();
        assert_eq!(shadow.get("w").unwrap().data(), &[4.0]);
        assert!(ema_update(&mut shadow, &params, 1.0).is_err());
    }

    #[test]
    fn ema_converges_geometrically() {
        // shadow_n - p = decay^n (shadow_0 - p)
        let mut shadow = store(vec![10.0]);
        let params = store(vec![1.0]);
        let decay: f64 = 0.9;
        for n in 1..=50 {
            ema_update(&mut shadow, &params, decay).unwrap();
            let expected = 1.0 + decay.powi(n) * 9.0;
            assert!((shadow.get("w").unwrap().data()[0] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn ema_shape_mismatch() {
        let mut shadow = store(vec![1.0, 2.0]);
        let params = store(vec![1.0]);
        assert!(ema_update(&mut shadow, &params, 0.5).is_err());
    }
}
