use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Real};

/// AdamW moment estimates, keyed by tensor name.
#[derive(Debug, Clone)]
pub struct OptState<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    moments: BTreeMap<String, (Matrix<T>, Matrix<T>)>,
}

impl<T: Real> Default for OptState<T> {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }
}

impl<T: Real> OptState<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// First and second moments of `name`, if it has been stepped.
    pub fn moments(&self, name: &str) -> Option<(&Matrix<T>, &Matrix<T>)> {
        self.moments.get(name).map(|(m, v)| (m, v))
    }
}

/// One AdamW step over `params` (the trainable tensors only).
///
/// Decoupled decay `p ← p·(1 − lr·wd)` is applied first, then the bias-corrected Adam
/// update `p ← p − lr·m̂/(√v̂ + ε)`. `grads` must list the same names in the same order.
pub fn adamw_step<T: Real>(
    params: Vec<(String, &mut Matrix<T>)>,
    grads: &[(String, &Matrix<T>)],
    state: &mut OptState<T>,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Config(format!(
            "{} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for ((pn, p), (gn, g)) in params.iter().zip(grads) {
        if pn != gn {
            return Err(Error::Lookup(format!("parameter {pn} paired with gradient {gn}")));
        }
        if p.shape() != g.shape() {
            return Err(Error::shape("adamw_step", p.shape(), g.shape()));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = T::of(1.0 / (1.0 - b1.powi(t)));
    let c2 = T::of(1.0 / (1.0 - b2.powi(t)));
    let decay = T::of(1.0 - lr * weight_decay);
    let (lr_t, eps) = (T::of(lr), T::of(state.eps));
    let (b1_t, b2_t) = (T::of(b1), T::of(b2));
    let (ib1, ib2) = (T::of(1.0 - b1), T::of(1.0 - b2));

    for ((name, p), (_, g)) in params.into_iter().zip(grads) {
        let (m, v) = state
            .moments
            .entry(name)
            .or_insert_with(|| (Matrix::zeros(p.rows(), p.cols()), Matrix::zeros(p.rows(), p.cols())));
        let it = p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
        for ((pv, &gv), (mv, vv)) in it {
            *mv = b1_t * *mv + ib1 * gv;
            *vv = b2_t * *vv + ib2 * gv * gv;
            let m_hat = *mv * c1;
            let v_hat = *vv * c2;
            *pv = *pv * decay - lr_t * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step(p: &mut Matrix<f64>, g: &Matrix<f64>, st: &mut OptState<f64>, lr: f64, wd: f64) {
        adamw_step(vec![("p".into(), p)], &[("p".into(), g)], st, lr, wd).unwrap();
    }

    #[test]
    fn zero_grad_no_decay_is_a_no_op() {
        let mut p = Matrix::row_vector(&[1.0, -2.0, 3.0]);
        let before = p.clone();
        let mut st = OptState::new();
        step(&mut p, &Matrix::zeros(1, 3), &mut st, 0.1, 0.0);
        assert_eq!(p, before);
    }

    #[test]
    fn zero_grad_with_decay_scales() {
        let mut p = Matrix::row_vector(&[1.0, -2.0, 3.0]);
        let mut st = OptState::new();
        step(&mut p, &Matrix::zeros(1, 3), &mut st, 0.1, 0.1);
        assert!(p.max_abs_diff(&Matrix::row_vector(&[0.99, -1.98, 2.97])) < 1e-15);
    }

    #[test]
    fn constant_gradient_steps_approach_lr() {
        // Independent scalar simulation of the same update rule.
        let (lr, g) = (0.01, 0.37);
        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 0.5f64);
        let mut oracle_last = 0.0;
        for t in 1..=100 {
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let delta = lr * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
            x -= delta;
            oracle_last = delta;
        }
        assert!((oracle_last - lr).abs() / lr < 0.05);

        let mut p = Matrix::row_vector(&[0.5]);
        let grad = Matrix::row_vector(&[g]);
        let mut st = OptState::new();
        let mut last = 0.0;
        for _ in 0..100 {
            let before = p[(0, 0)];
            step(&mut p, &grad, &mut st, lr, 0.0);
            last = before - p[(0, 0)];
        }
        assert!((last - lr).abs() / lr < 0.05);
        assert!((p[(0, 0)] - x).abs() < 1e-12);
        assert!((last - oracle_last).abs() < 1e-15);
    }

    #[test]
    fn shape_and_name_mismatch() {
        let mut p = Matrix::<f64>::zeros(2, 2);
        let g = Matrix::zeros(2, 3);
        let mut st = OptState::new();
        let r = adamw_step(vec![("p".into(), &mut p)], &[("p".into(), &g)], &mut st, 0.1, 0.0);
        assert!(matches!(r, Err(Error::Shape { .. })));
        let g = Matrix::zeros(2, 2);
        let r = adamw_step(vec![("p".into(), &mut p)], &[("q".into(), &g)], &mut st, 0.1, 0.0);
        assert!(r.is_err());
    }
}
