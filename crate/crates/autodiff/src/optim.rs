//! Adam and the reduce-on-plateau learning-rate schedule.

use crate::error::AutodiffError;
use crate::real::Real;
use crate::tensor::ParamSet;
use crate::Result;

/// Moment estimates and hyperparameters for Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of completed steps.
    pub t: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamSet<T>, lr: f64) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(_, p)| vec![T::zero(); p.tensor.len()])
                .collect::<Vec<_>>()
        };
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One Adam update from the gradients stored on `params`.
///
/// Fails without touching anything if any parameter lacks a gradient.
pub fn adam_step<T: Real>(params: &mut ParamSet<T>, state: &mut AdamState<T>) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(AutodiffError::Shape {
            op: "adam_step",
            detail: format!(
                "optimizer tracks {} parameters, model has {}",
                state.m.len(),
                params.len()
            ),
        });
    }
    if let Some((_, p)) = params.iter().find(|(_, p)| p.tensor.grad().is_none()) {
        return Err(AutodiffError::MissingGradient(p.name.clone()));
    }
    state.t += 1;
    let t = state.t as i32;
    let b1 = T::of(state.beta1);
    let b2 = T::of(state.beta2);
    let one = T::one();
    let corr1 = T::of(1.0 - state.beta1.powi(t));
    let corr2 = T::of(1.0 - state.beta2.powi(t));
    let lr = T::of(state.lr);
    let eps = T::of(state.eps);
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let grad = p.tensor.grad().expect("checked above").to_vec();
        for (((w, g), mi), vi) in p
            .tensor
            .data_mut()
            .iter_mut()
            .zip(grad)
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *mi = b1 * *mi + (one - b1) * g;
            *vi = b2 * *vi + (one - b2) * g * g;
            let m_hat = *mi / corr1;
            let v_hat = *vi / corr2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Multiplies the learning rate by `decay_factor` after `patience`
/// consecutive epochs without a strict decrease of the monitored metric.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauSchedule {
    pub current_lr: f64,
    pub floor_lr: f64,
    pub decay_factor: f64,
    pub patience: usize,
    pub best_metric: f64,
    pub epochs_since_improvement: usize,
}

impl PlateauSchedule {
    pub fn new(initial_lr: f64) -> Self {
        PlateauSchedule {
            current_lr: initial_lr,
            floor_lr: 1e-7,
            decay_factor: 0.1,
            patience: 5,
            best_metric: f64::INFINITY,
            epochs_since_improvement: 0,
        }
    }

    /// Sets the reference the first epoch has to beat, typically the
    /// validation metric of the untrained model.
    pub fn with_baseline(mut self, metric: f64) -> Self {
        self.best_metric = metric;
        self
    }

    /// Records one epoch's metric and returns the learning rate for the next.
    pub fn update(&mut self, metric: f64) -> f64 {
        if metric < self.best_metric {
            self.best_metric = metric;
            self.epochs_since_improvement = 0;
        } else {
            self.epochs_since_improvement += 1;
            if self.epochs_since_improvement >= self.patience {
                self.current_lr = (self.current_lr * self.decay_factor).max(self.floor_lr);
                self.epochs_since_improvement = 0;
            }
        }
        self.current_lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn one_param(vals: &[f64], grad: &[f64]) -> ParamSet<f64> {
        let mut ps = ParamSet::new();
        let id = ps
            .insert("w", Tensor::from_vec(vec![vals.len()], vals.to_vec()))
            .unwrap();
        ps.get_mut(id).tensor.accumulate_grad(grad).unwrap();
        ps
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut ps = one_param(&[1.0, -2.0], &[0.0, 0.0]);
        let mut st = AdamState::new(&ps, 1e-3);
        adam_step(&mut ps, &mut st).unwrap();
        assert_eq!(ps.get(ps.id("w").unwrap()).tensor.data(), &[1.0, -2.0]);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        let g = [0.3, -5.0, 1e-3];
        let mut ps = one_param(&[0.0; 3], &g);
        let lr = 1e-3;
        let mut st = AdamState::new(&ps, lr);
        adam_step(&mut ps, &mut st).unwrap();
        let w = ps.get(ps.id("w").unwrap()).tensor.data();
        for (wi, gi) in w.iter().zip(g) {
            let exact = lr * gi.abs() / (gi.abs() + 1e-8);
            assert!((wi.abs() - exact).abs() < 1e-15);
            assert!((wi.abs() - lr).abs() / lr < 1e-4);
            if gi.abs() >= 0.1 {
                // epsilon folded through the moment scaling; indistinguishable
                // from the exact form unless |g| approaches epsilon
                let alt =
                    lr * gi.abs() / (gi.abs() + 1e-8 * (1.0f64 - 0.999).sqrt() / (1.0 - 0.9));
                assert!((wi.abs() - alt).abs() / alt < 1e-6);
            }
            assert!(wi.signum() == -gi.signum());
        }
    }

    #[test]
    fn two_steps_match_hand_rolled() {
        let g = 0.7;
        let lr = 1e-2;
        let mut ps = one_param(&[1.0], &[g]);
        let mut st = AdamState::new(&ps, lr);
        adam_step(&mut ps, &mut st).unwrap();
        adam_step(&mut ps, &mut st).unwrap();

        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut m, mut v, mut w) = (0.0, 0.0, 1.0);
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            w -= lr * mh / (vh.sqrt() + eps);
        }
        let got = ps.get(ps.id("w").unwrap()).tensor.data()[0];
        assert!((got - w).abs() < 1e-7);
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut ps = one_param(&[0.5, 0.25], &[3.0, -1.0]);
        let mut st = AdamState::new(&ps, 0.0);
        adam_step(&mut ps, &mut st).unwrap();
        assert_eq!(ps.get(ps.id("w").unwrap()).tensor.data(), &[0.5, 0.25]);
    }

    #[test]
    fn missing_gradient_is_error() {
        let mut ps = ParamSet::<f32>::new();
        ps.insert("w", Tensor::zeros(vec![2])).unwrap();
        let mut st = AdamState::new(&ps, 1e-3);
        assert_eq!(
            adam_step(&mut ps, &mut st),
            Err(AutodiffError::MissingGradient("w".into()))
        );
        assert_eq!(st.t, 0);
    }

    #[test]
    fn improving_metric_keeps_lr() {
        let mut s = PlateauSchedule::new(1e-4);
        for e in 0..20 {
            assert_eq!(s.update(1.0 / (e as f64 + 1.0)), 1e-4);
        }
    }

    #[test]
    fn flat_metric_decays_after_patience() {
        let mut s = PlateauSchedule::new(1e-4).with_baseline(1.0);
        for _ in 0..4 {
            assert_eq!(s.update(1.0), 1e-4);
        }
        assert!((s.update(1.0) - 1e-5).abs() < 1e-18);
    }

    #[test]
    fn fifteen_flat_epochs_clamp_at_floor() {
        let mut s = PlateauSchedule::new(1e-4).with_baseline(1.0);
        for _ in 0..15 {
            s.update(1.0);
        }
        assert!((s.current_lr - 1e-7).abs() < 1e-20);
        for _ in 0..20 {
            s.update(1.0);
        }
        assert_eq!(s.current_lr, 1e-7);
    }
}
