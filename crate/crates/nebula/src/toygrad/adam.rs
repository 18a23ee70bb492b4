//! Adam optimizer over the flat parameter store, with linear warmup and
//! linear decay, bias correction, and first/second moment state that can
//! be checkpointed and restored exactly.

use super::model::{Grads, ToyModel};
use super::ToygradError;
use crate::Matrix;

/// Optimizer hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr_peak: f64,
    /// Steps of linear warmup from zero to `lr_peak`.
    pub warmup: u64,
    /// Total schedule length; the rate decays linearly to zero here.
    /// Zero means "hold at peak after warmup".
    pub total: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    pub fn new(lr_peak: f64, warmup: u64, total: u64) -> Self {
        Self { lr_peak, warmup, total, beta1: 0.9, beta2: 0.98, eps: 1e-8 }
    }

    /// Learning rate at 1-based step `t`.
    pub fn lr_at(&self, t: u64) -> f64 {
        if self.warmup > 0 && t <= self.warmup {
            return self.lr_peak * t as f64 / self.warmup as f64;
        }
        if self.total > self.warmup {
            let span = (self.total - self.warmup) as f64;
            let progress = (t - self.warmup) as f64;
            return (self.lr_peak * (1.0 - progress / span)).max(0.0);
        }
        self.lr_peak
    }
}

/// Adam state: step counter plus first/second moments for every parameter
/// (frozen slots stay zero and untouched).
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub hyper: AdamHyper,
    pub t: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl OptimizerState {
    pub fn new(model: &ToyModel, hyper: AdamHyper) -> Self {
        let m = model
            .params
            .iter()
            .map(|p| Matrix::zeros(p.value.rows(), p.value.cols()))
            .collect::<Vec<_>>();
        let v = m.clone();
        Self { hyper, t: 0, m, v }
    }

    /// Applies one Adam update. Frozen parameters are never touched; a
    /// non-finite gradient entry aborts before any parameter changes.
    pub fn step(&mut self, model: &mut ToyModel, grads: &Grads) -> Result<(), ToygradError> {
        assert_eq!(grads.len(), model.params.len(), "gradient layout mismatch");
        for (ix, p) in model.params.iter().enumerate() {
            if let Some(g) = grads.get(ix) {
                assert!(
                    !p.frozen,
                    "gradient slot exists for frozen parameter {}",
                    p.name
                );
                if g.as_slice().iter().any(|v| !v.is_finite()) {
                    return Err(ToygradError::NonFiniteGradient { name: p.name.clone() });
                }
            }
        }
        self.t += 1;
        let t = self.t;
        let lr = self.hyper.lr_at(t);
        let (b1, b2, eps) = (self.hyper.beta1, self.hyper.beta2, self.hyper.eps);
        let bc1 = 1.0 - b1.powi(t as i32);
        let bc2 = 1.0 - b2.powi(t as i32);
        for (ix, p) in model.params.iter_mut().enumerate() {
            let Some(g) = grads.get(ix) else { continue };
            let m = self.m[ix].as_mut_slice();
            let v = self.v[ix].as_mut_slice();
            let w = p.value.as_mut_slice();
            for ((w, g), (m, v)) in w
                .iter_mut()
                .zip(g.as_slice())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toygrad::model::{ModelConfig, ModelKind};

    fn model() -> ToyModel {
        ToyModel::new(ModelConfig {
            kind: ModelKind::Encoder,
            vocab: 6,
            dim: 4,
            layers: 1,
            max_len: 4,
            hidden: 5,
            seed: 2,
        })
    }

    #[test]
    fn schedule_warms_up_then_decays_linearly() {
        let h = AdamHyper::new(1e-3, 10, 110);
        assert!((h.lr_at(1) - 1e-4).abs() < 1e-18);
        assert!((h.lr_at(5) - 5e-4).abs() < 1e-18);
        assert!((h.lr_at(10) - 1e-3).abs() < 1e-18);
        // Midpoint of the decay span.
        assert!((h.lr_at(60) - 5e-4).abs() < 1e-12);
        assert!(h.lr_at(110).abs() < 1e-18);
        assert_eq!(h.lr_at(200), 0.0);
        // No decay horizon: hold at peak.
        let hold = AdamHyper::new(1e-3, 4, 0);
        assert_eq!(hold.lr_at(100), 1e-3);
        // No warmup: start at peak.
        let cold = AdamHyper::new(1e-3, 0, 0);
        assert_eq!(cold.lr_at(1), 1e-3);
    }

    #[test]
    fn single_step_matches_hand_computed_update() {
        let mut model = model();
        let ix = model.params.iter().position(|p| !p.frozen).unwrap();
        let before = model.params[ix].value.clone();
        let mut grads = Grads::zeros_for(&model);
        let ones = Matrix::from_fn(before.rows(), before.cols(), |_, _| 2.0);
        grads.accumulate(ix, &ones);
        let mut opt = OptimizerState::new(&model, AdamHyper::new(1e-2, 0, 0));
        opt.step(&mut model, &grads).unwrap();
        // First step with g=2: m=0.2, v=0.08, mhat=g, vhat=g^2,
        // update = lr * g / (|g| + eps) ~= lr.
        let expected = 1e-2 * 2.0 / (2.0 + 1e-8);
        for (a, b) in model.params[ix].value.as_slice().iter().zip(before.as_slice()) {
            assert!((b - a - expected).abs() < 1e-12);
        }
        assert_eq!(opt.t, 1);
    }

    #[test]
    fn frozen_parameters_never_move() {
        let mut model = model();
        let frozen: Vec<(usize, Matrix)> = model
            .params
            .iter()
            .enumerate()
            .filter(|(_, p)| p.frozen)
            .map(|(i, p)| (i, p.value.clone()))
            .collect();
        assert!(!frozen.is_empty());
        let mut opt = OptimizerState::new(&model, AdamHyper::new(1e-2, 0, 0));
        // Several steps with gradients on every trainable tensor.
        for _ in 0..3 {
            let mut grads = Grads::zeros_for(&model);
            for (ix, p) in model.params.clone().iter().enumerate() {
                if !p.frozen {
                    let g = Matrix::from_fn(p.value.rows(), p.value.cols(), |r, c| {
                        0.1 + r as f64 - c as f64
                    });
                    grads.accumulate(ix, &g);
                }
            }
            opt.step(&mut model, &grads).unwrap();
        }
        for (ix, original) in frozen {
            assert_eq!(model.params[ix].value.as_slice(), original.as_slice());
        }
    }

    #[test]
    fn non_finite_gradients_are_rejected_before_any_update() {
        let mut model = model();
        let ix = model.params.iter().position(|p| !p.frozen).unwrap();
        let snapshot: Vec<Vec<f64>> =
            model.params.iter().map(|p| p.value.as_slice().to_vec()).collect();
        let mut grads = Grads::zeros_for(&model);
        let shape = (model.params[ix].value.rows(), model.params[ix].value.cols());
        let bad = Matrix::from_fn(shape.0, shape.1, |r, c| {
            if r == 0 && c == 0 {
                f64::NAN
            } else {
                1.0
            }
        });
        grads.accumulate(ix, &bad);
        let mut opt = OptimizerState::new(&model, AdamHyper::new(1e-2, 0, 0));
        let err = opt.step(&mut model, &grads).unwrap_err();
        assert!(matches!(err, ToygradError::NonFiniteGradient { .. }));
        assert_eq!(opt.t, 0);
        for (p, s) in model.params.iter().zip(&snapshot) {
            assert_eq!(p.value.as_slice(), &s[..]);
        }
    }
}
