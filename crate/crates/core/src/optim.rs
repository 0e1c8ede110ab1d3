//! Gradient-descent and decoupled AdamW parameter updates.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::tensor::Tensor2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    #[serde(rename = "adamw")]
    AdamW,
}

/// AdamW moment state: beta = (0.9, 0.999), eps = 1e-8, decoupled decay.
#[derive(Debug, Clone)]
struct AdamWState<S: Scalar> {
    m: Vec<Tensor2<S>>,
    v: Vec<Tensor2<S>>,
    t: u32,
}

#[derive(Debug, Clone)]
pub struct Optimizer<S: Scalar> {
    kind: OptimizerKind,
    weight_decay: f64,
    adam: Option<AdamWState<S>>,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl<S: Scalar> Optimizer<S> {
    pub fn new(kind: OptimizerKind, weight_decay: f64) -> Self {
        Self {
            kind,
            weight_decay,
            adam: None,
        }
    }

    /// Applies one update. The slice order must be stable across steps so
    /// AdamW's moments stay attached to the same parameters.
    pub fn step(&mut self, params: &mut [(&mut Tensor2<S>, &Tensor2<S>)], lr: f64) {
        match self.kind {
            OptimizerKind::Sgd => {
                let lr_s = S::from_f64_exact(lr);
                for (p, g) in params.iter_mut() {
                    debug_assert_eq!(p.shape(), g.shape());
                    for (pv, gv) in p.data_mut().iter_mut().zip(g.data().iter()) {
                        *pv -= lr_s * *gv;
                    }
                }
            }
            OptimizerKind::AdamW => self.adamw_step(params, lr),
        }
    }

    fn adamw_step(&mut self, params: &mut [(&mut Tensor2<S>, &Tensor2<S>)], lr: f64) {
        let state = self.adam.get_or_insert_with(|| AdamWState {
            m: params
                .iter()
                .map(|(p, _)| Tensor2::zeros(p.rows(), p.cols()))
                .collect(),
            v: params
                .iter()
                .map(|(p, _)| Tensor2::zeros(p.rows(), p.cols()))
                .collect(),
            t: 0,
        });
        assert_eq!(
            state.m.len(),
            params.len(),
            "optimizer state does not match parameter count"
        );
        state.t += 1;
        let b1 = S::from_f64_exact(ADAM_BETA1);
        let b2 = S::from_f64_exact(ADAM_BETA2);
        let eps = S::from_f64_exact(ADAM_EPS);
        let lr_s = S::from_f64_exact(lr);
        let wd = S::from_f64_exact(self.weight_decay);
        let bc1 = S::from_f64_exact(1.0 - ADAM_BETA1.powi(state.t as i32));
        let bc2 = S::from_f64_exact(1.0 - ADAM_BETA2.powi(state.t as i32));
        let one = S::one();

        for (idx, (p, g)) in params.iter_mut().enumerate() {
            debug_assert_eq!(p.shape(), g.shape());
            let m = &mut state.m[idx];
            let v = &mut state.v[idx];
            for (((pv, gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data().iter())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *mv = b1 * *mv + (one - b1) * *gv;
                *vv = b2 * *vv + (one - b2) * *gv * *gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                // decoupled decay, then the adaptive step
                *pv -= lr_s * wd * *pv;
                *pv -= lr_s * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Scales all gradients in place so their joint norm is at most `max_norm`.
pub fn clip_global_norm<S: Scalar>(grads: &mut [Tensor2<S>], max_norm: f64) {
    let total: f64 = grads
        .iter()
        .map(|g| g.frobenius_sq().to_f64().unwrap())
        .sum();
    let norm = total.sqrt();
    if norm > max_norm && norm > 0.0 {
        let factor = S::from_f64_exact(max_norm / norm);
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }
}
