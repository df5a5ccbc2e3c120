//! Parameter updates: SGD with momentum and Adam.

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimKind {
    Sgd { momentum: f32 },
    Adam { beta1: f32, beta2: f32, eps: f32 },
}

#[derive(Debug, Clone, Copy)]
pub struct OptimConfig {
    pub kind: OptimKind,
    pub lr: f32,
}

impl OptimConfig {
    pub fn sgd(lr: f32, momentum: f32) -> Self {
        OptimConfig {
            kind: OptimKind::Sgd { momentum },
            lr,
        }
    }

    pub fn adam(lr: f32) -> Self {
        OptimConfig {
            kind: OptimKind::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            lr,
        }
    }
}

/// Holds per-parameter state slots; parameters are identified by their
/// position in the update call, so callers must pass them in a stable order.
pub struct Optimizer {
    config: OptimConfig,
    /// SGD velocity or Adam first moment
    m: Vec<Vec<f32>>,
    /// Adam second moment
    v: Vec<Vec<f32>>,
    steps: u64,
}

impl Optimizer {
    pub fn new(config: OptimConfig) -> Self {
        Optimizer {
            config,
            m: Vec::new(),
            v: Vec::new(),
            steps: 0,
        }
    }

    pub fn lr(&self) -> f32 {
        self.config.lr
    }

    pub fn set_lr(&mut self, lr: f32) {
        self.config.lr = lr;
    }

    /// Apply one update over `params`, consuming and clearing each gradient.
    ///
    /// Any non-finite gradient entry aborts before touching the weights and
    /// names the offending parameter.
    pub fn step(&mut self, params: &mut [(String, &mut Tensor<f32>)]) -> Result<()> {
        while self.m.len() < params.len() {
            let i = self.m.len();
            let n = params[i].1.data.len();
            self.m.push(vec![0.0; n]);
            self.v.push(vec![0.0; n]);
        }
        for (name, p) in params.iter() {
            let g = p
                .grad
                .as_ref()
                .unwrap_or_else(|| panic!("parameter {name} has no gradient buffer"));
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGrad {
                    param: name.clone(),
                });
            }
        }
        self.steps += 1;
        let lr = self.config.lr;
        match self.config.kind {
            OptimKind::Sgd { momentum } => {
                for (i, (_, p)) in params.iter_mut().enumerate() {
                    let g = p.grad.as_ref().unwrap();
                    let vel = &mut self.m[i];
                    for ((w, &gv), m) in p.data.iter_mut().zip(g).zip(vel.iter_mut()) {
                        *m = momentum * *m + gv;
                        *w -= lr * *m;
                    }
                }
            }
            OptimKind::Adam { beta1, beta2, eps } => {
                let t = self.steps as f64;
                let bc1 = 1.0 - (beta1 as f64).powf(t);
                let bc2 = 1.0 - (beta2 as f64).powf(t);
                for (i, (_, p)) in params.iter_mut().enumerate() {
                    let g = p.grad.as_ref().unwrap();
                    let (ms, vs) = (&mut self.m[i], &mut self.v[i]);
                    for (((w, &gv), m), v) in
                        p.data.iter_mut().zip(g).zip(ms.iter_mut()).zip(vs.iter_mut())
                    {
                        *m = beta1 * *m + (1.0 - beta1) * gv;
                        *v = beta2 * *v + (1.0 - beta2) * gv * gv;
                        let mh = (*m as f64 / bc1) as f32;
                        let vh = (*v as f64 / bc2) as f32;
                        *w -= lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
        for (_, p) in params.iter_mut() {
            p.zero_grad();
        }
        Ok(())
    }
}

/// Cosine-annealed learning rate: starts at `base`, reaches zero at
/// `total` epochs.
pub fn cosine_lr(base: f32, epoch: usize, total: usize) -> f32 {
    assert!(total > 0, "total epochs must be positive");
    let phase = std::f64::consts::PI * epoch as f64 / total as f64;
    (base as f64 * 0.5 * (1.0 + phase.cos())) as f32
}
