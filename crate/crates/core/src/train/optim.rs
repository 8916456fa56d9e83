use crate::error::{Error, Result};
use crate::param::Parameter;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    /// L2 weight decay is added to the gradient before the momentum update.
    Sgd { momentum: f64, weight_decay: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn sgd(momentum: f64, weight_decay: f64) -> Self {
        OptimizerKind::Sgd { momentum, weight_decay }
    }

    pub fn adam() -> Self {
        OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Slot {
    Momentum(Tensor),
    Moments { m: Tensor, v: Tensor },
}

/// Optimizer state for one component's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    slots: Vec<Slot>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, params: &[Parameter]) -> Self {
        let slots = params
            .iter()
            .map(|p| {
                let z = Tensor::zeros(p.value.shape());
                match kind {
                    OptimizerKind::Sgd { .. } => Slot::Momentum(z),
                    OptimizerKind::Adam { .. } => Slot::Moments { m: z.clone(), v: z },
                }
            })
            .collect();
        OptimizerState { kind, slots, step: 0 }
    }

    /// Updates every parameter from its accumulated gradient, then zeroes the
    /// gradients. `frozen` parameters are left untouched. `run_step` only
    /// labels diagnostics.
    pub fn apply(&mut self, params: &mut [Parameter], lr: f64, frozen: &[bool], run_step: u64) -> Result<()> {
        for p in params.iter() {
            if !p.grad.is_finite() {
                return Err(Error::NonFinite { param: format!("{} (gradient)", p.id), step: run_step });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        for (idx, (p, slot)) in params.iter_mut().zip(&mut self.slots).enumerate() {
            if frozen.get(idx).copied().unwrap_or(false) {
                p.zero_grad();
                continue;
            }
            let value = p.value.data_mut();
            let grad = p.grad.data();
            match (self.kind, slot) {
                (OptimizerKind::Sgd { momentum, weight_decay }, Slot::Momentum(buf)) => {
                    for ((w, &g), b) in value.iter_mut().zip(grad).zip(buf.data_mut()) {
                        let g = g + weight_decay * *w;
                        *b = momentum * *b + g;
                        *w -= lr * *b;
                    }
                }
                (OptimizerKind::Adam { beta1, beta2, eps }, Slot::Moments { m, v }) => {
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    for (((w, &g), m), v) in value.iter_mut().zip(grad).zip(m.data_mut()).zip(v.data_mut()) {
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    }
                }
                _ => unreachable!("slot kind follows optimizer kind"),
            }
            if !p.value.is_finite() {
                return Err(Error::NonFinite { param: p.id.clone(), step: run_step });
            }
            p.zero_grad();
        }
        Ok(())
    }
}
