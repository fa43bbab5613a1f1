use std::collections::BTreeMap;

use super::{Module, Scalar};

/// Adam over every unfrozen parameter, with state keyed by parameter name.
#[derive(Clone, Debug)]
pub struct Adam<S> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub state: BTreeMap<String, (Vec<S>, Vec<S>)>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            state: BTreeMap::new(),
        }
    }

    /// One update over all given modules. Gradients are left untouched.
    pub fn step(&mut self, modules: &mut [&mut dyn Module<S>]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (S::lit(self.beta1), S::lit(self.beta2));
        let step_size = S::lit(self.lr / bc1);
        let bc2_sqrt = S::lit(bc2.sqrt());
        let eps = S::lit(self.eps);
        for m in modules.iter_mut() {
            m.params_mut(&mut |name, p| {
                if p.frozen {
                    return;
                }
                let (mom, vel) = self
                    .state
                    .entry(name.to_string())
                    .or_insert_with(|| (vec![S::zero(); p.numel()], vec![S::zero(); p.numel()]));
                for i in 0..p.value.len() {
                    let g = p.grad[i];
                    mom[i] = b1 * mom[i] + (S::one() - b1) * g;
                    vel[i] = b2 * vel[i] + (S::one() - b2) * g * g;
                    let denom = vel[i].sqrt() / bc2_sqrt + eps;
                    p.value[i] -= step_size * mom[i] / denom;
                }
            });
        }
    }
}

/// Global L2 norm of the gradients of all unfrozen parameters.
pub fn grad_norm<S: Scalar>(modules: &[&dyn Module<S>]) -> f64 {
    let mut sq = 0.0;
    for m in modules {
        m.params(&mut |_, p| {
            if !p.frozen {
                sq += p.grad.iter().map(|g| g.as_f64() * g.as_f64()).sum::<f64>();
            }
        });
    }
    sq.sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`; returns the pre-clip norm.
pub fn clip_grad_norm<S: Scalar>(modules: &mut [&mut dyn Module<S>], max_norm: f64) -> f64 {
    let norm = {
        let views: Vec<&dyn Module<S>> = modules.iter().map(|m| &**m as &dyn Module<S>).collect();
        grad_norm(&views)
    };
    if norm > max_norm && norm > 0.0 {
        let scale = S::lit(max_norm / norm);
        for m in modules.iter_mut() {
            m.params_mut(&mut |_, p| {
                if !p.frozen {
                    p.grad.iter_mut().for_each(|g| *g *= scale);
                }
            });
        }
    }
    norm
}
