//! Adam optimizer over a module's trainable parameters.

use ndarray::ArrayD;

use super::{Module, Param};

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    state: Vec<Option<(ArrayD<f64>, ArrayD<f64>)>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            state: Vec::new(),
        }
    }

    /// One update over every trainable parameter carrying a gradient.
    /// Moment buffers are keyed by the module's visit order, so the same
    /// optimizer must always be used with the same module.
    pub fn step(&mut self, module: &mut dyn Module) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let (lr, b1, b2, eps) = (self.lr, self.beta1, self.beta2, self.eps);
        let state = &mut self.state;
        let mut idx = 0usize;
        module.visit("", &mut |_, p: &mut Param| {
            if !p.trainable {
                return;
            }
            let slot = idx;
            idx += 1;
            let Some(grad) = p.grad.as_ref() else {
                return;
            };
            while state.len() <= slot {
                state.push(None);
            }
            let (m, v) = state[slot].get_or_insert_with(|| {
                (
                    ArrayD::zeros(p.value.raw_dim()),
                    ArrayD::zeros(p.value.raw_dim()),
                )
            });
            ndarray::Zip::from(&mut p.value)
                .and(grad)
                .and(m)
                .and(v)
                .for_each(|w, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let m_hat = *m / c1;
                    let v_hat = *v / c2;
                    *w -= lr * m_hat / (v_hat.sqrt() + eps);
                });
        });
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }
}
