use std::collections::{BTreeMap, HashMap};

use crate::params::ParamStore;
use crate::tape::Matrix;

/// Adam with decoupled weight decay. Moment estimates and step counts are
/// kept per tensor, so tensors updated on different schedules still get the
/// right bias correction.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    state: HashMap<String, Moments>,
}

#[derive(Clone, Debug)]
struct Moments {
    m: Matrix,
    v: Matrix,
    step: i32,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            state: HashMap::new(),
        }
    }

    /// Applies one update to every tensor in `grads`. `lr_scale` multiplies
    /// the base rate per tensor name (LoRA+ uses it for the `B` factors).
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Matrix>,
        lr: f64,
        lr_scale: impl Fn(&str) -> f64,
    ) {
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else {
                continue;
            };
            let st = self.state.entry(name.clone()).or_insert_with(|| Moments {
                m: Matrix::zeros(g.dim()),
                v: Matrix::zeros(g.dim()),
                step: 0,
            });
            st.step += 1;
            let rate = lr * lr_scale(name);
            let bc1 = 1.0 - self.beta1.powi(st.step);
            let bc2 = 1.0 - self.beta2.powi(st.step);
            let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
            ndarray::Zip::from(p)
                .and(&mut st.m)
                .and(&mut st.v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= rate * (mhat / (vhat.sqrt() + eps) + wd * *p);
                });
        }
    }
}
