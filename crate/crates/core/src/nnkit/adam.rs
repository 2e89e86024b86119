use serde::{Deserialize, Serialize};

use super::{Network, NnError};

/// Adam with bias correction. Moment buffers follow [`Network::flat_params`] order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies the accumulated gradients of `net`, then clears them.
    pub fn step(&mut self, net: &mut Network) -> Result<(), NnError> {
        for (index, layer) in net.layers_mut().iter_mut().enumerate() {
            for (_, grad) in layer.params_mut() {
                if grad.iter().any(|g| !g.is_finite()) {
                    return Err(NnError::NonFinite { layer: index });
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let mut slot = 0;
        for layer in net.layers_mut() {
            for (param, grad) in layer.params_mut() {
                if self.m.len() <= slot {
                    self.m.push(vec![0.0; param.len()]);
                    self.v.push(vec![0.0; param.len()]);
                }
                let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
                if m.len() != param.len() {
                    return Err(NnError::Shape {
                        layer: None,
                        msg: "optimizer state does not match network".into(),
                    });
                }
                for i in 0..param.len() {
                    let g = grad[i];
                    m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                    v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                    let m_hat = m[i] / c1;
                    let v_hat = v[i] / c2;
                    param[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
                }
                grad.fill(0.0);
                slot += 1;
            }
        }
        Ok(())
    }
}
