use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::Cache;
use super::{Layer, NnError, Tensor};

/// A fixed sequence of layers trained by reverse-mode differentiation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Network {
    layers: Vec<Layer>,
    #[serde(skip)]
    caches: Vec<Cache>,
}

impl PartialEq for Network {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

impl Network {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self {
            layers,
            caches: Vec::new(),
        }
    }

    /// Dense stack `sizes[0] → … → sizes[last]` with ReLU between hidden layers
    /// and no activation after the final layer.
    pub fn mlp(sizes: &[usize], rng: &mut impl Rng) -> Self {
        assert!(
            sizes.len() >= 2,
            "an mlp needs at least input and output sizes"
        );
        let mut layers = Vec::new();
        for (i, pair) in sizes.windows(2).enumerate() {
            layers.push(Layer::dense(pair[0], pair[1], rng));
            if i + 2 < sizes.len() {
                layers.push(Layer::Relu);
            }
        }
        Self::new(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> Option<usize> {
        self.layers.iter().find_map(|l| match l {
            Layer::Dense(d) => Some(d.inputs),
            Layer::Conv2d(c) => Some(c.in_channels),
            _ => None,
        })
    }

    pub fn output_dim(&self) -> Option<usize> {
        self.layers.iter().rev().find_map(|l| match l {
            Layer::Dense(d) => Some(d.outputs),
            Layer::Conv2d(c) => Some(c.out_channels),
            _ => None,
        })
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| l.params())
            .map(|p| p.len())
            .sum()
    }

    /// Inference pass; keeps no state.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor, NnError> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            layer.check_input(i, &h)?;
            h = layer.forward(&h);
        }
        Ok(h)
    }

    /// Training pass; caches every intermediate needed by [`Network::backward`].
    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor, NnError> {
        self.caches.clear();
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            layer.check_input(i, &h)?;
            let (y, cache) = layer.forward_cached(h);
            self.caches.push(cache);
            h = y;
        }
        Ok(h)
    }

    /// Accumulates parameter gradients and returns the gradient w.r.t. the
    /// input of the last [`Network::forward`] call. Consumes the cache.
    pub fn backward(&mut self, upstream: &Tensor) -> Result<Tensor, NnError> {
        if self.caches.len() != self.layers.len() {
            return Err(NnError::NoForwardCache);
        }
        let caches = std::mem::take(&mut self.caches);
        let mut g = upstream.clone();
        for (i, (layer, cache)) in self.layers.iter_mut().zip(&caches).enumerate().rev() {
            if g.shape() != cache.output_shape() {
                return Err(NnError::Shape {
                    layer: Some(i),
                    msg: format!(
                        "upstream gradient {:?} vs output {:?}",
                        g.shape(),
                        cache.output_shape()
                    ),
                });
            }
            g = layer.backward(cache, &g);
        }
        Ok(g)
    }

    pub fn zero_grad(&mut self) {
        for layer in &mut self.layers {
            for (_, g) in layer.params_mut() {
                g.fill(0.0);
            }
        }
    }

    /// Flat copy of every parameter, layer by layer.
    pub fn flat_params(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.params())
            .flat_map(|p| p.iter().copied())
            .collect()
    }

    /// Flat copy of every accumulated gradient, in [`Network::flat_params`] order.
    pub fn flat_grads(&mut self) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            for (_, g) in layer.params_mut() {
                out.extend_from_slice(g);
            }
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<(), NnError> {
        if flat.len() != self.param_count() {
            return Err(NnError::Shape {
                layer: None,
                msg: format!(
                    "expected {} parameters, got {}",
                    self.param_count(),
                    flat.len()
                ),
            });
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            for (p, _) in layer.params_mut() {
                let n = p.len();
                p.copy_from_slice(&flat[offset..offset + n]);
                offset += n;
            }
        }
        Ok(())
    }

    /// Soft target update `self ← (1 − tau)·self + tau·online`.
    pub fn blend_from(&mut self, online: &Network, tau: f64) -> Result<(), NnError> {
        let src = online.flat_params();
        let mut dst = self.flat_params();
        if src.len() != dst.len() {
            return Err(NnError::Shape {
                layer: None,
                msg: "blend between networks of different size".into(),
            });
        }
        for (d, s) in dst.iter_mut().zip(&src) {
            *d = (1.0 - tau) * *d + tau * s;
        }
        self.set_flat_params(&dst)
    }

    /// Structure check used when loading a checkpoint into a known architecture.
    pub fn same_architecture(&self, other: &Network) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| match (a, b) {
                    (Layer::Dense(x), Layer::Dense(y)) => {
                        x.inputs == y.inputs && x.outputs == y.outputs
                    }
                    (Layer::Conv2d(x), Layer::Conv2d(y)) => {
                        x.in_channels == y.in_channels
                            && x.out_channels == y.out_channels
                            && x.kernel == y.kernel
                    }
                    _ => a.name() == b.name(),
                })
    }
}
