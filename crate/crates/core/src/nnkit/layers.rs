use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{NnError, Tensor};

/// Fully connected layer, `y = x Wᵀ + b` over a `[batch, in]` input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `outputs × inputs`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    #[serde(skip)]
    pub grad_weights: Vec<f64>,
    #[serde(skip)]
    pub grad_bias: Vec<f64>,
}

impl Dense {
    pub fn new(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let weights = (0..inputs * outputs)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let bias = (0..outputs)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self {
            inputs,
            outputs,
            weights,
            bias,
            grad_weights: vec![0.0; inputs * outputs],
            grad_bias: vec![0.0; outputs],
        }
    }

    pub fn from_parts(inputs: usize, outputs: usize, weights: Vec<f64>, bias: Vec<f64>) -> Self {
        assert_eq!(weights.len(), inputs * outputs);
        assert_eq!(bias.len(), outputs);
        Self {
            inputs,
            outputs,
            weights,
            bias,
            grad_weights: vec![0.0; inputs * outputs],
            grad_bias: vec![0.0; outputs],
        }
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        let batch = x.rows();
        let mut out = vec![0.0; batch * self.outputs];
        for row in out.chunks_mut(self.outputs) {
            row.copy_from_slice(&self.bias);
        }
        // out[B×O] += x[B×I] · Wᵀ[I×O]
        unsafe {
            matrixmultiply::dgemm(
                batch,
                self.inputs,
                self.outputs,
                1.0,
                x.data().as_ptr(),
                self.inputs as isize,
                1,
                self.weights.as_ptr(),
                1,
                self.inputs as isize,
                1.0,
                out.as_mut_ptr(),
                self.outputs as isize,
                1,
            );
        }
        Tensor::new(vec![batch, self.outputs], out).expect("dense output shape")
    }

    fn backward(&mut self, x: &Tensor, grad: &Tensor) -> Tensor {
        let batch = x.rows();
        let g = grad.data();
        // dW[O×I] += gᵀ[O×B] · x[B×I]
        unsafe {
            matrixmultiply::dgemm(
                self.outputs,
                batch,
                self.inputs,
                1.0,
                g.as_ptr(),
                1,
                self.outputs as isize,
                x.data().as_ptr(),
                self.inputs as isize,
                1,
                1.0,
                self.grad_weights.as_mut_ptr(),
                self.inputs as isize,
                1,
            );
        }
        for row in g.chunks(self.outputs) {
            for (gb, &v) in self.grad_bias.iter_mut().zip(row) {
                *gb += v;
            }
        }
        // dx[B×I] = g[B×O] · W[O×I]
        let mut dx = vec![0.0; batch * self.inputs];
        unsafe {
            matrixmultiply::dgemm(
                batch,
                self.outputs,
                self.inputs,
                1.0,
                g.as_ptr(),
                self.outputs as isize,
                1,
                self.weights.as_ptr(),
                self.inputs as isize,
                1,
                0.0,
                dx.as_mut_ptr(),
                self.inputs as isize,
                1,
            );
        }
        Tensor::new(x.shape().to_vec(), dx).expect("dense input-grad shape")
    }
}

/// Stride-1 same-padded 2-D convolution over `[batch, C, H, W]` inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    /// Row-major `out × in × k × k`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    #[serde(skip)]
    pub grad_weights: Vec<f64>,
    #[serde(skip)]
    pub grad_bias: Vec<f64>,
}

impl Conv2d {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        assert!(kernel % 2 == 1, "convolution kernel must be odd");
        // He-uniform weights and zero bias keep ReLU stacks from starting dead
        let fan_in = in_channels * kernel * kernel;
        let bound = (6.0 / fan_in as f64).sqrt();
        let weights = (0..out_channels * fan_in)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let bias = vec![0.0; out_channels];
        Self {
            in_channels,
            out_channels,
            kernel,
            weights,
            bias,
            grad_weights: vec![0.0; out_channels * fan_in],
            grad_bias: vec![0.0; out_channels],
        }
    }

    pub fn from_parts(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
    ) -> Self {
        assert!(kernel % 2 == 1, "convolution kernel must be odd");
        assert_eq!(weights.len(), out_channels * in_channels * kernel * kernel);
        assert_eq!(bias.len(), out_channels);
        Self {
            in_channels,
            out_channels,
            kernel,
            grad_weights: vec![0.0; weights.len()],
            grad_bias: vec![0.0; out_channels],
            weights,
            bias,
        }
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    /// Unfolds one sample `[C, H, W]` into a `[C·k·k, H·W]` column matrix.
    fn im2col(&self, sample: &[f64], h: usize, w: usize) -> Vec<f64> {
        let k = self.kernel;
        let pad = (k / 2) as isize;
        let hw = h * w;
        let mut cols = vec![0.0; self.patch_len() * hw];
        for c in 0..self.in_channels {
            let plane = &sample[c * hw..(c + 1) * hw];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let dst = &mut cols[row * hw..(row + 1) * hw];
                    for y in 0..h {
                        let sy = y as isize + ki as isize - pad;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for x in 0..w {
                            let sx = x as isize + kj as isize - pad;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            dst[y * w + x] = plane[sy as usize * w + sx as usize];
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], h: usize, w: usize, out: &mut [f64]) {
        let k = self.kernel;
        let pad = (k / 2) as isize;
        let hw = h * w;
        for c in 0..self.in_channels {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let src = &cols[row * hw..(row + 1) * hw];
                    for y in 0..h {
                        let sy = y as isize + ki as isize - pad;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for x in 0..w {
                            let sx = x as isize + kj as isize - pad;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            out[c * hw + sy as usize * w + sx as usize] += src[y * w + x];
                        }
                    }
                }
            }
        }
    }

    /// Column matrix `[C·k·k, B·H·W]` for the whole batch.
    fn batch_cols(&self, x: &Tensor, h: usize, w: usize) -> Vec<f64> {
        let batch = x.shape()[0];
        let hw = h * w;
        let plen = self.patch_len();
        let n = batch * hw;
        let mut cols = vec![0.0; plen * n];
        for b in 0..batch {
            let one = self.im2col(x.row(b), h, w);
            for r in 0..plen {
                cols[r * n + b * hw..r * n + (b + 1) * hw]
                    .copy_from_slice(&one[r * hw..(r + 1) * hw]);
            }
        }
        cols
    }

    fn forward(&self, x: &Tensor) -> (Tensor, Vec<f64>) {
        let (batch, h, w) = (x.shape()[0], x.shape()[2], x.shape()[3]);
        let hw = h * w;
        let n = batch * hw;
        let plen = self.patch_len();
        let cols = self.batch_cols(x, h, w);
        let mut tmp = vec![0.0; self.out_channels * n];
        // tmp[O×N] = K[O×P] · cols[P×N]
        unsafe {
            matrixmultiply::dgemm(
                self.out_channels,
                plen,
                n,
                1.0,
                self.weights.as_ptr(),
                plen as isize,
                1,
                cols.as_ptr(),
                n as isize,
                1,
                0.0,
                tmp.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        let mut out = vec![0.0; batch * self.out_channels * hw];
        for o in 0..self.out_channels {
            for b in 0..batch {
                let dst = &mut out
                    [(b * self.out_channels + o) * hw..(b * self.out_channels + o + 1) * hw];
                let src = &tmp[o * n + b * hw..o * n + (b + 1) * hw];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s + self.bias[o];
                }
            }
        }
        let y = Tensor::new(vec![batch, self.out_channels, h, w], out).expect("conv output shape");
        (y, cols)
    }

    fn backward(&mut self, x: &Tensor, cols: &[f64], grad: &Tensor) -> Tensor {
        let (batch, h, w) = (x.shape()[0], x.shape()[2], x.shape()[3]);
        let hw = h * w;
        let n = batch * hw;
        let plen = self.patch_len();
        // regroup the upstream gradient as [O, B·HW]
        let mut g = vec![0.0; self.out_channels * n];
        for b in 0..batch {
            for o in 0..self.out_channels {
                let src = &grad.data()
                    [(b * self.out_channels + o) * hw..(b * self.out_channels + o + 1) * hw];
                self.grad_bias[o] += src.iter().sum::<f64>();
                g[o * n + b * hw..o * n + (b + 1) * hw].copy_from_slice(src);
            }
        }
        let mut dcols = vec![0.0; plen * n];
        unsafe {
            // dK[O×P] += g[O×N] · colsᵀ[N×P]
            matrixmultiply::dgemm(
                self.out_channels,
                n,
                plen,
                1.0,
                g.as_ptr(),
                n as isize,
                1,
                cols.as_ptr(),
                1,
                n as isize,
                1.0,
                self.grad_weights.as_mut_ptr(),
                plen as isize,
                1,
            );
            // dcols[P×N] = Kᵀ[P×O] · g[O×N]
            matrixmultiply::dgemm(
                plen,
                self.out_channels,
                n,
                1.0,
                self.weights.as_ptr(),
                1,
                plen as isize,
                g.as_ptr(),
                n as isize,
                1,
                0.0,
                dcols.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        let sample_len = self.in_channels * hw;
        let mut dx = vec![0.0; x.len()];
        let mut one = vec![0.0; plen * hw];
        for b in 0..batch {
            for r in 0..plen {
                one[r * hw..(r + 1) * hw]
                    .copy_from_slice(&dcols[r * n + b * hw..r * n + (b + 1) * hw]);
            }
            self.col2im(&one, h, w, &mut dx[b * sample_len..(b + 1) * sample_len]);
        }
        Tensor::new(x.shape().to_vec(), dx).expect("conv input-grad shape")
    }
}

/// One stage of a [`super::Network`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    Dense(Dense),
    Conv2d(Conv2d),
    Relu,
    Sigmoid,
    Tanh,
    /// `[batch, C, H, W] → [batch, C]`.
    GlobalAvgPool,
}

/// What a layer keeps from its forward pass for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct Cache {
    input: Tensor,
    output: Option<Tensor>,
    output_shape: Vec<usize>,
    cols: Vec<f64>,
}

impl Cache {
    pub(crate) fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Layer {
    pub fn dense(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        Layer::Dense(Dense::new(inputs, outputs, rng))
    }

    pub fn conv(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Layer::Conv2d(Conv2d::new(in_channels, out_channels, kernel, rng))
    }

    pub fn name(&self) -> &'static str {
        match self {
            Layer::Dense(_) => "dense",
            Layer::Conv2d(_) => "conv2d",
            Layer::Relu => "relu",
            Layer::Sigmoid => "sigmoid",
            Layer::Tanh => "tanh",
            Layer::GlobalAvgPool => "global_avg_pool",
        }
    }

    pub(crate) fn check_input(&self, index: usize, x: &Tensor) -> Result<(), NnError> {
        let shape = x.shape();
        let bad = |msg: String| NnError::Shape {
            layer: Some(index),
            msg,
        };
        match self {
            Layer::Dense(d) => {
                if shape.len() != 2 || shape[1] != d.inputs {
                    return Err(bad(format!(
                        "dense expects [batch, {}], got {shape:?}",
                        d.inputs
                    )));
                }
            }
            Layer::Conv2d(c) => {
                if shape.len() != 4 || shape[1] != c.in_channels {
                    return Err(bad(format!(
                        "conv2d expects [batch, {}, h, w], got {shape:?}",
                        c.in_channels
                    )));
                }
            }
            Layer::GlobalAvgPool => {
                if shape.len() != 4 {
                    return Err(bad(format!(
                        "pooling expects [batch, c, h, w], got {shape:?}"
                    )));
                }
            }
            Layer::Relu | Layer::Sigmoid | Layer::Tanh => {}
        }
        Ok(())
    }

    pub(crate) fn forward(&self, x: &Tensor) -> Tensor {
        match self {
            Layer::Dense(d) => d.forward(x),
            Layer::Conv2d(c) => c.forward(x).0,
            Layer::Relu => x.map(|v| v.max(0.0)),
            Layer::Sigmoid => x.map(sigmoid),
            Layer::Tanh => x.map(f64::tanh),
            Layer::GlobalAvgPool => pool(x),
        }
    }

    pub(crate) fn forward_cached(&self, x: Tensor) -> (Tensor, Cache) {
        match self {
            Layer::Conv2d(c) => {
                let (y, cols) = c.forward(&x);
                let output_shape = y.shape().to_vec();
                (
                    y,
                    Cache {
                        output_shape,
                        input: x,
                        output: None,
                        cols,
                    },
                )
            }
            Layer::Sigmoid | Layer::Tanh => {
                let y = self.forward(&x);
                (
                    y.clone(),
                    Cache {
                        output_shape: y.shape().to_vec(),
                        input: x,
                        output: Some(y),
                        cols: Vec::new(),
                    },
                )
            }
            _ => {
                let y = self.forward(&x);
                let output_shape = y.shape().to_vec();
                (
                    y,
                    Cache {
                        output_shape,
                        input: x,
                        output: None,
                        cols: Vec::new(),
                    },
                )
            }
        }
    }

    pub(crate) fn backward(&mut self, cache: &Cache, grad: &Tensor) -> Tensor {
        match self {
            Layer::Dense(d) => d.backward(&cache.input, grad),
            Layer::Conv2d(c) => c.backward(&cache.input, &cache.cols, grad),
            Layer::Relu => cache
                .input
                .zip_with(grad, |x, g| if x > 0.0 { g } else { 0.0 })
                .expect("relu grad shape"),
            Layer::Sigmoid => cache
                .output
                .as_ref()
                .expect("sigmoid cache")
                .zip_with(grad, |y, g| g * y * (1.0 - y))
                .expect("sigmoid grad shape"),
            Layer::Tanh => cache
                .output
                .as_ref()
                .expect("tanh cache")
                .zip_with(grad, |y, g| g * (1.0 - y * y))
                .expect("tanh grad shape"),
            Layer::GlobalAvgPool => unpool(cache.input.shape(), grad),
        }
    }

    /// `(parameters, gradients)` pairs, weights before bias.
    pub fn params_mut(&mut self) -> Vec<(&mut Vec<f64>, &mut Vec<f64>)> {
        match self {
            Layer::Dense(d) => {
                ensure_grad(&mut d.grad_weights, d.weights.len());
                ensure_grad(&mut d.grad_bias, d.bias.len());
                vec![
                    (&mut d.weights, &mut d.grad_weights),
                    (&mut d.bias, &mut d.grad_bias),
                ]
            }
            Layer::Conv2d(c) => {
                ensure_grad(&mut c.grad_weights, c.weights.len());
                ensure_grad(&mut c.grad_bias, c.bias.len());
                vec![
                    (&mut c.weights, &mut c.grad_weights),
                    (&mut c.bias, &mut c.grad_bias),
                ]
            }
            _ => Vec::new(),
        }
    }

    pub fn params(&self) -> Vec<&[f64]> {
        match self {
            Layer::Dense(d) => vec![&d.weights, &d.bias],
            Layer::Conv2d(c) => vec![&c.weights, &c.bias],
            _ => Vec::new(),
        }
    }
}

fn ensure_grad(grad: &mut Vec<f64>, len: usize) {
    if grad.len() != len {
        *grad = vec![0.0; len];
    }
}

fn pool(x: &Tensor) -> Tensor {
    let (batch, channels) = (x.shape()[0], x.shape()[1]);
    let hw = x.shape()[2] * x.shape()[3];
    let data = x
        .data()
        .chunks(hw)
        .map(|plane| plane.iter().sum::<f64>() / hw as f64)
        .collect();
    Tensor::new(vec![batch, channels], data).expect("pool output shape")
}

fn unpool(input_shape: &[usize], grad: &Tensor) -> Tensor {
    let hw = input_shape[2] * input_shape[3];
    let mut data = Vec::with_capacity(grad.len() * hw);
    for &g in grad.data() {
        data.extend(std::iter::repeat_n(g / hw as f64, hw));
    }
    Tensor::new(input_shape.to_vec(), data).expect("unpool shape")
}
