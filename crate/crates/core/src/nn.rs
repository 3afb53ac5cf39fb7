//! Small sequential networks and an Adam optimizer on top of the tape.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::conv::Padding;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
    Silu,
}

/// One stage of a [`Sequential`]. Shapes exclude the leading batch axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "layer", rename_all = "kebab-case")]
pub enum Layer {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        #[serde(default)]
        padding: Padding,
    },
    /// Adds `cond @ U` (`[B, cond_dim] x [cond_dim, channels]`) as a
    /// per-sample bias on axis 1.
    CondBias {
        cond_dim: usize,
        channels: usize,
    },
    Act {
        kind: Activation,
    },
    Downsample {
        factor: usize,
    },
    Upsample {
        factor: usize,
    },
    Reshape {
        shape: Vec<usize>,
    },
}

impl Layer {
    /// Number of parameter tensors the layer owns.
    pub fn parameter_tensors(&self) -> usize {
        self.param_shapes().len()
    }

    fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            Layer::Dense { inputs, outputs } => vec![vec![inputs, outputs], vec![outputs]],
            Layer::Conv {
                in_channels,
                out_channels,
                kernel,
                ..
            } => vec![vec![out_channels, in_channels, kernel, kernel], vec![out_channels]],
            Layer::CondBias { cond_dim, channels } => vec![vec![cond_dim, channels]],
            _ => Vec::new(),
        }
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = || Error::invalid(alloc::format!("layer {self:?} cannot take input {input:?}"));
        Ok(match self {
            Layer::Dense { inputs, outputs } => {
                if input != [*inputs] {
                    return Err(bad());
                }
                vec![*outputs]
            }
            Layer::Conv {
                in_channels,
                out_channels,
                kernel,
                ..
            } => match input {
                [c, h, w] if c == in_channels && kernel % 2 == 1 => vec![*out_channels, *h, *w],
                _ => return Err(bad()),
            },
            Layer::CondBias { channels, .. } => {
                if input.first() != Some(channels) {
                    return Err(bad());
                }
                input.to_vec()
            }
            Layer::Act { .. } => input.to_vec(),
            Layer::Downsample { factor } => match input {
                [c, h, w] if *factor > 0 && h % factor == 0 && w % factor == 0 => {
                    vec![*c, h / factor, w / factor]
                }
                _ => return Err(bad()),
            },
            Layer::Upsample { factor } => match input {
                [c, h, w] if *factor > 0 => vec![*c, h * factor, w * factor],
                _ => return Err(bad()),
            },
            Layer::Reshape { shape } => {
                if shape.iter().product::<usize>() != input.iter().product::<usize>() {
                    return Err(bad());
                }
                shape.clone()
            }
        })
    }
}

/// Layer stack with owned parameters.
///
/// Parameters are shared (`Arc`) so inference on a tape never copies them.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequential {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    params: Vec<Arc<Tensor>>,
}

impl Sequential {
    /// Builds the stack with LeCun-normal weights and zero biases.
    pub fn new<R: Rng + ?Sized>(input_shape: Vec<usize>, layers: Vec<Layer>, rng: &mut R) -> Result<Self> {
        Self::validate(&input_shape, &layers)?;
        let mut params = Vec::new();
        for layer in &layers {
            for (i, shape) in layer.param_shapes().into_iter().enumerate() {
                let fan_in = match layer {
                    Layer::Dense { inputs, .. } => *inputs,
                    Layer::Conv {
                        in_channels, kernel, ..
                    } => in_channels * kernel * kernel,
                    Layer::CondBias { cond_dim, .. } => *cond_dim,
                    _ => 1,
                };
                let is_bias = i == 1;
                let t = if is_bias {
                    Tensor::zeros(&shape)
                } else {
                    Tensor::randn(&shape, rng).scale(1.0 / libm::sqrt(fan_in as f64))
                };
                params.push(Arc::new(t));
            }
        }
        Ok(Sequential {
            input_shape,
            layers,
            params,
        })
    }

    /// Rebuilds a network from stored parameters (e.g. a checkpoint).
    pub fn from_parts(input_shape: Vec<usize>, layers: Vec<Layer>, params: Vec<Tensor>) -> Result<Self> {
        Self::validate(&input_shape, &layers)?;
        let expected: Vec<Vec<usize>> = layers.iter().flat_map(|l| l.param_shapes()).collect();
        if expected.len() != params.len() {
            return Err(Error::invalid(alloc::format!(
                "expected {} parameter tensors, got {}",
                expected.len(),
                params.len()
            )));
        }
        for (e, p) in expected.iter().zip(&params) {
            if e.as_slice() != p.shape() {
                return Err(Error::shape("parameter", e, p.shape()));
            }
        }
        Ok(Sequential {
            input_shape,
            layers,
            params: params.into_iter().map(Arc::new).collect(),
        })
    }

    fn validate(input: &[usize], layers: &[Layer]) -> Result<Vec<usize>> {
        let mut shape = input.to_vec();
        for l in layers {
            shape = l.output_shape(&shape)?;
        }
        Ok(shape)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> Vec<usize> {
        Self::validate(&self.input_shape, &self.layers).expect("validated at construction")
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn params(&self) -> &[Arc<Tensor>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Arc<Tensor>] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    /// Registers the parameters on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Result<Vec<Var<'t>>> {
        self.params
            .iter()
            .map(|p| tape.leaf_shared(p.clone(), trainable))
            .collect()
    }

    /// Runs the stack on a batch `[B, ..input_shape]`.
    pub fn forward<'t>(&self, x: Var<'t>, cond: Option<Var<'t>>, params: &[Var<'t>]) -> Result<Var<'t>> {
        let xs = x.shape();
        if xs.len() != self.input_shape.len() + 1 || xs[1..] != self.input_shape[..] {
            return Err(Error::shape("network input", &self.input_shape, &xs));
        }
        let batch = xs[0];
        let mut h = x;
        let mut p = params.iter();
        let mut next = || p.next().copied().ok_or_else(|| Error::invalid("missing parameters"));
        for layer in &self.layers {
            h = match layer {
                Layer::Dense { .. } => {
                    let w = next()?;
                    let b = next()?;
                    h.matmul(w)?.add_bias(b, 1)?
                }
                Layer::Conv { padding, .. } => {
                    let k = next()?;
                    let b = next()?;
                    h.conv2d(k, *padding)?.add_bias(b, 1)?
                }
                Layer::CondBias { .. } => {
                    let u = next()?;
                    let c = cond.ok_or_else(|| Error::invalid("network needs a conditioning input"))?;
                    h.add_bias(c.matmul(u)?, 0)?
                }
                Layer::Act { kind } => match kind {
                    Activation::Relu => h.relu()?,
                    Activation::Tanh => h.tanh()?,
                    Activation::Sigmoid => h.sigmoid()?,
                    Activation::Silu => h.silu()?,
                },
                Layer::Downsample { factor } => h.downsample(*factor)?,
                Layer::Upsample { factor } => h.upsample(*factor)?,
                Layer::Reshape { shape } => {
                    let mut s = vec![batch];
                    s.extend_from_slice(shape);
                    h.reshape(&s)?
                }
            };
        }
        Ok(h)
    }

    /// Forward pass on a single unbatched sample with frozen parameters.
    pub fn apply<'t>(&self, x: Var<'t>, cond: Option<Var<'t>>) -> Result<Var<'t>> {
        let tape = x.tape();
        let params = self.bind(tape, false)?;
        let mut batched = vec![1];
        batched.extend_from_slice(&x.shape());
        let out = self.forward(x.reshape(&batched)?, cond, &params)?;
        out.reshape(&self.output_shape())
    }

    /// Tape-free evaluation of one sample.
    pub fn eval(&self, x: &Tensor, cond: Option<&Tensor>) -> Result<Tensor> {
        let tape = Tape::new();
        let xv = tape.constant(x.clone())?;
        let c = cond.map(|c| tape.constant(c.clone())).transpose()?;
        let out = self.apply(xv, c)?;
        Ok((*out.value()).clone())
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u32,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn reset(&mut self) {
        self.m.clear();
        self.v.clear();
        self.t = 0;
    }

    /// Update directions for raw buffers; returns the steps to subtract.
    pub fn direction(&mut self, grads: &[&[f64]]) -> Vec<Vec<f64>> {
        if self.m.len() != grads.len() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.t = 0;
        }
        self.t += 1;
        let bc1 = 1.0 - libm::pow(self.beta1, self.t as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, self.t as f64);
        grads
            .iter()
            .enumerate()
            .map(|(i, g)| {
                let (m, v) = (&mut self.m[i], &mut self.v[i]);
                g.iter()
                    .enumerate()
                    .map(|(j, &gj)| {
                        m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                        v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                        let mh = m[j] / bc1;
                        let vh = v[j] / bc2;
                        self.lr * mh / (libm::sqrt(vh) + self.eps)
                    })
                    .collect()
            })
            .collect()
    }

    /// One step on shared parameters.
    pub fn step(&mut self, params: &mut [Arc<Tensor>], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::invalid("parameter/gradient count mismatch"));
        }
        let raw: Vec<&[f64]> = grads.iter().map(|g| g.data()).collect();
        let dirs = self.direction(&raw);
        for (p, d) in params.iter_mut().zip(dirs) {
            let data: Vec<f64> = p.data().iter().zip(&d).map(|(a, b)| a - b).collect();
            let updated = Tensor::new(p.shape().to_vec(), data)?;
            *p = Arc::new(updated);
        }
        Ok(())
    }
}

/// Sinusoidal embedding of a diffusion step, `[sin(t w_j), cos(t w_j)]`.
pub fn time_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for j in 0..half {
        let freq = libm::exp(-libm::log(10_000.0) * j as f64 / half.max(1) as f64);
        out.push(libm::sin(t as f64 * freq));
    }
    for j in 0..half {
        let freq = libm::exp(-libm::log(10_000.0) * j as f64 / half.max(1) as f64);
        out.push(libm::cos(t as f64 * freq));
    }
    out.resize(dim, 0.0);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check_gradient;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn conv_stack(rng: &mut ChaCha8Rng) -> Sequential {
        Sequential::new(
            vec![1, 4, 4],
            vec![
                Layer::Conv {
                    in_channels: 1,
                    out_channels: 3,
                    kernel: 3,
                    padding: Padding::Zero,
                },
                Layer::Act { kind: Activation::Silu },
                Layer::Downsample { factor: 2 },
                Layer::Reshape { shape: vec![12] },
                Layer::Dense { inputs: 12, outputs: 4 },
                Layer::Act { kind: Activation::Tanh },
            ],
            rng,
        )
        .unwrap()
    }

    #[test]
    fn shapes_are_validated() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(Sequential::new(vec![3], vec![Layer::Dense { inputs: 4, outputs: 2 }], &mut rng).is_err());
        let net = conv_stack(&mut rng);
        assert_eq!(net.output_shape(), vec![4]);
        assert_eq!(net.parameter_count(), 3 * 9 + 3 + 12 * 4 + 4);
    }

    #[test]
    fn input_gradient_through_network() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = conv_stack(&mut rng);
        let x = Tensor::randn(&[1, 4, 4], &mut rng);
        let err = check_gradient(|v| net.apply(v, None)?.square()?.sum(), &x, 1e-5).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn adam_fits_a_line() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut net = Sequential::new(vec![1], vec![Layer::Dense { inputs: 1, outputs: 1 }], &mut rng).unwrap();
        let xs = Tensor::new(vec![4, 1], vec![-1.0, 0.0, 1.0, 2.0]).unwrap();
        let ys = xs.map(|x| 3.0 * x - 0.5);
        let mut opt = Adam::new(0.05);
        for _ in 0..800 {
            let tape = Tape::new();
            let params = net.bind(&tape, true).unwrap();
            let x = tape.constant(xs.clone()).unwrap();
            let y = tape.constant(ys.clone()).unwrap();
            let loss = net.forward(x, None, &params).unwrap().sub(y).unwrap().square().unwrap().mean().unwrap();
            let g = tape.backward(loss).unwrap();
            let grads: Vec<Tensor> = params.iter().map(|p| g.wrt(p).unwrap()).collect();
            opt.step(net.params_mut(), &grads).unwrap();
        }
        assert!((net.params()[0].data()[0] - 3.0).abs() < 1e-2);
        assert!((net.params()[1].data()[0] + 0.5).abs() < 1e-2);
    }

    #[test]
    fn time_embedding_is_bounded() {
        let e = time_embedding(500, 16);
        assert_eq!(e.len(), 16);
        assert!(e.iter().all(|v| v.abs() <= 1.0));
    }
}
