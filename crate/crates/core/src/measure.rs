//! Forward measurement operators `y = A(x) + sigma_y * noise`.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::conv::Padding;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn reflect() -> Padding {
    Padding::Reflect
}

fn two() -> f64 {
    2.0
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Orientation {
    #[default]
    Horizontal,
    Vertical,
    Diagonal,
    AntiDiagonal,
}

/// Operator description as it appears in experiment configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum OperatorSpec {
    Identity,
    /// Zeroes a `size x size` square; centered unless `top`/`left` or a
    /// placement `seed` is given.
    BoxInpaint {
        size: usize,
        #[serde(default)]
        top: Option<usize>,
        #[serde(default)]
        left: Option<usize>,
        #[serde(default)]
        seed: Option<u64>,
    },
    /// Keeps each pixel independently with probability `keep_prob`.
    RandomInpaint { keep_prob: f64, seed: u64 },
    GaussianBlur {
        kernel: usize,
        sigma: f64,
        #[serde(default = "reflect")]
        padding: Padding,
    },
    /// Box kernel along a line.
    MotionBlur {
        length: usize,
        #[serde(default)]
        orientation: Orientation,
        #[serde(default = "reflect")]
        padding: Padding,
    },
    /// Area-average downsampling of the last two axes.
    Downsample { factor: usize },
    /// Pointwise `tanh(scale * x) / scale`.
    Saturate {
        #[serde(default = "two")]
        scale: f64,
    },
    /// Observes the listed coordinates of the flattened input.
    Select { indices: Vec<usize> },
}

#[derive(Clone, Debug, PartialEq)]
enum Kind {
    Identity,
    Mask(Arc<Tensor>),
    Conv { kernel: Arc<Tensor>, padding: Padding },
    Downsample(usize),
    Saturate(f64),
    Select(Arc<Vec<usize>>),
}

/// A forward map with its noise level, bound to one input shape.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementOperator {
    spec: OperatorSpec,
    kind: Kind,
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
    sigma_y: f64,
}

/// Noisy observation together with the seed of its noise draw.
#[derive(Clone, Debug, PartialEq)]
pub struct Measurement {
    pub y: Tensor,
    pub seed: u64,
    pub sigma_y: f64,
}

fn spatial(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [.., h, w] if shape.len() >= 2 => Ok((*h, *w)),
        _ => Err(Error::invalid(alloc::format!("operator needs a grid input, got {shape:?}"))),
    }
}

pub fn gaussian_kernel(k: usize, sigma: f64) -> Result<Tensor> {
    if k % 2 == 0 {
        return Err(Error::invalid(alloc::format!("blur kernel size {k} is even")));
    }
    if !(sigma >= 0.0) {
        return Err(Error::invalid("blur sigma must be non-negative"));
    }
    let r = (k / 2) as f64;
    let mut data = vec![0.0; k * k];
    if sigma == 0.0 {
        data[k * k / 2] = 1.0;
    } else {
        for i in 0..k {
            for j in 0..k {
                let (dy, dx) = (i as f64 - r, j as f64 - r);
                data[i * k + j] = libm::exp(-(dy * dy + dx * dx) / (2.0 * sigma * sigma));
            }
        }
        let s: f64 = data.iter().sum();
        data.iter_mut().for_each(|v| *v /= s);
    }
    Tensor::new(vec![k, k], data)
}

pub fn motion_kernel(length: usize, orientation: Orientation) -> Result<Tensor> {
    if length % 2 == 0 {
        return Err(Error::invalid(alloc::format!("motion kernel length {length} is even")));
    }
    let k = length;
    let mut data = vec![0.0; k * k];
    let c = k / 2;
    for i in 0..k {
        let (r, col) = match orientation {
            Orientation::Horizontal => (c, i),
            Orientation::Vertical => (i, c),
            Orientation::Diagonal => (i, i),
            Orientation::AntiDiagonal => (i, k - 1 - i),
        };
        data[r * k + col] = 1.0 / k as f64;
    }
    Tensor::new(vec![k, k], data)
}

impl MeasurementOperator {
    pub fn new(spec: OperatorSpec, input_shape: &[usize], sigma_y: f64) -> Result<Self> {
        if !(sigma_y >= 0.0) || !sigma_y.is_finite() {
            return Err(Error::invalid("sigma_y must be finite and non-negative"));
        }
        let n: usize = input_shape.iter().product();
        if n == 0 {
            return Err(Error::invalid("operator input must be nonempty"));
        }
        let mut output_shape = input_shape.to_vec();
        let kind = match &spec {
            OperatorSpec::Identity => Kind::Identity,
            OperatorSpec::BoxInpaint { size, top, left, seed } => {
                let (h, w) = spatial(input_shape)?;
                if *size > h || *size > w {
                    return Err(Error::invalid(alloc::format!("{size}x{size} box does not fit a {h}x{w} grid")));
                }
                let (t, l) = match (top, left, seed) {
                    (Some(t), Some(l), _) => (*t, *l),
                    (None, None, Some(s)) => {
                        let mut rng = ChaCha8Rng::seed_from_u64(*s);
                        (rng.random_range(0..=h - size), rng.random_range(0..=w - size))
                    }
                    (None, None, None) => ((h - size) / 2, (w - size) / 2),
                    _ => return Err(Error::invalid("box placement needs both top and left")),
                };
                if t + size > h || l + size > w {
                    return Err(Error::invalid("box extends past the grid"));
                }
                let mask: Vec<f64> = (0..n)
                    .map(|i| {
                        let (r, c) = ((i / w) % h, i % w);
                        let inside = r >= t && r < t + size && c >= l && c < l + size;
                        if inside { 0.0 } else { 1.0 }
                    })
                    .collect();
                Kind::Mask(Arc::new(Tensor::new(input_shape.to_vec(), mask)?))
            }
            OperatorSpec::RandomInpaint { keep_prob, seed } => {
                if !(0.0..=1.0).contains(keep_prob) {
                    return Err(Error::invalid("keep_prob must lie in [0, 1]"));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let mask = (0..n)
                    .map(|_| if rng.random::<f64>() < *keep_prob { 1.0 } else { 0.0 })
                    .collect();
                Kind::Mask(Arc::new(Tensor::new(input_shape.to_vec(), mask)?))
            }
            OperatorSpec::GaussianBlur { kernel, sigma, padding } => {
                spatial(input_shape)?;
                Kind::Conv {
                    kernel: Arc::new(gaussian_kernel(*kernel, *sigma)?),
                    padding: *padding,
                }
            }
            OperatorSpec::MotionBlur {
                length,
                orientation,
                padding,
            } => {
                spatial(input_shape)?;
                Kind::Conv {
                    kernel: Arc::new(motion_kernel(*length, *orientation)?),
                    padding: *padding,
                }
            }
            OperatorSpec::Downsample { factor } => {
                let (h, w) = spatial(input_shape)?;
                if *factor == 0 || h % factor != 0 || w % factor != 0 {
                    return Err(Error::invalid(alloc::format!("factor {factor} does not divide {h}x{w}")));
                }
                let k = output_shape.len();
                output_shape[k - 2] = h / factor;
                output_shape[k - 1] = w / factor;
                Kind::Downsample(*factor)
            }
            OperatorSpec::Saturate { scale } => {
                if !(*scale > 0.0) {
                    return Err(Error::invalid("saturation scale must be positive"));
                }
                Kind::Saturate(*scale)
            }
            OperatorSpec::Select { indices } => {
                if indices.is_empty() || indices.iter().any(|&i| i >= n) {
                    return Err(Error::invalid("selected coordinates must be nonempty and in range"));
                }
                output_shape = vec![indices.len()];
                Kind::Select(Arc::new(indices.clone()))
            }
        };
        Ok(MeasurementOperator {
            spec,
            kind,
            input_shape: input_shape.to_vec(),
            output_shape,
            sigma_y,
        })
    }

    pub fn spec(&self) -> &OperatorSpec {
        &self.spec
    }

    pub fn sigma_y(&self) -> f64 {
        self.sigma_y
    }

    /// Copy with a different noise level.
    pub fn with_sigma_y(&self, sigma_y: f64) -> Result<Self> {
        MeasurementOperator::new(self.spec.clone(), &self.input_shape, sigma_y)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    pub fn is_linear(&self) -> bool {
        !matches!(self.kind, Kind::Saturate(_))
    }

    /// `{0, 1}` mask for inpainting operators.
    pub fn mask(&self) -> Option<&Tensor> {
        match &self.kind {
            Kind::Mask(m) => Some(m),
            _ => None,
        }
    }

    /// Differentiable application.
    pub fn apply_var<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape != self.input_shape {
            return Err(Error::shape("measurement", &self.input_shape, &shape));
        }
        let tape = x.tape();
        match &self.kind {
            Kind::Identity => Ok(x),
            Kind::Mask(m) => x.mul(tape.leaf_shared(m.clone(), false)?),
            Kind::Conv { kernel, padding } => x.conv2d(tape.leaf_shared(kernel.clone(), false)?, *padding),
            Kind::Downsample(f) => x.downsample(*f),
            Kind::Saturate(s) => x.mul_scalar(*s)?.tanh()?.mul_scalar(1.0 / s),
            Kind::Select(idx) => x.gather(idx.clone(), &[idx.len()]),
        }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        if matches!(self.kind, Kind::Identity) {
            if x.shape() != self.input_shape.as_slice() {
                return Err(Error::shape("measurement", &self.input_shape, x.shape()));
            }
            return Ok(x.clone());
        }
        let tape = Tape::new();
        let v = self.apply_var(tape.constant(x.clone())?)?;
        Ok((*v.value()).clone())
    }

    /// `J(x)^T cotangent`; the adjoint for linear operators.
    pub fn vjp(&self, x: &Tensor, cotangent: &Tensor) -> Result<Tensor> {
        if cotangent.shape() != self.output_shape.as_slice() {
            return Err(Error::shape("vjp", &self.output_shape, cotangent.shape()));
        }
        let tape = Tape::new();
        let xv = tape.var(x.clone())?;
        let c = tape.constant(cotangent.clone())?;
        let loss = self.apply_var(xv)?.dot(c)?;
        tape.backward(loss)?.wrt(&xv)
    }

    /// `A^T y`.
    pub fn adjoint(&self, y: &Tensor) -> Result<Tensor> {
        if !self.is_linear() {
            return Err(Error::invalid("adjoint requested for a nonlinear operator"));
        }
        self.vjp(&Tensor::zeros(&self.input_shape), y)
    }

    /// Differentiable `A^T y` for linear operators.
    pub fn adjoint_var<'t>(&self, y: Var<'t>) -> Result<Var<'t>> {
        let value = self.adjoint(&y.value())?;
        let op = self.clone();
        y.tape().custom(&[y], value, move |g| {
            vec![op.apply(g).expect("cotangent has the operator input shape")]
        })
    }

    /// Dense matrix `[m, n]` of a linear operator.
    pub fn matrix(&self) -> Result<Vec<f64>> {
        if !self.is_linear() {
            return Err(Error::invalid("matrix requested for a nonlinear operator"));
        }
        let n: usize = self.input_shape.iter().product();
        let m: usize = self.output_shape.iter().product();
        let mut out = vec![0.0; m * n];
        for j in 0..n {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            let col = self.apply(&Tensor::new(self.input_shape.clone(), e)?)?;
            for (i, v) in col.data().iter().enumerate() {
                out[i * n + j] = *v;
            }
        }
        Ok(out)
    }

    /// `y = A(x) + sigma_y * noise`, noise drawn from `seed`.
    pub fn forward(&self, x: &Tensor, seed: u64) -> Result<Measurement> {
        let clean = self.apply(x)?;
        let y = if self.sigma_y == 0.0 {
            clean
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noise = Tensor::randn(clean.shape(), &mut rng);
            clean.axpy(self.sigma_y, &noise)?
        };
        Ok(Measurement {
            y,
            seed,
            sigma_y: self.sigma_y,
        })
    }
}
