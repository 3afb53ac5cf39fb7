//! Manifold-preferential equivariant (MPE) functions and the losses built
//! from them.

use alloc::boxed::Box;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::conv::Padding;
use crate::error::{Error, Result};
use crate::groups::GroupAction;
use crate::measure::MeasurementOperator;
use crate::nn::{Activation, Adam, Layer, Sequential};
use crate::tensor::Tensor;

/// A map the tape can differentiate through.
pub trait DiffMap: Send + Sync + core::fmt::Debug {
    fn forward<'t>(&self, x: Var<'t>) -> Result<Var<'t>>;

    fn eval(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let out = self.forward(tape.constant(x.clone())?)?;
        Ok((*out.value()).clone())
    }
}

impl DiffMap for Sequential {
    fn forward<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        self.apply(x, None)
    }
}

impl DiffMap for MeasurementOperator {
    fn forward<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        self.apply_var(x)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct IdentityMap;

impl DiffMap for IdentityMap {
    fn forward<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        Ok(x)
    }
}

/// `maps[n-1] o ... o maps[0]`.
#[derive(Debug, Clone)]
pub struct Chain(pub Vec<Arc<dyn DiffMap>>);

impl DiffMap for Chain {
    fn forward<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        self.0.iter().try_fold(x, |h, m| m.forward(h))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Norm {
    #[default]
    SquaredL2,
    L2,
}

impl Norm {
    pub fn apply<'t>(self, v: Var<'t>) -> Result<Var<'t>> {
        match self {
            Norm::SquaredL2 => v.norm_sq(),
            Norm::L2 => v.norm(),
        }
    }

    pub fn of(self, t: &Tensor) -> f64 {
        match self {
            Norm::SquaredL2 => t.norm_sq(),
            Norm::L2 => t.norm(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ElementPolicy {
    #[default]
    RandomPerCall,
    Fixed(usize),
}

/// Weight, schedule and form of the equivariance penalty.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default, rename_all = "kebab-case")]
pub struct EquiLossConfig {
    pub lambda: f64,
    /// Fraction of final steps with the penalty switched off.
    pub early_stop: f64,
    /// Apply on every `period`-th active step.
    pub period: usize,
    pub norm: Norm,
    pub element: ElementPolicy,
}

impl Default for EquiLossConfig {
    fn default() -> Self {
        EquiLossConfig {
            lambda: 0.0,
            early_stop: 0.1,
            period: 1,
            norm: Norm::SquaredL2,
            element: ElementPolicy::RandomPerCall,
        }
    }
}

impl EquiLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::invalid("lambda must be finite and non-negative"));
        }
        if self.period == 0 {
            return Err(Error::invalid("period must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.early_stop) {
            return Err(Error::invalid("early_stop must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn draw<R: Rng + ?Sized>(&self, action: &GroupAction, rng: &mut R) -> Result<usize> {
        match self.element {
            ElementPolicy::RandomPerCall => action.random_element(rng),
            ElementPolicy::Fixed(g) => {
                if g >= action.order() {
                    return Err(Error::invalid("fixed element outside the group"));
                }
                Ok(g)
            }
        }
    }
}

/// `f` with optional paired inverse `h` and the action pairing `(T_g, S_g)`.
#[derive(Clone, Debug)]
pub struct MpeFunction {
    pub f: Arc<dyn DiffMap>,
    pub h: Option<Arc<dyn DiffMap>>,
    pub action: GroupAction,
}

impl MpeFunction {
    pub fn new(f: Arc<dyn DiffMap>, h: Option<Arc<dyn DiffMap>>, action: GroupAction) -> Self {
        MpeFunction { f, h, action }
    }

    /// `S_g(f(z)) - f(T_g(z))` on the tape.
    pub fn equi_residual<'t>(&self, g: usize, z: Var<'t>) -> Result<Var<'t>> {
        let fz = self.f.forward(z)?;
        let lhs = self.action.apply_codomain_var(g, fz)?;
        let rhs = self.f.forward(self.action.apply_domain_var(g, z)?)?;
        if lhs.shape() != rhs.shape() {
            return Err(Error::shape("equivariance error", &lhs.shape(), &rhs.shape()));
        }
        lhs.sub(rhs)
    }

    /// `||S_g(f(z)) - f(T_g(z))||` under `norm`.
    pub fn equi_error(&self, g: usize, z: &Tensor, norm: Norm) -> Result<f64> {
        let tape = Tape::new();
        let r = self.equi_residual(g, tape.constant(z.clone())?)?;
        Ok(norm.of(&r.value()))
    }

    /// Differentiable equivariance penalty at element `g`.
    pub fn equi_loss<'t>(&self, g: usize, x: Var<'t>, norm: Norm) -> Result<Var<'t>> {
        norm.apply(self.equi_residual(g, x)?)
    }

    /// `||z - h(S_g^{-1}(f(T_g(z))))||` under `norm`.
    pub fn equicon_loss<'t>(&self, g: usize, z: Var<'t>, norm: Norm) -> Result<Var<'t>> {
        let h = self
            .h
            .as_ref()
            .ok_or_else(|| Error::invalid("manifold-constrained loss needs a paired inverse map"))?;
        let moved = self.f.forward(self.action.apply_domain_var(g, z)?)?;
        let back = self.action.apply_codomain_var(self.action.inverse(g), moved)?;
        let round = h.forward(back)?;
        if round.shape() != z.shape() {
            return Err(Error::shape("equicon", &z.shape(), &round.shape()));
        }
        norm.apply(z.sub(round)?)
    }

    pub fn equicon_error(&self, g: usize, z: &Tensor, norm: Norm) -> Result<f64> {
        let tape = Tape::new();
        let l = self.equicon_loss(g, tape.constant(z.clone())?, norm)?;
        l.value().item()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum MpeRole {
    #[default]
    Encoder,
    Decoder,
    FullAutoencoder,
}

/// Network family; `Auto` picks dense for vectors and convolutional for grids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AutoencoderArch {
    #[default]
    Auto,
    Dense,
    Conv,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default, rename_all = "kebab-case")]
pub struct AutoencoderConfig {
    pub arch: AutoencoderArch,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub augment: bool,
    /// Latent width for vector data; latent channels for grids.
    pub latent: usize,
    /// Hidden width (vectors) or channels (grids).
    pub hidden: usize,
    pub holdout: f64,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        AutoencoderConfig {
            arch: AutoencoderArch::Auto,
            steps: 1500,
            batch: 32,
            lr: 3e-3,
            augment: true,
            latent: 2,
            hidden: 16,
            holdout: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderReport {
    pub final_loss: f64,
    pub heldout_mse: f64,
    pub data_variance: f64,
    /// Held-out MSE at most a tenth of the data variance.
    pub within_tolerance: bool,
    pub augmented: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Autoencoder {
    pub encoder: Sequential,
    pub decoder: Sequential,
    pub report: AutoencoderReport,
}

/// Encoder/decoder layer stacks for `shape`.
pub fn autoencoder_layers(shape: &[usize], cfg: &AutoencoderConfig) -> Result<(Vec<usize>, Vec<Layer>, Vec<Layer>)> {
    let act = Layer::Act { kind: Activation::Tanh };
    let dense = match cfg.arch {
        AutoencoderArch::Auto => shape.len() == 1,
        AutoencoderArch::Dense => true,
        AutoencoderArch::Conv => false,
    };
    if !dense && shape.len() != 3 {
        return Err(Error::invalid("convolutional autoencoder needs [C, H, W] data"));
    }
    if dense && shape.len() != 1 {
        let d: usize = shape.iter().product();
        let (latent, mut enc, mut dec) = autoencoder_layers(&[d], cfg)?;
        enc.insert(0, Layer::Reshape { shape: vec![d] });
        dec.push(Layer::Reshape { shape: shape.to_vec() });
        return Ok((latent, enc, dec));
    }
    match *shape {
        [d] => {
            if cfg.latent >= d {
                return Err(Error::invalid("latent width must be smaller than the data dimension"));
            }
            let h = cfg.hidden;
            let enc = vec![
                Layer::Dense { inputs: d, outputs: h },
                act.clone(),
                Layer::Dense { inputs: h, outputs: h },
                act.clone(),
                Layer::Dense { inputs: h, outputs: cfg.latent },
            ];
            let dec = vec![
                Layer::Dense { inputs: cfg.latent, outputs: h },
                act.clone(),
                Layer::Dense { inputs: h, outputs: h },
                act,
                Layer::Dense { inputs: h, outputs: d },
            ];
            Ok((vec![cfg.latent], enc, dec))
        }
        [c, hh, ww] => {
            if hh % 2 != 0 || ww % 2 != 0 {
                return Err(Error::invalid("grid autoencoder needs even spatial size"));
            }
            if cfg.latent * hh * ww / 4 >= c * hh * ww {
                return Err(Error::invalid("latent size must be smaller than the data size"));
            }
            let conv = |i, o| Layer::Conv {
                in_channels: i,
                out_channels: o,
                kernel: 3,
                padding: Padding::Zero,
            };
            let silu = Layer::Act { kind: Activation::Silu };
            let h = cfg.hidden;
            let enc = vec![conv(c, h), silu.clone(), Layer::Downsample { factor: 2 }, conv(h, cfg.latent)];
            let dec = vec![
                conv(cfg.latent, h),
                silu.clone(),
                Layer::Upsample { factor: 2 },
                conv(h, h),
                silu,
                conv(h, c),
            ];
            Ok((vec![cfg.latent, hh / 2, ww / 2], enc, dec))
        }
        _ => Err(Error::invalid("autoencoder supports [d] or [C, H, W] data")),
    }
}

/// Trains an autoencoder on reconstruction loss; each batch element is
/// transformed by the identity with probability 1/2 and otherwise by a
/// uniformly drawn non-identity element.
pub fn train_autoencoder_augmented<R: Rng + ?Sized>(
    data: &[Tensor],
    action: &GroupAction,
    cfg: &AutoencoderConfig,
    rng: &mut R,
) -> Result<Autoencoder> {
    let first = data.first().ok_or_else(|| Error::invalid("empty training set"))?;
    let shape = first.shape().to_vec();
    if data.iter().any(|x| x.shape() != shape.as_slice()) {
        return Err(Error::invalid("training samples have mixed shapes"));
    }
    if cfg.batch == 0 || !(0.0..1.0).contains(&cfg.holdout) {
        return Err(Error::invalid("bad autoencoder training config"));
    }
    let (latent_shape, enc_layers, dec_layers) = autoencoder_layers(&shape, cfg)?;
    let mut encoder = Sequential::new(shape.clone(), enc_layers, rng)?;
    let mut decoder = Sequential::new(latent_shape, dec_layers, rng)?;

    let n_hold = ((data.len() as f64) * cfg.holdout) as usize;
    let n_train = data.len() - n_hold;
    if n_train == 0 {
        return Err(Error::invalid("no training samples left after holdout"));
    }
    let (train, held) = data.split_at(n_train);
    let numel = first.numel();
    let mut batched = vec![cfg.batch];
    batched.extend_from_slice(&shape);
    let mut opt = Adam::new(cfg.lr);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let mut tail = Vec::new();
    for step in 0..cfg.steps {
        let mut buf = Vec::with_capacity(cfg.batch * numel);
        for _ in 0..cfg.batch {
            if cursor == order.len() {
                order.shuffle(rng);
                cursor = 0;
            }
            let x = &train[order[cursor]];
            cursor += 1;
            let g = if cfg.augment && action.order() > 1 && rng.random::<bool>() {
                action.random_element(rng)?
            } else {
                0
            };
            let xg = if g == 0 { x.clone() } else { action.apply_domain(g, x)? };
            buf.extend_from_slice(xg.data());
        }
        let tape = Tape::new();
        let pe = encoder.bind(&tape, true)?;
        let pd = decoder.bind(&tape, true)?;
        let x = tape.constant(Tensor::new(batched.clone(), buf)?)?;
        let z = encoder.forward(x, None, &pe)?;
        let loss = decoder.forward(z, None, &pd)?.sub(x)?.square()?.mean()?;
        let lv = loss.value().item()?;
        if !lv.is_finite() {
            return Err(Error::Divergence {
                step,
                detail: "autoencoder loss is not finite".into(),
            });
        }
        if step + 10 >= cfg.steps {
            tail.push(lv);
        }
        let g = tape.backward(loss)?;
        let mut grads = Vec::with_capacity(pe.len() + pd.len());
        for p in pe.iter().chain(&pd) {
            grads.push(g.wrt(p)?);
        }
        let (ge, gd) = grads.split_at(pe.len());
        let mut all: Vec<Arc<Tensor>> = encoder.params().to_vec();
        all.extend(decoder.params().iter().cloned());
        let mut all_grads = ge.to_vec();
        all_grads.extend_from_slice(gd);
        opt.step(&mut all, &all_grads)?;
        let (ne, nd) = all.split_at(pe.len());
        encoder.params_mut().clone_from_slice(ne);
        decoder.params_mut().clone_from_slice(nd);
    }

    let eval_set = if held.is_empty() { train } else { held };
    let mut mse = 0.0;
    for x in eval_set {
        let r = decoder.eval(&encoder.eval(x, None)?, None)?;
        mse += r.dist_sq(x)? / numel as f64;
    }
    mse /= eval_set.len() as f64;
    let variance = data_variance(eval_set);
    let report = AutoencoderReport {
        final_loss: tail.iter().sum::<f64>() / tail.len().max(1) as f64,
        heldout_mse: mse,
        data_variance: variance,
        within_tolerance: mse <= 0.1 * variance,
        augmented: cfg.augment,
    };
    Ok(Autoencoder {
        encoder,
        decoder,
        report,
    })
}

/// Mean over coordinates of the per-coordinate variance.
pub fn data_variance(data: &[Tensor]) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let n = data.len() as f64;
    let d = data[0].numel();
    let mut total = 0.0;
    for j in 0..d {
        let m = data.iter().map(|x| x.data()[j]).sum::<f64>() / n;
        total += data.iter().map(|x| { let e = x.data()[j] - m; e * e }).sum::<f64>() / n;
    }
    total / d as f64
}

impl Autoencoder {
    /// MPE function in the requested role; `h` is the opposite half.
    pub fn mpe(&self, role: MpeRole, action: GroupAction) -> MpeFunction {
        let e: Arc<dyn DiffMap> = Arc::new(self.encoder.clone());
        let d: Arc<dyn DiffMap> = Arc::new(self.decoder.clone());
        match role {
            MpeRole::Encoder => MpeFunction::new(e, Some(d), action),
            MpeRole::Decoder => MpeFunction::new(d, Some(e), action),
            MpeRole::FullAutoencoder => MpeFunction::new(Arc::new(Chain(vec![e, d])), None, action),
        }
    }
}

/// One row of an equivariance-error sweep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub sigma: f64,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

/// Equivariance error of noise-perturbed data, one random element per datum.
pub fn mpe_sweep<R: Rng + ?Sized>(
    m: &MpeFunction,
    data: &[Tensor],
    noise_levels: &[f64],
    norm: Norm,
    rng: &mut R,
) -> Result<Vec<SweepRow>> {
    if data.is_empty() {
        return Err(Error::invalid("sweep needs data"));
    }
    if noise_levels.first() != Some(&0.0) || noise_levels.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("noise levels must start at 0 and increase"));
    }
    let mut rows = Vec::with_capacity(noise_levels.len());
    for &sigma in noise_levels {
        let mut errs = Vec::with_capacity(data.len());
        for x in data {
            let z = if sigma == 0.0 {
                x.clone()
            } else {
                let noise: Vec<f64> = (0..x.numel()).map(|_| rng.sample(StandardNormal)).collect();
                x.axpy(sigma, &Tensor::new(x.shape().to_vec(), noise)?)?
            };
            let g = m.action.random_element(rng)?;
            errs.push(m.equi_error(g, &z, norm)?);
        }
        let n = errs.len();
        let mean = errs.iter().sum::<f64>() / n as f64;
        let var = errs.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n as f64;
        rows.push(SweepRow {
            sigma,
            mean,
            std: libm::sqrt(var),
            n,
        });
    }
    Ok(rows)
}

/// Closure-backed map, handy for analytic test functions.
pub struct FnMap(pub Box<dyn for<'t> Fn(Var<'t>) -> Result<Var<'t>> + Send + Sync>);

impl core::fmt::Debug for FnMap {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str("FnMap")
    }
}

impl DiffMap for FnMap {
    fn forward<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        (self.0)(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check_gradient;
    use crate::groups::Transform;
    use crate::measure::OperatorSpec;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn negation() -> GroupAction {
        GroupAction::new(Transform::Negate).unwrap()
    }

    #[test]
    fn identity_map_is_exactly_equivariant() {
        let m = MpeFunction::new(Arc::new(IdentityMap), Some(Arc::new(IdentityMap)), negation());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z = Tensor::randn(&[5], &mut rng);
        assert_eq!(m.equi_error(1, &z, Norm::L2).unwrap(), 0.0);
        assert_eq!(m.equicon_error(1, &z, Norm::SquaredL2).unwrap(), 0.0);
        assert_eq!(m.equicon_error(0, &z, Norm::SquaredL2).unwrap(), 0.0);
    }

    #[test]
    fn square_map_under_negation() {
        let f = FnMap(Box::new(|x: Var<'_>| x.square()));
        let m = MpeFunction::new(Arc::new(f), None, negation());
        let z = Tensor::vector(vec![1.0, 2.0]).unwrap();
        assert!((m.equi_error(1, &z, Norm::SquaredL2).unwrap() - 68.0).abs() < 1e-12);
        assert!((m.equi_error(1, &z, Norm::L2).unwrap() - 68f64.sqrt()).abs() < 1e-12);
        assert!(m.equicon_error(1, &z, Norm::L2).is_err());
    }

    #[test]
    fn circular_blur_has_zero_error() {
        let a = MeasurementOperator::new(
            OperatorSpec::GaussianBlur {
                kernel: 3,
                sigma: 0.8,
                padding: Padding::Circular,
            },
            &[6, 6],
            0.0,
        )
        .unwrap();
        let act = GroupAction::new(Transform::CyclicTranslate { shift: 2, length: 6 }).unwrap();
        let m = MpeFunction::new(Arc::new(a), None, act);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = Tensor::randn(&[6, 6], &mut rng);
        for g in 0..3 {
            assert_eq!(m.equi_error(g, &z, Norm::L2).unwrap(), 0.0);
        }
    }

    #[test]
    fn equi_loss_gradient_dim16() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = AutoencoderConfig {
            latent: 3,
            hidden: 8,
            ..Default::default()
        };
        let (ls, enc, dec) = autoencoder_layers(&[16], &cfg).unwrap();
        let e = Sequential::new(vec![16], enc, &mut rng).unwrap();
        let d = Sequential::new(ls, dec, &mut rng).unwrap();
        let act = GroupAction::new(Transform::FlipH).unwrap();
        let m = MpeFunction::new(Arc::new(e), Some(Arc::new(d)), act.clone());
        for _ in 0..10 {
            let x = Tensor::randn(&[16], &mut rng);
            let err = check_gradient(|v| m.equi_loss(1, v, Norm::SquaredL2), &x, 1e-5).unwrap();
            assert!(err < 1e-4, "{err}");
        }
        // decoder role: latent input of dim 3 reversed
        let dm = MpeFunction::new(m.h.clone().unwrap(), Some(m.f.clone()), act);
        for _ in 0..10 {
            let z = Tensor::randn(&[3], &mut rng);
            let err = check_gradient(|v| dm.equicon_loss(1, v, Norm::SquaredL2), &z, 1e-5).unwrap();
            assert!(err < 1e-4, "{err}");
        }
    }

    #[test]
    fn sweep_validates_levels() {
        let m = MpeFunction::new(Arc::new(IdentityMap), None, GroupAction::new(Transform::FlipH).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let data = vec![Tensor::vector(vec![1.0, 2.0]).unwrap(); 3];
        assert!(mpe_sweep(&m, &data, &[0.1], Norm::L2, &mut rng).is_err());
        let rows = mpe_sweep(&m, &data, &[0.0, 0.5], Norm::L2, &mut rng).unwrap();
        assert!(rows.iter().all(|r| r.mean == 0.0 && r.n == 3));
        assert!(mpe_sweep(&m, &[], &[0.0], Norm::L2, &mut rng).is_err());
    }

    #[test]
    fn latent_must_be_smaller() {
        let cfg = AutoencoderConfig {
            latent: 4,
            ..Default::default()
        };
        assert!(autoencoder_layers(&[4], &cfg).is_err());
    }
}
