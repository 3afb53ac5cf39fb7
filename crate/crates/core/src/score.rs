//! Score models: the exact mixture score and a trained noise predictor.

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
use crate::gmm::GmmPrior;
use crate::nn::{time_embedding, Activation, Adam, Layer, Sequential};
use crate::schedule::{Level, NoiseSchedule};
use crate::tensor::Tensor;

/// Noise-prediction network conditioned on a sinusoidal step embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser {
    pub net: Sequential,
    pub embed_dim: usize,
    pub trained: bool,
}

impl Denoiser {
    /// MLP for vectors `[d]`, conv net for grids `[C, H, W]`.
    pub fn for_shape<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Result<Self> {
        let embed_dim = 32;
        let silu = Layer::Act { kind: Activation::Silu };
        let layers = match *shape {
            [d] => {
                let hidden = 128;
                let mut l = Vec::new();
                let mut width = d;
                for _ in 0..3 {
                    l.push(Layer::Dense {
                        inputs: width,
                        outputs: hidden,
                    });
                    l.push(Layer::CondBias {
                        cond_dim: embed_dim,
                        channels: hidden,
                    });
                    l.push(silu.clone());
                    width = hidden;
                }
                l.push(Layer::Dense {
                    inputs: hidden,
                    outputs: d,
                });
                l
            }
            [c, _, _] => {
                let ch = 32;
                let conv = |i, o| Layer::Conv {
                    in_channels: i,
                    out_channels: o,
                    kernel: 3,
                    padding: Padding::Zero,
                };
                let mut l = Vec::new();
                let mut width = c;
                for _ in 0..3 {
                    l.push(conv(width, ch));
                    l.push(Layer::CondBias {
                        cond_dim: embed_dim,
                        channels: ch,
                    });
                    l.push(silu.clone());
                    width = ch;
                }
                l.push(conv(ch, c));
                l
            }
            _ => return Err(Error::invalid("denoiser supports [d] or [C, H, W] samples")),
        };
        Ok(Denoiser {
            net: Sequential::new(shape.to_vec(), layers, rng)?,
            embed_dim,
            trained: false,
        })
    }

    fn embedding(&self, timesteps: &[usize]) -> Tensor {
        let data = timesteps
            .iter()
            .flat_map(|&t| time_embedding(t, self.embed_dim))
            .collect();
        Tensor::from_parts(vec![timesteps.len(), self.embed_dim], data)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ScoreKind {
    AnalyticGmm(Arc<GmmPrior>),
    Denoiser(Denoiser),
}

/// `s(x_t, t)` approximating the gradient of the log time-marginal.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreModel {
    pub kind: ScoreKind,
    pub schedule: NoiseSchedule,
    pub sample_shape: Vec<usize>,
}

impl ScoreModel {
    /// Exact score of a mixture prior; samples take `shape` (numel must match).
    pub fn analytic(prior: GmmPrior, schedule: NoiseSchedule, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != prior.dim() {
            return Err(Error::shape("analytic score", &[prior.dim()], &shape));
        }
        Ok(ScoreModel {
            kind: ScoreKind::AnalyticGmm(Arc::new(prior)),
            schedule,
            sample_shape: shape,
        })
    }

    pub fn is_trained(&self) -> bool {
        match &self.kind {
            ScoreKind::AnalyticGmm(_) => true,
            ScoreKind::Denoiser(d) => d.trained,
        }
    }

    fn check(&self, shape: &[usize]) -> Result<()> {
        if shape != self.sample_shape.as_slice() {
            return Err(Error::shape("score", &self.sample_shape, shape));
        }
        Ok(())
    }

    pub fn score(&self, x: &Tensor, level: Level) -> Result<Tensor> {
        self.check(x.shape())?;
        match &self.kind {
            ScoreKind::AnalyticGmm(p) => {
                let s = p.score(x.data(), level.alpha_bar)?;
                Tensor::new(x.shape().to_vec(), s)
            }
            ScoreKind::Denoiser(_) => {
                let eps = self.eps(x, level)?;
                Ok(eps.scale(-1.0 / libm::sqrt(1.0 - level.alpha_bar)))
            }
        }
    }

    /// Predicted noise, `-sqrt(1 - a) * score` for the analytic model.
    pub fn eps(&self, x: &Tensor, level: Level) -> Result<Tensor> {
        self.check(x.shape())?;
        match &self.kind {
            ScoreKind::AnalyticGmm(_) => Ok(self.score(x, level)?.scale(-libm::sqrt(1.0 - level.alpha_bar))),
            ScoreKind::Denoiser(d) => {
                let c = d.embedding(&[level.timestep]);
                d.net.eval(x, Some(&c))
            }
        }
    }

    /// Differentiable score; the analytic model backpropagates through its
    /// exact Hessian.
    pub fn score_var<'t>(&self, x: Var<'t>, level: Level) -> Result<Var<'t>> {
        self.check(&x.shape())?;
        match &self.kind {
            ScoreKind::AnalyticGmm(p) => {
                let xv = x.value();
                let eval = p.score_eval(xv.data(), level.alpha_bar)?;
                let value = Tensor::new(xv.shape().to_vec(), eval.score.clone())?;
                let prior = p.clone();
                let shape = xv.shape().to_vec();
                x.tape().custom(&[x], value, move |g| {
                    let hv = prior.hessian_vector(&eval, g.data());
                    vec![Tensor::from_parts(shape.clone(), hv)]
                })
            }
            ScoreKind::Denoiser(d) => {
                let c = x.tape().constant(d.embedding(&[level.timestep]))?;
                let eps = d.net.apply(x, Some(c))?;
                eps.mul_scalar(-1.0 / libm::sqrt(1.0 - level.alpha_bar))
            }
        }
    }

    /// Posterior mean `(x + (1 - a) s) / sqrt(a)`.
    pub fn tweedie(&self, x: &Tensor, level: Level) -> Result<Tensor> {
        let a = level.alpha_bar;
        let s = self.score(x, level)?;
        Ok(x.lincomb(1.0, &s, 1.0 - a)?.scale(1.0 / libm::sqrt(a)))
    }

    pub fn tweedie_var<'t>(&self, x: Var<'t>, level: Level) -> Result<Var<'t>> {
        let a = level.alpha_bar;
        let s = self.score_var(x, level)?;
        x.add(s.mul_scalar(1.0 - a)?)?.mul_scalar(1.0 / libm::sqrt(a))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch: 64,
            lr: 2e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub losses: Vec<f64>,
}

impl TrainReport {
    /// Mean loss over the last tenth of training relative to the loss at
    /// initialization.
    pub fn reduction(&self) -> f64 {
        self.final_loss / self.initial_loss
    }
}

fn window_mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Denoising score matching on `mean((eps_hat - eps)^2)` with Adam.
pub fn train_denoiser<R: Rng + ?Sized>(
    data: &[Tensor],
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(ScoreModel, TrainReport)> {
    let first = data.first().ok_or_else(|| Error::invalid("empty training set"))?;
    let shape = first.shape().to_vec();
    if data.iter().any(|x| x.shape() != shape.as_slice()) {
        return Err(Error::invalid("training samples have mixed shapes"));
    }
    if cfg.batch == 0 || !(cfg.lr > 0.0) {
        return Err(Error::invalid("batch must be positive and lr > 0"));
    }
    let mut den = Denoiser::for_shape(&shape, rng)?;
    let mut opt = Adam::new(cfg.lr);
    let numel = first.numel();
    let mut batched = vec![cfg.batch];
    batched.extend_from_slice(&shape);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut x0 = Vec::with_capacity(cfg.batch * numel);
        for _ in 0..cfg.batch {
            if cursor == order.len() {
                order.shuffle(rng);
                cursor = 0;
            }
            x0.extend_from_slice(data[order[cursor]].data());
            cursor += 1;
        }
        let ts: Vec<usize> = (0..cfg.batch).map(|_| rng.random_range(1..=schedule.len())).collect();
        let eps: Vec<f64> = (0..x0.len()).map(|_| rng.sample(StandardNormal)).collect();
        let mut xt = Vec::with_capacity(x0.len());
        for (b, &t) in ts.iter().enumerate() {
            let a = schedule.alpha_bar(t);
            let (sa, sn) = (libm::sqrt(a), libm::sqrt(1.0 - a));
            for j in 0..numel {
                let i = b * numel + j;
                xt.push(sa * x0[i] + sn * eps[i]);
            }
        }
        let timesteps: Vec<usize> = ts.iter().map(|&t| schedule.timestep(t)).collect();
        let tape = Tape::new();
        let params = den.net.bind(&tape, true)?;
        let x = tape.constant(Tensor::new(batched.clone(), xt)?)?;
        let c = tape.constant(den.embedding(&timesteps))?;
        let target = tape.constant(Tensor::new(batched.clone(), eps)?)?;
        let loss = den.net.forward(x, Some(c), &params)?.sub(target)?.square()?.mean()?;
        let lv = loss.value().item()?;
        if !lv.is_finite() {
            return Err(Error::Divergence {
                step,
                detail: "denoiser loss is not finite".into(),
            });
        }
        losses.push(lv);
        let g = tape.backward(loss)?;
        let grads = params.iter().map(|p| g.wrt(p)).collect::<Result<Vec<_>>>()?;
        opt.step(den.net.params_mut(), &grads)?;
    }
    let w = (cfg.steps / 10).max(1);
    let report = TrainReport {
        initial_loss: losses.first().copied().unwrap_or(f64::NAN),
        final_loss: window_mean(&losses[losses.len().saturating_sub(w)..]),
        losses,
    };
    den.trained = cfg.steps > 0;
    Ok((
        ScoreModel {
            kind: ScoreKind::Denoiser(den),
            schedule: schedule.clone(),
            sample_shape: shape,
        },
        report,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check_gradient;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sched() -> NoiseSchedule {
        NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap()
    }

    #[test]
    fn tweedie_standard_normal_quarter() {
        let m = ScoreModel::analytic(GmmPrior::standard(2).unwrap(), sched(), vec![2]).unwrap();
        let lvl = Level {
            timestep: 1,
            alpha_bar: 0.25,
        };
        let x0 = m.tweedie(&Tensor::vector(vec![1.0, 0.0]).unwrap(), lvl).unwrap();
        assert!((x0.data()[0] - 0.5).abs() < 1e-15);
        assert_eq!(x0.data()[1], 0.0);
    }

    #[test]
    fn tweedie_gaussian_closed_form_all_t() {
        // N(m, s^2 I): E[x0 | xt] = m + s^2 sqrt(a) (xt - sqrt(a) m) / (a s^2 + 1 - a)
        let (m, s2) = (vec![0.3, -1.2, 2.0], 0.7);
        let cov: Vec<f64> = (0..9).map(|i| if i % 4 == 0 { s2 } else { 0.0 }).collect();
        let sch = sched();
        let model = ScoreModel::analytic(GmmPrior::gaussian(m.clone(), cov).unwrap(), sch.clone(), vec![3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for t in 1..=1000 {
            let x = Tensor::randn(&[3], &mut rng);
            let a = sch.alpha_bar(t);
            let got = model.tweedie(&x, sch.level(t)).unwrap();
            for i in 0..3 {
                let want = m[i] + s2 * a.sqrt() * (x.data()[i] - a.sqrt() * m[i]) / (a * s2 + 1.0 - a);
                assert!((got.data()[i] - want).abs() < 1e-6, "t={t}");
            }
        }
    }

    #[test]
    fn analytic_score_var_gradient() {
        let prior = GmmPrior::new(
            vec![0.4, 0.6],
            vec![vec![1.0, 0.5], vec![-1.0, 0.2]],
            vec![vec![0.3, 0.1, 0.1, 0.2], vec![0.5, -0.2, -0.2, 0.4]],
        )
        .unwrap();
        let model = ScoreModel::analytic(prior, sched(), vec![2]).unwrap();
        let lvl = sched().level(300);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let x = Tensor::randn(&[2], &mut rng);
            let err = check_gradient(|v| model.tweedie_var(v, lvl)?.square()?.sum(), &x, 1e-5).unwrap();
            assert!(err < 1e-4, "{err}");
        }
    }

    #[test]
    fn untrained_when_no_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let data = vec![Tensor::vector(vec![1.0, 2.0]).unwrap()];
        let cfg = TrainConfig {
            steps: 0,
            ..Default::default()
        };
        let (m, _) = train_denoiser(&data, &sched(), &cfg, &mut rng).unwrap();
        assert!(!m.is_trained());
        assert!(train_denoiser(&[], &sched(), &cfg, &mut rng).is_err());
    }

    #[test]
    fn denoiser_score_var_matches_eval() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = Denoiser::for_shape(&[1, 4, 4], &mut rng).unwrap();
        let m = ScoreModel {
            kind: ScoreKind::Denoiser(d),
            schedule: sched(),
            sample_shape: vec![1, 4, 4],
        };
        let x = Tensor::randn(&[1, 4, 4], &mut rng);
        let lvl = sched().level(500);
        let tape = Tape::new();
        let v = m.score_var(tape.constant(x.clone()).unwrap(), lvl).unwrap();
        assert!(v.value().sub(&m.score(&x, lvl).unwrap()).unwrap().max_abs() < 1e-12);
        let err = check_gradient(|v| m.tweedie_var(v, lvl)?.norm_sq(), &x, 1e-5).unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
