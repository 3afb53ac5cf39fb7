//! Reverse-diffusion posterior samplers with optional equivariance
//! regularization.
//!
//! All samplers share one layout: a main random stream (initial state and
//! per-step noise) and a separate stream for group-element draws, so that a
//! zero-weight regularizer leaves the trajectory bit-identical to the
//! unregularized sampler.

use alloc::sync::Arc;
use alloc::vec::Vec;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::measure::MeasurementOperator;
use crate::mpe::{DiffMap, EquiLossConfig, MpeFunction, Norm};
use crate::nn::Adam;
use crate::schedule::NoiseSchedule;
use crate::score::ScoreModel;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    Ancestral,
    Ddim,
    Dps,
    EquiDps,
    /// Latent DPS with gluing; the regularizer is off unless `lambda > 0`.
    Psld,
    EquiPsld,
    EquiconPsld,
    Resample,
    EquiResample,
    EquiconResample,
    Sitcom,
    EquiSitcom,
}

impl Algorithm {
    pub fn is_latent(self) -> bool {
        matches!(
            self,
            Algorithm::Psld
                | Algorithm::EquiPsld
                | Algorithm::EquiconPsld
                | Algorithm::Resample
                | Algorithm::EquiResample
                | Algorithm::EquiconResample
        )
    }

    pub fn needs_measurement(self) -> bool {
        !matches!(self, Algorithm::Ancestral | Algorithm::Ddim)
    }

    /// Whether the regularizer is the manifold-constrained form.
    pub fn is_equicon(self) -> bool {
        matches!(self, Algorithm::EquiconPsld | Algorithm::EquiconResample)
    }

    /// Whether the algorithm carries an equivariance regularizer.
    pub fn is_regularized(self) -> bool {
        self.baseline() != self
    }

    /// Unregularized counterpart.
    pub fn baseline(self) -> Algorithm {
        match self {
            Algorithm::EquiDps => Algorithm::Dps,
            Algorithm::EquiPsld | Algorithm::EquiconPsld => Algorithm::Psld,
            Algorithm::EquiResample | Algorithm::EquiconResample => Algorithm::Resample,
            Algorithm::EquiSitcom => Algorithm::Sitcom,
            a => a,
        }
    }

    fn default_norm(self) -> Norm {
        match self {
            Algorithm::Psld | Algorithm::EquiPsld | Algorithm::EquiconPsld => Norm::L2,
            _ => Norm::SquaredL2,
        }
    }
}

/// Every knob of every sampler; unused fields are ignored.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default, rename_all = "kebab-case")]
pub struct SamplerConfig {
    pub algorithm: Algorithm,
    /// Number of reverse steps, subsampled from the model schedule.
    pub steps: usize,
    /// Measurement guidance scale.
    pub zeta: f64,
    /// Divide `zeta` by the current residual norm.
    pub zeta_normalized: bool,
    /// Guidance norm; `None` picks squared L2 (unsquared for PSLD).
    pub guidance_norm: Option<Norm>,
    pub eta_psld: f64,
    pub gamma_psld: f64,
    pub gamma_resample: f64,
    /// Resample on every step whose index is a multiple of this (0: never).
    pub resample_every: usize,
    /// Inner loops stop once the squared residual drops below `delta^2`.
    pub delta: f64,
    pub k_meas: usize,
    pub k_equi: usize,
    pub inner_lr: f64,
    /// Weight of the proximity term in the inner measurement objective.
    pub sitcom_lambda: f64,
    pub equi: EquiLossConfig,
    /// Differentiate the regularizer with respect to the posterior mean
    /// only, instead of through the Tweedie map.
    pub detach_regularizer: bool,
    pub ddim_eta: f64,
    pub seed: u64,
    /// Keep per-step states in the trajectory.
    pub record_states: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            algorithm: Algorithm::Ancestral,
            steps: 1000,
            zeta: 1.0,
            zeta_normalized: false,
            guidance_norm: None,
            eta_psld: 1.0,
            gamma_psld: 0.1,
            gamma_resample: 40.0,
            resample_every: 10,
            delta: 0.0,
            k_meas: 10,
            k_equi: 0,
            inner_lr: 0.01,
            sitcom_lambda: 0.0,
            equi: EquiLossConfig::default(),
            detach_regularizer: false,
            ddim_eta: 0.0,
            seed: 0,
            record_states: false,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        self.equi.validate()?;
        if self.steps == 0 {
            return Err(Error::invalid("sampler needs at least one step"));
        }
        let weights = [
            self.zeta,
            self.eta_psld,
            self.gamma_psld,
            self.gamma_resample,
            self.delta,
            self.inner_lr,
            self.sitcom_lambda,
            self.ddim_eta,
        ];
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::invalid("sampler weights must be finite and non-negative"));
        }
        Ok(())
    }

    /// Number of steps (from the start) on which the regularizer may act.
    pub fn active_steps(&self) -> usize {
        let off = libm::floor(self.equi.early_stop * self.steps as f64) as usize;
        self.steps - off.min(self.steps)
    }

    /// Whether the regularizer fires at step counter `k` (0 = first step).
    pub fn regularize_at(&self, k: usize) -> bool {
        let enabled = match self.algorithm {
            Algorithm::EquiSitcom => self.k_equi > 0 && self.equi.lambda > 0.0,
            a => a.is_regularized() && self.equi.lambda > 0.0,
        };
        enabled && k < self.active_steps() && k % self.equi.period == 0
    }

    /// Exact number of regularized steps.
    pub fn expected_regularized_steps(&self) -> usize {
        (0..self.steps).filter(|&k| self.regularize_at(k)).count()
    }
}

/// Encoder/decoder pair for latent samplers.
#[derive(Clone, Debug)]
pub struct Codec {
    pub encoder: Arc<dyn DiffMap>,
    pub decoder: Arc<dyn DiffMap>,
}

/// Everything a sampler reads; ground truth is deliberately absent.
#[derive(Clone, Copy, Debug)]
pub struct Problem<'a> {
    pub model: &'a ScoreModel,
    pub operator: Option<&'a MeasurementOperator>,
    pub y: Option<&'a Tensor>,
    pub mpe: Option<&'a MpeFunction>,
    pub codec: Option<&'a Codec>,
}

impl<'a> Problem<'a> {
    pub fn unconditional(model: &'a ScoreModel) -> Self {
        Problem {
            model,
            operator: None,
            y: None,
            mpe: None,
            codec: None,
        }
    }

    fn measurement(&self) -> Result<(&'a MeasurementOperator, &'a Tensor)> {
        match (self.operator, self.y) {
            (Some(a), Some(y)) => {
                if y.shape() != a.output_shape() {
                    return Err(Error::shape("measurement", a.output_shape(), y.shape()));
                }
                Ok((a, y))
            }
            _ => Err(Error::invalid("sampler needs an operator and a measurement")),
        }
    }

    fn mpe(&self) -> Result<&'a MpeFunction> {
        self.mpe.ok_or_else(|| Error::invalid("regularized sampler needs an MPE function"))
    }

    fn codec(&self) -> Result<&'a Codec> {
        self.codec.ok_or_else(|| Error::invalid("latent sampler needs an encoder/decoder pair"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    /// Step index in the sampling schedule (counts down).
    pub t: usize,
    pub state: Option<Tensor>,
    pub x0: Option<Tensor>,
    /// Squared residual `||y - A(x0|t)||^2` (0 when unconditional).
    pub measurement_loss: f64,
    /// Regularizer value at this step (0 when inactive).
    pub equi_loss: f64,
    pub inner_steps: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub score_evals: usize,
    pub guidance_grads: usize,
    /// Steps on which the regularizer acted.
    pub regularized_steps: usize,
    pub regularizer_grads: usize,
    pub inner_steps: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub records: Vec<StepRecord>,
    /// Final sample in data space.
    pub sample: Tensor,
    /// Final latent for latent samplers.
    pub latent: Option<Tensor>,
    pub counters: Counters,
}

struct Streams {
    main: ChaCha8Rng,
    group: ChaCha8Rng,
}

impl Streams {
    fn new(seed: u64) -> Self {
        let main = ChaCha8Rng::seed_from_u64(seed);
        let mut group = ChaCha8Rng::seed_from_u64(seed);
        group.set_stream(1);
        Streams { main, group }
    }
}

fn finite(t: Tensor, step: usize, what: &str) -> Result<Tensor> {
    if !t.is_finite() {
        return Err(Error::Divergence {
            step,
            detail: alloc::format!("{what} is not finite"),
        });
    }
    Ok(t)
}

fn grad_wrt(tape: &Tape, loss: Var<'_>, wrt: &Var<'_>, step: usize, what: &str) -> Result<Tensor> {
    let g = tape.gradients(loss)?.wrt(wrt)?;
    finite(g, step, what)
}

/// Runs the configured algorithm.
pub fn sample(problem: &Problem<'_>, cfg: &SamplerConfig) -> Result<Trajectory> {
    cfg.validate()?;
    let sched = problem.model.schedule.respace(cfg.steps)?;
    match cfg.algorithm {
        Algorithm::Ancestral | Algorithm::Ddim => unconditional(problem, cfg, &sched),
        Algorithm::Dps | Algorithm::EquiDps => dps(problem, cfg, &sched),
        Algorithm::Psld | Algorithm::EquiPsld | Algorithm::EquiconPsld => psld(problem, cfg, &sched),
        Algorithm::Resample | Algorithm::EquiResample | Algorithm::EquiconResample => resample(problem, cfg, &sched),
        Algorithm::Sitcom | Algorithm::EquiSitcom => sitcom(problem, cfg, &sched),
    }
}

fn check_regularizer(problem: &Problem<'_>, cfg: &SamplerConfig) -> Result<()> {
    if cfg.expected_regularized_steps() > 0 {
        problem.mpe()?;
    }
    Ok(())
}

fn ddim_update(
    x: &Tensor,
    x0: &Tensor,
    sched: &NoiseSchedule,
    i: usize,
    eta: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let (ab, ab_prev) = (sched.alpha_bar(i), sched.alpha_bar(i - 1));
    let eps = x.lincomb(1.0, x0, -libm::sqrt(ab))?.scale(1.0 / libm::sqrt(1.0 - ab));
    let sigma = eta * libm::sqrt((1.0 - ab_prev) / (1.0 - ab)) * libm::sqrt(1.0 - ab / ab_prev);
    let dir = libm::sqrt((1.0 - ab_prev - sigma * sigma).max(0.0));
    let mut out = x0.lincomb(libm::sqrt(ab_prev), &eps, dir)?;
    if sigma > 0.0 {
        out = out.axpy(sigma, &Tensor::randn(x.shape(), rng))?;
    }
    Ok(out)
}

fn ancestral_update(x: &Tensor, x0: &Tensor, sched: &NoiseSchedule, i: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let (c0, ct) = sched.posterior_coefficients(i);
    let mean = x0.lincomb(c0, x, ct)?;
    let s = sched.sigma_tilde(i);
    if s > 0.0 {
        mean.axpy(s, &Tensor::randn(x.shape(), rng))
    } else {
        Ok(mean)
    }
}

fn record(cfg: &SamplerConfig, t: usize, state: &Tensor, x0: &Tensor, meas: f64, equi: f64, inner: usize) -> StepRecord {
    StepRecord {
        t,
        state: cfg.record_states.then(|| state.clone()),
        x0: cfg.record_states.then(|| x0.clone()),
        measurement_loss: meas,
        equi_loss: equi,
        inner_steps: inner,
    }
}

/// DDPM ancestral or DDIM chain without guidance.
pub fn unconditional(problem: &Problem<'_>, cfg: &SamplerConfig, sched: &NoiseSchedule) -> Result<Trajectory> {
    let model = problem.model;
    let mut rng = Streams::new(cfg.seed);
    let mut x = Tensor::randn(&model.sample_shape, &mut rng.main);
    let mut counters = Counters::default();
    let mut records = Vec::with_capacity(sched.len());
    for i in (1..=sched.len()).rev() {
        let x0 = model.tweedie(&x, sched.level(i))?;
        counters.score_evals += 1;
        let next = match cfg.algorithm {
            Algorithm::Ddim => ddim_update(&x, &x0, sched, i, cfg.ddim_eta, &mut rng.main)?,
            _ => ancestral_update(&x, &x0, sched, i, &mut rng.main)?,
        };
        records.push(record(cfg, i, &x, &x0, 0.0, 0.0, 0));
        x = finite(next, i, "sample")?;
    }
    Ok(Trajectory {
        records,
        sample: x,
        latent: None,
        counters,
    })
}

/// DPS and Equi-DPS.
pub fn dps(problem: &Problem<'_>, cfg: &SamplerConfig, sched: &NoiseSchedule) -> Result<Trajectory> {
    let model = problem.model;
    let (op, y) = problem.measurement()?;
    check_regularizer(problem, cfg)?;
    let norm = cfg.guidance_norm.unwrap_or(cfg.algorithm.default_norm());
    let mut rng = Streams::new(cfg.seed);
    let mut x = Tensor::randn(&model.sample_shape, &mut rng.main);
    let mut counters = Counters::default();
    let mut records = Vec::with_capacity(sched.len());
    for (k, i) in (1..=sched.len()).rev().enumerate() {
        let tape = Tape::new();
        let xv = tape.var(x.clone())?;
        let x0v = model.tweedie_var(xv, sched.level(i))?;
        counters.score_evals += 1;
        let x0 = (*x0v.value()).clone();
        let proposal = ancestral_update(&x, &x0, sched, i, &mut rng.main)?;

        let resid = tape.constant(y.clone())?.sub(op.apply_var(x0v)?)?;
        let meas = resid.value().norm_sq();
        let loss = norm.apply(resid)?;
        let g = grad_wrt(&tape, loss, &xv, i, "guidance gradient")?;
        counters.guidance_grads += 1;
        let zeta = if cfg.zeta_normalized {
            cfg.zeta / libm::sqrt(meas).max(1e-12)
        } else {
            cfg.zeta
        };
        let mut next = proposal.axpy(-zeta, &g)?;

        let mut equi = 0.0;
        if cfg.regularize_at(k) {
            let m = problem.mpe()?;
            let el = cfg.equi.draw(&m.action, &mut rng.group)?;
            let (target, wrt) = if cfg.detach_regularizer {
                let leaf = tape.var(x0.clone())?;
                (leaf, leaf)
            } else {
                (x0v, xv)
            };
            let r = m.equi_loss(el, target, cfg.equi.norm)?;
            equi = r.value().item()?;
            let gr = grad_wrt(&tape, r, &wrt, i, "regularizer gradient")?;
            next = next.axpy(-cfg.equi.lambda, &gr)?;
            counters.regularized_steps += 1;
            counters.regularizer_grads += 1;
        }
        records.push(record(cfg, i, &x, &x0, meas, equi, 0));
        x = finite(next, i, "sample")?;
    }
    Ok(Trajectory {
        records,
        sample: x,
        latent: None,
        counters,
    })
}

/// Latent regularizer: equivariance of the decoder, or the
/// manifold-constrained round trip.
fn latent_regularizer<'t>(cfg: &SamplerConfig, m: &MpeFunction, g: usize, z0: Var<'t>) -> Result<Var<'t>> {
    if cfg.algorithm.is_equicon() {
        m.equicon_loss(g, z0, cfg.equi.norm)
    } else {
        m.equi_loss(g, z0, cfg.equi.norm)
    }
}

/// PSLD with measurement, gluing and (Equi/EquiCon) regularization steps.
pub fn psld(problem: &Problem<'_>, cfg: &SamplerConfig, sched: &NoiseSchedule) -> Result<Trajectory> {
    let model = problem.model;
    let (op, y) = problem.measurement()?;
    if !op.is_linear() {
        return Err(Error::invalid("PSLD gluing needs a linear operator"));
    }
    let codec = problem.codec()?;
    check_regularizer(problem, cfg)?;
    let norm = cfg.guidance_norm.unwrap_or(cfg.algorithm.default_norm());
    let aty = op.adjoint(y)?;
    let mut rng = Streams::new(cfg.seed);
    let mut z = Tensor::randn(&model.sample_shape, &mut rng.main);
    let mut counters = Counters::default();
    let mut records = Vec::with_capacity(sched.len());
    for (k, i) in (1..=sched.len()).rev().enumerate() {
        let tape = Tape::new();
        let zv = tape.var(z.clone())?;
        let z0v = model.tweedie_var(zv, sched.level(i))?;
        counters.score_evals += 1;
        let z0 = (*z0v.value()).clone();
        let mut next = ancestral_update(&z, &z0, sched, i, &mut rng.main)?;

        let x0v = codec.decoder.forward(z0v)?;
        let resid = tape.constant(y.clone())?.sub(op.apply_var(x0v)?)?;
        let meas = resid.value().norm_sq();
        if cfg.eta_psld > 0.0 {
            let g = grad_wrt(&tape, norm.apply(resid)?, &zv, i, "measurement gradient")?;
            next = next.axpy(-cfg.eta_psld, &g)?;
            counters.guidance_grads += 1;
        }
        if cfg.gamma_psld > 0.0 {
            // A^T y + (I - A^T A) D(z0), re-encoded
            let ata = op.adjoint_var(op.apply_var(x0v)?)?;
            let glued = tape.constant(aty.clone())?.add(x0v.sub(ata)?)?;
            let gl = z0v.sub(codec.encoder.forward(glued)?)?;
            let g = grad_wrt(&tape, norm.apply(gl)?, &zv, i, "gluing gradient")?;
            next = next.axpy(-cfg.gamma_psld, &g)?;
            counters.guidance_grads += 1;
        }
        let mut equi = 0.0;
        if cfg.regularize_at(k) {
            let m = problem.mpe()?;
            let el = cfg.equi.draw(&m.action, &mut rng.group)?;
            let (target, wrt) = if cfg.detach_regularizer {
                let leaf = tape.var(z0.clone())?;
                (leaf, leaf)
            } else {
                (z0v, zv)
            };
            let r = latent_regularizer(cfg, m, el, target)?;
            equi = r.value().item()?;
            let gr = grad_wrt(&tape, r, &wrt, i, "regularizer gradient")?;
            next = next.axpy(-cfg.equi.lambda, &gr)?;
            counters.regularized_steps += 1;
            counters.regularizer_grads += 1;
        }
        records.push(record(cfg, i, &z, &z0, meas, equi, 0));
        z = finite(next, i, "latent")?;
    }
    let sample = codec.decoder.eval(&z)?;
    Ok(Trajectory {
        records,
        sample,
        latent: Some(z),
        counters,
    })
}

/// Blend of a data-consistent estimate with the unconditional proposal at
/// level `alpha_bar`: `N((s2 sqrt(a) z0 + gamma z') / (s2 + gamma), s2 gamma / (s2 + gamma))`
/// with `s2 = 1 - a`.
pub fn stochastic_resample(
    z0: &Tensor,
    proposal: &Tensor,
    alpha_bar: f64,
    gamma: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let s2 = 1.0 - alpha_bar;
    if gamma.is_infinite() {
        return Ok(proposal.clone());
    }
    let denom = s2 + gamma;
    let mean = z0.lincomb(s2 * libm::sqrt(alpha_bar) / denom, proposal, gamma / denom)?;
    let var = s2 * gamma / denom;
    if var > 0.0 {
        mean.axpy(libm::sqrt(var), &Tensor::randn(z0.shape(), rng))
    } else {
        Ok(mean)
    }
}

/// ReSample family: DDIM proposal, latent hard data consistency, stochastic
/// resampling.
pub fn resample(problem: &Problem<'_>, cfg: &SamplerConfig, sched: &NoiseSchedule) -> Result<Trajectory> {
    let model = problem.model;
    let (op, y) = problem.measurement()?;
    let codec = problem.codec()?;
    check_regularizer(problem, cfg)?;
    let mut rng = Streams::new(cfg.seed);
    let mut z = Tensor::randn(&model.sample_shape, &mut rng.main);
    let mut counters = Counters::default();
    let mut records = Vec::with_capacity(sched.len());
    let stop = cfg.delta * cfg.delta;
    for (k, i) in (1..=sched.len()).rev().enumerate() {
        let z0 = model.tweedie(&z, sched.level(i))?;
        counters.score_evals += 1;
        let proposal = ddim_update(&z, &z0, sched, i, cfg.ddim_eta, &mut rng.main)?;
        let meas = op.apply(&codec.decoder.eval(&z0)?)?.dist_sq(y)?;
        let resample_now = cfg.resample_every > 0 && (i - 1) % cfg.resample_every == 0 && i > 1;
        let regularize = cfg.regularize_at(k);
        let mut inner = 0;
        let mut equi = 0.0;
        let next = if resample_now {
            let el = if regularize {
                let m = problem.mpe()?;
                Some((m, cfg.equi.draw(&m.action, &mut rng.group)?))
            } else {
                None
            };
            let mut zh = z0.clone();
            let mut first = None;
            for _ in 0..cfg.k_meas {
                let tape = Tape::new();
                let v = tape.var(zh.clone())?;
                let r = tape.constant(y.clone())?.sub(op.apply_var(codec.decoder.forward(v)?)?)?;
                let rsq = r.value().norm_sq();
                if rsq < stop {
                    break;
                }
                let mut loss = r.norm_sq()?.mul_scalar(0.5)?;
                if let Some((m, g)) = el {
                    let reg = latent_regularizer(cfg, m, g, v)?;
                    equi = reg.value().item()?;
                    loss = loss.add(reg.mul_scalar(cfg.equi.lambda)?)?;
                    counters.regularizer_grads += 1;
                }
                let lv = loss.value().item()?;
                let base = *first.get_or_insert(lv);
                if lv > 10.0 * base && lv > 1e-12 {
                    return Err(Error::Divergence {
                        step: i,
                        detail: alloc::format!("inner loss rose from {base} to {lv}"),
                    });
                }
                let g = grad_wrt(&tape, loss, &v, i, "inner gradient")?;
                counters.guidance_grads += 1;
                zh = zh.axpy(-cfg.inner_lr, &g)?;
                inner += 1;
            }
            if el.is_some() {
                counters.regularized_steps += 1;
            }
            stochastic_resample(&zh, &proposal, sched.alpha_bar(i - 1), cfg.gamma_resample, &mut rng.main)?
        } else {
            proposal
        };
        counters.inner_steps += inner;
        records.push(record(cfg, i, &z, &z0, meas, equi, inner));
        z = finite(next, i, "latent")?;
    }
    let sample = codec.decoder.eval(&z)?;
    Ok(Trajectory {
        records,
        sample,
        latent: Some(z),
        counters,
    })
}

fn adam_update(opt: &mut Adam, v: &Tensor, g: &Tensor) -> Result<Tensor> {
    let d = opt.direction(&[g.data()]);
    let data: Vec<f64> = v.data().iter().zip(&d[0]).map(|(a, b)| a - b).collect();
    Tensor::new(v.shape().to_vec(), data)
}

/// SITCOM with an optional equivariant refinement stage.
pub fn sitcom(problem: &Problem<'_>, cfg: &SamplerConfig, sched: &NoiseSchedule) -> Result<Trajectory> {
    let model = problem.model;
    let (op, y) = problem.measurement()?;
    check_regularizer(problem, cfg)?;
    let mut rng = Streams::new(cfg.seed);
    let mut x = Tensor::randn(&model.sample_shape, &mut rng.main);
    let mut counters = Counters::default();
    let mut records = Vec::with_capacity(sched.len());
    let stop = cfg.delta * cfg.delta;
    for (k, i) in (1..=sched.len()).rev().enumerate() {
        let level = sched.level(i);
        let mut v = x.clone();
        let mut inner = 0;
        let mut opt = Adam::new(cfg.inner_lr);
        for _ in 0..cfg.k_meas {
            let tape = Tape::new();
            let vv = tape.var(v.clone())?;
            let x0 = model.tweedie_var(vv, level)?;
            counters.score_evals += 1;
            let r = op.apply_var(x0)?.sub(tape.constant(y.clone())?)?.norm_sq()?;
            if r.value().item()? < stop {
                break;
            }
            let prox = tape.constant(x.clone())?.sub(vv)?.norm_sq()?.mul_scalar(cfg.sitcom_lambda)?;
            let g = grad_wrt(&tape, r.add(prox)?, &vv, i, "inner gradient")?;
            counters.guidance_grads += 1;
            v = adam_update(&mut opt, &v, &g)?;
            inner += 1;
        }
        let mut equi = 0.0;
        if cfg.regularize_at(k) {
            let m = problem.mpe()?;
            let mut opt = Adam::new(cfg.inner_lr);
            for _ in 0..cfg.k_equi {
                let el = cfg.equi.draw(&m.action, &mut rng.group)?;
                let tape = Tape::new();
                let vv = tape.var(v.clone())?;
                let r = m.equi_loss(el, vv, cfg.equi.norm)?;
                equi = r.value().item()?;
                let g = grad_wrt(&tape, r.mul_scalar(cfg.equi.lambda)?, &vv, i, "regularizer gradient")?;
                counters.regularizer_grads += 1;
                v = adam_update(&mut opt, &v, &g)?;
                inner += 1;
            }
            counters.regularized_steps += 1;
        }
        let x0 = model.tweedie(&v, level)?;
        counters.score_evals += 1;
        let meas = op.apply(&x0)?.dist_sq(y)?;
        let ab_prev = sched.alpha_bar(i - 1);
        let next = if i > 1 {
            x0.lincomb(libm::sqrt(ab_prev), &Tensor::randn(x.shape(), &mut rng.main), libm::sqrt(1.0 - ab_prev))?
        } else {
            x0.clone()
        };
        counters.inner_steps += inner;
        records.push(record(cfg, i, &x, &x0, meas, equi, inner));
        x = finite(next, i, "sample")?;
    }
    Ok(Trajectory {
        records,
        sample: x,
        latent: None,
        counters,
    })
}
