use std::sync::Arc;

use equireg_core::gmm::GmmPrior;
use equireg_core::groups::{GroupAction, Transform};
use equireg_core::measure::{MeasurementOperator, OperatorSpec};
use equireg_core::mpe::{autoencoder_layers, AutoencoderConfig, DiffMap, EquiLossConfig, MpeFunction};
use equireg_core::nn::Sequential;
use equireg_core::samplers::{sample, stochastic_resample, Algorithm, Codec, Problem, SamplerConfig};
use equireg_core::schedule::NoiseSchedule;
use equireg_core::score::ScoreModel;
use equireg_core::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn schedule() -> NoiseSchedule {
    NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap()
}

fn diag(v: &[f64]) -> Vec<f64> {
    let d = v.len();
    let mut m = vec![0.0; d * d];
    for i in 0..d {
        m[i * d + i] = v[i];
    }
    m
}

struct Fixture {
    pixel: ScoreModel,
    latent: ScoreModel,
    op: MeasurementOperator,
    y: Tensor,
    encoder_mpe: MpeFunction,
    decoder_mpe: MpeFunction,
    codec: Codec,
}

fn fixture() -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let prior = GmmPrior::new(
        vec![0.5, 0.5],
        vec![vec![1.0, 0.5, -0.5, -1.0], vec![-1.0, -0.5, 0.5, 1.0]],
        vec![diag(&[0.1, 0.2, 0.2, 0.1]), diag(&[0.1, 0.2, 0.2, 0.1])],
    )
    .unwrap();
    let pixel = ScoreModel::analytic(prior, schedule(), vec![4]).unwrap();
    let latent = ScoreModel::analytic(GmmPrior::standard(2).unwrap(), schedule(), vec![2]).unwrap();
    let op = MeasurementOperator::new(OperatorSpec::Select { indices: vec![0, 1] }, &[4], 0.05).unwrap();
    let y = Tensor::vector(vec![0.9, 0.4]).unwrap();
    let cfg = AutoencoderConfig {
        latent: 2,
        hidden: 8,
        ..Default::default()
    };
    let (ls, enc, dec) = autoencoder_layers(&[4], &cfg).unwrap();
    let e: Arc<dyn DiffMap> = Arc::new(Sequential::new(vec![4], enc, &mut rng).unwrap());
    let d: Arc<dyn DiffMap> = Arc::new(Sequential::new(ls, dec, &mut rng).unwrap());
    let action = GroupAction::new(Transform::FlipH).unwrap();
    Fixture {
        pixel,
        latent,
        op,
        y,
        encoder_mpe: MpeFunction::new(e.clone(), Some(d.clone()), action.clone()),
        decoder_mpe: MpeFunction::new(d.clone(), Some(e.clone()), action),
        codec: Codec { encoder: e, decoder: d },
    }
}

fn problem<'a>(f: &'a Fixture, alg: Algorithm) -> Problem<'a> {
    let latent = alg.is_latent();
    Problem {
        model: if latent { &f.latent } else { &f.pixel },
        operator: Some(&f.op),
        y: Some(&f.y),
        mpe: Some(if latent { &f.decoder_mpe } else { &f.encoder_mpe }),
        codec: Some(&f.codec),
    }
}

fn config(alg: Algorithm, lambda: f64) -> SamplerConfig {
    SamplerConfig {
        algorithm: alg,
        steps: 40,
        zeta: 0.2,
        eta_psld: 0.1,
        gamma_psld: 0.05,
        inner_lr: 0.05,
        k_meas: 4,
        k_equi: 3,
        resample_every: 5,
        record_states: true,
        seed: 17,
        equi: EquiLossConfig {
            lambda,
            ..Default::default()
        },
        ..Default::default()
    }
}

#[test]
fn zero_weight_regularizers_reduce_to_baselines() {
    let f = fixture();
    for alg in [
        Algorithm::EquiDps,
        Algorithm::EquiPsld,
        Algorithm::EquiconPsld,
        Algorithm::EquiResample,
        Algorithm::EquiconResample,
        Algorithm::EquiSitcom,
    ] {
        let p = problem(&f, alg);
        let base = sample(&p, &config(alg.baseline(), 0.0)).unwrap();
        let zero = sample(&p, &config(alg, 0.0)).unwrap();
        assert_eq!(zero, base, "{alg:?}");
        // baselines ignore the regularizer weight
        assert_eq!(sample(&p, &config(alg.baseline(), 0.1)).unwrap(), base);
        let mut no_equi_steps = config(alg, 0.1);
        no_equi_steps.k_equi = 0;
        if alg == Algorithm::EquiSitcom {
            assert_eq!(sample(&p, &no_equi_steps).unwrap(), base);
        }
        let on = sample(&p, &config(alg, 0.1)).unwrap();
        assert_ne!(on.sample, base.sample, "{alg:?} regularizer had no effect");
        assert!(on.sample.is_finite());
    }
}

#[test]
fn fixed_seed_is_bit_identical() {
    let f = fixture();
    for alg in [Algorithm::Ancestral, Algorithm::EquiDps, Algorithm::EquiconResample] {
        let p = problem(&f, alg);
        let a = sample(&p, &config(alg, 0.1)).unwrap();
        let b = sample(&p, &config(alg, 0.1)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.records.len(), 40);
    }
}

#[test]
fn regularizer_count_follows_period_and_early_stop() {
    let f = fixture();
    for period in [1, 2, 5, 10] {
        let mut cfg = config(Algorithm::EquiDps, 0.1);
        cfg.steps = 50;
        cfg.equi.period = period;
        let t = sample(&problem(&f, Algorithm::EquiDps), &cfg).unwrap();
        let active: usize = 45;
        assert_eq!(t.counters.regularized_steps, active.div_ceil(period));
        assert_eq!(cfg.expected_regularized_steps(), active.div_ceil(period));
        // last 10% of steps carry no regularizer
        assert!(t.records[45..].iter().all(|r| r.equi_loss == 0.0));
    }
}

#[test]
fn single_step_chain_is_finite() {
    let f = fixture();
    let mut cfg = config(Algorithm::Ancestral, 0.0);
    cfg.steps = 1;
    let t = sample(&Problem::unconditional(&f.pixel), &cfg).unwrap();
    assert_eq!(t.records.len(), 1);
    assert!(t.sample.is_finite());
}

#[test]
fn ancestral_moments_match_gaussian_prior() {
    let mean = vec![0.5, -1.0];
    let cov = vec![0.6, 0.2, 0.2, 0.3];
    let model = ScoreModel::analytic(GmmPrior::gaussian(mean.clone(), cov.clone()).unwrap(), schedule(), vec![2]).unwrap();
    let n = 5000;
    let mut xs = Vec::with_capacity(n);
    for seed in 0..n as u64 {
        let cfg = SamplerConfig {
            algorithm: Algorithm::Ancestral,
            steps: 1000,
            seed,
            ..Default::default()
        };
        xs.push(sample(&Problem::unconditional(&model), &cfg).unwrap().sample);
    }
    let m: Vec<f64> = (0..2).map(|j| xs.iter().map(|x| x.data()[j]).sum::<f64>() / n as f64).collect();
    for j in 0..2 {
        assert!((m[j] - mean[j]).abs() < 0.05 * cov[j * 3].sqrt().max(mean[j].abs()), "mean {m:?}");
    }
    let mut c = [0.0; 4];
    for x in &xs {
        for a in 0..2 {
            for b in 0..2 {
                c[a * 2 + b] += (x.data()[a] - m[a]) * (x.data()[b] - m[b]) / (n - 1) as f64;
            }
        }
    }
    let err: f64 = c.iter().zip(&cov).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let scale: f64 = cov.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(err < 0.05 * scale, "cov {c:?}");
}

#[test]
fn guidance_vanishes_when_measurement_matches() {
    let f = fixture();
    let id = MeasurementOperator::new(OperatorSpec::Identity, &[4], 0.05).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::randn(&[4], &mut rng);
    let lvl = schedule().level(400);
    let y = f.pixel.tweedie(&x, lvl).unwrap();
    let tape = Tape::new();
    let xv = tape.var(x).unwrap();
    let x0 = f.pixel.tweedie_var(xv, lvl).unwrap();
    let loss = tape.constant(y).unwrap().sub(id.apply_var(x0).unwrap()).unwrap().norm_sq().unwrap();
    let g = tape.backward(loss).unwrap().wrt(&xv).unwrap();
    assert_eq!(g.max_abs(), 0.0);
}

#[test]
fn resample_without_resample_steps_is_ddim() {
    let f = fixture();
    let mut cfg = config(Algorithm::Resample, 0.0);
    cfg.resample_every = 0;
    let p = problem(&f, Algorithm::Resample);
    let r = sample(&p, &cfg).unwrap();
    let mut ddim = cfg;
    ddim.algorithm = Algorithm::Ddim;
    let d = sample(&Problem::unconditional(&f.latent), &ddim).unwrap();
    assert_eq!(r.latent.unwrap(), d.sample);
}

#[test]
fn infinite_gamma_keeps_proposal() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let z0 = Tensor::vector(vec![1.0, 2.0]).unwrap();
    let zp = Tensor::vector(vec![-1.0, 0.5]).unwrap();
    assert_eq!(stochastic_resample(&z0, &zp, 0.5, f64::INFINITY, &mut rng).unwrap(), zp);
    // the blend mean approaches the proposal as gamma grows
    let n = 4000;
    let mut acc = [0.0; 2];
    for _ in 0..n {
        let s = stochastic_resample(&z0, &zp, 0.5, 1e6, &mut rng).unwrap();
        acc[0] += s.data()[0] / n as f64;
        acc[1] += s.data()[1] / n as f64;
    }
    assert!((acc[0] + 1.0).abs() < 0.05 && (acc[1] - 0.5).abs() < 0.05);
}

#[test]
fn sitcom_stops_immediately_below_threshold() {
    let f = fixture();
    let mut cfg = config(Algorithm::Sitcom, 0.0);
    cfg.delta = 1e6;
    let t = sample(&problem(&f, Algorithm::Sitcom), &cfg).unwrap();
    assert!(t.records.iter().all(|r| r.inner_steps == 0));
    assert_eq!(t.counters.guidance_grads, 0);
}

#[test]
fn psld_rejects_nonlinear_operator() {
    let f = fixture();
    let sat = MeasurementOperator::new(OperatorSpec::Saturate { scale: 2.0 }, &[4], 0.05).unwrap();
    let y = Tensor::zeros(&[4]);
    let mut p = problem(&f, Algorithm::Psld);
    p.operator = Some(&sat);
    p.y = Some(&y);
    assert!(sample(&p, &config(Algorithm::Psld, 0.0)).is_err());
}
