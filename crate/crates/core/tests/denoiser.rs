use equireg_core::gmm::GmmPrior;
use equireg_core::schedule::NoiseSchedule;
use equireg_core::score::{train_denoiser, ScoreModel, TrainConfig};
use equireg_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn schedule() -> NoiseSchedule {
    NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap()
}

#[test]
fn repeated_point_is_recovered_at_small_noise() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let p = Tensor::vector(vec![0.8, -0.5]).unwrap();
    let data = vec![p.clone(); 64];
    let cfg = TrainConfig {
        steps: 600,
        batch: 32,
        lr: 2e-3,
    };
    let (model, report) = train_denoiser(&data, &schedule(), &cfg, &mut rng).unwrap();
    assert!(model.is_trained());
    assert!(report.reduction() <= 0.5, "loss {} -> {}", report.initial_loss, report.final_loss);
    let lvl = schedule().level(20);
    let x = p.scale(lvl.alpha_bar.sqrt());
    let x0 = model.tweedie(&x, lvl).unwrap();
    assert!(x0.dist_sq(&p).unwrap().sqrt() < 0.1 * p.norm());
}

#[test]
fn trained_score_aligns_with_analytic_score() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let prior = GmmPrior::new(
        vec![0.3, 0.3, 0.4],
        vec![vec![1.5, 0.0], vec![-1.5, 0.5], vec![0.0, -1.5]],
        vec![
            vec![0.05, 0.0, 0.0, 0.05],
            vec![0.08, 0.02, 0.02, 0.05],
            vec![0.05, -0.01, -0.01, 0.06],
        ],
    )
    .unwrap();
    let data = prior.sample(4000, &mut rng);
    let cfg = TrainConfig {
        steps: 2500,
        batch: 64,
        lr: 2e-3,
    };
    let sched = schedule();
    let (model, report) = train_denoiser(&data, &sched, &cfg, &mut rng).unwrap();
    assert!(report.reduction() <= 0.5, "loss {} -> {}", report.initial_loss, report.final_loss);
    let exact = ScoreModel::analytic(prior.clone(), sched.clone(), vec![2]).unwrap();
    let lvl = sched.level(300);
    let mut total = 0.0;
    let n = 400;
    for x0 in prior.sample(n, &mut rng) {
        let noise = Tensor::randn(&[2], &mut rng);
        let xt = x0.lincomb(lvl.alpha_bar.sqrt(), &noise, (1.0 - lvl.alpha_bar).sqrt()).unwrap();
        let a = model.score(&xt, lvl).unwrap();
        let b = exact.score(&xt, lvl).unwrap();
        total += a.dot(&b).unwrap() / (a.norm() * b.norm());
    }
    let cos = total / n as f64;
    assert!(cos > 0.9, "mean cosine {cos}");
}
