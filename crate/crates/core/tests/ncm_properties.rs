//! Statistical properties of the stage-1 losses and trained models.

use ncmfair::data::{split, Dataset};
use ncmfair::kernels::{median_heuristic, mmd2_mean_vs_mean, Kernel};
use ncmfair::ncm::{generate_counterfactual, loss_ctf, loss_gen, loss_pos, loss_reg, train_stage1, AbductorModel, GenTrainConfig, MechanismModel, TrainMode};
use ncmfair::nn::Activation;
use ncmfair::rng::RngStream;
use ncmfair::scm::LinearGaussianScm;
use ncmfair::tensor::Tensor;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig { cases: 32, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn losses_are_non_negative(seed in any::<u64>(), d_u in 1..4usize, d_x in 1..4usize, n in 1..6usize, q in 1..4usize, rho in 0.01..5.0f64, scale in 0.1..10.0f64) {
        let mut rng = RngStream::named(seed, "nonneg");
        let theta = MechanismModel::new(1, d_u, d_x, &[3], Activation::Tanh, &mut rng).unwrap();
        let psi = AbductorModel::new(d_x, 1, d_u, d_u, &[3], Activation::Tanh, &mut rng).unwrap();
        let a = rng.gaussian(n, 1).scale(scale);
        let x = rng.gaussian(n, d_x).scale(scale);
        let k = Kernel::new(rho).unwrap();
        let values = [
            loss_gen(&theta, &a, &x, q, &k, &mut rng).unwrap(),
            loss_pos(&theta, &psi, &a, &x, q, false, &k, &mut rng).unwrap(),
            loss_pos(&theta, &psi, &a, &x, q, true, &k, &mut rng).unwrap(),
            loss_ctf(&theta, &psi, &a, &x, q, &k, &mut rng).unwrap(),
            loss_reg(&theta, &psi, &a, &x, &mut rng).unwrap(),
        ];
        for v in values {
            prop_assert!(v >= 0.0 && v.is_finite(), "{values:?}");
        }
    }
}

struct Oracle {
    scm: LinearGaussianScm,
    theta: MechanismModel,
    psi: AbductorModel,
}

fn oracle() -> Oracle {
    let scm = LinearGaussianScm::default_insurance();
    let theta = MechanismModel::from_scm(&scm, None).unwrap();
    let psi = AbductorModel::from_scm(&scm, None).unwrap();
    Oracle { scm, theta, psi }
}

/// All four losses at the oracle on one batch, each with its own noise stream.
fn oracle_losses(o: &Oracle, d: &Dataset, k: &Kernel, seed: u64) -> [f64; 4] {
    let mut rng = RngStream::named(seed, "oracle-losses");
    [
        loss_gen(&o.theta, &d.a, &d.x, 32, k, &mut rng).unwrap(),
        loss_pos(&o.theta, &o.psi, &d.a, &d.x, 4, false, k, &mut rng).unwrap(),
        loss_ctf(&o.theta, &o.psi, &d.a, &d.x, 4, k, &mut rng).unwrap(),
        loss_reg(&o.theta, &o.psi, &d.a, &d.x, &mut rng).unwrap(),
    ]
}

#[test]
fn oracle_models_sit_at_the_monte_carlo_floor() {
    const RESAMPLES: u64 = 8;
    let o = oracle();
    let n = 64;
    let data = o.scm.sample(n, &mut RngStream::named(0, "oracle/data")).unwrap();
    let k = Kernel::new(median_heuristic(&data.x).unwrap()).unwrap();
    let value = oracle_losses(&o, &data, &k, 0);
    // the floor replaces the targets by fresh draws from the oracle itself at the same a
    let mut floor = [0.0; 4];
    for r in 0..RESAMPLES {
        let mut rng = RngStream::named(r, "oracle/resample");
        let u = rng.gaussian(n, o.scm.d_u());
        let x = o.theta.forward(&data.a, &u).unwrap();
        let fake = Dataset::new(data.a.clone(), x, data.y.clone(), data.a_names.clone(), data.x_names.clone(), data.y_names.clone()).unwrap();
        for (f, v) in floor.iter_mut().zip(oracle_losses(&o, &fake, &k, 100 + r)) {
            *f += v / RESAMPLES as f64;
        }
    }
    for (i, name) in ["gen", "pos", "ctf", "reg"].iter().enumerate() {
        assert!(value[i] <= 2.0 * floor[i] + 1e-10, "{name}: oracle {} vs floor {}", value[i], floor[i]);
    }
}

fn marginal_statistic(theta: &MechanismModel, psi: &AbductorModel, test: &Dataset, a_prime: f64, k: &Kernel) -> f64 {
    let mut rng = RngStream::named(0, "marginal");
    let n = test.len();
    let mut cf = Tensor::zeros(n, test.d_x());
    for i in 0..n {
        let s = generate_counterfactual(theta, psi, test.x.row(i), test.a.row(i), &[a_prime], 1, &mut rng).unwrap();
        cf.row_mut(i).copy_from_slice(s.row(0));
    }
    // observational bucket: the test rows whose A is nearest to a′
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| (test.a.get(i, 0) - a_prime).abs().total_cmp(&(test.a.get(j, 0) - a_prime).abs()));
    let bucket = test.x.gather_rows(&order[..n / 10]);
    mmd2_mean_vs_mean(&cf, &bucket, k).unwrap()
}

#[test]
fn training_moves_counterfactual_marginals_toward_observations() {
    let scm = LinearGaussianScm::default_insurance();
    let raw = scm.sample(2000, &mut RngStream::named(0, "marginal/data")).unwrap();
    let (train, test) = split(&raw, 0.8, &mut RngStream::named(0, "marginal/split")).unwrap();
    let cfg = GenTrainConfig {
        mode: TrainMode::Phased,
        steps: 150,
        n_ctf: 16,
        lr: 3e-3,
        ..GenTrainConfig::default()
    };
    let a_prime = 1.0;
    let k = Kernel::new(median_heuristic(&test.x).unwrap()).unwrap();
    for seed in 0..3 {
        let rng = RngStream::named(seed, "stage1");
        let (theta, psi) = cfg.init_models(1, train.d_x(), &mut rng.clone()).unwrap();
        let before = marginal_statistic(&theta, &psi, &test, a_prime, &k);
        let fit = train_stage1(theta, psi, &train, &cfg, &rng).unwrap();
        let after = marginal_statistic(&fit.theta, &fit.psi, &test, a_prime, &k);
        assert!(after < before, "seed {seed}: trained {after:e} vs untrained {before:e}");
    }
}

#[test]
fn generative_loss_falls_toward_the_oracle_floor() {
    let scm = LinearGaussianScm::default_insurance();
    let raw = scm.sample(2000, &mut RngStream::named(1, "gen/data")).unwrap();
    let (train, test) = split(&raw, 0.8, &mut RngStream::named(1, "gen/split")).unwrap();
    let cfg = GenTrainConfig {
        lambda_pos: 0.0,
        lambda_ctf: 0.0,
        lambda_reg: 0.0,
        steps: 300,
        lr: 3e-3,
        log_every: 0,
        ..GenTrainConfig::default()
    };
    let rng = RngStream::named(1, "stage1");
    let (theta, psi) = cfg.init_models(1, train.d_x(), &mut rng.clone()).unwrap();
    let k = Kernel::new(median_heuristic(&train.x).unwrap()).unwrap();
    let value = |t: &MechanismModel| loss_gen(t, &test.a, &test.x, cfg.q_gen, &k, &mut RngStream::named(1, "gen/eval")).unwrap();
    let init = value(&theta);
    let trained = value(&train_stage1(theta, psi, &train, &cfg, &rng).unwrap().theta);
    let stats = train.denormalized().fit_normalization();
    let oracle = value(&MechanismModel::from_scm(&scm, Some(&stats)).unwrap());
    assert!(trained < init, "trained {trained} vs init {init}");
    assert!(trained < 2.0 * oracle, "trained {trained} vs oracle {oracle}");
    // the true mechanism itself stays above a tenth of the initial value
    assert!(oracle > init / 10.0, "oracle {oracle} vs init {init}");
}
