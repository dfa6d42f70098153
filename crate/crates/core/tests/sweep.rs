//! Sweep composition, determinism and failure handling.

use ncmfair::data::{split, Dataset};
use ncmfair::fair::FairTrainConfig;
use ncmfair::ncm::{AbductorModel, MechanismModel};
use ncmfair::rng::RngStream;
use ncmfair::scm::LinearGaussianScm;
use ncmfair::tradeoff::{run_point, sweep, SweepContext};

struct Owned {
    train: Dataset,
    test: Dataset,
    theta: MechanismModel,
    psi: AbductorModel,
}

impl Owned {
    fn ctx(&self) -> SweepContext<'_> {
        SweepContext {
            theta: &self.theta,
            psi: &self.psi,
            train: &self.train,
            test: &self.test,
        }
    }
}

fn owned() -> Owned {
    let scm = LinearGaussianScm::default_insurance();
    let raw = scm.sample(1000, &mut RngStream::named(0, "data")).unwrap();
    let (train, test) = split(&raw, 0.8, &mut RngStream::named(0, "split")).unwrap();
    let stats = train.denormalized().fit_normalization();
    Owned {
        theta: MechanismModel::from_scm(&scm, Some(&stats)).unwrap(),
        psi: AbductorModel::from_scm(&scm, Some(&stats)).unwrap(),
        train,
        test,
    }
}

fn cfg(steps: usize) -> FairTrainConfig {
    FairTrainConfig {
        n_fair: 64,
        q_intv: 4,
        q_abd: 8,
        steps,
        lr: 3e-3,
        log_every: 0,
        ..FairTrainConfig::default()
    }
}

#[test]
fn single_zero_lambda_point_is_the_unregularized_run() {
    let o = owned();
    let c = cfg(30);
    let out = sweep(&o.ctx(), &c, &[0.0], 1, 9, 1).unwrap();
    assert_eq!(out.points.len(), 1);
    assert!(out.failures.is_empty());
    let run = run_point(&o.ctx(), &c, 0.0, 0, 9).unwrap();
    assert_eq!(out.points[0], run.point);
    assert_eq!(out.points[0].f, run.metrics.fair_mmd);
    assert!(run.history.iter().all(|r| r.l_fair.is_none()));
}

#[test]
fn sweeps_are_deterministic_across_worker_counts() {
    let o = owned();
    let c = cfg(30);
    let lambdas = [0.0, 0.5, 2.0];
    let serial = sweep(&o.ctx(), &c, &lambdas, 3, 4, 1).unwrap();
    let again = sweep(&o.ctx(), &c, &lambdas, 3, 4, 1).unwrap();
    let parallel = sweep(&o.ctx(), &c, &lambdas, 3, 4, 3).unwrap();
    assert_eq!(serial.points.len(), 9);
    for (p, q) in serial.points.iter().zip(&again.points).chain(serial.points.iter().zip(&parallel.points)) {
        assert_eq!(p, q);
        assert_eq!((p.e.to_bits(), p.f.to_bits()), (q.e.to_bits(), q.f.to_bits()));
    }
    let seeds: Vec<u64> = serial.points.iter().map(|p| p.seed).collect();
    assert!(seeds.iter().all(|s| (4..7).contains(s)));
}

#[test]
fn failed_runs_are_recorded_and_total_failure_is_an_error() {
    let o = owned();
    let c = cfg(5);
    let out = sweep(&o.ctx(), &c, &[0.0, f64::INFINITY], 1, 0, 2).unwrap();
    assert_eq!(out.points.len(), 1);
    assert_eq!(out.failures.len(), 1);
    assert_eq!(out.failures[0].lambda_fair, f64::INFINITY);
    assert!(matches!(out.failures[0].error, ncmfair::Error::Config(_)));
    assert!(sweep(&o.ctx(), &c, &[f64::INFINITY], 2, 0, 2).is_err());
    assert!(sweep(&o.ctx(), &c, &[], 1, 0, 1).is_err());
    assert!(sweep(&o.ctx(), &c, &[0.0], 0, 0, 1).is_err());
}

#[test]
fn default_grid_gives_21_points_and_a_fair_endpoint() {
    let o = owned();
    let lambdas = [0.0, 0.1, 0.5, 1.0, 2.0, 5.0, 10.0];
    let out = sweep(&o.ctx(), &cfg(400), &lambdas, 3, 0, 4).unwrap();
    assert_eq!(out.points.len(), 21);
    let median_f = |l: f64| {
        let mut f: Vec<f64> = out.points.iter().filter(|p| p.lambda_fair == l).map(|p| p.f).collect();
        f.sort_by(f64::total_cmp);
        f[1]
    };
    let (hi, lo) = (median_f(10.0), median_f(0.0));
    assert!(hi <= 0.2 * lo, "median F {hi:e} at λ=10 vs {lo:e} at λ=0");
}
