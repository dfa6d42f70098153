//! Statistical and closed-form oracles for the linear-Gaussian SCM.

use ncmfair::data::{split, split_indices, Dataset};
use ncmfair::kernels::{median_heuristic, mmd2_mean_vs_mean, mmd2_mean_vs_point, Kernel};
use ncmfair::rng::RngStream;
use ncmfair::scm::LinearGaussianScm;
use ncmfair::tensor::Tensor;
use proptest::prelude::*;

fn split_scm() -> LinearGaussianScm {
    let mut w_u = Tensor::zeros(4, 5);
    for i in 0..4 {
        w_u.set(i, i, 1.0);
    }
    LinearGaussianScm::new(0, Tensor::zeros(4, 1), w_u, vec![0.0; 4], vec![1.0; 4], 1.0, vec![0.0; 5], 0.0, 1.0).unwrap()
}

/// Solves `M z = rhs` for square `M` by Gauss-Jordan elimination with partial pivoting.
fn solve(m: &[Vec<f64>], rhs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = m.len();
    let k = rhs[0].len();
    let mut aug: Vec<Vec<f64>> = (0..n).map(|i| m[i].iter().chain(&rhs[i]).copied().collect()).collect();
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| aug[i][c].abs().total_cmp(&aug[j][c].abs())).unwrap();
        aug.swap(c, p);
        let piv = aug[c][c];
        for v in aug[c].iter_mut() {
            *v /= piv;
        }
        for r in 0..n {
            if r != c {
                let f = aug[r][c];
                let row_c = aug[c].clone();
                for (v, w) in aug[r].iter_mut().zip(&row_c) {
                    *v -= f * w;
                }
            }
        }
    }
    aug.into_iter().map(|row| row[n..n + k].to_vec()).collect()
}

/// Evidence residual `x − W_A a − b_X`.
fn residual(scm: &LinearGaussianScm, x: &[f64], a: f64) -> Vec<f64> {
    (0..scm.d_x()).map(|r| x[r] - scm.w_a().get(r, 0) * a - scm.b_x()[r]).collect()
}

fn evidence(scm: &LinearGaussianScm, seed: u64) -> (Vec<f64>, f64) {
    let d = scm.sample(1, &mut RngStream::named(seed, "evidence")).unwrap();
    (d.x.row(0).to_vec(), d.a.get(0, 0))
}

#[test]
fn sample_moments_within_clt_bands() {
    let scm = LinearGaussianScm::default_insurance();
    let n = 5000;
    let d = scm.sample(n, &mut RngStream::named(0, "moments")).unwrap();
    let (mean, cov) = scm.x_moments();
    let means = d.x.column_means();
    let stds = d.x.column_stds();
    for j in 0..scm.d_x() {
        let sigma = cov.get(j, j).sqrt();
        let mean_band = 4.0 * sigma / (n as f64).sqrt();
        let std_band = 4.0 * sigma / (2.0 * n as f64).sqrt();
        assert!((means[j] - mean[j]).abs() <= mean_band, "mean {j}: {} vs {}", means[j], mean[j]);
        assert!((stds[j] - sigma).abs() <= std_band, "std {j}: {} vs {sigma}", stds[j]);
    }
}

#[test]
fn constant_mechanism_samples_are_constant() {
    let v = vec![1.5, -2.0, 0.25, 3.0];
    let scm = LinearGaussianScm::new(0, Tensor::zeros(4, 1), Tensor::zeros(4, 5), v.clone(), vec![0.0; 4], 1.0, vec![0.0; 5], 0.0, 1.0).unwrap();
    assert!(!scm.has_full_row_rank());
    let d = scm.sample(20, &mut RngStream::named(1, "const")).unwrap();
    assert!(d.x.to_rows().iter().all(|r| r == &v));
}

#[test]
fn posterior_mean_matches_importance_sampling() {
    // the last coordinate t is drawn from its prior and the first d_x solved
    // from the evidence, so the weight of a draw is the prior density of the
    // solved coordinates
    const DRAWS: usize = 1_000_000;
    let scm = LinearGaussianScm::default_insurance();
    let (x, a) = evidence(&scm, 7);
    let r = residual(&scm, &x, a);
    let (du, dx) = (scm.d_u(), scm.d_x());
    assert_eq!(du, dx + 1);
    let w = scm.w_u();
    let m: Vec<Vec<f64>> = (0..dx).map(|i| (0..dx).map(|j| w.get(i, j)).collect()).collect();
    let rhs: Vec<Vec<f64>> = (0..dx).map(|i| vec![r[i], w.get(i, dx)]).collect();
    let sol = solve(&m, &rhs);
    let mut rng = RngStream::named(7, "importance");
    let (mut total, mut total_sq) = (0.0, 0.0);
    let mut est = vec![0.0; du];
    for _ in 0..DRAWS {
        let t = rng.normal();
        let rest: Vec<f64> = sol.iter().map(|s| s[0] - s[1] * t).collect();
        let wi = (-0.5 * rest.iter().map(|v| v * v).sum::<f64>()).exp();
        total += wi;
        total_sq += wi * wi;
        for j in 0..dx {
            est[j] += wi * rest[j];
        }
        est[dx] += wi * t;
    }
    let ess = total * total / total_sq;
    assert!(ess > 1e4, "effective sample size {ess}");
    let post = scm.analytic_posterior(&x, a).unwrap();
    for j in 0..du {
        let e = est[j] / total;
        assert!((e - post.mean[j]).abs() <= 0.05, "coordinate {j}: importance {e} vs analytic {}", post.mean[j]);
    }
}

#[test]
fn posterior_matches_information_form_limit() {
    // observation noise s² → 0: Λ = I + WᵀW/s², mean = Λ⁻¹ Wᵀ r / s², covariance = Λ⁻¹
    let s2 = 1e-7;
    for seed in 0..5 {
        let scm = LinearGaussianScm::seeded(100 + seed).unwrap();
        let (x, a) = evidence(&scm, seed);
        let r = residual(&scm, &x, a);
        let (du, dx) = (scm.d_u(), scm.d_x());
        let w = scm.w_u();
        let lambda: Vec<Vec<f64>> = (0..du)
            .map(|i| (0..du).map(|j| (i == j) as u8 as f64 + (0..dx).map(|k| w.get(k, i) * w.get(k, j)).sum::<f64>() / s2).collect())
            .collect();
        let mut rhs: Vec<Vec<f64>> = (0..du).map(|i| vec![(0..dx).map(|k| w.get(k, i) * r[k]).sum::<f64>() / s2]).collect();
        for (i, row) in rhs.iter_mut().enumerate() {
            row.extend((0..du).map(|j| (i == j) as u8 as f64));
        }
        let sol = solve(&lambda, &rhs);
        let post = scm.analytic_posterior(&x, a).unwrap();
        for i in 0..du {
            assert!((sol[i][0] - post.mean[i]).abs() <= 1e-5, "seed {seed} mean {i}: {} vs {}", sol[i][0], post.mean[i]);
            for j in 0..du {
                let want = sol[i][1 + j];
                assert!((want - post.covariance.get(i, j)).abs() <= 1e-5, "seed {seed} cov ({i},{j})");
            }
        }
    }
}

#[test]
fn counterfactual_mean_matches_closed_form() {
    let scm = LinearGaussianScm::default_insurance();
    let (x, a) = evidence(&scm, 11);
    let a_prime = a + 1.25;
    let q = 10_000;
    let cf = scm.analytic_counterfactual(&x, a, a_prime, q, &mut RngStream::named(11, "cf")).unwrap();
    let post = scm.analytic_posterior(&x, a).unwrap();
    let want = scm.mechanism_x(a_prime, &post.mean);
    let means = cf.column_means();
    let stds = cf.column_stds();
    for j in 0..scm.d_x() {
        // the band collapses when W_U has full row rank; allow roundoff
        let band = 4.0 * stds[j] / (q as f64).sqrt() + 1e-9;
        assert!((means[j] - want[j]).abs() <= band, "coordinate {j}: {} vs {}", means[j], want[j]);
    }
}

#[test]
fn factual_replay_is_degenerate_at_the_evidence() {
    let scm = split_scm();
    let x = vec![0.3, -1.2, 2.0, 0.7];
    let cf = scm.analytic_counterfactual(&x, 0.4, 0.4, 200, &mut RngStream::named(3, "replay")).unwrap();
    let k = Kernel::new(1.0).unwrap();
    assert!(mmd2_mean_vs_point(&cf, &x, &k).unwrap() < 1e-6);
    assert!(cf.to_rows().iter().all(|r| r == &x));
}

#[test]
fn counterfactuals_marginalize_to_the_interventional_distribution() {
    const N: usize = 1000;
    const PERMUTATIONS: usize = 200;
    let scm = LinearGaussianScm::default_insurance();
    let a_prime = 0.8;
    let evid = scm.sample(N, &mut RngStream::named(5, "marginal/evidence")).unwrap();
    let mut rng = RngStream::named(5, "marginal/cf");
    let mut cf = Tensor::zeros(N, scm.d_x());
    for i in 0..N {
        let s = scm.analytic_counterfactual(evid.x.row(i), evid.a.get(i, 0), a_prime, 1, &mut rng).unwrap();
        cf.row_mut(i).copy_from_slice(s.row(0));
    }
    // direct draws from P(X | do(A = a′))
    let mut urng = RngStream::named(5, "marginal/direct");
    let mut direct = Tensor::zeros(N, scm.d_x());
    for i in 0..N {
        let u: Vec<f64> = (0..scm.d_u()).map(|_| urng.normal()).collect();
        direct.row_mut(i).copy_from_slice(&scm.mechanism_x(a_prime, &u));
    }
    let pooled = Tensor::concat_rows(&[&cf, &direct]);
    let k = Kernel::new(median_heuristic(&pooled).unwrap()).unwrap();
    let stat = mmd2_mean_vs_mean(&cf, &direct, &k).unwrap();
    let mut prng = RngStream::named(5, "marginal/perm");
    let mut null = Vec::with_capacity(PERMUTATIONS);
    let mut idx: Vec<usize> = (0..2 * N).collect();
    for _ in 0..PERMUTATIONS {
        prng.shuffle(&mut idx);
        let p = pooled.gather_rows(&idx);
        let (lhs, rhs) = (p.gather_rows(&(0..N).collect::<Vec<_>>()), p.gather_rows(&(N..2 * N).collect::<Vec<_>>()));
        null.push(mmd2_mean_vs_mean(&lhs, &rhs, &k).unwrap());
    }
    null.sort_by(f64::total_cmp);
    let p95 = null[(0.95 * PERMUTATIONS as f64) as usize];
    assert!(stat < 3.0 * p95, "MMD² {stat:e} vs 3 × {p95:e}");
}

fn indexed_dataset(n: usize) -> Dataset {
    let a: Vec<f64> = (0..n).map(|i| (i % 7) as f64).collect();
    let x: Vec<f64> = (0..n).map(|i| i as f64).collect();
    let y: Vec<f64> = (0..n).map(|i| (i % 3) as f64).collect();
    Dataset::new(Tensor::column(&a), Tensor::column(&x), Tensor::column(&y), vec!["A".into()], vec!["X1".into()], vec!["Y".into()]).unwrap()
}

#[test]
fn split_sizes() {
    let scm = LinearGaussianScm::default_insurance();
    let d = scm.sample(5000, &mut RngStream::named(0, "data")).unwrap();
    let (train, test) = split(&d, 0.8, &mut RngStream::named(0, "split")).unwrap();
    assert_eq!((train.len(), test.len()), (4000, 1000));
    let crimes_like = indexed_dataset(1994);
    let (train, test) = split(&crimes_like, 1794.0 / 1994.0, &mut RngStream::named(0, "split")).unwrap();
    assert_eq!((train.len(), test.len()), (1794, 200));
    let (tr, te) = split_indices(1994, 1794.0 / 1994.0, &mut RngStream::named(0, "split")).unwrap();
    let mut all: Vec<usize> = tr.iter().chain(&te).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..1994).collect::<Vec<_>>());
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn posterior_is_consistent(scm_seed in any::<u64>(), ev_seed in any::<u64>()) {
        let scm = LinearGaussianScm::seeded(scm_seed).unwrap();
        let (x, a) = evidence(&scm, ev_seed);
        let post = scm.analytic_posterior(&x, a).unwrap();
        let back = scm.mechanism_x(a, &post.mean);
        for (b, v) in back.iter().zip(&x) {
            prop_assert!((b - v).abs() <= 1e-10 * v.abs().max(1.0), "{b} vs {v}");
        }
        let du = scm.d_u();
        let cov = nalgebra::DMatrix::from_fn(du, du, |i, j| post.covariance.get(i, j));
        for i in 0..du {
            for j in 0..du {
                prop_assert_eq!(cov[(i, j)], cov[(j, i)]);
            }
        }
        let eig = nalgebra::SymmetricEigen::new(cov).eigenvalues;
        prop_assert!(eig.iter().all(|v| *v >= -1e-10), "{eig:?}");
        let rank = eig.iter().filter(|v| **v > 1e-8).count();
        prop_assert_eq!(rank, scm.d_u() - scm.d_x());
    }
}
