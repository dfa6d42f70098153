//! Comparisons of a trained model against the analytic synthetic SCM.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kernels::{mmd2_mean_vs_mean, Kernel};
use crate::ncm::{generate_counterfactual, sample_posterior, AbductorModel, MechanismModel};
use crate::rng::RngStream;
use crate::scm::LinearGaussianScm;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorRecovery {
    /// Mean ‖ū_model − μ_analytic‖₂ over evidences.
    pub model_distance: f64,
    /// Mean ‖μ_analytic‖₂, i.e. the distance achieved by the prior mean.
    pub prior_distance: f64,
    /// Like `model_distance` after the best orthogonal map of the model's
    /// exogenous coordinates onto the SCM's (only meaningful if `d_u` match).
    pub aligned_distance: Option<f64>,
    pub evidences: usize,
}

impl PosteriorRecovery {
    pub fn ratio(&self) -> f64 {
        self.model_distance / self.prior_distance
    }

    pub fn aligned_ratio(&self) -> Option<f64> {
        self.aligned_distance.map(|d| d / self.prior_distance)
    }
}

fn raw_evidence(test: &Dataset, i: usize) -> (Vec<f64>, f64) {
    match &test.normalization {
        None => (test.x.row(i).to_vec(), test.a.get(i, 0)),
        Some(n) => (n.denormalize_x(test.x.row(i)), n.denormalize_a(test.a.get(i, 0))),
    }
}

/// Empirical posterior means of `psi` (`q` draws) against the analytic
/// posterior means, over the first `evidences` rows of `test`.
pub fn posterior_recovery(
    psi: &AbductorModel,
    scm: &LinearGaussianScm,
    test: &Dataset,
    evidences: usize,
    q: usize,
    rng: &mut RngStream,
) -> Result<PosteriorRecovery> {
    let n = evidences.min(test.len());
    if n == 0 {
        return Err(Error::arg("posterior recovery needs at least one evidence"));
    }
    let mut model = Tensor::zeros(n, psi.d_u());
    let mut truth = Tensor::zeros(n, scm.d_u());
    for i in 0..n {
        let draws = sample_posterior(psi, test.x.row(i), test.a.row(i), q, rng)?;
        model.row_mut(i).copy_from_slice(&draws.column_means());
        let (x, a) = raw_evidence(test, i);
        truth.row_mut(i).copy_from_slice(&scm.analytic_posterior(&x, a)?.mean);
    }
    let dist = |m: &Tensor| -> f64 {
        (0..n)
            .map(|i| m.row(i).iter().zip(truth.row(i)).map(|(p, t)| (p - t).powi(2)).sum::<f64>().sqrt())
            .sum::<f64>()
            / n as f64
    };
    let prior_distance = dist(&Tensor::zeros(n, scm.d_u()));
    let model_distance = if psi.d_u() == scm.d_u() { dist(&model) } else { f64::NAN };
    let aligned_distance = (psi.d_u() == scm.d_u()).then(|| dist(&procrustes_align(&model, &truth)));
    Ok(PosteriorRecovery {
        model_distance,
        prior_distance,
        aligned_distance,
        evidences: n,
    })
}

/// `source·R` for the orthogonal `R` minimizing `‖source·R − target‖_F`.
pub fn procrustes_align(source: &Tensor, target: &Tensor) -> Tensor {
    let s = DMatrix::from_row_slice(source.rows(), source.cols(), source.data());
    let t = DMatrix::from_row_slice(target.rows(), target.cols(), target.data());
    let svd = (s.transpose() * &t).svd(true, true);
    let r = svd.u.expect("u requested") * svd.v_t.expect("v requested");
    let aligned = s * r;
    let mut out = Tensor::zeros(source.rows(), source.cols());
    for i in 0..source.rows() {
        for j in 0..source.cols() {
            out.set(i, j, aligned[(i, j)]);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualFidelity {
    /// Mean two-sample squared MMD between model and oracle counterfactuals.
    pub mean_mmd2: f64,
    pub per_evidence: Vec<f64>,
}

/// Model counterfactuals against the SCM's analytic counterfactuals for the
/// first `evidences` test rows. Interventions `a′` are drawn from `N(0, 1)` in
/// the dataset's (normalized) coordinates using `intervention_rng`, so two
/// models evaluated with equal streams see identical interventions.
#[allow(clippy::too_many_arguments)]
pub fn counterfactual_fidelity(
    theta: &MechanismModel,
    psi: &AbductorModel,
    scm: &LinearGaussianScm,
    test: &Dataset,
    evidences: usize,
    q: usize,
    kernel: &Kernel,
    intervention_rng: &mut RngStream,
    sample_rng: &mut RngStream,
) -> Result<CounterfactualFidelity> {
    let n = evidences.min(test.len());
    if n == 0 {
        return Err(Error::arg("counterfactual fidelity needs at least one evidence"));
    }
    let norm = test.normalization.as_ref();
    let mut per = Vec::with_capacity(n);
    for i in 0..n {
        let a_prime = intervention_rng.normal();
        let model = generate_counterfactual(theta, psi, test.x.row(i), test.a.row(i), &[a_prime], q, sample_rng)?;
        let (x, a) = raw_evidence(test, i);
        let a_prime_raw = norm.map_or(a_prime, |s| s.denormalize_a(a_prime));
        let mut oracle = scm.analytic_counterfactual(&x, a, a_prime_raw, q, sample_rng)?;
        if let Some(s) = norm {
            for r in 0..q {
                let z = s.normalize_x(oracle.row(r));
                oracle.row_mut(r).copy_from_slice(&z);
            }
        }
        per.push(mmd2_mean_vs_mean(&model, &oracle, kernel)?);
    }
    Ok(CounterfactualFidelity {
        mean_mmd2: per.iter().sum::<f64>() / n as f64,
        per_evidence: per,
    })
}
