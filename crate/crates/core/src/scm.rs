//! Linear-Gaussian ground-truth SCM with closed-form abduction.
//!
//! ```text
//! A ~ N(0, σ_A²),  U ~ N(0, I₅)
//! X = W_A·A + W_U·U + b_X            (no independent X noise)
//! Y = w_Yᵀ·X + c_A·A + c_Uᵀ·U + b_Y
//! ```
//!
//! Because the X mechanism is noiseless and `W_U` has full row rank, the
//! posterior of `U` given `(x, a)` is the prior conditioned on the linear
//! constraint `W_U·u = x − W_A·a − b_X`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub const D_U: usize = 5;
pub const D_X: usize = 4;

/// Seed the bundled coefficient asset was generated from.
pub const DEFAULT_SCM_SEED: u64 = 1729;

const DEFAULT_ASSET: &str = include_str!("../assets/insurance_scm.json");

/// On-disk form of [`LinearGaussianScm`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScmAsset {
    pub seed: u64,
    #[serde(rename = "W_A")]
    pub w_a: Vec<Vec<f64>>,
    #[serde(rename = "W_U")]
    pub w_u: Vec<Vec<f64>>,
    #[serde(rename = "b_X")]
    pub b_x: Vec<f64>,
    #[serde(rename = "w_Y")]
    pub w_y: Vec<f64>,
    #[serde(rename = "c_A")]
    pub c_a: f64,
    #[serde(rename = "c_U")]
    pub c_u: Vec<f64>,
    #[serde(rename = "b_Y")]
    pub b_y: f64,
    #[serde(rename = "sigma_A")]
    pub sigma_a: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScmAsset", into = "ScmAsset")]
pub struct LinearGaussianScm {
    seed: u64,
    /// `d_x × 1`
    w_a: Tensor,
    /// `d_x × d_u`
    w_u: Tensor,
    b_x: Vec<f64>,
    w_y: Vec<f64>,
    c_a: f64,
    c_u: Vec<f64>,
    b_y: f64,
    sigma_a: f64,
}

impl TryFrom<ScmAsset> for LinearGaussianScm {
    type Error = Error;

    fn try_from(a: ScmAsset) -> Result<Self> {
        let scm = Self {
            seed: a.seed,
            w_a: Tensor::from_rows(&a.w_a).map_err(|e| Error::Schema(format!("W_A: {e}")))?,
            w_u: Tensor::from_rows(&a.w_u).map_err(|e| Error::Schema(format!("W_U: {e}")))?,
            b_x: a.b_x,
            w_y: a.w_y,
            c_a: a.c_a,
            c_u: a.c_u,
            b_y: a.b_y,
            sigma_a: a.sigma_a,
        };
        scm.validate()?;
        Ok(scm)
    }
}

impl From<LinearGaussianScm> for ScmAsset {
    fn from(s: LinearGaussianScm) -> Self {
        Self {
            seed: s.seed,
            w_a: s.w_a.to_rows(),
            w_u: s.w_u.to_rows(),
            b_x: s.b_x,
            w_y: s.w_y,
            c_a: s.c_a,
            c_u: s.c_u,
            b_y: s.b_y,
            sigma_a: s.sigma_a,
        }
    }
}

/// `N(mean, covariance)` over the exogenous variables.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPosterior {
    pub mean: Vec<f64>,
    pub covariance: Tensor,
    /// `L` with `L·Lᵀ = covariance`; may be rank deficient.
    factor: Tensor,
}

impl GaussianPosterior {
    pub fn factor(&self) -> &Tensor {
        &self.factor
    }

    /// `q` draws, one per row.
    pub fn sample(&self, q: usize, rng: &mut RngStream) -> Tensor {
        let d = self.mean.len();
        let z = rng.gaussian(q, d);
        let mut out = z.matmul_nt(&self.factor);
        for i in 0..q {
            for (o, m) in out.row_mut(i).iter_mut().zip(&self.mean) {
                *o += m;
            }
        }
        out
    }
}

impl LinearGaussianScm {
    /// Builds and validates an SCM from explicit coefficients.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        seed: u64,
        w_a: Tensor,
        w_u: Tensor,
        b_x: Vec<f64>,
        w_y: Vec<f64>,
        c_a: f64,
        c_u: Vec<f64>,
        b_y: f64,
        sigma_a: f64,
    ) -> Result<Self> {
        let scm = Self {
            seed,
            w_a,
            w_u,
            b_x,
            w_y,
            c_a,
            c_u,
            b_y,
            sigma_a,
        };
        scm.validate()?;
        Ok(scm)
    }

    /// Coefficients `W_A, W_U, w_Y, c_U` drawn from `N(0, 1)` in that order;
    /// `b_X = 0, b_Y = 0, c_A = 1, σ_A = 1`.
    pub fn seeded(seed: u64) -> Result<Self> {
        let mut rng = RngStream::named(seed, "scm/coefficients");
        let w_a = rng.gaussian(D_X, 1);
        let w_u = rng.gaussian(D_X, D_U);
        let w_y = rng.gaussian(1, D_X).into_data();
        let c_u = rng.gaussian(1, D_U).into_data();
        Self::new(seed, w_a, w_u, vec![0.0; D_X], w_y, 1.0, c_u, 0.0, 1.0)
    }

    /// The bundled insurance-like SCM.
    pub fn default_insurance() -> Self {
        serde_json::from_str(DEFAULT_ASSET).expect("bundled SCM asset is valid")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    fn validate(&self) -> Result<()> {
        let dx = self.w_u.rows();
        let du = self.w_u.cols();
        if dx == 0 || du < dx {
            return Err(Error::Model(format!(
                "W_U must be d_x × d_u with d_u ≥ d_x ≥ 1, got {dx}×{du}"
            )));
        }
        if self.w_a.shape() != (dx, 1) {
            return Err(Error::Model(format!("W_A must be {dx}×1, got {:?}", self.w_a.shape())));
        }
        if self.b_x.len() != dx || self.w_y.len() != dx || self.c_u.len() != du {
            return Err(Error::Model("b_X, w_Y or c_U has the wrong length".into()));
        }
        if !(self.sigma_a > 0.0) {
            return Err(Error::Model(format!("sigma_A must be positive, got {}", self.sigma_a)));
        }
        Ok(())
    }

    /// Whether `W_U` has full row rank, the precondition for abduction.
    pub fn has_full_row_rank(&self) -> bool {
        self.gram_inverse().is_ok()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn d_u(&self) -> usize {
        self.w_u.cols()
    }

    pub fn d_x(&self) -> usize {
        self.w_u.rows()
    }

    pub fn w_a(&self) -> &Tensor {
        &self.w_a
    }

    pub fn w_u(&self) -> &Tensor {
        &self.w_u
    }

    pub fn b_x(&self) -> &[f64] {
        &self.b_x
    }

    pub fn sigma_a(&self) -> f64 {
        self.sigma_a
    }

    fn w_u_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.d_x(), self.d_u(), self.w_u.data())
    }

    /// `(W_U·W_Uᵀ)⁻¹`, or a model error when it is numerically singular.
    fn gram_inverse(&self) -> Result<DMatrix<f64>> {
        let w = self.w_u_matrix();
        let gram = &w * w.transpose();
        let eig = SymmetricEigen::new(gram.clone());
        let max = eig.eigenvalues.max();
        let min = eig.eigenvalues.min();
        if !(min > 1e-12 * max.max(1e-300)) {
            return Err(Error::Model(format!(
                "W_U·W_Uᵀ is numerically singular (eigenvalues in [{min:e}, {max:e}])"
            )));
        }
        gram.cholesky()
            .map(|c| c.inverse())
            .ok_or_else(|| Error::Model("W_U·W_Uᵀ is not positive definite".into()))
    }

    /// `W_A·a + W_U·u + b_X`.
    pub fn mechanism_x(&self, a: f64, u: &[f64]) -> Vec<f64> {
        (0..self.d_x())
            .map(|r| {
                let wu: f64 = self.w_u.row(r).iter().zip(u).map(|(w, v)| w * v).sum();
                self.w_a.get(r, 0) * a + wu + self.b_x[r]
            })
            .collect()
    }

    pub fn mechanism_y(&self, x: &[f64], a: f64, u: &[f64]) -> f64 {
        let wx: f64 = self.w_y.iter().zip(x).map(|(w, v)| w * v).sum();
        let cu: f64 = self.c_u.iter().zip(u).map(|(w, v)| w * v).sum();
        wx + self.c_a * a + cu + self.b_y
    }

    /// Closed-form mean and covariance of `X`.
    pub fn x_moments(&self) -> (Vec<f64>, Tensor) {
        let mut cov = self.w_u.matmul_nt(&self.w_u);
        let wa_wa = self.w_a.matmul_nt(&self.w_a).scale(self.sigma_a * self.sigma_a);
        cov.add_assign(&wa_wa);
        (self.b_x.clone(), cov)
    }

    /// `n` i.i.d. draws of `(A, X, Y)`; per row `A` is drawn first, then `U`.
    pub fn sample(&self, n: usize, rng: &mut RngStream) -> Result<Dataset> {
        if n == 0 {
            return Err(Error::arg("sample size must be at least 1"));
        }
        let (dx, du) = (self.d_x(), self.d_u());
        let mut a = Vec::with_capacity(n);
        let mut x = Vec::with_capacity(n * dx);
        let mut y = Vec::with_capacity(n);
        for _ in 0..n {
            let ai = self.sigma_a * rng.normal();
            let u: Vec<f64> = (0..du).map(|_| rng.normal()).collect();
            let xi = self.mechanism_x(ai, &u);
            y.push(self.mechanism_y(&xi, ai, &u));
            a.push(ai);
            x.extend_from_slice(&xi);
        }
        let x_names = (1..=dx).map(|i| format!("X{i}")).collect();
        Dataset::new(
            Tensor::column(&a),
            Tensor::from_vec(n, dx, x)?,
            Tensor::column(&y),
            vec!["A".into()],
            x_names,
            vec!["Y".into()],
        )
    }

    /// Posterior of `U` given `X = x, A = a`.
    pub fn analytic_posterior(&self, x: &[f64], a: f64) -> Result<GaussianPosterior> {
        if x.len() != self.d_x() {
            return Err(Error::arg(format!("evidence has width {} but d_x = {}", x.len(), self.d_x())));
        }
        let w = self.w_u_matrix();
        let ginv = self.gram_inverse()?;
        let residual = DVector::from_iterator(
            self.d_x(),
            (0..self.d_x()).map(|r| x[r] - self.w_a.get(r, 0) * a - self.b_x[r]),
        );
        let proj = w.transpose() * &ginv;
        let mean = &proj * residual;
        let du = self.d_u();
        let mut cov = DMatrix::identity(du, du) - &proj * &w;
        cov = (&cov + cov.transpose()) * 0.5;
        let eig = SymmetricEigen::new(cov.clone());
        // eigenvalues at roundoff level are zero: the posterior is degenerate
        // along W_U's row space and √ε would leak into that direction
        let cutoff = 1e-10 * eig.eigenvalues.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        let mut factor = Tensor::zeros(du, du);
        for c in 0..du {
            let ev = eig.eigenvalues[c];
            let s = if ev > cutoff { ev.sqrt() } else { 0.0 };
            for r in 0..du {
                factor.set(r, c, eig.eigenvectors[(r, c)] * s);
            }
        }
        let covariance = Tensor::from_vec(du, du, cov.transpose().as_slice().to_vec())?;
        Ok(GaussianPosterior {
            mean: mean.as_slice().to_vec(),
            covariance,
            factor,
        })
    }

    /// Abduct `U | x, a`, intervene `A ← a′`, and replay the X mechanism.
    pub fn analytic_counterfactual(
        &self,
        x: &[f64],
        a: f64,
        a_prime: f64,
        q: usize,
        rng: &mut RngStream,
    ) -> Result<Tensor> {
        if q == 0 {
            return Err(Error::arg("counterfactual sample count must be at least 1"));
        }
        let post = self.analytic_posterior(x, a)?;
        let u = post.sample(q, rng);
        let mut out = Tensor::zeros(q, self.d_x());
        for i in 0..q {
            out.row_mut(i).copy_from_slice(&self.mechanism_x(a_prime, u.row(i)));
        }
        Ok(out)
    }
}
