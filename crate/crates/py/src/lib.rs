//! Python bindings: SCM sampling, kernels, stage-1 training, counterfactual
//! generation and stage-2 fair predictor runs. Matrices cross the boundary as
//! lists of rows; configs as JSON strings using the TOML section schemas.

use std::path::PathBuf;

use ncmfair::checkpoint::Checkpoint;
use ncmfair::data::{split, Dataset as CoreDataset};
use ncmfair::fair::FairTrainConfig;
use ncmfair::kernels::{median_heuristic, mmd2_mean_vs_mean, mmd2_mean_vs_point, Kernel as CoreKernel};
use ncmfair::ncm::{generate_counterfactual, sample_posterior, train_stage1, AbductorModel, GenTrainConfig, MechanismModel};
use ncmfair::rng::RngStream;
use ncmfair::scm::LinearGaussianScm;
use ncmfair::tensor::Tensor;
use ncmfair::tradeoff::{compare as core_compare, run_point, SweepContext, TradeoffPoint};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

type Rows = Vec<Vec<f64>>;

fn py_err(e: ncmfair::Error) -> PyErr {
    match e {
        ncmfair::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        ncmfair::Error::Training { .. } | ncmfair::Error::Numerical { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn tensor(rows: &Rows) -> PyResult<Tensor> {
    Tensor::from_rows(rows).map_err(py_err)
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(format!("invalid config JSON: {e}"))
}

/// A dataset of sensitive attribute `a`, features `x` and target `y`.
#[pyclass(module = "ncmfair_py")]
#[derive(Clone)]
pub struct Dataset {
    inner: CoreDataset,
}

#[pymethods]
impl Dataset {
    /// Reads a CSV written by the CLI, with an optional normalization sidecar.
    #[staticmethod]
    #[pyo3(signature = (path, sidecar=None))]
    fn read_csv(path: PathBuf, sidecar: Option<PathBuf>) -> PyResult<Self> {
        let inner = CoreDataset::read_csv(&path, sidecar.as_deref()).map_err(py_err)?;
        Ok(Self { inner })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn a(&self) -> Rows {
        self.inner.a.to_rows()
    }

    #[getter]
    fn x(&self) -> Rows {
        self.inner.x.to_rows()
    }

    #[getter]
    fn y(&self) -> Rows {
        self.inner.y.to_rows()
    }

    #[getter]
    fn x_names(&self) -> Vec<String> {
        self.inner.x_names.clone()
    }

    #[getter]
    fn normalized(&self) -> bool {
        self.inner.normalization.is_some()
    }

    /// Shuffled `(train, test)` split, both standardized with train statistics.
    fn split(&self, train_fraction: f64, seed: u64) -> PyResult<(Dataset, Dataset)> {
        let (tr, te) = split(&self.inner, train_fraction, &mut RngStream::named(seed, "split")).map_err(py_err)?;
        Ok((Dataset { inner: tr }, Dataset { inner: te }))
    }

    #[pyo3(signature = (path, sidecar=None))]
    fn write_csv(&self, path: PathBuf, sidecar: Option<PathBuf>) -> PyResult<()> {
        self.inner.write_csv(&path, sidecar.as_deref()).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!("Dataset(n={}, d_a={}, d_x={}, d_y={})", self.inner.len(), self.inner.d_a(), self.inner.d_x(), self.inner.d_y())
    }
}

/// The linear-Gaussian insurance SCM.
#[pyclass(module = "ncmfair_py")]
#[derive(Clone)]
pub struct Scm {
    inner: LinearGaussianScm,
}

#[pymethods]
impl Scm {
    /// The bundled coefficients.
    #[staticmethod]
    fn default() -> Self {
        Self {
            inner: LinearGaussianScm::default_insurance(),
        }
    }

    /// Coefficients drawn from `seed`.
    #[staticmethod]
    fn seeded(seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: LinearGaussianScm::seeded(seed).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: LinearGaussianScm::from_json(text).map_err(py_err)?,
        })
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(py_err)
    }

    #[getter]
    fn d_u(&self) -> usize {
        self.inner.d_u()
    }

    #[getter]
    fn d_x(&self) -> usize {
        self.inner.d_x()
    }

    fn sample(&self, n: usize, seed: u64) -> PyResult<Dataset> {
        let inner = self.inner.sample(n, &mut RngStream::named(seed, "data")).map_err(py_err)?;
        Ok(Dataset { inner })
    }

    /// `(mean, covariance)` of `u` given raw evidence `(x, a)`.
    fn posterior(&self, x: Vec<f64>, a: f64) -> PyResult<(Vec<f64>, Rows)> {
        let p = self.inner.analytic_posterior(&x, a).map_err(py_err)?;
        Ok((p.mean.clone(), p.covariance.to_rows()))
    }

    /// `q` draws of the counterfactual `x` under `do(A = a_prime)`.
    fn counterfactual(&self, x: Vec<f64>, a: f64, a_prime: f64, q: usize, seed: u64) -> PyResult<Rows> {
        let t = self
            .inner
            .analytic_counterfactual(&x, a, a_prime, q, &mut RngStream::named(seed, "counterfactual"))
            .map_err(py_err)?;
        Ok(t.to_rows())
    }
}

/// Inverse multiquadric kernel.
#[pyclass(module = "ncmfair_py")]
#[derive(Clone, Copy)]
pub struct Kernel {
    inner: CoreKernel,
}

#[pymethods]
impl Kernel {
    #[new]
    fn new(rho: f64) -> PyResult<Self> {
        Ok(Self {
            inner: CoreKernel::new(rho).map_err(py_err)?,
        })
    }

    /// Kernel scale from the median pairwise squared distance of `samples`.
    #[staticmethod]
    fn median_heuristic(samples: Rows) -> PyResult<Self> {
        let rho = median_heuristic(&tensor(&samples)?).map_err(py_err)?;
        Self::new(rho)
    }

    #[getter]
    fn rho(&self) -> f64 {
        self.inner.rho()
    }

    fn __call__(&self, x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
        if x.len() != y.len() {
            return Err(PyValueError::new_err("vectors differ in length"));
        }
        Ok(self.inner.eval(&x, &y))
    }

    /// Squared MMD between two sample sets.
    fn mmd2(&self, a: Rows, b: Rows) -> PyResult<f64> {
        mmd2_mean_vs_mean(&tensor(&a)?, &tensor(&b)?, &self.inner).map_err(py_err)
    }

    /// Squared MMD between a sample set and a point mass.
    fn mmd2_point(&self, samples: Rows, target: Vec<f64>) -> PyResult<f64> {
        mmd2_mean_vs_point(&tensor(&samples)?, &target, &self.inner).map_err(py_err)
    }
}

/// A trained counterfactual generator: mechanism plus abductor.
#[pyclass(module = "ncmfair_py")]
#[derive(Clone)]
pub struct Ncm {
    theta: MechanismModel,
    psi: AbductorModel,
    history: Vec<ncmfair::ncm::LossRecord>,
}

#[pymethods]
impl Ncm {
    /// Trains on `train`. `config_json` follows the `[stage1]` config section.
    #[staticmethod]
    #[pyo3(signature = (train, seed, config_json=None))]
    fn train(py: Python<'_>, train: &Dataset, seed: u64, config_json: Option<&str>) -> PyResult<Self> {
        let cfg: GenTrainConfig = serde_json::from_str(config_json.unwrap_or("{}")).map_err(json_err)?;
        let data = train.inner.clone();
        let res = py
            .allow_threads(move || {
                let rng = RngStream::named(seed, "stage1");
                let (t, p) = cfg.init_models(data.d_a(), data.d_x(), &mut rng.clone())?;
                train_stage1(t, p, &data, &cfg, &rng)
            })
            .map_err(py_err)?;
        Ok(Self {
            theta: res.theta,
            psi: res.psi,
            history: res.history,
        })
    }

    /// The exact generator of `scm`, optionally in the coordinates of `data`.
    #[staticmethod]
    #[pyo3(signature = (scm, data=None))]
    fn oracle(scm: &Scm, data: Option<&Dataset>) -> PyResult<Self> {
        let norm = data.and_then(|d| d.inner.normalization.as_ref());
        Ok(Self {
            theta: MechanismModel::from_scm(&scm.inner, norm).map_err(py_err)?,
            psi: AbductorModel::from_scm(&scm.inner, norm).map_err(py_err)?,
            history: Vec::new(),
        })
    }

    /// Loads `theta.json` and `psi.json` checkpoints.
    #[staticmethod]
    fn load(theta_path: PathBuf, psi_path: PathBuf) -> PyResult<Self> {
        let tc = Checkpoint::load(&theta_path).map_err(py_err)?;
        let pc = Checkpoint::load(&psi_path).map_err(py_err)?;
        let theta = MechanismModel::from_net(tc.to_mlp().map_err(py_err)?, tc.dim("d_a").map_err(py_err)?, tc.dim("d_u").map_err(py_err)?).map_err(py_err)?;
        let psi = AbductorModel::from_net(
            pc.to_mlp().map_err(py_err)?,
            pc.dim("d_x").map_err(py_err)?,
            pc.dim("d_a").map_err(py_err)?,
            pc.dim("d_noise").map_err(py_err)?,
        )
        .map_err(py_err)?;
        Ok(Self { theta, psi, history: Vec::new() })
    }

    /// Logged `(step, l_gen, l_pos, l_ctf, l_reg, total)` rows.
    #[getter]
    fn history(&self) -> Vec<(usize, Option<f64>, Option<f64>, Option<f64>, Option<f64>, f64)> {
        self.history.iter().map(|r| (r.step, r.l_gen, r.l_pos, r.l_ctf, r.l_reg, r.total)).collect()
    }

    #[getter]
    fn d_u(&self) -> usize {
        self.theta.d_u
    }

    /// `q` model samples of `x` under `do(A = a)`.
    fn sample_x(&self, a: Vec<f64>, q: usize, seed: u64) -> PyResult<Rows> {
        let mut rng = RngStream::named(seed, "sample");
        let eta = rng.gaussian(q, self.theta.d_u);
        let a_rep = Tensor::from_rows(&vec![a; q]).map_err(py_err)?;
        Ok(self.theta.forward(&a_rep, &eta).map_err(py_err)?.to_rows())
    }

    /// `q` posterior draws of the exogenous noise given `(x, a)`.
    fn abduct(&self, x: Vec<f64>, a: Vec<f64>, q: usize, seed: u64) -> PyResult<Rows> {
        let t = sample_posterior(&self.psi, &x, &a, q, &mut RngStream::named(seed, "abduct")).map_err(py_err)?;
        Ok(t.to_rows())
    }

    /// `q` counterfactual draws of `x` for evidence `(x, a)` under `do(A = a_prime)`.
    fn counterfactual(&self, x: Vec<f64>, a: Vec<f64>, a_prime: Vec<f64>, q: usize, seed: u64) -> PyResult<Rows> {
        let t = generate_counterfactual(&self.theta, &self.psi, &x, &a, &a_prime, q, &mut RngStream::named(seed, "counterfactual")).map_err(py_err)?;
        Ok(t.to_rows())
    }

    /// Trains and evaluates one predictor; returns its point and metrics as
    /// JSON. `config_json` follows the `[stage2]` config section.
    #[pyo3(signature = (train, test, lambda_fair, seed, repeat=0, config_json=None))]
    fn train_fair(&self, py: Python<'_>, train: &Dataset, test: &Dataset, lambda_fair: f64, seed: u64, repeat: usize, config_json: Option<&str>) -> PyResult<String> {
        let cfg: FairTrainConfig = serde_json::from_str(config_json.unwrap_or("{}")).map_err(json_err)?;
        let (tr, te) = (&train.inner, &test.inner);
        let run = py
            .allow_threads(|| {
                let ctx = SweepContext {
                    theta: &self.theta,
                    psi: &self.psi,
                    train: tr,
                    test: te,
                };
                run_point(&ctx, &cfg, lambda_fair, repeat, seed)
            })
            .map_err(py_err)?;
        let v = serde_json::json!({ "point": run.point, "metrics": run.metrics });
        Ok(v.to_string())
    }
}

/// AUC comparison of two methods' trade-off points, each a list of
/// `(method, lambda_fair, seed, E, F, mse)` tuples. Returns JSON.
#[pyfunction]
fn compare(first: Vec<(String, f64, u64, f64, f64, f64)>, second: Vec<(String, f64, u64, f64, f64, f64)>) -> PyResult<String> {
    let conv = |v: Vec<(String, f64, u64, f64, f64, f64)>| -> Vec<TradeoffPoint> {
        v.into_iter()
            .map(|(method, lambda_fair, seed, e, f, mse)| TradeoffPoint {
                method,
                lambda_fair,
                seed,
                e,
                f,
                mse,
            })
            .collect()
    };
    let c = core_compare(&conv(first), &conv(second)).map_err(py_err)?;
    serde_json::to_string(&c).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pymodule]
fn ncmfair_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Dataset>()?;
    m.add_class::<Scm>()?;
    m.add_class::<Kernel>()?;
    m.add_class::<Ncm>()?;
    m.add_function(wrap_pyfunction!(compare, m)?)?;
    Ok(())
}
