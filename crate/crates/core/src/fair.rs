//! Stage 2: a predictor `h_φ(x, a) → y` trained on `ℓ_pred + λ·ℓ_fair`, where
//! `ℓ_fair` compares predictions on model counterfactuals with predictions on
//! model-replayed factuals, plus the evaluation metrics for trade-off curves.

use std::path::Path;

use log::info;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::checkpoint::write_atomic;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kernels::{median_heuristic, Kernel};
use crate::ncm::{repeat_rows, AbductorModel, MechanismModel, RhoPolicy};
use crate::nn::{Activation, AdamConfig, AdamState, BoundMlp, Mlp, DEFAULT_HIDDEN};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// `h_φ(x, a) → y`.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictor {
    pub net: Mlp,
    pub d_x: usize,
    pub d_a: usize,
}

impl Predictor {
    pub fn new(d_x: usize, d_a: usize, d_y: usize, hidden: &[usize], activation: Activation, rng: &mut RngStream) -> Result<Self> {
        let dims = [&[d_x + d_a][..], hidden, &[d_y]].concat();
        Self::from_net(Mlp::new(&dims, activation, rng)?, d_x, d_a)
    }

    pub fn from_net(net: Mlp, d_x: usize, d_a: usize) -> Result<Self> {
        if net.input_dim() != d_x + d_a {
            return Err(Error::Model(format!(
                "predictor input width {} does not equal d_x + d_a = {d_x} + {d_a}",
                net.input_dim()
            )));
        }
        Ok(Self { net, d_x, d_a })
    }

    /// `h ≡ value`, ignoring its inputs.
    pub fn constant(d_x: usize, d_a: usize, value: &[f64]) -> Result<Self> {
        let w = Tensor::zeros(d_x + d_a, value.len());
        let net = Mlp::from_layers(vec![(w, Tensor::row_vector(value))], Activation::Tanh)?;
        Self::from_net(net, d_x, d_a)
    }

    pub fn d_y(&self) -> usize {
        self.net.output_dim()
    }

    pub fn predict(&self, x: &Tensor, a: &Tensor) -> Result<Tensor> {
        if x.cols() != self.d_x || a.cols() != self.d_a || x.rows() != a.rows() {
            return Err(Error::arg(format!(
                "predictor expects x: n×{} and a: n×{}, got {:?} and {:?}",
                self.d_x,
                self.d_a,
                x.shape(),
                a.shape()
            )));
        }
        self.net.forward(&Tensor::concat_cols(&[x, a]))
    }

    fn forward(bound: &BoundMlp, g: &mut Graph, x: Var, a: Var) -> Var {
        let input = g.concat_cols(&[x, a]);
        bound.forward(g, input)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FairnessLoss {
    /// Squared MMD between counterfactual and factual prediction samples.
    Mmd,
    /// Squared difference of the two prediction sample means.
    MeanMse,
}

impl FairnessLoss {
    pub fn label(self) -> &'static str {
        match self {
            FairnessLoss::Mmd => "mmd",
            FairnessLoss::MeanMse => "mean_mse",
        }
    }
}

/// Distribution the intervention values `a′` are drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterventionSampler {
    /// `N(0, I)` in the (normalized) attribute coordinates.
    StandardNormal,
    /// Uniform draws from the training set's attribute values.
    Empirical,
}

impl InterventionSampler {
    fn sample(self, n: usize, pool: &Tensor, rng: &mut RngStream) -> Tensor {
        match self {
            InterventionSampler::StandardNormal => rng.gaussian(n, pool.cols()),
            InterventionSampler::Empirical => {
                let idx: Vec<usize> = (0..n).map(|_| rng.index(pool.rows())).collect();
                pool.gather_rows(&idx)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FairTrainConfig {
    pub lambda_fair: f64,
    pub n_fair: usize,
    pub q_intv: usize,
    pub q_abd: usize,
    pub fairness_loss: FairnessLoss,
    pub intervention_sampler: InterventionSampler,
    /// Share posterior noise between the factual and counterfactual branches
    /// during training. Evaluation always draws them independently.
    pub common_random_numbers: bool,
    pub steps: usize,
    pub lr: f64,
    pub rho: RhoPolicy,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub eval_q_intv: usize,
    pub eval_q_abd: usize,
    pub log_every: usize,
}

impl Default for FairTrainConfig {
    fn default() -> Self {
        Self {
            lambda_fair: 0.0,
            n_fair: 128,
            q_intv: 4,
            q_abd: 16,
            fairness_loss: FairnessLoss::Mmd,
            intervention_sampler: InterventionSampler::StandardNormal,
            common_random_numbers: true,
            steps: 1000,
            lr: 1e-3,
            rho: RhoPolicy::Median,
            hidden: vec![DEFAULT_HIDDEN, DEFAULT_HIDDEN],
            activation: Activation::Tanh,
            eval_q_intv: 4,
            eval_q_abd: 16,
            log_every: 100,
        }
    }
}

impl FairTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_fair >= 0.0 && self.lambda_fair.is_finite()) {
            return Err(Error::Config(format!("lambda_fair must be finite and non-negative, got {}", self.lambda_fair)));
        }
        for (name, v) in [
            ("n_fair", self.n_fair),
            ("q_intv", self.q_intv),
            ("q_abd", self.q_abd),
            ("eval_q_intv", self.eval_q_intv),
            ("eval_q_abd", self.eval_q_abd),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        if let RhoPolicy::Fixed { rho } = self.rho {
            Kernel::new(rho)?;
        }
        Ok(())
    }

    pub fn kernel(&self, train: &Dataset) -> Result<Kernel> {
        match self.rho {
            RhoPolicy::Fixed { rho } => Kernel::new(rho),
            RhoPolicy::Median => Kernel::new(median_heuristic(&train.y)?),
        }
    }
}

/// Model-generated predictor inputs for one batch. Group `g = i·q_intv + j`
/// owns rows `g·q_abd..(g+1)·q_abd` of the counterfactual tensors; factual
/// rows are stored once per datum (`i·q_abd + k`).
#[derive(Clone, Debug, PartialEq)]
pub struct FairSamples {
    pub cf_x: Tensor,
    pub cf_a: Tensor,
    pub fact_x: Tensor,
    pub fact_a: Tensor,
    pub n: usize,
    pub q_intv: usize,
    pub q_abd: usize,
}

impl FairSamples {
    /// For each counterfactual row, the index of its factual partner set.
    pub fn fact_index(&self) -> Vec<usize> {
        let (qi, qa) = (self.q_intv, self.q_abd);
        (0..self.n * qi * qa).map(|r| (r / (qi * qa)) * qa + r % qa).collect()
    }
}

/// Counterfactual inputs `M_θ(a′ⱼ, A_ψ(xᵢ, aᵢ, η̃))` and factual replays
/// `M_θ(aᵢ, A_ψ(xᵢ, aᵢ, η̄))` for a batch. `pool` feeds the empirical
/// intervention sampler.
#[allow(clippy::too_many_arguments)]
pub fn draw_fair_samples(
    theta: &MechanismModel,
    psi: &AbductorModel,
    a: &Tensor,
    x: &Tensor,
    q_intv: usize,
    q_abd: usize,
    sampler: InterventionSampler,
    pool: &Tensor,
    crn: bool,
    rng: &mut RngStream,
) -> Result<FairSamples> {
    let n = a.rows();
    if n == 0 || x.rows() != n {
        return Err(Error::arg(format!("fairness batch needs matching non-empty a and x, got {} and {}", n, x.rows())));
    }
    if q_intv == 0 || q_abd == 0 {
        return Err(Error::arg("q_intv and q_abd must be at least 1"));
    }
    let a_prime = sampler.sample(n * q_intv, pool, rng);
    let fact_noise = rng.gaussian(n * q_abd, psi.d_noise);
    let a_f = repeat_rows(a, q_abd);
    let u_f = psi.forward(&repeat_rows(x, q_abd), &a_f, &fact_noise)?;
    let fact_x = theta.forward(&a_f, &u_f)?;
    let rows = n * q_intv * q_abd;
    let map: Vec<usize> = (0..rows).map(|r| (r / (q_intv * q_abd)) * q_abd + r % q_abd).collect();
    let u_cf = if crn {
        u_f.gather_rows(&map)
    } else {
        let noise = rng.gaussian(rows, psi.d_noise);
        let src: Vec<usize> = (0..rows).map(|r| r / (q_intv * q_abd)).collect();
        psi.forward(&x.gather_rows(&src), &a.gather_rows(&src), &noise)?
    };
    let cf_a = repeat_rows(&a_prime, q_abd);
    let cf_x = theta.forward(&cf_a, &u_cf)?;
    Ok(FairSamples {
        cf_x,
        cf_a,
        fact_x,
        fact_a: a_f,
        n,
        q_intv,
        q_abd,
    })
}

/// `ℓ_fair` from prediction nodes laid out as in [`FairSamples`], with the
/// factual predictions already expanded to one set per group.
pub fn fair_term_from_predictions(g: &mut Graph, cf: Var, fact: Var, q_abd: usize, kind: FairnessLoss, kernel: &Kernel) -> Var {
    match kind {
        FairnessLoss::Mmd => {
            let per = g.grouped_mmd2(cf, fact, q_abd, q_abd, kernel);
            g.mean(per)
        }
        FairnessLoss::MeanMse => {
            let mc = g.group_mean(cf, q_abd);
            let mf = g.group_mean(fact, q_abd);
            let diff = g.sub(mc, mf);
            let sq = g.square(diff);
            let per = g.sum_cols(sq);
            g.mean(per)
        }
    }
}

/// Fairness loss of explicit prediction sets: `cf` and `fact` hold the same
/// number of groups of `q` rows each.
pub fn fairness_of_predictions(cf: &Tensor, fact: &Tensor, q: usize, kind: FairnessLoss, kernel: &Kernel) -> Result<f64> {
    if q == 0 || cf.shape() != fact.shape() || cf.rows() % q != 0 || cf.rows() == 0 {
        return Err(Error::arg(format!(
            "prediction sets must have equal shapes divisible into groups of {q}, got {:?} and {:?}",
            cf.shape(),
            fact.shape()
        )));
    }
    let mut g = Graph::new();
    let c = g.constant(cf.clone());
    let f = g.constant(fact.clone());
    let v = fair_term_from_predictions(&mut g, c, f, q, kind, kernel);
    g.check()?;
    Ok(g.value(v).item())
}

/// `ℓ_fair` of the predictor bound as `h` on drawn samples.
pub fn fair_term(g: &mut Graph, h: &BoundMlp, s: &FairSamples, kind: FairnessLoss, kernel: &Kernel) -> Var {
    let cx = g.constant(s.cf_x.clone());
    let ca = g.constant(s.cf_a.clone());
    let fx = g.constant(s.fact_x.clone());
    let fa = g.constant(s.fact_a.clone());
    let cf = Predictor::forward(h, g, cx, ca);
    let fact = Predictor::forward(h, g, fx, fa);
    let fact = g.gather_rows(fact, s.fact_index());
    fair_term_from_predictions(g, cf, fact, s.q_abd, kind, kernel)
}

/// Mean squared prediction error of the predictor bound as `h`.
pub fn pred_term(g: &mut Graph, h: &BoundMlp, a: &Tensor, x: &Tensor, y: &Tensor) -> Var {
    let xv = g.constant(x.clone());
    let av = g.constant(a.clone());
    let yv = g.constant(y.clone());
    let pred = Predictor::forward(h, g, xv, av);
    let diff = g.sub(pred, yv);
    let sq = g.square(diff);
    g.mean(sq)
}

/// Mean squared error of `h(x, a)` against `y`.
pub fn loss_pred(h: &Predictor, a: &Tensor, x: &Tensor, y: &Tensor) -> Result<f64> {
    let pred = h.predict(x, a)?;
    if pred.shape() != y.shape() || y.rows() == 0 {
        return Err(Error::arg(format!("targets {:?} do not match predictions {:?}", y.shape(), pred.shape())));
    }
    let mut g = Graph::new();
    let b = h.net.bind(&mut g, false);
    let v = pred_term(&mut g, &b, a, x, y);
    g.check()?;
    Ok(g.value(v).item())
}

#[allow(clippy::too_many_arguments)]
fn fairness_loss(
    kind: FairnessLoss,
    h: &Predictor,
    theta: &MechanismModel,
    psi: &AbductorModel,
    a: &Tensor,
    x: &Tensor,
    q_intv: usize,
    q_abd: usize,
    crn: bool,
    kernel: &Kernel,
    rng: &mut RngStream,
) -> Result<f64> {
    let s = draw_fair_samples(theta, psi, a, x, q_intv, q_abd, InterventionSampler::StandardNormal, a, crn, rng)?;
    let mut g = Graph::new();
    let b = h.net.bind(&mut g, false);
    let v = fair_term(&mut g, &b, &s, kind, kernel);
    g.check()?;
    Ok(g.value(v).item())
}

/// `ℓ_fair` with the MMD metric and standard-normal interventions.
#[allow(clippy::too_many_arguments)]
pub fn loss_fair_mmd(
    h: &Predictor,
    theta: &MechanismModel,
    psi: &AbductorModel,
    a: &Tensor,
    x: &Tensor,
    q_intv: usize,
    q_abd: usize,
    crn: bool,
    kernel: &Kernel,
    rng: &mut RngStream,
) -> Result<f64> {
    fairness_loss(FairnessLoss::Mmd, h, theta, psi, a, x, q_intv, q_abd, crn, kernel, rng)
}

/// The mean-difference baseline of `ℓ_fair`, same sampling structure.
#[allow(clippy::too_many_arguments)]
pub fn loss_fair_mean_mse(
    h: &Predictor,
    theta: &MechanismModel,
    psi: &AbductorModel,
    a: &Tensor,
    x: &Tensor,
    q_intv: usize,
    q_abd: usize,
    crn: bool,
    rng: &mut RngStream,
) -> Result<f64> {
    // the kernel is unused by the mean metric
    let k = Kernel::new(1.0)?;
    fairness_loss(FairnessLoss::MeanMse, h, theta, psi, a, x, q_intv, q_abd, crn, &k, rng)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FairRecord {
    pub step: usize,
    pub l_pred: f64,
    pub l_fair: Option<f64>,
    pub total: f64,
}

pub fn write_fair_history_csv(history: &[FairRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["step", "l_pred", "l_fair", "total"])?;
    for r in history {
        w.write_record([
            r.step.to_string(),
            r.l_pred.to_string(),
            r.l_fair.map_or(String::new(), |v| v.to_string()),
            r.total.to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    write_atomic(path, &bytes)
}

#[derive(Clone, Debug)]
pub struct FairResult {
    pub h: Predictor,
    pub history: Vec<FairRecord>,
    pub kernel: Kernel,
}

/// Minimizes `ℓ_pred + λ_fair·ℓ_fair` over the predictor only. Minibatches
/// come from `rng.derive("batch")` and counterfactual draws from
/// `rng.derive("fair")`, so `λ_fair = 0` reproduces plain MSE training.
pub fn train_fair(
    h: Predictor,
    theta: &MechanismModel,
    psi: &AbductorModel,
    train: &Dataset,
    cfg: &FairTrainConfig,
    rng: &RngStream,
) -> Result<FairResult> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::arg("training set is empty"));
    }
    let kernel = cfg.kernel(train)?;
    let mut batch_rng = rng.derive("batch");
    let mut fair_rng = rng.derive("fair");
    let mut h = h;
    let mut opt = AdamState::for_mlp(&h.net, AdamConfig::with_lr(cfg.lr));
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx = batch_rng.sample_indices(train.len(), cfg.n_fair.min(train.len()));
        let (a, x, y) = (train.a.gather_rows(&idx), train.x.gather_rows(&idx), train.y.gather_rows(&idx));
        let mut g = Graph::new();
        let b = h.net.bind(&mut g, true);
        let lp = pred_term(&mut g, &b, &a, &x, &y);
        let mut rec = FairRecord {
            step,
            l_pred: g.value(lp).item(),
            l_fair: None,
            total: 0.0,
        };
        let total = if cfg.lambda_fair > 0.0 {
            let s = draw_fair_samples(
                theta,
                psi,
                &a,
                &x,
                cfg.q_intv,
                cfg.q_abd,
                cfg.intervention_sampler,
                &train.a,
                cfg.common_random_numbers,
                &mut fair_rng,
            )?;
            let lf = fair_term(&mut g, &b, &s, cfg.fairness_loss, &kernel);
            rec.l_fair = Some(g.value(lf).item());
            g.weighted_sum(&[(lp, 1.0), (lf, cfg.lambda_fair)])
        } else {
            lp
        };
        rec.total = g.value(total).item();
        let as_training = |e: Error| match e {
            Error::Numerical { op, detail } => Error::Training {
                step,
                detail: format!("{op}: {detail}"),
            },
            other => other,
        };
        if !rec.total.is_finite() {
            return Err(Error::Training {
                step,
                detail: format!("loss is {}", rec.total),
            });
        }
        let mut grads = g.backward(total).map_err(as_training)?;
        let gr = b.grads(&mut grads);
        opt.step_mlp(&mut h.net, &gr).map_err(as_training)?;
        if cfg.log_every > 0 && step % cfg.log_every == 0 {
            info!("stage2 step {step}: pred {:.6} fair {:?}", rec.l_pred, rec.l_fair);
        }
        history.push(rec);
    }
    Ok(FairResult { h, history, kernel })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub mse: f64,
    pub explained_variance: f64,
    pub fair_mmd: f64,
    pub fair_mean_mse: f64,
    pub q_intv: usize,
    pub q_abd: usize,
    pub n: usize,
}

/// Test-set performance and both fairness scores. Counterfactual and factual
/// branches use independent posterior draws.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    h: &Predictor,
    theta: &MechanismModel,
    psi: &AbductorModel,
    test: &Dataset,
    q_intv: usize,
    q_abd: usize,
    sampler: InterventionSampler,
    pool: &Tensor,
    kernel: &Kernel,
    rng: &mut RngStream,
) -> Result<EvalMetrics> {
    if test.is_empty() {
        return Err(Error::arg("test set is empty"));
    }
    let pred = h.predict(&test.x, &test.a)?;
    let (mse, explained_variance) = regression_scores(&pred, &test.y)?;
    let s = draw_fair_samples(theta, psi, &test.a, &test.x, q_intv, q_abd, sampler, pool, false, rng)?;
    let cf = h.predict(&s.cf_x, &s.cf_a)?;
    let fact = h.predict(&s.fact_x, &s.fact_a)?.gather_rows(&s.fact_index());
    Ok(EvalMetrics {
        mse,
        explained_variance,
        fair_mmd: fairness_of_predictions(&cf, &fact, q_abd, FairnessLoss::Mmd, kernel)?,
        fair_mean_mse: fairness_of_predictions(&cf, &fact, q_abd, FairnessLoss::MeanMse, kernel)?,
        q_intv,
        q_abd,
        n: test.len(),
    })
}

/// `(MSE, 1 − Var(y − ŷ)/Var(y))`, both averaged over output columns.
pub fn regression_scores(pred: &Tensor, y: &Tensor) -> Result<(f64, f64)> {
    if pred.shape() != y.shape() || y.rows() == 0 {
        return Err(Error::arg(format!("prediction shape {:?} does not match targets {:?}", pred.shape(), y.shape())));
    }
    let n = y.rows() as f64;
    let mut mse = 0.0;
    let mut ev = 0.0;
    for c in 0..y.cols() {
        let col = |t: &Tensor| (0..t.rows()).map(|r| t.get(r, c)).collect::<Vec<f64>>();
        let (yc, pc) = (col(y), col(pred));
        let resid: Vec<f64> = yc.iter().zip(&pc).map(|(a, b)| a - b).collect();
        mse += resid.iter().map(|r| r * r).sum::<f64>() / n;
        let var = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / n;
            v.iter().map(|t| (t - m).powi(2)).sum::<f64>() / n
        };
        let vy = var(&yc);
        if vy == 0.0 {
            return Err(Error::arg("explained variance is undefined for constant targets"));
        }
        ev += 1.0 - var(&resid) / vy;
    }
    let k = y.cols() as f64;
    Ok((mse / k, ev / k))
}
