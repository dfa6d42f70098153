//! Fairness/performance trade-off curves: λ sweeps, line fits, areas under
//! the fitted `F(E)` lines, method comparison and SVG/CSV output.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::checkpoint::write_atomic;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fair::{evaluate, train_fair, EvalMetrics, FairRecord, FairTrainConfig, Predictor};
use crate::ncm::{AbductorModel, MechanismModel};
use crate::rng::RngStream;

/// How far past the observed `E` range an integral may reach, as a fraction
/// of the range width.
pub const EXTRAPOLATION_ALLOWANCE: f64 = 0.05;

/// Absolute AUC difference below which two methods tie.
pub const TIE_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TradeoffPoint {
    pub method: String,
    pub lambda_fair: f64,
    pub seed: u64,
    /// Performance (explained variance, higher is better).
    #[serde(rename = "E")]
    pub e: f64,
    /// Counterfactual unfairness (squared MMD, lower is better).
    #[serde(rename = "F")]
    pub f: f64,
    pub mse: f64,
}

fn sort_points(points: &mut [TradeoffPoint]) {
    points.sort_by(|p, q| {
        p.method
            .cmp(&q.method)
            .then(p.lambda_fair.total_cmp(&q.lambda_fair))
            .then(p.seed.cmp(&q.seed))
    });
}

/// Ordinary least-squares line `F = slope·E + intercept`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FittedCurve {
    pub slope: f64,
    pub intercept: f64,
    pub e_min: f64,
    pub e_max: f64,
    pub n_points: usize,
}

impl FittedCurve {
    pub fn at(&self, e: f64) -> f64 {
        self.slope * e + self.intercept
    }
}

pub fn fit_line(points: &[TradeoffPoint]) -> Result<FittedCurve> {
    if points.len() < 2 {
        return Err(Error::DegenerateFit(format!("a line needs at least 2 points, got {}", points.len())));
    }
    let n = points.len() as f64;
    let me = points.iter().map(|p| p.e).sum::<f64>() / n;
    let mf = points.iter().map(|p| p.f).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.e - me).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.e - me) * (p.f - mf)).sum();
    let e_min = points.iter().map(|p| p.e).fold(f64::INFINITY, f64::min);
    let e_max = points.iter().map(|p| p.e).fold(f64::NEG_INFINITY, f64::max);
    if e_min == e_max || sxx == 0.0 {
        return Err(Error::DegenerateFit(format!("all {} points share E = {e_min}", points.len())));
    }
    let slope = sxy / sxx;
    Ok(FittedCurve {
        slope,
        intercept: mf - slope * me,
        e_min,
        e_max,
        n_points: points.len(),
    })
}

/// `∫_{e_lo}^{e_hi} (slope·E + intercept) dE`.
pub fn auc(curve: &FittedCurve, e_lo: f64, e_hi: f64) -> Result<f64> {
    if !(e_lo < e_hi) {
        return Err(Error::arg(format!("integration range [{e_lo}, {e_hi}] is empty or inverted")));
    }
    let slack = EXTRAPOLATION_ALLOWANCE * (curve.e_max - curve.e_min);
    if e_lo < curve.e_min - slack || e_hi > curve.e_max + slack {
        return Err(Error::arg(format!(
            "[{e_lo}, {e_hi}] extends more than {EXTRAPOLATION_ALLOWANCE} of the width beyond the observed range [{}, {}]",
            curve.e_min, curve.e_max
        )));
    }
    Ok(curve.slope * (e_hi * e_hi - e_lo * e_lo) / 2.0 + curve.intercept * (e_hi - e_lo))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub auc: f64,
    pub n_points: usize,
    pub curve: FittedCurve,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub first: MethodSummary,
    pub second: MethodSummary,
    pub e_range: [f64; 2],
    /// Name of the method with the smaller `∫F dE`, or `"tie"`.
    pub verdict: String,
    pub integration_range: String,
}

fn method_name(points: &[TradeoffPoint], fallback: &str) -> String {
    points.first().map_or_else(|| fallback.to_string(), |p| p.method.clone())
}

/// Fits both point sets and integrates each line over the intersection of
/// their observed `E` ranges. Lower area is better.
pub fn compare(first: &[TradeoffPoint], second: &[TradeoffPoint]) -> Result<Comparison> {
    let c1 = fit_line(first)?;
    let c2 = fit_line(second)?;
    let lo = c1.e_min.max(c2.e_min);
    let hi = c1.e_max.min(c2.e_max);
    if !(lo < hi) {
        return Err(Error::Comparison(format!(
            "observed E ranges [{}, {}] and [{}, {}] do not overlap",
            c1.e_min, c1.e_max, c2.e_min, c2.e_max
        )));
    }
    let (a1, a2) = (auc(&c1, lo, hi)?, auc(&c2, lo, hi)?);
    let (m1, m2) = (method_name(first, "first"), method_name(second, "second"));
    let verdict = if (a1 - a2).abs() < TIE_TOLERANCE {
        "tie".to_string()
    } else if a1 < a2 {
        m1.clone()
    } else {
        m2.clone()
    };
    Ok(Comparison {
        first: MethodSummary {
            method: m1,
            auc: a1,
            n_points: first.len(),
            curve: c1,
        },
        second: MethodSummary {
            method: m2,
            auc: a2,
            n_points: second.len(),
            curve: c2,
        },
        e_range: [lo, hi],
        verdict,
        integration_range: "intersection of observed E ranges".into(),
    })
}

/// Splits points by method, preserving first-seen order of method names.
pub fn group_by_method(points: &[TradeoffPoint]) -> Vec<(String, Vec<TradeoffPoint>)> {
    let mut out: Vec<(String, Vec<TradeoffPoint>)> = Vec::new();
    for p in points {
        match out.iter_mut().find(|(m, _)| *m == p.method) {
            Some((_, v)) => v.push(p.clone()),
            None => out.push((p.method.clone(), vec![p.clone()])),
        }
    }
    out
}

pub fn write_points_csv(points: &[TradeoffPoint], path: &Path) -> Result<()> {
    let mut sorted = points.to_vec();
    sort_points(&mut sorted);
    let mut w = csv::Writer::from_writer(Vec::new());
    for p in &sorted {
        w.serialize(p)?;
    }
    if sorted.is_empty() {
        w.write_record(["method", "lambda_fair", "seed", "E", "F", "mse"])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    write_atomic(path, &bytes)
}

pub fn read_points_csv(path: &Path) -> Result<Vec<TradeoffPoint>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Schema(format!("{}: {other:?}", path.display())),
    })?;
    let mut out = Vec::new();
    for rec in r.deserialize() {
        out.push(rec.map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlotOptions {
    /// Draw `F` on the horizontal axis and `E` on the vertical one.
    pub swap_axes: bool,
}

const PALETTE: [&str; 6] = ["#1b6ca8", "#d1495b", "#3d8c40", "#8e6c8a", "#e09f3e", "#33658a"];
const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 440.0;
const MARGIN: f64 = 60.0;

fn fmt_num(v: f64) -> String {
    format!("{v:.4}").trim_end_matches('0').trim_end_matches('.').to_string()
}

/// Writes an SVG scatter of `points` (one colour per method, one fitted line
/// per entry of `curves`) and a sibling CSV of the points. Returns the CSV
/// path.
pub fn emit_plot(points: &[TradeoffPoint], curves: &[(String, FittedCurve)], path: &Path, opts: PlotOptions) -> Result<PathBuf> {
    if points.is_empty() {
        return Err(Error::arg("cannot plot an empty point set"));
    }
    let mut sorted = points.to_vec();
    sort_points(&mut sorted);
    let groups = group_by_method(&sorted);

    let span = |vals: &mut dyn Iterator<Item = f64>| {
        let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
        if lo == hi {
            (lo - 0.5, hi + 0.5)
        } else {
            let pad = 0.05 * (hi - lo);
            (lo - pad, hi + pad)
        }
    };
    let (e_lo, e_hi) = span(&mut sorted.iter().map(|p| p.e));
    let (f_lo, f_hi) = span(&mut sorted.iter().map(|p| p.f));
    let (plot_w, plot_h) = (WIDTH - 2.0 * MARGIN, HEIGHT - 2.0 * MARGIN);
    let to_px = |e: f64, f: f64| -> (f64, f64) {
        let (h, v, (h_lo, h_hi), (v_lo, v_hi)) = if opts.swap_axes {
            (f, e, (f_lo, f_hi), (e_lo, e_hi))
        } else {
            (e, f, (e_lo, e_hi), (f_lo, f_hi))
        };
        (
            MARGIN + (h - h_lo) / (h_hi - h_lo) * plot_w,
            HEIGHT - MARGIN - (v - v_lo) / (v_hi - v_lo) * plot_h,
        )
    };
    let colour = |method: &str| {
        let i = groups.iter().position(|(m, _)| m == method).unwrap_or(groups.len());
        PALETTE[i % PALETTE.len()]
    };
    let (h_label, v_label) = if opts.swap_axes {
        ("F (counterfactual unfairness)", "E (explained variance)")
    } else {
        ("E (explained variance)", "F (counterfactual unfairness)")
    };

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<path d="M{MARGIN} {} H{} M{MARGIN} {} V{MARGIN}" stroke="black" fill="none"/>"#, HEIGHT - MARGIN, WIDTH - MARGIN, HEIGHT - MARGIN);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{h_label}</text>"#, WIDTH / 2.0, HEIGHT - 15.0);
    let _ = writeln!(
        s,
        r#"<text x="15" y="{}" text-anchor="middle" transform="rotate(-90 15 {})">{v_label}</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0
    );
    let (h_range, v_range) = if opts.swap_axes { ((f_lo, f_hi), (e_lo, e_hi)) } else { ((e_lo, e_hi), (f_lo, f_hi)) };
    for t in 0..=4 {
        let frac = t as f64 / 4.0;
        let hv = h_range.0 + frac * (h_range.1 - h_range.0);
        let vv = v_range.0 + frac * (v_range.1 - v_range.0);
        let x = MARGIN + frac * plot_w;
        let y = HEIGHT - MARGIN - frac * plot_h;
        let _ = writeln!(s, r#"<path d="M{x:.2} {} v5 M{MARGIN} {y:.2} h-5" stroke="black"/>"#, HEIGHT - MARGIN);
        let _ = writeln!(s, r#"<text x="{x:.2}" y="{}" text-anchor="middle">{}</text>"#, HEIGHT - MARGIN + 18.0, fmt_num(hv));
        let _ = writeln!(s, r#"<text x="{}" y="{:.2}" text-anchor="end">{}</text>"#, MARGIN - 8.0, y + 4.0, fmt_num(vv));
    }
    for (method, curve) in curves {
        let (x1, y1) = to_px(curve.e_min, curve.at(curve.e_min));
        let (x2, y2) = to_px(curve.e_max, curve.at(curve.e_max));
        let _ = writeln!(
            s,
            r#"<line x1="{x1:.2}" y1="{y1:.2}" x2="{x2:.2}" y2="{y2:.2}" stroke="{}" stroke-width="2"/>"#,
            colour(method)
        );
    }
    for p in &sorted {
        let (x, y) = to_px(p.e, p.f);
        let _ = writeln!(
            s,
            r#"<circle cx="{x:.2}" cy="{y:.2}" r="4" fill="{}"><title>{} λ={} seed={}</title></circle>"#,
            colour(&p.method),
            p.method,
            p.lambda_fair,
            p.seed
        );
    }
    for (i, (method, pts)) in groups.iter().enumerate() {
        let mut lambdas: Vec<f64> = pts.iter().map(|p| p.lambda_fair).collect();
        lambdas.dedup();
        let y = MARGIN + 18.0 * i as f64;
        let x = WIDTH - MARGIN - 190.0;
        let _ = writeln!(s, r#"<rect x="{x}" y="{}" width="12" height="12" fill="{}"/>"#, y - 10.0, colour(method));
        let list: Vec<String> = lambdas.iter().map(|l| fmt_num(*l)).collect();
        let _ = writeln!(s, r#"<text x="{}" y="{y}">{method} (λ: {})</text>"#, x + 18.0, list.join(", "));
    }
    s.push_str("</svg>\n");
    write_atomic(path, s.as_bytes())?;
    let csv_path = path.with_extension("csv");
    write_points_csv(&sorted, &csv_path)?;
    Ok(csv_path)
}

/// A sweep run that failed; the sweep continues without it.
#[derive(Debug)]
pub struct SweepFailure {
    pub lambda_fair: f64,
    pub repeat: usize,
    pub error: Error,
}

#[derive(Debug)]
pub struct SweepOutcome {
    pub points: Vec<TradeoffPoint>,
    pub failures: Vec<SweepFailure>,
}

/// Frozen stage-1 models and data shared read-only by every sweep job.
pub struct SweepContext<'a> {
    pub theta: &'a MechanismModel,
    pub psi: &'a AbductorModel,
    pub train: &'a Dataset,
    pub test: &'a Dataset,
}

/// Seed of repeat `r`.
pub fn repeat_seed(base_seed: u64, repeat: usize) -> u64 {
    base_seed.wrapping_add(repeat as u64)
}

/// Stream name of the stage-2 run for `(λ, repeat)`.
pub fn stage2_stream(lambda_fair: f64, repeat: usize) -> String {
    format!("stage2/lambda={lambda_fair}/repeat={repeat}")
}

/// Everything produced by one stage-2 run.
#[derive(Clone, Debug)]
pub struct PointRun {
    pub point: TradeoffPoint,
    pub metrics: EvalMetrics,
    pub predictor: Predictor,
    pub history: Vec<FairRecord>,
}

/// One stage-2 training and evaluation. Evaluation draws come from a stream
/// shared by every `λ` of the same repeat.
pub fn run_point(ctx: &SweepContext, cfg: &FairTrainConfig, lambda_fair: f64, repeat: usize, base_seed: u64) -> Result<PointRun> {
    let seed = repeat_seed(base_seed, repeat);
    let cfg = FairTrainConfig {
        lambda_fair,
        ..cfg.clone()
    };
    let rng = RngStream::named(seed, &stage2_stream(lambda_fair, repeat));
    let h = Predictor::new(
        ctx.train.d_x(),
        ctx.train.d_a(),
        ctx.train.d_y(),
        &cfg.hidden,
        cfg.activation,
        &mut RngStream::named(seed, "stage2/init"),
    )?;
    let res = train_fair(h, ctx.theta, ctx.psi, ctx.train, &cfg, &rng)?;
    let metrics = evaluate(
        &res.h,
        ctx.theta,
        ctx.psi,
        ctx.test,
        cfg.eval_q_intv,
        cfg.eval_q_abd,
        cfg.intervention_sampler,
        &ctx.train.a,
        &res.kernel,
        &mut RngStream::named(seed, "eval"),
    )?;
    let point = TradeoffPoint {
        method: cfg.fairness_loss.label().to_string(),
        lambda_fair,
        seed,
        e: metrics.explained_variance,
        f: metrics.fair_mmd,
        mse: metrics.mse,
    };
    Ok(PointRun {
        point,
        metrics,
        predictor: res.h,
        history: res.history,
    })
}

/// Runs every `(λ, repeat)` pair on up to `workers` threads. Results do not
/// depend on the worker count.
pub fn sweep(ctx: &SweepContext, cfg: &FairTrainConfig, lambdas: &[f64], repeats: usize, base_seed: u64, workers: usize) -> Result<SweepOutcome> {
    if lambdas.is_empty() {
        return Err(Error::arg("sweep needs at least one lambda"));
    }
    if repeats == 0 {
        return Err(Error::arg("sweep needs at least one repeat"));
    }
    cfg.validate()?;
    let jobs: Vec<(f64, usize)> = lambdas.iter().flat_map(|&l| (0..repeats).map(move |r| (l, r))).collect();
    let next = AtomicUsize::new(0);
    let results: Mutex<BTreeMap<usize, Result<TradeoffPoint>>> = Mutex::new(BTreeMap::new());
    std::thread::scope(|scope| {
        for _ in 0..workers.clamp(1, jobs.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(l, r)) = jobs.get(i) else { break };
                let out = run_point(ctx, cfg, l, r, base_seed).map(|run| run.point);
                results.lock().expect("no panics while holding the lock").insert(i, out);
            });
        }
    });
    let mut points = Vec::new();
    let mut failures = Vec::new();
    for (i, res) in results.into_inner().expect("workers joined") {
        match res {
            Ok(p) => points.push(p),
            Err(error) => {
                log::warn!("sweep run λ={} repeat={} failed: {error}", jobs[i].0, jobs[i].1);
                failures.push(SweepFailure {
                    lambda_fair: jobs[i].0,
                    repeat: jobs[i].1,
                    error,
                });
            }
        }
    }
    if points.is_empty() {
        return Err(failures.remove(0).error);
    }
    sort_points(&mut points);
    Ok(SweepOutcome { points, failures })
}
