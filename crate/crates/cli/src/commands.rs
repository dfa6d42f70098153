//! Subcommand implementations. Each writes one stage directory under the
//! output root and finishes with its manifest.

use std::path::{Path, PathBuf};

use ncmfair::checkpoint::{write_atomic, Checkpoint};
use ncmfair::data::{load_crimes, split, Dataset};
use ncmfair::fair::{write_fair_history_csv, FairnessLoss};
use ncmfair::ncm::{train_stage1, write_history_csv, AbductorModel, MechanismModel};
use ncmfair::rng::RngStream;
use ncmfair::scm::LinearGaussianScm;
use ncmfair::tradeoff::{compare, emit_plot, fit_line, group_by_method, read_points_csv, run_point, sweep, write_points_csv, SweepContext, TradeoffPoint};
use serde::Serialize;
use serde_json::json;

use crate::config::{DataSpec, RunConfig, Scope};
use crate::error::{CliError, CliResult};
use crate::manifest::{find_manifests, hash_files, read_bytes, read_text, require_upstream, sha256_file, write_json, Manifest, MANIFEST_FILE};

pub const DATA_DIR: &str = "data";
pub const STAGE1_DIR: &str = "stage1";
pub const STAGE2_DIR: &str = "stage2";
pub const SWEEP_DIR: &str = "sweep";
pub const COMPARE_DIR: &str = "compare";
pub const PLOT_DIR: &str = "plot";

const TRAIN_CSV: &str = "train.csv";
const TEST_CSV: &str = "test.csv";
const NORMALIZATION_JSON: &str = "normalization.json";
const SCM_JSON: &str = "scm.json";
const THETA_JSON: &str = "theta.json";
const PSI_JSON: &str = "psi.json";
const HISTORY_CSV: &str = "history.csv";
const PREDICTOR_JSON: &str = "predictor.json";
const METRICS_JSON: &str = "metrics.json";
const POINTS_CSV: &str = "points.csv";
const FAILURES_JSON: &str = "failures.json";
const COMPARISON_JSON: &str = "comparison.json";
const PLOT_SVG: &str = "tradeoff.svg";
const PLOT_CSV: &str = "tradeoff.csv";

/// A merged config and where its artifacts go.
#[derive(Clone, Debug)]
pub struct Run {
    pub cfg: RunConfig,
    pub out: PathBuf,
}

impl Run {
    pub fn new(cfg: RunConfig, out: PathBuf) -> Self {
        Self { cfg, out }
    }

    fn dir(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn manifest(&self, command: &str, scope: Scope, inputs: Vec<(String, String)>, dir: &Path, files: &[&str], summary: serde_json::Value) -> CliResult<PathBuf> {
        let names: Vec<String> = files.iter().map(|f| f.to_string()).collect();
        let m = Manifest {
            command: command.to_string(),
            config_digest: self.cfg.digest(),
            scope_digest: self.cfg.scope_digest(scope),
            config: self.cfg.canonical_json(),
            seed: self.cfg.seed,
            inputs: inputs.into_iter().collect(),
            files: hash_files(dir, &names)?,
            summary,
        };
        m.save(dir)
    }
}

fn upstream(run: &Run, stage: &str, scope: Scope, producer: &str) -> CliResult<(String, String)> {
    require_upstream(&run.out, &format!("{stage}/{MANIFEST_FILE}"), &run.cfg.scope_digest(scope), producer)
}

pub fn gen_data(run: &Run) -> CliResult<PathBuf> {
    let seed = run.cfg.seed;
    let mut data_rng = RngStream::named(seed, "data");
    let mut split_rng = RngStream::named(seed, "split");
    let (train, test, scm) = match &run.cfg.data {
        DataSpec::Synthetic { n, train_fraction, scm } => {
            let scm = match scm {
                Some(p) => LinearGaussianScm::from_json(&read_text(p)?)?,
                None => LinearGaussianScm::default_insurance(),
            };
            let d = scm.sample(*n, &mut data_rng)?;
            let (tr, te) = split(&d, *train_fraction, &mut split_rng)?;
            (tr, te, Some(scm))
        }
        DataSpec::Crimes {
            path,
            sensitive_column,
            target_column,
            test_rows,
        } => {
            let d = load_crimes(path, sensitive_column, target_column)?;
            if *test_rows >= d.len() {
                return Err(CliError::Usage(format!("test_rows = {test_rows} leaves no training rows out of {}", d.len())));
            }
            let frac = (d.len() - test_rows) as f64 / d.len() as f64;
            let (tr, te) = split(&d, frac, &mut split_rng)?;
            (tr, te, None)
        }
    };
    let dir = run.dir(DATA_DIR);
    train.write_csv(&dir.join(TRAIN_CSV), Some(&dir.join(NORMALIZATION_JSON)))?;
    test.write_csv(&dir.join(TEST_CSV), None)?;
    let mut files = vec![TRAIN_CSV, TEST_CSV, NORMALIZATION_JSON];
    if let Some(scm) = &scm {
        write_atomic(&dir.join(SCM_JSON), scm.to_json()?.as_bytes())?;
        files.push(SCM_JSON);
    }
    log::info!("wrote {} train and {} test rows with {} features to {}", train.len(), test.len(), train.d_x(), dir.display());
    let summary = json!({
        "n_train": train.len(),
        "n_test": test.len(),
        "d_a": train.d_a(),
        "d_x": train.d_x(),
        "d_y": train.d_y(),
        "x_names": train.x_names,
    });
    run.manifest("gen-data", Scope::Data, vec![], &dir, &files, summary)
}

/// Train and test splits written by `gen-data`.
pub fn load_splits(out: &Path) -> CliResult<(Dataset, Dataset)> {
    let dir = out.join(DATA_DIR);
    let side = dir.join(NORMALIZATION_JSON);
    let train = Dataset::read_csv(&dir.join(TRAIN_CSV), Some(&side))?;
    let test = Dataset::read_csv(&dir.join(TEST_CSV), Some(&side))?;
    Ok((train, test))
}

/// Stage-1 models written by `train-ncm`.
pub fn load_stage1(out: &Path) -> CliResult<(MechanismModel, AbductorModel)> {
    let dir = out.join(STAGE1_DIR);
    let tc = Checkpoint::load(&dir.join(THETA_JSON))?;
    let pc = Checkpoint::load(&dir.join(PSI_JSON))?;
    let theta = MechanismModel::from_net(tc.to_mlp()?, tc.dim("d_a")?, tc.dim("d_u")?)?;
    let psi = AbductorModel::from_net(pc.to_mlp()?, pc.dim("d_x")?, pc.dim("d_a")?, pc.dim("d_noise")?)?;
    Ok((theta, psi))
}

pub fn train_ncm(run: &Run) -> CliResult<PathBuf> {
    let input = upstream(run, DATA_DIR, Scope::Data, "gen-data")?;
    let (train, _) = load_splits(&run.out)?;
    let cfg = &run.cfg.stage1;
    let rng = RngStream::named(run.cfg.seed, "stage1");
    let (theta, psi) = cfg.init_models(train.d_a(), train.d_x(), &mut rng.clone())?;
    log::info!("training stage 1 ({:?}, {} steps per phase) on {} rows", cfg.mode, cfg.steps, train.len());
    let res = train_stage1(theta, psi, &train, cfg, &rng)?;
    let dir = run.dir(STAGE1_DIR);
    let digest = run.cfg.digest();
    Checkpoint::from_mlp("mechanism", &res.theta.net, run.cfg.seed, &digest)
        .with_dim("d_a", res.theta.d_a)
        .with_dim("d_u", res.theta.d_u)
        .with_dim("d_x", res.theta.d_x())
        .save(&dir.join(THETA_JSON))?;
    Checkpoint::from_mlp("abductor", &res.psi.net, run.cfg.seed, &digest)
        .with_dim("d_x", res.psi.d_x)
        .with_dim("d_a", res.psi.d_a)
        .with_dim("d_u", res.psi.d_u())
        .with_dim("d_noise", res.psi.d_noise)
        .save(&dir.join(PSI_JSON))?;
    write_history_csv(&res.history, &dir.join(HISTORY_CSV))?;
    let summary = json!({
        "mode": cfg.mode,
        "lambda_gen": cfg.lambda_gen,
        "lambda_pos": cfg.lambda_pos,
        "lambda_ctf": cfg.lambda_ctf,
        "lambda_reg": cfg.lambda_reg,
        "initial_losses": res.history.first(),
        "final_losses": res.history.last(),
        "rho": { "gen": res.kernels.gen.rho(), "pos": res.kernels.pos.rho(), "ctf": res.kernels.ctf.rho() },
    });
    run.manifest("train-ncm", Scope::Stage1, vec![input], &dir, &[THETA_JSON, PSI_JSON, HISTORY_CSV], summary)
}

#[derive(Serialize)]
struct MetricsFile<'a> {
    lambda_fair: f64,
    seed: u64,
    method: &'a str,
    mse: f64,
    explained_variance: f64,
    fair_mmd: f64,
    fair_mean_mse: f64,
    eval_q_intv: usize,
    eval_q_abd: usize,
    n_test: usize,
    config_digest: String,
}

/// Directory of one stage-2 run.
pub fn stage2_run_dir(out: &Path, method: FairnessLoss, lambda_fair: f64, repeat: usize) -> PathBuf {
    out.join(STAGE2_DIR).join(method.label()).join(format!("lambda={lambda_fair}")).join(format!("repeat={repeat}"))
}

pub fn train_fair(run: &Run, repeat: usize) -> CliResult<PathBuf> {
    let input = upstream(run, STAGE1_DIR, Scope::Stage1, "train-ncm")?;
    let (train, test) = load_splits(&run.out)?;
    let (theta, psi) = load_stage1(&run.out)?;
    let ctx = SweepContext {
        theta: &theta,
        psi: &psi,
        train: &train,
        test: &test,
    };
    let cfg = &run.cfg.stage2;
    let p = run_point(&ctx, cfg, cfg.lambda_fair, repeat, run.cfg.seed)?;
    let dir = stage2_run_dir(&run.out, cfg.fairness_loss, cfg.lambda_fair, repeat);
    let digest = run.cfg.digest();
    Checkpoint::from_mlp("predictor", &p.predictor.net, p.point.seed, &digest)
        .with_dim("d_x", p.predictor.d_x)
        .with_dim("d_a", p.predictor.d_a)
        .with_dim("d_y", p.predictor.d_y())
        .save(&dir.join(PREDICTOR_JSON))?;
    let metrics = MetricsFile {
        lambda_fair: cfg.lambda_fair,
        seed: p.point.seed,
        method: cfg.fairness_loss.label(),
        mse: p.metrics.mse,
        explained_variance: p.metrics.explained_variance,
        fair_mmd: p.metrics.fair_mmd,
        fair_mean_mse: p.metrics.fair_mean_mse,
        eval_q_intv: p.metrics.q_intv,
        eval_q_abd: p.metrics.q_abd,
        n_test: p.metrics.n,
        config_digest: digest,
    };
    write_json(&dir.join(METRICS_JSON), &metrics)?;
    write_fair_history_csv(&p.history, &dir.join(HISTORY_CSV))?;
    println!(
        "{} λ={} repeat={}: mse {:.6} explained variance {:.6} fair_mmd {:.6} fair_mean_mse {:.6}",
        metrics.method, metrics.lambda_fair, repeat, metrics.mse, metrics.explained_variance, metrics.fair_mmd, metrics.fair_mean_mse
    );
    let summary = json!({ "method": metrics.method, "lambda_fair": cfg.lambda_fair, "repeat": repeat });
    run.manifest("train-fair", Scope::Stage2, vec![input], &dir, &[PREDICTOR_JSON, METRICS_JSON, HISTORY_CSV], summary)
}

pub fn sweep_cmd(run: &Run) -> CliResult<PathBuf> {
    let input = upstream(run, STAGE1_DIR, Scope::Stage1, "train-ncm")?;
    let (train, test) = load_splits(&run.out)?;
    let (theta, psi) = load_stage1(&run.out)?;
    let ctx = SweepContext {
        theta: &theta,
        psi: &psi,
        train: &train,
        test: &test,
    };
    let sc = &run.cfg.sweep;
    let mut points = Vec::new();
    let mut failures = Vec::new();
    for &method in &sc.methods {
        let cfg = ncmfair::fair::FairTrainConfig {
            fairness_loss: method,
            ..run.cfg.stage2.clone()
        };
        log::info!("sweeping {} over {} lambdas × {} repeats", method.label(), sc.lambdas.len(), sc.repeats);
        let outcome = sweep(&ctx, &cfg, &sc.lambdas, sc.repeats, run.cfg.seed, sc.workers)?;
        points.extend(outcome.points);
        failures.extend(outcome.failures.into_iter().map(|f| {
            json!({
                "method": method.label(),
                "lambda_fair": f.lambda_fair,
                "repeat": f.repeat,
                "error": f.error.to_string(),
            })
        }));
    }
    let dir = run.dir(SWEEP_DIR);
    write_points_csv(&points, &dir.join(POINTS_CSV))?;
    write_json(&dir.join(FAILURES_JSON), &json!({ "config_digest": run.cfg.digest(), "failures": failures }))?;
    println!("sweep: {} points, {} failed runs", points.len(), failures.len());
    let summary = json!({
        "methods": sc.methods.iter().map(|m| m.label()).collect::<Vec<_>>(),
        "n_points": points.len(),
        "n_failures": failures.len(),
    });
    run.manifest("sweep", Scope::Stage2, vec![input], &dir, &[POINTS_CSV, FAILURES_JSON], summary)
}

fn sweep_points(run: &Run) -> CliResult<((String, String), Vec<TradeoffPoint>)> {
    let input = upstream(run, SWEEP_DIR, Scope::Stage2, "sweep")?;
    let points = read_points_csv(&run.dir(SWEEP_DIR).join(POINTS_CSV))?;
    Ok((input, points))
}

pub fn compare_cmd(run: &Run) -> CliResult<PathBuf> {
    let (input, points) = sweep_points(run)?;
    let methods = &run.cfg.sweep.methods;
    if methods.len() < 2 {
        return Err(CliError::Usage("compare needs two methods in [sweep].methods".into()));
    }
    let pick = |m: FairnessLoss| -> Vec<TradeoffPoint> { points.iter().filter(|p| p.method == m.label()).cloned().collect() };
    let c = compare(&pick(methods[0]), &pick(methods[1]))?;
    let dir = run.dir(COMPARE_DIR);
    write_json(&dir.join(COMPARISON_JSON), &json!({ "config_digest": run.cfg.digest(), "comparison": &c }))?;
    println!(
        "AUC {} {:.6} vs {} {:.6} over E in [{:.6}, {:.6}]: verdict {}",
        c.first.method, c.first.auc, c.second.method, c.second.auc, c.e_range[0], c.e_range[1], c.verdict
    );
    let summary = json!({ "verdict": c.verdict, "auc": { c.first.method.clone(): c.first.auc, c.second.method.clone(): c.second.auc } });
    run.manifest("compare", Scope::Stage2, vec![input], &dir, &[COMPARISON_JSON], summary)
}

pub fn plot_cmd(run: &Run) -> CliResult<PathBuf> {
    let (input, points) = sweep_points(run)?;
    let curves = group_by_method(&points)
        .into_iter()
        .map(|(m, pts)| Ok((m, fit_line(&pts)?)))
        .collect::<CliResult<Vec<_>>>()?;
    let dir = run.dir(PLOT_DIR);
    let svg = dir.join(PLOT_SVG);
    emit_plot(&points, &curves, &svg, run.cfg.plot)?;
    let text = read_text(&svg)?;
    write_atomic(&svg, embed_svg_digest(&text, &run.cfg.digest()).as_bytes())?;
    println!("wrote {}", svg.display());
    let summary = json!({ "methods": curves.iter().map(|(m, _)| m.clone()).collect::<Vec<_>>(), "swap_axes": run.cfg.plot.swap_axes });
    run.manifest("plot", Scope::Plot, vec![input], &dir, &[PLOT_SVG, PLOT_CSV], summary)
}

fn svg_digest_comment(digest: &str) -> String {
    format!("<!-- config_digest: {digest} -->")
}

/// Inserts the digest comment after the XML declaration, if any.
fn embed_svg_digest(svg: &str, digest: &str) -> String {
    let comment = svg_digest_comment(digest);
    match svg.strip_prefix("<?xml").and_then(|rest| rest.find("?>").map(|i| i + 5 + 2)) {
        Some(end) => format!("{}\n{comment}{}", &svg[..end], &svg[end..]),
        None => format!("{comment}\n{svg}"),
    }
}

/// Outcome of `verify`: one line per checked manifest.
#[derive(Clone, Debug, Default)]
pub struct VerifyReport {
    pub checked: Vec<PathBuf>,
    pub problems: Vec<String>,
}

fn scope_of(command: &str) -> Option<Scope> {
    match command {
        "gen-data" => Some(Scope::Data),
        "train-ncm" => Some(Scope::Stage1),
        "train-fair" | "sweep" | "compare" => Some(Scope::Stage2),
        "plot" => Some(Scope::Plot),
        _ => None,
    }
}

/// Checks every manifest under the output root: file hashes, digests
/// embedded in artifacts and upstream links. With `strict`, each manifest
/// must also match `run.cfg` for its stage.
pub fn verify(run: &Run, strict: bool) -> CliResult<VerifyReport> {
    let manifests = find_manifests(&run.out)?;
    if manifests.is_empty() {
        return Err(CliError::Verify(format!("no manifests under {}", run.out.display())));
    }
    let mut report = VerifyReport::default();
    for path in manifests {
        let dir = path.parent().expect("manifest has a parent").to_path_buf();
        let mut problem = |msg: String| report.problems.push(format!("{}: {msg}", path.display()));
        let m = match Manifest::load(&path) {
            Ok(m) => m,
            Err(e) => {
                problem(e.to_string());
                continue;
            }
        };
        for (name, want) in &m.files {
            let file = dir.join(name);
            match sha256_file(&file) {
                Ok(got) if &got == want => {}
                Ok(_) => problem(format!("{name} was modified")),
                Err(e) => problem(e.to_string()),
            }
            if let Some(embedded) = embedded_digest(&file) {
                if embedded != m.config_digest {
                    problem(format!("{name} embeds digest {embedded}, manifest has {}", m.config_digest));
                }
            }
        }
        for (rel, want) in &m.inputs {
            match sha256_file(&run.out.join(rel)) {
                Ok(got) if &got == want => {}
                Ok(_) => problem(format!("upstream {rel} changed since this stage ran")),
                Err(e) => problem(e.to_string()),
            }
        }
        if strict {
            match strict_expected(run, &m) {
                Some(expected) if expected == m.scope_digest => {}
                Some(_) => problem(format!("{} artifacts do not match the current configuration", m.command)),
                None => problem(format!("unknown command '{}'", m.command)),
            }
        }
        report.checked.push(path);
    }
    Ok(report)
}

fn strict_expected(run: &Run, m: &Manifest) -> Option<String> {
    let scope = scope_of(&m.command)?;
    if m.command != "train-fair" {
        return Some(run.cfg.scope_digest(scope));
    }
    // per-run flags are part of what was digested
    let mut cfg = run.cfg.clone();
    cfg.stage2.lambda_fair = m.summary.get("lambda_fair")?.as_f64()?;
    cfg.stage2.fairness_loss = serde_json::from_value(m.summary.get("method")?.clone()).ok()?;
    Some(cfg.scope_digest(scope))
}

fn embedded_digest(file: &Path) -> Option<String> {
    let ext = file.extension()?.to_str()?;
    let bytes = read_bytes(file).ok()?;
    match ext {
        "json" => {
            let v: serde_json::Value = serde_json::from_slice(&bytes).ok()?;
            v.get("config_digest")?.as_str().map(str::to_string)
        }
        "svg" => {
            let text = String::from_utf8(bytes).ok()?;
            let start = text.find("<!-- config_digest: ")? + "<!-- config_digest: ".len();
            let end = text[start..].find(" -->")?;
            Some(text[start..start + end].to_string())
        }
        _ => None,
    }
}
