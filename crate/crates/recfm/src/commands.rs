//! Subcommand bodies. Each writes only inside its run directory and returns
//! whether every check it ran passed.

use std::collections::BTreeMap;
use std::path::Path;

use recfm_core::datasets::{make_gaussian_pairs, GaussianOracle, TrainData};
use recfm_core::model::{VelocityField, VelocityNet};
use recfm_core::rng::{derive_seed, normal_vec, seeded};
use recfm_core::sampler::generate_ensemble;
use recfm_core::trainer::{CurveRecord, TrainMode};
use recfm_core::verify::{
    estimate_acceleration, estimate_lipschitz, marginal_test, sample_points, shortcut_probe, truncation_study, consistency_pde_residual, VerifyReport,
};
use recfm_core::Tensor;
use serde::Serialize;

use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, TrainingRecord};
use crate::config::Config;
use crate::data::{generate, read_dataset, samples, write_dataset, Dataset};
use crate::error::{CliError, CliResult};
use crate::experiments::{mean_residual, rollout_scores, train_fresh, trajectory_seed, window_scores, Outcome};
use crate::io::{fmt_f64, fmt_opt, write_json, write_tensor, Table};
use crate::plot::{line_plot, Series};
use crate::rundir::RunDir;

/// Result of a subcommand that completed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Status {
    Ok,
    /// Verification ran but at least one check failed.
    ChecksFailed(Vec<String>),
}

pub struct Ctx<'a> {
    pub cfg: &'a Config,
    pub seed: u64,
    pub run: &'a mut RunDir,
}

pub fn gen_data(ctx: &mut Ctx) -> CliResult<Status> {
    let cfg = ctx.cfg;
    let seed = ctx.seed;
    let ds = ctx.run.timed("generate", || generate(&cfg.data, seed))?;
    let dir = ctx.run.path("");
    ctx.run.timed("write", || write_dataset(&dir, &ds, &cfg.data, seed))?;
    Ok(Status::Ok)
}

fn curve_table(curve: &[CurveRecord], depth: usize) -> Table {
    let mut header = vec!["iteration".to_string(), "nfe".into(), "loss_total".into()];
    header.extend((1..=depth).map(|i| format!("loss_traj_{i}")));
    header.extend((2..=depth).map(|i| format!("loss_cons_{i}")));
    header.push("val_mse".into());
    let mut t = Table::new(&header);
    for r in curve {
        let mut row = vec![r.iteration.to_string(), r.nfe.to_string(), fmt_f64(r.loss.total)];
        row.extend((0..depth).map(|i| r.loss.traj.get(i).map(|v| fmt_f64(*v)).unwrap_or_default()));
        row.extend((0..depth.saturating_sub(1)).map(|i| r.loss.cons.get(i).map(|v| fmt_f64(*v)).unwrap_or_default()));
        row.push(fmt_opt(r.val_mse));
        t.push(row);
    }
    t
}

/// Shortcut curves have one flow-matching and one composition column.
fn curve_depth(mode: TrainMode, depth: usize) -> usize {
    match mode {
        TrainMode::Shortcut => 2,
        _ => depth,
    }
}

pub fn train(ctx: &mut Ctx, data_dir: &Path) -> CliResult<Status> {
    let (ds, _) = read_dataset(data_dir)?;
    let s = samples(&ds, &ctx.cfg.data)?;
    let model = ctx.cfg.model.model_config(s.train.state_dim(), s.train.cond_dim(), ctx.seed)?;
    let tcfg = ctx.cfg.train.train_config(ctx.seed)?;
    let outcome = ctx.run.timed("train", || train_fresh(&model, &tcfg, &s.train, Some(&s.val)))?;
    let run = outcome.run();
    let record = TrainingRecord {
        seed: ctx.seed,
        mode: tcfg.mode.name().into(),
        depth: tcfg.depth,
        lambda: tcfg.lambda,
        dataset: ds.kind_name().into(),
        context: s.context,
        chunk: s.chunk,
    };
    save_checkpoint(&ctx.run.path("checkpoint"), &run.net, &record)?;
    curve_table(&run.curve, curve_depth(tcfg.mode, tcfg.depth)).write(&ctx.run.path("curve.csv"))?;
    let pts = |f: fn(&CurveRecord) -> Option<f64>| run.curve.iter().filter_map(|r| f(r).map(|v| (r.nfe.max(1) as f64, v))).collect();
    line_plot(
        &ctx.run.path("loss.svg"),
        "training loss",
        "NFE",
        "loss",
        &[
            Series {
                name: "total loss".into(),
                points: pts(|r| Some(r.loss.total)),
            },
            Series {
                name: "one-step val MSE".into(),
                points: pts(|r| r.val_mse),
            },
        ],
        true,
    )?;
    match outcome {
        Outcome::Trained(_) => Ok(Status::Ok),
        Outcome::Diverged { iteration, error, .. } => Err(CliError::Runtime(format!(
            "training diverged at iteration {iteration} ({error}); the last good parameters were saved"
        ))),
    }
}

fn field_of(ds: &Dataset) -> CliResult<&recfm_core::datasets::FieldDataset> {
    match ds {
        Dataset::Field { data, .. } => Ok(data),
        other => Err(CliError::Validation(format!("this subcommand needs a field dataset, got {}", other.kind_name()))),
    }
}

fn check_layout(m: &CheckpointManifest, ds: &Dataset) -> CliResult<()> {
    if m.training.dataset != ds.kind_name() {
        return Err(CliError::Validation(format!(
            "checkpoint was trained on {} data, dataset is {}",
            m.training.dataset,
            ds.kind_name()
        )));
    }
    Ok(())
}

#[derive(Serialize)]
struct EnsembleRecord {
    trajectory: usize,
    file: String,
    seeds: Vec<u64>,
}

#[derive(Serialize)]
struct EnsembleManifest {
    steps: usize,
    members: usize,
    chunk: usize,
    context: usize,
    horizon: usize,
    ensembles: Vec<EnsembleRecord>,
}

pub fn sample(ctx: &mut Ctx, ckpt: &Path, data_dir: &Path) -> CliResult<Status> {
    let (net, m) = load_checkpoint(ckpt)?;
    let (ds, _) = read_dataset(data_dir)?;
    check_layout(&m, &ds)?;
    let sc = &ctx.cfg.sample;
    if let Dataset::Gaussian { .. } = ds {
        let cfg = sc.sample_config(&m.training.mode, sc.steps, 1, ctx.seed)?;
        let ens = ctx.run.timed("sample", || generate_ensemble(&net, None, sc.rows, &cfg))?;
        write_tensor(&ctx.run.path("samples.rft"), &ens.members)?;
        let mut t = Table::new(&["member", "seed", "mean", "variance"]);
        for (i, s) in ens.seeds.iter().enumerate() {
            let x = ens.member(i)?;
            let mean = x.mean();
            let var = x.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (x.len() - 1).max(1) as f64;
            t.push(vec![i.to_string(), s.to_string(), fmt_f64(mean), fmt_f64(var)]);
        }
        t.write(&ctx.run.path("summary.csv"))?;
        write_json(
            &ctx.run.path("ensemble.json"),
            &EnsembleManifest {
                steps: cfg.steps,
                members: cfg.members,
                chunk: 1,
                context: 0,
                horizon: 0,
                ensembles: vec![EnsembleRecord {
                    trajectory: 0,
                    file: "samples.rft".into(),
                    seeds: ens.seeds,
                }],
            },
        )?;
        return Ok(Status::Ok);
    }
    let data = field_of(&ds)?;
    let (context, chunk) = (m.training.context, m.training.chunk);
    let frames = data.test[0].num_frames();
    let horizon = if sc.horizon == 0 { frames.saturating_sub(context) } else { sc.horizon };
    let mut summary = Table::new(&["trajectory", "mse", "crps", "ssr", "ke_accuracy", "wave_residual"]);
    let mut records = Vec::new();
    for (i, truth) in data.test.iter().enumerate() {
        let cfg = sc.sample_config(&m.training.mode, sc.steps, chunk, trajectory_seed(ctx.seed, i))?;
        let (scores, pred) = ctx.run.timed(&format!("sample_{i}"), || rollout_scores(&net, truth, context, horizon, &cfg))?;
        let file = format!("ensemble_{i:03}.rft");
        write_tensor(&ctx.run.path(&file), &pred)?;
        records.push(EnsembleRecord {
            trajectory: i,
            file,
            seeds: (0..cfg.members).map(|k| recfm_core::sampler::member_seed(cfg.seed, k)).collect(),
        });
        summary.push(vec![
            i.to_string(),
            fmt_f64(scores.mse),
            fmt_f64(scores.crps),
            fmt_f64(scores.ssr),
            fmt_opt(scores.ke_accuracy),
            fmt_opt(scores.wave_residual),
        ]);
    }
    summary.write(&ctx.run.path("summary.csv"))?;
    write_json(
        &ctx.run.path("ensemble.json"),
        &EnsembleManifest {
            steps: sc.steps,
            members: sc.members,
            chunk,
            context,
            horizon,
            ensembles: records,
        },
    )?;
    Ok(Status::Ok)
}

fn mean_of(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn mean_opt(v: &[Option<f64>]) -> Option<f64> {
    let vals: Vec<f64> = v.iter().flatten().copied().collect();
    (!vals.is_empty()).then(|| mean_of(&vals))
}

pub fn eval(ctx: &mut Ctx, ckpt: &Path, data_dir: &Path) -> CliResult<Status> {
    let (net, m) = load_checkpoint(ckpt)?;
    let (ds, _) = read_dataset(data_dir)?;
    check_layout(&m, &ds)?;
    let data = field_of(&ds)?;
    let sc = &ctx.cfg.sample;
    if sc.eval_steps.is_empty() {
        return Err(CliError::Validation("sample.eval_steps is empty".into()));
    }
    let (context, chunk) = (m.training.context, m.training.chunk);
    let horizon = if sc.horizon == 0 { data.test[0].num_frames().saturating_sub(context) } else { sc.horizon };
    let mut table = Table::new(&["dataset", "split", "model", "K", "M", "crps", "mse", "ssr", "ke_accuracy", "wave_residual", "seed"]);
    let mut curve = Vec::new();
    for &k in &sc.eval_steps {
        let (mut mse, mut crps, mut ssr, mut ke, mut wave) = (vec![], vec![], vec![], vec![], vec![]);
        for (i, truth) in data.test.iter().enumerate() {
            let cfg = sc.sample_config(&m.training.mode, k, chunk, trajectory_seed(ctx.seed, i))?;
            let (s, _) = ctx.run.timed(&format!("eval_k{k}_{i}"), || rollout_scores(&net, truth, context, horizon, &cfg))?;
            mse.push(s.mse);
            crps.push(s.crps);
            ssr.push(s.ssr);
            ke.push(s.ke_accuracy);
            wave.push(s.wave_residual);
        }
        curve.push((k as f64, mean_of(&mse)));
        table.push(vec![
            ds.kind_name().into(),
            "test".into(),
            m.training.label(),
            k.to_string(),
            sc.members.to_string(),
            fmt_f64(mean_of(&crps)),
            fmt_f64(mean_of(&mse)),
            fmt_f64(mean_of(&ssr)),
            fmt_opt(mean_opt(&ke)),
            fmt_opt(mean_opt(&wave)),
            ctx.seed.to_string(),
        ]);
    }
    table.write(&ctx.run.path("metrics.csv"))?;
    line_plot(
        &ctx.run.path("mse_vs_steps.svg"),
        "rollout MSE against sampling steps",
        "K",
        "MSE",
        &[Series {
            name: m.training.label(),
            points: curve,
        }],
        true,
    )?;
    Ok(Status::Ok)
}

/// Checks run by `verify`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Check {
    Acceleration,
    Truncation,
    Marginal,
    Consistency,
    Shortcut,
    All,
}

impl Check {
    fn expand(self) -> Vec<Check> {
        match self {
            Check::All => vec![Check::Acceleration, Check::Truncation, Check::Marginal, Check::Consistency, Check::Shortcut],
            c => vec![c],
        }
    }

    fn name(self) -> &'static str {
        match self {
            Check::Acceleration => "acceleration",
            Check::Truncation => "truncation",
            Check::Marginal => "marginal",
            Check::Consistency => "consistency",
            Check::Shortcut => "shortcut",
            Check::All => "all",
        }
    }
}

#[derive(Serialize)]
struct ReportJson<'a> {
    check: &'a str,
    passed: bool,
    statistics: &'a BTreeMap<String, f64>,
    thresholds: &'a BTreeMap<String, f64>,
    table: String,
}

/// Evaluation rows for checks on a trained field.
fn verify_rows(net: &VelocityNet, m: &CheckpointManifest, data_dir: Option<&Path>, cfg: &Config, seed: u64) -> CliResult<TrainData> {
    match data_dir {
        Some(dir) => {
            let (ds, _) = read_dataset(dir)?;
            check_layout(m, &ds)?;
            let s = samples(&ds, &cfg.data)?;
            Ok(s.test.unwrap_or(s.val))
        }
        None if net.cfg.cond_dim == 0 => {
            let (pairs, _) = make_gaussian_pairs(cfg.verify.points.max(1), net.cfg.state_dim, derive_seed(seed, 1))?;
            Ok(TrainData::new(pairs.x0, None)?)
        }
        None => Err(CliError::Validation("a conditioned checkpoint needs --data to draw evaluation points".into())),
    }
}

fn merge_reports(check: &str, parts: Vec<(String, VerifyReport)>) -> VerifyReport {
    let mut out = VerifyReport {
        check: check.into(),
        statistics: BTreeMap::new(),
        thresholds: BTreeMap::new(),
        passed: true,
        header: parts.first().map(|p| p.1.header.clone()).unwrap_or_default(),
        rows: Vec::new(),
    };
    for (tag, r) in parts {
        out.passed &= r.passed;
        out.statistics.extend(r.statistics.into_iter().map(|(k, v)| (format!("{tag}.{k}"), v)));
        out.thresholds.extend(r.thresholds.into_iter().map(|(k, v)| (format!("{tag}.{k}"), v)));
        out.rows.extend(r.rows);
    }
    out
}

pub fn verify(ctx: &mut Ctx, check: Check, ckpt: Option<&Path>, data_dir: Option<&Path>) -> CliResult<Status> {
    let vc = &ctx.cfg.verify;
    let loaded = ckpt.map(load_checkpoint).transpose()?;
    let need_net = || {
        loaded
            .as_ref()
            .ok_or_else(|| CliError::Validation("this check needs --ckpt".into()))
    };
    let mut summary = Table::new(&["check", "passed"]);
    let mut failed = Vec::new();
    for (ci, c) in check.expand().into_iter().enumerate() {
        let seed = derive_seed(ctx.seed, ci as u64);
        let report = match c {
            Check::Marginal => {
                let oracle = GaussianOracle { dim: 1 };
                let field: &dyn VelocityField = match &loaded {
                    Some((net, _)) if net.cfg.state_dim == 1 && net.cfg.cond_dim == 0 => net,
                    // `all` falls back to the analytic field for checkpoints of other shapes.
                    Some(_) if check == Check::All => &oracle,
                    Some(_) => return Err(CliError::Validation("the marginal check needs a one-dimensional unconditioned checkpoint".into())),
                    None => &oracle,
                };
                let mut parts = Vec::new();
                for (k, &alpha) in vc.alphas.iter().enumerate() {
                    let r = ctx.run.timed(&format!("marginal_{k}"), || {
                        marginal_test(&field, alpha, vc.tau, vc.marginal_n, vc.marginal_steps, derive_seed(seed, k as u64))
                    })?;
                    parts.push((format!("alpha={alpha}"), r.report()));
                }
                merge_reports("marginal", parts)
            }
            _ => {
                let (net, m) = need_net()?;
                let rows = verify_rows(net, m, data_dir, ctx.cfg, ctx.seed)?;
                let n = vc.points;
                match c {
                    Check::Acceleration => {
                        let p = sample_points(&rows, n, 0.05, 0.95, seed)?;
                        let a = ctx.run.timed("acceleration", || estimate_acceleration(net, &p, vc.fd_eps))?;
                        let lip = estimate_lipschitz(net, &p, vc.lipschitz_directions, vc.fd_eps, derive_seed(seed, 1))?;
                        let mut r = a.report();
                        r.statistics.insert("lipschitz".into(), lip);
                        r
                    }
                    Check::Truncation => {
                        let idx: Vec<usize> = (0..n.min(rows.len())).collect();
                        let (_, cond) = rows.gather(&idx);
                        let x1 = Tensor::new(vec![idx.len(), net.cfg.state_dim], normal_vec(&mut seeded(seed), idx.len() * net.cfg.state_dim))?;
                        let t = ctx.run.timed("truncation", || truncation_study(net, &vc.ks, &x1, cond.as_ref(), vc.reference_k))?;
                        line_plot(
                            &ctx.run.path("error_vs_k.svg"),
                            "Euler error against step count",
                            "K",
                            "error",
                            &[Series {
                                name: m.training.label(),
                                points: t.ks.iter().zip(&t.errors).map(|(&k, &e)| (k as f64, e)).collect(),
                            }],
                            true,
                        )?;
                        t.report()
                    }
                    Check::Consistency => {
                        let p = sample_points(&rows, n, 0.05, 0.95, seed)?;
                        ctx.run.timed("consistency", || consistency_pde_residual(net, &p, vc.fd_eps))?.report()
                    }
                    Check::Shortcut => {
                        let dmax = vc.ds.iter().copied().fold(0.0, f64::max);
                        let hi = 1.0 - 2.0 * dmax;
                        if hi < 0.05 {
                            return Err(CliError::Validation(format!("largest probe step {dmax} leaves no room for probe times")));
                        }
                        let p = sample_points(&rows, n, 0.05, hi, seed)?;
                        ctx.run.timed("shortcut", || shortcut_probe(net, &vc.ds, &p))?.report()
                    }
                    Check::Marginal | Check::All => unreachable!("expanded above"),
                }
            }
        };
        let table = format!("{}.csv", c.name());
        Table::from_numeric(&report.header, &report.rows).write(&ctx.run.path(&table))?;
        write_json(
            &ctx.run.path(&format!("{}.json", c.name())),
            &ReportJson {
                check: &report.check,
                passed: report.passed,
                statistics: &report.statistics,
                thresholds: &report.thresholds,
                table,
            },
        )?;
        summary.push(vec![c.name().into(), report.passed.to_string()]);
        if !report.passed {
            failed.push(c.name().to_string());
        }
    }
    summary.write(&ctx.run.path("verify.csv"))?;
    Ok(if failed.is_empty() { Status::Ok } else { Status::ChecksFailed(failed) })
}

/// Parameter swept by `ablate`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum AblateParam {
    Lambda,
    Depth,
}

/// Train one recursive model per value and seed at the flow-matching
/// evaluation budget `train.iterations`, and score one-step forecasts of
/// the test windows.
pub fn ablate(ctx: &mut Ctx, data_dir: &Path, param: AblateParam, values: &[f64], seeds: &[u64], baseline: bool) -> CliResult<Status> {
    if values.is_empty() {
        return Err(CliError::Validation("--values is empty".into()));
    }
    let (ds, _) = read_dataset(data_dir)?;
    let s = samples(&ds, &ctx.cfg.data)?;
    let test = s.test.as_ref().unwrap_or(&s.val);
    let pname = match param {
        AblateParam::Lambda => "lambda",
        AblateParam::Depth => "depth",
    };
    let mut table = Table::new(&[
        "param", "value", "seed", "mode", "iterations", "nfe", "status", "final_loss", "val_mse", "mse", "crps", "ssr", "consistency_residual",
    ]);
    let sc = &ctx.cfg.sample;
    let mut jobs: Vec<(String, Option<f64>)> = Vec::new();
    if baseline {
        jobs.push(("fm".into(), None));
    }
    jobs.extend(values.iter().map(|&v| ("recfm".to_string(), Some(v))));
    for &seed in seeds {
        for (mode, value) in &jobs {
            let mut section = ctx.cfg.train.clone();
            section.mode = mode.clone();
            section.match_nfe = true;
            if let Some(v) = *value {
                match param {
                    AblateParam::Lambda => section.lambda = v,
                    AblateParam::Depth => {
                        if v < 1.0 || v.fract() != 0.0 {
                            return Err(CliError::Validation(format!("depth {v} is not a positive integer")));
                        }
                        section.depth = v as usize;
                    }
                }
            }
            let tcfg = section.train_config(seed)?;
            let model = ctx.cfg.model.model_config(s.train.state_dim(), s.train.cond_dim(), seed)?;
            let label = format!("{mode}_{}_{seed}", value.map(fmt_f64).unwrap_or_default());
            let outcome = ctx.run.timed(&format!("train_{label}"), || train_fresh(&model, &tcfg, &s.train, Some(&s.val)))?;
            let run = outcome.run();
            let eval_seed = derive_seed(seed, 0x6576_616c);
            let scores = ctx
                .run
                .timed(&format!("score_{label}"), || window_scores(&run.net, test, sc.rows, sc.members, sc.steps, eval_seed))?;
            let resid = mean_residual(&run.net, &s.val, ctx.cfg.verify.points, ctx.cfg.verify.fd_eps, eval_seed)?;
            let last = run.curve.last();
            table.push(vec![
                pname.into(),
                value.map(fmt_f64).unwrap_or_default(),
                seed.to_string(),
                mode.clone(),
                tcfg.iterations.to_string(),
                run.nfe.to_string(),
                outcome.status(),
                fmt_opt(last.map(|c| c.loss.total)),
                fmt_opt(last.and_then(|c| c.val_mse)),
                fmt_f64(scores.mse),
                fmt_f64(scores.crps),
                fmt_f64(scores.ssr),
                fmt_f64(resid),
            ]);
        }
    }
    table.write(&ctx.run.path("ablation.csv"))?;
    Ok(Status::Ok)
}
