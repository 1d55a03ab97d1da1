//! Argument parsing, config resolution and the run lifecycle.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::Value;

use crate::commands::{self, AblateParam, Check, Ctx, Status};
use crate::config::Config;
use crate::error::{CliError, CliResult};
use crate::io::write_json;
use crate::rundir::RunDir;

pub const SEED_ENV: &str = "RECFM_SEED";

#[derive(Parser, Debug)]
#[command(name = "recfm", version, about = "Recursive flow matching: data, training, sampling and verification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON config file merged over the defaults.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Output run directory; must be absent or empty.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Root seed; overrides RECFM_SEED and the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Dotted config override such as `train.lr=0.001`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a dataset.
    GenData {
        #[command(flatten)]
        common: Common,
        /// pendulum, gaussian, advection-diffusion or standing-wave.
        #[arg(long)]
        dataset: Option<String>,
        /// Pendulum restitution coefficient.
        #[arg(long)]
        alpha: Option<f64>,
        /// Pendulum launch speed.
        #[arg(long)]
        v0: Option<f64>,
        /// Pendulum bounce count.
        #[arg(long)]
        bounces: Option<usize>,
        /// Time step.
        #[arg(long)]
        dt: Option<f64>,
        /// Gaussian pair count.
        #[arg(long)]
        n: Option<usize>,
        /// Gaussian dimension.
        #[arg(long)]
        dim: Option<usize>,
        /// Field trajectory count.
        #[arg(long)]
        trajectories: Option<usize>,
    },
    /// Train a velocity network.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory written by gen-data.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// fm, recfm or shortcut.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        iterations: Option<usize>,
        /// Consistency weight.
        #[arg(long)]
        lambda: Option<f64>,
        /// Number of trajectory scales.
        #[arg(long)]
        depth: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Draw forecast ensembles from a checkpoint.
    Sample {
        #[command(flatten)]
        common: Common,
        /// Checkpoint or training run directory.
        #[arg(long, value_name = "DIR")]
        ckpt: PathBuf,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Euler steps per generated sample.
        #[arg(long)]
        steps: Option<usize>,
        /// Ensemble size.
        #[arg(long)]
        members: Option<usize>,
        /// Forecast frames; 0 rolls out to the end of each trajectory.
        #[arg(long)]
        horizon: Option<usize>,
    },
    /// Score test rollouts for several step counts.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        ckpt: PathBuf,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Comma-separated Euler step counts.
        #[arg(long, value_delimiter = ',')]
        steps: Option<Vec<usize>>,
        #[arg(long)]
        members: Option<usize>,
        #[arg(long)]
        horizon: Option<usize>,
    },
    /// Run numerical checks on a checkpoint or the analytic oracle.
    Verify {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        check: Check,
        #[arg(long, value_name = "DIR")]
        ckpt: Option<PathBuf>,
        /// Dataset supplying evaluation points for conditioned models.
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
    },
    /// Sweep the consistency weight or depth at matched evaluation budget.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_enum)]
        param: AblateParam,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        /// Comma-separated seeds; defaults to the run seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Flow-matching iteration budget; recursive runs get the matched count.
        #[arg(long)]
        iterations: Option<usize>,
        /// Also train a flow-matching baseline per seed.
        #[arg(long)]
        baseline: bool,
        #[arg(long)]
        members: Option<usize>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::Train { .. } => "train",
            Command::Sample { .. } => "sample",
            Command::Eval { .. } => "eval",
            Command::Verify { .. } => "verify",
            Command::Ablate { .. } => "ablate",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::GenData { common, .. }
            | Command::Train { common, .. }
            | Command::Sample { common, .. }
            | Command::Eval { common, .. }
            | Command::Verify { common, .. }
            | Command::Ablate { common, .. } => common,
        }
    }

    /// Dedicated flags expressed as config overrides, applied after `--set`.
    fn flag_overrides(&self) -> Vec<String> {
        fn push<T: Serialize>(out: &mut Vec<String>, key: &str, v: &Option<T>) {
            if let Some(v) = v {
                out.push(format!("{key}={}", serde_json::to_string(v).expect("plain values serialize")));
            }
        }
        let mut o = Vec::new();
        match self {
            Command::GenData {
                dataset,
                alpha,
                v0,
                bounces,
                dt,
                n,
                dim,
                trajectories,
                ..
            } => {
                push(&mut o, "data.dataset", dataset);
                push(&mut o, "data.alpha", alpha);
                push(&mut o, "data.v0", v0);
                push(&mut o, "data.bounces", bounces);
                push(&mut o, "data.dt", dt);
                push(&mut o, "data.n", n);
                push(&mut o, "data.dim", dim);
                push(&mut o, "data.trajectories", trajectories);
            }
            Command::Train {
                mode,
                iterations,
                lambda,
                depth,
                batch_size,
                ..
            } => {
                push(&mut o, "train.mode", mode);
                push(&mut o, "train.iterations", iterations);
                push(&mut o, "train.lambda", lambda);
                push(&mut o, "train.depth", depth);
                push(&mut o, "train.batch_size", batch_size);
            }
            Command::Sample { steps, members, horizon, .. } => {
                push(&mut o, "sample.steps", steps);
                push(&mut o, "sample.members", members);
                push(&mut o, "sample.horizon", horizon);
            }
            Command::Eval { steps, members, horizon, .. } => {
                push(&mut o, "sample.eval_steps", steps);
                push(&mut o, "sample.members", members);
                push(&mut o, "sample.horizon", horizon);
            }
            Command::Verify { .. } => {}
            Command::Ablate { iterations, members, .. } => {
                push(&mut o, "train.iterations", iterations);
                push(&mut o, "sample.members", members);
            }
        }
        o
    }
}

/// Seed and where it came from.
fn resolve_seed(flag: Option<u64>, env: Option<OsString>, cfg: &Config) -> CliResult<(u64, &'static str)> {
    if let Some(s) = flag {
        return Ok((s, "flag"));
    }
    if let Some(v) = env {
        let s = v.to_str().and_then(|s| s.trim().parse().ok()).ok_or_else(|| {
            CliError::Validation(format!("{SEED_ENV}={} is not an unsigned integer", v.to_string_lossy()))
        })?;
        return Ok((s, "env"));
    }
    Ok((cfg.seed, "config"))
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    argv: Vec<String>,
    status: &'a str,
    error: Option<String>,
    failed_checks: Vec<String>,
    seed: u64,
    seed_source: &'a str,
    config: &'a Config,
    versions: Value,
}

fn execute(cmd: &Command, ctx: &mut Ctx) -> CliResult<Status> {
    match cmd {
        Command::GenData { .. } => commands::gen_data(ctx),
        Command::Train { data, .. } => commands::train(ctx, data),
        Command::Sample { ckpt, data, .. } => commands::sample(ctx, ckpt, data),
        Command::Eval { ckpt, data, .. } => commands::eval(ctx, ckpt, data),
        Command::Verify { check, ckpt, data, .. } => commands::verify(ctx, *check, ckpt.as_deref(), data.as_deref()),
        Command::Ablate {
            data,
            param,
            values,
            seeds,
            baseline,
            ..
        } => {
            let seeds = seeds.clone().unwrap_or_else(|| vec![ctx.seed]);
            commands::ablate(ctx, data, *param, values, &seeds, *baseline)
        }
    }
}

fn require_dir(p: &Path, what: &str) -> CliResult<()> {
    if p.is_dir() {
        Ok(())
    } else {
        Err(CliError::Validation(format!("{what} directory {} does not exist", p.display())))
    }
}

fn check_inputs(cmd: &Command) -> CliResult<()> {
    match cmd {
        Command::GenData { .. } => Ok(()),
        Command::Train { data, .. } | Command::Ablate { data, .. } => require_dir(data, "dataset"),
        Command::Sample { ckpt, data, .. } | Command::Eval { ckpt, data, .. } => {
            require_dir(ckpt, "checkpoint")?;
            require_dir(data, "dataset")
        }
        Command::Verify { ckpt, data, .. } => {
            if let Some(c) = ckpt {
                require_dir(c, "checkpoint")?;
            }
            if let Some(d) = data {
                require_dir(d, "dataset")?;
            }
            Ok(())
        }
    }
}

fn run_command(cmd: &Command, argv: Vec<String>, env_seed: Option<OsString>) -> CliResult<Status> {
    let common = cmd.common();
    let mut overrides = common.set.clone();
    overrides.extend(cmd.flag_overrides());
    let (cfg, source) = Config::load(common.config.as_deref(), &overrides)?;
    let (seed, seed_source) = resolve_seed(common.seed, env_seed, &cfg)?;
    check_inputs(cmd)?;
    let mut run = RunDir::create(&common.out)?;
    write_json(&run.path("config.json"), &cfg)?;
    if let Some(text) = &source {
        crate::io::write_atomic(&run.path("config.source.json"), text.as_bytes())?;
    }
    let result = {
        let mut ctx = Ctx { cfg: &cfg, seed, run: &mut run };
        execute(cmd, &mut ctx)
    };
    let (status, error, failed) = match &result {
        Ok(Status::Ok) => ("ok", None, vec![]),
        Ok(Status::ChecksFailed(f)) => ("checks-failed", None, f.clone()),
        Err(CliError::Validation(_)) => {
            run.abandon();
            return result;
        }
        Err(e) => ("failed", Some(e.to_string()), vec![]),
    };
    let manifest = Manifest {
        command: cmd.name(),
        argv,
        status,
        error,
        failed_checks: failed,
        seed,
        seed_source,
        config: &cfg,
        versions: serde_json::json!({
            "recfm": env!("CARGO_PKG_VERSION"),
            "tensor_format": "RFT1",
        }),
    };
    run.finish(&manifest)?;
    result
}

/// Parse `argv`, run the subcommand and return the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    let text: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match run_command(&cli.command, text, std::env::var_os(SEED_ENV)) {
        Ok(Status::Ok) => 0,
        Ok(Status::ChecksFailed(f)) => {
            eprintln!("error: verification failed: {}", f.join(", "));
            1
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_precedence() {
        let mut cfg = Config::default();
        cfg.seed = 5;
        assert_eq!(resolve_seed(Some(1), Some("2".into()), &cfg).unwrap(), (1, "flag"));
        assert_eq!(resolve_seed(None, Some("2".into()), &cfg).unwrap(), (2, "env"));
        assert_eq!(resolve_seed(None, None, &cfg).unwrap(), (5, "config"));
        assert!(matches!(resolve_seed(None, Some("x".into()), &cfg), Err(CliError::Validation(_))));
    }

    #[test]
    fn flags_become_overrides() {
        let cli = Cli::try_parse_from(["recfm", "gen-data", "--out", "o", "--dataset", "pendulum", "--alpha", "0.5"]).unwrap();
        assert_eq!(cli.command.flag_overrides(), vec!["data.dataset=\"pendulum\"", "data.alpha=0.5"]);
        let cli = Cli::try_parse_from(["recfm", "eval", "--out", "o", "--ckpt", "c", "--data", "d", "--steps", "1,2"]).unwrap();
        assert_eq!(cli.command.flag_overrides(), vec!["sample.eval_steps=[1,2]"]);
    }

    #[test]
    fn help_and_bad_flags() {
        assert_eq!(run(["recfm", "--help"]), 0);
        assert_eq!(run(["recfm", "train", "--help"]), 0);
        assert_eq!(run(["recfm", "train", "--bogus"]), 1);
        assert_eq!(run(["recfm", "nope"]), 1);
    }
}
