//! Train-and-score drivers shared by `eval`, `ablate` and the acceptance
//! suite.

use recfm_core::datasets::{FieldRollout, NormStats, TrainData};
use recfm_core::metrics::{crps_fair, ensemble_mse, kinetic_energy_accuracy, ssr, wave_residual};
use recfm_core::model::{ModelConfig, VelocityField, VelocityNet};
use recfm_core::rng::derive_seed;
use recfm_core::sampler::{autoregressive_rollout, generate_ensemble, SampleConfig};
use recfm_core::trainer::{train, TrainConfig, TrainError, TrainRun};
use recfm_core::verify::{consistency_pde_residual, sample_points};
use recfm_core::Tensor;

use crate::error::{CliError, CliResult};

/// Ensemble scores of forecasts for a set of conditioning rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Scores {
    pub mse: f64,
    pub crps: f64,
    pub ssr: f64,
}

/// Score `members` ensemble forecasts of the first `rows` rows of `data`
/// made with `steps` Euler steps.
pub fn window_scores<F: VelocityField>(field: &F, data: &TrainData, rows: usize, members: usize, steps: usize, seed: u64) -> CliResult<Scores> {
    let rows = rows.min(data.len());
    let idx: Vec<usize> = (0..rows).collect();
    let (obs, cond) = data.gather(&idx);
    let ens = generate_ensemble(field, cond.as_ref(), rows, &SampleConfig::new(steps, members, seed))?;
    Ok(Scores {
        mse: ensemble_mse(&ens.members, &obs)?,
        crps: crps_fair(&ens.members, &obs)?,
        ssr: if members >= 2 { ssr(&ens.members, &obs)? } else { f64::NAN },
    })
}

/// Mean cross-scale residual over `n` points on interpolation paths of
/// `data` with `t` in `[0.05, 0.95]`.
pub fn mean_residual<F: VelocityField>(field: &F, data: &TrainData, n: usize, eps: f64, seed: u64) -> CliResult<f64> {
    let p = sample_points(data, n, 0.05, 0.95, seed)?;
    Ok(consistency_pde_residual(field, &p, eps)?.mean)
}

#[derive(Clone, Debug)]
pub enum Outcome {
    Trained(TrainRun),
    Diverged { iteration: usize, error: String, run: TrainRun },
}

impl Outcome {
    pub fn run(&self) -> &TrainRun {
        match self {
            Outcome::Trained(r) | Outcome::Diverged { run: r, .. } => r,
        }
    }

    pub fn status(&self) -> String {
        match self {
            Outcome::Trained(_) => "ok".into(),
            Outcome::Diverged { iteration, .. } => format!("diverged@{iteration}"),
        }
    }
}

/// Train a fresh network; divergence keeps the last good parameters.
pub fn train_fresh(model: &ModelConfig, cfg: &TrainConfig, data: &TrainData, val: Option<&TrainData>) -> CliResult<Outcome> {
    let net = VelocityNet::new(model.clone())?;
    match train(cfg, net, data, val) {
        Ok(run) => Ok(Outcome::Trained(run)),
        Err(TrainError::Invalid(e)) => Err(e.into()),
        Err(TrainError::Diverged(d)) => {
            let nfe = d.curve.last().map_or(0, |c| c.nfe);
            Ok(Outcome::Diverged {
                iteration: d.iteration,
                error: d.error.to_string(),
                run: TrainRun {
                    net: d.last_good,
                    curve: d.curve,
                    nfe,
                },
            })
        }
    }
}

/// Per-rollout metrics of an autoregressive forecast against the truth.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutScores {
    pub mse: f64,
    pub crps: f64,
    pub ssr: f64,
    pub ke_accuracy: Option<f64>,
    pub wave_residual: Option<f64>,
}

fn denormalize(frames: &Tensor, stats: &NormStats) -> CliResult<Tensor> {
    let s = frames.shape();
    let (nc, plane) = (s[s.len() - 3], s[s.len() - 2] * s[s.len() - 1]);
    let data = frames
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let c = (i / plane) % nc;
            v * stats.std[c] + stats.mean[c]
        })
        .collect();
    Ok(Tensor::new(s.to_vec(), data)?)
}

/// Ensemble-mean frames of a `[M, T, C, H, W]` forecast.
fn member_mean(frames: &Tensor) -> CliResult<Tensor> {
    let m = frames.shape()[0];
    let n = frames.len() / m;
    let mut mean = vec![0.0; n];
    for row in frames.data().chunks_exact(n) {
        mean.iter_mut().zip(row).for_each(|(a, b)| *a += b / m as f64);
    }
    Ok(Tensor::new(frames.shape()[1..].to_vec(), mean)?)
}

/// Forecast `truth` from its first `context` frames and score the rest.
/// Kinetic-energy accuracy is reported when the rollout has `u` and `v`
/// channels, the wave residual when it carries a frequency `omega`; both
/// use physical (denormalized) ensemble-mean frames.
pub fn rollout_scores<F: VelocityField>(field: &F, truth: &FieldRollout, context: usize, horizon: usize, cfg: &SampleConfig) -> CliResult<(RolloutScores, Tensor)> {
    let t = truth.num_frames();
    if context + horizon > t || horizon == 0 {
        return Err(CliError::Validation(format!("context {context} + horizon {horizon} exceeds {t} frames")));
    }
    let shape = truth.frames.shape();
    let frame = truth.frame_len();
    let init = Tensor::new([&[context], &shape[1..]].concat(), truth.frames.data()[..context * frame].to_vec())?;
    let obs = Tensor::new([&[horizon], &shape[1..]].concat(), truth.frames.data()[context * frame..(context + horizon) * frame].to_vec())?;
    let pred = autoregressive_rollout(field, &init, horizon, cfg)?;
    let m = cfg.members;
    let mut scores = RolloutScores {
        mse: ensemble_mse(&pred.frames, &obs)?,
        crps: crps_fair(&pred.frames, &obs)?,
        ssr: if m >= 2 { ssr(&pred.frames, &obs)? } else { f64::NAN },
        ke_accuracy: None,
        wave_residual: None,
    };
    let mean = member_mean(&pred.frames)?;
    let (mean_phys, obs_phys) = match &truth.stats {
        Some(s) => (denormalize(&mean, s)?, denormalize(&obs, s)?),
        None => (mean.clone(), obs.clone()),
    };
    if let (Ok(u), Ok(v)) = (truth.channel_index("u"), truth.channel_index("v")) {
        scores.ke_accuracy = Some(kinetic_energy_accuracy(&mean_phys, &obs_phys, &[u, v])?.summary);
    }
    if let Some(&omega) = truth.params.get("omega") {
        if horizon >= 3 {
            scores.wave_residual = Some(wave_residual(&mean_phys, omega, truth.dt)?);
        }
    }
    Ok((scores, pred.frames))
}

/// Seed for the forecast of test trajectory `i`.
pub fn trajectory_seed(root: u64, i: usize) -> u64 {
    derive_seed(root, 0x7472_616a_0000 + i as u64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use recfm_core::datasets::{build_field_dataset, forecast_windows, FieldDatasetConfig};
    use recfm_core::model::PointwiseField;

    fn tiny() -> recfm_core::datasets::FieldDataset {
        let mut cfg = FieldDatasetConfig::advection_diffusion(5, 3);
        cfg.h = 8;
        cfg.w = 8;
        cfg.frames = 6;
        build_field_dataset(&cfg).unwrap()
    }

    #[test]
    fn persistence_forecast_scores() {
        let ds = tiny();
        let n = ds.test[0].frame_len();
        // v = x - cond, so one Euler step from any noise returns the
        // conditioning frame: a deterministic persistence forecast.
        let persist = Persist(n);
        let truth = &ds.test[0];
        let (s, frames) = rollout_scores(&persist, truth, 1, 5, &SampleConfig::new(1, 3, 0)).unwrap();
        assert_eq!(frames.shape(), &[3, 5, 2, 8, 8]);
        // Every member repeats frame 0.
        let f0 = truth.frame(0);
        assert!(frames.data().chunks_exact(n).all(|f| f.iter().zip(f0).all(|(a, b)| (a - b).abs() < 1e-12)));
        assert!(s.crps >= 0.0 && s.mse > 0.0 && s.ke_accuracy.is_some() && s.wave_residual.is_none());

        let windows = forecast_windows(&ds.test, 1, 1, 1).unwrap();
        let w = window_scores(&persist, &windows, 4, 3, 1, 0).unwrap();
        assert!(w.mse > 0.0);
        // Zero spread.
        assert!(w.ssr.abs() < 1e-6);
    }

    struct Persist(usize);

    impl VelocityField for Persist {
        fn state_dim(&self) -> usize {
            self.0
        }
        fn cond_dim(&self) -> usize {
            self.0
        }
        fn velocity(&self, x: &Tensor, cond: Option<&Tensor>, _t: &[f64], _a: &[f64]) -> recfm_core::Result<Tensor> {
            x.sub(cond.unwrap())
        }
    }

    #[test]
    fn residual_of_scale_linear_field_vanishes() {
        let ds = tiny();
        let data = forecast_windows(&ds.train, 1, 1, 1).unwrap();
        let n = data.state_dim();
        let f = PointwiseField::new(n, |x: &[f64], _, a, o: &mut [f64]| o.iter_mut().zip(x).for_each(|(o, x)| *o = a * x));
        // The field ignores conditioning; strip it so shapes line up.
        let plain = TrainData::new(data.target.clone(), None).unwrap();
        assert!(mean_residual(&f, &plain, 8, 1e-3, 0).unwrap() < 1e-9);
    }
}
