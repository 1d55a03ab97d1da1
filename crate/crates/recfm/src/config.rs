//! Run configuration: JSON documents with dotted-key overrides.
//!
//! A run starts from [`Config::default`], merges an optional JSON file over
//! it, then applies `section.key=value` overrides. Every key must already
//! exist in the defaults, so typos are rejected instead of ignored.

use std::path::Path;

use recfm_core::datasets::{FieldDatasetConfig, FieldKind};
use recfm_core::model::{Activation, ModelConfig};
use recfm_core::optim::AdamW;
use recfm_core::sampler::{SampleConfig, StepSlot};
use recfm_core::trainer::{TrainConfig, TrainMode};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// `pendulum`, `gaussian`, `advection-diffusion` or `standing-wave`.
    pub dataset: String,
    pub trajectories: usize,
    pub h: usize,
    pub w: usize,
    pub frames: usize,
    pub dt: f64,
    pub channels: usize,
    pub nu: f64,
    pub speed_min: f64,
    pub speed_max: f64,
    pub omega_min: f64,
    pub omega_max: f64,
    /// Conditioning frames per forecast window.
    pub context: usize,
    /// Predicted frames per forecast window.
    pub chunk: usize,
    pub stride: usize,
    /// Gaussian pairs: sample count and dimension.
    pub n: usize,
    pub dim: usize,
    /// Pendulum settings.
    pub v0: f64,
    pub alpha: f64,
    pub bounces: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        let f = FieldDatasetConfig::advection_diffusion(40, 0);
        Self {
            dataset: FieldKind::AdvectionDiffusion.name().into(),
            trajectories: f.trajectories,
            h: f.h,
            w: f.w,
            frames: f.frames,
            dt: f.dt,
            channels: f.channels,
            nu: f.nu,
            speed_min: f.speed_range.0,
            speed_max: f.speed_range.1,
            omega_min: f.omega_range.0,
            omega_max: f.omega_range.1,
            context: 1,
            chunk: 1,
            stride: 1,
            n: 10_000,
            dim: 1,
            v0: 1.0,
            alpha: 0.8,
            bounces: 5,
        }
    }
}

impl DataSection {
    pub fn field_config(&self, seed: u64) -> CliResult<FieldDatasetConfig> {
        let kind = FieldKind::parse(&self.dataset)?;
        Ok(FieldDatasetConfig {
            kind,
            trajectories: self.trajectories,
            h: self.h,
            w: self.w,
            frames: self.frames,
            dt: self.dt,
            channels: self.channels,
            nu: self.nu,
            speed_range: (self.speed_min, self.speed_max),
            omega_range: (self.omega_min, self.omega_max),
            seed,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub hidden: Vec<usize>,
    pub activation: String,
    pub embed_dim: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::desk(1, 0, 0);
        Self {
            hidden: m.hidden,
            activation: m.activation.name().into(),
            embed_dim: m.embed_dim,
        }
    }
}

impl ModelSection {
    pub fn model_config(&self, state_dim: usize, cond_dim: usize, seed: u64) -> CliResult<ModelConfig> {
        let cfg = ModelConfig {
            state_dim,
            cond_dim,
            hidden: self.hidden.clone(),
            activation: Activation::parse(&self.activation)?,
            embed_dim: self.embed_dim,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub mode: String,
    pub depth: usize,
    pub lambda: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub stop_grad_primary: bool,
    pub per_batch_scale: bool,
    pub shortcut_fraction: f64,
    pub eval_every: usize,
    pub val_rows: usize,
    /// Run recursive training for `iterations / depth` updates so its
    /// evaluation budget matches flow matching with `iterations`.
    pub match_nfe: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::recfm(1000, 0);
        Self {
            mode: t.mode.name().into(),
            depth: t.depth,
            lambda: t.lambda,
            batch_size: t.batch_size,
            iterations: t.iterations,
            lr: t.optim.lr,
            beta1: t.optim.beta1,
            beta2: t.optim.beta2,
            eps: t.optim.eps,
            weight_decay: t.optim.weight_decay,
            stop_grad_primary: t.stop_grad_primary,
            per_batch_scale: t.per_batch_scale,
            shortcut_fraction: t.shortcut_fraction,
            eval_every: t.eval_every,
            val_rows: t.val_rows,
            match_nfe: false,
        }
    }
}

impl TrainSection {
    pub fn train_config(&self, seed: u64) -> CliResult<TrainConfig> {
        let mode = TrainMode::parse(&self.mode)?;
        let iterations = if self.match_nfe && mode == TrainMode::RecFm {
            recfm_core::trainer::matched_iterations(self.iterations, self.depth)
        } else {
            self.iterations
        };
        let cfg = TrainConfig {
            mode,
            depth: self.depth,
            lambda: self.lambda,
            batch_size: self.batch_size,
            iterations,
            optim: AdamW {
                lr: self.lr,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.eps,
                weight_decay: self.weight_decay,
            },
            seed,
            stop_grad_primary: self.stop_grad_primary,
            per_batch_scale: self.per_batch_scale,
            shortcut_fraction: self.shortcut_fraction,
            eval_every: self.eval_every,
            val_rows: self.val_rows,
        }
        .normalized();
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleSection {
    pub steps: usize,
    /// Step counts compared by `eval`.
    pub eval_steps: Vec<usize>,
    pub members: usize,
    /// Forecast length in frames; 0 means the rest of each test trajectory.
    pub horizon: usize,
    /// Rows sampled for unconditioned data, and test windows scored by
    /// `ablate`.
    pub rows: usize,
    /// What the third network input receives while sampling: `unit`,
    /// `step-size`, or `auto` (step size for shortcut checkpoints).
    pub slot: String,
}

impl Default for SampleSection {
    fn default() -> Self {
        Self {
            steps: 1,
            eval_steps: vec![1, 2, 4, 8],
            members: 8,
            horizon: 0,
            rows: 1000,
            slot: "auto".into(),
        }
    }
}

impl SampleSection {
    /// Sampler settings for a checkpoint trained in `mode`.
    pub fn sample_config(&self, mode: &str, steps: usize, chunk: usize, seed: u64) -> CliResult<SampleConfig> {
        let slot = match (self.slot.as_str(), mode) {
            ("auto", "shortcut") | ("step-size", _) => StepSlot::StepSize,
            ("auto", _) | ("unit", _) => StepSlot::Unit,
            (s, _) => return Err(CliError::Validation(format!("unknown step slot `{s}` (expected auto, unit or step-size)"))),
        };
        let cfg = SampleConfig {
            chunk,
            slot,
            ..SampleConfig::new(steps, self.members, seed)
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifySection {
    pub points: usize,
    pub fd_eps: f64,
    pub ks: Vec<usize>,
    pub reference_k: usize,
    pub alphas: Vec<f64>,
    pub marginal_n: usize,
    pub marginal_steps: usize,
    pub tau: f64,
    pub ds: Vec<f64>,
    pub lipschitz_directions: usize,
}

impl Default for VerifySection {
    fn default() -> Self {
        Self {
            points: 64,
            fd_eps: 1e-3,
            ks: vec![1, 2, 4, 8, 16],
            reference_k: 256,
            alphas: vec![0.25, 0.5, 1.0],
            marginal_n: 10_000,
            marginal_steps: 2000,
            tau: 1.0,
            ds: vec![0.0125, 0.025, 0.05, 0.1, 0.2],
            lipschitz_directions: 8,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    /// Fallback seed when neither `--seed` nor `RECFM_SEED` is given.
    pub seed: u64,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub sample: SampleSection,
    pub verify: VerifySection,
}

/// Overlay `top` onto `base`, recursing into objects. Keys absent from
/// `base` are errors.
fn merge(base: &mut Value, top: &Value, path: &str) -> CliResult<()> {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                let slot = b.get_mut(k).ok_or_else(|| CliError::Validation(format!("unknown config key `{p}`")))?;
                merge(slot, v, &p)?;
            }
            Ok(())
        }
        (b, t) => {
            *b = t.clone();
            Ok(())
        }
    }
}

/// `section.key=value`; the value is read as JSON when it parses and as a
/// string otherwise.
pub fn parse_override(s: &str) -> CliResult<(Vec<String>, Value)> {
    let (key, value) = s
        .split_once('=')
        .ok_or_else(|| CliError::Validation(format!("override `{s}` is not of the form key=value")))?;
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(CliError::Validation(format!("malformed override key `{key}`")));
    }
    let v = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
    Ok((key.split('.').map(str::to_string).collect(), v))
}

impl Config {
    /// Defaults, then `file_text` (JSON), then overrides in order.
    pub fn resolve(file_text: Option<&str>, overrides: &[String]) -> CliResult<Self> {
        let mut value = serde_json::to_value(Config::default()).map_err(|e| CliError::Runtime(e.to_string()))?;
        if let Some(text) = file_text {
            let user: Value = serde_json::from_str(text).map_err(|e| CliError::Validation(format!("malformed config: {e}")))?;
            if !user.is_object() {
                return Err(CliError::Validation("malformed config: top level must be an object".into()));
            }
            merge(&mut value, &user, "")?;
        }
        for o in overrides {
            let (keys, v) = parse_override(o)?;
            let mut top = v;
            for k in keys.iter().rev() {
                top = Value::Object([(k.clone(), top)].into_iter().collect());
            }
            merge(&mut value, &top, "")?;
        }
        serde_json::from_value(value).map_err(|e| CliError::Validation(format!("malformed config: {e}")))
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> CliResult<(Self, Option<String>)> {
        let text = match path {
            Some(p) => Some(std::fs::read_to_string(p).map_err(|e| CliError::missing(p, e))?),
            None => None,
        };
        Ok((Self::resolve(text.as_deref(), overrides)?, text))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_core_defaults() {
        let c = Config::resolve(None, &[]).unwrap();
        assert_eq!(c, Config::default());
        let t = c.train.train_config(3).unwrap();
        assert_eq!(t, TrainConfig::recfm(1000, 3));
        assert_eq!(c.model.model_config(4, 2, 1).unwrap(), ModelConfig::desk(4, 2, 1));
    }

    #[test]
    fn file_then_overrides() {
        let c = Config::resolve(
            Some(r#"{"train": {"lambda": 0.5, "mode": "fm"}, "seed": 9}"#),
            &["train.lambda=10".into(), "model.activation=gelu".into(), "model.hidden=[8,8]".into()],
        )
        .unwrap();
        assert_eq!(c.train.lambda, 10.0);
        assert_eq!(c.train.mode, "fm");
        assert_eq!(c.seed, 9);
        assert_eq!(c.model.hidden, vec![8, 8]);
        // Flow matching pins depth and weight.
        let t = c.train.train_config(0).unwrap();
        assert_eq!((t.depth, t.lambda), (1, 0.0));
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        assert!(Config::resolve(None, &["train.lamda=1".into()]).is_err());
        assert!(Config::resolve(None, &["train.lambda".into()]).is_err());
        assert!(Config::resolve(None, &["train..x=1".into()]).is_err());
        assert!(Config::resolve(Some("{not json"), &[]).is_err());
        assert!(Config::resolve(Some("[1]"), &[]).is_err());
        assert!(Config::resolve(Some(r#"{"model": {"depth": 3}}"#), &[]).is_err());
        assert!(Config::resolve(None, &["train.iterations=\"many\"".into()]).is_err());
    }

    #[test]
    fn matched_budget() {
        let c = Config::resolve(None, &["train.match_nfe=true".into(), "train.iterations=600".into(), "train.depth=3".into()]).unwrap();
        assert_eq!(c.train.train_config(0).unwrap().iterations, 200);
    }
}
