//! Checkpoints: `checkpoint.json` plus one `RFT1` file per parameter tensor
//! under `tensors/`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use recfm_core::model::{Activation, ModelConfig, ParamSet, VelocityNet};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::io::{read_json, read_tensor, write_json, write_tensor};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelRecord {
    pub state_dim: usize,
    pub cond_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: String,
    pub embed_dim: usize,
    pub seed: u64,
}

impl From<&ModelConfig> for ModelRecord {
    fn from(c: &ModelConfig) -> Self {
        Self {
            state_dim: c.state_dim,
            cond_dim: c.cond_dim,
            hidden: c.hidden.clone(),
            activation: c.activation.name().into(),
            embed_dim: c.embed_dim,
            seed: c.seed,
        }
    }
}

impl ModelRecord {
    pub fn to_config(&self) -> CliResult<ModelConfig> {
        Ok(ModelConfig {
            state_dim: self.state_dim,
            cond_dim: self.cond_dim,
            hidden: self.hidden.clone(),
            activation: Activation::parse(&self.activation)?,
            embed_dim: self.embed_dim,
            seed: self.seed,
        })
    }
}

/// How a checkpoint was trained and what data layout it expects.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingRecord {
    pub seed: u64,
    pub mode: String,
    pub depth: usize,
    pub lambda: f64,
    pub dataset: String,
    /// Conditioning and predicted frames per window; zero for unconditioned
    /// data.
    pub context: usize,
    pub chunk: usize,
}

impl TrainingRecord {
    /// Short model label for result tables.
    pub fn label(&self) -> String {
        if self.mode == "recfm" {
            format!("recfm-d{}-lambda{}", self.depth, self.lambda)
        } else {
            self.mode.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub model: ModelRecord,
    /// Optimizer updates applied so far.
    pub step: u64,
    pub training: TrainingRecord,
    pub tensors: Vec<String>,
}

fn tensor_file(name: &str) -> String {
    format!("{name}.rft")
}

pub fn save_checkpoint(dir: &Path, net: &VelocityNet, training: &TrainingRecord) -> CliResult<()> {
    let tdir = dir.join("tensors");
    fs::create_dir_all(&tdir).map_err(|e| CliError::io(&tdir, e))?;
    for (name, t) in &net.params.tensors {
        write_tensor(&tdir.join(tensor_file(name)), t)?;
    }
    let manifest = CheckpointManifest {
        model: ModelRecord::from(&net.cfg),
        step: net.params.step,
        training: training.clone(),
        tensors: net.params.tensors.keys().cloned().collect(),
    };
    write_json(&dir.join(CHECKPOINT_FILE), &manifest)
}

/// Load a checkpoint directory; the training run directory itself is also
/// accepted when it holds a `checkpoint/` subdirectory.
pub fn load_checkpoint(dir: &Path) -> CliResult<(VelocityNet, CheckpointManifest)> {
    let dir = if dir.join(CHECKPOINT_FILE).exists() { dir.to_path_buf() } else { dir.join("checkpoint") };
    let manifest: CheckpointManifest = read_json(&dir.join(CHECKPOINT_FILE))?;
    let cfg = manifest.model.to_config()?;
    let mut tensors = BTreeMap::new();
    for name in &manifest.tensors {
        tensors.insert(name.clone(), read_tensor(&dir.join("tensors").join(tensor_file(name)))?);
    }
    let mut params = ParamSet::from_tensors(tensors);
    params.step = manifest.step;
    let net = VelocityNet::from_parts(cfg, params)?;
    Ok((net, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use recfm_core::model::VelocityField;
    use recfm_core::Tensor;

    fn record(mode: &str) -> TrainingRecord {
        TrainingRecord {
            seed: 1,
            mode: mode.into(),
            depth: 2,
            lambda: 1.0,
            dataset: "gaussian".into(),
            context: 0,
            chunk: 0,
        }
    }

    #[test]
    fn roundtrip_preserves_outputs_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ModelConfig::desk(3, 2, 11);
        cfg.hidden = vec![5, 4];
        let net = VelocityNet::new(cfg).unwrap();
        save_checkpoint(dir.path(), &net, &record("recfm")).unwrap();
        let (back, m) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back.params.tensors, net.params.tensors);
        assert_eq!(m.tensors.len(), 6);
        assert_eq!(m.training.label(), "recfm-d2-lambda1");
        let x = Tensor::matrix(2, 3, vec![0.1, 0.2, 0.3, -1.0, 0.0, 2.0]).unwrap();
        let c = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let a = net.velocity(&x, Some(&c), &[0.2, 0.9], &[1.0, 0.5]).unwrap();
        let b = back.velocity(&x, Some(&c), &[0.2, 0.9], &[1.0, 0.5]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn shape_tampering_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ModelConfig::desk(3, 0, 1);
        cfg.hidden = vec![4];
        let net = VelocityNet::new(cfg).unwrap();
        save_checkpoint(dir.path(), &net, &record("fm")).unwrap();
        write_tensor(&dir.path().join("tensors/layer0.bias.rft"), &Tensor::zeros(&[5])).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(CliError::Validation(_))));
    }
}
