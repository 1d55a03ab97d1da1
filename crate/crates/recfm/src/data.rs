//! Dataset directories written by `gen-data` and read by the other
//! subcommands.
//!
//! Every directory has a `dataset.json`. Field datasets store each split as
//! one `[N, T, C, H, W]` tensor (`train.rft`, `val.rft`, `test.rft`) of
//! z-scored frames; Gaussian pairs store `x0.rft` and `x1.rft`; pendulum
//! traces store `times.rft`, `positions.rft` and `speeds.rft`.

use std::collections::BTreeMap;
use std::path::Path;

use recfm_core::datasets::{
    build_field_dataset, make_gaussian_pairs, simulate_pendulum, FieldDataset, FieldKind, FieldRollout, NormStats, PendulumTrace, TrainData,
};
use recfm_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::DataSection;
use crate::error::{CliError, CliResult};
use crate::io::{fmt_f64, read_json, read_tensor, write_json, write_tensor, Table};

pub const DATASET_FILE: &str = "dataset.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRecord {
    /// Index of each trajectory in generation order.
    pub source: Vec<usize>,
    /// Generator parameters of each trajectory.
    pub params: Vec<BTreeMap<String, f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldRecord {
    pub channels: Vec<String>,
    pub dt: f64,
    pub frames: usize,
    /// `[C, H, W]`.
    pub frame_shape: [usize; 3],
    pub norm_mean: Vec<f64>,
    pub norm_std: Vec<f64>,
    pub train: SplitRecord,
    pub val: SplitRecord,
    pub test: SplitRecord,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub dataset: String,
    pub seed: u64,
    pub config: DataSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<FieldRecord>,
}

#[derive(Clone, Debug)]
pub enum Dataset {
    Pendulum(PendulumTrace),
    Gaussian { x0: Tensor, x1: Tensor },
    Field { kind: FieldKind, data: FieldDataset, dt: f64 },
}

impl Dataset {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Dataset::Pendulum(_) => "pendulum",
            Dataset::Gaussian { .. } => "gaussian",
            Dataset::Field { kind, .. } => kind.name(),
        }
    }
}

/// Generate the dataset named in `cfg`.
pub fn generate(cfg: &DataSection, seed: u64) -> CliResult<Dataset> {
    match cfg.dataset.as_str() {
        "pendulum" => Ok(Dataset::Pendulum(simulate_pendulum(cfg.v0, cfg.alpha, cfg.bounces, cfg.dt)?)),
        "gaussian" => {
            let (pairs, _) = make_gaussian_pairs(cfg.n, cfg.dim, seed)?;
            Ok(Dataset::Gaussian { x0: pairs.x0, x1: pairs.x1 })
        }
        name => {
            let kind = FieldKind::parse(name).map_err(|_| {
                CliError::Validation(format!("unknown dataset `{name}` (expected pendulum, gaussian, advection-diffusion or standing-wave)"))
            })?;
            let fc = cfg.field_config(seed)?;
            Ok(Dataset::Field {
                kind,
                data: build_field_dataset(&fc)?,
                dt: fc.dt,
            })
        }
    }
}

fn split_tensor(rollouts: &[FieldRollout]) -> CliResult<Tensor> {
    let frames: Vec<Tensor> = rollouts.iter().map(|r| r.frames.clone()).collect();
    Ok(Tensor::stack(&frames)?)
}

fn split_record(rollouts: &[FieldRollout], source: &[usize]) -> SplitRecord {
    SplitRecord {
        source: source.to_vec(),
        params: rollouts.iter().map(|r| r.params.clone()).collect(),
    }
}

/// Write `ds` into `dir` and return the CSV tables that summarize it.
pub fn write_dataset(dir: &Path, ds: &Dataset, cfg: &DataSection, seed: u64) -> CliResult<Vec<(String, Table)>> {
    let mut manifest = DatasetManifest {
        dataset: ds.kind_name().into(),
        seed,
        config: cfg.clone(),
        field: None,
    };
    let mut tables = Vec::new();
    match ds {
        Dataset::Pendulum(p) => {
            write_tensor(&dir.join("times.rft"), &Tensor::vector(p.times.clone())?)?;
            write_tensor(&dir.join("positions.rft"), &Tensor::vector(p.positions.clone())?)?;
            write_tensor(&dir.join("speeds.rft"), &Tensor::vector(p.speeds.clone())?)?;
            let mut trace = Table::new(&["time", "position"]);
            for (t, x) in p.times.iter().zip(&p.positions) {
                trace.push(vec![fmt_f64(*t), fmt_f64(*x)]);
            }
            let mut bounces = Table::new(&["bounce", "speed", "energy", "energy_ratio"]);
            let e = p.energies();
            for (i, (v, en)) in p.speeds.iter().zip(&e).enumerate() {
                let ratio = if i == 0 { String::new() } else { fmt_f64(en / e[i - 1]) };
                bounces.push(vec![i.to_string(), fmt_f64(*v), fmt_f64(*en), ratio]);
            }
            tables.push(("trace.csv".into(), trace));
            tables.push(("bounces.csv".into(), bounces));
        }
        Dataset::Gaussian { x0, x1 } => {
            write_tensor(&dir.join("x0.rft"), x0)?;
            write_tensor(&dir.join("x1.rft"), x1)?;
            let mut summary = Table::new(&["sample", "mean", "variance"]);
            for (name, t) in [("x0", x0), ("x1", x1)] {
                let m = t.mean();
                let var = t.data().iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (t.len() - 1).max(1) as f64;
                summary.push(vec![name.into(), fmt_f64(m), fmt_f64(var)]);
            }
            tables.push(("summary.csv".into(), summary));
        }
        Dataset::Field { data, dt, .. } => {
            let first = data.train.first().ok_or_else(|| CliError::Validation("empty training split".into()))?;
            for (name, split) in [("train", &data.train), ("val", &data.val), ("test", &data.test)] {
                write_tensor(&dir.join(format!("{name}.rft")), &split_tensor(split)?)?;
            }
            let keys: Vec<String> = first.params.keys().cloned().collect();
            let mut header = vec!["split".to_string(), "trajectory".into(), "source".into()];
            header.extend(keys.iter().cloned());
            let mut traj = Table::new(&header);
            for (name, split, ids) in [
                ("train", &data.train, &data.splits.train),
                ("val", &data.val, &data.splits.val),
                ("test", &data.test, &data.splits.test),
            ] {
                for (i, (r, src)) in split.iter().zip(ids.iter()).enumerate() {
                    let mut row = vec![name.to_string(), i.to_string(), src.to_string()];
                    row.extend(keys.iter().map(|k| fmt_f64(r.params[k])));
                    traj.push(row);
                }
            }
            tables.push(("trajectories.csv".into(), traj));
            manifest.field = Some(FieldRecord {
                channels: first.channels.clone(),
                dt: *dt,
                frames: first.num_frames(),
                frame_shape: first.frame_shape(),
                norm_mean: data.stats.mean.clone(),
                norm_std: data.stats.std.clone(),
                train: split_record(&data.train, &data.splits.train),
                val: split_record(&data.val, &data.splits.val),
                test: split_record(&data.test, &data.splits.test),
            });
        }
    }
    for (name, t) in &tables {
        t.write(&dir.join(name))?;
    }
    write_json(&dir.join(DATASET_FILE), &manifest)?;
    Ok(tables)
}

fn read_split(dir: &Path, name: &str, rec: &FieldRecord, split: &SplitRecord, stats: &NormStats) -> CliResult<Vec<FieldRollout>> {
    let t = read_tensor(&dir.join(format!("{name}.rft")))?;
    let s = t.shape();
    if s.len() != 5 || s[0] != split.params.len() || s[1] != rec.frames || s[2..] != rec.frame_shape {
        return Err(CliError::Validation(format!("{name}.rft has shape {s:?}, inconsistent with {DATASET_FILE}")));
    }
    (0..s[0])
        .map(|i| {
            let mut r = FieldRollout::new(t.index_outer(i)?, rec.channels.clone(), rec.dt, split.params[i].clone())?;
            r.stats = Some(stats.clone());
            Ok(r)
        })
        .collect()
}

pub fn read_dataset(dir: &Path) -> CliResult<(Dataset, DatasetManifest)> {
    let m: DatasetManifest = read_json(&dir.join(DATASET_FILE))?;
    let ds = match m.dataset.as_str() {
        "pendulum" => {
            let speeds = read_tensor(&dir.join("speeds.rft"))?.into_data();
            let alpha = m.config.alpha;
            Dataset::Pendulum(PendulumTrace {
                times: read_tensor(&dir.join("times.rft"))?.into_data(),
                positions: read_tensor(&dir.join("positions.rft"))?.into_data(),
                speeds,
                alpha,
                dt: m.config.dt,
            })
        }
        "gaussian" => Dataset::Gaussian {
            x0: read_tensor(&dir.join("x0.rft"))?,
            x1: read_tensor(&dir.join("x1.rft"))?,
        },
        name => {
            let kind = FieldKind::parse(name)?;
            let rec = m.field.as_ref().ok_or_else(|| CliError::Validation(format!("{DATASET_FILE} lacks the field record")))?;
            let stats = NormStats {
                mean: rec.norm_mean.clone(),
                std: rec.norm_std.clone(),
            };
            let data = FieldDataset {
                train: read_split(dir, "train", rec, &rec.train, &stats)?,
                val: read_split(dir, "val", rec, &rec.val, &stats)?,
                test: read_split(dir, "test", rec, &rec.test, &stats)?,
                stats,
                splits: recfm_core::datasets::Splits {
                    train: rec.train.source.clone(),
                    val: rec.val.source.clone(),
                    test: rec.test.source.clone(),
                },
            };
            Dataset::Field { kind, data, dt: rec.dt }
        }
    };
    Ok((ds, m))
}

/// Training and validation samples for flow matching. Gaussian pairs hold
/// out their last tenth for validation.
#[derive(Clone, Debug)]
pub struct Samples {
    pub train: TrainData,
    pub val: TrainData,
    pub test: Option<TrainData>,
    pub context: usize,
    pub chunk: usize,
}

pub fn samples(ds: &Dataset, cfg: &DataSection) -> CliResult<Samples> {
    match ds {
        Dataset::Pendulum(_) => Err(CliError::Validation("pendulum traces are a didactic dataset and cannot be trained on".into())),
        Dataset::Gaussian { x0, .. } => {
            let n = x0.rows();
            let n_val = (n / 10).max(1);
            if n <= n_val {
                return Err(CliError::Validation(format!("{n} Gaussian samples are too few to hold out validation rows")));
            }
            Ok(Samples {
                train: TrainData::new(x0.slice_rows(0, n - n_val)?, None)?,
                val: TrainData::new(x0.slice_rows(n - n_val, n)?, None)?,
                test: None,
                context: 0,
                chunk: 0,
            })
        }
        Dataset::Field { data, .. } => {
            let win = |r: &[FieldRollout], stride: usize| recfm_core::datasets::forecast_windows(r, cfg.context, cfg.chunk, stride);
            Ok(Samples {
                train: win(&data.train, cfg.stride)?,
                val: win(&data.val, cfg.chunk)?,
                test: Some(win(&data.test, cfg.chunk)?),
                context: cfg.context,
                chunk: cfg.chunk,
            })
        }
    }
}
