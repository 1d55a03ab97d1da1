//! Ensemble forecast verification.
//!
//! Ensembles are `[M, ...]` tensors whose trailing shape matches the
//! observation. When the observation has rank two or more its leading axis
//! is read as frames: scores are averaged over points within a frame, then
//! over frames.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    PerFrame,
    PerRollout,
    Dataset,
}

impl Scope {
    pub fn name(self) -> &'static str {
        match self {
            Scope::PerFrame => "per-frame",
            Scope::PerRollout => "per-rollout",
            Scope::Dataset => "dataset",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRecord {
    pub name: String,
    pub value: f64,
    pub scope: Scope,
    pub members: usize,
    pub notes: String,
}

fn check_ensemble(members: &Tensor, obs: &Tensor, min_m: usize) -> Result<usize> {
    let s = members.shape();
    if s.len() != obs.rank() + 1 || &s[1..] != obs.shape() {
        return Err(Error::ShapeMismatch {
            op: "ensemble",
            expected: [&[s.first().copied().unwrap_or(0)][..], obs.shape()].concat(),
            found: s.to_vec(),
        });
    }
    if s[0] < min_m {
        return Err(invalid(format!("{} members given, at least {min_m} needed", s[0])));
    }
    Ok(s[0])
}

/// Per-point values reduced per frame, then across frames.
fn frame_mean(values: &[f64], obs_shape: &[usize]) -> f64 {
    let frames = if obs_shape.len() >= 2 { obs_shape[0] } else { 1 };
    let per = values.len() / frames;
    let mut acc = 0.0;
    for f in values.chunks_exact(per) {
        acc += f.iter().sum::<f64>() / per as f64;
    }
    acc / frames as f64
}

/// Member values at point `p`.
fn point(members: &Tensor, p: usize, buf: &mut Vec<f64>) {
    let n = members.len() / members.shape()[0];
    buf.clear();
    buf.extend(members.data().iter().skip(p).step_by(n));
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CrpsEstimator {
    /// Pairwise term over `M (M - 1)` ordered pairs.
    Fair,
    /// Empirical-CDF estimator, pairwise term over `M^2`.
    Plain,
}

/// `mean |x_m - y| - sum_{m != m'} |x_m - x_m'| / (2 M (M - 1))` (fair) or
/// `/ (2 M^2)` (plain), using sorted members: with `x_(0) <= ... <=
/// x_(M-1)`, `sum_{i<j} (x_(j) - x_(i)) = sum_i (2i - M + 1) x_(i)`.
fn crps_point(xs: &mut [f64], y: f64, est: CrpsEstimator) -> f64 {
    let m = xs.len() as f64;
    xs.sort_by(f64::total_cmp);
    let skill = xs.iter().map(|x| (x - y).abs()).sum::<f64>() / m;
    let half_pairs: f64 = xs.iter().enumerate().map(|(i, x)| (2.0 * i as f64 - m + 1.0) * x).sum();
    let denom = match est {
        CrpsEstimator::Fair => m * (m - 1.0),
        CrpsEstimator::Plain => m * m,
    };
    skill - half_pairs / denom
}

pub fn crps_with(members: &Tensor, obs: &Tensor, est: CrpsEstimator) -> Result<f64> {
    let min_m = if est == CrpsEstimator::Fair { 2 } else { 1 };
    check_ensemble(members, obs, min_m)?;
    let mut buf = Vec::new();
    let values: Vec<f64> = (0..obs.len())
        .map(|p| {
            point(members, p, &mut buf);
            crps_point(&mut buf, obs.data()[p], est)
        })
        .collect();
    Ok(frame_mean(&values, obs.shape()))
}

pub fn crps_fair(members: &Tensor, obs: &Tensor) -> Result<f64> {
    crps_with(members, obs, CrpsEstimator::Fair)
}

fn ensemble_mean(members: &Tensor) -> Vec<f64> {
    let m = members.shape()[0];
    let n = members.len() / m;
    let mut mean = vec![0.0; n];
    for row in members.data().chunks_exact(n) {
        mean.iter_mut().zip(row).for_each(|(a, b)| *a += b);
    }
    mean.iter_mut().for_each(|a| *a /= m as f64);
    mean
}

/// Squared error of the ensemble mean.
pub fn ensemble_mse(members: &Tensor, obs: &Tensor) -> Result<f64> {
    check_ensemble(members, obs, 1)?;
    let mean = ensemble_mean(members);
    let values: Vec<f64> = mean.iter().zip(obs.data()).map(|(a, b)| (a - b) * (a - b)).collect();
    Ok(frame_mean(&values, obs.shape()))
}

/// Spread (root mean unbiased member variance) over skill (root ensemble
/// MSE). No finite-ensemble correction is applied.
pub fn ssr(members: &Tensor, obs: &Tensor) -> Result<f64> {
    let m = check_ensemble(members, obs, 2)?;
    let mse = ensemble_mse(members, obs)?;
    if mse == 0.0 {
        return Err(invalid("ensemble mean matches the observation exactly; spread-skill ratio undefined"));
    }
    let mean = ensemble_mean(members);
    let n = mean.len();
    let mut var = vec![0.0; n];
    for row in members.data().chunks_exact(n) {
        for ((v, x), mu) in var.iter_mut().zip(row).zip(&mean) {
            *v += (x - mu) * (x - mu);
        }
    }
    var.iter_mut().for_each(|v| *v /= (m - 1) as f64);
    let spread = libm::sqrt(frame_mean(&var, obs.shape()));
    Ok(spread / libm::sqrt(mse))
}

#[derive(Clone, Debug, PartialEq)]
pub struct KeAccuracy {
    /// Energies normalized by the true energy of the first frame.
    pub pred_energy: Vec<f64>,
    pub true_energy: Vec<f64>,
    /// `min(E_pred, E_true) / max(E_pred, E_true)` per frame.
    pub per_frame: Vec<f64>,
    pub summary: f64,
}

/// Mean over pixels of `0.5 * sum_c u_c^2` for each frame of `[T, C, H, W]`.
pub fn kinetic_energy(frames: &Tensor, channels: &[usize]) -> Result<Vec<f64>> {
    if frames.rank() != 4 {
        return Err(invalid(format!("expected [T, C, H, W], got {:?}", frames.shape())));
    }
    let s = frames.shape();
    let (t, c, plane) = (s[0], s[1], s[2] * s[3]);
    if channels.is_empty() || channels.iter().any(|&ch| ch >= c) {
        return Err(invalid(format!("velocity channels {channels:?} not all in 0..{c}")));
    }
    Ok((0..t)
        .map(|k| {
            let mut e = 0.0;
            for &ch in channels {
                let off = (k * c + ch) * plane;
                e += frames.data()[off..off + plane].iter().map(|u| 0.5 * u * u).sum::<f64>();
            }
            e / plane as f64
        })
        .collect())
}

pub fn kinetic_energy_accuracy(pred: &Tensor, truth: &Tensor, channels: &[usize]) -> Result<KeAccuracy> {
    if pred.shape() != truth.shape() {
        return Err(Error::ShapeMismatch {
            op: "kinetic_energy_accuracy",
            expected: truth.shape().to_vec(),
            found: pred.shape().to_vec(),
        });
    }
    let ep = kinetic_energy(pred, channels)?;
    let et = kinetic_energy(truth, channels)?;
    let e0 = et[0];
    if !(e0 > 0.0) {
        return Err(invalid("true initial kinetic energy is zero"));
    }
    let per_frame: Vec<f64> = ep
        .iter()
        .zip(&et)
        .map(|(&a, &b)| {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            if hi == 0.0 {
                1.0
            } else {
                lo / hi
            }
        })
        .collect();
    let summary = per_frame.iter().sum::<f64>() / per_frame.len() as f64;
    Ok(KeAccuracy {
        pred_energy: ep.iter().map(|e| e / e0).collect(),
        true_energy: et.iter().map(|e| e / e0).collect(),
        per_frame,
        summary,
    })
}

/// Mean of `|(U(t+dt) - 2U(t) + U(t-dt)) / dt^2 + omega^2 U(t)|` over
/// interior frames of `[T, ...]` and every value within a frame.
pub fn wave_residual(frames: &Tensor, omega: f64, dt: f64) -> Result<f64> {
    if frames.rank() < 2 || frames.shape()[0] < 3 {
        return Err(invalid(format!("wave residual needs at least three frames, got {:?}", frames.shape())));
    }
    if !(dt > 0.0) {
        return Err(invalid("time step must be positive"));
    }
    let t = frames.shape()[0];
    let n = frames.len() / t;
    let d = frames.data();
    let w2 = omega * omega;
    let mut acc = 0.0;
    for k in 1..t - 1 {
        let (prev, cur, next) = (&d[(k - 1) * n..k * n], &d[k * n..(k + 1) * n], &d[(k + 1) * n..(k + 2) * n]);
        let mut s = 0.0;
        for i in 0..n {
            s += ((next[i] - 2.0 * cur[i] + prev[i]) / (dt * dt) + w2 * cur[i]).abs();
        }
        acc += s / n as f64;
    }
    Ok(acc / (t - 2) as f64)
}
