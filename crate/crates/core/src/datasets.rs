//! Synthetic data: the wall-bouncing pendulum, Gaussian endpoint pairs with
//! their closed-form conditional velocity, and two families of periodic
//! 2-D field rollouts used for forecasting.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::Rng as _;

use crate::error::{invalid, Error, Result};
use crate::model::{check_batch, VelocityField};
use crate::rng::{derive_seed, normal_vec, seeded, Rng};
use crate::tensor::Tensor;

/// Ideal 1-D pendulum bouncing off a wall at `x = 0`.
///
/// Each half cycle lasts one time unit regardless of speed, so the pendulum
/// leaves the wall at `speeds[i]`, turns at amplitude `speeds[i] / 2` and
/// returns. At every bounce the speed is multiplied by `alpha`.
#[derive(Clone, Debug, PartialEq)]
pub struct PendulumTrace {
    pub times: Vec<f64>,
    pub positions: Vec<f64>,
    /// `speeds[i]` is the speed after bounce `i` (`speeds[0] = v0`).
    pub speeds: Vec<f64>,
    pub alpha: f64,
    pub dt: f64,
}

impl PendulumTrace {
    /// Kinetic energy (unit mass) of each segment.
    pub fn energies(&self) -> Vec<f64> {
        self.speeds.iter().map(|v| 0.5 * v * v).collect()
    }
}

pub const PENDULUM_HALF_CYCLE: f64 = 1.0;

pub fn simulate_pendulum(v0: f64, alpha: f64, n_bounces: usize, dt: f64) -> Result<PendulumTrace> {
    if !(v0 > 0.0 && v0.is_finite()) || !(dt > 0.0 && dt.is_finite()) {
        return Err(invalid(format!("speed {v0} and time step {dt} must be positive")));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(invalid(format!("retention {alpha} outside [0, 1]")));
    }
    if n_bounces == 0 {
        return Err(invalid("at least one bounce is required"));
    }
    let mut speeds = Vec::with_capacity(n_bounces + 1);
    speeds.push(v0);
    for i in 0..n_bounces {
        speeds.push(alpha * speeds[i]);
    }
    let p = PENDULUM_HALF_CYCLE;
    let horizon = p * (n_bounces + 1) as f64;
    let steps = libm::floor(horizon / dt) as usize;
    let mut times = Vec::with_capacity(steps + 1);
    let mut positions = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        let t = k as f64 * dt;
        let seg = (libm::floor(t / p) as usize).min(n_bounces);
        let s = t - seg as f64 * p;
        let out = s.min(p - s).max(0.0);
        times.push(t);
        positions.push(speeds[seg] * out);
    }
    Ok(PendulumTrace {
        times,
        positions,
        speeds,
        alpha,
        dt,
    })
}

/// Independent draws `x0 ~ N(0, I)` and `x1 ~ N(0, I)`.
#[derive(Clone, Debug, PartialEq)]
pub struct EndpointPairSet {
    pub x0: Tensor,
    pub x1: Tensor,
    pub seed: u64,
}

impl EndpointPairSet {
    pub fn len(&self) -> usize {
        self.x0.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn make_gaussian_pairs(n: usize, dim: usize, seed: u64) -> Result<(EndpointPairSet, GaussianOracle)> {
    if n == 0 || dim == 0 {
        return Err(invalid("pair count and dimension must be positive"));
    }
    let mut r0 = seeded(derive_seed(seed, 0));
    let mut r1 = seeded(derive_seed(seed, 1));
    let x0 = Tensor::matrix(n, dim, normal_vec(&mut r0, n * dim))?;
    let x1 = Tensor::matrix(n, dim, normal_vec(&mut r1, n * dim))?;
    Ok((EndpointPairSet { x0, x1, seed }, GaussianOracle { dim }))
}

/// `c(t)` with `E[x1 - x0 | x_t = x] = c(t) x` for independent standard
/// normal endpoints: the regression of `x1 - x0` on `x_t`, whose covariance
/// is `t - (1 - t)` over variance `(1 - t)^2 + t^2`.
pub fn gaussian_oracle_coefficient(t: f64) -> f64 {
    (2.0 * t - 1.0) / ((1.0 - t) * (1.0 - t) + t * t)
}

/// Exact velocity for Gaussian pairs, extended over scales as
/// `v(x, tau, alpha) = alpha * c(alpha * tau) * x`. At `alpha = 1` it is the
/// flow-matching optimum; for other scales it is the optimum of the secondary
/// trajectory with endpoint `(1 - alpha) x0 + alpha x1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianOracle {
    pub dim: usize,
}

impl VelocityField for GaussianOracle {
    fn state_dim(&self) -> usize {
        self.dim
    }

    fn velocity(&self, x: &Tensor, cond: Option<&Tensor>, t: &[f64], alpha: &[f64]) -> Result<Tensor> {
        check_batch(self, x, cond, t, alpha)?;
        let mut out = x.clone();
        for (r, row) in out.data_mut().chunks_exact_mut(self.dim).enumerate() {
            let k = alpha[r] * gaussian_oracle_coefficient(alpha[r] * t[r]);
            row.iter_mut().for_each(|v| *v *= k);
        }
        Ok(out)
    }
}

/// Per-channel z-score statistics (population standard deviation).
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// A sequence of 2-D multi-channel frames, `[T, C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldRollout {
    pub frames: Tensor,
    pub channels: Vec<String>,
    pub dt: f64,
    pub params: BTreeMap<String, f64>,
    pub stats: Option<NormStats>,
}

impl FieldRollout {
    pub fn new(frames: Tensor, channels: Vec<String>, dt: f64, params: BTreeMap<String, f64>) -> Result<Self> {
        if frames.rank() != 4 {
            return Err(invalid(format!("rollout frames must be [T, C, H, W], got {:?}", frames.shape())));
        }
        if frames.shape()[0] < 2 {
            return Err(invalid("a rollout needs at least two frames"));
        }
        if frames.shape()[1] != channels.len() {
            return Err(invalid(format!("{} channel names for {} channels", channels.len(), frames.shape()[1])));
        }
        if !frames.is_finite() {
            return Err(Error::NonFinite("rollout frames".into()));
        }
        Ok(Self {
            frames,
            channels,
            dt,
            params,
            stats: None,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    /// `[C, H, W]`.
    pub fn frame_shape(&self) -> [usize; 3] {
        let s = self.frames.shape();
        [s[1], s[2], s[3]]
    }

    pub fn frame_len(&self) -> usize {
        self.frame_shape().iter().product()
    }

    pub fn frame(&self, k: usize) -> &[f64] {
        let n = self.frame_len();
        &self.frames.data()[k * n..(k + 1) * n]
    }

    /// Values of channel `c` in frame `k`.
    pub fn channel(&self, k: usize, c: usize) -> &[f64] {
        let [_, h, w] = self.frame_shape();
        &self.frame(k)[c * h * w..(c + 1) * h * w]
    }

    pub fn channel_index(&self, name: &str) -> Result<usize> {
        self.channels
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| invalid(format!("no channel `{name}` in {:?}", self.channels)))
    }
}

/// Time stepping of the advection-diffusion generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scheme {
    /// Each Fourier mode is advanced in closed form; exact for any `dt`.
    Spectral,
    /// Explicit first-order upwind advection with centred diffusion, one
    /// step per frame; conservative, stable when
    /// `dt (|cx| / dx + |cy| / dy) + 2 nu dt (1/dx^2 + 1/dy^2) <= 1`.
    Upwind,
}

/// One real Fourier mode `a cos(k.x) + b sin(k.x)` on `[0, 2 pi)^2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mode {
    pub kx: i32,
    pub ky: i32,
    pub a: f64,
    pub b: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdvectionDiffusion {
    pub h: usize,
    pub w: usize,
    pub nu: f64,
    pub c: [f64; 2],
    pub frames: usize,
    pub dt: f64,
    pub scheme: Scheme,
}

impl AdvectionDiffusion {
    fn validate(&self) -> Result<()> {
        if self.h < 2 || self.w < 2 || self.frames < 2 {
            return Err(invalid("grid must be at least 2x2 with at least two frames"));
        }
        if !(self.nu >= 0.0) || !(self.dt > 0.0) || !self.c.iter().all(|v| v.is_finite()) {
            return Err(invalid(format!("bad advection-diffusion parameters nu={} dt={} c={:?}", self.nu, self.dt, self.c)));
        }
        if self.scheme == Scheme::Upwind {
            let (dx, dy) = (2.0 * PI / self.w as f64, 2.0 * PI / self.h as f64);
            let courant = self.dt * (self.c[0].abs() / dx + self.c[1].abs() / dy);
            let r = self.nu * self.dt * (1.0 / (dx * dx) + 1.0 / (dy * dy));
            if courant + 2.0 * r > 1.0 {
                return Err(invalid(format!(
                    "dt = {} is unstable for the upwind scheme (courant {courant:.3} + 2r {:.3} > 1)",
                    self.dt,
                    2.0 * r
                )));
            }
        }
        Ok(())
    }

    /// Roll out the given per-channel mode sums. `channels[c]` lists the
    /// modes of channel `c`.
    pub fn rollout(&self, channels: &[Vec<Mode>], names: Vec<String>) -> Result<FieldRollout> {
        self.validate()?;
        let (h, w, nc) = (self.h, self.w, channels.len());
        let plane = h * w;
        let mut data = vec![0.0; self.frames * nc * plane];
        match self.scheme {
            Scheme::Spectral => {
                for k in 0..self.frames {
                    let t = k as f64 * self.dt;
                    for (ci, modes) in channels.iter().enumerate() {
                        let out = &mut data[(k * nc + ci) * plane..(k * nc + ci + 1) * plane];
                        for m in modes {
                            let k2 = (m.kx * m.kx + m.ky * m.ky) as f64;
                            let decay = libm::exp(-self.nu * k2 * t);
                            let shift = m.kx as f64 * self.c[0] * t + m.ky as f64 * self.c[1] * t;
                            add_mode(out, h, w, m, decay, shift);
                        }
                    }
                }
            }
            Scheme::Upwind => {
                for (ci, modes) in channels.iter().enumerate() {
                    let out = &mut data[ci * plane..(ci + 1) * plane];
                    for m in modes {
                        add_mode(out, h, w, m, 1.0, 0.0);
                    }
                }
                for k in 1..self.frames {
                    let (prev, next) = data.split_at_mut(k * nc * plane);
                    for ci in 0..nc {
                        let src = &prev[((k - 1) * nc + ci) * plane..((k - 1) * nc + ci + 1) * plane];
                        self.upwind_step(src, &mut next[ci * plane..(ci + 1) * plane]);
                    }
                }
            }
        }
        let frames = Tensor::new(vec![self.frames, nc, h, w], data)?;
        let mut params = BTreeMap::new();
        params.insert("nu".to_string(), self.nu);
        params.insert("cx".to_string(), self.c[0]);
        params.insert("cy".to_string(), self.c[1]);
        FieldRollout::new(frames, names, self.dt, params)
    }

    fn upwind_step(&self, u: &[f64], out: &mut [f64]) {
        let (h, w) = (self.h, self.w);
        let (dx, dy) = (2.0 * PI / w as f64, 2.0 * PI / h as f64);
        let [cx, cy] = self.c;
        let at = |i: usize, j: usize| u[i * w + j];
        for i in 0..h {
            let (im, ip) = ((i + h - 1) % h, (i + 1) % h);
            for j in 0..w {
                let (jm, jp) = ((j + w - 1) % w, (j + 1) % w);
                let c0 = at(i, j);
                // Flux form: differences of face fluxes, so the sum over the
                // periodic grid telescopes.
                let ddx = if cx >= 0.0 { c0 - at(i, jm) } else { at(i, jp) - c0 };
                let ddy = if cy >= 0.0 { c0 - at(im, j) } else { at(ip, j) - c0 };
                let lap = (at(i, jp) - 2.0 * c0 + at(i, jm)) / (dx * dx) + (at(ip, j) - 2.0 * c0 + at(im, j)) / (dy * dy);
                out[i * w + j] = c0 - self.dt * (cx * ddx / dx + cy * ddy / dy) + self.dt * self.nu * lap;
            }
        }
    }
}

fn add_mode(out: &mut [f64], h: usize, w: usize, m: &Mode, decay: f64, shift: f64) {
    for i in 0..h {
        let y = 2.0 * PI * i as f64 / h as f64;
        for j in 0..w {
            let x = 2.0 * PI * j as f64 / w as f64;
            let phase = m.kx as f64 * x + m.ky as f64 * y - shift;
            out[i * w + j] += decay * (m.a * libm::cos(phase) + m.b * libm::sin(phase));
        }
    }
}

/// Random mode sum: `n_modes` distinct nonzero wave vectors with
/// `max(|kx|, |ky|) <= max_k`, coefficients `N(0, 1) / |k|`.
pub fn random_modes(rng: &mut Rng, n_modes: usize, max_k: i32) -> Vec<Mode> {
    let mut modes: Vec<Mode> = Vec::with_capacity(n_modes);
    while modes.len() < n_modes {
        let kx = rng.random_range(-max_k..=max_k);
        let ky = rng.random_range(-max_k..=max_k);
        // k and -k describe the same real mode.
        let dup = modes.iter().any(|m| (m.kx, m.ky) == (kx, ky) || (m.kx, m.ky) == (-kx, -ky));
        if (kx, ky) == (0, 0) || dup {
            continue;
        }
        let norm = libm::sqrt((kx * kx + ky * ky) as f64);
        let ab = normal_vec(rng, 2);
        modes.push(Mode {
            kx,
            ky,
            a: ab[0] / norm,
            b: ab[1] / norm,
        });
    }
    modes
}

/// Advection-diffusion rollout of a random initial field with `channels`
/// channels of `n_modes` modes each.
pub fn make_advection_diffusion_rollout(gen: &AdvectionDiffusion, channels: usize, seed: u64) -> Result<FieldRollout> {
    if channels == 0 {
        return Err(invalid("at least one channel is required"));
    }
    let max_k = ((gen.h.min(gen.w) / 2).saturating_sub(1)).clamp(1, 3) as i32;
    let n_modes = 6.min(((2 * max_k + 1) * (2 * max_k + 1) / 2) as usize);
    let mut rng = seeded(seed);
    let modes: Vec<Vec<Mode>> = (0..channels).map(|_| random_modes(&mut rng, n_modes, max_k)).collect();
    gen.rollout(&modes, velocity_channel_names(channels))
}

/// `u`, `v`, then `q2`, `q3`, ... for extra channels.
pub fn velocity_channel_names(channels: usize) -> Vec<String> {
    (0..channels)
        .map(|c| match c {
            0 => "u".to_string(),
            1 => "v".to_string(),
            c => format!("q{c}"),
        })
        .collect()
}

/// `U(t, x) = u(x) exp(-i omega t)` with `u` a random complex sum of plane
/// waves; channels are the real and imaginary parts.
pub fn make_standing_wave_rollout(h: usize, w: usize, omega: f64, frames: usize, dt: f64, seed: u64) -> Result<FieldRollout> {
    if !(omega > 0.0 && omega.is_finite()) {
        return Err(invalid(format!("frequency {omega} must be positive")));
    }
    if !(dt > 0.0) || frames < 2 || h == 0 || w == 0 {
        return Err(invalid("standing wave needs dt > 0, two frames and a non-empty grid"));
    }
    let mut rng = seeded(seed);
    let max_k = 3;
    let waves: Vec<(i32, i32, f64, f64)> = (0..4)
        .map(|_| {
            let kx = rng.random_range(-max_k..=max_k);
            let ky = rng.random_range(-max_k..=max_k);
            let ab = normal_vec(&mut rng, 2);
            (kx, ky, ab[0] * 0.5, ab[1] * 0.5)
        })
        .collect();
    let plane = h * w;
    let (mut re, mut im) = (vec![0.0; plane], vec![0.0; plane]);
    for i in 0..h {
        let y = 2.0 * PI * i as f64 / h as f64;
        for j in 0..w {
            let x = 2.0 * PI * j as f64 / w as f64;
            for &(kx, ky, a, b) in &waves {
                let ph = kx as f64 * x + ky as f64 * y;
                let (s, c) = (libm::sin(ph), libm::cos(ph));
                re[i * w + j] += a * c - b * s;
                im[i * w + j] += a * s + b * c;
            }
        }
    }
    let mut data = Vec::with_capacity(frames * 2 * plane);
    for k in 0..frames {
        let (s, c) = (libm::sin(omega * k as f64 * dt), libm::cos(omega * k as f64 * dt));
        // (re + i im)(cos - i sin)
        data.extend(re.iter().zip(&im).map(|(r, m)| r * c + m * s));
        data.extend(re.iter().zip(&im).map(|(r, m)| m * c - r * s));
    }
    let frames = Tensor::new(vec![frames, 2, h, w], data)?;
    let mut params = BTreeMap::new();
    params.insert("omega".to_string(), omega);
    FieldRollout::new(frames, vec!["re".into(), "im".into()], dt, params)
}

/// Which generator a forecasting dataset uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FieldKind {
    AdvectionDiffusion,
    StandingWave,
}

impl FieldKind {
    pub fn name(self) -> &'static str {
        match self {
            FieldKind::AdvectionDiffusion => "advection-diffusion",
            FieldKind::StandingWave => "standing-wave",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "advection-diffusion" => Ok(FieldKind::AdvectionDiffusion),
            "standing-wave" => Ok(FieldKind::StandingWave),
            other => Err(invalid(format!("unknown field dataset `{other}`"))),
        }
    }
}

/// Generator settings for a collection of trajectories. Advection speeds are
/// drawn per trajectory with a uniform direction and magnitude in
/// `speed_range`; wave frequencies uniformly from `omega_range`.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldDatasetConfig {
    pub kind: FieldKind,
    pub trajectories: usize,
    pub h: usize,
    pub w: usize,
    pub frames: usize,
    pub dt: f64,
    pub channels: usize,
    pub nu: f64,
    pub speed_range: (f64, f64),
    pub omega_range: (f64, f64),
    pub seed: u64,
}

impl FieldDatasetConfig {
    pub fn advection_diffusion(trajectories: usize, seed: u64) -> Self {
        Self {
            kind: FieldKind::AdvectionDiffusion,
            trajectories,
            h: 32,
            w: 32,
            frames: 64,
            dt: 0.1,
            channels: 2,
            nu: 0.01,
            speed_range: (0.5, 1.5),
            omega_range: (0.5, 1.5),
            seed,
        }
    }

    pub fn standing_wave(trajectories: usize, seed: u64) -> Self {
        Self {
            kind: FieldKind::StandingWave,
            frames: 49,
            channels: 2,
            ..Self::advection_diffusion(trajectories, seed)
        }
    }
}

pub fn generate_rollouts(cfg: &FieldDatasetConfig) -> Result<Vec<FieldRollout>> {
    if cfg.trajectories == 0 {
        return Err(invalid("at least one trajectory is required"));
    }
    (0..cfg.trajectories)
        .map(|i| {
            let seed = derive_seed(cfg.seed, i as u64);
            let mut rng = seeded(seed);
            match cfg.kind {
                FieldKind::AdvectionDiffusion => {
                    let angle = rng.random_range(0.0..2.0 * PI);
                    let speed = uniform(&mut rng, cfg.speed_range);
                    let gen = AdvectionDiffusion {
                        h: cfg.h,
                        w: cfg.w,
                        nu: cfg.nu,
                        c: [speed * libm::cos(angle), speed * libm::sin(angle)],
                        frames: cfg.frames,
                        dt: cfg.dt,
                        scheme: Scheme::Spectral,
                    };
                    make_advection_diffusion_rollout(&gen, cfg.channels, rng.random())
                }
                FieldKind::StandingWave => {
                    let omega = uniform(&mut rng, cfg.omega_range);
                    make_standing_wave_rollout(cfg.h, cfg.w, omega, cfg.frames, cfg.dt, rng.random())
                }
            }
        })
        .collect()
}

fn uniform(rng: &mut Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Trajectory indices of the train, validation and test splits (80/10/10
/// after a seeded shuffle).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn split_indices(n: usize, seed: u64) -> Result<Splits> {
    if n < 3 {
        return Err(invalid(format!("{n} trajectories cannot fill three splits")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = seeded(seed);
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    let n_val = ((n as f64 * 0.1).round() as usize).max(1);
    let n_test = n_val;
    let n_train = n - n_val - n_test;
    Ok(Splits {
        train: idx[..n_train].to_vec(),
        val: idx[n_train..n_train + n_val].to_vec(),
        test: idx[n_train + n_val..].to_vec(),
    })
}

/// Per-channel mean and population standard deviation over every frame of
/// the given (training) rollouts.
pub fn compute_norm_stats(rollouts: &[&FieldRollout]) -> Result<NormStats> {
    let first = rollouts.first().ok_or_else(|| invalid("no rollouts to normalize"))?;
    let [nc, h, w] = first.frame_shape();
    let mut mean = vec![0.0; nc];
    let mut count = 0usize;
    for r in rollouts {
        if r.frame_shape() != [nc, h, w] {
            return Err(invalid("rollouts differ in frame shape"));
        }
        for k in 0..r.num_frames() {
            for (c, m) in mean.iter_mut().enumerate() {
                *m += r.channel(k, c).iter().sum::<f64>();
            }
        }
        count += r.num_frames() * h * w;
    }
    mean.iter_mut().for_each(|m| *m /= count as f64);
    let mut var = vec![0.0; nc];
    for r in rollouts {
        for k in 0..r.num_frames() {
            for (c, v) in var.iter_mut().enumerate() {
                *v += r.channel(k, c).iter().map(|x| (x - mean[c]) * (x - mean[c])).sum::<f64>();
            }
        }
    }
    let std: Vec<f64> = var.iter().map(|v| libm::sqrt(v / count as f64)).collect();
    if std.iter().any(|&s| !(s > 0.0)) {
        return Err(invalid("a channel is constant over the training split"));
    }
    Ok(NormStats { mean, std })
}

pub fn normalize(rollout: &FieldRollout, stats: &NormStats) -> Result<FieldRollout> {
    let [nc, h, w] = rollout.frame_shape();
    if stats.mean.len() != nc {
        return Err(invalid(format!("stats for {} channels, rollout has {nc}", stats.mean.len())));
    }
    let plane = h * w;
    let mut data = rollout.frames.data().to_vec();
    for (i, v) in data.iter_mut().enumerate() {
        let c = (i / plane) % nc;
        *v = (*v - stats.mean[c]) / stats.std[c];
    }
    let mut out = rollout.clone();
    out.frames = Tensor::new(rollout.frames.shape().to_vec(), data)?;
    out.stats = Some(stats.clone());
    Ok(out)
}

/// Generated rollouts split by trajectory and z-scored with training-split
/// statistics.
#[derive(Clone, Debug)]
pub struct FieldDataset {
    pub train: Vec<FieldRollout>,
    pub val: Vec<FieldRollout>,
    pub test: Vec<FieldRollout>,
    pub stats: NormStats,
    pub splits: Splits,
}

pub fn build_field_dataset(cfg: &FieldDatasetConfig) -> Result<FieldDataset> {
    let all = generate_rollouts(cfg)?;
    let splits = split_indices(all.len(), derive_seed(cfg.seed, u64::MAX))?;
    let stats = compute_norm_stats(&splits.train.iter().map(|&i| &all[i]).collect::<Vec<_>>())?;
    let pick = |ids: &[usize]| ids.iter().map(|&i| normalize(&all[i], &stats)).collect::<Result<Vec<_>>>();
    Ok(FieldDataset {
        train: pick(&splits.train)?,
        val: pick(&splits.val)?,
        test: pick(&splits.test)?,
        stats,
        splits,
    })
}

/// Samples for conditional generation: `target` rows are the data side
/// `x0`, `cond` rows the conditioning inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainData {
    pub target: Tensor,
    pub cond: Option<Tensor>,
}

impl TrainData {
    pub fn new(target: Tensor, cond: Option<Tensor>) -> Result<Self> {
        if target.rank() != 2 || target.rows() == 0 {
            return Err(invalid(format!("targets must be a non-empty [N, d] matrix, got {:?}", target.shape())));
        }
        if let Some(c) = &cond {
            if c.rank() != 2 || c.rows() != target.rows() {
                return Err(invalid(format!("conditioning {:?} does not match targets {:?}", c.shape(), target.shape())));
            }
        }
        Ok(Self { target, cond })
    }

    pub fn len(&self) -> usize {
        self.target.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn state_dim(&self) -> usize {
        self.target.cols()
    }

    pub fn cond_dim(&self) -> usize {
        self.cond.as_ref().map_or(0, Tensor::cols)
    }

    /// Rows `idx` of targets and conditioning.
    pub fn gather(&self, idx: &[usize]) -> (Tensor, Option<Tensor>) {
        let take = |t: &Tensor| {
            let c = t.cols();
            let mut out = Vec::with_capacity(idx.len() * c);
            for &i in idx {
                out.extend_from_slice(t.row(i));
            }
            Tensor::from_raw(vec![idx.len(), c], out)
        };
        (take(&self.target), self.cond.as_ref().map(take))
    }
}

/// Sliding windows over rollouts: `context` frames condition the next
/// `chunk` frames. Windows start every `stride` frames.
pub fn forecast_windows(rollouts: &[FieldRollout], context: usize, chunk: usize, stride: usize) -> Result<TrainData> {
    if context == 0 || chunk == 0 || stride == 0 {
        return Err(invalid("context, chunk and stride must be positive"));
    }
    let first = rollouts.first().ok_or_else(|| invalid("no rollouts"))?;
    let n = first.frame_len();
    let (mut cond, mut target, mut rows) = (Vec::new(), Vec::new(), 0);
    for r in rollouts {
        if r.frame_len() != n {
            return Err(invalid("rollouts differ in frame size"));
        }
        let t = r.num_frames();
        let mut s = 0;
        while s + context + chunk <= t {
            cond.extend_from_slice(&r.frames.data()[s * n..(s + context) * n]);
            target.extend_from_slice(&r.frames.data()[(s + context) * n..(s + context + chunk) * n]);
            rows += 1;
            s += stride;
        }
    }
    if rows == 0 {
        return Err(invalid(format!("rollouts too short for context {context} + chunk {chunk}")));
    }
    TrainData::new(
        Tensor::new(vec![rows, chunk * n], target)?,
        Some(Tensor::new(vec![rows, context * n], cond)?),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::VelocityField;
    use proptest::prelude::*;

    #[test]
    fn pendulum_examples() {
        let p = simulate_pendulum(1.0, 0.8, 2, 0.01).unwrap();
        assert_eq!(p.speeds[2], 0.8 * 0.8);
        assert!((p.speeds[2] - 0.64).abs() < 1e-15);
        let p = simulate_pendulum(1.5, 1.0, 5, 0.1).unwrap();
        assert!(p.speeds.iter().all(|&v| v == 1.5));
        let p = simulate_pendulum(2.0, 0.5, 1, 0.1).unwrap();
        let e = p.energies();
        assert_eq!(e[1] / e[0], 0.25);
        assert!(simulate_pendulum(0.0, 0.5, 1, 0.1).is_err());
        assert!(simulate_pendulum(1.0, 0.5, 1, -0.1).is_err());
    }

    #[test]
    fn pendulum_path_shape() {
        let p = simulate_pendulum(2.0, 0.5, 2, 0.25).unwrap();
        // Out and back at speed 2, then speed 1, then 0.5.
        let expect = [0.0, 0.5, 1.0, 0.5, 0.0, 0.25, 0.5, 0.25, 0.0, 0.125, 0.25, 0.125, 0.0];
        assert_eq!(p.positions.len(), expect.len());
        for (a, b) in p.positions.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        assert!(p.positions.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn gaussian_oracle_examples() {
        assert_eq!(gaussian_oracle_coefficient(0.5), 0.0);
        assert_eq!(gaussian_oracle_coefficient(1.0), 1.0);
        assert_eq!(gaussian_oracle_coefficient(0.0), -1.0);
        let o = GaussianOracle { dim: 2 };
        let x = Tensor::matrix(1, 2, vec![1.5, -3.0]).unwrap();
        assert_eq!(o.velocity_uniform(&x, None, 0.5, 1.0).unwrap().data(), &[0.0, 0.0]);
        assert_eq!(o.velocity_uniform(&x, None, 1.0, 1.0).unwrap(), x);
    }

    #[test]
    fn gaussian_oracle_matches_regression() {
        // Least-squares slope of x1 - x0 on x_t over 1e6 pairs.
        let (pairs, _) = make_gaussian_pairs(1_000_000, 1, 3).unwrap();
        for t in [0.1, 0.3, 0.5, 0.8] {
            let (mut sxy, mut sxx) = (0.0, 0.0);
            for (a, b) in pairs.x0.data().iter().zip(pairs.x1.data()) {
                let xt = (1.0 - t) * a + t * b;
                sxy += xt * (b - a);
                sxx += xt * xt;
            }
            let slope = sxy / sxx;
            assert!((slope - gaussian_oracle_coefficient(t)).abs() < 5e-3, "t={t}: {slope}");
            let var = sxx / pairs.len() as f64;
            assert!((var - ((1.0 - t) * (1.0 - t) + t * t)).abs() < 5e-3);
        }
    }

    #[test]
    fn endpoint_pairs_are_uncorrelated() {
        let n = 10_000;
        let (p, _) = make_gaussian_pairs(n, 1, 11).unwrap();
        let (a, b) = (p.x0.data(), p.x1.data());
        let ma = a.iter().sum::<f64>() / n as f64;
        let mb = b.iter().sum::<f64>() / n as f64;
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma) * (x - ma)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb) * (y - mb)).sum();
        let rho = cov / libm::sqrt(va * vb);
        assert!(rho.abs() < 3.0 / libm::sqrt(n as f64), "{rho}");
        assert!(make_gaussian_pairs(0, 1, 0).is_err());
    }

    fn single_mode(scheme: Scheme, nu: f64, c: [f64; 2], dt: f64, frames: usize) -> FieldRollout {
        let gen = AdvectionDiffusion {
            h: 32,
            w: 32,
            nu,
            c,
            frames,
            dt,
            scheme,
        };
        let m = Mode {
            kx: 2,
            ky: 1,
            a: 1.0,
            b: 0.0,
        };
        gen.rollout(&[vec![m]], vec!["u".into()]).unwrap()
    }

    #[test]
    fn still_field_without_dynamics() {
        for scheme in [Scheme::Spectral, Scheme::Upwind] {
            let gen = AdvectionDiffusion {
                h: 16,
                w: 16,
                nu: 0.0,
                c: [0.0, 0.0],
                frames: 5,
                dt: 0.1,
                scheme,
            };
            let r = make_advection_diffusion_rollout(&gen, 2, 4).unwrap();
            for k in 1..5 {
                assert_eq!(r.frame(k), r.frame(0));
            }
        }
    }

    #[test]
    fn heat_mode_decay() {
        let (nu, dt, frames) = (0.05, 0.02, 20);
        let decay_at = |r: &FieldRollout, k: usize| r.frame(k)[0] / r.frame(0)[0];
        let spectral = single_mode(Scheme::Spectral, nu, [0.0, 0.0], dt, frames);
        let fd = single_mode(Scheme::Upwind, nu, [0.0, 0.0], dt, frames);
        let t = (frames - 1) as f64 * dt;
        let exact = libm::exp(-nu * 5.0 * t);
        assert!((decay_at(&spectral, frames - 1) - exact).abs() < 1e-12);
        // Second-order spatial error of the discrete Laplacian at 32 points.
        assert!((decay_at(&fd, frames - 1) - exact).abs() < 5e-3);
    }

    #[test]
    fn periodic_mass_conservation() {
        for scheme in [Scheme::Spectral, Scheme::Upwind] {
            let gen = AdvectionDiffusion {
                h: 32,
                w: 32,
                nu: 0.02,
                c: [0.7, -0.4],
                frames: 30,
                dt: 0.05,
                scheme,
            };
            let r = make_advection_diffusion_rollout(&gen, 2, 9).unwrap();
            for c in 0..2 {
                let m0: f64 = r.channel(0, c).iter().sum();
                for k in 1..30 {
                    let m: f64 = r.channel(k, c).iter().sum();
                    assert!((m - m0).abs() < 1e-10, "{scheme:?} {m} vs {m0}");
                }
            }
        }
    }

    #[test]
    fn upwind_stability_is_checked() {
        let gen = AdvectionDiffusion {
            h: 32,
            w: 32,
            nu: 0.0,
            c: [1.0, 0.0],
            frames: 3,
            dt: 0.5,
            scheme: Scheme::Upwind,
        };
        assert!(make_advection_diffusion_rollout(&gen, 1, 0).is_err());
        assert!(make_advection_diffusion_rollout(&AdvectionDiffusion { dt: 0.1, ..gen }, 1, 0).is_ok());
    }

    #[test]
    fn standing_wave_periodicity_and_modulus() {
        let omega = 1.25;
        let dt = 2.0 * PI / omega / 16.0;
        let r = make_standing_wave_rollout(16, 16, omega, 33, dt, 5).unwrap();
        for (a, b) in r.frame(0).iter().zip(r.frame(16)) {
            assert!((a - b).abs() < 1e-12);
        }
        let modulus = |k: usize| -> Vec<f64> {
            r.channel(k, 0).iter().zip(r.channel(k, 1)).map(|(a, b)| a * a + b * b).collect()
        };
        let m0 = modulus(0);
        for k in [3, 9, 20] {
            for (a, b) in modulus(k).iter().zip(&m0) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        assert!(make_standing_wave_rollout(8, 8, 0.0, 5, 0.1, 0).is_err());
    }

    #[test]
    fn splits_partition_trajectories() {
        let s = split_indices(20, 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (16, 2, 2));
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort();
        assert_eq!(all, (0..20).collect::<Vec<_>>());
        assert_eq!(split_indices(20, 1).unwrap(), s);
    }

    #[test]
    fn normalized_training_split_is_standard() {
        let mut cfg = FieldDatasetConfig::advection_diffusion(10, 2);
        cfg.h = 8;
        cfg.w = 8;
        cfg.frames = 6;
        let ds = build_field_dataset(&cfg).unwrap();
        let refs: Vec<&FieldRollout> = ds.train.iter().collect();
        let s = compute_norm_stats(&refs).unwrap();
        for c in 0..2 {
            assert!(s.mean[c].abs() < 1e-9);
            assert!((s.std[c] - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn windows_pair_context_with_future() {
        let r = make_standing_wave_rollout(4, 4, 1.0, 6, 0.1, 1).unwrap();
        let d = forecast_windows(&[r.clone()], 2, 1, 1).unwrap();
        assert_eq!(d.len(), 4);
        assert_eq!(d.target.row(0), r.frame(2));
        assert_eq!(&d.cond.as_ref().unwrap().row(1)[32..], r.frame(2));
        assert!(forecast_windows(&[r], 5, 2, 1).is_err());
    }

    proptest! {
        #[test]
        fn pendulum_speeds_are_geometric(v0 in 0.01f64..10.0, alpha in 0.0f64..=1.0, n in 1usize..12) {
            let p = simulate_pendulum(v0, alpha, n, 0.05).unwrap();
            for i in 0..n {
                prop_assert_eq!(p.speeds[i + 1], alpha * p.speeds[i]);
                let closed = v0 * libm::pow(alpha, i as f64);
                prop_assert!((p.speeds[i] - closed).abs() <= 1e-14 * v0);
            }
        }
    }
}
