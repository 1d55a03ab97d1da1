//! Euler inference, secondary-trajectory integration, ensembles and
//! autoregressive rollouts.
//!
//! Generation runs from noise at `t = 1` to data at `t = 0` on the uniform
//! grid `t_k = 1 - k / K`, always with scale 1 unless the field is a
//! shortcut model that reads the step size from that slot.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::model::VelocityField;
use crate::rng::{derive_seed, normal_vec, seeded, Rng};
use crate::tensor::Tensor;

/// What the network receives in its scale slot during generation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepSlot {
    /// Always 1.
    Unit,
    /// The step size `h = 1 / K`.
    StepSize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleConfig {
    pub steps: usize,
    pub members: usize,
    pub seed: u64,
    /// Frames produced per autoregressive call.
    pub chunk: usize,
    /// Scale used by secondary-trajectory integration.
    pub alpha: f64,
    pub slot: StepSlot,
}

impl SampleConfig {
    pub fn new(steps: usize, members: usize, seed: u64) -> Self {
        Self {
            steps,
            members,
            seed,
            chunk: 1,
            alpha: 1.0,
            slot: StepSlot::Unit,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.members == 0 || self.chunk == 0 {
            return Err(invalid("steps, members and chunk must be positive"));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(invalid(format!("scale {} outside (0, 1]", self.alpha)));
        }
        Ok(())
    }
}

fn finite(x: Tensor, what: &str) -> Result<Tensor> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::NonFinite(what.into()))
    }
}

/// `K` Euler steps from noise `x1` (`[B, d]`) to a data estimate; exactly
/// `K` field evaluations.
pub fn euler_k_step_with<F: VelocityField>(field: &F, x1: &Tensor, cond: Option<&Tensor>, k: usize, slot: StepSlot) -> Result<Tensor> {
    if k == 0 {
        return Err(invalid("at least one Euler step is required"));
    }
    let h = 1.0 / k as f64;
    let scale = match slot {
        StepSlot::Unit => 1.0,
        StepSlot::StepSize => h,
    };
    let mut x = x1.clone();
    for step in 1..=k {
        let t_prev = 1.0 - (step - 1) as f64 / k as f64;
        let v = field.velocity_uniform(&x, cond, t_prev, scale)?;
        x.axpy(-h, &v)?;
        x = finite(x, "Euler state")?;
    }
    Ok(x)
}

pub fn euler_k_step<F: VelocityField>(field: &F, x1: &Tensor, cond: Option<&Tensor>, k: usize) -> Result<Tensor> {
    euler_k_step_with(field, x1, cond, k, StepSlot::Unit)
}

/// `x1 - v(x1, 1, 1)`.
pub fn euler_one_step<F: VelocityField>(field: &F, x1: &Tensor, cond: Option<&Tensor>) -> Result<Tensor> {
    euler_k_step(field, x1, cond, 1)
}

/// Forward Euler for `dx/dtau = v(x, tau, alpha)` from `x0` at `tau = 0` to
/// `tau_end` in `steps` uniform steps. `tau_end = 0` returns `x0`.
pub fn integrate_secondary_to<F: VelocityField>(
    field: &F,
    x0: &Tensor,
    cond: Option<&Tensor>,
    alpha: f64,
    steps: usize,
    tau_end: f64,
) -> Result<Tensor> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(invalid(format!("scale {alpha} outside (0, 1]")));
    }
    if steps == 0 || !(0.0..=1.0).contains(&tau_end) {
        return Err(invalid(format!("need steps >= 1 and tau_end in [0, 1], got {steps}, {tau_end}")));
    }
    let mut x = x0.clone();
    if tau_end == 0.0 {
        return Ok(x);
    }
    let h = tau_end / steps as f64;
    for k in 0..steps {
        let tau = tau_end * k as f64 / steps as f64;
        let v = field.velocity_uniform(&x, cond, tau, alpha)?;
        x.axpy(h, &v)?;
        x = finite(x, "secondary trajectory state")?;
    }
    Ok(x)
}

pub fn integrate_secondary<F: VelocityField>(field: &F, x0: &Tensor, cond: Option<&Tensor>, alpha: f64, steps: usize) -> Result<Tensor> {
    integrate_secondary_to(field, x0, cond, alpha, steps, 1.0)
}

/// `members` is `[M, B, d]`: member `m` of the forecast for conditioning
/// row `b`.
#[derive(Clone, Debug, PartialEq)]
pub struct ForecastEnsemble {
    pub members: Tensor,
    pub seeds: Vec<u64>,
    pub steps: usize,
}

impl ForecastEnsemble {
    pub fn num_members(&self) -> usize {
        self.members.shape()[0]
    }

    /// `[B, d]` samples of member `m`.
    pub fn member(&self, m: usize) -> Result<Tensor> {
        self.members.index_outer(m)
    }
}

/// Seed of ensemble member `m`.
pub fn member_seed(root: u64, m: usize) -> u64 {
    derive_seed(root, m as u64)
}

/// Stack per-member row blocks into one batch, repeating `cond` per member.
fn tile_cond(cond: Option<&Tensor>, m: usize) -> Option<Tensor> {
    cond.map(|c| {
        let mut data = Vec::with_capacity(c.len() * m);
        for _ in 0..m {
            data.extend_from_slice(c.data());
        }
        Tensor::from_raw(vec![c.rows() * m, c.cols()], data)
    })
}

/// `M` members per conditioning row. Member `m` draws its noise from its own
/// stream; all members are integrated as one batch.
pub fn generate_ensemble<F: VelocityField>(field: &F, cond: Option<&Tensor>, rows: usize, cfg: &SampleConfig) -> Result<ForecastEnsemble> {
    cfg.validate()?;
    if let Some(c) = cond {
        if c.rows() != rows {
            return Err(invalid(format!("{rows} rows requested with {} conditioning rows", c.rows())));
        }
    }
    let d = field.state_dim();
    let seeds: Vec<u64> = (0..cfg.members).map(|m| member_seed(cfg.seed, m)).collect();
    let mut noise = Vec::with_capacity(cfg.members * rows * d);
    for &s in &seeds {
        noise.extend(normal_vec(&mut seeded(s), rows * d));
    }
    let x1 = Tensor::from_raw(vec![cfg.members * rows, d], noise);
    let tiled = tile_cond(cond, cfg.members);
    let x0 = euler_k_step_with(field, &x1, tiled.as_ref(), cfg.steps, cfg.slot)?;
    Ok(ForecastEnsemble {
        members: x0.reshape(&[cfg.members, rows, d])?,
        seeds,
        steps: cfg.steps,
    })
}

/// Autoregressive forecast: `frames` is `[M, T, C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutPrediction {
    pub frames: Tensor,
    pub calls: usize,
    pub seeds: Vec<u64>,
}

/// Forecast `horizon` frames after `init` (`[context, C, H, W]`). Each call
/// generates `chunk` frames for every member conditioned on the member's
/// latest `context` frames; the final call may overshoot and is truncated.
pub fn autoregressive_rollout<F: VelocityField>(field: &F, init: &Tensor, horizon: usize, cfg: &SampleConfig) -> Result<RolloutPrediction> {
    cfg.validate()?;
    if init.rank() != 4 {
        return Err(invalid(format!("initial frames must be [context, C, H, W], got {:?}", init.shape())));
    }
    if horizon < cfg.chunk {
        return Err(invalid(format!("horizon {horizon} shorter than chunk {}", cfg.chunk)));
    }
    let context = init.shape()[0];
    let frame: usize = init.shape()[1..].iter().product();
    if field.cond_dim() != context * frame || field.state_dim() != cfg.chunk * frame {
        return Err(invalid(format!(
            "field expects conditioning {} and state {}, rollout provides {} context frames and chunks of {} frames of {frame} values",
            field.cond_dim(),
            field.state_dim(),
            context,
            cfg.chunk
        )));
    }
    let m = cfg.members;
    let seeds: Vec<u64> = (0..m).map(|i| member_seed(cfg.seed, i)).collect();
    let mut streams: Vec<Rng> = seeds.iter().map(|&s| seeded(s)).collect();
    // Per member: the full frame history, starting with the context.
    let mut history: Vec<Vec<f64>> = (0..m).map(|_| init.data().to_vec()).collect();
    let calls = horizon.div_ceil(cfg.chunk);
    for _ in 0..calls {
        let mut noise = Vec::with_capacity(m * cfg.chunk * frame);
        let mut cond = Vec::with_capacity(m * context * frame);
        for (h, rng) in history.iter().zip(streams.iter_mut()) {
            noise.extend(normal_vec(rng, cfg.chunk * frame));
            cond.extend_from_slice(&h[h.len() - context * frame..]);
        }
        let x1 = Tensor::from_raw(vec![m, cfg.chunk * frame], noise);
        let cond = Tensor::from_raw(vec![m, context * frame], cond);
        let out = euler_k_step_with(field, &x1, Some(&cond), cfg.steps, cfg.slot)?;
        for (i, h) in history.iter_mut().enumerate() {
            h.extend_from_slice(out.row(i));
        }
    }
    let mut data = Vec::with_capacity(m * horizon * frame);
    for h in &history {
        data.extend_from_slice(&h[context * frame..(context + horizon) * frame]);
    }
    let mut shape = vec![m, horizon];
    shape.extend_from_slice(&init.shape()[1..]);
    Ok(RolloutPrediction {
        frames: Tensor::new(shape, data)?,
        calls,
        seeds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::make_gaussian_pairs;
    use crate::model::{CountingField, PointwiseField};

    fn col(v: &[f64]) -> Tensor {
        Tensor::matrix(v.len(), 1, v.to_vec()).unwrap()
    }

    #[test]
    fn straight_path_is_recovered_in_one_step() {
        // Constant field x1 - x0 for the pair x0 = 2, x1 = -1.
        let field = PointwiseField::new(1, |_: &[f64], _, _, o: &mut [f64]| o[0] = -3.0);
        let x1 = col(&[-1.0]);
        assert_eq!(euler_one_step(&field, &x1, None).unwrap().data(), &[2.0]);
        for k in [2, 4, 8] {
            assert!((euler_k_step(&field, &x1, None, k).unwrap().data()[0] - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_field_and_one_step_identity() {
        let zero = PointwiseField::new(1, |_: &[f64], _, _, o: &mut [f64]| o[0] = 0.0);
        let x1 = col(&[0.3, -0.7]);
        assert_eq!(euler_one_step(&zero, &x1, None).unwrap(), x1);
        let f = PointwiseField::new(1, |x: &[f64], t, _, o: &mut [f64]| o[0] = x[0] * x[0] - t);
        assert_eq!(euler_one_step(&f, &x1, None).unwrap(), euler_k_step(&f, &x1, None, 1).unwrap());
    }

    #[test]
    fn exactly_k_evaluations() {
        let f = CountingField::new(PointwiseField::new(1, |x: &[f64], _, _, o: &mut [f64]| o[0] = x[0]));
        euler_k_step(&f, &col(&[1.0]), None, 7).unwrap();
        assert_eq!(f.calls(), 7);
    }

    #[test]
    fn first_order_error_on_exponential_field() {
        // dx/dt = x from t = 1 to 0: x(0) = x(1) / e.
        let f = PointwiseField::new(1, |x: &[f64], _, _, o: &mut [f64]| o[0] = x[0]);
        let exact = libm::exp(-1.0);
        let ks = [4usize, 8, 16, 32, 64];
        let errs: Vec<f64> = ks.iter().map(|&k| (euler_k_step(&f, &col(&[1.0]), None, k).unwrap().data()[0] - exact).abs()).collect();
        let (lx, ly): (Vec<f64>, Vec<f64>) = ks.iter().zip(&errs).map(|(&k, &e)| (libm::log(k as f64), libm::log(e))).unzip();
        let mx = lx.iter().sum::<f64>() / 5.0;
        let my = ly.iter().sum::<f64>() / 5.0;
        let slope = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / lx.iter().map(|x| (x - mx) * (x - mx)).sum::<f64>();
        assert!((slope + 1.0).abs() < 0.1, "{slope}");
    }

    #[test]
    fn secondary_endpoint_variance() {
        let n = 20_000;
        let (pairs, oracle) = make_gaussian_pairs(n, 1, 4).unwrap();
        for (alpha, var) in [(0.5, 0.5), (1.0, 1.0)] {
            let end = integrate_secondary(&oracle, &pairs.x0, None, alpha, 2000).unwrap();
            let mean = end.mean();
            let v = end.data().iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let v0 = pairs.x0.data().iter().map(|x| x * x).sum::<f64>() / n as f64;
            // Compare against the same x0 draws scaled exactly.
            assert!((v - var * v0).abs() < 5e-3, "alpha {alpha}: {v}");
        }
        assert_eq!(integrate_secondary_to(&oracle, &pairs.x0, None, 0.5, 10, 0.0).unwrap(), pairs.x0);
    }

    #[test]
    fn secondary_step_refinement_is_first_order() {
        let (pairs, oracle) = make_gaussian_pairs(200, 1, 5).unwrap();
        let exact = pairs.x0.scale(libm::sqrt(0.25 + 0.25));
        let err = |s: usize| integrate_secondary(&oracle, &pairs.x0, None, 0.5, s).unwrap().sub(&exact).unwrap().max_abs();
        let ratio = err(40) / err(80);
        assert!((ratio - 2.0).abs() < 0.1, "{ratio}");
    }

    #[test]
    fn one_step_moment_identity_versus_secondary_endpoint() {
        // x0 + alpha v(x0, 0, 1) = (1 - alpha) x0 keeps the mean of the
        // secondary endpoint but not its variance: the gap is alpha^2 Var(x0).
        let n = 100_000;
        let (pairs, oracle) = make_gaussian_pairs(n, 1, 6).unwrap();
        let alpha = 0.5;
        let mut lin = pairs.x0.clone();
        lin.axpy(alpha, &oracle.velocity_uniform(&pairs.x0, None, 0.0, 1.0).unwrap()).unwrap();
        let end = integrate_secondary(&oracle, &pairs.x0, None, alpha, 400).unwrap();
        let stats = |t: &Tensor| {
            let m = t.mean();
            (m, t.data().iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n as f64)
        };
        let ((m1, v1), (m2, v2)) = (stats(&lin), stats(&end));
        let sigma = 3.0 / libm::sqrt(n as f64);
        assert!((m1 - m2).abs() < sigma);
        let v0 = stats(&pairs.x0).1;
        assert!((v2 - v1 - alpha * alpha * v0).abs() < 5e-3);
    }

    #[test]
    fn ensembles_are_deterministic_and_seeded_per_member() {
        let f = PointwiseField::new(2, |x: &[f64], t, _, o: &mut [f64]| {
            o[0] = x[0] * t;
            o[1] = x[1] - 1.0;
        });
        let cfg = SampleConfig::new(3, 4, 9);
        let a = generate_ensemble(&f, None, 5, &cfg).unwrap();
        assert_eq!(a, generate_ensemble(&f, None, 5, &cfg).unwrap());
        assert_eq!(a.members.shape(), &[4, 5, 2]);
        // Member 2 of a 4-member run equals member 2 of a 3-member run.
        let b = generate_ensemble(&f, None, 5, &SampleConfig::new(3, 3, 9)).unwrap();
        assert_eq!(a.member(2).unwrap(), b.member(2).unwrap());
        assert_ne!(a.member(0).unwrap(), a.member(1).unwrap());
    }

    #[test]
    fn x_independent_field_has_zero_spread_in_one_step() {
        // One step maps x1 to x1 - v, so spread vanishes only if v absorbs
        // x1; a field v = x - c does exactly that.
        let f = PointwiseField::new(1, |x: &[f64], _, _, o: &mut [f64]| o[0] = x[0] - 0.25);
        let e = generate_ensemble(&f, None, 3, &SampleConfig::new(1, 6, 2)).unwrap();
        assert!(e.members.data().iter().all(|&v| (v - 0.25).abs() < 1e-14));
        assert!(generate_ensemble(&f, None, 3, &SampleConfig::new(1, 0, 2)).is_err());
    }

    struct Shift;

    impl VelocityField for Shift {
        // State: one 1x1x2 frame; conditioning: one frame. The generated
        // frame is the context plus one, whatever the noise.
        fn state_dim(&self) -> usize {
            2
        }
        fn cond_dim(&self) -> usize {
            2
        }
        fn velocity(&self, x: &Tensor, cond: Option<&Tensor>, _t: &[f64], _a: &[f64]) -> Result<Tensor> {
            let c = cond.unwrap();
            x.zip_map(c, "shift", |x, c| x - (c + 1.0))
        }
    }

    #[test]
    fn rollout_calls_and_conditioning_chain() {
        let init = Tensor::new(vec![1, 2, 1, 1], vec![0.0, 10.0]).unwrap();
        let cfg = SampleConfig::new(1, 2, 3);
        let r = autoregressive_rollout(&Shift, &init, 1, &cfg).unwrap();
        assert_eq!(r.calls, 1);
        let r = autoregressive_rollout(&Shift, &init, 3, &cfg).unwrap();
        assert_eq!(r.calls, 3);
        assert_eq!(r.frames.shape(), &[2, 3, 2, 1, 1]);
        assert_eq!(&r.frames.data()[..6], &[1.0, 11.0, 2.0, 12.0, 3.0, 13.0]);
        // Perturbing the initial frame moves every later frame.
        let init2 = Tensor::new(vec![1, 2, 1, 1], vec![0.5, 10.0]).unwrap();
        let r2 = autoregressive_rollout(&Shift, &init2, 3, &cfg).unwrap();
        assert_eq!(r2.frames.data()[4], 3.5);
        assert!(autoregressive_rollout(&Shift, &Tensor::new(vec![2, 2, 1, 1], vec![0.0; 4]).unwrap(), 3, &cfg).is_err());
    }

    #[test]
    fn oracle_one_step_is_the_mean() {
        let (_, oracle) = make_gaussian_pairs(1, 1, 0).unwrap();
        // c(1) = 1, so one step maps any noise to 0 = E[x0].
        let x1 = col(&[0.3, -2.0, 5.0]);
        assert_eq!(euler_one_step(&oracle, &x1, None).unwrap().data(), &[0.0; 3]);
    }
}
