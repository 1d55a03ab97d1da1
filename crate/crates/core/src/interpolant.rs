//! Linear interpolant, target velocities and the recursive scale schedule.
//!
//! Conventions: `x0` is a data sample, `x1` a noise sample, `t = 0` is data
//! and `t = 1` is noise. Trajectory `i` (1-based) of a depth-`D` recursion has
//! scale `alpha^(i) = alpha^(i-1)` and aligned time `tau^(i) = t / alpha^(i)`,
//! so every trajectory passes through the same point `x_t`.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::error::{invalid, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Smallest admissible base scale; `t / alpha` is never evaluated below it.
pub const ALPHA_FLOOR: f64 = 1e-3;

/// `(1 - t) x0 + t x1`.
pub fn lerp_state(x0: &Tensor, x1: &Tensor, t: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&t) {
        return Err(invalid(format!("interpolation time {t} outside [0, 1]")));
    }
    x0.zip_map(x1, "lerp_state", |a, b| (1.0 - t) * a + t * b)
}

/// Conditional velocity `x1 - x0` of the linear path (constant in `t`).
pub fn target_velocity(x0: &Tensor, x1: &Tensor) -> Result<Tensor> {
    x1.sub(x0)
}

/// Draw `t ~ U(0, 1)` and `alpha ~ U(t, 1)`.
///
/// `alpha` is floored just above [`ALPHA_FLOOR`]; since `t <= alpha` before
/// the floor, `t / alpha <= 1` still holds afterwards.
pub fn sample_time_and_scale(rng: &mut Rng) -> (f64, f64) {
    let t = sample_time(rng);
    (t, sample_scale(rng, t))
}

pub(crate) fn sample_time(rng: &mut Rng) -> f64 {
    rng.random::<f64>()
}

pub(crate) fn sample_scale(rng: &mut Rng, t: f64) -> f64 {
    let u: f64 = rng.random();
    (t + (1.0 - t) * u).max(ALPHA_FLOOR.next_up())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScaleSchedule {
    pub depth: usize,
    pub alpha: f64,
    pub t: f64,
    /// `alpha^(i)` for `i = 1..=depth`.
    pub scales: Vec<f64>,
    /// `tau^(i)` for `i = 1..=depth`, clamped to 1.
    pub times: Vec<f64>,
    /// How many `tau^(i)` exceeded 1 and were clamped (possible for depth >= 3).
    pub clamped: usize,
}

impl ScaleSchedule {
    /// Scale and aligned time of trajectory `i` (1-based).
    pub fn trajectory(&self, i: usize) -> (f64, f64) {
        (self.scales[i - 1], self.times[i - 1])
    }
}

pub fn build_schedule(depth: usize, alpha: f64, t: f64) -> Result<ScaleSchedule> {
    if depth == 0 {
        return Err(invalid("recursion depth must be at least 1"));
    }
    if !(alpha > ALPHA_FLOOR && alpha <= 1.0) {
        return Err(invalid(format!("scale {alpha} outside ({ALPHA_FLOOR}, 1]")));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(invalid(format!("time {t} outside [0, 1]")));
    }
    let mut scales = Vec::with_capacity(depth);
    let mut times = Vec::with_capacity(depth);
    let mut clamped = 0;
    let mut scale = 1.0;
    for _ in 0..depth {
        let tau = t / scale;
        if tau > 1.0 {
            clamped += 1;
        }
        scales.push(scale);
        times.push(tau.min(1.0));
        scale *= alpha;
    }
    Ok(ScaleSchedule {
        depth,
        alpha,
        t,
        scales,
        times,
        clamped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;

    fn v(d: &[f64]) -> Tensor {
        Tensor::vector(d.to_vec()).unwrap()
    }

    #[test]
    fn lerp_endpoints_and_midpoint() {
        let (a, b) = (v(&[1.0, -2.0]), v(&[3.0, 5.0]));
        assert_eq!(lerp_state(&a, &b, 0.0).unwrap(), a);
        assert_eq!(lerp_state(&a, &b, 1.0).unwrap(), b);
        assert_eq!(lerp_state(&v(&[0.0]), &v(&[2.0]), 0.25).unwrap().data(), &[0.5]);
        assert!(lerp_state(&a, &b, 1.5).is_err());
        assert!(lerp_state(&a, &v(&[1.0]), 0.5).is_err());
    }

    #[test]
    fn target_velocity_cases() {
        let a = v(&[1.0, 2.0]);
        assert_eq!(target_velocity(&a, &a).unwrap().data(), &[0.0, 0.0]);
        assert_eq!(target_velocity(&v(&[0.0, 0.0]), &v(&[3.0, 4.0])).unwrap().data(), &[3.0, 4.0]);
        // Scaled target of trajectory 2 at alpha = 0.5.
        let s = build_schedule(2, 0.5, 0.3).unwrap();
        let vstar = v(&[3.0, 4.0]);
        assert_eq!(vstar.scale(s.trajectory(2).0).data(), &[1.5, 2.0]);
    }

    #[test]
    fn schedule_examples() {
        let s = build_schedule(3, 0.5, 0.1).unwrap();
        assert_eq!(s.scales, [1.0, 0.5, 0.25]);
        let s = build_schedule(2, 1.0, 0.37).unwrap();
        assert_eq!(s.times, [0.37, 0.37]);
        let s = build_schedule(2, 0.5, 0.2).unwrap();
        assert_eq!(s.times[1], 0.4);
        assert!(build_schedule(0, 0.5, 0.2).is_err());
        assert!(build_schedule(2, ALPHA_FLOOR, 0.0).is_err());
    }

    #[test]
    fn deep_schedule_clamps_and_counts() {
        // t/alpha = 0.8 fits, t/alpha^2 = 1.6 does not.
        let s = build_schedule(3, 0.5, 0.4).unwrap();
        assert_eq!(s.times, [0.4, 0.8, 1.0]);
        assert_eq!(s.clamped, 1);
    }

    #[test]
    fn sampler_support_near_one() {
        let mut rng = seeded(3);
        for _ in 0..10_000 {
            let (t, a) = sample_time_and_scale(&mut rng);
            if t >= 0.9 {
                assert!((0.9..=1.0).contains(&a));
            }
        }
    }

    #[test]
    fn time_mean_is_one_half() {
        let mut rng = seeded(5);
        let n = 100_000;
        let mean = (0..n).map(|_| sample_time_and_scale(&mut rng).0).sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.005, "{mean}");
    }

    proptest! {
        #[test]
        fn depth_two_aligned_time_in_unit_interval(seed in any::<u64>()) {
            let mut rng = seeded(seed);
            for _ in 0..64 {
                let (t, a) = sample_time_and_scale(&mut rng);
                let s = build_schedule(2, a, t).unwrap();
                prop_assert_eq!(s.clamped, 0);
                prop_assert!(s.times[1] >= t && s.times[1] <= 1.0);
                prop_assert_eq!(s.times[0], t);
            }
        }

        #[test]
        fn lerp_plus_remaining_velocity_is_x1(
            a in proptest::collection::vec(-10.0f64..10.0, 1..6),
            t in 0.0f64..=1.0,
        ) {
            let x0 = v(&a);
            let x1 = v(&a.iter().map(|x| x * 0.5 - 1.0).collect::<Vec<_>>());
            let xt = lerp_state(&x0, &x1, t).unwrap();
            let back = xt.add(&target_velocity(&x0, &x1).unwrap().scale(1.0 - t)).unwrap();
            for (p, q) in back.data().iter().zip(x1.data()) {
                prop_assert!((p - q).abs() <= 1e-12 * (1.0 + q.abs()));
            }
        }
    }
}
