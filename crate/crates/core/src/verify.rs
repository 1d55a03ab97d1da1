//! Empirical checks of trajectory straightness, marginal preservation and
//! cross-scale consistency.
//!
//! Derivatives are finite differences of the field itself. Time derivatives
//! are central where both neighbours lie in `[0, 1]` and one-sided
//! otherwise; the scale derivative at `alpha = 1` is a backward difference.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::datasets::{make_gaussian_pairs, TrainData};
use crate::error::{invalid, Error, Result};
use crate::model::VelocityField;
use crate::rng::{normal_vec, seeded};
use crate::sampler::{euler_k_step, integrate_secondary_to};
use crate::tensor::Tensor;

/// Evaluation points: states `x` (`[N, d]`), optional conditioning and one
/// time per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Points {
    pub x: Tensor,
    pub cond: Option<Tensor>,
    pub t: Vec<f64>,
}

impl Points {
    pub fn new(x: Tensor, cond: Option<Tensor>, t: Vec<f64>) -> Result<Self> {
        if x.rank() != 2 || x.rows() != t.len() || t.is_empty() {
            return Err(invalid(format!("{} times for states of shape {:?}", t.len(), x.shape())));
        }
        if t.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(invalid("point times must lie in [0, 1]"));
        }
        Ok(Self { x, cond, t })
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

/// Points `x_t = (1 - t) x0 + t x1` on the interpolation path of data rows,
/// with `t` uniform on `[t_lo, t_hi]`.
pub fn sample_points(data: &TrainData, n: usize, t_lo: f64, t_hi: f64, seed: u64) -> Result<Points> {
    if n == 0 || !(0.0 <= t_lo && t_lo <= t_hi && t_hi <= 1.0) {
        return Err(invalid(format!("bad point request n={n}, t in [{t_lo}, {t_hi}]")));
    }
    let mut rng = seeded(seed);
    let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..data.len())).collect();
    let (x0, cond) = data.gather(&idx);
    let t: Vec<f64> = (0..n).map(|_| t_lo + (t_hi - t_lo) * rng.random::<f64>()).collect();
    let noise = normal_vec(&mut rng, x0.len());
    let d = x0.cols();
    let mut x = Vec::with_capacity(x0.len());
    for r in 0..n {
        x.extend(x0.row(r).iter().zip(&noise[r * d..(r + 1) * d]).map(|(a, b)| (1.0 - t[r]) * a + t[r] * b));
    }
    Points::new(Tensor::new(vec![n, d], x)?, cond, t)
}

fn row_norms(x: &Tensor) -> Vec<f64> {
    (0..x.rows()).map(|r| libm::sqrt(x.row(r).iter().map(|v| v * v).sum())).collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn max(v: &[f64]) -> f64 {
    v.iter().copied().fold(0.0, f64::max)
}

/// `d/dt v(x, t, 1)` per row.
fn time_derivative<F: VelocityField>(field: &F, p: &Points, eps: f64) -> Result<Tensor> {
    let n = p.len();
    let (mut lo, mut hi, mut span) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for (i, &t) in p.t.iter().enumerate() {
        lo[i] = (t - eps).max(0.0);
        hi[i] = (t + eps).min(1.0);
        span[i] = hi[i] - lo[i];
    }
    let ones = vec![1.0; n];
    let up = field.velocity(&p.x, p.cond.as_ref(), &hi, &ones)?;
    let down = field.velocity(&p.x, p.cond.as_ref(), &lo, &ones)?;
    let mut out = up.sub(&down)?;
    let d = out.cols();
    for (row, s) in out.data_mut().chunks_exact_mut(d).zip(&span) {
        row.iter_mut().for_each(|v| *v /= s);
    }
    Ok(out)
}

fn check_eps(eps: f64) -> Result<()> {
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(invalid(format!("finite-difference step {eps} outside [1e-6, 1e-3]")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AccelerationReport {
    /// `|a|` per point, `a = dv/dt + (grad_x v) v`.
    pub norms: Vec<f64>,
    /// `|dv/dt|` per point.
    pub time_norms: Vec<f64>,
    /// `|(grad_x v) v|` per point.
    pub advective_norms: Vec<f64>,
    pub mean: f64,
    pub max: f64,
}

/// Trajectory acceleration of the generating field (scale 1). The
/// advective part is a central difference along `v` itself.
pub fn estimate_acceleration<F: VelocityField>(field: &F, p: &Points, eps: f64) -> Result<AccelerationReport> {
    check_eps(eps)?;
    let ones = vec![1.0; p.len()];
    let v = field.velocity(&p.x, p.cond.as_ref(), &p.t, &ones)?;
    let dt = time_derivative(field, p, eps)?;
    let mut fwd = p.x.clone();
    fwd.axpy(eps, &v)?;
    let mut bwd = p.x.clone();
    bwd.axpy(-eps, &v)?;
    let adv = field
        .velocity(&fwd, p.cond.as_ref(), &p.t, &ones)?
        .sub(&field.velocity(&bwd, p.cond.as_ref(), &p.t, &ones)?)?
        .scale(0.5 / eps);
    let a = dt.add(&adv)?;
    if !a.is_finite() {
        return Err(Error::NonFinite("acceleration".into()));
    }
    let norms = row_norms(&a);
    Ok(AccelerationReport {
        mean: mean(&norms),
        max: max(&norms),
        time_norms: row_norms(&dt),
        advective_norms: row_norms(&adv),
        norms,
    })
}

/// Largest directional derivative `|v(x + eps u) - v(x - eps u)| / 2 eps`
/// over `directions` random unit vectors per point, maximized over points.
pub fn estimate_lipschitz<F: VelocityField>(field: &F, p: &Points, directions: usize, eps: f64, seed: u64) -> Result<f64> {
    check_eps(eps)?;
    let mut rng = seeded(seed);
    let ones = vec![1.0; p.len()];
    let d = p.x.cols();
    let mut best: f64 = 0.0;
    for _ in 0..directions {
        let mut u = normal_vec(&mut rng, p.x.len());
        for row in u.chunks_exact_mut(d) {
            let n = libm::sqrt(row.iter().map(|v| v * v).sum::<f64>());
            row.iter_mut().for_each(|v| *v /= n);
        }
        let u = Tensor::from_raw(p.x.shape().to_vec(), u);
        let mut fwd = p.x.clone();
        fwd.axpy(eps, &u)?;
        let mut bwd = p.x.clone();
        bwd.axpy(-eps, &u)?;
        let diff = field
            .velocity(&fwd, p.cond.as_ref(), &p.t, &ones)?
            .sub(&field.velocity(&bwd, p.cond.as_ref(), &p.t, &ones)?)?;
        best = best.max(max(&row_norms(&diff)) / (2.0 * eps));
    }
    Ok(best)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TruncationReport {
    pub ks: Vec<usize>,
    pub reference_k: usize,
    /// Mean over samples of `|x0(K) - x0(reference)|`.
    pub errors: Vec<f64>,
    /// Least-squares slope of `log error` on `log K`; absent when an error
    /// is exactly zero.
    pub slope: Option<f64>,
}

/// Least-squares slope of `y` on `x`.
pub fn fit_slope(x: &[f64], y: &[f64]) -> f64 {
    let (mx, my) = (mean(x), mean(y));
    let num: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let den: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    num / den
}

fn log_slope(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() < 2 || ys.iter().any(|&e| !(e > 0.0)) {
        return None;
    }
    let lx: Vec<f64> = xs.iter().map(|&x| libm::log(x)).collect();
    let ly: Vec<f64> = ys.iter().map(|&y| libm::log(y)).collect();
    Some(fit_slope(&lx, &ly))
}

pub fn truncation_study<F: VelocityField>(field: &F, ks: &[usize], x1: &Tensor, cond: Option<&Tensor>, reference_k: usize) -> Result<TruncationReport> {
    let kmax = ks.iter().copied().max().ok_or_else(|| invalid("empty step list"))?;
    if ks.contains(&0) {
        return Err(invalid("step counts must be positive"));
    }
    if reference_k < 16 * kmax {
        return Err(invalid(format!("reference {reference_k} steps is below 16 x {kmax}")));
    }
    let reference = euler_k_step(field, x1, cond, reference_k)?;
    let errors = ks
        .iter()
        .map(|&k| Ok(mean(&row_norms(&euler_k_step(field, x1, cond, k)?.sub(&reference)?))))
        .collect::<Result<Vec<f64>>>()?;
    let kf: Vec<f64> = ks.iter().map(|&k| k as f64).collect();
    Ok(TruncationReport {
        ks: ks.to_vec(),
        reference_k,
        slope: log_slope(&kf, &errors),
        errors,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MarginalReport {
    pub alpha: f64,
    pub tau: f64,
    pub n: usize,
    pub endpoint_mean: f64,
    pub endpoint_var: f64,
    /// Law of `(1 - alpha tau) x0 + alpha tau x1`: mean 0 and this variance.
    pub target_var: f64,
    pub mean_gap: f64,
    pub var_gap: f64,
    /// 1-D Wasserstein distance between the endpoint sample and direct
    /// interpolant samples built from the same pairs.
    pub w1: f64,
}

/// Integrate the secondary trajectory from `n` standard-normal data draws
/// and compare the endpoint at `tau` with the interpolant law.
pub fn marginal_test<F: VelocityField>(field: &F, alpha: f64, tau: f64, n: usize, steps: usize, seed: u64) -> Result<MarginalReport> {
    if field.state_dim() != 1 {
        return Err(invalid("the marginal test runs in one dimension"));
    }
    let (pairs, _) = make_gaussian_pairs(n, 1, seed)?;
    let end = integrate_secondary_to(field, &pairs.x0, None, alpha, steps, tau)?;
    let s = alpha * tau;
    let mut direct: Vec<f64> = pairs.x0.data().iter().zip(pairs.x1.data()).map(|(a, b)| (1.0 - s) * a + s * b).collect();
    let m = end.mean();
    let var = end.data().iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1).max(1) as f64;
    let target_var = (1.0 - s) * (1.0 - s) + s * s;
    let mut sorted = end.data().to_vec();
    sorted.sort_by(f64::total_cmp);
    direct.sort_by(f64::total_cmp);
    let w1 = sorted.iter().zip(&direct).map(|(a, b)| (a - b).abs()).sum::<f64>() / n as f64;
    Ok(MarginalReport {
        alpha,
        tau,
        n,
        endpoint_mean: m,
        endpoint_var: var,
        target_var,
        mean_gap: m,
        var_gap: var - target_var,
        w1,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResidualReport {
    /// Mean absolute residual over coordinates, per point.
    pub per_point: Vec<f64>,
    pub mean: f64,
    pub max: f64,
}

/// `t dv/dt + v - dv/dalpha` at `alpha = 1`, the infinitesimal form of the
/// cross-scale relation `v(x, t / alpha, alpha) = alpha v(x, t, 1)`.
pub fn consistency_pde_residual<F: VelocityField>(field: &F, p: &Points, eps: f64) -> Result<ResidualReport> {
    check_eps(eps)?;
    let n = p.len();
    let ones = vec![1.0; n];
    let v = field.velocity(&p.x, p.cond.as_ref(), &p.t, &ones)?;
    let dt = time_derivative(field, p, eps)?;
    let below = field.velocity(&p.x, p.cond.as_ref(), &p.t, &vec![1.0 - eps; n])?;
    let da = v.sub(&below)?.scale(1.0 / eps);
    let d = v.cols();
    let mut per_point = Vec::with_capacity(n);
    for r in 0..n {
        let t = p.t[r];
        let s: f64 = (0..d).map(|j| (t * dt.row(r)[j] + v.row(r)[j] - da.row(r)[j]).abs()).sum();
        per_point.push(s / d as f64);
    }
    if per_point.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("consistency residual".into()));
    }
    Ok(ResidualReport {
        mean: mean(&per_point),
        max: max(&per_point),
        per_point,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShortcutProbeReport {
    pub ds: Vec<f64>,
    /// Mean `|x + 2d v(x,t,2d) - (y + d v(y, t+d, d))|`, `y = x + d v(x,t,d)`;
    /// the third slot read as a step size.
    pub composition: Vec<f64>,
    /// Mean `|v(x, t/(1-d), 1-d) - (1-d) v(x, t, 1)|`; the third slot read as
    /// a scale.
    pub scaling: Vec<f64>,
    pub composition_order: Option<f64>,
    pub scaling_order: Option<f64>,
}

/// Both constraints at each `d`; requires `t <= 1 - 2 max(d)` at every point.
pub fn shortcut_probe<F: VelocityField>(field: &F, ds: &[f64], p: &Points) -> Result<ShortcutProbeReport> {
    let dmax = ds.iter().copied().fold(0.0, f64::max);
    if ds.is_empty() || ds.iter().any(|&d| !(d > 0.0 && d <= 0.25)) {
        return Err(invalid("probe steps must lie in (0, 0.25]"));
    }
    if p.t.iter().any(|&t| t > 1.0 - 2.0 * dmax) {
        return Err(invalid(format!("probe times must not exceed {}", 1.0 - 2.0 * dmax)));
    }
    let n = p.len();
    let cond = p.cond.as_ref();
    let mut composition = Vec::with_capacity(ds.len());
    let mut scaling = Vec::with_capacity(ds.len());
    let v1 = field.velocity(&p.x, cond, &p.t, &vec![1.0; n])?;
    for &d in ds {
        let single = {
            let mut s = p.x.clone();
            s.axpy(2.0 * d, &field.velocity(&p.x, cond, &p.t, &vec![2.0 * d; n])?)?;
            s
        };
        let two = crate::trainer::two_step_composition(field, &p.x, cond, &p.t, d)?;
        composition.push(mean(&row_norms(&single.sub(&two)?)));

        let a = 1.0 - d;
        let tau: Vec<f64> = p.t.iter().map(|t| (t / a).min(1.0)).collect();
        let scaled = field.velocity(&p.x, cond, &tau, &vec![a; n])?;
        scaling.push(mean(&row_norms(&scaled.sub(&v1.scale(a))?)));
    }
    Ok(ShortcutProbeReport {
        composition_order: log_slope(ds, &composition),
        scaling_order: log_slope(ds, &scaling),
        ds: ds.to_vec(),
        composition,
        scaling,
    })
}

/// Outcome of one named check: summary statistics, the thresholds they were
/// held to, and the raw table.
#[derive(Clone, Debug, PartialEq)]
pub struct VerifyReport {
    pub check: String,
    pub statistics: BTreeMap<String, f64>,
    pub thresholds: BTreeMap<String, f64>,
    pub passed: bool,
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

fn stats(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

fn header(cols: &[&str]) -> Vec<String> {
    cols.iter().map(|c| c.to_string()).collect()
}

impl AccelerationReport {
    pub fn report(&self) -> VerifyReport {
        let t_mean = mean(&self.time_norms);
        let adv_mean = mean(&self.advective_norms);
        VerifyReport {
            check: "acceleration".into(),
            statistics: stats(&[("mean_norm", self.mean), ("max_norm", self.max), ("mean_time_norm", t_mean), ("mean_advective_norm", adv_mean)]),
            thresholds: BTreeMap::new(),
            passed: self.mean.is_finite(),
            header: header(&["point", "norm", "time_norm", "advective_norm"]),
            rows: (0..self.norms.len())
                .map(|i| vec![i as f64, self.norms[i], self.time_norms[i], self.advective_norms[i]])
                .collect(),
        }
    }
}

impl TruncationReport {
    /// Passes when every error is below `1e-12`, or when each doubling of
    /// `K >= 4` shrinks the error by at least a quarter.
    pub fn report(&self) -> VerifyReport {
        let exact = self.errors.iter().all(|&e| e <= 1e-12);
        let mut decays = true;
        for (i, &k) in self.ks.iter().enumerate() {
            if k < 4 {
                continue;
            }
            if let Some(j) = self.ks.iter().position(|&k2| k2 == 2 * k) {
                decays &= self.errors[j] <= 0.75 * self.errors[i];
            }
        }
        let mut s = stats(&[("reference_k", self.reference_k as f64)]);
        if let Some(slope) = self.slope {
            s.insert("slope".into(), slope);
        }
        VerifyReport {
            check: "truncation".into(),
            statistics: s,
            thresholds: stats(&[("doubling_ratio_max", 0.75), ("exact_error_max", 1e-12)]),
            passed: exact || decays,
            header: header(&["k", "error"]),
            rows: self.ks.iter().zip(&self.errors).map(|(&k, &e)| vec![k as f64, e]).collect(),
        }
    }
}

impl MarginalReport {
    /// Passes when the mean is within `3 / sqrt(n)` and the variance within
    /// `5 / sqrt(n)` of the interpolant law.
    pub fn report(&self) -> VerifyReport {
        let root = libm::sqrt(self.n as f64);
        let (mt, vt) = (3.0 / root, 5.0 / root);
        VerifyReport {
            check: "marginal".into(),
            statistics: stats(&[
                ("alpha", self.alpha),
                ("tau", self.tau),
                ("endpoint_mean", self.endpoint_mean),
                ("endpoint_var", self.endpoint_var),
                ("target_var", self.target_var),
                ("w1", self.w1),
            ]),
            thresholds: stats(&[("mean_gap_max", mt), ("var_gap_max", vt)]),
            passed: self.mean_gap.abs() < mt && self.var_gap.abs() < vt,
            header: header(&["alpha", "tau", "n", "mean_gap", "var_gap", "w1"]),
            rows: vec![vec![self.alpha, self.tau, self.n as f64, self.mean_gap, self.var_gap, self.w1]],
        }
    }
}

impl ResidualReport {
    pub fn report(&self) -> VerifyReport {
        VerifyReport {
            check: "consistency".into(),
            statistics: stats(&[("mean", self.mean), ("max", self.max)]),
            thresholds: BTreeMap::new(),
            passed: self.mean.is_finite(),
            header: header(&["point", "residual"]),
            rows: self.per_point.iter().enumerate().map(|(i, &r)| vec![i as f64, r]).collect(),
        }
    }
}

impl ShortcutProbeReport {
    pub fn report(&self) -> VerifyReport {
        let mut s = BTreeMap::new();
        if let Some(o) = self.composition_order {
            s.insert("composition_order".to_string(), o);
        }
        if let Some(o) = self.scaling_order {
            s.insert("scaling_order".to_string(), o);
        }
        VerifyReport {
            check: "shortcut".into(),
            statistics: s,
            thresholds: BTreeMap::new(),
            passed: self.composition.iter().chain(&self.scaling).all(|v| v.is_finite()),
            header: header(&["d", "composition", "scaling"]),
            rows: (0..self.ds.len()).map(|i| vec![self.ds[i], self.composition[i], self.scaling[i]]).collect(),
        }
    }
}
