//! Training objectives and the optimization loop.
//!
//! Every objective has a value path generic over [`VelocityField`], used for
//! analytic fields, and a graph path for [`VelocityNet`] that also returns
//! parameter gradients. Both evaluate the same terms in the same order.
//!
//! Squared norms are summed over state coordinates and averaged over the
//! batch.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::autodiff::{Bindings, Gradients, Graph, NodeId};
use crate::datasets::TrainData;
use crate::error::{invalid, Error, Result};
use crate::interpolant::{build_schedule, sample_scale, sample_time};
use crate::model::{NetNodes, VelocityField, VelocityNet};
use crate::optim::AdamW;
use crate::rng::{derive_seed, normal_vec, seeded, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    RecFm,
    Fm,
    Shortcut,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::RecFm => "recfm",
            TrainMode::Fm => "fm",
            TrainMode::Shortcut => "shortcut",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "recfm" => Ok(TrainMode::RecFm),
            "fm" => Ok(TrainMode::Fm),
            "shortcut" => Ok(TrainMode::Shortcut),
            other => Err(invalid(format!("unknown training mode `{other}`"))),
        }
    }
}

/// One minibatch: data `x0`, noise `x1`, optional conditioning.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x0: Tensor,
    pub x1: Tensor,
    pub cond: Option<Tensor>,
}

impl Batch {
    pub fn new(x0: Tensor, x1: Tensor, cond: Option<Tensor>) -> Result<Self> {
        if x0.rank() != 2 || x0.rows() == 0 || x0.shape() != x1.shape() {
            return Err(invalid(format!("batch endpoints {:?} and {:?} must be equal non-empty matrices", x0.shape(), x1.shape())));
        }
        Ok(Self { x0, x1, cond })
    }

    pub fn len(&self) -> usize {
        self.x0.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub mode: TrainMode,
    pub total: f64,
    /// `L_traj^(i)` for `i = 1..=D`. In shortcut mode, the flow-matching term.
    pub traj: Vec<f64>,
    /// `L_cons^(i)` for `i = 2..=D`. In shortcut mode, the composition term.
    pub cons: Vec<f64>,
}

impl LossBreakdown {
    fn assemble(mode: TrainMode, traj: Vec<f64>, cons: Vec<f64>, lambda: f64) -> Result<Self> {
        let mut total = 0.0;
        for &l in &traj {
            total += l;
        }
        let mut cons_sum = 0.0;
        for &l in &cons {
            cons_sum += l;
        }
        let total = total + cons_sum * lambda;
        if !total.is_finite() {
            return Err(Error::NonFinite(format!("{} loss", mode.name())));
        }
        Ok(Self { mode, total, traj, cons })
    }
}

/// Settings of the recursive objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub depth: usize,
    pub lambda: f64,
    /// Treat `v^(1)` in the consistency terms as a constant.
    pub stop_grad_primary: bool,
    /// One `(t, alpha)` draw shared by the batch instead of one per element.
    pub per_batch_scale: bool,
}

impl LossConfig {
    pub fn recfm(depth: usize, lambda: f64) -> Self {
        Self {
            depth,
            lambda,
            stop_grad_primary: false,
            per_batch_scale: false,
        }
    }

    pub fn fm() -> Self {
        Self::recfm(1, 0.0)
    }

    fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(invalid("recursion depth must be at least 1"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(invalid(format!("consistency weight {} must be finite and non-negative", self.lambda)));
        }
        Ok(())
    }
}

/// Time and base scale of every batch element. Times are drawn first for
/// the whole batch; scales only when `depth >= 2`, so depth 1 consumes the
/// same random stream as plain flow matching.
#[derive(Clone, Debug, PartialEq)]
pub struct Draws {
    pub t: Vec<f64>,
    pub alpha: Vec<f64>,
}

pub fn sample_draws(rng: &mut Rng, b: usize, cfg: &LossConfig) -> Draws {
    let n = if cfg.per_batch_scale { 1 } else { b };
    let t: Vec<f64> = (0..n).map(|_| sample_time(rng)).collect();
    let alpha: Vec<f64> = if cfg.depth >= 2 {
        t.iter().map(|&t| sample_scale(rng, t)).collect()
    } else {
        vec![1.0; n]
    };
    if cfg.per_batch_scale {
        Draws {
            t: vec![t[0]; b],
            alpha: vec![alpha[0]; b],
        }
    } else {
        Draws { t, alpha }
    }
}

/// Per-trajectory conditioning `(tau^(i), alpha^(i))` of each element.
struct Plan {
    times: Vec<Vec<f64>>,
    scales: Vec<Vec<f64>>,
}

fn plan(draws: &Draws, depth: usize) -> Result<Plan> {
    let b = draws.t.len();
    let mut times = vec![Vec::with_capacity(b); depth];
    let mut scales = vec![Vec::with_capacity(b); depth];
    for (&t, &a) in draws.t.iter().zip(&draws.alpha) {
        let s = build_schedule(depth, a, t)?;
        for i in 0..depth {
            times[i].push(s.times[i]);
            scales[i].push(s.scales[i]);
        }
    }
    Ok(Plan { times, scales })
}

fn lerp_rows(batch: &Batch, t: &[f64]) -> Tensor {
    let d = batch.x0.cols();
    let mut out = Vec::with_capacity(batch.x0.len());
    for r in 0..batch.len() {
        let tr = t[r];
        out.extend(batch.x0.row(r).iter().zip(batch.x1.row(r)).map(|(a, b)| (1.0 - tr) * a + tr * b));
    }
    Tensor::from_raw(vec![batch.len(), d], out)
}

/// Row `r` multiplied by `s[r]`.
fn scale_rows(x: &Tensor, s: &[f64]) -> Tensor {
    let d = x.cols();
    let mut out = x.clone();
    for (row, &c) in out.data_mut().chunks_exact_mut(d).zip(s) {
        row.iter_mut().for_each(|v| *v *= c);
    }
    out
}

/// `[B, d]` matrix whose row `r` is filled with `s[r]`.
fn broadcast_rows(s: &[f64], d: usize) -> Tensor {
    let mut out = Vec::with_capacity(s.len() * d);
    for &c in s {
        out.extend(core::iter::repeat_n(c, d));
    }
    Tensor::from_raw(vec![s.len(), d], out)
}

/// Mean over rows of the squared row norm of `a - b`.
fn sq_norm_mean(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok(a.sub(b)?.map(|v| v * v).sum() * (1.0 / a.rows() as f64))
}

fn sq_norm_mean_node(g: &mut Graph, a: NodeId, b: NodeId, rows: usize) -> Result<NodeId> {
    let diff = g.sub(a, b)?;
    let sq = g.square(diff);
    let s = g.sum(sq);
    Ok(g.scale(s, 1.0 / rows as f64))
}

/// Recursive objective on one batch with the given draws.
pub fn recfm_loss_with_draws<F: VelocityField>(field: &F, batch: &Batch, draws: &Draws, cfg: &LossConfig) -> Result<LossBreakdown> {
    cfg.validate()?;
    let p = plan(draws, cfg.depth)?;
    let xt = lerp_rows(batch, &draws.t);
    let vstar = batch.x1.sub(&batch.x0)?;
    let mut traj = Vec::with_capacity(cfg.depth);
    let mut cons = Vec::with_capacity(cfg.depth - 1);
    let mut primary: Option<Tensor> = None;
    for i in 0..cfg.depth {
        let v = field.velocity(&xt, batch.cond.as_ref(), &p.times[i], &p.scales[i])?;
        traj.push(sq_norm_mean(&v, &scale_rows(&vstar, &p.scales[i]))?);
        match &primary {
            None => primary = Some(v),
            Some(v1) => {
                let s = broadcast_rows(&p.scales[i], v1.cols());
                cons.push(sq_norm_mean(&v, &s.mul(v1)?)?);
            }
        }
    }
    LossBreakdown::assemble(TrainMode::RecFm, traj, cons, cfg.lambda)
}

pub fn recfm_loss<F: VelocityField>(field: &F, batch: &Batch, rng: &mut Rng, cfg: &LossConfig) -> Result<LossBreakdown> {
    let draws = sample_draws(rng, batch.len(), cfg);
    recfm_loss_with_draws(field, batch, &draws, cfg)
}

/// Flow matching: the recursive objective at depth 1.
pub fn vanilla_fm_loss<F: VelocityField>(field: &F, batch: &Batch, rng: &mut Rng) -> Result<LossBreakdown> {
    let mut out = recfm_loss(field, batch, rng, &LossConfig::fm())?;
    out.mode = TrainMode::Fm;
    Ok(out)
}

/// Recursive objective and its parameter gradients.
pub fn recfm_loss_and_grads(net: &VelocityNet, batch: &Batch, draws: &Draws, cfg: &LossConfig) -> Result<(LossBreakdown, Gradients)> {
    cfg.validate()?;
    let b = batch.len();
    let d = net.cfg.state_dim;
    let p = plan(draws, cfg.depth)?;
    let xt = lerp_rows(batch, &draws.t);
    let vstar = batch.x1.sub(&batch.x0)?;

    let mut g = Graph::new();
    let nodes = NetNodes::declare(&net.cfg, &mut g)?;
    let mut owned: Vec<(String, Tensor)> = Vec::new();
    let mut traj_nodes = Vec::new();
    let mut cons_nodes = Vec::new();
    let mut primary: Option<NodeId> = None;
    for i in 0..cfg.depth {
        let input = net.assemble_input(&xt, batch.cond.as_ref(), &p.times[i], &p.scales[i]);
        let in_node = g.input(&format!("input{i}"), input.shape())?;
        owned.push((format!("input{i}"), input));
        let target = scale_rows(&vstar, &p.scales[i]);
        let target_node = g.input(&format!("target{i}"), target.shape())?;
        owned.push((format!("target{i}"), target));
        let v = nodes.apply(&mut g, in_node)?;
        traj_nodes.push(sq_norm_mean_node(&mut g, v, target_node, b)?);
        match primary {
            None => {
                primary = Some(if cfg.stop_grad_primary { g.stop_grad(v) } else { v });
            }
            Some(v1) => {
                let s = broadcast_rows(&p.scales[i], d);
                let s_node = g.input(&format!("scale{i}"), s.shape())?;
                owned.push((format!("scale{i}"), s));
                let sv1 = g.mul(s_node, v1)?;
                cons_nodes.push(sq_norm_mean_node(&mut g, v, sv1, b)?);
            }
        }
    }
    let mut total = traj_nodes[0];
    for &n in &traj_nodes[1..] {
        total = g.add(total, n)?;
    }
    if let Some((&first, rest)) = cons_nodes.split_first() {
        let mut cons_sum = first;
        for &n in rest {
            cons_sum = g.add(cons_sum, n)?;
        }
        let weighted = g.scale(cons_sum, cfg.lambda);
        total = g.add(total, weighted)?;
    }

    let mut bindings = Bindings::new();
    net.params.bind_into(&mut bindings);
    for (name, t) in &owned {
        bindings.bind(name.clone(), t);
    }
    let eval = g.forward(&bindings)?;
    let scalar = |n: NodeId| eval.value(n).data()[0];
    let breakdown = LossBreakdown::assemble(
        TrainMode::RecFm,
        traj_nodes.iter().map(|&n| scalar(n)).collect(),
        cons_nodes.iter().map(|&n| scalar(n)).collect(),
        cfg.lambda,
    )?;
    let grads = eval.backward(total)?;
    Ok((breakdown, grads))
}

/// Step sizes used by shortcut training: `2^-k` for `k = 1..=6`.
pub const SHORTCUT_STEPS: [f64; 6] = [0.5, 0.25, 0.125, 0.0625, 0.03125, 0.015625];

/// Rows `[0, n_fm)` of a batch carry the flow-matching term, the rest the
/// composition term.
fn shortcut_split(b: usize, fraction: f64) -> Result<usize> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(invalid(format!("self-consistency fraction {fraction} outside [0, 1]")));
    }
    let n_sc = libm::round(b as f64 * fraction) as usize;
    if n_sc == 0 || n_sc >= b {
        return Err(invalid(format!("batch of {b} cannot be split with fraction {fraction}")));
    }
    Ok(b - n_sc)
}

/// Draws of one shortcut batch: flow-matching times of the first rows and
/// composition start times `t ~ U(0, 1 - 2d)` of the rest.
#[derive(Clone, Debug, PartialEq)]
pub struct ShortcutDraws {
    pub d: f64,
    pub t_fm: Vec<f64>,
    pub t_sc: Vec<f64>,
}

pub fn sample_shortcut_draws(rng: &mut Rng, b: usize, d: f64, fraction: f64) -> Result<ShortcutDraws> {
    if !(d > 0.0 && d <= 0.5) {
        return Err(invalid(format!("shortcut step {d} outside (0, 0.5]")));
    }
    let n_fm = shortcut_split(b, fraction)?;
    let t_fm = (0..n_fm).map(|_| sample_time(rng)).collect();
    let t_sc = (n_fm..b).map(|_| (1.0 - 2.0 * d) * rng.random::<f64>()).collect();
    Ok(ShortcutDraws { d, t_fm, t_sc })
}

struct ShortcutParts {
    fm: Batch,
    sc: Batch,
    xt_fm: Tensor,
    xt_sc: Tensor,
}

fn shortcut_parts(batch: &Batch, draws: &ShortcutDraws) -> Result<ShortcutParts> {
    let n_fm = draws.t_fm.len();
    if n_fm + draws.t_sc.len() != batch.len() {
        return Err(invalid("shortcut draws do not match the batch"));
    }
    let part = |lo: usize, hi: usize| -> Result<Batch> {
        Batch::new(
            batch.x0.slice_rows(lo, hi)?,
            batch.x1.slice_rows(lo, hi)?,
            batch.cond.as_ref().map(|c| c.slice_rows(lo, hi)).transpose()?,
        )
    };
    let fm = part(0, n_fm)?;
    let sc = part(n_fm, batch.len())?;
    let xt_fm = lerp_rows(&fm, &draws.t_fm);
    let xt_sc = lerp_rows(&sc, &draws.t_sc);
    Ok(ShortcutParts { fm, sc, xt_fm, xt_sc })
}

/// Two consecutive steps of size `d` from `x` at times `t`:
/// `y = x + d v(x, t, d)`, then `y + d v(y, t + d, d)`.
pub fn two_step_composition<F: VelocityField>(field: &F, x: &Tensor, cond: Option<&Tensor>, t: &[f64], d: f64) -> Result<Tensor> {
    let ds = vec![d; x.rows()];
    let mut y = x.clone();
    y.axpy(d, &field.velocity(x, cond, t, &ds)?)?;
    let t2: Vec<f64> = t.iter().map(|t| t + d).collect();
    let mut z = y.clone();
    z.axpy(d, &field.velocity(&y, cond, &t2, &ds)?)?;
    Ok(z)
}

/// Shortcut objective: flow matching with the step slot at 0, plus
/// `|x + 2d v(x, t, 2d) - sg(two steps of size d)|^2`. The step size
/// occupies the scale slot of the network.
pub fn shortcut_loss_with_draws<F: VelocityField>(field: &F, batch: &Batch, draws: &ShortcutDraws) -> Result<LossBreakdown> {
    let parts = shortcut_parts(batch, draws)?;
    let vstar = parts.fm.x1.sub(&parts.fm.x0)?;
    let zeros = vec![0.0; parts.fm.len()];
    let v_fm = field.velocity(&parts.xt_fm, parts.fm.cond.as_ref(), &draws.t_fm, &zeros)?;
    let composed = two_step_composition(field, &parts.xt_sc, parts.sc.cond.as_ref(), &draws.t_sc, draws.d)?;
    let v2 = field.velocity(&parts.xt_sc, parts.sc.cond.as_ref(), &draws.t_sc, &vec![2.0 * draws.d; parts.sc.len()])?;
    let mut single = parts.xt_sc.clone();
    single.axpy(2.0 * draws.d, &v2)?;
    let fm = sq_norm_mean(&v_fm, &vstar)?;
    let sc = sq_norm_mean(&single, &composed)?;
    LossBreakdown::assemble(TrainMode::Shortcut, vec![fm], vec![sc], 1.0)
}

pub fn shortcut_loss<F: VelocityField>(field: &F, batch: &Batch, rng: &mut Rng, d: f64, fraction: f64) -> Result<LossBreakdown> {
    let draws = sample_shortcut_draws(rng, batch.len(), d, fraction)?;
    shortcut_loss_with_draws(field, batch, &draws)
}

pub fn shortcut_loss_and_grads(net: &VelocityNet, batch: &Batch, draws: &ShortcutDraws) -> Result<(LossBreakdown, Gradients)> {
    let parts = shortcut_parts(batch, draws)?;
    let (n_fm, n_sc) = (parts.fm.len(), parts.sc.len());
    let vstar = parts.fm.x1.sub(&parts.fm.x0)?;
    let composed = two_step_composition(net, &parts.xt_sc, parts.sc.cond.as_ref(), &draws.t_sc, draws.d)?;
    let in_fm = net.assemble_input(&parts.xt_fm, parts.fm.cond.as_ref(), &draws.t_fm, &vec![0.0; n_fm]);
    let in_sc = net.assemble_input(&parts.xt_sc, parts.sc.cond.as_ref(), &draws.t_sc, &vec![2.0 * draws.d; n_sc]);

    let mut g = Graph::new();
    let nodes = NetNodes::declare(&net.cfg, &mut g)?;
    let in_fm_n = g.input("input_fm", in_fm.shape())?;
    let in_sc_n = g.input("input_sc", in_sc.shape())?;
    let vstar_n = g.input("target_fm", vstar.shape())?;
    let x_n = g.input("x_sc", parts.xt_sc.shape())?;
    let composed_n = g.constant(composed);
    let v_fm = nodes.apply(&mut g, in_fm_n)?;
    let fm = sq_norm_mean_node(&mut g, v_fm, vstar_n, n_fm)?;
    let v2 = nodes.apply(&mut g, in_sc_n)?;
    let step = g.scale(v2, 2.0 * draws.d);
    let single = g.add(x_n, step)?;
    let sc = sq_norm_mean_node(&mut g, single, composed_n, n_sc)?;
    let total = g.add(fm, sc)?;

    let mut bindings = Bindings::new();
    net.params.bind_into(&mut bindings);
    bindings.bind("input_fm", &in_fm).bind("input_sc", &in_sc).bind("target_fm", &vstar).bind("x_sc", &parts.xt_sc);
    let eval = g.forward(&bindings)?;
    let breakdown = LossBreakdown::assemble(TrainMode::Shortcut, vec![eval.value(fm).data()[0]], vec![eval.value(sc).data()[0]], 1.0)?;
    let grads = eval.backward(total)?;
    Ok((breakdown, grads))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub depth: usize,
    pub lambda: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub optim: AdamW,
    pub seed: u64,
    pub stop_grad_primary: bool,
    pub per_batch_scale: bool,
    /// Fraction of each shortcut batch spent on the composition term.
    pub shortcut_fraction: f64,
    /// Iterations between curve records.
    pub eval_every: usize,
    /// Validation rows used for the one-step MSE.
    pub val_rows: usize,
}

impl TrainConfig {
    /// Depth 2, unit consistency weight.
    pub fn recfm(iterations: usize, seed: u64) -> Self {
        Self {
            mode: TrainMode::RecFm,
            depth: 2,
            lambda: 1.0,
            batch_size: 64,
            iterations,
            optim: AdamW::default(),
            seed,
            stop_grad_primary: false,
            per_batch_scale: false,
            shortcut_fraction: 0.25,
            eval_every: 100,
            val_rows: 256,
        }
    }

    pub fn fm(iterations: usize, seed: u64) -> Self {
        Self {
            mode: TrainMode::Fm,
            depth: 1,
            lambda: 0.0,
            ..Self::recfm(iterations, seed)
        }
    }

    pub fn shortcut(iterations: usize, seed: u64) -> Self {
        Self {
            mode: TrainMode::Shortcut,
            ..Self::fm(iterations, seed)
        }
    }

    /// Flow matching ignores depth and weight; they are pinned to 1 and 0.
    pub fn normalized(mut self) -> Self {
        if self.mode != TrainMode::RecFm {
            self.depth = 1;
            self.lambda = 0.0;
        }
        self
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            depth: self.depth,
            lambda: self.lambda,
            stop_grad_primary: self.stop_grad_primary,
            per_batch_scale: self.per_batch_scale,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss_config().validate()?;
        self.optim.validate()?;
        if self.batch_size == 0 || self.eval_every == 0 || self.val_rows == 0 {
            return Err(invalid("batch size, evaluation interval and validation rows must be positive"));
        }
        if self.mode == TrainMode::Shortcut {
            shortcut_split(self.batch_size, self.shortcut_fraction)?;
        }
        Ok(())
    }

    /// Network evaluations charged per batch element per iteration.
    pub fn nfe_per_element(&self) -> f64 {
        match self.mode {
            TrainMode::RecFm => self.depth as f64,
            TrainMode::Fm => 1.0,
            // The 2d branch plus the two composition steps.
            TrainMode::Shortcut => (1.0 - self.shortcut_fraction) + 3.0 * self.shortcut_fraction,
        }
    }
}

/// Iteration count that gives a depth-`depth` run the evaluation budget of
/// `fm_iterations` flow-matching iterations.
pub fn matched_iterations(fm_iterations: usize, depth: usize) -> usize {
    fm_iterations / depth.max(1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurveRecord {
    pub iteration: usize,
    pub nfe: u64,
    pub loss: LossBreakdown,
    pub val_mse: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainRun {
    pub net: VelocityNet,
    pub curve: Vec<CurveRecord>,
    pub nfe: u64,
}

/// A run stopped by a non-finite loss or gradient.
#[derive(Clone, Debug)]
pub struct Diverged {
    pub iteration: usize,
    pub error: Error,
    /// Parameters before the failing update.
    pub last_good: VelocityNet,
    pub curve: Vec<CurveRecord>,
}

#[derive(Clone, Debug)]
pub enum TrainError {
    Invalid(Error),
    Diverged(Box<Diverged>),
}

impl From<Error> for TrainError {
    fn from(e: Error) -> Self {
        TrainError::Invalid(e)
    }
}

impl core::fmt::Display for TrainError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            TrainError::Invalid(e) => write!(f, "{e}"),
            TrainError::Diverged(d) => write!(f, "training diverged at iteration {}: {}", d.iteration, d.error),
        }
    }
}

/// Mean squared error per coordinate of the one-step prediction
/// `x1 - v(x1, 1, 1)` on validation rows, with noise fixed by `seed`.
pub fn one_step_val_mse<F: VelocityField>(field: &F, val: &TrainData, rows: usize, seed: u64) -> Result<f64> {
    let n = val.len().min(rows);
    let idx: Vec<usize> = (0..n).collect();
    let (x0, cond) = val.gather(&idx);
    let mut rng = seeded(seed);
    let x1 = Tensor::from_raw(x0.shape().to_vec(), normal_vec(&mut rng, x0.len()));
    let mut pred = x1.clone();
    pred.axpy(-1.0, &field.velocity_uniform(&x1, cond.as_ref(), 1.0, 1.0)?)?;
    Ok(pred.sub(&x0)?.sum_squares() / x0.len() as f64)
}

fn draw_batch(rng: &mut Rng, data: &TrainData, b: usize) -> Result<Batch> {
    let idx: Vec<usize> = (0..b).map(|_| rng.random_range(0..data.len())).collect();
    let (x0, cond) = data.gather(&idx);
    let x1 = Tensor::from_raw(x0.shape().to_vec(), normal_vec(rng, x0.len()));
    Batch::new(x0, x1, cond)
}

/// Train `net` in place of a fresh copy. Curve records are taken at
/// iteration 0, every `eval_every` iterations and after the last update;
/// each carries the loss of the batch at that iteration (before its update).
pub fn train(cfg: &TrainConfig, net: VelocityNet, data: &TrainData, val: Option<&TrainData>) -> core::result::Result<TrainRun, TrainError> {
    let cfg = cfg.clone().normalized();
    cfg.validate()?;
    if data.state_dim() != net.cfg.state_dim || data.cond_dim() != net.cfg.cond_dim {
        return Err(invalid(format!(
            "data has state/cond widths {}/{}, network expects {}/{}",
            data.state_dim(),
            data.cond_dim(),
            net.cfg.state_dim,
            net.cfg.cond_dim
        ))
        .into());
    }
    let mut net = net;
    let mut rng = seeded(cfg.seed);
    let val_seed = derive_seed(cfg.seed, 0x7661_6c);
    let loss_cfg = cfg.loss_config();
    let per_iter = (cfg.nfe_per_element() * cfg.batch_size as f64) as u64;
    let mut curve = Vec::new();
    let mut nfe = 0u64;

    let record = |net: &VelocityNet, iteration: usize, nfe: u64, loss: LossBreakdown| -> Result<CurveRecord> {
        let val_mse = val.map(|v| one_step_val_mse(net, v, cfg.val_rows, val_seed)).transpose()?;
        Ok(CurveRecord {
            iteration,
            nfe,
            loss,
            val_mse,
        })
    };

    for it in 0..cfg.iterations {
        let batch = draw_batch(&mut rng, data, cfg.batch_size)?;
        let step = match cfg.mode {
            TrainMode::Shortcut => {
                let d = SHORTCUT_STEPS[rng.random_range(0..SHORTCUT_STEPS.len())];
                sample_shortcut_draws(&mut rng, batch.len(), d, cfg.shortcut_fraction)
                    .and_then(|draws| shortcut_loss_and_grads(&net, &batch, &draws))
            }
            _ => {
                let draws = sample_draws(&mut rng, batch.len(), &loss_cfg);
                recfm_loss_and_grads(&net, &batch, &draws, &loss_cfg)
            }
        };
        let diverged = |error: Error, net: &VelocityNet, curve: Vec<CurveRecord>| {
            TrainError::Diverged(Box::new(Diverged {
                iteration: it,
                error,
                last_good: net.clone(),
                curve,
            }))
        };
        let (mut loss, grads) = match step {
            Ok(v) => v,
            Err(e @ (Error::NonFinite(_) | Error::NonFiniteNode { .. })) => return Err(diverged(e, &net, curve)),
            Err(e) => return Err(e.into()),
        };
        if cfg.mode == TrainMode::Fm {
            loss.mode = TrainMode::Fm;
        }
        if it % cfg.eval_every == 0 {
            curve.push(record(&net, it, nfe, loss.clone())?);
        }
        let before = net.params.clone();
        if let Err(e) = cfg.optim.step(&mut net.params, &grads) {
            return Err(diverged(e, &net, curve));
        }
        if net.params.tensors.values().any(|t| !t.is_finite()) {
            net.params = before;
            return Err(diverged(Error::NonFinite("parameters".into()), &net, curve));
        }
        nfe += per_iter;
        if it + 1 == cfg.iterations {
            curve.push(record(&net, it + 1, nfe, loss)?);
        }
    }
    Ok(TrainRun { net, curve, nfe })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::datasets::make_gaussian_pairs;
    use crate::model::{Activation, ModelConfig, PointwiseField};

    fn batch(b: usize, d: usize, seed: u64) -> Batch {
        let mut rng = seeded(seed);
        Batch::new(
            Tensor::matrix(b, d, normal_vec(&mut rng, b * d)).unwrap(),
            Tensor::matrix(b, d, normal_vec(&mut rng, b * d)).unwrap(),
            None,
        )
        .unwrap()
    }

    /// Returns `alpha * v*` of the element whose `x_t` it sees; valid for a
    /// fixed batch with known draws.
    fn oracle_for<'a>(b: &'a Batch, draws: &'a Draws) -> impl VelocityField + 'a {
        PointwiseField::new(b.x0.cols(), move |x: &[f64], _t, a, out: &mut [f64]| {
            let r = (0..b.len())
                .find(|&r| {
                    let t = draws.t[r];
                    b.x0.row(r).iter().zip(b.x1.row(r)).zip(x).all(|((p, q), v)| ((1.0 - t) * p + t * q) == *v)
                })
                .expect("row of x_t");
            for ((o, p), q) in out.iter_mut().zip(b.x0.row(r)).zip(b.x1.row(r)) {
                *o = a * (q - p);
            }
        })
    }

    #[test]
    fn oracle_network_has_zero_loss() {
        let b = batch(6, 3, 1);
        let cfg = LossConfig::recfm(3, 1.0);
        let draws = sample_draws(&mut seeded(2), 6, &cfg);
        let l = recfm_loss_with_draws(&oracle_for(&b, &draws), &b, &draws, &cfg).unwrap();
        assert!(l.total.abs() < 1e-24, "{l:?}");
        assert_eq!(l.traj.len(), 3);
        assert_eq!(l.cons.len(), 2);
    }

    #[test]
    fn depth_one_is_flow_matching_bitwise() {
        let b = batch(8, 2, 3);
        let field = PointwiseField::new(2, |x: &[f64], t, a, o: &mut [f64]| {
            o[0] = x[0] * t + a;
            o[1] = x[1] - t;
        });
        let fm = vanilla_fm_loss(&field, &b, &mut seeded(4)).unwrap();
        let rec = recfm_loss(&field, &b, &mut seeded(4), &LossConfig::recfm(1, 5.0)).unwrap();
        assert_eq!(fm.total.to_bits(), rec.total.to_bits());
        assert!(rec.cons.is_empty());
    }

    #[test]
    fn zero_network_on_fixed_pair() {
        let b = Batch::new(
            Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap(),
            Tensor::matrix(1, 2, vec![4.0, -2.0]).unwrap(),
            None,
        )
        .unwrap();
        let zero = PointwiseField::new(2, |_: &[f64], _, _, o: &mut [f64]| o.fill(0.0));
        let l = vanilla_fm_loss(&zero, &b, &mut seeded(0)).unwrap();
        assert_eq!(l.total, 25.0);
    }

    #[test]
    fn hand_evaluated_depth_two_case() {
        // v^(1) = v*, v^(2) = 0: both the trajectory and consistency terms
        // of the second trajectory equal alpha^2 |v*|^2.
        let b = batch(5, 3, 7);
        let cfg = LossConfig::recfm(2, 1.0);
        let draws = sample_draws(&mut seeded(8), 5, &cfg);
        let oracle = oracle_for(&b, &draws);
        let field = PointwiseField::new(3, |x: &[f64], t, a, o: &mut [f64]| {
            if a == 1.0 {
                let xb = Tensor::matrix(1, 3, x.to_vec()).unwrap();
                let v = oracle.velocity(&xb, None, &[t], &[1.0]).unwrap();
                o.copy_from_slice(v.data());
            } else {
                o.fill(0.0);
            }
        });
        let l = recfm_loss_with_draws(&field, &b, &draws, &cfg).unwrap();
        let vstar = b.x1.sub(&b.x0).unwrap();
        let expect: f64 = (0..5).map(|r| 2.0 * draws.alpha[r].powi(2) * vstar.row(r).iter().map(|v| v * v).sum::<f64>()).sum::<f64>() / 5.0;
        assert!((l.total - expect).abs() < 1e-12 * expect, "{} vs {expect}", l.total);
        assert_eq!(l.traj[0], 0.0);
    }

    fn small_net(seed: u64) -> VelocityNet {
        VelocityNet::new(ModelConfig {
            state_dim: 2,
            cond_dim: 0,
            hidden: vec![6, 6],
            activation: Activation::Tanh,
            embed_dim: 4,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn unit_scale_makes_consistency_vanish_exactly() {
        let net = small_net(1);
        let b = batch(4, 2, 2);
        let draws = Draws {
            t: vec![0.1, 0.5, 0.7, 0.99],
            alpha: vec![1.0; 4],
        };
        let cfg = LossConfig::recfm(2, 1.0);
        let (l, _) = recfm_loss_and_grads(&net, &b, &draws, &cfg).unwrap();
        assert_eq!(l.cons[0], 0.0);
        assert_eq!(recfm_loss_with_draws(&net, &b, &draws, &cfg).unwrap().cons[0], 0.0);
    }

    #[test]
    fn graph_path_matches_value_path_and_additivity() {
        let net = small_net(3);
        let b = batch(7, 2, 4);
        for cfg in [LossConfig::recfm(1, 0.0), LossConfig::recfm(2, 1.0), LossConfig::recfm(3, 0.3)] {
            let draws = sample_draws(&mut seeded(5), 7, &cfg);
            let (lg, _) = recfm_loss_and_grads(&net, &b, &draws, &cfg).unwrap();
            let lv = recfm_loss_with_draws(&net, &b, &draws, &cfg).unwrap();
            assert_eq!(lg, lv);
            let sum = lg.traj.iter().sum::<f64>() + cfg.lambda * lg.cons.iter().sum::<f64>();
            assert!((lg.total - sum).abs() <= 1e-12);
        }
    }

    /// Worst relative error of the graph gradients against central
    /// differences of the value path.
    fn total_loss_graph_check(cfg: LossConfig) -> f64 {
        let net = small_net(9);
        let b = batch(4, 2, 10);
        let draws = sample_draws(&mut seeded(11), 4, &cfg);
        let (_, grads) = recfm_loss_and_grads(&net, &b, &draws, &cfg).unwrap();
        let mut worst: f64 = 0.0;
        for (name, g) in &grads {
            for k in 0..g.len() {
                let eps = 1e-6;
                let eval = |delta: f64| {
                    let mut n2 = net.clone();
                    let t = n2.params.tensors.get_mut(name).unwrap();
                    let mut d = t.data().to_vec();
                    d[k] += delta;
                    *t = Tensor::new(t.shape().to_vec(), d).unwrap();
                    recfm_loss_with_draws(&n2, &b, &draws, &cfg).unwrap().total
                };
                let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
                let ad = g.data()[k];
                worst = worst.max((ad - fd).abs() / 1f64.max(ad.abs()).max(fd.abs()));
            }
        }
        worst
    }

    #[test]
    fn total_loss_gradient_passes_finite_differences() {
        for cfg in [LossConfig::recfm(2, 1.0), LossConfig::recfm(3, 0.5)] {
            let err = total_loss_graph_check(cfg);
            assert!(err <= 1e-5, "{err}");
        }
    }

    #[test]
    fn stop_grad_changes_only_gradients() {
        let net = small_net(12);
        let b = batch(4, 2, 13);
        let mut cfg = LossConfig::recfm(2, 1.0);
        let draws = sample_draws(&mut seeded(14), 4, &cfg);
        let (l1, g1) = recfm_loss_and_grads(&net, &b, &draws, &cfg).unwrap();
        cfg.stop_grad_primary = true;
        let (l2, g2) = recfm_loss_and_grads(&net, &b, &draws, &cfg).unwrap();
        assert_eq!(l1, l2);
        assert_ne!(g1, g2);
    }

    #[test]
    fn scale_consistent_field_has_no_consistency_loss() {
        let (pairs, oracle) = make_gaussian_pairs(64, 2, 1).unwrap();
        let b = Batch::new(pairs.x0, pairs.x1, None).unwrap();
        let l = recfm_loss(&oracle, &b, &mut seeded(3), &LossConfig::recfm(2, 1.0)).unwrap();
        assert!(l.cons[0] <= 1e-12, "{l:?}");
    }

    #[test]
    fn per_batch_draws_are_shared() {
        let mut cfg = LossConfig::recfm(2, 1.0);
        cfg.per_batch_scale = true;
        let d = sample_draws(&mut seeded(1), 5, &cfg);
        assert!(d.t.iter().all(|&t| t == d.t[0]));
        assert!(d.alpha.iter().all(|&a| a == d.alpha[0]));
    }

    #[test]
    fn shortcut_constant_field_composes_exactly() {
        let b = batch(8, 2, 1);
        let field = PointwiseField::new(2, |_: &[f64], _, _, o: &mut [f64]| {
            o[0] = 0.5;
            o[1] = -2.0;
        });
        for d in [0.5, 0.125, 1.0 / 64.0] {
            let l = shortcut_loss(&field, &b, &mut seeded(2), d, 0.25).unwrap();
            assert_eq!(l.cons[0], 0.0);
        }
        assert!(shortcut_loss(&field, &b, &mut seeded(2), 0.0, 0.25).is_err());
        assert!(shortcut_loss(&field, &b, &mut seeded(2), 0.6, 0.25).is_err());
    }

    #[test]
    fn shortcut_residual_is_second_order_and_positive_when_curved() {
        // Ignores the step slot, curved in x.
        let field = PointwiseField::new(1, |x: &[f64], _, _, o: &mut [f64]| o[0] = x[0] * x[0]);
        let x = Tensor::matrix(1, 1, vec![0.7]).unwrap();
        let resid = |d: f64| {
            let z = two_step_composition(&field, &x, None, &[0.1], d).unwrap();
            let single = 0.7 + 2.0 * d * 0.49;
            (single - z.data()[0]).abs()
        };
        let (r1, r2) = (resid(1e-2), resid(5e-3));
        assert!(r1 > 0.0);
        let slope = libm::log(r1 / r2) / libm::log(2.0);
        assert!((slope - 2.0).abs() < 0.05, "{slope}");
    }

    #[test]
    fn shortcut_graph_matches_value_path() {
        let net = small_net(5);
        let b = batch(8, 2, 6);
        let draws = sample_shortcut_draws(&mut seeded(7), 8, 0.125, 0.25).unwrap();
        let (lg, grads) = shortcut_loss_and_grads(&net, &b, &draws).unwrap();
        let lv = shortcut_loss_with_draws(&net, &b, &draws).unwrap();
        assert_eq!(lg, lv);
        assert!(grads.values().any(|g| g.max_abs() > 0.0));
    }

    #[test]
    fn graph_loss_grad_check_on_small_batch() {
        // Graph-level check through the public checker on the flow-matching
        // term of a 4-row batch.
        let net = small_net(21);
        let mut g = Graph::new();
        let nodes = NetNodes::declare(&net.cfg, &mut g).unwrap();
        let x = g.input("x", &[4, net.cfg.input_dim()]).unwrap();
        let y = g.input("y", &[4, 2]).unwrap();
        let v = nodes.apply(&mut g, x).unwrap();
        let loss = sq_norm_mean_node(&mut g, v, y, 4).unwrap();
        let b = batch(4, 2, 22);
        let input = net.assemble_input(&b.x0, None, &[0.1, 0.2, 0.3, 0.4], &[1.0; 4]);
        let mut bind = Bindings::new();
        net.params.bind_into(&mut bind);
        bind.bind("x", &input).bind("y", &b.x1);
        assert!(grad_check(&g, &bind, loss, 1e-6).unwrap().max_rel_err <= 1e-5);
    }

    fn gaussian_data(n: usize, seed: u64) -> TrainData {
        let (p, _) = make_gaussian_pairs(n, 1, seed).unwrap();
        TrainData::new(p.x0, None).unwrap()
    }

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            state_dim: 1,
            cond_dim: 0,
            hidden: vec![16, 16],
            activation: Activation::Tanh,
            embed_dim: 4,
            seed: 3,
        }
    }

    #[test]
    fn zero_iterations_returns_init() {
        let net = VelocityNet::new(tiny_cfg()).unwrap();
        let run = train(&TrainConfig::fm(0, 1), net.clone(), &gaussian_data(100, 1), None).unwrap();
        assert_eq!(run.net, net);
        assert!(run.curve.is_empty());
    }

    #[test]
    fn same_seed_same_curve_and_nfe_accounting() {
        let data = gaussian_data(500, 2);
        let mut cfg = TrainConfig::recfm(30, 4);
        cfg.batch_size = 16;
        cfg.eval_every = 10;
        let a = train(&cfg, VelocityNet::new(tiny_cfg()).unwrap(), &data, Some(&data)).unwrap();
        let b = train(&cfg, VelocityNet::new(tiny_cfg()).unwrap(), &data, Some(&data)).unwrap();
        assert_eq!(a.curve, b.curve);
        assert_eq!(a.nfe, 30 * 16 * 2);
        assert_eq!(a.curve.iter().map(|r| r.iteration).collect::<Vec<_>>(), [0, 10, 20, 30]);
        assert_eq!(a.curve[1].nfe, 10 * 16 * 2);
    }

    #[test]
    fn lambda_zero_depth_two_beats_init() {
        let data = gaussian_data(2000, 5);
        let val = gaussian_data(500, 6);
        let mut cfg = TrainConfig::recfm(400, 7);
        cfg.lambda = 0.0;
        cfg.batch_size = 32;
        cfg.optim.lr = 2e-3;
        cfg.eval_every = 40;
        let run = train(&cfg, VelocityNet::new(tiny_cfg()).unwrap(), &data, Some(&val)).unwrap();
        let first = run.curve.first().unwrap().val_mse.unwrap();
        let last = run.curve.last().unwrap().val_mse.unwrap();
        assert!(last < first, "{first} -> {last}");
        // Smoke-level trend on the training loss.
        let losses: Vec<f64> = run.curve.iter().map(|r| r.loss.total).collect();
        let k = (losses.len() / 10).max(1);
        let med = |s: &[f64]| {
            let mut v = s.to_vec();
            v.sort_by(f64::total_cmp);
            v[v.len() / 2]
        };
        assert!(med(&losses[losses.len() - k..]) < med(&losses[..k]));
    }

    #[test]
    fn divergence_returns_last_good_parameters() {
        let data = gaussian_data(100, 1);
        let mut cfg = TrainConfig::fm(50, 1);
        cfg.optim.lr = 1e300;
        cfg.optim.weight_decay = 0.0;
        cfg.batch_size = 8;
        match train(&cfg, VelocityNet::new(tiny_cfg()).unwrap(), &data, None) {
            Err(TrainError::Diverged(d)) => {
                assert!(d.last_good.params.tensors.values().all(Tensor::is_finite));
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn fm_mode_pins_depth_and_weight() {
        let mut cfg = TrainConfig::fm(1, 0);
        cfg.depth = 4;
        cfg.lambda = 3.0;
        let n = cfg.normalized();
        assert_eq!((n.depth, n.lambda), (1, 0.0));
        assert_eq!(matched_iterations(1000, 2), 500);
    }
}
