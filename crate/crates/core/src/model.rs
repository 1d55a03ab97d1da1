//! Velocity fields `v(x, t, alpha)`.
//!
//! [`VelocityField`] is the interface every sampler and verification routine
//! consumes. [`VelocityNet`] is the trainable MLP: its input row is
//! `[x, cond, embed(t), embed(alpha)]` and its output has the state width.
//! Conditioning frames are inputs only; the flow transports the state.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::Cell;
use core::f64::consts::PI;

use rand::Rng as _;

use crate::autodiff::{gelu, Bindings, Graph, NodeId};
use crate::error::{invalid, Error, Result};
use crate::rng::seeded;
use crate::tensor::{gemm, Tensor};

/// A batched velocity field. `x` is `[B, state_dim]`, `cond` is
/// `[B, cond_dim]` when the field is conditioned, and `t`, `alpha` carry one
/// value per row.
pub trait VelocityField {
    fn state_dim(&self) -> usize;

    fn cond_dim(&self) -> usize {
        0
    }

    fn velocity(&self, x: &Tensor, cond: Option<&Tensor>, t: &[f64], alpha: &[f64]) -> Result<Tensor>;

    /// Same `t` and `alpha` for every row.
    fn velocity_uniform(&self, x: &Tensor, cond: Option<&Tensor>, t: f64, alpha: f64) -> Result<Tensor> {
        let b = x.rows();
        self.velocity(x, cond, &vec![t; b], &vec![alpha; b])
    }
}

impl<F: VelocityField + ?Sized> VelocityField for &F {
    fn state_dim(&self) -> usize {
        (**self).state_dim()
    }
    fn cond_dim(&self) -> usize {
        (**self).cond_dim()
    }
    fn velocity(&self, x: &Tensor, cond: Option<&Tensor>, t: &[f64], alpha: &[f64]) -> Result<Tensor> {
        (**self).velocity(x, cond, t, alpha)
    }
}

pub(crate) fn check_batch(field: &dyn VelocityField, x: &Tensor, cond: Option<&Tensor>, t: &[f64], alpha: &[f64]) -> Result<()> {
    if x.rank() != 2 || x.cols() != field.state_dim() {
        return Err(Error::ShapeMismatch {
            op: "velocity",
            expected: vec![x.rows(), field.state_dim()],
            found: x.shape().to_vec(),
        });
    }
    let b = x.rows();
    if t.len() != b || alpha.len() != b {
        return Err(invalid(format!("{b} rows but {} times and {} scales", t.len(), alpha.len())));
    }
    match (field.cond_dim(), cond) {
        (0, None) => Ok(()),
        (0, Some(c)) => Err(invalid(format!("unconditioned field given conditioning of shape {:?}", c.shape()))),
        (d, None) => Err(invalid(format!("field expects {d} conditioning columns"))),
        (d, Some(c)) if c.rank() == 2 && c.rows() == b && c.cols() == d => Ok(()),
        (d, Some(c)) => Err(Error::ShapeMismatch {
            op: "velocity conditioning",
            expected: vec![b, d],
            found: c.shape().to_vec(),
        }),
    }
}

/// Field defined row-by-row by a closure `f(x_row, t, alpha, out_row)`;
/// used for analytic oracles and hand-built test fields.
pub struct PointwiseField<F> {
    dim: usize,
    f: F,
}

impl<F: Fn(&[f64], f64, f64, &mut [f64])> PointwiseField<F> {
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F: Fn(&[f64], f64, f64, &mut [f64])> VelocityField for PointwiseField<F> {
    fn state_dim(&self) -> usize {
        self.dim
    }

    fn velocity(&self, x: &Tensor, cond: Option<&Tensor>, t: &[f64], alpha: &[f64]) -> Result<Tensor> {
        check_batch(self, x, cond, t, alpha)?;
        let mut out = vec![0.0; x.len()];
        for (r, row) in out.chunks_exact_mut(self.dim).enumerate() {
            (self.f)(x.row(r), t[r], alpha[r], row);
        }
        let out = Tensor::from_raw(x.shape().to_vec(), out);
        ensure_finite(out, "pointwise field")
    }
}

pub(crate) fn ensure_finite(t: Tensor, what: &str) -> Result<Tensor> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(Error::NonFinite(what.into()))
    }
}

/// Counts batched forward passes of the wrapped field.
pub struct CountingField<F> {
    inner: F,
    calls: Cell<usize>,
}

impl<F: VelocityField> CountingField<F> {
    pub fn new(inner: F) -> Self {
        Self {
            inner,
            calls: Cell::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.get()
    }
}

impl<F: VelocityField> VelocityField for CountingField<F> {
    fn state_dim(&self) -> usize {
        self.inner.state_dim()
    }
    fn cond_dim(&self) -> usize {
        self.inner.cond_dim()
    }
    fn velocity(&self, x: &Tensor, cond: Option<&Tensor>, t: &[f64], alpha: &[f64]) -> Result<Tensor> {
        self.calls.set(self.calls.get() + 1);
        self.inner.velocity(x, cond, t, alpha)
    }
}

/// Sinusoidal features of `s` at frequencies `pi * 2^k`, `k = 0..dim/2`:
/// all sines first, then all cosines. The `k = 0` pair alone maps `[0, 1]`
/// injectively onto a half circle.
pub fn embed_scalar(s: f64, dim: usize) -> Result<Tensor> {
    if dim < 2 || dim % 2 != 0 {
        return Err(invalid(format!("embedding width {dim} must be even and at least 2")));
    }
    let mut out = vec![0.0; dim];
    write_embedding(s, &mut out);
    Tensor::vector(out)
}

fn write_embedding(s: f64, out: &mut [f64]) {
    let half = out.len() / 2;
    let mut freq = PI;
    for k in 0..half {
        out[k] = libm::sin(freq * s);
        out[half + k] = libm::cos(freq * s);
        freq *= 2.0;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Gelu,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Gelu => "gelu",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "gelu" => Ok(Activation::Gelu),
            other => Err(invalid(format!("unknown activation `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub state_dim: usize,
    pub cond_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Embedding width used for each of `t` and `alpha`.
    pub embed_dim: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Three tanh layers of width 256 with 8-wide time and scale embeddings.
    pub fn desk(state_dim: usize, cond_dim: usize, seed: u64) -> Self {
        Self {
            state_dim,
            cond_dim,
            hidden: vec![256, 256, 256],
            activation: Activation::Tanh,
            embed_dim: 8,
            seed,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.state_dim + self.cond_dim + 2 * self.embed_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.state_dim == 0 {
            return Err(invalid("state dimension must be positive"));
        }
        if self.hidden.is_empty() {
            return Err(invalid("at least one hidden layer is required"));
        }
        if self.hidden.contains(&0) {
            return Err(invalid("hidden widths must be positive"));
        }
        if self.embed_dim < 2 || self.embed_dim % 2 != 0 {
            return Err(invalid(format!("embedding width {} must be even and at least 2", self.embed_dim)));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of each affine layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut prev = self.input_dim();
        for &h in &self.hidden {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.state_dim));
        dims
    }
}

pub fn weight_name(layer: usize) -> String {
    format!("layer{layer}.weight")
}

pub fn bias_name(layer: usize) -> String {
    format!("layer{layer}.bias")
}

/// Trainable tensors plus AdamW moment buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    pub tensors: BTreeMap<String, Tensor>,
    pub first_moment: BTreeMap<String, Tensor>,
    pub second_moment: BTreeMap<String, Tensor>,
    pub step: u64,
}

impl ParamSet {
    pub fn from_tensors(tensors: BTreeMap<String, Tensor>) -> Self {
        let zeros = |m: &BTreeMap<String, Tensor>| m.iter().map(|(k, v)| (k.clone(), Tensor::zeros(v.shape()))).collect();
        Self {
            first_moment: zeros(&tensors),
            second_moment: zeros(&tensors),
            tensors,
            step: 0,
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| invalid(format!("missing parameter `{name}`")))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn bind_into<'a>(&'a self, bindings: &mut Bindings<'a>) {
        for (name, t) in &self.tensors {
            bindings.bind(name.clone(), t);
        }
    }
}

/// Weights uniform on `±sqrt(3 / fan_in)` (standard deviation
/// `1 / sqrt(fan_in)`), biases zero.
pub fn init_params(cfg: &ModelConfig) -> Result<ParamSet> {
    cfg.validate()?;
    let mut rng = seeded(cfg.seed);
    let mut tensors = BTreeMap::new();
    for (i, (fan_in, fan_out)) in cfg.layer_dims().into_iter().enumerate() {
        let bound = libm::sqrt(3.0 / fan_in as f64);
        let w: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
        tensors.insert(weight_name(i), Tensor::from_raw(vec![fan_in, fan_out], w));
        tensors.insert(bias_name(i), Tensor::zeros(&[fan_out]));
    }
    Ok(ParamSet::from_tensors(tensors))
}

#[derive(Clone, Debug, PartialEq)]
pub struct VelocityNet {
    pub cfg: ModelConfig,
    pub params: ParamSet,
}

/// Parameter leaves of one network inside a graph; several applications of
/// the network share them.
#[derive(Clone, Debug)]
pub struct NetNodes {
    layers: Vec<(NodeId, NodeId)>,
    activation: Activation,
}

impl NetNodes {
    pub fn declare(cfg: &ModelConfig, g: &mut Graph) -> Result<Self> {
        let layers = cfg
            .layer_dims()
            .into_iter()
            .enumerate()
            .map(|(i, (fi, fo))| Ok((g.param(&weight_name(i), &[fi, fo])?, g.param(&bias_name(i), &[fo])?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            layers,
            activation: cfg.activation,
        })
    }

    /// Append the network applied to an assembled input node `[B, input_dim]`.
    pub fn apply(&self, g: &mut Graph, input: NodeId) -> Result<NodeId> {
        let mut h = input;
        let last = self.layers.len() - 1;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            h = g.affine(h, w, b)?;
            if i < last {
                h = match self.activation {
                    Activation::Tanh => g.tanh(h),
                    Activation::Gelu => g.gelu(h),
                };
            }
        }
        Ok(h)
    }
}

/// `[B, embed_dim]` embedding rows of `values`.
pub fn embed_rows(values: &[f64], dim: usize) -> Tensor {
    let mut out = vec![0.0; values.len() * dim];
    for (row, &s) in out.chunks_exact_mut(dim).zip(values) {
        write_embedding(s, row);
    }
    Tensor::from_raw(vec![values.len(), dim], out)
}

impl VelocityNet {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        let params = init_params(&cfg)?;
        Ok(Self { cfg, params })
    }

    pub fn from_parts(cfg: ModelConfig, params: ParamSet) -> Result<Self> {
        cfg.validate()?;
        for (i, (fi, fo)) in cfg.layer_dims().into_iter().enumerate() {
            for (name, shape) in [(weight_name(i), vec![fi, fo]), (bias_name(i), vec![fo])] {
                let t = params.get(&name)?;
                if t.shape() != shape.as_slice() {
                    return Err(Error::ShapeMismatch {
                        op: "checkpoint",
                        expected: shape,
                        found: t.shape().to_vec(),
                    });
                }
            }
        }
        Ok(Self { cfg, params })
    }

    /// Input rows `[x, cond, embed(t), embed(alpha)]`.
    pub fn assemble_input(&self, x: &Tensor, cond: Option<&Tensor>, t: &[f64], alpha: &[f64]) -> Tensor {
        let e = self.cfg.embed_dim;
        let b = x.rows();
        let width = self.cfg.input_dim();
        let mut out = Vec::with_capacity(b * width);
        let mut emb = vec![0.0; e];
        for r in 0..b {
            out.extend_from_slice(x.row(r));
            if let Some(c) = cond {
                out.extend_from_slice(c.row(r));
            }
            write_embedding(t[r], &mut emb);
            out.extend_from_slice(&emb);
            write_embedding(alpha[r], &mut emb);
            out.extend_from_slice(&emb);
        }
        Tensor::from_raw(vec![b, width], out)
    }

    fn forward_rows(&self, input: &Tensor) -> Result<Tensor> {
        let dims = self.cfg.layer_dims();
        let last = dims.len() - 1;
        let m = input.rows();
        let mut h = input.clone();
        for (i, (k, n)) in dims.into_iter().enumerate() {
            let w = self.params.get(&weight_name(i))?;
            let b = self.params.get(&bias_name(i))?;
            let mut out = Vec::with_capacity(m * n);
            for _ in 0..m {
                out.extend_from_slice(b.data());
            }
            gemm(m, k, n, h.data(), false, w.data(), false, &mut out, 1.0);
            let mut next = Tensor::from_raw(vec![m, n], out);
            if i < last {
                next = match self.cfg.activation {
                    Activation::Tanh => next.map(libm::tanh),
                    Activation::Gelu => next.map(gelu),
                };
            }
            h = next;
        }
        Ok(h)
    }
}

impl VelocityField for VelocityNet {
    fn state_dim(&self) -> usize {
        self.cfg.state_dim
    }

    fn cond_dim(&self) -> usize {
        self.cfg.cond_dim
    }

    fn velocity(&self, x: &Tensor, cond: Option<&Tensor>, t: &[f64], alpha: &[f64]) -> Result<Tensor> {
        check_batch(self, x, cond, t, alpha)?;
        let input = self.assemble_input(x, cond, t, alpha);
        ensure_finite(self.forward_rows(&input)?, "network output")
    }
}

/// `v(x, t, alpha)` for a single time and scale. `x` may be a single state
/// `[state_dim]` or a batch `[B, state_dim]`; the output has the same shape.
pub fn predict_velocity(net: &VelocityNet, x: &Tensor, cond: Option<&Tensor>, t: f64, alpha: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&t) || !(0.0..=1.0).contains(&alpha) {
        return Err(invalid(format!("t = {t} and alpha = {alpha} must lie in [0, 1]")));
    }
    let single = x.rank() == 1;
    let as_batch = |v: &Tensor| -> Result<Tensor> {
        if v.rank() == 1 {
            v.clone().reshape(&[1, v.len()])
        } else {
            Ok(v.clone())
        }
    };
    let xb = as_batch(x)?;
    let cb = cond.map(as_batch).transpose()?;
    let out = net.velocity_uniform(&xb, cb.as_ref(), t, alpha)?;
    if single {
        out.reshape(x.shape())
    } else {
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::rng::normal_vec;

    fn small_cfg(seed: u64) -> ModelConfig {
        ModelConfig {
            state_dim: 3,
            cond_dim: 2,
            hidden: vec![8, 8],
            activation: Activation::Tanh,
            embed_dim: 4,
            seed,
        }
    }

    #[test]
    fn init_is_deterministic_and_validated() {
        let cfg = small_cfg(9);
        assert_eq!(init_params(&cfg).unwrap(), init_params(&cfg).unwrap());
        let mut bad = cfg.clone();
        bad.hidden.clear();
        assert!(init_params(&bad).is_err());
        bad = cfg;
        bad.embed_dim = 3;
        assert!(init_params(&bad).is_err());
    }

    #[test]
    fn init_weight_std_matches_fan_in_law() {
        let cfg = ModelConfig {
            state_dim: 100 - 2 * 2,
            cond_dim: 0,
            hidden: vec![400],
            activation: Activation::Tanh,
            embed_dim: 2,
            seed: 1,
        };
        let p = init_params(&cfg).unwrap();
        let w = p.get("layer0.weight").unwrap();
        assert_eq!(w.shape()[0], 100);
        let mean = w.mean();
        let var = w.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w.len() as f64;
        let std = libm::sqrt(var);
        assert!((std - 0.1).abs() < 0.01, "{std}");
        assert!(p.get("layer0.bias").unwrap().data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn embedding_examples() {
        let e0 = embed_scalar(0.0, 8).unwrap();
        assert_eq!(&e0.data()[..4], &[0.0; 4]);
        assert_eq!(&e0.data()[4..], &[1.0; 4]);
        // Base frequency pi: cos(0) = 1 versus cos(pi) = -1.
        let e1 = embed_scalar(1.0, 8).unwrap();
        assert!((e1.data()[4] + 1.0).abs() < 1e-15);
        assert!(embed_scalar(0.5, 3).is_err());
        let mut rng = seeded(2);
        for _ in 0..1000 {
            let s: f64 = rng.random();
            let e = embed_scalar(s, 16).unwrap();
            assert!(e.data().iter().all(|v| v.is_finite() && v.abs() <= 1.0));
        }
    }

    #[test]
    fn output_shape_matches_state() {
        let net = VelocityNet::new(small_cfg(3)).unwrap();
        let x = Tensor::vector(vec![0.1, 0.2, 0.3]).unwrap();
        let c = Tensor::vector(vec![1.0, -1.0]).unwrap();
        assert_eq!(predict_velocity(&net, &x, Some(&c), 0.3, 1.0).unwrap().shape(), &[3]);
        let xb = Tensor::matrix(2, 3, vec![0.0; 6]).unwrap();
        let cb = Tensor::matrix(2, 2, vec![0.0; 4]).unwrap();
        assert_eq!(predict_velocity(&net, &xb, Some(&cb), 0.3, 1.0).unwrap().shape(), &[2, 3]);
        assert!(predict_velocity(&net, &xb, None, 0.3, 1.0).is_err());
        assert!(predict_velocity(&net, &Tensor::vector(vec![0.0; 4]).unwrap(), Some(&c), 0.3, 1.0).is_err());
    }

    fn graph_for(net: &VelocityNet, b: usize) -> (Graph, NodeId, NodeId) {
        let mut g = Graph::new();
        let nodes = NetNodes::declare(&net.cfg, &mut g).unwrap();
        let x = g.input("x", &[b, net.cfg.input_dim()]).unwrap();
        let v = nodes.apply(&mut g, x).unwrap();
        let sq = g.square(v);
        let loss = g.mean(sq);
        (g, v, loss)
    }

    #[test]
    fn graph_and_direct_forward_agree_bitwise() {
        let net = VelocityNet::new(small_cfg(4)).unwrap();
        let mut rng = seeded(8);
        let x = Tensor::matrix(5, 3, normal_vec(&mut rng, 15)).unwrap();
        let c = Tensor::matrix(5, 2, normal_vec(&mut rng, 10)).unwrap();
        let t = [0.1, 0.2, 0.5, 0.9, 1.0];
        let a = [1.0, 0.5, 0.7, 0.95, 1.0];
        let direct = net.velocity(&x, Some(&c), &t, &a).unwrap();
        let (g, v, _) = graph_for(&net, 5);
        let input = net.assemble_input(&x, Some(&c), &t, &a);
        let mut b = Bindings::new();
        net.params.bind_into(&mut b);
        b.bind("x", &input);
        let eval = g.forward(&b).unwrap();
        assert_eq!(eval.value(v), &direct);
    }

    #[test]
    fn parameter_gradients_pass_grad_check() {
        for act in [Activation::Tanh, Activation::Gelu] {
            let mut cfg = small_cfg(5);
            cfg.activation = act;
            let net = VelocityNet::new(cfg).unwrap();
            let mut rng = seeded(6);
            let x = Tensor::matrix(4, 3, normal_vec(&mut rng, 12)).unwrap();
            let c = Tensor::matrix(4, 2, normal_vec(&mut rng, 8)).unwrap();
            let input = net.assemble_input(&x, Some(&c), &[0.2, 0.4, 0.6, 0.8], &[1.0, 0.9, 0.8, 0.7]);
            let (g, _, loss) = graph_for(&net, 4);
            let mut b = Bindings::new();
            net.params.bind_into(&mut b);
            b.bind("x", &input);
            let report = grad_check(&g, &b, loss, 1e-6).unwrap();
            assert!(report.max_rel_err <= 1e-5, "{act:?}: {report:?}");
        }
    }

    #[test]
    fn output_depends_on_scale() {
        let net = VelocityNet::new(small_cfg(12)).unwrap();
        let mut rng = seeded(13);
        for _ in 0..20 {
            let x = Tensor::matrix(1, 3, normal_vec(&mut rng, 3)).unwrap();
            let c = Tensor::matrix(1, 2, normal_vec(&mut rng, 2)).unwrap();
            let t: f64 = rng.random();
            let a: f64 = rng.random_range(0.1..0.9);
            let v1 = net.velocity_uniform(&x, Some(&c), t, a).unwrap();
            let v2 = net.velocity_uniform(&x, Some(&c), t, a + 1e-3).unwrap();
            let diff = v1.sub(&v2).unwrap().max_abs() / 1e-3;
            assert!(diff > 1e-8, "{diff}");
        }
    }

    #[test]
    fn counting_field_counts_calls() {
        let f = CountingField::new(PointwiseField::new(1, |x: &[f64], _t, _a, o: &mut [f64]| o[0] = x[0]));
        let x = Tensor::matrix(2, 1, vec![1.0, 2.0]).unwrap();
        f.velocity_uniform(&x, None, 0.5, 1.0).unwrap();
        f.velocity_uniform(&x, None, 0.5, 1.0).unwrap();
        assert_eq!(f.calls(), 2);
    }
}
