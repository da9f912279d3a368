//! Named parameter storage and the small set of layers shared by the models.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{Graph, Tensor, Var};

/// Flat, lexicographically ordered table of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// Merge another store in; later names overwrite.
    pub fn extend(&mut self, other: ParamStore) {
        self.tensors.extend(other.tensors);
    }

    /// Place every tensor on `g` as a leaf.
    pub fn bind<'g>(&self, g: &'g Graph, trainable: bool) -> Bound<'g> {
        let vars = self.tensors.iter().map(|(k, t)| (k.clone(), g.leaf(t.clone(), trainable))).collect();
        Bound { vars }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Parameters of a [`ParamStore`] placed on a graph.
#[derive(Debug, Clone, Default)]
pub struct Bound<'g> {
    vars: BTreeMap<String, Var<'g>>,
}

impl<'g> Bound<'g> {
    pub fn var(&self, name: &str) -> Var<'g> {
        *self.vars.get(name).unwrap_or_else(|| panic!("missing parameter `{name}`"))
    }

    pub fn try_var(&self, name: &str) -> Option<Var<'g>> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var<'g>)> {
        self.vars.iter()
    }

    pub fn scope(&self, prefix: &str) -> Scope<'_, 'g> {
        Scope { bound: self, prefix: prefix.to_string() }
    }

    pub fn merge(mut self, other: Bound<'g>) -> Self {
        self.vars.extend(other.vars);
        self
    }
}

/// Prefixed view into a [`Bound`] set.
#[derive(Debug, Clone)]
pub struct Scope<'a, 'g> {
    bound: &'a Bound<'g>,
    prefix: String,
}

impl<'a, 'g> Scope<'a, 'g> {
    pub fn pp(&self, sub: impl std::fmt::Display) -> Scope<'a, 'g> {
        Scope { bound: self.bound, prefix: format!("{}.{sub}", self.prefix) }
    }

    pub fn var(&self, name: &str) -> Var<'g> {
        self.bound.var(&format!("{}.{name}", self.prefix))
    }

    pub fn try_var(&self, name: &str) -> Option<Var<'g>> {
        self.bound.try_var(&format!("{}.{name}", self.prefix))
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }
}

/// Seeded initializer writing into a [`ParamStore`] under a prefix.
pub struct Init<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng, prefix: &str) -> Self {
        Self { store, rng, prefix: prefix.to_string() }
    }

    pub fn pp(&mut self, sub: impl std::fmt::Display) -> Init<'_> {
        Init { store: self.store, rng: self.rng, prefix: format!("{}.{sub}", self.prefix) }
    }

    fn name(&self, n: &str) -> String {
        format!("{}.{n}", self.prefix)
    }

    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn uniform_fan_in(&mut self, name: &str, shape: &[usize], fan_in: usize) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
        let t = crate::autograd::tensor(shape, data);
        self.store.insert(self.name(name), t);
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut *self.rng);
                z * std
            })
            .collect();
        self.store.insert(self.name(name), crate::autograd::tensor(shape, data));
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) {
        self.store.insert(self.name(name), Tensor::zeros(ndarray::IxDyn(shape)));
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) {
        self.store.insert(self.name(name), Tensor::ones(ndarray::IxDyn(shape)));
    }

    /// Dense layer `[in, out]` weight with `[out]` bias.
    pub fn linear(&mut self, name: &str, d_in: usize, d_out: usize, bias: bool) {
        let mut s = self.pp(name);
        s.uniform_fan_in("weight", &[d_in, d_out], d_in);
        if bias {
            s.uniform_fan_in("bias", &[d_out], d_in);
        }
    }

    pub fn conv(&mut self, name: &str, c_in: usize, c_out: usize, k: usize) {
        let mut s = self.pp(name);
        let fan_in = c_in * k * k;
        s.uniform_fan_in("weight", &[c_out, c_in, k, k], fan_in);
        s.uniform_fan_in("bias", &[c_out], fan_in);
    }

    pub fn conv_zero(&mut self, name: &str, c_in: usize, c_out: usize, k: usize) {
        let mut s = self.pp(name);
        s.zeros("weight", &[c_out, c_in, k, k]);
        s.zeros("bias", &[c_out]);
    }

    pub fn layer_norm(&mut self, name: &str, d: usize) {
        let mut s = self.pp(name);
        s.ones("weight", &[d]);
        s.zeros("bias", &[d]);
    }
}

pub fn linear<'g>(s: &Scope<'_, 'g>, x: Var<'g>) -> Var<'g> {
    let y = x.matmul(s.var("weight"));
    match s.try_var("bias") {
        Some(b) => y + b,
        None => y,
    }
}

pub fn layer_norm<'g>(s: &Scope<'_, 'g>, x: Var<'g>) -> Var<'g> {
    x.layer_norm_last() * s.var("weight") + s.var("bias")
}

pub fn conv<'g>(s: &Scope<'_, 'g>, x: Var<'g>, stride: usize) -> Var<'g> {
    let w = s.var("weight");
    let k = w.dim(2);
    x.conv2d(w, Some(s.var("bias")), stride, k / 2)
}

/// Projection weights for one attention block. Projections carry no bias.
#[derive(Debug, Clone, Copy)]
pub struct AttnWeights<'g> {
    pub q: Var<'g>,
    pub k: Var<'g>,
    pub v: Var<'g>,
    pub o: Var<'g>,
}

impl<'g> AttnWeights<'g> {
    pub fn from_scope(s: &Scope<'_, 'g>) -> Self {
        Self { q: s.var("q.weight"), k: s.var("k.weight"), v: s.var("v.weight"), o: s.var("o.weight") }
    }
}

pub fn init_attention(init: &mut Init<'_>, name: &str, d_q: usize, d_kv: usize, d: usize) {
    let mut s = init.pp(name);
    s.linear("q", d_q, d, false);
    s.linear("k", d_kv, d, false);
    s.linear("v", d_kv, d, false);
    s.linear("o", d, d, false);
}

fn split_heads<'g>(x: Var<'g>, heads: usize) -> Var<'g> {
    let (n, t, d) = (x.dim(0), x.dim(1), x.dim(2));
    x.reshape(&[n, t, heads, d / heads]).permute(&[0, 2, 1, 3]).reshape(&[n * heads, t, d / heads])
}

/// Softmax attention probabilities `[N*heads, Tq, Tk]`.
pub fn attention_probs<'g>(w: &AttnWeights<'g>, q_in: Var<'g>, kv_in: Var<'g>, heads: usize) -> Var<'g> {
    let q = split_heads(q_in.matmul(w.q), heads);
    let k = split_heads(kv_in.matmul(w.k), heads);
    let dh = q.dim(2) as f64;
    q.bmm(k.transpose_last()).scale(1.0 / dh.sqrt()).softmax_last()
}

/// `softmax(Q K^T / sqrt(d_head)) V W_o` with `Q = q_in W_q`, `K = kv_in W_k`, `V = kv_in W_v`.
pub fn attention<'g>(w: &AttnWeights<'g>, q_in: Var<'g>, kv_in: Var<'g>, heads: usize) -> Var<'g> {
    let (n, tq) = (q_in.dim(0), q_in.dim(1));
    let p = attention_probs(w, q_in, kv_in, heads);
    let v = split_heads(kv_in.matmul(w.v), heads);
    let d = v.dim(2) * heads;
    let o = p.bmm(v).reshape(&[n, heads, tq, d / heads]).permute(&[0, 2, 1, 3]).reshape(&[n, tq, d]);
    o.matmul(w.o)
}

/// Sinusoidal embedding of (possibly fractional) timesteps, `[N, dim]`.
pub fn timestep_embedding(ts: &[f64], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = Tensor::zeros(ndarray::IxDyn(&[ts.len(), dim]));
    for (i, &t) in ts.iter().enumerate() {
        for j in 0..half {
            let freq = (-(10000f64).ln() * j as f64 / half as f64).exp();
            out[[i, j]] = (t * freq).sin();
            out[[i, half + j]] = (t * freq).cos();
        }
    }
    out
}
