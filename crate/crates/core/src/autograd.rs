//! A small reverse-mode automatic differentiation tape over `f64` tensors.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] on a scalar walks the tape in reverse and returns a
//! [`Gradients`] table. Nodes that do not depend on any trainable leaf are
//! skipped, so frozen weights cost nothing in the backward pass.
//!
//! Shape violations inside the engine are programming errors and panic with
//! a message; user-facing shape validation happens in the model modules.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use ndarray::{s, Array2, ArrayD, Axis, IxDyn};

pub type Tensor = ArrayD<f64>;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Bmm(usize, usize),
    Permute(usize, Vec<usize>),
    Reshape(usize),
    Concat(Vec<usize>, usize),
    Narrow(usize, usize, usize),
    Softmax(usize),
    LayerNorm { x: usize, xhat: Rc<Tensor>, inv_std: Rc<Tensor> },
    Silu(usize),
    Gelu(usize),
    Square(usize),
    Sqrt(usize),
    SumAll(usize),
    SumAxis(usize, usize, bool),
    Conv2d { x: usize, w: usize, b: Option<usize>, stride: usize, pad: usize },
    Upsample2x(usize),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Computation tape. Create one per forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph").field("nodes", &self.len()).finish()
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var(#{}, {:?})", self.id, self.shape())
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of its shape when no path reached it.
    pub fn get_or_zeros(&self, v: Var<'_>) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(IxDyn(&v.shape())),
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let value = if value.is_standard_layout() { value } else { value.as_standard_layout().into_owned() };
        self.push_rc(Rc::new(value), op, requires_grad)
    }

    fn push_rc(&self, value: Rc<Tensor>, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        Var { graph: self, id: nodes.len() - 1 }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn rg(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf, false)
    }

    pub fn constant_rc(&self, t: Rc<Tensor>) -> Var<'_> {
        if !t.is_standard_layout() {
            return self.constant((*t).clone());
        }
        self.push_rc(t, Op::Leaf, false)
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf, true)
    }

    pub fn leaf(&self, t: Tensor, trainable: bool) -> Var<'_> {
        self.push(t, Op::Leaf, trainable)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(Tensor::from_elem(IxDyn(&[]), v))
    }

    /// Concatenate along `axis`.
    pub fn concat<'g>(&'g self, parts: &[Var<'g>], axis: usize) -> Var<'g> {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let out = ndarray::concatenate(Axis(axis), &views).unwrap_or_else(|e| panic!("concat along axis {axis}: {e}"));
        let rg = parts.iter().any(|p| p.requires_grad());
        self.push(out, Op::Concat(parts.iter().map(|p| p.id).collect(), axis), rg)
    }

    /// Reverse pass from a scalar (single-element) output.
    pub fn backward(&self, loss: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.id].value.len(), 1, "backward requires a scalar output");
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::ones(nodes[loss.id].value.raw_dim()));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            let val = |i: usize| &nodes[i].value;
            let mut send = |i: usize, contrib: Tensor| {
                if !nodes[i].requires_grad {
                    return;
                }
                match &mut grads[i] {
                    Some(acc) => *acc += &contrib,
                    slot @ None => *slot = Some(contrib),
                }
            };
            let wants = |i: usize| nodes[i].requires_grad;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    if wants(*a) {
                        send(*a, unbroadcast(&g, val(*a).shape()));
                    }
                    if wants(*b) {
                        send(*b, unbroadcast(&g, val(*b).shape()));
                    }
                }
                Op::Sub(a, b) => {
                    if wants(*a) {
                        send(*a, unbroadcast(&g, val(*a).shape()));
                    }
                    if wants(*b) {
                        send(*b, -unbroadcast(&g, val(*b).shape()));
                    }
                }
                Op::Mul(a, b) => {
                    if wants(*a) {
                        send(*a, unbroadcast(&(&g * &**val(*b)), val(*a).shape()));
                    }
                    if wants(*b) {
                        send(*b, unbroadcast(&(&g * &**val(*a)), val(*b).shape()));
                    }
                }
                Op::Div(a, b) => {
                    let bv = &**val(*b);
                    if wants(*a) {
                        send(*a, unbroadcast(&(&g / bv), val(*a).shape()));
                    }
                    if wants(*b) {
                        // d(a/b)/db = -a/b^2 = -out/b
                        let gb = -(&g * &*node.value) / bv;
                        send(*b, unbroadcast(&gb, val(*b).shape()));
                    }
                }
                Op::Scale(a, k) => send(*a, g * *k),
                Op::AddScalar(a) => send(*a, g),
                Op::MatMul(a, b) => {
                    let av = val(*a);
                    let bv = val(*b);
                    let k = bv.shape()[0];
                    let n = bv.shape()[1];
                    let g2 = as2(&g, n);
                    if wants(*a) {
                        let b2 = as2(bv, n);
                        let ga = g2.dot(&b2.t());
                        send(*a, ga.into_dyn().into_shape_with_order(av.shape()).expect("matmul grad"));
                    }
                    if wants(*b) {
                        let a2 = as2(av, k);
                        send(*b, a2.t().dot(&g2).into_dyn());
                    }
                }
                Op::Bmm(a, b) => {
                    let av = val(*a);
                    let bv = val(*b);
                    let (ga, gb) = bmm_backward(av, bv, &g, wants(*a), wants(*b));
                    if let Some(ga) = ga {
                        send(*a, ga);
                    }
                    if let Some(gb) = gb {
                        send(*b, gb);
                    }
                }
                Op::Permute(a, perm) => {
                    let mut inv = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    send(*a, permute(&g, &inv));
                }
                Op::Reshape(a) => {
                    let shape = val(*a).shape().to_vec();
                    send(*a, reshape(g, &shape));
                }
                Op::Concat(parts, axis) => {
                    let mut start = 0;
                    for &p in parts {
                        let len = val(p).shape()[*axis];
                        if wants(p) {
                            let piece = g.slice_axis(Axis(*axis), (start..start + len).into());
                            send(p, piece.to_owned());
                        }
                        start += len;
                    }
                }
                Op::Narrow(a, axis, start) => {
                    let mut full = Tensor::zeros(val(*a).raw_dim());
                    let len = g.shape()[*axis];
                    full.slice_axis_mut(Axis(*axis), (*start..*start + len).into()).assign(&g);
                    send(*a, full);
                }
                Op::Softmax(a) => {
                    let y = &*node.value;
                    let last = Axis(y.ndim() - 1);
                    let gy = &g * y;
                    let dot = gy.sum_axis(last).insert_axis(last);
                    send(*a, y * &(&g - &dot));
                }
                Op::LayerNorm { x, xhat, inv_std } => {
                    let last = Axis(g.ndim() - 1);
                    let d = g.shape()[g.ndim() - 1] as f64;
                    let sum_g = g.sum_axis(last).insert_axis(last);
                    let sum_gx = (&g * &**xhat).sum_axis(last).insert_axis(last);
                    let inner = &g * d - &sum_g - &(&**xhat * &sum_gx);
                    send(*x, inner * &(&**inv_std / d));
                }
                Op::Silu(a) => {
                    let x = val(*a);
                    let mut dx = g;
                    ndarray::Zip::from(&mut dx).and(&**x).for_each(|d, &x| {
                        let s = sigmoid(x);
                        *d *= s * (1.0 + x * (1.0 - s));
                    });
                    send(*a, dx);
                }
                Op::Gelu(a) => {
                    let x = val(*a);
                    let mut dx = g;
                    ndarray::Zip::from(&mut dx).and(&**x).for_each(|d, &x| *d *= gelu_grad(x));
                    send(*a, dx);
                }
                Op::Square(a) => send(*a, g * &**val(*a) * 2.0),
                Op::Sqrt(a) => send(*a, g / &(&*node.value * 2.0)),
                Op::SumAll(a) => {
                    let gv = g.iter().next().copied().unwrap_or(0.0);
                    send(*a, Tensor::from_elem(val(*a).raw_dim(), gv));
                }
                Op::SumAxis(a, axis, keepdim) => {
                    let g = if *keepdim { g } else { g.insert_axis(Axis(*axis)) };
                    let full = g.broadcast(val(*a).raw_dim()).expect("sum_axis grad").to_owned();
                    send(*a, full);
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    let (gx, gw, gb) = conv2d_backward(val(*x), val(*w), &g, *stride, *pad, wants(*x), wants(*w));
                    if let Some(gx) = gx {
                        send(*x, gx);
                    }
                    if let Some(gw) = gw {
                        send(*w, gw);
                    }
                    if let Some(b) = b {
                        if wants(*b) {
                            let gb = gb.unwrap_or_else(|| g.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0)));
                            send(*b, gb);
                        }
                    }
                }
                Op::Upsample2x(a) => {
                    let sh = val(*a).shape().to_vec();
                    let (n, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
                    let g4 = g.into_dimensionality::<ndarray::Ix4>().expect("upsample grad");
                    let mut dx = ndarray::Array4::<f64>::zeros((n, c, h, w));
                    for ((ni, ci, y, x), v) in g4.indexed_iter() {
                        dx[[ni, ci, y / 2, x / 2]] += v;
                    }
                    send(*a, dx.into_dyn());
                }
            }
        }
        Gradients { grads }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Sum `g` down to `shape` after numpy-style broadcasting.
fn unbroadcast(g: &Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let mut out = g.clone();
    while out.ndim() > shape.len() {
        out = out.sum_axis(Axis(0));
    }
    for (i, &s) in shape.iter().enumerate() {
        if s == 1 && out.shape()[i] != 1 {
            out = out.sum_axis(Axis(i)).insert_axis(Axis(i));
        }
    }
    out
}

fn as2(t: &Tensor, last: usize) -> ndarray::CowArray<'_, f64, ndarray::Ix2> {
    let rows = t.len().checked_div(last).unwrap_or(0);
    match t.view().into_shape_with_order((rows, last)) {
        Ok(v) => v.into(),
        Err(_) => {
            let owned = t.as_standard_layout().into_owned();
            owned.into_shape_with_order((rows, last)).expect("reshape").into()
        }
    }
}

pub(crate) fn permute(t: &Tensor, perm: &[usize]) -> Tensor {
    t.view().permuted_axes(IxDyn(perm)).as_standard_layout().into_owned()
}

fn reshape(t: Tensor, shape: &[usize]) -> Tensor {
    let t = if t.is_standard_layout() { t } else { t.as_standard_layout().into_owned() };
    t.into_shape_with_order(IxDyn(shape)).expect("reshape: element count mismatch")
}

fn bmm_forward(a: &Tensor, b: &Tensor) -> Tensor {
    let (bs, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let (bs2, k2, n) = (b.shape()[0], b.shape()[1], b.shape()[2]);
    assert!(bs == bs2 && k == k2, "bmm shape mismatch {:?} x {:?}", a.shape(), b.shape());
    let a3 = a.view().into_dimensionality::<ndarray::Ix3>().expect("bmm lhs");
    let b3 = b.view().into_dimensionality::<ndarray::Ix3>().expect("bmm rhs");
    let mut out = ndarray::Array3::<f64>::zeros((bs, m, n));
    for i in 0..bs {
        let r = a3.index_axis(Axis(0), i).dot(&b3.index_axis(Axis(0), i));
        out.index_axis_mut(Axis(0), i).assign(&r);
    }
    out.into_dyn()
}

fn bmm_backward(a: &Tensor, b: &Tensor, g: &Tensor, want_a: bool, want_b: bool) -> (Option<Tensor>, Option<Tensor>) {
    let a3 = a.view().into_dimensionality::<ndarray::Ix3>().expect("bmm lhs");
    let b3 = b.view().into_dimensionality::<ndarray::Ix3>().expect("bmm rhs");
    let g3 = g.view().into_dimensionality::<ndarray::Ix3>().expect("bmm grad");
    let bs = a3.shape()[0];
    let mut ga = want_a.then(|| ndarray::Array3::<f64>::zeros(a3.raw_dim()));
    let mut gb = want_b.then(|| ndarray::Array3::<f64>::zeros(b3.raw_dim()));
    for i in 0..bs {
        let gi = g3.index_axis(Axis(0), i);
        if let Some(ga) = ga.as_mut() {
            ga.index_axis_mut(Axis(0), i).assign(&gi.dot(&b3.index_axis(Axis(0), i).t()));
        }
        if let Some(gb) = gb.as_mut() {
            gb.index_axis_mut(Axis(0), i).assign(&a3.index_axis(Axis(0), i).t().dot(&gi));
        }
    }
    (ga.map(|t| t.into_dyn()), gb.map(|t| t.into_dyn()))
}

fn conv_out_size(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

/// Unfold one image `[I, H, W]` into columns `[I*k*k, Ho*Wo]`.
fn im2col(x: ndarray::ArrayView3<'_, f64>, k: usize, stride: usize, pad: usize) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let ho = conv_out_size(h, k, stride, pad);
    let wo = conv_out_size(w, k, stride, pad);
    let mut cols = Array2::<f64>::zeros((c * k * k, ho * wo));
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let mut dst = cols.row_mut(row);
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dst[oy * wo + ox] = x[[ci, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(
    cols: &Array2<f64>,
    (c, h, w): (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    out: &mut ndarray::ArrayViewMut3<'_, f64>,
) {
    let ho = conv_out_size(h, k, stride, pad);
    let wo = conv_out_size(w, k, stride, pad);
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = cols.row((ci * k + ky) * k + kx);
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        out[[ci, iy as usize, ix as usize]] += row[oy * wo + ox];
                    }
                }
            }
        }
    }
}

fn conv2d_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let x4 = x.view().into_dimensionality::<ndarray::Ix4>().expect("conv2d input must be NCHW");
    let w4 = w.view().into_dimensionality::<ndarray::Ix4>().expect("conv2d weight must be OIkk");
    let (n, c, h, wd) = x4.dim();
    let (o, ci, k, k2) = w4.dim();
    assert!(ci == c && k == k2, "conv2d: input {:?} vs weight {:?}", x.shape(), w.shape());
    let ho = conv_out_size(h, k, stride, pad);
    let wo = conv_out_size(wd, k, stride, pad);
    let wmat = w4.into_shape_with_order((o, c * k * k)).expect("conv weight");
    let mut out = ndarray::Array4::<f64>::zeros((n, o, ho, wo));
    for ni in 0..n {
        let cols = im2col(x4.index_axis(Axis(0), ni), k, stride, pad);
        let mut y = wmat.dot(&cols);
        if let Some(b) = b {
            for (oi, mut row) in y.rows_mut().into_iter().enumerate() {
                row += b[[oi]];
            }
        }
        out.index_axis_mut(Axis(0), ni).assign(&y.into_shape_with_order((o, ho, wo)).expect("conv out"));
    }
    out.into_dyn()
}

#[allow(clippy::type_complexity)]
fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    g: &Tensor,
    stride: usize,
    pad: usize,
    want_x: bool,
    want_w: bool,
) -> (Option<Tensor>, Option<Tensor>, Option<Tensor>) {
    let x4 = x.view().into_dimensionality::<ndarray::Ix4>().expect("conv x");
    let w4 = w.view().into_dimensionality::<ndarray::Ix4>().expect("conv w");
    let g4 = g.view().into_dimensionality::<ndarray::Ix4>().expect("conv g");
    let (n, c, h, wd) = x4.dim();
    let (o, _, k, _) = w4.dim();
    let (_, _, ho, wo) = g4.dim();
    let wmat = w4.into_shape_with_order((o, c * k * k)).expect("conv weight");
    let mut gx = want_x.then(|| ndarray::Array4::<f64>::zeros((n, c, h, wd)));
    let mut gw = want_w.then(|| Array2::<f64>::zeros((o, c * k * k)));
    for ni in 0..n {
        let gi = g4.index_axis(Axis(0), ni).to_owned();
        let gi = gi.into_shape_with_order((o, ho * wo)).expect("conv g");
        if let Some(gw) = gw.as_mut() {
            let cols = im2col(x4.index_axis(Axis(0), ni), k, stride, pad);
            *gw += &gi.dot(&cols.t());
        }
        if let Some(gx) = gx.as_mut() {
            let dcols = wmat.t().dot(&gi);
            let mut dst = gx.index_axis_mut(Axis(0), ni);
            col2im(&dcols, (c, h, wd), k, stride, pad, &mut dst);
        }
    }
    let gw = gw.map(|m| m.into_shape_with_order((o, c, k, k)).expect("conv gw").into_dyn());
    (gx.map(|t| t.into_dyn()), gw, None)
}

impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.graph.nodes.borrow()[self.id].value.shape()[axis]
    }

    pub fn ndim(&self) -> usize {
        self.graph.nodes.borrow()[self.id].value.ndim()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.rg(self.id)
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.len(), 1, "item() on tensor of shape {:?}", v.shape());
        v.iter().copied().next().unwrap_or(0.0)
    }

    fn unary(self, out: Tensor, op: Op) -> Var<'g> {
        self.graph.push(out, op, self.requires_grad())
    }

    fn binary(self, other: Var<'g>, out: Tensor, op: Op) -> Var<'g> {
        let rg = self.requires_grad() || other.requires_grad();
        self.graph.push(out, op, rg)
    }

    fn check_broadcast(a: &Tensor, b: &Tensor, what: &str) {
        let (sa, sb) = (a.shape(), b.shape());
        let n = sa.len().max(sb.len());
        for i in 0..n {
            let da = if i + sa.len() >= n { sa[i + sa.len() - n] } else { 1 };
            let db = if i + sb.len() >= n { sb[i + sb.len() - n] } else { 1 };
            assert!(da == db || da == 1 || db == 1, "{what}: cannot broadcast {sa:?} with {sb:?}");
        }
    }

    fn elem_add(self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        Self::check_broadcast(&a, &b, "add");
        self.binary(other, &*a + &*b, Op::Add(self.id, other.id))
    }

    fn elem_sub(self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        Self::check_broadcast(&a, &b, "sub");
        self.binary(other, &*a - &*b, Op::Sub(self.id, other.id))
    }

    fn elem_mul(self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        Self::check_broadcast(&a, &b, "mul");
        self.binary(other, &*a * &*b, Op::Mul(self.id, other.id))
    }

    fn elem_div(self, other: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), other.value());
        Self::check_broadcast(&a, &b, "div");
        self.binary(other, &*a / &*b, Op::Div(self.id, other.id))
    }

    pub fn scale(self, k: f64) -> Var<'g> {
        self.unary(&*self.value() * k, Op::Scale(self.id, k))
    }

    pub fn add_scalar(self, k: f64) -> Var<'g> {
        self.unary(&*self.value() + k, Op::AddScalar(self.id))
    }

    /// `[..., M, K] x [K, N] -> [..., M, N]`.
    pub fn matmul(self, rhs: Var<'g>) -> Var<'g> {
        let (a, b) = (self.value(), rhs.value());
        assert_eq!(b.ndim(), 2, "matmul rhs must be 2-D, got {:?}", b.shape());
        let k = b.shape()[0];
        let n = b.shape()[1];
        assert!(
            a.ndim() >= 1 && a.shape()[a.ndim() - 1] == k,
            "matmul: lhs {:?} incompatible with rhs {:?}",
            a.shape(),
            b.shape()
        );
        let b2 = b.view().into_dimensionality::<ndarray::Ix2>().expect("2-D");
        let out2 = as2(&a, k).dot(&b2);
        let mut shape = a.shape().to_vec();
        *shape.last_mut().expect("non-empty shape") = n;
        let out = out2.into_dyn().into_shape_with_order(IxDyn(&shape)).expect("matmul out");
        self.binary(rhs, out, Op::MatMul(self.id, rhs.id))
    }

    /// Batched `[B, M, K] x [B, K, N] -> [B, M, N]`.
    pub fn bmm(self, rhs: Var<'g>) -> Var<'g> {
        let out = bmm_forward(&self.value(), &rhs.value());
        self.binary(rhs, out, Op::Bmm(self.id, rhs.id))
    }

    pub fn permute(self, perm: &[usize]) -> Var<'g> {
        let out = permute(&self.value(), perm);
        self.unary(out, Op::Permute(self.id, perm.to_vec()))
    }

    /// Swap the last two axes.
    pub fn transpose_last(self) -> Var<'g> {
        let n = self.ndim();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.swap(n - 1, n - 2);
        self.permute(&perm)
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g> {
        let out = reshape((*self.value()).clone(), shape);
        self.unary(out, Op::Reshape(self.id))
    }

    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Var<'g> {
        let v = self.value();
        assert!(start + len <= v.shape()[axis], "narrow out of range");
        let out = v.slice_axis(Axis(axis), (start..start + len).into()).to_owned();
        let out = out.as_standard_layout().into_owned();
        self.unary(out, Op::Narrow(self.id, axis, start))
    }

    pub fn softmax_last(self) -> Var<'g> {
        let mut out = (*self.value()).clone();
        let last = Axis(out.ndim() - 1);
        for mut lane in out.lanes_mut(last) {
            let m = lane.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            lane.mapv_inplace(|v| (v - m).exp());
            let s = lane.sum();
            lane.mapv_inplace(|v| v / s);
        }
        self.unary(out, Op::Softmax(self.id))
    }

    /// Layer normalization over the last axis without affine parameters.
    pub fn layer_norm_last(self) -> Var<'g> {
        let x = self.value();
        let last = Axis(x.ndim() - 1);
        let d = x.shape()[x.ndim() - 1] as f64;
        let mean = x.sum_axis(last).insert_axis(last) / d;
        let centered = &*x - &mean;
        let var = centered.mapv(|v| v * v).sum_axis(last).insert_axis(last) / d;
        let inv_std = var.mapv(|v| 1.0 / (v + LN_EPS).sqrt());
        let xhat = &centered * &inv_std;
        self.unary(xhat.clone(), Op::LayerNorm { x: self.id, xhat: Rc::new(xhat), inv_std: Rc::new(inv_std) })
    }

    pub fn silu(self) -> Var<'g> {
        let out = self.value().mapv(|x| x * sigmoid(x));
        self.unary(out, Op::Silu(self.id))
    }

    pub fn gelu(self) -> Var<'g> {
        let out = self.value().mapv(gelu);
        self.unary(out, Op::Gelu(self.id))
    }

    pub fn square(self) -> Var<'g> {
        let out = self.value().mapv(|x| x * x);
        self.unary(out, Op::Square(self.id))
    }

    pub fn sqrt(self) -> Var<'g> {
        let out = self.value().mapv(f64::sqrt);
        self.unary(out, Op::Sqrt(self.id))
    }

    pub fn sum(self) -> Var<'g> {
        let out = Tensor::from_elem(IxDyn(&[]), self.value().sum());
        self.unary(out, Op::SumAll(self.id))
    }

    pub fn mean(self) -> Var<'g> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn sum_axis(self, axis: usize, keepdim: bool) -> Var<'g> {
        let mut out = self.value().sum_axis(Axis(axis));
        if keepdim {
            out = out.insert_axis(Axis(axis));
        }
        self.unary(out, Op::SumAxis(self.id, axis, keepdim))
    }

    /// 2-D convolution, NCHW input and `[O, I, k, k]` weight.
    pub fn conv2d(self, w: Var<'g>, b: Option<Var<'g>>, stride: usize, pad: usize) -> Var<'g> {
        let (xv, wv) = (self.value(), w.value());
        let bv = b.map(|b| b.value());
        let out = conv2d_forward(&xv, &wv, bv.as_deref(), stride, pad);
        let rg = self.requires_grad() || w.requires_grad() || b.is_some_and(|b| b.requires_grad());
        self.graph.push(out, Op::Conv2d { x: self.id, w: w.id, b: b.map(|b| b.id), stride, pad }, rg)
    }

    /// Nearest-neighbour 2x spatial upsampling of an NCHW tensor.
    pub fn upsample2x(self) -> Var<'g> {
        let v = self.value();
        let sh = v.shape();
        let (n, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
        let out = ndarray::Array4::<f64>::from_shape_fn((n, c, 2 * h, 2 * w), |(a, b, y, x)| v[[a, b, y / 2, x / 2]]);
        self.unary(out.into_dyn(), Op::Upsample2x(self.id))
    }
}

macro_rules! impl_binop {
    ($tr:ident, $m:ident, $f:ident) => {
        impl<'g> std::ops::$tr for Var<'g> {
            type Output = Var<'g>;
            fn $m(self, rhs: Var<'g>) -> Var<'g> {
                Var::$f(self, rhs)
            }
        }
    };
}
impl_binop!(Add, add, elem_add);
impl_binop!(Sub, sub, elem_sub);
impl_binop!(Mul, mul, elem_mul);
impl_binop!(Div, div, elem_div);

impl<'g> std::ops::Neg for Var<'g> {
    type Output = Var<'g>;
    fn neg(self) -> Var<'g> {
        self.scale(-1.0)
    }
}

/// Slice a plain tensor along `axis` into an owned standard-layout copy.
pub fn slice_axis(t: &Tensor, axis: usize, start: usize, len: usize) -> Tensor {
    t.slice_axis(Axis(axis), (start..start + len).into()).as_standard_layout().into_owned()
}

/// Build a tensor from a shape and row-major data.
pub fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::from_shape_vec(IxDyn(shape), data).expect("tensor: data length does not match shape")
}

#[allow(dead_code)]
pub(crate) fn row(t: &Tensor, i: usize) -> Tensor {
    t.slice(s![i, ..]).to_owned().into_dyn()
}
