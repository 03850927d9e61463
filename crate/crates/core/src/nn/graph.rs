//! Reverse-mode gradient tape, scoped to one loss evaluation.
//!
//! Values are computed eagerly as nodes are pushed. A node requires a
//! gradient iff one of its inputs does; parameters bound with
//! [`Graph::param`] are the only gradient sources, so anything built from
//! constants (including [`Graph::detach`]ed values) is skipped in the
//! backward sweep.

use std::collections::HashMap;

use super::ops::{self, ConvGeometry};
use super::param::{ParamId, ParamStore, Parameter};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
    },
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Log(Var),
    Clamp(Var, f64, f64),
    Affine(Var, f64),
    Square(Var),
    BernoulliEntropy(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddConst(Var),
    ScaleChannels(Var, Var),
    Concat(Var, Var),
    Sum(Var),
    Dot(Var, Tensor),
    Pool(Var, Tensor),
    NormalizeRows(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
}

fn ensure_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        value.ensure_finite("graph constant")?;
        Ok(self.push(value, Op::Constant, false))
    }

    /// Binds a parameter as a differentiable leaf (once per graph).
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param, true);
        self.bound.insert(id, v);
        v
    }

    /// Uses a parameter's current value as a constant, outside gradient flow.
    pub fn param_frozen(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Constant, false)
    }

    /// Same value, no gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.push(value, Op::Constant, false)
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let geom = ConvGeometry::resolve(self.value(x), self.value(w), stride, pad)?;
        let bias = b.map(|b| self.value(b));
        if let Some(bt) = bias {
            if bt.shape() != [geom.cout] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias {:?} for {} output channels", bt.shape(), geom.cout),
                ));
            }
        }
        let out = ops::conv2d_with(&geom, self.value(x), self.value(w), bias);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(out, Op::Conv { x, w, b, geom }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        let rg = self.rg(x);
        self.push(out, Op::LeakyRelu(x, slope), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(ops::sigmoid_scalar);
        let rg = self.rg(x);
        self.push(out, Op::Sigmoid(x), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let out = ops::softmax_last(self.value(x));
        let rg = self.rg(x);
        self.push(out, Op::Softmax(x), rg)
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let out = ops::log_softmax_last(self.value(x));
        let rg = self.rg(x);
        self.push(out, Op::LogSoftmax(x), rg)
    }

    pub fn log(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::ln);
        let rg = self.rg(x);
        self.push(out, Op::Log(x), rg)
    }

    /// Gradient passes where `lo <= x <= hi`, zero outside.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(x).map(|v| v.clamp(lo, hi));
        let rg = self.rg(x);
        self.push(out, Op::Clamp(x, lo, hi), rg)
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(x).map(|v| scale * v + shift);
        let rg = self.rg(x);
        self.push(out, Op::Affine(x, scale), rg)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * v);
        let rg = self.rg(x);
        self.push(out, Op::Square(x), rg)
    }

    /// Elementwise `-(q ln q + (1-q) ln(1-q))` with `0 ln 0 = 0`.
    pub fn bernoulli_entropy(&mut self, x: Var) -> Var {
        let out = self.value(x).map(bernoulli_entropy);
        let rg = self.rg(x);
        self.push(out, Op::BernoulliEntropy(x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        ensure_same("add", self.value(a), self.value(b))?;
        let mut out = self.value(a).clone();
        out.add_scaled(self.value(b), 1.0);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        ensure_same("sub", self.value(a), self.value(b))?;
        let mut out = self.value(a).clone();
        out.add_scaled(self.value(b), -1.0);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        ensure_same("mul", self.value(a), self.value(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// `x + c` for a constant tensor `c` of the same shape.
    pub fn add_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        ensure_same("add_const", self.value(x), c)?;
        let mut out = self.value(x).clone();
        out.add_scaled(c, 1.0);
        let rg = self.rg(x);
        Ok(self.push(out, Op::AddConst(x), rg))
    }

    /// `F[h,w,c] * m[h,w]` for an `H×W×C` map and an `H×W×1` map.
    pub fn scale_channels(&mut self, feat: Var, map: Var) -> Result<Var> {
        let (h, w, c) = self.value(feat).dims3("scale_channels")?;
        let (mh, mw, mc) = self.value(map).dims3("scale_channels")?;
        if (mh, mw, mc) != (h, w, 1) {
            return Err(Error::shape(
                "scale_channels",
                format!("map {mh}×{mw}×{mc} against features {h}×{w}×{c}"),
            ));
        }
        let f = self.value(feat).data();
        let m = self.value(map).data();
        let mut data = Vec::with_capacity(f.len());
        for (px, &s) in f.chunks(c).zip(m) {
            data.extend(px.iter().map(|v| v * s));
        }
        let out = Tensor::new(vec![h, w, c], data)?;
        let rg = self.rg(feat) || self.rg(map);
        Ok(self.push(out, Op::ScaleChannels(feat, map), rg))
    }

    /// Channel concatenation of two `H×W×·` maps.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (h, w, ca) = self.value(a).dims3("concat")?;
        let (hb, wb, cb) = self.value(b).dims3("concat")?;
        if (h, w) != (hb, wb) {
            return Err(Error::shape("concat", format!("{h}×{w} vs {hb}×{wb}")));
        }
        let mut data = Vec::with_capacity(h * w * (ca + cb));
        for (pa, pb) in self
            .value(a)
            .data()
            .chunks(ca)
            .zip(self.value(b).data().chunks(cb))
        {
            data.extend_from_slice(pa);
            data.extend_from_slice(pb);
        }
        let out = Tensor::new(vec![h, w, ca + cb], data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Concat(a, b), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(out, Op::Sum(x), rg)
    }

    /// Scalar `Σ x_i w_i` against constant weights.
    pub fn dot_const(&mut self, x: Var, weights: Tensor) -> Result<Var> {
        if weights.len() != self.value(x).len() {
            return Err(Error::shape(
                "dot_const",
                format!(
                    "{:?} vs weights {:?}",
                    self.value(x).shape(),
                    weights.shape()
                ),
            ));
        }
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a * b)
            .sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::Dot(x, weights), rg))
    }

    /// `out[k, c] = Σ_n weights[n, k] · x[n, c]` where `x` is `H×W×C`
    /// (pixels flattened to `n`) and `weights` is `H×W×K`.
    pub fn pool(&mut self, x: Var, weights: Tensor) -> Result<Var> {
        let (h, w, c) = self.value(x).dims3("pool")?;
        let (wh, ww, k) = weights.dims3("pool")?;
        if (wh, ww) != (h, w) {
            return Err(Error::shape(
                "pool",
                format!("weights {wh}×{ww} vs features {h}×{w}"),
            ));
        }
        let mut out = vec![0.0; k * c];
        for (px, wrow) in self.value(x).data().chunks(c).zip(weights.data().chunks(k)) {
            for (kk, &a) in wrow.iter().enumerate() {
                if a != 0.0 {
                    for (o, &f) in out[kk * c..][..c].iter_mut().zip(px) {
                        *o += a * f;
                    }
                }
            }
        }
        let out = Tensor::new(vec![k, c], out)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Pool(x, weights), rg))
    }

    /// Divides each row of a 2-D tensor by its sum.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = match self.value(x).shape() {
            &[r, c] => (r, c),
            other => {
                return Err(Error::shape(
                    "normalize_rows",
                    format!("expected 2-D, got {other:?}"),
                ))
            }
        };
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(cols) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::NormalizeRows(x), rg))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got shape {:?}", lv.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if self.rg(loss) {
            grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let acc = |grads: &mut [Option<Tensor>], v: Var, t: Tensor| {
            if !self.rg(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_scaled(&t, 1.0),
                slot @ None => *slot = Some(t),
            }
        };
        let zip_map = |a: &Tensor, f: &dyn Fn(f64, f64) -> f64| -> Tensor {
            let data = a
                .data()
                .iter()
                .zip(g.data())
                .map(|(&x, &gv)| f(x, gv))
                .collect();
            Tensor::new(a.shape().to_vec(), data).expect("same shape")
        };
        match &node.op {
            Op::Constant | Op::Param => {}
            Op::Conv { x, w, b, geom } => {
                let (gx, gw, gb) = ops::conv2d_backward(
                    geom,
                    self.value(*x),
                    self.value(*w),
                    g,
                    self.rg(*x),
                    self.rg(*w),
                );
                if let Some(gx) = gx {
                    acc(grads, *x, gx);
                }
                if let Some(gw) = gw {
                    acc(grads, *w, gw);
                }
                if let Some(b) = b {
                    acc(grads, *b, gb);
                }
            }
            Op::Relu(x) => {
                let t = zip_map(self.value(*x), &|v, gv| if v > 0.0 { gv } else { 0.0 });
                acc(grads, *x, t);
            }
            Op::LeakyRelu(x, slope) => {
                let s = *slope;
                let t = zip_map(self.value(*x), &|v, gv| if v > 0.0 { gv } else { s * gv });
                acc(grads, *x, t);
            }
            Op::Sigmoid(x) => {
                let t = zip_map(&node.value, &|y, gv| gv * y * (1.0 - y));
                acc(grads, *x, t);
            }
            Op::Softmax(x) => {
                let c = *node.value.shape().last().unwrap();
                let mut out = vec![0.0; g.len()];
                for ((o, y), gv) in out
                    .chunks_mut(c)
                    .zip(node.value.data().chunks(c))
                    .zip(g.data().chunks(c))
                {
                    let inner: f64 = y.iter().zip(gv).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        o[j] = y[j] * (gv[j] - inner);
                    }
                }
                acc(
                    grads,
                    *x,
                    Tensor::new(node.value.shape().to_vec(), out).unwrap(),
                );
            }
            Op::LogSoftmax(x) => {
                let c = *node.value.shape().last().unwrap();
                let mut out = vec![0.0; g.len()];
                for ((o, ly), gv) in out
                    .chunks_mut(c)
                    .zip(node.value.data().chunks(c))
                    .zip(g.data().chunks(c))
                {
                    let total: f64 = gv.iter().sum();
                    for j in 0..c {
                        o[j] = gv[j] - ly[j].exp() * total;
                    }
                }
                acc(
                    grads,
                    *x,
                    Tensor::new(node.value.shape().to_vec(), out).unwrap(),
                );
            }
            Op::Log(x) => {
                let t = zip_map(self.value(*x), &|v, gv| gv / v);
                acc(grads, *x, t);
            }
            Op::Clamp(x, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let t = zip_map(self.value(*x), &|v, gv| {
                    if v >= lo && v <= hi {
                        gv
                    } else {
                        0.0
                    }
                });
                acc(grads, *x, t);
            }
            Op::Affine(x, scale) => {
                let s = *scale;
                acc(grads, *x, g.map(|gv| s * gv));
            }
            Op::Square(x) => {
                let t = zip_map(self.value(*x), &|v, gv| 2.0 * v * gv);
                acc(grads, *x, t);
            }
            Op::BernoulliEntropy(x) => {
                let t = zip_map(self.value(*x), &|q, gv| gv * bernoulli_entropy_slope(q));
                acc(grads, *x, t);
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let ga = zip_map(self.value(*b), &|bv, gv| bv * gv);
                let gb = zip_map(self.value(*a), &|av, gv| av * gv);
                acc(grads, *a, ga);
                acc(grads, *b, gb);
            }
            Op::AddConst(x) => acc(grads, *x, g.clone()),
            Op::ScaleChannels(feat, map) => {
                let f = self.value(*feat);
                let m = self.value(*map);
                let c = f.shape()[2];
                if self.rg(*feat) {
                    let mut gf = Vec::with_capacity(f.len());
                    for (gp, &s) in g.data().chunks(c).zip(m.data()) {
                        gf.extend(gp.iter().map(|v| v * s));
                    }
                    acc(grads, *feat, Tensor::new(f.shape().to_vec(), gf).unwrap());
                }
                if self.rg(*map) {
                    let gm = g
                        .data()
                        .chunks(c)
                        .zip(f.data().chunks(c))
                        .map(|(gp, fp)| gp.iter().zip(fp).map(|(a, b)| a * b).sum())
                        .collect();
                    acc(grads, *map, Tensor::new(m.shape().to_vec(), gm).unwrap());
                }
            }
            Op::Concat(a, b) => {
                let ca = self.value(*a).shape()[2];
                let cb = self.value(*b).shape()[2];
                let mut ga = Vec::with_capacity(self.value(*a).len());
                let mut gb = Vec::with_capacity(self.value(*b).len());
                for px in g.data().chunks(ca + cb) {
                    ga.extend_from_slice(&px[..ca]);
                    gb.extend_from_slice(&px[ca..]);
                }
                acc(
                    grads,
                    *a,
                    Tensor::new(self.value(*a).shape().to_vec(), ga).unwrap(),
                );
                acc(
                    grads,
                    *b,
                    Tensor::new(self.value(*b).shape().to_vec(), gb).unwrap(),
                );
            }
            Op::Sum(x) => {
                let gv = g.item();
                acc(grads, *x, Tensor::full(self.value(*x).shape(), gv));
            }
            Op::Dot(x, w) => {
                let gv = g.item();
                let t = Tensor::new(
                    self.value(*x).shape().to_vec(),
                    w.data().iter().map(|v| v * gv).collect(),
                )
                .unwrap();
                acc(grads, *x, t);
            }
            Op::Pool(x, weights) => {
                let xv = self.value(*x);
                let c = xv.shape()[2];
                let k = weights.shape()[2];
                let mut gx = vec![0.0; xv.len()];
                for (gp, wrow) in gx.chunks_mut(c).zip(weights.data().chunks(k)) {
                    for (kk, &a) in wrow.iter().enumerate() {
                        if a != 0.0 {
                            for (o, &gv) in gp.iter_mut().zip(&g.data()[kk * c..][..c]) {
                                *o += a * gv;
                            }
                        }
                    }
                }
                acc(grads, *x, Tensor::new(xv.shape().to_vec(), gx).unwrap());
            }
            Op::NormalizeRows(x) => {
                // y = x / s, dy_j/dx_i = (δ_ij - y_j) / s
                let xv = self.value(*x);
                let cols = xv.shape()[1];
                let mut out = vec![0.0; xv.len()];
                for ((o, xr), (yr, gr)) in out
                    .chunks_mut(cols)
                    .zip(xv.data().chunks(cols))
                    .zip(node.value.data().chunks(cols).zip(g.data().chunks(cols)))
                {
                    let s: f64 = xr.iter().sum();
                    let inner: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        o[j] = (gr[j] - inner) / s;
                    }
                }
                acc(grads, *x, Tensor::new(xv.shape().to_vec(), out).unwrap());
            }
        }
    }

    /// Parameter leaves bound in this graph.
    pub fn bound_params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.bound.iter().map(|(&id, &v)| (id, v))
    }
}

pub fn bernoulli_entropy(q: f64) -> f64 {
    let a = if q > 0.0 { q * q.ln() } else { 0.0 };
    let b = if q < 1.0 {
        (1.0 - q) * (1.0 - q).ln()
    } else {
        0.0
    };
    -(a + b)
}

/// d/dq of [`bernoulli_entropy`]; finite on the open interval.
fn bernoulli_entropy_slope(q: f64) -> f64 {
    if q <= 0.0 || q >= 1.0 {
        0.0
    } else {
        (1.0 - q).ln() - q.ln()
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Adds `scale * grad` into every bound parameter selected by `route`.
    /// `route` returns the scale, or `None` to leave the parameter untouched.
    pub fn accumulate(
        &self,
        graph: &Graph,
        store: &mut ParamStore,
        route: impl Fn(&Parameter) -> Option<f64>,
    ) {
        let mut bound: Vec<_> = graph.bound_params().collect();
        bound.sort_by_key(|(id, _)| *id);
        for (id, var) in bound {
            let Some(g) = self.get(var) else { continue };
            let p = store.get_mut(id);
            if let Some(scale) = route(p) {
                p.grad.add_scaled(g, scale);
            }
        }
    }
}

impl Graph {
    /// Backward sweep accumulating into every reachable parameter.
    pub fn backprop(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.backward(loss)?;
        grads.accumulate(self, store, |_| Some(1.0));
        Ok(())
    }
}
