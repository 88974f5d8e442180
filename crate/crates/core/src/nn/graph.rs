//! Reverse-mode differentiation over a recorded tape of tensor operations.
//!
//! The op set is exactly what the DRAW model and its losses need; it is not
//! a general autodiff engine.

use crate::error::{Error, Result};
use crate::nn::conv::{channel_sums, conv2d_input_grad, conv2d_raw, conv2d_weight_grad, ConvGeom};
use crate::nn::{ParamId, ParamStore, Real, Shape4, Tensor4};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ConvT {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Clamp {
        a: Var,
        lo: f64,
        hi: f64,
    },
    Concat(Vec<Var>),
    Slice {
        a: Var,
        start: usize,
    },
    Broadcast(Var),
    GaussianKl {
        mq: Var,
        lq: Var,
        mp: Var,
        lp: Var,
    },
    GaussianNll {
        x: Var,
        mean: Var,
        logvar: Var,
    },
    BinnedGaussianNll {
        x: Var,
        mean: Var,
        logvar: Var,
        step: f64,
    },
    BernoulliNll {
        x: Var,
        logits: Var,
    },
    SumPerItem(Var),
    Sum(Var),
}

pub struct Graph<R> {
    values: Vec<Tensor4<R>>,
    ops: Vec<Op>,
    requires: Vec<bool>,
    grad_enabled: bool,
    bound: Vec<Option<Var>>,
}

/// Gradients of a scalar output with respect to every parameter.
pub struct Gradients<R> {
    pub params: Vec<Tensor4<R>>,
}

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

impl<R: Real> Graph<R> {
    pub fn new() -> Self {
        Self::with_grad(true)
    }

    /// A tape that records values only; `backward` yields all-zero gradients.
    pub fn no_grad() -> Self {
        Self::with_grad(false)
    }

    fn with_grad(grad_enabled: bool) -> Self {
        Graph {
            values: Vec::new(),
            ops: Vec::new(),
            requires: Vec::new(),
            grad_enabled,
            bound: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor4<R> {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> Shape4 {
        self.values[v.0].shape()
    }

    fn push(&mut self, value: Tensor4<R>, op: Op, requires: bool) -> Var {
        self.values.push(value);
        self.ops.push(op);
        self.requires.push(requires && self.grad_enabled);
        Var(self.values.len() - 1)
    }

    fn req(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    pub fn constant(&mut self, t: Tensor4<R>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Binds a parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<R>, id: ParamId) -> Var {
        if self.bound.len() <= id.0 {
            self.bound.resize(id.0 + 1, None);
        }
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param(id), true);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn conv(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: super::Padding,
    ) -> Result<Var> {
        let ws = self.shape(w);
        let geom = ConvGeom {
            out_c: ws.n,
            in_c: ws.c,
            kh: ws.h,
            kw: ws.w,
            stride,
            pad,
        };
        let xs = self.shape(x);
        if xs.c != geom.in_c {
            return Err(Error::shape(
                "conv2d",
                format!("{} input channels", geom.in_c),
                xs,
            ));
        }
        let bias = b.map(|b| self.values[b.0].data().to_vec());
        let out = conv2d_raw(self.value(x), self.value(w), bias.as_deref(), &geom)?;
        let r = self.req(x) || self.req(w) || b.is_some_and(|b| self.req(b));
        Ok(self.push(out, Op::Conv { x, w, b, geom }, r))
    }

    /// Transposed convolution onto an explicit `out_h x out_w` grid.
    pub fn conv_transpose(
        &mut self,
        x: Var,
        w: Var,
        stride: usize,
        pad: super::Padding,
        out_h: usize,
        out_w: usize,
    ) -> Result<Var> {
        let ws = self.shape(w);
        let geom = ConvGeom {
            out_c: ws.n,
            in_c: ws.c,
            kh: ws.h,
            kw: ws.w,
            stride,
            pad,
        };
        let xs = self.shape(x);
        if xs.c != geom.out_c || geom.conv_out(out_h, out_w)? != (xs.h, xs.w) {
            return Err(Error::shape(
                "conv_transpose2d",
                format!(
                    "{}x{} maps of {} channels",
                    geom.conv_out(out_h, out_w)?.0,
                    geom.conv_out(out_h, out_w)?.1,
                    geom.out_c
                ),
                xs,
            ));
        }
        let out = conv2d_input_grad(self.value(x), self.value(w), &geom, out_h, out_w);
        let r = self.req(x) || self.req(w);
        Ok(self.push(out, Op::ConvT { x, w, geom }, r))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(R, R) -> R,
    ) -> Result<Tensor4<R>> {
        let bs = self.shape(b);
        self.value(a)
            .zip_map(self.value(b), f)
            .map_err(|_| Error::shape(name, self.shape(a), bs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "add", |x, y| x + y)?;
        let r = self.req(a) || self.req(b);
        Ok(self.push(v, Op::Add(a, b), r))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "sub", |x, y| x - y)?;
        let r = self.req(a) || self.req(b);
        Ok(self.push(v, Op::Sub(a, b), r))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "mul", |x, y| x * y)?;
        let r = self.req(a) || self.req(b);
        Ok(self.push(v, Op::Mul(a, b), r))
    }

    /// Sum of several same-shaped nodes.
    pub fn sum_of(&mut self, parts: &[Var]) -> Result<Var> {
        let mut acc = *parts
            .first()
            .ok_or_else(|| Error::Contract("sum of zero terms".into()))?;
        for &p in &parts[1..] {
            acc = self.add(acc, p)?;
        }
        Ok(acc)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let kr = R::of(k);
        let v = self.value(a).map(|x| x * kr);
        let r = self.req(a);
        self.push(v, Op::Scale(a, k), r)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        let r = self.req(a);
        self.push(v, Op::Sigmoid(a), r)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.tanh());
        let r = self.req(a);
        self.push(v, Op::Tanh(a), r)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.exp());
        let r = self.req(a);
        self.push(v, Op::Exp(a), r)
    }

    /// Elementwise clamp; the gradient is zero where the clamp is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let (l, h) = (R::of(lo), R::of(hi));
        let v = self.value(a).map(|x| x.max(l).min(h));
        let r = self.req(a);
        self.push(v, Op::Clamp { a, lo, hi }, r)
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&Tensor4<R>> = parts.iter().map(|p| self.value(*p)).collect();
        let v = Tensor4::concat_channels(&refs)?;
        let r = parts.iter().any(|p| self.req(*p));
        Ok(self.push(v, Op::Concat(parts.to_vec()), r))
    }

    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).channels(start, len);
        let r = self.req(a);
        self.push(v, Op::Slice { a, start }, r)
    }

    /// Broadcasts along every axis where `a` has extent 1.
    pub fn broadcast(&mut self, a: Var, to: Shape4) -> Result<Var> {
        let s = self.shape(a);
        let ok = |from: usize, to: usize| from == to || from == 1;
        if !(ok(s.n, to.n) && ok(s.c, to.c) && ok(s.h, to.h) && ok(s.w, to.w)) {
            return Err(Error::shape("broadcast", to, s));
        }
        if s == to {
            return Ok(a);
        }
        let src = self.value(a);
        let v = Tensor4::from_fn(to, |n, c, y, x| {
            src.at(
                n.min(s.n - 1),
                c.min(s.c - 1),
                y.min(s.h - 1),
                x.min(s.w - 1),
            )
        });
        let r = self.req(a);
        Ok(self.push(v, Op::Broadcast(a), r))
    }

    /// Per-unit `KL(N(mq, e^lq) || N(mp, e^lp))` in nats.
    pub fn gaussian_kl(&mut self, mq: Var, lq: Var, mp: Var, lp: Var) -> Result<Var> {
        let s = self.shape(mq);
        for v in [lq, mp, lp] {
            self.value(v).expect_shape("gaussian_kl", s)?;
        }
        let (a, b, c, d) = (
            self.value(mq),
            self.value(lq),
            self.value(mp),
            self.value(lp),
        );
        let half = R::of(0.5);
        let data = (0..s.len())
            .map(|i| {
                let diff = a.data()[i] - c.data()[i];
                half * (d.data()[i] - b.data()[i])
                    + ((b.data()[i]).exp() + diff * diff) * half * (-d.data()[i]).exp()
                    - half
            })
            .map(|k| k.max(R::zero()))
            .collect();
        let r = [mq, lq, mp, lp].iter().any(|v| self.req(*v));
        Ok(self.push(
            Tensor4::from_vec(s, data),
            Op::GaussianKl { mq, lq, mp, lp },
            r,
        ))
    }

    /// Per-dimension `-log N(x; mean, e^logvar)` in nats.
    pub fn gaussian_nll(&mut self, x: Var, mean: Var, logvar: Var) -> Result<Var> {
        let s = self.shape(x);
        self.value(mean).expect_shape("gaussian_nll", s)?;
        self.value(logvar).expect_shape("gaussian_nll", s)?;
        let (xv, mv, lv) = (self.value(x), self.value(mean), self.value(logvar));
        let half = R::of(0.5);
        let c = R::of(HALF_LN_2PI);
        let data = (0..s.len())
            .map(|i| {
                let d = xv.data()[i] - mv.data()[i];
                c + half * lv.data()[i] + half * d * d * (-lv.data()[i]).exp()
            })
            .collect();
        let r = [x, mean, logvar].iter().any(|v| self.req(*v));
        Ok(self.push(
            Tensor4::from_vec(s, data),
            Op::GaussianNll { x, mean, logvar },
            r,
        ))
    }

    /// Per-dimension `-log P(bin)` where the bin is `[x - step/2, x + step/2]`
    /// under `N(mean, e^logvar)`.
    pub fn binned_gaussian_nll(
        &mut self,
        x: Var,
        mean: Var,
        logvar: Var,
        step: f64,
    ) -> Result<Var> {
        let s = self.shape(x);
        self.value(mean).expect_shape("binned_gaussian_nll", s)?;
        self.value(logvar).expect_shape("binned_gaussian_nll", s)?;
        let (xv, mv, lv) = (self.value(x), self.value(mean), self.value(logvar));
        let data = (0..s.len())
            .map(|i| {
                let (p, _, _) = bin_mass(
                    xv.data()[i].as_f64(),
                    mv.data()[i].as_f64(),
                    lv.data()[i].as_f64(),
                    step,
                );
                R::of(-p.ln())
            })
            .collect();
        let r = [x, mean, logvar].iter().any(|v| self.req(*v));
        Ok(self.push(
            Tensor4::from_vec(s, data),
            Op::BinnedGaussianNll {
                x,
                mean,
                logvar,
                step,
            },
            r,
        ))
    }

    /// Per-pixel `-log Bernoulli(x; sigmoid(logits))` in nats.
    pub fn bernoulli_nll(&mut self, x: Var, logits: Var) -> Result<Var> {
        let s = self.shape(x);
        self.value(logits).expect_shape("bernoulli_nll", s)?;
        let (xv, lv) = (self.value(x), self.value(logits));
        let data = (0..s.len())
            .map(|i| {
                let l = lv.data()[i];
                l.max(R::zero()) - xv.data()[i] * l + (-l.abs()).exp().ln_1p()
            })
            .collect();
        let r = self.req(x) || self.req(logits);
        Ok(self.push(
            Tensor4::from_vec(s, data),
            Op::BernoulliNll { x, logits },
            r,
        ))
    }

    /// `n x 1 x 1 x 1` sums over each batch item.
    pub fn sum_per_item(&mut self, a: Var) -> Var {
        let s = self.shape(a);
        let data = self
            .value(a)
            .sum_per_item()
            .into_iter()
            .map(R::of)
            .collect();
        let r = self.req(a);
        self.push(
            Tensor4::from_vec(Shape4::new(s.n, 1, 1, 1), data),
            Op::SumPerItem(a),
            r,
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total: f64 = self.value(a).data().iter().map(|v| v.as_f64()).sum();
        let r = self.req(a);
        self.push(
            Tensor4::from_vec(Shape4::new(1, 1, 1, 1), vec![R::of(total)]),
            Op::Sum(a),
            r,
        )
    }

    /// Backpropagates from the single-element node `out` and returns the
    /// gradient for each of the `n_params` parameters of the bound store.
    pub fn backward(
        &self,
        out: Var,
        n_params: usize,
        store: &ParamStore<R>,
    ) -> Result<Gradients<R>> {
        if self.value(out).len() != 1 {
            return Err(Error::shape(
                "backward",
                "single-element output",
                self.shape(out),
            ));
        }
        let mut params: Vec<Tensor4<R>> = (0..n_params)
            .map(|i| Tensor4::zeros(store.value(ParamId(i)).shape()))
            .collect();
        if !self.req(out) {
            return Ok(Gradients { params });
        }
        let mut grads: Vec<Option<Tensor4<R>>> = vec![None; self.values.len()];
        grads[out.0] = Some(Tensor4::full(self.shape(out), R::one()));
        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.requires[idx] {
                continue;
            }
            self.back_one(idx, g, &mut grads, &mut params)?;
        }
        Ok(Gradients { params })
    }

    fn back_one(
        &self,
        idx: usize,
        g: Tensor4<R>,
        grads: &mut [Option<Tensor4<R>>],
        params: &mut [Tensor4<R>],
    ) -> Result<()> {
        let mut acc = |v: Var, d: Tensor4<R>| {
            if !self.requires[v.0] {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, x) in existing.data_mut().iter_mut().zip(d.data()) {
                        *e += *x;
                    }
                }
                slot @ None => *slot = Some(d),
            }
        };
        let val = |v: Var| &self.values[v.0];
        match &self.ops[idx] {
            Op::Leaf => {}
            Op::Param(id) => {
                let p = &mut params[id.0];
                for (e, x) in p.data_mut().iter_mut().zip(g.data()) {
                    *e += *x;
                }
            }
            Op::Conv { x, w, b, geom } => {
                if self.req(*x) {
                    let xs = self.shape(*x);
                    acc(*x, conv2d_input_grad(&g, val(*w), geom, xs.h, xs.w));
                }
                if self.req(*w) {
                    let mut dw = Tensor4::zeros(self.shape(*w));
                    conv2d_weight_grad(val(*x), &g, geom, dw.data_mut());
                    acc(*w, dw);
                }
                if let Some(b) = b {
                    if self.req(*b) {
                        let sums = channel_sums(&g);
                        acc(*b, Tensor4::from_vec(self.shape(*b), sums));
                    }
                }
            }
            Op::ConvT { x, w, geom } => {
                if self.req(*x) {
                    acc(*x, conv2d_raw(&g, val(*w), None, geom)?);
                }
                if self.req(*w) {
                    let mut dw = Tensor4::zeros(self.shape(*w));
                    conv2d_weight_grad(&g, val(*x), geom, dw.data_mut());
                    acc(*w, dw);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g);
            }
            Op::Sub(a, b) => {
                acc(*b, g.map(|v| -v));
                acc(*a, g);
            }
            Op::Mul(a, b) => {
                if self.req(*a) {
                    acc(*a, g.zip_map(val(*b), |d, y| d * y)?);
                }
                if self.req(*b) {
                    acc(*b, g.zip_map(val(*a), |d, x| d * x)?);
                }
            }
            Op::Scale(a, k) => {
                let k = R::of(*k);
                acc(*a, g.map(|d| d * k));
            }
            Op::Sigmoid(a) => {
                acc(
                    *a,
                    g.zip_map(&self.values[idx], |d, s| d * s * (R::one() - s))?,
                );
            }
            Op::Tanh(a) => {
                acc(
                    *a,
                    g.zip_map(&self.values[idx], |d, t| d * (R::one() - t * t))?,
                );
            }
            Op::Exp(a) => {
                acc(*a, g.zip_map(&self.values[idx], |d, e| d * e)?);
            }
            Op::Clamp { a, lo, hi } => {
                let (l, h) = (R::of(*lo), R::of(*hi));
                acc(
                    *a,
                    g.zip_map(val(*a), |d, x| if x < l || x > h { R::zero() } else { d })?,
                );
            }
            Op::Concat(parts) => {
                let mut start = 0;
                for p in parts {
                    let c = self.shape(*p).c;
                    if self.req(*p) {
                        acc(*p, g.channels(start, c));
                    }
                    start += c;
                }
            }
            Op::Slice { a, start } => {
                let s = self.shape(*a);
                let len = g.shape().c;
                let mut d = Tensor4::zeros(s);
                let plane = s.plane();
                for n in 0..s.n {
                    let dst = (n * s.c + start) * plane;
                    d.data_mut()[dst..dst + len * plane].copy_from_slice(g.item(n));
                }
                acc(*a, d);
            }
            Op::Broadcast(a) => {
                let s = self.shape(*a);
                let gs = g.shape();
                let mut d = Tensor4::zeros(s);
                for n in 0..gs.n {
                    for c in 0..gs.c {
                        for y in 0..gs.h {
                            for x in 0..gs.w {
                                let i = d.index(
                                    n.min(s.n - 1),
                                    c.min(s.c - 1),
                                    y.min(s.h - 1),
                                    x.min(s.w - 1),
                                );
                                d.data_mut()[i] += g.at(n, c, y, x);
                            }
                        }
                    }
                }
                acc(*a, d);
            }
            Op::GaussianKl { mq, lq, mp, lp } => {
                let (a, b, c, e) = (val(*mq), val(*lq), val(*mp), val(*lp));
                let half = R::of(0.5);
                let n = g.len();
                let mut dmq = Vec::with_capacity(n);
                let mut dlq = Vec::with_capacity(n);
                let mut dmp = Vec::with_capacity(n);
                let mut dlp = Vec::with_capacity(n);
                for i in 0..n {
                    let gi = g.data()[i];
                    let inv_vp = (-e.data()[i]).exp();
                    let diff = a.data()[i] - c.data()[i];
                    let vq = b.data()[i].exp();
                    dmq.push(gi * diff * inv_vp);
                    dmp.push(-gi * diff * inv_vp);
                    dlq.push(gi * (-half + half * vq * inv_vp));
                    dlp.push(gi * (half - half * (vq + diff * diff) * inv_vp));
                }
                let s = g.shape();
                acc(*mq, Tensor4::from_vec(s, dmq));
                acc(*lq, Tensor4::from_vec(s, dlq));
                acc(*mp, Tensor4::from_vec(s, dmp));
                acc(*lp, Tensor4::from_vec(s, dlp));
            }
            Op::GaussianNll { x, mean, logvar } => {
                let (xv, mv, lv) = (val(*x), val(*mean), val(*logvar));
                let half = R::of(0.5);
                let n = g.len();
                let mut dx = Vec::with_capacity(n);
                let mut dl = Vec::with_capacity(n);
                for i in 0..n {
                    let inv = (-lv.data()[i]).exp();
                    let d = xv.data()[i] - mv.data()[i];
                    dx.push(g.data()[i] * d * inv);
                    dl.push(g.data()[i] * (half - half * d * d * inv));
                }
                let s = g.shape();
                let dx = Tensor4::from_vec(s, dx);
                acc(*mean, dx.map(|v| -v));
                acc(*x, dx);
                acc(*logvar, Tensor4::from_vec(s, dl));
            }
            Op::BinnedGaussianNll {
                x,
                mean,
                logvar,
                step,
            } => {
                let (xv, mv, lv) = (val(*x), val(*mean), val(*logvar));
                let n = g.len();
                let mut dm = Vec::with_capacity(n);
                let mut dl = Vec::with_capacity(n);
                for i in 0..n {
                    let (_, d_mean, d_logvar) = bin_mass(
                        xv.data()[i].as_f64(),
                        mv.data()[i].as_f64(),
                        lv.data()[i].as_f64(),
                        *step,
                    );
                    dm.push(g.data()[i] * R::of(d_mean));
                    dl.push(g.data()[i] * R::of(d_logvar));
                }
                let s = g.shape();
                let dm = Tensor4::from_vec(s, dm);
                acc(*x, dm.map(|v| -v));
                acc(*mean, dm);
                acc(*logvar, Tensor4::from_vec(s, dl));
            }
            Op::BernoulliNll { x, logits } => {
                let (xv, lv) = (val(*x), val(*logits));
                acc(
                    *logits,
                    Tensor4::from_vec(
                        g.shape(),
                        (0..g.len())
                            .map(|i| g.data()[i] * (sigmoid(lv.data()[i]) - xv.data()[i]))
                            .collect(),
                    ),
                );
                acc(*x, g.zip_map(lv, |d, l| -d * l)?);
            }
            Op::SumPerItem(a) => {
                let s = self.shape(*a);
                let item = s.item();
                let mut d = Vec::with_capacity(s.len());
                for n in 0..s.n {
                    d.extend(std::iter::repeat_n(g.data()[n], item));
                }
                acc(*a, Tensor4::from_vec(s, d));
            }
            Op::Sum(a) => {
                acc(*a, Tensor4::full(self.shape(*a), g.data()[0]));
            }
        }
        Ok(())
    }
}

impl<R: Real> Default for Graph<R> {
    fn default() -> Self {
        Self::new()
    }
}

#[inline]
pub(crate) fn sigmoid<R: Real>(x: R) -> R {
    if x >= R::zero() {
        R::one() / (R::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (R::one() + e)
    }
}

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// Mass of `[x - step/2, x + step/2]` under `N(mean, e^logvar)`, with the
/// derivatives of `-ln(mass)` by mean and by logvar.
fn bin_mass(x: f64, mean: f64, logvar: f64, step: f64) -> (f64, f64, f64) {
    const FLOOR: f64 = 1e-300;
    let sd = (0.5 * logvar).exp();
    let hi = (x + 0.5 * step - mean) / sd;
    let lo = (x - 0.5 * step - mean) / sd;
    // use the upper tail on the right side for accuracy
    let mass = if lo > 0.0 {
        0.5 * (libm::erfc(lo / std::f64::consts::SQRT_2)
            - libm::erfc(hi / std::f64::consts::SQRT_2))
    } else {
        normal_cdf(hi) - normal_cdf(lo)
    };
    let mass = mass.max(FLOOR);
    let pdf = |z: f64| (-0.5 * z * z - HALF_LN_2PI).exp();
    let (phi_hi, phi_lo) = (pdf(hi), pdf(lo));
    // d mass / d mean = (phi(lo) - phi(hi)) / sd; d mass / d logvar = -(hi phi(hi) - lo phi(lo)) / 2
    let dmean = -(phi_lo - phi_hi) / sd / mass;
    let dlogvar = 0.5 * (hi * phi_hi - lo * phi_lo) / mass;
    (mass, dmean, dlogvar)
}
