//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value and, when any
//! input requires a gradient, a backward rule. [`Tape::backward`] replays
//! the rules in reverse recording order.
//!
//! Weight conventions:
//! - `conv1x1` weight: `1 x C_in x C_out`, bias `1 x 1 x C_out`.
//! - `conv3x3` weight: `9 x C_in x C_out` with tap index `(dy + 1) * 3 + (dx + 1)`.

use crate::error::{Error, Result};
use crate::sampler::{self, Position, Taps};
use crate::tensor::{sigmoid, softmax_in_place, Shape, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct BackwardCtx<'a> {
    grad_out: &'a Tensor,
    inputs: Vec<&'a Tensor>,
    output: &'a Tensor,
}

type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>, &mut [Tensor])>;

struct Rule {
    inputs: Vec<usize>,
    backward: BackwardFn,
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    rule: Option<Rule>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every recorded node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `shape` when nothing flowed into it.
    pub fn take_or_zeros(&mut self, v: Var, shape: Shape) -> Tensor {
        self.grads.get_mut(v.0).and_then(Option::take).unwrap_or_else(|| Tensor::zeros(shape))
    }
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, format!("{} vs {}", a.shape(), b.shape())));
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape(), data).expect("same shape")
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, true, None)
    }

    /// Leaf that never accumulates gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, None)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, None)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, rule: Option<Rule>) -> Var {
        self.nodes.push(Node { value, requires_grad, rule });
        Var(self.nodes.len() - 1)
    }

    fn record(
        &mut self,
        value: Tensor,
        inputs: &[Var],
        backward: impl Fn(&BackwardCtx<'_>, &mut [Tensor]) + 'static,
    ) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let rule = requires_grad.then(|| Rule {
            inputs: inputs.iter().map(|v| v.0).collect(),
            backward: Box::new(backward),
        });
        self.push(value, requires_grad, rule)
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = &self.nodes[output.0].value;
        if out.len() != 1 {
            return Err(Error::contract(
                "backward",
                format!("output must be scalar, got shape {}", out.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[output.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[output.0] = Some(Tensor::filled(out.shape(), 1.0));
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            let Some(rule) = &node.rule else { continue };
            let Some(grad_out) = grads[idx].take() else { continue };
            let ctx = BackwardCtx {
                grad_out: &grad_out,
                inputs: rule.inputs.iter().map(|&i| &self.nodes[i].value).collect(),
                output: &node.value,
            };
            let mut local: Vec<Tensor> =
                ctx.inputs.iter().map(|t| Tensor::zeros(t.shape())).collect();
            (rule.backward)(&ctx, &mut local);
            for (&i, g) in rule.inputs.iter().zip(local) {
                if !self.nodes[i].requires_grad {
                    continue;
                }
                match &mut grads[i] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(Gradients { grads })
    }

    // ---- elementwise ----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("add", self.value(a), self.value(b))?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.record(v, &[a, b], |ctx, g| {
            g[0] = ctx.grad_out.clone();
            g[1] = ctx.grad_out.clone();
        }))
    }

    pub fn add_n(&mut self, terms: &[Var]) -> Result<Var> {
        let (&first, rest) = terms
            .split_first()
            .ok_or_else(|| Error::contract("add_n", "no terms"))?;
        let mut acc = first;
        for &t in rest {
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("sub", self.value(a), self.value(b))?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.record(v, &[a, b], |ctx, g| {
            g[0] = ctx.grad_out.clone();
            g[1] = ctx.grad_out.map(|x| -x);
        }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("mul", self.value(a), self.value(b))?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.record(v, &[a, b], |ctx, g| {
            g[0] = zip_map(ctx.grad_out, ctx.inputs[1], |u, y| u * y);
            g[1] = zip_map(ctx.grad_out, ctx.inputs[0], |u, x| u * x);
        }))
    }

    /// `a * x + b` with constant `a`, `b`.
    pub fn affine(&mut self, x: Var, a: f64, b: f64) -> Var {
        let v = self.value(x).map(|t| a * t + b);
        self.record(v, &[x], move |ctx, g| {
            g[0] = ctx.grad_out.map(|u| a * u);
        })
    }

    pub fn scale(&mut self, x: Var, a: f64) -> Var {
        self.affine(x, a, 0.0)
    }

    /// Adds a constant tensor (e.g. a noise sample).
    pub fn add_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        check_same("add_const", self.value(x), c)?;
        let v = zip_map(self.value(x), c, |a, b| a + b);
        Ok(self.record(v, &[x], |ctx, g| {
            g[0] = ctx.grad_out.clone();
        }))
    }

    /// Multiplies every element of `x` by the scalar node `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.value(s).item()?;
        let v = self.value(x).map(|t| t * sv);
        Ok(self.record(v, &[x, s], move |ctx, g| {
            g[0] = ctx.grad_out.map(|u| u * sv);
            let dot: f64 = ctx.grad_out.data().iter().zip(ctx.inputs[0].data()).map(|(u, x)| u * x).sum();
            g[1] = Tensor::scalar(dot);
        }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|t| t.max(0.0));
        self.record(v, &[x], |ctx, g| {
            g[0] = zip_map(ctx.grad_out, ctx.inputs[0], |u, x| if x > 0.0 { u } else { 0.0 });
        })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid);
        self.record(v, &[x], |ctx, g| {
            g[0] = zip_map(ctx.grad_out, ctx.output, |u, s| u * s * (1.0 - s));
        })
    }

    /// Hard threshold `x > 0.5` with a straight-through (identity) backward.
    pub fn harden_ste(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|t| if t > 0.5 { 1.0 } else { 0.0 });
        self.record(v, &[x], |ctx, g| {
            g[0] = ctx.grad_out.clone();
        })
    }

    /// `ln(max(x, floor))` of a scalar; the gradient is zero on the floor.
    pub fn ln_floor(&mut self, x: Var, floor: f64) -> Result<Var> {
        let xv = self.value(x).item()?;
        let active = xv > floor;
        let v = Tensor::scalar(xv.max(floor).ln());
        Ok(self.record(v, &[x], move |ctx, g| {
            let u = ctx.grad_out.data()[0];
            g[0] = Tensor::scalar(if active { u / xv } else { 0.0 });
        }))
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.record(v, &[x], |ctx, g| {
            g[0] = Tensor::filled(ctx.inputs[0].shape(), ctx.grad_out.data()[0]);
        })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Per-channel mean over all spatial positions, `1 x 1 x C`.
    pub fn mean_spatial(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.shape();
        let n = s.positions().max(1) as f64;
        let mut out = Tensor::zeros(Shape::new(1, 1, s.c));
        for p in 0..s.positions() {
            for ch in 0..s.c {
                out.data_mut()[ch] += t.data()[p * s.c + ch];
            }
        }
        let out = out.map(|v| v / n);
        self.record(out, &[x], move |ctx, g| {
            let s = ctx.inputs[0].shape();
            let mut gi = Tensor::zeros(s);
            let u = ctx.grad_out.data();
            for p in 0..s.positions() {
                for ch in 0..s.c {
                    gi.data_mut()[p * s.c + ch] = u[ch] / n;
                }
            }
            g[0] = gi;
        })
    }

    /// Mean squared error between two same-shape tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("mse", self.value(a), self.value(b))?;
        let (ta, tb) = (self.value(a), self.value(b));
        let n = ta.len().max(1) as f64;
        let err: f64 = ta.data().iter().zip(tb.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
        Ok(self.record(Tensor::scalar(err), &[a, b], move |ctx, g| {
            let u = ctx.grad_out.data()[0];
            let d = zip_map(ctx.inputs[0], ctx.inputs[1], |x, y| 2.0 * (x - y) * u / n);
            g[1] = d.map(|v| -v);
            g[0] = d;
        }))
    }

    // ---- channel plumbing -----------------------------------------------

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if start + len > s.c {
            return Err(Error::dim("slice_channels", format!("{start}+{len} > {}", s.c)));
        }
        let v = self.value(x).channel_slice(start, len);
        Ok(self.record(v, &[x], move |ctx, g| {
            let s = ctx.inputs[0].shape();
            let mut gi = Tensor::zeros(s);
            let u = ctx.grad_out.data();
            for p in 0..s.positions() {
                gi.data_mut()[p * s.c + start..p * s.c + start + len]
                    .copy_from_slice(&u[p * len..(p + 1) * len]);
            }
            g[0] = gi;
        }))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::contract("concat_channels", "no parts"))?;
        let s0 = self.shape(*first);
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if (s.h, s.w) != (s0.h, s0.w) {
                return Err(Error::dim("concat_channels", format!("{s} vs {s0}")));
            }
            widths.push(s.c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Tensor::zeros(Shape::new(s0.h, s0.w, total));
        let mut offset = 0;
        for (&p, &wd) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for q in 0..s0.positions() {
                out.data_mut()[q * total + offset..q * total + offset + wd]
                    .copy_from_slice(&src[q * wd..(q + 1) * wd]);
            }
            offset += wd;
        }
        Ok(self.record(out, parts, move |ctx, g| {
            let u = ctx.grad_out.data();
            let positions = ctx.grad_out.shape().positions();
            let mut offset = 0;
            for (k, &wd) in widths.iter().enumerate() {
                let gd = g[k].data_mut();
                for q in 0..positions {
                    gd[q * wd..(q + 1) * wd]
                        .copy_from_slice(&u[q * total + offset..q * total + offset + wd]);
                }
                offset += wd;
            }
        }))
    }

    /// Softmax over the channel vector at every position.
    pub fn softmax_channels(&mut self, x: Var) -> Var {
        let mut v = self.value(x).clone();
        let c = v.shape().c;
        if c > 0 {
            for px in v.data_mut().chunks_mut(c) {
                softmax_in_place(px);
            }
        }
        self.record(v, &[x], move |ctx, g| {
            let mut gi = Tensor::zeros(ctx.output.shape());
            if c == 0 {
                g[0] = gi;
                return;
            }
            for ((gx, y), u) in gi
                .data_mut()
                .chunks_mut(c)
                .zip(ctx.output.data().chunks(c))
                .zip(ctx.grad_out.data().chunks(c))
            {
                let dot: f64 = y.iter().zip(u).map(|(a, b)| a * b).sum();
                for ((o, yi), ui) in gx.iter_mut().zip(y).zip(u) {
                    *o = yi * (ui - dot);
                }
            }
            g[0] = gi;
        })
    }

    /// Sub-pixel shuffle: `H x W x (C r^2)` to `Hr x Wr x C`.
    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let s = self.shape(x);
        if r == 0 || s.c % (r * r) != 0 {
            return Err(Error::dim("pixel_shuffle", format!("{} channels, factor {r}", s.c)));
        }
        let c = s.c / (r * r);
        let os = Shape::new(s.h * r, s.w * r, c);
        let index = move |y: usize, x: usize, i: usize, j: usize, ch: usize| {
            let src = (y * s.w + x) * s.c + ch * r * r + i * r + j;
            let dst = ((y * r + i) * os.w + x * r + j) * c + ch;
            (src, dst)
        };
        let src = self.value(x).data();
        let mut out = Tensor::zeros(os);
        for y in 0..s.h {
            for xx in 0..s.w {
                for i in 0..r {
                    for j in 0..r {
                        for ch in 0..c {
                            let (a, b) = index(y, xx, i, j, ch);
                            out.data_mut()[b] = src[a];
                        }
                    }
                }
            }
        }
        Ok(self.record(out, &[x], move |ctx, g| {
            let u = ctx.grad_out.data();
            let gd = g[0].data_mut();
            for y in 0..s.h {
                for xx in 0..s.w {
                    for i in 0..r {
                        for j in 0..r {
                            for ch in 0..c {
                                let (a, b) = index(y, xx, i, j, ch);
                                gd[a] = u[b];
                            }
                        }
                    }
                }
            }
        }))
    }

    // ---- convolutions ---------------------------------------------------

    pub fn conv1x1(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if ws.h != 1 || ws.w != xs.c {
            return Err(Error::dim("conv1x1", format!("input {xs}, weight {ws}")));
        }
        let co = ws.c;
        if let Some(b) = b {
            if self.shape(b) != Shape::new(1, 1, co) {
                return Err(Error::dim("conv1x1", format!("bias {}", self.shape(b))));
            }
        }
        let ci = xs.c;
        let mut out = Tensor::zeros(Shape::new(xs.h, xs.w, co));
        {
            let xd = self.value(x).data();
            let wd = self.value(w).data();
            let bias = b.map(|b| self.value(b).data().to_vec());
            let od = out.data_mut();
            for p in 0..xs.positions() {
                let o = &mut od[p * co..(p + 1) * co];
                if let Some(bias) = &bias {
                    o.copy_from_slice(bias);
                }
                for (k, &xv) in xd[p * ci..(p + 1) * ci].iter().enumerate() {
                    for (ov, wv) in o.iter_mut().zip(&wd[k * co..(k + 1) * co]) {
                        *ov += xv * wv;
                    }
                }
            }
        }
        let inputs: Vec<Var> = std::iter::once(x).chain(std::iter::once(w)).chain(b).collect();
        Ok(self.record(out, &inputs, move |ctx, g| {
            let xd = ctx.inputs[0].data();
            let wd = ctx.inputs[1].data();
            let u = ctx.grad_out.data();
            let positions = ctx.inputs[0].shape().positions();
            let (gx, rest) = g.split_at_mut(1);
            let gx = gx[0].data_mut();
            let (gw, gb) = rest.split_at_mut(1);
            let gw = gw[0].data_mut();
            for p in 0..positions {
                let up = &u[p * co..(p + 1) * co];
                for k in 0..ci {
                    let wrow = &wd[k * co..(k + 1) * co];
                    gx[p * ci + k] = wrow.iter().zip(up).map(|(a, b)| a * b).sum();
                    let xv = xd[p * ci + k];
                    for (gv, uv) in gw[k * co..(k + 1) * co].iter_mut().zip(up) {
                        *gv += xv * uv;
                    }
                }
                if let Some(gb) = gb.first_mut() {
                    for (gv, uv) in gb.data_mut().iter_mut().zip(up) {
                        *gv += uv;
                    }
                }
            }
        }))
    }

    /// 3x3 cross-correlation with zero padding of one pixel.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if ws.h != 9 || ws.w != xs.c || xs.positions() == 0 {
            return Err(Error::dim("conv3x3", format!("input {xs}, weight {ws}")));
        }
        let co = ws.c;
        if let Some(b) = b {
            if self.shape(b) != Shape::new(1, 1, co) {
                return Err(Error::dim("conv3x3", format!("bias {}", self.shape(b))));
            }
        }
        let ci = xs.c;
        let (h, wd_) = (xs.h, xs.w);
        let mut out = Tensor::zeros(Shape::new(h, wd_, co));
        {
            let xd = self.value(x).data();
            let wt = self.value(w).data();
            let bias = b.map(|b| self.value(b).data().to_vec());
            let od = out.data_mut();
            for y in 0..h {
                for xx in 0..wd_ {
                    let o = &mut od[(y * wd_ + xx) * co..(y * wd_ + xx + 1) * co];
                    if let Some(bias) = &bias {
                        o.copy_from_slice(bias);
                    }
                    for dy in 0..3 {
                        let sy = y as isize + dy as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for dx in 0..3 {
                            let sx = xx as isize + dx as isize - 1;
                            if sx < 0 || sx >= wd_ as isize {
                                continue;
                            }
                            let src = (sy as usize * wd_ + sx as usize) * ci;
                            let tap = (dy * 3 + dx) * ci * co;
                            for k in 0..ci {
                                let xv = xd[src + k];
                                let wrow = &wt[tap + k * co..tap + (k + 1) * co];
                                for (ov, wv) in o.iter_mut().zip(wrow) {
                                    *ov += xv * wv;
                                }
                            }
                        }
                    }
                }
            }
        }
        let inputs: Vec<Var> = std::iter::once(x).chain(std::iter::once(w)).chain(b).collect();
        Ok(self.record(out, &inputs, move |ctx, g| {
            let xd = ctx.inputs[0].data();
            let wt = ctx.inputs[1].data();
            let u = ctx.grad_out.data();
            let (gx, rest) = g.split_at_mut(1);
            let gx = gx[0].data_mut();
            let (gw, gb) = rest.split_at_mut(1);
            let gw = gw[0].data_mut();
            for y in 0..h {
                for xx in 0..wd_ {
                    let up = &u[(y * wd_ + xx) * co..(y * wd_ + xx + 1) * co];
                    if let Some(gb) = gb.first_mut() {
                        for (gv, uv) in gb.data_mut().iter_mut().zip(up) {
                            *gv += uv;
                        }
                    }
                    for dy in 0..3 {
                        let sy = y as isize + dy as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for dx in 0..3 {
                            let sx = xx as isize + dx as isize - 1;
                            if sx < 0 || sx >= wd_ as isize {
                                continue;
                            }
                            let src = (sy as usize * wd_ + sx as usize) * ci;
                            let tap = (dy * 3 + dx) * ci * co;
                            for k in 0..ci {
                                let wrow = &wt[tap + k * co..tap + (k + 1) * co];
                                gx[src + k] += wrow.iter().zip(up).map(|(a, b)| a * b).sum::<f64>();
                                let xv = xd[src + k];
                                for (gv, uv) in gw[tap + k * co..tap + (k + 1) * co].iter_mut().zip(up) {
                                    *gv += xv * uv;
                                }
                            }
                        }
                    }
                }
            }
        }))
    }

    // ---- attention primitives -------------------------------------------

    /// Samples `values` bilinearly at `K` learned offsets around every position.
    ///
    /// `offsets` is `H x W x 2K` holding `(d_row, d_col)` pairs per key.
    /// The output is `H x W x (K D)` with key `k` occupying channels
    /// `k D .. (k + 1) D`.
    pub fn deform_sample(&mut self, values: Var, offsets: Var) -> Result<Var> {
        let vs = self.shape(values);
        let os = self.shape(offsets);
        if (vs.h, vs.w) != (os.h, os.w) || os.c % 2 != 0 || os.c == 0 || vs.is_empty() {
            return Err(Error::dim("deform_sample", format!("values {vs}, offsets {os}")));
        }
        let (h, w, d) = (vs.h, vs.w, vs.c);
        let k = os.c / 2;
        let off = self.value(offsets).data();
        if off.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("deform_sample", "non-finite offset"));
        }
        let taps_at = move |off: &[f64], p: usize, key: usize| {
            let (r, c) = (p / w, p % w);
            let pos = Position::new(r as f64 + off[p * 2 * k + 2 * key], c as f64 + off[p * 2 * k + 2 * key + 1]);
            Taps::new_unchecked(h, w, pos)
        };
        let mut out = Tensor::zeros(Shape::new(h, w, k * d));
        {
            let vd = self.value(values).data();
            let od = out.data_mut();
            for p in 0..h * w {
                for key in 0..k {
                    let taps = taps_at(off, p, key);
                    let base = (p * k + key) * d;
                    sampler::accumulate(vd, d, &taps, &mut od[base..base + d]);
                }
            }
        }
        Ok(self.record(out, &[values, offsets], move |ctx, g| {
            let vd = ctx.inputs[0].data();
            let off = ctx.inputs[1].data();
            let u = ctx.grad_out.data();
            let (gv, go) = g.split_at_mut(1);
            let gv = gv[0].data_mut();
            let go = go[0].data_mut();
            for p in 0..h * w {
                for key in 0..k {
                    let taps = taps_at(off, p, key);
                    let base = (p * k + key) * d;
                    let (dr, dc) = sampler::backward_taps(vd, d, &taps, &u[base..base + d], gv);
                    go[p * 2 * k + 2 * key] += dr;
                    go[p * 2 * k + 2 * key + 1] += dc;
                }
            }
        }))
    }

    /// `y[p] = sum_k coef[p, k] * samples[p, k D .. (k + 1) D]`.
    pub fn weighted_sum_keys(&mut self, coef: Var, samples: Var) -> Result<Var> {
        let cs = self.shape(coef);
        let ss = self.shape(samples);
        if (cs.h, cs.w) != (ss.h, ss.w) || cs.c == 0 || ss.c % cs.c != 0 {
            return Err(Error::dim("weighted_sum_keys", format!("coef {cs}, samples {ss}")));
        }
        let k = cs.c;
        let d = ss.c / k;
        let mut out = Tensor::zeros(Shape::new(cs.h, cs.w, d));
        {
            let cd = self.value(coef).data();
            let sd = self.value(samples).data();
            let od = out.data_mut();
            for p in 0..cs.positions() {
                let o = &mut od[p * d..(p + 1) * d];
                for key in 0..k {
                    let a = cd[p * k + key];
                    let src = &sd[(p * k + key) * d..(p * k + key + 1) * d];
                    for (ov, sv) in o.iter_mut().zip(src) {
                        *ov += a * sv;
                    }
                }
            }
        }
        Ok(self.record(out, &[coef, samples], move |ctx, g| {
            let cd = ctx.inputs[0].data();
            let sd = ctx.inputs[1].data();
            let u = ctx.grad_out.data();
            let positions = ctx.inputs[0].shape().positions();
            let (gc, gs) = g.split_at_mut(1);
            let gc = gc[0].data_mut();
            let gs = gs[0].data_mut();
            for p in 0..positions {
                let up = &u[p * d..(p + 1) * d];
                for key in 0..k {
                    let range = (p * k + key) * d..(p * k + key + 1) * d;
                    gc[p * k + key] = sd[range.clone()].iter().zip(up).map(|(a, b)| a * b).sum();
                    let a = cd[p * k + key];
                    for (gv, uv) in gs[range].iter_mut().zip(up) {
                        *gv = a * uv;
                    }
                }
            }
        }))
    }

    /// Dense softmax attention of every query over all key positions of
    /// every key map, normalised jointly:
    /// `y_i = sum_{l,n} softmax_{l,n}(q_i . k^l_n) v^l_n`.
    pub fn dense_attention(&mut self, query: Var, keys: &[Var], values: &[Var]) -> Result<Var> {
        if keys.is_empty() || keys.len() != values.len() {
            return Err(Error::contract("dense_attention", "need matching non-empty key/value lists"));
        }
        let qs = self.shape(query);
        let d = qs.c;
        let vc = self.shape(values[0]).c;
        let mut key_positions = 0;
        for (&kv, &vv) in keys.iter().zip(values) {
            let ks = self.shape(kv);
            let vs = self.shape(vv);
            if ks.c != d || vs.c != vc || ks.positions() != vs.positions() {
                return Err(Error::dim("dense_attention", format!("query {qs}, key {ks}, value {vs}")));
            }
            key_positions += ks.positions();
        }
        let layers = keys.len();
        let n_query = qs.positions();
        let mut out = Tensor::zeros(Shape::new(qs.h, qs.w, vc));
        // concatenated key/value matrices, row per key position
        let gather = |tape: &Tape, vars: &[Var]| -> Vec<f64> {
            vars.iter().flat_map(|&v| tape.value(v).data().iter().copied()).collect()
        };
        let kmat = gather(self, keys);
        let vmat = gather(self, values);
        {
            let qd = self.value(query).data();
            let od = out.data_mut();
            let mut logits = vec![0.0; key_positions];
            for i in 0..n_query {
                let q = &qd[i * d..(i + 1) * d];
                for (n, l) in logits.iter_mut().enumerate() {
                    *l = q.iter().zip(&kmat[n * d..(n + 1) * d]).map(|(a, b)| a * b).sum();
                }
                softmax_in_place(&mut logits);
                let o = &mut od[i * vc..(i + 1) * vc];
                for (n, &pw) in logits.iter().enumerate() {
                    for (ov, vv) in o.iter_mut().zip(&vmat[n * vc..(n + 1) * vc]) {
                        *ov += pw * vv;
                    }
                }
            }
        }
        let inputs: Vec<Var> = std::iter::once(query).chain(keys.iter().copied()).chain(values.iter().copied()).collect();
        Ok(self.record(out, &inputs, move |ctx, g| {
            let qd = ctx.inputs[0].data();
            let kmat: Vec<f64> = ctx.inputs[1..=layers].iter().flat_map(|t| t.data().iter().copied()).collect();
            let vmat: Vec<f64> = ctx.inputs[layers + 1..].iter().flat_map(|t| t.data().iter().copied()).collect();
            let u = ctx.grad_out.data();
            let mut gq = vec![0.0; qd.len()];
            let mut gk = vec![0.0; kmat.len()];
            let mut gvm = vec![0.0; vmat.len()];
            let mut p = vec![0.0; key_positions];
            let mut gp = vec![0.0; key_positions];
            for i in 0..n_query {
                let q = &qd[i * d..(i + 1) * d];
                let ui = &u[i * vc..(i + 1) * vc];
                for (n, l) in p.iter_mut().enumerate() {
                    *l = q.iter().zip(&kmat[n * d..(n + 1) * d]).map(|(a, b)| a * b).sum();
                }
                softmax_in_place(&mut p);
                let mut dot = 0.0;
                for n in 0..key_positions {
                    let vrow = &vmat[n * vc..(n + 1) * vc];
                    gp[n] = vrow.iter().zip(ui).map(|(a, b)| a * b).sum();
                    dot += p[n] * gp[n];
                    for (gv, uv) in gvm[n * vc..(n + 1) * vc].iter_mut().zip(ui) {
                        *gv += p[n] * uv;
                    }
                }
                let gqi = &mut gq[i * d..(i + 1) * d];
                for n in 0..key_positions {
                    let gl = p[n] * (gp[n] - dot);
                    if gl == 0.0 {
                        continue;
                    }
                    let krow = &kmat[n * d..(n + 1) * d];
                    for (a, kv) in gqi.iter_mut().zip(krow) {
                        *a += gl * kv;
                    }
                    for (a, qv) in gk[n * d..(n + 1) * d].iter_mut().zip(q) {
                        *a += gl * qv;
                    }
                }
            }
            g[0].data_mut().copy_from_slice(&gq);
            let mut ko = 0;
            let mut vo = 0;
            for l in 0..layers {
                let kl = g[1 + l].len();
                g[1 + l].data_mut().copy_from_slice(&gk[ko..ko + kl]);
                ko += kl;
                let vl = g[1 + layers + l].len();
                g[1 + layers + l].data_mut().copy_from_slice(&gvm[vo..vo + vl]);
                vo += vl;
            }
        }))
    }
}
