//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation eagerly: values are computed on the
//! spot and the op is appended to a tape. [`Graph::backward`] then walks the
//! tape in reverse. Nodes that do not depend on any parameter are marked as
//! not needing gradients, so their adjoints are never formed.

use std::collections::HashMap;

use crate::kernels;
use crate::params::{ParamId, ParamStore};
use crate::scalar::{gemm, MatRef};
use crate::{Scalar, Tensor};

/// Index of a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// An operation whose forward value is computed by the caller and whose
/// vector-Jacobian product is supplied here.
///
/// Used for fused likelihood kernels that live outside this crate.
pub trait CustomOp<T: Scalar> {
    fn name(&self) -> &'static str;

    /// Return one entry per input; entries whose `needs[i]` is false may be
    /// `None`.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>>;
}

#[derive(Clone, Copy, Debug)]
pub enum Unary<T> {
    Silu,
    Tanh,
    Sigmoid,
    Softplus,
    LeakyRelu(T),
    Sqrt,
    Square,
    Exp,
    Ln,
    Neg,
    Abs,
}

enum Op<T: Scalar> {
    Constant,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Unary(Var, Unary<T>),
    LowerBound(Var, T),
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    ConvTranspose2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, means: Vec<T>, rstds: Vec<T> },
    AddChannel(Var, Var),
    Concat(Vec<Var>),
    SliceChannels(Var, usize),
    Upsample2x(Var),
    AvgPool2x(Var),
    Reshape(Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Bmm { a: Var, b: Var, ta: bool, tb: bool },
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    MeanPerSample(Var),
    MulPerSample(Var, Var),
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp<T>> },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recording of a forward computation.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    grad_enabled: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Adjoints produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.iter().find(|(p, _)| *p == id).and_then(|(_, v)| self.wrt(*v))
    }

    /// Parameter gradients ordered by id. Parameters that did not influence
    /// the output are omitted.
    pub fn into_param_grads(mut self) -> Vec<(ParamId, Tensor<T>)> {
        let mut out = Vec::with_capacity(self.params.len());
        for (id, v) in self.params {
            if let Some(g) = self.grads[v.0].take() {
                out.push((id, g));
            }
        }
        out
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(acc) => acc.axpy(T::one(), &g),
        slot @ None => *slot = Some(g),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: HashMap::new(), grad_enabled: true }
    }

    /// A graph that never tracks gradients; used for inference.
    pub fn inference() -> Self {
        Self { grad_enabled: false, ..Self::new() }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Constant, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that is differentiated even though it is not a stored parameter.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        let needs_grad = self.grad_enabled;
        self.nodes.push(Node { value, op: Op::Param, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Bring a stored parameter into the graph. Repeated calls with the same
    /// id return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.leaf(store.get(id).clone());
        self.params.insert(id, v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).add(self.value(b));
        self.push(value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).sub(self.value(b));
        self.push(value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(value, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x / y);
        self.push(value, Op::Div(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).scale(s);
        self.push(value, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|x| x + s);
        self.push(value, Op::AddScalar(a), &[a])
    }

    pub fn unary(&mut self, a: Var, f: Unary<T>) -> Var {
        let x = self.value(a);
        let value = match f {
            Unary::Silu => x.map(|v| v * sigmoid(v)),
            Unary::Tanh => x.map(|v| v.tanh()),
            Unary::Sigmoid => x.map(sigmoid),
            Unary::Softplus => x.map(softplus),
            Unary::LeakyRelu(s) => x.map(|v| if v > T::zero() { v } else { v * s }),
            Unary::Sqrt => x.map(|v| v.sqrt()),
            Unary::Square => x.map(|v| v * v),
            Unary::Exp => x.map(|v| v.exp()),
            Unary::Ln => x.map(|v| v.ln()),
            Unary::Neg => x.map(|v| -v),
            Unary::Abs => x.map(|v| v.abs()),
        };
        self.push(value, Op::Unary(a, f), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Silu)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        self.unary(a, Unary::LeakyRelu(slope))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sqrt)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }

    /// `max(a, bound)`, letting gradients through wherever they would push
    /// the input upwards so that values stuck under the bound can recover.
    pub fn lower_bound(&mut self, a: Var, bound: T) -> Var {
        let value = self.value(a).map(|v| v.max(bound));
        self.push(value, Op::LowerBound(a, bound), &[a])
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let value = kernels::conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(value, Op::Conv2d { x, w, b, stride, pad }, &inputs)
    }

    /// Transposed convolution; weight layout `[c_in, c_out, k, k]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let value = kernels::conv_transpose2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad, 0);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(value, Op::ConvTranspose2d { x, w, b, stride, pad }, &inputs)
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let eps = T::lit(1e-5);
        let (value, means, rstds) = kernels::group_norm_forward(self.value(x), self.value(gamma), self.value(beta), groups, eps);
        self.push(value, Op::GroupNorm { x, gamma, beta, groups, means, rstds }, &[x, gamma, beta])
    }

    /// `x[n, c, :, :] + v[n, c]`.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert_eq!(self.shape(v), &[n, c], "add_channel expects a [n, c] vector");
        let mut value = self.value(x).clone();
        let vv = self.value(v).data().to_vec();
        for (p, chunk) in value.data_mut().chunks_mut(h * w).enumerate() {
            let add = vv[p];
            for e in chunk {
                *e += add;
            }
        }
        self.push(value, Op::AddChannel(x, v), &[x, v])
    }

    /// Concatenate along axis 1.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let first = self.shape(parts[0]).to_vec();
        let n = first[0];
        let inner: usize = first[2..].iter().product();
        let mut channels = 0;
        for &p in parts {
            let s = self.shape(p);
            assert!(s[0] == n && s[2..] == first[2..], "concat shape mismatch: {:?} vs {:?}", s, first);
            channels += s[1];
        }
        let mut shape = first.clone();
        shape[1] = channels;
        let mut data = Vec::with_capacity(n * channels * inner);
        for i in 0..n {
            for &p in parts {
                let t = self.value(p);
                let per = t.shape()[1] * inner;
                data.extend_from_slice(&t.data()[i * per..(i + 1) * per]);
            }
        }
        self.push(Tensor::from_vec(&shape, data), Op::Concat(parts.to_vec()), parts)
    }

    /// Channels `start..start + len` along axis 1.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Var {
        let shape = self.shape(x).to_vec();
        assert!(start + len <= shape[1], "channel slice {start}..{} of {}", start + len, shape[1]);
        let inner: usize = shape[2..].iter().product();
        let mut out_shape = shape.clone();
        out_shape[1] = len;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(shape[0] * len * inner);
        for i in 0..shape[0] {
            let base = (i * shape[1] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        self.push(Tensor::from_vec(&out_shape, data), Op::SliceChannels(x, start), &[x])
    }

    pub fn upsample2x(&mut self, x: Var) -> Var {
        let value = kernels::upsample2x(self.value(x));
        self.push(value, Op::Upsample2x(x), &[x])
    }

    pub fn avg_pool2x(&mut self, x: Var) -> Var {
        let value = kernels::avg_pool2x(self.value(x));
        self.push(value, Op::AvgPool2x(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self.value(x).clone().reshape(shape);
        self.push(value, Op::Reshape(x), &[x])
    }

    /// `x·wᵀ + b` with `x: [n, k]`, `w: [m, k]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        assert!(xs.len() == 2 && ws.len() == 2 && xs[1] == ws[1], "linear shape mismatch {xs:?} · {ws:?}ᵀ");
        let (n, m) = (xs[0], ws[0]);
        let mut out = Tensor::zeros(&[n, m]);
        gemm(
            T::one(),
            MatRef::new(self.value(x).data(), n, xs[1]),
            MatRef::new(self.value(w).data(), m, ws[1]).t(),
            T::zero(),
            out.data_mut(),
        );
        if let Some(b) = b {
            let bv = self.value(b).data().to_vec();
            for row in out.data_mut().chunks_mut(m) {
                for (o, &bb) in row.iter_mut().zip(&bv) {
                    *o += bb;
                }
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(out, Op::Linear { x, w, b }, &inputs)
    }

    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let value = kernels::bmm(self.value(a), self.value(b), ta, tb);
        self.push(value, Op::Bmm { a, b, ta, tb }, &[a, b])
    }

    pub fn softmax_last(&mut self, x: Var) -> Var {
        let value = kernels::softmax_last(self.value(x));
        self.push(value, Op::Softmax(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).mean());
        self.push(value, Op::Mean(x), &[x])
    }

    /// Mean over all axes but the first: `[n, ...] -> [n]`.
    pub fn mean_per_sample(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = t.shape()[0];
        let per = t.len() / n;
        let denom = T::from_usize(per).unwrap();
        let data = t.data().chunks(per).map(|c| c.iter().copied().sum::<T>() / denom).collect();
        self.push(Tensor::from_vec(&[n], data), Op::MeanPerSample(x), &[x])
    }

    /// `x[n, ...] * w[n]`.
    pub fn mul_per_sample(&mut self, x: Var, w: Var) -> Var {
        let n = self.shape(x)[0];
        assert_eq!(self.shape(w), &[n], "mul_per_sample expects one weight per sample");
        let per = self.value(x).len() / n;
        let wv = self.value(w).data().to_vec();
        let mut value = self.value(x).clone();
        for (chunk, &s) in value.data_mut().chunks_mut(per).zip(&wv) {
            for e in chunk {
                *e *= s;
            }
        }
        self.push(value, Op::MulPerSample(x, w), &[x, w])
    }

    pub fn custom(&mut self, inputs: &[Var], value: Tensor<T>, op: Box<dyn CustomOp<T>>) -> Var {
        self.push(value, Op::Custom { inputs: inputs.to_vec(), op }, inputs)
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert!(self.grad_enabled, "backward on an inference graph");
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let mut params: Vec<_> = self.params.iter().map(|(&id, &v)| (id, v)).collect();
        params.sort_by_key(|&(id, _)| id);
        Gradients { grads, params }
    }

    fn backprop_node(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        let ng = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Constant | Op::Param => {}
            Op::Add(a, b) => {
                if ng(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if ng(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if ng(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if ng(*b) {
                    accumulate(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if ng(*a) {
                    accumulate(grads, *a, g.zip_map(self.value(*b), |gv, bv| gv * bv));
                }
                if ng(*b) {
                    accumulate(grads, *b, g.zip_map(self.value(*a), |gv, av| gv * av));
                }
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                if ng(*a) {
                    accumulate(grads, *a, g.zip_map(bv, |gv, d| gv / d));
                }
                if ng(*b) {
                    // d(a/b)/db = -y/b
                    let t = g.zip_map(y, |gv, yv| gv * yv);
                    accumulate(grads, *b, t.zip_map(bv, |v, d| -v / d));
                }
            }
            Op::Scale(a, s) => accumulate(grads, *a, g.scale(*s)),
            Op::AddScalar(a) => accumulate(grads, *a, g.clone()),
            Op::Unary(a, f) => {
                let x = self.value(*a);
                let mut out = g.clone();
                let d = out.data_mut();
                let (xs, ys) = (x.data(), y.data());
                for i in 0..d.len() {
                    let (xv, yv) = (xs[i], ys[i]);
                    let deriv = match *f {
                        Unary::Silu => {
                            // σ(x) = y/x recovers the sigmoid without another exp.
                            let s = if xv.abs() > T::lit(1e-3) { yv / xv } else { sigmoid(xv) };
                            s * (T::one() + xv * (T::one() - s))
                        }
                        Unary::Tanh => T::one() - yv * yv,
                        Unary::Sigmoid => yv * (T::one() - yv),
                        Unary::Softplus => sigmoid(xv),
                        Unary::LeakyRelu(s) => {
                            if xv > T::zero() {
                                T::one()
                            } else {
                                s
                            }
                        }
                        Unary::Sqrt => T::lit(0.5) / yv,
                        Unary::Square => xv + xv,
                        Unary::Exp => yv,
                        Unary::Ln => T::one() / xv,
                        Unary::Neg => -T::one(),
                        Unary::Abs => xv.signum(),
                    };
                    d[i] *= deriv;
                }
                accumulate(grads, *a, out);
            }
            Op::LowerBound(a, bound) => {
                let x = self.value(*a);
                let out = g.zip_map(x, |gv, xv| if xv >= *bound || gv < T::zero() { gv } else { T::zero() });
                accumulate(grads, *a, out);
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (dx, dw) = kernels::conv2d_backward(self.value(*x), self.value(*w), g, *stride, *pad, ng(*x), ng(*w));
                if let Some(dx) = dx {
                    accumulate(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    accumulate(grads, *w, dw);
                }
                if let Some(b) = b.filter(|b| ng(*b)) {
                    accumulate(grads, b, kernels::channel_sums(g));
                }
            }
            Op::ConvTranspose2d { x, w, b, stride, pad } => {
                let (dx, dw) =
                    kernels::conv_transpose2d_backward(self.value(*x), self.value(*w), g, *stride, *pad, ng(*x), ng(*w));
                if let Some(dx) = dx {
                    accumulate(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    accumulate(grads, *w, dw);
                }
                if let Some(b) = b.filter(|b| ng(*b)) {
                    accumulate(grads, b, kernels::channel_sums(g));
                }
            }
            Op::GroupNorm { x, gamma, beta, groups, means, rstds } => {
                let (dx, dg, db) = kernels::group_norm_backward(self.value(*x), self.value(*gamma), g, *groups, means, rstds);
                if ng(*x) {
                    accumulate(grads, *x, dx);
                }
                if ng(*gamma) {
                    accumulate(grads, *gamma, dg);
                }
                if ng(*beta) {
                    accumulate(grads, *beta, db);
                }
            }
            Op::AddChannel(x, v) => {
                if ng(*x) {
                    accumulate(grads, *x, g.clone());
                }
                if ng(*v) {
                    let (n, c, h, w) = g.dims4();
                    let data = g.data().chunks(h * w).map(|ch| ch.iter().copied().sum::<T>()).collect();
                    accumulate(grads, *v, Tensor::from_vec(&[n, c], data));
                }
            }
            Op::Concat(parts) => {
                let shape = g.shape();
                let n = shape[0];
                let inner: usize = shape[2..].iter().product();
                let total = shape[1] * inner;
                let mut offset = 0;
                for &p in parts {
                    let ps = self.shape(p).to_vec();
                    let per = ps[1] * inner;
                    if ng(p) {
                        let mut data = Vec::with_capacity(n * per);
                        for i in 0..n {
                            data.extend_from_slice(&g.data()[i * total + offset..i * total + offset + per]);
                        }
                        accumulate(grads, p, Tensor::from_vec(&ps, data));
                    }
                    offset += per;
                }
            }
            Op::SliceChannels(x, start) => {
                let shape = self.shape(*x).to_vec();
                let inner: usize = shape[2..].iter().product();
                let len = g.shape()[1];
                let mut dx = Tensor::zeros(&shape);
                for i in 0..shape[0] {
                    let base = (i * shape[1] + start) * inner;
                    dx.data_mut()[base..base + len * inner].copy_from_slice(&g.data()[i * len * inner..(i + 1) * len * inner]);
                }
                accumulate(grads, *x, dx);
            }
            Op::Upsample2x(x) => accumulate(grads, *x, kernels::upsample2x_backward(g)),
            Op::AvgPool2x(x) => accumulate(grads, *x, kernels::avg_pool2x_backward(g, self.shape(*x))),
            Op::Reshape(x) => accumulate(grads, *x, g.clone().reshape(self.shape(*x))),
            Op::Linear { x, w, b } => {
                let (n, k) = (self.shape(*x)[0], self.shape(*x)[1]);
                let m = self.shape(*w)[0];
                let gm = MatRef::new(g.data(), n, m);
                if ng(*x) {
                    let mut dx = Tensor::zeros(&[n, k]);
                    gemm(T::one(), gm, MatRef::new(self.value(*w).data(), m, k), T::zero(), dx.data_mut());
                    accumulate(grads, *x, dx);
                }
                if ng(*w) {
                    let mut dw = Tensor::zeros(&[m, k]);
                    gemm(T::one(), gm.t(), MatRef::new(self.value(*x).data(), n, k), T::zero(), dw.data_mut());
                    accumulate(grads, *w, dw);
                }
                if let Some(b) = b.filter(|b| ng(*b)) {
                    let mut db = vec![T::zero(); m];
                    for row in g.data().chunks(m) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(grads, b, Tensor::from_vec(&[m], db));
                }
            }
            Op::Bmm { a, b, ta, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if ng(*a) {
                    // dA_op = dC·op(B)ᵀ; stored A is its transpose when ta.
                    let da = if *ta { kernels::bmm(bv, g, *tb, true) } else { kernels::bmm(g, bv, false, !*tb) };
                    accumulate(grads, *a, da);
                }
                if ng(*b) {
                    // dB_op = op(A)ᵀ·dC; stored B is its transpose when tb.
                    let db = if *tb { kernels::bmm(g, av, true, *ta) } else { kernels::bmm(av, g, !*ta, false) };
                    accumulate(grads, *b, db);
                }
            }
            Op::Softmax(x) => {
                let d = *g.shape().last().unwrap();
                let mut dx = g.clone();
                for (dr, yr) in dx.data_mut().chunks_mut(d).zip(y.data().chunks(d)) {
                    let dot: T = dr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for (dv, &yv) in dr.iter_mut().zip(yr) {
                        *dv = yv * (*dv - dot);
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Sum(x) => {
                let gv = g.data()[0];
                accumulate(grads, *x, Tensor::full(self.shape(*x), gv));
            }
            Op::Mean(x) => {
                let n = T::from_usize(self.value(*x).len()).unwrap();
                accumulate(grads, *x, Tensor::full(self.shape(*x), g.data()[0] / n));
            }
            Op::MeanPerSample(x) => {
                let xs = self.shape(*x).to_vec();
                let n = xs[0];
                let per = self.value(*x).len() / n;
                let denom = T::from_usize(per).unwrap();
                let mut data = Vec::with_capacity(n * per);
                for &gv in g.data() {
                    data.extend(std::iter::repeat(gv / denom).take(per));
                }
                accumulate(grads, *x, Tensor::from_vec(&xs, data));
            }
            Op::MulPerSample(x, w) => {
                let n = self.shape(*x)[0];
                let per = self.value(*x).len() / n;
                let wv = self.value(*w);
                if ng(*x) {
                    let mut dx = g.clone();
                    for (chunk, &s) in dx.data_mut().chunks_mut(per).zip(wv.data()) {
                        for e in chunk {
                            *e *= s;
                        }
                    }
                    accumulate(grads, *x, dx);
                }
                if ng(*w) {
                    let data = g
                        .data()
                        .chunks(per)
                        .zip(self.value(*x).data().chunks(per))
                        .map(|(gc, xc)| gc.iter().zip(xc).map(|(&a, &b)| a * b).sum::<T>())
                        .collect();
                    accumulate(grads, *w, Tensor::from_vec(&[n], data));
                }
            }
            Op::Custom { inputs, op } => {
                let vals: Vec<&Tensor<T>> = inputs.iter().map(|v| self.value(*v)).collect();
                let needs: Vec<bool> = inputs.iter().map(|v| ng(*v)).collect();
                let out = op.backward(&vals, y, g, &needs);
                assert_eq!(out.len(), inputs.len(), "custom op {} returned wrong gradient count", op.name());
                for ((v, gi), need) in inputs.iter().zip(out).zip(needs) {
                    if let (true, Some(gi)) = (need, gi) {
                        assert_eq!(gi.shape(), self.shape(*v), "custom op {} gradient shape", op.name());
                        accumulate(grads, *v, gi);
                    }
                }
            }
        }
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn softplus<T: Scalar>(v: T) -> T {
    if v > T::lit(20.0) {
        v
    } else if v < T::lit(-20.0) {
        v.exp()
    } else {
        v.exp().ln_1p()
    }
}
