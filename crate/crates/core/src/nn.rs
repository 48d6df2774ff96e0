//! Layers built on the autodiff graph.
//!
//! Layers only hold [`ParamId`]s, so one network description serves every
//! scalar type; the weights live in a [`ParamStore`].

use cdc_tensor::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// A forward pass in progress: the tape plus the weights it reads.
pub struct Fwd<'p, T: Scalar> {
    pub g: Graph<T>,
    pub p: &'p ParamStore<T>,
}

impl<'p, T: Scalar> Fwd<'p, T> {
    pub fn train(p: &'p ParamStore<T>) -> Self {
        Self { g: Graph::new(), p }
    }

    pub fn inference(p: &'p ParamStore<T>) -> Self {
        Self { g: Graph::inference(), p }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.g.param(self.p, id)
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.g.constant(t)
    }
}

/// Registers parameters under a dotted name prefix.
pub struct Builder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, T: Scalar> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Self { store, rng, prefix: String::new() }
    }

    pub fn sub(&mut self, name: &str) -> Builder<'_, T> {
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        Builder { store: self.store, rng: self.rng, prefix }
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn add(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        let full = self.full(name);
        self.store.add(full, value)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> ParamId {
        let data = (0..shape.iter().product::<usize>()).map(|_| T::lit(self.rng.gen_range(-bound..=bound))).collect();
        self.add(name, Tensor::from_vec(shape, data))
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], v: f64) -> ParamId {
        self.add(name, Tensor::full(shape, T::lit(v)))
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<T: Scalar>(pb: &mut Builder<T>, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        Self::with_pad(pb, name, cin, cout, k, stride, k / 2)
    }

    pub fn with_pad<T: Scalar>(pb: &mut Builder<T>, name: &str, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Self {
        let mut pb = pb.sub(name);
        let bound = 1.0 / ((cin * k * k) as f64).sqrt();
        let w = pb.uniform("weight", &[cout, cin, k, k], bound);
        let b = pb.zeros("bias", &[cout]);
        Self { w, b, stride, pad }
    }

    /// Output starts at exactly zero.
    pub fn zeroed<T: Scalar>(pb: &mut Builder<T>, name: &str, cin: usize, cout: usize, k: usize) -> Self {
        let mut pb = pb.sub(name);
        let w = pb.zeros("weight", &[cout, cin, k, k]);
        let b = pb.zeros("bias", &[cout]);
        Self { w, b, stride: 1, pad: k / 2 }
    }

    pub fn forward<T: Scalar>(&self, f: &mut Fwd<T>, x: Var) -> Var {
        let w = f.param(self.w);
        let b = f.param(self.b);
        f.g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

/// Transposed convolution, kernel 4, stride 2, padding 1: exact 2× upsampling.
#[derive(Clone, Debug)]
pub struct Up2 {
    pub w: ParamId,
    pub b: ParamId,
}

impl Up2 {
    pub fn new<T: Scalar>(pb: &mut Builder<T>, name: &str, cin: usize, cout: usize) -> Self {
        let mut pb = pb.sub(name);
        let bound = 1.0 / ((cin * 4) as f64).sqrt();
        let w = pb.uniform("weight", &[cin, cout, 4, 4], bound);
        let b = pb.zeros("bias", &[cout]);
        Self { w, b }
    }

    pub fn forward<T: Scalar>(&self, f: &mut Fwd<T>, x: Var) -> Var {
        let w = f.param(self.w);
        let b = f.param(self.b);
        f.g.conv_transpose2d(x, w, Some(b), 2, 1)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<T: Scalar>(pb: &mut Builder<T>, name: &str, cin: usize, cout: usize) -> Self {
        let mut pb = pb.sub(name);
        let bound = 1.0 / (cin as f64).sqrt();
        let w = pb.uniform("weight", &[cout, cin], bound);
        let b = pb.zeros("bias", &[cout]);
        Self { w, b }
    }

    pub fn forward<T: Scalar>(&self, f: &mut Fwd<T>, x: Var) -> Var {
        let w = f.param(self.w);
        let b = f.param(self.b);
        f.g.linear(x, w, Some(b))
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

pub fn groups_for(c: usize) -> usize {
    (1..=8).rev().find(|g| c % g == 0).unwrap()
}

impl GroupNorm {
    pub fn new<T: Scalar>(pb: &mut Builder<T>, name: &str, c: usize) -> Self {
        let mut pb = pb.sub(name);
        let gamma = pb.constant("weight", &[c], 1.0);
        let beta = pb.zeros("bias", &[c]);
        Self { gamma, beta, groups: groups_for(c) }
    }

    pub fn forward<T: Scalar>(&self, f: &mut Fwd<T>, x: Var) -> Var {
        let gamma = f.param(self.gamma);
        let beta = f.param(self.beta);
        f.g.group_norm(x, gamma, beta, self.groups)
    }
}

/// Pre-activation residual block with an optional additive time embedding
/// between the two convolutions.
#[derive(Clone, Debug)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    temb: Option<Linear>,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn new<T: Scalar>(pb: &mut Builder<T>, name: &str, cin: usize, cout: usize, temb_dim: Option<usize>) -> Self {
        let mut pb = pb.sub(name);
        Self {
            norm1: GroupNorm::new(&mut pb, "norm1", cin),
            conv1: Conv2d::new(&mut pb, "conv1", cin, cout, 3, 1),
            temb: temb_dim.map(|d| Linear::new(&mut pb, "temb", d, cout)),
            norm2: GroupNorm::new(&mut pb, "norm2", cout),
            conv2: Conv2d::new(&mut pb, "conv2", cout, cout, 3, 1),
            skip: (cin != cout).then(|| Conv2d::new(&mut pb, "skip", cin, cout, 1, 1)),
        }
    }

    pub fn forward<T: Scalar>(&self, f: &mut Fwd<T>, x: Var, temb: Option<Var>) -> Var {
        let h = self.norm1.forward(f, x);
        let h = f.g.silu(h);
        let mut h = self.conv1.forward(f, h);
        if let (Some(lin), Some(t)) = (&self.temb, temb) {
            let e = lin.forward(f, t);
            h = f.g.add_channel(h, e);
        }
        let h = self.norm2.forward(f, h);
        let h = f.g.silu(h);
        let h = self.conv2.forward(f, h);
        let skip = match &self.skip {
            Some(s) => s.forward(f, x),
            None => x,
        };
        f.g.add(skip, h)
    }
}

/// Single-head spatial self-attention with a residual connection.
#[derive(Clone, Debug)]
pub struct Attention {
    norm: GroupNorm,
    q: Conv2d,
    k: Conv2d,
    v: Conv2d,
    proj: Conv2d,
}

impl Attention {
    pub fn new<T: Scalar>(pb: &mut Builder<T>, name: &str, c: usize) -> Self {
        let mut pb = pb.sub(name);
        Self {
            norm: GroupNorm::new(&mut pb, "norm", c),
            q: Conv2d::new(&mut pb, "q", c, c, 1, 1),
            k: Conv2d::new(&mut pb, "k", c, c, 1, 1),
            v: Conv2d::new(&mut pb, "v", c, c, 1, 1),
            proj: Conv2d::new(&mut pb, "proj", c, c, 1, 1),
        }
    }

    pub fn forward<T: Scalar>(&self, f: &mut Fwd<T>, x: Var) -> Var {
        let shape = f.g.shape(x).to_vec();
        let (n, c, l) = (shape[0], shape[1], shape[2] * shape[3]);
        let h = self.norm.forward(f, x);
        let q = self.q.forward(f, h);
        let k = self.k.forward(f, h);
        let v = self.v.forward(f, h);
        let q = f.g.reshape(q, &[n, c, l]);
        let k = f.g.reshape(k, &[n, c, l]);
        let v = f.g.reshape(v, &[n, c, l]);
        let s = f.g.bmm(q, k, true, false);
        let s = f.g.scale(s, T::lit(1.0 / (c as f64).sqrt()));
        let a = f.g.softmax_last(s);
        let o = f.g.bmm(v, a, false, true);
        let o = f.g.reshape(o, &shape);
        let o = self.proj.forward(f, o);
        f.g.add(x, o)
    }
}

/// Fixed sinusoidal features of `t ∈ [0, 1]`, shape `[n, dim]`.
pub fn time_features<T: Scalar>(t: &[f64], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &tv in t {
        let pos = tv * 1000.0;
        for i in 0..half {
            let freq = (-(10000f64).ln() * i as f64 / half as f64).exp();
            data.push(T::lit((pos * freq).sin()));
        }
        for i in 0..half {
            let freq = (-(10000f64).ln() * i as f64 / half as f64).exp();
            data.push(T::lit((pos * freq).cos()));
        }
    }
    Tensor::from_vec(&[t.len(), 2 * half], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn groups_divide_channels() {
        assert_eq!(groups_for(32), 8);
        assert_eq!(groups_for(12), 6);
        assert_eq!(groups_for(3), 3);
        assert_eq!(groups_for(7), 7);
        assert_eq!(groups_for(11), 1);
    }

    #[test]
    fn blocks_preserve_spatial_shape() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut pb = Builder::new(&mut store, &mut rng);
        let rb = ResBlock::new(&mut pb, "rb", 8, 16, Some(4));
        let at = Attention::new(&mut pb, "at", 16);
        let mut f = Fwd::inference(&store);
        let x = f.input(Tensor::randn(&[2, 8, 6, 5], &mut ChaCha8Rng::seed_from_u64(1)));
        let t = f.input(time_features(&[0.1, 0.9], 4));
        let y = rb.forward(&mut f, x, Some(t));
        let y = at.forward(&mut f, y);
        assert_eq!(f.g.shape(y), &[2, 16, 6, 5]);
        assert!(f.g.value(y).all_finite());
        assert!(store.id("rb.temb.weight").is_some());
    }
}
