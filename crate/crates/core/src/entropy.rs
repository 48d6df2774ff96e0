//! Quantization, the two-level hyperprior, and discretization of densities
//! into fixed-point coding tables.

use std::f64::consts::{LN_2, SQRT_2};

use cdc_tensor::{CustomOp, Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use rand::Rng;

use crate::nn::{Builder, Conv2d, Fwd, Up2};
use crate::range_coder::{FREQ_BITS, FREQ_TOTAL};
use crate::{Error, Result};

/// Lower bound on the scale of the conditional Gaussian.
pub const SIGMA_MIN: f64 = 0.04;
/// Probabilities are floored here before taking logs.
pub const PROB_FLOOR: f64 = 1.0 / (1u64 << 24) as f64;
/// Channels of the hyper-latent.
pub const Y_CHANNELS: usize = 256;
/// Hard cap on coded symbol magnitude; anything beyond is escaped.
pub const SYMBOL_CAP: i32 = 255;

/// Additive uniform noise on (−½, ½); the gradient passes straight through.
pub fn quantize_train<T: Scalar, R: Rng + ?Sized>(g: &mut Graph<T>, v: Var, rng: &mut R) -> Var {
    let noise = uniform_noise(g.shape(v), rng);
    let u = g.constant(noise);
    g.add(v, u)
}

/// I.i.d. samples from the open interval (−½, ½).
pub fn uniform_noise<T: Scalar, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let u: f64 = rng.gen_range(-0.5..0.5);
            if u != -0.5 {
                break T::lit(u);
            }
        })
        .collect();
    Tensor::from_vec(shape, data)
}

/// Round half away from zero.
pub fn quantize_test(v: f64) -> i32 {
    v.round() as i32
}

pub fn quantize_tensor<T: Scalar>(t: &Tensor<T>) -> Vec<i32> {
    t.data().iter().map(|v| quantize_test(v.as_f64())).collect()
}

/// Standard normal CDF.
pub fn phi(x: f64) -> f64 {
    0.5 * libm::erfc(-x / SQRT_2)
}

/// Mass of N(μ, σ²) on `[a, b]`, accurate in both tails.
pub fn gaussian_mass(mu: f64, sigma: f64, a: f64, b: f64) -> f64 {
    let (a, b) = ((a - mu) / sigma, (b - mu) / sigma);
    if a > 0.0 {
        phi(-a) - phi(-b)
    } else {
        phi(b) - phi(a)
    }
}

/// A distribution over the reals that can be discretized.
pub trait IntervalMass {
    /// Probability of `[a, b]`; `a` may be −∞ and `b` may be +∞.
    fn mass(&self, a: f64, b: f64) -> f64;
}

#[derive(Clone, Copy, Debug)]
pub struct Gaussian {
    pub mu: f64,
    pub sigma: f64,
}

impl IntervalMass for Gaussian {
    fn mass(&self, a: f64, b: f64) -> f64 {
        gaussian_mass(self.mu, self.sigma, a, b)
    }
}

/// `P(k) = F(k + ½) − F(k − ½)` over `[lo, hi]`, with both tails folded into
/// the edge symbols so the row sums to one.
pub fn discretize(dist: &impl IntervalMass, lo: i32, hi: i32) -> Vec<f64> {
    assert!(lo <= hi, "empty support [{lo}, {hi}]");
    (lo..=hi)
        .map(|k| {
            let a = if k == lo { f64::NEG_INFINITY } else { k as f64 - 0.5 };
            let b = if k == hi { f64::INFINITY } else { k as f64 + 0.5 };
            dist.mass(a, b)
        })
        .collect()
}

pub fn gaussian_pmf(mu: f64, sigma: f64, lo: i32, hi: i32) -> Result<Vec<f64>> {
    if !(sigma >= SIGMA_MIN) {
        return Err(Error::DegenerateScale { sigma, min: SIGMA_MIN });
    }
    Ok(discretize(&Gaussian { mu, sigma }, lo, hi))
}

/// Fixed-point frequencies for a probability row plus a trailing escape
/// symbol of frequency 1. The result sums to exactly `2^16` and every entry is
/// at least 1.
///
/// Each symbol gets `1 + ⌊p·R⌋` with `R = 2^16 − n − 1`; the leftover goes to
/// the most probable symbol (lowest index on ties).
pub fn quantize_pmf(probs: &[f64]) -> Vec<u32> {
    let n = probs.len();
    assert!(n >= 1 && n + 1 < FREQ_TOTAL as usize, "row of {n} symbols does not fit {FREQ_BITS}-bit precision");
    let spare = FREQ_TOTAL as u64 - n as u64 - 1;
    let mut freqs: Vec<u32> = probs
        .iter()
        .map(|&p| {
            let p = if p.is_finite() { p.clamp(0.0, 1.0) } else { 0.0 };
            1 + (p * spare as f64).floor().min(spare as f64) as u32
        })
        .collect();
    let used: u64 = freqs.iter().map(|&f| f as u64 - 1).sum();
    let mut best = 0;
    for i in 1..n {
        if probs[i] > probs[best] {
            best = i;
        }
    }
    if used <= spare {
        freqs[best] += (spare - used) as u32;
    } else {
        // Only reachable when the input row sums to more than one.
        let mut excess = used - spare;
        for f in freqs.iter_mut() {
            let take = (*f as u64 - 1).min(excess);
            *f -= take as u32;
            excess -= take;
        }
    }
    freqs.push(1);
    freqs
}

/// `−log2` of a probability after flooring.
pub fn bits_of(p: f64) -> f64 {
    -(p.max(PROB_FLOOR)).log2()
}

fn std_pdf<T: Scalar>(u: T) -> T {
    (-(u * u) * T::lit(0.5)).exp() * T::lit(1.0 / (2.0 * std::f64::consts::PI).sqrt())
}

/// Per-element bits of `v` under N(μ, σ²) discretized to unit bins, and the
/// derivatives `(∂bits/∂v, ∂bits/∂σ)`.
fn gaussian_bits_elem<T: Scalar>(v: T, mu: T, sigma: T) -> (T, T, T) {
    let half = T::lit(0.5);
    let diff = v - mu;
    let d = diff.abs();
    let inv = T::one() / (sigma * T::lit(SQRT_2));
    let up = half * Scalar::erfc((d - half) * inv);
    let lo = half * Scalar::erfc((d + half) * inv);
    let p = up - lo;
    let floor = T::lit(PROB_FLOOR);
    let pc = p.max(floor);
    let bits = -pc.ln() / T::lit(LN_2);
    let u = (half - d) / sigma;
    let l = (-half - d) / sigma;
    let (pu, pl) = (std_pdf(u), std_pdf(l));
    let dp_dd = (pl - pu) / sigma;
    let dp_ds = (l * pl - u * pu) / sigma;
    let db_dp = -T::one() / (pc * T::lit(LN_2));
    (bits, db_dp * dp_dd * diff.signum(), db_dp * dp_ds)
}

struct GaussianBitsOp;

impl<T: Scalar> CustomOp<T> for GaussianBitsOp {
    fn name(&self) -> &'static str {
        "gaussian_bits"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _out: &Tensor<T>, grad: &Tensor<T>, _needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let (v, mu, sigma) = (inputs[0], inputs[1], inputs[2]);
        let n = v.len();
        let (mut dv, mut dmu, mut ds) = (vec![T::zero(); n], vec![T::zero(); n], vec![T::zero(); n]);
        for i in 0..n {
            let (_, gv, gs) = gaussian_bits_elem(v.data()[i], mu.data()[i], sigma.data()[i]);
            let g = grad.data()[i];
            dv[i] = g * gv;
            dmu[i] = -g * gv;
            ds[i] = g * gs;
        }
        let shape = v.shape();
        vec![
            Some(Tensor::from_vec(shape, dv)),
            Some(Tensor::from_vec(shape, dmu)),
            Some(Tensor::from_vec(shape, ds)),
        ]
    }
}

/// Elementwise `−log2 P(v)` under the discretized conditional Gaussian.
pub fn gaussian_bits<T: Scalar>(g: &mut Graph<T>, v: Var, mu: Var, sigma: Var) -> Var {
    let (vt, mt, st) = (g.value(v), g.value(mu), g.value(sigma));
    assert!(vt.shape() == mt.shape() && vt.shape() == st.shape(), "gaussian_bits shape mismatch");
    let data = (0..vt.len()).map(|i| gaussian_bits_elem(vt.data()[i], mt.data()[i], st.data()[i]).0).collect();
    let value = Tensor::from_vec(vt.shape(), data);
    g.custom(&[v, mu, sigma], value, Box::new(GaussianBitsOp))
}

/// Widths of the per-channel density network.
const FILTERS: [usize; 5] = [1, 3, 3, 3, 1];
const LAYERS: usize = FILTERS.len() - 1;

/// Per-channel non-parametric density for the hyper-latent: a monotone
/// 1-3-3-3-1 network whose output is the CDF logit.
#[derive(Clone, Debug)]
pub struct FactorizedPrior {
    pub channels: usize,
    matrices: Vec<ParamId>,
    biases: Vec<ParamId>,
    factors: Vec<ParamId>,
}

/// Channel-major views of the density weights with the monotonicity
/// reparameterizations applied.
struct Dens<T> {
    sp_m: Vec<Vec<T>>,
    sig_m: Vec<Vec<T>>,
    b: Vec<Vec<T>>,
    tanh_f: Vec<Vec<T>>,
}

struct Trace<T> {
    h: [[T; 3]; LAYERS],
    u: [[T; 3]; LAYERS],
}

impl<T: Scalar> Dens<T> {
    fn new(tensors: &[&Tensor<T>]) -> Self {
        let sp = |v: T| cdc_tensor::graph::softplus(v);
        let sg = |v: T| cdc_tensor::graph::sigmoid(v);
        let m = &tensors[..LAYERS];
        let b = &tensors[LAYERS..2 * LAYERS];
        let f = &tensors[2 * LAYERS..];
        Self {
            sp_m: m.iter().map(|t| t.data().iter().map(|&v| sp(v)).collect()).collect(),
            sig_m: m.iter().map(|t| t.data().iter().map(|&v| sg(v)).collect()).collect(),
            b: b.iter().map(|t| t.data().to_vec()).collect(),
            tanh_f: f.iter().map(|t| t.data().iter().map(|v| v.tanh()).collect()).collect(),
        }
    }

    fn logit(&self, c: usize, x: T) -> (T, Trace<T>) {
        let mut tr = Trace { h: [[T::zero(); 3]; LAYERS], u: [[T::zero(); 3]; LAYERS] };
        tr.h[0][0] = x;
        for k in 0..LAYERS {
            let (fi, fo) = (FILTERS[k], FILTERS[k + 1]);
            for o in 0..fo {
                let mut acc = self.b[k][c * fo + o];
                for i in 0..fi {
                    acc += self.sp_m[k][(c * fo + o) * fi + i] * tr.h[k][i];
                }
                tr.u[k][o] = acc;
                if k + 1 < LAYERS {
                    tr.h[k + 1][o] = acc + self.tanh_f[k][c * fo + o] * acc.tanh();
                }
            }
        }
        (tr.u[LAYERS - 1][0], tr)
    }

    /// Accumulate parameter gradients for one logit evaluation and return
    /// `∂logit/∂x · gl`.
    fn back(&self, c: usize, tr: &Trace<T>, gl: T, grads: &mut [Vec<T>]) -> T {
        let mut g_u = [T::zero(); 3];
        g_u[0] = gl;
        let mut g_h = [T::zero(); 3];
        for k in (0..LAYERS).rev() {
            let (fi, fo) = (FILTERS[k], FILTERS[k + 1]);
            if k + 1 < LAYERS {
                for o in 0..fo {
                    let t = tr.u[k][o].tanh();
                    let tf = self.tanh_f[k][c * fo + o];
                    // h = u + tanh(f)·tanh(u)
                    g_u[o] = g_h[o] * (T::one() + tf * (T::one() - t * t));
                    grads[2 * LAYERS + k][c * fo + o] += g_h[o] * t * (T::one() - tf * tf);
                }
            }
            let mut next = [T::zero(); 3];
            for o in 0..fo {
                grads[LAYERS + k][c * fo + o] += g_u[o];
                for i in 0..fi {
                    let idx = (c * fo + o) * fi + i;
                    grads[k][idx] += g_u[o] * tr.h[k][i] * self.sig_m[k][idx];
                    next[i] += g_u[o] * self.sp_m[k][idx];
                }
            }
            g_h = next;
        }
        g_h[0]
    }
}

/// `σ(a) − σ(b)` computed on the side of the logistic where it is accurate.
fn logistic_diff<T: Scalar>(a: T, b: T) -> T {
    let s = if a + b > T::zero() { -T::one() } else { T::one() };
    let sg = cdc_tensor::graph::sigmoid::<T>;
    (sg(s * a) - sg(s * b)).abs()
}

/// Bits of `v` plus the traces and logit cotangents needed for backward.
fn factorized_elem<T: Scalar>(d: &Dens<T>, c: usize, v: T) -> (T, (Trace<T>, Trace<T>, T, T)) {
    let half = T::lit(0.5);
    let (lu, tu) = d.logit(c, v + half);
    let (ll, tl) = d.logit(c, v - half);
    let p = logistic_diff(lu, ll);
    let pc = p.max(T::lit(PROB_FLOOR));
    let bits = -pc.ln() / T::lit(LN_2);
    let sg = cdc_tensor::graph::sigmoid::<T>;
    let db_dp = -T::one() / (pc * T::lit(LN_2));
    let dl_u = db_dp * sg(lu) * sg(-lu);
    let dl_l = -db_dp * sg(ll) * sg(-ll);
    (bits, (tu, tl, dl_u, dl_l))
}

struct FactorizedBitsOp {
    channels: usize,
}

impl<T: Scalar> CustomOp<T> for FactorizedBitsOp {
    fn name(&self) -> &'static str {
        "factorized_bits"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _out: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let y = inputs[0];
        let dens = Dens::new(&inputs[1..]);
        let mut pgrads: Vec<Vec<T>> = inputs[1..].iter().map(|t| vec![T::zero(); t.len()]).collect();
        let (n, c, h, w) = y.dims4();
        assert_eq!(c, self.channels);
        let hw = h * w;
        let mut dy = vec![T::zero(); y.len()];
        for i in 0..n {
            for ch in 0..c {
                for s in 0..hw {
                    let idx = (i * c + ch) * hw + s;
                    let (_, (tu, tl, dl_u, dl_l)) = factorized_elem(&dens, ch, y.data()[idx]);
                    let g = grad.data()[idx];
                    let dx_u = dens.back(ch, &tu, g * dl_u, &mut pgrads);
                    let dx_l = dens.back(ch, &tl, g * dl_l, &mut pgrads);
                    dy[idx] = dx_u + dx_l;
                }
            }
        }
        let mut out = vec![needs[0].then(|| Tensor::from_vec(y.shape(), dy))];
        for (t, gvec) in inputs[1..].iter().zip(pgrads) {
            out.push(Some(Tensor::from_vec(t.shape(), gvec)));
        }
        out
    }
}

impl FactorizedPrior {
    pub fn new<T: Scalar>(pb: &mut Builder<T>, name: &str, channels: usize) -> Self {
        let mut pb = pb.sub(name);
        let init_scale: f64 = 10.0;
        let scale = init_scale.powf(1.0 / LAYERS as f64);
        let mut matrices = Vec::new();
        let mut biases = Vec::new();
        let mut factors = Vec::new();
        for k in 0..LAYERS {
            let (fi, fo) = (FILTERS[k], FILTERS[k + 1]);
            let init = (1.0 / scale / fo as f64).exp_m1().ln();
            matrices.push(pb.constant(&format!("matrix{k}"), &[channels, fo, fi], init));
            let b = pb.uniform(&format!("bias{k}"), &[channels, fo], 0.5);
            biases.push(b);
            if k + 1 < LAYERS {
                factors.push(pb.zeros(&format!("factor{k}"), &[channels, fo]));
            }
        }
        Self { channels, matrices, biases, factors }
    }

    fn ids(&self) -> Vec<ParamId> {
        self.matrices.iter().chain(&self.biases).chain(&self.factors).copied().collect()
    }

    /// Elementwise `−log2 P(y)` for a `[n, channels, h, w]` tensor.
    pub fn bits<T: Scalar>(&self, f: &mut Fwd<T>, y: Var) -> Var {
        let ids = self.ids();
        let vars: Vec<Var> = ids.iter().map(|&id| f.param(id)).collect();
        let value = {
            let tensors: Vec<&Tensor<T>> = ids.iter().map(|&id| f.p.get(id)).collect();
            let dens = Dens::new(&tensors);
            let yt = f.g.value(y);
            let (_, c, h, w) = yt.dims4();
            assert_eq!(c, self.channels, "hyper-latent has {c} channels, prior expects {}", self.channels);
            let hw = h * w;
            let data = yt.data().iter().enumerate().map(|(i, &v)| factorized_elem(&dens, (i / hw) % c, v).0).collect();
            Tensor::from_vec(yt.shape(), data)
        };
        let mut inputs = vec![y];
        inputs.extend(vars);
        f.g.custom(&inputs, value, Box::new(FactorizedBitsOp { channels: self.channels }))
    }

    /// Evaluator for the per-channel CDFs in f64.
    pub fn densities<T: Scalar>(&self, p: &ParamStore<T>) -> ChannelDensities {
        let tensors: Vec<Tensor<f64>> = self.ids().iter().map(|&id| p.get(id).cast()).collect();
        let refs: Vec<&Tensor<f64>> = tensors.iter().collect();
        ChannelDensities { dens: Dens::new(&refs) }
    }
}

/// The learned prior of every hyper-latent channel, evaluated in f64.
pub struct ChannelDensities {
    dens: Dens<f64>,
}

impl ChannelDensities {
    pub fn logit(&self, channel: usize, x: f64) -> f64 {
        self.dens.logit(channel, x).0
    }

    pub fn cdf(&self, channel: usize, x: f64) -> f64 {
        cdc_tensor::graph::sigmoid(self.logit(channel, x))
    }

    pub fn channel(&self, channel: usize) -> ChannelDensity<'_> {
        ChannelDensity { d: self, c: channel }
    }

    /// Bits of `v` in `channel`, matching the training-time estimate.
    pub fn bits(&self, channel: usize, v: f64) -> f64 {
        factorized_elem(&self.dens, channel, v).0
    }
}

pub struct ChannelDensity<'a> {
    d: &'a ChannelDensities,
    c: usize,
}

impl IntervalMass for ChannelDensity<'_> {
    fn mass(&self, a: f64, b: f64) -> f64 {
        match (a.is_finite(), b.is_finite()) {
            (false, false) => 1.0,
            (false, true) => self.d.cdf(self.c, b),
            (true, false) => 1.0 - self.d.cdf(self.c, a),
            (true, true) => logistic_diff(self.d.logit(self.c, b), self.d.logit(self.c, a)),
        }
    }
}

/// Bits of each element of `v` under N(μ, σ²) discretized to unit bins.
pub fn gaussian_bits_value(v: f64, mu: f64, sigma: f64) -> f64 {
    gaussian_bits_elem(v, mu, sigma).0
}

/// `z → y`: 3×3 stride 1, then two 5×5 stride-2 convolutions.
#[derive(Clone, Debug)]
pub struct HyperAnalysis {
    c1: Conv2d,
    c2: Conv2d,
    c3: Conv2d,
}

impl HyperAnalysis {
    pub fn new<T: Scalar>(pb: &mut Builder<T>, name: &str, c_z: usize, hidden: usize) -> Self {
        let mut pb = pb.sub(name);
        Self {
            c1: Conv2d::new(&mut pb, "conv1", c_z, hidden, 3, 1),
            c2: Conv2d::new(&mut pb, "conv2", hidden, hidden, 5, 2),
            c3: Conv2d::new(&mut pb, "conv3", hidden, Y_CHANNELS, 5, 2),
        }
    }

    pub fn forward<T: Scalar>(&self, f: &mut Fwd<T>, z: Var) -> Var {
        let slope = T::lit(0.01);
        let h = self.c1.forward(f, z);
        let h = f.g.leaky_relu(h, slope);
        let h = self.c2.forward(f, h);
        let h = f.g.leaky_relu(h, slope);
        self.c3.forward(f, h)
    }
}

/// `ŷ → (μ, σ)` for the conditional Gaussian over `z`.
#[derive(Clone, Debug)]
pub struct HyperSynthesis {
    u1: Up2,
    u2: Up2,
    c3: Conv2d,
    c_z: usize,
}

impl HyperSynthesis {
    pub fn new<T: Scalar>(pb: &mut Builder<T>, name: &str, c_z: usize, hidden: usize) -> Self {
        let mut pb = pb.sub(name);
        Self {
            u1: Up2::new(&mut pb, "up1", Y_CHANNELS, hidden),
            u2: Up2::new(&mut pb, "up2", hidden, hidden),
            c3: Conv2d::new(&mut pb, "conv3", hidden, 2 * c_z, 3, 1),
            c_z,
        }
    }

    pub fn forward<T: Scalar>(&self, f: &mut Fwd<T>, y: Var) -> (Var, Var) {
        let slope = T::lit(0.01);
        let h = self.u1.forward(f, y);
        let h = f.g.leaky_relu(h, slope);
        let h = self.u2.forward(f, h);
        let h = f.g.leaky_relu(h, slope);
        let h = self.c3.forward(f, h);
        let mu = f.g.slice_channels(h, 0, self.c_z);
        let raw = f.g.slice_channels(h, self.c_z, self.c_z);
        let s = f.g.softplus(raw);
        let sigma = f.g.lower_bound(s, T::lit(SIGMA_MIN));
        (mu, sigma)
    }
}
