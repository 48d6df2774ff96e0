//! The learnable networks and the forward-diffusion algebra.

use cdc_tensor::{ParamStore, Scalar, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::entropy::{FactorizedPrior, HyperAnalysis, HyperSynthesis, Y_CHANNELS};
use crate::nn::{time_features, Attention, Builder, Conv2d, Fwd, GroupNorm, Linear, ResBlock, Up2};
use crate::schedule::{DiffusionSchedule, ScheduleParams};
use crate::{Error, Result};

/// Spatial downsampling of the content encoder.
pub const ENCODER_STRIDE: usize = 16;
/// Total downsampling down to the hyper-latent; images are padded to this.
pub const PAD_MULTIPLE: usize = 64;
/// Number of down units that receive the embedded latent.
const CONDITIONED_UNITS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameterization {
    EpsilonPred,
    XPred,
}

impl Parameterization {
    pub fn code(self) -> u8 {
        match self {
            Parameterization::EpsilonPred => 0,
            Parameterization::XPred => 1,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Parameterization::EpsilonPred),
            1 => Some(Parameterization::XPred),
            _ => None,
        }
    }

    /// Decoding steps used when none are requested.
    pub fn default_steps(self) -> usize {
        match self {
            Parameterization::EpsilonPred => 500,
            Parameterization::XPred => 17,
        }
    }
}

/// Network shape and diffusion setup; everything needed to rebuild a model
/// from its weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub preset: String,
    /// U-Net width at the first level; level `j` has `base · (j + 1)`.
    pub base_channels: usize,
    /// Number of U-Net levels (down units).
    pub depth: usize,
    pub blocks_per_unit: usize,
    /// Levels at or beyond this index get self-attention.
    pub attn_from_level: usize,
    pub enc_channels: usize,
    pub embed_channels: usize,
    pub c_z: usize,
    pub hyper_channels: usize,
    pub time_dim: usize,
    pub parameterization: Parameterization,
    pub schedule: ScheduleParams,
}

impl ArchConfig {
    /// Full-width network: six levels of width 64·j.
    pub fn paper() -> Self {
        Self {
            preset: "paper".into(),
            base_channels: 64,
            depth: 6,
            blocks_per_unit: 2,
            attn_from_level: 3,
            enc_channels: 64,
            embed_channels: 64,
            c_z: 64,
            hyper_channels: 192,
            time_dim: 128,
            parameterization: Parameterization::XPred,
            schedule: ScheduleParams::cosine_default(8193),
        }
    }

    pub fn desk() -> Self {
        Self {
            preset: "desk".into(),
            base_channels: 32,
            depth: 4,
            blocks_per_unit: 2,
            attn_from_level: 3,
            enc_channels: 32,
            embed_channels: 32,
            c_z: 64,
            hyper_channels: 128,
            time_dim: 64,
            ..Self::paper()
        }
    }

    /// Smallest useful network; sized for CPU test runs.
    pub fn small() -> Self {
        Self {
            preset: "small".into(),
            base_channels: 16,
            depth: 3,
            blocks_per_unit: 1,
            attn_from_level: 2,
            enc_channels: 16,
            embed_channels: 16,
            c_z: 64,
            hyper_channels: 64,
            time_dim: 32,
            ..Self::paper()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "desk" => Ok(Self::desk()),
            "small" => Ok(Self::small()),
            other => Err(Error::Config(format!("unknown model preset `{other}` (paper, desk, small)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.depth == 0 || self.base_channels == 0 || self.blocks_per_unit == 0 {
            return bad("depth, base_channels and blocks_per_unit must be positive");
        }
        if self.c_z == 0 || self.enc_channels == 0 || self.embed_channels == 0 || self.hyper_channels == 0 {
            return bad("channel counts must be positive");
        }
        if self.time_dim < 2 || self.time_dim % 2 != 0 {
            return bad("time_dim must be even and at least 2");
        }
        self.schedule.build().map(|_| ())
    }

    fn width(&self, level: usize) -> usize {
        self.base_channels * (level + 1)
    }
}

/// `Enc_φ`: a 7×7 stem, then four stages of residual block plus stride-2
/// convolution.
#[derive(Clone, Debug)]
pub struct Encoder {
    stem: Conv2d,
    stages: Vec<(ResBlock, Conv2d)>,
    out: Conv2d,
}

impl Encoder {
    fn new<T: Scalar>(pb: &mut Builder<T>, a: &ArchConfig) -> Self {
        let mut pb = pb.sub("encoder");
        let widths: Vec<usize> = (0..=4).map(|i| a.enc_channels * (i + 1).min(4)).collect();
        let stem = Conv2d::new(&mut pb, "stem", 3, widths[0], 7, 1);
        let stages = (0..4)
            .map(|i| {
                let rb = ResBlock::new(&mut pb, &format!("stage{i}.res"), widths[i], widths[i], None);
                let down = Conv2d::new(&mut pb, &format!("stage{i}.down"), widths[i], widths[i + 1], 3, 2);
                (rb, down)
            })
            .collect();
        let out = Conv2d::new(&mut pb, "out", widths[4], a.c_z, 3, 1);
        Self { stem, stages, out }
    }

    fn forward<T: Scalar>(&self, f: &mut Fwd<T>, x: Var) -> Var {
        let mut h = self.stem.forward(f, x);
        for (rb, down) in &self.stages {
            h = rb.forward(f, h, None);
            h = down.forward(f, h);
        }
        self.out.forward(f, h)
    }
}

/// Upsamples the content latent to the input resolutions of the first
/// down units.
#[derive(Clone, Debug)]
pub struct Embedder {
    stem: Conv2d,
    res: ResBlock,
    ups: Vec<(Up2, ResBlock)>,
}

impl Embedder {
    fn new<T: Scalar>(pb: &mut Builder<T>, a: &ArchConfig) -> Self {
        let mut pb = pb.sub("embedder");
        let e = a.embed_channels;
        let stem = Conv2d::new(&mut pb, "stem", a.c_z, e, 3, 1);
        let res = ResBlock::new(&mut pb, "res", e, e, None);
        let ups = (0..4)
            .map(|i| (Up2::new(&mut pb, &format!("up{i}.conv"), e, e), ResBlock::new(&mut pb, &format!("up{i}.res"), e, e, None)))
            .collect();
        Self { stem, res, ups }
    }

    /// Feature maps at `H/2^j` for `j = 0..levels`, finest first.
    fn forward<T: Scalar>(&self, f: &mut Fwd<T>, z: Var, levels: usize) -> Vec<Var> {
        let h = self.stem.forward(f, z);
        let mut h = self.res.forward(f, h, None);
        let mut outs = Vec::new();
        for (up, rb) in &self.ups {
            h = up.forward(f, h);
            h = rb.forward(f, h, None);
            outs.push(h);
        }
        outs.reverse();
        outs.truncate(levels);
        outs
    }
}

#[derive(Clone, Debug)]
struct Unit {
    blocks: Vec<ResBlock>,
    attn: Option<Attention>,
    resample: Option<Conv2d>,
}

/// The conditional denoiser.
#[derive(Clone, Debug)]
pub struct UNet {
    time_dim: usize,
    time_mlp: Linear,
    stem: Conv2d,
    down: Vec<Unit>,
    mid: ResBlock,
    up: Vec<Unit>,
    out_norm: GroupNorm,
    out: Conv2d,
}

impl UNet {
    fn new<T: Scalar>(pb: &mut Builder<T>, a: &ArchConfig) -> Self {
        let mut pb = pb.sub("unet");
        let temb = 4 * a.base_channels;
        let time_mlp = Linear::new(&mut pb, "time", a.time_dim, temb);
        let stem = Conv2d::new(&mut pb, "stem", 3, a.width(0), 7, 1);
        let cond_levels = a.depth.min(CONDITIONED_UNITS);
        let mut down = Vec::new();
        let mut ch = a.width(0);
        for j in 0..a.depth {
            let w = a.width(j);
            let mut cin = ch + if j < cond_levels { a.embed_channels } else { 0 };
            let blocks = (0..a.blocks_per_unit)
                .map(|b| {
                    let rb = ResBlock::new(&mut pb, &format!("down{j}.res{b}"), cin, w, Some(temb));
                    cin = w;
                    rb
                })
                .collect();
            let attn = (j >= a.attn_from_level).then(|| Attention::new(&mut pb, &format!("down{j}.attn"), w));
            let resample = (j + 1 < a.depth).then(|| Conv2d::new(&mut pb, &format!("down{j}.down"), w, w, 3, 2));
            down.push(Unit { blocks, attn, resample });
            ch = w;
        }
        let mid = ResBlock::new(&mut pb, "mid", ch, ch, Some(temb));
        let mut up = Vec::new();
        for j in (0..a.depth).rev() {
            let w = a.width(j);
            let mut cin = ch + w;
            let blocks = (0..a.blocks_per_unit)
                .map(|b| {
                    let rb = ResBlock::new(&mut pb, &format!("up{j}.res{b}"), cin, w, Some(temb));
                    cin = w;
                    rb
                })
                .collect();
            let attn = (j >= a.attn_from_level).then(|| Attention::new(&mut pb, &format!("up{j}.attn"), w));
            let resample = (j > 0).then(|| Conv2d::new(&mut pb, &format!("up{j}.up"), w, a.width(j - 1), 3, 1));
            up.push(Unit { blocks, attn, resample });
            ch = if j > 0 { a.width(j - 1) } else { w };
        }
        let out_norm = GroupNorm::new(&mut pb, "out_norm", ch);
        let out = Conv2d::zeroed(&mut pb, "out", ch, 3, 3);
        Self { time_dim: a.time_dim, time_mlp, stem, down, mid, up, out_norm, out }
    }

    fn forward<T: Scalar>(&self, f: &mut Fwd<T>, x: Var, t: &[f64], cond: &[Var]) -> Var {
        let tf = f.input(time_features(t, self.time_dim));
        let temb = self.time_mlp.forward(f, tf);
        let temb = f.g.silu(temb);
        let mut h = self.stem.forward(f, x);
        let mut skips = Vec::with_capacity(self.down.len());
        for (j, unit) in self.down.iter().enumerate() {
            if let Some(&c) = cond.get(j) {
                h = f.g.concat(&[h, c]);
            }
            for rb in &unit.blocks {
                h = rb.forward(f, h, Some(temb));
            }
            if let Some(at) = &unit.attn {
                h = at.forward(f, h);
            }
            skips.push(h);
            if let Some(d) = &unit.resample {
                h = d.forward(f, h);
            }
        }
        h = self.mid.forward(f, h, Some(temb));
        for unit in &self.up {
            let skip = skips.pop().unwrap();
            h = f.g.concat(&[h, skip]);
            for rb in &unit.blocks {
                h = rb.forward(f, h, Some(temb));
            }
            if let Some(at) = &unit.attn {
                h = at.forward(f, h);
            }
            if let Some(c) = &unit.resample {
                h = f.g.upsample2x(h);
                h = c.forward(f, h);
            }
        }
        let h = self.out_norm.forward(f, h);
        let h = f.g.silu(h);
        self.out.forward(f, h)
    }
}

#[derive(Clone, Debug)]
pub struct Networks {
    pub encoder: Encoder,
    pub hyper_a: HyperAnalysis,
    pub hyper_s: HyperSynthesis,
    pub prior: FactorizedPrior,
    pub embedder: Embedder,
    pub unet: UNet,
}

/// Weights plus the network description that reads them.
#[derive(Clone)]
pub struct Model<T: Scalar> {
    pub arch: ArchConfig,
    pub params: ParamStore<T>,
    pub net: Networks,
    schedule: DiffusionSchedule,
}

impl<T: Scalar> Model<T> {
    pub fn new(arch: ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let schedule = arch.schedule.build()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = {
            let mut pb = Builder::new(&mut params, &mut rng);
            Networks {
                encoder: Encoder::new(&mut pb, &arch),
                hyper_a: HyperAnalysis::new(&mut pb, "hyper_a", arch.c_z, arch.hyper_channels),
                hyper_s: HyperSynthesis::new(&mut pb, "hyper_s", arch.c_z, arch.hyper_channels),
                prior: FactorizedPrior::new(&mut pb, "prior", Y_CHANNELS),
                embedder: Embedder::new(&mut pb, &arch),
                unet: UNet::new(&mut pb, &arch),
            }
        };
        Ok(Self { arch, params, net, schedule })
    }

    /// Rebuild the network for `arch` and take weights from `params` by name.
    pub fn from_params(arch: ArchConfig, params: ParamStore<T>) -> Result<Self> {
        let mut m = Self::new(arch, 0)?;
        if params.len() != m.params.len() {
            return Err(Error::Checkpoint(format!("expected {} tensors, found {}", m.params.len(), params.len())));
        }
        let ids: Vec<_> = m.params.ids().collect();
        for id in ids {
            let name = m.params.name(id).to_string();
            let src = params.id(&name).ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            let t = params.get(src);
            if t.shape() != m.params.get(id).shape() {
                return Err(Error::Checkpoint(format!("tensor {name} has shape {:?}, expected {:?}", t.shape(), m.params.get(id).shape())));
            }
            m.params.set(id, t.clone());
        }
        Ok(m)
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model { arch: self.arch.clone(), params: self.params.cast(), net: self.net.clone(), schedule: self.schedule.clone() }
    }

    pub fn schedule(&self) -> &DiffusionSchedule {
        &self.schedule
    }

    pub fn parameterization(&self) -> Parameterization {
        self.arch.parameterization
    }

    /// 16-byte identity of the architecture and weights.
    pub fn model_id(&self) -> [u8; 16] {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.arch).expect("arch serializes"));
        for (_, name, t) in self.params.iter() {
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in t.data() {
                h.update((v.as_f64() as f32).to_le_bytes());
            }
        }
        let mut id = [0u8; 16];
        id.copy_from_slice(&h.finalize()[..16]);
        id
    }

    pub fn encode(&self, f: &mut Fwd<T>, x: Var) -> Var {
        self.net.encoder.forward(f, x)
    }

    pub fn hyper_analyze(&self, f: &mut Fwd<T>, z: Var) -> Var {
        self.net.hyper_a.forward(f, z)
    }

    pub fn hyper_synthesize(&self, f: &mut Fwd<T>, y: Var) -> (Var, Var) {
        self.net.hyper_s.forward(f, y)
    }

    pub fn embed(&self, f: &mut Fwd<T>, z: Var) -> Vec<Var> {
        self.net.embedder.forward(f, z, self.arch.depth.min(CONDITIONED_UNITS))
    }

    /// Raw network output: x̂₀ or ε̂ depending on the parameterization.
    pub fn denoise(&self, f: &mut Fwd<T>, x_n: Var, t: &[f64], cond: &[Var]) -> Var {
        self.net.unet.forward(f, x_n, t, cond)
    }

    /// `Enc_φ(x)` for an image batch whose sides are multiples of 16.
    pub fn encode_content(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        check_image(x, ENCODER_STRIDE)?;
        let mut f = Fwd::inference(&self.params);
        let xv = f.input(x.clone());
        let z = self.encode(&mut f, xv);
        Ok(f.g.value(z).clone())
    }

    pub fn hyper_analyze_tensor(&self, z: &Tensor<T>) -> Tensor<T> {
        let mut f = Fwd::inference(&self.params);
        let zv = f.input(z.clone());
        let y = self.hyper_analyze(&mut f, zv);
        f.g.value(y).clone()
    }

    /// `(μ, σ)` of the conditional Gaussian over `z`.
    pub fn hyper_synthesize_tensor(&self, y: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
        let mut f = Fwd::inference(&self.params);
        let yv = f.input(y.clone());
        let (mu, sigma) = self.hyper_synthesize(&mut f, yv);
        (f.g.value(mu).clone(), f.g.value(sigma).clone())
    }

    /// Embedder outputs for a latent; constant across decoding steps.
    pub fn conditioning(&self, z: &Tensor<T>) -> Vec<Tensor<T>> {
        let mut f = Fwd::inference(&self.params);
        let zv = f.input(z.clone());
        self.embed(&mut f, zv).into_iter().map(|v| f.g.value(v).clone()).collect()
    }

    /// One denoiser evaluation against precomputed conditioning.
    pub fn denoise_with(&self, x_n: &Tensor<T>, t: &[f64], cond: &[Tensor<T>]) -> Tensor<T> {
        let mut f = Fwd::inference(&self.params);
        let xv = f.input(x_n.clone());
        let cv: Vec<Var> = cond.iter().map(|c| f.input(c.clone())).collect();
        let out = self.denoise(&mut f, xv, t, &cv);
        f.g.value(out).clone()
    }

    pub fn denoise_predict(&self, x_n: &Tensor<T>, z: &Tensor<T>, t: &[f64]) -> Result<Tensor<T>> {
        check_image(x_n, PAD_MULTIPLE.min(ENCODER_STRIDE))?;
        if t.len() != x_n.shape()[0] || t.iter().any(|&v| !(v > 0.0 && v <= 1.0)) {
            return Err(Error::InvalidRange("t_frac must be in (0, 1], one per sample".into()));
        }
        let (_, _, h, w) = x_n.dims4();
        let (_, _, zh, zw) = z.dims4();
        if zh * ENCODER_STRIDE != h || zw * ENCODER_STRIDE != w {
            return Err(Error::Shape(format!("latent {zh}x{zw} does not match image {h}x{w}")));
        }
        let cond = self.conditioning(z);
        Ok(self.denoise_with(x_n, t, &cond))
    }
}

fn check_image<T: Scalar>(x: &Tensor<T>, multiple: usize) -> Result<()> {
    if x.shape().len() != 4 || x.shape()[1] != 3 {
        return Err(Error::Shape(format!("expected [n, 3, h, w], got {:?}", x.shape())));
    }
    let (_, _, h, w) = x.dims4();
    if h == 0 || w == 0 || h % multiple != 0 || w % multiple != 0 {
        return Err(Error::Shape(format!("image {h}x{w} is not a multiple of {multiple}")));
    }
    Ok(())
}

/// `√ᾱ·x₀ + √(1−ᾱ)·ε`.
pub fn forward_diffuse<T: Scalar>(x0: &Tensor<T>, alpha_bar: f64, eps: &Tensor<T>) -> Tensor<T> {
    let (a, b) = (T::lit(alpha_bar.sqrt()), T::lit((1.0 - alpha_bar).sqrt()));
    x0.zip_map(eps, |x, e| a * x + b * e)
}

/// Forward diffusion to training index `n` of a schedule.
pub fn forward_diffuse_at<T: Scalar>(x0: &Tensor<T>, n: usize, eps: &Tensor<T>, schedule: &DiffusionSchedule) -> Result<Tensor<T>> {
    if n > schedule.n_train() {
        return Err(Error::InvalidRange(format!("step {n} beyond {}", schedule.n_train())));
    }
    if x0.shape() != eps.shape() {
        return Err(Error::Shape(format!("noise {:?} vs image {:?}", eps.shape(), x0.shape())));
    }
    Ok(forward_diffuse(x0, schedule.alpha_bar(n), eps))
}

/// `(x_n − √ᾱ·x̂₀) / √(1−ᾱ)`.
pub fn epsilon_from_x0<T: Scalar>(x_n: &Tensor<T>, x0_hat: &Tensor<T>, alpha_bar: f64) -> Result<Tensor<T>> {
    if alpha_bar >= 1.0 - 1e-12 {
        return Err(Error::DivisionGuard(alpha_bar));
    }
    if !(alpha_bar > 0.0) {
        return Err(Error::InvalidRange(format!("alpha_bar {alpha_bar} must be positive")));
    }
    let (a, b) = (T::lit(alpha_bar.sqrt()), T::lit(1.0 / (1.0 - alpha_bar).sqrt()));
    Ok(x_n.zip_map(x0_hat, |x, x0| (x - a * x0) * b))
}

/// `(x_n − √(1−ᾱ)·ε̂) / √ᾱ`.
pub fn x0_from_epsilon<T: Scalar>(x_n: &Tensor<T>, eps_hat: &Tensor<T>, alpha_bar: f64) -> Result<Tensor<T>> {
    if !(alpha_bar > 0.0 && alpha_bar <= 1.0) {
        return Err(Error::InvalidRange(format!("alpha_bar {alpha_bar} must lie in (0, 1]")));
    }
    let (a, b) = (T::lit(1.0 / alpha_bar.sqrt()), T::lit((1.0 - alpha_bar).sqrt()));
    Ok(x_n.zip_map(eps_hat, |x, e| (x - b * e) * a))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn forward_diffuse_examples() {
        let x0 = Tensor::<f64>::zeros(&[1, 3, 2, 2]);
        let eps = Tensor::full(&[1, 3, 2, 2], 1.0);
        let out = forward_diffuse(&x0, 0.3024, &eps);
        assert!(out.data().iter().all(|&v| (v - 0.6976f64.sqrt()).abs() < 1e-15));
        assert!((0.6976f64.sqrt() - 0.83522).abs() < 1e-5);
        let x0 = Tensor::<f64>::full(&[4], 0.5);
        assert_eq!(forward_diffuse(&x0, 1.0, &Tensor::full(&[4], 9.0)), x0);
        assert_eq!(forward_diffuse(&x0, 0.25, &Tensor::zeros(&[4])).data(), &[0.25; 4]);
    }

    #[test]
    fn epsilon_conversion_examples() {
        let e = epsilon_from_x0(&Tensor::<f64>::scalar(1.0), &Tensor::scalar(1.0), 0.75).unwrap();
        assert!((e.data()[0] - 0.267_949).abs() < 1e-5);
        let e = epsilon_from_x0(&Tensor::<f64>::scalar(0.6), &Tensor::scalar(0.0), 0.64).unwrap();
        assert!((e.data()[0] - 1.0).abs() < 1e-12);
        assert!(matches!(epsilon_from_x0(&Tensor::<f64>::scalar(0.0), &Tensor::scalar(0.0), 1.0), Err(Error::DivisionGuard(_))));
    }

    #[test]
    fn encoder_downsamples_by_sixteen() {
        let m = Model::<f32>::new(ArchConfig::small(), 1).unwrap();
        let x = Tensor::zeros(&[1, 3, 48, 32]);
        let z = m.encode_content(&x).unwrap();
        assert_eq!(z.shape(), &[1, 64, 3, 2]);
        assert!(m.encode_content(&Tensor::zeros(&[1, 3, 40, 32])).is_err());
    }

    #[test]
    fn untrained_denoiser_predicts_zero() {
        let m = Model::<f32>::new(ArchConfig::small(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::randn(&[2, 3, 64, 64], &mut rng);
        let z = Tensor::randn(&[2, 64, 4, 4], &mut rng);
        let out = m.denoise_predict(&x, &z, &[0.5, 1.0]).unwrap();
        assert_eq!(out.shape(), x.shape());
        assert!(out.data().iter().all(|&v| v == 0.0));
        assert!(m.denoise_predict(&x, &z, &[0.0, 1.0]).is_err());
    }

    #[test]
    fn hyper_path_shapes() {
        let m = Model::<f32>::new(ArchConfig::small(), 3).unwrap();
        let z = Tensor::zeros(&[1, 64, 16, 16]);
        let y = m.hyper_analyze_tensor(&z);
        assert_eq!(y.shape(), &[1, 256, 4, 4]);
        let (mu, sigma) = m.hyper_synthesize_tensor(&y);
        assert_eq!(mu.shape(), z.shape());
        assert!(sigma.data().iter().all(|&s| s as f64 >= crate::entropy::SIGMA_MIN - 1e-7));
    }

    #[test]
    fn model_id_tracks_weights() {
        let a = Model::<f32>::new(ArchConfig::small(), 4).unwrap();
        let b = Model::<f32>::new(ArchConfig::small(), 4).unwrap();
        let c = Model::<f32>::new(ArchConfig::small(), 5).unwrap();
        assert_eq!(a.model_id(), b.model_id());
        assert_ne!(a.model_id(), c.model_id());
        let d = Model::from_params(a.arch.clone(), a.params.clone()).unwrap();
        assert_eq!(d.model_id(), a.model_id());
    }
}
