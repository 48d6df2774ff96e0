//! Compress an image to a `.cdc` container and decode it back with the
//! conditional DDIM sampler.

use cdc_tensor::{Scalar, Tensor};
use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::container::{Bitstream, Header};
use crate::dataset::{image_to_tensor, tensor_to_image};
use crate::entropy::{gaussian_bits_value, gaussian_pmf, quantize_pmf, quantize_tensor, ChannelDensities, SIGMA_MIN, SYMBOL_CAP, Y_CHANNELS};
use crate::fast_coder::Backend;
use crate::range_coder::PackedTables;
use crate::schedule::{DiffusionSchedule, TimestepPlan};
use crate::transforms::{epsilon_from_x0, x0_from_epsilon, Model, Parameterization, ENCODER_STRIDE, PAD_MULTIPLE};
use crate::{Error, Result};

/// Snapshot positions used for decode-process figures.
pub const FIGURE_DUMP_STEPS: [f64; 5] = [0.0, 0.3, 0.6, 0.9, 1.0];

const MAX_DIM: usize = u16::MAX as usize;

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeSettings {
    pub n_test: usize,
    pub gamma: f64,
    pub seed: Option<u64>,
    /// Fractions of the plan in `[0, 1]` at which to snapshot `x_n`.
    pub dump_steps: Vec<f64>,
}

impl DecodeSettings {
    /// Deterministic decoding with the parameterization's default step count.
    pub fn for_model(p: Parameterization) -> Self {
        Self { n_test: p.default_steps(), gamma: 0.0, seed: None, dump_steps: Vec::new() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_test == 0 {
            return Err(Error::InvalidRange("n_test must be at least 1".into()));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidRange(format!("gamma {} must be finite and non-negative", self.gamma)));
        }
        if let Some(f) = self.dump_steps.iter().find(|f| !(0.0..=1.0).contains(*f)) {
            return Err(Error::InvalidRange(format!("dump position {f} outside [0, 1]")));
        }
        Ok(())
    }
}

/// `x_n` after `steps_done` of `n_test` steps, as an 8-bit image.
#[derive(Clone, Debug)]
pub struct Snapshot {
    pub fraction: f64,
    pub steps_done: usize,
    pub image: RgbImage,
}

#[derive(Clone, Debug)]
pub struct Decoded {
    pub image: RgbImage,
    pub snapshots: Vec<Snapshot>,
}

/// Entropy-model bits for the quantized latents of one image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RateEstimate {
    pub z_bits: f64,
    pub y_bits: f64,
    pub pixels: usize,
}

impl RateEstimate {
    pub fn bits(&self) -> f64 {
        self.z_bits + self.y_bits
    }

    pub fn bpp(&self) -> f64 {
        self.bits() / self.pixels as f64
    }
}

/// Mirror index `i` into `0..n` without repeating the edge sample.
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

fn round_up(v: usize, m: usize) -> usize {
    v.div_ceil(m) * m
}

/// Reflect-pad to the next multiple of [`PAD_MULTIPLE`] on the bottom and
/// right. Returns the padded image and `(pad_bottom, pad_right)`.
pub fn pad_image(img: &RgbImage) -> Result<(RgbImage, u8, u8)> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w > MAX_DIM || h > MAX_DIM {
        return Err(Error::DimensionOverflow(w, h));
    }
    if w == 0 || h == 0 {
        return Err(Error::Shape("empty image".into()));
    }
    let (pw, ph) = (round_up(w, PAD_MULTIPLE), round_up(h, PAD_MULTIPLE));
    let out = RgbImage::from_fn(pw as u32, ph as u32, |x, y| *img.get_pixel(reflect(x as usize, w) as u32, reflect(y as usize, h) as u32));
    Ok((out, (ph - h) as u8, (pw - w) as u8))
}

/// Support `[min − 1, max + 1]` clamped to the symbol cap.
fn support(symbols: &[i32]) -> (i16, i16) {
    let lo = symbols.iter().copied().min().unwrap_or(0).saturating_sub(1).clamp(-SYMBOL_CAP, SYMBOL_CAP);
    let hi = symbols.iter().copied().max().unwrap_or(0).saturating_add(1).clamp(-SYMBOL_CAP, SYMBOL_CAP);
    (lo as i16, hi.max(lo) as i16)
}

fn clamp_sigma(s: f64) -> f64 {
    if s.is_finite() {
        s.max(SIGMA_MIN)
    } else {
        SIGMA_MIN
    }
}

/// One row per hyper-latent channel.
fn y_tables(dens: &ChannelDensities, range: (i16, i16)) -> Result<PackedTables> {
    let mut t = PackedTables::new();
    for c in 0..Y_CHANNELS {
        let pmf = crate::entropy::discretize(&dens.channel(c), range.0 as i32, range.1 as i32);
        t.push_row(range.0 as i32, &quantize_pmf(&pmf))?;
    }
    Ok(t)
}

/// One row per content-latent element, from the hyper-synthesis output.
fn z_tables<T: Scalar>(mu: &Tensor<T>, sigma: &Tensor<T>, range: (i16, i16)) -> Result<PackedTables> {
    let mut t = PackedTables::new();
    for (m, s) in mu.data().iter().zip(sigma.data()) {
        let pmf = gaussian_pmf(m.as_f64(), clamp_sigma(s.as_f64()), range.0 as i32, range.1 as i32)?;
        t.push_row(range.0 as i32, &quantize_pmf(&pmf))?;
    }
    Ok(t)
}

fn y_rows(shape: &[usize]) -> Vec<u32> {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    (0..n * c * h * w).map(|i| ((i / (h * w)) % c) as u32).collect()
}

fn to_tensor<T: Scalar>(shape: &[usize], symbols: &[i32]) -> Tensor<T> {
    Tensor::from_vec(shape, symbols.iter().map(|&v| T::lit(v as f64)).collect())
}

struct Latents<T: Scalar> {
    z: Vec<i32>,
    y: Vec<i32>,
    y_shape: Vec<usize>,
    mu: Tensor<T>,
    sigma: Tensor<T>,
}

fn analyze<T: Scalar>(model: &Model<T>, img: &RgbImage) -> Result<(Latents<T>, u8, u8)> {
    let (padded, pad_bottom, pad_right) = pad_image(img)?;
    let x = image_to_tensor::<T>(&padded);
    let z = model.encode_content(&x)?;
    let z_hat = quantize_tensor(&z);
    let zq = to_tensor::<T>(z.shape(), &z_hat);
    let y = model.hyper_analyze_tensor(&zq);
    let y_hat = quantize_tensor(&y);
    let (mu, sigma) = model.hyper_synthesize_tensor(&to_tensor(y.shape(), &y_hat));
    let lat = Latents { z: z_hat, y: y_hat, y_shape: y.shape().to_vec(), mu, sigma };
    Ok((lat, pad_bottom, pad_right))
}

/// Entropy-model estimate of the coded size, from the same quantized
/// latents and the same σ floor the coder uses.
pub fn estimate_rate<T: Scalar>(model: &Model<T>, img: &RgbImage) -> Result<RateEstimate> {
    let (lat, _, _) = analyze(model, img)?;
    let dens = model.net.prior.densities(&model.params);
    let hw = lat.y_shape[2] * lat.y_shape[3];
    let y_bits = lat.y.iter().enumerate().map(|(i, &v)| dens.bits((i / hw) % Y_CHANNELS, v as f64)).sum();
    let z_bits = lat
        .z
        .iter()
        .zip(lat.mu.data().iter().zip(lat.sigma.data()))
        .map(|(&v, (m, s))| gaussian_bits_value(v as f64, m.as_f64(), clamp_sigma(s.as_f64())))
        .sum();
    Ok(RateEstimate { z_bits, y_bits, pixels: img.width() as usize * img.height() as usize })
}

/// Encode an image. Deterministic for a given model and backend.
pub fn compress<T: Scalar>(model: &Model<T>, img: &RgbImage, backend: &Backend) -> Result<Bitstream> {
    let (lat, pad_bottom, pad_right) = analyze(model, img)?;
    if lat.y_shape[1] != Y_CHANNELS {
        return Err(Error::Shape(format!("hyper-latent has {} channels, expected {Y_CHANNELS}", lat.y_shape[1])));
    }
    let y_range = support(&lat.y);
    let z_range = support(&lat.z);
    let dens = model.net.prior.densities(&model.params);
    let yt = y_tables(&dens, y_range)?;
    let payload_y = backend.encode(&lat.y, &y_rows(&lat.y_shape), &yt)?;
    let zt = z_tables(&lat.mu, &lat.sigma, z_range)?;
    let rows: Vec<u32> = (0..lat.z.len() as u32).collect();
    let payload_z = backend.encode(&lat.z, &rows, &zt)?;

    let s = model.schedule().params();
    let header = Header {
        height: img.height() as u16,
        width: img.width() as u16,
        pad_bottom,
        pad_right,
        c_z: model.arch.c_z as u16,
        schedule_kind: s.kind,
        n_train: s.n_train,
        schedule_a: s.a as f32,
        schedule_b: s.b as f32,
        parameterization: model.parameterization(),
        model_id: model.model_id(),
        y_range,
        z_range,
    };
    Ok(Bitstream { header, payload_y, payload_z })
}

fn check_model<T: Scalar>(h: &Header, model: &Model<T>) -> Result<()> {
    let id = model.model_id();
    if h.model_id != id {
        return Err(Error::ModelMismatch { expected: crate::checkpoint::hex(&h.model_id), found: crate::checkpoint::hex(&id) });
    }
    // Same weights imply the rest, but a hand-edited header should still fail loudly.
    if h.c_z as usize != model.arch.c_z || h.parameterization != model.parameterization() || !h.schedule_matches(&model.schedule().params()) {
        return Err(Error::Format("header disagrees with the model it names".into()));
    }
    Ok(())
}

/// Recover `(ẑ, ŷ)` from a container. Exact inverse of the coding half of
/// [`compress`].
pub fn decode_latents<T: Scalar>(model: &Model<T>, bs: &Bitstream, backend: &Backend) -> Result<(Tensor<T>, Tensor<T>)> {
    let h = &bs.header;
    check_model(h, model)?;
    let (ph, pw) = h.padded_dims();
    let y_shape = [1, Y_CHANNELS, ph / PAD_MULTIPLE, pw / PAD_MULTIPLE];
    let z_shape = [1, model.arch.c_z, ph / ENCODER_STRIDE, pw / ENCODER_STRIDE];
    let dens = model.net.prior.densities(&model.params);
    let yt = y_tables(&dens, h.y_range)?;
    let y = backend.decode(&bs.payload_y, &y_rows(&y_shape), &yt)?;
    let y = to_tensor::<T>(&y_shape, &y);
    let (mu, sigma) = model.hyper_synthesize_tensor(&y);
    let zt = z_tables(&mu, &sigma, h.z_range)?;
    let rows: Vec<u32> = (0..zt.rows() as u32).collect();
    let z = backend.decode(&bs.payload_z, &rows, &zt)?;
    Ok((to_tensor(&z_shape, &z), y))
}

/// Anything that predicts the network output for `x_n` at time `t_frac`.
pub trait Denoiser<T: Scalar> {
    fn predict(&self, x_n: &Tensor<T>, t_frac: f64) -> Tensor<T>;
}

/// The trained network with its conditioning computed once per image.
pub struct Conditioned<'a, T: Scalar> {
    model: &'a Model<T>,
    cond: Vec<Tensor<T>>,
}

impl<'a, T: Scalar> Conditioned<'a, T> {
    pub fn new(model: &'a Model<T>, z_hat: &Tensor<T>) -> Self {
        Self { model, cond: model.conditioning(z_hat) }
    }
}

impl<T: Scalar> Denoiser<T> for Conditioned<'_, T> {
    fn predict(&self, x_n: &Tensor<T>, t_frac: f64) -> Tensor<T> {
        self.model.denoise_with(x_n, &vec![t_frac; x_n.shape()[0]], &self.cond)
    }
}

/// Step `k` (0-based; run from `n_test − 1` down to 0) of the sampler.
/// Returns `(x_{n−1}, X̂₀)`. The last step returns `X̂₀` itself.
pub fn ddim_step<T: Scalar>(
    den: &impl Denoiser<T>,
    x_n: &Tensor<T>,
    k: usize,
    plan: &TimestepPlan,
    schedule: &DiffusionSchedule,
    parameterization: Parameterization,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if k >= plan.n_test {
        return Err(Error::InvalidRange(format!("step {k} outside a {}-step plan", plan.n_test)));
    }
    let n_train = schedule.n_train() as f64;
    let ab_n = schedule.alpha_bar_at(plan.indices[k] as f64 / n_train)?;
    let ab_prev = if k == 0 { 1.0 } else { schedule.alpha_bar_at(plan.indices[k - 1] as f64 / n_train)? };
    let out = den.predict(x_n, plan.fractions[k]);
    let (x0, eps) = match parameterization {
        Parameterization::XPred => {
            if k == 0 {
                return Ok((out.clone(), out));
            }
            let eps = epsilon_from_x0(x_n, &out, ab_n)?;
            (out, eps)
        }
        Parameterization::EpsilonPred => (x0_from_epsilon(x_n, &out, ab_n)?, out),
    };
    if k == 0 {
        return Ok((x0.clone(), x0));
    }
    let (a, b) = (T::lit(ab_prev.sqrt()), T::lit((1.0 - ab_prev).sqrt()));
    Ok((x0.zip_map(&eps, |x, e| a * x + b * e), x0))
}

/// `x_N`: zeros, or `γ·N(0, I)` drawn from `seed`.
pub fn initial_state<T: Scalar>(shape: &[usize], gamma: f64, seed: Option<u64>) -> Tensor<T> {
    if gamma == 0.0 {
        return Tensor::zeros(shape);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed.unwrap_or(0));
    Tensor::<T>::randn(shape, &mut rng).scale(T::lit(gamma))
}

/// Steps completed at a fractional dump position.
fn dump_index(fraction: f64, n_test: usize) -> usize {
    (fraction * n_test as f64).round() as usize
}

/// Run the full sampler. `snapshot` sees `x` after every step count listed
/// in `dump_at` (0 = initial state).
pub fn sample<T: Scalar>(
    den: &impl Denoiser<T>,
    x_init: Tensor<T>,
    plan: &TimestepPlan,
    schedule: &DiffusionSchedule,
    parameterization: Parameterization,
    mut snapshot: impl FnMut(usize, &Tensor<T>),
) -> Result<Tensor<T>> {
    let mut x = x_init;
    snapshot(0, &x);
    for (done, k) in (0..plan.n_test).rev().enumerate() {
        x = ddim_step(den, &x, k, plan, schedule, parameterization)?.0;
        snapshot(done + 1, &x);
    }
    Ok(x)
}

fn crop<T: Scalar>(x: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let (n, c, ph, pw) = x.dims4();
    let mut out = Vec::with_capacity(n * c * h * w);
    for plane in x.data().chunks_exact(ph * pw) {
        for row in plane.chunks_exact(pw).take(h) {
            out.extend_from_slice(&row[..w]);
        }
    }
    Tensor::from_vec(&[n, c, h, w], out)
}

pub fn decompress<T: Scalar>(model: &Model<T>, bs: &Bitstream, backend: &Backend, settings: &DecodeSettings) -> Result<Decoded> {
    settings.validate()?;
    let (z_hat, _) = decode_latents(model, bs, backend)?;
    let (ph, pw) = bs.header.padded_dims();
    let (h, w) = (bs.header.height as usize, bs.header.width as usize);
    let plan = model.schedule().plan(settings.n_test)?;
    let den = Conditioned::new(model, &z_hat);
    let init = initial_state::<T>(&[1, 3, ph, pw], settings.gamma, settings.seed);
    let wanted: Vec<(f64, usize)> = settings.dump_steps.iter().map(|&f| (f, dump_index(f, settings.n_test))).collect();
    let mut snapshots = Vec::new();
    let x = sample(&den, init, &plan, model.schedule(), model.parameterization(), |done, x| {
        for &(fraction, _) in wanted.iter().filter(|(_, d)| *d == done) {
            snapshots.push(Snapshot { fraction, steps_done: done, image: tensor_to_image(&crop(x, h, w), 0) });
        }
    })?;
    Ok(Decoded { image: tensor_to_image(&crop(&x, h, w), 0), snapshots })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::build_cosine_schedule;
    use crate::transforms::{forward_diffuse, ArchConfig};
    use image::Rgb;

    #[test]
    fn reflect_padding() {
        assert_eq!((0..7).map(|i| reflect(i, 3)).collect::<Vec<_>>(), [0, 1, 2, 1, 0, 1, 2]);
        assert_eq!(reflect(5, 1), 0);
        let img = RgbImage::from_fn(70, 3, |x, y| Rgb([x as u8, y as u8, 0]));
        let (p, pb, pr) = pad_image(&img).unwrap();
        assert_eq!((p.width(), p.height(), pb, pr), (128, 64, 61, 58));
        assert_eq!(p.get_pixel(70, 0)[0], 68);
        assert_eq!(p.get_pixel(0, 3)[1], 1);
        assert!(matches!(pad_image(&RgbImage::new(70_000, 1)), Err(Error::DimensionOverflow(70_000, 1))));
    }

    #[test]
    fn support_is_widened_and_capped() {
        assert_eq!(support(&[0, 3, -2]), (-3, 4));
        assert_eq!(support(&[400, -300]), (-255, 255));
        assert_eq!(support(&[]), (-1, 1));
    }

    #[test]
    fn settings_validation() {
        let mut s = DecodeSettings::for_model(Parameterization::XPred);
        assert_eq!(s.n_test, 17);
        assert_eq!(DecodeSettings::for_model(Parameterization::EpsilonPred).n_test, 500);
        s.validate().unwrap();
        s.gamma = -0.1;
        assert!(s.validate().is_err());
        s.gamma = 0.8;
        s.dump_steps = vec![1.2];
        assert!(s.validate().is_err());
        s.n_test = 0;
        assert!(s.validate().is_err());
    }

    /// Returns the true x₀ (or ε) of the trajectory it was built from.
    struct Oracle {
        x0: Tensor<f64>,
        ab: f64,
        p: Parameterization,
    }

    impl Denoiser<f64> for Oracle {
        fn predict(&self, x_n: &Tensor<f64>, _t: f64) -> Tensor<f64> {
            match self.p {
                Parameterization::XPred => self.x0.clone(),
                Parameterization::EpsilonPred => epsilon_from_x0(x_n, &self.x0, self.ab).unwrap(),
            }
        }
    }

    #[test]
    fn oracle_step_lands_on_the_closed_form_trajectory() {
        let s = build_cosine_schedule(1000, 0.008).unwrap();
        let plan = s.plan(17).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = Tensor::<f64>::uniform(&[1, 3, 8, 8], -1.0, 1.0, &mut rng);
        let eps = Tensor::<f64>::randn(&[1, 3, 8, 8], &mut rng);
        for p in [Parameterization::XPred, Parameterization::EpsilonPred] {
            for k in 1..plan.n_test {
                let ab = s.alpha_bar(plan.indices[k]);
                let x_n = forward_diffuse(&x0, ab, &eps);
                let oracle = Oracle { x0: x0.clone(), ab, p };
                let (prev, _) = ddim_step(&oracle, &x_n, k, &plan, &s, p).unwrap();
                let want = forward_diffuse(&x0, s.alpha_bar(plan.indices[k - 1]), &eps);
                let err = prev.sub(&want).max_abs();
                assert!(err < 1e-5, "{p:?} step {k}: {err}");
            }
        }
    }

    #[test]
    fn last_step_returns_the_prediction() {
        let s = build_cosine_schedule(100, 0.008).unwrap();
        let plan = s.plan(4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x0 = Tensor::<f64>::uniform(&[1, 3, 4, 4], -1.0, 1.0, &mut rng);
        let x_n = Tensor::<f64>::randn(&[1, 3, 4, 4], &mut rng);
        let oracle = Oracle { x0: x0.clone(), ab: s.alpha_bar(plan.indices[0]), p: Parameterization::XPred };
        let (out, x0_hat) = ddim_step(&oracle, &x_n, 0, &plan, &s, Parameterization::XPred).unwrap();
        assert_eq!(out, x0);
        assert_eq!(x0_hat, x0);
        assert!(ddim_step(&oracle, &x_n, 4, &plan, &s, Parameterization::XPred).is_err());
    }

    #[test]
    fn initial_state_and_seeds() {
        let z = initial_state::<f32>(&[1, 3, 4, 4], 0.0, Some(9));
        assert!(z.data().iter().all(|&v| v == 0.0));
        let a = initial_state::<f32>(&[1, 3, 4, 4], 0.8, Some(1));
        let b = initial_state::<f32>(&[1, 3, 4, 4], 0.8, Some(1));
        let c = initial_state::<f32>(&[1, 3, 4, 4], 0.8, Some(2));
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn latents_survive_the_container() {
        let model = Model::<f32>::new(ArchConfig::small(), 5).unwrap();
        let img = RgbImage::from_fn(50, 70, |x, y| Rgb([(x * 5) as u8, (y * 3) as u8, ((x + y) * 2) as u8]));
        let backend = Backend::Reference;
        let bs = compress(&model, &img, &backend).unwrap();
        assert_eq!(compress(&model, &img, &backend).unwrap().to_bytes(), bs.to_bytes());
        let parsed = Bitstream::from_bytes(&bs.to_bytes()).unwrap();
        assert_eq!(parsed, bs);
        let (lat, _, _) = analyze(&model, &img).unwrap();
        let (z, y) = decode_latents(&model, &parsed, &backend).unwrap();
        assert_eq!(quantize_tensor(&z), lat.z);
        assert_eq!(quantize_tensor(&y), lat.y);

        let other = Model::<f32>::new(ArchConfig::small(), 6).unwrap();
        assert!(matches!(decode_latents(&other, &parsed, &backend), Err(Error::ModelMismatch { .. })));
    }

    #[test]
    fn dumps_cover_start_and_end() {
        let model = Model::<f32>::new(ArchConfig::small(), 5).unwrap();
        let img = RgbImage::from_fn(64, 64, |x, y| Rgb([(x * 4) as u8, (y * 4) as u8, 100]));
        let backend = Backend::Reference;
        let bs = compress(&model, &img, &backend).unwrap();
        let settings = DecodeSettings { n_test: 3, gamma: 0.0, seed: None, dump_steps: FIGURE_DUMP_STEPS.to_vec() };
        let out = decompress(&model, &bs, &backend, &settings).unwrap();
        assert_eq!(out.snapshots.len(), 5);
        assert!(out.snapshots[0].image.pixels().all(|p| p.0 == [128, 128, 128]));
        assert_eq!(out.snapshots[4].image, out.image);
        assert_eq!(out.snapshots.iter().map(|s| s.steps_done).collect::<Vec<_>>(), [0, 1, 2, 3, 3]);
        assert_eq!(decompress(&model, &bs, &backend, &settings).unwrap().image, out.image);
    }
}
