//! The training objective: SNR-weighted reconstruction, an optional
//! perceptual distance mixed in with `ρ`, and the `λ`-weighted rate.

use cdc_tensor::{Graph, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::entropy::gaussian_bits;
use crate::nn::Fwd;
use crate::transforms::{Model, Parameterization};
use crate::{Error, Result};

/// Cap on `ᾱ/(1−ᾱ)` so near-noiseless draws cannot dominate a batch.
pub const MAX_SNR_WEIGHT: f64 = 1e3;
/// Id of the built-in perceptual distance.
pub const DEFAULT_PERCEPTUAL: &str = "ms-gms";
/// The `ρ` values trained in the perceptual sweep.
pub const RHO_PRESETS: [f64; 4] = [0.0, 0.32, 0.64, 0.9];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub lambda: f64,
    pub rho: f64,
    pub parameterization: Parameterization,
    pub perceptual_metric: String,
    /// Bounds on the x-prediction SNR weight. The defaults (0 and
    /// [`MAX_SNR_WEIGHT`]) give the plain `ᾱ/(1−ᾱ)` objective.
    #[serde(default)]
    pub snr_floor: f64,
    #[serde(default = "default_snr_cap")]
    pub snr_cap: f64,
}

fn default_snr_cap() -> f64 {
    MAX_SNR_WEIGHT
}

impl LossConfig {
    pub fn new(lambda: f64, rho: f64, parameterization: Parameterization) -> Self {
        Self { lambda, rho, parameterization, perceptual_metric: DEFAULT_PERCEPTUAL.into(), snr_floor: 0.0, snr_cap: MAX_SNR_WEIGHT }
    }

    /// Weight of a draw at `ᾱ` under this config's bounds.
    pub fn weight(&self, alpha_bar: f64) -> f64 {
        snr_weight(alpha_bar).min(self.snr_cap).max(self.snr_floor)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidRange(format!("lambda {} must be finite and non-negative", self.lambda)));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::InvalidRange(format!("rho {} must lie in [0, 1)", self.rho)));
        }
        if !(self.snr_floor >= 0.0 && self.snr_floor <= self.snr_cap && self.snr_cap > 0.0 && self.snr_cap <= MAX_SNR_WEIGHT) {
            return Err(Error::InvalidRange(format!("need 0 <= snr_floor <= snr_cap <= {MAX_SNR_WEIGHT}, got {} and {}", self.snr_floor, self.snr_cap)));
        }
        Ok(())
    }
}

/// Batch-mean loss terms. `total = (1−ρ)·distortion + ρ·perceptual + λ·rate_bits`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Weighted reconstruction term (`L_D`).
    pub distortion: f64,
    pub perceptual: f64,
    /// Estimated bits per image for `z` and `y` together.
    pub rate_bits: f64,
    pub total: f64,
    pub bpp_estimate: f64,
}

impl LossBreakdown {
    pub fn recombine(&self, cfg: &LossConfig) -> f64 {
        (1.0 - cfg.rho) * self.distortion + cfg.rho * self.perceptual + cfg.lambda * self.rate_bits
    }
}

/// Weight of the x-space reconstruction error at noise level `ᾱ`.
/// `ᾱ = 1` is the uncorrupted draw and gets plain MSE.
pub fn snr_weight(alpha_bar: f64) -> f64 {
    if alpha_bar >= 1.0 {
        1.0
    } else {
        (alpha_bar / (1.0 - alpha_bar)).min(MAX_SNR_WEIGHT)
    }
}

fn mse<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let s: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| (x.as_f64() - y.as_f64()).powi(2)).sum();
    Ok(s / a.len().max(1) as f64)
}

/// `ᾱ/(1−ᾱ) · mean‖x₀ − x̄₀‖²`.
pub fn distortion_loss<T: Scalar>(x0: &Tensor<T>, x0_hat: &Tensor<T>, alpha_bar: f64) -> Result<f64> {
    if !(alpha_bar > 0.0 && alpha_bar < 1.0) {
        return Err(Error::Boundary(alpha_bar));
    }
    Ok(alpha_bar / (1.0 - alpha_bar) * mse(x0, x0_hat)?)
}

/// `mean‖ε − ε̂‖²`, the noise-space form used by ε-prediction models.
pub fn distortion_loss_eps<T: Scalar>(eps: &Tensor<T>, eps_hat: &Tensor<T>) -> Result<f64> {
    mse(eps, eps_hat)
}

/// A differentiable image distance on `[n, 3, h, w]` batches in `[−1, 1]`.
pub trait PerceptualMetric<T: Scalar> {
    fn id(&self) -> &'static str;
    /// Per-sample distance, shape `[n]`.
    fn distance(&self, g: &mut Graph<T>, a: Var, b: Var) -> Var;
}

/// Resolve a metric id. `lpips` is a recognised slot that needs external
/// weights and is not shipped.
pub fn perceptual_metric<T: Scalar>(id: &str) -> Result<Box<dyn PerceptualMetric<T>>> {
    match id {
        DEFAULT_PERCEPTUAL => Ok(Box::new(GradientStructure::default())),
        "lpips" => Err(Error::MetricUnavailable(id.into())),
        other => Err(Error::UnknownMetric(other.into())),
    }
}

/// Batch-mean perceptual distance between two image tensors.
pub fn perceptual_loss<T: Scalar>(x0: &Tensor<T>, x0_hat: &Tensor<T>, metric_id: &str) -> Result<f64> {
    if x0.shape() != x0_hat.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", x0.shape(), x0_hat.shape())));
    }
    let metric = perceptual_metric::<T>(metric_id)?;
    let mut g = Graph::inference();
    let (a, b) = (g.constant(x0.clone()), g.constant(x0_hat.clone()));
    let d = metric.distance(&mut g, a, b);
    Ok(g.value(d).mean().as_f64())
}

/// Multi-scale gradient-magnitude similarity plus local structure
/// correlation, both mapped to `1 − similarity`. Needs no learned weights and
/// is exactly symmetric with `d(x, x) = 0`.
#[derive(Clone, Debug)]
pub struct GradientStructure {
    pub scales: usize,
    pub c_grad: f64,
    pub c_struct: f64,
}

impl Default for GradientStructure {
    fn default() -> Self {
        Self { scales: 3, c_grad: 1e-3, c_struct: 1e-3 }
    }
}

impl GradientStructure {
    fn kernels<T: Scalar>(g: &mut Graph<T>) -> (Var, Var, Var) {
        let sobel = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0, -1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];
        let sobel = Tensor::from_vec(&[2, 1, 3, 3], sobel.iter().map(|&v| T::lit(v / 4.0)).collect());
        let pair_sum = Tensor::full(&[1, 2, 1, 1], T::one());
        let boxf = Tensor::full(&[1, 1, 3, 3], T::lit(1.0 / 9.0));
        (g.constant(sobel), g.constant(pair_sum), g.constant(boxf))
    }

    fn grad_mag<T: Scalar>(g: &mut Graph<T>, x: Var, sobel: Var, pair_sum: Var) -> Var {
        let d = g.conv2d(x, sobel, None, 1, 1);
        let d2 = g.square(d);
        let s = g.conv2d(d2, pair_sum, None, 1, 0);
        let s = g.add_scalar(s, T::lit(1e-8));
        g.sqrt(s)
    }

    /// `(2ab + c)/(a² + b² + c)` elementwise, written symmetrically.
    fn similarity<T: Scalar>(g: &mut Graph<T>, ab: Var, aa: Var, bb: Var, c: f64) -> Var {
        let num = g.scale(ab, T::lit(2.0));
        let num = g.add_scalar(num, T::lit(c));
        let den = g.add(aa, bb);
        let den = g.add_scalar(den, T::lit(c));
        g.div(num, den)
    }

    /// `1 − mean(s)` per image, where `s` is `[n·3, 1, h, w]`.
    fn dissimilarity<T: Scalar>(g: &mut Graph<T>, s: Var, n: usize) -> Var {
        let shape = g.shape(s).to_vec();
        let s = g.reshape(s, &[n, 3 * shape[2] * shape[3]]);
        let m = g.mean_per_sample(s);
        let m = g.scale(m, -T::one());
        g.add_scalar(m, T::one())
    }
}

impl<T: Scalar> PerceptualMetric<T> for GradientStructure {
    fn id(&self) -> &'static str {
        DEFAULT_PERCEPTUAL
    }

    fn distance(&self, g: &mut Graph<T>, a: Var, b: Var) -> Var {
        let (n, c, h, w) = g.value(a).dims4();
        assert_eq!(c, 3, "perceptual distance expects RGB");
        let (sobel, pair_sum, boxf) = Self::kernels(g);
        let mut a = g.reshape(a, &[n * 3, 1, h, w]);
        let mut b = g.reshape(b, &[n * 3, 1, h, w]);
        let mut terms = Vec::new();
        let (mut hh, mut ww) = (h, w);
        for s in 0..self.scales {
            if s > 0 {
                if hh % 2 != 0 || ww % 2 != 0 || hh < 8 || ww < 8 {
                    break;
                }
                a = g.avg_pool2x(a);
                b = g.avg_pool2x(b);
                hh /= 2;
                ww /= 2;
            }
            let ga = Self::grad_mag(g, a, sobel, pair_sum);
            let gb = Self::grad_mag(g, b, sobel, pair_sum);
            let gab = g.mul(ga, gb);
            let gaa = g.square(ga);
            let gbb = g.square(gb);
            let gms = Self::similarity(g, gab, gaa, gbb, self.c_grad);
            terms.push(Self::dissimilarity(g, gms, n));

            let mu_a = g.conv2d(a, boxf, None, 1, 1);
            let mu_b = g.conv2d(b, boxf, None, 1, 1);
            let a2 = g.square(a);
            let b2 = g.square(b);
            let ab = g.mul(a, b);
            let ea2 = g.conv2d(a2, boxf, None, 1, 1);
            let eb2 = g.conv2d(b2, boxf, None, 1, 1);
            let eab = g.conv2d(ab, boxf, None, 1, 1);
            let ma2 = g.square(mu_a);
            let mb2 = g.square(mu_b);
            let mab = g.mul(mu_a, mu_b);
            let va = g.sub(ea2, ma2);
            let vb = g.sub(eb2, mb2);
            let cov = g.sub(eab, mab);
            let st = Self::similarity(g, cov, va, vb, self.c_struct);
            terms.push(Self::dissimilarity(g, st, n));
        }
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = g.add(acc, t);
        }
        g.scale(acc, T::lit(1.0 / terms.len() as f64))
    }
}

/// The random draws of one training step, fixed up front so the loss is a
/// deterministic function of the weights.
#[derive(Clone, Debug)]
pub struct TrainingDraw<T> {
    pub x0: Tensor<T>,
    /// Diffusion index per sample, in `0..=n_train`.
    pub n: Vec<usize>,
    pub eps: Tensor<T>,
    /// Box noise for `z` and `y`.
    pub z_noise: Tensor<T>,
    pub y_noise: Tensor<T>,
}

/// Build the full objective on `f` and return the scalar loss node with its
/// breakdown.
pub fn total_loss<T: Scalar>(
    f: &mut Fwd<T>,
    model: &Model<T>,
    draw: &TrainingDraw<T>,
    cfg: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    cfg.validate()?;
    if cfg.parameterization != model.parameterization() {
        return Err(Error::Config("loss parameterization differs from the model's".into()));
    }
    let (b, _, h, w) = draw.x0.dims4();
    if draw.n.len() != b || draw.eps.shape() != draw.x0.shape() {
        return Err(Error::Shape("training draw does not match the batch".into()));
    }
    let schedule = model.schedule();
    let n_train = schedule.n_train();
    if let Some(&bad) = draw.n.iter().find(|&&n| n > n_train) {
        return Err(Error::InvalidRange(format!("diffusion index {bad} beyond {n_train}")));
    }
    let alpha: Vec<f64> = draw.n.iter().map(|&n| schedule.alpha_bar(n)).collect();

    // Encoder, box noise and the hyperprior.
    let x0 = f.input(draw.x0.clone());
    let z = model.encode(f, x0);
    let y = model.hyper_analyze(f, z);
    if f.g.shape(z) != draw.z_noise.shape() || f.g.shape(y) != draw.y_noise.shape() {
        return Err(Error::Shape("box-noise shapes do not match the latents".into()));
    }
    let zn = f.input(draw.z_noise.clone());
    let z_t = f.g.add(z, zn);
    let yn = f.input(draw.y_noise.clone());
    let y_t = f.g.add(y, yn);
    let (mu, sigma) = model.hyper_synthesize(f, y_t);
    let z_bits = gaussian_bits(&mut f.g, z_t, mu, sigma);
    let y_bits = model.net.prior.bits(f, y_t);
    let z_sum = f.g.sum(z_bits);
    let y_sum = f.g.sum(y_bits);
    let rate = f.g.add(z_sum, y_sum);
    let rate = f.g.scale(rate, T::lit(1.0 / b as f64));

    // Corrupt, denoise, compare.
    let x_n = {
        let mut t = draw.x0.clone();
        let per = t.len() / b;
        for (i, chunk) in t.data_mut().chunks_mut(per).enumerate() {
            let (sa, sb) = (T::lit(alpha[i].sqrt()), T::lit((1.0 - alpha[i]).sqrt()));
            let e = &draw.eps.data()[i * per..(i + 1) * per];
            for (v, &ev) in chunk.iter_mut().zip(e) {
                *v = sa * *v + sb * ev;
            }
        }
        f.input(t)
    };
    let t_frac: Vec<f64> = draw.n.iter().map(|&n| n as f64 / n_train as f64).collect();
    let cond = model.embed(f, z_t);
    let pred = model.denoise(f, x_n, &t_frac, &cond);
    let (dist_per, x0_bar) = match cfg.parameterization {
        Parameterization::XPred => {
            let d = f.g.sub(pred, x0);
            let d2 = f.g.square(d);
            let m = f.g.mean_per_sample(d2);
            let wts = f.input(Tensor::from_vec(&[b], alpha.iter().map(|&a| T::lit(cfg.weight(a))).collect()));
            (f.g.mul(m, wts), pred)
        }
        Parameterization::EpsilonPred => {
            let eps = f.input(draw.eps.clone());
            let d = f.g.sub(pred, eps);
            let d2 = f.g.square(d);
            let m = f.g.mean_per_sample(d2);
            // x̄₀ = (x_n − √(1−ᾱ)·ε̂)/√ᾱ, needed only by the perceptual term.
            let sb = f.input(Tensor::from_vec(&[b], alpha.iter().map(|&a| T::lit(-(1.0 - a).sqrt())).collect()));
            let ia = f.input(Tensor::from_vec(&[b], alpha.iter().map(|&a| T::lit(1.0 / a.sqrt())).collect()));
            let scaled = f.g.mul_per_sample(pred, sb);
            let num = f.g.add(x_n, scaled);
            (m, f.g.mul_per_sample(num, ia))
        }
    };
    let distortion = f.g.mean(dist_per);

    let perceptual = if cfg.rho > 0.0 {
        let metric = perceptual_metric::<T>(&cfg.perceptual_metric)?;
        let d = metric.distance(&mut f.g, x0_bar, x0);
        Some(f.g.mean(d))
    } else {
        None
    };

    let mut total = f.g.scale(distortion, T::lit(1.0 - cfg.rho));
    if let Some(p) = perceptual {
        let p = f.g.scale(p, T::lit(cfg.rho));
        total = f.g.add(total, p);
    }
    let r = f.g.scale(rate, T::lit(cfg.lambda));
    total = f.g.add(total, r);

    let scalar = |f: &Fwd<T>, v: Var| f.g.value(v).data()[0].as_f64();
    let rate_bits = scalar(f, rate);
    let out = LossBreakdown {
        distortion: scalar(f, distortion),
        perceptual: perceptual.map_or(0.0, |p| scalar(f, p)),
        rate_bits,
        total: scalar(f, total),
        bpp_estimate: rate_bits / (h * w) as f64,
    };
    Ok((total, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transforms::{epsilon_from_x0, forward_diffuse, ArchConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn edge_image() -> Tensor<f64> {
        let (h, w) = (32, 32);
        let mut d = Vec::with_capacity(3 * h * w);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let v = if x > w / 2 { 0.8 } else { -0.6 } + 0.1 * c as f64 + if (y / 4) % 2 == 0 { 0.1 } else { 0.0 };
                    d.push(v);
                }
            }
        }
        Tensor::from_vec(&[1, 3, h, w], d)
    }

    fn box_blur(x: &Tensor<f64>) -> Tensor<f64> {
        let (_, c, h, w) = x.dims4();
        let mut out = x.clone();
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let mut s = 0.0;
                    for dx in -2i64..=2 {
                        let xi = (xx as i64 + dx).clamp(0, w as i64 - 1) as usize;
                        s += x.data()[(ci * h + y) * w + xi];
                    }
                    out.data_mut()[(ci * h + y) * w + xx] = s / 5.0;
                }
            }
        }
        out
    }

    #[test]
    fn distortion_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::<f64>::randn(&[1, 3, 4, 4], &mut rng);
        assert_eq!(distortion_loss(&x, &x, 0.3).unwrap(), 0.0);
        let y = x.map(|v| v + 0.5);
        assert!((distortion_loss(&x, &y, 0.5).unwrap() - 0.25).abs() < 1e-12);
        assert!(matches!(distortion_loss(&x, &y, 1.0), Err(Error::Boundary(_))));
        assert!(matches!(distortion_loss(&x, &y, 0.0), Err(Error::Boundary(_))));
    }

    #[test]
    fn eps_form_equals_x_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &a in &[0.01, 0.3, 0.5, 0.97] {
            let x0 = Tensor::<f64>::randn(&[2, 3, 4, 4], &mut rng);
            let x0_hat = Tensor::<f64>::randn(&[2, 3, 4, 4], &mut rng);
            let eps = Tensor::<f64>::randn(&[2, 3, 4, 4], &mut rng);
            let x_n = forward_diffuse(&x0, a, &eps);
            let eps_hat = epsilon_from_x0(&x_n, &x0_hat, a).unwrap();
            let lx = distortion_loss(&x0, &x0_hat, a).unwrap();
            let le = distortion_loss_eps(&eps, &eps_hat).unwrap();
            assert!((lx - le).abs() < 1e-9 * lx.max(1.0), "{lx} {le}");
        }
    }

    #[test]
    fn snr_weight_caps_and_boundary() {
        assert_eq!(snr_weight(1.0), 1.0);
        assert_eq!(snr_weight(0.5), 1.0);
        assert_eq!(snr_weight(0.999_999), MAX_SNR_WEIGHT);
        let c = LossConfig { snr_floor: 1.0, snr_cap: 5.0, ..LossConfig::new(0.0, 0.0, Parameterization::XPred) };
        assert_eq!((c.weight(0.01), c.weight(0.5), c.weight(0.9), c.weight(1.0)), (1.0, 1.0, 5.0, 1.0));
        assert_eq!(LossConfig::new(0.0, 0.0, Parameterization::XPred).weight(0.9), snr_weight(0.9));
        assert!(LossConfig { snr_floor: 6.0, ..c.clone() }.validate().is_err());
    }

    #[test]
    fn default_metric_axioms() {
        let x = edge_image();
        let blurred = box_blur(&x);
        assert_eq!(perceptual_loss(&x, &x, DEFAULT_PERCEPTUAL).unwrap(), 0.0);
        let d1 = perceptual_loss(&x, &blurred, DEFAULT_PERCEPTUAL).unwrap();
        let d2 = perceptual_loss(&blurred, &x, DEFAULT_PERCEPTUAL).unwrap();
        assert!(d1 > 0.0);
        assert_eq!(d1, d2);
    }

    #[test]
    fn metric_registry() {
        assert!(matches!(perceptual_metric::<f32>("lpips"), Err(Error::MetricUnavailable(_))));
        assert!(matches!(perceptual_metric::<f32>("fid"), Err(Error::UnknownMetric(_))));
    }

    #[test]
    fn config_validation() {
        let mut c = LossConfig::new(0.0, 0.9, Parameterization::XPred);
        assert!(c.validate().is_ok());
        c.rho = 1.0;
        assert!(c.validate().is_err());
        c.rho = 0.0;
        c.lambda = -1.0;
        assert!(c.validate().is_err());
    }

    fn draw(model: &Model<f64>, n: Vec<usize>, seed: u64) -> TrainingDraw<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = n.len();
        let x0 = Tensor::uniform(&[b, 3, 64, 64], -1.0, 1.0, &mut rng);
        let c_z = model.arch.c_z;
        TrainingDraw {
            eps: Tensor::randn(&[b, 3, 64, 64], &mut rng),
            z_noise: crate::entropy::uniform_noise(&[b, c_z, 4, 4], &mut rng),
            y_noise: crate::entropy::uniform_noise(&[b, 256, 1, 1], &mut rng),
            x0,
            n,
        }
    }

    #[test]
    fn breakdown_recombines_and_lambda_is_monotone() {
        let model = Model::<f64>::new(ArchConfig::small(), 3).unwrap();
        let d = draw(&model, vec![0, 4000], 9);
        let mut last = f64::NEG_INFINITY;
        for &lambda in &[0.0, 1e-3, 1e-2] {
            let cfg = LossConfig { lambda, rho: 0.32, ..LossConfig::new(0.0, 0.0, Parameterization::XPred) };
            let mut f = Fwd::inference(&model.params);
            let (_, br) = total_loss(&mut f, &model, &d, &cfg).unwrap();
            assert!((br.total - br.recombine(&cfg)).abs() < 1e-12 * br.total.abs().max(1.0));
            assert!(br.rate_bits > 0.0 && br.perceptual > 0.0);
            assert!(br.total >= last);
            last = br.total;
        }
    }
}
