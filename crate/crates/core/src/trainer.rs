//! The training loop: sampling, Adam, learning-rate and λ schedules,
//! checkpoints and resumable state.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use cdc_tensor::{ParamId, Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_model, read_tensors, save_model, write_tensors};
use crate::dataset::{ingest_batch, Dataset};
use crate::entropy::{uniform_noise, Y_CHANNELS};
use crate::losses::{total_loss, LossBreakdown, LossConfig, TrainingDraw, DEFAULT_PERCEPTUAL, MAX_SNR_WEIGHT};
use crate::nn::Fwd;
use crate::transforms::{ArchConfig, Model, Parameterization, ENCODER_STRIDE, PAD_MULTIPLE};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub preset: String,
    /// Network preset (see [`ArchConfig::preset`]).
    pub model: String,
    pub n_train_steps: u64,
    pub batch_size: usize,
    /// Micro-batches averaged into one update.
    pub grad_accum: usize,
    pub lr_initial: f64,
    pub lr_decay_every: u64,
    pub lr_decay_factor: f64,
    pub lr_floor: f64,
    pub lambda_warmup_value: f64,
    pub lambda_warmup_steps: u64,
    pub lambda_target: f64,
    pub rho: f64,
    pub perceptual_metric: String,
    /// Bounds on the SNR weight of the reconstruction term (see
    /// [`LossConfig::snr_floor`]).
    pub snr_floor: f64,
    pub snr_cap: f64,
    pub crop_size: usize,
    pub seed: u64,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
    pub keep_checkpoints: usize,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// The published protocol: batch 4 on 256² crops, lr 5e-5 decayed by 20%
    /// every 100k steps down to 2e-5, λ held at 1e-5 for 500k steps.
    pub fn paper() -> Self {
        Self {
            preset: "paper".into(),
            model: "paper".into(),
            n_train_steps: 1_500_000,
            batch_size: 4,
            grad_accum: 1,
            lr_initial: 5e-5,
            lr_decay_every: 100_000,
            lr_decay_factor: 0.8,
            lr_floor: 2e-5,
            lambda_warmup_value: 1e-5,
            lambda_warmup_steps: 500_000,
            lambda_target: 1e-4,
            rho: 0.0,
            perceptual_metric: DEFAULT_PERCEPTUAL.into(),
            snr_floor: 0.0,
            snr_cap: MAX_SNR_WEIGHT,
            crop_size: 256,
            seed: 0,
            checkpoint_every: 10_000,
            keep_checkpoints: 3,
            log_every: 100,
        }
    }

    /// CPU-sized run on the synthetic corpus.
    pub fn desk() -> Self {
        Self {
            preset: "desk".into(),
            model: "small".into(),
            n_train_steps: 2_000,
            batch_size: 8,
            lr_initial: 1e-3,
            lr_decay_every: 2_000,
            lr_floor: 2e-4,
            lambda_warmup_steps: 500,
            lambda_target: 1e-4,
            crop_size: 64,
            checkpoint_every: 1_000,
            log_every: 10,
            ..Self::paper()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "desk" => Ok(Self::desk()),
            other => Err(Error::Config(format!("unknown training preset `{other}` (paper, desk)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.lr_floor > self.lr_initial {
            return bad(format!("lr_floor {} exceeds lr_initial {}", self.lr_floor, self.lr_initial));
        }
        if self.lambda_warmup_steps > self.n_train_steps {
            return bad("lambda_warmup_steps exceeds n_train_steps".into());
        }
        if self.batch_size == 0 || self.grad_accum == 0 || self.lr_decay_every == 0 {
            return bad("batch_size, grad_accum and lr_decay_every must be positive".into());
        }
        if self.crop_size == 0 || self.crop_size % PAD_MULTIPLE != 0 {
            return bad(format!("crop_size must be a positive multiple of {PAD_MULTIPLE}"));
        }
        let lc = LossConfig { snr_floor: self.snr_floor, snr_cap: self.snr_cap, ..LossConfig::new(self.lambda_target, self.rho, Parameterization::XPred) };
        lc.validate().map_err(|e| Error::Config(e.to_string()))
    }

    pub fn arch(&self) -> Result<ArchConfig> {
        ArchConfig::preset(&self.model)
    }
}

/// `lr_initial · factor^⌊step / every⌋`, never below `lr_floor`.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    let k = (step / cfg.lr_decay_every).min(i32::MAX as u64) as i32;
    (cfg.lr_initial * cfg.lr_decay_factor.powi(k)).max(cfg.lr_floor)
}

pub fn lambda_at(step: u64, cfg: &TrainConfig) -> f64 {
    if step < cfg.lambda_warmup_steps {
        cfg.lambda_warmup_value
    } else {
        cfg.lambda_target
    }
}

/// Adam with the usual moments `(0.9, 0.999)` and `ε = 1e-8`.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of updates applied so far.
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(model: &Model<T>) -> Self {
        let zeros: Vec<Tensor<T>> = model.params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: zeros.clone(), v: zeros }
    }

    /// One update. Returns an error, leaving weights untouched, if any
    /// gradient is non-finite.
    pub fn update(&mut self, model: &mut Model<T>, grads: &[(ParamId, Tensor<T>)], lr: f64) -> Result<()> {
        if let Some((id, _)) = grads.iter().find(|(_, g)| !g.all_finite()) {
            return Err(Error::NonFinite { step: self.t, detail: format!("gradient of {}", model.params.name(*id)) });
        }
        self.t += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = 1.0 - self.beta1.powi(self.t.min(i32::MAX as u64) as i32);
        let c2 = 1.0 - self.beta2.powi(self.t.min(i32::MAX as u64) as i32);
        let step = T::lit(lr / c1);
        let rc2 = T::lit(1.0 / c2.sqrt());
        let eps = T::lit(self.eps);
        for (id, g) in grads {
            let i = id.index();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let p = model.params.get_mut(*id).data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j];
                m[j] = b1 * m[j] + (T::one() - b1) * gj;
                v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
                p[j] -= step * m[j] / ((v[j]).sqrt() * rc2 + eps);
            }
            debug_assert!(p.iter().all(|x| x.is_finite()), "non-finite update of {}", model.params.name(*id));
        }
        Ok(())
    }
}

/// One line of the JSON-lines training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub distortion: f64,
    pub perceptual: f64,
    pub rate_bits: f64,
    pub total: f64,
    pub bpp_estimate: f64,
    pub lr: f64,
    pub lambda: f64,
}

/// Sample the random parts of a training step for a batch.
pub fn sample_draw<T: Scalar, R: Rng + ?Sized>(x0: Tensor<T>, model: &Model<T>, rng: &mut R) -> TrainingDraw<T> {
    let (b, _, h, w) = x0.dims4();
    let n_train = model.schedule().n_train();
    let lo = match model.parameterization() {
        // ε is not identifiable from an uncorrupted input.
        Parameterization::EpsilonPred => 1,
        Parameterization::XPred => 0,
    };
    let n = (0..b).map(|_| rng.gen_range(lo..=n_train)).collect();
    let eps = Tensor::randn(x0.shape(), rng);
    let z_noise = uniform_noise(&[b, model.arch.c_z, h / ENCODER_STRIDE, w / ENCODER_STRIDE], rng);
    let y_noise = uniform_noise(&[b, Y_CHANNELS, h / PAD_MULTIPLE, w / PAD_MULTIPLE], rng);
    TrainingDraw { x0, n, eps, z_noise, y_noise }
}

/// Model, optimizer and sampler state of a run.
pub struct Trainer<T: Scalar> {
    pub cfg: TrainConfig,
    pub model: Model<T>,
    pub opt: Adam<T>,
    pub rng: ChaCha8Rng,
    pub step: u64,
    data: Dataset,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(cfg: TrainConfig, arch: ArchConfig, data: Dataset) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(arch, cfg.seed)?;
        let opt = Adam::new(&model);
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_da7a);
        Ok(Self { cfg, model, opt, rng, step: 0, data })
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            lambda: lambda_at(self.step, &self.cfg),
            rho: self.cfg.rho,
            parameterization: self.model.parameterization(),
            perceptual_metric: self.cfg.perceptual_metric.clone(),
            snr_floor: self.cfg.snr_floor,
            snr_cap: self.cfg.snr_cap,
        }
    }

    /// Draw a batch, take one optimizer step, advance the counter.
    pub fn train_step(&mut self) -> Result<LossBreakdown> {
        let lcfg = self.loss_config();
        let lr = lr_at(self.step, &self.cfg);
        let mut acc: Option<Vec<(ParamId, Tensor<T>)>> = None;
        let mut br_sum = LossBreakdown::default();
        let k = self.cfg.grad_accum;
        for _ in 0..k {
            let x0 = ingest_batch::<T, _>(&self.data, self.cfg.crop_size, self.cfg.batch_size, &mut self.rng)?;
            let draw = sample_draw(x0, &self.model, &mut self.rng);
            let mut f = Fwd::train(&self.model.params);
            let (loss, br) = total_loss(&mut f, &self.model, &draw, &lcfg)?;
            if !br.total.is_finite() {
                return Err(Error::NonFinite { step: self.step, detail: format!("{br:?}, n = {:?}", draw.n) });
            }
            let grads = f.g.backward(loss).into_param_grads();
            acc = Some(match acc {
                None => grads,
                Some(mut a) => {
                    for ((_, s), (_, g)) in a.iter_mut().zip(&grads) {
                        s.axpy(T::one(), g);
                    }
                    a
                }
            });
            br_sum.distortion += br.distortion / k as f64;
            br_sum.perceptual += br.perceptual / k as f64;
            br_sum.rate_bits += br.rate_bits / k as f64;
            br_sum.total += br.total / k as f64;
            br_sum.bpp_estimate += br.bpp_estimate / k as f64;
        }
        let mut grads = acc.expect("at least one micro-batch");
        if k > 1 {
            for (_, g) in grads.iter_mut() {
                *g = g.scale(T::lit(1.0 / k as f64));
            }
        }
        self.opt.update(&mut self.model, &grads, lr).map_err(|e| match e {
            Error::NonFinite { detail, .. } => Error::NonFinite { step: self.step, detail },
            other => other,
        })?;
        self.step += 1;
        Ok(br_sum)
    }

    pub fn record(&self, step: u64, br: &LossBreakdown) -> LogRecord {
        LogRecord {
            step,
            distortion: br.distortion,
            perceptual: br.perceptual,
            rate_bits: br.rate_bits,
            total: br.total,
            bpp_estimate: br.bpp_estimate,
            lr: lr_at(step, &self.cfg),
            lambda: lambda_at(step, &self.cfg),
        }
    }

    /// Train until `n_train_steps`, logging and checkpointing into `run_dir`
    /// when given. Returns the per-step breakdowns of this call.
    pub fn run(&mut self, run_dir: Option<&Path>, mut on_step: impl FnMut(&LogRecord)) -> Result<Vec<LossBreakdown>> {
        let mut log = match run_dir {
            Some(d) => {
                fs::create_dir_all(d)?;
                Some(fs::OpenOptions::new().create(true).append(true).open(d.join("train_log.jsonl"))?)
            }
            None => None,
        };
        let mut out = Vec::new();
        while self.step < self.cfg.n_train_steps {
            let step = self.step;
            let br = self.train_step()?;
            let rec = self.record(step, &br);
            on_step(&rec);
            if let Some(l) = log.as_mut() {
                if self.cfg.log_every > 0 && step % self.cfg.log_every == 0 {
                    writeln!(l, "{}", serde_json::to_string(&rec).expect("record serializes"))?;
                }
            }
            out.push(br);
            if let Some(d) = run_dir {
                if self.cfg.checkpoint_every > 0 && self.step % self.cfg.checkpoint_every == 0 {
                    self.save(&d.join(format!("step-{:08}.ckpt", self.step)))?;
                    self.prune(d)?;
                }
            }
        }
        if let Some(d) = run_dir {
            self.save(&d.join("final.ckpt"))?;
        }
        Ok(out)
    }

    fn prune(&self, dir: &Path) -> Result<()> {
        let mut ckpts: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("step-") && n.ends_with(".ckpt")))
            .collect();
        ckpts.sort();
        let keep = self.cfg.keep_checkpoints.max(1);
        for old in ckpts.iter().take(ckpts.len().saturating_sub(keep)) {
            for p in [old.clone(), crate::checkpoint::sidecar_path(old), state_path(old)] {
                if p.exists() {
                    fs::remove_file(p)?;
                }
            }
        }
        Ok(())
    }

    /// Write the model checkpoint plus a `.train` file holding optimizer
    /// moments, the step counter, the sampler state and the config.
    pub fn save(&self, path: &Path) -> Result<()> {
        save_model(path, &self.model)?;
        let mut tensors = Vec::with_capacity(2 * self.opt.m.len());
        for (id, name, _) in self.model.params.iter() {
            tensors.push((format!("m.{name}"), &self.opt.m[id.index()]));
            tensors.push((format!("v.{name}"), &self.opt.v[id.index()]));
        }
        let mut meta = HashMap::new();
        let js = |e: serde_json::Error| Error::Checkpoint(e.to_string());
        meta.insert("step".into(), self.step.to_string());
        meta.insert("adam_t".into(), self.opt.t.to_string());
        meta.insert("rng".into(), serde_json::to_string(&self.rng).map_err(js)?);
        meta.insert("config".into(), serde_json::to_string(&self.cfg).map_err(js)?);
        write_tensors(&state_path(path), &tensors, meta)
    }

    /// Resume from [`Trainer::save`] output. The dataset must be the same
    /// for the continuation to match an uninterrupted run.
    pub fn resume(path: &Path, data: Dataset) -> Result<Self> {
        let model: Model<T> = load_model(path)?;
        let (tensors, meta) = read_tensors::<T>(&state_path(path))?;
        let get = |k: &str| meta.get(k).ok_or_else(|| Error::Checkpoint(format!("training state lacks `{k}`")));
        let js = |e: serde_json::Error| Error::Checkpoint(e.to_string());
        let num = |k: &str| -> Result<u64> { get(k)?.parse().map_err(|_| Error::Checkpoint(format!("bad `{k}`"))) };
        let cfg: TrainConfig = serde_json::from_str(get("config")?).map_err(js)?;
        let rng: ChaCha8Rng = serde_json::from_str(get("rng")?).map_err(js)?;
        let mut opt = Adam::new(&model);
        opt.t = num("adam_t")?;
        let by_name: HashMap<String, Tensor<T>> = tensors.into_iter().collect();
        for (id, name, t) in model.params.iter() {
            for (prefix, slot) in [("m", &mut opt.m), ("v", &mut opt.v)] {
                let key = format!("{prefix}.{name}");
                let s = by_name.get(&key).ok_or_else(|| Error::Checkpoint(format!("training state lacks {key}")))?;
                if s.shape() != t.shape() {
                    return Err(Error::Checkpoint(format!("{key} has the wrong shape")));
                }
                slot[id.index()] = s.clone();
            }
        }
        Ok(Self { cfg, model, opt, rng, step: num("step")?, data })
    }
}

/// Optimizer state file that accompanies a checkpoint.
pub fn state_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".train");
    PathBuf::from(s)
}

/// Mean of `values[from..from + len]`, clipped to the slice.
pub fn window_mean(values: &[f64], from: usize, len: usize) -> f64 {
    let end = (from + len).min(values.len());
    let from = from.min(end);
    let s = &values[from..end];
    s.iter().sum::<f64>() / s.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::generate_corpus;

    #[test]
    fn lr_schedule_matches_closed_form() {
        let c = TrainConfig::paper();
        assert_eq!(lr_at(0, &c), 5e-5);
        assert!((lr_at(100_000, &c) - 4e-5).abs() < 1e-18);
        assert!((lr_at(199_999, &c) - 4e-5).abs() < 1e-18);
        assert_eq!(lr_at(u64::MAX, &c), 2e-5);
        assert_eq!(lr_at(10_000_000, &c), 2e-5);
    }

    #[test]
    fn lambda_warmup() {
        let mut c = TrainConfig::paper();
        assert_eq!(lambda_at(0, &c), 1e-5);
        assert_eq!(lambda_at(499_999, &c), 1e-5);
        assert_eq!(lambda_at(500_000, &c), c.lambda_target);
        c.lambda_warmup_steps = 0;
        assert_eq!(lambda_at(0, &c), c.lambda_target);
    }

    #[test]
    fn config_invariants() {
        let mut c = TrainConfig::desk();
        assert!(c.validate().is_ok());
        c.lr_floor = 1.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::desk();
        c.lambda_warmup_steps = c.n_train_steps + 1;
        assert!(c.validate().is_err());
        let parsed: TrainConfig = toml::from_str("preset = \"desk\"\nbatch_size = 2").unwrap();
        assert_eq!(parsed.batch_size, 2);
        assert!(toml::from_str::<TrainConfig>("bogus = 1").is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut m = Model::<f64>::new(ArchConfig::small(), 0).unwrap();
        let id = m.params.ids().next().unwrap();
        let before = m.params.get(id).clone();
        let mut opt = Adam::new(&m);
        let g = Tensor::full(before.shape(), 3.0);
        opt.update(&mut m, &[(id, g)], 0.01).unwrap();
        let diff = before.sub(m.params.get(id));
        assert!(diff.data().iter().all(|&d| (d - 0.01).abs() < 1e-9));
        let bad = Tensor::full(before.shape(), f64::NAN);
        assert!(matches!(opt.update(&mut m, &[(id, bad)], 0.01), Err(Error::NonFinite { .. })));
    }

    fn tiny_cfg(steps: u64) -> TrainConfig {
        TrainConfig { n_train_steps: steps, batch_size: 1, lambda_warmup_steps: 1, checkpoint_every: 0, ..TrainConfig::desk() }
    }

    #[test]
    fn resume_reproduces_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        generate_corpus(&data, 4, 64, 3).unwrap();
        let ds = Dataset::open(&data).unwrap();
        let arch = ArchConfig::small();

        let mut full = Trainer::<f32>::new(tiny_cfg(3), arch.clone(), ds.clone()).unwrap();
        let all = full.run(None, |_| {}).unwrap();

        let mut first = Trainer::<f32>::new(tiny_cfg(3), arch, ds.clone()).unwrap();
        first.train_step().unwrap();
        first.train_step().unwrap();
        let ck = dir.path().join("mid.ckpt");
        first.save(&ck).unwrap();
        let mut resumed = Trainer::<f32>::resume(&ck, ds).unwrap();
        assert_eq!(resumed.step, 2);
        let last = resumed.train_step().unwrap();
        assert_eq!(last, all[2]);
        assert_eq!(resumed.model.model_id(), full.model.model_id());
    }
}
