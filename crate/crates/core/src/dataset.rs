//! Image I/O, the synthetic training corpus, and random-crop batching.

use std::fs;
use std::path::{Path, PathBuf};

use cdc_tensor::{Scalar, Tensor};
use image::{Rgb, RgbImage};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::{Error, Result};

/// Pixel `v ∈ 0..=255` to the network domain `2v/255 − 1`.
pub fn pixel_to_unit(v: u8) -> f64 {
    2.0 * v as f64 / 255.0 - 1.0
}

/// Inverse of [`pixel_to_unit`] with clamping and half-away-from-zero
/// rounding.
pub fn unit_to_pixel(v: f64) -> u8 {
    let v = if v.is_nan() { -1.0 } else { v.clamp(-1.0, 1.0) };
    ((v + 1.0) * 127.5).round() as u8
}

/// `[1, 3, h, w]` tensor from an RGB image.
pub fn image_to_tensor<T: Scalar>(img: &RgbImage) -> Tensor<T> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![T::zero(); 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = T::lit(pixel_to_unit(p[c]));
        }
    }
    Tensor::from_vec(&[1, 3, h, w], data)
}

/// Sample `i` of an `[n, 3, h, w]` tensor as an 8-bit image.
pub fn tensor_to_image<T: Scalar>(t: &Tensor<T>, i: usize) -> RgbImage {
    let (_, _, h, w) = t.dims4();
    let base = i * 3 * h * w;
    let d = t.data();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let at = |c: usize| unit_to_pixel(d[base + (c * h + y as usize) * w + x as usize].as_f64());
        Rgb([at(0), at(1), at(2)])
    })
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path)?.to_rgb8())
}

fn is_image(p: &Path) -> bool {
    matches!(p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(), Some("png"))
}

fn sorted_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_file() && is_image(p)).collect();
    v.sort();
    Ok(v)
}

/// A training corpus: either a flat directory of images or a directory of
/// clip subdirectories, one frame of which is drawn per sample.
#[derive(Clone, Debug)]
pub struct Dataset {
    root: PathBuf,
    /// Each entry is one clip; flat corpora have single-frame clips.
    clips: Vec<Vec<PathBuf>>,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        if !root.is_dir() {
            return Err(Error::Dataset(format!("{} is not a directory", root.display())));
        }
        let mut clips: Vec<Vec<PathBuf>> = sorted_images(root)?.into_iter().map(|p| vec![p]).collect();
        let mut dirs: Vec<PathBuf> = fs::read_dir(root)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect();
        dirs.sort();
        for d in dirs {
            let frames = sorted_images(&d)?;
            if !frames.is_empty() {
                clips.push(frames);
            }
        }
        if clips.is_empty() {
            return Err(Error::Dataset(format!("no images under {}", root.display())));
        }
        Ok(Self { root: root.to_path_buf(), clips })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    /// First frame of every clip, in order.
    pub fn first_frames(&self) -> impl Iterator<Item = &Path> {
        self.clips.iter().map(|c| c[0].as_path())
    }

    /// Keep only the first `n` clips.
    pub fn truncate(&mut self, n: usize) {
        self.clips.truncate(n.max(1));
    }
}

/// Random `crop×crop` crops of random clips (one random frame each), stacked
/// into `[batch, 3, crop, crop]`. Images smaller than the crop are skipped
/// with a warning.
pub fn ingest_batch<T: Scalar, R: Rng + ?Sized>(ds: &Dataset, crop: usize, batch: usize, rng: &mut R) -> Result<Tensor<T>> {
    let mut items = Vec::with_capacity(batch);
    let mut misses = 0usize;
    while items.len() < batch {
        let clip = &ds.clips[rng.gen_range(0..ds.clips.len())];
        let path = &clip[rng.gen_range(0..clip.len())];
        let img = load_rgb(path)?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        if w < crop || h < crop {
            log::warn!("skipping {} ({w}x{h} is smaller than the {crop}px crop)", path.display());
            misses += 1;
            if misses > 16 * batch + ds.len() {
                return Err(Error::Dataset(format!("no image in {} is at least {crop}px", ds.root.display())));
            }
            continue;
        }
        let x0 = rng.gen_range(0..=w - crop) as u32;
        let y0 = rng.gen_range(0..=h - crop) as u32;
        let sub = image::imageops::crop_imm(&img, x0, y0, crop as u32, crop as u32).to_image();
        items.push(image_to_tensor::<T>(&sub));
    }
    Ok(Tensor::stack_batch(&items))
}

/// Kinds of procedurally generated images in the synthetic corpus.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Synthetic {
    Gradient,
    Shapes,
    Checkerboard,
    Noise,
}

fn rand_color<R: Rng + ?Sized>(rng: &mut R) -> [f64; 3] {
    [rng.gen_range(0.0..255.0), rng.gen_range(0.0..255.0), rng.gen_range(0.0..255.0)]
}

fn to_u8(v: f64) -> u8 {
    v.clamp(0.0, 255.0).round() as u8
}

fn lerp(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

fn gradient_field<R: Rng + ?Sized>(size: usize, rng: &mut R) -> Vec<[f64; 3]> {
    let (a, b) = (rand_color(rng), rand_color(rng));
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let radial = rng.gen_bool(0.3);
    let (cx, cy) = (rng.gen_range(0.0..size as f64), rng.gen_range(0.0..size as f64));
    let s = size as f64;
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64, y as f64);
            let t = if radial {
                ((fx - cx).hypot(fy - cy) / (s * 0.9)).min(1.0)
            } else {
                let p = (fx - s / 2.0) * angle.cos() + (fy - s / 2.0) * angle.sin();
                (p / s + 0.5).clamp(0.0, 1.0)
            };
            out.push(lerp(a, b, t));
        }
    }
    out
}

/// One synthetic image of the given kind.
pub fn synthetic_image<R: Rng + ?Sized>(kind: Synthetic, size: usize, rng: &mut R) -> RgbImage {
    let mut px = gradient_field(size, rng);
    let s = size as f64;
    match kind {
        Synthetic::Gradient => {}
        Synthetic::Shapes => {
            for _ in 0..rng.gen_range(2..6) {
                let col = rand_color(rng);
                let (cx, cy) = (rng.gen_range(0.0..s), rng.gen_range(0.0..s));
                let r = rng.gen_range(s * 0.08..s * 0.3);
                let circle = rng.gen_bool(0.5);
                for y in 0..size {
                    for x in 0..size {
                        let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                        let inside = if circle { dx.hypot(dy) < r } else { dx.abs() < r && dy.abs() < r * 0.7 };
                        if inside {
                            px[y * size + x] = col;
                        }
                    }
                }
            }
        }
        Synthetic::Checkerboard => {
            let cell = rng.gen_range(4..=(size / 4).max(5));
            let col = rand_color(rng);
            for y in 0..size {
                for x in 0..size {
                    if (x / cell + y / cell) % 2 == 0 {
                        px[y * size + x] = lerp(px[y * size + x], col, 0.7);
                    }
                }
            }
        }
        Synthetic::Noise => {
            let amp = rng.gen_range(20.0..60.0);
            let mut noise: Vec<f64> = (0..size * size).map(|_| rng.gen_range(-1.0..1.0)).collect();
            // A few box-blur passes turn white noise into a soft texture.
            let radius = rng.gen_range(1..4usize);
            for _ in 0..2 {
                let src = noise.clone();
                for y in 0..size {
                    for x in 0..size {
                        let mut acc = 0.0;
                        let mut cnt = 0.0;
                        for yy in y.saturating_sub(radius)..(y + radius + 1).min(size) {
                            for xx in x.saturating_sub(radius)..(x + radius + 1).min(size) {
                                acc += src[yy * size + xx];
                                cnt += 1.0;
                            }
                        }
                        noise[y * size + x] = acc / cnt;
                    }
                }
            }
            let gain = 1.0 / noise.iter().fold(1e-6f64, |m, v| m.max(v.abs()));
            for (p, n) in px.iter_mut().zip(&noise) {
                for c in p.iter_mut() {
                    *c += n * gain * amp;
                }
            }
        }
    }
    RgbImage::from_fn(size as u32, size as u32, |x, y| {
        let p = px[y as usize * size + x as usize];
        Rgb([to_u8(p[0]), to_u8(p[1]), to_u8(p[2])])
    })
}

const KINDS: [Synthetic; 4] = [Synthetic::Gradient, Synthetic::Shapes, Synthetic::Checkerboard, Synthetic::Noise];

/// The `i`-th image of the corpus for `seed`; independent of `n`.
pub fn synthetic_item(seed: u64, i: usize, size: usize) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64);
    let kind = KINDS[rng.gen_range(0..KINDS.len())];
    synthetic_image(kind, size, &mut rng)
}

/// Write `n` synthetic PNGs into `dir` and return the SHA-256 of their
/// pixels, which is also stored in `dir/CHECKSUM`.
pub fn generate_corpus(dir: &Path, n: usize, size: usize, seed: u64) -> Result<String> {
    if size == 0 {
        return Err(Error::InvalidRange("image size must be positive".into()));
    }
    fs::create_dir_all(dir)?;
    let mut h = Sha256::new();
    for i in 0..n {
        let img = synthetic_item(seed, i, size);
        h.update(img.as_raw());
        img.save(dir.join(format!("synthetic_{i:05}.png")))?;
    }
    let digest: String = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
    fs::write(dir.join("CHECKSUM"), format!("{digest}\n"))?;
    Ok(digest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pixel_mapping_round_trips() {
        for v in 0..=255u8 {
            assert_eq!(unit_to_pixel(pixel_to_unit(v)), v);
        }
        assert_eq!(unit_to_pixel(7.0), 255);
        assert_eq!(unit_to_pixel(-7.0), 0);
        assert_eq!(unit_to_pixel(0.0), 128);
    }

    #[test]
    fn corpus_is_deterministic() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ca = generate_corpus(a.path(), 6, 32, 7).unwrap();
        let cb = generate_corpus(b.path(), 6, 32, 7).unwrap();
        assert_eq!(ca, cb);
        assert_ne!(ca, generate_corpus(b.path(), 6, 32, 8).unwrap());
        let ds = Dataset::open(a.path()).unwrap();
        assert_eq!(ds.len(), 6);
    }

    #[test]
    fn full_size_crop_is_the_image() {
        let dir = tempfile::tempdir().unwrap();
        generate_corpus(dir.path(), 1, 16, 1).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        let img = load_rgb(ds.first_frames().next().unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = ingest_batch::<f32, _>(&ds, 16, 2, &mut rng).unwrap();
        assert_eq!(b.shape(), &[2, 3, 16, 16]);
        assert_eq!(tensor_to_image(&b, 1), img);
        assert!(ingest_batch::<f32, _>(&ds, 32, 1, &mut rng).is_err());
    }

    #[test]
    fn clip_directories_are_sampled() {
        let dir = tempfile::tempdir().unwrap();
        generate_corpus(&dir.path().join("clip_a"), 3, 16, 1).unwrap();
        generate_corpus(&dir.path().join("clip_b"), 2, 16, 2).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        assert_eq!(ds.len(), 2);
        assert!(Dataset::open(&dir.path().join("missing")).is_err());
    }
}
