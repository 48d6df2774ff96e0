//! Distortion metrics on 8-bit RGB images and rate–distortion tables.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{decompress, DecodeSettings};
use crate::container::Bitstream;
use crate::dataset::load_rgb;
use crate::fast_coder::Backend;
use crate::transforms::Model;
use crate::{Error, Result};
use cdc_tensor::Scalar;

pub const PSNR_CAP: f64 = 100.0;
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
/// Smallest side with room for five dyadic scales of an 11-tap window.
pub const MS_SSIM_MIN_SIDE: usize = 160;

const WIN: usize = 11;
const WIN_SIGMA: f64 = 1.5;
const L: f64 = 255.0;
const C1: f64 = (0.01 * L) * (0.01 * L);
const C2: f64 = (0.03 * L) * (0.03 * L);

fn same_dims(a: &RgbImage, b: &RgbImage) -> Result<()> {
    if a.dimensions() != b.dimensions() {
        return Err(Error::Shape(format!("image sizes differ: {:?} vs {:?}", a.dimensions(), b.dimensions())));
    }
    Ok(())
}

/// PSNR over all three channels jointly, capped at [`PSNR_CAP`].
pub fn psnr(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    same_dims(a, b)?;
    let n = a.as_raw().len() as f64;
    let sse: f64 = a.as_raw().iter().zip(b.as_raw()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    if sse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (L * L / (sse / n)).log10()).min(PSNR_CAP))
}

/// One channel as a dense plane.
#[derive(Clone, Debug)]
struct Plane {
    w: usize,
    h: usize,
    v: Vec<f64>,
}

impl Plane {
    fn channel(img: &RgbImage, c: usize) -> Self {
        let v = img.as_raw().iter().skip(c).step_by(3).map(|&p| p as f64).collect();
        Self { w: img.width() as usize, h: img.height() as usize, v }
    }

    fn map2(&self, o: &Plane, f: impl Fn(f64, f64) -> f64) -> Plane {
        Plane { w: self.w, h: self.h, v: self.v.iter().zip(&o.v).map(|(&a, &b)| f(a, b)).collect() }
    }

    /// 2×2 average pooling; an odd last row or column is dropped.
    fn downsample(&self) -> Plane {
        let (w, h) = (self.w / 2, self.h / 2);
        let mut v = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let at = |dy: usize, dx: usize| self.v[(2 * y + dy) * self.w + 2 * x + dx];
                v.push(0.25 * (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)));
            }
        }
        Plane { w, h, v }
    }

    /// Separable "valid" filtering with a symmetric kernel.
    fn filter(&self, k: &[f64]) -> Plane {
        let n = k.len();
        let wo = self.w + 1 - n;
        let ho = self.h + 1 - n;
        let mut tmp = vec![0.0; self.h * wo];
        for y in 0..self.h {
            let row = &self.v[y * self.w..(y + 1) * self.w];
            for x in 0..wo {
                tmp[y * wo + x] = k.iter().zip(&row[x..x + n]).map(|(a, b)| a * b).sum();
            }
        }
        let mut v = vec![0.0; ho * wo];
        for y in 0..ho {
            for (i, &kv) in k.iter().enumerate() {
                let src = &tmp[(y + i) * wo..(y + i + 1) * wo];
                for (d, s) in v[y * wo..(y + 1) * wo].iter_mut().zip(src) {
                    *d += kv * s;
                }
            }
        }
        Plane { w: wo, h: ho, v }
    }
}

/// Normalized Gaussian taps. The window shrinks (with σ scaled alongside) when
/// the image is smaller than the nominal 11 taps.
fn gaussian_window(side: usize) -> Vec<f64> {
    let n = WIN.min(side);
    let sigma = WIN_SIGMA * n as f64 / WIN as f64;
    let c = (n as f64 - 1.0) / 2.0;
    let k: Vec<f64> = (0..n).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Mean SSIM and mean contrast-structure term of one channel at one scale.
fn ssim_cs(a: &Plane, b: &Plane) -> (f64, f64) {
    let k = gaussian_window(a.w.min(a.h));
    let mu_a = a.filter(&k);
    let mu_b = b.filter(&k);
    let aa = a.map2(a, |x, y| x * y).filter(&k);
    let bb = b.map2(b, |x, y| x * y).filter(&k);
    let ab = a.map2(b, |x, y| x * y).filter(&k);
    let n = mu_a.v.len() as f64;
    let (mut ssim, mut cs) = (0.0, 0.0);
    for i in 0..mu_a.v.len() {
        let (ma, mb) = (mu_a.v[i], mu_b.v[i]);
        let va = aa.v[i] - ma * ma;
        let vb = bb.v[i] - mb * mb;
        let cov = ab.v[i] - ma * mb;
        let c = (2.0 * cov + C2) / (va + vb + C2);
        cs += c;
        ssim += c * (2.0 * ma * mb + C1) / (ma * ma + mb * mb + C1);
    }
    (ssim / n, cs / n)
}

/// Gaussian-window SSIM averaged over the RGB channels.
pub fn ssim(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    same_dims(a, b)?;
    if a.width() == 0 || a.height() == 0 {
        return Err(Error::Shape("empty image".into()));
    }
    Ok((0..3).map(|c| ssim_cs(&Plane::channel(a, c), &Plane::channel(b, c)).0).sum::<f64>() / 3.0)
}

/// Five-scale MS-SSIM averaged over the RGB channels. Negative per-scale
/// terms are clamped to zero so the result stays in `[0, 1]`.
pub fn ms_ssim(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    same_dims(a, b)?;
    let side = a.width().min(a.height()) as usize;
    if side < MS_SSIM_MIN_SIDE {
        return Err(Error::Shape(format!("MS-SSIM needs both sides ≥ {MS_SSIM_MIN_SIDE} px, got {}x{}", a.width(), a.height())));
    }
    let mut total = 0.0;
    for c in 0..3 {
        let (mut pa, mut pb) = (Plane::channel(a, c), Plane::channel(b, c));
        let mut v = 1.0;
        for (s, &wgt) in MS_SSIM_WEIGHTS.iter().enumerate() {
            let (ss, cs) = ssim_cs(&pa, &pb);
            let term = if s + 1 == MS_SSIM_WEIGHTS.len() { ss } else { cs };
            v *= term.max(0.0).powf(wgt);
            pa = pa.downsample();
            pb = pb.downsample();
        }
        total += v;
    }
    Ok(total / 3.0)
}

/// One decoded image at one decoder setting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RDPoint {
    pub image_id: String,
    pub bpp: f64,
    pub psnr_db: f64,
    pub ssim: f64,
    /// Absent for images too small for five scales.
    pub ms_ssim: Option<f64>,
    /// Learned perceptual distance; absent unless a plugin supplies it.
    pub lpips: Option<f64>,
    pub n_test: usize,
    pub gamma: f64,
    pub model_id: String,
    pub rho_preset: Option<f64>,
}

/// Measure one reconstruction against its original.
pub fn rd_point(image_id: &str, original: &RgbImage, decoded: &RgbImage, container_bytes: usize, settings: &DecodeSettings, model_id: &str, rho: Option<f64>) -> Result<RDPoint> {
    let bpp = (container_bytes * 8) as f64 / (original.width() as f64 * original.height() as f64);
    let ms = match ms_ssim(original, decoded) {
        Ok(v) => Some(v),
        Err(Error::Shape(_)) if original.dimensions() == decoded.dimensions() => None,
        Err(e) => return Err(e),
    };
    Ok(RDPoint {
        image_id: image_id.to_string(),
        bpp,
        psnr_db: psnr(original, decoded)?,
        ssim: ssim(original, decoded)?,
        ms_ssim: ms,
        lpips: None,
        n_test: settings.n_test,
        gamma: settings.gamma,
        model_id: model_id.to_string(),
        rho_preset: rho,
    })
}

/// Per-setting means, keyed by `(n_test, gamma)`.
pub fn summarize(points: &[RDPoint]) -> Vec<RDPoint> {
    let mut groups: BTreeMap<(usize, u64), Vec<&RDPoint>> = BTreeMap::new();
    for p in points {
        groups.entry((p.n_test, p.gamma.to_bits())).or_default().push(p);
    }
    groups
        .into_values()
        .map(|g| {
            let n = g.len() as f64;
            let mean = |f: &dyn Fn(&RDPoint) -> f64| g.iter().map(|p| f(p)).sum::<f64>() / n;
            let opt_mean = |f: &dyn Fn(&RDPoint) -> Option<f64>| g.iter().map(|p| f(p)).collect::<Option<Vec<f64>>>().map(|v| v.iter().sum::<f64>() / n);
            RDPoint {
                image_id: "mean".into(),
                bpp: mean(&|p| p.bpp),
                psnr_db: mean(&|p| p.psnr_db),
                ssim: mean(&|p| p.ssim),
                ms_ssim: opt_mean(&|p| p.ms_ssim),
                lpips: opt_mean(&|p| p.lpips),
                n_test: g[0].n_test,
                gamma: g[0].gamma,
                model_id: g[0].model_id.clone(),
                rho_preset: g[0].rho_preset,
            }
        })
        .collect()
}

/// Per-image rows followed by the per-setting mean rows.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RdTable {
    pub points: Vec<RDPoint>,
    pub summary: Vec<RDPoint>,
}

impl RdTable {
    pub fn new(points: Vec<RDPoint>) -> Self {
        let summary = summarize(&points);
        Self { points, summary }
    }

    /// Columns: image_id, bpp, psnr_db, ssim, ms_ssim, lpips, n_test, gamma,
    /// model_id, rho_preset. Missing values are empty cells.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(e.into()))?;
        for p in self.points.iter().chain(&self.summary) {
            w.serialize(p).map_err(|e| Error::Io(e.into()))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self).map_err(|e| Error::Io(e.into()))?;
        fs::write(path, s)?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Vec<RDPoint>> {
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::Io(e.into()))?;
        r.deserialize().map(|row| row.map_err(|e| Error::Io(e.into()))).collect()
    }
}

/// `.cdc` files in `bitstreams` paired with same-stem `.png` originals.
/// Unpaired containers are skipped with a warning.
pub fn pair_files(originals: &Path, bitstreams: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    let mut cdcs: Vec<PathBuf> = fs::read_dir(bitstreams)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.extension().is_some_and(|e| e == "cdc")).collect();
    cdcs.sort();
    let mut out = Vec::new();
    for c in cdcs {
        let stem = c.file_stem().unwrap_or_default().to_string_lossy().to_string();
        let orig = originals.join(format!("{stem}.png"));
        if orig.is_file() {
            out.push((stem, orig, c));
        } else {
            log::warn!("no original for {}; skipping", c.display());
        }
    }
    Ok(out)
}

/// Decode every paired container under every setting in `grid`, spreading
/// files over `jobs` threads.
pub fn collect_rd<T: Scalar>(originals: &Path, bitstreams: &Path, grid: &[DecodeSettings], model: &Model<T>, backend: &Backend, rho: Option<f64>, jobs: usize) -> Result<RdTable> {
    if grid.is_empty() {
        return Ok(RdTable::default());
    }
    let id = crate::checkpoint::hex(&model.model_id());
    let pairs = pair_files(originals, bitstreams)?;
    let one = |(stem, orig, cdc): &(String, PathBuf, PathBuf)| -> Result<Vec<RDPoint>> {
        let original = load_rgb(orig)?;
        let bytes = fs::read(cdc)?;
        let bs = Bitstream::from_bytes(&bytes)?;
        grid.iter()
            .map(|s| {
                let dec = decompress(model, &bs, backend, s)?;
                rd_point(stem, &original, &dec.image, bytes.len(), s, &id, rho)
            })
            .collect()
    };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build().map_err(|e| Error::Config(e.to_string()))?;
    let per_file: Vec<Result<Vec<RDPoint>>> = pool.install(|| pairs.par_iter().map(one).collect());
    let mut points = Vec::new();
    for r in per_file {
        points.extend(r?);
    }
    Ok(RdTable::new(points))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synthetic_image, Synthetic};
    use image::Rgb;
    use rand::SeedableRng;

    fn test_image(size: usize) -> RgbImage {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        synthetic_image(Synthetic::Shapes, size, &mut rng)
    }

    fn box_blur(img: &RgbImage, k: u32) -> RgbImage {
        let r = (k / 2) as i64;
        let (w, h) = (img.width() as i64, img.height() as i64);
        RgbImage::from_fn(img.width(), img.height(), |x, y| {
            let mut acc = [0u32; 3];
            let mut n = 0;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (sx, sy) = ((x as i64 + dx).clamp(0, w - 1), (y as i64 + dy).clamp(0, h - 1));
                    let p = img.get_pixel(sx as u32, sy as u32);
                    for c in 0..3 {
                        acc[c] += p[c] as u32;
                    }
                    n += 1;
                }
            }
            Rgb(acc.map(|v| ((v as f64 / n as f64).round()) as u8))
        })
    }

    #[test]
    fn psnr_closed_forms() {
        let black = RgbImage::new(8, 8);
        let white = RgbImage::from_pixel(8, 8, Rgb([255; 3]));
        assert_eq!(psnr(&black, &black).unwrap(), 100.0);
        assert!(psnr(&black, &white).unwrap().abs() < 1e-12);
        let grey = RgbImage::from_pixel(8, 8, Rgb([100; 3]));
        let off = RgbImage::from_fn(8, 8, |x, _| Rgb([if x % 2 == 0 { 101 } else { 99 }; 3]));
        assert!((psnr(&grey, &off).unwrap() - 48.1308).abs() < 1e-4);
        assert!(psnr(&grey, &RgbImage::new(4, 8)).is_err());
    }

    #[test]
    fn identities_and_symmetry() {
        let a = test_image(160);
        let b = box_blur(&a, 3);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!((ms_ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        assert!((ms_ssim(&a, &b).unwrap() - ms_ssim(&b, &a).unwrap()).abs() < 1e-12);
        let s = ms_ssim(&a, &b).unwrap();
        assert!((0.0..1.0).contains(&s));
    }

    #[test]
    fn ms_ssim_needs_room_for_five_scales() {
        let a = test_image(128);
        assert!(matches!(ms_ssim(&a, &a), Err(Error::Shape(_))));
        assert!(ssim(&a, &a).is_ok());
    }

    #[test]
    fn blur_ladder_is_monotone() {
        let a = test_image(192);
        let scores: Vec<f64> = [1, 3, 5, 7].iter().map(|&k| ms_ssim(&a, &box_blur(&a, k)).unwrap()).collect();
        assert_eq!(scores[0], 1.0);
        assert!(scores.windows(2).all(|w| w[1] < w[0]), "{scores:?}");
    }

    #[test]
    fn summary_and_files() {
        let s = DecodeSettings { n_test: 17, gamma: 0.0, seed: None, dump_steps: vec![] };
        let a = test_image(64);
        let b = box_blur(&a, 3);
        let p1 = rd_point("a", &a, &b, 400, &s, "m", None).unwrap();
        assert!(p1.ms_ssim.is_none());
        assert!((p1.bpp - 400.0 * 8.0 / 4096.0).abs() < 1e-12);
        let mut p2 = p1.clone();
        p2.image_id = "b".into();
        p2.bpp = 2.0;
        let t = RdTable::new(vec![p1.clone(), p2]);
        assert_eq!(t.summary.len(), 1);
        assert!((t.summary[0].bpp - (p1.bpp + 2.0) / 2.0).abs() < 1e-12);
        let dir = tempfile::tempdir().unwrap();
        t.write_csv(&dir.path().join("rd.csv")).unwrap();
        t.write_json(&dir.path().join("rd.json")).unwrap();
        let rows = RdTable::read_csv(&dir.path().join("rd.csv")).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0], t.points[0]);
        assert_eq!(rows[2].image_id, "mean");
        let header = fs::read_to_string(dir.path().join("rd.csv")).unwrap();
        assert!(header.starts_with("image_id,bpp,psnr_db,ssim,ms_ssim,lpips,n_test,gamma,model_id,rho_preset\n"));
    }

    #[test]
    fn empty_grid_is_empty_table() {
        let dir = tempfile::tempdir().unwrap();
        let m = Model::<f32>::new(crate::ArchConfig::small(), 0).unwrap();
        let t = collect_rd(dir.path(), dir.path(), &[], &m, &Backend::Reference, None, 1).unwrap();
        assert!(t.points.is_empty() && t.summary.is_empty());
    }
}
