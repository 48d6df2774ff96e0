//! Metric-vs-bpp SVG panels from one or more rd.csv files.
//!
//! Each file is one trained model. Its mean rows become one point per decoder
//! setting, and points that share a setting are joined across files into a
//! curve.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use cdc_core::metrics::RDPoint;
use plotters::prelude::*;

type Series = BTreeMap<(usize, u64), Vec<RDPoint>>;

const PANELS: [(&str, fn(&RDPoint) -> Option<f64>); 3] = [("PSNR (dB)", |p| Some(p.psnr_db)), ("SSIM", |p| Some(p.ssim)), ("MS-SSIM", |p| p.ms_ssim)];

fn series(inputs: &[PathBuf]) -> Result<Series> {
    let mut s = Series::new();
    for path in inputs {
        for p in crate::read_table(path)?.into_iter().filter(|p| p.image_id == "mean") {
            s.entry((p.n_test, p.gamma.to_bits())).or_default().push(p);
        }
    }
    for pts in s.values_mut() {
        pts.sort_by(|a, b| a.bpp.total_cmp(&b.bpp));
    }
    Ok(s)
}

fn padded(lo: f64, hi: f64) -> (f64, f64) {
    let span = (hi - lo).max(1e-3);
    (lo - 0.08 * span, hi + 0.08 * span)
}

pub fn plot(inputs: &[PathBuf], out: &Path) -> Result<()> {
    let s = series(inputs)?;
    if s.is_empty() {
        bail!("no mean rows in the given tables");
    }
    let root = SVGBackend::new(out, (1200, 400)).into_drawing_area();
    root.fill(&WHITE)?;
    let panels = root.split_evenly((1, PANELS.len()));
    let all: Vec<&RDPoint> = s.values().flatten().collect();
    let (b0, b1) = padded(all.iter().map(|p| p.bpp).fold(f64::INFINITY, f64::min), all.iter().map(|p| p.bpp).fold(f64::NEG_INFINITY, f64::max));
    for (area, (name, get)) in panels.iter().zip(PANELS) {
        let vals: Vec<f64> = all.iter().filter_map(|p| get(p)).collect();
        if vals.is_empty() {
            area.titled(&format!("{name}: no data"), ("sans-serif", 16))?;
            continue;
        }
        let (y0, y1) = padded(vals.iter().copied().fold(f64::INFINITY, f64::min), vals.iter().copied().fold(f64::NEG_INFINITY, f64::max));
        let mut chart = ChartBuilder::on(area).caption(name, ("sans-serif", 18)).margin(12).x_label_area_size(36).y_label_area_size(52).build_cartesian_2d(b0..b1, y0..y1)?;
        chart.configure_mesh().x_desc("bpp").y_desc(name).draw()?;
        for (i, ((steps, gamma), pts)) in s.iter().enumerate() {
            let color = Palette99::pick(i).to_rgba();
            let xy: Vec<(f64, f64)> = pts.iter().filter_map(|p| get(p).map(|v| (p.bpp, v))).collect();
            let label = format!("{steps} steps, γ={}", f64::from_bits(*gamma));
            chart.draw_series(LineSeries::new(xy.clone(), color.stroke_width(2)))?.label(label).legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
            chart.draw_series(xy.into_iter().map(|c| Circle::new(c, 3, color.filled())))?;
        }
        chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw()?;
    }
    root.present()?;
    log::info!("wrote {}", out.display());
    Ok(())
}
