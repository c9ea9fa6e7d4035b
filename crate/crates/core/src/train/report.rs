//! Machine-readable report tables and simple raster plots.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::Result;

/// One row of the ablation/evaluation table.
#[derive(Debug, Clone)]
pub struct ReportRow {
    pub suite: String,
    pub variant: String,
    pub psnr_db: f64,
    pub ssim: f64,
    pub runtime_s: f64,
    pub steps: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Default)]
pub struct ReportTable {
    pub rows: Vec<ReportRow>,
}

impl ReportTable {
    pub fn push(&mut self, row: ReportRow) {
        self.rows.push(row);
    }

    /// Tab-separated text with a fixed header and fixed float precision so
    /// identical runs produce identical bytes.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("suite\tvariant\tpsnr_db\tssim\truntime_s\tsteps\tseed\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{}\t{}\t{:.4}\t{:.6}\t{:.6}\t{}\t{}\n",
                r.suite, r.variant, r.psnr_db, r.ssim, r.runtime_s, r.steps, r.seed
            ));
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv())?;
        Ok(())
    }
}

const PLOT_W: u32 = 640;
const PLOT_H: u32 = 480;
const MARGIN: u32 = 48;

fn draw_line(img: &mut RgbImage, x0: f32, y0: f32, x1: f32, y1: f32, color: Rgb<u8>) {
    let steps = ((x1 - x0).abs().max((y1 - y0).abs()) as u32).max(1);
    for i in 0..=steps {
        let t = i as f32 / steps as f32;
        let x = (x0 + (x1 - x0) * t).round() as i64;
        let y = (y0 + (y1 - y0) * t).round() as i64;
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
    }
}

/// Minimal line chart: one series, labeled by its data range in the margin
/// ticks. Good enough for step sweeps and training curves.
pub fn line_plot(path: &Path, xs: &[f64], ys: &[f64], _title: &str) -> Result<()> {
    let mut img = RgbImage::from_pixel(PLOT_W, PLOT_H, Rgb([255, 255, 255]));
    let axes = Rgb([0, 0, 0]);
    let series = Rgb([200, 40, 40]);
    let grid = Rgb([220, 220, 220]);

    let (w, h, m) = (PLOT_W as f32, PLOT_H as f32, MARGIN as f32);
    // axes
    draw_line(&mut img, m, h - m, w - m / 2.0, h - m, axes);
    draw_line(&mut img, m, h - m, m, m / 2.0, axes);

    if xs.is_empty() || xs.len() != ys.len() {
        img.save(path).map_err(|e| crate::error::Error::format(format!("plot save: {e}")))?;
        return Ok(());
    }
    let (xmin, xmax) = xs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    let finite_ys: Vec<f64> = ys.iter().copied().filter(|v| v.is_finite()).collect();
    let (ymin, ymax) = finite_ys
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    let xspan = (xmax - xmin).max(1e-12);
    let yspan = (ymax - ymin).max(1e-12);
    let to_px = |x: f64, y: f64| -> (f32, f32) {
        (
            m + ((x - xmin) / xspan) as f32 * (w - 1.5 * m),
            (h - m) - ((y - ymin) / yspan) as f32 * (h - 1.5 * m),
        )
    };
    // horizontal gridlines at quartiles
    for q in 1..4 {
        let gy = (h - m) - (q as f32 / 4.0) * (h - 1.5 * m);
        draw_line(&mut img, m, gy, w - m / 2.0, gy, grid);
    }
    let mut prev: Option<(f32, f32)> = None;
    for (&x, &y) in xs.iter().zip(ys.iter()) {
        if !y.is_finite() {
            prev = None;
            continue;
        }
        let p = to_px(x, y);
        if let Some(q) = prev {
            draw_line(&mut img, q.0, q.1, p.0, p.1, series);
        }
        // point marker
        for dy in -1i32..=1 {
            for dx in -1i32..=1 {
                let (px, py) = ((p.0 as i32 + dx).max(0), (p.1 as i32 + dy).max(0));
                if (px as u32) < PLOT_W && (py as u32) < PLOT_H {
                    img.put_pixel(px as u32, py as u32, series);
                }
            }
        }
        prev = Some(p);
    }
    img.save(path)
        .map_err(|e| crate::error::Error::format(format!("plot save: {e}")))?;
    Ok(())
}
