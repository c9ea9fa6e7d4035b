//! PSNR and single-scale SSIM over `[0, 1]` images, computed in f64.

use ndarray::Array3;

use crate::error::{Error, Result};

fn check_pair(a: &Array3<f32>, b: &Array3<f32>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::domain(format!(
            "image shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `10 * log10(1 / MSE)`; identical images return `f64::INFINITY`.
pub fn psnr(a: &Array3<f32>, b: &Array3<f32>) -> Result<f64> {
    check_pair(a, b)?;
    let mut acc = 0.0f64;
    for (&x, &y) in a.iter().zip(b.iter()) {
        let d = x as f64 - y as f64;
        acc += d * d;
    }
    let mse = acc / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Normalized 1-D Gaussian window used by SSIM.
pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

/// Valid-mode separable Gaussian filtering of one channel plane.
fn filter_valid(plane: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let win = gaussian_window();
    let k = SSIM_WINDOW;
    let ow = w - k + 1;
    let oh = h - k + 1;
    // horizontal pass
    let mut tmp = vec![0.0f64; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for i in 0..k {
                acc += plane[y * w + x + i] * win[i];
            }
            tmp[y * ow + x] = acc;
        }
    }
    // vertical pass
    let mut out = vec![0.0f64; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for i in 0..k {
                acc += tmp[(y + i) * ow + x] * win[i];
            }
            out[y * ow + x] = acc;
        }
    }
    (out, oh, ow)
}

/// Standard single-scale SSIM: 11x11 Gaussian window (sigma 1.5), constants
/// `C1 = 0.01^2`, `C2 = 0.03^2`, mean over valid positions and channels.
pub fn ssim(a: &Array3<f32>, b: &Array3<f32>) -> Result<f64> {
    check_pair(a, b)?;
    let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::domain(format!(
            "image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let mut total = 0.0f64;
    for ch in 0..c {
        let pa: Vec<f64> = a
            .index_axis(ndarray::Axis(0), ch)
            .iter()
            .map(|&v| v as f64)
            .collect();
        let pb: Vec<f64> = b
            .index_axis(ndarray::Axis(0), ch)
            .iter()
            .map(|&v| v as f64)
            .collect();
        let sq = |v: &[f64]| -> Vec<f64> { v.iter().map(|x| x * x).collect() };
        let prod: Vec<f64> = pa.iter().zip(pb.iter()).map(|(x, y)| x * y).collect();

        let (mu_a, oh, ow) = filter_valid(&pa, h, w);
        let (mu_b, _, _) = filter_valid(&pb, h, w);
        let (m_aa, _, _) = filter_valid(&sq(&pa), h, w);
        let (m_bb, _, _) = filter_valid(&sq(&pb), h, w);
        let (m_ab, _, _) = filter_valid(&prod, h, w);

        let mut acc = 0.0f64;
        for i in 0..oh * ow {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = m_aa[i] - ma * ma;
            let vb = m_bb[i] - mb * mb;
            let cov = m_ab[i] - ma * mb;
            let num = (2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2);
            let den = (ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2);
            acc += num / den;
        }
        total += acc / (oh * ow) as f64;
    }
    Ok(total / c as f64)
}
