//! PSNR and single-scale SSIM.

use alloc::format;
use alloc::vec::Vec;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageBuffer;

/// Which signal the metrics compare.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ChannelMode {
    /// Each RGB channel separately, averaged.
    #[default]
    RgbMean,
    /// Studio-range BT.601 luma, `Y = (16 + 65.481 R + 128.553 G + 24.966 B) / 255`.
    Luma,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr_db: f64,
    pub ssim: f64,
    pub channel_mode: ChannelMode,
}

/// SSIM constants. The default is an 11×11 Gaussian window with σ = 1.5,
/// K1 = 0.01, K2 = 0.03 and dynamic range 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams { window: 11, sigma: 1.5, k1: 0.01, k2: 0.03, range: 1.0 }
    }
}

fn planes(img: &ImageBuffer, mode: ChannelMode) -> Vec<Vec<f64>> {
    match mode {
        ChannelMode::RgbMean => (0..3).map(|c| img.plane(c).iter().map(|&v| v as f64).collect()).collect(),
        ChannelMode::Luma => {
            let (r, g, b) = (img.plane(0), img.plane(1), img.plane(2));
            let y = (0..r.len())
                .map(|i| (16.0 + 65.481 * r[i] as f64 + 128.553 * g[i] as f64 + 24.966 * b[i] as f64) / 255.0)
                .collect();
            alloc::vec![y]
        }
    }
}

fn check_pair(op: &'static str, a: &ImageBuffer, b: &ImageBuffer) -> Result<()> {
    if !a.same_extent(b) {
        return Err(Error::shape(op, format!("{}×{} vs {}×{}", a.width, a.height, b.width, b.height)));
    }
    Ok(())
}

/// `10·log10(peak² / MSE)`; identical images give `+∞`.
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer, peak: f64, mode: ChannelMode) -> Result<f64> {
    check_pair("psnr", a, b)?;
    if !(peak > 0.0) {
        return Err(Error::arg("psnr", "peak must be positive"));
    }
    let (pa, pb) = (planes(a, mode), planes(b, mode));
    let mut sum = 0.0;
    let mut n = 0usize;
    for (x, y) in pa.iter().zip(&pb) {
        for (u, v) in x.iter().zip(y) {
            sum += (u - v) * (u - v);
        }
        n += x.len();
    }
    if n == 0 {
        return Err(Error::arg("psnr", "empty image"));
    }
    let mse = sum / n as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * Float::log10(peak * peak / mse))
}

/// Normalized separable Gaussian taps.
fn gaussian(window: usize, sigma: f64) -> Vec<f64> {
    let c = (window as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..window).map(|i| Float::exp(-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma))).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Mean SSIM over valid window positions and compared planes.
pub fn ssim_with(a: &ImageBuffer, b: &ImageBuffer, mode: ChannelMode, params: &SsimParams) -> Result<f64> {
    check_pair("ssim", a, b)?;
    let win = params.window;
    if win == 0 || a.width < win || a.height < win {
        return Err(Error::shape(
            "ssim",
            format!("{}×{} image is smaller than the {win}×{win} window", a.width, a.height),
        ));
    }
    let g = gaussian(win, params.sigma);
    let c1 = (params.k1 * params.range).powi(2);
    let c2 = (params.k2 * params.range).powi(2);
    let (w, h) = (a.width, a.height);
    let (oh, ow) = (h - win + 1, w - win + 1);
    let (pa, pb) = (planes(a, mode), planes(b, mode));
    let mut total = 0.0;
    for (x, y) in pa.iter().zip(&pb) {
        let mut plane_sum = 0.0;
        for i in 0..oh {
            for j in 0..ow {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for (u, gu) in g.iter().enumerate() {
                    let row = (i + u) * w + j;
                    for (v, gv) in g.iter().enumerate() {
                        let wt = gu * gv;
                        let (p, q) = (x[row + v], y[row + v]);
                        mx += wt * p;
                        my += wt * q;
                        sxx += wt * (p * p);
                        syy += wt * (q * q);
                        sxy += wt * (p * q);
                    }
                }
                let vx = sxx - mx * mx;
                let vy = syy - my * my;
                let cov = sxy - mx * my;
                plane_sum += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            }
        }
        total += plane_sum / (oh * ow) as f64;
    }
    Ok(total / pa.len() as f64)
}

/// SSIM with the default constants.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer, mode: ChannelMode) -> Result<f64> {
    ssim_with(a, b, mode, &SsimParams::default())
}

/// PSNR (peak 1) and SSIM of `output` against `reference`.
pub fn evaluate(output: &ImageBuffer, reference: &ImageBuffer, mode: ChannelMode) -> Result<MetricReport> {
    Ok(MetricReport {
        psnr_db: psnr(output, reference, 1.0, mode)?,
        ssim: ssim(output, reference, mode)?,
        channel_mode: mode,
    })
}
