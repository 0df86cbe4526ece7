//! Image quality metrics.
//!
//! SSIM uses an 11-tap Gaussian window (σ = 1.5), K1 = 0.01, K2 = 0.03 and is
//! averaged over the positions where the window fits entirely inside the
//! image.

use serde::Serialize;

use crate::error::{invalid, shape_err, Result};
use crate::Volume;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    /// Decibels; `f64::INFINITY` for identical inputs.
    pub psnr: f64,
    pub ssim: f64,
    pub data_range: f64,
}

fn check_pair(op: &'static str, x: &Volume, reference: &Volume, range: f64) -> Result<()> {
    if x.shape() != reference.shape() {
        return Err(shape_err(
            op,
            format!("{:?} vs {:?}", x.shape(), reference.shape()),
        ));
    }
    if range.is_nan() || range <= 0.0 {
        return Err(invalid(
            "range",
            format!("data range must be positive, got {range}"),
        ));
    }
    Ok(())
}

pub fn mse(x: &[f32], reference: &[f32]) -> f64 {
    let sum: f64 = x
        .iter()
        .zip(reference)
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    sum / x.len().max(1) as f64
}

fn psnr_from_mse(mse: f64, range: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (range * range / mse).log10()
    }
}

/// Volume-global PSNR in dB.
pub fn psnr(x: &Volume, reference: &Volume, range: f64) -> Result<f64> {
    check_pair("psnr", x, reference, range)?;
    Ok(psnr_from_mse(mse(x.data(), reference.data()), range))
}

/// Mean of per-axial-slice PSNR values (infinite if any slice matches exactly).
pub fn psnr_slice_mean(x: &Volume, reference: &Volume, range: f64) -> Result<f64> {
    check_pair("psnr", x, reference, range)?;
    let slices = x.shape()[0];
    let total: f64 = (0..slices)
        .map(|z| psnr_from_mse(mse(x.slice(z), reference.slice(z)), range))
        .sum();
    Ok(total / slices as f64)
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut w: [f64; SSIM_WINDOW] = std::array::from_fn(|i| {
        let d = i as f64 - half;
        (-(d * d) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
    });
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Valid-mode separable filtering of a row-major block along one axis.
fn filter_axis(src: &[f64], dims: &[usize], axis: usize, w: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let k = w.len();
    let mut out_dims = dims.to_vec();
    out_dims[axis] = dims[axis] + 1 - k;
    let inner: usize = dims[axis + 1..].iter().product();
    let outer: usize = dims[..axis].iter().product();
    let (n, m) = (dims[axis], out_dims[axis]);
    let mut out = vec![0.0; outer * m * inner];
    for o in 0..outer {
        for j in 0..m {
            let dst = &mut out[(o * m + j) * inner..(o * m + j + 1) * inner];
            for (t, &wt) in w.iter().enumerate() {
                let s = &src[(o * n + j + t) * inner..(o * n + j + t + 1) * inner];
                for (d, &v) in dst.iter_mut().zip(s) {
                    *d += wt * v;
                }
            }
        }
    }
    (out, out_dims)
}

fn blur(src: &[f64], dims: &[usize], w: &[f64]) -> Vec<f64> {
    let mut cur = src.to_vec();
    let mut cur_dims = dims.to_vec();
    for axis in 0..dims.len() {
        let (next, nd) = filter_axis(&cur, &cur_dims, axis, w);
        cur = next;
        cur_dims = nd;
    }
    cur
}

/// Mean SSIM of two equally shaped blocks (2-D or 3-D) with valid windows.
fn ssim_block(a: &[f32], b: &[f32], dims: &[usize], range: f64) -> f64 {
    let w = gaussian_window();
    let x: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
    let (mx, my) = (blur(&x, dims, &w), blur(&y, dims, &w));
    let (sxx, syy, sxy) = (
        blur(&xx, dims, &w),
        blur(&yy, dims, &w),
        blur(&xy, dims, &w),
    );
    let c1 = (K1 * range).powi(2);
    let c2 = (K2 * range).powi(2);
    let mut total = 0.0;
    for i in 0..mx.len() {
        let (ux, uy) = (mx[i], my[i]);
        let vx = sxx[i] - ux * ux;
        let vy = syy[i] - uy * uy;
        let cov = sxy[i] - ux * uy;
        let num = (2.0 * ux * uy + c1) * (2.0 * cov + c2);
        let den = (ux * ux + uy * uy + c1) * (vx + vy + c2);
        total += num / den;
    }
    total / mx.len() as f64
}

/// Slice-wise 2-D SSIM averaged over axial slices.
pub fn ssim(x: &Volume, reference: &Volume, range: f64) -> Result<f64> {
    check_pair("ssim", x, reference, range)?;
    let [slices, rows, cols] = x.shape();
    if rows < SSIM_WINDOW || cols < SSIM_WINDOW {
        return Err(shape_err(
            "ssim",
            format!(
                "slices of {rows}x{cols} are smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
            ),
        ));
    }
    let total: f64 = (0..slices)
        .map(|z| ssim_block(x.slice(z), reference.slice(z), &[rows, cols], range))
        .sum();
    Ok(total / slices as f64)
}

/// SSIM with a 3-D Gaussian window over the whole volume.
pub fn ssim_3d(x: &Volume, reference: &Volume, range: f64) -> Result<f64> {
    check_pair("ssim", x, reference, range)?;
    let dims = x.shape();
    if dims.iter().any(|&d| d < SSIM_WINDOW) {
        return Err(shape_err(
            "ssim",
            format!("volume {dims:?} is smaller than the {SSIM_WINDOW}-voxel window"),
        ));
    }
    Ok(ssim_block(x.data(), reference.data(), &dims, range))
}

pub fn evaluate(x: &Volume, reference: &Volume, range: f64) -> Result<MetricReport> {
    Ok(MetricReport {
        psnr: psnr(x, reference, range)?,
        ssim: ssim(x, reference, range)?,
        data_range: range,
    })
}
