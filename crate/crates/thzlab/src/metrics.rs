//! Image and volume quality metrics: PSNR, SSIM, and per-slice MSE.

use ndarray::{Array2, Array3};

use crate::tensorio::{Image2D, Volume3D};
use crate::{Error, Result};

/// Sentinel reported instead of +inf when the images are identical.
pub const PSNR_CAP_DB: f64 = 99.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check_same_shape(a: &Array2<f32>, b: &Array2<f32>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "image shapes {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB, capped at [`PSNR_CAP_DB`] for a
/// zero mean-squared error.
pub fn psnr(a: &Image2D, b: &Image2D, data_range: f64) -> Result<f64> {
    check_same_shape(&a.data, &b.data)?;
    if data_range <= 0.0 {
        return Err(Error::InvalidArgument("data_range must be > 0".into()));
    }
    let n = a.data.len() as f64;
    let mse: f64 = a
        .data
        .iter()
        .zip(b.data.iter())
        .map(|(&x, &y)| ((x - y) as f64).powi(2))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (data_range * data_range / mse).log10()).min(PSNR_CAP_DB))
}

fn gaussian_window() -> Vec<f64> {
    let c = (SSIM_WINDOW - 1) as f64 / 2.0;
    let mut w: Vec<f64> = (0..SSIM_WINDOW * SSIM_WINDOW)
        .map(|i| {
            let (r, col) = (i / SSIM_WINDOW, i % SSIM_WINDOW);
            let d2 = (r as f64 - c).powi(2) + (col as f64 - c).powi(2);
            (-d2 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let sum: f64 = w.iter().sum();
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Mean structural similarity over all fully-contained 11x11 windows,
/// Gaussian-weighted with sigma 1.5, on data of the given dynamic range.
pub fn ssim(a: &Image2D, b: &Image2D, data_range: f64) -> Result<f64> {
    check_same_shape(&a.data, &b.data)?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "image {}x{} smaller than the {}x{} SSIM window",
            h, w, SSIM_WINDOW, SSIM_WINDOW
        )));
    }
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let win = gaussian_window();
    let mut total = 0.0;
    let mut count = 0usize;
    for r0 in 0..=(h - SSIM_WINDOW) {
        for c0 in 0..=(w - SSIM_WINDOW) {
            let (mut mu_a, mut mu_b) = (0.0f64, 0.0f64);
            for (i, &wt) in win.iter().enumerate() {
                let (dr, dc) = (i / SSIM_WINDOW, i % SSIM_WINDOW);
                mu_a += wt * a.data[(r0 + dr, c0 + dc)] as f64;
                mu_b += wt * b.data[(r0 + dr, c0 + dc)] as f64;
            }
            let (mut va, mut vb, mut cov) = (0.0f64, 0.0f64, 0.0f64);
            for (i, &wt) in win.iter().enumerate() {
                let (dr, dc) = (i / SSIM_WINDOW, i % SSIM_WINDOW);
                let da = a.data[(r0 + dr, c0 + dc)] as f64 - mu_a;
                let db = b.data[(r0 + dr, c0 + dc)] as f64 - mu_b;
                va += wt * da * da;
                vb += wt * db * db;
                cov += wt * da * db;
            }
            let s = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                / ((mu_a * mu_a + mu_b * mu_b + c1) * (va + vb + c2));
            total += s;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

fn minmax_normalize(v: &Array3<f32>) -> Array3<f32> {
    let min = v.iter().copied().fold(f32::INFINITY, f32::min);
    let max = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let range = max - min;
    if range > 0.0 {
        v.mapv(|x| (x - min) / range)
    } else {
        v.mapv(|_| 0.0)
    }
}

/// Mean over z-slices of the per-slice pixel MSE between the two
/// volumes, each min-max normalized first. Equal to the flat voxel MSE.
pub fn mse_cross_sections(v1: &Volume3D, v2: &Volume3D) -> Result<f64> {
    if v1.data.shape() != v2.data.shape() {
        return Err(Error::ShapeMismatch(format!(
            "volume shapes {:?} vs {:?}",
            v1.data.shape(),
            v2.data.shape()
        )));
    }
    let a = minmax_normalize(&v1.data);
    let b = minmax_normalize(&v2.data);
    let n = a.len() as f64;
    Ok(a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| ((x - y) as f64).powi(2))
        .sum::<f64>()
        / n)
}
