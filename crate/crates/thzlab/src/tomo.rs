//! Parallel-beam tomography: Radon transform, its exact adjoint,
//! filtered back-projection, SART, and per-row volume assembly.
//!
//! The forward projector is pixel-driven: each pixel's value (times the
//! grid pitch) is split linearly between the two detector bins nearest
//! its signed distance from the center line. The backprojector gathers
//! with the same weights, so the pair passes an adjoint dot-product test
//! at machine precision.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis, Zip};
use num_complex::Complex;
use rayon::prelude::*;

use crate::spectral::{irfft, rfft};
use crate::tensorio::{self, Image2D, Tensor, Volume3D};
use crate::{Error, Result};

/// Projection data for one horizontal slice: angles x detector bins.
#[derive(Debug, Clone)]
pub struct Sinogram {
    pub data: Array2<f32>,
    pub angles_deg: Vec<f64>,
    pub bin_pitch_mm: f64,
}

/// Apodization applied on top of the ramp filter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FbpFilter {
    RamLak,
    SheppLogan,
    Hann,
}

impl std::str::FromStr for FbpFilter {
    type Err = Error;

    fn from_str(s: &str) -> Result<FbpFilter> {
        match s {
            "ram-lak" | "ramlak" => Ok(FbpFilter::RamLak),
            "shepp-logan" | "shepp" => Ok(FbpFilter::SheppLogan),
            "hann" => Ok(FbpFilter::Hann),
            other => Err(Error::InvalidArgument(format!(
                "unknown filter {:?} (expected ram-lak, shepp-logan, or hann)",
                other
            ))),
        }
    }
}

impl Sinogram {
    pub fn new(data: Array2<f32>, angles_deg: Vec<f64>, bin_pitch_mm: f64) -> Result<Sinogram> {
        if data.nrows() != angles_deg.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} sinogram rows but {} angles",
                data.nrows(),
                angles_deg.len()
            )));
        }
        if bin_pitch_mm <= 0.0 {
            return Err(Error::InvalidArgument("bin pitch must be > 0".into()));
        }
        for w in angles_deg.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::InvalidArgument(
                    "angles must be strictly increasing".into(),
                ));
            }
        }
        if let (Some(&first), Some(&last)) = (angles_deg.first(), angles_deg.last()) {
            if first < 0.0 || last >= 180.0 {
                return Err(Error::InvalidArgument(format!(
                    "angles [{}, {}] outside [0, 180)",
                    first, last
                )));
            }
        }
        Ok(Sinogram {
            data,
            angles_deg,
            bin_pitch_mm,
        })
    }

    pub fn n_angles(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_bins(&self) -> usize {
        self.data.ncols()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        tensorio::write_thzt(&Tensor::from_array2(&self.data), path)?;
        let angles: Vec<String> = self.angles_deg.iter().map(|a| a.to_string()).collect();
        tensorio::write_sidecar(
            &[
                ("bin_pitch_mm".into(), self.bin_pitch_mm.to_string()),
                ("angles_deg".into(), angles.join(" ")),
            ],
            crate::phantom::sidecar_path(path),
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Sinogram> {
        let path = path.as_ref();
        let data = tensorio::read_thzt(path)?.to_array2()?;
        let mut pitch = 0.0;
        let mut angles = Vec::new();
        for (k, v) in tensorio::read_sidecar(crate::phantom::sidecar_path(path))? {
            match k.as_str() {
                "bin_pitch_mm" => {
                    pitch = v
                        .parse()
                        .map_err(|_| Error::InvalidArgument(format!("bad pitch {:?}", v)))?
                }
                "angles_deg" => {
                    angles = v
                        .split_whitespace()
                        .map(|s| s.parse::<f64>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|e| Error::InvalidArgument(format!("bad angles: {}", e)))?;
                }
                _ => {}
            }
        }
        Sinogram::new(data, angles, pitch)
    }
}

/// Map a view angle into [0, 180) together with a flag telling whether
/// the detector axis must be reversed to keep the same signed offset.
pub fn canonicalize_angle(angle_deg: f64) -> (f64, bool) {
    let mut a = angle_deg.rem_euclid(360.0);
    if a >= 180.0 {
        (a - 180.0, true)
    } else {
        // guard the half-open upper bound against rounding
        if a < 0.0 {
            a = 0.0;
        }
        (a, false)
    }
}

/// Signed distance (in bin units, relative to the center bin) of pixel
/// (row, col) from the projection line at `theta`.
#[inline]
fn pixel_offset(row: usize, col: usize, n: usize, sin_t: f64, cos_t: f64) -> f64 {
    let c = (n - 1) as f64 / 2.0;
    let x = col as f64 - c;
    let y = row as f64 - c;
    x * cos_t + y * sin_t + c
}

fn project_one_angle(img: &Array2<f32>, angle_deg: f64, pitch_mm: f64) -> Array1<f32> {
    let n = img.nrows();
    let theta = angle_deg.to_radians();
    let (sin_t, cos_t) = (theta.sin(), theta.cos());
    let mut out = Array1::<f32>::zeros(n);
    for row in 0..n {
        for col in 0..n {
            let v = img[(row, col)] as f64 * pitch_mm;
            let u = pixel_offset(row, col, n, sin_t, cos_t);
            let k = u.floor();
            let frac = u - k;
            let k = k as isize;
            if (0..n as isize).contains(&k) {
                out[k as usize] += (v * (1.0 - frac)) as f32;
            }
            if (0..n as isize).contains(&(k + 1)) {
                out[(k + 1) as usize] += (v * frac) as f32;
            }
        }
    }
    out
}

fn backproject_one_angle(
    acc: &mut Array2<f64>,
    proj: ArrayView1<f32>,
    angle_deg: f64,
    pitch_mm: f64,
) {
    let n = acc.nrows();
    let theta = angle_deg.to_radians();
    let (sin_t, cos_t) = (theta.sin(), theta.cos());
    let nb = proj.len() as isize;
    for row in 0..n {
        for col in 0..n {
            let u = pixel_offset(row, col, n, sin_t, cos_t);
            let k = u.floor();
            let frac = u - k;
            let k = k as isize;
            let mut v = 0.0;
            if (0..nb).contains(&k) {
                v += proj[k as usize] as f64 * (1.0 - frac);
            }
            if (0..nb).contains(&(k + 1)) {
                v += proj[(k + 1) as usize] as f64 * frac;
            }
            acc[(row, col)] += v * pitch_mm;
        }
    }
}

/// Discrete Radon transform of a square image.
pub fn radon(img: &Image2D, angles_deg: &[f64]) -> Result<Sinogram> {
    if img.height() != img.width() {
        return Err(Error::ShapeMismatch(format!(
            "radon needs a square image, got {}x{}",
            img.height(),
            img.width()
        )));
    }
    let rows: Vec<Array1<f32>> = angles_deg
        .par_iter()
        .map(|&a| project_one_angle(&img.data, a, img.pitch_mm))
        .collect();
    let mut data = Array2::<f32>::zeros((angles_deg.len(), img.width()));
    for (mut out, row) in data.axis_iter_mut(Axis(0)).zip(rows) {
        out.assign(&row);
    }
    Sinogram::new(data, angles_deg.to_vec(), img.pitch_mm)
}

/// Unfiltered backprojection: the exact adjoint of [`radon`].
pub fn radon_adjoint(s: &Sinogram, out_size: usize) -> Result<Image2D> {
    let partials: Vec<Array2<f64>> = (0..s.n_angles())
        .into_par_iter()
        .map(|v| {
            let mut acc = Array2::<f64>::zeros((out_size, out_size));
            backproject_one_angle(&mut acc, s.data.row(v), s.angles_deg[v], s.bin_pitch_mm);
            acc
        })
        .collect();
    let mut acc = Array2::<f64>::zeros((out_size, out_size));
    for p in partials {
        acc += &p;
    }
    Image2D::new(acc.mapv(|v| v as f32), s.bin_pitch_mm)
}

/// Frequency response of the band-limited ramp on a padded grid of
/// `len` samples with bin pitch `tau`.
fn ramp_response(len: usize, tau: f64, filter: FbpFilter) -> Vec<f64> {
    // spatial-domain kernel of the band-limited ramp, wrapped periodically
    let mut h = vec![0.0f64; len];
    h[0] = 1.0 / (4.0 * tau * tau);
    let mut k = 1usize;
    while k <= len / 2 {
        if k % 2 == 1 {
            let v = -1.0 / (std::f64::consts::PI.powi(2) * (k * k) as f64 * tau * tau);
            h[k] = v;
            h[len - k] = v;
        }
        k += 1;
    }
    let bins = rfft(&h);
    let nyquist = 1.0 / (2.0 * tau);
    bins.iter()
        .enumerate()
        .map(|(i, b)| {
            let f = i as f64 / (len as f64 * tau);
            let window = match filter {
                FbpFilter::RamLak => 1.0,
                FbpFilter::SheppLogan => {
                    let x = std::f64::consts::PI * f / (2.0 * nyquist);
                    if x.abs() < 1e-12 {
                        1.0
                    } else {
                        x.sin() / x
                    }
                }
                FbpFilter::Hann => 0.5 * (1.0 + (std::f64::consts::PI * f / nyquist).cos()),
            };
            // the wrapped kernel is even, so the response is real
            b.re * window
        })
        .collect()
}

fn filter_projection(proj: ArrayView1<f32>, tau: f64, filter: FbpFilter) -> Vec<f64> {
    let n = proj.len();
    let padded_len = (2 * n).next_power_of_two();
    let mut padded = vec![0.0f64; padded_len];
    for (i, &v) in proj.iter().enumerate() {
        padded[i] = v as f64;
    }
    let response = ramp_response(padded_len, tau, filter);
    let mut bins = rfft(&padded);
    for (b, &r) in bins.iter_mut().zip(&response) {
        *b *= Complex::new(r, 0.0);
    }
    let filtered = irfft(&bins, padded_len);
    // convolution quadrature step
    filtered.iter().take(n).map(|&v| v * tau).collect()
}

/// Filtered back-projection reconstruction onto an n_bins x n_bins grid.
pub fn fbp(s: &Sinogram, filter: FbpFilter) -> Result<Image2D> {
    if s.n_angles() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 angles, got {}",
            s.n_angles()
        )));
    }
    let n = s.n_bins();
    let tau = s.bin_pitch_mm;
    let partials: Vec<Array2<f64>> = (0..s.n_angles())
        .into_par_iter()
        .map(|v| {
            let (proj, a) = (s.data.row(v), s.angles_deg[v]);
            let q: Vec<f32> = filter_projection(proj, tau, filter)
                .iter()
                .map(|&v| v as f32)
                .collect();
            let q = Array1::from(q);
            let mut acc = Array2::<f64>::zeros((n, n));
            // unit backprojection weight; the angular quadrature below
            // carries the π/n_angles factor
            backproject_one_angle(&mut acc, q.view(), a, 1.0);
            acc
        })
        .collect();
    let mut acc = Array2::<f64>::zeros((n, n));
    for p in partials {
        acc += &p;
    }
    let scale = std::f64::consts::PI / s.n_angles() as f64;
    Image2D::new(acc.mapv(|v| (v * scale) as f32), tau)
}

/// SART reconstruction with per-angle sweeps and a nonnegativity clamp.
/// `init` of `None` starts from zeros. Returns the image and the data
/// residual norm after each full iteration.
pub fn sart_with_history(
    s: &Sinogram,
    iters: usize,
    relax: f64,
    init: Option<&Image2D>,
) -> Result<(Image2D, Vec<f64>)> {
    if iters < 1 {
        return Err(Error::InvalidArgument("iters must be >= 1".into()));
    }
    if !(0.0..=1.0).contains(&relax) {
        return Err(Error::InvalidArgument(format!(
            "relaxation {} outside [0, 1]",
            relax
        )));
    }
    let n = s.n_bins();
    let tau = s.bin_pitch_mm;
    let mut x = match init {
        Some(img) => {
            if img.height() != n || img.width() != n {
                return Err(Error::ShapeMismatch(format!(
                    "init {}x{} does not match {} detector bins",
                    img.height(),
                    img.width(),
                    n
                )));
            }
            img.data.clone()
        }
        None => Array2::<f32>::zeros((n, n)),
    };
    let ones_img = Image2D::new(Array2::<f32>::ones((n, n)), tau)?;
    let eps = 1e-8;
    // per-angle normalizers: row sums A_θ·1 and column sums A_θᵀ·1
    let per_angle: Vec<(Array1<f32>, Array2<f64>)> = s
        .angles_deg
        .iter()
        .map(|&a| {
            let row_sums = project_one_angle(&ones_img.data, a, tau);
            let ones_proj = Array1::<f32>::ones(n);
            let mut col = Array2::<f64>::zeros((n, n));
            backproject_one_angle(&mut col, ones_proj.view(), a, tau);
            (row_sums, col)
        })
        .collect();
    let mut history = Vec::with_capacity(iters);
    for _ in 0..iters {
        for (v, &a) in s.angles_deg.iter().enumerate() {
            let (row_sums, col_sums) = &per_angle[v];
            let fwd = project_one_angle(&x, a, tau);
            let mut ratio = Array1::<f32>::zeros(n);
            for k in 0..n {
                let rs = row_sums[k] as f64;
                if rs > eps {
                    ratio[k] = ((s.data[(v, k)] - fwd[k]) as f64 / rs) as f32;
                }
            }
            let mut update = Array2::<f64>::zeros((n, n));
            backproject_one_angle(&mut update, ratio.view(), a, tau);
            Zip::from(&mut x).and(&update).and(col_sums).for_each(|xv, &u, &cs| {
                if cs > eps {
                    *xv = (*xv as f64 + relax * u / cs).max(0.0) as f32;
                }
            });
        }
        let img = Image2D::new(x.clone(), tau)?;
        let resid = radon(&img, &s.angles_deg)?;
        let r: f64 = resid
            .data
            .iter()
            .zip(s.data.iter())
            .map(|(&a, &b)| ((a - b) as f64).powi(2))
            .sum::<f64>()
            .sqrt();
        history.push(r);
    }
    Ok((Image2D::new(x, tau)?, history))
}

pub fn sart(s: &Sinogram, iters: usize, relax: f64) -> Result<Image2D> {
    sart_with_history(s, iters, relax, None).map(|(img, _)| img)
}

/// Assemble a volume from per-view projection images: each image row z
/// forms one sinogram, reconstructed with FBP and stacked into slices.
/// With `binarize`, the volume is min-max normalized and thresholded at
/// 0.5 into {0, 1} occupancy.
pub fn reconstruct_volume(
    projections: &[Image2D],
    angles_deg: &[f64],
    filter: FbpFilter,
    binarize: bool,
) -> Result<Volume3D> {
    if projections.is_empty() {
        return Err(Error::InvalidArgument("no projections".into()));
    }
    if projections.len() != angles_deg.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} projections but {} angles",
            projections.len(),
            angles_deg.len()
        )));
    }
    let (h, w) = (projections[0].height(), projections[0].width());
    let pitch = projections[0].pitch_mm;
    for p in projections {
        if p.height() != h || p.width() != w {
            return Err(Error::ShapeMismatch(
                "projections must all share one shape".into(),
            ));
        }
    }
    // fold view angles into [0, 180), reversing the detector axis for
    // views past the half turn, then sort so the sinogram is well formed
    let mut order: Vec<usize> = (0..angles_deg.len()).collect();
    let canon: Vec<(f64, bool)> = angles_deg.iter().map(|&a| canonicalize_angle(a)).collect();
    order.sort_by(|&a, &b| canon[a].0.partial_cmp(&canon[b].0).unwrap());
    let sorted_angles: Vec<f64> = order.iter().map(|&i| canon[i].0).collect();
    for pair in sorted_angles.windows(2) {
        if pair[1] <= pair[0] {
            return Err(Error::InvalidArgument(format!(
                "duplicate view angle {} after folding into [0, 180)",
                pair[1]
            )));
        }
    }
    let slices: Vec<Array2<f32>> = (0..h)
        .into_par_iter()
        .map(|z| {
            let mut sino = Array2::<f32>::zeros((angles_deg.len(), w));
            for (si, &vi) in order.iter().enumerate() {
                let row = projections[vi].data.row(z);
                if canon[vi].1 {
                    for (k, &v) in row.iter().enumerate() {
                        sino[(si, w - 1 - k)] = v;
                    }
                } else {
                    for (k, &v) in row.iter().enumerate() {
                        sino[(si, k)] = v;
                    }
                }
            }
            let s = Sinogram::new(sino, sorted_angles.clone(), pitch)?;
            Ok(fbp(&s, filter)?.data)
        })
        .collect::<Result<_>>()?;
    let mut vol = ndarray::Array3::<f32>::zeros((h, w, w));
    for (z, slice) in slices.into_iter().enumerate() {
        vol.index_axis_mut(Axis(0), z).assign(&slice);
    }
    if binarize {
        let min = vol.iter().copied().fold(f32::INFINITY, f32::min);
        let max = vol.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let range = max - min;
        if range > 0.0 {
            vol.mapv_inplace(|v| if (v - min) / range >= 0.5 { 1.0 } else { 0.0 });
        } else {
            vol.fill(0.0);
        }
    }
    Volume3D::new(vol, pitch)
}
