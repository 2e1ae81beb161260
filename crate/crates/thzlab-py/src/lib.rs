//! Python bindings for the thzlab terahertz imaging toolkit.
//!
//! Arrays cross the boundary as flat `list[float]` plus a shape tuple
//! (row-major), so the module has no hard dependency on a specific
//! Python array library; `numpy.asarray(...).reshape(shape)` on the
//! Python side is all that is needed.

use ndarray::{Array1, Array2};
use num_complex::Complex;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use thzlab::cs::{self, LinearOperator, MatrixKind};
use thzlab::holo;
use thzlab::metrics;
use thzlab::physics::{self, PulseModel, TimeTrace, WaterVaporModel};
use thzlab::spectral;
use thzlab::tensorio::Image2D;
use thzlab::tomo::{self, FbpFilter, Sinogram};

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_image(data: Vec<f32>, shape: (usize, usize), pitch_mm: f64) -> PyResult<Image2D> {
    let arr = Array2::from_shape_vec(shape, data)
        .map_err(|_| PyValueError::new_err("data length does not match shape"))?;
    Image2D::new(arr, pitch_mm).map_err(err)
}

fn from_image(img: &Image2D) -> (Vec<f32>, (usize, usize)) {
    (img.data.iter().copied().collect(), img.data.dim())
}

fn to_field(
    re: Vec<f64>,
    im: Vec<f64>,
    shape: (usize, usize),
    pitch_mm: f64,
    freq_thz: f64,
) -> PyResult<holo::ComplexField2D> {
    if re.len() != im.len() {
        return Err(PyValueError::new_err("re and im must have equal length"));
    }
    let data = Array2::from_shape_vec(
        shape,
        re.into_iter()
            .zip(im)
            .map(|(r, i)| Complex::new(r, i))
            .collect(),
    )
    .map_err(|_| PyValueError::new_err("data length does not match shape"))?;
    holo::ComplexField2D::new(data, pitch_mm, freq_thz).map_err(err)
}

fn from_field(f: &holo::ComplexField2D) -> (Vec<f64>, Vec<f64>, (usize, usize)) {
    (
        f.data.iter().map(|c| c.re).collect(),
        f.data.iter().map(|c| c.im).collect(),
        f.data.dim(),
    )
}

/// Antisymmetric single-cycle reference pulse (Gaussian first
/// derivative), peak-normalized. Returns the time samples.
#[pyfunction]
#[pyo3(signature = (dt_ps=0.1, n_samples=1024, fwhm_fs=516.0))]
fn reference_pulse(dt_ps: f64, n_samples: usize, fwhm_fs: f64) -> PyResult<Vec<f32>> {
    let model = PulseModel {
        dt_ps,
        n_samples,
        fwhm_fs,
        ..PulseModel::default()
    };
    Ok(physics::reference_pulse(&model).map_err(err)?.samples)
}

/// One-sided amplitude spectrum of a time trace; returns
/// `(amplitudes, df_thz)`.
#[pyfunction]
fn fft_amplitude(samples: Vec<f32>, dt_ps: f64) -> PyResult<(Vec<f64>, f64)> {
    let trace = TimeTrace { samples, dt_ps };
    let spec = spectral::fft_trace(&trace).map_err(err)?;
    Ok((spec.amplitude(), spec.df_thz))
}

/// The 12 water-vapor absorption line frequencies (THz) inside
/// `(f_lo, f_hi)` used as feature bands, ascending.
#[pyfunction]
#[pyo3(signature = (f_lo=0.3, f_hi=1.3, count=12))]
fn water_bands(f_lo: f64, f_hi: f64, count: usize) -> PyResult<Vec<f64>> {
    spectral::select_water_bands(&WaterVaporModel::lab_air(), f_lo, f_hi, count).map_err(err)
}

/// Parallel-beam forward projection. `image` is a flat row-major array
/// with `shape` (h, w); returns `(sinogram, (n_angles, n_bins))`.
#[pyfunction]
#[pyo3(signature = (image, shape, angles_deg, pitch_mm=1.0))]
fn radon(
    image: Vec<f32>,
    shape: (usize, usize),
    angles_deg: Vec<f64>,
    pitch_mm: f64,
) -> PyResult<(Vec<f32>, (usize, usize))> {
    let img = to_image(image, shape, pitch_mm)?;
    let sino = tomo::radon(&img, &angles_deg).map_err(err)?;
    Ok((sino.data.iter().copied().collect(), sino.data.dim()))
}

fn to_sinogram(
    sinogram: Vec<f32>,
    angles_deg: Vec<f64>,
    pitch_mm: f64,
) -> PyResult<Sinogram> {
    let n_angles = angles_deg.len();
    if n_angles == 0 || sinogram.len() % n_angles != 0 {
        return Err(PyValueError::new_err(
            "sinogram length must be a multiple of len(angles_deg)",
        ));
    }
    let bins = sinogram.len() / n_angles;
    let data = Array2::from_shape_vec((n_angles, bins), sinogram).unwrap();
    Sinogram::new(data, angles_deg, pitch_mm).map_err(err)
}

/// Filtered back-projection; `filter` is "ramlak", "shepplogan" or
/// "hann". Returns `(image, (n, n))`.
#[pyfunction]
#[pyo3(signature = (sinogram, angles_deg, pitch_mm=1.0, filter="ramlak"))]
fn fbp(
    sinogram: Vec<f32>,
    angles_deg: Vec<f64>,
    pitch_mm: f64,
    filter: &str,
) -> PyResult<(Vec<f32>, (usize, usize))> {
    let s = to_sinogram(sinogram, angles_deg, pitch_mm)?;
    let f: FbpFilter = filter.parse().map_err(err)?;
    Ok(from_image(&tomo::fbp(&s, f).map_err(err)?))
}

/// Simultaneous algebraic reconstruction; returns `(image, (n, n))`.
#[pyfunction]
#[pyo3(signature = (sinogram, angles_deg, pitch_mm=1.0, iters=10, relax=0.25))]
fn sart(
    sinogram: Vec<f32>,
    angles_deg: Vec<f64>,
    pitch_mm: f64,
    iters: usize,
    relax: f64,
) -> PyResult<(Vec<f32>, (usize, usize))> {
    let s = to_sinogram(sinogram, angles_deg, pitch_mm)?;
    let (img, _) = tomo::sart_with_history(&s, iters, relax, None).map_err(err)?;
    Ok(from_image(&img))
}

/// Apply the seeded m x n Bernoulli +-1/sqrt(m) sensing matrix to `x`.
#[pyfunction]
fn bernoulli_measure(m: usize, n: usize, seed: u64, x: Vec<f64>) -> PyResult<Vec<f64>> {
    let a = cs::make_sensing_matrix(MatrixKind::BernoulliPm1, m, n, seed).map_err(err)?;
    if x.len() != n {
        return Err(PyValueError::new_err("len(x) must equal n"));
    }
    Ok(a.apply(&Array1::from_vec(x)).to_vec())
}

/// Sparse recovery of an n-vector from measurements `s` of the seeded
/// Bernoulli matrix, via FISTA on the lasso objective. Returns
/// `(x, objective_history)`.
#[pyfunction]
#[pyo3(signature = (s, n, seed, lam=1e-4, iters=500, tol=1e-12))]
fn fista(
    s: Vec<f64>,
    n: usize,
    seed: u64,
    lam: f64,
    iters: usize,
    tol: f64,
) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let a = cs::make_sensing_matrix(MatrixKind::BernoulliPm1, s.len(), n, seed).map_err(err)?;
    let r = cs::fista(&a, &Array1::from_vec(s), lam, iters, tol).map_err(err)?;
    Ok((r.x.to_vec(), r.history))
}

/// Angular-spectrum propagation of a complex field over `z_mm`.
/// Returns `(re, im, shape)`.
#[pyfunction]
fn propagate(
    re: Vec<f64>,
    im: Vec<f64>,
    shape: (usize, usize),
    pitch_mm: f64,
    freq_thz: f64,
    z_mm: f64,
) -> PyResult<(Vec<f64>, Vec<f64>, (usize, usize))> {
    let u = to_field(re, im, shape, pitch_mm, freq_thz)?;
    Ok(from_field(&holo::angular_spectrum_propagate(&u, z_mm)))
}

/// Off-axis interferogram of a complex object field with a tilted
/// plane-wave reference. Returns the real hologram image.
#[pyfunction]
#[pyo3(signature = (re, im, shape, pitch_mm, freq_thz, tilt_deg, ref_amp=1.0))]
fn synthesize_hologram(
    re: Vec<f64>,
    im: Vec<f64>,
    shape: (usize, usize),
    pitch_mm: f64,
    freq_thz: f64,
    tilt_deg: f64,
    ref_amp: f64,
) -> PyResult<(Vec<f32>, (usize, usize))> {
    let u = to_field(re, im, shape, pitch_mm, freq_thz)?;
    Ok(from_image(
        &holo::synthesize_hologram(&u, tilt_deg, ref_amp).map_err(err)?,
    ))
}

/// Recover the object field from an off-axis hologram (carrier
/// demodulation plus back-propagation by `z_mm`). Returns
/// `(re, im, shape)`.
#[pyfunction]
#[pyo3(signature = (hologram, shape, pitch_mm, tilt_deg, z_mm, freq_thz, ref_amp=1.0))]
fn reconstruct_offaxis(
    hologram: Vec<f32>,
    shape: (usize, usize),
    pitch_mm: f64,
    tilt_deg: f64,
    z_mm: f64,
    freq_thz: f64,
    ref_amp: f64,
) -> PyResult<(Vec<f64>, Vec<f64>, (usize, usize))> {
    let h = to_image(hologram, shape, pitch_mm)?;
    let rec = holo::reconstruct_offaxis(&h, tilt_deg, ref_amp, z_mm, freq_thz).map_err(err)?;
    Ok(from_field(&rec))
}

/// Peak signal-to-noise ratio in dB between two images of equal shape.
#[pyfunction]
#[pyo3(signature = (a, b, shape, data_range=1.0))]
fn psnr(a: Vec<f32>, b: Vec<f32>, shape: (usize, usize), data_range: f64) -> PyResult<f64> {
    metrics::psnr(&to_image(a, shape, 1.0)?, &to_image(b, shape, 1.0)?, data_range).map_err(err)
}

/// Mean structural similarity between two images of equal shape.
#[pyfunction]
#[pyo3(signature = (a, b, shape, data_range=1.0))]
fn ssim(a: Vec<f32>, b: Vec<f32>, shape: (usize, usize), data_range: f64) -> PyResult<f64> {
    metrics::ssim(&to_image(a, shape, 1.0)?, &to_image(b, shape, 1.0)?, data_range).map_err(err)
}

#[pymodule]
fn thzlab_py(m: &Bound<PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(reference_pulse, m)?)?;
    m.add_function(wrap_pyfunction!(fft_amplitude, m)?)?;
    m.add_function(wrap_pyfunction!(water_bands, m)?)?;
    m.add_function(wrap_pyfunction!(radon, m)?)?;
    m.add_function(wrap_pyfunction!(fbp, m)?)?;
    m.add_function(wrap_pyfunction!(sart, m)?)?;
    m.add_function(wrap_pyfunction!(bernoulli_measure, m)?)?;
    m.add_function(wrap_pyfunction!(fista, m)?)?;
    m.add_function(wrap_pyfunction!(propagate, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize_hologram, m)?)?;
    m.add_function(wrap_pyfunction!(reconstruct_offaxis, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    Ok(())
}
