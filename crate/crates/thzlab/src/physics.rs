//! Wave and material models: the reference emitter pulse, water-vapor
//! absorption lines, Fresnel interface coefficients, Beer-Lambert
//! attenuation, pulsed-imaging time-of-flight, and the Gaussian-beam
//! point spread function.

use std::path::Path;

use ndarray::Array2;

use crate::tensorio::Image2D;
use crate::{Error, Result};

/// Speed of light in vacuum, m/s.
pub const C_M_PER_S: f64 = 2.997_924_58e8;
/// Speed of light in mm/ps (numerically equal to mm·THz).
pub const C_MM_PER_PS: f64 = 0.299_792_458;

/// One sampled THz electric-field waveform: the raw measurement unit.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeTrace {
    pub samples: Vec<f32>,
    pub dt_ps: f64,
}

impl TimeTrace {
    pub fn n_samples(&self) -> usize {
        self.samples.len()
    }

    /// Frequency-grid spacing in THz for the one-sided spectrum of this trace.
    pub fn df_thz(&self) -> f64 {
        1.0 / (self.samples.len() as f64 * self.dt_ps)
    }
}

/// Emitter pulse parameters. Defaults follow a 0.1 ps sampling interval
/// (5 THz bandwidth over 1024 samples) and a 516 fs FWHM pulse.
#[derive(Debug, Clone)]
pub struct PulseModel {
    pub dt_ps: f64,
    pub n_samples: usize,
    pub fwhm_fs: f64,
    pub peak_amplitude: f64,
}

impl Default for PulseModel {
    fn default() -> Self {
        PulseModel {
            dt_ps: 0.1,
            n_samples: 1024,
            fwhm_fs: 516.0,
            peak_amplitude: 1.0,
        }
    }
}

impl PulseModel {
    pub fn validate(&self) -> Result<()> {
        if self.dt_ps <= 0.0 || self.fwhm_fs <= 0.0 {
            return Err(Error::InvalidArgument(
                "pulse dt_ps and fwhm_fs must be > 0".into(),
            ));
        }
        if !self.n_samples.is_power_of_two() {
            return Err(Error::InvalidArgument(
                "pulse n_samples must be a power of two".into(),
            ));
        }
        Ok(())
    }

    /// Nyquist frequency in THz (5 THz at defaults).
    pub fn nyquist_thz(&self) -> f64 {
        1.0 / (2.0 * self.dt_ps)
    }
}

/// Width of `|u·exp(-u²/2)|` at half its maximum, in units of the
/// Gaussian sigma: the distance between the two outermost half-maximum
/// crossings of the rectified first-derivative pulse. Solved once by
/// bisection on the outer falling edge.
fn derivative_pulse_halfmax_width() -> f64 {
    let target = 0.5 * (-0.5f64).exp(); // half of the lobe peak value
    let f = |u: f64| u * (-u * u / 2.0).exp() - target;
    let (mut lo, mut hi) = (1.0f64, 4.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    2.0 * 0.5 * (lo + hi)
}

/// Single-cycle reference pulse: a Gaussian first derivative centered at
/// `n_samples/4 · dt`, normalized so the sampled peak magnitude equals
/// `peak_amplitude`. The rectified pulse's outer half-maximum width
/// matches `fwhm_fs`; the spectrum has zero DC content.
pub fn reference_pulse(model: &PulseModel) -> Result<TimeTrace> {
    model.validate()?;
    let sigma_ps = (model.fwhm_fs / 1000.0) / derivative_pulse_halfmax_width();
    let t0 = (model.n_samples / 4) as f64 * model.dt_ps;
    let mut samples: Vec<f64> = (0..model.n_samples)
        .map(|i| {
            let t = i as f64 * model.dt_ps - t0;
            -(t / sigma_ps) * (-t * t / (2.0 * sigma_ps * sigma_ps)).exp()
        })
        .collect();
    let peak = samples.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    let scale = model.peak_amplitude / peak;
    for v in &mut samples {
        *v *= scale;
    }
    Ok(TimeTrace {
        samples: samples.iter().map(|&v| v as f32).collect(),
        dt_ps: model.dt_ps,
    })
}

/// Frequency-sampled refractive index and field absorption of a material.
#[derive(Debug, Clone)]
pub struct MaterialSpec {
    pub name: String,
    /// Shared frequency grid in THz, strictly increasing.
    pub freqs_thz: Vec<f64>,
    /// Refractive index n(f), n >= 1.
    pub n_table: Vec<f64>,
    /// Field absorption coefficient alpha(f) in 1/mm, alpha >= 0.
    pub alpha_table: Vec<f64>,
}

impl MaterialSpec {
    pub fn new(
        name: impl Into<String>,
        freqs_thz: Vec<f64>,
        n_table: Vec<f64>,
        alpha_table: Vec<f64>,
    ) -> Result<Self> {
        if freqs_thz.len() != n_table.len() || freqs_thz.len() != alpha_table.len() {
            return Err(Error::ShapeMismatch(
                "material tables must share one frequency grid".into(),
            ));
        }
        if freqs_thz.is_empty() {
            return Err(Error::InvalidArgument("empty material table".into()));
        }
        if freqs_thz.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument(
                "material frequency grid must be strictly increasing".into(),
            ));
        }
        if n_table.iter().any(|&n| n < 1.0) {
            return Err(Error::InvalidArgument("refractive index below 1".into()));
        }
        if alpha_table.iter().any(|&a| a < 0.0) {
            return Err(Error::InvalidArgument("negative absorption".into()));
        }
        Ok(MaterialSpec {
            name: name.into(),
            freqs_thz,
            n_table,
            alpha_table,
        })
    }

    /// Default printing material: high impact polystyrene with constant
    /// n = 1.54 and alpha = 0.2/mm. These are configuration placeholders,
    /// not measured ground truth.
    pub fn hips() -> Self {
        MaterialSpec {
            name: "hips".into(),
            freqs_thz: vec![0.0, 5.0],
            n_table: vec![1.54, 1.54],
            alpha_table: vec![0.2, 0.2],
        }
    }

    /// Vacuum/air: n = 1, alpha = 0.
    pub fn air() -> Self {
        MaterialSpec {
            name: "air".into(),
            freqs_thz: vec![0.0, 5.0],
            n_table: vec![1.0, 1.0],
            alpha_table: vec![0.0, 0.0],
        }
    }

    fn interp(&self, table: &[f64], f_thz: f64) -> f64 {
        let fs = &self.freqs_thz;
        if f_thz <= fs[0] {
            return table[0];
        }
        if f_thz >= fs[fs.len() - 1] {
            return table[table.len() - 1];
        }
        let i = fs.partition_point(|&x| x < f_thz).max(1);
        let (f0, f1) = (fs[i - 1], fs[i]);
        let w = (f_thz - f0) / (f1 - f0);
        table[i - 1] * (1.0 - w) + table[i] * w
    }

    pub fn n_at(&self, f_thz: f64) -> f64 {
        self.interp(&self.n_table, f_thz)
    }

    pub fn alpha_at(&self, f_thz: f64) -> f64 {
        self.interp(&self.alpha_table, f_thz)
    }

    /// Load a material from CSV rows `freq_THz,n,alpha`.
    pub fn from_csv(name: impl Into<String>, path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let mut freqs = Vec::new();
        let mut ns = Vec::new();
        let mut alphas = Vec::new();
        for line in csv_data_lines(&text) {
            let cols = parse_csv_floats(line, 3)?;
            freqs.push(cols[0]);
            ns.push(cols[1]);
            alphas.push(cols[2]);
        }
        MaterialSpec::new(name, freqs, ns, alphas)
    }
}

/// One Lorentzian water-vapor absorption line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WaterLine {
    pub center_thz: f64,
    /// Peak field absorption above the continuum, 1/mm.
    pub strength: f64,
    pub halfwidth_thz: f64,
}

/// Atmospheric water-vapor absorption as a sum of Lorentzian lines over
/// a constant continuum.
#[derive(Debug, Clone)]
pub struct WaterVaporModel {
    pub lines: Vec<WaterLine>,
    /// Constant baseline field absorption, 1/mm.
    pub continuum: f64,
}

impl WaterVaporModel {
    pub fn new(lines: Vec<WaterLine>, continuum: f64) -> Result<Self> {
        for l in &lines {
            if l.center_thz <= 0.0 || l.strength < 0.0 || l.halfwidth_thz <= 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "bad water line {:?}",
                    l
                )));
            }
        }
        if continuum < 0.0 {
            return Err(Error::InvalidArgument("negative continuum".into()));
        }
        Ok(WaterVaporModel { lines, continuum })
    }

    /// No absorption at all (dry nitrogen purge).
    pub fn dry() -> Self {
        WaterVaporModel {
            lines: Vec::new(),
            continuum: 0.0,
        }
    }

    /// Default line list: the rotational water-vapor lines falling in the
    /// 0.3-1.3 THz band of a published atmospheric absorption curve, as
    /// Lorentzians with a common pressure-broadened halfwidth. Line
    /// strengths are qualitative lab-air values in field 1/mm; the list is
    /// configuration, not measured ground truth.
    pub fn lab_air() -> Self {
        let hw = 0.005;
        let lines = [
            (0.380, 0.060),
            (0.448, 0.080),
            (0.557, 0.150),
            (0.621, 0.050),
            (0.752, 0.130),
            (0.916, 0.060),
            (0.970, 0.090),
            (0.988, 0.120),
            (1.097, 0.110),
            (1.113, 0.140),
            (1.163, 0.130),
            (1.207, 0.100),
        ]
        .iter()
        .map(|&(c, s)| WaterLine {
            center_thz: c,
            strength: s,
            halfwidth_thz: hw,
        })
        .collect();
        WaterVaporModel {
            lines,
            continuum: 0.002,
        }
    }

    /// Load lines from CSV rows `center,strength,halfwidth` with a
    /// continuum of zero.
    pub fn from_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let mut lines = Vec::new();
        for line in csv_data_lines(&text) {
            let cols = parse_csv_floats(line, 3)?;
            lines.push(WaterLine {
                center_thz: cols[0],
                strength: cols[1],
                halfwidth_thz: cols[2],
            });
        }
        WaterVaporModel::new(lines, 0.0)
    }
}

fn csv_data_lines(text: &str) -> impl Iterator<Item = &str> {
    text.lines().map(str::trim).filter(|l| {
        !l.is_empty() && !l.starts_with('#') && l.chars().next().is_some_and(|c| c.is_ascii_digit() || c == '-' || c == '.')
    })
}

fn parse_csv_floats(line: &str, n: usize) -> Result<Vec<f64>> {
    let cols: Vec<f64> = line
        .split(',')
        .map(|c| c.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::InvalidArgument(format!("bad CSV line {:?}: {}", line, e)))?;
    if cols.len() != n {
        return Err(Error::InvalidArgument(format!(
            "expected {} columns, got {} in {:?}",
            n,
            cols.len(),
            line
        )));
    }
    Ok(cols)
}

/// Field absorption alpha(f) = continuum + sum of Lorentzian lines,
/// evaluated at each requested frequency.
pub fn absorption_spectrum(w: &WaterVaporModel, freqs_thz: &[f64]) -> Vec<f64> {
    freqs_thz
        .iter()
        .map(|&f| {
            let mut a = w.continuum;
            for l in &w.lines {
                let d = f - l.center_thz;
                let hw2 = l.halfwidth_thz * l.halfwidth_thz;
                a += l.strength * hw2 / (d * d + hw2);
            }
            a
        })
        .collect()
}

/// Pulsed-imaging thickness from an echo delay: d = c·Δt / (2n).
pub fn time_of_flight_thickness(delta_t_ps: f64, n: f64) -> Result<f64> {
    if delta_t_ps < 0.0 {
        return Err(Error::InvalidArgument("negative time delay".into()));
    }
    if n < 1.0 {
        return Err(Error::InvalidArgument(format!(
            "refractive index {} below 1",
            n
        )));
    }
    Ok(C_MM_PER_PS * delta_t_ps / (2.0 * n))
}

/// Normal-incidence Fresnel amplitude coefficients for a wave going from
/// index `n1` into `n2`: transmission t = 2n1/(n1+n2) and reflection
/// r = (n1-n2)/(n1+n2), with t = 1 + r.
pub fn fresnel_transmission(n1: f64, n2: f64) -> Result<(f64, f64)> {
    if n1 < 1.0 || n2 < 1.0 {
        return Err(Error::InvalidArgument(
            "refractive indices must be >= 1".into(),
        ));
    }
    let t = 2.0 * n1 / (n1 + n2);
    let r = (n1 - n2) / (n1 + n2);
    Ok((t, r))
}

/// Field attenuation factor over a path: exp(-alpha·path/2). Intensity
/// then attenuates as exp(-alpha·path).
pub fn beer_lambert_field(alpha_per_mm: f64, path_mm: f64) -> Result<f64> {
    if alpha_per_mm < 0.0 || path_mm < 0.0 {
        return Err(Error::InvalidArgument(
            "alpha and path must be nonnegative".into(),
        ));
    }
    Ok((-alpha_per_mm * path_mm / 2.0).exp())
}

/// A normalized Gaussian intensity PSF kernel.
#[derive(Debug, Clone)]
pub struct PsfKernel {
    pub kernel: Image2D,
    /// Beam radius w(z) used for this kernel, mm.
    pub radius_mm: f64,
    /// Set when the kernel window cannot hold 3·w(z).
    pub clipped: bool,
}

/// Gaussian-beam intensity point spread function at propagation distance
/// `z_mm` from the waist. Beam radius follows w(z) = w0·sqrt(1+(z/zR)²)
/// with Rayleigh range zR = π·w0²/λ; the kernel sums to 1.
pub fn gaussian_beam_psf(
    freq_thz: f64,
    waist_mm: f64,
    z_mm: f64,
    pitch_mm: f64,
    kernel_size: usize,
) -> Result<PsfKernel> {
    if waist_mm <= 0.0 || freq_thz <= 0.0 || pitch_mm <= 0.0 {
        return Err(Error::InvalidArgument(
            "waist, frequency, and pitch must be > 0".into(),
        ));
    }
    if kernel_size % 2 == 0 {
        return Err(Error::InvalidArgument("kernel_size must be odd".into()));
    }
    let lambda_mm = C_MM_PER_PS / freq_thz;
    let z_r = std::f64::consts::PI * waist_mm * waist_mm / lambda_mm;
    let w = waist_mm * (1.0 + (z_mm / z_r).powi(2)).sqrt();
    let half = (kernel_size / 2) as isize;
    let mut k = Array2::<f32>::zeros((kernel_size, kernel_size));
    let mut sum = 0.0f64;
    for i in -half..=half {
        for j in -half..=half {
            let r2 = ((i as f64).powi(2) + (j as f64).powi(2)) * pitch_mm * pitch_mm;
            let v = (-2.0 * r2 / (w * w)).exp();
            k[((i + half) as usize, (j + half) as usize)] = v as f32;
            sum += v;
        }
    }
    k.mapv_inplace(|v| (v as f64 / sum) as f32);
    let clipped = (half as f64) * pitch_mm < 3.0 * w;
    Ok(PsfKernel {
        kernel: Image2D::new(k, pitch_mm)?,
        radius_mm: w,
        clipped,
    })
}
