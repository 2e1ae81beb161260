//! Off-axis hologram synthesis and reconstruction with angular-spectrum
//! scalar diffraction. The angular spectrum kernel is exact for
//! propagating components and zeroes evanescent ones, so propagation is
//! unitary on band-limited fields.

use std::cell::RefCell;
use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use num_complex::{Complex, Complex32};
use rustfft::{Fft, FftPlanner};

use crate::physics::C_MM_PER_PS;
use crate::tensorio::{self, Image2D, Tensor};
use crate::{Error, Result};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(n: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(n)
        } else {
            p.plan_fft_forward(n)
        }
    })
}

/// In-place 2-D FFT over both axes. Unnormalized forward; the inverse
/// divides by the element count.
pub fn fft2(a: &mut Array2<Complex<f64>>, inverse: bool) {
    let (h, w) = a.dim();
    let row_fft = plan(w, inverse);
    let mut buf = vec![Complex::new(0.0, 0.0); w.max(h)];
    for mut row in a.rows_mut() {
        buf[..w].copy_from_slice(row.as_slice().unwrap());
        row_fft.process(&mut buf[..w]);
        row.as_slice_mut().unwrap().copy_from_slice(&buf[..w]);
    }
    let col_fft = plan(h, inverse);
    for j in 0..w {
        for i in 0..h {
            buf[i] = a[(i, j)];
        }
        col_fft.process(&mut buf[..h]);
        for i in 0..h {
            a[(i, j)] = buf[i];
        }
    }
    if inverse {
        let scale = 1.0 / (h * w) as f64;
        a.mapv_inplace(|z| z * scale);
    }
}

/// FFT frequency in cycles/mm for bin `k` of an `n`-point axis.
fn fft_freq(k: usize, n: usize, pitch_mm: f64) -> f64 {
    let k = k as isize;
    let n = n as isize;
    let k = if k > n / 2 { k - n } else { k };
    k as f64 / (n as f64 * pitch_mm)
}

/// Monochromatic complex field sampled on a regular grid.
#[derive(Debug, Clone)]
pub struct ComplexField2D {
    pub data: Array2<Complex<f64>>,
    pub pitch_mm: f64,
    pub freq_thz: f64,
}

impl ComplexField2D {
    pub fn new(data: Array2<Complex<f64>>, pitch_mm: f64, freq_thz: f64) -> Result<Self> {
        if pitch_mm <= 0.0 || freq_thz <= 0.0 {
            return Err(Error::InvalidArgument(
                "pitch and frequency must be > 0".into(),
            ));
        }
        Ok(ComplexField2D {
            data,
            pitch_mm,
            freq_thz,
        })
    }

    pub fn wavelength_mm(&self) -> f64 {
        C_MM_PER_PS / self.freq_thz
    }

    pub fn energy(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    /// Persist as a complex64 THZT tensor with pitch/frequency sidecar.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let flat: Vec<Complex32> = self
            .data
            .iter()
            .map(|z| Complex32::new(z.re as f32, z.im as f32))
            .collect();
        let t = Tensor::from_complex(self.data.shape(), flat)?;
        tensorio::write_thzt(&t, path)?;
        tensorio::write_sidecar(
            &[
                ("pitch_mm".into(), self.pitch_mm.to_string()),
                ("freq_thz".into(), self.freq_thz.to_string()),
            ],
            crate::phantom::sidecar_path(path),
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let t = tensorio::read_thzt(path)?;
        let shape = t.shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::ShapeMismatch("expected 2-D complex tensor".into()));
        }
        let data: Vec<Complex<f64>> = t
            .as_complex()?
            .iter()
            .map(|z| Complex::new(z.re as f64, z.im as f64))
            .collect();
        let data = Array2::from_shape_vec((shape[0], shape[1]), data)
            .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        let mut pitch = 1.0;
        let mut freq = 1.0;
        for (k, v) in tensorio::read_sidecar(crate::phantom::sidecar_path(path))? {
            match k.as_str() {
                "pitch_mm" => pitch = v.parse().unwrap_or(1.0),
                "freq_thz" => freq = v.parse().unwrap_or(1.0),
                _ => {}
            }
        }
        ComplexField2D::new(data, pitch, freq)
    }
}

/// Angular-spectrum propagation over distance `z_mm` (raw array form).
/// Transfer function exp(i·2πz·sqrt(1/λ² - fx² - fy²)) on the
/// propagating disk, zero on evanescent components.
pub fn propagate_array(
    field: &Array2<Complex<f64>>,
    pitch_mm: f64,
    freq_thz: f64,
    z_mm: f64,
) -> Array2<Complex<f64>> {
    let (h, w) = field.dim();
    let lambda = C_MM_PER_PS / freq_thz;
    let inv_l2 = 1.0 / (lambda * lambda);
    let mut spec = field.clone();
    fft2(&mut spec, false);
    for i in 0..h {
        let fy = fft_freq(i, h, pitch_mm);
        for j in 0..w {
            let fx = fft_freq(j, w, pitch_mm);
            let arg = inv_l2 - fx * fx - fy * fy;
            if arg >= 0.0 {
                let phase = 2.0 * std::f64::consts::PI * z_mm * arg.sqrt();
                spec[(i, j)] *= Complex::new(phase.cos(), phase.sin());
            } else {
                spec[(i, j)] = Complex::new(0.0, 0.0);
            }
        }
    }
    fft2(&mut spec, true);
    spec
}

/// Angular-spectrum propagation of a field by `z_mm`.
pub fn angular_spectrum_propagate(u: &ComplexField2D, z_mm: f64) -> ComplexField2D {
    ComplexField2D {
        data: propagate_array(&u.data, u.pitch_mm, u.freq_thz, z_mm),
        pitch_mm: u.pitch_mm,
        freq_thz: u.freq_thz,
    }
}

fn carrier_cycles_per_mm(tilt_deg: f64, lambda_mm: f64) -> f64 {
    tilt_deg.to_radians().sin() / lambda_mm
}

/// Off-axis interferogram of an object field with a tilted plane-wave
/// reference, in f64 precision: H = |U_r + U_o|², expanded as
/// |U_r|² + U_r*·U_o + U_r·U_o* + |U_o|².
pub fn synthesize_hologram_f64(
    obj: &ComplexField2D,
    ref_tilt_deg: f64,
    ref_amp: f64,
) -> Result<Array2<f64>> {
    let lambda = obj.wavelength_mm();
    let fc = carrier_cycles_per_mm(ref_tilt_deg, lambda);
    if fc.abs() >= 1.0 / (2.0 * obj.pitch_mm) {
        return Err(Error::InvalidArgument(format!(
            "carrier {} cycles/mm above Nyquist {}",
            fc,
            1.0 / (2.0 * obj.pitch_mm)
        )));
    }
    let (h, w) = obj.data.dim();
    let mut out = Array2::<f64>::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let x = j as f64 * obj.pitch_mm;
            let phase = 2.0 * std::f64::consts::PI * fc * x;
            let u_r = Complex::from_polar(ref_amp, phase);
            let u_o = obj.data[(i, j)];
            out[(i, j)] = u_r.norm_sqr()
                + (u_r.conj() * u_o).re * 2.0
                + u_o.norm_sqr();
        }
    }
    Ok(out)
}

/// Off-axis interferogram as an image (see [`synthesize_hologram_f64`]).
/// The output is real and nonnegative.
pub fn synthesize_hologram(
    obj: &ComplexField2D,
    ref_tilt_deg: f64,
    ref_amp: f64,
) -> Result<Image2D> {
    let h = synthesize_hologram_f64(obj, ref_tilt_deg, ref_amp)?;
    Image2D::new(h.mapv(|v| v as f32), obj.pitch_mm)
}

/// Recover the object field from an off-axis hologram: isolate the +1
/// diffraction order with a rectangular window of half the carrier
/// offset, recenter it to baseband, divide out the reference amplitude,
/// and back-propagate by `-z_mm`.
pub fn reconstruct_offaxis(
    h: &Image2D,
    tilt_deg: f64,
    ref_amp: f64,
    z_mm: f64,
    freq_thz: f64,
) -> Result<ComplexField2D> {
    if ref_amp <= 0.0 {
        return Err(Error::InvalidArgument("ref_amp must be > 0".into()));
    }
    let (rows, cols) = h.data.dim();
    let lambda = C_MM_PER_PS / freq_thz;
    let fc = carrier_cycles_per_mm(tilt_deg, lambda);
    // carrier offset in bins along the x (column) axis
    let kc = (fc * cols as f64 * h.pitch_mm).round() as isize;
    if kc < 1 || kc >= (cols / 2) as isize {
        return Err(Error::InvalidArgument(format!(
            "carrier bin {} outside usable spectrum of width {}",
            kc, cols
        )));
    }
    let mut spec = h.data.mapv(|v| Complex::new(v as f64, 0.0));
    fft2(&mut spec, false);
    // keep the order carrying U_r*·U_o: under the e^{-i2πfx} forward
    // convention it sits at -kc for a reference tilted toward +x
    let half = (kc / 2).max(1);
    let mut windowed = Array2::<Complex<f64>>::zeros((rows, cols));
    for di in -half..=half {
        for dj in -half..=half {
            let i = di.rem_euclid(rows as isize) as usize;
            let j = (-kc + dj).rem_euclid(cols as isize) as usize;
            windowed[(i, j)] = spec[(i, j)];
        }
    }
    fft2(&mut windowed, true);
    // demodulate the exact (fractional-bin) carrier in the spatial domain
    for ((_, j), z) in windowed.indexed_iter_mut() {
        let x = j as f64 * h.pitch_mm;
        let phase = 2.0 * std::f64::consts::PI * fc * x;
        *z *= Complex::from_polar(1.0 / ref_amp, phase);
    }
    let field = ComplexField2D::new(windowed, h.pitch_mm, freq_thz)?;
    Ok(angular_spectrum_propagate(&field, -z_mm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    /// Smooth band-limited test object: a Gaussian blob with a mild
    /// phase ramp, zero near the borders.
    fn test_object(n: usize, pitch: f64, freq: f64) -> ComplexField2D {
        let c = (n - 1) as f64 / 2.0;
        let data = Array2::from_shape_fn((n, n), |(i, j)| {
            let r2 = ((i as f64 - c).powi(2) + (j as f64 - c).powi(2)) / (n as f64 / 6.0).powi(2);
            let amp = (-r2).exp();
            Complex::from_polar(amp, 0.3 * (j as f64 - c) / n as f64)
        });
        ComplexField2D::new(data, pitch, freq).unwrap()
    }

    /// Strip frequencies outside a small low-pass disk so the field is
    /// strictly band-limited (no evanescent content).
    fn band_limit(u: &ComplexField2D, keep: usize) -> ComplexField2D {
        let (h, w) = u.data.dim();
        let mut spec = u.data.clone();
        fft2(&mut spec, false);
        for i in 0..h {
            for j in 0..w {
                let ki = if i > h / 2 { h - i } else { i };
                let kj = if j > w / 2 { w - j } else { j };
                if ki > keep || kj > keep {
                    spec[(i, j)] = Complex::new(0.0, 0.0);
                }
            }
        }
        fft2(&mut spec, true);
        ComplexField2D::new(spec, u.pitch_mm, u.freq_thz).unwrap()
    }

    #[test]
    fn propagate_zero_distance_is_identity() {
        let u = band_limit(&test_object(32, 0.25, 1.0), 8);
        let v = angular_spectrum_propagate(&u, 0.0);
        for (a, b) in u.data.iter().zip(v.data.iter()) {
            assert_abs_diff_eq!(a.re, b.re, epsilon = 1e-10);
            assert_abs_diff_eq!(a.im, b.im, epsilon = 1e-10);
        }
    }

    #[test]
    fn propagate_roundtrip_identity() {
        let u = band_limit(&test_object(64, 0.25, 1.0), 12);
        let back = angular_spectrum_propagate(&angular_spectrum_propagate(&u, 7.5), -7.5);
        let num: f64 = u
            .data
            .iter()
            .zip(back.data.iter())
            .map(|(a, b)| (a - b).norm_sqr())
            .sum();
        let den: f64 = u.energy();
        assert!((num / den).sqrt() < 1e-10, "rel err {}", (num / den).sqrt());
    }

    #[test]
    fn plane_wave_gains_global_phase() {
        let n = 16;
        let data = Array2::from_elem((n, n), Complex::new(1.0, 0.0));
        let u = ComplexField2D::new(data, 0.25, 1.0).unwrap();
        let z = 3.0;
        let v = angular_spectrum_propagate(&u, z);
        let expected = Complex::from_polar(1.0, 2.0 * std::f64::consts::PI * z / u.wavelength_mm());
        for b in v.data.iter() {
            assert_abs_diff_eq!(b.re, expected.re, epsilon = 1e-10);
            assert_abs_diff_eq!(b.im, expected.im, epsilon = 1e-10);
            assert_abs_diff_eq!(b.norm(), 1.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn energy_non_increasing() {
        let u = test_object(32, 0.1, 2.0);
        let v = angular_spectrum_propagate(&u, 11.0);
        assert!(v.energy() <= u.energy() * (1.0 + 1e-12));
        let b = band_limit(&u, 6);
        let vb = angular_spectrum_propagate(&b, 11.0);
        assert_relative_eq!(vb.energy(), b.energy(), max_relative = 1e-12);
    }

    #[test]
    fn hologram_of_zero_object_is_constant() {
        let n = 32;
        let obj = ComplexField2D::new(Array2::zeros((n, n)), 0.25, 1.0).unwrap();
        let h = synthesize_hologram_f64(&obj, 10.0, 0.7).unwrap();
        for &v in h.iter() {
            assert_abs_diff_eq!(v, 0.49, epsilon = 1e-12);
        }
    }

    #[test]
    fn hologram_of_zero_reference_is_intensity() {
        let obj = test_object(32, 0.25, 1.0);
        let h = synthesize_hologram_f64(&obj, 10.0, 0.0).unwrap();
        for (v, o) in h.iter().zip(obj.data.iter()) {
            assert_abs_diff_eq!(*v, o.norm_sqr(), epsilon = 1e-12);
        }
    }

    #[test]
    fn hologram_equals_squared_sum_identity() {
        let obj = test_object(24, 0.25, 1.0);
        let tilt = 12.0;
        let amp = 0.8;
        let h = synthesize_hologram_f64(&obj, tilt, amp).unwrap();
        let lambda = obj.wavelength_mm();
        let fc = tilt.to_radians().sin() / lambda;
        for ((i, j), &v) in h.indexed_iter() {
            assert!(v >= 0.0);
            let x = j as f64 * obj.pitch_mm;
            let u_r = Complex::from_polar(amp, 2.0 * std::f64::consts::PI * fc * x);
            let direct = (u_r + obj.data[(i, j)]).norm_sqr();
            assert_abs_diff_eq!(v, direct, epsilon = 1e-12);
            let _ = i;
        }
    }

    #[test]
    fn hologram_rejects_super_nyquist_carrier() {
        // pitch 0.25 mm at 3 THz: lambda ~0.1 mm, Nyquist 2 cycles/mm
        let obj = test_object(16, 0.25, 3.0);
        assert!(synthesize_hologram(&obj, 45.0, 1.0).is_err());
    }

    #[test]
    fn offaxis_roundtrip_recovers_amplitude() {
        let n = 128;
        let pitch = 0.25;
        let freq = 1.0; // lambda ~0.3 mm
        let obj = band_limit(&test_object(n, pitch, freq), 6);
        let tilt = 16.0;
        let holo = synthesize_hologram(&obj, tilt, 1.0).unwrap();
        let rec = reconstruct_offaxis(&holo, tilt, 1.0, 0.0, freq).unwrap();
        let num: f64 = obj
            .data
            .iter()
            .zip(rec.data.iter())
            .map(|(a, b)| (a.norm() - b.norm()).powi(2))
            .sum();
        let den: f64 = obj.data.iter().map(|a| a.norm_sqr()).sum();
        let rel = (num / den).sqrt();
        assert!(rel <= 0.05, "amplitude rel err {}", rel);
    }

    #[test]
    fn offaxis_recovers_flat_phase_plate() {
        let n = 128;
        let pitch = 0.25;
        let freq = 1.0;
        let phase = 0.9;
        // uniform phase plate: band-limited constant-amplitude object
        let base = ComplexField2D::new(
            Array2::from_elem((n, n), Complex::from_polar(0.5, phase)),
            pitch,
            freq,
        )
        .unwrap();
        let obj = band_limit(&base, 4);
        let tilt = 16.0;
        let holo = synthesize_hologram(&obj, tilt, 1.0).unwrap();
        let rec = reconstruct_offaxis(&holo, tilt, 1.0, 0.0, freq).unwrap();
        let q = n / 4;
        for i in q..3 * q {
            for j in q..3 * q {
                let d = crate::spectral::wrap_phase(rec.data[(i, j)].arg() - phase);
                assert!(d.abs() <= 0.05, "phase err {} at ({},{})", d, i, j);
            }
        }
    }

    #[test]
    fn zero_hologram_reconstructs_zero() {
        let h = Image2D::new(Array2::zeros((64, 64)), 0.25).unwrap();
        let rec = reconstruct_offaxis(&h, 16.0, 1.0, 5.0, 1.0).unwrap();
        assert!(rec.data.iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn field_save_load_roundtrip() {
        let u = test_object(16, 0.25, 1.0);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.thzt");
        u.save(&p).unwrap();
        let v = ComplexField2D::load(&p).unwrap();
        assert_eq!(v.data.dim(), (16, 16));
        assert_eq!(v.pitch_mm, 0.25);
        for (a, b) in u.data.iter().zip(v.data.iter()) {
            assert_abs_diff_eq!(a.re, b.re, epsilon = 1e-6);
        }
    }
}
