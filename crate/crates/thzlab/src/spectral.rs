//! FFT feature extraction: one-sided spectra of time traces, Time-max
//! images, amplitude/phase images at selected water-absorption bands,
//! and the band-selection rule itself.

use std::cell::RefCell;
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array2, Array3, ArrayView3};
use num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::physics::{absorption_spectrum, TimeTrace, WaterVaporModel};
use crate::tensorio::{self, Image2D, Tensor};
use crate::{Error, Result};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan_forward(n: usize) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| p.borrow_mut().plan_fft_forward(n))
}

fn plan_inverse(n: usize) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| p.borrow_mut().plan_fft_inverse(n))
}

/// One-sided DFT of a real signal of length n: bins 0..=n/2, unnormalized
/// forward convention X[k] = sum_t x[t]·exp(-2πi·k·t/n).
pub fn rfft(samples: &[f64]) -> Vec<Complex<f64>> {
    let n = samples.len();
    let mut buf: Vec<Complex<f64>> = samples.iter().map(|&v| Complex::new(v, 0.0)).collect();
    plan_forward(n).process(&mut buf);
    buf.truncate(n / 2 + 1);
    buf
}

/// Inverse of [`rfft`]: rebuild the Hermitian spectrum and return the
/// length-n real signal.
pub fn irfft(bins: &[Complex<f64>], n: usize) -> Vec<f64> {
    assert_eq!(bins.len(), n / 2 + 1, "one-sided bin count mismatch");
    let mut full: Vec<Complex<f64>> = Vec::with_capacity(n);
    full.extend_from_slice(bins);
    for k in (1..n / 2).rev() {
        full.push(bins[k].conj());
    }
    plan_inverse(n).process(&mut full);
    full.iter().map(|z| z.re / n as f64).collect()
}

/// One-sided spectrum of a time trace.
#[derive(Debug, Clone)]
pub struct Spectrum {
    pub bins: Vec<Complex<f64>>,
    /// Frequency-grid spacing, THz.
    pub df_thz: f64,
}

impl Spectrum {
    pub fn n_bins(&self) -> usize {
        self.bins.len()
    }

    pub fn nyquist_thz(&self) -> f64 {
        (self.bins.len() - 1) as f64 * self.df_thz
    }

    pub fn nearest_bin(&self, f_thz: f64) -> usize {
        ((f_thz / self.df_thz).round() as usize).min(self.bins.len() - 1)
    }

    pub fn amplitude(&self) -> Vec<f64> {
        self.bins.iter().map(|z| z.norm()).collect()
    }
}

/// One-sided DFT of a trace. The trace length must be a power of two.
pub fn fft_trace(t: &TimeTrace) -> Result<Spectrum> {
    let n = t.samples.len();
    if !n.is_power_of_two() {
        return Err(Error::InvalidArgument(format!(
            "trace length {} is not a power of two",
            n
        )));
    }
    let samples: Vec<f64> = t.samples.iter().map(|&v| v as f64).collect();
    Ok(Spectrum {
        bins: rfft(&samples),
        df_thz: 1.0 / (n as f64 * t.dt_ps),
    })
}

/// Maximum signed sample value of the trace (the Time-max feature).
pub fn time_max(t: &TimeTrace) -> f32 {
    t.samples.iter().cloned().fold(f32::NEG_INFINITY, f32::max)
}

/// Index of the Time-max sample; ties break to the earliest index.
pub fn time_max_index(t: &TimeTrace) -> usize {
    let mut best = 0;
    for (i, &v) in t.samples.iter().enumerate() {
        if v > t.samples[best] {
            best = i;
        }
    }
    best
}

/// Phase wrapped to (-π, π].
pub fn wrap_phase(phi: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut p = phi.rem_euclid(two_pi);
    if p > std::f64::consts::PI {
        p -= two_pi;
    }
    p
}

/// Image of the Time-max feature over one scan view (height x width x
/// samples).
pub fn time_max_image(view: ArrayView3<f32>, pitch_mm: f64) -> Result<Image2D> {
    let (h, w, _) = view.dim();
    let mut img = Array2::<f32>::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let row = view.slice(ndarray::s![i, j, ..]);
            img[(i, j)] = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        }
    }
    Image2D::new(img, pitch_mm)
}

/// Amplitude and reference-relative wrapped-phase images of one scan view
/// at the frequency bin nearest `f_thz`.
pub fn band_image(
    view: ArrayView3<f32>,
    dt_ps: f64,
    pitch_mm: f64,
    f_thz: f64,
    reference: &Spectrum,
) -> Result<(Image2D, Image2D)> {
    let (h, w, n) = view.dim();
    if !n.is_power_of_two() {
        return Err(Error::InvalidArgument("trace length not a power of two".into()));
    }
    let df = 1.0 / (n as f64 * dt_ps);
    let nyquist = (n / 2) as f64 * df;
    if !(0.0..=nyquist).contains(&f_thz) {
        return Err(Error::InvalidArgument(format!(
            "band frequency {} THz above Nyquist {} THz",
            f_thz, nyquist
        )));
    }
    let bin = ((f_thz / df).round() as usize).min(n / 2);
    if bin >= reference.n_bins() {
        return Err(Error::ShapeMismatch("reference spectrum too short".into()));
    }
    let eref = reference.bins[bin];
    let mut amp = Array2::<f32>::zeros((h, w));
    let mut phase = Array2::<f32>::zeros((h, w));
    let mut samples = vec![0.0f64; n];
    for i in 0..h {
        for j in 0..w {
            for (t, v) in view.slice(ndarray::s![i, j, ..]).iter().enumerate() {
                samples[t] = *v as f64;
            }
            let bins = rfft(&samples);
            let e = bins[bin];
            amp[(i, j)] = e.norm() as f32;
            let rel = if eref.norm() > 0.0 { e / eref } else { e };
            phase[(i, j)] = wrap_phase(rel.arg()) as f32;
        }
    }
    Ok((Image2D::new(amp, pitch_mm)?, Image2D::new(phase, pitch_mm)?))
}

/// Pick the `count` strongest local maxima of the water absorption curve
/// within [f_lo, f_hi], returned in ascending frequency order.
pub fn select_water_bands(
    w: &WaterVaporModel,
    f_lo: f64,
    f_hi: f64,
    count: usize,
) -> Result<Vec<f64>> {
    let step = 0.0005;
    let n = ((f_hi - f_lo) / step).round() as usize + 1;
    let freqs: Vec<f64> = (0..n).map(|i| f_lo + i as f64 * step).collect();
    let alpha = absorption_spectrum(w, &freqs);
    let mut peaks: Vec<(f64, f64)> = Vec::new();
    for i in 1..n - 1 {
        if alpha[i] > alpha[i - 1] && alpha[i] >= alpha[i + 1] {
            peaks.push((freqs[i], alpha[i]));
        }
    }
    if peaks.len() < count {
        return Err(Error::InvalidArgument(format!(
            "only {} absorption maxima in [{}, {}] THz, need {}",
            peaks.len(),
            f_lo,
            f_hi,
            count
        )));
    }
    peaks.sort_by(|a, b| b.1.total_cmp(&a.1));
    let mut selected: Vec<f64> = peaks[..count].iter().map(|&(f, _)| f).collect();
    selected.sort_by(f64::total_cmp);
    Ok(selected)
}

/// Per-view curated feature images: channel 0 is Time-max, channels 1-12
/// the amplitude images and 13-24 the phase images at the 12 band
/// frequencies, ascending. Every channel is mapped into [0,1]: Time-max
/// and amplitude by min-max normalization, phase affinely from (-π, π].
#[derive(Debug, Clone)]
pub struct FeatureStack {
    /// 25 x height x width.
    pub channels: Array3<f32>,
    pub band_freqs_thz: Vec<f64>,
    pub pitch_mm: f64,
}

pub const FEATURE_CHANNELS: usize = 25;
pub const N_BANDS: usize = 12;

fn minmax_normalize(img: &mut Array2<f32>) {
    let lo = img.iter().cloned().fold(f32::INFINITY, f32::min);
    let hi = img.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    if hi > lo {
        img.mapv_inplace(|v| (v - lo) / (hi - lo));
    } else {
        img.fill(0.0);
    }
}

/// Build the 25-channel feature stack of one scan view.
pub fn feature_stack(
    view: ArrayView3<f32>,
    dt_ps: f64,
    pitch_mm: f64,
    bands_thz: &[f64],
    reference: &Spectrum,
) -> Result<FeatureStack> {
    if bands_thz.len() != N_BANDS {
        return Err(Error::InvalidArgument(format!(
            "expected {} bands, got {}",
            N_BANDS,
            bands_thz.len()
        )));
    }
    if bands_thz.windows(2).any(|p| p[1] <= p[0]) {
        return Err(Error::InvalidArgument(
            "band frequencies must be strictly ascending".into(),
        ));
    }
    let (h, w, _) = view.dim();
    let mut channels = Array3::<f32>::zeros((FEATURE_CHANNELS, h, w));

    let mut tmax = time_max_image(view, pitch_mm)?.data;
    minmax_normalize(&mut tmax);
    channels.slice_mut(ndarray::s![0, .., ..]).assign(&tmax);

    let pi = std::f32::consts::PI;
    for (b, &f) in bands_thz.iter().enumerate() {
        let (amp, phase) = band_image(view, dt_ps, pitch_mm, f, reference)?;
        let mut a = amp.data;
        minmax_normalize(&mut a);
        channels.slice_mut(ndarray::s![1 + b, .., ..]).assign(&a);
        let p = phase.data.mapv(|v| (v + pi) / (2.0 * pi));
        channels.slice_mut(ndarray::s![13 + b, .., ..]).assign(&p);
    }
    Ok(FeatureStack {
        channels,
        band_freqs_thz: bands_thz.to_vec(),
        pitch_mm,
    })
}

impl FeatureStack {
    /// Persist as a THZT 3-D tensor plus a sidecar listing the band
    /// frequencies.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        tensorio::write_thzt(&Tensor::from_array3(&self.channels), path)?;
        let bands: Vec<String> = self.band_freqs_thz.iter().map(|f| f.to_string()).collect();
        tensorio::write_sidecar(
            &[
                ("band_freqs_thz".into(), bands.join(" ")),
                ("pitch_mm".into(), self.pitch_mm.to_string()),
            ],
            crate::phantom::sidecar_path(path),
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let channels = tensorio::read_thzt(path)?.to_array3()?;
        let pairs = tensorio::read_sidecar(crate::phantom::sidecar_path(path))?;
        let mut bands = Vec::new();
        let mut pitch = 1.0;
        for (k, v) in pairs {
            match k.as_str() {
                "band_freqs_thz" => {
                    bands = v
                        .split_whitespace()
                        .map(|s| s.parse::<f64>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|e| Error::InvalidArgument(format!("bad band list: {}", e)))?;
                }
                "pitch_mm" => {
                    pitch = v
                        .parse()
                        .map_err(|_| Error::InvalidArgument("bad pitch_mm".into()))?;
                }
                _ => {}
            }
        }
        Ok(FeatureStack {
            channels,
            band_freqs_thz: bands,
            pitch_mm: pitch,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::physics::{reference_pulse, PulseModel, WaterLine};
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    #[test]
    fn fft_of_impulse_is_flat() {
        let mut samples = vec![0.0f32; 64];
        samples[0] = 1.0;
        let t = TimeTrace { samples, dt_ps: 0.1 };
        let s = fft_trace(&t).unwrap();
        for z in &s.bins {
            assert_abs_diff_eq!(z.norm(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn fft_of_cosine_concentrates_energy() {
        let n = 128;
        let k = 5;
        let samples: Vec<f32> = (0..n)
            .map(|t| (2.0 * std::f64::consts::PI * k as f64 * t as f64 / n as f64).cos() as f32)
            .collect();
        let t = TimeTrace { samples, dt_ps: 0.1 };
        let s = fft_trace(&t).unwrap();
        for (i, z) in s.bins.iter().enumerate() {
            if i == k {
                assert_relative_eq!(z.norm(), n as f64 / 2.0, epsilon = 1e-6);
            } else {
                assert!(z.norm() < 1e-6, "bin {} = {}", i, z.norm());
            }
        }
    }

    #[test]
    fn parseval_holds() {
        let t = reference_pulse(&PulseModel::default()).unwrap();
        let s = fft_trace(&t).unwrap();
        let n = t.samples.len();
        let e_time: f64 = t.samples.iter().map(|&v| (v as f64).powi(2)).sum();
        let mut e_freq = s.bins[0].norm_sqr() + s.bins[n / 2].norm_sqr();
        for z in &s.bins[1..n / 2] {
            e_freq += 2.0 * z.norm_sqr();
        }
        e_freq /= n as f64;
        assert_relative_eq!(e_time, e_freq, max_relative = 1e-9);
    }

    #[test]
    fn fft_roundtrip_identity() {
        let t = reference_pulse(&PulseModel::default()).unwrap();
        let samples: Vec<f64> = t.samples.iter().map(|&v| v as f64).collect();
        let back = irfft(&rfft(&samples), samples.len());
        for (a, b) in samples.iter().zip(&back) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn fft_rejects_non_power_of_two() {
        let t = TimeTrace {
            samples: vec![0.0; 100],
            dt_ps: 0.1,
        };
        assert!(fft_trace(&t).is_err());
    }

    #[test]
    fn time_max_is_signed_and_homogeneous() {
        let t = reference_pulse(&PulseModel::default()).unwrap();
        assert_abs_diff_eq!(time_max(&t), 1.0, epsilon = 1e-6);
        // sign sensitivity: for an asymmetric trace the signed maximum of
        // the negation comes from the small opposite-sign lobe
        let asym = TimeTrace {
            samples: vec![0.1, 1.0, -0.3, 0.05],
            dt_ps: 0.1,
        };
        let negated = TimeTrace {
            samples: asym.samples.iter().map(|v| -v).collect(),
            dt_ps: asym.dt_ps,
        };
        assert_abs_diff_eq!(time_max(&negated), 0.3, epsilon = 1e-7);
        let halved = TimeTrace {
            samples: t.samples.iter().map(|v| 0.5 * v).collect(),
            dt_ps: t.dt_ps,
        };
        assert_abs_diff_eq!(time_max(&halved), 0.5 * time_max(&t), epsilon = 1e-7);
    }

    #[test]
    fn time_max_index_breaks_ties_early() {
        let t = TimeTrace {
            samples: vec![0.0, 3.0, 1.0, 3.0],
            dt_ps: 0.1,
        };
        assert_eq!(time_max_index(&t), 1);
    }

    #[test]
    fn select_exact_line_count() {
        let w = WaterVaporModel::lab_air();
        let bands = select_water_bands(&w, 0.3, 1.3, 12).unwrap();
        assert_eq!(bands.len(), 12);
        assert!(bands.windows(2).all(|p| p[1] > p[0]));
        for (band, line) in bands.iter().zip(&w.lines) {
            assert_abs_diff_eq!(band, &line.center_thz, epsilon = 1e-3);
        }
    }

    #[test]
    fn select_excludes_out_of_range_lines() {
        let mut w = WaterVaporModel::lab_air();
        w.lines.push(WaterLine {
            center_thz: 1.411,
            strength: 1.0,
            halfwidth_thz: 0.005,
        });
        let bands = select_water_bands(&w, 0.3, 1.3, 12).unwrap();
        assert!(bands.iter().all(|&f| (0.3..=1.3).contains(&f)));
    }

    #[test]
    fn select_takes_strongest_of_many() {
        // 15 in-band lines; the 12 strongest must be kept
        let lines: Vec<WaterLine> = (0..15)
            .map(|i| WaterLine {
                center_thz: 0.35 + i as f64 * 0.06,
                strength: if i < 3 { 0.01 } else { 0.1 + i as f64 * 0.01 },
                halfwidth_thz: 0.004,
            })
            .collect();
        let w = WaterVaporModel::new(lines.clone(), 0.0).unwrap();
        let bands = select_water_bands(&w, 0.3, 1.3, 12).unwrap();
        assert_eq!(bands.len(), 12);
        for l in &lines[..3] {
            assert!(bands.iter().all(|&b| (b - l.center_thz).abs() > 0.01));
        }
    }

    #[test]
    fn select_errors_when_insufficient() {
        let w = WaterVaporModel::new(vec![], 0.1).unwrap();
        assert!(select_water_bands(&w, 0.3, 1.3, 12).is_err());
    }

    #[test]
    fn wrap_phase_range() {
        let pi = std::f64::consts::PI;
        assert_abs_diff_eq!(wrap_phase(3.0 * pi), pi, epsilon = 1e-12);
        assert_abs_diff_eq!(wrap_phase(-pi), pi, epsilon = 1e-12);
        assert_abs_diff_eq!(wrap_phase(0.3), 0.3, epsilon = 1e-12);
        assert_abs_diff_eq!(wrap_phase(-0.3), -0.3, epsilon = 1e-12);
    }
}
