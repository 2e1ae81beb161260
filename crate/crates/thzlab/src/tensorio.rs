//! Core array types, the on-disk THZT binary tensor container, and
//! PGM/CSV export shared by every other module.
//!
//! THZT layout (little-endian throughout):
//! magic `THZT` | version `u16` | dtype `u16` (0 = real32, 1 = complex64)
//! | ndim `u16` | each dim as `u32` | raw payload. complex64 is stored
//! as interleaved (re, im) pairs of real32. The header is therefore
//! `10 + 4 * ndim` bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3, Array4};
use num_complex::Complex32;

use crate::{Error, Result};

pub const THZT_MAGIC: &[u8; 4] = b"THZT";
pub const THZT_VERSION: u16 = 1;

/// Element type of a [`Tensor`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    Real32,
    Complex64,
}

impl Dtype {
    pub fn code(self) -> u16 {
        match self {
            Dtype::Real32 => 0,
            Dtype::Complex64 => 1,
        }
    }

    pub fn elem_bytes(self) -> usize {
        match self {
            Dtype::Real32 => 4,
            Dtype::Complex64 => 8,
        }
    }
}

/// Flat storage behind a [`Tensor`].
#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    Real32(Vec<f32>),
    Complex64(Vec<Complex32>),
}

/// Dense row-major tensor with 1 to 4 dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TensorData,
}

impl Tensor {
    pub fn from_real(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        Self::check_shape(shape, data.len())?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: TensorData::Real32(data),
        })
    }

    pub fn from_complex(shape: &[usize], data: Vec<Complex32>) -> Result<Self> {
        Self::check_shape(shape, data.len())?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: TensorData::Complex64(data),
        })
    }

    fn check_shape(shape: &[usize], len: usize) -> Result<()> {
        if shape.is_empty() || shape.len() > 4 {
            return Err(Error::ShapeMismatch(format!(
                "tensor must have 1-4 dimensions, got {}",
                shape.len()
            )));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::ShapeMismatch("zero-sized dimension".into()));
        }
        let n: usize = shape.iter().product();
        if n != len {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} implies {} elements, buffer has {}",
                shape, n, len
            )));
        }
        Ok(())
    }

    pub fn dtype(&self) -> Dtype {
        match self.data {
            TensorData::Real32(_) => Dtype::Real32,
            TensorData::Complex64(_) => Dtype::Complex64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn as_real(&self) -> Result<&[f32]> {
        match &self.data {
            TensorData::Real32(v) => Ok(v),
            TensorData::Complex64(_) => {
                Err(Error::InvalidArgument("expected real32 tensor".into()))
            }
        }
    }

    pub fn as_complex(&self) -> Result<&[Complex32]> {
        match &self.data {
            TensorData::Complex64(v) => Ok(v),
            TensorData::Real32(_) => {
                Err(Error::InvalidArgument("expected complex64 tensor".into()))
            }
        }
    }

    pub fn from_array2(a: &Array2<f32>) -> Self {
        Tensor {
            shape: a.shape().to_vec(),
            data: TensorData::Real32(a.iter().copied().collect()),
        }
    }

    pub fn from_array3(a: &Array3<f32>) -> Self {
        Tensor {
            shape: a.shape().to_vec(),
            data: TensorData::Real32(a.iter().copied().collect()),
        }
    }

    pub fn from_array4(a: &Array4<f32>) -> Self {
        Tensor {
            shape: a.shape().to_vec(),
            data: TensorData::Real32(a.iter().copied().collect()),
        }
    }

    pub fn to_array2(&self) -> Result<Array2<f32>> {
        if self.shape.len() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "expected 2-D tensor, got {:?}",
                self.shape
            )));
        }
        let v = self.as_real()?.to_vec();
        Array2::from_shape_vec((self.shape[0], self.shape[1]), v)
            .map_err(|e| Error::ShapeMismatch(e.to_string()))
    }

    pub fn to_array3(&self) -> Result<Array3<f32>> {
        if self.shape.len() != 3 {
            return Err(Error::ShapeMismatch(format!(
                "expected 3-D tensor, got {:?}",
                self.shape
            )));
        }
        let v = self.as_real()?.to_vec();
        Array3::from_shape_vec((self.shape[0], self.shape[1], self.shape[2]), v)
            .map_err(|e| Error::ShapeMismatch(e.to_string()))
    }

    pub fn to_array4(&self) -> Result<Array4<f32>> {
        if self.shape.len() != 4 {
            return Err(Error::ShapeMismatch(format!(
                "expected 4-D tensor, got {:?}",
                self.shape
            )));
        }
        let v = self.as_real()?.to_vec();
        Array4::from_shape_vec(
            (self.shape[0], self.shape[1], self.shape[2], self.shape[3]),
            v,
        )
        .map_err(|e| Error::ShapeMismatch(e.to_string()))
    }
}

/// 2-D real image with its spatial sampling pitch in millimeters.
#[derive(Debug, Clone, PartialEq)]
pub struct Image2D {
    pub data: Array2<f32>,
    pub pitch_mm: f64,
}

impl Image2D {
    pub fn new(data: Array2<f32>, pitch_mm: f64) -> Result<Self> {
        if pitch_mm <= 0.0 {
            return Err(Error::InvalidArgument("pitch_mm must be > 0".into()));
        }
        Ok(Image2D { data, pitch_mm })
    }

    pub fn height(&self) -> usize {
        self.data.nrows()
    }

    pub fn width(&self) -> usize {
        self.data.ncols()
    }
}

/// 3-D real volume in z/y/x order with isotropic pitch in millimeters.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    pub data: Array3<f32>,
    pub pitch_mm: f64,
}

impl Volume3D {
    pub fn new(data: Array3<f32>, pitch_mm: f64) -> Result<Self> {
        if pitch_mm <= 0.0 {
            return Err(Error::InvalidArgument("pitch_mm must be > 0".into()));
        }
        Ok(Volume3D { data, pitch_mm })
    }
}

fn meta_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".meta");
    std::path::PathBuf::from(s)
}

/// Persist an image as a THZT tensor plus a sidecar carrying the pitch.
pub fn save_image(img: &Image2D, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let flat: Vec<f32> = img.data.iter().copied().collect();
    write_thzt(
        &Tensor::from_real(&[img.height(), img.width()], flat)?,
        path,
    )?;
    write_sidecar(
        &[("pitch_mm".into(), format!("{}", img.pitch_mm))],
        meta_path(path),
    )
}

/// Load an image written by [`save_image`].
pub fn load_image(path: impl AsRef<Path>) -> Result<Image2D> {
    let path = path.as_ref();
    let t = read_thzt(path)?;
    if t.shape().len() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "expected a 2-D tensor in {}, got {:?}",
            path.display(),
            t.shape()
        )));
    }
    let (h, w) = (t.shape()[0], t.shape()[1]);
    let data = Array2::from_shape_vec((h, w), t.as_real()?.to_vec())
        .expect("shape checked");
    let pitch = sidecar_f64(&meta_path(path), "pitch_mm")?;
    Image2D::new(data, pitch)
}

/// Persist a volume as a THZT tensor plus a sidecar carrying the pitch.
pub fn save_volume(vol: &Volume3D, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let flat: Vec<f32> = vol.data.iter().copied().collect();
    let (nz, ny, nx) = vol.data.dim();
    write_thzt(&Tensor::from_real(&[nz, ny, nx], flat)?, path)?;
    write_sidecar(
        &[("pitch_mm".into(), format!("{}", vol.pitch_mm))],
        meta_path(path),
    )
}

/// Load a volume written by [`save_volume`].
pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume3D> {
    let path = path.as_ref();
    let t = read_thzt(path)?;
    if t.shape().len() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "expected a 3-D tensor in {}, got {:?}",
            path.display(),
            t.shape()
        )));
    }
    let (nz, ny, nx) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let data = Array3::from_shape_vec((nz, ny, nx), t.as_real()?.to_vec())
        .expect("shape checked");
    let pitch = sidecar_f64(&meta_path(path), "pitch_mm")?;
    Volume3D::new(data, pitch)
}

fn sidecar_f64(path: &Path, key: &str) -> Result<f64> {
    for (k, v) in read_sidecar(path)? {
        if k == key {
            return v.parse::<f64>().map_err(|_| {
                Error::InvalidArgument(format!("bad {} value {:?} in {}", key, v, path.display()))
            });
        }
    }
    Err(Error::InvalidArgument(format!(
        "missing key {} in {}",
        key,
        path.display()
    )))
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Write a tensor to the THZT container format.
pub fn write_thzt(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(f);
    let mut hdr = Vec::with_capacity(10 + 4 * t.shape.len());
    hdr.extend_from_slice(THZT_MAGIC);
    hdr.extend_from_slice(&THZT_VERSION.to_le_bytes());
    hdr.extend_from_slice(&t.dtype().code().to_le_bytes());
    hdr.extend_from_slice(&(t.shape.len() as u16).to_le_bytes());
    for &d in &t.shape {
        hdr.extend_from_slice(&(d as u32).to_le_bytes());
    }
    w.write_all(&hdr).map_err(|e| io_err(path, e))?;
    match &t.data {
        TensorData::Real32(v) => {
            for &x in v {
                w.write_all(&x.to_le_bytes()).map_err(|e| io_err(path, e))?;
            }
        }
        TensorData::Complex64(v) => {
            for &z in v {
                w.write_all(&z.re.to_le_bytes()).map_err(|e| io_err(path, e))?;
                w.write_all(&z.im.to_le_bytes()).map_err(|e| io_err(path, e))?;
            }
        }
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Read a tensor back from a THZT file. Inverse of [`write_thzt`].
pub fn read_thzt(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = BufReader::new(f);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| io_err(path, e))?;
    if &magic != THZT_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
        });
    }
    let mut u16buf = [0u8; 2];
    r.read_exact(&mut u16buf).map_err(|e| io_err(path, e))?;
    let _version = u16::from_le_bytes(u16buf);
    r.read_exact(&mut u16buf).map_err(|e| io_err(path, e))?;
    let dtype_code = u16::from_le_bytes(u16buf);
    let dtype = match dtype_code {
        0 => Dtype::Real32,
        1 => Dtype::Complex64,
        code => {
            return Err(Error::UnknownDtype {
                path: path.to_path_buf(),
                code,
            })
        }
    };
    r.read_exact(&mut u16buf).map_err(|e| io_err(path, e))?;
    let ndim = u16::from_le_bytes(u16buf) as usize;
    if ndim == 0 || ndim > 4 {
        return Err(Error::ShapeMismatch(format!("bad ndim {} in header", ndim)));
    }
    let mut shape = Vec::with_capacity(ndim);
    let mut u32buf = [0u8; 4];
    for _ in 0..ndim {
        r.read_exact(&mut u32buf).map_err(|e| io_err(path, e))?;
        shape.push(u32::from_le_bytes(u32buf) as usize);
    }
    let n: usize = shape.iter().product();
    let expected = n * dtype.elem_bytes();
    let mut payload = Vec::with_capacity(expected);
    r.read_to_end(&mut payload).map_err(|e| io_err(path, e))?;
    if payload.len() < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            got: payload.len(),
        });
    }
    match dtype {
        Dtype::Real32 => {
            let v: Vec<f32> = payload[..expected]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Tensor::from_real(&shape, v)
        }
        Dtype::Complex64 => {
            let v: Vec<Complex32> = payload[..expected]
                .chunks_exact(8)
                .map(|c| {
                    Complex32::new(
                        f32::from_le_bytes([c[0], c[1], c[2], c[3]]),
                        f32::from_le_bytes([c[4], c[5], c[6], c[7]]),
                    )
                })
                .collect();
            Tensor::from_complex(&shape, v)
        }
    }
}

/// Export an image as 16-bit binary PGM (P5), min-max normalized to
/// [0, 65535]. A constant image maps to all zeros.
pub fn export_pgm(img: &Image2D, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if img.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("image for {}", path.display())));
    }
    let lo = img.data.iter().cloned().fold(f32::INFINITY, f32::min);
    let hi = img.data.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let range = (hi - lo) as f64;
    let f = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(f);
    write!(w, "P5\n{} {}\n65535\n", img.width(), img.height()).map_err(|e| io_err(path, e))?;
    for &v in img.data.iter() {
        let q = if range > 0.0 {
            (((v - lo) as f64 / range) * 65535.0).round() as u16
        } else {
            0
        };
        // PGM 16-bit samples are big-endian per the Netpbm convention
        w.write_all(&q.to_be_bytes()).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Format a value with 6 significant digits, trimming trailing zeros
/// (printf `%g` style).
pub fn format_sig6(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    if !v.is_finite() {
        return format!("{}", v);
    }
    let exp = v.abs().log10().floor() as i32;
    let s = if (-4..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        let s = format!("{:.*}", decimals, v);
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        let mantissa = format!("{:.5}", v / 10f64.powi(exp));
        let m = mantissa.trim_end_matches('0').trim_end_matches('.');
        format!("{}e{}", m, exp)
    };
    s
}

/// Write labeled rows of values as CSV, 6 significant digits per value.
pub fn export_csv(rows: &[(String, Vec<f64>)], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(f);
    writeln!(w, "label,values").map_err(|e| io_err(path, e))?;
    for (label, values) in rows {
        let vals: Vec<String> = values.iter().map(|&v| format_sig6(v)).collect();
        if vals.is_empty() {
            writeln!(w, "{}", label).map_err(|e| io_err(path, e))?;
        } else {
            writeln!(w, "{},{}", label, vals.join(",")).map_err(|e| io_err(path, e))?;
        }
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Write a `key = value` sidecar file next to a THZT artifact.
pub fn write_sidecar(pairs: &[(String, String)], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(f);
    for (k, v) in pairs {
        writeln!(w, "{} = {}", k, v).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Read a `key = value` sidecar file. Lines starting with `#` and blank
/// lines are skipped.
pub fn read_sidecar(path: impl AsRef<Path>) -> Result<Vec<(String, String)>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some((k, v)) = line.split_once('=') {
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
    }
    Ok(out)
}
