//! Synthetic 3-D voxel objects and their geometric ground truths:
//! binary silhouettes per view angle and material path lengths along
//! parallel rays.

use std::path::Path;

use ndarray::{Array2, Array3};
use rayon::prelude::*;

use crate::physics::MaterialSpec;
use crate::tensorio::{self, Image2D, Tensor, Volume3D};
use crate::{Error, Result};

/// Voxel phantom: occupancy in [0,1] on a z/y/x grid with isotropic
/// pitch (default 0.25 mm, the scanner step size), plus its material.
#[derive(Debug, Clone)]
pub struct Phantom {
    pub grid: Volume3D,
    pub material: MaterialSpec,
}

pub const DEFAULT_PITCH_MM: f64 = 0.25;

/// Geometric primitives, all in voxel coordinates.
#[derive(Debug, Clone)]
pub enum Primitive {
    Sphere {
        center: [f64; 3],
        radius: f64,
    },
    Box {
        min: [f64; 3],
        max: [f64; 3],
    },
    Cylinder {
        center_xy: [f64; 2],
        radius: f64,
        z_min: f64,
        z_max: f64,
    },
    /// A 5x7 bitmap glyph in the x/z plane, extruded along y.
    ExtrudedGlyph {
        ch: char,
        /// Lower-left corner of the glyph box, [z, y, x].
        origin: [f64; 3],
        /// Voxels per font cell.
        scale: f64,
        thickness: f64,
    },
}

// 5x7 bitmap font rows, top to bottom, 5 bits each (MSB = left column).
fn glyph_bitmap(ch: char) -> Option<[u8; 7]> {
    match ch.to_ascii_uppercase() {
        'Y' => Some([0b10001, 0b10001, 0b01010, 0b00100, 0b00100, 0b00100, 0b00100]),
        'R' => Some([0b11110, 0b10001, 0b10001, 0b11110, 0b10100, 0b10010, 0b10001]),
        'G' => Some([0b01110, 0b10001, 0b10000, 0b10111, 0b10001, 0b10001, 0b01110]),
        'T' => Some([0b11111, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100]),
        'H' => Some([0b10001, 0b10001, 0b10001, 0b11111, 0b10001, 0b10001, 0b10001]),
        'Z' => Some([0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b10000, 0b11111]),
        'O' => Some([0b01110, 0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01110]),
        'X' => Some([0b10001, 0b01010, 0b00100, 0b00100, 0b00100, 0b01010, 0b10001]),
        _ => None,
    }
}

impl Primitive {
    /// Bounding box in voxel coordinates, [z, y, x] min/max corners.
    fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        match self {
            Primitive::Sphere { center, radius } => (
                [center[0] - radius, center[1] - radius, center[2] - radius],
                [center[0] + radius, center[1] + radius, center[2] + radius],
            ),
            Primitive::Box { min, max } => (*min, *max),
            Primitive::Cylinder {
                center_xy,
                radius,
                z_min,
                z_max,
            } => (
                [*z_min, center_xy[0] - radius, center_xy[1] - radius],
                [*z_max, center_xy[0] + radius, center_xy[1] + radius],
            ),
            Primitive::ExtrudedGlyph {
                origin,
                scale,
                thickness,
                ..
            } => (
                *origin,
                [
                    origin[0] + 7.0 * scale,
                    origin[1] + thickness,
                    origin[2] + 5.0 * scale,
                ],
            ),
        }
    }

    fn contains(&self, z: f64, y: f64, x: f64) -> bool {
        match self {
            Primitive::Sphere { center, radius } => {
                let d2 = (z - center[0]).powi(2) + (y - center[1]).powi(2) + (x - center[2]).powi(2);
                d2 < radius * radius
            }
            Primitive::Box { min, max } => {
                z >= min[0] && z <= max[0] && y >= min[1] && y <= max[1] && x >= min[2] && x <= max[2]
            }
            Primitive::Cylinder {
                center_xy,
                radius,
                z_min,
                z_max,
            } => {
                let d2 = (y - center_xy[0]).powi(2) + (x - center_xy[1]).powi(2);
                z >= *z_min && z <= *z_max && d2 < radius * radius
            }
            Primitive::ExtrudedGlyph {
                ch,
                origin,
                scale,
                thickness,
            } => {
                let bitmap = match glyph_bitmap(*ch) {
                    Some(b) => b,
                    None => return false,
                };
                if y < origin[1] || y > origin[1] + thickness {
                    return false;
                }
                let col = ((x - origin[2]) / scale).floor();
                let row = ((z - origin[0]) / scale).floor();
                if !(0.0..5.0).contains(&col) || !(0.0..7.0).contains(&row) {
                    return false;
                }
                // font rows are stored top-to-bottom; z grows upward
                let bits = bitmap[6 - row as usize];
                bits & (1 << (4 - col as usize)) != 0
            }
        }
    }
}

/// Rasterize a primitive into a fresh phantom grid. Occupancy is 1 at
/// voxel centers inside the primitive, 0 outside, no antialiasing.
pub fn make_primitive(
    shape: (usize, usize, usize),
    prim: &Primitive,
    material: MaterialSpec,
    pitch_mm: f64,
) -> Result<Phantom> {
    if let Primitive::ExtrudedGlyph { ch, .. } = prim {
        if glyph_bitmap(*ch).is_none() {
            return Err(Error::InvalidArgument(format!(
                "no bitmap for glyph {:?}",
                ch
            )));
        }
    }
    let (nz, ny, nx) = shape;
    let (lo, hi) = prim.bounds();
    let dims = [nz as f64, ny as f64, nx as f64];
    for a in 0..3 {
        if lo[a] < -0.5 || hi[a] > dims[a] - 0.5 {
            return Err(Error::InvalidArgument(format!(
                "primitive exceeds grid: axis {} spans [{}, {}] in a {}-voxel grid",
                a, lo[a], hi[a], dims[a]
            )));
        }
    }
    let mut grid = Array3::<f32>::zeros((nz, ny, nx));
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if prim.contains(z as f64, y as f64, x as f64) {
                    grid[(z, y, x)] = 1.0;
                }
            }
        }
    }
    Ok(Phantom {
        grid: Volume3D::new(grid, pitch_mm)?,
        material,
    })
}

/// Voxel-wise union (max) of two phantoms on the same grid and material.
pub fn csg_union(a: &Phantom, b: &Phantom) -> Result<Phantom> {
    if a.grid.data.shape() != b.grid.data.shape() {
        return Err(Error::ShapeMismatch(format!(
            "phantom grids differ: {:?} vs {:?}",
            a.grid.data.shape(),
            b.grid.data.shape()
        )));
    }
    if a.material.name != b.material.name {
        return Err(Error::InvalidArgument(
            "cannot union phantoms of different materials".into(),
        ));
    }
    let mut grid = a.grid.data.clone();
    grid.zip_mut_with(&b.grid.data, |u, &v| *u = u.max(v));
    Ok(Phantom {
        grid: Volume3D::new(grid, a.grid.pitch_mm)?,
        material: a.material.clone(),
    })
}

impl Phantom {
    pub fn shape(&self) -> (usize, usize, usize) {
        let s = self.grid.data.shape();
        (s[0], s[1], s[2])
    }

    pub fn pitch_mm(&self) -> f64 {
        self.grid.pitch_mm
    }

    /// Bilinear occupancy sample in the x/y plane of slice `z`.
    fn sample(&self, z: usize, y: f64, x: f64) -> f64 {
        let (_, ny, nx) = self.shape();
        if y < 0.0 || x < 0.0 || y > (ny - 1) as f64 || x > (nx - 1) as f64 {
            return 0.0;
        }
        let y0 = y.floor() as usize;
        let x0 = x.floor() as usize;
        let y1 = (y0 + 1).min(ny - 1);
        let x1 = (x0 + 1).min(nx - 1);
        let fy = y - y0 as f64;
        let fx = x - x0 as f64;
        let g = &self.grid.data;
        let v00 = g[(z, y0, x0)] as f64;
        let v01 = g[(z, y0, x1)] as f64;
        let v10 = g[(z, y1, x0)] as f64;
        let v11 = g[(z, y1, x1)] as f64;
        v00 * (1.0 - fy) * (1.0 - fx) + v01 * (1.0 - fy) * fx + v10 * fy * (1.0 - fx) + v11 * fy * fx
    }

    /// Material path length in mm along the parallel ray of view angle
    /// `angle_deg` hitting detector cell (`row_z`, `col_x`). The ray is
    /// marched at half-pitch steps with occupancy-weighted accumulation.
    pub fn path_length(&self, angle_deg: f64, row_z: usize, col_x: usize) -> f64 {
        let (nz, ny, nx) = self.shape();
        assert!(row_z < nz && col_x < nx, "detector index out of range");
        let theta = angle_deg.to_radians();
        let (sin_t, cos_t) = (theta.sin(), theta.cos());
        let cx = (nx - 1) as f64 / 2.0;
        let cy = (ny - 1) as f64 / 2.0;
        // detector offset axis is perpendicular to the ray direction
        let u = col_x as f64 - cx;
        let (ox, oy) = (-u * sin_t, u * cos_t);
        let half_diag = ((nx * nx + ny * ny) as f64).sqrt() / 2.0 + 1.0;
        let step_vox = 0.5;
        let n_steps = (2.0 * half_diag / step_vox).ceil() as usize;
        let mut acc = 0.0;
        for s in 0..n_steps {
            let t = -half_diag + (s as f64 + 0.5) * step_vox;
            let x = cx + ox + t * cos_t;
            let y = cy + oy + t * sin_t;
            acc += self.sample(row_z, y, x) * step_vox;
        }
        acc * self.pitch_mm()
    }

    /// Binary silhouette of the phantom seen from `angle_deg`, on the
    /// height x horizontal scan grid.
    pub fn ground_truth_projection(&self, angle_deg: f64) -> Result<Image2D> {
        if !(0.0..360.0).contains(&angle_deg) {
            return Err(Error::InvalidArgument(format!(
                "angle {} outside [0, 360)",
                angle_deg
            )));
        }
        let (nz, _, nx) = self.shape();
        let rows: Vec<Vec<f32>> = (0..nz)
            .into_par_iter()
            .map(|z| {
                (0..nx)
                    .map(|x| {
                        if self.path_length(angle_deg, z, x) > 0.0 {
                            1.0
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect();
        let mut img = Array2::<f32>::zeros((nz, nx));
        for (z, row) in rows.into_iter().enumerate() {
            for (x, v) in row.into_iter().enumerate() {
                img[(z, x)] = v;
            }
        }
        Image2D::new(img, self.pitch_mm())
    }

    /// Persist as a THZT volume plus a key-value sidecar at
    /// `<path>.meta` carrying pitch and material name.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        tensorio::write_thzt(&Tensor::from_array3(&self.grid.data), path)?;
        let meta = sidecar_path(path);
        tensorio::write_sidecar(
            &[
                ("pitch_mm".into(), format!("{}", self.pitch_mm())),
                ("material".into(), self.material.name.clone()),
            ],
            meta,
        )
    }

    /// Load a phantom saved with [`Phantom::save`]. Only the built-in
    /// material names are recognized; unknown names fall back to HIPS.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let grid = tensorio::read_thzt(path)?.to_array3()?;
        let mut pitch = DEFAULT_PITCH_MM;
        let mut material = MaterialSpec::hips();
        if let Ok(pairs) = tensorio::read_sidecar(sidecar_path(path)) {
            for (k, v) in pairs {
                match k.as_str() {
                    "pitch_mm" => {
                        pitch = v.parse().map_err(|_| {
                            Error::InvalidArgument(format!("bad pitch_mm {:?}", v))
                        })?
                    }
                    "material" if v == "air" => material = MaterialSpec::air(),
                    _ => {}
                }
            }
        }
        if grid.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::InvalidArgument(
                "phantom occupancy outside [0,1]".into(),
            ));
        }
        Ok(Phantom {
            grid: Volume3D::new(grid, pitch)?,
            material,
        })
    }
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".meta");
    std::path::PathBuf::from(s)
}
