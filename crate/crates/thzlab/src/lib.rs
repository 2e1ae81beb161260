//! Desk-scale terahertz computational imaging laboratory.
//!
//! The crate simulates raster-scanned THz time-domain-spectroscopy CT
//! measurements of synthetic voxel phantoms, extracts physics-guided
//! spectral features (Time-max plus amplitude/phase images at curated
//! water-absorption bands), and reconstructs objects through several
//! routes: filtered back-projection and SART tomography, L1 compressive
//! sensing, off-axis holography with angular-spectrum propagation, and a
//! small subspace-attention fusion restoration network trained on the
//! simulator's own output.

pub mod cs;
pub mod holo;
pub mod metrics;
pub mod nn;
pub mod phantom;
pub mod physics;
pub mod sim;
pub mod spectral;
pub mod tensorio;
pub mod tomo;

mod error;

pub use error::{Error, Result};
