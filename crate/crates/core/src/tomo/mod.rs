//! Parallel-beam CT: forward projector, matched backprojector and FBP.
//!
//! Each axial slice is an independent 2D Radon problem. A ray at angle `θ`
//! and detector offset `s` is the line `s·(cos θ, sin θ) + t·(−sin θ, cos θ)`;
//! it is sampled at unit steps in `t` with bilinear interpolation, and only
//! samples inside the inscribed circle of the slice are kept.

mod fbp;
mod projector;

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::{Sinogram, Volume};

pub use fbp::RampFilter;
pub use projector::Projector;

/// Parallel-beam acquisition geometry for a `(slices, rows, cols)` volume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    angles: Vec<f64>,
    num_det: usize,
    det_spacing: f64,
    num_slices: usize,
    rows: usize,
    cols: usize,
}

impl Geometry {
    /// `num_views` angles uniform over `[0, π)` and a unit-spaced detector
    /// just wide enough to cover the slice diagonal.
    pub fn parallel(volume_shape: [usize; 3], num_views: usize) -> Result<Self> {
        let num_det = min_detector_bins(volume_shape[1], volume_shape[2], 1.0);
        Self::new(volume_shape, uniform_angles(num_views), num_det, 1.0)
    }

    pub fn new(
        volume_shape: [usize; 3],
        angles: Vec<f64>,
        num_det: usize,
        det_spacing: f64,
    ) -> Result<Self> {
        let [num_slices, rows, cols] = volume_shape;
        let g = Self {
            angles,
            num_det,
            det_spacing,
            num_slices,
            rows,
            cols,
        };
        g.validate()?;
        Ok(g)
    }

    /// Re-checks every invariant (used after deserialization).
    pub fn validate(&self) -> Result<()> {
        if self.angles.is_empty() {
            return Err(invalid("num_views", "at least one view is required"));
        }
        if self.num_slices == 0 || self.rows == 0 || self.cols == 0 {
            return Err(invalid("volume_shape", "all extents must be at least 1"));
        }
        if !(self.det_spacing.is_finite() && self.det_spacing > 0.0) {
            return Err(invalid(
                "det_spacing",
                format!("must be positive, got {}", self.det_spacing),
            ));
        }
        if self.angles.iter().any(|a| !(0.0..PI).contains(a)) {
            return Err(invalid("angles", "every angle must lie in [0, π)"));
        }
        if self.angles.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid("angles", "angles must be strictly increasing"));
        }
        let diagonal = ((self.rows * self.rows + self.cols * self.cols) as f64).sqrt();
        if (self.num_det as f64) * self.det_spacing < diagonal {
            return Err(invalid(
                "num_det",
                format!(
                    "{} bins of width {} do not cover the slice diagonal {diagonal:.2}",
                    self.num_det, self.det_spacing
                ),
            ));
        }
        Ok(())
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    pub fn num_views(&self) -> usize {
        self.angles.len()
    }

    pub fn num_det(&self) -> usize {
        self.num_det
    }

    pub fn det_spacing(&self) -> f64 {
        self.det_spacing
    }

    pub fn num_slices(&self) -> usize {
        self.num_slices
    }

    pub fn volume_shape(&self) -> [usize; 3] {
        [self.num_slices, self.rows, self.cols]
    }

    pub fn sinogram_shape(&self) -> [usize; 3] {
        [self.num_slices, self.angles.len(), self.num_det]
    }

    /// Radius of the inscribed field of view, in voxels.
    pub fn fov_radius(&self) -> f64 {
        self.rows.min(self.cols) as f64 / 2.0
    }

    /// Signed offset of detector bin `b` from the rotation axis.
    pub fn bin_offset(&self, b: usize) -> f64 {
        (b as f64 - (self.num_det as f64 - 1.0) / 2.0) * self.det_spacing
    }
}

/// `n` angles `k·π/n`, `k = 0..n`.
pub fn uniform_angles(n: usize) -> Vec<f64> {
    (0..n).map(|k| k as f64 * PI / n as f64).collect()
}

/// Smallest bin count whose detector spans the diagonal of a `rows x cols` slice.
pub fn min_detector_bins(rows: usize, cols: usize, det_spacing: f64) -> usize {
    (((rows * rows + cols * cols) as f64).sqrt() / det_spacing).ceil() as usize
}

pub fn forward_project(x: &Volume, g: &Geometry) -> Result<Sinogram> {
    Projector::new(g).forward(x)
}

pub fn back_project(y: &Sinogram, g: &Geometry) -> Result<Volume> {
    Projector::new(g).adjoint(y)
}

pub fn fbp(y: &Sinogram, g: &Geometry, filter: RampFilter) -> Result<Volume> {
    Projector::new(g).fbp(y, filter)
}
