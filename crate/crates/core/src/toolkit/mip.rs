use std::str::FromStr;

use crate::error::{invalid, Error, Result};
use crate::Volume;

/// Default display threshold: keeps bone-range intensities only.
pub const DEFAULT_MIP_THRESHOLD: f32 = 0.45;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "x" | "X" => Ok(Axis::X),
            "y" | "Y" => Ok(Axis::Y),
            "z" | "Z" => Ok(Axis::Z),
            other => Err(invalid("axis", format!("unknown axis `{other}` (x|y|z)"))),
        }
    }
}

/// Row-major grayscale image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(0.0, f32::max)
    }

    /// Binary 8-bit portable graymap; values are clamped to `[0, 1]`.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.cols, self.rows).into_bytes();
        out.extend(
            self.data
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
        out
    }
}

/// Maximum intensity projection along `axis` after zeroing values below
/// `threshold`.
pub fn mip(x: &Volume, axis: Axis, threshold: f32) -> Result<Image> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(invalid(
            "threshold",
            format!("must lie in [0, 1], got {threshold}"),
        ));
    }
    let [nz, ny, nx] = x.shape();
    let (rows, cols) = match axis {
        Axis::Z => (ny, nx),
        Axis::Y => (nz, nx),
        Axis::X => (nz, ny),
    };
    let mut data = vec![0.0f32; rows * cols];
    for z in 0..nz {
        for y in 0..ny {
            for xx in 0..nx {
                let v = x.get(z, y, xx);
                if v < threshold {
                    continue;
                }
                let idx = match axis {
                    Axis::Z => y * cols + xx,
                    Axis::Y => z * cols + xx,
                    Axis::X => z * cols + y,
                };
                data[idx] = data[idx].max(v);
            }
        }
    }
    Ok(Image { rows, cols, data })
}
