use crate::error::{invalid, Result};
use crate::Volume;

/// One ellipsoid of the phantom, in normalized `[-1, 1]³` coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipsoid {
    pub value: f64,
    /// Semi-axes along x, y, z.
    pub axes: [f64; 3],
    /// Center (x, y, z).
    pub center: [f64; 3],
    /// Rotation about the z axis, degrees.
    pub phi_deg: f64,
}

impl Ellipsoid {
    const fn new(value: f64, axes: [f64; 3], center: [f64; 3], phi_deg: f64) -> Self {
        Self {
            value,
            axes,
            center,
            phi_deg,
        }
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        let (sin, cos) = self.phi_deg.to_radians().sin_cos();
        let (dx, dy, dz) = (
            p[0] - self.center[0],
            p[1] - self.center[1],
            p[2] - self.center[2],
        );
        let u = cos * dx + sin * dy;
        let v = -sin * dx + cos * dy;
        let [a, b, c] = self.axes;
        (u / a).powi(2) + (v / b).powi(2) + (dz / c).powi(2) <= 1.0
    }
}

/// Ten-ellipsoid 3D Shepp-Logan geometry (Kak–Slaney layout) with the
/// high-contrast intensities, so that every tissue survives clamping to [0, 1].
pub const SHEPP_LOGAN_3D: [Ellipsoid; 10] = [
    Ellipsoid::new(1.0, [0.6900, 0.920, 0.810], [0.0, 0.0, 0.0], 0.0),
    Ellipsoid::new(-0.8, [0.6624, 0.874, 0.780], [0.0, -0.0184, 0.0], 0.0),
    Ellipsoid::new(-0.2, [0.1100, 0.310, 0.220], [0.22, 0.0, 0.0], -18.0),
    Ellipsoid::new(-0.2, [0.1600, 0.410, 0.280], [-0.22, 0.0, 0.0], 18.0),
    Ellipsoid::new(0.1, [0.2100, 0.250, 0.410], [0.0, 0.35, -0.15], 0.0),
    Ellipsoid::new(0.1, [0.0460, 0.046, 0.050], [0.0, 0.1, 0.25], 0.0),
    Ellipsoid::new(0.1, [0.0460, 0.046, 0.050], [0.0, -0.1, 0.25], 0.0),
    Ellipsoid::new(0.1, [0.0460, 0.023, 0.050], [-0.08, -0.605, 0.0], 0.0),
    Ellipsoid::new(0.1, [0.0230, 0.023, 0.020], [0.0, -0.606, 0.0], 0.0),
    Ellipsoid::new(0.1, [0.0230, 0.046, 0.020], [0.06, -0.605, 0.0], 0.0),
];

/// Normalized coordinate of voxel center `i` on an axis of length `n`.
pub fn voxel_coordinate(i: usize, n: usize) -> f64 {
    -1.0 + (2 * i + 1) as f64 / n as f64
}

/// Rasterizes a list of ellipsoids (point-sampled at voxel centers), summing
/// overlapping intensities and clamping to `[0, 1]`.
pub fn rasterize(ellipsoids: &[Ellipsoid], shape: [usize; 3]) -> Volume {
    let [nz, ny, nx] = shape;
    Volume::from_fn(shape, |z, y, x| {
        let p = [
            voxel_coordinate(x, nx),
            voxel_coordinate(y, ny),
            voxel_coordinate(z, nz),
        ];
        let v: f64 = ellipsoids
            .iter()
            .filter(|e| e.contains(p))
            .map(|e| e.value)
            .sum();
        v.clamp(0.0, 1.0) as f32
    })
}

pub fn shepp_logan_3d(size: usize) -> Result<Volume> {
    if size < 8 {
        return Err(invalid(
            "size",
            format!("phantom size must be at least 8, got {size}"),
        ));
    }
    Ok(rasterize(&SHEPP_LOGAN_3D, [size; 3]))
}
