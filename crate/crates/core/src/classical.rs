//! Total variation and ASD-POCS, the classical sparse-view baseline.
//!
//! The data step is subset SART with the projector's own row and column
//! sums as normalizers; views are split into angularly interleaved subsets
//! (`view % num_subsets`). After each full data pass the volume is clamped to
//! be nonnegative and a fixed number of normalized TV steps are taken, with a
//! step length tied to how far the data pass moved the volume.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{invalid, shape_err, Result};
use crate::tomo::{Geometry, Projector};
use crate::toolkit::io::write_atomic;
use crate::{Sinogram, Volume};

/// Smoothing constant of the isotropic TV norm.
pub const TV_EPSILON: f64 = 1e-8;

/// TV step shrink factor applied when the TV phase outpaces the data phase.
const TV_STEP_REDUCTION: f64 = 0.95;
/// Ratio of TV change to data change above which the TV step shrinks.
const TV_MAX_RATIO: f64 = 0.95;

fn forward_differences(x: &[f64], shape: [usize; 3]) -> [Vec<f64>; 3] {
    let [nz, ny, nx] = shape;
    let mut d = [vec![0.0; x.len()], vec![0.0; x.len()], vec![0.0; x.len()]];
    for z in 0..nz {
        for y in 0..ny {
            for xx in 0..nx {
                let i = (z * ny + y) * nx + xx;
                if xx + 1 < nx {
                    d[0][i] = x[i + 1] - x[i];
                }
                if y + 1 < ny {
                    d[1][i] = x[i + nx] - x[i];
                }
                if z + 1 < nz {
                    d[2][i] = x[i + nx * ny] - x[i];
                }
            }
        }
    }
    d
}

fn magnitudes(d: &[Vec<f64>; 3]) -> Vec<f64> {
    (0..d[0].len())
        .map(|i| {
            (d[0][i] * d[0][i] + d[1][i] * d[1][i] + d[2][i] * d[2][i] + TV_EPSILON * TV_EPSILON)
                .sqrt()
        })
        .collect()
}

/// Smoothed isotropic TV: `Σ sqrt(Δx² + Δy² + Δz² + ε²)` with forward
/// differences that vanish across the far boundary.
pub fn total_variation(x: &Volume) -> f64 {
    let v: Vec<f64> = x.data().iter().map(|&a| a as f64).collect();
    magnitudes(&forward_differences(&v, x.shape())).iter().sum()
}

/// Gradient of [`total_variation`] with respect to every voxel.
pub fn tv_gradient(x: &Volume) -> Vec<f64> {
    let shape = x.shape();
    let [_, ny, nx] = shape;
    let v: Vec<f64> = x.data().iter().map(|&a| a as f64).collect();
    let d = forward_differences(&v, shape);
    let m = magnitudes(&d);
    let strides = [1, nx, nx * ny];
    let mut g = vec![0.0; v.len()];
    for i in 0..v.len() {
        for a in 0..3 {
            let q = d[a][i] / m[i];
            if q != 0.0 {
                g[i] -= q;
                g[i + strides[a]] += q;
            }
        }
    }
    g
}

/// One steepest-descent step on TV along the unit-norm gradient direction.
pub fn tv_descent_step(x: &Volume, step: f64) -> Result<Volume> {
    if step.is_nan() || step <= 0.0 {
        return Err(invalid("step", format!("must be positive, got {step}")));
    }
    Ok(tv_step_unchecked(x, step))
}

fn tv_step_unchecked(x: &Volume, step: f64) -> Volume {
    let g = tv_gradient(x);
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return x.clone();
    }
    let scale = step / norm;
    let data = x
        .data()
        .iter()
        .zip(&g)
        .map(|(&a, &d)| (a as f64 - scale * d) as f32)
        .collect();
    Volume::new(x.shape(), data).expect("same shape")
}

#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AsdPocsConfig {
    pub iterations: usize,
    pub num_subsets: usize,
    /// Zero turns the method into plain subset SART.
    pub tv_steps_per_iter: usize,
    /// Initial SART relaxation λ.
    pub lambda: f64,
    /// Multiplier applied to λ after every iteration.
    pub lambda_decay: f64,
    /// Initial TV step length as a fraction of the data-update magnitude.
    pub tv_fraction: f64,
    pub nonnegativity: bool,
}

impl Default for AsdPocsConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            num_subsets: 30,
            tv_steps_per_iter: 50,
            lambda: 1.0,
            lambda_decay: 0.995,
            tv_fraction: 0.2,
            nonnegativity: true,
        }
    }
}

impl AsdPocsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(invalid("iterations", "must be at least 1"));
        }
        if self.num_subsets == 0 {
            return Err(invalid("num_subsets", "must be at least 1"));
        }
        if !(self.lambda > 0.0 && self.lambda < 2.0) {
            return Err(invalid(
                "lambda",
                format!("must lie in (0, 2), got {}", self.lambda),
            ));
        }
        if !(self.lambda_decay > 0.0 && self.lambda_decay <= 1.0) {
            return Err(invalid(
                "lambda_decay",
                format!("must lie in (0, 1], got {}", self.lambda_decay),
            ));
        }
        if !(self.tv_fraction >= 0.0 && self.tv_fraction.is_finite()) {
            return Err(invalid(
                "tv_fraction",
                format!("must be nonnegative, got {}", self.tv_fraction),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AsdPocsRecord {
    pub iteration: usize,
    /// `‖A x − y‖₂` at the end of the iteration.
    pub data_residual: f64,
    pub tv_value: f64,
    /// `‖A x − y‖₂` right after the data pass, before the TV steps.
    #[serde(skip)]
    pub data_phase_residual: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AsdPocsTrace {
    pub records: Vec<AsdPocsRecord>,
}

impl AsdPocsTrace {
    /// CSV with columns `iteration,data_residual,tv_value`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.records {
            out.serialize(r)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        write_atomic(path, &buf)
    }
}

/// Subset SART engine with precomputed normalizers.
struct Sart {
    proj: Projector,
    subsets: Vec<Vec<usize>>,
    /// Per subset: `1 / ray weight sum` for each `(view, bin)`, zero for empty rays.
    inv_rays: Vec<Vec<f32>>,
    /// Per subset: `1 / pixel weight sum` per pixel, zero where no ray passes.
    inv_pixels: Vec<Vec<f32>>,
}

fn reciprocal(v: f64) -> f32 {
    if v > 1e-12 {
        (1.0 / v) as f32
    } else {
        0.0
    }
}

impl Sart {
    fn new(g: &Geometry, num_subsets: usize) -> Self {
        let proj = Projector::new(g);
        let views = g.num_views();
        let bins = g.num_det();
        let k = num_subsets.min(views);
        let subsets: Vec<Vec<usize>> = (0..k).map(|s| (s..views).step_by(k).collect()).collect();
        let rays = proj.ray_sums();
        let inv_rays = subsets
            .iter()
            .map(|vs| {
                vs.iter()
                    .flat_map(|&v| {
                        rays[v * bins..(v + 1) * bins]
                            .iter()
                            .map(|&r| reciprocal(r))
                    })
                    .collect()
            })
            .collect();
        let inv_pixels = subsets
            .iter()
            .map(|vs| proj.pixel_sums(vs).into_iter().map(reciprocal).collect())
            .collect();
        Self {
            proj,
            subsets,
            inv_rays,
            inv_pixels,
        }
    }

    /// One pass over every subset, in place.
    fn sweep(&self, x: &mut Volume, y: &Sinogram, lambda: f32) {
        let g = self.proj.geometry();
        let [slices, views, bins] = g.sinogram_shape();
        let [_, rows, cols] = g.volume_shape();
        let n = rows * cols;
        let mut sino = Vec::new();
        let mut update = vec![0.0f32; n];
        for (s, vs) in self.subsets.iter().enumerate() {
            sino.resize(vs.len() * bins, 0.0);
            for z in 0..slices {
                let img = &mut x.data_mut()[z * n..(z + 1) * n];
                self.proj.project_slice_views(img, vs, &mut sino);
                let meas = &y.data()[z * views * bins..(z + 1) * views * bins];
                for (k, &v) in vs.iter().enumerate() {
                    let row = &mut sino[k * bins..(k + 1) * bins];
                    let inv = &self.inv_rays[s][k * bins..(k + 1) * bins];
                    for ((r, &m), &w) in
                        row.iter_mut().zip(&meas[v * bins..(v + 1) * bins]).zip(inv)
                    {
                        *r = (m - *r) * w;
                    }
                }
                update.iter_mut().for_each(|u| *u = 0.0);
                self.proj.back_project_slice_views(&sino, vs, &mut update);
                for ((p, &u), &w) in img.iter_mut().zip(&update).zip(&self.inv_pixels[s]) {
                    *p += lambda * w * u;
                }
            }
        }
    }

    fn residual(&self, x: &Volume, y: &Sinogram) -> f64 {
        let ax = self.proj.project_raw(x.data());
        ax.iter()
            .zip(y.data())
            .map(|(&a, &b)| {
                let d = a as f64 - b as f64;
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }
}

fn clamp_nonnegative(x: &mut Volume) {
    x.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
}

fn distance(a: &Volume, b: &Volume) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&p, &q)| {
            let d = p as f64 - q as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

fn check_measurements(y: &Sinogram, g: &Geometry) -> Result<()> {
    g.validate()?;
    if y.shape() != g.sinogram_shape() {
        return Err(shape_err(
            "asd_pocs",
            format!(
                "sinogram {:?} does not match geometry {:?}",
                y.shape(),
                g.sinogram_shape()
            ),
        ));
    }
    Ok(())
}

/// ASD-POCS from a zero initial volume.
pub fn asd_pocs(y: &Sinogram, g: &Geometry, cfg: &AsdPocsConfig) -> Result<(Volume, AsdPocsTrace)> {
    asd_pocs_with(y, g, cfg, |_, _| {})
}

/// [`asd_pocs`] with a callback invoked after every iteration with the
/// iteration index and the current volume.
pub fn asd_pocs_with(
    y: &Sinogram,
    g: &Geometry,
    cfg: &AsdPocsConfig,
    mut on_iteration: impl FnMut(usize, &Volume),
) -> Result<(Volume, AsdPocsTrace)> {
    cfg.validate()?;
    check_measurements(y, g)?;
    let sart = Sart::new(g, cfg.num_subsets);
    let mut x = Volume::zeros(g.volume_shape());
    let mut trace = AsdPocsTrace::default();
    let mut lambda = cfg.lambda;
    let mut reduction = 1.0;
    for it in 0..cfg.iterations {
        let before = x.clone();
        sart.sweep(&mut x, y, lambda as f32);
        if cfg.nonnegativity {
            clamp_nonnegative(&mut x);
        }
        let data_phase_residual = sart.residual(&x, y);
        if cfg.tv_steps_per_iter > 0 {
            let dp = distance(&x, &before);
            let step = cfg.tv_fraction * dp * reduction;
            if step > 0.0 {
                let start = x.clone();
                for _ in 0..cfg.tv_steps_per_iter {
                    x = tv_step_unchecked(&x, step);
                }
                if distance(&x, &start) > TV_MAX_RATIO * dp {
                    reduction *= TV_STEP_REDUCTION;
                }
                if cfg.nonnegativity {
                    clamp_nonnegative(&mut x);
                }
            }
        }
        let data_residual = if cfg.tv_steps_per_iter > 0 {
            sart.residual(&x, y)
        } else {
            data_phase_residual
        };
        trace.records.push(AsdPocsRecord {
            iteration: it + 1,
            data_residual,
            tv_value: total_variation(&x),
            data_phase_residual,
        });
        on_iteration(it + 1, &x);
        lambda *= cfg.lambda_decay;
    }
    Ok((x, trace))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SartConfig {
    pub iterations: usize,
    pub num_subsets: usize,
    pub lambda: f64,
    pub lambda_decay: f64,
    pub nonnegativity: bool,
}

impl Default for SartConfig {
    fn default() -> Self {
        let a = AsdPocsConfig::default();
        Self {
            iterations: a.iterations,
            num_subsets: a.num_subsets,
            lambda: a.lambda,
            lambda_decay: a.lambda_decay,
            nonnegativity: a.nonnegativity,
        }
    }
}

/// Plain subset SART from a zero initial volume.
pub fn sart(y: &Sinogram, g: &Geometry, cfg: &SartConfig) -> Result<Volume> {
    AsdPocsConfig {
        iterations: cfg.iterations,
        num_subsets: cfg.num_subsets,
        tv_steps_per_iter: 0,
        lambda: cfg.lambda,
        lambda_decay: cfg.lambda_decay,
        tv_fraction: 0.0,
        nonnegativity: cfg.nonnegativity,
    }
    .validate()?;
    check_measurements(y, g)?;
    let engine = Sart::new(g, cfg.num_subsets);
    let mut x = Volume::zeros(g.volume_shape());
    let mut lambda = cfg.lambda;
    for _ in 0..cfg.iterations {
        engine.sweep(&mut x, y, lambda as f32);
        if cfg.nonnegativity {
            clamp_nonnegative(&mut x);
        }
        lambda *= cfg.lambda_decay;
    }
    Ok(x)
}
