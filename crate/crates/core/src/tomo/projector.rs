use crate::autodiff::LinearOperator;
use crate::error::{shape_err, Result};
use crate::tomo::Geometry;
use crate::{Real, Sinogram, Volume};

/// Sparse per-slice system matrix, one row per `(view, bin)` ray.
///
/// Forward projection multiplies by the rows; backprojection scatters the
/// same weights, so the two are an exact transpose pair.
#[derive(Clone, Debug)]
pub struct Projector {
    geom: Geometry,
    offsets: Vec<usize>,
    pixels: Vec<u32>,
    weights: Vec<f64>,
    weights_f32: Vec<f32>,
}

impl Projector {
    pub fn new(geom: &Geometry) -> Self {
        let [_, rows, cols] = geom.volume_shape();
        let radius = geom.fov_radius();
        let r2 = radius * radius;
        let reach = radius.ceil() as i64;
        let (cx, cy) = ((cols as f64 - 1.0) / 2.0, (rows as f64 - 1.0) / 2.0);

        let mut offsets = Vec::with_capacity(geom.num_views() * geom.num_det() + 1);
        let mut pixels = Vec::new();
        let mut weights = Vec::new();
        let mut ray: Vec<(u32, f64)> = Vec::new();
        offsets.push(0);
        for &theta in geom.angles() {
            let (sin, cos) = theta.sin_cos();
            for b in 0..geom.num_det() {
                let s = geom.bin_offset(b);
                ray.clear();
                if s * s <= r2 {
                    for k in -reach..=reach {
                        let t = k as f64;
                        if s * s + t * t > r2 {
                            continue;
                        }
                        let px = s * cos - t * sin + cx;
                        let py = s * sin + t * cos + cy;
                        push_bilinear(&mut ray, px, py, rows, cols);
                    }
                }
                ray.sort_unstable_by_key(|e| e.0);
                let mut last: Option<u32> = None;
                for &(p, w) in &ray {
                    if last == Some(p) {
                        *weights.last_mut().unwrap() += w;
                    } else {
                        pixels.push(p);
                        weights.push(w);
                        last = Some(p);
                    }
                }
                offsets.push(pixels.len());
            }
        }
        let weights_f32 = weights.iter().map(|&w| w as f32).collect();
        Self {
            geom: geom.clone(),
            offsets,
            pixels,
            weights,
            weights_f32,
        }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    fn slice_len(&self) -> usize {
        let [_, rows, cols] = self.geom.volume_shape();
        rows * cols
    }

    /// 1 on voxels touched by at least one ray, 0 elsewhere. The measurements
    /// carry no information about the voxels outside.
    pub fn support_mask(&self) -> Volume {
        let [d, h, w] = self.geom.volume_shape();
        let mut slice = vec![0.0f32; h * w];
        for &p in &self.pixels {
            slice[p as usize] = 1.0;
        }
        let data = (0..d).flat_map(|_| slice.iter().copied()).collect();
        Volume::new([d, h, w], data).expect("consistent shape")
    }

    fn row(&self, ray: usize) -> std::ops::Range<usize> {
        self.offsets[ray]..self.offsets[ray + 1]
    }

    /// Projects one slice onto the listed views; `out` is `views.len() x bins`.
    pub fn project_slice_views<T: Real>(&self, img: &[T], views: &[usize], out: &mut [T]) {
        let bins = self.geom.num_det();
        let w = T::pick(&self.weights_f32, &self.weights);
        for (k, &v) in views.iter().enumerate() {
            for b in 0..bins {
                let r = self.row(v * bins + b);
                let mut acc = T::zero();
                for (&p, &wt) in self.pixels[r.clone()].iter().zip(&w[r]) {
                    acc += wt * img[p as usize];
                }
                out[k * bins + b] = acc;
            }
        }
    }

    /// Adds the backprojection of `sino` (`views.len() x bins`) into `img`.
    pub fn back_project_slice_views<T: Real>(&self, sino: &[T], views: &[usize], img: &mut [T]) {
        let bins = self.geom.num_det();
        let w = T::pick(&self.weights_f32, &self.weights);
        for (k, &v) in views.iter().enumerate() {
            for b in 0..bins {
                let val = sino[k * bins + b];
                if val == T::zero() {
                    continue;
                }
                let r = self.row(v * bins + b);
                for (&p, &wt) in self.pixels[r.clone()].iter().zip(&w[r]) {
                    img[p as usize] += wt * val;
                }
            }
        }
    }

    fn all_views(&self) -> Vec<usize> {
        (0..self.geom.num_views()).collect()
    }

    /// Projects a flat `(slices, rows, cols)` array.
    pub fn project_raw<T: Real>(&self, x: &[T]) -> Vec<T> {
        let [slices, views, bins] = self.geom.sinogram_shape();
        let n = self.slice_len();
        assert_eq!(
            x.len(),
            slices * n,
            "volume length does not match the geometry"
        );
        let all = self.all_views();
        let mut out = vec![T::zero(); slices * views * bins];
        for (img, sino) in x.chunks_exact(n).zip(out.chunks_exact_mut(views * bins)) {
            self.project_slice_views(img, &all, sino);
        }
        out
    }

    /// Backprojects a flat `(slices, views, bins)` array.
    pub fn back_project_raw<T: Real>(&self, y: &[T]) -> Vec<T> {
        let [slices, views, bins] = self.geom.sinogram_shape();
        let n = self.slice_len();
        assert_eq!(
            y.len(),
            slices * views * bins,
            "sinogram length does not match the geometry"
        );
        let all = self.all_views();
        let mut out = vec![T::zero(); slices * n];
        for (sino, img) in y.chunks_exact(views * bins).zip(out.chunks_exact_mut(n)) {
            self.back_project_slice_views(sino, &all, img);
        }
        out
    }

    pub fn forward(&self, x: &Volume) -> Result<Sinogram> {
        if x.shape() != self.geom.volume_shape() {
            return Err(shape_err(
                "forward_project",
                format!(
                    "volume {:?} vs geometry {:?}",
                    x.shape(),
                    self.geom.volume_shape()
                ),
            ));
        }
        Sinogram::new(self.geom.sinogram_shape(), self.project_raw(x.data()))
    }

    pub fn adjoint(&self, y: &Sinogram) -> Result<Volume> {
        self.check_sinogram("back_project", y)?;
        Volume::new(self.geom.volume_shape(), self.back_project_raw(y.data()))
    }

    pub(crate) fn check_sinogram(&self, op: &'static str, y: &Sinogram) -> Result<()> {
        if y.shape() != self.geom.sinogram_shape() {
            return Err(shape_err(
                op,
                format!(
                    "sinogram {:?} vs geometry {:?}",
                    y.shape(),
                    self.geom.sinogram_shape()
                ),
            ));
        }
        Ok(())
    }

    /// Sum of each ray's weights, `views x bins` (identical for every slice).
    pub fn ray_sums(&self) -> Vec<f64> {
        (0..self.offsets.len() - 1)
            .map(|r| self.weights[self.row(r)].iter().sum())
            .collect()
    }

    /// Backprojection of all-ones rays over the listed views for one slice.
    pub fn pixel_sums(&self, views: &[usize]) -> Vec<f64> {
        let ones = vec![1.0f64; views.len() * self.geom.num_det()];
        let mut img = vec![0.0f64; self.slice_len()];
        self.back_project_slice_views(&ones, views, &mut img);
        img
    }
}

fn push_bilinear(ray: &mut Vec<(u32, f64)>, px: f64, py: f64, rows: usize, cols: usize) {
    let (x0, y0) = (px.floor(), py.floor());
    let (fx, fy) = (px - x0, py - y0);
    let (x0, y0) = (x0 as i64, y0 as i64);
    for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
        let yy = y0 + dy;
        if wy == 0.0 || yy < 0 || yy >= rows as i64 {
            continue;
        }
        for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
            let xx = x0 + dx;
            if wx == 0.0 || xx < 0 || xx >= cols as i64 {
                continue;
            }
            ray.push(((yy as usize * cols + xx as usize) as u32, wx * wy));
        }
    }
}

impl<T: Real> LinearOperator<T> for Projector {
    fn input_shape(&self) -> Vec<usize> {
        let [d, h, w] = self.geom.volume_shape();
        vec![1, 1, d, h, w]
    }

    fn output_shape(&self) -> Vec<usize> {
        self.geom.sinogram_shape().to_vec()
    }

    fn apply(&self, x: &[T]) -> Vec<T> {
        self.project_raw(x)
    }

    fn apply_adjoint(&self, y: &[T]) -> Vec<T> {
        self.back_project_raw(y)
    }
}
