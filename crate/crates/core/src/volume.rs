use crate::autodiff::Tensor;
use crate::error::{shape_err, Result};
use crate::Real;

/// Dense voxel grid indexed `(z, y, x)`, C order with `z` slowest.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    shape: [usize; 3],
    data: Vec<f32>,
}

impl Volume {
    pub fn new(shape: [usize; 3], data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err(
                "Volume::new",
                format!("shape {shape:?} holds {n} voxels, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: [usize; 3]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: [usize; 3], value: f32) -> Self {
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_fn(shape: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(shape.iter().product());
        for z in 0..shape[0] {
            for y in 0..shape[1] {
                for x in 0..shape[2] {
                    data.push(f(z, y, x));
                }
            }
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.shape[1] + y) * self.shape[2] + x
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(z, y, x)]
    }

    /// Axial slice `z` as a row-major `y x x` image.
    pub fn slice(&self, z: usize) -> &[f32] {
        let n = self.shape[1] * self.shape[2];
        &self.data[z * n..(z + 1) * n]
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `(1, 1, z, y, x)` tensor.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let [d, h, w] = self.shape;
        let data = self.data.iter().map(|&v| T::lit(v as f64)).collect();
        Tensor::new(vec![1, 1, d, h, w], data).expect("volume length matches its shape")
    }

    /// Inverse of [`Volume::to_tensor`]; any tensor holding exactly one
    /// `(1, 1, z, y, x)` block is accepted.
    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        let s = t.shape();
        if s.len() != 5 || s[0] != 1 || s[1] != 1 {
            return Err(shape_err(
                "Volume::from_tensor",
                format!("expected (1, 1, z, y, x), got {s:?}"),
            ));
        }
        Ok(Self {
            shape: [s[2], s[3], s[4]],
            data: t.data().iter().map(|v| v.as_f64() as f32).collect(),
        })
    }
}

/// Stack of per-slice sinograms indexed `(slice, view, bin)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sinogram {
    shape: [usize; 3],
    data: Vec<f32>,
}

impl Sinogram {
    /// `shape` is `(slices, views, bins)`.
    pub fn new(shape: [usize; 3], data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err(
                "Sinogram::new",
                format!("shape {shape:?} holds {n} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: [usize; 3]) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn num_slices(&self) -> usize {
        self.shape[0]
    }

    pub fn num_views(&self) -> usize {
        self.shape[1]
    }

    pub fn num_bins(&self) -> usize {
        self.shape[2]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, slice: usize, view: usize, bin: usize) -> f32 {
        self.data[(slice * self.shape[1] + view) * self.shape[2] + bin]
    }

    pub fn slice(&self, s: usize) -> &[f32] {
        let n = self.shape[1] * self.shape[2];
        &self.data[s * n..(s + 1) * n]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
