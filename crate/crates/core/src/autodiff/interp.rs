//! Separable linear resampling with half-pixel centers.
//!
//! Output sample `o` of an axis resized from `n_in` to `n_out` reads the
//! source coordinate `(o + 0.5) * n_in / n_out - 0.5`, clamped below at zero
//! and interpolated between its two integer neighbours.

use crate::Real;

/// Interpolation stencil for one axis.
#[derive(Clone, Debug)]
pub struct AxisTable {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    /// Weight of `hi`; `lo` gets `1 - frac`.
    pub frac: Vec<f64>,
}

impl AxisTable {
    pub fn half_pixel(n_in: usize, n_out: usize) -> Self {
        assert!(n_in >= 1 && n_out >= 1);
        let scale = n_in as f64 / n_out as f64;
        let mut t = AxisTable {
            lo: Vec::with_capacity(n_out),
            hi: Vec::with_capacity(n_out),
            frac: Vec::with_capacity(n_out),
        };
        for o in 0..n_out {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(n_in - 1);
            let hi = (lo + 1).min(n_in - 1);
            let frac = if hi == lo { 0.0 } else { src - lo as f64 };
            t.lo.push(lo);
            t.hi.push(hi);
            t.frac.push(frac);
        }
        t
    }

    fn len(&self) -> usize {
        self.lo.len()
    }
}

/// Layout of a contiguous 3D block seen along one axis: `outer x n x inner`.
fn axis_layout(dims: [usize; 3], axis: usize) -> (usize, usize, usize) {
    match axis {
        0 => (1, dims[0], dims[1] * dims[2]),
        1 => (dims[0], dims[1], dims[2]),
        _ => (dims[0] * dims[1], dims[2], 1),
    }
}

fn apply_axis<T: Real>(x: &[T], dims: [usize; 3], axis: usize, t: &AxisTable) -> Vec<T> {
    let (outer, n, inner) = axis_layout(dims, axis);
    let m = t.len();
    let w: Vec<(T, T)> = t
        .frac
        .iter()
        .map(|&f| (T::lit(1.0 - f), T::lit(f)))
        .collect();
    let mut out = vec![T::zero(); outer * m * inner];
    for o in 0..outer {
        let src = &x[o * n * inner..(o + 1) * n * inner];
        let dst = &mut out[o * m * inner..(o + 1) * m * inner];
        for j in 0..m {
            let (w0, w1) = w[j];
            let a = &src[t.lo[j] * inner..(t.lo[j] + 1) * inner];
            let b = &src[t.hi[j] * inner..(t.hi[j] + 1) * inner];
            for ((d, &va), &vb) in dst[j * inner..(j + 1) * inner].iter_mut().zip(a).zip(b) {
                *d = w0 * va + w1 * vb;
            }
        }
    }
    out
}

fn apply_axis_adjoint<T: Real>(g: &[T], dims_in: [usize; 3], axis: usize, t: &AxisTable) -> Vec<T> {
    let (outer, n, inner) = axis_layout(dims_in, axis);
    let m = t.len();
    let w: Vec<(T, T)> = t
        .frac
        .iter()
        .map(|&f| (T::lit(1.0 - f), T::lit(f)))
        .collect();
    let mut out = vec![T::zero(); outer * n * inner];
    for o in 0..outer {
        let src = &g[o * m * inner..(o + 1) * m * inner];
        let dst = &mut out[o * n * inner..(o + 1) * n * inner];
        for j in 0..m {
            let (w0, w1) = w[j];
            let row = &src[j * inner..(j + 1) * inner];
            let lo = t.lo[j] * inner;
            for (i, &v) in row.iter().enumerate() {
                dst[lo + i] += w0 * v;
            }
            let hi = t.hi[j] * inner;
            for (i, &v) in row.iter().enumerate() {
                dst[hi + i] += w1 * v;
            }
        }
    }
    out
}

/// Resamples one `dims` block to `out_dims` (x, then y, then z passes).
pub fn resample<T: Real>(x: &[T], dims: [usize; 3], out_dims: [usize; 3]) -> Vec<T> {
    let tables: [AxisTable; 3] =
        std::array::from_fn(|a| AxisTable::half_pixel(dims[a], out_dims[a]));
    let mut cur = x.to_vec();
    let mut cur_dims = dims;
    for axis in (0..3).rev() {
        if cur_dims[axis] == out_dims[axis] {
            continue;
        }
        cur = apply_axis(&cur, cur_dims, axis, &tables[axis]);
        cur_dims[axis] = out_dims[axis];
    }
    cur
}

/// Exact adjoint of [`resample`].
pub fn resample_adjoint<T: Real>(g: &[T], dims: [usize; 3], out_dims: [usize; 3]) -> Vec<T> {
    let tables: [AxisTable; 3] =
        std::array::from_fn(|a| AxisTable::half_pixel(dims[a], out_dims[a]));
    // the forward pass ran axis 2, 1, 0; when it processed `axis`, axes up to
    // and including it were at input size and later axes at output size
    let mut cur = g.to_vec();
    for axis in 0..3 {
        if dims[axis] == out_dims[axis] {
            continue;
        }
        let step_in: [usize; 3] =
            std::array::from_fn(|a| if a <= axis { dims[a] } else { out_dims[a] });
        cur = apply_axis_adjoint(&cur, step_in, axis, &tables[axis]);
    }
    cur
}

pub(crate) fn resample_channels<T: Real>(
    x: &[T],
    outer: usize,
    dims: [usize; 3],
    out_dims: [usize; 3],
) -> Vec<T> {
    let (n_in, n_out) = (
        dims.iter().product::<usize>(),
        out_dims.iter().product::<usize>(),
    );
    let mut out = Vec::with_capacity(outer * n_out);
    for c in 0..outer {
        out.extend(resample(&x[c * n_in..(c + 1) * n_in], dims, out_dims));
    }
    out
}

pub(crate) fn resample_channels_adjoint<T: Real>(
    g: &[T],
    outer: usize,
    dims: [usize; 3],
    out_dims: [usize; 3],
) -> Vec<T> {
    let (n_in, n_out) = (
        dims.iter().product::<usize>(),
        out_dims.iter().product::<usize>(),
    );
    let mut out = Vec::with_capacity(outer * n_in);
    for c in 0..outer {
        out.extend(resample_adjoint(
            &g[c * n_out..(c + 1) * n_out],
            dims,
            out_dims,
        ));
    }
    out
}
