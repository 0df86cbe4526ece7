//! 3D convolution via im2col and GEMM.

use crate::error::{shape_err, Result};
use crate::Real;

/// Resolved shapes of one `conv3d` call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeometry {
    pub fn new(
        input_shape: &[usize],
        weight_shape: &[usize],
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Result<Self> {
        if input_shape.len() != 5 {
            return Err(shape_err(
                "conv3d",
                format!("input must be 5-D (n, c, d, h, w), got {input_shape:?}"),
            ));
        }
        if weight_shape.len() != 5 {
            return Err(shape_err(
                "conv3d",
                format!("weight must be 5-D (out, in, kd, kh, kw), got {weight_shape:?}"),
            ));
        }
        if input_shape[1] != weight_shape[1] {
            return Err(shape_err(
                "conv3d",
                format!(
                    "input has {} channels but weight expects {}",
                    input_shape[1], weight_shape[1]
                ),
            ));
        }
        if stride.contains(&0) {
            return Err(shape_err("conv3d", "stride must be at least 1"));
        }
        let mut output = [0; 3];
        for ax in 0..3 {
            let padded = input_shape[2 + ax] + 2 * padding[ax];
            let k = weight_shape[2 + ax];
            if k == 0 || k > padded {
                return Err(shape_err(
                    "conv3d",
                    format!(
                        "kernel extent {k} does not fit padded input extent {padded} on axis {ax}"
                    ),
                ));
            }
            output[ax] = (padded - k) / stride[ax] + 1;
        }
        Ok(Self {
            batch: input_shape[0],
            in_channels: input_shape[1],
            out_channels: weight_shape[0],
            input: [input_shape[2], input_shape[3], input_shape[4]],
            kernel: [weight_shape[2], weight_shape[3], weight_shape[4]],
            stride,
            padding,
            output,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        let [d, h, w] = self.output;
        vec![self.batch, self.out_channels, d, h, w]
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel.iter().product::<usize>()
    }

    fn in_voxels(&self) -> usize {
        self.input.iter().product()
    }

    fn out_voxels(&self) -> usize {
        self.output.iter().product()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.padding == [0, 0, 0]
    }
}

/// Range of output positions whose source index `o * s + k - p` lies in `[0, n)`.
fn valid_range(n: usize, n_out: usize, s: usize, p: usize, k: usize) -> (usize, usize) {
    let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
    let hi = if n + p > k {
        ((n - 1 + p - k) / s + 1).min(n_out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn for_each_patch_row<F>(g: &ConvGeometry, mut f: F)
where
    F: FnMut(usize, usize, usize, usize, usize),
{
    let [kd, kh, kw] = g.kernel;
    for c in 0..g.in_channels {
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    f(((c * kd + a) * kh + b) * kw + e, c, a, b, e);
                }
            }
        }
    }
}

fn im2col<T: Real>(g: &ConvGeometry, x: &[T], col: &mut [T]) {
    let [d, h, w] = g.input;
    let [od, oh, ow] = g.output;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.padding;
    let v = g.out_voxels();
    for_each_patch_row(g, |row, c, a, b, e| {
        let xc = &x[c * d * h * w..(c + 1) * d * h * w];
        let dst = &mut col[row * v..(row + 1) * v];
        let (lo, hi) = valid_range(w, ow, sw, pw, e);
        for z in 0..od {
            let iz = (z * sd + a) as isize - pd as isize;
            for y in 0..oh {
                let iy = (y * sh + b) as isize - ph as isize;
                let seg = &mut dst[(z * oh + y) * ow..(z * oh + y + 1) * ow];
                if iz < 0 || iz >= d as isize || iy < 0 || iy >= h as isize || lo >= hi {
                    seg.fill(T::zero());
                    continue;
                }
                seg[..lo].fill(T::zero());
                seg[hi..].fill(T::zero());
                let base = (iz as usize * h + iy as usize) * w;
                let src = &xc[base..base + w];
                for (o, out) in seg[lo..hi].iter_mut().enumerate() {
                    *out = src[(lo + o) * sw + e - pw];
                }
            }
        }
    });
}

fn col2im<T: Real>(g: &ConvGeometry, col: &[T], x: &mut [T]) {
    let [d, h, w] = g.input;
    let [od, oh, ow] = g.output;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.padding;
    let v = g.out_voxels();
    for_each_patch_row(g, |row, c, a, b, e| {
        let xc = &mut x[c * d * h * w..(c + 1) * d * h * w];
        let src = &col[row * v..(row + 1) * v];
        let (lo, hi) = valid_range(w, ow, sw, pw, e);
        if lo >= hi {
            return;
        }
        for z in 0..od {
            let iz = (z * sd + a) as isize - pd as isize;
            if iz < 0 || iz >= d as isize {
                continue;
            }
            for y in 0..oh {
                let iy = (y * sh + b) as isize - ph as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                let seg = &src[(z * oh + y) * ow..(z * oh + y + 1) * ow];
                let base = (iz as usize * h + iy as usize) * w;
                let dst = &mut xc[base..base + w];
                for (o, &val) in seg[lo..hi].iter().enumerate() {
                    dst[(lo + o) * sw + e - pw] += val;
                }
            }
        }
    });
}

/// Stride-1 convolution on a zero-padded copy of the input.
///
/// Output voxel `(z, y, x)` is stored at the padded-grid index
/// `q = (z·P1 + y)·P2 + x`, so kernel tap `(a, b, e)` reads the contiguous
/// window starting at `q + (a·P1 + b)·P2 + e`. Patch matrices are therefore
/// assembled from plain row copies, one chunk of positions at a time so the
/// chunk stays in cache, and each chunk is a single GEMM. Columns of the
/// extended grid that fall outside the true output are discarded.
struct Shifted {
    padded: [usize; 3],
    pvol: usize,
    /// Length of the extended output grid.
    q: usize,
    offsets: Vec<usize>,
    chunk: usize,
}

impl Shifted {
    fn new(g: &ConvGeometry) -> Option<Self> {
        if g.stride != [1, 1, 1] || g.is_pointwise() {
            return None;
        }
        let padded: [usize; 3] = std::array::from_fn(|a| g.input[a] + 2 * g.padding[a]);
        let [_, p1, p2] = padded;
        let [od, oh, ow] = g.output;
        let q = ((od - 1) * p1 + oh - 1) * p2 + ow;
        let [kd, kh, kw] = g.kernel;
        let mut offsets = Vec::with_capacity(kd * kh * kw);
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    offsets.push((a * p1 + b) * p2 + e);
                }
            }
        }
        let rows = g.in_channels * offsets.len();
        let chunk = (65536 / rows).clamp(64, 4096);
        Some(Self {
            padded,
            pvol: padded.iter().product(),
            q,
            offsets,
            chunk,
        })
    }

    fn rows(&self, g: &ConvGeometry) -> usize {
        g.in_channels * self.offsets.len()
    }

    fn chunks(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.q)
            .step_by(self.chunk)
            .map(|q0| (q0, self.chunk.min(self.q - q0)))
    }

    fn pad<T: Real>(&self, g: &ConvGeometry, x: &[T]) -> Vec<T> {
        let [d, h, w] = g.input;
        let [_, p1, p2] = self.padded;
        let [pd, ph, pw] = g.padding;
        let mut xp = vec![T::zero(); g.in_channels * self.pvol];
        for c in 0..g.in_channels {
            for z in 0..d {
                for y in 0..h {
                    let src = &x[((c * d + z) * h + y) * w..][..w];
                    let dst = c * self.pvol + ((z + pd) * p1 + y + ph) * p2 + pw;
                    xp[dst..dst + w].copy_from_slice(src);
                }
            }
        }
        xp
    }

    /// Fills `col` (`rows x nq`) with the patches of positions `q0..q0 + nq`.
    fn gather<T: Real>(&self, xp: &[T], cin: usize, q0: usize, nq: usize, col: &mut [T]) {
        let kvol = self.offsets.len();
        for c in 0..cin {
            for (t, &off) in self.offsets.iter().enumerate() {
                let src = c * self.pvol + q0 + off;
                col[(c * kvol + t) * nq..][..nq].copy_from_slice(&xp[src..src + nq]);
            }
        }
    }

    /// Visits `(true output row start, extended row start, row length)`.
    fn output_rows(&self, g: &ConvGeometry, mut f: impl FnMut(usize, usize, usize)) {
        let [od, oh, ow] = g.output;
        let [_, p1, p2] = self.padded;
        for z in 0..od {
            for y in 0..oh {
                f((z * oh + y) * ow, (z * p1 + y) * p2, ow);
            }
        }
    }

    fn forward<T: Real>(&self, g: &ConvGeometry, x: &[T], weight: &[T], bias: &[T], out: &mut [T]) {
        let (cin, cout, rows) = (g.in_channels, g.out_channels, self.rows(g));
        let v = g.out_voxels();
        let xp = self.pad(g, x);
        let mut ext = vec![T::zero(); cout * self.q];
        for (o, row) in ext.chunks_exact_mut(self.q).enumerate() {
            row.fill(bias[o]);
        }
        let mut col = vec![T::zero(); rows * self.chunk];
        for (q0, nq) in self.chunks() {
            self.gather(&xp, cin, q0, nq, &mut col);
            T::gemm(
                cout,
                rows,
                nq,
                T::one(),
                weight,
                (rows, 1),
                &col,
                (nq, 1),
                T::one(),
                &mut ext[q0..],
                (self.q, 1),
            );
        }
        for o in 0..cout {
            let (src, dst) = (&ext[o * self.q..], &mut out[o * v..(o + 1) * v]);
            self.output_rows(g, |r, e, len| {
                dst[r..r + len].copy_from_slice(&src[e..e + len])
            });
        }
    }

    fn backward<T: Real>(
        &self,
        g: &ConvGeometry,
        x: &[T],
        weight: &[T],
        grad_out: &[T],
        gx: Option<&mut [T]>,
        gw: Option<&mut [T]>,
    ) {
        let (cin, cout, rows) = (g.in_channels, g.out_channels, self.rows(g));
        let kvol = self.offsets.len();
        let v = g.out_voxels();
        let mut dext = vec![T::zero(); cout * self.q];
        for o in 0..cout {
            let (src, dst) = (
                &grad_out[o * v..(o + 1) * v],
                &mut dext[o * self.q..(o + 1) * self.q],
            );
            self.output_rows(g, |r, e, len| {
                dst[e..e + len].copy_from_slice(&src[r..r + len])
            });
        }
        let mut col = vec![T::zero(); rows * self.chunk];
        if let Some(gw) = gw {
            let xp = self.pad(g, x);
            for (q0, nq) in self.chunks() {
                self.gather(&xp, cin, q0, nq, &mut col);
                // dW (out x rows) += dExt (out x nq) * patches^T (nq x rows)
                T::gemm(
                    cout,
                    nq,
                    rows,
                    T::one(),
                    &dext[q0..],
                    (self.q, 1),
                    &col,
                    (1, nq),
                    T::one(),
                    gw,
                    (rows, 1),
                );
            }
        }
        if let Some(gx) = gx {
            let mut dxp = vec![T::zero(); cin * self.pvol];
            for (q0, nq) in self.chunks() {
                // dPatches (rows x nq) = W^T (rows x out) * dExt (out x nq)
                T::gemm(
                    rows,
                    cout,
                    nq,
                    T::one(),
                    weight,
                    (1, rows),
                    &dext[q0..],
                    (self.q, 1),
                    T::zero(),
                    &mut col,
                    (nq, 1),
                );
                for c in 0..cin {
                    for (t, &off) in self.offsets.iter().enumerate() {
                        let dst = &mut dxp[c * self.pvol + q0 + off..][..nq];
                        for (a, &b) in dst.iter_mut().zip(&col[(c * kvol + t) * nq..][..nq]) {
                            *a += b;
                        }
                    }
                }
            }
            let [d, h, w] = g.input;
            let [_, p1, p2] = self.padded;
            let [pd, ph, pw] = g.padding;
            for c in 0..cin {
                for z in 0..d {
                    for y in 0..h {
                        let dst = &mut gx[((c * d + z) * h + y) * w..][..w];
                        let src = c * self.pvol + ((z + pd) * p1 + y + ph) * p2 + pw;
                        for (a, &b) in dst.iter_mut().zip(&dxp[src..src + w]) {
                            *a += b;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn forward<T: Real>(g: &ConvGeometry, x: &[T], weight: &[T], bias: &[T]) -> Vec<T> {
    let (k, v) = (g.patch_len(), g.out_voxels());
    let (in_len, out_len) = (g.in_channels * g.in_voxels(), g.out_channels * v);
    let mut out = vec![T::zero(); g.batch * out_len];
    if let Some(sh) = Shifted::new(g) {
        for n in 0..g.batch {
            let xn = &x[n * in_len..(n + 1) * in_len];
            sh.forward(
                g,
                xn,
                weight,
                bias,
                &mut out[n * out_len..(n + 1) * out_len],
            );
        }
        return out;
    }
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); k * v]
    };
    for n in 0..g.batch {
        let xn = &x[n * in_len..(n + 1) * in_len];
        let patches: &[T] = if g.is_pointwise() {
            xn
        } else {
            im2col(g, xn, &mut col);
            &col
        };
        let on = &mut out[n * out_len..(n + 1) * out_len];
        for (o, row) in on.chunks_exact_mut(v).enumerate() {
            row.fill(bias[o]);
        }
        T::gemm(
            g.out_channels,
            k,
            v,
            T::one(),
            weight,
            (k, 1),
            patches,
            (v, 1),
            T::one(),
            on,
            (v, 1),
        );
    }
    out
}

#[derive(Clone, Copy)]
pub(crate) struct Needs {
    pub input: bool,
    pub weight: bool,
    pub bias: bool,
}

pub(crate) struct Grads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub(crate) fn backward<T: Real>(
    g: &ConvGeometry,
    x: &[T],
    weight: &[T],
    grad_out: &[T],
    needs: Needs,
) -> Grads<T> {
    let (k, v) = (g.patch_len(), g.out_voxels());
    let (in_len, out_len) = (g.in_channels * g.in_voxels(), g.out_channels * v);
    let mut gx = needs.input.then(|| vec![T::zero(); x.len()]);
    let mut gw = needs.weight.then(|| vec![T::zero(); weight.len()]);
    let mut gb = needs.bias.then(|| vec![T::zero(); g.out_channels]);
    if let Some(sh) = Shifted::new(g) {
        for n in 0..g.batch {
            let gon = &grad_out[n * out_len..(n + 1) * out_len];
            if let Some(gb) = gb.as_mut() {
                for (o, row) in gon.chunks_exact(v).enumerate() {
                    gb[o] += row.iter().copied().sum::<T>();
                }
            }
            sh.backward(
                g,
                &x[n * in_len..(n + 1) * in_len],
                weight,
                gon,
                gx.as_mut().map(|a| &mut a[n * in_len..(n + 1) * in_len]),
                gw.as_deref_mut(),
            );
        }
        return Grads {
            input: gx,
            weight: gw,
            bias: gb,
        };
    }
    let pointwise = g.is_pointwise();
    let mut col = if pointwise || !needs.weight {
        Vec::new()
    } else {
        vec![T::zero(); k * v]
    };
    let mut dcol = if pointwise || !needs.input {
        Vec::new()
    } else {
        vec![T::zero(); k * v]
    };

    for n in 0..g.batch {
        let xn = &x[n * in_len..(n + 1) * in_len];
        let gon = &grad_out[n * out_len..(n + 1) * out_len];
        if let Some(gb) = gb.as_mut() {
            for (o, row) in gon.chunks_exact(v).enumerate() {
                gb[o] += row.iter().copied().sum::<T>();
            }
        }
        if let Some(gw) = gw.as_mut() {
            let patches: &[T] = if pointwise {
                xn
            } else {
                im2col(g, xn, &mut col);
                &col
            };
            // dW (out x k) += dY (out x v) * patches^T (v x k)
            T::gemm(
                g.out_channels,
                v,
                k,
                T::one(),
                gon,
                (v, 1),
                patches,
                (1, v),
                T::one(),
                gw,
                (k, 1),
            );
        }
        if let Some(gx) = gx.as_mut() {
            let gxn = &mut gx[n * in_len..(n + 1) * in_len];
            // dPatches (k x v) = W^T (k x out) * dY (out x v)
            if pointwise {
                T::gemm(
                    k,
                    g.out_channels,
                    v,
                    T::one(),
                    weight,
                    (1, k),
                    gon,
                    (v, 1),
                    T::one(),
                    gxn,
                    (v, 1),
                );
            } else {
                T::gemm(
                    k,
                    g.out_channels,
                    v,
                    T::one(),
                    weight,
                    (1, k),
                    gon,
                    (v, 1),
                    T::zero(),
                    &mut dcol,
                    (v, 1),
                );
                col2im(g, &dcol, gxn);
            }
        }
    }
    Grads {
        input: gx,
        weight: gw,
        bias: gb,
    }
}
