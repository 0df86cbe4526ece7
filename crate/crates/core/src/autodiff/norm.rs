use crate::Real;

/// Per-(sample, channel) statistics saved for backward.
pub(crate) struct Stats<T> {
    mean: Vec<T>,
    inv_std: Vec<T>,
}

pub(crate) fn forward<T: Real>(
    x: &[T],
    batch: usize,
    channels: usize,
    spatial: usize,
    gain: &[T],
    bias: &[T],
    eps: T,
) -> (Vec<T>, Stats<T>) {
    let count = T::lit(spatial as f64);
    let mut out = vec![T::zero(); x.len()];
    let mut stats = Stats {
        mean: Vec::with_capacity(batch * channels),
        inv_std: Vec::with_capacity(batch * channels),
    };
    for n in 0..batch {
        for c in 0..channels {
            let off = (n * channels + c) * spatial;
            let xs = &x[off..off + spatial];
            let mean = xs.iter().copied().sum::<T>() / count;
            let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / count;
            let inv_std = T::one() / (var + eps).sqrt();
            let inv_std = if inv_std.is_finite() {
                inv_std
            } else {
                T::zero()
            };
            for (o, &v) in out[off..off + spatial].iter_mut().zip(xs) {
                *o = gain[c] * (v - mean) * inv_std + bias[c];
            }
            stats.mean.push(mean);
            stats.inv_std.push(inv_std);
        }
    }
    (out, stats)
}

pub(crate) struct Grads<T> {
    pub input: Vec<T>,
    pub gain: Vec<T>,
    pub bias: Vec<T>,
}

pub(crate) fn backward<T: Real>(
    x: &[T],
    batch: usize,
    channels: usize,
    spatial: usize,
    gain: &[T],
    stats: &Stats<T>,
    g: &[T],
) -> Grads<T> {
    let count = T::lit(spatial as f64);
    let mut gx = vec![T::zero(); x.len()];
    let mut gg = vec![T::zero(); channels];
    let mut gb = vec![T::zero(); channels];
    for n in 0..batch {
        for c in 0..channels {
            let i = n * channels + c;
            let off = i * spatial;
            let (mean, inv_std) = (stats.mean[i], stats.inv_std[i]);
            let xs = &x[off..off + spatial];
            let gs = &g[off..off + spatial];
            let mut sum_g = T::zero();
            let mut sum_g_xhat = T::zero();
            for (&v, &u) in xs.iter().zip(gs) {
                let xhat = (v - mean) * inv_std;
                sum_g += u;
                sum_g_xhat += u * xhat;
            }
            gb[c] += sum_g;
            gg[c] += sum_g_xhat;
            // dx = gain * inv_std * (g - mean(g) - xhat * mean(g * xhat))
            let k = gain[c] * inv_std;
            let (mg, mgx) = (sum_g / count, sum_g_xhat / count);
            for ((o, &v), &u) in gx[off..off + spatial].iter_mut().zip(xs).zip(gs) {
                let xhat = (v - mean) * inv_std;
                *o = k * (u - mg - xhat * mgx);
            }
        }
    }
    Grads {
        input: gx,
        gain: gg,
        bias: gb,
    }
}
