use crate::autodiff::interp;
use crate::error::{invalid, Result};
use crate::Volume;

/// Min-max scaling to `[0, 1]`; a constant volume maps to zeros.
pub fn normalize_volume(x: &Volume) -> Volume {
    let (lo, hi) = x
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let range = hi - lo;
    let data = if range > 0.0 && range.is_finite() {
        x.data().iter().map(|&v| (v - lo) / range).collect()
    } else {
        vec![0.0; x.len()]
    };
    Volume::new(x.shape(), data).expect("same shape")
}

/// Trilinear resampling with half-pixel centers.
pub fn resize_trilinear(x: &Volume, new_shape: [usize; 3]) -> Result<Volume> {
    if new_shape.contains(&0) {
        return Err(invalid(
            "new_shape",
            format!("all extents must be at least 1, got {new_shape:?}"),
        ));
    }
    if new_shape == x.shape() {
        return Ok(x.clone());
    }
    Volume::new(new_shape, interp::resample(x.data(), x.shape(), new_shape))
}

/// Central crop to `shape` (each extent must not exceed the input's).
pub fn center_crop(x: &Volume, shape: [usize; 3]) -> Result<Volume> {
    let s = x.shape();
    if (0..3).any(|a| shape[a] == 0 || shape[a] > s[a]) {
        return Err(invalid("shape", format!("cannot crop {s:?} to {shape:?}")));
    }
    let off: [usize; 3] = std::array::from_fn(|a| (s[a] - shape[a]) / 2);
    Ok(Volume::from_fn(shape, |z, y, xx| {
        x.get(z + off[0], y + off[1], xx + off[2])
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_edge_cases() {
        let v = Volume::new([1, 1, 4], vec![-2.0, 0.0, 1.0, 6.0]).unwrap();
        let n = normalize_volume(&v);
        assert_eq!(n.data(), &[0.0, 0.25, 0.375, 1.0]);
        assert_eq!(normalize_volume(&n), n);
        let c = normalize_volume(&Volume::filled([2, 2, 2], 3.5));
        assert!(c.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn resize_identity_and_constant() {
        let v = Volume::from_fn([3, 4, 5], |z, y, x| (z * 20 + y * 5 + x) as f32);
        assert_eq!(resize_trilinear(&v, [3, 4, 5]).unwrap(), v);
        let c = resize_trilinear(&Volume::filled([3, 4, 5], 0.7), [7, 2, 9]).unwrap();
        assert!(c.data().iter().all(|&v| (v - 0.7).abs() < 1e-6));
        assert!(resize_trilinear(&v, [0, 4, 5]).is_err());
    }

    #[test]
    fn resize_preserves_linear_ramp() {
        // doubling a ramp: interior samples land on the continuous ramp
        // value(x') = (x' + 0.5) / 2 - 0.5; the outermost sample clamps
        let n = 12;
        let v = Volume::from_fn([2, 3, n], |_, _, x| 0.1 * x as f32);
        let r = resize_trilinear(&v, [2, 3, 2 * n]).unwrap();
        for x in 1..2 * n - 1 {
            let src = (x as f64 + 0.5) / 2.0 - 0.5;
            let expect = 0.1 * src;
            assert!((r.get(1, 2, x) as f64 - expect).abs() < 1e-5, "x={x}");
        }
    }

    #[test]
    fn crop_is_central() {
        let v = Volume::from_fn([4, 4, 4], |z, y, x| (z * 16 + y * 4 + x) as f32);
        let c = center_crop(&v, [2, 2, 2]).unwrap();
        assert_eq!(c.get(0, 0, 0), v.get(1, 1, 1));
        assert!(center_crop(&v, [5, 2, 2]).is_err());
    }
}
