use crate::error::{shape_err, Error, Result};
use crate::unet::NamedParam;
use crate::{Real, Volume};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam moment accumulators, one buffer per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Real = f32> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &[NamedParam<T>]) -> Self {
        let zeros = |p: &NamedParam<T>| vec![T::zero(); p.tensor.numel()];
        Self {
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
            t: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
        }
    }
}

/// One bias-corrected Adam update. Every gradient is checked before any
/// parameter changes, so a non-finite gradient leaves the model untouched.
pub fn adam_step<T: Real>(
    params: &mut [NamedParam<T>],
    grads: &[Vec<T>],
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(shape_err(
            "adam_step",
            format!(
                "{} parameters, {} gradients, {} moment buffers",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    for (p, g) in params.iter().zip(grads) {
        if g.len() != p.tensor.numel() {
            return Err(shape_err(
                "adam_step",
                format!(
                    "gradient of `{}` has {} values, expected {}",
                    p.name,
                    g.len(),
                    p.tensor.numel()
                ),
            ));
        }
        if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(format!(
                "parameter `{}` has gradient {bad}",
                p.name
            )));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (T::lit(state.beta1), T::lit(state.beta2));
    let (one, eps) = (T::one(), T::lit(state.eps));
    let c1 = T::lit(1.0 - state.beta1.powi(t));
    let c2 = T::lit(1.0 - state.beta2.powi(t));
    let lr = T::lit(lr);
    for (i, p) in params.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (((w, &g), m), v) in p
            .tensor
            .data_mut()
            .iter_mut()
            .zip(&grads[i])
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let mhat = *m / c1;
            let vhat = *v / c2;
            *w -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Exponential moving average of the network outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaState {
    shadow: Option<Volume>,
    decay: f32,
}

impl EmaState {
    pub fn new(decay: f64) -> Result<Self> {
        check_decay(decay)?;
        Ok(Self {
            shadow: None,
            decay: decay as f32,
        })
    }

    /// Starts from an explicit shadow instead of the first update.
    pub fn with_shadow(shadow: Volume, decay: f64) -> Result<Self> {
        check_decay(decay)?;
        Ok(Self {
            shadow: Some(shadow),
            decay: decay as f32,
        })
    }

    pub fn shadow(&self) -> Option<&Volume> {
        self.shadow.as_ref()
    }

    pub fn into_shadow(self) -> Option<Volume> {
        self.shadow
    }

    pub fn update(&mut self, x: &Volume) -> Result<()> {
        match &mut self.shadow {
            None => self.shadow = Some(x.clone()),
            Some(s) => {
                if s.shape() != x.shape() {
                    return Err(shape_err(
                        "ema_update",
                        format!("shadow {:?} vs output {:?}", s.shape(), x.shape()),
                    ));
                }
                let d = self.decay;
                for (a, &b) in s.data_mut().iter_mut().zip(x.data()) {
                    *a = d * *a + (1.0 - d) * b;
                }
            }
        }
        Ok(())
    }
}

fn check_decay(decay: f64) -> Result<()> {
    if !(0.0..1.0).contains(&decay) {
        return Err(crate::error::invalid(
            "ema_decay",
            format!("must lie in [0, 1), got {decay}"),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn scalar_param(v: f64) -> Vec<NamedParam<f64>> {
        vec![NamedParam {
            name: "w".into(),
            tensor: Tensor::new(vec![1], vec![v]).unwrap(),
        }]
    }

    #[test]
    fn zero_gradient_is_a_null_update() {
        let mut p = scalar_param(0.3);
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &[vec![0.0]], &mut s, 1e-3).unwrap();
        assert_eq!(p[0].tensor.data(), &[0.3]);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn first_step_value() {
        let mut p = scalar_param(0.0);
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &[vec![0.5]], &mut s, 1e-3).unwrap();
        let expect = -1e-3 * (0.5 / (0.5 + 1e-8));
        assert!((p[0].tensor.data()[0] - expect).abs() < 1e-15);
        assert!((expect + 9.9999998e-4).abs() < 1e-13);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut p = scalar_param(1.0);
        let mut s = AdamState::new(&p);
        let e = adam_step(&mut p, &[vec![f64::NAN]], &mut s, 1e-3).unwrap_err();
        assert!(e.to_string().contains("`w`"), "{e}");
        assert_eq!(p[0].tensor.data(), &[1.0]);
        assert_eq!(s.t, 0);
    }

    #[test]
    fn ema_rules() {
        let mut e = EmaState::new(0.99).unwrap();
        e.update(&Volume::filled([1, 2, 2], 0.4)).unwrap();
        assert_eq!(e.shadow().unwrap(), &Volume::filled([1, 2, 2], 0.4));
        let mut e = EmaState::with_shadow(Volume::zeros([1, 1, 2]), 0.99).unwrap();
        e.update(&Volume::filled([1, 1, 2], 1.0)).unwrap();
        assert!(e
            .shadow()
            .unwrap()
            .data()
            .iter()
            .all(|&v| (v - 0.01).abs() < 1e-7));
        assert!(e.update(&Volume::zeros([1, 2, 1])).is_err());
        let mut e = EmaState::new(0.0).unwrap();
        for k in 0..3 {
            let x = Volume::filled([1, 1, 3], k as f32);
            e.update(&x).unwrap();
            assert_eq!(e.shadow().unwrap(), &x);
        }
        assert!(EmaState::new(1.0).is_err());
    }
}
