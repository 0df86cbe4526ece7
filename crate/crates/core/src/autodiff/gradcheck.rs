//! Central finite-difference checks of tape gradients in double precision.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{invalid, Result};

/// Outcome of [`check_gradients`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    /// Number of coordinates compared.
    pub checked: usize,
}

/// Compares backward gradients of `f` against central differences at
/// `coords` random coordinates of every input.
///
/// `f` records a scalar function of the inputs on a fresh tape each call.
/// Errors below `floor` in absolute terms count as relative to `floor`, so
/// coordinates with a vanishing gradient do not dominate.
pub fn check_gradients<F>(
    inputs: &[Tensor<f64>],
    f: F,
    coords: usize,
    h: f64,
    floor: f64,
    seed: u64,
) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if h.is_nan() || h <= 0.0 {
        return Err(invalid("h", format!("step must be positive, got {h}")));
    }
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.leaf(t)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out)[0])
    };

    let mut tape = Tape::new();
    let leaves: Vec<Tensor<f64>> = inputs.iter().map(|t| t.clone().requiring_grad()).collect();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t)).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = inputs.to_vec();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        checked: 0,
    };
    for (i, &v) in vars.iter().enumerate() {
        let n = inputs[i].numel();
        let analytic = tape
            .grad(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; n]);
        for _ in 0..coords.min(n) {
            let j = rng.random_range(0..n);
            let x0 = inputs[i].data()[j];
            work[i].data_mut()[j] = x0 + h;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = x0 - h;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = x0;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            report.max_rel_error = report.max_rel_error.max(err);
            report.checked += 1;
        }
    }
    Ok(report)
}
