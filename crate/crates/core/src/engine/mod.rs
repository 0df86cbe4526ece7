//! Deep-image-prior optimizers: vanilla DIP and Tada-DIP.
//!
//! Both fit a U-Net `f_θ` so that `A f_θ(input)` matches the measurements
//! and report the EMA of the outputs as the reconstruction. Tada-DIP adds
//! three things on top of vanilla DIP. It perturbs the input each iteration
//! with Gaussian noise of scale `α·max|z|`. It adds a term `β‖z − x̂‖ₚᵖ`
//! pulling the output toward the current input. It blends the input toward
//! the output, `z ← (1 − γ)z + γx̂`.

mod dip;
mod optim;

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{LinearOperator, Tape, Var};
use crate::error::{invalid, shape_err, Result};
use crate::tomo::{Geometry, Projector};
use crate::toolkit::io::write_atomic;
use crate::unet::UNetConfig;
use crate::{Real, Sinogram, Volume};

pub use dip::{run_tada_dip, run_tada_dip_with, run_vanilla_dip, run_vanilla_dip_with, Iteration};
pub use optim::{adam_step, AdamState, EmaState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TadaConfig {
    /// Input-noise scale relative to `max|z|`.
    pub alpha: f64,
    /// Weight of the denoising term.
    pub beta: f64,
    /// Input blend rate.
    pub gamma: f64,
    /// Norm exponent, 1 or 2.
    pub p: u32,
    pub iterations: usize,
    pub learning_rate: f64,
    pub ema_decay: f64,
    pub seed: u64,
    /// Trace cadence; the final iteration is always recorded.
    pub eval_every: usize,
    pub unet: UNetConfig,
}

impl Default for TadaConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 1e-2,
            gamma: 1e-2,
            p: 1,
            iterations: 4000,
            learning_rate: 1e-3,
            ema_decay: 0.99,
            seed: 0,
            eval_every: 50,
            unet: UNetConfig::default(),
        }
    }
}

impl TadaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(invalid(
                "alpha",
                format!("must be nonnegative, got {}", self.alpha),
            ));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(invalid(
                "beta",
                format!("must be nonnegative, got {}", self.beta),
            ));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(invalid(
                "gamma",
                format!("must lie in [0, 1], got {}", self.gamma),
            ));
        }
        check_p(self.p)?;
        if self.iterations == 0 {
            return Err(invalid("iterations", "must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid(
                "learning_rate",
                format!("must be positive, got {}", self.learning_rate),
            ));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(invalid(
                "ema_decay",
                format!("must lie in [0, 1), got {}", self.ema_decay),
            ));
        }
        if self.eval_every == 0 {
            return Err(invalid("eval_every", "must be at least 1"));
        }
        self.unet.validate()
    }
}

fn check_p(p: u32) -> Result<()> {
    if p != 1 && p != 2 {
        return Err(invalid(
            "p",
            format!("norm exponent must be 1 or 2, got {p}"),
        ));
    }
    Ok(())
}

/// `α · max|z|`.
pub fn noise_sigma(z: &Volume, alpha: f64) -> f64 {
    alpha * z.max_abs() as f64
}

/// `(1 − γ)z + γx̂`, elementwise.
pub fn input_update(z: &Volume, xhat: &Volume, gamma: f64) -> Result<Volume> {
    if z.shape() != xhat.shape() {
        return Err(shape_err(
            "input_update",
            format!("{:?} vs {:?}", z.shape(), xhat.shape()),
        ));
    }
    let g = gamma as f32;
    let data = z
        .data()
        .iter()
        .zip(xhat.data())
        .map(|(&a, &b)| (1.0 - g) * a + g * b)
        .collect();
    Volume::new(z.shape(), data)
}

/// Sum of `|v|^p` over a recorded tensor.
pub fn norm_p<T: Real>(tape: &mut Tape<T>, v: Var, p: u32) -> Result<Var> {
    check_p(p)?;
    let e = if p == 1 {
        tape.abs(v)?
    } else {
        tape.square(v)?
    };
    tape.sum(e)
}

/// Loss variables recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub data_fidelity: Var,
    /// Unweighted `‖z − x̂‖ₚᵖ`; `None` when β is zero.
    pub regularizer: Option<Var>,
}

/// Records `‖y − A x̂‖ₚᵖ + β‖z − x̂‖ₚᵖ`. `y` and `z` should be constants so no
/// gradient reaches them.
pub fn tada_loss_on_tape<T: Real>(
    tape: &mut Tape<T>,
    op: Arc<dyn LinearOperator<T>>,
    y: Var,
    xhat: Var,
    z: Option<Var>,
    beta: f64,
    p: u32,
) -> Result<LossVars> {
    check_p(p)?;
    let ax = tape.linear(op, xhat)?;
    let r = tape.sub(y, ax)?;
    let data_fidelity = norm_p(tape, r, p)?;
    let (total, regularizer) = match z {
        Some(z) if beta != 0.0 => {
            let d = tape.sub(z, xhat)?;
            let reg = norm_p(tape, d, p)?;
            let weighted = tape.scale(reg, T::lit(beta))?;
            (tape.add(data_fidelity, weighted)?, Some(reg))
        }
        _ => (data_fidelity, None),
    };
    Ok(LossVars {
        total,
        data_fidelity,
        regularizer,
    })
}

/// Value of the Tada-DIP loss, evaluated in double precision.
pub fn tada_loss(
    y: &Sinogram,
    xhat: &Volume,
    z: &Volume,
    g: &Geometry,
    beta: f64,
    p: u32,
) -> Result<f64> {
    check_p(p)?;
    if xhat.shape() != g.volume_shape()
        || z.shape() != xhat.shape()
        || y.shape() != g.sinogram_shape()
    {
        return Err(shape_err(
            "tada_loss",
            format!(
                "y {:?}, x̂ {:?}, z {:?} for geometry {:?} -> {:?}",
                y.shape(),
                xhat.shape(),
                z.shape(),
                g.volume_shape(),
                g.sinogram_shape()
            ),
        ));
    }
    let proj = Projector::new(g);
    let x64: Vec<f64> = xhat.data().iter().map(|&v| v as f64).collect();
    let ax = proj.project_raw(&x64);
    let pow = |d: f64| if p == 1 { d.abs() } else { d * d };
    let data: f64 = y
        .data()
        .iter()
        .zip(&ax)
        .map(|(&a, &b)| pow(a as f64 - b))
        .sum();
    let reg: f64 = z
        .data()
        .iter()
        .zip(xhat.data())
        .map(|(&a, &b)| pow(a as f64 - b as f64))
        .sum();
    Ok(data + beta * reg)
}

/// `y = A x + n` with `n ~ N(0, σ²)` drawn from `seed`; `σ = 0` is noiseless.
pub fn synthesize_measurements(
    x: &Volume,
    g: &Geometry,
    sigma: f64,
    seed: u64,
) -> Result<Sinogram> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(invalid(
            "noise",
            format!("standard deviation must be nonnegative, got {sigma}"),
        ));
    }
    let mut y = Projector::new(g).forward(x)?;
    if sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal =
            Normal::new(0.0f32, sigma as f32).map_err(|e| invalid("noise", e.to_string()))?;
        y.data_mut()
            .iter_mut()
            .for_each(|v| *v += normal.sample(&mut rng));
    }
    Ok(y)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TraceRecord {
    pub iteration: usize,
    pub loss: f64,
    pub data_fidelity: f64,
    /// Unweighted `‖z − x̂‖ₚᵖ` (zero for vanilla DIP).
    pub regularizer: f64,
    pub psnr_ema: Option<f64>,
    pub ssim_ema: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunTrace {
    pub records: Vec<TraceRecord>,
}

impl RunTrace {
    /// Highest recorded EMA PSNR.
    pub fn peak_psnr(&self) -> Option<f64> {
        self.records
            .iter()
            .filter_map(|r| r.psnr_ema)
            .reduce(f64::max)
    }

    pub fn final_psnr(&self) -> Option<f64> {
        self.records.last().and_then(|r| r.psnr_ema)
    }

    /// CSV with columns `iteration,loss,data_fidelity,regularizer,psnr_ema,ssim_ema`;
    /// metrics are empty when no ground truth was given.
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
