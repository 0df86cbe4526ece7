use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::{
    adam_step, input_update, noise_sigma, tada_loss_on_tape, AdamState, EmaState, RunTrace,
    TadaConfig, TraceRecord,
};
use crate::autodiff::{LinearOperator, Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::tomo::{Geometry, Projector};
use crate::toolkit::metrics;
use crate::unet::UNet;
use crate::{Sinogram, Volume};

/// Stream offset separating the input/noise generator from the weight initializer.
const INPUT_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

/// Everything one optimization step saw, handed to the observer after the
/// parameter update.
pub struct Iteration<'a> {
    /// 1-based iteration number.
    pub index: usize,
    pub sigma: f64,
    pub eta: &'a Volume,
    /// Input of this iteration before noise.
    pub z: &'a Volume,
    /// Network output restricted to the measured support.
    pub xhat: &'a Volume,
    /// Input for the next iteration.
    pub z_next: &'a Volume,
    pub ema: &'a Volume,
    pub loss: f64,
    pub data_fidelity: f64,
    pub regularizer: f64,
    /// The tape of this iteration, after backward.
    pub tape: &'a Tape<f32>,
    /// Network input `z + η` on the tape.
    pub input_var: Var,
    /// `z` as used by the denoising term, when present.
    pub z_var: Option<Var>,
}

#[derive(Clone, Copy, PartialEq)]
enum Mode {
    Vanilla,
    Tada,
}

pub fn run_vanilla_dip(
    y: &Sinogram,
    g: &Geometry,
    cfg: &TadaConfig,
    ground_truth: Option<&Volume>,
) -> Result<(Volume, RunTrace)> {
    run(Mode::Vanilla, y, g, cfg, ground_truth, &mut |_| Ok(()))
}

pub fn run_vanilla_dip_with(
    y: &Sinogram,
    g: &Geometry,
    cfg: &TadaConfig,
    ground_truth: Option<&Volume>,
    observer: &mut dyn FnMut(&Iteration) -> Result<()>,
) -> Result<(Volume, RunTrace)> {
    run(Mode::Vanilla, y, g, cfg, ground_truth, observer)
}

pub fn run_tada_dip(
    y: &Sinogram,
    g: &Geometry,
    cfg: &TadaConfig,
    ground_truth: Option<&Volume>,
) -> Result<(Volume, RunTrace)> {
    run(Mode::Tada, y, g, cfg, ground_truth, &mut |_| Ok(()))
}

pub fn run_tada_dip_with(
    y: &Sinogram,
    g: &Geometry,
    cfg: &TadaConfig,
    ground_truth: Option<&Volume>,
    observer: &mut dyn FnMut(&Iteration) -> Result<()>,
) -> Result<(Volume, RunTrace)> {
    run(Mode::Tada, y, g, cfg, ground_truth, observer)
}

fn gaussian_volume(shape: [usize; 3], rng: &mut ChaCha8Rng) -> Volume {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Volume::new(shape, data).expect("consistent shape")
}

fn run(
    mode: Mode,
    y: &Sinogram,
    g: &Geometry,
    cfg: &TadaConfig,
    ground_truth: Option<&Volume>,
    observer: &mut dyn FnMut(&Iteration) -> Result<()>,
) -> Result<(Volume, RunTrace)> {
    cfg.validate()?;
    g.validate()?;
    let shape = g.volume_shape();
    if y.shape() != g.sinogram_shape() {
        return Err(shape_err(
            "dip",
            format!(
                "sinogram {:?} does not match geometry {:?}",
                y.shape(),
                g.sinogram_shape()
            ),
        ));
    }
    if let Some(gt) = ground_truth {
        if gt.shape() != shape {
            return Err(shape_err(
                "dip",
                format!("ground truth {:?} vs volume {:?}", gt.shape(), shape),
            ));
        }
    }
    cfg.unet.check_input(shape)?;

    let mut net: UNet<f32> = UNet::build(&cfg.unet, cfg.seed)?;
    let mut adam = AdamState::new(net.params());
    let mut ema = EmaState::new(cfg.ema_decay)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ INPUT_STREAM);
    let projector = Projector::new(g);
    let support = projector.support_mask();
    let op: Arc<dyn LinearOperator<f32>> = Arc::new(projector);
    let tensor_shape = vec![1, 1, shape[0], shape[1], shape[2]];
    let mut z = gaussian_volume(shape, &mut rng);
    let zeros = Volume::zeros(shape);
    let (beta, gamma) = match mode {
        Mode::Tada => (cfg.beta, cfg.gamma),
        Mode::Vanilla => (0.0, 0.0),
    };
    let mut trace = RunTrace::default();

    for k in 1..=cfg.iterations {
        let sigma = match mode {
            Mode::Tada => noise_sigma(&z, cfg.alpha),
            Mode::Vanilla => 0.0,
        };
        let eta = if sigma > 0.0 {
            let normal = Normal::new(0.0f32, sigma as f32)
                .map_err(|e| Error::NonFiniteGradient(e.to_string()))?;
            let data = (0..z.len()).map(|_| normal.sample(&mut rng)).collect();
            Volume::new(shape, data)?
        } else {
            zeros.clone()
        };
        let noisy: Vec<f32> = z
            .data()
            .iter()
            .zip(eta.data())
            .map(|(&a, &b)| a + b)
            .collect();

        let mut tape = Tape::new();
        let input_var = tape.constant(tensor_shape.clone(), noisy)?;
        let bound = net.forward(&mut tape, input_var)?;
        let mask = tape.constant(tensor_shape.clone(), support.data().to_vec())?;
        let output = tape.mul(mask, bound.output)?;
        let y_var = tape.constant(y.shape().to_vec(), y.data().to_vec())?;
        let z_var = if mode == Mode::Tada && beta != 0.0 {
            Some(tape.constant(tensor_shape.clone(), z.data().to_vec())?)
        } else {
            None
        };
        let lv = tada_loss_on_tape(&mut tape, op.clone(), y_var, output, z_var, beta, cfg.p)?;
        let loss = tape.value(lv.total)[0] as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged { iteration: k, loss });
        }
        tape.backward(lv.total)?;
        let grads = net.gradients(&tape, &bound);
        adam_step(net.params_mut(), &grads, &mut adam, cfg.learning_rate)?;

        let xhat = Volume::new(shape, tape.value(output).to_vec())?;
        ema.update(&xhat)?;
        let z_next = match mode {
            Mode::Tada => input_update(&z, &xhat, gamma)?,
            Mode::Vanilla => z.clone(),
        };
        let data_fidelity = tape.value(lv.data_fidelity)[0] as f64;
        let regularizer = lv.regularizer.map_or(0.0, |r| tape.value(r)[0] as f64);
        let shadow = ema.shadow().expect("updated above");

        if k == 1 || k % cfg.eval_every == 0 || k == cfg.iterations {
            let (psnr_ema, ssim_ema) = match ground_truth {
                Some(gt) => (
                    Some(metrics::psnr(shadow, gt, 1.0)?),
                    Some(metrics::ssim(shadow, gt, 1.0)?),
                ),
                None => (None, None),
            };
            trace.records.push(TraceRecord {
                iteration: k,
                loss,
                data_fidelity,
                regularizer,
                psnr_ema,
                ssim_ema,
            });
        }
        observer(&Iteration {
            index: k,
            sigma,
            eta: &eta,
            z: &z,
            xhat: &xhat,
            z_next: &z_next,
            ema: shadow,
            loss,
            data_fidelity,
            regularizer,
            tape: &tape,
            input_var,
            z_var,
        })?;
        z = z_next;
    }
    let out = ema.into_shadow().expect("at least one iteration");
    Ok((out, trace))
}
