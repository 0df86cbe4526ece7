use std::f64::consts::PI;
use std::str::FromStr;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tomo::Projector;
use crate::{Sinogram, Volume};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RampFilter {
    #[default]
    RamLak,
    Hann,
}

impl FromStr for RampFilter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ramlak" | "ram-lak" | "ramp" => Ok(Self::RamLak),
            "hann" => Ok(Self::Hann),
            other => Err(invalid(
                "filter",
                format!("unknown filter `{other}` (ramlak|hann)"),
            )),
        }
    }
}

/// Frequency response of the band-limited ramp on a zero-padded grid.
///
/// Built as the FFT of the sampled spatial ramp kernel (1/4 at the origin,
/// −1/(πn)² at odd lags) rather than a sampled |ω|, which keeps the DC term
/// right.
fn ramp_response(padded: usize, spacing: f64, filter: RampFilter) -> Vec<f64> {
    let mut kernel = vec![Complex::new(0.0, 0.0); padded];
    kernel[0].re = 0.25 / (spacing * spacing);
    for n in 1..padded / 2 {
        if n % 2 == 1 {
            let v = -1.0 / ((PI * n as f64 * spacing).powi(2));
            kernel[n].re = v;
            kernel[padded - n].re = v;
        }
    }
    FftPlanner::new()
        .plan_fft_forward(padded)
        .process(&mut kernel);
    kernel
        .iter()
        .enumerate()
        .map(|(k, h)| {
            // frequency in cycles per sample, in [-1/2, 1/2)
            let f = if k <= padded / 2 {
                k as f64
            } else {
                k as f64 - padded as f64
            } / padded as f64;
            let window = match filter {
                RampFilter::RamLak => 1.0,
                RampFilter::Hann => 0.5 * (1.0 + (2.0 * PI * f).cos()),
            };
            h.re * spacing * window
        })
        .collect()
}

impl Projector {
    /// Ramp-filters every detector row of `y`.
    pub fn filter_sinogram(&self, y: &Sinogram, filter: RampFilter) -> Result<Sinogram> {
        self.check_sinogram("fbp", y)?;
        let g = self.geometry();
        let bins = g.num_det();
        let padded = (2 * bins).next_power_of_two();
        let response = ramp_response(padded, g.det_spacing(), filter);
        let mut planner = FftPlanner::new();
        let (fwd, inv) = (
            planner.plan_fft_forward(padded),
            planner.plan_fft_inverse(padded),
        );
        let mut buf = vec![Complex::new(0.0f64, 0.0); padded];
        let mut out = y.clone();
        for row in out.data_mut().chunks_exact_mut(bins) {
            buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
            for (c, &v) in buf.iter_mut().zip(row.iter()) {
                c.re = v as f64;
            }
            fwd.process(&mut buf);
            for (c, &h) in buf.iter_mut().zip(&response) {
                *c *= h;
            }
            inv.process(&mut buf);
            for (v, c) in row.iter_mut().zip(&buf) {
                *v = (c.re / padded as f64) as f32;
            }
        }
        Ok(out)
    }

    /// Filtered backprojection with the matched backprojector.
    pub fn fbp(&self, y: &Sinogram, filter: RampFilter) -> Result<Volume> {
        let g = self.geometry();
        if g.num_views() == 0 {
            return Err(invalid("num_views", "FBP needs at least one view"));
        }
        let filtered = self.filter_sinogram(y, filter)?;
        let mut x = self.adjoint(&filtered)?;
        let scale = (PI * g.det_spacing() / g.num_views() as f64) as f32;
        x.data_mut().iter_mut().for_each(|v| *v *= scale);
        Ok(x)
    }
}
