//! Volumetric U-Net used as the image prior.
//!
//! Level `l` runs at `1/2^l` resolution with `base · growth^l` channels.
//! Each level has two 3³ conv + instance norm + leaky ReLU blocks; the
//! encoder halves resolution with a stride-2 3³ conv, the decoder doubles it
//! with a 1³ conv followed by trilinear upsampling (the two commute exactly,
//! and the conv is cheaper at the coarse scale) and concatenates the skip
//! features. A 1³ head and a sigmoid produce a single channel in (0, 1).
//!
//! Convolutions that feed an instance norm carry no bias: the norm removes
//! any per-channel constant.

use std::fmt::Write as _;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var, LEAKY_RELU_SLOPE};
use crate::error::{invalid, shape_err, Result};
use crate::Real;

const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetConfig {
    /// Number of downsampling steps.
    pub depth: usize,
    pub base_channels: usize,
    pub channel_growth: usize,
    /// Concatenate encoder features into the decoder.
    pub skip: bool,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            depth: 3,
            base_channels: 8,
            channel_growth: 2,
            skip: true,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(invalid("depth", "must be at least 1"));
        }
        if self.base_channels < 1 {
            return Err(invalid("base_channels", "must be at least 1"));
        }
        if self.channel_growth < 1 {
            return Err(invalid("channel_growth", "must be at least 1"));
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_growth.pow(level as u32)
    }

    /// Every spatial extent must be a multiple of this.
    pub fn divisor(&self) -> usize {
        1 << self.depth
    }

    pub fn check_input(&self, spatial: [usize; 3]) -> Result<()> {
        let d = self.divisor();
        if spatial.iter().any(|&n| n == 0 || n % d != 0) {
            return Err(shape_err(
                "unet",
                format!("spatial extents {spatial:?} must be positive multiples of 2^depth = {d}"),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    /// Stride-1 3³ conv, norm, activation.
    Block,
    /// Stride-2 3³ conv, norm, activation.
    Down,
    /// 1³ conv then ×2 trilinear upsampling.
    Up,
    /// 1³ conv then sigmoid.
    Head,
}

/// One row of the architecture table.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
    /// Resolution level of the layer's input.
    pub level: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    /// Indices into the parameter list, in the order weight, [bias], [gain, shift].
    params: Vec<usize>,
}

impl Layer {
    fn has_norm(&self) -> bool {
        matches!(self.kind, LayerKind::Block | LayerKind::Down)
    }

    /// Closed-form parameter count of this layer.
    pub fn param_count(&self) -> usize {
        let weights = self.out_channels * self.in_channels * self.kernel.pow(3);
        if self.has_norm() {
            weights + 2 * self.out_channels
        } else {
            weights + self.out_channels
        }
    }
}

#[derive(Clone, Debug)]
pub struct NamedParam<T: Real> {
    pub name: String,
    pub tensor: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct UNet<T: Real = f32> {
    config: UNetConfig,
    layers: Vec<Layer>,
    params: Vec<NamedParam<T>>,
}

/// Variables recorded by one forward pass.
#[derive(Clone, Debug)]
pub struct Bound {
    pub output: Var,
    /// Parameter leaves, parallel to [`UNet::params`].
    pub params: Vec<Var>,
}

pub fn build_unet(config: &UNetConfig, seed: u64) -> Result<UNet<f32>> {
    UNet::build(config, seed)
}

struct Builder<T: Real> {
    rng: ChaCha8Rng,
    layers: Vec<Layer>,
    params: Vec<NamedParam<T>>,
}

impl<T: Real> Builder<T> {
    fn uniform(&mut self, name: String, shape: Vec<usize>, bound: f64) -> usize {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::lit(self.rng.random_range(-bound..bound)))
            .collect();
        self.push(name, shape, data)
    }

    fn push(&mut self, name: String, shape: Vec<usize>, data: Vec<T>) -> usize {
        let tensor = Tensor::new(shape, data)
            .expect("consistent parameter shape")
            .requiring_grad();
        self.params.push(NamedParam { name, tensor });
        self.params.len() - 1
    }

    fn layer(&mut self, name: &str, kind: LayerKind, level: usize, cin: usize, cout: usize) {
        let (kernel, stride): (usize, usize) = match kind {
            LayerKind::Block => (3, 1),
            LayerKind::Down => (3, 2),
            LayerKind::Up | LayerKind::Head => (1, 1),
        };
        let fan_in = cin * kernel.pow(3);
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut params = vec![self.uniform(
            format!("{name}.weight"),
            vec![cout, cin, kernel, kernel, kernel],
            bound,
        )];
        let mut layer = Layer {
            name: name.to_string(),
            kind,
            level,
            in_channels: cin,
            out_channels: cout,
            kernel,
            stride,
            params: Vec::new(),
        };
        if layer.has_norm() {
            params.push(self.push(format!("{name}.gain"), vec![cout], vec![T::one(); cout]));
            params.push(self.push(format!("{name}.shift"), vec![cout], vec![T::zero(); cout]));
        } else {
            params.push(self.uniform(format!("{name}.bias"), vec![cout], bound));
        }
        layer.params = params;
        self.layers.push(layer);
    }
}

impl<T: Real> UNet<T> {
    pub fn build(config: &UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            rng: ChaCha8Rng::seed_from_u64(seed),
            layers: Vec::new(),
            params: Vec::new(),
        };
        let c = |l| config.channels(l);
        b.layer("enc0.conv1", LayerKind::Block, 0, 1, c(0));
        b.layer("enc0.conv2", LayerKind::Block, 0, c(0), c(0));
        for l in 1..=config.depth {
            b.layer(
                &format!("enc{l}.down"),
                LayerKind::Down,
                l - 1,
                c(l - 1),
                c(l),
            );
            b.layer(&format!("enc{l}.conv1"), LayerKind::Block, l, c(l), c(l));
            b.layer(&format!("enc{l}.conv2"), LayerKind::Block, l, c(l), c(l));
        }
        for l in (1..=config.depth).rev() {
            let cin = if config.skip { 2 * c(l - 1) } else { c(l - 1) };
            b.layer(
                &format!("dec{}.up", l - 1),
                LayerKind::Up,
                l,
                c(l),
                c(l - 1),
            );
            b.layer(
                &format!("dec{}.conv1", l - 1),
                LayerKind::Block,
                l - 1,
                cin,
                c(l - 1),
            );
            b.layer(
                &format!("dec{}.conv2", l - 1),
                LayerKind::Block,
                l - 1,
                c(l - 1),
                c(l - 1),
            );
        }
        b.layer("head", LayerKind::Head, 0, c(0), 1);
        Ok(Self {
            config: config.clone(),
            layers: b.layers,
            params: b.params,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn params(&self) -> &[NamedParam<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [NamedParam<T>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Flattened copy of every parameter value, in parameter order.
    pub fn flat_params(&self) -> Vec<T> {
        self.params
            .iter()
            .flat_map(|p| p.tensor.data().iter().copied())
            .collect()
    }

    /// Zeroes the head so the network outputs exactly 0.5 everywhere.
    pub fn zero_final_layer(&mut self) {
        let head = self.layers.last().expect("head layer").params.clone();
        for i in head {
            self.params[i]
                .tensor
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = T::zero());
        }
    }

    /// Plain-text listing: one row per layer plus a total line.
    pub fn architecture_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<12} {:<6} {:>5} {:>5} {:>6} {:>6} {:>6} {:>9}",
            "layer", "kind", "level", "in", "out", "kernel", "stride", "params"
        );
        for l in &self.layers {
            let kind = match l.kind {
                LayerKind::Block => "block",
                LayerKind::Down => "down",
                LayerKind::Up => "up",
                LayerKind::Head => "head",
            };
            let _ = writeln!(
                s,
                "{:<12} {:<6} {:>5} {:>5} {:>6} {:>6} {:>6} {:>9}",
                l.name,
                kind,
                l.level,
                l.in_channels,
                l.out_channels,
                l.kernel,
                l.stride,
                l.param_count()
            );
        }
        let _ = writeln!(s, "total {}", self.param_count());
        s
    }

    /// Records a forward pass of a `(n, 1, d, h, w)` input on `tape`.
    pub fn forward(&self, tape: &mut Tape<T>, input: Var) -> Result<Bound> {
        let shape = tape.shape(input).to_vec();
        if shape.len() != 5 || shape[1] != 1 {
            return Err(shape_err(
                "unet",
                format!("expected a (n, 1, d, h, w) input, got {shape:?}"),
            ));
        }
        self.config.check_input([shape[2], shape[3], shape[4]])?;
        let pv: Vec<Var> = self.params.iter().map(|p| tape.leaf(&p.tensor)).collect();
        let mut zero_bias: Vec<Option<Var>> =
            vec![None; self.config.channels(self.config.depth) * 2 + 1];
        let slope = T::lit(LEAKY_RELU_SLOPE);
        let eps = T::lit(NORM_EPS);

        let mut layers = self.layers.iter();
        let mut apply = |tape: &mut Tape<T>, x: Var| -> Result<Var> {
            let l = layers.next().expect("layer plan matches build order");
            let w = pv[l.params[0]];
            match l.kind {
                LayerKind::Block | LayerKind::Down => {
                    let slot = &mut zero_bias[l.out_channels];
                    let bias = match *slot {
                        Some(b) => b,
                        None => {
                            let b = tape
                                .constant(vec![l.out_channels], vec![T::zero(); l.out_channels])?;
                            *slot = Some(b);
                            b
                        }
                    };
                    let s = l.stride;
                    let h = tape.conv3d(x, w, bias, [s; 3], [1; 3])?;
                    let h = tape.instance_norm(h, pv[l.params[1]], pv[l.params[2]], eps)?;
                    tape.leaky_relu(h, slope)
                }
                LayerKind::Up => {
                    let h = tape.conv3d(x, w, pv[l.params[1]], [1; 3], [0; 3])?;
                    tape.upsample_trilinear(h, 2)
                }
                LayerKind::Head => {
                    let h = tape.conv3d(x, w, pv[l.params[1]], [1; 3], [0; 3])?;
                    tape.sigmoid(h)
                }
            }
        };

        let depth = self.config.depth;
        let mut skips = Vec::with_capacity(depth);
        let mut x = apply(tape, input)?;
        x = apply(tape, x)?;
        for _ in 1..=depth {
            skips.push(x);
            x = apply(tape, x)?;
            x = apply(tape, x)?;
            x = apply(tape, x)?;
        }
        for _ in (1..=depth).rev() {
            x = apply(tape, x)?;
            let skip = skips.pop().expect("one skip per level");
            if self.config.skip {
                x = tape.concat_channels(skip, x)?;
            }
            x = apply(tape, x)?;
            x = apply(tape, x)?;
        }
        let output = apply(tape, x)?;
        Ok(Bound { output, params: pv })
    }

    /// Evaluates the network without keeping the tape.
    pub fn predict(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.leaf(input);
        let b = self.forward(&mut tape, x)?;
        Ok(tape.tensor(b.output))
    }

    /// Gradients of every parameter after `tape.backward`, zero where none flowed.
    pub fn gradients(&self, tape: &Tape<T>, bound: &Bound) -> Vec<Vec<T>> {
        self.params
            .iter()
            .zip(&bound.params)
            .map(|(p, &v)| match tape.grad(v) {
                Some(g) => g.to_vec(),
                None => vec![T::zero(); p.tensor.numel()],
            })
            .collect()
    }
}
