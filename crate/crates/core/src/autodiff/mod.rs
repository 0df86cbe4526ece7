//! Dense reverse-mode automatic differentiation.
//!
//! A [`Tape`] is an arena of recorded operations. Every operation appends a
//! node whose inputs were recorded earlier, so the arena order is already a
//! topological order and [`Tape::backward`] is a single reverse sweep.
//!
//! Only the kernels the volumetric U-Net and the reconstruction losses need
//! are provided: elementwise maps, sum/mean reductions, 3D convolution,
//! trilinear upsampling, instance normalization, channel concatenation and
//! arbitrary user-supplied linear operators (e.g. a tomographic projector).

pub mod conv;
mod gradcheck;
pub mod interp;
mod norm;

use std::sync::Arc;

use crate::error::{invalid, shape_err, Error, Result};
use crate::Real;

pub use conv::ConvGeometry;
pub use gradcheck::{check_gradients, GradCheck};

/// Dense row-major tensor with an optional gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Real = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    pub requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(shape_err(
                "Tensor::new",
                format!(
                    "shape {shape:?} holds {expected} values, got {}",
                    data.len()
                ),
            ));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Marks the tensor as a differentiation target.
    pub fn requiring_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    /// Resets the accumulator to zeros (keeps it allocated).
    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Adds `g` into the gradient accumulator, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[T]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(shape_err(
                "accumulate_grad",
                format!(
                    "gradient has {} values, tensor has {}",
                    g.len(),
                    self.data.len()
                ),
            ));
        }
        match self.grad.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    /// Converts to another precision (drops the gradient).
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }
}

/// A linear map usable as a recorded operation. The backward rule applies the
/// adjoint, so implementors must supply an exact transpose.
pub trait LinearOperator<T: Real>: Send + Sync {
    fn input_shape(&self) -> Vec<usize>;
    fn output_shape(&self) -> Vec<usize>;
    fn apply(&self, x: &[T]) -> Vec<T>;
    fn apply_adjoint(&self, y: &[T]) -> Vec<T>;
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise<T> {
    Add,
    Sub,
    Mul,
    Scale(T),
    Abs,
    Square,
    LeakyRelu(T),
    Sigmoid,
}

impl<T> Elementwise<T> {
    fn is_binary(&self) -> bool {
        matches!(self, Self::Add | Self::Sub | Self::Mul)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
}

/// Default negative slope of [`Tape::leaky_relu`].
pub const LEAKY_RELU_SLOPE: f64 = 0.1;

enum Op<T: Real> {
    Leaf,
    Binary(Elementwise<T>, Var, Var),
    Unary(Elementwise<T>, Var),
    Reduce(Reduce, Var),
    Conv3d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeometry,
    },
    Upsample {
        input: Var,
        factor: usize,
    },
    InstanceNorm {
        input: Var,
        gain: Var,
        bias: Var,
        stats: norm::Stats<T>,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Linear {
        input: Var,
        op: Arc<dyn LinearOperator<T>>,
    },
}

impl<T: Real> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Binary(..) | Op::Unary(..) => "elementwise",
            Op::Reduce(..) => "reduce",
            Op::Conv3d { .. } => "conv3d",
            Op::Upsample { .. } => "upsample_trilinear",
            Op::InstanceNorm { .. } => "instance_norm",
            Op::Concat { .. } => "concat",
            Op::Linear { .. } => "linear",
        }
    }
}

struct Node<T: Real> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Arena of recorded operations.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    last_sweep: Vec<usize>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            last_sweep: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
            requires_grad: false,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    /// Records a copy of `t` as a leaf. Its `requires_grad` flag decides
    /// whether backward accumulates into it.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        let v = self.push(t.shape.clone(), t.data.clone(), Op::Leaf, t.requires_grad);
        self.nodes[v.0].requires_grad = t.requires_grad;
        v
    }

    /// Records a leaf that never receives gradient.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t.shape, t.data, Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    /// Detached copy of a recorded value.
    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor {
            shape: n.shape.clone(),
            data: n.value.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Accumulated gradient of a leaf, if it requires one and backward ran.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.node(v).grad.as_deref()
    }

    /// True when gradient can flow into `v` from some differentiable leaf.
    pub fn needs_grad(&self, v: Var) -> bool {
        self.node(v).needs_grad
    }

    pub fn is_leaf(&self, v: Var) -> bool {
        matches!(self.node(v).op, Op::Leaf)
    }

    /// Operation name of every node, in recording order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    /// Node indices visited (in order) by the most recent backward sweep.
    pub fn last_sweep(&self) -> &[usize] {
        &self.last_sweep
    }

    pub fn clear_grads(&mut self) {
        for n in &mut self.nodes {
            if let Some(g) = n.grad.as_mut() {
                g.iter_mut().for_each(|v| *v = T::zero());
            }
        }
    }

    pub fn elementwise(&mut self, kind: Elementwise<T>, a: Var, b: Option<Var>) -> Result<Var> {
        match (kind.is_binary(), b) {
            (true, Some(b)) => {
                let (na, nb) = (self.node(a), self.node(b));
                if na.shape != nb.shape {
                    return Err(shape_err(
                        "elementwise",
                        format!("{kind:?} of shapes {:?} and {:?}", na.shape, nb.shape),
                    ));
                }
                let value: Vec<T> = match kind {
                    Elementwise::Add => zip_map(&na.value, &nb.value, |x, y| x + y),
                    Elementwise::Sub => zip_map(&na.value, &nb.value, |x, y| x - y),
                    Elementwise::Mul => zip_map(&na.value, &nb.value, |x, y| x * y),
                    _ => unreachable!(),
                };
                let needs = na.needs_grad || nb.needs_grad;
                let shape = na.shape.clone();
                Ok(self.push(shape, value, Op::Binary(kind, a, b), needs))
            }
            (true, None) => Err(invalid("b", format!("{kind:?} needs a second operand"))),
            (false, Some(_)) => Err(invalid("b", format!("{kind:?} takes a single operand"))),
            (false, None) => {
                let na = self.node(a);
                let value: Vec<T> = match kind {
                    Elementwise::Scale(c) => na.value.iter().map(|&x| x * c).collect(),
                    Elementwise::Abs => na.value.iter().map(|&x| x.abs()).collect(),
                    Elementwise::Square => na.value.iter().map(|&x| x * x).collect(),
                    Elementwise::LeakyRelu(s) => na
                        .value
                        .iter()
                        .map(|&x| if x > T::zero() { x } else { x * s })
                        .collect(),
                    Elementwise::Sigmoid => na.value.iter().map(|&x| sigmoid(x)).collect(),
                    _ => unreachable!(),
                };
                let (shape, needs) = (na.shape.clone(), na.needs_grad);
                Ok(self.push(shape, value, Op::Unary(kind, a), needs))
            }
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Add, a, Some(b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Sub, a, Some(b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Mul, a, Some(b))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        self.elementwise(Elementwise::Scale(c), a, None)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.elementwise(Elementwise::Abs, a, None)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.elementwise(Elementwise::Square, a, None)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Result<Var> {
        self.elementwise(Elementwise::LeakyRelu(slope), a, None)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.elementwise(Elementwise::Sigmoid, a, None)
    }

    pub fn reduce(&mut self, kind: Reduce, a: Var) -> Result<Var> {
        let na = self.node(a);
        if na.value.is_empty() {
            return Err(Error::EmptyTensor("reduce"));
        }
        let total: T = na.value.iter().copied().sum();
        let value = match kind {
            Reduce::Sum => total,
            Reduce::Mean => total / T::lit(na.value.len() as f64),
        };
        let needs = na.needs_grad;
        Ok(self.push(Vec::new(), vec![value], Op::Reduce(kind, a), needs))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.reduce(Reduce::Sum, a)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.reduce(Reduce::Mean, a)
    }

    /// Zero-padded 3D cross-correlation over a 5-D `(n, c, d, h, w)` input.
    pub fn conv3d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Result<Var> {
        let (ni, nw, nb) = (self.node(input), self.node(weight), self.node(bias));
        let geom = ConvGeometry::new(&ni.shape, &nw.shape, stride, padding)?;
        if nb.value.len() != geom.out_channels {
            return Err(shape_err(
                "conv3d",
                format!(
                    "bias has {} values for {} output channels",
                    nb.value.len(),
                    geom.out_channels
                ),
            ));
        }
        let value = conv::forward(&geom, &ni.value, &nw.value, &nb.value);
        let needs = ni.needs_grad || nw.needs_grad || nb.needs_grad;
        Ok(self.push(
            geom.output_shape(),
            value,
            Op::Conv3d {
                input,
                weight,
                bias,
                geom,
            },
            needs,
        ))
    }

    /// Trilinear upsampling of the spatial axes by an integer factor,
    /// half-pixel sampling.
    pub fn upsample_trilinear(&mut self, input: Var, factor: usize) -> Result<Var> {
        if factor < 1 {
            return Err(invalid("factor", "upsampling factor must be at least 1"));
        }
        let ni = self.node(input);
        let (outer, dims) = split_5d("upsample_trilinear", &ni.shape)?;
        let out_dims = dims.map(|d| d * factor);
        let value = interp::resample_channels(&ni.value, outer, dims, out_dims);
        let shape = vec![
            ni.shape[0],
            ni.shape[1],
            out_dims[0],
            out_dims[1],
            out_dims[2],
        ];
        let needs = ni.needs_grad;
        Ok(self.push(shape, value, Op::Upsample { input, factor }, needs))
    }

    /// Per-sample, per-channel standardization over the spatial voxels
    /// followed by a per-channel affine map.
    pub fn instance_norm(&mut self, input: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (ni, ng, nb) = (self.node(input), self.node(gain), self.node(bias));
        let (_, dims) = split_5d("instance_norm", &ni.shape)?;
        let channels = ni.shape[1];
        if ng.value.len() != channels || nb.value.len() != channels {
            return Err(shape_err(
                "instance_norm",
                format!(
                    "gain/bias have {}/{} values for {channels} channels",
                    ng.value.len(),
                    nb.value.len()
                ),
            ));
        }
        let spatial = dims.iter().product();
        let (value, stats) = norm::forward(
            &ni.value,
            ni.shape[0],
            channels,
            spatial,
            &ng.value,
            &nb.value,
            eps,
        );
        let needs = ni.needs_grad || ng.needs_grad || nb.needs_grad;
        let shape = ni.shape.clone();
        Ok(self.push(
            shape,
            value,
            Op::InstanceNorm {
                input,
                gain,
                bias,
                stats,
            },
            needs,
        ))
    }

    /// Concatenates two 5-D tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.node(a), self.node(b));
        split_5d("concat", &na.shape)?;
        split_5d("concat", &nb.shape)?;
        if na.shape[0] != nb.shape[0] || na.shape[2..] != nb.shape[2..] {
            return Err(shape_err(
                "concat",
                format!("cannot concatenate {:?} and {:?}", na.shape, nb.shape),
            ));
        }
        let batch = na.shape[0];
        let (ca, cb) = (na.value.len() / batch, nb.value.len() / batch);
        let mut value = Vec::with_capacity(na.value.len() + nb.value.len());
        for n in 0..batch {
            value.extend_from_slice(&na.value[n * ca..(n + 1) * ca]);
            value.extend_from_slice(&nb.value[n * cb..(n + 1) * cb]);
        }
        let mut shape = na.shape.clone();
        shape[1] += nb.shape[1];
        let needs = na.needs_grad || nb.needs_grad;
        Ok(self.push(shape, value, Op::Concat { a, b }, needs))
    }

    /// Applies a linear operator; its adjoint is the backward rule.
    pub fn linear(&mut self, op: Arc<dyn LinearOperator<T>>, input: Var) -> Result<Var> {
        let ni = self.node(input);
        let expected: usize = op.input_shape().iter().product();
        if ni.value.len() != expected {
            return Err(shape_err(
                "linear",
                format!(
                    "operator expects {:?} ({expected} values), got {:?}",
                    op.input_shape(),
                    ni.shape
                ),
            ));
        }
        let value = op.apply(&ni.value);
        let shape = op.output_shape();
        let needs = ni.needs_grad;
        Ok(self.push(shape, value, Op::Linear { input, op }, needs))
    }

    /// Reverse sweep from a scalar `loss`. Gradients of differentiable leaves
    /// are added into their accumulators.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = self.node(loss);
        if root.value.len() != 1 {
            return Err(Error::NonScalarLoss(root.shape.clone()));
        }
        let root_needs_grad = root.needs_grad;
        self.last_sweep.clear();
        let mut adj: Vec<Option<Vec<T>>> = Vec::new();
        adj.resize_with(loss.0 + 1, || None);
        if !root_needs_grad {
            return Ok(());
        }
        adj[loss.0] = Some(vec![T::one()]);
        let mut sweep = Vec::new();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            sweep.push(i);
            match &node.op {
                Op::Leaf => {
                    // handed back to the leaf below
                    adj[i] = Some(g);
                }
                Op::Binary(kind, a, b) => {
                    let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let (ga, gb) = match kind {
                        Elementwise::Add => (g.clone(), g),
                        Elementwise::Sub => (g.clone(), g.iter().map(|&x| -x).collect()),
                        Elementwise::Mul => {
                            (zip_map(&g, vb, |u, y| u * y), zip_map(&g, va, |u, x| u * x))
                        }
                        _ => unreachable!(),
                    };
                    self.send(&mut adj, *a, ga);
                    self.send(&mut adj, *b, gb);
                }
                Op::Unary(kind, a) => {
                    let x = &self.nodes[a.0].value;
                    let ga: Vec<T> = match *kind {
                        Elementwise::Scale(c) => g.iter().map(|&u| u * c).collect(),
                        Elementwise::Abs => zip_map(&g, x, |u, x| u * sign(x)),
                        Elementwise::Square => zip_map(&g, x, |u, x| u * (x + x)),
                        Elementwise::LeakyRelu(s) => {
                            zip_map(&g, x, |u, x| if x > T::zero() { u } else { u * s })
                        }
                        Elementwise::Sigmoid => {
                            zip_map(&g, &node.value, |u, y| u * y * (T::one() - y))
                        }
                        _ => unreachable!(),
                    };
                    self.send(&mut adj, *a, ga);
                }
                Op::Reduce(kind, a) => {
                    let n = self.nodes[a.0].value.len();
                    let u = match kind {
                        Reduce::Sum => g[0],
                        Reduce::Mean => g[0] / T::lit(n as f64),
                    };
                    self.send(&mut adj, *a, vec![u; n]);
                }
                Op::Conv3d {
                    input,
                    weight,
                    bias,
                    geom,
                } => {
                    let grads = conv::backward(
                        geom,
                        &self.nodes[input.0].value,
                        &self.nodes[weight.0].value,
                        &g,
                        conv::Needs {
                            input: self.nodes[input.0].needs_grad,
                            weight: self.nodes[weight.0].needs_grad,
                            bias: self.nodes[bias.0].needs_grad,
                        },
                    );
                    if let Some(gi) = grads.input {
                        self.send(&mut adj, *input, gi);
                    }
                    if let Some(gw) = grads.weight {
                        self.send(&mut adj, *weight, gw);
                    }
                    if let Some(gb) = grads.bias {
                        self.send(&mut adj, *bias, gb);
                    }
                }
                Op::Upsample { input, factor } => {
                    let shape = &self.nodes[input.0].shape;
                    let outer = shape[0] * shape[1];
                    let dims = [shape[2], shape[3], shape[4]];
                    let out_dims = dims.map(|d| d * factor);
                    let gi = interp::resample_channels_adjoint(&g, outer, dims, out_dims);
                    self.send(&mut adj, *input, gi);
                }
                Op::InstanceNorm {
                    input,
                    gain,
                    bias,
                    stats,
                } => {
                    let shape = &self.nodes[input.0].shape;
                    let spatial = shape[2..].iter().product();
                    let grads = norm::backward(
                        &self.nodes[input.0].value,
                        shape[0],
                        shape[1],
                        spatial,
                        &self.nodes[gain.0].value,
                        stats,
                        &g,
                    );
                    self.send(&mut adj, *input, grads.input);
                    self.send(&mut adj, *gain, grads.gain);
                    self.send(&mut adj, *bias, grads.bias);
                }
                Op::Concat { a, b } => {
                    let batch = node.shape[0];
                    let ca = self.nodes[a.0].value.len() / batch;
                    let cb = self.nodes[b.0].value.len() / batch;
                    let mut ga = Vec::with_capacity(ca * batch);
                    let mut gb = Vec::with_capacity(cb * batch);
                    for n in 0..batch {
                        let chunk = &g[n * (ca + cb)..(n + 1) * (ca + cb)];
                        ga.extend_from_slice(&chunk[..ca]);
                        gb.extend_from_slice(&chunk[ca..]);
                    }
                    self.send(&mut adj, *a, ga);
                    self.send(&mut adj, *b, gb);
                }
                Op::Linear { input, op } => {
                    let gi = op.apply_adjoint(&g);
                    self.send(&mut adj, *input, gi);
                }
            }
        }

        self.last_sweep = sweep;
        for (i, g) in adj.into_iter().enumerate() {
            let node = &mut self.nodes[i];
            if let (Some(g), true) = (g, node.requires_grad) {
                match node.grad.as_mut() {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    None => node.grad = Some(g),
                }
            }
        }
        Ok(())
    }

    fn send(&self, adj: &mut [Option<Vec<T>>], to: Var, g: Vec<T>) {
        if !self.nodes[to.0].needs_grad {
            return;
        }
        match adj[to.0].as_mut() {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
            None => adj[to.0] = Some(g),
        }
    }
}

fn split_5d(op: &'static str, shape: &[usize]) -> Result<(usize, [usize; 3])> {
    if shape.len() != 5 {
        return Err(shape_err(
            op,
            format!("expected a 5-D tensor, got shape {shape:?}"),
        ));
    }
    Ok((shape[0] * shape[1], [shape[2], shape[3], shape[4]]))
}

fn zip_map<T: Real>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

/// Sign with `sign(0) = 0`.
pub(crate) fn sign<T: Real>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_leaf(tape: &mut Tape<f64>, data: &[f64]) -> Var {
        let t = Tensor::new(vec![data.len()], data.to_vec())
            .unwrap()
            .requiring_grad();
        tape.leaf(&t)
    }

    #[test]
    fn add_values() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(vec![2], vec![1.0, 2.0]).unwrap();
        let b = tape.constant(vec![2], vec![3.0, 4.0]).unwrap();
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c), &[4.0, 6.0]);
    }

    #[test]
    fn leaky_relu_negative_side() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(vec![1], vec![-1.0]).unwrap();
        let r = tape.leaky_relu(a, 0.1).unwrap();
        assert_eq!(tape.value(r), &[-0.1]);
    }

    #[test]
    fn abs_backward_uses_zero_sign_at_zero() {
        let mut tape = Tape::<f64>::new();
        let x = vec_leaf(&mut tape, &[-2.0, 0.0, 3.0]);
        let a = tape.abs(x).unwrap();
        let s = tape.sum(a).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn sum_and_mean() {
        let mut tape = Tape::<f64>::new();
        let x = vec_leaf(&mut tape, &[1.0, 2.0, 3.0]);
        let s = tape.sum(x).unwrap();
        assert_eq!(tape.value(s), &[6.0]);

        let mut tape = Tape::<f64>::new();
        let x = vec_leaf(&mut tape, &[1.0, 2.0, 3.0, 4.0]);
        let m = tape.mean(x).unwrap();
        tape.backward(m).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.25; 4]);
    }

    #[test]
    fn sum_of_abs() {
        let mut tape = Tape::<f64>::new();
        let x = vec_leaf(&mut tape, &[-2.0, 3.0]);
        let a = tape.abs(x).unwrap();
        let s = tape.sum(a).unwrap();
        assert_eq!(tape.value(s), &[5.0]);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[-1.0, 1.0]);
    }

    #[test]
    fn linear_and_bilinear_gradients() {
        let mut tape = Tape::<f64>::new();
        let x = vec_leaf(&mut tape, &[0.3; 5]);
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 5]);

        let mut tape = Tape::<f64>::new();
        let w = tape.constant(vec![3], vec![2.0, -1.0, 0.5]).unwrap();
        let x = vec_leaf(&mut tape, &[4.0, 5.0, 6.0]);
        let p = tape.mul(w, x).unwrap();
        let s = tape.sum(p).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, -1.0, 0.5]);
        assert!(tape.grad(w).is_none());
    }

    #[test]
    fn backward_accumulates_until_cleared() {
        let mut tape = Tape::<f64>::new();
        let x = vec_leaf(&mut tape, &[1.0, 2.0]);
        let sq = tape.square(x).unwrap();
        let s = tape.sum(sq).unwrap();
        tape.backward(s).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[4.0, 8.0]);
        tape.clear_grads();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0]);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(vec![2], vec![1.0, 2.0]).unwrap();
        let b = tape.constant(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let err = tape.add(a, b).unwrap_err();
        assert!(
            matches!(
                err,
                Error::Shape {
                    op: "elementwise",
                    ..
                }
            ),
            "{err}"
        );
    }

    #[test]
    fn non_scalar_loss_and_empty_reduce_are_rejected() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(
            &Tensor::new(vec![2], vec![1.0, 2.0])
                .unwrap()
                .requiring_grad(),
        );
        assert!(matches!(tape.backward(a), Err(Error::NonScalarLoss(_))));
        let e = tape.constant(vec![0], vec![]).unwrap();
        assert!(matches!(tape.sum(e), Err(Error::EmptyTensor(_))));
    }

    #[test]
    fn sweep_visits_each_node_once_in_reverse_order() {
        let mut tape = Tape::<f64>::new();
        let x = vec_leaf(&mut tape, &[1.0, -2.0]);
        let a = tape.abs(x).unwrap();
        let b = tape.square(x).unwrap();
        let c = tape.add(a, b).unwrap();
        let s = tape.sum(c).unwrap();
        tape.backward(s).unwrap();
        let visited = tape.last_sweep().to_vec();
        assert_eq!(
            visited,
            vec![s.index(), c.index(), b.index(), a.index(), x.index()]
        );
        assert_eq!(tape.grad(x).unwrap(), &[3.0, -5.0]);
    }

    #[test]
    fn tensor_rejects_inconsistent_length() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::<f32>::zeros(vec![2, 3, 4]);
        assert_eq!(t.numel(), 24);
    }
}
