//! Parameters and the layer building blocks shared by every network.

use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU64, Ordering};

use rand::Rng as _;

use super::{Graph, Scalar, Tensor, Var};
use crate::error::{param_err, Result};
use crate::Rng;

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

/// Identity of a parameter inside a graph; never persisted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(u64);

impl ParamId {
    fn fresh() -> Self {
        ParamId(NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed))
    }
}

/// A named tensor owned by a network, with its accumulated gradient.
///
/// Non-trainable parameters (batch-norm running statistics) are stored and
/// checkpointed like the others but never receive gradients.
#[derive(Debug)]
pub struct Param<T: Scalar = f32> {
    id: ParamId,
    pub name: String,
    pub value: Arc<Tensor<T>>,
    pub grad: Vec<T>,
    pub trainable: bool,
}

impl<T: Scalar> Clone for Param<T> {
    /// Clones get a fresh identity so that a copy (e.g. a target network)
    /// never aliases the original on a graph.
    fn clone(&self) -> Self {
        Self {
            id: ParamId::fresh(),
            name: self.name.clone(),
            value: self.value.clone(),
            grad: self.grad.clone(),
            trainable: self.trainable,
        }
    }
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let n = value.numel();
        Self {
            id: ParamId::fresh(),
            name: name.into(),
            value: Arc::new(value),
            grad: vec![T::zero(); n],
            trainable: true,
        }
    }

    pub fn buffer(name: impl Into<String>, value: Tensor<T>) -> Self {
        Self {
            trainable: false,
            ..Self::new(name, value)
        }
    }

    /// Uniform initialisation in `[-bound, bound]`.
    pub fn uniform(name: impl Into<String>, shape: &[usize], bound: f64, rng: &mut Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::lit(rng.gen_range(-bound..=bound)))
            .collect();
        Self::new(name, Tensor::new(shape, data).expect("sized by shape"))
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn data(&self) -> &[T] {
        self.value.data()
    }

    /// Mutable access to the values (copy-on-write if a graph still holds them).
    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.value).data_mut()
    }

    pub fn set_value(&mut self, value: Tensor<T>) -> Result<()> {
        if value.shape() != self.value.shape() {
            return Err(param_err!(
                "{}: shape {:?} does not match {:?}",
                self.name,
                value.shape(),
                self.value.shape()
            ));
        }
        self.value = Arc::new(value);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }
}

/// Anything that owns parameters.
pub trait Module<T: Scalar> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>));

    /// Adds this graph's gradients into every owned parameter.
    fn collect_grads(&mut self, g: &Graph<T>) {
        self.visit_mut(&mut |p| {
            if let Some(grad) = g.param_grad(p) {
                p.grad.iter_mut().zip(&grad).for_each(|(a, &b)| *a += b);
            }
        });
    }

    fn zero_grads(&mut self) {
        self.visit_mut(&mut |p| p.zero_grad());
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| n += p.value.numel());
        n
    }
}

/// Training mode uses batch statistics in batch norm and updates the running estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// `y = x · W + b` with `W[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear<T: Scalar = f32> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(name: &str, inputs: usize, outputs: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / libm::sqrt(inputs.max(1) as f64);
        Self {
            weight: Param::uniform(alloc::format!("{name}.weight"), &[inputs, outputs], bound, rng),
            bias: Param::uniform(alloc::format!("{name}.bias"), &[outputs], bound, rng),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let w = g.param(&self.weight);
        let b = g.param(&self.bias);
        let y = g.matmul(x, w)?;
        g.bias_add(y, b)
    }
}

impl<T: Scalar> Module<T> for Linear<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.weight);
        f(&self.bias);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Square-kernel convolution with bias.
#[derive(Debug, Clone)]
pub struct Conv2d<T: Scalar = f32> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> Conv2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(param_err!("{name}: stride must be at least 1"));
        }
        let bound = 1.0 / libm::sqrt((in_channels * kernel * kernel).max(1) as f64);
        Ok(Self {
            weight: Param::uniform(
                alloc::format!("{name}.weight"),
                &[out_channels, in_channels, kernel, kernel],
                bound,
                rng,
            ),
            bias: Param::uniform(alloc::format!("{name}.bias"), &[out_channels], bound, rng),
            stride,
            padding,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let w = g.param(&self.weight);
        let b = g.param(&self.bias);
        let y = g.conv2d(x, w, self.stride, self.padding)?;
        g.bias_add(y, b)
    }
}

impl<T: Scalar> Module<T> for Conv2d<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.weight);
        f(&self.bias);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Transposed convolution with bias; weight layout `[in, out, K, K]`.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d<T: Scalar = f32> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub stride: usize,
    pub output_padding: usize,
}

impl<T: Scalar> ConvTranspose2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        output_padding: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(param_err!("{name}: stride must be at least 1"));
        }
        let bound = 1.0 / libm::sqrt((out_channels * kernel * kernel).max(1) as f64);
        Ok(Self {
            weight: Param::uniform(
                alloc::format!("{name}.weight"),
                &[in_channels, out_channels, kernel, kernel],
                bound,
                rng,
            ),
            bias: Param::uniform(alloc::format!("{name}.bias"), &[out_channels], bound, rng),
            stride,
            output_padding,
        })
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let w = g.param(&self.weight);
        let b = g.param(&self.bias);
        let y = g.conv_transpose2d(x, w, self.stride, self.output_padding)?;
        g.bias_add(y, b)
    }
}

impl<T: Scalar> Module<T> for ConvTranspose2d<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.weight);
        f(&self.bias);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Batch normalisation over axis 1 with running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm<T: Scalar = f32> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(name: &str, channels: usize, momentum: f64, eps: f64) -> Self {
        Self {
            gamma: Param::new(
                alloc::format!("{name}.gamma"),
                Tensor::full(&[channels], T::one()),
            ),
            beta: Param::new(alloc::format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: Param::buffer(
                alloc::format!("{name}.running_mean"),
                Tensor::zeros(&[channels]),
            ),
            running_var: Param::buffer(
                alloc::format!("{name}.running_var"),
                Tensor::full(&[channels], T::one()),
            ),
            momentum,
            eps,
        }
    }

    pub fn forward(&mut self, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<Var> {
        let gamma = g.param(&self.gamma);
        let beta = g.param(&self.beta);
        let eps = T::lit(self.eps);
        match mode {
            Mode::Train => {
                let (y, mean, var) = g.batch_norm_train(x, gamma, beta, eps)?;
                let m = T::lit(self.momentum);
                let keep = T::one() - m;
                for (r, b) in self.running_mean.data_mut().iter_mut().zip(&mean) {
                    *r = keep * *r + m * *b;
                }
                for (r, b) in self.running_var.data_mut().iter_mut().zip(&var) {
                    *r = keep * *r + m * *b;
                }
                Ok(y)
            }
            Mode::Eval => g.batch_norm_eval(
                x,
                gamma,
                beta,
                self.running_mean.data(),
                self.running_var.data(),
                eps,
            ),
        }
    }
}

impl<T: Scalar> Module<T> for BatchNorm<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.gamma);
        f(&self.beta);
        f(&self.running_mean);
        f(&self.running_var);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
        f(&mut self.running_mean);
        f(&mut self.running_var);
    }
}

/// Gate parameters of one recurrent layer: `[x, h] · W + b` with gate
/// order input, forget, candidate, output.
#[derive(Debug, Clone)]
pub struct LstmCell<T: Scalar = f32> {
    pub gates: Linear<T>,
    pub hidden: usize,
}

impl<T: Scalar> LstmCell<T> {
    pub fn new(name: &str, inputs: usize, hidden: usize, rng: &mut Rng) -> Self {
        let mut gates = Linear::new(name, inputs + hidden, 4 * hidden, rng);
        // PyTorch-style bound 1/sqrt(hidden) for recurrent layers.
        let bound = 1.0 / libm::sqrt(hidden.max(1) as f64);
        for p in [&mut gates.weight, &mut gates.bias] {
            let shape = p.value.shape().to_vec();
            *p = Param::uniform(p.name.clone(), &shape, bound, rng);
        }
        Self { gates, hidden }
    }

    pub fn inputs(&self) -> usize {
        self.gates.inputs() - self.hidden
    }
}

impl<T: Scalar> Module<T> for LstmCell<T> {
    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.gates.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.gates.visit_mut(f);
    }
}

/// One gated recurrent update; returns `(h', c')`.
pub fn lstm_step<T: Scalar>(
    g: &mut Graph<T>,
    cell: &LstmCell<T>,
    x: Var,
    h: Var,
    c: Var,
) -> Result<(Var, Var)> {
    let hd = cell.hidden;
    let xh = g.concat_cols(&[x, h])?;
    let gates = cell.gates.forward(g, xh)?;
    let i = g.narrow_cols(gates, 0, hd)?;
    let f = g.narrow_cols(gates, hd, hd)?;
    let cand = g.narrow_cols(gates, 2 * hd, hd)?;
    let o = g.narrow_cols(gates, 3 * hd, hd)?;
    let i = g.sigmoid(i);
    let f = g.sigmoid(f);
    let cand = g.tanh(cand);
    let o = g.sigmoid(o);
    let keep = g.mul(f, c)?;
    let write = g.mul(i, cand)?;
    let c_next = g.add(keep, write)?;
    let squashed = g.tanh(c_next);
    let h_next = g.mul(o, squashed)?;
    Ok((h_next, c_next))
}
