//! The recording tape and its backward rules.

use alloc::collections::BTreeMap;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use super::conv::{self, Geometry};
use super::gemm::{gemm, MatRef};
use super::nn::{Param, ParamId};
use super::{Scalar, Tensor};
use crate::error::{contract_err, dim_err, param_err, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    BiasAdd {
        x: Var,
        bias: Var,
        channels: usize,
        inner: usize,
    },
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
        b_transposed: bool,
    },
    LeakyRelu(Var, T),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Sqrt(Var),
    Sum(Var),
    Mean(Var),
    SumCols {
        x: Var,
        cols: usize,
    },
    Reshape(Var),
    ConcatCols {
        parts: Vec<(Var, usize)>,
        rows: usize,
    },
    ConcatRows(Vec<Var>),
    NarrowCols {
        x: Var,
        start: usize,
        len: usize,
        cols: usize,
    },
    IndexRows {
        x: Var,
        idx: Vec<usize>,
        row: usize,
    },
    Take {
        x: Var,
        idx: Vec<usize>,
    },
    L2NormalizeRows {
        x: Var,
        norms: Vec<T>,
        dim: usize,
    },
    LogSoftmaxRows {
        x: Var,
        dim: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: Geometry,
        filters: usize,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        /// Geometry of the *output* image read back at the input grid.
        geom: Geometry,
        in_channels: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        channels: usize,
        inner: usize,
        train: bool,
    },
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Append-only tape of operations for one forward/backward pass.
///
/// A graph built with [`Graph::inference`] records values only; nothing
/// in it requires a gradient.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    params: BTreeMap<ParamId, Vec<Var>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn zip_map<T: Scalar>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            params: BTreeMap::new(),
            backward_done: false,
        }
    }

    /// A graph that never tracks gradients.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad =
            self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_flagged(Arc::new(value), op, requires_grad)
    }

    fn push_flagged(&mut self, value: Arc<Tensor<T>>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert!(!self.backward_done, "tape is read-only after backward");
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_flagged(Arc::new(value), Op::Leaf, false)
    }

    /// A differentiable input (the gradient is kept on the tape).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        let rg = self.grad_enabled;
        self.push_flagged(Arc::new(value), Op::Leaf, rg)
    }

    /// Snapshots a parameter. Frozen parameters and inference graphs yield constants.
    pub fn param(&mut self, p: &Param<T>) -> Var {
        let rg = self.grad_enabled && p.trainable;
        let v = self.push_flagged(p.value.clone(), Op::Leaf, rg);
        if rg {
            self.params.entry(p.id()).or_default().push(v);
        }
        v
    }

    /// Copies a value into a fresh constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.push_flagged(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Value of a single-element tensor.
    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    /// Sum of the gradients of every snapshot taken of `p`.
    pub fn param_grad(&self, p: &Param<T>) -> Option<Vec<T>> {
        let vars = self.params.get(&p.id())?;
        let mut total: Option<Vec<T>> = None;
        for v in vars {
            if let Some(g) = self.grad(*v) {
                match &mut total {
                    None => total = Some(g.to_vec()),
                    Some(t) => t.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
                }
            }
        }
        total
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err!(
                "{}: shapes {:?} and {:?} differ",
                what,
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn map_unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(src.shape(), data).expect("same size");
        self.push(value, op, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = zip_map(self.data(a), self.data(b), |x, y| x + y);
        let value = Tensor::new(self.shape(a), data)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let data = zip_map(self.data(a), self.data(b), |x, y| x - y);
        let value = Tensor::new(self.shape(a), data)?;
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = zip_map(self.data(a), self.data(b), |x, y| x * y);
        let value = Tensor::new(self.shape(a), data)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.map_unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        self.map_unary(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -T::one())
    }

    /// Adds `bias[C]` along axis 1 of `x[N, C, ...]`.
    pub fn bias_add(&mut self, x: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || self.shape(bias) != [shape[1]] {
            return Err(dim_err!(
                "bias {:?} does not match channels of {:?}",
                self.shape(bias),
                shape
            ));
        }
        let channels = shape[1];
        let inner: usize = shape[2..].iter().product();
        let b = self.data(bias);
        let mut data = self.data(x).to_vec();
        for (i, chunk) in data.chunks_mut(inner).enumerate() {
            let bc = b[i % channels];
            chunk.iter_mut().for_each(|v| *v += bc);
        }
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(
            value,
            Op::BiasAdd {
                x,
                bias,
                channels,
                inner,
            },
            &[x, bias],
        ))
    }

    fn matmul_impl(&mut self, a: Var, b: Var, b_transposed: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(dim_err!("matmul needs 2-D operands, got {:?} and {:?}", sa, sb));
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if b_transposed {
            (sb[1], sb[0])
        } else {
            (sb[0], sb[1])
        };
        if k != kb {
            return Err(dim_err!("matmul inner dimensions {:?} x {:?}", sa, sb));
        }
        let mut out = vec![T::zero(); m * n];
        let bref = if b_transposed {
            MatRef::t(self.data(b), n, k)
        } else {
            MatRef::new(self.data(b), k, n)
        };
        gemm(MatRef::new(self.data(a), m, k), bref, &mut out, T::zero());
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(
            value,
            Op::MatMul {
                a,
                b,
                m,
                k,
                n,
                b_transposed,
            },
            &[a, b],
        ))
    }

    /// `a[m,k] · b[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a[m,k] · b[n,k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    /// `max(x, 0) + slope * min(x, 0)`.
    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        self.map_unary(x, Op::LeakyRelu(x, slope), |v| if v > T::zero() { v } else { v * slope })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, T::zero())
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map_unary(x, Op::Sigmoid(x), |v| {
            if v >= T::zero() {
                T::one() / (T::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::one() + e)
            }
        })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map_unary(x, Op::Tanh(x), |v| v.tanh())
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map_unary(x, Op::Exp(x), |v| v.exp())
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.map_unary(x, Op::Log(x), |v| v.ln())
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.map_unary(x, Op::Square(x), |v| v * v)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.map_unary(x, Op::Sqrt(x), |v| v.sqrt())
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.data(x).iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::lit(self.value(x).numel() as f64);
        let s: T = self.data(x).iter().copied().sum();
        self.push(Tensor::scalar(s / n), Op::Mean(x), &[x])
    }

    /// Row sums of `x[N, D]`, giving `[N]`.
    pub fn sum_cols(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x);
        if shape.len() != 2 {
            return Err(dim_err!("sum_cols needs a 2-D input, got {:?}", shape));
        }
        let (rows, cols) = (shape[0], shape[1]);
        let data: Vec<T> = self
            .data(x)
            .chunks(cols.max(1))
            .take(rows)
            .map(|r| r.iter().copied().sum())
            .collect();
        let value = Tensor::new(&[rows], data)?;
        Ok(self.push(value, Op::SumCols { x, cols }, &[x]))
    }

    /// L2 norm of every row of `x[N, D]` (no gradient through zero rows' kink).
    pub fn row_norms(&mut self, x: Var) -> Result<Var> {
        let sq = self.square(x);
        let s = self.sum_cols(sq)?;
        Ok(self.sqrt(s))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = (*self.nodes[x.0].value).clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Concatenates 2-D tensors with equal row counts along axis 1.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = match parts.first() {
            Some(&p) => self.shape(p).first().copied().unwrap_or(0),
            None => return Err(contract_err!("concat of zero tensors")),
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(dim_err!("concat_cols: part {:?} does not have {} rows", s, rows));
            }
            widths.push((p, s[1]));
        }
        let total: usize = widths.iter().map(|w| w.1).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &(p, w) in &widths {
                data.extend_from_slice(&self.data(p)[r * w..(r + 1) * w]);
            }
        }
        let value = Tensor::new(&[rows, total], data)?;
        Ok(self.push(
            value,
            Op::ConcatCols {
                parts: widths,
                rows,
            },
            parts,
        ))
    }

    /// Concatenates tensors along axis 0; trailing dimensions must agree.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| contract_err!("concat of zero tensors"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != tail[..] {
                return Err(dim_err!("concat_rows: {:?} vs trailing {:?}", s, tail));
            }
            rows += s[0];
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.data(p));
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Columns `start..start+len` of `x[N, D]`.
    pub fn narrow_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || start + len > s[1] {
            return Err(dim_err!("narrow {}..{} out of {:?}", start, start + len, s));
        }
        let (rows, cols) = (s[0], s[1]);
        let src = self.data(x);
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let value = Tensor::new(&[rows, len], data)?;
        Ok(self.push(
            value,
            Op::NarrowCols {
                x,
                start,
                len,
                cols,
            },
            &[x],
        ))
    }

    /// Gathers rows (slices along axis 0); indices may repeat.
    pub fn index_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() {
            return Err(dim_err!("index_rows on a 0-d tensor"));
        }
        let row: usize = s[1..].iter().product();
        let src = self.data(x);
        let mut data = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            if i >= s[0] {
                return Err(dim_err!("row {} out of {}", i, s[0]));
            }
            data.extend_from_slice(&src[i * row..(i + 1) * row]);
        }
        let mut shape = s.clone();
        shape[0] = idx.len();
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(
            value,
            Op::IndexRows {
                x,
                idx: idx.to_vec(),
                row,
            },
            &[x],
        ))
    }

    /// Element gather from the flattened `x` into a tensor of `shape`.
    pub fn take(&mut self, x: Var, idx: &[usize], shape: &[usize]) -> Result<Var> {
        let n = self.value(x).numel();
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(dim_err!("take index {} out of {}", bad, n));
        }
        let src = self.data(x);
        let data = idx.iter().map(|&i| src[i]).collect();
        let value = Tensor::new(shape, data)?;
        Ok(self.push(
            value,
            Op::Take {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        ))
    }

    /// Scales each row of `x[N, D]` to unit length; norms are floored at 1e-12.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(dim_err!("l2_normalize_rows needs 2-D input, got {:?}", s));
        }
        let dim = s[1];
        let eps = T::lit(1e-12);
        let mut norms = Vec::with_capacity(s[0]);
        let mut data = Vec::with_capacity(s[0] * dim);
        for row in self.data(x).chunks(dim.max(1)) {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(eps);
            norms.push(n);
            data.extend(row.iter().map(|&v| v / n));
        }
        let value = Tensor::new(self.shape(x), data)?;
        Ok(self.push(value, Op::L2NormalizeRows { x, norms, dim }, &[x]))
    }

    /// Numerically stable log-softmax over the last axis of `x[N, D]`.
    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || s[1] == 0 {
            return Err(dim_err!("log_softmax_rows needs non-empty 2-D input, got {:?}", s));
        }
        let dim = s[1];
        let mut data = Vec::with_capacity(s[0] * dim);
        for row in self.data(x).chunks(dim) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            data.extend(row.iter().map(|&v| v - lse));
        }
        let value = Tensor::new(self.shape(x), data)?;
        Ok(self.push(value, Op::LogSoftmaxRows { x, dim }, &[x]))
    }

    /// Cross-correlation of `x[N,C,H,W]` with `w[F,C,K,K]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 || ws[2] != ws[3] {
            return Err(dim_err!("conv2d expects NCHW input and FCKK kernel, got {:?}, {:?}", xs, ws));
        }
        if xs[1] != ws[1] {
            return Err(dim_err!(
                "conv2d: input has {} channels, kernel expects {}",
                xs[1],
                ws[1]
            ));
        }
        let k = ws[2];
        let oh = conv::conv2d_out_size(xs[2], k, stride, padding)?;
        let ow = conv::conv2d_out_size(xs[3], k, stride, padding)?;
        let geom = Geometry {
            n: xs[0],
            c: xs[1],
            h: xs[2],
            w: xs[3],
            k,
            stride,
            pad: padding,
            oh,
            ow,
        };
        let filters = ws[0];
        let cols = conv::im2col(self.data(x), &geom);
        let np = geom.col_cols();
        let mut out = vec![T::zero(); filters * np];
        gemm(
            MatRef::new(self.data(w), filters, geom.col_rows()),
            MatRef::new(&cols, geom.col_rows(), np),
            &mut out,
            T::zero(),
        );
        let data = conv::swap_leading(&out, filters, geom.n, oh * ow);
        let value = Tensor::new(&[geom.n, filters, oh, ow], data)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                w,
                geom,
                filters,
            },
            &[x, w],
        ))
    }

    /// Transposed convolution of `x[N,Cin,H,W]` with `w[Cin,Cout,K,K]`, zero input padding.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        stride: usize,
        output_padding: usize,
    ) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 || ws[2] != ws[3] {
            return Err(dim_err!(
                "conv_transpose2d expects NCHW input and CFKK kernel, got {:?}, {:?}",
                xs,
                ws
            ));
        }
        if xs[1] != ws[0] {
            return Err(dim_err!(
                "conv_transpose2d: input has {} channels, kernel expects {}",
                xs[1],
                ws[0]
            ));
        }
        if stride == 0 {
            return Err(param_err!("stride must be at least 1"));
        }
        let k = ws[2];
        let oh = conv::conv_transpose2d_out_size(xs[2], k, stride, output_padding)?;
        let ow = conv::conv_transpose2d_out_size(xs[3], k, stride, output_padding)?;
        let (n, cin, cout) = (xs[0], xs[1], ws[1]);
        let geom = Geometry {
            n,
            c: cout,
            h: oh,
            w: ow,
            k,
            stride,
            pad: 0,
            oh: xs[2],
            ow: xs[3],
        };
        let xmat = conv::swap_leading(self.data(x), n, cin, xs[2] * xs[3]);
        let np = geom.col_cols();
        let mut cols = vec![T::zero(); geom.col_rows() * np];
        gemm(
            MatRef::t(self.data(w), cin, geom.col_rows()),
            MatRef::new(&xmat, cin, np),
            &mut cols,
            T::zero(),
        );
        let mut data = vec![T::zero(); n * cout * oh * ow];
        conv::col2im(&cols, &geom, &mut data);
        let value = Tensor::new(&[n, cout, oh, ow], data)?;
        Ok(self.push(
            value,
            Op::ConvTranspose2d {
                x,
                w,
                geom,
                in_channels: cin,
            },
            &[x, w],
        ))
    }

    /// Batch normalisation over all axes but 1, using the batch's own
    /// statistics. Returns the output with the batch mean and unbiased
    /// variance per channel (for running-statistics updates).
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<(Var, Vec<T>, Vec<T>)> {
        let (channels, inner, count) = self.bn_layout(x, gamma, beta)?;
        let src = self.data(x);
        let mut mean = vec![T::zero(); channels];
        let mut var = vec![T::zero(); channels];
        for (i, chunk) in src.chunks(inner).enumerate() {
            mean[i % channels] += chunk.iter().copied().sum::<T>();
        }
        let m = T::lit(count as f64);
        mean.iter_mut().for_each(|v| *v /= m);
        for (i, chunk) in src.chunks(inner).enumerate() {
            let mu = mean[i % channels];
            var[i % channels] += chunk.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>();
        }
        let biased: Vec<T> = var.iter().map(|&v| v / m).collect();
        let unbiased: Vec<T> = if count > 1 {
            var.iter().map(|&v| v / T::lit((count - 1) as f64)).collect()
        } else {
            biased.clone()
        };
        let inv_std: Vec<T> = biased.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let out = self.bn_apply(x, gamma, beta, &mean, inv_std, channels, inner, true)?;
        Ok((out, mean, unbiased))
    }

    /// Batch normalisation with fixed (running) statistics: a per-channel affine map.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: T,
    ) -> Result<Var> {
        let (channels, inner, _) = self.bn_layout(x, gamma, beta)?;
        if mean.len() != channels || var.len() != channels {
            return Err(dim_err!("running statistics do not have {} channels", channels));
        }
        let inv_std = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        self.bn_apply(x, gamma, beta, mean, inv_std, channels, inner, false)
    }

    fn bn_layout(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if s.len() < 2 {
            return Err(dim_err!("batch norm needs at least 2-D input, got {:?}", s));
        }
        let channels = s[1];
        if self.shape(gamma) != [channels] || self.shape(beta) != [channels] {
            return Err(dim_err!("batch norm affine parameters must have {} channels", channels));
        }
        let inner: usize = s[2..].iter().product();
        Ok((channels, inner, s[0] * inner))
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_apply(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        inv_std: Vec<T>,
        channels: usize,
        inner: usize,
        train: bool,
    ) -> Result<Var> {
        let src = self.data(x);
        let (gm, bt) = (self.data(gamma), self.data(beta));
        let mut xhat = Vec::with_capacity(src.len());
        let mut out = Vec::with_capacity(src.len());
        for (i, chunk) in src.chunks(inner.max(1)).enumerate() {
            let c = i % channels;
            for &v in chunk {
                let h = (v - mean[c]) * inv_std[c];
                xhat.push(h);
                out.push(gm[c] * h + bt[c]);
            }
        }
        let value = Tensor::new(self.shape(x), out)?;
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                channels,
                inner,
                train,
            },
            &[x, gamma, beta],
        ))
    }

    /// Reverse sweep from a single-element root. Gradients accumulate
    /// additively on every node that requires them.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(contract_err!(
                "backward root must be a scalar, got shape {:?}",
                self.shape(root)
            ));
        }
        if !self.nodes[root.0].requires_grad {
            self.backward_done = true;
            return Ok(());
        }
        self.nodes[root.0].grad = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contribs = self.backward_rule(i, &g);
            self.nodes[i].grad = Some(g);
            for (v, c) in contribs {
                self.accumulate(v, c);
            }
        }
        self.backward_done = true;
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contrib: Vec<T>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            None => node.grad = Some(contrib),
            Some(g) => g.iter_mut().zip(&contrib).for_each(|(a, &b)| *a += b),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_rule(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let out = node.value.data();
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.wants(*a) {
                    res.push((*a, g.to_vec()));
                }
                if self.wants(*b) {
                    res.push((*b, g.to_vec()));
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    res.push((*a, g.to_vec()));
                }
                if self.wants(*b) {
                    res.push((*b, g.iter().map(|&v| -v).collect()));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    res.push((*a, zip_map(g, self.data(*b), |x, y| x * y)));
                }
                if self.wants(*b) {
                    res.push((*b, zip_map(g, self.data(*a), |x, y| x * y)));
                }
            }
            Op::Scale(x, c) => res.push((*x, g.iter().map(|&v| v * *c).collect())),
            Op::AddScalar(x) | Op::Reshape(x) => res.push((*x, g.to_vec())),
            Op::BiasAdd {
                x,
                bias,
                channels,
                inner,
            } => {
                if self.wants(*x) {
                    res.push((*x, g.to_vec()));
                }
                if self.wants(*bias) {
                    let mut gb = vec![T::zero(); *channels];
                    for (j, chunk) in g.chunks(*inner).enumerate() {
                        gb[j % channels] += chunk.iter().copied().sum::<T>();
                    }
                    res.push((*bias, gb));
                }
            }
            Op::MatMul {
                a,
                b,
                m,
                k,
                n,
                b_transposed,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let gm = MatRef::new(g, m, n);
                if self.wants(*a) {
                    // dA = G · Bᵀ
                    let bref = if *b_transposed {
                        MatRef::new(self.data(*b), n, k)
                    } else {
                        MatRef::t(self.data(*b), k, n)
                    };
                    let mut ga = vec![T::zero(); m * k];
                    gemm(gm, bref, &mut ga, T::zero());
                    res.push((*a, ga));
                }
                if self.wants(*b) {
                    let aref = MatRef::new(self.data(*a), m, k);
                    if *b_transposed {
                        // d(Bᵀ) = Aᵀ · G  =>  dB = Gᵀ · A
                        let mut gb = vec![T::zero(); n * k];
                        gemm(MatRef::t(g, m, n), aref, &mut gb, T::zero());
                        res.push((*b, gb));
                    } else {
                        let mut gb = vec![T::zero(); k * n];
                        gemm(MatRef::t(self.data(*a), m, k), gm, &mut gb, T::zero());
                        res.push((*b, gb));
                    }
                }
            }
            Op::LeakyRelu(x, slope) => {
                let xs = self.data(*x);
                res.push((
                    *x,
                    zip_map(g, xs, |gv, xv| if xv > T::zero() { gv } else { gv * *slope }),
                ));
            }
            Op::Sigmoid(x) => {
                res.push((*x, zip_map(g, out, |gv, y| gv * y * (T::one() - y))));
            }
            Op::Tanh(x) => {
                res.push((*x, zip_map(g, out, |gv, y| gv * (T::one() - y * y))));
            }
            Op::Exp(x) => res.push((*x, zip_map(g, out, |gv, y| gv * y))),
            Op::Log(x) => res.push((*x, zip_map(g, self.data(*x), |gv, xv| gv / xv))),
            Op::Square(x) => {
                res.push((*x, zip_map(g, self.data(*x), |gv, xv| gv * xv * T::lit(2.0))))
            }
            Op::Sqrt(x) => res.push((
                *x,
                zip_map(g, out, |gv, y| {
                    if y > T::zero() {
                        gv / (T::lit(2.0) * y)
                    } else {
                        T::zero()
                    }
                }),
            )),
            Op::Sum(x) => res.push((*x, vec![g[0]; self.value(*x).numel()])),
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                res.push((*x, vec![g[0] / T::lit(n as f64); n]));
            }
            Op::SumCols { x, cols } => {
                let mut gx = Vec::with_capacity(g.len() * cols);
                for &gv in g {
                    gx.extend(core::iter::repeat(gv).take(*cols));
                }
                res.push((*x, gx));
            }
            Op::ConcatCols { parts, rows } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let mut offset = 0;
                for &(p, w) in parts {
                    if self.wants(p) {
                        let mut gp = Vec::with_capacity(rows * w);
                        for r in 0..*rows {
                            gp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        res.push((p, gp));
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if self.wants(p) {
                        res.push((p, g[offset..offset + n].to_vec()));
                    }
                    offset += n;
                }
            }
            Op::NarrowCols {
                x,
                start,
                len,
                cols,
            } => {
                let rows = g.len() / len.max(&1);
                let mut gx = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    gx[r * cols + start..r * cols + start + len]
                        .copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                res.push((*x, gx));
            }
            Op::IndexRows { x, idx, row } => {
                let mut gx = vec![T::zero(); self.value(*x).numel()];
                for (j, &src) in idx.iter().enumerate() {
                    let dst = &mut gx[src * row..(src + 1) * row];
                    dst.iter_mut()
                        .zip(&g[j * row..(j + 1) * row])
                        .for_each(|(a, &b)| *a += b);
                }
                res.push((*x, gx));
            }
            Op::Take { x, idx } => {
                let mut gx = vec![T::zero(); self.value(*x).numel()];
                for (&src, &gv) in idx.iter().zip(g) {
                    gx[src] += gv;
                }
                res.push((*x, gx));
            }
            Op::L2NormalizeRows { x, norms, dim } => {
                let eps = T::lit(1e-12);
                let xs = self.data(*x);
                let mut gx = Vec::with_capacity(xs.len());
                for (r, &n) in norms.iter().enumerate() {
                    let y = &out[r * dim..(r + 1) * dim];
                    let gr = &g[r * dim..(r + 1) * dim];
                    if n > eps {
                        let dot: T = y.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        gx.extend(y.iter().zip(gr).map(|(&yv, &gv)| (gv - yv * dot) / n));
                    } else {
                        gx.extend(gr.iter().map(|&gv| gv / n));
                    }
                }
                res.push((*x, gx));
            }
            Op::LogSoftmaxRows { x, dim } => {
                let mut gx = Vec::with_capacity(out.len());
                for (yr, gr) in out.chunks(*dim).zip(g.chunks(*dim)) {
                    let gs: T = gr.iter().copied().sum();
                    gx.extend(yr.iter().zip(gr).map(|(&y, &gv)| gv - y.exp() * gs));
                }
                res.push((*x, gx));
            }
            Op::Conv2d {
                x,
                w,
                geom,
                filters,
            } => {
                let np = geom.col_cols();
                let gmat = conv::swap_leading(g, geom.n, *filters, geom.oh * geom.ow);
                let cols = conv::im2col(self.data(*x), geom);
                if self.wants(*w) {
                    let mut gw = vec![T::zero(); filters * geom.col_rows()];
                    gemm(
                        MatRef::new(&gmat, *filters, np),
                        MatRef::t(&cols, geom.col_rows(), np),
                        &mut gw,
                        T::zero(),
                    );
                    res.push((*w, gw));
                }
                if self.wants(*x) {
                    let mut gcols = vec![T::zero(); geom.col_rows() * np];
                    gemm(
                        MatRef::t(self.data(*w), *filters, geom.col_rows()),
                        MatRef::new(&gmat, *filters, np),
                        &mut gcols,
                        T::zero(),
                    );
                    let mut gx = vec![T::zero(); self.value(*x).numel()];
                    conv::col2im(&gcols, geom, &mut gx);
                    res.push((*x, gx));
                }
            }
            Op::ConvTranspose2d {
                x,
                w,
                geom,
                in_channels,
            } => {
                let cin = *in_channels;
                let np = geom.col_cols();
                let gcols = conv::im2col(g, geom);
                if self.wants(*x) {
                    let mut gxmat = vec![T::zero(); cin * np];
                    gemm(
                        MatRef::new(self.data(*w), cin, geom.col_rows()),
                        MatRef::new(&gcols, geom.col_rows(), np),
                        &mut gxmat,
                        T::zero(),
                    );
                    res.push((
                        *x,
                        conv::swap_leading(&gxmat, cin, geom.n, geom.oh * geom.ow),
                    ));
                }
                if self.wants(*w) {
                    let xmat = conv::swap_leading(self.data(*x), geom.n, cin, geom.oh * geom.ow);
                    let mut gw = vec![T::zero(); cin * geom.col_rows()];
                    gemm(
                        MatRef::new(&xmat, cin, np),
                        MatRef::t(&gcols, geom.col_rows(), np),
                        &mut gw,
                        T::zero(),
                    );
                    res.push((*w, gw));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                channels,
                inner,
                train,
            } => {
                let c = *channels;
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for (j, (gc, hc)) in g.chunks(*inner).zip(xhat.chunks(*inner)).enumerate() {
                    let ch = j % c;
                    for (&gv, &hv) in gc.iter().zip(hc) {
                        sum_g[ch] += gv;
                        sum_gx[ch] += gv * hv;
                    }
                }
                if self.wants(*gamma) {
                    res.push((*gamma, sum_gx.clone()));
                }
                if self.wants(*beta) {
                    res.push((*beta, sum_g.clone()));
                }
                if self.wants(*x) {
                    let gm = self.data(*gamma);
                    let mut gx = Vec::with_capacity(g.len());
                    let count = T::lit((g.len() / c) as f64);
                    for (j, (gc, hc)) in g.chunks(*inner).zip(xhat.chunks(*inner)).enumerate() {
                        let ch = j % c;
                        let scale = gm[ch] * inv_std[ch];
                        if *train {
                            let mg = sum_g[ch] / count;
                            let mgx = sum_gx[ch] / count;
                            gx.extend(
                                gc.iter()
                                    .zip(hc)
                                    .map(|(&gv, &hv)| scale * (gv - mg - hv * mgx)),
                            );
                        } else {
                            gx.extend(gc.iter().map(|&gv| scale * gv));
                        }
                    }
                    res.push((*x, gx));
                }
            }
        }
        res
    }
}
