//! The reverse-mode tape: op registration, forward values, backward pass.

use std::rc::Rc;

use super::kernels;
use super::{broadcast_kind, Broadcast, Tensor, TensorError};
use crate::real::Real;

/// Handle to a tensor on a [`Tape`]. Indices are only meaningful for the
/// tape that produced them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Copy, PartialEq, Eq)]
enum UnaryKind {
    Neg,
    Exp,
    Log,
    Relu,
    Sigmoid,
    Abs,
    Clamp01,
}

enum Op<S: Real> {
    Leaf,
    Unary(UnaryKind, Var),
    AddScalar(Var, S),
    MulScalar(Var, S),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Matmul(Var, Var),
    Softmax { x: Var, axis: usize },
    Conv2d { x: Var, w: Var, b: Var, k: usize },
    WindowValid { x: Var, k: usize, window: Vec<S> },
    ApplyBlur { img: Var, ker: Var, k: usize },
    Sum(Var),
    Mean(Var),
    Concat0(Vec<Var>),
    ConcatCols(Vec<Var>),
    RepeatRows { row: Var, n: usize },
    SelectRow { table: Var, row: usize },
    RowsFromChw(Var),
    ChwFromRows(Var),
    Slice0 { x: Var, from: usize, to: usize },
    Reshape(Var),
    Custom(Rc<dyn CustomOp<S>>),
}

struct Node<S: Real> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Hand-differentiated operation plugged into the tape (used by the
/// rasterizer, whose backward is derived analytically rather than composed
/// from primitives).
pub(crate) trait CustomOp<S: Real> {
    fn inputs(&self) -> Vec<Var>;
    fn backward(
        &self,
        out_grad: &[S],
        out_value: &Tensor<S>,
        ctx: &mut BackwardCtx<'_, S>,
    ) -> Result<(), TensorError>;
}

/// Restricted view of the tape handed to custom backward implementations.
pub(crate) struct BackwardCtx<'a, S: Real> {
    nodes: &'a [Node<S>],
    grads: &'a mut [Option<Vec<S>>],
}

impl<S: Real> BackwardCtx<'_, S> {
    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn wants_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Gradient accumulator for `v`, allocated to zeros on first touch.
    pub fn grad_mut(&mut self, v: Var) -> &mut [S] {
        let n = self.nodes[v.0].value.numel();
        self.grads[v.0].get_or_insert_with(|| vec![S::zero(); n])
    }
}

/// Flat autodiff tape. Build a fresh one per training iteration.
pub struct Tape<S: Real> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Real> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Real> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Insert a tensor as a differentiable leaf (parameter or input).
    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Insert a non-differentiable constant.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copy of `x`'s value that blocks gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.clone();
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> S {
        debug_assert_eq!(self.nodes[v.0].value.numel(), 1);
        self.nodes[v.0].value.data()[0]
    }

    /// Gradient of the last `backward` root w.r.t. `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub(crate) fn push_custom(
        &mut self,
        op: Rc<dyn CustomOp<S>>,
        value: Tensor<S>,
    ) -> Var {
        let needs = op.inputs().iter().any(|&v| self.needs(v));
        self.push(value, Op::Custom(op), needs)
    }

    // ---- elementwise unary -------------------------------------------------

    fn unary(&mut self, kind: UnaryKind, x: Var) -> Result<Var, TensorError> {
        let xv = &self.nodes[x.0].value;
        if kind == UnaryKind::Log {
            if let Some(bad) = xv.data().iter().find(|v| **v <= S::zero()) {
                return Err(TensorError::Domain {
                    op: "log",
                    msg: format!("input must be positive, found {bad}"),
                });
            }
        }
        let data: Vec<S> = match kind {
            UnaryKind::Neg => xv.data().iter().map(|&v| -v).collect(),
            UnaryKind::Exp => xv.data().iter().map(|&v| v.exp()).collect(),
            UnaryKind::Log => xv.data().iter().map(|&v| v.ln()).collect(),
            UnaryKind::Relu => xv.data().iter().map(|&v| v.max(S::zero())).collect(),
            UnaryKind::Sigmoid => xv.data().iter().map(|&v| sigmoid(v)).collect(),
            UnaryKind::Abs => xv.data().iter().map(|&v| v.abs()).collect(),
            UnaryKind::Clamp01 => xv
                .data()
                .iter()
                .map(|&v| v.max(S::zero()).min(S::one()))
                .collect(),
        };
        let value = Tensor::new(xv.shape().to_vec(), data);
        let needs = self.needs(x);
        Ok(self.push(value, Op::Unary(kind, x), needs))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(UnaryKind::Neg, x)
    }
    pub fn exp(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(UnaryKind::Exp, x)
    }
    pub fn log(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(UnaryKind::Log, x)
    }
    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(UnaryKind::Relu, x)
    }
    pub fn sigmoid(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(UnaryKind::Sigmoid, x)
    }
    pub fn abs(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(UnaryKind::Abs, x)
    }
    /// Clamp to `[0, 1]`; gradient passes inside the interval, zero outside.
    pub fn clamp01(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(UnaryKind::Clamp01, x)
    }

    pub fn add_scalar(&mut self, x: Var, c: S) -> Result<Var, TensorError> {
        let xv = &self.nodes[x.0].value;
        let value = Tensor::new(
            xv.shape().to_vec(),
            xv.data().iter().map(|&v| v + c).collect(),
        );
        let needs = self.needs(x);
        Ok(self.push(value, Op::AddScalar(x, c), needs))
    }

    pub fn mul_scalar(&mut self, x: Var, c: S) -> Result<Var, TensorError> {
        let xv = &self.nodes[x.0].value;
        let value = Tensor::new(
            xv.shape().to_vec(),
            xv.data().iter().map(|&v| v * c).collect(),
        );
        let needs = self.needs(x);
        Ok(self.push(value, Op::MulScalar(x, c), needs))
    }

    // ---- elementwise binary with suffix broadcasting -----------------------

    fn binary(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(S, S) -> S,
        make: impl FnOnce(Var, Var) -> Op<S>,
    ) -> Result<Var, TensorError> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let kind = broadcast_kind(op_name, av.shape(), bv.shape())?;
        let (out_shape, data) = match kind {
            Broadcast::Same => (
                av.shape().to_vec(),
                av.data()
                    .iter()
                    .zip(bv.data())
                    .map(|(&x, &y)| f(x, y))
                    .collect::<Vec<_>>(),
            ),
            Broadcast::RightOntoLeft => {
                let bn = bv.numel();
                (
                    av.shape().to_vec(),
                    av.data()
                        .iter()
                        .enumerate()
                        .map(|(i, &x)| f(x, bv.data()[i % bn]))
                        .collect(),
                )
            }
            Broadcast::LeftOntoRight => {
                let an = av.numel();
                (
                    bv.shape().to_vec(),
                    bv.data()
                        .iter()
                        .enumerate()
                        .map(|(i, &y)| f(av.data()[i % an], y))
                        .collect(),
                )
            }
        };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(out_shape, data), make(a, b), needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.nodes[b.0].value.data().iter().any(|v| *v == S::zero()) {
            return Err(TensorError::Domain {
                op: "div",
                msg: "denominator contains zero".to_string(),
            });
        }
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    // ---- linear algebra ----------------------------------------------------

    /// 2-D matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (asl, bsl) = (av.shape(), bv.shape());
        if asl.len() != 2 || bsl.len() != 2 || asl[1] != bsl[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: asl.to_vec(),
                rhs: bsl.to_vec(),
            });
        }
        let (m, k, n) = (asl[0], asl[1], bsl[1]);
        let mut out = vec![S::zero(); m * n];
        S::gemm(
            false,
            false,
            m,
            k,
            n,
            S::one(),
            av.data(),
            bv.data(),
            S::zero(),
            &mut out,
        );
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(vec![m, n], out), Op::Matmul(a, b), needs))
    }

    /// Softmax along `axis` with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let xv = &self.nodes[x.0].value;
        let shape = xv.shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::BadShape {
                op: "softmax",
                expected: format!("axis < rank {}", shape.len()),
                got: shape,
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let data = kernels::softmax_fwd(xv.data(), outer, shape[axis], inner);
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(shape, data), Op::Softmax { x, axis }, needs))
    }

    /// `same`-padded stride-1 convolution `x [C,H,W] * w [O,C,k,k] + b [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let (xs, ws, bs) = (
            self.nodes[x.0].value.shape().to_vec(),
            self.nodes[w.0].value.shape().to_vec(),
            self.nodes[b.0].value.shape().to_vec(),
        );
        if xs.len() != 3 {
            return Err(TensorError::BadShape {
                op: "conv2d",
                expected: "input of shape [C,H,W]".into(),
                got: xs,
            });
        }
        if ws.len() != 4 || ws[1] != xs[0] || ws[2] != ws[3] || ws[2] % 2 == 0 {
            return Err(TensorError::BadShape {
                op: "conv2d",
                expected: format!("weights [O,{},k,k] with odd k", xs[0]),
                got: ws,
            });
        }
        if bs != [ws[0]] {
            return Err(TensorError::BadShape {
                op: "conv2d",
                expected: format!("bias [{}]", ws[0]),
                got: bs,
            });
        }
        let (c, h, wd, o, k) = (xs[0], xs[1], xs[2], ws[0], ws[2]);
        let data = kernels::conv2d_fwd(
            self.nodes[x.0].value.data(),
            c,
            h,
            wd,
            self.nodes[w.0].value.data(),
            self.nodes[b.0].value.data(),
            o,
            k,
        );
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(
            Tensor::new(vec![o, h, wd], data),
            Op::Conv2d { x, w, b, k },
            needs,
        ))
    }

    /// Depthwise valid-region filtering with a fixed (non-differentiated)
    /// normalized Gaussian window; used by the structural-similarity loss.
    pub fn gaussian_window_valid(
        &mut self,
        x: Var,
        k: usize,
        sigma: f64,
    ) -> Result<Var, TensorError> {
        let xs = self.nodes[x.0].value.shape().to_vec();
        if xs.len() != 3 || xs[1] < k || xs[2] < k {
            return Err(TensorError::BadShape {
                op: "gaussian_window_valid",
                expected: format!("[C,H,W] with H,W >= window {k}"),
                got: xs,
            });
        }
        let window: Vec<S> = kernels::gaussian_window(k, sigma);
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let data = kernels::window_valid_fwd(self.nodes[x.0].value.data(), c, h, w, &window, k);
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(vec![c, h - k + 1, w - k + 1], data),
            Op::WindowValid { x, k, window },
            needs,
        ))
    }

    /// Per-pixel convolution with replicate padding. `img [C,H,W]`,
    /// `ker [H*W, k*k]` (rows are per-pixel kernels).
    pub fn apply_blur(&mut self, img: Var, ker: Var, k: usize) -> Result<Var, TensorError> {
        let is = self.nodes[img.0].value.shape().to_vec();
        let ks = self.nodes[ker.0].value.shape().to_vec();
        if is.len() != 3 {
            return Err(TensorError::BadShape {
                op: "apply_blur",
                expected: "image of shape [C,H,W]".into(),
                got: is,
            });
        }
        if k % 2 == 0 || ks != [is[1] * is[2], k * k] {
            return Err(TensorError::BadShape {
                op: "apply_blur",
                expected: format!("kernels [{}, {}] with odd k={k}", is[1] * is[2], k * k),
                got: ks,
            });
        }
        let (c, h, w) = (is[0], is[1], is[2]);
        let data = kernels::apply_blur_fwd(
            self.nodes[img.0].value.data(),
            c,
            h,
            w,
            self.nodes[ker.0].value.data(),
            k,
        );
        let needs = self.needs(img) || self.needs(ker);
        Ok(self.push(
            Tensor::new(vec![c, h, w], data),
            Op::ApplyBlur { img, ker, k },
            needs,
        ))
    }

    // ---- reductions & shape ops ---------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let mut acc = S::zero();
        for &v in self.nodes[x.0].value.data() {
            acc += v;
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::scalar(acc), Op::Sum(x), needs))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, TensorError> {
        let n = self.nodes[x.0].value.numel();
        if n == 0 {
            return Err(TensorError::Domain {
                op: "mean",
                msg: "mean of empty tensor".into(),
            });
        }
        let mut acc = S::zero();
        for &v in self.nodes[x.0].value.data() {
            acc += v;
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::scalar(acc / S::from_f64(n as f64)),
            Op::Mean(x),
            needs,
        ))
    }

    /// Concatenate along axis 0; trailing dimensions must agree.
    pub fn concat0(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        assert!(!parts.is_empty(), "concat0 of zero tensors");
        let first = self.nodes[parts[0].0].value.shape().to_vec();
        let mut dim0 = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = &self.nodes[p.0].value;
            if v.shape()[1..] != first[1..] {
                return Err(TensorError::ShapeMismatch {
                    op: "concat0",
                    lhs: first,
                    rhs: v.shape().to_vec(),
                });
            }
            dim0 += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = first;
        shape[0] = dim0;
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Tensor::new(shape, data), Op::Concat0(parts.to_vec()), needs))
    }

    /// Concatenate 2-D tensors along columns: `[n,d1] ++ [n,d2] -> [n,d1+d2]`.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        assert!(!parts.is_empty(), "concat_cols of zero tensors");
        let n = self.nodes[parts[0].0].value.shape()[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.nodes[p.0].value.shape();
            if s.len() != 2 || s[0] != n {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.nodes[parts[0].0].value.shape().to_vec(),
                    rhs: s.to_vec(),
                });
            }
            widths.push(s[1]);
        }
        let d: usize = widths.iter().sum();
        let mut data = vec![S::zero(); n * d];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.nodes[p.0].value.data();
            for row in 0..n {
                data[row * d + off..row * d + off + w]
                    .copy_from_slice(&src[row * w..(row + 1) * w]);
            }
            off += w;
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor::new(vec![n, d], data),
            Op::ConcatCols(parts.to_vec()),
            needs,
        ))
    }

    /// Tile a `[d]` or `[1,d]` row vector into `[n,d]`.
    pub fn repeat_rows(&mut self, row: Var, n: usize) -> Result<Var, TensorError> {
        let rv = &self.nodes[row.0].value;
        let d = match rv.shape() {
            [d] => *d,
            [1, d] => *d,
            other => {
                return Err(TensorError::BadShape {
                    op: "repeat_rows",
                    expected: "[d] or [1,d]".into(),
                    got: other.to_vec(),
                })
            }
        };
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            data.extend_from_slice(rv.data());
        }
        let needs = self.needs(row);
        Ok(self.push(
            Tensor::new(vec![n, d], data),
            Op::RepeatRows { row, n },
            needs,
        ))
    }

    /// Select one row of a `[V,d]` table (embedding lookup).
    pub fn select_row(&mut self, table: Var, row: usize) -> Result<Var, TensorError> {
        let tv = &self.nodes[table.0].value;
        let s = tv.shape();
        if s.len() != 2 || row >= s[0] {
            return Err(TensorError::BadShape {
                op: "select_row",
                expected: format!("[V,d] table with row {row} < V"),
                got: s.to_vec(),
            });
        }
        let d = s[1];
        let data = tv.data()[row * d..(row + 1) * d].to_vec();
        let needs = self.needs(table);
        Ok(self.push(
            Tensor::new(vec![1, d], data),
            Op::SelectRow { table, row },
            needs,
        ))
    }

    /// `[C,H,W] -> [H*W, C]` (pixels as rows).
    pub fn rows_from_chw(&mut self, x: Var) -> Result<Var, TensorError> {
        let xv = &self.nodes[x.0].value;
        let s = xv.shape();
        if s.len() != 3 {
            return Err(TensorError::BadShape {
                op: "rows_from_chw",
                expected: "[C,H,W]".into(),
                got: s.to_vec(),
            });
        }
        let (c, hw) = (s[0], s[1] * s[2]);
        let mut data = vec![S::zero(); c * hw];
        for cc in 0..c {
            for p in 0..hw {
                data[p * c + cc] = xv.data()[cc * hw + p];
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(vec![hw, c], data), Op::RowsFromChw(x), needs))
    }

    /// `[H*W, C] -> [C,H,W]`.
    pub fn chw_from_rows(&mut self, x: Var, h: usize, w: usize) -> Result<Var, TensorError> {
        let xv = &self.nodes[x.0].value;
        let s = xv.shape();
        if s.len() != 2 || s[0] != h * w {
            return Err(TensorError::BadShape {
                op: "chw_from_rows",
                expected: format!("[{} rows, C]", h * w),
                got: s.to_vec(),
            });
        }
        let (hw, c) = (s[0], s[1]);
        let mut data = vec![S::zero(); c * hw];
        for p in 0..hw {
            for cc in 0..c {
                data[cc * hw + p] = xv.data()[p * c + cc];
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(vec![c, h, w], data), Op::ChwFromRows(x), needs))
    }

    /// Slice `[from..to)` along axis 0.
    pub fn slice0(&mut self, x: Var, from: usize, to: usize) -> Result<Var, TensorError> {
        let xv = &self.nodes[x.0].value;
        let s = xv.shape();
        if s.is_empty() || to > s[0] || from >= to {
            return Err(TensorError::BadShape {
                op: "slice0",
                expected: format!("axis-0 range {from}..{to} within dim"),
                got: s.to_vec(),
            });
        }
        let stride: usize = s[1..].iter().product();
        let data = xv.data()[from * stride..to * stride].to_vec();
        let mut shape = s.to_vec();
        shape[0] = to - from;
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(shape, data), Op::Slice0 { x, from, to }, needs))
    }

    /// Same data, new shape (element count must match).
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        let xv = &self.nodes[x.0].value;
        if shape.iter().product::<usize>() != xv.numel() {
            return Err(TensorError::BadShape {
                op: "reshape",
                expected: format!("shape with {} elements", xv.numel()),
                got: shape,
            });
        }
        let value = Tensor::new(shape, xv.data().to_vec());
        let needs = self.needs(x);
        Ok(self.push(value, Op::Reshape(x), needs))
    }

    // ---- backward ------------------------------------------------------------

    /// Reverse pass from a scalar root. Gradients accumulate across all uses
    /// of a node and are retrievable with [`Tape::grad`].
    pub fn backward(&mut self, root: Var) -> Result<(), TensorError> {
        let root_value = &self.nodes[root.0].value;
        if root_value.numel() != 1 {
            return Err(TensorError::NonScalarRoot {
                got: root_value.shape().to_vec(),
            });
        }
        self.grads = Vec::new();
        self.grads.resize_with(self.nodes.len(), || None);
        self.grads[root.0] = Some(vec![S::one()]);

        for id in (0..=root.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(g) = self.grads[id].take() else {
                continue;
            };
            self.dispatch_backward(id, &g)?;
            // Keep the node's own gradient readable after the pass.
            self.grads[id] = Some(g);
        }
        Ok(())
    }

    fn accum_into(&mut self, v: Var, f: impl FnOnce(&mut [S])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        let slot = self.grads[v.0].get_or_insert_with(|| vec![S::zero(); n]);
        f(slot);
    }

    /// Accumulate `g` (shaped like the node at `src_shape`) into the
    /// possibly-smaller input `v` under suffix broadcasting.
    fn accum_broadcast(&mut self, v: Var, g: &[S], scale: impl Fn(usize) -> S) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        let slot = self.grads[v.0].get_or_insert_with(|| vec![S::zero(); n]);
        if g.len() == n {
            for (i, s) in slot.iter_mut().enumerate() {
                *s += g[i] * scale(i);
            }
        } else {
            debug_assert_eq!(g.len() % n, 0);
            for (i, &gv) in g.iter().enumerate() {
                slot[i % n] += gv * scale(i);
            }
        }
    }

    fn dispatch_backward(&mut self, id: usize, g: &[S]) -> Result<(), TensorError> {
        // Values are read through raw pointers into `self.nodes` only via
        // cloned slices where aliasing with grad accumulation would bite;
        // clones here are cheap relative to the math they feed.
        match &self.nodes[id].op {
            Op::Leaf => Ok(()),
            Op::Unary(kind, x) => {
                let kind = *kind;
                let x = *x;
                match kind {
                    UnaryKind::Neg => self.accum_broadcast(x, g, |_| -S::one()),
                    UnaryKind::Exp => {
                        let y = self.nodes[id].value.data().to_vec();
                        self.accum_broadcast(x, g, |i| y[i]);
                    }
                    UnaryKind::Log => {
                        let xv = self.nodes[x.0].value.data().to_vec();
                        self.accum_broadcast(x, g, |i| S::one() / xv[i]);
                    }
                    UnaryKind::Relu => {
                        let xv = self.nodes[x.0].value.data().to_vec();
                        self.accum_broadcast(x, g, |i| {
                            if xv[i] > S::zero() {
                                S::one()
                            } else {
                                S::zero()
                            }
                        });
                    }
                    UnaryKind::Sigmoid => {
                        let y = self.nodes[id].value.data().to_vec();
                        self.accum_broadcast(x, g, |i| y[i] * (S::one() - y[i]));
                    }
                    UnaryKind::Abs => {
                        let xv = self.nodes[x.0].value.data().to_vec();
                        self.accum_broadcast(x, g, |i| {
                            if xv[i] > S::zero() {
                                S::one()
                            } else if xv[i] < S::zero() {
                                -S::one()
                            } else {
                                S::zero()
                            }
                        });
                    }
                    UnaryKind::Clamp01 => {
                        let xv = self.nodes[x.0].value.data().to_vec();
                        self.accum_broadcast(x, g, |i| {
                            if xv[i] >= S::zero() && xv[i] <= S::one() {
                                S::one()
                            } else {
                                S::zero()
                            }
                        });
                    }
                }
                Ok(())
            }
            Op::AddScalar(x, _) => {
                let x = *x;
                self.accum_broadcast(x, g, |_| S::one());
                Ok(())
            }
            Op::MulScalar(x, c) => {
                let (x, c) = (*x, *c);
                self.accum_broadcast(x, g, |_| c);
                Ok(())
            }
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.accum_broadcast(a, g, |_| S::one());
                self.accum_broadcast(b, g, |_| S::one());
                Ok(())
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                self.accum_broadcast(a, g, |_| S::one());
                self.accum_broadcast(b, g, |_| -S::one());
                Ok(())
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let (an, bn) = (self.nodes[a.0].value.numel(), self.nodes[b.0].value.numel());
                let av = self.nodes[a.0].value.data().to_vec();
                let bv = self.nodes[b.0].value.data().to_vec();
                self.accum_broadcast(a, g, |i| bv[i % bn]);
                self.accum_broadcast(b, g, |i| av[i % an]);
                Ok(())
            }
            Op::Div(a, b) => {
                let (a, b) = (*a, *b);
                let (an, bn) = (self.nodes[a.0].value.numel(), self.nodes[b.0].value.numel());
                let av = self.nodes[a.0].value.data().to_vec();
                let bv = self.nodes[b.0].value.data().to_vec();
                self.accum_broadcast(a, g, |i| S::one() / bv[i % bn]);
                self.accum_broadcast(b, g, |i| -av[i % an] / (bv[i % bn] * bv[i % bn]));
                Ok(())
            }
            Op::Matmul(a, b) => {
                let (a, b) = (*a, *b);
                let (m, k) = {
                    let s = self.nodes[a.0].value.shape();
                    (s[0], s[1])
                };
                let n = self.nodes[b.0].value.shape()[1];
                if self.needs(a) {
                    let bv = self.nodes[b.0].value.data().to_vec();
                    self.accum_into(a, |da| {
                        // dA [m,k] = g [m,n] * B^T [n,k]
                        S::gemm(false, true, m, n, k, S::one(), g, &bv, S::one(), da);
                    });
                }
                if self.needs(b) {
                    let av = self.nodes[a.0].value.data().to_vec();
                    self.accum_into(b, |db| {
                        // dB [k,n] = A^T [k,m] * g [m,n]
                        S::gemm(true, false, k, m, n, S::one(), &av, g, S::one(), db);
                    });
                }
                Ok(())
            }
            Op::Softmax { x, axis } => {
                let (x, axis) = (*x, *axis);
                let shape = self.nodes[id].value.shape().to_vec();
                let outer: usize = shape[..axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let y = self.nodes[id].value.data().to_vec();
                let dx = kernels::softmax_bwd(&y, g, outer, shape[axis], inner);
                self.accum_into(x, |gx| {
                    for (s, d) in gx.iter_mut().zip(&dx) {
                        *s += *d;
                    }
                });
                Ok(())
            }
            Op::Conv2d { x, w, b, k } => {
                let (x, w, b, k) = (*x, *w, *b, *k);
                let xs = self.nodes[x.0].value.shape().to_vec();
                let (c, h, wd) = (xs[0], xs[1], xs[2]);
                let o = self.nodes[w.0].value.shape()[0];
                if self.needs(x) {
                    let wv = self.nodes[w.0].value.data().to_vec();
                    let dx = kernels::conv2d_bwd_input(g, c, h, wd, &wv, o, k);
                    self.accum_into(x, |gx| {
                        for (s, d) in gx.iter_mut().zip(&dx) {
                            *s += *d;
                        }
                    });
                }
                if self.needs(w) || self.needs(b) {
                    let xv = self.nodes[x.0].value.data().to_vec();
                    let (dw, db) = kernels::conv2d_bwd_params(g, &xv, c, h, wd, o, k);
                    self.accum_into(w, |gw| {
                        for (s, d) in gw.iter_mut().zip(&dw) {
                            *s += *d;
                        }
                    });
                    self.accum_into(b, |gb| {
                        for (s, d) in gb.iter_mut().zip(&db) {
                            *s += *d;
                        }
                    });
                }
                Ok(())
            }
            Op::WindowValid { x, k, window } => {
                let (x, k) = (*x, *k);
                let window = window.clone();
                let xs = self.nodes[x.0].value.shape().to_vec();
                let dx = kernels::window_valid_bwd(g, xs[0], xs[1], xs[2], &window, k);
                self.accum_into(x, |gx| {
                    for (s, d) in gx.iter_mut().zip(&dx) {
                        *s += *d;
                    }
                });
                Ok(())
            }
            Op::ApplyBlur { img, ker, k } => {
                let (img, ker, k) = (*img, *ker, *k);
                let is = self.nodes[img.0].value.shape().to_vec();
                let iv = self.nodes[img.0].value.data().to_vec();
                let kv = self.nodes[ker.0].value.data().to_vec();
                let (dimg, dker) = kernels::apply_blur_bwd(g, &iv, is[0], is[1], is[2], &kv, k);
                self.accum_into(img, |gi| {
                    for (s, d) in gi.iter_mut().zip(&dimg) {
                        *s += *d;
                    }
                });
                self.accum_into(ker, |gk| {
                    for (s, d) in gk.iter_mut().zip(&dker) {
                        *s += *d;
                    }
                });
                Ok(())
            }
            Op::Sum(x) => {
                let x = *x;
                let gv = g[0];
                self.accum_into(x, |gx| {
                    for s in gx.iter_mut() {
                        *s += gv;
                    }
                });
                Ok(())
            }
            Op::Mean(x) => {
                let x = *x;
                let n = self.nodes[x.0].value.numel();
                let gv = g[0] / S::from_f64(n as f64);
                self.accum_into(x, |gx| {
                    for s in gx.iter_mut() {
                        *s += gv;
                    }
                });
                Ok(())
            }
            Op::Concat0(parts) => {
                let parts = parts.clone();
                let mut off = 0;
                for p in parts {
                    let n = self.nodes[p.0].value.numel();
                    let piece = &g[off..off + n];
                    self.accum_into(p, |gp| {
                        for (s, d) in gp.iter_mut().zip(piece) {
                            *s += *d;
                        }
                    });
                    off += n;
                }
                Ok(())
            }
            Op::ConcatCols(parts) => {
                let parts = parts.clone();
                let n = self.nodes[id].value.shape()[0];
                let d = self.nodes[id].value.shape()[1];
                let mut off = 0;
                for p in parts {
                    let w = self.nodes[p.0].value.shape()[1];
                    self.accum_into(p, |gp| {
                        for row in 0..n {
                            for c in 0..w {
                                gp[row * w + c] += g[row * d + off + c];
                            }
                        }
                    });
                    off += w;
                }
                Ok(())
            }
            Op::RepeatRows { row, n } => {
                let (row, n) = (*row, *n);
                let d = self.nodes[row.0].value.numel();
                self.accum_into(row, |gr| {
                    for r in 0..n {
                        for c in 0..d {
                            gr[c] += g[r * d + c];
                        }
                    }
                });
                Ok(())
            }
            Op::SelectRow { table, row } => {
                let (table, row) = (*table, *row);
                let d = self.nodes[id].value.numel();
                self.accum_into(table, |gt| {
                    for c in 0..d {
                        gt[row * d + c] += g[c];
                    }
                });
                Ok(())
            }
            Op::RowsFromChw(x) => {
                let x = *x;
                let xs = self.nodes[x.0].value.shape().to_vec();
                let (c, hw) = (xs[0], xs[1] * xs[2]);
                self.accum_into(x, |gx| {
                    for cc in 0..c {
                        for p in 0..hw {
                            gx[cc * hw + p] += g[p * c + cc];
                        }
                    }
                });
                Ok(())
            }
            Op::ChwFromRows(x) => {
                let x = *x;
                let s = self.nodes[id].value.shape().to_vec();
                let (c, hw) = (s[0], s[1] * s[2]);
                self.accum_into(x, |gx| {
                    for cc in 0..c {
                        for p in 0..hw {
                            gx[p * c + cc] += g[cc * hw + p];
                        }
                    }
                });
                Ok(())
            }
            Op::Slice0 { x, from, to } => {
                let (x, from, to) = (*x, *from, *to);
                let stride: usize = self.nodes[x.0].value.shape()[1..].iter().product();
                self.accum_into(x, |gx| {
                    for (i, s) in gx[from * stride..to * stride].iter_mut().enumerate() {
                        *s += g[i];
                    }
                });
                Ok(())
            }
            Op::Reshape(x) => {
                let x = *x;
                self.accum_into(x, |gx| {
                    for (s, d) in gx.iter_mut().zip(g) {
                        *s += *d;
                    }
                });
                Ok(())
            }
            Op::Custom(op) => {
                let op = Rc::clone(op);
                // Split the borrow: values are read-only, grads mutate.
                let value_ptr: *const Tensor<S> = &self.nodes[id].value;
                let mut ctx = BackwardCtx {
                    nodes: &self.nodes,
                    grads: &mut self.grads,
                };
                // SAFETY: `ctx` never mutates `nodes`, so the shared read of
                // the output value alongside it is sound.
                let out_value = unsafe { &*value_ptr };
                op.backward(g, out_value, &mut ctx)
            }
        }
    }
}

#[inline(always)]
fn sigmoid<S: Real>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}
