//! Tape-based reverse-mode differentiation over the small set of operations
//! the networks in this crate are built from.
//!
//! Every node stores its forward value. [`Graph::backward`] walks the tape in
//! reverse and accumulates gradients for parameter leaves and for inputs that
//! were created with [`Graph::input_with_grad`]. [`Graph::detach`] marks a
//! stop-gradient point: the forward value is copied and nothing flows back
//! through it.

use std::cell::{Ref, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use super::{gemm, GradSet, NnError, ParamSet, Scalar, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which parameter set a forward pass reads, and whether those parameters
/// should receive gradients.
#[derive(Clone, Copy, Debug)]
pub struct Bind<'a, T> {
    pub params: &'a ParamSet<T>,
    pub trainable: bool,
}

impl<'a, T> Bind<'a, T> {
    pub fn trainable(params: &'a ParamSet<T>) -> Self {
        Self {
            params,
            trainable: true,
        }
    }

    pub fn frozen(params: &'a ParamSet<T>) -> Self {
        Self {
            params,
            trainable: false,
        }
    }
}

/// Geometry of a valid (unpadded) NHWC convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub filters: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.kernel * self.kernel * self.in_c
    }

    fn positions(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }
}

enum Op<T> {
    Input,
    Param(String),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Offset(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Softplus(Var),
    Square(Var),
    Minimum(Var, Var),
    RowSum(Var),
    Mean(Var),
    Sum(Var),
    Concat(Vec<Var>),
    Slice(Var, usize, usize),
    SliceRows(Var, usize, usize),
    Reshape(Var),
    Detach,
    Gather(Var, Vec<usize>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        cols: Vec<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Relu(..) => "relu",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Exp(..) => "exp",
            Op::Softplus(..) => "softplus",
            Op::Square(..) => "square",
            Op::Minimum(..) => "minimum",
            Op::RowSum(..) => "row_sum",
            Op::Mean(..) => "mean",
            Op::Sum(..) => "sum",
            Op::Concat(..) => "concat",
            Op::Slice(..) => "slice",
            Op::SliceRows(..) => "slice_rows",
            Op::Reshape(..) => "reshape",
            Op::Detach => "detach",
            Op::Gather(..) => "gather",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Conv2d { .. } => "conv2d",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    scope: Rc<str>,
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    params: GradSet<T>,
    inputs: HashMap<Var, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn params(&self) -> &GradSet<T> {
        &self.params
    }

    pub fn into_params(self) -> GradSet<T> {
        self.params
    }

    /// Gradient with respect to an input created by
    /// [`Graph::input_with_grad`]; `None` if nothing flowed into it.
    pub fn wrt(&self, var: Var) -> Option<&Tensor<T>> {
        self.inputs.get(&var)
    }
}

/// A recording of forward computations.
pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    scope: RefCell<Vec<String>>,
    scope_label: RefCell<Rc<str>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Pops the scope pushed by [`Graph::scope`] when dropped.
pub struct ScopeGuard<'g, T: Scalar> {
    graph: &'g Graph<T>,
}

impl<T: Scalar> Drop for ScopeGuard<'_, T> {
    fn drop(&mut self) {
        self.graph.scope.borrow_mut().pop();
        self.graph.refresh_scope();
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            scope: RefCell::new(Vec::new()),
            scope_label: RefCell::new(Rc::from("")),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Labels nodes created while the guard is alive; labels nest with `/`.
    pub fn scope(&self, name: &str) -> ScopeGuard<'_, T> {
        self.scope.borrow_mut().push(name.to_string());
        self.refresh_scope();
        ScopeGuard { graph: self }
    }

    fn refresh_scope(&self) {
        *self.scope_label.borrow_mut() = Rc::from(self.scope.borrow().join("/"));
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let scope = self.scope_label.borrow().clone();
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
            scope,
        });
        Var(nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    /// Borrow of a node's forward value.
    pub fn value(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes.borrow()[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    // ---- leaves ----

    /// Constant input; receives no gradient.
    pub fn input(&self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input, false)
    }

    /// Input whose gradient is reported by [`Gradients::wrt`].
    pub fn input_with_grad(&self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input, true)
    }

    pub fn constant(&self, value: T) -> Var {
        self.input(Tensor::scalar(value))
    }

    /// Leaf for the parameter at `path`. Frozen binds yield constants.
    pub fn param(&self, bind: Bind<'_, T>, path: &str) -> Result<Var, NnError> {
        let value = bind.params.require(path)?.clone();
        Ok(if bind.trainable {
            self.push(value, Op::Param(path.to_string()), true)
        } else {
            self.push(value, Op::Input, false)
        })
    }

    // ---- unary / binary elementwise ----

    fn unary(&self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(a).map(f);
        let rg = self.needs(&[a]);
        self.push(value, op, rg)
    }

    fn binary(&self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            assert_eq!(
                x.shape(),
                y.shape(),
                "elementwise {} shape mismatch",
                op.name()
            );
            let data = x
                .data()
                .iter()
                .zip(y.data())
                .map(|(&p, &q)| f(p, q))
                .collect();
            Tensor::new(x.shape().to_vec(), data).expect("same shape")
        };
        let rg = self.needs(&[a, b]);
        self.push(value, op, rg)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |p, q| p + q, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |p, q| p - q, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |p, q| p * q, Op::Mul(a, b))
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |p, q| if p <= q { p } else { q }, Op::Minimum(a, b))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        self.unary(a, |v| v * c, Op::Scale(a, c))
    }

    pub fn neg(&self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn offset(&self, a: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        self.unary(a, |v| v + c, Op::Offset(a))
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(
            a,
            |v| if v > T::zero() { v } else { T::zero() },
            Op::Relu(a),
        )
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, |v| v.tanh(), Op::Tanh(a))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, |v| v.exp(), Op::Exp(a))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary(a, |v| v * v, Op::Square(a))
    }

    // ---- structural ----

    /// Stop-gradient: same value, no upstream gradient.
    pub fn detach(&self, a: Var) -> Var {
        let value = self.tensor(a);
        self.push(value, Op::Detach, false)
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let value = self
            .tensor(a)
            .reshaped(shape)
            .unwrap_or_else(|e| panic!("reshape: {e}"));
        let rg = self.needs(&[a]);
        self.push(value, Op::Reshape(a), rg)
    }

    /// Concatenates `[rows, c_i]` views along the column axis.
    pub fn concat(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let value = {
            let nodes = self.nodes.borrow();
            let rows = nodes[parts[0].0].value.rows();
            let widths: Vec<usize> = parts
                .iter()
                .map(|p| {
                    let t = &nodes[p.0].value;
                    assert_eq!(t.rows(), rows, "concat row mismatch");
                    t.cols()
                })
                .collect();
            let total: usize = widths.iter().sum();
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for p in parts {
                    data.extend_from_slice(nodes[p.0].value.row_slice(r));
                }
            }
            Tensor::new(vec![rows, total], data).expect("concat shape")
        };
        let rg = self.needs(parts);
        self.push(value, Op::Concat(parts.to_vec()), rg)
    }

    /// Columns `start..end` of a `[rows, cols]` view.
    pub fn slice_cols(&self, a: Var, start: usize, end: usize) -> Var {
        let value = {
            let x = self.value(a);
            let cols = x.cols();
            assert!(start < end && end <= cols, "slice {start}..{end} of {cols}");
            let rows = x.rows();
            let mut data = Vec::with_capacity(rows * (end - start));
            for r in 0..rows {
                data.extend_from_slice(&x.row_slice(r)[start..end]);
            }
            Tensor::new(vec![rows, end - start], data).expect("slice shape")
        };
        let rg = self.needs(&[a]);
        self.push(value, Op::Slice(a, start, end), rg)
    }

    /// Rows `start..end` of a `[rows, cols]` view.
    pub fn slice_rows(&self, a: Var, start: usize, end: usize) -> Var {
        let value = {
            let x = self.value(a);
            let (rows, cols) = (x.rows(), x.cols());
            assert!(
                start < end && end <= rows,
                "row slice {start}..{end} of {rows}"
            );
            let data = x.data()[start * cols..end * cols].to_vec();
            Tensor::new(vec![end - start, cols], data).expect("row slice shape")
        };
        let rg = self.needs(&[a]);
        self.push(value, Op::SliceRows(a, start, end), rg)
    }

    /// Picks column `index[r]` from row `r`, giving `[rows, 1]`.
    pub fn gather(&self, a: Var, index: &[usize]) -> Var {
        let value = {
            let x = self.value(a);
            assert_eq!(x.rows(), index.len(), "gather index count");
            let data = index
                .iter()
                .enumerate()
                .map(|(r, &c)| x.row_slice(r)[c])
                .collect();
            Tensor::new(vec![index.len(), 1], data).expect("gather shape")
        };
        let rg = self.needs(&[a]);
        self.push(value, Op::Gather(a, index.to_vec()), rg)
    }

    // ---- reductions ----

    /// Sum over columns: `[rows, cols] -> [rows, 1]`.
    pub fn row_sum(&self, a: Var) -> Var {
        let value = {
            let x = self.value(a);
            let rows = x.rows();
            let data = (0..rows)
                .map(|r| x.row_slice(r).iter().copied().sum())
                .collect();
            Tensor::new(vec![rows, 1], data).expect("row_sum shape")
        };
        let rg = self.needs(&[a]);
        self.push(value, Op::RowSum(a), rg)
    }

    pub fn mean(&self, a: Var) -> Var {
        let value = {
            let x = self.value(a);
            let n = T::from_f64(x.len() as f64);
            Tensor::scalar(x.data().iter().copied().sum::<T>() / n)
        };
        let rg = self.needs(&[a]);
        self.push(value, Op::Mean(a), rg)
    }

    pub fn sum(&self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).data().iter().copied().sum());
        let rg = self.needs(&[a]);
        self.push(value, Op::Sum(a), rg)
    }

    // ---- dense layers ----

    /// `[m, k] x [k, n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let (x, w) = (&nodes[a.0].value, &nodes[b.0].value);
            let (m, k) = (x.rows(), x.cols());
            assert_eq!(w.rows(), k, "matmul inner dimension {} vs {}", k, w.rows());
            let n = w.cols();
            let mut out = vec![T::zero(); m * n];
            gemm(m, k, n, x.data(), false, w.data(), false, &mut out, false);
            Tensor::new(vec![m, n], out).expect("matmul shape")
        };
        let rg = self.needs(&[a, b]);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// Adds a length-`n` bias to every row of `[rows, n]`.
    pub fn add_bias(&self, a: Var, bias: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let (x, b) = (&nodes[a.0].value, &nodes[bias.0].value);
            let n = x.cols();
            assert_eq!(b.len(), n, "bias length {} vs {}", b.len(), n);
            let mut out = x.clone();
            for row in out.data_mut().chunks_mut(n) {
                for (o, &bb) in row.iter_mut().zip(b.data()) {
                    *o = *o + bb;
                }
            }
            out
        };
        let rg = self.needs(&[a, bias]);
        self.push(value, Op::AddBias(a, bias), rg)
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&self, a: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let eps = T::from_f64(eps);
        let (value, xhat, rstd) = {
            let nodes = self.nodes.borrow();
            let (x, g, b) = (
                &nodes[a.0].value,
                &nodes[gain.0].value,
                &nodes[bias.0].value,
            );
            let (rows, d) = (x.rows(), x.cols());
            assert_eq!(g.len(), d, "layer_norm gain length");
            assert_eq!(b.len(), d, "layer_norm bias length");
            let dn = T::from_f64(d as f64);
            let mut out = Vec::with_capacity(rows * d);
            let mut xhat = Vec::with_capacity(rows * d);
            let mut rstd = Vec::with_capacity(rows);
            for r in 0..rows {
                let row = x.row_slice(r);
                let mu = row.iter().copied().sum::<T>() / dn;
                let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / dn;
                let rs = T::one() / (var + eps).sqrt();
                rstd.push(rs);
                for (j, &v) in row.iter().enumerate() {
                    let h = (v - mu) * rs;
                    xhat.push(h);
                    out.push(g.data()[j] * h + b.data()[j]);
                }
            }
            (
                Tensor::new(x.shape().to_vec(), out).expect("layer_norm shape"),
                xhat,
                rstd,
            )
        };
        let rg = self.needs(&[a, gain, bias]);
        self.push(
            value,
            Op::LayerNorm {
                x: a,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        )
    }

    /// Valid NHWC convolution. `x: [B, H, W, C]`, `w: [K, K, C, F]`, `b: [F]`.
    pub fn conv2d(&self, x: Var, w: Var, b: Var, stride: usize) -> Var {
        let (value, geom, cols) = {
            let nodes = self.nodes.borrow();
            let (xin, wt, bt) = (&nodes[x.0].value, &nodes[w.0].value, &nodes[b.0].value);
            let xs = xin.shape();
            let ws = wt.shape();
            assert_eq!(xs.len(), 4, "conv2d input must be [B, H, W, C]");
            assert_eq!(ws.len(), 4, "conv2d weight must be [K, K, C, F]");
            assert_eq!(ws[0], ws[1], "square kernels only");
            assert_eq!(ws[2], xs[3], "conv2d channel mismatch");
            let (k, f) = (ws[0], ws[3]);
            assert_eq!(bt.len(), f, "conv2d bias length");
            assert!(xs[1] >= k && xs[2] >= k, "conv2d input smaller than kernel");
            let geom = ConvGeom {
                batch: xs[0],
                in_h: xs[1],
                in_w: xs[2],
                in_c: xs[3],
                kernel: k,
                stride,
                out_h: (xs[1] - k) / stride + 1,
                out_w: (xs[2] - k) / stride + 1,
                filters: f,
            };
            let cols = im2col(xin.data(), &geom);
            let (m, kk) = (geom.positions(), geom.patch());
            let mut out = Vec::with_capacity(m * f);
            for _ in 0..m {
                out.extend_from_slice(bt.data());
            }
            gemm(m, kk, f, &cols, false, wt.data(), false, &mut out, true);
            let value = Tensor::new(vec![geom.batch, geom.out_h, geom.out_w, f], out)
                .expect("conv2d shape");
            (value, geom, cols)
        };
        let rg = self.needs(&[x, w, b]);
        self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
            rg,
        )
    }

    // ---- backward ----

    /// Reverse-mode gradients of the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, NnError> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.0];
        if root.value.len() != 1 {
            return Err(NnError::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        if !root.value.data()[0].is_finite() {
            let culprit = nodes[..=loss.0]
                .iter()
                .find(|n| !n.value.is_finite())
                .unwrap_or(root);
            return Err(NnError::NonFinite {
                op: culprit.op.name().to_string(),
                path: culprit.scope.to_string(),
            });
        }

        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = Gradients {
            params: GradSet::new(),
            inputs: HashMap::new(),
        };

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else {
                continue;
            };
            let y = node.value.data();
            match &node.op {
                Op::Input => {
                    let t = Tensor::new(node.value.shape().to_vec(), gy).expect("grad shape");
                    out.inputs.insert(Var(i), t);
                }
                Op::Param(path) => {
                    let t = Tensor::new(node.value.shape().to_vec(), gy).expect("grad shape");
                    out.params.accumulate(path, t);
                }
                Op::Detach => {}
                Op::Add(a, b) => {
                    accumulate(&nodes, &mut grads, *a, || gy.clone());
                    accumulate(&nodes, &mut grads, *b, || gy.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&nodes, &mut grads, *a, || gy.clone());
                    accumulate(&nodes, &mut grads, *b, || gy.iter().map(|&g| -g).collect());
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    accumulate(&nodes, &mut grads, *a, || {
                        gy.iter().zip(bv).map(|(&g, &q)| g * q).collect()
                    });
                    accumulate(&nodes, &mut grads, *b, || {
                        gy.iter().zip(av).map(|(&g, &p)| g * p).collect()
                    });
                }
                Op::Minimum(a, b) => {
                    let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    accumulate(&nodes, &mut grads, *a, || {
                        gy.iter()
                            .zip(av.iter().zip(bv))
                            .map(|(&g, (&p, &q))| if p <= q { g } else { T::zero() })
                            .collect()
                    });
                    accumulate(&nodes, &mut grads, *b, || {
                        gy.iter()
                            .zip(av.iter().zip(bv))
                            .map(|(&g, (&p, &q))| if p <= q { T::zero() } else { g })
                            .collect()
                    });
                }
                Op::Scale(a, c) => {
                    accumulate(&nodes, &mut grads, *a, || {
                        gy.iter().map(|&g| g * *c).collect()
                    });
                }
                Op::Offset(a) | Op::Reshape(a) => {
                    accumulate(&nodes, &mut grads, *a, || gy.clone());
                }
                Op::Relu(a) => {
                    accumulate(&nodes, &mut grads, *a, || {
                        gy.iter()
                            .zip(y)
                            .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                            .collect()
                    });
                }
                Op::Tanh(a) => {
                    accumulate(&nodes, &mut grads, *a, || {
                        gy.iter()
                            .zip(y)
                            .map(|(&g, &v)| g * (T::one() - v * v))
                            .collect()
                    });
                }
                Op::Sigmoid(a) => {
                    accumulate(&nodes, &mut grads, *a, || {
                        gy.iter()
                            .zip(y)
                            .map(|(&g, &v)| g * v * (T::one() - v))
                            .collect()
                    });
                }
                Op::Exp(a) => {
                    accumulate(&nodes, &mut grads, *a, || {
                        gy.iter().zip(y).map(|(&g, &v)| g * v).collect()
                    });
                }
                Op::Softplus(a) => {
                    let x = nodes[a.0].value.data();
                    accumulate(&nodes, &mut grads, *a, || {
                        gy.iter().zip(x).map(|(&g, &v)| g * sigmoid(v)).collect()
                    });
                }
                Op::Square(a) => {
                    let x = nodes[a.0].value.data();
                    let two = T::from_f64(2.0);
                    accumulate(&nodes, &mut grads, *a, || {
                        gy.iter().zip(x).map(|(&g, &v)| g * two * v).collect()
                    });
                }
                Op::RowSum(a) => {
                    let cols = nodes[a.0].value.cols();
                    accumulate(&nodes, &mut grads, *a, || {
                        gy.iter()
                            .flat_map(|&g| std::iter::repeat_n(g, cols))
                            .collect()
                    });
                }
                Op::Mean(a) => {
                    let n = nodes[a.0].value.len();
                    let g = gy[0] / T::from_f64(n as f64);
                    accumulate(&nodes, &mut grads, *a, || vec![g; n]);
                }
                Op::Sum(a) => {
                    let n = nodes[a.0].value.len();
                    accumulate(&nodes, &mut grads, *a, || vec![gy[0]; n]);
                }
                Op::Concat(parts) => {
                    let rows = node.value.rows();
                    let total = node.value.cols();
                    let mut start = 0;
                    for p in parts {
                        let w = nodes[p.0].value.cols();
                        accumulate(&nodes, &mut grads, *p, || {
                            let mut g = Vec::with_capacity(rows * w);
                            for r in 0..rows {
                                g.extend_from_slice(&gy[r * total + start..r * total + start + w]);
                            }
                            g
                        });
                        start += w;
                    }
                }
                Op::Slice(a, start, end) => {
                    let src = &nodes[a.0].value;
                    let (rows, cols) = (src.rows(), src.cols());
                    let w = end - start;
                    accumulate(&nodes, &mut grads, *a, || {
                        let mut g = vec![T::zero(); rows * cols];
                        for r in 0..rows {
                            g[r * cols + start..r * cols + end]
                                .copy_from_slice(&gy[r * w..(r + 1) * w]);
                        }
                        g
                    });
                }
                Op::SliceRows(a, start, end) => {
                    let src = &nodes[a.0].value;
                    let cols = src.cols();
                    let len = src.len();
                    accumulate(&nodes, &mut grads, *a, || {
                        let mut g = vec![T::zero(); len];
                        g[start * cols..end * cols].copy_from_slice(&gy);
                        g
                    });
                }
                Op::Gather(a, index) => {
                    let cols = nodes[a.0].value.cols();
                    accumulate(&nodes, &mut grads, *a, || {
                        let mut g = vec![T::zero(); index.len() * cols];
                        for (r, &c) in index.iter().enumerate() {
                            g[r * cols + c] = gy[r];
                        }
                        g
                    });
                }
                Op::MatMul(a, b) => {
                    let (x, w) = (&nodes[a.0].value, &nodes[b.0].value);
                    let (m, k, n) = (x.rows(), x.cols(), w.cols());
                    accumulate(&nodes, &mut grads, *a, || {
                        let mut g = vec![T::zero(); m * k];
                        gemm(m, n, k, &gy, false, w.data(), true, &mut g, false);
                        g
                    });
                    accumulate(&nodes, &mut grads, *b, || {
                        let mut g = vec![T::zero(); k * n];
                        gemm(k, m, n, x.data(), true, &gy, false, &mut g, false);
                        g
                    });
                }
                Op::AddBias(a, bias) => {
                    let n = node.value.cols();
                    accumulate(&nodes, &mut grads, *a, || gy.clone());
                    accumulate(&nodes, &mut grads, *bias, || column_sums(&gy, n));
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let d = node.value.cols();
                    let g = nodes[gain.0].value.data();
                    accumulate(&nodes, &mut grads, *x, || {
                        let dn = T::from_f64(d as f64);
                        let mut dx = Vec::with_capacity(gy.len());
                        for (r, &rs) in rstd.iter().enumerate() {
                            let gyr = &gy[r * d..(r + 1) * d];
                            let xh = &xhat[r * d..(r + 1) * d];
                            let dxh: Vec<T> = gyr.iter().zip(g).map(|(&a, &b)| a * b).collect();
                            let mean_dxh = dxh.iter().copied().sum::<T>() / dn;
                            let mean_dxh_xh =
                                dxh.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() / dn;
                            for j in 0..d {
                                dx.push(rs * (dxh[j] - mean_dxh - xh[j] * mean_dxh_xh));
                            }
                        }
                        dx
                    });
                    accumulate(&nodes, &mut grads, *gain, || {
                        let prod: Vec<T> = gy.iter().zip(xhat).map(|(&a, &b)| a * b).collect();
                        column_sums(&prod, d)
                    });
                    accumulate(&nodes, &mut grads, *bias, || column_sums(&gy, d));
                }
                Op::Conv2d {
                    x,
                    w,
                    b,
                    geom,
                    cols,
                } => {
                    let (m, kk, f) = (geom.positions(), geom.patch(), geom.filters);
                    accumulate(&nodes, &mut grads, *w, || {
                        let mut g = vec![T::zero(); kk * f];
                        gemm(kk, m, f, cols, true, &gy, false, &mut g, false);
                        g
                    });
                    accumulate(&nodes, &mut grads, *b, || column_sums(&gy, f));
                    let wt = nodes[w.0].value.data();
                    accumulate(&nodes, &mut grads, *x, || {
                        let mut dcols = vec![T::zero(); m * kk];
                        gemm(m, f, kk, &gy, false, wt, true, &mut dcols, false);
                        col2im(&dcols, geom)
                    });
                }
            }
        }
        Ok(out)
    }
}

fn accumulate<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    target: Var,
    contribution: impl FnOnce() -> Vec<T>,
) {
    if !nodes[target.0].requires_grad {
        return;
    }
    let c = contribution();
    match &mut grads[target.0] {
        Some(existing) => {
            for (e, v) in existing.iter_mut().zip(&c) {
                *e = *e + *v;
            }
        }
        slot @ None => *slot = Some(c),
    }
}

fn column_sums<T: Scalar>(data: &[T], cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); cols];
    for row in data.chunks(cols) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o = *o + v;
        }
    }
    out
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus<T: Scalar>(v: T) -> T {
    v.max(T::zero()) + (-v.abs()).exp().ln_1p()
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let patch = g.patch();
    let mut cols = Vec::with_capacity(g.positions() * patch);
    for b in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                for ky in 0..g.kernel {
                    let iy = oy * g.stride + ky;
                    let base = ((b * g.in_h + iy) * g.in_w + ox * g.stride) * g.in_c;
                    cols.extend_from_slice(&x[base..base + g.kernel * g.in_c]);
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let mut x = vec![T::zero(); g.batch * g.in_h * g.in_w * g.in_c];
    let patch = g.patch();
    let row_len = g.kernel * g.in_c;
    let mut p = 0;
    for b in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let col = &cols[p * patch..(p + 1) * patch];
                for ky in 0..g.kernel {
                    let iy = oy * g.stride + ky;
                    let base = ((b * g.in_h + iy) * g.in_w + ox * g.stride) * g.in_c;
                    for (dst, &v) in x[base..base + row_len]
                        .iter_mut()
                        .zip(&col[ky * row_len..(ky + 1) * row_len])
                    {
                        *dst = *dst + v;
                    }
                }
                p += 1;
            }
        }
    }
    x
}
