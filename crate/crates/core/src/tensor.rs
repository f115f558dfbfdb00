//! Dense f64 tensors with a reverse-mode tape.
//!
//! A [`Tape`] is an arena of nodes addressed by [`Var`] handles. Every
//! primitive appends one node holding its forward value; nodes whose inputs
//! require gradients also keep the operation so that [`Tape::backward`] can
//! walk the arena in reverse. Because nodes can only reference earlier nodes,
//! arena order is a topological order.
//!
//! Broadcasting is limited to adding a bias vector over the last axis.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: axis {axis} out of range for shape {shape:?}")]
    Axis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: {message}")]
    Invalid { op: &'static str, message: String },
    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward: tape is empty or loss handle is stale")]
    EmptyTape,
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },
}

type Result<T> = std::result::Result<T, TensorError>;

/// Row-major tensor. An empty shape is a scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::DataLength {
                len: data.len(),
                shape,
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let mut t = Tensor::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) {
        assert_eq!(g.len(), self.data.len());
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(b, x)| *b += x),
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    AddBias(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    /// Saves the normalized input and per-row reciprocal std.
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Sum(Var),
    Mean(Var),
    CausalMask(Var),
    Pick {
        input: Var,
        indices: Vec<usize>,
    },
    Dot(Var, Vec<f64>),
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Gradients of the leaves of a tape, produced by [`Tape::backward`].
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    by_leaf: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a leaf. `None` if the leaf did not require gradients.
    pub fn get(&self, leaf: Var) -> Option<&Tensor> {
        self.by_leaf.get(leaf.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, leaf: Var) -> Option<Tensor> {
        self.by_leaf.get_mut(leaf.0).and_then(|g| g.take())
    }
}

/// Splits `shape` around `axis` into (outer, axis length, inner) extents.
fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Numerically stable logistic function.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// `ln σ(z) = -softplus(-z)`.
pub fn log_sigmoid(z: f64) -> f64 {
    -softplus(-z)
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn transpose_vec(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Reverse-mode tape. One tape per forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    /// Records a leaf. It participates in backward iff `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        let requires_grad = tensor.requires_grad;
        self.push_raw(
            tensor.shape.clone(),
            tensor.data.clone(),
            if requires_grad { Op::Leaf } else { Op::Constant },
            requires_grad,
        )
    }

    /// Records a constant (never differentiated).
    pub fn constant(&mut self, tensor: &Tensor) -> Var {
        self.push_raw(tensor.shape.clone(), tensor.data.clone(), Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let node = &self.nodes[v.0];
        assert_eq!(node.value.len(), 1, "scalar_value on shape {:?}", node.shape);
        node.value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor {
            shape: n.shape.clone(),
            data: n.value.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_raw(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Pushes a node; drops the op when no input needs a gradient.
    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if rg { op } else { Op::Constant };
        self.push_raw(shape, value, op, rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa != sb {
            return Err(TensorError::Shape {
                op,
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        Ok(())
    }

    fn rank2(&self, op: &'static str, a: Var) -> Result<(usize, usize)> {
        match self.nodes[a.0].shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(TensorError::Invalid {
                op,
                message: format!("expected a matrix, got shape {:?}", self.nodes[a.0].shape),
            }),
        }
    }

    fn check_axis(&self, op: &'static str, a: Var, axis: usize) -> Result<()> {
        let shape = &self.nodes[a.0].shape;
        if axis >= shape.len() {
            return Err(TensorError::Axis {
                op,
                axis,
                shape: shape.clone(),
            });
        }
        Ok(())
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.nodes[a.0].value.iter().map(|&x| f(x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, value, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return self.add_bias(a, b);
        }
        let value = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, value, Op::Add(a, b), &[a, b]))
    }

    /// `a + bias` where `bias` is a vector matching the last axis of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let sa = &self.nodes[a.0].shape;
        let sb = &self.nodes[bias.0].shape;
        if sb.len() != 1 || sa.last() != Some(&sb[0]) {
            return Err(TensorError::Shape {
                op: "add",
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        let d = sb[0];
        let bv = &self.nodes[bias.0].value;
        let value = self.nodes[a.0]
            .value
            .iter()
            .enumerate()
            .map(|(i, x)| x + bv[i % d])
            .collect();
        let shape = sa.clone();
        Ok(self.push(shape, value, Op::AddBias(a, bias), &[a, bias]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, value, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rank2("matmul", a)?;
        let (k2, n) = self.rank2("matmul", b)?;
        if k != k2 {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_into(&self.nodes[a.0].value, &self.nodes[b.0].value, &mut out, m, k, n);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.rank2("transpose", a)?;
        let value = transpose_vec(&self.nodes[a.0].value, r, c);
        Ok(self.push(vec![c, r], value, Op::Transpose(a), &[a]))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", a, axis)?;
        let value = self.softmax_values(a, axis, false);
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, value, Op::Softmax(a, axis), &[a]))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("log_softmax", a, axis)?;
        let value = self.softmax_values(a, axis, true);
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, value, Op::LogSoftmax(a, axis), &[a]))
    }

    fn softmax_values(&self, a: Var, axis: usize, log: bool) -> Vec<f64> {
        let node = &self.nodes[a.0];
        let (outer, dim, inner) = axis_extents(&node.shape, axis);
        let x = &node.value;
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * dim + j) * inner + i;
                let max = (0..dim).map(|j| x[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = (0..dim).map(|j| (x[idx(j)] - max).exp()).sum();
                if log {
                    let lse = max + sum.ln();
                    for j in 0..dim {
                        out[idx(j)] = x[idx(j)] - lse;
                    }
                } else {
                    for j in 0..dim {
                        out[idx(j)] = (x[idx(j)] - max).exp() / sum;
                    }
                }
            }
        }
        out
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        let d = *shape.last().ok_or(TensorError::Invalid {
            op: "layer_norm",
            message: "scalar input".into(),
        })?;
        for p in [gamma, beta] {
            if self.nodes[p.0].shape != [d] {
                return Err(TensorError::Shape {
                    op: "layer_norm",
                    lhs: shape.clone(),
                    rhs: self.nodes[p.0].shape.clone(),
                });
            }
        }
        let rows = self.nodes[x.0].value.len() / d.max(1);
        let xs = &self.nodes[x.0].value;
        let g = &self.nodes[gamma.0].value;
        let b = &self.nodes[beta.0].value;
        let mut xhat = vec![0.0; xs.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xs.len()];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, gelu, Op::Gelu(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    /// `ln σ(x)`, computed as `-softplus(-x)`.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.map(a, log_sigmoid, Op::LogSigmoid(a))
    }

    /// Rows of `table` selected by `ids`, giving `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.rank2("embedding", table)?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(TensorError::Invalid {
                op: "embedding",
                message: format!("index {bad} out of range for table with {v} rows"),
            });
        }
        let tv = &self.nodes[table.0].value;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        Ok(self.push(
            vec![ids.len(), d],
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// `input[.., start..end, ..]` along `axis`.
    pub fn slice(&mut self, input: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.check_axis("slice", input, axis)?;
        let shape = self.nodes[input.0].shape.clone();
        if start > end || end > shape[axis] {
            return Err(TensorError::Invalid {
                op: "slice",
                message: format!("range {start}..{end} out of bounds for axis {axis} of {shape:?}"),
            });
        }
        let (outer, dim, inner) = axis_extents(&shape, axis);
        let len = end - start;
        let x = &self.nodes[input.0].value;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * dim * inner;
            out.extend_from_slice(&x[base + start * inner..base + end * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        Ok(self.push(new_shape, out, Op::Slice { input, axis, start }, &[input]))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs.first().ok_or(TensorError::Invalid {
            op: "concat",
            message: "no inputs".into(),
        })?;
        self.check_axis("concat", first, axis)?;
        let base_shape = self.nodes[first.0].shape.clone();
        let mut total = 0;
        for &v in inputs {
            let s = &self.nodes[v.0].shape;
            let compatible = s.len() == base_shape.len()
                && s.iter()
                    .zip(&base_shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::Shape {
                    op: "concat",
                    lhs: base_shape,
                    rhs: s.clone(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_extents(&base_shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let n = &self.nodes[v.0];
                let chunk = n.shape[axis] * inner;
                out.extend_from_slice(&n.value[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base_shape;
        shape[axis] = total;
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.iter().sum();
        self.push(vec![], vec![s], Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len();
        let s = self.nodes[a.0].value.iter().sum::<f64>() / n as f64;
        self.push(vec![], vec![s], Op::Mean(a), &[a])
    }

    /// Sets entries above the diagonal of a square matrix to `-inf`.
    pub fn causal_mask(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.rank2("causal_mask", a)?;
        if r != c {
            return Err(TensorError::Invalid {
                op: "causal_mask",
                message: format!("expected square matrix, got [{r}, {c}]"),
            });
        }
        let mut value = self.nodes[a.0].value.clone();
        for i in 0..r {
            for j in i + 1..c {
                value[i * c + j] = f64::NEG_INFINITY;
            }
        }
        Ok(self.push(vec![r, c], value, Op::CausalMask(a), &[a]))
    }

    /// `out[i] = input[i, indices[i]]` for a matrix input.
    pub fn pick(&mut self, input: Var, indices: &[usize]) -> Result<Var> {
        let (r, c) = self.rank2("pick", input)?;
        if indices.len() != r {
            return Err(TensorError::Shape {
                op: "pick",
                lhs: vec![r, c],
                rhs: vec![indices.len()],
            });
        }
        if let Some(&bad) = indices.iter().find(|&&j| j >= c) {
            return Err(TensorError::Invalid {
                op: "pick",
                message: format!("column {bad} out of range for {c} columns"),
            });
        }
        let x = &self.nodes[input.0].value;
        let out = indices.iter().enumerate().map(|(i, &j)| x[i * c + j]).collect();
        Ok(self.push(
            vec![r],
            out,
            Op::Pick {
                input,
                indices: indices.to_vec(),
            },
            &[input],
        ))
    }

    /// Scalar `Σ a_i w_i` against constant weights.
    pub fn dot_const(&mut self, a: Var, weights: &[f64]) -> Result<Var> {
        let n = self.nodes[a.0].value.len();
        if weights.len() != n {
            return Err(TensorError::Shape {
                op: "dot",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: vec![weights.len()],
            });
        }
        let s = self.nodes[a.0]
            .value
            .iter()
            .zip(weights)
            .map(|(x, w)| x * w)
            .sum();
        Ok(self.push(vec![], vec![s], Op::Dot(a, weights.to_vec()), &[a]))
    }

    /// Reverse pass from a scalar `loss`. Returns leaf gradients and clears
    /// the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(TensorError::EmptyTape);
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(TensorError::NonScalarLoss(self.nodes[loss.0].shape.clone()));
        }
        let nodes = std::mem::take(&mut self.nodes);
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut leaves: Vec<Option<Tensor>> = vec![None; nodes.len()];

        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            backprop_node(&nodes, node, &g, &mut grads);
            if let Op::Leaf = node.op {
                leaves[idx] = Some(Tensor {
                    shape: node.shape.clone(),
                    data: g,
                    requires_grad: false,
                    grad: None,
                });
            }
        }
        Ok(Gradients { by_leaf: leaves })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, f: impl FnOnce(&mut [f64])) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
    f(slot);
}

fn backprop_node(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let add_all = |dst: &mut [f64], src: &[f64]| dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
    match &node.op {
        Op::Leaf | Op::Constant => {}
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, |d| add_all(d, g));
            accumulate(grads, nodes, *b, |d| add_all(d, g));
        }
        Op::AddBias(a, b) => {
            accumulate(grads, nodes, *a, |d| add_all(d, g));
            let n = nodes[b.0].value.len();
            accumulate(grads, nodes, *b, |d| {
                for (i, gi) in g.iter().enumerate() {
                    d[i % n] += gi;
                }
            });
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, |d| add_all(d, g));
            accumulate(grads, nodes, *b, |d| d.iter_mut().zip(g).for_each(|(d, s)| *d -= s));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            accumulate(grads, nodes, *a, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * bv[i];
                }
            });
            accumulate(grads, nodes, *b, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * av[i];
                }
            });
        }
        Op::Scale(a, c) => {
            accumulate(grads, nodes, *a, |d| d.iter_mut().zip(g).for_each(|(d, s)| *d += c * s));
        }
        Op::MatMul(a, b) => {
            let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
            let n = nodes[b.0].shape[1];
            if nodes[a.0].requires_grad {
                // dA = dC · Bᵀ
                let bt = transpose_vec(&nodes[b.0].value, k, n);
                accumulate(grads, nodes, *a, |d| matmul_into(g, &bt, d, m, n, k));
            }
            if nodes[b.0].requires_grad {
                // dB = Aᵀ · dC
                let at = transpose_vec(&nodes[a.0].value, m, k);
                accumulate(grads, nodes, *b, |d| matmul_into(&at, g, d, k, m, n));
            }
        }
        Op::Transpose(a) => {
            let (r, c) = (node.shape[0], node.shape[1]);
            let gt = transpose_vec(g, r, c);
            accumulate(grads, nodes, *a, |d| add_all(d, &gt));
        }
        Op::Softmax(a, axis) => {
            let y = &node.value;
            let (outer, dim, inner) = axis_extents(&node.shape, *axis);
            accumulate(grads, nodes, *a, |d| {
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * dim + j) * inner + i;
                        let dot: f64 = (0..dim).map(|j| g[idx(j)] * y[idx(j)]).sum();
                        for j in 0..dim {
                            d[idx(j)] += y[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
            });
        }
        Op::LogSoftmax(a, axis) => {
            let y = &node.value;
            let (outer, dim, inner) = axis_extents(&node.shape, *axis);
            accumulate(grads, nodes, *a, |d| {
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * dim + j) * inner + i;
                        let gs: f64 = (0..dim).map(|j| g[idx(j)]).sum();
                        for j in 0..dim {
                            d[idx(j)] += g[idx(j)] - y[idx(j)].exp() * gs;
                        }
                    }
                }
            });
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let d = *node.shape.last().unwrap();
            let rows = rstd.len();
            let gv = &nodes[gamma.0].value;
            accumulate(grads, nodes, *x, |dx| {
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..d {
                        let dh = gr[j] * gv[j];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[j];
                    }
                    mean_dh /= d as f64;
                    mean_dh_h /= d as f64;
                    for j in 0..d {
                        let dh = gr[j] * gv[j];
                        dx[r * d + j] += rstd[r] * (dh - mean_dh - hr[j] * mean_dh_h);
                    }
                }
            });
            accumulate(grads, nodes, *gamma, |dg| {
                for (i, gi) in g.iter().enumerate() {
                    dg[i % d] += gi * xhat[i];
                }
            });
            accumulate(grads, nodes, *beta, |db| {
                for (i, gi) in g.iter().enumerate() {
                    db[i % d] += gi;
                }
            });
        }
        Op::Gelu(a) => {
            let x = &nodes[a.0].value;
            accumulate(grads, nodes, *a, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * gelu_grad(x[i]);
                }
            });
        }
        Op::Relu(a) => {
            let x = &nodes[a.0].value;
            accumulate(grads, nodes, *a, |d| {
                for i in 0..d.len() {
                    if x[i] > 0.0 {
                        d[i] += g[i];
                    }
                }
            });
        }
        Op::Sigmoid(a) => {
            let y = &node.value;
            accumulate(grads, nodes, *a, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            });
        }
        Op::LogSigmoid(a) => {
            let x = &nodes[a.0].value;
            accumulate(grads, nodes, *a, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * sigmoid(-x[i]);
                }
            });
        }
        Op::Embedding { table, ids } => {
            let dm = node.shape[1];
            accumulate(grads, nodes, *table, |d| {
                for (r, &id) in ids.iter().enumerate() {
                    add_all(&mut d[id * dm..(id + 1) * dm], &g[r * dm..(r + 1) * dm]);
                }
            });
        }
        Op::Slice { input, axis, start } => {
            let in_shape = &nodes[input.0].shape;
            let (outer, dim, inner) = axis_extents(in_shape, *axis);
            let len = node.shape[*axis];
            accumulate(grads, nodes, *input, |d| {
                for o in 0..outer {
                    let base = o * dim * inner + start * inner;
                    add_all(&mut d[base..base + len * inner], &g[o * len * inner..(o + 1) * len * inner]);
                }
            });
        }
        Op::Concat { inputs, axis } => {
            let (outer, total, inner) = axis_extents(&node.shape, *axis);
            let mut offset = 0;
            for &v in inputs {
                let len = nodes[v.0].shape[*axis];
                accumulate(grads, nodes, v, |d| {
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        add_all(&mut d[o * len * inner..(o + 1) * len * inner], &g[src..src + len * inner]);
                    }
                });
                offset += len;
            }
        }
        Op::Sum(a) => {
            accumulate(grads, nodes, *a, |d| d.iter_mut().for_each(|x| *x += g[0]));
        }
        Op::Mean(a) => {
            let n = nodes[a.0].value.len() as f64;
            accumulate(grads, nodes, *a, |d| d.iter_mut().for_each(|x| *x += g[0] / n));
        }
        Op::CausalMask(a) => {
            let c = node.shape[1];
            accumulate(grads, nodes, *a, |d| {
                for (i, gi) in g.iter().enumerate() {
                    if i % c <= i / c {
                        d[i] += gi;
                    }
                }
            });
        }
        Op::Pick { input, indices } => {
            let c = nodes[input.0].shape[1];
            accumulate(grads, nodes, *input, |d| {
                for (i, &j) in indices.iter().enumerate() {
                    d[i * c + j] += g[i];
                }
            });
        }
        Op::Dot(a, w) => {
            accumulate(grads, nodes, *a, |d| {
                for (di, wi) in d.iter_mut().zip(w) {
                    *di += g[0] * wi;
                }
            });
        }
    }
}

/// Maximum relative error between analytic and central-difference gradients.
///
/// `f` builds a scalar on the given tape from the parameter handles. All
/// coordinates are checked when `max_coords` is `None`; otherwise an evenly
/// strided sample of at most `max_coords` per tensor. The error of one
/// coordinate is `|a - n| / max(1e-8, |a| + |n|)`.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64, max_coords: Option<usize>) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor], with_grad: bool| -> Result<(f64, Option<Gradients>, Vec<Var>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps
            .iter()
            .map(|p| {
                if with_grad {
                    tape.leaf(&p.clone().with_grad())
                } else {
                    tape.constant(p)
                }
            })
            .collect();
        let out = f(&mut tape, &vars)?;
        let value = tape.scalar_value(out);
        let grads = if with_grad { Some(tape.backward(out)?) } else { None };
        Ok((value, grads, vars))
    };

    let (_, grads, vars) = eval(params, true)?;
    let grads = grads.expect("gradients requested");
    let mut work: Vec<Tensor> = params.to_vec();
    let mut worst = 0.0f64;
    for (pi, p) in params.iter().enumerate() {
        let n = p.numel();
        let stride = match max_coords {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        for c in (0..n).step_by(stride) {
            let analytic = grads.get(vars[pi]).map_or(0.0, |g| g.data()[c]);
            let orig = work[pi].data[c];
            work[pi].data[c] = orig + eps;
            let (fp, _, _) = eval(&work, false)?;
            work[pi].data[c] = orig - eps;
            let (fm, _, _) = eval(&work, false)?;
            work[pi].data[c] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let err = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
