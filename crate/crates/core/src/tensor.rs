//! Dense `f64` tensors with a recorded tape for reverse-mode differentiation.
//!
//! Every forward operation is appended to a [`Tape`] and returns a [`Var`]
//! handle. [`Tape::backward`] walks the tape in reverse from a scalar root
//! and accumulates `∂root/∂leaf` into every leaf created with
//! `requires_grad`. Storage is row-major and contiguous; there are no views.
//!
//! Non-finite values are never propagated: an operation that would produce
//! NaN or ±∞ returns [`Error::NonFinite`] (or [`Error::Domain`] when the input
//! is outside the function's domain).

use crate::error::{Error, Result};

/// A dense row-major array of `f64` with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Argument(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::Shape {
                op: "tensor",
                left: shape,
                right: vec![values.len()],
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "tensor" });
        }
        Ok(Self {
            shape,
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Self::new(Vec::new(), vec![value])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            values: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    /// Builds an `m × n` matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Argument("ragged rows".into()));
        }
        Self::new(vec![m, n], rows.concat())
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    /// Value of a scalar (or single-element) tensor.
    pub fn item(&self) -> f64 {
        self.values[0]
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [m, n] => Ok((*m, *n)),
            _ => Err(Error::Contract(format!(
                "expected a matrix, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.shape[self.shape.len() - 1];
        &self.values[i * n..(i + 1) * n]
    }
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Silu(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Sum(Var),
    Mean(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    NormalizeRows(Var),
    Diag(Var),
}

impl Op {
    fn inputs(self) -> [Option<Var>; 2] {
        match self {
            Op::Leaf => [None, None],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) | Op::MulRow(a, b) => {
                [Some(a), Some(b)]
            }
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Silu(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sqrt(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SoftmaxRows(a)
            | Op::LogSoftmaxRows(a)
            | Op::NormalizeRows(a)
            | Op::Diag(a) => [Some(a), None],
        }
    }
}

#[derive(Debug)]
struct Node {
    tensor: Tensor,
    op: Op,
    /// Some `requires_grad` leaf is an ancestor (or the node itself).
    needs_grad: bool,
}

/// Elementwise operations available through [`Tape::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Scale(f64),
    Silu,
    Exp,
    Log,
    Sqrt,
}

/// An append-only record of operations. Inputs always precede outputs.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `c += A·B` where `A` is logically `m×k` and `B` is `k×n`, each given as a
/// slice plus (row stride, column stride). `c` is contiguous row-major.
#[allow(clippy::too_many_arguments)]
fn gemm_acc(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: strides describe in-bounds element positions for the given
    // logical dimensions of each operand and `c` holds `m*n` elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn check_finite(op: &'static str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, delta: &[f64]) {
    match slot {
        Some(acc) => acc.iter_mut().zip(delta).for_each(|(a, d)| *a += d),
        None => *slot = Some(delta.to_vec()),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Gradients are accumulated for it iff
    /// `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs_grad = tensor.requires_grad;
        self.nodes.push(Node {
            tensor,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, shape: &[usize], values: Vec<f64>) -> Result<Var> {
        Ok(self.leaf(Tensor::new(shape.to_vec(), values)?))
    }

    pub fn param(&mut self, shape: &[usize], values: Vec<f64>) -> Result<Var> {
        Ok(self.leaf(Tensor::new(shape.to_vec(), values)?.with_requires_grad(true)))
    }

    pub fn tensor(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].tensor
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].tensor.values
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].tensor.shape
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].tensor.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.tensor.grad = None;
        }
    }

    fn push(&mut self, op: &'static str, shape: Vec<usize>, values: Vec<f64>, rec: Op) -> Result<Var> {
        check_finite(op, &values)?;
        let needs_grad = rec.inputs().iter().flatten().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            tensor: Tensor {
                shape,
                values,
                requires_grad: false,
                grad: None,
            },
            op: rec,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [m, n] => Ok((*m, *n)),
            other => Err(Error::Shape {
                op,
                left: other.to_vec(),
                right: vec![0, 0],
            }),
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                left: vec![m, k],
                right: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(m, k, n, self.value(a), (k, 1), self.value(b), (n, 1), &mut out);
        self.push("matmul", vec![m, n], out, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2("transpose", a)?;
        let src = self.value(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        self.push("transpose", vec![n, m], out, Op::Transpose(a))
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, rec: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(op, shape, out, rec)
    }

    fn map(&mut self, op: &'static str, a: Var, rec: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(op, shape, out, rec)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        if !c.is_finite() {
            return Err(Error::NonFinite { op: "scale" });
        }
        self.map("scale", a, Op::Scale(a, c), |x| c * x)
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.map("silu", a, Op::Silu(a), |x| x * sigmoid(x))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.map("exp", a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(x) = self.value(a).iter().find(|&&x| x < 0.0) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("negative input {x}"),
            });
        }
        self.map("log", a, Op::Log(a), f64::ln)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if let Some(x) = self.value(a).iter().find(|&&x| x < 0.0) {
            return Err(Error::Domain {
                op: "sqrt",
                detail: format!("negative input {x}"),
            });
        }
        self.map("sqrt", a, Op::Sqrt(a), f64::sqrt)
    }

    /// Dispatches one of the pointwise operations. Binary operations take
    /// two inputs of equal shape; the rest take one.
    pub fn elementwise(&mut self, op: Elementwise, inputs: &[Var]) -> Result<Var> {
        let arity = match op {
            Elementwise::Add | Elementwise::Sub | Elementwise::Mul => 2,
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(Error::Argument(format!(
                "{op:?} takes {arity} inputs, got {}",
                inputs.len()
            )));
        }
        match op {
            Elementwise::Add => self.add(inputs[0], inputs[1]),
            Elementwise::Sub => self.sub(inputs[0], inputs[1]),
            Elementwise::Mul => self.mul(inputs[0], inputs[1]),
            Elementwise::Scale(c) => self.scale(inputs[0], c),
            Elementwise::Silu => self.silu(inputs[0]),
            Elementwise::Exp => self.exp(inputs[0]),
            Elementwise::Log => self.log(inputs[0]),
            Elementwise::Sqrt => self.sqrt(inputs[0]),
        }
    }

    fn row_operand(&self, op: &'static str, x: Var, r: Var) -> Result<(usize, usize)> {
        let (m, n) = self.dims2(op, x)?;
        if self.shape(r) != [n] {
            return Err(Error::Shape {
                op,
                left: vec![m, n],
                right: self.shape(r).to_vec(),
            });
        }
        Ok((m, n))
    }

    /// Adds a length-`n` vector to every row of an `m × n` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.row_operand("add_row", x, bias)?;
        let b = self.value(bias);
        let out = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % n])
            .collect();
        self.push("add_row", vec![m, n], out, Op::AddRow(x, bias))
    }

    /// Multiplies every row of an `m × n` matrix by a length-`n` vector.
    pub fn mul_row(&mut self, x: Var, gain: Var) -> Result<Var> {
        let (m, n) = self.row_operand("mul_row", x, gain)?;
        let g = self.value(gain);
        let out = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v * g[i % n])
            .collect();
        self.push("mul_row", vec![m, n], out, Op::MulRow(x, gain))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().sum();
        self.push("sum", Vec::new(), vec![s], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        self.push("mean", Vec::new(), vec![s], Op::Mean(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2("softmax_rows", a)?;
        let src = self.value(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let dst = &mut out[i * n..(i + 1) * n];
            let mut z = 0.0;
            for (d, &x) in dst.iter_mut().zip(row) {
                *d = (x - max).exp();
                z += *d;
            }
            dst.iter_mut().for_each(|d| *d /= z);
        }
        self.push("softmax_rows", vec![m, n], out, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2("log_softmax_rows", a)?;
        let src = self.value(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            for (d, &x) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                *d = x - lse;
            }
        }
        self.push("log_softmax_rows", vec![m, n], out, Op::LogSoftmaxRows(a))
    }

    /// Scales every row to unit L2 norm. A zero row is a domain error.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2("normalize_rows", a)?;
        let src = self.value(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::Domain {
                    op: "normalize_rows",
                    detail: format!("row {i} has zero norm"),
                });
            }
            for (d, &x) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                *d = x / norm;
            }
        }
        self.push("normalize_rows", vec![m, n], out, Op::NormalizeRows(a))
    }

    /// Diagonal of a square matrix as a vector.
    pub fn diag(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2("diag", a)?;
        if m != n {
            return Err(Error::Shape {
                op: "diag",
                left: vec![m, n],
                right: vec![n, n],
            });
        }
        let src = self.value(a);
        let out = (0..n).map(|i| src[i * n + i]).collect();
        self.push("diag", vec![n], out, Op::Diag(a))
    }

    /// Accumulates `∂root/∂leaf` into every `requires_grad` ancestor of
    /// `root`. Calling it twice without [`Tape::zero_grad`] doubles the
    /// stored gradients.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if !self.tensor(root).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        adj[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            let op = self.nodes[idx].op;
            self.propagate(idx, op, &g, &mut adj)?;
            adj[idx] = Some(g);
        }

        for (node, a) in self.nodes.iter_mut().zip(adj) {
            if let (true, Some(g)) = (node.tensor.requires_grad, a) {
                check_finite("backward", &g)?;
                accumulate(&mut node.tensor.grad, &g);
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, op: Op, g: &[f64], adj: &mut [Option<Vec<f64>>]) -> Result<()> {
        let out = &self.nodes[idx].tensor.values;
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims2("matmul", a)?;
                let n = self.shape(b)[1];
                if self.nodes[a.0].needs_grad {
                    let mut ga = vec![0.0; m * k];
                    // g (m×n) · bᵀ (n×k)
                    gemm_acc(m, n, k, g, (n, 1), self.value(b), (1, n), &mut ga);
                    accumulate(&mut adj[a.0], &ga);
                }
                if self.nodes[b.0].needs_grad {
                    let mut gb = vec![0.0; k * n];
                    // aᵀ (k×m) · g (m×n)
                    gemm_acc(k, m, n, self.value(a), (1, k), g, (n, 1), &mut gb);
                    accumulate(&mut adj[b.0], &gb);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = self.dims2("transpose", a)?;
                let mut ga = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] = g[j * m + i];
                    }
                }
                accumulate(&mut adj[a.0], &ga);
            }
            Op::Add(a, b) => {
                accumulate(&mut adj[a.0], g);
                accumulate(&mut adj[b.0], g);
            }
            Op::Sub(a, b) => {
                accumulate(&mut adj[a.0], g);
                let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                accumulate(&mut adj[b.0], &neg);
            }
            Op::Mul(a, b) => {
                let ga: Vec<f64> = g.iter().zip(self.value(b)).map(|(g, y)| g * y).collect();
                let gb: Vec<f64> = g.iter().zip(self.value(a)).map(|(g, x)| g * x).collect();
                accumulate(&mut adj[a.0], &ga);
                accumulate(&mut adj[b.0], &gb);
            }
            Op::Scale(a, c) => {
                let ga: Vec<f64> = g.iter().map(|g| c * g).collect();
                accumulate(&mut adj[a.0], &ga);
            }
            Op::AddRow(x, b) => {
                let n = self.shape(b)[0];
                let mut gb = vec![0.0; n];
                for (i, gi) in g.iter().enumerate() {
                    gb[i % n] += gi;
                }
                accumulate(&mut adj[x.0], g);
                accumulate(&mut adj[b.0], &gb);
            }
            Op::MulRow(x, s) => {
                let sv = self.value(s);
                let xv = self.value(x);
                let n = sv.len();
                let mut gs = vec![0.0; n];
                let mut gx = vec![0.0; g.len()];
                for (i, gi) in g.iter().enumerate() {
                    gx[i] = gi * sv[i % n];
                    gs[i % n] += gi * xv[i];
                }
                accumulate(&mut adj[x.0], &gx);
                accumulate(&mut adj[s.0], &gs);
            }
            Op::Silu(a) => {
                let ga: Vec<f64> = g
                    .iter()
                    .zip(self.value(a))
                    .map(|(g, &x)| {
                        let s = sigmoid(x);
                        g * s * (1.0 + x * (1.0 - s))
                    })
                    .collect();
                accumulate(&mut adj[a.0], &ga);
            }
            Op::Exp(a) => {
                let ga: Vec<f64> = g.iter().zip(out).map(|(g, y)| g * y).collect();
                accumulate(&mut adj[a.0], &ga);
            }
            Op::Log(a) => {
                let ga: Vec<f64> = g.iter().zip(self.value(a)).map(|(g, x)| g / x).collect();
                accumulate(&mut adj[a.0], &ga);
            }
            Op::Sqrt(a) => {
                let ga: Vec<f64> = g.iter().zip(out).map(|(g, y)| g / (2.0 * y)).collect();
                accumulate(&mut adj[a.0], &ga);
            }
            Op::Sum(a) => {
                let ga = vec![g[0]; self.tensor(a).numel()];
                accumulate(&mut adj[a.0], &ga);
            }
            Op::Mean(a) => {
                let n = self.tensor(a).numel();
                let ga = vec![g[0] / n as f64; n];
                accumulate(&mut adj[a.0], &ga);
            }
            Op::SoftmaxRows(a) => {
                let (m, n) = self.dims2("softmax_rows", a)?;
                let mut ga = vec![0.0; m * n];
                for i in 0..m {
                    let y = &out[i * n..(i + 1) * n];
                    let gr = &g[i * n..(i + 1) * n];
                    let dot: f64 = y.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..n {
                        ga[i * n + j] = y[j] * (gr[j] - dot);
                    }
                }
                accumulate(&mut adj[a.0], &ga);
            }
            Op::LogSoftmaxRows(a) => {
                let (m, n) = self.dims2("log_softmax_rows", a)?;
                let mut ga = vec![0.0; m * n];
                for i in 0..m {
                    let y = &out[i * n..(i + 1) * n];
                    let gr = &g[i * n..(i + 1) * n];
                    let total: f64 = gr.iter().sum();
                    for j in 0..n {
                        ga[i * n + j] = gr[j] - y[j].exp() * total;
                    }
                }
                accumulate(&mut adj[a.0], &ga);
            }
            Op::NormalizeRows(a) => {
                let (m, n) = self.dims2("normalize_rows", a)?;
                let x = self.value(a);
                let mut ga = vec![0.0; m * n];
                for i in 0..m {
                    let xr = &x[i * n..(i + 1) * n];
                    let y = &out[i * n..(i + 1) * n];
                    let gr = &g[i * n..(i + 1) * n];
                    let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let dot: f64 = y.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..n {
                        ga[i * n + j] = (gr[j] - y[j] * dot) / norm;
                    }
                }
                accumulate(&mut adj[a.0], &ga);
            }
            Op::Diag(a) => {
                let n = g.len();
                let mut ga = vec![0.0; n * n];
                for i in 0..n {
                    ga[i * n + i] = g[i];
                }
                accumulate(&mut adj[a.0], &ga);
            }
        }
        Ok(())
    }
}

/// Largest relative discrepancy between the tape gradient of `f` and a
/// central difference with the given step, taken over every coordinate of
/// every input: `|analytic − numeric| / max(1, |numeric|)`.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::Argument(format!("step must be positive, got {step}")));
    }
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let root = f(&mut tape, &vars)?;
        Ok(tape.tensor(root).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|x| tape.leaf(x.clone().with_requires_grad(true)))
        .collect();
    let root = f(&mut tape, &vars)?;
    tape.backward(root)?;

    let mut worst: f64 = 0.0;
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (slot, &var) in vars.iter().enumerate() {
        let analytic = tape
            .grad(var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[slot].numel()]);
        for (i, &a) in analytic.iter().enumerate() {
            let orig = inputs[slot].values[i];
            probe[slot].values[i] = orig + step;
            let plus = eval(&probe)?;
            probe[slot].values[i] = orig - step;
            let minus = eval(&probe)?;
            probe[slot].values[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            worst = worst.max((a - numeric).abs() / numeric.abs().max(1.0));
        }
    }
    Ok(worst)
}

/// Single-input form of [`grad_check_many`].
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), step)
}
