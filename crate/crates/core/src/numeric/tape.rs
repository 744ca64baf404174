//! Reverse-mode gradient tape over a fixed set of dense ops.
//!
//! Every forward op appends one node holding its value. `backward` walks the
//! nodes in reverse, so a node's gradient is complete before it is
//! propagated to its inputs.

use super::kernels;
use super::{NumericError, Tensor};
use crate::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Identifies a parameter leaf; assigned in registration order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Primitive ops the tape can record.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OpKind<T> {
    /// `[m×k]·[k×n]`
    MatMul,
    /// Elementwise, equal shapes.
    Add,
    /// `[m×n] + [1×n]`, row broadcast.
    AddRow,
    Sub,
    /// Elementwise (Hadamard) product.
    Mul,
    /// `scale·x + shift`
    Affine { scale: T, shift: T },
    Sigmoid,
    Tanh,
    /// Softmax over all entries.
    Softmax,
    /// Sum of all entries, `[1×1]`.
    Sum,
    /// Column-wise concatenation of two matrices with equal row counts.
    Concat,
    /// Euclidean norm of all entries, `[1×1]`.
    L2Norm,
    Transpose,
}

impl<T> OpKind<T> {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::AddRow => "add_row",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Affine { .. } => "affine",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Softmax => "softmax",
            OpKind::Sum => "sum",
            OpKind::Concat => "concat",
            OpKind::L2Norm => "l2_norm",
            OpKind::Transpose => "transpose",
        }
    }

    fn arity(&self) -> usize {
        match self {
            OpKind::MatMul
            | OpKind::Add
            | OpKind::AddRow
            | OpKind::Sub
            | OpKind::Mul
            | OpKind::Concat => 2,
            _ => 1,
        }
    }
}

#[derive(Clone, Debug)]
enum Source<T> {
    Param,
    Constant,
    Op { kind: OpKind<T>, inputs: [Var; 2] },
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    source: Source<T>,
    requires_grad: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Tape<T = f64> {
    nodes: Vec<Node<T>>,
    params: Vec<Var>,
}

/// Gradients of a scalar objective with respect to every parameter leaf.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T = f64> {
    by_param: Vec<Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(shapes: &[&[usize]]) -> Self {
        Gradients {
            by_param: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    pub fn param(&self, id: ParamId) -> &Tensor<T> {
        &self.by_param[id.0]
    }

    pub fn len(&self) -> usize {
        self.by_param.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.by_param.iter()
    }

    pub fn into_tensors(self) -> Vec<Tensor<T>> {
        self.by_param
    }

    /// Adds `other` into `self`. Callers merge in a fixed order so the sum is
    /// reproducible.
    pub fn accumulate(&mut self, other: &Gradients<T>) {
        debug_assert_eq!(self.by_param.len(), other.by_param.len());
        for (a, b) in self.by_param.iter_mut().zip(&other.by_param) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, factor: T) {
        for g in &mut self.by_param {
            g.scale_assign(factor);
        }
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Registers a trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        let var = self.push(value, Source::Param, true);
        self.params.push(var);
        var
    }

    /// Registers a leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Source::Constant, false)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor<T>, source: Source<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            source,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, var: Var) -> Result<(), NumericError> {
        if var.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(NumericError::UnknownVar(var.0))
        }
    }

    /// Evaluates `kind` on `inputs`, records it, and returns the output node.
    pub fn apply(&mut self, kind: OpKind<T>, inputs: &[Var]) -> Result<Var, NumericError> {
        if inputs.len() != kind.arity() {
            return Err(NumericError::Arity {
                op: kind.name(),
                expected: kind.arity(),
                got: inputs.len(),
            });
        }
        for &v in inputs {
            self.check(v)?;
        }
        let a = inputs[0];
        let b = inputs.get(1).copied().unwrap_or(a);
        let value = self.evaluate(kind, a, b)?;
        if !value.is_finite() {
            return Err(NumericError::NonFinite { op: kind.name() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(
            value,
            Source::Op {
                kind,
                inputs: [a, b],
            },
            requires_grad,
        ))
    }

    fn evaluate(&self, kind: OpKind<T>, a: Var, b: Var) -> Result<Tensor<T>, NumericError> {
        let x = &self.nodes[a.0].value;
        let y = &self.nodes[b.0].value;
        let mismatch = || NumericError::ShapeMismatch {
            op: kind.name(),
            lhs: x.shape().to_vec(),
            rhs: y.shape().to_vec(),
        };
        let out = match kind {
            OpKind::MatMul => {
                if x.shape().len() != 2 || y.shape().len() != 2 || x.cols() != y.rows() {
                    return Err(mismatch());
                }
                let (m, k, n) = (x.rows(), x.cols(), y.cols());
                Tensor::matrix(m, n, kernels::matmul(x.data(), y.data(), m, k, n))?
            }
            OpKind::Add | OpKind::Sub | OpKind::Mul => {
                if x.shape() != y.shape() {
                    return Err(mismatch());
                }
                let data = x.data().iter().zip(y.data());
                let data: Vec<T> = match kind {
                    OpKind::Add => data.map(|(&p, &q)| p + q).collect(),
                    OpKind::Sub => data.map(|(&p, &q)| p - q).collect(),
                    _ => data.map(|(&p, &q)| p * q).collect(),
                };
                Tensor::new(x.shape().to_vec(), data)?
            }
            OpKind::AddRow => {
                if x.shape().len() != 2 || y.shape() != [1, x.cols()] {
                    return Err(mismatch());
                }
                let cols = x.cols();
                let bias = y.data();
                let data = x
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| v + bias[i % cols])
                    .collect();
                Tensor::new(x.shape().to_vec(), data)?
            }
            OpKind::Affine { scale, shift } => x.map(|v| scale * v + shift),
            OpKind::Sigmoid => x.map(kernels::sigmoid),
            OpKind::Tanh => x.map(T::tanh),
            OpKind::Softmax => {
                if x.is_empty() {
                    return Err(mismatch());
                }
                Tensor::new(x.shape().to_vec(), kernels::softmax(x.data()))?
            }
            OpKind::Sum => Tensor::scalar(x.data().iter().copied().sum()),
            OpKind::L2Norm => Tensor::scalar(x.norm()),
            OpKind::Concat => {
                if x.shape().len() != 2 || y.shape().len() != 2 || x.rows() != y.rows() {
                    return Err(mismatch());
                }
                let (rows, ca, cb) = (x.rows(), x.cols(), y.cols());
                let mut data = Vec::with_capacity(rows * (ca + cb));
                for r in 0..rows {
                    data.extend_from_slice(&x.data()[r * ca..(r + 1) * ca]);
                    data.extend_from_slice(&y.data()[r * cb..(r + 1) * cb]);
                }
                Tensor::matrix(rows, ca + cb, data)?
            }
            OpKind::Transpose => {
                if x.shape().len() != 2 {
                    return Err(mismatch());
                }
                Tensor::matrix(
                    x.cols(),
                    x.rows(),
                    kernels::transpose(x.data(), x.rows(), x.cols()),
                )?
            }
        };
        Ok(out)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        self.apply(OpKind::MatMul, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        self.apply(OpKind::Add, &[a, b])
    }

    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var, NumericError> {
        self.apply(OpKind::AddRow, &[a, bias])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        self.apply(OpKind::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        self.apply(OpKind::Mul, &[a, b])
    }

    pub fn affine(&mut self, a: Var, scale: T, shift: T) -> Result<Var, NumericError> {
        self.apply(OpKind::Affine { scale, shift }, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, NumericError> {
        self.apply(OpKind::Sigmoid, &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, NumericError> {
        self.apply(OpKind::Tanh, &[a])
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var, NumericError> {
        self.apply(OpKind::Softmax, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, NumericError> {
        self.apply(OpKind::Sum, &[a])
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var, NumericError> {
        self.apply(OpKind::Concat, &[a, b])
    }

    pub fn l2_norm(&mut self, a: Var) -> Result<Var, NumericError> {
        self.apply(OpKind::L2Norm, &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, NumericError> {
        self.apply(OpKind::Transpose, &[a])
    }

    /// `x·W + b` for a `[1×n]` bias row.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NumericError> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    /// Gradient of the scalar node `output`, scaled by `seed`.
    pub fn backward(&self, output: Var, seed: T) -> Result<Gradients<T>, NumericError> {
        self.check(output)?;
        let shape = self.nodes[output.0].value.shape().to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(NumericError::NonScalarSeed { shape });
        }
        self.backward_from(&[(output, Tensor::full(&shape, seed))])
    }

    /// Reverse sweep seeded at several nodes at once; equivalent to the
    /// gradient of `Σ ⟨seedᵢ, nodeᵢ⟩`.
    pub fn backward_from(&self, seeds: &[(Var, Tensor<T>)]) -> Result<Gradients<T>, NumericError> {
        if self.nodes.is_empty() {
            return Err(NumericError::EmptyTape);
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        let mut last = 0;
        for (var, seed) in seeds {
            self.check(*var)?;
            let node = &self.nodes[var.0];
            if seed.shape() != node.value.shape() {
                return Err(NumericError::ShapeMismatch {
                    op: "backward_seed",
                    lhs: node.value.shape().to_vec(),
                    rhs: seed.shape().to_vec(),
                });
            }
            accumulate(&mut grads[var.0], seed.clone());
            last = last.max(var.0);
        }

        for idx in (0..=last).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Source::Op { kind, inputs } = node.source else {
                continue;
            };
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            self.propagate(kind, inputs, &node.value, &upstream, &mut grads);
        }

        let by_param = self
            .params
            .iter()
            .map(|&v| {
                grads[v.0]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(self.nodes[v.0].value.shape()))
            })
            .collect();
        Ok(Gradients { by_param })
    }

    fn propagate(
        &self,
        kind: OpKind<T>,
        inputs: [Var; 2],
        out: &Tensor<T>,
        dy: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let [a, b] = inputs;
        let x = &self.nodes[a.0].value;
        let y = &self.nodes[b.0].value;
        let wants_a = self.nodes[a.0].requires_grad;
        let wants_b = self.nodes[b.0].requires_grad;
        let elementwise = |f: &dyn Fn(T, T) -> T, src: &Tensor<T>| -> Tensor<T> {
            let data = src.data().iter().zip(dy.data()).map(|(&s, &g)| f(s, g)).collect();
            Tensor::new(src.shape().to_vec(), data).expect("shape preserved")
        };

        match kind {
            OpKind::MatMul => {
                let (m, k, n) = (x.rows(), x.cols(), y.cols());
                if wants_a {
                    let da = kernels::matmul_nt(dy.data(), y.data(), m, n, k);
                    accumulate(&mut grads[a.0], Tensor::matrix(m, k, da).expect("shape"));
                }
                if wants_b {
                    let db = kernels::matmul_tn(x.data(), dy.data(), m, k, n);
                    accumulate(&mut grads[b.0], Tensor::matrix(k, n, db).expect("shape"));
                }
            }
            OpKind::Add => {
                if wants_a {
                    accumulate(&mut grads[a.0], dy.clone());
                }
                if wants_b {
                    accumulate(&mut grads[b.0], dy.clone());
                }
            }
            OpKind::Sub => {
                if wants_a {
                    accumulate(&mut grads[a.0], dy.clone());
                }
                if wants_b {
                    accumulate(&mut grads[b.0], dy.map(|g| -g));
                }
            }
            OpKind::Mul => {
                if wants_a {
                    accumulate(&mut grads[a.0], elementwise(&|s, g| s * g, y));
                }
                if wants_b {
                    accumulate(&mut grads[b.0], elementwise(&|s, g| s * g, x));
                }
            }
            OpKind::AddRow => {
                if wants_a {
                    accumulate(&mut grads[a.0], dy.clone());
                }
                if wants_b {
                    let cols = x.cols();
                    let mut db = vec![T::zero(); cols];
                    for (i, &g) in dy.data().iter().enumerate() {
                        db[i % cols] += g;
                    }
                    accumulate(&mut grads[b.0], Tensor::row(db));
                }
            }
            OpKind::Affine { scale, .. } => {
                if wants_a {
                    accumulate(&mut grads[a.0], dy.map(|g| g * scale));
                }
            }
            OpKind::Sigmoid => {
                if wants_a {
                    accumulate(&mut grads[a.0], elementwise(&|s, g| g * s * (T::one() - s), out));
                }
            }
            OpKind::Tanh => {
                if wants_a {
                    accumulate(&mut grads[a.0], elementwise(&|s, g| g * (T::one() - s * s), out));
                }
            }
            OpKind::Softmax => {
                if wants_a {
                    let inner = out.dot(dy);
                    accumulate(&mut grads[a.0], elementwise(&|s, g| s * (g - inner), out));
                }
            }
            OpKind::Sum => {
                if wants_a {
                    accumulate(&mut grads[a.0], Tensor::full(x.shape(), dy.item()));
                }
            }
            OpKind::L2Norm => {
                if wants_a {
                    let n = out.item();
                    // Subgradient 0 at the origin.
                    let g = if n > T::zero() { dy.item() / n } else { T::zero() };
                    accumulate(&mut grads[a.0], x.map(|v| v * g));
                }
            }
            OpKind::Concat => {
                let (rows, ca, cb) = (x.rows(), x.cols(), y.cols());
                let width = ca + cb;
                if wants_a {
                    let mut da = Vec::with_capacity(rows * ca);
                    for r in 0..rows {
                        da.extend_from_slice(&dy.data()[r * width..r * width + ca]);
                    }
                    accumulate(&mut grads[a.0], Tensor::matrix(rows, ca, da).expect("shape"));
                }
                if wants_b {
                    let mut db = Vec::with_capacity(rows * cb);
                    for r in 0..rows {
                        db.extend_from_slice(&dy.data()[r * width + ca..(r + 1) * width]);
                    }
                    accumulate(&mut grads[b.0], Tensor::matrix(rows, cb, db).expect("shape"));
                }
            }
            OpKind::Transpose => {
                if wants_a {
                    let data = kernels::transpose(dy.data(), dy.rows(), dy.cols());
                    accumulate(
                        &mut grads[a.0],
                        Tensor::matrix(x.rows(), x.cols(), data).expect("shape"),
                    );
                }
            }
        }
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => *slot = Some(g),
    }
}
