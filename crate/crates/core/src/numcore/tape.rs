//! Reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records every operation as a node holding its value and the
//! indices of its inputs. Nodes are appended in evaluation order, so walking
//! the node list backwards is a valid topological order and each node is
//! visited exactly once during [`Tape::backward`].

use super::matrix::{Axis, Matrix, Real};
use super::NumError;
use crate::metrics::CccParts;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Tanh(Var),
    Relu(Var),
    ConcatRows(Var, Var),
    SliceRows { src: Var, start: usize },
    Softmax { src: Var, temperature: T, axis: Axis },
    BroadcastRow { src: Var },
    BroadcastCol { src: Var },
    ReplicateColumn { src: Var, col: usize },
    ShiftRight { src: Var, by: usize },
    Sum(Var),
    CccLoss { pred: Var, grad: Vec<T> },
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
    /// Whether any parameter leaf is upstream of this node.
    tracked: bool,
}

/// Gradients produced by one reverse pass, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Matrix<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Matrix<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Tape<T = f64> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Differentiable leaf (a parameter).
    pub fn leaf(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let value = self.value(a).matmul(self.value(b))?;
        let t = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::MatMul(a, b), t))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let t = self.tracked(a);
        self.push(value, Op::Transpose(a), t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let value = self.value(a).add(self.value(b))?;
        let t = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::Add(a, b), t))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let value = self.value(a).sub(self.value(b))?;
        let t = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::Sub(a, b), t))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let value = self.value(a).mul(self.value(b))?;
        let t = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::Mul(a, b), t))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).scale(s);
        let t = self.tracked(a);
        self.push(value, Op::Scale(a, s), t)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).tanh();
        let t = self.tracked(a);
        self.push(value, Op::Tanh(a), t)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).relu();
        let t = self.tracked(a);
        self.push(value, Op::Relu(a), t)
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let value = self.value(a).concat_rows(self.value(b))?;
        let t = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::ConcatRows(a, b), t))
    }

    pub fn slice_rows(&mut self, src: Var, start: usize, len: usize) -> Result<Var, NumError> {
        let value = self.value(src).slice_rows(start, len)?;
        let t = self.tracked(src);
        Ok(self.push(value, Op::SliceRows { src, start }, t))
    }

    pub fn softmax_temp(&mut self, src: Var, temperature: T, axis: Axis) -> Result<Var, NumError> {
        let value = self.value(src).softmax_temp(temperature, axis)?;
        let t = self.tracked(src);
        Ok(self.push(value, Op::Softmax { src, temperature, axis }, t))
    }

    /// Repeats a `1 × n` row `rows` times.
    pub fn broadcast_row(&mut self, src: Var, rows: usize) -> Result<Var, NumError> {
        let v = self.value(src);
        if v.rows() != 1 {
            return Err(NumError::dimension("broadcast_row", v.shape(), (1, v.cols())));
        }
        let value = Matrix::from_fn(rows, v.cols(), |_, c| v.get(0, c));
        let t = self.tracked(src);
        Ok(self.push(value, Op::BroadcastRow { src }, t))
    }

    /// Repeats an `m × 1` column `cols` times.
    pub fn broadcast_col(&mut self, src: Var, cols: usize) -> Result<Var, NumError> {
        let v = self.value(src);
        if v.cols() != 1 {
            return Err(NumError::dimension("broadcast_col", v.shape(), (v.rows(), 1)));
        }
        let value = Matrix::from_fn(v.rows(), cols, |r, _| v.get(r, 0));
        let t = self.tracked(src);
        Ok(self.push(value, Op::BroadcastCol { src }, t))
    }

    /// Takes column `col` of an `L × K` score matrix and replicates it into a
    /// `rows × L` matrix: `out[i][j] = src[j][col]`.
    pub fn replicate_column(&mut self, src: Var, col: usize, rows: usize) -> Result<Var, NumError> {
        let v = self.value(src);
        if col >= v.cols() {
            return Err(NumError::Parameter(format!("column {col} out of range for {}x{} scores", v.rows(), v.cols())));
        }
        let value = Matrix::from_fn(rows, v.rows(), |_, j| v.get(j, col));
        let t = self.tracked(src);
        Ok(self.push(value, Op::ReplicateColumn { src, col }, t))
    }

    /// Delays every row by `by` columns, filling the vacated leading columns
    /// with zeros. Used for causal convolution taps.
    pub fn shift_right(&mut self, src: Var, by: usize) -> Var {
        let v = self.value(src);
        let (r, c) = v.shape();
        let value = Matrix::from_fn(r, c, |i, j| if j >= by { v.get(i, j - by) } else { T::zero() });
        let t = self.tracked(src);
        self.push(value, Op::ShiftRight { src, by }, t)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let t = self.tracked(a);
        self.push(Matrix::filled(1, 1, s), Op::Sum(a), t)
    }

    /// `1 − CCC(pred, truth)` over the frames where `mask` is true. `pred`
    /// must be a `1 × N` row. Returns the loss node and whether the inputs
    /// were degenerate (both constant), in which case CCC is taken as 0 and
    /// the gradient is zero.
    pub fn ccc_loss(&mut self, pred: Var, truth: &[T], mask: Option<&[bool]>) -> Result<(Var, bool), NumError> {
        let p = self.value(pred);
        if p.rows() != 1 {
            return Err(NumError::dimension("ccc_loss", p.shape(), (1, truth.len())));
        }
        let parts = CccParts::compute(p.data(), truth, mask)?;
        let grad = parts.gradient(p.data(), truth, mask);
        let t = self.tracked(pred);
        let loss = Matrix::filled(1, 1, parts.loss);
        Ok((self.push(loss, Op::CccLoss { pred, grad }, t), parts.degenerate))
    }

    /// Sign pattern of every ReLU input on the tape (`true` where the input is
    /// strictly positive). Two evaluations with identical patterns lie on the
    /// same linear piece of every ReLU.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(src) = node.op {
                out.extend(self.nodes[src.0].value.data().iter().map(|&x| x > T::zero()));
            }
        }
        out
    }

    /// Reverse pass from a scalar (`1 × 1`) output with unit seed.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>, NumError> {
        let shape = self.shape(output);
        if shape != (1, 1) {
            return Err(NumError::dimension("backward", shape, (1, 1)));
        }
        self.backward_with_seed(output, Matrix::ones(1, 1))
    }

    /// Reverse pass seeded with an arbitrary upstream gradient for `output`.
    pub fn backward_with_seed(&self, output: Var, seed: Matrix<T>) -> Result<Gradients<T>, NumError> {
        let shape = self.shape(output);
        if seed.shape() != shape {
            return Err(NumError::dimension("backward seed", seed.shape(), shape));
        }
        let mut grads: Vec<Option<Matrix<T>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed);

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, op: &Op<T>, out: &Matrix<T>, g: &Matrix<T>, grads: &mut [Option<Matrix<T>>]) -> Result<(), NumError> {
        let val = |v: Var| &self.nodes[v.0].value;
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.tracked(*a) {
                    accumulate(grads, *a, g.matmul_transposed(val(*b))?);
                }
                if self.tracked(*b) {
                    accumulate(grads, *b, val(*a).transposed_matmul(g)?);
                }
            }
            Op::Transpose(a) => accumulate(grads, *a, g.transpose()),
            Op::Add(a, b) => {
                if self.tracked(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.tracked(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.tracked(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.tracked(*b) {
                    accumulate(grads, *b, g.scale(-T::one()));
                }
            }
            Op::Mul(a, b) => {
                if self.tracked(*a) {
                    accumulate(grads, *a, g.mul(val(*b))?);
                }
                if self.tracked(*b) {
                    accumulate(grads, *b, g.mul(val(*a))?);
                }
            }
            Op::Scale(a, s) => accumulate(grads, *a, g.scale(*s)),
            Op::Tanh(a) => {
                let d = Matrix::from_fn(g.rows(), g.cols(), |r, c| {
                    let y = out.get(r, c);
                    g.get(r, c) * (T::one() - y * y)
                });
                accumulate(grads, *a, d);
            }
            Op::Relu(a) => {
                let x = val(*a);
                let d = Matrix::from_fn(g.rows(), g.cols(), |r, c| if x.get(r, c) > T::zero() { g.get(r, c) } else { T::zero() });
                accumulate(grads, *a, d);
            }
            Op::ConcatRows(a, b) => {
                let top = val(*a).rows();
                if self.tracked(*a) {
                    accumulate(grads, *a, g.slice_rows(0, top)?);
                }
                if self.tracked(*b) {
                    accumulate(grads, *b, g.slice_rows(top, g.rows() - top)?);
                }
            }
            Op::SliceRows { src, start } => {
                let s = val(*src);
                let mut d = Matrix::zeros(s.rows(), s.cols());
                let w = s.cols();
                d.data_mut()[start * w..(start + g.rows()) * w].copy_from_slice(g.data());
                accumulate(grads, *src, d);
            }
            Op::Softmax { src, temperature, axis } => {
                let d = match axis {
                    Axis::Rows => softmax_backward_rows(out, g, *temperature),
                    Axis::Cols => softmax_backward_rows(&out.transpose(), &g.transpose(), *temperature).transpose(),
                };
                accumulate(grads, *src, d);
            }
            Op::BroadcastRow { src } => {
                let cols = g.cols();
                let d = Matrix::from_fn(1, cols, |_, c| (0..g.rows()).fold(T::zero(), |acc, r| acc + g.get(r, c)));
                accumulate(grads, *src, d);
            }
            Op::BroadcastCol { src } => {
                let d = Matrix::from_fn(g.rows(), 1, |r, _| g.row(r).iter().fold(T::zero(), |acc, &v| acc + v));
                accumulate(grads, *src, d);
            }
            Op::ReplicateColumn { src, col } => {
                let s = val(*src);
                let mut d = Matrix::zeros(s.rows(), s.cols());
                for j in 0..s.rows() {
                    let total = (0..g.rows()).fold(T::zero(), |acc, i| acc + g.get(i, j));
                    d.set(j, *col, total);
                }
                accumulate(grads, *src, d);
            }
            Op::ShiftRight { src, by } => {
                let (r, c) = g.shape();
                let d = Matrix::from_fn(r, c, |i, j| if j + by < c { g.get(i, j + by) } else { T::zero() });
                accumulate(grads, *src, d);
            }
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                accumulate(grads, *a, Matrix::filled(r, c, g.get(0, 0)));
            }
            Op::CccLoss { pred, grad } => {
                // loss = 1 - ccc
                let upstream = g.get(0, 0);
                let d: Vec<T> = grad.iter().map(|&v| -v * upstream).collect();
                accumulate(grads, *pred, Matrix::new(1, d.len(), d)?);
            }
        }
        Ok(())
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Matrix<T>>], var: Var, g: Matrix<T>) {
    match &mut grads[var.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn softmax_backward_rows<T: Real>(y: &Matrix<T>, g: &Matrix<T>, temperature: T) -> Matrix<T> {
    let mut d = Matrix::zeros(y.rows(), y.cols());
    for r in 0..y.rows() {
        let yr = y.row(r);
        let gr = g.row(r);
        let dot = yr.iter().zip(gr).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
        for c in 0..y.cols() {
            d.set(r, c, yr[c] * (gr[c] - dot) / temperature);
        }
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_gradient_rule() {
        let mut tape = Tape::new();
        let a = tape.leaf(m(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = tape.leaf(m(&[&[0.5], &[-1.0]]));
        let c = tape.matmul(a, b).unwrap();
        let s = tape.sum(c);
        let grads = tape.backward(s).unwrap();
        // dA = 1·Bᵀ per row, dB = Aᵀ·1
        assert_eq!(grads.get(a).unwrap().data(), &[0.5, -1.0, 0.5, -1.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[4.0, 6.0]);
    }

    #[test]
    fn concat_gradient_splits_back() {
        let mut tape = Tape::new();
        let a = tape.leaf(Matrix::filled(2, 3, 0.7));
        let b = tape.leaf(Matrix::filled(4, 3, -0.2));
        let c = tape.concat_rows(a, b).unwrap();
        let s = tape.sum(c);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(a).unwrap(), &Matrix::ones(2, 3));
        assert_eq!(grads.get(b).unwrap(), &Matrix::ones(4, 3));
    }

    #[test]
    fn relu_derivative_at_zero_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(m(&[&[0.0, 1.0, -1.0]]));
        let y = tape.relu(x);
        let s = tape.sum(y);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn shared_node_gradient_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(m(&[&[3.0]]));
        let y = tape.mul(x, x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let w = tape.leaf(m(&[&[2.0]]));
        let x = tape.constant(m(&[&[5.0]]));
        let y = tape.matmul(w, x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert!(grads.get(x).is_none());
        assert_eq!(grads.get(w).unwrap().data(), &[5.0]);
    }

    #[test]
    fn backward_requires_scalar_output() {
        let mut tape: Tape = Tape::new();
        let x = tape.leaf(Matrix::zeros(2, 2));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn shift_right_pads_with_zeros() {
        let mut tape = Tape::new();
        let x = tape.constant(m(&[&[1.0, 2.0, 3.0, 4.0]]));
        let y = tape.shift_right(x, 2);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 1.0, 2.0]);
    }

    #[test]
    fn replicate_column_layout() {
        let mut tape = Tape::new();
        let g = tape.constant(m(&[&[0.1, 0.9], &[0.6, 0.4], &[0.3, 0.7]]));
        let r = tape.replicate_column(g, 1, 2).unwrap();
        assert_eq!(tape.value(r), &m(&[&[0.9, 0.4, 0.7], &[0.9, 0.4, 0.7]]));
        assert!(tape.replicate_column(g, 2, 2).is_err());
    }
}
