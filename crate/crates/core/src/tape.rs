//! Reverse-mode automatic differentiation over dense matrices.
//!
//! Operations are recorded on a [`Tape`] in execution order, which is by
//! construction a topological order of the computation graph. [`Tape::backward`]
//! walks the tape in reverse from a scalar output and accumulates gradients
//! into every node; trainable leaves keep theirs for the optimizer.
//!
//! The tape is single-threaded. Run independent tapes on different threads
//! and combine their leaf gradients with an ordered reduction.

use crate::error::{Error, Result};
use crate::matrix::{DenseMatrix, ElemKind};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(NodeId, NodeId),
    Elem(ElemKind, NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    // the mask is applied in the forward pass; masked outputs are exactly 0,
    // which already kills their backward contribution
    RowSoftmax(NodeId),
    RowLogSoftmax(NodeId),
    Transpose(NodeId),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    Reshape(NodeId),
    GatherRows(NodeId, Vec<usize>),
    SumAll(NodeId),
    SumCols(NodeId),
    Sqrt(NodeId),
}

#[derive(Debug)]
struct Node {
    value: DenseMatrix,
    grad: Option<DenseMatrix>,
    op: Op,
    trainable: bool,
}

/// Reverse-mode tape over [`DenseMatrix`] values.
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

    /// Drop all recorded nodes so the tape can record a fresh pass.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    fn push(&mut self, value: DenseMatrix, op: Op, trainable: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            trainable,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Trainable leaf: receives a gradient on [`Tape::backward`].
    pub fn leaf(&mut self, value: DenseMatrix) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable input; gradients still flow through but are discardable.
    pub fn constant(&mut self, value: DenseMatrix) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &DenseMatrix {
        &self.nodes[id.0].value
    }

    /// Gradient accumulated at `id` by the last [`Tape::backward`] call.
    pub fn grad(&self, id: NodeId) -> Option<&DenseMatrix> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.nodes[a.0].value.matmul(&self.nodes[b.0].value)?;
        Ok(self.push(value, Op::Matmul(a, b), false))
    }

    pub fn elementwise(&mut self, a: NodeId, b: NodeId, kind: ElemKind) -> Result<NodeId> {
        let value = self.nodes[a.0].value.elementwise(&self.nodes[b.0].value, kind)?;
        Ok(self.push(value, Op::Elem(kind, a, b), false))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(a, b, ElemKind::Add)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(a, b, ElemKind::Sub)
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(a, b, ElemKind::Hadamard)
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let value = self.nodes[a.0].value.scale(k);
        self.push(value, Op::Scale(a, k), false)
    }

    /// `max(0, x)` elementwise; the subgradient at exactly 0 is taken as 0.
    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.map(|v| v.max(0.0));
        self.push(value, Op::Relu(a), false)
    }

    /// Row-wise softmax, stabilized by subtracting each row's maximum.
    ///
    /// Entries where `mask` is `false` are excluded from the normalization and
    /// come out exactly 0. A row with no unmasked entry is an error.
    pub fn row_softmax(&mut self, a: NodeId, mask: Option<&[bool]>) -> Result<NodeId> {
        let input = &self.nodes[a.0].value;
        if let Some(m) = mask {
            if m.len() != input.rows() * input.cols() {
                return Err(Error::Contract(format!(
                    "row_softmax: mask has {} entries for a {}x{} matrix",
                    m.len(),
                    input.rows(),
                    input.cols()
                )));
            }
        }
        let value = row_softmax_value(input, mask)?;
        Ok(self.push(value, Op::RowSoftmax(a), false))
    }

    /// Row-wise log-softmax (no masking); the numerically safe route to
    /// cross-entropy terms.
    pub fn row_log_softmax(&mut self, a: NodeId) -> NodeId {
        let input = &self.nodes[a.0].value;
        let mut value = input.clone();
        for i in 0..input.rows() {
            let row_max = input.row(i).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let log_sum = input
                .row(i)
                .iter()
                .map(|&v| (v - row_max).exp())
                .sum::<f64>()
                .ln();
            for j in 0..input.cols() {
                value.set(i, j, input.get(i, j) - row_max - log_sum);
            }
        }
        self.push(value, Op::RowLogSoftmax(a), false)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.transpose();
        self.push(value, Op::Transpose(a), false)
    }

    /// Concatenate columns left to right; all parts must share a row count.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols of zero parts".into()));
        }
        let rows = self.nodes[parts[0].0].value.rows();
        let mut cols = 0;
        for &p in parts {
            let v = &self.nodes[p.0].value;
            if v.rows() != rows {
                return Err(Error::dims("concat_cols", (rows, cols), v.shape()));
            }
            cols += v.cols();
        }
        let mut value = DenseMatrix::zeros(rows, cols);
        let mut at = 0;
        for &p in parts {
            let v = &self.nodes[p.0].value;
            for i in 0..rows {
                for j in 0..v.cols() {
                    value.set(i, at + j, v.get(i, j));
                }
            }
            at += v.cols();
        }
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), false))
    }

    /// Concatenate rows top to bottom; all parts must share a column count.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_rows of zero parts".into()));
        }
        let cols = self.nodes[parts[0].0].value.cols();
        let mut rows = 0;
        for &p in parts {
            let v = &self.nodes[p.0].value;
            if v.cols() != cols {
                return Err(Error::dims("concat_rows", (rows, cols), v.shape()));
            }
            rows += v.rows();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(self.nodes[p.0].value.data());
        }
        let value = DenseMatrix::from_flat(rows, cols, data)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), false))
    }

    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        let value = self.nodes[a.0].value.reshaped(rows, cols)?;
        Ok(self.push(value, Op::Reshape(a), false))
    }

    /// Select rows by index (repeats allowed); the backward pass scatter-adds.
    pub fn gather_rows(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId> {
        let input = &self.nodes[a.0].value;
        for &ix in indices {
            if ix >= input.rows() {
                return Err(Error::Contract(format!(
                    "gather_rows: index {ix} out of {} rows",
                    input.rows()
                )));
            }
        }
        let mut value = DenseMatrix::zeros(indices.len(), input.cols());
        for (out_i, &ix) in indices.iter().enumerate() {
            for j in 0..input.cols() {
                value.set(out_i, j, input.get(ix, j));
            }
        }
        Ok(self.push(value, Op::GatherRows(a, indices.to_vec()), false))
    }

    /// Sum of all entries as a 1x1 matrix.
    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let value = DenseMatrix::scalar(self.nodes[a.0].value.sum());
        self.push(value, Op::SumAll(a), false)
    }

    /// Column sums as a 1xC matrix.
    pub fn sum_cols(&mut self, a: NodeId) -> NodeId {
        let input = &self.nodes[a.0].value;
        let mut value = DenseMatrix::zeros(1, input.cols());
        for i in 0..input.rows() {
            for j in 0..input.cols() {
                value.set(0, j, value.get(0, j) + input.get(i, j));
            }
        }
        self.push(value, Op::SumCols(a), false)
    }

    /// Elementwise square root; inputs are expected to be strictly positive
    /// wherever a gradient will flow.
    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.map(f64::sqrt);
        self.push(value, Op::Sqrt(a), false)
    }

    /// Reverse pass from a 1x1 output node.
    ///
    /// All previous gradients are discarded first, so repeated calls over the
    /// same tape produce bitwise-identical results. Every trainable leaf ends
    /// up with a gradient (zeros if disconnected from the output).
    pub fn backward(&mut self, output: NodeId) -> Result<()> {
        let out_shape = self.nodes[output.0].value.shape();
        if out_shape != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a 1x1 output, got {}x{}",
                out_shape.0, out_shape.1
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[output.0].grad = Some(DenseMatrix::ones(1, 1));

        for i in (0..=output.0).rev() {
            let Some(grad) = self.nodes[i].grad.take() else {
                continue;
            };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::Matmul(a, b) => {
                    let ga = grad.matmul(&self.nodes[b.0].value.transpose())?;
                    let gb = self.nodes[a.0].value.transpose().matmul(&grad)?;
                    self.accumulate(a, ga)?;
                    self.accumulate(b, gb)?;
                }
                Op::Elem(kind, a, b) => {
                    let broadcast = self.nodes[b.0].value.rows() == 1 && grad.rows() > 1;
                    let (ga, gb_full) = match kind {
                        ElemKind::Add => (grad.clone(), grad.clone()),
                        ElemKind::Sub => (grad.clone(), grad.scale(-1.0)),
                        ElemKind::Hadamard => {
                            let ga = grad.hadamard(&self.nodes[b.0].value)?;
                            let gb = grad.hadamard(&self.nodes[a.0].value)?;
                            (ga, gb)
                        }
                    };
                    let gb = if broadcast { col_sums(&gb_full) } else { gb_full };
                    self.accumulate(a, ga)?;
                    self.accumulate(b, gb)?;
                }
                Op::Scale(a, k) => {
                    self.accumulate(a, grad.scale(k))?;
                }
                Op::Relu(a) => {
                    let mask = self.nodes[a.0].value.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                    self.accumulate(a, grad.hadamard(&mask)?)?;
                }
                Op::RowSoftmax(a) => {
                    let s = &self.nodes[i].value;
                    let mut ga = DenseMatrix::zeros(s.rows(), s.cols());
                    for r in 0..s.rows() {
                        let dot: f64 =
                            s.row(r).iter().zip(grad.row(r)).map(|(x, g)| x * g).sum();
                        for c in 0..s.cols() {
                            ga.set(r, c, s.get(r, c) * (grad.get(r, c) - dot));
                        }
                    }
                    self.accumulate(a, ga)?;
                }
                Op::RowLogSoftmax(a) => {
                    let l = &self.nodes[i].value;
                    let mut ga = DenseMatrix::zeros(l.rows(), l.cols());
                    for r in 0..l.rows() {
                        let gsum: f64 = grad.row(r).iter().sum();
                        for c in 0..l.cols() {
                            ga.set(r, c, grad.get(r, c) - l.get(r, c).exp() * gsum);
                        }
                    }
                    self.accumulate(a, ga)?;
                }
                Op::Transpose(a) => {
                    self.accumulate(a, grad.transpose())?;
                }
                Op::ConcatCols(parts) => {
                    let mut at = 0;
                    for p in parts {
                        let w = self.nodes[p.0].value.cols();
                        let mut gp = DenseMatrix::zeros(grad.rows(), w);
                        for r in 0..grad.rows() {
                            for c in 0..w {
                                gp.set(r, c, grad.get(r, at + c));
                            }
                        }
                        at += w;
                        self.accumulate(p, gp)?;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut at = 0;
                    for p in parts {
                        let h = self.nodes[p.0].value.rows();
                        let mut gp = DenseMatrix::zeros(h, grad.cols());
                        for r in 0..h {
                            for c in 0..grad.cols() {
                                gp.set(r, c, grad.get(at + r, c));
                            }
                        }
                        at += h;
                        self.accumulate(p, gp)?;
                    }
                }
                Op::Reshape(a) => {
                    let (r, c) = self.nodes[a.0].value.shape();
                    self.accumulate(a, grad.reshaped(r, c)?)?;
                }
                Op::GatherRows(a, indices) => {
                    let (r, c) = self.nodes[a.0].value.shape();
                    let mut ga = DenseMatrix::zeros(r, c);
                    for (out_i, &ix) in indices.iter().enumerate() {
                        for j in 0..c {
                            ga.set(ix, j, ga.get(ix, j) + grad.get(out_i, j));
                        }
                    }
                    self.accumulate(a, ga)?;
                }
                Op::SumAll(a) => {
                    let (r, c) = self.nodes[a.0].value.shape();
                    let g = grad.get(0, 0);
                    self.accumulate(a, DenseMatrix::ones(r, c).scale(g))?;
                }
                Op::SumCols(a) => {
                    let (r, c) = self.nodes[a.0].value.shape();
                    let mut ga = DenseMatrix::zeros(r, c);
                    for row in 0..r {
                        for col in 0..c {
                            ga.set(row, col, grad.get(0, col));
                        }
                    }
                    self.accumulate(a, ga)?;
                }
                Op::Sqrt(a) => {
                    let out = &self.nodes[i].value;
                    let factor = out.map(|v| 0.5 / v);
                    self.accumulate(a, grad.hadamard(&factor)?)?;
                }
            }
            // restore the node's own gradient for inspection
            self.nodes[i].grad = Some(grad);
        }

        // disconnected trainables still owe the optimizer a gradient
        for node in &mut self.nodes {
            if node.trainable && node.grad.is_none() {
                node.grad = Some(DenseMatrix::zeros(node.value.rows(), node.value.cols()));
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, g: DenseMatrix) -> Result<()> {
        let slot = &mut self.nodes[id.0].grad;
        match slot {
            Some(existing) => *existing = existing.add(&g)?,
            None => *slot = Some(g),
        }
        Ok(())
    }
}

fn col_sums(m: &DenseMatrix) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(1, m.cols());
    for i in 0..m.rows() {
        for j in 0..m.cols() {
            out.set(0, j, out.get(0, j) + m.get(i, j));
        }
    }
    out
}

/// Plain-value row softmax shared by the tape op and non-differentiated paths.
pub fn row_softmax_value(input: &DenseMatrix, mask: Option<&[bool]>) -> Result<DenseMatrix> {
    let (rows, cols) = input.shape();
    let mut out = DenseMatrix::zeros(rows, cols);
    for i in 0..rows {
        let keep = |j: usize| mask.map_or(true, |m| m[i * cols + j]);
        let mut row_max = f64::NEG_INFINITY;
        for j in 0..cols {
            if keep(j) {
                row_max = row_max.max(input.get(i, j));
            }
        }
        if row_max == f64::NEG_INFINITY {
            return Err(Error::DegenerateRow { row: i });
        }
        let mut sum = 0.0;
        for j in 0..cols {
            if keep(j) {
                let e = (input.get(i, j) - row_max).exp();
                out.set(i, j, e);
                sum += e;
            }
        }
        for j in 0..cols {
            if keep(j) {
                out.set(i, j, out.get(i, j) / sum);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DenseMatrix {
        DenseMatrix::from_fn(r, c, |_, _| rng.random::<f64>() * 4.0 - 2.0)
    }

    /// Central finite differences of a scalar-valued function of one matrix.
    fn fd_grad(
        f: &dyn Fn(&DenseMatrix) -> f64,
        at: &DenseMatrix,
        h: f64,
    ) -> DenseMatrix {
        let mut g = DenseMatrix::zeros(at.rows(), at.cols());
        for i in 0..at.rows() {
            for j in 0..at.cols() {
                let mut plus = at.clone();
                plus.set(i, j, at.get(i, j) + h);
                let mut minus = at.clone();
                minus.set(i, j, at.get(i, j) - h);
                g.set(i, j, (f(&plus) - f(&minus)) / (2.0 * h));
            }
        }
        g
    }

    fn max_rel_err(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
            .fold(0.0, f64::max)
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a0 = random_matrix(&mut rng, 3, 4);
        let b0 = random_matrix(&mut rng, 4, 2);
        let w = random_matrix(&mut rng, 3, 2);

        let mut tape = Tape::new();
        let a = tape.leaf(a0.clone());
        let b = tape.leaf(b0.clone());
        let wn = tape.constant(w.clone());
        let prod = tape.matmul(a, b).unwrap();
        let weighted = tape.hadamard(prod, wn).unwrap();
        let loss = tape.sum_all(weighted);
        tape.backward(loss).unwrap();

        let f_a = |m: &DenseMatrix| m.matmul(&b0).unwrap().hadamard(&w).unwrap().sum();
        let f_b = |m: &DenseMatrix| a0.matmul(m).unwrap().hadamard(&w).unwrap().sum();
        assert!(max_rel_err(tape.grad(a).unwrap(), &fd_grad(&f_a, &a0, 1e-5)) < 1e-6);
        assert!(max_rel_err(tape.grad(b).unwrap(), &fd_grad(&f_b, &b0, 1e-5)) < 1e-6);
    }

    #[test]
    fn hadamard_gradient_is_other_operand() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a0 = random_matrix(&mut rng, 3, 3);
        let b0 = random_matrix(&mut rng, 3, 3);
        let mut tape = Tape::new();
        let a = tape.leaf(a0);
        let b = tape.leaf(b0.clone());
        let prod = tape.hadamard(a, b).unwrap();
        let loss = tape.sum_all(prod);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &b0);
    }

    #[test]
    fn relu_basics() {
        let mut tape = Tape::new();
        let x = tape.leaf(DenseMatrix::from_rows(&[vec![-1.0, 2.0]]).unwrap());
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 2.0]);
        let y2 = tape.relu(y);
        assert_eq!(tape.value(y2), tape.value(y)); // idempotent
    }

    #[test]
    fn relu_gradient_mask_away_from_kink() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // keep inputs a safe distance from the kink at zero
        let x0 = DenseMatrix::from_fn(4, 4, |_, _| {
            let v: f64 = rng.random::<f64>() * 4.0 - 2.0;
            if v.abs() < 1e-3 {
                v + 0.5
            } else {
                v
            }
        });
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let r = tape.relu(x);
        let loss = tape.sum_all(r);
        tape.backward(loss).unwrap();
        let f = |m: &DenseMatrix| m.map(|v| v.max(0.0)).sum();
        assert!(max_rel_err(tape.grad(x).unwrap(), &fd_grad(&f, &x0, 1e-5)) < 1e-5);
    }

    #[test]
    fn row_softmax_symmetry_and_stability() {
        let mut tape = Tape::new();
        let a = tape.leaf(DenseMatrix::from_rows(&[vec![0.0, 0.0]]).unwrap());
        let s = tape.row_softmax(a, None).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5, 0.5]);

        let b = tape.leaf(DenseMatrix::from_rows(&[vec![1000.0, 0.0]]).unwrap());
        let s2 = tape.row_softmax(b, None).unwrap();
        let v = tape.value(s2);
        assert!(v.all_finite());
        assert!(v.get(0, 0) > 1.0 - 1e-12 && v.get(0, 1) < 1e-12);
    }

    #[test]
    fn row_softmax_rows_sum_to_one_and_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_matrix(&mut rng, 5, 5);
        let shifted = x.add(&DenseMatrix::ones(5, 5).scale(3.7)).unwrap();
        let s = row_softmax_value(&x, None).unwrap();
        let s2 = row_softmax_value(&shifted, None).unwrap();
        for i in 0..5 {
            let sum: f64 = s.row(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        for (a, b) in s.data().iter().zip(s2.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn row_softmax_mask_zeroes_entries_and_rejects_empty_rows() {
        let mut tape = Tape::new();
        let a = tape.leaf(DenseMatrix::from_rows(&[vec![5.0, 1.0, 2.0]]).unwrap());
        let s = tape.row_softmax(a, Some(&[false, true, true])).unwrap();
        let v = tape.value(s);
        assert_eq!(v.get(0, 0), 0.0);
        assert!((v.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-12);

        let b = tape.leaf(DenseMatrix::from_rows(&[vec![1.0, 2.0]]).unwrap());
        match tape.row_softmax(b, Some(&[false, false])) {
            Err(Error::DegenerateRow { row: 0 }) => {}
            other => panic!("expected degenerate row, got {other:?}"),
        }
    }

    #[test]
    fn masked_softmax_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x0 = random_matrix(&mut rng, 4, 4);
        let w = random_matrix(&mut rng, 4, 4);
        let mask: Vec<bool> = (0..16).map(|k| k % 4 != k / 4).collect(); // off-diagonal
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let wn = tape.constant(w.clone());
        let s = tape.row_softmax(x, Some(&mask)).unwrap();
        let weighted = tape.hadamard(s, wn).unwrap();
        let loss = tape.sum_all(weighted);
        tape.backward(loss).unwrap();
        let f = |m: &DenseMatrix| {
            row_softmax_value(m, Some(&mask))
                .unwrap()
                .hadamard(&w)
                .unwrap()
                .sum()
        };
        assert!(max_rel_err(tape.grad(x).unwrap(), &fd_grad(&f, &x0, 1e-5)) < 1e-5);
    }

    #[test]
    fn concat_cols_shapes_and_gradient_split() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a0 = random_matrix(&mut rng, 1, 3);
        let b0 = random_matrix(&mut rng, 1, 3);
        let w = random_matrix(&mut rng, 1, 6);

        let mut tape = Tape::new();
        let a = tape.leaf(a0.clone());
        let b = tape.leaf(b0.clone());
        let single = tape.concat_cols(&[a]).unwrap();
        assert_eq!(tape.value(single), &a0);
        let cat = tape.concat_cols(&[a, b]).unwrap();
        assert_eq!(tape.value(cat).shape(), (1, 6));
        let wn = tape.constant(w.clone());
        let weighted = tape.hadamard(cat, wn).unwrap();
        let loss = tape.sum_all(weighted);
        tape.backward(loss).unwrap();

        let f_a = |m: &DenseMatrix| {
            let mut joined = m.data().to_vec();
            joined.extend_from_slice(b0.data());
            DenseMatrix::from_flat(1, 6, joined)
                .unwrap()
                .hadamard(&w)
                .unwrap()
                .sum()
        };
        assert!(max_rel_err(tape.grad(a).unwrap(), &fd_grad(&f_a, &a0, 1e-5)) < 1e-6);

        let tall = tape.leaf(DenseMatrix::zeros(2, 2));
        assert!(tape.concat_cols(&[a, tall]).is_err());
    }

    #[test]
    fn backward_contract_and_simple_gradients() {
        let mut tape = Tape::new();
        let m0 = DenseMatrix::from_fn(2, 3, |i, j| (i + j) as f64 - 1.0);
        let m = tape.leaf(m0.clone());
        let not_scalar = tape.scale(m, 2.0);
        assert!(tape.backward(not_scalar).is_err());

        // d(sum(M))/dM = ones
        let s = tape.sum_all(m);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(m).unwrap(), &DenseMatrix::ones(2, 3));

        // d(||M||_F^2)/dM = 2M
        let sq = tape.hadamard(m, m).unwrap();
        let f = tape.sum_all(sq);
        tape.backward(f).unwrap();
        assert_eq!(tape.grad(m).unwrap(), &m0.scale(2.0));
    }

    #[test]
    fn backward_is_bitwise_repeatable() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x0 = random_matrix(&mut rng, 4, 3);
        let w0 = random_matrix(&mut rng, 3, 3);
        let mut tape = Tape::new();
        let x = tape.leaf(x0);
        let w = tape.leaf(w0);
        let h = tape.matmul(x, w).unwrap();
        let r = tape.relu(h);
        let s = tape.row_softmax(r, None).unwrap();
        let loss = tape.sum_all(s);
        tape.backward(loss).unwrap();
        let g1 = tape.grad(w).unwrap().clone();
        tape.backward(loss).unwrap();
        let g2 = tape.grad(w).unwrap().clone();
        assert_eq!(g1.data(), g2.data());
    }

    #[test]
    fn gather_rows_scatter_adds_duplicates() {
        let mut tape = Tape::new();
        let m = tape.leaf(DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let g = tape.gather_rows(m, &[0, 0, 1]).unwrap();
        assert_eq!(tape.value(g).shape(), (3, 2));
        let loss = tape.sum_all(g);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(m).unwrap().data(), &[2.0, 2.0, 1.0, 1.0]);
    }

    #[test]
    fn log_softmax_and_sqrt_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x0 = random_matrix(&mut rng, 3, 4);
        let w = random_matrix(&mut rng, 3, 4);
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let wn = tape.constant(w.clone());
        let l = tape.row_log_softmax(x);
        let weighted = tape.hadamard(l, wn).unwrap();
        let loss = tape.sum_all(weighted);
        tape.backward(loss).unwrap();
        let f = |m: &DenseMatrix| {
            let mut acc = 0.0;
            for i in 0..m.rows() {
                let mx = m.row(i).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let ls = m.row(i).iter().map(|&v| (v - mx).exp()).sum::<f64>().ln();
                for j in 0..m.cols() {
                    acc += (m.get(i, j) - mx - ls) * w.get(i, j);
                }
            }
            acc
        };
        assert!(max_rel_err(tape.grad(x).unwrap(), &fd_grad(&f, &x0, 1e-5)) < 1e-5);

        let p0 = DenseMatrix::from_fn(2, 3, |i, j| 0.3 + (i * 3 + j) as f64 * 0.2);
        let mut tape2 = Tape::new();
        let p = tape2.leaf(p0.clone());
        let sq = tape2.sqrt(p);
        let loss2 = tape2.sum_all(sq);
        tape2.backward(loss2).unwrap();
        let f2 = |m: &DenseMatrix| m.map(f64::sqrt).sum();
        assert!(max_rel_err(tape2.grad(p).unwrap(), &fd_grad(&f2, &p0, 1e-5)) < 1e-5);
    }

    #[test]
    fn broadcast_add_gradient_collapses_to_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a0 = random_matrix(&mut rng, 4, 3);
        let bias0 = random_matrix(&mut rng, 1, 3);
        let w = random_matrix(&mut rng, 4, 3);
        let mut tape = Tape::new();
        let a = tape.leaf(a0.clone());
        let bias = tape.leaf(bias0.clone());
        let wn = tape.constant(w.clone());
        let sum = tape.add(a, bias).unwrap();
        let weighted = tape.hadamard(sum, wn).unwrap();
        let loss = tape.sum_all(weighted);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(bias).unwrap().shape(), (1, 3));
        let f = |m: &DenseMatrix| a0.add(m).unwrap().hadamard(&w).unwrap().sum();
        assert!(max_rel_err(tape.grad(bias).unwrap(), &fd_grad(&f, &bias0, 1e-5)) < 1e-6);
    }
}
