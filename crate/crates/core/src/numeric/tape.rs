//! Define-by-run reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every primitive as it is evaluated. [`Tape::backward`]
//! walks the records in reverse order once, accumulating adjoints into the
//! operands that need them. The tape is rebuilt for every forward pass.

use super::matrix::{sigmoid, softmax_in_place, Activation, DenseMatrix};
use super::optim::{ParamId, ParameterSet};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulTransposeB(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Act(Var, Activation),
    GatherRows(Var, Vec<usize>),
    GroupMean(Var, Vec<Vec<usize>>),
    SegmentSum(Var, Vec<usize>),
    SegmentSoftmax(Var, Vec<usize>),
    SoftmaxRows(Var),
    RowSum(Var),
    Sum(Var),
    Column(Var, usize),
    HConcat(Vec<Var>),
    Reshape(Var),
    SoftmaxCrossEntropy(Var, Vec<usize>),
    SigmoidCrossEntropy(Var, Vec<f64>),
}

struct Node {
    value: DenseMatrix,
    op: Op,
    needs_grad: bool,
    param: Option<ParamId>,
}

/// Recording of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<DenseMatrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&DenseMatrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn check_segments(op: &'static str, rows: usize, lens: &[usize]) -> Result<()> {
    let total: usize = lens.iter().sum();
    if total != rows {
        return Err(Error::dim(op, (rows, 1), (total, lens.len())));
    }
    Ok(())
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

    fn push(&mut self, value: DenseMatrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &DenseMatrix {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.get(0, 0)
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: DenseMatrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A free variable that receives a gradient.
    pub fn leaf(&mut self, value: DenseMatrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf bound to a parameter; its gradient flows back via [`ParameterSet::accumulate`].
    pub fn param(&mut self, set: &ParameterSet, id: ParamId) -> Var {
        let v = self.push(set.value(id).clone(), Op::Leaf, true);
        self.nodes[v.0].param = Some(id);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`.
    pub fn matmul_transpose_b(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_transpose_b(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMulTransposeB(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Sub(a, b), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul(a, b), ng))
    }

    /// Adds a 1×c row to every row of an r×c matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(Error::dim("add_row", av.shape(), rv.shape()));
        }
        let mut value = av.clone();
        for r in 0..value.rows() {
            for (x, b) in value.row_mut(r).iter_mut().zip(rv.as_slice()) {
                *x += b;
            }
        }
        let ng = self.needs(a) || self.needs(row);
        Ok(self.push(value, Op::AddRow(a, row), ng))
    }

    /// Scales row i of an r×c matrix by element i of an r×1 column.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (av, cv) = (self.value(a), self.value(col));
        if cv.cols() != 1 || cv.rows() != av.rows() {
            return Err(Error::dim("mul_col", av.shape(), cv.shape()));
        }
        let mut value = av.clone();
        for r in 0..value.rows() {
            let s = cv.get(r, 0);
            value.row_mut(r).iter_mut().for_each(|x| *x *= s);
        }
        let ng = self.needs(a) || self.needs(col);
        Ok(self.push(value, Op::MulCol(a, col), ng))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|x| x * factor);
        let ng = self.needs(a);
        self.push(value, Op::Scale(a, factor), ng)
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Var {
        let value = self.value(a).map(|x| kind.apply(x));
        let ng = self.needs(a);
        self.push(value, Op::Act(a, kind), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Tanh)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Relu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Sigmoid)
    }

    /// Row lookup: output row i is input row `indices[i]`.
    pub fn gather_rows(&mut self, a: Var, indices: Vec<usize>) -> Result<Var> {
        let av = self.value(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= av.rows()) {
            return Err(Error::dim("gather_rows", av.shape(), (bad, 0)));
        }
        let value = av.select_rows(&indices);
        let ng = self.needs(a);
        Ok(self.push(value, Op::GatherRows(a, indices), ng))
    }

    /// Output row i is the mean of the input rows listed in `groups[i]`
    /// (a zero row when the group is empty).
    pub fn group_mean(&mut self, a: Var, groups: Vec<Vec<usize>>) -> Result<Var> {
        let av = self.value(a);
        let mut value = DenseMatrix::zeros(groups.len(), av.cols());
        for (g, members) in groups.iter().enumerate() {
            if members.is_empty() {
                continue;
            }
            let out = value.row_mut(g);
            for &i in members {
                if i >= av.rows() {
                    return Err(Error::dim("group_mean", av.shape(), (i, 0)));
                }
                for (o, x) in out.iter_mut().zip(av.row(i)) {
                    *o += x;
                }
            }
            let n = members.len() as f64;
            out.iter_mut().for_each(|o| *o /= n);
        }
        let ng = self.needs(a);
        Ok(self.push(value, Op::GroupMean(a, groups), ng))
    }

    /// Sums consecutive runs of rows; run lengths in `lens`.
    pub fn segment_sum(&mut self, a: Var, lens: Vec<usize>) -> Result<Var> {
        let av = self.value(a);
        check_segments("segment_sum", av.rows(), &lens)?;
        let mut value = DenseMatrix::zeros(lens.len(), av.cols());
        let mut r = 0;
        for (s, &len) in lens.iter().enumerate() {
            let out = value.row_mut(s);
            for i in r..r + len {
                for (o, x) in out.iter_mut().zip(av.row(i)) {
                    *o += x;
                }
            }
            r += len;
        }
        let ng = self.needs(a);
        Ok(self.push(value, Op::SegmentSum(a, lens), ng))
    }

    /// Softmax within consecutive runs of an r×1 column.
    pub fn segment_softmax(&mut self, a: Var, lens: Vec<usize>) -> Result<Var> {
        let av = self.value(a);
        if av.cols() != 1 {
            return Err(Error::dim("segment_softmax", av.shape(), (av.rows(), 1)));
        }
        check_segments("segment_softmax", av.rows(), &lens)?;
        let mut value = av.clone();
        let mut r = 0;
        for &len in &lens {
            if len > 0 {
                softmax_in_place(&mut value.as_mut_slice()[r..r + len]);
            }
            r += len;
        }
        let ng = self.needs(a);
        Ok(self.push(value, Op::SegmentSoftmax(a, lens), ng))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for r in 0..value.rows() {
            softmax_in_place(value.row_mut(r));
        }
        let ng = self.needs(a);
        self.push(value, Op::SoftmaxRows(a), ng)
    }

    /// r×c → r×1 row sums.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let sums: Vec<f64> = av.row_iter().map(|r| r.iter().sum()).collect();
        let value = DenseMatrix::column_vector(&sums);
        let ng = self.needs(a);
        self.push(value, Op::RowSum(a), ng)
    }

    /// Sum of all entries as a 1×1 node.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = DenseMatrix::scalar(self.value(a).as_slice().iter().sum());
        let ng = self.needs(a);
        self.push(value, Op::Sum(a), ng)
    }

    pub fn column(&mut self, a: Var, j: usize) -> Result<Var> {
        let av = self.value(a);
        if j >= av.cols() {
            return Err(Error::dim("column", av.shape(), (0, j)));
        }
        let col: Vec<f64> = (0..av.rows()).map(|r| av.get(r, j)).collect();
        let ng = self.needs(a);
        Ok(self.push(DenseMatrix::column_vector(&col), Op::Column(a, j), ng))
    }

    /// Places matrices with equal row counts side by side.
    pub fn hconcat(&mut self, parts: Vec<Var>) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Argument("hconcat of nothing".into()))?;
        let rows = self.value(*first).rows();
        let mut cols = 0;
        for &p in &parts {
            let v = self.value(p);
            if v.rows() != rows {
                return Err(Error::dim("hconcat", (rows, cols), v.shape()));
            }
            cols += v.cols();
        }
        let mut value = DenseMatrix::zeros(rows, cols);
        for r in 0..rows {
            let out = value.row_mut(r);
            let mut c = 0;
            for &p in &parts {
                let src = self.nodes[p.0].value.row(r);
                out[c..c + src.len()].copy_from_slice(src);
                c += src.len();
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(value, Op::HConcat(parts), ng))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let av = self.value(a);
        if av.len() != rows * cols {
            return Err(Error::dim("reshape", av.shape(), (rows, cols)));
        }
        let value = DenseMatrix::from_vec(rows, cols, av.as_slice().to_vec())?;
        let ng = self.needs(a);
        Ok(self.push(value, Op::Reshape(a), ng))
    }

    /// Mean over rows of `-log softmax(row)[target]`, max-shifted.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: Vec<usize>) -> Result<Var> {
        let lv = self.value(logits);
        if targets.len() != lv.rows() || lv.rows() == 0 {
            return Err(Error::dim("softmax_cross_entropy", lv.shape(), (targets.len(), 1)));
        }
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= lv.cols() {
                return Err(Error::dim("softmax_cross_entropy", lv.shape(), (r, t)));
            }
            let row = lv.row(r);
            total += super::matrix::log_sum_exp(row) - row[t];
        }
        let value = DenseMatrix::scalar(total / targets.len() as f64);
        let ng = self.needs(logits);
        Ok(self.push(value, Op::SoftmaxCrossEntropy(logits, targets), ng))
    }

    /// Mean binary cross-entropy of an r×1 logit column, computed from logits.
    pub fn sigmoid_cross_entropy(&mut self, logits: Var, labels: Vec<f64>) -> Result<Var> {
        let lv = self.value(logits);
        if lv.cols() != 1 || labels.len() != lv.rows() || lv.rows() == 0 {
            return Err(Error::dim("sigmoid_cross_entropy", lv.shape(), (labels.len(), 1)));
        }
        let total: f64 = lv
            .as_slice()
            .iter()
            .zip(&labels)
            .map(|(&z, &y)| logistic_loss(z, y))
            .sum();
        let value = DenseMatrix::scalar(total / labels.len() as f64);
        let ng = self.needs(logits);
        Ok(self.push(value, Op::SigmoidCrossEntropy(logits, labels), ng))
    }

    /// Reverse sweep from a 1×1 node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::dim("backward", lv.shape(), (1, 1)));
        }
        let mut grads: Vec<Option<DenseMatrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(DenseMatrix::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.needs_grad {
                self.propagate(node, &g, &mut grads)?;
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &DenseMatrix, grads: &mut [Option<DenseMatrix>]) -> Result<()> {
        let mut send = |v: Var, d: DenseMatrix| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&d),
                slot @ None => *slot = Some(d),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    send(*a, g.matmul_transpose_b(bv)?);
                }
                if self.needs(*b) {
                    send(*b, av.transpose_matmul(g)?);
                }
            }
            Op::MatMulTransposeB(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    send(*a, g.matmul(bv)?);
                }
                if self.needs(*b) {
                    send(*b, g.transpose_matmul(av)?);
                }
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    send(*a, g.zip_map(bv, |x, y| x * y)?);
                }
                if self.needs(*b) {
                    send(*b, g.zip_map(av, |x, y| x * y)?);
                }
            }
            Op::AddRow(a, row) => {
                send(*a, g.clone());
                if self.needs(*row) {
                    let mut d = DenseMatrix::zeros(1, g.cols());
                    for r in g.row_iter() {
                        for (o, x) in d.as_mut_slice().iter_mut().zip(r) {
                            *o += x;
                        }
                    }
                    send(*row, d);
                }
            }
            Op::MulCol(a, col) => {
                let (av, cv) = (self.value(*a), self.value(*col));
                if self.needs(*a) {
                    let mut d = g.clone();
                    for r in 0..d.rows() {
                        let s = cv.get(r, 0);
                        d.row_mut(r).iter_mut().for_each(|x| *x *= s);
                    }
                    send(*a, d);
                }
                if self.needs(*col) {
                    let d: Vec<f64> = (0..g.rows()).map(|r| super::matrix::dot(g.row(r), av.row(r))).collect();
                    send(*col, DenseMatrix::column_vector(&d));
                }
            }
            Op::Scale(a, f) => send(*a, g.map(|x| x * f)),
            Op::Act(a, kind) => {
                let d = g.zip_map(&node.value, |gx, y| gx * kind.derivative_from_output(y))?;
                send(*a, d);
            }
            Op::GatherRows(a, idx) => {
                let av = self.value(*a);
                let mut d = DenseMatrix::zeros(av.rows(), av.cols());
                for (r, &i) in idx.iter().enumerate() {
                    for (o, x) in d.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
                send(*a, d);
            }
            Op::GroupMean(a, groups) => {
                let av = self.value(*a);
                let mut d = DenseMatrix::zeros(av.rows(), av.cols());
                for (gi, members) in groups.iter().enumerate() {
                    if members.is_empty() {
                        continue;
                    }
                    let w = 1.0 / members.len() as f64;
                    for &i in members {
                        for (o, x) in d.row_mut(i).iter_mut().zip(g.row(gi)) {
                            *o += w * x;
                        }
                    }
                }
                send(*a, d);
            }
            Op::SegmentSum(a, lens) => {
                let av = self.value(*a);
                let mut d = DenseMatrix::zeros(av.rows(), av.cols());
                let mut r = 0;
                for (s, &len) in lens.iter().enumerate() {
                    for i in r..r + len {
                        d.row_mut(i).copy_from_slice(g.row(s));
                    }
                    r += len;
                }
                send(*a, d);
            }
            Op::SegmentSoftmax(a, lens) => {
                let y = node.value.as_slice();
                let gs = g.as_slice();
                let mut d = vec![0.0; y.len()];
                let mut r = 0;
                for &len in lens {
                    let inner: f64 = (r..r + len).map(|i| gs[i] * y[i]).sum();
                    for i in r..r + len {
                        d[i] = y[i] * (gs[i] - inner);
                    }
                    r += len;
                }
                send(*a, DenseMatrix::column_vector(&d));
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut d = DenseMatrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let inner = super::matrix::dot(yr, gr);
                    for (c, o) in d.row_mut(r).iter_mut().enumerate() {
                        *o = yr[c] * (gr[c] - inner);
                    }
                }
                send(*a, d);
            }
            Op::RowSum(a) => {
                let av = self.value(*a);
                let mut d = DenseMatrix::zeros(av.rows(), av.cols());
                for r in 0..av.rows() {
                    let gr = g.get(r, 0);
                    d.row_mut(r).iter_mut().for_each(|x| *x = gr);
                }
                send(*a, d);
            }
            Op::Sum(a) => {
                let av = self.value(*a);
                send(*a, DenseMatrix::filled(av.rows(), av.cols(), g.get(0, 0)));
            }
            Op::Column(a, j) => {
                let av = self.value(*a);
                let mut d = DenseMatrix::zeros(av.rows(), av.cols());
                for r in 0..av.rows() {
                    d.set(r, *j, g.get(r, 0));
                }
                send(*a, d);
            }
            Op::HConcat(parts) => {
                let mut c = 0;
                for &p in parts {
                    let pv = self.value(p);
                    if self.needs(p) {
                        let mut d = DenseMatrix::zeros(pv.rows(), pv.cols());
                        for r in 0..pv.rows() {
                            d.row_mut(r).copy_from_slice(&g.row(r)[c..c + pv.cols()]);
                        }
                        send(p, d);
                    }
                    c += pv.cols();
                }
            }
            Op::Reshape(a) => {
                let (r, c) = self.value(*a).shape();
                send(*a, DenseMatrix::from_vec(r, c, g.as_slice().to_vec())?);
            }
            Op::SoftmaxCrossEntropy(logits, targets) => {
                let lv = self.value(*logits);
                let scale = g.get(0, 0) / targets.len() as f64;
                let mut d = lv.clone();
                for (r, &t) in targets.iter().enumerate() {
                    let row = d.row_mut(r);
                    softmax_in_place(row);
                    row[t] -= 1.0;
                    row.iter_mut().for_each(|x| *x *= scale);
                }
                send(*logits, d);
            }
            Op::SigmoidCrossEntropy(logits, labels) => {
                let lv = self.value(*logits);
                let scale = g.get(0, 0) / labels.len() as f64;
                let d: Vec<f64> = lv
                    .as_slice()
                    .iter()
                    .zip(labels)
                    .map(|(&z, &y)| (sigmoid(z) - y) * scale)
                    .collect();
                send(*logits, DenseMatrix::column_vector(&d));
            }
        }
        Ok(())
    }

    /// Parameter bindings on this tape, in recording order.
    pub fn param_bindings(&self) -> impl Iterator<Item = (Var, ParamId)> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (Var(i), p)))
    }
}

/// `-[y log σ(z) + (1-y) log(1-σ(z))]` evaluated without forming σ(z).
#[inline]
pub fn logistic_loss(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

impl ParameterSet {
    /// Adds every parameter-bound adjoint on `tape` into the matching gradient.
    pub fn accumulate(&mut self, tape: &Tape, grads: &Gradients) -> Result<()> {
        for (var, id) in tape.param_bindings() {
            if let Some(g) = grads.get(var) {
                self.get_mut(id).accumulate(g)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central differences on a scalar function of one matrix.
    fn numeric_grad(x: &DenseMatrix, f: &dyn Fn(&DenseMatrix) -> f64) -> DenseMatrix {
        let h = 1e-6;
        let mut out = DenseMatrix::zeros(x.rows(), x.cols());
        for i in 0..x.len() {
            let mut p = x.clone();
            p.as_mut_slice()[i] += h;
            let mut m = x.clone();
            m.as_mut_slice()[i] -= h;
            out.as_mut_slice()[i] = (f(&p) - f(&m)) / (2.0 * h);
        }
        out
    }

    fn check(x: DenseMatrix, build: impl Fn(&mut Tape, Var) -> Var) {
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone());
        let loss = build(&mut tape, v);
        let grads = tape.backward(loss).unwrap();
        let analytic = grads.get(v).unwrap().clone();
        let numeric = numeric_grad(&x, &|p| {
            let mut t = Tape::new();
            let v = t.leaf(p.clone());
            let l = build(&mut t, v);
            t.scalar(l)
        });
        for (a, n) in analytic.as_slice().iter().zip(numeric.as_slice()) {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-4);
            assert!(rel < 1e-5, "analytic {a} numeric {n}");
        }
    }

    fn rand_mat(r: usize, c: usize, seed: u64) -> DenseMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DenseMatrix::glorot(r, c, &mut rng).map(|x| x * 2.0)
    }

    #[test]
    fn grad_matmul_both_sides() {
        let b = rand_mat(4, 3, 1);
        check(rand_mat(2, 4, 2), |t, v| {
            let bb = t.constant(b.clone());
            let p = t.matmul(v, bb).unwrap();
            let q = t.tanh(p);
            t.sum(q)
        });
        let a = rand_mat(2, 4, 3);
        check(rand_mat(4, 3, 4), |t, v| {
            let aa = t.constant(a.clone());
            let p = t.matmul(aa, v).unwrap();
            let q = t.sigmoid(p);
            t.sum(q)
        });
    }

    #[test]
    fn grad_matmul_transpose_b() {
        let b = rand_mat(5, 3, 5);
        check(rand_mat(2, 3, 6), |t, v| {
            let bb = t.constant(b.clone());
            let p = t.matmul_transpose_b(v, bb).unwrap();
            let q = t.tanh(p);
            t.sum(q)
        });
        let a = rand_mat(2, 3, 7);
        check(rand_mat(5, 3, 8), |t, v| {
            let aa = t.constant(a.clone());
            let p = t.matmul_transpose_b(aa, v).unwrap();
            let q = t.tanh(p);
            t.sum(q)
        });
    }

    #[test]
    fn grad_elementwise_and_broadcast() {
        let other = rand_mat(3, 4, 9);
        let row = rand_mat(1, 4, 10);
        let col = rand_mat(3, 1, 11);
        check(rand_mat(3, 4, 12), |t, v| {
            let o = t.constant(other.clone());
            let m = t.mul(v, o).unwrap();
            let s = t.sub(m, v).unwrap();
            let a = t.add(s, v).unwrap();
            let r = t.constant(row.clone());
            let b = t.add_row(a, r).unwrap();
            let c = t.constant(col.clone());
            let d = t.mul_col(b, c).unwrap();
            let e = t.scale(d, -1.5);
            let f = t.tanh(e);
            t.sum(f)
        });
        let base = rand_mat(3, 4, 13);
        check(rand_mat(1, 4, 14), |t, v| {
            let b = t.constant(base.clone());
            let a = t.add_row(b, v).unwrap();
            let q = t.tanh(a);
            t.sum(q)
        });
        check(rand_mat(3, 1, 15), |t, v| {
            let b = t.constant(base.clone());
            let a = t.mul_col(b, v).unwrap();
            let q = t.tanh(a);
            t.sum(q)
        });
    }

    #[test]
    fn grad_relu_away_from_kink() {
        let x = rand_mat(3, 3, 16).map(|v| if v.abs() < 0.05 { v + 0.2 } else { v });
        check(x, |t, v| {
            let r = t.relu(v);
            let s = t.mul(r, r).unwrap();
            t.sum(s)
        });
    }

    #[test]
    fn grad_gather_group_segment() {
        check(rand_mat(5, 3, 17), |t, v| {
            let g = t.gather_rows(v, vec![4, 0, 0, 2]).unwrap();
            let m = t.group_mean(g, vec![vec![0, 1], vec![], vec![2, 3, 1]]).unwrap();
            let q = t.tanh(m);
            let s = t.segment_sum(q, vec![1, 2]).unwrap();
            let w = t.tanh(s);
            t.sum(w)
        });
    }

    #[test]
    fn grad_softmaxes() {
        let weights = rand_mat(5, 1, 18);
        check(rand_mat(5, 1, 19), |t, v| {
            let s = t.segment_softmax(v, vec![2, 3]).unwrap();
            let w = t.constant(weights.clone());
            let p = t.mul(s, w).unwrap();
            t.sum(p)
        });
        let weights = rand_mat(2, 3, 20);
        check(rand_mat(2, 3, 21), |t, v| {
            let s = t.softmax_rows(v);
            let w = t.constant(weights.clone());
            let p = t.mul(s, w).unwrap();
            t.sum(p)
        });
    }

    #[test]
    fn grad_structural_ops() {
        let other = rand_mat(3, 2, 22);
        check(rand_mat(3, 2, 23), |t, v| {
            let o = t.constant(other.clone());
            let h = t.hconcat(vec![v, o, v]).unwrap();
            let c = t.column(h, 4).unwrap();
            let c2 = t.column(h, 1).unwrap();
            let m = t.mul(c, c2).unwrap();
            let r = t.reshape(h, 2, 9).unwrap();
            let rs = t.row_sum(r);
            let q = t.tanh(rs);
            let a = t.sum(q);
            let b = t.sum(m);
            let z = t.add(a, b).unwrap();
            t.tanh(z)
        });
    }

    #[test]
    fn grad_losses() {
        check(rand_mat(3, 4, 24), |t, v| {
            t.softmax_cross_entropy(v, vec![0, 3, 1]).unwrap()
        });
        check(rand_mat(4, 1, 25), |t, v| {
            t.sigmoid_cross_entropy(v, vec![1.0, 0.0, 0.0, 1.0]).unwrap()
        });
    }

    #[test]
    fn shared_leaf_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(DenseMatrix::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let z = tape.add(y, x).unwrap();
        let grads = tape.backward(z).unwrap();
        assert_abs_diff_eq!(grads.get(x).unwrap().get(0, 0), 7.0, epsilon = 1e-15);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(DenseMatrix::scalar(2.0));
        let x = tape.leaf(DenseMatrix::scalar(5.0));
        let y = tape.mul(c, x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().get(0, 0), 2.0);
    }

    #[test]
    fn parameter_gradients_accumulate_into_set() {
        let mut set = ParameterSet::new();
        let w = set.add("w", DenseMatrix::scalar(2.0));
        for _ in 0..2 {
            let mut tape = Tape::new();
            let v = tape.param(&set, w);
            let l = tape.scale(v, 3.0);
            let grads = tape.backward(l).unwrap();
            set.accumulate(&tape, &grads).unwrap();
        }
        assert_eq!(set.get(w).gradient.get(0, 0), 6.0);
    }

    #[test]
    fn losses_match_closed_forms() {
        let mut tape = Tape::new();
        let z = tape.constant(DenseMatrix::column_vector(&[0.0, 0.0]));
        let l = tape.sigmoid_cross_entropy(z, vec![1.0, 0.0]).unwrap();
        assert_abs_diff_eq!(tape.scalar(l), 2f64.ln(), epsilon = 1e-15);
        let z = tape.constant(DenseMatrix::row_vector(&[1.0, 0.0]));
        let l = tape.softmax_cross_entropy(z, vec![0]).unwrap();
        let p = 1f64.exp() / (1f64.exp() + 1.0);
        assert_abs_diff_eq!(tape.scalar(l), -p.ln(), epsilon = 1e-15);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(DenseMatrix::zeros(2, 2));
        assert!(tape.backward(x).is_err());
    }
}
