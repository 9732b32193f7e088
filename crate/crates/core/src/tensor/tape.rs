use crate::graph::Csr;

use super::{gemm, Matrix, Operand, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How [`Tape::sparse_apply`] combines neighbor rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregation {
    Sum,
    Mean,
}

const NO_ARGMAX: usize = usize::MAX;

enum Op<'g> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f32),
    Relu(Var),
    ConcatCols(Vec<Var>),
    SparseApply {
        input: Var,
        neighbors: &'g Csr,
        mode: Aggregation,
    },
    /// Shared by neighbor max and segment max: output entry `i` takes its
    /// value from input entry `source[i]`.
    Gather {
        input: Var,
        source: Vec<usize>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        dlogits: Matrix,
    },
}

struct Node<'g> {
    value: Matrix,
    op: Op<'g>,
    requires_grad: bool,
}

/// Records primitive operations in execution order so that gradients can be
/// propagated back through them. A tape lives for one forward pass; graph
/// structure is borrowed for the tape's lifetime.
#[derive(Default)]
pub struct Tape<'g> {
    nodes: Vec<Node<'g>>,
}

/// Gradients indexed by [`Var`]; `None` where nothing flowed.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Subnormal gradients carry no useful signal but make every later
/// multiply they touch dramatically slower.
fn flush_subnormals(m: &mut Matrix) {
    for x in m.as_mut_slice() {
        if x.is_subnormal() {
            *x = 0.0;
        }
    }
}

fn shape_err(op: &'static str, left: &Matrix, right: &Matrix) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: left.shape(),
        right: right.shape(),
    }
}

fn check_neighbors(op: &'static str, neighbors: &Csr, rows: usize) -> Result<(), TensorError> {
    if neighbors.rows() != rows {
        return Err(TensorError::ShapeMismatch {
            op,
            left: (neighbors.rows(), neighbors.rows()),
            right: (rows, 0),
        });
    }
    match neighbors.indices().iter().find(|&&u| u >= rows) {
        Some(&index) => Err(TensorError::IndexOutOfRange {
            op,
            index,
            bound: rows,
        }),
        None => Ok(()),
    }
}

impl<'g> Tape<'g> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Branch taken at every ReLU entry (input > 0) and every max selection,
    /// in recording order. Two passes with equal patterns differ only inside
    /// smooth pieces, which is what finite-difference checks need.
    pub fn branch_pattern(&self) -> Vec<usize> {
        let mut pattern = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(input) => pattern.extend(
                    self.value(*input)
                        .as_slice()
                        .iter()
                        .map(|&x| usize::from(x > 0.0)),
                ),
                Op::Gather { source, .. } => pattern.extend_from_slice(source),
                _ => {}
            }
        }
        pattern
    }

    /// Trainable input; gradients are reported for it.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.leaf(value, true)
    }

    /// Input that needs no gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Matrix, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(
        &mut self,
        name: &'static str,
        value: Matrix,
        op: Op<'g>,
        inputs: &[Var],
    ) -> Result<Var, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite(name));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err("add", x, y));
        }
        let data = x
            .as_slice()
            .iter()
            .zip(y.as_slice())
            .map(|(p, q)| p + q)
            .collect();
        let out = Matrix::from_vec(x.rows(), x.cols(), data);
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    /// Adds the `1 x d` row `bias` to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (m, b) = (self.value(x), self.value(bias));
        if b.rows() != 1 || b.cols() != m.cols() {
            return Err(shape_err("add_bias", m, b));
        }
        let mut out = m.clone();
        for r in 0..out.rows() {
            out.row_mut(r)
                .iter_mut()
                .zip(b.as_slice())
                .for_each(|(o, bb)| *o += bb);
        }
        self.push("add_bias", out, Op::AddBias(x, bias), &[x, bias])
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Result<Var, TensorError> {
        let m = self.value(x);
        let data = m.as_slice().iter().map(|v| v * factor).collect();
        let out = Matrix::from_vec(m.rows(), m.cols(), data);
        self.push("scale", out, Op::Scale(x, factor), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        let m = self.value(x);
        let data = m.as_slice().iter().map(|v| v.max(0.0)).collect();
        let out = Matrix::from_vec(m.rows(), m.cols(), data);
        self.push("relu", out, Op::Relu(x), &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let Some(&first) = parts.first() else {
            return Err(TensorError::CountMismatch {
                expected: 1,
                actual: 0,
            });
        };
        let rows = self.value(first).rows();
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(shape_err("concat_cols", self.value(first), self.value(p)));
            }
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Matrix::from_vec(rows, cols, data);
        self.push("concat_cols", out, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Row `v` of the result is the sum (or mean) of the input rows listed in
    /// `neighbors.row(v)`; rows with no neighbors are zero.
    pub fn sparse_apply(
        &mut self,
        neighbors: &'g Csr,
        x: Var,
        mode: Aggregation,
    ) -> Result<Var, TensorError> {
        let m = self.value(x);
        check_neighbors("sparse_apply", neighbors, m.rows())?;
        let d = m.cols();
        let mut out = Matrix::zeros(m.rows(), d);
        let mut acc = vec![0.0f64; d];
        for v in 0..m.rows() {
            let row = neighbors.row(v);
            if row.is_empty() {
                continue;
            }
            acc.fill(0.0);
            for &u in row {
                acc.iter_mut()
                    .zip(m.row(u))
                    .for_each(|(a, &x)| *a += f64::from(x));
            }
            let norm = match mode {
                Aggregation::Sum => 1.0,
                Aggregation::Mean => row.len() as f64,
            };
            out.row_mut(v)
                .iter_mut()
                .zip(&acc)
                .for_each(|(o, a)| *o = (a / norm) as f32);
        }
        let op = Op::SparseApply {
            input: x,
            neighbors,
            mode,
        };
        self.push("sparse_apply", out, op, &[x])
    }

    /// Element-wise max over each node's neighbor rows; zero for nodes
    /// without neighbors. Ties go to the lowest neighbor index.
    pub fn neighbor_max(&mut self, neighbors: &'g Csr, x: Var) -> Result<Var, TensorError> {
        let m = self.value(x);
        check_neighbors("neighbor_max", neighbors, m.rows())?;
        let d = m.cols();
        let mut out = Matrix::zeros(m.rows(), d);
        let mut source = vec![NO_ARGMAX; m.rows() * d];
        for v in 0..m.rows() {
            let row = neighbors.row(v);
            let Some(&first) = row.first() else { continue };
            for c in 0..d {
                let mut best = first;
                for &u in &row[1..] {
                    if m.get(u, c) > m.get(best, c) {
                        best = u;
                    }
                }
                out.set(v, c, m.get(best, c));
                source[v * d + c] = best * d + c;
            }
        }
        self.push("neighbor_max", out, Op::Gather { input: x, source }, &[x])
    }

    /// Element-wise max over rows sharing a segment id. Every segment in
    /// `0..segments` must own at least one row; ties go to the lowest row.
    pub fn segment_max(
        &mut self,
        x: Var,
        segment_ids: &[usize],
        segments: usize,
    ) -> Result<Var, TensorError> {
        let m = self.value(x);
        if segment_ids.len() != m.rows() {
            return Err(TensorError::ShapeMismatch {
                op: "segment_max",
                left: m.shape(),
                right: (segment_ids.len(), 1),
            });
        }
        let d = m.cols();
        let mut best: Vec<Option<usize>> = vec![None; segments * d];
        for (v, &s) in segment_ids.iter().enumerate() {
            if s >= segments {
                return Err(TensorError::IndexOutOfRange {
                    op: "segment_max",
                    index: s,
                    bound: segments,
                });
            }
            for c in 0..d {
                let slot = &mut best[s * d + c];
                match slot {
                    Some(b) if m.get(*b, c) >= m.get(v, c) => {}
                    _ => *slot = Some(v),
                }
            }
        }
        let mut covered = vec![false; segments];
        segment_ids.iter().for_each(|&s| covered[s] = true);
        if let Some(empty) = covered.iter().position(|c| !c) {
            return Err(TensorError::EmptySegment(empty));
        }
        let mut out = Matrix::zeros(segments, d);
        let mut source = vec![NO_ARGMAX; segments * d];
        for s in 0..segments {
            for c in 0..d {
                let v = best[s * d + c].expect("segment is covered");
                out.set(s, c, m.get(v, c));
                source[s * d + c] = v * d + c;
            }
        }
        self.push("segment_max", out, Op::Gather { input: x, source }, &[x])
    }

    /// Mean negative log-likelihood of `labels` under a row-wise softmax of
    /// `logits`, as a `1 x 1` value.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        labels: &[usize],
    ) -> Result<Var, TensorError> {
        let z = self.value(logits);
        let (b, classes) = z.shape();
        if labels.len() != b || b == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "softmax_cross_entropy",
                left: z.shape(),
                right: (labels.len(), 1),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(TensorError::LabelOutOfRange { label, classes });
        }
        let mut total = 0.0f64;
        let mut dlogits = Matrix::zeros(b, classes);
        for (r, &label) in labels.iter().enumerate() {
            let probs = softmax_row(z.row(r));
            for (c, p) in probs.iter().enumerate() {
                let onehot = if c == label { 1.0 } else { 0.0 };
                dlogits.set(r, c, ((p - onehot) / b as f64) as f32);
            }
            let max = z
                .row(r)
                .iter()
                .fold(f64::NEG_INFINITY, |m, &x| m.max(f64::from(x)));
            let lse = max
                + z.row(r)
                    .iter()
                    .map(|&x| (f64::from(x) - max).exp())
                    .sum::<f64>()
                    .ln();
            total += lse - f64::from(z.get(r, label));
        }
        let loss = Matrix::from_vec(1, 1, vec![(total / b as f64) as f32]);
        self.push(
            "softmax_cross_entropy",
            loss,
            Op::SoftmaxCrossEntropy { logits, dlogits },
            &[logits],
        )
    }

    /// Reverse sweep from a `1 x 1` loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(TensorError::NotScalar(shape));
        }
        self.backward_from(loss, Matrix::filled(1, 1, 1.0))
    }

    /// Reverse sweep from an arbitrary output with upstream gradient `seed`.
    pub fn backward_from(&self, output: Var, seed: Matrix) -> Result<Gradients, TensorError> {
        if seed.shape() != self.shape(output) {
            return Err(shape_err("backward", self.value(output), &seed));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed);

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(mut upstream) = grads[idx].take() else {
                continue;
            };
            flush_subnormals(&mut upstream);
            self.propagate(&node.op, &upstream, &mut grads);
            grads[idx] = Some(upstream);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, op: &Op<'g>, up: &Matrix, grads: &mut [Option<Matrix>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let (slot, beta) = grad_slot(grads, *a, av.shape());
                    gemm(Operand::plain(up), Operand::transposed(bv), slot, beta);
                }
                if self.wants(*b) {
                    let (slot, beta) = grad_slot(grads, *b, bv.shape());
                    gemm(Operand::transposed(av), Operand::plain(up), slot, beta);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        accumulate(grads, v, up.clone());
                    }
                }
            }
            Op::AddBias(x, bias) => {
                if self.wants(*x) {
                    accumulate(grads, *x, up.clone());
                }
                if self.wants(*bias) {
                    let mut sums = vec![0.0f64; up.cols()];
                    for r in 0..up.rows() {
                        sums.iter_mut()
                            .zip(up.row(r))
                            .for_each(|(s, &g)| *s += f64::from(g));
                    }
                    let g = Matrix::from_vec(
                        1,
                        up.cols(),
                        sums.into_iter().map(|s| s as f32).collect(),
                    );
                    accumulate(grads, *bias, g);
                }
            }
            Op::Scale(x, factor) => {
                if self.wants(*x) {
                    let data = up.as_slice().iter().map(|g| g * factor).collect();
                    accumulate(grads, *x, Matrix::from_vec(up.rows(), up.cols(), data));
                }
            }
            Op::Relu(x) => {
                if self.wants(*x) {
                    let input = self.value(*x);
                    let data = up
                        .as_slice()
                        .iter()
                        .zip(input.as_slice())
                        .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
                        .collect();
                    accumulate(grads, *x, Matrix::from_vec(up.rows(), up.cols(), data));
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let cols = self.value(p).cols();
                    if self.wants(p) {
                        let mut g = Matrix::zeros(up.rows(), cols);
                        for r in 0..up.rows() {
                            g.row_mut(r)
                                .copy_from_slice(&up.row(r)[offset..offset + cols]);
                        }
                        accumulate(grads, p, g);
                    }
                    offset += cols;
                }
            }
            Op::SparseApply {
                input,
                neighbors,
                mode,
            } => {
                if !self.wants(*input) {
                    return;
                }
                let d = up.cols();
                let mut acc = vec![0.0f64; up.rows() * d];
                for v in 0..up.rows() {
                    let row = neighbors.row(v);
                    if row.is_empty() {
                        continue;
                    }
                    let norm = match mode {
                        Aggregation::Sum => 1.0,
                        Aggregation::Mean => row.len() as f64,
                    };
                    for &u in row {
                        acc[u * d..(u + 1) * d]
                            .iter_mut()
                            .zip(up.row(v))
                            .for_each(|(a, &g)| *a += f64::from(g) / norm);
                    }
                }
                let g = Matrix::from_vec(up.rows(), d, acc.into_iter().map(|a| a as f32).collect());
                accumulate(grads, *input, g);
            }
            Op::Gather { input, source } => {
                if !self.wants(*input) {
                    return;
                }
                let (rows, cols) = self.shape(*input);
                let mut g = Matrix::zeros(rows, cols);
                let flat = g.as_mut_slice();
                for (i, &src) in source.iter().enumerate() {
                    if src != NO_ARGMAX {
                        flat[src] += up.as_slice()[i];
                    }
                }
                accumulate(grads, *input, g);
            }
            Op::SoftmaxCrossEntropy { logits, dlogits } => {
                if self.wants(*logits) {
                    let scale = up.get(0, 0);
                    let data = dlogits.as_slice().iter().map(|g| g * scale).collect();
                    accumulate(
                        grads,
                        *logits,
                        Matrix::from_vec(dlogits.rows(), dlogits.cols(), data),
                    );
                }
            }
        }
    }
}

/// Row softmax in 64-bit with max subtraction.
pub fn softmax_row(row: &[f32]) -> Vec<f64> {
    let max = row
        .iter()
        .fold(f64::NEG_INFINITY, |m, &x| m.max(f64::from(x)));
    let exps: Vec<f64> = row.iter().map(|&x| (f64::from(x) - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn grad_slot(grads: &mut [Option<Matrix>], v: Var, shape: (usize, usize)) -> (&mut Matrix, f32) {
    let slot = &mut grads[v.0];
    let beta = if slot.is_some() { 1.0 } else { 0.0 };
    (
        slot.get_or_insert_with(|| Matrix::zeros(shape.0, shape.1)),
        beta,
    )
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing
            .as_mut_slice()
            .iter_mut()
            .zip(g.as_slice())
            .for_each(|(e, x)| *e += x),
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_vec(
            rows,
            cols,
            (0..rows * cols)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )
    }

    fn weighted_sum(m: &Matrix, w: &Matrix) -> f64 {
        m.as_slice()
            .iter()
            .zip(w.as_slice())
            .map(|(&a, &b)| f64::from(a) * f64::from(b))
            .sum()
    }

    /// Checks the tape gradient of `sum(weights * f(inputs))` against central
    /// differences with step 1e-3 for every input entry.
    fn check_grad<'a, F>(inputs: &[Matrix], f: F)
    where
        F: Fn(&mut Tape<'a>, &[Var]) -> Var,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|m| tape.param(m.clone())).collect();
        let out = f(&mut tape, &vars);
        let (r, c) = tape.shape(out);
        let weights = random(&mut rng, r, c);
        let grads = tape.backward_from(out, weights.clone()).unwrap();

        let eval = |perturbed: &[Matrix]| {
            let mut t = Tape::new();
            let vs: Vec<Var> = perturbed.iter().map(|m| t.param(m.clone())).collect();
            let o = f(&mut t, &vs);
            weighted_sum(t.value(o), &weights)
        };
        let h = 1e-3f32;
        for (i, m) in inputs.iter().enumerate() {
            let analytic = grads
                .get(vars[i])
                .cloned()
                .unwrap_or_else(|| Matrix::zeros(m.rows(), m.cols()));
            for k in 0..m.len() {
                let mut plus = inputs.to_vec();
                plus[i].as_mut_slice()[k] += h;
                let mut minus = inputs.to_vec();
                minus[i].as_mut_slice()[k] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * f64::from(h));
                let a = f64::from(analytic.as_slice()[k]);
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
                assert!(
                    rel < 1e-3,
                    "input {i} entry {k}: analytic {a} numeric {numeric}"
                );
            }
        }
    }

    fn two_cycle_plus() -> Csr {
        // 0 <-> 1, 1 -> 2 symmetrized
        Csr::from_lists(&[vec![1], vec![0, 2], vec![1]])
    }

    #[test]
    fn matmul_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&mut rng, 3, 4);
        let b = random(&mut rng, 4, 2);
        check_grad(&[a, b], |t, v| t.matmul(v[0], v[1]).unwrap());
    }

    #[test]
    fn elementwise_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&mut rng, 4, 3);
        let bias = random(&mut rng, 1, 3);
        check_grad(&[x.clone(), bias], |t, v| t.add_bias(v[0], v[1]).unwrap());
        check_grad(&[x.clone(), x.clone()], |t, v| t.add(v[0], v[1]).unwrap());
        check_grad(std::slice::from_ref(&x), |t, v| t.scale(v[0], 2.5).unwrap());
        check_grad(std::slice::from_ref(&x), |t, v| t.relu(v[0]).unwrap());
        let y = random(&mut rng, 4, 2);
        check_grad(&[x, y], |t, v| t.concat_cols(&[v[0], v[1], v[0]]).unwrap());
    }

    #[test]
    fn add_bias_gradient_is_column_sum() {
        let mut tape = Tape::new();
        let x = tape.constant(Matrix::zeros(3, 2));
        let b = tape.param(Matrix::zeros(1, 2));
        let y = tape.add_bias(x, b).unwrap();
        let up = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]);
        let g = tape.backward_from(y, up).unwrap();
        assert_eq!(g.get(b).unwrap().as_slice(), &[9.0, 12.0]);
        assert!(g.get(x).is_none());
    }

    #[test]
    fn aggregation_gradients() {
        let csr = two_cycle_plus();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, 3, 2);
        check_grad(std::slice::from_ref(&x), |t, v| {
            t.sparse_apply(&csr, v[0], Aggregation::Sum).unwrap()
        });
        check_grad(std::slice::from_ref(&x), |t, v| {
            t.sparse_apply(&csr, v[0], Aggregation::Mean).unwrap()
        });
        check_grad(std::slice::from_ref(&x), |t, v| {
            t.neighbor_max(&csr, v[0]).unwrap()
        });
        check_grad(&[x], |t, v| t.segment_max(v[0], &[0, 0, 1], 2).unwrap());
    }

    #[test]
    fn sparse_apply_examples() {
        let csr = Csr::from_lists(&[vec![], vec![]]);
        let mut tape = Tape::new();
        let x = tape.constant(Matrix::from_rows(&[&[4.0], &[5.0]]));
        let y = tape.sparse_apply(&csr, x, Aggregation::Mean).unwrap();
        assert_eq!(tape.value(y).as_slice(), &[0.0, 0.0]);

        let cycle = Csr::from_lists(&[vec![1], vec![0]]);
        let x = tape.constant(Matrix::from_rows(&[&[1.0], &[3.0]]));
        let y = tape.sparse_apply(&cycle, x, Aggregation::Sum).unwrap();
        assert_eq!(tape.value(y).as_slice(), &[3.0, 1.0]);

        let bad = Csr::from_lists(&[vec![5], vec![0]]);
        assert!(matches!(
            tape.sparse_apply(&bad, x, Aggregation::Sum),
            Err(TensorError::IndexOutOfRange { index: 5, .. })
        ));
    }

    #[test]
    fn mean_aggregation_matches_dense_row_normalized_adjacency() {
        let csr = two_cycle_plus();
        let x = Matrix::from_rows(&[&[1.0, -2.0], &[3.0, 0.5], &[-4.0, 8.0]]);
        // D^-1 A
        let a = Matrix::from_rows(&[&[0.0, 1.0, 0.0], &[0.5, 0.0, 0.5], &[0.0, 1.0, 0.0]]);
        let expected = a.matmul(&x).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let y = tape.sparse_apply(&csr, xv, Aggregation::Mean).unwrap();
        assert_eq!(tape.value(y), &expected);
    }

    #[test]
    fn relu_and_concat_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Matrix::from_rows(&[&[-1.0, 2.0]]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).as_slice(), &[0.0, 2.0]);

        let a = tape.constant(Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = tape.constant(Matrix::from_rows(&[&[5.0, 6.0, 7.0], &[8.0, 9.0, 10.0]]));
        let c = tape.concat_cols(&[a, b]).unwrap();
        assert_eq!(tape.shape(c), (2, 5));
        assert_eq!(tape.value(c).row(1), &[3.0, 4.0, 8.0, 9.0, 10.0]);
        let short = tape.constant(Matrix::zeros(1, 1));
        assert!(tape.concat_cols(&[a, short]).is_err());
        assert!(tape.add_bias(a, b).is_err());
        assert!(tape.matmul(a, b).is_ok());
        assert!(tape.matmul(b, a).is_err());
    }

    #[test]
    fn segment_max_examples() {
        let mut tape = Tape::new();
        let x = tape.param(Matrix::from_rows(&[&[1.0, 5.0], &[3.0, 2.0]]));
        let y = tape.segment_max(x, &[0, 0], 1).unwrap();
        assert_eq!(tape.value(y).as_slice(), &[3.0, 5.0]);

        let x = tape.constant(Matrix::from_rows(&[&[1.0], &[2.0]]));
        let y = tape.segment_max(x, &[0, 1], 2).unwrap();
        assert_eq!(tape.value(y).as_slice(), &[1.0, 2.0]);

        assert_eq!(
            tape.segment_max(x, &[0, 0], 2),
            Err(TensorError::EmptySegment(1))
        );
    }

    #[test]
    fn segment_max_ties_route_to_lowest_row() {
        let mut tape = Tape::new();
        let x = tape.param(Matrix::from_rows(&[&[2.0], &[2.0]]));
        let y = tape.segment_max(x, &[0, 0], 1).unwrap();
        let g = tape.backward_from(y, Matrix::filled(1, 1, 1.0)).unwrap();
        assert_eq!(g.get(x).unwrap().as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::new();
        let z = tape.param(Matrix::from_rows(&[&[0.0, 0.0]]));
        let loss = tape.softmax_cross_entropy(z, &[0]).unwrap();
        assert!((tape.value(loss).get(0, 0) - std::f32::consts::LN_2).abs() < 1e-7);

        let z = tape.param(Matrix::from_rows(&[&[1000.0, 0.0]]));
        let loss = tape.softmax_cross_entropy(z, &[0]).unwrap();
        assert!(tape.value(loss).get(0, 0).abs() < 1e-6);
        let loss = tape.softmax_cross_entropy(z, &[1]).unwrap();
        assert!((tape.value(loss).get(0, 0) - 1000.0).abs() < 1e-3);

        assert_eq!(
            tape.softmax_cross_entropy(z, &[2]),
            Err(TensorError::LabelOutOfRange {
                label: 2,
                classes: 2
            })
        );
    }

    #[test]
    fn cross_entropy_matches_f64_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = random(&mut rng, 4, 3)
            .as_slice()
            .iter()
            .map(|x| x * 4.0)
            .collect::<Vec<_>>();
        let z = Matrix::from_vec(4, 3, z);
        let labels = [2, 0, 1, 1];
        // oracle: log-sum-exp evaluated directly in f64
        let mut expected = 0.0f64;
        for (r, &l) in labels.iter().enumerate() {
            let row: Vec<f64> = z.row(r).iter().map(|&x| f64::from(x)).collect();
            let lse = row.iter().map(|x| x.exp()).sum::<f64>().ln();
            expected += lse - row[l];
        }
        expected /= 4.0;
        let mut tape = Tape::new();
        let zv = tape.param(z.clone());
        let loss = tape.softmax_cross_entropy(zv, &labels).unwrap();
        assert!((f64::from(tape.value(loss).get(0, 0)) - expected).abs() < 1e-5);
        check_grad(&[z], |t, v| t.softmax_cross_entropy(v[0], &labels).unwrap());
    }

    #[test]
    fn uniform_logits_give_ln_classes() {
        for classes in 2..8 {
            let mut tape = Tape::new();
            let z = tape.constant(Matrix::filled(3, classes, 0.7));
            let loss = tape.softmax_cross_entropy(z, &[0, 1, classes - 1]).unwrap();
            let got = f64::from(tape.value(loss).get(0, 0));
            assert!((got - (classes as f64).ln()).abs() < 1e-6);
        }
    }

    #[test]
    fn backward_simple_chains() {
        let mut tape = Tape::new();
        let x = tape.param(Matrix::filled(1, 1, 2.0));
        let y = tape.scale(x, 3.0).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().get(0, 0), 3.0);

        let mut tape = Tape::new();
        let x = tape.param(Matrix::filled(1, 1, 2.0));
        let y = tape.add(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().get(0, 0), 2.0);

        let m = tape.param(Matrix::zeros(2, 2));
        assert_eq!(
            tape.backward(m).unwrap_err(),
            TensorError::NotScalar((2, 2))
        );
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(Matrix::filled(1, 1, f32::MAX));
        assert_eq!(tape.scale(x, 10.0), Err(TensorError::NonFinite("scale")));
    }

    #[test]
    fn segment_max_is_permutation_invariant_within_segments() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&mut rng, 6, 3);
        let ids = [0, 0, 0, 1, 1, 1];
        let perm = [2, 0, 1, 5, 3, 4];
        let mut permuted = Matrix::zeros(6, 3);
        for (v, &p) in perm.iter().enumerate() {
            permuted.row_mut(p).copy_from_slice(x.row(v));
        }
        let mut tape = Tape::new();
        let a = tape.constant(x);
        let b = tape.constant(permuted);
        let ya = tape.segment_max(a, &ids, 2).unwrap();
        let yb = tape.segment_max(b, &ids, 2).unwrap();
        assert_eq!(tape.value(ya), tape.value(yb));
    }

    #[test]
    fn branch_pattern_tracks_relu_and_max() {
        let pattern = |x: f32| {
            let mut t = Tape::new();
            let v = t.param(Matrix::from_rows(&[&[x, 1.0], &[0.5, -2.0]]));
            let r = t.relu(v).unwrap();
            t.segment_max(r, &[0, 0], 1).unwrap();
            t.branch_pattern()
        };
        assert_eq!(pattern(-1.0), vec![0, 1, 1, 0, 2, 1]);
        assert_eq!(pattern(0.25), pattern(0.3));
        assert_ne!(pattern(0.25), pattern(0.75));
    }
}
