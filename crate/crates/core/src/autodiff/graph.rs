//! Single-use compute graph: forward ops record themselves in insertion
//! order, `backward` replays the record in reverse.

use crate::error::{CasaError, Result};

use super::tensor::Tensor;

/// Handle to a node inside one [`Graph`]. Only valid for the graph that
/// produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// out = a · b, a: [m×k], b: [k×n]
    Matmul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    /// Elementwise product of same-shape tensors.
    Hadamard { a: Var, b: Var },
    /// x: [B×C] plus a length-C row vector broadcast over rows.
    AddRow { x: Var, row: Var },
    /// x: [B×C] times a length-C row vector broadcast over rows.
    MulRow { x: Var, row: Var },
    /// Tile a length-C row vector into [rows×C].
    BroadcastRow { row: Var, rows: usize },
    /// Column-wise concatenation of two matrices with equal row counts.
    ConcatCols { a: Var, b: Var, cols_a: usize },
    Relu { x: Var },
    /// Column means of a [B×C] matrix -> [C].
    MeanRows { x: Var },
    /// Sum of all entries -> scalar.
    Sum { x: Var },
    /// Multiply by a compile-time constant.
    Scale { x: Var, factor: f64 },
    /// Multiply every entry by a scalar ([1]-shaped) variable.
    MulScalar { x: Var, s: Var },
    /// Add a scalar ([1]-shaped) variable to every entry.
    AddScalar { x: Var, s: Var },
    /// Extract one entry as a scalar variable.
    Pick { x: Var, index: usize },
    /// Row-wise softmax of a [B×K] matrix.
    Softmax { x: Var },
    /// Mean over rows of -log softmax(logits)[label]; scalar output.
    /// Softmax probabilities are cached at forward time for the backward rule.
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node {
    tensor: Tensor,
    op: Op,
}

/// Operation tape. Inputs of every node precede it, so a single reverse
/// sweep visits each node exactly once.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Graph {
        Graph { nodes: Vec::new() }
    }

    /// Insert a tensor as a leaf, keeping its `requires_grad` flag.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        self.push(tensor, Op::Leaf)
    }

    /// Insert a non-differentiable leaf (inputs, labels-as-features, etc).
    pub fn constant(&mut self, mut tensor: Tensor) -> Var {
        tensor.set_requires_grad(false);
        self.push(tensor, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].tensor
    }

    /// Gradient accumulated on a node, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].tensor.grad()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Clear gradient accumulators on every node.
    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.tensor.zero_grad();
        }
    }

    fn push(&mut self, tensor: Tensor, op: Op) -> Var {
        self.nodes.push(Node { tensor, op });
        Var(self.nodes.len() - 1)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].tensor.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].tensor.data()
    }

    fn mismatch(&self, context: &str, a: Var, b: Var) -> CasaError {
        CasaError::DimensionMismatch {
            context: context.to_string(),
            left: self.shape(a).to_vec(),
            right: self.shape(b).to_vec(),
        }
    }

    fn require_matrix(&self, context: &str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(CasaError::Contract(format!(
                "{context}: expected a 2-D tensor, got shape {s:?}"
            )));
        }
        Ok((s[0], s[1]))
    }

    // ---- forward ops ------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.require_matrix("matmul lhs", a)?;
        let (k2, n) = self.require_matrix("matmul rhs", b)?;
        if k != k2 {
            return Err(self.mismatch("matmul inner dimensions", a, b));
        }
        let lhs = self.data(a);
        let rhs = self.data(b);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let lv = lhs[i * k + p];
                if lv == 0.0 {
                    continue;
                }
                let row = &rhs[p * n..(p + 1) * n];
                let dst = &mut out[i * n..(i + 1) * n];
                for (d, r) in dst.iter_mut().zip(row) {
                    *d += lv * r;
                }
            }
        }
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::Matmul { a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("add", a, b));
        }
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(
            Tensor::new(self.shape(a).to_vec(), out)?,
            Op::Add { a, b },
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("sub", a, b));
        }
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x - y)
            .collect();
        Ok(self.push(
            Tensor::new(self.shape(a).to_vec(), out)?,
            Op::Sub { a, b },
        ))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("hadamard", a, b));
        }
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(
            Tensor::new(self.shape(a).to_vec(), out)?,
            Op::Hadamard { a, b },
        ))
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (b, c) = self.require_matrix("add_row input", x)?;
        if self.shape(row) != [c] {
            return Err(self.mismatch("add_row broadcast", x, row));
        }
        let xs = self.data(x);
        let rs = self.data(row);
        let out: Vec<f64> = xs
            .iter()
            .enumerate()
            .map(|(i, v)| v + rs[i % c])
            .collect();
        let _ = b;
        Ok(self.push(Tensor::new(self.shape(x).to_vec(), out)?, Op::AddRow { x, row }))
    }

    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (_, c) = self.require_matrix("mul_row input", x)?;
        if self.shape(row) != [c] {
            return Err(self.mismatch("mul_row broadcast", x, row));
        }
        let xs = self.data(x);
        let rs = self.data(row);
        let out: Vec<f64> = xs
            .iter()
            .enumerate()
            .map(|(i, v)| v * rs[i % c])
            .collect();
        Ok(self.push(Tensor::new(self.shape(x).to_vec(), out)?, Op::MulRow { x, row }))
    }

    pub fn broadcast_row(&mut self, row: Var, rows: usize) -> Result<Var> {
        let s = self.shape(row);
        if s.len() != 1 {
            return Err(CasaError::Contract(format!(
                "broadcast_row: expected a 1-D tensor, got shape {s:?}"
            )));
        }
        if rows == 0 {
            return Err(CasaError::EmptyBatch("broadcast_row to zero rows".into()));
        }
        let c = s[0];
        let mut out = Vec::with_capacity(rows * c);
        for _ in 0..rows {
            out.extend_from_slice(self.data(row));
        }
        Ok(self.push(Tensor::matrix(rows, c, out)?, Op::BroadcastRow { row, rows }))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.require_matrix("concat_cols lhs", a)?;
        let (rb, cb) = self.require_matrix("concat_cols rhs", b)?;
        if ra != rb {
            return Err(self.mismatch("concat_cols row counts", a, b));
        }
        let xs = self.data(a);
        let ys = self.data(b);
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            out.extend_from_slice(&xs[i * ca..(i + 1) * ca]);
            out.extend_from_slice(&ys[i * cb..(i + 1) * cb]);
        }
        Ok(self.push(
            Tensor::matrix(ra, ca + cb, out)?,
            Op::ConcatCols { a, b, cols_a: ca },
        ))
    }

    /// Elementwise max(0, x). The subgradient at exactly 0 is 0.
    pub fn relu(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self
            .data(x)
            .iter()
            .map(|&v| if v > 0.0 { v } else { 0.0 })
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), out).expect("same shape as input");
        self.push(t, Op::Relu { x })
    }

    /// Column-wise mean of a [B×C] matrix. The gradient hands 1/B to each row.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (b, c) = self.require_matrix("mean_rows", x)?;
        if b == 0 {
            return Err(CasaError::EmptyBatch("mean_rows over zero rows".into()));
        }
        let xs = self.data(x);
        let mut out = vec![0.0; c];
        for i in 0..b {
            for j in 0..c {
                out[j] += xs[i * c + j];
            }
        }
        for v in &mut out {
            *v /= b as f64;
        }
        Ok(self.push(Tensor::vector(out), Op::MeanRows { x }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total: f64 = self.data(x).iter().sum();
        self.push(Tensor::scalar(total), Op::Sum { x })
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out: Vec<f64> = self.data(x).iter().map(|v| v * factor).collect();
        let t = Tensor::new(self.shape(x).to_vec(), out).expect("same shape as input");
        self.push(t, Op::Scale { x, factor })
    }

    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if !self.nodes[s.0].tensor.is_scalar() {
            return Err(CasaError::Contract(format!(
                "mul_scalar: scalar operand has shape {:?}",
                self.shape(s)
            )));
        }
        let sv = self.data(s)[0];
        let out: Vec<f64> = self.data(x).iter().map(|v| v * sv).collect();
        Ok(self.push(
            Tensor::new(self.shape(x).to_vec(), out)?,
            Op::MulScalar { x, s },
        ))
    }

    pub fn add_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if !self.nodes[s.0].tensor.is_scalar() {
            return Err(CasaError::Contract(format!(
                "add_scalar: scalar operand has shape {:?}",
                self.shape(s)
            )));
        }
        let sv = self.data(s)[0];
        let out: Vec<f64> = self.data(x).iter().map(|v| v + sv).collect();
        Ok(self.push(
            Tensor::new(self.shape(x).to_vec(), out)?,
            Op::AddScalar { x, s },
        ))
    }

    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var> {
        let n = self.nodes[x.0].tensor.numel();
        if index >= n {
            return Err(CasaError::Contract(format!(
                "pick: index {index} out of range for {n} elements"
            )));
        }
        let v = self.data(x)[index];
        Ok(self.push(Tensor::scalar(v), Op::Pick { x, index }))
    }

    /// Row-wise softmax with max-subtraction stabilization.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (b, k) = self.require_matrix("softmax", x)?;
        let xs = self.data(x);
        let mut out = vec![0.0; b * k];
        for i in 0..b {
            let row = &xs[i * k..(i + 1) * k];
            softmax_row(row, &mut out[i * k..(i + 1) * k]);
        }
        Ok(self.push(Tensor::matrix(b, k, out)?, Op::Softmax { x }))
    }

    /// Mean over the batch of -log softmax(logits)[label], stabilized via
    /// log-sum-exp. The gradient is (softmax - onehot) / B.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, k) = self.require_matrix("softmax_cross_entropy logits", logits)?;
        if labels.len() != b {
            return Err(CasaError::DimensionMismatch {
                context: "softmax_cross_entropy labels".into(),
                left: vec![b, k],
                right: vec![labels.len()],
            });
        }
        if b == 0 {
            return Err(CasaError::EmptyBatch("cross-entropy over zero rows".into()));
        }
        for (i, &label) in labels.iter().enumerate() {
            if label >= k {
                return Err(CasaError::LabelOutOfRange {
                    label,
                    classes: k,
                    sample: i,
                });
            }
        }
        let xs = self.data(logits);
        let mut probs = vec![0.0; b * k];
        let mut total = 0.0;
        for i in 0..b {
            let row = &xs[i * k..(i + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for &v in row {
                denom += (v - max).exp();
            }
            let log_denom = denom.ln();
            total += log_denom + max - row[labels[i]];
            for j in 0..k {
                probs[i * k + j] = (row[j] - max).exp() / denom;
            }
        }
        let loss = total / b as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    // ---- backward ---------------------------------------------------------

    /// Accumulate dLoss/dNode into every node's `grad` field.
    ///
    /// Each call seeds a fresh adjoint sweep and then adds its result into
    /// the accumulators, so repeated calls without [`Graph::zero_grads`] sum.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.nodes[loss.0].tensor.is_scalar() {
            return Err(CasaError::Contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adjoint: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|n| vec![0.0; n.tensor.numel()])
            .collect();
        adjoint[loss.0][0] = 1.0;

        for idx in (0..=loss.0).rev() {
            if adjoint[idx].iter().all(|&g| g == 0.0) {
                continue;
            }
            let up = std::mem::take(&mut adjoint[idx]);
            self.propagate(idx, &up, &mut adjoint);
            adjoint[idx] = up;
        }

        for (node, adj) in self.nodes.iter_mut().zip(&adjoint) {
            node.tensor.accumulate_grad(adj);
        }
        Ok(())
    }

    /// Send the upstream adjoint of node `idx` to its inputs.
    fn propagate(&self, idx: usize, up: &[f64], adjoint: &mut [Vec<f64>]) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let av = self.data(*a);
                let bv = self.data(*b);
                // dA = up · Bᵀ
                {
                    let da = &mut adjoint[a.0];
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += up[i * n + j] * bv[p * n + j];
                            }
                            da[i * k + p] += acc;
                        }
                    }
                }
                // dB = Aᵀ · up
                {
                    let db = &mut adjoint[b.0];
                    for p in 0..k {
                        for j in 0..n {
                            let mut acc = 0.0;
                            for i in 0..m {
                                acc += av[i * k + p] * up[i * n + j];
                            }
                            db[p * n + j] += acc;
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                accumulate(&mut adjoint[a.0], up);
                accumulate(&mut adjoint[b.0], up);
            }
            Op::Sub { a, b } => {
                accumulate(&mut adjoint[a.0], up);
                for (g, u) in adjoint[b.0].iter_mut().zip(up) {
                    *g -= u;
                }
            }
            Op::Hadamard { a, b } => {
                let av = self.data(*a);
                let bv = self.data(*b);
                for ((g, u), x) in adjoint[a.0].iter_mut().zip(up).zip(bv) {
                    *g += u * x;
                }
                for ((g, u), x) in adjoint[b.0].iter_mut().zip(up).zip(av) {
                    *g += u * x;
                }
            }
            Op::AddRow { x, row } => {
                let c = self.shape(*row)[0];
                accumulate(&mut adjoint[x.0], up);
                let dr = &mut adjoint[row.0];
                for (i, u) in up.iter().enumerate() {
                    dr[i % c] += u;
                }
            }
            Op::MulRow { x, row } => {
                let c = self.shape(*row)[0];
                let xv = self.data(*x);
                let rv = self.data(*row);
                for (i, u) in up.iter().enumerate() {
                    adjoint[x.0][i] += u * rv[i % c];
                }
                for (i, u) in up.iter().enumerate() {
                    adjoint[row.0][i % c] += u * xv[i];
                }
            }
            Op::BroadcastRow { row, rows } => {
                let c = self.shape(*row)[0];
                let dr = &mut adjoint[row.0];
                for i in 0..*rows {
                    for j in 0..c {
                        dr[j] += up[i * c + j];
                    }
                }
            }
            Op::ConcatCols { a, b, cols_a } => {
                let rows = self.shape(*a)[0];
                let cb = self.shape(*b)[1];
                let total = cols_a + cb;
                for i in 0..rows {
                    for j in 0..*cols_a {
                        adjoint[a.0][i * cols_a + j] += up[i * total + j];
                    }
                    for j in 0..cb {
                        adjoint[b.0][i * cb + j] += up[i * total + cols_a + j];
                    }
                }
            }
            Op::Relu { x } => {
                let xv = self.data(*x);
                for ((g, u), v) in adjoint[x.0].iter_mut().zip(up).zip(xv) {
                    if *v > 0.0 {
                        *g += u;
                    }
                }
            }
            Op::MeanRows { x } => {
                let (b, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let inv = 1.0 / b as f64;
                let dx = &mut adjoint[x.0];
                for i in 0..b {
                    for j in 0..c {
                        dx[i * c + j] += up[j] * inv;
                    }
                }
            }
            Op::Sum { x } => {
                let u = up[0];
                for g in adjoint[x.0].iter_mut() {
                    *g += u;
                }
            }
            Op::Scale { x, factor } => {
                for (g, u) in adjoint[x.0].iter_mut().zip(up) {
                    *g += u * factor;
                }
            }
            Op::MulScalar { x, s } => {
                let sv = self.data(*s)[0];
                let xv = self.data(*x);
                for (g, u) in adjoint[x.0].iter_mut().zip(up) {
                    *g += u * sv;
                }
                let ds: f64 = up.iter().zip(xv).map(|(u, v)| u * v).sum();
                adjoint[s.0][0] += ds;
            }
            Op::AddScalar { x, s } => {
                accumulate(&mut adjoint[x.0], up);
                adjoint[s.0][0] += up.iter().sum::<f64>();
            }
            Op::Pick { x, index } => {
                adjoint[x.0][*index] += up[0];
            }
            Op::Softmax { x } => {
                let (b, k) = (self.shape(*x)[0], self.shape(*x)[1]);
                let probs = self.nodes[idx].tensor.data();
                let dx = &mut adjoint[x.0];
                for i in 0..b {
                    let p = &probs[i * k..(i + 1) * k];
                    let u = &up[i * k..(i + 1) * k];
                    let dot: f64 = p.iter().zip(u).map(|(pv, uv)| pv * uv).sum();
                    for j in 0..k {
                        dx[i * k + j] += p[j] * (u[j] - dot);
                    }
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let k = self.shape(*logits)[1];
                let b = labels.len();
                let u = up[0] / b as f64;
                let dl = &mut adjoint[logits.0];
                for i in 0..b {
                    for j in 0..k {
                        let onehot = if labels[i] == j { 1.0 } else { 0.0 };
                        dl[i * k + j] += u * (probs[i * k + j] - onehot);
                    }
                }
            }
        }
    }
}

fn accumulate(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut denom = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - max).exp();
        *o = e;
        denom += e;
    }
    for o in out.iter_mut() {
        *o /= denom;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_passthrough() {
        let mut g = Graph::new();
        let eye = g.constant(mat(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let b = g.constant(mat(2, 2, &[3.0, 4.0, 5.0, 6.0]));
        let out = g.matmul(eye, b).unwrap();
        assert_eq!(g.value(out).data(), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_hand_arithmetic() {
        // [[1,2]] · [[3],[4]] = [[11]]
        let mut g = Graph::new();
        let a = g.constant(mat(1, 2, &[1.0, 2.0]));
        let b = g.constant(mat(2, 1, &[3.0, 4.0]));
        let out = g.matmul(a, b).unwrap();
        assert_eq!(g.value(out).data(), &[11.0]);
    }

    #[test]
    fn matmul_inner_dim_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(mat(2, 3, &[0.0; 6]));
        let b = g.constant(mat(2, 2, &[0.0; 4]));
        let err = g.matmul(a, b).unwrap_err();
        match err {
            CasaError::DimensionMismatch { left, right, .. } => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 2]);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn relu_forward_and_zero_grad_on_negatives() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![-1.0, 0.0, 2.0]).with_grad());
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);

        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![-3.0, -0.5]).with_grad());
        let y = g.relu(x);
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0]);
        assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn cross_entropy_symmetric_logits_is_ln2() {
        let mut g = Graph::new();
        let logits = g.constant(mat(1, 2, &[0.0, 0.0]));
        let loss = g.softmax_cross_entropy(logits, &[0]).unwrap();
        assert!((g.value(loss).item() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_extreme_logits_do_not_overflow() {
        let mut g = Graph::new();
        let logits = g.constant(mat(1, 2, &[1000.0, 0.0]));
        let loss = g.softmax_cross_entropy(logits, &[0]).unwrap();
        let v = g.value(loss).item();
        assert!(v.is_finite());
        assert!(v < 1e-9, "loss should be ~0, got {v}");
    }

    #[test]
    fn cross_entropy_matches_direct_formula() {
        // Independent direct-formula evaluation on fixed pseudo-random logits.
        let logits: [f64; 12] = [
            0.3, -1.2, 0.7, //
            2.0, 0.1, -0.4, //
            -0.9, 0.6, 1.4, //
            0.0, 0.0, 0.5,
        ];
        let labels = [2usize, 0, 1, 2];
        let mut expected = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row = &logits[i * 3..(i + 1) * 3];
            let denom: f64 = row.iter().map(|v| v.exp()).sum();
            expected -= (row[label].exp() / denom).ln();
        }
        expected /= labels.len() as f64;

        let mut g = Graph::new();
        let l = g.constant(mat(4, 3, &logits));
        let loss = g.softmax_cross_entropy(l, &labels).unwrap();
        assert!((g.value(loss).item() - expected).abs() < 1e-10);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_label() {
        let mut g = Graph::new();
        let logits = g.constant(mat(2, 3, &[0.0; 6]));
        let err = g.softmax_cross_entropy(logits, &[1, 3]).unwrap_err();
        match err {
            CasaError::LabelOutOfRange { label, classes, sample } => {
                assert_eq!((label, classes, sample), (3, 3, 1));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn mean_rows_examples() {
        let mut g = Graph::new();
        let x = g.constant(mat(2, 2, &[1.0, 3.0, 3.0, 5.0]));
        let m = g.mean_rows(x).unwrap();
        assert_eq!(g.value(m).data(), &[2.0, 4.0]);

        let mut g = Graph::new();
        let x = g.constant(mat(1, 2, &[7.0, 8.0]));
        let m = g.mean_rows(x).unwrap();
        assert_eq!(g.value(m).data(), &[7.0, 8.0]);
    }

    #[test]
    fn mean_rows_gradient_distributes_uniformly() {
        let mut g = Graph::new();
        let x = g.leaf(mat(4, 3, &[0.5; 12]).with_grad());
        let m = g.mean_rows(x).unwrap();
        let loss = g.sum(m);
        g.backward(loss).unwrap();
        for &gv in g.grad(x).unwrap() {
            assert!((gv - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::vector(vec![1.0; 5]).with_grad());
        let loss = g.sum(w);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[1.0; 5]);
    }

    #[test]
    fn backward_quadratic_hand_arithmetic() {
        // loss = sum(w ∘ w) with w = (1, 2) -> grad (2, 4)
        let mut g = Graph::new();
        let w = g.leaf(Tensor::vector(vec![1.0, 2.0]).with_grad());
        let sq = g.hadamard(w, w).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_accumulates_without_reset() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::vector(vec![1.0, 2.0]).with_grad());
        let loss = g.sum(w);
        g.backward(loss).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::vector(vec![1.0, 2.0]).with_grad());
        assert!(matches!(g.backward(w), Err(CasaError::Contract(_))));
    }

    #[test]
    fn backward_after_reset_is_bitwise_repeatable() {
        let run = || {
            let mut g = Graph::new();
            let w = g.leaf(mat(3, 2, &[0.3, -0.7, 1.1, 0.2, -0.4, 0.9]).with_grad());
            let b = g.leaf(Tensor::vector(vec![0.1, -0.2]).with_grad());
            let h = g.add_row(w, b).unwrap();
            let r = g.relu(h);
            let loss = g.softmax_cross_entropy(r, &[0, 1, 0]).unwrap();
            g.backward(loss).unwrap();
            (g.grad(w).unwrap().to_vec(), g.grad(b).unwrap().to_vec())
        };
        let (gw1, gb1) = run();
        let (gw2, gb2) = run();
        assert_eq!(gw1, gw2);
        assert_eq!(gb1, gb2);
    }

    #[test]
    fn forward_is_deterministic_bitwise() {
        let build = || {
            let mut g = Graph::new();
            let a = g.constant(mat(3, 4, &[0.123456789; 12]));
            let b = g.constant(mat(4, 2, &[-0.987654321; 8]));
            let c = g.matmul(a, b).unwrap();
            let s = g.softmax(c).unwrap();
            g.value(s).data().to_vec()
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let x = g.constant(mat(2, 3, &[5.0, -2.0, 0.3, 100.0, 99.0, 98.0]));
        let s = g.softmax(x).unwrap();
        let data = g.value(s).data();
        for i in 0..2 {
            let sum: f64 = data[i * 3..(i + 1) * 3].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_cols_layout_and_gradient_split() {
        let mut g = Graph::new();
        let a = g.leaf(mat(2, 2, &[1.0, 2.0, 3.0, 4.0]).with_grad());
        let b = g.leaf(mat(2, 1, &[5.0, 6.0]).with_grad());
        let c = g.concat_cols(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let weights = g.constant(mat(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let weighted = g.hadamard(c, weights).unwrap();
        let loss = g.sum(weighted);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[1.0, 2.0, 4.0, 5.0]);
        assert_eq!(g.grad(b).unwrap(), &[3.0, 6.0]);
    }
}
