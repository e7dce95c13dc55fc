//! Reverse-mode differentiation over an append-only operation tape.
//!
//! A [`Tape`] records one forward computation; `backward` walks the nodes in
//! reverse creation order (a valid topological order, since nodes only refer
//! to earlier nodes) and accumulates gradients into the [`ParamSet`].
//! Forward passes are bit-deterministic given inputs, parameters, and the
//! dropout seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::NumericError;
use crate::numeric::params::{ParamId, ParamSet};
use crate::numeric::Matrix;

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

/// One directed weighted adjacency entry: `A[dst][src] = coef * w[slot]`.
#[derive(Clone, Debug)]
pub struct ScatterEntry {
    pub slot: usize,
    pub dst: usize,
    pub src: usize,
    pub coef: f64,
}

enum Op {
    Constant,
    Param(ParamId),
    MatMul,
    Transpose,
    Add,
    /// x (m x n) plus a 1 x n bias row broadcast over rows.
    AddRowBroadcast,
    Scale(f64),
    Hadamard,
    SumAll,
    LeakyRelu(f64),
    /// `None` mask means identity (evaluation mode or rate 0). Mask entries
    /// are 0 or 1/(1-rate) so evaluation needs no rescaling.
    Dropout(Option<Vec<f64>>),
    SoftmaxRows,
    /// Mean of -log p(target) over labeled rows; expects probabilities.
    CrossEntropy {
        targets: Vec<Option<usize>>,
        class_weights: Option<Vec<f64>>,
    },
    /// Same loss computed from logits through log-sum-exp; the stable path
    /// used by the classifier heads.
    SoftmaxCrossEntropy {
        targets: Vec<Option<usize>>,
        class_weights: Option<Vec<f64>>,
        probs: Matrix,
    },
    /// Stack two matrices with equal column counts; first parent on top.
    VStack,
    SliceRows {
        start: usize,
    },
    /// Scatter a 1 x S weight vector into an n x n matrix by edge list.
    ScatterEdges {
        entries: Vec<ScatterEntry>,
        size: usize,
    },
    /// Row k of the output is [x[pairs[k].0, :], x[pairs[k].1, :]].
    ConcatPairRows {
        pairs: Vec<(usize, usize)>,
    },
}

struct Node {
    value: Matrix,
    parents: [Option<NodeId>; 2],
    op: Op,
}

/// Forward/backward recorder for one computation.
pub struct Tape {
    nodes: Vec<Node>,
    training: bool,
    rng: ChaCha8Rng,
}

impl Tape {
    /// Evaluation-mode tape: dropout is the identity.
    pub fn inference() -> Self {
        Tape {
            nodes: Vec::new(),
            training: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    /// Training-mode tape; `seed` drives all dropout masks.
    pub fn training(seed: u64) -> Self {
        Tape {
            nodes: Vec::new(),
            training: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> Result<f64, NumericError> {
        self.nodes[id.0].value.scalar()
    }

    fn push(&mut self, value: Matrix, parents: [Option<NodeId>; 2], op: Op) -> NodeId {
        self.nodes.push(Node { value, parents, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(value, [None, None], Op::Constant)
    }

    /// Load a parameter's current value as a leaf; backward accumulates
    /// into its gradient.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> NodeId {
        self.push(params.param(id).value.clone(), [None, None], Op::Param(id))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericError> {
        let value = self.nodes[a.0].value.matmul(&self.nodes[b.0].value)?;
        Ok(self.push(value, [Some(a), Some(b)], Op::MatMul))
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x.0].value.transpose();
        self.push(value, [Some(x), None], Op::Transpose)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericError> {
        let value = self.nodes[a.0].value.add(&self.nodes[b.0].value)?;
        Ok(self.push(value, [Some(a), Some(b)], Op::Add))
    }

    pub fn add_row_broadcast(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, NumericError> {
        let xv = &self.nodes[x.0].value;
        let bv = &self.nodes[bias.0].value;
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(NumericError::Shape {
                op: "add_row_broadcast",
                lhs: xv.shape(),
                rhs: bv.shape(),
            });
        }
        let mut value = xv.clone();
        for r in 0..value.rows() {
            for (o, b) in value.row_mut(r).iter_mut().zip(bv.row(0)) {
                *o += b;
            }
        }
        Ok(self.push(value, [Some(x), Some(bias)], Op::AddRowBroadcast))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let value = self.nodes[x.0].value.scale(c);
        self.push(value, [Some(x), None], Op::Scale(c))
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericError> {
        let value = self.nodes[a.0].value.hadamard(&self.nodes[b.0].value)?;
        Ok(self.push(value, [Some(a), Some(b)], Op::Hadamard))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.nodes[x.0].value.data().iter().sum();
        self.push(
            Matrix::filled(1, 1, s),
            [Some(x), None],
            Op::SumAll,
        )
    }

    /// Elementwise max(x, slope * x).
    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        let mut value = self.nodes[x.0].value.clone();
        for v in value.data_mut() {
            if *v < 0.0 {
                *v *= slope;
            }
        }
        self.push(value, [Some(x), None], Op::LeakyRelu(slope))
    }

    /// Inverted dropout: in training, zero each entry with probability
    /// `rate` and scale survivors by 1/(1-rate); identity in evaluation.
    pub fn dropout(&mut self, x: NodeId, rate: f64) -> Result<NodeId, NumericError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(NumericError::Contract(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        if !self.training || rate == 0.0 {
            let value = self.nodes[x.0].value.clone();
            return Ok(self.push(value, [Some(x), None], Op::Dropout(None)));
        }
        let keep_scale = 1.0 / (1.0 - rate);
        let n = self.nodes[x.0].value.len();
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                if self.rng.random::<f64>() < rate {
                    0.0
                } else {
                    keep_scale
                }
            })
            .collect();
        let mut value = self.nodes[x.0].value.clone();
        for (v, m) in value.data_mut().iter_mut().zip(&mask) {
            *v *= m;
        }
        Ok(self.push(value, [Some(x), None], Op::Dropout(Some(mask))))
    }

    /// Per-row softmax with max subtraction; rows sum to 1.
    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let value = softmax_matrix(&self.nodes[x.0].value);
        self.push(value, [Some(x), None], Op::SoftmaxRows)
    }

    /// Mean over labeled rows of -log p(target), optionally weighting each
    /// row's loss by a per-class factor. `probs` rows must sum to 1.
    pub fn cross_entropy(
        &mut self,
        probs: NodeId,
        targets: &[Option<usize>],
        class_weights: Option<&[f64]>,
    ) -> Result<NodeId, NumericError> {
        let p = &self.nodes[probs.0].value;
        check_targets(p, targets, class_weights)?;
        for r in 0..p.rows() {
            let s: f64 = p.row(r).iter().sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(NumericError::Contract(format!(
                    "cross_entropy row {r} sums to {s}, not 1"
                )));
            }
        }
        let labeled = targets.iter().flatten().count().max(1) as f64;
        let mut loss = 0.0;
        for (r, t) in targets.iter().enumerate() {
            if let Some(t) = t {
                let w = class_weights.map_or(1.0, |cw| cw[*t]);
                loss += -w * p.get(r, *t).ln();
            }
        }
        loss /= labeled;
        Ok(self.push(
            Matrix::filled(1, 1, loss),
            [Some(probs), None],
            Op::CrossEntropy {
                targets: targets.to_vec(),
                class_weights: class_weights.map(|w| w.to_vec()),
            },
        ))
    }

    /// Softmax-then-mean-NLL computed from logits via log-sum-exp. Same
    /// value and gradient as `softmax_rows` composed with `cross_entropy`,
    /// without forming log of a small probability.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[Option<usize>],
        class_weights: Option<&[f64]>,
    ) -> Result<NodeId, NumericError> {
        let z = &self.nodes[logits.0].value;
        check_targets(z, targets, class_weights)?;
        let probs = softmax_matrix(z);
        let labeled = targets.iter().flatten().count().max(1) as f64;
        let mut loss = 0.0;
        for (r, t) in targets.iter().enumerate() {
            if let Some(t) = t {
                let row = z.row(r);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                let w = class_weights.map_or(1.0, |cw| cw[*t]);
                loss += w * (lse - row[*t]);
            }
        }
        loss /= labeled;
        Ok(self.push(
            Matrix::filled(1, 1, loss),
            [Some(logits), None],
            Op::SoftmaxCrossEntropy {
                targets: targets.to_vec(),
                class_weights: class_weights.map(|w| w.to_vec()),
                probs,
            },
        ))
    }

    pub fn vstack(&mut self, top: NodeId, bottom: NodeId) -> Result<NodeId, NumericError> {
        let t = &self.nodes[top.0].value;
        let b = &self.nodes[bottom.0].value;
        if t.cols() != b.cols() {
            return Err(NumericError::Shape {
                op: "vstack",
                lhs: t.shape(),
                rhs: b.shape(),
            });
        }
        let mut data = Vec::with_capacity((t.rows() + b.rows()) * t.cols());
        data.extend_from_slice(t.data());
        data.extend_from_slice(b.data());
        let value = Matrix::from_vec(t.rows() + b.rows(), t.cols(), data)?;
        Ok(self.push(value, [Some(top), Some(bottom)], Op::VStack))
    }

    /// Rows `start..end` as a new matrix.
    pub fn slice_rows(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId, NumericError> {
        let xv = &self.nodes[x.0].value;
        if start > end || end > xv.rows() {
            return Err(NumericError::Contract(format!(
                "slice_rows {start}..{end} out of range for {} rows",
                xv.rows()
            )));
        }
        let cols = xv.cols();
        let value = Matrix::from_vec(
            end - start,
            cols,
            xv.data()[start * cols..end * cols].to_vec(),
        )?;
        Ok(self.push(value, [Some(x), None], Op::SliceRows { start }))
    }

    /// Build an `size x size` matrix from a 1 x S weight vector and an edge
    /// list; gradients flow back to the shared weight slots.
    pub fn scatter_edges(
        &mut self,
        weights: NodeId,
        entries: Vec<ScatterEntry>,
        size: usize,
    ) -> Result<NodeId, NumericError> {
        let w = &self.nodes[weights.0].value;
        if w.rows() != 1 {
            return Err(NumericError::Shape {
                op: "scatter_edges",
                lhs: w.shape(),
                rhs: (1, w.cols()),
            });
        }
        let slots = w.cols();
        let mut value = Matrix::zeros(size, size);
        for e in &entries {
            if e.slot >= slots || e.dst >= size || e.src >= size {
                return Err(NumericError::Contract(format!(
                    "scatter entry (slot {}, dst {}, src {}) out of range",
                    e.slot, e.dst, e.src
                )));
            }
            value.set(e.dst, e.src, e.coef * w.get(0, e.slot));
        }
        Ok(self.push(
            value,
            [Some(weights), None],
            Op::ScatterEdges { entries, size },
        ))
    }

    /// Row k of the result is the concatenation of rows `pairs[k].0` and
    /// `pairs[k].1` of `x`.
    pub fn concat_pair_rows(
        &mut self,
        x: NodeId,
        pairs: Vec<(usize, usize)>,
    ) -> Result<NodeId, NumericError> {
        let xv = &self.nodes[x.0].value;
        let (rows, cols) = xv.shape();
        let mut data = Vec::with_capacity(pairs.len() * 2 * cols);
        for &(i, j) in &pairs {
            if i >= rows || j >= rows {
                return Err(NumericError::Contract(format!(
                    "pair ({i}, {j}) out of range for {rows} rows"
                )));
            }
            data.extend_from_slice(xv.row(i));
            data.extend_from_slice(xv.row(j));
        }
        let value = Matrix::from_vec(pairs.len(), 2 * cols, data)?;
        Ok(self.push(value, [Some(x), None], Op::ConcatPairRows { pairs }))
    }

    /// Eq-style fully connected block: dropout(leaky_relu(x * theta + bias)).
    pub fn fc(
        &mut self,
        x: NodeId,
        theta: NodeId,
        bias: NodeId,
        slope: f64,
        rate: f64,
    ) -> Result<NodeId, NumericError> {
        let lin = self.matmul(x, theta)?;
        let lin = self.add_row_broadcast(lin, bias)?;
        let act = self.leaky_relu(lin, slope);
        self.dropout(act, rate)
    }

    /// Reverse-mode accumulation from a scalar loss node into every
    /// reachable parameter's gradient. Repeated calls without zeroing
    /// accumulate.
    pub fn backward(&self, loss: NodeId, params: &mut ParamSet) -> Result<(), NumericError> {
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.shape() != (1, 1) {
            return Err(NumericError::Contract(format!(
                "backward requires a 1x1 scalar loss, got {}x{}",
                loss_value.rows(),
                loss_value.cols()
            )));
        }
        let mut grads: Vec<Option<Matrix>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param(pid) => params.accumulate_grad(*pid, &g)?,
                Op::MatMul => {
                    let a = node.parents[0].unwrap();
                    let b = node.parents[1].unwrap();
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    let da = g.matmul(&bv.transpose())?;
                    let db = av.transpose().matmul(&g)?;
                    accumulate(&mut grads, a, da)?;
                    accumulate(&mut grads, b, db)?;
                }
                Op::Transpose => {
                    accumulate(&mut grads, node.parents[0].unwrap(), g.transpose())?;
                }
                Op::Add => {
                    accumulate(&mut grads, node.parents[0].unwrap(), g.clone())?;
                    accumulate(&mut grads, node.parents[1].unwrap(), g)?;
                }
                Op::AddRowBroadcast => {
                    let bias = node.parents[1].unwrap();
                    let mut db = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (acc, v) in db.row_mut(0).iter_mut().zip(g.row(r)) {
                            *acc += v;
                        }
                    }
                    accumulate(&mut grads, node.parents[0].unwrap(), g)?;
                    accumulate(&mut grads, bias, db)?;
                }
                Op::Scale(c) => {
                    accumulate(&mut grads, node.parents[0].unwrap(), g.scale(*c))?;
                }
                Op::Hadamard => {
                    let a = node.parents[0].unwrap();
                    let b = node.parents[1].unwrap();
                    let da = g.hadamard(&self.nodes[b.0].value)?;
                    let db = g.hadamard(&self.nodes[a.0].value)?;
                    accumulate(&mut grads, a, da)?;
                    accumulate(&mut grads, b, db)?;
                }
                Op::SumAll => {
                    let x = node.parents[0].unwrap();
                    let xv = &self.nodes[x.0].value;
                    let dx = Matrix::filled(xv.rows(), xv.cols(), g.get(0, 0));
                    accumulate(&mut grads, x, dx)?;
                }
                Op::LeakyRelu(slope) => {
                    let x = node.parents[0].unwrap();
                    let xv = &self.nodes[x.0].value;
                    let mut dx = g;
                    for (d, v) in dx.data_mut().iter_mut().zip(xv.data()) {
                        if *v <= 0.0 {
                            *d *= slope;
                        }
                    }
                    accumulate(&mut grads, x, dx)?;
                }
                Op::Dropout(mask) => {
                    let x = node.parents[0].unwrap();
                    let dx = match mask {
                        None => g,
                        Some(mask) => {
                            let mut dx = g;
                            for (d, m) in dx.data_mut().iter_mut().zip(mask) {
                                *d *= m;
                            }
                            dx
                        }
                    };
                    accumulate(&mut grads, x, dx)?;
                }
                Op::SoftmaxRows => {
                    let x = node.parents[0].unwrap();
                    let y = &node.value;
                    let mut dx = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                        for ((d, gv), yv) in
                            dx.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r))
                        {
                            *d = yv * (gv - dot);
                        }
                    }
                    accumulate(&mut grads, x, dx)?;
                }
                Op::CrossEntropy {
                    targets,
                    class_weights,
                } => {
                    let p = node.parents[0].unwrap();
                    let pv = &self.nodes[p.0].value;
                    let labeled = targets.iter().flatten().count().max(1) as f64;
                    let upstream = g.get(0, 0);
                    let mut dp = Matrix::zeros(pv.rows(), pv.cols());
                    for (r, t) in targets.iter().enumerate() {
                        if let Some(t) = t {
                            let w = class_weights.as_ref().map_or(1.0, |cw| cw[*t]);
                            dp.set(r, *t, -upstream * w / (labeled * pv.get(r, *t)));
                        }
                    }
                    accumulate(&mut grads, p, dp)?;
                }
                Op::SoftmaxCrossEntropy {
                    targets,
                    class_weights,
                    probs,
                } => {
                    let z = node.parents[0].unwrap();
                    let labeled = targets.iter().flatten().count().max(1) as f64;
                    let upstream = g.get(0, 0);
                    let mut dz = Matrix::zeros(probs.rows(), probs.cols());
                    for (r, t) in targets.iter().enumerate() {
                        if let Some(t) = t {
                            let w = class_weights.as_ref().map_or(1.0, |cw| cw[*t]);
                            let scale = upstream * w / labeled;
                            for (c, d) in dz.row_mut(r).iter_mut().enumerate() {
                                let y = if c == *t { 1.0 } else { 0.0 };
                                *d = scale * (probs.get(r, c) - y);
                            }
                        }
                    }
                    accumulate(&mut grads, z, dz)?;
                }
                Op::VStack => {
                    let top = node.parents[0].unwrap();
                    let bottom = node.parents[1].unwrap();
                    let tr = self.nodes[top.0].value.rows();
                    let cols = g.cols();
                    let dt = Matrix::from_vec(tr, cols, g.data()[..tr * cols].to_vec())?;
                    let db = Matrix::from_vec(
                        g.rows() - tr,
                        cols,
                        g.data()[tr * cols..].to_vec(),
                    )?;
                    accumulate(&mut grads, top, dt)?;
                    accumulate(&mut grads, bottom, db)?;
                }
                Op::SliceRows { start } => {
                    let x = node.parents[0].unwrap();
                    let xv = &self.nodes[x.0].value;
                    let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                    for r in 0..g.rows() {
                        for (d, v) in dx.row_mut(start + r).iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads, x, dx)?;
                }
                Op::ScatterEdges { entries, size: _ } => {
                    let w = node.parents[0].unwrap();
                    let wv = &self.nodes[w.0].value;
                    let mut dw = Matrix::zeros(1, wv.cols());
                    for e in entries {
                        let cur = dw.get(0, e.slot);
                        dw.set(0, e.slot, cur + e.coef * g.get(e.dst, e.src));
                    }
                    accumulate(&mut grads, w, dw)?;
                }
                Op::ConcatPairRows { pairs } => {
                    let x = node.parents[0].unwrap();
                    let xv = &self.nodes[x.0].value;
                    let cols = xv.cols();
                    let mut dx = Matrix::zeros(xv.rows(), cols);
                    for (k, &(i, j)) in pairs.iter().enumerate() {
                        let grow = g.row(k);
                        for (d, v) in dx.row_mut(i).iter_mut().zip(&grow[..cols]) {
                            *d += v;
                        }
                        for (d, v) in dx.row_mut(j).iter_mut().zip(&grow[cols..]) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads, x, dx)?;
                }
            }
        }
        Ok(())
    }
}

fn accumulate(
    grads: &mut [Option<Matrix>],
    id: NodeId,
    delta: Matrix,
) -> Result<(), NumericError> {
    match &mut grads[id.0] {
        Some(g) => g.add_assign(&delta),
        slot => {
            *slot = Some(delta);
            Ok(())
        }
    }
}

fn softmax_matrix(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

fn check_targets(
    x: &Matrix,
    targets: &[Option<usize>],
    class_weights: Option<&[f64]>,
) -> Result<(), NumericError> {
    if targets.len() != x.rows() {
        return Err(NumericError::Contract(format!(
            "{} targets for {} rows",
            targets.len(),
            x.rows()
        )));
    }
    if let Some(cw) = class_weights {
        if cw.len() != x.cols() {
            return Err(NumericError::Contract(format!(
                "{} class weights for {} classes",
                cw.len(),
                x.cols()
            )));
        }
    }
    for t in targets.iter().flatten() {
        if *t >= x.cols() {
            return Err(NumericError::Contract(format!(
                "target {} out of range for {} classes",
                t,
                x.cols()
            )));
        }
    }
    Ok(())
}
