//! Reverse-mode differentiation over matrix-level primitives.
//!
//! A forward pass records one node per primitive operation; `backward`
//! walks the tape once in reverse and accumulates parameter gradients.
//! All values are `Array2<f64>`; vectors live as 1 x n rows and scalars
//! as 1 x 1. A tape is owned by exactly one training step.

use ndarray::{Array2, Axis};

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param,
    /// C = A . B
    Matmul(NodeId, NodeId),
    /// C = A . B^T
    MatmulNT(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// Broadcast-add a 1 x n row vector to every row of A.
    AddRow(NodeId, NodeId),
    /// Add a 1 x n row vector to rows `from..to` of A.
    AddRowsRange(NodeId, NodeId, usize, usize),
    Scale(NodeId, f64),
    Relu(NodeId),
    /// Value gate x * 1[x > theta]; gradient passes as identity on the open side.
    JumpRelu(NodeId, f64),
    /// Row-wise softmax where column j of row i is masked out when j > i.
    CausalSoftmax(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    },
    SliceCols(NodeId, usize, usize),
    ConcatCols(Vec<NodeId>),
    /// Row i of the output is row ids[i] of the table node.
    GatherRows(NodeId, Vec<usize>),
    /// Scalar: mean over masked rows of -log softmax(logits_i)[target_i].
    MeanCeMasked {
        logits: NodeId,
        targets: Vec<usize>,
        mask: Vec<bool>,
    },
    /// Scalar: mean over all elements of (pred - target)^2.
    MseTo {
        pred: NodeId,
        target: Array2<f64>,
    },
    /// Scalar: mean of |x| over all elements.
    MeanAbs(NodeId),
    /// C = A + c * B, elementwise.
    AddScaled(NodeId, NodeId, f64),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

/// Recorded forward pass with a parameter registry.
///
/// Parameters are registered in caller order; `backward` returns one
/// gradient per registered parameter in that same order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<NodeId>,
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::with_capacity(256),
            params: Vec::new(),
        }
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id].value
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        id
    }

    fn child_needs_grad(&self, parents: &[NodeId]) -> bool {
        parents.iter().any(|&p| self.nodes[p].needs_grad)
    }

    pub fn input(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Input, false)
    }

    pub fn param(&mut self, value: Array2<f64>) -> NodeId {
        let id = self.push(value, Op::Param, true);
        self.params.push(id);
        id
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let op = Op::Matmul(a, b);
        let v = self.eval(&op);
        let ng = self.child_needs_grad(&[a, b]);
        self.push(v, op, ng)
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let op = Op::MatmulNT(a, b);
        let v = self.eval(&op);
        let ng = self.child_needs_grad(&[a, b]);
        self.push(v, op, ng)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let op = Op::Add(a, b);
        let v = self.eval(&op);
        let ng = self.child_needs_grad(&[a, b]);
        self.push(v, op, ng)
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let op = Op::AddRow(a, row);
        let v = self.eval(&op);
        let ng = self.child_needs_grad(&[a, row]);
        self.push(v, op, ng)
    }

    pub fn add_rows_range(&mut self, a: NodeId, row: NodeId, from: usize, to: usize) -> NodeId {
        let op = Op::AddRowsRange(a, row, from, to);
        let v = self.eval(&op);
        let ng = self.child_needs_grad(&[a, row]);
        self.push(v, op, ng)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let op = Op::Scale(a, c);
        let v = self.eval(&op);
        let ng = self.child_needs_grad(&[a]);
        self.push(v, op, ng)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let op = Op::Relu(a);
        let v = self.eval(&op);
        let ng = self.child_needs_grad(&[a]);
        self.push(v, op, ng)
    }

    pub fn jumprelu(&mut self, a: NodeId, theta: f64) -> NodeId {
        assert!(theta >= 0.0, "jumprelu threshold must be nonnegative");
        let op = Op::JumpRelu(a, theta);
        let v = self.eval(&op);
        let ng = self.child_needs_grad(&[a]);
        self.push(v, op, ng)
    }

    pub fn causal_softmax(&mut self, a: NodeId) -> NodeId {
        let op = Op::CausalSoftmax(a);
        let v = self.eval(&op);
        let ng = self.child_needs_grad(&[a]);
        self.push(v, op, ng)
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> NodeId {
        let op = Op::LayerNorm { x, gain, bias, eps };
        let v = self.eval(&op);
        let ng = self.child_needs_grad(&[x, gain, bias]);
        self.push(v, op, ng)
    }

    pub fn slice_cols(&mut self, a: NodeId, lo: usize, hi: usize) -> NodeId {
        let op = Op::SliceCols(a, lo, hi);
        let v = self.eval(&op);
        let ng = self.child_needs_grad(&[a]);
        self.push(v, op, ng)
    }

    pub fn concat_cols(&mut self, parts: Vec<NodeId>) -> NodeId {
        assert!(!parts.is_empty(), "concat_cols needs at least one part");
        let ng = self.child_needs_grad(&parts);
        let op = Op::ConcatCols(parts);
        let v = self.eval(&op);
        self.push(v, op, ng)
    }

    pub fn gather_rows(&mut self, table: NodeId, ids: Vec<usize>) -> NodeId {
        let op = Op::GatherRows(table, ids);
        let v = self.eval(&op);
        let ng = self.child_needs_grad(&[table]);
        self.push(v, op, ng)
    }

    pub fn mean_ce_masked(
        &mut self,
        logits: NodeId,
        targets: Vec<usize>,
        mask: Vec<bool>,
    ) -> NodeId {
        assert_eq!(targets.len(), self.nodes[logits].value.nrows());
        assert_eq!(mask.len(), targets.len());
        assert!(mask.iter().any(|&m| m), "loss mask must select a position");
        let op = Op::MeanCeMasked {
            logits,
            targets,
            mask,
        };
        let v = self.eval(&op);
        let ng = self.child_needs_grad(&[logits]);
        self.push(v, op, ng)
    }

    pub fn mse_to(&mut self, pred: NodeId, target: Array2<f64>) -> NodeId {
        assert_eq!(self.nodes[pred].value.dim(), target.dim());
        let op = Op::MseTo { pred, target };
        let v = self.eval(&op);
        let ng = self.child_needs_grad(&[pred]);
        self.push(v, op, ng)
    }

    pub fn mean_abs(&mut self, a: NodeId) -> NodeId {
        let op = Op::MeanAbs(a);
        let v = self.eval(&op);
        let ng = self.child_needs_grad(&[a]);
        self.push(v, op, ng)
    }

    pub fn add_scaled(&mut self, a: NodeId, b: NodeId, c: f64) -> NodeId {
        let op = Op::AddScaled(a, b, c);
        let v = self.eval(&op);
        let ng = self.child_needs_grad(&[a, b]);
        self.push(v, op, ng)
    }

    fn eval(&self, op: &Op) -> Array2<f64> {
        self.eval_with(op, |id| &self.nodes[id].value)
    }

    fn eval_with<'a, F>(&'a self, op: &Op, val: F) -> Array2<f64>
    where
        F: Fn(NodeId) -> &'a Array2<f64>,
    {
        match op {
            Op::Input | Op::Param => unreachable!("leaves are never re-evaluated"),
            Op::Matmul(a, b) => val(*a).dot(val(*b)),
            Op::MatmulNT(a, b) => val(*a).dot(&val(*b).t()),
            Op::Add(a, b) => val(*a) + val(*b),
            Op::AddRow(a, row) => {
                let r = val(*row).row(0).to_owned();
                val(*a) + &r
            }
            Op::AddRowsRange(a, row, from, to) => {
                let mut out = val(*a).clone();
                let r = val(*row).row(0).to_owned();
                for i in *from..(*to).min(out.nrows()) {
                    let mut dst = out.row_mut(i);
                    dst += &r;
                }
                out
            }
            Op::Scale(a, c) => val(*a) * *c,
            Op::Relu(a) => val(*a).mapv(|v| v.max(0.0)),
            Op::JumpRelu(a, theta) => {
                let th = *theta;
                val(*a).mapv(|v| if v > th { v } else { 0.0 })
            }
            Op::CausalSoftmax(a) => {
                let x = val(*a);
                let mut out = Array2::zeros(x.dim());
                for i in 0..x.nrows() {
                    let allowed = i + 1;
                    let row = x.row(i);
                    let max = row
                        .iter()
                        .take(allowed)
                        .cloned()
                        .fold(f64::NEG_INFINITY, f64::max);
                    let mut denom = 0.0;
                    for j in 0..allowed {
                        denom += (row[j] - max).exp();
                    }
                    for j in 0..allowed {
                        out[[i, j]] = (row[j] - max).exp() / denom;
                    }
                }
                out
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let xv = val(*x);
                let g = val(*gain).row(0).to_owned();
                let b = val(*bias).row(0).to_owned();
                let n = xv.ncols() as f64;
                let mut out = Array2::zeros(xv.dim());
                for i in 0..xv.nrows() {
                    let row = xv.row(i);
                    let mean = row.sum() / n;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    let inv = 1.0 / (var + eps).sqrt();
                    for j in 0..xv.ncols() {
                        out[[i, j]] = (row[j] - mean) * inv * g[j] + b[j];
                    }
                }
                out
            }
            Op::SliceCols(a, lo, hi) => val(*a).slice(ndarray::s![.., *lo..*hi]).to_owned(),
            Op::ConcatCols(parts) => {
                let views: Vec<_> = parts.iter().map(|&p| val(p).view()).collect();
                ndarray::concatenate(Axis(1), &views).expect("concat shapes")
            }
            Op::GatherRows(table, ids) => {
                let t = val(*table);
                let mut out = Array2::zeros((ids.len(), t.ncols()));
                for (i, &id) in ids.iter().enumerate() {
                    out.row_mut(i).assign(&t.row(id));
                }
                out
            }
            Op::MeanCeMasked {
                logits,
                targets,
                mask,
            } => {
                let l = val(*logits);
                let mut total = 0.0;
                let mut count = 0usize;
                for i in 0..l.nrows() {
                    if !mask[i] {
                        continue;
                    }
                    let row = l.row(i);
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
                    total += lse - row[targets[i]];
                    count += 1;
                }
                Array2::from_elem((1, 1), total / count as f64)
            }
            Op::MseTo { pred, target } => {
                let p = val(*pred);
                let diff = p - target;
                let numel = diff.len() as f64;
                Array2::from_elem((1, 1), diff.iter().map(|d| d * d).sum::<f64>() / numel)
            }
            Op::MeanAbs(a) => {
                let v = val(*a);
                Array2::from_elem((1, 1), v.iter().map(|x| x.abs()).sum::<f64>() / v.len() as f64)
            }
            Op::AddScaled(a, b, c) => val(*a) + &(val(*b) * *c),
        }
    }

    /// Recompute every derived node from the recorded leaves and check the
    /// results against the stored values bit-for-bit.
    pub fn replay_matches(&self) -> bool {
        let mut replayed: Vec<Array2<f64>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match node.op {
                Op::Input | Op::Param => node.value.clone(),
                ref op => self.eval_with(op, |id| &replayed[id]),
            };
            replayed.push(v);
        }
        self.nodes
            .iter()
            .zip(replayed.iter())
            .all(|(n, r)| n.value.dim() == r.dim() && n.value.iter().zip(r.iter()).all(|(a, b)| a.to_bits() == b.to_bits()))
    }

    /// Reverse sweep from a scalar loss node. Returns one gradient per
    /// registered parameter, in registration order.
    pub fn backward(&self, loss: NodeId) -> Vec<Array2<f64>> {
        assert_eq!(
            self.nodes[loss].value.dim(),
            (1, 1),
            "backward expects a scalar loss node"
        );
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(Array2::from_elem((1, 1), 1.0));

        for id in (0..=loss).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[id].needs_grad {
                continue;
            }
            match &self.nodes[id].op {
                Op::Input | Op::Param => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Matmul(a, b) => {
                    if self.nodes[*a].needs_grad {
                        let da = g.dot(&self.nodes[*b].value.t());
                        accumulate(&mut grads, *a, da);
                    }
                    if self.nodes[*b].needs_grad {
                        let db = self.nodes[*a].value.t().dot(&g);
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::MatmulNT(a, b) => {
                    if self.nodes[*a].needs_grad {
                        let da = g.dot(&self.nodes[*b].value);
                        accumulate(&mut grads, *a, da);
                    }
                    if self.nodes[*b].needs_grad {
                        let db = g.t().dot(&self.nodes[*a].value);
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::Add(a, b) => {
                    if self.nodes[*a].needs_grad {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.nodes[*b].needs_grad {
                        accumulate(&mut grads, *b, g.clone());
                    }
                }
                Op::AddRow(a, row) => {
                    if self.nodes[*a].needs_grad {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.nodes[*row].needs_grad {
                        let sum = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut grads, *row, sum);
                    }
                }
                Op::AddRowsRange(a, row, from, to) => {
                    if self.nodes[*a].needs_grad {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.nodes[*row].needs_grad {
                        let mut sum = Array2::zeros((1, g.ncols()));
                        for i in *from..(*to).min(g.nrows()) {
                            let mut dst = sum.row_mut(0);
                            dst += &g.row(i);
                        }
                        accumulate(&mut grads, *row, sum);
                    }
                }
                Op::Scale(a, c) => {
                    if self.nodes[*a].needs_grad {
                        accumulate(&mut grads, *a, &g * *c);
                    }
                }
                Op::Relu(a) => {
                    if self.nodes[*a].needs_grad {
                        let src = &self.nodes[*a].value;
                        let mut da = g.clone();
                        da.zip_mut_with(src, |gv, &xv| {
                            if xv <= 0.0 {
                                *gv = 0.0;
                            }
                        });
                        accumulate(&mut grads, *a, da);
                    }
                }
                Op::JumpRelu(a, theta) => {
                    if self.nodes[*a].needs_grad {
                        let src = &self.nodes[*a].value;
                        let th = *theta;
                        let mut da = g.clone();
                        da.zip_mut_with(src, |gv, &xv| {
                            if xv <= th {
                                *gv = 0.0;
                            }
                        });
                        accumulate(&mut grads, *a, da);
                    }
                }
                Op::CausalSoftmax(a) => {
                    if self.nodes[*a].needs_grad {
                        let y = &self.nodes[id].value;
                        let mut da = Array2::zeros(y.dim());
                        for i in 0..y.nrows() {
                            let allowed = i + 1;
                            let mut dot = 0.0;
                            for j in 0..allowed {
                                dot += g[[i, j]] * y[[i, j]];
                            }
                            for j in 0..allowed {
                                da[[i, j]] = y[[i, j]] * (g[[i, j]] - dot);
                            }
                        }
                        accumulate(&mut grads, *a, da);
                    }
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    let xv = &self.nodes[*x].value;
                    let gv = self.nodes[*gain].value.row(0).to_owned();
                    let n = xv.ncols() as f64;
                    let mut dx = Array2::zeros(xv.dim());
                    let mut dgain = Array2::zeros((1, xv.ncols()));
                    let mut dbias = Array2::zeros((1, xv.ncols()));
                    for i in 0..xv.nrows() {
                        let row = xv.row(i);
                        let mean = row.sum() / n;
                        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                        let inv = 1.0 / (var + eps).sqrt();
                        // dxhat and its two row sums
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        let mut dxhat = vec![0.0; xv.ncols()];
                        for j in 0..xv.ncols() {
                            let xhat = (row[j] - mean) * inv;
                            let dh = g[[i, j]] * gv[j];
                            dxhat[j] = dh;
                            sum_dxhat += dh;
                            sum_dxhat_xhat += dh * xhat;
                            dgain[[0, j]] += g[[i, j]] * xhat;
                            dbias[[0, j]] += g[[i, j]];
                        }
                        for j in 0..xv.ncols() {
                            let xhat = (row[j] - mean) * inv;
                            dx[[i, j]] = inv / n
                                * (n * dxhat[j] - sum_dxhat - xhat * sum_dxhat_xhat);
                        }
                    }
                    if self.nodes[*x].needs_grad {
                        accumulate(&mut grads, *x, dx);
                    }
                    if self.nodes[*gain].needs_grad {
                        accumulate(&mut grads, *gain, dgain);
                    }
                    if self.nodes[*bias].needs_grad {
                        accumulate(&mut grads, *bias, dbias);
                    }
                }
                Op::SliceCols(a, lo, _hi) => {
                    if self.nodes[*a].needs_grad {
                        let mut da = Array2::zeros(self.nodes[*a].value.dim());
                        let mut dst = da.slice_mut(ndarray::s![.., *lo..*lo + g.ncols()]);
                        dst += &g;
                        accumulate(&mut grads, *a, da);
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.nodes[p].value.ncols();
                        if self.nodes[p].needs_grad {
                            let slice = g.slice(ndarray::s![.., offset..offset + w]).to_owned();
                            accumulate(&mut grads, p, slice);
                        }
                        offset += w;
                    }
                }
                Op::GatherRows(table, ids) => {
                    if self.nodes[*table].needs_grad {
                        let mut dt = Array2::zeros(self.nodes[*table].value.dim());
                        for (i, &rid) in ids.iter().enumerate() {
                            let mut dst = dt.row_mut(rid);
                            dst += &g.row(i);
                        }
                        accumulate(&mut grads, *table, dt);
                    }
                }
                Op::MeanCeMasked {
                    logits,
                    targets,
                    mask,
                } => {
                    if self.nodes[*logits].needs_grad {
                        let l = &self.nodes[*logits].value;
                        let count = mask.iter().filter(|&&m| m).count() as f64;
                        let scale = g[[0, 0]] / count;
                        let mut dl = Array2::zeros(l.dim());
                        for i in 0..l.nrows() {
                            if !mask[i] {
                                continue;
                            }
                            let row = l.row(i);
                            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                            let denom: f64 = row.iter().map(|&v| (v - max).exp()).sum();
                            for j in 0..l.ncols() {
                                let p = (row[j] - max).exp() / denom;
                                dl[[i, j]] = scale * (p - if j == targets[i] { 1.0 } else { 0.0 });
                            }
                        }
                        accumulate(&mut grads, *logits, dl);
                    }
                }
                Op::MseTo { pred, target } => {
                    if self.nodes[*pred].needs_grad {
                        let p = &self.nodes[*pred].value;
                        let numel = p.len() as f64;
                        let dp = (p - target) * (2.0 * g[[0, 0]] / numel);
                        accumulate(&mut grads, *pred, dp);
                    }
                }
                Op::MeanAbs(a) => {
                    if self.nodes[*a].needs_grad {
                        let v = &self.nodes[*a].value;
                        let numel = v.len() as f64;
                        let scale = g[[0, 0]] / numel;
                        let da = v.mapv(|x| {
                            if x > 0.0 {
                                scale
                            } else if x < 0.0 {
                                -scale
                            } else {
                                0.0
                            }
                        });
                        accumulate(&mut grads, *a, da);
                    }
                }
                Op::AddScaled(a, b, c) => {
                    if self.nodes[*a].needs_grad {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.nodes[*b].needs_grad {
                        accumulate(&mut grads, *b, &g * *c);
                    }
                }
            }
        }

        self.params
            .iter()
            .map(|&p| match grads[p].take() {
                Some(g) => g,
                None => Array2::zeros(self.nodes[p].value.dim()),
            })
            .collect()
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], id: NodeId, delta: Array2<f64>) {
    match &mut grads[id] {
        Some(g) => *g += &delta,
        slot @ None => *slot = Some(delta),
    }
}
