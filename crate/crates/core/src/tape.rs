//! Reverse-mode automatic differentiation on a define-by-run tape.
//!
//! Every operation appends a node holding its output values and enough saved
//! state for the backward rule; `backward` replays the records in reverse.
//! The tape is rebuilt for every forward pass and dropped (or cleared)
//! afterwards, which releases all saved activations.

use crate::error::{Error, Result};
use crate::kernel;
use crate::posenc::RotaryTables;
use crate::tensor::{Mask, Tensor};

/// Epsilon added to the variance inside layer normalization.
pub const LAYERNORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
pub type NodeId = usize;

#[derive(Debug)]
enum Op {
    Leaf,
    /// C = A·B
    MatMul { a: NodeId, b: NodeId },
    /// C = A·Bᵀ
    MatMulNt { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    /// [R×C] + [C], broadcast over rows
    AddRowVec { a: NodeId, v: NodeId },
    Scale { a: NodeId, c: f64 },
    /// Add a constant (non-differentiated) matrix.
    AddConst { a: NodeId },
    /// Row softmax with explicit masking; output saved in `data`.
    SoftmaxRows { a: NodeId, mask: Option<Mask> },
    /// Per-row normalization; saved = (mean, inv_std) per row.
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
    },
    Embedding { table: NodeId, ids: Vec<usize> },
    /// Mean of -log p(target) over rows; saved = softmax probabilities.
    CrossEntropy { logits: NodeId, targets: Vec<usize> },
    Gelu { a: NodeId },
    /// Pairwise rotation; saved = cos rows then sin rows (L × dh/2 each).
    Rotary { a: NodeId },
    ConcatCols { parts: Vec<(NodeId, usize)> },
    SliceRows { a: NodeId, start: usize },
    SumAll { a: NodeId },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    needs_grad: bool,
    op: Op,
    saved: Vec<f64>,
}

/// Ordered record of executed operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_run: bool,
}

fn dims2(shape: &[usize], op: &'static str) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        other => Err(Error::Dimension {
            op,
            msg: format!("expected a 2-d tensor, got {other:?}"),
        }),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop every node and its saved activations.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.backward_run = false;
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].data
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    /// Gradient of a node after `backward`; `None` when the node does not
    /// participate in differentiation.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id].grad.as_deref()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, needs_grad: bool, op: Op) -> NodeId {
        self.push_saved(shape, data, needs_grad, op, Vec::new())
    }

    fn push_saved(
        &mut self,
        shape: Vec<usize>,
        data: Vec<f64>,
        needs_grad: bool,
        op: Op,
        saved: Vec<f64>,
    ) -> NodeId {
        self.nodes.push(Node {
            shape,
            data,
            grad: None,
            needs_grad,
            op,
            saved,
        });
        self.nodes.len() - 1
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    /// Record a tensor as a leaf, copying its values.
    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            t.requires_grad(),
            Op::Leaf,
        )
    }

    /// Record a non-differentiated constant.
    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.push(shape.to_vec(), data, false, Op::Leaf)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = dims2(self.shape(a), "matmul")?;
        let (kb, n) = dims2(self.shape(b), "matmul")?;
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        kernel::matmul_acc(&mut out, &self.nodes[a].data, &self.nodes[b].data, m, ka, n);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(vec![m, n], out, ng, Op::MatMul { a, b }))
    }

    /// C = A·Bᵀ for A `[M×K]`, B `[N×K]`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = dims2(self.shape(a), "matmul_nt")?;
        let (n, kb) = dims2(self.shape(b), "matmul_nt")?;
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut bt = vec![0.0; ka * n];
        kernel::transpose_into(&mut bt, &self.nodes[b].data, n, ka);
        let mut out = vec![0.0; m * n];
        kernel::matmul_acc(&mut out, &self.nodes[a].data, &bt, m, ka, n);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(vec![m, n], out, ng, Op::MatMulNt { a, b }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data = self.nodes[a]
            .data
            .iter()
            .zip(&self.nodes[b].data)
            .map(|(x, y)| x + y)
            .collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(self.nodes[a].shape.clone(), data, ng, Op::Add { a, b }))
    }

    pub fn add_row_vec(&mut self, a: NodeId, v: NodeId) -> Result<NodeId> {
        let (_, c) = dims2(self.shape(a), "add_row_vec")?;
        if self.shape(v) != [c] {
            return Err(Error::ShapeMismatch {
                op: "add_row_vec",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(v).to_vec(),
            });
        }
        let vd = &self.nodes[v].data;
        let data = self.nodes[a]
            .data
            .chunks_exact(c)
            .flat_map(|row| row.iter().zip(vd).map(|(x, y)| x + y))
            .collect();
        let ng = self.needs(a) || self.needs(v);
        Ok(self.push(self.nodes[a].shape.clone(), data, ng, Op::AddRowVec { a, v }))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let data = self.nodes[a].data.iter().map(|x| x * c).collect();
        let ng = self.needs(a);
        self.push(self.nodes[a].shape.clone(), data, ng, Op::Scale { a, c })
    }

    /// Add a constant matrix (e.g. a temporal-bias slice) to `a`.
    pub fn add_const(&mut self, a: NodeId, m: &[f64]) -> Result<NodeId> {
        if self.nodes[a].data.len() != m.len() {
            return Err(Error::Dimension {
                op: "add_const",
                msg: format!(
                    "constant has {} values, operand shape {:?}",
                    m.len(),
                    self.shape(a)
                ),
            });
        }
        let data = self.nodes[a].data.iter().zip(m).map(|(x, y)| x + y).collect();
        let ng = self.needs(a);
        Ok(self.push(self.nodes[a].shape.clone(), data, ng, Op::AddConst { a }))
    }

    /// Row softmax with explicit masking; masked entries become exact zeros.
    pub fn softmax_rows(&mut self, a: NodeId, mask: Option<&Mask>) -> Result<NodeId> {
        let (r, c) = dims2(self.shape(a), "softmax_rows")?;
        if let Some(m) = mask {
            if m.len() != r || c != r {
                return Err(Error::Dimension {
                    op: "softmax_rows",
                    msg: format!("mask of extent {} on a {r}×{c} matrix", m.len()),
                });
            }
        }
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let (s, e) = match mask {
                Some(m) => m.row_range(i),
                None => (0, c),
            };
            let row = &self.nodes[a].data[i * c..(i + 1) * c];
            if !kernel::softmax_row_range(&mut out[i * c..(i + 1) * c], row, s, e.min(c)) {
                return Err(Error::FullyMaskedRow { row: i });
            }
        }
        let ng = self.needs(a);
        Ok(self.push(
            vec![r, c],
            out,
            ng,
            Op::SoftmaxRows {
                a,
                mask: mask.cloned(),
            },
        ))
    }

    /// `softmax(logits / scale)` per row, with masking. `scale` must be
    /// positive.
    pub fn scaled_softmax_rows(
        &mut self,
        logits: NodeId,
        scale: f64,
        mask: Option<&Mask>,
    ) -> Result<NodeId> {
        if !(scale > 0.0) {
            return Err(Error::Dimension {
                op: "scaled_softmax_rows",
                msg: format!("scale must be positive, got {scale}"),
            });
        }
        let scaled = self.scale(logits, 1.0 / scale);
        self.softmax_rows(scaled, mask)
    }

    /// Per-vector zero-mean/unit-variance normalization over the last
    /// extent, then an affine gain and bias.
    pub fn layernorm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or(Error::Dimension {
            op: "layernorm",
            msg: "input has rank 0".into(),
        })?;
        if d == 0 {
            return Err(Error::Dimension {
                op: "layernorm",
                msg: "normalized extent d = 0".into(),
            });
        }
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::ShapeMismatch {
                op: "layernorm",
                lhs: self.shape(gain).to_vec(),
                rhs: vec![d],
            });
        }
        let rows = self.nodes[x].data.len() / d;
        let mut out = vec![0.0; rows * d];
        let mut stats = Vec::with_capacity(2 * rows);
        for i in 0..rows {
            let (mean, inv_std) = kernel::layernorm_row(
                &mut out[i * d..(i + 1) * d],
                &self.nodes[x].data[i * d..(i + 1) * d],
                &self.nodes[gain].data,
                &self.nodes[bias].data,
                LAYERNORM_EPS,
            );
            stats.push(mean);
            stats.push(inv_std);
        }
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push_saved(shape, out, ng, Op::LayerNorm { x, gain, bias }, stats))
    }

    /// Row gather from an embedding table; backward scatter-adds.
    pub fn embedding_lookup(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (v, d) = dims2(self.shape(table), "embedding_lookup")?;
        for (position, &id) in ids.iter().enumerate() {
            if id >= v {
                return Err(Error::IndexOutOfRange {
                    position,
                    id,
                    vocab: v,
                });
            }
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(&self.nodes[table].data[id * d..(id + 1) * d]);
        }
        let ng = self.needs(table);
        Ok(self.push(
            vec![ids.len(), d],
            data,
            ng,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Mean over positions of -log p(target), via log-sum-exp.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let (l, v) = dims2(self.shape(logits), "cross_entropy")?;
        if targets.is_empty() {
            return Err(Error::EmptyTargets);
        }
        if targets.len() != l {
            return Err(Error::Dimension {
                op: "cross_entropy",
                msg: format!("{l} logit rows but {} targets", targets.len()),
            });
        }
        for (position, &t) in targets.iter().enumerate() {
            if t >= v {
                return Err(Error::IndexOutOfRange {
                    position,
                    id: t,
                    vocab: v,
                });
            }
        }
        let mut probs = vec![0.0; l * v];
        let mut loss = 0.0f64;
        for i in 0..l {
            let row = &self.nodes[logits].data[i * v..(i + 1) * v];
            loss -= kernel::log_prob_of(row, targets[i]);
            // full softmax saved for the backward rule
            kernel::softmax_row_range(&mut probs[i * v..(i + 1) * v], row, 0, v);
        }
        loss /= l as f64;
        let ng = self.needs(logits);
        Ok(self.push_saved(
            vec![],
            vec![loss],
            ng,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            probs,
        ))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let data = self.nodes[a].data.iter().map(|&x| kernel::gelu(x)).collect();
        let ng = self.needs(a);
        self.push(self.nodes[a].shape.clone(), data, ng, Op::Gelu { a })
    }

    /// Rotate each row's channel pairs by its position's angles.
    pub fn rotary(
        &mut self,
        a: NodeId,
        tables: &RotaryTables,
        positions: &[usize],
    ) -> Result<NodeId> {
        let (l, dh) = dims2(self.shape(a), "rotary")?;
        if dh % 2 != 0 {
            return Err(Error::OddWidth {
                what: "rotary head width",
                value: dh,
            });
        }
        if dh != tables.dh || positions.len() != l {
            return Err(Error::Dimension {
                op: "rotary",
                msg: format!(
                    "input {l}×{dh}, tables dh={}, {} positions",
                    tables.dh,
                    positions.len()
                ),
            });
        }
        if positions.iter().any(|&p| p >= tables.len) {
            return Err(Error::LengthExceedsBias {
                len: positions.iter().copied().max().unwrap() + 1,
                table: tables.len,
            });
        }
        let half = dh / 2;
        let mut data = self.nodes[a].data.clone();
        let mut saved = Vec::with_capacity(2 * l * half);
        for (m, row) in data.chunks_exact_mut(dh).enumerate() {
            tables.rotate_row(row, positions[m]);
            saved.extend_from_slice(&tables.cos[positions[m] * half..(positions[m] + 1) * half]);
        }
        for &p in positions {
            saved.extend_from_slice(&tables.sin[p * half..(p + 1) * half]);
        }
        let ng = self.needs(a);
        Ok(self.push_saved(vec![l, dh], data, ng, Op::Rotary { a }, saved))
    }

    /// Concatenate 2-d nodes along columns.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        debug_assert!(!parts.is_empty());
        let (rows, _) = dims2(self.shape(parts[0]), "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0usize;
        for &p in parts {
            let (r, c) = dims2(self.shape(p), "concat_cols")?;
            if r != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            widths.push(c);
            total += c;
        }
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &c) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.nodes[p].data[i * c..(i + 1) * c]);
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        let parts = parts.iter().copied().zip(widths).collect();
        Ok(self.push(vec![rows, total], data, ng, Op::ConcatCols { parts }))
    }

    /// Take `rows` consecutive rows starting at `start`.
    pub fn slice_rows(&mut self, a: NodeId, start: usize, rows: usize) -> Result<NodeId> {
        let (r, c) = dims2(self.shape(a), "slice_rows")?;
        if start + rows > r {
            return Err(Error::Dimension {
                op: "slice_rows",
                msg: format!("rows {start}..{} of a {r}-row matrix", start + rows),
            });
        }
        let data = self.nodes[a].data[start * c..(start + rows) * c].to_vec();
        let ng = self.needs(a);
        Ok(self.push(vec![rows, c], data, ng, Op::SliceRows { a, start }))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.nodes[a].data.iter().sum();
        let ng = self.needs(a);
        self.push(vec![], vec![s], ng, Op::SumAll { a })
    }

    /// Reverse replay: accumulate gradients for every participating node
    /// reachable from the scalar `loss`. Erroring on a second call guards
    /// against double accumulation on one forward pass.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.backward_run {
            return Err(Error::BackwardAlreadyRun);
        }
        if self.nodes[loss].data.len() != 1 {
            return Err(Error::NotScalar {
                shape: self.nodes[loss].shape.clone(),
            });
        }
        self.backward_run = true;
        for node in &mut self.nodes {
            if node.needs_grad {
                node.grad = Some(vec![0.0; node.data.len()]);
            }
        }
        if let Some(g) = &mut self.nodes[loss].grad {
            g[0] = 1.0;
        } else {
            // loss does not depend on any differentiable leaf
            return Ok(());
        }
        for id in (0..=loss).rev() {
            if !self.nodes[id].needs_grad || self.nodes[id].grad.is_none() {
                continue;
            }
            self.backprop_node(id);
        }
        Ok(())
    }

    fn take_grad(&mut self, id: NodeId) -> Vec<f64> {
        self.nodes[id].grad.take().expect("grad present")
    }

    fn put_grad(&mut self, id: NodeId, g: Vec<f64>) {
        self.nodes[id].grad = Some(g);
    }

    fn add_into_grad(&mut self, id: NodeId, delta: &[f64]) {
        if !self.nodes[id].needs_grad {
            return;
        }
        let g = self.nodes[id].grad.as_mut().expect("grad allocated");
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
    }

    fn backprop_node(&mut self, id: NodeId) {
        // Temporarily move the upstream gradient out to appease borrows.
        let up = self.take_grad(id);
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (a, b) = (*a, *b);
                let (m, k) = dims2(&self.nodes[a].shape, "matmul").unwrap();
                let n = self.nodes[b].shape[1];
                if self.needs(a) {
                    // dA += dC·Bᵀ
                    let mut bt = vec![0.0; k * n];
                    kernel::transpose_into(&mut bt, &self.nodes[b].data, k, n);
                    let mut da = vec![0.0; m * k];
                    kernel::matmul_acc(&mut da, &up, &bt, m, n, k);
                    self.add_into_grad(a, &da);
                }
                if self.needs(b) {
                    // dB += Aᵀ·dC
                    let mut db = vec![0.0; k * n];
                    kernel::matmul_tn_acc(&mut db, &self.nodes[a].data, &up, m, k, n);
                    self.add_into_grad(b, &db);
                }
            }
            Op::MatMulNt { a, b } => {
                let (a, b) = (*a, *b);
                let (m, k) = dims2(&self.nodes[a].shape, "matmul_nt").unwrap();
                let n = self.nodes[b].shape[0];
                if self.needs(a) {
                    // dA += dC·B
                    let mut da = vec![0.0; m * k];
                    kernel::matmul_acc(&mut da, &up, &self.nodes[b].data, m, n, k);
                    self.add_into_grad(a, &da);
                }
                if self.needs(b) {
                    // dB += dCᵀ·A
                    let mut db = vec![0.0; n * k];
                    kernel::matmul_tn_acc(&mut db, &up, &self.nodes[a].data, m, n, k);
                    self.add_into_grad(b, &db);
                }
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                self.add_into_grad(a, &up);
                self.add_into_grad(b, &up);
            }
            Op::AddRowVec { a, v } => {
                let (a, v) = (*a, *v);
                let c = self.nodes[v].data.len();
                self.add_into_grad(a, &up);
                if self.needs(v) {
                    let mut dv = vec![0.0; c];
                    for row in up.chunks_exact(c) {
                        for (dj, rj) in dv.iter_mut().zip(row) {
                            *dj += rj;
                        }
                    }
                    self.add_into_grad(v, &dv);
                }
            }
            Op::Scale { a, c } => {
                let (a, c) = (*a, *c);
                let da: Vec<f64> = up.iter().map(|g| g * c).collect();
                self.add_into_grad(a, &da);
            }
            Op::AddConst { a } => {
                let a = *a;
                self.add_into_grad(a, &up);
            }
            Op::SoftmaxRows { a, mask } => {
                let a = *a;
                let mask = mask.clone();
                let (r, c) = dims2(&self.nodes[id].shape, "softmax_rows").unwrap();
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    let (s, e) = match &mask {
                        Some(m) => m.row_range(i),
                        None => (0, c),
                    };
                    let e = e.min(c);
                    let y = &self.nodes[id].data[i * c..(i + 1) * c];
                    let gy = &up[i * c..(i + 1) * c];
                    let mut inner = 0.0f64;
                    for j in s..e {
                        inner = gy[j].mul_add(y[j], inner);
                    }
                    for j in s..e {
                        da[i * c + j] = y[j] * (gy[j] - inner);
                    }
                }
                self.add_into_grad(a, &da);
            }
            Op::LayerNorm { x, gain, bias } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let d = *self.nodes[id].shape.last().unwrap();
                let rows = self.nodes[id].data.len() / d;
                let mut dx = vec![0.0; rows * d];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                for i in 0..rows {
                    let mean = self.nodes[id].saved[2 * i];
                    let inv_std = self.nodes[id].saved[2 * i + 1];
                    let xr = &self.nodes[x].data[i * d..(i + 1) * d];
                    let g = &self.nodes[gain].data;
                    let gy = &up[i * d..(i + 1) * d];
                    let mut m1 = 0.0f64; // mean of gain-scaled upstream
                    let mut m2 = 0.0f64; // mean of (gain-scaled upstream)·x̂
                    for j in 0..d {
                        let xhat = (xr[j] - mean) * inv_std;
                        let t = gy[j] * g[j];
                        m1 += t;
                        m2 += t * xhat;
                        dgain[j] += gy[j] * xhat;
                        dbias[j] += gy[j];
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    for j in 0..d {
                        let xhat = (xr[j] - mean) * inv_std;
                        dx[i * d + j] = inv_std * (gy[j] * g[j] - m1 - xhat * m2);
                    }
                }
                self.add_into_grad(x, &dx);
                self.add_into_grad(gain, &dgain);
                self.add_into_grad(bias, &dbias);
            }
            Op::Embedding { table, ids } => {
                let table = *table;
                let ids = ids.clone();
                if self.needs(table) {
                    let d = self.nodes[table].shape[1];
                    let mut dt = vec![0.0; self.nodes[table].data.len()];
                    for (row, &id) in ids.iter().enumerate() {
                        let src = &up[row * d..(row + 1) * d];
                        let dst = &mut dt[id * d..(id + 1) * d];
                        for (g, s) in dst.iter_mut().zip(src) {
                            *g += s;
                        }
                    }
                    self.add_into_grad(table, &dt);
                }
            }
            Op::CrossEntropy { logits, targets } => {
                let logits = *logits;
                let targets = targets.clone();
                if self.needs(logits) {
                    let l = targets.len();
                    let v = self.nodes[logits].shape[1];
                    let scale = up[0] / l as f64;
                    let mut dl = self.nodes[id].saved.clone();
                    for (i, &t) in targets.iter().enumerate() {
                        dl[i * v + t] -= 1.0;
                    }
                    for g in dl.iter_mut() {
                        *g *= scale;
                    }
                    self.add_into_grad(logits, &dl);
                }
            }
            Op::Gelu { a } => {
                let a = *a;
                let da: Vec<f64> = self.nodes[a]
                    .data
                    .iter()
                    .zip(&up)
                    .map(|(&x, g)| kernel::gelu_deriv(x) * g)
                    .collect();
                self.add_into_grad(a, &da);
            }
            Op::Rotary { a } => {
                let a = *a;
                // gradient of a rotation is the inverse rotation
                let (l, dh) = dims2(&self.nodes[id].shape, "rotary").unwrap();
                let half = dh / 2;
                let mut da = up.clone();
                for (m, row) in da.chunks_exact_mut(dh).enumerate() {
                    let cos = &self.nodes[id].saved[m * half..(m + 1) * half];
                    let sin = &self.nodes[id].saved[l * half + m * half..l * half + (m + 1) * half];
                    for i in 0..half {
                        let g0 = row[2 * i];
                        let g1 = row[2 * i + 1];
                        row[2 * i] = g0 * cos[i] + g1 * sin[i];
                        row[2 * i + 1] = -g0 * sin[i] + g1 * cos[i];
                    }
                }
                self.add_into_grad(a, &da);
            }
            Op::ConcatCols { parts } => {
                let parts = parts.clone();
                let total: usize = parts.iter().map(|(_, c)| c).sum();
                let rows = self.nodes[id].shape[0];
                let mut off = 0usize;
                for (p, c) in parts {
                    if self.needs(p) {
                        let mut dp = vec![0.0; rows * c];
                        for i in 0..rows {
                            dp[i * c..(i + 1) * c]
                                .copy_from_slice(&up[i * total + off..i * total + off + c]);
                        }
                        self.add_into_grad(p, &dp);
                    }
                    off += c;
                }
            }
            Op::SliceRows { a, start } => {
                let (a, start) = (*a, *start);
                if self.needs(a) {
                    let c = self.nodes[a].shape[1];
                    let mut da = vec![0.0; self.nodes[a].data.len()];
                    da[start * c..start * c + up.len()].copy_from_slice(&up);
                    self.add_into_grad(a, &da);
                }
            }
            Op::SumAll { a } => {
                let a = *a;
                if self.needs(a) {
                    let da = vec![up[0]; self.nodes[a].data.len()];
                    self.add_into_grad(a, &da);
                }
            }
        }
        self.put_grad(id, up);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_and_dot() {
        let mut tape = Tape::new();
        let i2 = tape.constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let a = tape.constant(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let c = tape.matmul(i2, a).unwrap();
        assert_eq!(tape.value(c), &[1.0, 2.0, 3.0, 4.0]);

        let x = tape.constant(&[1, 2], vec![1.0, 2.0]);
        let y = tape.constant(&[2, 1], vec![3.0, 4.0]);
        let d = tape.matmul(x, y).unwrap();
        assert_eq!(tape.value(d), &[11.0]);

        let bad = tape.matmul(y, a);
        match bad {
            Err(Error::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 1]);
                assert_eq!(rhs, vec![2, 2]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn softmax_symmetry_and_single_survivor() {
        let mut tape = Tape::new();
        let l = tape.constant(&[2, 2], vec![0.0, 0.0, 5.0, -3.0]);
        let s = tape
            .scaled_softmax_rows(l, 1.0, Some(&Mask::causal(2)))
            .unwrap();
        // row 0: only entry 0 attendable -> [1, 0]
        assert_eq!(tape.value(s)[0], 1.0);
        assert_eq!(tape.value(s)[1], 0.0);
        let unmasked = tape.scaled_softmax_rows(l, 1.0, None).unwrap();
        assert!((tape.value(unmasked)[0] - 0.5).abs() < 1e-15);
        assert!((tape.value(unmasked)[1] - 0.5).abs() < 1e-15);
        assert!(tape.scaled_softmax_rows(l, 0.0, None).is_err());
    }

    #[test]
    fn softmax_shift_invariance() {
        let mut tape = Tape::new();
        let base = vec![0.3, -1.0, 2.5, 0.0, 0.7, 1.1];
        let shifted: Vec<f64> = base
            .chunks_exact(3)
            .enumerate()
            .flat_map(|(i, row)| {
                let c = [11.0, -4.5][i];
                row.iter().map(move |v| v + c)
            })
            .collect();
        let a = tape.constant(&[2, 3], base);
        let b = tape.constant(&[2, 3], shifted);
        let sa = tape.softmax_rows(a, None).unwrap();
        let sb = tape.softmax_rows(b, None).unwrap();
        for (x, y) in tape.value(sa).iter().zip(tape.value(sb)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn layernorm_constant_and_balanced_rows() {
        let mut tape = Tape::new();
        let gain = tape.constant(&[2], vec![1.0, 1.0]);
        let bias = tape.constant(&[2], vec![0.0, 0.0]);
        let x = tape.constant(&[1, 2], vec![3.0, 3.0]);
        let y = tape.layernorm(x, gain, bias).unwrap();
        assert_eq!(tape.value(y), &[0.0, 0.0]);

        let x2 = tape.constant(&[1, 2], vec![1.0, -1.0]);
        let y2 = tape.layernorm(x2, gain, bias).unwrap();
        // variance 1 plus the 1e-5 epsilon
        let want = 1.0 / (1.0f64 + LAYERNORM_EPS).sqrt();
        assert!((tape.value(y2)[0] - want).abs() < 1e-15);
        assert!((tape.value(y2)[1] + want).abs() < 1e-15);
    }

    #[test]
    fn embedding_gather_and_repeat_accumulation() {
        let mut tape = Tape::new();
        let table = Tensor::from_vec(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
            .unwrap()
            .with_grad();
        let t = tape.leaf(&table);
        let e = tape.embedding_lookup(t, &[0]).unwrap();
        assert_eq!(tape.value(e), &[1.0, 2.0]);
        let e2 = tape.embedding_lookup(t, &[1, 1]).unwrap();
        let s = tape.sum_all(e2);
        tape.backward(s).unwrap();
        // repeated id: both rows accumulate into the same table row
        assert_eq!(tape.grad(t).unwrap()[2..4], [2.0, 2.0]);
        assert!(matches!(
            tape.embedding_lookup(t, &[7]),
            Err(Error::IndexOutOfRange { position: 0, id: 7, vocab: 3 })
        ));
    }

    #[test]
    fn cross_entropy_uniform_and_peaked() {
        let mut tape = Tape::new();
        let logits = tape.constant(&[1, 256], vec![0.0; 256]);
        let l = tape.cross_entropy(logits, &[17]).unwrap();
        assert!((tape.value(l)[0] - 256.0f64.ln()).abs() < 1e-12);

        let mut peaked = vec![0.0; 8];
        peaked[3] = 1e4;
        let logits = tape.constant(&[1, 8], peaked);
        let l = tape.cross_entropy(logits, &[3]).unwrap();
        assert!(tape.value(l)[0].abs() < 1e-12);
        assert!(matches!(
            tape.cross_entropy(logits, &[]),
            Err(Error::EmptyTargets)
        ));
    }

    #[test]
    fn backward_sum_gives_ones_and_errors_on_second_call() {
        let mut tape = Tape::new();
        let x = Tensor::from_vec(&[2, 2], vec![1.0, -2.0, 0.5, 3.0])
            .unwrap()
            .with_grad();
        let xid = tape.leaf(&x);
        let s = tape.sum_all(xid);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(xid).unwrap(), &[1.0; 4]);
        assert!(matches!(tape.backward(s), Err(Error::BackwardAlreadyRun)));
    }

    #[test]
    fn disconnected_leaf_grad_stays_zero() {
        let mut tape = Tape::new();
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap().with_grad();
        let unused = Tensor::from_vec(&[2], vec![5.0, 6.0]).unwrap().with_grad();
        let xid = tape.leaf(&x);
        let uid = tape.leaf(&unused);
        let s = tape.sum_all(xid);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(uid).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_on_non_scalar_errors() {
        let mut tape = Tape::new();
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap().with_grad();
        let xid = tape.leaf(&x);
        assert!(matches!(
            tape.backward(xid),
            Err(Error::NotScalar { .. })
        ));
    }

    #[test]
    fn clear_releases_nodes() {
        let mut tape = Tape::new();
        let x = tape.constant(&[2], vec![1.0, 2.0]);
        let _ = tape.sum_all(x);
        assert_eq!(tape.len(), 2);
        tape.clear();
        assert!(tape.is_empty());
    }
}
