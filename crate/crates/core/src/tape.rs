//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] is built fresh for every forward pass. Operations append nodes
//! in topological order; [`Tape::backward`] seeds the scalar root with 1 and
//! walks the nodes once in reverse, accumulating vector-Jacobian products
//! into each operand's adjoint buffer. Leaves registered with [`Tape::leaf`]
//! receive gradients; leaves registered with [`Tape::constant`] are opaque to
//! the backward pass, so nothing downstream of them is ever differentiated.
//!
//! Everything is double precision and single-threaded per tape; two tapes on
//! two threads share no state.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{matmul_raw, transpose_raw, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific tape. Using a handle on any other tape is
/// a lifecycle error.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId {
    tape: u64,
    index: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    /// Row-broadcast add: operand 0 is (lead×n), operand 1 is an n-vector.
    AddRow(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Exp(usize),
    Log(usize),
    Matmul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        a: usize,
        rows: usize,
        cols: usize,
    },
    ConcatLast {
        a: usize,
        b: usize,
        lead: usize,
        p: usize,
        q: usize,
    },
    L2NormalizeRows {
        a: usize,
        norms: Vec<f64>,
    },
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    /// Sum over the last axis: (lead×n) -> (lead).
    RowSum(usize),
    /// Full reduction to a scalar.
    Sum(usize),
    /// Each row repeated `times` consecutively: (r×n) -> (r·times × n).
    RepeatRows {
        a: usize,
        times: usize,
    },
    /// Whole block repeated `times`: (r×n) -> (times·r × n).
    TileRows {
        a: usize,
        times: usize,
    },
    Reshape(usize),
    /// Per-row gather: out[i] = in[i, labels[i]].
    PickPerRow {
        a: usize,
        labels: Vec<usize>,
    },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Vec<f64>,
    adjoint: Vec<f64>,
    requires_grad: bool,
}

pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    completed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            completed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, id: NodeId) -> Result<usize> {
        if id.tape != self.id {
            return Err(Error::Lifecycle(format!(
                "node handle from tape {} used on tape {}",
                id.tape, self.id
            )));
        }
        Ok(id.index)
    }

    fn push(
        &mut self,
        op: Op,
        shape: Vec<usize>,
        value: Vec<f64>,
        requires_grad: bool,
    ) -> Result<NodeId> {
        if self.completed {
            return Err(Error::Lifecycle(
                "tape already consumed by backward; build a fresh tape".into(),
            ));
        }
        let n = value.len();
        self.nodes.push(Node {
            op,
            shape,
            value,
            adjoint: vec![0.0; n],
            requires_grad,
        });
        Ok(NodeId {
            tape: self.id,
            index: self.nodes.len() - 1,
        })
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    /// Register a trainable leaf; it will receive a gradient.
    pub fn leaf(&mut self, t: &Tensor) -> Result<NodeId> {
        self.push(Op::Leaf, t.shape().to_vec(), t.data().to_vec(), true)
    }

    /// Register a frozen value; the backward pass never propagates into it.
    pub fn constant(&mut self, t: &Tensor) -> Result<NodeId> {
        self.push(Op::Leaf, t.shape().to_vec(), t.data().to_vec(), false)
    }

    pub fn shape(&self, id: NodeId) -> Result<&[usize]> {
        Ok(&self.nodes[self.check(id)?].shape)
    }

    pub fn value(&self, id: NodeId) -> Result<&[f64]> {
        Ok(&self.nodes[self.check(id)?].value)
    }

    pub fn value_tensor(&self, id: NodeId) -> Result<Tensor> {
        let i = self.check(id)?;
        Tensor::new(self.nodes[i].shape.clone(), self.nodes[i].value.clone())
    }

    /// Adjoint of a node after [`Tape::backward`] has run.
    pub fn grad(&self, id: NodeId) -> Result<&[f64]> {
        let i = self.check(id)?;
        if !self.completed {
            return Err(Error::Lifecycle(
                "gradients requested before backward".into(),
            ));
        }
        Ok(&self.nodes[i].adjoint)
    }

    // ---- elementwise -----------------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        if self.nodes[ia].shape != self.nodes[ib].shape {
            return Err(Error::shape(
                "add",
                &self.nodes[ia].shape,
                &self.nodes[ib].shape,
            ));
        }
        let v: Vec<f64> = self.nodes[ia]
            .value
            .iter()
            .zip(&self.nodes[ib].value)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[ia].shape.clone();
        let rg = self.rg(ia) || self.rg(ib);
        self.push(Op::Add(ia, ib), shape, v, rg)
    }

    /// `a` is (lead×n); `bias` is an n-vector broadcast over rows.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (ia, ib) = (self.check(a)?, self.check(bias)?);
        let n = *self.nodes[ia].shape.last().unwrap_or(&1);
        if self.nodes[ib].value.len() != n {
            return Err(Error::shape(
                "add_row",
                &self.nodes[ia].shape,
                &self.nodes[ib].shape,
            ));
        }
        let bv = self.nodes[ib].value.clone();
        let v: Vec<f64> = self.nodes[ia]
            .value
            .iter()
            .enumerate()
            .map(|(i, x)| x + bv[i % n])
            .collect();
        let shape = self.nodes[ia].shape.clone();
        let rg = self.rg(ia) || self.rg(ib);
        self.push(Op::AddRow(ia, ib), shape, v, rg)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        if self.nodes[ia].shape != self.nodes[ib].shape {
            return Err(Error::shape(
                "sub",
                &self.nodes[ia].shape,
                &self.nodes[ib].shape,
            ));
        }
        let v: Vec<f64> = self.nodes[ia]
            .value
            .iter()
            .zip(&self.nodes[ib].value)
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.nodes[ia].shape.clone();
        let rg = self.rg(ia) || self.rg(ib);
        self.push(Op::Sub(ia, ib), shape, v, rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        if self.nodes[ia].shape != self.nodes[ib].shape {
            return Err(Error::shape(
                "mul",
                &self.nodes[ia].shape,
                &self.nodes[ib].shape,
            ));
        }
        let v: Vec<f64> = self.nodes[ia]
            .value
            .iter()
            .zip(&self.nodes[ib].value)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[ia].shape.clone();
        let rg = self.rg(ia) || self.rg(ib);
        self.push(Op::Mul(ia, ib), shape, v, rg)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let ia = self.check(a)?;
        let v: Vec<f64> = self.nodes[ia].value.iter().map(|x| x * c).collect();
        let shape = self.nodes[ia].shape.clone();
        let rg = self.rg(ia);
        self.push(Op::Scale(ia, c), shape, v, rg)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let ia = self.check(a)?;
        let v: Vec<f64> = self.nodes[ia].value.iter().map(|x| x.max(0.0)).collect();
        let shape = self.nodes[ia].shape.clone();
        let rg = self.rg(ia);
        self.push(Op::Relu(ia), shape, v, rg)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let ia = self.check(a)?;
        let v: Vec<f64> = self.nodes[ia].value.iter().map(|x| x.exp()).collect();
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                context: "exp output".into(),
            });
        }
        let shape = self.nodes[ia].shape.clone();
        let rg = self.rg(ia);
        self.push(Op::Exp(ia), shape, v, rg)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        let ia = self.check(a)?;
        if let Some(bad) = self.nodes[ia].value.iter().find(|x| **x <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("operand must be strictly positive, got {bad}"),
            });
        }
        let v: Vec<f64> = self.nodes[ia].value.iter().map(|x| x.ln()).collect();
        let shape = self.nodes[ia].shape.clone();
        let rg = self.rg(ia);
        self.push(Op::Log(ia), shape, v, rg)
    }

    // ---- linear algebra --------------------------------------------------

    /// (m×k) · (k×n) -> (m×n).
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (&self.nodes[ia].shape, &self.nodes[ib].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let v = matmul_raw(&self.nodes[ia].value, &self.nodes[ib].value, m, k, n);
        let rg = self.rg(ia) || self.rg(ib);
        self.push(
            Op::Matmul {
                a: ia,
                b: ib,
                m,
                k,
                n,
            },
            vec![m, n],
            v,
            rg,
        )
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let ia = self.check(a)?;
        let s = &self.nodes[ia].shape;
        if s.len() != 2 {
            return Err(Error::Contract(format!(
                "transpose expects rank 2, got {s:?}"
            )));
        }
        let (rows, cols) = (s[0], s[1]);
        let v = transpose_raw(&self.nodes[ia].value, rows, cols);
        let rg = self.rg(ia);
        self.push(Op::Transpose { a: ia, rows, cols }, vec![cols, rows], v, rg)
    }

    // ---- shape / gather --------------------------------------------------

    /// Last-axis concatenation; all leading dimensions must agree.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (self.nodes[ia].shape.clone(), self.nodes[ib].shape.clone());
        if sa.is_empty()
            || sb.is_empty()
            || sa.len() != sb.len()
            || sa[..sa.len() - 1] != sb[..sb.len() - 1]
        {
            return Err(Error::shape("concat", &sa, &sb));
        }
        let lead: usize = sa[..sa.len() - 1].iter().product();
        let (p, q) = (sa[sa.len() - 1], sb[sb.len() - 1]);
        let mut v = Vec::with_capacity(lead * (p + q));
        for r in 0..lead {
            v.extend_from_slice(&self.nodes[ia].value[r * p..(r + 1) * p]);
            v.extend_from_slice(&self.nodes[ib].value[r * q..(r + 1) * q]);
        }
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = p + q;
        let rg = self.rg(ia) || self.rg(ib);
        self.push(
            Op::ConcatLast {
                a: ia,
                b: ib,
                lead,
                p,
                q,
            },
            shape,
            v,
            rg,
        )
    }

    /// Unit-normalize along the last axis. Rows with norm below 1e-12 are a
    /// degenerate-input error.
    pub fn l2_normalize(&mut self, a: NodeId) -> Result<NodeId> {
        let ia = self.check(a)?;
        let shape = self.nodes[ia].shape.clone();
        let n = *shape.last().unwrap_or(&1);
        let lead = self.nodes[ia].value.len() / n;
        let mut v = vec![0.0; lead * n];
        let mut norms = Vec::with_capacity(lead);
        for r in 0..lead {
            let row = &self.nodes[ia].value[r * n..(r + 1) * n];
            let norm = crate::tensor::l2_norm(row);
            if norm < 1e-12 {
                return Err(Error::DegenerateInput {
                    op: "l2_normalize",
                    detail: format!("row {r} has norm {norm:.3e} below floor 1e-12"),
                });
            }
            for j in 0..n {
                v[r * n + j] = row[j] / norm;
            }
            norms.push(norm);
        }
        let rg = self.rg(ia);
        self.push(Op::L2NormalizeRows { a: ia, norms }, shape, v, rg)
    }

    /// Numerically stable row softmax (max subtraction).
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let ia = self.check(a)?;
        let v = softmax_values(&self.nodes[ia].value, &self.nodes[ia].shape)?;
        let shape = self.nodes[ia].shape.clone();
        let rg = self.rg(ia);
        self.push(Op::SoftmaxRows(ia), shape, v, rg)
    }

    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let ia = self.check(a)?;
        let shape = self.nodes[ia].shape.clone();
        let n = *shape.last().unwrap_or(&1);
        let lead = self.nodes[ia].value.len() / n;
        let mut v = vec![0.0; lead * n];
        for r in 0..lead {
            let row = &self.nodes[ia].value[r * n..(r + 1) * n];
            if row.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite {
                    context: "log_softmax input".into(),
                });
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
            for j in 0..n {
                v[r * n + j] = row[j] - lse;
            }
        }
        let rg = self.rg(ia);
        self.push(Op::LogSoftmaxRows(ia), shape, v, rg)
    }

    /// (lead×n) -> (lead): sum over the last axis.
    pub fn row_sum(&mut self, a: NodeId) -> Result<NodeId> {
        let ia = self.check(a)?;
        let shape = self.nodes[ia].shape.clone();
        if shape.is_empty() {
            return Err(Error::Contract("row_sum of a scalar".into()));
        }
        let n = *shape.last().unwrap();
        let lead = self.nodes[ia].value.len() / n;
        let v: Vec<f64> = (0..lead)
            .map(|r| self.nodes[ia].value[r * n..(r + 1) * n].iter().sum())
            .collect();
        let out_shape = shape[..shape.len() - 1].to_vec();
        let rg = self.rg(ia);
        self.push(Op::RowSum(ia), out_shape, v, rg)
    }

    /// Full reduction to a scalar node.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let ia = self.check(a)?;
        let v = vec![self.nodes[ia].value.iter().sum::<f64>()];
        let rg = self.rg(ia);
        self.push(Op::Sum(ia), vec![], v, rg)
    }

    /// Each row of (r×n) appears `times` consecutive times.
    pub fn repeat_rows(&mut self, a: NodeId, times: usize) -> Result<NodeId> {
        let ia = self.check(a)?;
        let shape = self.nodes[ia].shape.clone();
        if shape.len() != 2 || times == 0 {
            return Err(Error::Contract(format!(
                "repeat_rows expects rank 2 and times >= 1, got {shape:?} × {times}"
            )));
        }
        let (r, n) = (shape[0], shape[1]);
        let mut v = Vec::with_capacity(r * times * n);
        for i in 0..r {
            for _ in 0..times {
                v.extend_from_slice(&self.nodes[ia].value[i * n..(i + 1) * n]);
            }
        }
        let rg = self.rg(ia);
        self.push(Op::RepeatRows { a: ia, times }, vec![r * times, n], v, rg)
    }

    /// The whole (r×n) block repeated `times` times.
    pub fn tile_rows(&mut self, a: NodeId, times: usize) -> Result<NodeId> {
        let ia = self.check(a)?;
        let shape = self.nodes[ia].shape.clone();
        if shape.len() != 2 || times == 0 {
            return Err(Error::Contract(format!(
                "tile_rows expects rank 2 and times >= 1, got {shape:?} × {times}"
            )));
        }
        let (r, n) = (shape[0], shape[1]);
        let mut v = Vec::with_capacity(r * times * n);
        for _ in 0..times {
            v.extend_from_slice(&self.nodes[ia].value);
        }
        let rg = self.rg(ia);
        self.push(Op::TileRows { a: ia, times }, vec![times * r, n], v, rg)
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let ia = self.check(a)?;
        let numel: usize = shape.iter().product();
        if numel != self.nodes[ia].value.len() {
            return Err(Error::Contract(format!(
                "reshape: {:?} -> {:?}",
                self.nodes[ia].shape, shape
            )));
        }
        let v = self.nodes[ia].value.clone();
        let rg = self.rg(ia);
        self.push(Op::Reshape(ia), shape, v, rg)
    }

    /// out[i] = in[i, labels[i]] for a (b×c) input.
    pub fn pick_per_row(&mut self, a: NodeId, labels: &[usize]) -> Result<NodeId> {
        let ia = self.check(a)?;
        let shape = self.nodes[ia].shape.clone();
        if shape.len() != 2 {
            return Err(Error::Contract(format!(
                "pick_per_row expects rank 2, got {shape:?}"
            )));
        }
        let (b, c) = (shape[0], shape[1]);
        if labels.len() != b {
            return Err(Error::Data(format!(
                "pick_per_row: {} labels for {} rows",
                labels.len(),
                b
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let v: Vec<f64> = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| self.nodes[ia].value[i * c + l])
            .collect();
        let rg = self.rg(ia);
        self.push(
            Op::PickPerRow {
                a: ia,
                labels: labels.to_vec(),
            },
            vec![b],
            v,
            rg,
        )
    }

    // ---- backward --------------------------------------------------------

    /// Reverse pass from a scalar root. Each node is visited exactly once in
    /// reverse topological order; a second call on the same tape is rejected.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        let ir = self.check(root)?;
        if self.completed {
            return Err(Error::Lifecycle(
                "backward already ran on this tape; rebuild the tape".into(),
            ));
        }
        if self.nodes[ir].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[ir].shape
            )));
        }
        if !self.nodes[ir].value[0].is_finite() {
            return Err(Error::NonFinite {
                context: "backward root value".into(),
            });
        }
        self.completed = true;
        self.nodes[ir].adjoint[0] = 1.0;

        for i in (0..=ir).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            // Split borrows: take the node's op and adjoint, then scatter.
            let op = self.nodes[i].op.clone();
            let g = std::mem::take(&mut self.nodes[i].adjoint);
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.accumulate(a, |adj| add_into(adj, &g));
                    self.accumulate(b, |adj| add_into(adj, &g));
                }
                Op::AddRow(a, bias) => {
                    self.accumulate(a, |adj| add_into(adj, &g));
                    let n = self.nodes[bias].value.len();
                    self.accumulate(bias, |adj| {
                        for (i, gi) in g.iter().enumerate() {
                            adj[i % n] += gi;
                        }
                    });
                }
                Op::Sub(a, b) => {
                    self.accumulate(a, |adj| add_into(adj, &g));
                    self.accumulate(b, |adj| {
                        for (o, gi) in adj.iter_mut().zip(&g) {
                            *o -= gi;
                        }
                    });
                }
                Op::Mul(a, b) => {
                    let bv = self.nodes[b].value.clone();
                    self.accumulate(a, |adj| {
                        for ((o, gi), bi) in adj.iter_mut().zip(&g).zip(&bv) {
                            *o += gi * bi;
                        }
                    });
                    let av = self.nodes[a].value.clone();
                    self.accumulate(b, |adj| {
                        for ((o, gi), ai) in adj.iter_mut().zip(&g).zip(&av) {
                            *o += gi * ai;
                        }
                    });
                }
                Op::Scale(a, c) => {
                    self.accumulate(a, |adj| {
                        for (o, gi) in adj.iter_mut().zip(&g) {
                            *o += gi * c;
                        }
                    });
                }
                Op::Relu(a) => {
                    let av = self.nodes[a].value.clone();
                    self.accumulate(a, |adj| {
                        for ((o, gi), ai) in adj.iter_mut().zip(&g).zip(&av) {
                            if *ai > 0.0 {
                                *o += gi;
                            }
                        }
                    });
                }
                Op::Exp(a) => {
                    let out = self.nodes[i].value.clone();
                    self.accumulate(a, |adj| {
                        for ((o, gi), yi) in adj.iter_mut().zip(&g).zip(&out) {
                            *o += gi * yi;
                        }
                    });
                }
                Op::Log(a) => {
                    let av = self.nodes[a].value.clone();
                    self.accumulate(a, |adj| {
                        for ((o, gi), ai) in adj.iter_mut().zip(&g).zip(&av) {
                            *o += gi / ai;
                        }
                    });
                }
                Op::Matmul { a, b, m, k, n } => {
                    // dA += G · Bᵀ ; dB += Aᵀ · G
                    if self.rg(a) {
                        let bt = transpose_raw(&self.nodes[b].value, k, n);
                        let da = matmul_raw(&g, &bt, m, n, k);
                        self.accumulate(a, |adj| add_into(adj, &da));
                    }
                    if self.rg(b) {
                        let at = transpose_raw(&self.nodes[a].value, m, k);
                        let db = matmul_raw(&at, &g, k, m, n);
                        self.accumulate(b, |adj| add_into(adj, &db));
                    }
                }
                Op::Transpose { a, rows, cols } => {
                    let gt = transpose_raw(&g, cols, rows);
                    self.accumulate(a, |adj| add_into(adj, &gt));
                }
                Op::ConcatLast { a, b, lead, p, q } => {
                    self.accumulate(a, |adj| {
                        for r in 0..lead {
                            for j in 0..p {
                                adj[r * p + j] += g[r * (p + q) + j];
                            }
                        }
                    });
                    self.accumulate(b, |adj| {
                        for r in 0..lead {
                            for j in 0..q {
                                adj[r * q + j] += g[r * (p + q) + p + j];
                            }
                        }
                    });
                }
                Op::L2NormalizeRows { a, norms } => {
                    let out = self.nodes[i].value.clone();
                    let n = out.len() / norms.len();
                    self.accumulate(a, |adj| {
                        for (r, norm) in norms.iter().enumerate() {
                            let y = &out[r * n..(r + 1) * n];
                            let gr = &g[r * n..(r + 1) * n];
                            let gy: f64 = y.iter().zip(gr).map(|(yi, gi)| yi * gi).sum();
                            for j in 0..n {
                                adj[r * n + j] += (gr[j] - y[j] * gy) / norm;
                            }
                        }
                    });
                }
                Op::SoftmaxRows(a) => {
                    let out = self.nodes[i].value.clone();
                    let shape = &self.nodes[i].shape;
                    let n = *shape.last().unwrap_or(&1);
                    let lead = out.len() / n;
                    self.accumulate(a, |adj| {
                        for r in 0..lead {
                            let y = &out[r * n..(r + 1) * n];
                            let gr = &g[r * n..(r + 1) * n];
                            let gy: f64 = y.iter().zip(gr).map(|(yi, gi)| yi * gi).sum();
                            for j in 0..n {
                                adj[r * n + j] += y[j] * (gr[j] - gy);
                            }
                        }
                    });
                }
                Op::LogSoftmaxRows(a) => {
                    let out = self.nodes[i].value.clone();
                    let shape = &self.nodes[i].shape;
                    let n = *shape.last().unwrap_or(&1);
                    let lead = out.len() / n;
                    self.accumulate(a, |adj| {
                        for r in 0..lead {
                            let y = &out[r * n..(r + 1) * n];
                            let gr = &g[r * n..(r + 1) * n];
                            let gsum: f64 = gr.iter().sum();
                            for j in 0..n {
                                adj[r * n + j] += gr[j] - y[j].exp() * gsum;
                            }
                        }
                    });
                }
                Op::RowSum(a) => {
                    let n = *self.nodes[a].shape.last().unwrap();
                    self.accumulate(a, |adj| {
                        for (r, gi) in g.iter().enumerate() {
                            for j in 0..n {
                                adj[r * n + j] += gi;
                            }
                        }
                    });
                }
                Op::Sum(a) => {
                    self.accumulate(a, |adj| {
                        for o in adj.iter_mut() {
                            *o += g[0];
                        }
                    });
                }
                Op::RepeatRows { a, times } => {
                    let n = self.nodes[a].shape[1];
                    self.accumulate(a, |adj| {
                        let r = adj.len() / n;
                        for i in 0..r {
                            for t in 0..times {
                                for j in 0..n {
                                    adj[i * n + j] += g[(i * times + t) * n + j];
                                }
                            }
                        }
                    });
                }
                Op::TileRows { a, times } => {
                    let block = self.nodes[a].value.len();
                    self.accumulate(a, |adj| {
                        for t in 0..times {
                            for j in 0..block {
                                adj[j] += g[t * block + j];
                            }
                        }
                    });
                }
                Op::Reshape(a) => {
                    self.accumulate(a, |adj| add_into(adj, &g));
                }
                Op::PickPerRow { a, labels } => {
                    let c = self.nodes[a].shape[1];
                    self.accumulate(a, |adj| {
                        for (i, &l) in labels.iter().enumerate() {
                            adj[i * c + l] += g[i];
                        }
                    });
                }
            }
            // The root keeps its seed; interior adjoints are restored for
            // introspection (grad() is legal on any node).
            self.nodes[i].adjoint = g;
        }
        Ok(())
    }

    fn accumulate<F: FnOnce(&mut [f64])>(&mut self, target: usize, f: F) {
        if self.nodes[target].requires_grad {
            let mut adj = std::mem::take(&mut self.nodes[target].adjoint);
            f(&mut adj);
            self.nodes[target].adjoint = adj;
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn softmax_values(data: &[f64], shape: &[usize]) -> Result<Vec<f64>> {
    let n = *shape.last().unwrap_or(&1);
    let lead = data.len() / n;
    let mut v = vec![0.0; data.len()];
    for r in 0..lead {
        let row = &data[r * n..(r + 1) * n];
        if row.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                context: "softmax input".into(),
            });
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for j in 0..n {
            let e = (row[j] - max).exp();
            v[r * n + j] = e;
            sum += e;
        }
        for j in 0..n {
            v[r * n + j] /= sum;
        }
    }
    Ok(v)
}

/// Softmax of raw values without tape involvement (used on frozen logits).
pub fn softmax_raw(data: &[f64], classes: usize) -> Vec<f64> {
    softmax_values(data, &[data.len() / classes, classes]).expect("finite logits")
}
