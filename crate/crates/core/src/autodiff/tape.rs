//! Define-by-run reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Tape`] owns every tensor produced during a forward pass. Operations
//! append nodes in execution order; [`Tape::backward`] replays them in exact
//! reverse insertion order and accumulates vector-Jacobian products into the
//! gradient slot of every tensor that requires one.

use super::tensor::{logsumexp, matmul_raw, sigmoid_scalar, Tensor};
use crate::error::{Error, Result};
use rand::Rng;

/// Handle to a tensor living on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
struct Slot {
    value: Tensor,
    requires_grad: bool,
}

/// Train/eval switch for stochastic operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug)]
enum Op {
    MatMul { a: usize, b: usize },
    MatVec { m: usize, v: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    AddN { inputs: Vec<usize> },
    Affine { x: usize, scale: f64 },
    Clamp { x: usize, lo: f64, hi: f64 },
    Sigmoid { x: usize },
    Tanh { x: usize },
    Relu { x: usize },
    Log { x: usize },
    Softmax { x: usize },
    Concat { a: usize, b: usize, axis: usize },
    Dropout { x: usize, mask: Vec<f64> },
    GradReverse { x: usize, lambda: f64 },
    Sum { x: usize },
    Dot { a: usize, b: usize },
    Narrow { x: usize, start: usize },
    Row { x: usize, index: usize },
    StackRows { rows: Vec<usize> },
    Lookup { table: usize, indices: Vec<usize> },
    GatherCols { x: usize, cols: Vec<usize> },
    CrfLogZ { node: usize, trans: usize },
    CrfGoldScore { node: usize, trans: usize, labels: Vec<usize> },
}

struct Node {
    op: Op,
    output: usize,
}

/// Floor for `log` arguments so probabilities at the clamp boundary stay finite.
const LOG_CLAMP: f64 = 1e-300;

/// Append-only operation tape. One forward/backward cycle per instance.
#[derive(Default)]
pub struct Tape {
    slots: Vec<Slot>,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Register an input tensor. Gradients are tracked only when
    /// `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push_slot(value, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.slots[v.0].value
    }

    /// Gradient of the last backward pass with respect to `v`, if any was
    /// accumulated.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.slots[v.0].requires_grad
    }

    fn push_slot(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.slots.push(Slot {
            value,
            requires_grad,
        });
        Var(self.slots.len() - 1)
    }

    fn push_op(&mut self, op: Op, value: Tensor, inputs: &[usize]) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.slots[i].requires_grad);
        let out = self.push_slot(value, requires_grad);
        self.nodes.push(Node { op, output: out.0 });
        out
    }

    fn shape(&self, v: Var) -> &[usize] {
        &self.slots[v.0].value.shape
    }

    fn data(&self, v: Var) -> &[f64] {
        &self.slots[v.0].value.data
    }

    // ── elementwise and linear algebra ──────────────────────────────────

    /// Matrix product a[m×k] · b[k×n].
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.data(a), self.data(b), m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push_op(Op::MatMul { a: a.0, b: b.0 }, t, &[a.0, b.0]))
    }

    /// Matrix-vector product m[r×c] · v[c].
    pub fn matvec(&mut self, m: Var, v: Var) -> Result<Var> {
        let (sm, sv) = (self.shape(m).to_vec(), self.shape(v).to_vec());
        if sm.len() != 2 || sv.len() != 1 || sm[1] != sv[0] {
            return Err(Error::ShapeMismatch {
                op: "matvec",
                lhs: sm,
                rhs: sv,
            });
        }
        let (r, c) = (sm[0], sm[1]);
        let md = self.data(m);
        let vd = self.data(v);
        let mut out = vec![0.0; r];
        for i in 0..r {
            let mrow = &md[i * c..(i + 1) * c];
            let mut s = 0.0;
            for j in 0..c {
                s += mrow[j] * vd[j];
            }
            out[i] = s;
        }
        let t = Tensor::vector(out);
        Ok(self.push_op(Op::MatVec { m: m.0, v: v.0 }, t, &[m.0, v.0]))
    }

    fn binary_same_shape(&mut self, op_name: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: op_name,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b)?;
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor {
            shape: self.shape(a).to_vec(),
            data,
        };
        Ok(self.push_op(Op::Add { a: a.0, b: b.0 }, t, &[a.0, b.0]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b)?;
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x - y)
            .collect();
        let t = Tensor {
            shape: self.shape(a).to_vec(),
            data,
        };
        Ok(self.push_op(Op::Sub { a: a.0, b: b.0 }, t, &[a.0, b.0]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b)?;
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor {
            shape: self.shape(a).to_vec(),
            data,
        };
        Ok(self.push_op(Op::Mul { a: a.0, b: b.0 }, t, &[a.0, b.0]))
    }

    /// Elementwise sum of any number of same-shape tensors.
    pub fn add_n(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::Contract("add_n: empty input list".into()))?;
        for v in &inputs[1..] {
            self.binary_same_shape("add_n", first, *v)?;
        }
        let mut data = self.data(first).to_vec();
        for v in &inputs[1..] {
            for (o, x) in data.iter_mut().zip(self.data(*v)) {
                *o += x;
            }
        }
        let t = Tensor {
            shape: self.shape(first).to_vec(),
            data,
        };
        let ids: Vec<usize> = inputs.iter().map(|v| v.0).collect();
        Ok(self.push_op(Op::AddN { inputs: ids.clone() }, t, &ids))
    }

    /// Elementwise `scale·x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let data: Vec<f64> = self.data(x).iter().map(|v| scale * v + shift).collect();
        let t = Tensor {
            shape: self.shape(x).to_vec(),
            data,
        };
        self.push_op(Op::Affine { x: x.0, scale }, t, &[x.0])
    }

    /// Elementwise clamp into [lo, hi]; gradient passes only strictly inside.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let data: Vec<f64> = self.data(x).iter().map(|v| v.clamp(lo, hi)).collect();
        let t = Tensor {
            shape: self.shape(x).to_vec(),
            data,
        };
        self.push_op(Op::Clamp { x: x.0, lo, hi }, t, &[x.0])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let data: Vec<f64> = self.data(x).iter().map(|&v| sigmoid_scalar(v)).collect();
        let t = Tensor {
            shape: self.shape(x).to_vec(),
            data,
        };
        self.push_op(Op::Sigmoid { x: x.0 }, t, &[x.0])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let data: Vec<f64> = self.data(x).iter().map(|v| v.tanh()).collect();
        let t = Tensor {
            shape: self.shape(x).to_vec(),
            data,
        };
        self.push_op(Op::Tanh { x: x.0 }, t, &[x.0])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data: Vec<f64> = self.data(x).iter().map(|v| v.max(0.0)).collect();
        let t = Tensor {
            shape: self.shape(x).to_vec(),
            data,
        };
        self.push_op(Op::Relu { x: x.0 }, t, &[x.0])
    }

    /// Natural log, clamped below at 1e-300 so the result stays finite.
    pub fn log(&mut self, x: Var) -> Var {
        let data: Vec<f64> = self.data(x).iter().map(|v| v.max(LOG_CLAMP).ln()).collect();
        let t = Tensor {
            shape: self.shape(x).to_vec(),
            data,
        };
        self.push_op(Op::Log { x: x.0 }, t, &[x.0])
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let k = *shape
            .last()
            .ok_or_else(|| Error::Contract("softmax: scalar input".into()))?;
        if k == 0 {
            return Err(Error::Contract("softmax: empty last axis".into()));
        }
        let xd = self.data(x);
        let mut data = vec![0.0; xd.len()];
        for (row_in, row_out) in xd.chunks(k).zip(data.chunks_mut(k)) {
            let max = row_in.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (o, v) in row_out.iter_mut().zip(row_in) {
                *o = (v - max).exp();
                sum += *o;
            }
            for o in row_out.iter_mut() {
                *o /= sum;
            }
        }
        let t = Tensor { shape, data };
        Ok(self.push_op(Op::Softmax { x: x.0 }, t, &[x.0]))
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let rank_ok = sa.len() == sb.len() && axis < sa.len();
        let extents_ok = rank_ok
            && sa
                .iter()
                .zip(&sb)
                .enumerate()
                .all(|(d, (x, y))| d == axis || x == y);
        if !extents_ok {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: sa,
                rhs: sb,
            });
        }
        let outer: usize = sa[..axis].iter().product();
        let inner: usize = sa[axis + 1..].iter().product();
        let (ea, eb) = (sa[axis], sb[axis]);
        let (ad, bd) = (self.data(a), self.data(b));
        let mut data = Vec::with_capacity(ad.len() + bd.len());
        for o in 0..outer {
            data.extend_from_slice(&ad[o * ea * inner..(o + 1) * ea * inner]);
            data.extend_from_slice(&bd[o * eb * inner..(o + 1) * eb * inner]);
        }
        let mut shape = sa;
        shape[axis] = ea + eb;
        let t = Tensor::new(shape, data)?;
        Ok(self.push_op(Op::Concat { a: a.0, b: b.0, axis }, t, &[a.0, b.0]))
    }

    /// Inverted dropout: in train mode zero each element with probability
    /// `rate` and scale survivors by 1/(1−rate); eval mode is the identity.
    pub fn dropout<R: Rng>(&mut self, x: Var, rate: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0,1)")));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let scale = 1.0 / keep;
        let mask: Vec<f64> = (0..self.data(x).len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { scale })
            .collect();
        let data: Vec<f64> = self.data(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let t = Tensor {
            shape: self.shape(x).to_vec(),
            data,
        };
        Ok(self.push_op(Op::Dropout { x: x.0, mask }, t, &[x.0]))
    }

    /// Identity forward; backward multiplies the incoming gradient by −lambda.
    pub fn grad_reverse(&mut self, x: Var, lambda: f64) -> Var {
        let t = self.slots[x.0].value.clone();
        self.push_op(Op::GradReverse { x: x.0, lambda }, t, &[x.0])
    }

    /// Sum of all elements.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.data(x).iter().sum();
        self.push_op(Op::Sum { x: x.0 }, Tensor::scalar(s), &[x.0])
    }

    /// Inner product of two equal-length vectors.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 1 || sa != sb {
            return Err(Error::ShapeMismatch {
                op: "dot",
                lhs: sa,
                rhs: sb,
            });
        }
        let s: f64 = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).sum();
        Ok(self.push_op(Op::Dot { a: a.0, b: b.0 }, Tensor::scalar(s), &[a.0, b.0]))
    }

    /// Contiguous slice of a vector.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 1 || start + len > s[0] {
            return Err(Error::Contract(format!(
                "narrow [{start}, {start}+{len}) out of bounds for shape {s:?}"
            )));
        }
        let data = self.data(x)[start..start + len].to_vec();
        let t = Tensor::vector(data);
        Ok(self.push_op(Op::Narrow { x: x.0, start }, t, &[x.0]))
    }

    /// Extract row `index` of a matrix as a vector.
    pub fn row(&mut self, x: Var, index: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || index >= s[0] {
            return Err(Error::Contract(format!(
                "row {index} out of bounds for shape {s:?}"
            )));
        }
        let cols = s[1];
        let data = self.data(x)[index * cols..(index + 1) * cols].to_vec();
        let t = Tensor::vector(data);
        Ok(self.push_op(Op::Row { x: x.0, index }, t, &[x.0]))
    }

    /// Stack equal-length vectors into a matrix, one per row.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let first = *rows
            .first()
            .ok_or_else(|| Error::Contract("stack_rows: empty input list".into()))?;
        let width = self.shape(first).to_vec();
        if width.len() != 1 {
            return Err(Error::Contract("stack_rows: inputs must be vectors".into()));
        }
        let k = width[0];
        let mut data = Vec::with_capacity(rows.len() * k);
        for r in rows {
            if self.shape(*r) != [k] {
                return Err(Error::ShapeMismatch {
                    op: "stack_rows",
                    lhs: vec![k],
                    rhs: self.shape(*r).to_vec(),
                });
            }
            data.extend_from_slice(self.data(*r));
        }
        let t = Tensor::new(vec![rows.len(), k], data)?;
        let ids: Vec<usize> = rows.iter().map(|v| v.0).collect();
        Ok(self.push_op(Op::StackRows { rows: ids.clone() }, t, &ids))
    }

    /// Row gather from an embedding matrix; backward scatters gradients to
    /// touched rows only.
    pub fn lookup(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(Error::Contract("lookup: table must be 2-D".into()));
        }
        let (v, d) = (s[0], s[1]);
        let td = self.data(table);
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= v {
                return Err(Error::Contract(format!(
                    "lookup index {i} out of range for table with {v} rows"
                )));
            }
            data.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        let t = Tensor::new(vec![indices.len(), d], data)?;
        Ok(self.push_op(
            Op::Lookup {
                table: table.0,
                indices: indices.to_vec(),
            },
            t,
            &[table.0],
        ))
    }

    /// Pick one element per row: out[i] = x[i, cols[i]].
    pub fn gather_cols(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || cols.len() != s[0] {
            return Err(Error::Contract(format!(
                "gather_cols: need one column per row of {s:?}, got {}",
                cols.len()
            )));
        }
        let k = s[1];
        let xd = self.data(x);
        let mut data = Vec::with_capacity(cols.len());
        for (i, &c) in cols.iter().enumerate() {
            if c >= k {
                return Err(Error::Contract(format!(
                    "gather_cols: column {c} out of range 0..{k}"
                )));
            }
            data.push(xd[i * k + c]);
        }
        let t = Tensor::vector(data);
        Ok(self.push_op(
            Op::GatherCols {
                x: x.0,
                cols: cols.to_vec(),
            },
            t,
            &[x.0],
        ))
    }

    // ── linear-chain CRF lattice ops ─────────────────────────────────────

    /// Log-partition of the START → y₁ → … → yₙ → STOP lattice via the
    /// log-space forward algorithm. `node` is [n×K]; `trans` is
    /// [(K+2)×(K+2)] with START = K, STOP = K+1.
    pub fn crf_log_partition(&mut self, node: Var, trans: Var) -> Result<Var> {
        let (n, k) = check_crf_shapes("crf_log_partition", self.shape(node), self.shape(trans))?;
        let alpha = crf_forward(self.data(node), self.data(trans), n, k);
        let trans_d = self.data(trans);
        let stop = k + 1;
        let finals: Vec<f64> = (0..k)
            .map(|j| alpha[(n - 1) * k + j] + trans_d[j * (k + 2) + stop])
            .collect();
        let logz = logsumexp(&finals);
        Ok(self.push_op(
            Op::CrfLogZ {
                node: node.0,
                trans: trans.0,
            },
            Tensor::scalar(logz),
            &[node.0, trans.0],
        ))
    }

    /// Score of a gold path: Σᵢ node(i, yᵢ) plus all transitions including
    /// START→y₁ and yₙ→STOP.
    pub fn crf_gold_score(&mut self, node: Var, trans: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = check_crf_shapes("crf_gold_score", self.shape(node), self.shape(trans))?;
        if labels.len() != n {
            return Err(Error::Data(format!(
                "gold sequence has {} labels for {} positions",
                labels.len(),
                n
            )));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::Data(format!("label {bad} outside 0..{k}")));
        }
        let (node_d, trans_d) = (self.data(node), self.data(trans));
        let (start, stop, w) = (k, k + 1, k + 2);
        let mut score = trans_d[start * w + labels[0]];
        for (i, &y) in labels.iter().enumerate() {
            score += node_d[i * k + y];
            if i + 1 < n {
                score += trans_d[y * w + labels[i + 1]];
            }
        }
        score += trans_d[labels[n - 1] * w + stop];
        Ok(self.push_op(
            Op::CrfGoldScore {
                node: node.0,
                trans: trans.0,
                labels: labels.to_vec(),
            },
            Tensor::scalar(score),
            &[node.0, trans.0],
        ))
    }

    // ── backward pass ────────────────────────────────────────────────────

    /// Accumulate ∂loss/∂tensor into every requires-grad slot reachable from
    /// `loss`. May be called once per tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::State(
                "backward already run on this tape; record a new forward pass first".into(),
            ));
        }
        let loss_slot = &self.slots[loss.0].value;
        if !loss_slot.is_scalar() {
            return Err(Error::Contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                loss_slot.shape
            )));
        }
        self.backward_done = true;
        self.grads = vec![None; self.slots.len()];
        self.grads[loss.0] = Some(vec![1.0]);

        for ni in (0..self.nodes.len()).rev() {
            let output = self.nodes[ni].output;
            let upstream = match &self.grads[output] {
                Some(g) => g.clone(),
                None => continue,
            };
            self.apply_vjp(ni, &upstream);
        }
        Ok(())
    }

    fn acc(&mut self, slot: usize, f: impl FnOnce(&mut [f64])) {
        if !self.slots[slot].requires_grad {
            return;
        }
        let n = self.slots[slot].value.numel();
        let g = self.grads[slot].get_or_insert_with(|| vec![0.0; n]);
        f(g);
    }

    fn apply_vjp(&mut self, node_idx: usize, up: &[f64]) {
        // Ops are matched by value parts only; tensor reads go through
        // self.slots to keep the borrow checker satisfied.
        enum Todo {
            One(usize, Vec<f64>),
            Two(usize, Vec<f64>, usize, Vec<f64>),
            Many(Vec<(usize, Vec<f64>)>),
        }
        let output = self.nodes[node_idx].output;
        let todo = match &self.nodes[node_idx].op {
            Op::MatMul { a, b } => {
                let (m, k) = {
                    let s = &self.slots[*a].value.shape;
                    (s[0], s[1])
                };
                let n = self.slots[*b].value.shape[1];
                let ad = &self.slots[*a].value.data;
                let bd = &self.slots[*b].value.data;
                // dA = dC·Bᵀ
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for p in 0..k {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += up[i * n + j] * bd[p * n + j];
                        }
                        da[i * k + p] = s;
                    }
                }
                // dB = Aᵀ·dC
                let mut db = vec![0.0; k * n];
                for p in 0..k {
                    for i in 0..m {
                        let av = ad[i * k + p];
                        if av == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            db[p * n + j] += av * up[i * n + j];
                        }
                    }
                }
                Todo::Two(*a, da, *b, db)
            }
            Op::MatVec { m, v } => {
                let (r, c) = {
                    let s = &self.slots[*m].value.shape;
                    (s[0], s[1])
                };
                let md = &self.slots[*m].value.data;
                let vd = &self.slots[*v].value.data;
                let mut dm = vec![0.0; r * c];
                let mut dv = vec![0.0; c];
                for i in 0..r {
                    let u = up[i];
                    if u == 0.0 {
                        continue;
                    }
                    for j in 0..c {
                        dm[i * c + j] += u * vd[j];
                        dv[j] += u * md[i * c + j];
                    }
                }
                Todo::Two(*m, dm, *v, dv)
            }
            Op::Add { a, b } => Todo::Two(*a, up.to_vec(), *b, up.to_vec()),
            Op::Sub { a, b } => {
                let neg: Vec<f64> = up.iter().map(|g| -g).collect();
                Todo::Two(*a, up.to_vec(), *b, neg)
            }
            Op::Mul { a, b } => {
                let ad = &self.slots[*a].value.data;
                let bd = &self.slots[*b].value.data;
                let da: Vec<f64> = up.iter().zip(bd).map(|(g, y)| g * y).collect();
                let db: Vec<f64> = up.iter().zip(ad).map(|(g, x)| g * x).collect();
                Todo::Two(*a, da, *b, db)
            }
            Op::AddN { inputs } => {
                Todo::Many(inputs.iter().map(|&i| (i, up.to_vec())).collect())
            }
            Op::Affine { x, scale } => {
                let dx: Vec<f64> = up.iter().map(|g| scale * g).collect();
                Todo::One(*x, dx)
            }
            Op::Clamp { x, lo, hi } => {
                let xd = &self.slots[*x].value.data;
                let dx: Vec<f64> = up
                    .iter()
                    .zip(xd)
                    .map(|(g, v)| if *v > *lo && *v < *hi { *g } else { 0.0 })
                    .collect();
                Todo::One(*x, dx)
            }
            Op::Sigmoid { x } => {
                let out = &self.slots[output].value.data;
                let dx: Vec<f64> = up
                    .iter()
                    .zip(out)
                    .map(|(g, s)| g * s * (1.0 - s))
                    .collect();
                Todo::One(*x, dx)
            }
            Op::Tanh { x } => {
                let out = &self.slots[output].value.data;
                let dx: Vec<f64> = up.iter().zip(out).map(|(g, t)| g * (1.0 - t * t)).collect();
                Todo::One(*x, dx)
            }
            Op::Relu { x } => {
                let xd = &self.slots[*x].value.data;
                let dx: Vec<f64> = up
                    .iter()
                    .zip(xd)
                    .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                    .collect();
                Todo::One(*x, dx)
            }
            Op::Log { x } => {
                let xd = &self.slots[*x].value.data;
                let dx: Vec<f64> = up
                    .iter()
                    .zip(xd)
                    .map(|(g, v)| if *v > LOG_CLAMP { g / v } else { 0.0 })
                    .collect();
                Todo::One(*x, dx)
            }
            Op::Softmax { x } => {
                let out = &self.slots[output].value.data;
                let k = *self.slots[output].value.shape.last().unwrap();
                let mut dx = vec![0.0; out.len()];
                for ((p_row, g_row), dx_row) in
                    out.chunks(k).zip(up.chunks(k)).zip(dx.chunks_mut(k))
                {
                    let inner: f64 = p_row.iter().zip(g_row).map(|(p, g)| p * g).sum();
                    for ((d, p), g) in dx_row.iter_mut().zip(p_row).zip(g_row) {
                        *d = p * (g - inner);
                    }
                }
                Todo::One(*x, dx)
            }
            Op::Concat { a, b, axis } => {
                let sa = &self.slots[*a].value.shape;
                let sb = &self.slots[*b].value.shape;
                let outer: usize = sa[..*axis].iter().product();
                let inner: usize = sa[*axis + 1..].iter().product();
                let (ea, eb) = (sa[*axis], sb[*axis]);
                let mut da = vec![0.0; self.slots[*a].value.numel()];
                let mut db = vec![0.0; self.slots[*b].value.numel()];
                let stride = (ea + eb) * inner;
                for o in 0..outer {
                    let base = o * stride;
                    da[o * ea * inner..(o + 1) * ea * inner]
                        .copy_from_slice(&up[base..base + ea * inner]);
                    db[o * eb * inner..(o + 1) * eb * inner]
                        .copy_from_slice(&up[base + ea * inner..base + stride]);
                }
                Todo::Two(*a, da, *b, db)
            }
            Op::Dropout { x, mask } => {
                let dx: Vec<f64> = up.iter().zip(mask).map(|(g, m)| g * m).collect();
                Todo::One(*x, dx)
            }
            Op::GradReverse { x, lambda } => {
                let dx: Vec<f64> = up.iter().map(|g| -lambda * g).collect();
                Todo::One(*x, dx)
            }
            Op::Sum { x } => {
                let n = self.slots[*x].value.numel();
                Todo::One(*x, vec![up[0]; n])
            }
            Op::Dot { a, b } => {
                let ad = &self.slots[*a].value.data;
                let bd = &self.slots[*b].value.data;
                let g = up[0];
                let da: Vec<f64> = bd.iter().map(|y| g * y).collect();
                let db: Vec<f64> = ad.iter().map(|x| g * x).collect();
                Todo::Two(*a, da, *b, db)
            }
            Op::Narrow { x, start } => {
                let mut dx = vec![0.0; self.slots[*x].value.numel()];
                dx[*start..*start + up.len()].copy_from_slice(up);
                Todo::One(*x, dx)
            }
            Op::Row { x, index } => {
                let cols = self.slots[*x].value.shape[1];
                let mut dx = vec![0.0; self.slots[*x].value.numel()];
                dx[*index * cols..(*index + 1) * cols].copy_from_slice(up);
                Todo::One(*x, dx)
            }
            Op::StackRows { rows } => {
                let k = self.slots[output].value.shape[1];
                Todo::Many(
                    rows.iter()
                        .enumerate()
                        .map(|(i, &r)| (r, up[i * k..(i + 1) * k].to_vec()))
                        .collect(),
                )
            }
            Op::Lookup { table, indices } => {
                let d = self.slots[*table].value.shape[1];
                let mut dt = vec![0.0; self.slots[*table].value.numel()];
                for (pos, &idx) in indices.iter().enumerate() {
                    for j in 0..d {
                        dt[idx * d + j] += up[pos * d + j];
                    }
                }
                Todo::One(*table, dt)
            }
            Op::GatherCols { x, cols } => {
                let k = self.slots[*x].value.shape[1];
                let mut dx = vec![0.0; self.slots[*x].value.numel()];
                for (i, &c) in cols.iter().enumerate() {
                    dx[i * k + c] += up[i];
                }
                Todo::One(*x, dx)
            }
            Op::CrfLogZ { node, trans } => {
                let (n, k) = {
                    let s = &self.slots[*node].value.shape;
                    (s[0], s[1])
                };
                let node_d = &self.slots[*node].value.data;
                let trans_d = &self.slots[*trans].value.data;
                let logz = self.slots[output].value.data[0];
                let g = up[0];
                let (dn, dt) = crf_logz_vjp(node_d, trans_d, n, k, logz, g);
                Todo::Two(*node, dn, *trans, dt)
            }
            Op::CrfGoldScore { node, trans, labels } => {
                let (n, k) = {
                    let s = &self.slots[*node].value.shape;
                    (s[0], s[1])
                };
                let g = up[0];
                let (start, stop, w) = (k, k + 1, k + 2);
                let mut dn = vec![0.0; n * k];
                let mut dt = vec![0.0; w * w];
                dt[start * w + labels[0]] += g;
                for (i, &y) in labels.iter().enumerate() {
                    dn[i * k + y] += g;
                    if i + 1 < n {
                        dt[y * w + labels[i + 1]] += g;
                    }
                }
                dt[labels[n - 1] * w + stop] += g;
                Todo::Two(*node, dn, *trans, dt)
            }
        };

        match todo {
            Todo::One(slot, d) => self.acc(slot, |g| add_into(g, &d)),
            Todo::Two(s1, d1, s2, d2) => {
                self.acc(s1, |g| add_into(g, &d1));
                self.acc(s2, |g| add_into(g, &d2));
            }
            Todo::Many(list) => {
                for (slot, d) in list {
                    self.acc(slot, |g| add_into(g, &d));
                }
            }
        }
    }
}

fn add_into(acc: &mut [f64], delta: &[f64]) {
    for (a, d) in acc.iter_mut().zip(delta) {
        *a += d;
    }
}

fn check_crf_shapes(op: &'static str, node: &[usize], trans: &[usize]) -> Result<(usize, usize)> {
    if node.len() != 2 || node[0] == 0 {
        return Err(Error::Contract(format!(
            "{op}: node scores must be [n×K] with n ≥ 1, got {node:?}"
        )));
    }
    let (n, k) = (node[0], node[1]);
    if trans != [k + 2, k + 2] {
        return Err(Error::ShapeMismatch {
            op,
            lhs: node.to_vec(),
            rhs: trans.to_vec(),
        });
    }
    Ok((n, k))
}

/// Forward lattice messages; alpha[i*k + j] = log Σ over prefixes ending in
/// tag j at position i.
fn crf_forward(node: &[f64], trans: &[f64], n: usize, k: usize) -> Vec<f64> {
    let (start, w) = (k, k + 2);
    let mut alpha = vec![0.0; n * k];
    for j in 0..k {
        alpha[j] = trans[start * w + j] + node[j];
    }
    let mut scratch = vec![0.0; k];
    for i in 1..n {
        for j in 0..k {
            for (p, s) in scratch.iter_mut().enumerate() {
                *s = alpha[(i - 1) * k + p] + trans[p * w + j];
            }
            alpha[i * k + j] = logsumexp(&scratch) + node[i * k + j];
        }
    }
    alpha
}

/// Gradient of log Z: unary marginals for node scores, pairwise plus
/// boundary marginals for the transition matrix.
fn crf_logz_vjp(
    node: &[f64],
    trans: &[f64],
    n: usize,
    k: usize,
    logz: f64,
    g: f64,
) -> (Vec<f64>, Vec<f64>) {
    let (start, stop, w) = (k, k + 1, k + 2);
    let alpha = crf_forward(node, trans, n, k);
    let mut beta = vec![0.0; n * k];
    for j in 0..k {
        beta[(n - 1) * k + j] = trans[j * w + stop];
    }
    let mut scratch = vec![0.0; k];
    for i in (0..n - 1).rev() {
        for j in 0..k {
            for (q, s) in scratch.iter_mut().enumerate() {
                *s = trans[j * w + q] + node[(i + 1) * k + q] + beta[(i + 1) * k + q];
            }
            beta[i * k + j] = logsumexp(&scratch);
        }
    }

    let mut dn = vec![0.0; n * k];
    for i in 0..n {
        for j in 0..k {
            dn[i * k + j] = g * (alpha[i * k + j] + beta[i * k + j] - logz).exp();
        }
    }

    let mut dt = vec![0.0; w * w];
    for j in 0..k {
        // START→j and j→STOP marginals are the boundary unary marginals.
        dt[start * w + j] = g * (alpha[j] + beta[j] - logz).exp();
        dt[j * w + stop] = g * (alpha[(n - 1) * k + j] + beta[(n - 1) * k + j] - logz).exp();
    }
    for i in 0..n - 1 {
        for j in 0..k {
            for q in 0..k {
                let lp = alpha[i * k + j]
                    + trans[j * w + q]
                    + node[(i + 1) * k + q]
                    + beta[(i + 1) * k + q]
                    - logz;
                dt[j * w + q] += g * lp.exp();
            }
        }
    }
    (dn, dt)
}
