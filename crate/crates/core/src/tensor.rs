//! Dense f64 tensors and a Wengert-tape reverse-mode autodiff engine.
//!
//! The op set is deliberately small: exactly what the toy decoder and the
//! loss family need. Everything is 64-bit and single-threaded during graph
//! construction and backward; finished tensors are immutable.

use std::collections::HashMap;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },
    #[error("element count {count} does not match shape {shape:?}")]
    CountMismatch { count: usize, shape: Vec<usize> },
    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },
    #[error("matmul dims incompatible: [{m},{k}] x [{k2},{n}]")]
    MatmulDims { m: usize, k: usize, k2: usize, n: usize },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("index {index} out of range for extent {extent}")]
    IndexOutOfRange { index: usize, extent: usize },
    #[error("invalid slice [{start}, {end}) on axis {axis} with extent {extent}")]
    BadSlice { axis: usize, start: usize, end: usize, extent: usize },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Immutable value with shape metadata; row-major storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Construct from raw data, rejecting NaN/Inf and count mismatches.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let count: usize = shape.iter().product();
        if count != data.len() {
            return Err(TensorError::CountMismatch { count: data.len(), shape });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { index: i });
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(v: f64) -> Result<Self> {
        Tensor::new(vec![1], vec![v])
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let count = shape.iter().product();
        Tensor { shape, data: vec![0.0; count] }
    }

    /// Internal constructor that skips the finiteness check (masked fills
    /// legitimately write -inf for softmax masking).
    fn raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar");
        self.data[0]
    }

    fn rows_cols(&self) -> (usize, usize) {
        let cols = *self.shape.last().unwrap_or(&1);
        let rows = self.data.len() / cols.max(1);
        (rows, cols)
    }
}

/// Node id on a graph; stable for the lifetime of the graph.
pub type TensorId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(TensorId, TensorId),
    Add(TensorId, TensorId),
    Mul(TensorId, TensorId),
    SoftmaxLastDim(TensorId),
    LayerNorm(TensorId, f64),
    Swiglu(TensorId, TensorId),
    EmbedLookup(TensorId, Vec<usize>),
    CrossEntropy(TensorId, Vec<usize>, Vec<f64>),
    Log(TensorId),
    Exp(TensorId),
    Concat(usize, Vec<TensorId>),
    Slice(TensorId, usize, usize, usize),
    Transpose(TensorId),
    MaskedFill(TensorId, Vec<bool>),
    Sum(TensorId),
    Sigmoid(TensorId),
    Relu(TensorId),
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Single-owner computation tape. Nodes are appended in topological order;
/// `backward` walks them in reverse.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients keyed by tensor id, produced by [`Graph::backward`].
pub struct Gradients {
    grads: HashMap<TensorId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: TensorId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    /// Gradient buffer for a leaf, zeros if the leaf was never reached.
    pub fn get_or_zeros(&self, id: TensorId, shape: &[usize]) -> Tensor {
        self.grads
            .get(&id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape.to_vec()))
    }
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Elementwise broadcast: shapes equal, `b` scalar, or `b` equal to the
/// trailing dims of `a`. Anything else is an error.
fn broadcast_ok(a: &[usize], b: &[usize]) -> bool {
    if a == b {
        return true;
    }
    let bn: usize = b.iter().product();
    if bn == 1 {
        return true;
    }
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> TensorId {
        self.nodes.push(Node { op, value, requires_grad });
        self.nodes.len() - 1
    }

    /// Register a leaf tensor. `requires_grad` marks it for backward.
    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> TensorId {
        self.push(Op::Leaf, t, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> TensorId {
        self.leaf(t, false)
    }

    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.constant(Tensor::scalar(v).expect("finite scalar"))
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id].value
    }

    fn requires(&self, id: TensorId) -> bool {
        self.nodes[id].requires_grad
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        if ta.shape.len() != 2 || tb.shape.len() != 2 || ta.shape[1] != tb.shape[0] {
            return Err(TensorError::MatmulDims {
                m: *ta.shape.first().unwrap_or(&0),
                k: *ta.shape.last().unwrap_or(&0),
                k2: *tb.shape.first().unwrap_or(&0),
                n: *tb.shape.last().unwrap_or(&0),
            });
        }
        let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = ta.data[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &tb.data[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Matmul(a, b), Tensor::raw(vec![m, n], out), rg))
    }

    fn elementwise_binary(
        &mut self,
        a: TensorId,
        b: TensorId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<TensorId> {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        if !broadcast_ok(&ta.shape, &tb.shape) {
            return Err(TensorError::ShapeMismatch {
                expected: ta.shape.clone(),
                got: tb.shape.clone(),
            });
        }
        let bn = tb.data.len();
        let out: Vec<f64> = ta
            .data
            .iter()
            .enumerate()
            .map(|(i, &av)| f(av, tb.data[i % bn]))
            .collect();
        let shape = ta.shape.clone();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(op, Tensor::raw(shape, out), rg))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise_binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.elementwise_binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// a - b, provided as a convenience composition.
    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let neg1 = self.scalar(-1.0);
        let nb = self.mul(b, neg1)?;
        self.add(a, nb)
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> Result<TensorId> {
        let s = self.scalar(c);
        self.mul(a, s)
    }

    pub fn softmax_lastdim(&mut self, a: TensorId) -> Result<TensorId> {
        let ta = &self.nodes[a].value;
        let (rows, cols) = ta.rows_cols();
        if cols == 0 {
            return Err(TensorError::Invalid("softmax over empty last dim".into()));
        }
        let mut out = vec![0.0; ta.data.len()];
        for r in 0..rows {
            let row = &ta.data[r * cols..(r + 1) * cols];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let orow = &mut out[r * cols..(r + 1) * cols];
            let mut z = 0.0;
            for (o, &v) in orow.iter_mut().zip(row) {
                *o = (v - mx).exp();
                z += *o;
            }
            for o in orow.iter_mut() {
                *o /= z;
            }
        }
        let shape = ta.shape.clone();
        let rg = self.requires(a);
        Ok(self.push(Op::SoftmaxLastDim(a), Tensor::raw(shape, out), rg))
    }

    /// Pre-affine layer norm over the last dimension.
    pub fn layernorm(&mut self, a: TensorId, eps: f64) -> Result<TensorId> {
        let ta = &self.nodes[a].value;
        let (rows, cols) = ta.rows_cols();
        if cols < 1 {
            return Err(TensorError::Invalid("layernorm over empty last dim".into()));
        }
        let mut out = vec![0.0; ta.data.len()];
        for r in 0..rows {
            let row = &ta.data[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
        }
        let shape = ta.shape.clone();
        let rg = self.requires(a);
        Ok(self.push(Op::LayerNorm(a, eps), Tensor::raw(shape, out), rg))
    }

    /// silu(gate) ⊙ value; same shapes required.
    pub fn swiglu(&mut self, gate: TensorId, value: TensorId) -> Result<TensorId> {
        let (tg, tv) = (&self.nodes[gate].value, &self.nodes[value].value);
        if tg.shape != tv.shape {
            return Err(TensorError::ShapeMismatch {
                expected: tg.shape.clone(),
                got: tv.shape.clone(),
            });
        }
        let out: Vec<f64> = tg
            .data
            .iter()
            .zip(&tv.data)
            .map(|(&g, &v)| silu(g) * v)
            .collect();
        let shape = tg.shape.clone();
        let rg = self.requires(gate) || self.requires(value);
        Ok(self.push(Op::Swiglu(gate, value), Tensor::raw(shape, out), rg))
    }

    /// Row lookup: table [v, d], ids -> [ids.len(), d].
    pub fn embed_lookup(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId> {
        let tt = &self.nodes[table].value;
        if tt.shape.len() != 2 {
            return Err(TensorError::Invalid("embed table must be 2-D".into()));
        }
        let (v, d) = (tt.shape[0], tt.shape[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::IndexOutOfRange { index: id, extent: v });
            }
            out.extend_from_slice(&tt.data[id * d..(id + 1) * d]);
        }
        let rg = self.requires(table);
        Ok(self.push(
            Op::EmbedLookup(table, ids.to_vec()),
            Tensor::raw(vec![ids.len(), d], out),
            rg,
        ))
    }

    /// Weighted mean cross-entropy: logits [n, v], one target id and one
    /// nonnegative weight per row; returns a scalar. At least one weight
    /// must be positive.
    pub fn cross_entropy(
        &mut self,
        logits: TensorId,
        targets: &[usize],
        weights: &[f64],
    ) -> Result<TensorId> {
        let tl = &self.nodes[logits].value;
        let (rows, cols) = tl.rows_cols();
        if targets.len() != rows || weights.len() != rows {
            return Err(TensorError::Invalid(format!(
                "cross_entropy: {} rows vs {} targets / {} weights",
                rows,
                targets.len(),
                weights.len()
            )));
        }
        let wsum: f64 = weights.iter().sum();
        if wsum <= 0.0 {
            return Err(TensorError::Invalid(
                "cross_entropy: all positions masked".into(),
            ));
        }
        let mut loss = 0.0;
        for r in 0..rows {
            if weights[r] == 0.0 {
                continue;
            }
            let t = targets[r];
            if t >= cols {
                return Err(TensorError::IndexOutOfRange { index: t, extent: cols });
            }
            let row = &tl.data[r * cols..(r + 1) * cols];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            loss += weights[r] * (lse - row[t]);
        }
        loss /= wsum;
        let rg = self.requires(logits);
        Ok(self.push(
            Op::CrossEntropy(logits, targets.to_vec(), weights.to_vec()),
            Tensor::raw(vec![1], vec![loss]),
            rg,
        ))
    }

    fn elementwise_unary(&mut self, a: TensorId, f: impl Fn(f64) -> f64, op: Op) -> TensorId {
        let ta = &self.nodes[a].value;
        let out: Vec<f64> = ta.data.iter().map(|&v| f(v)).collect();
        let shape = ta.shape.clone();
        let rg = self.requires(a);
        self.push(op, Tensor::raw(shape, out), rg)
    }

    pub fn log(&mut self, a: TensorId) -> TensorId {
        self.elementwise_unary(a, f64::ln, Op::Log(a))
    }

    pub fn exp(&mut self, a: TensorId) -> TensorId {
        self.elementwise_unary(a, f64::exp, Op::Exp(a))
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        self.elementwise_unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        self.elementwise_unary(a, |v| v.max(0.0), Op::Relu(a))
    }

    pub fn concat(&mut self, axis: usize, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(TensorError::Invalid("concat of zero tensors".into()));
        }
        let first = self.nodes[parts[0]].value.shape.clone();
        if axis >= first.len() {
            return Err(TensorError::Invalid(format!(
                "concat axis {axis} out of range for rank {}",
                first.len()
            )));
        }
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        for &p in parts {
            let s = &self.nodes[p].value.shape;
            if s.len() != first.len()
                || s.iter()
                    .enumerate()
                    .any(|(i, &e)| i != axis && e != first[i])
            {
                return Err(TensorError::ShapeMismatch { expected: first, got: s.clone() });
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let total: usize = out_shape.iter().product();
        let mut out = Vec::with_capacity(total);
        for o in 0..outer {
            for &p in parts {
                let t = &self.nodes[p].value;
                let ext = t.shape[axis];
                let chunk = ext * inner;
                out.extend_from_slice(&t.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(Op::Concat(axis, parts.to_vec()), Tensor::raw(out_shape, out), rg))
    }

    /// Slice [start, end) along `axis`.
    pub fn slice(&mut self, a: TensorId, axis: usize, start: usize, end: usize) -> Result<TensorId> {
        let ta = &self.nodes[a].value;
        if axis >= ta.shape.len() || start >= end || end > ta.shape[axis] {
            return Err(TensorError::BadSlice {
                axis,
                start,
                end,
                extent: ta.shape.get(axis).copied().unwrap_or(0),
            });
        }
        let mut out_shape = ta.shape.clone();
        out_shape[axis] = end - start;
        let outer: usize = ta.shape[..axis].iter().product();
        let inner: usize = ta.shape[axis + 1..].iter().product();
        let ext = ta.shape[axis];
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * ext * inner;
            out.extend_from_slice(&ta.data[base + start * inner..base + end * inner]);
        }
        let rg = self.requires(a);
        Ok(self.push(Op::Slice(a, axis, start, end), Tensor::raw(out_shape, out), rg))
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let ta = &self.nodes[a].value;
        if ta.shape.len() != 2 {
            return Err(TensorError::Invalid("transpose requires a 2-D tensor".into()));
        }
        let (m, n) = (ta.shape[0], ta.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = ta.data[i * n + j];
            }
        }
        let rg = self.requires(a);
        Ok(self.push(Op::Transpose(a), Tensor::raw(vec![n, m], out), rg))
    }

    /// Replace masked positions with `fill`. `fill` may be -inf; that is the
    /// one place non-finite values enter a graph (softmax masking).
    pub fn masked_fill(&mut self, a: TensorId, mask: &[bool], fill: f64) -> Result<TensorId> {
        let ta = &self.nodes[a].value;
        if mask.len() != ta.data.len() {
            return Err(TensorError::Invalid(format!(
                "mask length {} vs tensor length {}",
                mask.len(),
                ta.data.len()
            )));
        }
        let out: Vec<f64> = ta
            .data
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { fill } else { v })
            .collect();
        let shape = ta.shape.clone();
        let rg = self.requires(a);
        Ok(self.push(Op::MaskedFill(a, mask.to_vec()), Tensor::raw(shape, out), rg))
    }

    /// Sum of all elements, scalar out.
    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let s: f64 = self.nodes[a].value.data.iter().sum();
        let rg = self.requires(a);
        self.push(Op::Sum(a), Tensor::raw(vec![1], vec![s]), rg)
    }

    /// Reverse-mode sweep from a scalar loss. Returns gradients for every
    /// `requires_grad` node reached; unreached leaves read back as zeros.
    pub fn backward(&self, loss: TensorId) -> Result<Gradients> {
        let lt = &self.nodes[loss].value;
        if lt.data.len() != 1 {
            return Err(TensorError::NonScalarLoss { shape: lt.shape.clone() });
        }
        let mut grads: HashMap<TensorId, Tensor> = HashMap::new();
        grads.insert(loss, Tensor::raw(vec![1], vec![1.0]));

        for id in (0..=loss).rev() {
            let g = match grads.get(&id) {
                Some(g) => g.clone(),
                None => continue,
            };
            if !self.nodes[id].requires_grad {
                continue;
            }
            match &self.nodes[id].op {
                Op::Leaf => {}
                Op::Matmul(a, b) => {
                    let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                    if self.requires(*a) {
                        // dA = dC · Bᵀ
                        let mut da = vec![0.0; m * k];
                        for i in 0..m {
                            for p in 0..k {
                                let mut acc = 0.0;
                                for j in 0..n {
                                    acc += g.data[i * n + j] * tb.data[p * n + j];
                                }
                                da[i * k + p] = acc;
                            }
                        }
                        accumulate(&mut grads, *a, Tensor::raw(ta.shape.clone(), da));
                    }
                    if self.requires(*b) {
                        // dB = Aᵀ · dC
                        let mut db = vec![0.0; k * n];
                        for p in 0..k {
                            for i in 0..m {
                                let av = ta.data[i * k + p];
                                if av == 0.0 {
                                    continue;
                                }
                                for j in 0..n {
                                    db[p * n + j] += av * g.data[i * n + j];
                                }
                            }
                        }
                        accumulate(&mut grads, *b, Tensor::raw(tb.shape.clone(), db));
                    }
                }
                Op::Add(a, b) => {
                    if self.requires(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.requires(*b) {
                        let tb = &self.nodes[*b].value;
                        accumulate(&mut grads, *b, reduce_to_shape(&g, &tb.shape));
                    }
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let bn = tb.data.len();
                    if self.requires(*a) {
                        let da: Vec<f64> = g
                            .data
                            .iter()
                            .enumerate()
                            .map(|(i, &gv)| gv * tb.data[i % bn])
                            .collect();
                        accumulate(&mut grads, *a, Tensor::raw(ta.shape.clone(), da));
                    }
                    if self.requires(*b) {
                        let db: Vec<f64> = g
                            .data
                            .iter()
                            .zip(&ta.data)
                            .map(|(&gv, &av)| gv * av)
                            .collect();
                        let full = Tensor::raw(ta.shape.clone(), db);
                        accumulate(&mut grads, *b, reduce_to_shape(&full, &tb.shape));
                    }
                }
                Op::SoftmaxLastDim(a) => {
                    if self.requires(*a) {
                        let s = &self.nodes[id].value;
                        let (rows, cols) = s.rows_cols();
                        let mut da = vec![0.0; s.data.len()];
                        for r in 0..rows {
                            let srow = &s.data[r * cols..(r + 1) * cols];
                            let grow = &g.data[r * cols..(r + 1) * cols];
                            let dot: f64 = srow.iter().zip(grow).map(|(&sv, &gv)| sv * gv).sum();
                            for j in 0..cols {
                                da[r * cols + j] = srow[j] * (grow[j] - dot);
                            }
                        }
                        let ta = &self.nodes[*a].value;
                        accumulate(&mut grads, *a, Tensor::raw(ta.shape.clone(), da));
                    }
                }
                Op::LayerNorm(a, eps) => {
                    if self.requires(*a) {
                        let ta = &self.nodes[*a].value;
                        let y = &self.nodes[id].value;
                        let (rows, cols) = ta.rows_cols();
                        let n = cols as f64;
                        let mut da = vec![0.0; ta.data.len()];
                        for r in 0..rows {
                            let xrow = &ta.data[r * cols..(r + 1) * cols];
                            let yrow = &y.data[r * cols..(r + 1) * cols];
                            let grow = &g.data[r * cols..(r + 1) * cols];
                            let mean = xrow.iter().sum::<f64>() / n;
                            let var =
                                xrow.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                            let inv = 1.0 / (var + eps).sqrt();
                            let gmean = grow.iter().sum::<f64>() / n;
                            let gymean =
                                grow.iter().zip(yrow).map(|(&gv, &yv)| gv * yv).sum::<f64>() / n;
                            for j in 0..cols {
                                da[r * cols + j] = inv * (grow[j] - gmean - yrow[j] * gymean);
                            }
                        }
                        accumulate(&mut grads, *a, Tensor::raw(ta.shape.clone(), da));
                    }
                }
                Op::Swiglu(gate, value) => {
                    let (tg, tv) = (&self.nodes[*gate].value, &self.nodes[*value].value);
                    if self.requires(*gate) {
                        let dg: Vec<f64> = g
                            .data
                            .iter()
                            .zip(tg.data.iter().zip(&tv.data))
                            .map(|(&gv, (&a, &b))| {
                                let s = sigmoid(a);
                                gv * b * (s + a * s * (1.0 - s))
                            })
                            .collect();
                        accumulate(&mut grads, *gate, Tensor::raw(tg.shape.clone(), dg));
                    }
                    if self.requires(*value) {
                        let dv: Vec<f64> = g
                            .data
                            .iter()
                            .zip(&tg.data)
                            .map(|(&gv, &a)| gv * silu(a))
                            .collect();
                        accumulate(&mut grads, *value, Tensor::raw(tv.shape.clone(), dv));
                    }
                }
                Op::EmbedLookup(table, ids) => {
                    if self.requires(*table) {
                        let tt = &self.nodes[*table].value;
                        let d = tt.shape[1];
                        let mut dt = vec![0.0; tt.data.len()];
                        for (row, &id_) in ids.iter().enumerate() {
                            for j in 0..d {
                                dt[id_ * d + j] += g.data[row * d + j];
                            }
                        }
                        accumulate(&mut grads, *table, Tensor::raw(tt.shape.clone(), dt));
                    }
                }
                Op::CrossEntropy(logits, targets, weights) => {
                    if self.requires(*logits) {
                        let tl = &self.nodes[*logits].value;
                        let (rows, cols) = tl.rows_cols();
                        let wsum: f64 = weights.iter().sum();
                        let gv = g.data[0];
                        let mut dl = vec![0.0; tl.data.len()];
                        for r in 0..rows {
                            if weights[r] == 0.0 {
                                continue;
                            }
                            let row = &tl.data[r * cols..(r + 1) * cols];
                            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
                            let scale = gv * weights[r] / wsum;
                            for j in 0..cols {
                                let p = (row[j] - mx).exp() / z;
                                dl[r * cols + j] =
                                    scale * (p - if j == targets[r] { 1.0 } else { 0.0 });
                            }
                        }
                        accumulate(&mut grads, *logits, Tensor::raw(tl.shape.clone(), dl));
                    }
                }
                Op::Log(a) => {
                    if self.requires(*a) {
                        let ta = &self.nodes[*a].value;
                        let da: Vec<f64> = g
                            .data
                            .iter()
                            .zip(&ta.data)
                            .map(|(&gv, &av)| gv / av)
                            .collect();
                        accumulate(&mut grads, *a, Tensor::raw(ta.shape.clone(), da));
                    }
                }
                Op::Exp(a) => {
                    if self.requires(*a) {
                        let y = &self.nodes[id].value;
                        let ta = &self.nodes[*a].value;
                        let da: Vec<f64> = g
                            .data
                            .iter()
                            .zip(&y.data)
                            .map(|(&gv, &yv)| gv * yv)
                            .collect();
                        accumulate(&mut grads, *a, Tensor::raw(ta.shape.clone(), da));
                    }
                }
                Op::Sigmoid(a) => {
                    if self.requires(*a) {
                        let y = &self.nodes[id].value;
                        let ta = &self.nodes[*a].value;
                        let da: Vec<f64> = g
                            .data
                            .iter()
                            .zip(&y.data)
                            .map(|(&gv, &yv)| gv * yv * (1.0 - yv))
                            .collect();
                        accumulate(&mut grads, *a, Tensor::raw(ta.shape.clone(), da));
                    }
                }
                Op::Relu(a) => {
                    if self.requires(*a) {
                        let ta = &self.nodes[*a].value;
                        let da: Vec<f64> = g
                            .data
                            .iter()
                            .zip(&ta.data)
                            .map(|(&gv, &av)| if av > 0.0 { gv } else { 0.0 })
                            .collect();
                        accumulate(&mut grads, *a, Tensor::raw(ta.shape.clone(), da));
                    }
                }
                Op::Concat(axis, parts) => {
                    let out_shape = &self.nodes[id].value.shape;
                    let outer: usize = out_shape[..*axis].iter().product();
                    let inner: usize = out_shape[*axis + 1..].iter().product();
                    let total_ext = out_shape[*axis];
                    let mut offset = 0;
                    for &p in parts {
                        let tp = &self.nodes[p].value;
                        let ext = tp.shape[*axis];
                        if self.requires(p) {
                            let mut dp = Vec::with_capacity(tp.data.len());
                            for o in 0..outer {
                                let base = (o * total_ext + offset) * inner;
                                dp.extend_from_slice(&g.data[base..base + ext * inner]);
                            }
                            accumulate(&mut grads, p, Tensor::raw(tp.shape.clone(), dp));
                        }
                        offset += ext;
                    }
                }
                Op::Slice(a, axis, start, end) => {
                    if self.requires(*a) {
                        let ta = &self.nodes[*a].value;
                        let outer: usize = ta.shape[..*axis].iter().product();
                        let inner: usize = ta.shape[*axis + 1..].iter().product();
                        let ext = ta.shape[*axis];
                        let w = end - start;
                        let mut da = vec![0.0; ta.data.len()];
                        for o in 0..outer {
                            let src = o * w * inner;
                            let dst = (o * ext + start) * inner;
                            da[dst..dst + w * inner].copy_from_slice(&g.data[src..src + w * inner]);
                        }
                        accumulate(&mut grads, *a, Tensor::raw(ta.shape.clone(), da));
                    }
                }
                Op::Transpose(a) => {
                    if self.requires(*a) {
                        let ta = &self.nodes[*a].value;
                        let (m, n) = (ta.shape[0], ta.shape[1]);
                        let mut da = vec![0.0; m * n];
                        for i in 0..n {
                            for j in 0..m {
                                da[j * n + i] = g.data[i * m + j];
                            }
                        }
                        accumulate(&mut grads, *a, Tensor::raw(ta.shape.clone(), da));
                    }
                }
                Op::MaskedFill(a, mask) => {
                    if self.requires(*a) {
                        let ta = &self.nodes[*a].value;
                        let da: Vec<f64> = g
                            .data
                            .iter()
                            .zip(mask)
                            .map(|(&gv, &m)| if m { 0.0 } else { gv })
                            .collect();
                        accumulate(&mut grads, *a, Tensor::raw(ta.shape.clone(), da));
                    }
                }
                Op::Sum(a) => {
                    if self.requires(*a) {
                        let ta = &self.nodes[*a].value;
                        let gv = g.data[0];
                        accumulate(
                            &mut grads,
                            *a,
                            Tensor::raw(ta.shape.clone(), vec![gv; ta.data.len()]),
                        );
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut HashMap<TensorId, Tensor>, id: TensorId, g: Tensor) {
    match grads.get_mut(&id) {
        Some(existing) => {
            for (e, v) in existing.data.iter_mut().zip(&g.data) {
                *e += v;
            }
        }
        None => {
            grads.insert(id, g);
        }
    }
}

/// Sum-reduce a gradient onto the (smaller) broadcast shape.
fn reduce_to_shape(g: &Tensor, target: &[usize]) -> Tensor {
    let tn: usize = target.iter().product();
    if g.data.len() == tn {
        return Tensor::raw(target.to_vec(), g.data.clone());
    }
    let mut out = vec![0.0; tn];
    for (i, &v) in g.data.iter().enumerate() {
        out[i % tn] += v;
    }
    Tensor::raw(target.to_vec(), out)
}

/// Max relative error between analytic gradients and central differences,
/// over all coordinates of all leaves. `f` rebuilds the scalar loss from the
/// supplied leaf values, so every evaluation runs on a fresh graph.
pub fn grad_check<F>(f: F, points: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[TensorId]) -> Result<TensorId>,
{
    if step <= 0.0 {
        return Err(TensorError::Invalid("grad_check step must be > 0".into()));
    }
    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<TensorId> = tensors.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let loss = f(&mut g, &ids)?;
        if g.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss { shape: g.value(loss).shape().to_vec() });
        }
        Ok(g.value(loss).item())
    };

    // Analytic pass.
    let mut g = Graph::new();
    let ids: Vec<TensorId> = points.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = f(&mut g, &ids)?;
    if g.value(loss).len() != 1 {
        return Err(TensorError::NonScalarLoss { shape: g.value(loss).shape().to_vec() });
    }
    let grads = g.backward(loss)?;

    let mut max_err: f64 = 0.0;
    let mut work: Vec<Tensor> = points.to_vec();
    for (pi, p) in points.iter().enumerate() {
        let analytic = grads.get_or_zeros(ids[pi], p.shape());
        for c in 0..p.len() {
            let orig = p.data()[c];
            work[pi].data[c] = orig + step;
            let up = eval(&work)?;
            work[pi].data[c] = orig - step;
            let down = eval(&work)?;
            work[pi].data[c] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.data()[c];
            let err = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
            max_err = max_err.max(err);
        }
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn rejects_non_finite_creation() {
        assert!(Tensor::new(vec![2], vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::new(vec![2], vec![f64::INFINITY, 0.0]).is_err());
    }

    #[test]
    fn rejects_count_mismatch() {
        assert!(Tensor::new(vec![2, 2], vec![1.0, 2.0]).is_err());
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let eye = g.constant(
            Tensor::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap(),
        );
        let a = g.constant(
            Tensor::new(vec![3, 3], vec![2., -1., 3., 0.5, 4., 7., -2., 1., 1.]).unwrap(),
        );
        let out = g.matmul(eye, a).unwrap();
        assert_eq!(g.value(out).data(), g.value(a).data());
    }

    #[test]
    fn matmul_shape_error_reports_dims() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![2, 2]));
        let err = g.matmul(a, b).unwrap_err();
        assert!(matches!(err, TensorError::MatmulDims { k: 3, k2: 2, .. }));
    }

    #[test]
    fn softmax_uniform_on_zeros() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::new(vec![3], vec![0.0, 0.0, 0.0]).unwrap());
        let s = g.softmax_lastdim(z).unwrap();
        for &v in g.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rows_are_simplices() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut g = Graph::new();
        let x = g.constant(rand_tensor(&mut rng, vec![5, 8]));
        let s = g.softmax_lastdim(x).unwrap();
        let t = g.value(s);
        for r in 0..5 {
            let row = &t.data()[r * 8..(r + 1) * 8];
            assert!(row.iter().all(|&v| v >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layernorm_centers_and_scales() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut g = Graph::new();
        let x = g.constant(rand_tensor(&mut rng, vec![4, 16]));
        let y = g.layernorm(x, 1e-5).unwrap();
        let t = g.value(y);
        for r in 0..4 {
            let row = &t.data()[r * 16..(r + 1) * 16];
            let mean = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-4); // eps shifts variance slightly
        }
    }

    #[test]
    fn swiglu_zero_input_zero_output() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(vec![2, 4]));
        let out = g.swiglu(z, z).unwrap();
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn product_rule_backward() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(2.0).unwrap(), true);
        let y = g.leaf(Tensor::scalar(3.0).unwrap(), true);
        let loss = g.mul(x, y).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 3.0);
        assert_eq!(grads.get(y).unwrap().item(), 2.0);
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        let mut g = Graph::new();
        let z = g.leaf(
            Tensor::new(vec![4], vec![0.3, -1.2, 0.9, 2.0]).unwrap(),
            true,
        );
        let s = g.softmax_lastdim(z).unwrap();
        let loss = g.sum(s);
        let grads = g.backward(loss).unwrap();
        for &v in grads.get(z).unwrap().data() {
            assert!(v.abs() < 1e-14);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(vec![2, 2]), true);
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn three_layer_composition_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x = rand_tensor(&mut rng, vec![3, 4]);
        let w1 = rand_tensor(&mut rng, vec![4, 5]);
        let w2 = rand_tensor(&mut rng, vec![5, 5]);
        let w3 = rand_tensor(&mut rng, vec![5, 2]);
        let err = grad_check(
            |g, ids| {
                let h1 = g.matmul(ids[0], ids[1])?;
                let h1 = g.sigmoid(h1);
                let h2 = g.matmul(h1, ids[2])?;
                let h2 = g.layernorm(h2, 1e-5)?;
                let h3 = g.matmul(h2, ids[3])?;
                let s = g.softmax_lastdim(h3)?;
                let l = g.log(s);
                Ok(g.sum(l))
            },
            &[x, w1, w2, w3],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-5, "relative error {err}");
    }

    #[test]
    fn grad_check_quadratic_is_tight() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, vec![6]);
        let err = grad_check(
            |g, ids| {
                let sq = g.mul(ids[0], ids[0])?;
                let s = g.sum(sq);
                g.scale(s, 0.5)
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-7, "relative error {err}");
    }

    #[test]
    fn grad_check_rejects_zero_step() {
        let x = Tensor::scalar(1.0).unwrap();
        assert!(grad_check(|g, ids| Ok(g.sum(ids[0])), &[x], 0.0).is_err());
    }

    /// One scalar probe per primitive; the weighting tensor keeps the sum
    /// from collapsing to a constant (e.g. softmax rows always sum to 1).
    #[test]
    fn every_primitive_matches_finite_differences() {
        type Builder = fn(&mut Graph, &[TensorId]) -> Result<TensorId>;
        let probes: Vec<(&str, Builder)> = vec![
            ("matmul", |g, ids| {
                let m = g.matmul(ids[0], ids[2])?;
                let w = g.mul(m, ids[3])?;
                Ok(g.sum(w))
            }),
            ("add", |g, ids| {
                let a = g.add(ids[0], ids[1])?;
                let w = g.mul(a, ids[4])?;
                Ok(g.sum(w))
            }),
            ("mul", |g, ids| {
                let a = g.mul(ids[0], ids[1])?;
                Ok(g.sum(a))
            }),
            ("softmax-lastdim", |g, ids| {
                let s = g.softmax_lastdim(ids[0])?;
                let w = g.mul(s, ids[4])?;
                Ok(g.sum(w))
            }),
            ("layernorm", |g, ids| {
                let l = g.layernorm(ids[0], 1e-5)?;
                let w = g.mul(l, ids[4])?;
                Ok(g.sum(w))
            }),
            ("swiglu", |g, ids| {
                let s = g.swiglu(ids[0], ids[1])?;
                Ok(g.sum(s))
            }),
            ("embed-lookup", |g, ids| {
                let l = g.embed_lookup(ids[5], &[0, 2, 4, 2])?;
                let sq = g.mul(l, l)?;
                Ok(g.sum(sq))
            }),
            ("cross-entropy", |g, ids| {
                g.cross_entropy(ids[0], &[0, 3, 1], &[1.0, 0.0, 2.0])
            }),
            ("log", |g, ids| {
                let e = g.exp(ids[0]);
                let l = g.log(e);
                let w = g.mul(l, ids[4])?;
                Ok(g.sum(w))
            }),
            ("exp", |g, ids| {
                let e = g.exp(ids[0]);
                Ok(g.sum(e))
            }),
            ("concat", |g, ids| {
                let c = g.concat(1, &[ids[0], ids[1]])?;
                let sq = g.mul(c, c)?;
                Ok(g.sum(sq))
            }),
            ("slice", |g, ids| {
                let s = g.slice(ids[0], 1, 1, 3)?;
                let sq = g.mul(s, s)?;
                Ok(g.sum(sq))
            }),
            ("transpose", |g, ids| {
                let t = g.transpose(ids[0])?;
                let sq = g.mul(t, t)?;
                Ok(g.sum(sq))
            }),
            ("masked-fill", |g, ids| {
                let mask: Vec<bool> = (0..12).map(|i| i % 5 == 0).collect();
                let m = g.masked_fill(ids[0], &mask, 0.25)?;
                let w = g.mul(m, ids[4])?;
                Ok(g.sum(w))
            }),
            ("sum", |g, ids| Ok(g.sum(ids[0]))),
            ("sigmoid", |g, ids| {
                let s = g.sigmoid(ids[0]);
                let w = g.mul(s, ids[4])?;
                Ok(g.sum(w))
            }),
            ("relu", |g, ids| {
                let r = g.relu(ids[0]);
                let w = g.mul(r, ids[4])?;
                Ok(g.sum(w))
            }),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (name, probe) in &probes {
            for trial in 0..20 {
                let a = rand_tensor(&mut rng, vec![3, 4]);
                let b = rand_tensor(&mut rng, vec![3, 4]);
                let w = rand_tensor(&mut rng, vec![4, 3]);
                let wt33 = rand_tensor(&mut rng, vec![3, 3]);
                let wt = rand_tensor(&mut rng, vec![3, 4]);
                let table = rand_tensor(&mut rng, vec![5, 4]);
                let err =
                    grad_check(*probe, &[a, b, w, wt33, wt, table], 1e-6).unwrap();
                assert!(err <= 1e-5, "{name} trial {trial}: relative error {err}");
            }
        }
    }

    #[test]
    fn determinism_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_tensor(&mut rng, vec![4, 4]);
        let w = rand_tensor(&mut rng, vec![4, 4]);
        let run = |x: &Tensor, w: &Tensor| -> Vec<f64> {
            let mut g = Graph::new();
            let xi = g.constant(x.clone());
            let wi = g.constant(w.clone());
            let mm = g.matmul(xi, wi).unwrap();
            let ln = g.layernorm(mm, 1e-5).unwrap();
            let sm = g.softmax_lastdim(ln).unwrap();
            g.value(sm).data().to_vec()
        };
        let r1 = run(&x, &w);
        let r2 = run(&x, &w);
        assert_eq!(r1, r2); // bitwise
    }

    #[test]
    fn cross_entropy_all_masked_rejected() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::zeros(vec![2, 3]));
        assert!(g.cross_entropy(logits, &[0, 1], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn embed_lookup_out_of_range() {
        let mut g = Graph::new();
        let table = g.constant(Tensor::zeros(vec![4, 2]));
        assert!(g.embed_lookup(table, &[4]).is_err());
    }
}
