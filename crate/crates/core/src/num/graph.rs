//! Tape-based reverse-mode automatic differentiation.
//!
//! A `Graph` records every operation as a node in a flat tape; `Var` is an
//! index into that tape. `backward` walks the tape once in reverse and
//! accumulates gradients into every node that (transitively) depends on a
//! trainable leaf. Gradients are exact analytic forms; a finite-difference
//! harness in the tests cross-checks each operation.
//!
//! The graph is single-use: after `backward` no further operations may be
//! recorded. Dropping the graph frees all stored values and gradients.

use crate::error::{Error, Result};
use crate::num::tensor::Tensor;

/// Handle to a node in the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Op {
    Leaf,
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Matmul(Var, Var),
    MatmulNT(Var, Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    Abs(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LogSumExp(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, eps: f64 },
    Embedding { table: Var, ids: Vec<usize> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    BroadcastRow { v: Var, rows: usize },
    RepeatRows { x: Var, reps: Vec<usize> },
    SliceRows { x: Var, start: usize },
    SelectRows { x: Var, idx: Vec<usize> },
    Pick { x: Var, cols: Vec<usize> },
    Mean(Var),
    Sum(Var),
    MeanRows(Var),
    CrossAdd(Var, Var),
    DepthwiseConv { x: Var, weight: Var, bias: Var },
    PairRows(Var),
    /// Scalar value computed outside the tape with a precomputed gradient
    /// with respect to `x` (used for the transducer loss).
    ScalarWithGrad { x: Var, gx: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs: bool,
}

/// The tape. All operation constructors validate shapes and return a
/// structured error naming the operation on mismatch.
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    done: bool,
}

// ── dense matmul kernels ────────────────────────────────────────────────

/// out[m,n] += a[m,k] · b[k,n]
fn matmul_nn_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av != 0.0 {
                let b_row = &b[p * n..(p + 1) * n];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o += av * bv;
                }
            }
        }
    }
}

/// out[m,n] += a[m,k] · b[n,k]ᵀ
fn matmul_nt_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            *o += acc;
        }
    }
}

/// out[k,n] += a[m,k]ᵀ · b[m,n]
fn matmul_tn_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av != 0.0 {
                let out_row = &mut out[p * n..(p + 1) * n];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o += av * bv;
                }
            }
        }
    }
}

/// Numerically stable log(Σ exp) over a slice.
pub fn logsumexp_slice(xs: &[f64]) -> f64 {
    let mx = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let s: f64 = xs.iter().map(|&x| (x - mx).exp()).sum();
    mx + s.ln()
}

fn gbuf<'a>(
    grads: &'a mut [Option<Vec<f64>>],
    nodes: &[Node],
    p: Var,
) -> &'a mut [f64] {
    let numel = nodes[p.0].value.numel();
    grads[p.0].get_or_insert_with(|| vec![0.0; numel]).as_mut_slice()
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new(), done: false }
    }

    /// Number of nodes recorded so far.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// The forward value of a node.
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the back-propagated scalar with respect to node `v`,
    /// if the node participates in gradient flow.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs
    }

    fn push(&mut self, value: Tensor, op: Op, needs: bool) -> Var {
        self.nodes.push(Node { value, op, needs });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn check_open(&self, op: &'static str) -> Result<()> {
        if self.done {
            Err(Error::Contract(format!(
                "graph already back-propagated; cannot record `{op}`"
            )))
        } else {
            Ok(())
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs
    }

    // ── leaves ──────────────────────────────────────────────────────────

    /// Insert a tensor as a leaf. `requires_grad` marks it trainable.
    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    /// Insert a tensor as a non-trainable constant.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    /// Copy a node's value back in as a constant, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    // ── elementwise and broadcast arithmetic ────────────────────────────

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Shape {
                op,
                detail: format!("operand shapes {sa:?} vs {sb:?}"),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_open("add")?;
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Add(a, b), needs))
    }

    /// Add a length-c row vector to every row of an [r, c] matrix.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_open("add_row")?;
        let (r, c) = self.value(a).dims2();
        if self.value(b).numel() != c {
            return Err(Error::Shape {
                op: "add_row",
                detail: format!(
                    "matrix {:?} + row of {} elements",
                    self.value(a).shape(),
                    self.value(b).numel()
                ),
            });
        }
        let bv = self.value(b).data();
        let mut data = Vec::with_capacity(r * c);
        for row in 0..r {
            for (j, &x) in self.value(a).row(row).iter().enumerate() {
                data.push(x + bv[j]);
            }
        }
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::AddRow(a, b), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_open("sub")?;
        self.same_shape("sub", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Sub(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_open("mul")?;
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Mul(a, b), needs))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.check_open("scale")?;
        let data = self.value(a).data().iter().map(|x| x * c).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let needs = self.needs(a);
        Ok(self.push(t, Op::Scale(a, c), needs))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.check_open("add_scalar")?;
        let data = self.value(a).data().iter().map(|x| x + c).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let needs = self.needs(a);
        Ok(self.push(t, Op::AddScalar(a), needs))
    }

    // ── matrix products ─────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_open("matmul")?;
        let (m, k) = self.value(a).dims2();
        let (k2, n) = self.value(b).dims2();
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                detail: format!(
                    "{:?} · {:?}: inner dims {k} vs {k2}",
                    self.value(a).shape(),
                    self.value(b).shape()
                ),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_nn_acc(&mut out, self.value(a).data(), self.value(b).data(), m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Matmul(a, b), needs))
    }

    /// a[m,k] · b[n,k]ᵀ → [m,n]; avoids materializing transposed weights.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_open("matmul_nt")?;
        let (m, k) = self.value(a).dims2();
        let (n, k2) = self.value(b).dims2();
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul_nt",
                detail: format!(
                    "{:?} · {:?}ᵀ: inner dims {k} vs {k2}",
                    self.value(a).shape(),
                    self.value(b).shape()
                ),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_nt_acc(&mut out, self.value(a).data(), self.value(b).data(), m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::MatmulNT(a, b), needs))
    }

    // ── elementwise nonlinearities ──────────────────────────────────────

    fn map_unary(
        &mut self,
        name: &'static str,
        a: Var,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        self.check_open(name)?;
        let data: Vec<f64> = self.value(a).data().iter().map(|&x| f(x)).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let needs = self.needs(a);
        Ok(self.push(t, op, needs))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map_unary("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.map_unary("tanh", a, f64::tanh, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.map_unary("exp", a, f64::exp, Op::Exp(a))
    }

    /// Natural logarithm; every element must be strictly positive.
    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.check_open("ln")?;
        if let Some(&bad) = self.value(a).data().iter().find(|&&x| x <= 0.0) {
            return Err(Error::Numeric(format!("ln of non-positive value {bad}")));
        }
        self.map_unary("ln", a, f64::ln, Op::Ln(a))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.map_unary("abs", a, f64::abs, Op::Abs(a))
    }

    // ── row-wise softmax family ─────────────────────────────────────────

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.check_open("softmax")?;
        let (r, c) = self.value(a).dims2();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = self.value(a).row(i);
            let lse = logsumexp_slice(row);
            data.extend(row.iter().map(|&x| (x - lse).exp()));
        }
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let needs = self.needs(a);
        Ok(self.push(t, Op::Softmax(a), needs))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.check_open("log_softmax")?;
        let (r, c) = self.value(a).dims2();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = self.value(a).row(i);
            let lse = logsumexp_slice(row);
            data.extend(row.iter().map(|&x| x - lse));
        }
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let needs = self.needs(a);
        Ok(self.push(t, Op::LogSoftmax(a), needs))
    }

    /// Row-wise log(Σ exp): [r, c] → [r]; a rank-1 input yields one value.
    pub fn logsumexp(&mut self, a: Var) -> Result<Var> {
        self.check_open("logsumexp")?;
        let (r, _) = self.value(a).dims2();
        let data: Vec<f64> = (0..r).map(|i| logsumexp_slice(self.value(a).row(i))).collect();
        let t = Tensor::vector(data);
        let needs = self.needs(a);
        Ok(self.push(t, Op::LogSumExp(a), needs))
    }

    // ── normalization ───────────────────────────────────────────────────

    /// Row-wise layer normalization with learned gain and bias (length c).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        self.check_open("layer_norm")?;
        let (r, c) = self.value(x).dims2();
        if self.value(gain).numel() != c || self.value(bias).numel() != c {
            return Err(Error::Shape {
                op: "layer_norm",
                detail: format!(
                    "x {:?} with gain {} and bias {} elements",
                    self.value(x).shape(),
                    self.value(gain).numel(),
                    self.value(bias).numel()
                ),
            });
        }
        if eps <= 0.0 {
            return Err(Error::InvalidArg(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let g = self.value(gain).data().to_vec();
        let b = self.value(bias).data().to_vec();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = self.value(x).row(i);
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let sd = (var + eps).sqrt();
            for (j, &v) in row.iter().enumerate() {
                data.push((v - mu) / sd * g[j] + b[j]);
            }
        }
        let t = Tensor::new(self.value(x).shape().to_vec(), data)?;
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(t, Op::LayerNorm { x, gain, bias, eps }, needs))
    }

    // ── lookups, reshapes, reductions ───────────────────────────────────

    /// Row lookup: table [v, d] and ids (each < v) → [ids.len(), d].
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.check_open("embedding")?;
        let (v, d) = self.value(table).dims2();
        if ids.is_empty() {
            return Err(Error::InvalidArg("embedding: empty id list".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::InvalidArg(format!(
                "embedding id {bad} out of range for table with {v} rows"
            )));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(self.value(table).row(i));
        }
        let t = Tensor::new(vec![ids.len(), d], data)?;
        let needs = self.needs(table);
        Ok(self.push(t, Op::Embedding { table, ids: ids.to_vec() }, needs))
    }

    /// Concatenate along columns: all inputs share the row count.
    pub fn concat_cols(&mut self, vs: &[Var]) -> Result<Var> {
        self.check_open("concat_cols")?;
        if vs.is_empty() {
            return Err(Error::InvalidArg("concat_cols: no inputs".into()));
        }
        let (r, _) = self.value(vs[0]).dims2();
        let mut total_c = 0;
        for &v in vs {
            let (ri, ci) = self.value(v).dims2();
            if ri != r {
                return Err(Error::Shape {
                    op: "concat_cols",
                    detail: format!("row counts differ: {r} vs {ri}"),
                });
            }
            total_c += ci;
        }
        let mut data = Vec::with_capacity(r * total_c);
        for i in 0..r {
            for &v in vs {
                data.extend_from_slice(self.value(v).row(i));
            }
        }
        let t = Tensor::new(vec![r, total_c], data)?;
        let needs = vs.iter().any(|&v| self.needs(v));
        Ok(self.push(t, Op::ConcatCols(vs.to_vec()), needs))
    }

    /// Concatenate along rows: all inputs share the column count.
    pub fn concat_rows(&mut self, vs: &[Var]) -> Result<Var> {
        self.check_open("concat_rows")?;
        if vs.is_empty() {
            return Err(Error::InvalidArg("concat_rows: no inputs".into()));
        }
        let (_, c) = self.value(vs[0]).dims2();
        let mut total_r = 0;
        for &v in vs {
            let (ri, ci) = self.value(v).dims2();
            if ci != c {
                return Err(Error::Shape {
                    op: "concat_rows",
                    detail: format!("column counts differ: {c} vs {ci}"),
                });
            }
            total_r += ri;
        }
        let mut data = Vec::with_capacity(total_r * c);
        for &v in vs {
            data.extend_from_slice(self.value(v).data());
        }
        let t = Tensor::new(vec![total_r, c], data)?;
        let needs = vs.iter().any(|&v| self.needs(v));
        Ok(self.push(t, Op::ConcatRows(vs.to_vec()), needs))
    }

    /// Tile a length-c vector into `rows` identical rows.
    pub fn broadcast_row(&mut self, v: Var, rows: usize) -> Result<Var> {
        self.check_open("broadcast_row")?;
        if rows == 0 {
            return Err(Error::InvalidArg("broadcast_row: zero rows".into()));
        }
        let c = self.value(v).numel();
        let src = self.value(v).data().to_vec();
        let mut data = Vec::with_capacity(rows * c);
        for _ in 0..rows {
            data.extend_from_slice(&src);
        }
        let t = Tensor::new(vec![rows, c], data)?;
        let needs = self.needs(v);
        Ok(self.push(t, Op::BroadcastRow { v, rows }, needs))
    }

    /// Repeat row u of x reps[u] times, in order. Output has Σ reps rows.
    pub fn repeat_rows(&mut self, x: Var, reps: &[usize]) -> Result<Var> {
        self.check_open("repeat_rows")?;
        let (r, c) = self.value(x).dims2();
        if reps.len() != r {
            return Err(Error::Shape {
                op: "repeat_rows",
                detail: format!("{r} rows but {} repeat counts", reps.len()),
            });
        }
        let total: usize = reps.iter().sum();
        if total == 0 {
            return Err(Error::InvalidArg("repeat_rows: all repeat counts are zero".into()));
        }
        let mut data = Vec::with_capacity(total * c);
        for (u, &n) in reps.iter().enumerate() {
            for _ in 0..n {
                data.extend_from_slice(self.value(x).row(u));
            }
        }
        let t = Tensor::new(vec![total, c], data)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::RepeatRows { x, reps: reps.to_vec() }, needs))
    }

    /// Contiguous row slice [start, end).
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        self.check_open("slice_rows")?;
        let (r, c) = self.value(x).dims2();
        if start >= end || end > r {
            return Err(Error::Shape {
                op: "slice_rows",
                detail: format!("slice [{start}, {end}) of {r} rows"),
            });
        }
        let data = self.value(x).data()[start * c..end * c].to_vec();
        let t = Tensor::new(vec![end - start, c], data)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::SliceRows { x, start }, needs))
    }

    /// Gather rows by index (repeats allowed).
    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        self.check_open("select_rows")?;
        let (r, c) = self.value(x).dims2();
        if idx.is_empty() {
            return Err(Error::InvalidArg("select_rows: empty index list".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::Shape {
                op: "select_rows",
                detail: format!("row index {bad} out of range for {r} rows"),
            });
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.value(x).row(i));
        }
        let t = Tensor::new(vec![idx.len(), c], data)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::SelectRows { x, idx: idx.to_vec() }, needs))
    }

    /// One element per row: y[i] = x[i, cols[i]]. Output is rank 1.
    pub fn pick(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        self.check_open("pick")?;
        let (r, c) = self.value(x).dims2();
        if cols.len() != r {
            return Err(Error::Shape {
                op: "pick",
                detail: format!("{r} rows but {} column indices", cols.len()),
            });
        }
        if let Some(&bad) = cols.iter().find(|&&j| j >= c) {
            return Err(Error::Shape {
                op: "pick",
                detail: format!("column index {bad} out of range for {c} columns"),
            });
        }
        let data: Vec<f64> = cols.iter().enumerate().map(|(i, &j)| self.value(x).row(i)[j]).collect();
        let t = Tensor::vector(data);
        let needs = self.needs(x);
        Ok(self.push(t, Op::Pick { x, cols: cols.to_vec() }, needs))
    }

    /// Mean over all elements → scalar.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.check_open("mean")?;
        let n = self.value(x).numel() as f64;
        let s: f64 = self.value(x).data().iter().sum();
        let needs = self.needs(x);
        Ok(self.push(Tensor::scalar(s / n), Op::Mean(x), needs))
    }

    /// Sum over all elements → scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check_open("sum")?;
        let s: f64 = self.value(x).data().iter().sum();
        let needs = self.needs(x);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), needs))
    }

    /// Column means over rows: [r, c] → rank-1 [c].
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        self.check_open("mean_rows")?;
        let (r, c) = self.value(x).dims2();
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, &v) in out.iter_mut().zip(self.value(x).row(i)) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= r as f64;
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::vector(out), Op::MeanRows(x), needs))
    }

    /// All-pairs row sums: a [t, d] and b [u, d] → [t·u, d] where row
    /// t_i·u + u_i is a.row(t_i) + b.row(u_i). The joint lattice builder.
    pub fn cross_add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_open("cross_add")?;
        let (t, d) = self.value(a).dims2();
        let (u, d2) = self.value(b).dims2();
        if d != d2 {
            return Err(Error::Shape {
                op: "cross_add",
                detail: format!(
                    "{:?} × {:?}: feature dims {d} vs {d2}",
                    self.value(a).shape(),
                    self.value(b).shape()
                ),
            });
        }
        let mut data = Vec::with_capacity(t * u * d);
        for ti in 0..t {
            let ar = self.value(a).row(ti);
            for ui in 0..u {
                for (x, y) in ar.iter().zip(self.value(b).row(ui)) {
                    data.push(x + y);
                }
            }
        }
        let tns = Tensor::new(vec![t * u, d], data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(tns, Op::CrossAdd(a, b), needs))
    }

    /// Per-channel 1-D convolution over rows with zero padding; weight is
    /// [k, d] with k odd, bias is [d].
    pub fn depthwise_conv(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        self.check_open("depthwise_conv")?;
        let (t, d) = self.value(x).dims2();
        let (k, dw) = self.value(weight).dims2();
        if dw != d || self.value(bias).numel() != d {
            return Err(Error::Shape {
                op: "depthwise_conv",
                detail: format!(
                    "x {:?}, weight {:?}, bias {}",
                    self.value(x).shape(),
                    self.value(weight).shape(),
                    self.value(bias).numel()
                ),
            });
        }
        if k % 2 == 0 {
            return Err(Error::InvalidArg(format!("depthwise_conv kernel must be odd, got {k}")));
        }
        let pad = k / 2;
        let mut data = vec![0.0; t * d];
        for ti in 0..t {
            let out_row = &mut data[ti * d..(ti + 1) * d];
            out_row.copy_from_slice(self.value(bias).data());
            for j in 0..k {
                let src = ti as isize + j as isize - pad as isize;
                if src < 0 || src >= t as isize {
                    continue;
                }
                let xr = self.value(x).row(src as usize);
                let wr = self.value(weight).row(j);
                for ((o, &xv), &wv) in out_row.iter_mut().zip(xr).zip(wr) {
                    *o += xv * wv;
                }
            }
        }
        let tns = Tensor::new(vec![t, d], data)?;
        let needs = self.needs(x) || self.needs(weight) || self.needs(bias);
        Ok(self.push(tns, Op::DepthwiseConv { x, weight, bias }, needs))
    }

    /// Halve the time axis by concatenating adjacent row pairs:
    /// [t, d] → [⌈t/2⌉, 2d]. An odd final row pairs with itself.
    pub fn pair_rows(&mut self, x: Var) -> Result<Var> {
        self.check_open("pair_rows")?;
        let (t, d) = self.value(x).dims2();
        let out_t = t.div_ceil(2);
        let mut data = Vec::with_capacity(out_t * 2 * d);
        for i in 0..out_t {
            data.extend_from_slice(self.value(x).row(2 * i));
            let second = (2 * i + 1).min(t - 1);
            data.extend_from_slice(self.value(x).row(second));
        }
        let tns = Tensor::new(vec![out_t, 2 * d], data)?;
        let needs = self.needs(x);
        Ok(self.push(tns, Op::PairRows(x), needs))
    }

    /// Inject an externally computed scalar together with its exact
    /// gradient with respect to `x`. Backward adds `upstream · gx`.
    pub fn scalar_with_grad(&mut self, x: Var, value: f64, gx: Vec<f64>) -> Result<Var> {
        self.check_open("scalar_with_grad")?;
        if gx.len() != self.value(x).numel() {
            return Err(Error::Shape {
                op: "scalar_with_grad",
                detail: format!(
                    "gradient has {} elements for input of {}",
                    gx.len(),
                    self.value(x).numel()
                ),
            });
        }
        if !value.is_finite() {
            return Err(Error::Numeric(format!("scalar_with_grad value {value} is not finite")));
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::scalar(value), Op::ScalarWithGrad { x, gx }, needs))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Single use: recording further
    /// operations or running backward again afterwards is an error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.done {
            return Err(Error::Contract("backward already ran on this graph".into()));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::InvalidArg(format!(
                "backward needs a scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let lv = self.value(loss).item()?;
        if !lv.is_finite() {
            return Err(Error::Numeric(format!("backward on non-finite loss {lv}")));
        }
        self.done = true;
        self.grads[loss.0] = Some(vec![1.0]);

        for i in (0..self.nodes.len()).rev() {
            if self.grads[i].is_none() || !self.nodes[i].needs {
                continue;
            }
            // Take the op out; backward consumes tape metadata.
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            let g = self.grads[i].take().expect("checked above");
            self.scatter(i, &op, &g)?;
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn scatter(&mut self, node: usize, op: &Op, g: &[f64]) -> Result<()> {
        let (nodes, grads) = (&self.nodes, &mut self.grads);
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if nodes[a.0].needs {
                    for (o, &gv) in gbuf(grads, nodes, *a).iter_mut().zip(g) {
                        *o += gv;
                    }
                }
                if nodes[b.0].needs {
                    for (o, &gv) in gbuf(grads, nodes, *b).iter_mut().zip(g) {
                        *o += gv;
                    }
                }
            }
            Op::AddRow(a, b) => {
                let (r, c) = nodes[a.0].value.dims2();
                if nodes[a.0].needs {
                    for (o, &gv) in gbuf(grads, nodes, *a).iter_mut().zip(g) {
                        *o += gv;
                    }
                }
                if nodes[b.0].needs {
                    let db = gbuf(grads, nodes, *b);
                    for i in 0..r {
                        for j in 0..c {
                            db[j] += g[i * c + j];
                        }
                    }
                }
            }
            Op::Sub(a, b) => {
                if nodes[a.0].needs {
                    for (o, &gv) in gbuf(grads, nodes, *a).iter_mut().zip(g) {
                        *o += gv;
                    }
                }
                if nodes[b.0].needs {
                    for (o, &gv) in gbuf(grads, nodes, *b).iter_mut().zip(g) {
                        *o -= gv;
                    }
                }
            }
            Op::Mul(a, b) => {
                if nodes[a.0].needs {
                    let bv = nodes[b.0].value.data();
                    let da = gbuf(grads, nodes, *a);
                    for ((o, &gv), &x) in da.iter_mut().zip(g).zip(bv) {
                        *o += gv * x;
                    }
                }
                if nodes[b.0].needs {
                    let av = nodes[a.0].value.data();
                    let db = gbuf(grads, nodes, *b);
                    for ((o, &gv), &x) in db.iter_mut().zip(g).zip(av) {
                        *o += gv * x;
                    }
                }
            }
            Op::Scale(a, c) => {
                if nodes[a.0].needs {
                    for (o, &gv) in gbuf(grads, nodes, *a).iter_mut().zip(g) {
                        *o += c * gv;
                    }
                }
            }
            Op::AddScalar(a) => {
                if nodes[a.0].needs {
                    for (o, &gv) in gbuf(grads, nodes, *a).iter_mut().zip(g) {
                        *o += gv;
                    }
                }
            }
            Op::Matmul(a, b) => {
                let (m, k) = nodes[a.0].value.dims2();
                let (_, n) = nodes[b.0].value.dims2();
                if nodes[a.0].needs {
                    let bv = nodes[b.0].value.data();
                    matmul_nt_acc(gbuf(grads, nodes, *a), g, bv, m, n, k);
                }
                if nodes[b.0].needs {
                    let av = nodes[a.0].value.data();
                    matmul_tn_acc(gbuf(grads, nodes, *b), av, g, m, k, n);
                }
            }
            Op::MatmulNT(a, b) => {
                let (m, k) = nodes[a.0].value.dims2();
                let (n, _) = nodes[b.0].value.dims2();
                if nodes[a.0].needs {
                    let bv = nodes[b.0].value.data();
                    matmul_nn_acc(gbuf(grads, nodes, *a), g, bv, m, n, k);
                }
                if nodes[b.0].needs {
                    let av = nodes[a.0].value.data();
                    matmul_tn_acc(gbuf(grads, nodes, *b), g, av, m, n, k);
                }
            }
            Op::Relu(a) => {
                if nodes[a.0].needs {
                    let av = nodes[a.0].value.data();
                    let da = gbuf(grads, nodes, *a);
                    for ((o, &gv), &x) in da.iter_mut().zip(g).zip(av) {
                        if x > 0.0 {
                            *o += gv;
                        }
                    }
                }
            }
            Op::Tanh(a) => {
                if nodes[a.0].needs {
                    let yv = nodes[node].value.data();
                    let da = gbuf(grads, nodes, *a);
                    for ((o, &gv), &y) in da.iter_mut().zip(g).zip(yv) {
                        *o += gv * (1.0 - y * y);
                    }
                }
            }
            Op::Exp(a) => {
                if nodes[a.0].needs {
                    let yv = nodes[node].value.data();
                    let da = gbuf(grads, nodes, *a);
                    for ((o, &gv), &y) in da.iter_mut().zip(g).zip(yv) {
                        *o += gv * y;
                    }
                }
            }
            Op::Ln(a) => {
                if nodes[a.0].needs {
                    let av = nodes[a.0].value.data();
                    let da = gbuf(grads, nodes, *a);
                    for ((o, &gv), &x) in da.iter_mut().zip(g).zip(av) {
                        *o += gv / x;
                    }
                }
            }
            Op::Abs(a) => {
                if nodes[a.0].needs {
                    let av = nodes[a.0].value.data();
                    let da = gbuf(grads, nodes, *a);
                    for ((o, &gv), &x) in da.iter_mut().zip(g).zip(av) {
                        *o += gv * if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 };
                    }
                }
            }
            Op::Softmax(a) => {
                if nodes[a.0].needs {
                    let (r, c) = nodes[a.0].value.dims2();
                    let yv = nodes[node].value.data();
                    let da = gbuf(grads, nodes, *a);
                    for i in 0..r {
                        let y = &yv[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let dot: f64 = y.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for (j, o) in da[i * c..(i + 1) * c].iter_mut().enumerate() {
                            *o += y[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                if nodes[a.0].needs {
                    let (r, c) = nodes[a.0].value.dims2();
                    let yv = nodes[node].value.data();
                    let da = gbuf(grads, nodes, *a);
                    for i in 0..r {
                        let y = &yv[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let gsum: f64 = gr.iter().sum();
                        for (j, o) in da[i * c..(i + 1) * c].iter_mut().enumerate() {
                            *o += gr[j] - y[j].exp() * gsum;
                        }
                    }
                }
            }
            Op::LogSumExp(a) => {
                if nodes[a.0].needs {
                    let (r, c) = nodes[a.0].value.dims2();
                    let av = nodes[a.0].value.data();
                    let yv = nodes[node].value.data();
                    let da = gbuf(grads, nodes, *a);
                    for i in 0..r {
                        for j in 0..c {
                            da[i * c + j] += g[i] * (av[i * c + j] - yv[i]).exp();
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let (r, c) = nodes[x.0].value.dims2();
                let xv = nodes[x.0].value.data();
                let gv = nodes[gain.0].value.data();
                // Per-row statistics are cheap to recompute.
                for i in 0..r {
                    let row = &xv[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let mu = row.iter().sum::<f64>() / c as f64;
                    let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
                    let sd = (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|&v| (v - mu) / sd).collect();
                    if nodes[bias.0].needs {
                        let db = gbuf(grads, nodes, *bias);
                        for (o, &gg) in db.iter_mut().zip(gr) {
                            *o += gg;
                        }
                    }
                    if nodes[gain.0].needs {
                        let dg = gbuf(grads, nodes, *gain);
                        for ((o, &gg), &xh) in dg.iter_mut().zip(gr).zip(&xhat) {
                            *o += gg * xh;
                        }
                    }
                    if nodes[x.0].needs {
                        let h: Vec<f64> = gr.iter().zip(gv).map(|(&gg, &ga)| gg * ga).collect();
                        let mean_h = h.iter().sum::<f64>() / c as f64;
                        let mean_hx = h.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<f64>() / c as f64;
                        let dx = gbuf(grads, nodes, *x);
                        for j in 0..c {
                            dx[i * c + j] += (h[j] - mean_h - xhat[j] * mean_hx) / sd;
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if nodes[table.0].needs {
                    let (_, d) = nodes[table.0].value.dims2();
                    let dt = gbuf(grads, nodes, *table);
                    for (i, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[id * d + j] += g[i * d + j];
                        }
                    }
                }
            }
            Op::ConcatCols(vs) => {
                let (r, c_out) = nodes[node].value.dims2();
                let mut col_off = 0;
                for &v in vs {
                    let (_, ci) = nodes[v.0].value.dims2();
                    if nodes[v.0].needs {
                        let dv = gbuf(grads, nodes, v);
                        for i in 0..r {
                            for j in 0..ci {
                                dv[i * ci + j] += g[i * c_out + col_off + j];
                            }
                        }
                    }
                    col_off += ci;
                }
            }
            Op::ConcatRows(vs) => {
                let (_, c) = nodes[node].value.dims2();
                let mut row_off = 0;
                for &v in vs {
                    let (ri, _) = nodes[v.0].value.dims2();
                    if nodes[v.0].needs {
                        let dv = gbuf(grads, nodes, v);
                        let src = &g[row_off * c..(row_off + ri) * c];
                        for (o, &gv) in dv.iter_mut().zip(src) {
                            *o += gv;
                        }
                    }
                    row_off += ri;
                }
            }
            Op::BroadcastRow { v, rows } => {
                if nodes[v.0].needs {
                    let c = nodes[v.0].value.numel();
                    let dv = gbuf(grads, nodes, *v);
                    for i in 0..*rows {
                        for j in 0..c {
                            dv[j] += g[i * c + j];
                        }
                    }
                }
            }
            Op::RepeatRows { x, reps } => {
                if nodes[x.0].needs {
                    let (_, c) = nodes[x.0].value.dims2();
                    let dx = gbuf(grads, nodes, *x);
                    let mut out_row = 0;
                    for (u, &n) in reps.iter().enumerate() {
                        for _ in 0..n {
                            for j in 0..c {
                                dx[u * c + j] += g[out_row * c + j];
                            }
                            out_row += 1;
                        }
                    }
                }
            }
            Op::SliceRows { x, start } => {
                if nodes[x.0].needs {
                    let (_, c) = nodes[x.0].value.dims2();
                    let dx = gbuf(grads, nodes, *x);
                    for (off, &gv) in g.iter().enumerate() {
                        dx[start * c + off] += gv;
                    }
                }
            }
            Op::SelectRows { x, idx } => {
                if nodes[x.0].needs {
                    let (_, c) = nodes[x.0].value.dims2();
                    let dx = gbuf(grads, nodes, *x);
                    for (i, &src) in idx.iter().enumerate() {
                        for j in 0..c {
                            dx[src * c + j] += g[i * c + j];
                        }
                    }
                }
            }
            Op::Pick { x, cols } => {
                if nodes[x.0].needs {
                    let (_, c) = nodes[x.0].value.dims2();
                    let dx = gbuf(grads, nodes, *x);
                    for (i, &j) in cols.iter().enumerate() {
                        dx[i * c + j] += g[i];
                    }
                }
            }
            Op::Mean(x) => {
                if nodes[x.0].needs {
                    let n = nodes[x.0].value.numel() as f64;
                    let s = g[0] / n;
                    for o in gbuf(grads, nodes, *x) {
                        *o += s;
                    }
                }
            }
            Op::Sum(x) => {
                if nodes[x.0].needs {
                    let s = g[0];
                    for o in gbuf(grads, nodes, *x) {
                        *o += s;
                    }
                }
            }
            Op::MeanRows(x) => {
                if nodes[x.0].needs {
                    let (r, c) = nodes[x.0].value.dims2();
                    let dx = gbuf(grads, nodes, *x);
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] += g[j] / r as f64;
                        }
                    }
                }
            }
            Op::CrossAdd(a, b) => {
                let (t, d) = nodes[a.0].value.dims2();
                let (u, _) = nodes[b.0].value.dims2();
                if nodes[a.0].needs {
                    let da = gbuf(grads, nodes, *a);
                    for ti in 0..t {
                        for ui in 0..u {
                            let gr = &g[(ti * u + ui) * d..(ti * u + ui + 1) * d];
                            for (o, &gv) in da[ti * d..(ti + 1) * d].iter_mut().zip(gr) {
                                *o += gv;
                            }
                        }
                    }
                }
                if nodes[b.0].needs {
                    let db = gbuf(grads, nodes, *b);
                    for ti in 0..t {
                        for ui in 0..u {
                            let gr = &g[(ti * u + ui) * d..(ti * u + ui + 1) * d];
                            for (o, &gv) in db[ui * d..(ui + 1) * d].iter_mut().zip(gr) {
                                *o += gv;
                            }
                        }
                    }
                }
            }
            Op::DepthwiseConv { x, weight, bias } => {
                let (t, d) = nodes[x.0].value.dims2();
                let (k, _) = nodes[weight.0].value.dims2();
                let pad = k / 2;
                if nodes[bias.0].needs {
                    let db = gbuf(grads, nodes, *bias);
                    for ti in 0..t {
                        for j in 0..d {
                            db[j] += g[ti * d + j];
                        }
                    }
                }
                if nodes[weight.0].needs {
                    let xv = nodes[x.0].value.data();
                    let dw = gbuf(grads, nodes, *weight);
                    for ti in 0..t {
                        for j in 0..k {
                            let src = ti as isize + j as isize - pad as isize;
                            if src < 0 || src >= t as isize {
                                continue;
                            }
                            let su = src as usize;
                            for ch in 0..d {
                                dw[j * d + ch] += xv[su * d + ch] * g[ti * d + ch];
                            }
                        }
                    }
                }
                if nodes[x.0].needs {
                    let wv = nodes[weight.0].value.data();
                    let dx = gbuf(grads, nodes, *x);
                    for ti in 0..t {
                        for j in 0..k {
                            let src = ti as isize + j as isize - pad as isize;
                            if src < 0 || src >= t as isize {
                                continue;
                            }
                            let su = src as usize;
                            for ch in 0..d {
                                dx[su * d + ch] += wv[j * d + ch] * g[ti * d + ch];
                            }
                        }
                    }
                }
            }
            Op::PairRows(x) => {
                if nodes[x.0].needs {
                    let (t, d) = nodes[x.0].value.dims2();
                    let out_t = t.div_ceil(2);
                    let dx = gbuf(grads, nodes, *x);
                    for i in 0..out_t {
                        let first = 2 * i;
                        let second = (2 * i + 1).min(t - 1);
                        for j in 0..d {
                            dx[first * d + j] += g[i * 2 * d + j];
                            dx[second * d + j] += g[i * 2 * d + d + j];
                        }
                    }
                }
            }
            Op::ScalarWithGrad { x, gx } => {
                if nodes[x.0].needs {
                    let s = g[0];
                    let dx = gbuf(grads, nodes, *x);
                    for (o, &gv) in dx.iter_mut().zip(gx) {
                        *o += s * gv;
                    }
                }
            }
        }
        Ok(())
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::num::fd::{central_diff, max_rel_err};
    use crate::rng::rng_for;
    use rand::Rng;

    /// Random input whose entries stay away from the relu/abs kinks:
    /// magnitudes in [0.25, 1.25], random sign.
    fn smooth_input(shape: Vec<usize>, tag: u64) -> Tensor {
        let mut rng = rng_for(99, &[tag]);
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| {
                let mag: f64 = 0.25 + rng.gen::<f64>();
                if rng.gen::<bool>() {
                    mag
                } else {
                    -mag
                }
            })
            .collect();
        Tensor::new(shape, data).unwrap()
    }

    /// Strictly positive variant for ln.
    fn positive_input(shape: Vec<usize>, tag: u64) -> Tensor {
        let mut rng = rng_for(98, &[tag]);
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| 0.25 + rng.gen::<f64>()).collect();
        Tensor::new(shape, data).unwrap()
    }

    /// Reduce any output to a scalar through fixed, sign-varying weights so
    /// every output element influences the loss differently.
    fn weighted_sum(g: &mut Graph, y: Var) -> Var {
        let shape = g.value(y).shape().to_vec();
        let numel = g.value(y).numel();
        let w: Vec<f64> = (0..numel)
            .map(|i| (0.3 + 0.07 * i as f64) * if i % 2 == 0 { 1.0 } else { -1.0 })
            .collect();
        let wv = g.constant(Tensor::new(shape, w).unwrap());
        let p = g.mul(y, wv).unwrap();
        g.sum(p).unwrap()
    }

    /// Backward pass vs central differences on every input, h = 1e-5,
    /// max relative error below 1e-4.
    fn check_grads(inputs: &[Tensor], build: &dyn Fn(&mut Graph, &[Var]) -> Result<Var>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let y = build(&mut g, &vars).expect("forward build");
        let loss = weighted_sum(&mut g, y);
        g.backward(loss).expect("backward");
        let analytic: Vec<Vec<f64>> = vars
            .iter()
            .map(|&v| g.grad(v).expect("grad present for trainable leaf").to_vec())
            .collect();

        for (k, t0) in inputs.iter().enumerate() {
            let mut f = |x: &[f64]| -> f64 {
                let mut g2 = Graph::new();
                let vars2: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(i, t)| {
                        let tt = if i == k {
                            Tensor::new(t.shape().to_vec(), x.to_vec()).unwrap()
                        } else {
                            t.clone()
                        };
                        g2.leaf(tt, false)
                    })
                    .collect();
                let y2 = build(&mut g2, &vars2).unwrap();
                let loss2 = weighted_sum(&mut g2, y2);
                g2.value(loss2).item().unwrap()
            };
            let numeric = central_diff(&mut f, t0.data(), 1e-5);
            let err = max_rel_err(&analytic[k], &numeric, 1e-6);
            assert!(err < 1e-4, "input {k}: max rel err {err:.3e}");
        }
    }

    // ── finite-difference checks, one per operation ─────────────────────

    #[test]
    fn grad_add() {
        let a = smooth_input(vec![3, 4], 1);
        let b = smooth_input(vec![3, 4], 2);
        check_grads(&[a, b], &|g, v| g.add(v[0], v[1]));
    }

    #[test]
    fn grad_add_same_var_twice() {
        let a = smooth_input(vec![2, 3], 3);
        check_grads(&[a], &|g, v| g.add(v[0], v[0]));
    }

    #[test]
    fn grad_add_row() {
        let a = smooth_input(vec![3, 4], 4);
        let b = smooth_input(vec![4], 5);
        check_grads(&[a, b], &|g, v| g.add_row(v[0], v[1]));
    }

    #[test]
    fn grad_sub() {
        let a = smooth_input(vec![3, 4], 6);
        let b = smooth_input(vec![3, 4], 7);
        check_grads(&[a, b], &|g, v| g.sub(v[0], v[1]));
    }

    #[test]
    fn grad_mul_including_square() {
        let a = smooth_input(vec![3, 4], 8);
        let b = smooth_input(vec![3, 4], 9);
        check_grads(&[a.clone(), b], &|g, v| g.mul(v[0], v[1]));
        check_grads(&[a], &|g, v| g.mul(v[0], v[0]));
    }

    #[test]
    fn grad_scale_and_add_scalar() {
        let a = smooth_input(vec![2, 5], 10);
        check_grads(&[a.clone()], &|g, v| g.scale(v[0], -1.7));
        check_grads(&[a], &|g, v| g.add_scalar(v[0], 0.9));
    }

    #[test]
    fn grad_matmul() {
        let a = smooth_input(vec![3, 4], 11);
        let b = smooth_input(vec![4, 2], 12);
        check_grads(&[a, b], &|g, v| g.matmul(v[0], v[1]));
    }

    #[test]
    fn grad_matmul_nt() {
        let a = smooth_input(vec![3, 4], 13);
        let b = smooth_input(vec![2, 4], 14);
        check_grads(&[a, b], &|g, v| g.matmul_nt(v[0], v[1]));
    }

    #[test]
    fn grad_relu() {
        let a = smooth_input(vec![3, 4], 15);
        check_grads(&[a], &|g, v| g.relu(v[0]));
    }

    #[test]
    fn grad_tanh() {
        let a = smooth_input(vec![3, 4], 16);
        check_grads(&[a], &|g, v| g.tanh(v[0]));
    }

    #[test]
    fn grad_exp() {
        let a = smooth_input(vec![3, 4], 17);
        check_grads(&[a], &|g, v| g.exp(v[0]));
    }

    #[test]
    fn grad_ln() {
        let a = positive_input(vec![3, 4], 18);
        check_grads(&[a], &|g, v| g.ln(v[0]));
    }

    #[test]
    fn grad_abs() {
        let a = smooth_input(vec![3, 4], 19);
        check_grads(&[a], &|g, v| g.abs(v[0]));
    }

    #[test]
    fn grad_softmax() {
        let a = smooth_input(vec![3, 5], 20);
        check_grads(&[a], &|g, v| g.softmax(v[0]));
    }

    #[test]
    fn grad_log_softmax() {
        let a = smooth_input(vec![3, 5], 21);
        check_grads(&[a], &|g, v| g.log_softmax(v[0]));
    }

    #[test]
    fn grad_logsumexp() {
        let a = smooth_input(vec![3, 5], 22);
        check_grads(&[a], &|g, v| g.logsumexp(v[0]));
    }

    #[test]
    fn grad_layer_norm() {
        let x = smooth_input(vec![3, 6], 23);
        let gain = smooth_input(vec![6], 24);
        let bias = smooth_input(vec![6], 25);
        check_grads(&[x, gain, bias], &|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5));
    }

    #[test]
    fn grad_embedding() {
        let table = smooth_input(vec![5, 3], 26);
        check_grads(&[table], &|g, v| g.embedding(v[0], &[0, 2, 2, 4]));
    }

    #[test]
    fn grad_concat_cols_and_rows() {
        let a = smooth_input(vec![3, 2], 27);
        let b = smooth_input(vec![3, 4], 28);
        check_grads(&[a.clone(), b.clone()], &|g, v| g.concat_cols(&[v[0], v[1]]));
        let c = smooth_input(vec![2, 2], 29);
        check_grads(&[a, c], &|g, v| g.concat_rows(&[v[0], v[1]]));
    }

    #[test]
    fn grad_broadcast_row() {
        let a = smooth_input(vec![4], 30);
        check_grads(&[a], &|g, v| g.broadcast_row(v[0], 5));
    }

    #[test]
    fn grad_repeat_rows_with_a_zero_count() {
        let a = smooth_input(vec![4, 3], 31);
        check_grads(&[a], &|g, v| g.repeat_rows(v[0], &[2, 0, 3, 1]));
    }

    #[test]
    fn grad_slice_rows() {
        let a = smooth_input(vec![5, 3], 32);
        check_grads(&[a], &|g, v| g.slice_rows(v[0], 1, 4));
    }

    #[test]
    fn grad_select_rows_with_repeats() {
        let a = smooth_input(vec![4, 3], 33);
        check_grads(&[a], &|g, v| g.select_rows(v[0], &[0, 2, 1, 2]));
    }

    #[test]
    fn grad_pick() {
        let a = smooth_input(vec![4, 5], 34);
        check_grads(&[a], &|g, v| g.pick(v[0], &[1, 0, 4, 2]));
    }

    #[test]
    fn grad_mean_sum_mean_rows() {
        let a = smooth_input(vec![3, 4], 35);
        check_grads(&[a.clone()], &|g, v| g.mean(v[0]));
        check_grads(&[a.clone()], &|g, v| g.sum(v[0]));
        check_grads(&[a], &|g, v| g.mean_rows(v[0]));
    }

    #[test]
    fn grad_cross_add() {
        let a = smooth_input(vec![3, 2], 36);
        let b = smooth_input(vec![4, 2], 37);
        check_grads(&[a, b], &|g, v| g.cross_add(v[0], v[1]));
    }

    #[test]
    fn grad_depthwise_conv() {
        let x = smooth_input(vec![6, 3], 38);
        let w = smooth_input(vec![3, 3], 39);
        let b = smooth_input(vec![3], 40);
        check_grads(&[x, w, b], &|g, v| g.depthwise_conv(v[0], v[1], v[2]));
    }

    #[test]
    fn grad_pair_rows_odd_and_even() {
        let odd = smooth_input(vec![5, 2], 41);
        check_grads(&[odd], &|g, v| g.pair_rows(v[0]));
        let even = smooth_input(vec![6, 2], 42);
        check_grads(&[even], &|g, v| g.pair_rows(v[0]));
    }

    #[test]
    fn grad_composite_chain() {
        // A depth-3 composite exercising accumulation across shared inputs.
        let x = smooth_input(vec![4, 3], 43);
        let w = smooth_input(vec![3, 3], 44);
        check_grads(&[x, w], &|g, v| {
            let h = g.matmul(v[0], v[1])?;
            let a = g.tanh(h)?;
            let b = g.relu(h)?;
            let s = g.add(a, b)?;
            g.softmax(s)
        });
    }

    // ── custom scalar injection ─────────────────────────────────────────

    #[test]
    fn scalar_with_grad_routes_payload_times_upstream() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]), true);
        let payload = vec![0.5, -1.0, 2.0];
        let y = g.scalar_with_grad(x, 7.0, payload.clone()).unwrap();
        let loss = g.scale(y, 3.0).unwrap();
        g.backward(loss).unwrap();
        let got = g.grad(x).unwrap();
        for (gv, pv) in got.iter().zip(&payload) {
            assert!((gv - 3.0 * pv).abs() < 1e-15);
        }
        assert_eq!(g.value(y).item().unwrap(), 7.0);
    }

    #[test]
    fn scalar_with_grad_rejects_bad_payload() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        assert!(g.scalar_with_grad(x, f64::NAN, vec![0.0, 0.0]).is_err());
        assert!(g.scalar_with_grad(x, 1.0, vec![0.0]).is_err());
    }

    // ── frozen numeric examples and edge cases ──────────────────────────

    #[test]
    fn logsumexp_of_two_zeros_is_ln_two() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0, 0.0]));
        let y = g.logsumexp(x).unwrap();
        assert!((g.value(y).data()[0] - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn logsumexp_survives_large_inputs() {
        // Naive exp would overflow at 1000; the shifted form must not.
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1000.0, 1000.0]));
        let y = g.logsumexp(x).unwrap();
        let got = g.value(y).data()[0];
        assert!(got.is_finite());
        assert!((got - (1000.0 + 2f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_of_constant_row_is_pure_bias() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![3.0, 3.0, 3.0, 3.0]]).unwrap());
        let gain = g.constant(Tensor::vector(vec![2.0, 2.0, 2.0, 2.0]));
        let bias = g.constant(Tensor::vector(vec![0.1, 0.2, 0.3, 0.4]));
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        for (got, want) in g.value(y).data().iter().zip([0.1, 0.2, 0.3, 0.4]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let x = g.constant(smooth_input(vec![4, 7], 50));
        let y = g.softmax(x).unwrap();
        for i in 0..4 {
            let s: f64 = g.value(y).row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_matches_hand_computed_product() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let b = g.constant(Tensor::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap());
        let y = g.matmul(a, b).unwrap();
        assert_eq!(g.value(y).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn shape_errors_name_the_operation_and_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]).unwrap());
        let b = g.constant(Tensor::zeros(vec![2, 3]).unwrap());
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul"), "{err}");
        assert!(err.contains('3') && err.contains('2'), "{err}");
    }

    #[test]
    fn embedding_rejects_out_of_range_id() {
        let mut g = Graph::new();
        let t = g.constant(Tensor::zeros(vec![4, 2]).unwrap());
        assert!(g.embedding(t, &[0, 4]).is_err());
    }

    #[test]
    fn graph_is_single_use() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(2.0), true);
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert!(g.backward(y).is_err(), "second backward must fail");
        assert!(g.mul(x, x).is_err(), "recording after backward must fail");
    }

    #[test]
    fn backward_requires_scalar_and_finite_loss() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        assert!(g.backward(x).is_err());

        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(1000.0), true);
        let y = g.exp(x).unwrap(); // overflows to +inf
        let s = g.sum(y).unwrap();
        assert!(g.backward(s).is_err());
    }

    #[test]
    fn constants_accumulate_no_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0), true);
        let c = g.constant(Tensor::scalar(5.0));
        let y = g.mul(x, c).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[5.0]);
        assert!(g.grad(c).is_none(), "constants must stay gradient-free");
    }

    #[test]
    fn detach_cuts_gradient_flow() {
        // d/dx of x·detach(x) at x=3 is 3 (not 6).
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0), true);
        let d = g.detach(x);
        let y = g.mul(x, d).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[3.0]);
        assert!(g.grad(d).is_none());
    }

    #[test]
    fn repeat_rows_rejects_all_zero_counts() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(vec![2, 2]).unwrap());
        assert!(g.repeat_rows(x, &[0, 0]).is_err());
    }

    #[test]
    fn pair_rows_duplicates_odd_tail() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap());
        let y = g.pair_rows(x).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 2]);
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 3.0]);
    }
}
