//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Ops append a node holding their output value and enough information to
//! push gradients back to their operands. Parameters are borrowed from a
//! [`ParamStore`] rather than copied, so building a tape for a forward pass
//! costs no more than the arithmetic itself.

use std::borrow::Cow;

use super::tensor::{ParamId, ParamStore};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    SelectRows(Var, Vec<usize>),
    Relu(Var),
    Gelu(Var),
    Tanh(Var),
    Sigmoid(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    SoftmaxRows(Var),
    SegmentAttention {
        q: Var,
        k: Var,
        v: Var,
        layout: AttentionLayout,
        probs: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    PickPerRow(Var, Vec<usize>),
    BceWithLogits(Var, Vec<f64>),
    CrossEntropy(Var, Vec<usize>),
}

struct Node<'a> {
    rows: usize,
    cols: usize,
    value: Cow<'a, [f64]>,
    op: Op,
}

#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

fn check_finite(op: &'static str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn stable_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Dot product with four independent accumulators. The summation order is
/// fixed, so results are reproducible, but it lets the compiler vectorize.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * c + l] * b[4 * c + l];
        }
    }
    let mut tail = 0.0;
    for i in 4 * chunks..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Row ranges of independent attention groups: group `s` has queries
/// `q_offsets[s]..q_offsets[s + 1]` attending over keys and values
/// `kv_offsets[s]..kv_offsets[s + 1]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionLayout {
    pub q_offsets: Vec<usize>,
    pub kv_offsets: Vec<usize>,
    pub heads: usize,
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, rows: usize, cols: usize, value: Cow<'a, [f64]>, op: Op) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(
        &mut self,
        name: &'static str,
        rows: usize,
        cols: usize,
        value: Vec<f64>,
        op: Op,
    ) -> Result<Var> {
        check_finite(name, &value)?;
        Ok(self.push(rows, cols, Cow::Owned(value), op))
    }

    /// A constant (non-trainable) input matrix.
    pub fn input(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        if rows == 0 || cols == 0 || rows * cols != data.len() {
            return Err(Error::shape(
                "input",
                format!("{rows}x{cols} from {} values", data.len()),
            ));
        }
        self.push_checked("input", rows, cols, data, Op::Input)
    }

    /// Borrow a parameter from `store` as a leaf node.
    pub fn param(&mut self, store: &'a ParamStore, id: ParamId) -> Var {
        let t = store.get(id);
        self.push(t.rows(), t.cols(), Cow::Borrowed(t.data()), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(Error::shape("matmul", format!("{m}x{k} * {k2}x{n}")));
        }
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let s = av[i * k + p];
                if s == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                for (o, &bb) in row.iter_mut().zip(brow) {
                    *o += s * bb;
                }
            }
        }
        self.push_checked("matmul", m, n, out, Op::MatMul(a, b))
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        if k != k2 {
            return Err(Error::shape("matmul_nt", format!("{m}x{k} * ({n}x{k2})^T")));
        }
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &av[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &bv[j * k..(j + 1) * k];
                out[i * n + j] = dot(arow, brow);
            }
        }
        self.push_checked("matmul_nt", m, n, out, Op::MatMulNt(a, b))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(sa)
    }

    fn zip_with(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (r, c) = self.same_shape(name, a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        self.push_checked(name, r, c, out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a `1 x n` row to every row of an `m x n` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (m, n) = self.shape(x);
        let (r, n2) = self.shape(row);
        if r != 1 || n != n2 {
            return Err(Error::shape("add_row", format!("{m}x{n} + {r}x{n2}")));
        }
        let bv = self.value(row);
        let mut out = self.value(x).to_vec();
        for chunk in out.chunks_exact_mut(n) {
            for (o, b) in chunk.iter_mut().zip(bv) {
                *o += b;
            }
        }
        self.push_checked("add_row", m, n, out, Op::AddRow(x, row))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let (r, c) = self.shape(x);
        let out = self.value(x).iter().map(|v| v * s).collect();
        self.push_checked("scale", r, c, out, Op::Scale(x, s))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat_rows", "no operands"))?;
        let cols = self.shape(first).1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.shape(p);
            if c != cols {
                return Err(Error::shape("concat_rows", format!("{c} cols vs {cols}")));
            }
            rows += r;
            out.extend_from_slice(self.value(p));
        }
        self.push_checked("concat_rows", rows, cols, out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat_cols", "no operands"))?;
        let rows = self.shape(first).0;
        let mut cols = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            if r != rows {
                return Err(Error::shape("concat_cols", format!("{r} rows vs {rows}")));
            }
            cols += c;
        }
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for &p in parts {
                let c = self.shape(p).1;
                out.extend_from_slice(&self.value(p)[i * c..(i + 1) * c]);
            }
        }
        self.push_checked("concat_cols", rows, cols, out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if len == 0 || start + len > c {
            return Err(Error::shape(
                "slice_cols",
                format!("[{start}, {}) of {c} cols", start + len),
            ));
        }
        let v = self.value(x);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&v[i * c + start..i * c + start + len]);
        }
        self.push_checked("slice_cols", r, len, out, Op::SliceCols(x, start))
    }

    /// Row gather (embedding lookup when `x` is an embedding table).
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(x);
        if rows.is_empty() || rows.iter().any(|&i| i >= r) {
            return Err(Error::shape("select_rows", format!("indices {rows:?} of {r} rows")));
        }
        let v = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            out.extend_from_slice(&v[i * c..(i + 1) * c]);
        }
        self.push_checked("select_rows", rows.len(), c, out, Op::SelectRows(x, rows.to_vec()))
    }

    fn map(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let (r, c) = self.shape(x);
        let out = self.value(x).iter().map(|&v| f(v)).collect();
        self.push_checked(name, r, c, out, op)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map("relu", x, |v| v.max(0.0), Op::Relu(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.map(
            "gelu",
            x,
            |v| 0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh()),
            Op::Gelu(x),
        )
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.map("tanh", x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map("sigmoid", x, stable_sigmoid, Op::Sigmoid(x))
    }

    /// Row-wise layer normalization followed by an affine `gain`/`bias` (`1 x n`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.shape(x);
        if self.shape(gain) != (1, n) || self.shape(bias) != (1, n) {
            return Err(Error::shape("layer_norm", format!("affine params must be 1x{n}")));
        }
        let xv = self.value(x);
        let g = self.value(gain);
        let b = self.value(bias);
        let mut out = vec![0.0; m * n];
        let mut means = Vec::with_capacity(m);
        let mut rstds = Vec::with_capacity(m);
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rstd = 1.0 / (var + LN_EPS).sqrt();
            for j in 0..n {
                out[i * n + j] = (row[j] - mean) * rstd * g[j] + b[j];
            }
            means.push(mean);
            rstds.push(rstd);
        }
        self.push_checked(
            "layer_norm",
            m,
            n,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean: means,
                rstd: rstds,
            },
        )
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.shape(x);
        let xv = self.value(x);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let o = &mut out[i * n..(i + 1) * n];
            let mut z = 0.0;
            for (dst, &v) in o.iter_mut().zip(row) {
                *dst = (v - max).exp();
                z += *dst;
            }
            o.iter_mut().for_each(|v| *v /= z);
        }
        self.push_checked("softmax_rows", m, n, out, Op::SoftmaxRows(x))
    }

    /// Multi-head scaled dot-product attention within independent groups of
    /// rows. Heads split the columns of `q`, `k` and `v` evenly.
    pub fn segment_attention(&mut self, q: Var, k: Var, v: Var, layout: AttentionLayout) -> Result<Var> {
        let (qr, d) = self.shape(q);
        let (kr, dk) = self.shape(k);
        let (vr, dv) = self.shape(v);
        let groups = layout.q_offsets.len().saturating_sub(1);
        let valid = d == dk
            && d == dv
            && kr == vr
            && layout.heads > 0
            && d % layout.heads == 0
            && groups > 0
            && layout.kv_offsets.len() == groups + 1
            && layout.q_offsets.first() == Some(&0)
            && layout.kv_offsets.first() == Some(&0)
            && layout.q_offsets.last() == Some(&qr)
            && layout.kv_offsets.last() == Some(&kr)
            && layout.q_offsets.windows(2).all(|w| w[0] <= w[1])
            && layout.kv_offsets.windows(2).all(|w| w[0] < w[1]);
        if !valid {
            return Err(Error::shape(
                "segment_attention",
                format!("q {qr}x{d}, k {kr}x{dk}, v {vr}x{dv}, layout {layout:?}"),
            ));
        }
        let dh = d / layout.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut out = vec![0.0; qr * d];
        let mut probs = Vec::new();
        let mut scores = Vec::new();
        for s in 0..groups {
            let (k0, k1) = (layout.kv_offsets[s], layout.kv_offsets[s + 1]);
            for h in 0..layout.heads {
                let cols = h * dh..(h + 1) * dh;
                for i in layout.q_offsets[s]..layout.q_offsets[s + 1] {
                    let qrow = &qv[i * d..(i + 1) * d][cols.clone()];
                    scores.clear();
                    scores.extend((k0..k1).map(|j| scale * dot(qrow, &kv[j * d..(j + 1) * d][cols.clone()])));
                    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for x in scores.iter_mut() {
                        *x = (*x - max).exp();
                        total += *x;
                    }
                    let orow = &mut out[i * d..(i + 1) * d][cols.clone()];
                    for (x, j) in scores.iter_mut().zip(k0..k1) {
                        *x /= total;
                        add_into(orow, &vv[j * d..(j + 1) * d][cols.clone()], *x);
                    }
                    probs.extend_from_slice(&scores);
                }
            }
        }
        self.push_checked("segment_attention", qr, d, out, Op::SegmentAttention { q, k, v, layout, probs })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().sum();
        self.push_checked("sum", 1, 1, vec![s], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        self.push_checked("mean", 1, 1, vec![s], Op::Mean(x))
    }

    /// `out[i] = x[i, idx[i]]`, an `m x 1` column.
    pub fn pick_per_row(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.shape(x);
        if idx.len() != m || idx.iter().any(|&j| j >= n) {
            return Err(Error::shape("pick_per_row", format!("{} indices for {m}x{n}", idx.len())));
        }
        let v = self.value(x);
        let out = idx.iter().enumerate().map(|(i, &j)| v[i * n + j]).collect();
        self.push_checked("pick_per_row", m, 1, out, Op::PickPerRow(x, idx.to_vec()))
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and `targets`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let z = self.value(logits);
        if z.len() != targets.len() {
            return Err(Error::shape("bce_with_logits", format!("{} logits, {} targets", z.len(), targets.len())));
        }
        let loss = z
            .iter()
            .zip(targets)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / z.len() as f64;
        self.push_checked("bce_with_logits", 1, 1, vec![loss], Op::BceWithLogits(logits, targets.to_vec()))
    }

    /// Mean softmax cross-entropy of each row of `logits` against a class index.
    pub fn cross_entropy(&mut self, logits: Var, classes: &[usize]) -> Result<Var> {
        let (m, n) = self.shape(logits);
        if classes.len() != m || classes.iter().any(|&c| c >= n) {
            return Err(Error::shape("cross_entropy", format!("{} classes for {m}x{n}", classes.len())));
        }
        let v = self.value(logits);
        let mut loss = 0.0;
        for (i, &c) in classes.iter().enumerate() {
            let row = &v[i * n..(i + 1) * n];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[c];
        }
        loss /= m as f64;
        self.push_checked("cross_entropy", 1, 1, vec![loss], Op::CrossEntropy(logits, classes.to_vec()))
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let node = &self.nodes[loss.0];
        if node.rows * node.cols != 1 {
            return Err(Error::shape("backward", format!("loss is {}x{}", node.rows, node.cols)));
        }
        if matches!(node.op, Op::Input | Op::Param(_)) {
            return Err(Error::NoTape);
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        if grads.iter().flatten().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite { op: "backward" });
        }

        let params = self
            .nodes
            .iter()
            .enumerate()
            .take(loss.0 + 1)
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => Some((id, i)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let (rows, cols) = (node.rows, node.cols);
        let out = &node.value;
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(*a);
                let n = cols;
                let av = self.value(*a);
                let bv = self.value(*b);
                let ga = grad_buf(grads, *a, m * k);
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let brow = &bv[p * n..(p + 1) * n];
                        ga[i * k + p] += dot(grow, brow);
                    }
                }
                let gb = grad_buf(grads, *b, k * n);
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let s = av[i * k + p];
                        if s == 0.0 {
                            continue;
                        }
                        let dst = &mut gb[p * n..(p + 1) * n];
                        for (d, &x) in dst.iter_mut().zip(grow) {
                            *d += s * x;
                        }
                    }
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = self.shape(*a);
                let n = cols;
                let av = self.value(*a);
                let bv = self.value(*b);
                let ga = grad_buf(grads, *a, m * k);
                for i in 0..m {
                    for j in 0..n {
                        let s = g[i * n + j];
                        let brow = &bv[j * k..(j + 1) * k];
                        for (d, &x) in ga[i * k..(i + 1) * k].iter_mut().zip(brow) {
                            *d += s * x;
                        }
                    }
                }
                let gb = grad_buf(grads, *b, n * k);
                for i in 0..m {
                    let arow = &av[i * k..(i + 1) * k];
                    for j in 0..n {
                        let s = g[i * n + j];
                        for (d, &x) in gb[j * k..(j + 1) * k].iter_mut().zip(arow) {
                            *d += s * x;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                add_into(grad_buf(grads, *a, g.len()), g, 1.0);
                add_into(grad_buf(grads, *b, g.len()), g, 1.0);
            }
            Op::Sub(a, b) => {
                add_into(grad_buf(grads, *a, g.len()), g, 1.0);
                add_into(grad_buf(grads, *b, g.len()), g, -1.0);
            }
            Op::Mul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let ga = grad_buf(grads, *a, g.len());
                for ((d, &gg), &y) in ga.iter_mut().zip(g).zip(bv) {
                    *d += gg * y;
                }
                let gb = grad_buf(grads, *b, g.len());
                for ((d, &gg), &x) in gb.iter_mut().zip(g).zip(av) {
                    *d += gg * x;
                }
            }
            Op::AddRow(x, row) => {
                add_into(grad_buf(grads, *x, g.len()), g, 1.0);
                let gr = grad_buf(grads, *row, cols);
                for chunk in g.chunks_exact(cols) {
                    add_into(gr, chunk, 1.0);
                }
            }
            Op::Scale(x, s) => add_into(grad_buf(grads, *x, g.len()), g, *s),
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let (r, c) = self.shape(*p);
                    add_into(grad_buf(grads, *p, r * c), &g[offset..offset + r * c], 1.0);
                    offset += r * c;
                }
            }
            Op::ConcatCols(parts) => {
                let mut col = 0;
                for p in parts {
                    let (r, c) = self.shape(*p);
                    let gp = grad_buf(grads, *p, r * c);
                    for i in 0..r {
                        add_into(
                            &mut gp[i * c..(i + 1) * c],
                            &g[i * cols + col..i * cols + col + c],
                            1.0,
                        );
                    }
                    col += c;
                }
            }
            Op::SliceCols(x, start) => {
                let (r, c) = self.shape(*x);
                let gx = grad_buf(grads, *x, r * c);
                for i in 0..r {
                    add_into(
                        &mut gx[i * c + start..i * c + start + cols],
                        &g[i * cols..(i + 1) * cols],
                        1.0,
                    );
                }
            }
            Op::SelectRows(x, idx) => {
                let (r, c) = self.shape(*x);
                let gx = grad_buf(grads, *x, r * c);
                for (k, &row) in idx.iter().enumerate() {
                    add_into(&mut gx[row * c..(row + 1) * c], &g[k * c..(k + 1) * c], 1.0);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let gx = grad_buf(grads, *x, g.len());
                for ((d, &gg), &v) in gx.iter_mut().zip(g).zip(xv) {
                    if v > 0.0 {
                        *d += gg;
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let gx = grad_buf(grads, *x, g.len());
                for ((d, &gg), &v) in gx.iter_mut().zip(g).zip(xv) {
                    let u = GELU_C * (v + 0.044715 * v * v * v);
                    let t = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
                    *d += gg * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
                }
            }
            Op::Tanh(x) => {
                let gx = grad_buf(grads, *x, g.len());
                for ((d, &gg), &y) in gx.iter_mut().zip(g).zip(out.iter()) {
                    *d += gg * (1.0 - y * y);
                }
            }
            Op::Sigmoid(x) => {
                let gx = grad_buf(grads, *x, g.len());
                for ((d, &gg), &y) in gx.iter_mut().zip(g).zip(out.iter()) {
                    *d += gg * y * (1.0 - y);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            } => {
                let n = cols;
                let xv = self.value(*x);
                let gv = self.value(*gain);
                let mut xhat = vec![0.0; rows * n];
                for i in 0..rows {
                    for j in 0..n {
                        xhat[i * n + j] = (xv[i * n + j] - mean[i]) * rstd[i];
                    }
                }
                {
                    let gg = grad_buf(grads, *gain, n);
                    for i in 0..rows {
                        for j in 0..n {
                            gg[j] += g[i * n + j] * xhat[i * n + j];
                        }
                    }
                }
                {
                    let gb = grad_buf(grads, *bias, n);
                    for chunk in g.chunks_exact(n) {
                        add_into(gb, chunk, 1.0);
                    }
                }
                let gx = grad_buf(grads, *x, rows * n);
                let mut dxhat = vec![0.0; n];
                for i in 0..rows {
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..n {
                        dxhat[j] = g[i * n + j] * gv[j];
                        m1 += dxhat[j];
                        m2 += dxhat[j] * xhat[i * n + j];
                    }
                    m1 /= n as f64;
                    m2 /= n as f64;
                    for j in 0..n {
                        gx[i * n + j] += rstd[i] * (dxhat[j] - m1 - xhat[i * n + j] * m2);
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                let n = cols;
                let gx = grad_buf(grads, *x, rows * n);
                for i in 0..rows {
                    let y = &out[i * n..(i + 1) * n];
                    let gy = &g[i * n..(i + 1) * n];
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        gx[i * n + j] += y[j] * (gy[j] - dot);
                    }
                }
            }
            Op::SegmentAttention { q, k, v, layout, probs } => {
                let d = cols;
                let dh = d / layout.heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (qr, kr) = (self.shape(*q).0, self.shape(*k).0);
                let mut gq = vec![0.0; qr * d];
                let mut gk = vec![0.0; kr * d];
                let mut gv = vec![0.0; kr * d];
                let mut dp = Vec::new();
                let mut at = 0;
                for s in 0..layout.q_offsets.len() - 1 {
                    let (k0, k1) = (layout.kv_offsets[s], layout.kv_offsets[s + 1]);
                    let n = k1 - k0;
                    for h in 0..layout.heads {
                        let cols = h * dh..(h + 1) * dh;
                        for i in layout.q_offsets[s]..layout.q_offsets[s + 1] {
                            let p = &probs[at..at + n];
                            at += n;
                            let gout = &g[i * d..(i + 1) * d][cols.clone()];
                            dp.clear();
                            for (jj, j) in (k0..k1).enumerate() {
                                dp.push(dot(gout, &vv[j * d..(j + 1) * d][cols.clone()]));
                                add_into(&mut gv[j * d..(j + 1) * d][cols.clone()], gout, p[jj]);
                            }
                            let mix = dot(p, &dp);
                            let qrow = &qv[i * d..(i + 1) * d][cols.clone()];
                            for (jj, j) in (k0..k1).enumerate() {
                                let ds = scale * p[jj] * (dp[jj] - mix);
                                add_into(&mut gq[i * d..(i + 1) * d][cols.clone()], &kv[j * d..(j + 1) * d][cols.clone()], ds);
                                add_into(&mut gk[j * d..(j + 1) * d][cols.clone()], qrow, ds);
                            }
                        }
                    }
                }
                add_into(grad_buf(grads, *q, qr * d), &gq, 1.0);
                add_into(grad_buf(grads, *k, kr * d), &gk, 1.0);
                add_into(grad_buf(grads, *v, kr * d), &gv, 1.0);
            }
            Op::Sum(x) => {
                let len = self.value(*x).len();
                grad_buf(grads, *x, len).iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Mean(x) => {
                let len = self.value(*x).len();
                let s = g[0] / len as f64;
                grad_buf(grads, *x, len).iter_mut().for_each(|d| *d += s);
            }
            Op::PickPerRow(x, idx) => {
                let (r, c) = self.shape(*x);
                let gx = grad_buf(grads, *x, r * c);
                for (i, &j) in idx.iter().enumerate() {
                    gx[i * c + j] += g[i];
                }
            }
            Op::BceWithLogits(z, targets) => {
                let zv = self.value(*z);
                let s = g[0] / zv.len() as f64;
                let gz = grad_buf(grads, *z, zv.len());
                for ((d, &zz), &y) in gz.iter_mut().zip(zv).zip(targets) {
                    *d += s * (stable_sigmoid(zz) - y);
                }
            }
            Op::CrossEntropy(z, classes) => {
                let (m, n) = self.shape(*z);
                let zv = self.value(*z);
                let s = g[0] / m as f64;
                let gz = grad_buf(grads, *z, m * n);
                for (i, &c) in classes.iter().enumerate() {
                    let row = &zv[i * n..(i + 1) * n];
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = row.iter().map(|x| (x - max).exp()).sum();
                    for j in 0..n {
                        let p = (row[j] - max).exp() / denom;
                        let t = if j == c { 1.0 } else { 0.0 };
                        gz[i * n + j] += s * (p - t);
                    }
                }
            }
        }
    }
}

fn grad_buf(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64], s: f64) {
    for (d, v) in dst.iter_mut().zip(src) {
        *d += s * v;
    }
}

/// Result of [`Tape::backward`]. Owns its buffers, so the tape (and the
/// parameter borrow it holds) can be dropped before gradients are applied.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient with respect to a node, or `None` if the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Per-parameter gradients; a parameter loaded twice appears twice.
    pub fn into_param_grads(mut self) -> Vec<(ParamId, Vec<f64>)> {
        self.params
            .iter()
            .filter_map(|&(id, node)| self.grads[node].take().map(|g| (id, g)))
            .collect()
    }
}
