//! Minimal reverse-mode autodiff over dense `f64` tensors.
//!
//! A [`Tape`] records every executed operation as a [`Node`]; [`Tape::backward`]
//! replays the record in reverse, accumulating gradients with `+=` so values
//! used in several places (shared weights) collect contributions from every
//! use. Everything is `f64`: at desk scale the extra width is free and it keeps
//! finite-difference gradient checks at 1e-4 meaningful.
//!
//! Shapes are explicit and validation is strict — a mismatch is an [`Error`],
//! never a panic or silent broadcast.

use crate::error::{Error, Result};
use crate::rng::Stream;

// ── Tensor: leaf storage for parameters and inputs ───────────────────────────

/// A dense tensor that lives outside the tape: parameter weights, frozen
/// features, inputs. `grad` accumulates across [`Tape::backward`] harvests
/// until explicitly zeroed.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n], requires_grad: false, grad: None }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "Tensor::from_vec",
                format!("shape {shape:?} wants {n} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape: shape.to_vec(), data, requires_grad: false, grad: None })
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor { shape: vec![1, 1], data: vec![v], requires_grad: false, grad: None }
    }

    /// Gaussian init, `N(0, std^2)`, drawn from the given stream.
    pub fn randn(stream: &mut Stream, shape: &[usize], std: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| stream.normal(std)).collect();
        Tensor { shape: shape.to_vec(), data, requires_grad: false, grad: None }
    }

    pub fn trainable(mut self) -> Tensor {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Accumulated gradient; `None` until a backward pass deposits one.
    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Add `g` into the stored gradient (allocating zeros first if absent).
    pub fn accumulate_grad(&mut self, g: &[f64]) {
        assert_eq!(g.len(), self.data.len(), "gradient length mismatch");
        let buf = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (b, gi) in buf.iter_mut().zip(g) {
            *b += gi;
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// FNV-1a over the little-endian bit patterns; used to prove frozen
    /// parameters stay untouched across training.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for &d in &self.shape {
            eat(&(d as u64).to_le_bytes());
        }
        for &v in &self.data {
            eat(&v.to_le_bytes());
        }
        h
    }
}

// ── Tape: the operation record ───────────────────────────────────────────────

/// Handle to a value on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul { a: usize, b: usize },
    Transpose { x: usize },
    Conv1d { x: usize, kernels: usize, valid: Option<Vec<bool>> },
    Sigmoid { x: usize },
    Relu { x: usize },
    Tanh { x: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, c: f64 },
    AddBias { x: usize, bias: usize },
    SoftmaxRows { x: usize, mask: Option<Vec<bool>> },
    NormalizeRows { x: usize },
    MeanPoolRows { x: usize, valid: Option<Vec<bool>> },
    Sum { x: usize },
    ConcatCols { a: usize, b: usize },
    ConcatRows { parts: Vec<usize> },
    SliceCols { x: usize, start: usize, len: usize },
    EmbedRows { table: usize, ids: Vec<usize> },
    CrossEntropySum { logits: usize, targets: Vec<usize>, active: Vec<bool> },
}

#[derive(Debug)]
struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of executed differentiable operations. Append-only during
/// the forward pass; replayed once, in reverse, by [`Tape::backward`].
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register a tensor as a leaf. The data is snapshotted; gradients flow
    /// back to the handle (read them with [`Tape::grad`]) when
    /// `tensor.requires_grad` is set.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.data.clone(), t.shape.clone(), Op::Leaf, t.requires_grad)
    }

    /// Register raw values as a gradient-free leaf.
    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "Tape::constant",
                format!("shape {shape:?} wants {n} values, got {}", data.len()),
            ));
        }
        Ok(self.push(data, shape.to_vec(), Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Gradient of the last backward pass w.r.t. `v`. `None` means no path
    /// connected `v` to the loss (i.e. the gradient is exactly zero).
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { data, shape, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = &self.nodes[v.0].shape;
        if s.len() != 2 {
            return Err(Error::shape(op, format!("expected a 2-D value, got shape {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    // ── forward operations ──────────────────────────────────────────────────

    /// `[m,k] · [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner dims disagree: [{m},{k}] x [{k2},{n}]"),
            ));
        }
        let mut out = vec![0.0; m * n];
        {
            let av = &self.node(a).data;
            let bv = &self.node(b).data;
            for i in 0..m {
                for kk in 0..k {
                    let aik = av[i * k + kk];
                    if aik == 0.0 {
                        continue;
                    }
                    let brow = &bv[kk * n..kk * n + n];
                    let orow = &mut out[i * n..i * n + n];
                    for j in 0..n {
                        orow[j] += aik * brow[j];
                    }
                }
            }
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, vec![m, n], Op::Matmul { a: a.0, b: b.0 }, ng))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "transpose")?;
        let xv = &self.node(x).data;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = xv[i * n + j];
            }
        }
        let ng = self.needs(x);
        Ok(self.push(out, vec![n, m], Op::Transpose { x: x.0 }, ng))
    }

    /// Temporal convolution with same-size zero padding.
    ///
    /// `x` is `[c_in, t]` (one row per channel), `kernels` is
    /// `[c_out, c_in, k]` with odd `k`. Taps that fall outside `[0, t)` — or
    /// on a position whose `valid` flag is false — are skipped, which is
    /// exactly zero padding. Output columns at invalid positions are left 0.
    pub fn conv1d(&mut self, x: Var, kernels: Var, valid: Option<&[bool]>) -> Result<Var> {
        let (c_in, t) = self.dims2(x, "conv1d")?;
        let ks = self.node(kernels).shape.clone();
        if ks.len() != 3 {
            return Err(Error::shape("conv1d", format!("kernel bank must be 3-D, got {ks:?}")));
        }
        let (c_out, kc, k) = (ks[0], ks[1], ks[2]);
        if kc != c_in {
            return Err(Error::shape(
                "conv1d",
                format!("kernel channels {kc} vs input channels {c_in}"),
            ));
        }
        if k % 2 == 0 {
            return Err(Error::config(format!(
                "conv1d kernel width must be odd for same padding, got {k}"
            )));
        }
        if let Some(v) = valid {
            if v.len() != t {
                return Err(Error::shape(
                    "conv1d",
                    format!("validity mask length {} vs {t} time steps", v.len()),
                ));
            }
        }
        let half = k / 2;
        let mut out = vec![0.0; c_out * t];
        {
            let xv = &self.node(x).data;
            let kv = &self.node(kernels).data;
            let live = |tt: usize| valid.map_or(true, |v| v[tt]);
            for o in 0..c_out {
                for tt in 0..t {
                    if !live(tt) {
                        continue;
                    }
                    let mut acc = 0.0;
                    for c in 0..c_in {
                        for j in 0..k {
                            let pos = tt as isize + j as isize - half as isize;
                            if pos < 0 || pos >= t as isize {
                                continue;
                            }
                            let pos = pos as usize;
                            if !live(pos) {
                                continue;
                            }
                            acc += xv[c * t + pos] * kv[(o * c_in + c) * k + j];
                        }
                    }
                    out[o * t + tt] = acc;
                }
            }
        }
        let ng = self.needs(x) || self.needs(kernels);
        Ok(self.push(
            out,
            vec![c_out, t],
            Op::Conv1d { x: x.0, kernels: kernels.0, valid: valid.map(|v| v.to_vec()) },
            ng,
        ))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let (shape, data) = {
            let n = self.node(x);
            (n.shape.clone(), n.data.iter().map(|&v| stable_sigmoid(v)).collect::<Vec<_>>())
        };
        let ng = self.needs(x);
        Ok(self.push(data, shape, Op::Sigmoid { x: x.0 }, ng))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let (shape, data) = {
            let n = self.node(x);
            (n.shape.clone(), n.data.iter().map(|&v| v.max(0.0)).collect::<Vec<_>>())
        };
        let ng = self.needs(x);
        Ok(self.push(data, shape, Op::Relu { x: x.0 }, ng))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let (shape, data) = {
            let n = self.node(x);
            (n.shape.clone(), n.data.iter().map(|&v| v.tanh()).collect::<Vec<_>>())
        };
        let ng = self.needs(x);
        Ok(self.push(data, shape, Op::Tanh { x: x.0 }, ng))
    }

    fn binary_elementwise(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Vec<f64>, Vec<usize>)> {
        let (na, nb) = (self.node(a), self.node(b));
        if na.shape != nb.shape {
            return Err(Error::shape(
                op_name,
                format!("operand shapes differ: {:?} vs {:?}", na.shape, nb.shape),
            ));
        }
        let data = na.data.iter().zip(&nb.data).map(|(&x, &y)| f(x, y)).collect();
        Ok((data, na.shape.clone()))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (data, shape) = self.binary_elementwise("add", a, b, |x, y| x + y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(data, shape, Op::Add { a: a.0, b: b.0 }, ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (data, shape) = self.binary_elementwise("sub", a, b, |x, y| x - y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(data, shape, Op::Sub { a: a.0, b: b.0 }, ng))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (data, shape) = self.binary_elementwise("mul", a, b, |x, y| x * y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(data, shape, Op::Mul { a: a.0, b: b.0 }, ng))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let (shape, data) = {
            let n = self.node(x);
            (n.shape.clone(), n.data.iter().map(|&v| v * c).collect::<Vec<_>>())
        };
        let ng = self.needs(x);
        Ok(self.push(data, shape, Op::Scale { x: x.0, c }, ng))
    }

    /// `[m,n] + [1,n]`, the bias broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "add_bias")?;
        let (bm, bn) = self.dims2(bias, "add_bias")?;
        if bm != 1 || bn != n {
            return Err(Error::shape(
                "add_bias",
                format!("bias must be [1,{n}] to match [{m},{n}], got [{bm},{bn}]"),
            ));
        }
        let xv = &self.node(x).data;
        let bv = &self.node(bias).data;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = xv[i * n + j] + bv[j];
            }
        }
        let ng = self.needs(x) || self.needs(bias);
        Ok(self.push(out, vec![m, n], Op::AddBias { x: x.0, bias: bias.0 }, ng))
    }

    /// Row-wise softmax with max subtraction. With a mask, masked positions
    /// are excluded from the normalization and emit exactly 0; a fully masked
    /// row is an error.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (m, n) = self.dims2(x, "softmax_rows")?;
        if let Some(mk) = mask {
            if mk.len() != m * n {
                return Err(Error::shape(
                    "softmax_rows",
                    format!("mask length {} vs {m}x{n} entries", mk.len()),
                ));
            }
        }
        let xv = &self.node(x).data;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let on = |j: usize| mask.map_or(true, |mk| mk[i * n + j]);
            let mut mx = f64::NEG_INFINITY;
            for j in 0..n {
                if on(j) {
                    mx = mx.max(xv[i * n + j]);
                }
            }
            if mx == f64::NEG_INFINITY {
                return Err(Error::degenerate(format!("softmax row {i} is fully masked")));
            }
            let mut denom = 0.0;
            for j in 0..n {
                if on(j) {
                    let e = (xv[i * n + j] - mx).exp();
                    out[i * n + j] = e;
                    denom += e;
                }
            }
            for j in 0..n {
                out[i * n + j] /= denom;
            }
        }
        let ng = self.needs(x);
        Ok(self.push(out, vec![m, n], Op::SoftmaxRows { x: x.0, mask: mask.map(|v| v.to_vec()) }, ng))
    }

    /// Scale each row to unit L2 norm. A (near-)zero row is a degenerate
    /// embedding and errors — no silent epsilon in the direction.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "normalize_rows")?;
        let xv = &self.node(x).data;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xv[i * n..i * n + n];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-30 {
                return Err(Error::degenerate(format!(
                    "zero-norm embedding at row {i}; cannot normalize a direction-free vector"
                )));
            }
            for j in 0..n {
                out[i * n + j] = row[j] / norm;
            }
        }
        let ng = self.needs(x);
        Ok(self.push(out, vec![m, n], Op::NormalizeRows { x: x.0 }, ng))
    }

    /// Mean over rows (time steps): `[t,d] -> [1,d]`. With a validity mask the
    /// mean runs over valid rows only; zero valid rows is an error.
    pub fn mean_pool_rows(&mut self, x: Var, valid: Option<&[bool]>) -> Result<Var> {
        let (t, d) = self.dims2(x, "mean_pool_rows")?;
        if t == 0 {
            return Err(Error::degenerate("mean_pool_rows over an empty sequence"));
        }
        if let Some(v) = valid {
            if v.len() != t {
                return Err(Error::shape(
                    "mean_pool_rows",
                    format!("validity mask length {} vs {t} rows", v.len()),
                ));
            }
        }
        let live = |i: usize| valid.map_or(true, |v| v[i]);
        let cnt = (0..t).filter(|&i| live(i)).count();
        if cnt == 0 {
            return Err(Error::degenerate("mean_pool_rows: no valid rows"));
        }
        let xv = &self.node(x).data;
        let mut out = vec![0.0; d];
        for i in 0..t {
            if !live(i) {
                continue;
            }
            for j in 0..d {
                out[j] += xv[i * d + j];
            }
        }
        for o in out.iter_mut() {
            *o /= cnt as f64;
        }
        let ng = self.needs(x);
        Ok(self.push(out, vec![1, d], Op::MeanPoolRows { x: x.0, valid: valid.map(|v| v.to_vec()) }, ng))
    }

    /// Sum of all entries: `-> [1,1]`.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total: f64 = self.node(x).data.iter().sum();
        let ng = self.needs(x);
        Ok(self.push(vec![total], vec![1, 1], Op::Sum { x: x.0 }, ng))
    }

    /// Feature-wise concatenation: `[t,a] ++ [t,b] -> [t,a+b]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, da) = self.dims2(a, "concat_cols")?;
        let (tb, db) = self.dims2(b, "concat_cols")?;
        if ta != tb {
            return Err(Error::shape(
                "concat_cols",
                format!("row counts differ: [{ta},{da}] vs [{tb},{db}]"),
            ));
        }
        let av = &self.node(a).data;
        let bv = &self.node(b).data;
        let d = da + db;
        let mut out = vec![0.0; ta * d];
        for i in 0..ta {
            out[i * d..i * d + da].copy_from_slice(&av[i * da..i * da + da]);
            out[i * d + da..i * d + d].copy_from_slice(&bv[i * db..i * db + db]);
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, vec![ta, d], Op::ConcatCols { a: a.0, b: b.0 }, ng))
    }

    /// Stack along time: parts `[t_i, d]` (equal `d`) -> `[sum t_i, d]`.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::degenerate("concat_rows of zero parts"));
        }
        let (_, d) = self.dims2(parts[0], "concat_rows")?;
        let mut total = 0usize;
        for &p in parts {
            let (t, dp) = self.dims2(p, "concat_rows")?;
            if dp != d {
                return Err(Error::shape(
                    "concat_rows",
                    format!("feature widths differ: {d} vs {dp}"),
                ));
            }
            total += t;
        }
        let mut out = Vec::with_capacity(total * d);
        for &p in parts {
            out.extend_from_slice(&self.node(p).data);
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out, vec![total, d], Op::ConcatRows { parts: parts.iter().map(|p| p.0).collect() }, ng))
    }

    /// Column slice `[m,n] -> [m,len]` starting at `start`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2(x, "slice_cols")?;
        if start + len > n {
            return Err(Error::shape(
                "slice_cols",
                format!("slice {start}..{} exceeds {n} columns", start + len),
            ));
        }
        let xv = &self.node(x).data;
        let mut out = vec![0.0; m * len];
        for i in 0..m {
            out[i * len..i * len + len].copy_from_slice(&xv[i * n + start..i * n + start + len]);
        }
        let ng = self.needs(x);
        Ok(self.push(out, vec![m, len], Op::SliceCols { x: x.0, start, len }, ng))
    }

    /// Gather rows of an embedding table: `table [v,d]`, `ids` -> `[len,d]`.
    /// Backward scatter-adds into the table, so repeated ids accumulate.
    pub fn embed_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2(table, "embed_rows")?;
        if ids.is_empty() {
            return Err(Error::degenerate("embed_rows with an empty id list"));
        }
        for &id in ids {
            if id >= v {
                return Err(Error::contract(format!("token id {id} outside vocabulary of {v}")));
            }
        }
        let tv = &self.node(table).data;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&tv[id * d..id * d + d]);
        }
        let ng = self.needs(table);
        Ok(self.push(out, vec![ids.len(), d], Op::EmbedRows { table: table.0, ids: ids.to_vec() }, ng))
    }

    /// Summed cross-entropy over the rows flagged `active`:
    /// `sum_i (logsumexp(logits[i]) - logits[i][targets[i]])`, shape `[1,1]`.
    /// Inactive (padding) rows contribute nothing to value or gradient.
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: &[usize], active: &[bool]) -> Result<Var> {
        let (u, v) = self.dims2(logits, "cross_entropy_sum")?;
        if targets.len() != u || active.len() != u {
            return Err(Error::shape(
                "cross_entropy_sum",
                format!("{u} logit rows vs {} targets / {} flags", targets.len(), active.len()),
            ));
        }
        if !active.iter().any(|&a| a) {
            return Err(Error::contract("cross_entropy_sum: every target position is padding"));
        }
        for (&t, &a) in targets.iter().zip(active) {
            if a && t >= v {
                return Err(Error::contract(format!("target id {t} outside vocabulary of {v}")));
            }
        }
        let lv = &self.node(logits).data;
        let mut total = 0.0;
        for i in 0..u {
            if !active[i] {
                continue;
            }
            let row = &lv[i * v..i * v + v];
            total += log_sum_exp(row) - row[targets[i]];
        }
        let ng = self.needs(logits);
        Ok(self.push(
            vec![total],
            vec![1, 1],
            Op::CrossEntropySum { logits: logits.0, targets: targets.to_vec(), active: active.to_vec() },
            ng,
        ))
    }

    // ── backward ────────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar `loss`. Visits every recorded node exactly
    /// once in reverse execution order; gradients accumulate with `+=`.
    /// Leaves never touched by the sweep keep a `None` (i.e. exactly zero)
    /// gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.node(loss).data.len() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.node(loss).shape
            )));
        }
        let n = self.nodes.len();
        self.grads = vec![None; n];
        self.grads[loss.0] = Some(vec![1.0]);

        for idx in (0..n).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(gout) = self.grads[idx].take() else { continue };
            self.backprop_node(idx, &gout);
            self.grads[idx] = Some(gout);
        }
        Ok(())
    }

    fn grad_buf(&mut self, idx: usize) -> &mut Vec<f64> {
        let len = self.nodes[idx].data.len();
        self.grads[idx].get_or_insert_with(|| vec![0.0; len])
    }

    fn wants(&self, idx: usize) -> bool {
        self.nodes[idx].needs_grad
    }

    fn backprop_node(&mut self, idx: usize, gout: &[f64]) {
        // Ops are matched by value of the metadata they stored at forward
        // time; node data is read immutably and gradients are written through
        // `grad_buf`, so each arm clones the few small things it needs.
        enum Todo {
            None,
            One(usize, Vec<f64>),
            Two(usize, Vec<f64>, usize, Vec<f64>),
            Many(Vec<(usize, Vec<f64>)>),
        }

        let todo = match &self.nodes[idx].op {
            Op::Leaf => Todo::None,

            Op::Matmul { a, b } => {
                let (a, b) = (*a, *b);
                let m = self.nodes[idx].shape[0];
                let n = self.nodes[idx].shape[1];
                let k = self.nodes[a].shape[1];
                let av = &self.nodes[a].data;
                let bv = &self.nodes[b].data;
                let mut da = vec![0.0; m * k];
                let mut db = vec![0.0; k * n];
                if self.wants(a) {
                    // dA = dOut · B^T
                    for i in 0..m {
                        for kk in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += gout[i * n + j] * bv[kk * n + j];
                            }
                            da[i * k + kk] = acc;
                        }
                    }
                }
                if self.wants(b) {
                    // dB = A^T · dOut
                    for kk in 0..k {
                        for i in 0..m {
                            let aik = av[i * k + kk];
                            if aik == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[kk * n + j] += aik * gout[i * n + j];
                            }
                        }
                    }
                }
                Todo::Two(a, da, b, db)
            }

            Op::Transpose { x } => {
                let x = *x;
                let n = self.nodes[idx].shape[0]; // out rows = input cols
                let m = self.nodes[idx].shape[1];
                let mut dx = vec![0.0; m * n];
                for i in 0..n {
                    for j in 0..m {
                        dx[j * n + i] = gout[i * m + j];
                    }
                }
                Todo::One(x, dx)
            }

            Op::Conv1d { x, kernels, valid } => {
                let (x, kernels, valid) = (*x, *kernels, valid.clone());
                let t = self.nodes[x].shape[1];
                let c_in = self.nodes[x].shape[0];
                let ks = &self.nodes[kernels].shape;
                let (c_out, k) = (ks[0], ks[2]);
                let half = k / 2;
                let live = |tt: usize| valid.as_ref().map_or(true, |v| v[tt]);
                let xv = &self.nodes[x].data;
                let kv = &self.nodes[kernels].data;
                let mut dx = vec![0.0; c_in * t];
                let mut dk = vec![0.0; c_out * c_in * k];
                for o in 0..c_out {
                    for tt in 0..t {
                        if !live(tt) {
                            continue;
                        }
                        let g = gout[o * t + tt];
                        if g == 0.0 {
                            continue;
                        }
                        for c in 0..c_in {
                            for j in 0..k {
                                let pos = tt as isize + j as isize - half as isize;
                                if pos < 0 || pos >= t as isize {
                                    continue;
                                }
                                let pos = pos as usize;
                                if !live(pos) {
                                    continue;
                                }
                                dx[c * t + pos] += kv[(o * c_in + c) * k + j] * g;
                                dk[(o * c_in + c) * k + j] += xv[c * t + pos] * g;
                            }
                        }
                    }
                }
                Todo::Two(x, dx, kernels, dk)
            }

            Op::Sigmoid { x } => {
                let x = *x;
                let y = &self.nodes[idx].data;
                let dx = y.iter().zip(gout).map(|(&yi, &g)| g * yi * (1.0 - yi)).collect();
                Todo::One(x, dx)
            }

            Op::Relu { x } => {
                let x = *x;
                let xv = &self.nodes[x].data;
                let dx = xv.iter().zip(gout).map(|(&xi, &g)| if xi > 0.0 { g } else { 0.0 }).collect();
                Todo::One(x, dx)
            }

            Op::Tanh { x } => {
                let x = *x;
                let y = &self.nodes[idx].data;
                let dx = y.iter().zip(gout).map(|(&yi, &g)| g * (1.0 - yi * yi)).collect();
                Todo::One(x, dx)
            }

            Op::Add { a, b } => Todo::Two(*a, gout.to_vec(), *b, gout.to_vec()),

            Op::Sub { a, b } => Todo::Two(*a, gout.to_vec(), *b, gout.iter().map(|g| -g).collect()),

            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                let av = &self.nodes[a].data;
                let bv = &self.nodes[b].data;
                let da = bv.iter().zip(gout).map(|(&bi, &g)| bi * g).collect();
                let db = av.iter().zip(gout).map(|(&ai, &g)| ai * g).collect();
                Todo::Two(a, da, b, db)
            }

            Op::Scale { x, c } => {
                let (x, c) = (*x, *c);
                Todo::One(x, gout.iter().map(|g| c * g).collect())
            }

            Op::AddBias { x, bias } => {
                let (x, bias) = (*x, *bias);
                let m = self.nodes[idx].shape[0];
                let n = self.nodes[idx].shape[1];
                let mut dbias = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        dbias[j] += gout[i * n + j];
                    }
                }
                Todo::Two(x, gout.to_vec(), bias, dbias)
            }

            Op::SoftmaxRows { x, mask } => {
                let (x, mask) = (*x, mask.clone());
                let m = self.nodes[idx].shape[0];
                let n = self.nodes[idx].shape[1];
                let y = &self.nodes[idx].data;
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    let on = |j: usize| mask.as_ref().map_or(true, |mk| mk[i * n + j]);
                    let mut dot = 0.0;
                    for j in 0..n {
                        if on(j) {
                            dot += gout[i * n + j] * y[i * n + j];
                        }
                    }
                    for j in 0..n {
                        if on(j) {
                            dx[i * n + j] = y[i * n + j] * (gout[i * n + j] - dot);
                        }
                    }
                }
                Todo::One(x, dx)
            }

            Op::NormalizeRows { x } => {
                let x = *x;
                let m = self.nodes[idx].shape[0];
                let n = self.nodes[idx].shape[1];
                let y = &self.nodes[idx].data;
                let xv = &self.nodes[x].data;
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    let row = &xv[i * n..i * n + n];
                    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let mut dot = 0.0;
                    for j in 0..n {
                        dot += y[i * n + j] * gout[i * n + j];
                    }
                    for j in 0..n {
                        dx[i * n + j] = (gout[i * n + j] - y[i * n + j] * dot) / norm;
                    }
                }
                Todo::One(x, dx)
            }

            Op::MeanPoolRows { x, valid } => {
                let (x, valid) = (*x, valid.clone());
                let t = self.nodes[x].shape[0];
                let d = self.nodes[x].shape[1];
                let live = |i: usize| valid.as_ref().map_or(true, |v| v[i]);
                let cnt = (0..t).filter(|&i| live(i)).count() as f64;
                let mut dx = vec![0.0; t * d];
                for i in 0..t {
                    if !live(i) {
                        continue;
                    }
                    for j in 0..d {
                        dx[i * d + j] = gout[j] / cnt;
                    }
                }
                Todo::One(x, dx)
            }

            Op::Sum { x } => {
                let x = *x;
                let len = self.nodes[x].data.len();
                Todo::One(x, vec![gout[0]; len])
            }

            Op::ConcatCols { a, b } => {
                let (a, b) = (*a, *b);
                let t = self.nodes[idx].shape[0];
                let da = self.nodes[a].shape[1];
                let db = self.nodes[b].shape[1];
                let d = da + db;
                let mut ga = vec![0.0; t * da];
                let mut gb = vec![0.0; t * db];
                for i in 0..t {
                    ga[i * da..i * da + da].copy_from_slice(&gout[i * d..i * d + da]);
                    gb[i * db..i * db + db].copy_from_slice(&gout[i * d + da..i * d + d]);
                }
                Todo::Two(a, ga, b, gb)
            }

            Op::ConcatRows { parts } => {
                let parts = parts.clone();
                let d = self.nodes[idx].shape[1];
                let mut offset = 0usize;
                let mut grads = Vec::with_capacity(parts.len());
                for &p in &parts {
                    let rows = self.nodes[p].shape[0];
                    let len = rows * d;
                    grads.push((p, gout[offset..offset + len].to_vec()));
                    offset += len;
                }
                Todo::Many(grads)
            }

            Op::SliceCols { x, start, len } => {
                let (x, start, len) = (*x, *start, *len);
                let m = self.nodes[x].shape[0];
                let n = self.nodes[x].shape[1];
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    dx[i * n + start..i * n + start + len].copy_from_slice(&gout[i * len..i * len + len]);
                }
                Todo::One(x, dx)
            }

            Op::EmbedRows { table, ids } => {
                let (table, ids) = (*table, ids.clone());
                let v = self.nodes[table].shape[0];
                let d = self.nodes[table].shape[1];
                let mut dt = vec![0.0; v * d];
                for (i, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += gout[i * d + j];
                    }
                }
                Todo::One(table, dt)
            }

            Op::CrossEntropySum { logits, targets, active } => {
                let (logits, targets, active) = (*logits, targets.clone(), active.clone());
                let u = self.nodes[logits].shape[0];
                let v = self.nodes[logits].shape[1];
                let lv = &self.nodes[logits].data;
                let g = gout[0];
                let mut dl = vec![0.0; u * v];
                for i in 0..u {
                    if !active[i] {
                        continue;
                    }
                    let row = &lv[i * v..i * v + v];
                    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = row.iter().map(|&x| (x - mx).exp()).sum();
                    for j in 0..v {
                        let p = (row[j] - mx).exp() / denom;
                        let ind = if j == targets[i] { 1.0 } else { 0.0 };
                        dl[i * v + j] = (p - ind) * g;
                    }
                }
                Todo::One(logits, dl)
            }
        };

        match todo {
            Todo::None => {}
            Todo::One(x, dx) => {
                if self.wants(x) {
                    add_into(self.grad_buf(x), &dx);
                }
            }
            Todo::Two(a, da, b, db) => {
                if self.wants(a) {
                    add_into(self.grad_buf(a), &da);
                }
                if self.wants(b) {
                    add_into(self.grad_buf(b), &db);
                }
            }
            Todo::Many(list) => {
                for (p, gp) in list {
                    if self.wants(p) {
                        add_into(self.grad_buf(p), &gp);
                    }
                }
            }
        }
    }
}

fn add_into(buf: &mut [f64], g: &[f64]) {
    debug_assert_eq!(buf.len(), g.len());
    for (b, gi) in buf.iter_mut().zip(g) {
        *b += gi;
    }
}

/// Overflow-free logistic: splits on sign so the exponent argument is
/// always non-positive.
pub fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    mx + row.iter().map(|&x| (x - mx).exp()).sum::<f64>().ln()
}

// ── tests ────────────────────────────────────────────────────────────────────
