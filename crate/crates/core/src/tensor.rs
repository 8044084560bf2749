//! Dense tensors and the gradient tape.
//!
//! Values are immutable row-major f64 buffers; construction rejects NaN and
//! infinity, so every downstream op starts from finite data. A [`GradTape`]
//! records primitive ops during the forward pass and replays them in strict
//! reverse order to accumulate adjoints for every leaf.

use std::sync::Arc;

use thiserror::Error;

/// Range below which a min-max span counts as degenerate and normalizes to zero.
pub const MINMAX_EPS: f64 = 1e-12;

/// Errors from tensor construction and tape operations.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("shape {shape:?} implies {expected} elements, got {got}")]
    ShapeDataMismatch {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value {value} at flat index {index}")]
    NonFinite { value: f64, index: usize },
    #[error("dimension mismatch in {op}: left {left:?}, right {right:?}")]
    DimMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op} requires a rank-{expected} tensor, got shape {shape:?}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: slice {start}..{end} out of bounds for axis of size {size}")]
    RangeOutOfBounds {
        op: &'static str,
        start: usize,
        end: usize,
        size: usize,
    },
    #[error("softmax requires a non-empty last dimension")]
    EmptyLastDim,
    #[error("backward seed shape {seed:?} does not match output shape {output:?}")]
    SeedShapeMismatch { seed: Vec<usize>, output: Vec<usize> },
    #[error("node {0} does not belong to this tape")]
    ForeignNode(usize),
    #[error("{op} needs at least one input")]
    EmptyInput { op: &'static str },
}

/// Immutable dense tensor: row-major 64-bit values plus a shape.
///
/// Cloning is cheap (the buffer is shared) and tensors are safe to hand
/// across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<[f64]>,
}

impl Tensor {
    /// Builds a tensor, rejecting shape/data length mismatches and any
    /// non-finite value.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self, TensorError> {
        let shape = shape.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeDataMismatch {
                shape,
                expected,
                got: data.len(),
            });
        }
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(TensorError::NonFinite { value, index });
        }
        Ok(Tensor {
            shape,
            data: data.into(),
        })
    }

    /// Rank-0 scalar.
    pub fn scalar(value: f64) -> Result<Self, TensorError> {
        Self::new(Vec::new(), vec![value])
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n].into(),
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Result<Self, TensorError> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Self::new(shape, vec![value; n])
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

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Single-element extraction; panics if the tensor holds more than one value.
    pub fn item(&self) -> f64 {
        assert_eq!(
            self.len(),
            1,
            "item() called on tensor with {} elements",
            self.len()
        );
        self.data[0]
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize), TensorError> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(TensorError::RankMismatch {
                op,
                expected: 2,
                shape: self.shape.clone(),
            }),
        }
    }

    fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<(), TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::DimMismatch {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(())
    }

    /// Elementwise sum (shapes must match exactly; no broadcasting).
    pub fn add(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.same_shape(other, "add")?;
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| a + b)
            .collect();
        Tensor::new(self.shape.clone(), data)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.same_shape(other, "sub")?;
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| a - b)
            .collect();
        Tensor::new(self.shape.clone(), data)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.same_shape(other, "mul")?;
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| a * b)
            .collect();
        Tensor::new(self.shape.clone(), data)
    }

    pub fn scale(&self, k: f64) -> Result<Tensor, TensorError> {
        let data = self.data.iter().map(|a| a * k).collect();
        Tensor::new(self.shape.clone(), data)
    }

    /// Standard 2-D matrix product.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        let (m, ka) = self.dims2("matmul")?;
        let (kb, n) = other.dims2("matmul")?;
        if ka != kb {
            return Err(TensorError::DimMismatch {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Tensor::new(vec![m, n], matmul_kernel(&self.data, &other.data, m, ka, n))
    }

    pub fn transpose(&self) -> Result<Tensor, TensorError> {
        let (r, c) = self.dims2("transpose")?;
        Tensor::new(vec![c, r], transpose_kernel(&self.data, r, c))
    }

    /// Softmax along the last dimension, max-shifted for stability.
    pub fn softmax_lastdim(&self) -> Result<Tensor, TensorError> {
        let cols = *self.shape.last().ok_or(TensorError::EmptyLastDim)?;
        if cols == 0 {
            return Err(TensorError::EmptyLastDim);
        }
        Tensor::new(self.shape.clone(), softmax_rows_kernel(&self.data, cols))
    }

    /// FNV-1a hash of the raw little-endian bytes; used for trace snapshots.
    pub fn content_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in self.data.iter() {
            for b in v.to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }
}

// ── kernels shared by the plain ops and the tape ─────────────────────────────

fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += aip * brow[j];
            }
        }
    }
    out
}

fn transpose_kernel(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

fn softmax_rows_kernel(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, orow) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - max).exp();
            sum += *o;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    out
}

/// Per-row min-max rescale to [0, 1]; a row whose span is below
/// [`MINMAX_EPS`] carries no signal and maps to all zeros.
fn minmax_rows_kernel(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, orow) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let min = row.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = max - min;
        if span < MINMAX_EPS {
            continue;
        }
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - min) / span;
        }
    }
    out
}

fn argminmax(row: &[f64]) -> (usize, usize) {
    let mut jmin = 0;
    let mut jmax = 0;
    for (j, &v) in row.iter().enumerate() {
        if v < row[jmin] {
            jmin = j;
        }
        if v > row[jmax] {
            jmax = j;
        }
    }
    (jmin, jmax)
}

// ── gradient tape ─────────────────────────────────────────────────────────────

/// Handle to a node on a [`GradTape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    /// Tracked input; receives a gradient from `backward`.
    Leaf,
    /// Untracked input; its gradient is exactly zero by definition.
    Constant,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    Softmax(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    SliceRows(NodeId, usize, usize),
    SliceCols(NodeId, usize, usize),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    MinMaxRows(NodeId),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Ordered record of primitive ops with enough saved state to replay
/// adjoints. One tape belongs to one logical task; values pushed onto it are
/// immutable.
#[derive(Debug, Default)]
pub struct GradTape {
    nodes: Vec<Node>,
}

impl GradTape {
    pub fn new() -> Self {
        GradTape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a tracked input.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    /// Registers an untracked input (weights, targets, masks).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant, value)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    fn check(&self, id: NodeId) -> Result<(), TensorError> {
        if id.0 >= self.nodes.len() {
            return Err(TensorError::ForeignNode(id.0));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.check(a)?;
        self.check(b)?;
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.check(a)?;
        self.check(b)?;
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(Op::Sub(a, b), value))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.check(a)?;
        self.check(b)?;
        let value = self.value(a).mul(self.value(b))?;
        Ok(self.push(Op::Mul(a, b), value))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> Result<NodeId, TensorError> {
        self.check(a)?;
        if !k.is_finite() {
            return Err(TensorError::NonFinite { value: k, index: 0 });
        }
        let value = self.value(a).scale(k)?;
        Ok(self.push(Op::Scale(a, k), value))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.check(a)?;
        self.check(b)?;
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::Matmul(a, b), value))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        self.check(a)?;
        let value = self.value(a).transpose()?;
        Ok(self.push(Op::Transpose(a), value))
    }

    pub fn softmax_lastdim(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        self.check(a)?;
        let value = self.value(a).softmax_lastdim()?;
        Ok(self.push(Op::Softmax(a), value))
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        self.check(a)?;
        let value = Tensor::scalar(self.value(a).data().iter().sum())?;
        Ok(self.push(Op::SumAll(a), value))
    }

    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        self.check(a)?;
        let t = self.value(a);
        if t.is_empty() {
            return Err(TensorError::EmptyInput { op: "mean_all" });
        }
        let value = Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64)?;
        Ok(self.push(Op::MeanAll(a), value))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId, TensorError> {
        self.check(a)?;
        let (r, c) = self.value(a).dims2("slice_rows")?;
        if start + len > r || len == 0 {
            return Err(TensorError::RangeOutOfBounds {
                op: "slice_rows",
                start,
                end: start + len,
                size: r,
            });
        }
        let data = self.value(a).data()[start * c..(start + len) * c].to_vec();
        let value = Tensor::new(vec![len, c], data)?;
        Ok(self.push(Op::SliceRows(a, start, len), value))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId, TensorError> {
        self.check(a)?;
        let (r, c) = self.value(a).dims2("slice_cols")?;
        if start + len > c || len == 0 {
            return Err(TensorError::RangeOutOfBounds {
                op: "slice_cols",
                start,
                end: start + len,
                size: c,
            });
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let value = Tensor::new(vec![r, len], data)?;
        Ok(self.push(Op::SliceCols(a, start, len), value))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::EmptyInput { op: "concat_rows" });
        }
        for &p in parts {
            self.check(p)?;
        }
        let (_, c0) = self.value(parts[0]).dims2("concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.value(p).dims2("concat_rows")?;
            if c != c0 {
                return Err(TensorError::DimMismatch {
                    op: "concat_rows",
                    left: self.value(parts[0]).shape().to_vec(),
                    right: self.value(p).shape().to_vec(),
                });
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new(vec![rows, c0], data)?;
        Ok(self.push(Op::ConcatRows(parts.to_vec()), value))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::EmptyInput { op: "concat_cols" });
        }
        for &p in parts {
            self.check(p)?;
        }
        let (r0, _) = self.value(parts[0]).dims2("concat_cols")?;
        let mut cols = 0;
        for &p in parts {
            let (r, c) = self.value(p).dims2("concat_cols")?;
            if r != r0 {
                return Err(TensorError::DimMismatch {
                    op: "concat_cols",
                    left: self.value(parts[0]).shape().to_vec(),
                    right: self.value(p).shape().to_vec(),
                });
            }
            cols += c;
        }
        let mut data = Vec::with_capacity(r0 * cols);
        for i in 0..r0 {
            for &p in parts {
                let (_, c) = self.value(p).dims2("concat_cols")?;
                data.extend_from_slice(&self.value(p).data()[i * c..(i + 1) * c]);
            }
        }
        let value = Tensor::new(vec![r0, cols], data)?;
        Ok(self.push(Op::ConcatCols(parts.to_vec()), value))
    }

    /// Per-row min-max normalization with the degenerate-span-to-zero rule.
    pub fn minmax_rows(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        self.check(a)?;
        let (_, c) = self.value(a).dims2("minmax_rows")?;
        if c == 0 {
            return Err(TensorError::EmptyInput { op: "minmax_rows" });
        }
        let data = minmax_rows_kernel(self.value(a).data(), c);
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(Op::MinMaxRows(a), value))
    }

    /// Replays adjoints in strict reverse order of recording and returns the
    /// gradient of the seeded output with respect to every node. Leaves that
    /// do not influence the output, and all constants, get exact zeros.
    pub fn backward(&self, output: NodeId, seed: &Tensor) -> Result<Gradients, TensorError> {
        self.check(output)?;
        let out_shape = self.nodes[output.0].value.shape();
        if seed.shape() != out_shape {
            return Err(TensorError::SeedShapeMismatch {
                seed: seed.shape().to_vec(),
                output: out_shape.to_vec(),
            });
        }

        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adj[output.0] = Some(seed.data().to_vec());

        for i in (0..=output.0).rev() {
            if adj[i].is_none() {
                continue;
            }
            // Inputs of node i always precede it on the tape.
            let (before, rest) = adj.split_at_mut(i);
            let g = rest[0].as_ref().expect("checked above");
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf | Op::Constant => {}
                Op::Add(a, b) => {
                    axpy(before, a.0, self.nodes[a.0].value.len(), g, 1.0);
                    axpy(before, b.0, self.nodes[b.0].value.len(), g, 1.0);
                }
                Op::Sub(a, b) => {
                    axpy(before, a.0, self.nodes[a.0].value.len(), g, 1.0);
                    axpy(before, b.0, self.nodes[b.0].value.len(), g, -1.0);
                }
                Op::Mul(a, b) => {
                    let av = self.nodes[a.0].value.data();
                    let bv = self.nodes[b.0].value.data();
                    let ga = grad_buf(before, a.0, av.len());
                    for (o, (gi, bi)) in ga.iter_mut().zip(g.iter().zip(bv)) {
                        *o += gi * bi;
                    }
                    let gb = grad_buf(before, b.0, bv.len());
                    for (o, (gi, ai)) in gb.iter_mut().zip(g.iter().zip(av)) {
                        *o += gi * ai;
                    }
                }
                Op::Scale(a, k) => {
                    axpy(before, a.0, self.nodes[a.0].value.len(), g, *k);
                }
                Op::Matmul(a, b) => {
                    let (m, k) = self.nodes[a.0].value.dims2("matmul")?;
                    let (_, n) = self.nodes[b.0].value.dims2("matmul")?;
                    let av = self.nodes[a.0].value.data();
                    let bv = self.nodes[b.0].value.data();
                    // dA = g · Bᵀ
                    let bt = transpose_kernel(bv, k, n);
                    let da = matmul_kernel(g, &bt, m, n, k);
                    axpy(before, a.0, av.len(), &da, 1.0);
                    // dB = Aᵀ · g
                    let at = transpose_kernel(av, m, k);
                    let db = matmul_kernel(&at, g, k, m, n);
                    axpy(before, b.0, bv.len(), &db, 1.0);
                }
                Op::Transpose(a) => {
                    let (r, c) = self.nodes[a.0].value.dims2("transpose")?;
                    // g has shape c×r; transposing it back yields the adjoint.
                    let gt = transpose_kernel(g, c, r);
                    axpy(before, a.0, r * c, &gt, 1.0);
                }
                Op::Softmax(a) => {
                    let y = node.value.data();
                    let cols = *node.value.shape().last().expect("softmax output rank");
                    let ga = grad_buf(before, a.0, y.len());
                    for ((yrow, grow), orow) in y
                        .chunks(cols)
                        .zip(g.chunks(cols))
                        .zip(ga.chunks_mut(cols))
                    {
                        let dot: f64 = yrow.iter().zip(grow).map(|(yi, gi)| yi * gi).sum();
                        for (o, (yi, gi)) in orow.iter_mut().zip(yrow.iter().zip(grow)) {
                            *o += yi * (gi - dot);
                        }
                    }
                }
                Op::SumAll(a) => {
                    let n = self.nodes[a.0].value.len();
                    let gv = g[0];
                    let ga = grad_buf(before, a.0, n);
                    for o in ga.iter_mut() {
                        *o += gv;
                    }
                }
                Op::MeanAll(a) => {
                    let n = self.nodes[a.0].value.len();
                    let gv = g[0] / n as f64;
                    let ga = grad_buf(before, a.0, n);
                    for o in ga.iter_mut() {
                        *o += gv;
                    }
                }
                Op::SliceRows(a, start, _len) => {
                    let (_, c) = self.nodes[a.0].value.dims2("slice_rows")?;
                    let ga = grad_buf(before, a.0, self.nodes[a.0].value.len());
                    for (o, gi) in ga[start * c..start * c + g.len()].iter_mut().zip(g) {
                        *o += gi;
                    }
                }
                Op::SliceCols(a, start, len) => {
                    let (r, c) = self.nodes[a.0].value.dims2("slice_cols")?;
                    let ga = grad_buf(before, a.0, r * c);
                    for i in 0..r {
                        for j in 0..*len {
                            ga[i * c + start + j] += g[i * len + j];
                        }
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.nodes[p.0].value.len();
                        axpy(before, p.0, n, &g[offset..offset + n], 1.0);
                        offset += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let (rows, total_cols) = node.value.dims2("concat_cols")?;
                    let mut col_offset = 0;
                    for &p in parts {
                        let (_, c) = self.nodes[p.0].value.dims2("concat_cols")?;
                        let gp = grad_buf(before, p.0, rows * c);
                        for i in 0..rows {
                            for j in 0..c {
                                gp[i * c + j] += g[i * total_cols + col_offset + j];
                            }
                        }
                        col_offset += c;
                    }
                }
                Op::MinMaxRows(a) => {
                    let x = self.nodes[a.0].value.data();
                    let y = node.value.data();
                    let (_, cols) = node.value.dims2("minmax_rows")?;
                    let ga = grad_buf(before, a.0, x.len());
                    for (((xrow, yrow), grow), orow) in x
                        .chunks(cols)
                        .zip(y.chunks(cols))
                        .zip(g.chunks(cols))
                        .zip(ga.chunks_mut(cols))
                    {
                        let (jmin, jmax) = argminmax(xrow);
                        let span = xrow[jmax] - xrow[jmin];
                        if span < MINMAX_EPS {
                            continue;
                        }
                        let s1: f64 = grow.iter().sum();
                        let s2: f64 = grow.iter().zip(yrow).map(|(gi, yi)| gi * yi).sum();
                        for (o, gi) in orow.iter_mut().zip(grow) {
                            *o += gi / span;
                        }
                        orow[jmin] -= (s1 - s2) / span;
                        orow[jmax] -= s2 / span;
                    }
                }
            }
        }

        let mut grads = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let shape = node.value.shape().to_vec();
            let grad = match (&node.op, adj[i].take()) {
                // A constant's gradient is exactly zero regardless of flow.
                (Op::Constant, _) | (_, None) => Tensor::zeros(shape),
                (_, Some(buf)) => Tensor::new(shape, buf)?,
            };
            grads.push(grad);
        }
        Ok(Gradients { grads })
    }

    /// `backward` with a unit seed; the output must hold a single value.
    pub fn backward_scalar(&self, output: NodeId) -> Result<Gradients, TensorError> {
        self.check(output)?;
        let shape = self.nodes[output.0].value.shape().to_vec();
        let n: usize = shape.iter().product();
        if n != 1 {
            return Err(TensorError::SeedShapeMismatch {
                seed: Vec::new(),
                output: shape,
            });
        }
        let seed = Tensor::new(shape, vec![1.0])?;
        self.backward(output, &seed)
    }
}

fn grad_buf(adj: &mut [Option<Vec<f64>>], id: usize, len: usize) -> &mut [f64] {
    adj[id].get_or_insert_with(|| vec![0.0; len])
}

fn axpy(adj: &mut [Option<Vec<f64>>], id: usize, len: usize, g: &[f64], k: f64) {
    let buf = grad_buf(adj, id, len);
    for (o, gi) in buf.iter_mut().zip(g) {
        *o += k * gi;
    }
}

/// Per-node adjoints produced by [`GradTape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn wrt(&self, id: NodeId) -> &Tensor {
        &self.grads[id.index()]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor2(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::new(vec![rows, cols], data.to_vec()).unwrap()
    }

    #[test]
    fn construction_rejects_shape_mismatch() {
        let err = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0]).unwrap_err();
        assert!(matches!(err, TensorError::ShapeDataMismatch { .. }));
    }

    #[test]
    fn construction_rejects_non_finite() {
        assert!(matches!(
            Tensor::new(vec![2], vec![1.0, f64::NAN]).unwrap_err(),
            TensorError::NonFinite { index: 1, .. }
        ));
        assert!(matches!(
            Tensor::new(vec![1], vec![f64::INFINITY]).unwrap_err(),
            TensorError::NonFinite { .. }
        ));
    }

    #[test]
    fn tensors_are_send_and_sync() {
        fn assert_send_sync<T: Send + Sync>() {}
        assert_send_sync::<Tensor>();
    }

    #[test]
    fn matmul_identity() {
        let eye = tensor2(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let a = tensor2(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(eye.matmul(&a).unwrap().data(), a.data());
    }

    #[test]
    fn matmul_hand_example() {
        let a = tensor2(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = tensor2(2, 1, &[0.0, 1.0]);
        assert_eq!(a.matmul(&b).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        // Independent oracle: naive i-j-p summation order.
        let mut state = 0x1234_5678_u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let a_data: Vec<f64> = (0..20).map(|_| next()).collect();
        let b_data: Vec<f64> = (0..12).map(|_| next()).collect();
        let a = tensor2(5, 4, &a_data);
        let b = tensor2(4, 3, &b_data);
        let got = a.matmul(&b).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                let mut want = 0.0;
                for p in 0..4 {
                    want += a_data[i * 4 + p] * b_data[p * 3 + j];
                }
                assert!((got.data()[i * 3 + j] - want).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let a = tensor2(2, 3, &[0.0; 6]);
        let b = tensor2(2, 2, &[0.0; 4]);
        assert!(matches!(
            a.matmul(&b).unwrap_err(),
            TensorError::DimMismatch { op: "matmul", .. }
        ));
    }

    #[test]
    fn softmax_symmetry() {
        let x = Tensor::new(vec![3], vec![0.0, 0.0, 0.0]).unwrap();
        let y = x.softmax_lastdim().unwrap();
        for &v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_max_shift_avoids_overflow() {
        let x = Tensor::new(vec![2], vec![1000.0, 1000.0]).unwrap();
        let y = x.softmax_lastdim().unwrap();
        assert!((y.data()[0] - 0.5).abs() < 1e-15);
        assert!((y.data()[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn softmax_matches_direct_formula_oracle() {
        let x = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let y = x.softmax_lastdim().unwrap();
        // Oracle: unshifted exp/sum.
        let exps: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).collect();
        let sum: f64 = exps.iter().sum();
        for (got, want) in y.data().iter().zip(exps.iter().map(|e| e / sum)) {
            assert!((got - want).abs() <= 1e-15, "got {got}, want {want}");
        }
    }

    #[test]
    fn backward_square_at_three() {
        let mut tape = GradTape::new();
        let x = tape.leaf(Tensor::scalar(3.0).unwrap());
        let y = tape.mul(x, x).unwrap();
        let grads = tape.backward_scalar(y).unwrap();
        assert_eq!(grads.wrt(x).item(), 6.0);
    }

    #[test]
    fn backward_softmax_component_frozen_values() {
        // Frozen from the analytic Jacobian at [0,0] and confirmed against
        // central finite differences with h = 1e-4.
        let mut tape = GradTape::new();
        let x = tape.leaf(tensor2(1, 2, &[0.0, 0.0]));
        let sm = tape.softmax_lastdim(x).unwrap();
        let first = tape.slice_cols(sm, 0, 1).unwrap();
        let grads = tape.backward_scalar(first).unwrap();
        let g = grads.wrt(x);
        assert!((g.data()[0] - 0.25).abs() < 1e-12);
        assert!((g.data()[1] + 0.25).abs() < 1e-12);
    }

    #[test]
    fn backward_constant_gets_exact_zero() {
        let mut tape = GradTape::new();
        let x = tape.leaf(Tensor::scalar(2.0).unwrap());
        let c = tape.constant(Tensor::scalar(5.0).unwrap());
        let y = tape.mul(x, c).unwrap();
        let grads = tape.backward_scalar(y).unwrap();
        assert_eq!(grads.wrt(c).data(), &[0.0]);
        assert_eq!(grads.wrt(x).data(), &[5.0]);
    }

    #[test]
    fn backward_unused_leaf_gets_zero() {
        let mut tape = GradTape::new();
        let x = tape.leaf(Tensor::scalar(2.0).unwrap());
        let unused = tape.leaf(tensor2(2, 2, &[1.0; 4]));
        let y = tape.mul(x, x).unwrap();
        let grads = tape.backward_scalar(y).unwrap();
        assert_eq!(grads.wrt(unused).data(), &[0.0; 4]);
    }

    #[test]
    fn backward_seed_shape_mismatch_errors() {
        let mut tape = GradTape::new();
        let x = tape.leaf(tensor2(2, 2, &[1.0; 4]));
        let y = tape.softmax_lastdim(x).unwrap();
        let bad_seed = Tensor::new(vec![4], vec![1.0; 4]).unwrap();
        assert!(matches!(
            tape.backward(y, &bad_seed).unwrap_err(),
            TensorError::SeedShapeMismatch { .. }
        ));
    }

    #[test]
    fn minmax_rows_basic_and_degenerate() {
        let mut tape = GradTape::new();
        let a = tape.leaf(tensor2(2, 3, &[0.0, 2.0, 4.0, 7.0, 7.0, 7.0]));
        let y = tape.minmax_rows(a).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.5, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let mut tape = GradTape::new();
        let a = tape.leaf(tensor2(1, 2, &[1.0, 2.0]));
        let b = tape.leaf(tensor2(1, 2, &[3.0, 4.0]));
        let cat = tape.concat_rows(&[a, b]).unwrap();
        assert_eq!(tape.value(cat).shape(), &[2, 2]);
        let back = tape.slice_rows(cat, 1, 1).unwrap();
        assert_eq!(tape.value(back).data(), &[3.0, 4.0]);
        let col = tape.slice_cols(cat, 1, 1).unwrap();
        assert_eq!(tape.value(col).data(), &[2.0, 4.0]);
    }
}
