//! Dense f64 matrices and a dynamic reverse-mode autodiff tape.
//!
//! A [`Tape`] owns every intermediate value of one forward pass. Values are
//! addressed by [`TensorId`]; appending an op appends a node, so append order
//! is a topological order and `backward` walks it in strict reverse exactly
//! once. Index vectors (gather/scatter arguments) are plain `usize` data and
//! never carry gradients.

mod store;

pub use store::{
    gaussian, gaussian_matrix, seeded_rng, AdamState, ArgVal, Hyper, OptimKind, ParamKey,
    ParameterStore,
};

use crate::error::{Error, Result, Stage};
use crate::nra::AggKind;

fn shape_err(msg: String) -> Error {
    Error::new(Stage::Compile, msg)
}

/// Plain row-major dense matrix. No autodiff; the dumb storage type shared by
/// the tape and the parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Matrix {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn ones(rows: usize, cols: usize) -> Matrix {
        Matrix { rows, cols, data: vec![1.0; rows * cols] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Matrix {
        let ncols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * ncols);
        for r in rows {
            assert_eq!(r.len(), ncols, "ragged rows");
            data.extend_from_slice(r);
        }
        Matrix { rows: rows.len(), cols: ncols, data }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Matrix {
        assert_eq!(data.len(), rows * cols);
        Matrix { rows, cols, data }
    }

    pub fn scalar(x: f64) -> Matrix {
        Matrix { rows: 1, cols: 1, data: vec![x] }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other.get(k, j);
                }
            }
        }
        out
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.set(j, i, self.get(i, j));
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, c: f64) -> Matrix {
        self.map(|x| x * c)
    }

    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(idx.len(), self.cols);
        for (i, &r) in idx.iter().enumerate() {
            out.data[i * self.cols..(i + 1) * self.cols].copy_from_slice(self.row(r));
        }
        out
    }
}

// tanh-form GELU and its exact derivative.
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(pub usize);

#[derive(Debug, Clone)]
enum TapeOp {
    /// Leaf holding a learnable parameter; gradients are reported per key.
    Param(ParamKey),
    /// Leaf holding fixed data (features, one-hot encodings, index masks).
    Constant,
    MatMul(TensorId, TensorId),
    Add(TensorId, TensorId),
    MulElem(TensorId, TensorId),
    Scale(TensorId, f64),
    ConcatCols(Vec<TensorId>),
    ConcatRows(Vec<TensorId>),
    Relu(TensorId),
    Sigmoid(TensorId),
    Gelu(TensorId),
    IndexSelect(TensorId, Vec<usize>),
    ScatterReduce { src: TensorId, group_idx: Vec<usize>, n_groups: usize, kind: AggKind },
    SoftmaxGrouped { src: TensorId, group_idx: Vec<usize>, n_groups: usize },
    /// Per-row cross entropy: out[i] = -sum_c targets[i,c] * log softmax(logits[i])_c.
    CrossEntropyRows { logits: TensorId, targets: TensorId },
    Reduce { src: TensorId, kind: ReduceKind },
}

struct TapeNode {
    op: TapeOp,
    value: Matrix,
    grad: Option<Matrix>,
}

/// Dynamic computation tape. One per forward pass; rebuilt every epoch.
pub struct Tape {
    nodes: Vec<TapeNode>,
    params: Vec<(ParamKey, TensorId)>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape { nodes: Vec::new(), params: Vec::new() }
    }

    fn push(&mut self, op: TapeOp, value: Matrix) -> TensorId {
        self.nodes.push(TapeNode { op, value, grad: None });
        TensorId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: TensorId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: TensorId) -> Option<&Matrix> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn shape(&self, id: TensorId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    pub fn constant(&mut self, value: Matrix) -> TensorId {
        self.push(TapeOp::Constant, value)
    }

    /// Leaf parameter; its gradient is collected under `key` after backward.
    pub fn param(&mut self, key: ParamKey, value: Matrix) -> TensorId {
        let id = self.push(TapeOp::Param(key.clone()), value);
        self.params.push((key, id));
        id
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ac != br {
            return Err(shape_err(format!("matmul shape mismatch: {}x{} @ {}x{}", ar, ac, br, bc)));
        }
        let v = self.value(a).matmul(self.value(b));
        Ok(self.push(TapeOp::MatMul(a, b), v))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!(
                "add shape mismatch: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        Ok(self.push(TapeOp::Add(a, b), v))
    }

    pub fn mul_elementwise(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!(
                "elementwise mul shape mismatch: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect();
        let v = Matrix { rows: va.rows, cols: va.cols, data };
        Ok(self.push(TapeOp::MulElem(a, b), v))
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let v = self.value(a).scale(c);
        self.push(TapeOp::Scale(a, c), v)
    }

    pub fn concat_cols(&mut self, inputs: &[TensorId]) -> Result<TensorId> {
        if inputs.is_empty() {
            return Err(shape_err("concat_cols of zero inputs".into()));
        }
        let rows = self.shape(inputs[0]).0;
        let mut cols = 0;
        for &id in inputs {
            let (r, c) = self.shape(id);
            if r != rows {
                return Err(shape_err(format!("concat_cols row mismatch: {} vs {}", rows, r)));
            }
            cols += c;
        }
        let mut out = Matrix::zeros(rows, cols);
        for i in 0..rows {
            let mut off = 0;
            for &id in inputs {
                let m = self.value(id);
                out.data[i * cols + off..i * cols + off + m.cols].copy_from_slice(m.row(i));
                off += m.cols;
            }
        }
        Ok(self.push(TapeOp::ConcatCols(inputs.to_vec()), out))
    }

    pub fn concat_rows(&mut self, inputs: &[TensorId]) -> Result<TensorId> {
        if inputs.is_empty() {
            return Err(shape_err("concat_rows of zero inputs".into()));
        }
        let cols = self.shape(inputs[0]).1;
        let mut rows = 0;
        for &id in inputs {
            let (r, c) = self.shape(id);
            if c != cols {
                return Err(shape_err(format!("concat_rows col mismatch: {} vs {}", cols, c)));
            }
            rows += r;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for &id in inputs {
            data.extend_from_slice(&self.value(id).data);
        }
        let out = Matrix { rows, cols, data };
        Ok(self.push(TapeOp::ConcatRows(inputs.to_vec()), out))
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(TapeOp::Relu(a), v)
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        let v = self.value(a).map(sigmoid);
        self.push(TapeOp::Sigmoid(a), v)
    }

    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        let v = self.value(a).map(gelu);
        self.push(TapeOp::Gelu(a), v)
    }

    pub fn index_select(&mut self, a: TensorId, idx: &[usize]) -> Result<TensorId> {
        let (rows, _) = self.shape(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(shape_err(format!("index_select out of range: {} >= {}", bad, rows)));
        }
        let v = self.value(a).select_rows(idx);
        Ok(self.push(TapeOp::IndexSelect(a, idx.to_vec()), v))
    }

    pub fn scatter_reduce(
        &mut self,
        src: TensorId,
        group_idx: &[usize],
        n_groups: usize,
        kind: AggKind,
    ) -> Result<TensorId> {
        let (rows, cols) = self.shape(src);
        if group_idx.len() != rows {
            return Err(shape_err(format!(
                "scatter_reduce index length {} != rows {}",
                group_idx.len(),
                rows
            )));
        }
        if let Some(&bad) = group_idx.iter().find(|&&g| g >= n_groups) {
            return Err(shape_err(format!("scatter_reduce group {} >= {}", bad, n_groups)));
        }
        let m = self.value(src);
        let mut out = Matrix::zeros(n_groups, cols);
        match kind {
            AggKind::Sum => {
                for (i, &g) in group_idx.iter().enumerate() {
                    for c in 0..cols {
                        out.data[g * cols + c] += m.get(i, c);
                    }
                }
            }
            AggKind::Mean => {
                let mut counts = vec![0usize; n_groups];
                for (i, &g) in group_idx.iter().enumerate() {
                    counts[g] += 1;
                    for c in 0..cols {
                        out.data[g * cols + c] += m.get(i, c);
                    }
                }
                for g in 0..n_groups {
                    if counts[g] > 0 {
                        for c in 0..cols {
                            out.data[g * cols + c] /= counts[g] as f64;
                        }
                    }
                }
            }
            AggKind::Max => {
                // Ties break toward the lowest input row index; argmax is
                // recomputed the same way in backward.
                let mut seen = vec![false; n_groups];
                for (i, &g) in group_idx.iter().enumerate() {
                    for c in 0..cols {
                        let x = m.get(i, c);
                        if !seen[g] || x > out.get(g, c) {
                            out.set(g, c, x);
                        }
                    }
                    seen[g] = true;
                }
            }
        }
        Ok(self.push(
            TapeOp::ScatterReduce { src, group_idx: group_idx.to_vec(), n_groups, kind },
            out,
        ))
    }

    pub fn softmax_rows_grouped(
        &mut self,
        src: TensorId,
        group_idx: &[usize],
        n_groups: usize,
    ) -> Result<TensorId> {
        let (rows, cols) = self.shape(src);
        if group_idx.len() != rows {
            return Err(shape_err(format!(
                "grouped softmax index length {} != rows {}",
                group_idx.len(),
                rows
            )));
        }
        if let Some(&bad) = group_idx.iter().find(|&&g| g >= n_groups) {
            return Err(shape_err(format!("grouped softmax group {} >= {}", bad, n_groups)));
        }
        let m = self.value(src);
        let mut out = Matrix::zeros(rows, cols);
        for c in 0..cols {
            let mut maxes = vec![f64::NEG_INFINITY; n_groups];
            for (i, &g) in group_idx.iter().enumerate() {
                maxes[g] = maxes[g].max(m.get(i, c));
            }
            let mut sums = vec![0.0; n_groups];
            for (i, &g) in group_idx.iter().enumerate() {
                let e = (m.get(i, c) - maxes[g]).exp();
                out.set(i, c, e);
                sums[g] += e;
            }
            for (i, &g) in group_idx.iter().enumerate() {
                out.set(i, c, out.get(i, c) / sums[g]);
            }
        }
        Ok(self.push(
            TapeOp::SoftmaxGrouped { src, group_idx: group_idx.to_vec(), n_groups },
            out,
        ))
    }

    pub fn cross_entropy_rows(&mut self, logits: TensorId, targets: TensorId) -> Result<TensorId> {
        if self.shape(logits) != self.shape(targets) {
            return Err(shape_err(format!(
                "cross entropy shape mismatch: {:?} vs {:?}",
                self.shape(logits),
                self.shape(targets)
            )));
        }
        let (rows, cols) = self.shape(logits);
        if cols == 0 {
            return Err(shape_err("cross entropy over zero classes".into()));
        }
        let l = self.value(logits);
        let t = self.value(targets);
        let mut out = Matrix::zeros(rows, 1);
        for i in 0..rows {
            let lse = log_sum_exp(l.row(i));
            let mut ce = 0.0;
            for c in 0..cols {
                ce += t.get(i, c) * (lse - l.get(i, c));
            }
            out.data[i] = ce;
        }
        Ok(self.push(TapeOp::CrossEntropyRows { logits, targets }, out))
    }

    pub fn reduce(&mut self, src: TensorId, kind: ReduceKind) -> Result<TensorId> {
        let (rows, cols) = self.shape(src);
        if kind == ReduceKind::Mean && rows * cols == 0 {
            return Err(shape_err("mean reduction over an empty tensor".into()));
        }
        let sum: f64 = self.value(src).data.iter().sum();
        let v = match kind {
            ReduceKind::Sum => sum,
            ReduceKind::Mean => sum / (rows * cols) as f64,
        };
        Ok(self.push(TapeOp::Reduce { src, kind }, Matrix::scalar(v)))
    }

    /// Reverse pass from a scalar loss. Gradient slots of all contributing
    /// nodes are populated; leaves accumulate across multiple uses.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::new(
                Stage::Fit,
                format!("loss must be a 1x1 tensor, got {:?}", self.shape(loss)),
            ));
        }
        for n in self.nodes.iter_mut() {
            n.grad = None;
        }
        self.nodes[loss.0].grad = Some(Matrix::ones(1, 1));
        for i in (0..=loss.0).rev() {
            let upstream = match self.nodes[i].grad.take() {
                Some(g) => g,
                None => continue,
            };
            let op = self.nodes[i].op.clone();
            let out_value = &self.nodes[i].value;
            match op {
                TapeOp::Param(_) | TapeOp::Constant => {}
                TapeOp::MatMul(a, b) => {
                    let ga = upstream.matmul(&self.nodes[b.0].value.transpose());
                    let gb = self.nodes[a.0].value.transpose().matmul(&upstream);
                    self.accum(a, ga);
                    self.accum(b, gb);
                }
                TapeOp::Add(a, b) => {
                    self.accum(a, upstream.clone());
                    self.accum(b, upstream);
                }
                TapeOp::MulElem(a, b) => {
                    let va = self.nodes[a.0].value.clone();
                    let vb = self.nodes[b.0].value.clone();
                    let mut ga = upstream.clone();
                    for (g, y) in ga.data.iter_mut().zip(&vb.data) {
                        *g *= y;
                    }
                    let mut gb = upstream;
                    for (g, x) in gb.data.iter_mut().zip(&va.data) {
                        *g *= x;
                    }
                    self.accum(a, ga);
                    self.accum(b, gb);
                }
                TapeOp::Scale(a, c) => {
                    self.accum(a, upstream.scale(c));
                }
                TapeOp::ConcatCols(inputs) => {
                    let mut off = 0;
                    for id in inputs {
                        let (r, c) = self.shape(id);
                        let mut g = Matrix::zeros(r, c);
                        for i in 0..r {
                            g.data[i * c..(i + 1) * c]
                                .copy_from_slice(&upstream.row(i)[off..off + c]);
                        }
                        off += c;
                        self.accum(id, g);
                    }
                }
                TapeOp::ConcatRows(inputs) => {
                    let mut off = 0;
                    for id in inputs {
                        let (r, c) = self.shape(id);
                        let g = Matrix {
                            rows: r,
                            cols: c,
                            data: upstream.data[off * c..(off + r) * c].to_vec(),
                        };
                        off += r;
                        self.accum(id, g);
                    }
                }
                TapeOp::Relu(a) => {
                    let va = &self.nodes[a.0].value;
                    let mut g = upstream;
                    for (gi, &x) in g.data.iter_mut().zip(&va.data) {
                        if x <= 0.0 {
                            *gi = 0.0;
                        }
                    }
                    self.accum(a, g);
                }
                TapeOp::Sigmoid(a) => {
                    let mut g = upstream;
                    for (gi, &y) in g.data.iter_mut().zip(&out_value.data.clone()) {
                        *gi *= y * (1.0 - y);
                    }
                    self.accum(a, g);
                }
                TapeOp::Gelu(a) => {
                    let va = self.nodes[a.0].value.clone();
                    let mut g = upstream;
                    for (gi, &x) in g.data.iter_mut().zip(&va.data) {
                        *gi *= gelu_grad(x);
                    }
                    self.accum(a, g);
                }
                TapeOp::IndexSelect(a, idx) => {
                    let (r, c) = self.shape(a);
                    let mut g = Matrix::zeros(r, c);
                    for (i, &src_row) in idx.iter().enumerate() {
                        for j in 0..c {
                            g.data[src_row * c + j] += upstream.get(i, j);
                        }
                    }
                    self.accum(a, g);
                }
                TapeOp::ScatterReduce { src, group_idx, n_groups, kind } => {
                    let (r, c) = self.shape(src);
                    let mut g = Matrix::zeros(r, c);
                    match kind {
                        AggKind::Sum => {
                            for (i, &grp) in group_idx.iter().enumerate() {
                                for j in 0..c {
                                    g.set(i, j, upstream.get(grp, j));
                                }
                            }
                        }
                        AggKind::Mean => {
                            let mut counts = vec![0usize; n_groups];
                            for &grp in &group_idx {
                                counts[grp] += 1;
                            }
                            for (i, &grp) in group_idx.iter().enumerate() {
                                for j in 0..c {
                                    g.set(i, j, upstream.get(grp, j) / counts[grp] as f64);
                                }
                            }
                        }
                        AggKind::Max => {
                            // Route to the arg-max row per (group, column),
                            // lowest row index on ties.
                            let v = &self.nodes[src.0].value;
                            let mut arg = vec![usize::MAX; n_groups * c];
                            for (i, &grp) in group_idx.iter().enumerate() {
                                for j in 0..c {
                                    let slot = grp * c + j;
                                    if arg[slot] == usize::MAX || v.get(i, j) > v.get(arg[slot], j)
                                    {
                                        arg[slot] = i;
                                    }
                                }
                            }
                            for grp in 0..n_groups {
                                for j in 0..c {
                                    let slot = grp * c + j;
                                    if arg[slot] != usize::MAX {
                                        g.set(arg[slot], j, upstream.get(grp, j));
                                    }
                                }
                            }
                        }
                    }
                    self.accum(src, g);
                }
                TapeOp::SoftmaxGrouped { src, group_idx, n_groups } => {
                    // d/dx_j = y_j * (u_j - sum_i u_i y_i) within each group.
                    let y = out_value.clone();
                    let (r, c) = y.shape();
                    let mut g = Matrix::zeros(r, c);
                    for j in 0..c {
                        let mut dots = vec![0.0; n_groups];
                        for (i, &grp) in group_idx.iter().enumerate() {
                            dots[grp] += upstream.get(i, j) * y.get(i, j);
                        }
                        for (i, &grp) in group_idx.iter().enumerate() {
                            g.set(i, j, y.get(i, j) * (upstream.get(i, j) - dots[grp]));
                        }
                    }
                    self.accum(src, g);
                }
                TapeOp::CrossEntropyRows { logits, targets } => {
                    let l = self.nodes[logits.0].value.clone();
                    let t = self.nodes[targets.0].value.clone();
                    let (r, c) = l.shape();
                    let mut gl = Matrix::zeros(r, c);
                    let mut gt = Matrix::zeros(r, c);
                    for i in 0..r {
                        let u = upstream.get(i, 0);
                        let lse = log_sum_exp(l.row(i));
                        let tsum: f64 = t.row(i).iter().sum();
                        for j in 0..c {
                            let p = (l.get(i, j) - lse).exp();
                            gl.set(i, j, u * (p * tsum - t.get(i, j)));
                            gt.set(i, j, u * (lse - l.get(i, j)));
                        }
                    }
                    self.accum(logits, gl);
                    self.accum(targets, gt);
                }
                TapeOp::Reduce { src, kind } => {
                    let (r, c) = self.shape(src);
                    let u = upstream.get(0, 0);
                    let per = match kind {
                        ReduceKind::Sum => u,
                        ReduceKind::Mean => u / (r * c) as f64,
                    };
                    let g = Matrix { rows: r, cols: c, data: vec![per; r * c] };
                    self.accum(src, g);
                }
            }
        }
        Ok(())
    }

    fn accum(&mut self, id: TensorId, g: Matrix) {
        match &mut self.nodes[id.0].grad {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Gradients of every leaf parameter on this tape, keyed like the store.
    /// Parameters the loss never reached report a zero gradient; their keys
    /// are also returned separately so callers may warn.
    pub fn leaf_grads(&self) -> (std::collections::BTreeMap<ParamKey, Matrix>, Vec<ParamKey>) {
        let mut grads = std::collections::BTreeMap::new();
        let mut unreached = Vec::new();
        for (key, id) in &self.params {
            let node = &self.nodes[id.0];
            let g = match &node.grad {
                Some(g) => g.clone(),
                None => {
                    unreached.push(key.clone());
                    Matrix::zeros(node.value.rows, node.value.cols)
                }
            };
            grads
                .entry(key.clone())
                .and_modify(|acc: &mut Matrix| acc.add_assign(&g))
                .or_insert(g);
        }
        (grads, unreached)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(name: &str) -> ParamKey {
        ParamKey::plain(name)
    }

    #[test]
    fn index_select_duplicates_accumulate() {
        let mut tape = Tape::new();
        let a = tape.param(key("a"), Matrix::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]));
        let sel = tape.index_select(a, &[0, 0, 2]).unwrap();
        assert_eq!(tape.value(sel).data, vec![1.0, 1.0, 3.0]);
        let loss = tape.reduce(sel, ReduceKind::Sum).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).unwrap().data, vec![2.0, 0.0, 1.0]);
    }

    #[test]
    fn scatter_sum_matches_hand_example() {
        let mut tape = Tape::new();
        let a = tape.constant(Matrix::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]));
        let s = tape.scatter_reduce(a, &[0, 0, 1], 2, AggKind::Sum).unwrap();
        assert_eq!(tape.value(s).data, vec![3.0, 3.0]);
    }

    #[test]
    fn singleton_groups_softmax_to_one() {
        let mut tape = Tape::new();
        let a = tape.constant(Matrix::from_rows(&[vec![0.3], vec![-2.0], vec![5.0]]));
        let s = tape.softmax_rows_grouped(a, &[0, 1, 2], 3).unwrap();
        for &v in &tape.value(s).data {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_logits_cross_entropy_is_ln_classes() {
        let mut tape = Tape::new();
        let logits = tape.constant(Matrix::from_rows(&[vec![0.5, 0.5, 0.5, 0.5]]));
        let target = tape.constant(Matrix::from_rows(&[vec![0.0, 0.0, 1.0, 0.0]]));
        let ce = tape.cross_entropy_rows(logits, target).unwrap();
        assert!((tape.value(ce).get(0, 0) - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn sum_loss_of_leaf_gives_all_ones_grad() {
        let mut tape = Tape::new();
        let p = tape.param(key("p"), Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let loss = tape.reduce(p, ReduceKind::Sum).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(p).unwrap().data, vec![1.0; 4]);
    }

    #[test]
    fn shared_leaf_used_twice_doubles_grad() {
        let mut tape = Tape::new();
        let p = tape.param(key("p"), Matrix::scalar(2.0));
        let s1 = tape.scale(p, 1.0);
        let s2 = tape.scale(p, 1.0);
        let sum = tape.add(s1, s2).unwrap();
        let loss = tape.reduce(sum, ReduceKind::Sum).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(p).unwrap().data, vec![2.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let p = tape.param(key("p"), Matrix::ones(2, 2));
        assert!(tape.backward(p).is_err());
    }

    #[test]
    fn scatter_then_reduce_conserves_mass() {
        let mut tape = Tape::new();
        let a = tape.constant(Matrix::from_rows(&[
            vec![1.0, -2.0],
            vec![0.5, 4.0],
            vec![3.0, 0.25],
        ]));
        let s = tape.scatter_reduce(a, &[1, 0, 1], 2, AggKind::Sum).unwrap();
        let r1 = tape.reduce(s, ReduceKind::Sum).unwrap();
        let r2 = tape.reduce(a, ReduceKind::Sum).unwrap();
        assert!((tape.value(r1).get(0, 0) - tape.value(r2).get(0, 0)).abs() < 1e-12);
    }
}
