//! Typed transformation expressions.
//!
//! A `TExpr` is the lowered, width-checked form of the transformation written
//! in a rule head. It is evaluated two ways that must agree: a naive per-row
//! interpreter (the reference semantics, used by [`super::ops`] and the
//! oracle) and a tape compiler that emits whole-matrix autodiff ops (the
//! production path in `exec`). The two paths share no arithmetic.

use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::{Matrix, ParamKey, ParameterStore, Tape, TensorId};
use crate::value::ValueTag;

use super::NodeSchema;

/// Static kind of a subexpression: a per-tuple row of some width, or a value
/// shared by all tuples (parameters, scalar aliases, constants).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TKind {
    Rowwise(usize),
    Shared(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActFn {
    Relu,
    Sigmoid,
    Gelu,
}

impl ActFn {
    pub fn name(&self) -> &'static str {
        match self {
            ActFn::Relu => "ReLU",
            ActFn::Sigmoid => "Sigmoid",
            ActFn::Gelu => "GELU",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinKind {
    Add,
    Sub,
    Mul,
}

impl BinKind {
    fn symbol(&self) -> &'static str {
        match self {
            BinKind::Add => "+",
            BinKind::Sub => "-",
            BinKind::Mul => "*",
        }
    }
}

#[derive(Debug, Clone)]
pub enum TOp {
    /// Columns `offset..offset+width` of the node's input embedding.
    Slice { offset: usize, width: usize },
    Const(f64),
    Param(ParamKey),
    /// Affine layer; the parameter matrix is (d_in+1) x d_out with the bias
    /// in the last row.
    Linear { key: ParamKey, d_in: usize, d_out: usize, arg: Box<TExpr> },
    Act(ActFn, Box<TExpr>),
    /// Elementwise binary op between equal-kind operands (broadcasts are made
    /// explicit by `Broadcast` during typing).
    Bin(BinKind, Box<TExpr>, Box<TExpr>),
    /// Rowwise(a) @ Shared(a,b) -> Rowwise(b), or Shared @ Shared.
    MatMul(Box<TExpr>, Box<TExpr>),
    /// Per-tuple dot product: Rowwise(w) @ Rowwise(w).T -> Rowwise(1).
    DotRows(Box<TExpr>, Box<TExpr>),
    /// Widen to Rowwise(width) from Rowwise(1), Shared(1,1), or Shared(1,width).
    Broadcast(Box<TExpr>, usize),
    Concat(Vec<TExpr>),
    /// Per-row cross entropy of logits against a target distribution.
    CrossEntropy(Box<TExpr>, Box<TExpr>),
    /// Multiply by a compile-time constant (also the lowering of division).
    Scale(Box<TExpr>, f64),
}

#[derive(Debug, Clone)]
pub struct TExpr {
    pub op: TOp,
    pub kind: TKind,
}

impl TExpr {
    pub fn new(op: TOp, kind: TKind) -> TExpr {
        TExpr { op, kind }
    }

    /// Per-tuple output width; the typing pass guarantees the root is Rowwise.
    pub fn width(&self) -> Result<usize> {
        match self.kind {
            TKind::Rowwise(w) => Ok(w),
            TKind::Shared(r, c) => Err(Error::lower(format!(
                "transformation result must be per-tuple, got a shared {}x{} value",
                r, c
            ))),
        }
    }

    /// Every parameter key referenced by this expression, in syntactic order.
    pub fn collect_keys(&self, out: &mut Vec<ParamKey>) {
        match &self.op {
            TOp::Slice { .. } | TOp::Const(_) => {}
            TOp::Param(k) => out.push(k.clone()),
            TOp::Linear { key, arg, .. } => {
                out.push(key.clone());
                arg.collect_keys(out);
            }
            TOp::Act(_, a) | TOp::Broadcast(a, _) | TOp::Scale(a, _) => a.collect_keys(out),
            TOp::Bin(_, a, b) | TOp::MatMul(a, b) | TOp::DotRows(a, b) | TOp::CrossEntropy(a, b) => {
                a.collect_keys(out);
                b.collect_keys(out);
            }
            TOp::Concat(xs) => {
                for x in xs {
                    x.collect_keys(out);
                }
            }
        }
    }
}

impl fmt::Display for TExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.op {
            TOp::Slice { offset, width } => write!(f, "z[{}..{}]", offset, offset + width),
            TOp::Const(c) => write!(f, "{}", c),
            TOp::Param(k) => write!(f, "{}", k),
            TOp::Linear { key, d_in, d_out, arg } => {
                write!(f, "Linear({},{})@{}({})", d_in, d_out, key, arg)
            }
            TOp::Act(a, x) => write!(f, "{}({})", a.name(), x),
            TOp::Bin(op, a, b) => write!(f, "({} {} {})", a, op.symbol(), b),
            TOp::MatMul(a, b) => write!(f, "({} @ {})", a, b),
            TOp::DotRows(a, b) => write!(f, "({} @ {}.T)", a, b),
            TOp::Broadcast(a, w) => write!(f, "bcast({},{})", a, w),
            TOp::Concat(xs) => {
                write!(f, "Concat(")?;
                for (i, x) in xs.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{}", x)?;
                }
                write!(f, ")")
            }
            TOp::CrossEntropy(a, b) => write!(f, "CrossEntropyLoss()({}, {})", a, b),
            TOp::Scale(a, c) => write!(f, "({} * {})", a, c),
        }
    }
}

/// What a Transform node applies: a per-tuple expression, or the grouped
/// softmax that normalizes scores within groups keyed by content attributes.
#[derive(Debug, Clone)]
pub enum TransformSpec {
    Expr(TExpr),
    GroupedSoftmax { group_attrs: Vec<String> },
}

impl TransformSpec {
    pub fn output_dim(&self, child: &NodeSchema) -> Result<usize> {
        match self {
            TransformSpec::Expr(e) => e.width(),
            TransformSpec::GroupedSoftmax { group_attrs } => {
                for a in group_attrs {
                    if child.attr_index(a).is_none() {
                        return Err(Error::lower(format!(
                            "grouped softmax key {} is not an attribute of its input",
                            a
                        )));
                    }
                }
                Ok(child.dim)
            }
        }
    }
}

impl fmt::Display for TransformSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TransformSpec::Expr(e) => write!(f, "{}", e),
            TransformSpec::GroupedSoftmax { group_attrs } => {
                write!(f, "Softmax groups=({})", group_attrs.join(","))
            }
        }
    }
}

/// One encoding bracket: a content attribute read into the embedding, either
/// tensorized directly (numeric / boolean) or one-hot against a vocabulary.
#[derive(Debug, Clone)]
pub struct EncodeItem {
    pub attr: String,
    pub encoder: EncoderKind,
}

#[derive(Debug, Clone)]
pub enum EncoderKind {
    Direct,
    OneHot(Vec<String>),
}

impl EncodeItem {
    pub fn width(&self, tag: ValueTag) -> Result<usize> {
        match &self.encoder {
            EncoderKind::Direct => match tag {
                ValueTag::Int | ValueTag::Float | ValueTag::Bool | ValueTag::Unknown => Ok(1),
                ValueTag::Str => Err(Error::lower(format!(
                    "attribute {} is a rich-typed column without a supported encoder; \
                     declare a vocabulary to one-hot encode it",
                    self.attr
                ))),
            },
            EncoderKind::OneHot(vocab) => Ok(vocab.len()),
        }
    }
}

impl fmt::Display for EncodeItem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.encoder {
            EncoderKind::Direct => write!(f, "[{}]", self.attr),
            EncoderKind::OneHot(v) => write!(f, "[{}|vocab:{}]", self.attr, v.len()),
        }
    }
}

// ---------------------------------------------------------------------------
// Naive per-row interpreter (reference semantics).
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
enum RVal {
    Row(Vec<f64>),
    Shared(Vec<Vec<f64>>),
}

/// Evaluate the expression independently on every row of `emb`.
pub fn eval_rows(expr: &TExpr, emb: &Matrix, store: &ParameterStore) -> Result<Matrix> {
    let width = expr.width()?;
    let mut out = Matrix::zeros(emb.rows, width);
    for i in 0..emb.rows {
        match eval_row(expr, emb.row(i), store)? {
            RVal::Row(v) => {
                debug_assert_eq!(v.len(), width);
                out.data[i * width..(i + 1) * width].copy_from_slice(&v);
            }
            RVal::Shared(_) => {
                return Err(Error::lower("transformation result must be per-tuple"))
            }
        }
    }
    Ok(out)
}

fn param_rows(store: &ParameterStore, key: &ParamKey) -> Result<Vec<Vec<f64>>> {
    let m = store
        .get(key)
        .ok_or_else(|| Error::lower(format!("unresolved layer parameter {}", key)))?;
    Ok((0..m.rows).map(|r| m.row(r).to_vec()).collect())
}

fn eval_row(expr: &TExpr, row: &[f64], store: &ParameterStore) -> Result<RVal> {
    match &expr.op {
        TOp::Slice { offset, width } => Ok(RVal::Row(row[*offset..offset + width].to_vec())),
        TOp::Const(c) => Ok(RVal::Shared(vec![vec![*c]])),
        TOp::Param(key) => Ok(RVal::Shared(param_rows(store, key)?)),
        TOp::Linear { key, d_in, d_out, arg } => {
            let w = param_rows(store, key)?;
            let x = expect_row(eval_row(arg, row, store)?)?;
            let mut y = vec![0.0; *d_out];
            for j in 0..*d_out {
                let mut acc = w[*d_in][j]; // bias row
                for i in 0..*d_in {
                    acc += x[i] * w[i][j];
                }
                y[j] = acc;
            }
            Ok(RVal::Row(y))
        }
        TOp::Act(f, a) => {
            let apply = |x: f64| match f {
                ActFn::Relu => x.max(0.0),
                ActFn::Sigmoid => 1.0 / (1.0 + (-x).exp()),
                ActFn::Gelu => {
                    let c = (2.0 / std::f64::consts::PI).sqrt();
                    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
                }
            };
            Ok(map_rval(eval_row(a, row, store)?, apply))
        }
        TOp::Bin(op, a, b) => {
            let va = eval_row(a, row, store)?;
            let vb = eval_row(b, row, store)?;
            let f = |x: f64, y: f64| match op {
                BinKind::Add => x + y,
                BinKind::Sub => x - y,
                BinKind::Mul => x * y,
            };
            zip_rval(va, vb, f)
        }
        TOp::MatMul(a, b) => {
            let va = eval_row(a, row, store)?;
            let vb = eval_row(b, row, store)?;
            match (va, vb) {
                (RVal::Row(x), RVal::Shared(m)) => {
                    let cols = m.first().map_or(0, |r| r.len());
                    let mut y = vec![0.0; cols];
                    for (i, xi) in x.iter().enumerate() {
                        for j in 0..cols {
                            y[j] += xi * m[i][j];
                        }
                    }
                    Ok(RVal::Row(y))
                }
                (RVal::Shared(a), RVal::Shared(b)) => {
                    let n = a.len();
                    let k = b.len();
                    let c = b.first().map_or(0, |r| r.len());
                    let mut out = vec![vec![0.0; c]; n];
                    for i in 0..n {
                        for t in 0..k {
                            for j in 0..c {
                                out[i][j] += a[i][t] * b[t][j];
                            }
                        }
                    }
                    Ok(RVal::Shared(out))
                }
                _ => Err(Error::lower("matrix product operands have unsupported kinds")),
            }
        }
        TOp::DotRows(a, b) => {
            let x = expect_row(eval_row(a, row, store)?)?;
            let y = expect_row(eval_row(b, row, store)?)?;
            Ok(RVal::Row(vec![x.iter().zip(&y).map(|(p, q)| p * q).sum()]))
        }
        TOp::Broadcast(a, w) => {
            let v = eval_row(a, row, store)?;
            match v {
                RVal::Row(x) if x.len() == 1 => Ok(RVal::Row(vec![x[0]; *w])),
                RVal::Row(x) if x.len() == *w => Ok(RVal::Row(x)),
                RVal::Shared(m) if m.len() == 1 && m[0].len() == 1 => {
                    Ok(RVal::Row(vec![m[0][0]; *w]))
                }
                RVal::Shared(m) if m.len() == 1 && m[0].len() == *w => Ok(RVal::Row(m[0].clone())),
                _ => Err(Error::lower("invalid broadcast")),
            }
        }
        TOp::Concat(xs) => {
            let mut out = Vec::new();
            for x in xs {
                out.extend(expect_row(eval_row(x, row, store)?)?);
            }
            Ok(RVal::Row(out))
        }
        TOp::CrossEntropy(a, b) => {
            let logits = expect_row(eval_row(a, row, store)?)?;
            let target = expect_row(eval_row(b, row, store)?)?;
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + logits.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            let ce = target.iter().zip(&logits).map(|(t, l)| t * (lse - l)).sum();
            Ok(RVal::Row(vec![ce]))
        }
        TOp::Scale(a, c) => Ok(map_rval(eval_row(a, row, store)?, |x| x * c)),
    }
}

fn expect_row(v: RVal) -> Result<Vec<f64>> {
    match v {
        RVal::Row(x) => Ok(x),
        RVal::Shared(m) if m.len() == 1 => Ok(m.into_iter().next().unwrap()),
        RVal::Shared(_) => Err(Error::lower("expected a per-tuple value")),
    }
}

fn map_rval(v: RVal, f: impl Fn(f64) -> f64) -> RVal {
    match v {
        RVal::Row(x) => RVal::Row(x.into_iter().map(f).collect()),
        RVal::Shared(m) => {
            RVal::Shared(m.into_iter().map(|r| r.into_iter().map(&f).collect()).collect())
        }
    }
}

fn zip_rval(a: RVal, b: RVal, f: impl Fn(f64, f64) -> f64) -> Result<RVal> {
    match (a, b) {
        (RVal::Row(x), RVal::Row(y)) if x.len() == y.len() => {
            Ok(RVal::Row(x.iter().zip(&y).map(|(p, q)| f(*p, *q)).collect()))
        }
        (RVal::Shared(x), RVal::Shared(y)) if x.len() == y.len() => {
            let out = x
                .iter()
                .zip(&y)
                .map(|(rx, ry)| rx.iter().zip(ry).map(|(p, q)| f(*p, *q)).collect())
                .collect();
            Ok(RVal::Shared(out))
        }
        _ => Err(Error::lower("elementwise operands have mismatched kinds")),
    }
}

// ---------------------------------------------------------------------------
// Tape compiler (production path).
// ---------------------------------------------------------------------------

/// Emit tape ops computing the expression over all rows at once. `input` is
/// the node's full input embedding (n x D); slices become selection products
/// and broadcasts become products with constant ones matrices, so the tape
/// itself never broadcasts.
pub fn compile_tape(
    expr: &TExpr,
    tape: &mut Tape,
    input: TensorId,
    store: &ParameterStore,
) -> Result<TensorId> {
    let (n_rows, in_width) = tape.shape(input);
    compile(expr, tape, input, in_width, n_rows, store)
}

fn compile(
    expr: &TExpr,
    tape: &mut Tape,
    input: TensorId,
    in_width: usize,
    n_rows: usize,
    store: &ParameterStore,
) -> Result<TensorId> {
    match &expr.op {
        TOp::Slice { offset, width } => {
            if *offset == 0 && *width == in_width {
                return Ok(input);
            }
            let mut sel = Matrix::zeros(in_width, *width);
            for j in 0..*width {
                sel.set(offset + j, j, 1.0);
            }
            let s = tape.constant(sel);
            tape.matmul(input, s)
        }
        TOp::Const(c) => Ok(tape.constant(Matrix::scalar(*c))),
        TOp::Param(key) => {
            let m = store
                .get(key)
                .ok_or_else(|| Error::lower(format!("unresolved layer parameter {}", key)))?
                .clone();
            Ok(tape.param(key.clone(), m))
        }
        TOp::Linear { key, d_in: _, d_out: _, arg } => {
            let x = compile(arg, tape, input, in_width, n_rows, store)?;
            let rows = tape.shape(x).0;
            let ones = tape.constant(Matrix::ones(rows, 1));
            let aug = tape.concat_cols(&[x, ones])?;
            let m = store
                .get(key)
                .ok_or_else(|| Error::lower(format!("unresolved layer parameter {}", key)))?
                .clone();
            let w = tape.param(key.clone(), m);
            tape.matmul(aug, w)
        }
        TOp::Act(f, a) => {
            let x = compile(a, tape, input, in_width, n_rows, store)?;
            Ok(match f {
                ActFn::Relu => tape.relu(x),
                ActFn::Sigmoid => tape.sigmoid(x),
                ActFn::Gelu => tape.gelu(x),
            })
        }
        TOp::Bin(op, a, b) => {
            let x = compile(a, tape, input, in_width, n_rows, store)?;
            let y = compile(b, tape, input, in_width, n_rows, store)?;
            match op {
                BinKind::Add => tape.add(x, y),
                BinKind::Sub => {
                    let ny = tape.scale(y, -1.0);
                    tape.add(x, ny)
                }
                BinKind::Mul => tape.mul_elementwise(x, y),
            }
        }
        TOp::MatMul(a, b) => {
            let x = compile(a, tape, input, in_width, n_rows, store)?;
            let y = compile(b, tape, input, in_width, n_rows, store)?;
            tape.matmul(x, y)
        }
        TOp::DotRows(a, b) => {
            let x = compile(a, tape, input, in_width, n_rows, store)?;
            let y = compile(b, tape, input, in_width, n_rows, store)?;
            let prod = tape.mul_elementwise(x, y)?;
            let w = tape.shape(prod).1;
            let ones = tape.constant(Matrix::ones(w, 1));
            tape.matmul(prod, ones)
        }
        TOp::Broadcast(a, w) => {
            let x = compile(a, tape, input, in_width, n_rows, store)?;
            let (xr, xc) = tape.shape(x);
            let rowwise = match (&a.kind, xr) {
                (TKind::Rowwise(_), _) => x,
                (TKind::Shared(_, _), _) => {
                    let ones = tape.constant(Matrix::ones(n_rows, 1));
                    tape.matmul(ones, x)?
                }
            };
            let (_, cur_w) = tape.shape(rowwise);
            if cur_w == *w {
                Ok(rowwise)
            } else if cur_w == 1 {
                let ones = tape.constant(Matrix::ones(1, *w));
                tape.matmul(rowwise, ones)
            } else {
                Err(Error::lower(format!("cannot broadcast width {} to {} ({}x{})", cur_w, w, xr, xc)))
            }
        }
        TOp::Concat(xs) => {
            // A concat of consecutive slices covering the whole input is the
            // input itself.
            if concat_is_identity(xs, in_width) {
                return Ok(input);
            }
            let mut parts = Vec::with_capacity(xs.len());
            for x in xs {
                parts.push(compile(x, tape, input, in_width, n_rows, store)?);
            }
            tape.concat_cols(&parts)
        }
        TOp::CrossEntropy(a, b) => {
            let x = compile(a, tape, input, in_width, n_rows, store)?;
            let y = compile(b, tape, input, in_width, n_rows, store)?;
            tape.cross_entropy_rows(x, y)
        }
        TOp::Scale(a, c) => {
            let x = compile(a, tape, input, in_width, n_rows, store)?;
            Ok(tape.scale(x, *c))
        }
    }
}

fn concat_is_identity(xs: &[TExpr], in_width: usize) -> bool {
    let mut off = 0;
    for x in xs {
        match &x.op {
            TOp::Slice { offset, width } if *offset == off => off += width,
            _ => return false,
        }
    }
    off == in_width
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rowwise(op: TOp, w: usize) -> TExpr {
        TExpr::new(op, TKind::Rowwise(w))
    }

    fn slice(offset: usize, width: usize) -> TExpr {
        rowwise(TOp::Slice { offset, width }, width)
    }

    #[test]
    fn linear_matches_hand_product() {
        // Linear(2,1), weights [[1],[1]], bias 0, on [[1,2],[3,4]] -> [[3],[7]].
        let mut store = ParameterStore::new();
        let key = ParamKey::plain("L");
        store.register(key.clone(), || Matrix::from_rows(&[vec![1.0], vec![1.0], vec![0.0]]));
        let expr = rowwise(
            TOp::Linear { key, d_in: 2, d_out: 1, arg: Box::new(slice(0, 2)) },
            1,
        );
        let emb = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let dense = eval_rows(&expr, &emb, &store).unwrap();
        assert_eq!(dense.data, vec![3.0, 7.0]);

        let mut tape = Tape::new();
        let input = tape.constant(emb);
        let out = compile_tape(&expr, &mut tape, input, &store).unwrap();
        assert_eq!(tape.value(out).data, vec![3.0, 7.0]);
    }

    #[test]
    fn identity_expression_is_identity() {
        let store = ParameterStore::new();
        let expr = slice(0, 3);
        let emb = Matrix::from_rows(&[vec![1.0, -2.0, 0.5]]);
        let dense = eval_rows(&expr, &emb, &store).unwrap();
        assert_eq!(dense.data, emb.data);
        let mut tape = Tape::new();
        let input = tape.constant(emb.clone());
        let out = compile_tape(&expr, &mut tape, input, &store).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn dot_rows_and_scalar_broadcast_paths_agree() {
        // (z[0..2] @ z[2..4].T) * mu, with mu a 1x1 parameter.
        let mut store = ParameterStore::new();
        let mu = ParamKey::plain("mu");
        store.register(mu.clone(), || Matrix::scalar(2.5));
        let dot = rowwise(TOp::DotRows(Box::new(slice(0, 2)), Box::new(slice(2, 4 - 2))), 1);
        let mu_row = rowwise(
            TOp::Broadcast(Box::new(TExpr::new(TOp::Param(mu), TKind::Shared(1, 1))), 1),
            1,
        );
        let expr = rowwise(TOp::Bin(BinKind::Mul, Box::new(dot), Box::new(mu_row)), 1);
        let emb = Matrix::from_rows(&[vec![1.0, 2.0, 3.0, 4.0], vec![0.5, 0.0, -1.0, 6.0]]);
        let dense = eval_rows(&expr, &emb, &store).unwrap();
        assert_eq!(dense.data, vec![(3.0 + 8.0) * 2.5, -0.5 * 2.5]);

        let mut tape = Tape::new();
        let input = tape.constant(emb);
        let out = compile_tape(&expr, &mut tape, input, &store).unwrap();
        for (a, b) in dense.data.iter().zip(&tape.value(out).data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_of_full_slices_collapses_on_tape() {
        let store = ParameterStore::new();
        let expr = rowwise(TOp::Concat(vec![slice(0, 2), slice(2, 1)]), 3);
        let mut tape = Tape::new();
        let input = tape.constant(Matrix::from_rows(&[vec![1.0, 2.0, 3.0]]));
        let out = compile_tape(&expr, &mut tape, input, &store).unwrap();
        assert_eq!(out, input);
    }
}
