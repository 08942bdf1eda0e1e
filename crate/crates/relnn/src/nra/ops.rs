//! Eager reference implementations of the NRA operators.
//!
//! These are the naive semantics: nested-loop joins, explicit multiset
//! aggregation, and per-row transformation. The oracle evaluator walks plans
//! with these functions; the optimized gather/scatter path in `exec` must
//! agree with them.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::relmodel::{EmbSource, EmbeddedRelation};
use crate::tensor::{Matrix, ParameterStore};
use crate::value::{ContentValue, Tuple, ValueTag};

use super::texpr::{self, EncodeItem, EncoderKind, TransformSpec};
use super::{AggKind, CmpOp, Predicate, ScalarTerm};

fn dense(rel: &EmbeddedRelation) -> Result<&Matrix> {
    match &rel.emb {
        EmbSource::Dense(m) => Ok(m),
        EmbSource::Learnable { key, .. } => Err(Error::lower(format!(
            "operator applied to unresolved learnable embedding {}",
            key
        ))),
    }
}

fn build(attrs: Vec<String>, rows: Vec<Tuple>, emb_rows: Vec<Vec<f64>>, dim: usize) -> Result<EmbeddedRelation> {
    let emb = if rows.is_empty() { Matrix::zeros(0, dim) } else { Matrix::from_rows(&emb_rows) };
    EmbeddedRelation::new(attrs, rows, emb).map_err(|e| Error::lower(e.msg))
}

/// Natural join: tuples pair on all shared attributes, output embeddings
/// concatenate the contributing embeddings. Disjoint attributes give the
/// cross product.
pub fn join(left: &EmbeddedRelation, right: &EmbeddedRelation) -> Result<EmbeddedRelation> {
    let shared: Vec<(usize, usize)> = left
        .attrs
        .iter()
        .enumerate()
        .filter_map(|(li, a)| right.attrs.iter().position(|b| b == a).map(|ri| (li, ri)))
        .collect();
    for &(li, ri) in &shared {
        if !left.tags[li].compatible(right.tags[ri]) {
            return Err(Error::lower(format!(
                "join attribute {} has incompatible value tags ({} vs {})",
                left.attrs[li],
                left.tags[li].name(),
                right.tags[ri].name()
            )));
        }
    }
    let right_extra: Vec<usize> =
        (0..right.attrs.len()).filter(|ri| !shared.iter().any(|&(_, r)| r == *ri)).collect();
    let mut attrs = left.attrs.clone();
    attrs.extend(right_extra.iter().map(|&ri| right.attrs[ri].clone()));

    let le = dense(left)?;
    let re = dense(right)?;
    let dim = le.cols + re.cols;
    let mut rows = Vec::new();
    let mut emb = Vec::new();
    for (i, lt) in left.rows.iter().enumerate() {
        for (j, rt) in right.rows.iter().enumerate() {
            if shared.iter().all(|&(li, ri)| lt[li] == rt[ri]) {
                let mut tuple = lt.clone();
                tuple.extend(right_extra.iter().map(|&ri| rt[ri].clone()));
                rows.push(tuple);
                let mut e = le.row(i).to_vec();
                e.extend_from_slice(re.row(j));
                emb.push(e);
            }
        }
    }
    build(attrs, rows, emb, dim)
}

/// k-ary set union fused with projection. Each output tuple's embedding is
/// the aggregate over the multiset of ALL input rows projecting to it, across
/// all inputs, applied exactly once.
pub fn projected_union(
    inputs: &[&EmbeddedRelation],
    attrs: &[String],
    agg: AggKind,
) -> Result<EmbeddedRelation> {
    if inputs.is_empty() {
        return Err(Error::lower("projected union needs at least one input"));
    }
    let dim = inputs[0].dim();
    let mut groups: BTreeMap<Tuple, Vec<Vec<f64>>> = BTreeMap::new();
    for rel in inputs {
        if rel.dim() != dim {
            return Err(Error::lower(format!(
                "projected union embedding width mismatch: {} vs {}",
                dim,
                rel.dim()
            )));
        }
        let cols: Vec<usize> = attrs
            .iter()
            .map(|a| {
                rel.attrs.iter().position(|b| b == a).ok_or_else(|| {
                    Error::lower(format!("projected union attribute {} missing from an input", a))
                })
            })
            .collect::<Result<_>>()?;
        let m = dense(rel)?;
        for (i, row) in rel.rows.iter().enumerate() {
            let key: Tuple = cols.iter().map(|&c| row[c].clone()).collect();
            groups.entry(key).or_default().push(m.row(i).to_vec());
        }
    }
    let mut rows = Vec::with_capacity(groups.len());
    let mut emb = Vec::with_capacity(groups.len());
    for (tuple, members) in groups {
        rows.push(tuple);
        emb.push(aggregate(&members, agg, dim));
    }
    build(attrs.to_vec(), rows, emb, dim)
}

fn aggregate(members: &[Vec<f64>], agg: AggKind, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    match agg {
        AggKind::Sum | AggKind::Mean => {
            for m in members {
                for (o, v) in out.iter_mut().zip(m) {
                    *o += v;
                }
            }
            if agg == AggKind::Mean && !members.is_empty() {
                for o in out.iter_mut() {
                    *o /= members.len() as f64;
                }
            }
        }
        AggKind::Max => {
            for (i, m) in members.iter().enumerate() {
                for (j, v) in m.iter().enumerate() {
                    if i == 0 || *v > out[j] {
                        out[j] = *v;
                    }
                }
            }
        }
    }
    out
}

/// Apply a transformation per tuple; content is unchanged.
pub fn transform(
    rel: &EmbeddedRelation,
    spec: &TransformSpec,
    store: &ParameterStore,
) -> Result<EmbeddedRelation> {
    let m = dense(rel)?;
    let out = match spec {
        TransformSpec::Expr(expr) => texpr::eval_rows(expr, m, store)?,
        TransformSpec::GroupedSoftmax { group_attrs } => {
            let cols: Vec<usize> = group_attrs
                .iter()
                .map(|a| {
                    rel.attrs.iter().position(|b| b == a).ok_or_else(|| {
                        Error::lower(format!("grouped softmax key {} missing", a))
                    })
                })
                .collect::<Result<_>>()?;
            grouped_softmax(rel, m, &cols)
        }
    };
    Ok(EmbeddedRelation {
        attrs: rel.attrs.clone(),
        tags: rel.tags.clone(),
        rows: rel.rows.clone(),
        emb: EmbSource::Dense(out),
    })
}

fn grouped_softmax(rel: &EmbeddedRelation, m: &Matrix, key_cols: &[usize]) -> Matrix {
    let mut groups: BTreeMap<Tuple, Vec<usize>> = BTreeMap::new();
    for (i, row) in rel.rows.iter().enumerate() {
        let key: Tuple = key_cols.iter().map(|&c| row[c].clone()).collect();
        groups.entry(key).or_default().push(i);
    }
    let mut out = Matrix::zeros(m.rows, m.cols);
    for members in groups.values() {
        for c in 0..m.cols {
            let mx = members.iter().map(|&i| m.get(i, c)).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for &i in members {
                let e = (m.get(i, c) - mx).exp();
                out.set(i, c, e);
                sum += e;
            }
            for &i in members {
                out.set(i, c, out.get(i, c) / sum);
            }
        }
    }
    out
}

/// Keep rows satisfying every predicate; surviving embeddings are preserved
/// identically.
pub fn select(rel: &EmbeddedRelation, preds: &[Predicate]) -> Result<EmbeddedRelation> {
    let m = dense(rel)?;
    let mut rows = Vec::new();
    let mut emb = Vec::new();
    for (i, row) in rel.rows.iter().enumerate() {
        let mut keep = true;
        for p in preds {
            if !eval_predicate(p, &rel.attrs, row)? {
                keep = false;
                break;
            }
        }
        if keep {
            rows.push(row.clone());
            emb.push(m.row(i).to_vec());
        }
    }
    build(rel.attrs.clone(), rows, emb, m.cols)
}

/// Evaluate one predicate against one tuple.
pub fn eval_predicate(p: &Predicate, attrs: &[String], row: &Tuple) -> Result<bool> {
    let lv = eval_term(&p.lhs, attrs, row)?;
    let rv = eval_term(&p.rhs, attrs, row)?;
    match (&lv, &rv) {
        // Same-tag non-numeric values admit only equality tests.
        (TermVal::Value(a), TermVal::Value(b)) if a.as_f64().is_none() || b.as_f64().is_none() => {
            if a.tag() != b.tag() {
                return Err(Error::lower(format!(
                    "type mismatch in comparison: {} vs {}",
                    a.tag().name(),
                    b.tag().name()
                )));
            }
            match p.cmp {
                CmpOp::Eq => Ok(a == b),
                CmpOp::Ne => Ok(a != b),
                _ => Err(Error::lower(format!(
                    "ordering comparison on {} values",
                    a.tag().name()
                ))),
            }
        }
        _ => {
            let a = lv.numeric()?;
            let b = rv.numeric()?;
            Ok(match p.cmp {
                CmpOp::Eq => a == b,
                CmpOp::Ne => a != b,
                CmpOp::Lt => a < b,
                CmpOp::Le => a <= b,
                CmpOp::Gt => a > b,
                CmpOp::Ge => a >= b,
            })
        }
    }
}

enum TermVal {
    Value(ContentValue),
    Num(f64),
}

impl TermVal {
    fn numeric(&self) -> Result<f64> {
        match self {
            TermVal::Num(x) => Ok(*x),
            TermVal::Value(v) => v
                .as_f64()
                .ok_or_else(|| Error::lower(format!("type mismatch in comparison: {} is not numeric", v))),
        }
    }
}

fn eval_term(t: &ScalarTerm, attrs: &[String], row: &Tuple) -> Result<TermVal> {
    match t {
        ScalarTerm::Attr(a) => {
            let i = attrs
                .iter()
                .position(|x| x == a)
                .ok_or_else(|| Error::lower(format!("filter references unknown attribute {}", a)))?;
            Ok(TermVal::Value(row[i].clone()))
        }
        ScalarTerm::Const(c) => Ok(TermVal::Value(c.clone())),
        ScalarTerm::Add(a, b) => arith(t, a, b, attrs, row),
        ScalarTerm::Sub(a, b) => arith(t, a, b, attrs, row),
        ScalarTerm::Mul(a, b) => arith(t, a, b, attrs, row),
        ScalarTerm::Div(a, b) => arith(t, a, b, attrs, row),
        ScalarTerm::Neg(a) => Ok(TermVal::Num(-eval_term(a, attrs, row)?.numeric()?)),
    }
}

fn arith(
    t: &ScalarTerm,
    a: &ScalarTerm,
    b: &ScalarTerm,
    attrs: &[String],
    row: &Tuple,
) -> Result<TermVal> {
    let x = eval_term(a, attrs, row)?.numeric()?;
    let y = eval_term(b, attrs, row)?.numeric()?;
    Ok(TermVal::Num(match t {
        ScalarTerm::Add(..) => x + y,
        ScalarTerm::Sub(..) => x - y,
        ScalarTerm::Mul(..) => x * y,
        ScalarTerm::Div(..) => x / y,
        _ => unreachable!(),
    }))
}

/// Classical set difference on content; left embeddings are kept for the
/// surviving tuples (membership is decided on content only).
pub fn difference(left: &EmbeddedRelation, right: &EmbeddedRelation) -> Result<EmbeddedRelation> {
    if left.attrs != right.attrs {
        return Err(Error::lower(format!(
            "difference schema mismatch: ({}) vs ({})",
            left.attrs.join(","),
            right.attrs.join(",")
        )));
    }
    let m = dense(left)?;
    let right_set: std::collections::BTreeSet<&Tuple> = right.rows.iter().collect();
    let mut rows = Vec::new();
    let mut emb = Vec::new();
    for (i, row) in left.rows.iter().enumerate() {
        if !right_set.contains(row) {
            rows.push(row.clone());
            emb.push(m.row(i).to_vec());
        }
    }
    build(left.attrs.clone(), rows, emb, m.cols)
}

/// Rename attributes; the map must stay bijective on the schema.
pub fn rename(rel: &EmbeddedRelation, map: &[(String, String)]) -> Result<EmbeddedRelation> {
    let mut attrs = rel.attrs.clone();
    for (from, to) in map {
        let i = attrs
            .iter()
            .position(|a| a == from)
            .ok_or_else(|| Error::lower(format!("rename of unknown attribute {}", from)))?;
        attrs[i] = to.clone();
    }
    let mut seen = std::collections::HashSet::new();
    for a in &attrs {
        if !seen.insert(a.clone()) {
            return Err(Error::lower(format!("rename produces duplicate attribute {}", a)));
        }
    }
    Ok(EmbeddedRelation {
        attrs,
        tags: rel.tags.clone(),
        rows: rel.rows.clone(),
        emb: rel.emb.clone(),
    })
}

/// Read content attributes into the embedding: encoded vectors concatenate
/// after the existing embedding, as constants (no gradient to content).
pub fn encode(rel: &EmbeddedRelation, items: &[EncodeItem]) -> Result<EmbeddedRelation> {
    let m = dense(rel)?;
    let mut widths = Vec::with_capacity(items.len());
    let mut cols = Vec::with_capacity(items.len());
    for item in items {
        let i = rel
            .attrs
            .iter()
            .position(|a| a == &item.attr)
            .ok_or_else(|| Error::lower(format!("encode of unknown attribute {}", item.attr)))?;
        widths.push(item.width(rel.tags[i])?);
        cols.push(i);
    }
    let extra: usize = widths.iter().sum();
    let mut out = Matrix::zeros(m.rows, m.cols + extra);
    for r in 0..m.rows {
        out.data[r * out.cols..r * out.cols + m.cols].copy_from_slice(m.row(r));
        let mut off = m.cols;
        for (item, (&w, &c)) in items.iter().zip(widths.iter().zip(&cols)) {
            encode_value(item, &rel.rows[r][c], &mut out.data[r * out.cols + off..r * out.cols + off + w])?;
            off += w;
        }
    }
    Ok(EmbeddedRelation {
        attrs: rel.attrs.clone(),
        tags: rel.tags.clone(),
        rows: rel.rows.clone(),
        emb: EmbSource::Dense(out),
    })
}

pub fn encode_value(item: &EncodeItem, value: &ContentValue, out: &mut [f64]) -> Result<()> {
    match &item.encoder {
        EncoderKind::Direct => {
            out[0] = match value {
                ContentValue::Int(i) => *i as f64,
                ContentValue::Float(f) => *f,
                ContentValue::Bool(b) => {
                    if *b {
                        1.0
                    } else {
                        0.0
                    }
                }
                ContentValue::Str(_) => {
                    return Err(Error::lower(format!(
                        "attribute {} is a rich-typed column without a supported encoder",
                        item.attr
                    )))
                }
            };
            Ok(())
        }
        EncoderKind::OneHot(vocab) => {
            let s = match value {
                ContentValue::Str(s) => s.clone(),
                other => other.to_string(),
            };
            match vocab.iter().position(|v| v == &s) {
                Some(i) => {
                    out[i] = 1.0;
                    Ok(())
                }
                None => Err(Error::pred(format!(
                    "value {} of attribute {} is not in its declared vocabulary",
                    s, item.attr
                ))),
            }
        }
    }
}

/// Write embedding columns back as float content attributes; the embedding is
/// preserved and the new content carries no gradient.
pub fn decode(
    rel: &EmbeddedRelation,
    start: usize,
    len: usize,
    names: &[String],
) -> Result<EmbeddedRelation> {
    let m = dense(rel)?;
    if len == 0 || start + len > m.cols {
        return Err(Error::lower(format!(
            "decode slice {}..{} out of range for width {}",
            start,
            start + len,
            m.cols
        )));
    }
    let mut attrs = rel.attrs.clone();
    attrs.extend(names.iter().cloned());
    let mut tags = rel.tags.clone();
    tags.extend(std::iter::repeat(ValueTag::Float).take(len));
    let mut rows = Vec::with_capacity(rel.rows.len());
    for (i, row) in rel.rows.iter().enumerate() {
        let mut t = row.clone();
        for j in 0..len {
            t.push(ContentValue::Float(m.get(i, start + j)));
        }
        rows.push(t);
    }
    // Existing rows are distinct and sorted on the original prefix, so
    // appending columns keeps the canonical order.
    Ok(EmbeddedRelation { attrs, tags, rows, emb: rel.emb.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(attrs: &[&str], rows: Vec<Vec<ContentValue>>, emb: Vec<Vec<f64>>) -> EmbeddedRelation {
        let dim = emb.first().map_or(0, |r| r.len());
        let m = if rows.is_empty() { Matrix::zeros(0, dim) } else { Matrix::from_rows(&emb) };
        EmbeddedRelation::new(attrs.iter().map(|s| s.to_string()).collect(), rows, m).unwrap()
    }

    fn s(x: &str) -> ContentValue {
        ContentValue::Str(x.into())
    }

    #[test]
    fn join_matches_worked_example() {
        // R1(x,y) = {(a,b):[1,2], (a,c):[3,4]}, R2(y,w) = {(b,d):[5], (b,e):[6], (c,d):[7]}.
        let r1 = rel(
            &["x", "y"],
            vec![vec![s("a"), s("b")], vec![s("a"), s("c")]],
            vec![vec![1.0, 2.0], vec![3.0, 4.0]],
        );
        let r2 = rel(
            &["y", "w"],
            vec![vec![s("b"), s("d")], vec![s("b"), s("e")], vec![s("c"), s("d")]],
            vec![vec![5.0], vec![6.0], vec![7.0]],
        );
        let j = join(&r1, &r2).unwrap();
        assert_eq!(j.attrs, vec!["x", "y", "w"]);
        assert_eq!(j.len(), 3);
        assert_eq!(j.dim(), 3);
        let m = match &j.emb {
            EmbSource::Dense(m) => m,
            _ => unreachable!(),
        };
        assert_eq!(j.rows[0], vec![s("a"), s("b"), s("d")]);
        assert_eq!(m.row(0), &[1.0, 2.0, 5.0]);
        assert_eq!(j.rows[1], vec![s("a"), s("b"), s("e")]);
        assert_eq!(m.row(1), &[1.0, 2.0, 6.0]);
        assert_eq!(j.rows[2], vec![s("a"), s("c"), s("d")]);
        assert_eq!(m.row(2), &[3.0, 4.0, 7.0]);
    }

    #[test]
    fn join_with_empty_is_empty_with_concatenated_schema() {
        let r1 = rel(&["x"], vec![vec![s("a")]], vec![vec![1.0, 2.0]]);
        let r2 = EmbeddedRelation::empty(vec!["x".into(), "y".into()], 3);
        let j = join(&r1, &r2).unwrap();
        assert_eq!(j.attrs, vec!["x", "y"]);
        assert_eq!(j.len(), 0);
        assert_eq!(j.dim(), 5);
    }

    #[test]
    fn projection_sums_collapsing_rows() {
        // {(a,b):[1], (a,d):[2], (b,f):[3]} projected to x with sum -> {a:[3], b:[3]}.
        let r = rel(
            &["x", "y"],
            vec![vec![s("a"), s("b")], vec![s("a"), s("d")], vec![s("b"), s("f")]],
            vec![vec![1.0], vec![2.0], vec![3.0]],
        );
        let u = projected_union(&[&r], &["x".to_string()], AggKind::Sum).unwrap();
        assert_eq!(u.len(), 2);
        let m = match &u.emb {
            EmbSource::Dense(m) => m,
            _ => unreachable!(),
        };
        assert_eq!(m.row(0), &[3.0]);
        assert_eq!(m.row(1), &[3.0]);
    }

    #[test]
    fn union_of_disjoint_inputs_preserves_embeddings() {
        let a = rel(&["x"], vec![vec![ContentValue::Int(1)]], vec![vec![5.0]]);
        let b = rel(&["x"], vec![vec![ContentValue::Int(2)]], vec![vec![7.0]]);
        for agg in [AggKind::Sum, AggKind::Mean, AggKind::Max] {
            let u = projected_union(&[&a, &b], &["x".to_string()], agg).unwrap();
            let m = match &u.emb {
                EmbSource::Dense(m) => m,
                _ => unreachable!(),
            };
            assert_eq!(m.data, vec![5.0, 7.0]);
        }
    }

    #[test]
    fn mean_over_cross_input_duplicates_is_multiset_mean() {
        // The same tuple appears in both inputs with different multiplicity;
        // the one-shot multiset mean differs from a mean of per-input means.
        let a = rel(
            &["x", "y"],
            vec![vec![ContentValue::Int(1), ContentValue::Int(10)],
                 vec![ContentValue::Int(1), ContentValue::Int(11)]],
            vec![vec![2.0], vec![4.0]],
        );
        let b = rel(
            &["x", "y"],
            vec![vec![ContentValue::Int(1), ContentValue::Int(12)]],
            vec![vec![9.0]],
        );
        let u = projected_union(&[&a, &b], &["x".to_string()], AggKind::Mean).unwrap();
        let m = match &u.emb {
            EmbSource::Dense(m) => m,
            _ => unreachable!(),
        };
        let multiset_mean = (2.0 + 4.0 + 9.0) / 3.0;
        let mean_of_means = ((2.0 + 4.0) / 2.0 + 9.0) / 2.0;
        assert!((m.get(0, 0) - multiset_mean).abs() < 1e-12);
        assert!((m.get(0, 0) - mean_of_means).abs() > 1e-3);
    }

    #[test]
    fn empty_filter_is_identity_and_filters_compose() {
        let r = rel(
            &["x"],
            (1..=4).map(|i| vec![ContentValue::Int(i)]).collect(),
            (1..=4).map(|i| vec![i as f64]).collect(),
        );
        let id = select(&r, &[]).unwrap();
        assert_eq!(id.rows, r.rows);
        let p = Predicate {
            lhs: ScalarTerm::Attr("x"),
            cmp: CmpOp::Lt,
            rhs: ScalarTerm::Const(ContentValue::Int(3)),
        };
        let f = select(&r, &[p.clone()]).unwrap();
        assert_eq!(f.len(), 2);
        // Conjunction equals sequential application.
        let q = Predicate {
            lhs: ScalarTerm::Attr("x"),
            cmp: CmpOp::Gt,
            rhs: ScalarTerm::Const(ContentValue::Int(1)),
        };
        let both = select(&r, &[p.clone(), q.clone()]).unwrap();
        let seq = select(&select(&r, &[p]).unwrap(), &[q]).unwrap();
        assert_eq!(both.rows, seq.rows);
    }

    #[test]
    fn difference_basics() {
        let r = rel(
            &["x"],
            vec![vec![ContentValue::Int(1)], vec![ContentValue::Int(2)]],
            vec![vec![1.5], vec![2.5]],
        );
        let empty = EmbeddedRelation::empty(vec!["x".into()], 1);
        assert_eq!(difference(&r, &r).unwrap().len(), 0);
        let keep = difference(&r, &empty).unwrap();
        assert_eq!(keep.rows, r.rows);
        let m = match &keep.emb {
            EmbSource::Dense(m) => m,
            _ => unreachable!(),
        };
        assert_eq!(m.data, vec![1.5, 2.5]);
    }

    #[test]
    fn encode_direct_and_onehot() {
        let r = rel(
            &["age", "flag", "color"],
            vec![
                vec![ContentValue::Int(30), ContentValue::Bool(false), s("red")],
                vec![ContentValue::Int(40), ContentValue::Bool(true), s("green")],
            ],
            vec![vec![], vec![]],
        );
        let items = vec![
            EncodeItem { attr: "age".into(), encoder: EncoderKind::Direct },
            EncodeItem { attr: "flag".into(), encoder: EncoderKind::Direct },
            EncodeItem {
                attr: "color".into(),
                encoder: EncoderKind::OneHot(vec!["red".into(), "green".into(), "blue".into()]),
            },
        ];
        let e = encode(&r, &items).unwrap();
        assert_eq!(e.dim(), 5);
        let m = match &e.emb {
            EmbSource::Dense(m) => m,
            _ => unreachable!(),
        };
        assert_eq!(m.row(0), &[30.0, 0.0, 1.0, 0.0, 0.0]);
        assert_eq!(m.row(1), &[40.0, 1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn encode_string_without_vocab_fails() {
        let r = rel(&["name"], vec![vec![s("bob")]], vec![vec![]]);
        let items = vec![EncodeItem { attr: "name".into(), encoder: EncoderKind::Direct }];
        assert!(encode(&r, &items).is_err());
    }

    #[test]
    fn decode_appends_float_columns_and_round_trips() {
        let r = rel(
            &["id"],
            vec![vec![ContentValue::Int(1)], vec![ContentValue::Int(2)]],
            vec![vec![0.25], vec![0.75]],
        );
        let d = decode(&r, 0, 1, &["score".to_string()]).unwrap();
        assert_eq!(d.attrs, vec!["id", "score"]);
        assert_eq!(d.rows[0][1], ContentValue::Float(0.25));
        assert_eq!(d.dim(), 1);
        // Re-encoding the decoded column reproduces the embedding values.
        let re = encode(&d, &[EncodeItem { attr: "score".into(), encoder: EncoderKind::Direct }]).unwrap();
        let m = match &re.emb {
            EmbSource::Dense(m) => m,
            _ => unreachable!(),
        };
        assert_eq!(m.row(0), &[0.25, 0.25]);

        let empty = EmbeddedRelation::empty(vec!["id".into()], 1);
        let de = decode(&empty, 0, 1, &["score".to_string()]).unwrap();
        assert_eq!(de.attrs.len(), 2);
        assert_eq!(de.len(), 0);
    }

    #[test]
    fn random_joins_match_in_test_brute_force() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        for _ in 0..200 {
            let n1 = rng.gen_range(0..8);
            let n2 = rng.gen_range(0..8);
            let mk = |rng: &mut rand_chacha::ChaCha8Rng, n: usize, attrs: &[&str]| {
                let mut seen = std::collections::BTreeSet::new();
                let mut rows = Vec::new();
                for _ in 0..n {
                    let t: Vec<ContentValue> =
                        attrs.iter().map(|_| ContentValue::Int(rng.gen_range(0..4))).collect();
                    if seen.insert(t.clone()) {
                        rows.push(t);
                    }
                }
                let emb: Vec<Vec<f64>> = rows.iter().map(|_| vec![rng.gen::<f64>()]).collect();
                rel(attrs, rows, emb)
            };
            let r1 = mk(&mut rng, n1, &["x", "y"]);
            let r2 = mk(&mut rng, n2, &["y", "z"]);
            let j = join(&r1, &r2).unwrap();
            // Brute force: triple schema scan, independent of the operator.
            let mut expected = std::collections::BTreeSet::new();
            for t1 in &r1.rows {
                for t2 in &r2.rows {
                    if t1[1] == t2[0] {
                        expected.insert(vec![t1[0].clone(), t1[1].clone(), t2[1].clone()]);
                    }
                }
            }
            let got: std::collections::BTreeSet<_> = j.rows.iter().cloned().collect();
            assert_eq!(got, expected);
        }
    }
}
