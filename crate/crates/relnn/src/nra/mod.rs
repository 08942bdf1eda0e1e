//! Neuro-relational algebra: operator nodes, the term graph (logical plan),
//! and static schema derivation.
//!
//! Every operator has two halves: content semantics (classical relational
//! algebra) and embedding semantics (how output embeddings are computed from
//! input embeddings). The eager reference implementations live in [`ops`];
//! the optimized gather/scatter execution lives in `exec`.

pub mod ops;
pub mod texpr;

pub use texpr::{EncodeItem, EncoderKind, TExpr, TransformSpec};

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::value::{ContentValue, ValueTag};

/// Multiset aggregator applied by projected union when tuples collapse.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggKind {
    Sum,
    Mean,
    Max,
}

impl AggKind {
    pub fn name(&self) -> &'static str {
        match self {
            AggKind::Sum => "sum",
            AggKind::Mean => "mean",
            AggKind::Max => "max",
        }
    }

    pub fn parse(s: &str) -> Option<AggKind> {
        match s {
            "sum" => Some(AggKind::Sum),
            "mean" => Some(AggKind::Mean),
            "max" => Some(AggKind::Max),
            _ => None,
        }
    }
}

/// Comparator of a filter predicate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl CmpOp {
    pub fn symbol(&self) -> &'static str {
        match self {
            CmpOp::Eq => "=",
            CmpOp::Ne => "!=",
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
        }
    }
}

/// Arithmetic term over content attributes and constants.
#[derive(Debug, Clone)]
pub enum ScalarTerm {
    Attr(String),
    Const(ContentValue),
    Add(Box<ScalarTerm>, Box<ScalarTerm>),
    Sub(Box<ScalarTerm>, Box<ScalarTerm>),
    Mul(Box<ScalarTerm>, Box<ScalarTerm>),
    Div(Box<ScalarTerm>, Box<ScalarTerm>),
    Neg(Box<ScalarTerm>),
}

impl ScalarTerm {
    /// Whether the term is a bare attribute or constant (no arithmetic).
    fn is_pure(&self) -> bool {
        matches!(self, ScalarTerm::Attr(_) | ScalarTerm::Const(_))
    }
}

impl fmt::Display for ScalarTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScalarTerm::Attr(a) => write!(f, "{}", a),
            ScalarTerm::Const(c) => write!(f, "{}", c),
            ScalarTerm::Add(a, b) => write!(f, "({} + {})", a, b),
            ScalarTerm::Sub(a, b) => write!(f, "({} - {})", a, b),
            ScalarTerm::Mul(a, b) => write!(f, "({} * {})", a, b),
            ScalarTerm::Div(a, b) => write!(f, "({} / {})", a, b),
            ScalarTerm::Neg(a) => write!(f, "(-{})", a),
        }
    }
}

/// One conjunct of a selection predicate.
#[derive(Debug, Clone)]
pub struct Predicate {
    pub lhs: ScalarTerm,
    pub cmp: CmpOp,
    pub rhs: ScalarTerm,
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}", self.lhs, self.cmp.symbol(), self.rhs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub usize);

/// Operator of one term-graph node.
#[derive(Debug, Clone)]
pub enum NraOp {
    Leaf { relation: String },
    Join,
    ProjectedUnion { agg: AggKind, attrs: Vec<String> },
    Transform(TransformSpec),
    Select(Vec<Predicate>),
    Difference,
    Rename(Vec<(String, String)>),
    Encode(Vec<EncodeItem>),
    Decode { start: usize, len: usize, names: Vec<String> },
}

/// Statically derived output schema of a node.
#[derive(Debug, Clone)]
pub struct NodeSchema {
    pub attrs: Vec<String>,
    pub tags: Vec<ValueTag>,
    pub dim: usize,
}

impl NodeSchema {
    pub fn arity(&self) -> usize {
        self.attrs.len()
    }

    pub fn attr_index(&self, name: &str) -> Option<usize> {
        self.attrs.iter().position(|a| a == name)
    }

    pub fn tag_of(&self, name: &str) -> Option<ValueTag> {
        self.attr_index(name).map(|i| self.tags[i])
    }
}

#[derive(Debug, Clone)]
pub struct TermNode {
    pub op: NraOp,
    pub children: Vec<NodeId>,
    pub schema: NodeSchema,
}

/// DAG of NRA operators over relation leaves; the logical plan of a program.
#[derive(Debug, Clone, Default)]
pub struct TermGraph {
    nodes: Vec<TermNode>,
    bindings: BTreeMap<String, NodeId>,
}

impl TermGraph {
    pub fn new() -> TermGraph {
        TermGraph::default()
    }

    pub fn node(&self, id: NodeId) -> &TermNode {
        &self.nodes[id.0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Bind a relation name to the node producing it. Redefinition is
    /// rejected; combining relations takes an explicit union rule.
    pub fn bind(&mut self, name: impl Into<String>, id: NodeId) -> Result<()> {
        let name = name.into();
        if self.bindings.contains_key(&name) {
            return Err(Error::lower(format!("relation {} is defined twice", name)));
        }
        self.bindings.insert(name, id);
        Ok(())
    }

    pub fn lookup(&self, name: &str) -> Option<NodeId> {
        self.bindings.get(name).copied()
    }

    pub fn bindings(&self) -> impl Iterator<Item = (&String, &NodeId)> {
        self.bindings.iter()
    }

    /// Append a node, deriving and validating its output schema.
    pub fn add(&mut self, op: NraOp, children: Vec<NodeId>) -> Result<NodeId> {
        let child_schemas: Vec<&NodeSchema> = children.iter().map(|c| &self.nodes[c.0].schema).collect();
        let schema = derive_schema(&op, &child_schemas)?;
        self.nodes.push(TermNode { op, children, schema });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn add_leaf(&mut self, relation: impl Into<String>, schema: NodeSchema) -> NodeId {
        let relation = relation.into();
        self.nodes.push(TermNode { op: NraOp::Leaf { relation }, children: Vec::new(), schema });
        NodeId(self.nodes.len() - 1)
    }

    /// Minimal ancestor-closed sub-DAG rooted at `target`, in topological
    /// (children-first) order. Shared subexpressions appear once.
    pub fn extract_plan(&self, target: &str) -> Result<Plan> {
        let root = self
            .lookup(target)
            .ok_or_else(|| Error::lower(format!("undefined plan target {}", target)))?;
        let mut order = Vec::new();
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![(root, false)];
        while let Some((id, expanded)) = stack.pop() {
            if expanded {
                order.push(id);
                continue;
            }
            if seen[id.0] {
                continue;
            }
            seen[id.0] = true;
            stack.push((id, true));
            // Children pushed in reverse so they pop in declaration order.
            for &c in self.nodes[id.0].children.iter().rev() {
                stack.push((c, false));
            }
        }
        Ok(Plan { root, order })
    }

    /// Deterministic textual DAG listing for `--dump-plan`.
    pub fn dump_plan(&self, target: &str) -> Result<String> {
        let plan = self.extract_plan(target)?;
        let local: BTreeMap<NodeId, usize> =
            plan.order.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let mut out = format!("plan for {} ({} nodes)\n", target, plan.order.len());
        for (i, &id) in plan.order.iter().enumerate() {
            let n = self.node(id);
            let kids: Vec<String> = n.children.iter().map(|c| format!("#{}", local[c])).collect();
            out.push_str(&format!(
                "#{} {} [k={} d={} attrs=({})]{}\n",
                i,
                describe_op(&n.op),
                n.schema.arity(),
                n.schema.dim,
                n.schema.attrs.join(","),
                if kids.is_empty() { String::new() } else { format!(" <- {}", kids.join(" ")) },
            ));
        }
        Ok(out)
    }
}

fn describe_op(op: &NraOp) -> String {
    match op {
        NraOp::Leaf { relation } => format!("leaf {}", relation),
        NraOp::Join => "join".into(),
        NraOp::ProjectedUnion { agg, attrs } => {
            format!("proj-union {} on ({})", agg.name(), attrs.join(","))
        }
        NraOp::Transform(spec) => format!("transform {}", spec),
        NraOp::Select(preds) => {
            let parts: Vec<String> = preds.iter().map(|p| p.to_string()).collect();
            format!("select {}", parts.join(" and "))
        }
        NraOp::Difference => "difference".into(),
        NraOp::Rename(map) => {
            let parts: Vec<String> = map.iter().map(|(a, b)| format!("{}->{}", a, b)).collect();
            format!("rename {}", parts.join(","))
        }
        NraOp::Encode(items) => {
            let parts: Vec<String> = items.iter().map(|i| i.to_string()).collect();
            format!("encode {}", parts.join(","))
        }
        NraOp::Decode { start, len, names } => {
            format!("decode emb[{}..{}] as ({})", start, start + len, names.join(","))
        }
    }
}

/// Logical plan: rooted ancestor-closed sub-DAG in topological order.
#[derive(Debug, Clone)]
pub struct Plan {
    pub root: NodeId,
    pub order: Vec<NodeId>,
}

fn derive_schema(op: &NraOp, children: &[&NodeSchema]) -> Result<NodeSchema> {
    match op {
        NraOp::Leaf { .. } => unreachable!("leaves are added with an explicit schema"),
        NraOp::Join => {
            let [l, r] = take2(children, "join")?;
            let mut attrs = l.attrs.clone();
            let mut tags = l.tags.clone();
            for (a, t) in r.attrs.iter().zip(&r.tags) {
                match l.attr_index(a) {
                    Some(i) => {
                        if !l.tags[i].compatible(*t) {
                            return Err(Error::lower(format!(
                                "join attribute {} has incompatible value tags ({} vs {})",
                                a,
                                l.tags[i].name(),
                                t.name()
                            )));
                        }
                    }
                    None => {
                        attrs.push(a.clone());
                        tags.push(*t);
                    }
                }
            }
            Ok(NodeSchema { attrs, tags, dim: l.dim + r.dim })
        }
        NraOp::ProjectedUnion { attrs, .. } => {
            if children.is_empty() {
                return Err(Error::lower("projected union needs at least one input"));
            }
            let dim = children[0].dim;
            let mut tags = vec![ValueTag::Unknown; attrs.len()];
            for child in children {
                if child.dim != dim {
                    return Err(Error::lower(format!(
                        "projected union embedding width mismatch: {} vs {}",
                        dim, child.dim
                    )));
                }
                for (i, a) in attrs.iter().enumerate() {
                    match child.tag_of(a) {
                        Some(t) => {
                            if !tags[i].compatible(t) {
                                return Err(Error::lower(format!(
                                    "projected union attribute {} has incompatible tags",
                                    a
                                )));
                            }
                            tags[i] = tags[i].unify(t);
                        }
                        None => {
                            return Err(Error::lower(format!(
                                "projected union attribute {} missing from an input",
                                a
                            )))
                        }
                    }
                }
            }
            Ok(NodeSchema { attrs: attrs.clone(), tags, dim })
        }
        NraOp::Transform(spec) => {
            let [c] = take1(children, "transform")?;
            let dim = spec.output_dim(c)?;
            Ok(NodeSchema { attrs: c.attrs.clone(), tags: c.tags.clone(), dim })
        }
        NraOp::Select(preds) => {
            let [c] = take1(children, "select")?;
            for p in preds {
                check_predicate(p, c)?;
            }
            Ok((*c).clone())
        }
        NraOp::Difference => {
            let [l, r] = take2(children, "difference")?;
            if l.attrs != r.attrs {
                return Err(Error::lower(format!(
                    "difference schema mismatch: ({}) vs ({})",
                    l.attrs.join(","),
                    r.attrs.join(",")
                )));
            }
            for (i, t) in l.tags.iter().enumerate() {
                if !t.compatible(r.tags[i]) {
                    return Err(Error::lower(format!(
                        "difference attribute {} has incompatible tags",
                        l.attrs[i]
                    )));
                }
            }
            Ok((*l).clone())
        }
        NraOp::Rename(map) => {
            let [c] = take1(children, "rename")?;
            let mut attrs = c.attrs.clone();
            for (from, to) in map {
                match c.attr_index(from) {
                    Some(i) => attrs[i] = to.clone(),
                    None => {
                        return Err(Error::lower(format!("rename of unknown attribute {}", from)))
                    }
                }
            }
            let mut seen = std::collections::HashSet::new();
            for a in &attrs {
                if !seen.insert(a.clone()) {
                    return Err(Error::lower(format!("rename produces duplicate attribute {}", a)));
                }
            }
            Ok(NodeSchema { attrs, tags: c.tags.clone(), dim: c.dim })
        }
        NraOp::Encode(items) => {
            let [c] = take1(children, "encode")?;
            let mut extra = 0;
            for item in items {
                let tag = c
                    .tag_of(&item.attr)
                    .ok_or_else(|| Error::lower(format!("encode of unknown attribute {}", item.attr)))?;
                extra += item.width(tag)?;
            }
            Ok(NodeSchema { attrs: c.attrs.clone(), tags: c.tags.clone(), dim: c.dim + extra })
        }
        NraOp::Decode { start, len, names } => {
            let [c] = take1(children, "decode")?;
            if *len == 0 {
                return Err(Error::lower("decode slice must select at least one column"));
            }
            if start + len > c.dim {
                return Err(Error::lower(format!(
                    "decode slice {}..{} out of range for width {}",
                    start,
                    start + len,
                    c.dim
                )));
            }
            if names.len() != *len {
                return Err(Error::lower("decode name count must match slice width"));
            }
            let mut attrs = c.attrs.clone();
            let mut tags = c.tags.clone();
            for n in names {
                if attrs.contains(n) {
                    return Err(Error::lower(format!("decode attribute {} already exists", n)));
                }
                attrs.push(n.clone());
                tags.push(ValueTag::Float);
            }
            Ok(NodeSchema { attrs, tags, dim: c.dim })
        }
    }
}

fn check_predicate(p: &Predicate, schema: &NodeSchema) -> Result<()> {
    check_term(&p.lhs, schema)?;
    check_term(&p.rhs, schema)?;
    // Equality over strings/booleans is allowed for bare terms; arithmetic
    // and ordering require numeric (or statically unknown) operands.
    let numeric_needed = !matches!(p.cmp, CmpOp::Eq | CmpOp::Ne)
        || !p.lhs.is_pure()
        || !p.rhs.is_pure();
    if numeric_needed {
        for term in [&p.lhs, &p.rhs] {
            if let Some(tag) = term_tag(term, schema) {
                if !matches!(tag, ValueTag::Int | ValueTag::Float | ValueTag::Unknown) {
                    return Err(Error::lower(format!(
                        "type mismatch in comparison: {} is {}",
                        term,
                        tag.name()
                    )));
                }
            }
        }
    }
    Ok(())
}

fn term_tag(t: &ScalarTerm, schema: &NodeSchema) -> Option<ValueTag> {
    match t {
        ScalarTerm::Attr(a) => schema.tag_of(a),
        ScalarTerm::Const(c) => Some(c.tag()),
        _ => None,
    }
}

fn check_term(t: &ScalarTerm, schema: &NodeSchema) -> Result<()> {
    match t {
        ScalarTerm::Attr(a) => {
            if schema.attr_index(a).is_none() {
                return Err(Error::lower(format!("filter references unknown attribute {}", a)));
            }
            Ok(())
        }
        ScalarTerm::Const(_) => Ok(()),
        ScalarTerm::Add(a, b) | ScalarTerm::Sub(a, b) | ScalarTerm::Mul(a, b) | ScalarTerm::Div(a, b) => {
            check_term(a, schema)?;
            check_term(b, schema)
        }
        ScalarTerm::Neg(a) => check_term(a, schema),
    }
}

fn take1<'a>(children: &[&'a NodeSchema], what: &str) -> Result<[&'a NodeSchema; 1]> {
    if children.len() != 1 {
        return Err(Error::lower(format!("{} takes one input, got {}", what, children.len())));
    }
    Ok([children[0]])
}

fn take2<'a>(children: &[&'a NodeSchema], what: &str) -> Result<[&'a NodeSchema; 2]> {
    if children.len() != 2 {
        return Err(Error::lower(format!("{} takes two inputs, got {}", what, children.len())));
    }
    Ok([children[0], children[1]])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf_schema(attrs: &[&str], dim: usize) -> NodeSchema {
        NodeSchema {
            attrs: attrs.iter().map(|s| s.to_string()).collect(),
            tags: vec![ValueTag::Int; attrs.len()],
            dim,
        }
    }

    #[test]
    fn join_width_is_additive_and_attrs_merge() {
        let mut g = TermGraph::new();
        let a = g.add_leaf("A", leaf_schema(&["x", "y"], 3));
        let b = g.add_leaf("B", leaf_schema(&["y", "w"], 5));
        let j = g.add(NraOp::Join, vec![a, b]).unwrap();
        let s = &g.node(j).schema;
        assert_eq!(s.attrs, vec!["x", "y", "w"]);
        assert_eq!(s.dim, 8);
    }

    #[test]
    fn shared_subexpression_appears_once_in_plan() {
        let mut g = TermGraph::new();
        let a = g.add_leaf("A", leaf_schema(&["x"], 2));
        let t1 = g
            .add(NraOp::ProjectedUnion { agg: AggKind::Sum, attrs: vec!["x".into()] }, vec![a])
            .unwrap();
        let u1 = g
            .add(NraOp::ProjectedUnion { agg: AggKind::Sum, attrs: vec!["x".into()] }, vec![t1])
            .unwrap();
        let u2 = g
            .add(NraOp::ProjectedUnion { agg: AggKind::Mean, attrs: vec!["x".into()] }, vec![t1])
            .unwrap();
        let j = g.add(NraOp::Join, vec![u1, u2]).unwrap();
        g.bind("Out", j).unwrap();
        let plan = g.extract_plan("Out").unwrap();
        assert_eq!(plan.order.len(), 5);
        assert_eq!(plan.order.iter().filter(|id| id.0 == t1.0).count(), 1);
    }

    #[test]
    fn plan_of_leaf_is_single_node() {
        let mut g = TermGraph::new();
        let a = g.add_leaf("A", leaf_schema(&["x"], 0));
        g.bind("A", a).unwrap();
        let plan = g.extract_plan("A").unwrap();
        assert_eq!(plan.order, vec![a]);
    }

    #[test]
    fn difference_requires_identical_schemas() {
        let mut g = TermGraph::new();
        let a = g.add_leaf("A", leaf_schema(&["x"], 0));
        let b = g.add_leaf("B", leaf_schema(&["y"], 0));
        assert!(g.add(NraOp::Difference, vec![a, b]).is_err());
    }

    #[test]
    fn rebinding_a_name_is_rejected() {
        let mut g = TermGraph::new();
        let a = g.add_leaf("A", leaf_schema(&["x"], 0));
        g.bind("R", a).unwrap();
        assert!(g.bind("R", a).is_err());
    }

    #[test]
    fn undefined_target_is_an_error() {
        let g = TermGraph::new();
        assert!(g.extract_plan("Nope").is_err());
    }
}
