//! Embedded relations, schemas, databases, and CSV ingestion.
//!
//! An embedded relation pairs a duplicate-free content table with a dense
//! embedding matrix, one row of width `d` per content tuple. Rows are kept in
//! canonical (lexicographic) order at all times so that embedding alignment
//! and seeding are reproducible.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{gaussian_matrix, seeded_rng, Matrix, ParamKey, ParameterStore};
use crate::value::{ContentValue, Tuple, ValueTag};

/// Per-relation schema entry: content arity, embedding dimension, attribute
/// names, and the statically known value tag of each attribute column.
#[derive(Debug, Clone)]
pub struct SchemaEntry {
    pub content_arity: usize,
    pub embedding_dim: usize,
    pub attribute_names: Vec<String>,
    pub tags: Vec<ValueTag>,
}

#[derive(Debug, Clone, Default)]
pub struct Schema {
    pub entries: BTreeMap<String, SchemaEntry>,
}

impl Schema {
    pub fn get(&self, name: &str) -> Option<&SchemaEntry> {
        self.entries.get(name)
    }
}

/// Where a relation's embedding matrix lives: fixed data loaded from a file,
/// or a learnable parameter looked up in the store at evaluation time.
#[derive(Debug, Clone)]
pub enum EmbSource {
    Dense(Matrix),
    Learnable { key: ParamKey, dim: usize },
}

#[derive(Debug, Clone)]
pub struct EmbeddedRelation {
    pub attrs: Vec<String>,
    pub tags: Vec<ValueTag>,
    pub rows: Vec<Tuple>,
    pub emb: EmbSource,
}

impl EmbeddedRelation {
    /// Build a relation from unordered rows and a row-aligned embedding
    /// matrix; rows are sorted canonically with the matrix permuted in step.
    pub fn new(attrs: Vec<String>, rows: Vec<Tuple>, emb: Matrix) -> Result<EmbeddedRelation> {
        if emb.rows != rows.len() {
            return Err(Error::data(format!(
                "embedding has {} rows for {} tuples",
                emb.rows,
                rows.len()
            )));
        }
        let tags = infer_tags(&attrs, &rows)?;
        let mut order: Vec<usize> = (0..rows.len()).collect();
        order.sort_by(|&a, &b| rows[a].cmp(&rows[b]));
        let sorted_rows: Vec<Tuple> = order.iter().map(|&i| rows[i].clone()).collect();
        for w in sorted_rows.windows(2) {
            if w[0] == w[1] {
                return Err(Error::data(format!(
                    "duplicate content tuple: ({})",
                    w[0].iter().map(|v| v.to_string()).collect::<Vec<_>>().join(", ")
                )));
            }
        }
        let emb = emb.select_rows(&order);
        Ok(EmbeddedRelation { attrs, tags, rows: sorted_rows, emb: EmbSource::Dense(emb) })
    }

    pub fn empty(attrs: Vec<String>, dim: usize) -> EmbeddedRelation {
        let tags = vec![ValueTag::Unknown; attrs.len()];
        EmbeddedRelation { attrs, tags, rows: Vec::new(), emb: EmbSource::Dense(Matrix::zeros(0, dim)) }
    }

    pub fn arity(&self) -> usize {
        self.attrs.len()
    }

    pub fn dim(&self) -> usize {
        match &self.emb {
            EmbSource::Dense(m) => m.cols,
            EmbSource::Learnable { dim, .. } => *dim,
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// The embedding as a dense matrix, resolving learnable embeddings
    /// through the store.
    pub fn dense_emb(&self, store: &ParameterStore) -> Result<Matrix> {
        match &self.emb {
            EmbSource::Dense(m) => Ok(m.clone()),
            EmbSource::Learnable { key, .. } => store
                .get(key)
                .cloned()
                .ok_or_else(|| Error::data(format!("learnable embedding {} not in store", key))),
        }
    }

    pub fn schema_entry(&self) -> SchemaEntry {
        SchemaEntry {
            content_arity: self.arity(),
            embedding_dim: self.dim(),
            attribute_names: self.attrs.clone(),
            tags: self.tags.clone(),
        }
    }
}

fn infer_tags(attrs: &[String], rows: &[Tuple]) -> Result<Vec<ValueTag>> {
    let mut tags = vec![ValueTag::Unknown; attrs.len()];
    for row in rows {
        if row.len() != attrs.len() {
            return Err(Error::data(format!(
                "tuple arity {} does not match {} attributes",
                row.len(),
                attrs.len()
            )));
        }
        for (i, v) in row.iter().enumerate() {
            let t = v.tag();
            if !tags[i].compatible(t) {
                return Err(Error::data(format!(
                    "mixed value tags in column {}: {} vs {}",
                    attrs[i],
                    tags[i].name(),
                    t.name()
                )));
            }
            tags[i] = tags[i].unify(t);
        }
    }
    Ok(tags)
}

#[derive(Debug, Clone, Default)]
pub struct Database {
    pub relations: BTreeMap<String, EmbeddedRelation>,
}

impl Database {
    pub fn new() -> Database {
        Database::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, rel: EmbeddedRelation) -> Result<()> {
        let name = name.into();
        if self.relations.contains_key(&name) {
            return Err(Error::data(format!("relation {} defined twice", name)));
        }
        self.relations.insert(name, rel);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&EmbeddedRelation> {
        self.relations.get(name)
    }

    pub fn schema(&self) -> Schema {
        let mut schema = Schema::default();
        for (name, rel) in &self.relations {
            schema.entries.insert(name.clone(), rel.schema_entry());
        }
        schema
    }
}

/// Role of one CSV column during ingestion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColumnRole {
    Content,
    Feature,
    Skip,
}

/// One column declaration: the header name it must match plus its role.
#[derive(Debug, Clone)]
pub struct ColumnDecl {
    pub name: String,
    pub role: ColumnRole,
}

/// Load a CSV file into an embedded relation. Content columns become
/// attributes; feature columns are concatenated in declaration order into the
/// initial embedding. Duplicate content tuples are rejected.
pub fn load_relation_csv(path: &Path, name: &str, decl: &[ColumnDecl]) -> Result<EmbeddedRelation> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::data(format!("{}: cannot open {}: {}", name, path.display(), e)))?;
    let headers: Vec<String> =
        reader.headers().map_err(|e| Error::data(format!("{}: bad header: {}", name, e)))?
            .iter()
            .map(|h| h.trim().to_string())
            .collect();
    if headers.len() != decl.len() {
        return Err(Error::data(format!(
            "{}: header has {} columns but declaration lists {}",
            name,
            headers.len(),
            decl.len()
        )));
    }
    for (h, d) in headers.iter().zip(decl) {
        if h != &d.name {
            return Err(Error::data(format!(
                "{}: header column {} does not match declared column {}",
                name, h, d.name
            )));
        }
    }
    let content_cols: Vec<usize> =
        decl.iter().enumerate().filter(|(_, d)| d.role == ColumnRole::Content).map(|(i, _)| i).collect();
    let feature_cols: Vec<usize> =
        decl.iter().enumerate().filter(|(_, d)| d.role == ColumnRole::Feature).map(|(i, _)| i).collect();

    let mut raw_content: Vec<Vec<String>> = Vec::new();
    let mut features: Vec<Vec<f64>> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::data(format!("{}: bad record: {}", name, e)))?;
        if record.len() != decl.len() {
            return Err(Error::data(format!(
                "{}: row has {} fields, expected {}",
                name,
                record.len(),
                decl.len()
            )));
        }
        raw_content.push(content_cols.iter().map(|&i| record[i].trim().to_string()).collect());
        let mut feat = Vec::with_capacity(feature_cols.len());
        for &i in &feature_cols {
            let field = record[i].trim();
            let v: f64 = field.parse().map_err(|_| {
                Error::data(format!(
                    "{}: non-numeric value {:?} in feature column {}",
                    name, field, decl[i].name
                ))
            })?;
            feat.push(v);
        }
        features.push(feat);
    }

    // Per-column type inference over content values: all-int, else all-float,
    // else all-bool, else string.
    let ncols = content_cols.len();
    let mut rows: Vec<Tuple> = vec![Vec::with_capacity(ncols); raw_content.len()];
    for c in 0..ncols {
        let col: Vec<&str> = raw_content.iter().map(|r| r[c].as_str()).collect();
        let parsed = parse_column(&col);
        for (r, v) in parsed.into_iter().enumerate() {
            rows[r].push(v);
        }
    }

    let attrs: Vec<String> = content_cols.iter().map(|&i| decl[i].name.clone()).collect();
    {
        let mut seen = HashSet::new();
        for a in &attrs {
            if !seen.insert(a) {
                return Err(Error::data(format!("{}: duplicate attribute name {}", name, a)));
            }
        }
    }
    if rows.is_empty() {
        return Ok(EmbeddedRelation::empty(attrs, feature_cols.len()));
    }
    let emb = Matrix::from_rows(&features);
    EmbeddedRelation::new(attrs, rows, emb)
        .map_err(|e| Error::data(format!("{}: {}", name, e.msg)))
}

fn parse_column(col: &[&str]) -> Vec<ContentValue> {
    if col.iter().all(|s| s.parse::<i64>().is_ok()) {
        return col.iter().map(|s| ContentValue::Int(s.parse().unwrap())).collect();
    }
    if col.iter().all(|s| s.parse::<f64>().is_ok()) {
        return col.iter().map(|s| ContentValue::Float(s.parse().unwrap())).collect();
    }
    if col.iter().all(|s| *s == "true" || *s == "false") {
        return col.iter().map(|s| ContentValue::Bool(*s == "true")).collect();
    }
    col.iter().map(|s| ContentValue::Str(s.to_string())).collect()
}

/// Give every content tuple a fresh learnable d-vector, registered under the
/// relation's embedding key and initialized i.i.d. N(0, 1/d) from a stream
/// derived from (seed, key).
pub fn attach_learnable_embeddings(
    rel: &EmbeddedRelation,
    name: &str,
    d: usize,
    store: &mut ParameterStore,
    rng_seed: u64,
) -> Result<EmbeddedRelation> {
    if d == 0 {
        return Err(Error::data(format!("{}: learnable embedding dimension must be positive", name)));
    }
    if rel.dim() != 0 {
        return Err(Error::data(format!(
            "{}: relation already carries a {}-dim embedding; a relation holds either \
             file features or learnable embeddings, not both",
            name,
            rel.dim()
        )));
    }
    let key = embedding_key(name);
    let n = rel.len();
    let sigma = (1.0 / d as f64).sqrt();
    store.register(key.clone(), || {
        let mut rng = seeded_rng(rng_seed, &key);
        gaussian_matrix(&mut rng, n, d, sigma)
    });
    Ok(EmbeddedRelation {
        attrs: rel.attrs.clone(),
        tags: rel.tags.clone(),
        rows: rel.rows.clone(),
        emb: EmbSource::Learnable { key: embedding_key(name), dim: d },
    })
}

/// Store key that holds a relation's per-tuple embedding matrix; row i of the
/// matrix is the vector of the i-th tuple in canonical order.
pub fn embedding_key(relation: &str) -> ParamKey {
    ParamKey::plain(format!("{}::emb", relation))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_csv(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    fn decl(spec: &[(&str, ColumnRole)]) -> Vec<ColumnDecl> {
        spec.iter().map(|(n, r)| ColumnDecl { name: n.to_string(), role: *r }).collect()
    }

    #[test]
    fn loads_content_and_features() {
        let f = write_csv("id,x,y\nb,1.0,2.0\na,3.0,4.0\nc,5.0,6.0\n");
        let rel = load_relation_csv(
            f.path(),
            "R",
            &decl(&[("id", ColumnRole::Content), ("x", ColumnRole::Feature), ("y", ColumnRole::Feature)]),
        )
        .unwrap();
        assert_eq!(rel.arity(), 1);
        assert_eq!(rel.dim(), 2);
        assert_eq!(rel.len(), 3);
        // Canonical order sorts a < b < c and the embedding rows follow.
        assert_eq!(rel.rows[0], vec![ContentValue::Str("a".into())]);
        match &rel.emb {
            EmbSource::Dense(m) => {
                assert_eq!(m.row(0), &[3.0, 4.0]);
                assert_eq!(m.row(1), &[1.0, 2.0]);
            }
            _ => panic!(),
        }
    }

    #[test]
    fn empty_file_keeps_declared_arity() {
        let f = write_csv("id,x\n");
        let rel =
            load_relation_csv(f.path(), "R", &decl(&[("id", ColumnRole::Content), ("x", ColumnRole::Feature)]))
                .unwrap();
        assert_eq!(rel.arity(), 1);
        assert_eq!(rel.dim(), 1);
        assert_eq!(rel.len(), 0);
    }

    #[test]
    fn duplicate_tuples_rejected() {
        let f = write_csv("id\n7\n7\n");
        let err = load_relation_csv(f.path(), "R", &decl(&[("id", ColumnRole::Content)])).unwrap_err();
        assert!(err.msg.contains("duplicate"), "{}", err);
    }

    #[test]
    fn header_decl_mismatch_rejected() {
        let f = write_csv("id,x\n1,2\n");
        let err = load_relation_csv(f.path(), "R", &decl(&[("id", ColumnRole::Content)])).unwrap_err();
        assert!(err.msg.contains("columns"), "{}", err);
    }

    #[test]
    fn non_numeric_feature_rejected() {
        let f = write_csv("id,x\n1,apple\n");
        let err = load_relation_csv(
            f.path(),
            "R",
            &decl(&[("id", ColumnRole::Content), ("x", ColumnRole::Feature)]),
        )
        .unwrap_err();
        assert!(err.msg.contains("non-numeric"), "{}", err);
    }

    #[test]
    fn skip_columns_are_ignored() {
        let f = write_csv("id,junk,x\n1,whatever,0.5\n");
        let rel = load_relation_csv(
            f.path(),
            "R",
            &decl(&[
                ("id", ColumnRole::Content),
                ("junk", ColumnRole::Skip),
                ("x", ColumnRole::Feature),
            ]),
        )
        .unwrap();
        assert_eq!(rel.arity(), 1);
        assert_eq!(rel.dim(), 1);
    }

    #[test]
    fn attach_registers_seeded_parameters() {
        let rel = EmbeddedRelation::new(
            vec!["id".into()],
            (0..5).map(|i| vec![ContentValue::Int(i)]).collect(),
            Matrix::zeros(5, 0),
        )
        .unwrap();
        let mut s1 = ParameterStore::new();
        let out = attach_learnable_embeddings(&rel, "R", 16, &mut s1, 42).unwrap();
        assert_eq!(out.dim(), 16);
        let m1 = s1.get(&embedding_key("R")).unwrap().clone();
        assert_eq!(m1.shape(), (5, 16));

        // Same seed: bit-identical. Different store: independent objects.
        let mut s2 = ParameterStore::new();
        attach_learnable_embeddings(&rel, "R", 16, &mut s2, 42).unwrap();
        let m2 = s2.get(&embedding_key("R")).unwrap();
        for (a, b) in m1.data.iter().zip(&m2.data) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        let mut s3 = ParameterStore::new();
        attach_learnable_embeddings(&rel, "R", 16, &mut s3, 43).unwrap();
        assert_ne!(&m1, s3.get(&embedding_key("R")).unwrap());
    }

    #[test]
    fn attach_rejects_zero_dim_and_existing_features() {
        let rel = EmbeddedRelation::new(
            vec!["id".into()],
            vec![vec![ContentValue::Int(1)]],
            Matrix::zeros(1, 0),
        )
        .unwrap();
        let mut store = ParameterStore::new();
        assert!(attach_learnable_embeddings(&rel, "R", 0, &mut store, 1).is_err());
        let with_feat = EmbeddedRelation::new(
            vec!["id".into()],
            vec![vec![ContentValue::Int(1)]],
            Matrix::ones(1, 2),
        )
        .unwrap();
        assert!(attach_learnable_embeddings(&with_feat, "R", 4, &mut store, 1).is_err());
    }

    #[test]
    fn mixed_tags_in_column_rejected() {
        let rows = vec![vec![ContentValue::Int(1)], vec![ContentValue::Str("x".into())]];
        assert!(EmbeddedRelation::new(vec!["a".into()], rows, Matrix::zeros(2, 0)).is_err());
    }
}
