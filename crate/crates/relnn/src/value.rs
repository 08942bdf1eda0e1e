//! Content values and their canonical ordering.
//!
//! Tuples are ordered lexicographically; values are ordered by tag first
//! (integer < float < boolean < string) and then within the tag. Floats use
//! `total_cmp`, so ordering, equality, and hashing are all consistent.

use std::cmp::Ordering;
use std::fmt;
use std::hash::{Hash, Hasher};

#[derive(Debug, Clone)]
pub enum ContentValue {
    Int(i64),
    Float(f64),
    Bool(bool),
    Str(String),
}

/// Static tag of a content value; `Unknown` is the tag of an empty column.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValueTag {
    Int,
    Float,
    Bool,
    Str,
    Unknown,
}

impl ValueTag {
    pub fn compatible(self, other: ValueTag) -> bool {
        self == ValueTag::Unknown || other == ValueTag::Unknown || self == other
    }

    /// Merge of two compatible tags (`Unknown` yields to the other side).
    pub fn unify(self, other: ValueTag) -> ValueTag {
        if self == ValueTag::Unknown {
            other
        } else {
            self
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ValueTag::Int => "int",
            ValueTag::Float => "float",
            ValueTag::Bool => "bool",
            ValueTag::Str => "string",
            ValueTag::Unknown => "unknown",
        }
    }
}

impl ContentValue {
    pub fn tag(&self) -> ValueTag {
        match self {
            ContentValue::Int(_) => ValueTag::Int,
            ContentValue::Float(_) => ValueTag::Float,
            ContentValue::Bool(_) => ValueTag::Bool,
            ContentValue::Str(_) => ValueTag::Str,
        }
    }

    fn tag_rank(&self) -> u8 {
        match self {
            ContentValue::Int(_) => 0,
            ContentValue::Float(_) => 1,
            ContentValue::Bool(_) => 2,
            ContentValue::Str(_) => 3,
        }
    }

    /// Numeric view used by filter arithmetic; strings and booleans have none.
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            ContentValue::Int(i) => Some(*i as f64),
            ContentValue::Float(f) => Some(*f),
            _ => None,
        }
    }
}

impl PartialEq for ContentValue {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for ContentValue {}

impl PartialOrd for ContentValue {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for ContentValue {
    fn cmp(&self, other: &Self) -> Ordering {
        match (self, other) {
            (ContentValue::Int(a), ContentValue::Int(b)) => a.cmp(b),
            (ContentValue::Float(a), ContentValue::Float(b)) => a.total_cmp(b),
            (ContentValue::Bool(a), ContentValue::Bool(b)) => a.cmp(b),
            (ContentValue::Str(a), ContentValue::Str(b)) => a.cmp(b),
            _ => self.tag_rank().cmp(&other.tag_rank()),
        }
    }
}

impl Hash for ContentValue {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.tag_rank().hash(state);
        match self {
            ContentValue::Int(i) => i.hash(state),
            ContentValue::Float(f) => f.to_bits().hash(state),
            ContentValue::Bool(b) => b.hash(state),
            ContentValue::Str(s) => s.hash(state),
        }
    }
}

impl fmt::Display for ContentValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ContentValue::Int(i) => write!(f, "{}", i),
            ContentValue::Float(x) => write!(f, "{}", fmt_f64(*x)),
            ContentValue::Bool(b) => write!(f, "{}", b),
            ContentValue::Str(s) => write!(f, "{}", s),
        }
    }
}

/// A content tuple; relations hold these in canonical (lexicographic) order.
pub type Tuple = Vec<ContentValue>;

/// Format a float with 17 significant digits, enough for exact f64 round-trip.
pub fn fmt_f64(x: f64) -> String {
    format!("{:.16e}", x)
}
