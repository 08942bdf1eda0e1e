//! Engine for neuro-relational programs: a Datalog-like rule language whose
//! relations carry learnable vector embeddings, compiled through a
//! neuro-relational algebra term graph and executed with an internal
//! reverse-mode autodiff tape.

pub mod error;
pub mod nra;
pub mod relmodel;
pub mod tensor;
pub mod value;

pub use error::{Error, Result, Stage};
