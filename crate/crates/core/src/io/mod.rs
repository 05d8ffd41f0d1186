//! Corpus files, synthetic corpora and tensor containers.

pub mod checkpoint;
pub mod corpus;
pub mod synthetic;
