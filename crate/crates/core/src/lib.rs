//! Label-guided training-data curation: label catalog, corpus store,
//! dual-track synthesis, verification, governance, difficulty-aware weights
//! and the attribution loop, with a seeded simulated model family for
//! deterministic runs.

// Negated float comparisons are how NaN gets rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attribution;
pub mod corpus;
pub mod governance;
pub mod label;
pub mod protocol;
pub mod seed;
pub mod sim;
pub mod synthesis;
pub mod verification;
pub mod weights;
