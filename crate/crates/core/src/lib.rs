//! Single-step retrosynthesis with a Medusa-headed transformer, speculative
//! beam search, and a best-first multi-step planner.

pub mod corpus;
pub mod decode;
pub mod harness;
pub mod model;
pub mod plan;
pub mod smiles;
