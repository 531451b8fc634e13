//! Sequence labeling with sentence-level and token-level attribute
//! injection: a small transformer encoder (manual backprop), four injection
//! sites (text, embedding, attention, classifier), a linear-chain CRF or
//! softmax output head, an entailment-reformulated sentence classifier, and
//! pipeline / joint training drivers.

pub mod checkpoint;
pub mod corpus;
pub mod crf;
pub mod engine;
pub mod heads;
pub mod injection;
pub mod model;
pub mod pipeline;
pub mod synth;
pub mod tagging;
