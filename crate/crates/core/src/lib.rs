//! Few-shot recommendation with LLM-generated user and item representations.
//!
//! The pipeline runs corpus → prompts → representations → embeddings →
//! models → reports. Every stage has a deterministic offline path so the
//! whole chain can run without network access.

pub mod corpus;
pub mod directrec;
pub mod embedsvc;
pub mod evalmetrics;
pub mod harness;
pub mod http;
pub mod interact;
pub mod neuralcore;
pub mod promptgen;
pub mod repgen;
pub mod semdist;
pub mod stub;
