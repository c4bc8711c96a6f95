//! MEANT: a multimodal encoder that attends over antecedent trading days.
//!
//! The crate covers the whole desk-scale stack: indicator math and labeled
//! lag-window datasets, a small reverse-mode tensor engine, the language and
//! vision encoders, query-targeted temporal fusion, and the training harness.

pub mod dataset;
pub mod embeddings;
pub mod encoders;
pub mod fusion;
pub mod indicators;
pub mod model;
pub mod nn;
pub mod synthetic;
pub mod tensor;
pub mod training;
