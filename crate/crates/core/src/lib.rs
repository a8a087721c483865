//! Toolkit for gender-bias detection, classification and mitigation.
//!
//! The crate is organised by pipeline stage:
//!
//! - [`corpus`]: JSONL task records, split loading and count validation.
//! - [`metrics`]: binary F1, macro F1 and BLEU.
//! - [`toylm`]: a bigram language model with exact log-probabilities and gradients.
//! - [`align`]: DPO and pairwise reward-model losses, gradients and trainers.
//! - [`decode`]: reward-guided decoding.
//! - [`lmclient`]: chat-completion client with live and record/replay backends.
//! - [`cot`]: structured chain-of-thought prompts, strict parsers and the batch pipeline.
//! - [`prefgen`]: counterfactual preference-pair construction.
//!
//! Data-parallel loops run on rayon when the `parallel` feature is enabled
//! (the default) and fall back to sequential iteration otherwise. Reductions
//! are always performed in input order so both paths agree bit for bit.

pub mod align;
pub mod corpus;
pub mod cot;
pub mod decode;
pub mod lmclient;
pub mod metrics;
pub mod par;
pub mod prefgen;
pub mod template;
pub mod toylm;
