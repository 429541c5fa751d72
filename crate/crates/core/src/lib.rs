//! Metropolis-Hastings sampling for energy-based sequence models.
//!
//! The crate is organised bottom-up:
//!
//! * [`seq`]: vocabulary, token sequences, whitespace tokenization.
//! * [`ngram`]: an add-k smoothed n-gram model with exact likelihoods,
//!   ancestral sampling and conditional span generation.
//! * [`energy`]: potentials and the weighted product-of-experts energy.
//! * [`proposal`]: token-mask, span-block and adapter-block proposals.
//! * [`mh`]: the acceptance rule, chains, batches and stationarity checks.
//! * [`eval`]: J-score, judges, paired bootstrap and intrinsic evaluation.
//! * [`adapter`]: the JSON-over-HTTP protocol for external models, with a
//!   scripted mock server and a conformance suite.
//! * [`config`]: run configuration files.

pub mod adapter;
pub mod config;
pub mod energy;
pub mod error;
pub mod eval;
pub mod io;
pub mod mh;
pub mod ngram;
pub mod proposal;
pub mod rng;
pub mod seq;

pub use energy::{EnergySpec, EnergyTerm, Potential, SimilarityScorer, StyleClassifier};
pub use error::{Error, Result};
pub use eval::{EvalRecord, IntrinsicReport};
pub use mh::{AcceptMode, BatchResult, ChainState, Sampler, TraceEntry};
pub use ngram::NgramModel;
pub use proposal::{Proposal, ProposalKind, ProposalRecord};
pub use rng::ChainRng;
pub use seq::{TokenId, TokenSeq, Vocab};
