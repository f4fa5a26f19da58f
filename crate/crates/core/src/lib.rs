//! Diagnostic probing of frozen speech-encoder representations.
//!
//! The crate measures how linearly decodable grammatical and conceptual
//! contrasts are from the hidden states of a speech encoder. Inputs are a
//! corpus of minimal pairs (an acceptable and an unacceptable sentence that
//! differ in a single word) plus a binary store of frame-level hidden states
//! for every utterance and layer. From those it builds pooled sentence
//! vectors, trains L2-regularized logistic-regression probes under
//! pair-grouped k-fold cross-validation and aggregates the results into
//! layer curves, peak tables, positional comparisons and temporal profiles.
//!
//! Modules, bottom-up:
//!
//! - [`corpus`]: minimal-pair data model, manifest I/O, validation, folds.
//! - [`store`]: bit-exact binary container of per-layer frame embeddings.
//! - [`pooling`]: mean, positional and temporal reduction to sentence vectors.
//! - [`probe`]: logistic-regression probe, cross-validation, scores.
//! - [`controls`]: matched random embeddings and chance bands.
//! - [`analysis`]: curves, peaks, temporal profiles, delta embeddings, PCA.
//! - [`campaign`]: the reproducible experiment runner behind the CLI.
//! - [`synthetic`]: planted-signal corpora and stores for testing.

pub mod analysis;
pub mod campaign;
pub mod controls;
pub mod corpus;
mod error;
mod hashing;
pub mod pooling;
pub mod probe;
pub mod store;
pub mod synthetic;

pub use error::{Error, Result};

pub use analysis::{DeltaEmbedding, LayerCurve, PeakReport, Projection, TemporalProfile};
pub use campaign::{CampaignConfig, CampaignSummary};
pub use controls::{MatchedNoiseSpec, MomentMode, ShareBy};
pub use corpus::{
    AlignmentSpan, CorpusManifest, FoldAssignment, LinguisticLevel, MinimalPair, Phenomenon,
    Suite, Utterance,
};
pub use pooling::{Condition, PooledVector, RelativePosition, TemporalGrid};
pub use probe::{PredictionMatrix, ProbeModel, ProbeResult, ScoreReport, TrainConfig};
pub use store::{LayerTensor, Rational, StoreHeader, StoreReader, StoreWriter};
