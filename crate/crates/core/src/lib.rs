//! Language-model fingerprinting with under-trained tokens.
//!
//! * [`tensorio`] reads and writes unembedding matrices and token corpora.
//! * [`detector`] finds under-trained tokens in an unembedding matrix.
//! * [`evalharness`] measures the five fingerprint quality metrics.
//! * [`fingerprint`] draws trigger/target pairs from the flagged tokens.
//! * [`toylm`] is a small transformer used as the model being fingerprinted.
//! * [`verifier`] checks a model, local or behind an HTTP endpoint, for a pair.

pub mod detector;
pub mod evalharness;
pub mod fingerprint;
pub mod tensorio;
pub mod toylm;
pub mod verifier;
