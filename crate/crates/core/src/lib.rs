//! Advertiser-prior pipeline.
//!
//! Given a user's timestamped activity history and an advertiser catalog,
//! this crate builds prompts describing the user, scores predictor
//! completions against observed conversions, and blends the predicted
//! advertisers into a retrieval stack as an extra candidate channel.
//!
//! The modules are layered bottom-up:
//!
//! - [`domain`]: shared value types with validation.
//! - [`ingestion`]: event-log loading, dedup, and hashed train/eval splits.
//! - [`cohort`]: anchor selection and label extraction.
//! - [`compiler`]: history -> structured prompt context.
//! - [`sid`]: residual-quantized semantic item IDs.
//! - [`prompting`]: template rendering under a token budget.
//! - [`parsing`]: lenient extraction of structured answers.
//! - [`reward`]: rank-match reward with length penalties.
//! - [`predictor`]: mock/remote/baseline prediction backends.
//! - [`retrieval`]: hashed two-tower scorer and candidate blending.
//! - [`evaluation`]: ranking metrics, probes, and ablations.
//! - [`orchestrator`]: checkpointed batch inference over cohorts.
//! - [`synthgen`]: deterministic synthetic data for tests and demos.

pub mod cohort;
pub mod compiler;
pub mod domain;
pub mod evaluation;
pub mod ingestion;
pub mod orchestrator;
pub mod parsing;
pub mod predictor;
pub mod prompting;
pub mod retrieval;
pub mod reward;
pub mod sid;
pub mod synthgen;

/// FNV-1a 64-bit hash. Stable across platforms and releases; used wherever
/// the pipeline needs a reproducible hash (splits, feature buckets, cache
/// keys).
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 14695981039346656037;
    const PRIME: u64 = 1099511628211;
    let mut h = OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(PRIME);
    }
    h
}
