//! Faithfulness evaluation: the sentiment flip-rate test, the suffix
//! correlation study and parameter sweeps.

mod dataset;
mod flip;
mod stats;
mod suffix;
mod sweep;
pub mod synthetic;

pub use dataset::{load_queries, load_wordlist};
pub use flip::{
    build_sentiment_prompt, extract_label, flip_rate, random_word_replace, run_flip_rate,
    ArmRecord, CaseRecord, CaseStatus, FlipRateConfig, FlipRateReport, GuardScope, Label,
    ReplaceOptions, Replacement, SentimentPrompt, SENTIMENT_INSTRUCTION,
};
pub use stats::{spearman, Spearman};
pub use suffix::{run_suffix_correlation, CorrelationReport, SuffixRecord, DEFAULT_SUFFIX};
pub use sweep::{sweep, SweepRow};

pub const SCHEMA_VERSION: &str = "1";

/// Per-case RNG seed, independent of evaluation order.
pub(crate) fn case_seed(seed: u64, case: usize, arm: u64) -> u64 {
    use crate::reference_lm::SplitMix64;
    let a = SplitMix64::new(seed).next_u64();
    let b = SplitMix64::new(a ^ case as u64).next_u64();
    SplitMix64::new(b ^ arm).next_u64()
}
