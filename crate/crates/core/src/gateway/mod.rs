//! Uniform interface over generation backends: the built-in reference LM and
//! remote OpenAI-compatible chat-completion services.

mod limit;
mod openai;
mod retry;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{word_units, GenerationOutput, StepLogprobs, TokenizedPrompt, UnitKind};

pub use limit::InflightLimit;
pub(crate) use openai::{
    http_client as openai_http_client, new_request_id as openai_request_id,
    post_json as openai_post_json,
};
pub use openai::{parse_chat_completion, OpenAiBackend, OpenAiConfig};
pub use retry::{RetryPolicy, TransportError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelCapabilities {
    /// Largest number of per-step log-probabilities the backend returns.
    pub provides_top_k_logprobs: Option<usize>,
    pub provides_full_logits: bool,
    pub provides_gradients: bool,
    pub tokenizer_available: bool,
}

impl ModelCapabilities {
    pub fn text_only() -> Self {
        Self {
            provides_top_k_logprobs: None,
            provides_full_logits: false,
            provides_gradients: false,
            tokenizer_available: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationParams {
    pub max_tokens: usize,
    pub temperature: f64,
    /// Requested per-step log-probability count; `None` asks for the backend maximum.
    pub top_logprobs: Option<usize>,
    pub stop: Option<Vec<String>>,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            max_tokens: 16,
            temperature: 0.0,
            top_logprobs: None,
            stop: None,
        }
    }
}

impl GenerationParams {
    pub fn validate(&self) -> Result<()> {
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(Error::validation(format!(
                "temperature must be a non-negative number, got {}",
                self.temperature
            )));
        }
        if self.top_logprobs == Some(0) {
            return Err(Error::validation("top_logprobs must be at least 1"));
        }
        Ok(())
    }

    /// Effective K given what the backend can deliver.
    pub fn effective_k(&self, caps: &ModelCapabilities) -> Option<usize> {
        match (self.top_logprobs, caps.provides_top_k_logprobs) {
            (_, None) => None,
            (None, Some(cap)) => Some(cap),
            (Some(req), Some(cap)) => Some(req.min(cap)),
        }
    }
}

/// Forward pass plus input-gradient access, used by the white-box explainers.
pub trait DifferentiableLm: Send + Sync {
    fn encode(&self, text: &str) -> Vec<u32>;

    fn embedding_dim(&self) -> usize;

    /// Input embedding rows for a token sequence.
    fn embed_ids(&self, ids: &[u32]) -> Vec<Vec<f64>>;

    /// Log-probability of `target` as the next token after `rows`.
    fn next_log_prob(&self, rows: &[Vec<f64>], target: u32) -> f64;

    /// Same value plus its gradient with respect to every input row.
    fn next_log_prob_grad(&self, rows: &[Vec<f64>], target: u32) -> (f64, Vec<Vec<f64>>);
}

pub trait Backend: Send + Sync {
    fn name(&self) -> &str;

    fn capabilities(&self) -> ModelCapabilities;

    fn generate(&self, prompt: &str, params: &GenerationParams) -> Result<GenerationOutput>;

    /// Backend-token units when a tokenizer is exposed, word units otherwise.
    fn tokenize_units(&self, text: &str, kind: UnitKind) -> TokenizedPrompt {
        let _ = kind;
        TokenizedPrompt::new(text, word_units(text), UnitKind::Word)
            .expect("word segmentation yields valid spans")
    }

    fn differentiable(&self) -> Option<&dyn DifferentiableLm> {
        None
    }
}

/// Stored log-probability of `token` at `step`, or `None` when the token fell
/// outside that step's top-K map.
pub fn logprob_of(output: &GenerationOutput, step: usize, token: &str) -> Result<Option<f64>> {
    let steps = output
        .step_logprobs
        .as_ref()
        .ok_or_else(|| Error::validation("output carries no log-probabilities"))?;
    let map = steps.get(step).ok_or_else(|| {
        Error::validation(format!(
            "step {step} out of range for {} steps",
            steps.len()
        ))
    })?;
    Ok(map.get(token).copied())
}

/// Keeps the `k` most probable entries (ties resolved by token order).
pub fn truncate_top_k(map: &StepLogprobs, k: usize) -> StepLogprobs {
    if map.len() <= k {
        return map.clone();
    }
    let mut entries: Vec<(&String, &f64)> = map.iter().collect();
    entries.sort_by(|a, b| b.1.total_cmp(a.1).then_with(|| a.0.cmp(b.0)));
    entries
        .into_iter()
        .take(k)
        .map(|(t, lp)| (t.clone(), *lp))
        .collect()
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::types::{FinishReason, OutToken};

    fn sample() -> GenerationOutput {
        GenerationOutput {
            tokens: vec![OutToken {
                surface: "x".into(),
                id: None,
            }],
            text: "x".into(),
            step_logprobs: Some(vec![BTreeMap::from([
                ("x".to_string(), -0.2),
                ("y".to_string(), -1.9),
            ])]),
            step_confidence: None,
            finish_reason: FinishReason::Stop,
        }
    }

    #[test]
    fn lookup_present_absent_and_out_of_range() {
        let out = sample();
        assert_eq!(logprob_of(&out, 0, "x").unwrap(), Some(-0.2));
        assert_eq!(logprob_of(&out, 0, "z").unwrap(), None);
        assert!(logprob_of(&out, 1, "x").is_err());
    }

    #[test]
    fn truncation_keeps_most_probable() {
        let map = BTreeMap::from([
            ("a".to_string(), -3.0),
            ("b".to_string(), -0.1),
            ("c".to_string(), -1.0),
        ]);
        let top2 = truncate_top_k(&map, 2);
        assert_eq!(top2.keys().collect::<Vec<_>>(), ["b", "c"]);
        assert_eq!(truncate_top_k(&map, 10), map);
    }

    #[test]
    fn effective_k_respects_capability() {
        let caps = ModelCapabilities {
            provides_top_k_logprobs: Some(20),
            ..ModelCapabilities::text_only()
        };
        let p = GenerationParams {
            top_logprobs: Some(100),
            ..Default::default()
        };
        assert_eq!(p.effective_k(&caps), Some(20));
        assert_eq!(GenerationParams::default().effective_k(&caps), Some(20));
        assert_eq!(p.effective_k(&ModelCapabilities::text_only()), None);
    }

    #[test]
    fn params_validation() {
        let bad = GenerationParams {
            temperature: -1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert!(GenerationParams::default().validate().is_ok());
    }
}
