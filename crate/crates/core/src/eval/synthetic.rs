//! Synthetic tasks with known ground truth, built on the reference model.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gateway::{Backend, GenerationParams, ModelCapabilities};
use crate::reference_lm::{
    KeywordRule, RefModel, RefModelConfig, ReferenceBackend, Vocabulary, EOS_TOKEN, UNK_TOKEN,
};
use crate::types::{FinishReason, GenerationOutput, OutToken};

pub const KEYWORDS: [&str; 8] = [
    "great",
    "fun",
    "excellent",
    "wonderful",
    "amazing",
    "brilliant",
    "superb",
    "delightful",
];

/// Context window of the keyword model; long enough to see a whole
/// sentiment prompt.
pub const KEYWORD_WINDOW: usize = 64;

pub fn keyword_rule() -> KeywordRule {
    KeywordRule {
        keywords: KEYWORDS.iter().map(|s| s.to_string()).collect(),
        present_label: "positive".into(),
        absent_label: "negative".into(),
    }
}

/// Reference model that answers "positive" iff a keyword is in context.
pub fn keyword_model(seed: u64) -> Result<RefModel> {
    RefModel::new(RefModelConfig {
        seed,
        window: KEYWORD_WINDOW,
        keyword_rule: Some(keyword_rule()),
        ..Default::default()
    })
}

pub fn keyword_backend(name: &str, seed: u64) -> Result<ReferenceBackend> {
    Ok(ReferenceBackend::new(name, keyword_model(seed)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeywordCase {
    pub query: String,
    pub keyword: String,
    /// Word index of the keyword within the query.
    pub position: usize,
}

fn is_special(w: &str) -> bool {
    w == UNK_TOKEN || w == EOS_TOKEN
}

/// Built-in vocabulary words, specials excluded.
pub fn default_wordlist() -> Vec<String> {
    Vocabulary::builtin()
        .words()
        .filter(|w| !is_special(w))
        .map(str::to_string)
        .collect()
}

/// `n` queries of 4 to 8 neutral filler words with one keyword inserted at a
/// random position.
pub fn keyword_dataset(n: usize, seed: u64) -> Vec<KeywordCase> {
    let filler: Vec<String> = default_wordlist()
        .into_iter()
        .filter(|w| !KEYWORDS.contains(&w.as_str()) && w != "positive" && w != "negative")
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let len = rng.random_range(4..=8);
            let mut words: Vec<&str> = (0..len)
                .map(|_| filler.choose(&mut rng).expect("non-empty").as_str())
                .collect();
            let keyword = *KEYWORDS.choose(&mut rng).expect("non-empty");
            let position = rng.random_range(0..=len);
            words.insert(position, keyword);
            KeywordCase {
                query: words.join(" "),
                keyword: keyword.to_string(),
                position,
            }
        })
        .collect()
}

/// Mock backend whose answer is 12 words long, or 6 when the prompt ends
/// with `suffix` and the text before the suffix ends in "!".
pub struct SuffixAttentionBackend {
    suffix: String,
}

impl SuffixAttentionBackend {
    pub const FULL_LENGTH: usize = 12;

    pub fn new(suffix: &str) -> Self {
        Self {
            suffix: suffix.to_string(),
        }
    }

    pub fn attended(&self, prompt: &str) -> bool {
        prompt
            .trim_end()
            .strip_suffix(self.suffix.as_str())
            .is_some_and(|main| main.trim_end().ends_with('!'))
    }
}

impl Backend for SuffixAttentionBackend {
    fn name(&self) -> &str {
        "suffix-mock"
    }

    fn capabilities(&self) -> ModelCapabilities {
        ModelCapabilities::text_only()
    }

    fn generate(&self, prompt: &str, params: &GenerationParams) -> Result<GenerationOutput> {
        params.validate()?;
        let len = if self.attended(prompt) {
            Self::FULL_LENGTH / 2
        } else {
            Self::FULL_LENGTH
        };
        let tokens: Vec<OutToken> = (1..=len)
            .map(|i| OutToken {
                surface: format!("t{i}"),
                id: None,
            })
            .collect();
        let text = tokens
            .iter()
            .map(|t| t.surface.as_str())
            .collect::<Vec<_>>()
            .join(" ");
        Ok(GenerationOutput {
            tokens,
            text,
            step_logprobs: None,
            step_confidence: None,
            finish_reason: FinishReason::Stop,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{build_sentiment_prompt, extract_label, Label};

    #[test]
    fn dataset_is_seeded() {
        let a = keyword_dataset(20, 5);
        assert_eq!(a, keyword_dataset(20, 5));
        assert_ne!(a, keyword_dataset(20, 6));
        for c in &a {
            let words: Vec<&str> = c.query.split(' ').collect();
            assert_eq!(words[c.position], c.keyword);
            assert_eq!(words.iter().filter(|w| KEYWORDS.contains(w)).count(), 1);
        }
    }

    #[test]
    fn keyword_decides_the_label() {
        let b = keyword_backend("kw", 0).unwrap();
        let params = GenerationParams::default();
        for c in keyword_dataset(20, 1) {
            let with = build_sentiment_prompt(&c.query).unwrap();
            assert_eq!(
                extract_label(&b.generate(&with.text, &params).unwrap().text),
                Label::Positive
            );
            let without: Vec<&str> = c.query.split(' ').filter(|w| *w != c.keyword).collect();
            let p = build_sentiment_prompt(&without.join(" ")).unwrap();
            assert_eq!(
                extract_label(&b.generate(&p.text, &params).unwrap().text),
                Label::Negative
            );
        }
    }
}
