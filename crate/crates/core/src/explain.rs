//! One entry point over every explainer family.

use std::sync::Arc;

use crate::aggregate::{explain_aggregate, AggregateOptions, Reduction};
use crate::embedding::Embedder;
use crate::error::{Error, Result};
use crate::gateway::{Backend, GenerationParams};
use crate::perturb::{explain_perturb, MaskStrategy, PerturbOptions, PerturbationRun};
use crate::types::{ExplainerId, GenerationOutput, ImportanceVector, TokenizedPrompt, UnitKind};

#[derive(Debug, Clone)]
pub struct ExplainOptions {
    pub generation: GenerationParams,
    pub parallelism: usize,
    pub mask: MaskStrategy,
    pub reduction: Reduction,
}

impl Default for ExplainOptions {
    fn default() -> Self {
        Self {
            generation: GenerationParams::default(),
            parallelism: 1,
            mask: MaskStrategy::Delete,
            reduction: Reduction::L2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Explanation {
    pub prompt: TokenizedPrompt,
    pub output: GenerationOutput,
    /// Normalized over the prompt units.
    pub scores: ImportanceVector,
    /// Unnormalized impacts, for perturbation methods.
    pub raw: Option<ImportanceVector>,
    pub audit: Option<PerturbationRun>,
    pub warnings: Vec<String>,
}

/// Backend-token units when the backend has a tokenizer, word units otherwise.
pub fn units_for(backend: &dyn Backend, text: &str) -> TokenizedPrompt {
    let kind = if backend.capabilities().tokenizer_available {
        UnitKind::BackendToken
    } else {
        UnitKind::Word
    };
    backend.tokenize_units(text, kind)
}

pub fn explain_prompt(
    prompt: &TokenizedPrompt,
    backend: &dyn Backend,
    embedder: Option<&dyn Embedder>,
    method: ExplainerId,
    opts: &ExplainOptions,
) -> Result<Explanation> {
    method.validate()?;
    if method.family.is_perturbation() {
        let popts = PerturbOptions {
            generation: opts.generation.clone(),
            k: method.k,
            parallelism: opts.parallelism,
            mask: opts.mask.clone(),
        };
        let e = explain_perturb(prompt, backend, method.family, embedder, &popts)?;
        Ok(Explanation {
            prompt: prompt.clone(),
            output: e.run.base.clone(),
            scores: e.normalized,
            raw: Some(e.raw),
            audit: Some(e.run),
            warnings: e.warnings,
        })
    } else {
        let aopts = AggregateOptions {
            generation: opts.generation.clone(),
            m: method.m,
            ig_steps: method.ig_steps,
            reduction: opts.reduction,
            parallelism: opts.parallelism,
        };
        let e = explain_aggregate(prompt, backend, method.family, &aopts)?;
        Ok(Explanation {
            prompt: prompt.clone(),
            output: e.output,
            scores: e.normalized,
            raw: None,
            audit: None,
            warnings: e.warnings,
        })
    }
}

/// Tokenizes `text` for `backend` and explains it.
pub fn explain_text(
    text: &str,
    backend: &dyn Backend,
    embedder: Option<&dyn Embedder>,
    method: ExplainerId,
    opts: &ExplainOptions,
) -> Result<Explanation> {
    if text.trim().is_empty() {
        return Err(Error::validation("prompt is empty"));
    }
    explain_prompt(&units_for(backend, text), backend, embedder, method, opts)
}

/// Anything that assigns normalized scores to prompt units; the evaluation
/// harness is generic over it.
pub trait UnitScorer: Send + Sync {
    fn name(&self) -> String;

    fn scores(&self, prompt: &TokenizedPrompt, backend: &dyn Backend) -> Result<Vec<f64>>;
}

/// A configured explainer family.
#[derive(Clone)]
pub struct MethodExplainer {
    pub method: ExplainerId,
    pub embedder: Option<Arc<dyn Embedder>>,
    pub options: ExplainOptions,
}

impl MethodExplainer {
    pub fn new(method: ExplainerId, embedder: Option<Arc<dyn Embedder>>) -> Self {
        Self {
            method,
            embedder,
            options: ExplainOptions::default(),
        }
    }
}

impl UnitScorer for MethodExplainer {
    fn name(&self) -> String {
        self.method.family.to_string()
    }

    fn scores(&self, prompt: &TokenizedPrompt, backend: &dyn Backend) -> Result<Vec<f64>> {
        let e = explain_prompt(
            prompt,
            backend,
            self.embedder.as_deref(),
            self.method,
            &self.options,
        )?;
        Ok(e.scores.scores)
    }
}

/// Puts all mass, split evenly, on units that are one of the given words.
#[derive(Debug, Clone)]
pub struct KeywordOracle {
    pub keywords: Vec<String>,
}

impl UnitScorer for KeywordOracle {
    fn name(&self) -> String {
        "keyword_oracle".into()
    }

    fn scores(&self, prompt: &TokenizedPrompt, _backend: &dyn Backend) -> Result<Vec<f64>> {
        let raw: Vec<f64> = prompt
            .units()
            .iter()
            .map(|u| {
                let hit = self
                    .keywords
                    .iter()
                    .any(|k| k.eq_ignore_ascii_case(&u.surface));
                if hit {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        crate::types::normalize_over_prompt(&raw, raw.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::HashedBagEmbedder;
    use crate::reference_lm::{RefModel, RefModelConfig, ReferenceBackend};
    use crate::types::{Family, TopK};

    fn backend() -> ReferenceBackend {
        ReferenceBackend::new("ref", RefModel::new(RefModelConfig::default()).unwrap())
    }

    #[test]
    fn every_family_yields_normalized_scores() {
        let b = backend();
        let emb = HashedBagEmbedder::default();
        for family in Family::ALL {
            let e = explain_text(
                "list the capital city of the usa",
                &b,
                Some(&emb),
                ExplainerId::new(family),
                &ExplainOptions::default(),
            )
            .unwrap();
            assert_eq!(e.scores.scores.len(), 7, "{family}");
            let total: f64 = e.scores.scores.iter().sum();
            assert!((total - 1.0).abs() < 1e-9, "{family}: {total}");
        }
    }

    #[test]
    fn full_k_equals_vocabulary_k() {
        let b = backend();
        let text = "tell me about the basketball team";
        let v = b.model().vocab_size();
        let run = |k| {
            explain_text(
                text,
                &b,
                None,
                ExplainerId::new(Family::PerbLog).with_k(k),
                &ExplainOptions::default(),
            )
            .unwrap()
            .raw
            .unwrap()
            .scores
        };
        assert_eq!(run(TopK::Full), run(TopK::Count(v)));
    }

    #[test]
    fn perb_sim_without_embedder_is_a_capability_error() {
        let err = explain_text(
            "a b",
            &backend(),
            None,
            ExplainerId::new(Family::PerbSim),
            &Default::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Capability { .. }));
    }

    #[test]
    fn oracle_puts_mass_on_keywords() {
        let b = backend();
        let p = units_for(&b, "a fun day out");
        let s = KeywordOracle {
            keywords: vec!["fun".into()],
        }
        .scores(&p, &b)
        .unwrap();
        assert_eq!(s, [0.0, 1.0, 0.0, 0.0]);
    }
}
