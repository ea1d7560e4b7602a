//! Black-box token attribution: delete one prompt unit at a time, regenerate,
//! and score how far the output moved.
//!
//! Three impact measures are available:
//!
//! * `perb_log`: mean drop in the log-probability of each baseline output
//!   token. Steps past the end of the perturbed output, and tokens missing
//!   from a K-capped top-log-probability map, contribute zero.
//! * `perb_sim`: one minus the cosine similarity of output embeddings.
//! * `perb_dis`: one minus the share of distinct perturbed-output tokens that
//!   also occur in the baseline output.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::embedding::{cosine, Embedder};
use crate::error::{Error, Result};
use crate::gateway::{logprob_of, Backend, GenerationParams};
use crate::par;
use crate::types::{
    ExplainerId, Family, GenerationOutput, ImportanceVector, Span, TokenizedPrompt, TopK,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind", content = "text")]
pub enum MaskStrategy {
    /// Remove the unit and collapse the surrounding whitespace.
    #[default]
    Delete,
    /// Replace the unit with a fixed placeholder string.
    Placeholder(String),
}

/// Removes `span` from `text`, leaving a single space where whitespace
/// surrounded the deletion.
pub fn splice_out(text: &str, span: Span) -> String {
    let left = text[..span.start()].trim_end();
    let right = text[span.end()..].trim_start();
    let had_space = left.len() < span.start() || text.len() - right.len() > span.end();
    let mut out = String::with_capacity(left.len() + right.len() + 1);
    out.push_str(left);
    if !left.is_empty() && !right.is_empty() && had_space {
        out.push(' ');
    }
    out.push_str(right);
    out
}

pub fn mask_unit(prompt: &TokenizedPrompt, j: usize) -> Result<String> {
    mask_unit_with(prompt, j, &MaskStrategy::Delete)
}

pub fn mask_unit_with(
    prompt: &TokenizedPrompt,
    j: usize,
    strategy: &MaskStrategy,
) -> Result<String> {
    let unit = prompt.units().get(j).ok_or_else(|| {
        Error::validation(format!("unit {j} out of range for {} units", prompt.len()))
    })?;
    let text = prompt.text();
    Ok(match strategy {
        MaskStrategy::Delete => splice_out(text, unit.span),
        MaskStrategy::Placeholder(p) => {
            format!(
                "{}{}{}",
                &text[..unit.span.start()],
                p,
                &text[unit.span.end()..]
            )
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogImpact {
    pub value: f64,
    /// Set when the baseline output was empty and the impact defaulted to zero.
    pub empty_base: bool,
}

/// Mean log-probability drop of the baseline tokens under the perturbed run.
pub fn impact_log(base: &GenerationOutput, pert: &GenerationOutput) -> Result<LogImpact> {
    if base.step_logprobs.is_none() {
        return Err(Error::capability("top_k_logprobs"));
    }
    let m = base.tokens.len();
    if m == 0 {
        return Ok(LogImpact {
            value: 0.0,
            empty_base: true,
        });
    }
    let mut total = 0.0;
    for (i, tok) in base.tokens.iter().enumerate() {
        let base_term = logprob_of(base, i, &tok.surface)?.unwrap_or(0.0);
        let pert_term = if i < pert.tokens.len() && pert.step_logprobs.is_some() {
            logprob_of(pert, i, &tok.surface)?.unwrap_or(0.0)
        } else {
            0.0
        };
        total += base_term - pert_term;
    }
    Ok(LogImpact {
        value: total / m as f64,
        empty_base: false,
    })
}

/// `1 − cosine(embed(pert), embed(base))`, in `[0, 2]`.
/// Identical texts score exactly 0 without consulting the embedder.
pub fn impact_sim(base_text: &str, pert_text: &str, embedder: &dyn Embedder) -> Result<f64> {
    if base_text == pert_text {
        return Ok(0.0);
    }
    let b = embedder.embed(base_text)?;
    let p = embedder.embed(pert_text)?;
    Ok(1.0 - cosine(&p, &b)?)
}

/// `1 − |set(base) ∩ set(pert)| / |set(pert)|`; an empty perturbed output scores 1.
pub fn impact_dis<S: AsRef<str>>(base_tokens: &[S], pert_tokens: &[S]) -> f64 {
    let pert: HashSet<&str> = pert_tokens.iter().map(AsRef::as_ref).collect();
    if pert.is_empty() {
        return 1.0;
    }
    let base: HashSet<&str> = base_tokens.iter().map(AsRef::as_ref).collect();
    let shared = pert.intersection(&base).count();
    1.0 - shared as f64 / pert.len() as f64
}

#[derive(Debug, Clone)]
pub struct PerturbOptions {
    pub generation: GenerationParams,
    pub k: TopK,
    /// Number of perturbed prompts evaluated concurrently.
    pub parallelism: usize,
    pub mask: MaskStrategy,
}

impl Default for PerturbOptions {
    fn default() -> Self {
        Self {
            generation: GenerationParams::default(),
            k: TopK::Full,
            parallelism: 1,
            mask: MaskStrategy::Delete,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbedUnit {
    pub unit: usize,
    pub perturbed_prompt: String,
    pub output: GenerationOutput,
    pub impact: f64,
}

/// Audit record of every perturbation behind an explanation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationRun {
    pub base: GenerationOutput,
    pub per_unit: Vec<PerturbedUnit>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbExplanation {
    pub raw: ImportanceVector,
    pub normalized: ImportanceVector,
    pub run: PerturbationRun,
    pub warnings: Vec<String>,
}

fn check_capabilities(
    family: Family,
    backend: &dyn Backend,
    embedder: Option<&dyn Embedder>,
) -> Result<()> {
    match family {
        Family::PerbLog if backend.capabilities().provides_top_k_logprobs.is_none() => Err(
            Error::capability(format!("top_k_logprobs (backend {})", backend.name())),
        ),
        Family::PerbSim if embedder.is_none() => Err(Error::capability("embedding provider")),
        Family::PerbLog | Family::PerbSim | Family::PerbDis => Ok(()),
        other => Err(Error::validation(format!(
            "{other} is not a perturbation method"
        ))),
    }
}

/// Scores every prompt unit by the impact of deleting it.
pub fn explain_perturb(
    prompt: &TokenizedPrompt,
    backend: &dyn Backend,
    family: Family,
    embedder: Option<&dyn Embedder>,
    opts: &PerturbOptions,
) -> Result<PerturbExplanation> {
    check_capabilities(family, backend, embedder)?;
    if prompt.is_empty() {
        return Err(Error::validation("prompt has no units to perturb"));
    }
    let mut params = opts.generation.clone();
    params.top_logprobs = match family {
        Family::PerbLog => opts.k.as_request(),
        // text-only metrics never look at log-probabilities
        _ => Some(1),
    };
    let base = backend.generate(prompt.text(), &params)?;
    if family == Family::PerbLog && base.step_logprobs.is_none() {
        return Err(Error::capability(format!(
            "top_k_logprobs (backend {} returned none)",
            backend.name()
        )));
    }
    let base_surfaces = base.surfaces();
    let evaluate = |j: usize| -> Result<(PerturbedUnit, bool)> {
        let perturbed_prompt = mask_unit_with(prompt, j, &opts.mask)?;
        let output = backend.generate(&perturbed_prompt, &params)?;
        let (impact, empty_base) = match family {
            Family::PerbLog => {
                let li = impact_log(&base, &output)?;
                (li.value, li.empty_base)
            }
            Family::PerbSim => (
                impact_sim(&base.text, &output.text, embedder.expect("checked above"))?,
                false,
            ),
            _ => (impact_dis(&base_surfaces, &output.surfaces()), false),
        };
        Ok((
            PerturbedUnit {
                unit: j,
                perturbed_prompt,
                output,
                impact,
            },
            empty_base,
        ))
    };
    let results = par::map_indexed(opts.parallelism, prompt.len(), evaluate);
    let mut per_unit = Vec::with_capacity(prompt.len());
    let mut warnings = Vec::new();
    for r in results {
        let (unit, empty_base) = r?;
        if empty_base && warnings.is_empty() {
            warnings.push("baseline output is empty; perb_log impacts default to 0".to_string());
        }
        per_unit.push(unit);
    }
    let scores: Vec<f64> = per_unit.iter().map(|u| u.impact).collect();
    let method = ExplainerId::new(family).with_k(opts.k);
    let normalized = ImportanceVector::normalized(&scores, scores.len(), method)?;
    Ok(PerturbExplanation {
        raw: ImportanceVector::raw(scores, method)?,
        normalized,
        run: PerturbationRun { base, per_unit },
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::embedding::HashedBagEmbedder;
    use crate::types::{word_units, FinishReason, OutToken, UnitKind};

    fn words(text: &str) -> TokenizedPrompt {
        TokenizedPrompt::new(text, word_units(text), UnitKind::Word).unwrap()
    }

    fn output(steps: &[(&str, f64)]) -> GenerationOutput {
        GenerationOutput {
            tokens: steps
                .iter()
                .map(|(s, _)| OutToken {
                    surface: s.to_string(),
                    id: None,
                })
                .collect(),
            text: steps.iter().map(|(s, _)| *s).collect::<Vec<_>>().join(" "),
            step_logprobs: Some(
                steps
                    .iter()
                    .map(|(s, lp)| BTreeMap::from([(s.to_string(), *lp)]))
                    .collect(),
            ),
            step_confidence: None,
            finish_reason: FinishReason::Stop,
        }
    }

    #[test]
    fn masking_examples() {
        assert_eq!(mask_unit(&words("a b c"), 1).unwrap(), "a c");
        assert_eq!(mask_unit(&words("a"), 0).unwrap(), "");
        assert_eq!(
            mask_unit(&words("list the capital city"), 2).unwrap(),
            "list the city"
        );
        assert_eq!(mask_unit(&words("a  b\n c"), 1).unwrap(), "a c");
        assert_eq!(mask_unit(&words("Hi, there"), 0).unwrap(), ", there");
        assert!(mask_unit(&words("a b"), 2).is_err());
        let placeholder = MaskStrategy::Placeholder("_".into());
        assert_eq!(
            mask_unit_with(&words("a b c"), 1, &placeholder).unwrap(),
            "a _ c"
        );
    }

    #[test]
    fn log_impact_identity_is_zero() {
        let base = output(&[("x", -0.1), ("y", -0.7)]);
        assert_eq!(impact_log(&base, &base).unwrap().value, 0.0);
    }

    #[test]
    fn log_impact_shorter_output_rule() {
        let base = output(&[("a", -0.1), ("b", -0.2)]);
        let pert = output(&[("a", -0.5)]);
        let got = impact_log(&base, &pert).unwrap().value;
        // (1/2)·[(−0.1 − (−0.5)) + (−0.2 − 0)]
        assert!((got - 0.1).abs() < 1e-12, "{got}");
    }

    #[test]
    fn log_impact_missing_top_k_rule() {
        let base = output(&[("a", -0.1), ("b", -0.3)]);
        let mut pert = output(&[("a", -0.1), ("c", -0.05)]);
        pert.step_logprobs.as_mut().unwrap()[1].remove("b");
        let got = impact_log(&base, &pert).unwrap().value;
        assert!((got + 0.15).abs() < 1e-12, "{got}");
    }

    #[test]
    fn log_impact_empty_base_flags() {
        let mut base = output(&[]);
        base.step_logprobs = Some(vec![]);
        let li = impact_log(&base, &output(&[("a", -1.0)])).unwrap();
        assert_eq!(li.value, 0.0);
        assert!(li.empty_base);
    }

    #[test]
    fn sim_impact_cases() {
        let e = HashedBagEmbedder::default();
        assert_eq!(impact_sim("the red fox", "the red fox", &e).unwrap(), 0.0);
        assert_eq!(impact_sim("the red fox", "", &e).unwrap(), 1.0);
        assert_eq!(impact_sim("positive", "negative", &e).unwrap(), 1.0);
    }

    #[test]
    fn dis_impact_cases() {
        assert_eq!(impact_dis(&["a", "b", "c"], &["a", "b", "c"]), 0.0);
        assert_eq!(impact_dis(&["a", "b", "c"], &["a", "x"]), 0.5);
        assert_eq!(impact_dis::<&str>(&["a"], &[]), 1.0);
        assert_eq!(impact_dis(&["p", "p"], &["p", "p"]), 0.0);
        assert_eq!(impact_dis(&["a"], &["b"]), 1.0);
    }
}
