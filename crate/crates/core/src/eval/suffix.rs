use serde::{Deserialize, Serialize};

use super::{spearman, SCHEMA_VERSION};
use crate::error::{Error, Result};
use crate::explain::{units_for, UnitScorer};
use crate::gateway::{Backend, GenerationParams};
use crate::par;
use crate::types::word_count;

pub const DEFAULT_SUFFIX: &str = "Give a short answer";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuffixRecord {
    pub prompt: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub max_suffix_importance: f64,
    pub max_main_importance: f64,
    /// Output words without the suffix minus output words with it.
    pub delta_length: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub schema_version: String,
    pub explainer: String,
    pub model: String,
    pub suffix: String,
    pub n_prompts: usize,
    pub errored: usize,
    pub treatment_rho: f64,
    pub treatment_degenerate: bool,
    pub control_rho: f64,
    pub control_degenerate: bool,
    pub records: Vec<SuffixRecord>,
}

fn measure(
    prompt: &str,
    suffix: &str,
    explainer: &dyn UnitScorer,
    backend: &dyn Backend,
    params: &GenerationParams,
) -> Result<(f64, f64, i64)> {
    let main = prompt.trim_end();
    if main.is_empty() {
        return Err(Error::validation("prompt is empty"));
    }
    let with_suffix = format!("{main} {suffix}");
    let units = units_for(backend, &with_suffix);
    let scores = explainer.scores(&units, backend)?;
    let boundary = main.len() + 1;
    let (mut max_s, mut max_m) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for (u, s) in units.units().iter().zip(&scores) {
        if u.span.start() >= boundary {
            max_s = max_s.max(*s);
        } else {
            max_m = max_m.max(*s);
        }
    }
    if !max_s.is_finite() || !max_m.is_finite() {
        return Err(Error::validation("prompt or suffix has no units"));
    }
    let plain = backend.generate(main, params)?;
    let short = backend.generate(&with_suffix, params)?;
    let delta = word_count(&plain.text) as i64 - word_count(&short.text) as i64;
    Ok((max_s, max_m, delta))
}

/// Correlates the suffix's peak importance (treatment) and the main prompt's
/// peak importance (control) with how much the suffix shortens the output.
pub fn run_suffix_correlation(
    prompts: &[String],
    explainer: &dyn UnitScorer,
    backend: &dyn Backend,
    suffix: &str,
    params: &GenerationParams,
    parallelism: usize,
) -> Result<CorrelationReport> {
    if prompts.len() < 2 {
        return Err(Error::validation("need at least two prompts"));
    }
    if suffix.trim().is_empty() {
        return Err(Error::validation("suffix is empty"));
    }
    let results = par::map_indexed(parallelism, prompts.len(), |i| {
        measure(&prompts[i], suffix, explainer, backend, params)
    });
    let mut records = Vec::with_capacity(prompts.len());
    let (mut xs, mut cs, mut ds) = (vec![], vec![], vec![]);
    for (p, r) in prompts.iter().zip(results) {
        match r {
            Ok((s, m, d)) => {
                xs.push(s);
                cs.push(m);
                ds.push(d as f64);
                records.push(SuffixRecord {
                    prompt: p.clone(),
                    error: None,
                    max_suffix_importance: s,
                    max_main_importance: m,
                    delta_length: d,
                });
            }
            Err(e) => records.push(SuffixRecord {
                prompt: p.clone(),
                error: Some(e.to_string()),
                max_suffix_importance: 0.0,
                max_main_importance: 0.0,
                delta_length: 0,
            }),
        }
    }
    let errored = prompts.len() - xs.len();
    let treatment = spearman(&xs, &ds)?;
    let control = spearman(&cs, &ds)?;
    Ok(CorrelationReport {
        schema_version: SCHEMA_VERSION.to_string(),
        explainer: explainer.name(),
        model: backend.name().to_string(),
        suffix: suffix.to_string(),
        n_prompts: xs.len(),
        errored,
        treatment_rho: treatment.rho,
        treatment_degenerate: treatment.degenerate,
        control_rho: control.rho,
        control_degenerate: control.degenerate,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::synthetic::SuffixAttentionBackend;
    use crate::explain::MethodExplainer;
    use crate::types::{ExplainerId, Family};

    fn prompts() -> Vec<String> {
        [
            "tell me about the basketball team!",
            "what is the capital city of the usa",
            "list some good movie titles!",
            "describe the weather in the city",
            "name a famous team from the usa!",
            "explain how a film is made",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect()
    }

    #[test]
    fn attended_suffix_correlates_with_shortening() {
        let backend = SuffixAttentionBackend::new(DEFAULT_SUFFIX);
        let explainer = MethodExplainer::new(ExplainerId::new(Family::PerbDis), None);
        let r = run_suffix_correlation(
            &prompts(),
            &explainer,
            &backend,
            DEFAULT_SUFFIX,
            &Default::default(),
            1,
        )
        .unwrap();
        assert_eq!(r.n_prompts, 6);
        assert!(r.treatment_rho > r.control_rho, "{r:?}");
        assert!(r.records.iter().all(|x| x.delta_length >= 0));
    }

    #[test]
    fn unattended_suffix_is_degenerate() {
        let backend = SuffixAttentionBackend::new("some other suffix");
        let explainer = MethodExplainer::new(ExplainerId::new(Family::PerbDis), None);
        let r = run_suffix_correlation(
            &prompts(),
            &explainer,
            &backend,
            DEFAULT_SUFFIX,
            &Default::default(),
            1,
        )
        .unwrap();
        assert!(r.records.iter().all(|x| x.delta_length == 0));
        assert!(r.treatment_degenerate && r.control_degenerate);
        assert_eq!(r.treatment_rho, 0.0);
    }
}
