//! Wire types and the synchronous request handlers behind every route. The
//! CLI calls the same functions, so its JSON matches the service byte for byte.

use std::time::Duration;

use promptlens::explain::{explain_text, units_for, ExplainOptions};
use promptlens::gateway::{Backend, GenerationParams};
use promptlens::granularity::{
    rollup, sentence_spans, suggest_compression, word_spans, ComponentScore,
};
use promptlens::types::{ComponentSpec, ExplainerId, Family, FinishReason, Span, TopK};
use promptlens::Error;
use serde::{Deserialize, Serialize};

use crate::registry::{Registry, REFERENCE_MODEL};

#[derive(Debug, Clone, PartialEq)]
pub struct ApiError {
    pub status: u16,
    pub kind: &'static str,
    pub message: String,
    pub retry_after: Option<Duration>,
}

impl ApiError {
    pub fn bad_request(message: impl Into<String>) -> Self {
        Self {
            status: 400,
            kind: "validation",
            message: message.into(),
            retry_after: None,
        }
    }

    pub fn timeout(secs: u64) -> Self {
        Self {
            status: 504,
            kind: "timeout",
            message: format!("explanation did not finish within {secs} s"),
            retry_after: None,
        }
    }

    pub fn body(&self) -> serde_json::Value {
        serde_json::json!({"error": {"kind": self.kind, "message": self.message}})
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let (status, kind, retry_after) = match &e {
            Error::Validation(_) => (400, "validation", None),
            Error::Capability { .. } => (409, "capability", None),
            Error::Backend { retry_after, .. } => (502, "backend", *retry_after),
            Error::Io(_) => (500, "io", None),
        };
        Self {
            status,
            kind,
            message: e.to_string(),
            retry_after,
        }
    }
}

pub type ApiResult<T> = Result<T, ApiError>;

fn default_model() -> String {
    REFERENCE_MODEL.to_string()
}

/// A bare family name or a full explainer id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MethodSpec {
    Family(Family),
    Full(ExplainerId),
}

impl MethodSpec {
    fn id(&self) -> ExplainerId {
        match self {
            MethodSpec::Family(f) => ExplainerId::new(*f),
            MethodSpec::Full(id) => *id,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    #[default]
    Token,
    Word,
    Sentence,
    Component,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RequestParams {
    pub max_tokens: Option<usize>,
    pub temperature: Option<f64>,
    #[serde(alias = "K")]
    pub k: Option<TopK>,
    #[serde(alias = "M")]
    pub m: Option<usize>,
    pub ig_steps: Option<usize>,
    pub parallelism: Option<usize>,
}

impl RequestParams {
    fn generation(&self) -> GenerationParams {
        let d = GenerationParams::default();
        GenerationParams {
            max_tokens: self.max_tokens.unwrap_or(d.max_tokens),
            temperature: self.temperature.unwrap_or(d.temperature),
            ..d
        }
    }

    fn method(&self, spec: &MethodSpec) -> ExplainerId {
        let mut id = spec.id();
        if let Some(k) = self.k {
            id.k = k;
        }
        if let Some(m) = self.m {
            id.m = m;
        }
        if let Some(s) = self.ig_steps {
            id.ig_steps = s;
        }
        id
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentRanges {
    pub name: String,
    pub ranges: Vec<Span>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplainRequest {
    pub prompt: String,
    #[serde(default = "default_model")]
    pub model: String,
    #[serde(default)]
    pub method: Option<MethodSpec>,
    #[serde(default)]
    pub granularity: Granularity,
    #[serde(default)]
    pub components: Option<Vec<ComponentRanges>>,
    #[serde(default)]
    pub params: RequestParams,
    /// Include the per-perturbation outputs.
    #[serde(default)]
    pub audit: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitScore {
    pub text: String,
    pub span: Span,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub unit: usize,
    pub perturbed_prompt: String,
    pub output_text: String,
    pub impact: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainResponse {
    pub prompt: String,
    pub model: String,
    pub output_text: String,
    pub finish_reason: FinishReason,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub method: Option<ExplainerId>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub normalized: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub granularity: Option<Granularity>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub units: Option<Vec<UnitScore>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub components: Option<Vec<ComponentScore>>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub warnings: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub audit: Option<Vec<AuditEntry>>,
}

fn backend(reg: &Registry, name: &str) -> ApiResult<std::sync::Arc<dyn Backend>> {
    reg.backend(name)
        .ok_or_else(|| ApiError::bad_request(format!("unknown model {name:?}")))
}

fn check_prompt(prompt: &str) -> ApiResult<()> {
    if prompt.trim().is_empty() {
        return Err(ApiError::bad_request("prompt is empty"));
    }
    Ok(())
}

/// Handles `POST /api/explain`. `max_parallelism` caps the requested width.
pub fn explain_response(
    reg: &Registry,
    req: &ExplainRequest,
    max_parallelism: usize,
) -> ApiResult<ExplainResponse> {
    check_prompt(&req.prompt)?;
    let backend = backend(reg, &req.model)?;
    let generation = req.params.generation();
    generation.validate()?;
    let Some(spec) = &req.method else {
        let out = backend.generate(&req.prompt, &generation)?;
        return Ok(ExplainResponse {
            prompt: req.prompt.clone(),
            model: req.model.clone(),
            output_text: out.text,
            finish_reason: out.finish_reason,
            method: None,
            normalized: None,
            granularity: None,
            units: None,
            components: None,
            warnings: vec![],
            audit: None,
        });
    };
    let method = req.params.method(spec);
    method.validate()?;
    // resolve the grouping before spending any model calls on it
    let units = units_for(backend.as_ref(), &req.prompt);
    let grouping = match req.granularity {
        Granularity::Token => None,
        Granularity::Word => Some(word_spans(&units)?),
        Granularity::Sentence => Some(sentence_spans(&units)?),
        Granularity::Component => {
            let comps = req.components.as_ref().ok_or_else(|| {
                ApiError::bad_request("granularity \"component\" needs components")
            })?;
            let ranges: Vec<(String, Vec<Span>)> = comps
                .iter()
                .map(|c| (c.name.clone(), c.ranges.clone()))
                .collect();
            for (_, spans) in &ranges {
                if let Some(s) = spans
                    .iter()
                    .find(|s| s.start() > s.end() || s.end() > req.prompt.len())
                {
                    return Err(ApiError::bad_request(format!(
                        "range [{}, {}) outside the prompt",
                        s.start(),
                        s.end()
                    )));
                }
            }
            Some(ComponentSpec::from_byte_ranges(&units, &ranges)?)
        }
    };
    let embedder = reg.embedder();
    let opts = ExplainOptions {
        generation,
        parallelism: req
            .params
            .parallelism
            .unwrap_or(1)
            .clamp(1, max_parallelism.max(1)),
        ..Default::default()
    };
    let e = explain_text(
        &req.prompt,
        backend.as_ref(),
        Some(embedder.as_ref()),
        method,
        &opts,
    )?;
    let scores = &e.scores.scores;
    let components = match &grouping {
        None => vec![],
        Some(g) => rollup(scores, g)?,
    };
    let audit = if req.audit {
        e.audit.as_ref().map(|run| {
            run.per_unit
                .iter()
                .map(|u| AuditEntry {
                    unit: u.unit,
                    perturbed_prompt: u.perturbed_prompt.clone(),
                    output_text: u.output.text.clone(),
                    impact: u.impact,
                })
                .collect()
        })
    } else {
        None
    };
    Ok(ExplainResponse {
        prompt: req.prompt.clone(),
        model: req.model.clone(),
        output_text: e.output.text.clone(),
        finish_reason: e.output.finish_reason,
        method: Some(method),
        normalized: Some(true),
        granularity: Some(req.granularity),
        units: Some(
            e.prompt
                .units()
                .iter()
                .zip(scores)
                .map(|(u, &score)| UnitScore {
                    text: u.surface.clone(),
                    span: u.span,
                    score,
                })
                .collect(),
        ),
        components: Some(components),
        warnings: e.warnings,
        audit,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateRequest {
    pub prompt: String,
    #[serde(default = "default_model")]
    pub model: String,
    #[serde(default)]
    pub params: RequestParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub model: String,
    pub output_text: String,
    pub tokens: Vec<String>,
    pub finish_reason: FinishReason,
}

pub fn generate_response(reg: &Registry, req: &GenerateRequest) -> ApiResult<GenerateResponse> {
    let backend = backend(reg, &req.model)?;
    let params = req.params.generation();
    params.validate()?;
    let out = backend.generate(&req.prompt, &params)?;
    Ok(GenerateResponse {
        model: req.model.clone(),
        tokens: out.tokens.iter().map(|t| t.surface.clone()).collect(),
        output_text: out.text,
        finish_reason: out.finish_reason,
    })
}

fn default_compress_method() -> MethodSpec {
    MethodSpec::Family(Family::PerbDis)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompressRequest {
    pub prompt: String,
    #[serde(default = "default_model")]
    pub model: String,
    #[serde(default = "default_compress_method")]
    pub method: MethodSpec,
    pub keep_fraction: f64,
    #[serde(default)]
    pub params: RequestParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressResponse {
    pub compressed_prompt: String,
    pub kept_indices: Vec<usize>,
    pub method: ExplainerId,
}

pub fn compress_response(
    reg: &Registry,
    req: &CompressRequest,
    max_parallelism: usize,
) -> ApiResult<CompressResponse> {
    if !(req.keep_fraction > 0.0 && req.keep_fraction <= 1.0) {
        return Err(ApiError::bad_request(format!(
            "keep_fraction {} outside (0, 1]",
            req.keep_fraction
        )));
    }
    let explain = ExplainRequest {
        prompt: req.prompt.clone(),
        model: req.model.clone(),
        method: Some(req.method.clone()),
        granularity: Granularity::Token,
        components: None,
        params: req.params.clone(),
        audit: false,
    };
    let resp = explain_response(reg, &explain, max_parallelism)?;
    let backend = backend(reg, &req.model)?;
    let units = units_for(backend.as_ref(), &req.prompt);
    let scores: Vec<f64> = resp
        .units
        .unwrap_or_default()
        .iter()
        .map(|u| u.score)
        .collect();
    let c = suggest_compression(&units, &scores, req.keep_fraction)?;
    Ok(CompressResponse {
        compressed_prompt: c.compressed_prompt,
        kept_indices: c.kept_indices,
        method: resp.method.expect("explained"),
    })
}
