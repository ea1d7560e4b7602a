//! Shared domain types: tokenized prompts, generation outputs, importance
//! vectors and component specifications, plus the score arithmetic every
//! explainer relies on.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Half-open byte range `[start, end)` into a prompt. Serialized as `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span(pub usize, pub usize);

impl Span {
    pub fn start(&self) -> usize {
        self.0
    }

    pub fn end(&self) -> usize {
        self.1
    }

    pub fn contains(&self, offset: usize) -> bool {
        self.0 <= offset && offset < self.1
    }

    pub fn len(&self) -> usize {
        self.1 - self.0
    }

    pub fn is_empty(&self) -> bool {
        self.1 == self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UnitKind {
    BackendToken,
    Word,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Unit {
    pub surface: String,
    pub span: Span,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<u32>,
}

/// Prompt text plus the ordered units that importance scores align to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedPrompt {
    text: String,
    units: Vec<Unit>,
    unit_kind: UnitKind,
}

impl TokenizedPrompt {
    /// Builds a prompt after checking that spans are sorted, disjoint, in
    /// bounds, and that every surface is the exact slice it points at.
    pub fn new(text: impl Into<String>, units: Vec<Unit>, unit_kind: UnitKind) -> Result<Self> {
        let text = text.into();
        let mut prev_end = 0usize;
        for (i, u) in units.iter().enumerate() {
            let Span(s, e) = u.span;
            if s >= e || e > text.len() {
                return Err(Error::validation(format!(
                    "unit {i} span [{s},{e}) is empty or outside the text"
                )));
            }
            if s < prev_end {
                return Err(Error::validation(format!(
                    "unit {i} overlaps its predecessor"
                )));
            }
            if !text.is_char_boundary(s) || !text.is_char_boundary(e) || text[s..e] != u.surface {
                return Err(Error::validation(format!(
                    "unit {i} surface {:?} does not match its span",
                    u.surface
                )));
            }
            prev_end = e;
        }
        Ok(Self {
            text,
            units,
            unit_kind,
        })
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn units(&self) -> &[Unit] {
        &self.units
    }

    pub fn unit_kind(&self) -> UnitKind {
        self.unit_kind
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    /// Text between unit `i-1` and unit `i` (or before the first / after the last).
    pub fn gap_before(&self, i: usize) -> &str {
        let start = if i == 0 {
            0
        } else {
            self.units[i - 1].span.end()
        };
        let end = self
            .units
            .get(i)
            .map(|u| u.span.start())
            .unwrap_or(self.text.len());
        &self.text[start..end]
    }

    /// Index of the unit whose span contains `offset`.
    pub fn unit_at(&self, offset: usize) -> Option<usize> {
        self.units.iter().position(|u| u.span.contains(offset))
    }
}

/// Segments text into Unicode words; punctuation and whitespace belong to no unit.
pub fn word_units(text: &str) -> Vec<Unit> {
    use unicode_segmentation::UnicodeSegmentation;
    text.unicode_word_indices()
        .map(|(start, w)| Unit {
            surface: w.to_string(),
            span: Span(start, start + w.len()),
            id: None,
        })
        .collect()
}

/// Number of Unicode words in `text`.
pub fn word_count(text: &str) -> usize {
    use unicode_segmentation::UnicodeSegmentation;
    text.unicode_words().count()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutToken {
    pub surface: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinishReason {
    Stop,
    Length,
    Other,
}

/// Per-step map from token surface to natural-log probability.
pub type StepLogprobs = BTreeMap<String, f64>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationOutput {
    pub tokens: Vec<OutToken>,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_logprobs: Option<Vec<StepLogprobs>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_confidence: Option<Vec<f64>>,
    pub finish_reason: FinishReason,
}

impl GenerationOutput {
    pub fn empty(finish_reason: FinishReason) -> Self {
        Self {
            tokens: Vec::new(),
            text: String::new(),
            step_logprobs: None,
            step_confidence: None,
            finish_reason,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn surfaces(&self) -> Vec<&str> {
        self.tokens.iter().map(|t| t.surface.as_str()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(steps) = &self.step_logprobs {
            if steps.len() != self.tokens.len() {
                return Err(Error::validation(format!(
                    "{} logprob steps for {} tokens",
                    steps.len(),
                    self.tokens.len()
                )));
            }
            if steps
                .iter()
                .flat_map(|m| m.values())
                .any(|&lp| lp.is_nan() || lp > 0.0)
            {
                return Err(Error::validation("stored logprob above zero or NaN"));
            }
        }
        if let Some(conf) = &self.step_confidence {
            if conf.len() != self.tokens.len() {
                return Err(Error::validation(
                    "confidence length differs from token count",
                ));
            }
            for (i, &c) in conf.iter().enumerate() {
                if !(0.0..=1.0).contains(&c) {
                    return Err(Error::validation(format!("confidence {c} at step {i}")));
                }
                let stored = self
                    .step_logprobs
                    .as_ref()
                    .and_then(|s| s[i].get(&self.tokens[i].surface));
                if let Some(lp) = stored {
                    if (lp.exp() - c).abs() > 1e-6 {
                        return Err(Error::validation(format!(
                            "confidence {c} at step {i} disagrees with logprob {lp}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    PerbLog,
    PerbSim,
    PerbDis,
    AggEqu,
    AggConf,
}

impl Family {
    pub const ALL: [Family; 5] = [
        Family::PerbLog,
        Family::PerbSim,
        Family::PerbDis,
        Family::AggEqu,
        Family::AggConf,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Family::PerbLog => "perb_log",
            Family::PerbSim => "perb_sim",
            Family::PerbDis => "perb_dis",
            Family::AggEqu => "agg_equ",
            Family::AggConf => "agg_conf",
        }
    }

    pub fn is_perturbation(&self) -> bool {
        matches!(self, Family::PerbLog | Family::PerbSim | Family::PerbDis)
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| Error::validation(format!("unknown explainer family {s:?}")))
    }
}

/// How many top log-probabilities per step the explainer may consult.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TopK {
    Count(usize),
    Full,
}

impl TopK {
    /// Count to request from a backend; `None` means the backend's maximum.
    pub fn as_request(&self) -> Option<usize> {
        match self {
            TopK::Count(k) => Some(*k),
            TopK::Full => None,
        }
    }
}

impl fmt::Display for TopK {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TopK::Count(k) => write!(f, "{k}"),
            TopK::Full => f.write_str("full"),
        }
    }
}

impl std::str::FromStr for TopK {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("full") {
            return Ok(TopK::Full);
        }
        match s.parse::<usize>() {
            Ok(k) if k >= 1 => Ok(TopK::Count(k)),
            _ => Err(Error::validation(format!(
                "K must be a positive integer or \"full\", got {s:?}"
            ))),
        }
    }
}

impl Serialize for TopK {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            TopK::Count(k) => s.serialize_u64(*k as u64),
            TopK::Full => s.serialize_str("full"),
        }
    }
}

impl<'de> Deserialize<'de> for TopK {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(u64),
            S(String),
        }
        match Raw::deserialize(d)? {
            Raw::N(0) => Err(serde::de::Error::custom("K must be at least 1")),
            Raw::N(n) => Ok(TopK::Count(n as usize)),
            Raw::S(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

pub const DEFAULT_M: usize = 5;
pub const DEFAULT_IG_STEPS: usize = 32;

/// Explainer family plus its tuning parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ExplainerId {
    pub family: Family,
    #[serde(default = "default_m")]
    pub m: usize,
    #[serde(default = "default_k")]
    pub k: TopK,
    #[serde(default = "default_ig_steps")]
    pub ig_steps: usize,
}

fn default_m() -> usize {
    DEFAULT_M
}

fn default_k() -> TopK {
    TopK::Full
}

fn default_ig_steps() -> usize {
    DEFAULT_IG_STEPS
}

impl ExplainerId {
    pub fn new(family: Family) -> Self {
        Self {
            family,
            m: DEFAULT_M,
            k: TopK::Full,
            ig_steps: DEFAULT_IG_STEPS,
        }
    }

    pub fn with_m(mut self, m: usize) -> Self {
        self.m = m;
        self
    }

    pub fn with_k(mut self, k: TopK) -> Self {
        self.k = k;
        self
    }

    pub fn with_ig_steps(mut self, steps: usize) -> Self {
        self.ig_steps = steps;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::validation("M must be at least 1"));
        }
        if self.k == TopK::Count(0) {
            return Err(Error::validation("K must be at least 1"));
        }
        if self.ig_steps == 0 {
            return Err(Error::validation("ig_steps must be at least 1"));
        }
        Ok(())
    }
}

/// Per-unit scores aligned 1:1 with a prompt's units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceVector {
    pub scores: Vec<f64>,
    pub method: ExplainerId,
    pub normalized: bool,
}

impl ImportanceVector {
    pub fn raw(scores: Vec<f64>, method: ExplainerId) -> Result<Self> {
        check_finite(&scores)?;
        Ok(Self {
            scores,
            method,
            normalized: false,
        })
    }

    /// Normalized view of the first `prompt_len` entries of `raw`.
    pub fn normalized(raw: &[f64], prompt_len: usize, method: ExplainerId) -> Result<Self> {
        Ok(Self {
            scores: normalize_over_prompt(raw, prompt_len)?,
            method,
            normalized: true,
        })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

fn check_finite(scores: &[f64]) -> Result<()> {
    match scores.iter().position(|s| !s.is_finite()) {
        Some(i) => Err(Error::validation(format!("score {i} is not finite"))),
        None => Ok(()),
    }
}

/// Drops trailing generated-token entries and rescales the first `prompt_len`
/// scores to sum to one. A zero sum yields the uniform vector.
pub fn normalize_over_prompt(raw: &[f64], prompt_len: usize) -> Result<Vec<f64>> {
    if prompt_len == 0 {
        return Err(Error::validation("need at least one prompt-unit score"));
    }
    if raw.len() < prompt_len {
        return Err(Error::validation(format!(
            "{} scores for {prompt_len} prompt units",
            raw.len()
        )));
    }
    check_finite(raw)?;
    let prompt = &raw[..prompt_len];
    let total: f64 = prompt.iter().sum();
    if total == 0.0 {
        return Ok(vec![1.0 / prompt_len as f64; prompt_len]);
    }
    Ok(prompt.iter().map(|s| s / total).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Top,
    Bottom,
}

/// Number of units selected by a fraction `x` of `n`: `ceil(x·n)`, at least one.
///
/// A 1e-9 slack absorbs binary representation error, so that `0.7 * 10`
/// selects 7 units rather than 8.
pub fn fraction_count(x: f64, n: usize) -> usize {
    let c = (x * n as f64 - 1e-9).ceil() as usize;
    c.clamp(1, n.max(1))
}

/// Indices (ascending) of the `ceil(x·n)` highest- or lowest-scoring units.
/// Ties go to the lower index.
pub fn top_fraction(scores: &[f64], x: f64, direction: Direction) -> Result<Vec<usize>> {
    if scores.is_empty() {
        return Err(Error::validation(
            "cannot select from an empty score vector",
        ));
    }
    if !(x > 0.0 && x <= 1.0) {
        return Err(Error::validation(format!("fraction {x} outside (0, 1]")));
    }
    check_finite(scores)?;
    let count = fraction_count(x, scores.len());
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        let by_score = match direction {
            Direction::Top => scores[b].total_cmp(&scores[a]),
            Direction::Bottom => scores[a].total_cmp(&scores[b]),
        };
        by_score.then(a.cmp(&b))
    });
    let mut picked: Vec<usize> = order.into_iter().take(count).collect();
    picked.sort_unstable();
    Ok(picked)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Component {
    pub name: String,
    pub members: BTreeSet<usize>,
}

/// Named, pairwise-disjoint groups of prompt units.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ComponentSpec {
    components: Vec<Component>,
}

impl ComponentSpec {
    pub fn new(components: Vec<Component>, n_units: usize) -> Result<Self> {
        let mut names = HashSet::new();
        let mut owner: Vec<Option<usize>> = vec![None; n_units];
        for (ci, c) in components.iter().enumerate() {
            if !names.insert(c.name.as_str()) {
                return Err(Error::validation(format!(
                    "duplicate component name {:?}",
                    c.name
                )));
            }
            for &m in &c.members {
                if m >= n_units {
                    return Err(Error::validation(format!(
                        "component {:?} references unit {m} of {n_units}",
                        c.name
                    )));
                }
                if let Some(prev) = owner[m] {
                    return Err(Error::validation(format!(
                        "components {:?} and {:?} overlap at unit {m}",
                        components[prev].name, c.name
                    )));
                }
                owner[m] = Some(ci);
            }
        }
        Ok(Self { components })
    }

    /// Groups units by byte ranges: a unit joins the component whose ranges
    /// contain its span start.
    pub fn from_byte_ranges(
        prompt: &TokenizedPrompt,
        ranges: &[(String, Vec<Span>)],
    ) -> Result<Self> {
        for (i, (_, a)) in ranges.iter().enumerate() {
            for (_, b) in &ranges[i + 1..] {
                for x in a {
                    for y in b {
                        if x.start() < y.end() && y.start() < x.end() {
                            return Err(Error::validation(format!(
                                "component ranges [{},{}) and [{},{}) overlap",
                                x.0, x.1, y.0, y.1
                            )));
                        }
                    }
                }
            }
        }
        let components = ranges
            .iter()
            .map(|(name, spans)| Component {
                name: name.clone(),
                members: prompt
                    .units()
                    .iter()
                    .enumerate()
                    .filter(|(_, u)| spans.iter().any(|s| s.contains(u.span.start())))
                    .map(|(i, _)| i)
                    .collect(),
            })
            .collect();
        Self::new(components, prompt.len())
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn get(&self, name: &str) -> Option<&Component> {
        self.components.iter().find(|c| c.name == name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_reproduces_worked_column() {
        // info, about, US, basketball, team, then one generated token
        let raw = [0.16, 0.10, 0.25, 0.25, 0.10, 0.14];
        let got = normalize_over_prompt(&raw, 5).unwrap();
        let expected = [0.19, 0.12, 0.29, 0.29, 0.12];
        for (g, e) in got.iter().zip(expected) {
            assert!(
                ((g * 100.0).round() / 100.0 - e).abs() <= 0.005,
                "{g} vs {e}"
            );
        }
    }

    #[test]
    fn normalization_edge_cases() {
        assert_eq!(normalize_over_prompt(&[0.2; 5], 5).unwrap(), vec![0.2; 5]);
        assert_eq!(
            normalize_over_prompt(&[0.0; 3], 3).unwrap(),
            vec![1.0 / 3.0; 3]
        );
        assert!(normalize_over_prompt(&[1.0, f64::NAN], 2).is_err());
        assert!(normalize_over_prompt(&[1.0], 0).is_err());
    }

    #[test]
    fn top_fraction_examples() {
        // ceil(0.34 * 3) = 2
        assert_eq!(
            top_fraction(&[0.1, 0.5, 0.4], 0.34, Direction::Top).unwrap(),
            vec![1, 2]
        );
        assert_eq!(
            top_fraction(&[0.3, 0.3, 0.3], 0.34, Direction::Top).unwrap(),
            vec![0, 1]
        );
        assert_eq!(
            top_fraction(&[1.0], 1.0, Direction::Bottom).unwrap(),
            vec![0]
        );
        assert_eq!(
            top_fraction(&[0.1, 0.5, 0.4], 0.34, Direction::Bottom).unwrap(),
            vec![0, 2]
        );
        assert!(top_fraction(&[1.0], 0.0, Direction::Top).is_err());
        assert!(top_fraction(&[1.0], 1.5, Direction::Top).is_err());
        assert!(top_fraction(&[], 0.5, Direction::Top).is_err());
    }

    #[test]
    fn fraction_count_absorbs_representation_error() {
        assert_eq!(fraction_count(0.7, 10), 7);
        assert_eq!(fraction_count(0.2, 5), 1);
        assert_eq!(fraction_count(0.01, 3), 1);
        assert_eq!(fraction_count(1.0, 4), 4);
    }

    #[test]
    fn tokenized_prompt_rejects_bad_spans() {
        let units = word_units("list the capital");
        assert_eq!(
            units.iter().map(|u| u.surface.as_str()).collect::<Vec<_>>(),
            ["list", "the", "capital"]
        );
        assert_eq!(units[2].span, Span(9, 16));
        assert!(TokenizedPrompt::new("list the capital", units.clone(), UnitKind::Word).is_ok());
        let mut swapped = units.clone();
        swapped.swap(0, 1);
        assert!(TokenizedPrompt::new("list the capital", swapped, UnitKind::Word).is_err());
        let mut wrong = units;
        wrong[0].surface = "lost".into();
        assert!(TokenizedPrompt::new("list the capital", wrong, UnitKind::Word).is_err());
        assert!(word_units("").is_empty());
    }

    #[test]
    fn component_spec_rejects_overlap_and_duplicates() {
        let c = |name: &str, m: &[usize]| Component {
            name: name.into(),
            members: m.iter().copied().collect(),
        };
        assert!(ComponentSpec::new(vec![c("a", &[0, 1]), c("b", &[2])], 3).is_ok());
        assert!(ComponentSpec::new(vec![c("a", &[0, 1]), c("b", &[1])], 3).is_err());
        assert!(ComponentSpec::new(vec![c("a", &[0]), c("a", &[1])], 3).is_err());
        assert!(ComponentSpec::new(vec![c("a", &[3])], 3).is_err());
    }

    #[test]
    fn top_k_wire_format() {
        let id = ExplainerId::new(Family::PerbLog).with_k(TopK::Count(20));
        let json = serde_json::to_string(&id).unwrap();
        assert_eq!(json, r#"{"family":"perb_log","m":5,"k":20,"ig_steps":32}"#);
        let full: ExplainerId = serde_json::from_str(r#"{"family":"agg_equ","k":"full"}"#).unwrap();
        assert_eq!(full.k, TopK::Full);
        assert!(serde_json::from_str::<ExplainerId>(r#"{"family":"agg_equ","k":0}"#).is_err());
    }

    #[test]
    fn generation_output_validation() {
        let mut out = GenerationOutput {
            tokens: vec![OutToken {
                surface: "a".into(),
                id: None,
            }],
            text: "a".into(),
            step_logprobs: Some(vec![BTreeMap::from([("a".to_string(), -0.5)])]),
            step_confidence: Some(vec![(-0.5f64).exp()]),
            finish_reason: FinishReason::Stop,
        };
        assert!(out.validate().is_ok());
        out.step_confidence = Some(vec![0.9]);
        assert!(out.validate().is_err());
        out.step_confidence = None;
        out.step_logprobs = Some(vec![BTreeMap::from([("a".to_string(), 0.1)])]);
        assert!(out.validate().is_err());
    }
}
