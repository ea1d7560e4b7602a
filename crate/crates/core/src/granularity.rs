//! Rolling unit scores up to words, sentences and named components, and
//! compressing prompts by dropping low-scoring units.

use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use serde::{Deserialize, Serialize};
use unicode_segmentation::UnicodeSegmentation;

use crate::error::{Error, Result};
use crate::perturb::splice_out;
use crate::types::{
    fraction_count, top_fraction, Component, ComponentSpec, Direction, Span, TokenizedPrompt,
};

pub const UNASSIGNED: &str = "(unassigned)";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentScore {
    pub name: String,
    pub score: f64,
}

fn check_spec(scores: &[f64], spec: &ComponentSpec) -> Result<Vec<bool>> {
    let mut assigned = vec![false; scores.len()];
    for c in spec.components() {
        for &m in &c.members {
            *assigned.get_mut(m).ok_or_else(|| {
                Error::validation(format!(
                    "component {:?} references unit {m} of {}",
                    c.name,
                    scores.len()
                ))
            })? = true;
        }
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::validation(format!("score {i} is not finite")));
    }
    Ok(assigned)
}

fn exact(x: f64) -> BigRational {
    BigRational::from_float(x).expect("finite")
}

/// Exact component sums. The last entry is always [`UNASSIGNED`], so the
/// entries add up to the exact total of `scores`.
pub fn rollup_exact(scores: &[f64], spec: &ComponentSpec) -> Result<Vec<(String, BigRational)>> {
    let assigned = check_spec(scores, spec)?;
    let mut out: Vec<(String, BigRational)> = spec
        .components()
        .iter()
        .map(|c| {
            let sum = c
                .members
                .iter()
                .fold(BigRational::zero(), |acc, &m| acc + exact(scores[m]));
            (c.name.clone(), sum)
        })
        .collect();
    let rest = (0..scores.len())
        .filter(|&i| !assigned[i])
        .fold(BigRational::zero(), |acc, i| acc + exact(scores[i]));
    out.push((UNASSIGNED.to_string(), rest));
    Ok(out)
}

/// Component scores as the correctly rounded exact sums of their members.
/// An [`UNASSIGNED`] entry is appended when some units belong to no component.
pub fn rollup(scores: &[f64], spec: &ComponentSpec) -> Result<Vec<ComponentScore>> {
    let assigned = check_spec(scores, spec)?;
    let any_unassigned = assigned.iter().any(|a| !a);
    let mut out: Vec<ComponentScore> = rollup_exact(scores, spec)?
        .into_iter()
        .map(|(name, sum)| ComponentScore {
            name,
            score: sum.to_f64().unwrap_or(f64::NAN),
        })
        .collect();
    if !any_unassigned {
        out.pop();
    }
    Ok(out)
}

/// Exact sum of all scores.
pub fn exact_total(scores: &[f64]) -> BigRational {
    scores
        .iter()
        .fold(BigRational::zero(), |acc, &s| acc + exact(s))
}

/// Groups units by the region of the text that contains their span start.
fn group_by_regions(prompt: &TokenizedPrompt, regions: &[(String, Span)]) -> Result<ComponentSpec> {
    let components = regions
        .iter()
        .map(|(name, span)| Component {
            name: name.clone(),
            members: prompt
                .units()
                .iter()
                .enumerate()
                .filter(|(_, u)| span.contains(u.span.start()))
                .map(|(i, _)| i)
                .collect(),
        })
        .filter(|c| !c.members.is_empty())
        .collect();
    ComponentSpec::new(components, prompt.len())
}

/// One component per Unicode word, named `"{index}:{word}"`.
pub fn word_spans(prompt: &TokenizedPrompt) -> Result<ComponentSpec> {
    let regions: Vec<(String, Span)> = prompt
        .text()
        .unicode_word_indices()
        .enumerate()
        .map(|(i, (s, w))| (format!("{i}:{w}"), Span(s, s + w.len())))
        .collect();
    group_by_regions(prompt, &regions)
}

/// Byte spans of sentences: a sentence ends after `.`, `!` or `?` when
/// followed by whitespace or the end of text. Whitespace-only pieces are dropped.
pub fn sentence_ranges(text: &str) -> Vec<Span> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if matches!(c, '.' | '!' | '?') {
            let end = i + c.len_utf8();
            let boundary = match chars.peek() {
                None => true,
                Some((_, n)) => n.is_whitespace(),
            };
            if boundary {
                out.push(Span(start, end));
                start = end;
            }
        }
    }
    if start < text.len() {
        out.push(Span(start, text.len()));
    }
    out.retain(|s| !text[s.start()..s.end()].trim().is_empty());
    out
}

/// One component per sentence, named `"sentence {k}"` from 1.
pub fn sentence_spans(prompt: &TokenizedPrompt) -> Result<ComponentSpec> {
    let regions: Vec<(String, Span)> = sentence_ranges(prompt.text())
        .into_iter()
        .enumerate()
        .map(|(i, s)| (format!("sentence {}", i + 1), s))
        .collect();
    group_by_regions(prompt, &regions)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Compression {
    pub compressed_prompt: String,
    pub kept_indices: Vec<usize>,
}

/// Keeps the `ceil(q·n)` highest-scoring units in their original order and
/// deletes the rest from the text.
pub fn suggest_compression(
    prompt: &TokenizedPrompt,
    scores: &[f64],
    q: f64,
) -> Result<Compression> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::validation(format!(
            "keep fraction {q} outside (0, 1]"
        )));
    }
    if scores.len() != prompt.len() {
        return Err(Error::validation(format!(
            "{} scores for {} units",
            scores.len(),
            prompt.len()
        )));
    }
    if prompt.is_empty() {
        return Ok(Compression {
            compressed_prompt: prompt.text().to_string(),
            kept_indices: vec![],
        });
    }
    debug_assert_eq!(
        fraction_count(q, scores.len()),
        top_fraction(scores, q, Direction::Top)?.len()
    );
    let kept = top_fraction(scores, q, Direction::Top)?;
    let mut text = prompt.text().to_string();
    // delete back to front so earlier spans keep their offsets
    for (i, unit) in prompt.units().iter().enumerate().rev() {
        if kept.binary_search(&i).is_err() {
            text = splice_out(&text, unit.span);
        }
    }
    Ok(Compression {
        compressed_prompt: text,
        kept_indices: kept,
    })
}
