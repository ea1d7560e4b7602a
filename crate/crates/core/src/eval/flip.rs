use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{case_seed, SCHEMA_VERSION};
use crate::embedding::{cosine, fnv1a, Embedder};
use crate::error::{Error, Result};
use crate::explain::{units_for, UnitScorer};
use crate::gateway::{Backend, GenerationParams};
use crate::granularity::rollup;
use crate::par;
use crate::types::{top_fraction, ComponentSpec, Direction, Span, TokenizedPrompt};

pub const SENTIMENT_INSTRUCTION: &str = "analyze the sentiment of the previous sentence and respond only with POSITIVE or NEGATIVE. Your answer is";

pub const QUERY: &str = "Query";
pub const INSTRUCTION: &str = "Instruction";

#[derive(Debug, Clone, PartialEq)]
pub struct SentimentPrompt {
    pub text: String,
    pub query_span: Span,
    pub instruction_span: Span,
}

impl SentimentPrompt {
    /// `{Query, Instruction}` over the units of `prompt`, which must be a
    /// tokenization of this prompt's text.
    pub fn components(&self, prompt: &TokenizedPrompt) -> Result<ComponentSpec> {
        ComponentSpec::from_byte_ranges(
            prompt,
            &[
                (QUERY.to_string(), vec![self.query_span]),
                (INSTRUCTION.to_string(), vec![self.instruction_span]),
            ],
        )
    }
}

/// `query` followed by one space and the fixed sentiment instruction.
pub fn build_sentiment_prompt(query: &str) -> Result<SentimentPrompt> {
    if query.trim().is_empty() {
        return Err(Error::validation("query is empty"));
    }
    let text = format!("{query} {SENTIMENT_INSTRUCTION}");
    Ok(SentimentPrompt {
        query_span: Span(0, query.len()),
        instruction_span: Span(query.len() + 1, text.len()),
        text,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Label {
    Positive,
    Negative,
    None,
}

/// First case-insensitive occurrence of "positive" or "negative".
pub fn extract_label(output: &str) -> Label {
    let lower = output.to_lowercase();
    match (lower.find("positive"), lower.find("negative")) {
        (Some(p), Some(n)) if n < p => Label::Negative,
        (Some(_), _) => Label::Positive,
        (None, Some(_)) => Label::Negative,
        (None, None) => Label::None,
    }
}

/// What the similarity guard compares against the original.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuardScope {
    /// The replacement words against the words they replace.
    #[default]
    Replaced,
    /// The whole perturbed prompt against the whole original prompt.
    Prompt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplaceOptions {
    pub threshold: f64,
    pub max_attempts: usize,
    pub scope: GuardScope,
}

impl Default for ReplaceOptions {
    fn default() -> Self {
        Self {
            threshold: 0.7,
            max_attempts: 20,
            scope: GuardScope::Replaced,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Replacement {
    pub text: String,
    pub words: Vec<String>,
    pub similarity: f64,
    pub satisfied: bool,
    pub attempts: usize,
}

fn replace_spans(prompt: &TokenizedPrompt, indices: &[usize], words: &[String]) -> String {
    let mut pairs: Vec<(Span, &str)> = indices
        .iter()
        .zip(words)
        .map(|(&i, w)| (prompt.units()[i].span, w.as_str()))
        .collect();
    pairs.sort_by_key(|(s, _)| s.start());
    let text = prompt.text();
    let mut out = String::with_capacity(text.len());
    let mut at = 0;
    for (span, w) in pairs {
        out.push_str(&text[at..span.start()]);
        out.push_str(w);
        at = span.end();
    }
    out.push_str(&text[at..]);
    out
}

/// Replaces the units at `indices` with random words, redrawing the whole set
/// until the similarity guard passes. After `max_attempts` the least similar
/// attempt is returned with `satisfied == false`.
pub fn random_word_replace(
    prompt: &TokenizedPrompt,
    indices: &[usize],
    wordlist: &[String],
    embedder: &dyn Embedder,
    opts: &ReplaceOptions,
    seed: u64,
) -> Result<Replacement> {
    if wordlist.is_empty() {
        return Err(Error::validation("word list is empty"));
    }
    if let Some(&i) = indices.iter().find(|&&i| i >= prompt.len()) {
        return Err(Error::validation(format!(
            "unit {i} out of range for {} units",
            prompt.len()
        )));
    }
    let reference = match opts.scope {
        GuardScope::Prompt => embedder.embed(prompt.text())?,
        GuardScope::Replaced => {
            let orig: Vec<&str> = indices
                .iter()
                .map(|&i| prompt.units()[i].surface.as_str())
                .collect();
            embedder.embed(&orig.join(" "))?
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<Replacement> = None;
    for attempt in 1..=opts.max_attempts.max(1) {
        let words: Vec<String> = indices
            .iter()
            .map(|_| wordlist.choose(&mut rng).expect("non-empty").clone())
            .collect();
        let text = replace_spans(prompt, indices, &words);
        let probe = match opts.scope {
            GuardScope::Prompt => embedder.embed(&text)?,
            GuardScope::Replaced => embedder.embed(&words.join(" "))?,
        };
        let similarity = cosine(&probe, &reference)?;
        let candidate = Replacement {
            text,
            words,
            similarity,
            satisfied: similarity < opts.threshold,
            attempts: attempt,
        };
        if candidate.satisfied {
            return Ok(candidate);
        }
        if best.as_ref().is_none_or(|b| similarity < b.similarity) {
            best = Some(candidate);
        }
    }
    let mut best = best.expect("at least one attempt");
    best.attempts = opts.max_attempts.max(1);
    Ok(best)
}

/// `flips / evaluated`, 0 when nothing was evaluated.
pub fn flip_rate(flips: usize, evaluated: usize) -> f64 {
    if evaluated == 0 {
        0.0
    } else {
        flips as f64 / evaluated as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlipRateConfig {
    /// Fraction of the winning component's words to perturb.
    pub x: f64,
    pub seed: u64,
    pub replace: ReplaceOptions,
    pub generation: GenerationParams,
    pub parallelism: usize,
}

impl Default for FlipRateConfig {
    fn default() -> Self {
        Self {
            x: 0.2,
            seed: 0,
            replace: ReplaceOptions::default(),
            // labels are read from text only
            generation: GenerationParams {
                top_logprobs: Some(1),
                ..Default::default()
            },
            parallelism: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseStatus {
    Evaluated,
    Filtered,
    Errored,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmRecord {
    pub indices: Vec<usize>,
    pub replaced_words: Vec<String>,
    pub perturbed_prompt: String,
    pub label_after: Label,
    pub flipped: bool,
    pub similarity: f64,
    pub guard_satisfied: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub index: usize,
    pub query: String,
    pub status: CaseStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label_before: Option<Label>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub winner: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub query_score: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub instruction_score: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub treatment: Option<ArmRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub control: Option<ArmRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlipRateReport {
    pub schema_version: String,
    pub explainer: String,
    pub model: String,
    pub x: f64,
    pub seed: u64,
    pub similarity_threshold: f64,
    pub guard_scope: GuardScope,
    pub total_cases: usize,
    pub filtered_no_label: usize,
    pub errored: usize,
    pub evaluated: usize,
    pub treatment_flips: usize,
    pub control_flips: usize,
    pub treatment_flip_rate: f64,
    pub control_flip_rate: f64,
    /// Perturbations whose guard never passed within the attempt budget.
    pub guard_unsatisfied: usize,
    pub cases: Vec<CaseRecord>,
}

struct CaseCtx<'a> {
    explainer: &'a dyn UnitScorer,
    backend: &'a dyn Backend,
    embedder: &'a dyn Embedder,
    wordlist: &'a [String],
    cfg: &'a FlipRateConfig,
}

fn arm(
    ctx: &CaseCtx,
    prompt: &TokenizedPrompt,
    indices: Vec<usize>,
    case: usize,
    before: Label,
) -> Result<ArmRecord> {
    // identical index sets draw identical replacements
    let key: Vec<u8> = indices
        .iter()
        .flat_map(|i| (*i as u64).to_le_bytes())
        .collect();
    let seed = case_seed(ctx.cfg.seed, case, fnv1a(&key));
    let rep = random_word_replace(
        prompt,
        &indices,
        ctx.wordlist,
        ctx.embedder,
        &ctx.cfg.replace,
        seed,
    )?;
    let out = ctx.backend.generate(&rep.text, &ctx.cfg.generation)?;
    let after = extract_label(&out.text);
    Ok(ArmRecord {
        indices,
        replaced_words: rep.words,
        perturbed_prompt: rep.text,
        label_after: after,
        flipped: after != before,
        similarity: rep.similarity,
        guard_satisfied: rep.satisfied,
    })
}

fn run_case(ctx: &CaseCtx, case: usize, query: &str) -> CaseRecord {
    let mut rec = CaseRecord {
        index: case,
        query: query.to_string(),
        status: CaseStatus::Errored,
        error: None,
        label_before: None,
        winner: None,
        query_score: None,
        instruction_score: None,
        treatment: None,
        control: None,
    };
    if let Err(e) = fill_case(ctx, case, query, &mut rec) {
        rec.status = CaseStatus::Errored;
        rec.error = Some(e.to_string());
    }
    rec
}

fn fill_case(ctx: &CaseCtx, case: usize, query: &str, rec: &mut CaseRecord) -> Result<()> {
    let sp = build_sentiment_prompt(query)?;
    let prompt = units_for(ctx.backend, &sp.text);
    let spec = sp.components(&prompt)?;
    let base = ctx.backend.generate(&sp.text, &ctx.cfg.generation)?;
    let before = extract_label(&base.text);
    rec.label_before = Some(before);
    if before == Label::None {
        rec.status = CaseStatus::Filtered;
        return Ok(());
    }
    let scores = ctx.explainer.scores(&prompt, ctx.backend)?;
    let rolled = rollup(&scores, &spec)?;
    let (q, ins) = (rolled[0].score, rolled[1].score);
    rec.query_score = Some(q);
    rec.instruction_score = Some(ins);
    let winner = if ins > q { INSTRUCTION } else { QUERY };
    rec.winner = Some(winner.to_string());
    let members: Vec<usize> = spec
        .get(winner)
        .expect("built above")
        .members
        .iter()
        .copied()
        .collect();
    if members.is_empty() {
        return Err(Error::validation(format!(
            "{winner} has no words to perturb"
        )));
    }
    let sub: Vec<f64> = members.iter().map(|&i| scores[i]).collect();
    let pick = |dir| -> Result<Vec<usize>> {
        Ok(top_fraction(&sub, ctx.cfg.x, dir)?
            .into_iter()
            .map(|j| members[j])
            .collect())
    };
    rec.treatment = Some(arm(ctx, &prompt, pick(Direction::Top)?, case, before)?);
    rec.control = Some(arm(ctx, &prompt, pick(Direction::Bottom)?, case, before)?);
    rec.status = CaseStatus::Evaluated;
    Ok(())
}

/// Treatment perturbs the top `x` of the more important of Query and
/// Instruction; control perturbs the bottom `x` of the same component.
pub fn run_flip_rate(
    queries: &[String],
    explainer: &dyn UnitScorer,
    backend: &dyn Backend,
    embedder: &dyn Embedder,
    wordlist: &[String],
    cfg: &FlipRateConfig,
) -> Result<FlipRateReport> {
    if queries.is_empty() {
        return Err(Error::validation("dataset is empty"));
    }
    if !(cfg.x > 0.0 && cfg.x <= 1.0) {
        return Err(Error::validation(format!("x = {} outside (0, 1]", cfg.x)));
    }
    if wordlist.is_empty() {
        return Err(Error::validation("word list is empty"));
    }
    cfg.generation.validate()?;
    let ctx = CaseCtx {
        explainer,
        backend,
        embedder,
        wordlist,
        cfg,
    };
    let cases = par::map_indexed(cfg.parallelism, queries.len(), |i| {
        run_case(&ctx, i, &queries[i])
    });
    let count = |s| cases.iter().filter(|c| c.status == s).count();
    let evaluated = count(CaseStatus::Evaluated);
    let flips = |f: fn(&CaseRecord) -> &Option<ArmRecord>| {
        cases
            .iter()
            .filter(|c| f(c).as_ref().is_some_and(|a| a.flipped))
            .count()
    };
    let treatment_flips = flips(|c| &c.treatment);
    let control_flips = flips(|c| &c.control);
    let guard_unsatisfied = cases
        .iter()
        .flat_map(|c| [&c.treatment, &c.control])
        .filter(|a| a.as_ref().is_some_and(|a| !a.guard_satisfied))
        .count();
    Ok(FlipRateReport {
        schema_version: SCHEMA_VERSION.to_string(),
        explainer: explainer.name(),
        model: backend.name().to_string(),
        x: cfg.x,
        seed: cfg.seed,
        similarity_threshold: cfg.replace.threshold,
        guard_scope: cfg.replace.scope,
        total_cases: queries.len(),
        filtered_no_label: count(CaseStatus::Filtered),
        errored: count(CaseStatus::Errored),
        evaluated,
        treatment_flips,
        control_flips,
        treatment_flip_rate: flip_rate(treatment_flips, evaluated),
        control_flip_rate: flip_rate(control_flips, evaluated),
        guard_unsatisfied,
        cases,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::HashedBagEmbedder;
    use crate::types::{word_units, UnitKind};

    fn words(text: &str) -> TokenizedPrompt {
        TokenizedPrompt::new(text, word_units(text), UnitKind::Word).unwrap()
    }

    #[test]
    fn sentiment_prompt_layout() {
        let sp = build_sentiment_prompt("It is a fun movie").unwrap();
        assert_eq!(
            sp.text,
            format!("It is a fun movie {SENTIMENT_INSTRUCTION}")
        );
        let p = words(&sp.text);
        let spec = sp.components(&p).unwrap();
        let q = &spec.get(QUERY).unwrap().members;
        let i = &spec.get(INSTRUCTION).unwrap().members;
        assert_eq!(q.len() + i.len(), p.len());
        assert_eq!(q.len(), 5);
        assert!(build_sentiment_prompt("  ").is_err());
    }

    #[test]
    fn labels() {
        assert_eq!(extract_label("Your answer is POSITIVE."), Label::Positive);
        assert_eq!(extract_label("negative, because..."), Label::Negative);
        assert_eq!(extract_label("I cannot determine."), Label::None);
        assert_eq!(extract_label("not positive but negative"), Label::Positive);
    }

    #[test]
    fn flip_rate_worked_example() {
        assert_eq!(flip_rate(150 + 10, 200), 0.8);
        assert_eq!(flip_rate(0, 0), 0.0);
    }

    #[test]
    fn replacement_guard() {
        let e = HashedBagEmbedder::default();
        let p = words("a fun movie");
        let list: Vec<String> = ["great", "boring", "superb"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        // the zero-similarity case below needs buckets disjoint from the prompt's
        for w in &list {
            for o in ["a", "fun", "movie"] {
                assert_ne!(e.bucket(w), e.bucket(o), "{w} / {o}");
            }
        }
        let loose = ReplaceOptions {
            threshold: 2.0,
            ..Default::default()
        };
        let r = random_word_replace(&p, &[1], &list, &e, &loose, 3).unwrap();
        assert_eq!(r.attempts, 1);
        assert!(r.satisfied);
        assert_eq!(
            r,
            random_word_replace(&p, &[1], &list, &e, &loose, 3).unwrap()
        );

        let strict = ReplaceOptions {
            scope: GuardScope::Prompt,
            ..Default::default()
        };
        let all = random_word_replace(&p, &[0, 1, 2], &list, &e, &strict, 9).unwrap();
        assert!(all.satisfied, "{all:?}");
        assert_eq!(all.similarity, 0.0);

        let never = ReplaceOptions {
            threshold: -1.0,
            max_attempts: 5,
            scope: GuardScope::Replaced,
        };
        let r = random_word_replace(&p, &[1], &list, &e, &never, 1).unwrap();
        assert!(!r.satisfied);
        assert_eq!(r.attempts, 5);
    }
}
