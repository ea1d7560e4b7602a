//! A tiny deterministic language model with analytic input gradients.
//!
//! Architecture: the context vector `c` is the mean of the input embeddings of
//! the last `min(w, t)` tokens; logits are `U · tanh(A·c + b)`. An empty
//! context gives `c = 0`.
//!
//! Parameters come from a SplitMix64 stream seeded with the model seed and are
//! drawn in the order `E` (row-major, V×d), `A` (row-major, d×d), `b` (d),
//! `U` (row-major, V×d). Each draw maps the top 53 bits of the 64-bit output
//! to `[0, 1)`, shifts to `[-0.5, 0.5)` and divides by `√d`.
//!
//! An optional [`KeywordRule`] overwrites hidden channel 0 so that the next
//! token is one label when any rule keyword is inside the context window and
//! another label otherwise. Everything else about the model stays random.

use std::collections::HashMap;
use std::sync::Arc;

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gateway::{Backend, DifferentiableLm, GenerationParams, ModelCapabilities};
use crate::types::{
    word_units, FinishReason, GenerationOutput, OutToken, StepLogprobs, TokenizedPrompt, Unit,
    UnitKind,
};

pub const UNK: u32 = 0;
pub const EOS: u32 = 1;
pub const UNK_TOKEN: &str = "<unk>";
pub const EOS_TOKEN: &str = "<eos>";

const BUILTIN_VOCAB: &str = include_str!("../assets/vocab.txt");

const KEYWORD_GAIN: f64 = 1000.0;
const KEYWORD_THRESHOLD: f64 = 1.0;
const LABEL_WEIGHT: f64 = 20.0;

/// SplitMix64 generator (Steele, Lea & Flood constants).
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[-0.5, 0.5)`.
    pub fn next_centered(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64) - 0.5
    }
}

#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// The shipped vocabulary: `<unk>`, `<eos>`, then about a thousand common English words.
    pub fn builtin() -> Self {
        Self::from_lines(BUILTIN_VOCAB).expect("bundled vocabulary is well-formed")
    }

    /// One token per line. The first two lines must be `<unk>` and `<eos>`.
    pub fn from_lines(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect();
        if tokens.len() < 2 || tokens[0] != UNK_TOKEN || tokens[1] != EOS_TOKEN {
            return Err(Error::validation(
                "vocabulary must start with <unk> and <eos>",
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::validation(format!(
                    "duplicate vocabulary entry {t:?}"
                )));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Case-insensitive lookup; unknown words map to `<unk>`.
    pub fn id(&self, word: &str) -> u32 {
        self.index.get(&word.to_lowercase()).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(&word.to_lowercase())
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    /// Ordinary words, without the special tokens.
    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.tokens[2..].iter().map(String::as_str)
    }
}

/// Planted rule: any keyword in the context window forces `present_label`,
/// otherwise `absent_label` is emitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeywordRule {
    pub keywords: Vec<String>,
    pub present_label: String,
    pub absent_label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefModelConfig {
    pub seed: u64,
    pub dim: usize,
    pub window: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keyword_rule: Option<KeywordRule>,
}

impl Default for RefModelConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dim: 16,
            window: 4,
            keyword_rule: None,
        }
    }
}

/// Model metadata as published alongside the vocabulary asset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefModelMetadata {
    pub seed: u64,
    pub d: usize,
    pub w: usize,
    #[serde(rename = "V")]
    pub v: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keyword_rule: Option<KeywordRule>,
}

#[derive(Debug, Clone)]
pub struct RefModel {
    vocab: Vocabulary,
    config: RefModelConfig,
    emb: Vec<f64>,
    a: Vec<f64>,
    b: Vec<f64>,
    u: Vec<f64>,
}

/// Greedy (or sampled) continuation with the full next-token distribution per step.
#[derive(Debug, Clone, PartialEq)]
pub struct RefGeneration {
    pub ids: Vec<u32>,
    pub step_log_probs: Vec<Vec<f64>>,
    pub finish_reason: FinishReason,
}

impl RefModel {
    pub fn new(config: RefModelConfig) -> Result<Self> {
        Self::with_vocabulary(Vocabulary::builtin(), config)
    }

    pub fn with_vocabulary(vocab: Vocabulary, config: RefModelConfig) -> Result<Self> {
        if config.dim == 0 || config.window == 0 {
            return Err(Error::validation(
                "embedding dim and window must be positive",
            ));
        }
        let (v, d) = (vocab.len(), config.dim);
        let scale = 1.0 / (d as f64).sqrt();
        let mut rng = SplitMix64::new(config.seed);
        let mut draw =
            |n: usize| -> Vec<f64> { (0..n).map(|_| rng.next_centered() * scale).collect() };
        let emb = draw(v * d);
        let a = draw(d * d);
        let b = draw(d);
        let u = draw(v * d);
        let mut model = Self {
            vocab,
            config,
            emb,
            a,
            b,
            u,
        };
        if let Some(rule) = model.config.keyword_rule.clone() {
            model.plant(&rule)?;
        }
        Ok(model)
    }

    fn plant(&mut self, rule: &KeywordRule) -> Result<()> {
        let d = self.config.dim;
        let lookup = |w: &str| -> Result<u32> {
            if self.vocab.contains(w) {
                Ok(self.vocab.id(w))
            } else {
                Err(Error::validation(format!(
                    "keyword rule word {w:?} not in vocabulary"
                )))
            }
        };
        let keywords = rule
            .keywords
            .iter()
            .map(|k| lookup(k))
            .collect::<Result<Vec<_>>>()?;
        let present = lookup(&rule.present_label)?;
        let absent = lookup(&rule.absent_label)?;
        for tok in 0..self.vocab.len() {
            self.emb[tok * d] = 0.0;
            self.u[tok * d] = 0.0;
        }
        for k in keywords {
            self.emb[k as usize * d] = 1.0;
        }
        for j in 0..d {
            self.a[j] = 0.0;
            self.a[j * d] = 0.0;
        }
        self.a[0] = KEYWORD_GAIN;
        self.b[0] = -KEYWORD_THRESHOLD;
        self.u[present as usize * d] = LABEL_WEIGHT;
        self.u[absent as usize * d] = -LABEL_WEIGHT;
        Ok(())
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn config(&self) -> &RefModelConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn window(&self) -> usize {
        self.config.window
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn metadata(&self) -> RefModelMetadata {
        RefModelMetadata {
            seed: self.config.seed,
            d: self.config.dim,
            w: self.config.window,
            v: self.vocab.len(),
            keyword_rule: self.config.keyword_rule.clone(),
        }
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        word_units(text)
            .iter()
            .map(|u| self.vocab.id(&u.surface))
            .collect()
    }

    pub fn embedding(&self, id: u32) -> &[f64] {
        let d = self.config.dim;
        let id = if (id as usize) < self.vocab.len() {
            id
        } else {
            UNK
        };
        &self.emb[id as usize * d..(id as usize + 1) * d]
    }

    pub fn embed_ids(&self, ids: &[u32]) -> Vec<Vec<f64>> {
        ids.iter().map(|&i| self.embedding(i).to_vec()).collect()
    }

    /// Mean of the last `min(w, len)` rows and how many rows it covers.
    fn context(&self, rows: &[Vec<f64>]) -> (Vec<f64>, usize) {
        let d = self.config.dim;
        let l = rows.len().min(self.config.window);
        let mut c = vec![0.0; d];
        if l == 0 {
            return (c, 0);
        }
        for row in &rows[rows.len() - l..] {
            for (ci, ri) in c.iter_mut().zip(row) {
                *ci += ri;
            }
        }
        for ci in &mut c {
            *ci /= l as f64;
        }
        (c, l)
    }

    fn hidden(&self, c: &[f64]) -> Vec<f64> {
        let d = self.config.dim;
        (0..d)
            .map(|i| {
                let z: f64 = self.b[i]
                    + self.a[i * d..(i + 1) * d]
                        .iter()
                        .zip(c)
                        .map(|(a, c)| a * c)
                        .sum::<f64>();
                z.tanh()
            })
            .collect()
    }

    fn logits_from_hidden(&self, h: &[f64]) -> Vec<f64> {
        let d = self.config.dim;
        self.u
            .chunks_exact(d)
            .map(|row| row.iter().zip(h).map(|(u, h)| u * h).sum())
            .collect()
    }

    /// Next-token logits given the embedding rows of the full input so far.
    pub fn logits_from_rows(&self, rows: &[Vec<f64>]) -> Vec<f64> {
        let (c, _) = self.context(rows);
        self.logits_from_hidden(&self.hidden(&c))
    }

    /// Logits for the token following `ids[..t]`.
    pub fn forward(&self, ids: &[u32], t: usize) -> Result<Vec<f64>> {
        if t > ids.len() {
            return Err(Error::validation(format!(
                "step {t} beyond {} inputs",
                ids.len()
            )));
        }
        Ok(self.logits_from_rows(&self.embed_ids(&ids[..t])))
    }

    /// Log-probability of `target` after `rows` and its gradient with respect
    /// to each row. Rows outside the context window get exact zeros.
    pub fn log_prob_grad(&self, rows: &[Vec<f64>], target: u32) -> (f64, Vec<Vec<f64>>) {
        let d = self.config.dim;
        let (c, l) = self.context(rows);
        let h = self.hidden(&c);
        let logits = self.logits_from_hidden(&h);
        let lp = log_softmax(&logits);
        let value = lp[target as usize];

        // d lp[y] / d logits = onehot(y) - p
        let mut dh = vec![0.0; d];
        for (tok, row) in self.u.chunks_exact(d).enumerate() {
            let g = (tok == target as usize) as u8 as f64 - lp[tok].exp();
            if g != 0.0 {
                for (dh_i, u) in dh.iter_mut().zip(row) {
                    *dh_i += g * u;
                }
            }
        }
        let dz: Vec<f64> = dh.iter().zip(&h).map(|(g, h)| g * (1.0 - h * h)).collect();
        let mut dc = vec![0.0; d];
        for (i, dz_i) in dz.iter().enumerate() {
            for (j, dc_j) in dc.iter_mut().enumerate() {
                *dc_j += self.a[i * d + j] * dz_i;
            }
        }
        let mut grads = vec![vec![0.0; d]; rows.len()];
        if l > 0 {
            let per_row: Vec<f64> = dc.iter().map(|g| g / l as f64).collect();
            for g in &mut grads[rows.len() - l..] {
                g.copy_from_slice(&per_row);
            }
        }
        (value, grads)
    }

    /// Gradient of `log softmax(forward(ids, t))[target]` with respect to the
    /// embedding row of every input position (`ids.len()` rows).
    pub fn gradient(&self, ids: &[u32], t: usize, target: u32) -> Result<Vec<Vec<f64>>> {
        if t > ids.len() {
            return Err(Error::validation(format!(
                "step {t} beyond {} inputs",
                ids.len()
            )));
        }
        if target as usize >= self.vocab.len() {
            return Err(Error::validation(format!(
                "target {target} outside vocabulary"
            )));
        }
        let rows = self.embed_ids(&ids[..t]);
        let (_, mut grads) = self.log_prob_grad(&rows, target);
        grads.resize(ids.len(), vec![0.0; self.config.dim]);
        Ok(grads)
    }

    /// Generates up to `max_tokens`, stopping early at `<eos>`. With
    /// `temperature > 0` tokens are sampled from a stream seeded by the model
    /// seed and the prompt, so results stay reproducible.
    pub fn generate(&self, prompt: &[u32], max_tokens: usize, temperature: f64) -> RefGeneration {
        let mut context = self.embed_ids(prompt);
        let mut ids = Vec::new();
        let mut step_log_probs = Vec::new();
        let mut rng = (temperature > 0.0).then(|| {
            let mut seed = self.config.seed ^ 0xA076_1D64_78BD_642F;
            for &p in prompt {
                seed = SplitMix64::new(seed ^ p as u64).next_u64();
            }
            ChaCha8Rng::seed_from_u64(seed)
        });
        for _ in 0..max_tokens {
            let lp = log_softmax(&self.logits_from_rows(&context));
            let next = match rng.as_mut() {
                None => argmax(&lp),
                Some(rng) => {
                    let weights: Vec<f64> = lp.iter().map(|l| (l / temperature).exp()).collect();
                    match WeightedIndex::new(&weights) {
                        Ok(dist) => dist.sample(rng) as u32,
                        Err(_) => argmax(&lp),
                    }
                }
            };
            if next == EOS {
                return RefGeneration {
                    ids,
                    step_log_probs,
                    finish_reason: FinishReason::Stop,
                };
            }
            context.push(self.embedding(next).to_vec());
            ids.push(next);
            step_log_probs.push(lp);
        }
        RefGeneration {
            ids,
            step_log_probs,
            finish_reason: FinishReason::Length,
        }
    }
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> u32 {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best as u32
}

/// The `k` most probable tokens of one step, ties broken by token text as in
/// [`crate::gateway::truncate_top_k`].
fn top_k_map(vocab: &Vocabulary, lp: &[f64], k: usize) -> StepLogprobs {
    let mut order: Vec<usize> = (0..lp.len()).collect();
    if k < lp.len() {
        let rank = |a: &usize, b: &usize| {
            lp[*b]
                .total_cmp(&lp[*a])
                .then_with(|| vocab.token(*a as u32).cmp(vocab.token(*b as u32)))
        };
        order.select_nth_unstable_by(k - 1, rank);
        order.truncate(k);
    }
    order
        .into_iter()
        .map(|t| (vocab.token(t as u32).to_string(), lp[t]))
        .collect()
}

/// The reference model exposed through the [`Backend`] interface.
#[derive(Clone)]
pub struct ReferenceBackend {
    name: String,
    model: Arc<RefModel>,
}

impl ReferenceBackend {
    pub fn new(name: impl Into<String>, model: RefModel) -> Self {
        Self {
            name: name.into(),
            model: Arc::new(model),
        }
    }

    pub fn model(&self) -> &RefModel {
        &self.model
    }
}

impl Backend for ReferenceBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn capabilities(&self) -> ModelCapabilities {
        ModelCapabilities {
            provides_top_k_logprobs: Some(self.model.vocab_size()),
            provides_full_logits: true,
            provides_gradients: true,
            tokenizer_available: true,
        }
    }

    fn generate(&self, prompt: &str, params: &GenerationParams) -> Result<GenerationOutput> {
        params.validate()?;
        let ids = self.model.encode(prompt);
        let k = params
            .effective_k(&self.capabilities())
            .unwrap_or(self.model.vocab_size());
        let mut gen = self
            .model
            .generate(&ids, params.max_tokens, params.temperature);
        if let Some(stop) = &params.stop {
            if let Some(pos) = gen
                .ids
                .iter()
                .position(|&id| stop.iter().any(|s| s == self.model.vocab.token(id)))
            {
                gen.ids.truncate(pos);
                gen.step_log_probs.truncate(pos);
                gen.finish_reason = FinishReason::Stop;
            }
        }
        let vocab = self.model.vocab();
        let mut maps: Vec<StepLogprobs> = Vec::with_capacity(gen.ids.len());
        let mut confidence = Vec::with_capacity(gen.ids.len());
        for (&id, lp) in gen.ids.iter().zip(&gen.step_log_probs) {
            maps.push(top_k_map(vocab, lp, k));
            confidence.push(lp[id as usize].exp());
        }
        let tokens: Vec<OutToken> = gen
            .ids
            .iter()
            .map(|&id| OutToken {
                surface: vocab.token(id).to_string(),
                id: Some(id),
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
            step_logprobs: Some(maps),
            step_confidence: Some(confidence),
            finish_reason: gen.finish_reason,
        })
    }

    fn tokenize_units(&self, text: &str, kind: UnitKind) -> TokenizedPrompt {
        let units: Vec<Unit> = word_units(text)
            .into_iter()
            .map(|mut u| {
                if kind == UnitKind::BackendToken {
                    u.id = Some(self.model.vocab.id(&u.surface));
                }
                u
            })
            .collect();
        TokenizedPrompt::new(text, units, kind).expect("word segmentation yields valid spans")
    }

    fn differentiable(&self) -> Option<&dyn DifferentiableLm> {
        Some(self)
    }
}

impl DifferentiableLm for ReferenceBackend {
    fn encode(&self, text: &str) -> Vec<u32> {
        self.model.encode(text)
    }

    fn embedding_dim(&self) -> usize {
        self.model.dim()
    }

    fn embed_ids(&self, ids: &[u32]) -> Vec<Vec<f64>> {
        self.model.embed_ids(ids)
    }

    fn next_log_prob(&self, rows: &[Vec<f64>], target: u32) -> f64 {
        log_softmax(&self.model.logits_from_rows(rows))[target as usize]
    }

    fn next_log_prob_grad(&self, rows: &[Vec<f64>], target: u32) -> (f64, Vec<Vec<f64>>) {
        self.model.log_prob_grad(rows, target)
    }
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;

    fn model() -> RefModel {
        RefModel::new(RefModelConfig::default()).unwrap()
    }

    #[test]
    fn splitmix_reference_values() {
        // first outputs for seed 0, as published with the algorithm
        let mut g = SplitMix64::new(0);
        assert_eq!(g.next_u64(), 0xE220_A839_7B1D_CDAF);
        assert_eq!(g.next_u64(), 0x6E78_9E6A_A1B9_65F4);
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = model();
        let b = model();
        assert_eq!(a.emb, b.emb);
        assert_eq!(a.u, b.u);
        let c = RefModel::new(RefModelConfig {
            seed: 1,
            ..Default::default()
        })
        .unwrap();
        assert_ne!(a.emb, c.emb);
        assert!(a
            .emb
            .iter()
            .chain(&a.a)
            .chain(&a.b)
            .chain(&a.u)
            .all(|x| x.is_finite()));
        let bound = 0.5 / 4.0;
        assert!(a.emb.iter().all(|x| x.abs() <= bound));
    }

    #[test]
    fn softmax_normalizes() {
        let m = model();
        let ids = m.encode("the quick brown fox jumps");
        for t in 0..=ids.len() {
            let lp = log_softmax(&m.forward(&ids, t).unwrap());
            let total: f64 = lp.iter().map(|l| l.exp()).sum();
            assert!((total - 1.0).abs() < 1e-9);
        }
        assert!(m.forward(&ids, ids.len() + 1).is_err());
    }

    #[test]
    fn context_mean_shifts_by_embedding_difference() {
        let m = model();
        let ids = m.encode("water fire green music house");
        let t = ids.len();
        let (c0, l) = m.context(&m.embed_ids(&ids[..t]));
        let mut changed = ids.clone();
        let new = m.vocab.id("river");
        changed[t - 2] = new;
        let (c1, _) = m.context(&m.embed_ids(&changed[..t]));
        let (e_new, e_old) = (m.embedding(new), m.embedding(ids[t - 2]));
        for j in 0..m.dim() {
            let expected = (e_new[j] - e_old[j]) / l as f64;
            assert!((c1[j] - c0[j] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn unknown_words_map_to_unk() {
        let m = model();
        assert_eq!(m.encode("zzzqx the"), vec![UNK, m.vocab.id("the")]);
        assert_eq!(m.vocab.id("The"), m.vocab.id("the"));
    }

    #[test]
    fn greedy_generation_is_argmax_and_reproducible() {
        let m = model();
        let prompt = m.encode("tell me about the river");
        let g1 = m.generate(&prompt, 8, 0.0);
        let g2 = m.generate(&prompt, 8, 0.0);
        assert_eq!(g1, g2);
        let mut ctx = prompt.clone();
        for (&id, lp) in g1.ids.iter().zip(&g1.step_log_probs) {
            let logits = m.forward(&ctx, ctx.len()).unwrap();
            let best = logits
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                .unwrap()
                .0 as u32;
            assert_eq!(id, best);
            assert_eq!(argmax(lp), id);
            ctx.push(id);
        }
    }

    #[test]
    fn empty_prompt_uses_zero_context() {
        let m = model();
        let g = m.generate(&[], 1, 0.0);
        let expected = log_softmax(&m.logits_from_hidden(&m.hidden(&vec![0.0; m.dim()])));
        if let Some(first) = g.step_log_probs.first() {
            assert_eq!(first, &expected);
        } else {
            assert_eq!(argmax(&expected), EOS);
        }
    }

    #[test]
    fn zero_max_tokens_is_length_capped() {
        let backend = ReferenceBackend::new("ref", model());
        let out = backend
            .generate(
                "a b c",
                &GenerationParams {
                    max_tokens: 0,
                    ..Default::default()
                },
            )
            .unwrap();
        assert!(out.tokens.is_empty());
        assert_eq!(out.finish_reason, FinishReason::Length);
    }

    #[test]
    fn gradients_outside_window_are_zero() {
        let m = model();
        let ids = m.encode("one two three four five six seven");
        let g = m.gradient(&ids, ids.len(), 5).unwrap();
        let cut = ids.len() - m.window();
        assert!(g[..cut].iter().flatten().all(|&x| x == 0.0));
        assert!(g[cut..].iter().flatten().any(|&x| x != 0.0));
        let partial = m.gradient(&ids, 3, 5).unwrap();
        assert_eq!(partial.len(), ids.len());
        assert!(partial[3..].iter().flatten().all(|&x| x == 0.0));
    }

    #[test]
    fn gradient_matches_central_differences() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-4;
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let n = rng.random_range(1..8);
            let ids: Vec<u32> = (0..n)
                .map(|_| rng.random_range(0..m.vocab_size() as u32))
                .collect();
            let t = rng.random_range(1..=n);
            let y = rng.random_range(0..m.vocab_size() as u32);
            let analytic = m.gradient(&ids, t, y).unwrap();
            let rows = m.embed_ids(&ids[..t]);
            let f = |rows: &[Vec<f64>]| log_softmax(&m.logits_from_rows(rows))[y as usize];
            for i in 0..t {
                for j in 0..m.dim() {
                    let mut plus = rows.clone();
                    plus[i][j] += h;
                    let mut minus = rows.clone();
                    minus[i][j] -= h;
                    let numeric = (f(&plus) - f(&minus)) / (2.0 * h);
                    let a = analytic[i][j];
                    let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                    worst = worst.max(rel);
                }
            }
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn expected_score_function_vanishes() {
        let m = model();
        let ids = m.encode("green river under the moon");
        let lp = log_softmax(&m.forward(&ids, ids.len()).unwrap());
        let mut acc = vec![vec![0.0; m.dim()]; ids.len()];
        for y in 0..m.vocab_size() as u32 {
            let g = m.gradient(&ids, ids.len(), y).unwrap();
            let p = lp[y as usize].exp();
            for (a, g) in acc.iter_mut().flatten().zip(g.iter().flatten()) {
                *a += p * g;
            }
        }
        assert!(acc.iter().flatten().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn keyword_rule_controls_output() {
        let rule = KeywordRule {
            keywords: vec!["great".into(), "fun".into()],
            present_label: "positive".into(),
            absent_label: "negative".into(),
        };
        let m = RefModel::new(RefModelConfig {
            seed: 3,
            window: 64,
            keyword_rule: Some(rule),
            ..Default::default()
        })
        .unwrap();
        let pos = m.generate(&m.encode("the food was great and the room was big"), 4, 0.0);
        assert!(pos.ids.iter().all(|&i| m.vocab.token(i) == "positive"));
        let neg = m.generate(&m.encode("the food was cold and the room was big"), 4, 0.0);
        assert!(neg.ids.iter().all(|&i| m.vocab.token(i) == "negative"));
        assert!(RefModel::new(RefModelConfig {
            keyword_rule: Some(KeywordRule {
                keywords: vec!["notaword".into()],
                present_label: "positive".into(),
                absent_label: "negative".into(),
            }),
            ..Default::default()
        })
        .is_err());
    }

    #[test]
    fn backend_tokenizer_assigns_ids() {
        let backend = ReferenceBackend::new("ref", model());
        let p = backend.tokenize_units("a b a", UnitKind::BackendToken);
        let vocab = backend.model().vocab();
        let ids: Vec<u32> = p.units().iter().map(|u| u.id.unwrap()).collect();
        assert_eq!(ids, vec![vocab.id("a"), vocab.id("b"), vocab.id("a")]);
        assert!(backend
            .tokenize_units("", UnitKind::BackendToken)
            .is_empty());
    }

    #[test]
    fn backend_output_is_consistent() {
        let backend = ReferenceBackend::new("ref", model());
        let out = backend
            .generate("tell me a story", &GenerationParams::default())
            .unwrap();
        out.validate().unwrap();
        assert_eq!(
            out,
            backend
                .generate("tell me a story", &GenerationParams::default())
                .unwrap()
        );
        let capped = backend
            .generate(
                "tell me a story",
                &GenerationParams {
                    top_logprobs: Some(20),
                    ..Default::default()
                },
            )
            .unwrap();
        assert!(capped.step_logprobs.unwrap().iter().all(|m| m.len() == 20));
    }

    #[test]
    fn metadata_round_trips() {
        let meta = model().metadata();
        let json = serde_json::to_string(&meta).unwrap();
        assert_eq!(json, format!(r#"{{"seed":0,"d":16,"w":4,"V":{}}}"#, meta.v));
    }
}
