//! White-box token attribution: Integrated Gradients per generation round,
//! then a weighted sum of the normalized prompt columns over sampled rounds.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gateway::{Backend, DifferentiableLm, GenerationParams};
use crate::par;
use crate::types::{
    normalize_over_prompt, ExplainerId, Family, GenerationOutput, ImportanceVector, TokenizedPrompt,
};

/// A scalar function of a sequence of embedding rows with its gradient.
pub trait ScalarTarget: Sync {
    fn value(&self, rows: &[Vec<f64>]) -> f64;

    fn value_and_grad(&self, rows: &[Vec<f64>]) -> (f64, Vec<Vec<f64>>);
}

/// Log-probability of one token as the next output of a differentiable model.
pub struct NextTokenTarget<'a> {
    pub lm: &'a dyn DifferentiableLm,
    pub token: u32,
}

impl ScalarTarget for NextTokenTarget<'_> {
    fn value(&self, rows: &[Vec<f64>]) -> f64 {
        self.lm.next_log_prob(rows, self.token)
    }

    fn value_and_grad(&self, rows: &[Vec<f64>]) -> (f64, Vec<Vec<f64>>) {
        self.lm.next_log_prob_grad(rows, self.token)
    }
}

/// How a d-dimensional signed attribution becomes one per-token score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    L2,
    SumAbs,
}

impl Reduction {
    pub fn apply(&self, row: &[f64]) -> f64 {
        match self {
            Reduction::L2 => row.iter().map(|x| x * x).sum::<f64>().sqrt(),
            Reduction::SumAbs => row.iter().sum::<f64>().abs(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IgAttribution {
    /// `(x − x′) ⊙ mean gradient along the path`, one row per input.
    pub signed: Vec<Vec<f64>>,
    pub per_token: Vec<f64>,
}

impl IgAttribution {
    pub fn total(&self) -> f64 {
        self.signed.iter().flatten().sum()
    }
}

/// Integrated Gradients from `baseline` to `input` with an `steps`-point
/// midpoint rule.
pub fn integrated_gradients(
    target: &dyn ScalarTarget,
    input: &[Vec<f64>],
    baseline: &[Vec<f64>],
    steps: usize,
    reduction: Reduction,
) -> Result<IgAttribution> {
    if steps == 0 {
        return Err(Error::validation("ig_steps must be at least 1"));
    }
    if input.len() != baseline.len() || input.iter().zip(baseline).any(|(a, b)| a.len() != b.len())
    {
        return Err(Error::validation("baseline shape differs from input"));
    }
    let diff: Vec<Vec<f64>> = input
        .iter()
        .zip(baseline)
        .map(|(x, b)| x.iter().zip(b).map(|(x, b)| x - b).collect())
        .collect();
    let mut acc: Vec<Vec<f64>> = input.iter().map(|r| vec![0.0; r.len()]).collect();
    if diff.iter().flatten().any(|&d| d != 0.0) {
        let mut point = baseline.to_vec();
        for s in 0..steps {
            let alpha = (s as f64 + 0.5) / steps as f64;
            for ((p, b), d) in point.iter_mut().zip(baseline).zip(&diff) {
                for ((p, b), d) in p.iter_mut().zip(b).zip(d) {
                    *p = b + alpha * d;
                }
            }
            let (_, grad) = target.value_and_grad(&point);
            for (a, g) in acc.iter_mut().zip(&grad) {
                for (a, g) in a.iter_mut().zip(g) {
                    *a += g;
                }
            }
        }
    }
    let signed: Vec<Vec<f64>> = acc
        .iter()
        .zip(&diff)
        .map(|(a, d)| a.iter().zip(d).map(|(a, d)| d * a / steps as f64).collect())
        .collect();
    let per_token = signed.iter().map(|r| reduction.apply(r)).collect();
    Ok(IgAttribution { signed, per_token })
}

/// `(n+m) × m` attributions of inputs to output rounds. Column `k`
/// (1-based) covers the `n + k − 1` inputs visible when `o_k` was emitted;
/// columns not attributed stay empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundAttributionMatrix {
    pub n: usize,
    pub m: usize,
    columns: Vec<Option<Vec<f64>>>,
}

impl RoundAttributionMatrix {
    pub fn new(n: usize, m: usize) -> Self {
        Self {
            n,
            m,
            columns: vec![None; m],
        }
    }

    pub fn is_valid(&self, i: usize, k: usize) -> bool {
        (1..=self.m).contains(&k) && i < self.n + k - 1
    }

    pub fn set_column(&mut self, k: usize, values: Vec<f64>) -> Result<()> {
        if !(1..=self.m).contains(&k) {
            return Err(Error::validation(format!(
                "round {k} outside 1..={}",
                self.m
            )));
        }
        if values.len() != self.n + k - 1 {
            return Err(Error::validation(format!(
                "round {k} needs {} entries, got {}",
                self.n + k - 1,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation(format!(
                "round {k} has non-finite entries"
            )));
        }
        self.columns[k - 1] = Some(values);
        Ok(())
    }

    pub fn column(&self, k: usize) -> Option<&[f64]> {
        self.columns.get(k.wrapping_sub(1))?.as_deref()
    }

    /// `None` for masked future cells and unfilled rounds.
    pub fn get(&self, i: usize, k: usize) -> Option<f64> {
        if !self.is_valid(i, k) {
            return None;
        }
        self.column(k).map(|c| c[i])
    }

    pub fn filled_rounds(&self) -> Vec<usize> {
        (1..=self.m)
            .filter(|&k| self.columns[k - 1].is_some())
            .collect()
    }
}

/// Sampled rounds (1-based, increasing) and their weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundWeights {
    pub rounds: Vec<usize>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sampled {
    pub weights: RoundWeights,
    pub warning: Option<String>,
}

fn clamp_m(m: usize, big_m: usize) -> Result<(usize, Option<String>)> {
    if big_m == 0 {
        return Err(Error::validation("M must be at least 1"));
    }
    if m == 0 {
        return Err(Error::validation("output has no rounds to sample"));
    }
    if big_m > m {
        let msg = format!("M={big_m} exceeds the {m} output rounds; using M={m}");
        tracing::warn!("{msg}");
        return Ok((m, Some(msg)));
    }
    Ok((big_m, None))
}

/// `M` rounds evenly spaced over `1..=m`, each weighted `1/M`.
pub fn sample_rounds_equal(m: usize, big_m: usize) -> Result<Sampled> {
    let (big_m, warning) = clamp_m(m, big_m)?;
    let mut rounds: Vec<usize> = Vec::with_capacity(big_m);
    for j in 0..big_m {
        let pos = if big_m == 1 {
            1.0
        } else {
            1.0 + j as f64 * (m - 1) as f64 / (big_m - 1) as f64
        };
        let r = (pos.round() as usize).clamp(1, m);
        if !rounds.contains(&r) {
            rounds.push(r);
            continue;
        }
        // nearest unused round, earlier first on equal distance
        let fill = (1..m)
            .flat_map(|d| [r.checked_sub(d), Some(r + d)])
            .flatten()
            .find(|c| (1..=m).contains(c) && !rounds.contains(c))
            .expect("fewer rounds taken than available");
        rounds.push(fill);
    }
    rounds.sort_unstable();
    let weights = vec![1.0 / big_m as f64; big_m];
    Ok(Sampled {
        weights: RoundWeights { rounds, weights },
        warning,
    })
}

/// The `M` most confident rounds, weighted by confidence renormalized to 1.
pub fn sample_rounds_confidence(confidence: &[f64], big_m: usize) -> Result<Sampled> {
    if let Some(c) = confidence.iter().find(|c| !(0.0..=1.0).contains(*c)) {
        return Err(Error::validation(format!("confidence {c} outside [0, 1]")));
    }
    let (big_m, warning) = clamp_m(confidence.len(), big_m)?;
    let mut order: Vec<usize> = (0..confidence.len()).collect();
    order.sort_by(|&a, &b| confidence[b].total_cmp(&confidence[a]).then(a.cmp(&b)));
    let mut picked: Vec<usize> = order[..big_m].to_vec();
    picked.sort_unstable();
    let total: f64 = picked.iter().map(|&i| confidence[i]).sum();
    let weights = if total > 0.0 {
        picked.iter().map(|&i| confidence[i] / total).collect()
    } else {
        vec![1.0 / big_m as f64; big_m]
    };
    Ok(Sampled {
        weights: RoundWeights {
            rounds: picked.iter().map(|i| i + 1).collect(),
            weights,
        },
        warning,
    })
}

/// `Σ_k w_k · normalize(prompt rows of column k)`.
pub fn aggregate(matrix: &RoundAttributionMatrix, weights: &RoundWeights) -> Result<Vec<f64>> {
    if weights.rounds.len() != weights.weights.len() || weights.rounds.is_empty() {
        return Err(Error::validation("round weights malformed"));
    }
    let mut out = vec![0.0; matrix.n];
    for (&k, &w) in weights.rounds.iter().zip(&weights.weights) {
        let col = matrix
            .column(k)
            .ok_or_else(|| Error::validation(format!("round {k} was not attributed")))?;
        let norm = normalize_over_prompt(col, matrix.n)?;
        for (o, v) in out.iter_mut().zip(norm) {
            *o += w * v;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct AggregateOptions {
    pub generation: GenerationParams,
    pub m: usize,
    pub ig_steps: usize,
    pub reduction: Reduction,
    pub parallelism: usize,
}

impl Default for AggregateOptions {
    fn default() -> Self {
        Self {
            generation: GenerationParams::default(),
            m: crate::types::DEFAULT_M,
            ig_steps: crate::types::DEFAULT_IG_STEPS,
            reduction: Reduction::L2,
            parallelism: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateExplanation {
    pub normalized: ImportanceVector,
    pub output: GenerationOutput,
    pub matrix: RoundAttributionMatrix,
    pub weights: Option<RoundWeights>,
    pub warnings: Vec<String>,
}

/// Per-token IG scores for round `k` (1-based): the prompt plus the first
/// `k − 1` generated tokens explain `o_k`.
pub fn attribute_round(
    lm: &dyn DifferentiableLm,
    prompt_ids: &[u32],
    output_ids: &[u32],
    k: usize,
    steps: usize,
    reduction: Reduction,
) -> Result<Vec<f64>> {
    let mut ids = prompt_ids.to_vec();
    ids.extend_from_slice(&output_ids[..k - 1]);
    let input = lm.embed_ids(&ids);
    let baseline: Vec<Vec<f64>> = input.iter().map(|r| vec![0.0; r.len()]).collect();
    let target = NextTokenTarget {
        lm,
        token: output_ids[k - 1],
    };
    Ok(integrated_gradients(&target, &input, &baseline, steps, reduction)?.per_token)
}

pub fn explain_aggregate(
    prompt: &TokenizedPrompt,
    backend: &dyn Backend,
    family: Family,
    opts: &AggregateOptions,
) -> Result<AggregateExplanation> {
    if !matches!(family, Family::AggEqu | Family::AggConf) {
        return Err(Error::validation(format!(
            "{family} is not an aggregation method"
        )));
    }
    let lm = backend
        .differentiable()
        .filter(|_| backend.capabilities().provides_gradients)
        .ok_or_else(|| Error::capability(format!("gradients (backend {})", backend.name())))?;
    let method = ExplainerId::new(family)
        .with_m(opts.m)
        .with_ig_steps(opts.ig_steps);
    method.validate()?;
    let prompt_ids: Vec<u32> = match prompt
        .units()
        .iter()
        .map(|u| u.id)
        .collect::<Option<Vec<_>>>()
    {
        Some(ids) => ids,
        None => lm.encode(prompt.text()),
    };
    if prompt_ids.len() != prompt.len() {
        return Err(Error::validation(
            "prompt units do not align with model tokens",
        ));
    }
    let output = backend.generate(prompt.text(), &opts.generation)?;
    let output_ids: Vec<u32> = output
        .tokens
        .iter()
        .map(|t| t.id)
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| Error::capability("output token ids"))?;
    let n = prompt.len();
    let m = output_ids.len();
    let mut matrix = RoundAttributionMatrix::new(n, m);
    let mut warnings = Vec::new();
    if m == 0 {
        warnings.push("empty output; no rounds to attribute, scores are uniform".to_string());
        let uniform = normalize_over_prompt(&vec![0.0; n], n)?;
        return Ok(AggregateExplanation {
            normalized: ImportanceVector {
                scores: uniform,
                method,
                normalized: true,
            },
            output,
            matrix,
            weights: None,
            warnings,
        });
    }
    let sampled = match family {
        Family::AggEqu => sample_rounds_equal(m, opts.m)?,
        _ => {
            let conf = output
                .step_confidence
                .as_ref()
                .ok_or_else(|| Error::capability("per-step confidence"))?;
            sample_rounds_confidence(conf, opts.m)?
        }
    };
    warnings.extend(sampled.warning);
    let rounds = &sampled.weights.rounds;
    let columns = par::map_indexed(opts.parallelism, rounds.len(), |i| {
        attribute_round(
            lm,
            &prompt_ids,
            &output_ids,
            rounds[i],
            opts.ig_steps,
            opts.reduction,
        )
    });
    for (&k, col) in rounds.iter().zip(columns) {
        matrix.set_column(k, col?)?;
    }
    let scores = aggregate(&matrix, &sampled.weights)?;
    Ok(AggregateExplanation {
        normalized: ImportanceVector {
            scores,
            method,
            normalized: true,
        },
        output,
        matrix,
        weights: Some(sampled.weights),
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference_lm::{RefModel, RefModelConfig, ReferenceBackend};
    use crate::types::UnitKind;

    struct Linear(Vec<Vec<f64>>);

    impl ScalarTarget for Linear {
        fn value(&self, rows: &[Vec<f64>]) -> f64 {
            rows.iter()
                .flatten()
                .zip(self.0.iter().flatten())
                .map(|(x, w)| x * w)
                .sum()
        }

        fn value_and_grad(&self, rows: &[Vec<f64>]) -> (f64, Vec<Vec<f64>>) {
            (self.value(rows), self.0.clone())
        }
    }

    #[test]
    fn equal_sampling_examples() {
        assert_eq!(
            sample_rounds_equal(13, 5).unwrap().weights.rounds,
            [1, 4, 7, 10, 13]
        );
        assert_eq!(
            sample_rounds_equal(4, 4).unwrap().weights.rounds,
            [1, 2, 3, 4]
        );
        assert_eq!(sample_rounds_equal(1, 1).unwrap().weights.rounds, [1]);
        let clamped = sample_rounds_equal(3, 5).unwrap();
        assert_eq!(clamped.weights.rounds, [1, 2, 3]);
        assert!(clamped.warning.is_some());
        for m in 1..40 {
            for big in 1..=m {
                let r = sample_rounds_equal(m, big).unwrap().weights.rounds;
                assert_eq!(r.len(), big);
                assert!(r.windows(2).all(|w| w[0] < w[1]));
            }
        }
    }

    #[test]
    fn confidence_sampling_examples() {
        let s = sample_rounds_confidence(&[0.9, 0.1, 0.8], 2)
            .unwrap()
            .weights;
        assert_eq!(s.rounds, [1, 3]);
        assert!((s.weights[0] - 0.9 / 1.7).abs() < 1e-15);
        assert!((s.weights[1] - 0.8 / 1.7).abs() < 1e-15);
        let one = sample_rounds_confidence(&[0.2, 0.6], 1).unwrap().weights;
        assert_eq!((one.rounds, one.weights), (vec![2], vec![1.0]));
        let tie = sample_rounds_confidence(&[0.5, 0.5, 0.5], 2)
            .unwrap()
            .weights;
        assert_eq!(tie.rounds, [1, 2]);
    }

    #[test]
    fn matrix_masks_future_cells() {
        let mut mat = RoundAttributionMatrix::new(5, 5);
        mat.set_column(3, vec![1.0; 7]).unwrap();
        assert_eq!((0..10).filter(|&i| mat.get(i, 3).is_some()).count(), 7);
        assert_eq!((0..10).filter(|&i| mat.is_valid(i, 1)).count(), 5);
        assert_eq!(mat.get(0, 2), None);
        assert!(mat.set_column(2, vec![1.0; 7]).is_err());
    }

    #[test]
    fn worked_column_is_fixed_point() {
        let mut mat = RoundAttributionMatrix::new(5, 1);
        mat.set_column(1, vec![0.19, 0.12, 0.29, 0.29, 0.11])
            .unwrap();
        let w = RoundWeights {
            rounds: vec![1],
            weights: vec![1.0],
        };
        let got = aggregate(&mat, &w).unwrap();
        for (g, e) in got.iter().zip([0.19, 0.12, 0.29, 0.29, 0.11]) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn ig_zero_path_and_linear() {
        let input = vec![vec![0.5, -1.0], vec![2.0, 0.25]];
        let lin = Linear(vec![vec![3.0, 1.0], vec![-2.0, 4.0]]);
        let none = integrated_gradients(&lin, &input, &input, 7, Reduction::L2).unwrap();
        assert!(none.signed.iter().flatten().all(|&x| x == 0.0));
        let zero = vec![vec![0.0; 2]; 2];
        for steps in [1, 3, 32] {
            let ig = integrated_gradients(&lin, &input, &zero, steps, Reduction::L2).unwrap();
            for (row, (x, w)) in ig.signed.iter().zip(input.iter().zip(&lin.0)) {
                for (a, (x, w)) in row.iter().zip(x.iter().zip(w)) {
                    assert!((a - x * w).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn ig_completeness_on_reference_model() {
        let backend =
            ReferenceBackend::new("ref", RefModel::new(RefModelConfig::default()).unwrap());
        let lm: &dyn DifferentiableLm = &backend;
        let ids = lm.encode("the capital city of the usa");
        let input = lm.embed_ids(&ids);
        let zero = vec![vec![0.0; lm.embedding_dim()]; input.len()];
        let target = NextTokenTarget { lm, token: 42 };
        let gap = target.value(&input) - target.value(&zero);
        let residual = |s| {
            let ig = integrated_gradients(&target, &input, &zero, s, Reduction::L2).unwrap();
            (ig.total() - gap).abs()
        };
        let r: Vec<f64> = [8, 32, 128, 256].into_iter().map(residual).collect();
        assert!(r[0] > r[1] && r[1] > r[2], "{r:?}");
        assert!(r[3] < 1e-3, "{r:?}");
    }

    #[test]
    fn explain_sums_to_one_and_is_parallel_stable() {
        let backend =
            ReferenceBackend::new("ref", RefModel::new(RefModelConfig::default()).unwrap());
        let prompt =
            backend.tokenize_units("list the capital city of the usa", UnitKind::BackendToken);
        for family in [Family::AggEqu, Family::AggConf] {
            let seq =
                explain_aggregate(&prompt, &backend, family, &AggregateOptions::default()).unwrap();
            let par = explain_aggregate(
                &prompt,
                &backend,
                family,
                &AggregateOptions {
                    parallelism: 8,
                    ..Default::default()
                },
            )
            .unwrap();
            assert_eq!(seq.normalized, par.normalized);
            let total: f64 = seq.normalized.scores.iter().sum();
            assert!((total - 1.0).abs() < 1e-9);
            assert_eq!(seq.normalized.scores.len(), prompt.len());
        }
    }
}
