use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{run_flip_rate, FlipRateConfig};
use crate::embedding::Embedder;
use crate::error::{Error, Result};
use crate::explain::MethodExplainer;
use crate::gateway::Backend;
use crate::types::{ExplainerId, Family, TopK};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub family: Family,
    pub k: TopK,
    pub m: usize,
    pub total_cases: usize,
    pub evaluated: usize,
    pub filtered_no_label: usize,
    pub errored: usize,
    pub treatment_flip_rate: Option<f64>,
    pub control_flip_rate: Option<f64>,
    pub error: Option<String>,
}

/// Runs the flip-rate test once per `(K, M)` pair, in `ks`-major order. A
/// failing cell is recorded in its row and the sweep carries on.
#[allow(clippy::too_many_arguments)]
pub fn sweep(
    family: Family,
    ks: &[TopK],
    ms: &[usize],
    backend: &dyn Backend,
    embedder: Arc<dyn Embedder>,
    queries: &[String],
    wordlist: &[String],
    cfg: &FlipRateConfig,
) -> Vec<SweepRow> {
    let mut rows = Vec::with_capacity(ks.len() * ms.len());
    for &k in ks {
        for &m in ms {
            let method = ExplainerId::new(family).with_k(k).with_m(m);
            let explainer = MethodExplainer::new(method, Some(embedder.clone()));
            let result = method.validate().and_then(|_| {
                run_flip_rate(
                    queries,
                    &explainer,
                    backend,
                    embedder.as_ref(),
                    wordlist,
                    cfg,
                )
            });
            rows.push(match result {
                Ok(r) => SweepRow {
                    family,
                    k,
                    m,
                    total_cases: r.total_cases,
                    evaluated: r.evaluated,
                    filtered_no_label: r.filtered_no_label,
                    errored: r.errored,
                    treatment_flip_rate: Some(r.treatment_flip_rate),
                    control_flip_rate: Some(r.control_flip_rate),
                    error: None,
                },
                Err(e) => SweepRow {
                    family,
                    k,
                    m,
                    total_cases: queries.len(),
                    evaluated: 0,
                    filtered_no_label: 0,
                    errored: queries.len(),
                    treatment_flip_rate: None,
                    control_flip_rate: None,
                    error: Some(e.to_string()),
                },
            });
        }
    }
    rows
}

impl SweepRow {
    pub fn to_csv(rows: &[SweepRow]) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in rows {
            w.serialize(r)
                .map_err(|e| Error::validation(format!("csv encoding failed: {e}")))?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::validation(format!("csv encoding failed: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::HashedBagEmbedder;
    use crate::eval::synthetic::{default_wordlist, keyword_backend, keyword_dataset};

    #[test]
    fn one_row_per_setting() {
        let backend = keyword_backend("kw", 0).unwrap();
        let queries: Vec<String> = keyword_dataset(4, 2).into_iter().map(|c| c.query).collect();
        let rows = sweep(
            Family::AggEqu,
            &[TopK::Full],
            &[5, 10, 30],
            &backend,
            Arc::new(HashedBagEmbedder::default()),
            &queries,
            &default_wordlist(),
            &FlipRateConfig::default(),
        );
        assert_eq!(rows.len(), 3);
        let csv = SweepRow::to_csv(&rows).unwrap();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.starts_with("family,k,m,"));
    }
}
