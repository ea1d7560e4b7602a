use std::sync::Arc;

use promptlens::embedding::{Embedder, HashedBagEmbedder};
use promptlens::eval::synthetic::{default_wordlist, keyword_backend, keyword_dataset, KEYWORDS};
use promptlens::eval::{build_sentiment_prompt, run_flip_rate, FlipRateConfig};
use promptlens::explain::{units_for, KeywordOracle, MethodExplainer, UnitScorer};
use promptlens::types::{ExplainerId, Family};

#[test]
fn perturbation_metrics_rank_the_keyword_first() {
    let backend = keyword_backend("kw", 0).unwrap();
    let emb: Arc<dyn Embedder> = Arc::new(HashedBagEmbedder::default());
    for family in [Family::PerbDis, Family::PerbSim] {
        let explainer = MethodExplainer::new(ExplainerId::new(family), Some(emb.clone()));
        let mut hits = 0;
        for case in keyword_dataset(100, 11) {
            let sp = build_sentiment_prompt(&case.query).unwrap();
            let prompt = units_for(&backend, &sp.text);
            let s = explainer.scores(&prompt, &backend).unwrap();
            let best = (0..s.len()).fold(0, |b, i| if s[i] > s[b] { i } else { b });
            let strict = s.iter().enumerate().all(|(i, v)| i == best || *v < s[best]);
            if strict && prompt.units()[best].surface == case.keyword {
                hits += 1;
            }
        }
        println!("{family}: {hits}/100");
        assert!(hits >= 90, "{family}: {hits}");
    }
}

#[test]
fn flip_rate_gaps() {
    let backend = keyword_backend("kw", 0).unwrap();
    let emb = HashedBagEmbedder::default();
    let queries: Vec<String> = keyword_dataset(100, 11)
        .into_iter()
        .map(|c| c.query)
        .collect();
    let words = default_wordlist();
    let cfg = FlipRateConfig::default();
    let oracle = KeywordOracle {
        keywords: KEYWORDS.iter().map(|s| s.to_string()).collect(),
    };
    let r = run_flip_rate(&queries, &oracle, &backend, &emb, &words, &cfg).unwrap();
    println!("oracle {} {}", r.treatment_flip_rate, r.control_flip_rate);
    assert!(r.treatment_flip_rate - r.control_flip_rate >= 0.9);
    let dis = MethodExplainer::new(ExplainerId::new(Family::PerbDis), None);
    let r = run_flip_rate(&queries, &dis, &backend, &emb, &words, &cfg).unwrap();
    println!("perb_dis {} {}", r.treatment_flip_rate, r.control_flip_rate);
    assert!(r.treatment_flip_rate - r.control_flip_rate >= 0.3);
    assert_eq!(r.filtered_no_label + r.errored + r.evaluated, r.total_cases);
}
