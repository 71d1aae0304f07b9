use std::collections::HashMap;

use adapter_distill::faq::bm25::bm25_score;
use adapter_distill::faq::{
    build_dataset, build_negatives, Bm25Index, Bm25Params, CorpusStats, DatasetOptions,
    KnowledgeBase, KnowledgePoint, Split, SyntheticConfig,
};
use adapter_distill::reproduce::oracles::{auc_pairwise, bm25_formula};
use adapter_distill::trainer::auc;
use adapter_distill::Error;
use proptest::prelude::*;

fn kb(points: &[&[&str]]) -> KnowledgeBase {
    let points = points
        .iter()
        .enumerate()
        .map(|(i, qs)| KnowledgePoint {
            point_id: format!("p{i}"),
            standard_question: qs[0].to_string(),
            similar_questions: qs[1..].iter().map(|s| s.to_string()).collect(),
        })
        .collect();
    KnowledgeBase::new("toy", points).unwrap()
}

fn toy_kb() -> KnowledgeBase {
    kb(&[
        &["reset my card pin", "forgot card pin", "change pin of card"],
        &["card was stolen", "lost my card", "report stolen card"],
        &[
            "open a new account",
            "create account online",
            "new account for child",
        ],
        &[
            "close my account",
            "account closing fee",
            "shut account down",
        ],
        &["pin blocked after tries", "unblock pin", "pin locked"],
    ])
}

fn point_of(kb: &KnowledgeBase) -> HashMap<String, String> {
    let mut m = HashMap::new();
    for p in &kb.points {
        for q in p.questions() {
            m.insert(q.to_string(), p.point_id.clone());
        }
    }
    m
}

#[test]
fn top_negative_matches_exhaustive_scoring() {
    let kb = toy_kb();
    let docs: Vec<Vec<String>> = kb
        .points
        .iter()
        .flat_map(|p| p.questions().map(adapter_distill::tokenizer::words))
        .collect();
    let texts: Vec<(String, String)> = kb
        .points
        .iter()
        .flat_map(|p| {
            p.questions()
                .map(move |q| (p.point_id.clone(), q.to_string()))
        })
        .collect();
    let as_str: Vec<Vec<&str>> = docs
        .iter()
        .map(|d| d.iter().map(String::as_str).collect())
        .collect();
    let negatives = build_negatives(&kb, 1, 10).unwrap();
    let owner = point_of(&kb);
    for (query, negative) in &negatives {
        let q = adapter_distill::tokenizer::words(query);
        let q: Vec<&str> = q.iter().map(String::as_str).collect();
        let mut best: Option<(f64, &str, &str)> = None;
        for (i, (pid, text)) in texts.iter().enumerate() {
            if *pid == owner[query] {
                continue;
            }
            let s = bm25_formula(&q, i, &as_str, 1.2, 0.75);
            let better = match best {
                None => true,
                Some((bs, bp, bt)) => {
                    s > bs || (s == bs && (pid.as_str(), text.as_str()) < (bp, bt))
                }
            };
            if better {
                best = Some((s, pid, text));
            }
        }
        let (best_score, _, _) = best.unwrap();
        let idx = texts.iter().position(|(_, t)| t == negative).unwrap();
        let chosen = bm25_formula(&q, idx, &as_str, 1.2, 0.75);
        assert!(chosen <= best_score + 1e-12);
        assert_ne!(owner[negative], owner[query]);
    }
    // The first positive of every query takes the single best-ranked negative.
    let (q0, n0) = &negatives[0];
    let q = adapter_distill::tokenizer::words(q0);
    let q: Vec<&str> = q.iter().map(String::as_str).collect();
    let top = texts
        .iter()
        .enumerate()
        .filter(|(_, (pid, _))| *pid != owner[q0])
        .map(|(i, (pid, t))| {
            (
                bm25_formula(&q, i, &as_str, 1.2, 0.75),
                pid.clone(),
                t.clone(),
            )
        })
        .max_by(|a, b| {
            a.0.total_cmp(&b.0)
                .then_with(|| b.1.cmp(&a.1))
                .then_with(|| b.2.cmp(&a.2))
        })
        .unwrap();
    assert_eq!(&top.2, n0);
}

#[test]
fn two_point_kb_only_crosses() {
    let kb = kb(&[&["alpha one", "alpha two"], &["beta one", "beta two"]]);
    let owner = point_of(&kb);
    for (q, c) in build_negatives(&kb, 1, 10).unwrap() {
        assert_ne!(owner[&q], owner[&c]);
    }
}

#[test]
fn single_point_kb_is_a_usage_error() {
    let kb = kb(&[&["alpha one", "alpha two"]]);
    assert!(matches!(build_negatives(&kb, 1, 10), Err(Error::Usage(_))));
}

#[test]
fn single_document_hand_value() {
    let docs = vec![vec!["refund"]];
    let stats = CorpusStats::from_docs(&docs).unwrap();
    let s = bm25_score(&["refund"], &docs[0], &stats, Bm25Params::default());
    // N = n = 1: ln((1 - 1 + 0.5) / (1 + 0.5) + 1) with a unit term-frequency factor.
    assert!((s - (4.0f64 / 3.0).ln()).abs() <= 1e-12);
}

fn corpus_strategy() -> impl Strategy<Value = Vec<Vec<String>>> {
    prop::collection::vec(prop::collection::vec(0u8..10, 1..8), 1..=100).prop_map(|docs| {
        docs.into_iter()
            .map(|d| d.into_iter().map(|w| format!("t{w}")).collect())
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn bm25_matches_formula(corpus in corpus_strategy(), query in prop::collection::vec(0u8..12, 1..5)) {
        let q: Vec<String> = query.into_iter().map(|w| format!("t{w}")).collect();
        let q: Vec<&str> = q.iter().map(String::as_str).collect();
        let as_str: Vec<Vec<&str>> = corpus.iter().map(|d| d.iter().map(String::as_str).collect()).collect();
        let stats = CorpusStats::from_docs(&corpus).unwrap();
        let index = Bm25Index::new(&corpus, Bm25Params::default()).unwrap();
        let all = index.score_all(&q);
        for (i, doc) in corpus.iter().enumerate() {
            let want = bm25_formula(&q, i, &as_str, 1.2, 0.75);
            prop_assert!((bm25_score(&q, doc, &stats, Bm25Params::default()) - want).abs() <= 1e-12);
            prop_assert!((all[i] - want).abs() <= 1e-12);
            prop_assert!(all[i] >= 0.0);
        }
    }

    #[test]
    fn auc_matches_pairwise(pairs in prop::collection::vec((0u8..5, 0u8..2), 2..=50)) {
        let scores: Vec<f64> = pairs.iter().map(|(s, _)| f64::from(*s) / 4.0).collect();
        let labels: Vec<u8> = pairs.iter().map(|(_, l)| *l).collect();
        let both = labels.contains(&0) && labels.contains(&1);
        match auc(&scores, &labels) {
            Ok(a) => { prop_assert!(both); prop_assert_eq!(a, auc_pairwise(&scores, &labels)); }
            Err(_) => prop_assert!(!both),
        }
    }

    #[test]
    fn datasets_are_sound_and_stratified(seed in 0u64..1000, points in 3usize..20) {
        let tenants = SyntheticConfig { num_tenants: 1, points_per_tenant: points, seed, ..SyntheticConfig::default() }
            .generate()
            .unwrap();
        let kb = &tenants[0].kb;
        let a = build_dataset(kb, DatasetOptions::default()).unwrap();
        let b = build_dataset(kb, DatasetOptions::default()).unwrap();
        prop_assert_eq!(a.to_text(), b.to_text());
        let owner = point_of(kb);
        for e in &a.examples {
            let same = owner[&e.query] == owner[&e.candidate];
            prop_assert_eq!(same, e.label == 1);
        }
        let counts = a.counts();
        for label in 0..2 {
            let total: usize = counts.iter().map(|c| c[label]).sum();
            for (s, frac) in Split::ALL.iter().zip([0.8, 0.1, 0.1]) {
                let dev = (counts[s.index()][label] as f64 - frac * total as f64).abs();
                prop_assert!(dev <= 1.0, "split {} label {} off by {}", s, label, dev);
            }
        }
    }
}

#[test]
fn student_suite_size_in_range() {
    let cfg = adapter_distill::reproduce::SuiteConfig::default();
    let tenants = SyntheticConfig {
        num_tenants: cfg.teachers + 1,
        points_per_tenant: cfg.student_points,
        shared_structure_fraction: cfg.shared_structure_fraction,
        ..SyntheticConfig::default()
    }
    .generate()
    .unwrap();
    let data = build_dataset(&tenants[cfg.teachers].kb, cfg.dataset).unwrap();
    assert!((1000..=5000).contains(&data.len()), "{}", data.len());
}
