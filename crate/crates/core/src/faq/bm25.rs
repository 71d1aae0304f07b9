//! Okapi BM25 with the non-negative `ln(1 + ...)` IDF.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub const DEFAULT_K1: f64 = 1.2;
pub const DEFAULT_B: f64 = 0.75;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self {
            k1: DEFAULT_K1,
            b: DEFAULT_B,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusStats {
    pub num_docs: usize,
    pub doc_freq: HashMap<String, usize>,
    pub avg_doc_len: f64,
}

impl CorpusStats {
    pub fn from_docs<S: AsRef<str>>(docs: &[Vec<S>]) -> Result<Self> {
        if docs.is_empty() {
            return Err(Error::Usage("BM25 needs a nonempty corpus".into()));
        }
        let mut doc_freq: HashMap<String, usize> = HashMap::new();
        let mut total = 0usize;
        for d in docs {
            total += d.len();
            let mut terms: Vec<&str> = d.iter().map(AsRef::as_ref).collect();
            terms.sort_unstable();
            terms.dedup();
            for t in terms {
                *doc_freq.entry(t.to_string()).or_default() += 1;
            }
        }
        Ok(Self {
            num_docs: docs.len(),
            doc_freq,
            avg_doc_len: total as f64 / docs.len() as f64,
        })
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.doc_freq.get(term).copied().unwrap_or(0) as f64;
        ((self.num_docs as f64 - n + 0.5) / (n + 0.5) + 1.0).ln()
    }
}

fn term_weight(idf: f64, tf: f64, doc_len: f64, stats: &CorpusStats, params: Bm25Params) -> f64 {
    let norm = 1.0 - params.b + params.b * doc_len / stats.avg_doc_len.max(f64::MIN_POSITIVE);
    idf * tf * (params.k1 + 1.0) / (tf + params.k1 * norm)
}

/// Distinct terms of `query` in order of first appearance.
fn distinct<S: AsRef<str>>(query: &[S]) -> Vec<&str> {
    let mut out: Vec<&str> = Vec::new();
    for q in query {
        if !out.contains(&q.as_ref()) {
            out.push(q.as_ref());
        }
    }
    out
}

/// BM25 of one document. Each distinct query term contributes once.
pub fn bm25_score<S: AsRef<str>, T: AsRef<str>>(
    query: &[S],
    doc: &[T],
    stats: &CorpusStats,
    params: Bm25Params,
) -> f64 {
    let mut score = 0.0;
    for term in distinct(query) {
        let tf = doc.iter().filter(|t| t.as_ref() == term).count();
        if tf > 0 {
            score += term_weight(stats.idf(term), tf as f64, doc.len() as f64, stats, params);
        }
    }
    score
}

/// Inverted index over a fixed corpus.
#[derive(Debug, Clone)]
pub struct Bm25Index {
    stats: CorpusStats,
    params: Bm25Params,
    doc_lens: Vec<usize>,
    postings: HashMap<String, Vec<(usize, usize)>>,
}

impl Bm25Index {
    pub fn new<S: AsRef<str>>(docs: &[Vec<S>], params: Bm25Params) -> Result<Self> {
        let stats = CorpusStats::from_docs(docs)?;
        let mut postings: HashMap<String, Vec<(usize, usize)>> = HashMap::new();
        for (i, d) in docs.iter().enumerate() {
            let mut counts: Vec<(&str, usize)> = Vec::new();
            for t in d {
                match counts.iter_mut().find(|(w, _)| *w == t.as_ref()) {
                    Some((_, c)) => *c += 1,
                    None => counts.push((t.as_ref(), 1)),
                }
            }
            for (t, c) in counts {
                postings.entry(t.to_string()).or_default().push((i, c));
            }
        }
        Ok(Self {
            stats,
            params,
            doc_lens: docs.iter().map(Vec::len).collect(),
            postings,
        })
    }

    pub fn stats(&self) -> &CorpusStats {
        &self.stats
    }

    pub fn num_docs(&self) -> usize {
        self.doc_lens.len()
    }

    /// Scores of every document, accumulated term by term in the same
    /// order as [`bm25_score`].
    pub fn score_all<S: AsRef<str>>(&self, query: &[S]) -> Vec<f64> {
        let mut scores = vec![0.0; self.doc_lens.len()];
        for term in distinct(query) {
            let Some(list) = self.postings.get(term) else {
                continue;
            };
            let idf = self.stats.idf(term);
            for &(doc, tf) in list {
                scores[doc] += term_weight(
                    idf,
                    tf as f64,
                    self.doc_lens[doc] as f64,
                    &self.stats,
                    self.params,
                );
            }
        }
        scores
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn single_doc_hand_value() {
        let docs = vec![toks("x")];
        let stats = CorpusStats::from_docs(&docs).unwrap();
        let s = bm25_score(&toks("x"), &docs[0], &stats, Bm25Params::default());
        // N = 1, n = 1: ln(0.5 / 1.5 + 1), and the tf factor is exactly 1
        assert!((s - (4.0f64 / 3.0).ln()).abs() <= 1e-12);
    }

    #[test]
    fn absent_terms_score_zero() {
        let docs = vec![toks("a b"), toks("c")];
        let stats = CorpusStats::from_docs(&docs).unwrap();
        assert_eq!(
            bm25_score(&toks("z"), &docs[0], &stats, Bm25Params::default()),
            0.0
        );
    }

    #[test]
    fn empty_corpus_rejected() {
        let docs: Vec<Vec<String>> = vec![];
        assert!(matches!(
            CorpusStats::from_docs(&docs),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn nondecreasing_in_term_frequency() {
        let docs = vec![toks("a b c"), toks("b c d"), toks("a a")];
        let stats = CorpusStats::from_docs(&docs).unwrap();
        let mut last = 0.0;
        for f in 1..=10 {
            let doc: Vec<String> = (0..10)
                .map(|i| if i < f { "a" } else { "q" }.to_string())
                .collect();
            let s = bm25_score(&toks("a"), &doc, &stats, Bm25Params::default());
            assert!(s >= last);
            last = s;
        }
    }

    #[test]
    fn index_matches_direct_scoring_bitwise() {
        let docs = vec![toks("a b c a"), toks("b c d"), toks("a e"), toks("f")];
        let index = Bm25Index::new(&docs, Bm25Params::default()).unwrap();
        let q = toks("a c a f");
        let all = index.score_all(&q);
        for (i, d) in docs.iter().enumerate() {
            let direct = bm25_score(&q, d, index.stats(), Bm25Params::default());
            assert_eq!(all[i].to_bits(), direct.to_bits());
        }
    }
}
