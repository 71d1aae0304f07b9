use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use super::bm25::{Bm25Index, Bm25Params};
use super::kb::KnowledgeBase;
use crate::error::{Error, Result};
use crate::tokenizer::words;

pub const DEFAULT_POSITIVE_CAP: usize = 10;
pub const DEFAULT_NEGATIVES_PER_POSITIVE: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Cycle of ten with validation in the middle, so every prefix of the
    /// cycle stays within one example of the 8:1:1 proportions.
    fn from_rank(rank: usize) -> Self {
        match rank % 10 {
            4 => Split::Val,
            9 => Split::Test,
            _ => Split::Train,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Format(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledPair {
    pub id: String,
    pub query: String,
    pub candidate: String,
    pub label: u8,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LabeledPairs {
    pub examples: Vec<LabeledPair>,
}

impl LabeledPairs {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn split(&self, split: Split) -> Vec<&LabeledPair> {
        self.examples.iter().filter(|e| e.split == split).collect()
    }

    /// `counts[split][label]`
    pub fn counts(&self) -> [[usize; 2]; 3] {
        let mut c = [[0; 2]; 3];
        for e in &self.examples {
            c[e.split.index()][usize::from(e.label)] += 1;
        }
        c
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.examples {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                e.id, e.query, e.candidate, e.label, e.split
            ));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut examples = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let err = |message: String| Error::Parse {
                line: i + 1,
                message,
            };
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 5 {
                return Err(err(format!(
                    "expected 5 tab-separated fields, found {}",
                    f.len()
                )));
            }
            let label = match f[3] {
                "0" => 0,
                "1" => 1,
                other => return Err(err(format!("label {other:?} is not 0 or 1"))),
            };
            let split = f[4].parse().map_err(|e: Error| err(e.to_string()))?;
            examples.push(LabeledPair {
                id: f[0].to_string(),
                query: f[1].to_string(),
                candidate: f[2].to_string(),
                label,
                split,
            });
        }
        Ok(Self { examples })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetOptions {
    pub positive_cap: usize,
    pub negatives_per_positive: usize,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        Self {
            positive_cap: DEFAULT_POSITIVE_CAP,
            negatives_per_positive: DEFAULT_NEGATIVES_PER_POSITIVE,
        }
    }
}

/// Unordered within-point question pairs, at most `cap` per point, in
/// point order then lexicographic index order.
pub fn build_positives(kb: &KnowledgeBase, cap: usize) -> Vec<(String, String)> {
    positives_by_point(kb, cap)
        .into_iter()
        .map(|(_, q, c)| (q, c))
        .collect()
}

fn positives_by_point(kb: &KnowledgeBase, cap: usize) -> Vec<(usize, String, String)> {
    let mut out = Vec::new();
    for (pi, p) in kb.points.iter().enumerate() {
        let qs: Vec<&str> = p.questions().collect();
        let pairs = (0..qs.len()).flat_map(|i| (i + 1..qs.len()).map(move |j| (i, j)));
        for (i, j) in pairs.take(cap) {
            out.push((pi, qs[i].to_string(), qs[j].to_string()));
        }
    }
    out
}

struct Question<'a> {
    point: usize,
    point_id: &'a str,
    text: &'a str,
}

fn questions(kb: &KnowledgeBase) -> Vec<Question<'_>> {
    kb.points
        .iter()
        .enumerate()
        .flat_map(|(pi, p)| {
            p.questions().map(move |q| Question {
                point: pi,
                point_id: &p.point_id,
                text: q,
            })
        })
        .collect()
}

/// Cross-point candidates for `query` from point `point`, best first:
/// BM25 descending, then point id, then question text.
fn ranked_candidates<'a>(
    index: &Bm25Index,
    qs: &'a [Question<'a>],
    point: usize,
    query: &str,
) -> Vec<&'a str> {
    let scores = index.score_all(&words(query));
    let mut cands: Vec<usize> = (0..qs.len()).filter(|&i| qs[i].point != point).collect();
    cands.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then_with(|| qs[a].point_id.cmp(qs[b].point_id))
            .then_with(|| qs[a].text.cmp(qs[b].text))
    });
    cands.into_iter().map(|i| qs[i].text).collect()
}

/// BM25 hard negatives: for the k-th positive of a query, the next
/// `per_positive` candidates of that query's ranking (wrapping around).
pub fn build_negatives(
    kb: &KnowledgeBase,
    per_positive: usize,
    cap: usize,
) -> Result<Vec<(String, String)>> {
    if per_positive == 0 {
        return Err(Error::Usage(
            "negatives per positive must be at least 1".into(),
        ));
    }
    if kb.points.len() < 2 {
        return Err(Error::Usage(format!(
            "knowledge base {} has {} point(s); negatives need at least two",
            kb.tenant_id,
            kb.points.len()
        )));
    }
    let qs = questions(kb);
    let docs: Vec<Vec<String>> = qs.iter().map(|q| words(q.text)).collect();
    let index = Bm25Index::new(&docs, Bm25Params::default())?;
    let mut rankings: HashMap<(usize, String), (Vec<&str>, usize)> = HashMap::new();
    let mut out = Vec::new();
    for (point, query, _) in positives_by_point(kb, cap) {
        let (ranked, used) = rankings
            .entry((point, query.clone()))
            .or_insert_with(|| (ranked_candidates(&index, &qs, point, &query), 0));
        for _ in 0..per_positive {
            out.push((query.clone(), ranked[*used % ranked.len()].to_string()));
            *used += 1;
        }
    }
    Ok(out)
}

fn example_id(tenant: &str, query: &str, candidate: &str, label: u8) -> String {
    let digest = Sha256::digest(format!("{tenant}\t{query}\t{candidate}\t{label}").as_bytes());
    hex::encode(&digest[..8])
}

fn unordered_key(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

/// Positives, BM25 negatives and an 8:1:1 split stratified by label.
///
/// Within each label, examples are ordered by the SHA-256 of their id and
/// assigned train/val/test by rank modulo 10. Pairs are deduplicated as
/// unordered question pairs, positives first.
pub fn build_dataset(kb: &KnowledgeBase, options: DatasetOptions) -> Result<LabeledPairs> {
    let positives = build_positives(kb, options.positive_cap);
    let negatives = build_negatives(kb, options.negatives_per_positive, options.positive_cap)?;
    let mut seen = HashSet::new();
    let mut by_label: [Vec<LabeledPair>; 2] = [Vec::new(), Vec::new()];
    for (label, pairs) in [(1u8, positives), (0u8, negatives)] {
        for (q, c) in pairs {
            if q == c || !seen.insert(unordered_key(&q, &c)) {
                continue;
            }
            by_label[usize::from(label)].push(LabeledPair {
                id: example_id(&kb.tenant_id, &q, &c, label),
                query: q,
                candidate: c,
                label,
                split: Split::Train,
            });
        }
    }
    let mut examples = Vec::new();
    for mut group in by_label.into_iter().rev() {
        let mut keyed: Vec<([u8; 32], LabeledPair)> = group
            .drain(..)
            .map(|e| (Sha256::digest(e.id.as_bytes()).into(), e))
            .collect();
        keyed.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.id.cmp(&b.1.id)));
        for (rank, (_, mut e)) in keyed.into_iter().enumerate() {
            e.split = Split::from_rank(rank);
            examples.push(e);
        }
    }
    Ok(LabeledPairs { examples })
}
