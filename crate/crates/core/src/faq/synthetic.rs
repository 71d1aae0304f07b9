//! Synthetic multi-tenant FAQ corpora.
//!
//! Every knowledge point is defined by a pattern of two keywords (a topic
//! and an intent drawn from a grid, so patterns overlap in one keyword
//! with many neighbours). Its questions contain both keywords plus a few
//! filler words from a pool shared by all tenants. A configurable share of
//! each tenant's patterns comes from a pool common to every tenant; the
//! rest use keywords no other tenant sees.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kb::{KnowledgeBase, KnowledgePoint};
use crate::error::{Error, Result};
use crate::tokenizer::{words, Tokenizer};

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub num_tenants: usize,
    pub points_per_tenant: usize,
    pub questions_per_point: usize,
    pub shared_structure_fraction: f64,
    pub filler_pool: usize,
    pub min_fillers: usize,
    pub max_fillers: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_tenants: 10,
            points_per_tenant: 90,
            questions_per_point: 4,
            shared_structure_fraction: 0.5,
            filler_pool: 1000,
            min_fillers: 1,
            max_fillers: 2,
            seed: 0,
        }
    }
}

/// Keyword pair identifying a knowledge point.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Pattern {
    pub topic: String,
    pub intent: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTenant {
    pub kb: KnowledgeBase,
    /// Pattern of each point, aligned with `kb.points`.
    pub patterns: Vec<Pattern>,
}

/// Deterministic pronounceable word for an index: three or more
/// consonant-vowel syllables.
fn pseudo_word(mut n: usize) -> String {
    let base = CONSONANTS.len() * VOWELS.len();
    let mut out = String::new();
    for _ in 0..3 {
        let s = n % base;
        out.push(CONSONANTS[s / VOWELS.len()] as char);
        out.push(VOWELS[s % VOWELS.len()] as char);
        n /= base;
    }
    while n > 0 {
        let s = n % base;
        out.push(CONSONANTS[s / VOWELS.len()] as char);
        out.push(VOWELS[s % VOWELS.len()] as char);
        n /= base;
    }
    out
}

struct WordSource {
    next: usize,
}

impl WordSource {
    fn take(&mut self, n: usize) -> Vec<String> {
        let out = (self.next..self.next + n).map(pseudo_word).collect();
        self.next += n;
        out
    }
}

/// `count` patterns on a square topic × intent grid of fresh keywords.
fn grid(words: &mut WordSource, count: usize, slack: f64) -> Vec<Pattern> {
    if count == 0 {
        return Vec::new();
    }
    let side = ((count as f64 * slack).sqrt().ceil() as usize).max(2);
    let topics = words.take(side);
    let intents = words.take(side);
    let mut out = Vec::with_capacity(side * side);
    for t in &topics {
        for i in &intents {
            out.push(Pattern {
                topic: t.clone(),
                intent: i.clone(),
            });
        }
    }
    out
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.shared_structure_fraction) {
            return Err(Error::Config(format!(
                "shared_structure_fraction {} outside [0, 1]",
                self.shared_structure_fraction
            )));
        }
        if self.questions_per_point == 0 || self.points_per_tenant == 0 {
            return Err(Error::Config(
                "tenants need points and points need questions".into(),
            ));
        }
        if self.min_fillers > self.max_fillers || (self.max_fillers > 0 && self.filler_pool == 0) {
            return Err(Error::Config("inconsistent filler settings".into()));
        }
        Ok(())
    }

    fn shared_per_tenant(&self) -> usize {
        (self.shared_structure_fraction * self.points_per_tenant as f64).round() as usize
    }

    pub fn generate(&self) -> Result<Vec<SyntheticTenant>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut source = WordSource { next: 0 };
        let fillers = source.take(self.filler_pool);
        let n_shared = self.shared_per_tenant();
        let n_unique = self.points_per_tenant - n_shared;
        let shared_pool = grid(&mut source, n_shared, 2.0);

        let mut tenants = Vec::with_capacity(self.num_tenants);
        for t in 0..self.num_tenants {
            let mut patterns: Vec<Pattern> = shared_pool
                .choose_multiple(&mut rng, n_shared)
                .cloned()
                .collect();
            let own = grid(&mut source, n_unique, 1.0);
            patterns.extend(own.choose_multiple(&mut rng, n_unique).cloned());
            patterns.shuffle(&mut rng);

            let mut points = Vec::with_capacity(patterns.len());
            for (pi, pat) in patterns.iter().enumerate() {
                let mut qs: Vec<String> = Vec::with_capacity(self.questions_per_point);
                let mut attempts = 0;
                while qs.len() < self.questions_per_point {
                    let q = self.question(pat, &fillers, &mut rng);
                    attempts += 1;
                    if !qs.contains(&q) || attempts > 50 {
                        qs.push(q);
                    }
                }
                points.push(KnowledgePoint {
                    point_id: format!("p{pi:03}"),
                    standard_question: qs[0].clone(),
                    similar_questions: qs[1..].to_vec(),
                });
            }
            tenants.push(SyntheticTenant {
                kb: KnowledgeBase::new(&format!("tenant{:02}", t + 1), points)?,
                patterns,
            });
        }
        Ok(tenants)
    }

    fn question(&self, pattern: &Pattern, fillers: &[String], rng: &mut ChaCha8Rng) -> String {
        let k = rng.gen_range(self.min_fillers..=self.max_fillers);
        let mut ws: Vec<&str> = vec![&pattern.topic, &pattern.intent];
        for _ in 0..k {
            ws.push(&fillers[rng.gen_range(0..fillers.len())]);
        }
        ws.shuffle(rng);
        ws.join(" ")
    }
}

pub fn make_synthetic_tenants(
    num_tenants: usize,
    points_per_tenant: usize,
    shared_structure_fraction: f64,
    seed: u64,
) -> Result<Vec<KnowledgeBase>> {
    let cfg = SyntheticConfig {
        num_tenants,
        points_per_tenant,
        shared_structure_fraction,
        seed,
        ..SyntheticConfig::default()
    };
    Ok(cfg.generate()?.into_iter().map(|t| t.kb).collect())
}

/// Distinct words across a set of knowledge bases.
pub fn vocabulary(kbs: &[KnowledgeBase]) -> BTreeSet<String> {
    kbs.iter()
        .flat_map(|kb| kb.points.iter())
        .flat_map(|p| p.questions().flat_map(words).collect::<Vec<_>>())
        .collect()
}

/// Fraction of distinct words whose token id is shared with another word.
pub fn collision_rate(vocab: &BTreeSet<String>, tokenizer: &Tokenizer) -> f64 {
    if vocab.is_empty() {
        return 0.0;
    }
    let mut counts = std::collections::HashMap::new();
    for w in vocab {
        *counts.entry(tokenizer.word_id(w)).or_insert(0usize) += 1;
    }
    let colliding: usize = counts.values().filter(|&&c| c > 1).sum();
    colliding as f64 / vocab.len() as f64
}
