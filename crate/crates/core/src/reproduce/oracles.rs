//! Slow, loop-based reference implementations that share no code with
//! the library paths they check.

use autograd::Tensor;

use crate::fusion::DistillNorm;

pub const REFERENCE_FULL: [usize; 6] = [1, 2, 13, 26, 130, 261];
pub const REFERENCE_FUSION: [usize; 6] = [0, 6, 53, 111, 578, 1161];
pub const REFERENCE_DISTILL: [usize; 6] = [18, 109, 815, 1698, 8760, 17587];
pub const REFERENCE_FRACTION_PERCENT: f64 = 1.45;

/// Fusion attention for one layer, element by element: per token,
/// `p = softmax_n(<h Q, z_n K>)` and `o = sum_n p_n z_n V`.
pub fn fusion_scalar(
    h: &Tensor,
    zs: &[Tensor],
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let (t, d) = (h.shape()[0], h.shape()[1]);
    let at = |m: &Tensor, r: usize, c: usize| m.data()[r * m.shape()[1] + c];
    let row_times = |x: &Tensor, r: usize, w: &Tensor, c: usize| {
        (0..d).map(|i| at(x, r, i) * at(w, i, c)).sum::<f64>()
    };
    let mut outputs = Vec::with_capacity(t);
    let mut probs = Vec::with_capacity(t);
    for r in 0..t {
        let scores: Vec<f64> = zs
            .iter()
            .map(|z| {
                (0..d)
                    .map(|c| row_times(h, r, q, c) * row_times(z, r, k, c))
                    .sum()
            })
            .collect();
        let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
        let total: f64 = exps.iter().sum();
        let p: Vec<f64> = exps.iter().map(|e| e / total).collect();
        let o: Vec<f64> = (0..d)
            .map(|c| {
                zs.iter()
                    .zip(&p)
                    .map(|(z, pn)| pn * row_times(z, r, v, c))
                    .sum()
            })
            .collect();
        outputs.push(o);
        probs.push(p);
    }
    (outputs, probs)
}

/// Distillation loss by explicit loops over layers, tokens and dimensions.
pub fn distill_double_loop(o: &[Tensor], z: &[Tensor], mask: &[f64], norm: DistillNorm) -> f64 {
    let d = o[0].shape()[1];
    let real: f64 = mask.iter().sum();
    let mut total = 0.0;
    for (ol, zl) in o.iter().zip(z) {
        for (t, &m) in mask.iter().enumerate() {
            if m == 0.0 {
                continue;
            }
            let mut sq = 0.0;
            for c in 0..d {
                let diff = ol.data()[t * d + c] - zl.data()[t * d + c];
                sq += diff * diff;
            }
            total += match norm {
                DistillNorm::MeanSquared => sq,
                DistillNorm::L2 => sq.sqrt(),
            };
        }
    }
    let per = match norm {
        DistillNorm::MeanSquared => d as f64,
        DistillNorm::L2 => 1.0,
    };
    total / (o.len() as f64 * real * per)
}

/// BM25 recomputed from raw counts for one query and one document of
/// `corpus`, with `ln(1 + (N - n + 0.5)/(n + 0.5))` IDF.
pub fn bm25_formula(
    query: &[&str],
    doc_index: usize,
    corpus: &[Vec<&str>],
    k1: f64,
    b: f64,
) -> f64 {
    let n_docs = corpus.len() as f64;
    let avgdl = corpus.iter().map(|d| d.len() as f64).sum::<f64>() / n_docs;
    let doc = &corpus[doc_index];
    let mut seen: Vec<&str> = Vec::new();
    let mut score = 0.0;
    for &term in query {
        if seen.contains(&term) {
            continue;
        }
        seen.push(term);
        let tf = doc.iter().filter(|&&w| w == term).count() as f64;
        if tf == 0.0 {
            continue;
        }
        let n = corpus.iter().filter(|d| d.contains(&term)).count() as f64;
        let idf = (1.0 + (n_docs - n + 0.5) / (n + 0.5)).ln();
        let len_norm = 1.0 - b + b * doc.len() as f64 / avgdl;
        score += idf * (tf * (k1 + 1.0)) / (tf + k1 * len_norm);
    }
    score
}

/// Fraction of positive/negative pairs ranked correctly, ties counting
/// half, by visiting every pair.
pub fn auc_pairwise(scores: &[f64], labels: &[u8]) -> f64 {
    let mut doubled = 0u64;
    let mut pairs = 0u64;
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 1;
            doubled += if si > sj {
                2
            } else if si == sj {
                1
            } else {
                0
            };
        }
    }
    doubled as f64 / (2 * pairs) as f64
}
