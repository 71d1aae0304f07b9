use crate::backbone::predicted_label;
use crate::error::{Error, Result};

/// Fraction of examples whose thresholded probability matches the label.
pub fn accuracy(probs: &[f64], labels: &[u8]) -> Result<f64> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(Error::Metric(format!(
            "{} probabilities for {} labels",
            probs.len(),
            labels.len()
        )));
    }
    let correct = probs
        .iter()
        .zip(labels)
        .filter(|(&p, &l)| predicted_label(p) == (l == 1))
        .count();
    Ok(correct as f64 / probs.len() as f64)
}

/// `P(s+ > s-) + ½ P(s+ = s-)` over all positive/negative pairs.
///
/// Counts are kept as integers (twice the win count plus the tie count),
/// so the result is a single division.
pub fn auc(probs: &[f64], labels: &[u8]) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(Error::Metric("scores and labels differ in length".into()));
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[a].total_cmp(&probs[b]));
    let positives = labels.iter().filter(|&&l| l == 1).count() as u128;
    let negatives = labels.len() as u128 - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::Metric(format!(
            "AUC needs both classes, found {positives} positive and {negatives} negative"
        )));
    }
    let mut doubled: u128 = 0;
    let mut negatives_below: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0u128, 0u128);
        while j < order.len() && probs[order[j]] == probs[order[i]] {
            if labels[order[j]] == 1 {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        doubled += 2 * pos * negatives_below + pos * neg;
        negatives_below += neg;
        i = j;
    }
    Ok(doubled as f64 / (2 * positives * negatives) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    /// `None` when the set holds a single class.
    pub auc: Option<f64>,
    pub examples: usize,
    pub positives: usize,
}

impl EvalReport {
    pub fn from_scores(probs: &[f64], labels: &[u8]) -> Result<Self> {
        let accuracy = accuracy(probs, labels)?;
        let auc = match auc(probs, labels) {
            Ok(a) => Some(a),
            Err(Error::Metric(_)) => None,
            Err(e) => return Err(e),
        };
        Ok(Self {
            accuracy,
            auc,
            examples: labels.len(),
            positives: labels.iter().filter(|&&l| l == 1).count(),
        })
    }

    /// AUC, failing when it is undefined.
    pub fn require_auc(&self) -> Result<f64> {
        self.auc
            .ok_or_else(|| Error::Metric("AUC undefined on a single-class set".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_orderings() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(auc(&[0.5; 4], &[0, 1, 0, 1]).unwrap(), 0.5);
        assert_eq!(auc(&[0.9, 0.8, 0.2], &[0, 0, 1]).unwrap(), 0.0);
    }

    #[test]
    fn single_class_is_undefined() {
        assert!(matches!(auc(&[0.3, 0.7], &[1, 1]), Err(Error::Metric(_))));
        let r = EvalReport::from_scores(&[0.3, 0.7], &[1, 1]).unwrap();
        assert_eq!(r.accuracy, 0.5);
        assert!(r.auc.is_none());
    }

    #[test]
    fn threshold_is_inclusive() {
        assert_eq!(accuracy(&[0.5, 0.49], &[1, 0]).unwrap(), 1.0);
    }
}
