//! Pairwise scoring of a recovered address partition against ground truth.

use std::collections::HashMap;
use std::io::{self, Write};

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("address {0} is labelled in one partition but not the other")]
    UniverseMismatch(String),
    #[error("partitions have different sizes ({predicted} vs {truth})")]
    SizeMismatch { predicted: usize, truth: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub predicted_pairs: u64,
    pub truth_pairs: u64,
    pub agreeing_pairs: u64,
}

fn pairs(n: u64) -> u64 {
    n * n.saturating_sub(1) / 2
}

/// Precision and recall over unordered address pairs placed in the same
/// cluster. With no predicted pairs precision is 1; with no true pairs
/// recall is 1.
pub fn score_partition(
    predicted: &HashMap<String, u64>,
    truth: &HashMap<String, u64>,
) -> Result<PairScore, EvalError> {
    if predicted.len() != truth.len() {
        return Err(EvalError::SizeMismatch { predicted: predicted.len(), truth: truth.len() });
    }
    let mut cells: HashMap<(u64, u64), u64> = HashMap::new();
    let mut pred_sizes: HashMap<u64, u64> = HashMap::new();
    let mut truth_sizes: HashMap<u64, u64> = HashMap::new();
    for (addr, &p) in predicted {
        let &t = truth.get(addr).ok_or_else(|| EvalError::UniverseMismatch(addr.clone()))?;
        *cells.entry((p, t)).or_default() += 1;
        *pred_sizes.entry(p).or_default() += 1;
        *truth_sizes.entry(t).or_default() += 1;
    }
    let agreeing: u64 = cells.values().map(|&c| pairs(c)).sum();
    let predicted_pairs: u64 = pred_sizes.values().map(|&c| pairs(c)).sum();
    let truth_pairs: u64 = truth_sizes.values().map(|&c| pairs(c)).sum();
    let precision = if predicted_pairs == 0 { 1.0 } else { agreeing as f64 / predicted_pairs as f64 };
    let recall = if truth_pairs == 0 { 1.0 } else { agreeing as f64 / truth_pairs as f64 };
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    Ok(PairScore { precision, recall, f1, predicted_pairs, truth_pairs, agreeing_pairs: agreeing })
}

pub const EVAL_CSV_HEADER: &str = "stream_seed,precision,recall,f1";

pub fn write_eval_row<W: Write>(mut w: W, seed: u64, s: &PairScore) -> io::Result<()> {
    writeln!(w, "{},{},{},{}", seed, s.precision, s.recall, s.f1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(v: &[(&str, u64)]) -> HashMap<String, u64> {
        v.iter().map(|(a, l)| (a.to_string(), *l)).collect()
    }

    #[test]
    fn identical_partitions_score_one() {
        let p = labels(&[("a", 0), ("b", 0), ("c", 1)]);
        let s = score_partition(&p, &p).unwrap();
        assert_eq!((s.precision, s.recall, s.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn over_and_under_merging() {
        let truth = labels(&[("a", 0), ("b", 0), ("c", 1), ("d", 1)]);
        let merged = labels(&[("a", 0), ("b", 0), ("c", 0), ("d", 0)]);
        let s = score_partition(&merged, &truth).unwrap();
        assert_eq!(s.recall, 1.0);
        assert!((s.precision - 2.0 / 6.0).abs() < 1e-15);
        let split = labels(&[("a", 0), ("b", 1), ("c", 2), ("d", 3)]);
        let s = score_partition(&split, &truth).unwrap();
        assert_eq!((s.precision, s.recall, s.f1), (1.0, 0.0, 0.0));
    }

    #[test]
    fn universe_must_match() {
        let a = labels(&[("a", 0)]);
        let b = labels(&[("b", 0)]);
        assert_eq!(score_partition(&a, &b), Err(EvalError::UniverseMismatch("a".into())));
        assert!(matches!(score_partition(&a, &labels(&[])), Err(EvalError::SizeMismatch { .. })));
    }
}
