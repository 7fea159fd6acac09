//! Ranking and classification metrics.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::data::{GeneVocabs, KnownAssociationSet, MatchKey, Repertoire};
use crate::error::{Error, Result};

fn check_inputs(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::InvalidArgument(format!("score {i} is NaN")));
    }
    let npos = labels.iter().filter(|&&l| l).count();
    let nneg = labels.len() - npos;
    if npos == 0 || nneg == 0 {
        return Err(Error::SingleClass(format!(
            "{npos} positives and {nneg} negatives"
        )));
    }
    Ok((npos, nneg))
}

/// Indices sorted by ascending score.
fn ascending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));
    idx
}

/// Area under the ROC curve: P(s⁺ > s⁻) + ½ P(s⁺ = s⁻).
///
/// Computed as an exact integer pair count over tie groups, so the result is
/// the same rational number an all-pairs count would give.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (npos, nneg) = check_inputs(scores, labels)?;
    let idx = ascending(scores);
    // Twice the Mann-Whitney U, kept integral.
    let mut u2: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        let (mut pos_g, mut neg_g) = (0u128, 0u128);
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            if labels[idx[j]] {
                pos_g += 1;
            } else {
                neg_g += 1;
            }
            j += 1;
        }
        u2 += 2 * pos_g * neg_below + pos_g * neg_g;
        neg_below += neg_g;
        i = j;
    }
    Ok(u2 as f64 / (2 * npos as u128 * nneg as u128) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    pub threshold: f64,
}

/// ROC curve vertices from (0, 0) at threshold +∞ down to (1, 1), one per
/// distinct score.
pub fn roc_points(scores: &[f64], labels: &[bool]) -> Result<Vec<RocPoint>> {
    let (npos, nneg) = check_inputs(scores, labels)?;
    let mut idx = ascending(scores);
    idx.reverse();
    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < idx.len() {
        let v = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == v {
            if labels[idx[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            fpr: fp as f64 / nneg as f64,
            tpr: tp as f64 / npos as f64,
            threshold: v,
        });
    }
    Ok(points)
}

fn f1_from_counts(tp: usize, fp: usize, fneg: usize) -> f64 {
    if tp == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fneg) as f64
    }
}

/// F1 and accuracy of the rule `score ≥ threshold ⇒ positive`.
pub fn f1_accuracy(scores: &[f64], labels: &[bool], threshold: f64) -> Result<(f64, f64)> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Err(Error::InvalidArgument("no scores".into()));
    }
    let (mut tp, mut fp, mut fneg, mut tn) = (0, 0, 0, 0);
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= threshold, y) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => tn += 1,
        }
    }
    Ok((
        f1_from_counts(tp, fp, fneg),
        (tp + tn) as f64 / scores.len() as f64,
    ))
}

/// Threshold maximizing F1 under `score ≥ threshold`, ties going to the
/// larger threshold. The returned value is the midpoint between the best
/// distinct score and the next lower one, or the lowest score itself.
pub fn select_threshold(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (npos, _) = check_inputs(scores, labels)?;
    let mut idx = ascending(scores);
    idx.reverse();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut best: Option<(f64, usize)> = None;
    let mut i = 0;
    while i < idx.len() {
        let v = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == v {
            if labels[idx[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let f1 = f1_from_counts(tp, fp, npos - tp);
        if best.is_none_or(|(b, _)| f1 > b) {
            best = Some((f1, i));
        }
    }
    let (_, end) = best.expect("non-empty input");
    let v = scores[idx[end - 1]];
    if end == idx.len() {
        return Ok(v);
    }
    let lower = scores[idx[end]];
    let mid = v / 2.0 + lower / 2.0;
    Ok(if mid > lower && mid <= v { mid } else { v })
}

/// Summed clone frequency of the repertoire's sequences found in `known`.
pub fn hit_frequency(
    rep: &Repertoire,
    known: &KnownAssociationSet,
    vocab: &GeneVocabs,
    key: MatchKey,
) -> f64 {
    rep.sequences()
        .iter()
        .filter(|r| known.matches(r, vocab, key))
        .map(|r| r.frequency())
        .sum()
}

/// Mean and sample standard deviation (zero for fewer than two values).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&[0.9, 0.1], &[true, false]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.1, 0.9], &[true, false]).unwrap(), 0.0);
        assert_eq!(roc_auc(&[0.5, 0.5, 0.5], &[true, false, true]).unwrap(), 0.5);
        assert!(matches!(roc_auc(&[0.1, 0.2], &[true, true]), Err(Error::SingleClass(_))));
        assert!(roc_auc(&[f64::NAN, 0.2], &[true, false]).is_err());
    }

    #[test]
    fn threshold_examples() {
        let t = select_threshold(&[0.9, 0.8, 0.3, 0.2], &[true, true, false, false]).unwrap();
        assert!((t - 0.55).abs() < 1e-12);
        let t = select_threshold(&[0.4, 0.4, 0.4], &[true, false, true]).unwrap();
        assert_eq!(t, 0.4);
        let (f1, acc) = f1_accuracy(&[0.4, 0.4, 0.4], &[true, false, true], t).unwrap();
        assert!((f1 - 0.8).abs() < 1e-12);
        assert!((acc - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn f1_examples() {
        let (f1, acc) = f1_accuracy(&[0.9, 0.1], &[true, false], 0.5).unwrap();
        assert_eq!((f1, acc), (1.0, 1.0));
        let (f1, acc) = f1_accuracy(&[0.1, 0.1, 0.2, 0.3], &[true, false, true, false], 0.5).unwrap();
        assert_eq!((f1, acc), (0.0, 0.5));
    }

    #[test]
    fn roc_curve_ends() {
        let pts = roc_points(&[0.9, 0.7, 0.7, 0.1], &[true, false, true, false]).unwrap();
        assert_eq!((pts[0].fpr, pts[0].tpr), (0.0, 0.0));
        let last = pts.last().unwrap();
        assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
        assert_eq!(pts.len(), 4);
    }

    #[test]
    fn hit_frequency_examples() {
        use crate::data::SequenceRecord;
        let rec = |c: &str, f: f64| SequenceRecord::new(c, 0, None, 0, f).unwrap();
        let rep = Repertoire::new(
            "r",
            None,
            vec![rec("CASA", 0.01), rec("CASC", 0.02), rec("CASD", 0.5)],
        )
        .unwrap();
        let vocab = GeneVocabs::default();
        let known = KnownAssociationSet::from_cdr3s(["CASA", "CASC"]);
        assert!((hit_frequency(&rep, &known, &vocab, MatchKey::Cdr3) - 0.03).abs() < 1e-15);
        let none = KnownAssociationSet::from_cdr3s(["WWWW"]);
        assert_eq!(hit_frequency(&rep, &none, &vocab, MatchKey::Cdr3), 0.0);
    }

    #[test]
    fn mean_std_sample() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert_eq!(s, 1.0);
        assert_eq!(mean_std(&[4.0]), (4.0, 0.0));
    }
}
