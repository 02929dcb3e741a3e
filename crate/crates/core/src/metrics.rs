//! Entropy-based unknown rejection and the H-score / accuracy protocols.
//!
//! Logarithms are natural; the `1 / ln C` normalization makes the base
//! irrelevant.

use std::collections::{BTreeMap, HashSet};

use crate::error::{GlcError, Result};
use crate::numeric::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Prediction {
    Known(usize),
    Unknown,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionOutcome {
    pub predictions: Vec<Prediction>,
    /// Normalized entropy of each probability row.
    pub entropy: Vec<f64>,
}

/// `−Σ p ln p / ln C`, with `0 ln 0 = 0`.
pub fn normalized_entropy(row: &[f64]) -> Result<f64> {
    if row.len() < 2 {
        return Err(GlcError::InvalidArgument("normalized entropy needs at least two classes".into()));
    }
    if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(GlcError::InvalidArgument("probabilities must be finite and nonnegative".into()));
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(GlcError::InvalidArgument(format!("probability row sums to {sum}")));
    }
    let h: f64 = row.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
    Ok((h / (row.len() as f64).ln()).clamp(0.0, 1.0))
}

/// Rejects rows with entropy `≥ omega` as unknown, otherwise predicts the
/// argmax (ties to the smaller class).
pub fn classify_with_rejection(probs: &Matrix, omega: f64) -> Result<PredictionOutcome> {
    let mut predictions = Vec::with_capacity(probs.rows());
    let mut entropy = Vec::with_capacity(probs.rows());
    for row in probs.row_iter() {
        let e = normalized_entropy(row)?;
        entropy.push(e);
        predictions.push(if e >= omega {
            Prediction::Unknown
        } else {
            let mut best = 0;
            for (c, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = c;
                }
            }
            Prediction::Known(best)
        });
    }
    Ok(PredictionOutcome { predictions, entropy })
}

/// How known-class accuracy is averaged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Averaging {
    #[default]
    Instance,
    /// Mean of per-class accuracies over the known classes present.
    Class,
}

impl std::str::FromStr for Averaging {
    type Err = GlcError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "instance" => Ok(Averaging::Instance),
            "class" => Ok(Averaging::Class),
            other => Err(GlcError::InvalidArgument(format!("unknown averaging `{other}`"))),
        }
    }
}

impl std::fmt::Display for Averaging {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Averaging::Instance => "instance",
            Averaging::Class => "class",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HScore {
    pub h: f64,
    pub acc_known: f64,
    pub acc_unknown: f64,
}

/// `2ab / (a + b)`, zero when both are zero.
pub fn harmonic_mean(a: f64, b: f64) -> f64 {
    if a + b == 0.0 {
        0.0
    } else {
        2.0 * a * b / (a + b)
    }
}

pub fn h_score(
    outcome: &PredictionOutcome,
    truth: &[usize],
    known_classes: &[usize],
    averaging: Averaging,
) -> Result<HScore> {
    if outcome.predictions.len() != truth.len() {
        return Err(GlcError::Shape(format!(
            "{} predictions for {} labels",
            outcome.predictions.len(),
            truth.len()
        )));
    }
    let known: HashSet<usize> = known_classes.iter().copied().collect();
    // per known class: (correct, total)
    let mut per_class: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    let (mut unk_hit, mut unk_total) = (0usize, 0usize);
    for (pred, &y) in outcome.predictions.iter().zip(truth) {
        if known.contains(&y) {
            let e = per_class.entry(y).or_default();
            e.1 += 1;
            if *pred == Prediction::Known(y) {
                e.0 += 1;
            }
        } else {
            unk_total += 1;
            if *pred == Prediction::Unknown {
                unk_hit += 1;
            }
        }
    }
    if per_class.is_empty() || unk_total == 0 {
        return Err(GlcError::InvalidArgument(
            "H-score needs both known and unknown samples; use overall accuracy".into(),
        ));
    }
    let acc_known = match averaging {
        Averaging::Instance => {
            let (hit, tot) = per_class.values().fold((0, 0), |(h, t), &(a, b)| (h + a, t + b));
            hit as f64 / tot as f64
        }
        Averaging::Class => {
            per_class.values().map(|&(a, b)| a as f64 / b as f64).sum::<f64>() / per_class.len() as f64
        }
    };
    let acc_unknown = unk_hit as f64 / unk_total as f64;
    Ok(HScore {
        h: harmonic_mean(acc_known, acc_unknown),
        acc_known,
        acc_unknown,
    })
}

/// Fraction of samples predicted as their exact label; `Unknown` is wrong.
pub fn overall_accuracy(outcome: &PredictionOutcome, truth: &[usize]) -> Result<f64> {
    if truth.is_empty() {
        return Err(GlcError::InvalidArgument("accuracy of an empty set".into()));
    }
    if outcome.predictions.len() != truth.len() {
        return Err(GlcError::Shape("prediction and label counts differ".into()));
    }
    let hits = outcome
        .predictions
        .iter()
        .zip(truth)
        .filter(|(p, &y)| **p == Prediction::Known(y))
        .count();
    Ok(hits as f64 / truth.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn outcome(preds: Vec<Prediction>) -> PredictionOutcome {
        let n = preds.len();
        PredictionOutcome {
            predictions: preds,
            entropy: vec![0.0; n],
        }
    }

    #[test]
    fn entropy_examples() {
        assert!((normalized_entropy(&[0.25; 4]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(normalized_entropy(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        assert!((normalized_entropy(&[0.9, 0.1]).unwrap() - 0.468_995_593_589_281_2).abs() < 1e-12);
        assert!(normalized_entropy(&[0.5, 0.6]).is_err());
        assert!(normalized_entropy(&[1.0]).is_err());
    }

    #[test]
    fn rejection_examples() {
        let p = Matrix::from_rows(&[vec![0.0, 1.0], vec![0.5, 0.5], vec![0.9, 0.1]]).unwrap();
        let o = classify_with_rejection(&p, 0.55).unwrap();
        assert_eq!(
            o.predictions,
            vec![Prediction::Known(1), Prediction::Unknown, Prediction::Known(0)]
        );
    }

    #[test]
    fn h_score_examples() {
        assert_eq!(harmonic_mean(0.5, 0.5), 0.5);
        assert_eq!(harmonic_mean(0.8, 0.0), 0.0);
        assert!((harmonic_mean(0.8, 0.6) - 0.685_714_285_714_285_7).abs() < 1e-12);
        assert_eq!(harmonic_mean(0.0, 0.0), 0.0);

        use Prediction::*;
        // known: 0,0,1,1 -> 3 right; unknown (label 5): 2 of 4 rejected
        let o = outcome(vec![Known(0), Known(0), Known(1), Known(0), Unknown, Unknown, Known(1), Known(0)]);
        let truth = [0, 0, 1, 1, 5, 5, 5, 5];
        let h = h_score(&o, &truth, &[0, 1], Averaging::Instance).unwrap();
        assert_eq!((h.acc_known, h.acc_unknown), (0.75, 0.5));
        assert!((h.h - 0.6).abs() < 1e-15);
        let hc = h_score(&o, &truth, &[0, 1], Averaging::Class).unwrap();
        assert_eq!(hc.acc_known, 0.75);
        assert!(h_score(&o, &[0; 8], &[0, 1], Averaging::Instance).is_err());
        assert!(h_score(&o, &[7; 8], &[0, 1], Averaging::Instance).is_err());
    }

    #[test]
    fn class_averaging_differs_on_imbalance() {
        use Prediction::*;
        let o = outcome(vec![Known(0), Known(0), Known(0), Known(0), Unknown]);
        let truth = [0, 0, 0, 1, 9];
        let inst = h_score(&o, &truth, &[0, 1], Averaging::Instance).unwrap();
        let cls = h_score(&o, &truth, &[0, 1], Averaging::Class).unwrap();
        assert_eq!(inst.acc_known, 0.75);
        assert_eq!(cls.acc_known, 0.5);
    }

    #[test]
    fn accuracy_examples() {
        use Prediction::*;
        assert_eq!(overall_accuracy(&outcome(vec![Known(1), Known(0)]), &[1, 0]).unwrap(), 1.0);
        assert_eq!(overall_accuracy(&outcome(vec![Unknown, Unknown]), &[1, 0]).unwrap(), 0.0);
        let o = outcome(vec![Known(1), Known(0), Known(2), Unknown]);
        assert_eq!(overall_accuracy(&o, &[1, 0, 2, 2]).unwrap(), 0.75);
        assert!(overall_accuracy(&outcome(vec![]), &[]).is_err());
    }

    proptest! {
        #[test]
        fn entropy_bounds_and_thresholds(raw in prop::collection::vec(0.0f64..1.0, 2..8)) {
            let s: f64 = raw.iter().sum();
            prop_assume!(s > 1e-3);
            let row: Vec<f64> = raw.iter().map(|v| v / s).collect();
            let e = normalized_entropy(&row).unwrap();
            prop_assert!((0.0..=1.0).contains(&e));
            let m = Matrix::from_vec(1, row.len(), row.clone()).unwrap();
            let never = classify_with_rejection(&m, 1.0 + 1e-9).unwrap();
            prop_assert!(never.predictions[0] != Prediction::Unknown);
            let always = classify_with_rejection(&m, 0.0).unwrap();
            prop_assert_eq!(always.predictions[0], Prediction::Unknown);
        }

        #[test]
        fn h_between_min_and_max(a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            let h = harmonic_mean(a, b);
            prop_assert!(h >= a.min(b) - 1e-15 && h <= a.max(b) + 1e-15);
            prop_assert_eq!(h == 0.0, a == 0.0 || b == 0.0);
        }

        #[test]
        fn metrics_ignore_sample_order(seed in any::<u64>()) {
            let mut rng = crate::numeric::RngState::new(seed);
            let n = 20;
            let truth: Vec<usize> = (0..n).map(|_| rng.below(4)).collect();
            let preds: Vec<Prediction> = (0..n)
                .map(|_| if rng.uniform() < 0.3 { Prediction::Unknown } else { Prediction::Known(rng.below(3)) })
                .collect();
            let mut order: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut order);
            let o1 = outcome(preds.clone());
            let o2 = outcome(order.iter().map(|&i| preds[i]).collect());
            let t2: Vec<usize> = order.iter().map(|&i| truth[i]).collect();
            prop_assert_eq!(overall_accuracy(&o1, &truth).unwrap(), overall_accuracy(&o2, &t2).unwrap());
            if let (Ok(a), Ok(b)) = (h_score(&o1, &truth, &[0, 1, 2], Averaging::Instance),
                                     h_score(&o2, &t2, &[0, 1, 2], Averaging::Instance)) {
                prop_assert_eq!(a, b);
            }
        }
    }
}
