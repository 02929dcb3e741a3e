use std::fmt;
use std::str::FromStr;

use super::Matrix;
use crate::error::{GlcError, Result};
use crate::par;

/// Distance used for silhouette scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Metric {
    /// `1 - cos(a, b)`.
    #[default]
    Cosine,
    Euclidean,
}

impl FromStr for Metric {
    type Err = GlcError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cosine" => Ok(Metric::Cosine),
            "euclidean" => Ok(Metric::Euclidean),
            other => Err(GlcError::InvalidArgument(format!("unknown metric `{other}`"))),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Cosine => "cosine",
            Metric::Euclidean => "euclidean",
        })
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

#[inline]
pub fn squared_euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(GlcError::NonFinite("softmax input".into()));
    }
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// Row-wise softmax of a logit matrix.
pub fn softmax_rows(logits: &Matrix) -> Result<Matrix> {
    if !logits.is_finite() {
        return Err(GlcError::NonFinite("softmax input".into()));
    }
    let mut out = logits.clone();
    let cols = out.cols();
    par::for_each_row_mut(out.data_mut(), cols, |_, row| softmax_in_place(row));
    Ok(out)
}

/// Cosine similarity clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(GlcError::Shape(format!(
            "cosine of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(GlcError::ZeroNorm("cosine similarity operand".into()));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = l2_norm(v);
    if n == 0.0 || !n.is_finite() {
        return Err(GlcError::ZeroNorm("cannot normalize".into()));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Copy of `x` with every row scaled to unit length.
pub fn l2_normalize_rows(x: &Matrix) -> Result<Matrix> {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let n = l2_norm(row);
        if n == 0.0 || !n.is_finite() {
            return Err(GlcError::ZeroNorm(format!("row {r}")));
        }
        row.iter_mut().for_each(|v| *v /= n);
    }
    Ok(out)
}

/// Full N×N distance matrix. Only the upper triangle is computed; the lower
/// triangle is mirrored so the result is exactly symmetric.
pub fn pairwise_distance(x: &Matrix, metric: Metric) -> Result<Matrix> {
    let n = x.rows();
    let norms: Vec<f64> = x.row_iter().map(l2_norm).collect();
    if metric == Metric::Cosine {
        if let Some(r) = norms.iter().position(|&v| v == 0.0) {
            return Err(GlcError::ZeroNorm(format!("row {r} under cosine distance")));
        }
    }
    let upper: Vec<Vec<f64>> = par::map_range(n, |i| {
        let a = x.row(i);
        ((i + 1)..n)
            .map(|j| pair_distance(a, x.row(j), norms[i], norms[j], metric))
            .collect()
    });
    let mut out = Matrix::zeros(n, n);
    for (i, row) in upper.into_iter().enumerate() {
        for (off, d) in row.into_iter().enumerate() {
            let j = i + 1 + off;
            out.set(i, j, d);
            out.set(j, i, d);
        }
    }
    Ok(out)
}

#[inline]
pub fn pair_distance(a: &[f64], b: &[f64], na: f64, nb: f64, metric: Metric) -> f64 {
    match metric {
        Metric::Cosine => {
            let cos = (dot(a, b) / (na * nb)).clamp(-1.0, 1.0);
            (1.0 - cos).max(0.0)
        }
        Metric::Euclidean => squared_euclidean(a, b).sqrt(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::RngState;
    use proptest::prelude::*;

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        for c in [-1e3, 0.0, 7.5, 1e3] {
            let p = softmax(&[c, c, c]).unwrap();
            assert!(p.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        }
        // exp-normalize of [1,2,3] evaluated at high precision
        let want = [0.090_030_573_170_380_46, 0.244_728_471_054_797_64, 0.665_240_955_774_821_9];
        let got = softmax(&[1.0, 2.0, 3.0]).unwrap();
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-12);
        }
        assert!(softmax(&[1.0, f64::INFINITY]).is_err());
        assert!(softmax(&[f64::NAN]).is_err());
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[3.0, 4.0], &[3.0, 4.0]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let v = cosine_similarity(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((v - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
            Err(GlcError::ZeroNorm(_))
        ));
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(l2_normalize(&[0.0, 5.0]).unwrap(), vec![0.0, 1.0]);
        let v = l2_normalize(&[3.0, 4.0]).unwrap();
        assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);
        assert!(l2_normalize(&[0.0, 0.0]).is_err());
        let u = [0.6, 0.8];
        let again = l2_normalize(&u).unwrap();
        assert!((again[0] - 0.6).abs() < 1e-15 && (again[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn pairwise_examples() {
        let x = Matrix::from_vec(3, 2, vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let d = pairwise_distance(&x, Metric::Cosine).unwrap();
        assert_eq!(d.get(0, 1), 0.0);
        assert_eq!(d.get(0, 2), 1.0);
        let z = Matrix::from_vec(2, 2, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        assert!(pairwise_distance(&z, Metric::Cosine).is_err());
        assert!(pairwise_distance(&z, Metric::Euclidean).is_ok());
    }

    #[test]
    fn pairwise_matches_scalar_loop() {
        let mut rng = RngState::new(11);
        let x = Matrix::from_vec(5, 4, (0..20).map(|_| rng.normal()).collect()).unwrap();
        for metric in [Metric::Cosine, Metric::Euclidean] {
            let d = pairwise_distance(&x, metric).unwrap();
            for i in 0..5 {
                for j in 0..5 {
                    let (a, b) = (x.row(i), x.row(j));
                    let mut want = 0.0;
                    if i != j {
                        want = match metric {
                            Metric::Euclidean => {
                                let mut s = 0.0;
                                for k in 0..4 {
                                    s += (a[k] - b[k]).powi(2);
                                }
                                s.sqrt()
                            }
                            Metric::Cosine => {
                                let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
                                for k in 0..4 {
                                    ab += a[k] * b[k];
                                    aa += a[k] * a[k];
                                    bb += b[k] * b[k];
                                }
                                1.0 - ab / (aa.sqrt() * bb.sqrt())
                            }
                        };
                    }
                    assert!((d.get(i, j) - want).abs() < 1e-12);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(
            logits in prop::collection::vec(-50.0f64..50.0, 1..12),
            shift in -100.0f64..100.0,
        ) {
            let p = softmax(&logits).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
            let q = softmax(&shifted).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn cosine_is_symmetric_and_bounded(
            a in prop::collection::vec(-10.0f64..10.0, 3),
            b in prop::collection::vec(-10.0f64..10.0, 3),
        ) {
            prop_assume!(l2_norm(&a) > 1e-6 && l2_norm(&b) > 1e-6);
            let ab = cosine_similarity(&a, &b).unwrap();
            prop_assert_eq!(ab, cosine_similarity(&b, &a).unwrap());
            prop_assert!(ab.abs() <= 1.0);
        }

        #[test]
        fn pairwise_is_symmetric_with_zero_diagonal(seed in any::<u64>(), n in 1usize..12) {
            let mut rng = RngState::new(seed);
            let x = Matrix::from_vec(n, 3, (0..n * 3).map(|_| rng.normal() + 0.01).collect()).unwrap();
            for metric in [Metric::Cosine, Metric::Euclidean] {
                let d = pairwise_distance(&x, metric).unwrap();
                for i in 0..n {
                    prop_assert_eq!(d.get(i, i), 0.0);
                    for j in 0..n {
                        prop_assert_eq!(d.get(i, j), d.get(j, i));
                        prop_assert!(d.get(i, j) >= 0.0);
                    }
                }
            }
        }
    }
}
