//! One-vs-all global clustering pseudo-labels with confidence-based
//! suppression of source-private classes.
//!
//! For every source class `c` the `K` target samples with the highest
//! predicted probability for `c` form the positive group. Their mean
//! (unit-normalized) feature is the positive prototype; K-means over the
//! remaining samples gives `M` negative prototypes. A sample is claimed by
//! `c` when `ε_c · cos(f, p_c) ≥ max_i cos(f, n_c^i)`, where `ε_c` grows from
//! `ρ` to 1 with the positives' mean confidence. Samples claimed by several
//! classes go to the highest suppressed score; unclaimed samples get the
//! uniform target `1/C_s`.

use std::io::Write;
use std::path::Path;

use crate::clustering::{kmeans, KMeansConfig};
use crate::error::{GlcError, Result};
use crate::numeric::{cosine_similarity, l2_normalize_rows, Matrix, RngState};
use crate::par;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassPrototypes {
    pub class: usize,
    pub positive: Vec<f64>,
    /// `M × d`, one negative prototype per row.
    pub negatives: Matrix,
    /// `ε_c ∈ [ρ, 1]`.
    pub suppression: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PseudoLabelConfig {
    pub rho: f64,
    /// When false every `ε_c` is 1 (the plain nearest-prototype rule).
    pub suppress: bool,
    pub kmeans: KMeansConfig,
}

impl Default for PseudoLabelConfig {
    fn default() -> Self {
        Self {
            rho: 0.75,
            suppress: true,
            kmeans: KMeansConfig::default(),
        }
    }
}

impl PseudoLabelConfig {
    pub fn with_rho(rho: f64) -> Self {
        Self { rho, ..Self::default() }
    }

    fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(GlcError::InvalidArgument(format!("rho must be in (0, 1], got {}", self.rho)));
        }
        Ok(())
    }
}

/// Indices of the `k` largest entries of column `class`, ties to the smaller
/// index. Returned in ascending index order.
pub fn select_positives(probs: &Matrix, class: usize, k: usize) -> Result<Vec<usize>> {
    let n = probs.rows();
    if k == 0 || k > n {
        return Err(GlcError::InvalidArgument(format!("top-K with K = {k} over {n} samples")));
    }
    if class >= probs.cols() {
        return Err(GlcError::InvalidArgument(format!("class {class} out of range")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| probs.get(b, class).total_cmp(&probs.get(a, class)).then(a.cmp(&b)));
    let mut top = order[..k].to_vec();
    top.sort_unstable();
    Ok(top)
}

fn suppression_weight(probs: &Matrix, class: usize, positives: &[usize], cfg: &PseudoLabelConfig) -> f64 {
    if !cfg.suppress {
        return 1.0;
    }
    let rho = cfg.rho;
    let total: f64 = positives.iter().map(|&i| probs.get(i, class)).sum();
    (rho + (1.0 - rho) / positives.len() as f64 * total).clamp(rho, 1.0)
}

fn prototypes_from_unit(
    unit: &Matrix,
    probs: &Matrix,
    class: usize,
    k: usize,
    m: usize,
    cfg: &PseudoLabelConfig,
    rng: &mut RngState,
) -> Result<ClassPrototypes> {
    let n = unit.rows();
    if k > n || n - k < m {
        return Err(GlcError::InvalidArgument(format!(
            "{} negatives cannot form {m} prototypes (N = {n}, K = {k})",
            n.saturating_sub(k)
        )));
    }
    let positives = select_positives(probs, class, k)?;
    let positive = unit.select_rows(&positives).column_means();
    let mut is_pos = vec![false; n];
    positives.iter().for_each(|&i| is_pos[i] = true);
    let negative_idx: Vec<usize> = (0..n).filter(|&i| !is_pos[i]).collect();
    let negatives = kmeans(&unit.select_rows(&negative_idx), m, rng, &cfg.kmeans)?.centroids;
    Ok(ClassPrototypes {
        class,
        positive,
        negatives,
        suppression: suppression_weight(probs, class, &positives, cfg),
    })
}

/// Positive prototype, `m` negative prototypes and suppression weight for
/// `class`. Features are L2-normalized first.
pub fn build_prototypes(
    features: &Matrix,
    probs: &Matrix,
    class: usize,
    k: usize,
    m: usize,
    cfg: &PseudoLabelConfig,
    rng: &mut RngState,
) -> Result<ClassPrototypes> {
    cfg.validate()?;
    if features.rows() != probs.rows() {
        return Err(GlcError::Shape("features and probabilities disagree on N".into()));
    }
    prototypes_from_unit(&l2_normalize_rows(features)?, probs, class, k, m, cfg, rng)
}

/// `(claimed, ε_c · cos(f, p_c))` for one feature vector.
pub fn decide_membership(feature: &[f64], protos: &ClassPrototypes) -> Result<(bool, f64)> {
    let score = protos.suppression * cosine_similarity(feature, &protos.positive)?;
    let mut best_negative = f64::NEG_INFINITY;
    for neg in protos.negatives.row_iter() {
        best_negative = best_negative.max(cosine_similarity(feature, neg)?);
    }
    Ok((score >= best_negative, score))
}

#[derive(Debug, Clone)]
pub struct PseudoLabels {
    /// `N × C_s`; each row one-hot or uniform.
    pub targets: Matrix,
    /// Winning class per sample, `None` for presumed unknowns.
    pub assigned: Vec<Option<usize>>,
    /// Winning suppressed score, or the best suppressed score over all
    /// classes when nothing claimed the sample.
    pub scores: Vec<f64>,
    /// Number of samples each class claimed before ambiguity filtering.
    pub claim_counts: Vec<usize>,
    pub prototypes: Vec<ClassPrototypes>,
}

impl PseudoLabels {
    pub fn known_fraction(&self) -> f64 {
        let n = self.assigned.len().max(1);
        self.assigned.iter().filter(|a| a.is_some()).count() as f64 / n as f64
    }

    /// Writes `index,class,score` rows; unclaimed samples have class -1.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("index,class,score\n");
        for (i, (a, s)) in self.assigned.iter().zip(&self.scores).enumerate() {
            let class = a.map_or(-1, |c| c as i64);
            out.push_str(&format!("{i},{class},{s}\n"));
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(out.as_bytes()))
            .map_err(|e| GlcError::io(path, e))
    }
}

/// Top-K size used for a target set of `n` samples and `c_t_hat` clusters.
pub fn positives_per_class(n: usize, c_t_hat: usize) -> usize {
    ((n as f64 / c_t_hat as f64).round() as usize).max(1)
}

/// Global pseudo-labels for every target sample. Class `c` clusters its
/// negatives with the stream `rng.derive(&[c])`.
pub fn assign_pseudo_labels(
    features: &Matrix,
    probs: &Matrix,
    c_t_hat: usize,
    cfg: &PseudoLabelConfig,
    rng: &RngState,
) -> Result<PseudoLabels> {
    cfg.validate()?;
    let (n, num_classes) = probs.shape();
    if features.rows() != n {
        return Err(GlcError::Shape("features and probabilities disagree on N".into()));
    }
    if c_t_hat == 0 || n == 0 {
        return Err(GlcError::InvalidArgument("need samples and a positive cluster count".into()));
    }
    let unit = l2_normalize_rows(features)?;
    let k = positives_per_class(n, c_t_hat);

    let per_class = par::map_range(num_classes, |c| -> Result<(ClassPrototypes, Vec<(bool, f64)>)> {
        let mut stream = rng.derive(&[c as u64]);
        let protos = prototypes_from_unit(&unit, probs, c, k, c_t_hat, cfg, &mut stream)?;
        let decisions = unit
            .row_iter()
            .map(|f| decide_membership(f, &protos))
            .collect::<Result<Vec<_>>>()?;
        Ok((protos, decisions))
    });
    let per_class = per_class.into_iter().collect::<Result<Vec<_>>>()?;

    let uniform = 1.0 / num_classes as f64;
    let mut targets = Matrix::zeros(n, num_classes);
    let mut assigned = Vec::with_capacity(n);
    let mut scores = Vec::with_capacity(n);
    for i in 0..n {
        let mut winner: Option<(usize, f64)> = None;
        let mut best_any = f64::NEG_INFINITY;
        for (c, (_, decisions)) in per_class.iter().enumerate() {
            let (claimed, score) = decisions[i];
            best_any = best_any.max(score);
            if claimed && winner.is_none_or(|(_, s)| score > s) {
                winner = Some((c, score));
            }
        }
        match winner {
            Some((c, s)) => {
                targets.set(i, c, 1.0);
                assigned.push(Some(c));
                scores.push(s);
            }
            None => {
                targets.row_mut(i).iter_mut().for_each(|v| *v = uniform);
                assigned.push(None);
                scores.push(best_any);
            }
        }
    }
    let claim_counts = per_class
        .iter()
        .map(|(_, d)| d.iter().filter(|(claimed, _)| *claimed).count())
        .collect();
    Ok(PseudoLabels {
        targets,
        assigned,
        scores,
        claim_counts,
        prototypes: per_class.into_iter().map(|(p, _)| p).collect(),
    })
}
