use crate::error::{GlcError, Result};
use crate::numeric::Matrix;

/// Probabilities are clamped to this floor inside logarithms.
pub const LOG_EPS: f64 = 1e-12;

#[inline]
fn clamped_ln(p: f64) -> f64 {
    p.max(LOG_EPS).ln()
}

/// Label-smoothed one-hot target `q_k = (1 − α)·[k = y] + α / C`.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedTarget {
    pub q: Vec<f64>,
}

impl SmoothedTarget {
    pub fn new(label: usize, num_classes: usize, alpha: f64) -> Result<Self> {
        if label >= num_classes {
            return Err(GlcError::InvalidArgument(format!(
                "label {label} outside [0, {num_classes})"
            )));
        }
        if !(0.0..=1.0).contains(&alpha) {
            return Err(GlcError::InvalidArgument(format!(
                "smoothing must be in [0, 1], got {alpha}"
            )));
        }
        let off = alpha / num_classes as f64;
        let q = (0..num_classes)
            .map(|k| if k == label { (1.0 - alpha) + off } else { off })
            .collect();
        Ok(Self { q })
    }
}

fn smoothed_targets(labels: &[usize], num_classes: usize, alpha: f64) -> Result<Matrix> {
    let mut data = Vec::with_capacity(labels.len() * num_classes);
    for &y in labels {
        data.extend(SmoothedTarget::new(y, num_classes, alpha)?.q);
    }
    Matrix::from_vec(labels.len(), num_classes, data)
}

/// Mean over rows of `−Σ_c t_c · ln max(p_c, ε)`.
pub fn soft_ce_loss(probs: &Matrix, targets: &Matrix) -> Result<f64> {
    if probs.shape() != targets.shape() {
        return Err(GlcError::Shape(format!(
            "probabilities {:?} vs targets {:?}",
            probs.shape(),
            targets.shape()
        )));
    }
    if probs.rows() == 0 {
        return Err(GlcError::InvalidArgument("loss over an empty batch".into()));
    }
    let total: f64 = probs
        .row_iter()
        .zip(targets.row_iter())
        .map(|(p, t)| -p.iter().zip(t).map(|(&p, &t)| t * clamped_ln(p)).sum::<f64>())
        .sum();
    Ok(total / probs.rows() as f64)
}

/// Cross-entropy against label-smoothed one-hot targets.
pub fn smoothed_ce_loss(probs: &Matrix, labels: &[usize], alpha: f64) -> Result<f64> {
    if labels.len() != probs.rows() {
        return Err(GlcError::Shape(format!(
            "{} labels for {} rows",
            labels.len(),
            probs.rows()
        )));
    }
    soft_ce_loss(probs, &smoothed_targets(labels, probs.cols(), alpha)?)
}

/// Gradient of [`soft_ce_loss`] with respect to the logits behind `probs`.
/// Entries whose probability sits under the clamp floor contribute nothing.
fn soft_ce_logit_gradient(probs: &Matrix, targets: &Matrix, weight: f64, out: &mut Matrix) {
    let scale = weight / probs.rows() as f64;
    for r in 0..probs.rows() {
        let p = probs.row(r);
        let t = targets.row(r);
        let active: f64 = p
            .iter()
            .zip(t)
            .map(|(&p, &t)| if p >= LOG_EPS { t } else { 0.0 })
            .sum();
        for (c, o) in out.row_mut(r).iter_mut().enumerate() {
            let w = if p[c] >= LOG_EPS { t[c] } else { 0.0 };
            *o += scale * (p[c] * active - w);
        }
    }
}

/// A differentiable objective over a batch's softmax outputs.
#[derive(Debug, Clone, Copy)]
pub enum LossSpec<'a> {
    /// Source training: label-smoothed cross-entropy.
    SmoothedCe { labels: &'a [usize], alpha: f64 },
    /// Soft-target cross-entropy, e.g. the global pseudo-label term alone.
    SoftCe { targets: &'a Matrix },
    /// `eta · CE(global) + CE(local)`, either term optional.
    Adaptation {
        eta: f64,
        global: Option<&'a Matrix>,
        local: Option<&'a Matrix>,
    },
}

impl LossSpec<'_> {
    fn check(&self, probs: &Matrix) -> Result<()> {
        let same = |t: &Matrix| {
            if t.shape() == probs.shape() {
                Ok(())
            } else {
                Err(GlcError::Shape(format!(
                    "targets {:?} vs probabilities {:?}",
                    t.shape(),
                    probs.shape()
                )))
            }
        };
        match self {
            LossSpec::SmoothedCe { labels, .. } => {
                if labels.len() != probs.rows() {
                    return Err(GlcError::Shape("label count differs from batch".into()));
                }
            }
            LossSpec::SoftCe { targets } => same(targets)?,
            LossSpec::Adaptation { eta, global, local } => {
                if global.is_none() && local.is_none() {
                    return Err(GlcError::InvalidArgument(
                        "adaptation loss needs a global or a local term".into(),
                    ));
                }
                if global.is_some() && !(eta.is_finite() && *eta >= 0.0) {
                    return Err(GlcError::InvalidArgument(format!("invalid global weight {eta}")));
                }
                if let Some(g) = global {
                    same(g)?;
                }
                if let Some(l) = local {
                    same(l)?;
                }
            }
        }
        Ok(())
    }

    pub fn value(&self, probs: &Matrix) -> Result<f64> {
        self.check(probs)?;
        match *self {
            LossSpec::SmoothedCe { labels, alpha } => smoothed_ce_loss(probs, labels, alpha),
            LossSpec::SoftCe { targets } => soft_ce_loss(probs, targets),
            LossSpec::Adaptation { eta, global, local } => {
                let g = global.map(|t| soft_ce_loss(probs, t)).transpose()?.unwrap_or(0.0);
                let l = local.map(|t| soft_ce_loss(probs, t)).transpose()?.unwrap_or(0.0);
                Ok(eta * g + l)
            }
        }
    }

    /// `∂loss/∂logits`, one row per sample.
    pub fn logit_gradient(&self, probs: &Matrix) -> Result<Matrix> {
        self.check(probs)?;
        let mut out = Matrix::zeros(probs.rows(), probs.cols());
        match *self {
            LossSpec::SmoothedCe { labels, alpha } => {
                let t = smoothed_targets(labels, probs.cols(), alpha)?;
                soft_ce_logit_gradient(probs, &t, 1.0, &mut out);
            }
            LossSpec::SoftCe { targets } => soft_ce_logit_gradient(probs, targets, 1.0, &mut out),
            LossSpec::Adaptation { eta, global, local } => {
                if let Some(g) = global {
                    soft_ce_logit_gradient(probs, g, eta, &mut out);
                }
                if let Some(l) = local {
                    soft_ce_logit_gradient(probs, l, 1.0, &mut out);
                }
            }
        }
        Ok(out)
    }
}
