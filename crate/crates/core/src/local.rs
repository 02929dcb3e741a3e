//! Memory bank of target features/predictions and the local k-NN consensus
//! targets built from it.

use crate::error::{GlcError, Result};
use crate::model::soft_ce_loss;
use crate::numeric::{dot, l2_normalize, Matrix};
use crate::par;

/// Latest feature and prediction for every target sample.
#[derive(Debug, Clone)]
pub struct MemoryBank {
    features: Matrix,
    probs: Matrix,
    unit: Matrix,
    initialized: Vec<bool>,
}

impl MemoryBank {
    /// Bank of `n` rows with nothing written yet.
    pub fn empty(n: usize, feature_dim: usize, num_classes: usize) -> Self {
        Self {
            features: Matrix::zeros(n, feature_dim),
            probs: Matrix::zeros(n, num_classes),
            unit: Matrix::zeros(n, feature_dim),
            initialized: vec![false; n],
        }
    }

    /// Bank populated from a full forward pass.
    pub fn init(features: &Matrix, probs: &Matrix) -> Result<Self> {
        if features.rows() != probs.rows() {
            return Err(GlcError::Shape(format!(
                "{} feature rows vs {} probability rows",
                features.rows(),
                probs.rows()
            )));
        }
        let mut bank = Self::empty(features.rows(), features.cols(), probs.cols());
        let all: Vec<usize> = (0..features.rows()).collect();
        bank.update(&all, features, probs)?;
        Ok(bank)
    }

    pub fn len(&self) -> usize {
        self.initialized.len()
    }

    pub fn is_empty(&self) -> bool {
        self.initialized.is_empty()
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn probs(&self) -> &Matrix {
        &self.probs
    }

    pub fn is_initialized(&self, i: usize) -> bool {
        self.initialized[i]
    }

    /// Overwrites the listed rows with `features[j]`, `probs[j]` for the
    /// `j`-th listed index. Other rows are untouched.
    pub fn update(&mut self, indices: &[usize], features: &Matrix, probs: &Matrix) -> Result<()> {
        if features.rows() != indices.len() || probs.rows() != indices.len() {
            return Err(GlcError::Shape("update rows differ from index count".into()));
        }
        if features.cols() != self.features.cols() || probs.cols() != self.probs.cols() {
            return Err(GlcError::Shape("update widths differ from the bank".into()));
        }
        let mut seen = vec![false; self.len()];
        for &i in indices {
            if i >= self.len() {
                return Err(GlcError::InvalidArgument(format!("bank index {i} out of range")));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(GlcError::InvalidArgument(format!("bank index {i} repeated")));
            }
        }
        let units = features
            .row_iter()
            .map(l2_normalize)
            .collect::<Result<Vec<_>>>()?;
        for (j, &i) in indices.iter().enumerate() {
            self.features.row_mut(i).copy_from_slice(features.row(j));
            self.probs.row_mut(i).copy_from_slice(probs.row(j));
            self.unit.row_mut(i).copy_from_slice(&units[j]);
            self.initialized[i] = true;
        }
        Ok(())
    }

    /// Indices of the `k` rows most cosine-similar to row `query`, excluding
    /// `query` itself, ordered by similarity (ties to the smaller index).
    pub fn neighbors(&self, query: usize, k: usize) -> Vec<usize> {
        let q = self.unit.row(query);
        let mut top: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        for j in 0..self.len() {
            if j == query {
                continue;
            }
            let sim = dot(q, self.unit.row(j));
            // j ascends, so an equal similarity never displaces an earlier row
            if top.len() == k && sim <= top[k - 1].0 {
                continue;
            }
            let pos = top.partition_point(|&(s, _)| s >= sim);
            top.insert(pos, (sim, j));
            top.truncate(k);
        }
        top.into_iter().map(|(_, j)| j).collect()
    }
}

/// For each query sample, the mean prediction of its `k` nearest bank
/// neighbors (self excluded), summed in neighbor rank order.
pub fn knn_neighbor_targets(bank: &MemoryBank, queries: &[usize], k: usize) -> Result<Matrix> {
    let n = bank.len();
    if k == 0 || k >= n {
        return Err(GlcError::InvalidArgument(format!("k = {k} neighbors in a bank of {n}")));
    }
    if let Some(i) = bank.initialized.iter().position(|&b| !b) {
        return Err(GlcError::InvalidArgument(format!("bank row {i} was never written")));
    }
    if let Some(&q) = queries.iter().find(|&&q| q >= n) {
        return Err(GlcError::InvalidArgument(format!("query index {q} out of range")));
    }
    let c = bank.probs.cols();
    let rows: Vec<Vec<f64>> = par::map_range(queries.len(), |qi| {
        let mut acc = vec![0.0; c];
        for j in bank.neighbors(queries[qi], k) {
            for (a, p) in acc.iter_mut().zip(bank.probs.row(j)) {
                *a += p;
            }
        }
        acc.iter_mut().for_each(|a| *a /= k as f64);
        acc
    });
    Matrix::from_vec(queries.len(), c, rows.concat())
}

/// Soft cross-entropy of batch predictions against neighbor targets.
pub fn local_loss(batch_probs: &Matrix, neighbor_targets: &Matrix) -> Result<f64> {
    soft_ce_loss(batch_probs, neighbor_targets)
}
