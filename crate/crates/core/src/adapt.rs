//! Source training and the target adaptation loop.
//!
//! Adaptation keeps the source classifier fixed and trains only the feature
//! module on `η · CE(global pseudo-labels) + CE(local neighbor consensus)`.
//! The target cluster count is estimated once, before the first epoch.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::clustering::{estimate_class_count, ClassCountEstimate, EstimateConfig, KMeansConfig};
use crate::data::LabeledDataset;
use crate::error::{GlcError, Result};
use crate::global::{assign_pseudo_labels, PseudoLabelConfig, PseudoLabels};
use crate::local::{knn_neighbor_targets, MemoryBank};
use crate::metrics::{classify_with_rejection, h_score, overall_accuracy, Averaging, HScore};
use crate::model::{
    backward_from, forward, sgd_step, soft_ce_loss, Architecture, LossSpec, ModelParams, OptimizerState,
    Trainable,
};
use crate::numeric::{Matrix, Metric, RngState};

#[derive(Debug, Clone, PartialEq)]
pub struct SourceConfig {
    pub hidden_dim: usize,
    pub feature_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Label smoothing.
    pub alpha: f64,
    pub seed: u64,
}

impl Default for SourceConfig {
    fn default() -> Self {
        Self {
            hidden_dim: Architecture::DEFAULT_HIDDEN,
            feature_dim: Architecture::DEFAULT_FEATURE,
            epochs: 30,
            batch_size: 64,
            lr: 1e-2,
            momentum: 0.9,
            alpha: 0.1,
            seed: 0,
        }
    }
}

fn batches(n: usize, batch_size: usize, rng: &mut RngState) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Trains a fresh model with label-smoothed cross-entropy. The class count is
/// `max label + 1`.
pub fn train_source(data: &LabeledDataset, cfg: &SourceConfig) -> Result<ModelParams> {
    if data.is_empty() {
        return Err(GlcError::InvalidArgument("source dataset is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(GlcError::InvalidArgument("batch size must be positive".into()));
    }
    let arch = Architecture {
        input_dim: data.dim(),
        hidden_dim: cfg.hidden_dim,
        feature_dim: cfg.feature_dim,
        num_classes: data.label_span(),
    };
    let root = RngState::new(cfg.seed);
    let mut params = ModelParams::init(arch, &mut root.derive(&[0]))?;
    let mut opt = OptimizerState::new(&params, cfg.lr, cfg.momentum)?;
    let mut shuffle = root.derive(&[1]);
    for epoch in 0..cfg.epochs {
        for idx in batches(data.len(), cfg.batch_size, &mut shuffle) {
            let xb = data.features.select_rows(&idx);
            let yb: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
            let fwd = forward(&params, &xb)?;
            let spec = LossSpec::SmoothedCe { labels: &yb, alpha: cfg.alpha };
            let (loss, grads) = backward_from(&params, &xb, &fwd, &spec, Trainable::All)?;
            if !loss.is_finite() {
                return Err(GlcError::Numeric(format!("source loss became {loss} in epoch {epoch}")));
            }
            sgd_step(&mut params, &mut opt, &grads, Trainable::All)?;
        }
    }
    Ok(params)
}

/// Which loss terms an adaptation run optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Variant {
    #[default]
    Full,
    NoGlobal,
    NoLocal,
}

impl FromStr for Variant {
    type Err = GlcError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "full" => Ok(Variant::Full),
            "no_global" => Ok(Variant::NoGlobal),
            "no_local" => Ok(Variant::NoLocal),
            other => Err(GlcError::InvalidArgument(format!("unknown variant `{other}`"))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Full => "full",
            Variant::NoGlobal => "no_global",
            Variant::NoLocal => "no_local",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptConfig {
    /// Weight of the global pseudo-label loss.
    pub eta: f64,
    pub rho: f64,
    /// Neighbors per sample in the local consensus term.
    pub knn_k: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Pseudo-labels (and the memory bank) are rebuilt every this many epochs.
    pub pseudo_refresh: usize,
    /// Entropy threshold for unknown rejection.
    pub omega: f64,
    pub use_global: bool,
    pub use_local: bool,
    /// Confidence-based suppression of source-private classes.
    pub suppress: bool,
    pub metric: Metric,
    pub kmeans: KMeansConfig,
    /// Write each epoch's pseudo-labels as CSV into this directory.
    pub pseudo_dump_dir: Option<PathBuf>,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            eta: 0.3,
            rho: 0.75,
            knn_k: 4,
            epochs: 20,
            batch_size: 64,
            lr: 1e-2,
            momentum: 0.9,
            seed: 0,
            pseudo_refresh: 1,
            omega: 0.55,
            use_global: true,
            use_local: true,
            suppress: true,
            metric: Metric::Cosine,
            kmeans: KMeansConfig::default(),
            pseudo_dump_dir: None,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(GlcError::InvalidArgument(m));
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return bad(format!("eta must be positive, got {}", self.eta));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return bad(format!("rho must be in (0, 1], got {}", self.rho));
        }
        if !(self.omega > 0.0 && self.omega < 1.0) {
            return bad(format!("omega must be in (0, 1), got {}", self.omega));
        }
        if self.knn_k == 0 || self.batch_size == 0 || self.pseudo_refresh == 0 {
            return bad("knn_k, batch_size and pseudo_refresh must be positive".into());
        }
        if !self.use_global && !self.use_local {
            return bad("at least one of the global and local terms must be enabled".into());
        }
        Ok(())
    }

    fn pseudo_config(&self) -> PseudoLabelConfig {
        PseudoLabelConfig {
            rho: self.rho,
            suppress: self.suppress,
            kmeans: self.kmeans,
        }
    }
}

/// Config for one ablation arm.
pub fn ablation_variant(config: &AdaptConfig, variant: Variant) -> AdaptConfig {
    let mut out = config.clone();
    match variant {
        Variant::Full => {}
        Variant::NoGlobal => out.use_global = false,
        Variant::NoLocal => out.use_local = false,
    }
    out
}

/// Ground truth used only for scoring progress, never for training.
#[derive(Debug, Clone, Copy)]
pub struct EvalLabels<'a> {
    pub labels: &'a [usize],
    pub averaging: Averaging,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_glb: f64,
    pub loss_loc: f64,
    pub loss_tar: f64,
    pub h_score: Option<f64>,
    /// Known-class accuracy, or overall accuracy when no unknowns exist.
    pub acc_known: Option<f64>,
    pub acc_unknown: Option<f64>,
    pub c_t_hat: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdaptHistory {
    pub records: Vec<EpochRecord>,
}

pub const HISTORY_HEADER: &str = "epoch,loss_glb,loss_loc,loss_tar,h_score,acc_known,acc_unknown,c_t_hat";

fn opt_cell(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x}"))
}

impl AdaptHistory {
    pub fn to_csv_string(&self) -> String {
        let mut out = format!("{HISTORY_HEADER}\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.epoch,
                r.loss_glb,
                r.loss_loc,
                r.loss_tar,
                opt_cell(r.h_score),
                opt_cell(r.acc_known),
                opt_cell(r.acc_unknown),
                r.c_t_hat
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string()).map_err(|e| GlcError::io(path, e))
    }
}

#[derive(Debug, Clone)]
pub struct AdaptOutcome {
    pub params: ModelParams,
    pub history: AdaptHistory,
    /// `None` when no epochs ran.
    pub class_count: Option<ClassCountEstimate>,
}

/// Result of scoring predictions under the protocol implied by the labels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Score {
    /// Some labels fall outside the model's classes.
    Open(HScore),
    /// Every label is a model class; plain argmax accuracy.
    Closed(f64),
}

/// Scores `probs` against ground truth. Labels `≥ C_s` are unknown; when any
/// are present the H-score protocol with rejection threshold `omega` applies.
pub fn score_predictions(probs: &Matrix, labels: &[usize], averaging: Averaging, omega: f64) -> Result<Score> {
    let c_s = probs.cols();
    if labels.iter().any(|&y| y >= c_s) {
        let outcome = classify_with_rejection(probs, omega)?;
        let known: Vec<usize> = (0..c_s).collect();
        Ok(Score::Open(h_score(&outcome, labels, &known, averaging)?))
    } else {
        let outcome = classify_with_rejection(probs, f64::INFINITY)?;
        Ok(Score::Closed(overall_accuracy(&outcome, labels)?))
    }
}

/// Adapts `source` to the unlabeled rows of `target`.
pub fn adapt(
    source: &ModelParams,
    target: &Matrix,
    cfg: &AdaptConfig,
    eval: Option<EvalLabels<'_>>,
) -> Result<AdaptOutcome> {
    cfg.validate()?;
    source.validate()?;
    let n = target.rows();
    if let Some(e) = &eval {
        if e.labels.len() != n {
            return Err(GlcError::Shape("evaluation labels differ from target rows".into()));
        }
    }
    let mut params = source.clone();
    let mut history = AdaptHistory::default();
    if cfg.epochs == 0 {
        return Ok(AdaptOutcome {
            params,
            history,
            class_count: None,
        });
    }
    if cfg.use_local && cfg.knn_k >= n {
        return Err(GlcError::InvalidArgument(format!(
            "{} neighbors requested from {n} target samples",
            cfg.knn_k
        )));
    }

    let root = RngState::new(cfg.seed);
    let num_classes = params.num_classes();
    let initial = forward(&params, target)?;
    let estimate_cfg = EstimateConfig {
        metric: cfg.metric,
        normalize: true,
        kmeans: cfg.kmeans,
    };
    let estimate = estimate_class_count(&initial.features, num_classes, &root.derive(&[4]), &estimate_cfg)?;
    let c_t_hat = estimate.chosen;

    let mut opt = OptimizerState::new(&params, cfg.lr, cfg.momentum)?;
    let mut shuffle = root.derive(&[2]);
    let mut pseudo: Option<PseudoLabels> = None;
    let mut bank: Option<MemoryBank> = None;

    for epoch in 0..cfg.epochs {
        if epoch % cfg.pseudo_refresh == 0 {
            let snapshot = forward(&params, target)?;
            if cfg.use_global {
                let labels = assign_pseudo_labels(
                    &snapshot.features,
                    &snapshot.probs,
                    c_t_hat,
                    &cfg.pseudo_config(),
                    &root.derive(&[3, epoch as u64]),
                )?;
                if let Some(dir) = &cfg.pseudo_dump_dir {
                    labels.write_csv(&dir.join(format!("pseudo_epoch{epoch}.csv")))?;
                }
                pseudo = Some(labels);
            }
            bank = Some(MemoryBank::init(&snapshot.features, &snapshot.probs)?);
        }
        let bank = bank.as_mut().expect("bank built in the first epoch");

        let (mut sum_glb, mut sum_loc) = (0.0, 0.0);
        for idx in batches(n, cfg.batch_size, &mut shuffle) {
            let xb = target.select_rows(&idx);
            let fwd = forward(&params, &xb)?;
            let global_t = match (&pseudo, cfg.use_global) {
                (Some(p), true) => Some(p.targets.select_rows(&idx)),
                _ => None,
            };
            let local_t = if cfg.use_local {
                Some(knn_neighbor_targets(bank, &idx, cfg.knn_k)?)
            } else {
                None
            };
            let spec = LossSpec::Adaptation {
                eta: cfg.eta,
                global: global_t.as_ref(),
                local: local_t.as_ref(),
            };
            let (_, grads) = backward_from(&params, &xb, &fwd, &spec, Trainable::FeatureOnly)?;
            let glb = global_t.as_ref().map(|t| soft_ce_loss(&fwd.probs, t)).transpose()?.unwrap_or(0.0);
            let loc = local_t.as_ref().map(|t| soft_ce_loss(&fwd.probs, t)).transpose()?.unwrap_or(0.0);
            if !(glb.is_finite() && loc.is_finite()) {
                return Err(GlcError::Numeric(format!(
                    "non-finite adaptation loss in epoch {epoch} (global {glb}, local {loc})"
                )));
            }
            sum_glb += glb * idx.len() as f64;
            sum_loc += loc * idx.len() as f64;
            sgd_step(&mut params, &mut opt, &grads, Trainable::FeatureOnly)?;
            bank.update(&idx, &fwd.features, &fwd.probs)?;
        }

        let loss_glb = sum_glb / n as f64;
        let loss_loc = sum_loc / n as f64;
        let mut record = EpochRecord {
            epoch,
            loss_glb,
            loss_loc,
            loss_tar: cfg.eta * loss_glb + loss_loc,
            h_score: None,
            acc_known: None,
            acc_unknown: None,
            c_t_hat,
        };
        if let Some(e) = &eval {
            let probs = forward(&params, target)?.probs;
            match score_predictions(&probs, e.labels, e.averaging, cfg.omega)? {
                Score::Open(h) => {
                    record.h_score = Some(h.h);
                    record.acc_known = Some(h.acc_known);
                    record.acc_unknown = Some(h.acc_unknown);
                }
                Score::Closed(acc) => record.acc_known = Some(acc),
            }
        }
        history.records.push(record);
    }
    Ok(AdaptOutcome {
        params,
        history,
        class_count: Some(estimate),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_scenario, Scenario, ScenarioSpec};
    use crate::metrics::normalized_entropy;

    fn two_blobs() -> LabeledDataset {
        let mut rng = RngState::new(8);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..200 {
            let c = i % 2;
            let cx = if c == 0 { -3.0 } else { 3.0 };
            rows.push(vec![cx + 0.5 * rng.normal(), 0.5 * rng.normal()]);
            labels.push(c);
        }
        LabeledDataset::new(Matrix::from_rows(&rows).unwrap(), labels).unwrap()
    }

    fn train_accuracy(params: &ModelParams, data: &LabeledDataset) -> f64 {
        let probs = forward(params, &data.features).unwrap().probs;
        let hits = probs
            .row_iter()
            .zip(&data.labels)
            .filter(|(r, &y)| r.iter().enumerate().all(|(c, &p)| c == y || p < r[y]))
            .count();
        hits as f64 / data.len() as f64
    }

    #[test]
    fn separable_blobs_train_to_perfect_accuracy() {
        let data = two_blobs();
        let cfg = SourceConfig { epochs: 30, ..SourceConfig::default() };
        let params = train_source(&data, &cfg).unwrap();
        assert_eq!(train_accuracy(&params, &data), 1.0);
        let again = train_source(&data, &cfg).unwrap();
        assert_eq!(crate::model::checkpoint_bytes(&params), crate::model::checkpoint_bytes(&again));
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let data = two_blobs();
        let cfg = SourceConfig { epochs: 0, ..SourceConfig::default() };
        let params = train_source(&data, &cfg).unwrap();
        let arch = params.architecture();
        let init = ModelParams::init(arch, &mut RngState::new(cfg.seed).derive(&[0])).unwrap();
        assert_eq!(params, init);
        assert!(train_source(&LabeledDataset::new(Matrix::zeros(0, 2), vec![]).unwrap(), &cfg).is_err());
    }

    #[test]
    fn variants() {
        let base = AdaptConfig::default();
        assert_eq!(ablation_variant(&base, Variant::Full), base);
        assert!(!ablation_variant(&base, Variant::NoGlobal).use_global);
        assert!(!ablation_variant(&base, Variant::NoLocal).use_local);
        assert!("bogus".parse::<Variant>().is_err());
        assert_eq!("no-global".parse::<Variant>().unwrap(), Variant::NoGlobal);
    }

    fn small_opda(seed: u64) -> (ModelParams, LabeledDataset) {
        let spec = ScenarioSpec {
            shared: 3,
            source_private: 2,
            target_private: 2,
            source_per_class: 30,
            target_per_class: 30,
            seed,
            ..ScenarioSpec::preset(Scenario::Opda)
        };
        let (src, tgt) = generate_scenario(&spec).unwrap();
        let params = train_source(&src, &SourceConfig { epochs: 10, ..SourceConfig::default() }).unwrap();
        (params, tgt)
    }

    #[test]
    fn adapt_keeps_classifier_and_logs_consistent_losses() {
        let (params, tgt) = small_opda(1);
        let cfg = AdaptConfig { epochs: 3, ..AdaptConfig::default() };
        let eval = EvalLabels { labels: &tgt.labels, averaging: Averaging::Instance };
        let out = adapt(&params, &tgt.features, &cfg, Some(eval)).unwrap();
        assert_eq!(out.params.classifier, params.classifier);
        assert_ne!(out.params.feature, params.feature);
        assert_eq!(out.history.records.len(), 3);
        for r in &out.history.records {
            assert!((r.loss_tar - (cfg.eta * r.loss_glb + r.loss_loc)).abs() < 1e-12);
            assert!(r.h_score.is_some());
        }
        let again = adapt(&params, &tgt.features, &cfg, Some(eval)).unwrap();
        assert_eq!(again.history, out.history);
        assert_eq!(again.params, out.params);
    }

    #[test]
    fn zero_epochs_and_ablation_arms() {
        let (params, tgt) = small_opda(2);
        let none = adapt(&params, &tgt.features, &AdaptConfig { epochs: 0, ..AdaptConfig::default() }, None).unwrap();
        assert_eq!(none.params, params);
        assert!(none.history.records.is_empty());

        let base = AdaptConfig { epochs: 2, ..AdaptConfig::default() };
        let no_glb = adapt(&params, &tgt.features, &ablation_variant(&base, Variant::NoGlobal), None).unwrap();
        assert!(no_glb.history.records.iter().all(|r| r.loss_glb == 0.0 && r.loss_loc > 0.0));
        let no_loc = adapt(&params, &tgt.features, &ablation_variant(&base, Variant::NoLocal), None).unwrap();
        assert!(no_loc.history.records.iter().all(|r| r.loss_loc == 0.0 && r.loss_glb > 0.0));
    }

    #[test]
    fn uniform_pseudo_label_drives_prediction_to_uniform() {
        let mut rng = RngState::new(3);
        let arch = Architecture { input_dim: 4, hidden_dim: 16, feature_dim: 8, num_classes: 3 };
        let mut params = ModelParams::init(arch, &mut rng).unwrap();
        let x = Matrix::from_vec(1, 4, vec![1.0, -0.5, 2.0, 0.3]).unwrap();
        let uniform = Matrix::filled(1, 3, 1.0 / 3.0);
        let spec = LossSpec::Adaptation { eta: 0.3, global: Some(&uniform), local: None };
        let mut opt = OptimizerState::new(&params, 0.1, 0.9).unwrap();
        for _ in 0..100 {
            let (_, g) = crate::model::backward(&params, &x, &spec, Trainable::FeatureOnly).unwrap();
            sgd_step(&mut params, &mut opt, &g, Trainable::FeatureOnly).unwrap();
        }
        let p = forward(&params, &x).unwrap().probs;
        assert!(normalized_entropy(p.row(0)).unwrap() > 0.99);
    }

    #[test]
    fn history_csv_layout() {
        let h = AdaptHistory {
            records: vec![EpochRecord {
                epoch: 0,
                loss_glb: 0.5,
                loss_loc: 0.25,
                loss_tar: 0.4,
                h_score: None,
                acc_known: Some(1.0),
                acc_unknown: None,
                c_t_hat: 6,
            }],
        };
        assert_eq!(h.to_csv_string(), format!("{HISTORY_HEADER}\n0,0.5,0.25,0.4,,1,,6\n"));
    }
}
