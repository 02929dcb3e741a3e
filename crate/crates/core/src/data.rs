//! Synthetic domain-shift + category-shift scenarios and the dataset CSV
//! format.
//!
//! Labels use one global indexing: shared classes `[0, S)`, source-private
//! `[S, S + P)`, target-private `[S + P, S + P + T)`. A source model therefore
//! has exactly `S + P` outputs and any target label `≥ S + P` is unknown.
//!
//! CSV layout: header `f0,f1,…,f{d-1},label`, one sample per line, features
//! written with 17 significant digits (`{:.16e}`) so values round-trip
//! bit-exactly.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{GlcError, Result};
use crate::numeric::{l2_norm, squared_euclidean, Matrix, RngState};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    /// Closed set: identical label spaces.
    Clda,
    /// Partial set: target classes ⊂ source classes.
    Pda,
    /// Open set: source classes ⊂ target classes.
    Osda,
    /// Open-partial set: private classes on both sides.
    Opda,
}

impl FromStr for Scenario {
    type Err = GlcError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "clda" => Ok(Scenario::Clda),
            "pda" => Ok(Scenario::Pda),
            "osda" => Ok(Scenario::Osda),
            "opda" => Ok(Scenario::Opda),
            other => Err(GlcError::InvalidArgument(format!("unknown scenario `{other}`"))),
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::Clda => "clda",
            Scenario::Pda => "pda",
            Scenario::Osda => "osda",
            Scenario::Opda => "opda",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassRole {
    Shared,
    SourcePrivate,
    TargetPrivate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub scenario: Scenario,
    pub shared: usize,
    pub source_private: usize,
    pub target_private: usize,
    pub input_dim: usize,
    pub source_per_class: usize,
    pub target_per_class: usize,
    /// Source noise standard deviation.
    pub noise: f64,
    /// Minimum pairwise distance between class means, in units of `noise`.
    pub separation: f64,
    /// Norm of every class mean.
    pub radius: f64,
    /// Rotation applied to class means in the target domain, degrees.
    pub rotation_deg: f64,
    /// Target translation norm as a fraction of `radius`.
    pub translation: f64,
    /// Relative change of the noise level in the target domain.
    pub noise_shift: f64,
    pub seed: u64,
}

impl ScenarioSpec {
    /// Default geometry; splits are OPDA 10/10/11, OSDA 10/0/11, PDA 10/21/0
    /// and CLDA 10/0/0.
    pub fn preset(scenario: Scenario) -> Self {
        let (shared, source_private, target_private) = match scenario {
            Scenario::Opda => (10, 10, 11),
            Scenario::Osda => (10, 0, 11),
            Scenario::Pda => (10, 21, 0),
            Scenario::Clda => (10, 0, 0),
        };
        Self {
            scenario,
            shared,
            source_private,
            target_private,
            input_dim: 10,
            source_per_class: 60,
            target_per_class: 60,
            noise: 1.0,
            separation: 8.0,
            radius: 10.0,
            rotation_deg: 25.0,
            translation: 0.5,
            noise_shift: 0.0,
            seed: 0,
        }
    }

    pub fn num_source_classes(&self) -> usize {
        self.shared + self.source_private
    }

    pub fn num_classes(&self) -> usize {
        self.shared + self.source_private + self.target_private
    }

    pub fn role(&self, label: usize) -> Option<ClassRole> {
        if label < self.shared {
            Some(ClassRole::Shared)
        } else if label < self.num_source_classes() {
            Some(ClassRole::SourcePrivate)
        } else if label < self.num_classes() {
            Some(ClassRole::TargetPrivate)
        } else {
            None
        }
    }

    pub fn source_classes(&self) -> std::ops::Range<usize> {
        0..self.num_source_classes()
    }

    pub fn target_classes(&self) -> Vec<usize> {
        (0..self.shared)
            .chain(self.num_source_classes()..self.num_classes())
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(GlcError::InvalidArgument(m));
        let (s, p, t) = (self.shared, self.source_private, self.target_private);
        let ok = match self.scenario {
            Scenario::Clda => p == 0 && t == 0,
            Scenario::Pda => p > 0 && t == 0,
            Scenario::Osda => p == 0 && t > 0,
            Scenario::Opda => p > 0 && t > 0,
        };
        if !ok {
            return bad(format!(
                "{} does not allow the split {s}/{p}/{t} (shared/source-private/target-private)",
                self.scenario
            ));
        }
        if s == 0 {
            return bad("at least one shared class is required".into());
        }
        if self.input_dim < 2 {
            return bad("input dimension must be at least 2".into());
        }
        if self.source_per_class == 0 || self.target_per_class == 0 {
            return bad("samples per class must be positive".into());
        }
        let positive = [("noise", self.noise), ("separation", self.separation), ("radius", self.radius)];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [("rotation", self.rotation_deg), ("translation", self.translation)] {
            if !v.is_finite() {
                return bad(format!("{name} must be finite"));
            }
        }
        if !(self.noise_shift.is_finite() && self.noise_shift > -1.0) {
            return bad(format!("noise shift must exceed -1, got {}", self.noise_shift));
        }
        Ok(())
    }

    /// `key = value` lines accepted back by the `generate` command.
    pub fn to_config_string(&self) -> String {
        format!(
            "scenario = {}\nshared = {}\nsrc-private = {}\ntgt-private = {}\ndim = {}\n\
             src-per-class = {}\ntgt-per-class = {}\nnoise = {}\nseparation = {}\nradius = {}\n\
             rotation-deg = {}\ntranslation = {}\nnoise-shift = {}\nseed = {}\n",
            self.scenario,
            self.shared,
            self.source_private,
            self.target_private,
            self.input_dim,
            self.source_per_class,
            self.target_per_class,
            self.noise,
            self.separation,
            self.radius,
            self.rotation_deg,
            self.translation,
            self.noise_shift,
            self.seed
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
}

impl LabeledDataset {
    pub fn new(features: Matrix, labels: Vec<usize>) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(GlcError::Shape(format!(
                "{} rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Number of distinct labels, `max + 1`.
    pub fn label_span(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }
}

const MAX_PLACEMENT_TRIES: usize = 100_000;

fn class_means(spec: &ScenarioSpec, rng: &mut RngState) -> Result<Vec<Vec<f64>>> {
    let min_dist = spec.separation * spec.noise;
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(spec.num_classes());
    for class in 0..spec.num_classes() {
        let mut placed = false;
        for _ in 0..MAX_PLACEMENT_TRIES {
            let dir: Vec<f64> = (0..spec.input_dim).map(|_| rng.normal()).collect();
            let norm = l2_norm(&dir);
            if norm == 0.0 {
                continue;
            }
            let m: Vec<f64> = dir.iter().map(|v| v / norm * spec.radius).collect();
            if means.iter().all(|o| squared_euclidean(o, &m).sqrt() >= min_dist) {
                means.push(m);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(GlcError::InvalidArgument(format!(
                "cannot place class {class} at distance >= {min_dist} from the others on a sphere of radius {}",
                spec.radius
            )));
        }
    }
    Ok(means)
}

/// Rotates every coordinate pair `(2i, 2i+1)` by `deg`; an odd last
/// coordinate is left alone.
fn rotate(v: &[f64], deg: f64) -> Vec<f64> {
    let (s, c) = deg.to_radians().sin_cos();
    let mut out = v.to_vec();
    for pair in out.chunks_exact_mut(2) {
        let (a, b) = (pair[0], pair[1]);
        pair[0] = c * a - s * b;
        pair[1] = s * a + c * b;
    }
    out
}

fn sample(
    means: &[Vec<f64>],
    classes: &[usize],
    per_class: usize,
    noise: f64,
    rng: &mut RngState,
) -> Result<LabeledDataset> {
    let d = means[0].len();
    let mut data = Vec::with_capacity(classes.len() * per_class * d);
    let mut labels = Vec::with_capacity(classes.len() * per_class);
    for &c in classes {
        for _ in 0..per_class {
            data.extend(means[c].iter().map(|m| m + noise * rng.normal()));
            labels.push(c);
        }
    }
    LabeledDataset::new(Matrix::from_vec(labels.len(), d, data)?, labels)
}

/// Source and target datasets for `spec`. Source samples are
/// `mean + N(0, noise²)`; target samples are
/// `rotate(mean) + translation + N(0, (noise·(1 + noise_shift))²)`.
pub fn generate_scenario(spec: &ScenarioSpec) -> Result<(LabeledDataset, LabeledDataset)> {
    spec.validate()?;
    let root = RngState::new(spec.seed);
    let means = class_means(spec, &mut root.derive(&[0]))?;

    let mut dir_rng = root.derive(&[1]);
    let dir: Vec<f64> = (0..spec.input_dim).map(|_| dir_rng.normal()).collect();
    let dir_norm = l2_norm(&dir);
    let shift: Vec<f64> = dir
        .iter()
        .map(|v| v / dir_norm * spec.translation * spec.radius)
        .collect();
    let target_means: Vec<Vec<f64>> = means
        .iter()
        .map(|m| rotate(m, spec.rotation_deg).iter().zip(&shift).map(|(a, b)| a + b).collect())
        .collect();

    let source_classes: Vec<usize> = spec.source_classes().collect();
    let source = sample(&means, &source_classes, spec.source_per_class, spec.noise, &mut root.derive(&[2]))?;
    let target = sample(
        &target_means,
        &spec.target_classes(),
        spec.target_per_class,
        spec.noise * (1.0 + spec.noise_shift),
        &mut root.derive(&[3]),
    )?;
    Ok((source, target))
}

/// Serializes `data` in the dataset CSV format.
pub fn to_csv_string(data: &LabeledDataset) -> String {
    let d = data.dim();
    let mut out = String::new();
    for j in 0..d {
        out.push_str(&format!("f{j},"));
    }
    out.push_str("label\n");
    for (row, label) in data.features.row_iter().zip(&data.labels) {
        for v in row {
            out.push_str(&format!("{v:.16e},"));
        }
        out.push_str(&format!("{label}\n"));
    }
    out
}

pub fn save_csv(data: &LabeledDataset, path: &Path) -> Result<()> {
    std::fs::write(path, to_csv_string(data)).map_err(|e| GlcError::io(path, e))
}

pub fn load_csv(path: &Path) -> Result<LabeledDataset> {
    let text = std::fs::read(path).map_err(|e| GlcError::io(path, e))?;
    parse_csv(&text, path)
}

fn parse_csv(bytes: &[u8], path: &Path) -> Result<LabeledDataset> {
    let parse_err = |line: u64, msg: String| GlcError::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes);
    let header = reader
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .clone();
    let d = header.len().checked_sub(1).ok_or_else(|| parse_err(1, "empty header".into()))?;
    let header_ok = header.iter().take(d).enumerate().all(|(j, h)| h == format!("f{j}"))
        && header.get(d) == Some("label");
    if !header_ok {
        return Err(parse_err(1, format!("expected header f0..f{},label", d.saturating_sub(1))));
    }
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != d + 1 {
            return Err(parse_err(line, format!("expected {} columns, found {}", d + 1, record.len())));
        }
        for (j, field) in record.iter().take(d).enumerate() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| parse_err(line, format!("column f{j}: `{field}` is not a number")))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("column f{j} is not finite")));
            }
            values.push(v);
        }
        let label = &record[d];
        labels.push(
            label
                .trim()
                .parse()
                .map_err(|_| parse_err(line, format!("label `{label}` is not a class index")))?,
        );
    }
    LabeledDataset::new(Matrix::from_vec(labels.len(), d, values)?, labels)
}
