//! Command-line interface: `generate`, `train-source`, `adapt`, `eval`, `sweep`.
//!
//! Every subcommand accepts `--config FILE`, a flat `key = value` file whose
//! keys are flag names without the leading dashes. Flags given on the command
//! line win over the file.

use std::collections::HashSet;
use std::ffi::OsString;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{ArgAction, CommandFactory, Parser, Subcommand};

use crate::adapt::{
    ablation_variant, adapt, score_predictions, train_source, AdaptConfig, EvalLabels, Score, SourceConfig,
    Variant,
};
use crate::clustering::KMeansConfig;
use crate::data::{generate_scenario, load_csv, save_csv, LabeledDataset, Scenario, ScenarioSpec};
use crate::error::{GlcError, Result};
use crate::metrics::Averaging;
use crate::model::{classifier_checksum, forward, load_checkpoint, save_checkpoint, ModelParams};
use crate::numeric::{derive_seed, Metric};
use crate::par;

#[derive(Debug, Parser)]
#[command(name = "glc", version, about = "Source-free universal domain adaptation on synthetic data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic source/target scenario.
    Generate(GenerateArgs),
    /// Train a source model with label-smoothed cross-entropy.
    TrainSource(TrainSourceArgs),
    /// Adapt a source model to unlabeled target data.
    Adapt(AdaptArgs),
    /// Evaluate a checkpoint on a labeled dataset.
    Eval(EvalArgs),
    /// Grid over eta, rho and omega; one metrics row per cell.
    Sweep(SweepArgs),
}

#[derive(Debug, clap::Args)]
#[command(args_override_self = true)]
pub struct GenerateArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = Scenario::Opda)]
    pub scenario: Scenario,
    /// Shared classes [default: scenario preset].
    #[arg(long)]
    pub shared: Option<usize>,
    /// Source-private classes [default: scenario preset].
    #[arg(long)]
    pub src_private: Option<usize>,
    /// Target-private classes [default: scenario preset].
    #[arg(long)]
    pub tgt_private: Option<usize>,
    #[arg(long, default_value_t = 10)]
    pub dim: usize,
    #[arg(long, default_value_t = 60)]
    pub src_per_class: usize,
    #[arg(long, default_value_t = 60)]
    pub tgt_per_class: usize,
    /// Source noise standard deviation.
    #[arg(long, default_value_t = 1.0)]
    pub noise: f64,
    /// Minimum distance between class means, in noise units.
    #[arg(long, default_value_t = 8.0)]
    pub separation: f64,
    /// Norm of the class means.
    #[arg(long, default_value_t = 10.0)]
    pub radius: f64,
    #[arg(long, default_value_t = 25.0)]
    pub rotation_deg: f64,
    /// Target translation as a fraction of the radius.
    #[arg(long, default_value_t = 0.5)]
    pub translation: f64,
    /// Relative change of the target noise level.
    #[arg(long, default_value_t = 0.0)]
    pub noise_shift: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

impl GenerateArgs {
    pub fn spec(&self) -> ScenarioSpec {
        let preset = ScenarioSpec::preset(self.scenario);
        ScenarioSpec {
            scenario: self.scenario,
            shared: self.shared.unwrap_or(preset.shared),
            source_private: self.src_private.unwrap_or(preset.source_private),
            target_private: self.tgt_private.unwrap_or(preset.target_private),
            input_dim: self.dim,
            source_per_class: self.src_per_class,
            target_per_class: self.tgt_per_class,
            noise: self.noise,
            separation: self.separation,
            radius: self.radius,
            rotation_deg: self.rotation_deg,
            translation: self.translation,
            noise_shift: self.noise_shift,
            seed: self.seed,
        }
    }
}

#[derive(Debug, clap::Args)]
#[command(args_override_self = true)]
pub struct TrainSourceArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Labeled source CSV.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub hidden_dim: usize,
    #[arg(long, default_value_t = 32)]
    pub feature_dim: usize,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-2)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    /// Label smoothing.
    #[arg(long, default_value_t = 0.1)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Adaptation hyperparameters shared by `adapt` and `sweep`.
#[derive(Debug, Clone, clap::Args)]
pub struct AdaptFlags {
    /// Neighbors in the local consensus term.
    #[arg(long, default_value_t = 4)]
    pub knn_k: usize,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-2)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Rebuild pseudo-labels and the memory bank every N epochs.
    #[arg(long, default_value_t = 1)]
    pub pseudo_refresh: usize,
    /// Similarity used to pick the target cluster count.
    #[arg(long, default_value_t = Metric::Cosine)]
    pub metric: Metric,
    #[arg(long, default_value_t = 100)]
    pub kmeans_iters: usize,
    #[arg(long, default_value_t = Variant::Full)]
    pub variant: Variant,
    /// Confidence-based suppression of source-private classes.
    #[arg(long, default_value_t = true, action = ArgAction::Set)]
    pub suppress: bool,
    #[arg(long, default_value_t = Averaging::Instance)]
    pub averaging: Averaging,
}

impl AdaptFlags {
    fn config(&self, eta: f64, rho: f64, omega: f64) -> AdaptConfig {
        let base = AdaptConfig {
            eta,
            rho,
            knn_k: self.knn_k,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            momentum: self.momentum,
            seed: self.seed,
            pseudo_refresh: self.pseudo_refresh,
            omega,
            suppress: self.suppress,
            metric: self.metric,
            kmeans: KMeansConfig {
                max_iters: self.kmeans_iters,
                ..KMeansConfig::default()
            },
            ..AdaptConfig::default()
        };
        ablation_variant(&base, self.variant)
    }
}

#[derive(Debug, clap::Args)]
#[command(args_override_self = true)]
pub struct AdaptArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Source checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Target CSV. Labels are read only to score the history.
    #[arg(long)]
    pub data: PathBuf,
    /// Adapted checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch history CSV.
    #[arg(long)]
    pub history: Option<PathBuf>,
    /// Directory for per-epoch pseudo-label dumps.
    #[arg(long)]
    pub pseudo_dump: Option<PathBuf>,
    /// Score each epoch against the labels in the data file.
    #[arg(long, default_value_t = true, action = ArgAction::Set)]
    pub eval_history: bool,
    /// Weight of the global loss.
    #[arg(long, default_value_t = 0.3)]
    pub eta: f64,
    /// Suppression floor.
    #[arg(long, default_value_t = 0.75)]
    pub rho: f64,
    /// Entropy threshold for unknown rejection.
    #[arg(long, default_value_t = 0.55)]
    pub omega: f64,
    #[command(flatten)]
    pub flags: AdaptFlags,
}

#[derive(Debug, clap::Args)]
#[command(args_override_self = true)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Labeled CSV to score.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0.55)]
    pub omega: f64,
    #[arg(long, default_value_t = Averaging::Instance)]
    pub averaging: Averaging,
    /// Metrics CSV to append to.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Label written in the `tag` column.
    #[arg(long, default_value = "eval")]
    pub tag: String,
}

#[derive(Debug, clap::Args)]
#[command(args_override_self = true)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Source checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Labeled target CSV.
    #[arg(long)]
    pub data: PathBuf,
    /// Metrics CSV; cells already present are skipped.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.3,0.4,0.5")]
    pub etas: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0.5,0.6666666666666666,0.75,0.8,1")]
    pub rhos: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0.35,0.45,0.55,0.65,0.75")]
    pub omegas: Vec<f64>,
    #[command(flatten)]
    pub flags: AdaptFlags,
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_config(text: &str, path: &Path) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(GlcError::Parse {
                path: path.to_path_buf(),
                line: i as u64 + 1,
                msg: "expected `key = value`".into(),
            });
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || !k.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
            return Err(GlcError::Parse {
                path: path.to_path_buf(),
                line: i as u64 + 1,
                msg: format!("invalid key `{k}`"),
            });
        }
        out.push((k.replace('_', "-"), v.to_string()));
    }
    Ok(out)
}

/// Splices config-file entries into `args` right after the subcommand so
/// that later command-line flags override them.
fn expand_config(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let Some(sub) = args.get(1).and_then(|s| s.to_str()).map(str::to_owned) else {
        return Ok(args);
    };
    let mut rest = Vec::new();
    let mut config = None;
    let mut iter = args.iter().skip(2);
    while let Some(a) = iter.next() {
        match a.to_str() {
            Some("--config") => {
                let v = iter
                    .next()
                    .ok_or_else(|| GlcError::Usage("--config needs a path".into()))?;
                config = Some(PathBuf::from(v));
            }
            Some(s) if s.starts_with("--config=") => config = Some(PathBuf::from(&s["--config=".len()..])),
            _ => rest.push(a.clone()),
        }
    }
    let Some(path) = config else {
        return Ok(args);
    };
    let command = Cli::command();
    let Some(subcommand) = command.find_subcommand(&sub) else {
        return Err(GlcError::Usage(format!("unknown subcommand `{sub}`")));
    };
    let known: HashSet<String> = subcommand
        .get_arguments()
        .filter_map(|a| a.get_long().map(str::to_owned))
        .collect();
    let text = fs::read_to_string(&path).map_err(|e| GlcError::io(&path, e))?;
    let mut out = vec![args[0].clone(), args[1].clone()];
    for (k, v) in parse_config(&text, &path)? {
        if k == "config" || !known.contains(&k) {
            return Err(GlcError::Usage(format!("unknown key `{k}` in {}", path.display())));
        }
        out.push(format!("--{k}").into());
        out.push(v.into());
    }
    out.extend(rest);
    Ok(out)
}

/// Opens `path` for appending rows under `header`, writing the header when
/// the file is new or empty and rejecting a file with a different header.
fn open_metrics(path: &Path, header: &str) -> Result<BufWriter<File>> {
    let existing = match fs::read_to_string(path) {
        Ok(s) => s,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
        Err(e) => return Err(GlcError::io(path, e)),
    };
    let fresh = existing.is_empty();
    if !fresh && existing.lines().next() != Some(header) {
        return Err(GlcError::Parse {
            path: path.to_path_buf(),
            line: 1,
            msg: format!("expected header `{header}`"),
        });
    }
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| GlcError::io(path, e))?;
    let mut w = BufWriter::new(file);
    if fresh {
        writeln!(w, "{header}").map_err(|e| GlcError::io(path, e))?;
    } else if !existing.ends_with('\n') {
        writeln!(w).map_err(|e| GlcError::io(path, e))?;
    }
    Ok(w)
}

fn cmd_generate(args: &GenerateArgs) -> Result<()> {
    let spec = args.spec();
    let (source, target) = generate_scenario(&spec)?;
    fs::create_dir_all(&args.out).map_err(|e| GlcError::io(&args.out, e))?;
    save_csv(&source, &args.out.join("source.csv"))?;
    save_csv(&target, &args.out.join("target.csv"))?;
    let scenario = args.out.join("scenario.txt");
    fs::write(&scenario, spec.to_config_string()).map_err(|e| GlcError::io(&scenario, e))?;
    println!(
        "wrote {} source samples ({} classes) and {} target samples ({} classes) to {}",
        source.len(),
        spec.num_source_classes(),
        target.len(),
        spec.target_classes().len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_train_source(args: &TrainSourceArgs) -> Result<()> {
    let data = load_csv(&args.data)?;
    let cfg = SourceConfig {
        hidden_dim: args.hidden_dim,
        feature_dim: args.feature_dim,
        epochs: args.epochs,
        batch_size: args.batch_size,
        lr: args.lr,
        momentum: args.momentum,
        alpha: args.alpha,
        seed: args.seed,
    };
    let params = train_source(&data, &cfg)?;
    save_checkpoint(&params, &args.out)?;
    println!(
        "trained {} classes on {} samples; classifier sha256 {}",
        params.num_classes(),
        data.len(),
        classifier_checksum(&params)
    );
    Ok(())
}

fn check_input_dim(params: &ModelParams, data: &LabeledDataset) -> Result<()> {
    let want = params.architecture().input_dim;
    if data.dim() != want {
        return Err(GlcError::Shape(format!(
            "checkpoint expects {want} input features, data has {}",
            data.dim()
        )));
    }
    Ok(())
}

fn cmd_adapt(args: &AdaptArgs) -> Result<()> {
    let source = load_checkpoint(&args.checkpoint)?;
    let target = load_csv(&args.data)?;
    check_input_dim(&source, &target)?;
    let mut cfg = args.flags.config(args.eta, args.rho, args.omega);
    if let Some(dir) = &args.pseudo_dump {
        fs::create_dir_all(dir).map_err(|e| GlcError::io(dir, e))?;
        cfg.pseudo_dump_dir = Some(dir.clone());
    }
    let eval = args.eval_history.then_some(EvalLabels {
        labels: &target.labels,
        averaging: args.flags.averaging,
    });
    let before = classifier_checksum(&source);
    let outcome = adapt(&source, &target.features, &cfg, eval)?;
    let after = classifier_checksum(&outcome.params);
    if before != after {
        return Err(GlcError::Numeric("classifier changed during adaptation".into()));
    }
    save_checkpoint(&outcome.params, &args.out)?;
    if let Some(path) = &args.history {
        outcome.history.write_csv(path)?;
    }
    let c_t = outcome.class_count.map_or(0, |c| c.chosen);
    println!(
        "adapted for {} epochs ({}); estimated target clusters {c_t}; classifier sha256 {after}",
        outcome.history.records.len(),
        args.flags.variant
    );
    Ok(())
}

pub const EVAL_HEADER: &str = "tag,samples,omega,protocol,h_score,acc_known,acc_unknown,accuracy";

/// `protocol,h_score,acc_known,acc_unknown,accuracy` cells.
fn score_cells(score: &Score) -> String {
    match score {
        Score::Open(h) => format!("h-score,{},{},{},", h.h, h.acc_known, h.acc_unknown),
        Score::Closed(acc) => format!("accuracy,,,,{acc}"),
    }
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    if !(args.omega > 0.0 && args.omega < 1.0) {
        return Err(GlcError::InvalidArgument(format!("omega must be in (0, 1), got {}", args.omega)));
    }
    if args.tag.contains([',', '\n', '"']) {
        return Err(GlcError::Usage("tag must not contain commas, quotes or newlines".into()));
    }
    let params = load_checkpoint(&args.checkpoint)?;
    let data = load_csv(&args.data)?;
    check_input_dim(&params, &data)?;
    let probs = forward(&params, &data.features)?.probs;
    let score = score_predictions(&probs, &data.labels, args.averaging, args.omega)?;
    match score {
        Score::Open(h) => println!(
            "H-score {:.4} (known {:.4}, unknown {:.4}) on {} samples",
            h.h,
            h.acc_known,
            h.acc_unknown,
            data.len()
        ),
        Score::Closed(acc) => println!("accuracy {acc:.4} on {} samples", data.len()),
    }
    if let Some(path) = &args.metrics {
        let mut w = open_metrics(path, EVAL_HEADER)?;
        writeln!(w, "{},{},{},{}", args.tag, data.len(), args.omega, score_cells(&score)).map_err(|e| GlcError::io(path, e))?;
        w.flush().map_err(|e| GlcError::io(path, e))?;
    }
    Ok(())
}

pub const SWEEP_HEADER: &str = "eta,rho,omega,seed,c_t_hat,protocol,h_score,acc_known,acc_unknown,accuracy";

fn validate_grid(name: &str, values: &[f64]) -> Result<()> {
    if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
        return Err(GlcError::Usage(format!("--{name} needs finite values")));
    }
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    validate_grid("etas", &args.etas)?;
    validate_grid("rhos", &args.rhos)?;
    validate_grid("omegas", &args.omegas)?;
    let source = load_checkpoint(&args.checkpoint)?;
    let target = load_csv(&args.data)?;
    check_input_dim(&source, &target)?;

    let done: HashSet<(String, String)> = match fs::read_to_string(&args.out) {
        Ok(text) => text
            .lines()
            .skip(1)
            .filter_map(|l| {
                let mut f = l.split(',');
                Some((f.next()?.to_owned(), f.next()?.to_owned()))
            })
            .collect(),
        Err(_) => HashSet::new(),
    };
    let mut w = open_metrics(&args.out, SWEEP_HEADER)?;
    let cells: Vec<(usize, usize)> = (0..args.etas.len())
        .flat_map(|i| (0..args.rhos.len()).map(move |j| (i, j)))
        .filter(|&(i, j)| !done.contains(&(args.etas[i].to_string(), args.rhos[j].to_string())))
        .collect();
    let skipped = args.etas.len() * args.rhos.len() - cells.len();

    let run_cell = |(i, j): (usize, usize)| -> Result<String> {
        let (eta, rho) = (args.etas[i], args.rhos[j]);
        let mut cfg = args.flags.config(eta, rho, args.omegas[0]);
        cfg.seed = derive_seed(args.flags.seed, &[i as u64, j as u64]);
        let outcome = adapt(&source, &target.features, &cfg, None)?;
        let probs = forward(&outcome.params, &target.features)?.probs;
        let c_t = outcome.class_count.map_or(0, |c| c.chosen);
        let mut rows = String::new();
        for &omega in &args.omegas {
            let score = score_predictions(&probs, &target.labels, args.flags.averaging, omega)?;
            rows.push_str(&format!("{eta},{rho},{omega},{},{c_t},{}\n", cfg.seed, score_cells(&score)));
        }
        Ok(rows)
    };

    // Cells run in parallel in waves; one writer flushes them in grid order.
    let wave = std::thread::available_parallelism().map_or(1, usize::from);
    for chunk in cells.chunks(wave) {
        let results = par::map_range(chunk.len(), |k| run_cell(chunk[k]));
        for rows in results {
            w.write_all(rows?.as_bytes()).map_err(|e| GlcError::io(&args.out, e))?;
            w.flush().map_err(|e| GlcError::io(&args.out, e))?;
        }
    }
    println!(
        "sweep wrote {} cells ({} already present) to {}",
        cells.len(),
        skipped,
        args.out.display()
    );
    Ok(())
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::TrainSource(a) => cmd_train_source(a),
        Command::Adapt(a) => cmd_adapt(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let expanded = match expand_config(args) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    let cli = match Cli::try_parse_from(expanded) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
