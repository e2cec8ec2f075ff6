//! The `seanet` command line.
//!
//! Exit codes: 0 success, 2 input or configuration error, 3 numerical
//! failure (non-finite values, failed gradient check), 4 incompatible
//! artifact.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::{Precision, RunConfig};
use crate::data::{prepare, Dataset, DatasetManifest, Sample, Split};
use crate::error::{Error, Result};
use crate::gradcheck::{check_model, ensure_passed, GradCheckReport, ModelCheckSpec, TOLERANCE};
use crate::metrics::write_roc_csv;
use crate::nn::checkpoint::load_model;
use crate::nn::{build_model, Model, Placement};
use crate::tensor::Real;
use crate::train::{evaluate, load_checkpoint, run_dir_writer, save_checkpoint, train, Evaluation, TrainState};

#[derive(Debug, Parser)]
#[command(
    name = "seanet",
    version,
    about = "Attention networks with squeeze-and-excitation, trained with a hybrid loss"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Flat TOML configuration; unset keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// f32 for training, f64 for exact checks.
    #[arg(long, global = true)]
    pub precision: Option<Precision>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Preprocess a manifest (or a generated synthetic set) into a cache.
    Prepare {
        #[arg(long, conflicts_with = "synthetic", required_unless_present = "synthetic")]
        manifest: Option<PathBuf>,
        /// Generate the synthetic 5-grade dataset described by the config.
        #[arg(long)]
        synthetic: bool,
        #[arg(long)]
        cache_dir: Option<PathBuf>,
    },
    /// Train on a prepared cache.
    Train {
        #[arg(long)]
        cache_dir: Option<PathBuf>,
        /// at, se-at, at-se or sea.
        #[arg(long)]
        placement: Option<Placement>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from a checkpoint directory written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on the test split.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        cache_dir: Option<PathBuf>,
        /// Score one-hot true labels as logits instead of a model.
        #[arg(long)]
        oracle: bool,
    },
    /// Finite-difference check of every parameter gradient, all placements, in f64.
    Gradcheck {
        /// Check a single placement.
        #[arg(long)]
        placement: Option<Placement>,
    },
    /// Export test-split features as CSV.
    Features {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        cache_dir: Option<PathBuf>,
        /// Output file; defaults to `<out-dir>/features.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parses arguments from the process and runs; returns the exit code.
pub fn main() -> i32 {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.common.out_dir {
        cfg.out_dir = o.clone();
    }
    let explicit_precision = cli.common.precision;
    if let Some(p) = explicit_precision {
        cfg.precision = p;
    }
    match cli.command {
        Command::Prepare {
            manifest,
            synthetic,
            cache_dir,
        } => {
            if let Some(c) = cache_dir {
                cfg.cache_dir = c;
            }
            cfg.validate()?;
            cmd_prepare(&cfg, manifest.as_deref(), synthetic)
        }
        Command::Train {
            cache_dir,
            placement,
            lambda,
            epochs,
            resume,
        } => {
            if let Some(c) = cache_dir {
                cfg.cache_dir = c;
            }
            if let Some(p) = placement {
                cfg.placement = p;
            }
            if let Some(l) = lambda {
                cfg.lambda = l;
            }
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            cfg.validate()?;
            match cfg.precision {
                Precision::F32 => cmd_train::<f32>(&cfg, resume.as_deref()),
                Precision::F64 => cmd_train::<f64>(&cfg, resume.as_deref()),
            }
        }
        Command::Eval {
            checkpoint,
            cache_dir,
            oracle,
        } => {
            if let Some(c) = cache_dir {
                cfg.cache_dir = c;
            }
            let ckpt = match (checkpoint, oracle) {
                (Some(c), _) => Some(c),
                (None, true) => None,
                (None, false) => {
                    return Err(Error::InvalidInput("eval needs --checkpoint (or --oracle)".into()));
                }
            };
            match cfg.precision {
                Precision::F32 => cmd_eval::<f32>(&cfg, ckpt.as_deref(), oracle),
                Precision::F64 => cmd_eval::<f64>(&cfg, ckpt.as_deref(), oracle),
            }
        }
        Command::Gradcheck { placement } => {
            if explicit_precision == Some(Precision::F32) {
                return Err(Error::InvalidConfig(vec![
                    "gradcheck runs in 64-bit precision only".into()
                ]));
            }
            cmd_gradcheck(&cfg, placement, cli.common.out_dir.is_some())
        }
        Command::Features {
            checkpoint,
            cache_dir,
            out,
        } => {
            if let Some(c) = cache_dir {
                cfg.cache_dir = c;
            }
            let out = out.unwrap_or_else(|| cfg.out_dir.join("features.csv"));
            match cfg.precision {
                Precision::F32 => cmd_features::<f32>(&cfg, &checkpoint, &out),
                Precision::F64 => cmd_features::<f64>(&cfg, &checkpoint, &out),
            }
        }
    }
}

fn create(path: &Path) -> Result<fs::File> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::File::create(path).map_err(|e| Error::io(path, e))
}

pub fn cmd_prepare(cfg: &RunConfig, manifest: Option<&Path>, synthetic: bool) -> Result<()> {
    let m = match manifest {
        Some(p) => DatasetManifest::read_csv(p)?,
        None if synthetic => DatasetManifest::synthetic(
            cfg.classes,
            cfg.synthetic_train_per_class,
            cfg.synthetic_test_per_class,
            cfg.synthetic_render_size,
            cfg.seed,
        )?,
        None => return Err(Error::InvalidInput("prepare needs --manifest or --synthetic".into())),
    };
    let summary = prepare(&m, &cfg.prepare(), &cfg.cache_dir)?;
    println!(
        "prepared {} records into {} (train {:?}, test {:?})",
        m.len(),
        cfg.cache_dir.display(),
        summary.train_counts,
        summary.test_counts
    );
    let weights: Vec<String> = summary.weights.values().iter().map(|w| format!("{w}")).collect();
    println!("class weights: {}", weights.join(", "));
    Ok(())
}

fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    let data = Dataset::load(&cfg.cache_dir)?;
    if data.classes() != cfg.classes {
        return Err(Error::Incompatible(format!(
            "cache {} has {} classes, configuration {}",
            cfg.cache_dir.display(),
            data.classes(),
            cfg.classes
        )));
    }
    Ok(data)
}

/// Rejects a model that cannot consume images of the cached size.
fn check_compatible<T: Real>(model: &Model<T>, data: &Dataset) -> Result<()> {
    let mc = model.config();
    if mc.classes != data.classes() {
        return Err(Error::Incompatible(format!(
            "checkpoint predicts {} classes, dataset has {}",
            mc.classes,
            data.classes()
        )));
    }
    if mc.in_channels != 3 {
        return Err(Error::Incompatible(format!(
            "checkpoint expects {} input channels, images have 3",
            mc.in_channels
        )));
    }
    if mc.output_size(data.image_size()).pow(2) < 2 {
        return Err(Error::Incompatible(format!(
            "checkpoint backbone reduces {}×{} images to a single cell",
            data.image_size(),
            data.image_size()
        )));
    }
    Ok(())
}

pub fn cmd_train<T: Real>(cfg: &RunConfig, resume: Option<&Path>) -> Result<()> {
    let data = load_data(cfg)?;
    let tc = cfg.train();
    let (mut model, state) = match resume {
        Some(dir) => {
            let (model, state) = load_checkpoint::<T>(dir)?;
            if model.config() != &cfg.model() {
                return Err(Error::Incompatible(format!(
                    "checkpoint {} was trained with a different model configuration",
                    dir.display()
                )));
            }
            (model, state)
        }
        None => {
            let model = build_model::<T>(&cfg.model(), cfg.seed)?;
            let state = TrainState::new(&model, &tc)?;
            (model, state)
        }
    };
    check_compatible(&model, &data)?;
    cfg.echo(&cfg.out_dir)?;
    let state = train(&mut model, &data, &tc, state, run_dir_writer(&cfg.out_dir))?;
    save_checkpoint(&model, &state, &cfg.out_dir.join("final"))?;
    let last = state.history.last().expect("epoch 0 is always recorded");
    println!(
        "ACA {:.4}  macro-F1 {:.4}  AUC {:.4}",
        last.aca, last.macro_f1, last.auc
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct EvalReport<'a> {
    split: Split,
    samples: usize,
    aca: f64,
    macro_f1: f64,
    auc: f64,
    accuracy: f64,
    per_class_f1: &'a [f64],
    per_class_auc: &'a [Option<f64>],
    skipped_auc_classes: &'a [usize],
}

pub fn write_evaluation(ev: &Evaluation, dir: &Path) -> Result<()> {
    let report = EvalReport {
        split: Split::Test,
        samples: ev.labels.len(),
        aca: ev.aca,
        macro_f1: ev.macro_f1,
        auc: ev.auc.auc,
        accuracy: ev.confusion.accuracy(),
        per_class_f1: &ev.per_class_f1,
        per_class_auc: &ev.auc.per_class,
        skipped_auc_classes: &ev.auc.skipped,
    };
    let mut f = create(&dir.join("metrics.json"))?;
    serde_json::to_writer_pretty(&mut f, &report).map_err(|e| Error::InvalidInput(e.to_string()))?;
    writeln!(f).map_err(|e| Error::io(dir.join("metrics.json"), e))?;
    write_roc_csv(&ev.auc.curves, create(&dir.join("roc.csv"))?)?;
    ev.confusion.write_csv(create(&dir.join("confusion.csv"))?)
}

pub fn cmd_eval<T: Real>(cfg: &RunConfig, checkpoint: Option<&Path>, oracle: bool) -> Result<()> {
    let data = load_data(cfg)?;
    let test: &[Sample] = data.samples(Split::Test);
    if test.is_empty() {
        return Err(Error::InvalidInput("the cache has no test records".into()));
    }
    let ev = if oracle {
        let labels: Vec<usize> = test.iter().map(|s| s.label).collect();
        let k = data.classes();
        let logits: Vec<f64> = labels
            .iter()
            .flat_map(|&y| (0..k).map(move |j| if j == y { 1.0 } else { 0.0 }))
            .collect();
        Evaluation::from_logits(&logits, k, &labels)?
    } else {
        let dir = checkpoint.expect("checked by caller");
        let model = load_model::<T>(dir)?;
        check_compatible(&model, &data)?;
        evaluate(&model, test, data.image_size(), cfg.batch_size)?
    };
    write_evaluation(&ev, &cfg.out_dir)?;
    println!("ACA {:.4}  macro-F1 {:.4}  AUC {:.4}", ev.aca, ev.macro_f1, ev.auc.auc);
    Ok(())
}

pub fn write_gradcheck_csv<W: std::io::Write>(reports: &[GradCheckReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["placement", "group", "elements", "worst_rel_err", "refined", "skipped"])?;
    for r in reports {
        for g in &r.groups {
            w.write_record([
                r.label.clone(),
                g.name.clone(),
                g.elements.to_string(),
                format!("{:e}", g.worst_rel_err),
                g.refined.to_string(),
                g.skipped.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io("gradcheck.csv", e))
}

pub fn cmd_gradcheck(cfg: &RunConfig, only: Option<Placement>, write_csv: bool) -> Result<()> {
    let placements: Vec<Placement> = match only {
        Some(p) => vec![p],
        None => Placement::ALL.to_vec(),
    };
    let mut reports = Vec::new();
    println!(
        "{:<6} {:<36} {:>8} {:>13} {:>7}",
        "place", "group", "elements", "worst_rel_err", "status"
    );
    for p in placements {
        let mut spec = ModelCheckSpec::small(p);
        spec.seed = cfg.seed;
        let r = check_model(&spec)?;
        for g in &r.groups {
            let ok = g.worst_rel_err < TOLERANCE;
            println!(
                "{:<6} {:<36} {:>8} {:>13.3e} {:>7}",
                r.label,
                g.name,
                g.elements,
                g.worst_rel_err,
                if ok { "ok" } else { "FAIL" }
            );
        }
        reports.push(r);
    }
    if write_csv {
        write_gradcheck_csv(&reports, create(&cfg.out_dir.join("gradcheck.csv"))?)?;
    }
    ensure_passed(&reports, TOLERANCE)?;
    let worst = reports.iter().map(GradCheckReport::worst).fold(0.0, f64::max);
    println!("all placements pass: worst relative error {worst:.3e} < {TOLERANCE:e}");
    Ok(())
}

pub fn write_features_csv<W: std::io::Write>(ev: &Evaluation, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["sample".to_string(), "label".to_string()];
    header.extend((0..ev.feature_dim).map(|j| format!("f{j}")));
    w.write_record(&header)?;
    for (i, (&rec, &y)) in ev.records.iter().zip(&ev.labels).enumerate() {
        let mut row = vec![rec.to_string(), y.to_string()];
        row.extend(
            ev.features[i * ev.feature_dim..(i + 1) * ev.feature_dim]
                .iter()
                .map(|v| v.to_string()),
        );
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io("features.csv", e))
}

pub fn cmd_features<T: Real>(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<()> {
    let data = load_data(cfg)?;
    let model = load_model::<T>(checkpoint)?;
    check_compatible(&model, &data)?;
    let ev = evaluate(&model, data.samples(Split::Test), data.image_size(), cfg.batch_size)?;
    write_features_csv(&ev, create(out)?)?;
    println!(
        "wrote {} feature rows of width {} to {}",
        ev.labels.len(),
        ev.feature_dim,
        out.display()
    );
    Ok(())
}
