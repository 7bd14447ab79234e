//! Command-line front end: argument types and command implementations.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use image::GrayImage;
use log::info;

use crate::checkpoint::{self, Metadata};
use crate::config::{RunConfig, SEED_ENV};
use crate::data::{
    self, assemble_input, load_manifest, load_sample, load_train_samples, read_gray, resize_mask, write_atomic,
    write_pgm, Plane, Split,
};
use crate::error::{Error, Result};
use crate::eval::{self, Detection, EvalRecord};
use crate::model::EdgeDoc;
use crate::training::{self, history_csv};

#[derive(Debug, Parser)]
#[command(name = "edgedoc", version, about = "Forgery detection and localization for identity documents")]
pub struct Cli {
    /// key=value configuration file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Override a configuration key (repeatable), e.g. --set optim.epochs=5.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,

    #[arg(long, env = SEED_ENV, global = true)]
    pub seed: Option<u64>,

    /// Print the fully resolved configuration and exit.
    #[arg(long, global = true)]
    pub print_config: bool,

    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic identity-card corpus.
    Synth(SynthArgs),
    /// Train a model and keep the checkpoint with the lowest validation loss.
    Train(TrainArgs),
    /// Score every sample of a manifest and write probability masks.
    Infer(InferArgs),
    /// Compute detection metrics for a records file.
    Eval(EvalArgs),
    /// Fuse the records of two detectors.
    Fuse(FuseArgs),
    /// Export the ROC curve of a records file.
    Roc(RocArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub bonafide: usize,
    #[arg(long)]
    pub attack: usize,
    /// Tag written into the manifest.
    #[arg(long)]
    pub split: Option<Split>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub val: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub lambda_mask: Option<f32>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<u32>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub records: PathBuf,
    /// Ground-truth manifest; enables pixel-level scores for records with masks.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub threshold: Option<f32>,
    /// Row label in the printed table.
    #[arg(long, default_value = "edgedoc")]
    pub name: String,
    /// Directory for report.txt and roc.csv.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long)]
    pub weight: Option<f32>,
    #[arg(long)]
    pub alpha: Option<f32>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RocArgs {
    #[arg(long)]
    pub records: PathBuf,
    /// Output CSV path.
    #[arg(long)]
    pub out: PathBuf,
}

impl Cli {
    /// Defaults, then the config file, then `--set`, then dedicated flags.
    pub fn resolve_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            cfg.set(k.trim(), v)?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        match &self.command {
            Command::Train(a) => {
                if let Some(v) = a.lambda_mask {
                    cfg.loss.lambda_mask = v;
                }
                if let Some(v) = a.lr {
                    cfg.optim.lr0 = v;
                }
                if let Some(v) = a.epochs {
                    cfg.optim.epochs = v;
                }
            }
            Command::Eval(a) => {
                if let Some(v) = a.threshold {
                    cfg.threshold = v;
                }
            }
            Command::Fuse(a) => {
                if let Some(v) = a.weight {
                    cfg.fusion_weight = v;
                }
                if let Some(v) = a.alpha {
                    cfg.fusion_alpha = v;
                }
            }
            _ => {}
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Runs a parsed command, writing human-readable output to stdout.
pub fn run(cli: &Cli) -> Result<()> {
    let cfg = cli.resolve_config()?;
    if cli.print_config {
        print!("{}", cfg.to_text());
        return Ok(());
    }
    match &cli.command {
        Command::Synth(a) => cmd_synth(a, &cfg),
        Command::Train(a) => cmd_train(a, &cfg),
        Command::Infer(a) => cmd_infer(a, &cfg),
        Command::Eval(a) => cmd_eval(a, &cfg),
        Command::Fuse(a) => cmd_fuse(a, &cfg),
        Command::Roc(a) => cmd_roc(a),
    }
}

fn cmd_synth(a: &SynthArgs, cfg: &RunConfig) -> Result<()> {
    let mut manifest = data::synth_generate(a.bonafide, a.attack, cfg.seed, &a.out)?;
    let path = a.out.join(data::MANIFEST_FILE);
    if a.split.is_some() {
        manifest.split = a.split;
        manifest.write(&path)?;
    }
    println!("{}", path.display());
    println!("samples={} bonafide={} attack={} seed={}", a.bonafide + a.attack, a.bonafide, a.attack, cfg.seed);
    Ok(())
}

fn cmd_train(a: &TrainArgs, cfg: &RunConfig) -> Result<()> {
    let extractor = cfg.extractor();
    let size = cfg.model.input_size;
    let train_set = load_train_samples(&load_manifest(&a.train)?, &extractor, size)?;
    let val_set = load_train_samples(&load_manifest(&a.val)?, &extractor, size)?;
    info!("loaded {} training and {} validation samples", train_set.len(), val_set.len());
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    write_atomic(&a.out.join("config.txt"), cfg.to_text().as_bytes())?;
    let model = EdgeDoc::build(cfg.model.clone(), cfg.seed)?;
    let ckpt_dir = a.out.join("checkpoint");
    let outcome = training::train(model, &train_set, &val_set, &cfg.train_config(), |best, rec| {
        let mut meta = Metadata::new();
        meta.insert("epoch".into(), rec.epoch.to_string());
        meta.insert("val_loss".into(), rec.val_loss.to_string());
        meta.insert("seed".into(), cfg.seed.to_string());
        checkpoint::save(&ckpt_dir, best, &meta)
    })?;
    write_atomic(&a.out.join("history.csv"), history_csv(&outcome.history).as_bytes())?;
    println!("{}", ckpt_dir.display());
    println!("best_epoch={} best_val_loss={}", outcome.best_epoch, outcome.best_val_loss);
    Ok(())
}

/// Probability map as an 8-bit grayscale image (p·255, rounded).
pub fn mask_to_pgm(p: &Plane) -> GrayImage {
    let px = p.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    GrayImage::from_raw(p.width as u32, p.height as u32, px).expect("plane dimensions")
}

pub fn pgm_to_mask(img: &GrayImage) -> Plane {
    let data = img.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
    Plane::new(img.height() as usize, img.width() as usize, data)
}

fn cmd_infer(a: &InferArgs, cfg: &RunConfig) -> Result<()> {
    // A config that fails to parse inside a checkpoint is a checkpoint problem.
    let (model, _) = checkpoint::load(&a.checkpoint).map_err(|e| match e {
        Error::Config(m) => Error::Checkpoint(m),
        other => other,
    })?;
    let manifest = load_manifest(&a.manifest)?;
    let extractor = cfg.extractor();
    let size = model.config().input_size;
    let mut records = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let sample = load_sample(&manifest, &e.id)?;
        let (x, _) = assemble_input(&sample, &extractor, size)?;
        let pred = model.predict(&x)?.remove(0);
        let rel = PathBuf::from("masks").join(format!("{}.pgm", e.id));
        write_pgm(a.out.join(&rel), &mask_to_pgm(&Plane::new(pred.height, pred.width, pred.mask)))?;
        records.push(EvalRecord {
            id: e.id.clone(),
            label: e.label as u8,
            score: pred.score,
            mask_path: Some(rel),
        });
    }
    let path = a.out.join("records.csv");
    eval::write_records(&path, &records)?;
    println!("{}", path.display());
    println!("records={}", records.len());
    Ok(())
}

fn records_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Mean pixel F1 and IoU over attack records that carry a mask.
fn localization_summary(records: &[EvalRecord], base: &Path, manifest: &Path, threshold: f32) -> Result<Option<(f64, f64, usize)>> {
    let gt = load_manifest(manifest)?;
    eval::check_same_ids(records.iter().map(|r| r.id.as_str()), gt.entries.iter().map(|e| e.id.as_str()))?;
    let (mut f1, mut iou, mut n) = (0.0, 0.0, 0usize);
    for r in records.iter().filter(|r| r.label == 1) {
        let Some(mask_path) = &r.mask_path else { continue };
        let pred = pgm_to_mask(&read_gray(base.join(mask_path))?);
        let sample = load_sample(&gt, &r.id)?;
        let truth = resize_mask(&sample.mask, pred.height, pred.width);
        let (f, i) = eval::localization_metrics(&pred, &truth, threshold)?;
        f1 += f;
        iou += i;
        n += 1;
    }
    Ok((n > 0).then(|| (f1 / n as f64, iou / n as f64, n)))
}

fn cmd_eval(a: &EvalArgs, cfg: &RunConfig) -> Result<()> {
    let records = eval::read_records(&a.records)?;
    let m = eval::metrics(&records, cfg.threshold)?;
    let mut kv = eval::report_kv(&m);
    if let Some(manifest) = &a.manifest {
        if let Some((f1, iou, n)) = localization_summary(&records, &records_dir(&a.records), manifest, cfg.threshold)? {
            kv.push_str(&format!("pixel_f1={f1}\npixel_iou={iou}\nlocalized={n}\n"));
        }
    }
    let table = eval::report_table(&a.name, &m);
    print!("{table}\n{kv}");
    if let Some(out) = &a.out {
        write_atomic(&out.join("report.txt"), format!("{table}\n{kv}").as_bytes())?;
        let curve = eval::roc_curve(&records)?;
        write_atomic(&out.join("roc.csv"), eval::roc_csv(&curve).as_bytes())?;
    }
    Ok(())
}

fn load_detections(path: &Path) -> Result<Vec<Detection>> {
    let base = records_dir(path);
    eval::read_records(path)?
        .into_iter()
        .map(|r| {
            let mask = match &r.mask_path {
                Some(p) => Some(pgm_to_mask(&read_gray(base.join(p))?)),
                None => None,
            };
            Ok(Detection {
                id: r.id,
                label: r.label,
                score: r.score,
                mask,
            })
        })
        .collect()
}

fn cmd_fuse(a: &FuseArgs, cfg: &RunConfig) -> Result<()> {
    let da = load_detections(&a.a)?;
    let db = load_detections(&a.b)?;
    let fused = eval::fuse(&da, &db, cfg.fusion_weight, cfg.fusion_alpha)?;
    let mut records = Vec::with_capacity(fused.len());
    for d in fused {
        let mask_path = match &d.mask {
            Some(m) => {
                let rel = PathBuf::from("masks").join(format!("{}.pgm", d.id));
                write_pgm(a.out.join(&rel), &mask_to_pgm(m))?;
                Some(rel)
            }
            None => None,
        };
        records.push(EvalRecord {
            id: d.id,
            label: d.label,
            score: d.score,
            mask_path,
        });
    }
    let path = a.out.join("records.csv");
    eval::write_records(&path, &records)?;
    println!("{}", path.display());
    Ok(())
}

fn cmd_roc(a: &RocArgs) -> Result<()> {
    let records = eval::read_records(&a.records)?;
    let curve = eval::roc_curve(&records)?;
    write_atomic(&a.out, eval::roc_csv(&curve).as_bytes())?;
    println!("auc={}", eval::roc_auc(&records)?);
    Ok(())
}
