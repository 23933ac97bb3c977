//! Command-line surface: `psunet train|infer|eval|inspect|ablate|synth`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{list_images, load_image, save_mask, write_atomic};
use crate::losses::LossTerms;
use crate::metrics::{evaluate_dirs, MetricsConfig, MetricsReport};
use crate::model::{
    build_psunet, count_macs, count_params, predict_resized, Boundary, ModelConfig,
};
use crate::train::{
    evaluate_samples, load_checkpoint, load_checkpoint_for, load_dataset, save_dataset,
    synthetic_dataset, train_stage, AdamState, Sample, Stage, TrainConfig, TrainOutputs,
};

/// Contents of a `--config` JSON file. Every section is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: Option<ModelConfig>,
    pub train: TrainConfig,
    pub metrics: MetricsConfig,
    pub ablation: Option<Vec<AblationRow>>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn model_or_default(&self) -> ModelConfig {
        self.model.clone().unwrap_or_default()
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "psunet",
    version,
    about = "PSUNet salient object detection: training, inference and evaluation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one stage on `<input>/images` + `<input>/masks`.
    Train(TrainArgs),
    /// Write saliency masks for an image or a directory of images.
    Infer(InferArgs),
    /// Score a prediction directory against ground truth.
    Eval(EvalArgs),
    /// Print parameter and MAC counts for a configuration.
    Inspect(InspectArgs),
    /// Train and score a grid of architecture / loss variants.
    Ablate(AblateArgs),
    /// Generate a synthetic shapes dataset.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset root holding `images/` and `masks/`.
    #[arg(long)]
    pub input: PathBuf,
    /// Checkpoint written during and after training.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Checkpoint to start from; stage 2 defaults to `--checkpoint`.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub stage: u8,
    #[arg(long)]
    pub seed: Option<u64>,
    /// JSON-lines training log; defaults to `<checkpoint>.log.jsonl`.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// An image file or a directory of images.
    #[arg(long)]
    pub input: PathBuf,
    /// Output directory for `<stem>.png` masks.
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 640)]
    pub size: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Prediction directory.
    #[arg(long)]
    pub input: PathBuf,
    /// Ground-truth directory.
    #[arg(long)]
    pub gt: PathBuf,
    /// CSV report path; the JSON aggregate goes next to it.
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Input height and optional width (defaults to the height).
    #[arg(long, num_args = 1..=2, default_values_t = [640])]
    pub size: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset root; a synthetic set is generated when omitted.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// CSV report path.
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `train.max_steps` for every row.
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub count: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Runs a parsed command and maps failures to an exit code, printing a
/// `error[<category>]: ...` line on stderr.
pub fn run(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Infer(a) => cmd_infer(&a).map(|_| ()),
        Command::Eval(a) => cmd_eval(&a),
        Command::Inspect(a) => cmd_inspect(&a).map(|s| print!("{s}")),
        Command::Ablate(a) => cmd_ablate_args(&a),
        Command::Synth(a) => cmd_synth(&a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let cat = e.category();
            eprintln!("error[{}]: {e}", cat.tag());
            cat.exit_code()
        }
    }
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = RunConfig::load(a.config.as_deref())?;
    let stage = Stage::try_from(a.stage).map_err(Error::Config)?;
    let mut train = cfg.train.clone();
    if let Some(seed) = a.seed {
        train.seed = seed;
    }
    let resume = match (&a.resume, stage) {
        (Some(p), _) => Some(p.clone()),
        (None, Stage::Two) => Some(a.checkpoint.clone()),
        (None, Stage::One) => None,
    };
    let (mut model, mut adam) = match resume {
        Some(path) => {
            let ckpt = match &cfg.model {
                Some(m) => load_checkpoint_for(&path, m)?,
                None => load_checkpoint(&path)?,
            };
            let adam = ckpt
                .adam
                .unwrap_or_else(|| AdamState::new(ckpt.model.params()));
            (ckpt.model, adam)
        }
        None => {
            let model = build_psunet(cfg.model_or_default(), train.seed)?;
            let adam = AdamState::new(model.params());
            (model, adam)
        }
    };
    let data = load_dataset(&a.input)?;
    let log = a.output.clone().unwrap_or_else(|| {
        let mut s = a.checkpoint.clone().into_os_string();
        s.push(".log.jsonl");
        PathBuf::from(s)
    });
    let history = train_stage(
        &mut model,
        &mut adam,
        &data,
        stage,
        &train,
        TrainOutputs {
            checkpoint: Some(&a.checkpoint),
            log: Some(&log),
        },
    )?;
    if let Some(last) = history.last() {
        println!(
            "stage {} finished after {} steps, loss {:.6}",
            u8::from(stage),
            history.len(),
            last.loss
        );
    }
    Ok(())
}

/// Returns the written mask paths.
pub fn cmd_infer(a: &InferArgs) -> Result<Vec<PathBuf>> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    ckpt.model.config().check_input_size(a.size, a.size)?;
    let inputs = if a.input.is_dir() {
        list_images(&a.input)?
    } else {
        vec![a.input.clone()]
    };
    if inputs.is_empty() {
        return Err(Error::Config(format!(
            "no images found in {}",
            a.input.display()
        )));
    }
    fs::create_dir_all(&a.output).map_err(|e| Error::io(&a.output, e))?;
    let mut written = Vec::with_capacity(inputs.len());
    for path in inputs {
        let rec = load_image(&path)?;
        let mask = predict_resized(&ckpt.model, &rec.pixels, a.size)?;
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let out = a.output.join(format!("{stem}.png"));
        save_mask(&mask, &out)?;
        written.push(out);
    }
    Ok(written)
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let cfg = RunConfig::load(a.config.as_deref())?;
    let report = evaluate_dirs(&a.input, &a.gt, &cfg.metrics)?;
    report.write(&a.output)?;
    if let Some(agg) = &report.aggregate {
        println!(
            "{} images: mae {:.4} maxF {:.4} S-measure {:.4}",
            agg.count, agg.mae, agg.maxf, agg.smeasure
        );
    }
    if report.is_complete() {
        Ok(())
    } else {
        Err(Error::Metric(format!(
            "evaluation incomplete: {}",
            report.errors.join("; ")
        )))
    }
}

fn human(v: u64, unit: f64, suffix: &str) -> String {
    format!("{:.2}{suffix}", v as f64 / unit)
}

pub fn cmd_inspect(a: &InspectArgs) -> Result<String> {
    let cfg = RunConfig::load(a.config.as_deref())?.model_or_default();
    let (h, w) = match a.size[..] {
        [h] => (h, h),
        [h, w] => (h, w),
        _ => return Err(Error::Config("--size takes one or two values".into())),
    };
    let params = count_params(&cfg)? as u64;
    let macs = count_macs(&cfg, h, w)?;
    let mut out = String::new();
    let _ = writeln!(out, "input      {h}x{w}");
    let _ = writeln!(out, "params     {params} ({})", human(params, 1e6, "M"));
    let _ = writeln!(out, "macs       {macs} ({})", human(macs, 1e9, "G"));
    Ok(out)
}

/// One configuration of the ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationRow {
    /// First table column, e.g. `Arch.` or `Loss`.
    pub section: String,
    pub label: String,
    pub boundary: Boundary,
    pub t: usize,
    pub loss_terms: LossTerms,
}

/// Architecture rows (bilinear boundary, pixel shuffle with t = 2, 3, 4) and
/// loss rows (BCE alone, with SSIM, with IoU, with both).
pub fn default_ablation_grid() -> Vec<AblationRow> {
    let arch = |label: &str, boundary, t| AblationRow {
        section: "Arch.".into(),
        label: label.into(),
        boundary,
        t,
        loss_terms: LossTerms::default(),
    };
    let loss = |ssim, iou| {
        let terms = LossTerms {
            bce: true,
            ssim,
            iou,
        };
        AblationRow {
            section: "Loss".into(),
            label: terms.label(),
            boundary: Boundary::Spsm,
            t: 2,
            loss_terms: terms,
        }
    };
    vec![
        arch("No SPSM", Boundary::Bilinear, 1),
        arch("SPSM with t=2", Boundary::Spsm, 2),
        arch("SPSM with t=3", Boundary::Spsm, 3),
        arch("SPSM with t=4", Boundary::Spsm, 4),
        loss(false, false),
        loss(true, false),
        loss(false, true),
        loss(true, true),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationResult {
    pub row: AblationRow,
    pub size: usize,
    pub outcome: std::result::Result<MetricsReport, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub results: Vec<AblationResult>,
}

impl AblationReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("ablation,configuration,maxf,mae,smeasure\n");
        for r in &self.results {
            let cells = match r
                .outcome
                .as_ref()
                .ok()
                .and_then(|rep| rep.aggregate.as_ref())
            {
                Some(a) => format!("{:.6},{:.6},{:.6}", a.maxf, a.mae, a.smeasure),
                None => "failed,failed,failed".into(),
            };
            let _ = writeln!(out, "{},{},{cells}", r.row.section, r.row.label);
        }
        out
    }

    pub fn failures(&self) -> Vec<String> {
        self.results
            .iter()
            .filter_map(|r| match &r.outcome {
                Ok(rep) if rep.aggregate.is_some() => None,
                Ok(rep) => Some(format!("{}: {}", r.row.label, rep.errors.join("; "))),
                Err(e) => Some(format!("{}: {e}", r.row.label)),
            })
            .collect()
    }
}

fn ablation_row(
    base: &RunConfig,
    row: &AblationRow,
    train_set: &[Sample],
    eval_set: &[Sample],
) -> Result<(usize, MetricsReport)> {
    let model_cfg = ModelConfig {
        boundary: row.boundary,
        t: row.t,
        ..base.model_or_default()
    };
    model_cfg.validate()?;
    let multiple = model_cfg.required_multiple();
    let size = base.train.augment.crop_to / multiple * multiple;
    if size == 0 {
        return Err(Error::Config(format!(
            "crop size {} is smaller than the required multiple {multiple}",
            base.train.augment.crop_to
        )));
    }
    let mut train = base.train.clone();
    train.loss_terms = row.loss_terms;
    train.augment.crop_to = size;
    train.augment.resize_to = train.augment.resize_to.max(size);
    let mut model = build_psunet(model_cfg, train.seed)?;
    let mut adam = AdamState::new(model.params());
    train_stage(
        &mut model,
        &mut adam,
        train_set,
        Stage::One,
        &train,
        TrainOutputs::default(),
    )?;
    Ok((
        size,
        evaluate_samples(&model, eval_set, size, &base.metrics)?,
    ))
}

/// Trains every row from the same seed and budget and scores it on
/// `eval_set`. A failing row is recorded and the rest still run.
pub fn cmd_ablate(
    base: &RunConfig,
    grid: &[AblationRow],
    train_set: &[Sample],
    eval_set: &[Sample],
) -> AblationReport {
    let results = grid
        .iter()
        .map(|row| match ablation_row(base, row, train_set, eval_set) {
            Ok((size, rep)) => AblationResult {
                row: row.clone(),
                size,
                outcome: Ok(rep),
            },
            Err(e) => AblationResult {
                row: row.clone(),
                size: 0,
                outcome: Err(e.to_string()),
            },
        })
        .collect();
    AblationReport { results }
}

/// Seeds of the generated training and held-out sets when no data is given.
const SYNTH_TRAIN_SEED: u64 = 11;
const SYNTH_EVAL_SEED: u64 = 12;
const SYNTH_COUNT: usize = 8;

fn cmd_ablate_args(a: &AblateArgs) -> Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    if let Some(steps) = a.steps {
        cfg.train.max_steps = steps;
    }
    let (train_set, eval_set) = match &a.input {
        Some(dir) => {
            let d = load_dataset(dir)?;
            (d.clone(), d)
        }
        None => {
            let size = cfg.train.augment.resize_to;
            (
                synthetic_dataset(SYNTH_COUNT, size, SYNTH_TRAIN_SEED)?,
                synthetic_dataset(SYNTH_COUNT, size, SYNTH_EVAL_SEED)?,
            )
        }
    };
    let grid = cfg.ablation.clone().unwrap_or_else(default_ablation_grid);
    let report = cmd_ablate(&cfg, &grid, &train_set, &eval_set);
    write_atomic(&a.output, report.to_csv().as_bytes())?;
    print!("{}", report.to_csv());
    let failures = report.failures();
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "ablation rows failed: {}",
            failures.join("; ")
        )))
    }
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let samples = synthetic_dataset(a.count, a.size, a.seed)?;
    save_dataset(&a.output, &samples)
}
