//! The `hctmg` command line. Each subcommand is also a plain function so
//! tests and examples can drive runs without spawning a process.
//!
//! Output layout under `--out`:
//!
//! ```text
//! config.json        exact run configuration, including seed and data path
//! checkpoint.bin     trained parameters and gate state
//! train_log.csv      one row per epoch
//! gate_history.csv   one row per batch while the gate is learning
//! heatmaps/          probe matrices (<stem>.csv, <stem>.json, optional .pgm)
//! ```

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::config::{read_json, write_json, RunConfig};
use crate::data::{generate_synthetic, read_dataset, write_dataset, Dataset, SyntheticSpec};
use crate::domain::Modality;
use crate::error::{Error, Result};
use crate::model::{load_checkpoint, save_checkpoint, Architecture, HctConfig, Model, ParamReport};
use crate::probe::{export_heatmaps, run_probe, AxisLabels, Experiment, HeadSelect, ProbeSpec};
use crate::train::{evaluate, median_baseline_mae, predict, write_train_log, EvalReport, Trainer, ZeroLabels};

pub const CONFIG_FILE: &str = "config.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const GATE_HISTORY_FILE: &str = "gate_history.csv";
pub const HEATMAP_DIR: &str = "heatmaps";
pub const PROBE_FILE: &str = "probe.json";

#[derive(Debug, Parser)]
#[command(name = "hctmg", version, about = "Hierarchical crossmodal fusion with modality gating")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a planted-primary synthetic dataset.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write checkpoint and logs.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Disable gating and fix the primary modality (T, A or V).
        #[arg(long)]
        pin_primary: Option<Modality>,
    },
    /// Evaluate a checkpoint; prints the report as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::All)]
        split: SplitArg,
        /// Train and validation fractions used to carve out `--split`.
        #[arg(long, num_args = 2, value_delimiter = ',', default_values_t = [0.7, 0.15])]
        fractions: Vec<f64>,
        #[arg(long, value_enum, default_value_t = ZeroArg::Exclude)]
        zero_labels: ZeroArg,
    },
    /// Export crossmodal attention heatmaps.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// exp1, exp2, exp3 or incongruity.
        #[arg(long)]
        exp: Experiment,
        /// Sample indices: `0,3,7` or ranges such as `10-14`.
        #[arg(long)]
        samples: String,
        #[arg(long)]
        out: PathBuf,
        /// Flat-fusion checkpoint, needed by `incongruity`.
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// JSON map of modality to per-sample token labels.
        #[arg(long)]
        tokens: Option<PathBuf>,
        /// Layer index (default: last).
        #[arg(long)]
        layer: Option<usize>,
        /// Head index (default: mean over heads).
        #[arg(long)]
        head: Option<usize>,
        /// Also write grayscale PGM images.
        #[arg(long)]
        pgm: bool,
    },
    /// Itemized parameter counts.
    CountParams {
        /// Run configuration file.
        #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
        config: Option<PathBuf>,
        /// mosi, mosei or iemocap.
        #[arg(long)]
        preset: Option<String>,
        /// Also count the flat-fusion baseline and print the ratio.
        #[arg(long)]
        baseline: bool,
        #[arg(long)]
        json: bool,
    },
    /// Print a preset run configuration as JSON.
    Preset { name: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    All,
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ZeroArg {
    Exclude,
    NonNegative,
}

impl From<ZeroArg> for ZeroLabels {
    fn from(z: ZeroArg) -> Self {
        match z {
            ZeroArg::Exclude => ZeroLabels::Exclude,
            ZeroArg::NonNegative => ZeroLabels::NonNegative,
        }
    }
}

/// Process exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Dimension { .. } | Error::Contract(_) => 2,
        Error::Numeric(_) | Error::NonFinite { .. } | Error::DegenerateRow { .. } => 3,
        Error::Io { .. } | Error::Format { .. } | Error::Json(_) | Error::Data(_) => 4,
    }
}

/// Parse `args`, run, and return the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { spec, out } => {
            let spec: SyntheticSpec = read_json(&spec)?;
            gen_data(&spec, &out)
        }
        Command::Train { config, data, out, pin_primary } => {
            let config = RunConfig::load(&config)?;
            let summary = train_run(&config, &data, &out, pin_primary)?;
            for w in &summary.warnings {
                eprintln!("warning: {w}");
            }
            print_json(&summary)
        }
        Command::Eval { checkpoint, data, split, fractions, zero_labels } => {
            let report = eval_run(&checkpoint, &data, split, [fractions[0], fractions[1]], zero_labels.into())?;
            print_json(&report)
        }
        Command::Probe { checkpoint, data, exp, samples, out, baseline, tokens, layer, head, pgm } => {
            let mut spec = ProbeSpec::new(exp, parse_samples(&samples)?);
            spec.layer = layer;
            spec.head = head.map_or(HeadSelect::Average, HeadSelect::Head);
            spec.labels = tokens.as_deref().map(read_json::<AxisLabels>).transpose()?;
            let files = probe_run(&checkpoint, baseline.as_deref(), &data, &spec, &out, pgm)?;
            for f in files {
                println!("{}", f.display());
            }
            Ok(())
        }
        Command::CountParams { config, preset, baseline, json } => {
            let model = match (config, preset) {
                (Some(path), _) => RunConfig::load(&path)?.model,
                (None, Some(name)) => RunConfig::preset(&name)?.model,
                (None, None) => return Err(Error::Config("--config or --preset is required".into())),
            };
            let counts = count_params(&model, baseline)?;
            if json {
                print_json(&counts)
            } else {
                println!("{counts}");
                Ok(())
            }
        }
        Command::Preset { name } => print_json(&RunConfig::preset(&name)?),
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

/// `"0,3,10-12"` → `[0, 3, 10, 11, 12]`.
pub fn parse_samples(s: &str) -> Result<Vec<usize>> {
    let bad = || Error::Config(format!("cannot parse sample list {s:?}"));
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (usize, usize) = (a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?);
                if a > b {
                    return Err(bad());
                }
                out.extend(a..=b);
            }
            None => out.push(part.parse().map_err(|_| bad())?),
        }
    }
    if out.is_empty() {
        return Err(bad());
    }
    Ok(out)
}

pub fn gen_data(spec: &SyntheticSpec, out: &Path) -> Result<()> {
    let synth = generate_synthetic(spec)?;
    write_dataset(&synth.dataset, out)?;
    synth.planted.write(out)
}

/// What `train` reports on stdout.
#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub epochs: usize,
    pub final_train_loss: f64,
    pub gate_weights: Option<[f64; 3]>,
    pub primary: Option<Modality>,
    pub frozen_at_epoch: Option<usize>,
    pub test: Option<EvalReport>,
    /// Constant-median predictor on the test split (regression only).
    pub test_median_mae: Option<f64>,
    pub warnings: Vec<String>,
}

/// Train on the configured split of `data` and write the run directory.
pub fn train_run(config: &RunConfig, data: &Path, out: &Path, pin: Option<Modality>) -> Result<TrainSummary> {
    config.validate()?;
    let dataset = read_dataset(data)?;
    let (train, val, test) = config.split.apply(&dataset);
    if train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let model = Model::new(&config.model, config.train.seed)?;
    let mut trainer = match (pin, &model) {
        (Some(_), Model::Flat(_)) => {
            return Err(Error::Config("--pin-primary needs the hierarchical architecture".into()))
        }
        (Some(p), _) => Trainer::pinned(model, p, config.train.clone())?,
        (None, _) => Trainer::new(model, None, config.train.clone())?,
    };
    trainer.fit(&train, (!val.is_empty()).then_some(&val))?;

    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut record = config.clone();
    record.data = Some(data.to_path_buf());
    record.pin_primary = pin;
    write_json(&out.join(CONFIG_FILE), &record)?;
    save_checkpoint(&out.join(CHECKPOINT_FILE), &trainer.model, config.train.seed, trainer.gate.as_ref())?;
    write_with(&out.join(TRAIN_LOG_FILE), |w| write_train_log(&trainer.logs, dataset.task(), w))?;
    write_with(&out.join(GATE_HISTORY_FILE), |w| match &trainer.gate {
        Some(g) => g.write_history_csv(w),
        None => writeln!(w, "epoch,batch,w_T,w_A,w_V,primary"),
    })?;

    let (test_report, test_median_mae) = if test.is_empty() {
        (None, None)
    } else {
        let report = trainer.evaluate(&test)?;
        let median = (dataset.task() == crate::Task::Regression)
            .then(|| median_baseline_mae(&labels_f64(&train), &labels_f64(&test)));
        (Some(report), median)
    };
    let last = trainer.logs.last();
    Ok(TrainSummary {
        epochs: trainer.epochs_done(),
        final_train_loss: last.map_or(f64::NAN, |l| l.train_loss),
        gate_weights: trainer.model.gate_weights(),
        primary: trainer.roles().map(|r| r.primary),
        frozen_at_epoch: trainer.gate.as_ref().and_then(|g| g.frozen_at_epoch),
        test: test_report,
        test_median_mae,
        warnings: trainer.warnings.clone(),
    })
}

fn write_with(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    f(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

fn labels_f64(ds: &Dataset) -> Vec<f64> {
    ds.labels.iter().map(|&x| x as f64).collect()
}

pub fn eval_run(
    checkpoint: &Path,
    data: &Path,
    split: SplitArg,
    fractions: [f64; 2],
    zero: ZeroLabels,
) -> Result<EvalReport> {
    let ckpt = load_checkpoint(checkpoint)?;
    let dataset = read_dataset(data)?;
    let part = match split {
        SplitArg::All => dataset,
        _ => {
            let split_cfg = crate::config::SplitConfig { train: fractions[0], val: fractions[1] };
            split_cfg.validate()?;
            let (tr, va, te) = split_cfg.apply(&dataset);
            match split {
                SplitArg::Train => tr,
                SplitArg::Val => va,
                _ => te,
            }
        }
    };
    if part.is_empty() {
        return Err(Error::Config("selected split is empty".into()));
    }
    if part.task() != ckpt.model.config().task {
        return Err(Error::Config(format!(
            "dataset task {:?} does not match checkpoint task {:?}",
            part.task(),
            ckpt.model.config().task
        )));
    }
    let preds = predict(&ckpt.model, ckpt.gate.as_ref(), &part, 64)?;
    evaluate(&preds, &labels_f64(&part), part.task(), zero)
}

pub fn probe_run(
    checkpoint: &Path,
    baseline: Option<&Path>,
    data: &Path,
    spec: &ProbeSpec,
    out: &Path,
    pgm: bool,
) -> Result<Vec<PathBuf>> {
    if spec.experiment == Experiment::Incongruity && baseline.is_none() {
        return Err(Error::Config("incongruity needs --baseline with a flat-fusion checkpoint".into()));
    }
    let ckpt = load_checkpoint(checkpoint)?;
    let base = baseline.map(load_checkpoint).transpose()?;
    let dataset = read_dataset(data)?;
    let heatmaps = run_probe(&ckpt.model, ckpt.gate.as_ref(), base.as_ref().map(|b| &b.model), &dataset, spec)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let record = serde_json::json!({
        "command": "probe",
        "checkpoint": checkpoint,
        "baseline": baseline,
        "data": data,
        "experiment": spec.experiment,
        "samples": spec.samples,
        "layer": spec.layer,
        "head": spec.head,
        "seed": ckpt.seed,
    });
    write_json(&out.join(PROBE_FILE), &record)?;
    export_heatmaps(&heatmaps, &out.join(HEATMAP_DIR), pgm)
}

#[derive(Debug, Clone, Serialize)]
pub struct ParamCounts {
    pub hct: ParamReport,
    pub flat: Option<ParamReport>,
    /// Hierarchical total over flat total.
    pub ratio: Option<f64>,
}

impl std::fmt::Display for ParamCounts {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "hierarchical (HCT-MG)")?;
        write!(f, "{}", self.hct)?;
        if let (Some(flat), Some(ratio)) = (&self.flat, self.ratio) {
            writeln!(f, "\n\nflat fusion baseline")?;
            writeln!(f, "{flat}")?;
            write!(f, "\nratio {ratio:.4}")?;
        }
        Ok(())
    }
}

/// Counts for `config` built as the hierarchical model, and optionally as
/// the flat baseline with identical settings.
pub fn count_params(config: &HctConfig, baseline: bool) -> Result<ParamCounts> {
    let with_arch = |arch| HctConfig { architecture: arch, ..config.clone() };
    let hct = Model::new(&with_arch(Architecture::Hct), 0)?.report();
    let flat = baseline
        .then(|| Model::new(&with_arch(Architecture::FlatFusion), 0).map(|m| m.report()))
        .transpose()?;
    let ratio = flat.as_ref().map(|fl| hct.total as f64 / fl.total as f64);
    Ok(ParamCounts { hct, flat, ratio })
}
