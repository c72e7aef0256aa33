//! `hdn` — train, apply and inspect multi-stream volumetric segmentation
//! networks. Every failure exits nonzero with a single-line JSON error
//! record on stderr; all file writes go through a temp-then-rename step.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use hyperdense::graph::{
    count_parameters, describe, ArchitectureSpec, NetworkGraph,
};
use hyperdense::io::{
    load_checkpoint, load_labels, load_modalities, load_training_subject, peek_precision,
    read_manifest, read_run_config, read_volume, save_checkpoint, synth_dataset, write_volume,
    Precision, RunConfig, Split, StoredVolume, SubjectEntry, SynthSpec, VolumePayload,
};
use hyperdense::metrics::{evaluate, MetricReport};
use hyperdense::train::{
    train, OptimizerState, SampleWarning, SubepochRecord, TrainObserver, TrainingSubject,
    ValidationRecord,
};
use hyperdense::{Scalar, analysis, infer};

#[derive(Parser)]
#[command(name = "hdn", version, about = "Volumetric multi-stream segmentation engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network from a run config and a dataset manifest.
    Train {
        /// Run configuration (JSON: arch, precision, train, sampling).
        #[arg(long)]
        config: PathBuf,
        /// Dataset manifest listing training/validation subjects.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for the log and checkpoints.
        #[arg(long)]
        out: PathBuf,
    },
    /// Tiled inference for every subject in a manifest.
    Segment {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write per-class probability volumes.
        #[arg(long)]
        emit_probs: bool,
    },
    /// Score predicted label maps against a reference manifest.
    Evaluate {
        /// Manifest whose label maps are the reference.
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Directory holding `<id>_seg.raw` predictions.
        #[arg(long)]
        pred: PathBuf,
        /// CSV report destination.
        #[arg(long)]
        out: PathBuf,
    },
    /// Print parameter counts of an architecture as JSON.
    CountParams {
        /// Preset name or path to an architecture spec JSON.
        #[arg(long)]
        arch: String,
        /// Print only the multiplicative-weight counts used for
        /// architecture comparisons.
        #[arg(long)]
        paper_comparable: bool,
    },
    /// Reduce a checkpoint to its feature-reuse heatmap.
    AnalyzeWeights {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Heatmap destination (`.json` for JSON, anything else for CSV).
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic labelled dataset.
    SynthData {
        /// Generator spec JSON ({} for all defaults).
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the wiring table of an architecture as JSON.
    Describe {
        /// Preset name or path to an architecture spec JSON.
        #[arg(long)]
        arch: String,
    },
}

fn main() {
    let matches = match Cli::command().try_get_matches() {
        Ok(m) => m,
        Err(err) => err.exit(), // --help/--version and usage errors keep clap's behaviour
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(cli) => cli,
        Err(err) => err.exit(),
    };
    if let Err(err) = init_threads().and_then(|()| run(cli.command)) {
        eprintln!("{}", serde_json::json!({ "error": format!("{err:#}") }));
        std::process::exit(1);
    }
}

/// Print one line to stdout, treating a closed pipe (e.g. `| head`) as a
/// normal end of output rather than a failure.
fn emit(line: &str) -> Result<()> {
    use std::io::ErrorKind;
    let mut stdout = std::io::stdout();
    match writeln!(stdout, "{line}") {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == ErrorKind::BrokenPipe => std::process::exit(0),
        Err(e) => Err(e).context("writing to stdout"),
    }
}

/// HDN_THREADS caps worker parallelism; unset means machine parallelism.
fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var("HDN_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .with_context(|| format!("HDN_THREADS must be a positive integer, got {raw:?}"))?;
    if n == 0 {
        bail!("HDN_THREADS must be a positive integer, got 0");
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("worker pool was already configured")?;
    Ok(())
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train { config, data, out } => cmd_train(&config, &data, &out),
        Command::Segment { checkpoint, data, out, emit_probs } => {
            match peek_precision(&checkpoint)?.as_str() {
                "f32" => cmd_segment::<f32>(&checkpoint, &data, &out, emit_probs),
                "f64" => cmd_segment::<f64>(&checkpoint, &data, &out, emit_probs),
                other => bail!("unsupported checkpoint precision {other}"),
            }
        }
        Command::Evaluate { reference, pred, out } => cmd_evaluate(&reference, &pred, &out),
        Command::CountParams { arch, paper_comparable } => cmd_count_params(&arch, paper_comparable),
        Command::AnalyzeWeights { checkpoint, out } => match peek_precision(&checkpoint)?.as_str() {
            "f32" => cmd_analyze::<f32>(&checkpoint, &out),
            "f64" => cmd_analyze::<f64>(&checkpoint, &out),
            other => bail!("unsupported checkpoint precision {other}"),
        },
        Command::SynthData { spec, out } => cmd_synth(&spec, &out),
        Command::Describe { arch } => {
            let report = describe(&resolve_arch(&arch)?)?;
            emit(&serde_json::to_string_pretty(&report)?)?;
            Ok(())
        }
    }
}

/// A preset name, or a path to an architecture spec JSON.
fn resolve_arch(arg: &str) -> Result<ArchitectureSpec> {
    let path = Path::new(arg);
    if path.is_file() {
        let text = fs::read_to_string(path).with_context(|| format!("reading {arg}"))?;
        let spec: ArchitectureSpec =
            serde_json::from_str(&text).with_context(|| format!("parsing architecture spec {arg}"))?;
        spec.validate()?;
        Ok(spec)
    } else {
        Ok(hyperdense::graph::preset(arg)?)
    }
}

/// The directory a manifest's relative paths resolve against.
fn manifest_base(manifest: &Path) -> PathBuf {
    match manifest.parent() {
        Some(p) if p.as_os_str().is_empty() => PathBuf::from("."),
        Some(p) => p.to_path_buf(),
        None => PathBuf::from("."),
    }
}

fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".to_string());
    let tmp = path.with_file_name(format!("{name}.tmp"));
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

fn cmd_count_params(arch: &str, paper_comparable: bool) -> Result<()> {
    let counts = count_parameters(&resolve_arch(arch)?)?;
    if paper_comparable {
        emit(&format!(
            "{{\"conv\":{},\"fc\":{},\"total\":{}}}",
            counts.conv_weights,
            counts.fc_weights,
            counts.weights_total()
        ))?;
    } else {
        emit(&format!(
            "{{\"conv_weights\":{},\"fc_weights\":{},\"aux\":{},\"weights_total\":{},\"full_total\":{}}}",
            counts.conv_weights,
            counts.fc_weights,
            counts.aux,
            counts.weights_total(),
            counts.full_total()
        ))?;
    }
    Ok(())
}

fn cmd_synth(spec_path: &Path, out: &Path) -> Result<()> {
    let text = fs::read_to_string(spec_path)
        .with_context(|| format!("reading {}", spec_path.display()))?;
    let spec: SynthSpec = serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", spec_path.display()))?;
    let entries = synth_dataset(&spec, out)?;
    emit(&serde_json::json!({
            "subjects": entries.len(),
            "manifest": out.join("manifest.json").display().to_string(),
        }).to_string())?;
    Ok(())
}

fn cmd_analyze<T: Scalar>(checkpoint: &Path, out: &Path) -> Result<()> {
    let ck = load_checkpoint::<T>(checkpoint)?;
    let matrix = analysis::reuse_matrix(&ck.net);
    analysis::export_heatmap(&matrix, out)?;
    emit(&serde_json::json!({
            "sources": matrix.sources.len(),
            "targets": matrix.targets.len(),
            "out": out.display().to_string(),
        }).to_string())?;
    Ok(())
}

fn cmd_segment<T: Scalar>(checkpoint: &Path, data: &Path, out: &Path, emit_probs: bool) -> Result<()> {
    let ck = load_checkpoint::<T>(checkpoint)?;
    let entries = read_manifest(data)?;
    let base = manifest_base(data);
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for entry in &entries {
        let (modalities, spacing) = load_modalities::<T>(entry, &base)?;
        let result = infer::segment_volume(&ck.net, &modalities)?;
        let mut labels = result.labels;
        labels.spacing_mm = spacing;
        write_volume(&out.join(format!("{}_seg.raw", entry.id)), &StoredVolume::from_labels(&labels))?;
        if emit_probs {
            let p = &result.probabilities;
            let stored = StoredVolume {
                dims: p.dims,
                spacing_mm: spacing,
                channels: p.classes,
                payload: VolumePayload::F32(p.data.iter().map(|v| v.as_f64() as f32).collect()),
            };
            write_volume(&out.join(format!("{}_probs.raw", entry.id)), &stored)?;
        }
        emit(&serde_json::json!({
                "subject": entry.id,
                "dims": labels.dims,
                "tiles": result.plan.tile_origins.len(),
            }).to_string())?;
    }
    Ok(())
}

fn cmd_evaluate(reference: &Path, pred: &Path, out: &Path) -> Result<()> {
    let entries = read_manifest(reference)?;
    let base = manifest_base(reference);
    let mut lines = vec![MetricReport::CSV_HEADER.to_string()];
    for entry in &entries {
        let truth = load_labels(&entry, &base)?;
        let pred_path = pred.join(format!("{}_seg.raw", entry.id));
        let predicted = read_volume(&pred_path)?.to_labels()?;
        let classes = truth.num_classes(2).max(predicted.num_classes(2));
        let report = evaluate(&entry.id, &truth, &predicted, classes, false)?;
        lines.extend(report.csv_rows());
    }
    let mut text = lines.join("\n");
    text.push('\n');
    atomic_write(out, text.as_bytes())?;
    emit(&serde_json::json!({ "subjects": entries.len(), "out": out.display().to_string() }).to_string())?;
    Ok(())
}

fn cmd_train(config_path: &Path, data_path: &Path, out: &Path) -> Result<()> {
    let run_config = read_run_config(config_path)?;
    let arch = run_config.validate()?;
    let entries = read_manifest(data_path)?;
    let base = manifest_base(data_path);
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    // echo the resolved configuration (with its seed) next to the log
    atomic_write(
        &out.join("run_config.json"),
        format!("{}\n", serde_json::to_string_pretty(&run_config)?).as_bytes(),
    )?;
    match run_config.precision {
        Precision::F32 => train_run::<f32>(&run_config, &arch, &entries, &base, out),
        Precision::F64 => train_run::<f64>(&run_config, &arch, &entries, &base, out),
    }
}

fn train_run<T: Scalar>(
    run_config: &RunConfig,
    arch: &ArchitectureSpec,
    entries: &[SubjectEntry],
    base: &Path,
    out: &Path,
) -> Result<()> {
    let mut subjects: Vec<TrainingSubject<T>> = Vec::new();
    let mut validation: Vec<TrainingSubject<T>> = Vec::new();
    for entry in entries {
        match entry.split {
            Split::Train => subjects.push(load_training_subject(entry, base)?),
            Split::Val => validation.push(load_training_subject(entry, base)?),
            Split::Test => {}
        }
    }

    let mut net = NetworkGraph::<T>::build(arch, run_config.train.seed)?;
    let mut state = OptimizerState::zeros(&net);
    let log_path = out.join("train_log.jsonl");
    let log = fs::File::create(&log_path)
        .with_context(|| format!("creating {}", log_path.display()))?;
    let mut observer = RunObserver {
        log,
        log_path: log_path.clone(),
        out: out.to_path_buf(),
        seed: run_config.train.seed,
        deferred: None,
    };

    let outcome = train(
        &mut net,
        &mut state,
        &subjects,
        &validation,
        &run_config.train,
        run_config.sampling,
        &mut observer,
    )?;
    if let Some(err) = observer.deferred.take() {
        return Err(err.into());
    }
    save_checkpoint(&out.join("checkpoint-final.hdnc"), &net, &state, run_config.train.seed)?;
    emit(&serde_json::json!({
            "epochs": run_config.train.epochs,
            "subepochs": outcome.records.len(),
            "validations": outcome.validations.len(),
            "warnings": outcome.warnings.len(),
            "log": log_path.display().to_string(),
        }).to_string())?;
    Ok(())
}

/// Streams every record to the log as one JSON line and checkpoints at each
/// epoch boundary. Log-write failures are deferred to the next fallible
/// hook, which aborts the run.
struct RunObserver {
    log: fs::File,
    log_path: PathBuf,
    out: PathBuf,
    seed: u64,
    deferred: Option<hyperdense::Error>,
}

impl RunObserver {
    fn record<S: serde::Serialize>(&mut self, record: &S) {
        if self.deferred.is_some() {
            return;
        }
        let line = serde_json::to_string(record).expect("log records are always serializable");
        if let Err(source) = writeln!(self.log, "{line}") {
            self.deferred = Some(hyperdense::Error::Io {
                path: self.log_path.display().to_string(),
                source,
            });
        }
    }
}

impl<T: Scalar> TrainObserver<T> for RunObserver {
    fn on_subepoch(&mut self, record: &SubepochRecord) {
        self.record(record);
    }

    fn on_validation(&mut self, record: &ValidationRecord) {
        self.record(record);
    }

    fn on_warning(&mut self, warning: &SampleWarning) {
        self.record(warning);
    }

    fn on_epoch_end(
        &mut self,
        epoch: usize,
        net: &NetworkGraph<T>,
        state: &OptimizerState<T>,
    ) -> hyperdense::Result<()> {
        if let Some(err) = self.deferred.take() {
            return Err(err);
        }
        save_checkpoint(&self.out.join(format!("checkpoint-{epoch:03}.hdnc")), net, state, self.seed)
    }
}
