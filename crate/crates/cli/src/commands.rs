//! The four subcommands as library functions.

use std::path::{Path, PathBuf};

use decorre_core::eval::{
    histogram_of_correlations, hoc_to_csv, records_to_csv, summarize, train_run_with_snapshots, EvalReport, HocData,
    HocInput,
};
use decorre_core::harness::{read_dataset, write_dataset, write_manifest, Dataset, GeneratorConfig, Sample};

use crate::experiment::{DatasetSource, Experiment};
use crate::output::{io_err, read_records_csv, run_dirs, write_atomic};
use crate::{CliError, CliResult, OUT_DIR_ENV};

/// Batch sizes below this give noisy correlation estimates.
const MIN_RECOMMENDED_BATCH: usize = 8;

#[derive(Debug, Clone)]
pub struct GenerateArgs {
    pub n: usize,
    pub seed: u64,
    pub signal: f64,
    pub out: PathBuf,
}

#[derive(Debug, Clone)]
pub struct GenerateOutput {
    pub dataset: PathBuf,
    pub manifest: PathBuf,
}

/// Manifest path for a dataset file: `data/x.dcld` -> `data/x.manifest.csv`.
pub fn manifest_path(dataset: &Path) -> PathBuf {
    dataset.with_extension("manifest.csv")
}

pub fn cmd_generate(args: &GenerateArgs) -> CliResult<GenerateOutput> {
    if args.n < 5 {
        return Err(CliError::Validation(format!(
            "--n must be at least 5 (one per fold), got {}",
            args.n
        )));
    }
    if !(args.signal >= 0.0) || !args.signal.is_finite() {
        return Err(CliError::Validation(format!(
            "--signal must be finite and >= 0, got {}",
            args.signal
        )));
    }
    let ds = Dataset::generate(args.n, args.seed, args.signal, GeneratorConfig::default());
    let mut bytes = Vec::new();
    write_dataset(&ds, &mut bytes)?;
    let mut manifest = Vec::new();
    write_manifest(&ds, &mut manifest)?;
    let manifest_file = manifest_path(&args.out);
    write_atomic(&args.out, &bytes)?;
    write_atomic(&manifest_file, &manifest)?;
    Ok(GenerateOutput {
        dataset: args.out.clone(),
        manifest: manifest_file,
    })
}

#[derive(Debug, Clone)]
pub struct TrainArgs {
    pub experiment: PathBuf,
    /// Takes precedence over the experiment file and `DECORRE_OUT_DIR`.
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub out_dir: PathBuf,
    /// Run name and report, in experiment order.
    pub reports: Vec<(String, EvalReport)>,
}

fn load_samples(source: &DatasetSource) -> CliResult<Vec<Sample>> {
    match source {
        DatasetSource::Generate { n, seed, signal } => {
            Ok(Dataset::generate(*n, *seed, *signal, GeneratorConfig::default()).samples)
        }
        DatasetSource::File { path } => {
            let file = std::fs::File::open(path)
                .map_err(|e| CliError::Validation(format!("dataset {}: {e}", path.display())))?;
            Ok(read_dataset(std::io::BufReader::new(file))?.samples)
        }
    }
}

pub fn cmd_train(args: &TrainArgs) -> CliResult<TrainOutput> {
    let exp = Experiment::load(&args.experiment)?;
    let out_dir = args
        .out
        .clone()
        .or_else(|| exp.out_dir.clone())
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"));
    let samples = load_samples(&exp.dataset)?;
    for (name, cfg) in &exp.runs {
        if cfg.decorre_enabled && cfg.batch_size < MIN_RECOMMENDED_BATCH {
            eprintln!(
                "warning: run {name}: batch_size {} gives noisy correlation estimates (recommended >= {MIN_RECOMMENDED_BATCH})",
                cfg.batch_size
            );
        }
    }

    write_atomic(&out_dir.join("experiment.toml"), exp.source.as_bytes())?;
    let dataset_info = serde_json::json!({ "dataset": exp.dataset, "samples": samples.len() });
    write_atomic(&out_dir.join("dataset.json"), pretty(&dataset_info)?.as_bytes())?;

    let mut reports = Vec::new();
    for (name, cfg) in &exp.runs {
        eprintln!("training {name} ({} folds x {} epochs)", cfg.folds, cfg.epochs);
        let (mut report, snapshots) = train_run_with_snapshots(cfg, &samples)?;
        report.condition = name.clone();
        let run_dir = out_dir.join(name);
        write_atomic(&run_dir.join("report.csv"), report.to_csv().as_bytes())?;
        write_atomic(&run_dir.join("summary.json"), pretty(&report)?.as_bytes())?;
        write_atomic(&run_dir.join("records.csv"), records_to_csv(&report.records).as_bytes())?;
        for s in &snapshots {
            let path = run_dir
                .join("checkpoints")
                .join(format!("fold{}_epoch{}.dclw", s.fold, s.epoch));
            write_atomic(&path, &s.bytes)?;
        }
        for f in report.folds.iter().filter(|f| f.diverged_epoch.is_some()) {
            eprintln!(
                "warning: run {name}: fold {} diverged at epoch {}",
                f.fold,
                f.diverged_epoch.unwrap_or(0)
            );
        }
        reports.push((name.clone(), report));
    }
    let all: Vec<EvalReport> = reports.iter().map(|(_, r)| r.clone()).collect();
    write_atomic(&out_dir.join("summary.csv"), summarize(&all).to_csv().as_bytes())?;
    Ok(TrainOutput { out_dir, reports })
}

fn pretty<T: serde::Serialize>(value: &T) -> CliResult<String> {
    serde_json::to_string_pretty(value)
        .map(|s| s + "\n")
        .map_err(|e| CliError::Runtime(e.to_string()))
}

#[derive(Debug, Clone)]
pub struct HocArgs {
    pub records: PathBuf,
    pub bins: usize,
    /// Snapshot epoch for every run; `None` selects each run's checkpoint.
    pub epoch: Option<usize>,
    pub all_epochs: bool,
    pub out: PathBuf,
}

fn read_report(dir: &Path) -> CliResult<Option<EvalReport>> {
    let path = dir.join("summary.json");
    if !path.is_file() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    serde_json::from_str(&text)
        .map(Some)
        .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

fn run_name(dir: &Path) -> String {
    dir.file_name()
        .map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned())
}

pub fn cmd_hoc(args: &HocArgs) -> CliResult<Vec<HocData>> {
    let dirs = run_dirs(&args.records, "records.csv")?;
    if dirs.is_empty() {
        return Err(CliError::Validation(format!(
            "no records.csv found under {}",
            args.records.display()
        )));
    }
    let mut conditions: Vec<HocInput> = Vec::new();
    for dir in &dirs {
        let report = read_report(dir)?;
        let epoch = match (args.all_epochs, args.epoch) {
            (true, _) => None,
            (false, Some(e)) => Some(e),
            (false, None) => report.as_ref().map(|r| r.checkpoint_epoch),
        };
        let records: Vec<_> = read_records_csv(&dir.join("records.csv"))?
            .into_iter()
            .filter(|r| epoch.is_none_or(|e| r.epoch == e))
            .collect();
        let name = report.map_or_else(|| run_name(dir), |r| r.condition);
        conditions.push((name, records));
    }
    let data = histogram_of_correlations(&conditions, args.bins, None)?;
    write_atomic(&args.out, hoc_to_csv(&data).as_bytes())?;
    Ok(data)
}

#[derive(Debug, Clone)]
pub struct ReportArgs {
    pub runs: PathBuf,
    pub out: Option<PathBuf>,
}

/// Returns the summary CSV; also writes it when `out` is set.
pub fn cmd_report(args: &ReportArgs) -> CliResult<String> {
    let mut reports = Vec::new();
    for dir in run_dirs(&args.runs, "summary.json")? {
        reports.extend(read_report(&dir)?);
    }
    if reports.is_empty() {
        return Err(CliError::Validation(format!(
            "no summary.json found under {}",
            args.runs.display()
        )));
    }
    let csv = summarize(&reports).to_csv();
    if let Some(out) = &args.out {
        write_atomic(out, csv.as_bytes())?;
    }
    Ok(csv)
}
