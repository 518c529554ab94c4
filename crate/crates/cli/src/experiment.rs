//! Experiment files (TOML).
//!
//! ```toml
//! out_dir = "runs/s1"              # optional
//!
//! [dataset]
//! path = "data/synth.dcld"         # or: n = 2000, seed = 7, signal = 0.9
//!
//! [bias]
//! kind = "kernel_style"            # or "awgn"
//! p_bias = 0.9
//!
//! [train]                          # shared settings, all optional
//! arch = "SmallCustom"
//! epochs = 60
//! grad_clip = 1.0                 # off when omitted
//! insertion_points = [2, 3, 4]
//! filter = { mode = { kind = "dropout", guarantee = 0.3 } }
//!
//! [[runs]]
//! training = "biased"
//! decorre = true
//! ```
//!
//! Relative paths are resolved against the directory of the experiment file.
//! Unknown keys are rejected.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use decorre_core::eval::{TrainConfig, TrainingCondition};
use decorre_core::harness::{BiasKind, BiasSpec, DEFAULT_SIGNAL_STRENGTH};
use decorre_core::{ArchName, ArchitectureSpec, DecorreConfig};
use serde::{Deserialize, Serialize};
use toml::Spanned;

use crate::{CliError, CliResult};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentFile {
    pub out_dir: Option<PathBuf>,
    pub dataset: Spanned<DatasetSection>,
    pub bias: Spanned<BiasSection>,
    pub train: Option<Spanned<TrainSection>>,
    pub runs: Spanned<Vec<Spanned<RunSection>>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub path: Option<PathBuf>,
    pub n: Option<usize>,
    pub seed: Option<u64>,
    pub signal: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BiasSection {
    pub kind: BiasKind,
    pub p_bias: f64,
    pub sigma_rel: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub arch: Option<ArchName>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub folds: Option<usize>,
    pub seed: Option<u64>,
    pub record_every: Option<usize>,
    pub checkpoint_epoch: Option<usize>,
    pub grad_clip: Option<f64>,
    pub insertion_points: Option<Vec<usize>>,
    pub filter: Option<DecorreConfig>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    /// Output subdirectory; defaults to the condition label.
    pub name: Option<String>,
    pub training: TrainingCondition,
    pub decorre: bool,
    pub insertion_points: Option<Vec<usize>>,
    pub filter: Option<DecorreConfig>,
}

/// Where the samples come from.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DatasetSource {
    File { path: PathBuf },
    Generate { n: usize, seed: u64, signal: f64 },
}

/// A validated experiment.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub out_dir: Option<PathBuf>,
    pub dataset: DatasetSource,
    pub runs: Vec<(String, TrainConfig)>,
    /// The experiment file exactly as read.
    pub source: String,
}

fn line_of(src: &str, offset: usize) -> usize {
    src[..offset.min(src.len())].matches('\n').count() + 1
}

fn at<T>(src: &str, spanned: &Spanned<T>, msg: impl std::fmt::Display) -> CliError {
    CliError::Validation(format!("line {}: {msg}", line_of(src, spanned.span().start)))
}

impl Experiment {
    pub fn load(path: &Path) -> CliResult<Self> {
        let source = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read experiment {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        Self::parse(&source, base)
    }

    pub fn parse(source: &str, base: &Path) -> CliResult<Self> {
        let file: ExperimentFile =
            toml::from_str(source).map_err(|e| CliError::Validation(format!("experiment file: {e}")))?;
        let resolve = |p: &Path| {
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        };

        let ds = file.dataset.get_ref();
        let dataset = match (&ds.path, ds.n) {
            (Some(_), Some(_)) => {
                return Err(at(
                    source,
                    &file.dataset,
                    "[dataset] takes either `path` or `n`, not both",
                ))
            }
            (Some(p), None) => {
                if ds.seed.is_some() || ds.signal.is_some() {
                    return Err(at(
                        source,
                        &file.dataset,
                        "[dataset] `seed`/`signal` only apply when generating",
                    ));
                }
                DatasetSource::File { path: resolve(p) }
            }
            (None, Some(n)) => DatasetSource::Generate {
                n,
                seed: ds.seed.unwrap_or(7),
                signal: ds.signal.unwrap_or(DEFAULT_SIGNAL_STRENGTH),
            },
            (None, None) => return Err(at(source, &file.dataset, "[dataset] needs `path` or `n`")),
        };

        let b = file.bias.get_ref();
        let bias = BiasSpec {
            kind: b.kind,
            p_bias: b.p_bias,
            sigma_rel: b.sigma_rel.unwrap_or(BiasSpec::DEFAULT_SIGMA_REL),
        };
        bias.validate().map_err(|e| at(source, &file.bias, e))?;

        let train = file.train.as_ref().map(|t| t.get_ref().clone()).unwrap_or_default();
        let train_at = |msg: String| match &file.train {
            Some(t) => at(source, t, msg),
            None => CliError::Validation(msg),
        };
        if file.runs.get_ref().is_empty() {
            return Err(at(source, &file.runs, "at least one [[runs]] entry is required"));
        }

        let mut names = BTreeSet::new();
        let mut runs = Vec::new();
        for run in file.runs.get_ref() {
            let r = run.get_ref();
            let mut arch = ArchitectureSpec::by_name(train.arch.unwrap_or(ArchName::SmallCustom));
            if let Some(points) = r.insertion_points.as_ref().or(train.insertion_points.as_ref()) {
                arch.insertion_points = points.clone();
            }
            if let Some(filter) = r.filter.or(train.filter) {
                arch.decorre_cfg = filter;
            }
            let mut cfg = TrainConfig::new(arch, bias, r.training, r.decorre);
            cfg.epochs = train.epochs.unwrap_or(cfg.epochs);
            cfg.batch_size = train.batch_size.unwrap_or(cfg.batch_size);
            cfg.lr = train.lr.unwrap_or(cfg.lr);
            cfg.folds = train.folds.unwrap_or(cfg.folds);
            cfg.seed = train.seed.unwrap_or(cfg.seed);
            cfg.record_every = train.record_every.unwrap_or(cfg.record_every);
            cfg.checkpoint_epoch = train.checkpoint_epoch;
            cfg.grad_clip = train.grad_clip;
            if let Err(e) = cfg.validate() {
                return Err(if r.insertion_points.is_some() || r.filter.is_some() {
                    at(source, run, e)
                } else {
                    train_at(e.to_string())
                });
            }
            let name = r.name.clone().unwrap_or_else(|| cfg.condition_label());
            if name.is_empty() || name.contains(['/', '\\']) || name.starts_with('.') {
                return Err(at(
                    source,
                    run,
                    format!("run name {name:?} is not a plain directory name"),
                ));
            }
            if !names.insert(name.clone()) {
                return Err(at(
                    source,
                    run,
                    format!("duplicate run name {name:?}; set `name` to tell runs apart"),
                ));
            }
            runs.push((name, cfg));
        }
        Ok(Experiment {
            out_dir: file.out_dir.as_deref().map(resolve),
            dataset,
            runs,
            source: source.to_string(),
        })
    }
}
