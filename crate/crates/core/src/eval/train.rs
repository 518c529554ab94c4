use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{kfold_split, roc_auc};
use crate::checkpoint::write_checkpoint;
use crate::decorre::CorrelationRecord;
use crate::error::{Error, Result};
use crate::harness::{adversarial_testset, augment, biased_sample, full_testset, BiasSpec, Pair, Sample};
use crate::model::{build_model, ArchitectureSpec, DualBatch, Model};
use crate::ops::{bce_with_logits, clip_grad_norm, sgd_step};
use crate::rng::Rng;
use crate::tensor::Tensor;

const EVAL_CHUNK: usize = 128;

/// Whether the training split carries the label-correlated manipulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingCondition {
    Biased,
    /// Same manipulation kind at p = 0.5.
    Unbiased,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub arch: ArchitectureSpec,
    /// Manipulation protocol; also defines the adversarial and manipulated
    /// test sets for unbiased trainings.
    pub bias: BiasSpec,
    pub training: TrainingCondition,
    pub decorre_enabled: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub folds: usize,
    pub seed: u64,
    /// Epochs between correlation snapshots; 0 keeps only the checkpoint epoch.
    pub record_every: usize,
    /// Epoch whose test AUCs are reported; defaults to `epochs / 2`.
    pub checkpoint_epoch: Option<usize>,
    /// Upper bound on the joint gradient norm of each step; off when `None`.
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

impl TrainConfig {
    /// Desk-scale defaults: 60 epochs, batch 32, learning rate 0.05, 5 folds.
    pub fn new(arch: ArchitectureSpec, bias: BiasSpec, training: TrainingCondition, decorre_enabled: bool) -> Self {
        Self {
            arch,
            bias,
            training,
            decorre_enabled,
            epochs: 60,
            batch_size: 32,
            lr: 0.05,
            folds: 5,
            seed: 0,
            record_every: 15,
            checkpoint_epoch: None,
            grad_clip: None,
        }
    }

    pub fn checkpoint(&self) -> usize {
        self.checkpoint_epoch.unwrap_or((self.epochs / 2).max(1))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        self.arch.validate()?;
        self.bias.validate()?;
        if self.folds < 2 {
            return bad(format!("folds must be at least 2, got {}", self.folds));
        }
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.batch_size == 0 || (self.decorre_enabled && self.batch_size < 2) {
            return bad(format!(
                "batch_size {} too small (DecorreLayer correlates over the batch and needs >= 2)",
                self.batch_size
            ));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) || !c.is_finite() {
                return bad(format!("grad_clip must be positive, got {c}"));
            }
        }
        if self.checkpoint() == 0 || self.checkpoint() > self.epochs {
            return bad(format!(
                "checkpoint epoch {} outside 1..={}",
                self.checkpoint(),
                self.epochs
            ));
        }
        if self.decorre_enabled && self.arch.insertion_points.is_empty() {
            return bad("decorre_enabled requires at least one insertion point".into());
        }
        Ok(())
    }

    /// `biased`, `unbiased`, `biased+decorre` or `unbiased+decorre`.
    pub fn condition_label(&self) -> String {
        let base = match self.training {
            TrainingCondition::Biased => "biased",
            TrainingCondition::Unbiased => "unbiased",
        };
        if self.decorre_enabled {
            format!("{base}+decorre")
        } else {
            base.to_string()
        }
    }

    fn training_bias(&self) -> BiasSpec {
        match self.training {
            TrainingCondition::Biased => self.bias,
            TrainingCondition::Unbiased => self.bias.unbiased(),
        }
    }

    fn is_record_epoch(&self, epoch: usize) -> bool {
        epoch == self.checkpoint() || (self.record_every > 0 && epoch.is_multiple_of(self.record_every))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestSet {
    /// Unbiased assignment of the manipulation.
    Full,
    /// Every sample shows the manipulation opposite to training.
    Adversarial,
    /// Same bias as the training data.
    Manipulated,
}

impl TestSet {
    pub const ALL: [TestSet; 3] = [TestSet::Full, TestSet::Adversarial, TestSet::Manipulated];

    pub fn as_str(self) -> &'static str {
        match self {
            TestSet::Full => "full",
            TestSet::Adversarial => "adversarial",
            TestSet::Manipulated => "manipulated",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.as_str() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestAucs {
    pub full: f64,
    pub adversarial: f64,
    pub manipulated: f64,
}

impl TestAucs {
    pub fn get(&self, set: TestSet) -> f64 {
        match set {
            TestSet::Full => self.full,
            TestSet::Adversarial => self.adversarial,
            TestSet::Manipulated => self.manipulated,
        }
    }

    fn mean_of(items: &[TestAucs]) -> Option<TestAucs> {
        if items.is_empty() {
            return None;
        }
        let n = items.len() as f64;
        let avg = |f: fn(&TestAucs) -> f64| items.iter().map(f).sum::<f64>() / n;
        Some(TestAucs {
            full: avg(|a| a.full),
            adversarial: avg(|a| a.adversarial),
            manipulated: avg(|a| a.manipulated),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    /// AUCs at the checkpoint epoch; `None` if the fold diverged before it.
    pub checkpoint: Option<TestAucs>,
    /// AUCs after the last epoch; `None` if the fold diverged.
    pub last: Option<TestAucs>,
    /// First epoch with a non-finite training loss.
    pub diverged_epoch: Option<usize>,
    /// Mean training loss per epoch.
    pub loss_curve: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldRecord {
    pub fold: usize,
    pub record: CorrelationRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub condition: String,
    pub config: TrainConfig,
    pub checkpoint_epoch: usize,
    pub folds: Vec<FoldResult>,
    /// Mean checkpoint AUCs over the folds that did not diverge.
    pub mean: Option<TestAucs>,
    pub last_mean: Option<TestAucs>,
    /// Correlation snapshots; written to their own file, not the JSON summary.
    #[serde(skip)]
    pub records: Vec<FoldRecord>,
}

impl EvalReport {
    /// `fold,test_set,auc_checkpoint,auc_last,diverged_epoch`; empty cells
    /// for unavailable values.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("fold,test_set,auc_checkpoint,auc_last,diverged_epoch\n");
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for f in &self.folds {
            for set in TestSet::ALL {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{}",
                    f.fold,
                    set.as_str(),
                    cell(f.checkpoint.map(|a| a.get(set))),
                    cell(f.last.map(|a| a.get(set))),
                    f.diverged_epoch.map(|e| e.to_string()).unwrap_or_default()
                );
            }
        }
        out
    }

    /// Mean correlation over every recorded feature at `epoch`, pooled over
    /// folds and layers.
    pub fn mean_correlation(&self, epoch: usize) -> Option<f64> {
        let values: Vec<f64> = self
            .records
            .iter()
            .filter(|r| r.record.epoch == epoch)
            .flat_map(|r| r.record.correlations.iter().copied())
            .collect();
        (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
    }

    pub fn checkpoint_records(&self) -> Vec<CorrelationRecord> {
        self.records
            .iter()
            .filter(|r| r.record.epoch == self.checkpoint_epoch)
            .map(|r| r.record.clone())
            .collect()
    }
}

/// `fold,layer_id,epoch,feature,correlation`, one row per recorded value.
pub fn records_to_csv(records: &[FoldRecord]) -> String {
    let mut out = String::from("fold,layer_id,epoch,feature,correlation\n");
    for r in records {
        for (i, c) in r.record.correlations.iter().enumerate() {
            let _ = writeln!(out, "{},{},{},{},{}", r.fold, r.record.layer_id, r.record.epoch, i, c);
        }
    }
    out
}

/// Encoded weights of one fold's model after `epoch`, in the
/// [`crate::checkpoint`] format.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub fold: usize,
    pub epoch: usize,
    pub bytes: Vec<u8>,
}

/// K-fold cross-validated training and evaluation. Fold `f` uses the random
/// streams `Rng::new(seed).derive(f)`, so folds are independent of each other
/// and of execution order.
pub fn train_run(cfg: &TrainConfig, samples: &[Sample]) -> Result<EvalReport> {
    train_run_with_snapshots(cfg, samples).map(|(report, _)| report)
}

/// [`train_run`] that also returns weight snapshots at the checkpoint and the
/// last epoch of every fold. Folds run on up to
/// [`std::thread::available_parallelism`] worker threads; the result does not
/// depend on the thread count.
pub fn train_run_with_snapshots(cfg: &TrainConfig, samples: &[Sample]) -> Result<(EvalReport, Vec<Snapshot>)> {
    cfg.validate()?;
    let folds = kfold_split(samples.len(), cfg.folds, cfg.seed)?;
    let workers = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(folds.len());
    let mut outputs: Vec<Option<Result<FoldOutput>>> = (0..folds.len()).map(|_| None).collect();
    if workers <= 1 {
        for (fold, test_idx) in folds.iter().enumerate() {
            outputs[fold] = Some(run_fold(cfg, samples, fold, test_idx));
        }
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let done = std::sync::Mutex::new(&mut outputs);
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let fold = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                    if fold >= folds.len() {
                        break;
                    }
                    let out = run_fold(cfg, samples, fold, &folds[fold]);
                    done.lock().expect("fold results lock")[fold] = Some(out);
                });
            }
        });
    }
    let mut results = Vec::with_capacity(cfg.folds);
    let mut records = Vec::new();
    let mut snapshots = Vec::new();
    for (fold, out) in outputs.into_iter().enumerate() {
        let out = out.expect("every fold ran")?;
        results.push(out.result);
        records.extend(out.records.into_iter().map(|record| FoldRecord { fold, record }));
        snapshots.extend(out.snapshots);
    }
    let ok_checkpoint: Vec<TestAucs> = results.iter().filter_map(|r| r.checkpoint).collect();
    let ok_last: Vec<TestAucs> = results.iter().filter_map(|r| r.last).collect();
    let report = EvalReport {
        condition: cfg.condition_label(),
        config: cfg.clone(),
        checkpoint_epoch: cfg.checkpoint(),
        folds: results,
        mean: TestAucs::mean_of(&ok_checkpoint),
        last_mean: TestAucs::mean_of(&ok_last),
        records,
    };
    Ok((report, snapshots))
}

struct FoldOutput {
    result: FoldResult,
    records: Vec<CorrelationRecord>,
    snapshots: Vec<Snapshot>,
}

fn snapshot(model: &Model, fold: usize, epoch: usize) -> Result<Snapshot> {
    let mut bytes = Vec::new();
    write_checkpoint(model, &mut bytes)?;
    Ok(Snapshot { fold, epoch, bytes })
}

fn run_fold(cfg: &TrainConfig, samples: &[Sample], fold: usize, test_idx: &[usize]) -> Result<FoldOutput> {
    let fold_rng = Rng::new(cfg.seed).derive(fold as u64);
    let mut is_test = vec![false; samples.len()];
    test_idx.iter().for_each(|&i| is_test[i] = true);
    let train: Vec<Sample> = samples
        .iter()
        .zip(&is_test)
        .filter(|(_, &t)| !t)
        .map(|(s, _)| s.clone())
        .collect();
    let test: Vec<Sample> = test_idx.iter().map(|&i| samples[i].clone()).collect();

    let mut model = build_model(&cfg.arch, &mut fold_rng.derive(0))?;
    model.set_filtering(cfg.decorre_enabled);
    let train_pairs = biased_sample(&train, &cfg.training_bias(), &mut fold_rng.derive(1));
    let test_sets = [
        full_testset(&test, cfg.bias.kind, &mut fold_rng.derive(2)),
        adversarial_testset(&test, &cfg.bias),
        biased_sample(&test, &cfg.bias, &mut fold_rng.derive(3)),
    ];
    drop(train);

    let mut result = FoldResult {
        fold,
        checkpoint: None,
        last: None,
        diverged_epoch: None,
        loss_curve: Vec::with_capacity(cfg.epochs),
    };
    let mut records = Vec::new();
    let mut snapshots = Vec::new();
    for epoch in 1..=cfg.epochs {
        let mut epoch_rng = fold_rng.derive(1000 + epoch as u64);
        let capture = cfg.is_record_epoch(epoch);
        model.set_capture(capture);
        let (loss, epoch_records) = train_epoch(&mut model, &train_pairs, cfg, &mut epoch_rng)?;
        result.loss_curve.push(loss);
        if !loss.is_finite() {
            result.diverged_epoch = Some(epoch);
            break;
        }
        if capture {
            records.extend(epoch_records.into_iter().map(|mut r| {
                r.epoch = epoch;
                r
            }));
        }
        if epoch == cfg.checkpoint() {
            result.checkpoint = Some(evaluate(&model, &test_sets)?);
            snapshots.push(snapshot(&model, fold, epoch)?);
        }
    }
    if result.diverged_epoch.is_none() {
        result.last = Some(evaluate(&model, &test_sets)?);
        if cfg.checkpoint() != cfg.epochs {
            snapshots.push(snapshot(&model, fold, cfg.epochs)?);
        }
    }
    Ok(FoldOutput {
        result,
        records,
        snapshots,
    })
}

/// One pass over the shuffled training pairs. Returns the mean batch loss and
/// the correlation records pooled per layer (empty unless capturing).
fn train_epoch(
    model: &mut Model,
    pairs: &[Pair],
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<(f64, Vec<CorrelationRecord>)> {
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    rng.shuffle(&mut order);
    let mut pooled: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let (mut loss_sum, mut batches) = (0.0, 0usize);
    let min_batch = if model.num_decorre_layers() > 0 { 2 } else { 1 };
    for chunk in order.chunks(cfg.batch_size) {
        if chunk.len() < min_batch {
            continue;
        }
        let batch = make_batch(pairs, chunk, rng)?;
        let (logits, recs) = model.forward_dual(&batch, true, rng)?;
        for r in recs {
            pooled.entry(r.layer_id).or_default().extend(r.correlations);
        }
        let (loss, grad) = bce_with_logits(&logits, &batch.labels)?;
        loss_sum += loss;
        batches += 1;
        if !loss.is_finite() {
            return Ok((f64::NAN, Vec::new()));
        }
        model.backward_dual(&grad)?;
        if let Some(max_norm) = cfg.grad_clip {
            clip_grad_norm(&mut model.params_mut(), max_norm)?;
        }
        sgd_step(&mut model.params_mut(), cfg.lr)?;
    }
    let records = pooled
        .into_iter()
        .map(|(layer, values)| CorrelationRecord::new(layer, 0, values))
        .collect();
    Ok((loss_sum / batches.max(1) as f64, records))
}

fn make_batch(pairs: &[Pair], chunk: &[usize], rng: &mut Rng) -> Result<DualBatch> {
    let mut rois = Vec::with_capacity(chunk.len());
    let mut crs = Vec::with_capacity(chunk.len());
    let mut labels = Vec::with_capacity(chunk.len());
    for &i in chunk {
        let (r, c) = augment(&pairs[i].roi, &pairs[i].cr, rng);
        rois.push(r);
        crs.push(c);
        labels.push(pairs[i].label as f32);
    }
    let roi = Tensor::stack(&rois.iter().collect::<Vec<_>>())?;
    let cr = Tensor::stack(&crs.iter().collect::<Vec<_>>())?;
    DualBatch::new(roi, cr, Tensor::new(&[labels.len()], labels)?)
}

fn score(model: &Model, pairs: &[Pair]) -> Result<Vec<f64>> {
    let mut scores = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(EVAL_CHUNK) {
        let x = Tensor::stack(&chunk.iter().map(|p| &p.roi).collect::<Vec<_>>())?;
        scores.extend(model.infer(&x)?.data().iter().map(|&v| v as f64));
    }
    Ok(scores)
}

fn evaluate(model: &Model, sets: &[Vec<Pair>; 3]) -> Result<TestAucs> {
    let auc = |pairs: &[Pair]| -> Result<f64> {
        let labels: Vec<u8> = pairs.iter().map(|p| p.label).collect();
        roc_auc(&score(model, pairs)?, &labels)
    };
    Ok(TestAucs {
        full: auc(&sets[0])?,
        adversarial: auc(&sets[1])?,
        manipulated: auc(&sets[2])?,
    })
}
