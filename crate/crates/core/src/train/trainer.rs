use serde::{Deserialize, Serialize};

use crate::dataprep::augment::{augment, to_tensors, AugmentConfig};
use crate::dataprep::image::Sample;
use crate::error::{invalid, Error, Result};
use crate::losses::{self, LossSpec};
use crate::model::checkpoint::{Checkpoint, CheckpointMeta};
use crate::model::{MitUNet, BN_MOMENTUM};
use crate::seed;
use crate::tensor::{Graph, Tensor};
use crate::train::metrics::{confusion, metrics, predict_masks, ConfusionCounts, MeanMetrics, MetricReport};
use crate::train::optim::{Adam, Plateau};
use crate::train::par;
use crate::train::split::{shuffle, split_dataset};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchedulerConfig {
    /// Only "max" is meaningful: the monitored metric is validation mIoU.
    pub mode: String,
    pub factor: f64,
    pub patience: usize,
    pub threshold: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self { mode: "max".into(), factor: 0.5, patience: 3, threshold: 1e-4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub split: f64,
    pub scheduler: SchedulerConfig,
    pub loss: LossSpec,
    pub preset: String,
    pub repeats: usize,
    pub augment: AugmentConfig,
    /// Single-threaded execution; results are bit-reproducible either way,
    /// this only removes the thread pool from the picture.
    pub deterministic: bool,
}

pub const FINETUNE_LR: f64 = 1e-5;

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch: 4,
            lr: 1e-4,
            seed: 42,
            split: 0.8,
            scheduler: SchedulerConfig::default(),
            loss: LossSpec::default(),
            preset: "nano".into(),
            repeats: 3,
            augment: AugmentConfig::default(),
            deterministic: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.repeats == 0 {
            return Err(invalid!("batch and repeats must be at least 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(invalid!("lr must be finite and non-negative, got {}", self.lr));
        }
        if !(self.split > 0.0 && self.split < 1.0) {
            return Err(invalid!("split must lie in (0, 1), got {}", self.split));
        }
        if self.scheduler.mode != "max" {
            return Err(invalid!("scheduler mode must be \"max\" (validation mIoU is maximised), got {:?}", self.scheduler.mode));
        }
        Plateau::new(self.lr, self.scheduler.factor, self.scheduler.patience, self.scheduler.threshold)?;
        self.loss.validate()?;
        self.augment.validate()
    }

    /// Seed of repeat `r`; the first repeat uses the configured seed itself.
    pub fn run_seed(&self, r: usize) -> u64 {
        if r == 0 {
            self.seed
        } else {
            seed::derive(self.seed, r as u64)
        }
    }
}

/// One line of the history file. Epoch 0 is the model before any update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub run: usize,
    pub epoch: usize,
    pub train_loss: Option<f64>,
    pub lr: f64,
    pub val: MetricReport,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub seed: u64,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best: MetricReport,
    pub checkpoint: Checkpoint,
    /// Model after the last epoch (not necessarily the best one).
    pub last: MitUNet<f32>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
    pub runs: Vec<RunResult>,
    /// Mean over repeats of each run's best-epoch metrics.
    pub mean: MeanMetrics,
}

impl TrainOutcome {
    pub fn history(&self) -> Vec<EpochRecord> {
        self.runs.iter().flat_map(|r| r.history.iter().cloned()).collect()
    }

    /// Best checkpoint across repeats.
    pub fn best_run(&self) -> &RunResult {
        self.runs
            .iter()
            .max_by(|a, b| a.best.miou.total_cmp(&b.best.miou))
            .expect("at least one run")
    }
}

pub fn history_jsonl(records: &[EpochRecord]) -> String {
    records.iter().map(|r| serde_json::to_string(r).expect("history serialises") + "\n").collect()
}

/// Stacked normalised images `[B, 3, H, W]` and targets `[B, H, W]`.
pub fn batch_tensors(samples: &[Sample], cfg: &AugmentConfig) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let first = samples.first().ok_or_else(|| invalid!("empty batch"))?;
    let (h, w) = first.image.dims();
    let mut img = Vec::with_capacity(samples.len() * 3 * h * w);
    let mut tgt = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if s.image.dims() != (h, w) {
            return Err(Error::Data(format!("batch mixes sizes {:?} and {:?}", (h, w), s.image.dims())));
        }
        let (i, t) = to_tensors(s, cfg);
        img.extend_from_slice(i.data());
        tgt.extend_from_slice(t.data());
    }
    Ok((Tensor::new(&[samples.len(), 3, h, w], img)?, Tensor::new(&[samples.len(), h, w], tgt)?))
}

/// Pooled confusion over `samples`, one eval-mode forward per sample.
pub fn evaluate_counts(
    model: &MitUNet<f32>,
    samples: &[&Sample],
    cfg: &AugmentConfig,
    sequential: bool,
) -> Result<ConfusionCounts> {
    let per: Vec<Result<ConfusionCounts>> = par::map(sequential, samples, |s| {
        let (x, _) = batch_tensors(std::slice::from_ref(*s), cfg)?;
        let logits = model.predict(&x)?;
        let pred = predict_masks(&logits)?.remove(0);
        confusion(&pred, &s.mask)
    });
    let mut total = ConfusionCounts::default();
    for c in per {
        total += c?;
    }
    Ok(total)
}

pub fn evaluate(model: &MitUNet<f32>, samples: &[&Sample], cfg: &AugmentConfig, sequential: bool) -> Result<MetricReport> {
    if samples.is_empty() {
        return Err(Error::Data("nothing to evaluate: empty split".into()));
    }
    metrics(&evaluate_counts(model, samples, cfg, sequential)?)
}

/// Forward, loss, backward and one Adam step on a prepared batch. Running
/// statistics move only when the step can move the weights (lr > 0).
pub fn train_step(
    model: &mut MitUNet<f32>,
    adam: &mut Adam,
    images: Tensor<f32>,
    targets: &Tensor<f32>,
    loss: &LossSpec,
    lr: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.constant(images);
    let fwd = model.forward(&mut g, x, true)?;
    let l = losses::loss(&mut g, fwd.logits, targets, loss)?;
    let value = g.value(l).item()? as f64;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("training loss became {value}")));
    }
    g.backward(l)?;
    let grads: Vec<Tensor<f32>> = fwd
        .params
        .iter()
        .zip(model.params().tensors())
        .map(|(&id, p)| g.take_grad(id).unwrap_or_else(|| Tensor::zeros(p.shape()).expect("param shape")))
        .collect();
    adam.update(model.params_mut().tensors_mut(), &grads, lr)?;
    if lr > 0.0 {
        model.update_running_stats(&fwd.bn_stats, BN_MOMENTUM);
    }
    Ok(value)
}

fn meta(epoch: usize, run_seed: u64, report: &MetricReport, cfg: &TrainConfig) -> CheckpointMeta {
    let mut m = CheckpointMeta::new();
    m.insert("epoch".into(), epoch.into());
    m.insert("seed".into(), run_seed.into());
    m.insert("loss".into(), cfg.loss.to_string().into());
    m.insert("val".into(), serde_json::to_value(report).expect("report serialises"));
    m
}

fn check_dataset(data: &[Sample], model: &MitUNet<f32>) -> Result<()> {
    let first = data.first().ok_or_else(|| Error::Data("empty dataset".into()))?;
    let (h, w) = first.image.dims();
    if let Some(s) = data.iter().find(|s| s.image.dims() != (h, w)) {
        return Err(Error::Data(format!("dataset mixes sizes {:?} and {:?}", (h, w), s.image.dims())));
    }
    model.check_input(&[1, 3, h, w])
}

fn run_once(
    mut model: MitUNet<f32>,
    cfg: &TrainConfig,
    data: &[Sample],
    train_idx: &[usize],
    val: &[&Sample],
    run: usize,
    observer: &mut dyn FnMut(&EpochRecord),
) -> Result<RunResult> {
    let run_seed = cfg.run_seed(run);
    let mut adam = Adam::new(model.params().tensors());
    let mut plateau = Plateau::new(cfg.lr, cfg.scheduler.factor, cfg.scheduler.patience, cfg.scheduler.threshold)?;
    let mut lr = cfg.lr;
    let report = evaluate(&model, val, &cfg.augment, cfg.deterministic)?;
    let first = EpochRecord { run, epoch: 0, train_loss: None, lr, val: report };
    observer(&first);
    let mut history = vec![first];
    let (mut best_epoch, mut best) = (0, report);
    let mut checkpoint = Checkpoint::from_model(&model, 0, meta(0, run_seed, &report, cfg));
    let (shuffle_base, aug_base) = (seed::derive(run_seed, 1), seed::derive(run_seed, 2));
    let mut step = 0u64;

    for epoch in 1..=cfg.epochs {
        let mut order = train_idx.to_vec();
        shuffle(&mut order, seed::derive(shuffle_base, epoch as u64));
        let mut loss_sum = 0.0;
        let batches = order.chunks(cfg.batch);
        let nb = batches.len();
        for chunk in batches {
            let augmented: Vec<Result<Sample>> = par::map(cfg.deterministic, chunk, |&i| {
                let s = seed::derive(aug_base, (epoch * data.len() + i) as u64);
                augment(&data[i], &cfg.augment, s)
            });
            let augmented = augmented.into_iter().collect::<Result<Vec<_>>>()?;
            let (x, y) = batch_tensors(&augmented, &cfg.augment)?;
            loss_sum += train_step(&mut model, &mut adam, x, &y, &cfg.loss, lr)?;
            step += 1;
        }
        let report = evaluate(&model, val, &cfg.augment, cfg.deterministic)?;
        let rec = EpochRecord { run, epoch, train_loss: Some(loss_sum / nb.max(1) as f64), lr, val: report };
        observer(&rec);
        history.push(rec);
        if report.miou > best.miou {
            best = report;
            best_epoch = epoch;
            checkpoint = Checkpoint::from_model(&model, step, meta(epoch, run_seed, &report, cfg));
        }
        lr = plateau.observe(report.miou);
    }
    Ok(RunResult { seed: run_seed, history, best_epoch, best, checkpoint, last: model })
}

fn fit(
    cfg: &TrainConfig,
    data: &[Sample],
    init: &dyn Fn(u64) -> Result<MitUNet<f32>>,
    observer: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (train_idx, val_idx) = split_dataset(data.len(), cfg.split, cfg.seed)?;
    if train_idx.is_empty() {
        return Err(Error::Data(format!("training split is empty ({} samples, split {})", data.len(), cfg.split)));
    }
    if val_idx.is_empty() {
        return Err(Error::Data(format!("validation split is empty ({} samples, split {})", data.len(), cfg.split)));
    }
    let val: Vec<&Sample> = val_idx.iter().map(|&i| &data[i]).collect();
    let mut runs = Vec::with_capacity(cfg.repeats);
    for r in 0..cfg.repeats {
        let model = init(cfg.run_seed(r))?;
        check_dataset(data, &model)?;
        runs.push(run_once(model, cfg, data, &train_idx, &val, r, observer)?);
    }
    let mean = MeanMetrics::of(&runs.iter().map(|r| r.best).collect::<Vec<_>>());
    Ok(TrainOutcome { train_indices: train_idx, val_indices: val_idx, runs, mean })
}

/// Train from scratch; each repeat initialises from its own seed.
pub fn train(cfg: &TrainConfig, data: &[Sample], observer: &mut dyn FnMut(&EpochRecord)) -> Result<TrainOutcome> {
    fit(cfg, data, &|s| MitUNet::preset(&cfg.preset, s), observer)
}

/// Continue from `base`; every repeat starts from the same weights.
pub fn finetune(
    base: &Checkpoint,
    cfg: &TrainConfig,
    data: &[Sample],
    observer: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    if base.config.preset != cfg.preset {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds preset {:?} but the run asks for {:?}",
            base.config.preset, cfg.preset
        )));
    }
    fit(cfg, data, &|_| base.to_model(), observer)
}
