//! Mini-batch SGD training with per-epoch history, and the moving-window
//! harness that retrains a fresh model at every step along one path.

use std::io::Write;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{build_samples, LabeledSample, WindowSpec};
use crate::error::{Error, Result};
use crate::eval::ConfusionMatrix;
use crate::gbm::PricePath;
use crate::labeler::{Label, StrategySpec};
use crate::nn::{layers, ArchitectureSpec, Mode, Model, ModelParams, Tensor};
use crate::raster::{resize_image, ChartImage, ChartSpec};
use crate::rng::{derive_seed, seeded_rng, stream};
use crate::series::IndicatorSet;

/// Images as `[0, 1]` CHW planes with class-index labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSet {
    pub shape: [usize; 3],
    pub data: Vec<f64>,
    pub labels: Vec<usize>,
}

impl ImageSet {
    pub fn empty(shape: [usize; 3]) -> Self {
        Self { shape, data: Vec::new(), labels: Vec::new() }
    }

    /// Converts charts to model input, resizing any whose size differs
    /// from `shape`.
    pub fn from_images<'a>(items: impl IntoIterator<Item = (&'a ChartImage, Label)>, shape: [usize; 3]) -> Result<Self> {
        let [c, h, w] = shape;
        let mut set = Self::empty(shape);
        for (img, label) in items {
            if img.channels != c {
                return Err(Error::Shape(format!(
                    "chart has {} channels, model expects {c}",
                    img.channels
                )));
            }
            if img.width == w && img.height == h {
                set.data.extend(img.to_chw());
            } else {
                set.data.extend(resize_image(img, w, h)?.to_chw());
            }
            set.labels.push(label.class_index());
        }
        Ok(set)
    }

    pub fn from_samples(samples: &[LabeledSample], shape: [usize; 3]) -> Result<Self> {
        Self::from_images(samples.iter().map(|s| (&s.image, s.label)), shape)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn sample_size(&self) -> usize {
        self.shape.iter().product()
    }

    /// Gathers the given samples into an `(n, c, h, w)` batch.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let d = self.sample_size();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(&self.data[i * d..(i + 1) * d]);
        }
        let [c, h, w] = self.shape;
        let x = Tensor::new(vec![idx.len(), c, h, w], data).expect("batch size matches shape");
        (x, idx.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        let (x, labels) = self.batch(idx);
        Self { shape: self.shape, data: x.into_data(), labels }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub seed: u64,
    /// Draw every epoch as equal parts of each class present: all samples
    /// of the rarest class and a fresh random subset of the others.
    #[serde(default)]
    pub balanced_epochs: bool,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    /// Return the parameters from the epoch with the lowest validation loss
    /// instead of the last epoch. Training still runs every epoch.
    #[serde(default)]
    pub keep_best_val: bool,
}

/// Learning rate as a function of the epoch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "kebab-case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Multiply the rate by `gamma` after every `step_epochs` epochs.
    StepDown { step_epochs: usize, gamma: f64 },
}

impl LrSchedule {
    /// Rate for 1-based `epoch` given the base rate.
    pub fn rate(&self, base: f64, epoch: usize) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::StepDown { step_epochs, gamma } => {
                base * gamma.powi(((epoch.max(1) - 1) / step_epochs.max(1)) as i32)
            }
        }
    }
}

fn default_batch() -> usize {
    32
}

fn default_lr() -> f64 {
    0.01
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: default_batch(),
            learning_rate: default_lr(),
            seed: 0,
            balanced_epochs: false,
            lr_schedule: LrSchedule::Constant,
            keep_best_val: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.epochs < 1 {
            bad.push("epochs must be >= 1".to_string());
        }
        if self.batch_size < 1 {
            bad.push("batch_size must be >= 1".to_string());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            bad.push(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if let LrSchedule::StepDown { step_epochs, gamma } = self.lr_schedule {
            if step_epochs < 1 {
                bad.push("lr_schedule.step_epochs must be >= 1".to_string());
            }
            if !(gamma > 0.0 && gamma <= 1.0) {
                bad.push(format!("lr_schedule.gamma must be in (0, 1], got {gamma}"));
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Parameter(bad.join("; ")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean minibatch loss over the epoch, with dropout active.
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["epoch", "train_loss", "train_acc", "val_loss", "val_acc"])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.records {
            out.write_record([
                r.epoch.to_string(),
                r.train_loss.to_string(),
                r.train_acc.to_string(),
                opt(r.val_loss),
                opt(r.val_acc),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv(r: impl std::io::Read) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let mut records = Vec::new();
        for row in rdr.deserialize() {
            records.push(row?);
        }
        Ok(Self { records })
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

const EVAL_CHUNK: usize = 64;

/// Inference-mode mean loss, accuracy and predicted classes.
pub fn evaluate(model: &Model, set: &ImageSet) -> Result<(f64, f64, Vec<usize>)> {
    if set.is_empty() {
        return Err(Error::InsufficientData("cannot evaluate on an empty set".into()));
    }
    let mut loss = 0.0;
    let mut preds = Vec::with_capacity(set.len());
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (x, y) = set.batch(chunk);
        let logits = model.logits(&x)?;
        let (l, probs) = layers::softmax_cross_entropy(&logits, &y)?;
        loss += l * chunk.len() as f64;
        preds.extend(probs.data().chunks_exact(3).map(argmax));
    }
    let correct = preds.iter().zip(&set.labels).filter(|(p, t)| p == t).count();
    Ok((loss / set.len() as f64, correct as f64 / set.len() as f64, preds))
}

pub fn predict(model: &Model, set: &ImageSet) -> Result<Vec<Label>> {
    let (_, _, preds) = evaluate(model, set)?;
    preds.into_iter().map(Label::from_class_index).collect()
}

fn epoch_order(labels: &[usize], balanced: bool, seed: u64) -> Vec<usize> {
    let mut rng = seeded_rng(seed);
    let mut order: Vec<usize> = if balanced {
        let mut groups: [Vec<usize>; 3] = Default::default();
        for (i, &l) in labels.iter().enumerate() {
            groups[l].push(i);
        }
        let keep = groups.iter().map(Vec::len).filter(|&n| n > 0).min().unwrap_or(0);
        groups
            .iter_mut()
            .flat_map(|g| {
                g.shuffle(&mut rng);
                g.truncate(keep);
                g.drain(..)
            })
            .collect()
    } else {
        (0..labels.len()).collect()
    };
    order.shuffle(&mut rng);
    order
}

pub fn train_model(
    arch: &ArchitectureSpec,
    train: &ImageSet,
    val: Option<&ImageSet>,
    cfg: &TrainConfig,
) -> Result<(Model, TrainHistory)> {
    train_model_with(arch, train, val, cfg, |_| {})
}

/// [`train_model`] with a callback after every epoch.
pub fn train_model_with(
    arch: &ArchitectureSpec,
    train: &ImageSet,
    val: Option<&ImageSet>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(Model, TrainHistory)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    if train.shape != arch.input {
        return Err(Error::Shape(format!("training images are {:?}, model expects {:?}", train.shape, arch.input)));
    }
    let mut model = Model::new(arch.clone(), cfg.seed)?;
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, ModelParams)> = None;
    for epoch in 1..=cfg.epochs {
        let order = epoch_order(&train.labels, cfg.balanced_epochs, derive_seed(cfg.seed, stream::SHUFFLE, epoch as u64));
        let dropout_seed = derive_seed(cfg.seed, stream::DROPOUT, epoch as u64);
        let lr = cfg.lr_schedule.rate(cfg.learning_rate, epoch);
        let (mut loss_sum, mut correct) = (0.0, 0);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (x, y) = train.batch(chunk);
            let mode = Mode::Train { seed: derive_seed(dropout_seed, stream::DROPOUT, b as u64) };
            let (loss, probs, grads) = model.loss_and_grads(&x, &y, mode)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss at epoch {epoch}, batch {}", b + 1)));
            }
            loss_sum += loss * chunk.len() as f64;
            correct += probs.data().chunks_exact(3).map(argmax).zip(&y).filter(|(p, t)| p == *t).count();
            model.sgd_step(&grads, lr)?;
            if !model.params.all_finite() {
                return Err(Error::Numeric(format!("parameters diverged at epoch {epoch}, batch {}", b + 1)));
            }
        }
        let (val_loss, val_acc) = match val {
            Some(v) if !v.is_empty() => {
                let (l, a, _) = evaluate(&model, v)?;
                if !l.is_finite() {
                    return Err(Error::Numeric(format!("non-finite validation loss at epoch {epoch}")));
                }
                (Some(l), Some(a))
            }
            _ => (None, None),
        };
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / order.len() as f64,
            train_acc: correct as f64 / order.len() as f64,
            val_loss,
            val_acc,
        };
        on_epoch(&rec);
        if let (true, Some(l)) = (cfg.keep_best_val, val_loss) {
            if best.as_ref().map_or(true, |(b, _)| l < *b) {
                best = Some((l, model.params.clone()));
            }
        }
        history.records.push(rec);
    }
    if let Some((_, params)) = best {
        model.params = params;
    }
    Ok((model, history))
}

/// One moving-window prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub step: usize,
    /// Last day of the region; the predicted chart ends here.
    pub day: usize,
    pub predicted: Label,
    pub truth: Label,
    /// Training labels were all one class, so that class was predicted
    /// without training.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MovingWindowResult {
    pub steps: Vec<StepOutcome>,
    pub confusion: ConfusionMatrix,
}

/// Windows of `wspec.length` days inside a region of `region` days whose
/// labels are known by the region's last day.
pub fn training_windows_per_region(region: usize, wspec: &WindowSpec) -> usize {
    (region + 1).saturating_sub(wspec.length + wspec.holding)
}

/// Walks a region of `region` days along the path one day at a time. At each
/// step a fresh model is trained on the region's fully labelled windows and
/// predicts the label of the window ending on the region's last day, whose
/// outcome lies after the region.
#[allow(clippy::too_many_arguments)]
pub fn run_moving_window(
    path: &PricePath,
    indicators: &IndicatorSet,
    wspec: &WindowSpec,
    region: usize,
    strategy: &StrategySpec,
    chart: &ChartSpec,
    arch: &ArchitectureSpec,
    cfg: &TrainConfig,
    max_steps: Option<usize>,
) -> Result<MovingWindowResult> {
    wspec.validate()?;
    let samples = build_samples(path, 0, indicators, wspec, strategy, chart)?;
    moving_window_on_samples(&samples, wspec, region, arch, cfg, max_steps)
}

/// The moving-window harness over prebuilt samples of a single path. The
/// samples must be consecutive stride-1 windows ordered by start day.
pub fn moving_window_on_samples(
    samples: &[LabeledSample],
    wspec: &WindowSpec,
    region: usize,
    arch: &ArchitectureSpec,
    cfg: &TrainConfig,
    max_steps: Option<usize>,
) -> Result<MovingWindowResult> {
    cfg.validate()?;
    wspec.validate()?;
    if wspec.stride != 1 {
        return Err(Error::Parameter("moving-window runs advance one day at a time (stride 1)".into()));
    }
    let per_region = training_windows_per_region(region, wspec);
    if per_region == 0 {
        return Err(Error::Parameter(format!(
            "a {region}-day region holds no labelled {}-day window with holding {}",
            wspec.length, wspec.holding
        )));
    }
    if let Some(first) = samples.first() {
        for (i, s) in samples.iter().enumerate() {
            if s.path_id != first.path_id || s.start != first.start + i || s.end + 1 != s.start + wspec.length {
                return Err(Error::Consistency(format!(
                    "moving-window sample {i} ({}_{}) breaks the consecutive window sequence",
                    s.path_id, s.start
                )));
            }
        }
    }
    // Sample i starts at warmup + i; step s trains on samples s..s+per_region
    // and predicts sample s + region - length.
    let offset = region - wspec.length;
    let available = samples.len().saturating_sub(offset);
    let n_steps = max_steps.map_or(available, |m| m.min(available));
    if n_steps == 0 {
        return Err(Error::InsufficientData(format!(
            "{} windows leave no moving-window step for region {region}",
            samples.len()
        )));
    }
    let set = ImageSet::from_samples(samples, arch.input)?;
    let steps = (0..n_steps)
        .into_par_iter()
        .map(|s| {
            let train_idx: Vec<usize> = (s..s + per_region).collect();
            let target = &samples[s + offset];
            let train = set.subset(&train_idx);
            let first = train.labels[0];
            let (predicted, degenerate) = if train.labels.iter().all(|&l| l == first) {
                (Label::from_class_index(first)?, true)
            } else {
                let step_cfg = TrainConfig {
                    seed: derive_seed(cfg.seed, stream::WINDOW_STEP, s as u64),
                    ..*cfg
                };
                let (model, _) = train_model(arch, &train, None, &step_cfg)?;
                let one = set.subset(&[s + offset]);
                (predict(&model, &one)?[0], false)
            };
            Ok(StepOutcome { step: s, day: target.end, predicted, truth: target.label, degenerate })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut confusion = ConfusionMatrix::default();
    for o in &steps {
        confusion.add(o.truth, o.predicted);
    }
    Ok(MovingWindowResult { steps, confusion })
}
