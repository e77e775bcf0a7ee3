//! Image-only classifiers on top of the (optionally pre-trained) feature
//! extractor, for binary and multi-label tasks.

use std::collections::BTreeMap;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::Corpus;
use crate::encoders::{stack_images, FeatureExtractor, ImageEncoderConfig};
use crate::error::{Error, Result};
use crate::layers::{ConvBn, Init, Linear, Mode};
use crate::metrics::MetricReport;
use crate::seed;
use crate::tensor::{sigmoid, AdamConfig, AdamState, ParamKind, ParamStore, Real, Tape, Tensor, Var};
use crate::train::{optimizer_step, LogRow, LossMeter};
use crate::weights::{LoadReport, WeightFile};

pub const HEAD_PREFIX: &str = "head";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Binary,
    Multilabel,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Label {
    Class(usize),
    MultiHot(Vec<u8>),
}

#[derive(Debug, Clone)]
pub struct LabeledExample<T: Real> {
    pub image: Tensor<T>,
    pub label: Label,
}

/// Labeled examples for `task` from a corpus whose items all carry classes.
/// Multi-label targets have `num_classes` entries.
pub fn labeled_from_corpus<T: Real>(corpus: &Corpus, task: Task, num_classes: usize) -> Result<Vec<LabeledExample<T>>> {
    corpus
        .items
        .iter()
        .map(|item| {
            let missing = || Error::Data(format!("item `{}` has no labels", item.id));
            let label = match task {
                Task::Binary => Label::Class(item.binary_label().ok_or_else(missing)?),
                Task::Multilabel => {
                    let classes = item.classes.as_ref().ok_or_else(missing)?;
                    if let Some(&c) = classes.iter().find(|&&c| c >= num_classes) {
                        return Err(Error::TargetOutOfRange {
                            index: c,
                            classes: num_classes,
                        });
                    }
                    Label::MultiHot(item.multi_hot(num_classes).ok_or_else(missing)?)
                }
            };
            Ok(LabeledExample {
                image: item.tensor(),
                label,
            })
        })
        .collect()
}

/// Stratified subsample: from each stratum (distinct key) keep
/// `max(1, round(fraction * n_stratum))` items drawn without replacement.
/// Returns ascending indices; fraction 1 returns every index.
pub fn subsample_fraction<K: Ord + Clone>(keys: &[K], fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config {
            key: "fraction".into(),
            msg: format!("must lie in (0, 1], got {fraction}"),
        });
    }
    if fraction == 1.0 {
        return Ok((0..keys.len()).collect());
    }
    let mut strata: BTreeMap<&K, Vec<usize>> = BTreeMap::new();
    for (i, k) in keys.iter().enumerate() {
        strata.entry(k).or_default().push(i);
    }
    if fraction * (keys.len() as f64) < strata.len() as f64 {
        return Err(Error::Data(format!(
            "fraction {fraction} of {} items cannot cover {} classes",
            keys.len(),
            strata.len()
        )));
    }
    let mut rng = seed::rng(&[seed, seed::label("subsample")]);
    let mut out = Vec::new();
    for members in strata.values_mut() {
        let take = ((fraction * members.len() as f64).round() as usize).max(1);
        members.shuffle(&mut rng);
        out.extend_from_slice(&members[..take]);
    }
    out.sort_unstable();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DownstreamConfig {
    pub image: ImageEncoderConfig,
    pub task: Task,
    /// Label count of the multi-label task.
    pub num_classes: usize,
    /// Output channels of the head's pointwise conv.
    pub head_channels: usize,
    /// Width of the hidden FC layer; `None` maps the pooled vector straight
    /// to the logits.
    pub hidden: Option<usize>,
}

impl Default for DownstreamConfig {
    fn default() -> Self {
        Self {
            image: ImageEncoderConfig::default(),
            task: Task::Binary,
            num_classes: crate::datagen::NUM_KINDS,
            head_channels: 64,
            hidden: Some(32),
        }
    }
}

impl DownstreamConfig {
    pub fn outputs(&self) -> usize {
        match self.task {
            Task::Binary => 2,
            Task::Multilabel => self.num_classes,
        }
    }
}

/// Pointwise conv + BN + ReLU, GAP, optional FC + ReLU, output layer.
#[derive(Debug, Clone)]
pub struct DownstreamHead {
    conv: ConvBn,
    fc: Option<Linear>,
    out: Linear,
}

impl DownstreamHead {
    fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, config: &DownstreamConfig, rng: &mut R) -> Self {
        let p = HEAD_PREFIX;
        let conv = ConvBn::new(
            store,
            &format!("{p}.conv"),
            config.image.feature_channels,
            config.head_channels,
            1,
            1,
            rng,
        );
        let fc = config
            .hidden
            .map(|h| Linear::new(store, &format!("{p}.fc"), config.head_channels, h, Init::Default, rng));
        let width = config.hidden.unwrap_or(config.head_channels);
        let out = Linear::new(store, &format!("{p}.out"), width, config.outputs(), Init::Zero, rng);
        Self { conv, fc, out }
    }

    /// Activation maps `[N,C_h,H_f,W_f]` from extractor output.
    pub fn activations<T: Real>(&self, store: &ParamStore<T>, tape: &mut Tape<T>, maps: Var, mode: Mode) -> Result<Var> {
        self.conv.forward(store, tape, maps, mode, true)
    }

    /// Pooled vector `[N,C_h]` and logits from activation maps.
    pub fn classify<T: Real>(&self, store: &ParamStore<T>, tape: &mut Tape<T>, acts: Var) -> Result<(Var, Var)> {
        let pooled = tape.gap(acts)?;
        let mut h = pooled;
        if let Some(fc) = &self.fc {
            h = fc.forward(store, tape, h)?;
            h = tape.relu(h);
        }
        Ok((pooled, self.out.forward(store, tape, h)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    Scratch,
    Pretrained,
}

#[derive(Debug, Clone)]
pub struct DownstreamModel<T: Real> {
    pub config: DownstreamConfig,
    pub store: ParamStore<T>,
    pub extractor: FeatureExtractor,
    pub head: DownstreamHead,
    pub init_mode: InitMode,
    frozen: bool,
}

impl<T: Real> DownstreamModel<T> {
    /// Freshly initialized extractor and head.
    pub fn new(config: &DownstreamConfig, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let extractor = FeatureExtractor::new(&mut store, &config.image, &mut seed::rng(&[seed, seed::label("image_init")]));
        let head = DownstreamHead::new(&mut store, config, &mut seed::rng(&[seed, seed::label("downstream_head_init")]));
        Self {
            config: config.clone(),
            store,
            extractor,
            head,
            init_mode: InitMode::Scratch,
            frozen: false,
        }
    }

    /// Copies every extractor tensor from `file` (e.g. a matcher checkpoint).
    /// Head tensors stay freshly initialized and are listed in the report.
    /// With `reset_bn`, the extractor's running statistics restart at 0/1.
    pub fn load_extractor(&mut self, file: &WeightFile, reset_bn: bool) -> Result<LoadReport> {
        let report = file.apply(&mut self.store, FeatureExtractor::owns, false)?;
        if let Some(name) = report.fresh.iter().find(|n| FeatureExtractor::owns(n)) {
            return Err(Error::MissingTensor(name.clone()));
        }
        if reset_bn {
            for p in self.store.iter_mut() {
                if p.kind == ParamKind::Buffer && FeatureExtractor::owns(&p.name) {
                    let v = if p.name.ends_with(".running_var") { T::one() } else { T::zero() };
                    p.tensor.data_mut().iter_mut().for_each(|x| *x = v);
                }
            }
        }
        self.init_mode = InitMode::Pretrained;
        Ok(report)
    }

    /// Frozen extractors keep their parameters and run with stored batchnorm
    /// statistics, so none of their tensors change during training.
    pub fn set_extractor_frozen(&mut self, frozen: bool) {
        let names: Vec<String> = self
            .store
            .iter()
            .filter(|p| FeatureExtractor::owns(&p.name))
            .map(|p| p.name.clone())
            .collect();
        for n in names {
            self.store.set_frozen(&n, frozen);
        }
        self.frozen = frozen;
    }

    pub fn extractor_frozen(&self) -> bool {
        self.frozen
    }

    /// Extractor maps, head activations, pooled vector and logits.
    pub fn forward_parts(&self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<ForwardParts> {
        let ext_mode = if self.frozen { Mode::Eval } else { mode };
        let maps = self.extractor.forward(&self.store, tape, x, ext_mode)?;
        let acts = self.head.activations(&self.store, tape, maps, mode)?;
        let (pooled, logits) = self.head.classify(&self.store, tape, acts)?;
        Ok(ForwardParts {
            maps,
            acts,
            pooled,
            logits,
        })
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<Var> {
        Ok(self.forward_parts(tape, x, mode)?.logits)
    }

    /// Eval-mode probabilities, row-major: `P(class 1)` per image for the
    /// binary task, `num_classes` sigmoid outputs per image otherwise.
    pub fn predict(&self, images: &[&Tensor<T>], batch_size: usize) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for chunk in images.chunks(batch_size.max(1)) {
            let x = stack_images(chunk)?;
            let mut tape = Tape::new();
            let xv = tape.leaf(&x);
            let logits = self.forward(&mut tape, xv, Mode::Eval)?;
            out.extend(self.probabilities(tape.value(logits)));
        }
        Ok(out)
    }

    fn probabilities(&self, logits: &[T]) -> Vec<f64> {
        let f = |v: T| v.to_f64().unwrap();
        match self.config.task {
            Task::Binary => logits.chunks(2).map(|r| 1.0 / (1.0 + (f(r[0]) - f(r[1])).exp())).collect(),
            Task::Multilabel => logits.iter().map(|&v| f(sigmoid(v))).collect(),
        }
    }

    fn loss(&self, tape: &mut Tape<T>, logits: Var, batch: &[&LabeledExample<T>]) -> Result<Var> {
        match self.config.task {
            Task::Binary => {
                let targets = batch
                    .iter()
                    .map(|e| match e.label {
                        Label::Class(c) if c < 2 => Ok(c),
                        Label::Class(c) => Err(Error::TargetOutOfRange { index: c, classes: 2 }),
                        Label::MultiHot(_) => Err(Error::Data("binary task given a multi-hot label".into())),
                    })
                    .collect::<Result<Vec<_>>>()?;
                tape.cross_entropy(logits, &targets)
            }
            Task::Multilabel => {
                let k = self.config.num_classes;
                let mut targets = Vec::with_capacity(batch.len() * k);
                for e in batch {
                    match &e.label {
                        Label::MultiHot(v) if v.len() == k => targets.extend(v.iter().map(|&b| T::lit(b as f64))),
                        _ => return Err(Error::Data(format!("multi-label task needs {k}-entry multi-hot labels"))),
                    }
                }
                tape.bce_with_logits(logits, &targets)
            }
        }
    }
}

/// Intermediate tape values of one downstream forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardParts {
    pub maps: Var,
    pub acts: Var,
    pub pooled: Var,
    pub logits: Var,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub freeze_extractor: bool,
    pub reset_bn_stats: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            adam: AdamConfig::default(),
            freeze_extractor: false,
            reset_bn_stats: false,
        }
    }
}

/// Trains `model` on `train` with cross-entropy (binary) or per-class
/// sigmoid BCE (multi-label). Batches follow a per-epoch seeded shuffle.
pub fn finetune<T: Real>(
    model: &mut DownstreamModel<T>,
    train: &[LabeledExample<T>],
    val: Option<&[LabeledExample<T>]>,
    config: &FinetuneConfig,
    seed: u64,
) -> Result<Vec<LogRow>> {
    if train.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::Config {
            key: "batch_size".into(),
            msg: "must be at least 1".into(),
        });
    }
    model.set_extractor_frozen(config.freeze_extractor);
    let mut adam = AdamState::new(config.adam);
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut seed::rng(&[seed, seed::label("finetune"), epoch as u64]));
        let mut meter = LossMeter::default();
        let mut probs = Vec::with_capacity(train.len());
        let mut batch_labels = Vec::with_capacity(train.len());
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&LabeledExample<T>> = chunk.iter().map(|&i| &train[i]).collect();
            let imgs: Vec<&Tensor<T>> = batch.iter().map(|e| &e.image).collect();
            let x = stack_images(&imgs)?;
            let mut tape = Tape::new();
            let xv = tape.leaf(&x);
            let logits = model.forward(&mut tape, xv, Mode::Train)?;
            probs.extend(model.probabilities(tape.value(logits)));
            batch_labels.extend(batch.iter().map(|e| e.label.clone()));
            let loss = model.loss(&mut tape, logits, &batch)?;
            meter.add(tape.value(loss)[0].to_f64().unwrap(), chunk.len());
            optimizer_step(&mut tape, loss, &mut model.store, &mut adam)?;
        }
        let metrics = report_for(&model.config, &probs, &batch_labels)?;
        info!("finetune epoch {epoch} train loss {:.4}", meter.mean());
        log.push(LogRow {
            epoch,
            split: "train".into(),
            loss: meter.mean(),
            metrics,
        });
        if let Some(val) = val {
            let (metrics, loss) = evaluate_with_loss(model, val)?;
            log.push(LogRow {
                epoch,
                split: "val".into(),
                loss,
                metrics,
            });
        }
    }
    Ok(log)
}

/// All six metrics (binary) or per-class and macro ranking metrics
/// (multi-label) of the eval-mode predictions on `test`.
pub fn evaluate_downstream<T: Real>(model: &DownstreamModel<T>, test: &[LabeledExample<T>]) -> Result<MetricReport> {
    let report = evaluate_with_loss(model, test)?.0;
    for w in &report.warnings {
        warn!("{w}");
    }
    Ok(report)
}

fn evaluate_with_loss<T: Real>(model: &DownstreamModel<T>, test: &[LabeledExample<T>]) -> Result<(MetricReport, f64)> {
    if test.is_empty() {
        return Err(Error::Data("empty evaluation set".into()));
    }
    let imgs: Vec<&Tensor<T>> = test.iter().map(|e| &e.image).collect();
    let probs = model.predict(&imgs, 64)?;
    let labels: Vec<Label> = test.iter().map(|e| e.label.clone()).collect();
    let report = report_for(&model.config, &probs, &labels)?;
    let (flat, _) = flatten_labels(&model.config, &labels)?;
    let loss = -probs
        .iter()
        .zip(&flat)
        .map(|(&p, &l)| (if l { p } else { 1.0 - p }).max(f64::MIN_POSITIVE).ln())
        .sum::<f64>()
        / test.len() as f64;
    let loss = match model.config.task {
        Task::Binary => loss,
        Task::Multilabel => loss / model.config.num_classes as f64,
    };
    Ok((report, loss))
}

fn flatten_labels(config: &DownstreamConfig, labels: &[Label]) -> Result<(Vec<bool>, usize)> {
    let k = config.outputs();
    let mut flat = Vec::with_capacity(labels.len() * k);
    for l in labels {
        match (config.task, l) {
            (Task::Binary, Label::Class(c)) => flat.push(*c == 1),
            (Task::Multilabel, Label::MultiHot(v)) if v.len() == k => flat.extend(v.iter().map(|&b| b == 1)),
            _ => return Err(Error::Data(format!("label {l:?} does not fit the {:?} task", config.task))),
        }
    }
    Ok((flat, k))
}

fn report_for(config: &DownstreamConfig, probs: &[f64], labels: &[Label]) -> Result<MetricReport> {
    let (flat, k) = flatten_labels(config, labels)?;
    match config.task {
        Task::Binary => MetricReport::binary(probs, &flat),
        Task::Multilabel => MetricReport::multilabel(probs, &flat, k),
    }
}
