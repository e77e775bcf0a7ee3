use std::path::Path;

use log::info;

use super::config::{InitSpec, RunConfig, TaskKind};
use super::data::Splits;
use crate::cam::{compute_cam, compute_match_cam, Heatmap};
use crate::datagen::Corpus;
use crate::downstream::{evaluate_downstream, finetune, labeled_from_corpus, subsample_fraction, DownstreamModel, LabeledExample};
use crate::error::{Error, Result};
use crate::matcher::{build_pairs, evaluate_matching, pretrain, PairedData, PairedExample, TimNet};
use crate::metrics::MetricReport;
use crate::seed;
use crate::tensor::{Real, Tensor};
use crate::train::LogRow;
use crate::weights::{LoadReport, WeightFile};

/// Fixed held-out pairs of the validation split.
pub fn val_pairs(config: &RunConfig, n: usize) -> Result<Vec<PairedExample>> {
    build_pairs(n, config.pretrain.negative_ratio, seed::derive(&[config.seed, seed::label("val_pairs")]))
}

pub struct Pretrained<T: Real> {
    pub net: TimNet<T>,
    pub log: Vec<LogRow>,
    pub val: MetricReport,
}

pub fn run_pretrain<T: Real>(config: &RunConfig, splits: &Splits) -> Result<Pretrained<T>> {
    let max_len = config.text.max_len;
    let train = PairedData::from_corpus(&splits.pretrain, &splits.vocab, max_len);
    let val = PairedData::from_corpus(&splits.val, &splits.vocab, max_len);
    let pairs = val_pairs(config, val.len())?;
    let mut net = TimNet::new(&config.timnet(), config.seed)?;
    let log = pretrain(&mut net, &train, Some((&val, &pairs)), &config.pretrain, config.seed)?;
    let val = evaluate_matching(&net, &val, &pairs)?;
    Ok(Pretrained { net, log, val })
}

pub fn labeled<T: Real>(config: &RunConfig, corpus: &Corpus) -> Result<Vec<LabeledExample<T>>> {
    let d = config.downstream();
    labeled_from_corpus(corpus, d.task, d.num_classes)
}

pub struct FineTuned<T: Real> {
    pub model: DownstreamModel<T>,
    pub log: Vec<LogRow>,
    pub test: MetricReport,
    pub load: Option<LoadReport>,
    pub train_size: usize,
}

fn require_downstream(config: &RunConfig) -> Result<()> {
    if config.task == TaskKind::Match {
        return Err(Error::Config {
            key: "task".into(),
            msg: "fine-tuning needs task `binary` or `multilabel`".into(),
        });
    }
    Ok(())
}

/// Fine-tunes on `fraction` of the labeled split and evaluates on the test
/// split. Subsampling, initialization and batch order all derive from `seed`.
pub fn run_finetune<T: Real>(
    config: &RunConfig,
    splits: &Splits,
    weights: Option<&WeightFile>,
    fraction: f64,
    seed: u64,
) -> Result<FineTuned<T>> {
    require_downstream(config)?;
    let pool = labeled::<T>(config, &splits.labeled)?;
    let keys: Vec<_> = pool.iter().map(|e| e.label.clone()).collect();
    let idx = subsample_fraction(&keys, fraction, seed)?;
    let train: Vec<LabeledExample<T>> = idx.iter().map(|&i| pool[i].clone()).collect();
    let val = labeled::<T>(config, &splits.val)?;
    let test = labeled::<T>(config, &splits.test)?;
    let mut model = DownstreamModel::new(&config.downstream(), seed);
    let load = match weights {
        Some(w) => {
            let r = model.load_extractor(w, config.finetune.reset_bn_stats)?;
            info!("freshly initialized: {}", r.fresh.join(", "));
            Some(r)
        }
        None => None,
    };
    let log = finetune(&mut model, &train, Some(&val), &config.finetune, seed)?;
    let test = evaluate_downstream(&model, &test)?;
    Ok(FineTuned {
        model,
        log,
        test,
        load,
        train_size: train.len(),
    })
}

pub fn load_init(init: &InitSpec) -> Result<Option<WeightFile>> {
    match init {
        InitSpec::Scratch => Ok(None),
        InitSpec::Pretrained(p) => WeightFile::load(p).map(Some),
    }
}

/// Metrics of a saved model on the evaluation split: held-out pairs for
/// `match`, the test split otherwise.
pub fn run_eval<T: Real>(config: &RunConfig, splits: &Splits, weights: &WeightFile) -> Result<MetricReport> {
    match config.task {
        TaskKind::Match => {
            let mut net = TimNet::<T>::new(&config.timnet(), config.seed)?;
            weights.apply(&mut net.store, |_| true, true)?;
            let val = PairedData::from_corpus(&splits.val, &splits.vocab, config.text.max_len);
            evaluate_matching(&net, &val, &val_pairs(config, val.len())?)
        }
        _ => {
            let mut model = DownstreamModel::<T>::new(&config.downstream(), config.seed);
            weights.apply(&mut model.store, |_| true, true)?;
            evaluate_downstream(&model, &labeled::<T>(config, &splits.test)?)
        }
    }
}

/// Heatmap for one image: downstream class `class`, or the match logit
/// against `text` when the task is `match`.
pub fn run_cam<T: Real>(
    config: &RunConfig,
    splits: &Splits,
    weights: &WeightFile,
    image: &Path,
    class: usize,
    text: Option<&str>,
) -> Result<(Heatmap, crate::datagen::GrayImage)> {
    let gray = crate::datagen::GrayImage::read(image)?;
    let x: Tensor<T> = crate::datagen::gray_to_tensor(&gray);
    let heat = match config.task {
        TaskKind::Match => {
            let text = text.ok_or_else(|| Error::Config {
                key: "text".into(),
                msg: "a report text is required for a matching heatmap".into(),
            })?;
            let mut net = TimNet::<T>::new(&config.timnet(), config.seed)?;
            weights.apply(&mut net.store, |_| true, true)?;
            let ids = splits.vocab.tokenize(text, config.text.max_len);
            compute_match_cam(&net, &ids, &x)?
        }
        _ => {
            let mut model = DownstreamModel::<T>::new(&config.downstream(), config.seed);
            weights.apply(&mut model.store, |_| true, true)?;
            compute_cam(&model, &x, class)?
        }
    };
    Ok((heat, gray))
}
