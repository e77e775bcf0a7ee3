//! Text-image matching network: both encoders, the absolute embedding
//! difference, and a two-logit match/mismatch head trained with
//! cross-entropy.

use log::info;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{Corpus, Vocabulary};
use crate::encoders::{stack_images, ImageEncoder, ImageEncoderConfig, TextEncoder, TextEncoderConfig};
use crate::error::{Error, Result};
use crate::layers::{Init, Linear, Mode};
use crate::metrics::MetricReport;
use crate::seed;
use crate::tensor::{AdamConfig, AdamState, ParamStore, Real, Tape, Tensor, Var};
use crate::train::{optimizer_step, LogRow, LossMeter};

pub const HEAD_PREFIX: &str = "match_head";

/// Logit index of the "match" class; index 0 is "mismatch".
pub const MATCH: usize = 1;

/// One image/report pairing. Indices point into a [`PairedData`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairedExample {
    pub image: usize,
    pub report: usize,
    pub is_match: bool,
}

/// Images and tokenized reports of a paired corpus; row `i` of each comes
/// from the same source item.
#[derive(Debug, Clone)]
pub struct PairedData<T: Real> {
    pub images: Vec<Tensor<T>>,
    pub tokens: Vec<Vec<usize>>,
}

impl<T: Real> PairedData<T> {
    pub fn from_corpus(corpus: &Corpus, vocab: &Vocabulary, max_len: usize) -> Self {
        Self {
            images: corpus.items.iter().map(|i| i.tensor()).collect(),
            tokens: corpus.items.iter().map(|i| vocab.tokenize(&i.report, max_len)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Stacked images `[B,C,H,W]`, concatenated ids and targets for `pairs`.
    pub fn batch(&self, pairs: &[PairedExample]) -> Result<(Tensor<T>, Vec<usize>, Vec<usize>)> {
        let imgs: Vec<&Tensor<T>> = pairs.iter().map(|p| &self.images[p.image]).collect();
        let ids = pairs.iter().flat_map(|p| self.tokens[p.report].iter().copied()).collect();
        let targets = pairs.iter().map(|p| usize::from(p.is_match)).collect();
        Ok((stack_images(&imgs)?, ids, targets))
    }
}

/// One true pair per item plus `round(negative_ratio * n)` negatives, in a
/// seeded shuffled order. Negative `k` pairs image `k mod n` with a report
/// drawn uniformly from the other items.
pub fn build_pairs(n: usize, negative_ratio: f64, seed: u64) -> Result<Vec<PairedExample>> {
    if n < 2 {
        return Err(Error::Data(format!("need at least 2 items to form negative pairs, got {n}")));
    }
    if !(negative_ratio > 0.0 && negative_ratio.is_finite()) {
        return Err(Error::Config {
            key: "negative_ratio".into(),
            msg: format!("must be a positive number, got {negative_ratio}"),
        });
    }
    let mut rng = seed::rng(&[seed, seed::label("pairs")]);
    let mut pairs: Vec<PairedExample> = (0..n)
        .map(|i| PairedExample {
            image: i,
            report: i,
            is_match: true,
        })
        .collect();
    let negatives = (negative_ratio * n as f64).round() as usize;
    for k in 0..negatives {
        let image = k % n;
        let mut report = rng.random_range(0..n - 1);
        if report >= image {
            report += 1;
        }
        pairs.push(PairedExample {
            image,
            report,
            is_match: false,
        });
    }
    pairs.shuffle(&mut rng);
    Ok(pairs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimNetConfig {
    pub text: TextEncoderConfig,
    pub image: ImageEncoderConfig,
    pub head_hidden: usize,
}

impl Default for TimNetConfig {
    fn default() -> Self {
        Self {
            text: TextEncoderConfig::default(),
            image: ImageEncoderConfig::default(),
            head_hidden: 32,
        }
    }
}

/// FC + ReLU + FC to two logits. The output layer starts at zero.
#[derive(Debug, Clone)]
pub struct MatchingHead {
    fc1: Linear,
    fc2: Linear,
}

impl MatchingHead {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, d_emb: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{HEAD_PREFIX}.fc1"), d_emb, hidden, Init::Default, rng),
            fc2: Linear::new(store, &format!("{HEAD_PREFIX}.fc2"), hidden, 2, Init::Zero, rng),
        }
    }

    /// `[N, d_emb] -> [N, 2]`.
    pub fn forward<T: Real>(&self, store: &ParamStore<T>, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(store, tape, x)?;
        let h = tape.relu(h);
        self.fc2.forward(store, tape, h)
    }
}

/// The matching network with its parameters.
#[derive(Debug, Clone)]
pub struct TimNet<T: Real> {
    pub config: TimNetConfig,
    pub store: ParamStore<T>,
    pub text: TextEncoder,
    pub image: ImageEncoder,
    pub head: MatchingHead,
}

impl<T: Real> TimNet<T> {
    pub fn new(config: &TimNetConfig, seed: u64) -> Result<Self> {
        if config.text.d_emb != config.image.d_emb {
            return Err(Error::Config {
                key: "d_emb".into(),
                msg: format!(
                    "text embedding width {} differs from image embedding width {}",
                    config.text.d_emb, config.image.d_emb
                ),
            });
        }
        let mut store = ParamStore::new();
        let text = TextEncoder::new(&mut store, &config.text, &mut seed::rng(&[seed, seed::label("text_init")]));
        let image = ImageEncoder::new(&mut store, &config.image, &mut seed::rng(&[seed, seed::label("image_init")]));
        let head = MatchingHead::new(
            &mut store,
            config.text.d_emb,
            config.head_hidden,
            &mut seed::rng(&[seed, seed::label("head_init")]),
        );
        Ok(Self {
            config: config.clone(),
            store,
            text,
            image,
            head,
        })
    }

    /// Match logits `[N,2]` for `N` id sequences and an `[N,C,H,W]` image batch:
    /// `head(|text(ids) - image(x)|)`.
    pub fn match_forward(&self, tape: &mut Tape<T>, ids: &[usize], images: Var, mode: Mode) -> Result<Var> {
        let vt = self.text.forward(&self.store, tape, ids, mode)?;
        let vi = self.image.forward(&self.store, tape, images, mode)?;
        if tape.shape(vt) != tape.shape(vi) {
            return Err(Error::Dimension {
                op: "match_forward",
                lhs: tape.shape(vt).to_vec(),
                rhs: tape.shape(vi).to_vec(),
            });
        }
        let d = tape.abs_diff(vt, vi)?;
        self.head.forward(&self.store, tape, d)
    }

    /// Eval-mode match probabilities for `pairs`, in order.
    pub fn match_probs(&self, data: &PairedData<T>, pairs: &[PairedExample], batch_size: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(pairs.len());
        for chunk in pairs.chunks(batch_size.max(1)) {
            let (x, ids, _) = data.batch(chunk)?;
            let mut tape = Tape::new();
            let xv = tape.leaf(&x);
            let logits = self.match_forward(&mut tape, &ids, xv, Mode::Eval)?;
            out.extend(match_probabilities(tape.value(logits)));
        }
        Ok(out)
    }
}

/// Softmax probability of the match class for each `[mismatch, match]` row.
pub fn match_probabilities<T: Real>(logits: &[T]) -> Vec<f64> {
    logits
        .chunks(2)
        .map(|r| {
            let (a, b) = (r[0].to_f64().unwrap(), r[1].to_f64().unwrap());
            1.0 / (1.0 + (a - b).exp())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub negative_ratio: f64,
    pub adam: AdamConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 16,
            negative_ratio: 1.0,
            adam: AdamConfig::default(),
        }
    }
}

/// Trains `net` on `train`, drawing fresh negatives every epoch, and logs
/// the train and held-out loss/metrics per epoch.
pub fn pretrain<T: Real>(
    net: &mut TimNet<T>,
    train: &PairedData<T>,
    val: Option<(&PairedData<T>, &[PairedExample])>,
    config: &PretrainConfig,
    seed: u64,
) -> Result<Vec<LogRow>> {
    if config.batch_size == 0 {
        return Err(Error::Config {
            key: "batch_size".into(),
            msg: "must be at least 1".into(),
        });
    }
    let mut adam = AdamState::new(config.adam);
    let mut log = Vec::new();
    for epoch in 1..=config.epochs {
        let pairs = build_pairs(train.len(), config.negative_ratio, seed::derive(&[seed, epoch as u64]))?;
        let mut meter = LossMeter::default();
        let (mut probs, mut labels) = (Vec::new(), Vec::new());
        for chunk in pairs.chunks(config.batch_size) {
            let (x, ids, targets) = train.batch(chunk)?;
            let mut tape = Tape::new();
            let xv = tape.leaf(&x);
            let logits = net.match_forward(&mut tape, &ids, xv, Mode::Train)?;
            probs.extend(match_probabilities(tape.value(logits)));
            labels.extend(chunk.iter().map(|p| p.is_match));
            let loss = tape.cross_entropy(logits, &targets)?;
            meter.add(tape.value(loss)[0].to_f64().unwrap(), chunk.len());
            optimizer_step(&mut tape, loss, &mut net.store, &mut adam)?;
        }
        let row = LogRow {
            epoch,
            split: "train".into(),
            loss: meter.mean(),
            metrics: MetricReport::binary(&probs, &labels)?,
        };
        info!("pretrain epoch {epoch} train loss {:.4}", row.loss);
        log.push(row);
        if let Some((vdata, vpairs)) = val {
            let (report, loss) = evaluate_matching_with_loss(net, vdata, vpairs, config.batch_size)?;
            info!(
                "pretrain epoch {epoch} val loss {loss:.4} auroc {}",
                crate::metrics::fmt_metric(report.auroc)
            );
            log.push(LogRow {
                epoch,
                split: "val".into(),
                loss,
                metrics: report,
            });
        }
    }
    Ok(log)
}

/// Metrics of the eval-mode match probability on `pairs`.
pub fn evaluate_matching<T: Real>(net: &TimNet<T>, data: &PairedData<T>, pairs: &[PairedExample]) -> Result<MetricReport> {
    evaluate_matching_with_loss(net, data, pairs, 64).map(|(r, _)| r)
}

fn evaluate_matching_with_loss<T: Real>(
    net: &TimNet<T>,
    data: &PairedData<T>,
    pairs: &[PairedExample],
    batch_size: usize,
) -> Result<(MetricReport, f64)> {
    if pairs.is_empty() {
        return Err(Error::Data("no pairs to evaluate".into()));
    }
    let probs = net.match_probs(data, pairs, batch_size)?;
    let labels: Vec<bool> = pairs.iter().map(|p| p.is_match).collect();
    let report = MetricReport::binary(&probs, &labels)?;
    if report.auroc.is_none() {
        return Err(Error::Undefined("auROC needs both matching and non-matching pairs"));
    }
    let loss = probs
        .iter()
        .zip(&labels)
        .map(|(&p, &l)| -(if l { p } else { 1.0 - p }).max(f64::MIN_POSITIVE).ln())
        .sum::<f64>()
        / probs.len() as f64;
    Ok((report, loss))
}
