use std::path::Path;

use log::info;

use super::config::RunConfig;
use crate::datagen::{ingest_external, Corpus, Vocabulary};
use crate::error::{Error, Result};
use crate::seed;

pub const SPLITS: [&str; 4] = ["pretrain", "val", "labeled", "test"];

/// The four corpora of a run plus the vocabulary built on the pre-training
/// reports.
#[derive(Debug, Clone)]
pub struct Splits {
    pub pretrain: Corpus,
    pub val: Corpus,
    pub labeled: Corpus,
    pub test: Corpus,
    pub vocab: Vocabulary,
}

/// Seed of a generated split.
pub fn split_seed(base: u64, split: &str) -> u64 {
    seed::derive(&[base, seed::label(split)])
}

fn generate(config: &RunConfig) -> Result<Splits> {
    let s = &config.data.sizes;
    let make = |name: &str, n: usize| Corpus::generate(n, split_seed(config.seed, name), &config.data.corpus);
    let pretrain = make("pretrain", s.pretrain)?;
    let vocab = pretrain.vocabulary();
    Ok(Splits {
        val: make("val", s.val)?,
        labeled: make("labeled", s.labeled.max(2))?,
        test: make("test", s.test.max(2))?,
        pretrain,
        vocab,
    })
}

fn ingest(dir: &Path) -> Result<Splits> {
    let load = |name: &str| -> Result<Corpus> {
        let d = dir.join(name);
        let labels = d.join("labels.tsv");
        let got = ingest_external(
            &d.join("images"),
            &d.join("reports.tsv"),
            labels.exists().then_some(labels.as_path()),
        )?;
        if got.skipped > 0 {
            info!("{name}: skipped {} ids without counterparts", got.skipped);
        }
        Ok(got.corpus)
    };
    let pretrain = load("pretrain")?;
    let vocab_path = dir.join("pretrain").join("vocab.tsv");
    let vocab = if vocab_path.exists() {
        let text = std::fs::read_to_string(&vocab_path).map_err(|e| Error::io(&vocab_path, e))?;
        Vocabulary::from_tsv(&text, &vocab_path)?
    } else {
        pretrain.vocabulary()
    };
    Ok(Splits {
        val: load("val")?,
        labeled: load("labeled")?,
        test: load("test")?,
        pretrain,
        vocab,
    })
}

pub fn load_splits(config: &RunConfig) -> Result<Splits> {
    let splits = match &config.data.dir {
        Some(dir) => ingest(dir)?,
        None => generate(config)?,
    };
    if splits.vocab.len() > config.text.vocab_size {
        return Err(Error::Config {
            key: "text.vocab_size".into(),
            msg: format!("vocabulary has {} tokens but the embedding table holds {}", splits.vocab.len(), config.text.vocab_size),
        });
    }
    Ok(splits)
}

/// Writes every generated split to `<out>/<split>/` in the export layout.
pub fn export_splits(config: &RunConfig, splits: &Splits, out: &Path) -> Result<()> {
    for (name, corpus) in SPLITS.iter().zip([&splits.pretrain, &splits.val, &splits.labeled, &splits.test]) {
        let seed = config.data.dir.is_none().then(|| split_seed(config.seed, name));
        corpus.export(&out.join(name), &splits.vocab, seed, Some(&config.data.corpus))?;
    }
    Ok(())
}
