use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::grammar::ReportGrammar;
use super::pgm::GrayImage;
use super::scene::{Finding, FindingKind, SceneConfig, SceneSpec};
use super::vocab::Vocabulary;
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{Real, Tensor};

pub const NUM_KINDS: usize = FindingKind::ALL.len();

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub abnormal_prob: f64,
    pub scene: SceneConfig,
    pub grammar: ReportGrammar,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            abnormal_prob: 0.5,
            scene: SceneConfig::default(),
            grammar: ReportGrammar::default(),
        }
    }
}

/// One image with its findings report and (optionally) its class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusItem {
    pub id: String,
    pub image: GrayImage,
    pub report: String,
    /// Indices of the finding kinds present; `None` when unlabeled.
    pub classes: Option<Vec<usize>>,
    /// Ground-truth scene findings (synthetic data only).
    pub findings: Vec<Finding>,
}

impl CorpusItem {
    pub fn binary_label(&self) -> Option<usize> {
        self.classes.as_ref().map(|c| usize::from(!c.is_empty()))
    }

    pub fn multi_hot(&self, k: usize) -> Option<Vec<u8>> {
        self.classes.as_ref().map(|c| {
            let mut v = vec![0u8; k];
            for &i in c {
                if i < k {
                    v[i] = 1;
                }
            }
            v
        })
    }

    /// `[1,H,W]` tensor with gray levels scaled to `[0,1]`.
    pub fn tensor<T: Real>(&self) -> Tensor<T> {
        gray_to_tensor(&self.image)
    }
}

pub fn gray_to_tensor<T: Real>(img: &GrayImage) -> Tensor<T> {
    let data = img.pixels.iter().map(|&p| T::lit(p as f64 / 255.0)).collect();
    Tensor::new(&[1, img.height, img.width], data).expect("image dims")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub items: Vec<CorpusItem>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    items: usize,
    abnormal: usize,
    seed: Option<u64>,
    config: Option<CorpusConfig>,
}

impl Corpus {
    /// Deterministic synthetic corpus. Item `i` draws from its own stream
    /// derived from `(seed, i)`.
    pub fn generate(n: usize, seed: u64, config: &CorpusConfig) -> Result<Self> {
        if n < 2 {
            return Err(Error::Data(format!("corpus needs at least 2 items, asked for {n}")));
        }
        let items = (0..n)
            .map(|i| {
                let mut rng = seed::rng(&[seed, seed::label("scene"), i as u64]);
                let abnormal = rand::Rng::random::<f64>(&mut rng) < config.abnormal_prob;
                let scene = SceneSpec::sample(&config.scene, abnormal, &mut rng);
                let pixels = scene.render(&config.scene, &mut rng);
                let report = config.grammar.render(&scene, &mut rng);
                let mut classes: Vec<usize> = scene.findings.iter().map(|f| f.kind.index()).collect();
                classes.sort_unstable();
                classes.dedup();
                CorpusItem {
                    id: format!("{i:06}"),
                    image: GrayImage::new(config.scene.width, config.scene.height, pixels),
                    report,
                    classes: Some(classes),
                    findings: scene.findings,
                }
            })
            .collect();
        Ok(Self { items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::build(self.items.iter().map(|i| i.report.as_str()))
    }

    /// Writes `images/<id>.pgm`, `reports.tsv`, `labels.tsv`, `vocab.tsv`
    /// and `manifest.json` under `dir`.
    pub fn export(&self, dir: &Path, vocab: &Vocabulary, seed: Option<u64>, config: Option<&CorpusConfig>) -> Result<()> {
        let img_dir = dir.join("images");
        std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
        let mut reports = String::new();
        let mut labels = String::new();
        for item in &self.items {
            item.image.write(&img_dir.join(format!("{}.pgm", item.id)))?;
            let text = item.report.replace(['\t', '\n'], " ");
            let _ = writeln!(reports, "{}\t{}", item.id, text);
            if let Some(c) = &item.classes {
                let list: Vec<String> = c.iter().map(usize::to_string).collect();
                let _ = writeln!(labels, "{}\t{}", item.id, list.join(","));
            }
        }
        let write = |name: &str, body: &str| {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))
        };
        write("reports.tsv", &reports)?;
        write("labels.tsv", &labels)?;
        write("vocab.tsv", &vocab.to_tsv())?;
        let manifest = Manifest {
            items: self.items.len(),
            abnormal: self.items.iter().filter(|i| i.binary_label() == Some(1)).count(),
            seed,
            config: config.cloned(),
        };
        write("manifest.json", &(serde_json::to_string_pretty(&manifest)? + "\n"))
    }

    /// Items at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            items: indices.iter().map(|&i| self.items[i].clone()).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_corpus() {
        let cfg = CorpusConfig::default();
        let a = Corpus::generate(20, 3, &cfg).unwrap();
        let b = Corpus::generate(20, 3, &cfg).unwrap();
        let c = Corpus::generate(20, 4, &cfg).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn too_small_corpus_is_rejected() {
        assert!(Corpus::generate(1, 0, &CorpusConfig::default()).is_err());
    }

    #[test]
    fn normal_scene_has_zero_labels() {
        let corpus = Corpus::generate(50, 9, &CorpusConfig::default()).unwrap();
        let normal = corpus.items.iter().find(|i| i.findings.is_empty()).unwrap();
        assert_eq!(normal.binary_label(), Some(0));
        assert_eq!(normal.multi_hot(NUM_KINDS), Some(vec![0, 0, 0]));
    }
}
