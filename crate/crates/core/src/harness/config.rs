use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datagen::CorpusConfig;
use crate::downstream::{DownstreamConfig, FinetuneConfig};
use crate::encoders::{ImageEncoderConfig, TextEncoderConfig};
use crate::error::{Error, Result};
use crate::matcher::{PretrainConfig, TimNetConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Match,
    Binary,
    Multilabel,
}

impl FromStr for TaskKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "match" => Ok(Self::Match),
            "binary" => Ok(Self::Binary),
            "multilabel" => Ok(Self::Multilabel),
            _ => Err(format!("unknown task `{s}` (expected match, binary or multilabel)")),
        }
    }
}

/// `scratch` or `pretrained:<weight file>`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum InitSpec {
    Scratch,
    Pretrained(PathBuf),
}

impl InitSpec {
    /// Short name used in results files and seed derivation.
    pub fn label(&self) -> &'static str {
        match self {
            Self::Scratch => "scratch",
            Self::Pretrained(_) => "pretrained",
        }
    }
}

impl FromStr for InitSpec {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.split_once(':') {
            None if s == "scratch" => Ok(Self::Scratch),
            Some(("pretrained", p)) if !p.is_empty() => Ok(Self::Pretrained(PathBuf::from(p))),
            _ => Err(format!("init must be `scratch` or `pretrained:<path>`, got `{s}`")),
        }
    }
}

impl TryFrom<String> for InitSpec {
    type Error = String;
    fn try_from(s: String) -> std::result::Result<Self, String> {
        s.parse()
    }
}

impl From<InitSpec> for String {
    fn from(i: InitSpec) -> String {
        i.to_string()
    }
}

impl fmt::Display for InitSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Scratch => f.write_str("scratch"),
            Self::Pretrained(p) => write!(f, "pretrained:{}", p.display()),
        }
    }
}

/// Item counts of the four synthetic splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSizes {
    /// Paired items for matching pre-training.
    pub pretrain: usize,
    /// Held-out paired items; also the fine-tuning validation set.
    pub val: usize,
    /// Labeled pool the fine-tuning fractions are drawn from.
    pub labeled: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            pretrain: 2000,
            val: 400,
            labeled: 2000,
            test: 500,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Directory holding `pretrain/`, `val/`, `labeled/` and `test/` in the
    /// export layout. When absent the splits are generated from the seed.
    pub dir: Option<PathBuf>,
    pub sizes: SplitSizes,
    pub corpus: CorpusConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    /// Hidden width of the matching head.
    pub match_hidden: usize,
    /// Output channels of the downstream head's pointwise conv.
    pub head_channels: usize,
    /// Hidden width of the downstream head; `null` for a linear head.
    pub hidden: Option<usize>,
    pub num_classes: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            match_hidden: 32,
            head_channels: 64,
            hidden: Some(32),
            num_classes: crate::datagen::NUM_KINDS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub fractions: Vec<f64>,
    pub seeds: Vec<u64>,
    pub inits: Vec<String>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            fractions: vec![0.005, 0.01, 0.02, 0.05, 0.1, 0.3, 0.5, 1.0],
            seeds: vec![0, 1, 2],
            inits: vec!["scratch".into(), "pretrained".into()],
        }
    }
}

/// Every knob of a run. All fields default; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,
    pub text: TextEncoderConfig,
    pub image: ImageEncoderConfig,
    pub heads: HeadConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub data: DataConfig,
    pub task: TaskKind,
    pub init: InitSpec,
    pub fraction: f64,
    pub out: PathBuf,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            precision: Precision::F32,
            text: TextEncoderConfig::default(),
            image: ImageEncoderConfig::default(),
            heads: HeadConfig::default(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            data: DataConfig::default(),
            task: TaskKind::Binary,
            init: InitSpec::Scratch,
            fraction: 1.0,
            out: PathBuf::from("out"),
            sweep: SweepConfig::default(),
        }
    }
}

fn config_err(key: &str, msg: impl Into<String>) -> Error {
    Error::Config {
        key: key.into(),
        msg: msg.into(),
    }
}

impl RunConfig {
    /// Parses JSON, naming the offending key on failure.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let key = e.path().to_string();
            let inner = e.into_inner().to_string();
            config_err(&key, inner)
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn validate(&self) -> Result<()> {
        if self.text.d_emb != self.image.d_emb {
            return Err(config_err("image.d_emb", "must equal text.d_emb"));
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(config_err("fraction", format!("must lie in (0, 1], got {}", self.fraction)));
        }
        if let Some(f) = self.sweep.fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
            return Err(config_err("sweep.fractions", format!("{f} is outside (0, 1]")));
        }
        if let Some(i) = self.sweep.inits.iter().find(|i| *i != "scratch" && *i != "pretrained") {
            return Err(config_err("sweep.inits", format!("unknown init `{i}`")));
        }
        for (key, v) in [
            ("pretrain.batch_size", self.pretrain.batch_size),
            ("finetune.batch_size", self.finetune.batch_size),
            ("text.max_len", self.text.max_len),
            ("image.stages", self.image.stages),
        ] {
            if v == 0 {
                return Err(config_err(key, "must be at least 1"));
            }
        }
        if self.pretrain.negative_ratio.is_nan() || self.pretrain.negative_ratio <= 0.0 {
            return Err(config_err("pretrain.negative_ratio", "must be positive"));
        }
        let s = &self.data.sizes;
        for (key, v) in [("data.sizes.pretrain", s.pretrain), ("data.sizes.val", s.val)] {
            if v < 2 {
                return Err(config_err(key, "needs at least 2 items"));
            }
        }
        Ok(())
    }

    pub fn timnet(&self) -> TimNetConfig {
        TimNetConfig {
            text: self.text.clone(),
            image: self.image.clone(),
            head_hidden: self.heads.match_hidden,
        }
    }

    /// Downstream architecture for `task` (binary when `task` is match).
    pub fn downstream(&self) -> DownstreamConfig {
        DownstreamConfig {
            image: self.image.clone(),
            task: match self.task {
                TaskKind::Multilabel => crate::downstream::Task::Multilabel,
                _ => crate::downstream::Task::Binary,
            },
            num_classes: self.heads.num_classes,
            head_channels: self.heads.head_channels,
            hidden: self.heads.hidden,
        }
    }
}
