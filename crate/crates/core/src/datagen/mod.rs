//! Synthetic paired corpus (procedural images + template reports),
//! tokenization, and ingestion of external corpora.

mod corpus;
mod grammar;
mod ingest;
mod pgm;
mod scene;
mod vocab;

pub use corpus::{gray_to_tensor, Corpus, CorpusConfig, CorpusItem, NUM_KINDS};
pub use grammar::{kind_words, ReportGrammar};
pub use ingest::{ingest_external, Ingested};
pub use pgm::GrayImage;
pub use scene::{Blob, Finding, FindingKind, Location, Placement, SceneConfig, SceneSpec, Severity};
pub use vocab::{words, Vocabulary, PAD_ID, UNK_ID};
