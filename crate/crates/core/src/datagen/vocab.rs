use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
const PAD: &str = "<pad>";
const UNK: &str = "<unk>";

/// Lowercases, turns punctuation into spaces and splits on whitespace.
pub fn words(text: &str) -> Vec<String> {
    text.chars()
        .map(|c| {
            if c.is_alphanumeric() || c.is_whitespace() {
                c.to_lowercase().next().unwrap_or(c)
            } else {
                ' '
            }
        })
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

/// Token-to-id map; id 0 is padding, id 1 unknown, the rest are contiguous.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds from a corpus of texts; ids are assigned in sorted token order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let set: BTreeSet<String> = texts.into_iter().flat_map(words).collect();
        Self::from_tokens(set)
    }

    fn from_tokens(body: impl IntoIterator<Item = String>) -> Self {
        let mut tokens = vec![PAD.to_string(), UNK.to_string()];
        tokens.extend(body);
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Exactly `max_len` ids: truncated, then right-padded with [`PAD_ID`].
    pub fn tokenize(&self, text: &str, max_len: usize) -> Vec<usize> {
        let mut ids: Vec<usize> = words(text).iter().take(max_len).map(|w| self.id(w)).collect();
        ids.resize(max_len, PAD_ID);
        ids
    }

    /// `token<TAB>id` lines.
    pub fn to_tsv(&self) -> String {
        self.tokens
            .iter()
            .enumerate()
            .map(|(i, t)| format!("{t}\t{i}\n"))
            .collect()
    }

    pub fn from_tsv(text: &str, path: &Path) -> Result<Self> {
        let mut tokens = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let err = |msg: &str| Error::Parse {
                path: path.to_path_buf(),
                line: ln + 1,
                msg: msg.to_string(),
            };
            let (tok, id) = line.split_once('\t').ok_or_else(|| err("expected token<TAB>id"))?;
            let id: usize = id.trim().parse().map_err(|_| err("id is not an integer"))?;
            if id != tokens.len() {
                return Err(err("ids must be contiguous from 0"));
            }
            tokens.push(tok.to_string());
        }
        if tokens.len() < 2 || tokens[PAD_ID] != PAD || tokens[UNK_ID] != UNK {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                msg: "vocabulary must start with <pad> and <unk>".into(),
            });
        }
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Ok(Self { tokens, index })
    }
}
