//! Loading externally prepared corpora.
//!
//! Layout: `<image_dir>/<id>.pgm` (P5), a reports file of
//! `id<TAB>findings text` lines, and optionally a labels file of
//! `id<TAB>comma-separated class indices` lines.

use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use log::warn;

use super::corpus::{Corpus, CorpusItem};
use super::pgm::GrayImage;
use crate::error::{Error, Result};

#[derive(Debug)]
pub struct Ingested {
    pub corpus: Corpus,
    /// Ids dropped because a counterpart (image, report or label) was missing.
    pub skipped: usize,
    pub warnings: Vec<String>,
}

fn read_text(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    String::from_utf8(bytes).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        msg: format!("not UTF-8: {e}"),
    })
}

fn tsv_lines(path: &Path) -> Result<Vec<(usize, String, String)>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, rest) = line.split_once('\t').ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: "expected id<TAB>value".into(),
        })?;
        if id.is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: "empty id".into(),
            });
        }
        out.push((i + 1, id.to_string(), rest.to_string()));
    }
    Ok(out)
}

fn parse_classes(path: &Path, line: usize, s: &str) -> Result<Vec<usize>> {
    let s = s.trim();
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|tok| {
            tok.trim().parse::<usize>().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line,
                msg: format!("class index `{tok}` is not a non-negative integer"),
            })
        })
        .collect()
}

/// Pairs images with reports (and labels when given), keyed by id, in the
/// order of the reports file.
pub fn ingest_external(image_dir: &Path, reports_file: &Path, labels_file: Option<&Path>) -> Result<Ingested> {
    let mut images: BTreeSet<String> = BTreeSet::new();
    let entries = std::fs::read_dir(image_dir).map_err(|e| Error::io(image_dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(image_dir, e))?;
        let p = entry.path();
        if p.extension().is_some_and(|e| e == "pgm") {
            if let Some(stem) = p.file_stem().and_then(|s| s.to_str()) {
                images.insert(stem.to_string());
            }
        }
    }

    let reports = tsv_lines(reports_file)?;
    let labels: Option<HashMap<String, Vec<usize>>> = match labels_file {
        Some(lf) => {
            let mut map = HashMap::new();
            for (line, id, rest) in tsv_lines(lf)? {
                map.insert(id, parse_classes(lf, line, &rest)?);
            }
            Some(map)
        }
        None => None,
    };

    let mut warnings = Vec::new();
    let mut skipped = 0;
    let mut seen = BTreeSet::new();
    let mut items = Vec::new();
    for (line, id, text) in reports {
        if !seen.insert(id.clone()) {
            return Err(Error::Parse {
                path: reports_file.to_path_buf(),
                line,
                msg: format!("duplicate id `{id}`"),
            });
        }
        if !images.contains(&id) {
            warnings.push(format!("report `{id}` has no image; skipped"));
            skipped += 1;
            continue;
        }
        let classes = match &labels {
            Some(map) => match map.get(&id) {
                Some(c) => Some(c.clone()),
                None => {
                    warnings.push(format!("`{id}` has no label line; skipped"));
                    skipped += 1;
                    continue;
                }
            },
            None => None,
        };
        let path: PathBuf = image_dir.join(format!("{id}.pgm"));
        items.push(CorpusItem {
            id,
            image: GrayImage::read(&path)?,
            report: text,
            classes,
            findings: Vec::new(),
        });
    }
    for id in images.difference(&seen) {
        warnings.push(format!("image `{id}` has no report; skipped"));
        skipped += 1;
    }
    for w in &warnings {
        warn!("{w}");
    }
    if let Some(first) = items.first() {
        let (w, h) = (first.image.width, first.image.height);
        if let Some(odd) = items.iter().find(|i| i.image.width != w || i.image.height != h) {
            return Err(Error::Data(format!(
                "image `{}` is {}x{}, expected {w}x{h}",
                odd.id, odd.image.width, odd.image.height
            )));
        }
    }
    Ok(Ingested {
        corpus: Corpus { items },
        skipped,
        warnings,
    })
}
