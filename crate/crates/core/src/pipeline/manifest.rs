//! Corpus manifest: one tab-separated line per document,
//! `doc_id  writer_id  split  path`. Relative paths resolve against the
//! manifest's directory.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub doc_id: String,
    pub writer_id: String,
    pub split: Split,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    pub base_dir: PathBuf,
}

impl Manifest {
    /// Validates unique document ids and writer-disjoint splits.
    pub fn new(entries: Vec<ManifestEntry>, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut ids = BTreeSet::new();
        let mut writer_split: BTreeMap<&str, Split> = BTreeMap::new();
        for e in &entries {
            if !ids.insert(e.doc_id.as_str()) {
                return Err(Error::precondition(format!("duplicate document id '{}'", e.doc_id)));
            }
            match writer_split.insert(&e.writer_id, e.split) {
                Some(prev) if prev != e.split => {
                    return Err(Error::precondition(format!(
                        "writer '{}' appears in both train and test splits",
                        e.writer_id
                    )))
                }
                _ => {}
            }
        }
        Ok(Self {
            entries,
            base_dir: base_dir.into(),
        })
    }

    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut entries = Vec::new();
        let mut offset = 0u64;
        for line in text.split_inclusive('\n') {
            let start = offset;
            offset += line.len() as u64;
            let body = line.trim_end_matches(['\n', '\r']);
            if body.trim().is_empty() || body.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = body.split('\t').collect();
            if fields.len() != 4 || fields.iter().any(|f| f.trim().is_empty()) {
                return Err(Error::Format {
                    offset: start,
                    message: format!("expected 4 tab-separated fields, got '{body}'"),
                });
            }
            let split = match fields[2].trim() {
                "train" => Split::Train,
                "test" => Split::Test,
                other => {
                    return Err(Error::Format {
                        offset: start,
                        message: format!("split must be train or test, got '{other}'"),
                    })
                }
            };
            entries.push(ManifestEntry {
                doc_id: fields[0].trim().to_string(),
                writer_id: fields[1].trim().to_string(),
                split,
                path: PathBuf::from(fields[3].trim()),
            });
        }
        Self::new(entries, base_dir)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, base)
    }

    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|e| format!("{}\t{}\t{}\t{}\n", e.doc_id, e.writer_id, e.split, e.path.display()))
            .collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            self.base_dir.join(&entry.path)
        }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }
}
