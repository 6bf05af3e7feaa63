//! Manifest + captions JSON-lines + SFAT binary, loaded as one dataset.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataio::sfat::{read_sfat, write_sfat, Dims, ImageRecord};
use crate::dataio::vocab::{tokenize, Vocabulary};
use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub dims: Dims,
    /// Path to the SFAT binary, relative to the manifest's directory.
    pub features: String,
    pub splits: Splits,
    /// Path to the captions JSON-lines file, relative to the manifest.
    pub captions: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionLine {
    pub image_id: String,
    pub captions: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
    All,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "all" => Ok(Split::All),
            other => Err(Error::Invalid(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub records: Vec<ImageRecord>,
    pub vocab: Vocabulary,
}

impl Dataset {
    pub fn get(&self, id: &str) -> Option<&ImageRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn split(&self, split: Split) -> Vec<&ImageRecord> {
        let ids: &[String] = match split {
            Split::Train => &self.manifest.splits.train,
            Split::Val => &self.manifest.splits.val,
            Split::Test => &self.manifest.splits.test,
            Split::All => return self.records.iter().collect(),
        };
        let wanted: HashSet<&str> = ids.iter().map(String::as_str).collect();
        self.records
            .iter()
            .filter(|r| wanted.contains(r.id.as_str()))
            .collect()
    }

    /// Re-encodes every caption with `vocab` (e.g. a checkpoint's).
    pub fn set_vocab(&mut self, vocab: Vocabulary) {
        for r in &mut self.records {
            r.captions = r.references.iter().map(|t| vocab.encode_caption(t)).collect();
        }
        self.vocab = vocab;
    }

    /// Largest concept id + 1 over all records.
    pub fn concept_id_bound(&self) -> usize {
        self.records
            .iter()
            .flat_map(|r| r.concepts.iter().map(|&(c, _)| c as usize + 1))
            .max()
            .unwrap_or(1)
    }
}

/// Loads manifest, features and captions. The vocabulary is built from the
/// train split's captions (all captions when the split is empty).
pub fn load_dataset(manifest_path: &Path, min_count: usize) -> Result<Dataset> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(manifest_path)?)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Version {
            format: "manifest",
            version: manifest.version,
        });
    }
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let bytes = fs::read(dir.join(&manifest.features))?;
    let mut records = read_sfat(&bytes, &manifest.dims)?;

    let mut captions: HashMap<String, Vec<String>> = HashMap::new();
    let reader = BufReader::new(fs::File::open(dir.join(&manifest.captions))?);
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: CaptionLine = serde_json::from_str(&line)?;
        captions.entry(entry.image_id).or_default().extend(entry.captions);
    }
    for r in &mut records {
        r.raw_captions = captions.remove(&r.id).unwrap_or_default();
        r.references = r.raw_captions.iter().map(|c| tokenize(c)).collect();
    }
    if let Some(orphan) = captions.keys().next() {
        return Err(Error::Invalid(format!(
            "captions reference unknown image '{orphan}'"
        )));
    }
    let known: HashSet<&str> = records.iter().map(|r| r.id.as_str()).collect();
    let s = &manifest.splits;
    if let Some(bad) = s.train.iter().chain(&s.val).chain(&s.test).find(|id| !known.contains(id.as_str())) {
        return Err(Error::Invalid(format!("split references unknown image '{bad}'")));
    }

    let train: HashSet<&str> = manifest.splits.train.iter().map(String::as_str).collect();
    let vocab_source: Vec<Vec<String>> = records
        .iter()
        .filter(|r| train.is_empty() || train.contains(r.id.as_str()))
        .flat_map(|r| r.references.iter().cloned())
        .collect();
    let vocab = Vocabulary::build(&vocab_source, min_count);
    let mut ds = Dataset {
        manifest,
        records,
        vocab: vocab.clone(),
    };
    ds.set_vocab(vocab);
    Ok(ds)
}

/// Paths written by [`save_dataset`].
#[derive(Clone, Debug)]
pub struct SavedPaths {
    pub manifest: PathBuf,
    pub features: PathBuf,
    pub captions: PathBuf,
}

/// Writes `manifest.json`, `features.sfat` and `captions.jsonl` into `dir`.
pub fn save_dataset(
    dir: &Path,
    records: &[ImageRecord],
    dims: Dims,
    splits: Splits,
) -> Result<SavedPaths> {
    fs::create_dir_all(dir)?;
    let paths = SavedPaths {
        manifest: dir.join("manifest.json"),
        features: dir.join("features.sfat"),
        captions: dir.join("captions.jsonl"),
    };
    fs::write(&paths.features, write_sfat(records, &dims)?)?;

    let mut caps = Vec::new();
    for r in records {
        let line = CaptionLine {
            image_id: r.id.clone(),
            captions: r.raw_captions.clone(),
        };
        serde_json::to_writer(&mut caps, &line)?;
        caps.write_all(b"\n")?;
    }
    fs::write(&paths.captions, caps)?;

    let manifest = Manifest {
        version: MANIFEST_VERSION,
        dims,
        features: "features.sfat".into(),
        splits,
        captions: "captions.jsonl".into(),
    };
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    fs::write(&paths.manifest, json)?;
    Ok(paths)
}
