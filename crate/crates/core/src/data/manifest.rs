//! Plain-text data set listings: one `image<TAB>mask` pair per line, `#`
//! comments, and an optional `# split: train|val` header.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::{load_labeled, LabeledImage};
use crate::error::{Error, Result};

const SPLIT_KEY: &str = "split:";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<(PathBuf, PathBuf)>,
    pub split: Option<Split>,
    /// Free-form comment lines, written without the leading `#`.
    pub comments: Vec<String>,
}

impl DatasetManifest {
    pub fn new(entries: Vec<(PathBuf, PathBuf)>, split: Option<Split>) -> Self {
        DatasetManifest {
            entries,
            split,
            comments: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Parse `path`. Relative entries are resolved against the manifest's
    /// directory; every referenced file must exist and no pair may repeat.
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let bad = |msg: String| Error::Manifest {
            path: path.to_path_buf(),
            msg,
        };
        let mut manifest = DatasetManifest::default();
        let mut seen = HashSet::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                let comment = comment.trim();
                match comment.strip_prefix(SPLIT_KEY) {
                    Some(split) => manifest.split = Some(split.trim().parse().map_err(bad)?),
                    None => manifest.comments.push(comment.to_string()),
                }
                continue;
            }
            let (image, mask) = line
                .split_once('\t')
                .ok_or_else(|| bad(format!("line {}: expected `image<TAB>mask`", lineno + 1)))?;
            let pair = (base.join(image.trim()), base.join(mask.trim()));
            for file in [&pair.0, &pair.1] {
                if !file.is_file() {
                    return Err(bad(format!("line {}: {} does not exist", lineno + 1, file.display())));
                }
            }
            if !seen.insert(pair.clone()) {
                return Err(bad(format!("line {}: duplicate pair", lineno + 1)));
            }
            manifest.entries.push(pair);
        }
        Ok(manifest)
    }

    /// Write the manifest; entries below its directory are stored relative.
    pub fn write(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new(""));
        let rel = |p: &Path| -> String { p.strip_prefix(base).unwrap_or(p).to_string_lossy().into_owned() };
        let mut out = String::new();
        for c in &self.comments {
            out.push_str(&format!("# {c}\n"));
        }
        if let Some(split) = self.split {
            out.push_str(&format!("# {SPLIT_KEY} {split}\n"));
        }
        for (image, mask) in &self.entries {
            out.push_str(&format!("{}\t{}\n", rel(image), rel(mask)));
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load_all(&self) -> Result<Vec<LabeledImage>> {
        use rayon::prelude::*;
        self.entries.par_iter().map(|(i, m)| load_labeled(i, m)).collect()
    }
}
