//! Dataset manifest: one entry per patch, stored as JSON next to the rasters.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            o => Err(Error::Config(format!("unknown split `{o}` (expected train, val or test)"))),
        }
    }
}

/// One patch. Paths are relative to the dataset root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub pre: PathBuf,
    pub post: PathBuf,
    pub label: PathBuf,
    pub split: Split,
    pub event_id: String,
    /// Top-left `(row, col)` of the patch in its source scene.
    pub origin: (usize, usize),
    /// Backscatter range `(min, max)` of the source scene, in dB, used to
    /// scale the patch to `[0, 1]`.
    pub scale: (f32, f32),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub patch_size: usize,
    pub split_sizes: BTreeMap<Split, usize>,
    pub entries: Vec<ManifestEntry>,
    /// Configuration that produced the dataset.
    pub source: serde_json::Value,
}

/// `<split>/<event>_<row>_<col>.<ext>` under the `A`, `B` or `label` folder.
pub fn entry_paths(split: Split, event_id: &str, origin: (usize, usize)) -> (PathBuf, PathBuf, PathBuf) {
    let stem = format!("{event_id}_{}_{}", origin.0, origin.1);
    let sub = |dir: &str, ext: &str| Path::new(dir).join(split.as_str()).join(format!("{stem}.{ext}"));
    (sub("A", "tif"), sub("B", "tif"), sub("label", "png"))
}

impl DatasetManifest {
    pub fn new(patch_size: usize, entries: Vec<ManifestEntry>, source: serde_json::Value) -> Result<Self> {
        let mut split_sizes: BTreeMap<Split, usize> = Split::ALL.iter().map(|&s| (s, 0)).collect();
        for e in &entries {
            *split_sizes.entry(e.split).or_default() += 1;
        }
        let m = Self { patch_size, split_sizes, entries, source };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen: HashMap<&Path, Split> = HashMap::new();
        for e in &self.entries {
            for p in [&e.pre, &e.post, &e.label] {
                if let Some(prev) = seen.insert(p.as_path(), e.split) {
                    if prev != e.split {
                        return Err(Error::Data(format!("{} appears in both {prev} and {}", p.display(), e.split)));
                    }
                    return Err(Error::Data(format!("{} is listed twice", p.display())));
                }
            }
        }
        for s in Split::ALL {
            let n = self.entries.iter().filter(|e| e.split == s).count();
            if self.split_sizes.get(&s).copied().unwrap_or(0) != n {
                return Err(Error::Data(format!("recorded size of split {s} does not match its {n} entries")));
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn save(&self, root: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(root)?;
        let path = root.join(MANIFEST_FILE);
        std::fs::write(&path, self.to_json())?;
        Ok(path)
    }

    /// Load `<root>/manifest.json`.
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Error::Data(format!("cannot read manifest {}: {e}", path.display())))?;
        let m: Self = serde_json::from_str(&text)?;
        m.validate()?;
        Ok(m)
    }
}
