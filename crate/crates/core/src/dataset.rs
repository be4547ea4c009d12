//! Dataset manifests: which edge maps exist, what class they belong to, and
//! where the ground-truth boxes are.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{EdgeMap, Rect};
use crate::model::Label;

pub const MANIFEST_FORMAT: &str = "aotree-manifest";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestItem {
    /// Edge-map path, relative to the manifest's directory unless absolute.
    pub path: String,
    pub class: String,
    /// Positive items contain instances of `class`; negative items are
    /// background images attached to `class`.
    pub label: Label,
    #[serde(default)]
    pub boxes: Vec<Rect>,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub classes: Vec<String>,
    pub items: Vec<ManifestItem>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn new(classes: Vec<String>, items: Vec<ManifestItem>, root: PathBuf) -> Self {
        DatasetManifest { format: MANIFEST_FORMAT.into(), version: MANIFEST_VERSION, classes, items, root }
    }

    pub fn validate(&self, origin: &str) -> Result<()> {
        if self.format != MANIFEST_FORMAT {
            return Err(Error::malformed(origin, format!("format: expected {MANIFEST_FORMAT:?}, found {:?}", self.format)));
        }
        if self.version != MANIFEST_VERSION {
            return Err(Error::VersionMismatch { expected: MANIFEST_VERSION, found: self.version });
        }
        for (k, it) in self.items.iter().enumerate() {
            if !self.classes.contains(&it.class) {
                return Err(Error::malformed(origin, format!("items[{k}].class: unknown class {:?}", it.class)));
            }
            if it.label == Label::Positive && it.boxes.is_empty() {
                return Err(Error::malformed(origin, format!("items[{k}]: positive item without boxes")));
            }
            for (b, r) in it.boxes.iter().enumerate() {
                if !(r.w > 0.0 && r.h > 0.0) || ![r.x, r.y, r.w, r.h].iter().all(|v| v.is_finite()) {
                    return Err(Error::malformed(origin, format!("items[{k}].boxes[{b}]: needs finite positive extent")));
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let origin = path.display().to_string();
        let mut m: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::malformed(&origin, format!("line {}: {e}", e.line())))?;
        m.validate(&origin)?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, item: &ManifestItem) -> PathBuf {
        let p = Path::new(&item.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn load_edge_map(&self, item: &ManifestItem) -> Result<EdgeMap> {
        EdgeMap::load(&self.resolve(item))
    }

    pub fn items_in(&self, split: Split) -> impl Iterator<Item = (usize, &ManifestItem)> {
        self.items.iter().enumerate().filter(move |(_, it)| it.split == split)
    }
}
