//! Annotated image sets: the JSON manifest format and the synthetic scene generator.

mod scenes;

pub use scenes::{generate_scenes, SyntheticSceneSpec};

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{read_png, write_png, BoundingBox, Image};

/// An image with its ground-truth boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub boxes: Vec<BoundingBox>,
}

impl Sample {
    pub fn persons(&self) -> impl Iterator<Item = &BoundingBox> {
        self.boxes.iter().filter(|b| b.is_person())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    /// Image path relative to the manifest's directory.
    pub file: PathBuf,
    pub boxes: Vec<BoundingBox>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

/// Decoded manifest contents.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedDataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<Sample>,
    /// Boxes that had to be clipped to their image (or were dropped as fully outside).
    pub clipped_boxes: usize,
}

impl DatasetManifest {
    /// Parses manifest text; `origin` is used for the root directory and error messages.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let entries: Vec<ManifestEntry> =
            serde_json::from_str(text).map_err(|e| Error::parse(origin, e.to_string()))?;
        for (i, entry) in entries.iter().enumerate() {
            for (j, b) in entry.boxes.iter().enumerate() {
                b.validate().map_err(|e| {
                    Error::parse(
                        origin,
                        format!("record {i} ({}), box {j}: {e}", entry.file.display()),
                    )
                })?;
            }
        }
        let root = origin.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { root, entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.entries).expect("manifest is serializable");
        s.push('\n');
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    /// Decodes every image and clips its boxes to the frame.
    pub fn load_samples(&self) -> Result<(Vec<Sample>, usize)> {
        let mut clipped = 0;
        let mut samples = Vec::with_capacity(self.entries.len());
        for entry in &self.entries {
            let image = read_png(self.root.join(&entry.file))?;
            let (w, h) = (image.width(), image.height());
            let mut boxes = Vec::with_capacity(entry.boxes.len());
            for b in &entry.boxes {
                if b.within(w, h) {
                    boxes.push(b.clone());
                } else {
                    clipped += 1;
                    boxes.extend(b.clipped(w, h));
                }
            }
            samples.push(Sample { image, boxes });
        }
        Ok((samples, clipped))
    }
}

/// Reads a manifest and every image it lists.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<LoadedDataset> {
    let manifest = DatasetManifest::load(path)?;
    let (samples, clipped_boxes) = manifest.load_samples()?;
    Ok(LoadedDataset {
        manifest,
        samples,
        clipped_boxes,
    })
}

/// Writes `scene_NNNN.png` files and `manifest.json` into `dir`.
pub fn write_dataset(samples: &[Sample], dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let file = PathBuf::from(format!("scene_{i:04}.png"));
        write_png(dir.join(&file), &s.image)?;
        entries.push(ManifestEntry {
            file,
            boxes: s.boxes.clone(),
        });
    }
    let manifest = DatasetManifest {
        root: dir.to_path_buf(),
        entries,
    };
    manifest.save(dir.join("manifest.json"))?;
    Ok(manifest)
}
