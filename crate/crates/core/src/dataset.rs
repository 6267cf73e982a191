//! A data root: slide bundle directories plus an optional `manifest.csv`
//! assigning slides to train/val/test splits.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::slide_io::{load_slide_bundle, SlideBundle, META_FILE};
use crate::synthetic::{read_manifest, ManifestRow, Split, MANIFEST_FILE};

#[derive(Clone, Debug)]
pub struct DataRoot {
    pub dir: PathBuf,
    /// `(slide_id, split)` in manifest order, or sorted by id without a manifest.
    pub slides: Vec<(String, Split)>,
}

impl DataRoot {
    /// Without a manifest every bundle directory is treated as training data.
    pub fn open(dir: &Path) -> Result<Self> {
        if !dir.is_dir() {
            return Err(Error::NotFound(format!("data root {}", dir.display())));
        }
        let mut slides: Vec<(String, Split)> = Vec::new();
        if dir.join(MANIFEST_FILE).exists() {
            for ManifestRow { slide_id, split, .. } in read_manifest(dir)? {
                if slides.last().map(|(id, _)| id != &slide_id).unwrap_or(true) {
                    slides.push((slide_id, split));
                }
            }
        } else {
            let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
            for entry in entries {
                let entry = entry.map_err(|e| Error::io(dir, e))?;
                if entry.path().join(META_FILE).is_file() {
                    slides.push((entry.file_name().to_string_lossy().into_owned(), Split::Train));
                }
            }
            slides.sort_by(|a, b| a.0.cmp(&b.0));
        }
        Ok(Self { dir: dir.to_path_buf(), slides })
    }

    pub fn ids(&self, split: Split) -> Vec<&str> {
        self.slides.iter().filter(|(_, s)| *s == split).map(|(id, _)| id.as_str()).collect()
    }

    pub fn all_ids(&self) -> Vec<&str> {
        self.slides.iter().map(|(id, _)| id.as_str()).collect()
    }

    pub fn slide_dir(&self, slide_id: &str) -> PathBuf {
        self.dir.join(slide_id)
    }

    pub fn load(&self, slide_id: &str) -> Result<SlideBundle> {
        load_slide_bundle(&self.slide_dir(slide_id))
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<SlideBundle>> {
        self.ids(split).into_iter().map(|id| self.load(id)).collect()
    }
}
