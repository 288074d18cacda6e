use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Split;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

/// `root/manifest.json`: scene list, fixed split lists and totals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub fps: f64,
    pub image_width: u32,
    pub image_height: u32,
    pub scenes: Vec<ManifestScene>,
    pub splits: Splits,
    pub totals: ManifestTotals,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestScene {
    pub id: String,
    pub frames: usize,
    pub objects: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

impl Splits {
    pub fn get(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ManifestTotals {
    pub frames: usize,
    pub objects: usize,
    pub train_frames: usize,
    pub test_frames: usize,
}

impl Manifest {
    pub fn read(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        if !path.is_file() {
            return Err(Error::Format(format!(
                "missing manifest {}",
                path.display()
            )));
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn write(&self, root: &Path) -> Result<()> {
        let path = root.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn scene(&self, id: &str) -> Option<&ManifestScene> {
        self.scenes.iter().find(|s| s.id == id)
    }

    pub fn split_frames(&self, split: Split) -> usize {
        self.splits
            .get(split)
            .iter()
            .filter_map(|id| self.scene(id))
            .map(|s| s.frames)
            .sum()
    }

    /// Recomputes totals from the scene list and split lists.
    pub fn recompute_totals(&mut self) {
        self.totals = ManifestTotals {
            frames: self.scenes.iter().map(|s| s.frames).sum(),
            objects: self.scenes.iter().map(|s| s.objects).sum(),
            train_frames: self.split_frames(Split::Train),
            test_frames: self.split_frames(Split::Test),
        };
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::Format(format!(
                "unsupported manifest version {}",
                self.version
            )));
        }
        if self.scenes.is_empty() {
            return Err(Error::Format("manifest lists no scenes".into()));
        }
        if !(self.fps > 0.0) || self.image_width == 0 || self.image_height == 0 {
            return Err(Error::Format(
                "manifest fps and image size must be positive".into(),
            ));
        }
        let mut ids = HashSet::new();
        for s in &self.scenes {
            if !ids.insert(s.id.as_str()) {
                return Err(Error::Format(format!("duplicate scene id `{}`", s.id)));
            }
        }
        let mut assigned = HashSet::new();
        for id in self.splits.train.iter().chain(&self.splits.test) {
            if !ids.contains(id.as_str()) {
                return Err(Error::Format(format!("split lists unknown scene `{id}`")));
            }
            if !assigned.insert(id.as_str()) {
                return Err(Error::Format(format!("scene `{id}` appears in two splits")));
            }
        }
        let frames: usize = self.scenes.iter().map(|s| s.frames).sum();
        if frames != self.totals.frames {
            return Err(Error::Format(format!(
                "scene frame counts sum to {frames}, manifest total is {}",
                self.totals.frames
            )));
        }
        let objects: usize = self.scenes.iter().map(|s| s.objects).sum();
        if objects != self.totals.objects {
            return Err(Error::Format(format!(
                "scene object counts sum to {objects}, manifest total is {}",
                self.totals.objects
            )));
        }
        let train = self.split_frames(Split::Train);
        let test = self.split_frames(Split::Test);
        if train != self.totals.train_frames || test != self.totals.test_frames {
            return Err(Error::Format(format!(
                "split frame counts {train}/{test} disagree with totals {}/{}",
                self.totals.train_frames, self.totals.test_frames
            )));
        }
        if train + test != self.totals.frames {
            return Err(Error::Format(format!(
                "split frames {train} + {test} do not sum to total {}",
                self.totals.frames
            )));
        }
        Ok(())
    }
}
