//! On-disk scene sets: one RIMG file and one JSON-lines GT file per scene,
//! listed in `manifest.json`.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rangeview::io::{decode_rimg, encode_rimg, parse_records, write_records, BoxRecord};
use rangeview::{Box7, RangeImage64};
use serde::{Deserialize, Serialize};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneEntry {
    pub name: String,
    pub seed: u64,
    pub image: String,
    pub gt: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub class: String,
    pub scenes: Vec<SceneEntry>,
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub entry: SceneEntry,
    pub image: RangeImage64,
    pub boxes: Vec<Box7>,
}

pub fn scene_name(k: usize) -> String {
    format!("scene_{k:04}")
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

pub fn read_json<D: serde::de::DeserializeOwned>(path: &Path) -> Result<D> {
    let text = read_text(path)?;
    rangeview::io::parse_json(&text).with_context(|| format!("in {}", path.display()))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn read_boxes(path: &Path) -> Result<Vec<BoxRecord>> {
    let text = read_text(path)?;
    parse_records(&text).with_context(|| format!("in {}", path.display()))
}

pub fn records_bytes(records: &[BoxRecord]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_records(&mut buf, records)?;
    Ok(buf)
}

pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let manifest = read_json(&dir.join(MANIFEST))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    pub fn load(&self, entry: &SceneEntry) -> Result<Scene> {
        let ipath = self.dir.join(&entry.image);
        let bytes = fs::read(&ipath).with_context(|| format!("reading {}", ipath.display()))?;
        let image = decode_rimg(&bytes).with_context(|| format!("in {}", ipath.display()))?;
        let boxes = read_boxes(&self.dir.join(&entry.gt))?
            .iter()
            .map(|r| r.to_box())
            .collect::<rangeview::Result<Vec<_>>>()
            .with_context(|| format!("in {}", entry.gt))?;
        Ok(Scene {
            entry: entry.clone(),
            image,
            boxes,
        })
    }

    pub fn load_all(&self) -> Result<Vec<Scene>> {
        self.manifest.scenes.iter().map(|e| self.load(e)).collect()
    }
}

/// Writes scenes and their manifest into `dir`, creating it if needed.
pub fn write_dataset(dir: &Path, class: &str, scenes: &[Scene]) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for s in scenes {
        write_file(&dir.join(&s.entry.image), &encode_rimg(&s.image))?;
        let recs: Vec<BoxRecord> = s.boxes.iter().map(|b| BoxRecord::new(b, class, None)).collect();
        write_file(&dir.join(&s.entry.gt), &records_bytes(&recs)?)?;
    }
    let manifest = Manifest {
        class: class.to_string(),
        scenes: scenes.iter().map(|s| s.entry.clone()).collect(),
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    write_file(&dir.join(MANIFEST), text.as_bytes())
}

pub fn entry_for(name: String, seed: u64) -> SceneEntry {
    SceneEntry {
        image: format!("{name}.rimg"),
        gt: format!("{name}.gt.jsonl"),
        name,
        seed,
    }
}
