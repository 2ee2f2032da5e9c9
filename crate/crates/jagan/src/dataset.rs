//! Training data and curated dataset directories.
//!
//! An image dataset is a directory of PNG frames with a `boxes.json`
//! sidecar; every box becomes one training sample. A sequence directory
//! holds numbered PNG frames and a `boxes.json` with one box per frame. A
//! split directory holds sequence directories.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use jagan_core::inference::FrameSequence;
use jagan_core::trainer::{Dataset, ImageSample};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::sidecar::{self, FrameBoxes, FrameId};

pub const BOXES_FILE: &str = "boxes.json";
pub const SPLITS: [&str; 3] = ["train", "validation", "test"];

pub fn load_images(dir: &Path) -> Result<Dataset> {
    let (paths, frames) = io::read_frames(dir)?;
    let boxes = sidecar::boxes_for(&sidecar::read(&dir.join(BOXES_FILE))?, &paths)?;
    let samples = frames
        .into_iter()
        .zip(boxes)
        .flat_map(|(frame, faces)| {
            faces.into_iter().map(move |face| ImageSample {
                frame: frame.clone(),
                face,
            })
        })
        .collect();
    Ok(Dataset::Images(samples))
}

/// Loads a sequence directory; every frame needs exactly one box.
pub fn load_sequence(dir: &Path) -> Result<FrameSequence> {
    let (paths, frames) = io::read_frames(dir)?;
    let boxes = sidecar::boxes_for(&sidecar::read(&dir.join(BOXES_FILE))?, &paths)?;
    let boxes = boxes
        .into_iter()
        .zip(&paths)
        .map(|(b, p)| match b.as_slice() {
            [one] => Ok(*one),
            _ => Err(Error::Invalid(format!(
                "{}: expected exactly one face box, found {}",
                p.display(),
                b.len()
            ))),
        })
        .collect::<Result<_>>()?;
    Ok(FrameSequence {
        id: io::stem(dir),
        frames,
        boxes,
    })
}

pub fn load_sequences(split_dir: &Path) -> Result<Vec<FrameSequence>> {
    io::list_dirs(split_dir)?
        .iter()
        .map(|d| load_sequence(d))
        .collect()
}

pub fn load_videos(split_dir: &Path) -> Result<Dataset> {
    Ok(Dataset::Videos(load_sequences(split_dir)?))
}

/// Writes frames and the per-frame box sidecar of one sequence.
pub fn write_sequence(dir: &Path, seq: &FrameSequence) -> Result<()> {
    io::write_frames(dir, &seq.frames)?;
    let entries: Vec<FrameBoxes> = seq
        .boxes
        .iter()
        .enumerate()
        .map(|(i, b)| FrameBoxes::new(FrameId::Index(i as u64), &[*b]))
        .collect();
    sidecar::write(&dir.join(BOXES_FILE), &entries)
}

/// Deterministic split for a sequence id: `test`, `validation` or `train`.
pub fn assign_split(id: &str, seed: u64, val_fraction: f64, test_fraction: f64) -> &'static str {
    let mut h = 0xcbf29ce484222325u64 ^ seed;
    for b in id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d049bb133111eb);
    h ^= h >> 31;
    let u = (h >> 11) as f64 / (1u64 << 53) as f64;
    if u < test_fraction {
        "test"
    } else if u < test_fraction + val_fraction {
        "validation"
    } else {
        "train"
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub sequences: usize,
    /// Face crops, one per sequence frame.
    pub faces: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    /// Frames in the source video.
    pub initial_frames: usize,
    /// Detections in the source video.
    pub total_detections: usize,
    pub splits: BTreeMap<String, SplitCounts>,
}

/// Writes `<out>/<split>/<id>/...` for every sequence plus `<out>/manifest.json`.
pub fn write_dataset(
    out: &Path,
    sequences: &[FrameSequence],
    split_of: impl Fn(&FrameSequence) -> &'static str,
    mut manifest: DatasetManifest,
) -> Result<(DatasetManifest, Vec<PathBuf>)> {
    for s in SPLITS {
        manifest.splits.entry(s.to_string()).or_default();
    }
    let mut dirs = Vec::new();
    for seq in sequences {
        let split = split_of(seq);
        let dir = out.join(split).join(&seq.id);
        write_sequence(&dir, seq)?;
        let counts = manifest.splits.entry(split.to_string()).or_default();
        counts.sequences += 1;
        counts.faces += seq.len();
        dirs.push(dir);
    }
    io::write_json(&out.join("manifest.json"), &manifest)?;
    Ok((manifest, dirs))
}
