//! Per-frame face box sidecars: `{"frame": <id>, "boxes": [[x0, y0, x1, y1], ...]}`.

use std::path::{Path, PathBuf};

use jagan_core::BoundingBox;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;

/// A frame identifier: a frame number or a file stem.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FrameId {
    Index(u64),
    Name(String),
}

impl FrameId {
    /// Whether this id refers to the frame stored at `path`.
    pub fn matches(&self, path: &Path) -> bool {
        let stem = io::stem(path);
        match self {
            FrameId::Index(i) => io::frame_number(&stem) == Some(*i),
            FrameId::Name(n) => {
                *n == stem
                    || path.file_name().is_some_and(|f| f.to_string_lossy() == *n)
                    || n.parse::<u64>()
                        .is_ok_and(|i| io::frame_number(&stem) == Some(i))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameBoxes {
    pub frame: FrameId,
    pub boxes: Vec<[i64; 4]>,
}

impl FrameBoxes {
    pub fn new(frame: FrameId, boxes: &[BoundingBox]) -> Self {
        Self {
            frame,
            boxes: boxes.iter().map(|b| [b.x0, b.y0, b.x1, b.y1]).collect(),
        }
    }

    pub fn bounding_boxes(&self) -> Result<Vec<BoundingBox>> {
        self.boxes
            .iter()
            .map(|&[x0, y0, x1, y1]| Ok(BoundingBox::new(x0, y0, x1, y1)?))
            .collect()
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum OneOrMany {
    One(FrameBoxes),
    Many(Vec<FrameBoxes>),
}

/// Reads a sidecar holding one entry or a list of entries.
pub fn read(path: &Path) -> Result<Vec<FrameBoxes>> {
    Ok(match io::read_json::<OneOrMany>(path)? {
        OneOrMany::One(e) => vec![e],
        OneOrMany::Many(v) => v,
    })
}

pub fn write(path: &Path, entries: &[FrameBoxes]) -> Result<()> {
    io::write_json(path, &entries)
}

/// Boxes for each frame in `frames`; frames without an entry get none.
pub fn boxes_for(entries: &[FrameBoxes], frames: &[PathBuf]) -> Result<Vec<Vec<BoundingBox>>> {
    for e in entries {
        if !frames.iter().any(|f| e.frame.matches(f)) {
            return Err(Error::Invalid(format!(
                "sidecar entry for unknown frame {:?}",
                e.frame
            )));
        }
    }
    frames
        .iter()
        .map(|f| {
            let mut boxes = Vec::new();
            for e in entries.iter().filter(|e| e.frame.matches(f)) {
                boxes.extend(e.bounding_boxes()?);
            }
            Ok(boxes)
        })
        .collect()
}
