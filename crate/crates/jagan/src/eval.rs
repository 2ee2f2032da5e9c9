//! Metric evaluation over frame directories.

use std::collections::BTreeMap;
use std::path::Path;

use jagan_core::curation::crop_face;
use jagan_core::metrics::{
    fid, fvd, idi_from_embeddings, round2, EmbeddingVideo, FaceEmbedder, IdiReport,
    RandomProjection,
};
use jagan_core::{BoundingBox, Image};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sidecar;
use crate::{dataset, io};

/// Side of the face crops fed to [`ProjectionEmbedder`].
pub const EMBED_CROP: usize = 32;
pub const EMBED_DIM: usize = 128;

/// Identity-embedding stand-in: a random projection of the face crop.
#[derive(Clone, Debug)]
pub struct ProjectionEmbedder {
    projection: RandomProjection,
}

impl ProjectionEmbedder {
    pub fn new(seed: u64) -> Self {
        Self {
            projection: RandomProjection::for_images(seed, EMBED_CROP, EMBED_CROP, EMBED_DIM),
        }
    }
}

impl FaceEmbedder for ProjectionEmbedder {
    fn embed(&self, frame: &Image, face: BoundingBox) -> Vec<f64> {
        let (crop, _) = crop_face(frame, face, EMBED_CROP);
        let v = self
            .projection
            .project(crop.data())
            .expect("crop matches the projection size");
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.into_iter().map(|x| x / norm).collect()
        } else {
            v
        }
    }
}

/// Where identity embeddings come from.
#[derive(Clone, Debug, PartialEq)]
pub enum EmbeddingSource {
    /// Random-projection embedder over boxes from each sequence's sidecar.
    Projection(u64),
    /// Precomputed embeddings: `{"real": {seq: [vec | null, ...]}, "generated": {...}}`.
    File(std::path::PathBuf),
}

impl EmbeddingSource {
    /// Parses `projection`, `projection:<seed>` or `file:<path>`.
    pub fn parse(spec: &str, default_seed: u64) -> Result<Self> {
        match spec.split_once(':') {
            Some(("file", path)) => Ok(Self::File(path.into())),
            Some(("projection", seed)) => seed
                .parse()
                .map(Self::Projection)
                .map_err(|_| Error::Invalid(format!("bad projection seed {seed:?}"))),
            None if spec == "projection" => Ok(Self::Projection(default_seed)),
            _ => Err(Error::Invalid(format!(
                "unknown embedding provider {spec:?}; use projection[:seed] or file:<path>"
            ))),
        }
    }
}

#[derive(Clone, Debug, Default, Deserialize)]
pub struct EmbeddingFile {
    pub real: BTreeMap<String, EmbeddingVideo>,
    pub generated: BTreeMap<String, EmbeddingVideo>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IdiOutput {
    pub real_median: f64,
    pub gen_median: f64,
    /// Rounded to two decimals.
    pub idi: f64,
    pub skipped_pairs: usize,
    pub sequences: usize,
}

impl From<&IdiReport> for IdiOutput {
    fn from(r: &IdiReport) -> Self {
        Self {
            real_median: r.real_median,
            gen_median: r.gen_median,
            idi: round2(r.idi),
            skipped_pairs: r.skipped_pairs,
            sequences: 0,
        }
    }
}

fn sequence_names(dir: &Path) -> Result<Vec<String>> {
    Ok(io::list_dirs(dir)?.iter().map(|d| io::stem(d)).collect())
}

fn project_sequence(dir: &Path, embedder: &ProjectionEmbedder) -> Result<EmbeddingVideo> {
    let (paths, frames) = io::read_frames(dir)?;
    let boxes = sidecar::boxes_for(&sidecar::read(&dir.join(dataset::BOXES_FILE))?, &paths)?;
    Ok(frames
        .iter()
        .zip(boxes)
        .map(|(f, b)| b.first().map(|&b| embedder.embed(f, b)))
        .collect())
}

/// IdI between two split directories holding the same sequence names.
pub fn idi(real: &Path, generated: &Path, source: &EmbeddingSource) -> Result<IdiOutput> {
    let names = sequence_names(real)?;
    let gen_names = sequence_names(generated)?;
    if names != gen_names {
        return Err(Error::Invalid(
            "real and generated directories hold different sequences".into(),
        ));
    }
    let (r, g): (Vec<EmbeddingVideo>, Vec<EmbeddingVideo>) = match source {
        EmbeddingSource::Projection(seed) => {
            let e = ProjectionEmbedder::new(*seed);
            let r = names
                .iter()
                .map(|n| project_sequence(&real.join(n), &e))
                .collect::<Result<_>>()?;
            let g = names
                .iter()
                .map(|n| project_sequence(&generated.join(n), &e))
                .collect::<Result<_>>()?;
            (r, g)
        }
        EmbeddingSource::File(path) => {
            let file: EmbeddingFile = io::read_json(path)?;
            let pick = |m: &BTreeMap<String, EmbeddingVideo>, n: &String| {
                m.get(n).cloned().ok_or_else(|| {
                    Error::Invalid(format!(
                        "{}: no embeddings for sequence {n}",
                        path.display()
                    ))
                })
            };
            let r = names
                .iter()
                .map(|n| pick(&file.real, n))
                .collect::<Result<_>>()?;
            let g = names
                .iter()
                .map(|n| pick(&file.generated, n))
                .collect::<Result<_>>()?;
            (r, g)
        }
    };
    let report = idi_from_embeddings(&r, &g)?;
    Ok(IdiOutput {
        sequences: names.len(),
        ..IdiOutput::from(&report)
    })
}

fn resized(frames: Vec<Image>, size: usize) -> Vec<Image> {
    frames
        .into_iter()
        .map(|f| {
            if f.width() == size && f.height() == size {
                f
            } else {
                f.resize_bilinear(size, size)
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FrechetOutput {
    pub metric: &'static str,
    pub value: f64,
    pub real_items: usize,
    pub generated_items: usize,
    pub feature_dim: usize,
}

/// FID over two image directories with a fixed-seed projection extractor.
pub fn fid_dirs(
    real: &Path,
    generated: &Path,
    size: usize,
    dim: usize,
    seed: u64,
) -> Result<FrechetOutput> {
    let r = resized(io::read_frames(real)?.1, size);
    let g = resized(io::read_frames(generated)?.1, size);
    let value = fid(&r, &g, &RandomProjection::for_images(seed, size, size, dim))?;
    Ok(FrechetOutput {
        metric: "fid",
        value,
        real_items: r.len(),
        generated_items: g.len(),
        feature_dim: dim,
    })
}

/// FVD over two split directories; clips are the first `frames` frames of each sequence.
pub fn fvd_dirs(
    real: &Path,
    generated: &Path,
    size: usize,
    dim: usize,
    frames: Option<usize>,
    seed: u64,
) -> Result<FrechetOutput> {
    let load = |dir: &Path| -> Result<Vec<Vec<Image>>> {
        io::list_dirs(dir)?
            .iter()
            .map(|d| Ok(resized(io::read_frames(d)?.1, size)))
            .collect()
    };
    let (r, g) = (load(real)?, load(generated)?);
    let shortest = r.iter().chain(&g).map(Vec::len).min().unwrap_or(0);
    let len = frames.unwrap_or(shortest);
    if len == 0 || len > shortest {
        return Err(Error::Invalid(format!(
            "clip length {len} not available; shortest sequence has {shortest} frames"
        )));
    }
    let clip = |v: Vec<Vec<Image>>| -> Vec<Vec<Image>> {
        v.into_iter()
            .map(|mut s| {
                s.truncate(len);
                s
            })
            .collect()
    };
    let (r, g) = (clip(r), clip(g));
    let value = fvd(
        &r,
        &g,
        &RandomProjection::for_clips(seed, len, size, size, dim),
    )?;
    Ok(FrechetOutput {
        metric: "fvd",
        value,
        real_items: r.len(),
        generated_items: g.len(),
        feature_dim: dim,
    })
}
