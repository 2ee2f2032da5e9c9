//! Turning raw detections into training sequences: IoU tracking, scene-cut
//! rejection by difference hashing, and fixed-size crop emission.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::image::Image;
use crate::inference::FrameSequence;
use crate::math;
use crate::preprocess::{context_square, crop_with_padding, square_box, BoundingBox};

/// Intersection over union; `0` for disjoint boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    match a.intersect(b) {
        Some(i) => {
            let inter = i.area();
            inter as f64 / (a.area() + b.area() - inter) as f64
        }
        None => 0.0,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrackState {
    Active,
    Finished,
}

/// A face followed through consecutive frames.
#[derive(Clone, Debug, PartialEq)]
pub struct Track {
    pub id: u64,
    pub start_frame: usize,
    pub boxes: Vec<BoundingBox>,
    pub state: TrackState,
}

impl Track {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn last_box(&self) -> &BoundingBox {
        self.boxes.last().expect("tracks hold at least one box")
    }

    pub fn end_frame(&self) -> usize {
        self.start_frame + self.boxes.len()
    }
}

/// Greedy best-first association of active tracks (by index into `tracks`)
/// with detections: repeatedly take the highest-IoU pair at or above
/// `sigma_iou`. Ties go to the lower track, then the lower detection index.
pub fn associate(
    tracks: &[Track],
    detections: &[BoundingBox],
    sigma_iou: f64,
) -> Vec<(usize, usize)> {
    let mut candidates = Vec::new();
    for (ti, t) in tracks.iter().enumerate() {
        if t.state != TrackState::Active {
            continue;
        }
        for (di, d) in detections.iter().enumerate() {
            let v = iou(t.last_box(), d);
            if v >= sigma_iou {
                candidates.push((v, ti, di));
            }
        }
    }
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut track_used = vec![false; tracks.len()];
    let mut det_used = vec![false; detections.len()];
    let mut matches = Vec::new();
    for (_, ti, di) in candidates {
        if !track_used[ti] && !det_used[di] {
            track_used[ti] = true;
            det_used[di] = true;
            matches.push((ti, di));
        }
    }
    matches
}

/// IoU tracker state across frames.
#[derive(Clone, Debug)]
pub struct IouTracker {
    pub sigma_iou: f64,
    tracks: Vec<Track>,
    next_id: u64,
    frame: usize,
}

impl IouTracker {
    pub fn new(sigma_iou: f64) -> Self {
        Self {
            sigma_iou,
            tracks: Vec::new(),
            next_id: 0,
            frame: 0,
        }
    }

    pub fn tracks(&self) -> &[Track] {
        &self.tracks
    }

    /// Index of the next frame to be passed to [`IouTracker::step`].
    pub fn frame(&self) -> usize {
        self.frame
    }

    /// Advances one frame: matched tracks are extended, unmatched active
    /// tracks finish, unmatched detections open new tracks. Returns the
    /// matched `(track index, detection index)` pairs.
    pub fn step(&mut self, detections: &[BoundingBox]) -> Vec<(usize, usize)> {
        let matches = associate(&self.tracks, detections, self.sigma_iou);
        let mut extended = vec![false; self.tracks.len()];
        let mut used = vec![false; detections.len()];
        for &(ti, di) in &matches {
            self.tracks[ti].boxes.push(detections[di]);
            extended[ti] = true;
            used[di] = true;
        }
        for (t, ext) in self.tracks.iter_mut().zip(extended) {
            if t.state == TrackState::Active && !ext {
                t.state = TrackState::Finished;
            }
        }
        for (d, used) in detections.iter().zip(used) {
            if !used {
                self.tracks.push(Track {
                    id: self.next_id,
                    start_frame: self.frame,
                    boxes: vec![*d],
                    state: TrackState::Active,
                });
                self.next_id += 1;
            }
        }
        self.frame += 1;
        matches
    }

    /// Finishes every track and returns them all.
    pub fn finish(mut self) -> Vec<Track> {
        for t in &mut self.tracks {
            t.state = TrackState::Finished;
        }
        self.tracks
    }
}

/// 64-bit difference hash.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct DHash(pub u64);

/// Per-output-cell source weights of an exact area-average resize from `src` to `dst` samples.
fn area_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|j| {
            let lo = j as f64 * scale;
            let hi = (j + 1) as f64 * scale;
            let first = math::floor(lo) as usize;
            let last = (libm::ceil(hi) as usize).min(src);
            (first..last)
                .filter_map(|i| {
                    let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                    (overlap > 0.0).then_some((i, overlap / scale))
                })
                .collect()
        })
        .collect()
}

/// Area-averaged `out_w x out_h` reduction of a row-major plane.
fn area_resize(plane: &[f64], w: usize, h: usize, out_w: usize, out_h: usize) -> Vec<f64> {
    let xw = area_weights(w, out_w);
    let yw = area_weights(h, out_h);
    let mut out = vec![0.0; out_w * out_h];
    for (r, ys) in yw.iter().enumerate() {
        for (c, xs) in xw.iter().enumerate() {
            let mut acc = 0.0;
            for &(y, wy) in ys {
                for &(x, wx) in xs {
                    acc += wy * wx * plane[y * w + x];
                }
            }
            out[r * out_w + c] = acc;
        }
    }
    out
}

/// Luma reduced to 9x8 by area averaging; bit `(r, c)` is set when
/// `p[r][c] < p[r][c + 1]`, most significant bit first, row-major.
///
/// Reduced values are snapped to a 1e-9 grid so that flat regions compare
/// equal despite summation round-off.
pub fn dhash(frame: &Image) -> DHash {
    let small: Vec<f64> = area_resize(&frame.luma(), frame.width(), frame.height(), 9, 8)
        .into_iter()
        .map(|v| math::round(v * 1e9))
        .collect();
    let mut bits = 0u64;
    for r in 0..8 {
        for c in 0..8 {
            bits <<= 1;
            if small[r * 9 + c] < small[r * 9 + c + 1] {
                bits |= 1;
            }
        }
    }
    DHash(bits)
}

pub fn hamming(a: DHash, b: DHash) -> u32 {
    (a.0 ^ b.0).count_ones()
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct CurationParams {
    pub sigma_iou: f64,
    pub min_len: usize,
    pub max_hamming: u32,
    /// Side of the emitted crops.
    pub resolution: usize,
}

impl Default for CurationParams {
    fn default() -> Self {
        Self {
            sigma_iou: 0.5,
            min_len: 30,
            max_hamming: 10,
            resolution: 256,
        }
    }
}

/// Tracks every frame's detections and keeps tracks that are at least
/// `min_len` frames long and free of scene cuts between consecutive frames.
pub fn select_tracks(
    frames: &[Image],
    detections: &[Vec<BoundingBox>],
    params: &CurationParams,
) -> Vec<Track> {
    assert_eq!(
        frames.len(),
        detections.len(),
        "one detection list per frame"
    );
    let hashes: Vec<DHash> = frames.iter().map(dhash).collect();
    select_tracks_hashed(&hashes, detections, params)
}

/// [`select_tracks`] over precomputed frame hashes.
pub fn select_tracks_hashed(
    hashes: &[DHash],
    detections: &[Vec<BoundingBox>],
    params: &CurationParams,
) -> Vec<Track> {
    let mut tracker = IouTracker::new(params.sigma_iou);
    for dets in detections {
        tracker.step(dets);
    }
    tracker
        .finish()
        .into_iter()
        .filter(|t| t.len() >= params.min_len)
        .filter(|t| {
            let span = &hashes[t.start_frame..t.end_frame()];
            span.windows(2)
                .all(|w| hamming(w[0], w[1]) <= params.max_hamming)
        })
        .collect()
}

/// Maps `v` from source coordinates into a crop of `side` source pixels
/// starting at `origin` and rescaled to `resolution`.
fn to_crop(v: i64, origin: i64, side: i64, resolution: usize) -> i64 {
    math::round((v - origin) as f64 * resolution as f64 / side as f64) as i64
}

/// Crops one frame around a face: the context square of the squared box,
/// rescaled to `resolution`, together with the face box in crop coordinates.
pub fn crop_face(frame: &Image, face: BoundingBox, resolution: usize) -> (Image, BoundingBox) {
    let context = context_square(square_box(face));
    let (crop, _) = crop_with_padding(frame, context);
    let crop = crop.resize_bilinear(resolution, resolution);
    let side = context.width();
    let map = |v, o| to_crop(v, o, side, resolution);
    let (mut x0, mut y0) = (map(face.x0, context.x0), map(face.y0, context.y0));
    let (mut x1, mut y1) = (map(face.x1, context.x0), map(face.y1, context.y0));
    if x1 <= x0 {
        x1 = x0 + 1;
    }
    if y1 <= y0 {
        y1 = y0 + 1;
    }
    x0 = x0.max(0);
    y0 = y0.max(0);
    (crop, BoundingBox { x0, y0, x1, y1 })
}

/// Full curation pass: tracking, filtering and crop emission.
pub fn filter_sequences(
    frames: &[Image],
    detections: &[Vec<BoundingBox>],
    params: &CurationParams,
) -> Vec<FrameSequence> {
    select_tracks(frames, detections, params)
        .into_iter()
        .map(|t| {
            let (crops, boxes) = t
                .boxes
                .iter()
                .enumerate()
                .map(|(i, b)| crop_face(&frames[t.start_frame + i], *b, params.resolution))
                .unzip();
            FrameSequence {
                id: format!("track{:05}_f{:06}", t.id, t.start_frame),
                frames: crops,
                boxes,
            }
        })
        .collect()
}
