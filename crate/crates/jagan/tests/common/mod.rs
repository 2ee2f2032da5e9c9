#![allow(dead_code)]

use std::path::Path;

use jagan::dataset::BOXES_FILE;
use jagan::io;
use jagan::sidecar::{self, FrameBoxes, FrameId};
use jagan_core::{BoundingBox, Image};

pub const TINY_CONFIG: &str = r#"
[model]
resolution = 16
base_width = 2
residual_blocks = 1
image_disc_scales = 2

[train]
batch_size = 2
max_steps = 3
eval_interval = 2
eval_samples = 4
unroll_len = 4
checkpoint_interval = 1
"#;

/// Smooth frame with a bright blob centred at (`cx`, `cy`).
pub fn frame(k: u64, w: usize, h: usize, cx: f64, cy: f64) -> Image {
    let mut data = vec![0.0; 3 * w * h];
    let phase = k as f64 * 0.7;
    for y in 0..h {
        for x in 0..w {
            let (fx, fy) = (x as f64 / w as f64, y as f64 / h as f64);
            let (dx, dy) = ((x as f64 - cx) / 6.0, (y as f64 - cy) / 7.0);
            let face = (-(dx * dx + dy * dy)).exp();
            for c in 0..3 {
                let bg =
                    0.5 * ((fx * 3.0 + phase + c as f64).sin() * (fy * 2.0 + c as f64 * 0.5).cos());
                data[(c * h + y) * w + x] = bg * (1.0 - face) + face * (0.6 - 0.3 * c as f64);
            }
        }
    }
    Image::from_planar(w, h, data)
}

/// Writes an image dataset of `n` frames, one face each.
pub fn write_image_dataset(dir: &Path, n: usize) -> BoundingBox {
    let face = BoundingBox::new(14, 10, 26, 24).unwrap();
    let mut entries = Vec::new();
    for k in 0..n {
        io::write_png(
            &dir.join(io::frame_name(k)),
            &frame(k as u64, 40, 34, 20.0, 17.0),
        )
        .unwrap();
        entries.push(FrameBoxes::new(FrameId::Index(k as u64), &[face]));
    }
    sidecar::write(&dir.join(BOXES_FILE), &entries).unwrap();
    face
}

/// Face box drifting right by one pixel every other frame.
pub fn moving_box(t: usize) -> BoundingBox {
    let x = 10 + (t / 2) as i64;
    BoundingBox::new(x, 10, x + 12, 24).unwrap()
}

/// Writes `len` frames of one moving face and a detections sidecar.
pub fn write_video(dir: &Path, len: usize) -> Vec<BoundingBox> {
    let boxes: Vec<BoundingBox> = (0..len).map(moving_box).collect();
    let mut entries = Vec::new();
    for (t, b) in boxes.iter().enumerate() {
        let cx = (b.x0 + b.x1) as f64 / 2.0;
        io::write_png(&dir.join(io::frame_name(t)), &frame(0, 48, 34, cx, 17.0)).unwrap();
        entries.push(FrameBoxes::new(FrameId::Index(t as u64), &[*b]));
    }
    sidecar::write(&dir.join(BOXES_FILE), &entries).unwrap();
    boxes
}
