//! Face box geometry and generator conditioning.
//!
//! A detected box is squared by trimming its longer edge symmetrically, then
//! tripled around its center to form the context square. The context square is
//! cropped from the frame (out-of-frame pixels become black and are flagged in
//! the border mask), the squared face region is blacked out and flagged in the
//! anonymization mask, and everything is rescaled to the model resolution.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::image::{bilinear_taps, lerp, Image, Mask};
use crate::tensor::Tensor;

/// Value written into blacked-out and padded pixels.
pub const BLACK: f64 = -1.0;

/// Half-open pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BoundingBox {
    pub x0: i64,
    pub y0: i64,
    pub x1: i64,
    pub y1: i64,
}

impl BoundingBox {
    pub fn new(x0: i64, y0: i64, x1: i64, y1: i64) -> Result<Self> {
        if x0 < x1 && y0 < y1 {
            Ok(Self { x0, y0, x1, y1 })
        } else {
            Err(Error::InvalidBox { x0, y0, x1, y1 })
        }
    }

    pub fn width(&self) -> i64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> i64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> i64 {
        self.width() * self.height()
    }

    pub fn is_square(&self) -> bool {
        self.width() == self.height()
    }

    /// Intersection with another box, if non-empty.
    pub fn intersect(&self, other: &BoundingBox) -> Option<BoundingBox> {
        let x0 = self.x0.max(other.x0);
        let y0 = self.y0.max(other.y0);
        let x1 = self.x1.min(other.x1);
        let y1 = self.y1.min(other.y1);
        (x0 < x1 && y0 < y1).then_some(BoundingBox { x0, y0, x1, y1 })
    }

    /// Part of the box inside a `width x height` frame.
    pub fn clip_to_frame(&self, width: usize, height: usize) -> Option<BoundingBox> {
        self.intersect(&BoundingBox {
            x0: 0,
            y0: 0,
            x1: width as i64,
            y1: height as i64,
        })
    }

    pub fn contains(&self, x: i64, y: i64) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }
}

/// Squares a box by trimming the longer edge symmetrically about its center.
/// With an odd surplus the square sits half a pixel toward the lower coordinate.
pub fn square_box(b: BoundingBox) -> BoundingBox {
    let (w, h) = (b.width(), b.height());
    if w > h {
        let x0 = b.x0 + (w - h) / 2;
        BoundingBox {
            x0,
            y0: b.y0,
            x1: x0 + h,
            y1: b.y1,
        }
    } else {
        let y0 = b.y0 + (h - w) / 2;
        BoundingBox {
            x0: b.x0,
            y0,
            x1: b.x1,
            y1: y0 + w,
        }
    }
}

/// Concentric square with three times the side of `square`.
pub fn context_square(square: BoundingBox) -> BoundingBox {
    let s = square.width();
    BoundingBox {
        x0: square.x0 - s,
        y0: square.y0 - s,
        x1: square.x1 + s,
        y1: square.y1 + s,
    }
}

/// Where a [`FaceContext`] came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Provenance {
    pub frame_id: u64,
    /// Detector output.
    pub face_box: BoundingBox,
    /// Squared face box (the anonymized region), source coordinates.
    pub squared: BoundingBox,
    /// Context square, source coordinates; may exceed the frame.
    pub context: BoundingBox,
}

/// Generator conditioning for one face.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceContext {
    /// Square crop with the face region blacked out.
    pub crop: Image,
    pub border_mask: Mask,
    pub anon_mask: Mask,
    pub provenance: Provenance,
}

impl FaceContext {
    pub fn resolution(&self) -> usize {
        self.crop.width()
    }
}

/// Crops `square` out of `frame`, filling out-of-frame pixels with black.
/// Returns the crop and the border mask flagging those pixels.
pub fn crop_with_padding(frame: &Image, square: BoundingBox) -> (Image, Mask) {
    let side = square.width() as usize;
    let (fw, fh) = (frame.width() as i64, frame.height() as i64);
    let mut crop = Image::filled(side, side, BLACK);
    let mut border = Mask::new(side, side);
    for y in 0..side {
        let sy = square.y0 + y as i64;
        for x in 0..side {
            let sx = square.x0 + x as i64;
            if sx < 0 || sy < 0 || sx >= fw || sy >= fh {
                border.set(x, y, true);
            } else {
                for c in 0..3 {
                    crop.set(c, y, x, frame.get(c, sy as usize, sx as usize));
                }
            }
        }
    }
    (crop, border)
}

/// Context crop and masks at source scale (side `3 * s`), plus the crop before blackout.
pub fn extract_context_native(
    frame: &Image,
    face_box: BoundingBox,
) -> Result<(FaceContext, Image)> {
    if face_box
        .clip_to_frame(frame.width(), frame.height())
        .is_none()
    {
        return Err(Error::DetectionOutsideFrame {
            width: frame.width(),
            height: frame.height(),
        });
    }
    let squared = square_box(face_box);
    let context = context_square(squared);
    let (target, border_mask) = crop_with_padding(frame, context);
    let side = context.width() as usize;
    let s = squared.width() as usize;
    let anon_mask = Mask::from_fn(side, side, |x, y| {
        (s..2 * s).contains(&x) && (s..2 * s).contains(&y)
    });
    let crop = blackout(&target, &anon_mask);
    let provenance = Provenance {
        frame_id: 0,
        face_box,
        squared,
        context,
    };
    Ok((
        FaceContext {
            crop,
            border_mask,
            anon_mask,
            provenance,
        },
        target,
    ))
}

/// Builds the conditioning for `face_box` at `resolution` x `resolution`.
pub fn extract_context(
    frame: &Image,
    face_box: BoundingBox,
    resolution: usize,
) -> Result<FaceContext> {
    extract_training_pair(frame, face_box, resolution).map(|(ctx, _)| ctx)
}

/// Like [`extract_context`], also returning the un-blacked crop (the
/// reconstruction target during training).
pub fn extract_training_pair(
    frame: &Image,
    face_box: BoundingBox,
    resolution: usize,
) -> Result<(FaceContext, Image)> {
    let (native, target) = extract_context_native(frame, face_box)?;
    let target = target.resize_bilinear(resolution, resolution);
    let anon_mask = native.anon_mask.resize_nearest(resolution, resolution);
    let border_mask = native.border_mask.resize_nearest(resolution, resolution);
    let crop = blackout(&target, &anon_mask);
    Ok((
        FaceContext {
            crop,
            border_mask,
            anon_mask,
            provenance: native.provenance,
        },
        target,
    ))
}

fn blackout(img: &Image, mask: &Mask) -> Image {
    let mut out = img.clone();
    for y in 0..img.height() {
        for x in 0..img.width() {
            if mask.get(x, y) {
                for c in 0..3 {
                    out.set(c, y, x, BLACK);
                }
            }
        }
    }
    out
}

/// `[1, 5, h, w]` volume: crop (3), border mask (1), anonymization mask (1).
pub fn assemble_generator_input(ctx: &FaceContext) -> Result<Tensor> {
    let (w, h) = (ctx.crop.width(), ctx.crop.height());
    for (name, m) in [
        ("border", &ctx.border_mask),
        ("anonymization", &ctx.anon_mask),
    ] {
        if m.width() != w || m.height() != h {
            return Err(Error::ShapeMismatch(format!(
                "{name} mask {}x{} vs crop {w}x{h}",
                m.width(),
                m.height()
            )));
        }
    }
    let mut data = Vec::with_capacity(5 * w * h);
    data.extend_from_slice(ctx.crop.data());
    data.extend(ctx.border_mask.to_f64());
    data.extend(ctx.anon_mask.to_f64());
    Ok(Tensor::from_vec([1, 5, h, w], data))
}

/// Writes the generated face back into `frame`.
///
/// `generated` is rescaled to the context square's source size and only the
/// squared face box (clipped to the frame) is copied; every other frame pixel
/// is left untouched.
pub fn paste_back(frame: &Image, ctx: &FaceContext, generated: &Image) -> Result<Image> {
    let res = ctx.resolution();
    if generated.width() != res || generated.height() != res {
        return Err(Error::ShapeMismatch(format!(
            "generated {}x{} vs model resolution {res}",
            generated.width(),
            generated.height()
        )));
    }
    let mut out = frame.clone();
    let prov = &ctx.provenance;
    let Some(region) = prov.squared.clip_to_frame(frame.width(), frame.height()) else {
        return Ok(out);
    };
    let side = prov.context.width() as usize;
    let taps = bilinear_taps(res, side);
    for sy in region.y0..region.y1 {
        let ty = taps[(sy - prov.context.y0) as usize];
        for sx in region.x0..region.x1 {
            let tx = taps[(sx - prov.context.x0) as usize];
            for c in 0..3 {
                let top = lerp(
                    generated.get(c, ty.lo, tx.lo),
                    generated.get(c, ty.lo, tx.hi),
                    tx.frac,
                );
                let bot = lerp(
                    generated.get(c, ty.hi, tx.lo),
                    generated.get(c, ty.hi, tx.hi),
                    tx.frac,
                );
                out.set(c, sy as usize, sx as usize, lerp(top, bot, ty.frac));
            }
        }
    }
    Ok(out)
}
