//! Planar RGB images in `[-1, 1]` and binary masks.

use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::tensor::Tensor;

/// Planar (channel-major) 3-channel image with values nominally in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            data: vec![value; 3 * width * height],
        }
    }

    /// Builds an image from planar data (`3 * height * width` values).
    pub fn from_planar(width: usize, height: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), 3 * width * height, "planar buffer size");
        Self {
            width,
            height,
            data,
        }
    }

    /// Maps interleaved 8-bit RGB through `v = p / 127.5 - 1`.
    pub fn from_rgb8(width: usize, height: usize, rgb: &[u8]) -> Self {
        assert_eq!(rgb.len(), 3 * width * height, "rgb buffer size");
        let plane = width * height;
        let mut data = vec![0.0; 3 * plane];
        for (i, px) in rgb.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * plane + i] = px[c] as f64 / 127.5 - 1.0;
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    /// Inverse of [`Image::from_rgb8`], rounding and clamping to `0..=255`.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let plane = self.width * self.height;
        let mut out = vec![0u8; 3 * plane];
        for i in 0..plane {
            for c in 0..3 {
                let v = math::round((self.data[c * plane + i] + 1.0) * 127.5);
                out[3 * i + c] = v.clamp(0.0, 255.0) as u8;
            }
        }
        out
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    /// Bilinear resampling with half-pixel centers. Same-size resizes copy exactly.
    pub fn resize_bilinear(&self, width: usize, height: usize) -> Image {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let mut out = Image::filled(width, height, 0.0);
        for c in 0..3 {
            resize_plane_bilinear(
                self.plane(c),
                self.width,
                self.height,
                &mut out.data[c * width * height..(c + 1) * width * height],
                width,
                height,
            );
        }
        out
    }

    /// Luma `0.299 R + 0.587 G + 0.114 B` per pixel.
    pub fn luma(&self) -> Vec<f64> {
        let (r, g, b) = (self.plane(0), self.plane(1), self.plane(2));
        r.iter()
            .zip(g)
            .zip(b)
            .map(|((r, g), b)| 0.299 * r + 0.587 * g + 0.114 * b)
            .collect()
    }

    /// `[1, 3, H, W]` tensor view of this image.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec([1, 3, self.height, self.width], self.data.clone())
    }

    /// Takes sample `n` of a `[N, 3, H, W]` tensor.
    pub fn from_tensor(t: &Tensor, n: usize) -> Image {
        let [_, c, h, w] = t.shape();
        assert_eq!(c, 3, "image tensors have three channels");
        Image::from_planar(w, h, t.sample(n).to_vec())
    }
}

/// Binary mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data
            .iter()
            .map(|&b| if b { 1.0 } else { 0.0 })
            .collect()
    }

    /// Nearest-neighbour resampling; keeps the mask binary.
    pub fn resize_nearest(&self, width: usize, height: usize) -> Mask {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let xs: Vec<usize> = (0..width)
            .map(|i| nearest_source(i, self.width, width))
            .collect();
        let ys: Vec<usize> = (0..height)
            .map(|i| nearest_source(i, self.height, height))
            .collect();
        Mask::from_fn(width, height, |x, y| self.get(xs[x], ys[y]))
    }
}

/// Source index sampled by output index `i` under nearest-neighbour resizing
/// with half-pixel centers: `floor((i + 0.5) * src / dst)`.
#[inline]
pub fn nearest_source(i: usize, src: usize, dst: usize) -> usize {
    (((2 * i + 1) * src) / (2 * dst)).min(src - 1)
}

/// One output sample of a 1-D bilinear resize: `lo`, `hi` source indices and
/// the interpolation fraction towards `hi`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
}

/// Half-pixel-center bilinear taps, clamped at the borders.
pub fn bilinear_taps(src: usize, dst: usize) -> Vec<Tap> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            if src == dst {
                return Tap {
                    lo: i,
                    hi: i,
                    frac: 0.0,
                };
            }
            let pos = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (math::floor(pos) as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            let frac = if hi == lo { 0.0 } else { pos - lo as f64 };
            Tap { lo, hi, frac }
        })
        .collect()
}

#[inline]
pub(crate) fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if t == 0.0 {
        a
    } else {
        a + t * (b - a)
    }
}

pub(crate) fn resize_plane_bilinear(
    src: &[f64],
    sw: usize,
    sh: usize,
    dst: &mut [f64],
    dw: usize,
    dh: usize,
) {
    let xt = bilinear_taps(sw, dw);
    let yt = bilinear_taps(sh, dh);
    for (y, ty) in yt.iter().enumerate() {
        let r0 = &src[ty.lo * sw..(ty.lo + 1) * sw];
        let r1 = &src[ty.hi * sw..(ty.hi + 1) * sw];
        for (x, tx) in xt.iter().enumerate() {
            let top = lerp(r0[tx.lo], r0[tx.hi], tx.frac);
            let bot = lerp(r1[tx.lo], r1[tx.hi], tx.frac);
            dst[y * dw + x] = lerp(top, bot, ty.frac);
        }
    }
}
