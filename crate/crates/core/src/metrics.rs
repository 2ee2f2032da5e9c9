//! Fréchet distance between Gaussian feature fits (FID / FVD) and the
//! identity-invariance (IdI) score.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::math;
use crate::preprocess::BoundingBox;
use crate::rng::seeded;

/// Relative tolerance below which negative eigenvalues are treated as round-off.
pub const EIGEN_CLAMP: f64 = 1e-8;

/// Mean and covariance of a feature sample.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    /// Row-major `d x d`.
    pub cov: Vec<f64>,
    pub n: usize,
}

impl GaussianStats {
    pub fn new(mean: Vec<f64>, cov: Vec<f64>, n: usize) -> Result<Self> {
        let d = mean.len();
        if cov.len() != d * d {
            return Err(Error::ShapeMismatch(format!(
                "covariance of {} entries for dimension {d}",
                cov.len()
            )));
        }
        Ok(Self { mean, cov, n })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Sample mean and unbiased sample covariance; a single sample has zero covariance.
    pub fn fit(features: &[Vec<f64>]) -> Result<Self> {
        let first = features.first().ok_or(Error::DatasetEmpty)?;
        let d = first.len();
        let n = features.len();
        let mut mean = vec![0.0; d];
        for f in features {
            if f.len() != d {
                return Err(Error::DimensionMismatch {
                    left: d,
                    right: f.len(),
                });
            }
            for (m, v) in mean.iter_mut().zip(f) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut cov = vec![0.0; d * d];
        if n > 1 {
            for f in features {
                let c: Vec<f64> = f.iter().zip(&mean).map(|(v, m)| v - m).collect();
                for i in 0..d {
                    for j in i..d {
                        cov[i * d + j] += c[i] * c[j];
                    }
                }
            }
            for i in 0..d {
                for j in i..d {
                    let v = cov[i * d + j] / (n - 1) as f64;
                    cov[i * d + j] = v;
                    cov[j * d + i] = v;
                }
            }
        }
        Ok(Self { mean, cov, n })
    }

    fn cov_matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        let m = DMatrix::from_row_slice(d, d, &self.cov);
        (&m + m.transpose()) * 0.5
    }
}

/// Eigenvalues below `-EIGEN_CLAMP * scale` are an error, the rest are clamped at zero.
fn clamped_eigen(m: DMatrix<f64>) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let eig = SymmetricEigen::new(m);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let mut values = eig.eigenvalues;
    for v in values.iter_mut() {
        if *v < -EIGEN_CLAMP * scale {
            return Err(Error::NonPsd(*v));
        }
        *v = v.max(0.0);
    }
    Ok((eig.eigenvectors, values))
}

fn psd_sqrt(m: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (vectors, values) = clamped_eigen(m)?;
    let roots = DMatrix::from_diagonal(&values.map(math::sqrt));
    Ok(&vectors * roots * vectors.transpose())
}

/// `|μ1 - μ2|² + Tr(Σ1 + Σ2 - 2 (Σ1 Σ2)^½)`.
///
/// The trace of the product root is taken as `Tr((A Σ2 A)^½)` with `A = Σ1^½`,
/// which keeps every decomposition symmetric.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            left: a.dim(),
            right: b.dim(),
        });
    }
    let mean_term: f64 = a
        .mean
        .iter()
        .zip(&b.mean)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let s1 = a.cov_matrix();
    let s2 = b.cov_matrix();
    let root = psd_sqrt(s1.clone())?;
    let inner = &root * &s2 * &root;
    let (_, values) = clamped_eigen((&inner + inner.transpose()) * 0.5)?;
    let tr_cross: f64 = values.iter().map(|&v| math::sqrt(v)).sum();
    let value = mean_term + s1.trace() + s2.trace() - 2.0 * tr_cross;
    Ok(value.max(0.0))
}

/// Image to feature-vector map used for FID.
pub trait FeatureExtractor {
    fn extract(&self, image: &Image) -> Result<Vec<f64>>;
}

/// Clip to feature-vector map used for FVD.
pub trait VideoFeatureExtractor {
    fn extract_clip(&self, clip: &[Image]) -> Result<Vec<f64>>;
}

/// Fixed-seed Gaussian random projection of raw pixel values.
///
/// A stand-in for pretrained feature networks; its distances are not
/// comparable with published FID or FVD numbers.
#[derive(Clone, Debug)]
pub struct RandomProjection {
    input_len: usize,
    out_dim: usize,
    /// Row-major `out_dim x input_len`.
    weights: Vec<f64>,
}

impl RandomProjection {
    pub fn new(seed: u64, input_len: usize, out_dim: usize) -> Self {
        let mut rng = seeded(seed);
        let scale = 1.0 / math::sqrt(input_len.max(1) as f64);
        let weights = (0..input_len * out_dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            })
            .collect();
        Self {
            input_len,
            out_dim,
            weights,
        }
    }

    /// Projection for `width x height` images.
    pub fn for_images(seed: u64, width: usize, height: usize, out_dim: usize) -> Self {
        Self::new(seed, 3 * width * height, out_dim)
    }

    /// Projection for clips of `frames` images of `width x height`.
    pub fn for_clips(
        seed: u64,
        frames: usize,
        width: usize,
        height: usize,
        out_dim: usize,
    ) -> Self {
        Self::new(seed, frames * 3 * width * height, out_dim)
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn project(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.input_len {
            return Err(Error::DimensionMismatch {
                left: self.input_len,
                right: input.len(),
            });
        }
        Ok(self
            .weights
            .chunks_exact(self.input_len)
            .map(|row| row.iter().zip(input).map(|(w, x)| w * x).sum())
            .collect())
    }
}

impl FeatureExtractor for RandomProjection {
    fn extract(&self, image: &Image) -> Result<Vec<f64>> {
        self.project(image.data())
    }
}

impl VideoFeatureExtractor for RandomProjection {
    fn extract_clip(&self, clip: &[Image]) -> Result<Vec<f64>> {
        let flat: Vec<f64> = clip.iter().flat_map(|f| f.data().iter().copied()).collect();
        self.project(&flat)
    }
}

pub fn fid<E: FeatureExtractor + ?Sized>(
    real: &[Image],
    fake: &[Image],
    extractor: &E,
) -> Result<f64> {
    let fr = real
        .iter()
        .map(|i| extractor.extract(i))
        .collect::<Result<Vec<_>>>()?;
    let ff = fake
        .iter()
        .map(|i| extractor.extract(i))
        .collect::<Result<Vec<_>>>()?;
    frechet_distance(&GaussianStats::fit(&fr)?, &GaussianStats::fit(&ff)?)
}

pub fn fvd<E: VideoFeatureExtractor + ?Sized>(
    real: &[Vec<Image>],
    fake: &[Vec<Image>],
    extractor: &E,
) -> Result<f64> {
    let fr = real
        .iter()
        .map(|c| extractor.extract_clip(c))
        .collect::<Result<Vec<_>>>()?;
    let ff = fake
        .iter()
        .map(|c| extractor.extract_clip(c))
        .collect::<Result<Vec<_>>>()?;
    frechet_distance(&GaussianStats::fit(&fr)?, &GaussianStats::fit(&ff)?)
}

/// `|e[i+1] - e[i]|²` for every consecutive pair.
pub fn pairwise_sq_l2(seq: &[Vec<f64>]) -> Vec<f64> {
    seq.windows(2).map(|w| sq_dist(&w[0], &w[1])).collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "embedding dimensions");
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Median with the two middle values averaged for even counts; `None` when empty.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    })
}

/// Ratio of the real over the generated median transition distance.
pub fn idi_score(real_median: f64, generated_median: f64) -> Result<f64> {
    if generated_median == 0.0 {
        return Err(Error::DegenerateMedian);
    }
    Ok(real_median / generated_median)
}

/// Two-decimal display rounding, ties to even.
pub fn round2(x: f64) -> f64 {
    math::rint(x * 100.0) / 100.0
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct IdiReport {
    pub real_median: f64,
    pub gen_median: f64,
    pub idi: f64,
    /// Median over videos of the distance at each transition index.
    pub real_series: Vec<Option<f64>>,
    pub gen_series: Vec<Option<f64>>,
    /// Transitions dropped because a face was missing in either frame.
    pub skipped_pairs: usize,
}

/// Per-video embeddings; `None` marks a frame without a detected face.
pub type EmbeddingVideo = Vec<Option<Vec<f64>>>;

struct Transitions {
    pooled: Vec<f64>,
    by_index: Vec<Vec<f64>>,
    skipped: usize,
}

fn transitions(videos: &[EmbeddingVideo]) -> Transitions {
    let mut t = Transitions {
        pooled: Vec::new(),
        by_index: Vec::new(),
        skipped: 0,
    };
    for video in videos {
        for (i, pair) in video.windows(2).enumerate() {
            if t.by_index.len() <= i {
                t.by_index.resize_with(i + 1, Vec::new);
            }
            match (&pair[0], &pair[1]) {
                (Some(a), Some(b)) => {
                    let d = sq_dist(a, b);
                    t.pooled.push(d);
                    t.by_index[i].push(d);
                }
                _ => t.skipped += 1,
            }
        }
    }
    t
}

/// IdI from precomputed embeddings, pooling every transition of every video.
pub fn idi_from_embeddings(
    real: &[EmbeddingVideo],
    generated: &[EmbeddingVideo],
) -> Result<IdiReport> {
    let r = transitions(real);
    let g = transitions(generated);
    if r.skipped + g.skipped > 0 {
        log::warn!(
            "skipped {} frame pairs without a detected face",
            r.skipped + g.skipped
        );
    }
    let real_median = median(&r.pooled).ok_or(Error::DatasetEmpty)?;
    let gen_median = median(&g.pooled).ok_or(Error::DatasetEmpty)?;
    Ok(IdiReport {
        real_median,
        gen_median,
        idi: idi_score(real_median, gen_median)?,
        real_series: r.by_index.iter().map(|v| median(v)).collect(),
        gen_series: g.by_index.iter().map(|v| median(v)).collect(),
        skipped_pairs: r.skipped + g.skipped,
    })
}

pub trait FaceDetector {
    fn detect(&self, frame: &Image) -> Option<BoundingBox>;
}

pub trait FaceEmbedder {
    fn embed(&self, frame: &Image, face: BoundingBox) -> Vec<f64>;
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let norm = math::sqrt(v.iter().map(|x| x * x).sum());
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

fn embed_video<D: FaceDetector + ?Sized, E: FaceEmbedder + ?Sized>(
    frames: &[Image],
    detector: &D,
    embedder: &E,
) -> EmbeddingVideo {
    frames
        .iter()
        .map(|f| detector.detect(f).map(|b| unit(embedder.embed(f, b))))
        .collect()
}

/// Detects and embeds every frame (embeddings are L2-normalized), then
/// applies [`idi_from_embeddings`].
pub fn idi_pipeline<D, E>(
    real: &[Vec<Image>],
    generated: &[Vec<Image>],
    detector: &D,
    embedder: &E,
) -> Result<IdiReport>
where
    D: FaceDetector + ?Sized,
    E: FaceEmbedder + ?Sized,
{
    let r: Vec<EmbeddingVideo> = real
        .iter()
        .map(|v| embed_video(v, detector, embedder))
        .collect();
    let g: Vec<EmbeddingVideo> = generated
        .iter()
        .map(|v| embed_video(v, detector, embedder))
        .collect();
    idi_from_embeddings(&r, &g)
}

/// Random unit vector, handy for synthetic embedding fixtures.
pub fn random_unit<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    unit((0..dim).map(|_| StandardNormal.sample(rng)).collect())
}
