//! Single-image and video anonymization with a trained generator.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::image::Image;
use crate::nets::Generator;
use crate::nn::{Binding, Ctx, Mode};
use crate::preprocess::{extract_context, paste_back, BoundingBox, FaceContext};
use crate::tensor::Tensor;
use crate::trainer::{two_stage_forward, Checkpoint, GeneratorState, StageInput, TrainMode};

/// Consecutive frames of one tracked face, one box per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    pub id: String,
    pub frames: Vec<Image>,
    pub boxes: Vec<BoundingBox>,
}

impl FrameSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    fn validate(&self) -> Result<()> {
        if self.frames.is_empty() || self.boxes.len() != self.frames.len() {
            return Err(Error::SequenceTooShort {
                len: self.frames.len().min(self.boxes.len()),
                min: 1,
            });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct BurnInConfig {
    pub n_frames: usize,
    pub enabled: bool,
}

impl Default for BurnInConfig {
    fn default() -> Self {
        Self {
            n_frames: 6,
            enabled: true,
        }
    }
}

impl BurnInConfig {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.enabled && self.n_frames < 2 {
            return Err(Error::InvalidConfig(
                "burn-in needs at least 2 frames".into(),
            ));
        }
        Ok(())
    }
}

/// The two past frames conditioning the next generated frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Pasts {
    /// Frame `t - 2`.
    pub older: Tensor,
    /// Frame `t - 1`.
    pub newer: Tensor,
}

impl Pasts {
    pub fn zeros(resolution: usize) -> Self {
        let z = Tensor::zeros([1, 3, resolution, resolution]);
        Self {
            older: z.clone(),
            newer: z,
        }
    }

    fn shift(&mut self, generated: Tensor) {
        self.older = core::mem::replace(&mut self.newer, generated);
    }
}

/// An anonymized video with the generated crops behind each frame.
#[derive(Clone, Debug, PartialEq)]
pub struct AnonymizedVideo {
    pub sequence: FrameSequence,
    /// Composited generator outputs at model resolution, one per frame.
    pub crops: Vec<Image>,
}

/// A generator in evaluation mode that counts its invocations.
#[derive(Clone, Debug)]
pub struct Anonymizer {
    gen: Generator,
    state: GeneratorState,
    calls: usize,
}

impl Anonymizer {
    pub fn new(gen: Generator, state: GeneratorState) -> Self {
        Self {
            gen,
            state,
            calls: 0,
        }
    }

    /// Loads the selected generator of a checkpoint trained in `mode`.
    pub fn from_checkpoint(ckpt: &Checkpoint, mode: TrainMode) -> Result<Self> {
        if ckpt.mode() != mode {
            return Err(Error::CheckpointModeMismatch {
                expected: mode.name(),
                found: ckpt.mode().name(),
            });
        }
        let (gen, state) = ckpt.load_generator()?;
        Ok(Self::new(gen, state))
    }

    pub fn resolution(&self) -> usize {
        self.gen.config.resolution
    }

    pub fn is_video(&self) -> bool {
        self.gen.config.video_mode
    }

    /// Number of generator evaluations so far.
    pub fn generator_calls(&self) -> usize {
        self.calls
    }

    fn require(&self, mode: TrainMode) -> Result<()> {
        let found = if self.is_video() {
            TrainMode::Video
        } else {
            TrainMode::Image
        };
        if found != mode {
            return Err(Error::CheckpointModeMismatch {
                expected: mode.name(),
                found: found.name(),
            });
        }
        Ok(())
    }

    /// One two-stage pass; returns the composited crop as `[1, 3, res, res]`.
    pub fn generate(&mut self, input: &StageInput) -> Result<Tensor> {
        let mut g = Graph::no_grad();
        let params = Binding::new(&mut g, &self.state.params, false);
        let mut buffers = self.state.buffers.clone();
        let mut cx = Ctx {
            graph: &mut g,
            params: &params,
            buffers: &mut buffers,
            mode: Mode::Eval,
        };
        let out = two_stage_forward(&self.gen, &mut cx, input)?;
        self.calls += 1;
        Ok(g.value(out.output).clone())
    }

    /// Anonymizes every box of a still image, one after another.
    pub fn anonymize_image(&mut self, frame: &Image, boxes: &[BoundingBox]) -> Result<Image> {
        self.require(TrainMode::Image)?;
        let mut out = frame.clone();
        for &b in boxes {
            let ctx = extract_context(&out, b, self.resolution())?;
            let generated = self.generate(&StageInput::from_context(&ctx))?;
            out = paste_back(&out, &ctx, &Image::from_tensor(&generated, 0))?;
        }
        Ok(out)
    }

    /// Conditioning for the first emitted frame: zero volumes when disabled,
    /// otherwise the last two of `n_frames` generations on `ctx`, each fed
    /// back as the newest past frame.
    pub fn burn_in(&mut self, ctx: &FaceContext, cfg: &BurnInConfig) -> Result<Pasts> {
        self.require(TrainMode::Video)?;
        cfg.validate()?;
        let mut pasts = Pasts::zeros(self.resolution());
        if cfg.enabled {
            let base = StageInput::from_context(ctx);
            for _ in 0..cfg.n_frames {
                let out = self.generate(&base.clone().with_pasts(&pasts.older, &pasts.newer))?;
                pasts.shift(out);
            }
        }
        Ok(pasts)
    }

    /// Anonymizes a tracked face frame by frame after burning in on the first frame.
    pub fn anonymize_video(
        &mut self,
        seq: &FrameSequence,
        cfg: &BurnInConfig,
    ) -> Result<AnonymizedVideo> {
        self.require(TrainMode::Video)?;
        seq.validate()?;
        let res = self.resolution();
        let mut pasts = None;
        let mut frames = Vec::with_capacity(seq.len());
        let mut crops = Vec::with_capacity(seq.len());
        for (frame, &b) in seq.frames.iter().zip(&seq.boxes) {
            let ctx = extract_context(frame, b, res)?;
            let p = match pasts.take() {
                Some(p) => p,
                None => self.burn_in(&ctx, cfg)?,
            };
            let out =
                self.generate(&StageInput::from_context(&ctx).with_pasts(&p.older, &p.newer))?;
            let crop = Image::from_tensor(&out, 0);
            frames.push(paste_back(frame, &ctx, &crop)?);
            crops.push(crop);
            let mut p = p;
            p.shift(out);
            pasts = Some(p);
        }
        Ok(AnonymizedVideo {
            sequence: FrameSequence {
                id: seq.id.clone(),
                frames,
                boxes: seq.boxes.clone(),
            },
            crops,
        })
    }
}

/// Anonymizes all `boxes` in `frame` with an image-mode checkpoint.
pub fn anonymize_image(frame: &Image, boxes: &[BoundingBox], ckpt: &Checkpoint) -> Result<Image> {
    Anonymizer::from_checkpoint(ckpt, TrainMode::Image)?.anonymize_image(frame, boxes)
}

/// Burn-in conditioning for a sequence starting at `ctx`.
pub fn burn_in(ctx: &FaceContext, ckpt: &Checkpoint, cfg: &BurnInConfig) -> Result<Pasts> {
    Anonymizer::from_checkpoint(ckpt, TrainMode::Video)?.burn_in(ctx, cfg)
}

/// Anonymizes a face track with a video-mode checkpoint.
pub fn anonymize_video(
    seq: &FrameSequence,
    ckpt: &Checkpoint,
    cfg: &BurnInConfig,
) -> Result<FrameSequence> {
    Ok(Anonymizer::from_checkpoint(ckpt, TrainMode::Video)?
        .anonymize_video(seq, cfg)?
        .sequence)
}
