//! Image-model training with separate discriminator and generator updates
//! at different learning rates, and video-model training that unrolls the
//! generator over consecutive frames and takes one joint optimizer step.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::image::Image;
use crate::inference::FrameSequence;
use crate::losses::{
    accumulate_grads, discount_weight_tensor, discounted_l1_graph, feature_matching_graph,
    lsgan_d_graph, lsgan_g_graph, r1_penalty, weighted_sum, Critic, LossWeights, VideoCritic,
};
use crate::metrics::{fid, fvd, RandomProjection};
use crate::nets::{temporal_sample_sets_up_to, DiscOutput, Discriminators, Generator, NetConfig};
use crate::nn::{Binding, Ctx, Mode, ParamStore};
use crate::optim::{Adam, AdamState};
use crate::preprocess::{extract_training_pair, BoundingBox, FaceContext};
use crate::rng::{capture, restore, seeded, RngState};
use crate::tensor::Tensor;

/// Longest supported video unroll.
pub const MAX_UNROLL: usize = 30;
/// Fewest frames a training sequence may have.
pub const MIN_SEQUENCE_FRAMES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum TrainMode {
    Image,
    Video,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Image => "image",
            TrainMode::Video => "video",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub lr_d: f64,
    pub lr_g: f64,
    pub batch_size: usize,
    pub adam_betas: (f64, f64),
    /// Steps between validation evaluations; 0 disables them.
    pub eval_interval: u64,
    pub max_steps: u64,
    pub seed: u64,
    /// Frames generated per video training sample.
    pub unroll_len: usize,
    /// Evaluations without improvement before training stops.
    pub stagnation_evals: usize,
    /// Validation items used per evaluation.
    pub eval_samples: usize,
}

impl TrainConfig {
    pub fn image() -> Self {
        Self {
            mode: TrainMode::Image,
            lr_d: 4e-4,
            lr_g: 1e-4,
            batch_size: 256,
            adam_betas: (0.5, 0.999),
            eval_interval: 1000,
            max_steps: 89_928,
            seed: 0,
            unroll_len: 8,
            stagnation_evals: 20,
            eval_samples: 256,
        }
    }

    pub fn video() -> Self {
        Self {
            mode: TrainMode::Video,
            batch_size: 96,
            max_steps: 1_285_490,
            ..Self::image()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(self.lr_d > 0.0 && self.lr_g > 0.0) {
            return Err(Error::InvalidConfig(
                "learning rates must be positive".into(),
            ));
        }
        let (b1, b2) = self.adam_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(Error::InvalidConfig("Adam betas must lie in [0, 1)".into()));
        }
        if self.mode == TrainMode::Video
            && !(MIN_SEQUENCE_FRAMES..=MAX_UNROLL).contains(&self.unroll_len)
        {
            return Err(Error::InvalidConfig(format!(
                "unroll_len must lie in {MIN_SEQUENCE_FRAMES}..={MAX_UNROLL}, got {}",
                self.unroll_len
            )));
        }
        Ok(())
    }
}

/// One face in one still image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub frame: Image,
    pub face: BoundingBox,
}

#[derive(Clone, Debug)]
pub enum Dataset {
    Images(Vec<ImageSample>),
    Videos(Vec<FrameSequence>),
}

impl Dataset {
    pub fn mode(&self) -> TrainMode {
        match self {
            Dataset::Images(_) => TrainMode::Image,
            Dataset::Videos(_) => TrainMode::Video,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Dataset::Images(v) => v.len(),
            Dataset::Videos(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Generator conditioning for a batch, as separate tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct StageInput {
    /// `[N, 6, h, w]`: the older past frame, then the newer one. Video mode only.
    pub pasts: Option<Tensor>,
    /// `[N, 3, h, w]` crop with the face blacked out.
    pub crop: Tensor,
    /// `[N, 1, h, w]`.
    pub border: Tensor,
    /// `[N, 1, h, w]`.
    pub anon: Tensor,
}

impl StageInput {
    pub fn from_context(ctx: &FaceContext) -> Self {
        let res = ctx.resolution();
        Self {
            pasts: None,
            crop: ctx.crop.to_tensor(),
            border: Tensor::from_vec([1, 1, res, res], ctx.border_mask.to_f64()),
            anon: Tensor::from_vec([1, 1, res, res], ctx.anon_mask.to_f64()),
        }
    }

    /// Adds past conditioning: `older` is `t - 2`, `newer` is `t - 1`.
    pub fn with_pasts(mut self, older: &Tensor, newer: &Tensor) -> Self {
        self.pasts = Some(Tensor::concat_channels(&[older, newer]));
        self
    }

    /// Zero volumes as past conditioning.
    pub fn with_zero_pasts(self) -> Self {
        let [n, _, h, w] = self.crop.shape();
        let zeros = Tensor::zeros([n, 3, h, w]);
        self.with_pasts(&zeros, &zeros)
    }

    /// The generator's input volume: `[pasts,] crop, border, anon`.
    pub fn assembled(&self) -> Tensor {
        match &self.pasts {
            Some(p) => Tensor::concat_channels(&[p, &self.crop, &self.border, &self.anon]),
            None => Tensor::concat_channels(&[&self.crop, &self.border, &self.anon]),
        }
    }

    fn stack(items: &[&StageInput]) -> StageInput {
        let pasts = items[0].pasts.as_ref().map(|_| {
            Tensor::stack(
                &items
                    .iter()
                    .map(|i| i.pasts.as_ref().expect("uniform pasts"))
                    .collect::<Vec<_>>(),
            )
        });
        StageInput {
            pasts,
            crop: Tensor::stack(&items.iter().map(|i| &i.crop).collect::<Vec<_>>()),
            border: Tensor::stack(&items.iter().map(|i| &i.border).collect::<Vec<_>>()),
            anon: Tensor::stack(&items.iter().map(|i| &i.anon).collect::<Vec<_>>()),
        }
    }
}

/// Graph nodes produced by [`two_stage_forward`].
#[derive(Clone, Copy, Debug)]
pub struct StageOutputs {
    /// Raw coarse image, `3 x h/2 x w/2`.
    pub coarse: Var,
    pub bottleneck: Var,
    /// Raw fine image, `3 x h x w`.
    pub fine: Var,
    /// Fine image composited into the crop: only anonymized pixels are replaced.
    pub output: Var,
    pub anon: Var,
    pub border: Var,
}

/// `base * (1 - mask) + generated * mask`, with a single-channel mask.
pub fn composite(g: &mut Graph, base: Var, generated: Var, mask: Var) -> Var {
    let keep = g.scale(mask, -1.0);
    let keep = g.add_scalar(keep, 1.0);
    let kept = g.mul(base, keep);
    let filled = g.mul(generated, mask);
    g.add(kept, filled)
}

/// Coarse pass, bilinear upscaling to full size, compositing into the crop,
/// fine pass on the re-assembled volume, final compositing.
pub fn two_stage_forward(
    gen: &Generator,
    cx: &mut Ctx<'_>,
    input: &StageInput,
) -> Result<StageOutputs> {
    let [n, c, h, w] = input.crop.shape();
    if c != 3 || input.border.shape() != [n, 1, h, w] || input.anon.shape() != [n, 1, h, w] {
        return Err(Error::ShapeMismatch(format!(
            "crop {:?}, border {:?}, anon {:?}",
            input.crop.shape(),
            input.border.shape(),
            input.anon.shape()
        )));
    }
    match (&input.pasts, gen.config.video_mode) {
        (Some(p), true) if p.shape() == [n, 6, h, w] => {}
        (None, false) => {}
        (p, video) => {
            return Err(Error::ShapeMismatch(format!(
                "{} generator given past frames {:?}",
                if video { "video" } else { "image" },
                p.as_ref().map(Tensor::shape)
            )))
        }
    }
    let g = &mut *cx.graph;
    let crop = g.constant(input.crop.clone());
    let border = g.constant(input.border.clone());
    let anon = g.constant(input.anon.clone());
    let pasts = input.pasts.as_ref().map(|p| g.constant(p.clone()));
    let assemble = |g: &mut Graph, image: Var| match pasts {
        Some(p) => g.concat(&[p, image, border, anon]),
        None => g.concat(&[image, border, anon]),
    };
    let x = assemble(g, crop);
    let coarse = gen.coarse.forward(cx, x)?;
    let g = &mut *cx.graph;
    let up = g.resize_bilinear(coarse.image, h, w);
    let draft = composite(g, crop, up, anon);
    let fine_in = assemble(g, draft);
    let fine = gen.fine.forward(g, cx.params, fine_in)?;
    let output = composite(g, crop, fine, anon);
    Ok(StageOutputs {
        coarse: coarse.image,
        bottleneck: coarse.bottleneck,
        fine,
        output,
        anon,
        border,
    })
}

/// Everything the losses need for one training crop.
#[derive(Clone, Debug)]
struct Prepared {
    input: StageInput,
    target: Tensor,
    target_half: Tensor,
    anon_half: Tensor,
    weights: Tensor,
}

fn prepare(frame: &Image, face: BoundingBox, resolution: usize, gamma: f64) -> Result<Prepared> {
    let (ctx, target) = extract_training_pair(frame, face, resolution)?;
    let half = resolution / 2;
    let anon_half = ctx.anon_mask.resize_nearest(half, half);
    Ok(Prepared {
        input: StageInput::from_context(&ctx),
        target: target.to_tensor(),
        target_half: target.resize_bilinear(half, half).to_tensor(),
        anon_half: Tensor::from_vec([1, 1, half, half], anon_half.to_f64()),
        weights: discount_weight_tensor(&[&ctx.anon_mask], gamma),
    })
}

#[derive(Clone, Debug)]
struct Batch {
    input: StageInput,
    target: Tensor,
    target_half: Tensor,
    anon_half: Tensor,
    weights: Tensor,
}

fn batch_of(items: &[&Prepared]) -> Batch {
    let inputs: Vec<&StageInput> = items.iter().map(|p| &p.input).collect();
    let stack = |f: fn(&Prepared) -> &Tensor| {
        Tensor::stack(&items.iter().map(|p| f(p)).collect::<Vec<_>>())
    };
    Batch {
        input: StageInput::stack(&inputs),
        target: stack(|p| &p.target),
        target_half: stack(|p| &p.target_half),
        anon_half: stack(|p| &p.anon_half),
        weights: stack(|p| &p.weights),
    }
}

#[derive(Clone, Debug)]
enum PreparedSet {
    Images(Vec<Prepared>),
    Videos(Vec<Vec<Prepared>>),
}

impl PreparedSet {
    fn build(data: &Dataset, resolution: usize, gamma: f64) -> Result<Self> {
        match data {
            Dataset::Images(samples) => samples
                .iter()
                .map(|s| prepare(&s.frame, s.face, resolution, gamma))
                .collect::<Result<_>>()
                .map(Self::Images),
            Dataset::Videos(seqs) => seqs
                .iter()
                .map(|s| {
                    if s.frames.len() < MIN_SEQUENCE_FRAMES || s.boxes.len() != s.frames.len() {
                        return Err(Error::SequenceTooShort {
                            len: s.frames.len().min(s.boxes.len()),
                            min: MIN_SEQUENCE_FRAMES,
                        });
                    }
                    s.frames
                        .iter()
                        .zip(&s.boxes)
                        .map(|(f, b)| prepare(f, *b, resolution, gamma))
                        .collect()
                })
                .collect::<Result<_>>()
                .map(Self::Videos),
        }
    }

    fn len(&self) -> usize {
        match self {
            Self::Images(v) => v.len(),
            Self::Videos(v) => v.len(),
        }
    }
}

/// Scalar losses of one training step; terms not used by the mode stay 0.
#[derive(Clone, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossBreakdown {
    pub d_adv: f64,
    pub r1: f64,
    pub video_d_adv: f64,
    pub g_adv: f64,
    pub fm: f64,
    pub rec_coarse: f64,
    pub rec_fine: f64,
    pub video_g_adv: f64,
    pub video_fm: f64,
    pub g_total: f64,
}

impl LossBreakdown {
    pub fn all_finite(&self) -> bool {
        [
            self.d_adv,
            self.r1,
            self.video_d_adv,
            self.g_adv,
            self.fm,
            self.rec_coarse,
            self.rec_fine,
            self.video_g_adv,
            self.video_fm,
            self.g_total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    /// Number of completed steps, counting this one.
    pub step: u64,
    pub losses: LossBreakdown,
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalRecord {
    pub step: u64,
    pub metric: f64,
}

/// Argmin model selection over a stream of validation metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSelector<T> {
    pub best_metric: Option<f64>,
    pub best: Option<T>,
    pub best_step: Option<u64>,
    /// Evaluations since the last improvement.
    pub stagnant: usize,
}

impl<T> Default for ModelSelector<T> {
    fn default() -> Self {
        Self {
            best_metric: None,
            best: None,
            best_step: None,
            stagnant: 0,
        }
    }
}

impl<T> ModelSelector<T> {
    /// Records an evaluation, taking a snapshot only on strict improvement.
    pub fn observe(&mut self, record: EvalRecord, snapshot: impl FnOnce() -> T) -> bool {
        let improved = self.best_metric.is_none_or(|b| record.metric < b);
        if improved {
            self.best_metric = Some(record.metric);
            self.best = Some(snapshot());
            self.best_step = Some(record.step);
            self.stagnant = 0;
        } else {
            self.stagnant += 1;
        }
        improved
    }
}

/// Generator parameters and normalization buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorState {
    pub params: ParamStore,
    pub buffers: ParamStore,
}

/// Complete resumable training state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub generator: GeneratorState,
    pub discriminator: ParamStore,
    pub adam_g: AdamState,
    pub adam_d: AdamState,
    pub rng: RngState,
    pub best_metric: Option<f64>,
    pub best_step: Option<u64>,
    pub best_generator: Option<GeneratorState>,
    pub stagnant_evals: usize,
    pub evals: Vec<EvalRecord>,
}

impl Checkpoint {
    pub fn mode(&self) -> TrainMode {
        self.train.mode
    }

    /// The best validated generator if any evaluation ran, the latest otherwise.
    pub fn inference_generator(&self) -> &GeneratorState {
        self.best_generator.as_ref().unwrap_or(&self.generator)
    }

    /// Rebuilds the generator architecture around the selected weights.
    pub fn load_generator(&self) -> Result<(Generator, GeneratorState)> {
        let (gen, params, buffers) = Generator::build(&self.net, &mut seeded(0))?;
        let state = self.inference_generator();
        Ok((
            gen,
            GeneratorState {
                params: adopt(&params, &state.params)?,
                buffers: adopt(&buffers, &state.buffers)?,
            },
        ))
    }
}

/// Checks that `saved` has exactly the names and shapes of `fresh`.
fn adopt(fresh: &ParamStore, saved: &ParamStore) -> Result<ParamStore> {
    let same = fresh.len() == saved.len()
        && fresh
            .iter()
            .zip(saved.iter())
            .all(|((na, ta), (nb, tb))| na == nb && ta.shape() == tb.shape());
    if same {
        Ok(saved.clone())
    } else {
        Err(Error::InvalidConfig(
            "checkpoint parameters do not match the configured architecture".into(),
        ))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    MaxSteps,
    Stagnation,
    Interrupted,
}

/// Progress callbacks; returning [`Control::Stop`] interrupts training after the current step.
pub trait TrainObserver {
    fn on_step(&mut self, _report: &StepReport) -> Control {
        Control::Continue
    }

    fn on_eval(&mut self, _record: &EvalRecord, _improved: bool) {}
}

impl TrainObserver for () {}

/// Training failed; `last_good` holds the state after the last finite step.
#[derive(Debug)]
pub struct TrainFailure {
    pub error: Error,
    pub last_good: Option<Box<Checkpoint>>,
}

/// Mutable state restored when a step produces a non-finite loss.
struct Snapshot {
    g_params: ParamStore,
    g_buffers: ParamStore,
    d_params: ParamStore,
    adam_g: AdamState,
    adam_d: AdamState,
    rng: ChaCha8Rng,
}

pub struct Trainer {
    net: NetConfig,
    cfg: TrainConfig,
    weights: LossWeights,
    gen: Generator,
    g_params: ParamStore,
    g_buffers: ParamStore,
    disc: Discriminators,
    d_params: ParamStore,
    adam_g: Adam,
    adam_d: Adam,
    rng: ChaCha8Rng,
    step: u64,
    data: PreparedSet,
    val: Option<PreparedSet>,
    selector: ModelSelector<GeneratorState>,
    evals: Vec<EvalRecord>,
}

fn finite(term: &'static str, value: f64, step: u64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFiniteLoss { term, step })
    }
}

fn mean_of(g: &mut Graph, terms: &[Var]) -> Option<Var> {
    let total = g.add_all(terms)?;
    Some(g.scale(total, 1.0 / terms.len() as f64))
}

fn scores(outs: &[DiscOutput]) -> Vec<Var> {
    outs.iter().map(|o| o.score).collect()
}

impl Trainer {
    pub fn new(
        net: NetConfig,
        cfg: TrainConfig,
        weights: LossWeights,
        data: &Dataset,
    ) -> Result<Self> {
        net.validate()?;
        cfg.validate()?;
        weights.validate()?;
        let video = cfg.mode == TrainMode::Video;
        if net.video_mode != video || data.mode() != cfg.mode {
            return Err(Error::InvalidConfig(format!(
                "{} training needs a {} network and dataset",
                cfg.mode.name(),
                cfg.mode.name()
            )));
        }
        if data.is_empty() {
            return Err(Error::DatasetEmpty);
        }
        let prepared = PreparedSet::build(data, net.resolution, weights.gamma_discount)?;
        let mut rng = seeded(cfg.seed);
        let (gen, g_params, g_buffers) = Generator::build(&net, &mut rng)?;
        let (disc, d_params) = Discriminators::build(&net, &mut rng)?;
        let adam_g = Adam::new(&g_params, cfg.lr_g, cfg.adam_betas);
        let adam_d = Adam::new(&d_params, cfg.lr_d, cfg.adam_betas);
        Ok(Self {
            net,
            cfg,
            weights,
            gen,
            g_params,
            g_buffers,
            disc,
            d_params,
            adam_g,
            adam_d,
            rng,
            step: 0,
            data: prepared,
            val: None,
            selector: ModelSelector::default(),
            evals: Vec::new(),
        })
    }

    /// Continues training from `ckpt` on `data`.
    pub fn resume(ckpt: &Checkpoint, data: &Dataset) -> Result<Self> {
        let mut t = Self::new(
            ckpt.net.clone(),
            ckpt.train.clone(),
            ckpt.loss.clone(),
            data,
        )?;
        t.g_params = adopt(&t.g_params, &ckpt.generator.params)?;
        t.g_buffers = adopt(&t.g_buffers, &ckpt.generator.buffers)?;
        t.d_params = adopt(&t.d_params, &ckpt.discriminator)?;
        for (state, store) in [(&ckpt.adam_g, &t.g_params), (&ckpt.adam_d, &t.d_params)] {
            let ok = state.m.len() == store.len()
                && state.v.len() == store.len()
                && state
                    .m
                    .iter()
                    .zip(state.v.iter())
                    .zip(store.values())
                    .all(|((m, v), p)| m.shape() == p.shape() && v.shape() == p.shape());
            if !ok {
                return Err(Error::InvalidConfig(
                    "optimizer state does not match the parameters".into(),
                ));
            }
        }
        t.adam_g.set_state(ckpt.adam_g.clone());
        t.adam_d.set_state(ckpt.adam_d.clone());
        t.rng = restore(&ckpt.rng);
        t.step = ckpt.step;
        t.selector = ModelSelector {
            best_metric: ckpt.best_metric,
            best: ckpt.best_generator.clone(),
            best_step: ckpt.best_step,
            stagnant: ckpt.stagnant_evals,
        };
        t.evals = ckpt.evals.clone();
        Ok(t)
    }

    /// Uses `val` instead of the training data for evaluations.
    pub fn with_validation(mut self, val: &Dataset) -> Result<Self> {
        if val.mode() != self.cfg.mode {
            return Err(Error::InvalidConfig(
                "validation data has the wrong mode".into(),
            ));
        }
        if val.is_empty() {
            return Err(Error::DatasetEmpty);
        }
        self.val = Some(PreparedSet::build(
            val,
            self.net.resolution,
            self.weights.gamma_discount,
        )?);
        Ok(self)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Changes the step budget, e.g. to extend a resumed run.
    pub fn set_max_steps(&mut self, max_steps: u64) {
        self.cfg.max_steps = max_steps;
    }

    pub fn net_config(&self) -> &NetConfig {
        &self.net
    }

    pub fn generator(&self) -> (&Generator, &ParamStore, &ParamStore) {
        (&self.gen, &self.g_params, &self.g_buffers)
    }

    pub fn discriminator_params(&self) -> &ParamStore {
        &self.d_params
    }

    pub fn generator_params_mut(&mut self) -> &mut ParamStore {
        &mut self.g_params
    }

    pub fn evals(&self) -> &[EvalRecord] {
        &self.evals
    }

    pub fn best_metric(&self) -> Option<f64> {
        self.selector.best_metric
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            step: self.step,
            net: self.net.clone(),
            train: self.cfg.clone(),
            loss: self.weights.clone(),
            generator: GeneratorState {
                params: self.g_params.clone(),
                buffers: self.g_buffers.clone(),
            },
            discriminator: self.d_params.clone(),
            adam_g: self.adam_g.state().clone(),
            adam_d: self.adam_d.state().clone(),
            rng: capture(&self.rng, self.cfg.seed),
            best_metric: self.selector.best_metric,
            best_step: self.selector.best_step,
            best_generator: self.selector.best.clone(),
            stagnant_evals: self.selector.stagnant,
            evals: self.evals.clone(),
        }
    }

    fn snapshot(&self) -> Snapshot {
        Snapshot {
            g_params: self.g_params.clone(),
            g_buffers: self.g_buffers.clone(),
            d_params: self.d_params.clone(),
            adam_g: self.adam_g.state().clone(),
            adam_d: self.adam_d.state().clone(),
            rng: self.rng.clone(),
        }
    }

    fn restore_snapshot(&mut self, s: Snapshot) {
        self.g_params = s.g_params;
        self.g_buffers = s.g_buffers;
        self.d_params = s.d_params;
        self.adam_g.set_state(s.adam_g);
        self.adam_d.set_state(s.adam_d);
        self.rng = s.rng;
    }

    /// One optimization step. On error the trainer is left exactly as it was
    /// after the previous step.
    pub fn step(&mut self) -> Result<StepReport> {
        let snapshot = self.snapshot();
        let result = match self.cfg.mode {
            TrainMode::Image => self.image_step(),
            TrainMode::Video => self.video_step(),
        };
        match result {
            Ok(losses) => {
                self.step += 1;
                log::debug!("step {} {:?}", self.step, losses);
                Ok(StepReport {
                    step: self.step,
                    losses,
                })
            }
            Err(e) => {
                self.restore_snapshot(snapshot);
                Err(e)
            }
        }
    }

    fn sample_images(&mut self) -> Batch {
        let PreparedSet::Images(items) = &self.data else {
            unreachable!("image mode holds images")
        };
        let picks: Vec<&Prepared> = (0..self.cfg.batch_size)
            .map(|_| &items[self.rng.gen_range(0..items.len())])
            .collect();
        batch_of(&picks)
    }

    fn image_step(&mut self) -> Result<LossBreakdown> {
        let batch = self.sample_images();
        let mut g = Graph::new();
        let (gp, out) = self.generator_forward(&mut g, &batch.input)?;
        let mut losses = LossBreakdown::default();
        self.image_d_phase(&mut g, &out, &batch, &mut losses)?;
        self.image_g_phase(&mut g, &gp, &out, &batch, &mut losses)?;
        Ok(losses)
    }

    fn generator_forward(
        &mut self,
        g: &mut Graph,
        input: &StageInput,
    ) -> Result<(Binding, StageOutputs)> {
        let gp = Binding::new(g, &self.g_params, true);
        let mut cx = Ctx {
            graph: g,
            params: &gp,
            buffers: &mut self.g_buffers,
            mode: Mode::Train,
        };
        let out = two_stage_forward(&self.gen, &mut cx, input)?;
        Ok((gp, out))
    }

    fn real_image_input(batch: &Batch) -> Tensor {
        Tensor::concat_channels(&[&batch.target, &batch.input.border, &batch.input.anon])
    }

    /// Discriminator update against detached fakes.
    fn image_d_phase(
        &mut self,
        g: &mut Graph,
        out: &StageOutputs,
        batch: &Batch,
        losses: &mut LossBreakdown,
    ) -> Result<()> {
        let step = self.step + 1;
        let dp = Binding::new(g, &self.d_params, true);
        let real_in = g.leaf(Self::real_image_input(batch));
        let real_out = self.disc.image.forward(g, &dp, real_in)?;
        let fake = g.detach(out.output);
        let fake_in = g.concat(&[fake, out.border, out.anon]);
        let fake_out = self.disc.image.forward(g, &dp, fake_in)?;
        let d_adv = lsgan_d_graph(g, &scores(&real_out), &scores(&fake_out));
        losses.d_adv = finite("d_adv", g.value(d_adv).item(), step)?;
        let mut d_grads = dp.grads(g, &g.backward(d_adv));
        if self.weights.w_r1 > 0.0 {
            let r1 = r1_penalty(
                g,
                &self.disc.image,
                &self.d_params,
                real_in,
                self.weights.w_r1,
            )?;
            losses.r1 = finite("r1", r1.value, step)?;
            accumulate_grads(&mut d_grads, &r1.param_grads);
        }
        self.adam_d.step(&mut self.d_params, &d_grads);
        Ok(())
    }

    /// Generator update against the updated, frozen discriminator.
    fn image_g_phase(
        &mut self,
        g: &mut Graph,
        gp: &Binding,
        out: &StageOutputs,
        batch: &Batch,
        losses: &mut LossBreakdown,
    ) -> Result<()> {
        let step = self.step + 1;
        let dp = Binding::new(g, &self.d_params, false);
        let real_in = g.constant(Self::real_image_input(batch));
        let real_out = self.disc.image.forward(g, &dp, real_in)?;
        let fake_in = g.concat(&[out.output, out.border, out.anon]);
        let fake_out = self.disc.image.forward(g, &dp, fake_in)?;
        let g_adv = lsgan_g_graph(g, &scores(&fake_out));
        let fm = feature_matching_graph(g, &real_out, &fake_out);
        let (rec_coarse, rec_fine) = self.reconstruction(g, out, batch);
        let w = &self.weights;
        let total = weighted_sum(
            g,
            &[
                (w.w_adv, g_adv),
                (w.w_fm, fm),
                (w.w_rec_coarse, rec_coarse),
                (w.w_rec_fine, rec_fine),
            ],
        );
        losses.g_adv = finite("g_adv", g.value(g_adv).item(), step)?;
        losses.fm = finite("fm", g.value(fm).item(), step)?;
        losses.rec_coarse = finite("rec_coarse", g.value(rec_coarse).item(), step)?;
        losses.rec_fine = finite("rec_fine", g.value(rec_fine).item(), step)?;
        losses.g_total = finite("g_total", g.value(total).item(), step)?;
        let g_grads = gp.grads(g, &g.backward(total));
        self.adam_g.step(&mut self.g_params, &g_grads);
        Ok(())
    }

    /// Coarse (plain masked L1 at half size) and fine (discounted L1) reconstruction.
    fn reconstruction(&self, g: &mut Graph, out: &StageOutputs, batch: &Batch) -> (Var, Var) {
        let target_half = g.constant(batch.target_half.clone());
        let anon_half = g.constant(batch.anon_half.clone());
        let coarse = discounted_l1_graph(g, out.coarse, target_half, anon_half);
        let target = g.constant(batch.target.clone());
        let weights = g.constant(batch.weights.clone());
        let fine = discounted_l1_graph(g, out.fine, target, weights);
        (coarse, fine)
    }

    fn sample_clips(&mut self) -> Vec<Batch> {
        let PreparedSet::Videos(seqs) = &self.data else {
            unreachable!("video mode holds sequences")
        };
        let picks: Vec<usize> = (0..self.cfg.batch_size)
            .map(|_| self.rng.gen_range(0..seqs.len()))
            .collect();
        let len = picks
            .iter()
            .map(|&i| seqs[i].len())
            .min()
            .unwrap()
            .min(self.cfg.unroll_len);
        let starts: Vec<usize> = picks
            .iter()
            .map(|&i| self.rng.gen_range(0..=seqs[i].len() - len))
            .collect();
        (0..len)
            .map(|t| {
                let frames: Vec<&Prepared> = picks
                    .iter()
                    .zip(&starts)
                    .map(|(&i, &s)| &seqs[i][s + t])
                    .collect();
                batch_of(&frames)
            })
            .collect()
    }

    fn video_step(&mut self) -> Result<LossBreakdown> {
        let clips = self.sample_clips();
        let step = self.step + 1;
        let mut g = Graph::new();
        let gp = Binding::new(&mut g, &self.g_params, true);
        let inputs: Vec<StageInput> = clips.iter().map(|b| b.input.clone()).collect();
        let outs = {
            let mut cx = Ctx {
                graph: &mut g,
                params: &gp,
                buffers: &mut self.g_buffers,
                mode: Mode::Train,
            };
            unroll(&self.gen, &mut cx, &inputs)?
        };
        let dp = Binding::new(&mut g, &self.d_params, true);
        let dc = Binding::new(&mut g, &self.d_params, false);
        let mut losses = LossBreakdown::default();

        let mut d_terms = Vec::new();
        let mut g_adv = Vec::new();
        let mut fm = Vec::new();
        let mut rec_c = Vec::new();
        let mut rec_f = Vec::new();
        let mut real_frames = Vec::new();
        let mut real_images = Vec::new();
        for (out, batch) in outs.iter().zip(&clips) {
            let real = g.constant(batch.target.clone());
            real_frames.push(real);
            let real_in_t = Self::real_image_input(batch);
            let real_in = g.constant(real_in_t.clone());
            real_images.push(real_in_t);
            let fake = g.detach(out.output);
            let fake_in = g.concat(&[fake, out.border, out.anon]);
            let r = self.disc.image.forward(&mut g, &dp, real_in)?;
            let f = self.disc.image.forward(&mut g, &dp, fake_in)?;
            d_terms.push(lsgan_d_graph(&mut g, &scores(&r), &scores(&f)));

            let live_in = g.concat(&[out.output, out.border, out.anon]);
            let r = self.disc.image.forward(&mut g, &dc, real_in)?;
            let f = self.disc.image.forward(&mut g, &dc, live_in)?;
            g_adv.push(lsgan_g_graph(&mut g, &scores(&f)));
            fm.push(feature_matching_graph(&mut g, &r, &f));
            let (c, fi) = self.reconstruction(&mut g, out, batch);
            rec_c.push(c);
            rec_f.push(fi);
        }

        let video = self
            .disc
            .video
            .as_ref()
            .expect("video network has a video discriminator");
        let mut vd_terms = Vec::new();
        let mut vg_adv = Vec::new();
        let mut vfm = Vec::new();
        let mut r1_triples: Vec<Vec<Tensor>> = vec![Vec::new(); video.time_scales.len()];
        for t in 0..outs.len() {
            for set in temporal_sample_sets_up_to(t as i64, t, self.net.n_time_scales) {
                let k = self
                    .net
                    .time_scales()
                    .iter()
                    .position(|&s| s == set.scale)
                    .unwrap();
                let idx = set.indices.map(|i| i as usize);
                let mut real_parts = Vec::new();
                let mut fake_parts = Vec::new();
                let mut live_parts = Vec::new();
                let mut real_t = Vec::new();
                for &i in &idx {
                    real_parts.extend([real_frames[i], outs[i].anon]);
                    let fake = g.detach(outs[i].output);
                    fake_parts.extend([fake, outs[i].anon]);
                    live_parts.extend([outs[i].output, outs[i].anon]);
                    real_t.push(&clips[i].target);
                    real_t.push(&clips[i].input.anon);
                }
                r1_triples[k].push(Tensor::concat_channels(&real_t));
                let real_in = g.concat(&real_parts);
                let fake_in = g.concat(&fake_parts);
                let live_in = g.concat(&live_parts);
                let r = video.forward(&mut g, &dp, k, real_in)?;
                let f = video.forward(&mut g, &dp, k, fake_in)?;
                vd_terms.push(lsgan_d_graph(&mut g, &scores(&r), &scores(&f)));
                let r = video.forward(&mut g, &dc, k, real_in)?;
                let f = video.forward(&mut g, &dc, k, live_in)?;
                vg_adv.push(lsgan_g_graph(&mut g, &scores(&f)));
                vfm.push(feature_matching_graph(&mut g, &r, &f));
            }
        }

        let d_img = mean_of(&mut g, &d_terms).unwrap();
        losses.d_adv = finite("d_adv", g.value(d_img).item(), step)?;
        let d_total = match mean_of(&mut g, &vd_terms) {
            Some(v) => {
                losses.video_d_adv = finite("video_d_adv", g.value(v).item(), step)?;
                g.add(d_img, v)
            }
            None => d_img,
        };
        let mut d_grads = dp.grads(&g, &g.backward(d_total));
        if self.weights.w_r1 > 0.0 {
            let refs: Vec<&Tensor> = real_images.iter().collect();
            let mut r1_value =
                self.r1_into(&self.disc.image, Tensor::stack(&refs), &mut d_grads)?;
            for (k, triples) in r1_triples.iter().enumerate().filter(|(_, t)| !t.is_empty()) {
                let refs: Vec<&Tensor> = triples.iter().collect();
                let critic = VideoCritic {
                    disc: video,
                    scale_index: k,
                };
                r1_value += self.r1_into(&critic, Tensor::stack(&refs), &mut d_grads)?;
            }
            losses.r1 = finite("r1", r1_value, step)?;
        }

        let w = &self.weights;
        let mut terms = vec![
            (w.w_adv, mean_of(&mut g, &g_adv).unwrap()),
            (w.w_fm, mean_of(&mut g, &fm).unwrap()),
            (w.w_rec_coarse, mean_of(&mut g, &rec_c).unwrap()),
            (w.w_rec_fine, mean_of(&mut g, &rec_f).unwrap()),
        ];
        losses.g_adv = finite("g_adv", g.value(terms[0].1).item(), step)?;
        losses.fm = finite("fm", g.value(terms[1].1).item(), step)?;
        losses.rec_coarse = finite("rec_coarse", g.value(terms[2].1).item(), step)?;
        losses.rec_fine = finite("rec_fine", g.value(terms[3].1).item(), step)?;
        if let (Some(a), Some(f)) = (mean_of(&mut g, &vg_adv), mean_of(&mut g, &vfm)) {
            losses.video_g_adv = finite("video_g_adv", g.value(a).item(), step)?;
            losses.video_fm = finite("video_fm", g.value(f).item(), step)?;
            terms.push((w.w_video_adv, a));
            terms.push((w.w_video_fm, f));
        }
        let total = weighted_sum(&mut g, &terms);
        losses.g_total = finite("g_total", g.value(total).item(), step)?;
        let g_grads = gp.grads(&g, &g.backward(total));

        self.adam_d.step(&mut self.d_params, &d_grads);
        self.adam_g.step(&mut self.g_params, &g_grads);
        Ok(losses)
    }

    fn r1_into<C: Critic + ?Sized>(
        &self,
        critic: &C,
        real: Tensor,
        grads: &mut [Tensor],
    ) -> Result<f64> {
        let mut g = Graph::new();
        let x = g.leaf(real);
        let r1 = r1_penalty(&g, critic, &self.d_params, x, self.weights.w_r1)?;
        accumulate_grads(grads, &r1.param_grads);
        Ok(r1.value)
    }

    /// Validation metric: FID for image models, FVD for video models, both
    /// over a fixed random-projection feature space.
    pub fn evaluate(&self) -> Result<f64> {
        let set = self.val.as_ref().unwrap_or(&self.data);
        let res = self.net.resolution;
        let n = self.cfg.eval_samples.max(2).min(set.len());
        match set {
            PreparedSet::Images(items) => {
                let mut real = Vec::new();
                let mut fake = Vec::new();
                for chunk in items[..n].chunks(8) {
                    let refs: Vec<&Prepared> = chunk.iter().collect();
                    let batch = batch_of(&refs);
                    let out = self.generate(&batch.input)?;
                    for i in 0..chunk.len() {
                        real.push(Image::from_tensor(&batch.target, i));
                        fake.push(Image::from_tensor(&out, i));
                    }
                }
                fid(
                    &real,
                    &fake,
                    &RandomProjection::for_images(self.cfg.seed ^ 0xF1D, res, res, 16),
                )
            }
            PreparedSet::Videos(seqs) => {
                let len = seqs[..n]
                    .iter()
                    .map(Vec::len)
                    .min()
                    .unwrap()
                    .min(self.cfg.unroll_len);
                let mut real = Vec::new();
                let mut fake = Vec::new();
                for seq in &seqs[..n] {
                    let inputs: Vec<StageInput> =
                        seq[..len].iter().map(|p| p.input.clone()).collect();
                    let mut g = Graph::no_grad();
                    let gp = Binding::new(&mut g, &self.g_params, false);
                    let mut buffers = self.g_buffers.clone();
                    let mut cx = Ctx {
                        graph: &mut g,
                        params: &gp,
                        buffers: &mut buffers,
                        mode: Mode::Eval,
                    };
                    let outs = unroll(&self.gen, &mut cx, &inputs)?;
                    fake.push(
                        outs.iter()
                            .map(|o| Image::from_tensor(g.value(o.output), 0))
                            .collect::<Vec<_>>(),
                    );
                    real.push(
                        seq[..len]
                            .iter()
                            .map(|p| Image::from_tensor(&p.target, 0))
                            .collect::<Vec<_>>(),
                    );
                }
                fvd(
                    &real,
                    &fake,
                    &RandomProjection::for_clips(self.cfg.seed ^ 0xF5D, len, res, res, 16),
                )
            }
        }
    }

    fn generate(&self, input: &StageInput) -> Result<Tensor> {
        let mut g = Graph::no_grad();
        let gp = Binding::new(&mut g, &self.g_params, false);
        let mut buffers = self.g_buffers.clone();
        let mut cx = Ctx {
            graph: &mut g,
            params: &gp,
            buffers: &mut buffers,
            mode: Mode::Eval,
        };
        let out = two_stage_forward(&self.gen, &mut cx, input)?;
        Ok(g.value(out.output).clone())
    }

    /// Records a validation result for best-model selection.
    pub fn record_eval(&mut self, metric: f64) -> bool {
        let record = EvalRecord {
            step: self.step,
            metric,
        };
        self.evals.push(record);
        let (params, buffers) = (&self.g_params, &self.g_buffers);
        self.selector.observe(record, || GeneratorState {
            params: params.clone(),
            buffers: buffers.clone(),
        })
    }

    /// Trains until `max_steps`, stagnation, or the observer asks to stop.
    pub fn run(&mut self, observer: &mut dyn TrainObserver) -> Result<StopReason> {
        loop {
            if let Some(reason) = self.advance(observer)? {
                return Ok(reason);
            }
        }
    }

    /// One step of [`Trainer::run`], with the evaluation due after it.
    /// Returns why training should stop, if it should.
    pub fn advance(&mut self, observer: &mut dyn TrainObserver) -> Result<Option<StopReason>> {
        if self.step >= self.cfg.max_steps {
            return Ok(Some(StopReason::MaxSteps));
        }
        let report = self.step()?;
        let stop = observer.on_step(&report) == Control::Stop;
        if self.cfg.eval_interval > 0 && self.step.is_multiple_of(self.cfg.eval_interval) {
            let metric = self.evaluate()?;
            let improved = self.record_eval(metric);
            log::info!(
                "step {}: validation metric {metric:.6}{}",
                self.step,
                if improved { " (best)" } else { "" }
            );
            observer.on_eval(self.evals.last().unwrap(), improved);
            if self.selector.stagnant >= self.cfg.stagnation_evals {
                log::info!(
                    "stopping: {} evaluations without improvement",
                    self.selector.stagnant
                );
                return Ok(Some(StopReason::Stagnation));
            }
        }
        Ok(if stop {
            Some(StopReason::Interrupted)
        } else if self.step >= self.cfg.max_steps {
            Some(StopReason::MaxSteps)
        } else {
            None
        })
    }
}

/// Generates consecutive frames, feeding each composited output back as the
/// newest past frame. Frames before the first are zero volumes.
pub fn unroll(
    gen: &Generator,
    cx: &mut Ctx<'_>,
    frames: &[StageInput],
) -> Result<Vec<StageOutputs>> {
    let mut outs: Vec<StageOutputs> = Vec::with_capacity(frames.len());
    for (t, frame) in frames.iter().enumerate() {
        let zeros = || {
            let [n, _, h, w] = frame.crop.shape();
            Tensor::zeros([n, 3, h, w])
        };
        let past = |k: usize| {
            if t >= k {
                cx.graph.value(outs[t - k].output).clone()
            } else {
                zeros()
            }
        };
        let (older, newer) = (past(2), past(1));
        let input = StageInput {
            pasts: None,
            ..frame.clone()
        }
        .with_pasts(&older, &newer);
        outs.push(two_stage_forward(gen, cx, &input)?);
    }
    Ok(outs)
}

fn run_training(
    net: NetConfig,
    cfg: TrainConfig,
    weights: LossWeights,
    data: &Dataset,
    val: Option<&Dataset>,
) -> core::result::Result<Checkpoint, TrainFailure> {
    let fail = |error| TrainFailure {
        error,
        last_good: None,
    };
    let mut trainer = Trainer::new(net, cfg, weights, data).map_err(fail)?;
    if let Some(v) = val {
        trainer = trainer.with_validation(v).map_err(fail)?;
    }
    match trainer.run(&mut ()) {
        Ok(_) => Ok(trainer.checkpoint()),
        Err(error) => Err(TrainFailure {
            error,
            last_good: Some(Box::new(trainer.checkpoint())),
        }),
    }
}

/// Trains an image model to completion.
pub fn train_image(
    net: NetConfig,
    cfg: TrainConfig,
    weights: LossWeights,
    data: &Dataset,
    val: Option<&Dataset>,
) -> core::result::Result<Checkpoint, TrainFailure> {
    run_training(
        net,
        TrainConfig {
            mode: TrainMode::Image,
            ..cfg
        },
        weights,
        data,
        val,
    )
}

/// Trains a video model to completion.
pub fn train_video(
    net: NetConfig,
    cfg: TrainConfig,
    weights: LossWeights,
    data: &Dataset,
    val: Option<&Dataset>,
) -> core::result::Result<Checkpoint, TrainFailure> {
    run_training(
        net,
        TrainConfig {
            mode: TrainMode::Video,
            ..cfg
        },
        weights,
        data,
        val,
    )
}
