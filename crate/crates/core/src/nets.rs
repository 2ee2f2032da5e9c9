//! Generator and discriminator architectures.
//!
//! Networks hold [`ParamId`]s only; values live in a [`ParamStore`] owned by
//! the caller so optimizers and checkpoints can treat them uniformly.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::math;
use crate::nn::{instance_norm, BatchNorm, Binding, Conv2d, ConvTranspose2d, Ctx, ParamStore};

/// Channel width of the coarse U-Net bottleneck.
pub const BOTTLENECK_WIDTH: usize = 1000;
/// Negative slope of every leaky ReLU.
pub const LEAKY_SLOPE: f64 = 0.2;
/// Frame strides of the video discriminator's temporal pyramid.
pub const TIME_SCALES: [usize; 3] = [1, 3, 9];
/// Channels of the image-mode generator input: crop (3) + border mask + anonymization mask.
pub const IMAGE_INPUT_CHANNELS: usize = 5;
/// Channels of the video-mode generator input: two past frames (6) + [`IMAGE_INPUT_CHANNELS`].
pub const VIDEO_INPUT_CHANNELS: usize = 11;
/// Video discriminator input: three frames, each with its anonymization mask.
pub const VIDEO_DISC_CHANNELS: usize = 12;

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct NetConfig {
    /// Square model resolution (power of two).
    pub resolution: usize,
    /// Coarse encoder widths; one per stride-2 step, ending in [`BOTTLENECK_WIDTH`].
    pub coarse_channels: Vec<usize>,
    pub fine_base_width: usize,
    pub fine_downsamples: usize,
    pub n_residual_blocks: usize,
    pub disc_base_width: usize,
    /// Stride-2 layers per patch discriminator.
    pub disc_layers: usize,
    pub n_image_disc_scales: usize,
    pub n_time_scales: usize,
    pub video_mode: bool,
}

impl NetConfig {
    pub fn new(resolution: usize) -> Self {
        Self {
            resolution,
            coarse_channels: Self::default_coarse_channels(resolution),
            fine_base_width: 64,
            fine_downsamples: 2,
            n_residual_blocks: 9,
            disc_base_width: 64,
            disc_layers: 3,
            n_image_disc_scales: 3,
            n_time_scales: 3,
            video_mode: false,
        }
    }

    pub fn video(resolution: usize) -> Self {
        Self {
            video_mode: true,
            ..Self::new(resolution)
        }
    }

    /// Same topology with every width derived from `base` instead of 64 and
    /// `residual_blocks` refinement blocks; for quick experiments.
    pub fn scaled(resolution: usize, base: usize, residual_blocks: usize) -> Self {
        let mut cfg = Self::new(resolution);
        let depth = cfg.coarse_channels.len();
        for (i, w) in cfg
            .coarse_channels
            .iter_mut()
            .take(depth.saturating_sub(1))
            .enumerate()
        {
            *w = base << i.min(3);
        }
        cfg.fine_base_width = base;
        cfg.disc_base_width = base;
        cfg.n_residual_blocks = residual_blocks;
        cfg
    }

    /// `64, 128, 256, 512, 512, ...` ending in the bottleneck, `log2(resolution)` entries.
    pub fn default_coarse_channels(resolution: usize) -> Vec<usize> {
        let depth = math::log2_exact(resolution).unwrap_or(0) as usize;
        let mut widths: Vec<usize> = (0..depth.saturating_sub(1))
            .map(|i| (64 << i.min(3)).min(512))
            .collect();
        if depth > 0 {
            widths.push(BOTTLENECK_WIDTH);
        }
        widths
    }

    pub fn validate(&self) -> Result<()> {
        let depth = math::log2_exact(self.resolution)
            .filter(|&d| d >= 3)
            .ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "resolution {} is not a power of two >= 8",
                    self.resolution
                ))
            })? as usize;
        if self.coarse_channels.len() != depth {
            return Err(Error::InvalidConfig(format!(
                "coarse encoder needs {depth} widths for resolution {}, got {}",
                self.resolution,
                self.coarse_channels.len()
            )));
        }
        if self.coarse_channels.last() != Some(&BOTTLENECK_WIDTH) {
            return Err(Error::InvalidConfig(format!(
                "coarse bottleneck width must be {BOTTLENECK_WIDTH}"
            )));
        }
        if self.coarse_channels.contains(&0)
            || self.fine_base_width == 0
            || self.disc_base_width == 0
        {
            return Err(Error::InvalidConfig("layer widths must be positive".into()));
        }
        if self.fine_downsamples >= depth
            || self.n_image_disc_scales == 0
            || self.n_image_disc_scales > depth - 1
        {
            return Err(Error::InvalidConfig(
                "too many downsampling steps for the resolution".into(),
            ));
        }
        if self.disc_layers == 0
            || self.n_time_scales == 0
            || self.n_time_scales > TIME_SCALES.len()
        {
            return Err(Error::InvalidConfig(
                "disc_layers >= 1 and 1 <= n_time_scales <= 3 required".into(),
            ));
        }
        Ok(())
    }

    pub fn generator_in_channels(&self) -> usize {
        if self.video_mode {
            VIDEO_INPUT_CHANNELS
        } else {
            IMAGE_INPUT_CHANNELS
        }
    }

    pub fn time_scales(&self) -> &[usize] {
        &TIME_SCALES[..self.n_time_scales]
    }
}

fn check_input(g: &Graph, x: Var, channels: usize, side: usize, what: &str) -> Result<()> {
    let [_, c, h, w] = g.shape(x);
    if c != channels || h != side || w != side {
        return Err(Error::ShapeMismatch(format!(
            "{what} expects {channels}x{side}x{side}, got {c}x{h}x{w}"
        )));
    }
    Ok(())
}

#[derive(Clone, Debug)]
struct DownBlock {
    conv: Conv2d,
    norm: Option<BatchNorm>,
}

#[derive(Clone, Debug)]
struct UpBlock {
    conv: ConvTranspose2d,
    norm: BatchNorm,
}

/// Half-resolution U-Net draft stage.
#[derive(Clone, Debug)]
pub struct CoarseGenerator {
    down: Vec<DownBlock>,
    up: Vec<UpBlock>,
    head: Conv2d,
    in_channels: usize,
    resolution: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct CoarseOutput {
    /// `3 x h/2 x w/2` in `[-1, 1]`.
    pub image: Var,
    /// `1000 x 1 x 1`.
    pub bottleneck: Var,
}

impl CoarseGenerator {
    fn new<R: Rng>(
        cfg: &NetConfig,
        params: &mut ParamStore,
        buffers: &mut ParamStore,
        rng: &mut R,
    ) -> Self {
        let widths = &cfg.coarse_channels;
        let depth = widths.len();
        let mut down = Vec::with_capacity(depth);
        let mut cin = cfg.generator_in_channels();
        for (i, &w) in widths.iter().enumerate() {
            // No normalization on the outermost layer or on the 1x1 bottleneck.
            let normed = i > 0 && i + 1 < depth;
            let name = format!("coarse.down{i}");
            let conv = Conv2d::new(params, rng, &name, cin, w, 4, 2, 1, !normed);
            let norm =
                normed.then(|| BatchNorm::new(params, buffers, rng, &format!("{name}.bn"), w));
            down.push(DownBlock { conv, norm });
            cin = w;
        }
        let mut up = Vec::with_capacity(depth - 1);
        for j in 0..depth - 1 {
            let skip_level = depth - 2 - j;
            let cin = if j == 0 {
                widths[depth - 1]
            } else {
                2 * widths[skip_level + 1]
            };
            let cout = widths[skip_level];
            let name = format!("coarse.up{j}");
            let conv = ConvTranspose2d::new(params, rng, &name, cin, cout, 4, 2, 1, false);
            let norm = BatchNorm::new(params, buffers, rng, &format!("{name}.bn"), cout);
            up.push(UpBlock { conv, norm });
        }
        let head = Conv2d::new(params, rng, "coarse.head", 2 * widths[0], 3, 3, 1, 1, true);
        Self {
            down,
            up,
            head,
            in_channels: cfg.generator_in_channels(),
            resolution: cfg.resolution,
        }
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<CoarseOutput> {
        check_input(
            cx.graph,
            x,
            self.in_channels,
            self.resolution,
            "coarse stage",
        )?;
        let mut skips = Vec::with_capacity(self.down.len());
        let mut h = x;
        for block in &self.down {
            h = block.conv.forward(cx.graph, cx.params, h);
            if let Some(norm) = &block.norm {
                h = norm.forward(cx, h);
            }
            h = cx.graph.leaky_relu(h, LEAKY_SLOPE);
            skips.push(h);
        }
        let bottleneck = h;
        let depth = skips.len();
        for (j, block) in self.up.iter().enumerate() {
            h = block.conv.forward(cx.graph, cx.params, h);
            h = block.norm.forward(cx, h);
            h = cx.graph.relu(h);
            h = cx.graph.concat(&[h, skips[depth - 2 - j]]);
        }
        h = self.head.forward(cx.graph, cx.params, h);
        let image = cx.graph.tanh(h);
        Ok(CoarseOutput { image, bottleneck })
    }

    /// Activation shapes `[C, H, W]`: encoder outputs, decoder outputs after
    /// skip concatenation, then the output image.
    pub fn shape_plan(&self) -> Vec<[usize; 3]> {
        let mut plan = Vec::new();
        let mut side = self.resolution;
        let mut enc = Vec::new();
        for block in &self.down {
            side = block.conv.output_size(side);
            enc.push([block.conv.out_channels, side, side]);
        }
        plan.extend(&enc);
        let depth = enc.len();
        for (j, block) in self.up.iter().enumerate() {
            let c = &block.conv;
            side = (side - 1) * c.stride + c.kernel - 2 * c.pad;
            let skip = enc[depth - 2 - j];
            debug_assert_eq!(skip[1], side);
            plan.push([c.out_channels + skip[0], side, side]);
        }
        plan.push([
            self.head.out_channels,
            self.head.output_size(side),
            self.head.output_size(side),
        ]);
        plan
    }
}

#[derive(Clone, Debug)]
struct ResidualBlock {
    a: Conv2d,
    b: Conv2d,
}

/// Full-resolution refinement stage: 7x7 ingress, strided downsampling,
/// residual blocks, upsample + conv, 7x7 egress, tanh.
#[derive(Clone, Debug)]
pub struct FineGenerator {
    ingress: Conv2d,
    down: Vec<Conv2d>,
    blocks: Vec<ResidualBlock>,
    up: Vec<Conv2d>,
    egress: Conv2d,
    in_channels: usize,
    resolution: usize,
}

impl FineGenerator {
    fn new<R: Rng>(cfg: &NetConfig, params: &mut ParamStore, rng: &mut R) -> Self {
        let base = cfg.fine_base_width;
        let ingress = Conv2d::new(
            params,
            rng,
            "fine.ingress",
            cfg.generator_in_channels(),
            base,
            7,
            1,
            3,
            false,
        );
        let mut width = base;
        let mut down = Vec::new();
        for i in 0..cfg.fine_downsamples {
            down.push(Conv2d::new(
                params,
                rng,
                &format!("fine.down{i}"),
                width,
                2 * width,
                3,
                2,
                1,
                false,
            ));
            width *= 2;
        }
        let blocks = (0..cfg.n_residual_blocks)
            .map(|i| ResidualBlock {
                a: Conv2d::new(
                    params,
                    rng,
                    &format!("fine.res{i}.a"),
                    width,
                    width,
                    3,
                    1,
                    1,
                    false,
                ),
                b: Conv2d::new(
                    params,
                    rng,
                    &format!("fine.res{i}.b"),
                    width,
                    width,
                    3,
                    1,
                    1,
                    false,
                ),
            })
            .collect();
        let mut up = Vec::new();
        for i in 0..cfg.fine_downsamples {
            up.push(Conv2d::new(
                params,
                rng,
                &format!("fine.up{i}"),
                width,
                width / 2,
                3,
                1,
                1,
                false,
            ));
            width /= 2;
        }
        let egress = Conv2d::new(params, rng, "fine.egress", width, 3, 7, 1, 3, true);
        Self {
            ingress,
            down,
            blocks,
            up,
            egress,
            in_channels: cfg.generator_in_channels(),
            resolution: cfg.resolution,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Binding, x: Var) -> Result<Var> {
        check_input(g, x, self.in_channels, self.resolution, "fine stage")?;
        let mut h = self.ingress.forward(g, p, x);
        h = instance_norm(g, h);
        h = g.relu(h);
        for conv in &self.down {
            h = conv.forward(g, p, h);
            h = instance_norm(g, h);
            h = g.relu(h);
        }
        for block in &self.blocks {
            let mut r = block.a.forward(g, p, h);
            r = instance_norm(g, r);
            r = g.relu(r);
            r = block.b.forward(g, p, r);
            r = instance_norm(g, r);
            h = g.add(h, r);
        }
        for conv in &self.up {
            h = g.upsample_nearest2(h);
            h = conv.forward(g, p, h);
            h = instance_norm(g, h);
            h = g.relu(h);
        }
        h = self.egress.forward(g, p, h);
        Ok(g.tanh(h))
    }

    pub fn shape_plan(&self) -> Vec<[usize; 3]> {
        let mut side = self.ingress.output_size(self.resolution);
        let mut plan = vec![[self.ingress.out_channels, side, side]];
        for conv in &self.down {
            side = conv.output_size(side);
            plan.push([conv.out_channels, side, side]);
        }
        for block in &self.blocks {
            side = block.b.output_size(block.a.output_size(side));
            plan.push([block.b.out_channels, side, side]);
        }
        for conv in &self.up {
            side = conv.output_size(2 * side);
            plan.push([conv.out_channels, side, side]);
        }
        side = self.egress.output_size(side);
        plan.push([self.egress.out_channels, side, side]);
        plan
    }
}

/// Coarse and fine stages sharing one parameter store.
#[derive(Clone, Debug)]
pub struct Generator {
    pub config: NetConfig,
    pub coarse: CoarseGenerator,
    pub fine: FineGenerator,
}

impl Generator {
    /// Builds the architecture and freshly initialized `(params, buffers)`.
    pub fn build<R: Rng>(cfg: &NetConfig, rng: &mut R) -> Result<(Self, ParamStore, ParamStore)> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let mut buffers = ParamStore::new();
        let coarse = CoarseGenerator::new(cfg, &mut params, &mut buffers, rng);
        let fine = FineGenerator::new(cfg, &mut params, rng);
        Ok((
            Self {
                config: cfg.clone(),
                coarse,
                fine,
            },
            params,
            buffers,
        ))
    }
}

/// One patch discriminator's score map and intermediate activations.
#[derive(Clone, Debug)]
pub struct DiscOutput {
    pub score: Var,
    pub features: Vec<Var>,
}

/// Strided 4x4 convolutional patch classifier.
#[derive(Clone, Debug)]
pub struct PatchDiscriminator {
    layers: Vec<Conv2d>,
}

impl PatchDiscriminator {
    fn new<R: Rng>(
        cfg: &NetConfig,
        in_channels: usize,
        params: &mut ParamStore,
        rng: &mut R,
        name: &str,
    ) -> Self {
        let w = cfg.disc_base_width;
        let mut layers = Vec::new();
        let mut cin = in_channels;
        for i in 0..cfg.disc_layers {
            let cout = (w << i.min(3)).min(8 * w);
            layers.push(Conv2d::new(
                params,
                rng,
                &format!("{name}.conv{i}"),
                cin,
                cout,
                4,
                2,
                2,
                true,
            ));
            cin = cout;
        }
        let cout = (w << cfg.disc_layers.min(3)).min(8 * w);
        layers.push(Conv2d::new(
            params,
            rng,
            &format!("{name}.conv{}", cfg.disc_layers),
            cin,
            cout,
            4,
            1,
            2,
            true,
        ));
        layers.push(Conv2d::new(
            params,
            rng,
            &format!("{name}.score"),
            cout,
            1,
            4,
            1,
            2,
            true,
        ));
        Self { layers }
    }

    /// Number of feature-matching activations produced per evaluation.
    pub fn feature_layers(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn forward(&self, g: &mut Graph, p: &Binding, x: Var) -> DiscOutput {
        let (last, hidden) = self.layers.split_last().expect("at least one layer");
        let mut features = Vec::with_capacity(hidden.len());
        let mut h = x;
        for conv in hidden {
            h = conv.forward(g, p, h);
            h = g.leaky_relu(h, LEAKY_SLOPE);
            features.push(h);
        }
        DiscOutput {
            score: last.forward(g, p, h),
            features,
        }
    }
}

/// Identical patch discriminators applied at successive 2x average-pooled scales.
#[derive(Clone, Debug)]
pub struct MultiScaleDiscriminator {
    pub scales: Vec<PatchDiscriminator>,
    in_channels: usize,
}

impl MultiScaleDiscriminator {
    fn new<R: Rng>(
        cfg: &NetConfig,
        in_channels: usize,
        params: &mut ParamStore,
        rng: &mut R,
        name: &str,
    ) -> Self {
        let scales = (0..cfg.n_image_disc_scales)
            .map(|i| {
                PatchDiscriminator::new(cfg, in_channels, params, rng, &format!("{name}.scale{i}"))
            })
            .collect();
        Self {
            scales,
            in_channels,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn forward(&self, g: &mut Graph, p: &Binding, x: Var) -> Result<Vec<DiscOutput>> {
        let [_, c, h, w] = g.shape(x);
        if c != self.in_channels || h != w || h >> (self.scales.len() - 1) == 0 {
            return Err(Error::ShapeMismatch(format!(
                "discriminator expects {} channels and a square input, got {c}x{h}x{w}",
                self.in_channels
            )));
        }
        let mut out = Vec::with_capacity(self.scales.len());
        let mut input = x;
        for (i, disc) in self.scales.iter().enumerate() {
            if i > 0 {
                input = g.avg_pool2(input);
            }
            out.push(disc.forward(g, p, input));
        }
        Ok(out)
    }
}

/// One multi-scale discriminator per temporal stride, each with its own parameters.
#[derive(Clone, Debug)]
pub struct VideoDiscriminator {
    pub time_scales: Vec<MultiScaleDiscriminator>,
}

impl VideoDiscriminator {
    /// Scores a 12-channel frame triple with the discriminator for `TIME_SCALES[scale_index]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Binding,
        scale_index: usize,
        x: Var,
    ) -> Result<Vec<DiscOutput>> {
        let disc = self.time_scales.get(scale_index).ok_or_else(|| {
            Error::InvalidConfig(format!(
                "no video discriminator for time scale #{scale_index}"
            ))
        })?;
        disc.forward(g, p, x)
    }
}

/// All discriminators of a model, sharing one parameter store.
#[derive(Clone, Debug)]
pub struct Discriminators {
    pub image: MultiScaleDiscriminator,
    pub video: Option<VideoDiscriminator>,
}

impl Discriminators {
    pub fn build<R: Rng>(cfg: &NetConfig, rng: &mut R) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let image =
            MultiScaleDiscriminator::new(cfg, IMAGE_INPUT_CHANNELS, &mut params, rng, "disc.image");
        let video = cfg.video_mode.then(|| VideoDiscriminator {
            time_scales: cfg
                .time_scales()
                .iter()
                .map(|s| {
                    MultiScaleDiscriminator::new(
                        cfg,
                        VIDEO_DISC_CHANNELS,
                        &mut params,
                        rng,
                        &format!("disc.video.t{s}"),
                    )
                })
                .collect(),
        });
        Ok((Self { image, video }, params))
    }
}

/// Frame-index triple `(t0, t0 - scale, t0 - 2 * scale)` for one temporal stride.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TemporalSampleSet {
    pub scale: usize,
    pub indices: [i64; 3],
}

/// Triples for every stride in `{1, 3, 9}` whose two lagged frames are among
/// the `n_prior` frames already generated before `t0`.
pub fn temporal_sample_sets(t0: i64, n_prior: usize) -> Vec<TemporalSampleSet> {
    temporal_sample_sets_up_to(t0, n_prior, TIME_SCALES.len())
}

/// [`temporal_sample_sets`] restricted to the first `n_time_scales` strides.
pub fn temporal_sample_sets_up_to(
    t0: i64,
    n_prior: usize,
    n_time_scales: usize,
) -> Vec<TemporalSampleSet> {
    TIME_SCALES[..n_time_scales.min(TIME_SCALES.len())]
        .iter()
        .filter(|&&s| n_prior >= 2 * s)
        .map(|&s| TemporalSampleSet {
            scale: s,
            indices: [t0, t0 - s as i64, t0 - 2 * s as i64],
        })
        .collect()
}
