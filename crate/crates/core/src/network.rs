//! Encoder `Enc_pm ∘ hyperconv_e ∘ Enc_ma` and decoder `Dec_ma ∘ hyperconv_d`.
//!
//! The marker-agnostic stem runs on every input channel with shared weights,
//! the encoder hyperconvolution fuses the per-marker features into a
//! fixed-width pan-marker map, and a ConvNeXt-v2 style backbone reduces it to
//! the latent map. Decoding convolves the latent with each target marker's
//! generated kernel and applies a shared head that upsamples with a pixel
//! shuffle into a mean and a log-variance plane.
//!
//! Every layer exposes `forward` returning its output plus whatever it must
//! remember, and `backward` consuming that cache.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::hyperconv::{GeneratorSide, KernelGeneratorTable, MarkerSet, MarkerVocabulary};
use crate::params::{Grads, ParamId, ParamStore};
use crate::tensor::{
    add_channel_bias, channel_bias_backward, conv2d, conv2d_backward, grn, grn_backward,
    layer_norm_channels, layer_norm_channels_backward, pixel_shuffle, pixel_unshuffle,
    pointwise_activation, pointwise_activation_backward, sigmoid, Activation, ConvSpec, Real,
    Tensor,
};

pub const LAYER_NORM_EPS: f64 = 1e-6;
pub const GRN_EPS: f64 = 1e-6;

/// Architecture hyper-parameters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub d_ma: usize,
    pub d_pm: usize,
    pub d_lat: usize,
    pub d_ms: usize,
    pub stem_blocks: usize,
    pub stage_blocks: usize,
    pub head_blocks: usize,
    /// Widths of the backbone stages; the last one equals `d_lat`.
    pub stage_dims: Vec<usize>,
    /// Side reduction of every downsampler (stem and each stage).
    pub downsample_per_stage: usize,
    pub crop_size: usize,
    pub enc_kernel: usize,
    pub dec_kernel: usize,
    pub block_kernel: usize,
    /// Layer norm after the stem's strided convolution.
    #[serde(default)]
    pub stem_norm: bool,
}

impl NetworkConfig {
    /// Full-size configuration: 128² crops, 16² latent of width 768.
    pub fn full() -> Self {
        Self {
            d_ma: 16,
            d_pm: 192,
            d_lat: 768,
            d_ms: 512,
            stem_blocks: 6,
            stage_blocks: 6,
            head_blocks: 1,
            stage_dims: vec![384, 768],
            downsample_per_stage: 2,
            crop_size: 128,
            enc_kernel: 1,
            dec_kernel: 1,
            block_kernel: 7,
            stem_norm: false,
        }
    }

    /// Desk-scale preset used for training experiments.
    pub fn tiny() -> Self {
        Self {
            d_ma: 4,
            d_pm: 16,
            d_lat: 32,
            d_ms: 16,
            stem_blocks: 1,
            stage_blocks: 1,
            head_blocks: 1,
            stage_dims: vec![24, 32],
            downsample_per_stage: 2,
            crop_size: 32,
            enc_kernel: 1,
            dec_kernel: 1,
            block_kernel: 7,
            stem_norm: false,
        }
    }

    /// Smallest preset, sized for exhaustive finite-difference checks.
    pub fn micro() -> Self {
        Self {
            d_ma: 2,
            d_pm: 8,
            d_lat: 16,
            d_ms: 8,
            stem_blocks: 1,
            stage_blocks: 1,
            head_blocks: 1,
            stage_dims: vec![16, 16],
            downsample_per_stage: 2,
            crop_size: 16,
            enc_kernel: 1,
            dec_kernel: 1,
            block_kernel: 7,
            stem_norm: false,
        }
    }

    /// Total side reduction from input to latent; also the head's upsampling factor λ.
    pub fn upsample(&self) -> usize {
        self.downsample_per_stage.pow(1 + self.stage_dims.len() as u32)
    }

    pub fn latent_side(&self) -> usize {
        self.crop_size / self.upsample()
    }

    pub fn validate(&self) -> Result<()> {
        let widths = [self.d_ma, self.d_pm, self.d_lat, self.d_ms];
        if widths.contains(&0) || self.stage_dims.contains(&0) {
            bail!(Argument, "all widths must be positive: {self:?}");
        }
        if self.downsample_per_stage < 2 {
            bail!(Argument, "downsample factor must be at least 2");
        }
        if self.stage_dims.last().copied().unwrap_or(self.d_pm) != self.d_lat {
            bail!(Argument, "last stage width must equal d_lat {}", self.d_lat);
        }
        if !self.crop_size.is_multiple_of(self.upsample()) || self.crop_size == 0 {
            bail!(
                Dimension,
                "crop {} not divisible by total downsampling {}",
                self.crop_size,
                self.upsample()
            );
        }
        for k in [self.enc_kernel, self.dec_kernel, self.block_kernel] {
            if k % 2 == 0 {
                bail!(Argument, "kernel sizes must be odd, got {k}");
            }
        }
        Ok(())
    }

    fn same_padding(k: usize) -> ConvSpec {
        ConvSpec::new(1, k / 2)
    }

    pub fn enc_spec(&self) -> ConvSpec {
        Self::same_padding(self.enc_kernel)
    }

    pub fn dec_spec(&self) -> ConvSpec {
        Self::same_padding(self.dec_kernel)
    }
}

/// Per-marker mean (post-sigmoid) and raw log-variance, both `[C_d, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeteroPrediction<T> {
    pub mean: Tensor<T>,
    pub log_var: Tensor<T>,
}

#[derive(Clone, Debug)]
struct Conv {
    weight: ParamId,
    bias: Option<ParamId>,
    spec: ConvSpec,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    fn register<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        c_out: usize,
        c_in: usize,
        k: usize,
        spec: ConvSpec,
        std: Option<f64>,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let cig = c_in / spec.groups;
        let std = std.unwrap_or(1.0 / ((cig * k * k) as f64).sqrt());
        Self {
            weight: store.normal(format!("{name}.weight"), &[c_out, cig, k, k], std, rng),
            bias: Some(store.zeros(format!("{name}.bias"), &[c_out])),
            spec,
        }
    }

    fn forward<T: Real>(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut y = conv2d(x, p.get(self.weight), self.spec)?;
        if let Some(b) = self.bias {
            add_channel_bias(&mut y, p.get(b))?;
        }
        Ok(y)
    }

    fn backward<T: Real>(
        &self,
        p: &ParamStore<T>,
        g: &mut Grads<T>,
        x: &Tensor<T>,
        dy: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let (dx, dk) = conv2d_backward(x, p.get(self.weight), self.spec, dy)?;
        g.accumulate(self.weight, &dk)?;
        if let Some(b) = self.bias {
            g.accumulate(b, &channel_bias_backward(dy)?)?;
        }
        Ok(dx)
    }
}

#[derive(Clone, Debug)]
struct Affine {
    gamma: ParamId,
    beta: ParamId,
}

impl Affine {
    fn layer_norm<T: Real>(store: &mut ParamStore<T>, name: &str, c: usize) -> Self {
        Self {
            gamma: store.ones(format!("{name}.gamma"), &[c]),
            beta: store.zeros(format!("{name}.beta"), &[c]),
        }
    }

    fn grn<T: Real>(store: &mut ParamStore<T>, name: &str, c: usize) -> Self {
        Self {
            gamma: store.zeros(format!("{name}.gamma"), &[c]),
            beta: store.zeros(format!("{name}.beta"), &[c]),
        }
    }

    fn norm_forward<T: Real>(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        layer_norm_channels(x, p.get(self.gamma), p.get(self.beta), T::of(LAYER_NORM_EPS))
    }

    fn norm_backward<T: Real>(
        &self,
        p: &ParamStore<T>,
        g: &mut Grads<T>,
        x: &Tensor<T>,
        dy: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let (dx, dg, db) = layer_norm_channels_backward(x, p.get(self.gamma), T::of(LAYER_NORM_EPS), dy)?;
        g.accumulate(self.gamma, &dg)?;
        g.accumulate(self.beta, &db)?;
        Ok(dx)
    }

    fn grn_forward<T: Real>(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        grn(x, p.get(self.gamma), p.get(self.beta), T::of(GRN_EPS))
    }

    fn grn_backward<T: Real>(
        &self,
        p: &ParamStore<T>,
        g: &mut Grads<T>,
        x: &Tensor<T>,
        dy: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let (dx, dg, db) = grn_backward(x, p.get(self.gamma), T::of(GRN_EPS), dy)?;
        g.accumulate(self.gamma, &dg)?;
        g.accumulate(self.beta, &db)?;
        Ok(dx)
    }
}

/// ConvNeXt-v2 residual block:
/// depthwise k×k → channel LayerNorm → 1×1 to 4C → GELU → GRN → 1×1 to C → + input.
#[derive(Clone, Debug)]
pub struct ConvNextBlock {
    dw: Conv,
    norm: Affine,
    expand: Conv,
    grn: Affine,
    project: Conv,
}

#[derive(Clone, Debug)]
pub struct BlockCache<T> {
    x: Tensor<T>,
    dw_out: Tensor<T>,
    norm_out: Tensor<T>,
    expand_out: Tensor<T>,
    act_out: Tensor<T>,
    grn_out: Tensor<T>,
}

impl ConvNextBlock {
    fn register<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        c: usize,
        k: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            dw: Conv::register(store, &format!("{name}.dw"), c, c, k, ConvSpec::depthwise(c, k / 2), None, rng),
            norm: Affine::layer_norm(store, &format!("{name}.norm"), c),
            expand: Conv::register(store, &format!("{name}.pw1"), 4 * c, c, 1, ConvSpec::default(), None, rng),
            grn: Affine::grn(store, &format!("{name}.grn"), 4 * c),
            project: Conv::register(store, &format!("{name}.pw2"), c, 4 * c, 1, ConvSpec::default(), None, rng),
        }
    }

    pub fn forward<T: Real>(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<(Tensor<T>, BlockCache<T>)> {
        let dw_out = self.dw.forward(p, x)?;
        let norm_out = self.norm.norm_forward(p, &dw_out)?;
        let expand_out = self.expand.forward(p, &norm_out)?;
        let act_out = pointwise_activation(&expand_out, Activation::Gelu);
        let grn_out = self.grn.grn_forward(p, &act_out)?;
        let mut y = self.project.forward(p, &grn_out)?;
        y.add_assign(x)?;
        Ok((
            y,
            BlockCache {
                x: x.clone(),
                dw_out,
                norm_out,
                expand_out,
                act_out,
                grn_out,
            },
        ))
    }

    pub fn backward<T: Real>(
        &self,
        p: &ParamStore<T>,
        g: &mut Grads<T>,
        cache: &BlockCache<T>,
        dy: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let d_grn = self.project.backward(p, g, &cache.grn_out, dy)?;
        let d_act = self.grn.grn_backward(p, g, &cache.act_out, &d_grn)?;
        let d_expand = pointwise_activation_backward(&cache.expand_out, Activation::Gelu, &d_act)?;
        let d_norm = self.expand.backward(p, g, &cache.norm_out, &d_expand)?;
        let d_dw = self.norm.norm_backward(p, g, &cache.dw_out, &d_norm)?;
        let mut dx = self.dw.backward(p, g, &cache.x, &d_dw)?;
        dx.add_assign(dy)?;
        Ok(dx)
    }
}

/// Strided non-overlapping conv paired with a channel LayerNorm.
#[derive(Clone, Debug)]
struct Downsample {
    conv: Conv,
    norm: Option<Affine>,
    norm_first: bool,
}

#[derive(Clone, Debug)]
struct DownCache<T> {
    x: Tensor<T>,
    mid: Tensor<T>,
}

impl Downsample {
    /// `norm` places a layer norm before (`Some(true)`) or after
    /// (`Some(false)`) the strided convolution.
    #[allow(clippy::too_many_arguments)]
    fn register<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        factor: usize,
        norm: Option<bool>,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let norm_first = norm == Some(true);
        let norm = norm.map(|first| Affine::layer_norm(store, &format!("{name}.norm"), if first { c_in } else { c_out }));
        let conv = Conv::register(store, &format!("{name}.conv"), c_out, c_in, factor, ConvSpec::new(factor, 0), None, rng);
        Self { conv, norm, norm_first }
    }

    fn forward<T: Real>(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<(Tensor<T>, DownCache<T>)> {
        let (_, h, w) = x.chw()?;
        let f = self.conv.spec.stride;
        if h % f != 0 || w % f != 0 {
            bail!(Dimension, "{h}x{w} not divisible by downsampling factor {f}");
        }
        let Some(norm) = &self.norm else {
            let y = self.conv.forward(p, x)?;
            return Ok((y, DownCache { x: x.clone(), mid: Tensor::zeros(&[1]) }));
        };
        if self.norm_first {
            let mid = norm.norm_forward(p, x)?;
            let y = self.conv.forward(p, &mid)?;
            Ok((y, DownCache { x: x.clone(), mid }))
        } else {
            let mid = self.conv.forward(p, x)?;
            let y = norm.norm_forward(p, &mid)?;
            Ok((y, DownCache { x: x.clone(), mid }))
        }
    }

    fn backward<T: Real>(
        &self,
        p: &ParamStore<T>,
        g: &mut Grads<T>,
        cache: &DownCache<T>,
        dy: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let Some(norm) = &self.norm else {
            return self.conv.backward(p, g, &cache.x, dy);
        };
        if self.norm_first {
            let dmid = self.conv.backward(p, g, &cache.mid, dy)?;
            norm.norm_backward(p, g, &cache.x, &dmid)
        } else {
            let dmid = norm.norm_backward(p, g, &cache.mid, dy)?;
            self.conv.backward(p, g, &cache.x, &dmid)
        }
    }
}

/// Downsampler followed by residual blocks.
#[derive(Clone, Debug)]
struct Stage {
    down: Downsample,
    blocks: Vec<ConvNextBlock>,
}

#[derive(Clone, Debug)]
struct StageCache<T> {
    down: DownCache<T>,
    blocks: Vec<BlockCache<T>>,
}

impl Stage {
    fn forward<T: Real>(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<(Tensor<T>, StageCache<T>)> {
        let (mut h, down) = self.down.forward(p, x)?;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, c) = b.forward(p, &h)?;
            blocks.push(c);
            h = y;
        }
        Ok((h, StageCache { down, blocks }))
    }

    fn backward<T: Real>(
        &self,
        p: &ParamStore<T>,
        g: &mut Grads<T>,
        cache: &StageCache<T>,
        dy: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let mut d = dy.clone();
        for (b, c) in self.blocks.iter().zip(&cache.blocks).rev() {
            d = b.backward(p, g, c, &d)?;
        }
        self.down.backward(p, g, &cache.down, &d)
    }
}

/// Shared per-marker head: blocks → 1×1 conv to 2λ² → pixel shuffle.
#[derive(Clone, Debug)]
struct Head {
    blocks: Vec<ConvNextBlock>,
    proj: Conv,
    upsample: usize,
}

#[derive(Clone, Debug)]
struct HeadCache<T> {
    blocks: Vec<BlockCache<T>>,
    features: Tensor<T>,
    raw_mean: Tensor<T>,
}

impl Head {
    /// Returns the `[2, λH, λW]` pre-activation planes.
    fn forward<T: Real>(&self, p: &ParamStore<T>, u: &Tensor<T>) -> Result<(Tensor<T>, Vec<BlockCache<T>>, Tensor<T>)> {
        let mut h = u.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, c) = b.forward(p, &h)?;
            caches.push(c);
            h = y;
        }
        let proj = self.proj.forward(p, &h)?;
        Ok((pixel_shuffle(&proj, self.upsample)?, caches, h))
    }
}

/// Forward intermediates retained for [`Network::encode_backward`].
#[derive(Clone, Debug)]
pub struct EncodeCache<T> {
    set: MarkerSet,
    stems: Vec<StageCache<T>>,
    stacked: Tensor<T>,
    stages: Vec<StageCache<T>>,
    input_dims: Vec<usize>,
}

/// Forward intermediates retained for [`Network::decode_backward`].
#[derive(Clone, Debug)]
pub struct DecodeCache<T> {
    set: MarkerSet,
    latent: Tensor<T>,
    heads: Vec<HeadCache<T>>,
}

/// The full encoder-decoder with its parameters.
#[derive(Clone, Debug)]
pub struct Network<T> {
    config: NetworkConfig,
    vocab: MarkerVocabulary,
    params: ParamStore<T>,
    stem: Stage,
    enc_table: KernelGeneratorTable,
    stages: Vec<Stage>,
    dec_table: KernelGeneratorTable,
    head: Head,
}

impl<T: Real> Network<T> {
    /// Builds a freshly initialised network; identical seeds give identical parameters.
    pub fn new(config: NetworkConfig, vocab: MarkerVocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        if vocab.is_empty() {
            bail!(Vocabulary, "empty marker vocabulary");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let cfg = &config;
        let f = cfg.downsample_per_stage;
        let k = cfg.block_kernel;

        let stem = Stage {
            down: Downsample::register(&mut p, "stem.down", 1, cfg.d_ma, f, cfg.stem_norm.then_some(false), &mut rng),
            blocks: (0..cfg.stem_blocks)
                .map(|i| ConvNextBlock::register(&mut p, &format!("stem.block{i}"), cfg.d_ma, k, &mut rng))
                .collect(),
        };
        let enc_table = KernelGeneratorTable::register(
            &mut p,
            "enc_hyper.table",
            GeneratorSide::Encoder,
            [cfg.d_pm, cfg.d_ma, cfg.enc_kernel, cfg.enc_kernel],
            vocab.len(),
            &mut rng,
        );
        let mut stages = Vec::with_capacity(cfg.stage_dims.len());
        let mut width = cfg.d_pm;
        for (s, &dim) in cfg.stage_dims.iter().enumerate() {
            stages.push(Stage {
                down: Downsample::register(&mut p, &format!("stage{s}.down"), width, dim, f, Some(true), &mut rng),
                blocks: (0..cfg.stage_blocks)
                    .map(|i| ConvNextBlock::register(&mut p, &format!("stage{s}.block{i}"), dim, k, &mut rng))
                    .collect(),
            });
            width = dim;
        }
        let dec_table = KernelGeneratorTable::register(
            &mut p,
            "dec_hyper.table",
            GeneratorSide::Decoder,
            [cfg.d_ms, cfg.d_lat, cfg.dec_kernel, cfg.dec_kernel],
            vocab.len(),
            &mut rng,
        );
        let lambda = cfg.upsample();
        let head = Head {
            blocks: (0..cfg.head_blocks)
                .map(|i| ConvNextBlock::register(&mut p, &format!("head.block{i}"), cfg.d_ms, k, &mut rng))
                .collect(),
            proj: Conv::register(
                &mut p,
                "head.proj",
                2 * lambda * lambda,
                cfg.d_ms,
                1,
                ConvSpec::default(),
                Some(0.02),
                &mut rng,
            ),
            upsample: lambda,
        };
        Ok(Self {
            config,
            vocab,
            params: p,
            stem,
            enc_table,
            stages,
            dec_table,
            head,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn vocab(&self) -> &MarkerVocabulary {
        &self.vocab
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn encoder_table(&self) -> &KernelGeneratorTable {
        &self.enc_table
    }

    pub fn decoder_table(&self) -> &KernelGeneratorTable {
        &self.dec_table
    }

    pub fn zero_grads(&self) -> Grads<T> {
        Grads::zeros_like(&self.params)
    }

    /// Same architecture in another float type, parameters converted.
    pub fn cast<U: Real>(&self) -> Network<U> {
        Network {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            params: self.params.cast(),
            stem: self.stem.clone(),
            enc_table: self.enc_table.clone(),
            stages: self.stages.clone(),
            dec_table: self.dec_table.clone(),
            head: self.head.clone(),
        }
    }

    /// Names of parameters belonging to the stem (shared across markers).
    pub fn stem_param_count(&self) -> usize {
        self.params.iter().filter(|(n, _)| n.starts_with("stem.")).map(|(_, t)| t.numel()).sum()
    }

    pub fn head_param_count(&self) -> usize {
        self.params.iter().filter(|(n, _)| n.starts_with("head.")).map(|(_, t)| t.numel()).sum()
    }

    /// Marker-agnostic stem on a single `[1, H, W]` channel.
    pub fn stem_forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (c, _, _) = x.chw()?;
        if c != 1 {
            bail!(Dimension, "stem takes one channel, got {c}");
        }
        Ok(self.stem.forward(&self.params, x)?.0)
    }

    fn check_input(&self, x: &Tensor<T>, set: &MarkerSet) -> Result<()> {
        let (c, h, w) = x.chw()?;
        if set.is_empty() {
            bail!(Argument, "empty input marker set");
        }
        if c != set.len() {
            bail!(Argument, "{c} input channels for {} markers", set.len());
        }
        let f = self.config.upsample();
        if h % f != 0 || w % f != 0 {
            bail!(Dimension, "input {h}x{w} not divisible by total downsampling {f}");
        }
        if set.iter().any(|m| m >= self.vocab.len()) {
            bail!(Vocabulary, "marker set {:?} outside vocabulary", set.as_slice());
        }
        Ok(())
    }

    /// `[C_e, H, W]` image restricted to `set` → latent `[d_lat, H/λ, W/λ]`.
    pub fn encode(&self, x: &Tensor<T>, set: &MarkerSet) -> Result<Tensor<T>> {
        Ok(self.encode_with_cache(x, set)?.0)
    }

    pub fn encode_with_cache(&self, x: &Tensor<T>, set: &MarkerSet) -> Result<(Tensor<T>, EncodeCache<T>)> {
        self.check_input(x, set)?;
        let (_, h, w) = x.chw()?;
        let mut feats = Vec::with_capacity(set.len());
        let mut stems = Vec::with_capacity(set.len());
        for c in 0..set.len() {
            let ch = Tensor::new(&[1, h, w], x.slab(c).to_vec())?;
            let (f, cache) = self.stem.forward(&self.params, &ch)?;
            feats.push(f);
            stems.push(cache);
        }
        let stacked = Tensor::concat(&feats)?;
        let mut z = self
            .enc_table
            .encoder_hyperconv(&self.params, &stacked, set, self.config.enc_spec())?;
        let mut stages = Vec::with_capacity(self.stages.len());
        for s in &self.stages {
            let (y, c) = s.forward(&self.params, &z)?;
            stages.push(c);
            z = y;
        }
        Ok((
            z,
            EncodeCache {
                set: set.clone(),
                stems,
                stacked,
                stages,
                input_dims: x.dims().to_vec(),
            },
        ))
    }

    /// Accumulates parameter gradients; returns the gradient w.r.t. the input image.
    pub fn encode_backward(&self, cache: &EncodeCache<T>, dz: &Tensor<T>, grads: &mut Grads<T>) -> Result<Tensor<T>> {
        let mut d = dz.clone();
        for (s, c) in self.stages.iter().zip(&cache.stages).rev() {
            d = s.backward(&self.params, grads, c, &d)?;
        }
        let dstacked = self.enc_table.encoder_hyperconv_backward(
            &self.params,
            &cache.stacked,
            &cache.set,
            self.config.enc_spec(),
            &d,
            grads,
        )?;
        let d_ma = self.config.d_ma;
        let mut dx = Vec::with_capacity(cache.input_dims.iter().product());
        for (c, sc) in cache.stems.iter().enumerate() {
            let idx: Vec<usize> = (c * d_ma..(c + 1) * d_ma).collect();
            let part = dstacked.select(&idx)?;
            dx.extend(self.stem.backward(&self.params, grads, sc, &part)?.into_data());
        }
        Tensor::new(&cache.input_dims, dx)
    }

    pub fn decode(&self, z: &Tensor<T>, set: &MarkerSet) -> Result<HeteroPrediction<T>> {
        Ok(self.decode_with_cache(z, set)?.0)
    }

    pub fn decode_with_cache(&self, z: &Tensor<T>, set: &MarkerSet) -> Result<(HeteroPrediction<T>, DecodeCache<T>)> {
        if set.is_empty() {
            bail!(Argument, "empty target marker set");
        }
        let (c, _, _) = z.chw()?;
        if c != self.config.d_lat {
            bail!(Dimension, "latent has {c} channels, expected {}", self.config.d_lat);
        }
        let u = self
            .dec_table
            .decoder_hyperconv(&self.params, z, set, self.config.dec_spec())?;
        let [_, d, h, w] = u.dims()[..] else { unreachable!() };
        let mut means = Vec::new();
        let mut logvars = Vec::new();
        let mut heads = Vec::with_capacity(set.len());
        let mut out_hw = (0, 0);
        for m in 0..set.len() {
            let um = Tensor::new(&[d, h, w], u.slab(m).to_vec())?;
            let (planes, blocks, features) = self.head.forward(&self.params, &um)?;
            let (_, oh, ow) = planes.chw()?;
            out_hw = (oh, ow);
            let raw_mean = Tensor::new(&[1, oh, ow], planes.slab(0).to_vec())?;
            means.extend(raw_mean.data().iter().map(|&v| sigmoid(v)));
            logvars.extend_from_slice(planes.slab(1));
            heads.push(HeadCache {
                blocks,
                features,
                raw_mean,
            });
        }
        let dims = [set.len(), out_hw.0, out_hw.1];
        Ok((
            HeteroPrediction {
                mean: Tensor::new(&dims, means)?,
                log_var: Tensor::new(&dims, logvars)?,
            },
            DecodeCache {
                set: set.clone(),
                latent: z.clone(),
                heads,
            },
        ))
    }

    /// Gradients w.r.t. the post-sigmoid mean and raw log-variance → latent gradient.
    pub fn decode_backward(
        &self,
        cache: &DecodeCache<T>,
        dmean: &Tensor<T>,
        dlog_var: &Tensor<T>,
        grads: &mut Grads<T>,
    ) -> Result<Tensor<T>> {
        let (_, oh, ow) = dmean.chw()?;
        dmean.expect_same_dims(dlog_var)?;
        let mut dz = Tensor::zeros(cache.latent.dims());
        for (c, (m, hc)) in cache.set.iter().zip(&cache.heads).enumerate() {
            let dm = Tensor::new(&[1, oh, ow], dmean.slab(c).to_vec())?;
            let draw = pointwise_activation_backward(&hc.raw_mean, Activation::Sigmoid, &dm)?;
            let mut planes = draw.into_data();
            planes.extend_from_slice(dlog_var.slab(c));
            let dplanes = Tensor::new(&[2, oh, ow], planes)?;
            let dproj = pixel_unshuffle(&dplanes, self.head.upsample)?;
            let mut d = self.head.proj.backward(&self.params, grads, &hc.features, &dproj)?;
            for (b, bc) in self.head.blocks.iter().zip(&hc.blocks).rev() {
                d = b.backward(&self.params, grads, bc, &d)?;
            }
            dz.add_assign(&self.dec_table.decoder_slice_backward(
                &self.params,
                &cache.latent,
                m,
                self.config.dec_spec(),
                &d,
                grads,
            )?)?;
        }
        Ok(dz)
    }

    /// Masked-modelling pass: encode the visible inputs, predict every target.
    pub fn forward_masked(
        &self,
        x_in: &Tensor<T>,
        in_set: &MarkerSet,
        tgt_set: &MarkerSet,
    ) -> Result<HeteroPrediction<T>> {
        if !in_set.is_subset_of(tgt_set) {
            bail!(Argument, "input markers {:?} not within targets {:?}", in_set.as_slice(), tgt_set.as_slice());
        }
        let z = self.encode(x_in, in_set)?;
        self.decode(&z, tgt_set)
    }
}
