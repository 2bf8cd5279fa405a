//! Masked-modelling training: learning-rate schedule, AdamW, gradient
//! clipping, the epoch loop and checkpoints.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{bail, Error, Result};
use crate::hyperconv::{MarkerSet, MarkerVocabulary};
use crate::io::{put_f32s, put_u32, ByteReader};
use crate::masking::{apply_mask, build_mask_plan_with_target_size, panel_grouped_batches, sample_target_size, MaskConfig, MaskPlan};
use crate::network::{Network, NetworkConfig};
use crate::objective::{hetero_nll_with_grad, ClampSpec};
use crate::params::{Grads, ParamStore};
use crate::preprocess::{augment_crop, extract_subimages};
use crate::rng::{derive_seed, stream};
use crate::tensor::{Real, Tensor};

const TAG_INIT: u64 = 1;
const TAG_EPOCH: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub final_lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Side of the tiles cut from each image before random cropping.
    pub subimage: usize,
    /// Restrict the loss to hidden pixels (dropped markers and masked patches).
    pub masked_only_loss: bool,
    pub mask: MaskConfig,
    pub clamp: ClampSpec,
    pub net: NetworkConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 8,
            peak_lr: 5e-4,
            final_lr: 1e-6,
            warmup_epochs: 5,
            weight_decay: 1e-4,
            clip_norm: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            subimage: 256,
            masked_only_loss: false,
            mask: MaskConfig::default(),
            clamp: ClampSpec::default(),
            net: NetworkConfig::full(),
        }
    }
}

impl TrainConfig {
    /// Small network on 32-pixel tiles; trains on the synthetic cohort in
    /// about a minute on one core.
    pub fn desk() -> Self {
        Self {
            epochs: 30,
            subimage: 32,
            peak_lr: 4e-3,
            warmup_epochs: 2,
            net: NetworkConfig::tiny(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.mask.validate()?;
        self.clamp.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            bail!(Argument, "epochs and batch size must be positive");
        }
        if self.warmup_epochs > self.epochs {
            bail!(Argument, "warmup of {} epochs exceeds {} epochs", self.warmup_epochs, self.epochs);
        }
        let rates = [self.peak_lr, self.final_lr, self.weight_decay];
        if rates.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            bail!(Argument, "learning rates and weight decay must be finite and non-negative");
        }
        if !(self.clip_norm > 0.0) || !(self.adam_eps > 0.0) {
            bail!(Argument, "clip norm and Adam epsilon must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            bail!(Argument, "Adam betas must lie in [0, 1)");
        }
        if self.seed > i64::MAX as u64 {
            bail!(Argument, "seed must fit in 63 bits");
        }
        let crop = self.net.crop_size;
        if crop > self.subimage || !crop.is_multiple_of(self.mask.patch) {
            bail!(
                Argument,
                "crop {crop} must fit in the {} tile and be a multiple of patch {}",
                self.subimage,
                self.mask.patch
            );
        }
        Ok(())
    }

    fn adamw(&self, lr: f64) -> AdamW {
        AdamW {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// Linear warmup from 0 to the peak, then cosine decay to the final rate,
/// interpolated per step. The last step of the run gets exactly `final_lr`.
pub fn lr_at(step: u64, steps_per_epoch: u64, cfg: &TrainConfig) -> f64 {
    let warm = cfg.warmup_epochs as u64 * steps_per_epoch;
    let total = cfg.epochs as u64 * steps_per_epoch;
    if step < warm {
        return cfg.peak_lr * step as f64 / warm as f64;
    }
    let span = total.saturating_sub(1).saturating_sub(warm).max(1);
    let t = ((step - warm) as f64 / span as f64).min(1.0);
    cfg.final_lr + 0.5 * (cfg.peak_lr - cfg.final_lr) * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// First and second moments plus the number of steps taken.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        let z: Vec<Tensor<T>> = store.values().iter().map(|p| Tensor::zeros(p.dims())).collect();
        Self { m: z.clone(), v: z, t: 0 }
    }
}

/// One decoupled-weight-decay Adam step. Refuses the step, leaving every
/// buffer untouched, when a gradient is not finite.
pub fn adamw_step<T: Real>(params: &mut ParamStore<T>, grads: &Grads<T>, state: &mut AdamState<T>, opt: &AdamW) -> Result<()> {
    let n = params.len();
    if grads.values().len() != n || state.m.len() != n || state.v.len() != n {
        bail!(Dimension, "optimizer buffers do not match {n} parameters");
    }
    for (i, g) in grads.values().iter().enumerate() {
        g.expect_same_dims(&params.values()[i])?;
        if !g.all_finite() {
            bail!(Numeric, "non-finite gradient for {}", params.iter().nth(i).map_or("?", |(name, _)| name));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - opt.beta1.powi(t);
    let bc2 = 1.0 - opt.beta2.powi(t);
    let decay = 1.0 - opt.lr * opt.weight_decay;
    for (((p, g), m), v) in params
        .values_mut()
        .iter_mut()
        .zip(grads.values())
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        for (((pi, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            let gf = gi.to_f64().unwrap();
            let mf = opt.beta1 * mi.to_f64().unwrap() + (1.0 - opt.beta1) * gf;
            let vf = opt.beta2 * vi.to_f64().unwrap() + (1.0 - opt.beta2) * gf * gf;
            let update = opt.lr * (mf / bc1) / ((vf / bc2).sqrt() + opt.eps);
            *pi = T::of(pi.to_f64().unwrap() * decay - update);
            *mi = T::of(mf);
            *vi = T::of(vf);
        }
    }
    Ok(())
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients<T: Real>(grads: &mut Grads<T>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v.to_f64().unwrap().powi(2))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        grads.scale(T::of(max_norm / norm));
    }
    norm
}

/// Error tallies for one masked-modelling sample.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SampleStats {
    pub loss: f64,
    pub sq_err: f64,
    pub abs_err: f64,
    pub count: usize,
    pub masked_sq_err: f64,
    pub masked_count: usize,
}

impl SampleStats {
    fn add(&mut self, o: &SampleStats) {
        self.loss += o.loss;
        self.sq_err += o.sq_err;
        self.abs_err += o.abs_err;
        self.count += o.count;
        self.masked_sq_err += o.masked_sq_err;
        self.masked_count += o.masked_count;
    }
}

/// `[|tgt|, H, W]` indicator of target pixels hidden from the encoder.
pub fn hidden_mask<T: Real>(plan: &MaskPlan) -> Result<Tensor<T>> {
    let (_, h, w) = plan.patch_mask.chw()?;
    let mut data = Vec::with_capacity(plan.tgt_set.len() * h * w);
    for m in plan.tgt_set.iter() {
        match plan.in_set.position(m) {
            Some(p) => data.extend(plan.patch_mask.slab(p).iter().map(|&v| T::of(v as f64))),
            None => data.extend(std::iter::repeat_n(T::one(), h * w)),
        }
    }
    Tensor::new(&[plan.tgt_set.len(), h, w], data)
}

/// Forward and backward for one sample under `plan`. `crop` holds the
/// channels of `own` in order. Gradients, multiplied by `scale`, are added to
/// `grads`; the returned loss is unscaled.
#[allow(clippy::too_many_arguments)]
pub fn masked_sample_grads<T: Real>(
    net: &Network<T>,
    crop: &Tensor<T>,
    own: &MarkerSet,
    plan: &MaskPlan,
    clamp: &ClampSpec,
    masked_only: bool,
    scale: f64,
    grads: Option<&mut Grads<T>>,
) -> Result<SampleStats> {
    let x_in = apply_mask(&crop.select(&plan.in_set.positions_in(own)?)?, plan)?;
    let target = crop.select(&plan.tgt_set.positions_in(own)?)?;
    let (z, enc_cache) = net.encode_with_cache(&x_in, &plan.in_set)?;
    let (pred, dec_cache) = net.decode_with_cache(&z, &plan.tgt_set)?;
    let hidden = hidden_mask::<T>(plan)?;
    let weights = masked_only.then_some(&hidden);
    let mut out = hetero_nll_with_grad(&target, &pred, clamp, weights)?;

    let mut stats = SampleStats {
        loss: out.loss,
        count: target.numel(),
        ..Default::default()
    };
    for ((&x, &mu), &hid) in target.data().iter().zip(pred.mean.data()).zip(hidden.data()) {
        let e = (x - mu).to_f64().unwrap();
        stats.sq_err += e * e;
        stats.abs_err += e.abs();
        if hid != T::zero() {
            stats.masked_sq_err += e * e;
            stats.masked_count += 1;
        }
    }

    if let Some(grads) = grads {
        out.dmean.scale(T::of(scale));
        out.dlog_var.scale(T::of(scale));
        let dz = net.decode_backward(&dec_cache, &out.dmean, &out.dlog_var, grads)?;
        net.encode_backward(&enc_cache, &dz, grads)?;
    }
    Ok(stats)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub nll: f64,
    pub mae: f64,
    pub mse: f64,
    /// MSE over hidden target pixels only.
    pub masked_mse: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

/// One tile of one image, the unit the batcher shuffles.
struct Tile {
    data: Tensor<f32>,
    image: usize,
}

fn tiles(data: &Dataset, size: usize) -> Result<Vec<Tile>> {
    let mut out = Vec::new();
    for (i, img) in data.images.iter().enumerate() {
        for t in extract_subimages(&img.data, size)? {
            out.push(Tile { data: t, image: i });
        }
    }
    if out.is_empty() {
        bail!(Argument, "no image is at least {size}x{size}; nothing to train on");
    }
    Ok(out)
}

/// Number of optimizer steps per epoch for a dataset and batch size.
pub fn steps_per_epoch(data: &Dataset, cfg: &TrainConfig) -> Result<u64> {
    let tiles = tiles(data, cfg.subimage)?;
    let mut per_panel = vec![0usize; data.panels.len()];
    for t in &tiles {
        per_panel[data.panel_of[t.image]] += 1;
    }
    Ok(per_panel.iter().map(|n| n.div_ceil(cfg.batch_size) as u64).sum())
}

/// Stateful training run; resumable from a [`Checkpoint`].
#[derive(Clone, Debug)]
pub struct Trainer {
    cfg: TrainConfig,
    net: Network<f32>,
    adam: AdamState<f32>,
    epoch: usize,
    step: u64,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, vocab: MarkerVocabulary) -> Result<Self> {
        cfg.validate()?;
        let net = Network::new(cfg.net.clone(), vocab, derive_seed(cfg.seed, &[TAG_INIT]))?;
        let adam = AdamState::zeros_like(net.params());
        Ok(Self {
            cfg,
            net,
            adam,
            epoch: 0,
            step: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn network(&self) -> &Network<f32> {
        &self.net
    }

    /// Epochs completed so far.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.cfg.epochs
    }

    fn check_dataset(&self, data: &Dataset) -> Result<()> {
        if data.vocab.names() != self.net.vocab().names() {
            bail!(Vocabulary, "dataset vocabulary differs from the model's");
        }
        Ok(())
    }

    /// Runs the next epoch. Its randomness depends only on the seed and the
    /// epoch index, so a resumed run replays an uninterrupted one exactly.
    pub fn run_epoch(&mut self, data: &Dataset) -> Result<EpochMetrics> {
        self.check_dataset(data)?;
        let epoch = self.epoch;
        let cfg = &self.cfg;
        let crop = cfg.net.crop_size;
        let spe = steps_per_epoch(data, cfg)?;
        let tiles = tiles(data, cfg.subimage)?;
        let panel_of: Vec<usize> = tiles.iter().map(|t| data.panel_of[t.image]).collect();
        let mut rng = stream(cfg.seed, &[TAG_EPOCH, epoch as u64]);
        let batches = panel_grouped_batches(&panel_of, cfg.batch_size, &mut rng)?;

        let mut totals = SampleStats::default();
        let mut samples = 0usize;
        let mut norm_sum = 0.0;
        let mut lr = 0.0;
        let mut grads = self.net.zero_grads();
        for (b, batch) in batches.iter().enumerate() {
            let own = &data.image_sets[tiles[batch[0]].image];
            let k = sample_target_size(own.len(), cfg.mask.alpha, &mut rng)?;
            grads.zero();
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let tile = &tiles[i];
                let own = &data.image_sets[tile.image];
                let x = augment_crop(&tile.data, crop, &mut rng)?;
                let plan = build_mask_plan_with_target_size(own, k, &cfg.mask, crop, crop, &mut rng)?;
                let s = masked_sample_grads(
                    &self.net,
                    &x,
                    own,
                    &plan,
                    &cfg.clamp,
                    cfg.masked_only_loss,
                    scale,
                    Some(&mut grads),
                )
                .map_err(|e| with_context(e, epoch, b))?;
                totals.add(&s);
                samples += 1;
            }
            norm_sum += clip_gradients(&mut grads, cfg.clip_norm);
            lr = lr_at(self.step, spe, cfg);
            adamw_step(self.net.params_mut(), &grads, &mut self.adam, &cfg.adamw(lr))
                .map_err(|e| with_context(e, epoch, b))?;
            self.step += 1;
        }
        self.epoch += 1;
        let metrics = EpochMetrics {
            epoch,
            nll: totals.loss / samples as f64,
            mae: totals.abs_err / totals.count as f64,
            mse: totals.sq_err / totals.count as f64,
            masked_mse: totals.masked_sq_err / totals.masked_count.max(1) as f64,
            lr,
            grad_norm: norm_sum / batches.len() as f64,
        };
        log::info!(
            "epoch {} nll {:.4} mae {:.4} mse {:.5} masked_mse {:.5} lr {:.2e}",
            metrics.epoch,
            metrics.nll,
            metrics.mae,
            metrics.mse,
            metrics.masked_mse,
            metrics.lr
        );
        Ok(metrics)
    }

    /// Runs the remaining epochs.
    pub fn run(&mut self, data: &Dataset) -> Result<Vec<EpochMetrics>> {
        let mut out = Vec::new();
        while !self.is_done() {
            out.push(self.run_epoch(data)?);
        }
        Ok(out)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg.clone(),
            vocab: self.net.vocab().names().to_vec(),
            epoch: self.epoch,
            step: self.step,
            params: self.net.params().clone(),
            adam: self.adam.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let net = ckpt.network()?;
        Ok(Self {
            cfg: ckpt.config,
            net,
            adam: ckpt.adam,
            epoch: ckpt.epoch,
            step: ckpt.step,
        })
    }
}

fn with_context(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::Numeric(m) => Error::Numeric(format!("epoch {epoch}, batch {batch}: {m}")),
        other => other,
    }
}

/// Trains from scratch for `cfg.epochs` epochs.
pub fn train(cfg: TrainConfig, data: &Dataset) -> Result<(Checkpoint, Vec<EpochMetrics>)> {
    let mut t = Trainer::new(cfg, data.vocab.clone())?;
    let metrics = t.run(data)?;
    Ok((t.checkpoint(), metrics))
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"IMVC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to resume training or run inference. The random state
/// is the seed plus the epoch counter, from which each epoch's stream is derived.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub vocab: Vec<String>,
    pub epoch: usize,
    pub step: u64,
    pub params: ParamStore<f32>,
    pub adam: AdamState<f32>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    epoch: u64,
    step: u64,
    adam_steps: u64,
    vocabulary: Vec<String>,
    train: TrainConfig,
}

fn put_record(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    out.push(t.rank() as u8);
    for &d in t.dims() {
        put_u32(out, d as u32);
    }
    put_f32s(out, t.data());
}

impl Checkpoint {
    /// Rebuilds the network with the stored parameters.
    pub fn network(&self) -> Result<Network<f32>> {
        let vocab = MarkerVocabulary::new(&self.vocab)?;
        let mut net = Network::new(self.config.net.clone(), vocab, 0)?;
        let store = net.params_mut();
        if store.len() != self.params.len() {
            bail!(Argument, "checkpoint has {} tensors, model needs {}", self.params.len(), store.len());
        }
        for (name, t) in self.params.iter() {
            store.set(name, t.clone())?;
        }
        Ok(net)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            epoch: self.epoch as u64,
            step: self.step,
            adam_steps: self.adam.t,
            vocabulary: self.vocab.clone(),
            train: self.config.clone(),
        };
        let text = toml::to_string(&header).map_err(|e| Error::Argument(format!("checkpoint header: {e}")))?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        put_u32(&mut out, text.len() as u32);
        out.extend_from_slice(text.as_bytes());
        for (name, t) in self.params.iter() {
            put_record(&mut out, &format!("param/{name}"), t);
        }
        for (kind, moments) in [("adam.m", &self.adam.m), ("adam.v", &self.adam.v)] {
            for ((name, _), t) in self.params.iter().zip(moments) {
                put_record(&mut out, &format!("{kind}/{name}"), t);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: "bad magic, expected IMVC".into(),
            });
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format {
                offset: 4,
                msg: format!("unsupported checkpoint version {version}"),
            });
        }
        let len = r.u32("config length")? as usize;
        let at = r.offset();
        let text = r.utf8(len, "config text")?;
        let header: Header = toml::from_str(&text).map_err(|e| Error::Format {
            offset: at,
            msg: format!("config text: {e}"),
        })?;

        let mut records: Vec<(String, Tensor<f32>)> = Vec::new();
        while !r.is_empty() {
            let n = r.u32("record name length")? as usize;
            let name = r.utf8(n, "record name")?;
            let rank = r.u8("rank")? as usize;
            if !(1..=4).contains(&rank) {
                return Err(r.error(format!("record {name} has rank {rank}")));
            }
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32("dimension")? as usize);
            }
            let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel.ok_or_else(|| r.error(format!("record {name} too large")))?;
            let data = r.f32s(numel, &format!("payload of {name}"))?;
            let t = Tensor::new(&dims, data).map_err(|e| r.error(format!("record {name}: {e}")))?;
            records.push((name, t));
        }

        let mut params = ParamStore::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (name, t) in records {
            if let Some(p) = name.strip_prefix("param/") {
                params.add(p, t);
            } else if let Some(p) = name.strip_prefix("adam.m/") {
                m.push((p.to_string(), t));
            } else if let Some(p) = name.strip_prefix("adam.v/") {
                v.push((p.to_string(), t));
            } else {
                return Err(r.error(format!("unknown record {name}")));
            }
        }
        let align = |moments: Vec<(String, Tensor<f32>)>, kind: &str| -> Result<Vec<Tensor<f32>>> {
            if moments.len() != params.len() {
                return Err(r.error(format!("{} {kind} records for {} parameters", moments.len(), params.len())));
            }
            moments
                .into_iter()
                .zip(params.iter())
                .map(|((n, t), (pn, pt))| {
                    if n != pn || t.dims() != pt.dims() {
                        Err(r.error(format!("{kind} record {n} does not match parameter {pn}")))
                    } else {
                        Ok(t)
                    }
                })
                .collect()
        };
        let adam = AdamState {
            m: align(m, "adam.m")?,
            v: align(v, "adam.v")?,
            t: header.adam_steps,
        };
        let ckpt = Self {
            config: header.train,
            vocab: header.vocabulary,
            epoch: header.epoch as usize,
            step: header.step,
            params,
            adam,
        };
        ckpt.network().map_err(|e| Error::Format {
            offset: at,
            msg: format!("checkpoint does not describe a valid model: {e}"),
        })?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    ckpt.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn cfg(epochs: usize, warmup: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            warmup_epochs: warmup,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn schedule_endpoints() {
        let c = cfg(10, 5);
        assert_eq!(lr_at(0, 4, &c), 0.0);
        assert!((lr_at(20, 4, &c) - 5e-4).abs() < 1e-18);
        assert!((lr_at(39, 4, &c) - 1e-6).abs() < 1e-18);
        let mut prev = f64::INFINITY;
        for s in 20..40 {
            let lr = lr_at(s, 4, &c);
            assert!(lr <= prev);
            prev = lr;
        }
        // continuity across the boundary: one step either side is close to the peak
        assert!((lr_at(19, 4, &c) - 5e-4).abs() <= 5e-4 / 20.0 + 1e-18);
    }

    #[test]
    fn adamw_scalar_oracle() {
        let mut rng = crate::rng::stream(9, &[]);
        for _ in 0..50 {
            let p0: f64 = rng.random_range(-1.0..1.0);
            let g: f64 = rng.random_range(-1.0..1.0);
            let lr = 1e-3;
            let wd = 1e-2;
            let mut store = ParamStore::new();
            let id = store.add("w", Tensor::new(&[1], vec![p0]).unwrap());
            let mut grads = Grads::zeros_like(&store);
            grads.get_mut(id).data_mut()[0] = g;
            let mut st = AdamState::zeros_like(&store);
            let opt = AdamW { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: wd };
            adamw_step(&mut store, &grads, &mut st, &opt).unwrap();
            let m_hat = (0.1 * g) / 0.1;
            let v_hat = (0.001 * g * g) / 0.001;
            let want = p0 * (1.0 - lr * wd) - lr * m_hat / (v_hat.sqrt() + 1e-8);
            assert!((store.get(id).data()[0] - want).abs() < 1e-10);
        }
    }

    #[test]
    fn adamw_zero_grad_and_refusal() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap());
        let before = store.clone();
        let mut grads = Grads::zeros_like(&store);
        let mut st = AdamState::zeros_like(&store);
        let opt = AdamW { lr: 1e-2, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 };
        adamw_step(&mut store, &grads, &mut st, &opt).unwrap();
        assert_eq!(store, before);
        assert!(st.v[0].data().iter().all(|&v| v == 0.0));

        grads.get_mut(id).data_mut()[1] = f64::NAN;
        let snapshot = (store.clone(), st.clone());
        assert!(matches!(adamw_step(&mut store, &grads, &mut st, &opt), Err(Error::Numeric(_))));
        assert_eq!((store, st), snapshot);
    }

    #[test]
    fn weight_decay_shrinks_norm() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", Tensor::new(&[2], vec![3.0, -4.0]).unwrap());
        let grads = Grads::zeros_like(&store);
        let mut st = AdamState::zeros_like(&store);
        let opt = AdamW { lr: 0.1, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.5 };
        let mut prev = 5.0;
        for _ in 0..10 {
            adamw_step(&mut store, &grads, &mut st, &opt).unwrap();
            let n = store.values()[0].sum_sq().sqrt();
            assert!(n < prev);
            prev = n;
        }
    }

    #[test]
    fn clipping() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", Tensor::zeros(&[2]));
        let mut g = Grads::zeros_like(&store);
        g.get_mut(a).data_mut().copy_from_slice(&[0.3, 0.4]);
        assert_eq!(clip_gradients(&mut g, 1.0), 0.5);
        assert_eq!(g.get(a).data(), &[0.3, 0.4]);
        g.get_mut(a).data_mut().copy_from_slice(&[0.0, 4.0]);
        assert_eq!(clip_gradients(&mut g, 1.0), 4.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-12);
        assert_eq!(g.get(a).data(), &[0.0, 1.0]);
    }

    #[test]
    fn config_validation() {
        TrainConfig::default().validate().unwrap();
        TrainConfig::desk().validate().unwrap();
        assert!(cfg(3, 5).validate().is_err());
        let mut c = TrainConfig::desk();
        c.subimage = 16;
        assert!(c.validate().is_err());
    }
}
