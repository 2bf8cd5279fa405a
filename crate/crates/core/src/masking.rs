//! Training-sample construction for masked modelling: target-set
//! subsampling, full-marker dropout within the targets, and patch-wise
//! spatial masking of the remaining inputs.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::hyperconv::MarkerSet;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskConfig {
    /// Smallest target fraction of the panel.
    pub alpha: f64,
    /// Largest dropped fraction of the targets.
    pub beta: f64,
    /// Patch masking probability.
    pub rho: f64,
    /// Patch side in pixels.
    pub patch: usize,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            alpha: 0.75,
            beta: 0.5,
            rho: 0.6,
            patch: 8,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) || !(self.beta > 0.0 && self.beta <= 1.0) {
            bail!(Argument, "alpha and beta must lie in (0, 1]: {self:?}");
        }
        if !(0.0..=1.0).contains(&self.rho) || self.patch == 0 {
            bail!(Argument, "rho must lie in [0, 1] and patch be positive: {self:?}");
        }
        Ok(())
    }
}

/// `⌈f·n⌉`, robust to representation error in `f·n`.
fn ceil_frac(f: f64, n: usize) -> usize {
    let v = f * n as f64;
    let r = v.round();
    if (v - r).abs() < 1e-9 {
        r as usize
    } else {
        v.ceil() as usize
    }
}

/// Inclusive bounds of the target size draw: `⌈α·C⌉..=C`, lower end at least 2.
pub fn target_size_range(c_img: usize, alpha: f64) -> (usize, usize) {
    (ceil_frac(alpha, c_img).max(2).min(c_img), c_img)
}

/// Inclusive bounds of the dropout size draw: `1..=⌈β·K⌉`, capped at `K − 1`.
pub fn dropout_size_range(k: usize, beta: f64) -> (usize, usize) {
    (1, ceil_frac(beta, k).clamp(1, k.saturating_sub(1).max(1)))
}

/// `K ~ Unif{⌈α·C_img⌉, …, C_img}`.
pub fn sample_target_size<R: Rng + ?Sized>(c_img: usize, alpha: f64, rng: &mut R) -> Result<usize> {
    if c_img < 2 {
        bail!(Argument, "panel of {c_img} markers cannot be split into inputs and targets");
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        bail!(Argument, "alpha {alpha} outside (0, 1]");
    }
    let (lo, hi) = target_size_range(c_img, alpha);
    Ok(rng.random_range(lo..=hi))
}

/// `M ~ Unif{1, …, ⌈β·K⌉}`.
pub fn sample_dropout_size<R: Rng + ?Sized>(k: usize, beta: f64, rng: &mut R) -> Result<usize> {
    if k < 2 {
        bail!(Argument, "target set of {k} leaves no input after dropout");
    }
    if !(beta > 0.0 && beta <= 1.0) {
        bail!(Argument, "beta {beta} outside (0, 1]");
    }
    let (lo, hi) = dropout_size_range(k, beta);
    Ok(rng.random_range(lo..=hi))
}

/// One sample's target set, encoder input set and spatial patch mask.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    pub tgt_set: MarkerSet,
    pub in_set: MarkerSet,
    /// Binary `[|in_set|, H, W]`; 1 marks a hidden pixel.
    pub patch_mask: Tensor<f32>,
    pub patch: usize,
}

impl MaskPlan {
    pub fn dropped(&self) -> Vec<usize> {
        self.tgt_set.iter().filter(|&m| !self.in_set.contains(m)).collect()
    }

    /// Fraction of masked pixels over all input channels.
    pub fn mask_rate(&self) -> f64 {
        self.patch_mask.data().iter().map(|&v| v as f64).sum::<f64>() / self.patch_mask.numel() as f64
    }
}

fn choose<R: Rng + ?Sized>(from: &[usize], n: usize, rng: &mut R) -> Vec<usize> {
    let mut pool = from.to_vec();
    pool.shuffle(rng);
    pool.truncate(n);
    pool
}

fn patch_mask<R: Rng + ?Sized>(channels: usize, h: usize, w: usize, patch: usize, rho: f64, rng: &mut R) -> Tensor<f32> {
    let (gh, gw) = (h / patch, w / patch);
    let mut data = vec![0.0f32; channels * h * w];
    for c in 0..channels {
        for u in 0..gh {
            for v in 0..gw {
                if rng.random_bool(rho) {
                    for y in u * patch..(u + 1) * patch {
                        data[(c * h + y) * w + v * patch..][..patch].fill(1.0);
                    }
                }
            }
        }
    }
    Tensor::new(&[channels, h, w], data).expect("consistent dims")
}

/// Builds a plan with `K` drawn from the panel size.
pub fn build_mask_plan<R: Rng + ?Sized>(
    panel: &MarkerSet,
    cfg: &MaskConfig,
    h: usize,
    w: usize,
    rng: &mut R,
) -> Result<MaskPlan> {
    let k = sample_target_size(panel.len(), cfg.alpha, rng)?;
    build_mask_plan_with_target_size(panel, k, cfg, h, w, rng)
}

/// Builds a plan for a fixed target size `k` (shared across a minibatch).
/// Targets are drawn from the panel, inputs from the targets.
pub fn build_mask_plan_with_target_size<R: Rng + ?Sized>(
    panel: &MarkerSet,
    k: usize,
    cfg: &MaskConfig,
    h: usize,
    w: usize,
    rng: &mut R,
) -> Result<MaskPlan> {
    cfg.validate()?;
    if panel.len() < 2 {
        bail!(Argument, "panel of {} markers is too small to mask", panel.len());
    }
    if k < 2 || k > panel.len() {
        bail!(Argument, "target size {k} outside 2..={}", panel.len());
    }
    if !h.is_multiple_of(cfg.patch) || !w.is_multiple_of(cfg.patch) {
        bail!(Dimension, "patch {} does not divide {h}x{w}", cfg.patch);
    }
    let tgt = choose(panel.as_slice(), k, rng);
    let m = sample_dropout_size(k, cfg.beta, rng)?;
    let inp = choose(&tgt, k - m, rng);
    let vocab_bound = usize::MAX;
    let tgt_set = MarkerSet::new(tgt, vocab_bound)?;
    let in_set = MarkerSet::new(inp, vocab_bound)?;
    let patch_mask = patch_mask(in_set.len(), h, w, cfg.patch, cfg.rho, rng);
    Ok(MaskPlan {
        tgt_set,
        in_set,
        patch_mask,
        patch: cfg.patch,
    })
}

/// `X ⊙ (1 − M)`; unmasked pixels are copied bit for bit.
pub fn apply_mask<T: Real>(x: &Tensor<T>, plan: &MaskPlan) -> Result<Tensor<T>> {
    let (c, h, w) = x.chw()?;
    if [c, h, w] != plan.patch_mask.dims() {
        bail!(Dimension, "input {:?} vs mask {:?}", x.dims(), plan.patch_mask.dims());
    }
    let mut out = x.clone();
    for (v, &m) in out.data_mut().iter_mut().zip(plan.patch_mask.data()) {
        if m != 0.0 {
            *v = T::zero();
        }
    }
    Ok(out)
}

/// Shuffled minibatches in which every batch draws from a single panel.
///
/// `panel_of[i]` is the panel key of sample `i`. Each sample appears exactly
/// once; the last batch of a panel may be short.
pub fn panel_grouped_batches<R: Rng + ?Sized>(
    panel_of: &[usize],
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    if panel_of.is_empty() {
        bail!(Argument, "empty dataset");
    }
    if batch_size == 0 {
        bail!(Argument, "batch size must be positive");
    }
    let mut keys: Vec<usize> = panel_of.to_vec();
    keys.sort_unstable();
    keys.dedup();
    let mut batches = Vec::new();
    for key in keys {
        let mut members: Vec<usize> = (0..panel_of.len()).filter(|&i| panel_of[i] == key).collect();
        members.shuffle(rng);
        batches.extend(members.chunks(batch_size).map(<[usize]>::to_vec));
    }
    batches.shuffle(rng);
    Ok(batches)
}
