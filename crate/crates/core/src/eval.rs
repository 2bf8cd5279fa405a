//! Evaluation: leave-one-marker-out virtual staining, uncertainty–error
//! correlation, Gaussian coverage, paired Wilcoxon tests with BH-FDR,
//! single-cell embeddings and a cross-validated linear probe.

use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;

use crate::data::{Dataset, MultiplexImage};
use crate::error::{bail, Error, Result};
use crate::hyperconv::{MarkerSet, MarkerVocabulary};
use crate::masking::{apply_mask, build_mask_plan, MaskConfig};
use crate::network::{HeteroPrediction, Network};
use crate::tensor::Tensor;

/// Anything that maps visible channels to a heteroscedastic prediction of
/// target channels.
pub trait StainModel {
    fn vocab(&self) -> &MarkerVocabulary;

    fn predict(&self, x_in: &Tensor<f32>, in_set: &MarkerSet, tgt_set: &MarkerSet) -> Result<HeteroPrediction<f32>>;

    /// Spatial sizes the model accepts must be multiples of this.
    fn size_multiple(&self) -> usize {
        1
    }
}

impl StainModel for Network<f32> {
    fn vocab(&self) -> &MarkerVocabulary {
        Network::vocab(self)
    }

    fn predict(&self, x_in: &Tensor<f32>, in_set: &MarkerSet, tgt_set: &MarkerSet) -> Result<HeteroPrediction<f32>> {
        let z = self.encode(x_in, in_set)?;
        self.decode(&z, tgt_set)
    }

    fn size_multiple(&self) -> usize {
        self.config().upsample()
    }
}

/// Predicts each marker's dataset-wide mean with its pooled variance,
/// ignoring the input: the reference point for virtual-staining error.
#[derive(Clone, Debug)]
pub struct ChannelMeanModel {
    vocab: MarkerVocabulary,
    mean: Vec<f32>,
    log_var: Vec<f32>,
}

impl ChannelMeanModel {
    pub fn fit(data: &Dataset) -> Result<Self> {
        let n = data.vocab.len();
        let (mut sum, mut sq, mut count) = (vec![0.0f64; n], vec![0.0f64; n], vec![0usize; n]);
        for (img, set) in data.images.iter().zip(&data.image_sets) {
            for (c, m) in set.iter().enumerate() {
                for &v in img.data.slab(c) {
                    sum[m] += v as f64;
                    sq[m] += v as f64 * v as f64;
                }
                count[m] += img.data.slab(c).len();
            }
        }
        let mut mean = vec![0.0f32; n];
        let mut log_var = vec![0.0f32; n];
        for m in 0..n {
            if count[m] == 0 {
                continue;
            }
            let mu = sum[m] / count[m] as f64;
            let var = (sq[m] / count[m] as f64 - mu * mu).max(1e-12);
            mean[m] = mu as f32;
            log_var[m] = var.ln() as f32;
        }
        Ok(Self {
            vocab: data.vocab.clone(),
            mean,
            log_var,
        })
    }
}

impl StainModel for ChannelMeanModel {
    fn vocab(&self) -> &MarkerVocabulary {
        &self.vocab
    }

    fn predict(&self, x_in: &Tensor<f32>, _: &MarkerSet, tgt_set: &MarkerSet) -> Result<HeteroPrediction<f32>> {
        let (_, h, w) = x_in.chw()?;
        let dims = [tgt_set.len(), h, w];
        let tgt: Vec<usize> = tgt_set.iter().collect();
        Ok(HeteroPrediction {
            mean: Tensor::from_fn(&dims, |i| self.mean[tgt[i / (h * w)]]),
            log_var: Tensor::from_fn(&dims, |i| self.log_var[tgt[i / (h * w)]]),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    /// The channel was visible to the encoder.
    Active,
    /// The channel was withheld and predicted.
    Masked,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Active => "active",
            Split::Masked => "masked",
        })
    }
}

/// Per (image, marker) aggregate of pixel-level errors.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StainRow {
    pub image: String,
    pub marker: String,
    pub split: Split,
    pub mse: f64,
    pub mae: f64,
    /// Mean predicted variance `exp(log_var)`.
    pub mean_var: f64,
    /// Fraction of pixels inside the z = 1.96 interval.
    pub coverage: f64,
    pub pixels: usize,
}

pub const COVERAGE_Z: f64 = 1.96;

fn row(image: &str, marker: &str, split: Split, reference: &[f32], mean: &[f32], log_var: &[f32]) -> StainRow {
    let n = reference.len();
    let (mut se, mut ae, mut var, mut inside) = (0.0, 0.0, 0.0, 0usize);
    for ((&x, &mu), &lv) in reference.iter().zip(mean).zip(log_var) {
        let e = x as f64 - mu as f64;
        se += e * e;
        ae += e.abs();
        var += (lv as f64).exp();
        if e.abs() <= COVERAGE_Z * (lv as f64 / 2.0).exp() {
            inside += 1;
        }
    }
    StainRow {
        image: image.to_string(),
        marker: marker.to_string(),
        split,
        mse: se / n as f64,
        mae: ae / n as f64,
        mean_var: var / n as f64,
        coverage: inside as f64 / n as f64,
        pixels: n,
    }
}

/// Largest centred window whose sides are multiples of `m`.
pub fn fit_to_multiple(x: &Tensor<f32>, m: usize) -> Result<Tensor<f32>> {
    let (c, h, w) = x.chw()?;
    let (hh, ww) = (h / m * m, w / m * m);
    if hh == 0 || ww == 0 {
        bail!(Dimension, "{h}x{w} smaller than the model's stride {m}");
    }
    if (hh, ww) == (h, w) {
        return Ok(x.clone());
    }
    let (top, left) = ((h - hh) / 2, (w - ww) / 2);
    let mut data = Vec::with_capacity(c * hh * ww);
    for ch in 0..c {
        for y in top..top + hh {
            data.extend_from_slice(&x.slab(ch)[y * w + left..][..ww]);
        }
    }
    Tensor::new(&[c, hh, ww], data)
}

fn prepared(model: &dyn StainModel, image: &MultiplexImage, reference: Option<&Tensor<f32>>) -> Result<(Tensor<f32>, Tensor<f32>, MarkerSet)> {
    let own = image.marker_set(model.vocab())?;
    if let Some(r) = reference {
        image.data.expect_same_dims(r)?;
    }
    let m = model.size_multiple();
    let x = fit_to_multiple(&image.data, m)?;
    let r = fit_to_multiple(reference.unwrap_or(&image.data), m)?;
    Ok((x, r, own))
}

/// Predicts `targets` from `inputs`, both given by name; all must be channels of `image`.
pub fn virtual_stain<S: AsRef<str>>(
    model: &dyn StainModel,
    image: &MultiplexImage,
    inputs: &[S],
    targets: &[S],
) -> Result<HeteroPrediction<f32>> {
    let vocab = model.vocab();
    let own = image.marker_set(vocab)?;
    let in_set = vocab.resolve(inputs)?;
    let tgt_set = vocab.resolve(targets)?;
    let x = fit_to_multiple(&image.data, model.size_multiple())?;
    let x_in = x.select(&in_set.positions_in(&own)?)?;
    model.predict(&x_in, &in_set, &tgt_set)
}

/// For each marker `j`: encode the panel without `j` (no spatial mask),
/// decode `{j}` and compare with `reference` (the observed image if `None`).
pub fn virtual_stain_loo(
    model: &dyn StainModel,
    image: &MultiplexImage,
    name: &str,
    reference: Option<&Tensor<f32>>,
) -> Result<Vec<StainRow>> {
    let (x, r, own) = prepared(model, image, reference)?;
    if own.len() < 2 {
        bail!(Argument, "leave-one-out needs at least 2 markers, image {name} has {}", own.len());
    }
    let vocab_len = model.vocab().len();
    let mut rows = Vec::with_capacity(own.len());
    for (pos, m) in own.iter().enumerate() {
        let in_set = own.without(m);
        let x_in = x.select(&in_set.positions_in(&own)?)?;
        let pred = model.predict(&x_in, &in_set, &MarkerSet::new(vec![m], vocab_len)?)?;
        rows.push(row(
            name,
            &image.markers[pos],
            Split::Masked,
            r.slab(pos),
            pred.mean.data(),
            pred.log_var.data(),
        ));
    }
    Ok(rows)
}

/// Full-panel reconstruction: every channel is both input and target.
pub fn reconstruct_panel(
    model: &dyn StainModel,
    image: &MultiplexImage,
    name: &str,
    reference: Option<&Tensor<f32>>,
) -> Result<Vec<StainRow>> {
    let (x, r, own) = prepared(model, image, reference)?;
    let pred = model.predict(&x, &own, &own)?;
    Ok((0..own.len())
        .map(|c| {
            row(
                name,
                &image.markers[c],
                Split::Active,
                r.slab(c),
                pred.mean.slab(c),
                pred.log_var.slab(c),
            )
        })
        .collect())
}

/// Masked-modelling imputation with a plan drawn as in training: input
/// channels (spatially masked) are scored as [`Split::Active`], dropped
/// channels as [`Split::Masked`]. Every pixel of each target channel counts.
pub fn masked_modeling_eval<R: Rng + ?Sized>(
    model: &dyn StainModel,
    image: &MultiplexImage,
    name: &str,
    reference: Option<&Tensor<f32>>,
    mask: &MaskConfig,
    rng: &mut R,
) -> Result<Vec<StainRow>> {
    let (x, r, own) = prepared(model, image, reference)?;
    let (_, h, w) = x.chw()?;
    let plan = build_mask_plan(&own, mask, h, w, rng)?;
    let x_in = apply_mask(&x.select(&plan.in_set.positions_in(&own)?)?, &plan)?;
    let pred = model.predict(&x_in, &plan.in_set, &plan.tgt_set)?;
    let positions = plan.tgt_set.positions_in(&own)?;
    Ok(plan
        .tgt_set
        .iter()
        .zip(positions)
        .enumerate()
        .map(|(t, (m, pos))| {
            let split = if plan.in_set.contains(m) { Split::Active } else { Split::Masked };
            row(
                name,
                &image.markers[pos],
                split,
                r.slab(pos),
                pred.mean.slab(t),
                pred.log_var.slab(t),
            )
        })
        .collect())
}

/// Fraction of pixels with `|target − mean| ≤ z·exp(log_var / 2)`.
pub fn coverage_check(target: &Tensor<f32>, pred: &HeteroPrediction<f32>, z: f64) -> Result<f64> {
    target.expect_same_dims(&pred.mean)?;
    target.expect_same_dims(&pred.log_var)?;
    let inside = target
        .data()
        .iter()
        .zip(pred.mean.data())
        .zip(pred.log_var.data())
        .filter(|((&x, &mu), &lv)| ((x - mu) as f64).abs() <= z * (lv as f64 / 2.0).exp())
        .count();
    Ok(inside as f64 / target.numel() as f64)
}

/// Sample Pearson correlation.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        bail!(Dimension, "{} x values vs {} y values", xs.len(), ys.len());
    }
    if xs.len() < 3 {
        bail!(Argument, "correlation needs at least 3 points, got {}", xs.len());
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx <= 0.0 || syy <= 0.0 || !(sxx.is_finite() && syy.is_finite()) {
        bail!(Degenerate, "zero variance in a correlation coordinate");
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SplitCalibration {
    /// `(log mean σ², log mean MAE)` per (image, channel).
    pub points: Vec<(f64, f64)>,
    pub r: f64,
    pub coverage: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CalibrationReport {
    pub active: SplitCalibration,
    pub masked: SplitCalibration,
    /// Pixel-weighted coverage over both splits.
    pub coverage: f64,
}

fn split_calibration(rows: &[&StainRow]) -> Result<SplitCalibration> {
    let points: Vec<(f64, f64)> = rows.iter().map(|r| (r.mean_var.ln(), r.mae.ln())).collect();
    let (xs, ys): (Vec<f64>, Vec<f64>) = points.iter().copied().unzip();
    let r = pearson(&xs, &ys)?;
    let pixels: usize = rows.iter().map(|r| r.pixels).sum();
    let coverage = rows.iter().map(|r| r.coverage * r.pixels as f64).sum::<f64>() / pixels as f64;
    Ok(SplitCalibration { points, r, coverage })
}

/// Correlates predicted variance with realised error per split.
pub fn uncertainty_correlation(rows: &[StainRow]) -> Result<CalibrationReport> {
    let active: Vec<&StainRow> = rows.iter().filter(|r| r.split == Split::Active).collect();
    let masked: Vec<&StainRow> = rows.iter().filter(|r| r.split == Split::Masked).collect();
    let a = split_calibration(&active)?;
    let m = split_calibration(&masked)?;
    let pa: usize = active.iter().map(|r| r.pixels).sum();
    let pm: usize = masked.iter().map(|r| r.pixels).sum();
    let coverage = (a.coverage * pa as f64 + m.coverage * pm as f64) / (pa + pm) as f64;
    Ok(CalibrationReport {
        active: a,
        masked: m,
        coverage,
    })
}

/// Midranks of `|d|`, 1-based.
fn abs_ranks(d: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..d.len()).collect();
    idx.sort_by(|&i, &j| d[i].abs().total_cmp(&d[j].abs()));
    let mut ranks = vec![0.0; d.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && d[idx[j + 1]].abs() == d[idx[i]].abs() {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = mid;
        }
        i = j + 1;
    }
    ranks
}

/// Largest sample size handled by exact enumeration of the null.
pub const WILCOXON_EXACT_MAX: usize = 12;

/// Exact two-sided p of the signed-rank statistic `w_plus` for the given
/// (possibly tied, half-integer) ranks: `min(1, 2·min(P(W ≤ w), P(W ≥ w)))`
/// under equally likely sign assignments.
pub fn signed_rank_exact_p(ranks: &[f64], w_plus: f64) -> f64 {
    // doubled ranks are integers even with midranks
    let r2: Vec<usize> = ranks.iter().map(|r| (r * 2.0).round() as usize).collect();
    let total: usize = r2.iter().sum();
    let mut counts = vec![0u64; total + 1];
    counts[0] = 1;
    for &r in &r2 {
        for s in (r..=total).rev() {
            counts[s] += counts[s - r];
        }
    }
    let w = (w_plus * 2.0).round() as usize;
    let lower: u64 = counts[..=w.min(total)].iter().sum();
    let upper: u64 = counts[w.min(total + 1)..].iter().sum();
    let denom = (1u64 << ranks.len()) as f64;
    (2.0 * lower.min(upper) as f64 / denom).min(1.0)
}

/// Paired two-sided Wilcoxon signed-rank test on `a − b`. Zero differences
/// are dropped; exact null for up to 12 pairs, otherwise the normal
/// approximation with tie and continuity corrections.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        bail!(Dimension, "paired samples of length {} and {}", a.len(), b.len());
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|v| *v != 0.0).collect();
    if d.iter().any(|v| !v.is_finite()) {
        bail!(Numeric, "non-finite paired difference");
    }
    if d.is_empty() {
        bail!(Degenerate, "all paired differences are zero");
    }
    if d.len() < 5 {
        bail!(Argument, "{} non-zero differences; the test needs at least 5", d.len());
    }
    let ranks = abs_ranks(&d);
    let w_plus: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let n = d.len() as f64;
    if d.len() <= WILCOXON_EXACT_MAX {
        return Ok(signed_rank_exact_p(&ranks, w_plus));
    }
    let mean = n * (n + 1.0) / 4.0;
    let mut ties = 0.0;
    let mut sorted = ranks.clone();
    sorted.sort_by(f64::total_cmp);
    for g in sorted.chunk_by(|x, y| x == y) {
        let t = g.len() as f64;
        ties += t * t * t - t;
    }
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - ties / 48.0;
    let z = ((w_plus - mean).abs() - 0.5).max(0.0) / var.sqrt();
    Ok(libm::erfc(z / std::f64::consts::SQRT_2).min(1.0))
}

/// Benjamini–Hochberg adjusted p-values, in input order.
pub fn bh_fdr(p: &[f64]) -> Result<Vec<f64>> {
    if let Some(bad) = p.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        bail!(Argument, "p-value {bad} outside [0, 1]");
    }
    let m = p.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| p[i].total_cmp(&p[j]));
    let mut q = vec![0.0; m];
    let mut running = 1.0f64;
    for (k, &i) in order.iter().enumerate().rev() {
        running = running.min(p[i] * m as f64 / (k + 1) as f64);
        q[i] = running.max(p[i]);
    }
    Ok(q)
}

/// Paired per-marker comparison of two models' MSE over the same images.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MarkerComparison {
    pub marker: String,
    pub pairs: usize,
    pub mean_mse: f64,
    pub baseline_mse: f64,
    /// `None` when the test is undefined (too few or all-zero differences).
    pub p: Option<f64>,
    pub q: Option<f64>,
}

/// Wilcoxon signed-rank test per marker on rows paired by image, with
/// Benjamini–Hochberg adjustment across the markers that could be tested.
pub fn compare_markers(rows: &[StainRow], baseline: &[StainRow]) -> Result<Vec<MarkerComparison>> {
    let mut base = std::collections::HashMap::new();
    for r in baseline {
        base.insert((r.image.as_str(), r.marker.as_str()), r.mse);
    }
    let mut markers: Vec<&str> = rows.iter().map(|r| r.marker.as_str()).collect();
    markers.sort_unstable();
    markers.dedup();
    let mut out = Vec::with_capacity(markers.len());
    for m in markers {
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for r in rows.iter().filter(|r| r.marker == m) {
            let Some(&mse) = base.get(&(r.image.as_str(), m)) else {
                bail!(Argument, "no baseline row for image {} marker {m}", r.image);
            };
            a.push(r.mse);
            b.push(mse);
        }
        let p = match wilcoxon_signed_rank(&a, &b) {
            Ok(p) => Some(p),
            Err(Error::Degenerate(_) | Error::Argument(_)) => None,
            Err(e) => return Err(e),
        };
        let n = a.len() as f64;
        out.push(MarkerComparison {
            marker: m.to_string(),
            pairs: a.len(),
            mean_mse: a.iter().sum::<f64>() / n,
            baseline_mse: b.iter().sum::<f64>() / n,
            p,
            q: None,
        });
    }
    let tested: Vec<usize> = (0..out.len()).filter(|&i| out[i].p.is_some()).collect();
    let p: Vec<f64> = tested.iter().filter_map(|&i| out[i].p).collect();
    for (&i, q) in tested.iter().zip(bh_fdr(&p)?) {
        out[i].q = Some(q);
    }
    Ok(out)
}

pub const CELL_CROP: usize = 32;

/// Embeds one cell: a `CELL_CROP`-pixel window centred on `centroid`
/// (zero-padded at borders), pixels outside `cell_mask` zeroed, encoded
/// with the image's own panel and mean-pooled over the latent map.
pub fn extract_cell_embedding(
    model: &Network<f32>,
    image: &MultiplexImage,
    cell_mask: &[bool],
    centroid: (usize, usize),
) -> Result<Vec<f32>> {
    let (c, h, w) = image.data.chw()?;
    if cell_mask.len() != h * w {
        bail!(Dimension, "cell mask of {} pixels for a {h}x{w} image", cell_mask.len());
    }
    let half = CELL_CROP as isize / 2;
    let (top, left) = (centroid.0 as isize - half, centroid.1 as isize - half);
    let mut crop = vec![0.0f32; c * CELL_CROP * CELL_CROP];
    let mut any = false;
    for y in 0..CELL_CROP {
        for x in 0..CELL_CROP {
            let (sy, sx) = (top + y as isize, left + x as isize);
            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                continue;
            }
            let p = sy as usize * w + sx as usize;
            if !cell_mask[p] {
                continue;
            }
            any = true;
            for ch in 0..c {
                crop[(ch * CELL_CROP + y) * CELL_CROP + x] = image.data.slab(ch)[p];
            }
        }
    }
    if !any {
        bail!(Argument, "cell mask is empty within the crop around {centroid:?}");
    }
    let own = image.marker_set(model.vocab())?;
    let z = model.encode(&Tensor::new(&[c, CELL_CROP, CELL_CROP], crop)?, &own)?;
    let (d, zh, zw) = z.chw()?;
    let area = (zh * zw) as f32;
    Ok((0..d).map(|k| z.slab(k).iter().sum::<f32>() / area).collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeConfig {
    pub folds: usize,
    pub l2: f64,
    pub learning_rate: f64,
    pub iterations: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            folds: 10,
            l2: 1e-3,
            learning_rate: 0.5,
            iterations: 300,
        }
    }
}

/// Multinomial logistic regression `softmax(X·Wᵀ + b)`; `w` is `[K, D]` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Softmax {
    pub classes: usize,
    pub dim: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Softmax {
    pub fn zeros(classes: usize, dim: usize) -> Self {
        Self {
            classes,
            dim,
            w: vec![0.0; classes * dim],
            b: vec![0.0; classes],
        }
    }

    fn probs(&self, x: &[f64], out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate() {
            *o = self.b[k] + self.w[k * self.dim..][..self.dim].iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
        let max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for o in out.iter_mut() {
            *o = (*o - max).exp();
            s += *o;
        }
        out.iter_mut().for_each(|o| *o /= s);
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let mut p = vec![0.0; self.classes];
        self.probs(x, &mut p);
        (0..self.classes).max_by(|&i, &j| p[i].total_cmp(&p[j])).unwrap_or(0)
    }

    /// Mean cross-entropy plus `l2/2·‖W‖²`, and its gradients `(dW, db)`.
    pub fn loss_grad(&self, xs: &[Vec<f64>], ys: &[usize], l2: f64) -> (f64, Vec<f64>, Vec<f64>) {
        let n = xs.len() as f64;
        let mut dw: Vec<f64> = self.w.iter().map(|w| l2 * w).collect();
        let mut db = vec![0.0; self.classes];
        let mut loss = 0.5 * l2 * self.w.iter().map(|w| w * w).sum::<f64>();
        let mut p = vec![0.0; self.classes];
        for (x, &y) in xs.iter().zip(ys) {
            self.probs(x, &mut p);
            loss -= p[y].max(1e-300).ln() / n;
            for k in 0..self.classes {
                let g = (p[k] - f64::from(u8::from(k == y))) / n;
                db[k] += g;
                for (dwk, xi) in dw[k * self.dim..][..self.dim].iter_mut().zip(x) {
                    *dwk += g * xi;
                }
            }
        }
        (loss, dw, db)
    }

    /// Full-batch gradient descent from zero weights.
    pub fn fit(xs: &[Vec<f64>], ys: &[usize], classes: usize, cfg: &ProbeConfig) -> Self {
        let dim = xs.first().map_or(0, Vec::len);
        let mut m = Self::zeros(classes, dim);
        for _ in 0..cfg.iterations {
            let (_, dw, db) = m.loss_grad(xs, ys, cfg.l2);
            m.w.iter_mut().zip(&dw).for_each(|(w, g)| *w -= cfg.learning_rate * g);
            m.b.iter_mut().zip(&db).for_each(|(b, g)| *b -= cfg.learning_rate * g);
        }
        m
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeReport {
    /// `[fold][class]` F1 scores.
    pub fold_f1: Vec<Vec<f64>>,
    pub f1_mean: Vec<f64>,
    /// Half width of the 95% interval `1.96·sd/√folds`.
    pub f1_ci: Vec<f64>,
    pub macro_f1_mean: f64,
    pub macro_f1_ci: f64,
}

fn mean_ci(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * var.sqrt() / n.sqrt())
}

/// Fold index of every sample, balanced within each class.
pub fn stratified_folds<R: Rng + ?Sized>(labels: &[usize], classes: usize, folds: usize, rng: &mut R) -> Result<Vec<usize>> {
    let mut assign = vec![0; labels.len()];
    for c in 0..classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if members.len() < folds {
            bail!(Stratification, "class {c} has {} samples for {folds} folds", members.len());
        }
        members.shuffle(rng);
        for (k, i) in members.into_iter().enumerate() {
            assign[i] = k % folds;
        }
    }
    Ok(assign)
}

/// Stratified k-fold linear probe with per-fold feature standardisation.
pub fn linear_probe_cv<R: Rng + ?Sized>(
    features: &[Vec<f64>],
    labels: &[usize],
    cfg: &ProbeConfig,
    rng: &mut R,
) -> Result<ProbeReport> {
    if features.len() != labels.len() || features.is_empty() {
        bail!(Dimension, "{} feature rows for {} labels", features.len(), labels.len());
    }
    if cfg.folds < 2 {
        bail!(Argument, "need at least 2 folds");
    }
    let dim = features[0].len();
    if features.iter().any(|f| f.len() != dim) {
        bail!(Dimension, "ragged feature rows");
    }
    let classes = labels.iter().max().unwrap() + 1;
    let fold_of = stratified_folds(labels, classes, cfg.folds, rng)?;
    let mut fold_f1 = Vec::with_capacity(cfg.folds);
    for f in 0..cfg.folds {
        let train: Vec<usize> = (0..labels.len()).filter(|&i| fold_of[i] != f).collect();
        let test: Vec<usize> = (0..labels.len()).filter(|&i| fold_of[i] == f).collect();
        for c in 0..classes {
            if !train.iter().any(|&i| labels[i] == c) {
                bail!(Stratification, "class {c} absent from training fold {f}");
            }
        }
        let nt = train.len() as f64;
        let mean: Vec<f64> = (0..dim).map(|d| train.iter().map(|&i| features[i][d]).sum::<f64>() / nt).collect();
        let sd: Vec<f64> = (0..dim)
            .map(|d| {
                let v = train.iter().map(|&i| (features[i][d] - mean[d]).powi(2)).sum::<f64>() / nt;
                if v > 0.0 { v.sqrt() } else { 1.0 }
            })
            .collect();
        let scale = |i: usize| -> Vec<f64> { (0..dim).map(|d| (features[i][d] - mean[d]) / sd[d]).collect() };
        let xs: Vec<Vec<f64>> = train.iter().map(|&i| scale(i)).collect();
        let ys: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
        let model = Softmax::fit(&xs, &ys, classes, cfg);
        let (mut tp, mut fp, mut fn_) = (vec![0.0; classes], vec![0.0; classes], vec![0.0; classes]);
        for &i in &test {
            let p = model.predict(&scale(i));
            if p == labels[i] {
                tp[p] += 1.0;
            } else {
                fp[p] += 1.0;
                fn_[labels[i]] += 1.0;
            }
        }
        fold_f1.push(
            (0..classes)
                .map(|c| {
                    let d = 2.0 * tp[c] + fp[c] + fn_[c];
                    if d == 0.0 { 0.0 } else { 2.0 * tp[c] / d }
                })
                .collect::<Vec<f64>>(),
        );
    }
    let (mut f1_mean, mut f1_ci) = (Vec::new(), Vec::new());
    for c in 0..classes {
        let (m, ci) = mean_ci(&fold_f1.iter().map(|f| f[c]).collect::<Vec<_>>());
        f1_mean.push(m);
        f1_ci.push(ci);
    }
    let macros: Vec<f64> = fold_f1.iter().map(|f| f.iter().sum::<f64>() / classes as f64).collect();
    let (macro_f1_mean, macro_f1_ci) = mean_ci(&macros);
    Ok(ProbeReport {
        fold_f1,
        f1_mean,
        f1_ci,
        macro_f1_mean,
        macro_f1_ci,
    })
}

/// Rows as CSV with a header line.
pub fn rows_to_csv(rows: &[StainRow]) -> String {
    let mut s = String::from("image,marker,split,mse,mae,mean_var,coverage,pixels\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{:e},{:e},{:e},{},{}\n",
            r.image, r.marker, r.split, r.mse, r.mae, r.mean_var, r.coverage, r.pixels
        ));
    }
    s
}
