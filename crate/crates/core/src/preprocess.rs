//! Raw-image preprocessing: arcsinh variance stabilisation, Butterworth
//! low-pass denoising, panel-wise percentile normalisation, subimage tiling
//! and dihedral augmentation with cropping.

use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub cofactor: f64,
    pub butter_order: u32,
    /// Radial cutoff in cycles per pixel, within (0, 0.5].
    pub butter_cutoff: f64,
    pub subimage: usize,
    pub crop: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            cofactor: 5.0,
            butter_order: 2,
            butter_cutoff: 0.25,
            subimage: 256,
            crop: 128,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.cofactor > 0.0) {
            bail!(Argument, "cofactor must be positive");
        }
        check_cutoff(self.butter_cutoff)?;
        if self.butter_order == 0 {
            bail!(Argument, "Butterworth order must be positive");
        }
        if self.crop == 0 || self.crop > self.subimage {
            bail!(Argument, "crop {} must be in 1..={}", self.crop, self.subimage);
        }
        Ok(())
    }
}

fn check_cutoff(cutoff: f64) -> Result<()> {
    if !(cutoff > 0.0 && cutoff <= 0.5) {
        bail!(Argument, "cutoff {cutoff} outside (0, 0.5]");
    }
    Ok(())
}

/// `asinh(x / cofactor)` elementwise.
pub fn arcsinh_transform(x: &Tensor<f32>, cofactor: f64) -> Result<Tensor<f32>> {
    if !(cofactor > 0.0) {
        bail!(Argument, "cofactor must be positive, got {cofactor}");
    }
    Ok(x.map(|v| (v as f64 / cofactor).asinh() as f32))
}

pub fn inverse_arcsinh(y: &Tensor<f32>, cofactor: f64) -> Tensor<f32> {
    y.map(|v| ((v as f64).sinh() * cofactor) as f32)
}

/// Butterworth magnitude response at radial frequency `f` (cycles/pixel).
pub fn butterworth_gain(f: f64, order: u32, cutoff: f64) -> f64 {
    1.0 / (1.0 + (f / cutoff).powi(2 * order as i32)).sqrt()
}

/// Signed frequency of DFT bin `k` out of `n`, in cycles per sample.
fn bin_frequency(k: usize, n: usize) -> f64 {
    let k = k as f64;
    let n = n as f64;
    if k <= n / 2.0 {
        k / n
    } else {
        k / n - 1.0
    }
}

/// Low-pass filters every channel of a `[C, H, W]` raster in the frequency
/// domain with gain `1/sqrt(1 + (f/f_c)^{2n})`, `f` the radial frequency.
pub fn butterworth_lowpass(x: &Tensor<f32>, order: u32, cutoff: f64) -> Result<Tensor<f32>> {
    check_cutoff(cutoff)?;
    if order == 0 {
        bail!(Argument, "Butterworth order must be positive");
    }
    let (c, h, w) = x.chw()?;
    if h < 4 || w < 4 {
        bail!(Dimension, "Butterworth filter needs at least 4x4, got {h}x{w}");
    }
    let mut planner = FftPlanner::<f64>::new();
    let (row_fwd, row_inv) = (planner.plan_fft_forward(w), planner.plan_fft_inverse(w));
    let (col_fwd, col_inv) = (planner.plan_fft_forward(h), planner.plan_fft_inverse(h));
    let gain: Vec<f64> = (0..h * w)
        .map(|i| {
            let (fy, fx) = (bin_frequency(i / w, h), bin_frequency(i % w, w));
            butterworth_gain((fy * fy + fx * fx).sqrt(), order, cutoff)
        })
        .collect();
    let norm = 1.0 / (h * w) as f64;
    let mut out = Vec::with_capacity(x.numel());
    let mut buf = vec![Complex::new(0.0, 0.0); h * w];
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for ch in 0..c {
        for (b, &v) in buf.iter_mut().zip(x.slab(ch)) {
            *b = Complex::new(v as f64, 0.0);
        }
        fft2(&mut buf, &mut col, h, w, row_fwd.as_ref(), col_fwd.as_ref());
        for (b, &g) in buf.iter_mut().zip(&gain) {
            *b *= g;
        }
        fft2(&mut buf, &mut col, h, w, row_inv.as_ref(), col_inv.as_ref());
        out.extend(buf.iter().map(|z| (z.re * norm) as f32));
    }
    Tensor::new(x.dims(), out)
}

fn fft2(
    buf: &mut [Complex<f64>],
    col: &mut [Complex<f64>],
    h: usize,
    w: usize,
    rows: &dyn rustfft::Fft<f64>,
    cols: &dyn rustfft::Fft<f64>,
) {
    for r in buf.chunks_exact_mut(w) {
        rows.process(r);
    }
    for x in 0..w {
        for y in 0..h {
            col[y] = buf[y * w + x];
        }
        cols.process(col);
        for y in 0..h {
            buf[y * w + x] = col[y];
        }
    }
}

/// Per-panel normalisation bound; the lower bound is fixed at 0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PanelStats {
    pub upper_bound: f64,
}

/// Nearest-rank percentile (`q` in (0, 100]) of an unsorted sample.
pub fn nearest_rank_percentile(values: &mut [f32], q: f64) -> Result<f64> {
    if values.is_empty() {
        bail!(Argument, "percentile of an empty pool");
    }
    let n = values.len();
    let rank = ((q / 100.0) * n as f64).ceil().max(1.0) as usize;
    let (_, v, _) = values.select_nth_unstable_by(rank - 1, |a, b| a.total_cmp(b));
    Ok(*v as f64)
}

/// Rounds up onto the 0.1 grid, leaving values already on it unchanged.
pub fn ceil_one_decimal(v: f64) -> f64 {
    let scaled = v * 10.0;
    let r = scaled.round();
    // tolerate f32 storage error so 9.8f32 stays 9.8
    if (scaled - r).abs() <= 1e-5 * r.abs().max(1.0) {
        r / 10.0
    } else {
        scaled.ceil() / 10.0
    }
}

/// Pools every pixel of every marker over the panel's images and takes the
/// 99th percentile, rounded up to one decimal.
pub fn compute_panel_stats<'a, I>(images: I) -> Result<PanelStats>
where
    I: IntoIterator<Item = &'a Tensor<f32>>,
{
    let mut pool: Vec<f32> = images.into_iter().flat_map(|t| t.data().iter().copied()).collect();
    let p = nearest_rank_percentile(&mut pool, 99.0)?;
    let upper_bound = ceil_one_decimal(p);
    if !(upper_bound > 0.0) {
        bail!(Degenerate, "panel 99th percentile {p} gives a non-positive bound");
    }
    Ok(PanelStats { upper_bound })
}

/// `clip(x / upper_bound, 0, 1)`.
pub fn panel_normalize(x: &Tensor<f32>, stats: &PanelStats) -> Tensor<f32> {
    let ub = stats.upper_bound;
    x.map(|v| ((v as f64 / ub).clamp(0.0, 1.0)) as f32)
}

fn window(x: &Tensor<f32>, top: usize, left: usize, hh: usize, ww: usize) -> Result<Tensor<f32>> {
    let (c, h, w) = x.chw()?;
    if top + hh > h || left + ww > w {
        bail!(Dimension, "window {hh}x{ww} at ({top},{left}) exceeds {h}x{w}");
    }
    let mut data = Vec::with_capacity(c * hh * ww);
    for ch in 0..c {
        let plane = x.slab(ch);
        for y in top..top + hh {
            data.extend_from_slice(&plane[y * w + left..][..ww]);
        }
    }
    Tensor::new(&[c, hh, ww], data)
}

/// Non-overlapping `size × size` tiles from the origin in row-major order;
/// partial border tiles are dropped.
pub fn extract_subimages(x: &Tensor<f32>, size: usize) -> Result<Vec<Tensor<f32>>> {
    let (_, h, w) = x.chw()?;
    if size == 0 {
        bail!(Argument, "tile size must be positive");
    }
    let mut tiles = Vec::new();
    for ty in 0..h / size {
        for tx in 0..w / size {
            tiles.push(window(x, ty * size, tx * size, size, size)?);
        }
    }
    Ok(tiles)
}

/// Offsets of the deterministic central crop.
pub fn center_offsets(h: usize, w: usize, crop: usize) -> (usize, usize) {
    ((h - crop) / 2, (w - crop) / 2)
}

pub fn center_crop(x: &Tensor<f32>, crop: usize) -> Result<Tensor<f32>> {
    let (_, h, w) = x.chw()?;
    if h < crop || w < crop {
        bail!(Dimension, "{h}x{w} smaller than crop {crop}");
    }
    let (top, left) = center_offsets(h, w, crop);
    window(x, top, left, crop, crop)
}

/// Element of the dihedral group of the square: `rotation` quarter turns
/// counter-clockwise applied after an optional horizontal flip.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dihedral {
    pub flip: bool,
    pub rotation: u8,
}

impl Dihedral {
    pub const IDENTITY: Dihedral = Dihedral { flip: false, rotation: 0 };

    pub fn all() -> impl Iterator<Item = Dihedral> {
        (0..8).map(|i| Dihedral {
            flip: i >= 4,
            rotation: (i % 4) as u8,
        })
    }

    pub fn inverse(self) -> Dihedral {
        if self.flip {
            self
        } else {
            Dihedral {
                flip: false,
                rotation: (4 - self.rotation) % 4,
            }
        }
    }

    /// Applies the transform to every channel of a square raster.
    pub fn apply(self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let (c, h, w) = x.chw()?;
        if h != w {
            bail!(Dimension, "dihedral transforms need a square raster, got {h}x{w}");
        }
        let n = h;
        let mut out = vec![0.0f32; x.numel()];
        for ch in 0..c {
            let src = x.slab(ch);
            let dst = &mut out[ch * n * n..][..n * n];
            for y in 0..n {
                for xx in 0..n {
                    let (mut sy, mut sx) = (y, xx);
                    // invert the rotation, then the flip, to find the source pixel
                    for _ in 0..self.rotation {
                        // one counter-clockwise quarter turn maps (y, x) -> (n-1-x, y)
                        let (py, px) = (sx, n - 1 - sy);
                        sy = py;
                        sx = px;
                    }
                    if self.flip {
                        sx = n - 1 - sx;
                    }
                    dst[y * n + xx] = src[sy * n + sx];
                }
            }
        }
        Tensor::new(x.dims(), out)
    }
}

/// The random choices behind one augmentation draw.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropDraw {
    pub transform: Dihedral,
    pub top: usize,
    pub left: usize,
}

impl CropDraw {
    pub fn sample<R: Rng + ?Sized>(size: usize, crop: usize, rng: &mut R) -> Self {
        let idx = rng.random_range(0..8u8);
        let transform = Dihedral {
            flip: idx >= 4,
            rotation: idx % 4,
        };
        let top = rng.random_range(0..=size - crop);
        let left = rng.random_range(0..=size - crop);
        Self { transform, top, left }
    }

    pub fn apply(&self, sub: &Tensor<f32>, crop: usize) -> Result<Tensor<f32>> {
        let t = self.transform.apply(sub)?;
        window(&t, self.top, self.left, crop, crop)
    }
}

/// Random right-angle rotation and reflection followed by a uniform crop;
/// all channels are transformed together.
pub fn augment_crop<R: Rng + ?Sized>(sub: &Tensor<f32>, crop: usize, rng: &mut R) -> Result<Tensor<f32>> {
    let (_, h, w) = sub.chw()?;
    if h != w || crop > h {
        bail!(Dimension, "cannot crop {crop} from {h}x{w}");
    }
    CropDraw::sample(h, crop, rng).apply(sub, crop)
}

/// Per-image pipeline up to normalisation, given the panel bound.
pub fn stabilize_and_denoise(x: &Tensor<f32>, cfg: &PreprocessConfig) -> Result<Tensor<f32>> {
    let y = arcsinh_transform(x, cfg.cofactor)?;
    butterworth_lowpass(&y, cfg.butter_order, cfg.butter_cutoff)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::rng::stream;

    fn ramp(c: usize, h: usize, w: usize) -> Tensor<f32> {
        Tensor::from_fn(&[c, h, w], |i| i as f32)
    }

    #[test]
    fn arcsinh_values() {
        let x = Tensor::new(&[1, 1, 2], vec![0.0f32, 5.0]).unwrap();
        let y = arcsinh_transform(&x, 5.0).unwrap();
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] as f64 - (1.0 + 2f64.sqrt()).ln()).abs() < 1e-6);
        assert!(arcsinh_transform(&x, 0.0).is_err());
    }

    #[test]
    fn butterworth_constant_and_checkerboard() {
        let x = Tensor::full(&[1, 8, 8], 0.7f32);
        let y = butterworth_lowpass(&x, 2, 0.25).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.7).abs() < 1e-6));

        // (−1)^(y+x) sits at (0.5, 0.5): radial frequency √0.5
        let checker = Tensor::from_fn(&[1, 8, 8], |i| if (i / 8 + i % 8) % 2 == 0 { 1.0f32 } else { -1.0 });
        let y = butterworth_lowpass(&checker, 2, 0.25).unwrap();
        let g = butterworth_gain(0.5f64.sqrt(), 2, 0.25);
        for (a, b) in y.data().iter().zip(checker.data()) {
            assert!((*a as f64 - g * *b as f64).abs() < 1e-5);
        }
        assert!(matches!(butterworth_lowpass(&x, 2, 0.6), Err(Error::Argument(_))));
        assert!(matches!(butterworth_lowpass(&Tensor::zeros(&[1, 3, 8]), 2, 0.25), Err(Error::Dimension(_))));
    }

    #[test]
    fn ceil_to_decimal() {
        assert_eq!(ceil_one_decimal(3.14), 3.2);
        assert_eq!(ceil_one_decimal(2.0), 2.0);
        assert_eq!(ceil_one_decimal(0.3), 0.3);
    }

    #[test]
    fn panel_stats_and_normalize() {
        let a = Tensor::from_fn(&[2, 10, 10], |i| (i % 100) as f32 / 10.0);
        let stats = compute_panel_stats([&a]).unwrap();
        // 200 pooled values 0.0..9.9 (each twice): nearest rank 198 → 9.8
        assert_eq!(stats.upper_bound, 9.8);
        let x = Tensor::new(&[1, 1, 3], vec![0.0f32, 9.8, 19.6]).unwrap();
        assert_eq!(panel_normalize(&x, &stats).data(), &[0.0, 1.0, 1.0]);
        assert!(compute_panel_stats(std::iter::empty::<&Tensor<f32>>()).is_err());
    }

    #[test]
    fn tiling() {
        assert_eq!(extract_subimages(&Tensor::zeros(&[1, 512, 512]), 256).unwrap().len(), 4);
        assert_eq!(extract_subimages(&Tensor::zeros(&[1, 300, 300]), 256).unwrap().len(), 1);
        assert!(extract_subimages(&Tensor::zeros(&[1, 100, 300]), 256).unwrap().is_empty());
        let x = ramp(2, 6, 9);
        let tiles = extract_subimages(&x, 3).unwrap();
        assert_eq!(tiles.len(), 6);
        // every covered pixel appears in exactly one tile, in row-major tile order
        let mut seen = std::collections::HashMap::new();
        for t in &tiles {
            for &v in t.data() {
                *seen.entry(v as i64).or_insert(0) += 1;
            }
        }
        assert_eq!(seen.len(), 2 * 6 * 9);
        assert!(seen.values().all(|&n| n == 1));
        assert_eq!(tiles[1].data()[0], 3.0);
    }

    #[test]
    fn center_crop_offsets() {
        assert_eq!(center_offsets(256, 256, 128), (64, 64));
        assert_eq!(center_offsets(129, 129, 128), (0, 0));
        let x = ramp(1, 4, 4);
        assert_eq!(center_crop(&x, 4).unwrap(), x);
        assert_eq!(center_crop(&x, 2).unwrap().data(), &[5.0, 6.0, 9.0, 10.0]);
        assert!(matches!(center_crop(&x, 5), Err(Error::Dimension(_))));
    }

    #[test]
    fn dihedral_group() {
        let x = ramp(2, 5, 5);
        for g in Dihedral::all() {
            let y = g.apply(&x).unwrap();
            assert_eq!(g.inverse().apply(&y).unwrap(), x, "{g:?}");
            let mut a = x.data().to_vec();
            let mut b = y.data().to_vec();
            a.sort_by(f32::total_cmp);
            b.sort_by(f32::total_cmp);
            assert_eq!(a, b);
        }
        let quarter = Dihedral { flip: false, rotation: 1 }.apply(&ramp(1, 2, 2)).unwrap();
        // [[0,1],[2,3]] turned counter-clockwise is [[1,3],[0,2]]
        assert_eq!(quarter.data(), &[1.0, 3.0, 0.0, 2.0]);
        let flipped = Dihedral { flip: true, rotation: 0 }.apply(&ramp(1, 2, 2)).unwrap();
        assert_eq!(flipped.data(), &[1.0, 0.0, 3.0, 2.0]);
    }

    #[test]
    fn augment_identity_and_constant() {
        let x = ramp(1, 8, 8);
        let draw = CropDraw { transform: Dihedral::IDENTITY, top: 2, left: 2 };
        assert_eq!(draw.apply(&x, 4).unwrap(), center_crop(&x, 4).unwrap());
        let c = Tensor::full(&[3, 8, 8], 0.25f32);
        let mut rng = stream(0, &[]);
        for _ in 0..10 {
            let y = augment_crop(&c, 4, &mut rng).unwrap();
            assert_eq!(y.dims(), &[3, 4, 4]);
            assert!(y.data().iter().all(|&v| v == 0.25));
        }
    }
}
