//! Synthetic multi-panel cohorts with planted cross-marker dependencies and
//! heteroscedastic Gaussian noise, with the clean signal kept as ground truth.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::MultiplexImage;
use crate::error::{bail, Error, Result};
use crate::hyperconv::MarkerVocabulary;
use crate::io::{write_imxp, PanelManifest, IMAGE_DIR, MANIFEST_FILE, TRUTH_DIR};
use crate::rng::stream;
use crate::tensor::Tensor;

/// One marker: `clean = offset + weights · sources`, noise standard deviation
/// `noise_base + noise_slope · clean`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarkerSpec {
    pub name: String,
    pub offset: f64,
    pub weights: Vec<f64>,
    pub noise_base: f64,
    #[serde(default)]
    pub noise_slope: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortSpec {
    pub images_per_panel: usize,
    pub height: usize,
    pub width: usize,
    /// Number of latent source fields; every weight row has this length.
    pub sources: usize,
    pub blobs_per_source: usize,
    /// Blob standard deviation range in pixels.
    pub blob_sigma: [f64; 2],
    pub markers: Vec<MarkerSpec>,
    pub panels: Vec<Vec<String>>,
}

impl Default for CohortSpec {
    /// Twelve markers over four shared and two private sources; two panels of
    /// eight overlapping in four. Markers 3 and 11 carry private sources and
    /// cannot be inferred from the rest of their panel; every other marker can.
    fn default() -> Self {
        let mixes: [&[(usize, f64)]; 12] = [
            &[(0, 1.0)],
            &[(0, 0.5), (1, 0.5)],
            &[(1, 1.0)],
            &[(4, 1.0)],
            &[(1, 0.5), (2, 0.5)],
            &[(2, 1.0)],
            &[(0, 0.5), (3, 0.5)],
            &[(3, 1.0)],
            &[(1, 1.0)],
            &[(0, 0.5), (2, 0.5)],
            &[(0, 1.0)],
            &[(5, 1.0)],
        ];
        let markers = mixes
            .iter()
            .enumerate()
            .map(|(i, mix)| {
                let mut weights = vec![0.0; 6];
                for &(s, w) in *mix {
                    weights[s] = 0.8 * w;
                }
                MarkerSpec {
                    name: format!("M{i:02}"),
                    offset: 0.1,
                    weights,
                    noise_base: 0.01 + 0.01 * (i % 4) as f64,
                    noise_slope: if i % 2 == 0 { 0.08 } else { 0.0 },
                }
            })
            .collect();
        let names = |r: std::ops::Range<usize>| r.map(|i| format!("M{i:02}")).collect();
        Self {
            images_per_panel: 64,
            height: 64,
            width: 64,
            sources: 6,
            blobs_per_source: 6,
            blob_sigma: [2.5, 7.0],
            markers,
            panels: vec![names(0..8), names(4..12)],
        }
    }
}

/// Clean raster, noisy observation and the per-pixel noise standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthImage {
    pub clean: Tensor<f32>,
    pub noisy: Tensor<f32>,
    pub sigma: Tensor<f32>,
}

impl CohortSpec {
    pub fn validate(&self) -> Result<()> {
        if self.markers.is_empty() || self.panels.is_empty() {
            bail!(Argument, "cohort needs markers and panels");
        }
        if self.height == 0 || self.width == 0 || self.sources == 0 {
            bail!(Argument, "image size and source count must be positive");
        }
        let [lo, hi] = self.blob_sigma;
        if !(lo > 0.0 && lo <= hi) {
            bail!(Argument, "blob sigma range {lo}..{hi} invalid");
        }
        for m in &self.markers {
            if m.weights.len() != self.sources {
                bail!(Argument, "marker {} has {} weights for {} sources", m.name, m.weights.len(), self.sources);
            }
            if m.offset < 0.0 || m.weights.iter().any(|&w| w < 0.0) {
                bail!(Argument, "marker {} has negative mixture terms", m.name);
            }
            if m.offset + m.weights.iter().sum::<f64>() > 1.0 + 1e-12 {
                bail!(Argument, "marker {} can exceed 1 before clipping", m.name);
            }
            if m.noise_base < 0.0 || m.noise_slope < 0.0 {
                bail!(Argument, "marker {} has negative noise", m.name);
            }
        }
        let vocab = self.vocab()?;
        for p in &self.panels {
            vocab.resolve(p)?;
        }
        Ok(())
    }

    pub fn vocab(&self) -> Result<MarkerVocabulary> {
        let names: Vec<&str> = self.markers.iter().map(|m| m.name.as_str()).collect();
        MarkerVocabulary::new(&names)
    }

    pub fn manifest(&self) -> PanelManifest {
        PanelManifest {
            vocabulary: self.markers.iter().map(|m| m.name.clone()).collect(),
            panels: self.panels.clone(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Argument(format!("cohort spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Argument(format!("cohort spec: {e}")))
    }
}

/// Source fields `[S, H, W]`: each a sum of isotropic Gaussian blobs scaled
/// so its maximum is 1.
pub fn sample_sources<R: Rng + ?Sized>(spec: &CohortSpec, rng: &mut R) -> Tensor<f32> {
    let (h, w) = (spec.height, spec.width);
    let mut data = vec![0.0f64; spec.sources * h * w];
    for plane in data.chunks_exact_mut(h * w) {
        for _ in 0..spec.blobs_per_source {
            let cy = rng.random_range(0.0..h as f64);
            let cx = rng.random_range(0.0..w as f64);
            let s = rng.random_range(spec.blob_sigma[0]..=spec.blob_sigma[1]);
            let amp = rng.random_range(0.5..1.0);
            let inv = 1.0 / (2.0 * s * s);
            for y in 0..h {
                let dy = y as f64 - cy;
                for x in 0..w {
                    let dx = x as f64 - cx;
                    plane[y * w + x] += amp * (-(dy * dy + dx * dx) * inv).exp();
                }
            }
        }
        let max = plane.iter().copied().fold(0.0, f64::max);
        if max > 0.0 {
            plane.iter_mut().for_each(|v| *v /= max);
        }
    }
    Tensor::new(&[spec.sources, h, w], data.into_iter().map(|v| v as f32).collect()).expect("source dims")
}

/// Clean channels of `panel` (names) from given sources.
pub fn mix_sources(spec: &CohortSpec, panel: &[String], sources: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (_, h, w) = sources.chw()?;
    let mut out = Vec::with_capacity(panel.len() * h * w);
    for name in panel {
        let Some(m) = spec.markers.iter().find(|m| &m.name == name) else {
            bail!(Vocabulary, "unknown marker {name}");
        };
        for p in 0..h * w {
            let mut v = m.offset;
            for (s, &wt) in m.weights.iter().enumerate() {
                v += wt * sources.slab(s)[p] as f64;
            }
            out.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    Tensor::new(&[panel.len(), h, w], out)
}

/// Draws one image of `panel`.
pub fn generate_image<R: Rng + ?Sized>(spec: &CohortSpec, panel: &[String], rng: &mut R) -> Result<SynthImage> {
    let sources = sample_sources(spec, rng);
    let clean = mix_sources(spec, panel, &sources)?;
    let hw = spec.height * spec.width;
    let mut sigma = Vec::with_capacity(clean.numel());
    let mut noisy = Vec::with_capacity(clean.numel());
    for (c, name) in panel.iter().enumerate() {
        let m = spec.markers.iter().find(|m| &m.name == name).expect("checked in mix_sources");
        for &v in clean.slab(c) {
            let s = m.noise_base + m.noise_slope * v as f64;
            let n = if s > 0.0 {
                Normal::new(0.0, s).expect("positive sigma").sample(rng)
            } else {
                0.0
            };
            sigma.push(s as f32);
            noisy.push(if s > 0.0 { (v as f64 + n).clamp(0.0, 1.0) as f32 } else { v });
        }
        debug_assert_eq!(sigma.len(), (c + 1) * hw);
    }
    let dims = clean.dims().to_vec();
    Ok(SynthImage {
        clean,
        noisy: Tensor::new(&dims, noisy)?,
        sigma: Tensor::new(&dims, sigma)?,
    })
}

pub fn image_name(panel: usize, index: usize) -> String {
    format!("p{panel}_{index:04}")
}

/// Generates the whole cohort in memory, deterministically from `seed`.
/// Each image draws from its own derived stream.
pub fn generate_cohort(spec: &CohortSpec, seed: u64) -> Result<Vec<(String, MultiplexImage, SynthImage)>> {
    spec.validate()?;
    let mut out = Vec::with_capacity(spec.panels.len() * spec.images_per_panel);
    for (p, panel) in spec.panels.iter().enumerate() {
        for i in 0..spec.images_per_panel {
            let mut rng = stream(seed, &[p as u64, i as u64]);
            let img = generate_image(spec, panel, &mut rng)?;
            let observed = MultiplexImage::new(panel.clone(), img.noisy.clone())?;
            out.push((image_name(p, i), observed, img));
        }
    }
    Ok(out)
}

/// Writes `manifest.txt`, `images/*.imxp` and the `truth/` sidecars.
pub fn write_cohort(spec: &CohortSpec, seed: u64, dir: &Path) -> Result<usize> {
    let cohort = generate_cohort(spec, seed)?;
    for sub in [IMAGE_DIR, TRUTH_DIR] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    spec.manifest().write(&dir.join(MANIFEST_FILE))?;
    for (name, observed, truth) in &cohort {
        write_imxp(&dir.join(IMAGE_DIR).join(format!("{name}.imxp")), observed)?;
        let clean = MultiplexImage::new(observed.markers.clone(), truth.clean.clone())?;
        let sigma = MultiplexImage::new(observed.markers.clone(), truth.sigma.clone())?;
        write_imxp(&dir.join(TRUTH_DIR).join(format!("{name}.clean.imxp")), &clean)?;
        write_imxp(&dir.join(TRUTH_DIR).join(format!("{name}.sigma.imxp")), &sigma)?;
    }
    Ok(cohort.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CohortSpec {
        CohortSpec {
            images_per_panel: 3,
            height: 16,
            width: 16,
            ..CohortSpec::default()
        }
    }

    #[test]
    fn default_spec_is_valid() {
        let s = CohortSpec::default();
        s.validate().unwrap();
        assert_eq!(s.markers.len(), 12);
        assert_eq!(s.panels[0].iter().filter(|m| s.panels[1].contains(m)).count(), 4);
        let back = CohortSpec::from_toml(&s.to_toml().unwrap()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn zero_noise_and_zero_row() {
        let mut s = small();
        for m in &mut s.markers {
            m.noise_base = 0.0;
            m.noise_slope = 0.0;
        }
        s.markers[2].weights.iter_mut().for_each(|w| *w = 0.0);
        s.markers[2].offset = 0.0;
        let img = generate_image(&s, &s.panels[0], &mut stream(1, &[])).unwrap();
        assert_eq!(img.noisy, img.clean);
        assert!(img.clean.slab(2).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pixels_in_unit_range_and_deterministic() {
        let s = small();
        let a = generate_cohort(&s, 5).unwrap();
        let b = generate_cohort(&s, 5).unwrap();
        let c = generate_cohort(&s, 6).unwrap();
        assert_eq!(a.len(), 6);
        for ((_, x, _), (_, y, _)) in a.iter().zip(&b) {
            assert_eq!(x, y);
        }
        assert_ne!(a[0].1, c[0].1);
        for (_, img, t) in &a {
            assert!(img.data.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(t.clean.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert_eq!(a[3].1.markers, s.panels[1]);
    }

    #[test]
    fn invalid_specs() {
        let mut s = small();
        s.markers[0].weights[0] = 0.95;
        assert!(s.validate().is_err());
        let mut s = small();
        s.panels[0].push("nope".into());
        assert!(matches!(s.validate(), Err(Error::Vocabulary(_))));
    }
}
