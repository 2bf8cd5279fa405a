//! In-memory multiplex images and panel-grouped datasets.

use crate::error::{bail, Result};
use crate::hyperconv::{MarkerSet, MarkerVocabulary};
use crate::tensor::Tensor;

/// `[C, H, W]` raster with the marker name of each channel.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiplexImage {
    pub markers: Vec<String>,
    pub data: Tensor<f32>,
}

impl MultiplexImage {
    pub fn new(markers: Vec<String>, data: Tensor<f32>) -> Result<Self> {
        let (c, _, _) = data.chw()?;
        if markers.len() != c {
            bail!(Dimension, "{} marker names for {c} channels", markers.len());
        }
        Ok(Self { markers, data })
    }

    pub fn channels(&self) -> usize {
        self.markers.len()
    }

    pub fn height(&self) -> usize {
        self.data.dims()[1]
    }

    pub fn width(&self) -> usize {
        self.data.dims()[2]
    }

    pub fn marker_set(&self, vocab: &MarkerVocabulary) -> Result<MarkerSet> {
        vocab.resolve(&self.markers)
    }

    /// Channels of `subset` in its order; every marker must be present.
    pub fn restrict(&self, own: &MarkerSet, subset: &MarkerSet) -> Result<Tensor<f32>> {
        self.data.select(&subset.positions_in(own)?)
    }
}

/// Images with their panel membership.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub vocab: MarkerVocabulary,
    pub panels: Vec<MarkerSet>,
    pub images: Vec<MultiplexImage>,
    /// Channel-order marker set of each image.
    pub image_sets: Vec<MarkerSet>,
    pub panel_of: Vec<usize>,
    pub names: Vec<String>,
}

impl Dataset {
    /// Assigns each image to the panel with the same marker set (any order).
    pub fn new(
        vocab: MarkerVocabulary,
        panels: Vec<MarkerSet>,
        images: Vec<MultiplexImage>,
        names: Vec<String>,
    ) -> Result<Self> {
        if names.len() != images.len() {
            bail!(Argument, "{} names for {} images", names.len(), images.len());
        }
        let mut image_sets = Vec::with_capacity(images.len());
        let mut panel_of = Vec::with_capacity(images.len());
        for (img, name) in images.iter().zip(&names) {
            let set = img.marker_set(&vocab)?;
            let Some(p) = panels
                .iter()
                .position(|p| p.len() == set.len() && set.is_subset_of(p))
            else {
                bail!(Argument, "image {name} matches no declared panel");
            };
            image_sets.push(set);
            panel_of.push(p);
        }
        Ok(Self {
            vocab,
            panels,
            images,
            image_sets,
            panel_of,
            names,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}
