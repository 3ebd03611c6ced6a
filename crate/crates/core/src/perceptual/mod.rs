//! Frozen 16-layer convolutional feature extractor with named tap points.
//!
//! Only the part of the feature stage needed by the losses is materialized:
//! the 17 sequential layers from the first convolution through the third
//! max-pooling. Layer indices follow the usual 0-based enumeration in which
//! convolutions, activations and poolings each count as one layer.

mod vgg;

pub use vgg::{
    preprocess, surrogate_weights, Vgg16Features, IMAGENET_MEAN, IMAGENET_STD, NUM_LAYERS, SURROGATE_SEED, SURROGATE_SHA256,
};

use crate::error::{config_err, Result};
use crate::image::Image;
use crate::nn::{Real, Tensor};
use serde::{Deserialize, Serialize};

/// Tap points consumed by the losses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FeatureTap {
    /// Perceptual-loss features.
    I,
    /// Focus map for the stride-8 score map.
    J1,
    /// Focus map for the stride-4 score map.
    J2,
}

impl FeatureTap {
    pub const ALL: [FeatureTap; 3] = [FeatureTap::I, FeatureTap::J1, FeatureTap::J2];

    pub fn name(self) -> &'static str {
        match self {
            FeatureTap::I => "TAP_I",
            FeatureTap::J1 => "TAP_J1",
            FeatureTap::J2 => "TAP_J2",
        }
    }
}

/// Sequential layer index of each tap.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TapLayers {
    pub i: usize,
    pub j1: usize,
    pub j2: usize,
}

impl Default for TapLayers {
    fn default() -> Self {
        TapLayers { i: 8, j1: 16, j2: 9 }
    }
}

impl TapLayers {
    pub fn layer(&self, tap: FeatureTap) -> usize {
        match tap {
            FeatureTap::I => self.i,
            FeatureTap::J1 => self.j1,
            FeatureTap::J2 => self.j2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for tap in FeatureTap::ALL {
            let l = self.layer(tap);
            if l >= NUM_LAYERS {
                return Err(config_err!(
                    "{} layer index {l} out of range; the extractor has layers 0..{}",
                    tap.name(),
                    NUM_LAYERS - 1
                ));
            }
        }
        Ok(())
    }
}

/// Features of a batch at one tap: N×C×(H/stride)×(W/stride).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    pub data: Tensor<T>,
    pub tap: FeatureTap,
    pub source_shape: (usize, usize),
}

/// Forward state kept for a later input-gradient computation.
#[derive(Clone, Debug)]
pub struct Trace<T> {
    pub features: Vec<FeatureMap<T>>,
    pub(crate) layer_inputs: Vec<Tensor<T>>,
    pub(crate) pool_indices: Vec<Option<Vec<u32>>>,
    pub(crate) input_shape: [usize; 4],
}

impl<T> Trace<T> {
    pub fn feature(&self, tap: FeatureTap) -> Option<&FeatureMap<T>> {
        self.features.iter().find(|f| f.tap == tap)
    }
}

/// A frozen feature extractor. Implementations are read-only after
/// construction and safe to share across threads.
pub trait FeatureExtractor<T: Real>: Send + Sync {
    fn stride(&self, tap: FeatureTap) -> usize;

    fn channels(&self, tap: FeatureTap) -> usize;

    /// Features at `taps` for an N×1×H×W batch in `[0, 1]`. With
    /// `keep_trace`, intermediate activations are retained for [`Self::input_gradient`].
    fn forward(&self, images: &Tensor<T>, taps: &[FeatureTap], keep_trace: bool) -> Result<Trace<T>>;

    /// Gradient w.r.t. the N×1×H×W input of `⟨grad, features(tap)⟩`.
    fn input_gradient(&self, trace: &Trace<T>, tap: FeatureTap, grad: &Tensor<T>) -> Tensor<T>;

    /// Convenience single-image extraction.
    fn extract_features(&self, image: &Image, tap: FeatureTap) -> Result<FeatureMap<T>> {
        let x = Image::stack::<T>(&[image])?;
        let mut trace = self.forward(&x, &[tap], false)?;
        Ok(trace.features.remove(0))
    }
}

/// Identity features at stride 1 for every tap (oracle tests of the losses).
#[derive(Clone, Copy, Debug, Default)]
pub struct StubExtractor;

impl<T: Real> FeatureExtractor<T> for StubExtractor {
    fn stride(&self, _tap: FeatureTap) -> usize {
        1
    }

    fn channels(&self, _tap: FeatureTap) -> usize {
        1
    }

    fn forward(&self, images: &Tensor<T>, taps: &[FeatureTap], _keep_trace: bool) -> Result<Trace<T>> {
        let [_, _, h, w] = images.shape();
        Ok(Trace {
            features: taps
                .iter()
                .map(|&tap| FeatureMap {
                    data: images.clone(),
                    tap,
                    source_shape: (h, w),
                })
                .collect(),
            layer_inputs: Vec::new(),
            pool_indices: Vec::new(),
            input_shape: images.shape(),
        })
    }

    fn input_gradient(&self, _trace: &Trace<T>, _tap: FeatureTap, grad: &Tensor<T>) -> Tensor<T> {
        grad.clone()
    }
}
