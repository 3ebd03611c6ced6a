use super::{FeatureExtractor, FeatureMap, FeatureTap, TapLayers, Trace};
use crate::checkpoint::{NamedTensor, TensorFile};
use crate::error::{input_err, Error, Result};
use crate::nn::ops::{self, ConvGeom};
use crate::nn::{Real, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};
use std::path::Path;

pub const NUM_LAYERS: usize = 17;
pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Seed of the deterministic surrogate weight file.
pub const SURROGATE_SEED: u64 = 0x5647_4731_3600_0001;
/// SHA-256 of the surrogate weight file written by [`surrogate_weights`].
pub const SURROGATE_SHA256: &str = "596e2dcb307423e4d2306cbe75e66f3678dec047a78207c17c7eb0472e59a34d";

const CONV3: ConvGeom = ConvGeom::new(3, 1, 1);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum LayerKind {
    Conv { in_c: usize, out_c: usize },
    Relu,
    Pool,
}

fn layer_plan() -> [LayerKind; NUM_LAYERS] {
    use LayerKind::*;
    [
        Conv { in_c: 3, out_c: 64 },
        Relu,
        Conv { in_c: 64, out_c: 64 },
        Relu,
        Pool,
        Conv { in_c: 64, out_c: 128 },
        Relu,
        Conv { in_c: 128, out_c: 128 },
        Relu,
        Pool,
        Conv { in_c: 128, out_c: 256 },
        Relu,
        Conv { in_c: 256, out_c: 256 },
        Relu,
        Conv { in_c: 256, out_c: 256 },
        Relu,
        Pool,
    ]
}

/// Deterministic Kaiming-normal stand-in for pretrained weights, in the same
/// layout (`features.{index}.weight|bias`) as converted pretrained files.
pub fn surrogate_weights() -> TensorFile {
    let mut rng = ChaCha8Rng::seed_from_u64(SURROGATE_SEED);
    let mut tensors = Vec::new();
    for (idx, kind) in layer_plan().iter().enumerate() {
        if let LayerKind::Conv { in_c, out_c } = *kind {
            let std = (2.0 / (in_c * 9) as f64).sqrt();
            let dist = Normal::new(0.0, std).unwrap();
            tensors.push(NamedTensor {
                name: format!("features.{idx}.weight"),
                dims: vec![out_c, in_c, 3, 3],
                data: (0..out_c * in_c * 9).map(|_| dist.sample(&mut rng) as f32).collect(),
            });
            tensors.push(NamedTensor {
                name: format!("features.{idx}.bias"),
                dims: vec![out_c],
                data: vec![0.0; out_c],
            });
        }
    }
    TensorFile {
        metadata: serde_json::json!({
            "arch": "vgg16-features",
            "layers": NUM_LAYERS,
            "source": "surrogate-kaiming-normal",
            "seed": SURROGATE_SEED,
        }),
        tensors,
    }
}

enum Layer<T> {
    Conv { weight: Tensor<T>, bias: Vec<T> },
    Relu,
    Pool,
}

/// The first 17 layers of the 16-layer extractor, frozen.
pub struct Vgg16Features<T> {
    layers: Vec<Layer<T>>,
    taps: TapLayers,
    channels: [usize; NUM_LAYERS],
    strides: [usize; NUM_LAYERS],
}

impl<T: Real> Vgg16Features<T> {
    /// Loads weights from `path`, verifying the file's SHA-256 against `expected_sha256`.
    pub fn load(path: &Path, expected_sha256: &str, taps: TapLayers) -> Result<Self> {
        taps.validate()?;
        let bytes = std::fs::read(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::io(
                    path,
                    std::io::Error::new(
                        e.kind(),
                        format!(
                            "perceptual weights not found; expected a weight file at {} \
                             (create one with `streakfix weights --out {}`)",
                            path.display(),
                            path.display()
                        ),
                    ),
                )
            } else {
                Error::io(path, e)
            }
        })?;
        let digest = hex::encode(Sha256::digest(&bytes));
        if !digest.eq_ignore_ascii_case(expected_sha256) {
            return Err(Error::format(
                path,
                format!("checksum mismatch: file has sha256 {digest}, expected {expected_sha256}"),
            ));
        }
        Self::from_tensors(&TensorFile::decode(&bytes, path)?, path, taps)
    }

    pub fn from_tensors(file: &TensorFile, path: &Path, taps: TapLayers) -> Result<Self> {
        taps.validate()?;
        let mut layers = Vec::with_capacity(NUM_LAYERS);
        let mut channels = [0; NUM_LAYERS];
        let mut strides = [0; NUM_LAYERS];
        let (mut c, mut s) = (3, 1);
        for (idx, kind) in layer_plan().iter().enumerate() {
            layers.push(match *kind {
                LayerKind::Conv { in_c, out_c } => {
                    let fetch = |suffix: &str, dims: &[usize]| -> Result<Vec<T>> {
                        let name = format!("features.{idx}.{suffix}");
                        let t = file
                            .get(&name)
                            .ok_or_else(|| Error::format(path, format!("tensor {name} missing")))?;
                        if t.dims != dims {
                            return Err(Error::format(
                                path,
                                format!("tensor {name} has dims {:?}, expected {dims:?}", t.dims),
                            ));
                        }
                        Ok(t.data.iter().map(|&v| T::lit(v as f64)).collect())
                    };
                    let weight = fetch("weight", &[out_c, in_c, 3, 3])?;
                    c = out_c;
                    Layer::Conv {
                        weight: Tensor::from_vec([out_c, in_c, 3, 3], weight),
                        bias: fetch("bias", &[out_c])?,
                    }
                }
                LayerKind::Relu => Layer::Relu,
                LayerKind::Pool => {
                    s *= 2;
                    Layer::Pool
                }
            });
            channels[idx] = c;
            strides[idx] = s;
        }
        Ok(Vgg16Features {
            layers,
            taps,
            channels,
            strides,
        })
    }

    pub fn taps(&self) -> TapLayers {
        self.taps
    }
}

/// Replicates to three channels and applies the per-channel normalization.
pub fn preprocess<T: Real>(images: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = images.shape();
    if c != 1 {
        return Err(input_err!("expected single-channel images, got {c} channels"));
    }
    if let Some(v) = images
        .data()
        .iter()
        .map(|v| v.as_f64())
        .find(|v| !(-1e-6..=1.0 + 1e-6).contains(v))
    {
        return Err(input_err!("extractor input value {v} outside [0, 1]"));
    }
    let plane = h * w;
    let mut out = Tensor::zeros([n, 3, h, w]);
    for i in 0..n {
        let src = images.item(i);
        let dst = out.item_mut(i);
        for ch in 0..3 {
            let (m, s) = (T::lit(IMAGENET_MEAN[ch]), T::lit(IMAGENET_STD[ch]));
            for (d, &x) in dst[ch * plane..(ch + 1) * plane].iter_mut().zip(src) {
                *d = (x - m) / s;
            }
        }
    }
    Ok(out)
}

impl<T: Real> FeatureExtractor<T> for Vgg16Features<T> {
    fn stride(&self, tap: FeatureTap) -> usize {
        self.strides[self.taps.layer(tap)]
    }

    fn channels(&self, tap: FeatureTap) -> usize {
        self.channels[self.taps.layer(tap)]
    }

    fn forward(&self, images: &Tensor<T>, taps: &[FeatureTap], keep_trace: bool) -> Result<Trace<T>> {
        let [_, _, h, w] = images.shape();
        if h % 8 != 0 || w % 8 != 0 {
            return Err(input_err!("extractor input {h}×{w} must have sides divisible by 8"));
        }
        let last = taps.iter().map(|&t| self.taps.layer(t)).max().unwrap_or(0);
        let mut x = preprocess(images)?;
        let mut layer_inputs = Vec::new();
        let mut pool_indices = Vec::new();
        let mut outputs: Vec<Option<Tensor<T>>> = vec![None; last + 1];
        for (idx, layer) in self.layers.iter().enumerate().take(last + 1) {
            let (y, arg) = match layer {
                Layer::Conv { weight, bias } => (ops::conv2d(&x, weight, Some(bias), CONV3), None),
                Layer::Relu => (ops::relu(&x), None),
                Layer::Pool => {
                    let (y, arg) = ops::max_pool2(&x);
                    (y, Some(arg))
                }
            };
            if keep_trace {
                layer_inputs.push(std::mem::replace(&mut x, y));
                pool_indices.push(arg);
            } else {
                x = y;
            }
            if taps.iter().any(|&t| self.taps.layer(t) == idx) {
                outputs[idx] = Some(x.clone());
            }
        }
        let features = taps
            .iter()
            .map(|&tap| FeatureMap {
                data: outputs[self.taps.layer(tap)].clone().expect("tap computed"),
                tap,
                source_shape: (h, w),
            })
            .collect();
        Ok(Trace {
            features,
            layer_inputs,
            pool_indices,
            input_shape: images.shape(),
        })
    }

    fn input_gradient(&self, trace: &Trace<T>, tap: FeatureTap, grad: &Tensor<T>) -> Tensor<T> {
        let top = self.taps.layer(tap);
        assert!(trace.layer_inputs.len() > top, "trace does not reach the requested tap");
        let mut g = grad.clone();
        for idx in (0..=top).rev() {
            let x = &trace.layer_inputs[idx];
            g = match &self.layers[idx] {
                Layer::Conv { weight, .. } => {
                    ops::conv2d_backward(x, weight, &g, CONV3, None, None, true).expect("input gradient")
                }
                Layer::Relu => ops::relu_backward(x, &g),
                Layer::Pool => ops::max_pool2_backward(
                    x.shape(),
                    trace.pool_indices[idx].as_ref().expect("pool indices"),
                    &g,
                ),
            };
        }
        // Undo the normalization and sum the replicated channels.
        let [n, _, h, w] = trace.input_shape;
        let plane = h * w;
        let mut out = Tensor::zeros([n, 1, h, w]);
        for i in 0..n {
            let gi = g.item(i);
            let dst = out.item_mut(i);
            for ch in 0..3 {
                let inv = T::lit(1.0 / IMAGENET_STD[ch]);
                for (d, &v) in dst.iter_mut().zip(&gi[ch * plane..(ch + 1) * plane]) {
                    *d += v * inv;
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn extractor() -> Vgg16Features<f64> {
        Vgg16Features::from_tensors(&surrogate_weights(), Path::new("mem"), TapLayers::default()).unwrap()
    }

    #[test]
    fn tap_strides_and_channels() {
        let v = extractor();
        assert_eq!((v.stride(FeatureTap::I), v.channels(FeatureTap::I)), (2, 128));
        assert_eq!((v.stride(FeatureTap::J2), v.channels(FeatureTap::J2)), (4, 128));
        assert_eq!((v.stride(FeatureTap::J1), v.channels(FeatureTap::J1)), (8, 256));
    }

    #[test]
    fn surrogate_file_matches_pinned_checksum() {
        let digest = hex::encode(Sha256::digest(surrogate_weights().encode()));
        assert_eq!(digest, SURROGATE_SHA256);
    }

    #[test]
    fn preprocess_formula_and_range() {
        let x = Tensor::<f64>::full([1, 1, 8, 8], 0.5);
        let p = preprocess(&x).unwrap();
        assert_eq!(p.channels(), 3);
        for ch in 0..3 {
            let expected = (0.5 - IMAGENET_MEAN[ch]) / IMAGENET_STD[ch];
            assert!(p.item(0)[ch * 64..(ch + 1) * 64].iter().all(|&v| (v - expected).abs() < 1e-12));
        }
        assert!(preprocess(&Tensor::<f64>::full([1, 1, 8, 8], 1.01)).is_err());
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let v = extractor();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 16 * 16;
        let x = Tensor::from_vec([1, 1, 16, 16], (0..n).map(|_| rng.random_range(0.2..0.8)).collect());
        let trace = v.forward(&x, &[FeatureTap::I], true).unwrap();
        let f = &trace.features[0].data;
        let r = Tensor::from_vec(f.shape(), (0..f.len()).map(|_| rng.random_range(-1.0..1.0)).collect());
        let grad = v.input_gradient(&trace, FeatureTap::I, &r);
        let objective = |x: &Tensor<f64>| -> f64 {
            let t = v.forward(x, &[FeatureTap::I], false).unwrap();
            t.features[0].data.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
        };
        for idx in [0, 17, 100, 255] {
            let h = 1e-5;
            let mut xp = x.clone();
            xp.data_mut()[idx] += h;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= h;
            let fd = (objective(&xp) - objective(&xm)) / (2.0 * h);
            let an = grad.data()[idx];
            assert!((fd - an).abs() <= 1e-5 * (1.0 + fd.abs()), "idx {idx}: {fd} vs {an}");
        }
    }
}
