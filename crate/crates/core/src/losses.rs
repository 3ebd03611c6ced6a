//! Focus maps, focus-weighted least-squares adversarial losses, and the
//! perceptual and MSE regularizers.
//!
//! Tensor-level functions return both the loss value and its gradient with
//! respect to the quantities that are optimized. Expectations are realized as
//! means over batch and spatial locations. Focus maps are constants: no
//! gradient flows through them.

use crate::error::{config_err, input_err, Result};
use crate::image::Image;
use crate::networks::ScoreMap;
use crate::nn::{Real, Tensor};
use crate::perceptual::{FeatureExtractor, FeatureTap};
use serde::{Deserialize, Serialize};

/// Below this normalization term a focus map falls back to all ones.
pub const FOCUS_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_a: f64,
    pub lambda_m: f64,
    pub lambda_p: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_a: 1.0,
            lambda_m: 100.0,
            lambda_p: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_a", self.lambda_a), ("lambda_m", self.lambda_m), ("lambda_p", self.lambda_p)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(config_err!("{name} must be a finite non-negative number, got {v}"));
            }
        }
        Ok(())
    }
}

/// Per-location adversarial weights Λ, N×1×h×w, each item with mean 1.
#[derive(Clone, Debug, PartialEq)]
pub struct FocusMap<T> {
    pub data: Tensor<T>,
    pub tap: Option<FeatureTap>,
    pub stride: usize,
}

impl<T: Real> FocusMap<T> {
    /// Uniform weights (plain LSGAN).
    pub fn ones(batch: usize, h: usize, w: usize, stride: usize) -> Self {
        FocusMap {
            data: Tensor::full([batch, 1, h, w], T::one()),
            tap: None,
            stride,
        }
    }

    /// Uniform weights matching a score map's shape and stride.
    pub fn ones_like(score: &ScoreMap<T>) -> Self {
        let [n, _, h, w] = score.data.shape();
        Self::ones(n, h, w, score.stride)
    }
}

/// Λ from two feature batches (N×C×h×w): the per-location Euclidean norm of
/// the feature difference over channels, divided by its per-item spatial mean.
pub fn focus_map_from_features<T: Real>(
    dense: &Tensor<T>,
    generated: &Tensor<T>,
    tap: FeatureTap,
    stride: usize,
) -> Result<FocusMap<T>> {
    if dense.shape() != generated.shape() {
        return Err(input_err!(
            "feature shapes differ: {:?} vs {:?}",
            dense.shape(),
            generated.shape()
        ));
    }
    let [n, c, h, w] = dense.shape();
    let plane = h * w;
    let mut out = Tensor::zeros([n, 1, h, w]);
    for i in 0..n {
        let (a, b) = (dense.item(i), generated.item(i));
        let mut norms = vec![0.0f64; plane];
        for ch in 0..c {
            for (p, norm) in norms.iter_mut().enumerate() {
                let d = a[ch * plane + p].as_f64() - b[ch * plane + p].as_f64();
                *norm += d * d;
            }
        }
        norms.iter_mut().for_each(|v| *v = v.sqrt());
        let z = norms.iter().sum::<f64>() / plane as f64;
        let dst = out.item_mut(i);
        if z < FOCUS_EPS {
            dst.fill(T::one());
        } else {
            for (d, v) in dst.iter_mut().zip(&norms) {
                *d = T::lit(v / z);
            }
        }
    }
    Ok(FocusMap {
        data: out,
        tap: Some(tap),
        stride,
    })
}

/// Λ for a single image pair under `extractor`.
pub fn focus_map<T: Real>(
    extractor: &dyn FeatureExtractor<T>,
    x_d: &Image,
    g_out: &Image,
    tap: FeatureTap,
) -> Result<FocusMap<T>> {
    if tap == FeatureTap::I {
        return Err(config_err!("focus maps use TAP_J1 or TAP_J2, not TAP_I"));
    }
    same_shape(x_d, g_out)?;
    let fd = extractor.extract_features(x_d, tap)?;
    let fg = extractor.extract_features(g_out, tap)?;
    focus_map_from_features(&fd.data, &fg.data, tap, extractor.stride(tap))
}

fn same_shape(a: &Image, b: &Image) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(input_err!("image shapes differ: {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

fn check_score_shapes<T: Real>(score: &Tensor<T>, lam: &FocusMap<T>) -> Result<()> {
    if score.shape() != lam.data.shape() {
        return Err(input_err!(
            "score map {:?} and focus map {:?} differ in shape",
            score.shape(),
            lam.data.shape()
        ));
    }
    Ok(())
}

/// Discriminator loss value with gradients w.r.t. both score maps.
#[derive(Clone, Debug)]
pub struct DiscriminatorLoss<T> {
    pub value: T,
    pub grad_real: Tensor<T>,
    pub grad_fake: Tensor<T>,
}

/// Generator adversarial loss value with its gradient w.r.t. the fake scores.
#[derive(Clone, Debug)]
pub struct GeneratorLoss<T> {
    pub value: T,
    pub grad_fake: Tensor<T>,
}

/// `mean[(Λ⊙(s_real − 1))²] + mean[(Λ⊙s_fake)²]`.
pub fn lsgan_d_loss<T: Real>(
    real: &ScoreMap<T>,
    fake: &ScoreMap<T>,
    lam: &FocusMap<T>,
) -> Result<DiscriminatorLoss<T>> {
    check_score_shapes(&real.data, lam)?;
    check_score_shapes(&fake.data, lam)?;
    let m = T::lit(lam.data.len() as f64);
    let two = T::lit(2.0);
    let (mut sr, mut sf) = (T::zero(), T::zero());
    let mut grad_real = Tensor::zeros(real.data.shape());
    let mut grad_fake = Tensor::zeros(fake.data.shape());
    for (k, &l) in lam.data.data().iter().enumerate() {
        let r = l * (real.data.data()[k] - T::one());
        let f = l * fake.data.data()[k];
        sr += r * r;
        sf += f * f;
        grad_real.data_mut()[k] = two * l * r / m;
        grad_fake.data_mut()[k] = two * l * f / m;
    }
    Ok(DiscriminatorLoss {
        value: sr / m + sf / m,
        grad_real,
        grad_fake,
    })
}

/// `mean[(Λ⊙(s_fake − 1))²]`.
pub fn lsgan_g_loss<T: Real>(fake: &ScoreMap<T>, lam: &FocusMap<T>) -> Result<GeneratorLoss<T>> {
    check_score_shapes(&fake.data, lam)?;
    let m = T::lit(lam.data.len() as f64);
    let two = T::lit(2.0);
    let mut sum = T::zero();
    let mut grad_fake = Tensor::zeros(fake.data.shape());
    for (k, &l) in lam.data.data().iter().enumerate() {
        let f = l * (fake.data.data()[k] - T::one());
        sum += f * f;
        grad_fake.data_mut()[k] = two * l * f / m;
    }
    Ok(GeneratorLoss {
        value: sum / m,
        grad_fake,
    })
}

/// Per-scale losses summed over scales.
#[derive(Clone, Debug)]
pub struct MultiScaleLosses<T> {
    pub d_loss: T,
    pub g_loss: T,
    pub d_terms: Vec<DiscriminatorLoss<T>>,
    pub g_terms: Vec<GeneratorLoss<T>>,
}

/// Sums [`lsgan_d_loss`] and [`lsgan_g_loss`] over matching scales. Each
/// focus map must have the stride of its score maps.
pub fn multiscale_adv_losses<T: Real>(
    real: &[ScoreMap<T>],
    fake: &[ScoreMap<T>],
    lams: &[FocusMap<T>],
) -> Result<MultiScaleLosses<T>> {
    if real.len() != fake.len() || real.len() != lams.len() {
        return Err(config_err!(
            "scale count mismatch: {} real, {} fake, {} focus maps",
            real.len(),
            fake.len(),
            lams.len()
        ));
    }
    let mut out = MultiScaleLosses {
        d_loss: T::zero(),
        g_loss: T::zero(),
        d_terms: Vec::new(),
        g_terms: Vec::new(),
    };
    for ((r, f), l) in real.iter().zip(fake).zip(lams) {
        if r.stride != l.stride || f.stride != l.stride {
            return Err(config_err!(
                "focus map stride {} does not match score map stride {}",
                l.stride,
                r.stride
            ));
        }
        let d = lsgan_d_loss(r, f, l)?;
        let g = lsgan_g_loss(f, l)?;
        out.d_loss += d.value;
        out.g_loss += g.value;
        out.d_terms.push(d);
        out.g_terms.push(g);
    }
    Ok(out)
}

/// `(1/N)·‖φ(x_d) − φ(g)‖₁` with its gradient w.r.t. `φ(g)`.
pub fn perceptual_term<T: Real>(dense: &Tensor<T>, generated: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    if dense.shape() != generated.shape() {
        return Err(input_err!(
            "feature shapes differ: {:?} vs {:?}",
            dense.shape(),
            generated.shape()
        ));
    }
    let n = T::lit(dense.len() as f64);
    let mut sum = T::zero();
    let mut grad = Tensor::zeros(generated.shape());
    for (k, (&a, &b)) in dense.data().iter().zip(generated.data()).enumerate() {
        let d = b - a;
        sum += d.abs();
        grad.data_mut()[k] = if d > T::zero() {
            T::one() / n
        } else if d < T::zero() {
            -T::one() / n
        } else {
            T::zero()
        };
    }
    Ok((sum / n, grad))
}

/// Perceptual loss at `TAP_I` for a single image pair.
pub fn perceptual_loss<T: Real>(extractor: &dyn FeatureExtractor<T>, x_d: &Image, g_out: &Image) -> Result<T> {
    same_shape(x_d, g_out)?;
    let fd = extractor.extract_features(x_d, FeatureTap::I)?;
    let fg = extractor.extract_features(g_out, FeatureTap::I)?;
    Ok(perceptual_term(&fd.data, &fg.data)?.0)
}

/// Mean squared difference with its gradient w.r.t. `generated`.
pub fn mse_term<T: Real>(dense: &Tensor<T>, generated: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    if dense.shape() != generated.shape() {
        return Err(input_err!(
            "image batch shapes differ: {:?} vs {:?}",
            dense.shape(),
            generated.shape()
        ));
    }
    let n = T::lit(dense.len() as f64);
    let two = T::lit(2.0);
    let mut sum = T::zero();
    let mut grad = Tensor::zeros(generated.shape());
    for (k, (&a, &b)) in dense.data().iter().zip(generated.data()).enumerate() {
        let d = b - a;
        sum += d * d;
        grad.data_mut()[k] = two * d / n;
    }
    Ok((sum / n, grad))
}

pub fn mse_loss(x_d: &Image, g_out: &Image) -> Result<f64> {
    same_shape(x_d, g_out)?;
    let a = Image::stack::<f64>(&[x_d])?;
    let b = Image::stack::<f64>(&[g_out])?;
    Ok(mse_term(&a, &b)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perceptual::StubExtractor;

    fn score(v: f64, h: usize, stride: usize) -> ScoreMap<f64> {
        ScoreMap {
            data: Tensor::full([2, 1, h, h], v),
            stride,
        }
    }

    #[test]
    fn closed_forms() {
        let ones = FocusMap::ones(2, 4, 4, 8);
        assert_eq!(lsgan_d_loss(&score(1.0, 4, 8), &score(0.0, 4, 8), &ones).unwrap().value, 0.0);
        assert_eq!(lsgan_d_loss(&score(0.5, 4, 8), &score(0.5, 4, 8), &ones).unwrap().value, 0.5);
        assert_eq!(lsgan_g_loss(&score(0.5, 4, 8), &ones).unwrap().value, 0.25);
        let twos = FocusMap::<f64> {
            data: Tensor::full([2, 1, 4, 4], 2.0),
            tap: None,
            stride: 8,
        };
        assert_eq!(lsgan_g_loss(&score(0.0, 4, 8), &twos).unwrap().value, 4.0);
        let (r, f) = (score(0.3, 4, 8), score(0.6, 4, 8));
        let base = lsgan_d_loss(&r, &f, &ones).unwrap().value;
        assert!((lsgan_d_loss(&r, &f, &twos).unwrap().value - 4.0 * base).abs() < 1e-12);
    }

    #[test]
    fn below_mean_differences_are_down_weighted() {
        let x_d = Image::from_fn(4, 4, |x, y| (x + 4 * y) as f32 / 16.0);
        let g = Image::from_fn(4, 4, |x, y| x_d.get(x, y) + 0.01 * ((x * 7 + y * 3) % 5) as f32);
        let lam = focus_map::<f64>(&StubExtractor, &x_d, &g, FeatureTap::J1).unwrap();
        let diffs: Vec<f64> = x_d.data().iter().zip(g.data()).map(|(a, b)| (a - b).abs() as f64).collect();
        let mean = diffs.iter().sum::<f64>() / 16.0;
        let fake = score(0.3, 4, 1);
        let fake = ScoreMap {
            data: Tensor::from_vec([1, 1, 4, 4], fake.data.data()[..16].to_vec()),
            stride: 1,
        };
        let weighted = lsgan_g_loss(&fake, &lam).unwrap().grad_fake;
        let plain = lsgan_g_loss(&fake, &FocusMap::ones(1, 4, 4, 1)).unwrap().grad_fake;
        for (k, d) in diffs.iter().enumerate() {
            let l = lam.data.data()[k];
            assert!(l >= 0.0);
            if *d < mean {
                assert!(l < 1.0, "location {k}: weight {l}");
                // squared-error contribution scales with Λ², visible in the gradient as Λ²
                assert!(weighted.data()[k].abs() < plain.data()[k].abs());
            }
        }
    }

    #[test]
    fn multiscale_perfect_point_and_stride_check() {
        let real = [score(1.0, 2, 8), score(1.0, 4, 4)];
        let fake = [score(0.0, 2, 8), score(0.0, 4, 4)];
        let lams = [FocusMap::ones(2, 2, 2, 8), FocusMap::ones(2, 4, 4, 4)];
        let m = multiscale_adv_losses(&real, &fake, &lams).unwrap();
        assert_eq!((m.d_loss, m.g_loss), (0.0, 2.0));
        let swapped = [FocusMap::ones(2, 2, 2, 4), FocusMap::ones(2, 4, 4, 8)];
        assert!(matches!(
            multiscale_adv_losses(&real, &fake, &swapped),
            Err(crate::Error::Config(_))
        ));
    }

    #[test]
    fn single_location_difference_concentrates_weight() {
        let x_d = Image::filled(4, 4, 0.5);
        let mut g = x_d.clone();
        g.set(1, 2, 0.75);
        let lam = focus_map::<f64>(&StubExtractor, &x_d, &g, FeatureTap::J1).unwrap();
        for (k, &v) in lam.data.data().iter().enumerate() {
            assert_eq!(v, if k == 2 * 4 + 1 { 16.0 } else { 0.0 });
        }
        let same = focus_map::<f64>(&StubExtractor, &x_d, &x_d, FeatureTap::J2).unwrap();
        assert!(same.data.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn stub_perceptual_is_mean_absolute_difference() {
        let a = Image::from_fn(8, 8, |x, y| ((x + y) % 3) as f32 / 4.0);
        let b = Image::from_fn(8, 8, |x, _| x as f32 / 8.0);
        let mad = a.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs() as f64).sum::<f64>() / 64.0;
        let l = perceptual_loss::<f64>(&StubExtractor, &a, &b).unwrap();
        assert!((l - mad).abs() < 1e-12);
        assert_eq!(l, perceptual_loss::<f64>(&StubExtractor, &b, &a).unwrap());
        assert_eq!(perceptual_loss::<f64>(&StubExtractor, &a, &a).unwrap(), 0.0);
    }

    #[test]
    fn mse_matches_rmse_squared() {
        assert_eq!(mse_loss(&Image::filled(4, 4, 0.0), &Image::filled(4, 4, 0.5)).unwrap(), 0.25);
        let a = Image::from_fn(8, 8, |x, y| (x * y) as f32 / 64.0);
        let b = Image::from_fn(8, 8, |x, _| x as f32 / 8.0);
        let r = crate::evaluation::rmse(&a, &b).unwrap();
        assert!((mse_loss(&a, &b).unwrap() - r * r).abs() < 1e-15);
    }
}
