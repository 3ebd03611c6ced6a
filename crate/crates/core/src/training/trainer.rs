use super::config::{Regularizer, TrainConfig, Variant};
use crate::error::{config_err, Result};
use crate::losses::{self, FocusMap};
use crate::networks::{Discriminator, DiscriminatorA, DiscriminatorB, Generator, ScoreMap};
use crate::nn::{Adam, Mode, Module, Real, Tensor};
use crate::perceptual::{FeatureExtractor, FeatureTap, Trace};
use serde::Serialize;

/// Loss components of one iteration. Disabled components are `None`.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct StepLosses {
    pub adv_d: f64,
    pub adv_g: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub perceptual: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mse: Option<f64>,
    /// Min / max of the focus maps, when focus maps are computed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub focus_min: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub focus_max: Option<f64>,
}

impl StepLosses {
    pub fn is_finite(&self) -> bool {
        [Some(self.adv_d), Some(self.adv_g), self.perceptual, self.mse]
            .into_iter()
            .flatten()
            .all(f64::is_finite)
    }
}

/// Generator output and the quantities derived from it that both updates share.
pub struct Prepared<T> {
    pub fake: Tensor<T>,
    pub focus: Vec<FocusMap<T>>,
    /// Extractor trace of the generator output (perceptual regularizer).
    trace: Option<Trace<T>>,
    dense_features: Option<Tensor<T>>,
}

/// Generator, discriminator and their optimizers for one variant.
pub struct Trainer<'a, T: Real> {
    pub variant: Variant,
    pub generator: Generator<T>,
    pub discriminator: Discriminator<T>,
    pub g_opt: Adam<T>,
    pub d_opt: Adam<T>,
    weights: crate::losses::LossWeights,
    extractor: Option<&'a dyn FeatureExtractor<T>>,
}

/// Seeds of the two networks derived from the run seed.
pub fn network_seeds(seed: u64) -> (u64, u64) {
    (seed ^ 0x6765_6e65, seed ^ 0x6469_7363)
}

impl<'a, T: Real> Trainer<'a, T> {
    pub fn new(config: &TrainConfig, extractor: Option<&'a dyn FeatureExtractor<T>>) -> Result<Self> {
        config.validate()?;
        let variant = config.variant;
        if variant.needs_extractor() && extractor.is_none() {
            return Err(config_err!("variant {variant} needs the perceptual feature extractor"));
        }
        let (gs, ds) = network_seeds(config.seed);
        let generator = Generator::build(&config.generator_widths, gs, config.input_skip)?;
        let discriminator = if variant.uses_pyramid() {
            Discriminator::B(DiscriminatorB::new(&config.discriminator_widths, config.pyramid_width, ds)?)
        } else {
            Discriminator::A(DiscriminatorA::new(&config.discriminator_widths, ds)?)
        };
        if variant.uses_focus() {
            let ext = extractor.expect("checked above");
            let want: Vec<usize> = discriminator.strides();
            let have: Vec<usize> = focus_taps(&discriminator).iter().map(|&t| ext.stride(t)).collect();
            if want != have {
                return Err(config_err!(
                    "focus-map tap strides {have:?} do not match discriminator score-map strides {want:?}"
                ));
            }
        }
        Ok(Trainer {
            variant,
            generator,
            discriminator,
            g_opt: Adam::new(config.optimizer),
            d_opt: Adam::new(config.optimizer),
            weights: config.weights,
            extractor,
        })
    }

    fn extractor(&self) -> &'a dyn FeatureExtractor<T> {
        self.extractor.expect("extractor present for this variant")
    }

    /// Runs the generator (training mode) and computes focus maps and the
    /// regularizer's features for the batch.
    pub fn prepare(&mut self, sparse: &Tensor<T>, dense: &Tensor<T>) -> Result<Prepared<T>> {
        let fake = self.generator.forward(sparse, Mode::Train)?;
        self.prepare_with(fake, dense)
    }

    fn prepare_with(&self, fake: Tensor<T>, dense: &Tensor<T>) -> Result<Prepared<T>> {
        let mut taps = Vec::new();
        let perceptual = self.variant.regularizer() == Regularizer::Perceptual;
        if perceptual {
            taps.push(FeatureTap::I);
        }
        let focus_taps = focus_taps(&self.discriminator);
        if self.variant.uses_focus() {
            taps.extend(&focus_taps);
        }
        let (mut trace, mut dense_features) = (None, None);
        let focus = if taps.is_empty() {
            self.uniform_focus(&fake)
        } else {
            let ext = self.extractor();
            let td = ext.forward(dense, &taps, false)?;
            let tg = ext.forward(&fake, &taps, perceptual)?;
            let focus = if self.variant.uses_focus() {
                focus_taps
                    .iter()
                    .map(|&tap| {
                        let fd = &td.feature(tap).expect("tap").data;
                        let fg = &tg.feature(tap).expect("tap").data;
                        losses::focus_map_from_features(fd, fg, tap, ext.stride(tap))
                    })
                    .collect::<Result<Vec<_>>>()?
            } else {
                self.uniform_focus(&fake)
            };
            if perceptual {
                dense_features = Some(td.feature(FeatureTap::I).expect("tap").data.clone());
                trace = Some(tg);
            }
            focus
        };
        Ok(Prepared {
            fake,
            focus,
            trace,
            dense_features,
        })
    }

    fn uniform_focus(&self, fake: &Tensor<T>) -> Vec<FocusMap<T>> {
        let [n, _, h, w] = fake.shape();
        self.discriminator
            .strides()
            .into_iter()
            .map(|s| FocusMap::ones(n, h / s, w / s, s))
            .collect()
    }

    /// One discriminator update on real `dense` vs the prepared fake batch.
    /// Returns the summed adversarial discriminator loss.
    pub fn discriminator_step(&mut self, dense: &Tensor<T>, prep: &Prepared<T>) -> Result<f64> {
        self.discriminator.zero_grad();
        let real = self.discriminator.forward(dense, Mode::Train)?;
        let placeholder: Vec<ScoreMap<T>> = real
            .iter()
            .map(|s| ScoreMap {
                data: Tensor::zeros(s.data.shape()),
                stride: s.stride,
            })
            .collect();
        let real_terms = losses::multiscale_adv_losses(&real, &placeholder, &prep.focus)?;
        let grads: Vec<Tensor<T>> = real_terms.d_terms.iter().map(|t| t.grad_real.clone()).collect();
        self.discriminator.backward(&grads, false);
        let fake = self.discriminator.forward(&prep.fake, Mode::Train)?;
        let terms = losses::multiscale_adv_losses(&real, &fake, &prep.focus)?;
        let grads: Vec<Tensor<T>> = terms.d_terms.iter().map(|t| t.grad_fake.clone()).collect();
        self.discriminator.backward(&grads, false);
        self.d_opt.step(self.discriminator.params_mut());
        Ok(terms.d_loss.as_f64())
    }

    /// Accumulates the gradient of the full generator objective into the
    /// generator's parameters (after zeroing them) and returns the components.
    /// `prep` must come from [`Self::prepare`] on the same generator state.
    pub fn generator_gradient(&mut self, dense: &Tensor<T>, prep: &Prepared<T>) -> Result<StepLosses> {
        self.generator.zero_grad();
        let w = self.weights;
        let scores = self.discriminator.forward(&prep.fake, Mode::Train)?;
        let mut adv_g = 0.0;
        let mut grads = Vec::with_capacity(scores.len());
        for (s, lam) in scores.iter().zip(&prep.focus) {
            let g = losses::lsgan_g_loss(s, lam)?;
            adv_g += g.value.as_f64();
            grads.push(g.grad_fake.map(|v| v * T::lit(w.lambda_a)));
        }
        let mut dy = self.discriminator.backward(&grads, true).expect("input gradient");
        let mut out = StepLosses {
            adv_g,
            ..StepLosses::default()
        };
        match self.variant.regularizer() {
            Regularizer::Mse => {
                let (v, g) = losses::mse_term(dense, &prep.fake)?;
                out.mse = Some(v.as_f64());
                dy.add_assign(&g.map(|x| x * T::lit(w.lambda_m)));
            }
            Regularizer::Perceptual => {
                let trace = prep.trace.as_ref().expect("perceptual trace");
                let fg = &trace.feature(FeatureTap::I).expect("tap").data;
                let fd = prep.dense_features.as_ref().expect("dense features");
                let (v, g) = losses::perceptual_term(fd, fg)?;
                out.perceptual = Some(v.as_f64());
                let g = g.map(|x| x * T::lit(w.lambda_p));
                dy.add_assign(&self.extractor().input_gradient(trace, FeatureTap::I, &g));
            }
        }
        if self.variant.uses_focus() {
            let all = prep.focus.iter().flat_map(|f| f.data.data().iter().map(|v| v.as_f64()));
            let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
            out.focus_min = Some(lo);
            out.focus_max = Some(hi);
        }
        self.generator.backward(&dy, false);
        Ok(out)
    }

    /// The scalar generator objective for the current parameters, with the
    /// given focus maps held fixed (finite-difference checks).
    pub fn generator_objective(&mut self, sparse: &Tensor<T>, dense: &Tensor<T>, focus: &[FocusMap<T>]) -> Result<f64> {
        let fake = self.generator.forward(sparse, Mode::Train)?;
        let mut prep = self.prepare_with(fake, dense)?;
        prep.focus = focus.to_vec();
        let w = self.weights;
        let scores = self.discriminator.forward(&prep.fake, Mode::Train)?;
        let mut total = 0.0;
        for (s, lam) in scores.iter().zip(&prep.focus) {
            total += w.lambda_a * losses::lsgan_g_loss(s, lam)?.value.as_f64();
        }
        total += match self.variant.regularizer() {
            Regularizer::Mse => w.lambda_m * losses::mse_term(dense, &prep.fake)?.0.as_f64(),
            Regularizer::Perceptual => {
                let fg = &prep.trace.as_ref().unwrap().feature(FeatureTap::I).unwrap().data;
                w.lambda_p * losses::perceptual_term(prep.dense_features.as_ref().unwrap(), fg)?.0.as_f64()
            }
        };
        Ok(total)
    }

    /// One full iteration: `d_steps` discriminator updates, then one
    /// generator update, sharing one generator forward and one set of focus maps.
    pub fn train_step(&mut self, sparse: &Tensor<T>, dense: &Tensor<T>, d_steps: usize) -> Result<StepLosses> {
        let prep = self.prepare(sparse, dense)?;
        let mut adv_d = 0.0;
        for _ in 0..d_steps {
            adv_d = self.discriminator_step(dense, &prep)?;
        }
        let mut out = self.generator_gradient(dense, &prep)?;
        out.adv_d = adv_d;
        if out.is_finite() {
            self.g_opt.step(self.generator.params_mut());
        }
        Ok(out)
    }
}

/// Extractor taps that feed each discriminator scale, coarse to fine.
pub fn focus_taps<T: Real>(d: &Discriminator<T>) -> Vec<FeatureTap> {
    match d {
        Discriminator::A(_) => vec![FeatureTap::J1],
        Discriminator::B(_) => vec![FeatureTap::J1, FeatureTap::J2],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perceptual::FeatureMap;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Average pooling at the score-map strides for the focus taps, identity at TAP_I.
    struct PoolExtractor;

    fn avg_pool(x: &Tensor<f64>, s: usize) -> Tensor<f64> {
        let [n, c, h, w] = x.shape();
        let (ho, wo) = (h / s, w / s);
        let mut out = Tensor::zeros([n, c, ho, wo]);
        for i in 0..n * c {
            for y in 0..ho {
                for xo in 0..wo {
                    let mut acc = 0.0;
                    for dy in 0..s {
                        for dx in 0..s {
                            acc += x.data()[i * h * w + (y * s + dy) * w + xo * s + dx];
                        }
                    }
                    out.data_mut()[i * ho * wo + y * wo + xo] = acc / (s * s) as f64;
                }
            }
        }
        out
    }

    impl FeatureExtractor<f64> for PoolExtractor {
        fn stride(&self, tap: FeatureTap) -> usize {
            match tap {
                FeatureTap::I => 1,
                FeatureTap::J1 => 8,
                FeatureTap::J2 => 4,
            }
        }

        fn channels(&self, _tap: FeatureTap) -> usize {
            1
        }

        fn forward(&self, images: &Tensor<f64>, taps: &[FeatureTap], _keep_trace: bool) -> Result<Trace<f64>> {
            let [_, _, h, w] = images.shape();
            Ok(Trace {
                features: taps
                    .iter()
                    .map(|&tap| FeatureMap {
                        data: avg_pool(images, self.stride(tap)),
                        tap,
                        source_shape: (h, w),
                    })
                    .collect(),
                layer_inputs: Vec::new(),
                pool_indices: Vec::new(),
                input_shape: images.shape(),
            })
        }

        fn input_gradient(&self, _trace: &Trace<f64>, tap: FeatureTap, grad: &Tensor<f64>) -> Tensor<f64> {
            assert_eq!(tap, FeatureTap::I);
            grad.clone()
        }
    }

    #[test]
    fn no_gradient_flows_through_focus_maps() {
        let config = TrainConfig {
            variant: Variant::OursFocusFpn,
            generator_widths: vec![2, 2, 2, 2],
            discriminator_widths: vec![2, 2, 2],
            pyramid_width: 2,
            patch_size: 16,
            ..TrainConfig::default()
        };
        let mut tr = Trainer::<f64>::new(&config, Some(&PoolExtractor)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for p in tr.generator.params_mut() {
            let range = if p.name.ends_with("gamma") { 0.5..1.5 } else { -1.0..1.0 };
            p.value.data_mut().iter_mut().for_each(|v| *v = rng.random_range(range.clone()));
        }
        let mut t = || Tensor::from_vec([4, 1, 16, 16], (0..1024).map(|_| rng.random_range(0.05..0.95)).collect());
        let (sparse, dense) = (t(), t());
        let prep = tr.prepare(&sparse, &dense).unwrap();
        let frozen = prep.focus.clone();
        assert!(frozen.iter().all(|f| f.data.data().iter().any(|&v| (v - 1.0).abs() > 1e-3)));
        tr.generator_gradient(&dense, &prep).unwrap();

        // The head bias shifts every output pixel and so every focus map.
        let k = tr.generator.params().iter().position(|p| p.name == "head.bias").unwrap();
        let analytic = tr.generator.params()[k].grad.data()[0];
        let h = 1e-6;
        let mut eval = |tr: &mut Trainer<f64>, d: f64, recompute: bool| {
            tr.generator.params_mut()[k].value.data_mut()[0] += d;
            let focus = if recompute {
                tr.prepare(&sparse, &dense).unwrap().focus
            } else {
                frozen.clone()
            };
            let v = tr.generator_objective(&sparse, &dense, &focus).unwrap();
            tr.generator.params_mut()[k].value.data_mut()[0] -= d;
            v
        };
        let fd_frozen = (eval(&mut tr, h, false) - eval(&mut tr, -h, false)) / (2.0 * h);
        let fd_live = (eval(&mut tr, h, true) - eval(&mut tr, -h, true)) / (2.0 * h);
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs());
        assert!(rel(analytic, fd_frozen) < 1e-5, "{analytic} vs frozen {fd_frozen}");
        assert!(rel(analytic, fd_live) > 1e-3, "{analytic} vs recomputed {fd_live}");
    }
}
