use super::{check_divisible, INIT_STD, LEAKY_SLOPE};
use crate::error::{config_err, Result};
use crate::nn::ops::{self, ConvGeom};
use crate::nn::{Activation, Conv2d, ConvBlock, Mode, Module, Param, Real, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const DEFAULT_GENERATOR_WIDTHS: [usize; 4] = [64, 128, 256, 512];

const DOWN: ConvGeom = ConvGeom::new(4, 2, 1);
const HEAD: ConvGeom = ConvGeom::new(3, 1, 1);

/// Encoder–decoder generator with skip connections and a sigmoid head.
///
/// Encoder block `k` (1-based) feeds decoder block `4 − k` by channel
/// concatenation; the deepest encoder output feeds the first decoder directly.
#[derive(Clone, Debug)]
pub struct Generator<T> {
    widths: [usize; 4],
    enc: Vec<ConvBlock<T>>,
    dec: Vec<ConvBlock<T>>,
    head: Conv2d<T>,
    /// Gain on the input logit added to the head output, when present.
    input_skip: Option<Param<T>>,
    input_logit: Option<Tensor<T>>,
    output: Option<Tensor<T>>,
}

/// Inputs are clamped to `[SKIP_EPS, 1 − SKIP_EPS]` before taking the logit.
pub const SKIP_EPS: f64 = 1e-4;

fn logit<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (lo, hi) = (T::lit(SKIP_EPS), T::lit(1.0 - SKIP_EPS));
    x.map(|v| {
        let c = v.max(lo).min(hi);
        (c / (T::one() - c)).ln()
    })
}

impl<T: Real> Generator<T> {
    /// The plain encoder–decoder.
    pub fn new(widths: &[usize], seed: u64) -> Result<Self> {
        Self::build(widths, seed, false)
    }

    /// Adds a global skip: the output becomes `sigmoid(head + α·logit(x))`
    /// with a learnable gain `α` initialized to 1 and a zero-initialized head
    /// weight, so the untrained network is the identity up to input clamping.
    pub fn with_input_skip(widths: &[usize], seed: u64) -> Result<Self> {
        Self::build(widths, seed, true)
    }

    pub fn build(widths: &[usize], seed: u64, input_skip: bool) -> Result<Self> {
        let w: [usize; 4] = widths
            .try_into()
            .map_err(|_| config_err!("generator needs 4 channel widths, got {}", widths.len()))?;
        if w.contains(&0) {
            return Err(config_err!("generator widths must be positive, got {w:?}"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lrelu = Activation::LeakyRelu(LEAKY_SLOPE);
        let enc_in = [1, w[0], w[1], w[2]];
        let enc = (0..4)
            .map(|k| ConvBlock::conv(&format!("enc{}", k + 1), enc_in[k], w[k], DOWN, lrelu, INIT_STD, &mut rng))
            .collect();
        // (input channels, output channels) per decoder block
        let dec_io = [(w[3], w[2]), (2 * w[2], w[1]), (2 * w[1], w[0]), (2 * w[0], w[0])];
        let dec = dec_io
            .iter()
            .enumerate()
            .map(|(k, &(i, o))| ConvBlock::deconv(&format!("dec{}", k + 1), i, o, DOWN, Activation::Relu, INIT_STD, &mut rng))
            .collect();
        let mut head = Conv2d::new("head", w[0], 1, HEAD, INIT_STD, &mut rng);
        if input_skip {
            head.weight.value.fill(T::zero());
        }
        let input_skip = input_skip.then(|| Param::new("skip.gain", Tensor::full([1, 1, 1, 1], T::one())));
        Ok(Generator {
            widths: w,
            enc,
            dec,
            head,
            input_skip,
            input_logit: None,
            output: None,
        })
    }

    pub fn widths(&self) -> [usize; 4] {
        self.widths
    }

    pub fn has_input_skip(&self) -> bool {
        self.input_skip.is_some()
    }

    /// Maps an N×1×H×W batch to same-shape output in (0, 1). H and W must be
    /// multiples of 16.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        check_divisible("generator", x, 16)?;
        let mut skips = Vec::with_capacity(4);
        let mut h = x.clone();
        for block in &mut self.enc {
            h = block.forward(&h, mode);
            skips.push(h.clone());
        }
        h = self.dec[0].forward(&skips[3], mode);
        for k in 1..4 {
            let cat = ops::concat_channels(&h, &skips[3 - k]);
            h = self.dec[k].forward(&cat, mode);
        }
        let mut z = self.head.forward(&h, mode);
        if let Some(gain) = &self.input_skip {
            let l = logit(x);
            let a = gain.value.data()[0];
            for (zv, &lv) in z.data_mut().iter_mut().zip(l.data()) {
                *zv += a * lv;
            }
            self.input_logit = (mode == Mode::Train).then_some(l);
        }
        let y = ops::sigmoid(&z);
        self.output = (mode == Mode::Train).then(|| y.clone());
        Ok(y)
    }

    /// Accumulates parameter gradients for upstream gradient `dy` on the
    /// output of the last training-mode forward; returns the input gradient
    /// when `need_dx`.
    pub fn backward(&mut self, dy: &Tensor<T>, need_dx: bool) -> Option<Tensor<T>> {
        let y = self.output.as_ref().expect("backward without a training forward");
        let dz = ops::sigmoid_backward(y, dy);
        let mut dx_skip = None;
        if let Some(gain) = &mut self.input_skip {
            let l = self.input_logit.as_ref().expect("backward without a training forward");
            let a = gain.value.data()[0];
            gain.grad.data_mut()[0] += dz.data().iter().zip(l.data()).map(|(&d, &v)| d * v).sum::<T>();
            if need_dx {
                // d logit / dx = 1 / (x (1 − x)) inside the clamp; recovered from the logit.
                let (lo, hi) = (T::lit(SKIP_EPS), T::lit(1.0 - SKIP_EPS));
                dx_skip = Some(Tensor::from_vec(
                    dz.shape(),
                    dz.data()
                        .iter()
                        .zip(l.data())
                        .map(|(&d, &v)| {
                            let x = T::one() / (T::one() + (-v).exp());
                            if x <= lo || x >= hi {
                                T::zero()
                            } else {
                                a * d / (x * (T::one() - x))
                            }
                        })
                        .collect(),
                ));
            }
        }
        let mut g = self.head.backward(&dz, true).expect("dx");
        // Gradients arriving at each encoder output through skip connections.
        let mut skip_grads: [Option<Tensor<T>>; 4] = Default::default();
        for k in (1..4).rev() {
            let dcat = self.dec[k].backward(&g, true).expect("dx");
            let (dh, dskip) = ops::split_channels(&dcat, self.dec[k - 1].bn.gamma.value.channels());
            skip_grads[3 - k] = Some(dskip);
            g = dh;
        }
        g = self.dec[0].backward(&g, true).expect("dx");
        for k in (0..4).rev() {
            if let Some(s) = skip_grads[k].take() {
                g.add_assign(&s);
            }
            let need = k > 0 || need_dx;
            match self.enc[k].backward(&g, need) {
                Some(d) => g = d,
                None => return None,
            }
        }
        if let Some(d) = dx_skip {
            g.add_assign(&d);
        }
        Some(g)
    }
}

impl<T: Real> Module<T> for Generator<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut p: Vec<&Param<T>> = self.enc.iter().flat_map(|b| b.params()).collect();
        p.extend(self.dec.iter().flat_map(|b| b.params()));
        p.extend(self.head.params());
        p.extend(self.input_skip.as_ref());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut p: Vec<&mut Param<T>> = self.enc.iter_mut().flat_map(|b| b.params_mut()).collect();
        p.extend(self.dec.iter_mut().flat_map(|b| b.params_mut()));
        p.extend(self.head.params_mut());
        p.extend(self.input_skip.as_mut());
        p
    }

    fn buffers(&self) -> Vec<(String, &Tensor<T>)> {
        self.enc.iter().chain(&self.dec).flat_map(|b| b.bn.buffers()).collect()
    }

    fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        self.enc.iter_mut().chain(self.dec.iter_mut()).flat_map(|b| b.bn.buffers_mut()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn input(seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec([2, 1, 16, 16], (0..512).map(|_| rng.random_range(0.05..0.95)).collect())
    }

    #[test]
    fn untrained_skip_generator_is_identity() {
        let x = input(1);
        let mut g = Generator::<f64>::with_input_skip(&[2, 2, 2, 2], 3).unwrap();
        for mode in [Mode::Train, Mode::Eval] {
            let y = g.forward(&x, mode).unwrap();
            for (a, b) in y.data().iter().zip(x.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        assert_eq!(g.num_params(), Generator::<f64>::new(&[2, 2, 2, 2], 3).unwrap().num_params() + 1);
    }

    #[test]
    fn skip_gradients_match_finite_differences() {
        let x = input(2);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let c: Vec<f64> = (0..512).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut g = Generator::<f64>::with_input_skip(&[2, 2, 2, 2], 4).unwrap();
        for p in g.params_mut() {
            if p.name == "head.weight" {
                p.value.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
            } else if p.name == "skip.gain" {
                p.value.fill(0.8);
            }
        }
        let objective = |g: &mut Generator<f64>, x: &Tensor<f64>| -> f64 {
            let y = g.forward(x, Mode::Train).unwrap();
            y.data().iter().zip(&c).map(|(a, b)| a * b).sum()
        };
        objective(&mut g, &x);
        g.zero_grad();
        let dx = g.backward(&Tensor::from_vec([2, 1, 16, 16], c.clone()), true).unwrap();
        let h = 1e-6;
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-8);

        let analytic = g.params().into_iter().find(|p| p.name == "skip.gain").unwrap().grad.data()[0];
        let mut shifted = |d: f64| {
            for p in g.params_mut().into_iter().filter(|p| p.name == "skip.gain") {
                p.value.data_mut()[0] += d;
            }
            objective(&mut g, &x)
        };
        let plus = shifted(h);
        let minus = shifted(-2.0 * h);
        shifted(h);
        assert!(rel(analytic, (plus - minus) / (2.0 * h)) < 1e-5);

        for i in [0, 37, 200, 511] {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (objective(&mut g, &xp) - objective(&mut g, &xm)) / (2.0 * h);
            assert!(rel(dx.data()[i], fd) < 1e-4, "pixel {i}: {} vs {fd}", dx.data()[i]);
        }
    }
}
