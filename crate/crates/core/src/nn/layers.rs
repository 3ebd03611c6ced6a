//! Stateful layers: each caches what its backward pass needs from the most
//! recent training-mode forward call.

use super::ops::{self, ConvGeom};
use super::{Param, Real, Tensor};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Batch-norm behaviour: batch statistics (and caching) or running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub(crate) fn normal_tensor<T: Real>(shape: [usize; 4], std: f64, rng: &mut impl Rng) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("valid std");
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| T::lit(dist.sample(rng))).collect())
}

#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub geom: ConvGeom,
    input: Option<Tensor<T>>,
}

impl<T: Real> Conv2d<T> {
    pub fn new(name: &str, in_c: usize, out_c: usize, geom: ConvGeom, init_std: f64, rng: &mut impl Rng) -> Self {
        let mut c = Self::without_bias(name, in_c, out_c, geom, init_std, rng);
        c.bias = Some(Param::new(format!("{name}.bias"), Tensor::zeros([1, out_c, 1, 1])));
        c
    }

    /// Bias-free variant, used when batch-norm follows.
    pub fn without_bias(name: &str, in_c: usize, out_c: usize, geom: ConvGeom, init_std: f64, rng: &mut impl Rng) -> Self {
        let k = geom.kernel;
        Conv2d {
            weight: Param::new(format!("{name}.weight"), normal_tensor([out_c, in_c, k, k], init_std, rng)),
            bias: None,
            geom,
            input: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let bias = self.bias.as_ref().map(|b| b.value.data());
        let y = ops::conv2d(x, &self.weight.value, bias, self.geom);
        self.input = (mode == Mode::Train).then(|| x.clone());
        y
    }

    pub fn backward(&mut self, dy: &Tensor<T>, need_dx: bool) -> Option<Tensor<T>> {
        let x = self.input.as_ref().expect("backward without a training forward");
        ops::conv2d_backward(
            x,
            &self.weight.value,
            dy,
            self.geom,
            Some(self.weight.grad.data_mut()),
            self.bias.as_mut().map(|b| b.grad.data_mut()),
            need_dx,
        )
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        std::iter::once(&self.weight).chain(self.bias.as_ref()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        std::iter::once(&mut self.weight).chain(self.bias.as_mut()).collect()
    }
}

/// Transposed convolution without bias (always followed by batch-norm here);
/// weight layout Ci×Co×k×k.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d<T> {
    pub weight: Param<T>,
    pub geom: ConvGeom,
    input: Option<Tensor<T>>,
}

impl<T: Real> ConvTranspose2d<T> {
    pub fn new(name: &str, in_c: usize, out_c: usize, geom: ConvGeom, init_std: f64, rng: &mut impl Rng) -> Self {
        let k = geom.kernel;
        ConvTranspose2d {
            weight: Param::new(format!("{name}.weight"), normal_tensor([in_c, out_c, k, k], init_std, rng)),
            geom,
            input: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let y = ops::conv_transpose2d(x, &self.weight.value, None, self.geom);
        self.input = (mode == Mode::Train).then(|| x.clone());
        y
    }

    pub fn backward(&mut self, dy: &Tensor<T>, need_dx: bool) -> Option<Tensor<T>> {
        let x = self.input.as_ref().expect("backward without a training forward");
        ops::conv_transpose2d_backward(
            x,
            &self.weight.value,
            dy,
            self.geom,
            Some(self.weight.grad.data_mut()),
            None,
            need_dx,
        )
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight]
    }
}

#[derive(Clone, Debug)]
struct BnCache<T> {
    normalized: Tensor<T>,
    inv_std: Vec<T>,
}

/// Per-channel batch normalization with PyTorch semantics (biased variance for
/// normalization, unbiased for the running estimate).
#[derive(Clone, Debug)]
pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    name: String,
    momentum: T,
    eps: T,
    cache: Option<BnCache<T>>,
}

impl<T: Real> BatchNorm2d<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        BatchNorm2d {
            gamma: Param::new(format!("{name}.gamma"), Tensor::full([1, channels, 1, 1], T::one())),
            beta: Param::new(format!("{name}.beta"), Tensor::zeros([1, channels, 1, 1])),
            running_mean: Tensor::zeros([1, channels, 1, 1]),
            running_var: Tensor::full([1, channels, 1, 1], T::one()),
            name: name.to_string(),
            momentum: T::lit(0.1),
            eps: T::lit(1e-5),
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let [n, c, h, w] = x.shape();
        let plane = h * w;
        let count = n * plane;
        let mut y = Tensor::zeros(x.shape());
        match mode {
            Mode::Train => {
                let mut normalized = Tensor::zeros(x.shape());
                let mut inv_std = Vec::with_capacity(c);
                let cnt = T::from_usize(count).unwrap();
                for ch in 0..c {
                    let values = || (0..n).flat_map(move |i| x.item(i)[ch * plane..(ch + 1) * plane].iter().copied());
                    let mean = values().sum::<T>() / cnt;
                    let var = values().map(|v| (v - mean) * (v - mean)).sum::<T>() / cnt;
                    let istd = T::one() / (var + self.eps).sqrt();
                    inv_std.push(istd);
                    let (g, b) = (self.gamma.value.data()[ch], self.beta.value.data()[ch]);
                    for i in 0..n {
                        let range = ch * plane..(ch + 1) * plane;
                        let src = &x.item(i)[range.clone()];
                        let nrm = &mut normalized.item_mut(i)[range.clone()];
                        for (o, &v) in nrm.iter_mut().zip(src) {
                            *o = (v - mean) * istd;
                        }
                        let nrm = &normalized.item(i)[range.clone()];
                        for (o, &v) in y.item_mut(i)[range].iter_mut().zip(nrm) {
                            *o = g * v + b;
                        }
                    }
                    let unbiased = if count > 1 {
                        var * cnt / T::from_usize(count - 1).unwrap()
                    } else {
                        var
                    };
                    let m = self.momentum;
                    let rm = &mut self.running_mean.data_mut()[ch];
                    *rm = (T::one() - m) * *rm + m * mean;
                    let rv = &mut self.running_var.data_mut()[ch];
                    *rv = (T::one() - m) * *rv + m * unbiased;
                }
                self.cache = Some(BnCache { normalized, inv_std });
            }
            Mode::Eval => {
                for ch in 0..c {
                    let istd = T::one() / (self.running_var.data()[ch] + self.eps).sqrt();
                    let mean = self.running_mean.data()[ch];
                    let (g, b) = (self.gamma.value.data()[ch], self.beta.value.data()[ch]);
                    for i in 0..n {
                        let range = ch * plane..(ch + 1) * plane;
                        let src = &x.item(i)[range.clone()];
                        for (o, &v) in y.item_mut(i)[range].iter_mut().zip(src) {
                            *o = g * (v - mean) * istd + b;
                        }
                    }
                }
                self.cache = None;
            }
        }
        y
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let cache = self.cache.as_ref().expect("backward without a training forward");
        let [n, c, h, w] = dy.shape();
        let plane = h * w;
        let cnt = T::from_usize(n * plane).unwrap();
        let mut dx = Tensor::zeros(dy.shape());
        for ch in 0..c {
            let range = ch * plane..(ch + 1) * plane;
            let mut sum_dy = T::zero();
            let mut sum_dy_xhat = T::zero();
            for i in 0..n {
                for (&d, &xh) in dy.item(i)[range.clone()].iter().zip(&cache.normalized.item(i)[range.clone()]) {
                    sum_dy += d;
                    sum_dy_xhat += d * xh;
                }
            }
            self.gamma.grad.data_mut()[ch] += sum_dy_xhat;
            self.beta.grad.data_mut()[ch] += sum_dy;
            let g = self.gamma.value.data()[ch];
            let scale = g * cache.inv_std[ch] / cnt;
            for i in 0..n {
                let xh = &cache.normalized.item(i)[range.clone()];
                let d = &dy.item(i)[range.clone()];
                for ((o, &dv), &x) in dx.item_mut(i)[range.clone()].iter_mut().zip(d).zip(xh) {
                    *o = scale * (cnt * dv - sum_dy - x * sum_dy_xhat);
                }
            }
        }
        dx
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        vec![&self.gamma, &self.beta]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.gamma, &mut self.beta]
    }

    pub fn buffers(&self) -> Vec<(String, &Tensor<T>)> {
        vec![
            (format!("{}.running_mean", self.name), &self.running_mean),
            (format!("{}.running_var", self.name), &self.running_var),
        ]
    }

    pub fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        vec![
            (format!("{}.running_mean", self.name), &mut self.running_mean),
            (format!("{}.running_var", self.name), &mut self.running_var),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    LeakyRelu(f64),
    Relu,
}

#[derive(Clone, Debug)]
enum ConvKind<T> {
    Down(Conv2d<T>),
    Up(ConvTranspose2d<T>),
}

/// Convolution (or transposed convolution) → batch-norm → activation.
#[derive(Clone, Debug)]
pub struct ConvBlock<T> {
    conv: ConvKind<T>,
    pub bn: BatchNorm2d<T>,
    activation: Activation,
    pre_activation: Option<Tensor<T>>,
}

impl<T: Real> ConvBlock<T> {
    pub fn conv(name: &str, in_c: usize, out_c: usize, geom: ConvGeom, act: Activation, std: f64, rng: &mut impl Rng) -> Self {
        ConvBlock {
            conv: ConvKind::Down(Conv2d::without_bias(&format!("{name}.conv"), in_c, out_c, geom, std, rng)),
            bn: BatchNorm2d::new(&format!("{name}.bn"), out_c),
            activation: act,
            pre_activation: None,
        }
    }

    pub fn deconv(name: &str, in_c: usize, out_c: usize, geom: ConvGeom, act: Activation, std: f64, rng: &mut impl Rng) -> Self {
        ConvBlock {
            conv: ConvKind::Up(ConvTranspose2d::new(&format!("{name}.deconv"), in_c, out_c, geom, std, rng)),
            bn: BatchNorm2d::new(&format!("{name}.bn"), out_c),
            activation: act,
            pre_activation: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let z = match &mut self.conv {
            ConvKind::Down(c) => c.forward(x, mode),
            ConvKind::Up(c) => c.forward(x, mode),
        };
        let z = self.bn.forward(&z, mode);
        let y = match self.activation {
            Activation::LeakyRelu(s) => ops::leaky_relu(&z, T::lit(s)),
            Activation::Relu => ops::relu(&z),
        };
        self.pre_activation = (mode == Mode::Train).then_some(z);
        y
    }

    pub fn backward(&mut self, dy: &Tensor<T>, need_dx: bool) -> Option<Tensor<T>> {
        let z = self.pre_activation.as_ref().expect("backward without a training forward");
        let dz = match self.activation {
            Activation::LeakyRelu(s) => ops::leaky_relu_backward(z, dy, T::lit(s)),
            Activation::Relu => ops::relu_backward(z, dy),
        };
        let dz = self.bn.backward(&dz);
        match &mut self.conv {
            ConvKind::Down(c) => c.backward(&dz, need_dx),
            ConvKind::Up(c) => c.backward(&dz, need_dx),
        }
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut p = match &self.conv {
            ConvKind::Down(c) => c.params(),
            ConvKind::Up(c) => c.params(),
        };
        p.extend(self.bn.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut p = match &mut self.conv {
            ConvKind::Down(c) => c.params_mut(),
            ConvKind::Up(c) => c.params_mut(),
        };
        p.extend(self.bn.params_mut());
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn batch_norm_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x: Tensor<f64> = normal_tensor([3, 2, 3, 3], 1.0, &mut rng);
        let r: Tensor<f64> = normal_tensor([3, 2, 3, 3], 1.0, &mut rng);
        let mut bn = BatchNorm2d::<f64>::new("bn", 2);
        bn.gamma.value.data_mut().copy_from_slice(&[1.5, -0.7]);
        let loss = |bn: &mut BatchNorm2d<f64>, x: &Tensor<f64>| {
            let y = bn.forward(x, Mode::Train);
            y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        loss(&mut bn, &x);
        let dx = bn.backward(&r);
        for i in 0..x.len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp.data_mut()[i] += 1e-6;
            xm.data_mut()[i] -= 1e-6;
            let fd = (loss(&mut bn, &xp) - loss(&mut bn, &xm)) / 2e-6;
            assert!((fd - dx.data()[i]).abs() < 1e-6, "{i}: {fd} vs {}", dx.data()[i]);
        }
    }

    #[test]
    fn eval_mode_uses_running_statistics() {
        let mut bn = BatchNorm2d::<f64>::new("bn", 1);
        let x = Tensor::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        // fresh running stats are mean 0, var 1
        let y = bn.forward(&x, Mode::Eval);
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b / (1.0f64 + 1e-5).sqrt()).abs() < 1e-12);
        }
        bn.forward(&x, Mode::Train);
        assert!((bn.running_mean.data()[0] - 0.25).abs() < 1e-12);
        // unbiased variance of [1,2,3,4] is 5/3
        assert!((bn.running_var.data()[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
    }
}
