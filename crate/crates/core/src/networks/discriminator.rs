use super::{check_divisible, INIT_STD, LEAKY_SLOPE};
use crate::error::{config_err, Result};
use crate::nn::ops::{self, ConvGeom};
use crate::nn::{Activation, Conv2d, ConvBlock, Mode, Module, Param, Real, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const DEFAULT_DISCRIMINATOR_WIDTHS: [usize; 3] = [64, 128, 256];
/// Channel width of the pyramid (lateral outputs and merged level).
pub const DEFAULT_PYRAMID_WIDTH: usize = 128;

const DOWN: ConvGeom = ConvGeom::new(4, 2, 1);
const SAME3: ConvGeom = ConvGeom::new(3, 1, 1);
const POINT: ConvGeom = ConvGeom::new(1, 1, 0);

/// Per-location raw realness scores: N×1×h×w at `stride` relative to the input.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap<T> {
    pub data: Tensor<T>,
    pub stride: usize,
}

/// 3×3 stride-1 conv block followed by a 1×1 projection to one channel.
#[derive(Clone, Debug)]
struct Classifier<T> {
    block: ConvBlock<T>,
    out: Conv2d<T>,
}

impl<T: Real> Classifier<T> {
    fn new(name: &str, channels: usize, rng: &mut ChaCha8Rng) -> Self {
        Classifier {
            block: ConvBlock::conv(
                &format!("{name}.block"),
                channels,
                channels,
                SAME3,
                Activation::LeakyRelu(LEAKY_SLOPE),
                INIT_STD,
                rng,
            ),
            out: Conv2d::new(&format!("{name}.out"), channels, 1, POINT, INIT_STD, rng),
        }
    }

    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let h = self.block.forward(x, mode);
        self.out.forward(&h, mode)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let g = self.out.backward(dy, true).expect("dx");
        self.block.backward(&g, true).expect("dx")
    }

    fn params(&self) -> Vec<&Param<T>> {
        let mut p = self.block.params();
        p.extend(self.out.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut p = self.block.params_mut();
        p.extend(self.out.params_mut());
        p
    }
}

fn encoder<T: Real>(widths: &[usize], rng: &mut ChaCha8Rng) -> Vec<ConvBlock<T>> {
    let mut in_c = 1;
    widths
        .iter()
        .enumerate()
        .map(|(k, &w)| {
            let b = ConvBlock::conv(&format!("enc{}", k + 1), in_c, w, DOWN, Activation::LeakyRelu(LEAKY_SLOPE), INIT_STD, rng);
            in_c = w;
            b
        })
        .collect()
}

fn check_widths(widths: &[usize]) -> Result<()> {
    if widths.is_empty() || widths.contains(&0) {
        return Err(config_err!("discriminator widths must be non-empty and positive, got {widths:?}"));
    }
    Ok(())
}

/// Encoding blocks followed by one classifier; a single score map at stride
/// `2^blocks`.
#[derive(Clone, Debug)]
pub struct DiscriminatorA<T> {
    widths: Vec<usize>,
    enc: Vec<ConvBlock<T>>,
    cls: Classifier<T>,
}

impl<T: Real> DiscriminatorA<T> {
    pub fn new(widths: &[usize], seed: u64) -> Result<Self> {
        check_widths(widths)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = encoder(widths, &mut rng);
        let cls = Classifier::new("cls", *widths.last().unwrap(), &mut rng);
        Ok(DiscriminatorA {
            widths: widths.to_vec(),
            enc,
            cls,
        })
    }

    pub fn stride(&self) -> usize {
        1 << self.enc.len()
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<ScoreMap<T>> {
        check_divisible("discriminator A", x, self.stride())?;
        let mut h = x.clone();
        for b in &mut self.enc {
            h = b.forward(&h, mode);
        }
        Ok(ScoreMap {
            data: self.cls.forward(&h, mode),
            stride: self.stride(),
        })
    }

    pub fn backward(&mut self, dy: &Tensor<T>, need_dx: bool) -> Option<Tensor<T>> {
        let mut g = self.cls.backward(dy);
        for (k, b) in self.enc.iter_mut().enumerate().rev() {
            g = b.backward(&g, k > 0 || need_dx)?;
        }
        Some(g)
    }
}

impl<T: Real> Module<T> for DiscriminatorA<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut p: Vec<&Param<T>> = self.enc.iter().flat_map(|b| b.params()).collect();
        p.extend(self.cls.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut p: Vec<&mut Param<T>> = self.enc.iter_mut().flat_map(|b| b.params_mut()).collect();
        p.extend(self.cls.params_mut());
        p
    }

    fn buffers(&self) -> Vec<(String, &Tensor<T>)> {
        let mut b: Vec<_> = self.enc.iter().flat_map(|b| b.bn.buffers()).collect();
        b.extend(self.cls.block.bn.buffers());
        b
    }

    fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut b: Vec<_> = self.enc.iter_mut().flat_map(|b| b.bn.buffers_mut()).collect();
        b.extend(self.cls.block.bn.buffers_mut());
        b
    }
}

/// Three encoding blocks with a two-level feature pyramid: the top level
/// (stride 8) and the merge of the upsampled top level into the middle level
/// (stride 4), each with its own classifier.
#[derive(Clone, Debug)]
pub struct DiscriminatorB<T> {
    widths: Vec<usize>,
    enc: Vec<ConvBlock<T>>,
    lateral_mid: Conv2d<T>,
    lateral_top: Conv2d<T>,
    smooth: Conv2d<T>,
    cls_top: Classifier<T>,
    cls_mid: Classifier<T>,
}

impl<T: Real> DiscriminatorB<T> {
    pub fn new(widths: &[usize], pyramid_width: usize, seed: u64) -> Result<Self> {
        check_widths(widths)?;
        if widths.len() != 3 {
            return Err(config_err!("discriminator B needs exactly 3 widths, got {widths:?}"));
        }
        if pyramid_width == 0 {
            return Err(config_err!("pyramid width must be positive"));
        }
        let p = pyramid_width;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = encoder(widths, &mut rng);
        let lateral_mid = Conv2d::new("lateral2", widths[1], p, POINT, INIT_STD, &mut rng);
        let lateral_top = Conv2d::new("lateral3", widths[2], p, POINT, INIT_STD, &mut rng);
        let smooth = Conv2d::new("upsample.smooth", p, p, SAME3, INIT_STD, &mut rng);
        let cls_top = Classifier::new("cls1", p, &mut rng);
        let cls_mid = Classifier::new("cls2", p, &mut rng);
        Ok(DiscriminatorB {
            widths: widths.to_vec(),
            enc,
            lateral_mid,
            lateral_top,
            smooth,
            cls_top,
            cls_mid,
        })
    }

    /// Returns `(D₁, D₂)` at strides 8 and 4.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<(ScoreMap<T>, ScoreMap<T>)> {
        check_divisible("discriminator B", x, 8)?;
        let e1 = self.enc[0].forward(x, mode);
        let e2 = self.enc[1].forward(&e1, mode);
        let e3 = self.enc[2].forward(&e2, mode);
        let top = self.lateral_top.forward(&e3, mode);
        let mut merged = self.lateral_mid.forward(&e2, mode);
        merged.add_assign(&self.smooth.forward(&ops::upsample_nearest2(&top), mode));
        let d1 = self.cls_top.forward(&top, mode);
        let d2 = self.cls_mid.forward(&merged, mode);
        Ok((ScoreMap { data: d1, stride: 8 }, ScoreMap { data: d2, stride: 4 }))
    }

    pub fn backward(&mut self, d1: &Tensor<T>, d2: &Tensor<T>, need_dx: bool) -> Option<Tensor<T>> {
        let mut dtop = self.cls_top.backward(d1);
        let dmerged = self.cls_mid.backward(d2);
        let dup = self.smooth.backward(&dmerged, true).expect("dx");
        dtop.add_assign(&ops::upsample_nearest2_backward(&dup));
        let mut de2 = self.lateral_mid.backward(&dmerged, true).expect("dx");
        let de3 = self.lateral_top.backward(&dtop, true).expect("dx");
        de2.add_assign(&self.enc[2].backward(&de3, true).expect("dx"));
        let de1 = self.enc[1].backward(&de2, true).expect("dx");
        self.enc[0].backward(&de1, need_dx)
    }

    /// Zeroes the top-level lateral path (test hook for the pyramid merge).
    pub fn zero_top_lateral(&mut self) {
        for p in self.lateral_top.params_mut() {
            p.value.fill(T::zero());
        }
    }
}

impl<T: Real> Module<T> for DiscriminatorB<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut p: Vec<&Param<T>> = self.enc.iter().flat_map(|b| b.params()).collect();
        p.extend(self.lateral_mid.params());
        p.extend(self.lateral_top.params());
        p.extend(self.smooth.params());
        p.extend(self.cls_top.params());
        p.extend(self.cls_mid.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut p: Vec<&mut Param<T>> = self.enc.iter_mut().flat_map(|b| b.params_mut()).collect();
        p.extend(self.lateral_mid.params_mut());
        p.extend(self.lateral_top.params_mut());
        p.extend(self.smooth.params_mut());
        p.extend(self.cls_top.params_mut());
        p.extend(self.cls_mid.params_mut());
        p
    }

    fn buffers(&self) -> Vec<(String, &Tensor<T>)> {
        let mut b: Vec<_> = self.enc.iter().flat_map(|b| b.bn.buffers()).collect();
        b.extend(self.cls_top.block.bn.buffers());
        b.extend(self.cls_mid.block.bn.buffers());
        b
    }

    fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut b: Vec<_> = self.enc.iter_mut().flat_map(|b| b.bn.buffers_mut()).collect();
        b.extend(self.cls_top.block.bn.buffers_mut());
        b.extend(self.cls_mid.block.bn.buffers_mut());
        b
    }
}

/// Either discriminator, with score maps ordered coarse to fine.
#[derive(Clone, Debug)]
pub enum Discriminator<T> {
    A(DiscriminatorA<T>),
    B(DiscriminatorB<T>),
}

impl<T: Real> Discriminator<T> {
    pub fn strides(&self) -> Vec<usize> {
        match self {
            Discriminator::A(d) => vec![d.stride()],
            Discriminator::B(_) => vec![8, 4],
        }
    }

    pub fn widths(&self) -> &[usize] {
        match self {
            Discriminator::A(d) => &d.widths,
            Discriminator::B(d) => &d.widths,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Vec<ScoreMap<T>>> {
        Ok(match self {
            Discriminator::A(d) => vec![d.forward(x, mode)?],
            Discriminator::B(d) => {
                let (a, b) = d.forward(x, mode)?;
                vec![a, b]
            }
        })
    }

    /// `grads` matches the order of [`Self::forward`]'s score maps.
    pub fn backward(&mut self, grads: &[Tensor<T>], need_dx: bool) -> Option<Tensor<T>> {
        match self {
            Discriminator::A(d) => d.backward(&grads[0], need_dx),
            Discriminator::B(d) => d.backward(&grads[0], &grads[1], need_dx),
        }
    }
}

impl<T: Real> Module<T> for Discriminator<T> {
    fn params(&self) -> Vec<&Param<T>> {
        match self {
            Discriminator::A(d) => d.params(),
            Discriminator::B(d) => d.params(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        match self {
            Discriminator::A(d) => d.params_mut(),
            Discriminator::B(d) => d.params_mut(),
        }
    }

    fn buffers(&self) -> Vec<(String, &Tensor<T>)> {
        match self {
            Discriminator::A(d) => d.buffers(),
            Discriminator::B(d) => d.buffers(),
        }
    }

    fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        match self {
            Discriminator::A(d) => d.buffers_mut(),
            Discriminator::B(d) => d.buffers_mut(),
        }
    }
}
