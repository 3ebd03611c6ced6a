//! Single-channel float image, the unit of all model input and output.

use crate::error::{input_err, Result};
use crate::nn::{Real, Tensor};
use serde::{Deserialize, Serialize};

/// Row-major grayscale image. Model-facing images hold values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

/// Axis-aligned pixel window `[x, x + width) × [y, y + height)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Window {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl Window {
    pub fn new(x: usize, y: usize, width: usize, height: usize) -> Self {
        Window { x, y, width, height }
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.width > 0 && self.height > 0 && self.x + self.width <= width && self.y + self.height <= height
    }
}

impl Image {
    pub fn zeros(width: usize, height: usize) -> Self {
        Image {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Image {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height {
            return Err(input_err!(
                "image data has {} values, expected {width}×{height}",
                data.len()
            ));
        }
        Ok(Image { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Image { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    pub fn is_square(&self) -> bool {
        self.width == self.height
    }

    pub fn crop(&self, w: Window) -> Result<Image> {
        if !w.fits(self.width, self.height) {
            return Err(input_err!(
                "window {w:?} outside {}×{} image",
                self.width,
                self.height
            ));
        }
        Ok(Image::from_fn(w.width, w.height, |x, y| self.get(w.x + x, w.y + y)))
    }

    pub fn clamp_unit(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len().max(1) as f64
    }

    /// Packs a batch of equally sized images into an N×1×H×W tensor.
    pub fn stack<T: Real>(images: &[&Image]) -> Result<Tensor<T>> {
        let first = images.first().ok_or_else(|| input_err!("empty image batch"))?;
        let (h, w) = first.shape();
        let mut data = Vec::with_capacity(images.len() * h * w);
        for img in images {
            if img.shape() != (h, w) {
                return Err(input_err!("batch mixes image shapes {:?} and {:?}", (h, w), img.shape()));
            }
            data.extend(img.data.iter().map(|&v| T::lit(v as f64)));
        }
        Ok(Tensor::from_vec([images.len(), 1, h, w], data))
    }

    /// Splits an N×1×H×W tensor back into images.
    pub fn unstack<T: Real>(t: &Tensor<T>) -> Vec<Image> {
        assert_eq!(t.channels(), 1, "expected single-channel tensor");
        (0..t.batch())
            .map(|i| Image {
                width: t.width(),
                height: t.height(),
                data: t.item(i).iter().map(|v| v.as_f64() as f32).collect(),
            })
            .collect()
    }
}
