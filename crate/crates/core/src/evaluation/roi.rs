use crate::error::{input_err, Result};
use crate::image::{Image, Window};
use serde::Serialize;

/// Pixel statistics of one image within the ROI, and its difference from `x_d`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RoiEntry {
    pub name: String,
    pub mean: f64,
    pub std: f64,
    /// `x_d` ROI minus this image's ROI.
    #[serde(skip)]
    pub difference: Image,
    pub difference_variance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RoiReport {
    pub window: Window,
    /// `x_d`, then `x_s`, then models in the order given.
    pub entries: Vec<RoiEntry>,
}

impl RoiReport {
    pub fn entry(&self, name: &str) -> Option<&RoiEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

fn mean_std(values: &[f32]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = values.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// ROI statistics for `x_d`, `x_s` and each named model output.
pub fn roi_report(dense: &Image, sparse: &Image, models: &[(String, Image)], window: Window) -> Result<RoiReport> {
    let (h, w) = dense.shape();
    if !window.fits(w, h) {
        return Err(input_err!(
            "ROI {window:?} outside the {w}×{h} image; x must be in [0, {w}) and y in [0, {h}) with the window inside"
        ));
    }
    let reference = dense.crop(window)?;
    let mut inputs: Vec<(&str, &Image)> = vec![("x_d", dense), ("x_s", sparse)];
    inputs.extend(models.iter().map(|(n, i)| (n.as_str(), i)));
    let mut entries = Vec::with_capacity(inputs.len());
    for (name, img) in inputs {
        if img.shape() != dense.shape() {
            return Err(input_err!("{name} has shape {:?}, expected {:?}", img.shape(), dense.shape()));
        }
        let roi = img.crop(window)?;
        let (mean, std) = mean_std(roi.data());
        let diff: Vec<f32> = reference.data().iter().zip(roi.data()).map(|(a, b)| a - b).collect();
        let (_, diff_std) = mean_std(&diff);
        entries.push(RoiEntry {
            name: name.to_string(),
            mean,
            std,
            difference: Image::from_vec(window.width, window.height, diff)?,
            difference_variance: diff_std * diff_std,
        });
    }
    Ok(RoiReport { window, entries })
}
