use crate::error::{config_err, Result};
use crate::losses::LossWeights;
use crate::networks::{DEFAULT_DISCRIMINATOR_WIDTHS, DEFAULT_GENERATOR_WIDTHS, DEFAULT_PYRAMID_WIDTH};
use crate::nn::AdamConfig;
use crate::perceptual::TapLayers;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// The five compared models.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    BaselineMse,
    BaselinePerceptual,
    OursFocus,
    OursFpn,
    OursFocusFpn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regularizer {
    Mse,
    Perceptual,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::BaselineMse,
        Variant::BaselinePerceptual,
        Variant::OursFocus,
        Variant::OursFpn,
        Variant::OursFocusFpn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::BaselineMse => "baseline-mse",
            Variant::BaselinePerceptual => "baseline-perceptual",
            Variant::OursFocus => "ours-focus",
            Variant::OursFpn => "ours-fpn",
            Variant::OursFocusFpn => "ours-focus-fpn",
        }
    }

    /// Two-scale pyramid discriminator instead of the single-scale one.
    pub fn uses_pyramid(self) -> bool {
        matches!(self, Variant::OursFpn | Variant::OursFocusFpn)
    }

    /// Focus maps from feature differences instead of uniform weights.
    pub fn uses_focus(self) -> bool {
        matches!(self, Variant::OursFocus | Variant::OursFocusFpn)
    }

    pub fn regularizer(self) -> Regularizer {
        match self {
            Variant::BaselineMse => Regularizer::Mse,
            _ => Regularizer::Perceptual,
        }
    }

    pub fn needs_extractor(self) -> bool {
        self.uses_focus() || self.regularizer() == Regularizer::Perceptual
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| {
            let names: Vec<_> = Variant::ALL.iter().map(|v| v.name()).collect();
            config_err!("unknown variant `{s}`; expected one of {}", names.join(", "))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub variant: Variant,
    pub optimizer: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub folds: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub patch_size: usize,
    /// Aligned patch pairs cropped once from the training slices of a fold.
    pub patches: usize,
    pub generator_widths: Vec<usize>,
    /// Global input-to-output skip on the generator.
    pub input_skip: bool,
    pub discriminator_widths: Vec<usize>,
    pub pyramid_width: usize,
    /// Discriminator updates per generator update.
    pub d_steps: usize,
    pub taps: TapLayers,
    /// Serial data loading; otherwise batches are assembled on a worker thread.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::OursFocusFpn,
            optimizer: AdamConfig::default(),
            epochs: 50,
            batch_size: 4,
            folds: 5,
            seed: 0,
            weights: LossWeights::default(),
            patch_size: 256,
            patches: 200,
            generator_widths: DEFAULT_GENERATOR_WIDTHS.to_vec(),
            input_skip: true,
            discriminator_widths: DEFAULT_DISCRIMINATOR_WIDTHS.to_vec(),
            pyramid_width: DEFAULT_PYRAMID_WIDTH,
            d_steps: 1,
            taps: TapLayers::default(),
            deterministic: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return Err(config_err!("learning rate must be positive, got {}", o.lr));
        }
        for (name, b) in [("beta1", o.beta1), ("beta2", o.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(config_err!("{name} must be in [0, 1), got {b}"));
            }
        }
        if !(o.eps > 0.0) {
            return Err(config_err!("eps must be positive, got {}", o.eps));
        }
        if self.batch_size == 0 {
            return Err(config_err!("batch size must be at least 1"));
        }
        if self.folds < 2 {
            return Err(config_err!("cross-validation needs at least 2 folds, got {}", self.folds));
        }
        if self.patch_size == 0 || self.patch_size % 16 != 0 {
            return Err(config_err!(
                "patch size {} must be a positive multiple of 16 (generator depth; also covers the stride-8 score maps)",
                self.patch_size
            ));
        }
        if self.patches == 0 {
            return Err(config_err!("patch count must be at least 1"));
        }
        if self.d_steps == 0 {
            return Err(config_err!("d_steps must be at least 1"));
        }
        if self.generator_widths.len() != 4 || self.generator_widths.contains(&0) {
            return Err(config_err!(
                "generator_widths must be 4 positive values, got {:?}",
                self.generator_widths
            ));
        }
        if self.discriminator_widths.len() != 3 || self.discriminator_widths.contains(&0) {
            return Err(config_err!(
                "discriminator_widths must be 3 positive values, got {:?}",
                self.discriminator_widths
            ));
        }
        if self.pyramid_width == 0 {
            return Err(config_err!("pyramid_width must be positive"));
        }
        self.weights.validate()?;
        self.taps.validate()
    }

    /// Optimizer steps per epoch.
    pub fn steps_per_epoch(&self) -> usize {
        self.patches.div_ceil(self.batch_size)
    }
}
