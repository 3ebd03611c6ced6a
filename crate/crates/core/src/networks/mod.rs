//! Generator and discriminators, plus checkpoint I/O.
//!
//! Every network consumes N×1×H×W batches. Weights are initialized from
//! N(0, 0.02) with zero biases; batch-norm scale starts at 1 and shift at 0.

mod discriminator;
mod generator;

pub use discriminator::{
    Discriminator, DiscriminatorA, DiscriminatorB, ScoreMap, DEFAULT_DISCRIMINATOR_WIDTHS, DEFAULT_PYRAMID_WIDTH,
};
pub use generator::{Generator, DEFAULT_GENERATOR_WIDTHS};

use crate::checkpoint::TensorFile;
use crate::error::{config_err, input_err, Error, Result};
use crate::nn::{Module, Real, Tensor};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const INIT_STD: f64 = 0.02;
pub const LEAKY_SLOPE: f64 = 0.2;

pub(crate) fn check_divisible<T: Real>(what: &str, x: &Tensor<T>, k: usize) -> Result<()> {
    let [_, c, h, w] = x.shape();
    if c != 1 {
        return Err(input_err!("{what} expects single-channel input, got {c} channels"));
    }
    if h == 0 || w == 0 || h % k != 0 || w % k != 0 {
        let (ph, pw) = (h.div_ceil(k).max(1) * k, w.div_ceil(k).max(1) * k);
        return Err(input_err!(
            "{what} needs height and width divisible by {k}, got {h}×{w}; pad to {ph}×{pw}"
        ));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arch {
    Generator,
    DiscriminatorA,
    DiscriminatorB,
}

/// Metadata block stored with every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub arch: Arch,
    pub widths: Vec<usize>,
    pub seed: u64,
    pub epoch: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<String>,
}

pub fn save_checkpoint<T: Real, M: Module<T>>(path: &Path, model: &M, meta: &CheckpointMeta) -> Result<()> {
    let metadata = serde_json::to_value(meta).expect("metadata serializes");
    TensorFile::from_module(model, metadata).write(path)
}

pub fn read_checkpoint_meta(file: &TensorFile, path: &Path) -> Result<CheckpointMeta> {
    serde_json::from_value(file.metadata.clone()).map_err(|e| Error::format(path, format!("checkpoint metadata: {e}")))
}

/// Loads a generator checkpoint; other architectures are a configuration error.
pub fn load_generator<T: Real>(path: &Path) -> Result<(Generator<T>, CheckpointMeta)> {
    let file = TensorFile::read(path)?;
    let meta = read_checkpoint_meta(&file, path)?;
    if meta.arch != Arch::Generator {
        return Err(config_err!(
            "checkpoint {} holds {:?}, expected a generator",
            path.display(),
            meta.arch
        ));
    }
    let skip = file.get("skip.gain").is_some();
    let mut g = Generator::build(&meta.widths, meta.seed, skip)?;
    file.load_into(&mut g, path)?;
    Ok((g, meta))
}

/// Sets every parameter to zero.
pub fn zero_params<T: Real, M: Module<T>>(model: &mut M) {
    for p in model.params_mut() {
        p.value.fill(T::zero());
    }
}
