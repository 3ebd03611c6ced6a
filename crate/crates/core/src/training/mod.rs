//! Cross-validation folds, adversarial training of the five variants, and
//! generator inference.
//!
//! Each iteration runs the generator once, derives the focus maps from that
//! output, updates the discriminator (LSGAN, summed over scales), then
//! updates the generator with the adversarial term plus either the MSE or the
//! perceptual regularizer. Checkpoints are replaced atomically at the end of
//! every epoch; one JSON record per step goes to `train.jsonl`.

mod config;
mod trainer;

pub use config::{Regularizer, TrainConfig, Variant};
pub use trainer::{focus_taps, network_seeds, Prepared, StepLosses, Trainer};

use crate::error::{config_err, input_err, Error, Result};
use crate::image::Image;
use crate::networks::{save_checkpoint, Arch, CheckpointMeta, Discriminator, Generator};
use crate::nn::{Mode, Tensor};
use crate::perceptual::FeatureExtractor;
use crate::tomo_sim::{crop_patches, Dataset, PairedSample};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::time::Instant;

/// Phantom-level partition: `folds[k]` lists the held-out phantoms of fold `k`.
pub fn build_folds(phantom_ids: &[u32], folds: usize, seed: u64) -> Result<Vec<Vec<u32>>> {
    let mut ids: Vec<u32> = phantom_ids.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    if folds == 0 || ids.len() < folds {
        return Err(config_err!(
            "cannot split {} phantoms into {folds} folds; need at least as many phantoms as folds",
            ids.len()
        ));
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = vec![Vec::new(); folds];
    for (i, id) in ids.into_iter().enumerate() {
        out[i % folds].push(id);
    }
    for f in &mut out {
        f.sort_unstable();
    }
    Ok(out)
}

/// Training and held-out sample indices of one fold.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldSplit {
    pub fold: usize,
    pub train_phantoms: Vec<u32>,
    pub heldout_phantoms: Vec<u32>,
    pub train: Vec<usize>,
    pub heldout: Vec<usize>,
}

pub fn fold_split(dataset: &Dataset, folds: usize, fold: usize, seed: u64) -> Result<FoldSplit> {
    let assignment = build_folds(&dataset.manifest.phantom_ids(), folds, seed)?;
    let heldout_phantoms = assignment
        .get(fold)
        .cloned()
        .ok_or_else(|| config_err!("fold {fold} out of range; valid folds are 0..{}", folds - 1))?;
    let train_phantoms: Vec<u32> = assignment
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != fold)
        .flat_map(|(_, f)| f.iter().copied())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    Ok(FoldSplit {
        fold,
        train: dataset.indices_for(&train_phantoms),
        heldout: dataset.indices_for(&heldout_phantoms),
        train_phantoms,
        heldout_phantoms,
    })
}

/// `count` aligned patch pairs from the given slices, deterministic in `seed`.
pub fn training_patches(
    dataset: &Dataset,
    indices: &[usize],
    patch_size: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<PairedSample>> {
    if indices.is_empty() {
        return Err(config_err!("no training slices in this fold"));
    }
    let slices: Vec<PairedSample> = indices.iter().map(|&i| dataset.load(i)).collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..slices.len()).collect();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        order.shuffle(&mut rng);
        for &s in &order {
            if out.len() == count {
                break;
            }
            out.extend(crop_patches(&slices[s], patch_size, 1, rng.random())?);
        }
    }
    Ok(out)
}

/// One line of `train.jsonl`.
#[derive(Clone, Debug, Serialize)]
pub struct TrainLogRecord {
    pub fold: usize,
    pub epoch: usize,
    pub step: usize,
    pub wall_time_s: f64,
    #[serde(flatten)]
    pub losses: StepLosses,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FoldOutcome {
    pub generator_checkpoint: PathBuf,
    pub discriminator_checkpoint: PathBuf,
    pub log: PathBuf,
    pub split: FoldSplit,
    pub steps: usize,
}

pub const GENERATOR_FILE: &str = "generator.svck";
pub const DISCRIMINATOR_FILE: &str = "discriminator.svck";
pub const LOG_FILE: &str = "train.jsonl";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.json";

struct Batch {
    indices: Vec<usize>,
    sparse: Tensor<f32>,
    dense: Tensor<f32>,
}

fn make_batch(patches: &[PairedSample], indices: &[usize]) -> Result<Batch> {
    let sparse: Vec<&Image> = indices.iter().map(|&i| &patches[i].sparse).collect();
    let dense: Vec<&Image> = indices.iter().map(|&i| &patches[i].dense).collect();
    Ok(Batch {
        indices: indices.to_vec(),
        sparse: Image::stack(&sparse)?,
        dense: Image::stack(&dense)?,
    })
}

fn epoch_order(len: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)));
    order
}

fn checkpoint_meta(arch: Arch, widths: Vec<usize>, config: &TrainConfig, seed: u64, epoch: usize) -> CheckpointMeta {
    CheckpointMeta {
        arch,
        widths,
        seed,
        epoch,
        variant: Some(config.variant.name().to_string()),
    }
}

fn write_checkpoints(
    out_dir: &Path,
    config: &TrainConfig,
    g: &Generator<f32>,
    d: &Discriminator<f32>,
    epoch: usize,
) -> Result<()> {
    let (gs, ds) = network_seeds(config.seed);
    let g_meta = checkpoint_meta(Arch::Generator, g.widths().to_vec(), config, gs, epoch);
    save_checkpoint(&out_dir.join(GENERATOR_FILE), g, &g_meta)?;
    let arch = match d {
        Discriminator::A(_) => Arch::DiscriminatorA,
        Discriminator::B(_) => Arch::DiscriminatorB,
    };
    save_checkpoint(&out_dir.join(DISCRIMINATOR_FILE), d, &checkpoint_meta(arch, d.widths().to_vec(), config, ds, epoch))
}

/// Trains one cross-validation fold, writing checkpoints and logs to `out_dir`.
pub fn train_fold(
    config: &TrainConfig,
    dataset: &Dataset,
    fold: usize,
    out_dir: &Path,
    extractor: Option<&dyn FeatureExtractor<f32>>,
    mut progress: impl FnMut(&TrainLogRecord),
) -> Result<FoldOutcome> {
    config.validate()?;
    let split = fold_split(dataset, config.folds, fold, config.seed)?;
    let mut trainer = Trainer::new(config, extractor)?;
    let patches = if config.epochs > 0 {
        training_patches(dataset, &split.train, config.patch_size, config.patches, config.seed ^ fold as u64)?
    } else {
        Vec::new()
    };
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join(LOG_FILE);
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
    write_checkpoints(out_dir, config, &trainer.generator, &trainer.discriminator, 0)?;

    let start = Instant::now();
    let mut step = 0;
    for epoch in 1..=config.epochs {
        let order = epoch_order(patches.len(), config.seed, epoch);
        let chunks: Vec<Vec<usize>> = order.chunks(config.batch_size).map(|c| c.to_vec()).collect();
        let mut run_batch = |batch: Batch| -> Result<()> {
            let losses = trainer.train_step(&batch.sparse, &batch.dense, config.d_steps)?;
            step += 1;
            let record = TrainLogRecord {
                fold,
                epoch,
                step,
                wall_time_s: start.elapsed().as_secs_f64(),
                losses,
            };
            if !record.losses.is_finite() {
                let path = out_dir.join(DIAGNOSTICS_FILE);
                let diag = serde_json::json!({
                    "fold": fold,
                    "epoch": epoch,
                    "step": step,
                    "batch_indices": batch.indices,
                    "losses": record.losses,
                });
                crate::tomo_sim::container::write_atomic(
                    &path,
                    serde_json::to_string_pretty(&diag).expect("json").as_bytes(),
                )?;
                return Err(Error::Numerical {
                    msg: format!("non-finite loss at epoch {epoch}, step {step}"),
                    snapshot: path,
                });
            }
            let line = serde_json::to_string(&record).expect("json");
            writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
            progress(&record);
            Ok(())
        };
        if config.deterministic {
            for c in &chunks {
                run_batch(make_batch(&patches, c)?)?;
            }
        } else {
            std::thread::scope(|s| -> Result<()> {
                let (tx, rx) = mpsc::sync_channel::<Result<Batch>>(2);
                let patches = &patches;
                let chunks = &chunks;
                s.spawn(move || {
                    for c in chunks {
                        if tx.send(make_batch(patches, c)).is_err() {
                            break;
                        }
                    }
                });
                for batch in rx {
                    run_batch(batch?)?;
                }
                Ok(())
            })?;
        }
        log.flush().map_err(|e| Error::io(&log_path, e))?;
        write_checkpoints(out_dir, config, &trainer.generator, &trainer.discriminator, epoch)?;
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    Ok(FoldOutcome {
        generator_checkpoint: out_dir.join(GENERATOR_FILE),
        discriminator_checkpoint: out_dir.join(DISCRIMINATOR_FILE),
        log: log_path,
        split,
        steps: step,
    })
}

/// Applies the generator slice by slice in evaluation mode.
pub fn infer(generator: &mut Generator<f32>, images: &[Image]) -> Result<Vec<Image>> {
    images
        .iter()
        .map(|img| {
            let (h, w) = img.shape();
            if h % 16 != 0 || w % 16 != 0 {
                return Err(input_err!(
                    "slice {w}×{h} is not divisible by 16; pad it to {}×{} before inference",
                    w.div_ceil(16) * 16,
                    h.div_ceil(16) * 16
                ));
            }
            let y = generator.forward(&Image::stack(&[img])?, Mode::Eval)?;
            Ok(Image::unstack(&y).remove(0))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn folds_partition_phantoms() {
        let ids: Vec<u32> = (0..27).collect();
        let folds = build_folds(&ids, 5, 7).unwrap();
        let mut sizes: Vec<usize> = folds.iter().map(Vec::len).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![5, 5, 5, 6, 6]);
        let mut all: Vec<u32> = folds.concat();
        all.sort_unstable();
        assert_eq!(all, ids);
        assert_eq!(folds, build_folds(&ids, 5, 7).unwrap());
        assert!(build_folds(&ids[..3], 5, 0).is_err());
    }

    #[test]
    fn variant_policies() {
        assert!(!Variant::BaselineMse.uses_pyramid() && !Variant::BaselineMse.uses_focus());
        assert!(!Variant::OursFocus.uses_pyramid() && Variant::OursFocus.uses_focus());
        assert!(Variant::OursFpn.uses_pyramid() && !Variant::OursFpn.uses_focus());
        assert!(Variant::OursFocusFpn.uses_pyramid() && Variant::OursFocusFpn.uses_focus());
        assert_eq!(Variant::BaselineMse.regularizer(), Regularizer::Mse);
        assert_eq!("ours-fpn".parse::<Variant>().unwrap(), Variant::OursFpn);
        assert!("ours".parse::<Variant>().is_err());
    }
}
