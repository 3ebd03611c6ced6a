//! Synthetic paired sparse-view / dense-view data.
//!
//! Phantom slices are forward projected with a parallel-beam geometry and
//! reconstructed by filtered backprojection twice, once from a sparse set of
//! views and once from a dense set, giving pixel-registered `(x_s, x_d)` pairs.

pub mod container;
pub mod phantom;
pub mod projector;

pub use container::{Manifest, SampleEntry};
pub use phantom::{make_phantom, Phantom, PhantomSpec};
pub use projector::{filtered_backprojection, forward_project, FilterKind, Geometry, Sinogram};

use crate::error::{config_err, input_err, Error, Result};
use crate::image::{Image, Window};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

pub const DEFAULT_SPARSE_VIEWS: usize = 67;
pub const DEFAULT_DENSE_VIEWS: usize = 200;

/// Registered sparse-view / dense-view reconstructions of one phantom slice.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub sparse: Image,
    pub dense: Image,
    pub phantom_id: u32,
    pub slice_id: u32,
    /// Crop window within the source slice, for patches.
    pub window: Option<Window>,
}

/// Reconstructs `phantom` from `views` parallel-beam projections.
pub fn reconstruct(phantom: &Image, views: usize, filter: FilterKind) -> Result<Image> {
    let geometry = Geometry::for_image(phantom.width(), views);
    let sino = forward_project(phantom, &geometry)?;
    filtered_backprojection(&sino, filter, phantom.width())
}

pub fn make_pair(phantom: &Image, sparse_views: usize, dense_views: usize) -> Result<PairedSample> {
    make_pair_with(phantom, sparse_views, dense_views, FilterKind::RamLak, 0, 0)
}

pub fn make_pair_with(
    phantom: &Image,
    sparse_views: usize,
    dense_views: usize,
    filter: FilterKind,
    phantom_id: u32,
    slice_id: u32,
) -> Result<PairedSample> {
    if sparse_views == 0 {
        return Err(config_err!("sparse view count must be at least 1"));
    }
    if sparse_views >= dense_views {
        return Err(config_err!(
            "sparse views ({sparse_views}) must be fewer than dense views ({dense_views})"
        ));
    }
    Ok(PairedSample {
        sparse: reconstruct(phantom, sparse_views, filter)?,
        dense: reconstruct(phantom, dense_views, filter)?,
        phantom_id,
        slice_id,
        window: None,
    })
}

/// Random aligned crops; the same window is applied to both images.
pub fn crop_patches(pair: &PairedSample, patch_size: usize, count: usize, seed: u64) -> Result<Vec<PairedSample>> {
    let (h, w) = pair.dense.shape();
    if patch_size == 0 || patch_size % 8 != 0 {
        return Err(config_err!(
            "patch size {patch_size} must be a positive multiple of 8 so that the stride-8 \
             discriminator score maps and focus maps tile it exactly"
        ));
    }
    if patch_size > h || patch_size > w {
        return Err(config_err!("patch size {patch_size} exceeds the {w}×{h} slice"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let x = rng.random_range(0..=w - patch_size);
            let y = rng.random_range(0..=h - patch_size);
            let window = Window::new(x, y, patch_size, patch_size);
            let base = pair.window.map_or((0, 0), |p| (p.x, p.y));
            Ok(PairedSample {
                sparse: pair.sparse.crop(window)?,
                dense: pair.dense.crop(window)?,
                phantom_id: pair.phantom_id,
                slice_id: pair.slice_id,
                window: Some(Window::new(base.0 + x, base.1 + y, patch_size, patch_size)),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub num_phantoms: usize,
    pub slices_per_phantom: usize,
    pub size: usize,
    pub sparse_views: usize,
    pub dense_views: usize,
    pub num_ellipses: usize,
    pub intensity_range: [f64; 2],
    pub filter: FilterKind,
    pub seed: u64,
    /// Also store the ground-truth phantom slices.
    pub store_phantoms: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            num_phantoms: 27,
            slices_per_phantom: 4,
            size: 384,
            sparse_views: DEFAULT_SPARSE_VIEWS,
            dense_views: DEFAULT_DENSE_VIEWS,
            num_ellipses: 8,
            intensity_range: [0.1, 0.9],
            filter: FilterKind::RamLak,
            seed: 0,
            store_phantoms: true,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.slices_per_phantom == 0 {
            return Err(config_err!("slices per phantom must be at least 1"));
        }
        if self.sparse_views == 0 || self.sparse_views >= self.dense_views {
            return Err(config_err!(
                "need 1 <= sparse views ({}) < dense views ({})",
                self.sparse_views,
                self.dense_views
            ));
        }
        self.phantom_spec(0).validate()?;
        if self.size % 16 != 0 {
            return Err(config_err!(
                "slice size {} must be a multiple of 16 so whole slices pass through the generator",
                self.size
            ));
        }
        Ok(())
    }

    fn phantom_spec(&self, seed: u64) -> PhantomSpec {
        PhantomSpec {
            num_ellipses: self.num_ellipses,
            intensity_range: self.intensity_range,
            size: self.size,
            seed,
        }
    }

    /// Per-phantom seeds drawn from the dataset seed.
    fn phantom_seeds(&self) -> Vec<u64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.num_phantoms).map(|_| rng.random()).collect()
    }
}

/// Generates every phantom slice pair and writes the dataset to `out`.
pub fn build_dataset(config: &DatasetConfig, out: &Path) -> Result<Manifest> {
    config.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut samples = Vec::new();
    for (pid, seed) in config.phantom_seeds().into_iter().enumerate() {
        let phantom = Phantom::generate(&config.phantom_spec(seed))?;
        let roi = phantom.bone_window();
        for (sid, z) in phantom::slice_depths(config.slices_per_phantom).into_iter().enumerate() {
            let truth = phantom.slice(z);
            let pair = make_pair_with(
                &truth,
                config.sparse_views,
                config.dense_views,
                config.filter,
                pid as u32,
                sid as u32,
            )?;
            let stem = format!("p{pid:03}_s{sid:03}");
            let sparse_path = format!("{stem}_sparse.svcb");
            let dense_path = format!("{stem}_dense.svcb");
            container::write_image(&out.join(&sparse_path), &pair.sparse)?;
            container::write_image(&out.join(&dense_path), &pair.dense)?;
            let phantom_path = if config.store_phantoms {
                let p = format!("{stem}_phantom.svcb");
                container::write_image(&out.join(&p), &truth)?;
                Some(p)
            } else {
                None
            };
            samples.push(SampleEntry {
                phantom_id: pid as u32,
                slice_id: sid as u32,
                sparse_path,
                dense_path,
                width: config.size as u32,
                height: config.size as u32,
                phantom_path,
                roi,
            });
        }
    }
    let manifest = Manifest {
        format: container::MANIFEST_FORMAT.to_string(),
        version: 1,
        size: config.size as u32,
        sparse_views: config.sparse_views as u32,
        dense_views: config.dense_views as u32,
        filter: config.filter,
        seed: config.seed,
        num_phantoms: config.num_phantoms as u32,
        slices_per_phantom: config.slices_per_phantom as u32,
        num_samples: samples.len() as u32,
        samples,
    };
    manifest.write(out)?;
    Ok(manifest)
}

/// A dataset directory opened for reading.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Dataset> {
        Ok(Dataset {
            root: root.to_path_buf(),
            manifest: Manifest::read(root)?,
        })
    }

    pub fn len(&self) -> usize {
        self.manifest.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.samples.is_empty()
    }

    pub fn load(&self, index: usize) -> Result<PairedSample> {
        let entry = self
            .manifest
            .samples
            .get(index)
            .ok_or_else(|| input_err!("sample index {index} out of range"))?;
        let sparse = container::read_image(&self.root.join(&entry.sparse_path))?;
        let dense = container::read_image(&self.root.join(&entry.dense_path))?;
        let expect = (entry.height as usize, entry.width as usize);
        if sparse.shape() != expect || dense.shape() != expect {
            return Err(Error::format(&self.root, format!("sample {index} does not match its manifest shape")));
        }
        Ok(PairedSample {
            sparse,
            dense,
            phantom_id: entry.phantom_id,
            slice_id: entry.slice_id,
            window: None,
        })
    }

    /// Indices of samples whose phantom is in `phantoms`.
    pub fn indices_for(&self, phantoms: &[u32]) -> Vec<usize> {
        self.manifest
            .samples
            .iter()
            .enumerate()
            .filter(|(_, s)| phantoms.contains(&s.phantom_id))
            .map(|(i, _)| i)
            .collect()
    }
}
