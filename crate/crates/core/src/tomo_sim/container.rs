//! On-disk formats: raw float images and the dataset manifest.
//!
//! Image file layout (little-endian): `b"SVCB"`, `u32` version (1), `u32` width,
//! `u32` height, then `width × height` `f32` values in row-major order.

use crate::error::{Error, Result};
use crate::image::{Image, Window};
use crate::tomo_sim::projector::FilterKind;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

pub const IMAGE_MAGIC: &[u8; 4] = b"SVCB";
pub const IMAGE_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_FORMAT: &str = "streakfix-dataset";

pub fn encode_image(image: &Image) -> Vec<u8> {
    let mut buf = Vec::with_capacity(16 + 4 * image.data().len());
    buf.extend_from_slice(IMAGE_MAGIC);
    buf.extend_from_slice(&IMAGE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(image.width() as u32).to_le_bytes());
    buf.extend_from_slice(&(image.height() as u32).to_le_bytes());
    for v in image.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode_image(bytes: &[u8], path: &Path) -> Result<Image> {
    if bytes.len() < 16 || &bytes[..4] != IMAGE_MAGIC {
        return Err(Error::format(path, "missing SVCB header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != IMAGE_VERSION {
        return Err(Error::format(path, format!("unsupported image version {version}")));
    }
    let (w, h) = (word(8) as usize, word(12) as usize);
    let payload = &bytes[16..];
    if payload.len() != 4 * w * h {
        return Err(Error::format(
            path,
            format!("payload holds {} bytes, header promises {w}×{h} floats", payload.len()),
        ));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Image::from_vec(w, h, data)
}

/// Writes `bytes` to a sibling temp file, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_image(path: &Path, image: &Image) -> Result<()> {
    write_atomic(path, &encode_image(image))
}

pub fn read_image(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes, path)
}

/// 16-bit grayscale PNG of an image, values clipped to `[0, 1]`.
pub fn export_png16(path: &Path, image: &Image) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), image.width() as u32, image.height() as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Sixteen);
    let mut writer = enc
        .write_header()
        .map_err(|e| Error::format(path, e.to_string()))?;
    let mut raw = Vec::with_capacity(2 * image.data().len());
    for &v in image.data() {
        let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
        raw.extend_from_slice(&q.to_be_bytes());
    }
    writer
        .write_image_data(&raw)
        .map_err(|e| Error::format(path, e.to_string()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleEntry {
    pub phantom_id: u32,
    pub slice_id: u32,
    pub sparse_path: String,
    pub dense_path: String,
    pub width: u32,
    pub height: u32,
    /// Ground-truth phantom slice, when stored.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phantom_path: Option<String>,
    /// Bounding box of the bone-like structure, the default ROI.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub roi: Option<Window>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub size: u32,
    pub sparse_views: u32,
    pub dense_views: u32,
    pub filter: FilterKind,
    pub seed: u64,
    pub num_phantoms: u32,
    pub slices_per_phantom: u32,
    pub num_samples: u32,
    pub samples: Vec<SampleEntry>,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Manifest> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        if m.format != MANIFEST_FORMAT || m.version != 1 {
            return Err(Error::format(&path, format!("unexpected format {} v{}", m.format, m.version)));
        }
        if m.num_samples as usize != m.samples.len() {
            return Err(Error::format(&path, "num_samples disagrees with sample list"));
        }
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        write_atomic(&path, self.to_json().as_bytes())?;
        Ok(path)
    }

    /// Distinct phantom ids in ascending order.
    pub fn phantom_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.samples.iter().map(|s| s.phantom_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}
