//! Run configuration: built-in profile defaults, an optional TOML file, the
//! `STREAKFIX_SEED` environment variable and command-line flags, applied in
//! that order.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use streakfix::perceptual::SURROGATE_SHA256;
use streakfix::tomo_sim::DatasetConfig;
use streakfix::training::TrainConfig;
use streakfix::{Error, Result};

pub const SEED_ENV: &str = "STREAKFIX_SEED";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, clap::ValueEnum)]
pub enum Profile {
    /// 384² slices, 256² patches, 50 epochs.
    #[default]
    Paper,
    /// 128² slices (2 per phantom), 64² patches, 5 epochs.
    Desk,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractorConfig {
    /// Feature-extractor weight file; the built-in surrogate when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    pub sha256: String,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig {
            path: None,
            sha256: SURROGATE_SHA256.to_string(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DatasetConfig,
    pub train: TrainConfig,
    pub extractor: ExtractorConfig,
}

impl RunConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let mut c = RunConfig::default();
        if profile == Profile::Desk {
            c.data.size = 128;
            c.data.slices_per_phantom = 2;
            c.train.patch_size = 64;
            c.train.patches = 200;
            c.train.epochs = 5;
        }
        c
    }

    /// Profile defaults overlaid with `file` (if any) and the seed variable.
    pub fn load(profile: Profile, file: Option<&Path>) -> Result<Self> {
        let mut config = match file {
            None => Self::for_profile(profile),
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                let overlay: toml::Table =
                    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
                let mut base = toml::Table::try_from(Self::for_profile(profile)).expect("defaults serialize");
                merge(&mut base, overlay);
                base.try_into()
                    .map_err(|e: toml::de::Error| Error::Config(format!("{}: {}", path.display(), e.message())))?
            }
        };
        if let Ok(v) = std::env::var(SEED_ENV) {
            let seed: u64 = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
            config.data.seed = seed;
            config.train.seed = seed;
        }
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_overrides_profile_and_rejects_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "[train]\nepochs = 7\n[train.optimizer]\nlr = 0.001\n").unwrap();
        let c = RunConfig::load(Profile::Desk, Some(&path)).unwrap();
        assert_eq!((c.train.epochs, c.train.patch_size, c.data.size), (7, 64, 128));
        assert_eq!((c.train.optimizer.lr, c.train.optimizer.beta1), (0.001, 0.5));

        std::fs::write(&path, "[train]\nepochz = 7\n").unwrap();
        let err = RunConfig::load(Profile::Paper, Some(&path)).unwrap_err();
        assert!(matches!(err, Error::Config(_)) && err.to_string().contains("epochz"), "{err}");
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        for p in [Profile::Paper, Profile::Desk] {
            let c = RunConfig::for_profile(p);
            let back: RunConfig = toml::from_str(&c.to_toml()).unwrap();
            assert_eq!(back, c);
        }
    }
}
