//! On-disk dataset layout:
//!
//! ```text
//! DIR/manifest.json                config, seed, palette, split lists
//! DIR/episodes/<id>/meta.json      instructions + symbolic scenes
//! DIR/episodes/<id>/step<t>.png    render after instruction t (0-based)
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::catalog::{Color, BACKGROUND_RGB};
use super::render::render_scene;
use super::scene::{sample_episode, Episode, GenConfig};
use crate::error::{Error, Result};

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Palette {
    pub background: [u8; 3],
    pub colors: BTreeMap<String, [u8; 3]>,
}

impl Palette {
    pub fn current() -> Self {
        Self {
            background: BACKGROUND_RGB,
            colors: Color::ALL
                .iter()
                .map(|c| (c.name().to_string(), c.rgb()))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl Splits {
    /// Contiguous 80/10/10 split by episode order.
    pub fn by_fraction(ids: &[String]) -> Self {
        let n = ids.len();
        let n_train = (n * 8) / 10;
        let n_val = (n - n_train) / 2;
        Self {
            train: ids[..n_train].to_vec(),
            val: ids[n_train..n_train + n_val].to_vec(),
            test: ids[n_train + n_val..].to_vec(),
        }
    }

    pub fn get(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub image_size: u32,
    pub config: GenConfig,
    pub palette: Palette,
    pub splits: Splits,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub id: String,
    pub episode: Episode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub episodes: Vec<EpisodeRecord>,
}

/// Per-episode seed derived from the dataset seed (splitmix64 finalizer).
pub fn episode_seed(dataset_seed: u64, index: u64) -> u64 {
    let mut z =
        dataset_seed.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn episode_id(index: usize) -> String {
    format!("ep{index:05}")
}

impl Dataset {
    pub fn generate(seed: u64, count: usize, config: &GenConfig, image_size: u32) -> Result<Self> {
        config.validate()?;
        let episodes = (0..count)
            .map(|i| {
                Ok(EpisodeRecord {
                    id: episode_id(i),
                    episode: sample_episode(episode_seed(seed, i as u64), config)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let ids: Vec<String> = episodes.iter().map(|e| e.id.clone()).collect();
        Ok(Self {
            manifest: Manifest {
                version: DATASET_FORMAT_VERSION,
                seed,
                image_size,
                config: config.clone(),
                palette: Palette::current(),
                splits: Splits::by_fraction(&ids),
            },
            episodes,
        })
    }

    pub fn split(&self, split: Split) -> Vec<&EpisodeRecord> {
        let ids = self.manifest.splits.get(split);
        let by_id: BTreeMap<&str, &EpisodeRecord> =
            self.episodes.iter().map(|e| (e.id.as_str(), e)).collect();
        ids.iter()
            .filter_map(|id| by_id.get(id.as_str()).copied())
            .collect()
    }

    pub fn image_size(&self) -> u32 {
        self.manifest.image_size
    }

    pub fn export(&self, dir: &Path) -> Result<()> {
        let ep_root = dir.join("episodes");
        fs::create_dir_all(&ep_root).map_err(|e| Error::io(&ep_root, e))?;
        for rec in &self.episodes {
            let ep_dir = ep_root.join(&rec.id);
            fs::create_dir_all(&ep_dir).map_err(|e| Error::io(&ep_dir, e))?;
            for (t, step) in rec.episode.steps.iter().enumerate() {
                let img = render_scene(&step.scene, self.manifest.image_size);
                let path = ep_dir.join(format!("step{t}.png"));
                img.save(&path).map_err(|e| Error::Format {
                    path: path.clone(),
                    reason: e.to_string(),
                })?;
            }
            write_json(&ep_dir.join("meta.json"), rec)?;
        }
        // Manifest last: its presence marks a complete export.
        write_json(&dir.join("manifest.json"), &self.manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = read_json(&dir.join("manifest.json"))?;
        if manifest.version != DATASET_FORMAT_VERSION {
            return Err(Error::Format {
                path: dir.join("manifest.json"),
                reason: format!(
                    "dataset format version {} is not supported (expected {})",
                    manifest.version, DATASET_FORMAT_VERSION
                ),
            });
        }
        let mut ids: Vec<&String> = manifest
            .splits
            .train
            .iter()
            .chain(&manifest.splits.val)
            .chain(&manifest.splits.test)
            .collect();
        ids.sort();
        let episodes = ids
            .into_iter()
            .map(|id| read_json::<EpisodeRecord>(&dir.join("episodes").join(id).join("meta.json")))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { manifest, episodes })
    }

    /// Step images of one episode as stored on disk.
    pub fn load_step_images(dir: &Path, id: &str, steps: usize) -> Result<Vec<RgbImage>> {
        (0..steps)
            .map(|t| {
                let path = dir.join("episodes").join(id).join(format!("step{t}.png"));
                let img = image::open(&path).map_err(|e| Error::Format {
                    path: path.clone(),
                    reason: e.to_string(),
                })?;
                Ok(img.to_rgb8())
            })
            .collect()
    }
}

/// SHA-256 of a dataset's manifest file, recorded in checkpoints.
pub fn manifest_hash(dir: &Path) -> Result<String> {
    let path = dir.join("manifest.json");
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(PathBuf::from(path), e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}
