//! On-disk dataset: `manifest.json`, one PNG per example under
//! `images/<split>/`, and `<split>.jsonl` scene/query records.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{generate_scene, render, scene_to_query, AreaTerciles, PositionWordRules, QueryMode};
use super::{RasterImage, SceneConfig, SceneError, SceneSpec};
use crate::coords::QuantizerConfig;
use crate::query::Query;

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSizes {
    pub train: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self { train: 16_000, test: 1_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub seed: u64,
    pub scene: SceneConfig,
    pub splits: SplitSizes,
    pub quantizer: QuantizerConfig,
    /// Frozen thresholds for the positional-word queries.
    pub position_words: PositionWordRules,
}

fn split_tag(split: &str) -> u64 {
    match split {
        "train" => 1,
        "test" => 2,
        _ => 3,
    }
}

/// splitmix64 finalizer
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl DatasetManifest {
    /// Builds a manifest, fitting the size terciles on the training split.
    pub fn new(
        seed: u64,
        scene: SceneConfig,
        splits: SplitSizes,
        quantizer: QuantizerConfig,
    ) -> Result<Self, SceneError> {
        scene.validate()?;
        let mut areas = Vec::new();
        for i in 0..splits.train {
            let s = generate_scene(Self::example_seed_for(seed, "train", i), &scene)?;
            areas.extend(s.shapes.iter().map(|sh| sh.bbox.area()));
        }
        let area = AreaTerciles::fit(&areas)
            .ok_or_else(|| SceneError::Config("need at least 3 training shapes to fit size terciles".into()))?;
        Ok(Self {
            format_version: DATASET_FORMAT_VERSION,
            seed,
            scene,
            splits,
            quantizer,
            position_words: PositionWordRules::new(area),
        })
    }

    fn example_seed_for(seed: u64, split: &str, index: usize) -> u64 {
        mix(mix(seed ^ split_tag(split).rotate_left(56)) ^ index as u64)
    }

    pub fn example_seed(&self, split: &str, index: usize) -> u64 {
        Self::example_seed_for(self.seed, split, index)
    }

    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("manifest serializes");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn split_len(&self, split: &str) -> usize {
        match split {
            "train" => self.splits.train,
            "test" => self.splits.test,
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub split: String,
    pub index: usize,
    /// Image path relative to the dataset root.
    pub image: String,
    pub scene: SceneSpec,
    pub queries: BTreeMap<String, Query>,
}

impl DatasetRecord {
    pub fn query(&self, mode: QueryMode) -> &Query {
        &self.queries[mode.name()]
    }

    pub fn render(&self) -> RasterImage {
        render(&self.scene)
    }
}

/// Records for every split, regenerated deterministically from the manifest.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub train: Vec<DatasetRecord>,
    pub test: Vec<DatasetRecord>,
}

impl Dataset {
    pub fn generate(manifest: DatasetManifest) -> Result<Self, SceneError> {
        let build = |split: &str| -> Result<Vec<DatasetRecord>, SceneError> {
            (0..manifest.split_len(split))
                .map(|i| {
                    let scene = generate_scene(manifest.example_seed(split, i), &manifest.scene)?;
                    let queries = QueryMode::ALL
                        .iter()
                        .map(|&m| (m.name().to_string(), scene_to_query(&scene, m, &manifest.position_words)))
                        .collect();
                    Ok(DatasetRecord {
                        split: split.to_string(),
                        index: i,
                        image: format!("images/{split}/{i:06}.png"),
                        scene,
                        queries,
                    })
                })
                .collect()
        };
        let train = build("train")?;
        let test = build("test")?;
        Ok(Self { manifest, train, test })
    }

    pub fn split(&self, name: &str) -> &[DatasetRecord] {
        match name {
            "train" => &self.train,
            "test" => &self.test,
            _ => &[],
        }
    }

    pub fn write(&self, dir: &Path) -> Result<(), SceneError> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&self.manifest)?)?;
        for (name, records) in [("train", &self.train), ("test", &self.test)] {
            fs::create_dir_all(dir.join("images").join(name))?;
            let mut out = BufWriter::new(fs::File::create(dir.join(format!("{name}.jsonl")))?);
            for r in records {
                r.render().save_png(dir.join(&r.image))?;
                serde_json::to_writer(&mut out, r)?;
                out.write_all(b"\n")?;
            }
            out.flush()?;
        }
        Ok(())
    }

    /// Loads records and checks they agree with a regeneration from the manifest.
    pub fn load(dir: &Path) -> Result<Self, SceneError> {
        let manifest: DatasetManifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
        if manifest.format_version != DATASET_FORMAT_VERSION {
            return Err(SceneError::Mismatch(format!(
                "dataset format version {} (expected {DATASET_FORMAT_VERSION})",
                manifest.format_version
            )));
        }
        let read = |name: &str| -> Result<Vec<DatasetRecord>, SceneError> {
            let f = BufReader::new(fs::File::open(dir.join(format!("{name}.jsonl")))?);
            f.lines().map(|l| Ok(serde_json::from_str(&l?)?)).collect()
        };
        let loaded = Self { train: read("train")?, test: read("test")?, manifest };
        let fresh = Self::generate(loaded.manifest.clone())?;
        if fresh.train != loaded.train || fresh.test != loaded.test {
            return Err(SceneError::Mismatch("records differ from manifest regeneration".into()));
        }
        Ok(loaded)
    }
}
