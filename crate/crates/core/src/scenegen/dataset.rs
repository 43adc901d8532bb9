//! Scene corpora on disk: `scenes.jsonl`, `manifest.json` and optional
//! raster dumps under `rasters/`.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{generate_scene, rasterize, Scene, SceneConfig};
use crate::error::{Error, Result};
use crate::exec::Exec;

pub const SCENES_FILE: &str = "scenes.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Hash buckets `[0, 64)` train, `[64, 74)` validation, `[74, 100)` test.
const TRAIN_BUCKETS: u64 = 64;
const TRAINVAL_BUCKETS: u64 = 74;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

pub fn split_of(seed: u64, scene_id: u64) -> Split {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(scene_id.to_le_bytes());
    let digest = h.finalize();
    let bucket = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes")) % 100;
    if bucket < TRAIN_BUCKETS {
        Split::Train
    } else if bucket < TRAINVAL_BUCKETS {
        Split::Val
    } else {
        Split::Test
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub scenes: usize,
    pub annotated_scenes: usize,
    pub users: usize,
    pub important: usize,
    pub positive_rate: f64,
    /// Fraction of test-split users whose two annotator labels differ.
    pub test_disagreement_rate: f64,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub n_scenes: usize,
    pub config: SceneConfig,
    /// Annotated scenes only.
    pub train: Vec<u64>,
    /// Annotated scenes only.
    pub val: Vec<u64>,
    /// Every test scene.
    pub test: Vec<u64>,
    pub stats: DatasetStats,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    /// Indexed by scene id.
    pub scenes: Vec<Scene>,
}

impl Dataset {
    pub fn from_scenes(seed: u64, config: SceneConfig, scenes: Vec<Scene>) -> Self {
        let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
        let mut stats = DatasetStats {
            scenes: scenes.len(),
            ..DatasetStats::default()
        };
        let (mut test_users, mut disagree) = (0usize, 0usize);
        for s in &scenes {
            stats.users += s.users.len();
            stats.important += s.important_count();
            stats.annotated_scenes += usize::from(s.is_annotated());
            match split_of(seed, s.id) {
                Split::Train if s.is_annotated() => train.push(s.id),
                Split::Val if s.is_annotated() => val.push(s.id),
                Split::Test => {
                    test.push(s.id);
                    test_users += s.users.len();
                    disagree += s
                        .users
                        .iter()
                        .filter(|u| u.important != u.important_alt)
                        .count();
                }
                _ => {}
            }
        }
        stats.positive_rate = ratio(stats.important, stats.users);
        stats.test_disagreement_rate = ratio(disagree, test_users);
        stats.train = train.len();
        stats.val = val.len();
        stats.test = test.len();
        Self {
            manifest: Manifest {
                seed,
                n_scenes: scenes.len(),
                config,
                train,
                val,
                test,
                stats,
            },
            scenes,
        }
    }

    pub fn generate(n_scenes: usize, seed: u64, cfg: &SceneConfig, exec: Exec) -> Self {
        Self::from_scenes(
            seed,
            cfg.clone(),
            generate_scenes(n_scenes, seed, cfg, exec),
        )
    }

    pub fn scene(&self, id: u64) -> &Scene {
        &self.scenes[id as usize]
    }

    pub fn split(&self, split: Split) -> Vec<&Scene> {
        let ids = match split {
            Split::Train => &self.manifest.train,
            Split::Val => &self.manifest.val,
            Split::Test => &self.manifest.test,
        };
        ids.iter().map(|&id| self.scene(id)).collect()
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

pub fn generate_scenes(n_scenes: usize, seed: u64, cfg: &SceneConfig, exec: Exec) -> Vec<Scene> {
    exec.map_range(n_scenes, |id| generate_scene(seed, id as u64, cfg))
}

/// Generates and writes a corpus. Rasters are recomputed from scenes on
/// load; `write_rasters` additionally dumps them for external tools.
pub fn generate_dataset(
    n_scenes: usize,
    seed: u64,
    cfg: &SceneConfig,
    out_dir: &Path,
    write_rasters: bool,
    exec: Exec,
) -> Result<Dataset> {
    let ds = Dataset::generate(n_scenes, seed, cfg, exec);
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let scenes_path = out_dir.join(SCENES_FILE);
    let file = fs::File::create(&scenes_path).map_err(|e| Error::io(&scenes_path, e))?;
    let mut w = BufWriter::new(file);
    for s in &ds.scenes {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n").map_err(|e| Error::io(&scenes_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&scenes_path, e))?;

    let manifest_path = out_dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&ds.manifest)?;
    fs::write(&manifest_path, text + "\n").map_err(|e| Error::io(&manifest_path, e))?;

    if write_rasters {
        let dir = out_dir.join("rasters");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for s in &ds.scenes {
            rasterize(s).save(&dir.join(format!("{:06}.icrt", s.id)))?;
        }
    }
    Ok(ds)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;

    let scenes_path = dir.join(SCENES_FILE);
    let file = fs::File::open(&scenes_path).map_err(|e| Error::io(&scenes_path, e))?;
    let mut scenes = Vec::with_capacity(manifest.n_scenes);
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(&scenes_path, e))?;
        if !line.trim().is_empty() {
            scenes.push(serde_json::from_str::<Scene>(&line)?);
        }
    }
    if scenes.len() != manifest.n_scenes || scenes.iter().enumerate().any(|(i, s)| s.id != i as u64)
    {
        return Err(Error::Format {
            kind: "dataset",
            reason: format!(
                "{} lists {} scenes, {} has {}",
                MANIFEST_FILE,
                manifest.n_scenes,
                SCENES_FILE,
                scenes.len()
            ),
        });
    }
    Ok(Dataset { manifest, scenes })
}
