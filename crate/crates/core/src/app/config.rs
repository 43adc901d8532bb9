//! Plain `key = value` run configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::AblationConfig;
use crate::fusion::{AblationMode, FusionTrainConfig};
use crate::numcore::AdamConfig;
use crate::pathnet::PathTrainConfig;
use crate::proposer::{ProposalSource, ProposeConfig, ProposerTrainConfig};
use crate::scenegen::SceneConfig;

/// Everything that influences a run's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub scenes: usize,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub scene: SceneConfig,
    pub path: PathTrainConfig,
    pub path_seed: u64,
    pub proposer: ProposerTrainConfig,
    pub proposer_seed: u64,
    pub propose: ProposeConfig,
    pub recall_top_k: usize,
    pub fusion: FusionTrainConfig,
    pub modes: Vec<AblationMode>,
    pub ablation_seeds: Vec<u64>,
    pub proposals: ProposalSource,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            scenes: 4000,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("run"),
            scene: SceneConfig::default(),
            path: PathTrainConfig::default(),
            path_seed: 1,
            proposer: ProposerTrainConfig::default(),
            proposer_seed: 2,
            propose: ProposeConfig::default(),
            recall_top_k: 20,
            fusion: FusionTrainConfig::default(),
            modes: AblationMode::ALL.to_vec(),
            ablation_seeds: vec![0, 1, 2],
            proposals: ProposalSource::Oracle,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("{key}: cannot parse {value:?}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

fn set_adam(adam: &mut AdamConfig, field: &str, key: &str, value: &str) -> Result<bool> {
    match field {
        "lr" => adam.lr = parse(key, value)?,
        "beta1" => adam.beta1 = parse(key, value)?,
        "beta2" => adam.beta2 = parse(key, value)?,
        "epsilon" => adam.epsilon = parse(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn adam_entries(prefix: &str, adam: &AdamConfig, out: &mut Vec<(String, String)>) {
    out.push((format!("{prefix}.lr"), adam.lr.to_string()));
    out.push((format!("{prefix}.beta1"), adam.beta1.to_string()));
    out.push((format!("{prefix}.beta2"), adam.beta2.to_string()));
    out.push((format!("{prefix}.epsilon"), adam.epsilon.to_string()));
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (section, field) = key.split_once('.').unwrap_or(("", key));
        let handled = match (section, field) {
            ("", "seed") => {
                self.seed = parse(key, value)?;
                true
            }
            ("", "scenes") => {
                self.scenes = parse(key, value)?;
                true
            }
            ("", "data_dir") => {
                self.data_dir = PathBuf::from(value);
                true
            }
            ("", "out_dir") => {
                self.out_dir = PathBuf::from(value);
                true
            }
            ("scene", "min_users") => {
                self.scene.min_users = parse(key, value)?;
                true
            }
            ("scene", "max_users") => {
                self.scene.max_users = parse(key, value)?;
                true
            }
            ("scene", "miss_sd") => {
                self.scene.miss_sd = parse(key, value)?;
                true
            }
            ("scene", "decoy_prob") => {
                self.scene.decoy_prob = parse(key, value)?;
                true
            }
            ("scene", "template_weights") => {
                let w: Vec<f64> = parse_list(key, value)?;
                self.scene.template_weights = w
                    .try_into()
                    .map_err(|_| Error::config(format!("{key}: expected 7 weights")))?;
                true
            }
            ("oracle", f) => {
                let o = &mut self.scene.oracle;
                match f {
                    "r_safe" => o.r_safe = parse(key, value)?,
                    "corridor_halfwidth" => o.corridor_halfwidth = parse(key, value)?,
                    "horizon_steps" => o.horizon_steps = parse(key, value)?,
                    "boundary_band" => o.boundary_band = parse(key, value)?,
                    "flip_prob" => o.flip_prob = parse(key, value)?,
                    "alt_r_safe" => o.alt_r_safe = parse(key, value)?,
                    "alt_corridor_halfwidth" => o.alt_corridor_halfwidth = parse(key, value)?,
                    _ => return Err(Error::config(format!("unknown key {key:?}"))),
                }
                true
            }
            ("path", "epochs") => {
                self.path.epochs = parse(key, value)?;
                true
            }
            ("path", "batch_size") => {
                self.path.batch_size = parse(key, value)?;
                true
            }
            ("path", "seed") => {
                self.path_seed = parse(key, value)?;
                true
            }
            ("path", f) => set_adam(&mut self.path.adam, f, key, value)?,
            ("proposer", "epochs") => {
                self.proposer.epochs = parse(key, value)?;
                true
            }
            ("proposer", "batch_size") => {
                self.proposer.batch_size = parse(key, value)?;
                true
            }
            ("proposer", "anchors_per_image") => {
                self.proposer.anchors_per_image = parse(key, value)?;
                true
            }
            ("proposer", "val_scenes") => {
                self.proposer.val_scenes = parse(key, value)?;
                true
            }
            ("proposer", "seed") => {
                self.proposer_seed = parse(key, value)?;
                true
            }
            ("proposer", "nms_iou") => {
                self.propose.nms_iou = parse(key, value)?;
                true
            }
            ("proposer", "conf_threshold") => {
                self.propose.conf_threshold = parse(key, value)?;
                true
            }
            ("proposer", "max_out") => {
                self.propose.max_out = parse(key, value)?;
                true
            }
            ("proposer", "recall_top_k") => {
                self.recall_top_k = parse(key, value)?;
                true
            }
            ("proposer", f) => set_adam(&mut self.proposer.adam, f, key, value)?,
            ("fusion", "epochs") => {
                self.fusion.epochs = parse(key, value)?;
                true
            }
            ("fusion", "batch_size") => {
                self.fusion.batch_size = parse(key, value)?;
                true
            }
            ("fusion", "weight_important") => {
                self.fusion.loss.weight_important = parse(key, value)?;
                true
            }
            ("fusion", "weight_not_important") => {
                self.fusion.loss.weight_not_important = parse(key, value)?;
                true
            }
            ("fusion", f) => set_adam(&mut self.fusion.adam, f, key, value)?,
            ("ablation", "modes") => {
                self.modes = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(AblationMode::parse)
                    .collect::<Result<_>>()
                    .map_err(|e| Error::config(format!("{key}: {e}")))?;
                true
            }
            ("ablation", "seeds") => {
                self.ablation_seeds = parse_list(key, value)?;
                true
            }
            ("ablation", "proposals") => {
                self.proposals = match value {
                    "oracle" => ProposalSource::Oracle,
                    "proposer" => ProposalSource::Proposer,
                    _ => {
                        return Err(Error::config(format!(
                            "{key}: expected oracle or proposer, got {value:?}"
                        )))
                    }
                };
                true
            }
            _ => false,
        };
        if handled {
            Ok(())
        } else {
            Err(Error::config(format!("unknown key {key:?}")))
        }
    }

    /// Every key with its resolved value, in file order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let mut e: Vec<(String, String)> = Vec::new();
        let mut put = |k: &str, v: String| e.push((k.to_string(), v));
        put("seed", self.seed.to_string());
        put("scenes", self.scenes.to_string());
        put("data_dir", self.data_dir.display().to_string());
        put("out_dir", self.out_dir.display().to_string());
        let s = &self.scene;
        put("scene.min_users", s.min_users.to_string());
        put("scene.max_users", s.max_users.to_string());
        put("scene.miss_sd", s.miss_sd.to_string());
        put("scene.decoy_prob", s.decoy_prob.to_string());
        put("scene.template_weights", join(&s.template_weights));
        let o = &s.oracle;
        put("oracle.r_safe", o.r_safe.to_string());
        put(
            "oracle.corridor_halfwidth",
            o.corridor_halfwidth.to_string(),
        );
        put("oracle.horizon_steps", o.horizon_steps.to_string());
        put("oracle.boundary_band", o.boundary_band.to_string());
        put("oracle.flip_prob", o.flip_prob.to_string());
        put("oracle.alt_r_safe", o.alt_r_safe.to_string());
        put(
            "oracle.alt_corridor_halfwidth",
            o.alt_corridor_halfwidth.to_string(),
        );
        put("path.seed", self.path_seed.to_string());
        put("path.epochs", self.path.epochs.to_string());
        put("path.batch_size", self.path.batch_size.to_string());
        adam_entries("path", &self.path.adam, &mut e);
        let mut put = |k: &str, v: String| e.push((k.to_string(), v));
        put("proposer.seed", self.proposer_seed.to_string());
        put("proposer.epochs", self.proposer.epochs.to_string());
        put("proposer.batch_size", self.proposer.batch_size.to_string());
        put(
            "proposer.anchors_per_image",
            self.proposer.anchors_per_image.to_string(),
        );
        put("proposer.val_scenes", self.proposer.val_scenes.to_string());
        put("proposer.nms_iou", self.propose.nms_iou.to_string());
        put(
            "proposer.conf_threshold",
            self.propose.conf_threshold.to_string(),
        );
        put("proposer.max_out", self.propose.max_out.to_string());
        put("proposer.recall_top_k", self.recall_top_k.to_string());
        adam_entries("proposer", &self.proposer.adam, &mut e);
        let mut put = |k: &str, v: String| e.push((k.to_string(), v));
        put("fusion.epochs", self.fusion.epochs.to_string());
        put("fusion.batch_size", self.fusion.batch_size.to_string());
        put(
            "fusion.weight_not_important",
            self.fusion.loss.weight_not_important.to_string(),
        );
        put(
            "fusion.weight_important",
            self.fusion.loss.weight_important.to_string(),
        );
        adam_entries("fusion", &self.fusion.adam, &mut e);
        let mut put = |k: &str, v: String| e.push((k.to_string(), v));
        put(
            "ablation.modes",
            self.modes
                .iter()
                .map(|m| m.tag())
                .collect::<Vec<_>>()
                .join(","),
        );
        put("ablation.seeds", join(&self.ablation_seeds));
        put(
            "ablation.proposals",
            match self.proposals {
                ProposalSource::Oracle => "oracle",
                ProposalSource::Proposer => "proposer",
            }
            .to_string(),
        );
        e
    }

    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// The fully resolved configuration; parsing it gives back `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.scenes == 0 {
            return Err(Error::usage("scenes must be positive"));
        }
        if !(0.0..=1.0).contains(&self.scene.decoy_prob) || !(self.scene.miss_sd >= 0.0) {
            return Err(Error::config(
                "scene.decoy_prob must lie in [0, 1] and scene.miss_sd be non-negative",
            ));
        }
        if self.scene.min_users > self.scene.max_users {
            return Err(Error::config("scene.min_users exceeds scene.max_users"));
        }
        if self
            .scene
            .template_weights
            .iter()
            .any(|w| !w.is_finite() || *w < 0.0)
            || self.scene.template_weights.iter().sum::<f64>() <= 0.0
        {
            return Err(Error::config(
                "scene.template_weights must be non-negative with a positive sum",
            ));
        }
        for adam in [&self.path.adam, &self.proposer.adam, &self.fusion.adam] {
            adam.validate()?;
        }
        if self.path.batch_size < 2 || self.fusion.batch_size < 2 || self.proposer.batch_size == 0 {
            return Err(Error::config(
                "batch sizes must be at least 2 (1 for the proposer)",
            ));
        }
        if self.modes.is_empty() || self.ablation_seeds.is_empty() {
            return Err(Error::config(
                "ablation needs at least one mode and one seed",
            ));
        }
        Ok(())
    }

    pub fn ablation(&self) -> AblationConfig {
        AblationConfig {
            modes: self.modes.clone(),
            seeds: self.ablation_seeds.clone(),
            fusion: self.fusion.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.fusion.adam.lr = 0.005;
        cfg.modes = vec![AblationMode::C, AblationMode::A];
        cfg.scene.oracle.alt_r_safe = 2.75;
        cfg.proposals = ProposalSource::Proposer;
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn comments_and_overrides() {
        let cfg = RunConfig::parse(
            "# reference\nscenes = 12 # small\nfusion.lr=0.001\nablation.seeds = 3, 4\n",
        )
        .unwrap();
        assert_eq!(cfg.scenes, 12);
        assert_eq!(cfg.fusion.adam.lr, 0.001);
        assert_eq!(cfg.ablation_seeds, vec![3, 4]);
        assert_eq!(cfg.path, PathTrainConfig::default());
    }

    #[test]
    fn rejects_bad_input() {
        for text in [
            "bogus = 1",
            "seed = x",
            "scenes = 0",
            "just words",
            "fusion.lr = -1",
            "ablation.modes = E",
            "oracle.nope = 1",
        ] {
            assert!(
                matches!(
                    RunConfig::parse(text),
                    Err(Error::Config(_) | Error::Usage(_))
                ),
                "{text}"
            );
        }
    }
}
