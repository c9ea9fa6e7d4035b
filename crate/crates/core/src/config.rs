//! Run configuration: hierarchical TOML with `dataset`, `model`, `unet`,
//! `schedule`, `training`, and `ablation` sections. Unknown keys are
//! rejected; flags override file values; the resolved config is echoed into
//! a content-addressed run directory.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::{DenoiserConfig, ScheduleSpec};
use crate::error::{Error, Result};
use crate::hae::HAEConfig;
use crate::synth::dataset::InteriorMode;
use crate::synth::{SceneConfig, ShapeKind, ShapeSpec};
use crate::train::TrainConfig;
use crate::TrainRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    #[default]
    Vfi,
    Deblur,
}

impl TaskKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TaskKind::Vfi => "vfi",
            TaskKind::Deblur => "deblur",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub out_dir: String,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub n_scenes: usize,
    pub shapes_per_scene: usize,
    pub duration: f64,
    pub frame_rate: f64,
    pub skips: usize,
    pub interior: InteriorMode,
    pub contrast_threshold: f64,
    pub highrate_factor: usize,
    pub val_fraction: f64,
    pub seed: u64,
    pub task: TaskKind,
    /// High-rate frames averaged into one blurry frame (deblur task).
    pub blur_frames: usize,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            out_dir: "data/toy".to_string(),
            height: 64,
            width: 64,
            channels: 1,
            n_scenes: 4,
            shapes_per_scene: 3,
            duration: 1.0,
            frame_rate: 8.0,
            skips: 1,
            interior: InteriorMode::Random,
            contrast_threshold: 0.2,
            highrate_factor: 8,
            val_fraction: 0.2,
            seed: 7,
            task: TaskKind::Vfi,
            blur_frames: 8,
        }
    }
}

impl DatasetSection {
    /// Procedural scene list: deterministic in the section seed.
    pub fn build_scenes(&self) -> Vec<SceneConfig> {
        let mut rng = TrainRng::seed_from_u64(self.seed);
        let kinds = [ShapeKind::Square, ShapeKind::Disk, ShapeKind::Bar];
        (0..self.n_scenes)
            .map(|i| {
                let shapes = (0..self.shapes_per_scene)
                    .map(|j| ShapeSpec {
                        kind: kinds[(i + j) % kinds.len()],
                        size: rng.random_range(8.0..0.35 * self.width as f64),
                        velocity: (
                            rng.random_range(-24.0..24.0),
                            rng.random_range(-24.0..24.0),
                        ),
                        intensity: rng.random_range(0.35..0.95),
                    })
                    .collect();
                SceneConfig {
                    height: self.height,
                    width: self.width,
                    channels: self.channels,
                    shapes,
                    background: rng.random_range(0.05..0.3),
                    duration: self.duration,
                    frame_rate: self.frame_rate,
                    seed: self.seed.wrapping_add(1000 + i as u64),
                }
            })
            .collect()
    }

    pub fn dataset_options(&self) -> crate::synth::dataset::DatasetOptions {
        crate::synth::dataset::DatasetOptions {
            skips: self.skips,
            interior: self.interior,
            contrast_threshold: self.contrast_threshold,
            highrate_factor: self.highrate_factor,
            val_fraction: self.val_fraction,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    pub suite: String,
    pub steps_sweep: Vec<usize>,
    /// When false, runtime columns are zeroed for byte-stable reports.
    pub timing: bool,
}

impl Default for AblationSection {
    fn default() -> Self {
        AblationSection {
            suite: "scheme".to_string(),
            steps_sweep: vec![1, 2, 3, 4, 5, 10, 25, 100],
            timing: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSection,
    pub model: HAEConfig,
    pub unet: DenoiserConfig,
    pub schedule: ScheduleSpec,
    pub training: TrainConfig,
    pub ablation: AblationSection,
}

/// Hyperparameter profile: desk-scale defaults, or the paper-scale settings
/// behind a flag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Profile {
    #[default]
    Desk,
    Paper,
}

impl RunConfig {
    pub fn desk() -> Self {
        RunConfig::default()
    }

    /// Paper-scale hyperparameters: 256px crops, wide channels, the 1e-5
    /// learning rate with the 90-epoch-style decay.
    pub fn paper() -> Self {
        let mut cfg = RunConfig::default();
        cfg.dataset.height = 256;
        cfg.dataset.width = 256;
        cfg.dataset.channels = 3;
        cfg.model = HAEConfig::paper(3);
        cfg.unet = DenoiserConfig::paper();
        cfg.training.crop = 256;
        cfg.training.steps = 100_000;
        cfg.training.lr_main = 1e-5;
        cfg.training.lr_finetune = 1e-6;
        cfg.training.lr_decay_step = 90_000;
        cfg.training.v2_steps = 1000;
        cfg
    }

    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::Desk => RunConfig::desk(),
            Profile::Paper => RunConfig::paper(),
        }
    }

    /// Parse a config file on top of profile defaults. Each present key
    /// overrides the default; unknown keys are rejected.
    pub fn load(path: &Path, profile: Profile) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        Self::parse(&text, profile)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str, profile: Profile) -> Result<Self> {
        let defaults = toml::to_string(&Self::for_profile(profile))
            .map_err(|e| Error::config(format!("profile serialization: {e}")))?;
        let mut base: toml::Value = toml::from_str(&defaults)
            .map_err(|e| Error::config(format!("profile parse: {e}")))?;
        let overlay: toml::Value =
            toml::from_str(text).map_err(|e| Error::config(format!("config parse: {e}")))?;
        merge_toml(&mut base, &overlay);
        let merged =
            toml::to_string(&base).map_err(|e| Error::config(format!("config merge: {e}")))?;
        let cfg: RunConfig =
            toml::from_str(&merged).map_err(|e| Error::config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.unet.validate()?;
        if self.training.stage != 1 && self.training.stage != 2 {
            return Err(Error::config(format!(
                "training.stage must be 1 or 2, got {}",
                self.training.stage
            )));
        }
        let f = self.model.downsample_factor();
        if self.training.crop % f != 0 {
            return Err(Error::config(format!(
                "training.crop {} must be divisible by 2^n_down = {f}",
                self.training.crop
            )));
        }
        if self.dataset.task == TaskKind::Deblur && self.model.bins % 2 == 0 {
            return Err(Error::config(
                "deblurring uses SCER voxels: model.bins must be odd".to_string(),
            ));
        }
        Ok(())
    }

    /// Canonical text form used for the config echo and the run-dir address.
    pub fn resolved_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn config_hash(&self) -> String {
        let digest = Sha256::digest(self.resolved_toml().as_bytes());
        digest[..6].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// `$EVENTDIFF_RUN_DIR` (or `./runs`) / config hash.
    pub fn run_dir(&self) -> PathBuf {
        let root = std::env::var("EVENTDIFF_RUN_DIR").unwrap_or_else(|_| "runs".to_string());
        PathBuf::from(root).join(self.config_hash())
    }

    /// Create the run directory and echo the resolved config into it.
    pub fn prepare_run_dir(&self) -> Result<PathBuf> {
        let dir = self.run_dir();
        std::fs::create_dir_all(&dir)?;
        std::fs::write(dir.join("config.toml"), self.resolved_toml())?;
        Ok(dir)
    }
}

fn merge_toml(base: &mut toml::Value, overlay: &toml::Value) {
    match (base, overlay) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) if slot.is_table() && v.is_table() => merge_toml(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, o) => *b = o.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_and_hash_is_stable() {
        let cfg = RunConfig::desk();
        let a = cfg.config_hash();
        let b = RunConfig::parse("", Profile::Desk).unwrap().config_hash();
        assert_eq!(a, b);
    }

    #[test]
    fn partial_overlay_overrides_only_named_keys() {
        let cfg = RunConfig::parse(
            "[training]\nsteps = 7\n\n[model]\nn_down = 4\nchannel_mult = [1, 2, 2, 4]\n",
            Profile::Desk,
        )
        .unwrap();
        assert_eq!(cfg.training.steps, 7);
        assert_eq!(cfg.model.n_down, 4);
        // untouched defaults stay
        assert_eq!(cfg.training.batch_size, RunConfig::desk().training.batch_size);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("[training]\nstepz = 7\n", Profile::Desk).is_err());
        assert!(RunConfig::parse("[trainign]\nsteps = 7\n", Profile::Desk).is_err());
    }

    #[test]
    fn invalid_crop_is_config_error() {
        let e = RunConfig::parse("[training]\ncrop = 60\n", Profile::Desk);
        assert!(e.is_err());
    }

    #[test]
    fn paper_profile_is_selectable() {
        let cfg = RunConfig::parse("", Profile::Paper).unwrap();
        assert_eq!(cfg.training.lr_main, 1e-5);
        assert_eq!(cfg.dataset.height, 256);
    }

    #[test]
    fn scenes_are_deterministic() {
        let d = DatasetSection::default();
        let a = d.build_scenes();
        let b = d.build_scenes();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.seed, y.seed);
            assert_eq!(x.shapes.len(), y.shapes.len());
            assert_eq!(x.background, y.background);
        }
    }
}
