//! Two-stage training orchestration, end-to-end inference, metrics, and the
//! ablation harness.

pub mod ablate;
pub mod data;
pub mod infer;
pub mod metrics;
pub mod report;
pub mod stage1;
pub mod stage2;

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::{ConditionalUnet, DenoiserConfig, ScheduleSpec};
use crate::error::{Error, Result};
use crate::hae::checkpoint::{dump_params, load_container, restore_params, save_container};
use crate::hae::{Encoder, HAEConfig, HaeModel};
use crate::nn::layers::Params;
use crate::TrainRng;

pub use stage1::{eval_stage1, eval_stage1_deblur, train_stage1, train_stage1_deblur, TrainHistory};
pub use stage2::{
    eval_stage2, eval_stage2_deblur, infer_deblur_batch, infer_vfi_batch, train_stage2,
    train_stage2_deblur, LatentSource, Stage2Model,
};

/// Stage-2 training-scheme variants (V5 is the adopted scheme).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Variant {
    /// Stage-1 model evaluated with the ground-truth embedding.
    V0,
    /// Mean of the condition embeddings, no diffusion, no training.
    V1,
    /// Traditional per-step noise regression (many-step DDPM).
    V2,
    /// Direct denoised-embedding loss, everything but the denoiser frozen.
    V3,
    /// V3 plus a trainable condition encoder.
    V4,
    /// V4 plus a trainable HAE decoder (the adopted scheme).
    #[default]
    V5,
    /// V5 plus a trainable HAE encoder.
    V6,
}

impl Variant {
    pub fn trains_cond_encoder(&self) -> bool {
        matches!(self, Variant::V4 | Variant::V5 | Variant::V6)
    }

    pub fn trains_hae_decoder(&self) -> bool {
        matches!(self, Variant::V5 | Variant::V6)
    }

    pub fn trains_hae_encoder(&self) -> bool {
        matches!(self, Variant::V6)
    }

    pub fn all() -> [Variant; 7] {
        [
            Variant::V0,
            Variant::V1,
            Variant::V2,
            Variant::V3,
            Variant::V4,
            Variant::V5,
            Variant::V6,
        ]
    }

    pub fn parse(s: &str) -> Result<Variant> {
        match s.to_ascii_uppercase().as_str() {
            "V0" => Ok(Variant::V0),
            "V1" => Ok(Variant::V1),
            "V2" => Ok(Variant::V2),
            "V3" => Ok(Variant::V3),
            "V4" => Ok(Variant::V4),
            "V5" => Ok(Variant::V5),
            "V6" => Ok(Variant::V6),
            other => Err(Error::config(format!("unknown variant {other}"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

/// Where the stage-2 training unroll starts from: the noised ground-truth
/// embedding (default) or pure Gaussian noise as at inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Stage2Start {
    #[default]
    NoisedGt,
    PureNoise,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: u8,
    pub batch_size: usize,
    pub crop: usize,
    pub steps: usize,
    pub lr_main: f64,
    pub lr_finetune: f64,
    /// Step after which the learning rates decay by 10x (the desk-scale
    /// analogue of the 90-epoch decay).
    pub lr_decay_step: usize,
    pub seed: u64,
    pub variant: Variant,
    pub stage2_start: Stage2Start,
    /// Reverse-step count of the traditional-DDPM ablation (V2).
    pub v2_steps: usize,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: 1,
            batch_size: 8,
            crop: 64,
            steps: 2000,
            lr_main: 1e-3,
            lr_finetune: 1e-4,
            lr_decay_step: 1500,
            seed: 42,
            variant: Variant::V5,
            stage2_start: Stage2Start::NoisedGt,
            v2_steps: 100,
            log_every: 50,
        }
    }
}

/// Per-sample and aggregate evaluation results.
#[derive(Debug, Clone, Serialize)]
pub struct MetricReport {
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub runtime_per_frame: f64,
    pub steps: usize,
}

impl MetricReport {
    pub fn new(psnr: Vec<f64>, ssim: Vec<f64>, runtime_per_frame: f64, steps: usize) -> Self {
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
        MetricReport {
            mean_psnr: mean(&psnr),
            mean_ssim: mean(&ssim),
            psnr,
            ssim,
            runtime_per_frame,
            steps,
        }
    }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: String, // "stage1" | "stage2"
    pub task: String, // "vfi" | "deblur"
    pub hae: HAEConfig,
    pub denoiser: Option<DenoiserConfig>,
    pub schedule: Option<ScheduleSpec>,
    pub variant: Option<Variant>,
    pub step: u64,
}

pub fn save_stage1_checkpoint(
    path: &Path,
    model: &HaeModel<f32>,
    task: &str,
    step: u64,
) -> Result<()> {
    let meta = CheckpointMeta {
        kind: "stage1".to_string(),
        task: task.to_string(),
        hae: model.cfg.clone(),
        denoiser: None,
        schedule: None,
        variant: None,
        step,
    };
    save_container(path, &meta, &dump_params(model, "hae"))
}

fn tensor_map(tensors: Vec<(String, ndarray::ArrayD<f32>)>) -> HashMap<String, ndarray::ArrayD<f32>> {
    tensors.into_iter().collect()
}

pub fn load_stage1_checkpoint(path: &Path) -> Result<(HaeModel<f32>, CheckpointMeta)> {
    use rand::SeedableRng;
    let (meta, tensors): (CheckpointMeta, _) = load_container(path)?;
    if meta.kind != "stage1" {
        return Err(Error::config(format!(
            "{} is a {} checkpoint, expected stage1",
            path.display(),
            meta.kind
        )));
    }
    let mut rng = TrainRng::seed_from_u64(0);
    let model = HaeModel::new(&meta.hae, &mut rng)?;
    restore_params(&model, "hae", &tensor_map(tensors))?;
    Ok((model, meta))
}

pub fn save_stage2_checkpoint(
    path: &Path,
    model: &Stage2Model,
    task: &str,
    step: u64,
) -> Result<()> {
    let meta = CheckpointMeta {
        kind: "stage2".to_string(),
        task: task.to_string(),
        hae: model.hae.cfg.clone(),
        denoiser: Some(model.unet.config().clone()),
        schedule: Some(model.sched_spec),
        variant: Some(model.variant),
        step,
    };
    let mut tensors = dump_params(&model.hae, "hae");
    tensors.extend(dump_params(&model.gt_encoder, "gt_encoder"));
    tensors.extend(dump_params(&model.cond_encoder, "cond_encoder"));
    tensors.extend(dump_params(&model.unet, "unet"));
    save_container(path, &meta, &tensors)
}

pub fn load_stage2_checkpoint(path: &Path) -> Result<(Stage2Model, CheckpointMeta)> {
    use rand::SeedableRng;
    let (meta, tensors): (CheckpointMeta, _) = load_container(path)?;
    if meta.kind != "stage2" {
        return Err(Error::config(format!(
            "{} is a {} checkpoint, expected stage2",
            path.display(),
            meta.kind
        )));
    }
    let dn = meta
        .denoiser
        .clone()
        .ok_or_else(|| Error::format("stage2 checkpoint lacks denoiser config".to_string()))?;
    let sched = meta
        .schedule
        .ok_or_else(|| Error::format("stage2 checkpoint lacks schedule".to_string()))?;
    let mut rng = TrainRng::seed_from_u64(0);
    let hae = HaeModel::new(&meta.hae, &mut rng)?;
    let gt_encoder = Encoder::new(&meta.hae, &mut rng);
    let cond_encoder = Encoder::new(&meta.hae, &mut rng);
    let unet = ConditionalUnet::new(&dn, &mut rng)?;
    let map = tensor_map(tensors);
    restore_params(&hae, "hae", &map)?;
    restore_params(&gt_encoder, "gt_encoder", &map)?;
    restore_params(&cond_encoder, "cond_encoder", &map)?;
    restore_params(&unet, "unet", &map)?;
    gt_encoder.freeze();
    let model = Stage2Model {
        hae,
        gt_encoder,
        cond_encoder,
        unet,
        sched_spec: sched,
        variant: meta.variant.unwrap_or_default(),
    };
    Ok((model, meta))
}
