//! Stage 2: reconstruct the ground-truth embedding with the conditional
//! denoiser and jointly finetune the autoencoder, under the training-scheme
//! variants V0..V6.

use rand::{Rng, SeedableRng};

use crate::diffusion::{
    dm_loss, forward_diffuse, sample, sample_noise, stage2_loss, traditional_dm_loss, unroll,
    ConditionalUnet, DenoiserConfig, NoiseSchedule, ScheduleSpec,
};
use crate::error::{Error, Result};
use crate::hae::{Encoder, HaeModel};
use crate::nn::blocks::l1_loss;
use crate::nn::layers::{copy_params, Params};
use crate::nn::{no_grad, Adam, Tensor};
use crate::train::data::{
    sample_batch_indices, stack_images, stack_voxels, unstack_images, zero_voxels, DeblurSet,
    VfiSet,
};
use crate::train::metrics::psnr;
use crate::train::stage1::TrainHistory;
use crate::train::{Stage2Start, TrainConfig, Variant};
use crate::TrainRng;

/// Everything stage 2 trains or snapshots. `hae.encoder` is the pyramid
/// encoder; the ground-truth and condition encoders are separate copies of
/// the pretrained stage-1 encoder.
pub struct Stage2Model {
    pub hae: HaeModel<f32>,
    pub gt_encoder: Encoder<f32>,
    pub cond_encoder: Encoder<f32>,
    pub unet: ConditionalUnet<f32>,
    pub sched_spec: ScheduleSpec,
    pub variant: Variant,
}

fn clone_encoder(src: &Encoder<f32>, rng: &mut TrainRng) -> Encoder<f32> {
    let fresh = Encoder::new(src.config(), rng);
    copy_params(&fresh, src);
    fresh
}

fn clone_hae(src: &HaeModel<f32>, rng: &mut TrainRng) -> Result<HaeModel<f32>> {
    let fresh = HaeModel::new(&src.cfg, rng)?;
    copy_params(&fresh, src);
    Ok(fresh)
}

impl Stage2Model {
    /// Instantiate from a pretrained stage-1 model: the ground-truth and
    /// condition encoders inherit its encoder parameters; the denoiser is
    /// freshly initialized.
    pub fn from_stage1(
        stage1: &HaeModel<f32>,
        dn_cfg: &DenoiserConfig,
        sched_spec: &ScheduleSpec,
        variant: Variant,
        seed: u64,
    ) -> Result<Stage2Model> {
        let mut rng = TrainRng::seed_from_u64(seed);
        let hae = clone_hae(stage1, &mut rng)?;
        let gt_encoder = clone_encoder(&stage1.encoder, &mut rng);
        let cond_encoder = clone_encoder(&stage1.encoder, &mut rng);
        let unet = ConditionalUnet::new(dn_cfg, &mut rng)?;
        gt_encoder.freeze();
        Ok(Stage2Model {
            hae,
            gt_encoder,
            cond_encoder,
            unet,
            sched_spec: *sched_spec,
            variant,
        })
    }

    /// Apply the variant's freeze pattern. The ground-truth encoder is
    /// always frozen; the codebook stays fixed after stage 1.
    fn apply_freezes(&self, variant: Variant) {
        self.gt_encoder.freeze();
        self.hae.quantizer.freeze();
        if variant.trains_cond_encoder() {
            self.cond_encoder.unfreeze();
        } else {
            self.cond_encoder.freeze();
        }
        if variant.trains_hae_encoder() {
            self.hae.encoder.unfreeze();
        } else {
            self.hae.encoder.freeze();
        }
        let dec_params = {
            let mut v = Vec::new();
            match &self.hae.decoder {
                crate::hae::ModelDecoder::Kernel(d) => d.collect("d", &mut v),
                crate::hae::ModelDecoder::Deblur(d) => d.collect("d", &mut v),
            }
            v
        };
        for (_, p) in dec_params {
            p.set_trainable(variant.trains_hae_decoder());
        }
    }

    fn finetune_params(&self, variant: Variant) -> Vec<Tensor<f32>> {
        let mut out = Vec::new();
        if variant.trains_cond_encoder() {
            out.extend(self.cond_encoder.params());
        }
        if variant.trains_hae_encoder() {
            out.extend(self.hae.encoder.params());
        }
        if variant.trains_hae_decoder() {
            let mut v = Vec::new();
            match &self.hae.decoder {
                crate::hae::ModelDecoder::Kernel(d) => d.collect("d", &mut v),
                crate::hae::ModelDecoder::Deblur(d) => d.collect("d", &mut v),
            }
            out.extend(v.into_iter().map(|(_, p)| p));
        }
        out
    }
}

/// Latent source at inference: the diffusion sampler, or the V1 baseline
/// that averages the two condition embeddings.
pub enum LatentSource<'a> {
    Diffusion(&'a NoiseSchedule),
    MeanConditions,
}

/// The single inference path shared by stage-2 validation, the step sweep,
/// and the CLI: encode conditions and pyramids, produce the latent, quantize,
/// decode. Never touches the ground-truth frame.
pub fn infer_vfi_batch(
    model: &Stage2Model,
    i0: &Tensor<f32>,
    i1: &Tensor<f32>,
    v0: &Tensor<f32>,
    v1: &Tensor<f32>,
    source: LatentSource<'_>,
    rng: &mut TrainRng,
) -> Result<Tensor<f32>> {
    no_grad(|| {
        let p0 = model.hae.encoder.forward(i0, v0)?;
        let p1 = model.hae.encoder.forward(i1, v1)?;
        let c0 = model.cond_encoder.forward(i0, v0)?.embedding;
        let c1 = model.cond_encoder.forward(i1, v1)?.embedding;
        let z = match source {
            LatentSource::Diffusion(sched) => sample(&model.unet, &[c0, c1], sched, rng)?,
            LatentSource::MeanConditions => c0.add(&c1).scale(0.5),
        };
        let q = model.hae.quantizer.quantize(&z)?;
        model
            .hae
            .kernel_decoder()?
            .forward(&q.z_q, &p0.pyramid, &p1.pyramid, i0, i1)
    })
}

pub fn infer_deblur_batch(
    model: &Stage2Model,
    blur: &Tensor<f32>,
    vox: &Tensor<f32>,
    source: LatentSource<'_>,
    rng: &mut TrainRng,
) -> Result<Tensor<f32>> {
    no_grad(|| {
        let pb = model.hae.encoder.forward(blur, vox)?;
        let c = model.cond_encoder.forward(blur, vox)?.embedding;
        let z = match source {
            LatentSource::Diffusion(sched) => sample(&model.unet, &[c], sched, rng)?,
            LatentSource::MeanConditions => c,
        };
        let q = model.hae.quantizer.quantize(&z)?;
        model.hae.deblur_decoder()?.forward(&q.z_q, &pb.pyramid, blur)
    })
}

/// Per-sample end-to-end PSNR of the sampler path against ground truth.
pub fn eval_stage2(
    model: &Stage2Model,
    set: &VfiSet,
    sched: &NoiseSchedule,
    seed: u64,
    mean_conditions: bool,
) -> Result<Vec<f64>> {
    let mut rng = TrainRng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(set.items.len());
    for item in &set.items {
        let i0 = stack_images::<f32>(&[&item.i0]);
        let i1 = stack_images::<f32>(&[&item.i1]);
        let v0 = stack_voxels::<f32>(&[&item.vox0]);
        let v1 = stack_voxels::<f32>(&[&item.vox1]);
        let source = if mean_conditions {
            LatentSource::MeanConditions
        } else {
            LatentSource::Diffusion(sched)
        };
        let rec = infer_vfi_batch(model, &i0, &i1, &v0, &v1, source, &mut rng)?;
        out.push(psnr(&unstack_images(&rec)[0], &item.igt)?);
    }
    Ok(out)
}

pub fn eval_stage2_deblur(
    model: &Stage2Model,
    set: &DeblurSet,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut rng = TrainRng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(set.items.len());
    for item in &set.items {
        let blur = stack_images::<f32>(&[&item.blur]);
        let vox = stack_voxels::<f32>(&[&item.vox]);
        let rec = infer_deblur_batch(model, &blur, &vox, LatentSource::Diffusion(sched), &mut rng)?;
        out.push(psnr(&unstack_images(&rec)[0], &item.sharp)?);
    }
    Ok(out)
}

/// Stage-2 training. `V0`/`V1` perform no optimization (V0 is the stage-1
/// model itself, V1 the mean-of-conditions baseline); `V2` trains the
/// denoiser with the per-step noise loss; `V3`..`V6` train through the full
/// T-step unroll with the direct embedding loss plus the image term.
pub fn train_stage2(
    stage1: &HaeModel<f32>,
    dn_cfg: &DenoiserConfig,
    sched_spec: &ScheduleSpec,
    cfg: &TrainConfig,
    train: &VfiSet,
    val: Option<&VfiSet>,
) -> Result<(Stage2Model, TrainHistory)> {
    if dn_cfg.n_conditions != 2 {
        return Err(Error::config(
            "interpolation stage 2 needs a 2-condition denoiser".to_string(),
        ));
    }
    let variant = cfg.variant;
    let model = Stage2Model::from_stage1(stage1, dn_cfg, sched_spec, variant, cfg.seed)?;
    let mut history = TrainHistory::default();
    if matches!(variant, Variant::V0 | Variant::V1) {
        return Ok((model, history));
    }
    model.apply_freezes(variant);

    // V2 follows the traditional many-step DDPM recipe; its schedule keeps
    // the same beta endpoints over cfg.v2_steps steps.
    let train_spec = if variant == Variant::V2 {
        sched_spec.with_steps(cfg.v2_steps)
    } else {
        *sched_spec
    };
    let sched = train_spec.build()?;

    let mut rng = TrainRng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut opt_unet = Adam::new(model.unet.params(), cfg.lr_main);
    let finetune = model.finetune_params(variant);
    let mut opt_ft = if finetune.is_empty() {
        None
    } else {
        Some(Adam::new(finetune, cfg.lr_finetune))
    };

    let n = train.items.len();
    let (h, w) = (train.height, train.width);
    for step in 1..=cfg.steps {
        if step == cfg.lr_decay_step {
            opt_unet.set_lr(cfg.lr_main / 10.0);
            if let Some(o) = opt_ft.as_mut() {
                o.set_lr(cfg.lr_finetune / 10.0);
            }
        }
        let idx = sample_batch_indices(&mut rng, n, cfg.batch_size.min(n));
        let items: Vec<_> = idx.iter().map(|&i| &train.items[i]).collect();
        let i0 = stack_images::<f32>(&items.iter().map(|s| &s.i0).collect::<Vec<_>>());
        let i1 = stack_images::<f32>(&items.iter().map(|s| &s.i1).collect::<Vec<_>>());
        let igt = stack_images::<f32>(&items.iter().map(|s| &s.igt).collect::<Vec<_>>());
        let v0 = stack_voxels::<f32>(&items.iter().map(|s| &s.vox0).collect::<Vec<_>>());
        let v1 = stack_voxels::<f32>(&items.iter().map(|s| &s.vox1).collect::<Vec<_>>());
        let vz = zero_voxels::<f32>(items.len(), train.bins, h, w);

        let z_gt = no_grad(|| -> Result<_> {
            Ok(model.gt_encoder.forward(&igt, &vz)?.embedding)
        })?;
        let (c0, c1) = if variant.trains_cond_encoder() {
            (
                model.cond_encoder.forward(&i0, &v0)?.embedding,
                model.cond_encoder.forward(&i1, &v1)?.embedding,
            )
        } else {
            no_grad(|| -> Result<_> {
                Ok((
                    model.cond_encoder.forward(&i0, &v0)?.embedding,
                    model.cond_encoder.forward(&i1, &v1)?.embedding,
                ))
            })?
        };

        let loss = if variant == Variant::V2 {
            let t = rng.random_range(1..=sched.t_steps);
            let eps = sample_noise::<f32>(&mut rng, &z_gt.shape());
            let z_t = forward_diffuse(&z_gt, t, &eps, &sched)?;
            let eps_hat = model.unet.forward(&z_t, t, &[c0, c1])?;
            traditional_dm_loss(&eps, &eps_hat)?
        } else {
            let z_init = match cfg.stage2_start {
                Stage2Start::NoisedGt => {
                    let eps = sample_noise::<f32>(&mut rng, &z_gt.shape());
                    forward_diffuse(&z_gt, sched.t_steps, &eps, &sched)?.detach()
                }
                Stage2Start::PureNoise => sample_noise::<f32>(&mut rng, &z_gt.shape()),
            };
            let z_hat = unroll(&model.unet, &z_init, &[c0, c1], &sched)?;
            let (p0, p1) = if variant.trains_hae_encoder() {
                (
                    model.hae.encoder.forward(&i0, &v0)?,
                    model.hae.encoder.forward(&i1, &v1)?,
                )
            } else {
                no_grad(|| -> Result<_> {
                    Ok((
                        model.hae.encoder.forward(&i0, &v0)?,
                        model.hae.encoder.forward(&i1, &v1)?,
                    ))
                })?
            };
            let q = model.hae.quantizer.quantize(&z_hat)?;
            let i_hat = model
                .hae
                .kernel_decoder()?
                .forward(&q.z_q, &p0.pyramid, &p1.pyramid, &i0, &i1)?;
            stage2_loss(&i_hat, &igt, &z_hat, &z_gt)?
        };
        let loss_v = loss.item() as f64;
        loss.backward();
        opt_unet.step();
        if let Some(o) = opt_ft.as_mut() {
            o.step();
        }

        if step % cfg.log_every == 0 || step == cfg.steps {
            history.loss.push((step, loss_v));
            if let Some(vset) = val {
                let eval_sched = sched_spec.build()?;
                let scores = eval_stage2(
                    &model,
                    vset,
                    if variant == Variant::V2 { &sched } else { &eval_sched },
                    cfg.seed.wrapping_add(step as u64),
                    false,
                )?;
                history
                    .val_psnr
                    .push((step, crate::train::stage1::mean(&scores)));
            }
        }
    }
    Ok((model, history))
}

/// Stage-2 training for deblurring (one condition, SCER voxels).
pub fn train_stage2_deblur(
    stage1: &HaeModel<f32>,
    dn_cfg: &DenoiserConfig,
    sched_spec: &ScheduleSpec,
    cfg: &TrainConfig,
    train: &DeblurSet,
    val: Option<&DeblurSet>,
) -> Result<(Stage2Model, TrainHistory)> {
    if dn_cfg.n_conditions != 1 {
        return Err(Error::config(
            "deblur stage 2 needs a 1-condition denoiser".to_string(),
        ));
    }
    let variant = cfg.variant;
    let model = Stage2Model::from_stage1(stage1, dn_cfg, sched_spec, variant, cfg.seed)?;
    let mut history = TrainHistory::default();
    if matches!(variant, Variant::V0 | Variant::V1) {
        return Ok((model, history));
    }
    model.apply_freezes(variant);
    let sched = sched_spec.build()?;

    let mut rng = TrainRng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut opt_unet = Adam::new(model.unet.params(), cfg.lr_main);
    let finetune = model.finetune_params(variant);
    let mut opt_ft = if finetune.is_empty() {
        None
    } else {
        Some(Adam::new(finetune, cfg.lr_finetune))
    };

    let n = train.items.len();
    for step in 1..=cfg.steps {
        if step == cfg.lr_decay_step {
            opt_unet.set_lr(cfg.lr_main / 10.0);
            if let Some(o) = opt_ft.as_mut() {
                o.set_lr(cfg.lr_finetune / 10.0);
            }
        }
        let idx = sample_batch_indices(&mut rng, n, cfg.batch_size.min(n));
        let items: Vec<_> = idx.iter().map(|&i| &train.items[i]).collect();
        let blur = stack_images::<f32>(&items.iter().map(|s| &s.blur).collect::<Vec<_>>());
        let sharp = stack_images::<f32>(&items.iter().map(|s| &s.sharp).collect::<Vec<_>>());
        let vox = stack_voxels::<f32>(&items.iter().map(|s| &s.vox).collect::<Vec<_>>());
        let vz = zero_voxels::<f32>(items.len(), train.bins, train.height, train.width);

        let z_gt = no_grad(|| -> Result<_> {
            Ok(model.gt_encoder.forward(&sharp, &vz)?.embedding)
        })?;
        let c = if variant.trains_cond_encoder() {
            model.cond_encoder.forward(&blur, &vox)?.embedding
        } else {
            no_grad(|| -> Result<_> { Ok(model.cond_encoder.forward(&blur, &vox)?.embedding) })?
        };
        let z_init = match cfg.stage2_start {
            Stage2Start::NoisedGt => {
                let eps = sample_noise::<f32>(&mut rng, &z_gt.shape());
                forward_diffuse(&z_gt, sched.t_steps, &eps, &sched)?.detach()
            }
            Stage2Start::PureNoise => sample_noise::<f32>(&mut rng, &z_gt.shape()),
        };
        let z_hat = unroll(&model.unet, &z_init, &[c], &sched)?;
        let pb = if variant.trains_hae_encoder() {
            model.hae.encoder.forward(&blur, &vox)?
        } else {
            no_grad(|| -> Result<_> { Ok(model.hae.encoder.forward(&blur, &vox)?) })?
        };
        let q = model.hae.quantizer.quantize(&z_hat)?;
        let i_hat = model.hae.deblur_decoder()?.forward(&q.z_q, &pb.pyramid, &blur)?;
        let loss = l1_loss(&i_hat, &sharp).add(&dm_loss(&z_hat, &z_gt)?);
        let loss_v = loss.item() as f64;
        loss.backward();
        opt_unet.step();
        if let Some(o) = opt_ft.as_mut() {
            o.step();
        }

        if step % cfg.log_every == 0 || step == cfg.steps {
            history.loss.push((step, loss_v));
            if let Some(vset) = val {
                let scores =
                    eval_stage2_deblur(&model, vset, &sched, cfg.seed.wrapping_add(step as u64))?;
                history
                    .val_psnr
                    .push((step, crate::train::stage1::mean(&scores)));
            }
        }
    }
    Ok((model, history))
}
