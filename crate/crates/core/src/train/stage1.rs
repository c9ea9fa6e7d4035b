//! Stage 1: train the full autoencoder under ground-truth guidance.

use rand::SeedableRng;

use crate::error::Result;
use crate::hae::{stage1_loss, HAEConfig, HaeModel, ModelDecoder};
use crate::nn::layers::Params;
use crate::nn::{no_grad, Adam};
use crate::train::data::{
    sample_batch_indices, stack_images, stack_voxels, unstack_images, zero_voxels, DeblurSet,
    VfiSet,
};
use crate::train::metrics::psnr;
use crate::train::TrainConfig;
use crate::TrainRng;

#[derive(Debug, Clone, Default)]
pub struct TrainHistory {
    /// `(step, train loss)` at every logged step.
    pub loss: Vec<(usize, f64)>,
    /// `(step, validation PSNR)` at every evaluation point.
    pub val_psnr: Vec<(usize, f64)>,
}

impl TrainHistory {
    pub fn write(&self, path: &std::path::Path) -> Result<()> {
        let mut text = String::from("step\tloss\tval_psnr\n");
        let mut vals = self.val_psnr.iter().peekable();
        for &(step, loss) in &self.loss {
            let v = match vals.peek() {
                Some(&&(vs, vp)) if vs == step => {
                    vals.next();
                    format!("{vp:.4}")
                }
                _ => String::from("-"),
            };
            text.push_str(&format!("{step}\t{loss:.6}\t{v}\n"));
        }
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// Reconstruct every sample through the ground-truth-embedding path
/// (the stage-1 / V0 decode) and return per-sample PSNR.
pub fn eval_stage1(model: &HaeModel<f32>, set: &VfiSet) -> Result<Vec<f64>> {
    no_grad(|| {
        let mut out = Vec::with_capacity(set.items.len());
        for item in &set.items {
            let i0 = stack_images::<f32>(&[&item.i0]);
            let i1 = stack_images::<f32>(&[&item.i1]);
            let igt = stack_images::<f32>(&[&item.igt]);
            let v0 = stack_voxels::<f32>(&[&item.vox0]);
            let v1 = stack_voxels::<f32>(&[&item.vox1]);
            let vz = zero_voxels::<f32>(1, set.bins, set.height, set.width);
            let e0 = model.encoder.forward(&i0, &v0)?;
            let e1 = model.encoder.forward(&i1, &v1)?;
            let eg = model.encoder.forward(&igt, &vz)?;
            let q = model.quantizer.quantize(&eg.embedding)?;
            let rec = match &model.decoder {
                ModelDecoder::Kernel(d) => d.forward(&q.z_q, &e0.pyramid, &e1.pyramid, &i0, &i1)?,
                ModelDecoder::Deblur(_) => {
                    return Err(crate::error::Error::domain(
                        "stage-1 VFI evaluation needs a kernel-synthesis head".to_string(),
                    ))
                }
            };
            let rec_img = &unstack_images(&rec)[0];
            out.push(psnr(rec_img, &item.igt)?);
        }
        Ok(out)
    })
}

pub fn eval_stage1_deblur(model: &HaeModel<f32>, set: &DeblurSet) -> Result<Vec<f64>> {
    no_grad(|| {
        let mut out = Vec::with_capacity(set.items.len());
        for item in &set.items {
            let blur = stack_images::<f32>(&[&item.blur]);
            let sharp = stack_images::<f32>(&[&item.sharp]);
            let vox = stack_voxels::<f32>(&[&item.vox]);
            let vz = zero_voxels::<f32>(1, set.bins, set.height, set.width);
            let eb = model.encoder.forward(&blur, &vox)?;
            let eg = model.encoder.forward(&sharp, &vz)?;
            let q = model.quantizer.quantize(&eg.embedding)?;
            let rec = model.deblur_decoder()?.forward(&q.z_q, &eb.pyramid, &blur)?;
            out.push(psnr(&unstack_images(&rec)[0], &item.sharp)?);
        }
        Ok(out)
    })
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

/// Full stage-1 optimization on an interpolation set. Deterministic given
/// the seed; returns the trained model and its loss/validation history.
pub fn train_stage1(
    hae_cfg: &HAEConfig,
    cfg: &TrainConfig,
    train: &VfiSet,
    val: Option<&VfiSet>,
) -> Result<(HaeModel<f32>, TrainHistory)> {
    let mut rng = TrainRng::seed_from_u64(cfg.seed);
    let model = HaeModel::<f32>::new(hae_cfg, &mut rng)?;
    let mut opt = Adam::new(model.params(), cfg.lr_main);
    let mut history = TrainHistory::default();

    let n = train.items.len();
    for step in 1..=cfg.steps {
        if step == cfg.lr_decay_step {
            opt.set_lr(cfg.lr_main / 10.0);
        }
        let idx = sample_batch_indices(&mut rng, n, cfg.batch_size.min(n));
        let items: Vec<_> = idx.iter().map(|&i| &train.items[i]).collect();
        let i0 = stack_images::<f32>(&items.iter().map(|s| &s.i0).collect::<Vec<_>>());
        let i1 = stack_images::<f32>(&items.iter().map(|s| &s.i1).collect::<Vec<_>>());
        let igt = stack_images::<f32>(&items.iter().map(|s| &s.igt).collect::<Vec<_>>());
        let v0 = stack_voxels::<f32>(&items.iter().map(|s| &s.vox0).collect::<Vec<_>>());
        let v1 = stack_voxels::<f32>(&items.iter().map(|s| &s.vox1).collect::<Vec<_>>());
        let vz = zero_voxels::<f32>(items.len(), train.bins, train.height, train.width);

        let e0 = model.encoder.forward(&i0, &v0)?;
        let e1 = model.encoder.forward(&i1, &v1)?;
        let eg = model.encoder.forward(&igt, &vz)?;
        let q = model.quantizer.quantize(&eg.embedding)?;
        let rec = model
            .kernel_decoder()?
            .forward(&q.z_q, &e0.pyramid, &e1.pyramid, &i0, &i1)?;
        let loss = stage1_loss(&rec, &igt, &q.vq_loss)?;
        let loss_v = loss.item() as f64;
        loss.backward();
        opt.step();

        if step % cfg.log_every == 0 || step == cfg.steps {
            history.loss.push((step, loss_v));
            if let Some(vset) = val {
                history
                    .val_psnr
                    .push((step, mean(&eval_stage1(&model, vset)?)));
            }
        }
    }
    Ok((model, history))
}

/// Stage-1 training for the deblurring task (single I-E pair, SCER voxels,
/// simplified U-Net head).
pub fn train_stage1_deblur(
    hae_cfg: &HAEConfig,
    cfg: &TrainConfig,
    train: &DeblurSet,
    val: Option<&DeblurSet>,
) -> Result<(HaeModel<f32>, TrainHistory)> {
    let mut rng = TrainRng::seed_from_u64(cfg.seed);
    let model = HaeModel::<f32>::new(hae_cfg, &mut rng)?;
    let mut opt = Adam::new(model.params(), cfg.lr_main);
    let mut history = TrainHistory::default();

    let n = train.items.len();
    for step in 1..=cfg.steps {
        if step == cfg.lr_decay_step {
            opt.set_lr(cfg.lr_main / 10.0);
        }
        let idx = sample_batch_indices(&mut rng, n, cfg.batch_size.min(n));
        let items: Vec<_> = idx.iter().map(|&i| &train.items[i]).collect();
        let blur = stack_images::<f32>(&items.iter().map(|s| &s.blur).collect::<Vec<_>>());
        let sharp = stack_images::<f32>(&items.iter().map(|s| &s.sharp).collect::<Vec<_>>());
        let vox = stack_voxels::<f32>(&items.iter().map(|s| &s.vox).collect::<Vec<_>>());
        let vz = zero_voxels::<f32>(items.len(), train.bins, train.height, train.width);

        let eb = model.encoder.forward(&blur, &vox)?;
        let eg = model.encoder.forward(&sharp, &vz)?;
        let q = model.quantizer.quantize(&eg.embedding)?;
        let rec = model.deblur_decoder()?.forward(&q.z_q, &eb.pyramid, &blur)?;
        let loss = stage1_loss(&rec, &sharp, &q.vq_loss)?;
        let loss_v = loss.item() as f64;
        loss.backward();
        opt.step();

        if step % cfg.log_every == 0 || step == cfg.steps {
            history.loss.push((step, loss_v));
            if let Some(vset) = val {
                history
                    .val_psnr
                    .push((step, mean(&eval_stage1_deblur(&model, vset)?)));
            }
        }
    }
    Ok((model, history))
}
