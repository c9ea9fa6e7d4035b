//! Ablation harness: training-scheme variants, fusion modes, embedding
//! spatial size, and the sampler step sweep.

use std::path::Path;
use std::time::Instant;

use crate::diffusion::{DenoiserConfig, ScheduleSpec};
use crate::error::{Error, Result};
use crate::hae::{FusionMode, HAEConfig, HaeModel};
use crate::nn::layers::Params;
use crate::synth::dataset::Manifest;
use crate::train::data::{load_vfi_set, stack_images, stack_voxels, unstack_images, VfiSet};
use crate::train::metrics::{psnr, ssim};
use crate::train::stage1::{eval_stage1, train_stage1};
use crate::train::stage2::{infer_vfi_batch, train_stage2, LatentSource, Stage2Model};
use crate::train::report::{line_plot, ReportRow, ReportTable};
use crate::train::{load_stage2_checkpoint, TrainConfig, Variant};
use crate::TrainRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Scheme,
    Fusion,
    EmbedSize,
    StepSweep,
}

impl Suite {
    pub fn parse(s: &str) -> Result<Suite> {
        match s {
            "scheme" => Ok(Suite::Scheme),
            "fusion" => Ok(Suite::Fusion),
            "embed_size" => Ok(Suite::EmbedSize),
            "step_sweep" => Ok(Suite::StepSweep),
            other => Err(Error::config(format!(
                "unknown suite {other}; valid suites: scheme, fusion, embed_size, step_sweep"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AblationContext {
    pub hae: HAEConfig,
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleSpec,
    pub train: TrainConfig,
    pub steps_sweep: Vec<usize>,
    /// When false the runtime column is zeroed so reports are byte-stable.
    pub timing: bool,
}

struct EvalOutcome {
    psnr: f64,
    ssim: f64,
    runtime_per_frame: f64,
}

/// Sampler-path evaluation over a set, timing one full-frame inference.
fn eval_vfi(
    model: &Stage2Model,
    set: &VfiSet,
    steps: usize,
    seed: u64,
    mean_conditions: bool,
    timing: bool,
) -> Result<EvalOutcome> {
    use rand::SeedableRng;
    let sched = model.sched_spec.with_steps(steps).build()?;
    let mut rng = TrainRng::seed_from_u64(seed);
    let mut psnrs = Vec::new();
    let mut ssims = Vec::new();
    let t0 = Instant::now();
    for item in &set.items {
        let i0 = stack_images::<f32>(&[&item.i0]);
        let i1 = stack_images::<f32>(&[&item.i1]);
        let v0 = stack_voxels::<f32>(&[&item.vox0]);
        let v1 = stack_voxels::<f32>(&[&item.vox1]);
        let source = if mean_conditions {
            LatentSource::MeanConditions
        } else {
            LatentSource::Diffusion(&sched)
        };
        let rec = infer_vfi_batch(model, &i0, &i1, &v0, &v1, source, &mut rng)?;
        let img = &unstack_images(&rec)[0];
        psnrs.push(psnr(img, &item.igt)?);
        ssims.push(ssim(img, &item.igt)?);
    }
    let elapsed = t0.elapsed().as_secs_f64() / set.items.len() as f64;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    Ok(EvalOutcome {
        psnr: mean(&psnrs),
        ssim: mean(&ssims),
        runtime_per_frame: if timing { elapsed } else { 0.0 },
    })
}

fn eval_stage1_metrics(model: &HaeModel<f32>, set: &VfiSet) -> Result<(f64, f64)> {
    let psnrs = eval_stage1(model, set)?;
    // ssim over the same reconstruction path
    let mut ssims = Vec::new();
    crate::nn::no_grad(|| -> Result<()> {
        for item in &set.items {
            let i0 = stack_images::<f32>(&[&item.i0]);
            let i1 = stack_images::<f32>(&[&item.i1]);
            let igt = stack_images::<f32>(&[&item.igt]);
            let v0 = stack_voxels::<f32>(&[&item.vox0]);
            let v1 = stack_voxels::<f32>(&[&item.vox1]);
            let vz = crate::train::data::zero_voxels::<f32>(1, set.bins, set.height, set.width);
            let e0 = model.encoder.forward(&i0, &v0)?;
            let e1 = model.encoder.forward(&i1, &v1)?;
            let eg = model.encoder.forward(&igt, &vz)?;
            let q = model.quantizer.quantize(&eg.embedding)?;
            let rec = model
                .kernel_decoder()?
                .forward(&q.z_q, &e0.pyramid, &e1.pyramid, &i0, &i1)?;
            ssims.push(ssim(&unstack_images(&rec)[0], &item.igt)?);
        }
        Ok(())
    })?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    Ok((mean(&psnrs), mean(&ssims)))
}

/// Pick a widened base channel count for Concat-L whose parameter count is
/// within 5% of the STCA model's.
pub fn concat_l_base(base_cfg: &HAEConfig) -> Result<usize> {
    use rand::SeedableRng;
    let mut rng = TrainRng::seed_from_u64(0);
    let target = {
        let mut cfg = base_cfg.clone();
        cfg.fusion = FusionMode::Stca;
        HaeModel::<f32>::new(&cfg, &mut rng)?.param_count() as f64
    };
    let mut best = (f64::INFINITY, base_cfg.base_channels);
    for base in base_cfg.base_channels..=base_cfg.base_channels * 3 {
        let mut cfg = base_cfg.clone();
        cfg.fusion = FusionMode::ConcatL;
        cfg.base_channels = base;
        let count = HaeModel::<f32>::new(&cfg, &mut rng)?.param_count() as f64;
        let rel = (count - target).abs() / target;
        if rel < best.0 {
            best = (rel, base);
        }
        if count > target * 1.2 {
            break;
        }
    }
    if best.0 > 0.05 {
        return Err(Error::config(format!(
            "could not match STCA parameter count within 5% (best {:.1}% at base {})",
            best.0 * 100.0,
            best.1
        )));
    }
    Ok(best.1)
}

/// Run one ablation suite end to end, writing `report.tsv` and any plots
/// into `out_dir`. `stage2_ckpt` is required by the step sweep.
pub fn run_ablation(
    suite: Suite,
    ctx: &AblationContext,
    manifest_path: &Path,
    stage2_ckpt: Option<&Path>,
    out_dir: &Path,
) -> Result<ReportTable> {
    std::fs::create_dir_all(out_dir)?;
    let manifest = Manifest::load(manifest_path)?;
    let train_set = load_vfi_set(
        &manifest,
        Some("train"),
        ctx.hae.bins,
        ctx.train.crop,
        ctx.train.seed,
    )?;
    let seed = ctx.train.seed;
    let mut table = ReportTable::default();

    match suite {
        Suite::Scheme => {
            let (stage1, _) = train_stage1(&ctx.hae, &ctx.train, &train_set, None)?;
            for variant in Variant::all() {
                let row = match variant {
                    Variant::V0 => {
                        let (p, s) = eval_stage1_metrics(&stage1, &train_set)?;
                        ReportRow {
                            suite: "scheme".into(),
                            variant: "V0".into(),
                            psnr_db: p,
                            ssim: s,
                            runtime_s: 0.0,
                            steps: 0,
                            seed,
                        }
                    }
                    _ => {
                        let mut cfg = ctx.train.clone();
                        cfg.variant = variant;
                        let (model, _) = train_stage2(
                            &stage1,
                            &ctx.denoiser,
                            &ctx.schedule,
                            &cfg,
                            &train_set,
                            None,
                        )?;
                        let steps = if variant == Variant::V2 {
                            cfg.v2_steps
                        } else {
                            ctx.schedule.t_steps
                        };
                        let out = eval_vfi(
                            &model,
                            &train_set,
                            steps,
                            seed,
                            variant == Variant::V1,
                            ctx.timing,
                        )?;
                        ReportRow {
                            suite: "scheme".into(),
                            variant: variant.to_string(),
                            psnr_db: out.psnr,
                            ssim: out.ssim,
                            runtime_s: out.runtime_per_frame,
                            steps: if variant == Variant::V1 { 0 } else { steps },
                            seed,
                        }
                    }
                };
                table.push(row);
            }
        }
        Suite::Fusion => {
            let modes = [
                FusionMode::Concat,
                FusionMode::ConcatL,
                FusionMode::Sca,
                FusionMode::Tca,
                FusionMode::Stca,
            ];
            for mode in modes {
                let mut cfg = ctx.hae.clone();
                cfg.fusion = mode;
                // a TCA-only encoder routes event information into the event
                // branch alone, so the decoder must read the event pyramid
                cfg.fuse_event_pyramid = mode == FusionMode::Tca;
                if mode == FusionMode::ConcatL {
                    cfg.base_channels = concat_l_base(&ctx.hae)?;
                }
                let (model, _) = train_stage1(&cfg, &ctx.train, &train_set, None)?;
                let (p, s) = eval_stage1_metrics(&model, &train_set)?;
                let name = match mode {
                    FusionMode::Concat => "concat",
                    FusionMode::ConcatL => "concat_L",
                    FusionMode::Sca => "sca",
                    FusionMode::Tca => "tca",
                    FusionMode::Stca => "stca",
                };
                table.push(ReportRow {
                    suite: "fusion".into(),
                    variant: name.into(),
                    psnr_db: p,
                    ssim: s,
                    runtime_s: 0.0,
                    steps: 0,
                    seed,
                });
            }
        }
        Suite::EmbedSize => {
            for n_down in 2..=5usize {
                let mut cfg = ctx.hae.clone();
                cfg.n_down = n_down;
                if ctx.train.crop % (1 << n_down) != 0 {
                    return Err(Error::config(format!(
                        "crop {} is not divisible by 2^{n_down}",
                        ctx.train.crop
                    )));
                }
                let (stage1, _) = train_stage1(&cfg, &ctx.train, &train_set, None)?;
                let (p, s) = eval_stage1_metrics(&stage1, &train_set)?;
                table.push(ReportRow {
                    suite: "embed_size".into(),
                    variant: format!("f{n_down}-stage1"),
                    psnr_db: p,
                    ssim: s,
                    runtime_s: 0.0,
                    steps: 0,
                    seed,
                });
                let (model, _) = train_stage2(
                    &stage1,
                    &ctx.denoiser,
                    &ctx.schedule,
                    &ctx.train,
                    &train_set,
                    None,
                )?;
                let out = eval_vfi(
                    &model,
                    &train_set,
                    ctx.schedule.t_steps,
                    seed,
                    false,
                    ctx.timing,
                )?;
                table.push(ReportRow {
                    suite: "embed_size".into(),
                    variant: format!("f{n_down}-stage2"),
                    psnr_db: out.psnr,
                    ssim: out.ssim,
                    runtime_s: out.runtime_per_frame,
                    steps: ctx.schedule.t_steps,
                    seed,
                });
            }
        }
        Suite::StepSweep => {
            let ckpt = stage2_ckpt.ok_or_else(|| {
                Error::config(
                    "step_sweep needs a trained stage-2 checkpoint (--checkpoint)".to_string(),
                )
            })?;
            let (model, _) = load_stage2_checkpoint(ckpt)?;
            for &steps in &ctx.steps_sweep {
                let out = eval_vfi(&model, &train_set, steps, seed, false, ctx.timing)?;
                table.push(ReportRow {
                    suite: "step_sweep".into(),
                    variant: format!("steps{steps}"),
                    psnr_db: out.psnr,
                    ssim: out.ssim,
                    runtime_s: out.runtime_per_frame,
                    steps,
                    seed,
                });
            }
            let xs: Vec<f64> = table.rows.iter().map(|r| r.steps as f64).collect();
            let ys: Vec<f64> = table.rows.iter().map(|r| r.psnr_db).collect();
            line_plot(&out_dir.join("step_sweep_psnr.png"), &xs, &ys, "psnr vs steps")?;
            let rt: Vec<f64> = table.rows.iter().map(|r| r.runtime_s).collect();
            line_plot(
                &out_dir.join("step_sweep_runtime.png"),
                &xs,
                &rt,
                "runtime vs steps",
            )?;
        }
    }

    table.write(&out_dir.join("report.tsv"))?;
    Ok(table)
}
