use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ndarray::Array3;

use eventdiff::config::{Profile, RunConfig, TaskKind};
use eventdiff::error::Error;
use eventdiff::synth::dataset::{load_sample, make_dataset, make_deblur_dataset, Manifest, Sample};
use eventdiff::train::ablate::{run_ablation, AblationContext, Suite};
use eventdiff::train::data::{load_deblur_set, load_vfi_set};
use eventdiff::train::infer::{deblur, interpolate};
use eventdiff::train::metrics::{psnr, ssim};
use eventdiff::train::report::{ReportRow, ReportTable};
use eventdiff::train::{
    eval_stage1, eval_stage1_deblur, eval_stage2, eval_stage2_deblur, load_stage1_checkpoint,
    load_stage2_checkpoint, save_stage1_checkpoint, save_stage2_checkpoint, train_stage1,
    train_stage1_deblur, train_stage2, train_stage2_deblur, Variant,
};

#[derive(Parser)]
#[command(
    name = "eventdiff",
    about = "Event-based video frame interpolation with a latent diffusion model",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML config file; missing sections fall back to profile defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Hyperparameter profile: desk (default) or paper.
    #[arg(long, default_value = "desk")]
    profile: String,
    /// Override the run seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, Error> {
        let profile = match self.profile.as_str() {
            "desk" => Profile::Desk,
            "paper" => Profile::Paper,
            other => {
                return Err(Error::config(format!(
                    "unknown profile {other} (expected desk or paper)"
                )))
            }
        };
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path, profile)?,
            None => RunConfig::for_profile(profile),
        };
        if let Some(seed) = self.seed {
            cfg.training.seed = seed;
            cfg.dataset.seed = seed;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and its manifest.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory (overrides dataset.out_dir).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Boundary-frame gap (overrides dataset.skips).
        #[arg(long)]
        skips: Option<usize>,
        /// Dataset task (vfi or deblur; overrides dataset.task).
        #[arg(long)]
        task: Option<String>,
    },
    /// Train stage 1 (autoencoder) or stage 2 (diffusion + finetune).
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        stage: u8,
        /// Dataset manifest path.
        #[arg(long)]
        manifest: PathBuf,
        /// Stage-1 checkpoint to start stage 2 from.
        #[arg(long)]
        from_stage1: Option<PathBuf>,
        /// Training-scheme variant (V0..V6) for stage 2.
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
        /// Checkpoint output path (defaults into the run directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run inference on a stored sample.
    Infer {
        #[command(subcommand)]
        mode: InferMode,
    },
    /// Evaluate a checkpoint over a manifest split.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Manifest split: train, val, or all.
        #[arg(long, default_value = "val")]
        split: String,
        /// Override the sampler step count.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Run an ablation suite and write its report table.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Suite: scheme, fusion, embed_size, or step_sweep.
        #[arg(long)]
        suite: String,
        #[arg(long)]
        manifest: PathBuf,
        /// Stage-2 checkpoint (required by step_sweep).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum InferMode {
    /// Interpolate the intermediate frame of a triplet sample.
    Interpolate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Triplet sample file (.smp).
        #[arg(long)]
        sample: PathBuf,
        /// Normalized position in (0, 1); defaults to the sample's own.
        #[arg(long)]
        t: Option<f64>,
        /// Override the sampler step count.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output PNG path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Deblur the blurry frame of a deblur sample.
    Deblur {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sample: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn save_png(path: &Path, img: &Array3<f32>) -> Result<(), Error> {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let to_u8 = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let ok = match c {
        1 => {
            let buf: Vec<u8> = img.iter().map(|&v| to_u8(v)).collect();
            image::GrayImage::from_raw(w as u32, h as u32, buf).map(|i| i.save(path))
        }
        3 => {
            let mut buf = Vec::with_capacity(h * w * 3);
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..3 {
                        buf.push(to_u8(img[(ch, y, x)]));
                    }
                }
            }
            image::RgbImage::from_raw(w as u32, h as u32, buf).map(|i| i.save(path))
        }
        _ => return Err(Error::domain(format!("cannot write {c}-channel PNG"))),
    };
    match ok {
        Some(Ok(())) => Ok(()),
        Some(Err(e)) => Err(Error::format(format!("png encode: {e}"))),
        None => Err(Error::format("png buffer size mismatch".to_string())),
    }
}

fn cmd_gen_data(
    config: ConfigArgs,
    out: Option<PathBuf>,
    skips: Option<usize>,
    task: Option<String>,
) -> Result<(), Error> {
    let mut cfg = config.load()?;
    if let Some(s) = skips {
        cfg.dataset.skips = s;
    }
    if let Some(t) = task {
        cfg.dataset.task = match t.as_str() {
            "vfi" => TaskKind::Vfi,
            "deblur" => TaskKind::Deblur,
            other => return Err(Error::config(format!("unknown task {other}"))),
        };
    }
    cfg.validate()?;
    let out_dir = out.unwrap_or_else(|| PathBuf::from(&cfg.dataset.out_dir));
    let scenes = cfg.dataset.build_scenes();
    let opts = cfg.dataset.dataset_options();
    let manifest = match cfg.dataset.task {
        TaskKind::Vfi => make_dataset(&scenes, &out_dir, &opts)?,
        TaskKind::Deblur => make_deblur_dataset(&scenes, &out_dir, &opts, cfg.dataset.blur_frames)?,
    };
    println!("{}", manifest.path().display());
    println!("samples: {}", manifest.entries.len());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    config: ConfigArgs,
    stage: u8,
    manifest_path: PathBuf,
    from_stage1: Option<PathBuf>,
    variant: Option<String>,
    steps: Option<usize>,
    out: Option<PathBuf>,
) -> Result<(), Error> {
    let mut cfg = config.load()?;
    cfg.training.stage = stage;
    if let Some(v) = &variant {
        cfg.training.variant = Variant::parse(v)?;
    }
    if let Some(s) = steps {
        cfg.training.steps = s;
    }
    cfg.validate()?;
    let run_dir = cfg.prepare_run_dir()?;
    let manifest = Manifest::load(&manifest_path)?;
    let task = cfg.dataset.task;

    match (stage, task) {
        (1, TaskKind::Vfi) => {
            let train = load_vfi_set(
                &manifest,
                Some("train"),
                cfg.model.bins,
                cfg.training.crop,
                cfg.training.seed,
            )?;
            let val = load_vfi_set(
                &manifest,
                Some("val"),
                cfg.model.bins,
                cfg.training.crop,
                cfg.training.seed,
            )
            .ok();
            let (model, history) = train_stage1(&cfg.model, &cfg.training, &train, val.as_ref())?;
            let ckpt = out.unwrap_or_else(|| run_dir.join("stage1.ckpt"));
            save_stage1_checkpoint(&ckpt, &model, task.as_str(), cfg.training.steps as u64)?;
            history.write(&run_dir.join("stage1_metrics.log"))?;
            let train_psnr = eventdiff::train::stage1::mean(&eval_stage1(&model, &train)?);
            println!("checkpoint: {}", ckpt.display());
            println!(
                "final loss: {:.6}",
                history.loss.last().map(|&(_, l)| l).unwrap_or(f64::NAN)
            );
            println!("train psnr: {train_psnr:.2} dB");
        }
        (1, TaskKind::Deblur) => {
            let train = load_deblur_set(&manifest, Some("train"), cfg.model.bins)?;
            let val = load_deblur_set(&manifest, Some("val"), cfg.model.bins).ok();
            let (model, history) =
                train_stage1_deblur(&cfg.model, &cfg.training, &train, val.as_ref())?;
            let ckpt = out.unwrap_or_else(|| run_dir.join("stage1.ckpt"));
            save_stage1_checkpoint(&ckpt, &model, task.as_str(), cfg.training.steps as u64)?;
            history.write(&run_dir.join("stage1_metrics.log"))?;
            let train_psnr =
                eventdiff::train::stage1::mean(&eval_stage1_deblur(&model, &train)?);
            println!("checkpoint: {}", ckpt.display());
            println!("train psnr: {train_psnr:.2} dB");
        }
        (2, _) => {
            let s1_path = from_stage1.ok_or_else(|| {
                Error::config("stage 2 requires --from-stage1 <checkpoint>".to_string())
            })?;
            let (stage1, meta) = load_stage1_checkpoint(&s1_path)?;
            if meta.hae != cfg.model {
                return Err(Error::config(
                    "stage-1 checkpoint was trained with a different model config".to_string(),
                ));
            }
            if meta.task != task.as_str() {
                return Err(Error::config(format!(
                    "stage-1 checkpoint task {} does not match configured task {}",
                    meta.task,
                    task.as_str()
                )));
            }
            println!(
                "stage 2 variant {} ({})",
                cfg.training.variant,
                if cfg.training.variant == Variant::V2 {
                    "traditional per-step noise loss"
                } else {
                    "direct denoised-embedding loss"
                }
            );
            let ckpt = out.unwrap_or_else(|| run_dir.join("stage2.ckpt"));
            match task {
                TaskKind::Vfi => {
                    let train = load_vfi_set(
                        &manifest,
                        Some("train"),
                        cfg.model.bins,
                        cfg.training.crop,
                        cfg.training.seed,
                    )?;
                    let val = load_vfi_set(
                        &manifest,
                        Some("val"),
                        cfg.model.bins,
                        cfg.training.crop,
                        cfg.training.seed,
                    )
                    .ok();
                    let (model, history) = train_stage2(
                        &stage1,
                        &cfg.unet,
                        &cfg.schedule,
                        &cfg.training,
                        &train,
                        val.as_ref(),
                    )?;
                    save_stage2_checkpoint(&ckpt, &model, task.as_str(), cfg.training.steps as u64)?;
                    history.write(&run_dir.join("stage2_metrics.log"))?;
                    let sched = model.sched_spec.build()?;
                    let v = eval_stage2(&model, &train, &sched, cfg.training.seed, false)?;
                    println!("checkpoint: {}", ckpt.display());
                    println!(
                        "validation-on-train psnr: {:.2} dB",
                        eventdiff::train::stage1::mean(&v)
                    );
                }
                TaskKind::Deblur => {
                    let mut dn = cfg.unet.clone();
                    dn.n_conditions = 1;
                    let train = load_deblur_set(&manifest, Some("train"), cfg.model.bins)?;
                    let val = load_deblur_set(&manifest, Some("val"), cfg.model.bins).ok();
                    let (model, history) = train_stage2_deblur(
                        &stage1,
                        &dn,
                        &cfg.schedule,
                        &cfg.training,
                        &train,
                        val.as_ref(),
                    )?;
                    save_stage2_checkpoint(&ckpt, &model, task.as_str(), cfg.training.steps as u64)?;
                    history.write(&run_dir.join("stage2_metrics.log"))?;
                    let sched = model.sched_spec.build()?;
                    let v = eval_stage2_deblur(&model, &train, &sched, cfg.training.seed)?;
                    println!("checkpoint: {}", ckpt.display());
                    println!(
                        "validation-on-train psnr: {:.2} dB",
                        eventdiff::train::stage1::mean(&v)
                    );
                }
            }
        }
        (s, _) => {
            return Err(Error::config(format!("stage must be 1 or 2, got {s}")));
        }
    }
    Ok(())
}

fn cmd_infer(mode: InferMode) -> Result<(), Error> {
    match mode {
        InferMode::Interpolate {
            checkpoint,
            sample,
            t,
            steps,
            seed,
            out,
        } => {
            let (model, meta) = load_stage2_checkpoint(&checkpoint)?;
            if meta.task != "vfi" {
                return Err(Error::config(format!(
                    "checkpoint task is {}, not vfi",
                    meta.task
                )));
            }
            let s = match load_sample(&sample)? {
                Sample::Vfi(s) => s,
                Sample::Deblur(_) => {
                    return Err(Error::config(
                        "interpolate needs a triplet sample, got a deblur sample".to_string(),
                    ))
                }
            };
            let t_used = t.unwrap_or(s.t_gt);
            let img = interpolate(&model, &s.i0, &s.i1, &s.events, t_used, steps, seed)?;
            let out_path = out.unwrap_or_else(|| sample.with_extension("interp.png"));
            save_png(&out_path, &img)?;
            println!("wrote {}", out_path.display());
            if (t_used - s.t_gt).abs() < 1e-9 {
                println!("psnr: {:.2} dB", psnr(&img, &s.igt)?);
                println!("ssim: {:.4}", ssim(&img, &s.igt)?);
            }
            Ok(())
        }
        InferMode::Deblur {
            checkpoint,
            sample,
            steps,
            seed,
            out,
        } => {
            let (model, meta) = load_stage2_checkpoint(&checkpoint)?;
            if meta.task != "deblur" {
                return Err(Error::config(format!(
                    "checkpoint task is {}, not deblur",
                    meta.task
                )));
            }
            let s = match load_sample(&sample)? {
                Sample::Deblur(s) => s,
                Sample::Vfi(_) => {
                    return Err(Error::config(
                        "deblur needs a deblur sample, got a triplet".to_string(),
                    ))
                }
            };
            let img = deblur(&model, &s.blur, &s.events, steps, seed)?;
            let out_path = out.unwrap_or_else(|| sample.with_extension("deblur.png"));
            save_png(&out_path, &img)?;
            println!("wrote {}", out_path.display());
            println!("psnr: {:.2} dB", psnr(&img, &s.sharp)?);
            println!("ssim: {:.4}", ssim(&img, &s.sharp)?);
            Ok(())
        }
    }
}

fn cmd_eval(
    config: ConfigArgs,
    checkpoint: PathBuf,
    manifest_path: PathBuf,
    split: String,
    steps: Option<usize>,
) -> Result<(), Error> {
    let cfg = config.load()?;
    let run_dir = cfg.prepare_run_dir()?;
    let manifest = Manifest::load(&manifest_path)?;
    let split_opt = match split.as_str() {
        "all" => None,
        s => Some(s),
    };
    let (meta, _) = eventdiff::hae::checkpoint::load_container::<eventdiff::train::CheckpointMeta>(
        &checkpoint,
    )?;
    let mut table = ReportTable::default();
    let (mean_psnr, steps_used) = if meta.kind == "stage1" {
        let (model, meta) = load_stage1_checkpoint(&checkpoint)?;
        if meta.task == "vfi" {
            let set = load_vfi_set(&manifest, split_opt, meta.hae.bins, cfg.training.crop, 0)?;
            let p = eval_stage1(&model, &set)?;
            (eventdiff::train::stage1::mean(&p), 0)
        } else {
            let set = load_deblur_set(&manifest, split_opt, meta.hae.bins)?;
            let p = eval_stage1_deblur(&model, &set)?;
            (eventdiff::train::stage1::mean(&p), 0)
        }
    } else {
        let (model, meta) = load_stage2_checkpoint(&checkpoint)?;
        let spec = match steps {
            Some(s) => model.sched_spec.with_steps(s),
            None => model.sched_spec,
        };
        let sched = spec.build()?;
        if meta.task == "vfi" {
            let set = load_vfi_set(&manifest, split_opt, meta.hae.bins, cfg.training.crop, 0)?;
            let p = eval_stage2(&model, &set, &sched, cfg.training.seed, false)?;
            (eventdiff::train::stage1::mean(&p), sched.t_steps)
        } else {
            let set = load_deblur_set(&manifest, split_opt, meta.hae.bins)?;
            let p = eval_stage2_deblur(&model, &set, &sched, cfg.training.seed)?;
            (eventdiff::train::stage1::mean(&p), sched.t_steps)
        }
    };
    table.push(ReportRow {
        suite: "eval".to_string(),
        variant: split,
        psnr_db: mean_psnr,
        ssim: 0.0,
        runtime_s: 0.0,
        steps: steps_used,
        seed: cfg.training.seed,
    });
    table.write(&run_dir.join("eval.tsv"))?;
    println!("psnr: {mean_psnr:.2} dB");
    println!("report: {}", run_dir.join("eval.tsv").display());
    Ok(())
}

fn cmd_ablate(
    config: ConfigArgs,
    suite: String,
    manifest_path: PathBuf,
    checkpoint: Option<PathBuf>,
) -> Result<(), Error> {
    let cfg = config.load()?;
    let run_dir = cfg.prepare_run_dir()?;
    let suite = Suite::parse(&suite)?;
    let ctx = AblationContext {
        hae: cfg.model.clone(),
        denoiser: cfg.unet.clone(),
        schedule: cfg.schedule,
        train: cfg.training.clone(),
        steps_sweep: cfg.ablation.steps_sweep.clone(),
        timing: cfg.ablation.timing,
    };
    let table = run_ablation(suite, &ctx, &manifest_path, checkpoint.as_deref(), &run_dir)?;
    print!("{}", table.to_tsv());
    println!("report: {}", run_dir.join("report.tsv").display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData {
            config,
            out,
            skips,
            task,
        } => cmd_gen_data(config, out, skips, task),
        Command::Train {
            config,
            stage,
            manifest,
            from_stage1,
            variant,
            steps,
            out,
        } => cmd_train(config, stage, manifest, from_stage1, variant, steps, out),
        Command::Infer { mode } => cmd_infer(mode),
        Command::Eval {
            config,
            checkpoint,
            manifest,
            split,
            steps,
        } => cmd_eval(config, checkpoint, manifest, split, steps),
        Command::Ablate {
            config,
            suite,
            manifest,
            checkpoint,
        } => cmd_ablate(config, suite, manifest, checkpoint),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
