//! Ablation-harness mechanics at micro scale: row sets, report files, plot
//! artifacts, and reproducibility of untimed reports.

use eventdiff::diffusion::{DenoiserConfig, ScheduleSpec};
use eventdiff::hae::HAEConfig;
use eventdiff::synth::dataset::{make_dataset, DatasetOptions, InteriorMode};
use eventdiff::synth::{SceneConfig, ShapeKind, ShapeSpec};
use eventdiff::train::ablate::{run_ablation, AblationContext, Suite};
use eventdiff::train::data::load_vfi_set;
use eventdiff::train::{
    save_stage2_checkpoint, train_stage1, train_stage2, TrainConfig, Variant,
};

fn micro_scenes() -> Vec<SceneConfig> {
    (0..2)
        .map(|i| SceneConfig {
            height: 32,
            width: 32,
            channels: 1,
            shapes: vec![ShapeSpec {
                kind: if i == 0 { ShapeKind::Disk } else { ShapeKind::Square },
                size: 9.0,
                velocity: (8.0, -5.0),
                intensity: 0.8,
            }],
            background: 0.15,
            duration: 0.5,
            frame_rate: 8.0,
            seed: 30 + i as u64,
        })
        .collect()
}

fn micro_ctx() -> AblationContext {
    AblationContext {
        hae: HAEConfig {
            n_down: 3,
            base_channels: 8,
            event_base_channels: 4,
            channel_mult: vec![1, 2, 2, 2, 2],
            bins: 2,
            res_blocks: 1,
            ..Default::default()
        },
        denoiser: DenoiserConfig {
            base_channels: 8,
            channel_mult: vec![1],
            time_embed_dim: 8,
            res_blocks: 1,
            n_conditions: 2,
        },
        schedule: ScheduleSpec::default(),
        train: TrainConfig {
            steps: 2,
            batch_size: 2,
            crop: 32,
            log_every: 1,
            seed: 9,
            ..Default::default()
        },
        steps_sweep: vec![1, 2, 5],
        timing: false,
    }
}

#[test]
fn suites_produce_expected_row_sets() {
    let dir = tempfile::tempdir().unwrap();
    let opts = DatasetOptions {
        skips: 1,
        interior: InteriorMode::Midpoint,
        val_fraction: 0.0,
        ..Default::default()
    };
    let manifest = make_dataset(&micro_scenes(), dir.path().join("data").as_path(), &opts).unwrap();
    let ctx = micro_ctx();

    // scheme: seven rows V0..V6
    let out = dir.path().join("scheme");
    let table = run_ablation(Suite::Scheme, &ctx, &manifest.path(), None, &out).unwrap();
    let variants: Vec<_> = table.rows.iter().map(|r| r.variant.as_str()).collect();
    assert_eq!(variants, vec!["V0", "V1", "V2", "V3", "V4", "V5", "V6"]);
    assert!(out.join("report.tsv").exists());

    // fusion: five rows in the documented order
    let out = dir.path().join("fusion");
    let table = run_ablation(Suite::Fusion, &ctx, &manifest.path(), None, &out).unwrap();
    let variants: Vec<_> = table.rows.iter().map(|r| r.variant.as_str()).collect();
    assert_eq!(variants, vec!["concat", "concat_L", "sca", "tca", "stca"]);

    // untimed reports are byte-reproducible
    let out2 = dir.path().join("fusion2");
    run_ablation(Suite::Fusion, &ctx, &manifest.path(), None, &out2).unwrap();
    assert_eq!(
        std::fs::read(out.join("report.tsv")).unwrap(),
        std::fs::read(out2.join("report.tsv")).unwrap()
    );
}

#[test]
fn step_sweep_needs_and_uses_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let opts = DatasetOptions {
        skips: 1,
        interior: InteriorMode::Midpoint,
        val_fraction: 0.0,
        ..Default::default()
    };
    let manifest = make_dataset(&micro_scenes(), dir.path().join("data").as_path(), &opts).unwrap();
    let ctx = micro_ctx();

    // without a checkpoint: config error naming the gap
    let err = run_ablation(
        Suite::StepSweep,
        &ctx,
        &manifest.path(),
        None,
        &dir.path().join("sweep"),
    )
    .unwrap_err();
    assert!(err.to_string().contains("checkpoint"), "{err}");

    // train a micro stage-2 model and sweep it
    let set = load_vfi_set(&manifest, Some("train"), ctx.hae.bins, 32, 9).unwrap();
    let (s1, _) = train_stage1(&ctx.hae, &ctx.train, &set, None).unwrap();
    let (s2, _) = train_stage2(&s1, &ctx.denoiser, &ctx.schedule, &ctx.train, &set, None).unwrap();
    let ckpt = dir.path().join("v5.ckpt");
    save_stage2_checkpoint(&ckpt, &s2, "vfi", 2).unwrap();

    let out = dir.path().join("sweep");
    let table = run_ablation(Suite::StepSweep, &ctx, &manifest.path(), Some(&ckpt), &out).unwrap();
    assert_eq!(table.rows.len(), 3);
    assert_eq!(
        table.rows.iter().map(|r| r.steps).collect::<Vec<_>>(),
        vec![1, 2, 5]
    );
    assert!(out.join("step_sweep_psnr.png").exists());
    assert!(out.join("step_sweep_runtime.png").exists());
}

#[test]
fn embed_size_covers_all_depths() {
    let dir = tempfile::tempdir().unwrap();
    let opts = DatasetOptions {
        skips: 1,
        interior: InteriorMode::Midpoint,
        val_fraction: 0.0,
        ..Default::default()
    };
    let manifest = make_dataset(&micro_scenes(), dir.path().join("data").as_path(), &opts).unwrap();
    let ctx = micro_ctx();
    let out = dir.path().join("embed");
    let table = run_ablation(Suite::EmbedSize, &ctx, &manifest.path(), None, &out).unwrap();
    let names: Vec<_> = table.rows.iter().map(|r| r.variant.as_str()).collect();
    assert_eq!(
        names,
        vec![
            "f2-stage1", "f2-stage2", "f3-stage1", "f3-stage2", "f4-stage1", "f4-stage2",
            "f5-stage1", "f5-stage2"
        ]
    );
}
