//! End-to-end inference from raw inputs: split and rasterize the events,
//! run the stage-2 sampler, decode. Ground truth never enters here.

use ndarray::Array3;
use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::event::{scer, split_events, voxelize, EventStream, SplitPolicy};
use crate::train::data::{stack_images, stack_voxels, unstack_images};
use crate::train::stage2::{infer_deblur_batch, infer_vfi_batch, LatentSource, Stage2Model};
use crate::TrainRng;

/// Interpolate the frame at normalized position `t` strictly inside the
/// event window. `steps_override` re-times the schedule at inference.
pub fn interpolate(
    model: &Stage2Model,
    i0: &Array3<f32>,
    i1: &Array3<f32>,
    events: &EventStream,
    t: f64,
    steps_override: Option<usize>,
    seed: u64,
) -> Result<Array3<f32>> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::domain(format!(
            "interpolation position t = {t} must lie strictly inside (0, 1)"
        )));
    }
    if i0.shape() != i1.shape() {
        return Err(Error::domain("boundary frames disagree in shape".to_string()));
    }
    let (h, w) = (i0.shape()[1], i0.shape()[2]);
    let bins = model.hae.cfg.bins;
    let t_abs = events.t_start + t * events.duration();
    let (e0, e1) = split_events(events, t_abs, SplitPolicy::Drop)?;
    let vox0 = voxelize(&e0, bins, h, w)?.data;
    let vox1 = voxelize(&e1, bins, h, w)?.data;

    let spec = match steps_override {
        Some(steps) => model.sched_spec.with_steps(steps),
        None => model.sched_spec,
    };
    let sched = spec.build()?;
    let mut rng = TrainRng::seed_from_u64(seed);
    let out = infer_vfi_batch(
        model,
        &stack_images::<f32>(&[i0]),
        &stack_images::<f32>(&[i1]),
        &stack_voxels::<f32>(&[&vox0]),
        &stack_voxels::<f32>(&[&vox1]),
        LatentSource::Diffusion(&sched),
        &mut rng,
    )?;
    Ok(unstack_images(&out).remove(0))
}

/// Deblur a single frame from its SCER-rasterized event window.
pub fn deblur(
    model: &Stage2Model,
    blur: &Array3<f32>,
    events: &EventStream,
    steps_override: Option<usize>,
    seed: u64,
) -> Result<Array3<f32>> {
    let (h, w) = (blur.shape()[1], blur.shape()[2]);
    let bins = model.hae.cfg.bins;
    let vox = scer(events, bins, h, w)?.data;
    let spec = match steps_override {
        Some(steps) => model.sched_spec.with_steps(steps),
        None => model.sched_spec,
    };
    let sched = spec.build()?;
    let mut rng = TrainRng::seed_from_u64(seed);
    let out = infer_deblur_batch(
        model,
        &stack_images::<f32>(&[blur]),
        &stack_voxels::<f32>(&[&vox]),
        LatentSource::Diffusion(&sched),
        &mut rng,
    )?;
    Ok(unstack_images(&out).remove(0))
}
