//! Loads manifest samples into training-ready tensors: split + voxelized
//! event halves for interpolation, SCER voxels for deblurring.

use ndarray::{Array3, Array4, ArrayD, IxDyn};
use rand::Rng;

use crate::error::{Error, Result};
use crate::event::{scer, split_events, voxelize, SplitPolicy};
use crate::nn::{Scalar, Tensor};
use crate::synth::dataset::{load_sample, Manifest, Sample};
use crate::TrainRng;

/// One interpolation sample with its precomputed conditioning voxels.
pub struct VfiItem {
    pub i0: Array3<f32>,
    pub igt: Array3<f32>,
    pub i1: Array3<f32>,
    pub vox0: Array4<f32>, // (bins, 2, H, W)
    pub vox1: Array4<f32>,
    pub t_gt: f64,
}

pub struct DeblurItem {
    pub blur: Array3<f32>,
    pub sharp: Array3<f32>,
    pub vox: Array4<f32>, // SCER (bins, 2, H, W)
}

pub struct VfiSet {
    pub items: Vec<VfiItem>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub bins: usize,
}

pub struct DeblurSet {
    pub items: Vec<DeblurItem>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub bins: usize,
}

fn crop_images(img: &Array3<f32>, y0: usize, x0: usize, size: usize) -> Array3<f32> {
    img.slice(ndarray::s![.., y0..y0 + size, x0..x0 + size])
        .to_owned()
}

fn prepare_vfi(
    s: &crate::synth::dataset::TripletSample,
    bins: usize,
    crop: usize,
    rng: &mut TrainRng,
) -> Result<VfiItem> {
    let (h, w) = (s.i0.shape()[1], s.i0.shape()[2]);
    if crop > h || crop > w {
        return Err(Error::config(format!(
            "crop {crop} exceeds sample resolution {h}x{w}"
        )));
    }
    let (events, i0, igt, i1, ch, cw) = if crop < h || crop < w {
        let y0 = rng.random_range(0..=h - crop);
        let x0 = rng.random_range(0..=w - crop);
        (
            s.events.crop(x0 as u16, y0 as u16, crop as u16, crop as u16)?,
            crop_images(&s.i0, y0, x0, crop),
            crop_images(&s.igt, y0, x0, crop),
            crop_images(&s.i1, y0, x0, crop),
            crop,
            crop,
        )
    } else {
        (
            s.events.clone(),
            s.i0.clone(),
            s.igt.clone(),
            s.i1.clone(),
            h,
            w,
        )
    };
    let t_abs = events.t_start + s.t_gt * events.duration();
    let (e0, e1) = split_events(&events, t_abs, SplitPolicy::Drop)?;
    let vox0 = voxelize(&e0, bins, ch, cw)?.data;
    let vox1 = voxelize(&e1, bins, ch, cw)?.data;
    Ok(VfiItem {
        i0,
        igt,
        i1,
        vox0,
        vox1,
        t_gt: s.t_gt,
    })
}

/// Load a manifest split into memory, splitting and voxelizing events once.
pub fn load_vfi_set(
    manifest: &Manifest,
    split: Option<&str>,
    bins: usize,
    crop: usize,
    seed: u64,
) -> Result<VfiSet> {
    use rand::SeedableRng;
    let mut rng = TrainRng::seed_from_u64(seed);
    let mut items = Vec::new();
    for path in manifest.sample_paths(split) {
        match load_sample(&path)? {
            Sample::Vfi(s) => items.push(prepare_vfi(&s, bins, crop, &mut rng)?),
            Sample::Deblur(_) => {
                return Err(Error::config(format!(
                    "{}: deblur sample in an interpolation manifest",
                    path.display()
                )))
            }
        }
    }
    if items.is_empty() {
        return Err(Error::config(format!(
            "no samples for split {:?} in {}",
            split,
            manifest.path().display()
        )));
    }
    let shape = items[0].i0.shape().to_vec();
    Ok(VfiSet {
        channels: shape[0],
        height: shape[1],
        width: shape[2],
        bins,
        items,
    })
}

pub fn load_deblur_set(
    manifest: &Manifest,
    split: Option<&str>,
    bins: usize,
) -> Result<DeblurSet> {
    if bins % 2 == 0 {
        return Err(Error::config(format!(
            "deblurring uses SCER voxels, which need an odd bin count (got {bins})"
        )));
    }
    let mut items = Vec::new();
    for path in manifest.sample_paths(split) {
        match load_sample(&path)? {
            Sample::Deblur(s) => {
                let (h, w) = (s.blur.shape()[1], s.blur.shape()[2]);
                let vox = scer(&s.events, bins, h, w)?.data;
                items.push(DeblurItem {
                    blur: s.blur,
                    sharp: s.sharp,
                    vox,
                });
            }
            Sample::Vfi(_) => {
                return Err(Error::config(format!(
                    "{}: interpolation sample in a deblur manifest",
                    path.display()
                )))
            }
        }
    }
    if items.is_empty() {
        return Err(Error::config("no deblur samples in manifest".to_string()));
    }
    let shape = items[0].blur.shape().to_vec();
    Ok(DeblurSet {
        channels: shape[0],
        height: shape[1],
        width: shape[2],
        bins,
        items,
    })
}

/// Stack per-sample CHW images into an `(N, C, H, W)` tensor.
pub fn stack_images<S: Scalar>(images: &[&Array3<f32>]) -> Tensor<S> {
    let (c, h, w) = (
        images[0].shape()[0],
        images[0].shape()[1],
        images[0].shape()[2],
    );
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        data.extend(img.iter().map(|&v| S::from_f64(v as f64)));
    }
    Tensor::from_array(
        ArrayD::from_shape_vec(IxDyn(&[images.len(), c, h, w]), data).unwrap(),
    )
}

/// Stack per-sample voxel grids into an `(N, bins, 2, H, W)` tensor.
pub fn stack_voxels<S: Scalar>(voxels: &[&Array4<f32>]) -> Tensor<S> {
    let sh = voxels[0].shape().to_vec();
    let mut data = Vec::with_capacity(voxels.len() * voxels[0].len());
    for v in voxels {
        data.extend(v.iter().map(|&x| S::from_f64(x as f64)));
    }
    Tensor::from_array(
        ArrayD::from_shape_vec(
            IxDyn(&[voxels.len(), sh[0], sh[1], sh[2], sh[3]]),
            data,
        )
        .unwrap(),
    )
}

/// `(N, bins, 2, H, W)` all-zero voxel batch (the padded ground-truth pair).
pub fn zero_voxels<S: Scalar>(n: usize, bins: usize, h: usize, w: usize) -> Tensor<S> {
    Tensor::zeros(&[n, bins, 2, h, w])
}

/// First channel-plane batch of a tensor back to per-sample CHW arrays.
pub fn unstack_images(t: &Tensor<f32>) -> Vec<Array3<f32>> {
    let v = t.to_array();
    let s = v.shape().to_vec();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let flat = v.as_slice().unwrap();
    (0..n)
        .map(|i| {
            Array3::from_shape_vec(
                (c, h, w),
                flat[i * c * h * w..(i + 1) * c * h * w].to_vec(),
            )
            .unwrap()
        })
        .collect()
}

/// Deterministic with-replacement batch sampler.
pub fn sample_batch_indices(rng: &mut TrainRng, n: usize, batch: usize) -> Vec<usize> {
    (0..batch).map(|_| rng.random_range(0..n)).collect()
}
