//! Triplet/deblur sample container and dataset generation.
//!
//! One file per sample: the images (f32, CHW), the event block in the
//! columnar container format, and the normalized ground-truth position.
//! The manifest is a line-delimited index of `relative-path<TAB>split`.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event::{io as event_io, EventStream};
use crate::TrainRng;

use super::{render_frame, simulate_events, SceneConfig};

const MAGIC: &[u8; 4] = b"EDSM";
const VERSION: u32 = 1;

/// A (boundary, ground-truth, boundary) frame triplet with its events.
#[derive(Debug, Clone)]
pub struct TripletSample {
    pub i0: Array3<f32>,
    pub igt: Array3<f32>,
    pub i1: Array3<f32>,
    pub events: EventStream,
    /// Normalized position of the ground-truth frame, strictly in (0, 1).
    pub t_gt: f64,
}

/// A blurry/sharp pair with the events spanning the blur window.
#[derive(Debug, Clone)]
pub struct DeblurSample {
    pub blur: Array3<f32>,
    pub sharp: Array3<f32>,
    pub events: EventStream,
}

#[derive(Debug, Clone)]
pub enum Sample {
    Vfi(TripletSample),
    Deblur(DeblurSample),
}

impl Sample {
    pub fn channels(&self) -> usize {
        match self {
            Sample::Vfi(s) => s.i0.shape()[0],
            Sample::Deblur(s) => s.blur.shape()[0],
        }
    }

    pub fn height(&self) -> usize {
        match self {
            Sample::Vfi(s) => s.i0.shape()[1],
            Sample::Deblur(s) => s.blur.shape()[1],
        }
    }

    pub fn width(&self) -> usize {
        match self {
            Sample::Vfi(s) => s.i0.shape()[2],
            Sample::Deblur(s) => s.blur.shape()[2],
        }
    }
}

fn write_image<W: Write>(w: &mut W, img: &Array3<f32>) -> Result<()> {
    for &v in img.iter() {
        w.write_f32::<LittleEndian>(v)?;
    }
    Ok(())
}

fn read_image<R: Read>(r: &mut R, c: usize, h: usize, w: usize) -> Result<Array3<f32>> {
    let mut data = vec![0f32; c * h * w];
    r.read_f32_into::<LittleEndian>(&mut data)?;
    Array3::from_shape_vec((c, h, w), data)
        .map_err(|e| Error::format(format!("image shape: {e}")))
}

pub fn write_sample<W: Write>(w: &mut W, sample: &Sample) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    let (kind, c, h, wd) = (
        match sample {
            Sample::Vfi(_) => 0u8,
            Sample::Deblur(_) => 1u8,
        },
        sample.channels(),
        sample.height(),
        sample.width(),
    );
    w.write_u8(kind)?;
    w.write_u16::<LittleEndian>(c as u16)?;
    w.write_u16::<LittleEndian>(h as u16)?;
    w.write_u16::<LittleEndian>(wd as u16)?;
    match sample {
        Sample::Vfi(s) => {
            w.write_f64::<LittleEndian>(s.t_gt)?;
            w.write_u8(3)?;
            write_image(w, &s.i0)?;
            write_image(w, &s.igt)?;
            write_image(w, &s.i1)?;
            event_io::write_stream(w, &s.events)?;
        }
        Sample::Deblur(s) => {
            w.write_f64::<LittleEndian>(0.5)?;
            w.write_u8(2)?;
            write_image(w, &s.blur)?;
            write_image(w, &s.sharp)?;
            event_io::write_stream(w, &s.events)?;
        }
    }
    Ok(())
}

pub fn read_sample<R: Read>(r: &mut R) -> Result<Sample> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::format("bad sample magic".to_string()));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(Error::format(format!("unsupported sample version {version}")));
    }
    let kind = r.read_u8()?;
    let c = r.read_u16::<LittleEndian>()? as usize;
    let h = r.read_u16::<LittleEndian>()? as usize;
    let w = r.read_u16::<LittleEndian>()? as usize;
    let t_gt = r.read_f64::<LittleEndian>()?;
    let n_images = r.read_u8()?;
    match (kind, n_images) {
        (0, 3) => {
            let i0 = read_image(r, c, h, w)?;
            let igt = read_image(r, c, h, w)?;
            let i1 = read_image(r, c, h, w)?;
            let events = event_io::read_stream(r)?;
            Ok(Sample::Vfi(TripletSample {
                i0,
                igt,
                i1,
                events,
                t_gt,
            }))
        }
        (1, 2) => {
            let blur = read_image(r, c, h, w)?;
            let sharp = read_image(r, c, h, w)?;
            let events = event_io::read_stream(r)?;
            Ok(Sample::Deblur(DeblurSample {
                blur,
                sharp,
                events,
            }))
        }
        _ => Err(Error::format(format!(
            "inconsistent sample header: kind {kind}, {n_images} images"
        ))),
    }
}

pub fn save_sample(path: &Path, sample: &Sample) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_sample(&mut f, sample)
}

pub fn load_sample(path: &Path) -> Result<Sample> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_sample(&mut f).map_err(|e| Error::format(format!("{}: {e}", path.display())))
}

/// How the ground-truth frame is picked inside each window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InteriorMode {
    Midpoint,
    /// One uniformly random interior frame per window (default).
    #[default]
    Random,
    /// Emit every interior position as its own triplet.
    All,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetOptions {
    pub skips: usize,
    pub interior: InteriorMode,
    pub contrast_threshold: f64,
    /// High-rate simulation render factor relative to the sample frame rate.
    pub highrate_factor: usize,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        DatasetOptions {
            skips: 1,
            interior: InteriorMode::Random,
            contrast_threshold: 0.2,
            highrate_factor: 8,
            val_fraction: 0.2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<(String, String)>, // (relative path, split)
}

impl Manifest {
    pub fn path(&self) -> PathBuf {
        self.root.join("manifest.txt")
    }

    pub fn write(&self) -> Result<()> {
        let mut text = String::new();
        for (p, s) in &self.entries {
            text.push_str(p);
            text.push('\t');
            text.push_str(s);
            text.push('\n');
        }
        std::fs::write(self.path(), text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(path)?;
        let root = path
            .parent()
            .ok_or_else(|| Error::config("manifest has no parent directory".to_string()))?
            .to_path_buf();
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.splitn(2, '\t');
            let rel = parts
                .next()
                .ok_or_else(|| Error::format(format!("manifest line {i}: missing path")))?;
            let split = parts
                .next()
                .ok_or_else(|| Error::format(format!("manifest line {i}: missing split")))?;
            entries.push((rel.to_string(), split.to_string()));
        }
        Ok(Manifest { root, entries })
    }

    pub fn sample_paths(&self, split: Option<&str>) -> Vec<PathBuf> {
        self.entries
            .iter()
            .filter(|(_, s)| split.map(|want| s == want).unwrap_or(true))
            .map(|(p, _)| self.root.join(p))
            .collect()
    }
}

fn highrate_frames(cfg: &SceneConfig, factor: usize) -> Result<Vec<(f64, Array3<f32>)>> {
    let rate = cfg.frame_rate * factor as f64;
    let n = (cfg.duration * rate).round() as usize + 1;
    (0..n)
        .map(|i| {
            let t = (i as f64 / rate).min(cfg.duration);
            Ok((t, render_frame(cfg, t)?))
        })
        .collect()
}

/// Generates interpolation triplets: boundary frames `skips + 1` sample
/// frames apart, ground truth at an interior frame, events simulated from
/// the high-rate render and sliced to the window.
pub fn make_dataset(
    cfgs: &[SceneConfig],
    out_dir: &Path,
    opts: &DatasetOptions,
) -> Result<Manifest> {
    if opts.skips < 1 {
        return Err(Error::domain(format!(
            "skips must be >= 1, got {}",
            opts.skips
        )));
    }
    let samples_dir = out_dir.join("samples");
    std::fs::create_dir_all(&samples_dir)?;
    let mut rng = TrainRng::seed_from_u64(opts.seed);
    let mut all: Vec<Sample> = Vec::new();

    for (ci, cfg) in cfgs.iter().enumerate() {
        cfg.validate()?;
        let n_frames = cfg.frame_count();
        let window = opts.skips + 1;
        if n_frames < window + 1 {
            return Err(Error::domain(format!(
                "config {ci}: {n_frames} frames cannot support skips={} (needs {})",
                opts.skips,
                window + 1
            )));
        }
        let hi = highrate_frames(cfg, opts.highrate_factor)?;
        let stream = simulate_events(
            &hi,
            opts.contrast_threshold,
            cfg.width as u16,
            cfg.height as u16,
        )?;
        let frame_t = |i: usize| i as f64 / cfg.frame_rate;
        let frames: Vec<Array3<f32>> = (0..n_frames)
            .map(|i| render_frame(cfg, frame_t(i).min(cfg.duration)))
            .collect::<Result<_>>()?;

        for start in 0..(n_frames - window) {
            let end = start + window;
            let interiors: Vec<usize> = match opts.interior {
                InteriorMode::Midpoint => vec![start + window / 2],
                InteriorMode::Random => vec![rng.random_range(start + 1..end)],
                InteriorMode::All => (start + 1..end).collect(),
            };
            for gt in interiors {
                let t0 = frame_t(start);
                let t1 = frame_t(end).min(cfg.duration);
                let events = stream.slice_window(t0, t1)?;
                let t_gt = (frame_t(gt) - t0) / (t1 - t0);
                all.push(Sample::Vfi(TripletSample {
                    i0: frames[start].clone(),
                    igt: frames[gt].clone(),
                    i1: frames[end].clone(),
                    events,
                    t_gt,
                }));
            }
        }
    }
    write_samples(out_dir, all, opts.val_fraction)
}

/// Generates deblur pairs: the blurry frame is the average of a window of
/// high-rate frames, the sharp target its center frame, the events the
/// window's slice of the simulated stream.
pub fn make_deblur_dataset(
    cfgs: &[SceneConfig],
    out_dir: &Path,
    opts: &DatasetOptions,
    blur_frames: usize,
) -> Result<Manifest> {
    if blur_frames < 2 {
        return Err(Error::domain("blur window needs at least 2 frames".to_string()));
    }
    let samples_dir = out_dir.join("samples");
    std::fs::create_dir_all(&samples_dir)?;
    let mut all: Vec<Sample> = Vec::new();
    for cfg in cfgs {
        cfg.validate()?;
        let hi = highrate_frames(cfg, opts.highrate_factor)?;
        let stream = simulate_events(
            &hi,
            opts.contrast_threshold,
            cfg.width as u16,
            cfg.height as u16,
        )?;
        let mut start = 0usize;
        while start + blur_frames <= hi.len() {
            let mut acc = hi[start].1.clone();
            for (_, f) in &hi[start + 1..start + blur_frames] {
                acc += f;
            }
            acc.mapv_inplace(|v| v / blur_frames as f32);
            let sharp = hi[start + blur_frames / 2].1.clone();
            let events = stream.slice_window(hi[start].0, hi[start + blur_frames - 1].0)?;
            all.push(Sample::Deblur(DeblurSample {
                blur: acc,
                sharp,
                events,
            }));
            start += blur_frames;
        }
    }
    write_samples(out_dir, all, opts.val_fraction)
}

fn write_samples(out_dir: &Path, all: Vec<Sample>, val_fraction: f64) -> Result<Manifest> {
    if all.is_empty() {
        return Err(Error::domain("dataset would be empty".to_string()));
    }
    let n_val = ((all.len() as f64) * val_fraction).round() as usize;
    let n_train = all.len() - n_val;
    let mut entries = Vec::new();
    for (i, sample) in all.iter().enumerate() {
        let rel = format!("samples/s{i:05}.smp");
        save_sample(&out_dir.join(&rel), sample)?;
        let split = if i < n_train { "train" } else { "val" };
        entries.push((rel, split.to_string()));
    }
    let manifest = Manifest {
        root: out_dir.to_path_buf(),
        entries,
    };
    manifest.write()?;
    Ok(manifest)
}
