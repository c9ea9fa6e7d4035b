//! Deterministic toy scenes plus a minimal contrast-threshold event
//! simulator, so the whole pipeline runs at desk scale without external
//! datasets.

pub mod dataset;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event::{Event, EventStream};
use crate::TrainRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Square,
    Disk,
    Bar,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    /// Characteristic size in pixels (side / diameter / bar length).
    pub size: f64,
    /// Velocity in pixels per second.
    pub velocity: (f64, f64),
    /// Intensity in [0, 1].
    pub intensity: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub shapes: Vec<ShapeSpec>,
    pub background: f64,
    pub duration: f64,
    pub frame_rate: f64,
    pub seed: u64,
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height % 32 != 0 || self.width % 32 != 0 {
            return Err(Error::domain(format!(
                "scene resolution {}x{} must be a multiple of 32",
                self.height, self.width
            )));
        }
        if self.frame_rate * self.duration < 3.0 {
            return Err(Error::domain(
                "scene too short: frame_rate * duration must be >= 3".to_string(),
            ));
        }
        if !(0.0..=1.0).contains(&self.background) {
            return Err(Error::domain("background intensity outside [0,1]".to_string()));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::domain("channels must be 1 or 3".to_string()));
        }
        Ok(())
    }

    /// Number of frames at the sample rate (inclusive endpoints).
    pub fn frame_count(&self) -> usize {
        (self.duration * self.frame_rate).round() as usize + 1
    }

    fn initial_positions(&self) -> Vec<(f64, f64)> {
        let mut rng = TrainRng::seed_from_u64(self.seed);
        self.shapes
            .iter()
            .map(|_| {
                (
                    rng.random_range(0.0..self.width as f64),
                    rng.random_range(0.0..self.height as f64),
                )
            })
            .collect()
    }

    fn channel_intensities(&self) -> Vec<Vec<f64>> {
        let mut rng = TrainRng::seed_from_u64(self.seed.wrapping_add(1));
        self.shapes
            .iter()
            .map(|s| {
                if self.channels == 1 {
                    vec![s.intensity]
                } else {
                    (0..self.channels)
                        .map(|_| (s.intensity * rng.random_range(0.6..1.0)).clamp(0.0, 1.0))
                        .collect()
                }
            })
            .collect()
    }
}

fn box_coverage(dx: f64, dy: f64, half_x: f64, half_y: f64) -> f64 {
    let cx = (half_x - dx.abs() + 0.5).clamp(0.0, 1.0);
    let cy = (half_y - dy.abs() + 0.5).clamp(0.0, 1.0);
    cx * cy
}

fn coverage(kind: ShapeKind, size: f64, dx: f64, dy: f64) -> f64 {
    match kind {
        ShapeKind::Square => box_coverage(dx, dy, size / 2.0, size / 2.0),
        ShapeKind::Disk => {
            let r = size / 2.0;
            let d = (dx * dx + dy * dy).sqrt();
            (r - d + 0.5).clamp(0.0, 1.0)
        }
        ShapeKind::Bar => box_coverage(dx, dy, size / 2.0, size / 6.0),
    }
}

/// Renders the scene at an absolute time. Deterministic in `(cfg, time)`;
/// shape edges are anti-aliased so sub-pixel motion produces smooth
/// intensity change. Shapes wrap around the frame toroidally.
pub fn render_frame(cfg: &SceneConfig, time: f64) -> Result<Array3<f32>> {
    cfg.validate()?;
    if time < 0.0 || time > cfg.duration + 1e-9 {
        return Err(Error::domain(format!(
            "render time {time} outside [0, {}]",
            cfg.duration
        )));
    }
    let (h, w, c) = (cfg.height, cfg.width, cfg.channels);
    let mut img = Array3::<f32>::from_elem((c, h, w), cfg.background as f32);
    let positions = cfg.initial_positions();
    let intensities = cfg.channel_intensities();

    for (si, shape) in cfg.shapes.iter().enumerate() {
        let cx = positions[si].0 + shape.velocity.0 * time;
        let cy = positions[si].1 + shape.velocity.1 * time;
        // wrap into [0, w) x [0, h)
        let cx = cx.rem_euclid(w as f64);
        let cy = cy.rem_euclid(h as f64);
        let reach = shape.size / 2.0 + 1.0;
        for y in 0..h {
            for x in 0..w {
                // toroidal distance
                let mut dx = x as f64 - cx;
                let mut dy = y as f64 - cy;
                dx -= (dx / w as f64).round() * w as f64;
                dy -= (dy / h as f64).round() * h as f64;
                if dx.abs() > reach || dy.abs() > reach {
                    continue;
                }
                let cov = coverage(shape.kind, shape.size, dx, dy);
                if cov > 0.0 {
                    for ch in 0..c {
                        let v = img[(ch, y, x)] as f64;
                        img[(ch, y, x)] =
                            (v * (1.0 - cov) + intensities[si][ch] * cov) as f32;
                    }
                }
            }
        }
    }
    Ok(img)
}

fn log_luminance(img: &Array3<f32>, y: usize, x: usize) -> f64 {
    let c = img.shape()[0];
    let mut acc = 0.0f64;
    for ch in 0..c {
        acc += img[(ch, y, x)] as f64;
    }
    (acc / c as f64 + 1e-3).ln()
}

/// Contrast-threshold event simulation over a timed frame sequence.
///
/// Per pixel a log-intensity reference tracks the last event level; each
/// time the log intensity moves a further `threshold` from the reference an
/// event is emitted with its timestamp linearly interpolated inside the
/// inter-frame interval. The essential ESIM mechanism without its noise and
/// refractory models.
pub fn simulate_events(
    frames: &[(f64, Array3<f32>)],
    threshold: f64,
    width: u16,
    height: u16,
) -> Result<EventStream> {
    if threshold <= 0.0 {
        return Err(Error::domain(format!(
            "contrast threshold must be positive, got {threshold}"
        )));
    }
    if frames.len() < 2 {
        return Err(Error::domain(
            "event simulation needs at least two frames".to_string(),
        ));
    }
    let (h, w) = (height as usize, width as usize);
    let mut reference = vec![0.0f64; h * w];
    let mut prev_log = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            let l = log_luminance(&frames[0].1, y, x);
            reference[y * w + x] = l;
            prev_log[y * w + x] = l;
        }
    }
    let mut events: Vec<Event> = Vec::new();
    let mut prev_t = frames[0].0;
    for (t, img) in frames.iter().skip(1) {
        let dt = t - prev_t;
        for y in 0..h {
            for x in 0..w {
                let idx = y * w + x;
                let l = log_luminance(img, y, x);
                let l0 = prev_log[idx];
                loop {
                    let delta = l - reference[idx];
                    if delta >= threshold {
                        reference[idx] += threshold;
                        let frac = if (l - l0).abs() > 1e-12 {
                            ((reference[idx] - l0) / (l - l0)).clamp(0.0, 1.0)
                        } else {
                            1.0
                        };
                        events.push(Event {
                            x: x as u16,
                            y: y as u16,
                            polarity: 1,
                            t: prev_t + frac * dt,
                        });
                    } else if delta <= -threshold {
                        reference[idx] -= threshold;
                        let frac = if (l - l0).abs() > 1e-12 {
                            ((reference[idx] - l0) / (l - l0)).clamp(0.0, 1.0)
                        } else {
                            1.0
                        };
                        events.push(Event {
                            x: x as u16,
                            y: y as u16,
                            polarity: -1,
                            t: prev_t + frac * dt,
                        });
                    } else {
                        break;
                    }
                }
                prev_log[idx] = l;
            }
        }
        prev_t = *t;
    }
    events.sort_by(|a, b| a.t.partial_cmp(&b.t).unwrap());
    EventStream::new(events, frames[0].0, prev_t, width, height)
}
