//! Event-stream data model: temporal splitting with polarity reversal,
//! voxel-grid rasterization, and the symmetric cumulative (SCER) variant
//! used by the deblurring task.

pub mod io;

use ndarray::{Array4, ArrayView2};

use crate::error::{Error, Result};

/// A single DVS event.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    /// Pixel column.
    pub x: u16,
    /// Pixel row.
    pub y: u16,
    /// Sign of the brightness change: -1 or +1.
    pub polarity: i8,
    /// Seconds.
    pub t: f64,
}

/// An ordered set of events over a closed time window on a fixed sensor.
#[derive(Debug, Clone, PartialEq)]
pub struct EventStream {
    events: Vec<Event>,
    pub t_start: f64,
    pub t_end: f64,
    pub width: u16,
    pub height: u16,
}

/// What `split_events` does with events falling exactly on the split time.
/// The defining inequalities are strict, so the default drops them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SplitPolicy {
    #[default]
    Drop,
    /// Dataset-compat mode: ties go to the earlier half (unnegated).
    AssignLeft,
}

impl EventStream {
    /// Validates ordering, window membership, polarity and sensor bounds.
    pub fn new(
        events: Vec<Event>,
        t_start: f64,
        t_end: f64,
        width: u16,
        height: u16,
    ) -> Result<Self> {
        if !(t_start <= t_end) {
            return Err(Error::domain(format!(
                "window start {t_start} must not exceed end {t_end}"
            )));
        }
        let mut prev = f64::NEG_INFINITY;
        for (i, e) in events.iter().enumerate() {
            if e.polarity != -1 && e.polarity != 1 {
                return Err(Error::domain(format!(
                    "event {i}: polarity {} not in {{-1, +1}}",
                    e.polarity
                )));
            }
            if e.x >= width || e.y >= height {
                return Err(Error::domain(format!(
                    "event {i}: ({}, {}) outside {}x{} sensor",
                    e.x, e.y, width, height
                )));
            }
            if e.t < t_start || e.t > t_end {
                return Err(Error::domain(format!(
                    "event {i}: timestamp {} outside window [{t_start}, {t_end}]",
                    e.t
                )));
            }
            if e.t < prev {
                return Err(Error::domain(format!(
                    "event {i}: timestamps not sorted ({} after {prev})",
                    e.t
                )));
            }
            prev = e.t;
        }
        Ok(EventStream {
            events,
            t_start,
            t_end,
            width,
            height,
        })
    }

    /// The padded ground-truth stream: no events, a degenerate window.
    pub fn empty(width: u16, height: u16, t_start: f64, t_end: f64) -> Self {
        EventStream {
            events: Vec::new(),
            t_start,
            t_end,
            width,
            height,
        }
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.t_end - self.t_start
    }

    /// Restrict to events inside `[t0, t1]`, rebasing the window.
    pub fn slice_window(&self, t0: f64, t1: f64) -> Result<EventStream> {
        if t0 < self.t_start || t1 > self.t_end || t0 > t1 {
            return Err(Error::domain(format!(
                "slice [{t0}, {t1}] outside stream window [{}, {}]",
                self.t_start, self.t_end
            )));
        }
        let events = self
            .events
            .iter()
            .filter(|e| e.t >= t0 && e.t <= t1)
            .copied()
            .collect();
        EventStream::new(events, t0, t1, self.width, self.height)
    }

    /// Crop to a spatial window, shifting coordinates to the new origin.
    pub fn crop(&self, x0: u16, y0: u16, width: u16, height: u16) -> Result<EventStream> {
        if x0 as usize + width as usize > self.width as usize
            || y0 as usize + height as usize > self.height as usize
        {
            return Err(Error::domain("crop window exceeds sensor".to_string()));
        }
        let events = self
            .events
            .iter()
            .filter(|e| e.x >= x0 && e.x < x0 + width && e.y >= y0 && e.y < y0 + height)
            .map(|e| Event {
                x: e.x - x0,
                y: e.y - y0,
                ..*e
            })
            .collect();
        EventStream::new(events, self.t_start, self.t_end, width, height)
    }
}

/// Splits a stream at time `t` into the two conditioning halves.
///
/// The first half keeps events strictly before `t` unchanged; the second
/// keeps events strictly after `t` with polarity negated (they are replayed
/// backwards towards `t`). Events exactly at `t` follow `policy`.
pub fn split_events(
    stream: &EventStream,
    t: f64,
    policy: SplitPolicy,
) -> Result<(EventStream, EventStream)> {
    if t < stream.t_start || t > stream.t_end {
        return Err(Error::domain(format!(
            "split time {t} outside window [{}, {}]",
            stream.t_start, stream.t_end
        )));
    }
    let mut before = Vec::new();
    let mut after = Vec::new();
    for e in &stream.events {
        if e.t < t || (e.t == t && policy == SplitPolicy::AssignLeft) {
            before.push(*e);
        } else if e.t > t {
            after.push(Event {
                polarity: -e.polarity,
                ..*e
            });
        }
    }
    let first = EventStream::new(before, stream.t_start, t, stream.width, stream.height)?;
    let second = EventStream::new(after, t, stream.t_end, stream.width, stream.height)?;
    Ok((first, second))
}

/// Dense rasterization of an event stream.
///
/// `data` has shape `(bins, 2, H, W)`. For the `Standard` kind each event
/// adds 1 to exactly one cell (channel 0 for polarity -1, channel 1 for +1).
/// For `Scer` the channels carry the magnitudes of the negative and positive
/// parts of the signed cumulative count; `signed_slice` recombines them.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub data: Array4<f32>,
    pub kind: VoxelKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VoxelKind {
    Standard,
    Scer,
}

impl VoxelGrid {
    pub fn bins(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[3]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    /// Signed per-pixel value of bin `i`: positive channel minus negative.
    pub fn signed_slice(&self, bin: usize) -> ndarray::Array2<f32> {
        let pos: ArrayView2<f32> = self.data.index_axis(ndarray::Axis(0), bin).index_axis_move(ndarray::Axis(0), 1);
        let neg: ArrayView2<f32> = self.data.index_axis(ndarray::Axis(0), bin).index_axis_move(ndarray::Axis(0), 0);
        &pos - &neg
    }

    /// Divide by the max-magnitude entry (training-stability option).
    pub fn normalize_max(&mut self) {
        let mx = self.data.iter().fold(0.0f32, |a, &v| a.max(v.abs()));
        if mx > 0.0 {
            self.data.mapv_inplace(|v| v / mx);
        }
    }
}

fn check_fits(stream: &EventStream, h: usize, w: usize) -> Result<()> {
    for e in stream.events() {
        if (e.x as usize) >= w || (e.y as usize) >= h {
            return Err(Error::domain(format!(
                "event at ({}, {}) outside {h}x{w} raster",
                e.x, e.y
            )));
        }
    }
    Ok(())
}

/// Standard event voxel grid: each event increments cell
/// `(bin(t), polarity, y, x)` by one, with bins spanning the stream window.
///
/// `t = t_end` clamps to the last bin so every event stays representable;
/// a zero-duration window maps everything to bin 0.
pub fn voxelize(stream: &EventStream, bins: usize, h: usize, w: usize) -> Result<VoxelGrid> {
    if bins == 0 {
        return Err(Error::domain("bins must be >= 1".to_string()));
    }
    check_fits(stream, h, w)?;
    let mut data = Array4::<f32>::zeros((bins, 2, h, w));
    let duration = stream.duration();
    for e in stream.events() {
        let bin = if duration <= 0.0 {
            0
        } else {
            let raw = (bins as f64 * (e.t - stream.t_start) / duration).floor() as usize;
            raw.min(bins - 1)
        };
        let pol = if e.polarity > 0 { 1 } else { 0 };
        data[(bin, pol, e.y as usize, e.x as usize)] += 1.0;
    }
    Ok(VoxelGrid {
        data,
        kind: VoxelKind::Standard,
    })
}

/// Bin index an event timestamp maps to under `voxelize`.
pub fn voxel_bin(t: f64, t_start: f64, t_end: f64, bins: usize) -> usize {
    let duration = t_end - t_start;
    if duration <= 0.0 {
        return 0;
    }
    ((bins as f64 * (t - t_start) / duration).floor() as usize).min(bins - 1)
}

/// Symmetric cumulative event representation.
///
/// Requires an odd bin count so a central reference slice exists. Slice `i`
/// integrates signed polarity counts from the temporal midpoint of the
/// window outward to the sub-window edge: later events with native polarity
/// for forward slices, earlier events with negated polarity for backward
/// slices. The center slice is identically zero.
pub fn scer(stream: &EventStream, bins: usize, h: usize, w: usize) -> Result<VoxelGrid> {
    if bins % 2 == 0 || bins == 0 {
        return Err(Error::domain(format!(
            "SCER needs an odd bin count, got {bins}"
        )));
    }
    check_fits(stream, h, w)?;
    let mut data = Array4::<f32>::zeros((bins, 2, h, w));
    let center = (bins - 1) / 2;
    let t0 = stream.t_start;
    let dt = stream.duration() / bins as f64;
    let mid = 0.5 * (stream.t_start + stream.t_end);
    for e in stream.events() {
        let (y, x) = (e.y as usize, e.x as usize);
        if e.t > mid {
            // contributes +p to every forward slice whose edge is at or past t
            for i in (center + 1)..bins {
                let edge = t0 + (i as f64 + 1.0) * dt;
                let covered = if i == bins - 1 { true } else { e.t <= edge };
                if covered {
                    let s = e.polarity as f32;
                    if s > 0.0 {
                        data[(i, 1, y, x)] += s;
                    } else {
                        data[(i, 0, y, x)] += -s;
                    }
                }
            }
        } else if e.t < mid {
            // contributes -p to every backward slice reaching back to t
            for i in 0..center {
                let edge = t0 + i as f64 * dt;
                let covered = if i == 0 { true } else { e.t >= edge };
                if covered {
                    let s = -(e.polarity as f32);
                    if s > 0.0 {
                        data[(i, 1, y, x)] += s;
                    } else {
                        data[(i, 0, y, x)] += -s;
                    }
                }
            }
        }
        // events exactly at the midpoint belong to the zero reference slice
    }
    Ok(VoxelGrid {
        data,
        kind: VoxelKind::Scer,
    })
}
