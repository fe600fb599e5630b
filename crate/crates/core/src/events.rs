//! Event streams, their text format, fixed-interval binning, and a simple
//! DVS simulator that turns luminance frames into events.
//!
//! Binned tensors are laid out `[T, 2, H, W]`: time, polarity channel
//! (0 = positive, 1 = negative), rows, columns.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Luminance floor added before taking logarithms.
pub const LUMINANCE_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SensorGeometry {
    pub width: usize,
    pub height: usize,
}

impl SensorGeometry {
    pub fn new(width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!("sensor {width}x{height}")));
        }
        Ok(Self { width, height })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    /// Microseconds.
    pub t: u64,
    pub x: u32,
    pub y: u32,
    /// +1 or -1.
    pub p: i8,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EventStream {
    /// Sorted by `t`.
    pub events: Vec<Event>,
    /// Time origin for binning. Bins are counted from here, not from the
    /// first event, so shifting a stream shifts its bins.
    pub t_start: u64,
}

impl EventStream {
    pub fn new(mut events: Vec<Event>) -> Self {
        events.sort_by_key(|e| e.t);
        Self { events, t_start: 0 }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn is_sorted(&self) -> bool {
        self.events.windows(2).all(|w| w[0].t <= w[1].t)
    }
}

/// Parses `t_us,x,y,p` lines (`p` 1 = positive, 0 = negative). Lines starting
/// with `#` and blank lines are skipped.
pub fn parse_events(text: &str, geom: SensorGeometry, path: &Path) -> Result<EventStream> {
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut events = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(err(i + 1, format!("expected 4 fields, got {}", fields.len())));
        }
        let num = |s: &str, what: &str| {
            s.parse::<u64>()
                .map_err(|e| err(i + 1, format!("bad {what} {s:?}: {e}")))
        };
        let (t, x, y) = (num(fields[0], "timestamp")?, num(fields[1], "x")?, num(fields[2], "y")?);
        let p = match fields[3] {
            "1" => 1,
            "0" => -1,
            other => return Err(err(i + 1, format!("bad polarity {other:?}"))),
        };
        if x >= geom.width as u64 || y >= geom.height as u64 {
            return Err(err(
                i + 1,
                format!("coordinate ({x}, {y}) outside {}x{} sensor", geom.width, geom.height),
            ));
        }
        events.push(Event {
            t,
            x: x as u32,
            y: y as u32,
            p,
        });
    }
    Ok(EventStream::new(events))
}

pub fn parse_event_file(path: &Path, geom: SensorGeometry) -> Result<EventStream> {
    let text = fs::read_to_string(path)?;
    parse_events(&text, geom, path)
}

pub fn format_events(stream: &EventStream, header: Option<&str>) -> String {
    let mut out = String::with_capacity(stream.len() * 16);
    if let Some(h) = header {
        for l in h.lines() {
            let _ = writeln!(out, "# {l}");
        }
    }
    for e in &stream.events {
        let _ = writeln!(out, "{},{},{},{}", e.t, e.x, e.y, u8::from(e.p > 0));
    }
    out
}

pub fn write_event_file(path: &Path, stream: &EventStream, header: Option<&str>) -> Result<()> {
    fs::write(path, format_events(stream, header))?;
    Ok(())
}

/// `T` fixed-interval polarity count maps.
#[derive(Debug, Clone, PartialEq)]
pub struct EventTensorSequence {
    /// `[T, 2, H, W]`.
    pub data: Tensor<f32>,
    pub window_us: u64,
    pub t0: u64,
}

/// Counts events per `(bin, polarity, y, x)`. Bin `k = (t - t_start) / window`;
/// events at or after bin `T` are dropped. `clip` saturates each cell.
pub fn bin_events(
    stream: &EventStream,
    steps: usize,
    window_us: u64,
    geom: SensorGeometry,
    clip: Option<f32>,
) -> Result<EventTensorSequence> {
    if steps == 0 || window_us == 0 {
        return Err(Error::InvalidArgument(format!("bin_events with T={steps}, window={window_us}")));
    }
    let (h, w) = (geom.height, geom.width);
    let mut data = Tensor::<f32>::zeros(&[steps, 2, h, w]);
    let d = data.data_mut();
    for e in &stream.events {
        if e.t < stream.t_start || e.x as usize >= w || e.y as usize >= h {
            continue;
        }
        let k = ((e.t - stream.t_start) / window_us) as usize;
        if k >= steps {
            continue;
        }
        let ch = usize::from(e.p < 0);
        d[((k * 2 + ch) * h + e.y as usize) * w + e.x as usize] += 1.0;
    }
    if let Some(c) = clip {
        d.iter_mut().for_each(|v| *v = v.min(c));
    }
    Ok(EventTensorSequence {
        data,
        window_us,
        t0: stream.t_start,
    })
}

/// Per-pixel log-luminance change detector with carry-over of the residual.
/// `frames` are `[N, H, W]`; frame `i` is at `i·frame_dt_us`.
pub fn simulate_dvs(frames: &Tensor<f64>, threshold: f64, frame_dt_us: u64) -> Result<EventStream> {
    if !(threshold > 0.0 && threshold.is_finite()) {
        return Err(Error::InvalidArgument(format!("DVS threshold must be positive, got {threshold}")));
    }
    let s = frames.shape();
    if s.len() != 3 || s[0] < 2 {
        return Err(Error::InvalidArgument(format!("need >= 2 frames [N, H, W], got {s:?}")));
    }
    let (n, h, w) = (s[0], s[1], s[2]);
    let plane = h * w;
    let log = |v: f64| (v + LUMINANCE_FLOOR).ln();
    let mut acc = vec![0.0f64; plane];
    let mut events = Vec::new();
    for i in 1..n {
        let (prev, cur) = (&frames.data()[(i - 1) * plane..i * plane], &frames.data()[i * plane..(i + 1) * plane]);
        let base = (i - 1) as u64 * frame_dt_us;
        let start = events.len();
        for px in 0..plane {
            acc[px] += log(cur[px]) - log(prev[px]);
            let count = (acc[px].abs() / threshold).floor();
            if count < 1.0 {
                continue;
            }
            let sign = acc[px].signum();
            acc[px] -= sign * count * threshold;
            let count = count as u64;
            for j in 0..count {
                events.push(Event {
                    t: base + (j + 1) * frame_dt_us / (count + 1),
                    x: (px % w) as u32,
                    y: (px / w) as u32,
                    p: if sign > 0.0 { 1 } else { -1 },
                });
            }
        }
        events[start..].sort_by_key(|e| e.t);
    }
    Ok(EventStream { events, t_start: 0 })
}
