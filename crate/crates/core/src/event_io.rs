//! Event ingestion: the text event format, fixed-time windowing and a
//! synthetic arm-plus-palm event generator used as a test fixture.
//!
//! Text format: one event per line as `t,x,y,p` (decimal integers, `t` in
//! microseconds, `p` in {0,1}). Lines starting with `#` are comments, except
//! `# geometry WxH` which overrides the sensor geometry for the file.

use std::fmt::Write as _;
use std::ops::Range;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::roi::WristLoc;

/// Brightness-change direction of an event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Polarity {
    /// `p = 0`: the pixel got dimmer.
    Off,
    /// `p = 1`: the pixel got brighter.
    On,
}

impl Polarity {
    pub fn from_bit(p: u8) -> Option<Self> {
        match p {
            0 => Some(Polarity::Off),
            1 => Some(Polarity::On),
            _ => None,
        }
    }

    pub fn bit(self) -> u8 {
        match self {
            Polarity::Off => 0,
            Polarity::On => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Event {
    /// Timestamp in microseconds.
    pub t: u64,
    pub x: u16,
    pub y: u16,
    pub p: Polarity,
}

impl Event {
    pub fn new(t: u64, x: u16, y: u16, p: Polarity) -> Self {
        Self { t, x, y, p }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SensorGeometry {
    pub width: u32,
    pub height: u32,
}

impl SensorGeometry {
    /// DAVIS346 resolution.
    pub const DAVIS346: SensorGeometry = SensorGeometry {
        width: 346,
        height: 260,
    };

    pub fn new(width: u32, height: u32) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Param(format!(
                "sensor geometry must be at least 1x1, got {width}x{height}"
            )));
        }
        if width > u16::MAX as u32 + 1 || height > u16::MAX as u32 + 1 {
            return Err(Error::Param(format!(
                "sensor geometry {width}x{height} exceeds 16-bit coordinates"
            )));
        }
        Ok(Self { width, height })
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        x < self.width && y < self.height
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

impl Default for SensorGeometry {
    fn default() -> Self {
        Self::DAVIS346
    }
}

/// A validated, timestamp-ordered event stream.
#[derive(Debug, Clone, PartialEq)]
pub struct EventSource {
    pub geometry: SensorGeometry,
    pub events: Vec<Event>,
}

impl EventSource {
    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }
}

/// A fixed-time window of events ending at `t0`.
///
/// Bins share the underlying event storage, so slicing a long stream into
/// heavily overlapping windows does not copy events.
#[derive(Debug, Clone)]
pub struct EventBin {
    storage: Arc<[Event]>,
    range: Range<usize>,
    t0: u64,
    geometry: SensorGeometry,
}

impl EventBin {
    /// Builds a bin from owned events, checking ordering, geometry and that
    /// no event is newer than `t0`.
    pub fn new(events: Vec<Event>, t0: u64, geometry: SensorGeometry) -> Result<Self> {
        let mut prev = 0u64;
        for (i, e) in events.iter().enumerate() {
            if e.t < prev {
                return Err(Error::Order {
                    line: i + 1,
                    t: e.t,
                    prev,
                });
            }
            prev = e.t;
            if e.t > t0 {
                return Err(Error::Param(format!(
                    "event {i} at t={} is newer than bin end {t0}",
                    e.t
                )));
            }
            if !geometry.contains(e.x as u32, e.y as u32) {
                return Err(Error::Range {
                    line: i + 1,
                    msg: format!(
                        "({}, {}) outside {}x{}",
                        e.x, e.y, geometry.width, geometry.height
                    ),
                });
            }
        }
        let len = events.len();
        Ok(Self {
            storage: events.into(),
            range: 0..len,
            t0,
            geometry,
        })
    }

    pub fn empty(t0: u64, geometry: SensorGeometry) -> Self {
        Self {
            storage: Arc::from(Vec::new()),
            range: 0..0,
            t0,
            geometry,
        }
    }

    pub fn events(&self) -> &[Event] {
        &self.storage[self.range.clone()]
    }

    pub fn t0(&self) -> u64 {
        self.t0
    }

    pub fn geometry(&self) -> SensorGeometry {
        self.geometry
    }

    pub fn len(&self) -> usize {
        self.range.len()
    }

    pub fn is_empty(&self) -> bool {
        self.range.is_empty()
    }
}

/// Window length and stride for fixed-time binning, both in microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BinSpec {
    pub window_us: u64,
    pub stride_us: u64,
    /// Origin of the bin grid; bin `k` ends at `t_start + k * stride_us`.
    pub t_start: u64,
}

impl BinSpec {
    pub fn new(window_us: u64, stride_us: u64) -> Result<Self> {
        let spec = Self {
            window_us,
            stride_us,
            t_start: 0,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_start(mut self, t_start: u64) -> Self {
        self.t_start = t_start;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_us == 0 {
            return Err(Error::Param("bin window must be positive".into()));
        }
        if self.stride_us == 0 || self.stride_us > self.window_us {
            return Err(Error::Param(format!(
                "bin stride must satisfy 0 < stride <= window, got stride {} window {}",
                self.stride_us, self.window_us
            )));
        }
        Ok(())
    }
}

impl Default for BinSpec {
    /// 100 ms windows advanced every 1 ms.
    fn default() -> Self {
        Self {
            window_us: 100_000,
            stride_us: 1_000,
            t_start: 0,
        }
    }
}

fn parse_geometry_header(rest: &str, line: usize) -> Result<Option<SensorGeometry>> {
    let Some(dims) = rest.trim().strip_prefix("geometry") else {
        return Ok(None);
    };
    let dims = dims.trim();
    let (w, h) = dims.split_once(['x', 'X']).ok_or_else(|| Error::Parse {
        line,
        msg: format!("malformed geometry header `{dims}`"),
    })?;
    let parse = |s: &str| {
        s.trim().parse::<u32>().map_err(|_| Error::Parse {
            line,
            msg: format!("malformed geometry header `{dims}`"),
        })
    };
    let geometry = SensorGeometry::new(parse(w)?, parse(h)?).map_err(|e| Error::Parse {
        line,
        msg: e.to_string(),
    })?;
    Ok(Some(geometry))
}

fn parse_field<T: std::str::FromStr>(field: Option<&str>, name: &str, line: usize) -> Result<T> {
    let raw = field.ok_or_else(|| Error::Parse {
        line,
        msg: format!("missing field `{name}`"),
    })?;
    raw.trim().parse::<T>().map_err(|_| Error::Parse {
        line,
        msg: format!(
            "field `{name}` is not a non-negative integer: `{}`",
            raw.trim()
        ),
    })
}

/// Parses the text event format. A `# geometry WxH` header overrides
/// `geometry`; it must appear before the first event.
pub fn parse_events(text: &str, geometry: SensorGeometry) -> Result<EventSource> {
    let mut geometry = geometry;
    let mut events = Vec::new();
    let mut prev_t: Option<u64> = None;

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() {
            continue;
        }
        if let Some(comment) = trimmed.strip_prefix('#') {
            if let Some(g) = parse_geometry_header(comment, line)? {
                if !events.is_empty() {
                    return Err(Error::Parse {
                        line,
                        msg: "geometry header after first event".into(),
                    });
                }
                geometry = g;
            }
            continue;
        }

        let mut fields = trimmed.split(',');
        let t: u64 = parse_field(fields.next(), "t", line)?;
        let x: u32 = parse_field(fields.next(), "x", line)?;
        let y: u32 = parse_field(fields.next(), "y", line)?;
        let p: u8 = parse_field(fields.next(), "p", line)?;
        if fields.next().is_some() {
            return Err(Error::Parse {
                line,
                msg: "expected exactly four fields `t,x,y,p`".into(),
            });
        }
        let p = Polarity::from_bit(p).ok_or_else(|| Error::Parse {
            line,
            msg: format!("polarity must be 0 or 1, got {p}"),
        })?;
        if !geometry.contains(x, y) {
            return Err(Error::Range {
                line,
                msg: format!(
                    "coordinate ({x}, {y}) outside sensor {}x{}",
                    geometry.width, geometry.height
                ),
            });
        }
        if let Some(prev) = prev_t {
            if t < prev {
                return Err(Error::Order { line, t, prev });
            }
        }
        prev_t = Some(t);
        events.push(Event::new(t, x as u16, y as u16, p));
    }

    Ok(EventSource { geometry, events })
}

/// Writes `source` in the text event format, geometry header first.
pub fn serialize_events(source: &EventSource) -> String {
    let mut out = String::with_capacity(16 + source.events.len() * 16);
    let _ = writeln!(
        out,
        "# geometry {}x{}",
        source.geometry.width, source.geometry.height
    );
    for e in &source.events {
        let _ = writeln!(out, "{},{},{},{}", e.t, e.x, e.y, e.p.bit());
    }
    out
}

/// Slices `source` into windows `(t0 - L, t0]` with `t0 = t_start + k * stride`.
///
/// Emitted bins run from the first window containing the oldest event to the
/// last window containing the newest one, including empty windows in gaps.
/// Events before `t_start` belong to no bin.
pub fn bin_fixed_time(source: &EventSource, spec: &BinSpec) -> Result<Vec<EventBin>> {
    spec.validate()?;
    let events = &source.events;
    let first = events.iter().position(|e| e.t >= spec.t_start);
    let (Some(first_idx), Some(last)) = (first, events.last()) else {
        return Ok(Vec::new());
    };
    let storage: Arc<[Event]> = Arc::from(events.as_slice());
    let t_first = events[first_idx].t;
    let stride = spec.stride_us;

    // First window whose end is at or after the oldest event.
    let k_first = (t_first - spec.t_start).div_ceil(stride);
    // Last window with t0 - L < t_last.
    let k_last = (last.t - spec.t_start + spec.window_us).div_ceil(stride) - 1;

    let mut bins = Vec::with_capacity((k_last - k_first + 1) as usize);
    let mut lo = first_idx;
    let mut hi = first_idx;
    for k in k_first..=k_last {
        let t0 = spec.t_start + k * stride;
        while hi < storage.len() && storage[hi].t <= t0 {
            hi += 1;
        }
        // Window excludes t0 - L itself; saturates at the origin for early bins.
        while lo < hi && t0 >= spec.window_us && storage[lo].t <= t0 - spec.window_us {
            lo += 1;
        }
        bins.push(EventBin {
            storage: Arc::clone(&storage),
            range: lo..hi,
            t0,
            geometry: source.geometry,
        });
    }
    Ok(bins)
}

/// Parameters of the synthetic arm-plus-palm silhouette.
///
/// The arm enters from the bottom edge and narrows upward to the wrist row;
/// above the wrist the palm flares out, plateaus and tapers toward the
/// fingertips. The wrist row is the strict minimum of the silhouette width.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthParams {
    pub geometry: SensorGeometry,
    pub wrist_row: u32,
    /// Horizontal center of the wrist, in pixels.
    pub center_x: f64,
    pub wrist_half_width: f64,
    /// Half-width added per row below the wrist.
    pub arm_flare: f64,
    pub palm_half_width: f64,
    /// Rows of hand above the wrist.
    pub palm_height: u32,
    /// Horizontal silhouette displacement across the window (motion blur).
    pub motion_px: f64,
    pub count: usize,
    pub window_us: u64,
    pub t0: u64,
    /// Events are stamped within the newest `recent_fraction` of the window.
    pub recent_fraction: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            geometry: SensorGeometry::DAVIS346,
            wrist_row: 180,
            center_x: 173.0,
            wrist_half_width: 14.0,
            arm_flare: 0.25,
            palm_half_width: 32.0,
            palm_height: 90,
            motion_px: 2.0,
            count: 20_000,
            window_us: 100_000,
            t0: 1_000_000,
            recent_fraction: 0.3,
        }
    }
}

impl SynthParams {
    /// Silhouette half-width at `row`, or `None` outside the hand and arm.
    fn half_width(&self, row: u32) -> Option<f64> {
        let wrist = self.wrist_row;
        if row >= wrist {
            return Some(self.wrist_half_width + self.arm_flare * (row - wrist) as f64);
        }
        let d = (wrist - row) as f64;
        let top = self.palm_height as f64;
        if d > top {
            return None;
        }
        let flare = (self.wrist_half_width + 2.0 * d).min(self.palm_half_width);
        let taper_start = 0.75 * top;
        if d > taper_start {
            let frac = (d - taper_start) / (top - taper_start);
            Some(flare * (1.0 - 0.5 * frac))
        } else {
            Some(flare)
        }
    }

    fn row_extent(&self, row: u32) -> Option<(i64, i64)> {
        self.half_width(row).map(|hw| {
            (
                (self.center_x - hw).round() as i64,
                (self.center_x + hw).round() as i64,
            )
        })
    }

    fn validate(&self) -> Result<()> {
        let g = self.geometry;
        let bad = |msg: String| Err(Error::Param(msg));
        if self.wrist_row >= g.height {
            return bad(format!(
                "wrist row {} outside height {}",
                self.wrist_row, g.height
            ));
        }
        if self.palm_height == 0 || self.palm_height > self.wrist_row {
            return bad(format!(
                "palm height {} must be in 1..={}",
                self.palm_height, self.wrist_row
            ));
        }
        if !(self.wrist_half_width >= 1.0) || self.palm_half_width < self.wrist_half_width + 2.0 {
            return bad("palm must be at least 2 px wider than the wrist on each side".into());
        }
        if !(self.arm_flare >= 0.0) {
            return bad("arm flare must be non-negative".into());
        }
        if !(self.recent_fraction > 0.0 && self.recent_fraction <= 1.0) {
            return bad("recent fraction must be in (0, 1]".into());
        }
        if self.window_us == 0 || self.t0 < self.window_us {
            return bad("window must be positive and t0 >= window".into());
        }
        let arm_bottom = self.half_width(g.height - 1).unwrap_or(0.0);
        let max_hw = arm_bottom.max(self.palm_half_width);
        let margin = max_hw + self.motion_px.abs() + 1.0;
        if self.center_x - margin < 0.0 || self.center_x + margin > (g.width - 1) as f64 {
            return bad(format!(
                "silhouette at x={} with half-width {max_hw} exceeds width {}",
                self.center_x, g.width
            ));
        }
        Ok(())
    }

    /// Ground-truth wrist location implied by the silhouette.
    pub fn wrist(&self) -> WristLoc {
        let (xl, xr) = self
            .row_extent(self.wrist_row)
            .expect("wrist row is inside the silhouette");
        WristLoc {
            y: self.wrist_row,
            x_left: xl as u32,
            x_right: xr as u32,
        }
    }
}

/// Generates a dense event bin over an arm-plus-palm silhouette.
///
/// Deterministic in `(params, seed)`. Returns `None` as ground truth when no
/// events are requested.
pub fn synth_hand_events(params: &SynthParams, seed: u64) -> Result<(EventBin, Option<WristLoc>)> {
    params.validate()?;
    if params.count == 0 {
        return Ok((EventBin::empty(params.t0, params.geometry), None));
    }

    let g = params.geometry;
    let mut pixels: Vec<(i64, i64)> = Vec::new();
    for row in 0..g.height {
        if let Some((xl, xr)) = params.row_extent(row) {
            pixels.extend((xl..=xr).map(|x| (x, row as i64)));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let span = ((params.window_us as f64 * params.recent_fraction) as u64).max(1);
    let mut events = Vec::with_capacity(params.count);
    for _ in 0..params.count {
        let (px, py) = pixels[rng.random_range(0..pixels.len())];
        let age = rng.random_range(0..span);
        let t = params.t0 - age;
        // Older events sit further back along the motion path.
        let shift = -params.motion_px * age as f64 / params.window_us as f64;
        let x = (px as f64 + shift).round().clamp(0.0, (g.width - 1) as f64) as u16;
        let p = if rng.random_bool(0.5) {
            Polarity::On
        } else {
            Polarity::Off
        };
        events.push(Event::new(t, x, py as u16, p));
    }
    events.sort_by_key(|e| e.t);

    let bin = EventBin::new(events, params.t0, g)?;
    Ok((bin, Some(params.wrist())))
}
