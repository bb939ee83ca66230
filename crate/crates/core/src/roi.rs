//! Wrist-based region of interest: bottom-up narrowest-row search, box
//! construction around the wrist and cropping with offsets.

use crate::error::{Error, Result};
use crate::event_io::SensorGeometry;
use crate::representation::Frame;

/// Rows reserved below the wrist inside the box.
pub const BELOW_WRIST_ROWS: u32 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WristLoc {
    pub y: u32,
    pub x_left: u32,
    pub x_right: u32,
}

impl WristLoc {
    pub fn width(&self) -> u32 {
        self.x_right - self.x_left
    }
}

/// Crop rectangle in full-frame pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoiBox {
    pub x0: u32,
    pub y0: u32,
    pub w: u32,
    pub h: u32,
}

impl RoiBox {
    /// Box of the given size centered in the frame; used when no wrist is found.
    pub fn centered(geometry: SensorGeometry, roi_h: u32, roi_w: u32) -> Result<Self> {
        check_size(geometry, roi_h, roi_w)?;
        Ok(Self {
            x0: (geometry.width - roi_w) / 2,
            y0: (geometry.height - roi_h) / 2,
            w: roi_w,
            h: roi_h,
        })
    }

    pub fn full(geometry: SensorGeometry) -> Self {
        Self {
            x0: 0,
            y0: 0,
            w: geometry.width,
            h: geometry.height,
        }
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x0 && y >= self.y0 && x < self.x0 + self.w && y < self.y0 + self.h
    }

    pub fn fits(&self, geometry: SensorGeometry) -> bool {
        self.w > 0
            && self.h > 0
            && self.x0 + self.w <= geometry.width
            && self.y0 + self.h <= geometry.height
    }

    /// Top-left corner divided by the full-frame width and height.
    pub fn normalized_offsets(&self, geometry: SensorGeometry) -> [f64; 2] {
        [
            self.x0 as f64 / geometry.width as f64,
            self.y0 as f64 / geometry.height as f64,
        ]
    }
}

/// Settings of the wrist search and the box size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiParams {
    pub roi_h: u32,
    pub roi_w: u32,
    /// A pixel is active when its value exceeds this.
    pub active_threshold: f64,
    /// Boundaries are taken at the n-th active pixel from each side.
    pub boundary_count: usize,
}

impl Default for RoiParams {
    fn default() -> Self {
        Self {
            roi_h: 160,
            roi_w: 160,
            active_threshold: 0.05,
            boundary_count: 3,
        }
    }
}

fn check_size(geometry: SensorGeometry, roi_h: u32, roi_w: u32) -> Result<()> {
    if roi_h <= BELOW_WRIST_ROWS || roi_w < 2 {
        return Err(Error::Param(format!(
            "ROI must be taller than {BELOW_WRIST_ROWS} rows and at least 2 wide, got {roi_w}x{roi_h}"
        )));
    }
    if roi_h > geometry.height || roi_w > geometry.width {
        return Err(Error::Param(format!(
            "ROI {roi_w}x{roi_h} larger than frame {}x{}",
            geometry.width, geometry.height
        )));
    }
    Ok(())
}

/// Left and right boundary of one row: the `n`-th active pixel from each side.
fn row_bounds(row: &[f64], threshold: f64, n: usize) -> Option<(u32, u32)> {
    let active = row.iter().filter(|v| **v > threshold).count();
    if active < 2 * n {
        return None;
    }
    let is_active = |(_, v): &(usize, &f64)| **v > threshold;
    let left = row.iter().enumerate().filter(is_active).nth(n - 1)?.0;
    let right = row.iter().enumerate().rev().filter(is_active).nth(n - 1)?.0;
    Some((left as u32, right as u32))
}

/// Scans rows bottom-up for the arm-to-hand junction.
///
/// The state starts at `(H-1, 0, W-1)`. Each row with at least `2n` active
/// pixels replaces the state; once the width has shrunk at least once, the
/// first row whose left boundary moves left and right boundary moves right
/// ends the search and the previous state is returned. Without such a row
/// the topmost measured row is returned. `None` when no row qualifies.
pub fn locate_wrist(
    frame: &Frame,
    active_threshold: f64,
    boundary_count: usize,
) -> Result<Option<WristLoc>> {
    if !(active_threshold > 0.0 && active_threshold < 1.0) {
        return Err(Error::Param(format!(
            "active threshold must be in (0, 1), got {active_threshold}"
        )));
    }
    if boundary_count == 0 {
        return Err(Error::Param("boundary count must be at least 1".into()));
    }
    if frame.width() == 0 || frame.height() == 0 {
        return Ok(None);
    }

    let mut state = WristLoc {
        y: frame.height() as u32 - 1,
        x_left: 0,
        x_right: frame.width() as u32 - 1,
    };
    let mut measured = false;
    let mut narrowed = false;

    for y in (0..frame.height()).rev() {
        let Some((xl, xr)) = row_bounds(frame.row(y), active_threshold, boundary_count) else {
            continue;
        };
        if narrowed && xl < state.x_left && xr > state.x_right {
            return Ok(Some(state));
        }
        if xr - xl < state.width() {
            narrowed = true;
        }
        state = WristLoc {
            y: y as u32,
            x_left: xl,
            x_right: xr,
        };
        measured = true;
    }
    Ok(measured.then_some(state))
}

/// Box of `roi_h x roi_w` with 10 rows below the wrist and the rest above,
/// horizontally centered on the wrist midpoint, then shifted inside the frame.
pub fn build_roi(
    wrist: &WristLoc,
    roi_h: u32,
    roi_w: u32,
    geometry: SensorGeometry,
) -> Result<RoiBox> {
    check_size(geometry, roi_h, roi_w)?;
    let xc = (wrist.x_left as i64 + wrist.x_right as i64) / 2;
    let yc = wrist.y as i64;
    let x0 = (xc - roi_w as i64 / 2).clamp(0, (geometry.width - roi_w) as i64);
    let y0 = (yc - (roi_h - BELOW_WRIST_ROWS) as i64).clamp(0, (geometry.height - roi_h) as i64);
    Ok(RoiBox {
        x0: x0 as u32,
        y0: y0 as u32,
        w: roi_w,
        h: roi_h,
    })
}

/// Wrist search followed by box construction, with the centered fallback.
/// The flag reports whether a wrist was found.
pub fn find_roi(frame: &Frame, params: &RoiParams) -> Result<(RoiBox, bool)> {
    let geometry = SensorGeometry::new(frame.width() as u32, frame.height() as u32)?;
    match locate_wrist(frame, params.active_threshold, params.boundary_count)? {
        Some(w) => Ok((build_roi(&w, params.roi_h, params.roi_w, geometry)?, true)),
        None => Ok((
            RoiBox::centered(geometry, params.roi_h, params.roi_w)?,
            false,
        )),
    }
}

/// Copies the box region out of `frame`, returning it with its top-left offset.
pub fn crop(frame: &Frame, roi: &RoiBox) -> Result<(Frame, (u32, u32))> {
    if roi.w == 0
        || roi.h == 0
        || (roi.x0 + roi.w) as usize > frame.width()
        || (roi.y0 + roi.h) as usize > frame.height()
    {
        return Err(Error::Shape(format!(
            "box {roi:?} outside {}x{} frame",
            frame.width(),
            frame.height()
        )));
    }
    let (x0, w) = (roi.x0 as usize, roi.w as usize);
    let mut values = Vec::with_capacity(w * roi.h as usize);
    for y in roi.y0 as usize..(roi.y0 + roi.h) as usize {
        values.extend_from_slice(&frame.row(y)[x0..x0 + w]);
    }
    Ok((
        Frame::from_values(w, roi.h as usize, values)?,
        (roi.x0, roi.y0),
    ))
}

/// Writes `patch` into `dst` with its top-left corner at `(x0, y0)`.
pub fn paste(dst: &mut Frame, patch: &Frame, x0: u32, y0: u32) -> Result<()> {
    if x0 as usize + patch.width() > dst.width() || y0 as usize + patch.height() > dst.height() {
        return Err(Error::Shape("patch does not fit destination".into()));
    }
    for y in 0..patch.height() {
        for x in 0..patch.width() {
            dst.set(x0 as usize + x, y0 as usize + y, patch.get(x, y));
        }
    }
    Ok(())
}
