//! Seven geometric statistics of the event cloud inside the ROI, used as
//! auxiliary training labels.

use std::f64::consts::PI;

use crate::event_io::EventBin;
use crate::roi::RoiBox;

/// Normalized mean, spread, covariance eigenvalues and major-axis
/// orientation of the events inside a box.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GeoStats7 {
    pub mean_x: f64,
    pub mean_y: f64,
    pub std_x: f64,
    pub std_y: f64,
    pub eig_major: f64,
    pub eig_minor: f64,
    /// Orientation angle divided by π, in `[0, 1)`.
    pub theta: f64,
}

impl GeoStats7 {
    pub const LEN: usize = 7;

    pub fn to_array(&self) -> [f64; 7] {
        [
            self.mean_x,
            self.mean_y,
            self.std_x,
            self.std_y,
            self.eig_major,
            self.eig_minor,
            self.theta,
        ]
    }

    pub fn from_array(a: [f64; 7]) -> Self {
        Self {
            mean_x: a[0],
            mean_y: a[1],
            std_x: a[2],
            std_y: a[3],
            eig_major: a[4],
            eig_minor: a[5],
            theta: a[6],
        }
    }
}

/// Population moments of a 2-D point set.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Moments2 {
    pub n: usize,
    pub mean: [f64; 2],
    pub cxx: f64,
    pub cyy: f64,
    pub cxy: f64,
}

impl Moments2 {
    /// Two-pass mean and population covariance.
    pub fn from_points<I>(points: I) -> Self
    where
        I: IntoIterator<Item = (f64, f64)> + Clone,
    {
        let mut n = 0usize;
        let (mut sx, mut sy) = (0.0, 0.0);
        for (x, y) in points.clone() {
            n += 1;
            sx += x;
            sy += y;
        }
        if n == 0 {
            return Self::default();
        }
        let (mx, my) = (sx / n as f64, sy / n as f64);
        let (mut cxx, mut cyy, mut cxy) = (0.0, 0.0, 0.0);
        for (x, y) in points {
            let (dx, dy) = (x - mx, y - my);
            cxx += dx * dx;
            cyy += dy * dy;
            cxy += dx * dy;
        }
        let nf = n as f64;
        Self {
            n,
            mean: [mx, my],
            cxx: cxx / nf,
            cyy: cyy / nf,
            cxy: cxy / nf,
        }
    }

    /// Eigenvalues `(major, minor)` of the covariance, closed form.
    pub fn eigenvalues(&self) -> (f64, f64) {
        let half_trace = 0.5 * (self.cxx + self.cyy);
        let radius = (0.5 * (self.cxx - self.cyy)).hypot(self.cxy);
        let major = half_trace + radius;
        // Symmetric split keeps the trace exact and the minor value non-negative.
        let minor = (self.cxx + self.cyy - major).max(0.0);
        (major, minor)
    }

    /// Angle of the major eigenvector in `[0, π)`; 0 for isotropic covariance.
    pub fn orientation(&self) -> f64 {
        if self.cxy == 0.0 && self.cxx == self.cyy {
            return 0.0;
        }
        let mut angle = 0.5 * (2.0 * self.cxy).atan2(self.cxx - self.cyy);
        if angle < 0.0 {
            angle += PI;
        }
        if angle >= PI {
            angle -= PI;
        }
        // Collapse -0.0.
        angle + 0.0
    }
}

/// Statistics of the events falling inside `roi`, in box-local coordinates.
///
/// Means and deviations are divided by `(w - 1, h - 1)`, eigenvalues by
/// `max(w - 1, h - 1)^2` and the angle by π. No events gives all zeros.
pub fn aux_labels(bin: &EventBin, roi: &RoiBox) -> GeoStats7 {
    let points = bin
        .events()
        .iter()
        .filter(|e| roi.contains(e.x as u32, e.y as u32))
        .map(|e| ((e.x as u32 - roi.x0) as f64, (e.y as u32 - roi.y0) as f64));
    let m = Moments2::from_points(points);
    normalize(&m, roi.w, roi.h)
}

/// Normalizes raw moments for a `w x h` box.
pub fn normalize(m: &Moments2, w: u32, h: u32) -> GeoStats7 {
    if m.n == 0 {
        return GeoStats7::default();
    }
    let sx = (w.max(2) - 1) as f64;
    let sy = (h.max(2) - 1) as f64;
    let se = sx.max(sy).powi(2);
    let (major, minor) = m.eigenvalues();
    GeoStats7 {
        mean_x: m.mean[0] / sx,
        mean_y: m.mean[1] / sy,
        std_x: m.cxx.sqrt() / sx,
        std_y: m.cyy.sqrt() / sy,
        eig_major: major / se,
        eig_minor: minor / se,
        theta: m.orientation() / PI,
    }
}
