//! Single-channel LNES-Fast frames: polarity compression, count-limited
//! window-normalized accumulation and Gaussian noise filtering.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::event_io::{EventBin, Polarity, SensorGeometry};

/// A row-major `height x width` grid of real values.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl Frame {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![0.0; width * height],
        }
    }

    pub fn for_geometry(geometry: SensorGeometry) -> Self {
        Self::zeros(geometry.width as usize, geometry.height as usize)
    }

    pub fn from_values(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::Shape(format!(
                "{} values for a {width}x{height} frame",
                values.len()
            )));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.values[y * self.width + x] = v;
    }

    pub fn row(&self, y: usize) -> &[f64] {
        &self.values[y * self.width..(y + 1) * self.width]
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn scaled(&self, a: f64) -> Frame {
        Frame {
            width: self.width,
            height: self.height,
            values: self.values.iter().map(|v| v * a).collect(),
        }
    }

    /// Binary PGM (P5, maxval 255), pixel = round(255 * clamp(v, 0, 1)).
    pub fn write_pgm<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "P5\n{} {}\n255\n", self.width, self.height)?;
        let bytes: Vec<u8> = self
            .values
            .iter()
            .map(|v| (255.0 * v.clamp(0.0, 1.0)).round() as u8)
            .collect();
        w.write_all(&bytes)?;
        Ok(())
    }

    /// Raw grid: `W`, `H` as little-endian u32, then `W*H` little-endian f32.
    pub fn write_raw<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&(self.width as u32).to_le_bytes())?;
        w.write_all(&(self.height as u32).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.values.len() * 4);
        for v in &self.values {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_raw<R: Read>(mut r: R) -> Result<Frame> {
        let mut header = [0u8; 8];
        r.read_exact(&mut header)?;
        let width = u32::from_le_bytes(header[0..4].try_into().unwrap()) as usize;
        let height = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        if payload.len() != width * height * 4 {
            return Err(Error::Format(format!(
                "raw frame {width}x{height} expects {} payload bytes, found {}",
                width * height * 4,
                payload.len()
            )));
        }
        let values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Frame::from_values(width, height, values)
    }
}

/// Parameters of the frame construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReprSpec {
    /// Window length L in microseconds.
    pub window_us: u64,
    /// Count limit θ; `None` accumulates the whole window.
    pub count_limit: Option<usize>,
    pub kernel_size: usize,
    pub sigma: f64,
}

impl Default for ReprSpec {
    fn default() -> Self {
        Self {
            window_us: 100_000,
            count_limit: Some(5_000),
            kernel_size: 3,
            sigma: 1.0,
        }
    }
}

impl ReprSpec {
    pub fn validate(&self) -> Result<()> {
        if self.window_us == 0 {
            return Err(Error::Param("window must be positive".into()));
        }
        if self.count_limit == Some(0) {
            return Err(Error::Param("count limit must be at least 1".into()));
        }
        validate_kernel(self.kernel_size, self.sigma)
    }
}

fn validate_kernel(k: usize, sigma: f64) -> Result<()> {
    if k == 0 || k.is_multiple_of(2) {
        return Err(Error::Param(format!(
            "kernel size must be odd and positive, got {k}"
        )));
    }
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Param(format!("sigma must be positive, got {sigma}")));
    }
    Ok(())
}

/// Maps every event to positive polarity, keeping multiplicity and order.
pub fn compress_channels(bin: &EventBin) -> EventBin {
    let events = bin
        .events()
        .iter()
        .map(|e| {
            let mut e = *e;
            e.p = Polarity::On;
            e
        })
        .collect();
    EventBin::new(events, bin.t0(), bin.geometry()).expect("input bin already validated")
}

/// Window-normalized event surface with early stop after `count_limit`
/// contributing events. Events are visited newest first; within equal
/// timestamps the later one in the bin is visited first. Events older than
/// the window are skipped.
///
/// Returns the frame and the number of contributing events.
pub fn lnes_fast(bin: &EventBin, spec: &ReprSpec) -> (Frame, usize) {
    let mut frame = Frame::for_geometry(bin.geometry());
    let limit = spec.count_limit.unwrap_or(usize::MAX);
    let window = spec.window_us as f64;
    let t0 = bin.t0();
    let mut count = 0usize;

    for e in bin.events().iter().rev() {
        if count >= limit {
            break;
        }
        let age = t0 - e.t;
        if age > spec.window_us {
            // Sorted input: everything further back is older still.
            break;
        }
        let weight = (window - age as f64) / window;
        let idx = e.y as usize * frame.width + e.x as usize;
        if weight > frame.values[idx] {
            frame.values[idx] = weight;
        }
        count += 1;
    }
    (frame, count)
}

/// Normalized 1-D Gaussian taps, length `k`.
pub fn gaussian_kernel_1d(k: usize, sigma: f64) -> Result<Vec<f64>> {
    validate_kernel(k, sigma)?;
    let r = (k / 2) as isize;
    let taps: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let z: f64 = taps.iter().sum();
    Ok(taps.into_iter().map(|t| t / z).collect())
}

/// Separable Gaussian blur with zero padding.
pub fn gaussian_blur(frame: &Frame, k: usize, sigma: f64) -> Result<Frame> {
    let taps = gaussian_kernel_1d(k, sigma)?;
    let r = (k / 2) as isize;
    let (w, h) = (frame.width as isize, frame.height as isize);

    let mut horiz = Frame::zeros(frame.width, frame.height);
    for y in 0..h {
        let src = frame.row(y as usize);
        let dst = &mut horiz.values[(y * w) as usize..((y + 1) * w) as usize];
        for x in 0..w {
            let mut acc = 0.0;
            for (j, tap) in taps.iter().enumerate() {
                let xs = x + j as isize - r;
                if (0..w).contains(&xs) {
                    acc += tap * src[xs as usize];
                }
            }
            dst[x as usize] = acc;
        }
    }

    let mut out = Frame::zeros(frame.width, frame.height);
    for y in 0..h {
        for (j, tap) in taps.iter().enumerate() {
            let ys = y + j as isize - r;
            if !(0..h).contains(&ys) {
                continue;
            }
            let src = horiz.row(ys as usize);
            let dst = &mut out.values[(y * w) as usize..((y + 1) * w) as usize];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += tap * s;
            }
        }
    }
    Ok(out)
}

/// Full frame construction: compression, LNES-Fast, Gaussian filtering.
pub fn build_frame(bin: &EventBin, spec: &ReprSpec) -> Result<(Frame, usize)> {
    spec.validate()?;
    let compressed = compress_channels(bin);
    let (surface, count) = lnes_fast(&compressed, spec);
    let filtered = gaussian_blur(&surface, spec.kernel_size, spec.sigma)?;
    Ok((filtered, count))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event_io::Event;

    fn geo(w: u32, h: u32) -> SensorGeometry {
        SensorGeometry::new(w, h).unwrap()
    }

    fn unbounded(window_us: u64) -> ReprSpec {
        ReprSpec {
            window_us,
            count_limit: None,
            ..ReprSpec::default()
        }
    }

    #[test]
    fn newest_event_has_unit_weight() {
        let bin = EventBin::new(vec![Event::new(500, 2, 1, Polarity::On)], 500, geo(4, 4)).unwrap();
        let (f, n) = lnes_fast(&bin, &unbounded(100));
        assert_eq!(f.get(2, 1), 1.0);
        assert_eq!(n, 1);
    }

    #[test]
    fn window_edge_event_has_zero_weight() {
        let bin = EventBin::new(vec![Event::new(400, 2, 1, Polarity::On)], 500, geo(4, 4)).unwrap();
        let (f, n) = lnes_fast(&bin, &unbounded(100));
        assert_eq!(f.get(2, 1), 0.0);
        assert_eq!(n, 1);
    }

    #[test]
    fn events_older_than_window_are_skipped() {
        let bin = EventBin::new(
            vec![
                Event::new(100, 0, 0, Polarity::On),
                Event::new(450, 1, 0, Polarity::On),
            ],
            500,
            geo(4, 4),
        )
        .unwrap();
        let (f, n) = lnes_fast(&bin, &unbounded(100));
        assert_eq!(n, 1);
        assert_eq!(f.get(0, 0), 0.0);
        assert_eq!(f.get(1, 0), 0.5);
    }

    #[test]
    fn opposite_polarities_do_not_double() {
        let g = geo(8, 8);
        let mixed = EventBin::new(
            vec![
                Event::new(90, 5, 5, Polarity::Off),
                Event::new(90, 5, 5, Polarity::On),
            ],
            100,
            g,
        )
        .unwrap();
        let compressed = compress_channels(&mixed);
        assert!(compressed.events().iter().all(|e| e.p == Polarity::On));
        assert_eq!(compressed.len(), 2);
        let single = EventBin::new(vec![Event::new(90, 5, 5, Polarity::On)], 100, g).unwrap();
        let spec = unbounded(100);
        assert_eq!(lnes_fast(&compressed, &spec).0, lnes_fast(&single, &spec).0);
    }

    #[test]
    fn compress_empty_and_positive_bins() {
        let g = geo(4, 4);
        assert!(compress_channels(&EventBin::empty(10, g)).is_empty());
        let pos = EventBin::new(
            vec![
                Event::new(1, 0, 1, Polarity::On),
                Event::new(3, 2, 3, Polarity::On),
            ],
            5,
            g,
        )
        .unwrap();
        assert_eq!(compress_channels(&pos).events(), pos.events());
    }

    #[test]
    fn early_stop_counts() {
        let events = (0..10)
            .map(|i| Event::new(i, i as u16, 0, Polarity::On))
            .collect();
        let bin = EventBin::new(events, 10, geo(10, 1)).unwrap();
        let spec = ReprSpec {
            window_us: 100,
            count_limit: Some(3),
            ..ReprSpec::default()
        };
        let (f, n) = lnes_fast(&bin, &spec);
        assert_eq!(n, 3);
        let lit: Vec<usize> = (0..10).filter(|&x| f.get(x, 0) > 0.0).collect();
        assert_eq!(lit, vec![7, 8, 9]);
    }

    #[test]
    fn kernel_sums_to_one() {
        for k in [1, 3, 5, 7, 9] {
            for sigma in [0.3, 0.5, 1.0, 2.0, 5.0] {
                let taps = gaussian_kernel_1d(k, sigma).unwrap();
                let s: f64 = taps.iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
                let s2: f64 = taps
                    .iter()
                    .flat_map(|a| taps.iter().map(move |b| a * b))
                    .sum();
                assert!((s2 - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn blur_rejects_bad_parameters() {
        let f = Frame::zeros(5, 5);
        assert!(matches!(gaussian_blur(&f, 4, 1.0), Err(Error::Param(_))));
        assert!(matches!(gaussian_blur(&f, 3, 0.0), Err(Error::Param(_))));
        assert!(matches!(gaussian_blur(&f, 3, -1.0), Err(Error::Param(_))));
    }

    #[test]
    fn blur_matches_direct_2d_kernel() {
        // Direct 2-D evaluation: w(i, j) = exp(-(i^2 + j^2) / 2σ²) / Z.
        let (k, sigma) = (3usize, 1.0f64);
        let r = 1isize;
        let mut z = 0.0;
        for i in -r..=r {
            for j in -r..=r {
                z += (-((i * i + j * j) as f64) / (2.0 * sigma * sigma)).exp();
            }
        }
        let mut f = Frame::zeros(7, 7);
        f.set(3, 3, 1.0);
        let out = gaussian_blur(&f, k, sigma).unwrap();
        assert!((out.get(3, 3) - 1.0 / z).abs() < 1e-12);
        for dy in -r..=r {
            for dx in -r..=r {
                let expected = (-((dx * dx + dy * dy) as f64) / 2.0).exp() / z;
                let got = out.get((3 + dx) as usize, (3 + dy) as usize);
                assert!((got - expected).abs() < 1e-12);
            }
        }
        assert!((out.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn blur_zero_pads_borders() {
        let mut f = Frame::zeros(5, 5);
        f.set(0, 0, 1.0);
        let out = gaussian_blur(&f, 3, 1.0).unwrap();
        assert!(out.sum() < 1.0);
        assert!(out.values().iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn raw_and_pgm_export() {
        let f = Frame::from_values(3, 2, vec![0.0, 0.5, 1.0, 0.25, 0.75, 1.0]).unwrap();
        let mut raw = Vec::new();
        f.write_raw(&mut raw).unwrap();
        assert_eq!(raw.len(), 8 + 6 * 4);
        assert_eq!(&raw[0..8], &[3, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(Frame::read_raw(raw.as_slice()).unwrap(), f);

        let mut pgm = Vec::new();
        f.write_pgm(&mut pgm).unwrap();
        let header = b"P5\n3 2\n255\n";
        assert_eq!(&pgm[..header.len()], header);
        assert_eq!(&pgm[header.len()..], &[0, 128, 255, 64, 191, 255]);
    }

    #[test]
    fn build_frame_values_in_unit_interval() {
        let events = (0..50u64)
            .map(|i| Event::new(i * 10, (i % 7) as u16, (i % 5) as u16, Polarity::Off))
            .collect();
        let bin = EventBin::new(events, 500, geo(7, 5)).unwrap();
        let (f, _) = build_frame(&bin, &ReprSpec::default()).unwrap();
        assert!(f.values().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
