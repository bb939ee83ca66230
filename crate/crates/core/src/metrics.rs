//! Root-aligned, palm-normalized PCK curves and their area under the curve,
//! for 2-D or 3-D joint arrays.

use crate::error::{Error, Result};

pub const NUM_JOINTS: usize = 21;
/// Wrist joint index in the 21-joint layout.
pub const WRIST: usize = 0;
/// Middle-finger MCP joint index in the 21-joint layout.
pub const MIDDLE_MCP: usize = 9;

/// 21 joints in `dim` coordinates, stored joint-major.
#[derive(Debug, Clone, PartialEq)]
pub struct JointSet {
    dim: usize,
    coords: Vec<f64>,
    visible: Option<Vec<bool>>,
}

impl JointSet {
    pub fn new(dim: usize, coords: Vec<f64>) -> Result<Self> {
        if dim != 2 && dim != 3 {
            return Err(Error::Param(format!(
                "joint dimension must be 2 or 3, got {dim}"
            )));
        }
        if coords.len() != NUM_JOINTS * dim {
            return Err(Error::Shape(format!(
                "expected {} coordinates for {NUM_JOINTS} joints in {dim}-D, got {}",
                NUM_JOINTS * dim,
                coords.len()
            )));
        }
        Ok(Self {
            dim,
            coords,
            visible: None,
        })
    }

    pub fn with_visibility(mut self, visible: Vec<bool>) -> Result<Self> {
        if visible.len() != NUM_JOINTS {
            return Err(Error::Shape(format!(
                "visibility needs {NUM_JOINTS} flags, got {}",
                visible.len()
            )));
        }
        self.visible = Some(visible);
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn joint(&self, j: usize) -> &[f64] {
        &self.coords[j * self.dim..(j + 1) * self.dim]
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn is_visible(&self, j: usize) -> bool {
        self.visible.as_ref().is_none_or(|v| v[j])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct JointLayout {
    pub root: usize,
    pub palm_end: usize,
}

impl Default for JointLayout {
    fn default() -> Self {
        Self {
            root: WRIST,
            palm_end: MIDDLE_MCP,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PckCurve {
    pub thresholds: Vec<f64>,
    pub values: Vec<f64>,
}

/// Curve plus the number of pairs skipped for a zero palm length.
#[derive(Debug, Clone, PartialEq)]
pub struct PckReport {
    pub curve: PckCurve,
    pub skipped: usize,
    pub evaluated_joints: usize,
}

/// `n` evenly spaced thresholds covering `[0, tau_max]`.
pub fn uniform_thresholds(n: usize, tau_max: f64) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![tau_max],
        _ => (0..n)
            .map(|i| tau_max * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Fraction of joints whose root-aligned error is within `tau` palm lengths.
///
/// Both sets are translated so their root joints coincide; the palm length is
/// the ground-truth root to palm-end distance. The root joint itself is
/// excluded from the count since alignment makes it exact. Joints are
/// counted when visible in the ground truth.
pub fn pck_curve(
    preds: &[JointSet],
    gts: &[JointSet],
    thresholds: &[f64],
    layout: JointLayout,
) -> Result<PckReport> {
    if preds.len() != gts.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} ground truths",
            preds.len(),
            gts.len()
        )));
    }
    if thresholds.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Param("thresholds must be ascending".into()));
    }
    if layout.root >= NUM_JOINTS || layout.palm_end >= NUM_JOINTS || layout.root == layout.palm_end
    {
        return Err(Error::Param(format!("invalid joint layout {layout:?}")));
    }

    // Normalized errors of every counted joint.
    let mut errors = Vec::new();
    let mut skipped = 0;
    for (p, g) in preds.iter().zip(gts) {
        if p.dim != g.dim {
            return Err(Error::Shape(format!(
                "prediction is {}-D but ground truth is {}-D",
                p.dim, g.dim
            )));
        }
        let palm = dist(g.joint(layout.root), g.joint(layout.palm_end));
        if !(palm > 0.0) {
            skipped += 1;
            continue;
        }
        let (pr, gr) = (p.joint(layout.root), g.joint(layout.root));
        for j in (0..NUM_JOINTS).filter(|&j| j != layout.root && g.is_visible(j)) {
            let err: f64 = p
                .joint(j)
                .iter()
                .zip(pr)
                .zip(g.joint(j).iter().zip(gr))
                .map(|((pj, pr), (gj, gr))| ((pj - pr) - (gj - gr)).powi(2))
                .sum::<f64>()
                .sqrt();
            errors.push(err / palm);
        }
    }

    errors.sort_by(f64::total_cmp);
    let n = errors.len();
    let values = thresholds
        .iter()
        .map(|&tau| {
            if n == 0 {
                0.0
            } else {
                errors.partition_point(|e| *e <= tau) as f64 / n as f64
            }
        })
        .collect();
    Ok(PckReport {
        curve: PckCurve {
            thresholds: thresholds.to_vec(),
            values,
        },
        skipped,
        evaluated_joints: n,
    })
}

/// Trapezoidal area under the curve on `[0, tau_max]`, divided by `tau_max`.
pub fn auc(curve: &PckCurve, tau_max: f64) -> Result<f64> {
    let t = &curve.thresholds;
    let v = &curve.values;
    if t.len() != v.len() || t.is_empty() {
        return Err(Error::Shape(
            "curve thresholds and values differ in length".into(),
        ));
    }
    if !(tau_max > 0.0) || t[0] > 0.0 || *t.last().unwrap() < tau_max {
        return Err(Error::Param(format!(
            "thresholds must cover [0, {tau_max}]"
        )));
    }
    let mut area = 0.0;
    for i in 1..t.len() {
        if t[i - 1] >= tau_max {
            break;
        }
        let (t0, t1) = (t[i - 1], t[i].min(tau_max));
        // Linear interpolation when the last segment is clipped.
        let v1 = if t[i] > tau_max {
            v[i - 1] + (v[i] - v[i - 1]) * (t1 - t0) / (t[i] - t0)
        } else {
            v[i]
        };
        area += 0.5 * (v[i - 1] + v1) * (t1 - t0);
    }
    Ok(area / tau_max)
}

/// Parses joint rows: one sample per line, `21 * D` comma-separated reals.
/// Blank lines and `#` comments are ignored; `D` is inferred from the first row.
pub fn parse_joint_file(text: &str) -> Result<Vec<JointSet>> {
    let mut out = Vec::new();
    let mut dim = None;
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let coords = line
            .split(',')
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse {
                line: idx + 1,
                msg: e.to_string(),
            })?;
        let d = *dim.get_or_insert(coords.len() / NUM_JOINTS);
        if coords.len() != d * NUM_JOINTS || !(d == 2 || d == 3) {
            return Err(Error::Parse {
                line: idx + 1,
                msg: format!("expected {} values, got {}", d * NUM_JOINTS, coords.len()),
            });
        }
        out.push(JointSet::new(d, coords)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hand(dim: usize, seed: u64) -> JointSet {
        let coords = (0..NUM_JOINTS * dim)
            .map(|i| ((i as u64 * 37 + seed * 11) % 23) as f64 + 0.5 * i as f64)
            .collect();
        JointSet::new(dim, coords).unwrap()
    }

    #[test]
    fn perfect_predictions() {
        let gts: Vec<_> = (0..5).map(|s| hand(2, s)).collect();
        let t = uniform_thresholds(100, 1.0);
        let r = pck_curve(&gts, &gts, &t, JointLayout::default()).unwrap();
        assert!(r.curve.values.iter().all(|v| *v == 1.0));
        assert_eq!(auc(&r.curve, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn half_palm_step() {
        let g = JointSet::new(2, {
            let mut c = vec![0.0; 42];
            c[18] = 0.0;
            c[19] = 2.0; // middle MCP at (0, 2): palm length 2
            for j in 1..21 {
                if j != 9 {
                    c[2 * j] = j as f64;
                    c[2 * j + 1] = 3.0;
                }
            }
            c
        })
        .unwrap();
        let mut pc = g.coords().to_vec();
        for j in 1..21 {
            pc[2 * j] += 1.0; // 0.5 palm lengths
        }
        let p = JointSet::new(2, pc).unwrap();
        let t = uniform_thresholds(100, 1.0);
        let r = pck_curve(&[p], &[g], &t, JointLayout::default()).unwrap();
        for (tau, v) in t.iter().zip(&r.curve.values) {
            assert_eq!(*v, if *tau >= 0.5 { 1.0 } else { 0.0 });
        }
        assert!((auc(&r.curve, 1.0).unwrap() - 0.5).abs() < 0.01);
    }

    #[test]
    fn zero_palm_is_skipped() {
        let g = JointSet::new(3, vec![1.0; 63]).unwrap();
        let one = std::slice::from_ref(&g);
        let r = pck_curve(one, one, &[0.0, 1.0], JointLayout::default()).unwrap();
        assert_eq!(r.skipped, 1);
        assert_eq!(r.evaluated_joints, 0);
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let t = [0.0, 1.0];
        assert!(pck_curve(&[hand(2, 0)], &[], &t, JointLayout::default()).is_err());
        assert!(pck_curve(&[hand(2, 0)], &[hand(3, 0)], &t, JointLayout::default()).is_err());
        assert!(JointSet::new(2, vec![0.0; 40]).is_err());
        assert!(JointSet::new(4, vec![0.0; 84]).is_err());
    }

    #[test]
    fn invisible_joints_are_ignored() {
        let g = hand(2, 1);
        let mut pc = g.coords().to_vec();
        pc[2] += 1e6;
        let p = JointSet::new(2, pc).unwrap();
        let mut vis = vec![true; 21];
        vis[1] = false;
        let g = g.with_visibility(vis).unwrap();
        let r = pck_curve(&[p], &[g], &[0.0], JointLayout::default()).unwrap();
        assert_eq!(r.curve.values, vec![1.0]);
        assert_eq!(r.evaluated_joints, 19);
    }

    #[test]
    fn auc_of_constant_curves() {
        let t = uniform_thresholds(100, 1.0);
        let zero = PckCurve {
            thresholds: t.clone(),
            values: vec![0.0; 100],
        };
        assert_eq!(auc(&zero, 1.0).unwrap(), 0.0);
        let one = PckCurve {
            thresholds: t,
            values: vec![1.0; 100],
        };
        assert!((auc(&one, 0.5).unwrap() - 1.0).abs() < 1e-12);
        assert!(auc(&one, 2.0).is_err());
    }

    #[test]
    fn parses_joint_rows() {
        let row: Vec<String> = (0..42).map(|i| format!("{i}.5")).collect();
        let text = format!("# preds\n{}\n\n{}\n", row.join(","), row.join(", "));
        let sets = parse_joint_file(&text).unwrap();
        assert_eq!(sets.len(), 2);
        assert_eq!(sets[0].dim(), 2);
        assert_eq!(sets[1].joint(20), &[40.5, 41.5]);
        assert!(parse_joint_file("1,2,3\n").is_err());
    }
}
