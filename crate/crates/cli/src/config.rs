//! Pipeline configuration.
//!
//! The file is flat `section.key = value` lines (TOML dotted keys), e.g.
//!
//! ```text
//! seed = 42
//! bin.window_us = 100000
//! roi.height = 160
//! net.stage_channels = [96, 128, 160]
//! ```
//!
//! Missing keys take their defaults; unknown keys are rejected.

use std::path::Path;

use anyhow::{bail, Context, Result};
use evhand_core::event_io::{BinSpec, SensorGeometry};
use evhand_core::loss::LossWeights;
use evhand_core::nn::NetConfig;
use evhand_core::representation::ReprSpec;
use evhand_core::roi::RoiParams;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorSection {
    pub width: u32,
    pub height: u32,
}

impl Default for SensorSection {
    fn default() -> Self {
        let g = SensorGeometry::DAVIS346;
        Self {
            width: g.width,
            height: g.height,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BinSection {
    pub window_us: u64,
    pub stride_us: u64,
    pub t_start: u64,
}

impl Default for BinSection {
    fn default() -> Self {
        let b = BinSpec::default();
        Self {
            window_us: b.window_us,
            stride_us: b.stride_us,
            t_start: b.t_start,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReprSection {
    /// Early-stop event count; 0 means unbounded.
    pub count_limit: usize,
    pub kernel_size: usize,
    pub sigma: f64,
}

impl Default for ReprSection {
    fn default() -> Self {
        let r = ReprSpec::default();
        Self {
            count_limit: r.count_limit.unwrap_or(0),
            kernel_size: r.kernel_size,
            sigma: r.sigma,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoiSection {
    pub height: u32,
    pub width: u32,
    pub threshold: f64,
    pub boundary_count: usize,
}

impl Default for RoiSection {
    fn default() -> Self {
        let r = RoiParams::default();
        Self {
            height: r.roi_h,
            width: r.roi_w,
            threshold: r.active_threshold,
            boundary_count: r.boundary_count,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub mano: f64,
    pub trans: f64,
    pub rot: f64,
    pub aux: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            mano: w.mano,
            trans: w.trans,
            rot: w.rot,
            aux: w.aux,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSection {
    pub thresholds: usize,
    pub tau_max: f64,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self {
            thresholds: 100,
            tau_max: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlopsSection {
    /// Full-resolution network input used as the comparison baseline.
    pub full_h: usize,
    pub full_w: usize,
}

impl Default for FlopsSection {
    fn default() -> Self {
        Self {
            full_h: 180,
            full_w: 240,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub samples: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            steps: 300,
            batch: 32,
            lr: 1e-4,
            samples: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub sensor: SensorSection,
    pub bin: BinSection,
    pub repr: ReprSection,
    pub roi: RoiSection,
    pub net: NetConfig,
    pub loss: LossSection,
    pub metrics: MetricsSection,
    pub flops: FlopsSection,
    pub train: TrainSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            sensor: SensorSection::default(),
            bin: BinSection::default(),
            repr: ReprSection::default(),
            roi: RoiSection::default(),
            net: NetConfig::default(),
            loss: LossSection::default(),
            metrics: MetricsSection::default(),
            flops: FlopsSection::default(),
            train: TrainSection::default(),
        }
    }
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).context("invalid config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    /// Flat `key = value` lines in section order.
    pub fn to_flat_string(&self) -> Result<String> {
        let value = toml::Value::try_from(self).context("serializing config")?;
        let mut out = String::new();
        flatten("", &value, &mut out);
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry()?;
        self.bin_spec()?.validate()?;
        self.repr_spec().validate()?;
        self.net.validate()?;
        let r = self.roi_params();
        if r.boundary_count == 0 {
            bail!("roi.boundary_count must be at least 1");
        }
        if !self.loss_weights().is_valid() {
            bail!("loss weights must be finite and non-negative");
        }
        if self.metrics.thresholds < 2 || !(self.metrics.tau_max > 0.0) {
            bail!("metrics need at least 2 thresholds and a positive tau_max");
        }
        Ok(())
    }

    pub fn geometry(&self) -> Result<SensorGeometry> {
        Ok(SensorGeometry::new(self.sensor.width, self.sensor.height)?)
    }

    pub fn bin_spec(&self) -> Result<BinSpec> {
        Ok(BinSpec::new(self.bin.window_us, self.bin.stride_us)?.with_start(self.bin.t_start))
    }

    pub fn repr_spec(&self) -> ReprSpec {
        ReprSpec {
            window_us: self.bin.window_us,
            count_limit: (self.repr.count_limit > 0).then_some(self.repr.count_limit),
            kernel_size: self.repr.kernel_size,
            sigma: self.repr.sigma,
        }
    }

    pub fn roi_params(&self) -> RoiParams {
        RoiParams {
            roi_h: self.roi.height,
            roi_w: self.roi.width,
            active_threshold: self.roi.threshold,
            boundary_count: self.roi.boundary_count,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            mano: self.loss.mano,
            trans: self.loss.trans,
            rot: self.loss.rot,
            aux: self.loss.aux,
        }
    }
}

fn flatten(prefix: &str, value: &toml::Value, out: &mut String) {
    match value {
        toml::Value::Table(t) => {
            // Scalars first so top-level keys are not swallowed by a section.
            let (tables, scalars): (Vec<_>, Vec<_>) = t.iter().partition(|(_, v)| v.is_table());
            for (k, v) in scalars.into_iter().chain(tables) {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, v, out);
            }
        }
        v => out.push_str(&format!("{prefix} = {v}\n")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_round_trip() {
        let mut cfg = PipelineConfig {
            seed: 7,
            ..PipelineConfig::default()
        };
        cfg.roi.height = 120;
        cfg.net.stage_depths = vec![1, 1, 1];
        let text = cfg.to_flat_string().unwrap();
        assert!(text.lines().all(|l| !l.starts_with('[')));
        assert!(text.contains("roi.height = 120"));
        assert_eq!(PipelineConfig::parse(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_file_uses_defaults() {
        let cfg = PipelineConfig::parse("seed = 3\nbin.stride_us = 500\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.bin.stride_us, 500);
        assert_eq!(cfg.bin.window_us, 100_000);
    }

    #[test]
    fn rejects_unknown_and_invalid_keys() {
        assert!(PipelineConfig::parse("bin.stride = 5\n").is_err());
        assert!(PipelineConfig::parse("net.taylor_order = 3\n").is_err());
        assert!(PipelineConfig::parse("bin.stride_us = 0\n").is_err());
    }
}
