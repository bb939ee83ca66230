//! Analytic multiply-add counts.

use super::net::{NetConfig, AUX_OUTPUTS, MAIN_OUTPUTS};
use super::ops::conv_out_dim;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerFlops {
    pub name: String,
    pub macs: u64,
    /// Part of the training-only auxiliary branch.
    pub aux: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FlopReport {
    pub layers: Vec<LayerFlops>,
}

impl FlopReport {
    /// Deployment count: everything except the auxiliary branch.
    pub fn total(&self) -> u64 {
        self.layers.iter().filter(|l| !l.aux).map(|l| l.macs).sum()
    }

    pub fn aux_total(&self) -> u64 {
        self.layers.iter().filter(|l| l.aux).map(|l| l.macs).sum()
    }
}

/// `k^2 * (c_in / groups) * c_out * h_out * w_out`.
pub fn conv_macs(
    cin: usize,
    cout: usize,
    k: usize,
    groups: usize,
    hout: usize,
    wout: usize,
) -> u64 {
    (k * k * (cin / groups) * cout * hout * wout) as u64
}

/// `tokens * d_in * d_out`.
pub fn linear_macs(tokens: usize, din: usize, dout: usize) -> u64 {
    (tokens * din * dout) as u64
}

/// Separable attention over `t` tokens of width `d`: score, key, value and
/// output projections plus softmax, weighted sum and gating, all linear in `t`.
pub fn attention_macs(t: usize, d: usize, order: usize) -> u64 {
    let projections = linear_macs(t, d, 1) + 3 * linear_macs(t, d, d);
    projections + (order * t + 2 * t * d) as u64
}

struct Counter<'a> {
    report: &'a mut FlopReport,
    aux: bool,
}

impl Counter<'_> {
    fn add(&mut self, name: String, macs: u64) {
        self.report.layers.push(LayerFlops {
            name,
            macs,
            aux: self.aux,
        });
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        name: String,
        cin: usize,
        cout: usize,
        k: usize,
        groups: usize,
        stride: usize,
        hw: (usize, usize),
    ) -> Result<(usize, usize)> {
        let pad = k / 2;
        let out = conv_out_dim(hw.0, k, stride, pad).zip(conv_out_dim(hw.1, k, stride, pad));
        let (ho, wo) =
            out.ok_or_else(|| Error::Param(format!("{name}: input {hw:?} too small")))?;
        self.add(name, conv_macs(cin, cout, k, groups, ho, wo));
        Ok((ho, wo))
    }

    fn inverted_residual(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        e: usize,
        stride: usize,
        hw: (usize, usize),
    ) -> Result<(usize, usize)> {
        let hidden = cin * e;
        let hw = self.conv(format!("{name}.expand"), cin, hidden, 1, 1, 1, hw)?;
        let hw = self.conv(format!("{name}.dw"), hidden, hidden, 3, hidden, stride, hw)?;
        self.conv(format!("{name}.project"), hidden, cout, 1, 1, 1, hw)
    }

    fn pool(&mut self, name: String, c: usize, hw: (usize, usize)) {
        self.add(name, (c * hw.0 * hw.1) as u64);
    }
}

/// Per-layer counts for a `h x w` single-channel input.
pub fn count_flops(cfg: &NetConfig, h: usize, w: usize) -> Result<FlopReport> {
    cfg.validate()?;
    let mut report = FlopReport::default();
    let mut c = Counter {
        report: &mut report,
        aux: false,
    };
    let [c0, c1] = cfg.stem_channels;
    let [i0, i1] = cfg.ir_channels;
    let e = cfg.expansion;
    let hw = c.conv("stem.conv1".into(), 1, c0, 3, 1, 2, (h, w))?;
    let hw = c.conv("stem.conv2".into(), c0, c1, 3, 1, 1, hw)?;
    let hw = c.inverted_residual("stem.ir1", c1, i0, e, 1, hw)?;
    let stem_hw = c.inverted_residual("stem.ir2", i0, i1, e, 2, hw)?;

    c.aux = true;
    let ahw = c.inverted_residual("aux.ir", i1, cfg.aux_channels, e, 2, stem_hw)?;
    c.pool("aux.pool".into(), cfg.aux_channels, ahw);
    c.add(
        "aux.fc".into(),
        linear_macs(1, cfg.aux_channels, AUX_OUTPUTS),
    );
    c.aux = false;

    let (mut hw, mut cin) = (stem_hw, i1);
    for (i, ((&ch, &d), &depth)) in cfg
        .stage_channels
        .iter()
        .zip(&cfg.stage_dims)
        .zip(&cfg.stage_depths)
        .enumerate()
    {
        hw = c.inverted_residual(&format!("stages.{i}.down"), cin, ch, e, 2, hw)?;
        let p = format!("stages.{i}.block");
        c.conv(format!("{p}.local_dw"), ch, ch, 3, ch, 1, hw)?;
        c.conv(format!("{p}.local_pw"), ch, d, 1, 1, 1, hw)?;
        let t = hw.0 * hw.1;
        let f = d * cfg.ffn_mult;
        for l in 0..depth {
            c.add(
                format!("{p}.layers.{l}.attn"),
                attention_macs(t, d, cfg.taylor_order),
            );
            c.add(
                format!("{p}.layers.{l}.ffn"),
                linear_macs(t, d, f) + linear_macs(t, f, d),
            );
        }
        c.conv(format!("{p}.proj"), d, ch, 1, 1, 1, hw)?;
        cin = ch;
    }
    c.pool("head.pool".into(), cin, hw);
    c.add("head.fc1".into(), linear_macs(1, cin, cfg.hidden));
    c.add(
        "head.fc2".into(),
        linear_macs(1, cfg.hidden + 2, MAIN_OUTPUTS),
    );
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pointwise_conv_on_ten_by_ten() {
        assert_eq!(conv_macs(1, 1, 1, 1, 10, 10), 100);
    }

    #[test]
    fn halving_input_quarters_conv_cost() {
        let full = conv_macs(8, 16, 3, 1, 40, 60);
        let half = conv_macs(8, 16, 3, 1, 20, 30);
        assert_eq!(full, 4 * half);
    }

    #[test]
    fn roi_to_full_ratio() {
        let cfg = NetConfig::default();
        let roi = count_flops(&cfg, 160, 160).unwrap().total() as f64;
        let full = count_flops(&cfg, 180, 240).unwrap().total() as f64;
        let r = roi / full;
        assert!((0.52..=0.62).contains(&r), "ratio {r}");
    }

    #[test]
    fn aux_layers_are_separated() {
        let r = count_flops(&NetConfig::toy(), 32, 32).unwrap();
        assert!(r.aux_total() > 0);
        assert!(r
            .layers
            .iter()
            .filter(|l| l.aux)
            .all(|l| l.name.starts_with("aux.")));
        let sum: u64 = r.layers.iter().map(|l| l.macs).sum();
        assert_eq!(sum, r.total() + r.aux_total());
    }
}
