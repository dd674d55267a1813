//! Analytic parameter and multiply-accumulate accounting.
//!
//! Only convolutions and linear layers contribute MACs. Normalization affine
//! parameters count toward `params`; running statistics do not.

use serde::{Deserialize, Serialize};

use super::config::StudentConfig;
use crate::error::{Error, Result};
use crate::ops::ConvSpec;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerComplexity {
    pub name: String,
    pub params: u64,
    pub macs: u64,
    /// Output shape `(C, H, W)` or `(features,)` for the head.
    pub output: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub params: u64,
    pub macs: u64,
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerComplexity>,
}

struct Walker {
    layers: Vec<LayerComplexity>,
    c: usize,
    h: usize,
    w: usize,
}

impl Walker {
    /// conv (no bias) followed by a per-channel affine norm
    fn conv_norm(&mut self, name: String, spec: &ConvSpec) -> Result<()> {
        let (oh, ow) = spec.output_hw(self.h, self.w).ok_or_else(|| Error::Dimension {
            op: "count_complexity",
            axis: format!("{name}: spatial"),
            expected: spec.kernel_h,
            got: self.h.min(self.w) + 2 * spec.padding,
        })?;
        self.layers.push(LayerComplexity {
            params: (spec.weight_count() + 2 * spec.out_channels) as u64,
            macs: spec.macs(oh, ow),
            output: vec![spec.out_channels, oh, ow],
            name,
        });
        (self.c, self.h, self.w) = (spec.out_channels, oh, ow);
        Ok(())
    }
}

/// Parameters and MACs of one inference at `input_shape = (C, H, W)`.
pub fn count_complexity(config: &StudentConfig, input_shape: &[usize]) -> Result<ComplexityReport> {
    config.validate()?;
    let [c, h, w] = input_shape[..] else {
        return Err(Error::Input(format!("input shape must be (C, H, W), got {input_shape:?}")));
    };
    if c != config.input_channels {
        return Err(Error::Dimension { op: "count_complexity", axis: "channel".into(), expected: config.input_channels, got: c });
    }
    let mut walk = Walker { layers: Vec::new(), c, h, w };
    walk.conv_norm("stem".into(), &config.stem)?;
    for (i, b) in config.blocks().enumerate() {
        walk.conv_norm(format!("block{i}.expand"), &b.expand_spec())?;
        walk.conv_norm(format!("block{i}.depthwise"), &b.depthwise_spec())?;
        walk.conv_norm(format!("block{i}.project"), &b.project_spec())?;
        walk.layers.push(LayerComplexity {
            name: format!("block{i}.grn"),
            params: 2 * walk.c as u64,
            macs: 0,
            output: vec![walk.c, walk.h, walk.w],
        });
    }
    let (fin, fout) = (walk.c, config.num_outputs);
    walk.layers.push(LayerComplexity {
        name: "head".into(),
        params: (fin * fout + fout) as u64,
        macs: (fin * fout) as u64,
        output: vec![fout],
    });
    Ok(ComplexityReport {
        params: walk.layers.iter().map(|l| l.params).sum(),
        macs: walk.layers.iter().map(|l| l.macs).sum(),
        input_shape: input_shape.to_vec(),
        layers: walk.layers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::config::{make_teacher_variant, REFERENCE_INPUT};

    #[test]
    fn single_conv_mac_formula() {
        // 3x3, 2 -> 4 channels, 8x8 output
        let spec = ConvSpec::new(2, 4, 3, 1, 1);
        assert_eq!(spec.macs(8, 8), 4608);
        let mut brute = 0u64;
        for _oc in 0..4 {
            for _oy in 0..8 {
                for _ox in 0..8 {
                    for _ic in 0..2 {
                        for _k in 0..9 {
                            brute += 1;
                        }
                    }
                }
            }
        }
        assert_eq!(brute, 4608);
    }

    #[test]
    fn head_params_include_bias() {
        let cfg = StudentConfig::default_student(10);
        let r = count_complexity(&cfg, &REFERENCE_INPUT).unwrap();
        let head = r.layers.last().unwrap();
        assert_eq!(head.params as usize, cfg.final_width() * 10 + 10);
        let cfg64 = StudentConfig::from_widths(1, 16, &[(16, 1, 1), (32, 1, 2), (64, 1, 2)], 2.0, 3, 10);
        let r = count_complexity(&cfg64, &REFERENCE_INPUT).unwrap();
        assert_eq!(r.layers.last().unwrap().params, 650);
    }

    #[test]
    fn default_student_fits_budget() {
        let r = count_complexity(&StudentConfig::default_student(10), &REFERENCE_INPUT).unwrap();
        assert!((54_000..=66_000).contains(&r.params), "params {}", r.params);
        assert!(r.macs <= 30_000_000, "macs {}", r.macs);
    }

    #[test]
    fn wider_variant_has_more_params() {
        let base = StudentConfig::default_student(10);
        let wide = make_teacher_variant(&base, 2.0, &[0, 0, 0]).unwrap();
        let a = count_complexity(&base, &REFERENCE_INPUT).unwrap();
        let b = count_complexity(&wide, &REFERENCE_INPUT).unwrap();
        assert!(b.params > a.params);
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let cfg = StudentConfig::default_student(10);
        assert!(count_complexity(&cfg, &[2, 64, 44]).is_err());
        assert!(count_complexity(&cfg, &[64, 44]).is_err());
    }
}
