use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::ConvSpec;

/// Channel widths are kept on this granularity.
pub const CHANNEL_MULTIPLE: usize = 8;

/// Number of stages in every backbone.
pub const STAGE_COUNT: usize = 3;

/// Reference network input: 1 channel x 64 mel bins x 44 frames.
pub const REFERENCE_INPUT: [usize; 3] = [1, 64, 44];

/// One expand–depthwise–project block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub expand_ratio: f64,
    pub kernel: usize,
    pub stride: usize,
}

impl BlockConfig {
    pub fn hidden(&self) -> usize {
        (self.in_channels as f64 * self.expand_ratio).round() as usize
    }

    pub fn has_residual(&self) -> bool {
        self.stride == 1 && self.in_channels == self.out_channels
    }

    pub fn expand_spec(&self) -> ConvSpec {
        ConvSpec::pointwise(self.in_channels, self.hidden())
    }

    pub fn depthwise_spec(&self) -> ConvSpec {
        ConvSpec::depthwise(self.hidden(), self.kernel, self.stride)
    }

    pub fn project_spec(&self) -> ConvSpec {
        ConvSpec::pointwise(self.hidden(), self.out_channels)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub blocks: Vec<BlockConfig>,
}

/// Declarative backbone description; everything else is derived from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudentConfig {
    pub input_channels: usize,
    pub stem: ConvSpec,
    pub stages: Vec<StageConfig>,
    pub num_outputs: usize,
}

impl StudentConfig {
    /// The default student: about 60k parameters, under 30M MACs at [`REFERENCE_INPUT`].
    pub fn default_student(num_outputs: usize) -> Self {
        Self::from_widths(1, 24, &[(32, 2, 1), (40, 2, 2), (48, 2, 2)], 3.0, 3, num_outputs)
    }

    /// Builds a config from a stem width and `(width, depth, first_stride)` per stage.
    pub fn from_widths(
        input_channels: usize,
        stem_width: usize,
        stages: &[(usize, usize, usize)],
        expand_ratio: f64,
        kernel: usize,
        num_outputs: usize,
    ) -> Self {
        let stem = ConvSpec::new(input_channels, stem_width, 3, 2, 1);
        let mut prev = stem_width;
        let stages = stages
            .iter()
            .map(|&(width, depth, first_stride)| {
                let blocks = (0..depth)
                    .map(|i| {
                        let b = BlockConfig {
                            in_channels: prev,
                            out_channels: width,
                            expand_ratio,
                            kernel,
                            stride: if i == 0 { first_stride } else { 1 },
                        };
                        prev = width;
                        b
                    })
                    .collect();
                StageConfig { blocks }
            })
            .collect();
        Self { input_channels, stem, stages, num_outputs }
    }

    pub fn blocks(&self) -> impl Iterator<Item = &BlockConfig> {
        self.stages.iter().flat_map(|s| s.blocks.iter())
    }

    pub fn final_width(&self) -> usize {
        self.blocks().last().map_or(self.stem.out_channels, |b| b.out_channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.len() != STAGE_COUNT {
            return Err(Error::config("stages", format!("expected exactly {STAGE_COUNT} stages, got {}", self.stages.len())));
        }
        if self.num_outputs == 0 {
            return Err(Error::config("num_outputs", "must be positive"));
        }
        if self.input_channels == 0 {
            return Err(Error::config("input_channels", "must be positive"));
        }
        self.stem.validate().map_err(|e| Error::config("stem", e.to_string()))?;
        if self.stem.in_channels != self.input_channels {
            return Err(Error::config("stem.in_channels", "must equal input_channels"));
        }
        if !self.stem.out_channels.is_multiple_of(CHANNEL_MULTIPLE) {
            return Err(Error::config("stem.out_channels", format!("must be a multiple of {CHANNEL_MULTIPLE}")));
        }
        let mut prev = self.stem.out_channels;
        for (si, stage) in self.stages.iter().enumerate() {
            if stage.blocks.is_empty() {
                return Err(Error::config(format!("stages[{si}].blocks"), "stage has no blocks"));
            }
            for (bi, b) in stage.blocks.iter().enumerate() {
                let field = |f: &str| format!("stages[{si}].blocks[{bi}].{f}");
                if b.in_channels != prev {
                    return Err(Error::config(field("in_channels"), format!("expected {prev} to match the previous layer")));
                }
                for (name, w) in [("in_channels", b.in_channels), ("out_channels", b.out_channels)] {
                    if w == 0 || w % CHANNEL_MULTIPLE != 0 {
                        return Err(Error::config(field(name), format!("{w} is not a positive multiple of {CHANNEL_MULTIPLE}")));
                    }
                }
                if !(b.expand_ratio > 0.0) || b.hidden() == 0 {
                    return Err(Error::config(field("expand_ratio"), "hidden width must be at least 1"));
                }
                if b.kernel == 0 || b.kernel % 2 == 0 {
                    return Err(Error::config(field("kernel"), "must be odd and positive"));
                }
                if b.stride != 1 && b.stride != 2 {
                    return Err(Error::config(field("stride"), "must be 1 or 2"));
                }
                prev = b.out_channels;
            }
        }
        Ok(())
    }

    pub fn with_outputs(mut self, num_outputs: usize) -> Self {
        self.num_outputs = num_outputs;
        self
    }
}

fn round_width(width: usize, multiplier: f64) -> usize {
    let units = (width as f64 * multiplier / CHANNEL_MULTIPLE as f64).round() as usize;
    units.max(1) * CHANNEL_MULTIPLE
}

/// Widens every stage by `width_multiplier` (re-rounded to multiples of 8)
/// and appends `depth_additions[s]` stride-1 blocks to stage `s`.
pub fn make_teacher_variant(base: &StudentConfig, width_multiplier: f64, depth_additions: &[usize]) -> Result<StudentConfig> {
    base.validate()?;
    if !(width_multiplier >= 1.0) {
        return Err(Error::config("width_multiplier", format!("must be >= 1, got {width_multiplier}")));
    }
    if depth_additions.len() != STAGE_COUNT {
        return Err(Error::config("depth_additions", format!("expected {STAGE_COUNT} entries")));
    }
    let mut cfg = base.clone();
    cfg.stem.out_channels = round_width(base.stem.out_channels, width_multiplier);
    let mut prev = cfg.stem.out_channels;
    for (stage, &extra) in cfg.stages.iter_mut().zip(depth_additions) {
        for b in stage.blocks.iter_mut() {
            b.in_channels = prev;
            b.out_channels = round_width(b.out_channels, width_multiplier);
            prev = b.out_channels;
        }
        let template = stage.blocks.last().expect("validated").clone();
        for _ in 0..extra {
            stage.blocks.push(BlockConfig { in_channels: prev, stride: 1, ..template.clone() });
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// The five widened student variants used as the default teacher recipe.
pub fn default_teacher_recipe() -> Vec<(f64, [usize; 3])> {
    vec![(1.5, [0, 1, 0]), (2.0, [0, 0, 1]), (2.0, [1, 0, 0]), (3.0, [0, 0, 0]), (4.0, [0, 0, 0])]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_student_is_valid() {
        StudentConfig::default_student(10).validate().unwrap();
    }

    #[test]
    fn residual_only_when_shapes_align() {
        let cfg = StudentConfig::default_student(10);
        for b in cfg.blocks() {
            assert_eq!(b.has_residual(), b.stride == 1 && b.in_channels == b.out_channels);
        }
        assert!(cfg.blocks().any(|b| b.has_residual()));
        assert!(cfg.blocks().any(|b| !b.has_residual()));
    }

    #[test]
    fn validation_names_offending_field() {
        let mut cfg = StudentConfig::default_student(10);
        cfg.stages[1].blocks[0].kernel = 4;
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("stages[1].blocks[0].kernel"), "{err}");

        let mut cfg = StudentConfig::default_student(10);
        cfg.stages.pop();
        assert!(cfg.validate().unwrap_err().to_string().contains("stages"));

        let mut cfg = StudentConfig::default_student(10);
        cfg.stages[0].blocks[0].out_channels = 20;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn identity_variant_equals_base() {
        let base = StudentConfig::default_student(10);
        assert_eq!(make_teacher_variant(&base, 1.0, &[0, 0, 0]).unwrap(), base);
    }

    #[test]
    fn variant_rejects_shrinking() {
        let base = StudentConfig::default_student(10);
        assert!(make_teacher_variant(&base, 0.5, &[0, 0, 0]).is_err());
        assert!(make_teacher_variant(&base, 2.0, &[0, 0]).is_err());
    }

    #[test]
    fn variant_widths_stay_on_grid() {
        let base = StudentConfig::default_student(10);
        let v = make_teacher_variant(&base, 1.5, &[1, 2, 0]).unwrap();
        assert!(v.blocks().all(|b| b.out_channels % 8 == 0));
        assert_eq!(v.stages[1].blocks.len(), base.stages[1].blocks.len() + 2);
    }
}
