//! Stage-based detector architectures: the searchable genotype, its string
//! encoding, FLOPS accounting, network instantiation and checkpoints.

mod checkpoint;
mod detector;
mod encoding;
mod flops;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Metadata, CHECKPOINT_VERSION};
pub use detector::{param_shapes, Detector, DetectorOutput, ADAPTER_DIM};
pub use encoding::{decode_arch, encode_arch, ArchParseError};
pub use flops::{conv_layers, flops, flops_breakdown, ConvLayer, FlopsBreakdown, Part};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::TensorError;

pub const NUM_STAGES: usize = 4;
/// Per-stage output widths of the desk-scale base family.
pub const BASE_WIDTHS: [usize; NUM_STAGES] = [8, 16, 32, 64];
pub const BASE_STEM: usize = 8;
pub const BASE_NECK: usize = 32;
pub const STEM_STRIDE: usize = 2;
/// Stride of the grid the detection head runs on.
pub const HEAD_STRIDE: usize = 8;
/// Foreground classes; background is index `NUM_CLASSES`.
pub const NUM_CLASSES: usize = 3;

#[derive(Debug, Error)]
pub enum NetError {
    #[error(transparent)]
    Parse(#[from] ArchParseError),
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("resolution {h}x{w} is not divisible by the total stride {stride}")]
    Resolution { h: usize, w: usize, stride: usize },
    #[error("parameters do not match architecture:\n{0}")]
    ParamMismatch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BlockKind {
    Basic,
    Bottleneck,
}

impl BlockKind {
    pub fn convs(self) -> usize {
        match self {
            BlockKind::Basic => 2,
            BlockKind::Bottleneck => 3,
        }
    }
}

/// One residual block: the output channels of each of its convolutions.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub channels: Vec<usize>,
    pub stride: usize,
    pub has_projection: bool,
}

impl BlockSpec {
    /// Block at `position` within stage `stage`; stride and projection follow
    /// from the position.
    pub fn at(kind: BlockKind, channels: Vec<usize>, stage: usize, position: usize) -> Self {
        let first = position == 0;
        Self { kind, channels, stride: if first { stage_stride(stage) } else { 1 }, has_projection: first }
    }

    pub fn out_width(&self) -> usize {
        *self.channels.last().expect("blocks have at least one conv")
    }

    /// Index of the conv that carries the block's stride.
    pub fn strided_conv(&self) -> usize {
        match self.kind {
            BlockKind::Basic => 0,
            BlockKind::Bottleneck => 1,
        }
    }
}

/// Stride of the first block of `stage`.
pub fn stage_stride(stage: usize) -> usize {
    if stage == 0 {
        1
    } else {
        2
    }
}

/// Cumulative stride at the output of `stage`.
pub fn stage_output_stride(stage: usize) -> usize {
    STEM_STRIDE * (0..=stage).map(stage_stride).product::<usize>()
}

pub fn total_stride() -> usize {
    stage_output_stride(NUM_STAGES - 1)
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArchSpec {
    pub stages: Vec<Vec<BlockSpec>>,
    pub neck_width: usize,
    pub stem_width: usize,
}

impl ArchSpec {
    /// Basic-block architecture with uniform per-stage widths.
    pub fn basic(depths: [usize; NUM_STAGES], widths: [usize; NUM_STAGES], stem_width: usize, neck_width: usize) -> Self {
        let stages = (0..NUM_STAGES)
            .map(|s| (0..depths[s]).map(|b| BlockSpec::at(BlockKind::Basic, vec![widths[s]; 2], s, b)).collect())
            .collect();
        Self { stages, neck_width, stem_width }
    }

    /// The desk-scale base student: one basic block per stage at base widths.
    pub fn desk_base() -> Self {
        Self::basic([1; NUM_STAGES], BASE_WIDTHS, BASE_STEM, BASE_NECK)
    }

    pub fn depths(&self) -> Vec<usize> {
        self.stages.iter().map(Vec::len).collect()
    }

    pub fn stage_width(&self, stage: usize) -> usize {
        self.stages[stage][0].out_width()
    }

    /// Input width of block `block` in `stage`.
    pub fn block_in_width(&self, stage: usize, block: usize) -> usize {
        if block > 0 {
            self.stage_width(stage)
        } else if stage > 0 {
            self.stage_width(stage - 1)
        } else {
            self.stem_width
        }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let bad = |m: String| Err(NetError::InvalidArch(m));
        if self.stages.len() != NUM_STAGES {
            return bad(format!("expected {NUM_STAGES} stages, got {}", self.stages.len()));
        }
        if self.stem_width == 0 || self.neck_width == 0 {
            return bad("stem and neck widths must be positive".into());
        }
        for (s, stage) in self.stages.iter().enumerate() {
            if stage.is_empty() {
                return bad(format!("stage {s} has no blocks"));
            }
            let width = stage[0].out_width();
            for (b, block) in stage.iter().enumerate() {
                if block.channels.len() != block.kind.convs() {
                    return bad(format!(
                        "stage {s} block {b}: {:?} block needs {} channel counts, got {}",
                        block.kind,
                        block.kind.convs(),
                        block.channels.len()
                    ));
                }
                if block.channels.iter().any(|&c| c == 0) {
                    return bad(format!("stage {s} block {b}: zero channel count"));
                }
                let expect = BlockSpec::at(block.kind, block.channels.clone(), s, b);
                if block.stride != expect.stride || block.has_projection != expect.has_projection {
                    return bad(format!(
                        "stage {s} block {b}: stride {} / projection {} (expected {} / {})",
                        block.stride, block.has_projection, expect.stride, expect.has_projection
                    ));
                }
                if block.out_width() != width {
                    return bad(format!(
                        "stage {s} block {b}: output width {} differs from stage width {width}",
                        block.out_width()
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn check_resolution(&self, h: usize, w: usize) -> Result<(), NetError> {
        let stride = total_stride();
        if h == 0 || w == 0 || h % stride != 0 || w % stride != 0 {
            return Err(NetError::Resolution { h, w, stride });
        }
        Ok(())
    }

    pub fn num_blocks(&self) -> usize {
        self.stages.iter().map(Vec::len).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn base_is_valid_and_strided() {
        let a = ArchSpec::desk_base();
        a.validate().unwrap();
        assert_eq!(total_stride(), 16);
        assert_eq!((0..4).map(stage_output_stride).collect::<Vec<_>>(), vec![2, 4, 8, 16]);
        assert!(a.check_resolution(48, 48).is_ok());
        assert!(a.check_resolution(40, 40).is_err());
    }

    #[test]
    fn validation_catches_width_and_stride_errors() {
        let mut a = ArchSpec::basic([2, 1, 1, 1], BASE_WIDTHS, 8, 16);
        a.stages[0][1].channels[1] = 9;
        assert!(a.validate().is_err());
        let mut a = ArchSpec::desk_base();
        a.stages[2][0].stride = 1;
        assert!(a.validate().is_err());
        let mut a = ArchSpec::desk_base();
        a.stages.pop();
        assert!(a.validate().is_err());
    }
}
