//! Network architecture descriptor.
//!
//! The descriptor is a flat op list with explicit skip slots, rich enough
//! for the encoder-decoder used by the pipeline and for the degenerate
//! single-conv nets the gradient tests build.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ArchError {
    #[error("op {index}: {reason}")]
    BadOp { index: usize, reason: String },
    #[error("input dims {0:?} not supported: {1}")]
    BadDims((usize, usize, usize), String),
    #[error("network outputs {got} channels; input has {want}")]
    ChannelMismatch { want: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerOp {
    /// 3D convolution, zero-padded to preserve dims (stride 1) or halve
    /// them (stride 2); optional fused ReLU.
    Conv {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        relu: bool,
    },
    /// Nearest-neighbor x2 upsampling in all three axes.
    Upsample2,
    /// Records the current activation under a slot id.
    SaveSkip { slot: usize },
    /// Concatenates the current activation with a saved slot (current
    /// channels first).
    ConcatSkip { slot: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Arch {
    pub in_ch: usize,
    pub ops: Vec<LayerOp>,
    pub global_residual: bool,
}

impl Arch {
    /// The 3-level encoder-decoder shipped as the restoration network:
    /// widths 8/16/32, stride-2 downsampling, nearest-neighbor upsampling
    /// with skip concatenation, a final 1x1x1 projection, and a global
    /// input-to-output residual. Requires dims divisible by 4.
    pub fn default_unet() -> Arch {
        use LayerOp::*;
        let conv = |i, o| Conv { in_ch: i, out_ch: o, kernel: 3, stride: 1, relu: true };
        let down = |i, o| Conv { in_ch: i, out_ch: o, kernel: 3, stride: 2, relu: true };
        Arch {
            in_ch: 1,
            ops: vec![
                conv(1, 8),
                conv(8, 8),
                SaveSkip { slot: 0 },
                down(8, 16),
                conv(16, 16),
                SaveSkip { slot: 1 },
                down(16, 32),
                conv(32, 32),
                Upsample2,
                conv(32, 16),
                ConcatSkip { slot: 1 },
                conv(32, 16),
                Upsample2,
                conv(16, 8),
                ConcatSkip { slot: 0 },
                conv(16, 8),
                Conv { in_ch: 8, out_ch: 1, kernel: 1, stride: 1, relu: false },
            ],
            global_residual: true,
        }
    }

    /// Channel count after every op; validates wiring.
    pub fn validate(&self) -> Result<(), ArchError> {
        if self.in_ch == 0 {
            return Err(ArchError::BadOp { index: 0, reason: "input channels must be positive".into() });
        }
        let mut ch = self.in_ch;
        let mut slots: std::collections::HashMap<usize, usize> = Default::default();
        for (index, op) in self.ops.iter().enumerate() {
            match *op {
                LayerOp::Conv { in_ch, out_ch, kernel, stride, .. } => {
                    if in_ch != ch {
                        return Err(ArchError::BadOp {
                            index,
                            reason: format!("conv expects {in_ch} channels, gets {ch}"),
                        });
                    }
                    if out_ch == 0 {
                        return Err(ArchError::BadOp { index, reason: "zero output channels".into() });
                    }
                    if !(kernel == 1 || kernel == 3) {
                        return Err(ArchError::BadOp { index, reason: format!("kernel {kernel}") });
                    }
                    if !(stride == 1 || stride == 2) || (kernel == 1 && stride != 1) {
                        return Err(ArchError::BadOp { index, reason: format!("stride {stride}") });
                    }
                    ch = out_ch;
                }
                LayerOp::Upsample2 => {}
                LayerOp::SaveSkip { slot } => {
                    slots.insert(slot, ch);
                }
                LayerOp::ConcatSkip { slot } => {
                    let saved = *slots.get(&slot).ok_or_else(|| ArchError::BadOp {
                        index,
                        reason: format!("slot {slot} concatenated before being saved"),
                    })?;
                    ch += saved;
                }
            }
        }
        if self.global_residual && ch != self.in_ch {
            return Err(ArchError::ChannelMismatch { want: self.in_ch, got: ch });
        }
        Ok(())
    }

    /// Verifies the op list is consistent with `dims` (stride-2 stages need
    /// even dims, upsamples must restore them) and that the output shape
    /// equals the input shape.
    pub fn check_dims(&self, dims: (usize, usize, usize)) -> Result<(), ArchError> {
        let mut d = dims;
        for (index, op) in self.ops.iter().enumerate() {
            match *op {
                LayerOp::Conv { stride: 2, .. } => {
                    if d.0 % 2 != 0 || d.1 % 2 != 0 || d.2 % 2 != 0 {
                        return Err(ArchError::BadDims(
                            dims,
                            format!("op {index} needs even dims, has {d:?}"),
                        ));
                    }
                    d = (d.0 / 2, d.1 / 2, d.2 / 2);
                }
                LayerOp::Upsample2 => d = (d.0 * 2, d.1 * 2, d.2 * 2),
                _ => {}
            }
        }
        if d != dims {
            return Err(ArchError::BadDims(dims, format!("output dims {d:?} differ from input")));
        }
        Ok(())
    }

    /// Shapes `(out_ch, in_ch, kernel)` of the parameterized ops, in order.
    pub fn conv_shapes(&self) -> Vec<(usize, usize, usize)> {
        self.ops
            .iter()
            .filter_map(|op| match *op {
                LayerOp::Conv { in_ch, out_ch, kernel, .. } => Some((out_ch, in_ch, kernel)),
                _ => None,
            })
            .collect()
    }

    pub fn n_params(&self) -> usize {
        self.conv_shapes()
            .iter()
            .map(|&(o, i, k)| o * i * k * k * k + o)
            .sum()
    }
}
