//! Convolution engines.
//!
//! Two routes compute the same thing:
//!
//! * [`conv_direct`]: plain cross-correlation with a dense kernel
//!   (im2col + GEMM). With [`materialize_kernel`](crate::gmr_kernel::materialize_kernel)
//!   this is the reference for a GMR layer.
//! * [`gmr_conv`]: the two-stage route. Stage 1 convolves every input
//!   channel with each of the `n` ring images (depthwise); stage 2 mixes
//!   the `C_in·n` ring responses into `C_out` channels with the ring
//!   weights (a 1×1 convolution).
//!
//! Both work on 2D `(B, C, H, W)` and 3D `(B, C, D, H, W)` inputs.

mod direct;
mod gmr;
mod im2col;

pub use direct::{conv_direct, conv_direct_backward};
pub(crate) use gmr::sigma_gradient;
pub use gmr::{
    gmr_conv, gmr_conv_backward, gmr_conv_backward_with_basis, gmr_conv_tape, gmr_conv_with_basis, GmrGradients,
    GmrTape,
};

use serde::{Deserialize, Serialize};

use crate::error::{GmrError, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvConfig {
    pub stride: usize,
    /// zero padding per spatial axis
    pub padding: Vec<usize>,
    pub dims: usize,
}

impl ConvConfig {
    pub fn new(stride: usize, padding: Vec<usize>, dims: usize) -> Result<Self> {
        if !(dims == 2 || dims == 3) {
            return Err(GmrError::InvalidArgument(format!("spatial dimensionality {dims}")));
        }
        if stride == 0 {
            return Err(GmrError::InvalidArgument("stride must be at least 1".into()));
        }
        if padding.len() != dims {
            return Err(GmrError::InvalidArgument(format!("{} padding values for {dims} spatial axes", padding.len())));
        }
        Ok(Self { stride, padding, dims })
    }

    /// Stride 1 with `⌊k/2⌋` zero padding on every axis: output extents
    /// equal input extents.
    pub fn same(k: usize, dims: usize) -> Self {
        Self { stride: 1, padding: vec![k / 2; dims], dims }
    }

    /// Whether rotations and flips of the input commute with the layer:
    /// stride 1 and the symmetric "same" padding.
    pub fn is_equivariant(&self, k: usize) -> bool {
        self.stride == 1 && self.padding.iter().all(|&p| p == k / 2)
    }
}

/// Multiply-accumulate counts per batch element.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCount {
    /// `H·W·k^d·C_in·C_out`
    pub direct: u64,
    /// `H·W·n·(k^d + C_in·C_out)`
    pub gmr: u64,
}

impl OpCount {
    pub fn ratio(&self) -> f64 {
        self.gmr as f64 / self.direct as f64
    }
}

/// MAC accounting for a width-`k`, `n`-ring layer on an input with the
/// given spatial extents. `H·W` is the output position count under `cfg`.
pub fn op_count(cfg: &ConvConfig, k: usize, n: usize, c_in: usize, c_out: usize, spatial: &[usize]) -> Result<OpCount> {
    if spatial.len() != cfg.dims {
        return Err(GmrError::InvalidArgument(format!("{} spatial extents for a {}-d layer", spatial.len(), cfg.dims)));
    }
    let mut positions = 1u64;
    for (&e, &p) in spatial.iter().zip(&cfg.padding) {
        positions *= output_extent(e, k, p, cfg.stride)? as u64;
    }
    let taps = (k as u64).pow(cfg.dims as u32);
    let pairs = (c_in * c_out) as u64;
    Ok(OpCount { direct: positions * taps * pairs, gmr: positions * n as u64 * (taps + pairs) })
}

pub(crate) fn output_extent(input: usize, k: usize, pad: usize, stride: usize) -> Result<usize> {
    let span = input + 2 * pad;
    if span < k {
        return Err(GmrError::Shape(format!("padded extent {span} is smaller than kernel width {k}")));
    }
    if !(span - k).is_multiple_of(stride) {
        return Err(GmrError::Shape(format!("(extent {input} + 2·{pad} − {k}) is not divisible by stride {stride}")));
    }
    Ok((span - k) / stride + 1)
}

/// Resolved convolution geometry, always expressed with three spatial
/// axes (2D inputs get a unit depth axis).
#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub dims: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub pad: [usize; 3],
    pub stride: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeom {
    pub fn resolve(input_shape: &[usize], k: usize, cfg: &ConvConfig) -> Result<Self> {
        let dims = cfg.dims;
        if input_shape.len() != dims + 2 {
            return Err(GmrError::Shape(format!(
                "{dims}-d convolution needs a {}-axis input, got {input_shape:?}",
                dims + 2
            )));
        }
        let lead = 3 - dims;
        let mut g = ConvGeom {
            batch: input_shape[0],
            c_in: input_shape[1],
            dims,
            input: [1; 3],
            kernel: [1; 3],
            pad: [0; 3],
            stride: [1; 3],
            output: [1; 3],
        };
        for d in 0..dims {
            let a = lead + d;
            g.input[a] = input_shape[2 + d];
            g.kernel[a] = k;
            g.pad[a] = cfg.padding[d];
            g.stride[a] = cfg.stride;
            g.output[a] = output_extent(g.input[a], k, cfg.padding[d], cfg.stride)?;
        }
        Ok(g)
    }

    pub fn in_positions(&self) -> usize {
        self.input.iter().product()
    }

    pub fn out_positions(&self) -> usize {
        self.output.iter().product()
    }

    pub fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn output_shape(&self, c_out: usize) -> Vec<usize> {
        let mut s = vec![self.batch, c_out];
        s.extend(&self.output[3 - self.dims..]);
        s
    }
}
