use rayon::prelude::*;

use crate::error::{GmrError, Result};
use crate::scalar::{gemm, Layout, Scalar};
use crate::tensor::Tensor;

use super::im2col::{col2im_plane_add, im2col_plane};
use super::{ConvConfig, ConvGeom};

/// Upper bound on the unfolded column buffer, in elements.
const COLS_BUDGET: usize = 1 << 22;

pub(crate) fn kernel_width(kernel_shape: &[usize], dims: usize) -> Result<usize> {
    if kernel_shape.len() != dims + 2 {
        return Err(GmrError::Shape(format!("{dims}-d kernel needs {} axes, got {kernel_shape:?}", dims + 2)));
    }
    let k = kernel_shape[2];
    if kernel_shape[2..].iter().any(|&e| e != k) {
        return Err(GmrError::Shape(format!("kernel must be cubic, got {kernel_shape:?}")));
    }
    Ok(k)
}

/// Contiguous column blocks of the `(C_out, C_in·taps)` kernel matrix,
/// each spanning whole input channels.
struct ChannelBlocks<T> {
    /// `(first channel, channel count, C_out × count·taps block)`
    blocks: Vec<(usize, usize, Vec<T>)>,
}

impl<T: Scalar> ChannelBlocks<T> {
    fn split(kernel: &[T], c_out: usize, c_in: usize, taps: usize, positions: usize) -> Self {
        let per_block = (COLS_BUDGET / (taps * positions).max(1)).clamp(1, c_in);
        let row = c_in * taps;
        let mut blocks = Vec::new();
        let mut c0 = 0;
        while c0 < c_in {
            let cnt = per_block.min(c_in - c0);
            let width = cnt * taps;
            let mut m = Vec::with_capacity(c_out * width);
            for o in 0..c_out {
                m.extend_from_slice(&kernel[o * row + c0 * taps..o * row + c0 * taps + width]);
            }
            blocks.push((c0, cnt, m));
            c0 += cnt;
        }
        Self { blocks }
    }
}

fn check_direct<T: Scalar>(input: &Tensor<T>, kernel: &Tensor<T>, cfg: &ConvConfig) -> Result<ConvGeom> {
    let k = kernel_width(kernel.shape(), cfg.dims)?;
    let g = ConvGeom::resolve(input.shape(), k, cfg)?;
    if kernel.shape()[1] != g.c_in {
        return Err(GmrError::ChannelMismatch { expected: kernel.shape()[1], got: g.c_in });
    }
    Ok(g)
}

/// Cross-correlation of `input` with a dense `(C_out, C_in, k, ..)` kernel,
/// zero padded per `cfg`.
pub fn conv_direct<T: Scalar>(input: &Tensor<T>, kernel: &Tensor<T>, cfg: &ConvConfig) -> Result<Tensor<T>> {
    let g = check_direct(input, kernel, cfg)?;
    let c_out = kernel.shape()[0];
    let (taps, positions, plane) = (g.taps(), g.out_positions(), g.in_positions());
    let blocks = ChannelBlocks::split(kernel.data(), c_out, g.c_in, taps, positions);

    let mut out = Tensor::zeros(&g.output_shape(c_out));
    out.data_mut().par_chunks_mut(c_out * positions).zip(input.data().par_chunks(g.c_in * plane)).for_each_init(
        Vec::new,
        |cols, (y, x)| {
            for (bi, (c0, cnt, kb)) in blocks.blocks.iter().enumerate() {
                cols.resize(cnt * taps * positions, T::zero());
                for c in 0..*cnt {
                    let src = &x[(c0 + c) * plane..(c0 + c + 1) * plane];
                    im2col_plane(src, &g, &mut cols[c * taps * positions..(c + 1) * taps * positions]);
                }
                let beta = if bi == 0 { T::zero() } else { T::one() };
                gemm(c_out, cnt * taps, positions, kb, Layout::Normal, cols, Layout::Normal, beta, y);
            }
        },
    );
    Ok(out)
}

/// Gradients of [`conv_direct`] with respect to its input and kernel.
pub fn conv_direct_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    cfg: &ConvConfig,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let g = check_direct(input, kernel, cfg)?;
    let c_out = kernel.shape()[0];
    if grad_out.shape() != g.output_shape(c_out).as_slice() {
        return Err(GmrError::Shape(format!(
            "output gradient {:?} does not match output {:?}",
            grad_out.shape(),
            g.output_shape(c_out)
        )));
    }
    let (taps, positions, plane) = (g.taps(), g.out_positions(), g.in_positions());
    let blocks = ChannelBlocks::split(kernel.data(), c_out, g.c_in, taps, positions);
    let row = g.c_in * taps;

    let mut grad_input = Tensor::zeros(input.shape());
    let partials: Vec<Vec<T>> = grad_input
        .data_mut()
        .par_chunks_mut(g.c_in * plane)
        .zip(input.data().par_chunks(g.c_in * plane))
        .zip(grad_out.data().par_chunks(c_out * positions))
        .map_init(
            || (Vec::new(), Vec::new(), Vec::new()),
            |(cols, gcols, gkb), ((gx, x), gy)| {
                let mut gk = vec![T::zero(); c_out * row];
                for (c0, cnt, kb) in &blocks.blocks {
                    let rows = cnt * taps;
                    cols.resize(rows * positions, T::zero());
                    gcols.resize(rows * positions, T::zero());
                    gkb.resize(c_out * rows, T::zero());
                    for c in 0..*cnt {
                        let src = &x[(c0 + c) * plane..(c0 + c + 1) * plane];
                        im2col_plane(src, &g, &mut cols[c * taps * positions..(c + 1) * taps * positions]);
                    }
                    // dK_block = G · colsᵀ
                    gemm(c_out, positions, rows, gy, Layout::Normal, cols, Layout::Transposed, T::zero(), gkb);
                    for o in 0..c_out {
                        gk[o * row + c0 * taps..o * row + c0 * taps + rows]
                            .copy_from_slice(&gkb[o * rows..(o + 1) * rows]);
                    }
                    // dcols = K_blockᵀ · G
                    gemm(rows, c_out, positions, kb, Layout::Transposed, gy, Layout::Normal, T::zero(), gcols);
                    for c in 0..*cnt {
                        let dst = &mut gx[(c0 + c) * plane..(c0 + c + 1) * plane];
                        col2im_plane_add(&gcols[c * taps * positions..(c + 1) * taps * positions], &g, dst);
                    }
                }
                gk
            },
        )
        .collect();

    let mut grad_kernel = Tensor::zeros(kernel.shape());
    for part in &partials {
        for (acc, &v) in grad_kernel.data_mut().iter_mut().zip(part) {
            *acc = *acc + v;
        }
    }
    Ok((grad_input, grad_kernel))
}
