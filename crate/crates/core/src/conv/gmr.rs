use rayon::prelude::*;

use crate::error::{GmrError, Result};
use crate::gmr_kernel::{basis_sigma_jacobian, GmrLayerParams};
use crate::scalar::{gemm, Layout, Scalar};
use crate::tensor::Tensor;

use super::im2col::{col2im_plane_add, im2col_plane};
use super::{ConvConfig, ConvGeom};

/// Stage-1 ring responses kept from a forward pass, laid out as
/// `(B, C_in·n, positions)` with channel-major `c·n + i` ordering.
#[derive(Clone, Debug)]
pub struct GmrTape<T> {
    pub stage1: Vec<T>,
}

/// Reverse-mode derivatives of a GMR layer.
#[derive(Clone, Debug)]
pub struct GmrGradients {
    pub grad_input: Tensor,
    /// `(C_out, C_in, n)`
    pub grad_weights: Tensor,
    /// `(n, k, ..)`: derivative with respect to every basis tap
    pub grad_basis: Tensor,
    /// one entry per ring; empty when the basis was supplied directly
    pub grad_log_sigma: Vec<f64>,
}

struct Shapes {
    geom: ConvGeom,
    c_out: usize,
    n: usize,
}

fn check_gmr<T: Scalar>(input: &Tensor<T>, weights: &Tensor<T>, basis: &Tensor<T>, cfg: &ConvConfig) -> Result<Shapes> {
    let bs = basis.shape();
    if bs.len() != cfg.dims + 1 || bs[1..].iter().any(|&e| e != bs[1]) {
        return Err(GmrError::Shape(format!("{}-d ring basis expected, got {bs:?}", cfg.dims)));
    }
    let (n, k) = (bs[0], bs[1]);
    let ws = weights.shape();
    if ws.len() != 3 || ws[2] != n {
        return Err(GmrError::Shape(format!("ring weights {ws:?} do not match {n} rings")));
    }
    let geom = ConvGeom::resolve(input.shape(), k, cfg)?;
    if geom.c_in != ws[1] {
        return Err(GmrError::ChannelMismatch { expected: ws[1], got: geom.c_in });
    }
    Ok(Shapes { geom, c_out: ws[0], n })
}

/// Stage 1 for one batch element: `(C_in·n) × positions`.
fn ring_responses<T: Scalar>(x: &[T], basis: &[T], s: &Shapes, out: &mut [T], cols: &mut Vec<T>) {
    let g = &s.geom;
    let (taps, positions, plane) = (g.taps(), g.out_positions(), g.in_positions());
    cols.resize(taps * positions, T::zero());
    for c in 0..g.c_in {
        im2col_plane(&x[c * plane..(c + 1) * plane], g, cols);
        let dst = &mut out[c * s.n * positions..(c + 1) * s.n * positions];
        gemm(s.n, taps, positions, basis, Layout::Normal, cols, Layout::Normal, T::zero(), dst);
    }
}

fn forward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    basis: &Tensor<T>,
    cfg: &ConvConfig,
    keep: bool,
) -> Result<(Tensor<T>, Option<GmrTape<T>>)> {
    let s = check_gmr(input, weights, basis, cfg)?;
    let g = &s.geom;
    let (positions, plane) = (g.out_positions(), g.in_positions());
    let mixed = g.c_in * s.n;
    let mut out = Tensor::zeros(&g.output_shape(s.c_out));

    let run = |y: &mut [T], x: &[T], stage1: &mut [T], cols: &mut Vec<T>| {
        ring_responses(x, basis.data(), &s, stage1, cols);
        gemm(s.c_out, mixed, positions, weights.data(), Layout::Normal, stage1, Layout::Normal, T::zero(), y);
    };

    let tape = if keep {
        let mut stage1 = vec![T::zero(); g.batch * mixed * positions];
        out.data_mut()
            .par_chunks_mut(s.c_out * positions)
            .zip(input.data().par_chunks(g.c_in * plane))
            .zip(stage1.par_chunks_mut(mixed * positions))
            .for_each_init(Vec::new, |cols, ((y, x), st)| run(y, x, st, cols));
        Some(GmrTape { stage1 })
    } else {
        out.data_mut().par_chunks_mut(s.c_out * positions).zip(input.data().par_chunks(g.c_in * plane)).for_each_init(
            || (vec![T::zero(); mixed * positions], Vec::new()),
            |(st, cols), (y, x)| run(y, x, st, cols),
        );
        None
    };
    Ok((out, tape))
}

/// Two-stage GMR convolution with an explicit ring basis `(n, k, ..)` and
/// ring weights `(C_out, C_in, n)`. Any basis works here, including the
/// nearest-ring ablation basis or a frozen inference basis.
pub fn gmr_conv_with_basis<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    basis: &Tensor<T>,
    cfg: &ConvConfig,
) -> Result<Tensor<T>> {
    forward(input, weights, basis, cfg, false).map(|(y, _)| y)
}

/// Like [`gmr_conv_with_basis`], also returning the stage-1 responses
/// needed by the backward pass.
pub fn gmr_conv_tape<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    basis: &Tensor<T>,
    cfg: &ConvConfig,
) -> Result<(Tensor<T>, GmrTape<T>)> {
    forward(input, weights, basis, cfg, true).map(|(y, t)| (y, t.expect("tape requested")))
}

/// GMR convolution with the basis rebuilt from the current sigmas.
pub fn gmr_conv(input: &Tensor, params: &GmrLayerParams, cfg: &ConvConfig) -> Result<Tensor> {
    check_dims(params, cfg)?;
    let basis = params.basis()?;
    gmr_conv_with_basis(input, &params.weights.w, &basis.rings, cfg)
}

fn check_dims(params: &GmrLayerParams, cfg: &ConvConfig) -> Result<()> {
    if params.geometry.dims != cfg.dims {
        return Err(GmrError::DimensionMismatch(format!(
            "{}-d layer applied with a {}-d configuration",
            params.geometry.dims, cfg.dims
        )));
    }
    Ok(())
}

#[derive(Default)]
struct Scratch {
    cols: Vec<f64>,
    gcols: Vec<f64>,
    gs: Vec<f64>,
    st: Vec<f64>,
}

/// Backward pass against an explicit basis. `tape` may carry the stage-1
/// responses of the matching forward call; they are recomputed otherwise.
pub fn gmr_conv_backward_with_basis(
    input: &Tensor,
    weights: &Tensor,
    basis: &Tensor,
    cfg: &ConvConfig,
    grad_out: &Tensor,
    tape: Option<&GmrTape<f64>>,
) -> Result<GmrGradients> {
    let s = check_gmr(input, weights, basis, cfg)?;
    let g = &s.geom;
    if grad_out.shape() != g.output_shape(s.c_out).as_slice() {
        return Err(GmrError::Shape(format!(
            "output gradient {:?} does not match output {:?}",
            grad_out.shape(),
            g.output_shape(s.c_out)
        )));
    }
    let (taps, positions, plane) = (g.taps(), g.out_positions(), g.in_positions());
    let mixed = g.c_in * s.n;
    if let Some(t) = tape {
        if t.stage1.len() != g.batch * mixed * positions {
            return Err(GmrError::Shape("stage-1 tape does not match this input".into()));
        }
    }

    let mut grad_input = Tensor::zeros(input.shape());
    // per batch element: (dW, dBasis)
    let partials: Vec<(Vec<f64>, Vec<f64>)> = grad_input
        .data_mut()
        .par_chunks_mut(g.c_in * plane)
        .enumerate()
        .map_init(Scratch::default, |sc, (b, gx)| {
            let x = &input.data()[b * g.c_in * plane..(b + 1) * g.c_in * plane];
            let gy = &grad_out.data()[b * s.c_out * positions..(b + 1) * s.c_out * positions];
            let Scratch { cols, gcols, gs, st } = sc;
            let stage1: &[f64] = match tape {
                Some(t) => &t.stage1[b * mixed * positions..(b + 1) * mixed * positions],
                None => {
                    st.resize(mixed * positions, 0.0);
                    ring_responses(x, basis.data(), &s, st, cols);
                    st
                }
            };

            // dW = G · S1ᵀ
            let mut gw = vec![0.0; s.c_out * mixed];
            gemm(s.c_out, positions, mixed, gy, Layout::Normal, stage1, Layout::Transposed, 0.0, &mut gw);
            // dS1 = Wᵀ · G
            gs.resize(mixed * positions, 0.0);
            gemm(mixed, s.c_out, positions, weights.data(), Layout::Transposed, gy, Layout::Normal, 0.0, gs);

            let mut gbasis = vec![0.0; s.n * taps];
            gcols.resize(taps * positions, 0.0);
            cols.resize(taps * positions, 0.0);
            for c in 0..g.c_in {
                let xs = &x[c * plane..(c + 1) * plane];
                let gsc = &gs[c * s.n * positions..(c + 1) * s.n * positions];
                im2col_plane(xs, g, cols);
                // dM += dS1_c · colsᵀ
                gemm(s.n, positions, taps, gsc, Layout::Normal, cols, Layout::Transposed, 1.0, &mut gbasis);
                // dcols = Mᵀ · dS1_c
                gemm(taps, s.n, positions, basis.data(), Layout::Transposed, gsc, Layout::Normal, 0.0, gcols);
                col2im_plane_add(gcols, g, &mut gx[c * plane..(c + 1) * plane]);
            }
            (gw, gbasis)
        })
        .collect();

    let mut grad_weights = Tensor::zeros(weights.shape());
    let mut grad_basis = Tensor::zeros(basis.shape());
    for (gw, gb) in &partials {
        grad_weights.data_mut().iter_mut().zip(gw).for_each(|(a, v)| *a += v);
        grad_basis.data_mut().iter_mut().zip(gb).for_each(|(a, v)| *a += v);
    }
    Ok(GmrGradients { grad_input, grad_weights, grad_basis, grad_log_sigma: Vec::new() })
}

/// Exact gradients of [`gmr_conv`] with respect to the input, the ring
/// weights and the per-ring log-sigmas.
pub fn gmr_conv_backward(
    input: &Tensor,
    params: &GmrLayerParams,
    cfg: &ConvConfig,
    grad_out: &Tensor,
) -> Result<GmrGradients> {
    check_dims(params, cfg)?;
    let basis = params.basis()?;
    let mut grads = gmr_conv_backward_with_basis(input, &params.weights.w, &basis.rings, cfg, grad_out, None)?;
    grads.grad_log_sigma = sigma_gradient(params, &grads.grad_basis)?;
    Ok(grads)
}

/// Chains a basis gradient through `∂M/∂log_sigma`.
pub(crate) fn sigma_gradient(params: &GmrLayerParams, grad_basis: &Tensor) -> Result<Vec<f64>> {
    let jac = basis_sigma_jacobian(&params.geometry, &params.sigma)?;
    let taps = params.geometry.taps();
    Ok((0..params.geometry.n)
        .map(|i| {
            let r = i * taps..(i + 1) * taps;
            jac.data()[r.clone()].iter().zip(&grad_basis.data()[r]).map(|(j, g)| j * g).sum()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv::conv_direct;
    use crate::gmr_kernel::{materialize_kernel, RingWeights};
    use crate::tensor::rel_error;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights_zero_output() {
        let mut p = GmrLayerParams::init(5, 3, 2, 2, 3, 1).unwrap();
        p.weights = RingWeights::zeros(3, 2, 3);
        let x = Tensor::randn(&[1, 2, 8, 8], &mut ChaCha8Rng::seed_from_u64(0));
        let y = gmr_conv(&x, &p, &ConvConfig::same(5, 2)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_hot_ring_is_plain_convolution_with_that_ring() {
        let mut p = GmrLayerParams::init(7, 4, 2, 1, 1, 1).unwrap();
        let basis = p.basis().unwrap();
        let x = Tensor::randn(&[2, 1, 10, 9], &mut ChaCha8Rng::seed_from_u64(5));
        let cfg = ConvConfig::same(7, 2);
        for j in 0..4 {
            p.weights = RingWeights::zeros(1, 1, 4);
            p.weights.w.data_mut()[j] = 1.0;
            let ring = Tensor::new(&[1, 1, 7, 7], basis.ring(j).to_vec()).unwrap();
            let want = conv_direct(&x, &ring, &cfg).unwrap();
            let got = gmr_conv(&x, &p, &cfg).unwrap();
            assert!(rel_error(&got, &want).unwrap() < 1e-14);
        }
    }

    #[test]
    fn strided_matches_direct() {
        let p = GmrLayerParams::init(5, 3, 2, 2, 3, 4).unwrap();
        let x = Tensor::randn(&[1, 2, 9, 9], &mut ChaCha8Rng::seed_from_u64(8));
        let cfg = ConvConfig::new(2, vec![2, 2], 2).unwrap();
        let kern = materialize_kernel(&p.weights, &p.basis().unwrap()).unwrap();
        let want = conv_direct(&x, &kern, &cfg).unwrap();
        let got = gmr_conv(&x, &p, &cfg).unwrap();
        assert_eq!(got.shape(), &[1, 3, 5, 5]);
        assert!(rel_error(&got, &want).unwrap() < 1e-12);
    }

    #[test]
    fn tape_backward_matches_recomputed() {
        let p = GmrLayerParams::init(5, 3, 2, 2, 2, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[2, 2, 6, 6], &mut rng);
        let gy = Tensor::randn(&[2, 2, 6, 6], &mut rng);
        let cfg = ConvConfig::same(5, 2);
        let basis = p.basis().unwrap().rings;
        let (_, tape) = gmr_conv_tape(&x, &p.weights.w, &basis, &cfg).unwrap();
        let a = gmr_conv_backward_with_basis(&x, &p.weights.w, &basis, &cfg, &gy, Some(&tape)).unwrap();
        let b = gmr_conv_backward_with_basis(&x, &p.weights.w, &basis, &cfg, &gy, None).unwrap();
        assert_eq!(a.grad_input, b.grad_input);
        assert_eq!(a.grad_weights, b.grad_weights);
        assert_eq!(a.grad_basis, b.grad_basis);
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let p = GmrLayerParams::init(5, 3, 2, 2, 2, 11).unwrap();
        let x = Tensor::<f64>::zeros(&[1, 3, 8, 8]);
        assert!(matches!(
            gmr_conv(&x, &p, &ConvConfig::same(5, 2)),
            Err(GmrError::ChannelMismatch { expected: 2, got: 3 })
        ));
        let x = Tensor::<f64>::zeros(&[1, 2, 8, 8]);
        assert!(gmr_conv(&x, &p, &ConvConfig::same(5, 3)).is_err());
    }
}
