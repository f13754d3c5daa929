use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gmr_core::conv::{conv_direct, conv_direct_backward, gmr_conv, gmr_conv_backward, ConvConfig};
use gmr_core::gmr_kernel::{clip_sigma, init_sigma, materialize_kernel, GmrLayerParams, SigmaParams};
use gmr_core::net::{twin_specs, ConvKind, Layer, LayerGrad, Network};
use gmr_core::tensor::rel_error;
use gmr_core::Tensor;

fn rel(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / norm.max(1e-300)
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Central differences of `f` with respect to every entry of `v`.
fn numeric(v: &mut [f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    (0..v.len())
        .map(|i| {
            let old = v[i];
            v[i] = old + h;
            let up = f(v);
            v[i] = old - h;
            let down = f(v);
            v[i] = old;
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn jittered(k: usize, n: usize, dims: usize, c_in: usize, c_out: usize, seed: u64) -> GmrLayerParams {
    let mut p = GmrLayerParams::init(k, n, dims, c_in, c_out, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ls = init_sigma(&p.geometry).log_sigma.iter().map(|l| l + rng.gen_range(-0.3..0.3)).collect();
    p.sigma = clip_sigma(&SigmaParams { log_sigma: ls }, &p.geometry);
    p
}

fn check_gmr(p: &GmrLayerParams, input_shape: &[usize], seed: u64) -> (f64, f64, f64) {
    let h = 1e-4;
    let dims = p.geometry.dims;
    let cfg = ConvConfig::same(p.geometry.k, dims);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::randn(input_shape, &mut rng);
    let mut out_shape = input_shape.to_vec();
    out_shape[1] = p.c_out();
    let r = Tensor::randn(&out_shape, &mut rng);
    let g = gmr_conv_backward(&x, p, &cfg, &r).unwrap();

    let mut xv = x.data().to_vec();
    let nx =
        numeric(&mut xv, h, |v| dot(&gmr_conv(&Tensor::new(x.shape(), v.to_vec()).unwrap(), p, &cfg).unwrap(), &r));
    let mut wv = p.weights.w.data().to_vec();
    let nw = numeric(&mut wv, h, |v| {
        let mut q = p.clone();
        q.weights.w.data_mut().copy_from_slice(v);
        dot(&gmr_conv(&x, &q, &cfg).unwrap(), &r)
    });
    let mut sv = p.sigma.log_sigma.clone();
    let ns = numeric(&mut sv, h, |v| {
        let mut q = p.clone();
        q.sigma.log_sigma.copy_from_slice(v);
        dot(&gmr_conv(&x, &q, &cfg).unwrap(), &r)
    });
    (rel(g.grad_input.data(), &nx), rel(g.grad_weights.data(), &nw), rel(&g.grad_log_sigma, &ns))
}

#[test]
fn gmr_gradients_match_finite_differences_2d() {
    let p = jittered(5, 3, 2, 2, 3, 1);
    let (ex, ew, es) = check_gmr(&p, &[1, 2, 8, 8], 1);
    assert!(ex <= 1e-5 && ew <= 1e-5 && es <= 1e-5, "{ex} {ew} {es}");
    let p = jittered(9, 5, 2, 2, 2, 2);
    let (ex, ew, es) = check_gmr(&p, &[2, 2, 11, 11], 2);
    assert!(ex <= 1e-5 && ew <= 1e-5 && es <= 1e-5, "{ex} {ew} {es}");
}

#[test]
fn gmr_gradients_match_finite_differences_3d() {
    for k in [3, 5] {
        let p = jittered(k, k.div_ceil(2), 3, 2, 2, k as u64);
        let (ex, ew, es) = check_gmr(&p, &[1, 2, 6, 6, 6], 3);
        assert!(ex <= 1e-5 && ew <= 1e-5 && es <= 1e-5, "k={k}: {ex} {ew} {es}");
    }
}

#[test]
fn zero_output_gradient_gives_zero_gradients() {
    let p = jittered(5, 3, 2, 2, 3, 4);
    let x = Tensor::randn(&[1, 2, 8, 8], &mut ChaCha8Rng::seed_from_u64(4));
    let g = gmr_conv_backward(&x, &p, &ConvConfig::same(5, 2), &Tensor::zeros(&[1, 3, 8, 8])).unwrap();
    assert!(g.grad_input.data().iter().chain(g.grad_weights.data()).chain(&g.grad_log_sigma).all(|&v| v == 0.0));
}

#[test]
fn gmr_input_gradient_is_the_transposed_dense_convolution() {
    let p = jittered(7, 4, 2, 3, 2, 5);
    let cfg = ConvConfig::same(7, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::randn(&[2, 3, 10, 10], &mut rng);
    let r = Tensor::randn(&[2, 2, 10, 10], &mut rng);
    let kernel = materialize_kernel(&p.weights, &p.basis().unwrap()).unwrap();
    let (gx, _) = conv_direct_backward(&x, &kernel, &cfg, &r).unwrap();
    let g = gmr_conv_backward(&x, &p, &cfg, &r).unwrap();
    assert!(rel_error(&g.grad_input, &gx).unwrap() <= 1e-12);

    // adjoint identity <conv(x), r> = <x, conv^T(r)>
    let lhs = dot(&conv_direct(&x, &kernel, &cfg).unwrap(), &r);
    assert!((lhs - dot(&x, &gx)).abs() <= 1e-10 * lhs.abs().max(1.0));
}

#[test]
fn identity_kernel_passes_the_gradient_through() {
    let mut w = Tensor::zeros(&[2, 2, 3, 3]);
    w.data_mut()[4] = 1.0;
    w.data_mut()[(2 + 1) * 9 + 4] = 1.0;
    let cfg = ConvConfig::same(3, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = Tensor::randn(&[1, 2, 6, 6], &mut rng);
    let r = Tensor::randn(&[1, 2, 6, 6], &mut rng);
    let (gx, _) = conv_direct_backward(&x, &w, &cfg, &r).unwrap();
    assert_eq!(gx, r);
}

#[test]
fn dense_gradients_match_finite_differences() {
    for (dims, k, cfg) in [
        (2, 3, ConvConfig::same(3, 2)),
        (2, 5, ConvConfig::new(2, vec![2, 2], 2).unwrap()),
        (3, 3, ConvConfig::same(3, 3)),
    ] {
        let mut rng = ChaCha8Rng::seed_from_u64(k as u64);
        let mut xs = vec![1, 2];
        xs.extend(std::iter::repeat_n(7, dims));
        let x = Tensor::randn(&xs, &mut rng);
        let mut ws = vec![3, 2];
        ws.extend(std::iter::repeat_n(k, dims));
        let w = Tensor::randn(&ws, &mut rng);
        let y = conv_direct(&x, &w, &cfg).unwrap();
        let r = Tensor::randn(y.shape(), &mut rng);
        let (gx, gw) = conv_direct_backward(&x, &w, &cfg, &r).unwrap();
        let mut xv = x.data().to_vec();
        let nx = numeric(&mut xv, 1e-4, |v| {
            dot(&conv_direct(&Tensor::new(&xs, v.to_vec()).unwrap(), &w, &cfg).unwrap(), &r)
        });
        let mut wv = w.data().to_vec();
        let nw = numeric(&mut wv, 1e-4, |v| {
            dot(&conv_direct(&x, &Tensor::new(&ws, v.to_vec()).unwrap(), &cfg).unwrap(), &r)
        });
        assert!(rel(gx.data(), &nx) <= 1e-8 && rel(gw.data(), &nw) <= 1e-8, "dims={dims} k={k}");
    }
}

/// Flattened mutable views of every parameter array, in layer order.
fn parameters(net: &mut Network) -> Vec<&mut [f64]> {
    let mut out = Vec::new();
    for layer in &mut net.layers {
        match layer {
            Layer::GmrConv(p) => {
                out.push(p.weights.w.data_mut());
                out.push(&mut p.sigma.log_sigma[..]);
            }
            Layer::DenseConv(t) | Layer::LinearHead(t) | Layer::Bias(t) => out.push(t.data_mut()),
            Layer::AvgPoolDownsample { mix, .. } => out.push(mix.data_mut()),
            Layer::Relu | Layer::GlobalAvgPool => {}
        }
    }
    out
}

#[test]
fn network_gradients_match_finite_differences() {
    for kind in [ConvKind::Gmr, ConvKind::Dense] {
        let mut net = Network::from_specs(&twin_specs(kind, 2, 3, (5, 3)), 1, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::randn(&[2, 1, 8, 8], &mut rng);
        let r = Tensor::randn(&[2, 3], &mut rng);
        let (_, grads) = net.backward_with(&x, |_| Ok(r.clone())).unwrap();
        let analytic: Vec<Vec<f64>> = grads
            .iter()
            .flat_map(|g| match g {
                LayerGrad::None => vec![],
                LayerGrad::Gmr { weights, log_sigma } => vec![weights.data().to_vec(), log_sigma.clone()],
                LayerGrad::Dense(t) => vec![t.data().to_vec()],
            })
            .collect();
        let count = parameters(&mut net).len();
        assert_eq!(count, analytic.len());
        for (a, want) in analytic.iter().enumerate() {
            let mut fd = Vec::with_capacity(want.len());
            for j in 0..want.len() {
                let h = 1e-5;
                let mut eval = |d: f64| {
                    parameters(&mut net)[a][j] += d;
                    let v = dot(&net.forward(&x).unwrap(), &r);
                    parameters(&mut net)[a][j] -= d;
                    v
                };
                fd.push((eval(h) - eval(-h)) / (2.0 * h));
            }
            assert!(rel(want, &fd) <= 1e-5, "{kind:?} array {a}: {}", rel(want, &fd));
        }
    }
}
