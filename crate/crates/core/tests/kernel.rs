// oracles index arrays the way the formulas are written
#![allow(clippy::needless_range_loop, clippy::manual_div_ceil)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gmr_core::equiv::{apply_cube_symmetry, cube_symmetries};
use gmr_core::gmr_kernel::{
    basis_sigma_jacobian, build_basis, build_nearest_ring_basis, clip_sigma, default_rings, init_sigma, init_weights,
    materialize_kernel, parameter_count, ring_geometry, RingWeights, SigmaParams,
};
use gmr_core::tensor::{flip, rot90};
use gmr_core::{GmrError, Tensor};

const FWHM: f64 = 2.354_820_045_030_949_3;

/// Radius of every tap, row-major, computed from scratch.
fn radii(k: usize, dims: usize) -> Vec<f64> {
    let h = (k / 2) as f64;
    let taps = k.pow(dims as u32);
    (0..taps)
        .map(|t| {
            let mut rest = t;
            let mut r2 = 0.0;
            for _ in 0..dims {
                let u = (rest % k) as f64 - h;
                rest /= k;
                r2 += u * u;
            }
            r2.sqrt()
        })
        .collect()
}

fn random_sigma(n: usize, rng: &mut ChaCha8Rng) -> SigmaParams {
    SigmaParams { log_sigma: (0..n).map(|_| rng.gen_range(-1.5..1.2)).collect() }
}

#[test]
fn geometry_examples() {
    let g = ring_geometry(9, 5, 2).unwrap();
    assert_eq!(g.delta_d, 1.125);
    assert_eq!(g.mu, vec![0.0, 1.125, 2.25, 3.375, 4.5]);
    assert_eq!(g.mask_radius, 4.5);
    let g = ring_geometry(3, 2, 2).unwrap();
    assert_eq!(g.delta_d, 1.5);
    assert_eq!(g.mu, vec![0.0, 1.5]);
    for k in (3..=31).step_by(2) {
        assert_eq!(default_rings(k), (k + 1) / 2);
        for n in 2..=(k + 1) / 2 {
            let g = ring_geometry(k, n, 2).unwrap();
            assert!(g.mu.windows(2).all(|w| w[0] < w[1]));
            assert_eq!(g.mu[0], 0.0);
            assert!((g.mu[n - 1] - k as f64 / 2.0).abs() < 1e-12);
        }
    }
}

#[test]
fn geometry_errors() {
    assert!(matches!(ring_geometry(4, 2, 2), Err(GmrError::UnsupportedWidth(4))));
    assert!(matches!(ring_geometry(1, 2, 2), Err(GmrError::UnsupportedWidth(1))));
    assert!(matches!(ring_geometry(5, 1, 2), Err(GmrError::DegenerateGeometry(_))));
    assert!(matches!(ring_geometry(5, 4, 2), Err(GmrError::OverResolution { .. })));
    assert!(ring_geometry(5, 3, 4).is_err());
}

#[test]
fn init_sigma_is_fwhm_matched() {
    let s = init_sigma(&ring_geometry(9, 5, 2).unwrap()).sigma();
    assert!(s.iter().all(|v| (v - 0.477_743_5).abs() < 1e-7));
    let s = init_sigma(&ring_geometry(3, 2, 2).unwrap()).sigma();
    assert!(s.iter().all(|v| (v - 0.636_991_4).abs() < 1e-7));
    assert!((2.0 * (2.0 * 2f64.ln()).sqrt() - FWHM).abs() < 1e-15);
}

#[test]
fn clip_examples_and_init_is_inside_the_range() {
    let g = ring_geometry(9, 5, 2).unwrap();
    let s = SigmaParams::from_sigma(&[1e-5, 100.0, 0.5, 1e-2, 10.0]);
    let c = clip_sigma(&s, &g).sigma();
    assert!((c[0] - 1e-2).abs() < 1e-15);
    assert!((c[1] - 10.0).abs() < 1e-12);
    assert!((c[2] - 0.5).abs() < 1e-15);
    assert_eq!(clip_sigma(&clip_sigma(&s, &g), &g), clip_sigma(&s, &g));
    // two rings on a wide kernel start wider than the 2n cap
    for k in (3..=31).step_by(2) {
        for n in 2..=(k + 1) / 2 {
            let g = ring_geometry(k, n, 2).unwrap();
            let s = init_sigma(&g);
            let inside = k as f64 / (2.0 * (n - 1) as f64) / FWHM <= 2.0 * n as f64;
            assert_eq!(inside, !(n == 2 && k >= 19), "k={k} n={n}");
            assert_eq!(clip_sigma(&s, &g) == s, inside, "k={k} n={n}");
        }
    }
}

#[test]
fn basis_closed_form_examples() {
    let g = ring_geometry(9, 5, 2).unwrap();
    let b = build_basis(&g, &init_sigma(&g)).unwrap();
    let center = 4 * 9 + 4;
    assert_eq!(b.ring(0)[center], 1.0);
    let sigma = 1.125 / FWHM;
    let expected = (-(1.125f64).powi(2) / (2.0 * sigma * sigma)).exp();
    assert!((expected - 0.0625).abs() < 1e-15);
    assert!((b.ring(1)[center] - expected).abs() < 1e-15);

    let g = ring_geometry(5, 3, 2).unwrap();
    let b = build_basis(&g, &init_sigma(&g)).unwrap();
    for i in 0..3 {
        for corner in [0, 4, 20, 24] {
            assert_eq!(b.ring(i)[corner], 0.0);
        }
    }
    // k = 3 corners sit inside the disk
    let g = ring_geometry(3, 2, 2).unwrap();
    let b = build_basis(&g, &init_sigma(&g)).unwrap();
    assert!(b.ring(1)[0] > 0.0);
}

#[test]
fn basis_matches_formula_with_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for dims in [2, 3] {
        for k in [3, 5, 7, 9, 11] {
            let n = default_rings(k);
            let g = ring_geometry(k, n, dims).unwrap();
            let s = clip_sigma(&random_sigma(n, &mut rng), &g);
            let b = build_basis(&g, &s).unwrap();
            let sig = s.sigma();
            for (t, r) in radii(k, dims).into_iter().enumerate() {
                for i in 0..n {
                    let want =
                        if r > k as f64 / 2.0 { 0.0 } else { (-(r - g.mu[i]).powi(2) / (2.0 * sig[i] * sig[i])).exp() };
                    let got = b.ring(i)[t];
                    assert!((got - want).abs() <= 1e-15, "dims={dims} k={k} ring={i} tap={t}");
                    assert!((0.0..=1.0).contains(&got));
                }
            }
        }
    }
}

#[test]
fn basis_has_grid_symmetry() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for k in [3, 5, 7, 9, 11] {
        let g = ring_geometry(k, default_rings(k), 2).unwrap();
        let b = build_basis(&g, &random_sigma(g.n, &mut rng)).unwrap();
        for i in 0..g.n {
            let m = Tensor::new(&[1, 1, k, k], b.ring(i).to_vec()).unwrap();
            assert_eq!(rot90(&m, 1, (2, 3)).unwrap(), m);
            assert_eq!(flip(&m, 2).unwrap(), m);
            assert_eq!(flip(&m, 3).unwrap(), m);
        }
        let nearest = build_nearest_ring_basis(&g);
        let m = Tensor::new(&[g.n, 1, k, k], nearest.rings.data().to_vec()).unwrap();
        assert_eq!(rot90(&m, 1, (2, 3)).unwrap(), m);
        assert_eq!(flip(&m, 3).unwrap(), m);
    }
    for k in [3, 5] {
        let g = ring_geometry(k, default_rings(k), 3).unwrap();
        let b = build_basis(&g, &random_sigma(g.n, &mut rng)).unwrap();
        let m = Tensor::new(&[g.n, 1, k, k, k], b.rings.data().to_vec()).unwrap();
        for sym in cube_symmetries() {
            assert_eq!(apply_cube_symmetry(&m, &sym).unwrap(), m);
        }
    }
}

#[test]
fn nearest_ring_basis_is_one_hot_on_the_disk() {
    for dims in [2, 3] {
        for k in [3, 5, 7, 9] {
            let g = ring_geometry(k, default_rings(k), dims).unwrap();
            let b = build_nearest_ring_basis(&g);
            for (t, r) in radii(k, dims).into_iter().enumerate() {
                let column: Vec<f64> = (0..g.n).map(|i| b.ring(i)[t]).collect();
                if r > k as f64 / 2.0 {
                    assert!(column.iter().all(|&v| v == 0.0));
                    continue;
                }
                let nearest = (0..g.n)
                    .min_by(|&a, &c| (r - g.mu[a]).abs().total_cmp(&(r - g.mu[c]).abs()).then(a.cmp(&c)))
                    .unwrap();
                for (i, &v) in column.iter().enumerate() {
                    assert_eq!(v, if i == nearest { 1.0 } else { 0.0 });
                }
            }
            let center = (k.pow(dims as u32) - 1) / 2;
            assert_eq!(b.ring(0)[center], 1.0);
        }
    }
}

#[test]
fn materialize_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for k in [3, 5, 7, 9, 11] {
        let n = default_rings(k);
        let g = ring_geometry(k, n, 2).unwrap();
        let r = radii(k, 2);
        for t in 0..100 {
            let (c_in, c_out) = (1 + t % 3, 1 + t % 2);
            let s = clip_sigma(&random_sigma(n, &mut rng), &g);
            let sig = s.sigma();
            let w = Tensor::from_fn(&[c_out, c_in, n], |_| rng.gen_range(-1.0..1.0));
            let kernel =
                materialize_kernel(&RingWeights::new(w.clone()).unwrap(), &build_basis(&g, &s).unwrap()).unwrap();
            assert_eq!(kernel.shape(), &[c_out, c_in, k, k]);
            for o in 0..c_out {
                for c in 0..c_in {
                    for (p, &rp) in r.iter().enumerate() {
                        let mut want = 0.0;
                        if rp <= k as f64 / 2.0 {
                            for i in 0..n {
                                want += w.at(&[o, c, i]) * (-(rp - g.mu[i]).powi(2) / (2.0 * sig[i] * sig[i])).exp();
                            }
                        }
                        let got = kernel.data()[(o * c_in + c) * k * k + p];
                        assert!((got - want).abs() <= 1e-14, "k={k} trial={t}");
                    }
                }
            }
        }
    }
}

#[test]
fn materialize_is_linear_and_masked() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let g = ring_geometry(9, 5, 2).unwrap();
    let b = build_basis(&g, &init_sigma(&g)).unwrap();
    let w1 = Tensor::randn(&[3, 2, 5], &mut rng);
    let w2 = Tensor::randn(&[3, 2, 5], &mut rng);
    let (a, c) = (rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
    let m = |w: &Tensor| materialize_kernel(&RingWeights::new(w.clone()).unwrap(), &b).unwrap();
    let lhs = m(&w1.zip_map(&w2, |x, y| a * x + c * y).unwrap());
    let rhs = m(&w1).zip_map(&m(&w2), |x, y| a * x + c * y).unwrap();
    assert!(lhs.zip_map(&rhs, |x, y| x - y).unwrap().max_abs() <= 1e-13);

    let r = radii(9, 2);
    for (i, v) in lhs.data().iter().enumerate() {
        if r[i % 81] > 4.5 {
            assert_eq!(*v, 0.0);
        }
    }
    assert!(m(&Tensor::zeros(&[3, 2, 5])).data().iter().all(|&v| v == 0.0));
    for j in 0..5 {
        let mut w = Tensor::zeros(&[1, 1, 5]);
        w.data_mut()[j] = 1.0;
        assert_eq!(m(&w).data(), b.ring(j));
    }
}

#[test]
fn init_weights_statistics() {
    let (c_in, c_out, n) = (64, 400, 5);
    let w = init_weights(c_in, c_out, n, 17);
    let v = w.w.data();
    let count = v.len() as f64;
    assert!(count >= 1e5);
    let std = (2.0 / (c_in * n) as f64).sqrt();
    let mean = v.iter().sum::<f64>() / count;
    let sample_std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (count - 1.0)).sqrt();
    assert!(mean.abs() <= 3.0 * std / count.sqrt(), "mean {mean}");
    assert!((sample_std / std - 1.0).abs() <= 0.05, "std {sample_std} vs {std}");
    assert_eq!(init_weights(c_in, c_out, n, 17), w);
    assert_ne!(init_weights(c_in, c_out, n, 18), w);
}

#[test]
fn sigma_jacobian_closed_form_and_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let h = 1e-5;
    for (k, dims) in [(5, 2), (9, 2), (11, 2), (5, 3)] {
        let g = ring_geometry(k, default_rings(k), dims).unwrap();
        let s = clip_sigma(&random_sigma(g.n, &mut rng), &g);
        let jac = basis_sigma_jacobian(&g, &s).unwrap();
        let b = build_basis(&g, &s).unwrap();
        let sig = s.sigma();
        let taps = g.taps();
        let r = radii(k, dims);
        for i in 0..g.n {
            let mut up = s.clone();
            up.log_sigma[i] += h;
            let mut down = s.clone();
            down.log_sigma[i] -= h;
            let (bu, bd) = (build_basis(&g, &up).unwrap(), build_basis(&g, &down).unwrap());
            for t in 0..taps {
                let j = jac.data()[i * taps + t];
                if r[t] > k as f64 / 2.0 {
                    assert_eq!(j, 0.0);
                    continue;
                }
                let closed = b.ring(i)[t] * (r[t] - g.mu[i]).powi(2) / (sig[i] * sig[i]);
                assert!((j - closed).abs() <= 1e-14 * (1.0 + closed.abs()));
                let fd = (bu.ring(i)[t] - bd.ring(i)[t]) / (2.0 * h);
                assert!((j - fd).abs() <= 1e-7 * j.abs().max(1.0), "k={k} ring={i} tap={t}: {j} vs {fd}");
            }
        }
        // the innermost ring peaks at the centre, where its derivative vanishes
        assert_eq!(jac.data()[(taps - 1) / 2], 0.0);
    }
}

#[test]
fn parameter_count_examples() {
    assert_eq!(parameter_count(64, 64, &ring_geometry(9, 5, 2).unwrap()), (20485, 331776));
    assert_eq!(parameter_count(1, 1, &ring_geometry(3, 2, 2).unwrap()), (4, 9));
    assert_eq!(parameter_count(2, 3, &ring_geometry(5, 3, 3).unwrap()), (21, 750));
    let ratio = |k| {
        let (g, d) = parameter_count(16, 16, &ring_geometry(k, 2, 2).unwrap());
        d as f64 / g as f64
    };
    assert!(ratio(3) < ratio(5) && ratio(5) < ratio(9) && ratio(9) < ratio(15));
}
