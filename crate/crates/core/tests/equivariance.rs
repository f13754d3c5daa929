use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use gmr_core::conv::{conv_direct, gmr_conv, gmr_conv_with_basis, ConvConfig};
use gmr_core::equiv::{
    angle_sweep, check_exact_symmetry, check_exact_symmetry_with_basis, default_angles, grid_commutation_error,
    reflection_check, smoothing_ablation, InputSpec,
};
use gmr_core::gmr_kernel::{default_rings, ring_geometry, GmrLayerParams};
use gmr_core::{with_threads, Tensor};

#[test]
fn exact_symmetry_holds_for_every_draw() {
    for k in [3, 5, 7, 9, 11] {
        for seed in 0..3 {
            let p = GmrLayerParams::init(k, default_rings(k), 2, 3, 2, seed).unwrap();
            let e = check_exact_symmetry(&p, &ConvConfig::same(k, 2), 20, seed).unwrap();
            assert!(e <= 1e-10, "k={k}: {e}");
        }
    }
    for k in [3, 5] {
        let p = GmrLayerParams::init(k, default_rings(k), 3, 2, 2, 1).unwrap();
        let e = check_exact_symmetry(&p, &ConvConfig::same(k, 3), 3, 1).unwrap();
        assert!(e <= 1e-10, "3d k={k}: {e}");
    }
}

#[test]
fn corrupted_basis_is_caught() {
    let p = GmrLayerParams::init(5, 3, 2, 2, 2, 3).unwrap();
    let cfg = ConvConfig::same(5, 2);
    let mut basis = p.basis().unwrap().rings;
    assert!(check_exact_symmetry_with_basis(&p.weights.w, &basis, &cfg, 13, 4, 3).unwrap() <= 1e-10);
    basis.data_mut()[0] = 0.1;
    let e = check_exact_symmetry_with_basis(&p.weights.w, &basis, &cfg, 13, 4, 3).unwrap();
    assert!(e > 1e-3, "{e}");
}

#[test]
fn dense_kernels_are_not_equivariant() {
    let w = Tensor::randn(&[2, 2, 5, 5], &mut ChaCha8Rng::seed_from_u64(4));
    let cfg = ConvConfig::same(5, 2);
    let x = Tensor::randn(&[1, 2, 12, 12], &mut ChaCha8Rng::seed_from_u64(5));
    let e = grid_commutation_error(&|x: &Tensor| conv_direct(x, &w, &cfg), &x, 2).unwrap();
    assert!(e > 0.1, "{e}");
}

#[test]
fn reflections_commute() {
    let p = GmrLayerParams::init(9, 5, 2, 3, 3, 6).unwrap();
    let cfg = ConvConfig::same(9, 2);
    let op = |x: &Tensor| gmr_conv(x, &p, &cfg);
    let e = reflection_check(&op, &InputSpec { batch: 2, channels: 3, size: 20 }, 6).unwrap();
    assert!(e <= 1e-10, "{e}");
}

#[test]
fn sweep_grid_angles_and_periodicity() {
    let p = GmrLayerParams::init(5, 3, 2, 2, 2, 7).unwrap();
    let cfg = ConvConfig::same(5, 2);
    let op = |x: &Tensor| gmr_conv(x, &p, &cfg);
    let spec = InputSpec { batch: 1, channels: 2, size: 24 };
    let angles = default_angles();
    assert_eq!(angles.len(), 36);
    let r = angle_sweep(&op, &spec, 5, &angles, 10, 7).unwrap();
    assert_eq!(r.mask_radius, 12.0 - 5.0);
    assert!(r.mean_error.iter().all(|&e| e >= 0.0));
    assert!(r.error_at(0.0).unwrap() <= 1e-12);
    for a in [90.0, 180.0, 270.0] {
        assert!(r.error_at(a).unwrap() <= 1e-10, "{a}");
    }
    for i in 0..27 {
        let (e, f) = (r.mean_error[i], r.mean_error[i + 9]);
        let floor = r.floor_error[i].max(r.floor_error[i + 9]);
        assert!((e - f).abs() <= (2.0 * floor).max(1e-10), "{} vs {}: {e} {f} floor {floor}", angles[i], angles[i + 9]);
    }
    assert!(r.error_at(40.0).unwrap() > 1e-3);
}

#[test]
fn sweep_is_deterministic_across_thread_counts() {
    let p = GmrLayerParams::init(3, 2, 2, 1, 2, 8).unwrap();
    let cfg = ConvConfig::same(3, 2);
    let spec = InputSpec { batch: 1, channels: 1, size: 12 };
    let run = |threads| {
        with_threads(threads, || {
            let op = |x: &Tensor| gmr_conv(x, &p, &cfg);
            angle_sweep(&op, &spec, 3, &[0.0, 20.0, 45.0], 10, 8).unwrap()
        })
        .unwrap()
    };
    let one = run(1);
    assert_eq!(one, run(3));
    assert_eq!(one.to_json().unwrap(), run(2).to_json().unwrap());
}

#[test]
fn smoothing_beats_nearest_ring_at_45_degrees() {
    let g = ring_geometry(9, 5, 2).unwrap();
    let spec = InputSpec { batch: 1, channels: 2, size: 40 };
    let wins =
        (0..10).filter(|&s| smoothing_ablation(&g, (2, 2), &spec, 45.0, 10, s).unwrap().smoothing_wins()).count();
    assert!(wins >= 9, "{wins}/10");
    // both kernels are exactly symmetric, so grid rotations do not separate them
    let o = smoothing_ablation(&g, (2, 2), &spec, 90.0, 10, 0).unwrap();
    assert!(o.gmr_error <= 1e-10 && o.nearest_error <= 1e-10);
}

#[test]
fn nearest_ring_layer_is_still_grid_exact() {
    let g = ring_geometry(7, 4, 2).unwrap();
    let p = GmrLayerParams::init(7, 4, 2, 2, 2, 9).unwrap();
    let nearest = gmr_core::gmr_kernel::build_nearest_ring_basis(&g).rings;
    let cfg = ConvConfig::same(7, 2);
    assert!(check_exact_symmetry_with_basis(&p.weights.w, &nearest, &cfg, 17, 3, 9).unwrap() <= 1e-10);
    let x = Tensor::randn(&[1, 2, 17, 17], &mut ChaCha8Rng::seed_from_u64(9));
    let op = |x: &Tensor| gmr_conv_with_basis(x, &p.weights.w, &nearest, &cfg);
    assert!(grid_commutation_error(&op, &x, 2).unwrap() <= 1e-10);
}
