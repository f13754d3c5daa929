//! Equivariance measurement.
//!
//! Exact checks cover the symmetries of the pixel grid (quarter turns and
//! flips in 2D, the 48 signed axis permutations of the cube in 3D), where a
//! GMR layer commutes with the transform up to floating point rounding.
//! Arbitrary angles go through bilinear resampling, so the sweep metric
//!
//! ```text
//! E(θ) = rel_error(mask(R(−θ) · op(R(θ) · x)), mask(op(x)))
//! ```
//!
//! is reported next to the same metric for the identity operator (the
//! interpolation floor). The mask keeps the central disk of radius
//! `min(H, W)/2 − k`, away from both rotation fill and convolution
//! padding. E(θ) is a measurement defined by this crate, not a quantity
//! with an external reference value.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conv::{gmr_conv_with_basis, ConvConfig};
use crate::error::{GmrError, Result};
use crate::gmr_kernel::{build_nearest_ring_basis, init_weights, GmrLayerParams, RingGeometry};
use crate::tensor::{central_disk_mask, flip, permute_axes, rel_error, rot90, rotate_bilinear, Tensor};

pub const REPORT_SCHEMA: &str = "gmr-equiv-report/1";
pub const METRIC: &str =
    "E(theta) = rel_error(mask(rot(-theta)(op(rot(theta)(x)))), mask(op(x))); disk radius min(H,W)/2 - k; crate-defined";

/// Fewest random inputs a sweep averages per angle.
pub const MIN_TRIALS: usize = 10;

/// Default sweep grid: 0..350 in 10 degree steps.
pub fn default_angles() -> Vec<f64> {
    (0..36).map(|i| 10.0 * i as f64).collect()
}

/// Random inputs for a sweep: standard normal `(batch, channels, size, size)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputSpec {
    pub batch: usize,
    pub channels: usize,
    pub size: usize,
}

impl InputSpec {
    pub fn sample(&self, seed: u64) -> Tensor {
        Tensor::randn(&[self.batch, self.channels, self.size, self.size], &mut ChaCha8Rng::seed_from_u64(seed))
    }
}

/// Deterministic seed for one `(angle, trial)` cell of a sweep.
pub fn cell_seed(seed: u64, angle_index: usize, trial_index: usize) -> u64 {
    // splitmix64 finalizer over the packed coordinates
    let mut z = seed
        ^ (angle_index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (trial_index as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F).rotate_left(31);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivarianceReport {
    pub schema: String,
    pub metric: String,
    pub mask_radius: f64,
    pub trials: usize,
    pub angle_degrees: Vec<f64>,
    pub mean_error: Vec<f64>,
    pub std_error: Vec<f64>,
    /// identity-operator error on the same inputs
    pub floor_error: Vec<f64>,
}

impl EquivarianceReport {
    pub fn error_at(&self, angle: f64) -> Option<f64> {
        self.angle_degrees.iter().position(|&a| a == angle).map(|i| self.mean_error[i])
    }

    pub fn to_csv(&self) -> String {
        let mut s =
            format!("# schema={}\n# metric={}\nangle,mean_error,std_error,floor_error\n", self.schema, self.metric);
        for i in 0..self.angle_degrees.len() {
            s.push_str(&format!(
                "{},{:e},{:e},{:e}\n",
                self.angle_degrees[i], self.mean_error[i], self.std_error[i], self.floor_error[i]
            ));
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Sweep disk radius for an input of the given extent and kernel width.
pub fn sweep_mask_radius(size: usize, k: usize) -> f64 {
    size as f64 / 2.0 - k as f64
}

/// `E(θ)` for one input.
pub fn equivariance_error<F>(op: &F, x: &Tensor, angle: f64, mask_radius: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let reference = central_disk_mask(&op(x)?, mask_radius)?;
    let turned = op(&rotate_bilinear(x, angle, 0.0)?)?;
    let back = central_disk_mask(&rotate_bilinear(&turned, -angle, 0.0)?, mask_radius)?;
    rel_error(&back, &reference)
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Mean `E(θ)` over `trials` random inputs for every angle, plus the
/// identity floor on the same inputs. `k` sets the mask radius.
pub fn angle_sweep<F>(
    op: &F,
    spec: &InputSpec,
    k: usize,
    angles: &[f64],
    trials: usize,
    seed: u64,
) -> Result<EquivarianceReport>
where
    F: Fn(&Tensor) -> Result<Tensor> + Sync,
{
    if angles.iter().any(|a| !a.is_finite()) {
        return Err(GmrError::InvalidArgument("angles must be finite".into()));
    }
    if spec.size < 4 * k {
        return Err(GmrError::InvalidArgument(format!("sweep input extent {} is below 4k = {}", spec.size, 4 * k)));
    }
    if trials < MIN_TRIALS {
        return Err(GmrError::InvalidArgument(format!("at least {MIN_TRIALS} trials per angle, got {trials}")));
    }
    let radius = sweep_mask_radius(spec.size, k);
    let identity = |x: &Tensor| Ok(x.clone());

    let cells: Vec<(usize, usize)> = (0..angles.len()).flat_map(|a| (0..trials).map(move |t| (a, t))).collect();
    let results: Vec<Result<(f64, f64)>> = cells
        .par_iter()
        .map(|&(a, t)| {
            let x = spec.sample(cell_seed(seed, a, t));
            let e = equivariance_error(op, &x, angles[a], radius)?;
            let f = equivariance_error(&identity, &x, angles[a], radius)?;
            Ok((e, f))
        })
        .collect();
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;

    let mut report = EquivarianceReport {
        schema: REPORT_SCHEMA.into(),
        metric: METRIC.into(),
        mask_radius: radius,
        trials,
        angle_degrees: angles.to_vec(),
        mean_error: Vec::new(),
        std_error: Vec::new(),
        floor_error: Vec::new(),
    };
    for chunk in results.chunks(trials) {
        let errs: Vec<f64> = chunk.iter().map(|r| r.0).collect();
        let floors: Vec<f64> = chunk.iter().map(|r| r.1).collect();
        let (m, s) = mean_std(&errs);
        report.mean_error.push(m);
        report.std_error.push(s);
        report.floor_error.push(mean_std(&floors).0);
    }
    Ok(report)
}

/// A signed permutation of the three spatial axes of a 3D tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CubeSymmetry {
    pub perm: [usize; 3],
    pub flips: [bool; 3],
}

/// All 48 symmetries of the cube.
pub fn cube_symmetries() -> Vec<CubeSymmetry> {
    const PERMS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    PERMS
        .iter()
        .flat_map(|&perm| (0..8).map(move |m| CubeSymmetry { perm, flips: [m & 1 != 0, m & 2 != 0, m & 4 != 0] }))
        .collect()
}

/// Applies a cube symmetry to axes 2..5 of a `(B, C, D, H, W)` tensor.
pub fn apply_cube_symmetry(t: &Tensor, sym: &CubeSymmetry) -> Result<Tensor> {
    let perm = [0, 1, 2 + sym.perm[0], 2 + sym.perm[1], 2 + sym.perm[2]];
    let mut out = permute_axes(t, &perm)?;
    for (ax, &f) in sym.flips.iter().enumerate() {
        if f {
            out = flip(&out, 2 + ax)?;
        }
    }
    Ok(out)
}

type Symmetry = Box<dyn Fn(&Tensor) -> Result<Tensor> + Sync + Send>;

/// The non-trivial grid symmetries for a `dims`-d layout, as functions on
/// `(B, C, spatial..)` tensors.
fn grid_symmetries(dims: usize) -> Vec<Symmetry> {
    if dims == 2 {
        let mut v: Vec<Symmetry> = Vec::new();
        for turns in 1..4 {
            v.push(Box::new(move |t: &Tensor| rot90(t, turns, (2, 3))));
        }
        v.push(Box::new(|t: &Tensor| flip(t, 2)));
        v.push(Box::new(|t: &Tensor| flip(t, 3)));
        v
    } else {
        cube_symmetries()
            .into_iter()
            .skip(1)
            .map(|s| Box::new(move |t: &Tensor| apply_cube_symmetry(t, &s)) as Box<_>)
            .collect()
    }
}

/// Largest commutation error `rel_error(op(g·x), g·op(x))` over the grid
/// symmetries of a `dims`-d input, for one input.
pub fn grid_commutation_error<F>(op: &F, x: &Tensor, dims: usize) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let y = op(x)?;
    let mut worst = 0.0f64;
    for g in grid_symmetries(dims) {
        let e = rel_error(&op(&g(x)?)?, &g(&y)?)?;
        worst = worst.max(e);
    }
    Ok(worst)
}

/// Exact-symmetry check of a GMR layer with an explicit basis: maximum
/// commutation error over `trials` random cubic inputs of extent `size`.
pub fn check_exact_symmetry_with_basis(
    weights: &Tensor,
    basis: &Tensor,
    cfg: &ConvConfig,
    size: usize,
    trials: usize,
    seed: u64,
) -> Result<f64> {
    let c_in = weights.shape()[1];
    let op = |x: &Tensor| gmr_conv_with_basis(x, weights, basis, cfg);
    let errors: Vec<Result<f64>> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut shape = vec![2, c_in];
            shape.extend(std::iter::repeat_n(size, cfg.dims));
            let x = Tensor::randn(&shape, &mut ChaCha8Rng::seed_from_u64(cell_seed(seed, 0, t)));
            grid_commutation_error(&op, &x, cfg.dims)
        })
        .collect();
    errors.into_iter().try_fold(0.0f64, |m, e| Ok(m.max(e?)))
}

/// Exact-symmetry check of a GMR layer (basis built from its sigmas).
pub fn check_exact_symmetry(params: &GmrLayerParams, cfg: &ConvConfig, trials: usize, seed: u64) -> Result<f64> {
    let basis = params.basis()?;
    let size = if cfg.dims == 2 { 2 * params.geometry.k + 3 } else { params.geometry.k + 3 };
    check_exact_symmetry_with_basis(&params.weights.w, &basis.rings, cfg, size, trials, seed)
}

/// Flip commutation error of `op` over both spatial axes of a 2D input.
pub fn reflection_check<F>(op: &F, spec: &InputSpec, seed: u64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let x = spec.sample(seed);
    let y = op(&x)?;
    let mut worst = 0.0f64;
    for axis in [2, 3] {
        worst = worst.max(rel_error(&op(&flip(&x, axis)?)?, &flip(&y, axis)?)?);
    }
    Ok(worst)
}

/// One smoothed-vs-nearest-ring comparison at a single angle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationOutcome {
    pub gmr_error: f64,
    pub nearest_error: f64,
    pub floor_error: f64,
}

impl AblationOutcome {
    /// Whether the smoothed basis beats the nearest-ring basis once the
    /// shared interpolation floor is removed.
    pub fn smoothing_wins(&self) -> bool {
        self.gmr_error - self.floor_error < self.nearest_error - self.floor_error
    }
}

/// Compares a Gaussian-ring layer with a nearest-ring layer that shares
/// the same ring weights, at one angle, averaged over `inputs` random
/// inputs.
pub fn smoothing_ablation(
    geometry: &RingGeometry,
    channels: (usize, usize),
    spec: &InputSpec,
    angle: f64,
    inputs: usize,
    seed: u64,
) -> Result<AblationOutcome> {
    let (c_in, c_out) = channels;
    if spec.channels != c_in {
        return Err(GmrError::ChannelMismatch { expected: c_in, got: spec.channels });
    }
    let params = GmrLayerParams::new(
        geometry.clone(),
        init_weights(c_in, c_out, geometry.n, seed),
        crate::gmr_kernel::init_sigma(geometry),
    )?;
    let smooth = params.basis()?.rings;
    let nearest = build_nearest_ring_basis(geometry).rings;
    let cfg = ConvConfig::same(geometry.k, 2);
    let w = &params.weights.w;
    let gmr = |x: &Tensor| gmr_conv_with_basis(x, w, &smooth, &cfg);
    let hard = |x: &Tensor| gmr_conv_with_basis(x, w, &nearest, &cfg);

    let angles = [angle];
    let a = angle_sweep(&gmr, spec, geometry.k, &angles, inputs, seed)?;
    let b = angle_sweep(&hard, spec, geometry.k, &angles, inputs, seed)?;
    Ok(AblationOutcome { gmr_error: a.mean_error[0], nearest_error: b.mean_error[0], floor_error: a.floor_error[0] })
}
