//! Gaussian mixture ring kernels.
//!
//! A GMR kernel of odd width `k` is a weighted sum of `n` radially
//! symmetric Gaussian rings centered at radii `mu_i = (i-1)·Δd` with
//! `Δd = k / (2(n-1))`. The rings are discretized on the `k×k` (or
//! `k×k×k`) offset grid and masked to the disk of radius `k/2`; the
//! resulting stack is the [`GaussianRingBasis`]. Ring weights are per
//! (output channel, input channel, ring); ring widths are one log-sigma
//! per ring shared by the whole layer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{GmrError, Result};
use crate::tensor::Tensor;

/// Full width at half maximum of a unit Gaussian, `2√(2 ln 2)`.
pub const FWHM_PER_SIGMA: f64 = 2.354_820_045_030_949_3;

/// Lower clip bound on sigma.
pub const SIGMA_MIN: f64 = 1e-2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RingGeometry {
    pub k: usize,
    pub dims: usize,
    pub n: usize,
    pub delta_d: f64,
    pub mu: Vec<f64>,
    pub mask_radius: f64,
}

/// Default ring count for width `k`: `(k+1)/2`.
pub fn default_rings(k: usize) -> usize {
    k.div_ceil(2)
}

/// Ring layout for an odd width-`k` kernel with `n` rings in `dims`
/// spatial dimensions.
pub fn ring_geometry(k: usize, n: usize, dims: usize) -> Result<RingGeometry> {
    if k < 3 || k.is_multiple_of(2) {
        return Err(GmrError::UnsupportedWidth(k));
    }
    if !(dims == 2 || dims == 3) {
        return Err(GmrError::InvalidArgument(format!("spatial dimensionality {dims} (expected 2 or 3)")));
    }
    if n < 2 {
        return Err(GmrError::DegenerateGeometry(n));
    }
    let max = default_rings(k);
    if n > max {
        return Err(GmrError::OverResolution { n, k, max });
    }
    let delta_d = k as f64 / (2.0 * (n as f64 - 1.0));
    let mu = (0..n).map(|i| i as f64 * delta_d).collect();
    Ok(RingGeometry { k, dims, n, delta_d, mu, mask_radius: k as f64 / 2.0 })
}

impl RingGeometry {
    /// Number of kernel taps, `k^dims`.
    pub fn taps(&self) -> usize {
        self.k.pow(self.dims as u32)
    }

    pub fn spatial_shape(&self) -> Vec<usize> {
        vec![self.k; self.dims]
    }

    pub fn sigma_max(&self) -> f64 {
        2.0 * self.n as f64
    }

    /// Distance from the kernel center for every tap, row-major.
    pub fn radius_grid(&self) -> Vec<f64> {
        let half = (self.k / 2) as i64;
        let k = self.k;
        (0..self.taps())
            .map(|mut p| {
                let mut sq = 0i64;
                for _ in 0..self.dims {
                    let u = (p % k) as i64 - half;
                    sq += u * u;
                    p /= k;
                }
                (sq as f64).sqrt()
            })
            .collect()
    }
}

/// Layer-wise ring widths, stored as natural logs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmaParams {
    pub log_sigma: Vec<f64>,
}

impl SigmaParams {
    pub fn from_sigma(sigma: &[f64]) -> Self {
        Self { log_sigma: sigma.iter().map(|s| s.ln()).collect() }
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.log_sigma.iter().map(|l| l.exp()).collect()
    }

    pub fn len(&self) -> usize {
        self.log_sigma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_sigma.is_empty()
    }
}

/// Every ring starts with FWHM equal to the ring spacing.
pub fn init_sigma(g: &RingGeometry) -> SigmaParams {
    SigmaParams { log_sigma: vec![(g.delta_d / FWHM_PER_SIGMA).ln(); g.n] }
}

/// Projects every sigma into `[1e-2, 2n]`.
pub fn clip_sigma(s: &SigmaParams, g: &RingGeometry) -> SigmaParams {
    let (lo, hi) = (SIGMA_MIN.ln(), g.sigma_max().ln());
    SigmaParams { log_sigma: s.log_sigma.iter().map(|&l| l.clamp(lo, hi)).collect() }
}

/// Ring weights, extents `(C_out, C_in, n)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RingWeights {
    pub w: Tensor,
}

impl RingWeights {
    pub fn new(w: Tensor) -> Result<Self> {
        if w.ndim() != 3 {
            return Err(GmrError::Shape(format!("ring weights need (C_out, C_in, n), got {:?}", w.shape())));
        }
        if w.data().iter().any(|x| !x.is_finite()) {
            return Err(GmrError::InvalidArgument("ring weights must be finite".into()));
        }
        Ok(Self { w })
    }

    pub fn zeros(c_out: usize, c_in: usize, n: usize) -> Self {
        Self { w: Tensor::zeros(&[c_out, c_in, n]) }
    }

    pub fn c_out(&self) -> usize {
        self.w.shape()[0]
    }
    pub fn c_in(&self) -> usize {
        self.w.shape()[1]
    }
    pub fn n(&self) -> usize {
        self.w.shape()[2]
    }
}

/// Kaiming-normal draw with fan-in `c_in · n`, deterministic in `seed`.
pub fn init_weights(c_in: usize, c_out: usize, n: usize, seed: u64) -> RingWeights {
    let std = (2.0 / (c_in * n) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    RingWeights { w: Tensor::from_fn(&[c_out, c_in, n], |_| normal.sample(&mut rng)) }
}

/// Masked ring images, extents `(n, k, k)` or `(n, k, k, k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianRingBasis {
    pub rings: Tensor,
}

impl GaussianRingBasis {
    pub fn n(&self) -> usize {
        self.rings.shape()[0]
    }

    pub fn taps(&self) -> usize {
        self.rings.len() / self.n()
    }

    pub fn k(&self) -> usize {
        self.rings.shape()[1]
    }

    pub fn dims(&self) -> usize {
        self.rings.ndim() - 1
    }

    /// Ring `i` as a flat slice of taps.
    pub fn ring(&self, i: usize) -> &[f64] {
        let t = self.taps();
        &self.rings.data()[i * t..(i + 1) * t]
    }

    /// Wraps an arbitrary `(n, k, ..)` stack, e.g. a perturbed basis.
    pub fn from_tensor(rings: Tensor) -> Result<Self> {
        let s = rings.shape();
        if !(s.len() == 3 || s.len() == 4) || s[1..].iter().any(|&e| e != s[1]) {
            return Err(GmrError::Shape(format!("ring basis must be (n, k, k[, k]), got {s:?}")));
        }
        Ok(Self { rings })
    }
}

fn check_sigma(g: &RingGeometry, s: &SigmaParams) -> Result<()> {
    if s.len() != g.n {
        return Err(GmrError::DimensionMismatch(format!("{} sigmas for {} rings", s.len(), g.n)));
    }
    Ok(())
}

fn basis_shape(g: &RingGeometry) -> Vec<usize> {
    let mut shape = vec![g.n];
    shape.extend(g.spatial_shape());
    shape
}

/// Discretized Gaussian rings `exp(-(r-mu_i)² / (2 sigma_i²))`, zero
/// outside radius `k/2`.
pub fn build_basis(g: &RingGeometry, s: &SigmaParams) -> Result<GaussianRingBasis> {
    check_sigma(g, s)?;
    let radius = g.radius_grid();
    let sigma = s.sigma();
    let taps = g.taps();
    let rings = Tensor::from_fn(&basis_shape(g), |idx| {
        let (i, p) = (idx / taps, idx % taps);
        let r = radius[p];
        if r > g.mask_radius {
            0.0
        } else {
            let d = r - g.mu[i];
            (-(d * d) / (2.0 * sigma[i] * sigma[i])).exp()
        }
    });
    Ok(GaussianRingBasis { rings })
}

/// Unsmoothed radial basis: each tap inside the disk belongs wholly to
/// the ring with the nearest center (ties go to the inner ring).
pub fn build_nearest_ring_basis(g: &RingGeometry) -> GaussianRingBasis {
    let radius = g.radius_grid();
    let owner: Vec<Option<usize>> = radius
        .iter()
        .map(|&r| {
            if r > g.mask_radius {
                return None;
            }
            let mut best = 0;
            for i in 1..g.n {
                if (r - g.mu[i]).abs() < (r - g.mu[best]).abs() {
                    best = i;
                }
            }
            Some(best)
        })
        .collect();
    let taps = g.taps();
    let rings = Tensor::from_fn(&basis_shape(g), |idx| {
        let (i, p) = (idx / taps, idx % taps);
        if owner[p] == Some(i) {
            1.0
        } else {
            0.0
        }
    });
    GaussianRingBasis { rings }
}

/// `∂M[i, p] / ∂log_sigma[i] = M[i, p] · (r − mu_i)² / sigma_i²`, with the
/// same `(n, k, ..)` extents as the basis.
pub fn basis_sigma_jacobian(g: &RingGeometry, s: &SigmaParams) -> Result<Tensor> {
    let basis = build_basis(g, s)?;
    let radius = g.radius_grid();
    let sigma = s.sigma();
    let taps = g.taps();
    let mut out = basis.rings;
    for (idx, v) in out.data_mut().iter_mut().enumerate() {
        let (i, p) = (idx / taps, idx % taps);
        let d = radius[p] - g.mu[i];
        *v *= d * d / (sigma[i] * sigma[i]);
    }
    Ok(out)
}

/// Trainable state of one GMR layer.
#[derive(Clone, Debug, PartialEq)]
pub struct GmrLayerParams {
    pub geometry: RingGeometry,
    pub weights: RingWeights,
    pub sigma: SigmaParams,
}

impl GmrLayerParams {
    pub fn new(geometry: RingGeometry, weights: RingWeights, sigma: SigmaParams) -> Result<Self> {
        if weights.n() != geometry.n {
            return Err(GmrError::DimensionMismatch(format!(
                "ring weights carry {} rings, geometry has {}",
                weights.n(),
                geometry.n
            )));
        }
        check_sigma(&geometry, &sigma)?;
        Ok(Self { geometry, weights, sigma })
    }

    /// Freshly initialized layer: Kaiming ring weights and FWHM-matched sigma.
    pub fn init(k: usize, n: usize, dims: usize, c_in: usize, c_out: usize, seed: u64) -> Result<Self> {
        let geometry = ring_geometry(k, n, dims)?;
        let weights = init_weights(c_in, c_out, n, seed);
        let sigma = init_sigma(&geometry);
        Self::new(geometry, weights, sigma)
    }

    pub fn c_in(&self) -> usize {
        self.weights.c_in()
    }

    pub fn c_out(&self) -> usize {
        self.weights.c_out()
    }

    pub fn basis(&self) -> Result<GaussianRingBasis> {
        build_basis(&self.geometry, &self.sigma)
    }

    pub fn clip(&mut self) {
        self.sigma = clip_sigma(&self.sigma, &self.geometry);
    }
}

/// Dense kernel `K[o, c, p] = Σ_i w[o, c, i] · M[i, p]`, extents
/// `(C_out, C_in, k, k[, k])`.
pub fn materialize_kernel(weights: &RingWeights, basis: &GaussianRingBasis) -> Result<Tensor> {
    let n = basis.n();
    if weights.n() != n {
        return Err(GmrError::DimensionMismatch(format!("{} ring weights vs {} rings", weights.n(), n)));
    }
    let taps = basis.taps();
    let pairs = weights.c_out() * weights.c_in();
    let mut out = vec![0.0; pairs * taps];
    crate::scalar::gemm(
        pairs,
        n,
        taps,
        weights.w.data(),
        crate::scalar::Layout::Normal,
        basis.rings.data(),
        crate::scalar::Layout::Normal,
        0.0,
        &mut out,
    );
    let mut shape = vec![weights.c_out(), weights.c_in()];
    shape.extend(&basis.rings.shape()[1..]);
    Tensor::new(&shape, out)
}

/// Parameter counts `(gmr, dense)`: `c_in·c_out·n + n` ring weights plus
/// layer-wise sigmas, against `c_in·c_out·k^dims` dense taps.
pub fn parameter_count(c_in: usize, c_out: usize, g: &RingGeometry) -> (usize, usize) {
    (c_in * c_out * g.n + g.n, c_in * c_out * g.taps())
}
