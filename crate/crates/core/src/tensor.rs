//! Dense row-major tensors and the geometric transforms used by the
//! equivariance tooling.
//!
//! Layouts are batch × channels × spatial: `(B, C, H, W)` in 2D and
//! `(B, C, D, H, W)` in 3D. Transforms that act on "the spatial plane"
//! use the last two axes.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{GmrError, Result};
use crate::scalar::Scalar;

/// Denominator floor for [`rel_error`].
pub const REL_ERROR_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(GmrError::Shape("tensor must have at least one axis".into()));
    }
    if let Some(ax) = shape.iter().position(|&e| e == 0) {
        return Err(GmrError::Shape(format!("axis {ax} has zero extent in {shape:?}")));
    }
    Ok(shape.iter().product())
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let len = check_shape(shape)?;
        if len != data.len() {
            return Err(GmrError::Shape(format!("shape {shape:?} needs {len} elements, got {}", data.len())));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    /// # Panics
    /// On an empty shape or a zero extent.
    pub fn zeros(shape: &[usize]) -> Self {
        let len = check_shape(shape).expect("invalid shape");
        Self { shape: shape.to_vec(), data: vec![T::zero(); len] }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().for_each(|x| *x = value);
        t
    }

    /// Fills from a function of the flat row-major index.
    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> T) -> Self {
        let len = check_shape(shape).expect("invalid shape");
        Self { shape: shape.to_vec(), data: (0..len).map(f).collect() }
    }

    /// Standard normal entries.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Self {
        Self::from_fn(shape, |_| T::from_f64(StandardNormal.sample(rng)))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index.iter().zip(self.strides()).map(|(i, s)| i * s).sum()
    }

    pub fn at(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(GmrError::DimensionMismatch(format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn scale(&self, alpha: T) -> Self {
        self.map(|x| x * alpha)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_f64(self.data.len() as f64)
    }

    /// Euclidean norm accumulated in `f64`.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.as_f64().abs()))
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|x| U::from_f64(x.as_f64())).collect() }
    }

    /// Number of elements per leading index when the tensor is viewed as
    /// `outer × inner` with `inner` spanning axes `axis..`.
    fn inner_len(&self, axis: usize) -> usize {
        self.shape[axis..].iter().product()
    }
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Builds `out` of `out_shape` by pulling, for every output index, the
/// source index computed by `src`.
fn remap<T: Scalar>(t: &Tensor<T>, out_shape: &[usize], src: impl Fn(&[usize], &mut [usize])) -> Tensor<T> {
    let in_strides = t.strides();
    let nd = out_shape.len();
    let mut idx = vec![0usize; nd];
    let mut s = vec![0usize; nd];
    let len: usize = out_shape.iter().product();
    let mut data = Vec::with_capacity(len);
    for _ in 0..len {
        src(&idx, &mut s);
        let off: usize = s.iter().zip(&in_strides).map(|(a, b)| a * b).sum();
        data.push(t.data[off]);
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Tensor { shape: out_shape.to_vec(), data }
}

fn check_axis<T>(t: &Tensor<T>, axis: usize) -> Result<()> {
    if axis >= t.shape.len() {
        return Err(GmrError::InvalidArgument(format!("axis {axis} out of range for {}-d tensor", t.shape.len())));
    }
    Ok(())
}

/// Rotates by `quarter_turns` × 90° counter-clockwise in the plane of
/// axes `(row_axis, col_axis)`: `out[i][j] = in[j][W-1-i]` per turn.
pub fn rot90<T: Scalar>(t: &Tensor<T>, quarter_turns: i32, plane: (usize, usize)) -> Result<Tensor<T>> {
    let (a, b) = plane;
    check_axis(t, a)?;
    check_axis(t, b)?;
    if a == b {
        return Err(GmrError::InvalidArgument("rotation plane needs two distinct axes".into()));
    }
    let (ea, eb) = (t.shape[a], t.shape[b]);
    if ea != eb {
        return Err(GmrError::DimensionMismatch(format!("rotation plane axes {a} and {b} have extents {ea} and {eb}")));
    }
    let last = ea - 1;
    let turns = quarter_turns.rem_euclid(4);
    if turns == 0 {
        return Ok(t.clone());
    }
    Ok(remap(t, &t.shape, |o, s| {
        s.copy_from_slice(o);
        let (i, j) = (o[a], o[b]);
        let (si, sj) = match turns {
            1 => (j, last - i),
            2 => (last - i, last - j),
            _ => (last - j, i),
        };
        s[a] = si;
        s[b] = sj;
    }))
}

/// Reverses the tensor along `axis`.
pub fn flip<T: Scalar>(t: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    check_axis(t, axis)?;
    let last = t.shape[axis] - 1;
    Ok(remap(t, &t.shape, |o, s| {
        s.copy_from_slice(o);
        s[axis] = last - o[axis];
    }))
}

/// General axis permutation: output axis `i` is input axis `perm[i]`.
pub fn permute_axes<T: Scalar>(t: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
    let nd = t.ndim();
    let mut seen = vec![false; nd];
    if perm.len() != nd || perm.iter().any(|&p| p >= nd || std::mem::replace(&mut seen[p], true)) {
        return Err(GmrError::InvalidArgument(format!("{perm:?} is not a permutation of {nd} axes")));
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| t.shape[p]).collect();
    Ok(remap(t, &out_shape, |o, s| {
        for (i, &p) in perm.iter().enumerate() {
            s[p] = o[i];
        }
    }))
}

/// `(cos, sin)` of an angle in degrees, exact on multiples of 90°.
fn cos_sin_degrees(angle: f64) -> (f64, f64) {
    let a = angle.rem_euclid(360.0);
    if a == 0.0 {
        (1.0, 0.0)
    } else if a == 90.0 {
        (0.0, 1.0)
    } else if a == 180.0 {
        (-1.0, 0.0)
    } else if a == 270.0 {
        (0.0, -1.0)
    } else {
        let r = a.to_radians();
        (r.cos(), r.sin())
    }
}

/// Rotates the last two axes counter-clockwise by `angle_degrees` about
/// the pixel-center `((H-1)/2, (W-1)/2)` with bilinear interpolation.
/// Samples falling outside the frame read `fill`.
///
/// Agrees with [`rot90`] at 90° on square planes.
pub fn rotate_bilinear<T: Scalar>(t: &Tensor<T>, angle_degrees: f64, fill: T) -> Result<Tensor<T>> {
    if t.ndim() < 2 {
        return Err(GmrError::InvalidArgument("bilinear rotation needs a 2-d plane".into()));
    }
    let nd = t.ndim();
    let (h, w) = (t.shape[nd - 2], t.shape[nd - 1]);
    let (cos, sin) = cos_sin_degrees(angle_degrees);
    if cos == 1.0 {
        return Ok(t.clone());
    }
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let plane = h * w;

    // per output pixel: 4 source offsets (or None) and weights
    let mut taps: Vec<[(Option<usize>, f64); 4]> = Vec::with_capacity(plane);
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let sy = cy + cos * dy + sin * dx;
            let sx = cx - sin * dy + cos * dx;
            let (y0, x0) = (sy.floor(), sx.floor());
            let (fy, fx) = (sy - y0, sx - x0);
            let at = |yy: f64, xx: f64| -> Option<usize> {
                if yy >= 0.0 && xx >= 0.0 && yy < h as f64 && xx < w as f64 {
                    Some(yy as usize * w + xx as usize)
                } else {
                    None
                }
            };
            taps.push([
                (at(y0, x0), (1.0 - fy) * (1.0 - fx)),
                (at(y0, x0 + 1.0), (1.0 - fy) * fx),
                (at(y0 + 1.0, x0), fy * (1.0 - fx)),
                (at(y0 + 1.0, x0 + 1.0), fy * fx),
            ]);
        }
    }

    let mut out = Tensor::zeros(&t.shape);
    for (src, dst) in t.data.chunks_exact(plane).zip(out.data.chunks_exact_mut(plane)) {
        for (d, tap) in dst.iter_mut().zip(&taps) {
            let mut acc = T::zero();
            for &(off, wgt) in tap {
                if wgt == 0.0 {
                    continue;
                }
                let v = off.map_or(fill, |o| src[o]);
                acc = acc + v * T::from_f64(wgt);
            }
            *d = acc;
        }
    }
    Ok(out)
}

/// Non-overlapping mean pooling over every spatial axis (axes `2..`).
pub fn avg_pool<T: Scalar>(t: &Tensor<T>, window: usize) -> Result<Tensor<T>> {
    if t.ndim() < 3 {
        return Err(GmrError::InvalidArgument("pooling needs batch, channel and spatial axes".into()));
    }
    if window == 0 {
        return Err(GmrError::InvalidArgument("pooling window must be positive".into()));
    }
    let spatial = &t.shape[2..];
    if let Some(e) = spatial.iter().find(|&&e| e % window != 0) {
        return Err(GmrError::Shape(format!("spatial extent {e} not divisible by window {window}")));
    }
    let mut out_shape = t.shape.clone();
    for e in &mut out_shape[2..] {
        *e /= window;
    }
    let sd = spatial.len();
    let count = window.pow(sd as u32);
    let inv = T::from_f64(1.0 / count as f64);
    let in_strides = t.strides();
    // window offsets in fixed lexicographic order
    let mut offsets = vec![0usize];
    for &stride in &in_strides[2..] {
        offsets = offsets.iter().flat_map(|&o| (0..window).map(move |w| o + w * stride)).collect();
    }
    let out = remap_reduce(&out_shape, |o| {
        let mut base = o[0] * in_strides[0] + o[1] * in_strides[1];
        for d in 0..sd {
            base += o[2 + d] * window * in_strides[2 + d];
        }
        let acc = offsets.iter().fold(T::zero(), |acc, &w| acc + t.data[base + w]);
        acc * inv
    });
    Ok(out)
}

fn remap_reduce<T: Scalar>(out_shape: &[usize], f: impl Fn(&[usize]) -> T) -> Tensor<T> {
    let nd = out_shape.len();
    let len: usize = out_shape.iter().product();
    let mut idx = vec![0usize; nd];
    let mut data = Vec::with_capacity(len);
    for _ in 0..len {
        data.push(f(&idx));
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Tensor { shape: out_shape.to_vec(), data }
}

/// Zeros every position of the last two axes farther than `radius` from
/// the plane center `((H-1)/2, (W-1)/2)`.
pub fn central_disk_mask<T: Scalar>(t: &Tensor<T>, radius: f64) -> Result<Tensor<T>> {
    if t.ndim() < 2 {
        return Err(GmrError::InvalidArgument("disk mask needs a 2-d plane".into()));
    }
    let nd = t.ndim();
    let (h, w) = (t.shape[nd - 2], t.shape[nd - 1]);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let keep: Vec<bool> = (0..h * w)
        .map(|p| {
            let (dy, dx) = ((p / w) as f64 - cy, (p % w) as f64 - cx);
            (dy * dy + dx * dx).sqrt() <= radius
        })
        .collect();
    let mut out = t.clone();
    let plane = t.inner_len(nd - 2);
    for chunk in out.data.chunks_exact_mut(plane) {
        for (v, &k) in chunk.iter_mut().zip(&keep) {
            if !k {
                *v = T::zero();
            }
        }
    }
    Ok(out)
}

/// `‖a − b‖₂ / max(‖b‖₂, 1e-12)`, accumulated in `f64`.
pub fn rel_error<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape != b.shape {
        return Err(GmrError::DimensionMismatch(format!("{:?} vs {:?}", a.shape, b.shape)));
    }
    let diff: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2)).sum::<f64>().sqrt();
    Ok(diff / b.norm().max(REL_ERROR_EPS))
}
