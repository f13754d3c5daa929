use crate::scalar::Scalar;

use super::ConvGeom;

#[inline]
fn source(o: usize, tap: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
    let i = (o * stride + tap).checked_sub(pad)?;
    (i < extent).then_some(i)
}

/// Output indices `lo..hi` whose tap lands inside `0..extent`.
#[inline]
fn valid_range(tap: usize, stride: usize, pad: usize, extent: usize, out: usize) -> (usize, usize) {
    // o * stride + tap >= pad  and  o * stride + tap < pad + extent
    let lo = pad.saturating_sub(tap).div_ceil(stride).min(out);
    let hi = (pad + extent).saturating_sub(tap).div_ceil(stride).clamp(lo, out);
    (lo, hi)
}

/// Unfolds one channel plane into a `taps × positions` matrix; padded
/// taps read zero.
pub(crate) fn im2col_plane<T: Scalar>(src: &[T], g: &ConvGeom, cols: &mut [T]) {
    let [id, ih, iw] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [od, oh, ow] = g.output;
    let positions = od * oh * ow;
    debug_assert_eq!(src.len(), id * ih * iw);
    debug_assert_eq!(cols.len(), kd * kh * kw * positions);

    let mut row = 0;
    for a in 0..kd {
        for b in 0..kh {
            for c in 0..kw {
                let dst = &mut cols[row * positions..(row + 1) * positions];
                row += 1;
                let mut p = 0;
                let (lo, hi) = valid_range(c, g.stride[2], g.pad[2], iw, ow);
                for z in 0..od {
                    let sz = source(z, a, g.stride[0], g.pad[0], id);
                    for y in 0..oh {
                        let sy = source(y, b, g.stride[1], g.pad[1], ih);
                        let line = &mut dst[p..p + ow];
                        p += ow;
                        match (sz, sy) {
                            (Some(sz), Some(sy)) if lo < hi => {
                                let base = (sz * ih + sy) * iw;
                                line[..lo].fill(T::zero());
                                line[hi..].fill(T::zero());
                                let first = base + lo * g.stride[2] + c - g.pad[2];
                                if g.stride[2] == 1 {
                                    line[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                                } else {
                                    let row = src[first..].iter().step_by(g.stride[2]);
                                    line[lo..hi].iter_mut().zip(row).for_each(|(v, &s)| *v = s);
                                }
                            }
                            _ => line.fill(T::zero()),
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col_plane`]: scatters `taps × positions` back onto a
/// channel plane, adding into `dst`.
pub(crate) fn col2im_plane_add<T: Scalar>(cols: &[T], g: &ConvGeom, dst: &mut [T]) {
    let [id, ih, iw] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [od, oh, ow] = g.output;
    let positions = od * oh * ow;
    debug_assert_eq!(dst.len(), id * ih * iw);

    let mut row = 0;
    for a in 0..kd {
        for b in 0..kh {
            for c in 0..kw {
                let src = &cols[row * positions..(row + 1) * positions];
                row += 1;
                let mut p = 0;
                let (lo, hi) = valid_range(c, g.stride[2], g.pad[2], iw, ow);
                for z in 0..od {
                    let sz = source(z, a, g.stride[0], g.pad[0], id);
                    for y in 0..oh {
                        let sy = source(y, b, g.stride[1], g.pad[1], ih);
                        let line = &src[p..p + ow];
                        p += ow;
                        if let (Some(sz), Some(sy), true) = (sz, sy, lo < hi) {
                            let first = (sz * ih + sy) * iw + lo * g.stride[2] + c - g.pad[2];
                            let row = dst[first..].iter_mut().step_by(g.stride[2]);
                            row.zip(&line[lo..hi]).for_each(|(d, &v)| *d = *d + v);
                        }
                    }
                }
            }
        }
    }
}
