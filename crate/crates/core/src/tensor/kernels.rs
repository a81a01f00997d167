//! Raw numeric kernels shared by the forward and backward passes.

/// `c = a·b + beta·c` where `a` is m×k and `b` is k×n, both row-major unless
/// the corresponding `trans_*` flag says the buffer holds the transpose.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every index reached through the
    // given strides lies inside the three slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Left-pads `shape` with ones up to `rank`.
pub fn pad_shape(shape: &[usize], rank: usize) -> Vec<usize> {
    let mut out = vec![1; rank - shape.len()];
    out.extend_from_slice(shape);
    out
}

/// Numpy-style broadcast of two shapes, `None` when incompatible.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let (pa, pb) = (pad_shape(a, rank), pad_shape(b, rank));
    pa.iter()
        .zip(&pb)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Some(x),
            (1, _) => Some(y),
            (_, 1) => Some(x),
            _ => None,
        })
        .collect()
}

/// For every row-major index of `full`, the flat offset into a tensor of
/// shape `part` that broadcasts to `full`.
pub fn broadcast_offsets(full: &[usize], part: &[usize]) -> Vec<usize> {
    let rank = full.len();
    let part = pad_shape(part, rank);
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for d in (0..rank).rev() {
        strides[d] = if part[d] == 1 { 0 } else { acc };
        acc *= part[d];
    }
    let total: usize = full.iter().product();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..total {
        out.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < full[d] {
                break;
            }
            off -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    out
}

pub fn conv_out(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub ho: usize,
    pub wo: usize,
}

/// Unfolds one image `[cin, h, w]` into columns `[cin·kh·kw, ho·wo]`.
pub fn im2col(g: &ConvGeom, img: &[f64], cols: &mut [f64]) {
    let hw_out = g.ho * g.wo;
    for c in 0..g.cin {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                for oi in 0..g.ho {
                    let ii = (oi * g.stride + ki) as isize - g.padding as isize;
                    let line = &mut dst[oi * g.wo..(oi + 1) * g.wo];
                    if ii < 0 || ii >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[ii as usize * g.w..(ii as usize + 1) * g.w];
                    for (oj, v) in line.iter_mut().enumerate() {
                        let jj = (oj * g.stride + kj) as isize - g.padding as isize;
                        *v = if jj < 0 || jj >= g.w as isize {
                            0.0
                        } else {
                            src[jj as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into an image gradient.
pub fn col2im(g: &ConvGeom, cols: &[f64], img: &mut [f64]) {
    let hw_out = g.ho * g.wo;
    for c in 0..g.cin {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                for oi in 0..g.ho {
                    let ii = (oi * g.stride + ki) as isize - g.padding as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[ii as usize * g.w..(ii as usize + 1) * g.w];
                    for oj in 0..g.wo {
                        let jj = (oj * g.stride + kj) as isize - g.padding as isize;
                        if jj >= 0 && jj < g.w as isize {
                            dst[jj as usize] += src[oi * g.wo + oj];
                        }
                    }
                }
            }
        }
    }
}

/// One bilinear tap along an axis: two source indices and their weights.
#[derive(Clone, Copy, Debug)]
pub struct Tap {
    pub i0: usize,
    pub i1: usize,
    pub w0: f64,
    pub w1: f64,
}

/// Half-pixel-centre sampling positions mapping `out` samples onto the source
/// interval `[start, start + len)` of an axis with `size` entries.
pub fn bilinear_taps(start: usize, len: usize, size: usize, out: usize) -> Vec<Tap> {
    let scale = len as f64 / out as f64;
    (0..out)
        .map(|o| {
            let src = (start as f64 + (o as f64 + 0.5) * scale - 0.5)
                .clamp(start as f64, (start + len - 1) as f64);
            let i0 = (src.floor() as usize).min(size - 1);
            let i1 = (i0 + 1).min(start + len - 1).min(size - 1);
            let w1 = src - i0 as f64;
            Tap {
                i0,
                i1,
                w0: 1.0 - w1,
                w1,
            }
        })
        .collect()
}

/// Resamples `src` (`h`×`w` plane) through the given row/column taps.
pub fn resample_plane(src: &[f64], w: usize, rows: &[Tap], cols: &[Tap], dst: &mut [f64]) {
    let wo = cols.len();
    for (oi, r) in rows.iter().enumerate() {
        let top = &src[r.i0 * w..(r.i0 + 1) * w];
        let bot = &src[r.i1 * w..(r.i1 + 1) * w];
        for (oj, c) in cols.iter().enumerate() {
            let t = top[c.i0] * c.w0 + top[c.i1] * c.w1;
            let b = bot[c.i0] * c.w0 + bot[c.i1] * c.w1;
            dst[oi * wo + oj] = t * r.w0 + b * r.w1;
        }
    }
}

/// Adjoint of [`resample_plane`].
pub fn resample_plane_adjoint(grad: &[f64], w: usize, rows: &[Tap], cols: &[Tap], dsrc: &mut [f64]) {
    let wo = cols.len();
    for (oi, r) in rows.iter().enumerate() {
        for (oj, c) in cols.iter().enumerate() {
            let g = grad[oi * wo + oj];
            dsrc[r.i0 * w + c.i0] += g * r.w0 * c.w0;
            dsrc[r.i0 * w + c.i1] += g * r.w0 * c.w1;
            dsrc[r.i1 * w + c.i0] += g * r.w1 * c.w0;
            dsrc[r.i1 * w + c.i1] += g * r.w1 * c.w1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_product_in_all_transpose_modes() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).sin()).collect();
        let naive = |i: usize, j: usize| (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum::<f64>();
        let at: Vec<f64> = (0..k * m).map(|i| a[(i % m) * k + i / m]).collect();
        let bt: Vec<f64> = (0..n * k).map(|i| b[(i % k) * n + i / k]).collect();
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let mut c = vec![0.0; m * n];
            let aa = if ta { &at } else { &a };
            let bb = if tb { &bt } else { &b };
            gemm(m, k, n, aa, ta, bb, tb, 0.0, &mut c);
            for i in 0..m {
                for j in 0..n {
                    assert!((c[i * n + j] - naive(i, j)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn broadcast_offsets_tile_a_row_vector() {
        assert_eq!(broadcast_offsets(&[2, 3], &[3]), vec![0, 1, 2, 0, 1, 2]);
        assert_eq!(broadcast_offsets(&[2, 3], &[2, 1]), vec![0, 0, 0, 1, 1, 1]);
        assert_eq!(broadcast_shape(&[2, 1, 4], &[3, 1]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shape(&[2, 3], &[4]), None);
    }

    #[test]
    fn identity_resample_is_exact() {
        let src: Vec<f64> = (0..12).map(f64::from).collect();
        let rows = bilinear_taps(0, 3, 3, 3);
        let cols = bilinear_taps(0, 4, 4, 4);
        let mut dst = vec![0.0; 12];
        resample_plane(&src, 4, &rows, &cols, &mut dst);
        assert_eq!(src, dst);
    }
}
