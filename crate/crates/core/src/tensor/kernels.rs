//! Raw slice kernels behind the tape ops. No allocation policy or shape
//! bookkeeping lives here beyond what each kernel needs.

use super::Real;
use crate::error::{Error, Result};

/// `c (m×n) = op(a) · op(b)` (plus `c` when `accumulate`), all row-major.
///
/// `op(a)` is `m×k`: stored as `(m,k)`, or as `(k,m)` when `trans_a`.
/// `op(b)` is `k×n`: stored as `(k,n)`, or as `(n,k)` when `trans_b`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    accumulate: bool,
    c: &mut [T],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: the extents above were checked against every buffer length and
    // the strides describe dense row-major storage of those extents.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
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

/// Output extent of a sliding window along one axis.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || kernel == 0 || input + 2 * pad < kernel {
        return None;
    }
    Some((input + 2 * pad - kernel) / stride + 1)
}

/// Geometry of one 2-D convolution over a single sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl Conv2dGeom {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        c_in: usize,
        h: usize,
        w: usize,
        c_out: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let (ho, wo) = match (
            conv_out_extent(h, kh, stride, pad),
            conv_out_extent(w, kw, stride, pad),
        ) {
            (Some(ho), Some(wo)) => (ho, wo),
            _ => {
                return Err(Error::dim(
                    "conv2d",
                    format!(
                        "kernel {kh}x{kw} stride {stride} pad {pad} gives empty output on {h}x{w}"
                    ),
                ))
            }
        };
        Ok(Conv2dGeom {
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn out_pixels(&self) -> usize {
        self.ho * self.wo
    }

    /// 1x1, stride 1, no padding: the input already is the column matrix.
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output columns `ox` whose input column `ox·stride + kj - pad` lies inside `0..w`.
fn valid_cols(g: &Conv2dGeom, kj: usize) -> (usize, usize) {
    let lo = if g.pad > kj {
        (g.pad - kj).div_ceil(g.stride)
    } else {
        0
    };
    let hi = if g.w + g.pad > kj {
        ((g.w - 1 + g.pad - kj) / g.stride + 1).min(g.wo)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Unfolds one `(c_in,h,w)` sample into a `(c_in·kh·kw, ho·wo)` column matrix.
pub fn im2col<T: Real>(x: &[T], g: &Conv2dGeom, col: &mut [T]) {
    let p = g.out_pixels();
    for ci in 0..g.c_in {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * p..(row + 1) * p];
                let (lo, hi) = valid_cols(g, kj);
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize || lo >= hi {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    out_row[..lo].fill(T::zero());
                    out_row[hi..].fill(T::zero());
                    let start = lo * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        out_row[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                    } else {
                        for (k, v) in out_row[lo..hi].iter_mut().enumerate() {
                            *v = src[start + k * g.stride];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back into `dx`.
pub fn col2im_add<T: Real>(col: &[T], g: &Conv2dGeom, dx: &mut [T]) {
    let p = g.out_pixels();
    for ci in 0..g.c_in {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &col[row * p..(row + 1) * p];
                let (lo, hi) = valid_cols(g, kj);
                if lo >= hi {
                    continue;
                }
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let seg = &src[oy * g.wo + lo..oy * g.wo + hi];
                    let start = lo * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        for (d, &v) in dst[start..start + hi - lo].iter_mut().zip(seg) {
                            *d = *d + v;
                        }
                    } else {
                        for (k, &v) in seg.iter().enumerate() {
                            let d = &mut dst[start + k * g.stride];
                            *d = *d + v;
                        }
                    }
                }
            }
        }
    }
}

/// Batched convolution forward. `x` is `(n, c_in, h, w)`, `w` is
/// `(c_out, c_in, kh, kw)`, output `(n, c_out, ho, wo)`.
pub fn conv2d_forward<T: Real>(
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    g: &Conv2dGeom,
    batch: usize,
) -> Vec<T> {
    let in_len = g.c_in * g.h * g.w;
    let out_len = g.c_out * g.out_pixels();
    let k = g.patch_len();
    let p = g.out_pixels();
    let mut out = vec![T::zero(); batch * out_len];
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); k * p]
    };
    for s in 0..batch {
        let xs = &x[s * in_len..(s + 1) * in_len];
        let dst = &mut out[s * out_len..(s + 1) * out_len];
        if let Some(b) = bias {
            for (co, row) in dst.chunks_mut(p).enumerate() {
                row.iter_mut().for_each(|v| *v = b[co]);
            }
        }
        let src: &[T] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, g, &mut col);
            &col
        };
        gemm(
            g.c_out,
            k,
            p,
            weight,
            false,
            src,
            false,
            bias.is_some(),
            dst,
        );
    }
    out
}

/// Batched convolution backward. Accumulates into whichever of `dx`, `dw`,
/// `db` are requested.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Real>(
    x: &[T],
    weight: &[T],
    dout: &[T],
    g: &Conv2dGeom,
    batch: usize,
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    let in_len = g.c_in * g.h * g.w;
    let p = g.out_pixels();
    let out_len = g.c_out * p;
    let k = g.patch_len();
    let pointwise = g.is_pointwise();
    let mut col = if pointwise {
        Vec::new()
    } else {
        vec![T::zero(); k * p]
    };
    let mut dcol = if pointwise || dx.is_none() {
        Vec::new()
    } else {
        vec![T::zero(); k * p]
    };
    for s in 0..batch {
        let dy = &dout[s * out_len..(s + 1) * out_len];
        if let Some(db) = db.as_deref_mut() {
            for (co, row) in dy.chunks(p).enumerate() {
                db[co] = row.iter().fold(db[co], |a, &b| a + b);
            }
        }
        let xs = &x[s * in_len..(s + 1) * in_len];
        if let Some(dw) = dw.as_deref_mut() {
            let cols: &[T] = if pointwise {
                xs
            } else {
                im2col(xs, g, &mut col);
                &col
            };
            gemm(g.c_out, p, k, dy, false, cols, true, true, dw);
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxs = &mut dx[s * in_len..(s + 1) * in_len];
            if pointwise {
                gemm(k, g.c_out, p, weight, true, dy, false, true, dxs);
            } else {
                gemm(k, g.c_out, p, weight, true, dy, false, false, &mut dcol);
                col2im_add(&dcol, g, dxs);
            }
        }
    }
}

/// Max pooling over `(planes, h, w)`; returns values and flat argmax indices.
/// Ties keep the first position in row-major window order.
#[allow(clippy::too_many_arguments)]
pub fn maxpool_forward<T: Real>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> (Vec<T>, Vec<usize>) {
    let mut out = Vec::with_capacity(planes * ho * wo);
    let mut arg = Vec::with_capacity(planes * ho * wo);
    for pl in 0..planes {
        let base = pl * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = T::neg_infinity();
                let mut best_i = usize::MAX;
                for ki in 0..kernel {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kj in 0..kernel {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = base + iy as usize * w + ix as usize;
                        if best_i == usize::MAX || x[idx] > best {
                            best = x[idx];
                            best_i = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    (out, arg)
}

/// Nearest-neighbour upsampling of `(planes, h, w)` by an integer factor.
pub fn upsample_forward<T: Real>(x: &[T], planes: usize, h: usize, w: usize, f: usize) -> Vec<T> {
    let (oh, ow) = (h * f, w * f);
    let mut out = vec![T::zero(); planes * oh * ow];
    for pl in 0..planes {
        let src = &x[pl * h * w..(pl + 1) * h * w];
        let dst = &mut out[pl * oh * ow..(pl + 1) * oh * ow];
        for oy in 0..oh {
            let srow = &src[(oy / f) * w..(oy / f + 1) * w];
            for (ox, v) in dst[oy * ow..(oy + 1) * ow].iter_mut().enumerate() {
                *v = srow[ox / f];
            }
        }
    }
    out
}

/// Adjoint of [`upsample_forward`]: sums each replicated block.
pub fn upsample_backward<T: Real>(
    dy: &[T],
    planes: usize,
    h: usize,
    w: usize,
    f: usize,
    dx: &mut [T],
) {
    let (oh, ow) = (h * f, w * f);
    for pl in 0..planes {
        let src = &dy[pl * oh * ow..(pl + 1) * oh * ow];
        let dst = &mut dx[pl * h * w..(pl + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let i = (oy / f) * w + ox / f;
                dst[i] = dst[i] + src[oy * ow + ox];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
        let mut t = vec![0.0; a.len()];
        for r in 0..rows {
            for c in 0..cols {
                t[c * rows + r] = a[r * cols + c];
            }
        }
        t
    }

    #[test]
    fn gemm_transpose_flags_match_naive() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.71).cos()).collect();
        let want = naive_matmul(&a, &b, m, k, n);
        let at = transpose(&a, m, k);
        let bt = transpose(&b, k, n);
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let aa = if ta { &at } else { &a };
            let bb = if tb { &bt } else { &b };
            let mut c = vec![0.0; m * n];
            gemm(m, k, n, aa, ta, bb, tb, false, &mut c);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12, "ta={ta} tb={tb}");
            }
        }
    }

    #[test]
    fn im2col_and_col2im_are_adjoint() {
        let g = Conv2dGeom::new(2, 5, 4, 1, 3, 2, 2, 1).unwrap();
        let x: Vec<f64> = (0..2 * 5 * 4).map(|i| i as f64 * 0.1 - 1.0).collect();
        let y: Vec<f64> = (0..g.patch_len() * g.out_pixels())
            .map(|i| (i as f64).sin())
            .collect();
        let mut col = vec![0.0; y.len()];
        im2col(&x, &g, &mut col);
        let mut back = vec![0.0; x.len()];
        col2im_add(&y, &g, &mut back);
        let lhs: f64 = col.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn im2col_matches_direct_indexing() {
        for (h, w, kh, kw, stride, pad) in [
            (5, 4, 3, 2, 2, 1),
            (7, 7, 7, 7, 2, 3),
            (6, 9, 3, 3, 1, 1),
            (4, 4, 1, 1, 3, 0),
            (3, 5, 3, 5, 1, 4),
            (8, 8, 3, 3, 3, 2),
        ] {
            let g = Conv2dGeom::new(2, h, w, 1, kh, kw, stride, pad).unwrap();
            let x: Vec<f64> = (0..2 * h * w).map(|i| i as f64 + 1.0).collect();
            let mut col = vec![f64::NAN; g.patch_len() * g.out_pixels()];
            im2col(&x, &g, &mut col);
            for ci in 0..2 {
                for ki in 0..kh {
                    for kj in 0..kw {
                        for oy in 0..g.ho {
                            for ox in 0..g.wo {
                                let iy = (oy * stride + ki) as isize - pad as isize;
                                let ix = (ox * stride + kj) as isize - pad as isize;
                                let want =
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        0.0
                                    } else {
                                        x[ci * h * w + iy as usize * w + ix as usize]
                                    };
                                let row = (ci * kh + ki) * kw + kj;
                                assert_eq!(col[row * g.out_pixels() + oy * g.wo + ox], want);
                            }
                        }
                    }
                }
            }
            let y: Vec<f64> = (0..col.len()).map(|i| (i as f64).cos()).collect();
            let mut back = vec![0.0; x.len()];
            col2im_add(&y, &g, &mut back);
            let lhs: f64 = col.iter().zip(&y).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn out_extent_arithmetic() {
        assert_eq!(conv_out_extent(64, 3, 1, 1), Some(64));
        assert_eq!(conv_out_extent(512, 7, 2, 3), Some(256));
        assert_eq!(conv_out_extent(256, 3, 2, 1), Some(128));
        assert_eq!(conv_out_extent(2, 3, 1, 0), None);
    }
}
