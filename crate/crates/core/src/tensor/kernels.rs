//! Low-level compute kernels shared by the graph operations.
//!
//! All kernels are plain functions over slices with fixed iteration order, so
//! results are bit-deterministic for a given input. Convolution goes through
//! im2col plus a row-major matmul whose inner loops run over contiguous
//! memory and autovectorize.

use super::Element;

/// C[m,n] += A[m,k] * B[k,n]
pub fn matmul_acc<E: Element>(a: &[E], b: &[E], c: &mut [E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

/// C[m,k] += A[m,n] * B[k,n]^T (dot products of rows)
pub fn matmul_abt_acc<E: Element>(a: &[E], b: &[E], c: &mut [E], m: usize, n: usize, k: usize) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * k);
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = E::ZERO;
            for j in 0..n {
                acc += arow[j] * brow[j];
            }
            c[i * k + p] += acc;
        }
    }
}

/// C[k,n] += A[m,k]^T * B[m,n]
pub fn matmul_atb_acc<E: Element>(a: &[E], b: &[E], c: &mut [E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let crow = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Unfold one image [c,h,w] into columns [c*kh*kw, oh*ow] for the given
/// stride/pad. Out-of-bounds taps contribute zero.
#[allow(clippy::too_many_arguments)]
pub fn im2col<E: Element>(
    x: &[E],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    col: &mut [E],
) {
    let oh = conv_out_extent(h, kh, stride, pad);
    let ow = conv_out_extent(w, kw, stride, pad);
    debug_assert_eq!(col.len(), c * kh * kw * oh * ow);
    for elem in col.iter_mut() {
        *elem = E::ZERO;
    }
    for ch in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ch * kh + ky) * kw + kx) * (oh * ow);
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = (ch * h + iy as usize) * w;
                    let dst = row + oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            col[dst + ox] = x[src + ix as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Fold columns back into an image, accumulating overlapping taps.
#[allow(clippy::too_many_arguments)]
pub fn col2im_acc<E: Element>(
    col: &[E],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    x: &mut [E],
) {
    let oh = conv_out_extent(h, kh, stride, pad);
    let ow = conv_out_extent(w, kw, stride, pad);
    debug_assert_eq!(col.len(), c * kh * kw * oh * ow);
    debug_assert_eq!(x.len(), c * h * w);
    for ch in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ch * kh + ky) * kw + kx) * (oh * ow);
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = (ch * h + iy as usize) * w;
                    let src = row + oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            x[dst + ix as usize] += col[src + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward cross-correlation. x: [n,ic,h,w], wgt: [oc,ic,kh,kw],
/// out: [n,oc,oh,ow]. `col` is scratch of size ic*kh*kw*oh*ow.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward<E: Element>(
    x: &[E],
    n: usize,
    ic: usize,
    h: usize,
    w: usize,
    wgt: &[E],
    oc: usize,
    kh: usize,
    kw: usize,
    bias: Option<&[E]>,
    stride: usize,
    pad: usize,
    out: &mut [E],
    col: &mut [E],
) {
    let oh = conv_out_extent(h, kh, stride, pad);
    let ow = conv_out_extent(w, kw, stride, pad);
    let ck = ic * kh * kw;
    let spatial = oh * ow;
    for img in 0..n {
        im2col(
            &x[img * ic * h * w..(img + 1) * ic * h * w],
            ic,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            col,
        );
        let dst = &mut out[img * oc * spatial..(img + 1) * oc * spatial];
        for elem in dst.iter_mut() {
            *elem = E::ZERO;
        }
        matmul_acc(wgt, col, dst, oc, ck, spatial);
        if let Some(b) = bias {
            for o in 0..oc {
                let bv = b[o];
                for elem in &mut dst[o * spatial..(o + 1) * spatial] {
                    *elem += bv;
                }
            }
        }
    }
}

/// Backward pass of conv2d. Recomputes im2col per image.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<E: Element>(
    x: &[E],
    n: usize,
    ic: usize,
    h: usize,
    w: usize,
    wgt: &[E],
    oc: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    gout: &[E],
    gx: &mut [E],
    gw: &mut [E],
    gb: Option<&mut [E]>,
    col: &mut [E],
) {
    let oh = conv_out_extent(h, kh, stride, pad);
    let ow = conv_out_extent(w, kw, stride, pad);
    let ck = ic * kh * kw;
    let spatial = oh * ow;
    let mut gcol = vec![E::ZERO; ck * spatial];
    for img in 0..n {
        let go = &gout[img * oc * spatial..(img + 1) * oc * spatial];
        im2col(
            &x[img * ic * h * w..(img + 1) * ic * h * w],
            ic,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            col,
        );
        // gw[oc,ck] += gout[oc,spatial] * col[ck,spatial]^T
        matmul_abt_acc(go, col, gw, oc, spatial, ck);
        // gcol[ck,spatial] = wgt[oc,ck]^T * gout[oc,spatial]
        for elem in gcol.iter_mut() {
            *elem = E::ZERO;
        }
        matmul_atb_acc(wgt, go, &mut gcol, oc, ck, spatial);
        col2im_acc(
            &gcol,
            ic,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            &mut gx[img * ic * h * w..(img + 1) * ic * h * w],
        );
    }
    if let Some(gb) = gb {
        for img in 0..n {
            for o in 0..oc {
                let go = &gout[(img * oc + o) * spatial..(img * oc + o + 1) * spatial];
                let mut acc = E::ZERO;
                for &g in go {
                    acc += g;
                }
                gb[o] += acc;
            }
        }
    }
}

/// Max pooling over square windows; records the flat argmax per output cell.
#[allow(clippy::too_many_arguments)]
pub fn max_pool_forward<E: Element>(
    x: &[E],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    out: &mut [E],
    argmax: &mut [usize],
) {
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let mut idx = 0;
    for img in 0..n {
        for ch in 0..c {
            let plane = (img * c + ch) * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = plane + (oy * stride) * w + ox * stride;
                    let mut best_v = x[best];
                    for ky in 0..k {
                        for kx in 0..k {
                            let p = plane + (oy * stride + ky) * w + (ox * stride + kx);
                            if x[p] > best_v {
                                best_v = x[p];
                                best = p;
                            }
                        }
                    }
                    out[idx] = best_v;
                    argmax[idx] = best;
                    idx += 1;
                }
            }
        }
    }
}

/// Per-channel batch statistics over (n, h, w). Returns (mean, biased var).
pub fn channel_stats<E: Element>(x: &[E], n: usize, c: usize, hw: usize) -> (Vec<E>, Vec<E>) {
    let count = E::from_f64((n * hw) as f64);
    let mut mean = vec![E::ZERO; c];
    let mut var = vec![E::ZERO; c];
    for img in 0..n {
        for ch in 0..c {
            let plane = &x[(img * c + ch) * hw..(img * c + ch + 1) * hw];
            let mut acc = E::ZERO;
            for &v in plane {
                acc += v;
            }
            mean[ch] += acc;
        }
    }
    for m in mean.iter_mut() {
        *m = *m / count;
    }
    for img in 0..n {
        for ch in 0..c {
            let plane = &x[(img * c + ch) * hw..(img * c + ch + 1) * hw];
            let m = mean[ch];
            let mut acc = E::ZERO;
            for &v in plane {
                let d = v - m;
                acc += d * d;
            }
            var[ch] += acc;
        }
    }
    for v in var.iter_mut() {
        *v = *v / count;
    }
    (mean, var)
}

/// Numerically stable per-row softmax of a [rows, cols] matrix.
pub fn softmax_rows<E: Element>(x: &[E], rows: usize, cols: usize) -> Vec<E> {
    let mut out = vec![E::ZERO; rows * cols];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mut max = row[0];
        for &v in row {
            max = max.maximum(v);
        }
        let mut denom = E::ZERO;
        let dst = &mut out[r * cols..(r + 1) * cols];
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - max).exp();
            denom += *d;
        }
        for d in dst.iter_mut() {
            *d = *d / denom;
        }
    }
    out
}

/// Mean over groups of `group_size` consecutive rows.
///
/// Accumulation promotes to f64 and sums each output element's addends in
/// value order, so a permutation of the rows inside one group can never
/// perturb the result. Segmental consensus relies on this.
pub fn group_mean_rows<E: Element>(
    x: &[E],
    groups: usize,
    group_size: usize,
    row_elems: usize,
) -> Vec<E> {
    debug_assert_eq!(x.len(), groups * group_size * row_elems);
    let mut out = vec![E::ZERO; groups * row_elems];
    let mut addends = vec![0f64; group_size];
    for g in 0..groups {
        for j in 0..row_elems {
            for s in 0..group_size {
                addends[s] = x[(g * group_size + s) * row_elems + j].to_f64();
            }
            addends.sort_by(f64::total_cmp);
            let mut acc = 0f64;
            for &a in addends.iter() {
                acc += a;
            }
            out[g * row_elems + j] = E::from_f64(acc / group_size as f64);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        // [1 2; 3 4] * [5 6; 7 8] = [19 22; 43 50]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        matmul_acc(&a, &b, &mut c, 2, 2, 2);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn conv_ones_3x3_sums_to_nine() {
        let x = vec![1.0f64; 9];
        let w = vec![1.0f64; 9];
        let mut out = vec![0.0f64; 1];
        let mut col = vec![0.0f64; 9];
        conv2d_forward(&x, 1, 1, 3, 3, &w, 1, 3, 3, None, 1, 0, &mut out, &mut col);
        assert_eq!(out[0], 9.0);
    }

    #[test]
    fn conv_identity_1x1_kernel() {
        let x: Vec<f64> = (0..12).map(|v| v as f64).collect();
        let w = vec![1.0f64];
        let mut out = vec![0.0f64; 12];
        let mut col = vec![0.0f64; 12];
        conv2d_forward(&x, 1, 1, 3, 4, &w, 1, 1, 1, None, 1, 0, &mut out, &mut col);
        assert_eq!(out, x);
    }

    #[test]
    fn group_mean_is_permutation_invariant() {
        let rows = [
            vec![0.1f32, 2.0e8, -0.1, 3.0e-9],
            vec![2.0e8, 3.0e-9, 0.1, -0.1],
        ];
        // Same multiset of addends per column position after regrouping.
        let a: Vec<f32> = rows[0].iter().flat_map(|&v| [v, 1.0]).collect();
        let b: Vec<f32> = rows[1].iter().flat_map(|&v| [v, 1.0]).collect();
        let ma = group_mean_rows(&a, 1, 4, 2);
        let mb = group_mean_rows(&b, 1, 4, 2);
        assert_eq!(ma, mb);
    }
}
