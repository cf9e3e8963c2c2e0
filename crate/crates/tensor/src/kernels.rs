//! Raw f64 compute kernels shared by the graph ops.
//!
//! Everything here is sequential with a fixed accumulation order, so results
//! are bit-identical across runs. Loop shapes are chosen so the inner loop
//! runs over contiguous slices and vectorizes without reassociation.

/// c[m,n] += a[m,k] * b[k,n]
pub fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cj, bj) in crow.iter_mut().zip(brow) {
                *cj += aip * bj;
            }
        }
    }
}

/// c[m,n] += a[m,k] * b[n,k]^T  (dot-product layout, 4 split accumulators)
pub fn matmul_abt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] += dot(arow, brow);
        }
    }
}

/// c[m,n] += a[k,m]^T * b[k,n]
pub fn matmul_atb_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let aip = arow[i];
            if aip == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cj, bj) in crow.iter_mut().zip(brow) {
                *cj += aip * bj;
            }
        }
    }
}

/// Dot product with a fixed 4-way split accumulation order.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for t in 0..chunks {
        let i = t * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Lay out conv patches as a [cin*kh*kw, ho*wo] matrix.
#[allow(clippy::too_many_arguments)]
pub fn im2col(
    x: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    cols: &mut [f64],
) {
    debug_assert_eq!(x.len(), cin * h * w);
    debug_assert_eq!(cols.len(), cin * kh * kw * ho * wo);
    for c in 0..cin {
        let xc = &x[c * h * w..(c + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((c * kh + ki) * kw + kj) * ho * wo;
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    let dst = &mut cols[row + oy * wo..row + (oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let xrow = &xc[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        *d = if ix >= 0 && ix < w as isize {
                            xrow[ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add the inverse of [`im2col`]: cols [cin*kh*kw, ho*wo] back into x [cin,h,w].
#[allow(clippy::too_many_arguments)]
pub fn col2im_acc(
    cols: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    x: &mut [f64],
) {
    debug_assert_eq!(x.len(), cin * h * w);
    debug_assert_eq!(cols.len(), cin * kh * kw * ho * wo);
    for c in 0..cin {
        let xc = &mut x[c * h * w..(c + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((c * kh + ki) * kw + kj) * ho * wo;
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &cols[row + oy * wo..row + (oy + 1) * wo];
                    let xrow = &mut xc[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, s) in src.iter().enumerate() {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            xrow[ix as usize] += s;
                        }
                    }
                }
            }
        }
    }
}

/// True iff every element is finite. NaN/Inf poison the accumulator, so this
/// stays branch-free and vectorizes.
pub fn all_finite(xs: &[f64]) -> bool {
    let mut acc = 0.0f64;
    for &x in xs {
        acc += x * 0.0;
    }
    acc == 0.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_matches_naive() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let mut c = [0.0; 4];
        matmul_acc(&a, &b, &mut c, 2, 3, 2);
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn abt_and_atb_agree_with_explicit_transpose() {
        let a: Vec<f64> = (0..12).map(|i| i as f64 * 0.5 - 2.0).collect(); // 3x4
        let b: Vec<f64> = (0..8).map(|i| (i as f64).sin()).collect(); // 2x4
        // abt: [3,4] x [2,4]^T = [3,2]
        let mut c1 = vec![0.0; 6];
        matmul_abt_acc(&a, &b, &mut c1, 3, 4, 2);
        let mut bt = vec![0.0; 8]; // 4x2
        for i in 0..2 {
            for j in 0..4 {
                bt[j * 2 + i] = b[i * 4 + j];
            }
        }
        let mut c2 = vec![0.0; 6];
        matmul_acc(&a, &bt, &mut c2, 3, 4, 2);
        for (x, y) in c1.iter().zip(&c2) {
            assert!((x - y).abs() < 1e-12);
        }
        // atb: a viewed as [3,4] -> a^T [4,3]; [4,3]^T ... c = a^T b with a [3,4], b [3,2]
        let b2: Vec<f64> = (0..6).map(|i| (i as f64).cos()).collect(); // 3x2
        let mut c3 = vec![0.0; 8]; // 4x2
        matmul_atb_acc(&a, &b2, &mut c3, 4, 3, 2);
        let mut at = vec![0.0; 12]; // 4x3
        for i in 0..3 {
            for j in 0..4 {
                at[j * 3 + i] = a[i * 4 + j];
            }
        }
        let mut c4 = vec![0.0; 8];
        matmul_acc(&at, &b2, &mut c4, 4, 3, 2);
        for (x, y) in c3.iter().zip(&c4) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn im2col_col2im_roundtrip_degenerate() {
        // 1x1 kernel, stride 1, no pad: im2col is the identity layout.
        let x: Vec<f64> = (0..12).map(|i| i as f64).collect(); // 2x2x3
        let mut cols = vec![0.0; 12];
        im2col(&x, 2, 2, 3, 1, 1, 1, 0, 2, 3, &mut cols);
        assert_eq!(x, cols);
        let mut back = vec![0.0; 12];
        col2im_acc(&cols, 2, 2, 3, 1, 1, 1, 0, 2, 3, &mut back);
        assert_eq!(x, back);
    }

    #[test]
    fn finite_check_catches_nan_and_inf() {
        assert!(all_finite(&[0.0, 1.0, -2.5]));
        assert!(!all_finite(&[0.0, f64::NAN]));
        assert!(!all_finite(&[f64::INFINITY, 1.0]));
        assert!(!all_finite(&[1.0, f64::NEG_INFINITY]));
    }
}
