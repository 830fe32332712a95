//! Inner loops for the matrix primitives.
//!
//! Loop orders are chosen so the innermost loop walks contiguous output rows
//! (broadcast-axpy form). That vectorizes without float reassociation, so
//! results stay bit-identical regardless of target CPU features.

use alloc::vec;
use alloc::vec::Vec;

/// `a [m,k] . b [k,n] -> [m,n]`
pub fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// Transpose of `a [rows, cols]` -> `[cols, rows]`.
pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), rows * cols);
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// `a^T . b` where `a [r, m]`, `b [r, n]` -> `[m, n]`; used for weight grads.
pub fn mm_at_b(a: &[f64], b: &[f64], r: usize, m: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), r * m);
    debug_assert_eq!(b.len(), r * n);
    let mut out = vec![0.0; m * n];
    for i in 0..r {
        let b_row = &b[i * n..(i + 1) * n];
        for p in 0..m {
            let aip = a[i * m + p];
            if aip == 0.0 {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// `x [n_rows, in] . w [in, out] + bias [out]` -> `[n_rows, out]`
pub fn affine(x: &[f64], w: &[f64], bias: &[f64], n_rows: usize, d_in: usize, d_out: usize) -> Vec<f64> {
    debug_assert_eq!(x.len(), n_rows * d_in);
    debug_assert_eq!(w.len(), d_in * d_out);
    debug_assert_eq!(bias.len(), d_out);
    let mut out = vec![0.0; n_rows * d_out];
    for i in 0..n_rows {
        let out_row = &mut out[i * d_out..(i + 1) * d_out];
        out_row.copy_from_slice(bias);
        for p in 0..d_in {
            let xip = x[i * d_in + p];
            if xip == 0.0 {
                continue;
            }
            let w_row = &w[p * d_out..(p + 1) * d_out];
            for (o, wv) in out_row.iter_mut().zip(w_row) {
                *o += xip * wv;
            }
        }
    }
    out
}

/// Column sums of `a [r, c]` -> `[c]`; used for bias grads.
pub fn col_sums(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), r * c);
    let mut out = vec![0.0; c];
    for i in 0..r {
        let row = &a[i * c..(i + 1) * c];
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mm_small() {
        // [[1,2],[3,4]] . [[5,6],[7,8]] = [[19,22],[43,50]]
        let c = mm(&[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0, 7.0, 8.0], 2, 2, 2);
        assert_eq!(c, vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn transpose_rect() {
        let t = transpose(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 2, 3);
        assert_eq!(t, vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn at_b_matches_explicit_transpose() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // [3,2]
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // [3,2]
        let via_t = mm(&transpose(&a, 3, 2), &b, 2, 3, 2);
        assert_eq!(mm_at_b(&a, &b, 3, 2, 2), via_t);
    }

    #[test]
    fn affine_adds_bias() {
        let y = affine(&[1.0, 0.0, 0.0, 1.0], &[2.0, 3.0, 4.0, 5.0], &[10.0, 20.0], 2, 2, 2);
        assert_eq!(y, vec![12.0, 23.0, 14.0, 25.0]);
    }
}
