//! Allocation-free kernels on small square blocks.
//!
//! Every block is an `l x l` matrix stored column-major in a slice of length
//! `l * l`, the same layout nalgebra uses, so views can be handed out without
//! copying. Vectors are plain slices of length `l`.

#[inline(always)]
fn at(l: usize, i: usize, j: usize) -> usize {
    i + j * l
}

/// In-place lower Cholesky. The strict upper triangle is zeroed.
/// Returns `Err(())` if a pivot is not strictly positive (or not finite).
pub(crate) fn cholesky(a: &mut [f64], l: usize) -> Result<(), ()> {
    for j in 0..l {
        let mut d = a[at(l, j, j)];
        for k in 0..j {
            let v = a[at(l, j, k)];
            d -= v * v;
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(());
        }
        let d = d.sqrt();
        a[at(l, j, j)] = d;
        for i in (j + 1)..l {
            let mut s = a[at(l, i, j)];
            for k in 0..j {
                s -= a[at(l, i, k)] * a[at(l, j, k)];
            }
            a[at(l, i, j)] = s / d;
        }
        for i in 0..j {
            a[at(l, i, j)] = 0.0;
        }
    }
    Ok(())
}

/// `x <- L^{-1} x` for lower-triangular `L`.
pub(crate) fn solve_lower(lower: &[f64], x: &mut [f64], l: usize) {
    for i in 0..l {
        let mut s = x[i];
        for k in 0..i {
            s -= lower[at(l, i, k)] * x[k];
        }
        x[i] = s / lower[at(l, i, i)];
    }
}

/// `x <- L^{-T} x` for lower-triangular `L`.
pub(crate) fn solve_lower_t(lower: &[f64], x: &mut [f64], l: usize) {
    for i in (0..l).rev() {
        let mut s = x[i];
        for k in (i + 1)..l {
            s -= lower[at(l, k, i)] * x[k];
        }
        x[i] = s / lower[at(l, i, i)];
    }
}

/// `X <- X L^{-T}` for lower-triangular `L` (each row of `X` solved against `L`).
pub(crate) fn right_solve_lower_t(lower: &[f64], x: &mut [f64], l: usize) {
    // Row r of X L^{-T} is (L^{-1} x_r^T)^T.
    for r in 0..l {
        for i in 0..l {
            let mut s = x[at(l, r, i)];
            for k in 0..i {
                s -= lower[at(l, i, k)] * x[at(l, r, k)];
            }
            x[at(l, r, i)] = s / lower[at(l, i, i)];
        }
    }
}

/// `C <- C + alpha * op(A) op(B)`, where `op` optionally transposes.
pub(crate) fn gemm_acc(
    alpha: f64,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    l: usize,
) {
    for j in 0..l {
        for k in 0..l {
            let bkj = if tb { b[at(l, j, k)] } else { b[at(l, k, j)] };
            if bkj == 0.0 {
                continue;
            }
            let s = alpha * bkj;
            if ta {
                for i in 0..l {
                    c[at(l, i, j)] += s * a[at(l, k, i)];
                }
            } else {
                let col = &a[k * l..(k + 1) * l];
                let out = &mut c[j * l..(j + 1) * l];
                for (o, v) in out.iter_mut().zip(col) {
                    *o += s * v;
                }
            }
        }
    }
}

/// `y <- y + alpha * op(A) x`.
pub(crate) fn gemv_acc(alpha: f64, a: &[f64], ta: bool, x: &[f64], y: &mut [f64], l: usize) {
    if ta {
        for (i, yi) in y.iter_mut().enumerate() {
            let col = &a[i * l..(i + 1) * l];
            let s: f64 = col.iter().zip(x).map(|(p, q)| p * q).sum();
            *yi += alpha * s;
        }
    } else {
        for (k, &xk) in x.iter().enumerate() {
            let s = alpha * xk;
            let col = &a[k * l..(k + 1) * l];
            for (yi, v) in y.iter_mut().zip(col) {
                *yi += s * v;
            }
        }
    }
}

pub(crate) fn transpose_into(a: &[f64], out: &mut [f64], l: usize) {
    for j in 0..l {
        for i in 0..l {
            out[at(l, j, i)] = a[at(l, i, j)];
        }
    }
}

/// Inverse of a lower-triangular factor, returned as a full (lower) block.
pub(crate) fn lower_inverse(lower: &[f64], out: &mut [f64], l: usize) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for c in 0..l {
        out[at(l, c, c)] = 1.0;
        solve_lower(lower, &mut out[c * l..(c + 1) * l], l);
    }
}
