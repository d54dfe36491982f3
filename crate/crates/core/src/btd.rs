//! Symmetric positive-definite block-tridiagonal matrices and their cyclic
//! reduction (CR) factorization.
//!
//! CR eliminates the blocks at positions 0, 2, 4, ... of the current level,
//! which leaves a block-tridiagonal Schur complement on the odd positions.
//! Repeating this gives a permuted block Cholesky factor `L` with `L L^T = J`
//! after roughly `log2(m)` levels. The work inside a level is independent
//! per block, so every level is a parallel map followed by a barrier.
//!
//! Vectors in the "CR order" used by [`CrDecomp::halfsolve`] and
//! [`CrDecomp::backhalfsolve`] are the concatenation of the eliminated blocks
//! of each level, level 0 first.

use nalgebra::{DMatrix, DMatrixView};
use rayon::prelude::*;

use crate::dense;
use crate::error::{mismatch, Error, Result};

/// Below this many blocks per level the work stays on the calling thread.
const PAR_MIN_BLOCKS: usize = 512;

const SYMMETRY_TOL: f64 = 1e-10;

/// A symmetric block-tridiagonal matrix stored as its diagonal blocks and its
/// lower off-diagonal blocks (`offdiag[i]` is block `(i + 1, i)`).
///
/// Blocks are stored column-major, back to back.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockTridiag {
    m: usize,
    l: usize,
    diag: Vec<f64>,
    offdiag: Vec<f64>,
}

impl BlockTridiag {
    /// Builds a matrix from flat column-major block storage.
    pub fn new(block_dim: usize, diag: Vec<f64>, offdiag: Vec<f64>) -> Result<Self> {
        let l2 = block_dim * block_dim;
        if block_dim == 0 || diag.is_empty() || diag.len() % l2 != 0 {
            return Err(mismatch(format!(
                "diagonal storage of length {} is not a positive multiple of {}",
                diag.len(),
                l2
            )));
        }
        let m = diag.len() / l2;
        if offdiag.len() != (m - 1) * l2 {
            return Err(mismatch(format!(
                "expected {} off-diagonal blocks, storage holds {} values",
                m - 1,
                offdiag.len()
            )));
        }
        for (block, a) in diag.chunks_exact(l2).enumerate() {
            let scale = a.iter().fold(1.0f64, |s, v| s.max(v.abs()));
            for i in 0..block_dim {
                for j in 0..i {
                    if (a[i + j * block_dim] - a[j + i * block_dim]).abs() > SYMMETRY_TOL * scale {
                        return Err(Error::NotSymmetric { block });
                    }
                }
            }
        }
        Ok(Self {
            m,
            l: block_dim,
            diag,
            offdiag,
        })
    }

    pub fn from_blocks(diag: &[DMatrix<f64>], offdiag: &[DMatrix<f64>]) -> Result<Self> {
        let l = diag
            .first()
            .map(|b| b.nrows())
            .ok_or_else(|| mismatch("no diagonal blocks"))?;
        let mut d = Vec::with_capacity(diag.len() * l * l);
        let mut o = Vec::with_capacity(offdiag.len() * l * l);
        for b in diag.iter().chain(offdiag) {
            if b.shape() != (l, l) {
                return Err(mismatch(format!("block of shape {:?}, expected ({l}, {l})", b.shape())));
            }
        }
        diag.iter().for_each(|b| d.extend_from_slice(b.as_slice()));
        offdiag.iter().for_each(|b| o.extend_from_slice(b.as_slice()));
        Self::new(l, d, o)
    }

    pub fn identity(m: usize, l: usize) -> Self {
        let eye = DMatrix::<f64>::identity(l, l);
        let mut diag = Vec::with_capacity(m * l * l);
        for _ in 0..m {
            diag.extend_from_slice(eye.as_slice());
        }
        Self {
            m,
            l,
            diag,
            offdiag: vec![0.0; m.saturating_sub(1) * l * l],
        }
    }

    pub fn block_count(&self) -> usize {
        self.m
    }

    pub fn block_dim(&self) -> usize {
        self.l
    }

    pub fn diag_block(&self, i: usize) -> DMatrixView<'_, f64> {
        let l2 = self.l * self.l;
        DMatrixView::from_slice(&self.diag[i * l2..(i + 1) * l2], self.l, self.l)
    }

    pub fn offdiag_block(&self, i: usize) -> DMatrixView<'_, f64> {
        let l2 = self.l * self.l;
        DMatrixView::from_slice(&self.offdiag[i * l2..(i + 1) * l2], self.l, self.l)
    }

    pub(crate) fn diag_raw_mut(&mut self) -> &mut [f64] {
        &mut self.diag
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let (m, l) = (self.m, self.l);
        let mut out = DMatrix::zeros(m * l, m * l);
        for i in 0..m {
            out.view_mut((i * l, i * l), (l, l)).copy_from(&self.diag_block(i));
            if i + 1 < m {
                let o = self.offdiag_block(i);
                out.view_mut(((i + 1) * l, i * l), (l, l)).copy_from(&o);
                out.view_mut((i * l, (i + 1) * l), (l, l)).copy_from(&o.transpose());
            }
        }
        out
    }

    /// `J x`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        let (m, l) = (self.m, self.l);
        check_len(x, m * l)?;
        let l2 = l * l;
        let mut y = vec![0.0; m * l];
        for i in 0..m {
            let yi = &mut y[i * l..(i + 1) * l];
            dense::gemv_acc(1.0, &self.diag[i * l2..(i + 1) * l2], false, &x[i * l..(i + 1) * l], yi, l);
            if i + 1 < m {
                dense::gemv_acc(1.0, &self.offdiag[i * l2..(i + 1) * l2], true, &x[(i + 1) * l..(i + 2) * l], yi, l);
            }
            if i > 0 {
                dense::gemv_acc(1.0, &self.offdiag[(i - 1) * l2..i * l2], false, &x[(i - 1) * l..i * l], yi, l);
            }
        }
        Ok(y)
    }
}

/// One level of the factorization.
///
/// `d` holds the Cholesky factors of the eliminated (even) blocks, `f` and `g`
/// the diagonal and upper off-diagonal blocks of `U = J_oe D^{-T}`:
/// `f[k]` couples odd block `k` with even block `k`, `g[k]` couples odd block
/// `k` with even block `k + 1`.
#[derive(Debug, Clone)]
pub struct Stage {
    size: usize,
    d: Vec<f64>,
    f: Vec<f64>,
    g: Vec<f64>,
}

impl Stage {
    /// Number of blocks in the matrix at this level.
    pub fn size(&self) -> usize {
        self.size
    }

    /// Number of eliminated blocks, `ceil(size / 2)`.
    pub fn eliminated(&self) -> usize {
        self.size.div_ceil(2)
    }

    pub fn d_block(&self, j: usize, l: usize) -> DMatrixView<'_, f64> {
        let l2 = l * l;
        DMatrixView::from_slice(&self.d[j * l2..(j + 1) * l2], l, l)
    }
}

/// Cyclic-reduction factorization of a [`BlockTridiag`].
#[derive(Debug, Clone)]
pub struct CrDecomp {
    l: usize,
    m: usize,
    stages: Vec<Stage>,
}

fn check_len(x: &[f64], want: usize) -> Result<()> {
    if x.len() != want {
        return Err(mismatch(format!("vector of length {}, expected {want}", x.len())));
    }
    Ok(())
}

/// Runs `f(j, chunk)` over the `stride`-sized chunks of `out`, in parallel
/// once there are enough of them. Each call writes only its own chunk.
fn for_blocks<F>(out: &mut [f64], stride: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if stride == 0 {
        return;
    }
    let n = out.len() / stride;
    if n >= PAR_MIN_BLOCKS {
        out.par_chunks_mut(stride)
            .with_min_len(PAR_MIN_BLOCKS / 4)
            .enumerate()
            .for_each(|(j, c)| f(j, c));
    } else {
        out.chunks_mut(stride).enumerate().for_each(|(j, c)| f(j, c));
    }
}

/// Factors the even blocks; returns the lowest failing block on error.
fn cholesky_blocks(diag: &[f64], out: &mut [f64], l: usize) -> std::result::Result<(), usize> {
    let l2 = l * l;
    let n = out.len() / l2;
    let work = |j: usize, c: &mut [f64]| -> Option<usize> {
        c.copy_from_slice(&diag[2 * j * l2..(2 * j + 1) * l2]);
        dense::cholesky(c, l).err().map(|_| 2 * j)
    };
    let failed = if n >= PAR_MIN_BLOCKS {
        out.par_chunks_mut(l2)
            .with_min_len(PAR_MIN_BLOCKS / 4)
            .enumerate()
            .filter_map(|(j, c)| work(j, c))
            .min()
    } else {
        out.chunks_mut(l2).enumerate().filter_map(|(j, c)| work(j, c)).min()
    };
    match failed {
        Some(b) => Err(b),
        None => Ok(()),
    }
}

/// Eliminates the even blocks of a level. Returns the stage and the reduced
/// matrix on the odd blocks (`None` at the terminal level).
fn reduce_level(
    l: usize,
    size: usize,
    diag: &[f64],
    off: &[f64],
    level: usize,
) -> Result<(Stage, Option<(Vec<f64>, Vec<f64>)>)> {
    let l2 = l * l;
    let ne = size.div_ceil(2);
    let no = size / 2;
    let mut d = vec![0.0; ne * l2];
    cholesky_blocks(diag, &mut d, l).map_err(|block| Error::NotPositiveDefinite { stage: level, block })?;
    if size == 1 {
        let stage = Stage {
            size,
            d,
            f: Vec::new(),
            g: Vec::new(),
        };
        return Ok((stage, None));
    }

    let ng = ne - 1;
    let mut f = vec![0.0; no * l2];
    let mut g = vec![0.0; ng * l2];
    for_blocks(&mut f, l2, |k, c| {
        c.copy_from_slice(&off[2 * k * l2..(2 * k + 1) * l2]);
        dense::right_solve_lower_t(&d[k * l2..(k + 1) * l2], c, l);
    });
    for_blocks(&mut g, l2, |k, c| {
        dense::transpose_into(&off[(2 * k + 1) * l2..(2 * k + 2) * l2], c, l);
        dense::right_solve_lower_t(&d[(k + 1) * l2..(k + 2) * l2], c, l);
    });

    let mut new_diag = vec![0.0; no * l2];
    let mut new_off = vec![0.0; no.saturating_sub(1) * l2];
    for_blocks(&mut new_diag, l2, |k, c| {
        c.copy_from_slice(&diag[(2 * k + 1) * l2..(2 * k + 2) * l2]);
        let fk = &f[k * l2..(k + 1) * l2];
        dense::gemm_acc(-1.0, fk, false, fk, true, c, l);
        if k < ng {
            let gk = &g[k * l2..(k + 1) * l2];
            dense::gemm_acc(-1.0, gk, false, gk, true, c, l);
        }
    });
    for_blocks(&mut new_off, l2, |k, c| {
        c.iter_mut().for_each(|v| *v = 0.0);
        dense::gemm_acc(-1.0, &f[(k + 1) * l2..(k + 2) * l2], false, &g[k * l2..(k + 1) * l2], true, c, l);
    });

    Ok((Stage { size, d, f, g }, Some((new_diag, new_off))))
}

/// Half-solve step on one level: writes `D^{-1} P b` into `y` and returns the
/// right-hand side `Q b - U y` for the next level.
fn halfsolve_level(stage: &Stage, l: usize, b: &[f64], y: &mut [f64]) -> Vec<f64> {
    let l2 = l * l;
    let ne = stage.eliminated();
    let no = stage.size / 2;
    for_blocks(y, l, |j, c| {
        c.copy_from_slice(&b[2 * j * l..(2 * j + 1) * l]);
        dense::solve_lower(&stage.d[j * l2..(j + 1) * l2], c, l);
    });
    let mut next = vec![0.0; no * l];
    for_blocks(&mut next, l, |k, c| {
        c.copy_from_slice(&b[(2 * k + 1) * l..(2 * k + 2) * l]);
        dense::gemv_acc(-1.0, &stage.f[k * l2..(k + 1) * l2], false, &y[k * l..(k + 1) * l], c, l);
        if k + 1 < ne {
            dense::gemv_acc(-1.0, &stage.g[k * l2..(k + 1) * l2], false, &y[(k + 1) * l..(k + 2) * l], c, l);
        }
    });
    next
}

fn sum_log_diag(d: &[f64], l: usize) -> f64 {
    d.chunks_exact(l * l)
        .map(|c| (0..l).map(|i| c[i + i * l].ln()).sum::<f64>())
        .sum()
}

impl CrDecomp {
    pub fn block_dim(&self) -> usize {
        self.l
    }

    pub fn block_count(&self) -> usize {
        self.m
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    fn dim(&self) -> usize {
        self.m * self.l
    }

    /// `L^{-1} b`, returned in CR order.
    pub fn halfsolve(&self, b: &[f64]) -> Result<Vec<f64>> {
        check_len(b, self.dim())?;
        let l = self.l;
        let mut out = vec![0.0; self.dim()];
        let mut cur = b.to_vec();
        let mut offset = 0;
        for stage in &self.stages {
            let len = stage.eliminated() * l;
            cur = halfsolve_level(stage, l, &cur, &mut out[offset..offset + len]);
            offset += len;
        }
        Ok(out)
    }

    /// `L^{-T} y` for `y` in CR order, returned in the original order.
    pub fn backhalfsolve(&self, y: &[f64]) -> Result<Vec<f64>> {
        check_len(y, self.dim())?;
        let (l, l2) = (self.l, self.l * self.l);
        let offsets = self.stage_offsets();
        let mut x: Vec<f64> = Vec::new();
        for (stage, &offset) in self.stages.iter().zip(&offsets).rev() {
            let ne = stage.eliminated();
            let no = stage.size / 2;
            let ys = &y[offset..offset + ne * l];
            let xo = x;
            let mut xn = vec![0.0; stage.size * l];
            for_blocks(&mut xn, 2 * l, |j, c| {
                // chunk j covers blocks 2j and (if present) 2j+1
                let (even, odd) = c.split_at_mut(l);
                even.copy_from_slice(&ys[j * l..(j + 1) * l]);
                if j < no {
                    dense::gemv_acc(-1.0, &stage.f[j * l2..(j + 1) * l2], true, &xo[j * l..(j + 1) * l], even, l);
                    odd.copy_from_slice(&xo[j * l..(j + 1) * l]);
                }
                if j >= 1 {
                    dense::gemv_acc(
                        -1.0,
                        &stage.g[(j - 1) * l2..j * l2],
                        true,
                        &xo[(j - 1) * l..j * l],
                        even,
                        l,
                    );
                }
                dense::solve_lower_t(&stage.d[j * l2..(j + 1) * l2], even, l);
            });
            x = xn;
        }
        Ok(x)
    }

    fn stage_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.stages.len());
        let mut acc = 0;
        for s in &self.stages {
            offsets.push(acc);
            acc += s.eliminated() * self.l;
        }
        offsets
    }

    /// `J^{-1} b`.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        let y = self.halfsolve(b)?;
        self.backhalfsolve(&y)
    }

    /// `x^T J^{-1} x`, computed as `|L^{-1} x|^2`.
    pub fn mahal(&self, x: &[f64]) -> Result<f64> {
        Ok(self.halfsolve(x)?.iter().map(|v| v * v).sum())
    }

    /// `log det J`.
    pub fn logdet(&self) -> f64 {
        2.0 * self.stages.iter().map(|s| sum_log_diag(&s.d, self.l)).sum::<f64>()
    }

    /// Maps `eps` (original block order) through `L^{-T}` after permuting it
    /// into CR order; standard-normal `eps` gives a draw from `N(0, J^{-1})`.
    pub fn sample_precision(&self, eps: &[f64]) -> Result<Vec<f64>> {
        let permuted = self.to_cr_order(eps)?;
        self.backhalfsolve(&permuted)
    }

    /// Reorders a vector from the original block order into CR order.
    pub fn to_cr_order(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len(x, self.dim())?;
        let l = self.l;
        let mut out = Vec::with_capacity(x.len());
        let mut cur = x.to_vec();
        for stage in &self.stages {
            let no = stage.size / 2;
            for j in 0..stage.eliminated() {
                out.extend_from_slice(&cur[2 * j * l..(2 * j + 1) * l]);
            }
            cur = (0..no).flat_map(|k| cur[(2 * k + 1) * l..(2 * k + 2) * l].to_vec()).collect();
        }
        Ok(out)
    }

    /// `L y` for `y` in CR order; the inverse of [`Self::halfsolve`].
    pub fn lower_mul(&self, y: &[f64]) -> Result<Vec<f64>> {
        check_len(y, self.dim())?;
        let (l, l2) = (self.l, self.l * self.l);
        let offsets = self.stage_offsets();
        let mut sub: Vec<f64> = Vec::new();
        for (stage, &offset) in self.stages.iter().zip(&offsets).rev() {
            let ne = stage.eliminated();
            let no = stage.size / 2;
            let ys = &y[offset..offset + ne * l];
            let mut out = vec![0.0; stage.size * l];
            for_blocks(&mut out, 2 * l, |j, c| {
                let (even, odd) = c.split_at_mut(l);
                dense::gemv_acc(1.0, &stage.d[j * l2..(j + 1) * l2], false, &ys[j * l..(j + 1) * l], even, l);
                if j < no {
                    odd.copy_from_slice(&sub[j * l..(j + 1) * l]);
                    dense::gemv_acc(1.0, &stage.f[j * l2..(j + 1) * l2], false, &ys[j * l..(j + 1) * l], odd, l);
                    if j + 1 < ne {
                        dense::gemv_acc(
                            1.0,
                            &stage.g[j * l2..(j + 1) * l2],
                            false,
                            &ys[(j + 1) * l..(j + 2) * l],
                            odd,
                            l,
                        );
                    }
                }
            });
            sub = out;
        }
        Ok(sub)
    }

    /// `L^T x` for `x` in the original order, returned in CR order.
    pub fn lower_t_mul(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len(x, self.dim())?;
        let (l, l2) = (self.l, self.l * self.l);
        let mut out = Vec::with_capacity(self.dim());
        let mut cur = x.to_vec();
        for stage in &self.stages {
            let ne = stage.eliminated();
            let no = stage.size / 2;
            let mut ys = vec![0.0; ne * l];
            for_blocks(&mut ys, l, |j, c| {
                dense::gemv_acc(1.0, &stage.d[j * l2..(j + 1) * l2], true, &cur[2 * j * l..(2 * j + 1) * l], c, l);
                if j < no {
                    dense::gemv_acc(
                        1.0,
                        &stage.f[j * l2..(j + 1) * l2],
                        true,
                        &cur[(2 * j + 1) * l..(2 * j + 2) * l],
                        c,
                        l,
                    );
                }
                if j >= 1 {
                    dense::gemv_acc(1.0, &stage.g[(j - 1) * l2..j * l2], true, &cur[(2 * j - 1) * l..2 * j * l], c, l);
                }
            });
            out.extend_from_slice(&ys);
            cur = (0..no).flat_map(|k| cur[(2 * k + 1) * l..(2 * k + 2) * l].to_vec()).collect();
        }
        Ok(out)
    }

    /// Diagonal blocks and lower off-diagonal blocks (`(i + 1, i)`) of `J^{-1}`.
    pub fn inverse_blocks(&self) -> (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>) {
        let (l, l2) = (self.l, self.l * self.l);
        let last = self.stages.last().expect("decomposition has at least one stage");
        // terminal level: (D D^T)^{-1} = D^{-T} D^{-1}
        let mut dinv = vec![0.0; l2];
        dense::lower_inverse(&last.d, &mut dinv, l);
        let mut sd = vec![0.0; l2];
        dense::gemm_acc(1.0, &dinv, true, &dinv, false, &mut sd, l);
        let mut so: Vec<f64> = Vec::new();

        for stage in self.stages.iter().rev().skip(1) {
            let ne = stage.eliminated();
            let no = stage.size / 2;
            let mut dinv = vec![0.0; ne * l2];
            for_blocks(&mut dinv, l2, |j, c| dense::lower_inverse(&stage.d[j * l2..(j + 1) * l2], c, l));
            // V = U D^{-1}: vf[j] = F_j D_j^{-1}, vg[j-1] = G_{j-1} D_j^{-1}
            let mut vf = vec![0.0; no * l2];
            for_blocks(&mut vf, l2, |j, c| {
                dense::gemm_acc(1.0, &stage.f[j * l2..(j + 1) * l2], false, &dinv[j * l2..(j + 1) * l2], false, c, l)
            });
            let mut vg = vec![0.0; (ne - 1) * l2];
            for_blocks(&mut vg, l2, |k, c| {
                dense::gemm_acc(
                    1.0,
                    &stage.g[k * l2..(k + 1) * l2],
                    false,
                    &dinv[(k + 1) * l2..(k + 2) * l2],
                    false,
                    c,
                    l,
                )
            });

            let blk = |v: &[f64], i: usize| -> std::ops::Range<usize> {
                debug_assert!(v.len() >= (i + 1) * l2);
                i * l2..(i + 1) * l2
            };
            let mut diag = vec![0.0; stage.size * l2];
            for_blocks(&mut diag, l2, |i, c| {
                if i % 2 == 1 {
                    c.copy_from_slice(&sd[blk(&sd, i / 2)]);
                    return;
                }
                let j = i / 2;
                let mut tmp = vec![0.0; l2];
                let di = &dinv[blk(&dinv, j)];
                dense::gemm_acc(1.0, di, true, di, false, c, l);
                if j < no {
                    let v = &vf[blk(&vf, j)];
                    tmp.iter_mut().for_each(|x| *x = 0.0);
                    dense::gemm_acc(1.0, &sd[blk(&sd, j)], false, v, false, &mut tmp, l);
                    dense::gemm_acc(1.0, v, true, &tmp, false, c, l);
                }
                if j >= 1 {
                    let v = &vg[blk(&vg, j - 1)];
                    tmp.iter_mut().for_each(|x| *x = 0.0);
                    dense::gemm_acc(1.0, &sd[blk(&sd, j - 1)], false, v, false, &mut tmp, l);
                    dense::gemm_acc(1.0, v, true, &tmp, false, c, l);
                    if j < no {
                        // cross terms through the sub-level block (j, j-1): X + X^T
                        tmp.iter_mut().for_each(|x| *x = 0.0);
                        dense::gemm_acc(1.0, &so[blk(&so, j - 1)], false, v, false, &mut tmp, l);
                        let mut cross = vec![0.0; l2];
                        dense::gemm_acc(1.0, &vf[blk(&vf, j)], true, &tmp, false, &mut cross, l);
                        for r in 0..l {
                            for q in 0..l {
                                c[r + q * l] += cross[r + q * l] + cross[q + r * l];
                            }
                        }
                    }
                }
            });

            let mut off = vec![0.0; (stage.size - 1) * l2];
            for_blocks(&mut off, l2, |i, c| {
                if i % 2 == 0 {
                    // block (2k+1, 2k)
                    let k = i / 2;
                    dense::gemm_acc(-1.0, &sd[blk(&sd, k)], false, &vf[blk(&vf, k)], false, c, l);
                    if k >= 1 {
                        dense::gemm_acc(-1.0, &so[blk(&so, k - 1)], false, &vg[blk(&vg, k - 1)], false, c, l);
                    }
                } else {
                    // block (2k+2, 2k+1)
                    let k = i / 2;
                    if k + 1 < no {
                        dense::gemm_acc(-1.0, &vf[blk(&vf, k + 1)], true, &so[blk(&so, k)], false, c, l);
                    }
                    dense::gemm_acc(-1.0, &vg[blk(&vg, k)], true, &sd[blk(&sd, k)], false, c, l);
                }
            });
            sd = diag;
            so = off;
        }

        let to_mats = |v: &[f64]| -> Vec<DMatrix<f64>> {
            v.chunks_exact(l2).map(|c| DMatrix::from_column_slice(l, l, c)).collect()
        };
        (to_mats(&sd), to_mats(&so))
    }
}

/// Factors `J` by cyclic reduction.
pub fn decompose(j: &BlockTridiag) -> Result<CrDecomp> {
    let l = j.l;
    let mut stages = Vec::new();
    let mut size = j.m;
    let mut level = 0;
    let (stage, mut rest) = reduce_level(l, size, &j.diag, &j.offdiag, level)?;
    stages.push(stage);
    while let Some((diag, off)) = rest {
        size /= 2;
        level += 1;
        let (stage, next) = reduce_level(l, size, &diag, &off, level)?;
        stages.push(stage);
        rest = next;
    }
    Ok(CrDecomp { l, m: j.m, stages })
}

/// `(x^T J^{-1} x, log det J)` in one streaming pass: each level is factored,
/// used for its half-solve step and dropped, so the full factorization is
/// never held in memory.
pub fn mahal_and_logdet(j: &BlockTridiag, x: &[f64]) -> Result<(f64, f64)> {
    let l = j.l;
    check_len(x, j.m * l)?;
    let mut size = j.m;
    let mut level = 0;
    let mut mahal = 0.0;
    let mut half_logdet = 0.0;
    let mut rhs = x.to_vec();
    let mut owned: Option<(Vec<f64>, Vec<f64>)> = None;
    loop {
        let (diag, off) = match &owned {
            Some((d, o)) => (d.as_slice(), o.as_slice()),
            None => (j.diag.as_slice(), j.offdiag.as_slice()),
        };
        let (stage, rest) = reduce_level(l, size, diag, off, level)?;
        let mut y = vec![0.0; stage.eliminated() * l];
        rhs = halfsolve_level(&stage, l, &rhs, &mut y);
        mahal += y.iter().map(|v| v * v).sum::<f64>();
        half_logdet += sum_log_diag(&stage.d, l);
        match rest {
            Some(next) => {
                owned = Some(next);
                size /= 2;
                level += 1;
            }
            None => break,
        }
    }
    Ok((mahal, 2.0 * half_logdet))
}
