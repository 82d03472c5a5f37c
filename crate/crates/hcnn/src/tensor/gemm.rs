//! Blocked GEMM and im2col/col2im used by the convolution path.
//!
//! `gemm` accumulates C += A * B over row-major slices, processing four rows
//! of A per pass so each row of B is loaded once per block. Parallelism is
//! over disjoint row blocks of C, so results are bit-deterministic for a
//! fixed input regardless of thread count.

use rayon::prelude::*;

use super::Real;

/// Minimum multiply-add count before gemm bothers spawning parallel tasks.
const PAR_THRESHOLD: usize = 1 << 18;

/// C[m,n] += A[m,k] * B[k,n], all row-major.
pub fn gemm<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    assert_eq!(a.len(), m * k, "gemm: A size");
    assert_eq!(b.len(), k * n, "gemm: B size");
    assert_eq!(c.len(), m * n, "gemm: C size");
    if m * k * n >= PAR_THRESHOLD && m >= 8 {
        // Split into row blocks; each task owns its C rows.
        let rows_per_block = (m / (rayon::current_num_threads() * 4)).max(4);
        c.par_chunks_mut(rows_per_block * n)
            .enumerate()
            .for_each(|(blk, c_blk)| {
                let i0 = blk * rows_per_block;
                let rows = c_blk.len() / n;
                gemm_serial(rows, k, n, &a[i0 * k..(i0 + rows) * k], b, c_blk);
            });
    } else {
        gemm_serial(m, k, n, a, b, c);
    }
}

fn gemm_serial<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    let mut rows = c.chunks_exact_mut(n);
    let mut i = 0;
    while i + 4 <= m {
        let c0 = rows.next().unwrap();
        let c1 = rows.next().unwrap();
        let c2 = rows.next().unwrap();
        let c3 = rows.next().unwrap();
        let a0 = &a[i * k..(i + 1) * k];
        let a1 = &a[(i + 1) * k..(i + 2) * k];
        let a2 = &a[(i + 2) * k..(i + 3) * k];
        let a3 = &a[(i + 3) * k..(i + 4) * k];
        for kk in 0..k {
            let b_row = &b[kk * n..kk * n + n];
            let (v0, v1, v2, v3) = (a0[kk], a1[kk], a2[kk], a3[kk]);
            for j in 0..n {
                let bj = b_row[j];
                c0[j] = c0[j] + v0 * bj;
                c1[j] = c1[j] + v1 * bj;
                c2[j] = c2[j] + v2 * bj;
                c3[j] = c3[j] + v3 * bj;
            }
        }
        i += 4;
    }
    for ci in rows {
        let ai = &a[i * k..(i + 1) * k];
        for kk in 0..k {
            let b_row = &b[kk * n..kk * n + n];
            let v = ai[kk];
            for j in 0..n {
                ci[j] = ci[j] + v * b_row[j];
            }
        }
        i += 1;
    }
}

/// Static geometry of one conv2d call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl Conv2dGeometry {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.padding.0 - self.kh) / self.stride.0 + 1
    }
    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.padding.1 - self.kw) / self.stride.1 + 1
    }
    /// Rows of the im2col matrix: c_in * kh * kw.
    pub fn col_rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }
    /// Columns of the im2col matrix: out_h * out_w.
    pub fn col_cols(&self) -> usize {
        self.out_h() * self.out_w()
    }
    pub fn fits_input(&self) -> bool {
        self.kh <= self.h + 2 * self.padding.0
            && self.kw <= self.w + 2 * self.padding.1
            && self.stride.0 >= 1
            && self.stride.1 >= 1
    }
}

/// Unfolds one sample `x` of shape [c_in, h, w] into `col` of shape
/// [c_in*kh*kw, out_h*out_w], row-major, zero-padded borders.
pub fn im2col_into<T: Real>(x: &[T], g: &Conv2dGeometry, col: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    debug_assert_eq!(x.len(), g.c_in * g.h * g.w);
    debug_assert_eq!(col.len(), g.col_rows() * oh * ow);
    let (sh, sw) = g.stride;
    let (ph, pw) = g.padding;
    let mut row = 0;
    for ci in 0..g.c_in {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for dy in 0..g.kh {
            for dx in 0..g.kw {
                let out_row = &mut col[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * sh + dy) as isize - ph as isize;
                    let dst = &mut out_row[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy as usize >= g.h {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in dst.iter_mut().enumerate() {
                        let ix = (ox * sw + dx) as isize - pw as isize;
                        *v = if ix < 0 || ix as usize >= g.w {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Transpose of [`im2col_into`]: scatter-adds `col` gradients back onto one
/// input sample gradient of shape [c_in, h, w].
pub fn col2im_into<T: Real>(col: &[T], g: &Conv2dGeometry, dx: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    debug_assert_eq!(dx.len(), g.c_in * g.h * g.w);
    debug_assert_eq!(col.len(), g.col_rows() * oh * ow);
    let (sh, sw) = g.stride;
    let (ph, pw) = g.padding;
    let mut row = 0;
    for ci in 0..g.c_in {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for dy in 0..g.kh {
            for dx_k in 0..g.kw {
                let src_row = &col[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * sh + dy) as isize - ph as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..ow {
                        let ix = (ox * sw + dx_k) as isize - pw as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] = dst[ix as usize] + src_row[oy * ow + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                for j in 0..n {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn gemm_matches_triple_loop() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for &(m, k, n) in &[(1, 1, 1), (3, 5, 7), (4, 4, 4), (9, 6, 2), (17, 3, 33)] {
            let a: Vec<f64> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut c = vec![0.0; m * n];
            gemm(m, k, n, &a, &b, &mut c);
            let want = naive_gemm(m, k, n, &a, &b);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12, "gemm mismatch {x} vs {y}");
            }
        }
    }

    #[test]
    fn im2col_then_col2im_roundtrip_counts_uses() {
        // col2im(im2col(ones)) counts how many output windows touch each
        // input pixel; verify against a direct window count.
        let g = Conv2dGeometry {
            batch: 1,
            c_in: 2,
            h: 5,
            w: 4,
            c_out: 1,
            kh: 3,
            kw: 3,
            stride: (2, 1),
            padding: (1, 1),
        };
        let x = vec![1.0f64; g.c_in * g.h * g.w];
        let mut col = vec![0.0; g.col_rows() * g.col_cols()];
        im2col_into(&x, &g, &mut col);
        let mut back = vec![0.0; x.len()];
        col2im_into(&col, &g, &mut back);

        let (oh, ow) = (g.out_h(), g.out_w());
        let mut want = vec![0.0; x.len()];
        for ci in 0..g.c_in {
            for oy in 0..oh {
                for ox in 0..ow {
                    for dy in 0..g.kh {
                        for dx in 0..g.kw {
                            let iy = (oy * g.stride.0 + dy) as isize - g.padding.0 as isize;
                            let ix = (ox * g.stride.1 + dx) as isize - g.padding.1 as isize;
                            if iy >= 0 && (iy as usize) < g.h && ix >= 0 && (ix as usize) < g.w {
                                want[ci * g.h * g.w + iy as usize * g.w + ix as usize] += 1.0;
                            }
                        }
                    }
                }
            }
        }
        assert_eq!(back, want);
    }
}
