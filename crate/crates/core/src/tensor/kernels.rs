//! Plain loops behind the graph ops. Summation order is fixed so results are
//! reproducible bit for bit.

use super::Real;

const TILE_ROWS: usize = 4;
const TILE_COLS: usize = 8;

/// `c += a · b` with `a: n×k`, `b: k×m`, `c: n×m`.
///
/// Works on 4×8 tiles of `c` held in local accumulators; every element still
/// sums its `k` products in ascending order.
pub fn gemm<T: Real>(a: &[T], b: &[T], c: &mut [T], n: usize, k: usize, m: usize) {
    let full_rows = n - n % TILE_ROWS;
    let full_cols = m - m % TILE_COLS;
    for i0 in (0..full_rows).step_by(TILE_ROWS) {
        for j0 in (0..full_cols).step_by(TILE_COLS) {
            let mut acc = [[T::zero(); TILE_COLS]; TILE_ROWS];
            for (r, row) in acc.iter_mut().enumerate() {
                row.copy_from_slice(&c[(i0 + r) * m + j0..(i0 + r) * m + j0 + TILE_COLS]);
            }
            for p in 0..k {
                let bv: &[T; TILE_COLS] = b[p * m + j0..p * m + j0 + TILE_COLS].try_into().expect("tile");
                for (r, row) in acc.iter_mut().enumerate() {
                    let av = a[(i0 + r) * k + p];
                    for q in 0..TILE_COLS {
                        row[q] = row[q] + av * bv[q];
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                c[(i0 + r) * m + j0..(i0 + r) * m + j0 + TILE_COLS].copy_from_slice(row);
            }
        }
        if full_cols < m {
            gemm_rows(a, b, c, i0..i0 + TILE_ROWS, full_cols..m, k, m);
        }
    }
    gemm_rows(a, b, c, full_rows..n, 0..m, k, m);
}

fn gemm_rows<T: Real>(
    a: &[T],
    b: &[T],
    c: &mut [T],
    rows: std::ops::Range<usize>,
    cols: std::ops::Range<usize>,
    k: usize,
    m: usize,
) {
    for i in rows {
        let c_row = &mut c[i * m + cols.start..i * m + cols.end];
        for p in 0..k {
            let av = a[i * k + p];
            let b_row = &b[p * m + cols.start..p * m + cols.end];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv = *cv + av * bv;
            }
        }
    }
}

/// `c += aᵀ · b` with `a: n×k`, `b: n×m`, `c: k×m`; tiled like [`gemm`],
/// summing over `n` in ascending order.
pub fn gemm_tn<T: Real>(a: &[T], b: &[T], c: &mut [T], n: usize, k: usize, m: usize) {
    let full_rows = k - k % TILE_ROWS;
    let full_cols = m - m % TILE_COLS;
    for p0 in (0..full_rows).step_by(TILE_ROWS) {
        for j0 in (0..full_cols).step_by(TILE_COLS) {
            let mut acc = [[T::zero(); TILE_COLS]; TILE_ROWS];
            for (r, row) in acc.iter_mut().enumerate() {
                row.copy_from_slice(&c[(p0 + r) * m + j0..(p0 + r) * m + j0 + TILE_COLS]);
            }
            for i in 0..n {
                let bv: &[T; TILE_COLS] = b[i * m + j0..i * m + j0 + TILE_COLS].try_into().expect("tile");
                let av = &a[i * k + p0..i * k + p0 + TILE_ROWS];
                for (row, &x) in acc.iter_mut().zip(av) {
                    for q in 0..TILE_COLS {
                        row[q] = row[q] + x * bv[q];
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                c[(p0 + r) * m + j0..(p0 + r) * m + j0 + TILE_COLS].copy_from_slice(row);
            }
        }
        if full_cols < m {
            gemm_tn_rows(a, b, c, p0..p0 + TILE_ROWS, full_cols..m, n, k, m);
        }
    }
    gemm_tn_rows(a, b, c, full_rows..k, 0..m, n, k, m);
}

#[allow(clippy::too_many_arguments)]
fn gemm_tn_rows<T: Real>(
    a: &[T],
    b: &[T],
    c: &mut [T],
    rows: std::ops::Range<usize>,
    cols: std::ops::Range<usize>,
    n: usize,
    k: usize,
    m: usize,
) {
    for p in rows {
        for j in cols.clone() {
            let mut acc = c[p * m + j];
            for i in 0..n {
                acc = acc + a[i * k + p] * b[i * m + j];
            }
            c[p * m + j] = acc;
        }
    }
}

/// `c += a · bᵀ` with `a: n×m`, `b: k×m`, `c: n×k`.
///
/// `b` is transposed once up front so the inner loop runs along `k` and
/// vectorises; `m` is usually a short channel count.
pub fn gemm_nt<T: Real>(a: &[T], b: &[T], c: &mut [T], n: usize, m: usize, k: usize) {
    let mut bt = vec![T::zero(); m * k];
    for p in 0..k {
        for j in 0..m {
            bt[j * k + p] = b[p * m + j];
        }
    }
    gemm(a, &bt, c, n, m, k);
}

/// Geometry of a 3×3, padding-1 convolution over an NHWC input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv3x3Geom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c_in: usize,
    pub stride: usize,
}

impl Conv3x3Geom {
    pub fn out_hw(&self) -> (usize, usize) {
        ((self.h - 1) / self.stride + 1, (self.w - 1) / self.stride + 1)
    }

    pub fn rows(&self) -> usize {
        let (ho, wo) = self.out_hw();
        self.n * ho * wo
    }

    pub fn patch(&self) -> usize {
        9 * self.c_in
    }
}

/// Unfolds 3×3 patches into a `(n·ho·wo) × (9·c_in)` matrix, columns ordered
/// `(ky, kx, c)`. Out-of-image taps are zero.
pub fn im2col<T: Real>(x: &[T], g: Conv3x3Geom) -> Vec<T> {
    let (ho, wo) = g.out_hw();
    let patch = g.patch();
    let mut cols = vec![T::zero(); g.rows() * patch];
    for b in 0..g.n {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((b * ho + oy) * wo + ox) * patch;
                for ky in 0..3 {
                    let iy = (oy * g.stride + ky) as isize - 1;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (ox * g.stride + kx) as isize - 1;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let src = ((b * g.h + iy as usize) * g.w + ix as usize) * g.c_in;
                        let dst = row + (ky * 3 + kx) * g.c_in;
                        cols[dst..dst + g.c_in].copy_from_slice(&x[src..src + g.c_in]);
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input grid.
pub fn col2im<T: Real>(cols: &[T], g: Conv3x3Geom, dx: &mut [T]) {
    let (ho, wo) = g.out_hw();
    let patch = g.patch();
    for b in 0..g.n {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((b * ho + oy) * wo + ox) * patch;
                for ky in 0..3 {
                    let iy = (oy * g.stride + ky) as isize - 1;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (ox * g.stride + kx) as isize - 1;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let dst = ((b * g.h + iy as usize) * g.w + ix as usize) * g.c_in;
                        let src = row + (ky * 3 + kx) * g.c_in;
                        for c in 0..g.c_in {
                            dx[dst + c] = dx[dst + c] + cols[src + c];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_variants_agree_with_naive_products() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 - 2.0).collect(); // 2×3
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5).collect(); // 3×4
        let mut c = vec![0.0; 8];
        gemm(&a, &b, &mut c, 2, 3, 4);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|p| a[i * 3 + p] * b[p * 4 + j]).sum();
                assert_eq!(c[i * 4 + j], want);
            }
        }
        // aᵀ·c where a: 2×3, c: 2×4 → 3×4
        let mut t = vec![0.0; 12];
        gemm_tn(&a, &c, &mut t, 2, 3, 4);
        for p in 0..3 {
            for j in 0..4 {
                let want: f64 = (0..2).map(|i| a[i * 3 + p] * c[i * 4 + j]).sum();
                assert_eq!(t[p * 4 + j], want);
            }
        }
        // c·bᵀ where c: 2×4, b: 3×4 → 2×3
        let mut u = vec![0.0; 6];
        gemm_nt(&c, &b, &mut u, 2, 4, 3);
        for i in 0..2 {
            for p in 0..3 {
                let want: f64 = (0..4).map(|j| c[i * 4 + j] * b[p * 4 + j]).sum();
                assert!((u[i * 3 + p] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn stride_two_output_size_rounds_up() {
        let g = Conv3x3Geom {
            n: 1,
            h: 5,
            w: 4,
            c_in: 1,
            stride: 2,
        };
        assert_eq!(g.out_hw(), (3, 2));
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let g = Conv3x3Geom {
            n: 2,
            h: 5,
            w: 4,
            c_in: 3,
            stride: 2,
        };
        let x: Vec<f64> = (0..2 * 5 * 4 * 3).map(|v| ((v * 37) % 11) as f64 - 5.0).collect();
        let cols = im2col(&x, g);
        let y: Vec<f64> = (0..cols.len()).map(|v| ((v * 13) % 7) as f64 - 3.0).collect();
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut dx = vec![0.0; x.len()];
        col2im(&y, g, &mut dx);
        let rhs: f64 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
        assert_eq!(lhs, rhs);
    }
}
