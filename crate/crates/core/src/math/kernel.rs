//! Register-blocked dense products.
//!
//! Every output entry starts from zero and accumulates its terms with `k`
//! ascending, one rounded multiply and one rounded add per term, so results
//! are bitwise those of the naive triple loop. Blocking only changes which
//! entries are in flight together. Wider vector units are used when the CPU
//! has them; no fused multiply-add is emitted on any path.

use crate::real::{Precision, Real};

const MR: usize = 4;

/// Left operand with arbitrary strides: entry `(i, k)` is `data[i*rs + k*cs]`.
#[derive(Clone, Copy)]
pub(crate) struct Lhs<'a, T> {
    pub data: &'a [T],
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T: Copy> Lhs<'a, T> {
    /// Row-major `rows × cols`.
    pub fn rows(data: &'a [T], cols: usize) -> Self {
        Lhs { data, rs: cols, cs: 1 }
    }

    /// Transpose of a row-major matrix with `cols` columns.
    pub fn transposed(data: &'a [T], cols: usize) -> Self {
        Lhs { data, rs: 1, cs: cols }
    }

    #[inline(always)]
    fn at(&self, i: usize, k: usize) -> T {
        self.data[i * self.rs + k * self.cs]
    }
}

/// Structural zeros the product may skip.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub(crate) enum Band {
    Dense,
    /// `a[i][k] = 0` for `k > i`.
    LowerLhs,
    /// Only entries `j ≤ i` of the result are wanted; the rest are left zero.
    LowerOut,
}

/// `a · b` with `a` of shape `m × kk` and `b` row-major `kk × n`.
pub(crate) fn product<T: Real>(a: Lhs<'_, T>, b: &[T], m: usize, kk: usize, n: usize, band: Band) -> Vec<T> {
    debug_assert_eq!(b.len(), kk * n);
    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("avx512f") {
            // SAFETY: the feature was detected at run time.
            return unsafe { product_avx512(a, b, m, kk, n, band) };
        }
        if std::is_x86_feature_detected!("avx2") {
            // SAFETY: as above.
            return unsafe { product_avx2(a, b, m, kk, n, band) };
        }
    }
    product_any(a, b, m, kk, n, band)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn product_avx512<T: Real>(a: Lhs<'_, T>, b: &[T], m: usize, kk: usize, n: usize, band: Band) -> Vec<T> {
    product_any(a, b, m, kk, n, band)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn product_avx2<T: Real>(a: Lhs<'_, T>, b: &[T], m: usize, kk: usize, n: usize, band: Band) -> Vec<T> {
    product_any(a, b, m, kk, n, band)
}

#[inline(always)]
fn product_any<T: Real>(a: Lhs<'_, T>, b: &[T], m: usize, kk: usize, n: usize, band: Band) -> Vec<T> {
    match T::PRECISION {
        Precision::Binary32 => blocked::<T, 16>(a, b, m, kk, n, band),
        Precision::Binary64 => blocked::<T, 8>(a, b, m, kk, n, band),
    }
}

#[inline(always)]
fn blocked<T: Real, const NR: usize>(a: Lhs<'_, T>, b: &[T], m: usize, kk: usize, n: usize, band: Band) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    let k_end = |i: usize| match band {
        Band::LowerLhs => (i + 1).min(kk),
        _ => kk,
    };
    let mut i0 = 0;
    while i0 < m {
        let mr = MR.min(m - i0);
        let j_lim = match band {
            Band::LowerOut => (i0 + mr).min(n),
            _ => n,
        };
        let mut j0 = 0;
        while j0 < j_lim {
            let nr = NR.min(n - j0);
            if mr == MR && nr == NR {
                full_tile::<T, NR>(&a, b, &mut c, i0, j0, n, k_end);
            } else {
                edge_tile(&a, b, &mut c, i0, j0, mr, nr, n, k_end);
            }
            j0 += NR;
        }
        i0 += MR;
    }
    c
}

#[inline(always)]
fn full_tile<T: Real, const NR: usize>(
    a: &Lhs<'_, T>,
    b: &[T],
    c: &mut [T],
    i0: usize,
    j0: usize,
    n: usize,
    k_end: impl Fn(usize) -> usize,
) {
    let mut acc = [[T::zero(); NR]; MR];
    let ends: [usize; MR] = std::array::from_fn(|r| k_end(i0 + r));
    let kmax = ends.iter().copied().max().unwrap_or(0);
    for k in 0..kmax {
        let brow: &[T; NR] = b[k * n + j0..k * n + j0 + NR].try_into().expect("tile width");
        for (r, row) in acc.iter_mut().enumerate() {
            if k < ends[r] {
                let ar = a.at(i0 + r, k);
                for (x, &bj) in row.iter_mut().zip(brow) {
                    *x += ar * bj;
                }
            }
        }
    }
    for (r, row) in acc.iter().enumerate() {
        c[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR].copy_from_slice(row);
    }
}

#[allow(clippy::too_many_arguments)]
#[inline(always)]
fn edge_tile<T: Real>(
    a: &Lhs<'_, T>,
    b: &[T],
    c: &mut [T],
    i0: usize,
    j0: usize,
    mr: usize,
    nr: usize,
    n: usize,
    k_end: impl Fn(usize) -> usize,
) {
    for i in i0..i0 + mr {
        let crow = &mut c[i * n + j0..i * n + j0 + nr];
        for k in 0..k_end(i) {
            let aik = a.at(i, k);
            for (x, &bj) in crow.iter_mut().zip(&b[k * n + j0..k * n + j0 + nr]) {
                *x += aik * bj;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::Rng;

    fn naive(a: &[f64], b: &[f64], m: usize, kk: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for k in 0..kk {
                    s += a[i * kk + k] * b[k * n + j];
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    #[test]
    fn blocked_products_are_bitwise_naive() {
        let mut rng = Rng::seed(3);
        for &(m, kk, n) in &[(1, 1, 1), (4, 16, 16), (7, 5, 19), (33, 64, 17), (64, 64, 64)] {
            let a = rng.vector(m * kk, -1.0, 1.0);
            let b = rng.vector(kk * n, -1.0, 1.0);
            let want = naive(&a, &b, m, kk, n);
            assert_eq!(product(Lhs::rows(&a, kk), &b, m, kk, n, Band::Dense), want);
            assert_eq!(product_any(Lhs::rows(&a, kk), &b, m, kk, n, Band::Dense), want);

            let a32: Vec<f32> = a.iter().map(|&x| x as f32).collect();
            let b32: Vec<f32> = b.iter().map(|&x| x as f32).collect();
            let mut want32 = vec![0.0f32; m * n];
            for i in 0..m {
                for j in 0..n {
                    let mut s = 0.0f32;
                    for k in 0..kk {
                        s += a32[i * kk + k] * b32[k * n + j];
                    }
                    want32[i * n + j] = s;
                }
            }
            assert_eq!(product(Lhs::rows(&a32, kk), &b32, m, kk, n, Band::Dense), want32);
        }
    }

    #[test]
    fn bands_match_masked_products() {
        let mut rng = Rng::seed(4);
        let (m, n) = (13, 11);
        let mut l = rng.vector(m * m, -1.0, 1.0);
        for i in 0..m {
            for k in i + 1..m {
                l[i * m + k] = 0.0;
            }
        }
        let b = rng.vector(m * n, -1.0, 1.0);
        let got = product(Lhs::rows(&l, m), &b, m, m, n, Band::LowerLhs);
        for (g, w) in got.iter().zip(naive(&l, &b, m, m, n)) {
            assert_eq!(*g, w);
        }

        let a = rng.vector(m * 6, -1.0, 1.0);
        let b = rng.vector(6 * m, -1.0, 1.0);
        let full = naive(&a, &b, m, 6, m);
        let low = product(Lhs::rows(&a, 6), &b, m, 6, m, Band::LowerOut);
        for i in 0..m {
            for j in 0..=i {
                assert_eq!(low[i * m + j], full[i * m + j]);
            }
        }
    }

    #[test]
    fn transposed_lhs() {
        let mut rng = Rng::seed(5);
        let (m, kk, n) = (9, 6, 21);
        let at = rng.vector(kk * m, -1.0, 1.0);
        let mut a = vec![0.0; m * kk];
        for i in 0..m {
            for k in 0..kk {
                a[i * kk + k] = at[k * m + i];
            }
        }
        let b = rng.vector(kk * n, -1.0, 1.0);
        assert_eq!(product(Lhs::transposed(&at, m), &b, m, kk, n, Band::Dense), naive(&a, &b, m, kk, n));
    }
}
