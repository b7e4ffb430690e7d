use crate::error::{Error, Result};
use crate::math::Matrix;
use crate::real::{Precision, Real};

/// Guard for L2 normalization of query/key rows.
pub const L2_EPS: f64 = 1e-6;
/// Guard for the per-head output RMSNorm.
pub const RMS_EPS: f64 = 1e-5;

/// Precision in which dot-product accumulators are carried.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Accumulation {
    /// Accumulate in the storage precision of the inputs.
    #[default]
    Input,
    /// Accumulate in binary64 and round once on store.
    Binary64,
}

/// Precision of the triangular solve `(I + T)^{-1}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SolvePrecision {
    /// Forward substitution in binary64 regardless of storage precision.
    #[default]
    StrictBinary64,
    /// Forward substitution in the storage precision.
    Input,
}

/// `a · b` with a fixed accumulation order (k ascending for every entry).
pub fn matmul<T: Real>(a: &Matrix<T>, b: &Matrix<T>, acc: Accumulation) -> Result<Matrix<T>> {
    if a.cols() != b.rows() {
        return Err(Error::dim(
            "matmul",
            format!("{:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    match acc {
        Accumulation::Input => Ok(a.dot(b)),
        Accumulation::Binary64 => {
            let (m, n, inner) = (a.rows(), b.cols(), a.cols());
            let mut out = Matrix::zeros(m, n);
            let mut row = vec![0.0f64; n];
            for i in 0..m {
                row.iter_mut().for_each(|x| *x = 0.0);
                for k in 0..inner {
                    let aik = a[(i, k)].as_f64();
                    for (c, &bkj) in row.iter_mut().zip(b.row(k)) {
                        *c += aik * bkj.as_f64();
                    }
                }
                for (o, &c) in out.row_mut(i).iter_mut().zip(&row) {
                    *o = T::cast(c);
                }
            }
            debug_assert!(out.is_finite());
            Ok(out)
        }
    }
}

/// Solves `(I + T) X = rhs` for strictly lower triangular `T` by sequential
/// row elimination, in binary64.
pub fn forward_substitution_unitriangular<T: Real>(
    t: &Matrix<T>,
    rhs: &Matrix<T>,
) -> Result<Matrix<T>> {
    forward_substitution_with(t, rhs, SolvePrecision::StrictBinary64)
}

/// [`forward_substitution_unitriangular`] with an explicit solve precision.
pub fn forward_substitution_with<T: Real>(
    t: &Matrix<T>,
    rhs: &Matrix<T>,
    precision: SolvePrecision,
) -> Result<Matrix<T>> {
    const OP: &str = "forward_substitution_unitriangular";
    let n = t.rows();
    if t.cols() != n {
        return Err(Error::contract(OP, format!("T is {:?}, not square", t.shape())));
    }
    if rhs.rows() != n {
        return Err(Error::dim(
            OP,
            format!("T is {n}x{n} but rhs has {} rows", rhs.rows()),
        ));
    }
    check_strictly_lower(OP, t)?;
    let m = rhs.cols();
    match precision {
        SolvePrecision::Input => {
            let mut x = rhs.clone();
            for r in 1..n {
                let (done, rest) = x.data_mut().split_at_mut(r * m);
                let xr = &mut rest[..m];
                for s in 0..r {
                    let trs = t[(r, s)];
                    for (a, &b) in xr.iter_mut().zip(&done[s * m..(s + 1) * m]) {
                        *a -= trs * b;
                    }
                }
            }
            Ok(x)
        }
        SolvePrecision::StrictBinary64 => {
            // Compensated elimination: each entry carries the rounding error of
            // its products and sums, so the residual stays at the unit-roundoff
            // level of |X| even when the inverse grows.
            let mut x: Vec<f64> = rhs.data().iter().map(|v| v.as_f64()).collect();
            let mut comp = vec![0.0f64; m];
            for r in 1..n {
                comp.iter_mut().for_each(|c| *c = 0.0);
                let (done, rest) = x.split_at_mut(r * m);
                let xr = &mut rest[..m];
                for s in 0..r {
                    let trs = -t[(r, s)].as_f64();
                    if trs == 0.0 {
                        continue;
                    }
                    for ((a, c), &b) in xr.iter_mut().zip(comp.iter_mut()).zip(&done[s * m..(s + 1) * m]) {
                        let (p, ep) = two_prod(trs, b);
                        let (sum, es) = two_sum(*a, p);
                        *a = sum;
                        *c += ep + es;
                    }
                }
                for (a, &c) in xr.iter_mut().zip(&comp) {
                    *a += c;
                }
            }
            Matrix::from_vec(n, m, x.into_iter().map(T::cast).collect())
        }
    }
}

fn check_strictly_lower<T: Real>(op: &'static str, t: &Matrix<T>) -> Result<()> {
    let n = t.rows();
    if t.cols() != n {
        return Err(Error::contract(op, format!("T is {:?}, not square", t.shape())));
    }
    for i in 0..n {
        for j in i..n {
            if t[(i, j)] != T::zero() {
                return Err(Error::contract(
                    op,
                    format!("T[{i}][{j}] = {} is on or above the diagonal", t[(i, j)]),
                ));
            }
        }
    }
    Ok(())
}

/// `(I + T)^{-1}` for strictly lower triangular `T`.
///
/// Row `r` of the inverse is `e_r − Σ_{s<r} T[r][s]·row_s`, and row `s` vanishes
/// past column `s`, so only the lower triangle is ever touched. Under
/// [`SolvePrecision::StrictBinary64`] the rows are carried in binary64, with the
/// compensated elimination of [`forward_substitution_with`] when the storage is
/// binary64 too.
pub fn unitriangular_inverse<T: Real>(t: &Matrix<T>, precision: SolvePrecision) -> Result<Matrix<T>> {
    check_strictly_lower("unitriangular_inverse", t)?;
    let n = t.rows();
    match (precision, T::PRECISION) {
        (SolvePrecision::Input, _) => {
            let x = lower_inverse_plain(n, |r, s| t[(r, s)], T::one());
            Matrix::from_vec(n, n, x)
        }
        (SolvePrecision::StrictBinary64, Precision::Binary32) => {
            let x = lower_inverse_plain(n, |r, s| t[(r, s)].as_f64(), 1.0f64);
            Matrix::from_vec(n, n, x.into_iter().map(T::cast).collect())
        }
        (SolvePrecision::StrictBinary64, Precision::Binary64) => {
            let mut x = vec![0.0f64; n * n];
            let mut comp = vec![0.0f64; n];
            for r in 0..n {
                x[r * n + r] = 1.0;
                comp.iter_mut().for_each(|c| *c = 0.0);
                let (done, rest) = x.split_at_mut(r * n);
                let xr = &mut rest[..n];
                for s in 0..r {
                    let trs = -t[(r, s)].as_f64();
                    if trs == 0.0 {
                        continue;
                    }
                    let row_s = &done[s * n..s * n + s + 1];
                    for ((a, c), &b) in xr.iter_mut().zip(comp.iter_mut()).zip(row_s) {
                        let (p, ep) = two_prod(trs, b);
                        let (sum, es) = two_sum(*a, p);
                        *a = sum;
                        *c += ep + es;
                    }
                }
                for (a, &c) in xr.iter_mut().zip(&comp).take(r) {
                    *a += c;
                }
            }
            Matrix::from_vec(n, n, x.into_iter().map(T::cast).collect())
        }
    }
}

fn lower_inverse_plain<U: Real>(n: usize, t: impl Fn(usize, usize) -> U, one: U) -> Vec<U> {
    let mut x = vec![U::zero(); n * n];
    for r in 0..n {
        x[r * n + r] = one;
        let (done, rest) = x.split_at_mut(r * n);
        let xr = &mut rest[..n];
        for s in 0..r {
            let trs = t(r, s);
            if trs == U::zero() {
                continue;
            }
            for (a, &b) in xr.iter_mut().zip(&done[s * n..s * n + s + 1]) {
                *a -= trs * b;
            }
        }
    }
    x
}

/// Error-free sum: `a + b = s + e` exactly.
#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

/// Error-free product via Dekker splitting: `a · b = p + e` exactly.
#[inline]
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    const SPLIT: f64 = 134_217_729.0; // 2^27 + 1
    let p = a * b;
    let split = |x: f64| {
        let c = SPLIT * x;
        let hi = c - (c - x);
        (hi, x - hi)
    };
    let (ah, al) = split(a);
    let (bh, bl) = split(b);
    (p, ((ah * bh - p) + ah * bl + al * bh) + al * bl)
}

/// Divides each row by `max(‖row‖₂, eps)`.
pub fn l2_normalize_rows<T: Real>(m: &Matrix<T>, eps: f64) -> Matrix<T> {
    let mut out = m.clone();
    for i in 0..m.rows() {
        let norm = m.row(i).iter().map(|&x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt();
        let denom = T::cast(norm.max(eps));
        out.row_mut(i).iter_mut().for_each(|x| *x = *x / denom);
    }
    out
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[inline]
pub fn silu<T: Real>(x: T) -> T {
    x * sigmoid(x)
}

/// `log(1 + e^x)`; returns `x` itself above 20 where `e^x` would dominate.
#[inline]
pub fn softplus<T: Real>(x: T) -> T {
    if x > T::cast(20.0) {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Mul,
    Add,
    Sub,
    Exp,
    Sigmoid,
    Silu,
    Softplus,
    Reciprocal,
}

impl ElementwiseOp {
    pub fn is_binary(self) -> bool {
        matches!(self, ElementwiseOp::Mul | ElementwiseOp::Add | ElementwiseOp::Sub)
    }
}

/// Pointwise op over a matrix; binary ops need `b` of the same shape.
pub fn elementwise<T: Real>(
    op: ElementwiseOp,
    a: &Matrix<T>,
    b: Option<&Matrix<T>>,
) -> Result<Matrix<T>> {
    let out = if op.is_binary() {
        let b = b.ok_or_else(|| Error::dim("elementwise", format!("{op:?} needs two operands")))?;
        if a.shape() != b.shape() {
            return Err(Error::dim(
                "elementwise",
                format!("{op:?}: {:?} vs {:?}", a.shape(), b.shape()),
            ));
        }
        match op {
            ElementwiseOp::Mul => a.hadamard(b),
            ElementwiseOp::Add => a.add(b),
            ElementwiseOp::Sub => a.sub(b),
            _ => unreachable!(),
        }
    } else {
        match op {
            ElementwiseOp::Exp => a.map(|x| x.exp()),
            ElementwiseOp::Sigmoid => a.map(sigmoid),
            ElementwiseOp::Silu => a.map(silu),
            ElementwiseOp::Softplus => a.map(softplus),
            ElementwiseOp::Reciprocal => a.map(|x| x.recip()),
            _ => unreachable!(),
        }
    };
    debug_assert!(out.is_finite(), "elementwise {op:?} produced a non-finite entry");
    Ok(out)
}

/// `out[r] = Σ_{s ≥ r} m[s]`, row-wise.
pub fn reverse_cumsum_rows<T: Real>(m: &Matrix<T>) -> Matrix<T> {
    let mut out = m.clone();
    for r in (0..m.rows().saturating_sub(1)).rev() {
        let (head, tail) = out.data_mut().split_at_mut((r + 1) * m.cols());
        let cur = &mut head[r * m.cols()..];
        for (a, &b) in cur.iter_mut().zip(&tail[..m.cols()]) {
            *a += b;
        }
    }
    out
}

/// `v / sqrt(mean(v²) + eps) ⊙ weight`.
pub fn rms_norm<T: Real>(v: &[T], weight: &[T], eps: f64) -> Result<Vec<T>> {
    if v.len() != weight.len() {
        return Err(Error::dim(
            "rms_norm",
            format!("vector of {} vs weight of {}", v.len(), weight.len()),
        ));
    }
    let ms = v.iter().map(|&x| x.as_f64() * x.as_f64()).sum::<f64>() / v.len() as f64;
    let inv = T::cast(1.0 / (ms + eps).sqrt());
    Ok(v.iter().zip(weight).map(|(&x, &w)| x * inv * w).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::Rng;

    fn naive_matmul(a: &Matrix<f64>, b: &Matrix<f64>) -> Matrix<f64> {
        let mut c = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a[(i, k)] * b[(k, j)];
                }
                c[(i, j)] = s;
            }
        }
        c
    }

    #[test]
    fn matmul_identity_and_hand_sum() {
        let x = Matrix::from_rows(&[[1.5, -2.0], [0.25, 4.0]]);
        assert_eq!(matmul(&Matrix::identity(2), &x, Accumulation::Input).unwrap(), x);
        let a = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        let b = Matrix::from_rows(&[[1.0], [1.0]]);
        assert_eq!(
            matmul(&a, &b, Accumulation::Input).unwrap(),
            Matrix::from_rows(&[[3.0], [7.0]])
        );
    }

    #[test]
    fn matmul_matches_naive_triple_loop_bitwise() {
        let mut rng = Rng::seed(7);
        let a = rng.matrix(7, 5, -1.0, 1.0);
        let b = rng.matrix(5, 3, -1.0, 1.0);
        let oracle = naive_matmul(&a, &b);
        for acc in [Accumulation::Input, Accumulation::Binary64] {
            let c = matmul(&a, &b, acc).unwrap();
            assert_eq!(c.max_abs_diff(&oracle), 0.0);
        }
    }

    #[test]
    fn matmul_binary64_accumulation_beats_f32() {
        let mut rng = Rng::seed(3);
        let a: Matrix<f32> = rng.matrix(4, 512, -1.0, 1.0).cast();
        let b: Matrix<f32> = rng.matrix(512, 4, -1.0, 1.0).cast();
        let exact = naive_matmul(&a.cast(), &b.cast());
        let wide = matmul(&a, &b, Accumulation::Binary64).unwrap();
        let narrow = matmul(&a, &b, Accumulation::Input).unwrap();
        assert!(wide.cast::<f64>().max_abs_diff(&exact) <= narrow.cast::<f64>().max_abs_diff(&exact));
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Matrix::<f64>::zeros(2, 3);
        assert!(matches!(
            matmul(&a, &a, Accumulation::Input),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn forward_substitution_cases() {
        let x = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        assert_eq!(
            forward_substitution_unitriangular(&Matrix::zeros(2, 2), &x).unwrap(),
            x
        );
        let t = Matrix::from_rows(&[[0.0, 0.0], [0.7, 0.0]]);
        assert_eq!(
            forward_substitution_unitriangular(&t, &Matrix::identity(2)).unwrap(),
            Matrix::from_rows(&[[1.0, 0.0], [-0.7, 1.0]])
        );
    }

    /// `((I + T) X − RHS)[i][j]` accumulated with Neumaier summation over
    /// products split exactly through `mul_add`.
    fn accurate_residual(t: &Matrix<f64>, x: &Matrix<f64>, rhs: &Matrix<f64>) -> Matrix<f64> {
        let mut out = Matrix::zeros(rhs.rows(), rhs.cols());
        for i in 0..rhs.rows() {
            for j in 0..rhs.cols() {
                let mut terms = vec![x[(i, j)], -rhs[(i, j)]];
                for s in 0..i {
                    let p = t[(i, s)] * x[(s, j)];
                    terms.push(p);
                    terms.push(t[(i, s)].mul_add(x[(s, j)], -p));
                }
                let (mut sum, mut comp) = (0.0f64, 0.0f64);
                for v in terms {
                    let s2 = sum + v;
                    comp += if sum.abs() >= v.abs() { (sum - s2) + v } else { (v - s2) + sum };
                    sum = s2;
                }
                out[(i, j)] = sum + comp;
            }
        }
        out
    }

    #[test]
    fn forward_substitution_residual() {
        let mut rng = Rng::seed(11);
        for c in [1usize, 8, 33, 64] {
            for _ in 0..4 {
                let t = rng.matrix(c, c, -1.0, 1.0).tril(-1);
                let rhs = rng.matrix(c, 5, -1.0, 1.0);
                let x = forward_substitution_unitriangular(&t, &rhs).unwrap();
                let resid = accurate_residual(&t, &x, &rhs);
                assert!(resid.max_abs() <= 1e-12, "C={c}: {} (max |X| {})", resid.max_abs(), x.max_abs());
                let plain = forward_substitution_with(&t, &rhs, SolvePrecision::Input).unwrap();
                assert!(plain.max_abs_diff(&x) <= 1e-9 * x.max_abs().max(1.0));
            }
        }
    }

    #[test]
    fn unitriangular_inverse_matches_the_solve() {
        let mut rng = Rng::seed(12);
        for c in [1usize, 2, 17, 64] {
            let t = rng.matrix(c, c, -0.5, 0.5).tril(-1);
            let eye = Matrix::identity(c);
            let solved = forward_substitution_unitriangular(&t, &eye).unwrap();
            let inv = unitriangular_inverse(&t, SolvePrecision::StrictBinary64).unwrap();
            assert!(inv.max_abs_diff(&solved) <= 1e-13 * solved.max_abs(), "C={c}");
            assert_eq!(inv.tril(0), inv);
            let resid = accurate_residual(&t, &inv, &eye);
            assert!(resid.max_abs() <= 1e-12);
            let plain = unitriangular_inverse(&t, SolvePrecision::Input).unwrap();
            assert!(plain.max_abs_diff(&inv) <= 1e-9 * inv.max_abs());

            let t32 = t.cast::<f32>();
            let strict = unitriangular_inverse(&t32, SolvePrecision::StrictBinary64).unwrap();
            let want = unitriangular_inverse(&t32.cast::<f64>(), SolvePrecision::StrictBinary64).unwrap();
            assert!(strict.cast::<f64>().max_abs_diff(&want) <= 1e-6 * want.max_abs());
        }
        assert!(unitriangular_inverse(&Matrix::from_rows(&[[0.0, 1.0], [0.0, 0.0]]), SolvePrecision::Input).is_err());
    }

    #[test]
    fn forward_substitution_rejects_bad_t() {
        let t = Matrix::from_rows(&[[0.0, 1.0], [0.0, 0.0]]);
        assert!(matches!(
            forward_substitution_unitriangular(&t, &Matrix::identity(2)),
            Err(Error::Contract { .. })
        ));
        let diag = Matrix::from_rows(&[[1.0, 0.0], [0.0, 0.0]]);
        assert!(forward_substitution_unitriangular(&diag, &Matrix::identity(2)).is_err());
        let rect = Matrix::<f64>::zeros(2, 3);
        assert!(forward_substitution_unitriangular(&rect, &Matrix::identity(2)).is_err());
    }

    #[test]
    fn l2_normalize_cases() {
        let m: Matrix = Matrix::from_rows(&[[3.0, 4.0], [0.0, 0.0]]);
        let n = l2_normalize_rows(&m, L2_EPS);
        assert!((n[(0, 0)] - 0.6).abs() < 1e-15 && (n[(0, 1)] - 0.8).abs() < 1e-15);
        assert_eq!(n.row(1), &[0.0, 0.0]);

        let mut rng = Rng::seed(5);
        let n = l2_normalize_rows(&rng.matrix(4, 8, -1.0, 1.0), L2_EPS);
        for i in 0..4 {
            let norm: f64 = n.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn activation_values() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!((softplus(0.0f64) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(softplus(50.0f64), 50.0);
        assert!((softplus(20.0f64) - 20.0).abs() < 1e-8);
        let mut rng = Rng::seed(9);
        for _ in 0..1000 {
            let x = rng.uniform(-30.0, 30.0);
            let oracle = x * (1.0 / (1.0 + (-x).exp()));
            assert!((silu(x) - oracle).abs() <= 1e-15 * (1.0 + x.abs()));
            let s = sigmoid(x);
            assert!(s > 0.0 && s < 1.0 || x.abs() > 30.0);
            assert!(softplus(x) >= 0.0);
            let e = (-x.abs()).exp();
            assert!(e > 0.0 && e <= 1.0);
        }
    }

    #[test]
    fn elementwise_dispatch() {
        let a = Matrix::from_rows(&[[0.0, 1.0]]);
        let b = Matrix::from_rows(&[[2.0, 3.0]]);
        assert_eq!(
            elementwise(ElementwiseOp::Mul, &a, Some(&b)).unwrap(),
            Matrix::from_rows(&[[0.0, 3.0]])
        );
        assert_eq!(
            elementwise(ElementwiseOp::Sigmoid, &a, None).unwrap()[(0, 0)],
            0.5
        );
        assert!(elementwise(ElementwiseOp::Add, &a, Some(&Matrix::zeros(2, 1))).is_err());
        assert!(elementwise(ElementwiseOp::Sub, &a, None).is_err());
        assert_eq!(
            elementwise(ElementwiseOp::Reciprocal, &b, None).unwrap()[(0, 0)],
            0.5
        );
    }

    #[test]
    fn reverse_cumsum_cases() {
        let m = Matrix::from_rows(&[[1.0], [2.0], [3.0]]);
        assert_eq!(reverse_cumsum_rows(&m), Matrix::from_rows(&[[6.0], [5.0], [3.0]]));
        let one = Matrix::from_rows(&[[4.0, -1.0]]);
        assert_eq!(reverse_cumsum_rows(&one), one);

        let mut rng = Rng::seed(13);
        let m = rng.matrix(16, 4, -1.0, 1.0);
        let mut oracle = Matrix::zeros(16, 4);
        for j in 0..4 {
            let mut acc = 0.0;
            for r in (0..16).rev() {
                acc += m[(r, j)];
                oracle[(r, j)] = acc;
            }
        }
        assert!(reverse_cumsum_rows(&m).max_abs_diff(&oracle) <= 1e-15);
    }

    #[test]
    fn rms_norm_cases() {
        let ones = vec![1.0; 4];
        assert_eq!(rms_norm(&ones, &ones, 0.0).unwrap(), ones);
        assert_eq!(rms_norm(&[0.0; 4], &ones, RMS_EPS).unwrap(), vec![0.0; 4]);
        assert!(rms_norm(&ones, &[1.0; 3], RMS_EPS).is_err());

        let mut rng = Rng::seed(17);
        let v: Vec<f64> = (0..32).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let out = rms_norm(&v, &ones.repeat(8), 0.0).unwrap();
        let rms = (out.iter().map(|x| x * x).sum::<f64>() / 32.0).sqrt();
        assert!((rms - 1.0).abs() <= 1e-12);
    }
}
