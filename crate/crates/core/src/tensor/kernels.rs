//! Forward kernels shared by the pure tensor API and the computation record.

use super::{Real, Tensor};
use crate::error::{shape_err, Error, Result};

/// Guard added to the standard deviation in layer normalization.
pub const LN_EPS: f64 = 1e-6;

const PAR_THRESHOLD: usize = 1 << 15;

/// `c = op(a) · op(b)` where `c` is `m×n` and the shared dimension is `k`.
///
/// With `trans_a`, `a` is stored `k×m`; with `trans_b`, `b` is stored `n×k`.
/// Rows of `c` are independent, so the parallel path is bit-identical to the
/// serial one.
pub(crate) fn gemm<T: Real>(
    a: &[T],
    b: &[T],
    c: &mut [T],
    (m, k, n): (usize, usize, usize),
    trans_a: bool,
    trans_b: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let row = |i: usize, out: &mut [T]| {
        out.iter_mut().for_each(|v| *v = T::zero());
        match (trans_a, trans_b) {
            (false, false) => {
                for p in 0..k {
                    let aip = a[i * k + p];
                    if aip == T::zero() {
                        continue;
                    }
                    let brow = &b[p * n..(p + 1) * n];
                    for (o, &bv) in out.iter_mut().zip(brow) {
                        *o = *o + aip * bv;
                    }
                }
            }
            (false, true) => {
                let arow = &a[i * k..(i + 1) * k];
                for (j, o) in out.iter_mut().enumerate() {
                    let brow = &b[j * k..(j + 1) * k];
                    *o = arow.iter().zip(brow).fold(T::zero(), |s, (&x, &y)| s + x * y);
                }
            }
            (true, false) => {
                for p in 0..k {
                    let api = a[p * m + i];
                    if api == T::zero() {
                        continue;
                    }
                    let brow = &b[p * n..(p + 1) * n];
                    for (o, &bv) in out.iter_mut().zip(brow) {
                        *o = *o + api * bv;
                    }
                }
            }
            (true, true) => {
                for (j, o) in out.iter_mut().enumerate() {
                    let mut s = T::zero();
                    for p in 0..k {
                        s = s + a[p * m + i] * b[j * k + p];
                    }
                    *o = s;
                }
            }
        }
    };
    #[cfg(feature = "parallel")]
    {
        if m * n * k >= PAR_THRESHOLD && m > 1 {
            use rayon::prelude::*;
            c.par_chunks_mut(n).enumerate().for_each(|(i, out)| row(i, out));
            return;
        }
    }
    let _ = PAR_THRESHOLD;
    for (i, out) in c.chunks_mut(n).enumerate() {
        row(i, out);
    }
}

/// Matrix product over the last two axes.
///
/// `a` is `[..., m, k]`. `b` is either `[k, n]` (shared across every leading
/// index of `a`) or `[..., k, n]` with the same leading dimensions as `a`.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() < 2 || sb.len() < 2 {
        return Err(shape_err("matmul", sa, sb));
    }
    let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
    let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
    if k != kb {
        return Err(shape_err("matmul", sa, sb));
    }
    let lead = &sa[..sa.len() - 2];
    let mut shape = lead.to_vec();
    shape.extend([m, n]);
    if sb.len() == 2 {
        let rows = a.numel() / k;
        let mut out = vec![T::zero(); rows * n];
        gemm(a.data(), b.data(), &mut out, (rows, k, n), false, false);
        return Ok(Tensor::from_parts(shape, out));
    }
    if &sb[..sb.len() - 2] != lead {
        return Err(shape_err("matmul", sa, sb));
    }
    let batches: usize = lead.iter().product();
    let mut out = vec![T::zero(); batches * m * n];
    for bi in 0..batches {
        gemm(
            &a.data()[bi * m * k..(bi + 1) * m * k],
            &b.data()[bi * k * n..(bi + 1) * k * n],
            &mut out[bi * m * n..(bi + 1) * m * n],
            (m, k, n),
            false,
            false,
        );
    }
    Ok(Tensor::from_parts(shape, out))
}

/// Stable softmax of one contiguous row, written into `out`.
pub(crate) fn softmax_row<T: Real>(x: &[T], out: &mut [T]) {
    let max = x.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut sum = T::zero();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum = sum + *o;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

/// Stable log-softmax of one contiguous row.
pub(crate) fn log_softmax_row<T: Real>(x: &[T], out: &mut [T]) {
    let max = x.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let lse = x.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v - lse;
    }
}

/// Softmax along `axis` with max subtraction.
pub fn softmax<T: Real>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(Error::Contract(format!(
            "softmax axis {axis} invalid for shape {shape:?}"
        )));
    }
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = vec![T::zero(); x.numel()];
    let mut line = vec![T::zero(); len];
    let mut res = vec![T::zero(); len];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            for (j, v) in line.iter_mut().enumerate() {
                *v = x.data()[at(j)];
            }
            softmax_row(&line, &mut res);
            for (j, &v) in res.iter().enumerate() {
                out[at(j)] = v;
            }
        }
    }
    Ok(Tensor::from_parts(shape.to_vec(), out))
}

pub(crate) fn gelu_scalar<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    half * x * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

/// d/dx of the exact GELU: Φ(x) + x·φ(x).
pub(crate) fn gelu_grad_scalar<T: Real>(x: T) -> T {
    let cdf = T::lit(0.5) * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * T::lit(0.5)).exp() * T::lit(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

/// Elementwise GELU, erf form.
pub fn gelu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(gelu_scalar)
}

/// Per-row statistics of layer normalization: (mean, population std).
pub(crate) fn row_stats<T: Real>(row: &[T]) -> (T, T) {
    let n = T::from_usize(row.len()).unwrap();
    let mean = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    (mean, var.sqrt())
}

/// `(x − μ)/(δ + ε) ∘ γ + β` over the last axis, μ and δ per position.
pub fn layer_norm<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let d = *x.shape().last().ok_or_else(|| shape_err("layer_norm", x.shape(), gamma.shape()))?;
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(shape_err("layer_norm", x.shape(), gamma.shape()));
    }
    let mut out = vec![T::zero(); x.numel()];
    for (xr, or) in x.data().chunks(d).zip(out.chunks_mut(d)) {
        let (mean, std) = row_stats(xr);
        let denom = std + eps;
        for j in 0..d {
            or[j] = (xr[j] - mean) / denom * gamma.data()[j] + beta.data()[j];
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn matmul_identity() {
        let i = t(&[2, 2], &[1., 0., 0., 1.]);
        let b = t(&[2, 2], &[3., 4., 5., 6.]);
        assert_eq!(matmul(&i, &b).unwrap(), b);
    }

    #[test]
    fn matmul_one_by_one() {
        let a = t(&[1, 2], &[1., 2.]);
        let b = t(&[2, 1], &[3., 4.]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = random(&[4, 5], 1);
        let b = random(&[5, 3], 2);
        let c = matmul(&a, &b).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                let mut s = 0.0;
                for p in 0..5 {
                    s += a.data()[i * 5 + p] * b.data()[p * 3 + j];
                }
                assert_abs_diff_eq!(c.data()[i * 3 + j], s, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn matmul_batched_and_transposed_gemm() {
        let a = random(&[2, 3, 4], 3);
        let b = random(&[2, 4, 5], 4);
        let c = matmul(&a, &b).unwrap();
        for bi in 0..2 {
            let ab = Tensor::from_parts(vec![3, 4], a.data()[bi * 12..(bi + 1) * 12].to_vec());
            let bb = Tensor::from_parts(vec![4, 5], b.data()[bi * 20..(bi + 1) * 20].to_vec());
            let cb = matmul(&ab, &bb).unwrap();
            assert_eq!(cb.data(), &c.data()[bi * 15..(bi + 1) * 15]);
        }
        // all four transpose variants against the explicit definition
        let (m, k, n) = (3, 4, 5);
        let x = random(&[m, k], 5);
        let y = random(&[k, n], 6);
        let xt: Vec<f64> = (0..k * m).map(|q| x.data()[(q % m) * k + q / m]).collect();
        let yt: Vec<f64> = (0..n * k).map(|q| y.data()[(q % k) * n + q / k]).collect();
        let want = matmul(&x, &y).unwrap();
        for (ta, tb) in [(false, true), (true, false), (true, true)] {
            let mut c = vec![0.0; m * n];
            let a_src = if ta { &xt } else { x.data() };
            let b_src = if tb { &yt } else { y.data() };
            gemm(a_src, b_src, &mut c, (m, k, n), ta, tb);
            for (u, v) in c.iter().zip(want.data()) {
                assert_abs_diff_eq!(u, v, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor::<f32>::zeros(&[2, 3]), &Tensor::zeros(&[4, 2])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let u = softmax(&t(&[3], &[0., 0., 0.]), 0).unwrap();
        for v in u.data() {
            assert_abs_diff_eq!(*v, 1.0 / 3.0, epsilon = 1e-15);
        }
        let s = softmax(&Tensor::<f32>::from_f64(&[3], &[1000., 0., 0.]).unwrap(), 0).unwrap();
        assert!(s.all_finite());
        assert_abs_diff_eq!(s.data()[0], 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(s.data()[1], 0.0, epsilon = 1e-6);
    }

    #[test]
    fn softmax_matches_direct_exp_normalize() {
        let s = softmax(&t(&[3], &[1., 2., 3.]), 0).unwrap();
        let z: f64 = [1f64, 2., 3.].iter().map(|v| v.exp()).sum();
        for (i, v) in s.data().iter().enumerate() {
            assert_abs_diff_eq!(*v, ((i + 1) as f64).exp() / z, epsilon = 1e-12);
        }
    }

    #[test]
    fn softmax_non_last_axis() {
        let x = random(&[3, 4], 9);
        let s = softmax(&x, 0).unwrap();
        for j in 0..4 {
            let col: f64 = (0..3).map(|i| s.data()[i * 4 + j]).sum();
            assert_abs_diff_eq!(col, 1.0, epsilon = 1e-12);
        }
        assert!(softmax(&x, 2).is_err());
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu_scalar(0.0f64), 0.0);
        assert_abs_diff_eq!(gelu_scalar(10.0f64), 10.0, epsilon = 1e-6);
        // 0.5·(1 + erf(1/√2)) evaluated independently with the complementary form
        let want = 0.5 * (2.0 - libm::erfc(std::f64::consts::FRAC_1_SQRT_2));
        assert_abs_diff_eq!(gelu_scalar(1.0f64), want, epsilon = 1e-15);
        assert_abs_diff_eq!(want, 0.841_344_746_068_542_9, epsilon = 1e-14);
    }

    #[test]
    fn gelu_grad_matches_central_difference() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu_scalar(x + h) - gelu_scalar(x - h)) / (2.0 * h);
            assert_abs_diff_eq!(gelu_grad_scalar(x), fd, epsilon = 1e-8);
        }
    }

    #[test]
    fn layer_norm_normalizes() {
        let x = t(&[2, 4], &[1., 2., 3., 4., -5., 0., 5., 10.]);
        let y = layer_norm(&x, &Tensor::ones(&[4]), &Tensor::zeros(&[4]), 1e-6).unwrap();
        for r in y.data().chunks(4) {
            let m: f64 = r.iter().sum::<f64>() / 4.0;
            let v: f64 = r.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 4.0;
            assert_abs_diff_eq!(m, 0.0, epsilon = 1e-12);
            assert_abs_diff_eq!(v, 1.0, epsilon = 1e-5);
        }
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let x = Tensor::<f32>::full(&[1, 6], 3.25);
        let y = layer_norm(&x, &Tensor::ones(&[6]), &Tensor::zeros(&[6]), 1e-6).unwrap();
        assert!(y.data().iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn layer_norm_matches_explicit_oracle() {
        let row = [0.3, -1.2, 2.0, 0.7, 5.5];
        let x = t(&[1, 5], &row);
        let g = t(&[5], &[2., 2., 2., 2., 2.]);
        let b = t(&[5], &[1., 1., 1., 1., 1.]);
        let y = layer_norm(&x, &g, &b, 1e-6).unwrap();
        let mu = row.iter().sum::<f64>() / 5.0;
        let sd = (row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / 5.0).sqrt();
        for (j, v) in y.data().iter().enumerate() {
            assert_abs_diff_eq!(*v, (row[j] - mu) / (sd + 1e-6) * 2.0 + 1.0, epsilon = 1e-10);
        }
    }
}
