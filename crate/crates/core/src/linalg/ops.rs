use super::{Matrix, Real, Rng};
use crate::error::{Error, Result};

/// `C = alpha * op(A) · op(B) + beta * C`, where `op` optionally transposes.
pub fn gemm<T: Real>(
    alpha: T,
    a: &Matrix<T>,
    trans_a: bool,
    b: &Matrix<T>,
    trans_b: bool,
    beta: T,
    c: &mut Matrix<T>,
) -> Result<()> {
    let (m, ka) = if trans_a { (a.cols(), a.rows()) } else { a.shape() };
    let (kb, n) = if trans_b { (b.cols(), b.rows()) } else { b.shape() };
    let op_a = (m, ka);
    let op_b = (kb, n);
    if ka != kb {
        return Err(Error::shape("matmul", op_a, op_b));
    }
    if c.shape() != (m, n) {
        return Err(Error::shape("gemm output", c.shape(), (m, n)));
    }
    let (rsa, csa) = if trans_a {
        (1, a.cols() as isize)
    } else {
        (a.cols() as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, b.cols() as isize)
    } else {
        (b.cols() as isize, 1)
    };
    T::gemm(
        m,
        ka,
        n,
        alpha,
        a.data(),
        rsa,
        csa,
        b.data(),
        rsb,
        csb,
        beta,
        c.data_mut(),
        n as isize,
        1,
    );
    Ok(())
}

/// `a · b`.
pub fn matmul<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols() != b.rows() {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let mut c = Matrix::zeros(a.rows(), b.cols());
    gemm(T::one(), a, false, b, false, T::zero(), &mut c)?;
    Ok(c)
}

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_tn<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.rows() != b.rows() {
        return Err(Error::shape("matmul_tn", (a.cols(), a.rows()), b.shape()));
    }
    let mut c = Matrix::zeros(a.cols(), b.cols());
    gemm(T::one(), a, true, b, false, T::zero(), &mut c)?;
    Ok(c)
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_nt<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols() != b.cols() {
        return Err(Error::shape("matmul_nt", a.shape(), (b.cols(), b.rows())));
    }
    let mut c = Matrix::zeros(a.rows(), b.rows());
    gemm(T::one(), a, false, b, true, T::zero(), &mut c)?;
    Ok(c)
}

/// `x · w + bias` with `bias` a `1 × w.cols()` row.
pub fn linear<T: Real>(x: &Matrix<T>, w: &Matrix<T>, bias: &Matrix<T>) -> Result<Matrix<T>> {
    let mut y = matmul(x, w)?;
    y.add_row_broadcast(bias)?;
    Ok(y)
}

/// Kronecker product: block `(i, j)` of the result is `a[i, j] · b`.
pub fn kron<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    let (p, q) = b.shape();
    let mut out = Matrix::zeros(a.rows() * p, a.cols() * q);
    for i in 0..a.rows() {
        for j in 0..a.cols() {
            let s = a[(i, j)];
            for r in 0..p {
                let dst = &mut out.row_mut(i * p + r)[j * q..(j + 1) * q];
                for (d, &v) in dst.iter_mut().zip(b.row(r)) {
                    *d = s * v;
                }
            }
        }
    }
    out
}

/// Saved activations for [`layer_norm_backward`].
#[derive(Clone, Debug)]
pub struct LayerNormCache<T> {
    pub normalized: Matrix<T>,
    pub inv_std: Vec<T>,
}

/// Row-wise LayerNorm followed by the affine `gamma ⊙ x̂ + beta`.
pub fn layer_norm<T: Real>(x: &Matrix<T>, gamma: &Matrix<T>, beta: &Matrix<T>, eps: T) -> Result<Matrix<T>> {
    layer_norm_forward(x, gamma, beta, eps).map(|(y, _)| y)
}

pub fn layer_norm_forward<T: Real>(
    x: &Matrix<T>,
    gamma: &Matrix<T>,
    beta: &Matrix<T>,
    eps: T,
) -> Result<(Matrix<T>, LayerNormCache<T>)> {
    let d = x.cols();
    for p in [gamma, beta] {
        if p.shape() != (1, d) {
            return Err(Error::shape("layer_norm", x.shape(), p.shape()));
        }
    }
    let inv_d = T::one() / T::of(d as f64);
    let mut normalized = Matrix::zeros(x.rows(), d);
    let mut out = Matrix::zeros(x.rows(), d);
    let mut inv_std = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let row = x.row(i);
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let s = T::one() / (var + eps).sqrt();
        inv_std.push(s);
        let xh = normalized.row_mut(i);
        for (h, &v) in xh.iter_mut().zip(row) {
            *h = (v - mean) * s;
        }
        let xh = normalized.row(i).to_vec();
        for (((o, h), &g), &b) in out.row_mut(i).iter_mut().zip(&xh).zip(gamma.data()).zip(beta.data()) {
            *o = *h * g + b;
        }
    }
    Ok((out, LayerNormCache { normalized, inv_std }))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward<T: Real>(
    dy: &Matrix<T>,
    gamma: &Matrix<T>,
    cache: &LayerNormCache<T>,
) -> (Matrix<T>, Matrix<T>, Matrix<T>) {
    let d = dy.cols();
    let inv_d = T::one() / T::of(d as f64);
    let mut dx = Matrix::zeros(dy.rows(), d);
    let mut dgamma = Matrix::zeros(1, d);
    let dbeta = dy.col_sums();
    let mut dxh = vec![T::zero(); d];
    for i in 0..dy.rows() {
        let g = dy.row(i);
        let xh = cache.normalized.row(i);
        for j in 0..d {
            dgamma.data_mut()[j] += g[j] * xh[j];
            dxh[j] = g[j] * gamma.data()[j];
        }
        let mean_dxh = dxh.iter().copied().sum::<T>() * inv_d;
        let mean_dxh_xh = dxh.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() * inv_d;
        let s = cache.inv_std[i];
        for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
            *o = s * (dxh[j] - mean_dxh - xh[j] * mean_dxh_xh);
        }
    }
    (dx, dgamma, dbeta)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Real>(x: &Matrix<T>) -> Matrix<T> {
    let mut out = x.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

// GELU uses the tanh approximation 0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³))),
// in both the forward pass and its derivative.
const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_A: f64 = 0.044_715;

fn gelu_scalar<T: Real>(x: T) -> T {
    let half = T::of(0.5);
    let inner = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    half * x * (T::one() + inner.tanh())
}

fn gelu_derivative<T: Real>(x: T) -> T {
    let half = T::of(0.5);
    let inner = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    let t = inner.tanh();
    let dinner = T::of(GELU_C) * (T::one() + T::of(3.0 * GELU_A) * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
}

/// Elementwise GELU (tanh approximation).
pub fn gelu<T: Real>(x: &Matrix<T>) -> Matrix<T> {
    x.map(gelu_scalar)
}

/// `dy ⊙ gelu'(x)`.
pub fn gelu_backward<T: Real>(x: &Matrix<T>, dy: &Matrix<T>) -> Matrix<T> {
    let mut out = dy.clone();
    for (o, &v) in out.data_mut().iter_mut().zip(x.data()) {
        *o *= gelu_derivative(v);
    }
    out
}

/// `rows × cols` matrix of `normal(0, std²)` samples; advances `rng`.
pub fn randn<T: Real>(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Matrix<T> {
    let mut m = Matrix::zeros(rows, cols);
    for v in m.data_mut() {
        *v = T::of(rng.normal() * std);
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix<f64> {
        Matrix::from_rows(rows).unwrap()
    }

    /// Triple-loop product, independent of the gemm path.
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
    fn matmul_identity() {
        let mut rng = Rng::new(3);
        let x = randn::<f64>(3, 5, 1.0, &mut rng);
        let y = matmul(&Matrix::identity(3), &x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn matmul_hand_expansion() {
        let y = matmul(&m(&[&[1.0, 2.0], &[3.0, 4.0]]), &m(&[&[1.0], &[1.0]])).unwrap();
        assert_eq!(y, m(&[&[3.0], &[7.0]]));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Matrix::<f64>::zeros(2, 3);
        let err = matmul(&a, &a).unwrap_err().to_string();
        assert!(err.contains("(2, 3)"), "{err}");
    }

    #[test]
    fn transposed_products_match_naive() {
        let mut rng = Rng::new(9);
        let a = randn::<f64>(4, 6, 1.0, &mut rng);
        let b = randn::<f64>(4, 3, 1.0, &mut rng);
        let c = randn::<f64>(5, 6, 1.0, &mut rng);
        let tn = matmul_tn(&a, &b).unwrap();
        assert!(tn.max_abs_diff(&naive_matmul(&a.transpose(), &b)) < 1e-12);
        let nt = matmul_nt(&a, &c).unwrap();
        assert!(nt.max_abs_diff(&naive_matmul(&a, &c.transpose())) < 1e-12);
    }

    #[test]
    fn kron_identity_left_gives_block_diagonal() {
        let b = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let k = kron(&Matrix::identity(2), &b);
        let expected = m(&[
            &[1.0, 2.0, 0.0, 0.0],
            &[3.0, 4.0, 0.0, 0.0],
            &[0.0, 0.0, 1.0, 2.0],
            &[0.0, 0.0, 3.0, 4.0],
        ]);
        assert_eq!(k, expected);
    }

    #[test]
    fn kron_worked_example() {
        // Elementwise: out[i*p + r][j*q + s] = a[i][j] * b[r][s].
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = m(&[&[0.0, 5.0], &[6.0, 7.0]]);
        let mut oracle = Matrix::zeros(4, 4);
        for i in 0..2 {
            for j in 0..2 {
                for r in 0..2 {
                    for s in 0..2 {
                        oracle[(i * 2 + r, j * 2 + s)] = a[(i, j)] * b[(r, s)];
                    }
                }
            }
        }
        let expected = m(&[
            &[0.0, 5.0, 0.0, 10.0],
            &[6.0, 7.0, 12.0, 14.0],
            &[0.0, 15.0, 0.0, 20.0],
            &[18.0, 21.0, 24.0, 28.0],
        ]);
        assert_eq!(oracle, expected);
        assert_eq!(kron(&a, &b), expected);
    }

    #[test]
    fn kron_of_identities_is_identity() {
        assert_eq!(
            kron(&Matrix::<f64>::identity(3), &Matrix::identity(4)),
            Matrix::identity(12)
        );
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let x = Matrix::filled(1, 4, 3.0);
        let y = layer_norm(&x, &Matrix::filled(1, 4, 1.0), &Matrix::zeros(1, 4), 1e-6).unwrap();
        assert_eq!(y, Matrix::zeros(1, 4));
    }

    #[test]
    fn layer_norm_centers_rows() {
        let mut rng = Rng::new(1);
        let x = randn::<f64>(5, 8, 3.0, &mut rng);
        let (_, cache) = layer_norm_forward(&x, &Matrix::filled(1, 8, 1.0), &Matrix::zeros(1, 8), 1e-6).unwrap();
        for i in 0..5 {
            let mean: f64 = cache.normalized.row(i).iter().sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_zero_gamma_gives_beta() {
        let mut rng = Rng::new(2);
        let x = randn::<f64>(3, 4, 1.0, &mut rng);
        let y = layer_norm(&x, &Matrix::zeros(1, 4), &Matrix::filled(1, 4, 0.25), 1e-6).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn layer_norm_rejects_bad_gamma() {
        let x = Matrix::<f64>::zeros(2, 4);
        assert!(layer_norm(&x, &Matrix::zeros(1, 3), &Matrix::zeros(1, 4), 1e-6).is_err());
    }

    #[test]
    fn softmax_equal_values_uniform() {
        let y = softmax_rows(&Matrix::<f64>::filled(1, 5, 2.5));
        assert!(y.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn softmax_large_logits_are_stable() {
        let y = softmax_rows(&m(&[&[1000.0, 0.0]]));
        assert!(y.all_finite());
        assert!((y[(0, 0)] - 1.0).abs() < 1e-12 && y[(0, 1)] < 1e-300);
    }

    #[test]
    fn softmax_shift_invariant() {
        let mut rng = Rng::new(4);
        let x = randn::<f64>(3, 6, 2.0, &mut rng);
        let shifted = x.map(|v| v + 17.0);
        assert!(softmax_rows(&x).max_abs_diff(&softmax_rows(&shifted)) < 1e-12);
    }

    #[test]
    fn gelu_fixed_points_and_asymptotes() {
        let y = gelu(&m(&[&[0.0, 10.0, -10.0]]));
        assert_eq!(y[(0, 0)], 0.0);
        assert!((y[(0, 1)] - 10.0).abs() < 1e-6);
        assert!(y[(0, 2)].abs() < 1e-6);
    }

    #[test]
    fn gelu_derivative_matches_central_difference() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.2] {
            let h = 1e-6;
            let fd = (gelu_scalar(x + h) - gelu_scalar(x - h)) / (2.0 * h);
            assert!((gelu_derivative(x) - fd).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn layer_norm_backward_matches_central_difference() {
        let mut rng = Rng::new(8);
        let x = randn::<f64>(3, 5, 1.0, &mut rng);
        let gamma = randn::<f64>(1, 5, 1.0, &mut rng);
        let beta = randn::<f64>(1, 5, 1.0, &mut rng);
        let w = randn::<f64>(3, 5, 1.0, &mut rng);
        let loss = |x: &Matrix<f64>| layer_norm(x, &gamma, &beta, 1e-6).unwrap().hadamard(&w).unwrap().sum();
        let (_, cache) = layer_norm_forward(&x, &gamma, &beta, 1e-6).unwrap();
        let (dx, _, _) = layer_norm_backward(&w, &gamma, &cache);
        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * h);
            assert!((dx.data()[i] - fd).abs() < 1e-7);
        }
    }

    #[test]
    fn randn_zero_std_and_determinism() {
        let z = randn::<f64>(4, 4, 0.0, &mut Rng::new(1));
        assert!(z.data().iter().all(|&v| v == 0.0));
        let a = randn::<f64>(3, 3, 1.0, &mut Rng::new(42));
        let b = randn::<f64>(3, 3, 1.0, &mut Rng::new(42));
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn randn_moments() {
        let x = randn::<f64>(1, 100_000, 1.0, &mut Rng::new(2024));
        let n = x.len() as f64;
        let mean = x.sum() / n;
        let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 0.02, "std {}", var.sqrt());
    }
}
