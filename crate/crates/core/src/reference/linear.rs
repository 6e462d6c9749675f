use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::DenseMatrix;

/// `O = X·W` for `X: B×M`, `W: M×N`, accumulated in `(i, k, j)` order.
pub fn dense_linear_forward<T: Scalar>(x: &DenseMatrix<T>, w: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
    if x.cols() != w.rows() {
        return Err(shape_err(format!("X is {}x{} but W is {}x{}", x.rows(), x.cols(), w.rows(), w.cols())));
    }
    let (b, m, n) = (x.rows(), x.cols(), w.cols());
    let mut o = DenseMatrix::zeros(b, n);
    for i in 0..b {
        for k in 0..m {
            let xv = x.get(i, k);
            for j in 0..n {
                let acc = o.get(i, j) + xv * w.get(k, j);
                o.set(i, j, acc);
            }
        }
    }
    Ok(o)
}

/// `dX = dO·Wᵀ`, `dW = Xᵀ·dO`.
pub fn dense_linear_backward<T: Scalar>(
    x: &DenseMatrix<T>,
    w: &DenseMatrix<T>,
    d_out: &DenseMatrix<T>,
) -> Result<(DenseMatrix<T>, DenseMatrix<T>)> {
    let (b, m, n) = (x.rows(), x.cols(), w.cols());
    if w.rows() != m || d_out.rows() != b || d_out.cols() != n {
        return Err(shape_err(format!(
            "X {}x{}, W {}x{}, dO {}x{}",
            b,
            m,
            w.rows(),
            n,
            d_out.rows(),
            d_out.cols()
        )));
    }
    let mut dx = DenseMatrix::zeros(b, m);
    for i in 0..b {
        for r in 0..m {
            let mut acc = T::zero();
            for c in 0..n {
                acc += d_out.get(i, c) * w.get(r, c);
            }
            dx.set(i, r, acc);
        }
    }
    let mut dw = DenseMatrix::zeros(m, n);
    for r in 0..m {
        for c in 0..n {
            let mut acc = T::zero();
            for i in 0..b {
                acc += x.get(i, r) * d_out.get(i, c);
            }
            dw.set(r, c, acc);
        }
    }
    Ok((dx, dw))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference::finite_difference_grad;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DenseMatrix<f64> {
        DenseMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn identity_weight() {
        let x = DenseMatrix::from_rows(&[&[1.0f32, 2.0]]).unwrap();
        assert_eq!(dense_linear_forward(&x, &DenseMatrix::identity(2)).unwrap(), x);
    }

    #[test]
    fn zero_weight() {
        let x = DenseMatrix::from_rows(&[&[1.0f32, 2.0], &[3.0, 4.0]]).unwrap();
        let o = dense_linear_forward(&x, &DenseMatrix::zeros(2, 3)).unwrap();
        assert_eq!(o, DenseMatrix::zeros(2, 3));
    }

    #[test]
    fn shape_mismatch() {
        let x = DenseMatrix::<f32>::zeros(2, 3);
        assert!(dense_linear_forward(&x, &DenseMatrix::zeros(2, 3)).is_err());
        assert!(dense_linear_backward(&x, &DenseMatrix::zeros(3, 4), &DenseMatrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn forward_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(3, 4, &mut rng);
        let w = random(4, 2, &mut rng);
        let o = dense_linear_forward(&x, &w).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0;
                for k in 0..4 {
                    s += x.get(i, k) * w.get(k, j);
                }
                assert!((o.get(i, j) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_zero_and_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(3, 3, &mut rng);
        let w = random(3, 3, &mut rng);
        let (dx, dw) = dense_linear_backward(&x, &w, &DenseMatrix::zeros(3, 3)).unwrap();
        assert_eq!(dx, DenseMatrix::zeros(3, 3));
        assert_eq!(dw, DenseMatrix::zeros(3, 3));

        let g = random(3, 3, &mut rng);
        let (dx, _) = dense_linear_backward(&x, &DenseMatrix::identity(3), &g).unwrap();
        assert_eq!(dx, g);
        let (_, dw) = dense_linear_backward(&DenseMatrix::identity(3), &w, &g).unwrap();
        assert_eq!(dw, g);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (b, m, n) = (5, 4, 3);
        let x = random(b, m, &mut rng);
        let w = random(m, n, &mut rng);
        let g = random(b, n, &mut rng);
        let (dx, dw) = dense_linear_backward(&x, &w, &g).unwrap();
        let loss = |x: &DenseMatrix<f64>, w: &DenseMatrix<f64>| {
            let o = dense_linear_forward(x, w).unwrap();
            o.data().iter().zip(g.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let fd_x = finite_difference_grad(
            |p| loss(&DenseMatrix::from_vec(b, m, p.to_vec()).unwrap(), &w),
            x.data(),
            1e-3,
        )
        .unwrap();
        let fd_w = finite_difference_grad(
            |p| loss(&x, &DenseMatrix::from_vec(m, n, p.to_vec()).unwrap()),
            w.data(),
            1e-3,
        )
        .unwrap();
        for (a, e) in dx.data().iter().zip(&fd_x).chain(dw.data().iter().zip(&fd_w)) {
            assert!((a - e).abs() <= 1e-3 * e.abs().max(1e-3), "{a} vs {e}");
        }
    }

    #[test]
    fn backward_is_linear_in_upstream_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(6, 5, &mut rng);
        let w = random(5, 4, &mut rng);
        let g1 = random(6, 4, &mut rng);
        let g2 = random(6, 4, &mut rng);
        let (a, b) = (0.7, -1.3);
        let mix = DenseMatrix::from_fn(6, 4, |i, j| a * g1.get(i, j) + b * g2.get(i, j));
        let (dx, dw) = dense_linear_backward(&x, &w, &mix).unwrap();
        let (dx1, dw1) = dense_linear_backward(&x, &w, &g1).unwrap();
        let (dx2, dw2) = dense_linear_backward(&x, &w, &g2).unwrap();
        for (got, (p, q)) in dx.data().iter().zip(dx1.data().iter().zip(dx2.data())) {
            let e = a * p + b * q;
            assert!((got - e).abs() <= 1e-5 * e.abs().max(1.0));
        }
        for (got, (p, q)) in dw.data().iter().zip(dw1.data().iter().zip(dw2.data())) {
            let e = a * p + b * q;
            assert!((got - e).abs() <= 1e-5 * e.abs().max(1.0));
        }
    }
}
