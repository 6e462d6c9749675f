use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Central differences `(f(p + eps·eᵢ) − f(p − eps·eᵢ)) / (2·eps)` for every
/// coordinate `i`.
pub fn finite_difference_grad<T: Scalar>(
    mut f: impl FnMut(&[T]) -> T,
    params: &[T],
    eps: T,
) -> Result<Vec<T>> {
    if !(eps > T::zero()) {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let two = T::one() + T::one();
    let mut p = params.to_vec();
    let mut grad = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + eps;
        let up = f(&p);
        p[i] = orig - eps;
        let down = f(&p);
        p[i] = orig;
        grad.push((up - down) / (two * eps));
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square() {
        let g = finite_difference_grad(|p: &[f64]| p[0] * p[0], &[3.0], 1e-3).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-5);
    }

    #[test]
    fn constant() {
        let g = finite_difference_grad(|_: &[f32]| 4.0, &[1.0, 2.0, 3.0], 1e-2).unwrap();
        assert_eq!(g, vec![0.0; 3]);
    }

    #[test]
    fn quadratic_form() {
        // f(p) = pᵀ A p, ∇f = (A + Aᵀ) p
        let a = [[2.0, -1.0, 0.5], [0.0, 3.0, 1.0], [4.0, 0.25, -2.0]];
        let f = |p: &[f64]| {
            let mut s = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    s += p[i] * a[i][j] * p[j];
                }
            }
            s
        };
        let p = [0.3, -1.2, 0.7];
        let g = finite_difference_grad(f, &p, 1e-4).unwrap();
        for i in 0..3 {
            let analytic: f64 = (0..3).map(|j| (a[i][j] + a[j][i]) * p[j]).sum();
            assert!((g[i] - analytic).abs() < 1e-6, "{} vs {analytic}", g[i]);
        }
    }

    #[test]
    fn non_positive_eps() {
        assert!(finite_difference_grad(|_: &[f64]| 0.0, &[1.0], 0.0).is_err());
        assert!(finite_difference_grad(|_: &[f64]| 0.0, &[1.0], -1.0).is_err());
    }
}
