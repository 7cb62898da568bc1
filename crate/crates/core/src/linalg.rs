//! Small dense linear-algebra kernels: Cholesky factorization, triangular
//! solves/products, and a fused Cholesky forward-mode derivative used for the
//! kernel length-scale gradient. Matrices here are desk-scale (tens to a few
//! hundred rows), so straightforward O(n^3) loops are plenty.

use ndarray::Array2;

/// Lower Cholesky factor of a symmetric positive-definite matrix.
///
/// On failure returns the 1-based index of the leading minor that is not
/// positive definite.
pub fn cholesky(a: &Array2<f64>) -> Result<Array2<f64>, usize> {
    let n = a.nrows();
    debug_assert_eq!(n, a.ncols());
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut diag = a[(j, j)];
        for k in 0..j {
            diag -= l[(j, k)] * l[(j, k)];
        }
        if diag <= 0.0 || !diag.is_finite() {
            return Err(j + 1);
        }
        let d = diag.sqrt();
        l[(j, j)] = d;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    Ok(l)
}

/// Fused Cholesky and its directional derivative: given symmetric `a` and
/// `da = dA/dt`, returns `(L, dL/dt)` by differentiating the factorization
/// recurrences directly.
pub fn cholesky_with_grad(
    a: &Array2<f64>,
    da: &Array2<f64>,
) -> Result<(Array2<f64>, Array2<f64>), usize> {
    let n = a.nrows();
    debug_assert_eq!(n, a.ncols());
    debug_assert_eq!(da.dim(), a.dim());
    let mut l = Array2::<f64>::zeros((n, n));
    let mut dl = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut diag = a[(j, j)];
        let mut ddiag = da[(j, j)];
        for k in 0..j {
            diag -= l[(j, k)] * l[(j, k)];
            ddiag -= 2.0 * l[(j, k)] * dl[(j, k)];
        }
        if diag <= 0.0 || !diag.is_finite() {
            return Err(j + 1);
        }
        let d = diag.sqrt();
        l[(j, j)] = d;
        dl[(j, j)] = ddiag / (2.0 * d);
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            let mut ds = da[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
                ds -= dl[(i, k)] * l[(j, k)] + l[(i, k)] * dl[(j, k)];
            }
            let lij = s / d;
            l[(i, j)] = lij;
            dl[(i, j)] = (ds - lij * dl[(j, j)]) / d;
        }
    }
    Ok((l, dl))
}

/// y = L x for lower-triangular L.
pub fn lower_matvec(l: &Array2<f64>, x: &[f64], y: &mut [f64]) {
    let n = l.nrows();
    debug_assert_eq!(x.len(), n);
    debug_assert_eq!(y.len(), n);
    for i in 0..n {
        let mut s = 0.0;
        for j in 0..=i {
            s += l[(i, j)] * x[j];
        }
        y[i] = s;
    }
}

/// y = L^T x for lower-triangular L.
pub fn lower_t_matvec(l: &Array2<f64>, x: &[f64], y: &mut [f64]) {
    let n = l.nrows();
    debug_assert_eq!(x.len(), n);
    debug_assert_eq!(y.len(), n);
    for i in 0..n {
        let mut s = 0.0;
        for j in i..n {
            s += l[(j, i)] * x[j];
        }
        y[i] = s;
    }
}

/// Solves L x = b in place for lower-triangular L.
pub fn solve_lower(l: &Array2<f64>, b: &mut [f64]) {
    let n = l.nrows();
    debug_assert_eq!(b.len(), n);
    for i in 0..n {
        let mut s = b[i];
        for j in 0..i {
            s -= l[(i, j)] * b[j];
        }
        b[i] = s / l[(i, i)];
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::arr2;
    use proptest::prelude::*;

    #[test]
    fn cholesky_known_factor() {
        let a = arr2(&[[4.0, 2.0, 0.0], [2.0, 5.0, 1.0], [0.0, 1.0, 3.0]]);
        let l = cholesky(&a).unwrap();
        let reconstructed = l.dot(&l.t());
        for i in 0..3 {
            for j in 0..3 {
                assert_relative_eq!(reconstructed[(i, j)], a[(i, j)], epsilon = 1e-12);
            }
        }
        assert_eq!(l[(0, 1)], 0.0);
    }

    #[test]
    fn cholesky_reports_failing_minor() {
        let a = arr2(&[[1.0, 0.9, 0.0], [0.9, 1.0, 0.9], [0.0, 0.9, 1.0]]);
        // leading 2x2 minor is fine; full matrix is indefinite
        assert_eq!(cholesky(&a), Err(3));
        let b = arr2(&[[-1.0, 0.0], [0.0, 1.0]]);
        assert_eq!(cholesky(&b), Err(1));
    }

    #[test]
    fn triangular_ops_round_trip() {
        let a = arr2(&[[4.0, 2.0, 1.0], [2.0, 5.0, 1.5], [1.0, 1.5, 3.0]]);
        let l = cholesky(&a).unwrap();
        let x = vec![0.3, -1.2, 2.5];
        let mut y = vec![0.0; 3];
        lower_matvec(&l, &x, &mut y);
        let mut back = y.clone();
        solve_lower(&l, &mut back);
        for i in 0..3 {
            assert_relative_eq!(back[i], x[i], epsilon = 1e-12);
        }
        let mut yt = vec![0.0; 3];
        lower_t_matvec(&l, &x, &mut yt);
        // L^T x row check
        assert_relative_eq!(yt[2], l[(2, 2)] * x[2], epsilon = 1e-12);
    }

    fn random_spd(seed: u64, n: usize) -> (Array2<f64>, Array2<f64>) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let b = Array2::from_shape_fn((n, n), |_| rng.gen_range(-1.0..1.0));
        let mut a = b.t().dot(&b);
        for i in 0..n {
            a[(i, i)] += n as f64;
        }
        let mut da = Array2::from_shape_fn((n, n), |_| rng.gen_range(-1.0..1.0));
        da = &da + &da.t(); // symmetric direction
        (a, da)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn cholesky_grad_matches_finite_difference(seed in 0u64..1000, n in 2usize..8) {
            let (a, da) = random_spd(seed, n);
            let (l, dl) = cholesky_with_grad(&a, &da).unwrap();
            let h = 1e-6;
            let ap = &a + &(h * &da);
            let am = &a - &(h * &da);
            let lp = cholesky(&ap).unwrap();
            let lm = cholesky(&am).unwrap();
            for i in 0..n {
                for j in 0..=i {
                    let fd = (lp[(i, j)] - lm[(i, j)]) / (2.0 * h);
                    prop_assert!((dl[(i, j)] - fd).abs() < 1e-5 * (1.0 + fd.abs()));
                }
            }
            // factor itself agrees with the plain routine
            let l0 = cholesky(&a).unwrap();
            for i in 0..n {
                for j in 0..=i {
                    prop_assert!((l[(i, j)] - l0[(i, j)]).abs() < 1e-14);
                }
            }
        }
    }
}
