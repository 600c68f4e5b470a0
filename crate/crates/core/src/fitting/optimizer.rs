//! Small dense BFGS minimizer with numerical gradients.
//!
//! The throughput model has seven parameters, so a full inverse-Hessian
//! update is cheap. Bounds are handled by the caller through smooth
//! reparameterizations, keeping this routine unconstrained.

/// Stopping controls for [`minimize`].
#[derive(Debug, Clone, Copy)]
pub struct BfgsOptions {
    pub max_iters: usize,
    pub grad_tol: f64,
    pub f_tol: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        BfgsOptions {
            max_iters: 150,
            grad_tol: 1e-10,
            f_tol: 1e-16,
        }
    }
}

/// Minimize `f` starting from `x0`. Returns the best point and value seen.
pub fn minimize<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    x0: &[f64],
    opts: &BfgsOptions,
) -> (Vec<f64>, f64) {
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut fx = f(&x);
    if n == 0 || !fx.is_finite() {
        return (x, fx);
    }
    let mut grad = gradient(&mut f, &x, fx);
    // Inverse Hessian approximation, row-major.
    let mut h = identity(n);
    let mut best = (x.clone(), fx);

    for _ in 0..opts.max_iters {
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm < opts.grad_tol {
            break;
        }
        // d = -H * grad
        let mut dir = vec![0.0; n];
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..n {
                acc += h[i * n + j] * grad[j];
            }
            dir[i] = -acc;
        }
        let slope: f64 = dir.iter().zip(&grad).map(|(d, g)| d * g).sum();
        if slope >= 0.0 {
            // Reset to steepest descent when the model loses positive
            // definiteness.
            h = identity(n);
            for i in 0..n {
                dir[i] = -grad[i];
            }
        }
        let slope: f64 = dir.iter().zip(&grad).map(|(d, g)| d * g).sum();

        // Backtracking Armijo line search.
        let mut step = 1.0;
        let mut x_new = x.clone();
        let mut f_new = f64::INFINITY;
        let mut accepted = false;
        for _ in 0..40 {
            for i in 0..n {
                x_new[i] = x[i] + step * dir[i];
            }
            f_new = f(&x_new);
            if f_new.is_finite() && f_new <= fx + 1e-4 * step * slope {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }

        let grad_new = gradient(&mut f, &x_new, f_new);
        let s: Vec<f64> = (0..n).map(|i| x_new[i] - x[i]).collect();
        let y: Vec<f64> = (0..n).map(|i| grad_new[i] - grad[i]).collect();
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        if sy > 1e-12 {
            bfgs_update(&mut h, &s, &y, sy);
        }

        let f_prev = fx;
        x = x_new;
        fx = f_new;
        grad = grad_new;
        if fx < best.1 {
            best = (x.clone(), fx);
        }
        if (f_prev - fx).abs() <= opts.f_tol * (1.0 + fx.abs()) {
            break;
        }
    }
    best
}

fn identity(n: usize) -> Vec<f64> {
    let mut h = vec![0.0; n * n];
    for i in 0..n {
        h[i * n + i] = 1.0;
    }
    h
}

/// Central-difference gradient; falls back to forward differences where the
/// perturbed evaluation is not finite.
fn gradient<F: FnMut(&[f64]) -> f64>(f: &mut F, x: &[f64], fx: f64) -> Vec<f64> {
    let n = x.len();
    let mut g = vec![0.0; n];
    let mut probe = x.to_vec();
    for i in 0..n {
        let h = 1e-6 * (1.0 + x[i].abs());
        probe[i] = x[i] + h;
        let fp = f(&probe);
        probe[i] = x[i] - h;
        let fm = f(&probe);
        probe[i] = x[i];
        g[i] = if fp.is_finite() && fm.is_finite() {
            (fp - fm) / (2.0 * h)
        } else if fp.is_finite() {
            (fp - fx) / h
        } else if fm.is_finite() {
            (fx - fm) / h
        } else {
            0.0
        };
    }
    g
}

/// Standard inverse-Hessian BFGS update:
/// H <- (I - rho s y^T) H (I - rho y s^T) + rho s s^T.
fn bfgs_update(h: &mut [f64], s: &[f64], y: &[f64], sy: f64) {
    let n = s.len();
    let rho = 1.0 / sy;
    let mut hy = vec![0.0; n];
    for i in 0..n {
        let mut acc = 0.0;
        for j in 0..n {
            acc += h[i * n + j] * y[j];
        }
        hy[i] = acc;
    }
    let yhy: f64 = y.iter().zip(&hy).map(|(a, b)| a * b).sum();
    for i in 0..n {
        for j in 0..n {
            h[i * n + j] += rho * rho * yhy * s[i] * s[j] + rho * s[i] * s[j]
                - rho * (s[i] * hy[j] + hy[i] * s[j]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_quadratic() {
        let (x, fx) = minimize(
            |x| (x[0] - 3.0).powi(2) + 10.0 * (x[1] + 1.5).powi(2),
            &[0.0, 0.0],
            &BfgsOptions::default(),
        );
        assert!(fx < 1e-12);
        assert!((x[0] - 3.0).abs() < 1e-5);
        assert!((x[1] + 1.5).abs() < 1e-5);
    }

    #[test]
    fn minimizes_rosenbrock() {
        let (x, _) = minimize(
            |x| {
                let a = 1.0 - x[0];
                let b = x[1] - x[0] * x[0];
                a * a + 100.0 * b * b
            },
            &[-1.2, 1.0],
            &BfgsOptions {
                max_iters: 500,
                ..Default::default()
            },
        );
        assert!((x[0] - 1.0).abs() < 1e-4, "x = {x:?}");
        assert!((x[1] - 1.0).abs() < 1e-4);
    }
}
