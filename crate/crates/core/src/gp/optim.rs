//! Box-constrained BFGS with backtracking (Armijo) line search.
//!
//! Points outside the box are projected back onto it. The objective may
//! decline to evaluate a point by returning `None`; the line search then
//! treats it as +inf. Accepted steps never increase the objective.

#[derive(Debug, Clone, Copy)]
pub struct BfgsOptions {
    pub max_iter: usize,
    /// Stop when the projected gradient's max-norm falls below this.
    pub grad_tol: f64,
    /// Stop when the relative decrease over one step falls below this.
    pub f_tol: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        BfgsOptions {
            max_iter: 200,
            grad_tol: 1e-6,
            f_tol: 1e-11,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    /// Objective at the starting point.
    pub f0: f64,
    pub iterations: usize,
    pub evaluations: usize,
}

const ARMIJO_C: f64 = 1e-4;
const MAX_BACKTRACK: usize = 40;

fn project(x: &mut [f64], lower: &[f64], upper: &[f64]) {
    for ((v, &lo), &hi) in x.iter_mut().zip(lower).zip(upper) {
        *v = v.clamp(lo, hi);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Gradient components that would push a coordinate further into an active
/// bound are zeroed.
fn projected_grad(x: &[f64], g: &[f64], lower: &[f64], upper: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(g)
        .zip(lower.iter().zip(upper))
        .map(|((&x, &g), (&lo, &hi))| {
            if (x <= lo && g > 0.0) || (x >= hi && g < 0.0) {
                0.0
            } else {
                g
            }
        })
        .collect()
}

/// Minimizes `f` from `x0` inside `[lower, upper]`. Returns `None` only when
/// `f` cannot be evaluated at the (projected) starting point.
pub fn minimize<F>(
    mut f: F,
    x0: &[f64],
    lower: &[f64],
    upper: &[f64],
    opts: &BfgsOptions,
) -> Option<Minimum>
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    project(&mut x, lower, upper);
    let (mut fx, mut g) = f(&x)?;
    if !fx.is_finite() {
        return None;
    }
    let f0 = fx;
    let mut evaluations = 1;
    // Inverse-Hessian approximation, row-major.
    let mut h = identity(n);
    let mut first = true;
    let mut iterations = 0;

    while iterations < opts.max_iter {
        let pg = projected_grad(&x, &g, lower, upper);
        if pg.iter().fold(0.0f64, |m, v| m.max(v.abs())) < opts.grad_tol {
            break;
        }
        iterations += 1;
        let mut dir: Vec<f64> = (0..n).map(|i| -dot(&h[i * n..(i + 1) * n], &pg)).collect();
        if dot(&dir, &pg) >= 0.0 {
            h = identity(n);
            dir = pg.iter().map(|v| -v).collect();
        }

        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACK {
            let mut xn: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + t * d).collect();
            project(&mut xn, lower, upper);
            let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
            let decrease = dot(&g, &s);
            if let Some((fn_, gn)) = f(&xn) {
                evaluations += 1;
                if fn_.is_finite() && fn_ <= fx + ARMIJO_C * decrease.min(0.0) {
                    accepted = Some((xn, s, fn_, gn));
                    break;
                }
            } else {
                evaluations += 1;
            }
            t *= 0.5;
        }
        let Some((xn, s, fn_, gn)) = accepted else {
            if first {
                break;
            }
            // Stale curvature; retry once along the steepest descent.
            h = identity(n);
            first = true;
            continue;
        };

        let yv: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &yv);
        let rel = (fx - fn_).abs() / fx.abs().max(1.0);
        x = xn;
        g = gn;
        let prev = fx;
        fx = fn_;
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&yv, &yv).sqrt() {
            if first {
                let scale = sy / dot(&yv, &yv);
                h = identity(n);
                h.iter_mut().for_each(|v| *v *= scale);
            }
            bfgs_update(&mut h, &s, &yv, sy);
            first = false;
        }
        if rel < opts.f_tol && prev >= fx {
            break;
        }
    }
    Some(Minimum {
        x,
        f: fx,
        f0,
        iterations,
        evaluations,
    })
}

fn identity(n: usize) -> Vec<f64> {
    let mut h = vec![0.0; n * n];
    for i in 0..n {
        h[i * n + i] = 1.0;
    }
    h
}

/// H <- (I - rho s y^T) H (I - rho y s^T) + rho s s^T
fn bfgs_update(h: &mut [f64], s: &[f64], y: &[f64], sy: f64) {
    let n = s.len();
    let rho = 1.0 / sy;
    let hy: Vec<f64> = (0..n).map(|i| dot(&h[i * n..(i + 1) * n], y)).collect();
    let yhy = dot(y, &hy);
    for i in 0..n {
        for j in 0..n {
            h[i * n + j] +=
                -rho * (hy[i] * s[j] + s[i] * hy[j]) + (rho * rho * yhy + rho) * s[i] * s[j];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &[f64]) -> Option<(f64, Vec<f64>)> {
        let (a, b) = (x[0], x[1]);
        let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let g = vec![
            -2.0 * (1.0 - a) - 400.0 * a * (b - a * a),
            200.0 * (b - a * a),
        ];
        Some((f, g))
    }

    #[test]
    fn rosenbrock_minimum() {
        let inf = [f64::INFINITY; 2];
        let ninf = [f64::NEG_INFINITY; 2];
        let m = minimize(
            rosenbrock,
            &[-1.2, 1.0],
            &ninf,
            &inf,
            &BfgsOptions::default(),
        )
        .unwrap();
        assert!(
            (m.x[0] - 1.0).abs() < 1e-5 && (m.x[1] - 1.0).abs() < 1e-5,
            "{:?}",
            m.x
        );
        assert!(m.f <= m.f0);
    }

    #[test]
    fn active_bound_is_respected() {
        // min (x - 3)^2 on [0, 1] -> x = 1
        let f = |x: &[f64]| Some(((x[0] - 3.0).powi(2), vec![2.0 * (x[0] - 3.0)]));
        let m = minimize(f, &[0.2], &[0.0], &[1.0], &BfgsOptions::default()).unwrap();
        assert_eq!(m.x[0], 1.0);
    }

    #[test]
    fn undefined_region_is_avoided() {
        // Objective refuses x < 0.5; minimum of (x - 0.2)^2 over x >= 0.5 is 0.5.
        let f = |x: &[f64]| {
            if x[0] < 0.5 {
                None
            } else {
                Some(((x[0] - 0.2).powi(2), vec![2.0 * (x[0] - 0.2)]))
            }
        };
        let m = minimize(
            f,
            &[2.0],
            &[f64::NEG_INFINITY],
            &[f64::INFINITY],
            &BfgsOptions::default(),
        )
        .unwrap();
        assert!(m.x[0] >= 0.5 && m.x[0] < 0.51, "{}", m.x[0]);
        assert!(minimize(
            f,
            &[0.1],
            &[f64::NEG_INFINITY],
            &[f64::INFINITY],
            &BfgsOptions::default()
        )
        .is_none());
    }
}
