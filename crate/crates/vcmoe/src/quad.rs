//! Minimal numeric quadrature: fixed-order Gauss-Legendre rules and an
//! adaptive Simpson fallback with an absolute-error stopping rule.

#[cfg(test)]
use crate::error::{Error, Result};

/// Gauss-Legendre nodes and weights on [-1, 1] for a given order.
///
/// Nodes are roots of the Legendre polynomial, found by Newton iteration
/// from the Chebyshev-based initial guess. Exact for polynomials of degree
/// at most `2n - 1`, which covers every piecewise-polynomial integrand in
/// this crate once the pieces are integrated separately.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 2);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        // Newton iterations on P_n(x); converges in a handful of steps.
        for _ in 0..100 {
            let (p, dp) = legendre_with_deriv(n, x);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let (_, dp) = legendre_with_deriv(n, x);
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    (nodes, weights)
}

/// Evaluate the Legendre polynomial P_n and its derivative at x by the
/// three-term recurrence.
fn legendre_with_deriv(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}

/// Integrate `f` over [a, b] with a fixed-order Gauss-Legendre rule.
pub fn integrate_gl<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, order: usize) -> f64 {
    let (nodes, weights) = gauss_legendre(order);
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    let mut total = 0.0;
    for (x, w) in nodes.iter().zip(&weights) {
        total += w * f(mid + half * x);
    }
    half * total
}

/// Adaptive Simpson integration with absolute tolerance `tol`.
///
/// Used as an implementation-independent check on the closed-form kernel
/// constants. Fails with [`Error::QuadratureFailure`] when the recursion
/// depth limit is reached before the error estimate drops below `tol`.
#[cfg(test)]
pub fn integrate_adaptive<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> Result<f64> {
    let fa = f(a);
    let fb = f(b);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = simpson(a, b, fa, fm, fb);
    // Depth 40 keeps subinterval widths well above f64 ulp spacing, so a
    // genuinely unmeetable tolerance exhausts the budget instead of
    // terminating on a spuriously zero error estimate.
    adaptive_step(f, a, b, fa, fm, fb, whole, tol, 40).ok_or(Error::QuadratureFailure { a, b, tol })
}

#[cfg(test)]
fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

#[cfg(test)]
#[allow(clippy::too_many_arguments)]
fn adaptive_step<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> Option<f64> {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = simpson(a, m, fa, flm, fm);
    let right = simpson(m, b, fm, frm, fb);
    let err = left + right - whole;
    if err.abs() <= 15.0 * tol {
        return Some(left + right + err / 15.0);
    }
    if depth == 0 {
        return None;
    }
    let l = adaptive_step(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)?;
    let r = adaptive_step(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)?;
    Some(l + r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn gauss_legendre_integrates_polynomials_exactly() {
        // degree 9 polynomial needs order >= 5
        let f = |x: f64| 3.0 * x.powi(9) - 2.0 * x.powi(4) + x - 7.0;
        // antiderivative: 0.3 x^10 - 0.4 x^5 + 0.5 x^2 - 7 x
        let exact = |x: f64| 0.3 * x.powi(10) - 0.4 * x.powi(5) + 0.5 * x * x - 7.0 * x;
        let got = integrate_gl(&f, -1.5, 2.0, 8);
        assert_abs_diff_eq!(got, exact(2.0) - exact(-1.5), epsilon = 1e-11);
    }

    #[test]
    fn adaptive_matches_smooth_integral() {
        let got = integrate_adaptive(&|x: f64| x.sin(), 0.0, std::f64::consts::PI, 1e-12).unwrap();
        assert_abs_diff_eq!(got, 2.0, epsilon = 1e-10);
    }

    #[test]
    fn adaptive_reports_failure_on_hopeless_tolerance() {
        // A discontinuous integrand with an irrational jump point never
        // settles at tolerance 0.
        let f = |x: f64| if x < std::f64::consts::FRAC_1_SQRT_2 { 0.0 } else { 1.0 };
        let err = integrate_adaptive(&f, 0.0, 1.0, 0.0).unwrap_err();
        assert!(matches!(err, Error::QuadratureFailure { .. }));
    }
}
