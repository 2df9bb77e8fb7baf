//! Smoothing kernel and the functionals of it that inference needs.
//!
//! The Epanechnikov kernel `K(t) = 0.75 (1 - t^2)` on `[-1, 1]` is the only
//! family. Beyond pointwise evaluation, the confidence bands and the
//! likelihood-ratio test consume scalar functionals of `K`:
//!
//! * `v2 = ∫ t^2 K(t) dt`, the second moment entering the bias formula,
//! * `tau = ∫ K(t)^2 dt`, the variance scale,
//! * `k0 = K(0)`,
//! * `∫ K'(t)^2 dt`, entering the Gumbel-type band critical value,
//! * `conv_norm = ∫ [K - (K*K)/2]^2 dt` and the normalizing ratio
//!   `r_K = [K(0) - tau/2] / conv_norm` for the likelihood-ratio scaling.
//!
//! Moment constants have closed forms; `conv_norm` involves the
//! self-convolution `K*K` and is integrated piecewise by Gauss-Legendre
//! rules, which are exact here because every piece is polynomial. The
//! result is cached on first use.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quad;

/// Supported kernel families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum KernelFamily {
    #[default]
    Epanechnikov,
}

/// A kernel together with its support half-width `A`, so that `K(t) = 0`
/// for `|t| > A`. The Epanechnikov kernel has `A = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub support_halfwidth: f64,
}

impl Default for KernelSpec {
    fn default() -> Self {
        Self::epanechnikov()
    }
}

/// Scalar functionals of the kernel used by bias, band, and test formulas.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelConstants {
    /// Second moment `∫ t^2 K(t) dt`.
    pub v2: f64,
    /// Squared norm `∫ K(t)^2 dt`.
    pub tau: f64,
    /// Peak value `K(0)`.
    pub k0: f64,
    /// `∫ K'(t)^2 dt`.
    pub deriv_sq_integral: f64,
    /// `∫ [K(t) - (K*K)(t)/2]^2 dt` over the doubled support.
    pub conv_norm: f64,
    /// Likelihood-ratio normalizer `[K(0) - tau/2] / conv_norm`.
    pub r_k: f64,
}

impl KernelSpec {
    /// Epanechnikov kernel on `[-1, 1]`.
    pub fn epanechnikov() -> Self {
        KernelSpec { family: KernelFamily::Epanechnikov, support_halfwidth: 1.0 }
    }

    /// Kernel value `K(t)`. Nonnegative, symmetric, zero outside the support.
    pub fn eval(&self, t: f64) -> f64 {
        match self.family {
            KernelFamily::Epanechnikov => {
                if t.abs() <= 1.0 {
                    0.75 * (1.0 - t * t)
                } else {
                    0.0
                }
            }
        }
    }

    /// Kernel derivative `K'(t)`, taken as zero outside the open support.
    pub fn deriv(&self, t: f64) -> f64 {
        match self.family {
            KernelFamily::Epanechnikov => {
                if t.abs() <= 1.0 {
                    -1.5 * t
                } else {
                    0.0
                }
            }
        }
    }

    /// Bandwidth-scaled weight `K(t/h) / h`.
    ///
    /// Fails with [`Error::NonPositiveBandwidth`] unless `h > 0`.
    pub fn scaled_weight(&self, t: f64, h: f64) -> Result<f64> {
        if !(h > 0.0) {
            return Err(Error::NonPositiveBandwidth(h));
        }
        Ok(self.eval(t / h) / h)
    }

    /// Self-convolution `(K*K)(x) = ∫ K(t) K(x - t) dt`, supported on
    /// `[-2A, 2A]`. The integrand is polynomial on the overlap interval, so
    /// a fixed Gauss-Legendre rule is exact.
    pub fn self_convolution(&self, x: f64) -> f64 {
        let a = self.support_halfwidth;
        let lo = (-a).max(x - a);
        let hi = a.min(x + a);
        if lo >= hi {
            return 0.0;
        }
        quad::integrate_gl(&|t| self.eval(t) * self.eval(x - t), lo, hi, 8)
    }

    /// Kernel functionals, computed once per family and cached.
    pub fn constants(&self) -> KernelConstants {
        match self.family {
            KernelFamily::Epanechnikov => {
                static CACHE: OnceLock<KernelConstants> = OnceLock::new();
                *CACHE.get_or_init(|| self.compute_constants())
            }
        }
    }

    fn compute_constants(&self) -> KernelConstants {
        // Closed forms for the Epanechnikov moments:
        //   v2  = 2 * 0.75 * (1/3 - 1/5)      = 1/5
        //   tau = 0.5625 * (2 - 4/3 + 2/5)    = 3/5
        //   ∫K'^2 = 2.25 * 2/3                = 3/2
        let v2 = 0.2;
        let tau = 0.6;
        let k0 = self.eval(0.0);
        let deriv_sq_integral = 1.5;
        let conv_norm = self.conv_norm_quadrature();
        let r_k = (k0 - 0.5 * tau) / conv_norm;
        KernelConstants { v2, tau, k0, deriv_sq_integral, conv_norm, r_k }
    }

    /// `∫ [K - (K*K)/2]^2` integrated piecewise over the doubled support.
    /// Pieces join at multiples of the half-width where either `K` or `K*K`
    /// changes polynomial form.
    fn conv_norm_quadrature(&self) -> f64 {
        let a = self.support_halfwidth;
        let f = |x: f64| {
            let d = self.eval(x) - 0.5 * self.self_convolution(x);
            d * d
        };
        let knots = [-2.0 * a, -a, 0.0, a, 2.0 * a];
        knots.windows(2).map(|w| quad::integrate_gl(&f, w[0], w[1], 16)).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quad::integrate_adaptive;
    use approx::assert_abs_diff_eq;

    #[test]
    fn pointwise_values() {
        let k = KernelSpec::epanechnikov();
        assert_eq!(k.eval(0.0), 0.75);
        assert_eq!(k.eval(0.5), 0.5625);
        assert_eq!(k.eval(1.0), 0.0);
        assert_eq!(k.eval(-1.0), 0.0);
        assert_eq!(k.eval(1.2), 0.0);
        assert_eq!(k.eval(-3.0), 0.0);
    }

    #[test]
    fn scaled_weight_matches_definition() {
        let k = KernelSpec::epanechnikov();
        assert_abs_diff_eq!(k.scaled_weight(0.1, 0.2).unwrap(), 2.8125, epsilon = 1e-12);
        assert_eq!(k.scaled_weight(0.5, 0.2).unwrap(), 0.0);
    }

    #[test]
    fn nonpositive_bandwidth_rejected() {
        let k = KernelSpec::epanechnikov();
        assert!(matches!(k.scaled_weight(0.1, 0.0), Err(Error::NonPositiveBandwidth(_))));
        assert!(matches!(k.scaled_weight(0.1, -1.0), Err(Error::NonPositiveBandwidth(_))));
    }

    #[test]
    fn symmetry_and_nonnegativity() {
        let k = KernelSpec::epanechnikov();
        let mut t = -1.5;
        while t <= 1.5 {
            assert!(k.eval(t) >= 0.0);
            assert_abs_diff_eq!(k.eval(t), k.eval(-t), epsilon = 0.0);
            t += 0.01;
        }
    }

    #[test]
    fn constants_match_closed_forms_and_quadrature() {
        let k = KernelSpec::epanechnikov();
        let c = k.constants();
        assert_abs_diff_eq!(c.v2, 0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(c.tau, 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(c.k0, 0.75, epsilon = 1e-15);
        assert_abs_diff_eq!(c.deriv_sq_integral, 1.5, epsilon = 1e-15);

        // Independent adaptive-quadrature oracle for each functional.
        let v2 = integrate_adaptive(&|t| t * t * k.eval(t), -1.0, 1.0, 1e-12).unwrap();
        let tau = integrate_adaptive(&|t| k.eval(t) * k.eval(t), -1.0, 1.0, 1e-12).unwrap();
        let dsq = integrate_adaptive(&|t| k.deriv(t) * k.deriv(t), -1.0, 1.0, 1e-12).unwrap();
        assert_abs_diff_eq!(c.v2, v2, epsilon = 1e-10);
        assert_abs_diff_eq!(c.tau, tau, epsilon = 1e-10);
        assert_abs_diff_eq!(c.deriv_sq_integral, dsq, epsilon = 1e-10);

        // Mass and the convolution identity (K*K)(0) = ∫ K^2 = tau.
        let mass = integrate_adaptive(&|t| k.eval(t), -1.0, 1.0, 1e-12).unwrap();
        assert_abs_diff_eq!(mass, 1.0, epsilon = 1e-10);
        assert_abs_diff_eq!(k.self_convolution(0.0), c.tau, epsilon = 1e-10);
    }

    #[test]
    fn conv_norm_and_r_k_frozen_values() {
        // High-precision references computed once with 30-digit arithmetic.
        let c = KernelSpec::epanechnikov().constants();
        assert_abs_diff_eq!(c.conv_norm, 0.212_738_433_441_558_4, epsilon = 1e-12);
        assert_abs_diff_eq!(c.r_k, 2.115_273_637_772_743_5, epsilon = 1e-11);
        // r_K is the defining ratio by construction.
        assert_abs_diff_eq!(c.r_k, (c.k0 - 0.5 * c.tau) / c.conv_norm, epsilon = 1e-15);
    }

    #[test]
    fn constants_are_cached() {
        let k = KernelSpec::epanechnikov();
        let a = k.constants();
        let b = k.constants();
        assert_eq!(a, b);
    }
}
