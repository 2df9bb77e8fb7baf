//! Model specification, parameter containers, and component densities.
//!
//! A `C`-component mixture of experts at a fixed index point carries
//!
//! * gating coefficients `beta`: one row per non-reference class
//!   (`C - 1` rows of length `p_x`); the last class is the reference with
//!   an implicit zero row,
//! * expert coefficients `alpha`: one row per class (`C` rows of length
//!   `p_z`) mapped through the expert link,
//! * `log_delta`: one log dispersion per class for Gaussian experts
//!   (the dispersion is the standard deviation); binomial experts have no
//!   free dispersion and keep these entries at zero.
//!
//! Coefficients are functions of the index; a [`ThetaPoint`] stores their
//! values and first derivatives (slopes) at one grid point, matching the
//! local-linear expansion used by the fitting objective.

mod derivs;

pub use derivs::{local_objective_grad_hess, mixture_grad_hess, ParamLayout};
pub(crate) use derivs::{
    accumulate_mixture, accumulate_q_nodedata, DerivScratch, LocalObs, MixtureScratch,
};

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

/// Conditional density family of the experts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExpertFamily {
    /// Gaussian with identity link; the per-class dispersion is the
    /// standard deviation, optimized on the log scale.
    Gaussian,
    /// Binomial counts out of a fixed number of trials with logit link.
    Binomial { trials: u32 },
}

/// Functional form of the gating network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GatingForm {
    /// Two classes, single coefficient vector, expit link.
    Logistic,
    /// General multinomial with the last class as reference.
    Softmax,
}

/// Identifier of one scalar coefficient function. Class indices are
/// zero-based internally; display names are one-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CoefId {
    /// Gating coefficient: `class` in `0..C-1`, `col` in `0..p_x`.
    Beta { class: usize, col: usize },
    /// Expert coefficient: `class` in `0..C`, `col` in `0..p_z`.
    Alpha { class: usize, col: usize },
    /// Log dispersion of a Gaussian expert class.
    LogDelta { class: usize },
}

/// Full specification of the mixture-of-experts model shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub n_components: usize,
    pub expert: ExpertFamily,
    pub gating: GatingForm,
    pub p_x: usize,
    pub p_z: usize,
    /// One flag per coefficient in [`ModelSpec::coef_ids`] order;
    /// `true` marks a coefficient held constant over the index.
    pub constant_mask: Vec<bool>,
}

impl ModelSpec {
    /// Validate and build a specification with all coefficients functional.
    pub fn new(
        n_components: usize,
        expert: ExpertFamily,
        gating: GatingForm,
        p_x: usize,
        p_z: usize,
    ) -> Result<Self> {
        if n_components < 2 {
            return Err(Error::InvalidSpec(format!(
                "need at least 2 components, got {n_components}"
            )));
        }
        if gating == GatingForm::Logistic && n_components != 2 {
            return Err(Error::InvalidSpec(format!(
                "logistic gating requires exactly 2 components, got {n_components}"
            )));
        }
        if p_x == 0 || p_z == 0 {
            return Err(Error::InvalidSpec("p_x and p_z must be positive".into()));
        }
        if let ExpertFamily::Binomial { trials } = expert {
            if trials == 0 {
                return Err(Error::InvalidSpec("binomial trials must be positive".into()));
            }
        }
        let mut spec = ModelSpec { n_components, expert, gating, p_x, p_z, constant_mask: vec![] };
        spec.constant_mask = vec![false; spec.n_coefficients()];
        Ok(spec)
    }

    /// Mark the listed coefficients as constant over the index.
    pub fn with_constant(mut self, targets: &[CoefId]) -> Result<Self> {
        for id in targets {
            let k = self.coef_index(*id)?;
            self.constant_mask[k] = true;
        }
        Ok(self)
    }

    /// Number of free dispersion parameters per the expert family.
    pub fn has_dispersion(&self) -> bool {
        matches!(self.expert, ExpertFamily::Gaussian)
    }

    /// Number of gating coefficient rows (non-reference classes).
    pub fn n_gate_rows(&self) -> usize {
        self.n_components - 1
    }

    /// Total count of scalar coefficient functions.
    pub fn n_coefficients(&self) -> usize {
        let c = self.n_components;
        (c - 1) * self.p_x
            + c * self.p_z
            + if self.has_dispersion() { c } else { 0 }
    }

    /// Canonical coefficient order: gating rows class-major, then expert
    /// rows class-major, then log dispersions by class.
    pub fn coef_ids(&self) -> Vec<CoefId> {
        let c = self.n_components;
        let mut ids = Vec::with_capacity(self.n_coefficients());
        for class in 0..c - 1 {
            for col in 0..self.p_x {
                ids.push(CoefId::Beta { class, col });
            }
        }
        for class in 0..c {
            for col in 0..self.p_z {
                ids.push(CoefId::Alpha { class, col });
            }
        }
        if self.has_dispersion() {
            for class in 0..c {
                ids.push(CoefId::LogDelta { class });
            }
        }
        ids
    }

    /// Position of a coefficient in canonical order.
    pub fn coef_index(&self, id: CoefId) -> Result<usize> {
        let c = self.n_components;
        let bad = || Error::UnknownCoefficient(format!("{id:?}"));
        match id {
            CoefId::Beta { class, col } => {
                if class >= c - 1 || col >= self.p_x {
                    return Err(bad());
                }
                Ok(class * self.p_x + col)
            }
            CoefId::Alpha { class, col } => {
                if class >= c || col >= self.p_z {
                    return Err(bad());
                }
                Ok((c - 1) * self.p_x + class * self.p_z + col)
            }
            CoefId::LogDelta { class } => {
                if !self.has_dispersion() || class >= c {
                    return Err(bad());
                }
                Ok((c - 1) * self.p_x + c * self.p_z + class)
            }
        }
    }

    /// Display name for a coefficient. Logistic gating drops the class
    /// digit; all class digits are one-based.
    pub fn coef_name(&self, id: CoefId) -> String {
        match id {
            CoefId::Beta { class, col } => {
                if self.gating == GatingForm::Logistic {
                    format!("beta{col}")
                } else {
                    format!("beta{}{}", class + 1, col)
                }
            }
            CoefId::Alpha { class, col } => format!("alpha{}{}", class + 1, col),
            CoefId::LogDelta { class } => format!("delta{}", class + 1),
        }
    }

    /// Parse a display name back into an identifier.
    pub fn parse_coef(&self, name: &str) -> Result<CoefId> {
        let bad = || Error::UnknownCoefficient(name.to_string());
        let id = if let Some(rest) = name.strip_prefix("beta") {
            if self.gating == GatingForm::Logistic {
                let col: usize = rest.parse().map_err(|_| bad())?;
                CoefId::Beta { class: 0, col }
            } else {
                let digits: Vec<char> = rest.chars().collect();
                if digits.len() < 2 {
                    return Err(bad());
                }
                let class: usize = digits[0].to_digit(10).ok_or_else(bad)? as usize;
                let col: usize =
                    rest[1..].parse().map_err(|_| bad())?;
                if class == 0 {
                    return Err(bad());
                }
                CoefId::Beta { class: class - 1, col }
            }
        } else if let Some(rest) = name.strip_prefix("alpha") {
            let digits: Vec<char> = rest.chars().collect();
            if digits.len() < 2 {
                return Err(bad());
            }
            let class: usize = digits[0].to_digit(10).ok_or_else(bad)? as usize;
            let col: usize = rest[1..].parse().map_err(|_| bad())?;
            if class == 0 {
                return Err(bad());
            }
            CoefId::Alpha { class: class - 1, col }
        } else if let Some(rest) = name.strip_prefix("delta") {
            let class: usize = rest.parse().map_err(|_| bad())?;
            if class == 0 {
                return Err(bad());
            }
            CoefId::LogDelta { class: class - 1 }
        } else {
            return Err(bad());
        };
        // Round-trip through coef_index to range-check.
        self.coef_index(id).map(|_| id).map_err(|_| bad())
    }
}

/// Coefficient values and slopes at one grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaPoint {
    /// Gating coefficients, `(C - 1) x p_x`.
    pub beta: Array2<f64>,
    /// Expert coefficients, `C x p_z`.
    pub alpha: Array2<f64>,
    /// Per-class log dispersion, length `C` (zeros for binomial experts).
    pub log_delta: Array1<f64>,
    /// First derivatives matching each block.
    pub beta_slope: Array2<f64>,
    pub alpha_slope: Array2<f64>,
    pub log_delta_slope: Array1<f64>,
}

impl ThetaPoint {
    /// All-zero parameters of the right shape for `spec`.
    pub fn zeros(spec: &ModelSpec) -> Self {
        let c = spec.n_components;
        ThetaPoint {
            beta: Array2::zeros((c - 1, spec.p_x)),
            alpha: Array2::zeros((c, spec.p_z)),
            log_delta: Array1::zeros(c),
            beta_slope: Array2::zeros((c - 1, spec.p_x)),
            alpha_slope: Array2::zeros((c, spec.p_z)),
            log_delta_slope: Array1::zeros(c),
        }
    }

    /// Value of one coefficient.
    pub fn coef(&self, id: CoefId) -> f64 {
        match id {
            CoefId::Beta { class, col } => self.beta[(class, col)],
            CoefId::Alpha { class, col } => self.alpha[(class, col)],
            CoefId::LogDelta { class } => self.log_delta[class],
        }
    }

    /// Slope of one coefficient.
    pub fn slope(&self, id: CoefId) -> f64 {
        match id {
            CoefId::Beta { class, col } => self.beta_slope[(class, col)],
            CoefId::Alpha { class, col } => self.alpha_slope[(class, col)],
            CoefId::LogDelta { class } => self.log_delta_slope[class],
        }
    }

    /// Mutable access to one coefficient value.
    pub fn coef_mut(&mut self, id: CoefId) -> &mut f64 {
        match id {
            CoefId::Beta { class, col } => &mut self.beta[(class, col)],
            CoefId::Alpha { class, col } => &mut self.alpha[(class, col)],
            CoefId::LogDelta { class } => &mut self.log_delta[class],
        }
    }

    /// Mutable access to one coefficient slope.
    pub fn slope_mut(&mut self, id: CoefId) -> &mut f64 {
        match id {
            CoefId::Beta { class, col } => &mut self.beta_slope[(class, col)],
            CoefId::Alpha { class, col } => &mut self.alpha_slope[(class, col)],
            CoefId::LogDelta { class } => &mut self.log_delta_slope[class],
        }
    }

    /// Dispersion (standard deviation) of one Gaussian class.
    pub fn delta(&self, class: usize) -> f64 {
        self.log_delta[class].exp()
    }
}

/// Posterior component membership probabilities, one row per observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Responsibilities {
    pub gamma: Array2<f64>,
}

impl Responsibilities {
    /// Validate shape and row sums (each row must sum to 1 within 1e-12).
    pub fn new(gamma: Array2<f64>) -> Result<Self> {
        for (i, row) in gamma.rows().into_iter().enumerate() {
            let s: f64 = row.sum();
            if (s - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidData(format!(
                    "responsibility row {i} sums to {s}, expected 1"
                )));
            }
            if row.iter().any(|&g| !(0.0..=1.0).contains(&g)) {
                return Err(Error::InvalidData(format!(
                    "responsibility row {i} has entries outside [0, 1]"
                )));
            }
        }
        Ok(Responsibilities { gamma })
    }

    pub fn n(&self) -> usize {
        self.gamma.nrows()
    }
}

/// Numerically stable log(1 + exp(x)).
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Numerically stable expit.
pub(crate) fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_7;

/// Gating probabilities at a single design row, using coefficient values
/// only (slopes are ignored). Scores are shifted by their maximum before
/// exponentiation, so extreme linear predictors saturate cleanly.
pub fn gate_probs(spec: &ModelSpec, theta: &ThetaPoint, x: ArrayView1<f64>) -> Vec<f64> {
    debug_assert_eq!(x.len(), spec.p_x);
    match spec.gating {
        GatingForm::Logistic => {
            let s: f64 = theta.beta.row(0).iter().zip(x.iter()).map(|(b, v)| b * v).sum();
            let p = expit(s);
            vec![p, 1.0 - p]
        }
        GatingForm::Softmax => {
            let c = spec.n_components;
            let mut scores = vec![0.0; c];
            for class in 0..c - 1 {
                scores[class] =
                    theta.beta.row(class).iter().zip(x.iter()).map(|(b, v)| b * v).sum();
            }
            softmax_in_place(&mut scores);
            scores
        }
    }
}

/// Overwrite `scores` with softmax probabilities, max-subtracted.
pub(crate) fn softmax_in_place(scores: &mut [f64]) {
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for s in scores.iter_mut() {
        *s = (*s - m).exp();
        total += *s;
    }
    for s in scores.iter_mut() {
        *s /= total;
    }
}

/// Log gating probabilities written into `out`, given raw scores for the
/// non-reference classes (the reference score is zero).
pub(crate) fn log_gate_from_scores(scores: &[f64], out: &mut [f64]) {
    let m = scores.iter().cloned().fold(0.0_f64, f64::max);
    let mut total = (-m).exp();
    for &s in scores {
        total += (s - m).exp();
    }
    let lse = m + total.ln();
    for (o, &s) in out.iter_mut().zip(scores) {
        *o = s - lse;
    }
    out[scores.len()] = -lse;
}

/// Log conditional density of `y` under expert class `class`, using
/// coefficient values only.
pub fn expert_log_density(
    spec: &ModelSpec,
    class: usize,
    theta: &ThetaPoint,
    z: ArrayView1<f64>,
    y: f64,
) -> Result<f64> {
    debug_assert_eq!(z.len(), spec.p_z);
    let lin: f64 = theta.alpha.row(class).iter().zip(z.iter()).map(|(a, v)| a * v).sum();
    match spec.expert {
        ExpertFamily::Gaussian => {
            let ld = theta.log_delta[class];
            let r = (y - lin) * (-ld).exp();
            Ok(-LN_SQRT_2PI - ld - 0.5 * r * r)
        }
        ExpertFamily::Binomial { trials } => {
            let m = f64::from(trials);
            if y < 0.0 || y > m || y.fract() != 0.0 {
                return Err(Error::InvalidResponse {
                    y,
                    family: format!("binomial with {trials} trials"),
                });
            }
            Ok(ln_binom(m, y) + y * lin - m * softplus(lin))
        }
    }
}

/// Log binomial coefficient ln C(m, y) for integral arguments.
pub(crate) fn ln_binom(m: f64, y: f64) -> f64 {
    ln_gamma(m + 1.0) - ln_gamma(y + 1.0) - ln_gamma(m - y + 1.0)
}

/// Log mixture density `log Σ_c π_c(x) φ_c(y | z)` at one observation,
/// combined with log-sum-exp.
pub fn mixture_log_density(
    spec: &ModelSpec,
    theta: &ThetaPoint,
    x: ArrayView1<f64>,
    z: ArrayView1<f64>,
    y: f64,
) -> Result<f64> {
    let probs = gate_probs(spec, theta, x);
    let mut terms = Vec::with_capacity(spec.n_components);
    for (class, &p) in probs.iter().enumerate() {
        let lp = if p > 0.0 { p.ln() } else { f64::NEG_INFINITY };
        terms.push(lp + expert_log_density(spec, class, theta, z, y)?);
    }
    Ok(log_sum_exp(&terms))
}

/// Posterior membership row and log mixture density at one observation,
/// written into `gamma_out`. When every component log density underflows
/// to negative infinity the row falls back to the gating probabilities.
/// `scores` and `logp` are caller-provided scratch of lengths `C - 1`
/// and `C`.
pub(crate) fn posterior_row(
    spec: &ModelSpec,
    theta: &ThetaPoint,
    x: &[f64],
    z: &[f64],
    y: f64,
    scores: &mut [f64],
    logp: &mut [f64],
    gamma_out: &mut [f64],
) -> Result<f64> {
    let c = spec.n_components;
    for class in 0..c - 1 {
        let mut acc = 0.0;
        for (j, &xv) in x.iter().enumerate() {
            acc += theta.beta[(class, j)] * xv;
        }
        scores[class] = acc;
    }
    log_gate_from_scores(scores, logp);
    let mut lin;
    for class in 0..c {
        lin = 0.0;
        for (j, &zv) in z.iter().enumerate() {
            lin += theta.alpha[(class, j)] * zv;
        }
        let logphi = match spec.expert {
            ExpertFamily::Gaussian => {
                let ld = theta.log_delta[class];
                let r = (y - lin) * (-ld).exp();
                -LN_SQRT_2PI - ld - 0.5 * r * r
            }
            ExpertFamily::Binomial { trials } => {
                let m = f64::from(trials);
                if y < 0.0 || y > m || y.fract() != 0.0 {
                    return Err(Error::InvalidResponse {
                        y,
                        family: format!("binomial with {trials} trials"),
                    });
                }
                ln_binom(m, y) + y * lin - m * softplus(lin)
            }
        };
        gamma_out[class] = logp[class] + logphi;
    }
    let logf = log_sum_exp(gamma_out);
    if logf.is_finite() {
        for g in gamma_out.iter_mut() {
            *g = (*g - logf).exp();
        }
    } else {
        for (g, &lp) in gamma_out.iter_mut().zip(logp.iter()) {
            *g = lp.exp();
        }
    }
    Ok(logf)
}

/// Log-sum-exp over a slice; returns negative infinity for all-degenerate
/// input.
pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = v.iter().map(|&t| (t - m).exp()).sum();
    m + s.ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn two_class_gaussian() -> ModelSpec {
        ModelSpec::new(2, ExpertFamily::Gaussian, GatingForm::Logistic, 2, 2).unwrap()
    }

    #[test]
    fn spec_validation() {
        assert!(ModelSpec::new(1, ExpertFamily::Gaussian, GatingForm::Logistic, 2, 2).is_err());
        assert!(ModelSpec::new(3, ExpertFamily::Gaussian, GatingForm::Logistic, 2, 2).is_err());
        assert!(ModelSpec::new(3, ExpertFamily::Gaussian, GatingForm::Softmax, 2, 2).is_ok());
        assert!(ModelSpec::new(2, ExpertFamily::Binomial { trials: 0 }, GatingForm::Logistic, 2, 2)
            .is_err());
    }

    #[test]
    fn coefficient_indexing_round_trips() {
        let spec = ModelSpec::new(3, ExpertFamily::Gaussian, GatingForm::Softmax, 2, 3).unwrap();
        let ids = spec.coef_ids();
        assert_eq!(ids.len(), spec.n_coefficients());
        assert_eq!(ids.len(), 2 * 2 + 3 * 3 + 3);
        for (k, id) in ids.iter().enumerate() {
            assert_eq!(spec.coef_index(*id).unwrap(), k);
            let name = spec.coef_name(*id);
            assert_eq!(spec.parse_coef(&name).unwrap(), *id);
        }
    }

    #[test]
    fn parse_rejects_out_of_range() {
        let spec = two_class_gaussian();
        assert!(spec.parse_coef("beta7").is_err());
        assert!(spec.parse_coef("alpha30").is_err());
        assert!(spec.parse_coef("gamma1").is_err());
        assert!(spec.parse_coef("delta3").is_err());
        assert_eq!(spec.parse_coef("beta1").unwrap(), CoefId::Beta { class: 0, col: 1 });
        assert_eq!(spec.parse_coef("alpha21").unwrap(), CoefId::Alpha { class: 1, col: 1 });
    }

    #[test]
    fn logistic_gate_matches_worked_example() {
        let spec = two_class_gaussian();
        let mut theta = ThetaPoint::zeros(&spec);
        theta.beta[(0, 0)] = 0.1;
        theta.beta[(0, 1)] = -0.3;
        let p = gate_probs(&spec, &theta, array![1.0, 2.0].view());
        assert_abs_diff_eq!(p[0], 0.377_540_668_798_145_4, epsilon = 1e-12);
        assert_abs_diff_eq!(p[1], 0.622_459_331_201_854_6, epsilon = 1e-12);
    }

    #[test]
    fn gate_probs_sum_to_one_under_extreme_scores() {
        let spec = two_class_gaussian();
        let mut theta = ThetaPoint::zeros(&spec);
        for b in [-500.0, 500.0] {
            theta.beta[(0, 0)] = b;
            let p = gate_probs(&spec, &theta, array![1.0, 0.0].view());
            assert!((p[0] + p[1] - 1.0).abs() < 1e-12);
            assert!(p.iter().all(|&v| v.is_finite() && (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn softmax_two_class_agrees_with_logistic() {
        let logi = two_class_gaussian();
        let soft = ModelSpec::new(2, ExpertFamily::Gaussian, GatingForm::Softmax, 2, 2).unwrap();
        let mut theta = ThetaPoint::zeros(&logi);
        for (b0, b1, x0, x1) in [
            (0.3, -1.2, 1.0, 0.4),
            (-2.0, 0.7, 1.0, -3.0),
            (10.0, 5.0, 1.0, 2.0),
        ] {
            theta.beta[(0, 0)] = b0;
            theta.beta[(0, 1)] = b1;
            let x = array![x0, x1];
            let a = gate_probs(&logi, &theta, x.view());
            let b = gate_probs(&soft, &theta, x.view());
            assert_abs_diff_eq!(a[0], b[0], epsilon = 1e-12);
            assert_abs_diff_eq!(a[1], b[1], epsilon = 1e-12);
        }
    }

    #[test]
    fn gaussian_log_density_closed_form() {
        let spec = two_class_gaussian();
        let theta = ThetaPoint::zeros(&spec);
        // mean 0, sd 1, y = 0: standard normal peak
        let ld = expert_log_density(&spec, 0, &theta, array![1.0, 0.0].view(), 0.0).unwrap();
        assert_abs_diff_eq!(ld, -0.918_938_533_204_672_7, epsilon = 1e-14);
    }

    #[test]
    fn binomial_log_density_and_validation() {
        let spec =
            ModelSpec::new(2, ExpertFamily::Binomial { trials: 100 }, GatingForm::Logistic, 2, 2)
                .unwrap();
        let theta = ThetaPoint::zeros(&spec);
        // p = expit(0) = 0.5, y = 50
        let ld = expert_log_density(&spec, 0, &theta, array![1.0, 0.0].view(), 50.0).unwrap();
        assert_abs_diff_eq!(ld, -2.530_876_403_977_105, epsilon = 1e-11);
        for bad in [-1.0, 100.5, 101.0] {
            assert!(matches!(
                expert_log_density(&spec, 0, &theta, array![1.0, 0.0].view(), bad),
                Err(Error::InvalidResponse { .. })
            ));
        }
    }

    #[test]
    fn mixture_log_density_worked_example() {
        // pi = (0.3, 0.7), experts N(0, 1) and N(2, 1), y = 1: both
        // component densities equal phi(1), so the mixture is phi(1).
        let spec = two_class_gaussian();
        let mut theta = ThetaPoint::zeros(&spec);
        theta.beta[(0, 0)] = (0.3_f64 / 0.7).ln();
        theta.alpha[(1, 0)] = 2.0;
        let got =
            mixture_log_density(&spec, &theta, array![1.0, 0.0].view(), array![1.0, 0.0].view(), 1.0)
                .unwrap();
        assert_abs_diff_eq!(got, -1.418_938_533_204_672_7, epsilon = 1e-12);
    }

    #[test]
    fn responsibilities_row_sums_validated() {
        assert!(Responsibilities::new(array![[0.5, 0.5], [0.9, 0.1]]).is_ok());
        assert!(Responsibilities::new(array![[0.6, 0.5]]).is_err());
        assert!(Responsibilities::new(array![[1.2, -0.2]]).is_err());
    }
}
