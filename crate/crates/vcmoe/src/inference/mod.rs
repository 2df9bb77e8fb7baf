//! Pointwise covariances, simultaneous confidence bands, and constancy
//! tests for fitted coefficient curves.
//!
//! The covariance of the local estimates at an index point is the sandwich
//! `H^{-1} S H^{-1}` built from the kernel-weighted mixture score and
//! Hessian. Bands come in two flavours: asymptotic bands scale the
//! pointwise standard error by a Gumbel-type critical value, bootstrap
//! bands calibrate the scaled sup deviation by resampling responses from
//! the fitted conditional density. Constancy of a coefficient function is
//! tested three ways: the sup statistic against the same Gumbel critical
//! value, its bootstrap analogue under the constant-coefficient fit, and a
//! likelihood ratio with a kernel-dependent effective degrees of freedom.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::ContinuousCDF;

use crate::error::{Error, Result};
use crate::fit::{evaluate_curve, fit_constant, fit_vcmoe, Dataset, FitConfig, InitStrategy, ThetaCurve};
use crate::kernel::KernelSpec;
use crate::model::{
    accumulate_mixture, expit, gate_probs, CoefId, ExpertFamily, MixtureScratch, ModelSpec,
    ParamLayout, ThetaPoint,
};

/// Bootstrap variance and quantile estimates need this many replicates.
const MIN_REPLICATES: usize = 50;

/// Hard cap on the fraction of bootstrap replicates allowed to fail.
const MAX_FAILURE_PCT: usize = 10;

/// EM iteration cap for warm-started bootstrap refits, mirroring the
/// cross-validation refit cap.
const BOOT_MAX_ITER: usize = 20;

/// Negative eigenvalues of a sandwich covariance beyond this magnitude are
/// surfaced as clip events; smaller ones are floating-point dust and are
/// zeroed silently.
const EIG_TOL: f64 = 1e-8;

/// How smoothing bias enters bands and test statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum BiasMode {
    /// Treat the bandwidth as already undersmoothed: bias is exactly zero.
    Undersmooth,
    /// Plug-in estimate `h^2 theta''(u) v2 / 2` with the curvature taken
    /// from a local cubic fit of the coefficient curve at this pilot
    /// bandwidth. The pilot must exceed the fit bandwidth.
    PilotCurvature(f64),
}

/// Which calibration produced a confidence band.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BandMethod {
    Asymptotic,
    Bootstrap,
}

/// Simultaneous confidence band for one coefficient function over the fit
/// grid. Dispersion coefficients are reported on the standard deviation
/// scale, everything else on the raw coefficient scale; `lower <= upper`
/// holds at every grid point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BandResult {
    pub coefficient: CoefId,
    pub grid: Vec<f64>,
    /// Band centre: the (possibly debiased) estimate on the reporting
    /// scale.
    pub estimate: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Multiplier applied to the pointwise standard error.
    pub critical_value: f64,
    /// Simultaneous coverage probability in `(0, 1)`.
    pub level: f64,
    pub method: BandMethod,
    /// Whether the centre was shifted by an estimated bias.
    pub debias: bool,
    /// Bandwidth of the curve the band was built on.
    pub h_used: f64,
}

/// Null reference a test statistic is compared against.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TestReference {
    /// Gumbel-type critical value for the sup statistic.
    GumbelCritical(f64),
    /// Upper quantile of the bootstrap sup distribution.
    BootstrapQuantile(f64),
    /// Chi-square with real-valued degrees of freedom.
    ChiSq { dof: f64 },
}

/// Which procedure produced a test result.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TestMethod {
    AsymptoticSup,
    Bootstrap,
    Glrt,
}

/// Outcome of a constancy test. `statistic` is the sup deviation for the
/// two sup tests and the scaled likelihood ratio for the likelihood ratio
/// test; `p_value` is absent for the asymptotic sup test, which only
/// reports the decision at its level.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TestResult {
    /// Coefficients held constant under the null.
    pub coefficients: Vec<CoefId>,
    pub statistic: f64,
    pub reference: TestReference,
    pub p_value: Option<f64>,
    pub reject: bool,
    /// Significance level the decision was taken at.
    pub level: f64,
    pub method: TestMethod,
}

/// Sandwich covariance of the free local parameters at one index point.
/// Row and column `2k` belong to the value and `2k + 1` to the slope of
/// `params[k]`.
#[derive(Debug, Clone)]
pub struct LocalCov {
    pub params: Vec<CoefId>,
    pub cov: Array2<f64>,
    /// Eigenvalues below `-1e-8` that had to be clipped to zero.
    pub clipped: usize,
    /// Whether a singular curvature forced a pseudo-inverse.
    pub pinv_fallback: bool,
}

/// Covariances and bias estimates of the local parameters along the fit
/// grid. `cov[g]` follows the [`LocalCov`] layout; `bias[g][k]` is the
/// value-scale bias of `params[k]` at `grid[g]`.
#[derive(Debug, Clone)]
pub struct CovCurve {
    pub grid: Vec<f64>,
    pub params: Vec<CoefId>,
    pub cov: Vec<Array2<f64>>,
    pub bias: Vec<Vec<f64>>,
    pub clip_events: usize,
    pub pinv_fallbacks: usize,
}

/// Scratch buffers for repeated sandwich assembly along a grid.
struct SandwichWs {
    scratch: MixtureScratch,
    grad: DVector<f64>,
    hess: DMatrix<f64>,
    a: DMatrix<f64>,
    meat: DMatrix<f64>,
    xrow: Vec<f64>,
    zrow: Vec<f64>,
}

impl SandwichWs {
    fn new(spec: &ModelSpec, layout: &ParamLayout) -> Self {
        let p = layout.n_params();
        SandwichWs {
            scratch: MixtureScratch::new(spec, layout),
            grad: DVector::zeros(p),
            hess: DMatrix::zeros(p, p),
            a: DMatrix::zeros(p, p),
            meat: DMatrix::zeros(p, p),
            xrow: vec![0.0; spec.p_x],
            zrow: vec![0.0; spec.p_z],
        }
    }
}

/// Sandwich `H^{-1} S H^{-1}` at `u`: `H` is the kernel-weighted mixture
/// Hessian, `S` the sum of outer products of the weighted per-observation
/// scores, both at the interpolated curve point. Clipped to the positive
/// semidefinite cone afterwards.
fn sandwich_at(
    spec: &ModelSpec,
    layout: &ParamLayout,
    data: &Dataset,
    theta: &ThetaPoint,
    u: f64,
    h: f64,
    ws: &mut SandwichWs,
) -> Result<(DMatrix<f64>, usize, bool)> {
    let kernel = KernelSpec::epanechnikov();
    ws.a.fill(0.0);
    ws.meat.fill(0.0);
    let mut n_eff = 0usize;
    for i in 0..data.n() {
        let d = data.u[i] - u;
        let w = kernel.scaled_weight(d, h)?;
        if w == 0.0 {
            continue;
        }
        n_eff += 1;
        for j in 0..spec.p_x {
            ws.xrow[j] = data.x[(i, j)];
        }
        for j in 0..spec.p_z {
            ws.zrow[j] = data.z[(i, j)];
        }
        accumulate_mixture(
            spec, layout, theta, &ws.xrow, &ws.zrow, data.y[i], d, &mut ws.scratch, &mut ws.grad,
            &mut ws.hess,
        );
        ws.a.zip_apply(&ws.hess, |a, h| *a += w * h);
        ws.meat.ger(w * w, &ws.grad, &ws.grad, 1.0);
    }
    if n_eff == 0 {
        return Err(Error::NoEffectiveSamples { u, h });
    }

    let neg_a = -&ws.a;
    let mut pinv_fallback = false;
    let cov = match Cholesky::new(neg_a.clone()) {
        Some(ch) => {
            let half = ch.solve(&ws.meat);
            ch.solve(&half.transpose()).transpose()
        }
        None => {
            pinv_fallback = true;
            let cutoff = 1e-9 * neg_a.norm();
            let pse = neg_a
                .pseudo_inverse(cutoff)
                .map_err(|_| Error::SingularHessian { u })?;
            &pse * &ws.meat * &pse
        }
    };

    let p = layout.n_params();
    let mut sym = DMatrix::zeros(p, p);
    for r in 0..p {
        for c in 0..p {
            sym[(r, c)] = 0.5 * (cov[(r, c)] + cov[(c, r)]);
        }
    }
    let mut clipped = 0usize;
    let mut any_negative = false;
    let eig = SymmetricEigen::new(sym.clone());
    for &l in eig.eigenvalues.iter() {
        if l < 0.0 {
            any_negative = true;
            if l < -EIG_TOL {
                clipped += 1;
            }
        }
    }
    let out = if any_negative {
        let mut d = eig.eigenvalues;
        for l in d.iter_mut() {
            *l = l.max(0.0);
        }
        &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
    } else {
        sym
    };
    Ok((out, clipped, pinv_fallback))
}

/// Sandwich covariance of the free local parameters at `u`, taken at the
/// interpolated curve point. Falls back to a pseudo-inverse on a singular
/// curvature and reports that through the result.
pub fn sandwich_cov(
    spec: &ModelSpec,
    curve: &ThetaCurve,
    data: &Dataset,
    u: f64,
) -> Result<LocalCov> {
    let layout = ParamLayout::from_spec(spec);
    let theta = evaluate_curve(curve, u)?;
    let mut ws = SandwichWs::new(spec, &layout);
    let (cov, clipped, pinv_fallback) =
        sandwich_at(spec, &layout, data, &theta, u, curve.h, &mut ws)?;
    let p = layout.n_params();
    let mut out = Array2::zeros((p, p));
    for r in 0..p {
        for c in 0..p {
            out[(r, c)] = cov[(r, c)];
        }
    }
    Ok(LocalCov { params: layout.free_ids().to_vec(), cov: out, clipped, pinv_fallback })
}

/// Plug-in smoothing bias of each free coefficient value at `u`:
/// `h^2 theta''(u) v2 / 2`, with the second derivative read off a local
/// cubic fit of the fitted coefficient curve at the pilot bandwidth.
/// [`BiasMode::Undersmooth`] returns exact zeros.
pub fn estimate_bias(
    spec: &ModelSpec,
    curve: &ThetaCurve,
    u: f64,
    mode: BiasMode,
) -> Result<Vec<f64>> {
    let layout = ParamLayout::from_spec(spec);
    let ids = layout.free_ids();
    let pilot = match mode {
        BiasMode::Undersmooth => return Ok(vec![0.0; ids.len()]),
        BiasMode::PilotCurvature(p) => p,
    };
    if !(u >= 0.0 && u <= 1.0) {
        return Err(Error::OutOfDomain(u));
    }
    if !(pilot > curve.h) {
        return Err(Error::PilotTooSmall { pilot, h: curve.h });
    }

    let kernel = KernelSpec::epanechnikov();
    let mut offsets = Vec::new();
    let mut weights = Vec::new();
    let mut kept = Vec::new();
    for (g, &node) in curve.grid.iter().enumerate() {
        let t = node - u;
        let w = kernel.scaled_weight(t, pilot)?;
        if w > 0.0 {
            offsets.push(t);
            weights.push(w);
            kept.push(g);
        }
    }
    if kept.len() < 4 {
        return Err(Error::InsufficientData(kept.len()));
    }

    // One weighted cubic design is shared by every coefficient.
    let m = kept.len();
    let mut design = DMatrix::zeros(m, 4);
    for (r, &t) in offsets.iter().enumerate() {
        design[(r, 0)] = 1.0;
        design[(r, 1)] = t;
        design[(r, 2)] = t * t;
        design[(r, 3)] = t * t * t;
    }
    let mut xtwx = DMatrix::zeros(4, 4);
    for r in 0..m {
        let row = design.row(r).transpose();
        xtwx.ger(weights[r], &row, &row, 1.0);
    }
    let chol = Cholesky::new(xtwx).ok_or(Error::SingularHessian { u })?;

    let factor = curve.h * curve.h * kernel.constants().v2;
    let mut bias = Vec::with_capacity(ids.len());
    for &id in ids {
        let mut rhs = DVector::zeros(4);
        for (r, &g) in kept.iter().enumerate() {
            let v = curve.points[g].coef(id);
            for c in 0..4 {
                rhs[c] += weights[r] * design[(r, c)] * v;
            }
        }
        let a = chol.solve(&rhs);
        // theta'' = 2 a_2, so the bias collapses to h^2 v2 a_2.
        bias.push(factor * a[2]);
    }
    Ok(bias)
}

/// Sandwich covariances and bias estimates at every grid node of a fitted
/// curve, with clip and pseudo-inverse events accumulated across nodes.
pub fn cov_curve(
    spec: &ModelSpec,
    curve: &ThetaCurve,
    data: &Dataset,
    mode: BiasMode,
) -> Result<CovCurve> {
    let layout = ParamLayout::from_spec(spec);
    let p = layout.n_params();
    let mut ws = SandwichWs::new(spec, &layout);
    let mut cov = Vec::with_capacity(curve.grid.len());
    let mut bias = Vec::with_capacity(curve.grid.len());
    let mut clip_events = 0usize;
    let mut pinv_fallbacks = 0usize;
    for (g, &u) in curve.grid.iter().enumerate() {
        let (s, clipped, pinv) = sandwich_at(spec, &layout, data, &curve.points[g], u, curve.h, &mut ws)?;
        clip_events += clipped;
        pinv_fallbacks += usize::from(pinv);
        let mut out = Array2::zeros((p, p));
        for r in 0..p {
            for c in 0..p {
                out[(r, c)] = s[(r, c)];
            }
        }
        cov.push(out);
        bias.push(estimate_bias(spec, curve, u, mode)?);
    }
    Ok(CovCurve {
        grid: curve.grid.clone(),
        params: layout.free_ids().to_vec(),
        cov,
        bias,
        clip_events,
        pinv_fallbacks,
    })
}

/// Centring constant of the sup-deviation limit: `a_n + log(I / (4 tau
/// pi)) / a_n` with `a_n = sqrt(-2 log h)` and `I` the integral of the
/// squared kernel derivative. Caller guarantees `0 < h < 1`.
fn gumbel_dn(h: f64) -> f64 {
    let kc = KernelSpec::epanechnikov().constants();
    let an = (-2.0 * h.ln()).sqrt();
    an + (kc.deriv_sq_integral / (4.0 * kc.tau * PI)).ln() / an
}

/// Critical value of the scaled sup deviation at tail mass `eta`:
/// `d_n + [log 2 - log(-log(1 - eta))] / sqrt(-2 log h)`. Decreasing in
/// `eta`; requires `0 < h < 1` so the limit normalization exists.
pub fn gumbel_critical(h: f64, eta: f64) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::NonPositiveBandwidth(h));
    }
    if h >= 1.0 {
        return Err(Error::BandwidthGeqOne(h));
    }
    if !(eta > 0.0 && eta < 1.0) {
        return Err(Error::InvalidData(format!("tail mass must lie in (0, 1), got {eta}")));
    }
    let an = (-2.0 * h.ln()).sqrt();
    Ok(gumbel_dn(h) + ((2.0f64).ln() - (-(1.0 - eta).ln()).ln()) / an)
}

/// Value of one coefficient on its reporting scale: dispersions move from
/// the log to the standard deviation scale, everything else is raw.
fn reporting_value(id: CoefId, value: f64) -> f64 {
    match id {
        CoefId::LogDelta { .. } => value.exp(),
        _ => value,
    }
}

/// Position of `id` among the free coefficients, or the lookup error.
fn free_index(layout: &ParamLayout, id: CoefId) -> Result<usize> {
    layout
        .free_ids()
        .iter()
        .position(|&f| f == id)
        .ok_or_else(|| Error::UnknownCoefficient(format!("{id:?}")))
}

/// Simultaneous asymptotic band for one coefficient function at coverage
/// `level`. The pointwise standard error comes from the sandwich
/// covariance and the multiplier from the Gumbel-type critical value; with
/// `debias` the centre is shifted by the plug-in bias at pilot bandwidth
/// `2 h`, otherwise the bandwidth is treated as undersmoothed and the bias
/// is zero. Dispersion bands are mapped to the standard deviation scale by
/// the delta method.
pub fn asymptotic_band(
    spec: &ModelSpec,
    curve: &ThetaCurve,
    data: &Dataset,
    coefficient: CoefId,
    level: f64,
    debias: bool,
) -> Result<BandResult> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidData(format!("coverage level must lie in (0, 1), got {level}")));
    }
    let crit = gumbel_critical(curve.h, 1.0 - level)?;
    let layout = ParamLayout::from_spec(spec);
    let k = free_index(&layout, coefficient)?;
    let mode = if debias {
        BiasMode::PilotCurvature(2.0 * curve.h)
    } else {
        BiasMode::Undersmooth
    };
    let cc = cov_curve(spec, curve, data, mode)?;

    let n_grid = curve.grid.len();
    let mut estimate = Vec::with_capacity(n_grid);
    let mut lower = Vec::with_capacity(n_grid);
    let mut upper = Vec::with_capacity(n_grid);
    for g in 0..n_grid {
        let raw = curve.points[g].coef(coefficient);
        let mut var = cc.cov[g][(2 * k, 2 * k)];
        let mut bias = cc.bias[g][k];
        let value = reporting_value(coefficient, raw);
        if matches!(coefficient, CoefId::LogDelta { .. }) {
            var *= value * value;
            bias *= value;
        }
        let centre = value - bias;
        let half = crit * var.sqrt();
        estimate.push(centre);
        lower.push(centre - half);
        upper.push(centre + half);
    }
    Ok(BandResult {
        coefficient,
        grid: curve.grid.clone(),
        estimate,
        lower,
        upper,
        critical_value: crit,
        level,
        method: BandMethod::Asymptotic,
        debias,
        h_used: curve.h,
    })
}

/// Per-observation sampling parameters of the fitted conditional density,
/// precomputed once so each bootstrap replicate only draws responses.
struct ResponseSampler {
    /// Cumulative gate probabilities, one row per observation.
    cum: Array2<f64>,
    /// Gaussian means or Binomial success probabilities per class.
    location: Array2<f64>,
    /// Gaussian standard deviations; empty for binomial experts.
    scale: Array2<f64>,
    trials: Option<u32>,
}

impl ResponseSampler {
    fn new(spec: &ModelSpec, curve: &ThetaCurve, data: &Dataset) -> Result<Self> {
        let n = data.n();
        let c = spec.n_components;
        let mut cum = Array2::zeros((n, c));
        let mut location = Array2::zeros((n, c));
        let (mut scale, trials) = match spec.expert {
            ExpertFamily::Gaussian => (Array2::zeros((n, c)), None),
            ExpertFamily::Binomial { trials } => (Array2::zeros((0, 0)), Some(trials)),
        };
        for i in 0..n {
            let theta = evaluate_curve(curve, data.u[i])?;
            let gates = gate_probs(spec, &theta, data.x.row(i));
            let mut acc = 0.0;
            for cls in 0..c {
                acc += gates[cls];
                cum[(i, cls)] = acc;
                let mut lin = 0.0;
                for j in 0..spec.p_z {
                    lin += theta.alpha[(cls, j)] * data.z[(i, j)];
                }
                match spec.expert {
                    ExpertFamily::Gaussian => {
                        location[(i, cls)] = lin;
                        scale[(i, cls)] = theta.delta(cls);
                    }
                    ExpertFamily::Binomial { .. } => {
                        location[(i, cls)] = expit(lin);
                    }
                }
            }
        }
        Ok(ResponseSampler { cum, location, scale, trials })
    }

    fn draw_into(&self, rng: &mut ChaCha8Rng, y: &mut Array1<f64>) {
        let c = self.cum.ncols();
        for i in 0..y.len() {
            let v: f64 = rng.gen();
            let mut cls = c - 1;
            for k in 0..c {
                if v <= self.cum[(i, k)] {
                    cls = k;
                    break;
                }
            }
            y[i] = match self.trials {
                None => {
                    let e: f64 = rand_distr::StandardNormal.sample(rng);
                    self.location[(i, cls)] + self.scale[(i, cls)] * e
                }
                Some(m) => {
                    let p = self.location[(i, cls)].clamp(0.0, 1.0);
                    rand_distr::Binomial::new(u64::from(m), p)
                        .expect("probability is in [0, 1]")
                        .sample(rng) as f64
                }
            };
        }
    }
}

/// Independent reproducible generator for one bootstrap replicate.
fn replicate_rng(seed: u64, replicate: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replicate + 1);
    rng
}

/// Resample responses, refit, and extract each coefficient's grid values
/// on the reporting scale. `None` marks a failed replicate.
fn bootstrap_replicate(
    spec: &ModelSpec,
    data: &Dataset,
    sampler: &ResponseSampler,
    config: &FitConfig,
    coefficients: &[CoefId],
    seed: u64,
    replicate: u64,
) -> Option<Vec<Vec<f64>>> {
    let mut rng = replicate_rng(seed, replicate);
    let mut y = Array1::zeros(data.n());
    sampler.draw_into(&mut rng, &mut y);
    let ds = Dataset::new(data.u.clone(), data.x.clone(), data.z.clone(), y).ok()?;
    let fitted = fit_vcmoe(spec, &ds, config).ok()?;
    Some(
        coefficients
            .iter()
            .map(|c| fitted.points.iter().map(|p| reporting_value(*c, p.coef(*c))).collect())
            .collect(),
    )
}

/// Warm-started refit configuration for bootstrap replicates: same
/// bandwidth and grid as the base fit, started at the base curve with a
/// short iteration cap.
fn warm_config(base: &FitConfig, warm: &ThetaCurve) -> FitConfig {
    let mut config = base.clone();
    config.max_iter = BOOT_MAX_ITER;
    config.init = InitStrategy::Provided {
        gamma: warm.responsibilities.clone(),
        points: Some(warm.points.clone()),
    };
    config
}

/// Run `m1 + m2` bootstrap replicates once for every coefficient: the
/// first block feeds the pointwise variances, the second the sup
/// statistics. Returns per-coefficient floored standard deviations, the
/// second block's per-replicate values (coefficient-major inside each
/// replicate), and the failure count; fails when more than
/// [`MAX_FAILURE_PCT`] percent of all replicates are unusable.
fn bootstrap_blocks(
    spec: &ModelSpec,
    data: &Dataset,
    sampler: &ResponseSampler,
    config: &FitConfig,
    coefficients: &[CoefId],
    m1: usize,
    m2: usize,
    seed: u64,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>, usize)> {
    let runs: Vec<Option<Vec<Vec<f64>>>> = (0..m1 + m2)
        .into_par_iter()
        .map(|k| bootstrap_replicate(spec, data, sampler, config, coefficients, seed, k as u64))
        .collect();
    let mut failed = runs.iter().filter(|r| r.is_none()).count();

    let var_block: Vec<&Vec<Vec<f64>>> = runs[..m1].iter().flatten().collect();
    let sup_block: Vec<Vec<Vec<f64>>> = runs[m1..].iter().flatten().cloned().collect();
    let total = m1 + m2;
    // The variance needs at least two usable replicates; with the minimum
    // replicate count the failure gate already guarantees that.
    if failed * 100 > total * MAX_FAILURE_PCT || var_block.len() < 2 {
        return Err(Error::TooManyFailures { failed, total, limit_pct: MAX_FAILURE_PCT as u32 });
    }

    let n_grid = config.grid.len();
    let mut sd = Vec::with_capacity(coefficients.len());
    for k in 0..coefficients.len() {
        let mut sd_k = Vec::with_capacity(n_grid);
        for g in 0..n_grid {
            let mean = var_block.iter().map(|v| v[k][g]).sum::<f64>() / var_block.len() as f64;
            let ss = var_block.iter().map(|v| (v[k][g] - mean).powi(2)).sum::<f64>();
            let var = ss / (var_block.len() - 1) as f64;
            sd_k.push(var.max(f64::MIN_POSITIVE).sqrt());
        }
        sd.push(sd_k);
    }

    // A replicate that produced a non-finite value anywhere counts as
    // failed too; the refit behind it is shared by every coefficient.
    let mut clean = Vec::with_capacity(sup_block.len());
    for v in sup_block {
        if v.iter().all(|curve| curve.iter().all(|x| x.is_finite())) {
            clean.push(v);
        } else {
            failed += 1;
        }
    }
    if failed * 100 > total * MAX_FAILURE_PCT || clean.is_empty() {
        return Err(Error::TooManyFailures { failed, total, limit_pct: MAX_FAILURE_PCT as u32 });
    }
    Ok((sd, clean, failed))
}

/// Upper-`eta` empirical quantile of a sorted ascending sample: the
/// `ceil((1 - eta) s)`-th order statistic.
fn sorted_upper_quantile(sorted: &[f64], eta: f64) -> f64 {
    let s = sorted.len();
    let idx = ((1.0 - eta) * s as f64).ceil() as usize;
    sorted[idx.clamp(1, s) - 1]
}

/// Upper-`eta` empirical quantile; sorts in place.
fn upper_quantile(values: &mut Vec<f64>, eta: f64) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite statistics"));
    sorted_upper_quantile(values, eta)
}

/// Simultaneous bootstrap bands for several coefficient functions at
/// several coverage levels from a single resampling pass. Responses are
/// resampled from the fitted conditional density with covariates and
/// index fixed; `m1` replicates estimate the pointwise variances, `m2`
/// further replicates the sup-deviation quantiles, and every refit is
/// shared across coefficients and levels. Replicate generators derive
/// from `(seed, replicate index)`, so results do not depend on thread
/// order. Results are coefficient-major: the band for `coefficients[c]`
/// at `levels[l]` sits at index `c * levels.len() + l`.
pub fn bootstrap_bands(
    spec: &ModelSpec,
    curve: &ThetaCurve,
    data: &Dataset,
    coefficients: &[CoefId],
    levels: &[f64],
    m1: usize,
    m2: usize,
    seed: u64,
) -> Result<Vec<BandResult>> {
    if m1 < MIN_REPLICATES {
        return Err(Error::TooFewReplicates { given: m1, need: MIN_REPLICATES });
    }
    if m2 < MIN_REPLICATES {
        return Err(Error::TooFewReplicates { given: m2, need: MIN_REPLICATES });
    }
    if coefficients.is_empty() || levels.is_empty() {
        return Err(Error::InvalidData("need at least one coefficient and level".into()));
    }
    for &level in levels {
        if !(level > 0.0 && level < 1.0) {
            return Err(Error::InvalidData(format!(
                "coverage level must lie in (0, 1), got {level}"
            )));
        }
    }
    let layout = ParamLayout::from_spec(spec);
    for &coefficient in coefficients {
        free_index(&layout, coefficient)?;
    }

    let sampler = ResponseSampler::new(spec, curve, data)?;
    let mut base_config = FitConfig::new(curve.h);
    base_config.grid = curve.grid.clone();
    let config = warm_config(&base_config, curve);
    let (sd, sup_block, _failed) =
        bootstrap_blocks(spec, data, &sampler, &config, coefficients, m1, m2, seed)?;

    let mut bands = Vec::with_capacity(coefficients.len() * levels.len());
    for (k, &coefficient) in coefficients.iter().enumerate() {
        let base: Vec<f64> = curve
            .points
            .iter()
            .map(|p| reporting_value(coefficient, p.coef(coefficient)))
            .collect();
        let mut sups: Vec<f64> = sup_block
            .iter()
            .map(|v| {
                (0..base.len())
                    .map(|g| (v[k][g] - base[g]).abs() / sd[k][g])
                    .fold(0.0f64, f64::max)
            })
            .collect();
        sups.sort_by(|a, b| a.partial_cmp(b).expect("finite statistics"));
        for &level in levels {
            let crit = sorted_upper_quantile(&sups, 1.0 - level);
            let lower: Vec<f64> =
                (0..base.len()).map(|g| base[g] - crit * sd[k][g]).collect();
            let upper: Vec<f64> =
                (0..base.len()).map(|g| base[g] + crit * sd[k][g]).collect();
            bands.push(BandResult {
                coefficient,
                grid: curve.grid.clone(),
                estimate: base.clone(),
                lower,
                upper,
                critical_value: crit,
                level,
                method: BandMethod::Bootstrap,
                debias: false,
                h_used: curve.h,
            });
        }
    }
    Ok(bands)
}

/// Simultaneous bootstrap band for one coefficient function at coverage
/// `level`; see [`bootstrap_bands`] for the resampling scheme.
pub fn bootstrap_band(
    spec: &ModelSpec,
    curve: &ThetaCurve,
    data: &Dataset,
    coefficient: CoefId,
    level: f64,
    m1: usize,
    m2: usize,
    seed: u64,
) -> Result<BandResult> {
    let mut bands = bootstrap_bands(spec, curve, data, &[coefficient], &[level], m1, m2, seed)?;
    Ok(bands.pop().expect("one coefficient and one level yield one band"))
}

/// Sup test of coefficient constancy against the Gumbel-type critical
/// value at significance `level`: the statistic is the largest absolute
/// standardized deviation of the functional estimate from the constant
/// fit, after subtracting the plug-in bias at pilot bandwidth `2 h`. Only
/// the decision is calibrated, so no p-value is reported.
pub fn test_constancy_asymptotic(
    spec: &ModelSpec,
    data: &Dataset,
    config: &FitConfig,
    coefficient: CoefId,
    level: f64,
) -> Result<TestResult> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidData(format!(
            "significance level must lie in (0, 1), got {level}"
        )));
    }
    let crit = gumbel_critical(config.h, level)?;
    let curve = fit_vcmoe(spec, data, config)?;
    let (constant, _) = fit_constant(spec, data, config, coefficient)?;
    let layout = ParamLayout::from_spec(spec);
    let k = free_index(&layout, coefficient)?;
    let cc = cov_curve(spec, &curve, data, BiasMode::PilotCurvature(2.0 * config.h))?;

    let mut statistic = 0.0f64;
    for g in 0..curve.grid.len() {
        let dev = curve.points[g].coef(coefficient) - constant - cc.bias[g][k];
        let sd = cc.cov[g][(2 * k, 2 * k)].max(f64::MIN_POSITIVE).sqrt();
        statistic = statistic.max(dev.abs() / sd);
    }
    Ok(TestResult {
        coefficients: vec![coefficient],
        statistic,
        reference: TestReference::GumbelCritical(crit),
        p_value: None,
        reject: statistic > crit,
        level,
        method: TestMethod::AsymptoticSup,
    })
}

/// Bootstrap test of coefficient constancy at significance `level`.
/// Responses are resampled from the constant-coefficient fit, each
/// replicate is refitted with the coefficient functional, and the observed
/// sup deviation from the constant is compared against the resampled sup
/// distribution. The p-value is the exceedance fraction.
pub fn test_constancy_bootstrap(
    spec: &ModelSpec,
    data: &Dataset,
    config: &FitConfig,
    coefficient: CoefId,
    level: f64,
    m1: usize,
    m2: usize,
    seed: u64,
) -> Result<TestResult> {
    if m1 < MIN_REPLICATES {
        return Err(Error::TooFewReplicates { given: m1, need: MIN_REPLICATES });
    }
    if m2 < MIN_REPLICATES {
        return Err(Error::TooFewReplicates { given: m2, need: MIN_REPLICATES });
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidData(format!(
            "significance level must lie in (0, 1), got {level}"
        )));
    }
    let layout = ParamLayout::from_spec(spec);
    free_index(&layout, coefficient)?;

    let (constant, null_curve) = fit_constant(spec, data, config, coefficient)?;
    // Everything below lives on the reporting scale, like the replicate
    // extraction: dispersions are compared as dispersions.
    let constant = reporting_value(coefficient, constant);
    let functional = fit_vcmoe(spec, data, config)?;
    let sampler = ResponseSampler::new(spec, &null_curve, data)?;
    let replicate_config = warm_config(config, &null_curve);
    let (sd, sup_block, _failed) =
        bootstrap_blocks(spec, data, &sampler, &replicate_config, &[coefficient], m1, m2, seed)?;
    let sd = &sd[0];

    let sup_of = |values: &[f64]| -> f64 {
        (0..values.len())
            .map(|g| (values[g] - constant).abs() / sd[g])
            .fold(0.0f64, f64::max)
    };
    let observed: Vec<f64> = functional
        .points
        .iter()
        .map(|p| reporting_value(coefficient, p.coef(coefficient)))
        .collect();
    let statistic = sup_of(&observed);
    let mut sups: Vec<f64> = sup_block.iter().map(|v| sup_of(&v[0])).collect();
    let exceed = sups.iter().filter(|&&t| t >= statistic).count();
    let p_value = exceed as f64 / sups.len() as f64;
    let crit = upper_quantile(&mut sups, level);

    Ok(TestResult {
        coefficients: vec![coefficient],
        statistic,
        reference: TestReference::BootstrapQuantile(crit),
        p_value: Some(p_value),
        reject: statistic > crit,
        level,
        method: TestMethod::Bootstrap,
    })
}

/// Effective degrees of freedom of the likelihood ratio under constancy of
/// `targets`: `r_K m (K(0) - tau / 2) / h`, where each distinct gating
/// column counts once per mixture component and every expert or dispersion
/// target counts once.
pub fn glrt_dof(spec: &ModelSpec, targets: &[CoefId], h: f64) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::NonPositiveBandwidth(h));
    }
    if targets.is_empty() {
        return Err(Error::InvalidData("constancy test needs at least one coefficient".into()));
    }
    let mut beta_cols = BTreeSet::new();
    let mut units = 0.0;
    for t in targets {
        match t {
            CoefId::Beta { col, .. } => {
                beta_cols.insert(*col);
            }
            _ => units += 1.0,
        }
    }
    units += (beta_cols.len() * spec.n_components) as f64;
    let kc = KernelSpec::epanechnikov().constants();
    Ok(kc.r_k * units * (kc.k0 - 0.5 * kc.tau) / h)
}

/// Survival function of a chi-square with real-valued degrees of freedom,
/// evaluated through the Gamma(dof / 2, rate 1/2) representation.
fn chi_sq_survival(statistic: f64, dof: f64) -> Result<f64> {
    let gamma = statrs::distribution::Gamma::new(dof / 2.0, 0.5)
        .map_err(|e| Error::InvalidData(format!("chi-square reference: {e}")))?;
    Ok(gamma.sf(statistic))
}

/// Likelihood ratio test of joint constancy of `targets` at significance
/// `level`. The constrained fit seeds the unconstrained one, so the raw
/// ratio is nonnegative; the reported statistic is the kernel-normalized
/// ratio, compared against a chi-square with real-valued degrees of
/// freedom.
pub fn test_constancy_glrt(
    spec: &ModelSpec,
    data: &Dataset,
    config: &FitConfig,
    targets: &[CoefId],
    level: f64,
) -> Result<TestResult> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidData(format!(
            "significance level must lie in (0, 1), got {level}"
        )));
    }
    let dof = glrt_dof(spec, targets, config.h)?;
    let constrained_spec = spec.clone().with_constant(targets)?;
    let constrained = fit_vcmoe(&constrained_spec, data, config)?;
    let mut config_alt = config.clone();
    config_alt.init = InitStrategy::Provided {
        gamma: constrained.responsibilities.clone(),
        points: Some(constrained.points.clone()),
    };
    let unconstrained = fit_vcmoe(spec, data, &config_alt)?;

    let n = data.n() as f64;
    let lambda = (n * (unconstrained.mean_loglik() - constrained.mean_loglik())).max(0.0);
    let kc = KernelSpec::epanechnikov().constants();
    let statistic = kc.r_k * lambda;
    let p = chi_sq_survival(statistic, dof)?;
    Ok(TestResult {
        coefficients: targets.to_vec(),
        statistic,
        reference: TestReference::ChiSq { dof },
        p_value: Some(p),
        reject: p < level,
        level,
        method: TestMethod::Glrt,
    })
}
