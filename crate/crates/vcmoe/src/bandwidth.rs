//! Bandwidth selection by leave-one-out likelihood cross-validation.
//!
//! The score of a candidate bandwidth is the summed held-out log mixture
//! density over all observations. Each leave-one-out refit is warm-started
//! from the full-data curve, so a fold costs a handful of EM iterations
//! rather than a cold fit.

use ndarray::Axis;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit::{evaluate_curve, fit_vcmoe, Dataset, FitConfig, InitStrategy};
use crate::model::{mixture_log_density, ModelSpec, Responsibilities};

/// Cap on EM iterations per leave-one-out refit. Warm starts from the
/// full-data curve typically converge in one to three passes.
const MAX_LOO_ITER: usize = 20;

/// Outcome of a cross-validation sweep over candidate bandwidths.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvReport {
    /// Candidate bandwidths in the order supplied.
    pub candidates: Vec<f64>,
    /// Cross-validated log likelihood per candidate; `None` when the
    /// candidate produced no usable folds at all.
    pub scores: Vec<Option<f64>>,
    /// The candidate with the highest score. Exact ties resolve toward
    /// the larger, smoother bandwidth.
    pub best_h: f64,
    /// Skipped leave-one-out folds per candidate. A candidate whose
    /// full-data fit fails outright is recorded as `n` skipped folds.
    pub per_fold_failures: Vec<usize>,
}

/// Leave-one-out cross-validated log likelihood at bandwidth `h`.
///
/// Fits the full data once, then for each observation refits on the
/// remaining rows warm-started from the full-data curve and accumulates
/// the held-out log mixture density evaluated at that observation's
/// index point. Folds whose refit fails are skipped; the sum over the
/// surviving folds is returned.
pub fn cv_score(spec: &ModelSpec, data: &Dataset, h: f64, config: &FitConfig) -> Result<f64> {
    cv_score_counted(spec, data, h, config).map(|(score, _)| score)
}

/// As [`cv_score`], also reporting how many folds were skipped.
pub(crate) fn cv_score_counted(
    spec: &ModelSpec,
    data: &Dataset,
    h: f64,
    config: &FitConfig,
) -> Result<(f64, usize)> {
    let n = data.n();
    if n < 3 {
        return Err(Error::InsufficientData(n));
    }
    let mut full_config = config.clone();
    full_config.h = h;
    let full = fit_vcmoe(spec, data, &full_config)?;

    let mut fold_config = full_config.clone();
    fold_config.max_iter = full_config.max_iter.min(MAX_LOO_ITER);

    let mut score = 0.0;
    let mut skipped = 0usize;
    for i in 0..n {
        match loo_fold(spec, data, &full, &fold_config, i) {
            Ok(term) if term.is_finite() => score += term,
            _ => skipped += 1,
        }
    }
    if skipped == n {
        return Err(Error::AllFoldsFailed(h));
    }
    Ok((score, skipped))
}

/// Held-out log mixture density of observation `i` under the model
/// refitted without it, warm-started from the full-data fit.
fn loo_fold(
    spec: &ModelSpec,
    data: &Dataset,
    full: &crate::fit::ThetaCurve,
    fold_config: &FitConfig,
    i: usize,
) -> Result<f64> {
    let keep: Vec<usize> = (0..data.n()).filter(|&j| j != i).collect();
    let gamma = Responsibilities::new(full.responsibilities.gamma.select(Axis(0), &keep))?;
    let config = FitConfig {
        init: InitStrategy::Provided { gamma, points: Some(full.points.clone()) },
        ..fold_config.clone()
    };
    let curve = fit_vcmoe(spec, &data.without(i), &config)?;
    let theta = evaluate_curve(&curve, data.u[i])?;
    mixture_log_density(spec, &theta, data.x.row(i), data.z.row(i), data.y[i])
}

/// Score every candidate bandwidth and pick the best.
///
/// Candidates are evaluated independently, possibly in parallel; the
/// report lists them in the order supplied and the result is identical
/// for any thread count. Errors only when no candidate yields a usable
/// score, in which case the first candidate's failure is returned.
pub fn select_bandwidth(
    spec: &ModelSpec,
    data: &Dataset,
    candidates: &[f64],
    config: &FitConfig,
) -> Result<CvReport> {
    if candidates.is_empty() {
        return Err(Error::InvalidData("bandwidth candidate list is empty".into()));
    }
    if let Some(&bad) = candidates.iter().find(|h| !h.is_finite() || **h <= 0.0) {
        return Err(Error::NonPositiveBandwidth(bad));
    }

    let outcomes: Vec<Result<(f64, usize)>> = candidates
        .par_iter()
        .map(|&h| cv_score_counted(spec, data, h, config))
        .collect();

    let mut scores = Vec::with_capacity(candidates.len());
    let mut failures = Vec::with_capacity(candidates.len());
    let mut first_err = None;
    for outcome in outcomes {
        match outcome {
            Ok((score, skipped)) => {
                scores.push(Some(score));
                failures.push(skipped);
            }
            Err(e) => {
                scores.push(None);
                failures.push(data.n());
                if first_err.is_none() {
                    first_err = Some(e);
                }
            }
        }
    }

    match pick_best(candidates, &scores) {
        Some(best_h) => Ok(CvReport {
            candidates: candidates.to_vec(),
            scores,
            best_h,
            per_fold_failures: failures,
        }),
        None => Err(first_err.expect("no best candidate implies at least one error")),
    }
}

/// Highest-scoring candidate, preferring the larger bandwidth on ties.
fn pick_best(candidates: &[f64], scores: &[Option<f64>]) -> Option<f64> {
    let mut best: Option<(f64, f64)> = None;
    for (&h, score) in candidates.iter().zip(scores) {
        if let Some(s) = *score {
            let take = match best {
                None => true,
                Some((bh, bs)) => s > bs || (s == bs && h > bh),
            };
            if take {
                best = Some((h, s));
            }
        }
    }
    best.map(|(h, _)| h)
}

/// Default candidate set: ten log-spaced bandwidths in `[h0 / 2, 2 h0]`
/// around the normal reference rule `h0 = 1.06 sd(u) n^(-1/5)`.
pub fn default_candidates(data: &Dataset) -> Result<Vec<f64>> {
    let n = data.n();
    if n < 3 {
        return Err(Error::InsufficientData(n));
    }
    let nf = n as f64;
    let mean = data.u.iter().sum::<f64>() / nf;
    let var = data.u.iter().map(|&v| (v - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    let h0 = 1.06 * var.sqrt() * nf.powf(-0.2);
    if !h0.is_finite() || h0 <= 0.0 {
        return Err(Error::DegenerateIndex(mean));
    }
    Ok(log_spaced(0.5 * h0, 2.0 * h0, 10))
}

/// `m` points equally spaced on the log scale from `lo` to `hi` inclusive.
fn log_spaced(lo: f64, hi: f64, m: usize) -> Vec<f64> {
    debug_assert!(m >= 2 && lo > 0.0 && hi > lo);
    let (la, lb) = (lo.ln(), hi.ln());
    (0..m)
        .map(|k| {
            let t = k as f64 / (m - 1) as f64;
            (la + t * (lb - la)).exp()
        })
        .collect()
}
