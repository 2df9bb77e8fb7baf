//! Synthetic benchmark scenarios, the root-average-squared-error metric,
//! and the replication-study driver that aggregates fits, band coverage,
//! constancy-test null samples, and constant-coefficient estimates.

use std::f64::consts::PI;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit::{fit_vcmoe, Dataset, FitConfig, ThetaCurve};
use crate::inference::{
    asymptotic_band, bootstrap_bands, glrt_dof, test_constancy_glrt, BandMethod, BandResult,
};
use crate::model::{expit, gate_probs, CoefId, ExpertFamily, GatingForm, ModelSpec, ThetaPoint};

/// Percentage of failed replicate fits a study tolerates before erroring.
const MAX_FAILURE_PCT: usize = 10;

/// Lattice size for the third scenario's index variable.
const LATTICE_NODES: usize = 20;

/// Which benchmark scenario to generate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScenarioId {
    /// Two Gaussian experts behind a logistic gate, u ~ U(0, 1).
    Sim1,
    /// Two Binomial experts (100 trials each) behind a logistic gate.
    Sim2,
    /// Three Gaussian experts behind a softmax gate, u uniform on a
    /// 20-point lattice in [0, 1].
    Sim3,
}

/// A benchmark scenario: closed-form coefficient functions together with
/// the sampling design they drive.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub id: ScenarioId,
    /// Sample size per replicate.
    pub n: usize,
    /// Base seed; replicate seeds derive from it.
    pub seed: u64,
    /// Optional constant override for the gating coefficients, row-major
    /// over the non-reference gate rows; drives the constancy-test null
    /// and root-n rate studies.
    pub constant_gate: Option<Vec<f64>>,
}

impl ScenarioSpec {
    /// Two Gaussian experts with a logistic gate.
    pub fn sim1(n: usize, seed: u64) -> Self {
        ScenarioSpec { id: ScenarioId::Sim1, n, seed, constant_gate: None }
    }

    /// Two Binomial experts (100 trials) with a logistic gate.
    pub fn sim2(n: usize, seed: u64) -> Self {
        ScenarioSpec { id: ScenarioId::Sim2, n, seed, constant_gate: None }
    }

    /// Three Gaussian experts with a softmax gate on the index lattice.
    pub fn sim3(n: usize, seed: u64) -> Self {
        ScenarioSpec { id: ScenarioId::Sim3, n, seed, constant_gate: None }
    }

    /// Replace the gating functions with constants, one value per gate
    /// coefficient in class-major order.
    pub fn with_constant_gate(mut self, values: Vec<f64>) -> Result<Self> {
        let spec = self.model_spec();
        let need = (spec.n_components - 1) * spec.p_x;
        if values.len() != need {
            return Err(Error::LengthMismatch { left: values.len(), right: need });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("constant gate values must be finite".into()));
        }
        self.constant_gate = Some(values);
        Ok(self)
    }

    /// Model shape matching the scenario's generator.
    pub fn model_spec(&self) -> ModelSpec {
        let built = match self.id {
            ScenarioId::Sim1 => {
                ModelSpec::new(2, ExpertFamily::Gaussian, GatingForm::Logistic, 2, 2)
            }
            ScenarioId::Sim2 => ModelSpec::new(
                2,
                ExpertFamily::Binomial { trials: 100 },
                GatingForm::Logistic,
                2,
                2,
            ),
            ScenarioId::Sim3 => {
                ModelSpec::new(3, ExpertFamily::Gaussian, GatingForm::Softmax, 2, 2)
            }
        };
        built.expect("scenario dimensions are valid")
    }

    /// Coefficient-function table in canonical model order.
    pub fn coefficients(&self) -> Vec<CoefId> {
        self.model_spec().coef_ids()
    }
}

/// Closed-form truth for one coefficient function at index `u`.
/// Dispersion truths come back on the dispersion scale, matching how
/// fits report them.
pub fn coefficient_truth(scenario: &ScenarioSpec, name: CoefId, u: f64) -> Result<f64> {
    let spec = scenario.model_spec();
    spec.coef_index(name).map_err(|_| Error::UnknownCoefficient(spec.coef_name(name)))?;
    if let CoefId::Beta { class, col } = name {
        if let Some(values) = &scenario.constant_gate {
            return Ok(values[class * spec.p_x + col]);
        }
    }
    let value = match scenario.id {
        ScenarioId::Sim1 => sim1_truth(name, u),
        ScenarioId::Sim2 => sim2_truth(name, u),
        ScenarioId::Sim3 => sim3_truth(name, u),
    };
    value.ok_or_else(|| Error::UnknownCoefficient(spec.coef_name(name)))
}

fn sim1_truth(name: CoefId, u: f64) -> Option<f64> {
    let w = 2.0 * PI * u;
    Some(match name {
        CoefId::Beta { class: 0, col: 0 } => -0.4 + u,
        CoefId::Beta { class: 0, col: 1 } => 0.9 - 1.2 * u,
        CoefId::Alpha { class: 0, col: 0 } => -0.5 + 0.6 * w.cos(),
        CoefId::Alpha { class: 0, col: 1 } => 1.0 + 0.6 * w.sin(),
        CoefId::Alpha { class: 1, col: 0 } => 0.5 + 0.6 * w.cos(),
        CoefId::Alpha { class: 1, col: 1 } => 2.0 + 0.6 * w.sin(),
        CoefId::LogDelta { class: 0 } => 0.85 + 0.35 * w.cos(),
        CoefId::LogDelta { class: 1 } => 1.85 + 0.35 * w.cos(),
        _ => return None,
    })
}

fn sim2_truth(name: CoefId, u: f64) -> Option<f64> {
    let w = 2.0 * PI * u;
    Some(match name {
        CoefId::Beta { class: 0, col: 0 } => -0.4 + u,
        CoefId::Beta { class: 0, col: 1 } => 0.9 - 1.2 * u,
        CoefId::Alpha { class: 0, col: 0 } => -0.5 + 0.1 * w.cos(),
        CoefId::Alpha { class: 0, col: 1 } => 1.0 + 0.1 * w.sin(),
        CoefId::Alpha { class: 1, col: 0 } => 0.1 * w.cos(),
        CoefId::Alpha { class: 1, col: 1 } => 1.5 + 0.1 * w.sin(),
        _ => return None,
    })
}

fn sim3_truth(name: CoefId, u: f64) -> Option<f64> {
    let w = 2.0 * PI * u;
    Some(match name {
        CoefId::Beta { class: 0, col: 0 } => 0.4 - 1.3 * u,
        CoefId::Beta { class: 0, col: 1 } => 0.1 + 1.2 * w.cos(),
        CoefId::Beta { class: 1, col: 0 } => 0.9 - 1.2 * u,
        CoefId::Beta { class: 1, col: 1 } => -0.5 + 0.7 * w.cos(),
        CoefId::Alpha { class: 0, col: 0 } => -0.5 + 0.6 * w.cos(),
        CoefId::Alpha { class: 0, col: 1 } => 1.0 + 0.6 * w.sin(),
        CoefId::Alpha { class: 1, col: 0 } => 0.5 + 0.6 * w.cos(),
        CoefId::Alpha { class: 1, col: 1 } => 1.5 + 0.6 * w.sin(),
        CoefId::Alpha { class: 2, col: 0 } => 1.0 + 0.6 * w.cos(),
        CoefId::Alpha { class: 2, col: 1 } => 2.0 + 0.6 * w.sin(),
        // All three classes share one dispersion function.
        CoefId::LogDelta { class: 0 | 1 | 2 } => (0.35 * u * u).exp(),
        _ => return None,
    })
}

/// Truth parameters at `u` packed as a model point: values only, slopes
/// zero, dispersions moved to the log scale the model stores.
fn truth_point(scenario: &ScenarioSpec, spec: &ModelSpec, u: f64) -> Result<ThetaPoint> {
    let mut theta = ThetaPoint::zeros(spec);
    for id in spec.coef_ids() {
        let value = coefficient_truth(scenario, id, u)?;
        *theta.coef_mut(id) = match id {
            CoefId::LogDelta { .. } => value.ln(),
            _ => value,
        };
    }
    Ok(theta)
}

/// One generated dataset plus the class labels that produced it; labels
/// stay outside the dataset so fits never see them.
#[derive(Debug, Clone)]
pub struct SimulatedDraw {
    pub data: Dataset,
    pub labels: Vec<usize>,
}

/// Draw `n` observations from the scenario's data-generating process.
/// Designs get an explicit leading intercept column; the remaining
/// covariates are standard normal. Deterministic per seed.
pub fn generate(scenario: &ScenarioSpec, n: usize, seed: u64) -> Result<SimulatedDraw> {
    if n == 0 {
        return Err(Error::InvalidData("sample size must be positive".into()));
    }
    let spec = scenario.model_spec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u = Array1::zeros(n);
    let mut x = Array2::zeros((n, spec.p_x));
    let mut z = Array2::zeros((n, spec.p_z));
    let mut y = Array1::zeros(n);
    let mut labels = vec![0usize; n];
    for i in 0..n {
        u[i] = match scenario.id {
            ScenarioId::Sim3 => {
                rng.gen_range(0..LATTICE_NODES) as f64 / (LATTICE_NODES - 1) as f64
            }
            _ => rng.gen(),
        };
        x[[i, 0]] = 1.0;
        for j in 1..spec.p_x {
            x[[i, j]] = rng.sample(StandardNormal);
        }
        z[[i, 0]] = 1.0;
        for j in 1..spec.p_z {
            z[[i, j]] = rng.sample(StandardNormal);
        }
        let theta = truth_point(scenario, &spec, u[i])?;
        let gates = gate_probs(&spec, &theta, x.row(i));
        let v: f64 = rng.gen();
        let mut class = spec.n_components - 1;
        let mut cum = 0.0;
        for (c, g) in gates.iter().enumerate() {
            cum += g;
            if v < cum {
                class = c;
                break;
            }
        }
        labels[i] = class;
        let eta: f64 =
            theta.alpha.row(class).iter().zip(z.row(i).iter()).map(|(a, w)| a * w).sum();
        y[i] = match spec.expert {
            ExpertFamily::Gaussian => {
                let noise: f64 = rng.sample(StandardNormal);
                eta + theta.log_delta[class].exp() * noise
            }
            ExpertFamily::Binomial { trials } => {
                let p = expit(eta);
                let counts = Binomial::new(u64::from(trials), p)
                    .map_err(|e| Error::InvalidData(format!("binomial draw: {e}")))?;
                counts.sample(&mut rng) as f64
            }
        };
    }
    Ok(SimulatedDraw { data: Dataset::new(u, x, z, y)?, labels })
}

/// Root average squared error between an estimated curve and truth
/// values on a common grid.
pub fn rase(estimate: &[f64], truth: &[f64]) -> Result<f64> {
    if estimate.len() != truth.len() {
        return Err(Error::LengthMismatch { left: estimate.len(), right: truth.len() });
    }
    if estimate.is_empty() {
        return Err(Error::InvalidData("need at least one grid value".into()));
    }
    let mss = estimate.iter().zip(truth).map(|(e, t)| (e - t) * (e - t)).sum::<f64>()
        / estimate.len() as f64;
    Ok(mss.sqrt())
}

/// All permutations of `0..c`, deterministic order. The study only ever
/// needs c <= 3, so the factorial growth is irrelevant.
fn permutations(c: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut items: Vec<usize> = (0..c).collect();
    permute_into(&mut items, c, &mut out);
    out
}

fn permute_into(items: &mut Vec<usize>, k: usize, out: &mut Vec<Vec<usize>>) {
    if k <= 1 {
        out.push(items.clone());
        return;
    }
    for i in 0..k {
        permute_into(items, k - 1, out);
        let swap = if k % 2 == 0 { i } else { 0 };
        items.swap(swap, k - 1);
    }
}

/// Value of the truth-space coefficient `id` read off a fitted point
/// after relabeling classes by `perm` (`perm[truth class]` = fitted
/// class). Gate rows are re-expressed against the relabeled reference
/// class, which reduces to a sign flip for the two-class logistic gate;
/// dispersions come back on the dispersion scale.
fn aligned_value(spec: &ModelSpec, point: &ThetaPoint, perm: &[usize], id: CoefId) -> f64 {
    match id {
        CoefId::Alpha { class, col } => point.coef(CoefId::Alpha { class: perm[class], col }),
        CoefId::LogDelta { class } => {
            point.coef(CoefId::LogDelta { class: perm[class] }).exp()
        }
        CoefId::Beta { class, col } => {
            let reference = spec.n_components - 1;
            let row = |fitted: usize| {
                if fitted == reference {
                    0.0
                } else {
                    point.beta[[fitted, col]]
                }
            };
            row(perm[class]) - row(perm[reference])
        }
    }
}

/// Fitted values of `id` along the curve grid after label alignment.
fn aligned_curve(spec: &ModelSpec, curve: &ThetaCurve, perm: &[usize], id: CoefId) -> Vec<f64> {
    curve.points.iter().map(|p| aligned_value(spec, p, perm, id)).collect()
}

/// Permutation aligning fitted class labels to truth (index = truth
/// class, value = fitted class), chosen to minimize the summed squared
/// distance between relabeled fitted curves and truth over every
/// coefficient and grid node. Resolves the global label switch that
/// mixture fits are only identified up to.
pub fn align_to_truth(
    scenario: &ScenarioSpec,
    spec: &ModelSpec,
    curve: &ThetaCurve,
) -> Result<Vec<usize>> {
    let ids = spec.coef_ids();
    let mut truth = Vec::with_capacity(ids.len());
    for id in &ids {
        let values: Result<Vec<f64>> =
            curve.grid.iter().map(|&u| coefficient_truth(scenario, *id, u)).collect();
        truth.push(values?);
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for perm in permutations(spec.n_components) {
        let mut score = 0.0;
        for (k, id) in ids.iter().enumerate() {
            for (g, point) in curve.points.iter().enumerate() {
                let d = aligned_value(spec, point, &perm, *id) - truth[k][g];
                score += d * d;
            }
        }
        if best.as_ref().map_or(true, |(s, _)| score < *s) {
            best = Some((score, perm));
        }
    }
    Ok(best.expect("component count is at least one").1)
}

/// Band-coverage stage settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BandStudy {
    /// Truth-space coefficients whose bands are scored.
    pub coefficients: Vec<CoefId>,
    /// Nominal coverage levels.
    pub levels: Vec<f64>,
    pub methods: Vec<BandMethod>,
    /// Bootstrap replicate counts for the variance and sup blocks.
    pub m1: usize,
    pub m2: usize,
    /// Plug-in bias correction for asymptotic bands; off matches the
    /// undersmoothed-bandwidth reading of the coverage experiments.
    pub debias: bool,
}

/// Constancy-test stage settings: which coefficients are held constant
/// under the null and the significance level.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GlrtStudy {
    pub targets: Vec<CoefId>,
    pub level: f64,
}

/// Optional study stages layered on the per-replicate fits.
#[derive(Debug, Clone)]
pub struct StudyConfig {
    /// Template fit settings; `h` is overridden by each study bandwidth.
    pub fit: FitConfig,
    pub bands: Option<BandStudy>,
    pub glrt: Option<GlrtStudy>,
    /// Coefficients jointly held constant in one extra fit per replicate,
    /// with the aligned estimates tracked across replicates.
    pub track_constant: Vec<CoefId>,
}

impl StudyConfig {
    /// Fits only, default settings; the template bandwidth is a
    /// placeholder that `run_study` overrides per candidate.
    pub fn new() -> Self {
        StudyConfig {
            fit: FitConfig::new(0.2),
            bands: None,
            glrt: None,
            track_constant: vec![],
        }
    }
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig::new()
    }
}

/// Mean and spread of RASE for one coefficient at one bandwidth.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RaseEntry {
    pub coefficient: CoefId,
    pub name: String,
    pub mean: f64,
    pub sd: f64,
}

/// RASE summary across successful replicates at a single bandwidth.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RaseTable {
    pub h: f64,
    /// Successful replicates behind every entry.
    pub replicates: usize,
    pub entries: Vec<RaseEntry>,
}

/// Simultaneous-coverage tally for one bandwidth, coefficient, method,
/// and level: `covered` counts replicates whose band contained the truth
/// curve at every grid node, out of `counted` scored replicates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoverageEntry {
    pub h: f64,
    pub coefficient: CoefId,
    pub name: String,
    pub method: BandMethod,
    pub level: f64,
    pub covered: usize,
    pub counted: usize,
}

impl CoverageEntry {
    /// Empirical simultaneous coverage among scored replicates.
    pub fn coverage(&self) -> f64 {
        self.covered as f64 / self.counted as f64
    }
}

/// Null sample of the scaled likelihood-ratio statistic at one bandwidth.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GlrtSample {
    pub h: f64,
    /// Effective degrees of freedom of the reference distribution.
    pub dof: f64,
    pub level: f64,
    /// One statistic per successful replicate, replicate order.
    pub statistics: Vec<f64>,
    pub rejections: usize,
}

/// Constant-coefficient estimates tracked across replicates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConstantSummary {
    pub h: f64,
    pub coefficient: CoefId,
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub count: usize,
}

/// Everything a replication study produces.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyReport {
    pub scenario: ScenarioId,
    pub n: usize,
    pub replicates: usize,
    pub rase: Vec<RaseTable>,
    pub coverage: Vec<CoverageEntry>,
    pub glrt: Vec<GlrtSample>,
    pub constants: Vec<ConstantSummary>,
    /// Failed replicate-bandwidth cells out of `total_runs`; a cell
    /// fails when the fit, alignment, or scoring errors.
    pub failed_runs: usize,
    pub total_runs: usize,
}

/// Per-cell outcome of one replicate at one bandwidth. Band and test
/// stages record `None` where their computation failed without sinking
/// the whole cell; those slots simply drop out of the tallies.
struct CellData {
    rase: Vec<f64>,
    covered: Vec<Option<bool>>,
    glrt: Option<(f64, bool)>,
    constants: Option<Vec<f64>>,
}

/// Run the full replication study: generate one dataset per replicate,
/// fit it at every bandwidth, align labels to truth, and aggregate RASE
/// tables plus any optional stages. Replicates are independent and the
/// aggregation is order-deterministic, so thread count never changes
/// the result.
pub fn run_study(
    scenario: &ScenarioSpec,
    replicates: usize,
    hs: &[f64],
    config: &StudyConfig,
) -> Result<StudyReport> {
    if replicates == 0 {
        return Err(Error::InvalidData("need at least one replicate".into()));
    }
    if hs.is_empty() || hs.iter().any(|h| !h.is_finite() || *h <= 0.0) {
        return Err(Error::InvalidData("bandwidth list must be positive and nonempty".into()));
    }
    if scenario.n == 0 {
        return Err(Error::InvalidData("scenario sample size must be positive".into()));
    }
    let spec = scenario.model_spec();
    let ids = spec.coef_ids();
    if let Some(bands) = &config.bands {
        for id in &bands.coefficients {
            spec.coef_index(*id)?;
        }
        if bands.coefficients.is_empty() || bands.levels.is_empty() || bands.methods.is_empty() {
            return Err(Error::InvalidData("band stage needs coefficients, levels, methods".into()));
        }
    }
    for id in &config.track_constant {
        spec.coef_index(*id)?;
    }

    let cells: Vec<Vec<Option<CellData>>> = (0..replicates)
        .into_par_iter()
        .map(|rep| run_replicate(scenario, &spec, &ids, rep, hs, config))
        .collect();

    let total_runs = replicates * hs.len();
    let failed_runs = cells.iter().flatten().filter(|c| c.is_none()).count();
    if failed_runs * 100 > total_runs * MAX_FAILURE_PCT {
        return Err(Error::TooManyFailures {
            failed: failed_runs,
            total: total_runs,
            limit_pct: MAX_FAILURE_PCT as u32,
        });
    }

    let mut rase_tables = Vec::with_capacity(hs.len());
    let mut coverage = Vec::new();
    let mut glrt_samples = Vec::new();
    let mut constants = Vec::new();
    for (hi, &h) in hs.iter().enumerate() {
        let ok: Vec<&CellData> =
            cells.iter().filter_map(|rep| rep[hi].as_ref()).collect();
        let mut entries = Vec::with_capacity(ids.len());
        for (k, id) in ids.iter().enumerate() {
            let values: Vec<f64> = ok.iter().map(|c| c.rase[k]).collect();
            let (mean, sd) = mean_sd(&values);
            entries.push(RaseEntry { coefficient: *id, name: spec.coef_name(*id), mean, sd });
        }
        rase_tables.push(RaseTable { h, replicates: ok.len(), entries });

        if let Some(bands) = &config.bands {
            let mut slot = 0usize;
            for coef in &bands.coefficients {
                for method in &bands.methods {
                    for &level in &bands.levels {
                        let scored: Vec<bool> =
                            ok.iter().filter_map(|c| c.covered[slot]).collect();
                        coverage.push(CoverageEntry {
                            h,
                            coefficient: *coef,
                            name: spec.coef_name(*coef),
                            method: *method,
                            level,
                            covered: scored.iter().filter(|b| **b).count(),
                            counted: scored.len(),
                        });
                        slot += 1;
                    }
                }
            }
        }
        if let Some(glrt) = &config.glrt {
            let outcomes: Vec<(f64, bool)> = ok.iter().filter_map(|c| c.glrt).collect();
            glrt_samples.push(GlrtSample {
                h,
                dof: glrt_dof(&spec, &glrt.targets, h)?,
                level: glrt.level,
                statistics: outcomes.iter().map(|(s, _)| *s).collect(),
                rejections: outcomes.iter().filter(|(_, r)| *r).count(),
            });
        }
        for (k, id) in config.track_constant.iter().enumerate() {
            let values: Vec<f64> =
                ok.iter().filter_map(|c| c.constants.as_ref().map(|v| v[k])).collect();
            let count = values.len();
            let (mean, sd) = mean_sd(&values);
            constants.push(ConstantSummary {
                h,
                coefficient: *id,
                name: spec.coef_name(*id),
                mean,
                sd,
                count,
            });
        }
    }
    Ok(StudyReport {
        scenario: scenario.id,
        n: scenario.n,
        replicates,
        rase: rase_tables,
        coverage,
        glrt: glrt_samples,
        constants,
        failed_runs,
        total_runs,
    })
}

/// Mean and sample standard deviation; a single value has spread zero.
fn mean_sd(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn run_replicate(
    scenario: &ScenarioSpec,
    spec: &ModelSpec,
    ids: &[CoefId],
    rep: usize,
    hs: &[f64],
    config: &StudyConfig,
) -> Vec<Option<CellData>> {
    // Two independent seeds per replicate, from a stream keyed by the
    // replicate index so draws never overlap across replicates.
    let mut seeds = ChaCha8Rng::seed_from_u64(scenario.seed);
    seeds.set_stream(rep as u64 + 1);
    let data_seed: u64 = seeds.gen();
    let boot_seed: u64 = seeds.gen();
    let draw = match generate(scenario, scenario.n, data_seed) {
        Ok(d) => d,
        Err(_) => return hs.iter().map(|_| None).collect(),
    };
    hs.iter()
        .map(|&h| run_cell(scenario, spec, ids, &draw.data, h, boot_seed, config))
        .collect()
}

fn run_cell(
    scenario: &ScenarioSpec,
    spec: &ModelSpec,
    ids: &[CoefId],
    data: &Dataset,
    h: f64,
    boot_seed: u64,
    config: &StudyConfig,
) -> Option<CellData> {
    let mut fit_config = config.fit.clone();
    fit_config.h = h;
    let curve = fit_vcmoe(spec, data, &fit_config).ok()?;
    let perm = align_to_truth(scenario, spec, &curve).ok()?;

    let mut rase_values = Vec::with_capacity(ids.len());
    for id in ids {
        let estimate = aligned_curve(spec, &curve, &perm, *id);
        let truth: Result<Vec<f64>> =
            curve.grid.iter().map(|&u| coefficient_truth(scenario, *id, u)).collect();
        rase_values.push(rase(&estimate, &truth.ok()?).ok()?);
    }

    let mut covered = Vec::new();
    if let Some(bands) = &config.bands {
        let targets: Vec<Option<(CoefId, bool)>> =
            bands.coefficients.iter().map(|c| band_target(spec, &perm, *c)).collect();
        // One resampling pass serves every bootstrap band at this cell:
        // refits are shared across coefficients and levels.
        let boot: Option<Vec<BandResult>> =
            if bands.methods.iter().any(|m| matches!(m, BandMethod::Bootstrap)) {
                let ids: Vec<CoefId> =
                    targets.iter().flatten().map(|(id, _)| *id).collect();
                if ids.is_empty() {
                    Some(vec![])
                } else {
                    bootstrap_bands(
                        spec,
                        &curve,
                        data,
                        &ids,
                        &bands.levels,
                        bands.m1,
                        bands.m2,
                        boot_seed,
                    )
                    .ok()
                }
            } else {
                None
            };
        let mut batch_pos = Vec::with_capacity(targets.len());
        let mut next = 0usize;
        for t in &targets {
            batch_pos.push(t.as_ref().map(|_| {
                next += 1;
                next - 1
            }));
        }
        for (ci, coef) in bands.coefficients.iter().enumerate() {
            let truth: Option<Vec<f64>> = curve
                .grid
                .iter()
                .map(|&u| coefficient_truth(scenario, *coef, u).ok())
                .collect();
            for method in &bands.methods {
                for (li, &level) in bands.levels.iter().enumerate() {
                    let scored = match (&targets[ci], &truth) {
                        (Some((fitted, flip)), Some(truth)) => match method {
                            BandMethod::Asymptotic => {
                                asymptotic_band(spec, &curve, data, *fitted, level, bands.debias)
                                    .ok()
                                    .map(|b| band_covers(&b, truth, *flip))
                            }
                            BandMethod::Bootstrap => boot.as_ref().and_then(|all| {
                                batch_pos[ci].map(|bp| {
                                    band_covers(&all[bp * bands.levels.len() + li], truth, *flip)
                                })
                            }),
                        },
                        _ => None,
                    };
                    covered.push(scored);
                }
            }
        }
    }

    let glrt = config.glrt.as_ref().and_then(|stage| {
        test_constancy_glrt(spec, data, &fit_config, &stage.targets, stage.level)
            .ok()
            .map(|t| (t.statistic, t.reject))
    });

    let constants = if config.track_constant.is_empty() {
        None
    } else {
        constant_estimates(scenario, spec, data, &fit_config, &config.track_constant)
    };

    Some(CellData { rase: rase_values, covered, glrt, constants })
}

/// Fitted-space coefficient whose band tracks the truth-space `id` under
/// `perm`, plus whether the two-class gate sign flips. `None` when no
/// single fitted coefficient corresponds (softmax gate rows under a
/// nontrivial relabeling).
fn band_target(spec: &ModelSpec, perm: &[usize], id: CoefId) -> Option<(CoefId, bool)> {
    match id {
        CoefId::Alpha { class, col } => Some((CoefId::Alpha { class: perm[class], col }, false)),
        CoefId::LogDelta { class } => Some((CoefId::LogDelta { class: perm[class] }, false)),
        CoefId::Beta { class, col } => {
            if spec.n_components == 2 {
                Some((CoefId::Beta { class: 0, col }, perm[0] == 1))
            } else if perm.iter().enumerate().all(|(i, p)| i == *p) {
                Some((CoefId::Beta { class, col }, false))
            } else {
                None
            }
        }
    }
}

/// Whether the band contains the truth curve at every grid node; `flip`
/// negates the truth to undo a two-class gate relabel.
fn band_covers(band: &BandResult, truth: &[f64], flip: bool) -> bool {
    band.lower.iter().zip(&band.upper).zip(truth).all(|((lo, hi), t)| {
        let t = if flip { -t } else { *t };
        *lo <= t && t <= *hi
    })
}

/// One joint constant-coefficient fit; returns the aligned constant for
/// each tracked coefficient.
fn constant_estimates(
    scenario: &ScenarioSpec,
    spec: &ModelSpec,
    data: &Dataset,
    config: &FitConfig,
    targets: &[CoefId],
) -> Option<Vec<f64>> {
    let constrained = spec.clone().with_constant(targets).ok()?;
    let curve = fit_vcmoe(&constrained, data, config).ok()?;
    let perm = align_to_truth(scenario, spec, &curve).ok()?;
    Some(targets.iter().map(|id| aligned_value(spec, &curve.points[0], &perm, *id)).collect())
}
