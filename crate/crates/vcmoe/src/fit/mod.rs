//! Dataset handling and the label-consistent EM estimator.
//!
//! Coefficient functions are estimated at a grid of index points. Each EM
//! iteration runs one global E-step, computing posterior responsibilities
//! from the current curves interpolated at every observation's own index,
//! followed by an M-step that maximizes the kernel-weighted complete-data
//! objective at every grid node. Sharing one set of responsibilities
//! across nodes keeps component labels aligned along the index, and the
//! left-to-right warm-started sweep keeps adjacent node solutions on the
//! same branch.
//!
//! Coefficients flagged constant in the model's mask are estimated by the
//! two-step procedure: a fully functional fit, then averaging the fitted
//! curve over the observation points, then EM re-runs in which each
//! M-step refits the coefficient functionally and immediately substitutes
//! the refit's average back, so the curve stays flat between iterations.
//!
//! The driver records the mean per-observation log mixture density after
//! every M-step and returns the iterate with the highest recorded value;
//! with a shared global E-step the trace is not guaranteed monotone, and
//! keeping the best visited iterate makes nested fits comparable.

mod newton;

pub(crate) use newton::SolverWs;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::KernelSpec;
use crate::model::{
    posterior_row, CoefId, ExpertFamily, LocalObs, ModelSpec, ParamLayout, Responsibilities,
    ThetaPoint,
};

/// Observations for one fit: index in `[0, 1]`, gating design `x`,
/// expert design `z`, response `y`. Rows correspond across fields; any
/// intercept must appear as an explicit constant column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub u: Array1<f64>,
    pub x: Array2<f64>,
    pub z: Array2<f64>,
    pub y: Array1<f64>,
}

impl Dataset {
    /// Validate shapes, finiteness, and the index range.
    pub fn new(u: Array1<f64>, x: Array2<f64>, z: Array2<f64>, y: Array1<f64>) -> Result<Self> {
        let n = u.len();
        if n < 2 {
            return Err(Error::InvalidData(format!("need at least 2 observations, got {n}")));
        }
        if x.nrows() != n || z.nrows() != n || y.len() != n {
            return Err(Error::InvalidData(format!(
                "row mismatch: u has {n}, x has {}, z has {}, y has {}",
                x.nrows(),
                z.nrows(),
                y.len()
            )));
        }
        if u.iter().any(|v| !v.is_finite() || !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidData("index values must be finite and in [0, 1]".into()));
        }
        for (name, arr) in [("x", &x), ("z", &z)] {
            if arr.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidData(format!("non-finite entry in {name}")));
            }
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("non-finite entry in y".into()));
        }
        Ok(Dataset { u, x, z, y })
    }

    pub fn n(&self) -> usize {
        self.u.len()
    }

    /// Copy with one observation removed, for leave-one-out refits.
    pub fn without(&self, i: usize) -> Dataset {
        let keep: Vec<usize> = (0..self.n()).filter(|&j| j != i).collect();
        Dataset {
            u: keep.iter().map(|&j| self.u[j]).collect(),
            x: self.x.select(ndarray::Axis(0), &keep),
            z: self.z.select(ndarray::Axis(0), &keep),
            y: keep.iter().map(|&j| self.y[j]).collect(),
        }
    }
}

/// Affine map `raw = offset + scale * u` recording how a raw index was
/// rescaled to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineMap {
    pub offset: f64,
    pub scale: f64,
}

impl AffineMap {
    /// Map a rescaled value back to the raw scale.
    pub fn to_raw(&self, u: f64) -> f64 {
        self.offset + self.scale * u
    }
}

/// Rescale a raw index variable onto `[0, 1]` by its observed range.
pub fn rescale_index(raw: &[f64]) -> Result<(Vec<f64>, AffineMap)> {
    if raw.is_empty() || raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidData("raw index must be non-empty and finite".into()));
    }
    let min = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == min {
        return Err(Error::DegenerateIndex(min));
    }
    let scale = max - min;
    let u = raw.iter().map(|&v| ((v - min) / scale).clamp(0.0, 1.0)).collect();
    Ok((u, AffineMap { offset: min, scale }))
}

/// How to produce the responsibilities that seed the first M-step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum InitStrategy {
    /// Independent flat-Dirichlet rows drawn from the config seed.
    Random,
    /// Hard assignment by response quantile bin, softened to 0.9 for the
    /// own class and 0.1 spread over the rest.
    QuantileSplit,
    /// Caller-supplied responsibilities, optionally with a full starting
    /// curve; with a curve the driver skips the initial M-step and starts
    /// at the E-step, which is how nested fits are warm-started.
    Provided {
        gamma: Responsibilities,
        #[serde(skip)]
        points: Option<Vec<ThetaPoint>>,
    },
}

/// Stopping rule for the EM loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Convergence {
    /// Stop when the relative change of the mean per-observation log
    /// mixture density falls below `tol`.
    RelLogLik { tol: f64 },
    /// Stop when the summed absolute change of all grid coefficient
    /// values falls below `threshold`. Provided for reproducing studies
    /// that used a coefficient-change rule.
    CoefDelta { threshold: f64 },
}

impl Default for Convergence {
    fn default() -> Self {
        Convergence::RelLogLik { tol: 1e-6 }
    }
}

/// Fitting configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitConfig {
    /// Kernel bandwidth on the index scale.
    pub h: f64,
    /// Estimation grid, strictly increasing within `[0, 1]`.
    pub grid: Vec<f64>,
    /// EM iteration cap per stage.
    pub max_iter: usize,
    pub convergence: Convergence,
    pub init: InitStrategy,
    /// Seed for random initialization.
    pub seed: u64,
}

impl FitConfig {
    pub fn new(h: f64) -> Self {
        FitConfig {
            h,
            grid: default_grid(),
            max_iter: 200,
            convergence: Convergence::default(),
            init: InitStrategy::QuantileSplit,
            seed: 0,
        }
    }
}

/// Default estimation grid: 100 equispaced points spanning `[0, 1]`.
pub fn default_grid() -> Vec<f64> {
    let m = 100;
    (0..m).map(|i| i as f64 / (m - 1) as f64).collect()
}

/// Fitted coefficient curves with fit diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThetaCurve {
    pub grid: Vec<f64>,
    pub points: Vec<ThetaPoint>,
    /// Posterior responsibilities at the returned curve, original row order.
    pub responsibilities: Responsibilities,
    /// Mean per-observation log mixture density after each M-step,
    /// including the initial one; constrained stages append to the trace.
    pub loglik_trace: Vec<f64>,
    pub converged: bool,
    pub n_iter: usize,
    /// Bandwidth the curve was fitted with.
    pub h: f64,
    /// Nodes where a degenerate component was frozen at its neighbor.
    pub frozen_nodes: usize,
    /// Levenberg damping activations across all node solves; nonzero
    /// values record where plain Newton steps were rejected.
    pub newton_shifts: usize,
    pub warnings: Vec<String>,
}

impl ThetaCurve {
    /// Values of one coefficient across the grid.
    pub fn coef_values(&self, id: CoefId) -> Vec<f64> {
        self.points.iter().map(|p| p.coef(id)).collect()
    }

    /// Interpolated value of one coefficient at `u` (clamped to the grid
    /// hull).
    pub fn coef_at(&self, id: CoefId, u: f64) -> f64 {
        let (seg, t) = segment(&self.grid, u);
        let a = self.points[seg].coef(id);
        if t == 0.0 {
            return a;
        }
        let b = self.points[seg + 1].coef(id);
        a + (b - a) * t
    }

    /// Mean per-observation log mixture density of the returned curve.
    pub fn mean_loglik(&self) -> f64 {
        *self.loglik_trace.last().expect("non-empty trace")
    }
}

/// Locate `u` in the grid: returns a segment index and interpolation
/// weight, clamping outside the hull. A single-node grid degenerates to
/// that node.
fn segment(grid: &[f64], u: f64) -> (usize, f64) {
    if grid.len() == 1 {
        return (0, 0.0);
    }
    if u <= grid[0] {
        return (0, 0.0);
    }
    if u >= grid[grid.len() - 1] {
        return (grid.len() - 2, 1.0);
    }
    let hi = grid.partition_point(|&g| g <= u);
    let seg = hi - 1;
    let span = grid[seg + 1] - grid[seg];
    (seg, (u - grid[seg]) / span)
}

/// Evaluate a fitted curve at `u` in `[0, 1]` by linear interpolation of
/// the node values; slopes are interpolated the same way and carry only
/// node-local meaning.
pub fn evaluate_curve(curve: &ThetaCurve, u: f64) -> Result<ThetaPoint> {
    if !u.is_finite() || !(0.0..=1.0).contains(&u) {
        return Err(Error::OutOfDomain(u));
    }
    let mut out = curve.points[0].clone();
    interp_into(&curve.grid, &curve.points, u, &mut out);
    Ok(out)
}

fn lerp_arrays(a: &ThetaPoint, b: &ThetaPoint, t: f64, out: &mut ThetaPoint) {
    ndarray::Zip::from(&mut out.beta).and(&a.beta).and(&b.beta).for_each(|o, &p, &q| *o = p + (q - p) * t);
    ndarray::Zip::from(&mut out.alpha).and(&a.alpha).and(&b.alpha).for_each(|o, &p, &q| *o = p + (q - p) * t);
    ndarray::Zip::from(&mut out.log_delta).and(&a.log_delta).and(&b.log_delta).for_each(|o, &p, &q| *o = p + (q - p) * t);
    ndarray::Zip::from(&mut out.beta_slope).and(&a.beta_slope).and(&b.beta_slope).for_each(|o, &p, &q| *o = p + (q - p) * t);
    ndarray::Zip::from(&mut out.alpha_slope).and(&a.alpha_slope).and(&b.alpha_slope).for_each(|o, &p, &q| *o = p + (q - p) * t);
    ndarray::Zip::from(&mut out.log_delta_slope).and(&a.log_delta_slope).and(&b.log_delta_slope).for_each(|o, &p, &q| *o = p + (q - p) * t);
}

fn interp_into(grid: &[f64], points: &[ThetaPoint], u: f64, out: &mut ThetaPoint) {
    let (seg, t) = segment(grid, u);
    if t == 0.0 {
        out.clone_from(&points[seg]);
    } else if t == 1.0 {
        out.clone_from(&points[seg + 1]);
    } else {
        lerp_arrays(&points[seg], &points[seg + 1], t, out);
    }
}

/// Initial responsibilities for the first M-step.
pub fn init_responsibilities(
    spec: &ModelSpec,
    data: &Dataset,
    strategy: &InitStrategy,
    seed: u64,
) -> Result<Responsibilities> {
    let n = data.n();
    let c = spec.n_components;
    match strategy {
        InitStrategy::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut gamma = Array2::zeros((n, c));
            for i in 0..n {
                let mut total = 0.0;
                for k in 0..c {
                    // Flat Dirichlet via normalized unit exponentials.
                    let e: f64 = -(1.0 - rng.gen::<f64>()).ln();
                    gamma[(i, k)] = e;
                    total += e;
                }
                for k in 0..c {
                    gamma[(i, k)] /= total;
                }
            }
            Responsibilities::new(gamma)
        }
        InitStrategy::QuantileSplit => {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| data.y[a].total_cmp(&data.y[b]).then(a.cmp(&b)));
            let mut gamma = Array2::from_elem((n, c), 0.1 / (c as f64 - 1.0));
            for (rank, &i) in order.iter().enumerate() {
                let bin = (rank * c / n).min(c - 1);
                for k in 0..c {
                    gamma[(i, k)] = if k == bin { 0.9 } else { 0.1 / (c as f64 - 1.0) };
                }
            }
            Responsibilities::new(gamma)
        }
        InitStrategy::Provided { gamma, .. } => {
            if gamma.n() != n || gamma.gamma.ncols() != c {
                return Err(Error::InvalidData(format!(
                    "provided responsibilities are {}x{}, expected {n}x{c}",
                    gamma.n(),
                    gamma.gamma.ncols()
                )));
            }
            Ok(gamma.clone())
        }
    }
}

/// Data sorted by index with per-node kernel windows, shared by every
/// sweep of one fit.
pub(crate) struct FitCtx<'a> {
    spec: &'a ModelSpec,
    grid: &'a [f64],
    h: f64,
    pub order: Vec<usize>,
    pub u: Vec<f64>,
    pub y: Vec<f64>,
    pub x: Array2<f64>,
    pub z: Array2<f64>,
    win_lo: Vec<usize>,
    win_hi: Vec<usize>,
    weights: Vec<Vec<f64>>,
    offsets: Vec<Vec<f64>>,
    sd_y: f64,
}

/// One node's observation window, borrowed from the fit context.
pub(crate) struct NodeData<'a> {
    pub x: &'a Array2<f64>,
    pub z: &'a Array2<f64>,
    pub y: &'a [f64],
    pub gamma: &'a Array2<f64>,
    pub lo: usize,
    pub hi: usize,
    pub w: &'a [f64],
    pub d: &'a [f64],
}

impl<'a> NodeData<'a> {
    pub(crate) fn iter(&self) -> impl Iterator<Item = LocalObs<'_>> {
        (self.lo..self.hi).map(move |i| LocalObs {
            x: self.x.row(i).to_slice().expect("row-major"),
            z: self.z.row(i).to_slice().expect("row-major"),
            y: self.y[i],
            gamma: self.gamma.row(i).to_slice().expect("row-major"),
            w: self.w[i - self.lo],
            d: self.d[i - self.lo],
        })
    }
}

impl<'a> FitCtx<'a> {
    pub(crate) fn new(spec: &'a ModelSpec, data: &Dataset, config: &'a FitConfig) -> Result<(Self, Vec<String>)> {
        if !(config.h > 0.0) {
            return Err(Error::NonPositiveBandwidth(config.h));
        }
        let grid = &config.grid;
        if grid.is_empty()
            || grid.windows(2).any(|w| w[0] >= w[1])
            || grid[0] < 0.0
            || grid[grid.len() - 1] > 1.0
        {
            return Err(Error::InvalidData(
                "grid must be non-empty, strictly increasing, within [0, 1]".into(),
            ));
        }
        // Binomial responses must be whole counts within the trial range.
        if let ExpertFamily::Binomial { trials } = spec.expert {
            let m = f64::from(trials);
            for &y in data.y.iter() {
                if y < 0.0 || y > m || y.fract() != 0.0 {
                    return Err(Error::InvalidResponse {
                        y,
                        family: format!("binomial with {trials} trials"),
                    });
                }
            }
        }
        let n = data.n();
        let p_free = 2 * spec.n_coefficients();
        if n < 2 * p_free {
            return Err(Error::InvalidData(format!(
                "n = {n} is below twice the {p_free} free local parameters"
            )));
        }
        let mut warnings = Vec::new();
        if n < 10 * p_free {
            warnings.push(format!(
                "n = {n} is below ten times the {p_free} free local parameters; \
                 estimates may be unstable"
            ));
        }
        if data.x.ncols() != spec.p_x || data.z.ncols() != spec.p_z {
            return Err(Error::InvalidData(format!(
                "design widths ({}, {}) do not match spec ({}, {})",
                data.x.ncols(),
                data.z.ncols(),
                spec.p_x,
                spec.p_z
            )));
        }

        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| data.u[a].total_cmp(&data.u[b]).then(a.cmp(&b)));
        let u: Vec<f64> = order.iter().map(|&i| data.u[i]).collect();
        let y: Vec<f64> = order.iter().map(|&i| data.y[i]).collect();
        let x = data.x.select(ndarray::Axis(0), &order);
        let z = data.z.select(ndarray::Axis(0), &order);

        let kernel = KernelSpec::epanechnikov();
        let h = config.h;
        let mut win_lo = Vec::with_capacity(grid.len());
        let mut win_hi = Vec::with_capacity(grid.len());
        let mut weights = Vec::with_capacity(grid.len());
        let mut offsets = Vec::with_capacity(grid.len());
        for &g in grid {
            let lo = u.partition_point(|&v| v < g - h);
            let hi = u.partition_point(|&v| v <= g + h);
            let mut w = Vec::with_capacity(hi - lo);
            let mut d = Vec::with_capacity(hi - lo);
            for &uv in &u[lo..hi] {
                d.push(uv - g);
                w.push(kernel.scaled_weight(uv - g, h)?);
            }
            win_lo.push(lo);
            win_hi.push(hi);
            weights.push(w);
            offsets.push(d);
        }

        let mean_y = y.iter().sum::<f64>() / n as f64;
        let var_y = y.iter().map(|&v| (v - mean_y).powi(2)).sum::<f64>() / n as f64;
        let sd_y = var_y.sqrt().max(1e-6);

        Ok((
            FitCtx { spec, grid, h, order, u, y, x, z, win_lo, win_hi, weights, offsets, sd_y },
            warnings,
        ))
    }

    fn node<'b>(&'b self, g: usize, gamma_sorted: &'b Array2<f64>) -> NodeData<'b> {
        NodeData {
            x: &self.x,
            z: &self.z,
            y: &self.y,
            gamma: gamma_sorted,
            lo: self.win_lo[g],
            hi: self.win_hi[g],
            w: &self.weights[g],
            d: &self.offsets[g],
        }
    }

    /// Default Newton start: zero coefficients, dispersion at the sample
    /// response scale.
    fn default_start(&self) -> ThetaPoint {
        let mut t = ThetaPoint::zeros(self.spec);
        if self.spec.has_dispersion() {
            t.log_delta.fill(self.sd_y.ln());
        }
        t
    }

    /// Reorder responsibilities rows into index order.
    fn sort_gamma(&self, gamma: &Responsibilities) -> Array2<f64> {
        gamma.gamma.select(ndarray::Axis(0), &self.order)
    }

    /// Map sorted responsibilities back to original row order.
    fn unsort_gamma(&self, sorted: &Array2<f64>) -> Array2<f64> {
        let n = sorted.nrows();
        let c = sorted.ncols();
        let mut out = Array2::zeros((n, c));
        for (s, &orig) in self.order.iter().enumerate() {
            for k in 0..c {
                out[(orig, k)] = sorted[(s, k)];
            }
        }
        out
    }

    /// Global E-step over the sorted data: fills `gamma_sorted` and
    /// returns the mean per-observation log mixture density of `points`.
    fn e_step_sorted(
        &self,
        points: &[ThetaPoint],
        gamma_sorted: &mut Array2<f64>,
        scratch: &mut EStepScratch,
    ) -> Result<f64> {
        let n = self.u.len();
        let mut total = 0.0;
        for i in 0..n {
            interp_into(self.grid, points, self.u[i], &mut scratch.theta);
            let logf = posterior_row(
                self.spec,
                &scratch.theta,
                self.x.row(i).to_slice().expect("row-major"),
                self.z.row(i).to_slice().expect("row-major"),
                self.y[i],
                &mut scratch.scores,
                &mut scratch.logp,
                gamma_sorted.row_mut(i).as_slice_mut().expect("row-major"),
            )?;
            total += logf;
        }
        Ok(total / n as f64)
    }

    /// Average of one coefficient's interpolated curve over the
    /// observation points: the constant estimator.
    fn average_at_observations(&self, points: &[ThetaPoint], id: CoefId) -> f64 {
        let vals: Vec<f64> = points.iter().map(|p| p.coef(id)).collect();
        let mut total = 0.0;
        for &u in &self.u {
            let (seg, t) = segment(self.grid, u);
            total += if t == 0.0 { vals[seg] } else { vals[seg] + (vals[seg + 1] - vals[seg]) * t };
        }
        total / self.u.len() as f64
    }
}

struct EStepScratch {
    theta: ThetaPoint,
    scores: Vec<f64>,
    logp: Vec<f64>,
}

impl EStepScratch {
    fn new(spec: &ModelSpec) -> Self {
        EStepScratch {
            theta: ThetaPoint::zeros(spec),
            scores: vec![0.0; spec.n_components - 1],
            logp: vec![0.0; spec.n_components],
        }
    }
}

/// Threshold below which a fitted dispersion marks a degenerate node.
const DELTA_FLOOR: f64 = 1e-4;

/// Result of one M-step sweep.
struct Sweep {
    points: Vec<ThetaPoint>,
    frozen: usize,
    shifts: usize,
}

/// Coefficients belonging to one component's expert block, plus the
/// gating rows that stop being identified when the component dies.
fn component_coefs(spec: &ModelSpec, class: usize) -> Vec<CoefId> {
    let mut ids = Vec::new();
    for col in 0..spec.p_z {
        ids.push(CoefId::Alpha { class, col });
    }
    if spec.has_dispersion() {
        ids.push(CoefId::LogDelta { class });
    }
    ids
}

fn gate_coefs_for_dead_class(spec: &ModelSpec, class: usize) -> Vec<CoefId> {
    let mut ids = Vec::new();
    let rows = if spec.n_components == 2 {
        vec![0]
    } else if class < spec.n_components - 1 {
        vec![class]
    } else {
        vec![]
    };
    for row in rows {
        for col in 0..spec.p_x {
            ids.push(CoefId::Beta { class: row, col });
        }
    }
    ids
}

/// One left-to-right M-step sweep. `base_mask` freezes coefficients at
/// their warm-start values (canonical order); each node additionally
/// freezes components whose fitted dispersion collapses, copying the
/// neighbor's block.
fn m_step_sweep(
    ctx: &FitCtx,
    gamma_sorted: &Array2<f64>,
    prev: &[ThetaPoint],
    base_mask: &[bool],
    ws: &mut SolverWs,
) -> Result<Sweep> {
    let spec = ctx.spec;
    let n_grid = ctx.grid.len();
    let mut mask = base_mask.to_vec();
    let mut frozen = 0usize;

    // A component with almost no global responsibility mass cannot be
    // re-estimated; freeze its block for the whole sweep.
    let c = spec.n_components;
    for class in 0..c {
        let mass: f64 = gamma_sorted.column(class).sum();
        if mass < 2.0 * c as f64 {
            for id in component_coefs(spec, class).into_iter().chain(gate_coefs_for_dead_class(spec, class)) {
                mask[spec.coef_index(id)?] = true;
            }
            frozen += 1;
        }
    }

    let base_layout = ParamLayout::with_mask(spec, &mask);
    let mut points = Vec::with_capacity(n_grid);
    let mut shifts = 0usize;
    for g in 0..n_grid {
        let node = ctx.node(g, gamma_sorted);
        if node.w.iter().all(|&w| w == 0.0) {
            return Err(Error::NoEffectiveSamples { u: ctx.grid[g], h: ctx.h });
        }

        // Warm-start ladder: the neighbor just solved keeps the sweep
        // label-consistent and cheap, but it can sit in a basin the next
        // window scores terribly; fall back to the previous iteration's
        // point for this node, then to the cold default, before giving up.
        let mut default_point = None;
        let mut outcome = Err(Error::SingularHessian { u: ctx.grid[g] });
        for attempt in 0..3 {
            let warm: &ThetaPoint = match attempt {
                0 => {
                    if g == 0 {
                        &prev[0]
                    } else {
                        &points[g - 1]
                    }
                }
                1 => &prev[g],
                _ => default_point.insert(ctx.default_start()),
            };
            outcome =
                solve_node_guarded(ctx, &mask, &base_layout, &node, warm, g, &mut shifts, ws);
            if outcome.is_ok() {
                break;
            }
        }
        let (theta, frozen_here) = outcome?;
        frozen += frozen_here;
        points.push(theta);
    }
    Ok(Sweep { points, frozen, shifts })
}

/// Solve one node with the degenerate-component guard: a dispersion that
/// collapses through the floor gets its component frozen at the warm
/// start's block and the node is re-solved without it, at most once per
/// component. Returns the solution and how many components were frozen.
fn solve_node_guarded(
    ctx: &FitCtx,
    mask: &[bool],
    base_layout: &ParamLayout,
    node: &NodeData,
    warm: &ThetaPoint,
    g: usize,
    shifts: &mut usize,
    ws: &mut SolverWs,
) -> Result<(ThetaPoint, usize)> {
    let spec = ctx.spec;
    let c = spec.n_components;
    let mut local_mask: Option<Vec<bool>> = None;
    let mut guard = 0usize;
    let mut frozen = 0usize;
    loop {
        let solved = match &local_mask {
            None => newton::solve_node(spec, base_layout, node, warm, ctx.grid[g], ws),
            Some(m) => {
                let layout = ParamLayout::with_mask(spec, m);
                newton::solve_node(spec, &layout, node, warm, ctx.grid[g], ws)
            }
        }?;
        debug_assert!(
            solved.q_post >= solved.q_pre - 1e-8,
            "node objective decreased at u = {}",
            ctx.grid[g]
        );
        *shifts += solved.shifts;
        // The solver interrupts a dive through the floor itself; the scan
        // below catches a solution that lands just under it.
        let mut degenerate: Option<usize> = solved.collapsed;
        if degenerate.is_none() && spec.has_dispersion() && guard < c {
            for class in 0..c {
                let already = match &local_mask {
                    Some(m) => m[spec.coef_index(CoefId::LogDelta { class })?],
                    None => mask[spec.coef_index(CoefId::LogDelta { class })?],
                };
                if !already && ws.theta.delta(class) < DELTA_FLOOR {
                    degenerate = Some(class);
                    break;
                }
            }
        }
        match degenerate {
            Some(class) => {
                let mut m = local_mask.take().unwrap_or_else(|| mask.to_vec());
                for id in component_coefs(spec, class) {
                    m[spec.coef_index(id)?] = true;
                }
                local_mask = Some(m);
                guard += 1;
                frozen += 1;
            }
            None => break,
        }
    }
    Ok((ws.theta.clone(), frozen))
}

/// Collapse each masked coefficient to its observation-point average.
fn substitute_constants(ctx: &FitCtx, points: &mut [ThetaPoint], targets: &[CoefId]) {
    for &id in targets {
        let constant = ctx.average_at_observations(points, id);
        for p in points.iter_mut() {
            *p.coef_mut(id) = constant;
            *p.slope_mut(id) = 0.0;
        }
    }
}

struct EmRun {
    points: Vec<ThetaPoint>,
    gamma_sorted: Array2<f64>,
    trace: Vec<f64>,
    converged: bool,
    n_iter: usize,
    frozen: usize,
    shifts: usize,
}

/// Run EM from either provided responsibilities or a provided curve.
/// When `targets` is non-empty every M-step is followed by the constant
/// substitution. Returns the iterate with the highest objective.
#[allow(clippy::too_many_arguments)]
fn run_em(
    ctx: &FitCtx,
    ws: &mut SolverWs,
    start_gamma: Option<Array2<f64>>,
    start_points: Option<Vec<ThetaPoint>>,
    targets: &[CoefId],
    max_iter: usize,
    convergence: Convergence,
) -> Result<EmRun> {
    let spec = ctx.spec;
    let n = ctx.u.len();
    let all_free = vec![false; spec.n_coefficients()];
    let mut scratch = EStepScratch::new(spec);
    let mut gamma = Array2::zeros((n, spec.n_components));
    let mut frozen = 0usize;
    let mut shifts = 0usize;

    let mut points = match start_points {
        Some(p) => {
            debug_assert_eq!(p.len(), ctx.grid.len());
            p
        }
        None => {
            let g0 = start_gamma.expect("either start gamma or points");
            let start = vec![ctx.default_start(); 1];
            let sweep = m_step_sweep(ctx, &g0, &start, &all_free, ws)?;
            frozen += sweep.frozen;
            shifts += sweep.shifts;
            let mut pts = sweep.points;
            if !targets.is_empty() {
                substitute_constants(ctx, &mut pts, targets);
            }
            pts
        }
    };

    let mut obj = ctx.e_step_sorted(&points, &mut gamma, &mut scratch)?;
    let mut trace = vec![obj];
    let mut best_obj = obj;
    let mut best_points = points.clone();
    let mut best_gamma = gamma.clone();
    let mut converged = false;
    let mut n_iter = 0usize;

    for t in 1..=max_iter {
        let prev_points = match convergence {
            Convergence::CoefDelta { .. } => Some(points.clone()),
            Convergence::RelLogLik { .. } => None,
        };
        let sweep = m_step_sweep(ctx, &gamma, &points, &all_free, ws)?;
        frozen += sweep.frozen;
        shifts += sweep.shifts;
        points = sweep.points;
        if !targets.is_empty() {
            substitute_constants(ctx, &mut points, targets);
        }
        let obj_new = ctx.e_step_sorted(&points, &mut gamma, &mut scratch)?;
        trace.push(obj_new);
        n_iter = t;
        if obj_new > best_obj {
            best_obj = obj_new;
            best_points.clone_from(&points);
            best_gamma.clone_from(&gamma);
        }
        converged = match convergence {
            Convergence::RelLogLik { tol } => {
                (obj_new - obj).abs() / obj.abs().max(1e-12) < tol
            }
            Convergence::CoefDelta { threshold } => {
                let prev = prev_points.expect("tracked for this rule");
                let ids = spec.coef_ids();
                let mut total = 0.0;
                for (a, b) in prev.iter().zip(points.iter()) {
                    for &id in &ids {
                        total += (a.coef(id) - b.coef(id)).abs();
                    }
                }
                total < threshold
            }
        };
        obj = obj_new;
        if converged {
            break;
        }
    }

    Ok(EmRun { points: best_points, gamma_sorted: best_gamma, trace, converged, n_iter, frozen, shifts })
}

/// Global E-step: posterior responsibilities of every observation under
/// the interpolated curve.
pub fn e_step(spec: &ModelSpec, curve: &ThetaCurve, data: &Dataset) -> Result<Responsibilities> {
    let n = data.n();
    let mut scratch = EStepScratch::new(spec);
    let mut gamma = Array2::zeros((n, spec.n_components));
    for i in 0..n {
        interp_into(&curve.grid, &curve.points, data.u[i], &mut scratch.theta);
        posterior_row(
            spec,
            &scratch.theta,
            data.x.row(i).to_slice().expect("row-major"),
            data.z.row(i).to_slice().expect("row-major"),
            data.y[i],
            &mut scratch.scores,
            &mut scratch.logp,
            gamma.row_mut(i).as_slice_mut().expect("row-major"),
        )?;
    }
    Responsibilities::new(gamma)
}

/// One M-step: maximize the local objective at every grid node given
/// fixed responsibilities. Coefficients in the spec's constant mask stay
/// frozen at the default start; the EM driver handles constants through
/// substitution instead.
pub fn m_step(
    spec: &ModelSpec,
    gamma: &Responsibilities,
    data: &Dataset,
    config: &FitConfig,
) -> Result<Vec<ThetaPoint>> {
    let (ctx, _) = FitCtx::new(spec, data, config)?;
    if gamma.n() != data.n() {
        return Err(Error::InvalidData("responsibility rows do not match data".into()));
    }
    let sorted = ctx.sort_gamma(gamma);
    let mut ws = SolverWs::new(spec);
    let start = vec![ctx.default_start(); 1];
    let sweep = m_step_sweep(&ctx, &sorted, &start, &spec.constant_mask, &mut ws)?;
    Ok(sweep.points)
}

/// Fit the full model. Coefficients flagged constant in the spec are
/// estimated by the two-step procedure: a functional fit, then EM re-runs
/// substituting each flagged coefficient's observation-point average
/// after every M-step.
pub fn fit_vcmoe(spec: &ModelSpec, data: &Dataset, config: &FitConfig) -> Result<ThetaCurve> {
    let (ctx, warnings) = FitCtx::new(spec, data, config)?;
    let mut ws = SolverWs::new(spec);

    // A provided starting curve skips the initial M-step; any other
    // strategy produces responsibilities that seed it.
    let (start_gamma, start_points) = match &config.init {
        InitStrategy::Provided { points: Some(p), .. } => {
            if p.len() != config.grid.len() {
                return Err(Error::InvalidData(
                    "provided starting curve does not match the grid".into(),
                ));
            }
            (None, Some(p.clone()))
        }
        other => {
            let g = init_responsibilities(spec, data, other, config.seed)?;
            (Some(ctx.sort_gamma(&g)), None)
        }
    };

    let targets: Vec<CoefId> = spec
        .coef_ids()
        .into_iter()
        .zip(spec.constant_mask.iter())
        .filter_map(|(id, &m)| m.then_some(id))
        .collect();

    // Stage 1: fully functional fit.
    let stage1 = run_em(
        &ctx,
        &mut ws,
        start_gamma,
        start_points,
        &[],
        config.max_iter,
        config.convergence,
    )?;

    let (run, trace, frozen, shifts, n_iter) = if targets.is_empty() {
        let trace = stage1.trace.clone();
        let frozen = stage1.frozen;
        let shifts = stage1.shifts;
        let n_iter = stage1.n_iter;
        (stage1, trace, frozen, shifts, n_iter)
    } else {
        // Stage 2: collapse flagged coefficients and re-run EM with
        // substitution after every M-step.
        let s1_frozen = stage1.frozen;
        let s1_shifts = stage1.shifts;
        let s1_iter = stage1.n_iter;
        let mut points = stage1.points;
        substitute_constants(&ctx, &mut points, &targets);
        let mut trace = stage1.trace;
        let stage2 = run_em(
            &ctx,
            &mut ws,
            None,
            Some(points),
            &targets,
            config.max_iter,
            config.convergence,
        )?;
        trace.extend_from_slice(&stage2.trace);
        let frozen = s1_frozen + stage2.frozen;
        let shifts = s1_shifts + stage2.shifts;
        let n_iter = s1_iter + stage2.n_iter;
        (stage2, trace, frozen, shifts, n_iter)
    };

    let gamma = Responsibilities::new(ctx.unsort_gamma(&run.gamma_sorted))?;
    Ok(ThetaCurve {
        grid: config.grid.clone(),
        points: run.points,
        responsibilities: gamma,
        loglik_trace: trace,
        converged: run.converged,
        n_iter,
        h: config.h,
        frozen_nodes: frozen,
        newton_shifts: shifts,
        warnings,
    })
}

/// Estimate one coefficient as constant over the index: fit functionally,
/// average the fitted curve over the observation points, and re-run EM
/// substituting the average after every M-step. Returns the constant and
/// the constrained curve (flat in the target).
pub fn fit_constant(
    spec: &ModelSpec,
    data: &Dataset,
    config: &FitConfig,
    target: CoefId,
) -> Result<(f64, ThetaCurve)> {
    let spec_c = spec.clone().with_constant(&[target])?;
    let curve = fit_vcmoe(&spec_c, data, config)?;
    let constant = curve.points[0].coef(target);
    Ok((constant, curve))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ExpertFamily, GatingForm};
    use approx::assert_abs_diff_eq;
    use nalgebra::{DMatrix, DVector};
    use ndarray::array;
    use rand::Rng;

    fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
        rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng)
    }

    fn two_gauss_spec() -> ModelSpec {
        ModelSpec::new(2, ExpertFamily::Gaussian, GatingForm::Logistic, 2, 2).unwrap()
    }

    /// Two well-separated Gaussian components with a mild gate; constant
    /// true coefficients so any node estimates the same target.
    fn separated_data(n: usize, seed: u64, offset: f64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut u = Array1::zeros(n);
        let mut x = Array2::zeros((n, 2));
        let mut z = Array2::zeros((n, 2));
        let mut y = Array1::zeros(n);
        for i in 0..n {
            u[i] = rng.gen::<f64>();
            let xv = standard_normal(&mut rng);
            let zv = standard_normal(&mut rng);
            x[(i, 0)] = 1.0;
            x[(i, 1)] = xv;
            z[(i, 0)] = 1.0;
            z[(i, 1)] = zv;
            let p1 = crate::model::expit(0.3 + 0.8 * xv);
            let class1 = rng.gen::<f64>() < p1;
            y[i] = if class1 {
                offset + 1.0 * zv + 0.6 * standard_normal(&mut rng)
            } else {
                -offset - 1.0 * zv + 0.9 * standard_normal(&mut rng)
            };
        }
        Dataset::new(u, x, z, y).unwrap()
    }

    #[test]
    fn dataset_validation_rejects_malformed_input() {
        let ok = separated_data(30, 1, 4.0);
        assert_eq!(ok.n(), 30);

        let u = array![0.0, 0.5, 1.0];
        let x = Array2::zeros((3, 1));
        let z = Array2::zeros((3, 1));
        assert!(Dataset::new(u.clone(), Array2::zeros((2, 1)), z.clone(), array![1.0, 2.0, 3.0])
            .is_err());
        assert!(Dataset::new(array![0.0, 0.5, 1.5], x.clone(), z.clone(), array![1.0, 2.0, 3.0])
            .is_err());
        assert!(Dataset::new(u.clone(), x.clone(), z.clone(), array![1.0, f64::NAN, 3.0])
            .is_err());
        assert!(Dataset::new(array![0.1], Array2::zeros((1, 1)), Array2::zeros((1, 1)), array![1.0])
            .is_err());
        assert!(Dataset::new(u, x, z, array![1.0, 2.0, 3.0]).is_ok());
    }

    #[test]
    fn dataset_without_drops_exactly_one_row() {
        let data = separated_data(25, 2, 4.0);
        let loo = data.without(7);
        assert_eq!(loo.n(), 24);
        assert_eq!(loo.u[6], data.u[6]);
        assert_eq!(loo.u[7], data.u[8]);
        assert_eq!(loo.y[23], data.y[24]);
        assert_eq!(loo.x[(7, 1)], data.x[(8, 1)]);
    }

    #[test]
    fn rescale_index_maps_range_to_unit_interval() {
        let (u, map) = rescale_index(&[0.0, 5.0, 10.0]).unwrap();
        assert_eq!(u, vec![0.0, 0.5, 1.0]);
        assert_eq!(map.to_raw(0.5), 5.0);

        // A developmental-day scale: 14 through 18.5 maps affinely.
        let (u, map) = rescale_index(&[14.0, 15.0, 18.5, 16.0]).unwrap();
        assert_abs_diff_eq!(u[1], 1.0 / 4.5, epsilon = 1e-15);
        assert_eq!(u[2], 1.0);
        assert_abs_diff_eq!(map.to_raw(u[3]), 16.0, epsilon = 1e-12);

        assert!(matches!(rescale_index(&[1.0, 1.0, 1.0]), Err(Error::DegenerateIndex(_))));
    }

    fn constant_curve(grid: Vec<f64>, point: ThetaPoint) -> ThetaCurve {
        let n_nodes = grid.len();
        ThetaCurve {
            grid,
            points: vec![point; n_nodes],
            responsibilities: Responsibilities::new(Array2::from_elem((2, 2), 0.5)).unwrap(),
            loglik_trace: vec![0.0],
            converged: true,
            n_iter: 0,
            h: 0.2,
            frozen_nodes: 0,
            newton_shifts: 0,
            warnings: Vec::new(),
        }
    }

    #[test]
    fn evaluate_curve_interpolates_and_guards_domain() {
        let spec = ModelSpec::new(2, ExpertFamily::Gaussian, GatingForm::Logistic, 1, 1).unwrap();
        let mut a = ThetaPoint::zeros(&spec);
        a.alpha[(0, 0)] = 1.0;
        let mut b = ThetaPoint::zeros(&spec);
        b.alpha[(0, 0)] = 3.0;
        let mut curve = constant_curve(vec![0.0, 1.0], a);
        curve.points[1] = b;

        let at_node = evaluate_curve(&curve, 0.0).unwrap();
        assert_eq!(at_node.alpha[(0, 0)], 1.0);
        let mid = evaluate_curve(&curve, 0.5).unwrap();
        assert_abs_diff_eq!(mid.alpha[(0, 0)], 2.0, epsilon = 1e-15);
        assert_eq!(curve.coef_at(CoefId::Alpha { class: 0, col: 0 }, 0.25), 1.5);
        assert!(matches!(evaluate_curve(&curve, 1.2), Err(Error::OutOfDomain(_))));
        assert!(matches!(evaluate_curve(&curve, f64::NAN), Err(Error::OutOfDomain(_))));
    }

    #[test]
    fn random_init_is_seed_deterministic_with_unit_row_sums() {
        let spec = two_gauss_spec();
        let data = separated_data(40, 3, 4.0);
        let a = init_responsibilities(&spec, &data, &InitStrategy::Random, 9).unwrap();
        let b = init_responsibilities(&spec, &data, &InitStrategy::Random, 9).unwrap();
        let c = init_responsibilities(&spec, &data, &InitStrategy::Random, 10).unwrap();
        assert_eq!(a.gamma, b.gamma);
        assert_ne!(a.gamma, c.gamma);
        for i in 0..40 {
            let s: f64 = a.gamma.row(i).sum();
            assert_abs_diff_eq!(s, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn quantile_split_separates_extreme_responses() {
        let spec = two_gauss_spec();
        let n = 30;
        let u = Array1::from_iter((0..n).map(|i| i as f64 / (n - 1) as f64));
        let mut y = Array1::zeros(n);
        for i in 0..n {
            y[i] = if i % 2 == 0 { -10.0 - i as f64 } else { 10.0 + i as f64 };
        }
        let data =
            Dataset::new(u, Array2::from_elem((n, 2), 1.0), Array2::from_elem((n, 2), 1.0), y)
                .unwrap();
        let g = init_responsibilities(&spec, &data, &InitStrategy::QuantileSplit, 0).unwrap();
        for i in 0..n {
            let own = if data.y[i] < 0.0 { 0 } else { 1 };
            assert!(g.gamma[(i, own)] >= 0.9);
        }
    }

    #[test]
    fn provided_init_must_match_shape() {
        let spec = two_gauss_spec();
        let data = separated_data(30, 4, 4.0);
        let wrong = Responsibilities::new(Array2::from_elem((10, 2), 0.5)).unwrap();
        let err = init_responsibilities(
            &spec,
            &data,
            &InitStrategy::Provided { gamma: wrong, points: None },
            0,
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidData(_)));
    }

    #[test]
    fn e_step_posterior_matches_hand_ratio() {
        // Gate 0.8/0.2; expert densities 0.2 and 0.4 at the observed y
        // (each component centered there, scale chosen so the peak density
        // is the target). Posterior for class 1: 0.16/0.24 = 2/3.
        let spec = ModelSpec::new(2, ExpertFamily::Gaussian, GatingForm::Logistic, 1, 1).unwrap();
        let y0 = 0.7;
        let mut point = ThetaPoint::zeros(&spec);
        point.beta[(0, 0)] = 4.0f64.ln();
        point.alpha[(0, 0)] = y0;
        point.alpha[(1, 0)] = y0;
        let root_tau = (2.0 * std::f64::consts::PI).sqrt();
        point.log_delta[0] = (1.0 / (0.2 * root_tau)).ln();
        point.log_delta[1] = (1.0 / (0.4 * root_tau)).ln();
        let curve = constant_curve(vec![0.0, 1.0], point);
        let data = Dataset::new(
            array![0.3, 0.6],
            Array2::from_elem((2, 1), 1.0),
            Array2::from_elem((2, 1), 1.0),
            array![y0, y0],
        )
        .unwrap();
        let gamma = e_step(&spec, &curve, &data).unwrap();
        for i in 0..2 {
            assert_abs_diff_eq!(gamma.gamma[(i, 0)], 2.0 / 3.0, epsilon = 1e-12);
        }
    }

    /// Kernel-weighted local-linear least squares on design
    /// `[z, z*d]` with per-observation extra weights `extra` (all ones
    /// for the homoscedastic case).
    fn wls_local_linear(data: &Dataset, u: f64, h: f64, extra: &[f64]) -> DVector<f64> {
        let kernel = KernelSpec::epanechnikov();
        let p = data.z.ncols();
        let mut xtx = DMatrix::zeros(2 * p, 2 * p);
        let mut xty = DVector::zeros(2 * p);
        for i in 0..data.n() {
            let d = data.u[i] - u;
            let w = kernel.scaled_weight(d, h).unwrap() * extra[i];
            if w == 0.0 {
                continue;
            }
            let mut row = DVector::zeros(2 * p);
            for j in 0..p {
                row[2 * j] = data.z[(i, j)];
                row[2 * j + 1] = data.z[(i, j)] * d;
            }
            xtx += &row * row.transpose() * w;
            xty += &row * (w * data.y[i]);
        }
        xtx.cholesky().expect("PD normal equations").solve(&xty)
    }

    fn single_component_regression_data(n: usize, seed: u64) -> (Dataset, Responsibilities) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut u = Array1::zeros(n);
        let mut z = Array2::zeros((n, 2));
        let mut y = Array1::zeros(n);
        for i in 0..n {
            u[i] = rng.gen::<f64>();
            z[(i, 0)] = 1.0;
            z[(i, 1)] = standard_normal(&mut rng);
            y[i] = (2.0 * u[i]).sin() + 0.8 * z[(i, 1)] + 0.3 * standard_normal(&mut rng);
        }
        let x = z.clone();
        let data = Dataset::new(u, x, z, y).unwrap();
        let mut g = Array2::zeros((n, 2));
        g.column_mut(0).fill(1.0);
        (data, Responsibilities::new(g).unwrap())
    }

    #[test]
    fn m_step_single_component_matches_closed_form_wls() {
        // With all responsibility on component 1 and dispersions held
        // constant, each node solve is exactly a homoscedastic weighted
        // local-linear regression with closed form.
        let spec = two_gauss_spec()
            .with_constant(&[CoefId::LogDelta { class: 0 }, CoefId::LogDelta { class: 1 }])
            .unwrap();
        let (data, gamma) = single_component_regression_data(80, 12);
        let mut config = FitConfig::new(0.35);
        config.grid = vec![0.25, 0.5, 0.75];
        let points = m_step(&spec, &gamma, &data, &config).unwrap();

        let ones = vec![1.0; data.n()];
        for (gi, &node) in config.grid.iter().enumerate() {
            let coef = wls_local_linear(&data, node, config.h, &ones);
            for j in 0..2 {
                assert_abs_diff_eq!(points[gi].alpha[(0, j)], coef[2 * j], epsilon = 1e-6);
                assert_abs_diff_eq!(points[gi].alpha_slope[(0, j)], coef[2 * j + 1], epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn m_step_single_component_matches_alternating_mle_oracle() {
        // With the log dispersion free, the node solution is the joint MLE
        // of a local-linear mean and a log-linear scale. An independent
        // oracle: alternate reweighted least squares for the mean with a
        // two-parameter Newton solve for the scale line until the fixed
        // point.
        let spec = two_gauss_spec();
        let (data, gamma) = single_component_regression_data(80, 12);
        let mut config = FitConfig::new(0.35);
        config.grid = vec![0.25, 0.5, 0.75];
        let points = m_step(&spec, &gamma, &data, &config).unwrap();

        let kernel = KernelSpec::epanechnikov();
        for (gi, &node) in config.grid.iter().enumerate() {
            let mut lam = 0.0f64;
            let mut lam_slope = 0.0f64;
            let mut coef = DVector::zeros(4);
            for _ in 0..400 {
                let extra: Vec<f64> = data
                    .u
                    .iter()
                    .map(|&ui| (-2.0 * (lam + lam_slope * (ui - node))).exp())
                    .collect();
                let new_coef = wls_local_linear(&data, node, config.h, &extra);
                // Newton on the scale line given current residuals.
                for _ in 0..80 {
                    let mut g = DVector::<f64>::zeros(2);
                    let mut hmat = DMatrix::<f64>::zeros(2, 2);
                    for i in 0..data.n() {
                        let d = data.u[i] - node;
                        let w = kernel.scaled_weight(d, config.h).unwrap();
                        if w == 0.0 {
                            continue;
                        }
                        let mean = new_coef[0] * data.z[(i, 0)]
                            + new_coef[2] * data.z[(i, 1)]
                            + d * (new_coef[1] * data.z[(i, 0)] + new_coef[3] * data.z[(i, 1)]);
                        let r2 = (data.y[i] - mean).powi(2);
                        let q = r2 * (-2.0 * (lam + lam_slope * d)).exp();
                        g[0] += w * (q - 1.0);
                        g[1] += w * d * (q - 1.0);
                        hmat[(0, 0)] -= 2.0 * w * q;
                        hmat[(0, 1)] -= 2.0 * w * d * q;
                        hmat[(1, 0)] -= 2.0 * w * d * q;
                        hmat[(1, 1)] -= 2.0 * w * d * d * q;
                    }
                    if g.amax() < 1e-14 {
                        break;
                    }
                    let step = (-hmat.clone()).cholesky().unwrap().solve(&g);
                    lam += step[0];
                    lam_slope += step[1];
                }
                let moved = (&new_coef - &coef).amax();
                coef = new_coef;
                if moved < 1e-14 {
                    break;
                }
            }
            for j in 0..2 {
                assert_abs_diff_eq!(points[gi].alpha[(0, j)], coef[2 * j], epsilon = 1e-6);
                assert_abs_diff_eq!(points[gi].alpha_slope[(0, j)], coef[2 * j + 1], epsilon = 1e-6);
            }
            assert_abs_diff_eq!(points[gi].log_delta[0], lam, epsilon = 1e-6);
            assert_abs_diff_eq!(points[gi].log_delta_slope[0], lam_slope, epsilon = 1e-6);
        }
    }

    #[test]
    fn m_step_surfaces_singular_hessian_on_degenerate_design() {
        // A zero-variance expert column leaves the local normal equations
        // rank deficient at every node.
        let spec = two_gauss_spec();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let n = 40;
        let mut u = Array1::zeros(n);
        let mut z = Array2::zeros((n, 2));
        let mut y = Array1::zeros(n);
        for i in 0..n {
            u[i] = rng.gen::<f64>();
            z[(i, 0)] = 1.0;
            z[(i, 1)] = 0.0;
            y[i] = standard_normal(&mut rng);
        }
        let x = z.clone();
        let data = Dataset::new(u, x, z, y).unwrap();
        let mut g = Array2::zeros((n, 2));
        g.column_mut(0).fill(1.0);
        let gamma = Responsibilities::new(g).unwrap();
        let mut config = FitConfig::new(0.4);
        config.grid = vec![0.5];
        let err = m_step(&spec, &gamma, &data, &config).unwrap_err();
        assert!(matches!(err, Error::SingularHessian { .. }));
    }

    #[test]
    fn m_step_reports_empty_window() {
        let spec = two_gauss_spec();
        let mut data = separated_data(40, 5, 4.0);
        data.u.mapv_inplace(|v| 0.3 * v);
        let gamma =
            init_responsibilities(&spec, &data, &InitStrategy::QuantileSplit, 0).unwrap();
        let mut config = FitConfig::new(0.05);
        config.grid = vec![0.2, 0.99];
        let err = m_step(&spec, &gamma, &data, &config).unwrap_err();
        assert!(matches!(err, Error::NoEffectiveSamples { .. }));
    }

    #[test]
    fn observation_average_of_piecewise_linear_curve() {
        let spec = ModelSpec::new(2, ExpertFamily::Gaussian, GatingForm::Logistic, 1, 1).unwrap();
        let n = 21;
        let u = Array1::from_iter((0..n).map(|i| i as f64 / (n - 1) as f64));
        let data = Dataset::new(
            u,
            Array2::from_elem((n, 1), 1.0),
            Array2::from_elem((n, 1), 1.0),
            Array1::zeros(n),
        )
        .unwrap();
        let mut config = FitConfig::new(0.5);
        config.grid = vec![0.0, 0.5, 1.0];
        let (ctx, _) = FitCtx::new(&spec, &data, &config).unwrap();
        let mut points = vec![ThetaPoint::zeros(&spec); 3];
        for (k, p) in points.iter_mut().enumerate() {
            p.beta[(0, 0)] = (k + 1) as f64;
        }
        // Symmetric observation points over a piecewise-linear 1->2->3
        // curve average to exactly 2.
        let avg = ctx.average_at_observations(&points, CoefId::Beta { class: 0, col: 0 });
        assert_abs_diff_eq!(avg, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn fit_recovers_separated_mixture_with_hard_labels() {
        let spec = two_gauss_spec();
        let data = separated_data(400, 6, 5.0);
        let mut config = FitConfig::new(0.3);
        config.grid = (0..26).map(|i| i as f64 / 25.0).collect();
        let curve = fit_vcmoe(&spec, &data, &config).unwrap();
        assert!(curve.converged, "EM did not converge: trace {:?}", curve.loglik_trace);

        // Responsibilities should be near-hard for almost every row.
        let n = data.n();
        let hard = (0..n)
            .filter(|&i| {
                let g = curve.responsibilities.gamma.row(i);
                g.iter().cloned().fold(f64::MIN, f64::max) >= 0.99
            })
            .count();
        assert!(hard as f64 >= 0.97 * n as f64, "only {hard} hard rows of {n}");

        // Expert intercepts sit near the component offsets after aligning
        // by sign (labels may be globally swapped).
        let a0: Vec<f64> = curve.coef_values(CoefId::Alpha { class: 0, col: 0 });
        let mean0 = a0.iter().sum::<f64>() / a0.len() as f64;
        let (hi, lo) = if mean0 > 0.0 { (0, 1) } else { (1, 0) };
        for p in &curve.points {
            assert!((p.alpha[(hi, 0)] - 5.0).abs() < 0.8, "alpha_hi {}", p.alpha[(hi, 0)]);
            assert!((p.alpha[(lo, 0)] + 5.0).abs() < 0.8, "alpha_lo {}", p.alpha[(lo, 0)]);
        }

        // Label consistency along the grid: each class's step to the next
        // node is smaller than the cross-class distance.
        for w in curve.points.windows(2) {
            for c in 0..2 {
                for c2 in 0..2 {
                    if c2 == c {
                        continue;
                    }
                    let same: f64 = (0..2)
                        .map(|j| (w[0].alpha[(c, j)] - w[1].alpha[(c, j)]).powi(2))
                        .sum::<f64>()
                        + (w[0].log_delta[c] - w[1].log_delta[c]).powi(2);
                    let cross: f64 = (0..2)
                        .map(|j| (w[0].alpha[(c, j)] - w[1].alpha[(c2, j)]).powi(2))
                        .sum::<f64>()
                        + (w[0].log_delta[c] - w[1].log_delta[c2]).powi(2);
                    assert!(same <= cross, "label flip between adjacent nodes");
                }
            }
        }
    }

    #[test]
    fn zero_iterations_returns_initial_curve_unconverged() {
        let spec = two_gauss_spec();
        let data = separated_data(60, 7, 4.0);
        let mut config = FitConfig::new(0.4);
        config.grid = vec![0.25, 0.5, 0.75];
        config.max_iter = 0;
        let curve = fit_vcmoe(&spec, &data, &config).unwrap();
        assert!(!curve.converged);
        assert_eq!(curve.n_iter, 0);
        assert_eq!(curve.loglik_trace.len(), 1);
    }

    #[test]
    fn fit_is_bitwise_deterministic() {
        let spec = two_gauss_spec();
        let data = separated_data(120, 8, 4.0);
        let mut config = FitConfig::new(0.35);
        config.grid = (0..11).map(|i| i as f64 / 10.0).collect();
        config.init = InitStrategy::Random;
        config.seed = 42;
        let a = fit_vcmoe(&spec, &data, &config).unwrap();
        let b = fit_vcmoe(&spec, &data, &config).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    /// Parameters of the unlocalized mixture EM oracle: every coefficient
    /// is a line `value + slope * u`, matching the free local family, but
    /// fitted globally with no kernel.
    struct GlobalLineFit {
        /// Gating `[a0, b0, a1, b1]` interleaved per column of x.
        gate: DVector<f64>,
        /// Expert mean lines per class, interleaved per column of z.
        mean: [DVector<f64>; 2],
        /// Log-dispersion lines per class.
        lam: [(f64, f64); 2],
    }

    /// Plain finite-mixture EM over the same local-linear coefficient
    /// family, anchored at u = 0: gating by Newton, expert means by
    /// reweighted least squares, scale lines by two-parameter Newton.
    fn oracle_line_mixture_em(data: &Dataset, gamma0: &Array2<f64>) -> GlobalLineFit {
        let n = data.n();
        let mut gamma = gamma0.clone();
        let mut fit = GlobalLineFit {
            gate: DVector::zeros(4),
            mean: [DVector::zeros(4), DVector::zeros(4)],
            lam: [(0.0, 0.0); 2],
        };
        let row_x = |i: usize| {
            let d = data.u[i];
            DVector::from_vec(vec![
                data.x[(i, 0)],
                data.x[(i, 0)] * d,
                data.x[(i, 1)],
                data.x[(i, 1)] * d,
            ])
        };
        let row_z = |i: usize| {
            let d = data.u[i];
            DVector::from_vec(vec![
                data.z[(i, 0)],
                data.z[(i, 0)] * d,
                data.z[(i, 1)],
                data.z[(i, 1)] * d,
            ])
        };
        for _ in 0..3000 {
            let mut moved = 0.0f64;
            // Gating Newton steps on the soft-label logistic likelihood.
            for _ in 0..8 {
                let mut g = DVector::zeros(4);
                let mut hmat = DMatrix::zeros(4, 4);
                for i in 0..n {
                    let x = row_x(i);
                    let p = crate::model::expit(fit.gate.dot(&x));
                    g += &x * (gamma[(i, 0)] - p);
                    hmat += &x * x.transpose() * (p * (1.0 - p));
                }
                if g.amax() < 1e-14 {
                    break;
                }
                let step = hmat.cholesky().unwrap().solve(&g);
                moved = moved.max(step.amax());
                fit.gate += step;
            }
            for c in 0..2 {
                // Mean line by least squares reweighted with the current
                // per-observation variance.
                let mut ztz = DMatrix::zeros(4, 4);
                let mut zty = DVector::zeros(4);
                for i in 0..n {
                    let z = row_z(i);
                    let w = gamma[(i, c)]
                        * (-2.0 * (fit.lam[c].0 + fit.lam[c].1 * data.u[i])).exp();
                    ztz += &z * z.transpose() * w;
                    zty += &z * (w * data.y[i]);
                }
                let new_mean = ztz.cholesky().unwrap().solve(&zty);
                moved = moved.max((&new_mean - &fit.mean[c]).amax());
                fit.mean[c] = new_mean;
                // Scale line Newton given residuals.
                for _ in 0..8 {
                    let mut g = DVector::zeros(2);
                    let mut hmat = DMatrix::zeros(2, 2);
                    for i in 0..n {
                        let d = data.u[i];
                        let w = gamma[(i, c)];
                        let r2 = (data.y[i] - fit.mean[c].dot(&row_z(i))).powi(2);
                        let q = r2 * (-2.0 * (fit.lam[c].0 + fit.lam[c].1 * d)).exp();
                        g[0] += w * (q - 1.0);
                        g[1] += w * d * (q - 1.0);
                        hmat[(0, 0)] -= 2.0 * w * q;
                        hmat[(0, 1)] -= 2.0 * w * d * q;
                        hmat[(1, 0)] -= 2.0 * w * d * q;
                        hmat[(1, 1)] -= 2.0 * w * d * d * q;
                    }
                    if g.amax() < 1e-14 {
                        break;
                    }
                    let step = (-hmat.clone()).cholesky().unwrap().solve(&g);
                    moved = moved.max(step.amax());
                    fit.lam[c].0 += step[0];
                    fit.lam[c].1 += step[1];
                }
            }
            // E-step.
            for i in 0..n {
                let p1 = crate::model::expit(fit.gate.dot(&row_x(i)));
                let z = row_z(i);
                let mut dens = [0.0f64; 2];
                for c in 0..2 {
                    let sd = (fit.lam[c].0 + fit.lam[c].1 * data.u[i]).exp();
                    let r = (data.y[i] - fit.mean[c].dot(&z)) / sd;
                    dens[c] = (-0.5 * r * r).exp() / sd;
                }
                let w1 = p1 * dens[0];
                let w2 = (1.0 - p1) * dens[1];
                let g1 = w1 / (w1 + w2);
                moved = moved.max((gamma[(i, 0)] - g1).abs());
                gamma[(i, 0)] = g1;
                gamma[(i, 1)] = 1.0 - g1;
            }
            if moved < 1e-13 {
                break;
            }
        }
        fit
    }

    #[test]
    fn huge_bandwidth_matches_unlocalized_mixture_em() {
        // At h = 10 every kernel window covers all of [0, 1] with nearly
        // uniform weights, so the fit agrees with a plain finite-mixture
        // EM over the same local-linear coefficient family. Node g's
        // values sit on the oracle's global line at u_g.
        let spec = two_gauss_spec();
        let data = separated_data(600, 9, 4.0);
        let g0 = init_responsibilities(&spec, &data, &InitStrategy::QuantileSplit, 0).unwrap();
        let oracle = oracle_line_mixture_em(&data, &g0.gamma);

        let mut config = FitConfig::new(10.0);
        config.grid = (0..10).map(|i| i as f64 / 9.0).collect();
        config.max_iter = 500;
        config.convergence = Convergence::RelLogLik { tol: 1e-13 };
        let curve = fit_vcmoe(&spec, &data, &config).unwrap();

        // Align labels by the expert intercept at the middle node; a swap
        // also flips the gating sign.
        let mid = &curve.points[5];
        let om = [oracle.mean[0][0] + oracle.mean[0][1] * curve.grid[5],
                  oracle.mean[1][0] + oracle.mean[1][1] * curve.grid[5]];
        let (c1, c2) = if (mid.alpha[(0, 0)] - om[0]).abs() < (mid.alpha[(0, 0)] - om[1]).abs() {
            (0usize, 1usize)
        } else {
            (1, 0)
        };
        let sign = if c1 == 0 { 1.0 } else { -1.0 };
        for (g, p) in curve.points.iter().enumerate() {
            let u = curve.grid[g];
            for j in 0..2 {
                let gate_val = oracle.gate[2 * j] + oracle.gate[2 * j + 1] * u;
                assert_abs_diff_eq!(sign * p.beta[(0, j)], gate_val, epsilon = 1e-3);
                assert_abs_diff_eq!(sign * p.beta_slope[(0, j)], oracle.gate[2 * j + 1], epsilon = 1e-3);
                for (cf, co) in [(c1, 0usize), (c2, 1usize)] {
                    let mean_val = oracle.mean[co][2 * j] + oracle.mean[co][2 * j + 1] * u;
                    assert_abs_diff_eq!(p.alpha[(cf, j)], mean_val, epsilon = 1e-3);
                }
            }
            for (cf, co) in [(c1, 0usize), (c2, 1usize)] {
                let lam_val = oracle.lam[co].0 + oracle.lam[co].1 * u;
                assert_abs_diff_eq!(p.log_delta[cf], lam_val, epsilon = 1e-3);
                assert_abs_diff_eq!(p.log_delta_slope[cf], oracle.lam[co].1, epsilon = 1e-3);
            }
        }
    }

    #[test]
    fn fit_constant_flattens_target_to_observation_average() {
        let spec = two_gauss_spec();
        let data = separated_data(300, 10, 5.0);
        let mut config = FitConfig::new(0.3);
        config.grid = (0..21).map(|i| i as f64 / 20.0).collect();
        let target = CoefId::Beta { class: 0, col: 0 };
        let (constant, curve) = fit_constant(&spec, &data, &config, target).unwrap();
        for p in &curve.points {
            assert_eq!(p.beta[(0, 0)], constant);
            assert_eq!(p.beta_slope[(0, 0)], 0.0);
        }
        // The gate intercept is +-0.3 depending on label orientation.
        assert!(
            (constant.abs() - 0.3).abs() < 0.35,
            "constant gate intercept {constant} far from truth"
        );
        // Other coefficients remain functional (not all equal).
        let a: Vec<f64> = curve.coef_values(CoefId::Alpha { class: 0, col: 0 });
        assert!(a.windows(2).any(|w| (w[0] - w[1]).abs() > 1e-9));
    }
}
