//! Analytic derivatives of the local objective and the mixture density.
//!
//! Both the M-step objective and the sandwich covariance differentiate with
//! respect to the free local parameters at a grid point: for every
//! coefficient not held constant, a value `a` and a slope `b` entering the
//! data through `a + b (U_i - u)`. [`ParamLayout`] fixes the packing order
//! (canonical coefficient order, value before slope) and maps between flat
//! vectors and [`ThetaPoint`]s.
//!
//! The complete-data objective `Q` treats responsibilities as fixed
//! weights, so its Hessian is block diagonal between the gating block and
//! each expert class. The mixture log density reuses the same blocks via
//! the posterior weights, plus the score outer-product correction.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, ArrayView1};

use super::{
    expit, ln_binom, log_gate_from_scores, log_sum_exp, softplus, CoefId, ExpertFamily, ModelSpec,
    Responsibilities, ThetaPoint,
};
use crate::error::{Error, Result};
use crate::fit::Dataset;
use crate::kernel::KernelSpec;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_7;

/// Packing of free local parameters into a flat vector.
///
/// Coefficient `k` of the canonical order, when free, occupies slots
/// `2 j` (value) and `2 j + 1` (slope) where `j` counts free coefficients
/// before it. Frozen coefficients keep whatever value and slope the
/// current [`ThetaPoint`] carries.
#[derive(Debug, Clone)]
pub struct ParamLayout {
    free_ids: Vec<CoefId>,
    /// Value-slot per gating coefficient, row-major `(C-1) x p_x`.
    beta_slot: Vec<Option<usize>>,
    /// Value-slot per expert coefficient, row-major `C x p_z`.
    alpha_slot: Vec<Option<usize>>,
    /// Value-slot per log dispersion, length `C`; empty without dispersion.
    delta_slot: Vec<Option<usize>>,
}

impl ParamLayout {
    /// Layout honoring the spec's constant mask.
    pub fn from_spec(spec: &ModelSpec) -> Self {
        Self::with_mask(spec, &spec.constant_mask)
    }

    /// Layout with every coefficient free.
    pub fn all_free(spec: &ModelSpec) -> Self {
        Self::with_mask(spec, &vec![false; spec.n_coefficients()])
    }

    /// Layout freezing the masked coefficients.
    pub fn with_mask(spec: &ModelSpec, mask: &[bool]) -> Self {
        assert_eq!(mask.len(), spec.n_coefficients());
        let ids = spec.coef_ids();
        let mut free_ids = Vec::new();
        let mut slot_of = vec![None; ids.len()];
        for (k, id) in ids.iter().enumerate() {
            if !mask[k] {
                slot_of[k] = Some(2 * free_ids.len());
                free_ids.push(*id);
            }
        }
        let c = spec.n_components;
        let beta_slot = (0..(c - 1) * spec.p_x).map(|k| slot_of[k]).collect();
        let alpha_slot =
            (0..c * spec.p_z).map(|k| slot_of[(c - 1) * spec.p_x + k]).collect();
        let delta_slot = if spec.has_dispersion() {
            (0..c).map(|k| slot_of[(c - 1) * spec.p_x + c * spec.p_z + k]).collect()
        } else {
            Vec::new()
        };
        ParamLayout { free_ids, beta_slot, alpha_slot, delta_slot }
    }

    /// Number of flat parameters (two per free coefficient).
    pub fn n_params(&self) -> usize {
        2 * self.free_ids.len()
    }

    /// Free coefficients in slot order.
    pub fn free_ids(&self) -> &[CoefId] {
        &self.free_ids
    }

    /// Read the free values and slopes of `theta` into a flat vector.
    pub fn read(&self, theta: &ThetaPoint) -> DVector<f64> {
        let mut psi = DVector::zeros(self.n_params());
        for (j, id) in self.free_ids.iter().enumerate() {
            psi[2 * j] = theta.coef(*id);
            psi[2 * j + 1] = theta.slope(*id);
        }
        psi
    }

    /// Write a flat vector back into the free entries of `theta`.
    pub fn write(&self, psi: &DVector<f64>, theta: &mut ThetaPoint) {
        for (j, id) in self.free_ids.iter().enumerate() {
            *theta.coef_mut(*id) = psi[2 * j];
            *theta.slope_mut(*id) = psi[2 * j + 1];
        }
    }

    fn beta_slot(&self, class: usize, col: usize, p_x: usize) -> Option<usize> {
        self.beta_slot[class * p_x + col]
    }

    fn alpha_slot(&self, class: usize, col: usize, p_z: usize) -> Option<usize> {
        self.alpha_slot[class * p_z + col]
    }

    fn delta_slot(&self, class: usize) -> Option<usize> {
        if self.delta_slot.is_empty() {
            None
        } else {
            self.delta_slot[class]
        }
    }
}

/// One observation as seen by a local solve: design rows, response,
/// responsibility row, kernel weight, and index offset `d = U_i - u`.
#[derive(Clone, Copy)]
pub(crate) struct LocalObs<'a> {
    pub x: &'a [f64],
    pub z: &'a [f64],
    pub y: f64,
    pub gamma: &'a [f64],
    pub w: f64,
    pub d: f64,
}

/// Reusable buffers for objective accumulation.
#[derive(Debug, Default)]
pub(crate) struct DerivScratch {
    scores: Vec<f64>,
    probs: Vec<f64>,
    log_probs: Vec<f64>,
}

impl DerivScratch {
    pub fn new(spec: &ModelSpec) -> Self {
        DerivScratch {
            scores: vec![0.0; spec.n_components - 1],
            probs: vec![0.0; spec.n_components],
            log_probs: vec![0.0; spec.n_components],
        }
    }
}

/// Add `v * [[1, d], [d, d^2]]` into the 2x2 block at `(p, q)`.
#[inline]
fn add_block(hess: &mut DMatrix<f64>, p: usize, q: usize, v: f64, d: f64) {
    hess[(p, q)] += v;
    hess[(p, q + 1)] += v * d;
    hess[(p + 1, q)] += v * d;
    hess[(p + 1, q + 1)] += v * d * d;
}

/// Evaluate gate scores and probabilities at offset `d`; fills scratch.
#[inline]
fn eval_gate(spec: &ModelSpec, theta: &ThetaPoint, x: &[f64], d: f64, s: &mut DerivScratch) {
    let c = spec.n_components;
    for class in 0..c - 1 {
        let mut acc = 0.0;
        for (j, &xv) in x.iter().enumerate() {
            acc += (theta.beta[(class, j)] + theta.beta_slope[(class, j)] * d) * xv;
        }
        s.scores[class] = acc;
    }
    log_gate_from_scores(&s.scores, &mut s.log_probs);
    for (p, &lp) in s.probs.iter_mut().zip(s.log_probs.iter()) {
        *p = lp.exp();
    }
}

/// First and second derivative pack for one expert class at one
/// observation, with respect to the linear predictor and (for Gaussian)
/// the log dispersion.
struct ExpertDerivs {
    logphi: f64,
    d_lin: f64,
    d_lam: f64,
    h_lin_lin: f64,
    h_lin_lam: f64,
    h_lam_lam: f64,
}

#[inline]
fn eval_expert(spec: &ModelSpec, theta: &ThetaPoint, class: usize, z: &[f64], y: f64, d: f64) -> ExpertDerivs {
    let mut lin = 0.0;
    for (j, &zv) in z.iter().enumerate() {
        lin += (theta.alpha[(class, j)] + theta.alpha_slope[(class, j)] * d) * zv;
    }
    match spec.expert {
        ExpertFamily::Gaussian => {
            let lam = theta.log_delta[class] + theta.log_delta_slope[class] * d;
            let q2 = (-2.0 * lam).exp();
            let r = y - lin;
            ExpertDerivs {
                logphi: -LN_SQRT_2PI - lam - 0.5 * q2 * r * r,
                d_lin: q2 * r,
                d_lam: q2 * r * r - 1.0,
                h_lin_lin: -q2,
                h_lin_lam: -2.0 * q2 * r,
                h_lam_lam: -2.0 * q2 * r * r,
            }
        }
        ExpertFamily::Binomial { trials } => {
            let m = f64::from(trials);
            let p = expit(lin);
            ExpertDerivs {
                logphi: ln_binom(m, y) + y * lin - m * softplus(lin),
                d_lin: y - m * p,
                d_lam: 0.0,
                h_lin_lin: -m * p * (1.0 - p),
                h_lin_lam: 0.0,
                h_lam_lam: 0.0,
            }
        }
    }
}

/// Accumulate the complete-data objective value, gradient, and Hessian
/// over a stream of observations. `grad` and `hess` must be zeroed by the
/// caller; returns the objective value.
pub(crate) fn accumulate_q<'a>(
    spec: &ModelSpec,
    layout: &ParamLayout,
    theta: &ThetaPoint,
    obs: impl Iterator<Item = LocalObs<'a>>,
    scratch: &mut DerivScratch,
    grad: &mut DVector<f64>,
    hess: &mut DMatrix<f64>,
) -> f64 {
    let c = spec.n_components;
    let mut q = 0.0;
    for o in obs {
        if o.w == 0.0 {
            continue;
        }
        eval_gate(spec, theta, o.x, o.d, scratch);

        // Gating block: multinomial score and curvature in the class
        // scores, chained through the design row and offset.
        for class in 0..c {
            q += o.w * o.gamma[class] * scratch.log_probs[class];
        }
        for m in 0..c - 1 {
            let e_m = o.gamma[m] - scratch.probs[m];
            for (j, &xj) in o.x.iter().enumerate() {
                if let Some(p) = layout.beta_slot(m, j, spec.p_x) {
                    let g = o.w * e_m * xj;
                    grad[p] += g;
                    grad[p + 1] += g * o.d;
                }
            }
            for l in 0..c - 1 {
                let dml = if m == l { 1.0 } else { 0.0 };
                let curv = -o.w * scratch.probs[m] * (dml - scratch.probs[l]);
                if curv == 0.0 {
                    continue;
                }
                for (j, &xj) in o.x.iter().enumerate() {
                    let Some(p) = layout.beta_slot(m, j, spec.p_x) else { continue };
                    for (k, &xk) in o.x.iter().enumerate() {
                        if let Some(qs) = layout.beta_slot(l, k, spec.p_x) {
                            add_block(hess, p, qs, curv * xj * xk, o.d);
                        }
                    }
                }
            }
        }

        // Expert blocks: each class couples its own linear predictor and
        // (Gaussian) log dispersion.
        for class in 0..c {
            let g_c = o.gamma[class];
            if g_c == 0.0 {
                continue;
            }
            let e = eval_expert(spec, theta, class, o.z, o.y, o.d);
            let wg = o.w * g_c;
            q += wg * e.logphi;
            for (j, &zj) in o.z.iter().enumerate() {
                if let Some(p) = layout.alpha_slot(class, j, spec.p_z) {
                    let g = wg * e.d_lin * zj;
                    grad[p] += g;
                    grad[p + 1] += g * o.d;
                    for (k, &zk) in o.z.iter().enumerate() {
                        if let Some(qs) = layout.alpha_slot(class, k, spec.p_z) {
                            add_block(hess, p, qs, wg * e.h_lin_lin * zj * zk, o.d);
                        }
                    }
                    if let Some(pl) = layout.delta_slot(class) {
                        let v = wg * e.h_lin_lam * zj;
                        add_block(hess, p, pl, v, o.d);
                        add_block(hess, pl, p, v, o.d);
                    }
                }
            }
            if let Some(pl) = layout.delta_slot(class) {
                grad[pl] += wg * e.d_lam;
                grad[pl + 1] += wg * e.d_lam * o.d;
                add_block(hess, pl, pl, wg * e.h_lam_lam, o.d);
            }
        }
    }
    q
}

/// Buffers for mixture score and Hessian assembly.
#[derive(Debug, Default)]
pub(crate) struct MixtureScratch {
    inner: DerivScratch,
    /// Per-class complete-data scores, one column per class.
    class_scores: DMatrix<f64>,
    post: Vec<f64>,
    terms: Vec<f64>,
    mean_score: DVector<f64>,
}

impl MixtureScratch {
    pub fn new(spec: &ModelSpec, layout: &ParamLayout) -> Self {
        MixtureScratch {
            inner: DerivScratch::new(spec),
            class_scores: DMatrix::zeros(layout.n_params(), spec.n_components),
            post: vec![0.0; spec.n_components],
            terms: vec![0.0; spec.n_components],
            mean_score: DVector::zeros(layout.n_params()),
        }
    }
}

/// Gradient and Hessian of `log f(y | x, z)` in the free local parameters
/// for one observation at offset `d`, unweighted. Returns the log density
/// alongside; the complete-data blocks are reused through the posterior
/// weights and corrected with score outer products.
pub(crate) fn accumulate_mixture(
    spec: &ModelSpec,
    layout: &ParamLayout,
    theta: &ThetaPoint,
    x: &[f64],
    z: &[f64],
    y: f64,
    d: f64,
    scratch: &mut MixtureScratch,
    grad: &mut DVector<f64>,
    hess: &mut DMatrix<f64>,
) -> f64 {
    let c = spec.n_components;
    let p = layout.n_params();
    grad.fill(0.0);
    hess.fill(0.0);
    eval_gate(spec, theta, x, d, &mut scratch.inner);
    scratch.class_scores.fill(0.0);

    // Posterior over classes and per-class complete scores.
    let mut experts: Vec<ExpertDerivs> = Vec::with_capacity(c);
    for class in 0..c {
        let e = eval_expert(spec, theta, class, z, y, d);
        scratch.terms[class] = scratch.inner.log_probs[class] + e.logphi;
        experts.push(e);
    }
    let logf = log_sum_exp(&scratch.terms);
    for class in 0..c {
        scratch.post[class] = (scratch.terms[class] - logf).exp();
    }

    for class in 0..c {
        let mut col = scratch.class_scores.column_mut(class);
        // Gating part of the class-c score: indicator minus probability.
        for m in 0..c - 1 {
            let dcm = if class == m { 1.0 } else { 0.0 };
            let e_m = dcm - scratch.inner.probs[m];
            for (j, &xj) in x.iter().enumerate() {
                if let Some(pp) = layout.beta_slot(m, j, spec.p_x) {
                    col[pp] += e_m * xj;
                    col[pp + 1] += e_m * xj * d;
                }
            }
        }
        // Expert part: only the class's own block.
        let e = &experts[class];
        for (j, &zj) in z.iter().enumerate() {
            if let Some(pp) = layout.alpha_slot(class, j, spec.p_z) {
                col[pp] += e.d_lin * zj;
                col[pp + 1] += e.d_lin * zj * d;
            }
        }
        if let Some(pl) = layout.delta_slot(class) {
            col[pl] += e.d_lam;
            col[pl + 1] += e.d_lam * d;
        }
    }

    // Mixture score: posterior-weighted complete scores.
    scratch.mean_score.fill(0.0);
    for class in 0..c {
        let g = scratch.post[class];
        for r in 0..p {
            scratch.mean_score[r] += g * scratch.class_scores[(r, class)];
        }
    }
    grad.copy_from(&scratch.mean_score);

    // Posterior-weighted complete Hessian. The gating curvature is the
    // same multinomial form for every class, so posterior weights sum out.
    for m in 0..c - 1 {
        for l in 0..c - 1 {
            let dml = if m == l { 1.0 } else { 0.0 };
            let curv = -scratch.inner.probs[m] * (dml - scratch.inner.probs[l]);
            if curv == 0.0 {
                continue;
            }
            for (j, &xj) in x.iter().enumerate() {
                let Some(pp) = layout.beta_slot(m, j, spec.p_x) else { continue };
                for (k, &xk) in x.iter().enumerate() {
                    if let Some(qs) = layout.beta_slot(l, k, spec.p_x) {
                        add_block(hess, pp, qs, curv * xj * xk, d);
                    }
                }
            }
        }
    }
    for class in 0..c {
        let g = scratch.post[class];
        if g == 0.0 {
            continue;
        }
        let e = &experts[class];
        for (j, &zj) in z.iter().enumerate() {
            if let Some(pp) = layout.alpha_slot(class, j, spec.p_z) {
                for (k, &zk) in z.iter().enumerate() {
                    if let Some(qs) = layout.alpha_slot(class, k, spec.p_z) {
                        add_block(hess, pp, qs, g * e.h_lin_lin * zj * zk, d);
                    }
                }
                if let Some(pl) = layout.delta_slot(class) {
                    let v = g * e.h_lin_lam * zj;
                    add_block(hess, pp, pl, v, d);
                    add_block(hess, pl, pp, v, d);
                }
            }
        }
        if let Some(pl) = layout.delta_slot(class) {
            add_block(hess, pl, pl, g * e.h_lam_lam, d);
        }
    }

    // Score-variance correction: Σ γ s s' - (Σ γ s)(Σ γ s)'.
    for class in 0..c {
        let g = scratch.post[class];
        if g == 0.0 {
            continue;
        }
        let col = scratch.class_scores.column(class);
        for r in 0..p {
            let gr = g * col[r];
            if gr == 0.0 {
                continue;
            }
            for s in 0..p {
                hess[(r, s)] += gr * col[s];
            }
        }
    }
    for r in 0..p {
        let gr = scratch.mean_score[r];
        for s in 0..p {
            hess[(r, s)] -= gr * scratch.mean_score[s];
        }
    }

    logf
}

/// Objective accumulation over one precomputed node window.
pub(crate) fn accumulate_q_nodedata(
    spec: &ModelSpec,
    layout: &ParamLayout,
    theta: &ThetaPoint,
    node: &crate::fit::NodeData<'_>,
    scratch: &mut DerivScratch,
    grad: &mut DVector<f64>,
    hess: &mut DMatrix<f64>,
) -> f64 {
    accumulate_q(spec, layout, theta, node.iter(), scratch, grad, hess)
}

/// Kernel-weighted complete-data objective, gradient, and Hessian at
/// index point `u` with bandwidth `h`, differentiated in the free local
/// parameters of `spec` (constant-masked coefficients stay fixed at the
/// values in `theta`).
///
/// The gradient and Hessian are packed per [`ParamLayout::from_spec`]:
/// for each free coefficient in canonical order, its value then its slope.
pub fn local_objective_grad_hess(
    spec: &ModelSpec,
    theta: &ThetaPoint,
    gamma: &Responsibilities,
    data: &Dataset,
    u: f64,
    h: f64,
) -> Result<(f64, Array1<f64>, Array2<f64>)> {
    let kernel = KernelSpec::epanechnikov();
    let n = data.n();
    if gamma.n() != n {
        return Err(Error::InvalidData(format!(
            "responsibility rows {} do not match n = {n}",
            gamma.n()
        )));
    }
    let layout = ParamLayout::from_spec(spec);
    let p = layout.n_params();
    let mut grad = DVector::zeros(p);
    let mut hess = DMatrix::zeros(p, p);
    let mut scratch = DerivScratch::new(spec);

    let mut weights = Vec::with_capacity(n);
    let mut any = false;
    for i in 0..n {
        let w = kernel.scaled_weight(data.u[i] - u, h)?;
        any |= w > 0.0;
        weights.push(w);
    }
    if !any {
        return Err(Error::NoEffectiveSamples { u, h });
    }

    let x_rows = data.x.as_standard_layout();
    let z_rows = data.z.as_standard_layout();
    let obs = (0..n).map(|i| LocalObs {
        x: x_rows.row(i).to_slice().expect("row-major design"),
        z: z_rows.row(i).to_slice().expect("row-major design"),
        y: data.y[i],
        gamma: gamma.gamma.row(i).to_slice().expect("row-major responsibilities"),
        w: weights[i],
        d: data.u[i] - u,
    });
    let q = accumulate_q(spec, &layout, theta, obs, &mut scratch, &mut grad, &mut hess);

    let grad_nd = Array1::from_iter(grad.iter().cloned());
    let mut hess_nd = Array2::zeros((p, p));
    for r in 0..p {
        for c in 0..p {
            hess_nd[(r, c)] = hess[(r, c)];
        }
    }
    Ok((q, grad_nd, hess_nd))
}

/// Per-observation mixture log density, score, and Hessian in the free
/// local parameters at offset `d`, unweighted. Building block for the
/// sandwich covariance; exposed for derivative checking.
pub fn mixture_grad_hess(
    spec: &ModelSpec,
    theta: &ThetaPoint,
    x: ArrayView1<f64>,
    z: ArrayView1<f64>,
    y: f64,
    d: f64,
) -> (f64, Array1<f64>, Array2<f64>) {
    let layout = ParamLayout::from_spec(spec);
    let p = layout.n_params();
    let mut grad = DVector::zeros(p);
    let mut hess = DMatrix::zeros(p, p);
    let mut scratch = MixtureScratch::new(spec, &layout);
    let xv: Vec<f64> = x.iter().cloned().collect();
    let zv: Vec<f64> = z.iter().cloned().collect();
    let logf = accumulate_mixture(
        spec, &layout, theta, &xv, &zv, y, d, &mut scratch, &mut grad, &mut hess,
    );
    let grad_nd = Array1::from_iter(grad.iter().cloned());
    let mut hess_nd = Array2::zeros((p, p));
    for r in 0..p {
        for c in 0..p {
            hess_nd[(r, c)] = hess[(r, c)];
        }
    }
    (logf, grad_nd, hess_nd)
}
