//! Expectation-maximization for JMLS parameters.
//!
//! The E-step builds, per mode, a square-root factor `M_half` of the
//! weighted second moments of the stacked vector `[x_k; x_{k+1}; u_k; y_k]`.
//! The M-step reads the regression of `[y_k; x_{k+1}]` on `[x_k; u_k]`
//! directly out of that factor, so neither covariances nor their inverses
//! are ever formed.
//!
//! Under the classic convention there are two factors per mode: one over
//! `[x_k; u_k; y_k]` weighted by `z_k` (measurement) and one over
//! `[x_k; x_{k+1}; u_{k+1}]` weighted by `z_{k+1}` (dynamics), and the
//! cross covariance is fixed at zero.

use std::time::Instant;

use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::backward::run_bif_prepared;
use crate::dynamics::PreparedModel;
use crate::error::{JmlsError, Result};
use crate::filter::run_filter_prepared;
use crate::mixture::{HybridMixture, UNBOUNDED};
use crate::model::{Convention, JmlsModel};
use crate::numkit::{qless_qr, weighted_stack_qr, UtFactor};
use crate::simulate::Dataset;
use crate::smoother::{run_smoother, smoothed_prior, JointSmoothedMixture};

/// Blocks of the square-root combined expectation of one Gaussian component
/// `N(μ, P)` over `χ` joined with a known vector `w`:
/// `[[M₁₁, M₁₂], [0, M₂₂]]` with `M₁₁ = qr([P_half; μᵀ])`, `λ = M₁₁⁻ᵀ μ`,
/// `M₁₂ = λ wᵀ`, `M₂₂ = √(1 − λᵀλ) wᵀ`.
#[derive(Clone, Debug)]
pub struct SqrtExpectation {
    pub m11: UtFactor,
    pub lambda: DVector<f64>,
    pub m12: DMatrix<f64>,
    /// Single row, stored as a column vector.
    pub m22: DVector<f64>,
}

impl SqrtExpectation {
    /// The `(p + 1) × (p + q)` block array.
    pub fn rows(&self) -> DMatrix<f64> {
        let (p, q) = (self.m11.dim(), self.m22.len());
        let mut out = DMatrix::zeros(p + 1, p + q);
        out.view_mut((0, 0), (p, p)).copy_from(self.m11.matrix());
        out.view_mut((0, p), (p, q)).copy_from(&self.m12);
        out.view_mut((p, p), (1, q)).copy_from(&self.m22.transpose());
        out
    }

    /// Square upper factor of `E[[χ; w][χ; w]ᵀ]`.
    pub fn factor(&self) -> UtFactor {
        qless_qr(&self.rows())
    }
}

/// Square-root factor of `E[[χ; w][χ; w]ᵀ]` for `χ ~ N(μ, P_halfᵀ P_half)`.
pub fn component_sqrt_expectation(mu: &DVector<f64>, p_half: &UtFactor, w: &DVector<f64>) -> Result<SqrtExpectation> {
    let p = mu.len();
    let mut stack = DMatrix::zeros(p + 1, p);
    stack.rows_mut(0, p).copy_from(p_half.matrix());
    stack.row_mut(p).copy_from(&mu.transpose());
    let m11 = qless_qr(&stack);
    let lambda = m11.solve_transpose(mu).ok_or(JmlsError::LambdaOverflow(f64::INFINITY))?;
    let ll = lambda.norm_squared();
    if !(ll <= 1.0 + 1e-10) {
        return Err(JmlsError::LambdaOverflow(ll));
    }
    let m12 = &lambda * w.transpose();
    let m22 = w * (1.0 - ll).max(0.0).sqrt();
    Ok(SqrtExpectation { m11, lambda, m12, m22 })
}

/// Accumulated E-step statistics.
#[derive(Clone, Debug)]
pub struct SuffStats {
    pub convention: Convention,
    /// `c_m(z) = Σ_k P(z_k = z | y)`.
    pub counts: Vec<f64>,
    /// Per mode: factor over `[x_k; x_{k+1}; u_k; y_k]` (dynamic) or
    /// `[x_k; x_{k+1}; u_{k+1}]` (classic).
    pub m_half: Vec<UtFactor>,
    /// Effective count behind `m_half`.
    pub joint_counts: Vec<f64>,
    /// Classic only: per mode factor over `[x_k; u_k; y_k]`.
    pub measurement_half: Option<Vec<UtFactor>>,
    /// `transitions[(j, i)] = Σ_k P(z_k = i, z_{k+1} = j | y)`.
    pub transitions: DMatrix<f64>,
    pub n_steps: usize,
}

struct StepStats {
    counts: Vec<f64>,
    joint: Vec<Option<UtFactor>>,
    joint_counts: Vec<f64>,
    measurement: Vec<Option<UtFactor>>,
    transitions: DMatrix<f64>,
}

fn join(a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(a.len() + b.len(), a.iter().chain(b.iter()).copied())
}

fn stack_weighted(rows: &[(f64, DMatrix<f64>)]) -> Result<Option<UtFactor>> {
    if rows.is_empty() {
        return Ok(None);
    }
    weighted_stack_qr(rows.iter().map(|(w, r)| (*w, r))).map(Some)
}

fn step_stats(joint: &JointSmoothedMixture, data: &Dataset, k: usize, convention: Convention) -> Result<StepStats> {
    let m = joint.num_modes();
    let n = data.len();
    let mut counts = vec![0.0; m];
    let mut joint_counts = vec![0.0; m];
    let mut transitions = DMatrix::zeros(m, m);
    let mut joint_rows: Vec<Vec<(f64, DMatrix<f64>)>> = vec![Vec::new(); m];
    let mut meas_rows: Vec<Vec<(f64, DMatrix<f64>)>> = vec![Vec::new(); m];
    let uy = join(&data.u[k], &data.y[k]);
    let has_next = k + 1 < n;
    for (i, row) in joint.pairs.iter().enumerate() {
        for (j, comps) in row.iter().enumerate() {
            for c in comps {
                debug_assert!(c.log_w < 700.0, "joint weight exponent {} would overflow", c.log_w);
                let w = c.log_w.exp();
                counts[i] += w;
                match convention {
                    Convention::Dynamic => {
                        transitions[(j, i)] += w;
                        joint_counts[i] += w;
                        joint_rows[i].push((w, component_sqrt_expectation(&c.mu, &c.p_half, &uy)?.rows()));
                    }
                    Convention::Classic => {
                        let n_x = c.dim() / 2;
                        let marginal_mu = c.mu.rows(0, n_x).into_owned();
                        meas_rows[i].push((w, component_sqrt_expectation(&marginal_mu, &c.p_half.leading(n_x), &uy)?.rows()));
                        if has_next {
                            transitions[(j, i)] += w;
                            joint_counts[j] += w;
                            joint_rows[j].push((w, component_sqrt_expectation(&c.mu, &c.p_half, &data.u[k + 1])?.rows()));
                        }
                    }
                }
            }
        }
    }
    Ok(StepStats {
        counts,
        joint: joint_rows.iter().map(|r| stack_weighted(r)).collect::<Result<_>>()?,
        joint_counts,
        measurement: meas_rows.iter().map(|r| stack_weighted(r)).collect::<Result<_>>()?,
        transitions,
    })
}

fn fold(acc: Option<UtFactor>, next: Option<UtFactor>) -> Result<Option<UtFactor>> {
    match (acc, next) {
        (None, x) | (x, None) => Ok(x),
        (Some(a), Some(b)) => weighted_stack_qr([(1.0, a.matrix()), (1.0, b.matrix())]).map(Some),
    }
}

/// Accumulates statistics over all steps. Per-step factors are computed in
/// parallel and folded in step order.
pub fn accumulate_stats(joint: &[JointSmoothedMixture], data: &Dataset, model: &JmlsModel) -> Result<SuffStats> {
    let (m, n_x, n_u, n_y) = (model.num_modes(), model.n_x(), model.n_u(), model.n_y());
    let conv = model.convention;
    let steps: Vec<StepStats> = joint.par_iter().enumerate().map(|(k, j)| step_stats(j, data, k, conv)).collect::<Result<_>>()?;

    let mut counts = vec![0.0; m];
    let mut joint_counts = vec![0.0; m];
    let mut transitions = DMatrix::zeros(m, m);
    let mut m_half: Vec<Option<UtFactor>> = vec![None; m];
    let mut meas: Vec<Option<UtFactor>> = vec![None; m];
    for s in steps {
        transitions += &s.transitions;
        for z in 0..m {
            counts[z] += s.counts[z];
            joint_counts[z] += s.joint_counts[z];
        }
        for (z, f) in s.joint.into_iter().enumerate() {
            m_half[z] = fold(m_half[z].take(), f)?;
        }
        for (z, f) in s.measurement.into_iter().enumerate() {
            meas[z] = fold(meas[z].take(), f)?;
        }
    }
    let joint_dim = match conv {
        Convention::Dynamic => 2 * n_x + n_u + n_y,
        Convention::Classic => 2 * n_x + n_u,
    };
    let m_half = m_half.into_iter().map(|f| f.unwrap_or_else(|| UtFactor::zeros(joint_dim))).collect();
    let measurement_half = match conv {
        Convention::Dynamic => None,
        Convention::Classic => Some(meas.into_iter().map(|f| f.unwrap_or_else(|| UtFactor::zeros(n_x + n_u + n_y))).collect()),
    };
    Ok(SuffStats { convention: conv, counts, m_half, joint_counts, measurement_half, transitions, n_steps: data.len() })
}

/// `(Σ, Φ, Ψ)` from a dynamic-layout factor: `Σ` over `[x_k; u_k]`, `Φ`
/// over `[y_k; x_{k+1}]` and `Ψ` their cross moment.
pub fn read_stats(m_half: &UtFactor, n_x: usize, n_u: usize, n_y: usize) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let (t1, t2) = dynamic_selectors(n_x, n_u, n_y);
    let m = m_half.gram();
    let sigma = &t1 * &m * t1.transpose();
    let phi = &t2 * &m * t2.transpose();
    let psi = &t2 * &m * t1.transpose();
    (sigma, phi, psi)
}

/// Selector matrices picking `[x_k; u_k]` and `[y_k; x_{k+1}]` from
/// `[x_k; x_{k+1}; u_k; y_k]`.
pub fn dynamic_selectors(n_x: usize, n_u: usize, n_y: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    selectors(2 * n_x + n_u + n_y, &dynamic_inputs(n_x, n_u), &dynamic_outputs(n_x, n_u, n_y))
}

fn dynamic_inputs(n_x: usize, n_u: usize) -> Vec<usize> {
    (0..n_x).chain(2 * n_x..2 * n_x + n_u).collect()
}

fn dynamic_outputs(n_x: usize, n_u: usize, n_y: usize) -> Vec<usize> {
    (2 * n_x + n_u..2 * n_x + n_u + n_y).chain(n_x..2 * n_x).collect()
}

fn selectors(dim: usize, inputs: &[usize], outputs: &[usize]) -> (DMatrix<f64>, DMatrix<f64>) {
    let pick = |idx: &[usize]| {
        let mut s = DMatrix::zeros(idx.len(), dim);
        for (r, &c) in idx.iter().enumerate() {
            s[(r, c)] = 1.0;
        }
        s
    };
    (pick(inputs), pick(outputs))
}

fn select_columns(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), idx.len(), |r, c| m[(r, idx[c])])
}

/// Least-squares regression read from a moment factor: returns the
/// coefficient `Γ` (outputs × inputs) unless `fixed` is given, and the
/// residual factor `(1/√count) qr(M_half (T₂ᵀ − T₁ᵀ Γᵀ))`.
fn regress(
    m_half: &UtFactor,
    inputs: &[usize],
    outputs: &[usize],
    count: f64,
    fixed: Option<&DMatrix<f64>>,
) -> Result<(DMatrix<f64>, UtFactor)> {
    let (t1, t2) = selectors(m_half.dim(), inputs, outputs);
    let gamma = match fixed {
        Some(g) => g.clone(),
        None => {
            let p = inputs.len();
            let cols: Vec<usize> = inputs.iter().chain(outputs).copied().collect();
            let r = qless_qr(&select_columns(m_half.matrix(), &cols)).into_matrix();
            let r11 = r.view((0, 0), (p, p)).into_owned();
            let r12 = r.view((0, p), (p, outputs.len())).into_owned();
            let sv = r11.clone().svd(false, false).singular_values;
            let (smax, smin) = (sv.max(), sv.min());
            let cond = if smin > 0.0 { (smax / smin).powi(2) } else { f64::INFINITY };
            let gamma_t = if cond > 1e12 {
                let ridge = 1e-10 * r11.norm_squared() / p as f64;
                warn!("regressor second moment is ill-conditioned (condition {cond:.3e}); adding ridge {ridge:.3e}");
                let mut aug = DMatrix::zeros(2 * p, p + outputs.len());
                aug.view_mut((0, 0), (p, p)).copy_from(&r11);
                aug.view_mut((0, p), (p, outputs.len())).copy_from(&r12);
                aug.view_mut((p, 0), (p, p)).fill_diagonal(ridge.sqrt());
                let ra = qless_qr(&aug).into_matrix();
                let f = UtFactor::from_upper(ra.view((0, 0), (p, p)).into_owned());
                f.solve_mat(&ra.view((0, p), (p, outputs.len())).into_owned())
            } else {
                UtFactor::from_upper(r11).solve_mat(&r12)
            };
            gamma_t.ok_or(JmlsError::DegenerateMode { mode: usize::MAX, count })?.transpose()
        }
    };
    let proj = t2.transpose() - t1.transpose() * gamma.transpose();
    let resid = qless_qr(&(m_half.matrix() * proj)).scaled(1.0 / count.sqrt());
    Ok((gamma, resid))
}

/// Which parameter groups the M-step leaves untouched.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Freeze {
    /// `A, B, C, D`.
    pub gamma: bool,
    /// Noise factor `Π_half`.
    pub pi: bool,
    pub transition: bool,
    pub prior: bool,
}

impl Freeze {
    pub fn all() -> Self {
        Freeze { gamma: true, pi: true, transition: true, prior: true }
    }
}

/// Closed-form M-step.
///
/// `transition_floor` lower-bounds every estimated transition probability
/// before renormalization (zero disables it).
pub fn mstep(
    model: &JmlsModel,
    stats: &SuffStats,
    smoothed_prior: Option<&HybridMixture>,
    freeze: &Freeze,
    transition_floor: f64,
) -> Result<JmlsModel> {
    let (m, n_x, n_u, n_y) = (model.num_modes(), model.n_x(), model.n_u(), model.n_y());
    let min_count = 1e-8 * stats.n_steps as f64;
    let mut out = model.clone();
    if !(freeze.gamma && freeze.pi) {
        for z in 0..m {
            let mode = &mut out.modes[z];
            match stats.convention {
                Convention::Dynamic => {
                    let count = stats.counts[z];
                    if count < min_count {
                        return Err(JmlsError::DegenerateMode { mode: z + 1, count });
                    }
                    let current = mode.gamma();
                    let fixed = freeze.gamma.then_some(&current);
                    let (gamma, pi_half) = regress(&stats.m_half[z], &dynamic_inputs(n_x, n_u), &dynamic_outputs(n_x, n_u, n_y), count, fixed)
                        .map_err(|_| JmlsError::DegenerateMode { mode: z + 1, count })?;
                    mode.set_gamma(&gamma);
                    if !freeze.pi {
                        mode.pi_half = pi_half;
                    }
                }
                Convention::Classic => {
                    let meas = &stats.measurement_half.as_ref().expect("classic statistics carry measurement factors")[z];
                    let (c_meas, c_dyn) = (stats.counts[z], stats.joint_counts[z]);
                    if c_meas < min_count || c_dyn < min_count {
                        return Err(JmlsError::DegenerateMode { mode: z + 1, count: c_meas.min(c_dyn) });
                    }
                    let cd = concat_cols(&mode.c, &mode.d);
                    let ab = concat_cols(&mode.a, &mode.b);
                    let (cd_new, r_half) = regress(
                        meas,
                        &(0..n_x + n_u).collect::<Vec<_>>(),
                        &(n_x + n_u..n_x + n_u + n_y).collect::<Vec<_>>(),
                        c_meas,
                        freeze.gamma.then_some(&cd),
                    )
                    .map_err(|_| JmlsError::DegenerateMode { mode: z + 1, count: c_meas })?;
                    let (ab_new, q_half) = regress(
                        &stats.m_half[z],
                        &(0..n_x).chain(2 * n_x..2 * n_x + n_u).collect::<Vec<_>>(),
                        &(n_x..2 * n_x).collect::<Vec<_>>(),
                        c_dyn,
                        freeze.gamma.then_some(&ab),
                    )
                    .map_err(|_| JmlsError::DegenerateMode { mode: z + 1, count: c_dyn })?;
                    mode.c = cd_new.columns(0, n_x).into_owned();
                    mode.d = cd_new.columns(n_x, n_u).into_owned();
                    mode.a = ab_new.columns(0, n_x).into_owned();
                    mode.b = ab_new.columns(n_x, n_u).into_owned();
                    if !freeze.pi {
                        let mut f = DMatrix::zeros(n_y + n_x, n_y + n_x);
                        f.view_mut((0, 0), (n_y, n_y)).copy_from(r_half.matrix());
                        f.view_mut((n_y, n_y), (n_x, n_x)).copy_from(q_half.matrix());
                        mode.pi_half = UtFactor::from_upper(f);
                    }
                }
            }
        }
    }
    if !freeze.transition {
        out.transition = estimate_transition(&stats.transitions, &model.transition, transition_floor);
    }
    if !freeze.prior {
        if let Some(p) = smoothed_prior {
            out.prior = p.clone();
        }
    }
    Ok(out)
}

fn concat_cols(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.nrows(), a.ncols() + b.ncols());
    out.columns_mut(0, a.ncols()).copy_from(a);
    out.columns_mut(a.ncols(), b.ncols()).copy_from(b);
    out
}

/// Column-normalized pairwise counts. Columns with no mass keep their
/// previous values.
pub fn estimate_transition(counts: &DMatrix<f64>, previous: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let mut t = counts.clone();
    for (i, mut col) in t.column_iter_mut().enumerate() {
        let s = col.sum();
        if !(s > 0.0) {
            col.copy_from(&previous.column(i));
            continue;
        }
        col /= s;
        if floor > 0.0 {
            col.apply(|p| *p = p.max(floor));
            let s = col.sum();
            col /= s;
        }
    }
    t
}

/// Controls for [`run_em`].
#[derive(Clone, Debug, PartialEq)]
pub struct EmConfig {
    pub filter_budget: usize,
    pub bif_budget: usize,
    pub smoother_budget: usize,
    pub max_iter: usize,
    /// Stop once the absolute loglik change stays below this ...
    pub tol: f64,
    /// ... for this many consecutive iterations.
    pub patience: usize,
    /// Hold `T` fixed until the linear parameters settle.
    pub stage_transition: bool,
    pub transition_delta: f64,
    pub transition_patience: usize,
    pub freeze: Freeze,
    pub transition_floor: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            filter_budget: 3,
            bif_budget: 3,
            smoother_budget: 3,
            max_iter: 100,
            tol: 1e-6,
            patience: 5,
            stage_transition: true,
            transition_delta: 0.03,
            transition_patience: 10,
            freeze: Freeze::default(),
            transition_floor: 0.0,
        }
    }
}

impl EmConfig {
    /// Exact E-step (no reduction) with staging off.
    pub fn exact() -> Self {
        EmConfig { filter_budget: UNBOUNDED, bif_budget: UNBOUNDED, smoother_budget: UNBOUNDED, stage_transition: false, ..Default::default() }
    }
}

/// State recorded at the start of each iteration.
#[derive(Clone, Debug)]
pub struct EmIterate {
    pub iteration: usize,
    /// Model evaluated in this iteration's E-step.
    pub model: JmlsModel,
    pub loglik: f64,
    pub wall_ms: f64,
    pub transition_enabled: bool,
    /// `c_m(z)` from this iteration's E-step.
    pub counts: Vec<f64>,
}

/// Result of [`run_em`].
#[derive(Clone, Debug)]
pub struct EmResult {
    pub iterates: Vec<EmIterate>,
    pub model: JmlsModel,
    pub final_loglik: f64,
    pub converged: bool,
}

/// Output of one full E-step.
#[derive(Clone, Debug)]
pub struct EStep {
    pub loglik: f64,
    pub joint: Vec<JointSmoothedMixture>,
    pub stats: SuffStats,
    pub prior: HybridMixture,
}

/// Filter, backward filter, smoother and statistic accumulation.
pub fn e_step(model: &JmlsModel, data: &Dataset, config: &EmConfig) -> Result<EStep> {
    model.check()?;
    data.check_against(model)?;
    let prepared = PreparedModel::new(model)?;
    let (filter, bif) = rayon::join(
        || run_filter_prepared(&prepared, data, config.filter_budget),
        || run_bif_prepared(&prepared, data, config.bif_budget),
    );
    let (filter, bif) = (filter?, bif?);
    let joint = run_smoother(&prepared, &filter, &bif, data, config.smoother_budget)?;
    let stats = accumulate_stats(&joint, data, model)?;
    let prior = smoothed_prior(&joint[0], config.filter_budget);
    Ok(EStep { loglik: filter.log_likelihood, joint, stats, prior })
}

/// Runs EM from `model0`.
pub fn run_em(model0: &JmlsModel, data: &Dataset, config: &EmConfig) -> Result<EmResult> {
    let mut model = model0.clone();
    let mut iterates = Vec::new();
    let mut transition_on = !config.stage_transition || config.freeze.transition;
    let (mut slow_t, mut slow) = (0usize, 0usize);
    let mut prev = f64::NAN;
    let mut converged = false;
    for it in 0..config.max_iter {
        let start = Instant::now();
        let e = e_step(&model, data, config)?;
        let dl = e.loglik - prev;
        prev = e.loglik;
        if !transition_on {
            slow_t = if dl.abs() < config.transition_delta { slow_t + 1 } else { 0 };
            if slow_t >= config.transition_patience {
                info!("iteration {it}: enabling transition matrix estimation");
                transition_on = true;
            }
        } else {
            slow = if dl.abs() < config.tol { slow + 1 } else { 0 };
        }
        let stop = slow >= config.patience;
        let mut freeze = config.freeze;
        freeze.transition |= !transition_on;
        let next = if stop { None } else { Some(mstep(&model, &e.stats, Some(&e.prior), &freeze, config.transition_floor)?) };
        info!("iteration {it}: loglik {:.10e}", e.loglik);
        iterates.push(EmIterate {
            iteration: it,
            model: model.clone(),
            loglik: e.loglik,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
            transition_enabled: transition_on,
            counts: e.stats.counts.clone(),
        });
        match next {
            Some(m) => model = m,
            None => {
                converged = true;
                break;
            }
        }
    }
    let final_loglik = if converged {
        prev
    } else {
        run_filter_prepared(&PreparedModel::new(&model)?, data, config.filter_budget)?.log_likelihood
    };
    Ok(EmResult { iterates, model, final_loglik, converged })
}

/// Writes `iter,loglik,dloglik,T_enabled,wall_ms`.
pub fn write_trace_csv<W: std::io::Write>(out: &mut W, iterates: &[EmIterate]) -> std::io::Result<()> {
    writeln!(out, "iter,loglik,dloglik,T_enabled,wall_ms")?;
    let mut prev = f64::NAN;
    for it in iterates {
        let d = it.loglik - prev;
        prev = it.loglik;
        writeln!(out, "{},{:.16e},{:.16e},{},{:.3}", it.iteration, it.loglik, d, u8::from(it.transition_enabled), it.wall_ms)?;
    }
    Ok(())
}
