//! Hybrid Gaussian mixtures, quadratic likelihood mixtures and
//! Kullback–Leibler (Runnalls) pairwise reduction.

use nalgebra::{DMatrix, DVector};

use crate::error::{JmlsError, Result};
use crate::numkit::{chol_upper, logsumexp, qless_qr, UtFactor, LN_2PI};

/// Components whose log-weight falls this far below the mixture total are
/// pruned before any pairwise merging.
pub const DEFAULT_WEIGHT_FLOOR: f64 = 46.0;

/// Budget value meaning "never reduce".
pub const UNBOUNDED: usize = usize::MAX;

/// One weighted Gaussian `w·N(x | mu, P)` with `P = p_halfᵀ p_half`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianComponent {
    pub log_w: f64,
    pub mu: DVector<f64>,
    pub p_half: UtFactor,
}

impl GaussianComponent {
    pub fn new(log_w: f64, mu: DVector<f64>, p_half: UtFactor) -> Self {
        debug_assert_eq!(mu.len(), p_half.dim());
        GaussianComponent { log_w, mu, p_half }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        self.p_half.gram()
    }
}

/// Gaussian mixture over a continuous state and a discrete mode, stored as
/// one component list per mode.
#[derive(Clone, Debug, PartialEq)]
pub struct HybridMixture {
    pub modes: Vec<Vec<GaussianComponent>>,
}

impl HybridMixture {
    pub fn empty(m: usize) -> Self {
        HybridMixture { modes: vec![Vec::new(); m] }
    }

    /// Equal-weight prior with one `N(mu, P)` per mode.
    pub fn uniform(m: usize, mu: DVector<f64>, p_half: UtFactor) -> Self {
        let log_w = -(m as f64).ln();
        HybridMixture {
            modes: (0..m)
                .map(|_| vec![GaussianComponent::new(log_w, mu.clone(), p_half.clone())])
                .collect(),
        }
    }

    pub fn num_modes(&self) -> usize {
        self.modes.len()
    }

    pub fn num_components(&self) -> usize {
        self.modes.iter().map(Vec::len).sum()
    }

    pub fn component_counts(&self) -> Vec<usize> {
        self.modes.iter().map(Vec::len).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &GaussianComponent)> {
        self.modes
            .iter()
            .enumerate()
            .flat_map(|(z, comps)| comps.iter().map(move |c| (z, c)))
    }

    /// `ln Σ w` over every component of every mode.
    pub fn log_total(&self) -> f64 {
        let lw: Vec<f64> = self.iter().map(|(_, c)| c.log_w).collect();
        if lw.is_empty() {
            f64::NEG_INFINITY
        } else {
            logsumexp(&lw).unwrap_or(f64::NEG_INFINITY)
        }
    }

    /// `ln Σ w` over the components of mode `z`.
    pub fn mode_log_weight(&self, z: usize) -> f64 {
        let lw: Vec<f64> = self.modes[z].iter().map(|c| c.log_w).collect();
        if lw.is_empty() {
            f64::NEG_INFINITY
        } else {
            logsumexp(&lw).unwrap_or(f64::NEG_INFINITY)
        }
    }

    /// Shifts all log-weights so the mixture sums to one and returns the
    /// subtracted log-normalizer.
    pub fn normalize(&mut self) -> Result<f64> {
        let total = self.log_total();
        if !total.is_finite() {
            return Err(JmlsError::AllZeroWeights);
        }
        for comps in &mut self.modes {
            for c in comps.iter_mut() {
                c.log_w -= total;
            }
        }
        Ok(total)
    }

    /// Applies [`reduce`] to each mode independently.
    pub fn reduce_per_mode(&mut self, budget: usize) {
        for comps in &mut self.modes {
            let taken = std::mem::take(comps);
            *comps = reduce(taken, budget);
        }
    }

    /// Mean and covariance of the state conditioned on mode `z`.
    pub fn mode_moments(&self, z: usize) -> Option<(DVector<f64>, DMatrix<f64>)> {
        moments(&self.modes[z])
    }
}

/// Functional form of [`HybridMixture::normalize`].
pub fn normalize(mut mix: HybridMixture) -> Result<(HybridMixture, f64)> {
    let z = mix.normalize()?;
    Ok((mix, z))
}

/// Weight-normalized mean and covariance of a component list.
pub fn moments(comps: &[GaussianComponent]) -> Option<(DVector<f64>, DMatrix<f64>)> {
    let first = comps.first()?;
    let n = first.dim();
    let max = comps.iter().map(|c| c.log_w).fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return None;
    }
    let ws: Vec<f64> = comps.iter().map(|c| (c.log_w - max).exp()).collect();
    let total: f64 = ws.iter().sum();
    let mut mean = DVector::zeros(n);
    for (w, c) in ws.iter().zip(comps) {
        mean += &c.mu * (w / total);
    }
    let mut cov = DMatrix::zeros(n, n);
    for (w, c) in ws.iter().zip(comps) {
        let d = &c.mu - &mean;
        cov += (c.covariance() + &d * d.transpose()) * (w / total);
    }
    Some((mean, cov))
}

/// Quadratic likelihood `exp(-½(‖F x + t‖² + c))`.
///
/// In the usual `(r, s, L)` parameterization `exp(-½(r + 2xᵀs + xᵀLx))`
/// this is `L = FᵀF`, `s = Fᵀt`, `r = c + ‖t‖²`. Keeping `t` explicit lets
/// rank-deficient `F` be propagated without any pseudo-inverse.
#[derive(Clone, Debug, PartialEq)]
pub struct LikelihoodComponent {
    pub l_half: UtFactor,
    pub t: DVector<f64>,
    pub c: f64,
}

impl LikelihoodComponent {
    /// The constant likelihood `1`.
    pub fn uninformative(n: usize) -> Self {
        LikelihoodComponent { l_half: UtFactor::zeros(n), t: DVector::zeros(n), c: 0.0 }
    }

    /// Builds a component from stacked rows `‖F_rows x + t_rows‖² + c`,
    /// compressing the rows to a square factor.
    pub fn from_rows(f_rows: &DMatrix<f64>, t_rows: &DVector<f64>, c: f64) -> Self {
        let n = f_rows.ncols();
        let mut aug = DMatrix::zeros(f_rows.nrows(), n + 1);
        aug.columns_mut(0, n).copy_from(f_rows);
        aug.set_column(n, t_rows);
        let r = qless_qr(&aug).into_matrix();
        let resid = r[(n, n)];
        LikelihoodComponent {
            l_half: UtFactor::from_upper(r.view((0, 0), (n, n)).into_owned()),
            t: r.view((0, n), (n, 1)).column(0).into_owned(),
            c: c + resid * resid,
        }
    }

    pub fn dim(&self) -> usize {
        self.t.len()
    }

    pub fn r(&self) -> f64 {
        self.c + self.t.norm_squared()
    }

    pub fn s(&self) -> DVector<f64> {
        self.l_half.matrix().tr_mul(&self.t)
    }

    pub fn information(&self) -> DMatrix<f64> {
        self.l_half.gram()
    }

    /// `ln L(x)`.
    pub fn log_eval(&self, x: &DVector<f64>) -> f64 {
        let e = self.l_half.matrix() * x + &self.t;
        -0.5 * (e.norm_squared() + self.c)
    }

    /// Whether the information matrix is positive definite.
    pub fn is_proper(&self) -> bool {
        self.l_half.is_nonsingular(1e-9)
    }

    /// Log of `∫ L(x) dx`; only meaningful when [`Self::is_proper`].
    pub fn log_mass(&self) -> f64 {
        let n = self.dim() as f64;
        0.5 * n * LN_2PI - 0.5 * self.l_half.log_det_gram() - 0.5 * self.c
    }

    /// Moment form: weight = mass, mean `-L⁻¹s`, covariance `L⁻¹`.
    pub fn to_moment_form(&self) -> Option<GaussianComponent> {
        let n = self.dim();
        let f_inv = self.l_half.solve_mat(&DMatrix::identity(n, n))?;
        let mu = -(&f_inv * &self.t);
        let p_half = qless_qr(&f_inv.transpose());
        Some(GaussianComponent::new(self.log_mass(), mu, p_half))
    }

    /// Inverse of [`Self::to_moment_form`].
    pub fn from_moment_form(g: &GaussianComponent) -> Option<Self> {
        let n = g.dim();
        let g_inv = g.p_half.solve_mat(&DMatrix::identity(n, n))?;
        let l_half = qless_qr(&g_inv.transpose());
        let t = -(l_half.matrix() * &g.mu);
        let c = n as f64 * LN_2PI - l_half.log_det_gram() - 2.0 * g.log_w;
        Some(LikelihoodComponent { l_half, t, c })
    }
}

fn log_det_psd(p: &DMatrix<f64>) -> f64 {
    match chol_upper(p) {
        Ok(f) => 2.0 * f.matrix().diagonal().iter().map(|d| d.max(1e-150).ln()).sum::<f64>(),
        Err(_) => f64::NEG_INFINITY,
    }
}

/// Moment-matched merge of two weighted Gaussians (weights in linear scale).
fn merge_moments(
    wa: f64,
    ma: &DVector<f64>,
    pa: &DMatrix<f64>,
    wb: f64,
    mb: &DVector<f64>,
    pb: &DMatrix<f64>,
) -> (f64, DVector<f64>, DMatrix<f64>) {
    let w = wa + wb;
    let (fa, fb) = (wa / w, wb / w);
    let mu = ma * fa + mb * fb;
    let d = ma - mb;
    let p = pa * fa + pb * fb + (&d * d.transpose()) * (fa * fb);
    (w, mu, p)
}

/// Runnalls upper bound on the KL discrimination caused by merging two
/// components: `½[(wa+wb) ln|P_ab| - wa ln|P_a| - wb ln|P_b|]`.
pub fn runnalls_cost(a: &GaussianComponent, b: &GaussianComponent) -> f64 {
    let max = a.log_w.max(b.log_w);
    let (wa, wb) = ((a.log_w - max).exp(), (b.log_w - max).exp());
    let (pa, pb) = (a.covariance(), b.covariance());
    let (w, _, p) = merge_moments(wa, &a.mu, &pa, wb, &b.mu, &pb);
    let cost = 0.5 * (w * log_det_psd(&p) - wa * a.p_half.log_det_gram() - wb * b.p_half.log_det_gram());
    cost * max.exp()
}

/// Moment-matched merge of two components.
pub fn merge(a: &GaussianComponent, b: &GaussianComponent) -> GaussianComponent {
    let max = a.log_w.max(b.log_w);
    let (wa, wb) = ((a.log_w - max).exp(), (b.log_w - max).exp());
    let (w, mu, p) = merge_moments(wa, &a.mu, &a.covariance(), wb, &b.mu, &b.covariance());
    let p_half = chol_upper(&p).unwrap_or_else(|_| qless_qr(&p));
    GaussianComponent::new(max + w.ln(), mu, p_half)
}

enum Slot {
    Kept(usize),
    Merged { log_w: f64, mu: DVector<f64>, cov: DMatrix<f64> },
}

struct Work {
    slot: Slot,
    w: f64,
    mu: DVector<f64>,
    cov: DMatrix<f64>,
    log_det: f64,
}

/// Greedy Runnalls reduction. Returns, for each surviving component, either
/// the index of an untouched input or the merged moments (log-weight, mean,
/// covariance).
fn reduce_slots(comps: &[GaussianComponent], budget: usize, floor: f64) -> Vec<Slot> {
    let budget = budget.max(1);
    let max = comps.iter().map(|c| c.log_w).fold(f64::NEG_INFINITY, f64::max);
    let lw: Vec<f64> = comps.iter().map(|c| c.log_w).collect();
    let total = logsumexp(&lw).unwrap_or(f64::NEG_INFINITY);

    let mut work: Vec<Work> = comps
        .iter()
        .enumerate()
        .filter(|(_, c)| c.log_w >= total - floor && c.log_w > f64::NEG_INFINITY)
        .map(|(i, c)| Work {
            slot: Slot::Kept(i),
            w: (c.log_w - max).exp(),
            mu: c.mu.clone(),
            cov: c.covariance(),
            log_det: c.p_half.log_det_gram().max(-1e300),
        })
        .collect();

    let pair_cost = |a: &Work, b: &Work| -> f64 {
        let (w, _, p) = merge_moments(a.w, &a.mu, &a.cov, b.w, &b.mu, &b.cov);
        0.5 * (w * log_det_psd(&p).max(-1e300) - a.w * a.log_det - b.w * b.log_det)
    };

    let n0 = work.len();
    let mut cost = vec![vec![f64::INFINITY; n0]; n0];
    if n0 > budget {
        for i in 0..n0 {
            for j in (i + 1)..n0 {
                cost[i][j] = pair_cost(&work[i], &work[j]);
            }
        }
    }
    // `alive` keeps the original order so the output ordering is stable.
    let mut alive: Vec<usize> = (0..n0).collect();
    while alive.len() > budget {
        let mut best: Option<(f64, usize, usize)> = None;
        for (ai, &i) in alive.iter().enumerate() {
            for &j in &alive[ai + 1..] {
                let c = if cost[i][j].is_nan() { f64::INFINITY } else { cost[i][j] };
                if best.is_none_or(|b| c < b.0) {
                    best = Some((c, i, j));
                }
            }
        }
        let (_, i, j) = best.expect("more than one live component");
        let (w, mu, cov) = merge_moments(work[i].w, &work[i].mu, &work[i].cov, work[j].w, &work[j].mu, &work[j].cov);
        let log_det = log_det_psd(&cov).max(-1e300);
        work[i] = Work {
            slot: Slot::Merged { log_w: max + w.ln(), mu: mu.clone(), cov: cov.clone() },
            w,
            mu,
            cov,
            log_det,
        };
        alive.retain(|&k| k != j);
        for &k in &alive {
            if k < i {
                cost[k][i] = pair_cost(&work[k], &work[i]);
            } else if k > i {
                cost[i][k] = pair_cost(&work[i], &work[k]);
            }
        }
    }
    let mut out = Vec::with_capacity(alive.len());
    for k in alive {
        let slot = std::mem::replace(&mut work[k].slot, Slot::Kept(usize::MAX));
        out.push(slot);
    }
    out
}

/// Reduces a component list to at most `budget` components by repeatedly
/// merging the pair with the smallest Runnalls cost. Inputs with at most
/// `budget` components are returned unchanged.
pub fn reduce(comps: Vec<GaussianComponent>, budget: usize) -> Vec<GaussianComponent> {
    reduce_with_floor(comps, budget, DEFAULT_WEIGHT_FLOOR)
}

pub fn reduce_with_floor(comps: Vec<GaussianComponent>, budget: usize, floor: f64) -> Vec<GaussianComponent> {
    if comps.len() <= budget {
        return comps;
    }
    let slots = reduce_slots(&comps, budget, floor);
    slots
        .into_iter()
        .map(|s| match s {
            Slot::Kept(i) => comps[i].clone(),
            Slot::Merged { log_w, mu, cov } => {
                let p_half = chol_upper(&cov).unwrap_or_else(|_| qless_qr(&cov));
                GaussianComponent::new(log_w, mu, p_half)
            }
        })
        .collect()
}

/// Reduces a likelihood mixture. Components with positive-definite
/// information are merged in moment form; singular ones pass through and do
/// not count against the budget.
pub fn reduce_likelihood(comps: Vec<LikelihoodComponent>, budget: usize) -> Vec<LikelihoodComponent> {
    if comps.len() <= budget {
        return comps;
    }
    let mut singular = Vec::new();
    let mut proper = Vec::new();
    let mut moment = Vec::new();
    for c in comps {
        match c.is_proper().then(|| c.to_moment_form()).flatten() {
            Some(g) => {
                moment.push(g);
                proper.push(c);
            }
            None => singular.push(c),
        }
    }
    if proper.len() <= budget {
        singular.extend(proper);
        return singular;
    }
    let slots = reduce_slots(&moment, budget, DEFAULT_WEIGHT_FLOOR);
    for s in slots {
        match s {
            Slot::Kept(i) => singular.push(proper[i].clone()),
            Slot::Merged { log_w, mu, cov } => {
                let p_half = chol_upper(&cov).unwrap_or_else(|_| qless_qr(&cov));
                let g = GaussianComponent::new(log_w, mu, p_half);
                if let Some(l) = LikelihoodComponent::from_moment_form(&g) {
                    singular.push(l);
                }
            }
        }
    }
    singular
}
