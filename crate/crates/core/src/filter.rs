//! Gaussian-sum forward filter.
//!
//! Each step corrects the predicted mixture with `y_k`, reduces every mode's
//! components to the budget, then predicts through all `m × m` transitions.
//! The data log-likelihood is the sum of the correction normalizers.

use nalgebra::{DMatrix, DVector};

use crate::dynamics::{Kernel, PreparedModel};
use crate::error::{JmlsError, Result};
use crate::mixture::{GaussianComponent, HybridMixture};
use crate::model::{JmlsModel, ModeParams};
use crate::numkit::{qless_qr, UtFactor, LN_2PI};
use crate::simulate::Dataset;

/// Output of a forward pass. Index `k` holds step `k + 1`.
#[derive(Clone, Debug)]
pub struct FilterOutput {
    /// Reduced, normalized `p(x_k, z_k | y_{1:k})`.
    pub filtered: Vec<HybridMixture>,
    /// `p(x_k, z_k | y_{1:k-1})` before correction (the prior at `k = 1`).
    pub predicted: Vec<HybridMixture>,
    /// `ln p(y_k | y_{1:k-1})`.
    pub step_loglik: Vec<f64>,
    pub log_likelihood: f64,
    /// Filtered component count after reduction.
    pub component_counts: Vec<usize>,
}

/// Square-root measurement update of one component. Returns the updated
/// component with `ln N(y; ŷ, S)` added to its log-weight.
pub fn correct_component(
    comp: &GaussianComponent,
    mode: &ModeParams,
    r_half: &UtFactor,
    u: &DVector<f64>,
    y: &DVector<f64>,
) -> Option<GaussianComponent> {
    let (n_x, n_y) = (mode.n_x(), mode.n_y());
    let p_half = comp.p_half.matrix();
    let mut pre = DMatrix::zeros(n_y + n_x, n_y + n_x);
    pre.view_mut((0, 0), (n_y, n_y)).copy_from(r_half.matrix());
    pre.view_mut((n_y, 0), (n_x, n_y)).copy_from(&(p_half * mode.c.transpose()));
    pre.view_mut((n_y, n_y), (n_x, n_x)).copy_from(p_half);
    let post = qless_qr(&pre).into_matrix();
    let x = UtFactor::from_upper(post.view((0, 0), (n_y, n_y)).into_owned());
    if !x.is_nonsingular(1e-14) {
        return None;
    }
    let innov = y - &mode.c * &comp.mu - &mode.d * u;
    let e_bar = x.solve_transpose(&innov)?;
    let mu = &comp.mu + post.view((0, n_y), (n_y, n_x)).tr_mul(&e_bar);
    let log_det_half: f64 = x.matrix().diagonal().iter().map(|d| d.ln()).sum();
    let log_lik = -0.5 * e_bar.norm_squared() - log_det_half - 0.5 * n_y as f64 * LN_2PI;
    Some(GaussianComponent {
        log_w: comp.log_w + log_lik,
        mu,
        p_half: UtFactor::from_upper(post.view((n_y, n_y), (n_x, n_x)).into_owned()),
    })
}

/// Corrects every component with its mode's measurement model and
/// normalizes. Returns the posterior and the log-normalizer.
pub fn correct(
    predicted: &HybridMixture,
    model: &JmlsModel,
    u: &DVector<f64>,
    y: &DVector<f64>,
    step: usize,
) -> Result<(HybridMixture, f64)> {
    let mut out = HybridMixture::empty(model.num_modes());
    for (z, comps) in predicted.modes.iter().enumerate() {
        let mode = &model.modes[z];
        let r_half = mode.r_half();
        for c in comps {
            let upd = correct_component(c, mode, &r_half, u, y).ok_or(JmlsError::DegenerateInnovation { step, mode: z })?;
            out.modes[z].push(upd);
        }
    }
    let norm = out.normalize()?;
    Ok((out, norm))
}

/// Pushes one component through a kernel.
pub fn predict_component(comp: &GaussianComponent, kernel: &Kernel<'_>, log_t: f64) -> GaussianComponent {
    let pa = comp.p_half.matrix() * kernel.a.transpose();
    let n = pa.ncols();
    let mut stack = DMatrix::zeros(2 * n, n);
    stack.rows_mut(0, n).copy_from(&pa);
    stack.rows_mut(n, n).copy_from(kernel.q_half.matrix());
    GaussianComponent { log_w: comp.log_w + log_t, mu: kernel.a * &comp.mu + &kernel.b, p_half: qless_qr(&stack) }
}

/// Predicts step `k` to `k + 1` over every mode pair with nonzero
/// transition probability. Components are grouped by the new mode, ordered
/// by source mode then source index.
pub fn predict(filtered: &HybridMixture, prepared: &PreparedModel<'_>, data: &Dataset, k: usize) -> HybridMixture {
    let m = prepared.num_modes();
    let mut out = HybridMixture::empty(m);
    for to in 0..m {
        for (from, comps) in filtered.modes.iter().enumerate() {
            let log_t = prepared.log_t[(to, from)];
            if log_t == f64::NEG_INFINITY {
                continue;
            }
            let kernel = prepared.kernel(data, k, from, to);
            out.modes[to].extend(comps.iter().filter(|c| c.log_w > f64::NEG_INFINITY).map(|c| predict_component(c, &kernel, log_t)));
        }
    }
    out
}

/// Runs the forward filter over the whole dataset.
pub fn run_filter(model: &JmlsModel, data: &Dataset, budget: usize) -> Result<FilterOutput> {
    model.check()?;
    data.check_against(model)?;
    let prepared = PreparedModel::new(model)?;
    run_filter_prepared(&prepared, data, budget)
}

pub(crate) fn run_filter_prepared(prepared: &PreparedModel<'_>, data: &Dataset, budget: usize) -> Result<FilterOutput> {
    let model = prepared.model;
    let n = data.len();
    let mut out = FilterOutput {
        filtered: Vec::with_capacity(n),
        predicted: Vec::with_capacity(n),
        step_loglik: Vec::with_capacity(n),
        log_likelihood: 0.0,
        component_counts: Vec::with_capacity(n),
    };
    let mut pred = model.prior.clone();
    pred.normalize()?;
    for k in 0..n {
        let (mut filt, norm) = correct(&pred, model, &data.u[k], &data.y[k], k + 1)?;
        filt.reduce_per_mode(budget);
        out.step_loglik.push(norm);
        out.log_likelihood += norm;
        out.component_counts.push(filt.num_components());
        let next = if k + 1 < n { predict(&filt, prepared, data, k) } else { HybridMixture::empty(0) };
        out.predicted.push(std::mem::replace(&mut pred, next));
        out.filtered.push(filt);
    }
    Ok(out)
}

/// Approximate `ln p(y_{1:N})` under the given component budget.
pub fn log_likelihood(model: &JmlsModel, data: &Dataset, budget: usize) -> Result<f64> {
    Ok(run_filter(model, data, budget)?.log_likelihood)
}
