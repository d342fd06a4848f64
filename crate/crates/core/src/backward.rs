//! Backward information filter.
//!
//! Produces `p(y_{k:N} | x_k, z_k)` as a per-mode mixture of quadratic
//! likelihoods `exp(-½(‖F x + t‖² + c))`. Propagation through a kernel
//! `x⁺ = A x + b + Q_halfᵀ ξ` integrates `ξ` out of
//!
//! ```text
//! ‖ξ‖² + ‖G ξ + F A x + (F b + t)‖²,   G = F Q_halfᵀ
//! ```
//!
//! by a Q-less QR of the array `[[I, 0, 0], [G, F A, F b + t]]`: the leading
//! block contributes `2 ln|U₁₁|` to `c` and the trailing rows are the new
//! `(F, t)`. No inverse of `Q` or `L` is formed.

use nalgebra::{DMatrix, DVector};

use crate::dynamics::{Kernel, PreparedModel};
use crate::error::{JmlsError, Result};
use crate::mixture::{reduce_likelihood, LikelihoodComponent};
use crate::model::{JmlsModel, ModeParams};
use crate::numkit::{qless_qr, LN_2PI};
use crate::simulate::Dataset;

/// Per-mode likelihood mixtures for `k = 1 … N+1`; index `k` holds step
/// `k + 1`, and the last entry is the constant likelihood.
#[derive(Clone, Debug)]
pub struct BifOutput {
    pub likelihoods: Vec<Vec<Vec<LikelihoodComponent>>>,
}

impl BifOutput {
    /// Mixture for zero-based step `k`, indexed by mode.
    pub fn at(&self, k: usize) -> &[Vec<LikelihoodComponent>] {
        &self.likelihoods[k]
    }

    pub fn component_counts(&self) -> Vec<usize> {
        self.likelihoods.iter().map(|l| l.iter().map(Vec::len).sum()).collect()
    }
}

/// Rows `(F, t)` and constant of `N(y | C x + D u, R)`.
fn measurement_rows(mode: &ModeParams, mode_index: usize, u: &DVector<f64>, y: &DVector<f64>) -> Result<(DMatrix<f64>, DVector<f64>, f64)> {
    let r_half = mode.r_half();
    let f = r_half.solve_transpose_mat(&mode.c).ok_or(JmlsError::SingularR { mode: mode_index })?;
    let resid = y - &mode.d * u;
    let t = -r_half.solve_transpose(&resid).ok_or(JmlsError::SingularR { mode: mode_index })?;
    let c = mode.n_y() as f64 * LN_2PI + r_half.log_det_gram();
    Ok((f, t, c))
}

/// `p(y_N | x_N, z)` for one mode.
pub fn bif_init(mode: &ModeParams, mode_index: usize, u: &DVector<f64>, y: &DVector<f64>) -> Result<LikelihoodComponent> {
    let (f, t, c) = measurement_rows(mode, mode_index, u, y)?;
    Ok(LikelihoodComponent::from_rows(&f, &t, c))
}

/// Pulls a likelihood on `x⁺` back through a kernel, returning the stacked
/// rows and constant of the resulting likelihood on `x` (before the
/// transition log-probability is added).
pub fn propagate_rows(next: &LikelihoodComponent, kernel: &Kernel<'_>) -> (DMatrix<f64>, DVector<f64>, f64) {
    let n = next.dim();
    let f = next.l_half.matrix();
    let mut w = DMatrix::zeros(2 * n, 2 * n + 1);
    w.view_mut((0, 0), (n, n)).fill_with_identity();
    w.view_mut((n, 0), (n, n)).copy_from(&(f * kernel.q_half.matrix().transpose()));
    w.view_mut((n, n), (n, n)).copy_from(&(f * kernel.a));
    w.view_mut((n, 2 * n), (n, 1)).copy_from(&(f * &kernel.b + &next.t));
    let u = qless_qr(&w).into_matrix();
    let log_det_u11: f64 = (0..n).map(|i| u[(i, i)].ln()).sum();
    let rows = u.view((n, n), (n + 1, n)).into_owned();
    let t = u.view((n, 2 * n), (n + 1, 1)).column(0).into_owned();
    (rows, t, next.c + 2.0 * log_det_u11)
}

/// Marginalizes a likelihood through a kernel and folds in `ln T`.
pub fn propagate(next: &LikelihoodComponent, kernel: &Kernel<'_>, log_t: f64) -> LikelihoodComponent {
    let (rows, t, c) = propagate_rows(next, kernel);
    LikelihoodComponent::from_rows(&rows, &t, c - 2.0 * log_t)
}

/// One backward step: builds the mixture at zero-based step `k` from the one
/// at `k + 1`.
pub fn bif_step(
    next: &[Vec<LikelihoodComponent>],
    prepared: &PreparedModel<'_>,
    data: &Dataset,
    k: usize,
    budget: usize,
) -> Result<Vec<Vec<LikelihoodComponent>>> {
    let m = prepared.num_modes();
    let model = prepared.model;
    let mut out = Vec::with_capacity(m);
    for from in 0..m {
        let (fm, tm, cm) = measurement_rows(&model.modes[from], from, &data.u[k], &data.y[k])?;
        let mut comps = Vec::new();
        for (to, next_comps) in next.iter().enumerate() {
            let log_t = prepared.log_t[(to, from)];
            if log_t == f64::NEG_INFINITY {
                continue;
            }
            let kernel = prepared.kernel(data, k, from, to);
            for l in next_comps {
                let (rows, t, c) = propagate_rows(l, &kernel);
                let stacked_f = stack_rows(&fm, &rows);
                let stacked_t = DVector::from_iterator(tm.len() + t.len(), tm.iter().chain(t.iter()).copied());
                comps.push(LikelihoodComponent::from_rows(&stacked_f, &stacked_t, c + cm - 2.0 * log_t));
            }
        }
        out.push(reduce_likelihood(comps, budget));
    }
    Ok(out)
}

fn stack_rows(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut s = DMatrix::zeros(a.nrows() + b.nrows(), a.ncols());
    s.rows_mut(0, a.nrows()).copy_from(a);
    s.rows_mut(a.nrows(), b.nrows()).copy_from(b);
    s
}

/// Runs the backward pass over the whole dataset.
pub fn run_bif(model: &JmlsModel, data: &Dataset, budget: usize) -> Result<BifOutput> {
    model.check()?;
    data.check_against(model)?;
    run_bif_prepared(&PreparedModel::new(model)?, data, budget)
}

pub(crate) fn run_bif_prepared(prepared: &PreparedModel<'_>, data: &Dataset, budget: usize) -> Result<BifOutput> {
    let n = data.len();
    let (m, n_x) = (prepared.num_modes(), prepared.n_x());
    let mut likelihoods = vec![Vec::new(); n + 1];
    likelihoods[n] = vec![vec![LikelihoodComponent::uninformative(n_x)]; m];
    let model = prepared.model;
    likelihoods[n - 1] = (0..m)
        .map(|z| bif_init(&model.modes[z], z, &data.u[n - 1], &data.y[n - 1]).map(|l| vec![l]))
        .collect::<Result<Vec<_>>>()?;
    for k in (0..n - 1).rev() {
        likelihoods[k] = bif_step(&likelihoods[k + 1], prepared, data, k, budget)?;
    }
    Ok(BifOutput { likelihoods })
}
