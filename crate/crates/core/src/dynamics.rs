//! Per-step transition kernels shared by the filter, the backward filter
//! and the smoother.
//!
//! Step `k` (zero-based here) moves `x_k` to `x_{k+1}` for the mode pair
//! `(from = z_k, to = z_{k+1})`:
//!
//! * dynamic convention: decorrelated matrices of mode `from`, offset
//!   `B_k [u_k; y_k]`, noise `Q_k`.
//! * classic convention: matrices of mode `to`, offset `B(to) u_{k+1}`
//!   (zero past the end of the data), noise `Q(to)`.

use nalgebra::{DMatrix, DVector};

use crate::error::Result;
use crate::model::{transform_mode, Convention, JmlsModel, TransformedMode};
use crate::numkit::UtFactor;
use crate::simulate::Dataset;

/// A model with its transformed modes and log transition matrix cached.
#[derive(Clone, Debug)]
pub struct PreparedModel<'a> {
    pub model: &'a JmlsModel,
    pub transformed: Vec<TransformedMode>,
    classic_q: Vec<UtFactor>,
    /// `log_t[(j, i)] = ln T(j, i)`.
    pub log_t: DMatrix<f64>,
}

/// Linear-Gaussian kernel `x⁺ = A x + b + w`, `w ~ N(0, Q_halfᵀ Q_half)`.
#[derive(Clone, Debug)]
pub struct Kernel<'a> {
    pub a: &'a DMatrix<f64>,
    pub b: DVector<f64>,
    pub q_half: &'a UtFactor,
}

impl<'a> PreparedModel<'a> {
    pub fn new(model: &'a JmlsModel) -> Result<Self> {
        let transformed = model.modes.iter().enumerate().map(|(z, m)| transform_mode(m, z)).collect::<Result<Vec<_>>>()?;
        let n_y = model.n_y();
        let classic_q = model.modes.iter().map(|m| m.pi_half.trailing(n_y)).collect();
        Ok(PreparedModel { model, transformed, classic_q, log_t: model.transition.map(f64::ln) })
    }

    pub fn num_modes(&self) -> usize {
        self.model.num_modes()
    }

    pub fn n_x(&self) -> usize {
        self.model.n_x()
    }

    /// The kernel for step `k` between modes `from` and `to`.
    pub fn kernel(&self, data: &Dataset, k: usize, from: usize, to: usize) -> Kernel<'_> {
        match self.model.convention {
            Convention::Dynamic => {
                let t = &self.transformed[from];
                Kernel { a: &t.a, b: t.offset(&data.u[k], &data.y[k]), q_half: &t.q_half }
            }
            Convention::Classic => {
                let m = &self.model.modes[to];
                let b = match data.u.get(k + 1) {
                    Some(u) => &m.b * u,
                    None => DVector::zeros(m.n_x()),
                };
                Kernel { a: &m.a, b, q_half: &self.classic_q[to] }
            }
        }
    }
}
