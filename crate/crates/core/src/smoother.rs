//! Pairwise joint smoother.
//!
//! Fuses each filtered component at `k`, pushed through every transition,
//! with each backward likelihood component at `k + 1`, giving a mixture over
//! `χ_k = [x_k; x_{k+1}]` indexed by the mode pair `(z_k, z_{k+1})`.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::backward::BifOutput;
use crate::dynamics::{Kernel, PreparedModel};
use crate::error::{JmlsError, Result};
use crate::filter::FilterOutput;
use crate::mixture::{reduce, DEFAULT_WEIGHT_FLOOR, GaussianComponent, HybridMixture, LikelihoodComponent};
use crate::numkit::{logsumexp, qless_qr, UtFactor};
use crate::simulate::Dataset;

/// Joint smoothed mixture at one step. `pairs[i][j]` holds the components
/// with `z_k = i`, `z_{k+1} = j`.
#[derive(Clone, Debug, PartialEq)]
pub struct JointSmoothedMixture {
    pub pairs: Vec<Vec<Vec<GaussianComponent>>>,
}

impl JointSmoothedMixture {
    pub fn num_modes(&self) -> usize {
        self.pairs.len()
    }

    pub fn num_components(&self) -> usize {
        self.pairs.iter().flatten().map(Vec::len).sum()
    }

    /// `ln P(z_k = i, z_{k+1} = j | y_{1:N})`.
    pub fn pair_log_weight(&self, i: usize, j: usize) -> f64 {
        let lw: Vec<f64> = self.pairs[i][j].iter().map(|c| c.log_w).collect();
        logsumexp(&lw).unwrap_or(f64::NEG_INFINITY)
    }

    /// Marginal over `(x_k, z_k)`.
    pub fn current_marginal(&self) -> HybridMixture {
        let m = self.num_modes();
        let mut out = HybridMixture::empty(m);
        for (i, row) in self.pairs.iter().enumerate() {
            for c in row.iter().flatten() {
                let n = c.dim() / 2;
                out.modes[i].push(GaussianComponent::new(c.log_w, c.mu.rows(0, n).into_owned(), c.p_half.leading(n)));
            }
        }
        out
    }

    /// Marginal over `(x_{k+1}, z_{k+1})`.
    pub fn next_marginal(&self) -> HybridMixture {
        let m = self.num_modes();
        let mut out = HybridMixture::empty(m);
        for row in &self.pairs {
            for (j, comps) in row.iter().enumerate() {
                for c in comps {
                    let n = c.dim() / 2;
                    let cols = c.p_half.matrix().columns(n, n).into_owned();
                    out.modes[j].push(GaussianComponent::new(c.log_w, c.mu.rows(n, n).into_owned(), qless_qr(&cols)));
                }
            }
        }
        out
    }
}

/// Joint predicted mean and factor of `[x_k; x_{k+1}]` for one filtered
/// component: `[μ; Aμ + b]` and `[[P_half, P_half Aᵀ], [0, Q_half]]`.
pub fn joint_predict(comp: &GaussianComponent, kernel: &Kernel<'_>) -> (DVector<f64>, UtFactor) {
    let n = comp.dim();
    let mut mu = DVector::zeros(2 * n);
    mu.rows_mut(0, n).copy_from(&comp.mu);
    mu.rows_mut(n, n).copy_from(&(kernel.a * &comp.mu + &kernel.b));
    let p = comp.p_half.matrix();
    let mut g = DMatrix::zeros(2 * n, 2 * n);
    g.view_mut((0, 0), (n, n)).copy_from(p);
    g.view_mut((0, n), (n, n)).copy_from(&(p * kernel.a.transpose()));
    g.view_mut((n, n), (n, n)).copy_from(kernel.q_half.matrix());
    (mu, UtFactor::from_upper(g))
}

/// Combines a Gaussian `N(μ_pred, GᵀG)` of prior log-weight `log_prior`
/// with the likelihood `exp(-½(‖F x + t‖² + c))`, where `F` acts on the
/// trailing `F.ncols()` coordinates of the state.
///
/// The posterior factor is `R₂₂` from the Q-less QR of `[[I, 0], [J, G]]`,
/// `J = G F_augᵀ`. The mean is `P_N (P_pred⁻¹ μ_pred − F_augᵀ t)`, and the
/// log-weight is `β / 2` with
/// `β = 2 log_prior − r + ln|P_N| − ln|P_pred| + μ_Nᵀ h − μ_predᵀ P_pred⁻¹ μ_pred`.
pub fn fuse_gaussian(
    log_prior: f64,
    mu_pred: &DVector<f64>,
    g: &UtFactor,
    lik: &LikelihoodComponent,
) -> Option<GaussianComponent> {
    let n = g.dim();
    let nl = lik.dim();
    let off = n - nl;
    let mut f_aug = DMatrix::zeros(nl, n);
    f_aug.columns_mut(off, nl).copy_from(lik.l_half.matrix());
    let j = g.matrix() * f_aug.transpose();
    let mut pre = DMatrix::zeros(nl + n, nl + n);
    pre.view_mut((0, 0), (nl, nl)).fill_with_identity();
    pre.view_mut((nl, 0), (n, nl)).copy_from(&j);
    pre.view_mut((nl, nl), (n, n)).copy_from(g.matrix());
    let post = qless_qr(&pre).into_matrix();
    let p_n = UtFactor::from_upper(post.view((nl, nl), (n, n)).into_owned());

    if !g.is_nonsingular(1e-13) {
        return None;
    }
    let a = g.solve_transpose(mu_pred)?;
    let v = g.solve(&a)?;
    let h = v - f_aug.tr_mul(&lik.t);
    let mu = p_n.matrix().tr_mul(&(p_n.matrix() * &h));
    let beta = 2.0 * log_prior - lik.r() + p_n.log_det_gram() - g.log_det_gram() + mu.dot(&h) - a.norm_squared();
    Some(GaussianComponent::new(0.5 * beta, mu, p_n))
}

/// Joint smoothed mixture at zero-based step `k`, normalized, reduced per
/// mode pair to `budget`, with negligible components dropped.
pub fn smooth_step(
    filtered: &HybridMixture,
    next_lik: &[Vec<LikelihoodComponent>],
    prepared: &PreparedModel<'_>,
    data: &Dataset,
    k: usize,
    budget: usize,
) -> Result<JointSmoothedMixture> {
    let m = prepared.num_modes();
    let mut pairs = vec![vec![Vec::new(); m]; m];
    for (i, comps) in filtered.modes.iter().enumerate() {
        for j in 0..m {
            let log_t = prepared.log_t[(j, i)];
            if log_t == f64::NEG_INFINITY {
                continue;
            }
            let kernel = prepared.kernel(data, k, i, j);
            for comp in comps {
                let (mu_pred, g) = joint_predict(comp, &kernel);
                for lik in &next_lik[j] {
                    let fused = fuse_gaussian(comp.log_w + log_t, &mu_pred, &g, lik).ok_or(JmlsError::SingularPredCov { step: k + 1 })?;
                    pairs[i][j].push(fused);
                }
            }
        }
    }
    let all: Vec<f64> = pairs.iter().flatten().flatten().map(|c: &GaussianComponent| c.log_w).collect();
    let total = logsumexp(&all).map_err(|_| JmlsError::AllZeroWeights)?;
    if !total.is_finite() {
        return Err(JmlsError::AllZeroWeights);
    }
    for comps in pairs.iter_mut().flatten() {
        for c in comps.iter_mut() {
            c.log_w -= total;
        }
        let taken = std::mem::take(comps);
        let mut kept = reduce(taken, budget);
        kept.retain(|c| c.log_w >= -DEFAULT_WEIGHT_FLOOR);
        *comps = kept;
    }
    Ok(JointSmoothedMixture { pairs })
}

/// Joint smoothed mixtures for every step `k = 1 … N` (the last one pairs
/// `x_N` with the model's prediction of `x_{N+1}`). Steps run in parallel
/// and are collected in order.
pub fn run_smoother(
    prepared: &PreparedModel<'_>,
    filter: &FilterOutput,
    bif: &BifOutput,
    data: &Dataset,
    budget: usize,
) -> Result<Vec<JointSmoothedMixture>> {
    (0..data.len())
        .into_par_iter()
        .map(|k| smooth_step(&filter.filtered[k], bif.at(k + 1), prepared, data, k, budget))
        .collect()
}

/// Marginal over `(x_1, z_1)` of the first joint mixture, reduced per mode.
pub fn smoothed_prior(joint: &JointSmoothedMixture, budget: usize) -> HybridMixture {
    let mut prior = joint.current_marginal();
    prior.reduce_per_mode(budget);
    prior
}

/// Two-filter marginal `p(x_k, z_k | y_{1:N})` from the predicted mixture at
/// `k` and the backward likelihood at `k`, normalized.
pub fn two_filter_marginal(predicted: &HybridMixture, lik: &[Vec<LikelihoodComponent>]) -> Result<HybridMixture> {
    let mut out = HybridMixture::empty(predicted.num_modes());
    for (z, comps) in predicted.modes.iter().enumerate() {
        for c in comps {
            for l in &lik[z] {
                let fused = fuse_gaussian(c.log_w, &c.mu, &c.p_half, l).ok_or(JmlsError::SingularPredCov { step: 0 })?;
                out.modes[z].push(fused);
            }
        }
    }
    out.normalize()?;
    Ok(out)
}

/// Writes `k,z_k,z_next,weight,mean…` per step and mode pair (1-based indices).
pub fn write_moments_csv<W: Write>(out: &mut W, joint: &[JointSmoothedMixture]) -> std::io::Result<()> {
    let dim = joint.iter().flat_map(|j| j.pairs.iter().flatten().flatten()).map(|c| c.dim()).next().unwrap_or(0);
    write!(out, "k,z_k,z_next,weight")?;
    for d in 0..dim {
        write!(out, ",chi{}", d + 1)?;
    }
    writeln!(out)?;
    for (k, mix) in joint.iter().enumerate() {
        for (i, row) in mix.pairs.iter().enumerate() {
            for (j, comps) in row.iter().enumerate() {
                let w: f64 = comps.iter().map(|c| c.log_w.exp()).sum();
                write!(out, "{},{},{},{:.16e}", k + 1, i + 1, j + 1, w)?;
                for d in 0..dim {
                    let mean = if w > 0.0 { comps.iter().map(|c| c.log_w.exp() * c.mu[d]).sum::<f64>() / w } else { 0.0 };
                    write!(out, ",{mean:.16e}")?;
                }
                writeln!(out)?;
            }
        }
    }
    Ok(())
}
