//! Dense reference computations for the integration tests. Nothing here
//! uses square-root factors or the library's recursions.
#![allow(dead_code)]

use jmls_core::{Convention, Dataset, JmlsModel, JointSmoothedMixture, ModeParams};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

pub type Moments = (DVector<f64>, DMatrix<f64>);

/// `|a − b| ≤ tol · max(1, |b|)`.
pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

/// Largest mixed absolute/relative entry gap, matching [`close`].
pub fn gap(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs() / y.abs().max(1.0)).fold(0.0, f64::max)
}

pub fn gap_vec(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    gap(&DMatrix::from_column_slice(a.len(), 1, a.as_slice()), &DMatrix::from_column_slice(b.len(), 1, b.as_slice()))
}

pub fn inverse(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.clone().try_inverse().expect("invertible matrix")
}

fn sym(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

pub fn gauss_logpdf(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let chol = cov.clone().cholesky().expect("positive definite covariance");
    let d = x - mean;
    let sol = chol.solve(&d);
    let log_det: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
    -0.5 * (x.len() as f64 * LN_2PI + log_det + d.dot(&sol))
}

pub fn normal_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

pub fn normal_vector(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

/// Random upper-triangular matrix with diagonal in `[lo, hi]`.
pub fn random_upper(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64, off: f64) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        m[(i, i)] = rng.random_range(lo..hi);
        for j in i + 1..n {
            m[(i, j)] = off * rng.sample::<f64, _>(StandardNormal);
        }
    }
    m
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Covariance-form Kalman filter and Rauch–Tung–Striebel smoother for one
/// mode with correlated noise (`S ≠ 0`).
pub struct KalmanSmoother {
    pub loglik: f64,
    /// `x_k | y_{1:k}` for `k = 1 … N`.
    pub filtered: Vec<Moments>,
    /// `x_k | y_{1:N}` for `k = 1 … N + 1`.
    pub smoothed: Vec<Moments>,
    /// `Cov(x_{k+1}, x_k | y_{1:N})` for `k = 1 … N`.
    pub cross: Vec<DMatrix<f64>>,
}

pub fn kalman_smoother(mode: &ModeParams, mu0: &DVector<f64>, p0: &DMatrix<f64>, data: &Dataset) -> KalmanSmoother {
    let n = mode.n_x();
    let (r, s, q) = (mode.r(), mode.s(), mode.q());
    let mut mu = mu0.clone();
    let mut p = p0.clone();
    let mut loglik = 0.0;
    let mut filtered = Vec::new();
    let mut predicted = Vec::new();
    let mut gains_cross = Vec::new();
    for k in 0..data.len() {
        let (u, y) = (&data.u[k], &data.y[k]);
        let sy = &mode.c * &p * mode.c.transpose() + &r;
        let nu = y - &mode.c * &mu - &mode.d * u;
        loglik += gauss_logpdf(&nu, &DVector::zeros(nu.len()), &sy);
        // Joint of (x_k, v_k) conditioned on y_k.
        let mut prior_cov = DMatrix::zeros(2 * n, 2 * n);
        prior_cov.view_mut((0, 0), (n, n)).copy_from(&p);
        prior_cov.view_mut((n, n), (n, n)).copy_from(&q);
        let mut cross_y = DMatrix::zeros(2 * n, nu.len());
        cross_y.rows_mut(0, n).copy_from(&(&p * mode.c.transpose()));
        cross_y.rows_mut(n, n).copy_from(&s);
        let sy_inv = inverse(&sy);
        let mut prior_mean = DVector::zeros(2 * n);
        prior_mean.rows_mut(0, n).copy_from(&mu);
        let post_mean = prior_mean + &cross_y * &sy_inv * &nu;
        let post_cov = sym(prior_cov - &cross_y * &sy_inv * cross_y.transpose());
        filtered.push((post_mean.rows(0, n).into_owned(), post_cov.view((0, 0), (n, n)).into_owned()));
        let mut lift = DMatrix::zeros(n, 2 * n);
        lift.columns_mut(0, n).copy_from(&mode.a);
        lift.columns_mut(n, n).fill_with_identity();
        mu = &lift * &post_mean + &mode.b * u;
        p = sym(&lift * &post_cov * lift.transpose());
        gains_cross.push(&lift * post_cov.columns(0, n));
        predicted.push((mu.clone(), p.clone()));
    }
    let n_steps = data.len();
    let mut smoothed = vec![predicted[n_steps - 1].clone()];
    let mut cross = Vec::new();
    for k in (0..n_steps).rev() {
        let (mf, pf) = &filtered[k];
        let (mp, pp) = &predicted[k];
        let (ms_next, ps_next) = smoothed.last().unwrap().clone();
        let j = gains_cross[k].transpose() * inverse(pp);
        let ms = mf + &j * (&ms_next - mp);
        let ps = sym(pf + &j * (&ps_next - pp) * j.transpose());
        cross.push(&ps_next * j.transpose());
        smoothed.push((ms, ps));
    }
    smoothed.reverse();
    cross.reverse();
    KalmanSmoother { loglik, filtered, smoothed, cross }
}

/// Dense closed-form M-step for one mode with a full `Π` block:
/// `Γ = Ψ Σ⁻¹`, `Π = (Φ − Ψ Σ⁻¹ Ψᵀ) / N`.
pub fn dense_mstep(ks: &KalmanSmoother, data: &Dataset) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = ks.smoothed[0].0.len();
    let (n_u, n_y) = (data.n_u(), data.n_y());
    let mut sigma = DMatrix::zeros(n + n_u, n + n_u);
    let mut phi = DMatrix::zeros(n_y + n, n_y + n);
    let mut psi = DMatrix::zeros(n_y + n, n + n_u);
    for k in 0..data.len() {
        let (u, y) = (&data.u[k], &data.y[k]);
        let (m0, p0) = &ks.smoothed[k];
        let (m1, p1) = &ks.smoothed[k + 1];
        let xx = p0 + m0 * m0.transpose();
        let x1x1 = p1 + m1 * m1.transpose();
        let x1x = &ks.cross[k] + m1 * m0.transpose();
        let mut s = DMatrix::zeros(n + n_u, n + n_u);
        s.view_mut((0, 0), (n, n)).copy_from(&xx);
        s.view_mut((0, n), (n, n_u)).copy_from(&(m0 * u.transpose()));
        s.view_mut((n, 0), (n_u, n)).copy_from(&(u * m0.transpose()));
        s.view_mut((n, n), (n_u, n_u)).copy_from(&(u * u.transpose()));
        sigma += s;
        let mut f = DMatrix::zeros(n_y + n, n_y + n);
        f.view_mut((0, 0), (n_y, n_y)).copy_from(&(y * y.transpose()));
        f.view_mut((0, n_y), (n_y, n)).copy_from(&(y * m1.transpose()));
        f.view_mut((n_y, 0), (n, n_y)).copy_from(&(m1 * y.transpose()));
        f.view_mut((n_y, n_y), (n, n)).copy_from(&x1x1);
        phi += f;
        let mut c = DMatrix::zeros(n_y + n, n + n_u);
        c.view_mut((0, 0), (n_y, n)).copy_from(&(y * m0.transpose()));
        c.view_mut((0, n), (n_y, n_u)).copy_from(&(y * u.transpose()));
        c.view_mut((n_y, 0), (n, n)).copy_from(&x1x);
        c.view_mut((n_y, n), (n, n_u)).copy_from(&(m1 * u.transpose()));
        psi += c;
    }
    let sigma_inv = inverse(&sigma);
    let gamma = &psi * &sigma_inv;
    let pi = sym((phi - &psi * &sigma_inv * psi.transpose()) / data.len() as f64);
    (gamma, pi)
}

/// Exhaustive enumeration over every mode sequence `z_1 … z_{N+1}` and every
/// prior component.
pub struct Enumeration {
    pub loglik: f64,
    /// `pair[k][(i, j)] = P(z_k = i, z_{k+1} = j | y)`, zero-based `k`.
    pub pair: Vec<DMatrix<f64>>,
    /// Moments of `[x_k; x_{k+1}]` given the pair and `y`.
    pub moments: Vec<Vec<Vec<Option<Moments>>>>,
}

struct Affine {
    lin: DMatrix<f64>,
    off: DVector<f64>,
}

impl Affine {
    fn rows(&self) -> usize {
        self.lin.nrows()
    }
}

fn stack(parts: &[&Affine], dim: usize) -> Affine {
    let rows: usize = parts.iter().map(|p| p.rows()).sum();
    let mut lin = DMatrix::zeros(rows, dim);
    let mut off = DVector::zeros(rows);
    let mut r = 0;
    for p in parts {
        lin.rows_mut(r, p.rows()).copy_from(&p.lin);
        off.rows_mut(r, p.rows()).copy_from(&p.off);
        r += p.rows();
    }
    Affine { lin, off }
}

pub fn enumerate(model: &JmlsModel, data: &Dataset) -> Enumeration {
    let (m, n, n_y) = (model.num_modes(), model.n_x(), model.n_y());
    let steps = data.len();
    let block = n_y + n;
    let dim = n + steps * block;
    let y_obs = DVector::from_iterator(steps * n_y, data.y.iter().flat_map(|y| y.iter().copied()));

    struct Branch {
        log_w: f64,
        seq: Vec<usize>,
        chi: Vec<Moments>,
    }
    let mut branches = Vec::new();
    let total_seqs = m.pow(steps as u32 + 1);
    for code in 0..total_seqs {
        let seq: Vec<usize> = (0..=steps).map(|k| (code / m.pow(k as u32)) % m).collect();
        for comp in &model.prior.modes[seq[0]] {
            let mut cov_w = DMatrix::zeros(dim, dim);
            cov_w.view_mut((0, 0), (n, n)).copy_from(&comp.covariance());
            let mut xs = vec![Affine { lin: DMatrix::identity(n, dim), off: comp.mu.clone() }];
            let mut ys = Vec::new();
            let mut log_w = comp.log_w;
            for k in 0..steps {
                let o = n + k * block;
                let here = &model.modes[seq[k]];
                let next = &model.modes[seq[k + 1]];
                log_w += model.transition[(seq[k + 1], seq[k])].ln();
                match model.convention {
                    Convention::Dynamic => cov_w.view_mut((o, o), (block, block)).copy_from(&here.pi()),
                    Convention::Classic => {
                        cov_w.view_mut((o, o), (n_y, n_y)).copy_from(&here.r());
                        cov_w.view_mut((o + n_y, o + n_y), (n, n)).copy_from(&next.q());
                    }
                }
                let x = &xs[k];
                let mut e = DMatrix::zeros(n_y, dim);
                e.view_mut((0, o), (n_y, n_y)).fill_with_identity();
                ys.push(Affine { lin: &here.c * &x.lin + e, off: &here.c * &x.off + &here.d * &data.u[k] });
                let mut v = DMatrix::zeros(n, dim);
                v.view_mut((0, o + n_y), (n, n)).fill_with_identity();
                let (a, drive) = match model.convention {
                    Convention::Dynamic => (&here.a, &here.b * &data.u[k]),
                    Convention::Classic => (
                        &next.a,
                        data.u.get(k + 1).map_or_else(|| DVector::zeros(n), |u| &next.b * u),
                    ),
                };
                xs.push(Affine { lin: a * &x.lin + v, off: a * &x.off + drive });
            }
            let yy = stack(&ys.iter().collect::<Vec<_>>(), dim);
            let s_yy = sym(&yy.lin * &cov_w * yy.lin.transpose());
            log_w += gauss_logpdf(&y_obs, &yy.off, &s_yy);
            let gain = &cov_w * yy.lin.transpose() * inverse(&s_yy);
            let mean_w = &gain * (&y_obs - &yy.off);
            let cov_post = sym(&cov_w - &gain * &yy.lin * &cov_w);
            let chi = (0..steps)
                .map(|k| {
                    let a = stack(&[&xs[k], &xs[k + 1]], dim);
                    (&a.lin * &mean_w + &a.off, sym(&a.lin * &cov_post * a.lin.transpose()))
                })
                .collect();
            branches.push(Branch { log_w, seq: seq.clone(), chi });
        }
    }
    let top = branches.iter().map(|b| b.log_w).fold(f64::NEG_INFINITY, f64::max);
    let loglik = top + branches.iter().map(|b| (b.log_w - top).exp()).sum::<f64>().ln();

    let mut pair = vec![DMatrix::zeros(m, m); steps];
    let mut acc = vec![vec![vec![(0.0, DVector::zeros(2 * n), DMatrix::zeros(2 * n, 2 * n)); m]; m]; steps];
    for b in &branches {
        let w = (b.log_w - loglik).exp();
        for k in 0..steps {
            let (i, j) = (b.seq[k], b.seq[k + 1]);
            pair[k][(i, j)] += w;
            let (mu, cov) = &b.chi[k];
            let slot = &mut acc[k][i][j];
            slot.0 += w;
            slot.1 += w * mu;
            slot.2 += w * (cov + mu * mu.transpose());
        }
    }
    let moments = acc
        .into_iter()
        .map(|row| {
            row.into_iter()
                .map(|cells| {
                    cells
                        .into_iter()
                        .map(|(w, s1, s2)| {
                            (w > 0.0).then(|| {
                                let mu = s1 / w;
                                let cov = s2 / w - &mu * mu.transpose();
                                (mu, sym(cov))
                            })
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    Enumeration { loglik, pair, moments }
}

/// `E[ln N(r; 0, cov)]` for `r = M χ + d`, `χ ~ N(μ, P)`.
fn expected_log_normal(lin: &DMatrix<f64>, off: &DVector<f64>, mu: &DVector<f64>, p: &DMatrix<f64>, cov: &DMatrix<f64>) -> f64 {
    let mean = lin * mu + off;
    let second = lin * p * lin.transpose() + &mean * mean.transpose();
    let chol = cov.clone().cholesky().expect("positive definite noise covariance");
    let log_det: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
    let trace = (chol.inverse() * second).trace();
    -0.5 * (cov.nrows() as f64 * LN_2PI + log_det + trace)
}

/// EM surrogate `Q(θ)` under the given joint smoothed mixtures, without the
/// initial-state term.
pub fn q_function(model: &JmlsModel, joint: &[JointSmoothedMixture], data: &Dataset) -> f64 {
    let (n, n_y) = (model.n_x(), model.n_y());
    let steps = data.len();
    let mut q = 0.0;
    for (k, jk) in joint.iter().enumerate() {
        let (u, y) = (&data.u[k], &data.y[k]);
        for (i, row) in jk.pairs.iter().enumerate() {
            for (j, comps) in row.iter().enumerate() {
                for c in comps {
                    let w = c.log_w.exp();
                    let p = c.covariance();
                    let here = &model.modes[i];
                    let next = &model.modes[j];
                    match model.convention {
                        Convention::Dynamic => {
                            let mut lin = DMatrix::zeros(n_y + n, 2 * n);
                            lin.view_mut((0, 0), (n_y, n)).copy_from(&(-&here.c));
                            lin.view_mut((n_y, 0), (n, n)).copy_from(&(-&here.a));
                            lin.view_mut((n_y, n), (n, n)).fill_with_identity();
                            let mut off = DVector::zeros(n_y + n);
                            off.rows_mut(0, n_y).copy_from(&(y - &here.d * u));
                            off.rows_mut(n_y, n).copy_from(&(-&here.b * u));
                            q += w * (model.transition[(j, i)].ln() + expected_log_normal(&lin, &off, &c.mu, &p, &here.pi()));
                        }
                        Convention::Classic => {
                            let mut lin = DMatrix::zeros(n_y, 2 * n);
                            lin.view_mut((0, 0), (n_y, n)).copy_from(&(-&here.c));
                            let off = y - &here.d * u;
                            q += w * expected_log_normal(&lin, &off, &c.mu, &p, &here.r());
                            if k + 1 < steps {
                                let mut lin = DMatrix::zeros(n, 2 * n);
                                lin.view_mut((0, 0), (n, n)).copy_from(&(-&next.a));
                                lin.view_mut((0, n), (n, n)).fill_with_identity();
                                let off = -&next.b * &data.u[k + 1];
                                q += w * (model.transition[(j, i)].ln() + expected_log_normal(&lin, &off, &c.mu, &p, &next.q()));
                            }
                        }
                    }
                }
            }
        }
    }
    q
}

/// Controllable canonical realization of `(b₁ z + b₀) / (z² + a₁ z + a₀)`.
pub fn second_order_mode(num: [f64; 2], den: [f64; 2], q: f64, r: f64) -> ModeParams {
    let a = DMatrix::from_row_slice(2, 2, &[-den[0], -den[1], 1.0, 0.0]);
    let b = DMatrix::from_row_slice(2, 1, &[1.0, 0.0]);
    let c = DMatrix::from_row_slice(1, 2, &[num[0], num[1]]);
    let d = DMatrix::zeros(1, 1);
    ModeParams { a, b, c, d, pi_half: jmls_core::UtFactor::from_diagonal(&[r.sqrt(), q.sqrt(), q.sqrt()]) }
}
