//! Jump Markov linear system description.
//!
//! A model holds one linear-Gaussian system per discrete mode, a
//! column-stochastic transition matrix `T(j, i) = P(z_{k+1} = j | z_k = i)`
//! and a hybrid prior over `(x_1, z_1)`.
//!
//! Each mode carries the factor of its joint noise covariance
//! `Π = [[R, Sᵀ], [S, Q]]`, measurement block first.

use nalgebra::{Complex, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{JmlsError, Result};
use crate::mixture::HybridMixture;
use crate::numkit::{chol_upper, qless_qr, UtFactor};

/// Which mode drives the state transition.
///
/// * `Dynamic`: `x_{k+1} = A(z_k) x_k + B(z_k) u_k + v_k`, `y_k = C(z_k) x_k + D(z_k) u_k + e_k`,
///   with `[e_k; v_k]` jointly Gaussian (cross covariance `S` allowed).
/// * `Classic`: `x_{k+1} = A(z_{k+1}) x_k + B(z_{k+1}) u_{k+1} + v_k`, same measurement
///   equation, and `S = 0`. The mode entering step `k+1` selects the dynamics
///   that produce `x_{k+1}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Convention {
    #[default]
    Dynamic,
    Classic,
}

/// Parameters of one linear mode.
#[derive(Clone, Debug, PartialEq)]
pub struct ModeParams {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
    /// Upper factor of `Π = [[R, Sᵀ], [S, Q]]`, size `n_y + n_x`.
    pub pi_half: UtFactor,
}

impl ModeParams {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>, d: DMatrix<f64>, pi_half: UtFactor) -> Result<Self> {
        let n_x = a.nrows();
        let (n_y, n_u) = (c.nrows(), b.ncols());
        let ok = a.is_square()
            && b.nrows() == n_x
            && c.ncols() == n_x
            && d.nrows() == n_y
            && d.ncols() == n_u
            && pi_half.dim() == n_x + n_y;
        if !ok {
            return Err(JmlsError::DimensionMismatch(format!(
                "mode matrices A {:?}, B {:?}, C {:?}, D {:?}, Pi_half {}",
                a.shape(),
                b.shape(),
                c.shape(),
                d.shape(),
                pi_half.dim()
            )));
        }
        Ok(ModeParams { a, b, c, d, pi_half })
    }

    /// Builds a mode from the noise covariances `Q`, `R` and cross term `S`
    /// (`S = E[v eᵀ]`, `n_x × n_y`).
    pub fn from_covariances(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        d: DMatrix<f64>,
        q: &DMatrix<f64>,
        r: &DMatrix<f64>,
        s: Option<&DMatrix<f64>>,
    ) -> Result<Self> {
        let (n_x, n_y) = (q.nrows(), r.nrows());
        let mut pi = DMatrix::zeros(n_x + n_y, n_x + n_y);
        pi.view_mut((0, 0), (n_y, n_y)).copy_from(r);
        pi.view_mut((n_y, n_y), (n_x, n_x)).copy_from(q);
        if let Some(s) = s {
            pi.view_mut((n_y, 0), (n_x, n_y)).copy_from(s);
            pi.view_mut((0, n_y), (n_y, n_x)).copy_from(&s.transpose());
        }
        Self::new(a, b, c, d, chol_upper(&pi)?)
    }

    pub fn n_x(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_u(&self) -> usize {
        self.b.ncols()
    }

    pub fn n_y(&self) -> usize {
        self.c.nrows()
    }

    /// `Γ = [[C, D], [A, B]]`.
    pub fn gamma(&self) -> DMatrix<f64> {
        let (n_x, n_u, n_y) = (self.n_x(), self.n_u(), self.n_y());
        let mut g = DMatrix::zeros(n_y + n_x, n_x + n_u);
        g.view_mut((0, 0), (n_y, n_x)).copy_from(&self.c);
        g.view_mut((0, n_x), (n_y, n_u)).copy_from(&self.d);
        g.view_mut((n_y, 0), (n_x, n_x)).copy_from(&self.a);
        g.view_mut((n_y, n_x), (n_x, n_u)).copy_from(&self.b);
        g
    }

    /// Replaces `A, B, C, D` from a stacked `Γ`.
    pub fn set_gamma(&mut self, g: &DMatrix<f64>) {
        let (n_x, n_u, n_y) = (self.n_x(), self.n_u(), self.n_y());
        self.c = g.view((0, 0), (n_y, n_x)).into_owned();
        self.d = g.view((0, n_x), (n_y, n_u)).into_owned();
        self.a = g.view((n_y, 0), (n_x, n_x)).into_owned();
        self.b = g.view((n_y, n_x), (n_x, n_u)).into_owned();
    }

    pub fn pi(&self) -> DMatrix<f64> {
        self.pi_half.gram()
    }

    pub fn r(&self) -> DMatrix<f64> {
        let n_y = self.n_y();
        self.pi().view((0, 0), (n_y, n_y)).into_owned()
    }

    pub fn q(&self) -> DMatrix<f64> {
        let (n_x, n_y) = (self.n_x(), self.n_y());
        self.pi().view((n_y, n_y), (n_x, n_x)).into_owned()
    }

    /// Cross covariance `S = E[v eᵀ]` (`n_x × n_y`).
    pub fn s(&self) -> DMatrix<f64> {
        let (n_x, n_y) = (self.n_x(), self.n_y());
        self.pi().view((n_y, 0), (n_x, n_y)).into_owned()
    }

    pub fn r_half(&self) -> UtFactor {
        self.pi_half.leading(self.n_y())
    }
}

/// A jump Markov linear system.
#[derive(Clone, Debug, PartialEq)]
pub struct JmlsModel {
    pub modes: Vec<ModeParams>,
    /// Column-stochastic: `transition[(j, i)] = P(z_{k+1} = j | z_k = i)`.
    pub transition: DMatrix<f64>,
    pub prior: HybridMixture,
    pub convention: Convention,
}

impl JmlsModel {
    pub fn num_modes(&self) -> usize {
        self.modes.len()
    }

    pub fn n_x(&self) -> usize {
        self.modes[0].n_x()
    }

    pub fn n_u(&self) -> usize {
        self.modes[0].n_u()
    }

    pub fn n_y(&self) -> usize {
        self.modes[0].n_y()
    }

    /// Returns an error listing every violation when the model is invalid.
    pub fn check(&self) -> Result<()> {
        let v = validate(self);
        if v.is_empty() {
            Ok(())
        } else {
            let msg: Vec<String> = v.iter().map(ToString::to_string).collect();
            Err(JmlsError::InvalidModel(msg.join("; ")))
        }
    }
}

/// A broken model invariant.
#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    pub location: String,
    pub defect: f64,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {} (defect {:.3e})", self.location, self.message, self.defect)
    }
}

/// Lists every violated model invariant; empty when the model is valid.
pub fn validate(model: &JmlsModel) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |location: String, defect: f64, message: &str| {
        out.push(Violation { location, defect, message: message.to_string() });
    };
    let m = model.modes.len();
    if m == 0 {
        push("modes".into(), 1.0, "model has no modes");
        return out;
    }
    let (n_x, n_u, n_y) = (model.n_x(), model.n_u(), model.n_y());
    for (z, mode) in model.modes.iter().enumerate() {
        let loc = |f: &str| format!("mode {} {f}", z + 1);
        if mode.n_x() != n_x || mode.n_u() != n_u || mode.n_y() != n_y {
            push(loc("dimensions"), 1.0, "dimensions differ from mode 1");
            continue;
        }
        let pi = mode.pi_half.matrix();
        let lower: f64 = (0..pi.nrows()).flat_map(|i| (0..i).map(move |j| (i, j))).map(|ij| pi[ij].abs()).sum();
        if lower > 0.0 {
            push(loc("Pi_half"), lower, "factor is not upper triangular");
        }
        if pi.iter().any(|x| !x.is_finite()) {
            push(loc("Pi_half"), f64::INFINITY, "non-finite entries");
        }
        let r_diag = (0..n_y).map(|i| pi[(i, i)].abs()).fold(f64::INFINITY, f64::min);
        if n_y > 0 && !(r_diag > 0.0) {
            push(loc("R"), r_diag, "measurement covariance is not positive definite");
        }
        if model.convention == Convention::Classic {
            let s = mode.s().amax();
            if s > 1e-12 {
                push(loc("S"), s, "classic convention requires zero cross covariance");
            }
        }
    }
    let t = &model.transition;
    if t.shape() != (m, m) {
        push("T".into(), 1.0, "transition matrix has the wrong shape");
    } else {
        for i in 0..m {
            let col = t.column(i);
            let sum: f64 = col.iter().sum();
            if (sum - 1.0).abs() > 1e-12 {
                push(format!("T column {}", i + 1), (sum - 1.0).abs(), "column does not sum to one");
            }
            for (j, &p) in col.iter().enumerate() {
                if !(0.0..=1.0).contains(&p) {
                    push(format!("T({}, {})", j + 1, i + 1), p, "entry outside [0, 1]");
                }
            }
        }
    }
    if model.prior.num_modes() != m {
        push("prior".into(), 1.0, "prior mode count differs from model");
    } else {
        let total = model.prior.log_total();
        if !total.is_finite() || total.abs() > 1e-12 {
            push("prior".into(), total.exp() - 1.0, "prior weights do not sum to one");
        }
        for (z, c) in model.prior.iter() {
            if c.dim() != n_x {
                push(format!("prior mode {}", z + 1), 1.0, "prior component has the wrong dimension");
            }
        }
    }
    out
}

/// A mode rewritten with uncorrelated process and measurement noise:
/// `x_{k+1} = A_k x_k + B_k ū_k + v'`, `y_k = C_k x_k + D_k ū_k + e`,
/// `ū_k = [u_k; y_k]`.
#[derive(Clone, Debug)]
pub struct TransformedMode {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub q_half: UtFactor,
    pub r_half: UtFactor,
    /// `K̄ = S R⁻¹`.
    pub gain: DMatrix<f64>,
    /// Off-diagonal block `H` of `Π^{1/2}`.
    pub h: DMatrix<f64>,
}

impl TransformedMode {
    /// `b_k = B_k [u_k; y_k]`.
    pub fn offset(&self, u: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        let n_u = u.len();
        let bu = self.b.columns(0, n_u) * u;
        bu + self.b.columns(n_u, y.len()) * y
    }
}

/// Decorrelates a mode's noise by conditioning the process noise on the
/// measurement noise. The map is exact.
pub fn transform_mode(mode: &ModeParams, index: usize) -> Result<TransformedMode> {
    let (n_x, n_u, n_y) = (mode.n_x(), mode.n_u(), mode.n_y());
    let f = mode.pi_half.matrix();
    let r_half = UtFactor::from_upper(f.view((0, 0), (n_y, n_y)).into_owned());
    if n_y > 0 && !r_half.is_nonsingular(1e-14) {
        return Err(JmlsError::SingularR { mode: index });
    }
    let h = f.view((0, n_y), (n_y, n_x)).into_owned();
    let q_half = UtFactor::from_upper(f.view((n_y, n_y), (n_x, n_x)).into_owned());
    // K̄ = Hᵀ R^{-T/2}  <=>  R^{1/2} K̄ᵀ = H
    let gain = r_half.solve_mat(&h).ok_or(JmlsError::SingularR { mode: index })?.transpose();
    let a = &mode.a - &gain * &mode.c;
    let mut b = DMatrix::zeros(n_x, n_u + n_y);
    b.columns_mut(0, n_u).copy_from(&(&mode.b - &gain * &mode.d));
    b.columns_mut(n_u, n_y).copy_from(&gain);
    let mut d = DMatrix::zeros(n_y, n_u + n_y);
    d.columns_mut(0, n_u).copy_from(&mode.d);
    Ok(TransformedMode { a, b, c: mode.c.clone(), d, q_half, r_half, gain, h })
}

/// Applies the similarity transform `x̄ = Tr x` to every mode and the prior.
pub fn apply_state_transform(model: &JmlsModel, tr: &DMatrix<f64>) -> Result<JmlsModel> {
    let n_x = model.n_x();
    if tr.shape() != (n_x, n_x) {
        return Err(JmlsError::DimensionMismatch(format!("transform must be {n_x}x{n_x}")));
    }
    let sv = tr.clone().svd(false, false).singular_values;
    let (smax, smin) = (sv.max(), sv.min());
    let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !(condition < 1e12) {
        return Err(JmlsError::SingularTransform { condition });
    }
    let tr_inv = tr.clone().try_inverse().ok_or(JmlsError::SingularTransform { condition })?;
    let n_y = model.n_y();
    let mut lift = DMatrix::<f64>::identity(n_y + n_x, n_y + n_x);
    lift.view_mut((n_y, n_y), (n_x, n_x)).copy_from(tr);
    let modes = model
        .modes
        .iter()
        .map(|m| ModeParams {
            a: tr * &m.a * &tr_inv,
            b: tr * &m.b,
            c: &m.c * &tr_inv,
            d: m.d.clone(),
            pi_half: qless_qr(&(m.pi_half.matrix() * lift.transpose())),
        })
        .collect();
    let mut prior = model.prior.clone();
    for comps in &mut prior.modes {
        for c in comps.iter_mut() {
            c.mu = tr * &c.mu;
            c.p_half = qless_qr(&(c.p_half.matrix() * tr.transpose()));
        }
    }
    Ok(JmlsModel { modes, transition: model.transition.clone(), prior, convention: model.convention })
}

/// `H(e^{jω}) = C (e^{jω} I - A)⁻¹ B + D` at each frequency (radians/sample).
pub fn frequency_response(mode: &ModeParams, freqs: &[f64]) -> Vec<DMatrix<Complex<f64>>> {
    let n_x = mode.n_x();
    let cplx = |m: &DMatrix<f64>| m.map(|x| Complex::new(x, 0.0));
    let (a, b, c, d) = (cplx(&mode.a), cplx(&mode.b), cplx(&mode.c), cplx(&mode.d));
    freqs
        .iter()
        .map(|&w| {
            let z = Complex::new(w.cos(), w.sin());
            let lhs = DMatrix::<Complex<f64>>::identity(n_x, n_x) * z - &a;
            let x = lhs.lu().solve(&b).unwrap_or_else(|| DMatrix::from_element(n_x, b.ncols(), Complex::new(f64::NAN, 0.0)));
            &c * x + &d
        })
        .collect()
}

/// `count` log-spaced frequencies on `[1e-3, π]`.
pub fn default_frequency_grid(count: usize) -> Vec<f64> {
    let (lo, hi) = (1e-3f64.ln(), std::f64::consts::PI.ln());
    if count == 1 {
        return vec![std::f64::consts::PI];
    }
    (0..count).map(|i| (lo + (hi - lo) * i as f64 / (count - 1) as f64).exp()).collect()
}

/// Result of aligning estimated modes with reference modes.
#[derive(Clone, Debug, PartialEq)]
pub struct ModeMatch {
    /// `mapping[z]` is the estimated mode matched to reference mode `z`.
    pub mapping: Vec<usize>,
    /// Squared magnitude-response error of each reference mode under the mapping.
    pub per_mode_error: Vec<f64>,
    pub total_error: f64,
}

fn magnitudes(mode: &ModeParams, freqs: &[f64]) -> Vec<f64> {
    frequency_response(mode, freqs).iter().flat_map(|h| h.iter().map(|c| c.norm()).collect::<Vec<_>>()).collect()
}

/// Squared ℓ² distance between the magnitude responses of two modes.
pub fn bode_error(a: &ModeParams, b: &ModeParams, freqs: &[f64]) -> f64 {
    let (ma, mb) = (magnitudes(a, freqs), magnitudes(b, freqs));
    ma.iter().zip(&mb).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Finds the one-to-one mode mapping minimizing the summed squared Bode
/// magnitude error, by exhaustive search. Ties go to the lexicographically
/// smallest mapping.
pub fn match_modes(estimated: &JmlsModel, truth: &JmlsModel, freqs: &[f64]) -> Result<ModeMatch> {
    let m = truth.num_modes();
    if estimated.num_modes() != m {
        return Err(JmlsError::ModeCountMismatch { left: estimated.num_modes(), right: m });
    }
    if m > 8 {
        return Err(JmlsError::DimensionMismatch("mode matching supports at most 8 modes".into()));
    }
    let est_mag: Vec<Vec<f64>> = estimated.modes.iter().map(|md| magnitudes(md, freqs)).collect();
    let true_mag: Vec<Vec<f64>> = truth.modes.iter().map(|md| magnitudes(md, freqs)).collect();
    let err = |zt: usize, ze: usize| -> f64 {
        true_mag[zt].iter().zip(&est_mag[ze]).map(|(x, y)| (x - y).powi(2)).sum()
    };
    let table: Vec<Vec<f64>> = (0..m).map(|zt| (0..m).map(|ze| err(zt, ze)).collect()).collect();

    let mut perm: Vec<usize> = (0..m).collect();
    let mut best: Option<(f64, Vec<usize>)> = None;
    loop {
        let total: f64 = perm.iter().enumerate().map(|(zt, &ze)| table[zt][ze]).sum();
        if best.as_ref().is_none_or(|(b, _)| total < *b) {
            best = Some((total, perm.clone()));
        }
        if !next_permutation(&mut perm) {
            break;
        }
    }
    let (total_error, mapping) = best.expect("at least one permutation");
    let per_mode_error = mapping.iter().enumerate().map(|(zt, &ze)| table[zt][ze]).collect();
    Ok(ModeMatch { mapping, per_mode_error, total_error })
}

fn next_permutation(p: &mut [usize]) -> bool {
    let n = p.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

/// Reorders modes (and the transition matrix and prior) so that new mode
/// `z` is old mode `mapping[z]`.
pub fn permute_modes(model: &JmlsModel, mapping: &[usize]) -> JmlsModel {
    let m = model.num_modes();
    let modes = mapping.iter().map(|&z| model.modes[z].clone()).collect();
    let transition = DMatrix::from_fn(m, m, |j, i| model.transition[(mapping[j], mapping[i])]);
    let prior = HybridMixture { modes: mapping.iter().map(|&z| model.prior.modes[z].clone()).collect() };
    JmlsModel { modes, transition, prior, convention: model.convention }
}

fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    a.clone().complex_eigenvalues().iter().map(|c| c.norm()).fold(0.0, f64::max)
}

/// Draws a random stable model. Deterministic per seed.
///
/// Each `A` is drawn with `N(0, 1/n_x)` entries and redrawn until its
/// spectral radius is below one; `B, C, D` have `N(0, 1)` entries; `Π^{1/2}`
/// is upper triangular with diagonal in `[0.1, 0.5]` and `N(0, 0.05²)`
/// off-diagonals; transition columns are normalized `U(0.1, 1)` draws; the
/// prior is `N(0, I)` on every mode with equal weight.
pub fn random_model(n_x: usize, n_u: usize, n_y: usize, m: usize, seed: u64) -> JmlsModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = |rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64| {
        DMatrix::from_fn(r, c, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
    };
    let modes = (0..m)
        .map(|_| {
            let a = loop {
                let a = normal(&mut rng, n_x, n_x, 1.0 / (n_x as f64).sqrt());
                if spectral_radius(&a) < 1.0 {
                    break a;
                }
            };
            let b = normal(&mut rng, n_x, n_u, 1.0);
            let c = normal(&mut rng, n_y, n_x, 1.0);
            let d = normal(&mut rng, n_y, n_u, 1.0);
            let n = n_x + n_y;
            let mut f = DMatrix::zeros(n, n);
            for i in 0..n {
                f[(i, i)] = rng.random_range(0.1..0.5);
                for j in (i + 1)..n {
                    f[(i, j)] = 0.05 * rng.sample::<f64, _>(StandardNormal);
                }
            }
            ModeParams { a, b, c, d, pi_half: UtFactor::from_upper(f) }
        })
        .collect();
    let mut t = DMatrix::from_fn(m, m, |_, _| rng.random_range(0.1..1.0));
    for mut col in t.column_iter_mut() {
        let s = col.sum();
        col /= s;
    }
    JmlsModel {
        modes,
        transition: t,
        prior: HybridMixture::uniform(m, DVector::zeros(n_x), UtFactor::identity(n_x)),
        convention: Convention::Dynamic,
    }
}

/// The three-mode scalar benchmark system, in the classic convention,
/// with prior `⅓ N(0, 1)` on each mode.
pub fn benchmark_scalar_system() -> JmlsModel {
    let params = [
        (0.9, 0.1, 0.9, 0.045, 0.002),
        (0.65, -0.32, 1.0, 0.002, 0.005),
        (0.51, 0.2, 1.2, 0.02, 0.009),
    ];
    let modes = params
        .iter()
        .map(|&(a, b, c, q, r)| ModeParams {
            a: DMatrix::from_element(1, 1, a),
            b: DMatrix::from_element(1, 1, b),
            c: DMatrix::from_element(1, 1, c),
            d: DMatrix::zeros(1, 1),
            pi_half: UtFactor::from_diagonal(&[f64::sqrt(r), f64::sqrt(q)]),
        })
        .collect();
    let transition = DMatrix::from_row_slice(3, 3, &[0.6, 0.35, 0.1, 0.3, 0.6, 0.4, 0.1, 0.05, 0.5]);
    JmlsModel {
        modes,
        transition,
        prior: HybridMixture::uniform(3, DVector::zeros(1), UtFactor::identity(1)),
        convention: Convention::Classic,
    }
}
