//! Synthetic trajectories from a JMLS.
//!
//! Randomness comes from ChaCha8 seeded with a `u64`; normal variates use
//! the ziggurat sampler of `rand_distr`, uniform variates feed inverse-CDF
//! mode draws. Draw order per run: inputs (if random), the prior component,
//! the prior state, then for each step the stacked noise vector followed by
//! the next-mode uniform.
//!
//! Time starts at `k = 1` with the prior sample as `x_1`; a trajectory
//! described from `x_0` maps onto this one shifted by one step.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{JmlsError, Result};
use crate::model::{Convention, JmlsModel};

/// Observed inputs and outputs, optionally with the hidden trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub u: Vec<DVector<f64>>,
    pub y: Vec<DVector<f64>>,
    /// States `x_1 … x_{N+1}`.
    pub x: Option<Vec<DVector<f64>>>,
    /// Modes `z_1 … z_N`, zero-based.
    pub z: Option<Vec<usize>>,
    pub seed: Option<u64>,
    pub convention: Convention,
}

impl Dataset {
    pub fn new(u: Vec<DVector<f64>>, y: Vec<DVector<f64>>) -> Result<Self> {
        if u.len() != y.len() {
            return Err(JmlsError::DimensionMismatch(format!("{} inputs vs {} outputs", u.len(), y.len())));
        }
        if y.is_empty() {
            return Err(JmlsError::EmptyInput);
        }
        Ok(Dataset { u, y, x: None, z: None, seed: None, convention: Convention::Dynamic })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn n_u(&self) -> usize {
        self.u.first().map_or(0, |u| u.len())
    }

    pub fn n_y(&self) -> usize {
        self.y.first().map_or(0, |y| y.len())
    }

    /// Checks sizes against a model.
    pub fn check_against(&self, model: &JmlsModel) -> Result<()> {
        if self.is_empty() {
            return Err(JmlsError::EmptyInput);
        }
        let bad_u = self.u.iter().any(|u| u.len() != model.n_u());
        let bad_y = self.y.iter().any(|y| y.len() != model.n_y());
        if bad_u || bad_y || self.u.len() != self.y.len() {
            return Err(JmlsError::DimensionMismatch(format!(
                "dataset columns do not match model (n_u = {}, n_y = {})",
                model.n_u(),
                model.n_y()
            )));
        }
        Ok(())
    }

    /// Returns the first `n` steps.
    pub fn truncated(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            u: self.u[..n].to_vec(),
            y: self.y[..n].to_vec(),
            x: self.x.as_ref().map(|x| x[..=n].to_vec()),
            z: self.z.as_ref().map(|z| z[..n].to_vec()),
            seed: self.seed,
            convention: self.convention,
        }
    }
}

/// How the input sequence is produced.
#[derive(Clone, Debug, PartialEq)]
pub enum InputLaw {
    /// i.i.d. standard normal entries.
    StandardNormal,
    /// All-zero inputs.
    Zero,
    /// A fixed sequence (length must match `N`).
    Given(Vec<DVector<f64>>),
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

fn draw_index(rng: &mut ChaCha8Rng, probs: impl IntoIterator<Item = f64>) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, p) in probs.into_iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

/// Simulates `n` steps. Deterministic per `seed`.
pub fn simulate(model: &JmlsModel, inputs: &InputLaw, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(JmlsError::EmptyInput);
    }
    let (n_x, n_u, n_y) = (model.n_x(), model.n_u(), model.n_y());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u: Vec<DVector<f64>> = match inputs {
        InputLaw::StandardNormal => (0..n).map(|_| normal_vec(&mut rng, n_u)).collect(),
        InputLaw::Zero => vec![DVector::zeros(n_u); n],
        InputLaw::Given(u) => {
            if u.len() != n || u.iter().any(|v| v.len() != n_u) {
                return Err(JmlsError::DimensionMismatch(format!("given inputs must be {n} vectors of length {n_u}")));
            }
            u.clone()
        }
    };

    let comps: Vec<_> = model.prior.iter().collect();
    let log_total = model.prior.log_total();
    let pick = draw_index(&mut rng, comps.iter().map(|(_, c)| (c.log_w - log_total).exp()));
    let (mut z, first) = comps[pick];
    let mut x = &first.mu + first.p_half.matrix().tr_mul(&normal_vec(&mut rng, n_x));

    let mut xs = Vec::with_capacity(n + 1);
    let mut zs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for k in 0..n {
        let mode = &model.modes[z];
        let xi = normal_vec(&mut rng, n_y + n_x);
        let noise = mode.pi_half.matrix().tr_mul(&xi);
        let e = noise.rows(0, n_y).into_owned();
        ys.push(&mode.c * &x + &mode.d * &u[k] + e);
        let next = draw_index(&mut rng, model.transition.column(z).iter().copied());
        let x_next = match model.convention {
            Convention::Dynamic => &mode.a * &x + &mode.b * &u[k] + noise.rows(n_y, n_x),
            Convention::Classic => {
                let to = &model.modes[next];
                let v = to.pi_half.matrix().tr_mul(&xi).rows(n_y, n_x).into_owned();
                let u_next = u.get(k + 1).cloned().unwrap_or_else(|| DVector::zeros(n_u));
                &to.a * &x + &to.b * u_next + v
            }
        };
        xs.push(x);
        zs.push(z);
        x = x_next;
        z = next;
    }
    xs.push(x);
    Ok(Dataset { u, y: ys, x: Some(xs), z: Some(zs), seed: Some(seed), convention: model.convention })
}

/// Sample covariance of `[e_k; v_k]` recovered from a simulated dynamic-convention
/// trajectory of a single-mode model.
pub fn empirical_noise_covariance(model: &JmlsModel, data: &Dataset) -> Option<DMatrix<f64>> {
    let (xs, zs) = (data.x.as_ref()?, data.z.as_ref()?);
    let (n_x, n_y) = (model.n_x(), model.n_y());
    let mut acc = DMatrix::zeros(n_y + n_x, n_y + n_x);
    for k in 0..data.len() {
        let md = &model.modes[zs[k]];
        let e = &data.y[k] - &md.c * &xs[k] - &md.d * &data.u[k];
        let v = &xs[k + 1] - &md.a * &xs[k] - &md.b * &data.u[k];
        let ev = DVector::from_iterator(n_y + n_x, e.iter().chain(v.iter()).copied());
        acc += &ev * ev.transpose();
    }
    Some(acc / data.len() as f64)
}
