//! Square-root linear algebra shared by the estimators.
//!
//! Every covariance-like quantity travels through the crate as an upper
//! triangular factor `F` with `FᵀF = M`. Factors are produced with a
//! nonnegative diagonal so that they are unique for full-rank `M`.

use nalgebra::{DMatrix, DVector};

use crate::error::{JmlsError, Result};

/// Upper-triangular square-root factor `F` of a PSD matrix `M = FᵀF`.
#[derive(Clone, Debug, PartialEq)]
pub struct UtFactor(DMatrix<f64>);

impl UtFactor {
    pub fn zeros(n: usize) -> Self {
        UtFactor(DMatrix::zeros(n, n))
    }

    pub fn identity(n: usize) -> Self {
        UtFactor(DMatrix::identity(n, n))
    }

    /// Wraps a square matrix, discarding anything below the diagonal and
    /// flipping rows so the diagonal is nonnegative.
    pub fn from_upper(mut m: DMatrix<f64>) -> Self {
        assert!(m.is_square(), "factor must be square");
        let n = m.nrows();
        for i in 0..n {
            for j in 0..i {
                m[(i, j)] = 0.0;
            }
        }
        normalize_signs(&mut m);
        UtFactor(m)
    }

    /// Diagonal factor `diag(d)`, entries taken in absolute value.
    pub fn from_diagonal(d: &[f64]) -> Self {
        let v = DVector::from_iterator(d.len(), d.iter().map(|x| x.abs()));
        UtFactor(DMatrix::from_diagonal(&v))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    /// `FᵀF`, the matrix this factor represents.
    pub fn gram(&self) -> DMatrix<f64> {
        self.0.tr_mul(&self.0)
    }

    /// `ln |FᵀF|`; `-inf` when the factor is singular.
    pub fn log_det_gram(&self) -> f64 {
        2.0 * self.0.diagonal().iter().map(|d| d.abs().ln()).sum::<f64>()
    }

    /// True when every diagonal entry exceeds `rel_tol` times the largest one.
    pub fn is_nonsingular(&self, rel_tol: f64) -> bool {
        let diag = self.0.diagonal();
        let max = diag.iter().fold(0.0_f64, |a, d| a.max(d.abs()));
        max > 0.0 && diag.iter().all(|d| d.abs() > rel_tol * max)
    }

    /// Solves `F x = b`.
    pub fn solve(&self, b: &DVector<f64>) -> Option<DVector<f64>> {
        self.0.solve_upper_triangular(b)
    }

    /// Solves `Fᵀ x = b`.
    pub fn solve_transpose(&self, b: &DVector<f64>) -> Option<DVector<f64>> {
        self.0.tr_solve_upper_triangular(b)
    }

    /// Solves `F X = B`.
    pub fn solve_mat(&self, b: &DMatrix<f64>) -> Option<DMatrix<f64>> {
        self.0.solve_upper_triangular(b)
    }

    /// Solves `Fᵀ X = B`.
    pub fn solve_transpose_mat(&self, b: &DMatrix<f64>) -> Option<DMatrix<f64>> {
        self.0.tr_solve_upper_triangular(b)
    }

    /// Factor of `c² M`.
    pub fn scaled(&self, c: f64) -> Self {
        UtFactor(&self.0 * c.abs())
    }

    /// Factor of the leading `k×k` block of `M`.
    pub fn leading(&self, k: usize) -> Self {
        UtFactor(self.0.view((0, 0), (k, k)).into_owned())
    }

    /// Factor of the trailing block of `M` starting at index `k`.
    pub fn trailing(&self, k: usize) -> Self {
        let n = self.dim();
        qless_qr(&self.0.columns(k, n - k).into_owned())
    }
}

fn normalize_signs(r: &mut DMatrix<f64>) {
    let n = r.nrows().min(r.ncols());
    for i in 0..n {
        if r[(i, i)] < 0.0 {
            r.row_mut(i).neg_mut();
        }
    }
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |a, x| a.max(x.abs()))
}

/// Cholesky that tolerates zero pivots up to `zero_tol`, zeroing the
/// corresponding row. Returns the failing pivot when one is below `-zero_tol`.
fn try_chol(m: &DMatrix<f64>, zero_tol: f64) -> std::result::Result<DMatrix<f64>, (usize, f64)> {
    let n = m.nrows();
    let mut f = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = m[(j, j)];
        for k in 0..j {
            d -= f[(k, j)] * f[(k, j)];
        }
        if d > zero_tol {
            let piv = d.sqrt();
            f[(j, j)] = piv;
            for i in (j + 1)..n {
                let mut v = m[(j, i)];
                for k in 0..j {
                    v -= f[(k, j)] * f[(k, i)];
                }
                f[(j, i)] = v / piv;
            }
        } else if d < -zero_tol {
            return Err((j, d));
        }
    }
    Ok(f)
}

/// Upper Cholesky factor of a symmetric PSD matrix.
///
/// The input is symmetrized first. On a negative pivot the diagonal is
/// loaded once with `1e-12·trace/n` and the factorization retried; pivots
/// still below `-1e-8·‖M‖` are reported as [`JmlsError::NotPsd`].
pub fn chol_upper(m: &DMatrix<f64>) -> Result<UtFactor> {
    if !m.is_square() {
        return Err(JmlsError::DimensionMismatch(format!(
            "chol_upper needs a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    let n = m.nrows();
    if n == 0 {
        return Ok(UtFactor::zeros(0));
    }
    let sym = symmetrize(m);
    let norm = max_abs(&sym);
    if norm == 0.0 {
        return Ok(UtFactor::zeros(n));
    }
    let zero_tol = 64.0 * f64::EPSILON * norm;
    match try_chol(&sym, zero_tol) {
        Ok(f) => Ok(UtFactor(f)),
        Err(_) => {
            let jitter = 1e-12 * sym.trace().max(0.0) / n as f64;
            let mut loaded = sym.clone();
            for i in 0..n {
                loaded[(i, i)] += jitter;
            }
            try_chol(&loaded, 1e-8 * norm)
                .map(UtFactor)
                .map_err(|(index, pivot)| JmlsError::NotPsd { index, pivot })
        }
    }
}

/// Triangular factor `R` of the QR decomposition of `s`, with `RᵀR = sᵀs`.
///
/// The orthogonal factor is never formed. The result is always
/// `ncols × ncols`; short inputs are padded with zero rows.
pub fn qless_qr(s: &DMatrix<f64>) -> UtFactor {
    let (m, n) = s.shape();
    if n == 0 {
        return UtFactor::zeros(0);
    }
    if m == 0 {
        return UtFactor::zeros(n);
    }
    let r = s.clone().qr().r();
    let mut out = DMatrix::<f64>::zeros(n, n);
    let rows = r.nrows().min(n);
    out.view_mut((0, 0), (rows, n)).copy_from(&r.rows(0, rows));
    normalize_signs(&mut out);
    UtFactor(out)
}

/// Stacks `sqrt(w_i)·F_i` for every pair and compresses the stack by
/// [`qless_qr`], giving a factor of `Σ w_i F_iᵀF_i`.
///
/// The factors may have any number of rows but must agree on columns.
pub fn weighted_stack_qr<'a, I>(pairs: I) -> Result<UtFactor>
where
    I: IntoIterator<Item = (f64, &'a DMatrix<f64>)>,
{
    let pairs: Vec<(f64, &DMatrix<f64>)> = pairs.into_iter().collect();
    let Some(&(_, first)) = pairs.first() else {
        return Err(JmlsError::EmptyInput);
    };
    let cols = first.ncols();
    let mut rows = 0;
    for (w, f) in &pairs {
        if f.ncols() != cols {
            return Err(JmlsError::DimensionMismatch(format!(
                "stacked factor has {} columns, expected {cols}",
                f.ncols()
            )));
        }
        if !w.is_finite() || *w < 0.0 {
            return Err(JmlsError::DimensionMismatch(format!("invalid stacking weight {w}")));
        }
        rows += f.nrows();
    }
    let mut stack = DMatrix::<f64>::zeros(rows, cols);
    let mut at = 0;
    for (w, f) in &pairs {
        let r = f.nrows();
        stack.rows_mut(at, r).copy_from(&(*f * w.sqrt()));
        at += r;
    }
    Ok(qless_qr(&stack))
}

/// `ln Σ exp(v_i)` with a max shift. Entries may be `-inf`.
pub fn logsumexp(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(JmlsError::EmptyInput);
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Ok(f64::NEG_INFINITY);
    }
    if v.len() == 1 {
        return Ok(v[0]);
    }
    let sum: f64 = v.iter().map(|x| (x - max).exp()).sum();
    Ok(max + sum.ln())
}

/// Solves `M X = B` for symmetric PD `M` through its factor.
pub fn spd_solve(factor: &UtFactor, b: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let y = factor.solve_transpose_mat(b)?;
    factor.solve_mat(&y)
}

pub(crate) const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;
    use proptest::prelude::*;

    fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        let scale = max_abs(b).max(1.0);
        max_abs(&(a - b)) / scale
    }

    #[test]
    fn chol_hand_example() {
        let f = chol_upper(&dmatrix![4.0, 2.0; 2.0, 5.0]).unwrap();
        assert!(rel_err(f.matrix(), &dmatrix![2.0, 1.0; 0.0, 2.0]) < 1e-15);
    }

    #[test]
    fn chol_identity_and_zero() {
        let f = chol_upper(&DMatrix::identity(3, 3)).unwrap();
        assert_eq!(f.matrix(), &DMatrix::<f64>::identity(3, 3));
        let z = chol_upper(&DMatrix::zeros(2, 2)).unwrap();
        assert!(max_abs(z.matrix()) < 1e-10);
    }

    #[test]
    fn chol_semidefinite() {
        let v = dmatrix![1.0; 2.0; 3.0];
        let m = &v * v.transpose();
        let f = chol_upper(&m).unwrap();
        assert!(rel_err(&f.gram(), &m) < 1e-10);
    }

    #[test]
    fn chol_rejects_indefinite() {
        let err = chol_upper(&dmatrix![1.0, 0.0; 0.0, -1.0]).unwrap_err();
        assert!(matches!(err, JmlsError::NotPsd { .. }));
    }

    #[test]
    fn qr_examples() {
        let r = qless_qr(&dmatrix![3.0; 4.0]);
        assert!((r.matrix()[(0, 0)] - 5.0).abs() < 1e-14);
        let ut = dmatrix![2.0, 1.0; 0.0, 3.0];
        assert!(rel_err(qless_qr(&ut).matrix(), &ut) < 1e-14);
        let tall = dmatrix![1.0, 0.0; 0.0, 1.0; 0.0, 0.0];
        assert!(rel_err(qless_qr(&tall).matrix(), &DMatrix::identity(2, 2)) < 1e-14);
    }

    #[test]
    fn qr_short_input_is_padded() {
        let r = qless_qr(&dmatrix![1.0, 2.0, 2.0]);
        assert_eq!(r.dim(), 3);
        assert!(rel_err(&r.gram(), &(dmatrix![1.0, 2.0, 2.0].tr_mul(&dmatrix![1.0, 2.0, 2.0]))) < 1e-14);
    }

    #[test]
    fn weighted_stack_examples() {
        let i2 = DMatrix::<f64>::identity(2, 2);
        let r = weighted_stack_qr([(1.0, &i2)]).unwrap();
        assert!(rel_err(r.matrix(), &i2) < 1e-15);
        let one = dmatrix![1.0];
        let r = weighted_stack_qr([(4.0, &one), (9.0, &one)]).unwrap();
        assert!((r.matrix()[(0, 0)] - 13f64.sqrt()).abs() < 1e-14);
        let bad = dmatrix![1.0, 2.0];
        assert!(matches!(
            weighted_stack_qr([(1.0, &one), (1.0, &bad)]),
            Err(JmlsError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn weighted_stack_grouping() {
        let fs: Vec<DMatrix<f64>> = (0..6)
            .map(|i| DMatrix::from_fn(3, 3, |r, c| ((i * 7 + r * 3 + c) as f64 * 0.37).sin()))
            .collect();
        let ws = [0.5, 1.0, 2.0, 0.1, 3.0, 0.7];
        let all = weighted_stack_qr(ws.iter().copied().zip(fs.iter())).unwrap();
        let a = weighted_stack_qr(ws[..3].iter().copied().zip(fs[..3].iter())).unwrap();
        let b = weighted_stack_qr(ws[3..].iter().copied().zip(fs[3..].iter())).unwrap();
        let ab = weighted_stack_qr([(1.0, a.matrix()), (1.0, b.matrix())]).unwrap();
        assert!(rel_err(ab.matrix(), all.matrix()) < 1e-10);
    }

    #[test]
    fn logsumexp_examples() {
        assert!((logsumexp(&[0.0, 0.0]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert_eq!(logsumexp(&[f64::NEG_INFINITY, 0.0]).unwrap(), 0.0);
        assert!((logsumexp(&[1000.0, 1000.0]).unwrap() - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert!(matches!(logsumexp(&[]), Err(JmlsError::EmptyInput)));
    }

    fn matrix_strategy(rows: usize, cols: usize) -> impl Strategy<Value = DMatrix<f64>> {
        proptest::collection::vec(-2.0..2.0f64, rows * cols)
            .prop_map(move |v| DMatrix::from_vec(rows, cols, v))
    }

    proptest! {
        #[test]
        fn chol_reconstructs_random_psd(n in 1usize..=8, seed in matrix_strategy(8, 8)) {
            let g = seed.view((0, 0), (n, n)).into_owned();
            let m = g.tr_mul(&g) + DMatrix::identity(n, n) * 1e-3;
            let f = chol_upper(&m).unwrap();
            prop_assert!(rel_err(&f.gram(), &m) < 1e-10);
            for i in 0..n {
                prop_assert!(f.matrix()[(i, i)] >= 0.0);
            }
        }

        #[test]
        fn qr_preserves_gram(rows in 1usize..=64, cols in 1usize..=16, data in matrix_strategy(64, 16)) {
            let s = data.view((0, 0), (rows, cols)).into_owned();
            let r = qless_qr(&s);
            prop_assert!(rel_err(&r.gram(), &s.tr_mul(&s)) < 1e-12);
        }

        #[test]
        fn weighted_stack_permutation_invariant(
            data in matrix_strategy(12, 3),
            ws in proptest::collection::vec(0.0..5.0f64, 4),
        ) {
            let fs: Vec<DMatrix<f64>> = (0..4).map(|i| data.rows(3 * i, 3).into_owned()).collect();
            let fwd = weighted_stack_qr(ws.iter().copied().zip(fs.iter())).unwrap();
            let rev = weighted_stack_qr(ws.iter().copied().zip(fs.iter()).rev()).unwrap();
            prop_assert!(rel_err(&fwd.gram(), &rev.gram()) < 1e-10);
        }

        #[test]
        fn logsumexp_shift(v in proptest::collection::vec(-50.0..50.0f64, 1..10), c in -100.0..100.0f64) {
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let a = logsumexp(&shifted).unwrap();
            let b = logsumexp(&v).unwrap() + c;
            prop_assert!((a - b).abs() < 1e-10);
        }
    }
}
