//! Dense small-matrix numerics for controller design.
//!
//! Everything here works on `nalgebra::DMatrix<f64>` at the fixed small
//! dimensions used by the pointing models (n ≤ 10). Linear matrix equations
//! are solved through their Kronecker form, which is exact enough and cheap at
//! these sizes.

use nalgebra::{Complex, DMatrix, DVector};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

const CARE_MAX_ITER: usize = 100;
const CARE_TOL: f64 = 1e-14;
const CARE_ACCEPT: f64 = 1e-8;

/// Continuous-time LTI system `ẋ = A x + B u`, `y = C x`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSpaceModel {
    a: Matrix,
    b: Matrix,
    c: Matrix,
}

impl StateSpaceModel {
    pub fn new(a: Matrix, b: Matrix, c: Matrix) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::dim(
                "state-space",
                format!("A is {}x{}", n, a.ncols()),
            ));
        }
        if b.nrows() != n {
            return Err(Error::dim(
                "state-space",
                format!("B has {} rows, expected {n}", b.nrows()),
            ));
        }
        if c.ncols() != n {
            return Err(Error::dim(
                "state-space",
                format!("C has {} columns, expected {n}", c.ncols()),
            ));
        }
        if !all_finite(&a) || !all_finite(&b) || !all_finite(&c) {
            return Err(Error::NonFinite("state-space matrices"));
        }
        Ok(Self { a, b, c })
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn c(&self) -> &Matrix {
        &self.c
    }

    pub fn n_states(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_inputs(&self) -> usize {
        self.b.ncols()
    }

    pub fn n_outputs(&self) -> usize {
        self.c.nrows()
    }

    /// `C (jω I − A)⁻¹ B`, one complex matrix per frequency.
    pub fn frequency_response(&self, omega: f64) -> Result<DMatrix<Complex<f64>>> {
        let n = self.n_states();
        let s = Complex::new(0.0, omega);
        let mut m: DMatrix<Complex<f64>> = self.a.map(|v| Complex::new(-v, 0.0));
        for i in 0..n {
            m[(i, i)] += s;
        }
        let bc = self.b.map(|v| Complex::new(v, 0.0));
        let x = m
            .lu()
            .solve(&bc)
            .ok_or_else(|| Error::Design(format!("jω I − A singular at ω = {omega}")))?;
        Ok(self.c.map(|v| Complex::new(v, 0.0)) * x)
    }
}

/// Riccati solution together with the optimal state-feedback gain.
#[derive(Debug, Clone, PartialEq)]
pub struct LqrDesign {
    pub p: Matrix,
    pub k: Matrix,
}

pub(crate) fn all_finite(m: &Matrix) -> bool {
    m.iter().all(|v| v.is_finite())
}

fn require_square(op: &'static str, m: &Matrix) -> Result<usize> {
    if m.nrows() != m.ncols() {
        return Err(Error::dim(
            op,
            format!("expected square, got {}x{}", m.nrows(), m.ncols()),
        ));
    }
    Ok(m.nrows())
}

fn norm_inf(m: &Matrix) -> f64 {
    m.row_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

fn norm_one(m: &Matrix) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Matrix exponential `e^{A t}` by scaling and squaring with a (6,6) Padé
/// approximant.
pub fn expm(a: &Matrix, t: f64) -> Result<Matrix> {
    let n = require_square("expm", a)?;
    if !t.is_finite() {
        return Err(Error::NonFinite("expm time argument"));
    }
    if !all_finite(a) {
        return Err(Error::NonFinite("expm matrix"));
    }
    let x = a * t;
    let norm = norm_inf(&x);
    let squarings = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as i32
    } else {
        0
    };
    let x = x / 2f64.powi(squarings);

    const C: [f64; 7] = [
        1.0,
        0.5,
        5.0 / 44.0,
        1.0 / 66.0,
        1.0 / 792.0,
        1.0 / 15840.0,
        1.0 / 665280.0,
    ];
    let id = Matrix::identity(n, n);
    let mut num = id.clone() * C[0];
    let mut den = id.clone() * C[0];
    let mut power = id;
    for (k, &c) in C.iter().enumerate().skip(1) {
        power = &power * &x;
        num += &power * c;
        if k % 2 == 0 {
            den += &power * c;
        } else {
            den -= &power * c;
        }
    }
    let mut e = den
        .lu()
        .solve(&num)
        .ok_or_else(|| Error::Design("Padé denominator singular in expm".into()))?;
    for _ in 0..squarings {
        e = &e * &e;
    }
    Ok(e)
}

/// Solves the Sylvester equation `A X + X B = C` through its Kronecker form.
pub fn solve_sylvester(a: &Matrix, b: &Matrix, c: &Matrix) -> Result<Matrix> {
    let n = require_square("sylvester", a)?;
    let m = require_square("sylvester", b)?;
    if c.nrows() != n || c.ncols() != m {
        return Err(Error::dim("sylvester", format!("C must be {n}x{m}")));
    }
    // Column-major vec: vec(AX) = (I_m ⊗ A) vec X, vec(XB) = (Bᵀ ⊗ I_n) vec X.
    let dim = n * m;
    let mut kron = Matrix::zeros(dim, dim);
    for j in 0..m {
        for r in 0..n {
            for s in 0..n {
                kron[(j * n + r, j * n + s)] += a[(r, s)];
            }
        }
    }
    for j in 0..m {
        for l in 0..m {
            let blj = b[(l, j)];
            if blj == 0.0 {
                continue;
            }
            for r in 0..n {
                kron[(j * n + r, l * n + r)] += blj;
            }
        }
    }
    let rhs = Vector::from_column_slice(c.as_slice());
    let sol = kron
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Design("Sylvester operator is singular".into()))?;
    Ok(Matrix::from_column_slice(n, m, sol.as_slice()))
}

/// Solves `Aᵀ P + P A + M = 0` and returns the symmetrized `P`.
pub fn solve_lyapunov(a: &Matrix, m: &Matrix) -> Result<Matrix> {
    let at = a.transpose();
    let p = solve_sylvester(&at, a, &(-m))?;
    Ok(symmetrize(&p))
}

fn symmetrize(m: &Matrix) -> Matrix {
    (m + m.transpose()) * 0.5
}

pub fn eigenvalues(a: &Matrix) -> Result<Vec<Complex<f64>>> {
    require_square("eigenvalues", a)?;
    Ok(a.clone().complex_eigenvalues().iter().copied().collect())
}

/// Largest real part over the spectrum of `a`.
pub fn spectral_abscissa(a: &Matrix) -> Result<f64> {
    Ok(eigenvalues(a)?
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max))
}

pub fn is_hurwitz(a: &Matrix) -> bool {
    spectral_abscissa(a).map(|s| s < 0.0).unwrap_or(false)
}

pub fn numerical_rank(m: &Matrix, rel_tol: f64) -> usize {
    let sv = m.clone().svd(false, false).singular_values;
    let smax = sv.iter().copied().fold(0.0, f64::max);
    if smax == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * smax).count()
}

/// `[B, AB, …, A^{n−1}B]`.
pub fn controllability_matrix(a: &Matrix, b: &Matrix) -> Matrix {
    let n = a.nrows();
    let m = b.ncols();
    let mut out = Matrix::zeros(n, n * m);
    let mut blk = b.clone();
    for k in 0..n {
        out.view_mut((0, k * m), (n, m)).copy_from(&blk);
        blk = a * &blk;
    }
    out
}

pub fn is_controllable(a: &Matrix, b: &Matrix) -> bool {
    numerical_rank(&controllability_matrix(a, b), 1e-10) == a.nrows()
}

fn check_symmetric(op: &'static str, m: &Matrix) -> Result<()> {
    let scale = m.norm().max(1.0);
    if (m - m.transpose()).norm() > 1e-10 * scale {
        return Err(Error::InvalidParameter(format!(
            "{op}: matrix is not symmetric"
        )));
    }
    Ok(())
}

/// Frobenius norm of `AᵀP + PA − P B R⁻¹ Bᵀ P + Q`.
pub fn care_residual(a: &Matrix, b: &Matrix, q: &Matrix, r: &Matrix, p: &Matrix) -> Result<f64> {
    let r_inv = r
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::InvalidParameter("R is singular".into()))?;
    let s = b * r_inv * b.transpose();
    Ok((a.transpose() * p + p * a - p * s * p + q).norm())
}

/// Stabilizing solution of the continuous algebraic Riccati equation
/// `AᵀP + PA − P B R⁻¹ Bᵀ P + Q = 0`.
///
/// Newton–Kleinman iteration started from the Bass stabilizing gain: with
/// `β > ρ(A)`, the solution `X` of `(A+βI)X + X(A+βI)ᵀ = 2BR⁻¹Bᵀ` yields
/// `K₀ = R⁻¹BᵀX⁻¹`, for which every eigenvalue of `A − BK₀` has real part `−β`.
/// Stabilizing gain from the Bass construction. Any shift β with −(A + βI)
/// Hurwitz works in exact arithmetic; large shifts make the Gramian badly
/// conditioned, so shifts are tried from small to large until the computed
/// gain stabilizes.
fn bass_gain(a: &Matrix, s: &Matrix, bt_rinv: &Matrix) -> Result<Matrix> {
    let n = a.nrows();
    let min_re = eigenvalues(a)?
        .iter()
        .map(|z| z.re)
        .fold(f64::INFINITY, f64::min);
    let base = (-min_re).max(0.0);
    let span = norm_one(a) + 1.0;
    for frac in [0.05, 0.1, 0.2, 0.5, 1.0, 2.0] {
        let beta = base + frac * span;
        let shifted = a + Matrix::identity(n, n) * beta;
        let Ok(x) = solve_sylvester(&shifted, &shifted.transpose(), &(s * 2.0)) else {
            continue;
        };
        let Some(x_inv) = symmetrize(&x).try_inverse() else {
            continue;
        };
        // S X⁻¹ = B K₀.
        if all_finite(&x_inv) && is_hurwitz(&(a - s * &x_inv)) {
            return Ok(bt_rinv * x_inv);
        }
    }
    Err(Error::Design(
        "solve_care: no stabilizing initial gain found".into(),
    ))
}

pub fn solve_care(a: &Matrix, b: &Matrix, q: &Matrix, r: &Matrix) -> Result<Matrix> {
    let n = require_square("solve_care", a)?;
    if b.nrows() != n {
        return Err(Error::dim("solve_care", format!("B must have {n} rows")));
    }
    let m = b.ncols();
    if q.shape() != (n, n) {
        return Err(Error::dim("solve_care", format!("Q must be {n}x{n}")));
    }
    if r.shape() != (m, m) {
        return Err(Error::dim("solve_care", format!("R must be {m}x{m}")));
    }
    for (name, mat) in [("A", a), ("B", b), ("Q", q), ("R", r)] {
        if !all_finite(mat) {
            return Err(Error::Design(format!(
                "solve_care: {name} has non-finite entries"
            )));
        }
    }
    check_symmetric("solve_care Q", q)?;
    check_symmetric("solve_care R", r)?;
    let q_min = q.clone().symmetric_eigen().eigenvalues.min();
    if q_min < -1e-12 * q.norm().max(1.0) {
        return Err(Error::InvalidParameter(format!(
            "solve_care: Q is not positive semi-definite (min eigenvalue {q_min:e})"
        )));
    }
    let r_chol = r
        .clone()
        .cholesky()
        .ok_or_else(|| Error::InvalidParameter("solve_care: R is not positive definite".into()))?;
    if !is_controllable(a, b) {
        return Err(Error::Design(
            "solve_care: (A, B) is not controllable (controllability matrix rank deficient)".into(),
        ));
    }

    let r_inv = r_chol.inverse();
    let s = b * &r_inv * b.transpose();
    let bt_rinv = &r_inv * b.transpose();

    let k0 = bass_gain(a, &s, &bt_rinv)?;

    // Kleinman step from K₀, then Newton steps written as corrections
    // (A − SP)ᵀΔ + Δ(A − SP) = −Res(P), which keeps the right-hand side small
    // near convergence and so limits rounding in the Lyapunov solves.
    let residual = |p: &Matrix| a.transpose() * p + p * a - p * &s * p + q;
    let mut p = solve_lyapunov(&(a - b * &k0), &(q + k0.transpose() * r * &k0))?;
    let q_scale = q.norm().max(f64::MIN_POSITIVE);
    let mut best: Option<(f64, Matrix)> = None;
    let mut stalled = 0;
    let mut last_step = f64::INFINITY;
    for _ in 0..CARE_MAX_ITER {
        if !all_finite(&p) {
            return Err(Error::Design("solve_care: Newton iterate diverged".into()));
        }
        let res_m = residual(&p);
        let res = res_m.norm();
        if best.as_ref().is_none_or(|(r0, _)| res < *r0) {
            best = Some((res, p.clone()));
            stalled = 0;
        } else if last_step < 1e-8 {
            // Only count stalls once the iterates have settled to rounding level.
            stalled += 1;
        }
        if res <= CARE_TOL * q_scale || stalled >= 3 {
            break;
        }
        let closed = a - &s * &p;
        let delta = solve_lyapunov(&closed, &res_m)?;
        last_step = delta.norm() / p.norm().max(f64::MIN_POSITIVE);
        p += delta;
    }
    let (res, p) = best.expect("at least one Newton step runs");
    // Rounding floor of the residual evaluation itself, relevant when ‖P‖ ≫ ‖Q‖.
    let floor =
        1e6 * f64::EPSILON * ((a.transpose() * &p).norm() * 2.0 + (&p * &s * &p).norm() + q.norm());
    if res > (CARE_ACCEPT * q_scale).max(floor) {
        return Err(Error::Design(format!(
            "solve_care: Newton–Kleinman did not converge (residual {res:e}, ‖Q‖ = {q_scale:e}, floor {floor:e})"
        )));
    }
    let closed = a - &s * &p;
    if !is_hurwitz(&closed) {
        return Err(Error::Design(
            "solve_care: converged solution is not stabilizing".into(),
        ));
    }
    Ok(p)
}

/// LQR state feedback `u = −K x` minimising `∫ xᵀQx + uᵀRu dt`.
pub fn lqr_gain(sys: &StateSpaceModel, qc: &Matrix, rc: &Matrix) -> Result<LqrDesign> {
    let p = solve_care(sys.a(), sys.b(), qc, rc)?;
    let r_inv = rc
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::InvalidParameter("R is singular".into()))?;
    let k = r_inv * sys.b().transpose() * &p;
    Ok(LqrDesign { p, k })
}

/// Observer gain from the dual LQR problem with state weight `qo·I` and
/// measurement weight `ro`. Returns `L` (n × n_y) such that `A − L Ĉ` is Hurwitz.
pub fn observer_gain(
    sys: &StateSpaceModel,
    c_hat: &Matrix,
    qo: f64,
    ro: &Matrix,
) -> Result<Matrix> {
    let n = sys.n_states();
    if c_hat.ncols() != n {
        return Err(Error::dim(
            "observer_gain",
            format!("Ĉ must have {n} columns"),
        ));
    }
    if !(qo > 0.0 && qo.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "observer weight must be positive, got {qo}"
        )));
    }
    if !is_controllable(&sys.a().transpose(), &c_hat.transpose()) {
        return Err(Error::Design(
            "observer_gain: (A, Ĉ) is not observable".into(),
        ));
    }
    let dual = StateSpaceModel::new(
        sys.a().transpose(),
        c_hat.transpose(),
        Matrix::identity(n, n),
    )?;
    let design = lqr_gain(&dual, &(Matrix::identity(n, n) * qo), ro)?;
    Ok(design.k.transpose())
}

/// Cascade where the output of `first` drives the input of `second`.
///
/// The state vector is ordered `[second states, first states]`.
pub fn series_connect(
    first: &StateSpaceModel,
    second: &StateSpaceModel,
) -> Result<StateSpaceModel> {
    if first.n_outputs() != second.n_inputs() {
        return Err(Error::dim(
            "series_connect",
            format!(
                "first has {} outputs but second has {} inputs",
                first.n_outputs(),
                second.n_inputs()
            ),
        ));
    }
    let n1 = first.n_states();
    let n2 = second.n_states();
    let n = n1 + n2;
    let mut a = Matrix::zeros(n, n);
    a.view_mut((0, 0), (n2, n2)).copy_from(second.a());
    a.view_mut((0, n2), (n2, n1))
        .copy_from(&(second.b() * first.c()));
    a.view_mut((n2, n2), (n1, n1)).copy_from(first.a());
    let mut b = Matrix::zeros(n, first.n_inputs());
    b.view_mut((n2, 0), (n1, first.n_inputs()))
        .copy_from(first.b());
    let mut c = Matrix::zeros(second.n_outputs(), n);
    c.view_mut((0, 0), (second.n_outputs(), n2))
        .copy_from(second.c());
    StateSpaceModel::new(a, b, c)
}

/// Solves `[[A, B], [C, 0]] [x_ss; u_ss] = [0; 1]`.
pub fn steady_state(sys: &StateSpaceModel) -> Result<(Vector, Vector)> {
    let n = sys.n_states();
    let nu = sys.n_inputs();
    let ny = sys.n_outputs();
    if nu != ny {
        return Err(Error::dim(
            "steady_state",
            format!("needs as many inputs as outputs ({nu} vs {ny})"),
        ));
    }
    let mut blk = Matrix::zeros(n + ny, n + nu);
    blk.view_mut((0, 0), (n, n)).copy_from(sys.a());
    blk.view_mut((0, n), (n, nu)).copy_from(sys.b());
    blk.view_mut((n, 0), (ny, n)).copy_from(sys.c());
    if numerical_rank(&blk, 1e-12) < n + nu {
        return Err(Error::Design(
            "steady_state: [[A, B], [C, 0]] is singular (transmission zero at s = 0)".into(),
        ));
    }
    let mut rhs = Vector::zeros(n + ny);
    rhs.rows_mut(n, ny).fill(1.0);
    let sol = blk
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Design("steady_state: singular block matrix".into()))?;
    Ok((sol.rows(0, n).into_owned(), sol.rows(n, nu).into_owned()))
}

/// Exact zero-order-hold discretization `(A_d, B_d)` through the exponential
/// of `[[A, B], [0, 0]]`.
pub fn discretize(sys: &StateSpaceModel, dt: f64) -> Result<(Matrix, Matrix)> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "time step must be positive, got {dt}"
        )));
    }
    let n = sys.n_states();
    let m = sys.n_inputs();
    let mut aug = Matrix::zeros(n + m, n + m);
    aug.view_mut((0, 0), (n, n)).copy_from(sys.a());
    aug.view_mut((0, n), (n, m)).copy_from(sys.b());
    let e = expm(&aug, dt)?;
    Ok((
        e.view((0, 0), (n, n)).into_owned(),
        e.view((0, n), (n, m)).into_owned(),
    ))
}

/// `∫₀^dt e^{A s} ds`, the ZOH input integral for an identity input matrix.
pub fn zoh_integral(a: &Matrix, dt: f64) -> Result<Matrix> {
    let n = require_square("zoh_integral", a)?;
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "time step must be positive, got {dt}"
        )));
    }
    let mut aug = Matrix::zeros(2 * n, 2 * n);
    aug.view_mut((0, 0), (n, n)).copy_from(a);
    aug.view_mut((0, n), (n, n))
        .copy_from(&Matrix::identity(n, n));
    let e = expm(&aug, dt)?;
    Ok(e.view((0, n), (n, n)).into_owned())
}
