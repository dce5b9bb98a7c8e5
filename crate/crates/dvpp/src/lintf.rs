//! Rational transfer-function algebra, state-space realization, frequency
//! response, stability and H-infinity norm computation.
//!
//! Coefficient sequences are stored in descending powers of `s`. Denominators
//! are kept monic. No pole/zero cancellation happens implicitly; an explicit
//! [`RationalTF::minreal`] pass exists and is idempotent.

use nalgebra::{Complex, DMatrix, DVector};
use num_complex::Complex64;

use crate::{Error, Result};

/// Stability margin: eigenvalues with real part >= -EPS_HURWITZ count as unstable.
pub const EPS_HURWITZ: f64 = 1e-9;

/// Root-coincidence tolerance of the minimality pass.
pub const EPS_MINREAL: f64 = 1e-9;

// ---------------------------------------------------------------------------
// polynomial helpers (descending powers)
// ---------------------------------------------------------------------------

/// Strip leading (highest-power) zero coefficients; the zero polynomial is `[0.0]`.
pub fn poly_trim(p: &[f64]) -> Vec<f64> {
    let first = p.iter().position(|c| *c != 0.0);
    match first {
        Some(i) => p[i..].to_vec(),
        None => vec![0.0],
    }
}

pub fn poly_is_zero(p: &[f64]) -> bool {
    p.iter().all(|c| *c == 0.0)
}

pub fn poly_add(a: &[f64], b: &[f64]) -> Vec<f64> {
    let n = a.len().max(b.len());
    let mut out = vec![0.0; n];
    for (i, c) in a.iter().rev().enumerate() {
        out[n - 1 - i] += c;
    }
    for (i, c) in b.iter().rev().enumerate() {
        out[n - 1 - i] += c;
    }
    poly_trim(&out)
}

pub fn poly_scale(a: &[f64], k: f64) -> Vec<f64> {
    poly_trim(&a.iter().map(|c| c * k).collect::<Vec<_>>())
}

pub fn poly_sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    poly_add(a, &poly_scale(b, -1.0))
}

pub fn poly_mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    if poly_is_zero(a) || poly_is_zero(b) {
        return vec![0.0];
    }
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    poly_trim(&out)
}

/// Horner evaluation at a complex point.
pub fn poly_eval(p: &[f64], s: Complex64) -> Complex64 {
    let mut acc = Complex64::new(0.0, 0.0);
    for c in p {
        acc = acc * s + c;
    }
    acc
}

/// Polynomial roots via the companion matrix. Returns an empty vector for
/// constants and the zero polynomial.
pub fn poly_roots(p: &[f64]) -> Vec<Complex64> {
    let p = poly_trim(p);
    let n = p.len() - 1;
    if n == 0 {
        return vec![];
    }
    let lead = p[0];
    let mut comp = DMatrix::<f64>::zeros(n, n);
    for i in 1..n {
        comp[(i, i - 1)] = 1.0;
    }
    for j in 0..n {
        comp[(0, j)] = -p[j + 1] / lead;
    }
    comp.complex_eigenvalues().iter().copied().collect()
}

/// Rebuild a real polynomial `lead * prod (s - r_i)` from a root list that is
/// closed under conjugation (up to rounding).
fn poly_from_roots(roots: &[Complex64], lead: f64) -> Vec<f64> {
    let mut acc = vec![Complex64::new(lead, 0.0)];
    for r in roots {
        let mut next = vec![Complex64::new(0.0, 0.0); acc.len() + 1];
        for (i, c) in acc.iter().enumerate() {
            next[i] += c;
            next[i + 1] -= c * r;
        }
        acc = next;
    }
    poly_trim(&acc.iter().map(|c| c.re).collect::<Vec<_>>())
}

// ---------------------------------------------------------------------------
// RationalTF
// ---------------------------------------------------------------------------

/// Scalar rational transfer function with real coefficients in descending
/// powers of `s`. The denominator is normalized monic.
#[derive(Debug, Clone, PartialEq)]
pub struct RationalTF {
    num: Vec<f64>,
    den: Vec<f64>,
}

impl RationalTF {
    /// New transfer function; panics if the denominator is identically zero.
    pub fn new(num: &[f64], den: &[f64]) -> Self {
        let den = poly_trim(den);
        assert!(!poly_is_zero(&den), "zero denominator");
        let lead = den[0];
        RationalTF {
            num: poly_scale(&poly_trim(num), 1.0 / lead),
            den: poly_scale(&den, 1.0 / lead),
        }
    }

    /// Static gain `k`.
    pub fn constant(k: f64) -> Self {
        RationalTF::new(&[k], &[1.0])
    }

    /// First-order lag `k / (tau s + 1)`.
    pub fn first_order(k: f64, tau: f64) -> Self {
        RationalTF::new(&[k], &[tau, 1.0])
    }

    pub fn num(&self) -> &[f64] {
        &self.num
    }

    pub fn den(&self) -> &[f64] {
        &self.den
    }

    pub fn is_zero(&self) -> bool {
        poly_is_zero(&self.num)
    }

    /// Degree of numerator and denominator.
    pub fn degrees(&self) -> (usize, usize) {
        (self.num.len() - 1, self.den.len() - 1)
    }

    pub fn is_proper(&self) -> bool {
        self.is_zero() || self.num.len() <= self.den.len()
    }

    pub fn is_strictly_proper(&self) -> bool {
        self.is_zero() || self.num.len() < self.den.len()
    }

    pub fn add(&self, other: &RationalTF) -> RationalTF {
        let num = poly_add(
            &poly_mul(&self.num, &other.den),
            &poly_mul(&other.num, &self.den),
        );
        RationalTF::new(&num, &poly_mul(&self.den, &other.den))
    }

    pub fn sub(&self, other: &RationalTF) -> RationalTF {
        self.add(&other.scale(-1.0))
    }

    pub fn mul(&self, other: &RationalTF) -> RationalTF {
        RationalTF::new(
            &poly_mul(&self.num, &other.num),
            &poly_mul(&self.den, &other.den),
        )
    }

    pub fn scale(&self, k: f64) -> RationalTF {
        RationalTF::new(&poly_scale(&self.num, k), &self.den)
    }

    /// Algebraic inverse. Errors on the zero transfer function.
    pub fn inv(&self) -> Result<RationalTF> {
        if self.is_zero() {
            return Err(Error::SingularTransferFunction);
        }
        Ok(RationalTF::new(&self.den, &self.num))
    }

    /// Evaluate at a complex point `s`.
    pub fn eval(&self, s: Complex64) -> Complex64 {
        poly_eval(&self.num, s) / poly_eval(&self.den, s)
    }

    /// DC gain `num(0)/den(0)`.
    pub fn dc_gain(&self) -> f64 {
        self.num.last().unwrap() / self.den.last().unwrap()
    }

    pub fn poles(&self) -> Vec<Complex64> {
        poly_roots(&self.den)
    }

    pub fn zeros(&self) -> Vec<Complex64> {
        if self.is_zero() {
            vec![]
        } else {
            poly_roots(&self.num)
        }
    }

    /// Explicit minimality pass: cancel numerator/denominator root pairs that
    /// coincide within `EPS_MINREAL` (scaled by root magnitude). Idempotent.
    pub fn minreal(&self) -> RationalTF {
        if self.is_zero() {
            return RationalTF::new(&[0.0], &[1.0]);
        }
        let mut zeros = self.zeros();
        let mut poles = self.poles();
        let num_lead = self.num[0];
        let mut cancelled = true;
        while cancelled {
            cancelled = false;
            'outer: for zi in 0..zeros.len() {
                for pi in 0..poles.len() {
                    let scale = 1.0 + zeros[zi].norm().max(poles[pi].norm());
                    if (zeros[zi] - poles[pi]).norm() <= EPS_MINREAL * scale {
                        zeros.remove(zi);
                        poles.remove(pi);
                        cancelled = true;
                        break 'outer;
                    }
                }
            }
        }
        RationalTF::new(&poly_from_roots(&zeros, num_lead), &poly_from_roots(&poles, 1.0))
    }

    /// Frequency response on a grid by direct rational evaluation.
    pub fn freq_response(&self, grid: &FreqGrid) -> Vec<Complex64> {
        grid.omegas
            .iter()
            .map(|w| self.eval(Complex64::new(0.0, *w)))
            .collect()
    }

    /// Controllable-canonical state-space realization. Errors on improper input.
    pub fn to_ss(&self) -> Result<StateSpace> {
        if !self.is_proper() {
            return Err(Error::ImproperTransferFunction);
        }
        let n = self.den.len() - 1;
        if self.is_zero() || n == 0 {
            let d = if self.is_zero() { 0.0 } else { self.num[0] / self.den[0] };
            return Ok(StateSpace::new(
                DMatrix::zeros(0, 0),
                DMatrix::zeros(0, 1),
                DMatrix::zeros(1, 0),
                DMatrix::from_element(1, 1, d),
            ));
        }
        // den is monic: s^n + a1 s^(n-1) + ... + an
        let a_coeffs = &self.den[1..];
        // split off the direct feedthrough so the remainder is strictly proper
        let d = if self.num.len() == self.den.len() {
            self.num[0]
        } else {
            0.0
        };
        let rem = poly_sub(&self.num, &poly_scale(&self.den, d));
        // rem has degree <= n-1; pad to length n
        let mut b_coeffs = vec![0.0; n];
        for (i, c) in rem.iter().rev().enumerate() {
            if i < n {
                b_coeffs[n - 1 - i] = *c; // b_coeffs in descending powers s^(n-1)..s^0
            }
        }
        let mut a = DMatrix::<f64>::zeros(n, n);
        for i in 0..n - 1 {
            a[(i, i + 1)] = 1.0;
        }
        for j in 0..n {
            a[(n - 1, j)] = -a_coeffs[n - 1 - j];
        }
        let mut b = DMatrix::<f64>::zeros(n, 1);
        b[(n - 1, 0)] = 1.0;
        let mut c = DMatrix::<f64>::zeros(1, n);
        for j in 0..n {
            c[(0, j)] = b_coeffs[n - 1 - j];
        }
        Ok(StateSpace::new(a, b, c, DMatrix::from_element(1, 1, d)))
    }
}

// ---------------------------------------------------------------------------
// FreqGrid
// ---------------------------------------------------------------------------

/// Strictly increasing grid of angular frequencies (rad/s).
#[derive(Debug, Clone)]
pub struct FreqGrid {
    pub omegas: Vec<f64>,
}

impl FreqGrid {
    /// Log-spaced grid between `lo` and `hi` rad/s.
    pub fn log_spaced(lo: f64, hi: f64, n: usize) -> Self {
        assert!(lo > 0.0 && hi > lo && n >= 2);
        let (llo, lhi) = (lo.ln(), hi.ln());
        let omegas = (0..n)
            .map(|i| (llo + (lhi - llo) * i as f64 / (n - 1) as f64).exp())
            .collect();
        FreqGrid { omegas }
    }
}

impl Default for FreqGrid {
    /// 400 log-spaced points covering 1e-3..1e3 rad/s.
    fn default() -> Self {
        FreqGrid::log_spaced(1e-3, 1e3, 400)
    }
}

/// One frequency-response sample; `pole_on_grid` flags a singular resolvent.
#[derive(Debug, Clone, Copy)]
pub struct FreqPoint {
    pub omega: f64,
    pub value: Complex64,
    pub pole_on_grid: bool,
}

// ---------------------------------------------------------------------------
// StateSpace
// ---------------------------------------------------------------------------

/// Real state-space system (A, B, C, D).
#[derive(Debug, Clone, PartialEq)]
pub struct StateSpace {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
}

impl StateSpace {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>, d: DMatrix<f64>) -> Self {
        assert_eq!(a.nrows(), a.ncols(), "A must be square");
        assert_eq!(b.nrows(), a.nrows(), "B row count");
        assert_eq!(c.ncols(), a.ncols(), "C column count");
        assert_eq!(d.nrows(), c.nrows(), "D row count");
        assert_eq!(d.ncols(), b.ncols(), "D column count");
        assert!(d.iter().all(|x| x.is_finite()), "D must be finite");
        StateSpace { a, b, c, d }
    }

    pub fn order(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_inputs(&self) -> usize {
        self.b.ncols()
    }

    pub fn n_outputs(&self) -> usize {
        self.c.nrows()
    }

    /// Diagonal state rescaling with powers of two that balances the row
    /// and column magnitudes of `[A B; C 0]`. Improves the conditioning of
    /// stiff realizations without changing input-output behavior (exactly,
    /// since the scalings are powers of two).
    pub fn balance_states(&self) -> StateSpace {
        let n = self.order();
        let mut d = vec![1.0f64; n];
        for _ in 0..30 {
            let mut changed = false;
            for i in 0..n {
                let mut col = 0.0; // column i of the scaled [A; C]
                for k in 0..n {
                    if k != i {
                        col += (self.a[(k, i)] * d[i] / d[k]).abs();
                    }
                }
                for k in 0..self.n_outputs() {
                    col += (self.c[(k, i)] * d[i]).abs();
                }
                let mut row = 0.0; // row i of the scaled [A B]
                for k in 0..n {
                    if k != i {
                        row += (self.a[(i, k)] * d[k] / d[i]).abs();
                    }
                }
                for k in 0..self.n_inputs() {
                    row += (self.b[(i, k)] / d[i]).abs();
                }
                if col <= 0.0 || row <= 0.0 {
                    continue;
                }
                let f = (row / col).sqrt().log2().round();
                if f != 0.0 {
                    d[i] *= f.exp2();
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        let mut a = self.a.clone();
        let mut b = self.b.clone();
        let mut c = self.c.clone();
        for i in 0..n {
            for j in 0..n {
                a[(i, j)] *= d[j] / d[i];
            }
            for k in 0..self.n_inputs() {
                b[(i, k)] /= d[i];
            }
            for k in 0..self.n_outputs() {
                c[(k, i)] *= d[i];
            }
        }
        StateSpace::new(a, b, c, self.d.clone())
    }

    /// Transfer matrix value `C (jwI - A)^{-1} B + D`.
    pub fn response_at(&self, omega: f64) -> Option<DMatrix<Complex64>> {
        let n = self.order();
        let to_c = |m: &DMatrix<f64>| m.map(|x| Complex64::new(x, 0.0));
        if n == 0 {
            return Some(to_c(&self.d));
        }
        let mut resolvent = to_c(&self.a).map(|x| -x);
        for i in 0..n {
            resolvent[(i, i)] += Complex64::new(0.0, omega);
        }
        let lu = resolvent.lu();
        let x = lu.solve(&to_c(&self.b))?;
        Some(to_c(&self.c) * x + to_c(&self.d))
    }

    /// SISO frequency response with per-point pole-on-grid flags.
    pub fn freq_response(&self, grid: &FreqGrid) -> Vec<FreqPoint> {
        grid.omegas
            .iter()
            .map(|&omega| match self.response_at(omega) {
                Some(m) => FreqPoint {
                    omega,
                    value: m[(0, 0)],
                    pole_on_grid: false,
                },
                None => FreqPoint {
                    omega,
                    value: Complex64::new(f64::NAN, f64::NAN),
                    pole_on_grid: true,
                },
            })
            .collect()
    }

    /// Largest singular value of the transfer matrix at `omega`.
    pub fn sigma_max_at(&self, omega: f64) -> Option<f64> {
        let m = self.response_at(omega)?;
        Some(sigma_max(&m))
    }

    /// Series composition: parallel diagonal stacking of two systems.
    pub fn block_diag(sys: &[&StateSpace]) -> StateSpace {
        let n: usize = sys.iter().map(|s| s.order()).sum();
        let m: usize = sys.iter().map(|s| s.n_inputs()).sum();
        let p: usize = sys.iter().map(|s| s.n_outputs()).sum();
        let mut a = DMatrix::zeros(n, n);
        let mut b = DMatrix::zeros(n, m);
        let mut c = DMatrix::zeros(p, n);
        let mut d = DMatrix::zeros(p, m);
        let (mut i0, mut j0, mut k0) = (0, 0, 0);
        for s in sys {
            a.view_mut((i0, i0), (s.order(), s.order())).copy_from(&s.a);
            b.view_mut((i0, j0), (s.order(), s.n_inputs())).copy_from(&s.b);
            c.view_mut((k0, i0), (s.n_outputs(), s.order())).copy_from(&s.c);
            d.view_mut((k0, j0), (s.n_outputs(), s.n_inputs())).copy_from(&s.d);
            i0 += s.order();
            j0 += s.n_inputs();
            k0 += s.n_outputs();
        }
        StateSpace::new(a, b, c, d)
    }

    /// H-infinity norm by the two-step (level-set) Hamiltonian iteration,
    /// within relative tolerance `tol`. Errors if `A` is not Hurwitz.
    pub fn hinf_norm(&self, tol: f64) -> Result<f64> {
        if self.order() == 0 {
            return Ok(sigma_max(&self.d.map(|x| Complex64::new(x, 0.0))));
        }
        if !is_hurwitz(&self.a) {
            return Err(Error::UnstableSystem);
        }
        // lower bound from structured candidates: DC, feedthrough, pole
        // magnitudes, and a coarse grid
        let mut gamma = sigma_max(&self.d.map(|x| Complex64::new(x, 0.0)));
        let mut candidates: Vec<f64> = vec![0.0];
        for l in self.a.complex_eigenvalues().iter() {
            let m = l.norm();
            if m.is_finite() && m > 0.0 {
                candidates.push(m);
            }
        }
        candidates.extend(FreqGrid::log_spaced(1e-4, 1e4, 40).omegas);
        for &w in &candidates {
            if let Some(s) = self.sigma_max_at(w) {
                gamma = gamma.max(s);
            }
        }
        if gamma == 0.0 {
            return Ok(0.0);
        }
        for _ in 0..100 {
            let g_test = gamma * (1.0 + 2.0 * tol.max(1e-12));
            let eigs = match self.hamiltonian_eigs(g_test) {
                Some(e) => e,
                None => return Ok(gamma), // g_test hits a singular level of D
            };
            // frequencies where the level g_test may be crossed
            let mut ws: Vec<f64> = eigs
                .iter()
                .filter(|l| l.re.abs() <= 1e-8 * (1.0 + l.norm()) && l.im > 0.0)
                .map(|l| l.im)
                .collect();
            if ws.is_empty() {
                return Ok(gamma * (1.0 + tol));
            }
            ws.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mut probes = ws.clone();
            for pair in ws.windows(2) {
                probes.push(0.5 * (pair[0] + pair[1]));
            }
            let mut improved = false;
            for w in probes {
                if let Some(s) = self.sigma_max_at(w) {
                    if s > gamma {
                        gamma = s;
                        improved = true;
                    }
                }
            }
            if !improved {
                return Ok(gamma * (1.0 + tol));
            }
        }
        Err(Error::SolverNonConvergence(
            "H-infinity level-set iteration".into(),
        ))
    }

    /// Eigenvalues of the Hamiltonian associated with level `gamma`, or
    /// `None` when `gamma` coincides with a singular value of `D`.
    fn hamiltonian_eigs(&self, gamma: f64) -> Option<Vec<Complex64>> {
        let n = self.order();
        let m = self.n_inputs();
        let dt_d = self.d.transpose() * &self.d;
        let mut r = DMatrix::<f64>::identity(m, m) * (gamma * gamma);
        r -= &dt_d;
        let r_inv = r.clone().try_inverse()?;
        let bd = &self.b * &r_inv;
        let a_blk = &self.a + &bd * self.d.transpose() * &self.c;
        let top_right = &bd * self.b.transpose();
        let dd = &self.d * &r_inv * self.d.transpose();
        let mid = DMatrix::<f64>::identity(self.n_outputs(), self.n_outputs()) + dd;
        let bottom_left = -self.c.transpose() * mid * &self.c;
        let mut ham = DMatrix::<f64>::zeros(2 * n, 2 * n);
        ham.view_mut((0, 0), (n, n)).copy_from(&a_blk);
        ham.view_mut((0, n), (n, n)).copy_from(&top_right);
        ham.view_mut((n, 0), (n, n)).copy_from(&bottom_left);
        ham.view_mut((n, n), (n, n)).copy_from(&(-a_blk.transpose()));
        Some(ham.complex_eigenvalues().iter().copied().collect())
    }
}

/// Largest singular value of a complex matrix.
pub fn sigma_max(m: &DMatrix<Complex64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().svd(false, false).singular_values.max()
}

/// True iff every eigenvalue of the square matrix has real part < -EPS_HURWITZ.
pub fn is_hurwitz(a: &DMatrix<f64>) -> bool {
    assert_eq!(a.nrows(), a.ncols(), "is_hurwitz expects a square matrix");
    if a.is_empty() {
        return true;
    }
    a.complex_eigenvalues().iter().all(|l| l.re < -EPS_HURWITZ)
}

/// Eigenvalues of a square real matrix.
pub fn eigenvalues(a: &DMatrix<f64>) -> Vec<Complex64> {
    a.complex_eigenvalues().iter().copied().collect()
}

/// Largest eigenvalue of a symmetric real matrix.
pub fn max_eig_sym(m: &DMatrix<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigenvalues().max()
}

/// Matrix exponential `exp(A h)` by scaling and squaring with Pade(13).
pub fn expm(a: &DMatrix<f64>, h: f64) -> DMatrix<f64> {
    let n = a.nrows();
    assert_eq!(n, a.ncols());
    if n == 0 {
        return DMatrix::zeros(0, 0);
    }
    let m = a * h;
    let norm = m
        .column_iter()
        .map(|c| c.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0_f64, f64::max);
    let s = if norm > 0.5 {
        ((norm / 0.5).log2().ceil() as i32).max(0)
    } else {
        0
    };
    let ms = m / 2f64.powi(s);
    // Pade(13) coefficients
    let b = [
        64764752532480000.0,
        32382376266240000.0,
        7771770303897600.0,
        1187353796428800.0,
        129060195264000.0,
        10559470521600.0,
        670442572800.0,
        33522128640.0,
        1323241920.0,
        40840800.0,
        960960.0,
        16380.0,
        182.0,
        1.0,
    ];
    let ident = DMatrix::<f64>::identity(n, n);
    let m2 = &ms * &ms;
    let m4 = &m2 * &m2;
    let m6 = &m4 * &m2;
    let u_inner = &m6 * (&m6 * b[13] + &m4 * b[11] + &m2 * b[9])
        + &m6 * b[7]
        + &m4 * b[5]
        + &m2 * b[3]
        + &ident * b[1];
    let u = &ms * u_inner;
    let v = &m6 * (&m6 * b[12] + &m4 * b[10] + &m2 * b[8])
        + &m6 * b[6]
        + &m4 * b[4]
        + &m2 * b[2]
        + &ident * b[0];
    let denom = (&v - &u).lu();
    let mut r = denom
        .solve(&(&v + &u))
        .expect("expm: Pade denominator singular");
    for _ in 0..s {
        r = &r * &r;
    }
    r
}

/// Discretize `xdot = A x + B u` with zero-order hold over step `h`:
/// returns `(Ad, Bd)` with `x+ = Ad x + Bd u`.
pub fn zoh_discretize(a: &DMatrix<f64>, b: &DMatrix<f64>, h: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let m = b.ncols();
    let mut aug = DMatrix::<f64>::zeros(n + m, n + m);
    aug.view_mut((0, 0), (n, n)).copy_from(a);
    aug.view_mut((0, n), (n, m)).copy_from(b);
    let e = expm(&aug, h);
    (
        e.view((0, 0), (n, n)).into(),
        e.view((0, n), (n, m)).into(),
    )
}

// ---------------------------------------------------------------------------

/// Complex vector/matrix alias used by frequency-domain code.
pub type CMatrix = DMatrix<Complex64>;
pub type CVector = DVector<Complex<f64>>;
