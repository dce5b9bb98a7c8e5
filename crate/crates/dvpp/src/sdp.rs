//! Narrow semidefinite-programming interface used by controller synthesis.
//!
//! A problem is a linear objective over a decision vector `x` subject to
//! matrix constraints `G0 + sum_j x_j * Gj >= 0` (positive semidefinite).
//! Solving is delegated to the Clarabel interior-point solver; this module
//! only translates between symmetric matrices and the solver's scaled
//! upper-triangle vectorization.

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettings, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};
use nalgebra::DMatrix;

use crate::{Error, Result};

/// One PSD constraint block `G0 + sum_j x_(idx_j) * G_j >= 0`.
#[derive(Debug, Clone)]
pub struct LmiBlock {
    pub dim: usize,
    pub g0: DMatrix<f64>,
    /// Sparse terms: (decision-variable index, symmetric coefficient matrix).
    pub terms: Vec<(usize, DMatrix<f64>)>,
}

/// Linear SDP: minimize `objective . x` subject to every block being PSD.
#[derive(Debug, Clone)]
pub struct SdpProblem {
    n_vars: usize,
    objective: Vec<f64>,
    blocks: Vec<LmiBlock>,
}

/// Length of the packed upper triangle of an `n x n` symmetric matrix.
pub fn triangle_len(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Scaled upper-triangle vectorization (column-stacked, off-diagonal
/// entries multiplied by sqrt(2)), the layout Clarabel's PSD cone expects.
fn svec(m: &DMatrix<f64>) -> Vec<f64> {
    let n = m.nrows();
    let root2 = 2.0_f64.sqrt();
    let mut out = Vec::with_capacity(triangle_len(n));
    for c in 0..n {
        for r in 0..=c {
            let v = 0.5 * (m[(r, c)] + m[(c, r)]);
            out.push(if r == c { v } else { root2 * v });
        }
    }
    out
}

impl SdpProblem {
    pub fn new(n_vars: usize) -> Self {
        SdpProblem {
            n_vars,
            objective: vec![0.0; n_vars],
            blocks: Vec::new(),
        }
    }

    pub fn n_vars(&self) -> usize {
        self.n_vars
    }

    /// Set the linear objective coefficient of variable `j`.
    pub fn set_objective(&mut self, j: usize, coeff: f64) {
        assert!(j < self.n_vars);
        self.objective[j] = coeff;
    }

    /// Add a constraint `g0 + sum_j x_j * G_j >= 0`.
    pub fn add_psd_block(&mut self, g0: DMatrix<f64>, terms: Vec<(usize, DMatrix<f64>)>) {
        let dim = g0.nrows();
        assert_eq!(dim, g0.ncols(), "PSD block must be square");
        for (j, g) in &terms {
            assert!(*j < self.n_vars, "variable index out of range");
            assert_eq!(g.nrows(), dim);
            assert_eq!(g.ncols(), dim);
        }
        self.blocks.push(LmiBlock { dim, g0, terms });
    }

    /// Solve; returns the decision vector on success.
    pub fn solve(&self) -> Result<Vec<f64>> {
        self.solve_inner(false)
    }

    /// Like [`solve`](Self::solve), but also accepts a stalled iterate
    /// (insufficient progress / iteration cap). Useful when only an upper
    /// bound on the objective is needed and a strictly feasible certificate
    /// is recovered by a separate fixed-level re-solve.
    pub fn solve_lenient(&self) -> Result<Vec<f64>> {
        self.solve_inner(true)
    }

    fn solve_inner(&self, lenient: bool) -> Result<Vec<f64>> {
        let n = self.n_vars;
        let m_total: usize = self.blocks.iter().map(|b| triangle_len(b.dim)).sum();

        // b = svec(G0) stacked; A columns = -svec(Gj) stacked
        let mut b = Vec::with_capacity(m_total);
        for blk in &self.blocks {
            b.extend(svec(&blk.g0));
        }
        // gather triplets column by column
        let mut cols: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        let mut offset = 0;
        for blk in &self.blocks {
            for (j, g) in &blk.terms {
                for (k, v) in svec(g).into_iter().enumerate() {
                    if v != 0.0 {
                        cols[*j].push((offset + k, v));
                    }
                }
            }
            offset += triangle_len(blk.dim);
        }
        let mut colptr = Vec::with_capacity(n + 1);
        let mut rowval = Vec::new();
        let mut nzval = Vec::new();
        colptr.push(0);
        for col in &mut cols {
            col.sort_by_key(|(r, _)| *r);
            // merge duplicate (row, col) entries
            let mut merged: Vec<(usize, f64)> = Vec::with_capacity(col.len());
            for &(r, v) in col.iter() {
                match merged.last_mut() {
                    Some((lr, lv)) if *lr == r => *lv += v,
                    _ => merged.push((r, v)),
                }
            }
            for (r, v) in merged {
                rowval.push(r);
                nzval.push(-v);
            }
            colptr.push(rowval.len());
        }
        let a = CscMatrix::new(m_total, n, colptr, rowval, nzval);
        let p = CscMatrix::<f64>::zeros((n, n));
        let cones: Vec<SupportedConeT<f64>> = self
            .blocks
            .iter()
            .map(|blk| SupportedConeT::PSDTriangleConeT(blk.dim))
            .collect();
        let settings = DefaultSettings {
            verbose: false,
            max_iter: 200,
            ..DefaultSettings::default()
        };
        let mut solver = DefaultSolver::new(&p, &self.objective, &a, &b, &cones, settings)
            .map_err(|e| Error::SolverNonConvergence(format!("solver setup: {e}")))?;
        solver.solve();
        let sol = &solver.solution;
        match sol.status {
            SolverStatus::Solved | SolverStatus::AlmostSolved => Ok(sol.x.clone()),
            SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
                Err(Error::SynthesisInfeasible(
                    "conic program primal infeasible".into(),
                ))
            }
            SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => {
                Err(Error::SynthesisInfeasible(
                    "conic program unbounded below (dual infeasible)".into(),
                ))
            }
            SolverStatus::InsufficientProgress
            | SolverStatus::MaxIterations
            | SolverStatus::NumericalError
                if lenient =>
            {
                Ok(sol.x.clone())
            }
            other => Err(Error::SolverNonConvergence(format!(
                "solver stopped with status {other:?} after {} iterations, objective {:.3e}",
                sol.iterations, sol.obj_val
            ))),
        }
    }

    /// Evaluate one block at a decision vector (for certificate residuals).
    pub fn block_value(&self, idx: usize, x: &[f64]) -> DMatrix<f64> {
        let blk = &self.blocks[idx];
        let mut m = blk.g0.clone();
        for (j, g) in &blk.terms {
            m += g * x[*j];
        }
        m
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lintf::max_eig_sym;
    use approx::assert_relative_eq;

    #[test]
    fn scalar_bound() {
        // minimize x s.t. x - 2 >= 0
        let mut p = SdpProblem::new(1);
        p.set_objective(0, 1.0);
        p.add_psd_block(
            DMatrix::from_element(1, 1, -2.0),
            vec![(0, DMatrix::from_element(1, 1, 1.0))],
        );
        let x = p.solve().unwrap();
        assert_relative_eq!(x[0], 2.0, epsilon = 1e-6);
    }

    #[test]
    fn smallest_eigenvalue_lift() {
        // minimize t s.t. t*I - S >= 0 for fixed symmetric S:
        // optimum is lambda_max(S)
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 2.0]);
        let lam_max = max_eig_sym(&s);
        let mut p = SdpProblem::new(1);
        p.set_objective(0, 1.0);
        p.add_psd_block(-s.clone(), vec![(0, DMatrix::identity(2, 2))]);
        let x = p.solve().unwrap();
        assert_relative_eq!(x[0], lam_max, epsilon = 1e-6);
    }

    #[test]
    fn lyapunov_feasibility() {
        // stable A: find P with A'P + PA <= -I, P >= I, minimizing trace P
        let a = DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 0.0, -2.0]);
        // variables: p11, p12, p22
        let basis = [
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]),
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]),
            DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 1.0]),
        ];
        let mut prob = SdpProblem::new(3);
        prob.set_objective(0, 1.0);
        prob.set_objective(2, 1.0);
        // -(A'P + PA) - I >= 0
        let mut terms = Vec::new();
        for (j, e) in basis.iter().enumerate() {
            terms.push((j, -(a.transpose() * e + e * &a)));
        }
        prob.add_psd_block(-DMatrix::identity(2, 2), terms);
        // P - I >= 0
        let terms2: Vec<_> = basis.iter().cloned().enumerate().collect();
        prob.add_psd_block(-DMatrix::identity(2, 2), terms2);
        let x = prob.solve().unwrap();
        let p_mat = &basis[0] * x[0] + &basis[1] * x[1] + &basis[2] * x[2];
        let lyap = a.transpose() * &p_mat + &p_mat * &a;
        assert!(max_eig_sym(&lyap) <= -1.0 + 1e-6);
        assert!(max_eig_sym(&(-&p_mat)) <= -1.0 + 1e-6);
    }

    #[test]
    fn infeasible_detected() {
        // x >= 1 and -x >= 0 simultaneously
        let mut p = SdpProblem::new(1);
        p.add_psd_block(
            DMatrix::from_element(1, 1, -1.0),
            vec![(0, DMatrix::from_element(1, 1, 1.0))],
        );
        p.add_psd_block(
            DMatrix::zeros(1, 1),
            vec![(0, DMatrix::from_element(1, 1, -1.0))],
        );
        assert!(matches!(
            p.solve(),
            Err(Error::SynthesisInfeasible(_))
        ));
    }
}
