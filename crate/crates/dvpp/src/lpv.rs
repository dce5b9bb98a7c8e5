//! Affine linear-parameter-varying (LPV) state-space containers.
//!
//! Matrices are stored as a constant base plus one increment per scheduling
//! parameter, so every entry is exactly affine in the parameter vector.

use nalgebra::DMatrix;

use crate::adpf::ThetaBox;

/// Matrix-valued affine function of the parameter vector:
/// `M(theta) = base + sum_j theta_j * coeffs[j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineMatrix {
    pub base: DMatrix<f64>,
    pub coeffs: Vec<DMatrix<f64>>,
}

impl AffineMatrix {
    pub fn constant(base: DMatrix<f64>, dim: usize) -> Self {
        let coeffs = (0..dim)
            .map(|_| DMatrix::zeros(base.nrows(), base.ncols()))
            .collect();
        AffineMatrix { base, coeffs }
    }

    pub fn dim(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_parameter_free(&self) -> bool {
        self.coeffs.iter().all(|c| c.iter().all(|x| *x == 0.0))
    }

    pub fn eval(&self, theta: &[f64]) -> DMatrix<f64> {
        assert_eq!(theta.len(), self.coeffs.len(), "parameter dimension");
        let mut m = self.base.clone();
        for (t, c) in theta.iter().zip(&self.coeffs) {
            m += c * *t;
        }
        m
    }
}

/// Continuous-time LPV system
/// `xdot = A(theta) x + B(theta) u + E(theta) w`,
/// `y = C(theta) x + D(theta) u + F(theta) w`,
/// with every matrix affine in theta and theta confined to a box.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineLpvSystem {
    pub a: AffineMatrix,
    pub b: AffineMatrix,
    pub e: AffineMatrix,
    pub c: AffineMatrix,
    pub d: AffineMatrix,
    pub f: AffineMatrix,
    pub theta_box: ThetaBox,
}

impl AffineLpvSystem {
    pub fn order(&self) -> usize {
        self.a.base.nrows()
    }

    pub fn n_inputs(&self) -> usize {
        self.b.base.ncols()
    }

    pub fn n_disturbances(&self) -> usize {
        self.e.base.ncols()
    }

    pub fn n_outputs(&self) -> usize {
        self.c.base.nrows()
    }

    /// Diagonal state rescaling with powers of two balancing row and column
    /// magnitudes of `[A B E; C 0 0]`, using worst-case entry magnitudes
    /// over the parameter box. The same scaling is applied to the base and
    /// every parameter increment, so affinity in the parameters is kept and
    /// input-output behavior is unchanged.
    pub fn balance_states(&self) -> AffineLpvSystem {
        let n = self.order();
        // worst-case magnitude of an affine entry over [0, 1]^dim scaled
        // by the box upper bounds
        let mag = |m: &AffineMatrix, i: usize, j: usize| -> f64 {
            let mut v = m.base[(i, j)].abs();
            for (k, c) in m.coeffs.iter().enumerate() {
                v += c[(i, j)].abs() * self.theta_box.hi[k].abs().max(1.0);
            }
            v
        };
        let mut d = vec![1.0f64; n];
        for _ in 0..30 {
            let mut changed = false;
            for i in 0..n {
                let mut col = 0.0;
                for k in 0..n {
                    if k != i {
                        col += mag(&self.a, k, i) * d[i] / d[k];
                    }
                }
                for k in 0..self.n_outputs() {
                    col += mag(&self.c, k, i) * d[i];
                }
                let mut row = 0.0;
                for k in 0..n {
                    if k != i {
                        row += mag(&self.a, i, k) * d[k] / d[i];
                    }
                }
                for k in 0..self.n_inputs() {
                    row += mag(&self.b, i, k) / d[i];
                }
                for k in 0..self.n_disturbances() {
                    row += mag(&self.e, i, k) / d[i];
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
        let scale = |m: &AffineMatrix, rows: bool, cols: bool| -> AffineMatrix {
            let apply = |mat: &DMatrix<f64>| -> DMatrix<f64> {
                let mut out = mat.clone();
                if rows {
                    for i in 0..n {
                        for j in 0..out.ncols() {
                            out[(i, j)] /= d[i];
                        }
                    }
                }
                if cols {
                    for j in 0..n {
                        for i in 0..out.nrows() {
                            out[(i, j)] *= d[j];
                        }
                    }
                }
                out
            };
            AffineMatrix {
                base: apply(&m.base),
                coeffs: m.coeffs.iter().map(apply).collect(),
            }
        };
        AffineLpvSystem {
            a: scale(&self.a, true, true),
            b: scale(&self.b, true, false),
            e: scale(&self.e, true, false),
            c: scale(&self.c, false, true),
            d: self.d.clone(),
            f: self.f.clone(),
            theta_box: self.theta_box.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn affine_matrix_evaluation() {
        let base = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let inc = DMatrix::from_row_slice(1, 2, &[0.0, 2.0]);
        let m = AffineMatrix {
            base,
            coeffs: vec![inc],
        };
        let at = m.eval(&[0.5]);
        assert_relative_eq!(at[(0, 0)], 1.0);
        assert_relative_eq!(at[(0, 1)], 1.0);
        assert!(!m.is_parameter_free());
    }

    #[test]
    fn convexity_of_affine_evaluation() {
        let m = AffineMatrix {
            base: DMatrix::from_element(2, 2, 1.0),
            coeffs: vec![
                DMatrix::from_element(2, 2, -0.3),
                DMatrix::from_element(2, 2, 0.7),
            ],
        };
        let t1 = [0.1, 0.9];
        let t2 = [0.8, 0.2];
        let lam = 0.37;
        let mid: Vec<f64> = t1
            .iter()
            .zip(&t2)
            .map(|(a, b)| lam * a + (1.0 - lam) * b)
            .collect();
        let lhs = m.eval(&mid);
        let rhs = m.eval(&t1) * lam + m.eval(&t2) * (1.0 - lam);
        assert!((lhs - rhs).amax() <= 1e-14);
    }
}
