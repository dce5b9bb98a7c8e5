//! Device models and desired-behavior factories: hydro governor/turbine,
//! linearized converter d-axis and dq plants, droop and inertia-plus-droop
//! desired behaviors, and the PQ-capability relation.

use nalgebra::DMatrix;

use crate::lintf::{RationalTF, StateSpace};
use crate::{Error, Result};

/// Hydro governor/turbine parameters (per unit / seconds).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HydroParams {
    /// Speed droop (pu).
    pub r_g: f64,
    /// Transient droop (pu); must exceed `r_g`.
    pub r_t: f64,
    /// Governor time constant (s).
    pub tau_g: f64,
    /// Reset time constant (s).
    pub tau_r: f64,
    /// Water time constant (s).
    pub tau_w: f64,
}

impl HydroParams {
    pub fn validate(&self) -> Result<()> {
        let all_pos = [self.r_g, self.r_t, self.tau_g, self.tau_r, self.tau_w]
            .iter()
            .all(|v| *v > 0.0);
        if !all_pos {
            return Err(Error::Config(
                "hydro parameters must be positive".into(),
            ));
        }
        if self.r_t <= self.r_g {
            return Err(Error::Config(
                "hydro transient droop must exceed speed droop".into(),
            ));
        }
        Ok(())
    }
}

/// Converter filter/current-control parameters (per unit / seconds).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConverterParams {
    /// RL-filter inductance (pu).
    pub l_f: f64,
    /// Base angular frequency (rad/s).
    pub omega_b: f64,
    /// Current-control proportional gain (pu).
    pub k_p_i: f64,
    /// Current-control integral gain (pu).
    pub k_i_i: f64,
    /// Nominal voltage magnitude (pu).
    pub v_star: f64,
    /// DC-source time constant (s); consumed by the participation roll-off.
    pub tau_dc: f64,
    /// Measurement/synchronization time constant (s).
    pub tau_c: f64,
}

impl ConverterParams {
    pub fn validate(&self) -> Result<()> {
        let all_pos = [
            self.l_f,
            self.omega_b,
            self.k_p_i,
            self.k_i_i,
            self.v_star,
            self.tau_dc,
            self.tau_c,
        ]
        .iter()
        .all(|v| *v > 0.0);
        if !all_pos {
            return Err(Error::Config(
                "converter parameters must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Which converter axes are modeled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConverterAxes {
    /// d-axis only: input di_d*, output dp.
    DOnly,
    /// Decoupled dq: inputs (di_d*, di_q*), outputs (dp, dq).
    Dq,
}

/// Diagonal desired behavior: f->p channel always present, v->q optional.
#[derive(Debug, Clone, PartialEq)]
pub struct DesiredBehavior {
    pub fp: RationalTF,
    pub vq: Option<RationalTF>,
}

/// Desired-behavior family.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DesiredKind {
    /// Pure droop on the fp channel: -D/(tau s + 1).
    Droop { d: f64, tau: f64 },
    /// Inertia plus droop on fp, droop on vq:
    /// fp = -(D_p + H_p s)/(tau_p s + 1), vq = -D_q/(tau_q s + 1).
    InertiaDroop {
        d_p: f64,
        h_p: f64,
        tau_p: f64,
        d_q: f64,
        tau_q: f64,
    },
}

/// Hydro governor/turbine transfer function from frequency deviation to power:
/// (-1/R_g)/(tau_g s+1) * (tau_r s+1)/((R_t/R_g) tau_r s+1) * (1-tau_w s)/(1+0.5 tau_w s).
pub fn hydro_model(p: &HydroParams) -> Result<RationalTF> {
    p.validate()?;
    let governor = RationalTF::first_order(-1.0 / p.r_g, p.tau_g);
    let reset = RationalTF::new(&[p.tau_r, 1.0], &[(p.r_t / p.r_g) * p.tau_r, 1.0]);
    let turbine = RationalTF::new(&[-p.tau_w, 1.0], &[0.5 * p.tau_w, 1.0]);
    Ok(governor.mul(&reset).mul(&turbine))
}

/// Linearized current-controlled converter plant.
///
/// d-axis states are (di_d, dx_id) with
/// `(L_f/omega_b) di_d' = k_p (di_d* - di_d) + k_i dx_id`, `dx_id' = di_d* - di_d`
/// and output `dp = v* di_d`. The dq variant stacks two identical copies;
/// the q-axis output is `dq = -v* di_q`.
pub fn converter_plant(p: &ConverterParams, axes: ConverterAxes) -> Result<StateSpace> {
    p.validate()?;
    let g = p.omega_b / p.l_f;
    let a_axis = DMatrix::from_row_slice(2, 2, &[-g * p.k_p_i, g * p.k_i_i, -1.0, 0.0]);
    let b_axis = DMatrix::from_column_slice(2, 1, &[g * p.k_p_i, 1.0]);
    match axes {
        ConverterAxes::DOnly => {
            let c = DMatrix::from_row_slice(1, 2, &[p.v_star, 0.0]);
            Ok(StateSpace::new(a_axis, b_axis, c, DMatrix::zeros(1, 1)))
        }
        ConverterAxes::Dq => {
            let mut a = DMatrix::zeros(4, 4);
            a.view_mut((0, 0), (2, 2)).copy_from(&a_axis);
            a.view_mut((2, 2), (2, 2)).copy_from(&a_axis);
            let mut b = DMatrix::zeros(4, 2);
            b.view_mut((0, 0), (2, 1)).copy_from(&b_axis);
            b.view_mut((2, 1), (2, 1)).copy_from(&b_axis);
            let mut c = DMatrix::zeros(2, 4);
            c[(0, 0)] = p.v_star;
            c[(1, 2)] = -p.v_star;
            Ok(StateSpace::new(a, b, c, DMatrix::zeros(2, 2)))
        }
    }
}

/// Construct the diagonal desired behavior for a DVPP.
pub fn desired_behavior(kind: DesiredKind) -> Result<DesiredBehavior> {
    match kind {
        DesiredKind::Droop { d, tau } => {
            if d <= 0.0 || tau <= 0.0 {
                return Err(Error::Config("droop parameters must be positive".into()));
            }
            Ok(DesiredBehavior {
                fp: RationalTF::first_order(-d, tau),
                vq: None,
            })
        }
        DesiredKind::InertiaDroop {
            d_p,
            h_p,
            tau_p,
            d_q,
            tau_q,
        } => {
            if [d_p, h_p, tau_p, d_q, tau_q].iter().any(|v| *v <= 0.0) {
                return Err(Error::Config(
                    "inertia-droop parameters must be positive".into(),
                ));
            }
            Ok(DesiredBehavior {
                fp: RationalTF::new(&[-h_p, -d_p], &[tau_p, 1.0]),
                vq: Some(RationalTF::first_order(-d_q, tau_q)),
            })
        }
    }
}

/// Reactive headroom on the unit PQ-capability circle: sqrt(1 - p_max^2).
pub fn q_capacity(p_max: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p_max) {
        return Err(Error::ParameterOutsideBox {
            name: "p_max".into(),
            value: p_max,
            lo: 0.0,
            hi: 1.0,
        });
    }
    Ok((1.0 - p_max * p_max).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lintf::is_hurwitz;
    use approx::assert_relative_eq;

    fn table_hydro() -> HydroParams {
        HydroParams {
            r_g: 0.03,
            r_t: 0.38,
            tau_g: 0.2,
            tau_r: 5.0,
            tau_w: 1.0,
        }
    }

    fn table_converter() -> ConverterParams {
        ConverterParams {
            l_f: 0.0942,
            omega_b: 2.0 * std::f64::consts::PI * 50.0,
            k_p_i: 0.73,
            k_i_i: 1.19,
            v_star: 1.0,
            tau_dc: 0.2,
            tau_c: 0.081,
        }
    }

    #[test]
    fn hydro_dc_gain() {
        let g = hydro_model(&table_hydro()).unwrap();
        assert_relative_eq!(g.dc_gain(), -1.0 / 0.03, epsilon = 1e-9);
    }

    #[test]
    fn hydro_structure() {
        let g = hydro_model(&table_hydro()).unwrap();
        assert!(g.is_strictly_proper());
        let zeros = g.zeros();
        let rhp: Vec<_> = zeros.iter().filter(|z| z.re > 0.0).collect();
        assert_eq!(rhp.len(), 1);
        assert_relative_eq!(rhp[0].re, 1.0, epsilon = 1e-9); // 1/tau_w with tau_w = 1
        assert!(g.poles().iter().all(|p| p.re < 0.0));
    }

    #[test]
    fn hydro_droop_ordering_enforced() {
        let mut p = table_hydro();
        p.r_t = 0.01;
        assert!(hydro_model(&p).is_err());
    }

    #[test]
    fn converter_d_only_dc_tracking() {
        let ss = converter_plant(&table_converter(), ConverterAxes::DOnly).unwrap();
        assert!(is_hurwitz(&ss.a));
        // integral action: steady-state output per unit reference equals v*
        let dc = ss.response_at(0.0).unwrap();
        assert_relative_eq!(dc[(0, 0)].re, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn converter_dq_decoupling_and_symmetry() {
        let ss = converter_plant(&table_converter(), ConverterAxes::Dq).unwrap();
        assert!(is_hurwitz(&ss.a));
        for &w in &[0.0, 1.0, 10.0, 100.0] {
            let m = ss.response_at(w).unwrap();
            assert!(m[(0, 1)].norm() < 1e-14); // di_q* -> dp is zero
            assert!(m[(1, 0)].norm() < 1e-14); // di_d* -> dq is zero
            assert!((m[(0, 0)] + m[(1, 1)]).norm() < 1e-12); // q output sign-flipped
        }
        // q-axis subsystem equals the d-axis one
        assert_eq!(ss.a.view((0, 0), (2, 2)), ss.a.view((2, 2), (2, 2)));
    }

    #[test]
    fn droop_desired_behavior() {
        let des = desired_behavior(DesiredKind::Droop {
            d: 1.0 / 0.03,
            tau: 0.2,
        })
        .unwrap();
        assert_relative_eq!(des.fp.dc_gain(), -33.3333333, epsilon = 1e-4);
        assert!(des.fp.is_strictly_proper());
        assert!(des.vq.is_none());
    }

    #[test]
    fn inertia_droop_desired_behavior() {
        let des = desired_behavior(DesiredKind::InertiaDroop {
            d_p: 1.0 / 0.03,
            h_p: 13.0,
            tau_p: 0.2,
            d_q: 100.0,
            tau_q: 0.2,
        })
        .unwrap();
        assert_relative_eq!(des.fp.dc_gain(), -1.0 / 0.03, epsilon = 1e-9);
        // biproper: high-frequency gain -H_p/tau_p
        let hf = des.fp.eval(num_complex::Complex64::new(0.0, 1e9));
        assert_relative_eq!(hf.re, -65.0, epsilon = 1e-3);
        let vq = des.vq.unwrap();
        assert_relative_eq!(vq.dc_gain(), -100.0, epsilon = 1e-12);
    }

    #[test]
    fn q_capacity_circle() {
        assert_relative_eq!(q_capacity(0.0).unwrap(), 1.0);
        assert_relative_eq!(q_capacity(1.0).unwrap(), 0.0);
        assert_relative_eq!(q_capacity(0.6).unwrap(), 0.8, epsilon = 1e-15);
        let p = 0.37;
        let q = q_capacity(p).unwrap();
        assert!((q * q + p * p - 1.0).abs() <= 1e-15);
        assert!(q_capacity(1.2).is_err());
        assert!(q_capacity(-0.1).is_err());
    }
}
