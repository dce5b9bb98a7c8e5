//! Adaptive dynamic participation factors (ADPFs) and matrices (ADPMs).
//!
//! Participation factors split a desired aggregate behavior across devices:
//! fixed factors for non-controllable devices, and low-pass / band-pass /
//! high-pass factors for controllable devices built by the descending
//! time-constant sort construction. Each factor is stored as a bank of
//! parameter-independent transfer-function basis blocks with mixing weights
//! that are affine in the adaptation parameter vector, which keeps every
//! derived LPV reference model exactly affine.

use num_complex::Complex64;

use crate::lintf::{FreqGrid, RationalTF, StateSpace};
use crate::lpv::{AffineLpvSystem, AffineMatrix};
use crate::plant::DesiredBehavior;
use crate::{Error, Result};

/// Matching channel: frequency/active power or voltage/reactive power.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelKind {
    Fp,
    Vq,
}

impl ChannelKind {
    pub fn name(&self) -> &'static str {
        match self {
            ChannelKind::Fp => "fp",
            ChannelKind::Vq => "vq",
        }
    }
}

/// Participation-factor family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParticipationKind {
    Fixed,
    Lpf,
    Bpf,
    Hpf,
}

/// Scalar affine function of the parameter vector:
/// `constant + sum_j coeffs[j] * theta_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineExpr {
    pub constant: f64,
    pub coeffs: Vec<f64>,
}

impl AffineExpr {
    pub fn constant(c: f64, dim: usize) -> Self {
        AffineExpr {
            constant: c,
            coeffs: vec![0.0; dim],
        }
    }

    /// The bare parameter `theta_j`.
    pub fn theta(j: usize, dim: usize) -> Self {
        assert!(j < dim, "theta index out of range");
        let mut coeffs = vec![0.0; dim];
        coeffs[j] = 1.0;
        AffineExpr { constant: 0.0, coeffs }
    }

    pub fn dim(&self) -> usize {
        self.coeffs.len()
    }

    pub fn eval(&self, theta: &[f64]) -> f64 {
        assert_eq!(theta.len(), self.coeffs.len(), "parameter dimension");
        self.constant
            + self
                .coeffs
                .iter()
                .zip(theta)
                .map(|(c, t)| c * t)
                .sum::<f64>()
    }

    pub fn scale(&self, k: f64) -> AffineExpr {
        AffineExpr {
            constant: self.constant * k,
            coeffs: self.coeffs.iter().map(|c| c * k).collect(),
        }
    }

    pub fn neg(&self) -> AffineExpr {
        self.scale(-1.0)
    }
}

/// Box of adaptation parameters with per-parameter interval bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaBox {
    pub names: Vec<String>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl ThetaBox {
    pub fn new(names: Vec<String>, lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if names.len() != lo.len() || names.len() != hi.len() {
            return Err(Error::DimensionMismatch(
                "parameter box names/bounds".into(),
            ));
        }
        for i in 0..names.len() {
            if !(lo[i] <= hi[i]) {
                return Err(Error::Config(format!(
                    "parameter {} has lo > hi",
                    names[i]
                )));
            }
            if lo[i] < 0.0 || hi[i] > 1.0 {
                return Err(Error::Config(format!(
                    "parameter {} bounds outside [0,1]",
                    names[i]
                )));
            }
        }
        Ok(ThetaBox { names, lo, hi })
    }

    pub fn dim(&self) -> usize {
        self.names.len()
    }

    pub fn midpoint(&self) -> Vec<f64> {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(l, h)| 0.5 * (l + h))
            .collect()
    }

    /// Check a parameter vector lies in the box; errors name the first
    /// violated coordinate.
    pub fn check(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.dim() {
            return Err(Error::DimensionMismatch("parameter vector".into()));
        }
        let tol = 1e-12;
        for i in 0..self.dim() {
            if theta[i] < self.lo[i] - tol || theta[i] > self.hi[i] + tol {
                return Err(Error::ParameterOutsideBox {
                    name: self.names[i].clone(),
                    value: theta[i],
                    lo: self.lo[i],
                    hi: self.hi[i],
                });
            }
        }
        Ok(())
    }
}

/// One adaptive dynamic participation factor: a bank of parameter-independent
/// transfer-function blocks mixed by affine weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Adpf {
    pub device: String,
    pub channel: ChannelKind,
    pub kind: ParticipationKind,
    /// Roll-off time constant (s); 0 for fixed factors.
    pub tau: f64,
    /// Index into the parameter vector of this factor's DC gain (LPFs only).
    pub theta_index: Option<usize>,
    pub tf_basis: Vec<RationalTF>,
    pub mix: Vec<AffineExpr>,
}

impl Adpf {
    pub fn theta_dim(&self) -> usize {
        self.mix.first().map(|m| m.dim()).unwrap_or(0)
    }

    /// Pointwise evaluation at `s` for a fixed parameter vector.
    pub fn eval(&self, s: Complex64, theta: &[f64]) -> Complex64 {
        self.tf_basis
            .iter()
            .zip(&self.mix)
            .map(|(b, m)| b.eval(s) * m.eval(theta))
            .sum()
    }

    /// Collapse to a single rational transfer function at a fixed parameter
    /// vector (exact polynomial arithmetic, no cancellation).
    pub fn collapse(&self, theta: &[f64]) -> RationalTF {
        let mut acc = RationalTF::constant(0.0);
        for (b, m) in self.tf_basis.iter().zip(&self.mix) {
            acc = acc.add(&b.scale(m.eval(theta)));
        }
        acc
    }

    /// DC gain as an affine function of the parameter vector.
    pub fn dc_gain_expr(&self) -> AffineExpr {
        let dim = self.theta_dim();
        let mut acc = AffineExpr::constant(0.0, dim);
        for (b, m) in self.tf_basis.iter().zip(&self.mix) {
            let g = b.dc_gain();
            acc.constant += m.constant * g;
            for j in 0..dim {
                acc.coeffs[j] += m.coeffs[j] * g;
            }
        }
        acc
    }
}

/// Diagonal adaptive dynamic participation matrix: one factor per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Adpm {
    pub fp: Adpf,
    pub vq: Option<Adpf>,
}

/// Controllable-device entry consumed by the sort construction.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllableSpec {
    pub device: String,
    pub kind: ParticipationKind,
    /// Channel-specific roll-off time constant (s); unused for the HPF,
    /// whose roll-off is the measurement bandwidth `tau_c`.
    pub tau: f64,
    /// Band-pass sharpening order.
    pub d: usize,
    /// Parameter index of the DC gain (LPFs only).
    pub theta_index: Option<usize>,
}

/// Fixed participation factor `m = T_i * T_des^{-1}` for a non-controllable
/// device. The quotient is reduced by the explicit minimality pass; an
/// improper result means the device rolls off slower than the desired
/// behavior allows.
pub fn fixed_adpf(
    device: &str,
    channel: ChannelKind,
    t_i: &RationalTF,
    t_des: &RationalTF,
    dim: usize,
) -> Result<Adpf> {
    let quotient = t_i.mul(&t_des.inv()?).minreal();
    if !quotient.is_proper() {
        return Err(Error::FixedDeviceTooFast);
    }
    Ok(Adpf {
        device: device.to_string(),
        channel,
        kind: ParticipationKind::Fixed,
        tau: 0.0,
        theta_index: None,
        tf_basis: vec![quotient],
        mix: vec![AffineExpr::constant(1.0, dim)],
    })
}

/// Descending time-constant sort construction for one channel.
///
/// Slower devices participate first: low-pass factors take their DC gain from
/// the parameter vector, band-pass factors fill the band between their own
/// roll-off and everything slower, and the single fastest (high-pass) device
/// absorbs the remainder up to the measurement bandwidth `1/(tau_c s + 1)`.
/// A fleet in which every controllable factor is a low-pass at exactly
/// `tau_c` is accepted without a high-pass device; its participation
/// condition then holds whenever the DC gains sum to one.
pub fn sort_algorithm(
    channel: ChannelKind,
    fixed: &[Adpf],
    controllables: &[ControllableSpec],
    tau_c: f64,
    dim: usize,
) -> Result<Vec<Adpf>> {
    if controllables.is_empty() {
        return Err(Error::Config("no controllable devices on channel".into()));
    }
    if tau_c <= 0.0 {
        return Err(Error::Config("tau_c must be positive".into()));
    }
    for c in controllables {
        match c.kind {
            ParticipationKind::Lpf => {
                let idx = c.theta_index.ok_or_else(|| {
                    Error::Config(format!("LPF device {} missing theta index", c.device))
                })?;
                if idx >= dim {
                    return Err(Error::DimensionMismatch(format!(
                        "theta index of device {}",
                        c.device
                    )));
                }
            }
            ParticipationKind::Bpf | ParticipationKind::Hpf => {}
            ParticipationKind::Fixed => {
                return Err(Error::Config(format!(
                    "device {} is fixed but listed as controllable",
                    c.device
                )));
            }
        }
    }

    // all-low-pass fast path: every factor rolls off at the measurement
    // bandwidth, so their sum already matches 1/(tau_c s + 1) when the DC
    // gains sum to one
    let all_lpf_at_tau_c = controllables.iter().all(|c| {
        c.kind == ParticipationKind::Lpf && (c.tau - tau_c).abs() <= 1e-12 * tau_c.max(1.0)
    });
    if all_lpf_at_tau_c {
        return Ok(controllables
            .iter()
            .map(|c| Adpf {
                device: c.device.clone(),
                channel,
                kind: ParticipationKind::Lpf,
                tau: c.tau,
                theta_index: c.theta_index,
                tf_basis: vec![RationalTF::first_order(1.0, c.tau)],
                mix: vec![AffineExpr::theta(c.theta_index.unwrap(), dim)],
            })
            .collect());
    }

    let n_hpf = controllables
        .iter()
        .filter(|c| c.kind == ParticipationKind::Hpf)
        .count();
    if n_hpf == 0 {
        return Err(Error::MissingHpf(channel.name().to_string()));
    }
    if n_hpf > 1 {
        return Err(Error::InfeasibleParticipationOrder(format!(
            "channel {} has {} high-pass devices, expected one",
            channel.name(),
            n_hpf
        )));
    }

    // descending time constant, ties broken by device id; the high-pass
    // (fastest) device closes the chain
    let mut ordered: Vec<&ControllableSpec> = controllables
        .iter()
        .filter(|c| c.kind != ParticipationKind::Hpf)
        .collect();
    ordered.sort_by(|a, b| {
        b.tau
            .partial_cmp(&a.tau)
            .unwrap()
            .then_with(|| a.device.cmp(&b.device))
    });
    let hpf = controllables
        .iter()
        .find(|c| c.kind == ParticipationKind::Hpf)
        .unwrap();
    // low/band-pass factors must not roll off faster than the measurement
    // bandwidth; rolling off exactly at it is allowed (the closing factor
    // then degenerates to the remaining DC share at the same corner)
    for c in &ordered {
        if c.tau < tau_c * (1.0 - 1e-12) {
            return Err(Error::InfeasibleParticipationOrder(format!(
                "device {} rolls off at tau = {} s, not slower than the \
                 measurement bandwidth tau_c = {} s",
                c.device, c.tau, tau_c
            )));
        }
    }

    // running sum of everything already assigned (fixed factors first)
    let mut sum_basis: Vec<RationalTF> = Vec::new();
    let mut sum_mix: Vec<AffineExpr> = Vec::new();
    for f in fixed {
        if f.theta_dim() != dim {
            return Err(Error::DimensionMismatch(format!(
                "fixed factor of device {}",
                f.device
            )));
        }
        sum_basis.extend(f.tf_basis.iter().cloned());
        sum_mix.extend(f.mix.iter().cloned());
    }

    let mut out = Vec::new();
    for c in &ordered {
        let lpf_block = RationalTF::first_order(1.0, c.tau);
        let factor = match c.kind {
            ParticipationKind::Lpf => Adpf {
                device: c.device.clone(),
                channel,
                kind: ParticipationKind::Lpf,
                tau: c.tau,
                theta_index: c.theta_index,
                tf_basis: vec![lpf_block],
                mix: vec![AffineExpr::theta(c.theta_index.unwrap(), dim)],
            },
            ParticipationKind::Bpf => {
                // (1/(tau s+1))^d * (1/(tau s+1) - sum of slower factors)
                let mut sharp = RationalTF::constant(1.0);
                for _ in 0..c.d {
                    sharp = sharp.mul(&RationalTF::first_order(1.0, c.tau));
                }
                let mut basis = vec![sharp.mul(&lpf_block)];
                let mut mix = vec![AffineExpr::constant(1.0, dim)];
                for (b, m) in sum_basis.iter().zip(&sum_mix) {
                    basis.push(sharp.mul(b));
                    mix.push(m.neg());
                }
                Adpf {
                    device: c.device.clone(),
                    channel,
                    kind: ParticipationKind::Bpf,
                    tau: c.tau,
                    theta_index: None,
                    tf_basis: basis,
                    mix,
                }
            }
            _ => unreachable!(),
        };
        if factor.tf_basis.iter().any(|b| !b.is_proper()) {
            return Err(Error::InfeasibleParticipationOrder(format!(
                "factor of device {} is improper",
                c.device
            )));
        }
        sum_basis.extend(factor.tf_basis.iter().cloned());
        sum_mix.extend(factor.mix.iter().cloned());
        out.push(factor);
    }

    // relaxed closing rule: 1/(tau_c s + 1) - sum of everything slower
    let mut basis = vec![RationalTF::first_order(1.0, tau_c)];
    let mut mix = vec![AffineExpr::constant(1.0, dim)];
    for (b, m) in sum_basis.iter().zip(&sum_mix) {
        basis.push(b.clone());
        mix.push(m.neg());
    }
    let hpf_factor = Adpf {
        device: hpf.device.clone(),
        channel,
        kind: ParticipationKind::Hpf,
        tau: tau_c,
        theta_index: None,
        tf_basis: basis,
        mix,
    };
    if hpf_factor.tf_basis.iter().any(|b| !b.is_proper()) {
        return Err(Error::InfeasibleParticipationOrder(format!(
            "factor of device {} is improper",
            hpf.device
        )));
    }
    out.push(hpf_factor);
    Ok(out)
}

/// Worst-case deviation of the participation sum from its target over a
/// frequency grid: `max_w |sum_i m_i(jw; theta) - 1/(tau_c jw + 1)|`.
/// With `tau_c = 0` the unrelaxed target 1 is used.
pub fn participation_residual(
    adpfs: &[Adpf],
    theta: &[f64],
    tau_c: f64,
    grid: &FreqGrid,
) -> f64 {
    let mut worst: f64 = 0.0;
    for &w in &grid.omegas {
        let s = Complex64::new(0.0, w);
        let sum: Complex64 = adpfs.iter().map(|m| m.eval(s, theta)).sum();
        let target = if tau_c == 0.0 {
            Complex64::new(1.0, 0.0)
        } else {
            Complex64::new(1.0, 0.0) / (s * tau_c + 1.0)
        };
        worst = worst.max((sum - target).norm());
    }
    worst
}

/// Realize the local reference model `y_i^r = M_i(theta) T_des w` as an
/// affine LPV system: a parallel bank of parameter-independent basis
/// realizations with parameter-affine output mixing. `A` and `E` carry no
/// parameter dependence; only `C` and `F` are affine in theta.
pub fn reference_model_lpv(
    adpm: &Adpm,
    t_des: &DesiredBehavior,
    theta_box: &ThetaBox,
) -> Result<AffineLpvSystem> {
    let dim = theta_box.dim();
    let channels: Vec<(&Adpf, &RationalTF)> = match (&adpm.vq, &t_des.vq) {
        (None, _) => vec![(&adpm.fp, &t_des.fp)],
        (Some(vq), Some(t_vq)) => vec![(&adpm.fp, &t_des.fp), (vq, t_vq)],
        (Some(_), None) => {
            return Err(Error::Config(
                "participation matrix has a vq channel but the desired behavior does not".into(),
            ))
        }
    };
    let n_ch = channels.len();

    struct Block {
        ss: StateSpace,
        channel: usize,
        weight: AffineExpr,
    }
    let mut blocks = Vec::new();
    for (k, (adpf, des)) in channels.iter().enumerate() {
        if adpf.theta_dim() != dim {
            return Err(Error::DimensionMismatch(format!(
                "participation factor of device {}",
                adpf.device
            )));
        }
        for (b, m) in adpf.tf_basis.iter().zip(&adpf.mix) {
            let g = b.mul(des);
            if !g.is_proper() {
                return Err(Error::ImproperTransferFunction);
            }
            blocks.push(Block {
                ss: g.to_ss()?,
                channel: k,
                weight: (*m).clone(),
            });
        }
    }

    let n: usize = blocks.iter().map(|b| b.ss.order()).sum();
    let mut a = nalgebra::DMatrix::<f64>::zeros(n, n);
    let mut e = nalgebra::DMatrix::<f64>::zeros(n, n_ch);
    let mut c = AffineMatrix::constant(nalgebra::DMatrix::zeros(n_ch, n), dim);
    let mut f = AffineMatrix::constant(nalgebra::DMatrix::zeros(n_ch, n_ch), dim);
    let mut i0 = 0;
    for blk in &blocks {
        let nb = blk.ss.order();
        a.view_mut((i0, i0), (nb, nb)).copy_from(&blk.ss.a);
        e.view_mut((i0, blk.channel), (nb, 1)).copy_from(&blk.ss.b);
        // affine output mixing: weight.constant into base, coeffs into increments
        let wrow = blk.weight.clone();
        for j in 0..nb {
            c.base[(blk.channel, i0 + j)] += wrow.constant * blk.ss.c[(0, j)];
            for (p, coef) in wrow.coeffs.iter().enumerate() {
                c.coeffs[p][(blk.channel, i0 + j)] += coef * blk.ss.c[(0, j)];
            }
        }
        f.base[(blk.channel, blk.channel)] += wrow.constant * blk.ss.d[(0, 0)];
        for (p, coef) in wrow.coeffs.iter().enumerate() {
            f.coeffs[p][(blk.channel, blk.channel)] += coef * blk.ss.d[(0, 0)];
        }
        i0 += nb;
    }

    Ok(AffineLpvSystem {
        a: AffineMatrix::constant(a, dim),
        b: AffineMatrix::constant(nalgebra::DMatrix::zeros(n, 0), dim),
        e: AffineMatrix::constant(e, dim),
        c,
        d: AffineMatrix::constant(nalgebra::DMatrix::zeros(n_ch, 0), dim),
        f,
        theta_box: theta_box.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::{desired_behavior, hydro_model, DesiredKind, HydroParams};
    use approx::assert_relative_eq;

    fn case1_desired() -> RationalTF {
        desired_behavior(DesiredKind::Droop {
            d: 1.0 / 0.03,
            tau: 0.2,
        })
        .unwrap()
        .fp
    }

    fn hydro_fixed(dim: usize) -> Adpf {
        let hydro = hydro_model(&HydroParams {
            r_g: 0.03,
            r_t: 0.38,
            tau_g: 0.2,
            tau_r: 5.0,
            tau_w: 1.0,
        })
        .unwrap();
        fixed_adpf("hydro", ChannelKind::Fp, &hydro, &case1_desired(), dim).unwrap()
    }

    #[test]
    fn self_participation_is_unity() {
        let des = case1_desired();
        let m = fixed_adpf("self", ChannelKind::Fp, &des, &des, 0).unwrap();
        let g = m.collapse(&[]);
        assert_relative_eq!(g.dc_gain(), 1.0, epsilon = 1e-9);
        assert_eq!(g.degrees(), (0, 0));
    }

    #[test]
    fn hydro_fixed_factor_matches_reduced_form() {
        let m = hydro_fixed(0);
        let g = m.collapse(&[]);
        // (tau_r s + 1)/((R_t/R_g) tau_r s + 1) * (1 - tau_w s)/(1 + 0.5 tau_w s)
        let expected = RationalTF::new(&[5.0, 1.0], &[(0.38 / 0.03) * 5.0, 1.0])
            .mul(&RationalTF::new(&[-1.0, 1.0], &[0.5, 1.0]));
        for &w in &FreqGrid::default().omegas {
            let s = Complex64::new(0.0, w);
            assert!((g.eval(s) - expected.eval(s)).norm() <= 1e-9);
        }
        assert_relative_eq!(g.dc_gain(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn improper_fixed_quotient_rejected() {
        // device behavior rolls off one order slower than desired
        let t_i = RationalTF::first_order(-1.0, 0.1);
        let t_des = RationalTF::new(&[-1.0], &[1.0, 2.0, 1.0]);
        assert!(matches!(
            fixed_adpf("slow", ChannelKind::Fp, &t_i, &t_des, 0),
            Err(Error::FixedDeviceTooFast)
        ));
    }

    #[test]
    fn two_device_complement() {
        let controllables = [
            ControllableSpec {
                device: "batt".into(),
                kind: ParticipationKind::Lpf,
                tau: 1.0,
                d: 1,
                theta_index: Some(0),
            },
            ControllableSpec {
                device: "sc".into(),
                kind: ParticipationKind::Hpf,
                tau: 0.0,
                d: 1,
                theta_index: None,
            },
        ];
        let out = sort_algorithm(ChannelKind::Fp, &[], &controllables, 0.1, 1).unwrap();
        assert_eq!(out.len(), 2);
        let theta = [1.0];
        let expected = RationalTF::first_order(1.0, 0.1).sub(&RationalTF::first_order(1.0, 1.0));
        let hpf = &out[1];
        for &w in &[0.0, 0.5, 3.0, 40.0] {
            let s = Complex64::new(0.0, w);
            assert!((hpf.eval(s, &theta) - expected.eval(s)).norm() <= 1e-12);
        }
    }

    #[test]
    fn case1_sort_matches_closed_forms() {
        let fixed = hydro_fixed(0);
        let controllables = [
            ControllableSpec {
                device: "bess".into(),
                kind: ParticipationKind::Bpf,
                tau: 0.2,
                d: 1,
                theta_index: None,
            },
            ControllableSpec {
                device: "sc".into(),
                kind: ParticipationKind::Hpf,
                tau: 0.0,
                d: 1,
                theta_index: None,
            },
        ];
        let out = sort_algorithm(
            ChannelKind::Fp,
            std::slice::from_ref(&fixed),
            &controllables,
            0.081,
            0,
        )
        .unwrap();
        let m_hydro = fixed.collapse(&[]);
        let lpf02 = RationalTF::first_order(1.0, 0.2);
        let m_bess_expected = lpf02.mul(&lpf02.sub(&m_hydro));
        let m_sc_expected = RationalTF::first_order(1.0, 0.081)
            .sub(&m_bess_expected)
            .sub(&m_hydro);
        for &w in &FreqGrid::default().omegas {
            let s = Complex64::new(0.0, w);
            assert!((out[0].eval(s, &[]) - m_bess_expected.eval(s)).norm() <= 1e-9);
            assert!((out[1].eval(s, &[]) - m_sc_expected.eval(s)).norm() <= 1e-9);
        }
        // telescoping over the full set
        let all = [fixed, out[0].clone(), out[1].clone()];
        let r = participation_residual(&all, &[], 0.081, &FreqGrid::default());
        assert!(r <= 1e-9, "residual {r}");
    }

    #[test]
    fn residual_detects_missing_device() {
        let controllables = [
            ControllableSpec {
                device: "a".into(),
                kind: ParticipationKind::Lpf,
                tau: 1.0,
                d: 1,
                theta_index: Some(0),
            },
            ControllableSpec {
                device: "b".into(),
                kind: ParticipationKind::Hpf,
                tau: 0.0,
                d: 1,
                theta_index: None,
            },
        ];
        let out = sort_algorithm(ChannelKind::Fp, &[], &controllables, 0.1, 1).unwrap();
        let theta = [0.7];
        let full = participation_residual(&out, &theta, 0.1, &FreqGrid::default());
        assert!(full <= 1e-9);
        // drop the LPF: the gap equals its peak magnitude on the grid
        let dropped = participation_residual(&out[1..], &theta, 0.1, &FreqGrid::default());
        let peak = FreqGrid::default()
            .omegas
            .iter()
            .map(|&w| out[0].eval(Complex64::new(0.0, w), &theta).norm())
            .fold(0.0_f64, f64::max);
        assert!(dropped >= peak - 1e-12);
    }

    #[test]
    fn missing_hpf_rejected() {
        let controllables = [ControllableSpec {
            device: "a".into(),
            kind: ParticipationKind::Lpf,
            tau: 1.0,
            d: 1,
            theta_index: Some(0),
        }];
        assert!(matches!(
            sort_algorithm(ChannelKind::Fp, &[], &controllables, 0.1, 1),
            Err(Error::MissingHpf(_))
        ));
    }

    #[test]
    fn all_lpf_at_measurement_bandwidth_accepted() {
        // three low-pass factors at tau_c; the relaxed condition holds when
        // the DC gains sum to one
        let tau_c = 0.081;
        let controllables: Vec<ControllableSpec> = (0..3)
            .map(|i| ControllableSpec {
                device: format!("dev{i}"),
                kind: ParticipationKind::Lpf,
                tau: tau_c,
                d: 1,
                theta_index: Some(i),
            })
            .collect();
        let out = sort_algorithm(ChannelKind::Vq, &[], &controllables, tau_c, 3).unwrap();
        let theta = [0.2, 0.5, 0.3];
        let r = participation_residual(&out, &theta, tau_c, &FreqGrid::default());
        assert!(r <= 1e-9, "residual {r}");
    }

    #[test]
    fn unrelaxed_strict_mode() {
        // biproper complement: 1 - theta/(s+1) closes the strict condition
        let lpf = Adpf {
            device: "a".into(),
            channel: ChannelKind::Fp,
            kind: ParticipationKind::Lpf,
            tau: 1.0,
            theta_index: Some(0),
            tf_basis: vec![RationalTF::first_order(1.0, 1.0)],
            mix: vec![AffineExpr::theta(0, 1)],
        };
        let hpf = Adpf {
            device: "b".into(),
            channel: ChannelKind::Fp,
            kind: ParticipationKind::Hpf,
            tau: 0.0,
            theta_index: None,
            tf_basis: vec![RationalTF::constant(1.0), RationalTF::first_order(1.0, 1.0)],
            mix: vec![AffineExpr::constant(1.0, 1), AffineExpr::theta(0, 1).neg()],
        };
        let r = participation_residual(&[lpf, hpf], &[0.4], 0.0, &FreqGrid::default());
        assert!(r <= 1e-12);
    }

    fn wind_pv_adpm() -> (Adpm, DesiredBehavior, ThetaBox) {
        // two LPF devices on fp; wind carries theta index 0
        let controllables = [
            ControllableSpec {
                device: "wind".into(),
                kind: ParticipationKind::Lpf,
                tau: 1.5,
                d: 1,
                theta_index: Some(0),
            },
            ControllableSpec {
                device: "st".into(),
                kind: ParticipationKind::Hpf,
                tau: 0.0,
                d: 1,
                theta_index: None,
            },
        ];
        let out = sort_algorithm(ChannelKind::Fp, &[], &controllables, 0.081, 1).unwrap();
        let des = desired_behavior(DesiredKind::InertiaDroop {
            d_p: 1.0 / 0.03,
            h_p: 13.0,
            tau_p: 0.2,
            d_q: 100.0,
            tau_q: 0.2,
        })
        .unwrap();
        let theta_box = ThetaBox::new(vec!["wind_fp".into()], vec![0.0], vec![1.0]).unwrap();
        (
            Adpm {
                fp: out[0].clone(),
                vq: None,
            },
            des,
            theta_box,
        )
    }

    #[test]
    fn reference_model_dc_gain_tracks_theta() {
        let (adpm, des, theta_box) = wind_pv_adpm();
        let model = reference_model_lpv(&adpm, &des, &theta_box).unwrap();
        assert!(model.a.is_parameter_free());
        assert!(model.e.is_parameter_free());
        for theta in [[0.0], [0.3], [1.0]] {
            let a = model.a.eval(&theta);
            let e = model.e.eval(&theta);
            let c = model.c.eval(&theta);
            let f = model.f.eval(&theta);
            let dc = &c * a.lu().solve(&(-&e)).unwrap() + &f;
            assert_relative_eq!(dc[(0, 0)], theta[0] * (-1.0 / 0.03), epsilon = 1e-9);
        }
    }

    #[test]
    fn reference_model_zero_theta_silences_output() {
        let (adpm, des, theta_box) = wind_pv_adpm();
        let model = reference_model_lpv(&adpm, &des, &theta_box).unwrap();
        let c = model.c.eval(&[0.0]);
        let f = model.f.eval(&[0.0]);
        assert!(c.amax() == 0.0 && f.amax() == 0.0);
    }

    #[test]
    fn reference_model_matrices_affine_in_theta() {
        let (adpm, des, theta_box) = wind_pv_adpm();
        let model = reference_model_lpv(&adpm, &des, &theta_box).unwrap();
        let mid = model.c.eval(&[0.5]);
        let avg = (model.c.eval(&[0.0]) + model.c.eval(&[1.0])) * 0.5;
        assert!((mid - avg).amax() <= 1e-14);
    }

    #[test]
    fn theta_box_checks() {
        let b = ThetaBox::new(vec!["x".into()], vec![0.2], vec![0.8]).unwrap();
        assert!(b.check(&[0.5]).is_ok());
        assert!(matches!(
            b.check(&[0.9]),
            Err(Error::ParameterOutsideBox { .. })
        ));
        assert!(ThetaBox::new(vec!["x".into()], vec![0.9], vec![0.1]).is_err());
    }
}
