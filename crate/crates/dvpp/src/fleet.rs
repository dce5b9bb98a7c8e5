//! Fleet assembly: turn a fleet description (device roles, time constants,
//! capacity intervals, ratings) into participation factors over a shared
//! parameter vector, per-device reference models on device-local parameter
//! boxes, and synthesized vertex controllers.

use nalgebra::DMatrix;

use crate::adpf::{
    fixed_adpf, Adpf, Adpm, AffineExpr, ChannelKind, ControllableSpec, ParticipationKind,
    ThetaBox,
};
use crate::alloc::allocate;
use crate::lintf::{RationalTF, StateSpace};
use crate::lpv::AffineLpvSystem;
use crate::plant::{
    converter_plant, desired_behavior, hydro_model, q_capacity, ConverterAxes, ConverterParams,
    DesiredBehavior, DesiredKind, HydroParams,
};
use crate::strategy::{ChannelInputs, Registry};
use crate::synth::{augment, synthesize, AugmentedSystem, ControllerSet, Tuning};
use crate::{Error, Result};

/// Closed capacity interval in MW (or MVAr), lower bound first.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CapacityInterval {
    pub lo_mw: f64,
    pub hi_mw: f64,
}

impl CapacityInterval {
    pub fn validate(&self, what: &str) -> Result<()> {
        if !(self.lo_mw >= 0.0 && self.hi_mw >= self.lo_mw) {
            return Err(Error::Config(format!(
                "capacity interval of {what} must satisfy 0 <= lo <= hi"
            )));
        }
        Ok(())
    }
}

/// Requested participation shape of one device on one channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartSpec {
    pub kind: ParticipationKind,
    /// Roll-off time constant (s); ignored for high-pass factors, which
    /// close the chain at the measurement bandwidth.
    pub tau: f64,
    /// Band-pass sharpening order.
    pub d: usize,
}

/// What a device is and how it can serve the fleet.
#[derive(Debug, Clone, PartialEq)]
pub enum DeviceRole {
    /// Non-controllable hydro plant with installed governor/turbine control;
    /// participates on the frequency channel with its fixed response.
    FixedHydro { params: HydroParams },
    /// Converter-interfaced device under matching control.
    Converter {
        fp: Option<PartSpec>,
        vq: Option<PartSpec>,
        /// First-order dc-source lag (s) limiting the active-power path.
        source_tau: Option<f64>,
        /// Active-power capacity range (MW).
        p_capacity: CapacityInterval,
        /// Integral-state bounds, one per participating channel (pu).
        zeta: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviceSpec {
    pub name: String,
    /// Apparent-power rating (MVA), used by the PQ-capability curve.
    pub rating_mva: f64,
    pub role: DeviceRole,
}

impl DeviceSpec {
    pub fn is_controllable(&self) -> bool {
        matches!(self.role, DeviceRole::Converter { .. })
    }
}

/// Complete fleet description.
#[derive(Debug, Clone, PartialEq)]
pub struct FleetSpec {
    pub name: String,
    /// Aggregate power base (MVA); all per-unit outputs refer to it.
    pub base_mva: f64,
    /// Measurement-bandwidth time constant (s).
    pub tau_c: f64,
    pub desired: DesiredKind,
    pub converter: ConverterParams,
    /// Transient input bound `||u|| <= mu` (pu).
    pub mu: f64,
    /// Ellipsoid scaling of the constraint certificates.
    pub alpha: f64,
    pub devices: Vec<DeviceSpec>,
}

impl FleetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.base_mva <= 0.0 {
            return Err(Error::Config("base_mva must be positive".into()));
        }
        if self.tau_c <= 0.0 {
            return Err(Error::Config("tau_c must be positive".into()));
        }
        if self.mu <= 0.0 || self.alpha <= 0.0 {
            return Err(Error::Config("mu and alpha must be positive".into()));
        }
        if self.devices.is_empty() {
            return Err(Error::Config("fleet has no devices".into()));
        }
        let has_vq_behavior = matches!(self.desired, DesiredKind::InertiaDroop { .. });
        let mut names = std::collections::BTreeSet::new();
        for dev in &self.devices {
            if !names.insert(dev.name.clone()) {
                return Err(Error::Config(format!("duplicate device name {}", dev.name)));
            }
            if dev.rating_mva <= 0.0 {
                return Err(Error::Config(format!(
                    "rating of device {} must be positive",
                    dev.name
                )));
            }
            match &dev.role {
                DeviceRole::FixedHydro { params } => params.validate()?,
                DeviceRole::Converter {
                    fp,
                    vq,
                    source_tau,
                    p_capacity,
                    zeta,
                } => {
                    if fp.is_none() {
                        return Err(Error::Config(format!(
                            "controllable device {} must participate on the fp channel",
                            dev.name
                        )));
                    }
                    if vq.is_some() && !has_vq_behavior {
                        return Err(Error::Config(format!(
                            "device {} participates on vq but the desired behavior has no vq channel",
                            dev.name
                        )));
                    }
                    if let Some(tau) = source_tau {
                        if *tau <= 0.0 {
                            return Err(Error::Config(format!(
                                "source time constant of device {} must be positive",
                                dev.name
                            )));
                        }
                    }
                    p_capacity.validate(&dev.name)?;
                    if p_capacity.hi_mw > dev.rating_mva {
                        return Err(Error::Config(format!(
                            "capacity of device {} exceeds its rating",
                            dev.name
                        )));
                    }
                    let n_ch = 1 + usize::from(vq.is_some());
                    if zeta.len() != n_ch {
                        return Err(Error::Config(format!(
                            "device {} needs {} integral-state bounds, got {}",
                            dev.name,
                            n_ch,
                            zeta.len()
                        )));
                    }
                    if zeta.iter().any(|z| *z <= 0.0) {
                        return Err(Error::Config(format!(
                            "integral-state bounds of device {} must be positive",
                            dev.name
                        )));
                    }
                }
            }
        }
        self.converter.validate()?;
        Ok(())
    }

    pub fn device_index(&self, name: &str) -> Result<usize> {
        self.devices
            .iter()
            .position(|d| d.name == name)
            .ok_or_else(|| Error::Config(format!("unknown device {name}")))
    }

    /// Nominal (upper-limit) active-power capacities per device (MW);
    /// zero for devices that do not carry an active capacity.
    pub fn nominal_p_capacity(&self) -> Vec<f64> {
        self.devices
            .iter()
            .map(|d| match &d.role {
                DeviceRole::Converter { p_capacity, .. } => p_capacity.hi_mw,
                DeviceRole::FixedHydro { .. } => 0.0,
            })
            .collect()
    }

    /// Reactive capacity (MVAr) of a device at a given active capacity
    /// limit, from the unit PQ-capability circle on the device rating.
    pub fn q_capacity_mvar(&self, device: usize, p_max_mw: f64) -> Result<f64> {
        let dev = &self.devices[device];
        Ok(dev.rating_mva * q_capacity(p_max_mw / dev.rating_mva)?)
    }
}

/// One DC-carrying participant of a channel: a low-pass device holding a
/// fleet parameter, or the high-pass remainder device whose share is the
/// budget left over by the others.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelNode {
    pub device: String,
    /// Fleet parameter index for low-pass devices; `None` for the implied
    /// high-pass remainder share.
    pub theta_index: Option<usize>,
}

/// One channel's adaptive-gain bookkeeping: which devices share the DC
/// budget and where their gains live in the fleet parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelLayout {
    pub channel: ChannelKind,
    pub nodes: Vec<ChannelNode>,
    /// Total DC gain already claimed by fixed devices.
    pub fixed_dc: f64,
}

impl ChannelLayout {
    /// Fleet parameter indices of the low-pass nodes, in node order.
    pub fn lpf_indices(&self) -> Vec<usize> {
        self.nodes.iter().filter_map(|n| n.theta_index).collect()
    }
}

/// Non-controllable device with its physical response and assigned factor.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedDesign {
    pub name: String,
    /// Physical frequency-to-power response.
    pub tf_fp: RationalTF,
    /// Assigned participation factor over the fleet parameter vector.
    pub factor_fp: Adpf,
}

/// Controllable device with its localized participation, plant, reference
/// model, and synthesized controller.
#[derive(Debug, Clone)]
pub struct DeviceDesign {
    pub name: String,
    /// Participation matrix over the device-local parameter vector.
    pub adpm: Adpm,
    pub local_box: ThetaBox,
    /// Device-local parameter j as an affine function of the fleet vector.
    pub param_map: Vec<AffineExpr>,
    pub plant: StateSpace,
    pub reference: AffineLpvSystem,
    pub aug: AugmentedSystem,
    pub controller: ControllerSet,
}

/// Output of the design pipeline for a whole fleet.
#[derive(Debug, Clone)]
pub struct FleetDesign {
    pub strategy: String,
    pub adaptive: bool,
    pub t_des: DesiredBehavior,
    pub tau_c: f64,
    /// Fleet-wide adaptive-parameter box.
    pub global_box: ThetaBox,
    pub fp: ChannelLayout,
    pub vq: Option<ChannelLayout>,
    /// Participation factors over the fleet parameter vector, all devices.
    pub factors_fp: Vec<Adpf>,
    pub factors_vq: Vec<Adpf>,
    pub fixed: Vec<FixedDesign>,
    pub devices: Vec<DeviceDesign>,
    /// Fleet gains at nominal capacities.
    pub theta_nominal: Vec<f64>,
}

/// Range of `budget * y_i / sum(y)` when each capacity ranges over its
/// interval independently.
fn theta_bounds(intervals: &[(f64, f64)], budget: f64, i: usize) -> (f64, f64) {
    let sum_hi_others: f64 = intervals
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != i)
        .map(|(_, iv)| iv.1)
        .sum();
    let sum_lo_others: f64 = intervals
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != i)
        .map(|(_, iv)| iv.0)
        .sum();
    let (lo_i, hi_i) = intervals[i];
    let lo = if lo_i + sum_hi_others > 0.0 {
        budget * lo_i / (lo_i + sum_hi_others)
    } else {
        0.0
    };
    let hi = if hi_i > 0.0 {
        budget * hi_i / (hi_i + sum_lo_others)
    } else {
        0.0
    };
    (lo.clamp(0.0, 1.0), hi.clamp(0.0, 1.0))
}

fn expr_sum(a: &AffineExpr, b: &AffineExpr) -> AffineExpr {
    let mut out = a.clone();
    out.constant += b.constant;
    for (c, v) in out.coeffs.iter_mut().zip(&b.coeffs) {
        *c += v;
    }
    out
}

fn expr_is_constant(e: &AffineExpr) -> bool {
    e.coeffs.iter().all(|c| *c == 0.0)
}

/// Range of an affine expression over a parameter box.
fn expr_range(e: &AffineExpr, bx: &ThetaBox) -> (f64, f64) {
    let mut lo = e.constant;
    let mut hi = e.constant;
    for j in 0..bx.dim() {
        let c = e.coeffs[j];
        if c >= 0.0 {
            lo += c * bx.lo[j];
            hi += c * bx.hi[j];
        } else {
            lo += c * bx.hi[j];
            hi += c * bx.lo[j];
        }
    }
    (lo, hi)
}

/// How a device-local parameter is tied to the fleet vector.
enum LocalParam {
    /// Passthrough of one fleet parameter.
    Global(usize),
    /// Affine combination of fleet parameters (e.g. a remaining DC share).
    Derived(AffineExpr),
}

/// Localize fleet-level factors onto a device-local parameter vector.
///
/// Identical transfer-function blocks inside a factor are merged first; a
/// factor that collapses to a single block with a parameter-dependent
/// weight is re-parameterized by one local gain (the affine weight itself),
/// which keeps boxes as small as the paper's per-device vertex sets.
fn localize(
    factors: &[&Adpf],
    global_box: &ThetaBox,
) -> Result<(Vec<Adpf>, ThetaBox, Vec<AffineExpr>)> {
    struct Merged {
        basis: Vec<RationalTF>,
        mix: Vec<AffineExpr>,
    }
    let merged: Vec<Merged> = factors
        .iter()
        .map(|f| {
            let mut basis: Vec<RationalTF> = Vec::new();
            let mut mix: Vec<AffineExpr> = Vec::new();
            for (b, m) in f.tf_basis.iter().zip(&f.mix) {
                if let Some(pos) = basis.iter().position(|x| x == b) {
                    mix[pos] = expr_sum(&mix[pos], m);
                } else {
                    basis.push(b.clone());
                    mix.push(m.clone());
                }
            }
            Merged { basis, mix }
        })
        .collect();

    // collect local parameters in factor order
    let mut params: Vec<(String, LocalParam, f64, f64)> = Vec::new(); // name, tie, lo, hi
    let find_global = |params: &mut Vec<(String, LocalParam, f64, f64)>, g: usize| -> usize {
        if let Some(pos) = params
            .iter()
            .position(|(_, p, _, _)| matches!(p, LocalParam::Global(idx) if *idx == g))
        {
            return pos;
        }
        params.push((
            global_box.names[g].clone(),
            LocalParam::Global(g),
            global_box.lo[g],
            global_box.hi[g],
        ));
        params.len() - 1
    };

    enum FactorPlan {
        /// Single merged block weighted by one local gain.
        Derived { param: usize },
        /// Blocks weighted by remapped affine expressions.
        Remap,
    }
    let mut plans = Vec::new();
    for (f, m) in factors.iter().zip(&merged) {
        if m.basis.len() == 1 && !expr_is_constant(&m.mix[0]) {
            let e = &m.mix[0];
            // pure passthrough of one fleet parameter keeps its identity
            let single = e.constant == 0.0
                && e.coeffs.iter().filter(|c| **c != 0.0).count() == 1
                && e.coeffs.iter().all(|c| *c == 0.0 || *c == 1.0);
            let idx = if single {
                let g = e.coeffs.iter().position(|c| *c == 1.0).unwrap();
                find_global(&mut params, g)
            } else {
                let (lo, hi) = expr_range(e, global_box);
                params.push((
                    format!("{}_{}", f.device, f.channel.name()),
                    LocalParam::Derived(e.clone()),
                    lo.clamp(0.0, 1.0),
                    hi.clamp(0.0, 1.0),
                ));
                params.len() - 1
            };
            plans.push(FactorPlan::Derived { param: idx });
        } else {
            for e in &m.mix {
                for (g, c) in e.coeffs.iter().enumerate() {
                    if *c != 0.0 {
                        find_global(&mut params, g);
                    }
                }
            }
            plans.push(FactorPlan::Remap);
        }
    }

    let dim = params.len();
    let local_box = ThetaBox::new(
        params.iter().map(|(n, _, _, _)| n.clone()).collect(),
        params.iter().map(|(_, _, lo, _)| *lo).collect(),
        params.iter().map(|(_, _, _, hi)| *hi).collect(),
    )?;
    let param_map: Vec<AffineExpr> = params
        .iter()
        .map(|(_, tie, _, _)| match tie {
            LocalParam::Global(g) => AffineExpr::theta(*g, global_box.dim()),
            LocalParam::Derived(e) => e.clone(),
        })
        .collect();
    // fleet index -> local index for remapping coefficients
    let mut g2l = vec![None; global_box.dim()];
    for (l, (_, tie, _, _)) in params.iter().enumerate() {
        if let LocalParam::Global(g) = tie {
            g2l[*g] = Some(l);
        }
    }

    let mut out = Vec::new();
    for ((f, m), plan) in factors.iter().zip(&merged).zip(&plans) {
        let (basis, mix) = match plan {
            FactorPlan::Derived { param } => (
                m.basis.clone(),
                vec![AffineExpr::theta(*param, dim)],
            ),
            FactorPlan::Remap => {
                let mut mix = Vec::new();
                for e in &m.mix {
                    let mut le = AffineExpr::constant(e.constant, dim);
                    for (g, c) in e.coeffs.iter().enumerate() {
                        if *c != 0.0 {
                            let l = g2l[g].expect("support index registered");
                            le.coeffs[l] += c;
                        }
                    }
                    mix.push(le);
                }
                (m.basis.clone(), mix)
            }
        };
        out.push(Adpf {
            device: f.device.clone(),
            channel: f.channel,
            kind: f.kind,
            tau: f.tau,
            theta_index: None,
            tf_basis: basis,
            mix,
        });
    }
    Ok((out, local_box, param_map))
}

/// Converter plant with an optional first-order source lag on the
/// active-power path.
pub fn device_plant(
    conv: &ConverterParams,
    has_vq: bool,
    source_tau: Option<f64>,
) -> Result<StateSpace> {
    let axes = if has_vq {
        ConverterAxes::Dq
    } else {
        ConverterAxes::DOnly
    };
    let base = converter_plant(conv, axes)?;
    let Some(tau) = source_tau else {
        return Ok(base.balance_states());
    };
    let n = base.order();
    let p = base.n_outputs();
    let m = base.n_inputs();
    let mut a = DMatrix::zeros(n + 1, n + 1);
    a.view_mut((0, 0), (n, n)).copy_from(&base.a);
    // source filter state driven by the converter active power
    a.view_mut((n, 0), (1, n))
        .copy_from(&(base.c.view((0, 0), (1, n)) / tau));
    a[(n, n)] = -1.0 / tau;
    let mut b = DMatrix::zeros(n + 1, m);
    b.view_mut((0, 0), (n, m)).copy_from(&base.b);
    let mut c = DMatrix::zeros(p, n + 1);
    c[(0, n)] = 1.0;
    if p > 1 {
        c.view_mut((1, 0), (p - 1, n))
            .copy_from(&base.c.view((1, 0), (p - 1, n)));
    }
    Ok(StateSpace::new(a, b, c, DMatrix::zeros(p, m)).balance_states())
}

/// Run the full design pipeline for one fleet under a named strategy.
pub fn design(spec: &FleetSpec, registry: &Registry, strategy: &str) -> Result<FleetDesign> {
    design_with(spec, registry, strategy, None)
}

/// Like [`design`], but reuse previously synthesized controllers (keyed by
/// device name) instead of re-solving the vertex programs.
pub fn design_with(
    spec: &FleetSpec,
    registry: &Registry,
    strategy: &str,
    provided: Option<&std::collections::BTreeMap<String, ControllerSet>>,
) -> Result<FleetDesign> {
    spec.validate()?;
    let strat = registry.disaggregation(strategy)?;
    let t_des = desired_behavior(spec.desired)?;

    // fleet parameter registry: one gain per low-pass factor per channel
    let mut names: Vec<String> = Vec::new();
    let mut fp_lpf: Vec<(String, usize)> = Vec::new();
    let mut vq_lpf: Vec<(String, usize)> = Vec::new();
    for dev in &spec.devices {
        if let DeviceRole::Converter { fp, .. } = &dev.role {
            if matches!(fp, Some(p) if p.kind == ParticipationKind::Lpf) {
                fp_lpf.push((dev.name.clone(), names.len()));
                names.push(format!("{}_fp", dev.name));
            }
        }
    }
    for dev in &spec.devices {
        if let DeviceRole::Converter { vq, .. } = &dev.role {
            if matches!(vq, Some(p) if p.kind == ParticipationKind::Lpf) {
                vq_lpf.push((dev.name.clone(), names.len()));
                names.push(format!("{}_vq", dev.name));
            }
        }
    }
    let dim = names.len();

    // fixed devices and their claimed DC share
    let mut fixed_factors_fp: Vec<Adpf> = Vec::new();
    let mut fixed_tfs: Vec<(String, RationalTF)> = Vec::new();
    for dev in &spec.devices {
        if let DeviceRole::FixedHydro { params } = &dev.role {
            let tf = hydro_model(params)?;
            let factor = fixed_adpf(&dev.name, ChannelKind::Fp, &tf, &t_des.fp, dim)?;
            fixed_factors_fp.push(factor);
            fixed_tfs.push((dev.name.clone(), tf));
        }
    }
    let fixed_dc_fp: f64 = fixed_factors_fp
        .iter()
        .map(|f| f.dc_gain_expr().constant)
        .sum();
    // the DC gain of an installed response is computed numerically; snap
    // rounding at the ends of the admissible range so a device covering the
    // whole (or none of the) DC budget is not rejected over a few ulps
    let fixed_dc_fp = if (fixed_dc_fp - 1.0).abs() <= 1e-9 {
        1.0
    } else if fixed_dc_fp.abs() <= 1e-9 {
        0.0
    } else {
        fixed_dc_fp
    };

    // DC-carrying nodes per channel with their capacity intervals: every
    // low-pass participant plus the high-pass remainder device (band-pass
    // factors never hold DC). Reactive intervals come from the capability
    // circle, whose endpoints swap sides as the active limit grows.
    let mut fp_nodes: Vec<ChannelNode> = Vec::new();
    let mut fp_ivs: Vec<(f64, f64)> = Vec::new();
    let mut vq_nodes: Vec<ChannelNode> = Vec::new();
    let mut vq_ivs: Vec<(f64, f64)> = Vec::new();
    for dev in &spec.devices {
        let DeviceRole::Converter {
            fp, vq, p_capacity, ..
        } = &dev.role
        else {
            continue;
        };
        let idx = spec.device_index(&dev.name)?;
        let theta_of = |list: &[(String, usize)]| {
            list.iter().find(|(n, _)| n == &dev.name).map(|(_, g)| *g)
        };
        if let Some(p) = fp {
            if p.kind != ParticipationKind::Bpf {
                fp_nodes.push(ChannelNode {
                    device: dev.name.clone(),
                    theta_index: theta_of(&fp_lpf),
                });
                fp_ivs.push((p_capacity.lo_mw, p_capacity.hi_mw));
            }
        }
        if let Some(p) = vq {
            if p.kind != ParticipationKind::Bpf {
                vq_nodes.push(ChannelNode {
                    device: dev.name.clone(),
                    theta_index: theta_of(&vq_lpf),
                });
                vq_ivs.push((
                    spec.q_capacity_mvar(idx, p_capacity.hi_mw)?,
                    spec.q_capacity_mvar(idx, p_capacity.lo_mw)?,
                ));
            }
        }
    }

    // nominal gains: allocation over the channel nodes at nominal limits
    // (the upper active limit, and the reactive capacity it leaves)
    let mut theta_nominal = vec![0.0; dim];
    if !fp_nodes.is_empty() {
        let y: Vec<f64> = fp_ivs.iter().map(|iv| iv.1).collect();
        let alloc = allocate(&y, fixed_dc_fp)?;
        for (node, v) in fp_nodes.iter().zip(alloc) {
            if let Some(g) = node.theta_index {
                theta_nominal[g] = v;
            }
        }
    }
    if !vq_nodes.is_empty() {
        let y: Vec<f64> = vq_ivs.iter().map(|iv| iv.0).collect();
        let alloc = allocate(&y, 0.0)?;
        for (node, v) in vq_nodes.iter().zip(alloc) {
            if let Some(g) = node.theta_index {
                theta_nominal[g] = v;
            }
        }
    }

    // fleet parameter box
    let mut lo = vec![0.0; dim];
    let mut hi = vec![0.0; dim];
    for (i, node) in fp_nodes.iter().enumerate() {
        if let Some(g) = node.theta_index {
            let (l, h) = theta_bounds(&fp_ivs, 1.0 - fixed_dc_fp, i);
            lo[g] = l;
            hi[g] = h;
        }
    }
    for (i, node) in vq_nodes.iter().enumerate() {
        if let Some(g) = node.theta_index {
            let (l, h) = theta_bounds(&vq_ivs, 1.0, i);
            lo[g] = l;
            hi[g] = h;
        }
    }
    let global_box = ThetaBox::new(names, lo, hi)?;

    // controllable specs per channel
    let mut fp_ctrl: Vec<ControllableSpec> = Vec::new();
    let mut vq_ctrl: Vec<ControllableSpec> = Vec::new();
    for dev in &spec.devices {
        if let DeviceRole::Converter { fp, vq, .. } = &dev.role {
            if let Some(p) = fp {
                fp_ctrl.push(ControllableSpec {
                    device: dev.name.clone(),
                    kind: p.kind,
                    tau: p.tau,
                    d: p.d,
                    theta_index: fp_lpf
                        .iter()
                        .find(|(n, _)| n == &dev.name)
                        .map(|(_, g)| *g),
                });
            }
            if let Some(p) = vq {
                vq_ctrl.push(ControllableSpec {
                    device: dev.name.clone(),
                    kind: p.kind,
                    tau: p.tau,
                    d: p.d,
                    theta_index: vq_lpf
                        .iter()
                        .find(|(n, _)| n == &dev.name)
                        .map(|(_, g)| *g),
                });
            }
        }
    }

    // participation factors via the selected strategy
    let factors_fp = strat.build(&ChannelInputs {
        channel: ChannelKind::Fp,
        fixed: &fixed_factors_fp,
        controllables: &fp_ctrl,
        tau_c: spec.tau_c,
        dim,
        theta_nominal: &theta_nominal,
    })?;
    let factors_vq = if vq_ctrl.is_empty() {
        Vec::new()
    } else {
        strat.build(&ChannelInputs {
            channel: ChannelKind::Vq,
            fixed: &[],
            controllables: &vq_ctrl,
            tau_c: spec.tau_c,
            dim,
            theta_nominal: &theta_nominal,
        })?
    };

    // per-device localization, reference model, and synthesis
    let find = |factors: &[Adpf], name: &str| -> Option<Adpf> {
        factors.iter().find(|f| f.device == name).cloned()
    };
    let mut fixed = Vec::new();
    for (name, tf) in &fixed_tfs {
        fixed.push(FixedDesign {
            name: name.clone(),
            tf_fp: tf.clone(),
            factor_fp: find(&factors_fp, name).expect("fixed factor present"),
        });
    }
    struct Pending {
        name: String,
        adpm: Adpm,
        local_box: ThetaBox,
        param_map: Vec<AffineExpr>,
        plant: StateSpace,
        reference: AffineLpvSystem,
        aug: AugmentedSystem,
        tuning: Tuning,
    }
    let mut pending = Vec::new();
    for dev in &spec.devices {
        let DeviceRole::Converter {
            vq,
            source_tau,
            zeta,
            ..
        } = &dev.role
        else {
            continue;
        };
        let fp_factor = find(&factors_fp, &dev.name)
            .ok_or_else(|| Error::Config(format!("no fp factor for device {}", dev.name)))?;
        let vq_factor = if vq.is_some() {
            Some(find(&factors_vq, &dev.name).ok_or_else(|| {
                Error::Config(format!("no vq factor for device {}", dev.name))
            })?)
        } else {
            None
        };
        let mut refs: Vec<&Adpf> = vec![&fp_factor];
        if let Some(v) = &vq_factor {
            refs.push(v);
        }
        let (local, local_box, param_map) = localize(&refs, &global_box)?;
        let adpm = Adpm {
            fp: local[0].clone(),
            vq: local.get(1).cloned(),
        };
        let plant = device_plant(&spec.converter, vq.is_some(), *source_tau)?;
        let reference = crate::adpf::reference_model_lpv(&adpm, &t_des, &local_box)?.balance_states();
        let aug = augment(&plant, &reference, None)?;
        let tuning = Tuning {
            mu: spec.mu,
            alpha: spec.alpha,
            zeta: zeta
                .iter()
                .enumerate()
                .map(|(k, z)| (aug.sigma_start() + k, *z))
                .collect(),
        };
        pending.push(Pending {
            name: dev.name.clone(),
            adpm,
            local_box,
            param_map,
            plant,
            reference,
            aug,
            tuning,
        });
    }

    // the vertex syntheses are independent semidefinite programs, so run
    // them on one thread per device
    let controllers: Vec<Result<ControllerSet>> = match provided {
        Some(map) => pending
            .iter()
            .map(|p| {
                map.get(&p.name).cloned().ok_or_else(|| {
                    Error::Config(format!("no stored controller for {}", p.name))
                })
            })
            .collect(),
        None => std::thread::scope(|scope| {
            let handles: Vec<_> = pending
                .iter()
                .map(|p| {
                    scope.spawn(|| {
                        synthesize(&p.aug, &p.tuning).map_err(|e| {
                            Error::SynthesisInfeasible(format!("device {}: {e}", p.name))
                        })
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("synthesis worker panicked"))
                .collect()
        }),
    };
    let mut devices = Vec::new();
    for (p, controller) in pending.into_iter().zip(controllers) {
        let controller = controller?;
        if controller.vertices.len() != 1 << p.local_box.dim() {
            return Err(Error::Config(format!(
                "stored controller for {} does not match the parameter box",
                p.name
            )));
        }
        devices.push(DeviceDesign {
            name: p.name,
            adpm: p.adpm,
            local_box: p.local_box,
            param_map: p.param_map,
            plant: p.plant,
            reference: p.reference,
            aug: p.aug,
            controller,
        });
    }

    Ok(FleetDesign {
        strategy: strategy.to_string(),
        adaptive: strat.adaptive(),
        t_des,
        tau_c: spec.tau_c,
        global_box,
        fp: ChannelLayout {
            channel: ChannelKind::Fp,
            nodes: fp_nodes,
            fixed_dc: fixed_dc_fp,
        },
        vq: if vq_nodes.is_empty() {
            None
        } else {
            Some(ChannelLayout {
                channel: ChannelKind::Vq,
                nodes: vq_nodes,
                fixed_dc: 0.0,
            })
        },
        factors_fp,
        factors_vq,
        fixed,
        devices,
        theta_nominal,
    })
}

impl FleetDesign {
    /// Device-local parameter vector induced by the fleet vector.
    pub fn local_theta(&self, device: &DeviceDesign, theta_global: &[f64]) -> Vec<f64> {
        device
            .param_map
            .iter()
            .map(|e| e.eval(theta_global))
            .collect()
    }
}
