//! Closed-loop time-domain simulation of a designed fleet against a grid
//! surrogate, with stepwise disturbances, capacity events, saturation at
//! the device limits, and online gain adaptation.

use nalgebra::{DMatrix, DVector};

use crate::adpf::ChannelKind;
use crate::fleet::{DeviceRole, FleetDesign, FleetSpec};
use crate::strategy::{Adaptation, AdaptationSpec, Registry};
use crate::synth::interpolate;
use crate::{Error, Result};

/// State norm beyond which the run is aborted as diverged.
const DIVERGENCE_NORM: f64 = 1e6;

/// Grid-side model closing the loop around the fleet.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GridModel {
    /// Frequency/voltage deviations are exogenous signals; the fleet
    /// response is observed open loop.
    OpenLoop,
    /// Aggregated swing surrogate
    /// `2 h_g * dDf = dp_fleet - dp_dist - d_load * Df` with an algebraic
    /// stiff voltage node `Dv = v_sens * (dq_fleet - dq_dist)`.
    Surrogate { h_g: f64, d_load: f64, v_sens: f64 },
}

impl Default for GridModel {
    fn default() -> Self {
        GridModel::Surrogate {
            h_g: 4.0,
            d_load: 1.0,
            v_sens: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Integrator {
    Rk4,
    /// Exact zero-order-hold stepping via the matrix exponential; valid on
    /// linear segments only, so it rejects scenarios where a device limit
    /// saturates or gains adapt continuously.
    Expm,
}

/// Held disturbance level taking effect at `t` (absolute, not cumulative).
/// Under the surrogate grid the components are load steps `(dp, dq)`;
/// open loop they are the exogenous `(df, dv)` levels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Disturbance {
    pub t: f64,
    pub p: f64,
    pub q: f64,
}

/// Change of a device's active-power capacity limit at time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct CapacityEvent {
    pub t: f64,
    pub device: String,
    pub p_max_mw: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AdaptationMode {
    None,
    Centralized,
    Consensus { edges: Option<Vec<(usize, usize)>> },
}

impl AdaptationMode {
    pub fn name(&self) -> &'static str {
        match self {
            AdaptationMode::None => "none",
            AdaptationMode::Centralized => "centralized",
            AdaptationMode::Consensus { .. } => "consensus",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub dt: f64,
    pub horizon: f64,
    pub integrator: Integrator,
    pub grid: GridModel,
    pub disturbances: Vec<Disturbance>,
    pub capacity_events: Vec<CapacityEvent>,
    pub adaptation: AdaptationMode,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.horizon > self.dt) {
            return Err(Error::Config(
                "scenario needs 0 < dt < horizon".into(),
            ));
        }
        for d in &self.disturbances {
            if d.t < 0.0 {
                return Err(Error::Config("disturbance times must be >= 0".into()));
            }
        }
        for e in &self.capacity_events {
            if e.t < 0.0 || e.p_max_mw < 0.0 {
                return Err(Error::Config("capacity events must be >= 0".into()));
            }
        }
        if self.integrator == Integrator::Expm
            && matches!(self.adaptation, AdaptationMode::Consensus { .. })
        {
            return Err(Error::Config(
                "exact stepping requires piecewise-constant gains; use rk4 with consensus"
                    .into(),
            ));
        }
        Ok(())
    }
}

/// Recorded trajectories, one row per step (including t = 0 and the final
/// time). Per-device series are indexed like `device_names`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimTrace {
    pub t: Vec<f64>,
    pub df: Vec<f64>,
    pub dv: Vec<f64>,
    pub device_names: Vec<String>,
    pub dp: Vec<Vec<f64>>,
    pub dq: Vec<Vec<f64>>,
    pub dp_ref: Vec<Vec<f64>>,
    pub eps: Vec<Vec<f64>>,
    /// Fleet active power as seen by the grid, for the aggregation check.
    pub dp_total: Vec<f64>,
    pub theta_names: Vec<String>,
    pub theta: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    /// Largest frequency excursion (signed, pu).
    pub nadir_pu: f64,
    /// First time after which |df - df_final| stays within 2 % of the
    /// peak deviation; `None` when the trace never settles.
    pub settling_time_s: Option<f64>,
    /// Mean of the last 5 % of the frequency trace.
    pub steady_state_df_pu: f64,
    /// Root-mean-square matching error per device.
    pub rms_eps: Vec<(String, f64)>,
}

/// Saturation limits of one device (pu on the fleet base).
#[derive(Debug, Clone, Copy)]
struct Limits {
    p: f64,
    q: f64,
}

/// One simulated unit: where its states live and how to read its outputs.
struct Unit {
    name: String,
    /// Offset of this unit's state block in the global state vector.
    offset: usize,
    n_states: usize,
    /// Index into `FleetDesign::devices`, `None` for fixed devices.
    design_idx: Option<usize>,
    /// Physical outputs `[dp; dq]` from the unit states (dq row optional).
    c_phys: DMatrix<f64>,
    /// Disturbance matrix of the unit dynamics, columns `[df, dv]`
    /// (the dv column is zero for single-channel units).
    e_w: DMatrix<f64>,
    /// Unit `A` under the current gains.
    a: DMatrix<f64>,
    /// Reference output `dp_ref` read map: `c_ref x + f_ref [df; dv]`.
    c_ref: DMatrix<f64>,
    f_ref: DMatrix<f64>,
    has_q: bool,
    limits: Limits,
}

struct Engine<'a> {
    design: &'a FleetDesign,
    grid: GridModel,
    units: Vec<Unit>,
    /// Total state count including the grid state (index 0) if present.
    n: usize,
    /// Fleet gain vector.
    theta: Vec<f64>,
    /// Active-power capacity per unit (pu), fleet order of `units`.
    y_p: Vec<f64>,
    /// Gershgorin bound on the closed-loop spectral radius, used to pick
    /// stable explicit substeps (the converter current loops are stiff).
    max_rate: f64,
}

impl<'a> Engine<'a> {
    fn new(spec: &'a FleetSpec, design: &'a FleetDesign, grid: GridModel) -> Result<Self> {
        let mut units = Vec::new();
        let has_grid_state = matches!(grid, GridModel::Surrogate { .. });
        let mut offset = usize::from(has_grid_state);
        let base = spec.base_mva;
        for dev in &spec.devices {
            match &dev.role {
                DeviceRole::FixedHydro { .. } => {
                    let fd = design
                        .fixed
                        .iter()
                        .find(|f| f.name == dev.name)
                        .ok_or_else(|| Error::Config(format!("missing fixed design {}", dev.name)))?;
                    // physical response states followed by reference states
                    let phys = fd.tf_fp.to_ss()?;
                    let tf_ref = fd
                        .factor_fp
                        .collapse(&design.theta_nominal)
                        .mul(&design.t_des.fp)
                        .minreal();
                    let r = tf_ref.to_ss()?;
                    let np = phys.order();
                    let nr = r.order();
                    let n_states = np + nr;
                    let mut a = DMatrix::zeros(n_states, n_states);
                    a.view_mut((0, 0), (np, np)).copy_from(&phys.a);
                    a.view_mut((np, np), (nr, nr)).copy_from(&r.a);
                    let mut e_w = DMatrix::zeros(n_states, 2);
                    e_w.view_mut((0, 0), (np, 1)).copy_from(&phys.b);
                    e_w.view_mut((np, 0), (nr, 1)).copy_from(&r.b);
                    let mut c_phys = DMatrix::zeros(1, n_states);
                    c_phys.view_mut((0, 0), (1, np)).copy_from(&phys.c);
                    let mut c_ref = DMatrix::zeros(1, n_states);
                    c_ref.view_mut((0, np), (1, nr)).copy_from(&r.c);
                    let mut f_ref = DMatrix::zeros(1, 2);
                    f_ref[(0, 0)] = r.d[(0, 0)];
                    units.push(Unit {
                        name: dev.name.clone(),
                        offset,
                        n_states,
                        design_idx: None,
                        c_phys,
                        e_w,
                        a,
                        c_ref,
                        f_ref,
                        has_q: false,
                        limits: Limits {
                            p: f64::INFINITY,
                            q: f64::INFINITY,
                        },
                    });
                    offset += n_states;
                }
                DeviceRole::Converter { fp, vq, .. } => {
                    let (di, dd) = design
                        .devices
                        .iter()
                        .enumerate()
                        .find(|(_, d)| d.name == dev.name)
                        .ok_or_else(|| Error::Config(format!("missing design {}", dev.name)))?;
                    let has_q = vq.is_some();
                    let n_states = dd.aug.sys.order();
                    let nx = dd.plant.order();
                    let nr = dd.reference.order();
                    let nw = dd.aug.sys.n_disturbances();
                    let mut c_phys = DMatrix::zeros(1 + usize::from(has_q), n_states);
                    c_phys
                        .view_mut((0, 0), (dd.plant.n_outputs(), nx))
                        .copy_from(&dd.plant.c);
                    // steady-carrying devices saturate at their capacity
                    // limit; purely transient ones at the unit rating
                    let p_lim = if matches!(fp, Some(p) if p.kind == crate::adpf::ParticipationKind::Lpf)
                    {
                        match &dev.role {
                            DeviceRole::Converter { p_capacity, .. } => p_capacity.hi_mw / base,
                            _ => unreachable!(),
                        }
                    } else {
                        dev.rating_mva / base
                    };
                    let q_lim = if has_q {
                        let idx = spec.device_index(&dev.name)?;
                        let p_max = match &spec.devices[idx].role {
                            DeviceRole::Converter { p_capacity, .. } => p_capacity.hi_mw,
                            _ => unreachable!(),
                        };
                        spec.q_capacity_mvar(idx, p_max)? / base
                    } else {
                        f64::INFINITY
                    };
                    units.push(Unit {
                        name: dev.name.clone(),
                        offset,
                        n_states,
                        design_idx: Some(di),
                        c_phys,
                        e_w: DMatrix::zeros(n_states, 2), // filled by retune
                        a: DMatrix::zeros(n_states, n_states),
                        c_ref: DMatrix::zeros(1 + usize::from(has_q), n_states),
                        f_ref: DMatrix::zeros(1 + usize::from(has_q), 2),
                        has_q,
                        limits: Limits { p: p_lim, q: q_lim },
                    });
                    offset += n_states;
                    let _ = (nr, nw);
                }
            }
        }
        let mut eng = Engine {
            design,
            grid,
            units,
            n: offset,
            theta: design.theta_nominal.clone(),
            y_p: Vec::new(),
            max_rate: 0.0,
        };
        eng.y_p = spec
            .nominal_p_capacity()
            .iter()
            .map(|v| v / base)
            .collect();
        eng.retune()?;
        Ok(eng)
    }

    /// Re-interpolate all device gains at the current fleet vector and
    /// refresh the frozen unit matrices.
    fn retune(&mut self) -> Result<()> {
        for u in &mut self.units {
            let Some(di) = u.design_idx else { continue };
            let dd = &self.design.devices[di];
            let local = self.design.local_theta(dd, &self.theta);
            let k = interpolate(&dd.controller, &local, &dd.local_box)?;
            u.a = dd.aug.sys.a.eval(&local) + dd.aug.sys.b.eval(&local) * &k;
            let e = dd.aug.sys.e.eval(&local);
            let nw = e.ncols();
            u.e_w = DMatrix::zeros(u.n_states, 2);
            u.e_w.view_mut((0, 0), (u.n_states, nw)).copy_from(&e);
            // reference output read map on the reference state block
            let nx = dd.plant.order();
            let nr = dd.reference.order();
            let cr = dd.reference.c.eval(&local);
            let fr = dd.reference.f.eval(&local);
            let rows = cr.nrows();
            u.c_ref = DMatrix::zeros(rows, u.n_states);
            u.c_ref.view_mut((0, nx), (rows, nr)).copy_from(&cr);
            u.f_ref = DMatrix::zeros(rows, 2);
            u.f_ref
                .view_mut((0, 0), (rows, fr.ncols()))
                .copy_from(&fr);
        }
        let (a, _) = self.linear_system();
        self.max_rate = (0..a.nrows())
            .map(|i| (0..a.ncols()).map(|j| a[(i, j)].abs()).sum::<f64>())
            .fold(0.0, f64::max);
        Ok(())
    }

    /// Raw (unclamped) physical outputs of one unit.
    fn outputs(&self, u: &Unit, x: &DVector<f64>) -> (f64, f64) {
        let xs = x.rows(u.offset, u.n_states);
        let y = &u.c_phys * xs;
        (y[0], if u.has_q { y[1] } else { 0.0 })
    }

    fn clamp(&self, u: &Unit, dp: f64, dq: f64) -> (f64, f64) {
        (
            dp.clamp(-u.limits.p, u.limits.p),
            dq.clamp(-u.limits.q, u.limits.q),
        )
    }

    /// Grid signals `(df, dv)` for a state and held disturbance pair.
    fn grid_signals(&self, x: &DVector<f64>, dist: (f64, f64)) -> (f64, f64) {
        match self.grid {
            GridModel::OpenLoop => dist,
            GridModel::Surrogate { v_sens, .. } => {
                let df = x[0];
                let mut dq_total = 0.0;
                for u in &self.units {
                    let (dp, dq) = self.outputs(u, x);
                    let (_, dqc) = self.clamp(u, dp, dq);
                    dq_total += dqc;
                }
                (df, v_sens * (dq_total - dist.1))
            }
        }
    }

    /// Time derivative of the full state under held disturbances, with
    /// device outputs saturated at their limits.
    fn derivative(&self, x: &DVector<f64>, dist: (f64, f64)) -> DVector<f64> {
        let (df, dv) = self.grid_signals(x, dist);
        let w = DVector::from_column_slice(&[df, dv]);
        let mut dx = DVector::zeros(self.n);
        let mut dp_total = 0.0;
        for u in &self.units {
            let xs = x.rows(u.offset, u.n_states);
            let dxu = &u.a * xs + &u.e_w * &w;
            dx.rows_mut(u.offset, u.n_states).copy_from(&dxu);
            let (dp, dq) = self.outputs(u, x);
            let (dpc, _) = self.clamp(u, dp, dq);
            dp_total += dpc;
        }
        if let GridModel::Surrogate { h_g, d_load, .. } = self.grid {
            dx[0] = (dp_total - dist.0 - d_load * x[0]) / (2.0 * h_g);
        }
        dx
    }

    /// Whether any device limit saturates at this state.
    fn any_clamped(&self, x: &DVector<f64>) -> bool {
        self.units.iter().any(|u| {
            let (dp, dq) = self.outputs(u, x);
            let (dpc, dqc) = self.clamp(u, dp, dq);
            dpc != dp || dqc != dq
        })
    }

    /// Linear closed-loop matrices `(A, E)` with disturbance inputs
    /// `[dp_dist, dq_dist]` (surrogate) or `[df, dv]` (open loop), valid
    /// while no limit saturates.
    fn linear_system(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let n = self.n;
        let mut a = DMatrix::zeros(n, n);
        let mut e = DMatrix::zeros(n, 2);
        // df and dv as linear functions of the state and the disturbances:
        // rows [df; dv] = w_x x + w_d dist
        let mut w_x = DMatrix::zeros(2, n);
        let mut w_d = DMatrix::zeros(2, 2);
        match self.grid {
            GridModel::OpenLoop => {
                w_d[(0, 0)] = 1.0;
                w_d[(1, 1)] = 1.0;
            }
            GridModel::Surrogate { v_sens, .. } => {
                w_x[(0, 0)] = 1.0;
                for u in &self.units {
                    if u.has_q {
                        let cq = u.c_phys.row(1);
                        for j in 0..u.n_states {
                            w_x[(1, u.offset + j)] += v_sens * cq[j];
                        }
                    }
                }
                w_d[(1, 1)] = -v_sens;
            }
        }
        for u in &self.units {
            let blk = &u.e_w * &w_x;
            for i in 0..u.n_states {
                for j in 0..n {
                    a[(u.offset + i, j)] += blk[(i, j)];
                }
                for j in 0..u.n_states {
                    a[(u.offset + i, u.offset + j)] += u.a[(i, j)];
                }
            }
            let eb = &u.e_w * &w_d;
            for i in 0..u.n_states {
                for j in 0..2 {
                    e[(u.offset + i, j)] += eb[(i, j)];
                }
            }
        }
        if let GridModel::Surrogate { h_g, d_load, .. } = self.grid {
            for u in &self.units {
                let cp = u.c_phys.row(0);
                for j in 0..u.n_states {
                    a[(0, u.offset + j)] += cp[j] / (2.0 * h_g);
                }
            }
            a[(0, 0)] -= d_load / (2.0 * h_g);
            e[(0, 0)] = -1.0 / (2.0 * h_g);
        }
        (a, e)
    }
}

/// Exact zero-order-hold step matrices for `xdot = A x + E d`.
fn zoh(a: &DMatrix<f64>, e: &DMatrix<f64>, dt: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let m = e.ncols();
    let mut big = DMatrix::zeros(n + m, n + m);
    big.view_mut((0, 0), (n, n)).copy_from(&(a * dt));
    big.view_mut((0, n), (n, m)).copy_from(&(e * dt));
    let ex = big.exp();
    (
        ex.view((0, 0), (n, n)).into_owned(),
        ex.view((0, n), (n, m)).into_owned(),
    )
}

/// Run a scenario against a designed fleet.
pub fn simulate(
    spec: &FleetSpec,
    design: &FleetDesign,
    scenario: &Scenario,
    registry: &Registry,
) -> Result<SimTrace> {
    scenario.validate()?;
    if !design.adaptive && scenario.adaptation != AdaptationMode::None {
        return Err(Error::Config(format!(
            "strategy {} produces frozen gains; adaptation must be 'none'",
            design.strategy
        )));
    }
    let mut engine = Engine::new(spec, design, scenario.grid)?;

    // adaptation per channel over that channel's DC-carrying nodes; the
    // high-pass remainder node (if any) exposes its implied share and the
    // low-pass shares are written back after each update
    struct ChannelAdapt {
        channel: ChannelKind,
        /// (device index, fleet parameter index or None for the remainder).
        nodes: Vec<(usize, Option<usize>)>,
        fixed_dc: f64,
        adapt: Box<dyn Adaptation>,
    }
    impl ChannelAdapt {
        fn shares(&self, theta: &[f64]) -> Vec<f64> {
            let lpf_sum: f64 = self
                .nodes
                .iter()
                .filter_map(|(_, g)| g.map(|g| theta[g]))
                .sum();
            self.nodes
                .iter()
                .map(|(_, g)| match g {
                    Some(g) => theta[*g],
                    None => 1.0 - self.fixed_dc - lpf_sum,
                })
                .collect()
        }
        fn write_back(&self, shares: &[f64], theta: &mut [f64]) {
            for ((_, g), v) in self.nodes.iter().zip(shares) {
                if let Some(g) = g {
                    theta[*g] = *v;
                }
            }
        }
    }
    let base = spec.base_mva;
    let mut p_max_mw: Vec<f64> = spec.nominal_p_capacity();
    let make_channel = |layout: &crate::fleet::ChannelLayout| -> Result<ChannelAdapt> {
        let adapt_spec = AdaptationSpec {
            n_nodes: layout.nodes.len(),
            edges: match &scenario.adaptation {
                AdaptationMode::Consensus { edges } => edges.clone(),
                _ => None,
            },
        };
        Ok(ChannelAdapt {
            channel: layout.channel,
            nodes: layout
                .nodes
                .iter()
                .map(|n| Ok((spec.device_index(&n.device)?, n.theta_index)))
                .collect::<Result<_>>()?,
            fixed_dc: layout.fixed_dc,
            adapt: registry.adaptation(scenario.adaptation.name(), &adapt_spec)?,
        })
    };
    let mut channels: Vec<ChannelAdapt> = Vec::new();
    if !design.fp.nodes.is_empty() {
        channels.push(make_channel(&design.fp)?);
    }
    if let Some(vq) = &design.vq {
        if !vq.nodes.is_empty() {
            channels.push(make_channel(vq)?);
        }
    }
    let channel_caps = |p_max_mw: &[f64], ch: &ChannelAdapt| -> Result<Vec<f64>> {
        ch.nodes
            .iter()
            .map(|&(d, _)| match ch.channel {
                ChannelKind::Fp => Ok(p_max_mw[d] / base),
                ChannelKind::Vq => Ok(spec.q_capacity_mvar(d, p_max_mw[d])? / base),
            })
            .collect()
    };

    let n_steps = (scenario.horizon / scenario.dt).round() as usize;
    let mut x = DVector::zeros(engine.n);
    let mut dist = (0.0, 0.0);
    let mut disturbances = scenario.disturbances.clone();
    disturbances.sort_by(|a, b| a.t.total_cmp(&b.t));
    let mut events = scenario.capacity_events.clone();
    events.sort_by(|a, b| a.t.total_cmp(&b.t));
    let mut d_next = 0usize;
    let mut e_next = 0usize;

    let n_dev = engine.units.len();
    let mut trace = SimTrace {
        t: Vec::with_capacity(n_steps + 1),
        df: Vec::new(),
        dv: Vec::new(),
        device_names: engine.units.iter().map(|u| u.name.clone()).collect(),
        dp: vec![Vec::new(); n_dev],
        dq: vec![Vec::new(); n_dev],
        dp_ref: vec![Vec::new(); n_dev],
        eps: vec![Vec::new(); n_dev],
        dp_total: Vec::new(),
        theta_names: design.global_box.names.clone(),
        theta: vec![Vec::new(); design.global_box.dim()],
    };

    // exact-stepping cache, rebuilt when gains or segments change
    let mut zoh_cache: Option<(DMatrix<f64>, DMatrix<f64>)> = None;

    for k in 0..=n_steps {
        let t = k as f64 * scenario.dt;
        let t_eps = scenario.dt * 0.5;

        // apply due disturbance levels and capacity events
        while d_next < disturbances.len() && disturbances[d_next].t <= t + t_eps {
            dist = (disturbances[d_next].p, disturbances[d_next].q);
            d_next += 1;
            zoh_cache = None;
        }
        let mut theta_changed = false;
        while e_next < events.len() && events[e_next].t <= t + t_eps {
            let ev = &events[e_next];
            let di = spec.device_index(&ev.device)?;
            if !spec.devices[di].is_controllable() {
                return Err(Error::Config(format!(
                    "capacity event on non-controllable device {}",
                    ev.device
                )));
            }
            p_max_mw[di] = ev.p_max_mw;
            // refresh the saturation limits of steady-carrying devices
            for (ui, u) in engine.units.iter_mut().enumerate() {
                let _ = ui;
                if u.name == ev.device && u.limits.p.is_finite() {
                    u.limits.p = ev.p_max_mw / base;
                    if u.has_q {
                        u.limits.q = spec.q_capacity_mvar(di, ev.p_max_mw)? / base;
                    }
                }
            }
            e_next += 1;
            // re-dispatch the fleet gains channel by channel
            for ch in &mut channels {
                let y = channel_caps(&p_max_mw, ch)?;
                let mut shares = ch.shares(&engine.theta);
                ch.adapt.on_event(&mut shares, &y, ch.fixed_dc)?;
                ch.write_back(&shares, &mut engine.theta);
            }
            theta_changed = true;
        }
        if theta_changed {
            engine.retune()?;
            zoh_cache = None;
        }

        // record
        let (df, dv) = engine.grid_signals(&x, dist);
        trace.t.push(t);
        trace.df.push(df);
        trace.dv.push(dv);
        let w = DVector::from_column_slice(&[df, dv]);
        let mut dp_total = 0.0;
        for (i, u) in engine.units.iter().enumerate() {
            let (dp, dq) = engine.outputs(u, &x);
            let (dpc, dqc) = engine.clamp(u, dp, dq);
            let xs = x.rows(u.offset, u.n_states);
            let yref = &u.c_ref * xs + &u.f_ref * &w;
            trace.dp[i].push(dpc);
            trace.dq[i].push(dqc);
            trace.dp_ref[i].push(yref[0]);
            trace.eps[i].push(dpc - yref[0]);
            dp_total += dpc;
        }
        trace.dp_total.push(dp_total);
        for (j, col) in trace.theta.iter_mut().enumerate() {
            col.push(engine.theta[j]);
        }

        if k == n_steps {
            break;
        }

        // advance
        match scenario.integrator {
            Integrator::Rk4 => {
                // substep so dt * spectral radius stays well inside the
                // explicit stability region
                let n_sub = (scenario.dt * engine.max_rate / 1.5).ceil().max(1.0) as usize;
                let dt = scenario.dt / n_sub as f64;
                for _ in 0..n_sub {
                    let k1 = engine.derivative(&x, dist);
                    let k2 = engine.derivative(&(&x + &k1 * (dt / 2.0)), dist);
                    let k3 = engine.derivative(&(&x + &k2 * (dt / 2.0)), dist);
                    let k4 = engine.derivative(&(&x + &k3 * dt), dist);
                    x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
                }
            }
            Integrator::Expm => {
                if engine.any_clamped(&x) {
                    return Err(Error::Config(
                        "exact stepping hit a device limit; re-run with rk4".into(),
                    ));
                }
                if zoh_cache.is_none() {
                    let (a, e) = engine.linear_system();
                    zoh_cache = Some(zoh(&a, &e, scenario.dt));
                }
                let (ad, ed) = zoh_cache.as_ref().unwrap();
                let d = DVector::from_column_slice(&[dist.0, dist.1]);
                x = ad * &x + ed * d;
            }
        }

        // continuous gain adaptation (consensus diffusion)
        if matches!(scenario.adaptation, AdaptationMode::Consensus { .. }) {
            for ch in &mut channels {
                let y = channel_caps(&p_max_mw, ch)?;
                let mut shares = ch.shares(&engine.theta);
                ch.adapt.step(&mut shares, &y, scenario.dt)?;
                ch.write_back(&shares, &mut engine.theta);
            }
            engine.retune()?;
        }

        if x.norm() > DIVERGENCE_NORM {
            return Err(Error::SimulationDiverged(t));
        }
    }
    Ok(trace)
}

/// Summary statistics over a trace.
pub fn metrics(trace: &SimTrace) -> Metrics {
    let n = trace.t.len();
    let nadir = trace
        .df
        .iter()
        .cloned()
        .fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
    let tail = (n as f64 * 0.95) as usize;
    let steady = trace.df[tail..].iter().sum::<f64>() / (n - tail).max(1) as f64;
    let peak_dev = trace
        .df
        .iter()
        .map(|v| (v - steady).abs())
        .fold(0.0f64, f64::max);
    let band = 0.02 * peak_dev;
    let settling = if peak_dev > 0.0 {
        let mut last_out = None;
        for (i, v) in trace.df.iter().enumerate() {
            if (v - steady).abs() > band {
                last_out = Some(i);
            }
        }
        match last_out {
            None => Some(0.0),
            Some(i) if i + 1 < n => Some(trace.t[i + 1]),
            Some(_) => None,
        }
    } else {
        Some(0.0)
    };
    let rms_eps = trace
        .device_names
        .iter()
        .zip(&trace.eps)
        .map(|(name, e)| {
            let ms = e.iter().map(|v| v * v).sum::<f64>() / e.len().max(1) as f64;
            (name.clone(), ms.sqrt())
        })
        .collect();
    Metrics {
        nadir_pu: nadir,
        settling_time_s: settling,
        steady_state_df_pu: steady,
        rms_eps,
    }
}
