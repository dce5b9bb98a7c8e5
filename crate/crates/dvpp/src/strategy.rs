//! Runtime-selectable strategies: how the desired aggregate behavior is
//! split across devices (static, dynamic, or adaptive participation
//! factors) and how low-pass DC gains evolve online (held, broadcast
//! re-allocation, or peer-to-peer consensus). Both families are registered
//! by name in a [`Registry`] so front ends can pick them from configuration.

use std::collections::BTreeMap;

use crate::adpf::{
    sort_algorithm, Adpf, AffineExpr, ChannelKind, ControllableSpec, ParticipationKind,
};
use crate::alloc::{allocate, consensus_dt_bound, consensus_rate, relay_adjacency, CommGraph};
use crate::lintf::RationalTF;
use crate::{Error, Result};

/// Inputs for constructing one channel's participation factors.
pub struct ChannelInputs<'a> {
    pub channel: ChannelKind,
    /// Fixed-device factors, already expressed over the fleet parameter
    /// vector (their mixing weights are constant).
    pub fixed: &'a [Adpf],
    pub controllables: &'a [ControllableSpec],
    /// Measurement-bandwidth time constant (s) of the relaxed closing rule.
    pub tau_c: f64,
    /// Fleet parameter dimension.
    pub dim: usize,
    /// Nominal DC-gain values (the allocation at nominal capacities),
    /// indexed like the fleet parameter vector; non-adaptive strategies
    /// freeze their factors at these values.
    pub theta_nominal: &'a [f64],
}

/// A disaggregation strategy turns a channel description into one
/// participation factor per device (fixed devices first, controllable
/// devices after, in input order).
pub trait Disaggregation: Send + Sync {
    fn name(&self) -> &'static str;
    /// Whether the produced factors vary with the fleet parameter vector.
    fn adaptive(&self) -> bool;
    fn build(&self, inp: &ChannelInputs) -> Result<Vec<Adpf>>;
}

/// Online evolution of the low-pass DC gains of one channel. `theta` holds
/// the gains of the channel's low-pass devices, `y` their capacities in the
/// same order.
pub trait Adaptation: Send {
    fn name(&self) -> &'static str;
    /// React to a capacity change (event-triggered path).
    fn on_event(&mut self, theta: &mut [f64], y: &[f64], fixed_dc: f64) -> Result<()>;
    /// Advance continuously evolving gains by one step of length `dt` (s).
    fn step(&mut self, theta: &mut [f64], y: &[f64], dt: f64) -> Result<()>;
}

/// Constructor arguments shared by the adaptation factories.
#[derive(Debug, Clone, Default)]
pub struct AdaptationSpec {
    /// Number of participating (low-pass) devices on the channel.
    pub n_nodes: usize,
    /// Communication edges for distributed modes; a line topology is used
    /// when absent.
    pub edges: Option<Vec<(usize, usize)>>,
}

fn constant_factor(template: &Adpf, value: f64, dim: usize) -> Adpf {
    Adpf {
        device: template.device.clone(),
        channel: template.channel,
        kind: template.kind,
        tau: 0.0,
        theta_index: None,
        tf_basis: vec![RationalTF::constant(value)],
        mix: vec![AffineExpr::constant(1.0, dim)],
    }
}

/// Freeze a factor's mixing weights at a fixed parameter vector, keeping
/// its transfer-function bank.
fn freeze(f: &Adpf, theta: &[f64]) -> Adpf {
    Adpf {
        mix: f
            .mix
            .iter()
            .map(|m| AffineExpr::constant(m.eval(theta), m.dim()))
            .collect(),
        ..f.clone()
    }
}

/// Static participation factors: every device is assigned a constant share
/// equal to its nominal DC gain; band/high-pass devices get zero. Device
/// bandwidth limits are ignored by construction.
pub struct StaticFactors;

impl Disaggregation for StaticFactors {
    fn name(&self) -> &'static str {
        "spf"
    }

    fn adaptive(&self) -> bool {
        false
    }

    fn build(&self, inp: &ChannelInputs) -> Result<Vec<Adpf>> {
        let mut out = Vec::new();
        for f in inp.fixed {
            let dc = f.dc_gain_expr().eval(inp.theta_nominal);
            out.push(constant_factor(f, dc, inp.dim));
        }
        // the high-pass remainder inherits whatever DC budget the fixed
        // and low-pass shares leave over
        let hpf_dc: f64 = 1.0
            - inp
                .fixed
                .iter()
                .map(|f| f.dc_gain_expr().eval(inp.theta_nominal))
                .sum::<f64>()
            - inp
                .controllables
                .iter()
                .filter(|c| c.kind == ParticipationKind::Lpf)
                .filter_map(|c| c.theta_index)
                .map(|g| inp.theta_nominal[g])
                .sum::<f64>();
        for c in inp.controllables {
            let value = match c.kind {
                ParticipationKind::Lpf => {
                    let idx = c.theta_index.ok_or_else(|| {
                        Error::Config(format!("device {} missing gain index", c.device))
                    })?;
                    inp.theta_nominal[idx]
                }
                ParticipationKind::Hpf => hpf_dc,
                _ => 0.0,
            };
            let template = Adpf {
                device: c.device.clone(),
                channel: inp.channel,
                kind: c.kind,
                tau: 0.0,
                theta_index: None,
                tf_basis: vec![],
                mix: vec![],
            };
            out.push(constant_factor(&template, value, inp.dim));
        }
        Ok(out)
    }
}

/// Dynamic participation factors: the descending time-constant sort with
/// the DC gains frozen at their nominal allocation.
pub struct DynamicFactors;

impl Disaggregation for DynamicFactors {
    fn name(&self) -> &'static str {
        "dpf"
    }

    fn adaptive(&self) -> bool {
        false
    }

    fn build(&self, inp: &ChannelInputs) -> Result<Vec<Adpf>> {
        let ctrl = sort_algorithm(
            inp.channel,
            inp.fixed,
            inp.controllables,
            inp.tau_c,
            inp.dim,
        )?;
        let mut out: Vec<Adpf> = inp.fixed.to_vec();
        out.extend(ctrl.iter().map(|f| freeze(f, inp.theta_nominal)));
        Ok(out)
    }
}

/// Adaptive dynamic participation factors: the descending time-constant
/// sort with the low-pass DC gains left as free parameters.
pub struct AdaptiveFactors;

impl Disaggregation for AdaptiveFactors {
    fn name(&self) -> &'static str {
        "adpf"
    }

    fn adaptive(&self) -> bool {
        true
    }

    fn build(&self, inp: &ChannelInputs) -> Result<Vec<Adpf>> {
        let ctrl = sort_algorithm(
            inp.channel,
            inp.fixed,
            inp.controllables,
            inp.tau_c,
            inp.dim,
        )?;
        let mut out: Vec<Adpf> = inp.fixed.to_vec();
        out.extend(ctrl);
        Ok(out)
    }
}

/// Gains are held at their design values.
pub struct Hold;

impl Adaptation for Hold {
    fn name(&self) -> &'static str {
        "none"
    }

    fn on_event(&mut self, _theta: &mut [f64], _y: &[f64], _fixed_dc: f64) -> Result<()> {
        Ok(())
    }

    fn step(&mut self, _theta: &mut [f64], _y: &[f64], _dt: f64) -> Result<()> {
        Ok(())
    }
}

/// Broadcast re-allocation: on every capacity event the operator solves the
/// closed-form allocation and pushes the result to all devices.
pub struct Centralized;

impl Adaptation for Centralized {
    fn name(&self) -> &'static str {
        "centralized"
    }

    fn on_event(&mut self, theta: &mut [f64], y: &[f64], fixed_dc: f64) -> Result<()> {
        let alloc = allocate(y, fixed_dc)?;
        theta.copy_from_slice(&alloc);
        Ok(())
    }

    fn step(&mut self, _theta: &mut [f64], _y: &[f64], _dt: f64) -> Result<()> {
        Ok(())
    }
}

/// Peer-to-peer consensus filter tracking the allocation through local
/// exchanges of gains and capacities.
pub struct Consensus {
    graph: CommGraph,
}

impl Consensus {
    pub fn new(graph: CommGraph) -> Self {
        Consensus { graph }
    }
}

impl Adaptation for Consensus {
    fn name(&self) -> &'static str {
        "consensus"
    }

    /// Capacity changes reach the filter through its dynamics; gains stuck
    /// on devices that lost all capacity are shifted to the remaining ones
    /// so the conserved total is not trapped.
    fn on_event(&mut self, theta: &mut [f64], y: &[f64], _fixed_dc: f64) -> Result<()> {
        if y.len() != theta.len() {
            return Err(Error::DimensionMismatch("consensus node count".into()));
        }
        let trapped: f64 = theta
            .iter()
            .zip(y)
            .filter(|(_, &yi)| yi == 0.0)
            .map(|(t, _)| *t)
            .sum();
        if trapped > 0.0 {
            let live: Vec<usize> = (0..y.len()).filter(|&i| y[i] > 0.0).collect();
            if live.is_empty() {
                return Err(Error::NoCapacity);
            }
            let share = trapped / live.len() as f64;
            for i in 0..y.len() {
                if y[i] == 0.0 {
                    theta[i] = 0.0;
                } else {
                    theta[i] += share;
                }
            }
        }
        Ok(())
    }

    fn step(&mut self, theta: &mut [f64], y: &[f64], dt: f64) -> Result<()> {
        if y.len() != self.graph.n_nodes || theta.len() != self.graph.n_nodes {
            return Err(Error::DimensionMismatch("consensus node count".into()));
        }
        let bound = consensus_dt_bound(&self.graph, y);
        if !(dt > 0.0) || dt >= bound {
            return Err(Error::ConsensusStepTooLarge { dt, bound });
        }
        let adj = relay_adjacency(&self.graph, y);
        let rate = consensus_rate(&adj, y, theta);
        for (t, r) in theta.iter_mut().zip(&rate) {
            *t += dt * r;
        }
        Ok(())
    }
}

type AdaptationFactory = fn(&AdaptationSpec) -> Result<Box<dyn Adaptation>>;

/// Name-indexed registry of disaggregation strategies and adaptation modes.
pub struct Registry {
    disaggregations: BTreeMap<String, Box<dyn Disaggregation>>,
    adaptations: BTreeMap<String, AdaptationFactory>,
}

impl Default for Registry {
    fn default() -> Self {
        let mut reg = Registry {
            disaggregations: BTreeMap::new(),
            adaptations: BTreeMap::new(),
        };
        reg.register_disaggregation(Box::new(StaticFactors));
        reg.register_disaggregation(Box::new(DynamicFactors));
        reg.register_disaggregation(Box::new(AdaptiveFactors));
        reg.register_adaptation("none", |_| Ok(Box::new(Hold)));
        reg.register_adaptation("centralized", |_| Ok(Box::new(Centralized)));
        reg.register_adaptation("consensus", |spec| {
            let graph = match &spec.edges {
                Some(edges) => CommGraph::new(spec.n_nodes, edges.clone())?,
                None => CommGraph::line(spec.n_nodes),
            };
            Ok(Box::new(Consensus::new(graph)))
        });
        reg
    }
}

impl Registry {
    pub fn register_disaggregation(&mut self, strategy: Box<dyn Disaggregation>) {
        self.disaggregations
            .insert(strategy.name().to_string(), strategy);
    }

    pub fn register_adaptation(&mut self, name: &str, factory: AdaptationFactory) {
        self.adaptations.insert(name.to_string(), factory);
    }

    pub fn disaggregation(&self, name: &str) -> Result<&dyn Disaggregation> {
        self.disaggregations
            .get(name)
            .map(|b| b.as_ref())
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown disaggregation strategy '{name}' (known: {})",
                    self.disaggregation_names().join(", ")
                ))
            })
    }

    pub fn adaptation(&self, name: &str, spec: &AdaptationSpec) -> Result<Box<dyn Adaptation>> {
        let factory = self.adaptations.get(name).ok_or_else(|| {
            Error::Config(format!(
                "unknown adaptation mode '{name}' (known: {})",
                self.adaptation_names().join(", ")
            ))
        })?;
        factory(spec)
    }

    pub fn disaggregation_names(&self) -> Vec<String> {
        self.disaggregations.keys().cloned().collect()
    }

    pub fn adaptation_names(&self) -> Vec<String> {
        self.adaptations.keys().cloned().collect()
    }
}
