//! JSON configuration schema: fleet description plus an optional scenario.
//! Unknown keys are rejected so typos fail loudly instead of being ignored.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adpf::ParticipationKind;
use crate::fleet::{CapacityInterval, DeviceRole, DeviceSpec, FleetSpec, PartSpec};
use crate::plant::{ConverterParams, DesiredKind, HydroParams};
use crate::sim::{
    AdaptationMode, CapacityEvent, Disturbance, GridModel, Integrator, Scenario,
};
use crate::{Error, Result};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub version: u32,
    pub name: String,
    pub base_mva: f64,
    pub tau_c_s: f64,
    pub desired: DesiredCfg,
    pub tuning: TuningCfg,
    #[serde(default)]
    pub converter: ConverterCfg,
    pub devices: Vec<DeviceCfg>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<ScenarioCfg>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DesiredCfg {
    /// First-order droop `-d / (tau s + 1)` on the frequency channel.
    Droop { d: f64, tau_s: f64 },
    /// Inertia-plus-droop frequency channel with a droop voltage channel.
    InertiaDroop {
        d_p: f64,
        h_p: f64,
        tau_p_s: f64,
        d_q: f64,
        tau_q_s: f64,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuningCfg {
    /// Transient input-energy bound (pu).
    pub mu: f64,
    /// Disturbance-ellipsoid scaling of the constraint certificates.
    pub alpha: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConverterCfg {
    pub l_f: f64,
    pub omega_b: f64,
    pub k_p_i: f64,
    pub k_i_i: f64,
    pub v_star: f64,
    pub tau_dc_s: f64,
}

impl Default for ConverterCfg {
    fn default() -> Self {
        ConverterCfg {
            l_f: 0.0942,
            omega_b: 2.0 * std::f64::consts::PI * 50.0,
            k_p_i: 0.73,
            k_i_i: 1.19,
            v_star: 1.0,
            tau_dc_s: 0.2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "role", rename_all = "snake_case", deny_unknown_fields)]
pub enum DeviceCfg {
    /// Governor/turbine-controlled hydro plant (not re-designed).
    Hydro {
        name: String,
        rating_mva: f64,
        r_g: f64,
        r_t: f64,
        tau_g_s: f64,
        tau_r_s: f64,
        tau_w_s: f64,
    },
    /// Converter-interfaced device under matching control.
    Converter {
        name: String,
        rating_mva: f64,
        fp: ParticipationCfg,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        vq: Option<ParticipationCfg>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        source_tau_s: Option<f64>,
        /// Active-power capacity range `[lo, hi]` (MW).
        p_capacity_mw: [f64; 2],
        /// Integral-state bounds, one per participating channel (pu).
        zeta: Vec<f64>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ParticipationCfg {
    /// Steady share rolling off at `tau_s`.
    LowPass { tau_s: f64 },
    /// Mid-frequency share with optional sharpening order `d`.
    BandPass {
        tau_s: f64,
        #[serde(default)]
        d: usize,
    },
    /// Fast remainder closing the chain at the measurement bandwidth.
    HighPass {},
}

impl ParticipationCfg {
    fn to_part(&self) -> PartSpec {
        match self {
            ParticipationCfg::LowPass { tau_s } => PartSpec {
                kind: ParticipationKind::Lpf,
                tau: *tau_s,
                d: 0,
            },
            ParticipationCfg::BandPass { tau_s, d } => PartSpec {
                kind: ParticipationKind::Bpf,
                tau: *tau_s,
                d: *d,
            },
            ParticipationCfg::HighPass {} => PartSpec {
                kind: ParticipationKind::Hpf,
                tau: 0.0,
                d: 0,
            },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioCfg {
    #[serde(default = "default_dt")]
    pub dt_s: f64,
    pub horizon_s: f64,
    #[serde(default)]
    pub integrator: IntegratorCfg,
    #[serde(default)]
    pub grid: GridCfg,
    #[serde(default)]
    pub disturbances: Vec<DisturbanceCfg>,
    #[serde(default)]
    pub capacity_events: Vec<CapacityEventCfg>,
    #[serde(default)]
    pub adaptation: AdaptationCfg,
}

fn default_dt() -> f64 {
    1e-3
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntegratorCfg {
    #[default]
    Rk4,
    Expm,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case", deny_unknown_fields)]
pub enum GridCfg {
    /// Frequency/voltage deviations are exogenous inputs.
    OpenLoop,
    /// Aggregated swing surrogate closing the loop around the fleet.
    Surrogate {
        #[serde(default = "default_h_g")]
        h_g: f64,
        #[serde(default = "default_d_load")]
        d_load: f64,
        #[serde(default = "default_v_sens")]
        v_sens: f64,
    },
}

fn default_h_g() -> f64 {
    4.0
}
fn default_d_load() -> f64 {
    1.0
}
fn default_v_sens() -> f64 {
    0.05
}

impl Default for GridCfg {
    fn default() -> Self {
        GridCfg::Surrogate {
            h_g: default_h_g(),
            d_load: default_d_load(),
            v_sens: default_v_sens(),
        }
    }
}

/// Held level taking effect at `t_s`. Under the surrogate grid the fields
/// are load steps in MW / MVAr; open loop they are pu deviations.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisturbanceCfg {
    pub t_s: f64,
    #[serde(default)]
    pub dp_mw: f64,
    #[serde(default)]
    pub dq_mvar: f64,
    #[serde(default)]
    pub df_pu: f64,
    #[serde(default)]
    pub dv_pu: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CapacityEventCfg {
    pub t_s: f64,
    pub device: String,
    pub p_max_mw: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum AdaptationCfg {
    #[default]
    None,
    Centralized,
    Consensus {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        edges: Option<Vec<(usize, usize)>>,
    },
}

impl Config {
    pub fn from_path(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Io(std::io::Error::new(
                e.kind(),
                format!("{}: {e}", path.display()),
            ))
        })?;
        Config::from_str(&text)
    }

    pub fn from_str(text: &str) -> Result<Config> {
        let cfg: Config =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        if cfg.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                cfg.version
            )));
        }
        Ok(cfg)
    }

    /// Lower the parsed document into a validated fleet description.
    pub fn to_fleet_spec(&self) -> Result<FleetSpec> {
        let desired = match &self.desired {
            DesiredCfg::Droop { d, tau_s } => DesiredKind::Droop {
                d: *d,
                tau: *tau_s,
            },
            DesiredCfg::InertiaDroop {
                d_p,
                h_p,
                tau_p_s,
                d_q,
                tau_q_s,
            } => DesiredKind::InertiaDroop {
                d_p: *d_p,
                h_p: *h_p,
                tau_p: *tau_p_s,
                d_q: *d_q,
                tau_q: *tau_q_s,
            },
        };
        let converter = ConverterParams {
            l_f: self.converter.l_f,
            omega_b: self.converter.omega_b,
            k_p_i: self.converter.k_p_i,
            k_i_i: self.converter.k_i_i,
            v_star: self.converter.v_star,
            tau_dc: self.converter.tau_dc_s,
            tau_c: self.tau_c_s,
        };
        let devices = self
            .devices
            .iter()
            .map(|d| match d {
                DeviceCfg::Hydro {
                    name,
                    rating_mva,
                    r_g,
                    r_t,
                    tau_g_s,
                    tau_r_s,
                    tau_w_s,
                } => DeviceSpec {
                    name: name.clone(),
                    rating_mva: *rating_mva,
                    role: DeviceRole::FixedHydro {
                        params: HydroParams {
                            r_g: *r_g,
                            r_t: *r_t,
                            tau_g: *tau_g_s,
                            tau_r: *tau_r_s,
                            tau_w: *tau_w_s,
                        },
                    },
                },
                DeviceCfg::Converter {
                    name,
                    rating_mva,
                    fp,
                    vq,
                    source_tau_s,
                    p_capacity_mw,
                    zeta,
                } => DeviceSpec {
                    name: name.clone(),
                    rating_mva: *rating_mva,
                    role: DeviceRole::Converter {
                        fp: Some(fp.to_part()),
                        vq: vq.as_ref().map(|v| v.to_part()),
                        source_tau: *source_tau_s,
                        p_capacity: CapacityInterval {
                            lo_mw: p_capacity_mw[0],
                            hi_mw: p_capacity_mw[1],
                        },
                        zeta: zeta.clone(),
                    },
                },
            })
            .collect();
        let spec = FleetSpec {
            name: self.name.clone(),
            base_mva: self.base_mva,
            tau_c: self.tau_c_s,
            desired,
            converter,
            mu: self.tuning.mu,
            alpha: self.tuning.alpha,
            devices,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Lower the optional scenario section, converting MW/MVAr to pu.
    pub fn to_scenario(&self) -> Result<Option<Scenario>> {
        let Some(sc) = &self.scenario else {
            return Ok(None);
        };
        let grid = match sc.grid {
            GridCfg::OpenLoop => GridModel::OpenLoop,
            GridCfg::Surrogate {
                h_g,
                d_load,
                v_sens,
            } => GridModel::Surrogate {
                h_g,
                d_load,
                v_sens,
            },
        };
        let open_loop = matches!(grid, GridModel::OpenLoop);
        let disturbances = sc
            .disturbances
            .iter()
            .map(|d| {
                if open_loop {
                    if d.dp_mw != 0.0 || d.dq_mvar != 0.0 {
                        return Err(Error::Config(
                            "open-loop scenarios take df_pu/dv_pu, not load steps".into(),
                        ));
                    }
                    Ok(Disturbance {
                        t: d.t_s,
                        p: d.df_pu,
                        q: d.dv_pu,
                    })
                } else {
                    if d.df_pu != 0.0 || d.dv_pu != 0.0 {
                        return Err(Error::Config(
                            "surrogate-grid scenarios take dp_mw/dq_mvar, not pu deviations"
                                .into(),
                        ));
                    }
                    Ok(Disturbance {
                        t: d.t_s,
                        p: d.dp_mw / self.base_mva,
                        q: d.dq_mvar / self.base_mva,
                    })
                }
            })
            .collect::<Result<_>>()?;
        let scenario = Scenario {
            dt: sc.dt_s,
            horizon: sc.horizon_s,
            integrator: match sc.integrator {
                IntegratorCfg::Rk4 => Integrator::Rk4,
                IntegratorCfg::Expm => Integrator::Expm,
            },
            grid,
            disturbances,
            capacity_events: sc
                .capacity_events
                .iter()
                .map(|e| CapacityEvent {
                    t: e.t_s,
                    device: e.device.clone(),
                    p_max_mw: e.p_max_mw,
                })
                .collect(),
            adaptation: match &sc.adaptation {
                AdaptationCfg::None => AdaptationMode::None,
                AdaptationCfg::Centralized => AdaptationMode::Centralized,
                AdaptationCfg::Consensus { edges } => AdaptationMode::Consensus {
                    edges: edges.clone(),
                },
            },
        };
        scenario.validate()?;
        Ok(Some(scenario))
    }
}
