//! Batch front end: `design`, `verify`, `simulate`, `bode`, `consensus`,
//! and `compare` commands over a JSON fleet configuration, with
//! machine-readable JSON/CSV outputs written atomically.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adpf::{participation_residual, Adpf, ThetaBox};
use crate::alloc::{allocate, consensus_dt_bound, consensus_simulate, CommGraph};
use crate::config::Config;
use crate::fleet::{design_with, FleetDesign, FleetSpec};
use crate::lintf::FreqGrid;
use crate::sim::{metrics, simulate, AdaptationMode, Metrics, Scenario, SimTrace};
use crate::strategy::Registry;
use crate::synth::{brl_validate, certificate_residuals, ControllerSet, Tuning};
use crate::{Error, Result};

#[derive(Parser)]
#[command(name = "dvpp", version, about = "Design and verify dynamic virtual power plants")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args)]
pub struct CommonArgs {
    /// Fleet configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (created if missing).
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Seed for the randomized verification samples.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of frequency-grid points.
    #[arg(long, default_value_t = 400)]
    pub grid: usize,
    /// Check the unrelaxed participation condition (sum of factors equal
    /// to one, no measurement-bandwidth roll-off).
    #[arg(long, default_value_t = false)]
    pub strict_participation: bool,
}

#[derive(Subcommand)]
pub enum Command {
    /// Synthesize participation factors and vertex controllers.
    Design(CommonArgs),
    /// Check participation residuals, certificates, and frozen-gain norms.
    Verify(CommonArgs),
    /// Run the configured scenario and write the trace and metrics.
    Simulate(CommonArgs),
    /// Frequency responses of the participation factors at nominal gains.
    Bode(CommonArgs),
    /// Consensus re-dispatch trajectory after the configured capacity events.
    Consensus(CommonArgs),
    /// Side-by-side static/dynamic/adaptive runs of the same scenario.
    Compare(CommonArgs),
}

/// Map an error to the process exit code: 2 configuration/usage, 3 design
/// infeasibility or failed verification, 4 runtime failure.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Usage(_) | Error::Io(_) | Error::DimensionMismatch(_) => 2,
        Error::SynthesisInfeasible(_)
        | Error::FixedDeviceTooFast
        | Error::InfeasibleParticipationOrder(_)
        | Error::MissingHpf(_)
        | Error::NonAffineParticipation
        | Error::VertexExplosion(_)
        | Error::ImproperTransferFunction
        | Error::SingularTransferFunction => 3,
        _ => 4,
    }
}

/// Run a parsed command; returns the exit code.
pub fn run(cli: Cli) -> i32 {
    let (name, args) = match &cli.command {
        Command::Design(a) => ("design", a),
        Command::Verify(a) => ("verify", a),
        Command::Simulate(a) => ("simulate", a),
        Command::Bode(a) => ("bode", a),
        Command::Consensus(a) => ("consensus", a),
        Command::Compare(a) => ("compare", a),
    };
    match dispatch(name, args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(name: &str, args: &CommonArgs) -> Result<()> {
    std::fs::create_dir_all(&args.out)?;
    let cfg = Config::from_path(&args.config)?;
    let spec = cfg.to_fleet_spec()?;
    let registry = Registry::default();
    match name {
        "design" => cmd_design(&cfg, &spec, &registry, args),
        "verify" => cmd_verify(&cfg, &spec, &registry, args),
        "simulate" => cmd_simulate(&cfg, &spec, &registry, args),
        "bode" => cmd_bode(&spec, &registry, args),
        "consensus" => cmd_consensus(&cfg, &spec, &registry, args),
        "compare" => cmd_compare(&cfg, &spec, &registry, args),
        _ => unreachable!(),
    }
}

// ---------------------------------------------------------------- storage

#[derive(Serialize, Deserialize)]
struct MatrixDoc {
    rows: usize,
    cols: usize,
    /// Row-major entries.
    data: Vec<f64>,
}

impl MatrixDoc {
    fn from(m: &DMatrix<f64>) -> Self {
        MatrixDoc {
            rows: m.nrows(),
            cols: m.ncols(),
            data: (0..m.nrows())
                .flat_map(|i| (0..m.ncols()).map(move |j| (i, j)))
                .map(|(i, j)| m[(i, j)])
                .collect(),
        }
    }

    fn to_matrix(&self) -> Result<DMatrix<f64>> {
        if self.data.len() != self.rows * self.cols {
            return Err(Error::Config("matrix entry count mismatch".into()));
        }
        Ok(DMatrix::from_row_slice(self.rows, self.cols, &self.data))
    }
}

#[derive(Serialize, Deserialize)]
struct ControllerDoc {
    device: String,
    gamma: f64,
    q: MatrixDoc,
    y: Vec<MatrixDoc>,
    k: Vec<MatrixDoc>,
    vertices: Vec<Vec<f64>>,
    mu: f64,
    alpha: f64,
    zeta: Vec<(usize, f64)>,
    box_names: Vec<String>,
    box_lo: Vec<f64>,
    box_hi: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct DesignDoc {
    version: u32,
    fleet: String,
    strategy: String,
    theta_names: Vec<String>,
    theta_nominal: Vec<f64>,
    theta_lo: Vec<f64>,
    theta_hi: Vec<f64>,
    /// Fixed devices carry their own response; listed for completeness.
    fixed_devices: Vec<String>,
    controllers: Vec<ControllerDoc>,
}

impl DesignDoc {
    fn from_design(d: &FleetDesign, fleet: &str) -> Self {
        DesignDoc {
            version: 1,
            fleet: fleet.to_string(),
            strategy: d.strategy.clone(),
            theta_names: d.global_box.names.clone(),
            theta_nominal: d.theta_nominal.clone(),
            theta_lo: d.global_box.lo.clone(),
            theta_hi: d.global_box.hi.clone(),
            fixed_devices: d.fixed.iter().map(|f| f.name.clone()).collect(),
            controllers: d
                .devices
                .iter()
                .map(|dev| ControllerDoc {
                    device: dev.name.clone(),
                    gamma: dev.controller.gamma,
                    q: MatrixDoc::from(&dev.controller.q),
                    y: dev.controller.y.iter().map(MatrixDoc::from).collect(),
                    k: dev.controller.k.iter().map(MatrixDoc::from).collect(),
                    vertices: dev.controller.vertices.clone(),
                    mu: dev.controller.tuning.mu,
                    alpha: dev.controller.tuning.alpha,
                    zeta: dev.controller.tuning.zeta.clone(),
                    box_names: dev.local_box.names.clone(),
                    box_lo: dev.local_box.lo.clone(),
                    box_hi: dev.local_box.hi.clone(),
                })
                .collect(),
        }
    }

    fn to_controllers(&self) -> Result<BTreeMap<String, ControllerSet>> {
        let mut out = BTreeMap::new();
        for c in &self.controllers {
            out.insert(
                c.device.clone(),
                ControllerSet {
                    q: c.q.to_matrix()?,
                    y: c.y.iter().map(|m| m.to_matrix()).collect::<Result<_>>()?,
                    k: c.k.iter().map(|m| m.to_matrix()).collect::<Result<_>>()?,
                    gamma: c.gamma,
                    tuning: Tuning {
                        mu: c.mu,
                        alpha: c.alpha,
                        zeta: c.zeta.clone(),
                    },
                    vertices: c.vertices.clone(),
                },
            );
        }
        Ok(out)
    }
}

fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Config(format!("serialize: {e}")))?;
    write_atomic(path, &(text + "\n"))
}

/// Build the design, reusing controllers from a prior `design` run when a
/// design document exists in the output directory.
fn load_or_design(
    spec: &FleetSpec,
    registry: &Registry,
    strategy: &str,
    out: &Path,
) -> Result<FleetDesign> {
    let path = out.join("design.json");
    if path.exists() {
        let text = std::fs::read_to_string(&path)?;
        let doc: DesignDoc =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("design.json: {e}")))?;
        if doc.strategy == strategy && doc.fleet == spec.name {
            let stored = doc.to_controllers()?;
            return design_with(spec, registry, strategy, Some(&stored));
        }
    }
    design_with(spec, registry, strategy, None)
}

// ---------------------------------------------------------------- commands

fn cmd_design(
    _cfg: &Config,
    spec: &FleetSpec,
    registry: &Registry,
    args: &CommonArgs,
) -> Result<()> {
    let dsn = design_with(spec, registry, "adpf", None)?;
    let doc = DesignDoc::from_design(&dsn, &spec.name);
    write_json(&args.out.join("design.json"), &doc)?;
    for dev in &dsn.devices {
        println!(
            "designed {}: gamma = {:.6e}, {} vertices",
            dev.name,
            dev.controller.gamma,
            dev.controller.vertices.len()
        );
    }
    for f in &dsn.fixed {
        println!("fixed {}: assigned its installed response", f.name);
    }
    println!("wrote {}", args.out.join("design.json").display());
    Ok(())
}

fn sample_box(rng: &mut ChaCha8Rng, bx: &ThetaBox) -> Vec<f64> {
    (0..bx.dim())
        .map(|j| rng.gen_range(0.0..=1.0) * (bx.hi[j] - bx.lo[j]) + bx.lo[j])
        .collect()
}

#[derive(Serialize)]
struct VerifyDeviceReport {
    device: String,
    gamma: f64,
    max_certificate_residual: f64,
    brl_samples: usize,
    brl_failures: usize,
    max_hinf: f64,
}

#[derive(Serialize)]
struct VerifyReport {
    strategy: String,
    strict_participation: bool,
    participation_samples: usize,
    max_participation_residual_fp: f64,
    max_participation_residual_vq: Option<f64>,
    devices: Vec<VerifyDeviceReport>,
    pass: bool,
}

fn cmd_verify(
    _cfg: &Config,
    spec: &FleetSpec,
    registry: &Registry,
    args: &CommonArgs,
) -> Result<()> {
    let dsn = load_or_design(spec, registry, "adpf", &args.out)?;
    let grid = FreqGrid::log_spaced(1e-3, 1e3, args.grid.max(2));
    let tau_c = if args.strict_participation { 0.0 } else { dsn.tau_c };
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);

    let n_samples = 20;
    let residual = |factors: &[Adpf], rng: &mut ChaCha8Rng| -> f64 {
        let mut worst: f64 = 0.0;
        for _ in 0..n_samples {
            let th = sample_box(rng, &dsn.global_box);
            worst = worst.max(participation_residual(factors, &th, tau_c, &grid));
        }
        worst
    };
    let res_fp = residual(&dsn.factors_fp, &mut rng);
    let res_vq = if dsn.factors_vq.is_empty() {
        None
    } else {
        Some(residual(&dsn.factors_vq, &mut rng))
    };

    let mut devices = Vec::new();
    let mut pass = res_fp <= 1e-9 && res_vq.unwrap_or(0.0) <= 1e-9;
    for dev in &dsn.devices {
        let cert = certificate_residuals(&dev.aug, &dev.controller)?;
        let max_cert = cert.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let samples: Vec<Vec<f64>> = (0..25).map(|_| sample_box(&mut rng, &dev.local_box)).collect();
        let brl = brl_validate(&dev.controller, &dev.aug, &samples)?;
        let failures = brl
            .samples
            .iter()
            .filter(|s| !(s.hurwitz && s.brl_ok && s.hinf_ok))
            .count();
        let max_hinf = brl
            .samples
            .iter()
            .filter_map(|s| s.hinf)
            .fold(0.0f64, f64::max);
        pass &= max_cert <= -5e-9 && failures == 0;
        println!(
            "verify {}: gamma {:.6e}, max cert residual {:.3e}, brl failures {}/{}",
            dev.name,
            dev.controller.gamma,
            max_cert,
            failures,
            brl.samples.len()
        );
        devices.push(VerifyDeviceReport {
            device: dev.name.clone(),
            gamma: dev.controller.gamma,
            max_certificate_residual: max_cert,
            brl_samples: brl.samples.len(),
            brl_failures: failures,
            max_hinf,
        });
    }
    println!(
        "participation residual fp {:.3e}{}",
        res_fp,
        res_vq
            .map(|v| format!(", vq {v:.3e}"))
            .unwrap_or_default()
    );
    let report = VerifyReport {
        strategy: dsn.strategy.clone(),
        strict_participation: args.strict_participation,
        participation_samples: n_samples,
        max_participation_residual_fp: res_fp,
        max_participation_residual_vq: res_vq,
        devices,
        pass,
    };
    write_json(&args.out.join("verify.json"), &report)?;
    if !pass {
        return Err(Error::SynthesisInfeasible(
            "verification failed; see verify.json".into(),
        ));
    }
    println!("verification passed");
    Ok(())
}

fn scenario_of(cfg: &Config) -> Result<Scenario> {
    cfg.to_scenario()?
        .ok_or_else(|| Error::Config("config has no scenario section".into()))
}

fn trace_csv(trace: &SimTrace) -> String {
    let mut s = String::new();
    s.push_str("t_s,df_pu,dv_pu");
    for d in &trace.device_names {
        let _ = write!(s, ",dp_{d}_pu,dq_{d}_pu,dp_ref_{d}_pu,eps_{d}_pu");
    }
    for p in &trace.theta_names {
        let _ = write!(s, ",theta_{p}");
    }
    s.push('\n');
    for k in 0..trace.t.len() {
        let _ = write!(s, "{},{},{}", trace.t[k], trace.df[k], trace.dv[k]);
        for i in 0..trace.device_names.len() {
            let _ = write!(
                s,
                ",{},{},{},{}",
                trace.dp[i][k], trace.dq[i][k], trace.dp_ref[i][k], trace.eps[i][k]
            );
        }
        for col in &trace.theta {
            let _ = write!(s, ",{}", col[k]);
        }
        s.push('\n');
    }
    s
}

#[derive(Serialize)]
struct MetricsDoc {
    nadir_pu: f64,
    settling_time_s: Option<f64>,
    steady_state_df_pu: f64,
    rms_eps: BTreeMap<String, f64>,
}

impl MetricsDoc {
    fn from(m: &Metrics) -> Self {
        MetricsDoc {
            nadir_pu: m.nadir_pu,
            settling_time_s: m.settling_time_s,
            steady_state_df_pu: m.steady_state_df_pu,
            rms_eps: m.rms_eps.iter().cloned().collect(),
        }
    }
}

fn cmd_simulate(
    cfg: &Config,
    spec: &FleetSpec,
    registry: &Registry,
    args: &CommonArgs,
) -> Result<()> {
    let scenario = scenario_of(cfg)?;
    let dsn = load_or_design(spec, registry, "adpf", &args.out)?;
    let trace = simulate(spec, &dsn, &scenario, registry)?;
    let m = metrics(&trace);
    write_atomic(&args.out.join("trace.csv"), &trace_csv(&trace))?;
    write_json(&args.out.join("metrics.json"), &MetricsDoc::from(&m))?;
    println!(
        "simulated {:.1} s: nadir {:.4e} pu, steady-state df {:.4e} pu",
        scenario.horizon, m.nadir_pu, m.steady_state_df_pu
    );
    println!("wrote {}", args.out.join("trace.csv").display());
    Ok(())
}

fn cmd_bode(spec: &FleetSpec, registry: &Registry, args: &CommonArgs) -> Result<()> {
    let dsn = load_or_design(spec, registry, "adpf", &args.out)?;
    let grid = FreqGrid::log_spaced(1e-3, 1e3, args.grid.max(2));
    let mut s = String::from("omega_rad_s");
    let channels: Vec<(&str, &Vec<Adpf>)> = if dsn.factors_vq.is_empty() {
        vec![("fp", &dsn.factors_fp)]
    } else {
        vec![("fp", &dsn.factors_fp), ("vq", &dsn.factors_vq)]
    };
    for (ch, factors) in &channels {
        for f in factors.iter() {
            let _ = write!(s, ",mag_{}_{ch},phase_{}_{ch}_deg", f.device, f.device);
        }
    }
    s.push('\n');
    for &omega in &grid.omegas {
        let _ = write!(s, "{omega}");
        for (_, factors) in &channels {
            for f in factors.iter() {
                let v = f.eval(
                    num_complex::Complex64::new(0.0, omega),
                    &dsn.theta_nominal,
                );
                let _ = write!(s, ",{},{}", v.norm(), v.arg().to_degrees());
            }
        }
        s.push('\n');
    }
    write_atomic(&args.out.join("bode.csv"), &s)?;
    println!("wrote {}", args.out.join("bode.csv").display());
    Ok(())
}

fn cmd_consensus(
    cfg: &Config,
    spec: &FleetSpec,
    registry: &Registry,
    args: &CommonArgs,
) -> Result<()> {
    let scenario = scenario_of(cfg)?;
    let dsn = load_or_design(spec, registry, "adpf", &args.out)?;
    let nodes = &dsn.fp.nodes;
    if nodes.is_empty() {
        return Err(Error::Config(
            "fleet has no capacity-sharing devices on the frequency channel".into(),
        ));
    }
    // capacities after the configured events, in node order
    let mut p_max = spec.nominal_p_capacity();
    for ev in &scenario.capacity_events {
        p_max[spec.device_index(&ev.device)?] = ev.p_max_mw;
    }
    let y: Vec<f64> = nodes
        .iter()
        .map(|n| Ok(p_max[spec.device_index(&n.device)?] / spec.base_mva))
        .collect::<Result<_>>()?;
    // pre-event shares as the starting point of the re-dispatch
    let lpf_sum: f64 = nodes
        .iter()
        .filter_map(|n| n.theta_index)
        .map(|g| dsn.theta_nominal[g])
        .sum();
    let theta0: Vec<f64> = nodes
        .iter()
        .map(|n| match n.theta_index {
            Some(g) => dsn.theta_nominal[g],
            None => 1.0 - dsn.fp.fixed_dc - lpf_sum,
        })
        .collect();
    let graph = match &scenario.adaptation {
        AdaptationMode::Consensus { edges: Some(e) } => CommGraph::new(nodes.len(), e.clone())?,
        _ => CommGraph::line(nodes.len()),
    };
    let bound = consensus_dt_bound(&graph, &y);
    let dt = scenario.dt.min(0.5 * bound);
    let trace = consensus_simulate(&graph, &y, &theta0, dt, scenario.horizon)?;
    let mut s = String::from("t_s");
    for n in nodes {
        let _ = write!(s, ",theta_{}_fp", n.device);
    }
    s.push('\n');
    for (k, t) in trace.t.iter().enumerate() {
        let _ = write!(s, "{t}");
        for v in &trace.theta[k] {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    write_atomic(&args.out.join("consensus.csv"), &s)?;
    let target = allocate(&y, dsn.fp.fixed_dc)?;
    let worst = trace
        .theta
        .last()
        .map(|th| {
            th.iter()
                .zip(&target)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max)
        })
        .unwrap_or(f64::NAN);
    println!(
        "consensus re-dispatch over {} nodes (dt {:.3e}, stability bound {:.3e}): final gap to allocation {:.3e}",
        nodes.len(),
        dt,
        bound,
        worst
    );
    println!("wrote {}", args.out.join("consensus.csv").display());
    Ok(())
}

#[derive(Serialize)]
struct CompareModeDoc {
    strategy: String,
    adaptation: String,
    steady_state_df_pu: f64,
    nadir_pu: f64,
    rms_eps_total: f64,
    rms_eps: BTreeMap<String, f64>,
}

fn rms_all(trace: &SimTrace) -> f64 {
    let mut ss = 0.0;
    let mut n = 0usize;
    for col in &trace.eps {
        for v in col {
            ss += v * v;
            n += 1;
        }
    }
    (ss / n.max(1) as f64).sqrt()
}

fn cmd_compare(
    cfg: &Config,
    spec: &FleetSpec,
    registry: &Registry,
    args: &CommonArgs,
) -> Result<()> {
    let base_scenario = scenario_of(cfg)?;
    let modes: [(&str, AdaptationMode); 3] = [
        ("spf", AdaptationMode::None),
        ("dpf", AdaptationMode::None),
        ("adpf", AdaptationMode::Centralized),
    ];
    let mut traces: Vec<(String, SimTrace)> = Vec::new();
    let mut docs = Vec::new();
    for (strategy, adaptation) in modes {
        let dsn = design_with(spec, registry, strategy, None)?;
        let mut sc = base_scenario.clone();
        sc.adaptation = adaptation.clone();
        let trace = simulate(spec, &dsn, &sc, registry)?;
        let m = metrics(&trace);
        println!(
            "{strategy} ({}): steady-state df {:.4e} pu, rms eps {:.4e}",
            adaptation.name(),
            m.steady_state_df_pu,
            rms_all(&trace)
        );
        docs.push(CompareModeDoc {
            strategy: strategy.to_string(),
            adaptation: adaptation.name().to_string(),
            steady_state_df_pu: m.steady_state_df_pu,
            nadir_pu: m.nadir_pu,
            rms_eps_total: rms_all(&trace),
            rms_eps: m.rms_eps.iter().cloned().collect(),
        });
        traces.push((strategy.to_string(), trace));
    }
    let mut s = String::from("t_s");
    for (name, _) in &traces {
        let _ = write!(s, ",df_{name}_pu");
    }
    s.push('\n');
    let n = traces[0].1.t.len();
    for k in 0..n {
        let _ = write!(s, "{}", traces[0].1.t[k]);
        for (_, tr) in &traces {
            let _ = write!(s, ",{}", tr.df[k]);
        }
        s.push('\n');
    }
    write_atomic(&args.out.join("compare.csv"), &s)?;
    write_json(&args.out.join("compare.json"), &docs)?;
    println!("wrote {}", args.out.join("compare.csv").display());
    Ok(())
}
