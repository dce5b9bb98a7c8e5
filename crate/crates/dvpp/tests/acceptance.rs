//! Acceptance suite: one test per release criterion, each printing a single
//! PASS line with its measured runtime (visible with `--nocapture`).

use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::Instant;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dvpp::adpf::{participation_residual, ThetaBox};
use dvpp::alloc::{allocate, consensus_simulate, qp_oracle, CommGraph};
use dvpp::config::Config;
use dvpp::fleet::{design, FleetDesign, FleetSpec};
use dvpp::lintf::{zoh_discretize, FreqGrid};
use dvpp::sim::{
    metrics, simulate, AdaptationMode, CapacityEvent, Disturbance, GridModel, Integrator,
    Scenario,
};
use dvpp::strategy::Registry;
use dvpp::synth::{brl_validate, certificate_residuals, interpolation_weights};
use dvpp::Error;

fn config_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

fn load_spec(name: &str) -> FleetSpec {
    Config::from_path(&config_path(name))
        .unwrap()
        .to_fleet_spec()
        .unwrap()
}

fn shared(cell: &'static OnceLock<(FleetSpec, FleetDesign)>, cfg: &str, strategy: &str) -> &'static (FleetSpec, FleetDesign) {
    cell.get_or_init(|| {
        let spec = load_spec(cfg);
        let dsn = design(&spec, &Registry::default(), strategy).unwrap();
        (spec, dsn)
    })
}

static CASE1: OnceLock<(FleetSpec, FleetDesign)> = OnceLock::new();
static CASE2: OnceLock<(FleetSpec, FleetDesign)> = OnceLock::new();
static CASE2_DPF: OnceLock<(FleetSpec, FleetDesign)> = OnceLock::new();
static CASE2_SPF: OnceLock<(FleetSpec, FleetDesign)> = OnceLock::new();

fn case1() -> &'static (FleetSpec, FleetDesign) {
    shared(&CASE1, "case1.json", "adpf")
}
fn case2() -> &'static (FleetSpec, FleetDesign) {
    shared(&CASE2, "case2.json", "adpf")
}

fn sample_box(rng: &mut ChaCha8Rng, bx: &ThetaBox) -> Vec<f64> {
    (0..bx.dim())
        .map(|j| rng.gen_range(0.0..=1.0) * (bx.hi[j] - bx.lo[j]) + bx.lo[j])
        .collect()
}

fn report(n: usize, name: &str, t0: Instant) {
    println!("criterion {n} ({name}): PASS ({:.2} s)", t0.elapsed().as_secs_f64());
}

/// Criterion 1: the participation chain telescopes to the relaxed target
/// 1/(tau_c s + 1) across the whole frequency grid, uniformly in theta.
#[test]
fn criterion_1_participation_condition() {
    let (_, d1) = case1();
    let (_, d2) = case2();
    let t0 = Instant::now();
    let grid = FreqGrid::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for dsn in [d1, d2] {
        for _ in 0..20 {
            let th = sample_box(&mut rng, &dsn.global_box);
            let r = participation_residual(&dsn.factors_fp, &th, dsn.tau_c, &grid);
            assert!(r <= 1e-9, "fp residual {r} in {}", dsn.strategy);
            if !dsn.factors_vq.is_empty() {
                let r = participation_residual(&dsn.factors_vq, &th, dsn.tau_c, &grid);
                assert!(r <= 1e-9, "vq residual {r}");
            }
        }
    }
    assert!(t0.elapsed().as_secs_f64() < 5.0, "too slow: {:?}", t0.elapsed());
    report(1, "participation condition", t0);
}

/// Criterion 2: the closed-form allocation agrees with an independent QP
/// oracle, and reproduces the published two-device split.
#[test]
fn criterion_2_allocation_correctness() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for k in 0..100 {
        let dim = rng.gen_range(1..=5);
        let y: Vec<f64> = (0..dim).map(|_| rng.gen_range(0.0..100.0)).collect();
        let fixed_dc = if k % 2 == 0 { rng.gen_range(0.0..0.9) } else { 0.0 };
        if y.iter().sum::<f64>() <= 0.0 {
            continue;
        }
        let a = allocate(&y, fixed_dc).unwrap();
        let b = qp_oracle(&y, fixed_dc).unwrap();
        for (x, z) in a.iter().zip(&b) {
            assert!((x - z).abs() <= 1e-8, "allocate {x} vs oracle {z}");
        }
    }
    let split = allocate(&[37.0, 28.0], 0.0).unwrap();
    assert!((split[0] - 0.56923).abs() <= 1e-5, "{split:?}");
    assert!((split[1] - 0.43077).abs() <= 1e-5, "{split:?}");
    assert!(t0.elapsed().as_secs_f64() < 10.0, "too slow: {:?}", t0.elapsed());
    report(2, "allocation correctness", t0);
}

/// Criterion 3: consensus re-dispatch conserves the budget step by step,
/// converges to the closed-form allocation on connected graphs, and rejects
/// disconnected topologies.
#[test]
fn criterion_3_consensus() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10 {
        let n = rng.gen_range(2..=8usize);
        // random spanning tree plus a few extra edges
        let mut edges: Vec<(usize, usize)> = (1..n).map(|i| (rng.gen_range(0..i), i)).collect();
        for _ in 0..rng.gen_range(0..n) {
            let a = rng.gen_range(0..n);
            let b = rng.gen_range(0..n);
            if a != b {
                edges.push((a.min(b), a.max(b)));
            }
        }
        let graph = CommGraph::new(n, edges).unwrap();
        let y: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..10.0)).collect();
        let budget = rng.gen_range(0.3..1.0);
        // start from an arbitrary feasible split of the budget
        let mut theta0: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..1.0)).collect();
        let s: f64 = theta0.iter().sum();
        for v in &mut theta0 {
            *v *= budget / s;
        }
        let bound = dvpp::alloc::consensus_dt_bound(&graph, &y);
        let dt = 0.4 * bound;
        let trace = consensus_simulate(&graph, &y, &theta0, dt, 20000.0 * dt).unwrap();
        for w in trace.theta.windows(2) {
            let (s0, s1): (f64, f64) = (w[0].iter().sum(), w[1].iter().sum());
            assert!((s1 - s0).abs() <= 1e-12, "budget drift {}", s1 - s0);
        }
        let target = allocate(&y, 1.0 - budget).unwrap();
        let last = trace.theta.last().unwrap();
        for (a, b) in last.iter().zip(&target) {
            assert!((a - b).abs() <= 1e-6, "terminal {a} vs allocation {b}");
        }
    }
    // two components: {0,1} and {2,3}
    let disconnected = CommGraph::new(4, vec![(0, 1), (2, 3)]).unwrap();
    let err = consensus_simulate(&disconnected, &[1.0; 4], &[0.25; 4], 1e-3, 0.1);
    assert!(matches!(err, Err(Error::DisconnectedGraph)), "{err:?}");
    assert!(t0.elapsed().as_secs_f64() < 10.0, "too slow: {:?}", t0.elapsed());
    report(3, "consensus re-dispatch", t0);
}

/// Criterion 4: every synthesized controller set carries a strictly feasible
/// certificate and meets its performance level at frozen interior parameters.
#[test]
fn criterion_4_synthesis_certificates() {
    let t0 = Instant::now();
    let (_, d1) = case1();
    let (_, d2) = case2();
    let expected = [
        ("bess", 1usize, d1),
        ("sc", 1, d1),
        ("wind", 4, d2),
        ("pv", 4, d2),
        ("st", 8, d2),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (name, n_vertices, dsn) in expected {
        let dev = dsn.devices.iter().find(|d| d.name == name).unwrap();
        assert_eq!(dev.controller.vertices.len(), n_vertices, "{name}");
        assert!(dev.controller.gamma.is_finite() && dev.controller.gamma > 0.0);
        let worst = certificate_residuals(&dev.aug, &dev.controller)
            .unwrap()
            .into_iter()
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(worst <= -5e-9, "{name}: certificate residual {worst}");
        // strictly interior parameter samples
        let bx = &dev.local_box;
        let samples: Vec<Vec<f64>> = (0..25)
            .map(|_| {
                (0..bx.dim())
                    .map(|j| {
                        let w = rng.gen_range(0.05..0.95);
                        bx.lo[j] + w * (bx.hi[j] - bx.lo[j])
                    })
                    .collect()
            })
            .collect();
        let rep = brl_validate(&dev.controller, &dev.aug, &samples).unwrap();
        for s in &rep.samples {
            assert!(s.hurwitz, "{name}: not Hurwitz at {:?}", s.theta);
            assert!(
                s.hinf_ok,
                "{name}: hinf {:?} above gamma {} at {:?}",
                s.hinf, dev.controller.gamma, s.theta
            );
        }
    }
    assert!(t0.elapsed().as_secs_f64() < 120.0, "too slow: {:?}", t0.elapsed());
    report(4, "synthesis certificates", t0);
}

/// Criterion 5: the multilinear gain-scheduling weights form a convex
/// combination that reproduces the scheduling parameter exactly.
#[test]
fn criterion_5_gain_interpolation() {
    let (_, d1) = case1();
    let (_, d2) = case2();
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for dsn in [d1, d2] {
        for dev in &dsn.devices {
            let bx = &dev.local_box;
            let verts = &dev.controller.vertices;
            let dim = bx.dim();
            let mut check = |theta: &[f64], tol: f64| {
                let lam = interpolation_weights(verts, theta, bx).unwrap();
                assert!(lam.iter().all(|l| *l >= 0.0), "negative weight");
                let sum: f64 = lam.iter().sum();
                assert!((sum - 1.0).abs() <= 1e-12, "weight sum {sum}");
                for j in 0..dim {
                    let rec: f64 = lam.iter().zip(verts).map(|(l, v)| l * v[j]).sum();
                    assert!(
                        (rec - theta[j]).abs() <= tol,
                        "coordinate {j}: {rec} vs {}",
                        theta[j]
                    );
                }
            };
            for _ in 0..1000 {
                let th = sample_box(&mut rng, bx);
                check(&th, 1e-12);
            }
            for v in verts {
                check(v, 0.0); // vertices reproduce exactly
            }
            check(&bx.midpoint(), 1e-12);
        }
    }
    report(5, "gain interpolation", t0);
}

fn open_loop_step(df: f64, horizon: f64, dt: f64) -> Scenario {
    Scenario {
        dt,
        horizon,
        integrator: Integrator::Expm,
        grid: GridModel::OpenLoop,
        disturbances: vec![Disturbance { t: 0.0, p: df, q: 0.0 }],
        capacity_events: vec![],
        adaptation: AdaptationMode::None,
    }
}

/// Criterion 6: each controlled device settles at its allotted steady share
/// of the desired response, and its recorded reference equals an independent
/// discretization of the collapsed reference transfer function.
#[test]
fn criterion_6_steady_state_matching() {
    let (spec, dsn) = case2();
    let t0 = Instant::now();
    let df = -0.01;
    let dt = 2e-3;
    let sc = open_loop_step(df, 25.0, dt);
    let trace = simulate(spec, dsn, &sc, &Registry::default()).unwrap();
    let t_des_dc = dsn.t_des.fp.dc_gain();
    for (i, name) in trace.device_names.iter().enumerate() {
        let factor = dsn.factors_fp.iter().find(|f| &f.device == name).unwrap();
        let m0 = factor.dc_gain_expr().eval(&dsn.theta_nominal);
        let expect = m0 * t_des_dc * df;
        let got = *trace.dp[i].last().unwrap();
        assert!(
            (got - expect).abs() <= 1e-3,
            "{name}: steady dp {got} vs {expect}"
        );
        // independent reference oracle: exact hold discretization of the
        // collapsed participation times the desired behavior
        let tf = factor
            .collapse(&dsn.theta_nominal)
            .mul(&dsn.t_des.fp)
            .minreal();
        let ss = tf.to_ss().unwrap();
        let (ad, bd) = zoh_discretize(&ss.a, &ss.b, dt);
        let mut x = DVector::zeros(ss.order());
        for (k, r) in trace.dp_ref[i].iter().enumerate() {
            let u = trace.df[k];
            let y = (&ss.c * &x)[(0, 0)] + ss.d[(0, 0)] * u;
            assert!(
                (y - r).abs() <= 1e-6,
                "{name}: reference oracle mismatch {} at step {k}",
                y - r
            );
            x = &ad * x + &bd * DVector::from_element(1, u);
        }
    }
    report(6, "steady-state matching", t0);
}

/// Criterion 7: the hydro response is non-minimum-phase (initial excursion
/// opposite to its steady change) while the full fleet still matches the
/// desired step response tightly after the measurement transient.
#[test]
fn criterion_7_case1_mechanism() {
    let (spec, dsn) = case1();
    let t0 = Instant::now();
    // hydro-only frequency step through the installed response
    let hydro = dsn.fixed[0].tf_fp.to_ss().unwrap();
    let dt = 1e-3;
    let (ad, bd) = zoh_discretize(&hydro.a, &hydro.b, dt);
    let df = -0.01;
    let mut x = DVector::zeros(hydro.order());
    let mut y = Vec::new();
    for _ in 0..30_000 {
        x = &ad * x + &bd * DVector::from_element(1, df);
        y.push((&hydro.c * &x)[(0, 0)] + hydro.d[(0, 0)] * df);
    }
    let y_ss = *y.last().unwrap();
    let early_extreme = y[..500]
        .iter()
        .fold(0.0f64, |m, v| if v.abs() > m.abs() { *v } else { m });
    assert!(
        early_extreme * y_ss < 0.0,
        "expected an initial excursion opposite to the steady change: early {early_extreme}, steady {y_ss}"
    );

    // full fleet against the desired response
    let sc = open_loop_step(df, 30.0, dt);
    let trace = simulate(spec, dsn, &sc, &Registry::default()).unwrap();
    let des = dsn.t_des.fp.to_ss().unwrap();
    let (ad, bd) = zoh_discretize(&des.a, &des.b, dt);
    let mut x = DVector::zeros(des.order());
    let mut worst = 0.0f64;
    let mut steady = 0.0;
    for (k, t) in trace.t.iter().enumerate() {
        let y_des = (&des.c * &x)[(0, 0)] + des.d[(0, 0)] * trace.df[k];
        if *t >= 0.5 {
            worst = worst.max((trace.dp_total[k] - y_des).abs());
        }
        steady = y_des;
        x = &ad * x + &bd * DVector::from_element(1, trace.df[k]);
    }
    assert!(
        worst <= 0.02 * steady.abs(),
        "aggregate mismatch {worst} vs 2% of steady {steady}"
    );
    assert!(t0.elapsed().as_secs_f64() < 30.0, "too slow: {:?}", t0.elapsed());
    report(7, "case-I mechanism", t0);
}

/// Criterion 8: after a capacity loss the adaptive mode restores the full DC
/// budget and the pre-event steady frequency; frozen dynamic factors leave a
/// strictly larger deviation, and static factors a strictly larger matching
/// error than dynamic ones.
#[test]
fn criterion_8_adaptation_mechanism() {
    let (spec, adpf) = case2();
    let (_, dpf) = shared(&CASE2_DPF, "case2.json", "dpf");
    let (_, spf) = shared(&CASE2_SPF, "case2.json", "spf");
    let t0 = Instant::now();
    let t_event = 10.0;
    let scenario = |adaptation: AdaptationMode| Scenario {
        dt: 2e-3,
        horizon: 20.0,
        integrator: Integrator::Rk4,
        grid: GridModel::default(),
        disturbances: vec![Disturbance { t: 0.5, p: 0.5, q: 0.0 }],
        capacity_events: vec![CapacityEvent {
            t: t_event,
            device: "pv".into(),
            p_max_mw: 2.0,
        }],
        adaptation,
    };
    let reg = Registry::default();
    let run = |dsn: &FleetDesign, mode: AdaptationMode| simulate(spec, dsn, &scenario(mode), &reg).unwrap();
    let tr_adpf = run(adpf, AdaptationMode::Centralized);
    let tr_dpf = run(dpf, AdaptationMode::None);
    let tr_spf = run(spf, AdaptationMode::None);

    // the re-dispatch at the event restores the full steady budget
    let k_ev = tr_adpf.t.iter().position(|t| *t >= t_event + 0.01).unwrap();
    let theta_post: Vec<f64> = tr_adpf.theta.iter().map(|col| col[k_ev]).collect();
    let dc_sum: f64 = adpf
        .factors_fp
        .iter()
        .map(|f| f.dc_gain_expr().eval(&theta_post))
        .sum();
    assert!((dc_sum - 1.0).abs() <= 1e-9, "post-event DC sum {dc_sum}");

    // steady frequency recovered by adaptation, lost without it
    let window_mean = |tr: &dvpp::sim::SimTrace, lo: f64, hi: f64| {
        let vals: Vec<f64> = tr
            .t
            .iter()
            .zip(&tr.df)
            .filter(|(t, _)| **t >= lo && **t <= hi)
            .map(|(_, v)| *v)
            .collect();
        vals.iter().sum::<f64>() / vals.len() as f64
    };
    let pre = window_mean(&tr_adpf, t_event - 1.0, t_event);
    let post_adpf = window_mean(&tr_adpf, 19.0, 20.0);
    let post_dpf = window_mean(&tr_dpf, 19.0, 20.0);
    assert!(
        (post_adpf - pre).abs() <= 1e-3,
        "adaptive steady deviation moved: pre {pre}, post {post_adpf}"
    );
    assert!(
        post_dpf.abs() > post_adpf.abs() + 1e-3,
        "frozen factors should lose steady accuracy: dpf {post_dpf}, adpf {post_adpf}"
    );

    // static factors track the reference strictly worse than dynamic ones
    let rms_total = |tr: &dvpp::sim::SimTrace| {
        let m = metrics(tr);
        let ss: f64 = m.rms_eps.iter().map(|(_, v)| v * v).sum();
        ss.sqrt()
    };
    let (rms_spf, rms_dpf) = (rms_total(&tr_spf), rms_total(&tr_dpf));
    assert!(
        rms_spf > rms_dpf,
        "static factors should match worse: spf {rms_spf}, dpf {rms_dpf}"
    );
    assert!(t0.elapsed().as_secs_f64() < 60.0, "too slow: {:?}", t0.elapsed());
    report(8, "capacity adaptation mechanism", t0);
}
