//! Acceptance suite. Each criterion prints one `PASS`/`FAIL` line with the
//! measured values and the pinned tolerances, then asserts.

use std::f64::consts::PI;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use nullity_lab::bundle::{
    build_leaf_chart, horizontal_lift, loop_element, parallel_displacement, FiberMap, LiftOptions, LoopConfig, LoopSpec,
    ParamCurve,
};
use nullity_lab::connectivity::{
    cc_distance_estimate, connect_horizontal, equivalence_class_probe, ClassKind, ConnectConfig, ConnectionStatus,
    NullityDistribution, ProbeConfig,
};
use nullity_lab::immersion::{catalog, circle, cone, cylinder, h3_counterexample, sphere_orbit};
use nullity_lab::linalg::fitted_order;
use nullity_lab::nullity::{autoparallel_residual, index_scan, DEFAULT_TAU};
use nullity_lab::report::{default_point, run, Command, ExperimentConfig};
use nullity_lab::shape::ShapeData;
use nullity_lab::tubes::{build_tube, tube_shape};
use nullity_lab::ParamBox;

fn dv(x: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(x)
}

fn verdict(criterion: u32, pass: bool, detail: &str) {
    println!("criterion {criterion}: {} {detail}", if pass { "PASS" } else { "FAIL" });
}

fn lift_opts(steps: usize) -> LiftOptions {
    LiftOptions {
        steps,
        ..LiftOptions::default()
    }
}

#[test]
fn criterion_1_counterexample_certification() {
    let start = Instant::now();
    let cfg = ExperimentConfig::default();
    let out = run(Command::Counterexample, &cfg, Some(0)).expect("counterexample runs");
    let elapsed = start.elapsed();
    let checks: Vec<String> = out
        .report
        .checks
        .iter()
        .map(|c| format!("{}={:.3e}{}{:.0e}:{}", c.name, c.value, c.relation, c.bound, if c.pass { "ok" } else { "bad" }))
        .collect();
    let names = [
        "a_cubed_zero",
        "nullity_index_one",
        "kernel_gap",
        "nullity_direction",
        "gauss_curvature",
        "horizontal_s_constancy",
        "cross_leaf_connection_failed",
        "cross_leaf_gap_ratio",
    ];
    let all_present = names.iter().all(|n| out.report.checks.iter().any(|c| c.name == *n));
    let restarts = out.report.results["connection"]["restarts_run"].as_u64().unwrap_or(0);
    let pass = out.report.passed && all_present && restarts == 32 && elapsed < Duration::from_secs(60);
    verdict(
        1,
        pass,
        &format!("[{}] restarts={restarts} runtime={:.1}s (<60s)", checks.join(" "), elapsed.as_secs_f64()),
    );
    assert!(pass);
}

#[test]
fn criterion_2_cylinder_suite() {
    let start = Instant::now();
    let imm = cylinder();

    let scan = index_scan(&imm, &ParamBox::new(vec![-3.0, -3.0], vec![3.0, 3.0]), 21, DEFAULT_TAU);
    let mu_ok = scan.distinct_mu() == vec![1];

    // A_ξ for the outward normal in an orthonormal frame is diag(-1, 0).
    let mut shape_err: f64 = 0.0;
    for u in ParamBox::new(vec![-3.0, -3.0], vec![3.0, 3.0]).grid(5) {
        let s = ShapeData::at(&imm, &u).unwrap();
        let outward = dv(&[u[0].cos(), u[0].sin(), 0.0]);
        let a = s.ortho_shape_operator(&outward);
        let want = DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, 0.0]);
        shape_err = shape_err.max((a - want).amax());
    }

    let circle_base = ParamCurve::segment(dv(&[0.0, 0.0]), dv(&[2.0 * PI, 0.0]));
    let path = horizontal_lift(&imm, &circle_base, &dv(&[0.0, 5.0]), &lift_opts(1000)).unwrap();
    let mut lift_err: f64 = 0.0;
    for node in &path.nodes {
        let t = 2.0 * PI * node.t;
        lift_err = lift_err.max((dv(&node.point) - dv(&[t.cos(), t.sin(), 5.0])).amax());
    }

    let element = loop_element(&imm, &circle_base, &lift_opts(1000)).unwrap();
    let holonomy_err = element.distance(&FiberMap::identity(&imm.space, 1));

    let dist = NullityDistribution::new(&imm);
    let cross = connect_horizontal(&dist, &dv(&[0.0, 0.0]), &dv(&[0.0, 1.0]), &ConnectConfig::default()).unwrap();
    let cross_ok = cross.status == ConnectionStatus::Failed && cross.gap >= 0.9;

    let cc = cc_distance_estimate(&dist, &dv(&[0.0, 0.0]), &dv(&[PI / 2.0, 0.0]), &ConnectConfig::default()).unwrap();
    let cc_rel = (cc.length - PI / 2.0).abs() / (PI / 2.0);

    let elapsed = start.elapsed();
    let pass = mu_ok
        && shape_err < 1e-8
        && lift_err < 1e-6
        && holonomy_err < 1e-6
        && cross_ok
        && cc_rel < 0.02
        && elapsed < Duration::from_secs(30);
    verdict(
        2,
        pass,
        &format!(
            "mu={:?} shape_err={shape_err:.2e}(<1e-8) lift_err={lift_err:.2e}(<1e-6) holonomy_err={holonomy_err:.2e}(<1e-6) \
             cross_gap={:.3}(>=0.9,{:?}) cc_len={:.5}(pi/2 +-2%, rel={cc_rel:.2e}) runtime={:.1}s (<30s)",
            scan.distinct_mu(),
            cross.gap,
            cross.status,
            cc.length,
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

// Principal curvatures of the torus of revolution scaled by ε, written
// from the foot point c and the angle φ between x − c and the outward
// radial direction.
fn torus_oracle(r: f64, eps: f64, x: &DVector<f64>, c: &DVector<f64>) -> [f64; 2] {
    let radial = c / c.norm();
    let cos_phi = (x - c).dot(&radial) / eps;
    let mut l = [eps * cos_phi / (r + eps * cos_phi), 1.0];
    l.sort_by(f64::total_cmp);
    l
}

#[test]
fn criterion_3_torus_tube_oracle() {
    let start = Instant::now();
    let (r, eps) = (2.0, 0.5);
    let tube = build_tube(&circle(r), eps).unwrap().remove(0);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut eig_err: f64 = 0.0;
    let mut fiber_defect: f64 = 0.0;
    let mut sampled = 0;
    for _ in 0..100 {
        let p = dv(&[rng.gen_range(-PI..PI), rng.gen_range(-PI..PI)]);
        let ts = tube_shape(&tube, &p).unwrap();
        let c = tube.base.point(&dv(&[p[0]])).unwrap();
        let want = torus_oracle(r, eps, &ts.point, &c);
        let mut got = ts.eigenvalues.clone();
        got.sort_by(f64::total_cmp);
        for (a, b) in got.iter().zip(want) {
            eig_err = eig_err.max((a - b).abs());
        }
        fiber_defect = fiber_defect.max(ts.fiber_defect);
        sampled += 1;
    }
    let elapsed = start.elapsed();
    let pass = sampled == 100 && eig_err < 1e-6 && fiber_defect < 1e-5 && elapsed < Duration::from_secs(30);
    verdict(
        3,
        pass,
        &format!(
            "points={sampled} eigen_err={eig_err:.2e}(<1e-6) ker_dpi_in_E1={fiber_defect:.2e}(<1e-5) runtime={:.1}s (<30s)",
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

const HS: [f64; 3] = [1e-2, 5e-3, 2.5e-3];

fn sci(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.2e}")).collect();
    format!("[{}]", parts.join(", "))
}

fn order_ok(p: f64) -> bool {
    (1.7..=2.3).contains(&p)
}

/// Pairwise-distance distortion of parallel displacement along a unit
/// parameter segment, integrated with step `h`.
fn distortion(imm: &nullity_lab::ChartedImmersion, a: &[f64], b: &[f64], samples: &[DVector<f64>], h: f64) -> f64 {
    let steps = (1.0 / h).round() as usize;
    parallel_displacement(imm, &ParamCurve::segment(dv(a), dv(b)), samples, &lift_opts(steps))
        .unwrap()
        .distortion
}

#[test]
fn criterion_4_convergence_orders() {
    let mut lines = Vec::new();
    let mut pass = true;

    let cases = [
        (cylinder(), dv(&[0.4, 0.3]), [0.0, 0.0], [1.0, 0.0], vec![dv(&[0.0, -1.0]), dv(&[0.0, 0.5]), dv(&[0.0, 2.0])]),
        (
            h3_counterexample(),
            dv(&[0.3, 0.2]),
            [0.0, 0.0],
            [1.0, 0.0],
            vec![dv(&[0.0, -1.0]), dv(&[0.0, 0.5]), dv(&[0.0, 1.5])],
        ),
    ];
    for (imm, u, a, b, samples) in &cases {
        let auto: Vec<f64> = HS.iter().map(|&h| autoparallel_residual(imm, u, h, DEFAULT_TAU).unwrap()).collect();
        let dist: Vec<f64> = HS.iter().map(|&h| distortion(imm, a, b, samples, h)).collect();
        let p_auto = fitted_order(&HS, &auto);
        let p_dist = fitted_order(&HS, &dist);
        pass &= order_ok(p_auto) && order_ok(p_dist);
        lines.push(format!(
            "{}: autoparallel={} order={p_auto:.2} distortion={} order={p_dist:.2}",
            imm.name,
            sci(&auto),
            sci(&dist)
        ));
    }
    verdict(4, pass, &format!("(orders in [1.7, 2.3], h={HS:?}) {}", lines.join("; ")));
    assert!(pass);
}

#[test]
fn criterion_5_holonomy_algebra() {
    let imm = sphere_orbit();
    let chart = build_leaf_chart(&imm, &dv(&[0.0, PI / 2.0]), 0.3, DEFAULT_TAU).unwrap();
    let cfg = LoopConfig {
        seed: 5,
        ..LoopConfig::default()
    };
    let opts = lift_opts(cfg.steps);
    // the composite loop is twice as long; keep the step size
    let opts2 = lift_opts(2 * cfg.steps);
    let errs: Vec<(f64, f64)> = (0..50)
        .into_par_iter()
        .map(|i| {
            let c1 = LoopSpec::random(&chart, &cfg, 2 * i).curve(&chart);
            let c2 = LoopSpec::random(&chart, &cfg, 2 * i + 1).curve(&chart);
            let e1 = loop_element(&imm, &c1, &opts).unwrap();
            let e2 = loop_element(&imm, &c2, &opts).unwrap();
            let e12 = loop_element(&imm, &c1.then(&c2), &opts2).unwrap();
            let rev = loop_element(&imm, &c1.reversed(), &opts).unwrap();
            (e1.then(&e2).distance(&e12), rev.distance(&e1.inverse()))
        })
        .collect();
    let comp = errs.iter().map(|e| e.0).fold(0.0, f64::max);
    let inv = errs.iter().map(|e| e.1).fold(0.0, f64::max);
    let pass = errs.len() == 50 && comp < 1e-5 && inv < 1e-5;
    verdict(
        5,
        pass,
        &format!("pairs={} composition={comp:.2e}(<1e-5) inverse={inv:.2e}(<1e-5)", errs.len()),
    );
    assert!(pass);
}

fn around(u: &DVector<f64>, h: f64, imm: &nullity_lab::ChartedImmersion) -> ParamBox {
    ParamBox::new(
        u.iter().zip(&imm.eval_box.lower).map(|(x, lo)| (x - h).max(*lo)).collect(),
        u.iter().zip(&imm.eval_box.upper).map(|(x, hi)| (x + h).min(*hi)).collect(),
    )
}

#[test]
fn criterion_6_local_dichotomy() {
    let mut parts = Vec::new();
    let mut pass = true;
    for (imm, u) in [(cylinder(), dv(&[0.0, 0.0])), (cone(), dv(&[1.0, 0.3]))] {
        let dist = NullityDistribution::new(&imm);
        let rep = equivalence_class_probe(&dist, &u, &around(&u, 0.5, &imm), &ProbeConfig::default()).unwrap();
        let foliation = rep.foliation.as_ref().is_some_and(|f| f.pass);
        let ok = rep.classification == ClassKind::ProperSubmanifold && rep.dimension == Some(1) && foliation;
        pass &= ok;
        parts.push(format!("{}: {:?} dim={:?} foliation={foliation}", imm.name, rep.classification, rep.dimension));
    }
    // Over the catalog: an open class fills the chart and has no foliation;
    // a proper class has lower dimension and a passing foliation check.
    let mut both = 0;
    let mut checked = 0;
    for imm in catalog() {
        let u = default_point(&imm);
        let dist = NullityDistribution::new(&imm);
        let Ok(rep) = equivalence_class_probe(&dist, &u, &around(&u, 0.5, &imm), &ProbeConfig::default()) else {
            parts.push(format!("{}: not probed", imm.name));
            continue;
        };
        checked += 1;
        let open_like = rep.dimension == Some(imm.param_dim);
        let proper_like = rep.dimension.is_some_and(|d| d < imm.param_dim) && rep.foliation.as_ref().is_none_or(|f| f.pass);
        let consistent = match rep.classification {
            ClassKind::OpenClass => open_like && !proper_like,
            ClassKind::ProperSubmanifold => proper_like && !open_like,
            ClassKind::Undetermined => true,
        };
        if !consistent {
            both += 1;
        }
        parts.push(format!("{}: {:?} dim={:?}", imm.name, rep.classification, rep.dimension));
    }
    pass &= both == 0 && checked > 0;
    verdict(6, pass, &format!("both_cases={both} catalog_probed={checked} [{}]", parts.join("; ")));
    assert!(pass);
}

#[test]
fn criterion_7_consistency() {
    let mut worst: f64 = 0.0;
    let mut paths = 0;
    let mut note = |v: f64| {
        worst = worst.max(v);
        paths += 1;
    };

    // lifts
    let imm = cylinder();
    let lift = horizontal_lift(
        &imm,
        &ParamCurve::segment(dv(&[0.0, 0.0]), dv(&[2.0, 0.0])),
        &dv(&[0.0, 1.5]),
        &lift_opts(400),
    )
    .unwrap();
    note(lift.reverify(&imm, DEFAULT_TAU).unwrap().stored_velocity);
    let h3 = h3_counterexample();
    let lift = horizontal_lift(
        &h3,
        &ParamCurve::segment(dv(&[0.0, 0.0]), dv(&[3.0, 0.0])),
        &dv(&[0.0, 0.7]),
        &lift_opts(400),
    )
    .unwrap();
    note(lift.reverify(&h3, DEFAULT_TAU).unwrap().stored_velocity);

    // connection and probe paths, with reached points re-confirmed
    let mut confirm_gap: f64 = 0.0;
    let mut confirmed = 0;
    for (imm, u) in [(cylinder(), dv(&[0.0, 0.0])), (cone(), dv(&[1.0, 0.3])), (h3_counterexample(), dv(&[0.0, 0.0]))] {
        let dist = NullityDistribution::new(&imm);
        let bbox = around(&u, 0.5, &imm);
        let rep = equivalence_class_probe(&dist, &u, &bbox, &ProbeConfig::default()).unwrap();
        for p in &rep.paths {
            note(p.reverify(&imm, DEFAULT_TAU).unwrap().stored_velocity);
        }
        let solver = ConnectConfig {
            bbox: Some(bbox.clone()),
            ..ConnectConfig::default()
        };
        for q in rep.class_points.iter().take(3) {
            let res = connect_horizontal(&dist, &u, &dv(q), &solver).unwrap();
            confirm_gap = confirm_gap.max(res.gap);
            confirmed += 1;
            if let Some(path) = &res.path {
                note(path.reverify(&imm, DEFAULT_TAU).unwrap().stored_velocity);
            }
        }
    }

    let pass = worst < 1e-6 && confirm_gap < 1e-5 && confirmed > 0;
    verdict(
        7,
        pass,
        &format!("paths={paths} reverify={worst:.2e}(<1e-6) confirmed={confirmed} confirm_gap={confirm_gap:.2e}(<1e-5)"),
    );
    assert!(pass);
}

#[test]
fn criterion_8_determinism() {
    let src = r#"
manifold = "cylinder"
seed = 11

[connect]
p = [0.0, 0.0]
q = [1.0, 0.0]
cc = false

[connect.solver]
restarts = 8

[holonomy.loops]
count = 20

[holonomy]
local_count = 4

[classprobe]
confirm = 1
"#;
    let cfg = ExperimentConfig::from_toml(src).unwrap();
    let mut diffs = Vec::new();
    let mut runs = 0;
    for command in [Command::Analyze, Command::Lift, Command::Holonomy, Command::Connect, Command::Classprobe] {
        let a = run(command, &cfg, None).unwrap();
        let b = run(command, &cfg, None).unwrap();
        runs += 2;
        if a.canonical_json() != b.canonical_json() || a.side_files != b.side_files {
            diffs.push(command.name());
        }
    }
    let pass = diffs.is_empty();
    verdict(8, pass, &format!("runs={runs} differing={diffs:?}"));
    assert!(pass);
}
