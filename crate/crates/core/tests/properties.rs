//! Property tests for the module invariants.

use std::f64::consts::PI;

use nalgebra::DVector;
use proptest::prelude::*;

use nullity_lab::bundle::{
    build_leaf_chart, horizontal_lift, loop_element, parallel_displacement, LiftOptions, LoopConfig, LoopSpec, ParamCurve,
};
use nullity_lab::connectivity::{
    bracket_generation, connect_horizontal, equivalence_class_probe, ConnectConfig, ConnectionStatus, NullityDistribution,
    ProbeConfig,
};
use nullity_lab::immersion::{catalog, circle, cone, cylinder, h3_counterexample, lookup, make_h3_matrix, sphere_orbit};
use nullity_lab::nullity::{gauss_kernel_crosscheck, nullity_at, DEFAULT_TAU};
use nullity_lab::report::ExperimentConfig;
use nullity_lab::shape::ShapeData;
use nullity_lab::tubes::{build_tube, tube_shape};
use nullity_lab::{ChartedImmersion, ParamBox, SpaceForm, SpaceKind};

fn dv(x: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(x)
}

/// Point of the evaluation box from unit-cube coordinates.
fn in_box(imm: &ChartedImmersion, t: &[f64]) -> DVector<f64> {
    let b = &imm.eval_box;
    DVector::from_iterator(
        imm.param_dim,
        (0..imm.param_dim).map(|i| b.lower[i] + t[i % t.len()] * (b.upper[i] - b.lower[i])),
    )
}

fn unit_cube() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.05f64..0.95, 3)
}

/// A point of the model and a unit tangent vector at it.
fn point_and_direction(space: &SpaceForm, a: &[f64], b: &[f64]) -> Option<(DVector<f64>, DVector<f64>)> {
    let n = space.dim;
    let raw = DVector::from_column_slice(&a[..n + 1]);
    let p = match space.kind {
        SpaceKind::Euclidean => DVector::from_column_slice(&a[..n]),
        SpaceKind::Sphere => {
            if raw.norm() < 1e-3 {
                return None;
            }
            raw.normalize()
        }
        SpaceKind::Hyperbolic => {
            let mut p = raw.clone();
            let spatial: f64 = p.rows(0, n).norm_squared();
            p[n] = (1.0 + spatial).sqrt();
            p
        }
    };
    let w = space.tangent_project(&p, &DVector::from_column_slice(&b[..space.embed_dim()]));
    let norm = space.norm(&w);
    if norm < 1e-3 {
        return None;
    }
    Some((p, w / norm))
}

fn spaces() -> [SpaceForm; 3] {
    [SpaceForm::euclidean(3), SpaceForm::sphere(3), SpaceForm::hyperbolic(3)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn geodesics_stay_on_the_model(
        a in prop::collection::vec(-1.0f64..1.0, 4),
        b in prop::collection::vec(-1.0f64..1.0, 4),
        s in -2.0f64..2.0,
    ) {
        for space in spaces() {
            let Some((p, v)) = point_and_direction(&space, &a, &b) else { continue };
            let x = space.geodesic(&p, &v, s).unwrap();
            prop_assert!(space.model_defect(&x) < 1e-12 * (1.0 + space.inner(&x, &x).abs()));
            prop_assert_eq!(space.geodesic(&p, &v, 0.0).unwrap(), p.clone());
        }
    }

    #[test]
    fn transport_preserves_inner_products(
        a in prop::collection::vec(-1.0f64..1.0, 4),
        b in prop::collection::vec(-1.0f64..1.0, 4),
        w1 in prop::collection::vec(-1.0f64..1.0, 4),
        w2 in prop::collection::vec(-1.0f64..1.0, 4),
        s in -2.0f64..2.0,
    ) {
        for space in spaces() {
            let Some((p, v)) = point_and_direction(&space, &a, &b) else { continue };
            let k = space.embed_dim();
            let x = space.tangent_project(&p, &DVector::from_column_slice(&w1[..k]));
            let y = space.tangent_project(&p, &DVector::from_column_slice(&w2[..k]));
            let tx = space.parallel_transport(&p, &v, &x, s).unwrap();
            let ty = space.parallel_transport(&p, &v, &y, s).unwrap();
            let scale = 1.0 + space.norm(&tx) * space.norm(&ty);
            prop_assert!((space.inner(&tx, &ty) - space.inner(&x, &y)).abs() < 1e-12 * scale);
        }
    }

    #[test]
    fn nilpotent_flow_is_a_one_parameter_group(t in -3.0f64..3.0, t2 in -3.0f64..3.0) {
        let k = make_h3_matrix([1.0, 0.0, 0.0], [0.0, 1.0, 0.0], 1.0).unwrap();
        let lhs = k.flow(t + t2);
        let rhs = k.flow(t) * k.flow(t2);
        prop_assert!((lhs - rhs).amax() < 1e-12 * (1.0 + (t + t2) * (t + t2)));
    }

    #[test]
    fn analytic_jets_match_finite_differences(t in unit_cube()) {
        for imm in catalog().into_iter().filter(|i| i.analytic_jet()) {
            let u = in_box(&imm, &t);
            let jet = imm.jet2(&u).unwrap();
            let fd = imm.numeric_first(&u);
            prop_assert!((&jet.first - &fd).amax() < 1e-8, "{}: {}", imm.name, (&jet.first - fd).amax());
        }
    }
}

// Index of nullity of each catalog entry.
const KNOWN_INDEX: [(&str, usize); 8] = [
    ("plane", 2),
    ("cylinder", 1),
    ("cone", 1),
    ("sphere", 0),
    ("great_sphere", 2),
    ("circle", 0),
    ("sphere_orbit", 1),
    ("h3_counterexample", 1),
];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn catalog_indices_are_the_known_ones(t in unit_cube()) {
        for (name, mu) in KNOWN_INDEX {
            let imm = lookup(name).unwrap();
            let u = in_box(&imm, &t);
            let (_, data) = nullity_at(&imm, &u, DEFAULT_TAU).unwrap();
            if !data.ambiguous {
                prop_assert_eq!(data.mu, mu, "{} at {:?}", name, u.as_slice());
            }
        }
    }

    #[test]
    fn gauss_map_is_constant_along_the_nullity(t in unit_cube()) {
        for imm in catalog().into_iter().filter(|i| i.space.kind == SpaceKind::Euclidean && i.codimension() == 1) {
            let u = in_box(&imm, &t);
            let check = gauss_kernel_crosscheck(&imm, &u, DEFAULT_TAU).unwrap();
            prop_assert!(check.nullity_max < 1e-5, "{}: {}", imm.name, check.nullity_max);
        }
    }

    #[test]
    fn nullity_and_spectrum_ignore_the_frame_order(t in unit_cube(), perm in Just((0..4).collect::<Vec<usize>>()).prop_shuffle()) {
        for imm in catalog().into_iter().filter(|i| i.param_dim == 2) {
            let u = in_box(&imm, &t);
            let jet = imm.jet2(&u).unwrap();
            let k = imm.space.embed_dim();
            let order: Vec<usize> = perm.iter().copied().filter(|&i| i < k).collect();
            let a = ShapeData::new(&jet, &imm.space).unwrap();
            let b = ShapeData::with_candidate_order(&jet, &imm.space, &order).unwrap();
            // spectra of A_ξ for the same normal ξ
            for xi in &a.normal_frame {
                let ea = sorted_eigen(&a.ortho_shape_operator(xi));
                let eb = sorted_eigen(&b.ortho_shape_operator(xi));
                for (x, y) in ea.iter().zip(&eb) {
                    prop_assert!((x - y).abs() < 1e-9, "{}", imm.name);
                }
            }
            let (na, nb) = (
                nullity_lab::nullity::nullity_space(&a, DEFAULT_TAU),
                nullity_lab::nullity::nullity_space(&b, DEFAULT_TAU),
            );
            prop_assert_eq!(na.mu, nb.mu);
            if !na.ambiguous && na.mu > 0 {
                for v in &na.basis_param {
                    let rest = nb.basis_param.iter().fold(v.clone(), |acc, w| {
                        let c = acc.dot(w) / w.dot(w);
                        acc - w * c
                    });
                    prop_assert!(rest.norm() < 1e-9 * v.norm().max(1.0), "{}", imm.name);
                }
            }
        }
    }
}

fn sorted_eigen(a: &nalgebra::DMatrix<f64>) -> Vec<f64> {
    let sym = (a + a.transpose()) * 0.5;
    let mut e: Vec<f64> = sym.symmetric_eigenvalues().iter().copied().collect();
    e.sort_by(f64::total_cmp);
    e
}

fn lift_opts(steps: usize) -> LiftOptions {
    LiftOptions {
        steps,
        ..LiftOptions::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn lifts_converge_at_rk4_order(t0 in 0.0f64..2.0, len in 0.2f64..0.6, s0 in 1.2f64..1.9, q in 1.3f64..1.8) {
        let imm = sphere_orbit();
        let base = ParamCurve::segment(dv(&[t0, s0]), dv(&[t0 + len, s0 + 0.3]));
        let q = dv(&[t0, q]);
        let end = |n: usize| horizontal_lift(&imm, &base, &q, &lift_opts(n)).unwrap().endpoint();
        let (e1, e2, e3) = (end(50), end(100), end(200));
        let d1 = (&e1 - &e2).amax();
        let d2 = (&e2 - &e3).amax();
        prop_assert!(d2 < 1e-12 || d1 / d2 > 8.0, "d1={d1:e} d2={d2:e}");
    }

    #[test]
    fn displacement_is_an_isometry(t0 in 0.0f64..2.0, dt in -1.0f64..1.0, ds in -0.3f64..0.3) {
        for (imm, s0, samples) in [
            (cylinder(), 0.0, vec![dv(&[t0, -1.0]), dv(&[t0, 0.4]), dv(&[t0, 2.0])]),
            (cone(), 1.0, vec![dv(&[t0, 0.3]), dv(&[t0, 1.1]), dv(&[t0, 2.5])]),
            (sphere_orbit(), 1.2, vec![dv(&[t0, 0.5]), dv(&[t0, 1.5]), dv(&[t0, 2.5])]),
        ] {
            let (a, b) = if imm.name == "cone" {
                (dv(&[samples[0][1], t0]), dv(&[samples[0][1], t0 + dt]))
            } else {
                (dv(&[t0, s0]), dv(&[t0 + dt, s0 + ds]))
            };
            let samples: Vec<DVector<f64>> = if imm.name == "cone" {
                [0.6, 1.0, 1.8].iter().map(|&r| dv(&[r, t0])).collect()
            } else {
                samples
            };
            let d = parallel_displacement(&imm, &ParamCurve::segment(a, b), &samples, &lift_opts(1000)).unwrap();
            prop_assert!(d.distortion < 1e-6, "{}: {}", imm.name, d.distortion);
            prop_assert!(d.map.isometry_defect(&imm.space) < 1e-6, "{}", imm.name);
        }
    }

    #[test]
    fn holonomy_respects_composition_and_reversal(seed in 0u64..1000) {
        let imm = sphere_orbit();
        let chart = build_leaf_chart(&imm, &dv(&[0.0, PI / 2.0]), 0.3, DEFAULT_TAU).unwrap();
        let cfg = LoopConfig { seed, ..LoopConfig::default() };
        let c1 = LoopSpec::random(&chart, &cfg, 0).curve(&chart);
        let c2 = LoopSpec::random(&chart, &cfg, 1).curve(&chart);
        let o = lift_opts(cfg.steps);
        let e1 = loop_element(&imm, &c1, &o).unwrap();
        let e2 = loop_element(&imm, &c2, &o).unwrap();
        let e12 = loop_element(&imm, &c1.then(&c2), &lift_opts(2 * cfg.steps)).unwrap();
        prop_assert!(e1.then(&e2).distance(&e12) < 1e-5);
        let rev = loop_element(&imm, &c1.reversed(), &o).unwrap();
        prop_assert!(rev.distance(&e1.inverse()) < 1e-5);
    }

    #[test]
    fn tube_points_sit_at_distance_eps(t in unit_cube(), eps in 0.1f64..0.8) {
        let mut tubes = build_tube(&circle(2.0), eps).unwrap();
        tubes.extend(build_tube(&cylinder(), eps).unwrap());
        for tube in &tubes {
            let p = in_box(&tube.immersion, &t);
            let (d, n) = tube.point_defects(&p).unwrap();
            prop_assert!(d < 1e-10 && n < 1e-8, "{}: {d:e} {n:e}", tube.immersion.name);
            let ts = tube_shape(tube, &p).unwrap();
            prop_assert!(ts.asymmetry < 1e-8);
            if !ts.ambiguous {
                prop_assert!(ts.fiber_defect < 1e-5);
            }
        }
    }

    #[test]
    fn configs_round_trip(seed in any::<u64>(), grid in 2usize..50, eps in 0.01f64..2.0, restarts in 1usize..64) {
        let mut cfg = ExperimentConfig { manifold: Some("cone".into()), ..ExperimentConfig::default() };
        cfg.analyze.grid = grid;
        cfg.tube.eps = eps;
        cfg.connect.solver.restarts = restarts;
        let cfg = cfg.resolved(Some(seed));
        let text = cfg.to_toml().unwrap();
        prop_assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
    }
}

fn around(u: &DVector<f64>, h: f64, imm: &ChartedImmersion) -> ParamBox {
    ParamBox::new(
        u.iter().zip(&imm.eval_box.lower).map(|(x, lo)| (x - h).max(*lo)).collect(),
        u.iter().zip(&imm.eval_box.upper).map(|(x, hi)| (x + h).min(*hi)).collect(),
    )
}

#[test]
fn connection_success_is_symmetric() {
    let cfg = ConnectConfig {
        restarts: 8,
        ..ConnectConfig::default()
    };
    let pairs = [
        (cylinder(), dv(&[0.0, 0.0]), dv(&[1.0, 0.0])),
        (cylinder(), dv(&[0.0, 0.0]), dv(&[0.5, 1.0])),
        (cone(), dv(&[1.0, 0.0]), dv(&[1.0, 0.8])),
        (cone(), dv(&[1.0, 0.0]), dv(&[1.5, 0.0])),
        (h3_counterexample(), dv(&[0.0, 0.0]), dv(&[1.0, 0.0])),
        (h3_counterexample(), dv(&[0.0, 0.0]), dv(&[0.0, 1.0])),
    ];
    for (imm, p, q) in &pairs {
        let dist = NullityDistribution::new(imm);
        let there = connect_horizontal(&dist, p, q, &cfg).unwrap().status;
        let back = connect_horizontal(&dist, q, p, &cfg).unwrap().status;
        assert_eq!(there, back, "{} {p} {q}", imm.name);
    }
    let dist = NullityDistribution::new(&pairs[0].0);
    assert_eq!(
        connect_horizontal(&dist, &pairs[0].1, &pairs[0].2, &cfg).unwrap().status,
        ConnectionStatus::Connected
    );
}

#[test]
fn integrable_classes_have_dimension_m_minus_mu() {
    for (imm, u) in [
        (cylinder(), dv(&[0.3, 0.0])),
        (cone(), dv(&[1.0, 0.3])),
        (sphere_orbit(), dv(&[0.0, 1.2])),
        (h3_counterexample(), dv(&[0.0, 0.0])),
    ] {
        let dist = NullityDistribution::new(&imm);
        let brackets = bracket_generation(&dist, &u, 3).unwrap();
        assert!(!brackets.generating);
        let (_, data) = nullity_at(&imm, &u, DEFAULT_TAU).unwrap();
        let rep = equivalence_class_probe(&dist, &u, &around(&u, 0.5, &imm), &ProbeConfig::default()).unwrap();
        assert_eq!(rep.dimension, Some(imm.param_dim - data.mu), "{}", imm.name);
        for p in &rep.paths {
            assert!(p.horizontality_residual < 1e-6);
        }
    }
}
