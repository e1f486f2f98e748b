//! Holonomy of the sphere-orbit surface in S³ and its action on a fiber.

use std::f64::consts::PI;

use nalgebra::DVector;
use nullity_lab::bundle::{
    build_leaf_chart, classify_fiber_action, holonomy_sample, local_holonomy_probe, ClassifyOptions, LoopConfig,
};
use nullity_lab::immersion::sphere_orbit;
use nullity_lab::nullity::DEFAULT_TAU;

fn main() -> nullity_lab::Result<()> {
    let imm = sphere_orbit();
    let chart = build_leaf_chart(&imm, &DVector::from_column_slice(&[0.0, PI / 2.0]), 0.3, DEFAULT_TAU)?;
    println!(
        "leaf dim {}, transverse axes {:?}, slice defect {:.1e}",
        chart.leaf_dim, chart.transverse_axes, chart.slice_defect
    );

    let cfg = LoopConfig {
        count: 120,
        seed: 7,
        ..LoopConfig::default()
    };
    let sample = holonomy_sample(&imm, &chart, &cfg)?;
    println!("{} elements, {} failed loops", sample.elements.len(), sample.failures.len());
    for e in sample.elements.iter().take(3) {
        let m = e.map.matrix();
        let rows: Vec<String> = m.row_iter().map(|r| format!("{:.5?}", r.iter().collect::<Vec<_>>())).collect();
        println!("  winding {:?}: {}", e.spec.winding, rows.join(" "));
    }

    let maps: Vec<_> = sample.elements.iter().map(|e| e.map.clone()).collect();
    let p = DVector::from_column_slice(&[1.0, 0.0]);
    let stats = classify_fiber_action(&imm.space, &maps, &p, &ClassifyOptions::default())?;
    println!(
        "orbit of {:?}: {:?}, dim {} in a fiber of dim {}",
        p.as_slice(),
        stats.action,
        stats.orbit_dim,
        stats.fiber_dim
    );

    let local = local_holonomy_probe(&imm, &chart, &[0.2, 0.1, 0.05], &LoopConfig { count: 12, ..cfg })?;
    for s in local {
        println!("  loops of radius {:.2}: max deviation from identity {:.2e}", s.radius, s.max_deviation);
    }
    Ok(())
}
