//! Horizontal lifts on the cylinder and on the hyperbolic counterexample.

use std::f64::consts::PI;

use nalgebra::DVector;
use nullity_lab::bundle::{horizontal_lift, LiftOptions, ParamCurve};
use nullity_lab::immersion::{cylinder, h3_counterexample};
use nullity_lab::nullity::DEFAULT_TAU;

fn dv(x: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(x)
}

fn main() -> nullity_lab::Result<()> {
    let opts = LiftOptions {
        steps: 400,
        ..LiftOptions::default()
    };

    // unit circle at height 0 lifted through height 5
    let imm = cylinder();
    let base = ParamCurve::segment(dv(&[0.0, 0.0]), dv(&[2.0 * PI, 0.0]));
    let path = horizontal_lift(&imm, &base, &dv(&[0.0, 5.0]), &opts)?;
    for node in path.nodes.iter().step_by(100) {
        println!("t={:.2} x={:.6?}", node.t, node.point);
    }
    let check = path.reverify(&imm, DEFAULT_TAU)?;
    println!(
        "cylinder: horizontality {:.2e}, re-verified {:.2e}",
        path.horizontality_residual, check.stored_velocity
    );

    // in H³ the lift keeps the leaf coordinate s
    let h3 = h3_counterexample();
    let base = ParamCurve::segment(dv(&[0.0, 0.0]), dv(&[4.0, 0.0]));
    let path = horizontal_lift(&h3, &base, &dv(&[0.0, 0.8]), &opts)?;
    let drift = path
        .params()
        .iter()
        .flatten()
        .map(|p| (p[1] - 0.8).abs())
        .fold(0.0, f64::max);
    println!("h3: end param {:?}, s drift {drift:.2e}", path.end_param().map(|p| p.as_slice().to_vec()));

    path.write_csv(std::io::stdout().lock())?;
    Ok(())
}
