//! Horizontal connectivity: same-leaf connection with its length, and a
//! cross-leaf attempt that must fail.

use std::f64::consts::PI;

use nalgebra::DVector;
use nullity_lab::connectivity::{bracket_generation, cc_distance_estimate, connect_horizontal, ConnectConfig, NullityDistribution};
use nullity_lab::immersion::cylinder;

fn dv(x: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(x)
}

fn main() -> nullity_lab::Result<()> {
    let imm = cylinder();
    let dist = NullityDistribution::new(&imm);
    let cfg = ConnectConfig::default();

    let brackets = bracket_generation(&dist, &dv(&[0.0, 0.0]), 3)?;
    println!("bracket dimensions {:?}, generating {}", brackets.dimensions, brackets.generating);

    let est = cc_distance_estimate(&dist, &dv(&[0.0, 0.0]), &dv(&[PI / 2.0, 0.0]), &cfg)?;
    println!("same leaf: length {:.6} (quarter circle {:.6}), gap {:.1e}", est.length, PI / 2.0, est.gap);

    let res = connect_horizontal(&dist, &dv(&[0.0, 0.0]), &dv(&[0.0, 1.0]), &cfg)?;
    println!(
        "across leaves: {:?} after {} restarts, best gap {:.4}",
        res.status, res.restarts_run, res.gap
    );
    Ok(())
}
