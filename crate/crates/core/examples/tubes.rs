//! Tubes: the torus around a circle and the two sheets around a cylinder.

use nalgebra::DVector;
use nullity_lab::connectivity::ProbeConfig;
use nullity_lab::immersion::{circle, cylinder};
use nullity_lab::tubes::{build_tube, holonomy_tube_reachability, sigma_star_projection, tube_shape};

fn main() -> nullity_lab::Result<()> {
    let (r, eps) = (2.0, 0.5);
    let torus = build_tube(&circle(r), eps)?.remove(0);
    println!("torus, focal bound {:.3}", torus.focal_bound);
    for phi in [0.0, 1.0, 2.0, 3.0] {
        let ts = tube_shape(&torus, &DVector::from_column_slice(&[0.4, phi]))?;
        let want = eps * phi.cos() / (r + eps * phi.cos());
        println!("  phi={phi:.1} eigenvalues {:.6?} (closed form {want:.6} and 1)", ts.eigenvalues);
    }

    let p = DVector::from_column_slice(&[0.0, 0.0]);
    for sheet in build_tube(&cylinder(), 0.3)? {
        let reach = holonomy_tube_reachability(&sheet, &p, 0.5, &ProbeConfig::default())?;
        let sigma = sigma_star_projection(&sheet, &p, &reach, 0.3, 5, 3.0)?;
        println!(
            "cylinder sheet {:?}: reach dim {:?}, E0 dim {}, psi variation {:.1e}",
            sheet.sheet, reach.probe.dimension, reach.e0_dim, sigma.psi_variation
        );
    }
    Ok(())
}
