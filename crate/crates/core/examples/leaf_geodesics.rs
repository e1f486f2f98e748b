//! Leaves of the nullity are totally geodesic: autoparallel residuals and
//! geodesics shot along the nullity.

use nalgebra::DVector;
use nullity_lab::immersion::{cone, cylinder, h3_counterexample};
use nullity_lab::linalg::fitted_order;
use nullity_lab::nullity::{autoparallel_residual, leaf_geodesic_check, DEFAULT_TAU};

fn main() -> nullity_lab::Result<()> {
    let hs = [1e-2, 5e-3, 2.5e-3];
    for (imm, u) in [
        (cylinder(), [0.3, -0.5]),
        (cone(), [1.2, 0.4]),
        (h3_counterexample(), [0.5, 0.2]),
    ] {
        let u = DVector::from_column_slice(&u);
        let res: Vec<f64> = hs
            .iter()
            .map(|&h| autoparallel_residual(&imm, &u, h, DEFAULT_TAU))
            .collect::<nullity_lab::Result<_>>()?;
        let leaf = leaf_geodesic_check(&imm, &u, None, 1.5, 150, DEFAULT_TAU)?;
        println!("{}", imm.name);
        let shown: Vec<String> = res.iter().map(|r| format!("{r:.2e}")).collect();
        println!("  autoparallel residuals [{}]", shown.join(", "));
        if res.iter().all(|r| *r > 0.0) {
            println!("  fitted order {:.2}", fitted_order(&hs, &res));
        } else {
            println!("  fitted order undefined (residual vanishes)");
        }
        println!(
            "  leaf geodesic: max residual {:.2e} over {} steps, exit {:?}",
            leaf.max_residual, leaf.steps_completed, leaf.exit
        );
    }
    Ok(())
}
