//! Index of nullity over the built-in catalog.
//!
//! ```text
//! cargo run --release --example analyze_nullity
//! ```

use nullity_lab::immersion::catalog;
use nullity_lab::nullity::{index_scan, nullity_at, DEFAULT_TAU};
use nullity_lab::ParamBox;

fn main() -> nullity_lab::Result<()> {
    println!("{:<18} {:>4} {:>6} {:>10}  nullity at the box centre", "manifold", "m", "mu", "min gap");
    for imm in catalog() {
        let b = &imm.eval_box;
        let clipped = ParamBox::new(
            b.lower.iter().map(|x| x.max(-3.0)).collect(),
            b.upper.iter().map(|x| x.min(3.0)).collect(),
        );
        let scan = index_scan(&imm, &clipped, 11, DEFAULT_TAU);
        let centre = nalgebra::DVector::from_iterator(
            imm.param_dim,
            clipped.lower.iter().zip(&clipped.upper).map(|(a, c)| 0.5 * (a + c)),
        );
        let (_, data) = nullity_at(&imm, &centre, DEFAULT_TAU)?;
        let basis: Vec<String> = data
            .basis_param
            .iter()
            .map(|v| format!("{:.3?}", v.as_slice()))
            .collect();
        println!(
            "{:<18} {:>4} {:>6?} {:>10.2e}  {}",
            imm.name,
            imm.param_dim,
            scan.distinct_mu(),
            scan.min_gap(),
            basis.join(" ")
        );
    }
    Ok(())
}
