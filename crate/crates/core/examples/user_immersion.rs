//! Analyze an immersion written down in a TOML file.
//!
//! ```text
//! cargo run --release --example user_immersion -- crates/core/examples/configs/helicoid.toml
//! ```

use std::path::PathBuf;

use nullity_lab::immersion::load_immersion_file;
use nullity_lab::nullity::{index_scan, DEFAULT_TAU};

fn main() -> nullity_lab::Result<()> {
    let path = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("examples/configs/tangent_developable.toml"));
    let imm = load_immersion_file(&path)?;
    let scan = index_scan(&imm, &imm.eval_box, 9, DEFAULT_TAU);
    println!("{}: mu values {:?}, min gap {:.2e}", imm.name, scan.distinct_mu(), scan.min_gap());
    for c in &scan.components {
        println!("  component with mu={} covers {} grid points", c.mu, c.size);
    }
    Ok(())
}
