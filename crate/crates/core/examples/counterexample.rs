//! The flat surface in H³ whose nullity leaves are complete but not
//! horizontally connected.

use nullity_lab::report::{run, Command, ExperimentConfig};

fn main() -> nullity_lab::Result<()> {
    let out = run(Command::Counterexample, &ExperimentConfig::default(), Some(0))?;
    for c in &out.report.checks {
        println!("{} {:<30} {:.3e} {} {:.0e}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.value, c.relation, c.bound);
    }
    println!("{}", serde_json::to_string_pretty(&out.report.results["connection"]).unwrap());
    Ok(())
}
