//! Horizontal equivalence classes: the cone splits into parallel arcs,
//! the round sphere is a single open class.

use nalgebra::DVector;
use nullity_lab::connectivity::{equivalence_class_probe, NullityDistribution, ProbeConfig};
use nullity_lab::immersion::{cone, round_sphere};
use nullity_lab::ParamBox;

fn main() -> nullity_lab::Result<()> {
    for (imm, u) in [(cone(), [1.0, 0.3]), (round_sphere(), [0.5, 1.2])] {
        let u = DVector::from_column_slice(&u);
        let bbox = ParamBox::new(u.iter().map(|x| x - 0.4).collect(), u.iter().map(|x| x + 0.4).collect());
        let dist = NullityDistribution::new(&imm);
        let rep = equivalence_class_probe(&dist, &u, &bbox, &ProbeConfig::default())?;
        println!("{}: {:?}, dimension {:?}", imm.name, rep.classification, rep.dimension);
        for s in &rep.samples {
            println!("  radius {:.2}: {} neighbours, dim {}, gap {:.1e}", s.radius, s.neighbours, s.dimension, s.gap);
        }
        if let Some(f) = &rep.foliation {
            println!("  parallel foliation: pass {} (off manifold {:.1e})", f.pass, f.off_manifold);
        }
    }
    Ok(())
}
