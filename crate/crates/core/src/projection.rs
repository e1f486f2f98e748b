//! Nearest-point projection onto a parametrized submanifold.
//!
//! Levenberg–Marquardt on `|f(u) - x|²` in embedding coordinates. Every
//! call needs a seed parameter: projections are continued along whatever
//! curve is being tracked, never started cold.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::immersion::ChartedImmersion;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionOptions {
    pub max_iter: usize,
    /// Reject seeds whose image is farther than this from the target.
    pub max_seed_distance: f64,
}

impl Default for ProjectionOptions {
    fn default() -> Self {
        Self {
            max_iter: 100,
            max_seed_distance: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Projection {
    pub param: DVector<f64>,
    pub point: DVector<f64>,
    /// Geodesic distance in the space form from the target to `f(param)`.
    pub distance: f64,
    pub iterations: usize,
}

fn clamp_to_box(imm: &ChartedImmersion, u: &mut DVector<f64>) -> bool {
    let mut clamped = false;
    for i in 0..u.len() {
        let (lo, hi) = (imm.eval_box.lower[i], imm.eval_box.upper[i]);
        if u[i] < lo {
            u[i] = lo;
            clamped = true;
        } else if u[i] > hi {
            u[i] = hi;
            clamped = true;
        }
    }
    clamped
}

/// Project `x` onto `imm`, starting from `seed`.
///
/// Fails when the iteration leaves the evaluation box, hits a point where
/// `f` is not immersive, or the seed is too far away.
pub fn project(imm: &ChartedImmersion, x: &DVector<f64>, seed: &DVector<f64>, opts: &ProjectionOptions) -> Result<Projection> {
    let mut u = seed.clone();
    if clamp_to_box(imm, &mut u) {
        return Err(Error::ProjectionDiverged(format!("seed {:?} outside the chart", seed.as_slice())));
    }
    let mut jet = imm.jet2_fast(&u)?;
    let mut r = &jet.point - x;
    let mut cost = r.norm_squared();
    if cost.sqrt() > opts.max_seed_distance {
        return Err(Error::ProjectionDiverged(format!(
            "seed is {:.3e} away from the target",
            cost.sqrt()
        )));
    }
    let mut lambda = 1e-6;
    let mut iterations = 0;
    for it in 0..opts.max_iter {
        iterations = it + 1;
        let j = &jet.first;
        let jtj = j.transpose() * j;
        let grad = j.transpose() * &r;
        if grad.norm() <= 1e-15 * (1.0 + jtj.norm()) * (1.0 + x.norm()) {
            break;
        }
        let mut accepted = false;
        for _ in 0..30 {
            let damped = &jtj + DMatrix::from_diagonal(&jtj.diagonal()) * lambda;
            let Some(step) = damped.lu().solve(&(-&grad)) else {
                lambda *= 10.0;
                continue;
            };
            let mut trial = &u + &step;
            if clamp_to_box(imm, &mut trial) {
                // a boundary hit means the nearest point is not in this chart
                let tj = imm.jet2_fast(&trial)?;
                let tr = &tj.point - x;
                if tr.norm_squared() < cost {
                    return Err(Error::ProjectionDiverged(format!(
                        "left the chart at {:?}",
                        trial.as_slice()
                    )));
                }
                lambda *= 10.0;
                continue;
            }
            let tj = match imm.jet2_fast(&trial) {
                Ok(tj) => tj,
                Err(Error::NotImmersive { .. }) | Err(Error::OutsideBox { .. }) => {
                    lambda *= 10.0;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let tr = &tj.point - x;
            let tc = tr.norm_squared();
            // cost differences below rounding cannot rank the iterates
            if tc <= cost * (1.0 + 1e-12) {
                let small = step.amax() <= 1e-14 * (1.0 + u.amax());
                u = trial;
                jet = tj;
                r = tr;
                cost = tc;
                lambda = (lambda * 0.1).max(1e-12);
                accepted = true;
                if small {
                    return Ok(finish(imm, x, u, jet.point, iterations));
                }
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            break;
        }
    }
    Ok(finish(imm, x, u, jet.point, iterations))
}

fn finish(imm: &ChartedImmersion, x: &DVector<f64>, param: DVector<f64>, point: DVector<f64>, iterations: usize) -> Projection {
    let distance = imm.space.distance(x, &point);
    Projection {
        param,
        point,
        distance,
        iterations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::immersion::{cone, cylinder};

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    #[test]
    fn projects_onto_cylinder() {
        let c = cylinder();
        let x = v(&[1.5 * 0.3f64.cos(), 1.5 * 0.3f64.sin(), 2.0]);
        let p = project(&c, &x, &v(&[0.2, 1.8]), &ProjectionOptions::default()).unwrap();
        assert!((p.param[0] - 0.3).abs() < 1e-12, "{p:?}");
        assert!((p.param[1] - 2.0).abs() < 1e-12);
        assert!((p.distance - 0.5).abs() < 1e-12);
    }

    #[test]
    fn point_on_surface_has_zero_distance() {
        let c = cone();
        let u = v(&[1.3, 0.4]);
        let x = c.point(&u).unwrap();
        let p = project(&c, &x, &v(&[1.25, 0.45]), &ProjectionOptions::default()).unwrap();
        assert!(p.distance < 1e-12);
    }

    #[test]
    fn far_seed_is_rejected() {
        let c = cylinder();
        let x = v(&[1.0, 0.0, 5.0]);
        let err = project(&c, &x, &v(&[0.0, 0.0]), &ProjectionOptions::default()).unwrap_err();
        assert!(matches!(err, Error::ProjectionDiverged(_)));
    }

    #[test]
    fn apex_side_leaves_the_chart() {
        let c = cone();
        // beyond the apex along the ruling through θ = 0
        let x = v(&[-0.5, 0.0, -0.5]);
        let res = project(
            &c,
            &x,
            &v(&[0.05, 0.0]),
            &ProjectionOptions::default(),
        );
        match res {
            Err(Error::ProjectionDiverged(_)) => {}
            Ok(p) => assert!(p.distance > 0.1),
            Err(e) => panic!("unexpected {e}"),
        }
    }
}
