//! The three simply connected space forms.
//!
//! Euclidean space is `R^n` itself. The sphere is the unit sphere of
//! `R^{n+1}` and hyperbolic space is the upper sheet of the hyperboloid
//! `<x,x> = -1` in Lorentz space `L^{n+1}`, whose last coordinate is timelike.
//! All geometry is expressed in these ambient (embedding) coordinates.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance for the tangency and unit-length preconditions.
pub const PRECONDITION_TOL: f64 = 1e-9;

/// Drift allowed before a point is pulled back onto the model.
pub const REPROJECT_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpaceKind {
    Euclidean,
    Sphere,
    Hyperbolic,
}

/// A simply connected space form of intrinsic dimension `dim`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SpaceForm {
    pub kind: SpaceKind,
    pub dim: usize,
}

impl SpaceForm {
    pub fn euclidean(dim: usize) -> Self {
        Self {
            kind: SpaceKind::Euclidean,
            dim,
        }
    }

    pub fn sphere(dim: usize) -> Self {
        Self {
            kind: SpaceKind::Sphere,
            dim,
        }
    }

    pub fn hyperbolic(dim: usize) -> Self {
        Self {
            kind: SpaceKind::Hyperbolic,
            dim,
        }
    }

    pub fn embed_dim(&self) -> usize {
        match self.kind {
            SpaceKind::Euclidean => self.dim,
            SpaceKind::Sphere | SpaceKind::Hyperbolic => self.dim + 1,
        }
    }

    /// Sectional curvature of the space form.
    pub fn curvature(&self) -> f64 {
        match self.kind {
            SpaceKind::Euclidean => 0.0,
            SpaceKind::Sphere => 1.0,
            SpaceKind::Hyperbolic => -1.0,
        }
    }

    /// `<x,x>` on the model: 1 on the sphere, -1 on the hyperboloid.
    pub fn model_constant(&self) -> Option<f64> {
        match self.kind {
            SpaceKind::Euclidean => None,
            SpaceKind::Sphere => Some(1.0),
            SpaceKind::Hyperbolic => Some(-1.0),
        }
    }

    /// Whether points carry a position-vector normal (sphere and hyperboloid).
    pub fn is_curved(&self) -> bool {
        self.kind != SpaceKind::Euclidean
    }

    /// Diagonal of the ambient metric.
    pub fn signature(&self) -> DVector<f64> {
        let n = self.embed_dim();
        let mut s = DVector::from_element(n, 1.0);
        if self.kind == SpaceKind::Hyperbolic {
            s[n - 1] = -1.0;
        }
        s
    }

    pub fn metric_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.signature())
    }

    fn check_len(&self, v: &DVector<f64>) -> Result<()> {
        if v.len() != self.embed_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.embed_dim(),
                got: v.len(),
            });
        }
        Ok(())
    }

    /// The ambient bilinear form.
    pub fn metric_inner(&self, u: &DVector<f64>, v: &DVector<f64>) -> Result<f64> {
        self.check_len(u)?;
        self.check_len(v)?;
        Ok(self.inner(u, v))
    }

    /// Unchecked version of [`SpaceForm::metric_inner`] for internal hot loops.
    #[inline]
    pub fn inner(&self, u: &DVector<f64>, v: &DVector<f64>) -> f64 {
        let n = u.len();
        let mut s = 0.0;
        for i in 0..n {
            s += u[i] * v[i];
        }
        if self.kind == SpaceKind::Hyperbolic {
            s -= 2.0 * u[n - 1] * v[n - 1];
        }
        s
    }

    /// `G v` with `G` the ambient metric.
    pub fn lower(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut w = v.clone();
        if self.kind == SpaceKind::Hyperbolic {
            let n = w.len();
            w[n - 1] = -w[n - 1];
        }
        w
    }

    /// Norm of a spacelike vector; the absolute value is taken for safety.
    pub fn norm(&self, v: &DVector<f64>) -> f64 {
        self.inner(v, v).abs().sqrt()
    }

    /// Distance of `x` from the model set (0 for Euclidean space).
    pub fn model_defect(&self, x: &DVector<f64>) -> f64 {
        match self.kind {
            SpaceKind::Euclidean => 0.0,
            SpaceKind::Sphere => (self.inner(x, x) - 1.0).abs(),
            SpaceKind::Hyperbolic => {
                let d = (self.inner(x, x) + 1.0).abs();
                if x[x.len() - 1] > 0.0 {
                    d
                } else {
                    d.max(1.0)
                }
            }
        }
    }

    /// Check that `x` lies on the model set.
    pub fn check_point(&self, x: &DVector<f64>, tol: f64) -> Result<()> {
        self.check_len(x)?;
        let defect = self.model_defect(x);
        if defect > tol {
            return Err(Error::OffModel { defect });
        }
        Ok(())
    }

    /// Pull a drifting point back onto the model when the drift exceeds
    /// [`REPROJECT_TOL`].
    pub fn reproject(&self, x: &DVector<f64>) -> DVector<f64> {
        match self.kind {
            SpaceKind::Euclidean => x.clone(),
            SpaceKind::Sphere | SpaceKind::Hyperbolic => {
                if self.model_defect(x) <= REPROJECT_TOL {
                    x.clone()
                } else {
                    let q = self.inner(x, x).abs().sqrt();
                    x / q
                }
            }
        }
    }

    /// Orthogonal projection of an ambient vector onto `T_p Q`.
    pub fn tangent_project(&self, p: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        match self.model_constant() {
            None => w.clone(),
            Some(c) => w - p * (self.inner(w, p) / c),
        }
    }

    fn check_tangent_unit(&self, p: &DVector<f64>, v: &DVector<f64>) -> Result<()> {
        self.check_len(p)?;
        self.check_len(v)?;
        if self.is_curved() {
            let defect = self.inner(p, v).abs();
            if defect > PRECONDITION_TOL {
                return Err(Error::NotTangent { defect });
            }
        }
        let norm_sq = self.inner(v, v);
        if (norm_sq - 1.0).abs() > PRECONDITION_TOL {
            return Err(Error::NotUnit { norm_sq });
        }
        Ok(())
    }

    /// Unit-speed geodesic from `p` with initial velocity `v`, evaluated at
    /// arclength `s`.
    pub fn geodesic(&self, p: &DVector<f64>, v: &DVector<f64>, s: f64) -> Result<DVector<f64>> {
        self.check_tangent_unit(p, v)?;
        Ok(self.geodesic_unchecked(p, v, s))
    }

    pub(crate) fn geodesic_unchecked(&self, p: &DVector<f64>, v: &DVector<f64>, s: f64) -> DVector<f64> {
        if s == 0.0 {
            return p.clone();
        }
        match self.kind {
            SpaceKind::Euclidean => p + v * s,
            SpaceKind::Sphere => p * s.cos() + v * s.sin(),
            SpaceKind::Hyperbolic => p * s.cosh() + v * s.sinh(),
        }
    }

    /// Velocity of the unit-speed geodesic at arclength `s`.
    pub fn geodesic_velocity(&self, p: &DVector<f64>, v: &DVector<f64>, s: f64) -> DVector<f64> {
        match self.kind {
            SpaceKind::Euclidean => v.clone(),
            SpaceKind::Sphere => v * s.cos() - p * s.sin(),
            SpaceKind::Hyperbolic => v * s.cosh() + p * s.sinh(),
        }
    }

    /// Levi-Civita parallel transport of `w` (tangent at `p`) along the
    /// geodesic with initial unit velocity `v`, to arclength `s`.
    ///
    /// The component of `w` along `v` follows the geodesic velocity; the
    /// component orthogonal to `v` (and to `p`) is fixed.
    pub fn parallel_transport(
        &self,
        p: &DVector<f64>,
        v: &DVector<f64>,
        w: &DVector<f64>,
        s: f64,
    ) -> Result<DVector<f64>> {
        self.check_tangent_unit(p, v)?;
        self.check_len(w)?;
        if self.is_curved() {
            let defect = self.inner(p, w).abs();
            if defect > PRECONDITION_TOL * (1.0 + self.norm(w)) {
                return Err(Error::NotTangent { defect });
            }
        }
        if self.kind == SpaceKind::Euclidean {
            return Ok(w.clone());
        }
        let a = self.inner(w, v);
        let perp = w - v * a;
        Ok(perp + self.geodesic_velocity(p, v, s) * a)
    }

    /// Geodesic distance between two points of the model.
    pub fn distance(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        match self.kind {
            SpaceKind::Euclidean => (x - y).norm(),
            SpaceKind::Sphere => {
                // chordal form is better conditioned for nearby points
                let chord = (x - y).norm();
                2.0 * (0.5 * chord).min(1.0).asin()
            }
            SpaceKind::Hyperbolic => {
                let d = x - y;
                let chord_sq = self.inner(&d, &d).max(0.0);
                2.0 * (0.5 * chord_sq.sqrt()).asinh()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn e(n: usize, i: usize) -> DVector<f64> {
        let mut v = DVector::zeros(n);
        v[i] = 1.0;
        v
    }

    #[test]
    fn inner_products() {
        let r3 = SpaceForm::euclidean(3);
        assert_eq!(r3.metric_inner(&e(3, 0), &e(3, 0)).unwrap(), 1.0);
        let h3 = SpaceForm::hyperbolic(3);
        assert_eq!(h3.metric_inner(&e(4, 3), &e(4, 3)).unwrap(), -1.0);
        assert_eq!(h3.metric_inner(&e(4, 0), &e(4, 3)).unwrap(), 0.0);
        assert!(matches!(
            r3.metric_inner(&e(3, 0), &e(4, 0)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn geodesic_examples() {
        let r3 = SpaceForm::euclidean(3);
        let x = r3.geodesic(&DVector::zeros(3), &e(3, 0), 2.0).unwrap();
        assert_eq!(x, DVector::from_vec(vec![2.0, 0.0, 0.0]));

        let s2 = SpaceForm::sphere(2);
        let x = s2.geodesic(&e(3, 0), &e(3, 1), FRAC_PI_2).unwrap();
        assert!((x - e(3, 1)).norm() < 1e-15);

        let h3 = SpaceForm::hyperbolic(3);
        let x = h3.geodesic(&e(4, 3), &e(4, 0), 1.0).unwrap();
        let want = DVector::from_vec(vec![1f64.sinh(), 0.0, 0.0, 1f64.cosh()]);
        assert!((x - want).norm() < 1e-15);
    }

    #[test]
    fn geodesic_rejects_bad_velocity() {
        let s2 = SpaceForm::sphere(2);
        assert!(matches!(
            s2.geodesic(&e(3, 0), &e(3, 0), 1.0),
            Err(Error::NotTangent { .. })
        ));
        assert!(matches!(
            s2.geodesic(&e(3, 0), &(e(3, 1) * 2.0), 1.0),
            Err(Error::NotUnit { .. })
        ));
    }

    #[test]
    fn geodesic_at_zero_is_exact() {
        let h3 = SpaceForm::hyperbolic(3);
        let p = DVector::from_vec(vec![0.3f64.sinh(), 0.0, 0.0, 0.3f64.cosh()]);
        let v = DVector::from_vec(vec![0.0, 1.0, 0.0, 0.0]);
        assert_eq!(h3.geodesic(&p, &v, 0.0).unwrap(), p);
    }

    #[test]
    fn transport_examples() {
        let r3 = SpaceForm::euclidean(3);
        let w = DVector::from_vec(vec![0.2, -1.0, 3.0]);
        assert_eq!(
            r3.parallel_transport(&DVector::zeros(3), &e(3, 0), &w, 7.0).unwrap(),
            w
        );
        let s2 = SpaceForm::sphere(2);
        let t = s2
            .parallel_transport(&e(3, 0), &e(3, 1), &e(3, 1), FRAC_PI_2)
            .unwrap();
        assert!((t + e(3, 0)).norm() < 1e-15);
        for s in [0.1, 1.0, 2.5] {
            let t = s2.parallel_transport(&e(3, 0), &e(3, 1), &e(3, 2), s).unwrap();
            assert_eq!(t, e(3, 2));
        }
    }

    #[test]
    fn distances() {
        let s2 = SpaceForm::sphere(2);
        assert!((s2.distance(&e(3, 0), &e(3, 1)) - FRAC_PI_2).abs() < 1e-15);
        let h3 = SpaceForm::hyperbolic(3);
        let x = h3.geodesic(&e(4, 3), &e(4, 0), 1.3).unwrap();
        assert!((h3.distance(&e(4, 3), &x) - 1.3).abs() < 1e-14);
    }
}
