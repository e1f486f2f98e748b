//! Fundamental forms, normal frames and shape operators.
//!
//! Sign convention: `α(X,Y)` is the normal part of the ambient derivative
//! of `Y` along `X`, and `<A_ξ X, Y> = <α(X,Y), ξ>`.

use nalgebra::{DMatrix, DVector};

use crate::ambient::SpaceForm;
use crate::error::{Error, Result};
use crate::immersion::{ChartedImmersion, ImmersionJet};
use crate::linalg::gram_schmidt;

/// Largest admissible condition number of the first fundamental form.
pub const MAX_CONDITION: f64 = 1e12;

/// Second-order extrinsic data at one point of `M`.
#[derive(Debug, Clone)]
pub struct ShapeData {
    pub space: SpaceForm,
    pub param: DVector<f64>,
    pub point: DVector<f64>,
    /// First fundamental form in parameter coordinates.
    pub g: DMatrix<f64>,
    /// Columns of `∂f`.
    pub tangent_frame: Vec<DVector<f64>>,
    /// Lower Cholesky factor, `g = L Lᵀ`.
    pub chol: DMatrix<f64>,
    /// `g`-orthonormal tangent frame `∂f · L⁻ᵀ`.
    pub orthonormal_tangent: Vec<DVector<f64>>,
    pub normal_frame: Vec<DVector<f64>>,
    /// `alpha[a][(i,j)] = <∂²f_ij, ξ_a>` in parameter coordinates.
    pub alpha: Vec<DMatrix<f64>>,
    /// `g⁻¹ alpha[a]`.
    pub shape_ops: Vec<DMatrix<f64>>,
    /// Shape operators in the orthonormal tangent frame (symmetric).
    pub ortho_shape_ops: Vec<DMatrix<f64>>,
    second: Vec<DVector<f64>>,
}

/// Projection of ambient vectors onto the normal space of `M` inside the
/// space form: `v - S (SᵀGS)⁻¹ SᵀG v` with `S = [∂f, position]`.
#[derive(Debug, Clone)]
pub struct NormalProjector {
    space: SpaceForm,
    s: DMatrix<f64>,
    gram_inv: DMatrix<f64>,
}

impl NormalProjector {
    pub fn new(space: SpaceForm, point: &DVector<f64>, tangents: &[DVector<f64>]) -> Result<Self> {
        let mut cols: Vec<DVector<f64>> = tangents.to_vec();
        if space.is_curved() {
            cols.push(point.clone());
        }
        let s = DMatrix::from_columns(&cols);
        let gs = space.metric_matrix() * &s;
        let gram = s.transpose() * gs;
        let gram_inv = gram.clone().try_inverse().ok_or(Error::DegenerateMetric {
            condition: f64::INFINITY,
        })?;
        Ok(Self { space, s, gram_inv })
    }

    pub fn project(&self, v: &DVector<f64>) -> DVector<f64> {
        let sg = DVector::from_iterator(
            self.s.ncols(),
            (0..self.s.ncols()).map(|j| self.space.inner(&self.s.column(j).into_owned(), v)),
        );
        v - &self.s * (&self.gram_inv * sg)
    }
}

fn check_metric(g: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let ev = g.clone().symmetric_eigenvalues();
    let (lo, hi) = (ev.min(), ev.max());
    if lo <= 0.0 || hi / lo > MAX_CONDITION {
        return Err(Error::DegenerateMetric {
            condition: if lo <= 0.0 { f64::INFINITY } else { hi / lo },
        });
    }
    let chol = g.clone().cholesky().ok_or(Error::DegenerateMetric {
        condition: hi / lo,
    })?;
    Ok(chol.l())
}

/// Normal frame by Gram–Schmidt of the standard basis, taken in `order`,
/// against the tangent space (and the position vector for curved targets).
fn normal_frame_from(
    space: &SpaceForm,
    proj: &NormalProjector,
    order: &[usize],
    k: usize,
) -> Result<Vec<DVector<f64>>> {
    let n = space.embed_dim();
    let candidates: Vec<DVector<f64>> = order
        .iter()
        .map(|&i| {
            let mut e = DVector::zeros(n);
            e[i] = 1.0;
            proj.project(&e)
        })
        .collect();
    let inner = |a: &DVector<f64>, b: &DVector<f64>| space.inner(a, b);
    // a coarse threshold first avoids nearly dependent candidates
    for tol in [1e-3, 1e-10] {
        let frame = gram_schmidt(&candidates, &[], inner, tol, k);
        if frame.len() == k {
            // one more projection keeps the frame exactly normal
            return Ok(frame
                .into_iter()
                .map(|v| {
                    let w = proj.project(&v);
                    let nn = space.inner(&w, &w).sqrt();
                    w / nn
                })
                .collect());
        }
    }
    Err(Error::EmptyNormalSpace)
}

impl ShapeData {
    /// Shape data with a normal frame built from the standard basis.
    pub fn new(jet: &ImmersionJet, space: &SpaceForm) -> Result<Self> {
        let order: Vec<usize> = (0..space.embed_dim()).collect();
        Self::with_candidate_order(jet, space, &order)
    }

    /// As [`ShapeData::new`], with the Gram–Schmidt candidates taken in the
    /// given order of standard basis vectors.
    pub fn with_candidate_order(jet: &ImmersionJet, space: &SpaceForm, order: &[usize]) -> Result<Self> {
        let (g, chol, proj) = Self::intrinsic(jet, space)?;
        let m = jet.param_dim();
        if space.dim <= m {
            return Err(Error::EmptyNormalSpace);
        }
        let frame = normal_frame_from(space, &proj, order, space.dim - m)?;
        Ok(Self::assemble(jet, space, g, chol, frame))
    }

    /// Shape data with a prescribed normal frame (closed form or continued).
    /// The frame is re-projected and re-orthonormalized.
    pub fn with_normal_frame(jet: &ImmersionJet, space: &SpaceForm, frame: &[DVector<f64>]) -> Result<Self> {
        let (g, chol, proj) = Self::intrinsic(jet, space)?;
        let m = jet.param_dim();
        if space.dim <= m {
            return Err(Error::EmptyNormalSpace);
        }
        if frame.len() != space.dim - m {
            return Err(Error::DimensionMismatch {
                expected: space.dim - m,
                got: frame.len(),
            });
        }
        let projected: Vec<DVector<f64>> = frame.iter().map(|v| proj.project(v)).collect();
        let inner = |a: &DVector<f64>, b: &DVector<f64>| space.inner(a, b);
        let out = gram_schmidt(&projected, &[], inner, 0.5, frame.len());
        if out.len() != frame.len() {
            return Err(Error::FrameContinuation(
                "normal frame collapsed under projection".into(),
            ));
        }
        Ok(Self::assemble(jet, space, g, chol, out))
    }

    /// Shape data at `u`, using the immersion's closed-form normal frame
    /// when it has one.
    pub fn at(imm: &ChartedImmersion, u: &DVector<f64>) -> Result<Self> {
        let jet = imm.jet2(u)?;
        match imm.closed_form_normals(u) {
            Some(frame) => Self::with_normal_frame(&jet, &imm.space, &frame),
            None => Self::new(&jet, &imm.space),
        }
    }

    fn intrinsic(jet: &ImmersionJet, space: &SpaceForm) -> Result<(DMatrix<f64>, DMatrix<f64>, NormalProjector)> {
        if jet.point.len() != space.embed_dim() {
            return Err(Error::DimensionMismatch {
                expected: space.embed_dim(),
                got: jet.point.len(),
            });
        }
        let gm = space.metric_matrix();
        let g = jet.first.transpose() * &gm * &jet.first;
        let g = (&g + g.transpose()) * 0.5;
        let chol = check_metric(&g)?;
        let tangents: Vec<DVector<f64>> = (0..jet.param_dim()).map(|i| jet.tangent(i)).collect();
        let proj = NormalProjector::new(*space, &jet.point, &tangents)?;
        Ok((g, chol, proj))
    }

    fn assemble(
        jet: &ImmersionJet,
        space: &SpaceForm,
        g: DMatrix<f64>,
        chol: DMatrix<f64>,
        normal_frame: Vec<DVector<f64>>,
    ) -> Self {
        let m = jet.param_dim();
        let tangent_frame: Vec<DVector<f64>> = (0..m).map(|i| jet.tangent(i)).collect();
        let l_inv = chol
            .clone()
            .solve_lower_triangular(&DMatrix::identity(m, m))
            .expect("cholesky factor is invertible");
        let ortho = &jet.first * l_inv.transpose();
        let orthonormal_tangent = (0..m).map(|i| ortho.column(i).into_owned()).collect();
        let g_inv = g.clone().try_inverse().expect("checked positive definite");
        let mut alpha = Vec::with_capacity(normal_frame.len());
        let mut shape_ops = Vec::with_capacity(normal_frame.len());
        let mut ortho_shape_ops = Vec::with_capacity(normal_frame.len());
        for xi in &normal_frame {
            let a = DMatrix::from_fn(m, m, |i, j| space.inner(jet.second(i, j), xi));
            shape_ops.push(&g_inv * &a);
            ortho_shape_ops.push(&l_inv * &a * l_inv.transpose());
            alpha.push(a);
        }
        Self {
            space: *space,
            param: jet.param.clone(),
            point: jet.point.clone(),
            g,
            tangent_frame,
            chol,
            orthonormal_tangent,
            normal_frame,
            alpha,
            shape_ops,
            ortho_shape_ops,
            second: jet.second.clone(),
        }
    }

    pub fn param_dim(&self) -> usize {
        self.g.nrows()
    }

    pub fn codimension(&self) -> usize {
        self.normal_frame.len()
    }

    pub fn projector(&self) -> NormalProjector {
        NormalProjector::new(self.space, &self.point, &self.tangent_frame).expect("valid shape data")
    }

    /// Ambient image of a parameter-space vector.
    pub fn push_forward(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.point.len());
        for (i, t) in self.tangent_frame.iter().enumerate() {
            out.axpy(x[i], t, 1.0);
        }
        out
    }

    /// Parameter-space vector with the given orthonormal-frame coordinates.
    pub fn from_orthonormal(&self, c: &DVector<f64>) -> DVector<f64> {
        self.chol
            .transpose()
            .solve_upper_triangular(c)
            .expect("cholesky factor is invertible")
    }

    /// Orthonormal-frame coordinates of a parameter-space vector.
    pub fn to_orthonormal(&self, x: &DVector<f64>) -> DVector<f64> {
        self.chol.transpose() * x
    }

    /// Tangential part of an ambient vector, in parameter coordinates.
    pub fn tangent_coords(&self, w: &DVector<f64>) -> DVector<f64> {
        let m = self.param_dim();
        let rhs = DVector::from_iterator(m, self.tangent_frame.iter().map(|t| self.space.inner(t, w)));
        self.g.clone().cholesky().expect("positive definite").solve(&rhs)
    }

    /// `α(∂_i, ∂_j)` as an ambient normal vector.
    pub fn alpha_vector(&self, i: usize, j: usize) -> DVector<f64> {
        let m = self.param_dim();
        let mut out = DVector::zeros(self.point.len());
        for (a, xi) in self.normal_frame.iter().enumerate() {
            out.axpy(self.alpha[a][(i, j)], xi, 1.0);
        }
        debug_assert!(i < m && j < m);
        out
    }

    /// `α(X,Y)` for parameter-space vectors.
    pub fn alpha_of(&self, x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        let m = self.param_dim();
        let mut out = DVector::zeros(self.point.len());
        for i in 0..m {
            for j in 0..m {
                let c = x[i] * y[j];
                if c != 0.0 {
                    out.axpy(c, &self.alpha_vector(i, j), 1.0);
                }
            }
        }
        out
    }

    /// Components `<∂²f_ij, ξ>` for an arbitrary normal vector `ξ`.
    pub fn alpha_along(&self, xi: &DVector<f64>) -> DMatrix<f64> {
        let m = self.param_dim();
        DMatrix::from_fn(m, m, |i, j| self.space.inner(&self.second[i * m + j], xi))
    }

    /// `A_ξ` in parameter coordinates.
    pub fn shape_operator(&self, xi: &DVector<f64>) -> DMatrix<f64> {
        let g_inv = self.g.clone().try_inverse().expect("positive definite");
        g_inv * self.alpha_along(xi)
    }

    /// `A_ξ` in the orthonormal tangent frame.
    pub fn ortho_shape_operator(&self, xi: &DVector<f64>) -> DMatrix<f64> {
        let m = self.param_dim();
        let l_inv = self
            .chol
            .clone()
            .solve_lower_triangular(&DMatrix::identity(m, m))
            .expect("invertible");
        &l_inv * self.alpha_along(xi) * l_inv.transpose()
    }

    /// Largest asymmetry of the `alpha` blocks.
    pub fn alpha_asymmetry(&self) -> f64 {
        self.alpha
            .iter()
            .map(|a| (a - a.transpose()).amax())
            .fold(0.0, f64::max)
    }

    /// Largest inner product of the normal frame with the tangent frame or
    /// the position vector.
    pub fn normal_defect(&self) -> f64 {
        let mut d: f64 = 0.0;
        for xi in &self.normal_frame {
            for t in &self.tangent_frame {
                d = d.max(self.space.inner(xi, t).abs());
            }
            if self.space.is_curved() {
                d = d.max(self.space.inner(xi, &self.point).abs());
            }
        }
        d
    }
}

/// Mean curvature vector and sectional curvature of a surface.
pub fn mean_curvature_and_gauss(shape: &ShapeData) -> Result<(DVector<f64>, f64)> {
    if shape.param_dim() != 2 {
        return Err(Error::Unsupported(format!(
            "a surface (m = 2), got m = {}",
            shape.param_dim()
        )));
    }
    let mut h = DVector::zeros(shape.point.len());
    let mut ext = 0.0;
    for (a, xi) in shape.normal_frame.iter().enumerate() {
        let s = &shape.ortho_shape_ops[a];
        h.axpy(0.5 * (s[(0, 0)] + s[(1, 1)]), xi, 1.0);
        ext += s[(0, 0)] * s[(1, 1)] - s[(0, 1)] * s[(0, 1)];
    }
    Ok((h, shape.space.curvature() + ext))
}

/// Carry a normal frame from one point to a nearby one: project onto the
/// new normal space and re-orthonormalize in the same order.
pub fn continue_normal_frame(prev: &[DVector<f64>], jet: &ImmersionJet, space: &SpaceForm) -> Result<ShapeData> {
    ShapeData::with_normal_frame(jet, space, prev)
}

/// Codazzi probe: largest asymmetry in `(i, j)` of `(∇̄_i α)(∂_j, ∂_k)`,
/// with the derivative taken by central differences of step `h`.
pub fn codazzi_residual(imm: &ChartedImmersion, u: &DVector<f64>, h: f64) -> Result<f64> {
    let m = imm.param_dim;
    let center = ShapeData::new(&imm.jet2(u)?, &imm.space)?;
    let alpha_vectors = |s: &ShapeData| -> Vec<DVector<f64>> {
        (0..m * m).map(|ij| s.alpha_vector(ij / m, ij % m)).collect()
    };
    let mut dalpha = Vec::with_capacity(m);
    for i in 0..m {
        let mut up = u.clone();
        up[i] += h;
        let mut dn = u.clone();
        dn[i] -= h;
        let ap = alpha_vectors(&ShapeData::new(&imm.jet2(&up)?, &imm.space)?);
        let am = alpha_vectors(&ShapeData::new(&imm.jet2(&dn)?, &imm.space)?);
        let proj = center.projector();
        dalpha.push(
            ap.iter()
                .zip(&am)
                .map(|(p, q)| proj.project(&((p - q) / (2.0 * h))))
                .collect::<Vec<_>>(),
        );
    }
    // Γ^l_ij = g^{lp} <∂_i∂_j f, ∂_p f>
    let g_inv = center.g.clone().try_inverse().expect("positive definite");
    let gamma = |i: usize, j: usize| -> DVector<f64> {
        let w = DVector::from_iterator(
            m,
            center
                .tangent_frame
                .iter()
                .map(|t| center.space.inner(&center.second[i * m + j], t)),
        );
        &g_inv * w
    };
    let cov = |i: usize, j: usize, k: usize| -> DVector<f64> {
        let mut c = dalpha[i][j * m + k].clone();
        let gij = gamma(i, j);
        let gik = gamma(i, k);
        for l in 0..m {
            c.axpy(-gij[l], &center.alpha_vector(l, k), 1.0);
            c.axpy(-gik[l], &center.alpha_vector(j, l), 1.0);
        }
        c
    };
    let mut worst: f64 = 0.0;
    for i in 0..m {
        for j in 0..m {
            for k in 0..m {
                let d = cov(i, j, k) - cov(j, i, k);
                worst = worst.max(center.space.norm(&d));
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::immersion::{catalog, cylinder, great_sphere, lookup, plane, round_sphere};

    fn u(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    #[test]
    fn cylinder_shape_operator() {
        let c = cylinder();
        let p = u(&[0.4, -1.0]);
        let s = ShapeData::new(&c.jet2(&p).unwrap(), &c.space).unwrap();
        let outward = u(&[0.4f64.cos(), 0.4f64.sin(), 0.0]);
        let a = s.ortho_shape_operator(&outward);
        let want = DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, 0.0]);
        assert!((a - want).amax() < 1e-12);
    }

    #[test]
    fn plane_and_great_sphere_are_totally_geodesic() {
        for imm in [plane(), great_sphere()] {
            for p in imm.eval_box.grid(3) {
                let s = ShapeData::new(&imm.jet2(&p).unwrap(), &imm.space).unwrap();
                assert!(s.alpha.iter().all(|a| a.amax() < 1e-12), "{}", imm.name);
                assert!(s.shape_ops.iter().all(|a| a.amax() < 1e-12));
            }
        }
    }

    #[test]
    fn gauss_curvature_examples() {
        let p = plane();
        let s = ShapeData::at(&p, &u(&[1.0, 2.0])).unwrap();
        assert_eq!(mean_curvature_and_gauss(&s).unwrap().1, 0.0);
        let sph = round_sphere();
        for q in sph.eval_box.grid(4) {
            let s = ShapeData::new(&sph.jet2(&q).unwrap(), &sph.space).unwrap();
            let (h, k) = mean_curvature_and_gauss(&s).unwrap();
            assert!((k - 1.0).abs() < 1e-10);
            assert!((h.norm() - 1.0).abs() < 1e-10);
        }
        let circle = lookup("circle").unwrap();
        let s = ShapeData::at(&circle, &u(&[0.0])).unwrap();
        assert!(mean_curvature_and_gauss(&s).is_err());
    }

    #[test]
    fn invariants_hold_on_catalog() {
        for imm in catalog() {
            for p in imm.eval_box.grid(3) {
                let s = ShapeData::new(&imm.jet2(&p).unwrap(), &imm.space).unwrap();
                assert!(s.alpha_asymmetry() < 1e-10, "{}", imm.name);
                assert!(s.normal_defect() < 1e-10, "{}", imm.name);
                for xi in &s.normal_frame {
                    assert!((s.space.inner(xi, xi) - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn candidate_order_does_not_change_kernel_data() {
        let imm = lookup("sphere_orbit").unwrap();
        let p = u(&[0.7, 1.1]);
        let jet = imm.jet2(&p).unwrap();
        let a = ShapeData::new(&jet, &imm.space).unwrap();
        let b = ShapeData::with_candidate_order(&jet, &imm.space, &[3, 1, 0, 2]).unwrap();
        let xi = &a.normal_frame[0];
        let ea = a.ortho_shape_operator(xi).symmetric_eigenvalues();
        let eb = b.ortho_shape_operator(xi).symmetric_eigenvalues();
        let mut ea: Vec<f64> = ea.iter().copied().collect();
        let mut eb: Vec<f64> = eb.iter().copied().collect();
        ea.sort_by(f64::total_cmp);
        eb.sort_by(f64::total_cmp);
        for (x, y) in ea.iter().zip(&eb) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn codazzi_residual_is_second_order() {
        let imm = lookup("sphere_orbit").unwrap();
        let p = u(&[0.3, 1.2]);
        let hs = [1e-2, 5e-3, 2.5e-3];
        let r: Vec<f64> = hs.iter().map(|&h| codazzi_residual(&imm, &p, h).unwrap()).collect();
        assert!(r[2] < 1e-4, "{r:?}");
        if r[0] > 1e-12 {
            let order = crate::linalg::fitted_order(&hs, &r);
            assert!(order > 1.7, "order {order}, residuals {r:?}");
        }
    }
}
