//! Nullity subspaces, index scans and leaf checks.

use std::collections::VecDeque;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ambient::SpaceKind;
use crate::error::{Error, Result};
use crate::immersion::{ChartedImmersion, ParamBox};
use crate::linalg::gram_schmidt;
use crate::projection::{project, ProjectionOptions};
use crate::shape::ShapeData;

/// Default relative kernel tolerance.
pub const DEFAULT_TAU: f64 = 1e-7;
/// Singular values below this are always treated as zero.
pub const ABSOLUTE_FLOOR: f64 = 1e-9;
/// Kernels whose singular-value gap is below this are ambiguous.
pub const MIN_GAP: f64 = 1e3;
/// Stand-in for an infinite gap, so reports stay valid JSON.
pub const GAP_CAP: f64 = 1e300;

/// Kernel of the stacked shape operators at one point.
#[derive(Debug, Clone)]
pub struct NullityData {
    pub param: DVector<f64>,
    pub mu: usize,
    /// `g`-orthonormal nullity basis in parameter coordinates.
    pub basis_param: Vec<DVector<f64>>,
    pub basis_ambient: Vec<DVector<f64>>,
    /// `g`-orthonormal basis of the orthogonal complement (horizontal space).
    pub complement_param: Vec<DVector<f64>>,
    pub complement_ambient: Vec<DVector<f64>>,
    /// Full spectrum of the stacked shape operators, descending.
    pub singular_values: Vec<f64>,
    pub gap: f64,
    pub ambiguous: bool,
}

impl NullityData {
    /// Largest component of a unit ambient vector outside the nullity span.
    pub fn horizontal_component(&self, w: &DVector<f64>, space: &crate::SpaceForm) -> f64 {
        self.basis_ambient
            .iter()
            .map(|n| space.inner(w, n).abs())
            .fold(0.0, f64::max)
    }
}

// Deterministic orientation: largest entry positive.
fn orient(v: DVector<f64>) -> DVector<f64> {
    let i = v.iamax();
    if v[i] < 0.0 {
        -v
    } else {
        v
    }
}

/// Nullity subspace by singular-value thresholding at `tau * sigma_max`.
pub fn nullity_space(shape: &ShapeData, tau: f64) -> NullityData {
    let m = shape.param_dim();
    let k = shape.ortho_shape_ops.len();
    let rows = (k * m).max(m);
    let mut stack = DMatrix::zeros(rows, m);
    for (a, s) in shape.ortho_shape_ops.iter().enumerate() {
        stack.view_mut((a * m, 0), (m, m)).copy_from(s);
    }
    let svd = stack.svd(false, true);
    let vt = svd.v_t.expect("v requested");
    let mut idx: Vec<usize> = (0..m).collect();
    idx.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let sv: Vec<f64> = idx.iter().map(|&i| svd.singular_values[i]).collect();
    let smax = sv[0];
    let threshold = (tau * smax).max(ABSOLUTE_FLOOR);
    let rank = sv.iter().filter(|&&s| s > threshold).count();
    let mu = m - rank;
    let gap = if rank == 0 || mu == 0 {
        GAP_CAP
    } else {
        let lo = sv[rank - 1];
        let hi = sv[rank].max(f64::EPSILON * smax);
        (lo / hi).min(GAP_CAP)
    };
    let to_param = |row: usize| orient(shape.from_orthonormal(&vt.row(row).transpose()));
    let basis_param: Vec<DVector<f64>> = idx[rank..].iter().map(|&i| to_param(i)).collect();
    let complement_param: Vec<DVector<f64>> = idx[..rank].iter().map(|&i| to_param(i)).collect();
    let basis_ambient = basis_param.iter().map(|x| shape.push_forward(x)).collect();
    let complement_ambient = complement_param.iter().map(|x| shape.push_forward(x)).collect();
    NullityData {
        param: shape.param.clone(),
        mu,
        basis_param,
        basis_ambient,
        complement_param,
        complement_ambient,
        singular_values: sv,
        gap,
        ambiguous: gap < MIN_GAP,
    }
}

/// Shape data and nullity at a parameter point.
pub fn nullity_at(imm: &ChartedImmersion, u: &DVector<f64>, tau: f64) -> Result<(ShapeData, NullityData)> {
    let shape = ShapeData::at(imm, u)?;
    let n = nullity_space(&shape, tau);
    Ok((shape, n))
}

/// Re-express `basis` (ambient, at a nearby point) so that it continues
/// `reference`: project the reference vectors onto the new span and
/// re-orthonormalize in order. Returns the matching parameter vectors too.
pub(crate) fn continue_basis(
    shape: &ShapeData,
    new_param: &[DVector<f64>],
    reference_ambient: &[DVector<f64>],
) -> Result<(Vec<DVector<f64>>, Vec<DVector<f64>>)> {
    if new_param.len() != reference_ambient.len() {
        return Err(Error::FrameContinuation(format!(
            "dimension changed from {} to {}",
            reference_ambient.len(),
            new_param.len()
        )));
    }
    let space = shape.space;
    let new_ambient: Vec<DVector<f64>> = new_param.iter().map(|x| shape.push_forward(x)).collect();
    // coefficients of each reference vector in the new (orthonormal) basis
    let mut coeffs = Vec::with_capacity(new_param.len());
    for r in reference_ambient {
        coeffs.push(DVector::from_iterator(
            new_ambient.len(),
            new_ambient.iter().map(|b| space.inner(r, b)),
        ));
    }
    let ortho = gram_schmidt(&coeffs, &[], |a, b| a.dot(b), 0.3, coeffs.len());
    if ortho.len() != coeffs.len() {
        return Err(Error::FrameContinuation(
            "frame rotated too far between neighbouring points".into(),
        ));
    }
    let combine = |c: &DVector<f64>, vs: &[DVector<f64>]| {
        let mut out = DVector::zeros(vs[0].len());
        for (ci, v) in c.iter().zip(vs) {
            out.axpy(*ci, v, 1.0);
        }
        out
    };
    let param = ortho.iter().map(|c| combine(c, new_param)).collect();
    let ambient = ortho.iter().map(|c| combine(c, &new_ambient)).collect();
    Ok((param, ambient))
}

/// One grid point of an index scan.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IndexPoint {
    pub param: Vec<f64>,
    pub mu: Option<usize>,
    pub gap: f64,
    pub ambiguous: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IndexComponent {
    pub mu: usize,
    pub size: usize,
    /// Grid indices of the members.
    pub members: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IndexScan {
    pub per_axis: usize,
    pub points: Vec<IndexPoint>,
    pub components: Vec<IndexComponent>,
    pub ambiguous: Vec<usize>,
    pub failed: Vec<usize>,
}

impl IndexScan {
    /// Distinct indices over the unambiguous points.
    pub fn distinct_mu(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self
            .points
            .iter()
            .filter(|p| !p.ambiguous)
            .filter_map(|p| p.mu)
            .collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn is_constant(&self) -> bool {
        self.distinct_mu().len() == 1
    }

    pub fn min_gap(&self) -> f64 {
        self.points
            .iter()
            .filter(|p| p.mu.is_some())
            .map(|p| p.gap)
            .fold(f64::INFINITY, f64::min)
    }

    /// CSV with columns `u0..u{m-1}, mu, gap` (ambiguous and failed points
    /// have an empty `mu`).
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let m = self.points.first().map_or(0, |p| p.param.len());
        let mut header: Vec<String> = (0..m).map(|i| format!("u{i}")).collect();
        header.push("mu".into());
        header.push("gap".into());
        wr.write_record(&header).map_err(|e| Error::Io(e.to_string()))?;
        for p in &self.points {
            let mut rec: Vec<String> = p.param.iter().map(|x| format!("{x:.17e}")).collect();
            rec.push(match (p.mu, p.ambiguous) {
                (Some(mu), false) => mu.to_string(),
                _ => String::new(),
            });
            rec.push(format!("{:.6e}", p.gap));
            wr.write_record(&rec).map_err(|e| Error::Io(e.to_string()))?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Index of nullity on an `n`-per-axis grid of `grid_box`, grouped into
/// connected components of constant index.
pub fn index_scan(imm: &ChartedImmersion, grid_box: &ParamBox, n: usize, tau: f64) -> IndexScan {
    let params = grid_box.grid(n);
    let points: Vec<IndexPoint> = params
        .par_iter()
        .map(|u| match nullity_at(imm, u, tau) {
            Ok((_, d)) => IndexPoint {
                param: u.iter().copied().collect(),
                mu: Some(d.mu),
                gap: d.gap,
                ambiguous: d.ambiguous,
                error: None,
            },
            Err(e) => IndexPoint {
                param: u.iter().copied().collect(),
                mu: None,
                gap: 0.0,
                ambiguous: false,
                error: Some(e.to_string()),
            },
        })
        .collect();
    let m = grid_box.dim();
    let usable = |i: usize| points[i].mu.is_some() && !points[i].ambiguous;
    let mut label = vec![usize::MAX; points.len()];
    let mut components = Vec::new();
    for start in 0..points.len() {
        if label[start] != usize::MAX || !usable(start) {
            continue;
        }
        let mu = points[start].mu.unwrap();
        let id = components.len();
        let mut members = Vec::new();
        let mut queue = VecDeque::from([start]);
        label[start] = id;
        while let Some(i) = queue.pop_front() {
            members.push(i);
            // neighbours differ by one step along one axis (last axis fastest)
            let mut stride = 1;
            for _ in 0..m {
                let coord = (i / stride) % n;
                let mut nbrs = Vec::with_capacity(2);
                if coord > 0 {
                    nbrs.push(i - stride);
                }
                if coord + 1 < n {
                    nbrs.push(i + stride);
                }
                for j in nbrs {
                    if label[j] == usize::MAX && usable(j) && points[j].mu == Some(mu) {
                        label[j] = id;
                        queue.push_back(j);
                    }
                }
                stride *= n;
            }
        }
        members.sort_unstable();
        components.push(IndexComponent {
            mu,
            size: members.len(),
            members,
        });
    }
    let ambiguous = (0..points.len()).filter(|&i| points[i].ambiguous).collect();
    let failed = (0..points.len()).filter(|&i| points[i].mu.is_none()).collect();
    IndexScan {
        per_axis: n,
        points,
        components,
        ambiguous,
        failed,
    }
}

/// Derivatives of the normal projector along nullity and horizontal directions.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GaussKernelCheck {
    /// Largest `|dP(x)|` over the nullity basis (should vanish).
    pub nullity_max: f64,
    /// Smallest `|dP(x)|` over unit `x ⟂ 𝒩` (should not), `None` when `μ = m`.
    pub complement_min: Option<f64>,
}

fn normal_projector_matrix(shape: &ShapeData) -> DMatrix<f64> {
    let n = shape.point.len();
    let mut p = DMatrix::zeros(n, n);
    for xi in &shape.normal_frame {
        p += xi * xi.transpose();
    }
    p
}

/// Check `𝒩 = ker dG` for the Gauss map `G` of a Euclidean submanifold.
/// Frobenius norms; derivatives by fourth-order central differences.
pub fn gauss_kernel_crosscheck(imm: &ChartedImmersion, u: &DVector<f64>, tau: f64) -> Result<GaussKernelCheck> {
    if imm.space.kind != SpaceKind::Euclidean {
        return Err(Error::Unsupported("a Euclidean target".into()));
    }
    let (_, data) = nullity_at(imm, u, tau)?;
    let h = 1e-3;
    let dp = |x: &DVector<f64>| -> Result<DMatrix<f64>> {
        let mut acc = DMatrix::zeros(imm.space.embed_dim(), imm.space.embed_dim());
        for (a, w) in [(-2.0, 1.0), (-1.0, -8.0), (1.0, 8.0), (2.0, -1.0)] {
            let s = ShapeData::new(&imm.jet2(&(u + x * (a * h)))?, &imm.space)?;
            acc += normal_projector_matrix(&s) * w;
        }
        Ok(acc / (12.0 * h))
    };
    let mut nullity_max: f64 = 0.0;
    for x in &data.basis_param {
        nullity_max = nullity_max.max(dp(x)?.norm());
    }
    let complement_min = if data.complement_param.is_empty() {
        None
    } else {
        let cols: Vec<DVector<f64>> = data
            .complement_param
            .iter()
            .map(|x| dp(x).map(|d| DVector::from_column_slice(d.as_slice())))
            .collect::<Result<_>>()?;
        Some(DMatrix::from_columns(&cols).singular_values().min())
    };
    Ok(GaussKernelCheck {
        nullity_max,
        complement_min,
    })
}

/// Largest component of `∇_X Y` orthogonal to `𝒩`, over pairs of
/// continued nullity frame fields, with central differences of step `h`.
pub fn autoparallel_residual(imm: &ChartedImmersion, u: &DVector<f64>, h: f64, tau: f64) -> Result<f64> {
    let (shape, center) = nullity_at(imm, u, tau)?;
    if center.ambiguous {
        return Err(Error::AmbiguousKernel {
            param: u.iter().copied().collect(),
            gap: center.gap,
        });
    }
    if center.mu == 0 || center.complement_param.is_empty() {
        return Ok(0.0);
    }
    let field_at = |v: &DVector<f64>| -> Result<Vec<DVector<f64>>> {
        let (s, d) = nullity_at(imm, v, tau)?;
        if d.mu != center.mu {
            return Err(Error::NullityJump {
                param: v.iter().copied().collect(),
                from: center.mu,
                to: d.mu,
            });
        }
        if d.ambiguous {
            return Err(Error::AmbiguousKernel {
                param: v.iter().copied().collect(),
                gap: d.gap,
            });
        }
        Ok(continue_basis(&s, &d.basis_param, &center.basis_ambient)?.1)
    };
    let mut worst: f64 = 0.0;
    for x in &center.basis_param {
        let plus = field_at(&(u + x * h))?;
        let minus = field_at(&(u - x * h))?;
        for (yp, ym) in plus.iter().zip(&minus) {
            let dy = (yp - ym) / (2.0 * h);
            // tangential part in parameter coordinates, then its 𝒩^⊥ part
            let t = shape.tangent_coords(&dy);
            let amb = shape.push_forward(&t);
            let r: f64 = center
                .complement_ambient
                .iter()
                .map(|c| shape.space.inner(&amb, c).powi(2))
                .sum::<f64>()
                .sqrt();
            worst = worst.max(r);
        }
    }
    Ok(worst)
}

/// Why a leaf geodesic stopped being trackable on `M`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LeafExit {
    pub arclength: f64,
    pub last_param: Vec<f64>,
    pub reason: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LeafGeodesicCheck {
    pub max_residual: f64,
    pub steps_completed: usize,
    pub exit: Option<LeafExit>,
}

/// Shoot the ambient geodesic from `f(u)` in the nullity direction
/// `direction` (parameter coordinates; the first nullity basis vector when
/// `None`) and track its distance to `M` by continued projection.
pub fn leaf_geodesic_check(
    imm: &ChartedImmersion,
    u: &DVector<f64>,
    direction: Option<&DVector<f64>>,
    s_max: f64,
    n_steps: usize,
    tau: f64,
) -> Result<LeafGeodesicCheck> {
    let (shape, data) = nullity_at(imm, u, tau)?;
    if data.mu == 0 {
        return Err(Error::Unsupported("positive index of nullity".into()));
    }
    let dir = match direction {
        None => data.basis_param[0].clone(),
        Some(d) => {
            // keep only the nullity component
            let amb = shape.push_forward(d);
            let mut x = DVector::zeros(u.len());
            for (bp, ba) in data.basis_param.iter().zip(&data.basis_ambient) {
                x.axpy(shape.space.inner(&amb, ba), bp, 1.0);
            }
            let n = shape.space.norm(&shape.push_forward(&x));
            if n < 1e-12 {
                return Err(Error::NotTangent { defect: 1.0 });
            }
            x / n
        }
    };
    let v = shape.push_forward(&dir);
    let p = shape.point.clone();
    let opts = ProjectionOptions::default();
    let ds = s_max / n_steps as f64;
    let mut prev = u.clone();
    let mut prev2: Option<DVector<f64>> = None;
    let mut worst: f64 = 0.0;
    for k in 1..=n_steps {
        let s = k as f64 * ds;
        let x = imm.space.geodesic_unchecked(&p, &v, s);
        // linear extrapolation of the parameter track
        let seed = match &prev2 {
            Some(q) => &prev * 2.0 - q,
            None => &prev + &dir * ds,
        };
        match project(imm, &x, &seed, &opts) {
            Ok(pr) => {
                worst = worst.max(pr.distance);
                prev2 = Some(prev);
                prev = pr.param;
            }
            Err(e) => {
                return Ok(LeafGeodesicCheck {
                    max_residual: worst,
                    steps_completed: k - 1,
                    exit: Some(LeafExit {
                        arclength: s,
                        last_param: prev.iter().copied().collect(),
                        reason: e.to_string(),
                    }),
                });
            }
        }
    }
    Ok(LeafGeodesicCheck {
        max_residual: worst,
        steps_completed: n_steps,
        exit: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::immersion::{cone, cylinder, h3_counterexample, plane, round_sphere};

    fn u(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    #[test]
    fn cylinder_nullity_is_axis() {
        let c = cylinder();
        let (_, d) = nullity_at(&c, &u(&[0.7, -2.0]), DEFAULT_TAU).unwrap();
        assert_eq!(d.mu, 1);
        assert!(!d.ambiguous);
        assert!((d.basis_param[0].clone() - u(&[0.0, 1.0])).amax() < 1e-12);
    }

    #[test]
    fn plane_and_sphere_indices() {
        let (_, d) = nullity_at(&plane(), &u(&[0.0, 0.0]), DEFAULT_TAU).unwrap();
        assert_eq!(d.mu, 2);
        let (_, d) = nullity_at(&round_sphere(), &u(&[1.0, 0.5]), DEFAULT_TAU).unwrap();
        assert_eq!(d.mu, 0);
    }

    #[test]
    fn scans_are_constant() {
        let c = cylinder();
        let scan = index_scan(&c, &ParamBox::new(vec![-3.0, -3.0], vec![3.0, 3.0]), 20, DEFAULT_TAU);
        assert_eq!(scan.distinct_mu(), vec![1]);
        assert_eq!(scan.components.len(), 1);
        assert_eq!(scan.components[0].size, 400);
        let h = h3_counterexample();
        let scan = index_scan(&h, &ParamBox::new(vec![-3.0, -3.0], vec![3.0, 3.0]), 20, DEFAULT_TAU);
        assert_eq!(scan.distinct_mu(), vec![1]);
        let s = round_sphere();
        let scan = index_scan(&s, &s.eval_box.clone(), 8, DEFAULT_TAU);
        assert_eq!(scan.distinct_mu(), vec![0]);
    }

    #[test]
    fn scan_csv_has_header_and_rows() {
        let c = cylinder();
        let scan = index_scan(&c, &ParamBox::new(vec![0.0, 0.0], vec![1.0, 1.0]), 3, DEFAULT_TAU);
        let mut buf = Vec::new();
        scan.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("u0,u1,mu,gap"));
        assert_eq!(text.lines().count(), 10);
    }

    #[test]
    fn gauss_map_kernel() {
        let c = cylinder();
        let r = gauss_kernel_crosscheck(&c, &u(&[0.3, 0.2]), DEFAULT_TAU).unwrap();
        assert!(r.nullity_max < 1e-6);
        assert!(r.complement_min.unwrap() > 0.5);
        let r = gauss_kernel_crosscheck(&plane(), &u(&[0.3, 0.2]), DEFAULT_TAU).unwrap();
        assert!(r.nullity_max < 1e-10);
        assert!(r.complement_min.is_none());
        assert!(gauss_kernel_crosscheck(&h3_counterexample(), &u(&[0.0, 0.0]), DEFAULT_TAU).is_err());
    }

    #[test]
    fn autoparallel_examples() {
        assert!(autoparallel_residual(&cylinder(), &u(&[0.1, 0.0]), 1e-3, DEFAULT_TAU).unwrap() < 1e-6);
        assert!(autoparallel_residual(&plane(), &u(&[0.1, 0.0]), 1e-3, DEFAULT_TAU).unwrap() < 1e-10);
        assert!(autoparallel_residual(&h3_counterexample(), &u(&[0.5, 0.3]), 1e-3, DEFAULT_TAU).unwrap() < 1e-6);
    }

    #[test]
    fn leaf_geodesics() {
        let c = cylinder();
        let r = leaf_geodesic_check(&c, &u(&[0.0, -5.0]), None, 10.0, 100, DEFAULT_TAU).unwrap();
        assert!(r.exit.is_none());
        assert!(r.max_residual < 1e-8);

        let k = cone();
        let toward_apex = u(&[-1.0, 0.0]);
        let r = leaf_geodesic_check(&k, &u(&[1.0, 0.3]), Some(&toward_apex), 2.0, 200, DEFAULT_TAU).unwrap();
        let exit = r.exit.expect("the ruling leaves the punctured cone");
        assert!(exit.arclength > 0.9 && exit.arclength < 1.05, "{exit:?}");

        let h = h3_counterexample();
        for s0 in [-3.0, 0.0] {
            let r = leaf_geodesic_check(&h, &u(&[0.5, s0]), Some(&u(&[0.0, 1.0])), 3.0, 60, DEFAULT_TAU).unwrap();
            assert!(r.exit.is_none());
            assert!(r.max_residual < 1e-6);
        }
    }
}
