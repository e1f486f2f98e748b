//! Spherical tubes `S_ε(M)` around Euclidean submanifolds.
//!
//! The tube is charted by `(u, angles)`, the angles giving a unit vector in
//! the normal frame at `u`. For codimension one there is no sphere fiber:
//! the two parallel sheets are separate tubes.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::ambient::SpaceKind;
use crate::connectivity::{equivalence_class_probe, Distribution, ProbeConfig, ReachabilityReport, Split};
use crate::error::{Error, Result};
use crate::immersion::{ChartedImmersion, ParamBox};
use crate::linalg::{containment_defect, orthonormal_span, Pca};
use crate::nullity::{nullity_at, GAP_CAP, MIN_GAP};
use crate::projection::{project, ProjectionOptions};
use crate::shape::{continue_normal_frame, ShapeData};

type NormalField = Arc<dyn Fn(&DVector<f64>) -> Result<Vec<DVector<f64>>> + Send + Sync>;

/// Keep polar angles this far from the coordinate poles.
const POLE_MARGIN: f64 = 0.05;
/// Eigenvalues within this of 0 (resp. 1) form `E₀` (resp. `E₁`).
pub const EIGEN_FLOOR: f64 = 1e-7;

/// One tube (or one sheet) over a base immersion.
#[derive(Clone)]
pub struct Tube {
    pub base: ChartedImmersion,
    pub eps: f64,
    /// `±1` for a sheet of a codimension-one tube.
    pub sheet: Option<i8>,
    /// The tube itself, parametrized by `(u, angles)`.
    pub immersion: ChartedImmersion,
    pub focal_bound: f64,
    normals: NormalField,
}

impl std::fmt::Debug for Tube {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tube")
            .field("base", &self.base.name)
            .field("eps", &self.eps)
            .field("sheet", &self.sheet)
            .field("focal_bound", &self.focal_bound)
            .finish()
    }
}

/// Unit vector with hyperspherical angles `a` (`k - 1` of them).
pub fn sphere_point(a: &[f64]) -> DVector<f64> {
    let k = a.len() + 1;
    let mut y = DVector::zeros(k);
    let mut s = 1.0;
    for (i, ai) in a.iter().enumerate() {
        y[i] = s * ai.cos();
        s *= ai.sin();
    }
    y[k - 1] = s;
    y
}

// Normal frame along the base: closed form if available, otherwise
// continued along the straight segment from the centre of the box.
fn normal_field(imm: &ChartedImmersion) -> Result<NormalField> {
    if imm.has_closed_form_normals() {
        let imm = imm.clone();
        return Ok(Arc::new(move |u: &DVector<f64>| Ok(imm.closed_form_normals(u).expect("closed form"))));
    }
    let center = DVector::from_iterator(
        imm.param_dim,
        imm.eval_box.lower.iter().zip(&imm.eval_box.upper).map(|(a, b)| match (a.is_finite(), b.is_finite()) {
            (true, true) => 0.5 * (a + b),
            (true, false) => a + 1.0,
            (false, true) => b - 1.0,
            (false, false) => 0.0,
        }),
    );
    let start = ShapeData::new(&imm.jet2(&center)?, &imm.space)?.normal_frame;
    let imm = imm.clone();
    Ok(Arc::new(move |u: &DVector<f64>| {
        let mut frame = start.clone();
        let steps = 32;
        for i in 1..=steps {
            let p = &center + (u - &center) * (i as f64 / steps as f64);
            frame = continue_normal_frame(&frame, &imm.jet2_fast(&p)?, &imm.space)?.normal_frame;
        }
        Ok(frame)
    }))
}

/// Focal-radius estimate `1 / max ‖Â_ξ‖` over a grid of the base box
/// (bounded by the Frobenius norm of the stacked shape operators).
pub fn focal_bound(imm: &ChartedImmersion, per_axis: usize) -> Result<f64> {
    let finite = ParamBox::new(
        imm.eval_box.lower.iter().map(|x| x.max(-10.0)).collect(),
        imm.eval_box.upper.iter().map(|x| x.min(10.0)).collect(),
    );
    let normals = normal_field(imm)?;
    let mut worst: f64 = 0.0;
    for u in finite.grid(per_axis) {
        let jet = imm.jet2(&u)?;
        let shape = ShapeData::with_normal_frame(&jet, &imm.space, &normals(&u)?)?;
        let s: f64 = shape.ortho_shape_ops.iter().map(|a| a.norm_squared()).sum();
        worst = worst.max(s.sqrt());
    }
    Ok(if worst == 0.0 { f64::INFINITY } else { 1.0 / worst })
}

/// Tubes of radius `eps` around a Euclidean immersion: one tube when the
/// codimension is at least two, two sheets when it is one.
pub fn build_tube(imm: &ChartedImmersion, eps: f64) -> Result<Vec<Tube>> {
    if imm.space.kind != SpaceKind::Euclidean {
        return Err(Error::Unsupported("tubes need a Euclidean target".into()));
    }
    if !(eps > 0.0) {
        return Err(Error::Config(format!("tube radius must be positive, got {eps}")));
    }
    let bound = focal_bound(imm, 5)?;
    if eps >= bound {
        return Err(Error::FocalBound { eps, bound });
    }
    let normals = normal_field(imm)?;
    let k = imm.codimension();
    let m = imm.param_dim;
    if k == 1 {
        return Ok([1i8, -1]
            .into_iter()
            .map(|s| {
                let (b, nf) = (imm.clone(), normals.clone());
                let value = move |u: &DVector<f64>| {
                    let n = nf(u).expect("normal frame on the chart");
                    b.value_unchecked(u) + &n[0] * (s as f64 * eps)
                };
                let nf = normals.clone();
                let tube = ChartedImmersion::numeric(
                    &format!("tube({}, {eps}, {})", imm.name, if s > 0 { "+" } else { "-" }),
                    imm.space,
                    imm.domain.clone(),
                    imm.eval_box.clone(),
                    value,
                )
                .with_periods(imm.periods.clone())
                .with_normal_frame(move |u| vec![&nf(u).expect("normal frame on the chart")[0] * s as f64]);
                Tube {
                    base: imm.clone(),
                    eps,
                    sheet: Some(s),
                    immersion: tube,
                    focal_bound: bound,
                    normals: normals.clone(),
                }
            })
            .collect());
    }
    let mut lower = imm.eval_box.lower.clone();
    let mut upper = imm.eval_box.upper.clone();
    let mut dlower = imm.domain.lower.clone();
    let mut dupper = imm.domain.upper.clone();
    let mut periods = imm.periods.clone();
    for i in 0..k - 1 {
        let last = i == k - 2;
        let (lo, hi) = if last {
            (-2.0 * std::f64::consts::PI, 2.0 * std::f64::consts::PI)
        } else {
            (POLE_MARGIN, std::f64::consts::PI - POLE_MARGIN)
        };
        lower.push(lo);
        upper.push(hi);
        if last {
            dlower.push(f64::NEG_INFINITY);
            dupper.push(f64::INFINITY);
        } else {
            dlower.push(0.0);
            dupper.push(std::f64::consts::PI);
        }
        periods.push(last.then_some(2.0 * std::f64::consts::PI));
    }
    let unit = move |p: &DVector<f64>, nf: &NormalField| -> DVector<f64> {
        let u = p.rows(0, m).into_owned();
        let y = sphere_point(&p.as_slice()[m..]);
        let n = nf(&u).expect("normal frame on the chart");
        let mut out = DVector::zeros(n[0].len());
        for (yi, ni) in y.iter().zip(&n) {
            out.axpy(*yi, ni, 1.0);
        }
        out
    };
    let (b, nf) = (imm.clone(), normals.clone());
    let value = move |p: &DVector<f64>| b.value_unchecked(&p.rows(0, m).into_owned()) + unit(p, &nf) * eps;
    let nf = normals.clone();
    let tube = ChartedImmersion::numeric(
        &format!("tube({}, {eps})", imm.name),
        imm.space,
        ParamBox::new(dlower, dupper),
        ParamBox::new(lower, upper),
        value,
    )
    .with_periods(periods)
    .with_normal_frame(move |p| vec![unit(p, &nf)]);
    Ok(vec![Tube {
        base: imm.clone(),
        eps,
        sheet: None,
        immersion: tube,
        focal_bound: bound,
        normals,
    }])
}

impl Tube {
    pub fn base_dim(&self) -> usize {
        self.base.param_dim
    }

    pub fn dim(&self) -> usize {
        self.immersion.param_dim
    }

    /// Dimension of the sphere fiber (0 for a sheet).
    pub fn fiber_dim(&self) -> usize {
        self.dim() - self.base_dim()
    }

    pub fn base_param(&self, p: &DVector<f64>) -> DVector<f64> {
        p.rows(0, self.base_dim()).into_owned()
    }

    /// Outward unit normal `ξ` of the tube at `p`.
    pub fn normal(&self, p: &DVector<f64>) -> Result<DVector<f64>> {
        let u = self.base_param(p);
        let n = (self.normals)(&u)?;
        Ok(match self.sheet {
            Some(s) => &n[0] * s as f64,
            None => {
                let y = sphere_point(&p.as_slice()[self.base_dim()..]);
                let mut out = DVector::zeros(n[0].len());
                for (yi, ni) in y.iter().zip(&n) {
                    out.axpy(*yi, ni, 1.0);
                }
                out
            }
        })
    }

    /// `Ψ(x) = π(x) − x = −ε ξ`.
    pub fn psi(&self, p: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.normal(p)? * -self.eps)
    }

    /// `π(x) = x + Ψ(x)`.
    pub fn pi(&self, p: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.immersion.point(p)? + self.psi(p)?)
    }

    /// Distance defect `| |x − f(u)| − ε |` and normality defect of `x − f(u)`.
    pub fn point_defects(&self, p: &DVector<f64>) -> Result<(f64, f64)> {
        let u = self.base_param(p);
        let jet = self.base.jet2(&u)?;
        let d = self.immersion.point(p)? - &jet.point;
        let normal = (0..jet.param_dim())
            .map(|i| {
                let t = jet.tangent(i);
                d.dot(&t).abs() / t.norm()
            })
            .fold(0.0, f64::max);
        Ok(((d.norm() - self.eps).abs(), normal))
    }
}

/// Shape of the tube at one point, with respect to `Ψ`.
#[derive(Debug, Clone)]
pub struct TubeShape {
    pub param: DVector<f64>,
    pub point: DVector<f64>,
    /// `Â_Ψ` in the orthonormal tangent frame.
    pub a_psi: DMatrix<f64>,
    /// Ascending eigenvalues and matching orthonormal-frame eigenvectors.
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Vec<DVector<f64>>,
    /// `E₀`, `E₁` and the complement of `E₀`, as `g`-orthonormal parameter
    /// vectors.
    pub e0: Vec<DVector<f64>>,
    pub e1: Vec<DVector<f64>>,
    pub e0_complement: Vec<DVector<f64>>,
    /// Smallest eigenvalue ratio across the `E₀` and `E₁` cuts.
    pub gap: f64,
    pub ambiguous: bool,
    /// Containment defect of `ker dπ` (the fiber directions) in `E₁`.
    pub fiber_defect: f64,
    pub asymmetry: f64,
    pub shape: ShapeData,
}

// Ratio across a cut at `floor` for distances `d` to a target eigenvalue.
fn cluster(d: &[f64], floor: f64) -> (Vec<usize>, f64) {
    let inside: Vec<usize> = (0..d.len()).filter(|&i| d[i] <= floor).collect();
    let max_in = inside.iter().map(|&i| d[i]).fold(0.0, f64::max);
    let min_out = (0..d.len()).filter(|i| !inside.contains(i)).map(|i| d[i]).fold(f64::INFINITY, f64::min);
    let gap = if inside.is_empty() || min_out.is_infinite() || max_in == 0.0 {
        GAP_CAP
    } else {
        (min_out / max_in).min(GAP_CAP)
    };
    (inside, gap)
}

pub fn tube_shape(tube: &Tube, p: &DVector<f64>) -> Result<TubeShape> {
    let shape = ShapeData::at(&tube.immersion, p)?;
    let xi = tube.normal(p)?;
    let a = shape.ortho_shape_operator(&xi) * -tube.eps;
    let asymmetry = (&a - a.transpose()).amax();
    let sym = (&a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym.clone());
    let mut idx: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    idx.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let eigenvalues: Vec<f64> = idx.iter().map(|&i| eig.eigenvalues[i]).collect();
    let eigenvectors: Vec<DVector<f64>> = idx.iter().map(|&i| eig.eigenvectors.column(i).into_owned()).collect();
    let scale = sym.norm().max(1.0);
    let floor = (EIGEN_FLOOR * scale).max(1e-9);
    let d0: Vec<f64> = eigenvalues.iter().map(|l| l.abs()).collect();
    let d1: Vec<f64> = eigenvalues.iter().map(|l| (l - 1.0).abs()).collect();
    let (in0, gap0) = cluster(&d0, floor);
    let (in1, gap1) = cluster(&d1, floor);
    let gap = gap0.min(gap1);
    let to_param = |c: &DVector<f64>| shape.from_orthonormal(c);
    let e0 = in0.iter().map(|&i| to_param(&eigenvectors[i])).collect();
    let e1 = in1.iter().map(|&i| to_param(&eigenvectors[i])).collect();
    let e0_complement = (0..eigenvalues.len()).filter(|i| !in0.contains(i)).map(|i| to_param(&eigenvectors[i])).collect();
    let m = tube.base_dim();
    let fiber: Vec<DVector<f64>> = (m..tube.dim())
        .map(|i| {
            let mut e = DVector::zeros(tube.dim());
            e[i] = 1.0;
            shape.to_orthonormal(&e)
        })
        .collect();
    let fiber = orthonormal_span(&fiber, 1e-12);
    let e1_ortho: Vec<DVector<f64>> = in1.iter().map(|&i| eigenvectors[i].clone()).collect();
    let fiber_defect = containment_defect(&fiber, &e1_ortho);
    Ok(TubeShape {
        param: p.clone(),
        point: shape.point.clone(),
        a_psi: a,
        eigenvalues,
        eigenvectors,
        e0,
        e1,
        e0_complement,
        gap,
        ambiguous: gap < MIN_GAP,
        fiber_defect,
        asymmetry,
        shape,
    })
}

fn unambiguous(ts: &TubeShape) -> Result<()> {
    if !ts.ambiguous {
        return Ok(());
    }
    let near = |target: f64| {
        ts.eigenvalues
            .iter()
            .copied()
            .filter(|l| (l - target).abs() > EIGEN_FLOOR)
            .min_by(|a, b| (a - target).abs().total_cmp(&(b - target).abs()))
    };
    let (t, v) = [0.0, 1.0]
        .iter()
        .filter_map(|&t| near(t).map(|v| (t, v)))
        .min_by(|a, b| (a.1 - a.0).abs().total_cmp(&(b.1 - b.0).abs()))
        .unwrap_or((0.0, f64::NAN));
    Err(Error::AmbiguousEigenvalues { near: t, value: v })
}

/// Largest defect of `𝒩_{π(x)}` inside `dπ(E₀(x))` over the sample.
/// Zero (vacuous) where the base has no nullity.
pub fn nullity_projection_check(tube: &Tube, sample: &[DVector<f64>], tau: f64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for p in sample {
        let u = tube.base_param(p);
        let (_, data) = nullity_at(&tube.base, &u, tau)?;
        if data.mu == 0 {
            continue;
        }
        let ts = tube_shape(tube, p)?;
        unambiguous(&ts)?;
        let h = 1e-5;
        let pushed: Vec<DVector<f64>> = ts
            .e0
            .iter()
            .map(|v| {
                let d = h / v.norm();
                Ok((tube.pi(&(p + v * d))? - tube.pi(&(p - v * d))?) / (2.0 * d))
            })
            .collect::<Result<_>>()?;
        let span = orthonormal_span(&pushed, 1e-8);
        let nul: Vec<DVector<f64>> = data.basis_ambient.iter().map(|n| n.normalize()).collect();
        worst = worst.max(containment_defect(&nul, &span));
    }
    Ok(worst)
}

/// `E₀` on a tube, as a distribution for the reachability machinery.
pub struct E0Distribution<'a> {
    pub tube: &'a Tube,
}

impl Distribution for E0Distribution<'_> {
    fn immersion(&self) -> &ChartedImmersion {
        &self.tube.immersion
    }

    fn split(&self, u: &DVector<f64>) -> Result<Split> {
        let ts = tube_shape(self.tube, u)?;
        let amb = |v: &Vec<DVector<f64>>| v.iter().map(|x| ts.shape.push_forward(x)).collect();
        Ok(Split {
            kernel_ambient: amb(&ts.e0),
            horizontal_ambient: amb(&ts.e0_complement),
            kernel_param: ts.e0,
            horizontal_param: ts.e0_complement,
            gap: ts.gap,
            ambiguous: ts.ambiguous,
        })
    }
}

/// Fiber points reached from `x` by flowing the `E₀⊥`-part of the fiber
/// angle field.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FiberReach {
    pub angles: Vec<f64>,
    /// Distance from each flow endpoint to the fiber point it aims at.
    pub gaps: Vec<f64>,
    pub max_gap: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TubeReachability {
    pub probe: ReachabilityReport,
    pub tube_dim: usize,
    pub e0_dim: usize,
    /// `dim H(x) + dim E₀ = dim N`.
    pub consistent: bool,
    /// `S(x) ⊆ H(x)` check; absent for sheets (no sphere fiber).
    pub fiber: Option<FiberReach>,
}

impl TubeReachability {
    /// CSV point cloud (`x0..`) of all sampled path nodes.
    pub fn write_cloud_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let n = self.probe.paths.first().and_then(|p| p.nodes.first()).map_or(0, |n| n.point.len());
        wr.write_record((0..n).map(|i| format!("x{i}"))).map_err(|e| Error::Io(e.to_string()))?;
        for path in &self.probe.paths {
            for node in &path.nodes {
                wr.write_record(node.point.iter().map(|x| format!("{x:.17e}"))).map_err(|e| Error::Io(e.to_string()))?;
            }
        }
        wr.flush()?;
        Ok(())
    }
}

/// Sample `H(x)` inside the parameter box of half-width `half_width`
/// around `p`.
pub fn holonomy_tube_reachability(tube: &Tube, p: &DVector<f64>, half_width: f64, cfg: &ProbeConfig) -> Result<TubeReachability> {
    let dist = E0Distribution { tube };
    let ts = tube_shape(tube, p)?;
    unambiguous(&ts)?;
    let bbox = ParamBox::new(
        p.iter().zip(&tube.immersion.eval_box.lower).map(|(x, lo)| (x - half_width).max(*lo)).collect(),
        p.iter().zip(&tube.immersion.eval_box.upper).map(|(x, hi)| (x + half_width).min(*hi)).collect(),
    );
    let probe = equivalence_class_probe(&dist, p, &bbox, cfg)?;
    let e0_dim = ts.e0.len();
    let fiber = if tube.fiber_dim() == 0 {
        None
    } else {
        Some(fiber_reach(tube, &dist, p)?)
    };
    Ok(TubeReachability {
        consistent: probe.dimension.is_some_and(|d| d + e0_dim == tube.dim()),
        tube_dim: tube.dim(),
        e0_dim,
        fiber,
        probe,
    })
}

fn fiber_reach(tube: &Tube, dist: &E0Distribution<'_>, p: &DVector<f64>) -> Result<FiberReach> {
    let axis = tube.dim() - 1;
    let angles = vec![-1.0, -0.5, 0.5, 1.0];
    let mut gaps = Vec::new();
    let steps = 100;
    let h = 1.0 / steps as f64;
    for &da in &angles {
        let rhs = |x: &DVector<f64>| -> Result<DVector<f64>> {
            let s = dist.split(x)?;
            let shape = ShapeData::at(&tube.immersion, x)?;
            let mut e = DVector::zeros(x.len());
            e[axis] = da;
            let mut out = DVector::zeros(x.len());
            for v in &s.horizontal_param {
                let c = (v.transpose() * &shape.g * &e)[(0, 0)];
                out.axpy(c, v, 1.0);
            }
            Ok(out)
        };
        let mut x = p.clone();
        for _ in 0..steps {
            let k1 = rhs(&x)?;
            let k2 = rhs(&(&x + &k1 * (0.5 * h)))?;
            let k3 = rhs(&(&x + &k2 * (0.5 * h)))?;
            let k4 = rhs(&(&x + &k3 * h))?;
            x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        }
        let mut target = p.clone();
        target[axis] += da;
        gaps.push((tube.immersion.point(&x)? - tube.immersion.point(&target)?).norm());
    }
    Ok(FiberReach {
        max_gap: gaps.iter().copied().fold(0.0, f64::max),
        angles,
        gaps,
    })
}

/// Sampled `Σ*(π(x)) = x + ν̂_x + Ψ(x)` with its residuals.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SigmaStar {
    /// Orthonormal ambient basis of `ν̂_x`.
    pub nu_hat: Vec<Vec<f64>>,
    pub points: Vec<Vec<f64>>,
    /// Largest distance of a `Σ*` point from `M`.
    pub base_residual: f64,
    /// Largest `|Ψ(z) − Ψ(x)|` over sampled `z ∈ x + ν̂_x`.
    pub psi_variation: f64,
    /// Largest distance of a sampled `z` from the tube.
    pub tube_residual: f64,
    pub pca_gap: f64,
}

/// Estimate `ν̂_x` as the complement of the reachability tangent inside
/// `T_xN`, then sample `Σ*` along it.
pub fn sigma_star_projection(tube: &Tube, p: &DVector<f64>, reach: &TubeReachability, span: f64, samples: usize, min_gap: f64) -> Result<SigmaStar> {
    let shape = ShapeData::at(&tube.immersion, p)?;
    let x = shape.point.clone();
    let tangent: Vec<DVector<f64>> = shape.orthonormal_tangent.clone();
    let radius = reach.probe.samples.first().map_or(0.1, |s| s.radius);
    let cloud: Vec<DVector<f64>> = reach
        .probe
        .paths
        .iter()
        .flat_map(|path| path.nodes.iter())
        .filter(|n| n.param.as_ref().is_some_and(|q| (DVector::from_column_slice(q) - p).norm() <= radius))
        .map(|n| DVector::from_column_slice(&n.point))
        .collect();
    let d = reach.probe.dimension.ok_or(Error::UnstableEstimate { gap: 0.0 })?;
    let (dirs, pca_gap) = if d == 0 || cloud.len() < d + 2 {
        (Vec::new(), GAP_CAP)
    } else {
        let pca = Pca::fit(&cloud).expect("non-empty");
        let (_, gap) = pca.dimension(0.1);
        (pca.directions[..d].to_vec(), gap.min(GAP_CAP))
    };
    if pca_gap < min_gap {
        return Err(Error::UnstableEstimate { gap: pca_gap });
    }
    // complement of the reach directions inside T_xN
    let mut nu_hat: Vec<DVector<f64>> = Vec::new();
    for t in &tangent {
        let mut w = t.clone();
        for b in dirs.iter().chain(nu_hat.iter()) {
            w -= b * w.dot(b);
        }
        let n = w.norm();
        if n > 0.3 && nu_hat.len() + dirs.len() < tangent.len() {
            nu_hat.push(w / n);
        }
    }
    let psi_x = tube.psi(p)?;
    let opts = ProjectionOptions::default();
    let base_u = tube.base_param(p);
    let mut out = SigmaStar {
        nu_hat: nu_hat.iter().map(|v| v.iter().copied().collect()).collect(),
        points: Vec::new(),
        base_residual: 0.0,
        psi_variation: 0.0,
        tube_residual: 0.0,
        pca_gap,
    };
    if nu_hat.is_empty() {
        out.points.push((&x + &psi_x).iter().copied().collect());
        out.base_residual = project(&tube.base, &(&x + &psi_x), &base_u, &opts)?.distance;
        return Ok(out);
    }
    for n in &nu_hat {
        let dir_param = shape.tangent_coords(n);
        for i in 0..samples {
            let t = span * (2.0 * i as f64 / (samples - 1).max(1) as f64 - 1.0);
            let z = &x + n * t;
            let sz = &z + &psi_x;
            out.base_residual = out.base_residual.max(project(&tube.base, &sz, &(&base_u + dir_param.rows(0, base_u.len()) * t), &opts)?.distance);
            let zp = project(&tube.immersion, &z, &(p + &dir_param * t), &opts)?;
            out.tube_residual = out.tube_residual.max(zp.distance);
            out.psi_variation = out.psi_variation.max((tube.psi(&zp.param)? - &psi_x).norm());
            out.points.push(sz.iter().copied().collect());
        }
    }
    Ok(out)
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::immersion::{circle, cylinder, plane};
    use crate::nullity::DEFAULT_TAU;
    use std::f64::consts::PI;

    fn dv(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    fn torus() -> Tube {
        build_tube(&circle(2.0), 0.5).unwrap().remove(0)
    }

    // Principal curvatures of the torus of revolution, scaled by ε.
    fn torus_oracle(r: f64, eps: f64, x: &DVector<f64>, c: &DVector<f64>) -> [f64; 2] {
        let cos_phi = (x - c).dot(&(c / r)) / eps;
        let mut l = [eps * cos_phi / (r + eps * cos_phi), 1.0];
        l.sort_by(f64::total_cmp);
        l
    }

    #[test]
    fn circle_focal_radius_is_r() {
        let err = build_tube(&circle(2.0), 2.0).unwrap_err();
        assert!(matches!(err, Error::FocalBound { .. }));
        assert!((focal_bound(&circle(2.0), 5).unwrap() - 2.0).abs() < 1e-9);
    }

    #[test]
    fn torus_points_sit_at_distance_eps() {
        let t = torus();
        for p in [dv(&[0.3, 1.1]), dv(&[-2.0, 4.0])] {
            let (d, n) = t.point_defects(&p).unwrap();
            assert!(d < 1e-10 && n < 1e-8);
        }
    }

    #[test]
    fn torus_eigenvalues_match_curvatures() {
        let t = torus();
        for (th, ph) in [(0.0, 0.0), (0.7, 1.3), (2.0, 3.0), (-1.0, -2.2)] {
            let p = dv(&[th, ph]);
            let ts = tube_shape(&t, &p).unwrap();
            let c = t.base.point(&dv(&[th])).unwrap();
            let want = torus_oracle(2.0, 0.5, &ts.point, &c);
            for (a, b) in ts.eigenvalues.iter().zip(want) {
                assert!((a - b).abs() < 1e-6, "{:?} vs {want:?}", ts.eigenvalues);
            }
            assert!(ts.fiber_defect < 1e-5);
        }
    }

    #[test]
    fn outer_equator_eigenvalue() {
        let ts = tube_shape(&torus(), &dv(&[0.0, 0.0])).unwrap();
        assert!((ts.eigenvalues[0] - 0.5 / 2.5).abs() < 1e-6);
    }

    #[test]
    fn cylinder_sheets_have_axis_in_e0() {
        let sheets = build_tube(&cylinder(), 0.3).unwrap();
        assert_eq!(sheets.len(), 2);
        for (sheet, radius) in sheets.iter().zip([1.3, 0.7]) {
            let p = dv(&[0.4, 0.2]);
            let x = sheet.immersion.point(&p).unwrap();
            assert!(((x[0] * x[0] + x[1] * x[1]).sqrt() - radius).abs() < 1e-12);
            let ts = tube_shape(sheet, &p).unwrap();
            assert_eq!(ts.e0.len(), 1);
            let axis = ts.shape.push_forward(&ts.e0[0]);
            assert!((axis[2].abs() - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn nullity_projects_into_e0() {
        let sheets = build_tube(&cylinder(), 0.3).unwrap();
        let sample = [dv(&[0.0, 0.0]), dv(&[1.0, -2.0])];
        for s in &sheets {
            assert!(nullity_projection_check(s, &sample, DEFAULT_TAU).unwrap() < 1e-5);
        }
        let flat = build_tube(&plane(), 0.3).unwrap();
        assert!(nullity_projection_check(&flat[0], &sample, DEFAULT_TAU).unwrap() < 1e-8);
        assert_eq!(nullity_projection_check(&torus(), &[dv(&[0.2, 0.4])], DEFAULT_TAU).unwrap(), 0.0);
    }

    #[test]
    fn torus_reach_is_open() {
        let t = torus();
        let p = dv(&[0.0, 0.5]);
        let r = holonomy_tube_reachability(&t, &p, 0.5, &ProbeConfig::default()).unwrap();
        assert_eq!(r.probe.dimension, Some(2));
        assert_eq!(r.e0_dim, 0);
        assert!(r.consistent);
        assert!(r.fiber.as_ref().unwrap().max_gap < 1e-5);
        let s = sigma_star_projection(&t, &p, &r, 0.3, 5, 3.0).unwrap();
        assert!(s.nu_hat.is_empty());
        assert!(s.base_residual < 1e-9);
    }

    #[test]
    fn cylinder_sheet_reach_and_sigma_star() {
        let sheet = build_tube(&cylinder(), 0.3).unwrap().remove(0);
        let p = dv(&[0.0, 0.0]);
        let r = holonomy_tube_reachability(&sheet, &p, 0.5, &ProbeConfig::default()).unwrap();
        assert_eq!(r.probe.dimension, Some(1));
        assert!(r.consistent);
        let s = sigma_star_projection(&sheet, &p, &r, 0.5, 5, 3.0).unwrap();
        assert_eq!(s.nu_hat.len(), 1);
        assert!(s.base_residual < 1e-5);
        assert!(s.psi_variation < 1e-6, "{}", s.psi_variation);
    }

    #[test]
    fn sphere_point_is_unit() {
        for a in [vec![0.3], vec![1.0, 2.0], vec![0.4, 1.2, -2.0]] {
            assert!((sphere_point(&a).norm() - 1.0).abs() < 1e-15);
        }
        let y = sphere_point(&[PI / 2.0]);
        assert!(y[0].abs() < 1e-15 && (y[1] - 1.0).abs() < 1e-15);
    }
}
