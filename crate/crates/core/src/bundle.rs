//! Leaf charts, horizontal lifts, parallel displacement and holonomy.
//!
//! The leaf space `M/𝒩` is never built. A base curve is a curve in `M`
//! (given in parameters) and a fiber is the leaf through one of its points.
//! Fiber coordinates follow the local trivialization:
//!
//! - Euclidean target: `x = c(t) + Σ vⁱ Xᵢ(t)` with `Xᵢ` a continued
//!   orthonormal nullity frame along `c`;
//! - curved target: `x = Σ vⁱ Eᵢ(t) + v^{l+1} c(t)`, a unit vector of
//!   `L = T(leaf) ⊕ R c(t)`.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ambient::{SpaceForm, SpaceKind};
use crate::error::{Error, Result};
use crate::immersion::ChartedImmersion;
use crate::linalg::{gram_schmidt, Pca};
use crate::nullity::{continue_basis, nullity_at, DEFAULT_TAU};
use crate::ode::sample_derivative;
use crate::projection::{project, ProjectionOptions};
use crate::shape::ShapeData;

type CurveFn = Arc<dyn Fn(f64) -> (DVector<f64>, DVector<f64>) + Send + Sync>;

/// A curve `τ ↦ u(τ)` in parameter space, `τ ∈ [0, 1]`, with its velocity.
#[derive(Clone)]
pub struct ParamCurve {
    f: CurveFn,
}

impl std::fmt::Debug for ParamCurve {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let (a, _) = self.eval(0.0);
        let (b, _) = self.eval(1.0);
        write!(f, "ParamCurve({:?} -> {:?})", a.as_slice(), b.as_slice())
    }
}

// Smooth time change with vanishing velocity at both ends.
fn ease(x: f64) -> (f64, f64) {
    (x - (2.0 * PI * x).sin() / (2.0 * PI), 1.0 - (2.0 * PI * x).cos())
}

impl ParamCurve {
    pub fn new<F>(f: F) -> Self
    where
        F: Fn(f64) -> (DVector<f64>, DVector<f64>) + Send + Sync + 'static,
    {
        Self { f: Arc::new(f) }
    }

    pub fn eval(&self, t: f64) -> (DVector<f64>, DVector<f64>) {
        (self.f)(t)
    }

    pub fn point(&self, t: f64) -> DVector<f64> {
        self.eval(t).0
    }

    pub fn constant(u: DVector<f64>) -> Self {
        let z = DVector::zeros(u.len());
        Self::new(move |_| (u.clone(), z.clone()))
    }

    pub fn segment(a: DVector<f64>, b: DVector<f64>) -> Self {
        let d = &b - &a;
        Self::new(move |t| (&a + &d * t, d.clone()))
    }

    /// Traverse `self`, then `other`. Each half is eased so the joined
    /// curve stays `C²` at the junction.
    pub fn then(&self, other: &ParamCurve) -> ParamCurve {
        let (a, b) = (self.clone(), other.clone());
        Self::new(move |t| {
            let (c, x) = if t <= 0.5 { (&a, 2.0 * t) } else { (&b, 2.0 * t - 1.0) };
            let (s, ds) = ease(x);
            let (u, du) = c.eval(s);
            (u, du * (2.0 * ds))
        })
    }

    pub fn reversed(&self) -> ParamCurve {
        let a = self.clone();
        Self::new(move |t| {
            let (u, du) = a.eval(1.0 - t);
            (u, -du)
        })
    }

    /// `path · loop · path⁻¹`, a loop based at the start of `path`.
    pub fn lasso(path: &ParamCurve, lp: &ParamCurve) -> ParamCurve {
        path.then(lp).then(&path.reversed())
    }
}

/// Plane chart around a point: the nullity directions at the center plus
/// coordinate axes completing them.
#[derive(Debug, Clone)]
pub struct LeafChart {
    pub center: DVector<f64>,
    pub leaf_dim: usize,
    /// Nullity basis at the center (parameter coordinates, `g`-orthonormal).
    pub leaf_dirs: Vec<DVector<f64>>,
    /// Parameter axes used as transverse coordinates.
    pub transverse_axes: Vec<usize>,
    /// Largest angle defect between a slice direction and `𝒩` over the
    /// validation samples.
    pub slice_defect: f64,
    /// Half-width of the validated region in chart coordinates.
    pub radius: f64,
    /// Periods of the transverse axes (from the immersion).
    pub transverse_periods: Vec<Option<f64>>,
}

/// Largest admissible slice-tangency defect.
pub const SLICE_TOL: f64 = 1e-6;

impl LeafChart {
    /// Parameter point with leaf coordinates `w` and transverse coordinates `r`.
    pub fn param(&self, w: &[f64], r: &[f64]) -> DVector<f64> {
        let mut u = self.center.clone();
        for (wi, d) in w.iter().zip(&self.leaf_dirs) {
            u.axpy(*wi, d, 1.0);
        }
        for (ri, &a) in r.iter().zip(&self.transverse_axes) {
            u[a] += ri;
        }
        u
    }

    /// The section `σ(r)`: leaf coordinates zero.
    pub fn section(&self, r: &[f64]) -> DVector<f64> {
        self.param(&vec![0.0; self.leaf_dim], r)
    }
}

fn slice_defect_at(imm: &ChartedImmersion, u: &DVector<f64>, dirs: &[DVector<f64>], tau: f64) -> Result<f64> {
    let (shape, data) = nullity_at(imm, u, tau)?;
    if data.ambiguous {
        return Err(Error::AmbiguousKernel {
            param: u.iter().copied().collect(),
            gap: data.gap,
        });
    }
    if data.mu != dirs.len() {
        return Err(Error::NullityJump {
            param: u.iter().copied().collect(),
            from: dirs.len(),
            to: data.mu,
        });
    }
    let mut worst: f64 = 0.0;
    for d in dirs {
        let a = shape.push_forward(d);
        let n = shape.space.norm(&a);
        let horizontal: f64 = data
            .complement_ambient
            .iter()
            .map(|c| shape.space.inner(&a, c).powi(2))
            .sum::<f64>()
            .sqrt();
        worst = worst.max(horizontal / n);
    }
    Ok(worst)
}

/// Build and validate a plane chart at `u0` on a `(2k+1)^m` sample of the
/// cube of half-width `radius` in chart coordinates.
pub fn build_leaf_chart(imm: &ChartedImmersion, u0: &DVector<f64>, radius: f64, tau: f64) -> Result<LeafChart> {
    let (_, data) = nullity_at(imm, u0, tau)?;
    if data.ambiguous {
        return Err(Error::AmbiguousKernel {
            param: u0.iter().copied().collect(),
            gap: data.gap,
        });
    }
    let m = imm.param_dim;
    if data.mu == m {
        return Err(Error::NoTransverseDirections);
    }
    if data.mu == 0 {
        return Err(Error::Unsupported("a positive index of nullity".into()));
    }
    // greedy completion by standard axes
    let mut span = gram_schmidt(&data.basis_param, &[], |a, b| a.dot(b), 1e-12, data.mu);
    let mut axes = Vec::new();
    while axes.len() < m - data.mu {
        let best = (0..m)
            .filter(|a| !axes.contains(a))
            .map(|a| {
                let mut e = DVector::zeros(m);
                e[a] = 1.0;
                let r = gram_schmidt(&[e], &span, |x, y| x.dot(y), 0.0, 1);
                let norm = r.first().map_or(0.0, |v| {
                    let mut e = DVector::zeros(m);
                    e[a] = 1.0;
                    v.dot(&e)
                });
                (a, norm, r)
            })
            .max_by(|x, y| x.1.total_cmp(&y.1))
            .expect("at least one axis left");
        axes.push(best.0);
        span.extend(best.2);
    }
    axes.sort_unstable();
    let chart = LeafChart {
        center: u0.clone(),
        leaf_dim: data.mu,
        leaf_dirs: data.basis_param.clone(),
        transverse_axes: axes.clone(),
        slice_defect: 0.0,
        radius,
        transverse_periods: axes.iter().map(|&a| imm.periods[a]).collect(),
    };
    let k = 2;
    let ticks: Vec<f64> = (-k..=k).map(|i| radius * i as f64 / k as f64).collect();
    let mut worst: f64 = 0.0;
    let total = ticks.len().pow(m as u32);
    for mut idx in 0..total {
        let mut c = Vec::with_capacity(m);
        for _ in 0..m {
            c.push(ticks[idx % ticks.len()]);
            idx /= ticks.len();
        }
        let u = chart.param(&c[..data.mu], &c[data.mu..]);
        if !imm.eval_box.contains(&u) {
            continue;
        }
        worst = worst.max(slice_defect_at(imm, &u, &chart.leaf_dirs, tau)?);
    }
    if worst > SLICE_TOL {
        return Err(Error::FrameContinuation(format!(
            "slices are not tangent to the nullity (defect {worst:.3e})"
        )));
    }
    Ok(LeafChart {
        slice_defect: worst,
        ..chart
    })
}

/// Numerical settings for lifts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LiftOptions {
    /// RK4 steps over the unit parameter interval.
    pub steps: usize,
    pub tau: f64,
    /// Horizontality tolerance; larger residuals are a blowup.
    pub tolerance: f64,
    /// Parameter displacement for frame derivatives.
    pub fd_delta: f64,
}

impl Default for LiftOptions {
    fn default() -> Self {
        Self {
            steps: 1000,
            tau: DEFAULT_TAU,
            tolerance: 1e-6,
            fd_delta: 1e-5,
        }
    }
}

fn frame_at(
    imm: &ChartedImmersion,
    u: &DVector<f64>,
    reference: Option<&[DVector<f64>]>,
    l: usize,
    tau: f64,
) -> Result<(ShapeData, Vec<DVector<f64>>)> {
    let (shape, data) = nullity_at(imm, u, tau)?;
    if data.mu != l {
        return Err(Error::NullityJump {
            param: u.iter().copied().collect(),
            from: l,
            to: data.mu,
        });
    }
    if data.ambiguous {
        return Err(Error::AmbiguousKernel {
            param: u.iter().copied().collect(),
            gap: data.gap,
        });
    }
    let frame = match reference {
        None => data.basis_ambient,
        Some(r) => continue_basis(&shape, &data.basis_param, r)?.1,
    };
    Ok((shape, frame))
}

/// Transport coefficients along one base curve, at RK4 stage nodes.
pub(crate) struct BaseTransport {
    space: SpaceForm,
    steps: usize,
    params: Vec<DVector<f64>>,
    base: Vec<DVector<f64>>,
    base_vel: Vec<DVector<f64>>,
    frames: Vec<Vec<DVector<f64>>>,
    dframes: Vec<Vec<DVector<f64>>>,
    /// Diagonal of the Gram matrix of the frame.
    gdiag: Vec<f64>,
}

impl BaseTransport {
    pub(crate) fn new(imm: &ChartedImmersion, curve: &ParamCurve, opts: &LiftOptions) -> Result<Self> {
        let n = opts.steps;
        let (u0, _) = curve.eval(0.0);
        let (_, d0) = nullity_at(imm, &u0, opts.tau)?;
        let l = d0.mu;
        if l == 0 {
            return Err(Error::Unsupported("a positive index of nullity".into()));
        }
        let curved = imm.space.is_curved();
        let mut params = Vec::with_capacity(2 * n + 1);
        let mut base = Vec::with_capacity(2 * n + 1);
        let mut base_vel = Vec::with_capacity(2 * n + 1);
        let mut frames = Vec::with_capacity(2 * n + 1);
        let mut dframes = Vec::with_capacity(2 * n + 1);
        let mut reference: Option<Vec<DVector<f64>>> = None;
        for j in 0..=2 * n {
            let t = j as f64 / (2 * n) as f64;
            let (u, du) = curve.eval(t);
            let (shape, e) = frame_at(imm, &u, reference.as_deref(), l, opts.tau)?;
            let cvel = shape.push_forward(&du);
            let speed = du.norm();
            let de: Vec<DVector<f64>> = if speed == 0.0 {
                vec![DVector::zeros(shape.point.len()); l]
            } else {
                let d = opts.fd_delta / speed;
                let (_, ep) = frame_at(imm, &(&u + &du * d), Some(&e), l, opts.tau)?;
                let (_, em) = frame_at(imm, &(&u - &du * d), Some(&e), l, opts.tau)?;
                ep.iter().zip(&em).map(|(a, b)| (a - b) / (2.0 * d)).collect()
            };
            let mut f = e.clone();
            let mut df = de;
            if curved {
                f.push(shape.point.clone());
                df.push(cvel.clone());
            }
            params.push(u);
            base.push(shape.point.clone());
            base_vel.push(cvel);
            frames.push(f);
            dframes.push(df);
            reference = Some(e);
        }
        let mut gdiag = vec![1.0; l];
        if let Some(c) = imm.space.model_constant() {
            gdiag.push(c);
        }
        Ok(Self {
            space: imm.space,
            steps: n,
            params,
            base,
            base_vel,
            frames,
            dframes,
            gdiag,
        })
    }

    fn curved(&self) -> bool {
        self.space.is_curved()
    }

    pub(crate) fn fiber_dim(&self) -> usize {
        self.gdiag.len()
    }

    fn rhs(&self, j: usize, v: &DVector<f64>) -> DVector<f64> {
        let f = &self.frames[j];
        let df = &self.dframes[j];
        let d = self.fiber_dim();
        DVector::from_fn(d, |k, _| {
            let mut s = 0.0;
            for i in 0..d {
                s += v[i] * self.space.inner(&df[i], &f[k]);
            }
            if !self.curved() {
                s += self.space.inner(&self.base_vel[j], &f[k]);
            }
            -s / self.gdiag[k]
        })
    }

    fn normalize(&self, v: DVector<f64>) -> DVector<f64> {
        if !self.curved() {
            return v;
        }
        let q: f64 = (0..v.len()).map(|i| self.gdiag[i] * v[i] * v[i]).sum();
        v / q.abs().sqrt()
    }

    /// Fiber coordinates at full nodes `0..=steps`.
    pub(crate) fn lift(&self, v0: &DVector<f64>) -> Vec<DVector<f64>> {
        let h = 1.0 / self.steps as f64;
        let mut out = Vec::with_capacity(self.steps + 1);
        let mut v = v0.clone();
        out.push(v.clone());
        for k in 0..self.steps {
            let j = 2 * k;
            let k1 = self.rhs(j, &v);
            let k2 = self.rhs(j + 1, &(&v + &k1 * (0.5 * h)));
            let k3 = self.rhs(j + 1, &(&v + &k2 * (0.5 * h)));
            let k4 = self.rhs(j + 2, &(&v + &k3 * h));
            v = self.normalize(&v + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0));
            out.push(v.clone());
        }
        out
    }

    fn base_point(&self, j: usize) -> DVector<f64> {
        self.base[j].clone()
    }

    /// Ambient point at full node `k`.
    pub(crate) fn ambient(&self, k: usize, v: &DVector<f64>) -> DVector<f64> {
        let j = 2 * k;
        let mut x = if self.curved() {
            DVector::zeros(self.frames[j][0].len())
        } else {
            self.base_point(j)
        };
        for (vi, f) in v.iter().zip(&self.frames[j]) {
            x.axpy(*vi, f, 1.0);
        }
        x
    }

    /// Ambient velocity at full node `k`, from the transport equation.
    pub(crate) fn velocity(&self, k: usize, v: &DVector<f64>) -> DVector<f64> {
        let j = 2 * k;
        let dv = self.rhs(j, v);
        let mut x = if self.curved() {
            DVector::zeros(self.frames[j][0].len())
        } else {
            self.base_vel[j].clone()
        };
        for i in 0..self.fiber_dim() {
            x.axpy(dv[i], &self.frames[j][i], 1.0);
            x.axpy(v[i], &self.dframes[j][i], 1.0);
        }
        x
    }

    /// Fiber coordinates of `x` in the frame at full node `k`, with the
    /// residual of `x` off the fiber.
    pub(crate) fn coords(&self, k: usize, x: &DVector<f64>) -> (DVector<f64>, f64) {
        let j = 2 * k;
        let rel = if self.curved() { x.clone() } else { x - self.base_point(j) };
        let f = &self.frames[j];
        let v = DVector::from_fn(self.fiber_dim(), |i, _| self.space.inner(&rel, &f[i]) / self.gdiag[i]);
        let mut back = DVector::zeros(x.len());
        for (vi, fi) in v.iter().zip(f) {
            back.axpy(*vi, fi, 1.0);
        }
        let resid = (rel - back).norm();
        (v, resid)
    }

    pub(crate) fn param(&self, k: usize) -> &DVector<f64> {
        &self.params[2 * k]
    }
}

/// One node of a discretized horizontal curve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PathNode {
    pub t: f64,
    /// Parameter point, when the node could be projected onto the chart.
    pub param: Option<Vec<f64>>,
    pub point: Vec<f64>,
    /// Ambient velocity `dx/dt`.
    pub velocity: Vec<f64>,
}

/// A discretized curve in `M` together with its residuals.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HorizontalPath {
    pub nodes: Vec<PathNode>,
    pub step: f64,
    /// Largest `|<x', n>|` over nodes and unit `n ∈ 𝒩`.
    pub horizontality_residual: f64,
    /// Largest distance from a node to `M`.
    pub on_manifold_residual: f64,
    /// Nodes that could not be located in the chart and were not checked.
    pub unverified_nodes: usize,
}

/// Post-hoc horizontality check against freshly computed kernels.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PathVerification {
    /// Residual of the stored velocities.
    pub stored_velocity: f64,
    /// Residual of velocities re-derived from node positions by finite
    /// differences.
    pub sampled_velocity: f64,
    pub checked_nodes: usize,
}

impl HorizontalPath {
    pub fn endpoint(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.nodes.last().expect("non-empty path").point)
    }

    pub fn end_param(&self) -> Option<DVector<f64>> {
        self.nodes.last().and_then(|n| n.param.as_ref()).map(|p| DVector::from_column_slice(p))
    }

    pub fn params(&self) -> Vec<Option<DVector<f64>>> {
        self.nodes
            .iter()
            .map(|n| n.param.as_ref().map(|p| DVector::from_column_slice(p)))
            .collect()
    }

    /// Recompute the nullity at every located node and measure the normal
    /// component of the velocity, both as stored and as re-derived from
    /// the node positions.
    pub fn reverify(&self, imm: &ChartedImmersion, tau: f64) -> Result<PathVerification> {
        let pts: Vec<DVector<f64>> = self.nodes.iter().map(|n| DVector::from_column_slice(&n.point)).collect();
        let sampled = if pts.len() >= 5 && self.step > 0.0 {
            sample_derivative(&pts, self.step)
        } else {
            self.nodes.iter().map(|n| DVector::from_column_slice(&n.velocity)).collect()
        };
        let checks: Vec<Option<(f64, f64)>> = self
            .nodes
            .par_iter()
            .zip(sampled.par_iter())
            .map(|(node, fd)| -> Result<Option<(f64, f64)>> {
                let Some(p) = &node.param else {
                    return Ok(None);
                };
                let (_, data) = nullity_at(imm, &DVector::from_column_slice(p), tau)?;
                let v = DVector::from_column_slice(&node.velocity);
                Ok(Some((
                    data.horizontal_component(&v, &imm.space),
                    data.horizontal_component(fd, &imm.space),
                )))
            })
            .collect::<Result<_>>()?;
        let mut out = PathVerification {
            stored_velocity: 0.0,
            sampled_velocity: 0.0,
            checked_nodes: 0,
        };
        for (a, b) in checks.into_iter().flatten() {
            out.stored_velocity = out.stored_velocity.max(a);
            out.sampled_velocity = out.sampled_velocity.max(b);
            out.checked_nodes += 1;
        }
        Ok(out)
    }

    /// CSV with columns `t, u0.., x0..` (empty parameters for unlocated nodes).
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let m = self.nodes.iter().find_map(|n| n.param.as_ref()).map_or(0, |p| p.len());
        let n = self.nodes.first().map_or(0, |n| n.point.len());
        let mut header = vec!["t".to_string()];
        header.extend((0..m).map(|i| format!("u{i}")));
        header.extend((0..n).map(|i| format!("x{i}")));
        wr.write_record(&header).map_err(|e| Error::Io(e.to_string()))?;
        for node in &self.nodes {
            let mut rec = vec![format!("{:.17e}", node.t)];
            match &node.param {
                Some(p) => rec.extend(p.iter().map(|x| format!("{x:.17e}"))),
                None => rec.extend(std::iter::repeat_n(String::new(), m)),
            }
            rec.extend(node.point.iter().map(|x| format!("{x:.17e}")));
            wr.write_record(&rec).map_err(|e| Error::Io(e.to_string()))?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Locate successive points on `M` by projection, each seeded by
/// extrapolating the previous two parameters. Points that cannot be
/// located get `None`; tracking resumes from the last located point.
pub(crate) fn track_params(
    imm: &ChartedImmersion,
    points: &[DVector<f64>],
    start: &DVector<f64>,
) -> (Vec<Option<DVector<f64>>>, f64) {
    let opts = ProjectionOptions::default();
    let mut out = Vec::with_capacity(points.len());
    let mut last: Option<DVector<f64>> = None;
    let mut prev = start.clone();
    let mut worst: f64 = 0.0;
    for x in points {
        let seed = match &last {
            Some(q) => &prev * 2.0 - q,
            None => prev.clone(),
        };
        let attempt = project(imm, x, &seed, &opts).or_else(|_| project(imm, x, &prev, &opts));
        match attempt {
            Ok(p) => {
                worst = worst.max(p.distance);
                last = Some(prev.clone());
                prev = p.param.clone();
                out.push(Some(p.param));
            }
            Err(_) => {
                last = None;
                out.push(None);
            }
        }
    }
    (out, worst)
}

// Points between c(0) and x along the model geodesic through the fiber.
fn leaf_segment(space: &SpaceForm, a: &DVector<f64>, b: &DVector<f64>, lambda: f64) -> DVector<f64> {
    let y = a * (1.0 - lambda) + b * lambda;
    match space.kind {
        SpaceKind::Euclidean => y,
        _ => {
            let q = space.inner(&y, &y).abs().sqrt();
            y / q
        }
    }
}

const LEAF_TOL: f64 = 1e-8;
const SEGMENT_SAMPLES: usize = 8;

/// Fiber coordinates of `q` over node 0, after checking that `q` lies on
/// the leaf through `c(0)` and that the leaf geodesic joining them stays in `M`.
fn start_coords(imm: &ChartedImmersion, tr: &BaseTransport, q: &DVector<f64>) -> Result<DVector<f64>> {
    let xq = imm.point(q)?;
    let (v, resid) = tr.coords(0, &xq);
    if resid > LEAF_TOL * (1.0 + xq.norm()) {
        return Err(Error::NotOnLeaf { residual: resid });
    }
    let c0 = tr.base[0].clone();
    let u0 = tr.param(0).clone();
    let opts = ProjectionOptions::default();
    let mut worst: f64 = 0.0;
    let mut seed = u0.clone();
    for i in 1..SEGMENT_SAMPLES {
        let lambda = i as f64 / SEGMENT_SAMPLES as f64;
        let y = leaf_segment(&imm.space, &c0, &xq, lambda);
        let guess = &u0 + (q - &u0) * lambda;
        let p = project(imm, &y, &guess, &opts)
            .or_else(|_| project(imm, &y, &seed, &opts))
            .map_err(|_| Error::NotOnLeaf { residual: f64::INFINITY })?;
        worst = worst.max(p.distance);
        seed = p.param;
    }
    if worst > 1e-6 {
        return Err(Error::NotOnLeaf { residual: worst });
    }
    Ok(v)
}

/// Horizontal lift of the base curve through the parameter point `q`,
/// which must lie on the leaf through `c(0)`.
pub fn horizontal_lift(imm: &ChartedImmersion, base: &ParamCurve, q: &DVector<f64>, opts: &LiftOptions) -> Result<HorizontalPath> {
    let tr = BaseTransport::new(imm, base, opts)?;
    let v0 = start_coords(imm, &tr, q)?;
    path_from_transport(imm, &tr, &v0, q, opts)
}

fn path_from_transport(
    imm: &ChartedImmersion,
    tr: &BaseTransport,
    v0: &DVector<f64>,
    q: &DVector<f64>,
    opts: &LiftOptions,
) -> Result<HorizontalPath> {
    let vs = tr.lift(v0);
    let h = 1.0 / tr.steps as f64;
    let points: Vec<DVector<f64>> = vs.iter().enumerate().map(|(k, v)| tr.ambient(k, v)).collect();
    let velocities: Vec<DVector<f64>> = vs.iter().enumerate().map(|(k, v)| tr.velocity(k, v)).collect();
    let (params, on_manifold) = track_params(imm, &points, q);
    let mut horizontality: f64 = 0.0;
    let mut unverified = 0;
    for (p, v) in params.iter().zip(&velocities) {
        match p {
            Some(p) => {
                let (_, data) = nullity_at(imm, p, opts.tau)?;
                horizontality = horizontality.max(data.horizontal_component(v, &imm.space));
            }
            None => unverified += 1,
        }
    }
    if horizontality > opts.tolerance {
        return Err(Error::ResidualBlowup { residual: horizontality });
    }
    let nodes = (0..vs.len())
        .map(|k| PathNode {
            t: k as f64 * h,
            param: params[k].as_ref().map(|p| p.iter().copied().collect()),
            point: points[k].iter().copied().collect(),
            velocity: velocities[k].iter().copied().collect(),
        })
        .collect();
    Ok(HorizontalPath {
        nodes,
        step: h,
        horizontality_residual: horizontality,
        on_manifold_residual: on_manifold,
        unverified_nodes: unverified,
    })
}

/// Map of fiber coordinates induced by parallel displacement.
#[derive(Debug, Clone, PartialEq)]
pub enum FiberMap {
    /// `v ↦ L v + b` (Euclidean target).
    Affine { linear: DMatrix<f64>, offset: DVector<f64> },
    /// `v ↦ M v` on the unit vectors of `L` (curved target).
    Orthogonal { matrix: DMatrix<f64> },
}

/// Flat record of a [`FiberMap`] for reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiberMapRecord {
    pub kind: String,
    /// Row-major matrix entries.
    pub matrix: Vec<Vec<f64>>,
    pub offset: Vec<f64>,
}

impl FiberMap {
    pub fn identity(space: &SpaceForm, l: usize) -> Self {
        if space.is_curved() {
            FiberMap::Orthogonal {
                matrix: DMatrix::identity(l + 1, l + 1),
            }
        } else {
            FiberMap::Affine {
                linear: DMatrix::identity(l, l),
                offset: DVector::zeros(l),
            }
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        match self {
            FiberMap::Affine { linear, .. } => linear,
            FiberMap::Orthogonal { matrix } => matrix,
        }
    }

    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            FiberMap::Affine { linear, offset } => linear * v + offset,
            FiberMap::Orthogonal { matrix } => matrix * v,
        }
    }

    /// `other ∘ self`: first `self`, then `other`.
    pub fn then(&self, other: &FiberMap) -> FiberMap {
        match (self, other) {
            (FiberMap::Affine { linear: a, offset: b }, FiberMap::Affine { linear: c, offset: d }) => FiberMap::Affine {
                linear: c * a,
                offset: c * b + d,
            },
            (FiberMap::Orthogonal { matrix: a }, FiberMap::Orthogonal { matrix: c }) => {
                FiberMap::Orthogonal { matrix: c * a }
            }
            _ => panic!("cannot compose maps of different fiber types"),
        }
    }

    pub fn inverse(&self) -> FiberMap {
        match self {
            FiberMap::Affine { linear, offset } => {
                let inv = linear.clone().try_inverse().expect("invertible displacement");
                let off = -(&inv * offset);
                FiberMap::Affine { linear: inv, offset: off }
            }
            FiberMap::Orthogonal { matrix } => FiberMap::Orthogonal {
                matrix: matrix.clone().try_inverse().expect("invertible displacement"),
            },
        }
    }

    /// Largest entrywise difference (linear part and offset).
    pub fn distance(&self, other: &FiberMap) -> f64 {
        let lin = (self.matrix() - other.matrix()).amax();
        match (self, other) {
            (FiberMap::Affine { offset: a, .. }, FiberMap::Affine { offset: b, .. }) => lin.max((a - b).amax()),
            _ => lin,
        }
    }

    /// `‖MᵀG M - G‖` with `G` the fiber metric.
    pub fn isometry_defect(&self, space: &SpaceForm) -> f64 {
        let m = self.matrix();
        let n = m.nrows();
        let mut g = DMatrix::identity(n, n);
        if space.kind == SpaceKind::Hyperbolic {
            g[(n - 1, n - 1)] = -1.0;
        }
        (m.transpose() * &g * m - g).amax()
    }

    pub fn record(&self) -> FiberMapRecord {
        let m = self.matrix();
        let rows = (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect();
        match self {
            FiberMap::Affine { offset, .. } => FiberMapRecord {
                kind: "affine".into(),
                matrix: rows,
                offset: offset.iter().copied().collect(),
            },
            FiberMap::Orthogonal { .. } => FiberMapRecord {
                kind: "orthogonal".into(),
                matrix: rows,
                offset: Vec::new(),
            },
        }
    }
}

// Least-squares fit of a fiber map to coordinate pairs.
fn fit_map(space: &SpaceForm, from: &[DVector<f64>], to: &[DVector<f64>]) -> FiberMap {
    let d = from[0].len();
    if space.is_curved() {
        // orthogonal Procrustes
        let mut c = DMatrix::zeros(d, d);
        for (a, b) in from.iter().zip(to) {
            c += b * a.transpose();
        }
        if space.kind == SpaceKind::Sphere {
            let svd = c.svd(true, true);
            let u = svd.u.expect("u requested");
            let vt = svd.v_t.expect("v requested");
            FiberMap::Orthogonal { matrix: u * vt }
        } else {
            // Lorentz maps are not orthogonal; plain least squares
            let a = DMatrix::from_columns(from);
            let b = DMatrix::from_columns(to);
            let sol = a.transpose().svd(true, true).solve(&b.transpose(), 1e-14).expect("svd solve");
            FiberMap::Orthogonal { matrix: sol.transpose() }
        }
    } else {
        let n = from.len();
        let mut a = DMatrix::zeros(n, d + 1);
        let mut b = DMatrix::zeros(n, d);
        for (i, (x, y)) in from.iter().zip(to).enumerate() {
            for j in 0..d {
                a[(i, j)] = x[j];
                b[(i, j)] = y[j];
            }
            a[(i, d)] = 1.0;
        }
        let sol = a.svd(true, true).solve(&b, 1e-14).expect("svd solve");
        let linear = sol.rows(0, d).transpose();
        let offset = sol.row(d).transpose();
        FiberMap::Affine { linear, offset }
    }
}

/// Result of displacing sample points of the leaf through `c(0)`.
#[derive(Debug, Clone)]
pub struct Displacement {
    pub start_coords: Vec<DVector<f64>>,
    pub end_coords: Vec<DVector<f64>>,
    pub start_points: Vec<DVector<f64>>,
    pub end_points: Vec<DVector<f64>>,
    pub map: FiberMap,
    /// Largest change of a pairwise distance.
    pub distortion: f64,
    /// Largest misfit of the fitted map on the samples.
    pub fit_residual: f64,
}

/// Parallel displacement of the sample points (parameter points on the
/// leaf through `c(0)`) along the base curve, with the fitted fiber map.
/// The frame basis points are lifted too so the fit is always determined.
pub fn parallel_displacement(
    imm: &ChartedImmersion,
    base: &ParamCurve,
    samples: &[DVector<f64>],
    opts: &LiftOptions,
) -> Result<Displacement> {
    let tr = BaseTransport::new(imm, base, opts)?;
    let start_coords: Vec<DVector<f64>> = samples
        .iter()
        .map(|q| start_coords(imm, &tr, q))
        .collect::<Result<_>>()?;
    displacement_from_transport(imm, &tr, start_coords)
}

fn displacement_from_transport(imm: &ChartedImmersion, tr: &BaseTransport, start_coords: Vec<DVector<f64>>) -> Result<Displacement> {
    let n = tr.steps;
    let d = tr.fiber_dim();
    let lift_end = |v: &DVector<f64>| -> DVector<f64> {
        let vs = tr.lift(v);
        tr.ambient(n, &vs[n])
    };
    let end_points: Vec<DVector<f64>> = start_coords.iter().map(&lift_end).collect();
    let start_points: Vec<DVector<f64>> = start_coords.iter().map(|v| tr.ambient(0, v)).collect();
    let end_coords: Vec<DVector<f64>> = end_points.iter().map(|x| tr.coords(n, x).0).collect();
    let mut basis: Vec<DVector<f64>> = (0..d)
        .map(|i| {
            let mut e = DVector::zeros(d);
            e[i] = 1.0;
            e
        })
        .collect();
    if !imm.space.is_curved() {
        basis.push(DVector::zeros(d));
    }
    let basis_end: Vec<DVector<f64>> = basis.iter().map(|v| tr.coords(n, &lift_end(v)).0).collect();
    let mut from = start_coords.clone();
    from.extend(basis.iter().cloned());
    let mut to = end_coords.clone();
    to.extend(basis_end);
    let map = fit_map(&imm.space, &from, &to);
    let fit_residual = from
        .iter()
        .zip(&to)
        .map(|(a, b)| (map.apply(a) - b).amax())
        .fold(0.0, f64::max);
    let mut distortion: f64 = 0.0;
    for i in 0..start_points.len() {
        for j in (i + 1)..start_points.len() {
            let a = imm.space.distance(&start_points[i], &start_points[j]);
            let b = imm.space.distance(&end_points[i], &end_points[j]);
            distortion = distortion.max((a - b).abs());
        }
    }
    Ok(Displacement {
        start_coords,
        end_coords,
        start_points,
        end_points,
        map,
        distortion,
        fit_residual,
    })
}

/// Fiber map of a closed base curve in the frame at its base point.
///
/// The fiber coordinates at the end are taken in the frame at `c(0)`, so
/// frame rotation accumulated along the loop does not enter the map.
pub fn loop_element(imm: &ChartedImmersion, lp: &ParamCurve, opts: &LiftOptions) -> Result<FiberMap> {
    let tr = BaseTransport::new(imm, lp, opts)?;
    let n = tr.steps;
    let d = tr.fiber_dim();
    let curved = imm.space.is_curved();
    let end = |v: &DVector<f64>| -> DVector<f64> {
        let vs = tr.lift(v);
        tr.coords(0, &tr.ambient(n, &vs[n])).0
    };
    let cols: Vec<DVector<f64>> = (0..d)
        .map(|i| {
            let mut e = DVector::zeros(d);
            e[i] = 1.0;
            e
        })
        .collect();
    if curved {
        let images: Vec<DVector<f64>> = cols.iter().map(&end).collect();
        Ok(FiberMap::Orthogonal {
            matrix: DMatrix::from_columns(&images),
        })
    } else {
        let offset = end(&DVector::zeros(d));
        let images: Vec<DVector<f64>> = cols.iter().map(|e| end(e) - &offset).collect();
        Ok(FiberMap::Affine {
            linear: DMatrix::from_columns(&images),
            offset,
        })
    }
}

/// How random loops are generated in the transverse coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoopConfig {
    pub count: usize,
    pub seed: u64,
    /// Amplitude of the Fourier part, in parameter units.
    pub radius: f64,
    pub harmonics: usize,
    /// Wind once around periodic transverse coordinates (random sign).
    pub windings: bool,
    pub steps: usize,
    pub tau: f64,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            count: 120,
            seed: 1,
            radius: 0.3,
            harmonics: 3,
            windings: true,
            steps: 400,
            tau: DEFAULT_TAU,
        }
    }
}

/// Reproducible description of one sampled loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopSpec {
    pub index: usize,
    pub seed: u64,
    pub winding: Vec<i32>,
    /// `cos[j][k-1]`, `sin[j][k-1]`: coefficients of harmonic `k` on
    /// transverse axis `j`.
    pub cos: Vec<Vec<f64>>,
    pub sin: Vec<Vec<f64>>,
    pub radius: f64,
}

impl LoopSpec {
    pub fn random(chart: &LeafChart, cfg: &LoopConfig, index: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(index as u64);
        let r = chart.transverse_axes.len();
        let winding = chart
            .transverse_periods
            .iter()
            .map(|p| match (p, cfg.windings) {
                (Some(_), true) => {
                    if rng.gen_bool(0.5) {
                        1
                    } else {
                        -1
                    }
                }
                _ => 0,
            })
            .collect();
        let mut coef = || -> Vec<Vec<f64>> {
            (0..r)
                .map(|_| (1..=cfg.harmonics).map(|k| rng.gen_range(-1.0..1.0) / k as f64).collect())
                .collect()
        };
        let cos = coef();
        let sin = coef();
        Self {
            index,
            seed: cfg.seed,
            winding,
            cos,
            sin,
            radius: cfg.radius,
        }
    }

    /// The closed curve `c(τ) = σ(w·period·τ + radius·F(τ))` with `F` a
    /// Fourier polynomial vanishing at both ends.
    pub fn curve(&self, chart: &LeafChart) -> ParamCurve {
        let chart = chart.clone();
        let spec = self.clone();
        ParamCurve::new(move |t| {
            let r = chart.transverse_axes.len();
            let mut pos = vec![0.0; r];
            let mut vel = vec![0.0; r];
            for j in 0..r {
                if let Some(p) = chart.transverse_periods[j] {
                    let w = spec.winding[j] as f64 * p;
                    pos[j] += w * t;
                    vel[j] += w;
                }
                for k in 0..spec.cos[j].len() {
                    let om = 2.0 * PI * (k + 1) as f64;
                    let (a, b) = (spec.cos[j][k], spec.sin[j][k]);
                    pos[j] += spec.radius * (a * ((om * t).cos() - 1.0) + b * (om * t).sin());
                    vel[j] += spec.radius * om * (-a * (om * t).sin() + b * (om * t).cos());
                }
            }
            let u = chart.section(&pos);
            let mut du = DVector::zeros(u.len());
            for (j, &a) in chart.transverse_axes.iter().enumerate() {
                du[a] = vel[j];
            }
            (u, du)
        })
    }
}

#[derive(Debug, Clone)]
pub struct HolonomyElement {
    pub spec: LoopSpec,
    pub map: FiberMap,
    pub isometry_defect: f64,
    /// Distance between `c(0)` and `c(1)` in the ambient space.
    pub closure_gap: f64,
}

/// JSON dump entry for one element.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HolonomyRecord {
    pub spec: LoopSpec,
    pub map: FiberMapRecord,
    pub isometry_defect: f64,
    pub closure_gap: f64,
}

impl HolonomyElement {
    pub fn record(&self) -> HolonomyRecord {
        HolonomyRecord {
            spec: self.spec.clone(),
            map: self.map.record(),
            isometry_defect: self.isometry_defect,
            closure_gap: self.closure_gap,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoopFailure {
    pub index: usize,
    pub error: String,
}

#[derive(Debug, Clone)]
pub struct HolonomySample {
    pub elements: Vec<HolonomyElement>,
    pub failures: Vec<LoopFailure>,
}

/// Sample `cfg.count` random loops at the chart center and record their
/// holonomy elements. Loops are independent and merged by index.
pub fn holonomy_sample(imm: &ChartedImmersion, chart: &LeafChart, cfg: &LoopConfig) -> Result<HolonomySample> {
    let opts = LiftOptions {
        steps: cfg.steps,
        tau: cfg.tau,
        ..LiftOptions::default()
    };
    let results: Vec<(LoopSpec, Result<HolonomyElement>)> = (0..cfg.count)
        .into_par_iter()
        .map(|i| {
            let spec = LoopSpec::random(chart, cfg, i);
            let lp = spec.curve(chart);
            let res = loop_element(imm, &lp, &opts).and_then(|map| {
                let a = imm.point(&lp.point(0.0))?;
                let b = imm.point(&lp.point(1.0))?;
                Ok(HolonomyElement {
                    spec: spec.clone(),
                    isometry_defect: map.isometry_defect(&imm.space),
                    closure_gap: (a - b).norm(),
                    map,
                })
            });
            (spec, res)
        })
        .collect();
    let mut elements = Vec::new();
    let mut failures = Vec::new();
    for (spec, r) in results {
        match r {
            Ok(e) => elements.push(e),
            Err(e) => failures.push(LoopFailure {
                index: spec.index,
                error: e.to_string(),
            }),
        }
    }
    if elements.is_empty() {
        return Err(Error::AllLoopsFailed(cfg.count));
    }
    Ok(HolonomySample { elements, failures })
}

/// Largest deviation from the identity among loops of a given radius.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocalHolonomyStats {
    pub radius: f64,
    pub elements: usize,
    pub max_deviation: f64,
}

/// Sample contractible loops (no winding) at decreasing radii. Local
/// holonomy is probed by how fast the elements approach the identity.
pub fn local_holonomy_probe(imm: &ChartedImmersion, chart: &LeafChart, radii: &[f64], cfg: &LoopConfig) -> Result<Vec<LocalHolonomyStats>> {
    radii
        .iter()
        .map(|&radius| {
            let c = LoopConfig {
                radius,
                windings: false,
                ..*cfg
            };
            let sample = holonomy_sample(imm, chart, &c)?;
            let id = FiberMap::identity(&imm.space, chart.leaf_dim);
            let max_deviation = sample
                .elements
                .iter()
                .map(|e| e.map.distance(&id))
                .fold(0.0, f64::max);
            Ok(LocalHolonomyStats {
                radius,
                elements: sample.elements.len(),
                max_deviation,
            })
        })
        .collect()
}

/// Outcome of the orbit analysis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FiberAction {
    Transitive,
    PolarLike,
    Undetermined,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifyOptions {
    pub max_word: usize,
    pub max_points: usize,
    /// Neighbourhood radius for local PCA, in fiber units.
    pub radius: f64,
    /// Relative singular-value cut for the dimension estimate.
    pub ratio: f64,
    /// Minimal singular-value gap across the cut.
    pub min_gap: f64,
    pub min_elements: usize,
}

impl Default for ClassifyOptions {
    fn default() -> Self {
        Self {
            max_word: 4,
            max_points: 4000,
            radius: 0.2,
            ratio: 0.1,
            min_gap: 3.0,
            min_elements: 100,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OrbitStats {
    pub action: FiberAction,
    pub orbit_points: usize,
    pub orbit_dim: usize,
    pub fiber_dim: usize,
    pub pca_gap: f64,
    /// Integrability residual of the normal spaces (polar test).
    pub bracket_residual: Option<f64>,
    /// Largest distance from `p` within the orbit.
    pub spread: f64,
}

// Tangent space of the fiber at p: all of R^l (flat) or p^⊥ (sphere/hyperboloid).
fn fiber_tangent(space: &SpaceForm, p: &DVector<f64>) -> Vec<DVector<f64>> {
    let d = p.len();
    let eye: Vec<DVector<f64>> = (0..d)
        .map(|i| {
            let mut e = DVector::zeros(d);
            e[i] = 1.0;
            e
        })
        .collect();
    if !space.is_curved() {
        return eye;
    }
    let mut g = DVector::from_element(d, 1.0);
    if space.kind == SpaceKind::Hyperbolic {
        g[d - 1] = -1.0;
    }
    let inner = |a: &DVector<f64>, b: &DVector<f64>| a.component_mul(&g).dot(b);
    let pp = inner(p, p);
    let projected: Vec<DVector<f64>> = eye.iter().map(|e| e - p * (inner(e, p) / pp)).collect();
    gram_schmidt(&projected, &[], |a, b| a.dot(b), 1e-8, d - 1)
}

fn orbit(elements: &[FiberMap], p: &DVector<f64>, opts: &ClassifyOptions) -> Vec<DVector<f64>> {
    let key = |x: &DVector<f64>| -> Vec<i64> { x.iter().map(|v| (v * 1e9).round() as i64).collect() };
    let mut seen: HashSet<Vec<i64>> = HashSet::new();
    seen.insert(key(p));
    let mut all = vec![p.clone()];
    let mut frontier = vec![p.clone()];
    for _ in 0..opts.max_word {
        let mut next = Vec::new();
        'outer: for x in &frontier {
            for g in elements {
                let y = g.apply(x);
                if seen.insert(key(&y)) {
                    all.push(y.clone());
                    next.push(y);
                    if all.len() >= opts.max_points {
                        break 'outer;
                    }
                }
            }
        }
        if next.is_empty() || all.len() >= opts.max_points {
            break;
        }
        frontier = next;
    }
    all
}

// Dimension of a cloud near p inside the tangent space `t` of the fiber.
fn local_dimension(cloud: &[DVector<f64>], p: &DVector<f64>, t: &[DVector<f64>], opts: &ClassifyOptions) -> (usize, f64, Option<Vec<DVector<f64>>>) {
    let near: Vec<DVector<f64>> = cloud
        .iter()
        .filter(|x| (*x - p).norm() <= opts.radius)
        .map(|x| DVector::from_iterator(t.len(), t.iter().map(|e| e.dot(&(x - p)))))
        .collect();
    if near.len() < t.len() + 2 {
        return (0, f64::INFINITY, None);
    }
    let pca = Pca::fit(&near).expect("non-empty");
    if pca.singular_values[0] <= 1e-12 {
        return (0, f64::INFINITY, None);
    }
    let (d, gap) = pca.dimension(opts.ratio);
    (d, gap, Some(pca.directions))
}

/// Classify the action of the group generated by `elements` on the fiber
/// through the fiber point `p` (fiber coordinates).
pub fn classify_fiber_action(space: &SpaceForm, elements: &[FiberMap], p: &DVector<f64>, opts: &ClassifyOptions) -> Result<OrbitStats> {
    if elements.len() < opts.min_elements {
        return Err(Error::TooFewElements {
            needed: opts.min_elements,
            got: elements.len(),
        });
    }
    let fiber_dim = if space.is_curved() { p.len() - 1 } else { p.len() };
    let cloud = orbit(elements, p, opts);
    let spread = cloud.iter().map(|x| (x - p).norm()).fold(0.0, f64::max);
    let tangent = fiber_tangent(space, p);
    let (orbit_dim, pca_gap, dirs) = local_dimension(&cloud, p, &tangent, opts);
    let stable = pca_gap >= opts.min_gap;
    let (action, bracket_residual) = if !stable {
        (FiberAction::Undetermined, None)
    } else if orbit_dim == fiber_dim {
        (FiberAction::Transitive, None)
    } else {
        let codim = fiber_dim - orbit_dim;
        let residual = if codim <= 1 || orbit_dim == 0 {
            // rank-one (or full) normal distributions are integrable
            0.0
        } else {
            normal_bracket_residual(&cloud, p, &tangent, orbit_dim, dirs.as_deref().unwrap_or(&[]), opts)
        };
        let action = if residual < 1e-3 {
            FiberAction::PolarLike
        } else {
            FiberAction::Undetermined
        };
        (action, Some(residual))
    };
    Ok(OrbitStats {
        action,
        orbit_points: cloud.len(),
        orbit_dim,
        fiber_dim,
        pca_gap: pca_gap.min(crate::nullity::GAP_CAP),
        bracket_residual,
        spread,
    })
}

// Fit a linear model of the normal projector around p from local PCA at
// nearby orbit points and measure how far the bracket of two normal fields
// leaves the normal space.
fn normal_bracket_residual(
    cloud: &[DVector<f64>],
    p: &DVector<f64>,
    tangent: &[DVector<f64>],
    orbit_dim: usize,
    dirs_p: &[DVector<f64>],
    opts: &ClassifyOptions,
) -> f64 {
    let r = tangent.len();
    let coords = |x: &DVector<f64>| DVector::from_iterator(r, tangent.iter().map(|e| e.dot(&(x - p))));
    let projector = |dirs: &[DVector<f64>]| {
        let mut n = DMatrix::identity(r, r);
        for d in dirs.iter().take(orbit_dim) {
            n -= d * d.transpose();
        }
        n
    };
    let n0 = projector(dirs_p);
    let anchors: Vec<&DVector<f64>> = cloud
        .iter()
        .filter(|x| {
            let d = (*x - p).norm();
            d > 0.0 && d <= opts.radius
        })
        .take(4 * r)
        .collect();
    let mut rows = Vec::new();
    let mut rhs = Vec::new();
    for a in &anchors {
        let (_, _, dirs) = local_dimension(cloud, a, tangent, opts);
        let Some(dirs) = dirs else { continue };
        rows.push(coords(a));
        rhs.push(projector(&dirs) - &n0);
    }
    if rows.len() < r {
        return f64::INFINITY;
    }
    // N(x) ≈ N0 + Σ_j x_j N_j, solved entrywise
    let a = DMatrix::from_fn(rows.len(), r, |i, j| rows[i][j]);
    let svd = a.svd(true, true);
    let mut slopes = vec![DMatrix::zeros(r, r); r];
    for i in 0..r {
        for j in 0..r {
            let b = DVector::from_iterator(rhs.len(), rhs.iter().map(|m| m[(i, j)]));
            let sol = svd.solve(&b, 1e-12).expect("svd solve");
            for (k, s) in slopes.iter_mut().enumerate() {
                s[(i, j)] = sol[k];
            }
        }
    }
    let normals: Vec<DVector<f64>> = dirs_p[orbit_dim..].to_vec();
    let mut worst: f64 = 0.0;
    for a in 0..normals.len() {
        for b in (a + 1)..normals.len() {
            let (u, v) = (&normals[a], &normals[b]);
            let du_v: DVector<f64> = slopes.iter().enumerate().fold(DVector::zeros(r), |acc, (j, s)| acc + s * u * v[j]);
            let dv_u: DVector<f64> = slopes.iter().enumerate().fold(DVector::zeros(r), |acc, (j, s)| acc + s * v * u[j]);
            let br = dv_u - du_v;
            worst = worst.max(((DMatrix::identity(r, r) - &n0) * br).norm());
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::immersion::{cylinder, h3_counterexample, plane, sphere_orbit};

    fn dv(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    fn opts(steps: usize) -> LiftOptions {
        LiftOptions {
            steps,
            ..LiftOptions::default()
        }
    }

    #[test]
    fn cylinder_chart_splits_off_z() {
        let chart = build_leaf_chart(&cylinder(), &dv(&[0.0, 0.0]), 0.5, DEFAULT_TAU).unwrap();
        assert_eq!(chart.leaf_dim, 1);
        assert_eq!(chart.transverse_axes, vec![0]);
        assert!((chart.leaf_dirs[0][1].abs() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn plane_chart_has_no_transverse_part() {
        let err = build_leaf_chart(&plane(), &dv(&[0.0, 0.0]), 0.5, DEFAULT_TAU).unwrap_err();
        assert!(matches!(err, Error::NoTransverseDirections));
    }

    #[test]
    fn h3_chart_splits_off_s() {
        let chart = build_leaf_chart(&h3_counterexample(), &dv(&[0.0, 0.0]), 0.5, DEFAULT_TAU).unwrap();
        assert_eq!(chart.transverse_axes, vec![0]);
    }

    #[test]
    fn cylinder_lift_is_a_horizontal_circle() {
        let imm = cylinder();
        let base = ParamCurve::segment(dv(&[0.0, 0.0]), dv(&[2.0 * PI, 0.0]));
        let path = horizontal_lift(&imm, &base, &dv(&[0.0, 5.0]), &opts(200)).unwrap();
        for node in &path.nodes {
            let t = 2.0 * PI * node.t;
            let want = [t.cos(), t.sin(), 5.0];
            for i in 0..3 {
                assert!((node.point[i] - want[i]).abs() < 1e-6, "{node:?}");
            }
        }
        assert!(path.horizontality_residual < 1e-6);
        let check = path.reverify(&imm, DEFAULT_TAU).unwrap();
        assert!(check.sampled_velocity < 1e-6, "{check:?}");
    }

    #[test]
    fn lift_from_base_point_follows_base() {
        let imm = cylinder();
        let base = ParamCurve::segment(dv(&[0.2, 1.0]), dv(&[1.4, 1.0]));
        let path = horizontal_lift(&imm, &base, &dv(&[0.2, 1.0]), &opts(100)).unwrap();
        let end = path.end_param().unwrap();
        assert!((end - dv(&[1.4, 1.0])).amax() < 1e-6);
    }

    #[test]
    fn off_leaf_start_is_rejected() {
        let imm = cylinder();
        let base = ParamCurve::segment(dv(&[0.0, 0.0]), dv(&[1.0, 0.0]));
        let err = horizontal_lift(&imm, &base, &dv(&[0.5, 1.0]), &opts(50)).unwrap_err();
        assert!(matches!(err, Error::NotOnLeaf { .. }));
    }

    #[test]
    fn h3_lift_keeps_s() {
        let imm = h3_counterexample();
        let base = ParamCurve::segment(dv(&[0.0, 0.0]), dv(&[5.0, 0.0]));
        let path = horizontal_lift(&imm, &base, &dv(&[0.0, 0.7]), &opts(400)).unwrap();
        for p in path.params() {
            let p = p.expect("located");
            assert!((p[1] - 0.7).abs() < 1e-6, "{p}");
        }
    }

    #[test]
    fn cylinder_displacement_preserves_heights() {
        let imm = cylinder();
        let base = ParamCurve::segment(dv(&[0.0, 0.0]), dv(&[PI / 2.0, 0.0]));
        let samples = [dv(&[0.0, 0.0]), dv(&[0.0, 1.0]), dv(&[0.0, 3.0])];
        let d = parallel_displacement(&imm, &base, &samples, &opts(200)).unwrap();
        for (x, q) in d.end_points.iter().zip(&samples) {
            assert!((x[2] - q[1]).abs() < 1e-8);
        }
        assert!(d.distortion < 1e-8);
    }

    #[test]
    fn constant_curve_gives_identity() {
        let imm = sphere_orbit();
        let u = dv(&[0.3, 1.2]);
        let d = parallel_displacement(&imm, &ParamCurve::constant(u), &[dv(&[0.3, 1.0])], &opts(20)).unwrap();
        assert!(d.map.distance(&FiberMap::identity(&imm.space, 1)) < 1e-12);
    }

    #[test]
    fn sphere_orbit_loop_is_orthogonal() {
        let imm = sphere_orbit();
        let base = ParamCurve::segment(dv(&[0.0, PI / 2.0]), dv(&[2.0 * PI, PI / 2.0]));
        let samples: Vec<_> = [0.4, 0.9, 1.5, 2.1, 2.7].iter().map(|&s| dv(&[0.0, s])).collect();
        let d = parallel_displacement(&imm, &base, &samples, &opts(400)).unwrap();
        assert_eq!(d.map.matrix().shape(), (2, 2));
        assert!(d.map.isometry_defect(&imm.space) < 1e-6);
        assert!(d.distortion < 1e-6, "{}", d.distortion);
        assert!(d.fit_residual < 1e-6);
    }

    #[test]
    fn cylinder_holonomy_is_trivial() {
        let imm = cylinder();
        let chart = build_leaf_chart(&imm, &dv(&[0.0, 0.0]), 0.5, DEFAULT_TAU).unwrap();
        let cfg = LoopConfig {
            count: 6,
            steps: 100,
            ..LoopConfig::default()
        };
        let sample = holonomy_sample(&imm, &chart, &cfg).unwrap();
        let id = FiberMap::identity(&imm.space, 1);
        for e in &sample.elements {
            assert!(e.map.distance(&id) < 1e-6);
        }
    }

    #[test]
    fn loop_specs_are_reproducible() {
        let chart = build_leaf_chart(&cylinder(), &dv(&[0.0, 0.0]), 0.5, DEFAULT_TAU).unwrap();
        let cfg = LoopConfig::default();
        assert_eq!(LoopSpec::random(&chart, &cfg, 7), LoopSpec::random(&chart, &cfg, 7));
        assert_ne!(LoopSpec::random(&chart, &cfg, 7), LoopSpec::random(&chart, &cfg, 8));
    }

    #[test]
    fn composition_and_reversal() {
        let imm = sphere_orbit();
        let chart = build_leaf_chart(&imm, &dv(&[0.0, PI / 2.0]), 0.3, DEFAULT_TAU).unwrap();
        let cfg = LoopConfig::default();
        let o = opts(400);
        let c1 = LoopSpec::random(&chart, &cfg, 0).curve(&chart);
        let c2 = LoopSpec::random(&chart, &cfg, 1).curve(&chart);
        let e1 = loop_element(&imm, &c1, &o).unwrap();
        let e2 = loop_element(&imm, &c2, &o).unwrap();
        let e12 = loop_element(&imm, &c1.then(&c2), &o).unwrap();
        assert!(e1.then(&e2).distance(&e12) < 1e-5);
        let rev = loop_element(&imm, &c1.reversed(), &o).unwrap();
        assert!(rev.distance(&e1.inverse()) < 1e-5);
    }

    #[test]
    fn identity_elements_have_point_orbits() {
        let space = SpaceForm::euclidean(3);
        let elements = vec![FiberMap::identity(&space, 1); 100];
        let stats = classify_fiber_action(&space, &elements, &dv(&[0.5]), &ClassifyOptions::default()).unwrap();
        assert_eq!(stats.orbit_dim, 0);
        assert_eq!(stats.orbit_points, 1);
        assert_eq!(stats.action, FiberAction::PolarLike);
    }

    #[test]
    fn rotations_act_transitively_on_the_circle() {
        let space = SpaceForm::sphere(3);
        let elements: Vec<FiberMap> = (0..100)
            .map(|i| {
                let a = 0.37 * i as f64;
                FiberMap::Orthogonal {
                    matrix: DMatrix::from_row_slice(2, 2, &[a.cos(), -a.sin(), a.sin(), a.cos()]),
                }
            })
            .collect();
        let stats = classify_fiber_action(&space, &elements, &dv(&[1.0, 0.0]), &ClassifyOptions::default()).unwrap();
        assert_eq!(stats.action, FiberAction::Transitive, "{stats:?}");
    }

    #[test]
    fn too_few_elements() {
        let space = SpaceForm::euclidean(3);
        let err = classify_fiber_action(&space, &[], &dv(&[0.0]), &ClassifyOptions::default()).unwrap_err();
        assert!(matches!(err, Error::TooFewElements { .. }));
    }
}
