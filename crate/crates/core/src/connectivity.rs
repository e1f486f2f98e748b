//! Horizontal reachability: curves everywhere orthogonal to the nullity.
//!
//! Horizontal curves are driven by Fourier controls against a horizontal
//! frame that is continued along the curve. Success of a connection is a
//! certificate (the path is returned and re-checkable); failure is only
//! evidence, reported as the best gap over all restarts.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::sync::Arc;

use crate::bundle::{HorizontalPath, PathNode};
use crate::error::{Error, Result};
use crate::immersion::{ChartedImmersion, ParamBox};
use crate::linalg::Pca;
use crate::nullity::{nullity_at, DEFAULT_TAU};
use crate::projection::{project, ProjectionOptions};
use crate::shape::ShapeData;

/// Kernel / horizontal splitting of the tangent space at one point.
#[derive(Debug, Clone)]
pub struct Split {
    pub kernel_param: Vec<DVector<f64>>,
    pub kernel_ambient: Vec<DVector<f64>>,
    pub horizontal_param: Vec<DVector<f64>>,
    pub horizontal_ambient: Vec<DVector<f64>>,
    pub gap: f64,
    pub ambiguous: bool,
}

impl Split {
    /// Largest `|<w, n>|` over the kernel basis.
    pub fn kernel_component(&self, w: &DVector<f64>, imm: &ChartedImmersion) -> f64 {
        self.kernel_ambient
            .iter()
            .map(|n| imm.space.inner(w, n).abs())
            .fold(0.0, f64::max)
    }
}

/// A distribution on a charted immersion, given by its kernel side.
/// Horizontal curves are tangent to the orthogonal complement.
pub trait Distribution: Sync {
    fn immersion(&self) -> &ChartedImmersion;
    fn split(&self, u: &DVector<f64>) -> Result<Split>;
}

/// The nullity distribution of an immersion.
pub struct NullityDistribution<'a> {
    pub imm: &'a ChartedImmersion,
    pub tau: f64,
}

impl<'a> NullityDistribution<'a> {
    pub fn new(imm: &'a ChartedImmersion) -> Self {
        Self { imm, tau: DEFAULT_TAU }
    }
}

impl Distribution for NullityDistribution<'_> {
    fn immersion(&self) -> &ChartedImmersion {
        self.imm
    }

    fn split(&self, u: &DVector<f64>) -> Result<Split> {
        let (_, d) = nullity_at(self.imm, u, self.tau)?;
        Ok(Split {
            kernel_param: d.basis_param,
            kernel_ambient: d.basis_ambient,
            horizontal_param: d.complement_param,
            horizontal_ambient: d.complement_ambient,
            gap: d.gap,
            ambiguous: d.ambiguous,
        })
    }
}

/// Rotate an orthonormal basis to the one closest to `reference` (polar
/// factor of the overlap matrix). Fails when the spans have drifted apart.
pub(crate) fn align_basis(
    imm: &ChartedImmersion,
    param: &[DVector<f64>],
    ambient: &[DVector<f64>],
    reference: &[DVector<f64>],
) -> Result<(Vec<DVector<f64>>, Vec<DVector<f64>>)> {
    let k = ambient.len();
    if k == 0 {
        return Ok((Vec::new(), Vec::new()));
    }
    let c = DMatrix::from_fn(k, k, |a, b| imm.space.inner(&reference[a], &ambient[b]));
    let svd = c.svd(true, true);
    let smin = svd.singular_values.min();
    if smin < 0.3 {
        return Err(Error::FrameContinuation(format!(
            "frame overlap dropped to {smin:.3e}"
        )));
    }
    let r = svd.u.expect("u requested") * svd.v_t.expect("v requested");
    let combine = |vs: &[DVector<f64>], a: usize| {
        let mut out = DVector::zeros(vs[0].len());
        for (b, v) in vs.iter().enumerate() {
            out.axpy(r[(a, b)], v, 1.0);
        }
        out
    };
    Ok(((0..k).map(|a| combine(param, a)).collect(), (0..k).map(|a| combine(ambient, a)).collect()))
}

fn checked_split<D: Distribution + ?Sized>(dist: &D, u: &DVector<f64>, kernel_dim: Option<usize>) -> Result<Split> {
    let s = dist.split(u)?;
    if s.ambiguous {
        return Err(Error::AmbiguousKernel {
            param: u.iter().copied().collect(),
            gap: s.gap,
        });
    }
    if let Some(k) = kernel_dim {
        if s.kernel_param.len() != k {
            return Err(Error::NullityJump {
                param: u.iter().copied().collect(),
                from: k,
                to: s.kernel_param.len(),
            });
        }
    }
    Ok(s)
}

/// Truncated Fourier controls `w(t) = a₀ + Σ_k c_k cos 2πkt + s_k sin 2πkt`,
/// one series per horizontal direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FourierControls {
    pub dim: usize,
    pub harmonics: usize,
    /// Per direction: `[a₀, c₁..c_K, s₁..s_K]`.
    pub coefficients: Vec<f64>,
}

impl FourierControls {
    pub fn zeros(dim: usize, harmonics: usize) -> Self {
        Self {
            dim,
            harmonics,
            coefficients: vec![0.0; dim * (2 * harmonics + 1)],
        }
    }

    pub fn from_vec(dim: usize, harmonics: usize, v: &DVector<f64>) -> Self {
        Self {
            dim,
            harmonics,
            coefficients: v.iter().copied().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.coefficients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coefficients.is_empty()
    }

    /// Coefficients uniform in `[-scale/k, scale/k]` for harmonic `k`
    /// (`k = 1` for the constant term).
    pub fn random(dim: usize, harmonics: usize, scale: f64, rng: &mut impl Rng) -> Self {
        let mut c = Self::zeros(dim, harmonics);
        let per = 2 * harmonics + 1;
        for a in 0..dim {
            for j in 0..per {
                let k = if j == 0 { 1 } else { (j - 1) % harmonics + 1 };
                c.coefficients[a * per + j] = rng.gen_range(-1.0..1.0) * scale / k as f64;
            }
        }
        c
    }

    pub fn eval(&self, t: f64) -> DVector<f64> {
        let per = 2 * self.harmonics + 1;
        DVector::from_fn(self.dim, |a, _| {
            let c = &self.coefficients[a * per..(a + 1) * per];
            let mut w = c[0];
            for k in 1..=self.harmonics {
                let om = 2.0 * PI * k as f64 * t;
                w += c[k] * om.cos() + c[self.harmonics + k] * om.sin();
            }
            w
        })
    }

    /// `∫₀¹ |w|² dt`.
    pub fn energy(&self) -> f64 {
        energy_weights(self.dim, self.harmonics)
            .iter()
            .zip(&self.coefficients)
            .map(|(w, c)| w * c * c)
            .sum()
    }
}

fn energy_weights(dim: usize, harmonics: usize) -> Vec<f64> {
    let per = 2 * harmonics + 1;
    (0..dim * per).map(|i| if i % per == 0 { 1.0 } else { 0.5 }).collect()
}

/// A horizontal curve produced by [`integrate_controls`].
#[derive(Debug, Clone)]
pub struct ControlPath {
    pub params: Vec<DVector<f64>>,
    pub points: Vec<DVector<f64>>,
    pub velocities: Vec<DVector<f64>>,
    /// Horizontal frame (ambient) at the last node.
    pub end_frame: Vec<DVector<f64>>,
    /// Largest kernel component of a node velocity.
    pub horizontality: f64,
    /// The curve hit the box boundary and was cut there.
    pub truncated: bool,
}

impl ControlPath {
    pub fn end_param(&self) -> &DVector<f64> {
        self.params.last().expect("non-empty")
    }

    pub fn end_point(&self) -> &DVector<f64> {
        self.points.last().expect("non-empty")
    }

    pub fn to_path(&self) -> HorizontalPath {
        let n = self.params.len().max(2) - 1;
        let step = 1.0 / n as f64;
        HorizontalPath {
            nodes: (0..self.params.len())
                .map(|k| PathNode {
                    t: k as f64 * step,
                    param: Some(self.params[k].iter().copied().collect()),
                    point: self.points[k].iter().copied().collect(),
                    velocity: self.velocities[k].iter().copied().collect(),
                })
                .collect(),
            step,
            horizontality_residual: self.horizontality,
            on_manifold_residual: 0.0,
            unverified_nodes: 0,
        }
    }
}

// Horizontal frame at u continued from `reference` (ambient).
fn frame<D: Distribution + ?Sized>(
    dist: &D,
    u: &DVector<f64>,
    kernel_dim: usize,
    reference: Option<&[DVector<f64>]>,
) -> Result<(Split, Vec<DVector<f64>>, Vec<DVector<f64>>)> {
    let s = checked_split(dist, u, Some(kernel_dim))?;
    let (p, a) = match reference {
        None => (s.horizontal_param.clone(), s.horizontal_ambient.clone()),
        Some(r) => align_basis(dist.immersion(), &s.horizontal_param, &s.horizontal_ambient, r)?,
    };
    Ok((s, p, a))
}

fn combine(w: &DVector<f64>, vs: &[DVector<f64>]) -> DVector<f64> {
    let mut out = DVector::zeros(vs.first().map_or(0, |v| v.len()));
    for (wi, v) in w.iter().zip(vs) {
        out.axpy(*wi, v, 1.0);
    }
    out
}

/// Integrate `u' = Σ_a w_a(t) H_a(u)` over `[0, 1]` by RK4 with `steps`
/// steps. The frame `H` is continued from node to node; the initial frame
/// is the distribution's own basis at `u0` unless `reference` is given.
///
/// Leaving `bbox` is an error unless `truncate` is set, in which case the
/// curve stops at the last node inside.
pub fn integrate_controls<D: Distribution + ?Sized>(
    dist: &D,
    u0: &DVector<f64>,
    controls: &FourierControls,
    steps: usize,
    bbox: &ParamBox,
    truncate: bool,
) -> Result<ControlPath> {
    let imm = dist.immersion();
    let s0 = checked_split(dist, u0, None)?;
    let kdim = s0.kernel_param.len();
    if controls.dim != s0.horizontal_param.len() {
        return Err(Error::DimensionMismatch {
            expected: s0.horizontal_param.len(),
            got: controls.dim,
        });
    }
    let h = 1.0 / steps as f64;
    let mut u = u0.clone();
    let (mut split, mut hp, mut ha) = (s0.clone(), s0.horizontal_param, s0.horizontal_ambient);
    let mut params = vec![u.clone()];
    let mut points = vec![imm.point(&u)?];
    let w0 = controls.eval(0.0);
    let mut velocities = vec![combine(&w0, &ha)];
    let mut horizontality = split.kernel_component(&velocities[0], imm);
    let mut truncated = false;
    for k in 0..steps {
        let t = k as f64 * h;
        let stage = |x: &DVector<f64>, tt: f64| -> Result<DVector<f64>> {
            if !bbox.contains(x) {
                return Err(Error::OutsideBox {
                    param: x.iter().copied().collect(),
                });
            }
            let (_, p, _) = frame(dist, x, kdim, Some(&ha))?;
            Ok(combine(&controls.eval(tt), &p))
        };
        let step = (|| -> Result<DVector<f64>> {
            let k1 = combine(&controls.eval(t), &hp);
            let k2 = stage(&(&u + &k1 * (0.5 * h)), t + 0.5 * h)?;
            let k3 = stage(&(&u + &k2 * (0.5 * h)), t + 0.5 * h)?;
            let k4 = stage(&(&u + &k3 * h), t + h)?;
            let next = &u + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
            if !bbox.contains(&next) {
                return Err(Error::OutsideBox {
                    param: next.iter().copied().collect(),
                });
            }
            Ok(next)
        })();
        let next = match step {
            Ok(n) => n,
            Err(Error::OutsideBox { .. }) if truncate => {
                truncated = true;
                break;
            }
            Err(e) => return Err(e),
        };
        let (s, p, a) = frame(dist, &next, kdim, Some(&ha))?;
        u = next;
        split = s;
        hp = p;
        ha = a;
        let v = combine(&controls.eval(t + h), &ha);
        horizontality = horizontality.max(split.kernel_component(&v, imm));
        params.push(u.clone());
        points.push(imm.point(&u)?);
        velocities.push(v);
    }
    Ok(ControlPath {
        params,
        points,
        velocities,
        end_frame: ha,
        horizontality,
        truncated,
    })
}

/// Minimize `|r(x)|²` by Levenberg–Marquardt with a forward-difference
/// Jacobian. Evaluation errors count as rejected steps.
pub(crate) fn levenberg_marquardt<F>(r: F, x0: &DVector<f64>, max_iter: usize, target: f64) -> Result<DVector<f64>>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>> + Sync,
{
    let mut x = x0.clone();
    let mut res = r(&x)?;
    let mut cost = res.norm_squared();
    let mut lambda = 1e-3;
    let mut iterations = 0;
    let mut stalled = 0;
    while iterations < max_iter && cost.sqrt() > target {
        iterations += 1;
        let cols: Vec<DVector<f64>> = (0..x.len())
            .into_par_iter()
            .map(|i| {
                let d = 1e-7 * (1.0 + x[i].abs());
                let mut xp = x.clone();
                xp[i] += d;
                r(&xp).map(|rp| (rp - &res) / d)
            })
            .collect::<Result<_>>()?;
        let j = DMatrix::from_columns(&cols);
        let jtj = j.transpose() * &j;
        let grad = j.transpose() * &res;
        let mut accepted = false;
        for _ in 0..12 {
            let mut a = jtj.clone();
            for i in 0..a.nrows() {
                a[(i, i)] += lambda * (1.0 + jtj[(i, i)]);
            }
            let Some(step) = a.cholesky().map(|c| c.solve(&(-&grad))) else {
                lambda *= 4.0;
                continue;
            };
            let trial = &x + &step;
            match r(&trial) {
                Ok(tr) if tr.norm_squared() < cost => {
                    let new = tr.norm_squared();
                    stalled = if cost - new < 1e-6 * cost { stalled + 1 } else { 0 };
                    x = trial;
                    res = tr;
                    cost = new;
                    lambda = (lambda / 3.0).max(1e-12);
                    accepted = true;
                    break;
                }
                _ => lambda *= 4.0,
            }
        }
        if !accepted || stalled >= 3 {
            break;
        }
    }
    Ok(x)
}

/// Solver settings for [`connect_horizontal`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConnectConfig {
    pub harmonics: usize,
    pub restarts: usize,
    /// Restarts run in parallel batches of this size; the search stops
    /// after the first batch containing a success.
    pub batch: usize,
    pub steps: usize,
    pub max_iter: usize,
    /// A connection succeeds when the endpoint gap is below this.
    pub gap_tol: f64,
    /// Scale of random initial coefficients.
    pub init_scale: f64,
    pub seed: u64,
    pub tau: f64,
    /// Region the curves must stay in (default: the immersion's box).
    pub bbox: Option<ParamBox>,
}

impl Default for ConnectConfig {
    fn default() -> Self {
        Self {
            harmonics: 6,
            restarts: 32,
            batch: 8,
            steps: 100,
            max_iter: 40,
            gap_tol: 1e-6,
            init_scale: 1.0,
            seed: 0,
            tau: DEFAULT_TAU,
            bbox: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConnectionStatus {
    Connected,
    Failed,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConnectionResult {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub status: ConnectionStatus,
    /// Ambient geodesic distance from the path end to `f(q)`.
    pub gap: f64,
    pub path: Option<HorizontalPath>,
    pub controls: Option<FourierControls>,
    pub best_restart: Option<usize>,
    pub restarts_run: usize,
    /// Best gap of every restart that ran (infinite when it failed to start).
    pub restart_gaps: Vec<f64>,
    pub seed: u64,
}

fn endpoint_gap<D: Distribution + ?Sized>(dist: &D, p: &ControlPath, q: &DVector<f64>) -> f64 {
    dist.immersion().space.distance(p.end_point(), q)
}

fn straight_path(imm: &ChartedImmersion, p: &DVector<f64>, q: &DVector<f64>, steps: usize) -> Result<HorizontalPath> {
    let d = q - p;
    let nodes = (0..=steps)
        .map(|k| {
            let t = k as f64 / steps as f64;
            let u = p + &d * t;
            let jet = imm.jet2_fast(&u)?;
            Ok(PathNode {
                t,
                param: Some(u.iter().copied().collect()),
                point: jet.point.iter().copied().collect(),
                velocity: jet.push_forward(&d).iter().copied().collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(HorizontalPath {
        nodes,
        step: 1.0 / steps as f64,
        horizontality_residual: 0.0,
        on_manifold_residual: 0.0,
        unverified_nodes: 0,
    })
}

fn restart_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Try to join `p` to `q` (parameter points) by a horizontal curve.
pub fn connect_horizontal<D: Distribution + ?Sized>(dist: &D, p: &DVector<f64>, q: &DVector<f64>, cfg: &ConnectConfig) -> Result<ConnectionResult> {
    let imm = dist.immersion();
    let bbox = cfg.bbox.clone().unwrap_or_else(|| imm.eval_box.clone());
    let target = imm.point(q)?;
    let start = checked_split(dist, p, None)?;
    let r = start.horizontal_param.len();
    let mut out = ConnectionResult {
        p: p.iter().copied().collect(),
        q: q.iter().copied().collect(),
        status: ConnectionStatus::Failed,
        gap: imm.space.distance(&imm.point(p)?, &target),
        path: None,
        controls: None,
        best_restart: None,
        restarts_run: 0,
        restart_gaps: Vec::new(),
        seed: cfg.seed,
    };
    if out.gap < cfg.gap_tol {
        out.status = ConnectionStatus::Connected;
        out.gap = 0.0;
        out.path = Some(straight_path(imm, p, p, cfg.steps)?);
        return Ok(out);
    }
    if start.kernel_param.is_empty() {
        // every curve is horizontal
        out.status = ConnectionStatus::Connected;
        out.gap = 0.0;
        out.path = Some(straight_path(imm, p, q, cfg.steps)?);
        return Ok(out);
    }
    if r == 0 {
        return Ok(out);
    }
    let solve = |index: usize| -> (f64, Option<(FourierControls, ControlPath)>) {
        let init = if index == 0 {
            FourierControls::zeros(r, cfg.harmonics)
        } else {
            FourierControls::random(r, cfg.harmonics, cfg.init_scale, &mut restart_rng(cfg.seed, index))
        };
        let residual = |c: &DVector<f64>| -> Result<DVector<f64>> {
            let ctl = FourierControls::from_vec(r, cfg.harmonics, c);
            let path = integrate_controls(dist, p, &ctl, cfg.steps, &bbox, false)?;
            Ok(path.end_point() - &target)
        };
        let x0 = DVector::from_column_slice(&init.coefficients);
        let tol = 1e-3 * cfg.gap_tol;
        let Ok(x) = levenberg_marquardt(residual, &x0, cfg.max_iter, tol) else {
            return (f64::INFINITY, None);
        };
        let ctl = FourierControls::from_vec(r, cfg.harmonics, &x);
        match integrate_controls(dist, p, &ctl, cfg.steps, &bbox, false) {
            Ok(path) => (endpoint_gap(dist, &path, &target), Some((ctl, path))),
            Err(_) => (f64::INFINITY, None),
        }
    };
    let mut best: Option<(usize, f64, FourierControls, ControlPath)> = None;
    let batch = cfg.batch.max(1);
    let mut start_idx = 0;
    while start_idx < cfg.restarts {
        let end = (start_idx + batch).min(cfg.restarts);
        let results: Vec<(f64, Option<(FourierControls, ControlPath)>)> = (start_idx..end).into_par_iter().map(solve).collect();
        for (i, (gap, sol)) in results.into_iter().enumerate() {
            out.restart_gaps.push(gap);
            if let Some((ctl, path)) = sol {
                // lowest gap wins; ties keep the lower index
                if best.as_ref().is_none_or(|b| gap < b.1) {
                    best = Some((start_idx + i, gap, ctl, path));
                }
            }
        }
        out.restarts_run = end;
        start_idx = end;
        if best.as_ref().is_some_and(|b| b.1 < cfg.gap_tol) {
            break;
        }
    }
    if let Some((idx, gap, ctl, path)) = best {
        out.gap = gap;
        out.best_restart = Some(idx);
        out.controls = Some(ctl);
        out.path = Some(path.to_path());
        if gap < cfg.gap_tol {
            out.status = ConnectionStatus::Connected;
        }
    }
    Ok(out)
}

/// Upper bound on the Carnot–Carathéodory distance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CcEstimate {
    /// Path length, or infinite when no connection was found.
    pub length: f64,
    pub gap: f64,
    pub connection: ConnectionResult,
    pub path: Option<HorizontalPath>,
}

/// Shortest horizontal curve found within the control space. Starts from
/// a connecting solution, minimizes energy under a growing endpoint
/// penalty, then restores the endpoint by minimal-norm Gauss–Newton steps.
pub fn cc_distance_estimate<D: Distribution + ?Sized>(dist: &D, p: &DVector<f64>, q: &DVector<f64>, cfg: &ConnectConfig) -> Result<CcEstimate> {
    let imm = dist.immersion();
    let connection = connect_horizontal(dist, p, q, cfg)?;
    if connection.status == ConnectionStatus::Failed {
        return Ok(CcEstimate {
            length: f64::INFINITY,
            gap: connection.gap,
            path: None,
            connection,
        });
    }
    if connection.gap == 0.0 && connection.controls.is_none() {
        // trivial cases: p = q, or no nullity
        let length = if imm.space.distance(&imm.point(p)?, &imm.point(q)?) < cfg.gap_tol {
            0.0
        } else {
            polyline_length(connection.path.as_ref().expect("straight path"))
        };
        return Ok(CcEstimate {
            length,
            gap: 0.0,
            path: connection.path.clone(),
            connection,
        });
    }
    let ctl0 = connection.controls.clone().expect("connected with controls");
    let (r, k) = (ctl0.dim, ctl0.harmonics);
    let bbox = cfg.bbox.clone().unwrap_or_else(|| imm.eval_box.clone());
    let target = imm.point(q)?;
    let weights: Vec<f64> = energy_weights(r, k).iter().map(|w| w.sqrt()).collect();
    let endpoint = |c: &DVector<f64>| -> Result<DVector<f64>> {
        let ctl = FourierControls::from_vec(r, k, c);
        Ok(integrate_controls(dist, p, &ctl, cfg.steps, &bbox, false)?.end_point() - &target)
    };
    let mut x = DVector::from_column_slice(&ctl0.coefficients);
    for lambda in [1e2, 1e4, 1e6] {
        let s = f64::sqrt(lambda);
        let penalized = |c: &DVector<f64>| -> Result<DVector<f64>> {
            let e = endpoint(c)?;
            let mut out = DVector::zeros(c.len() + e.len());
            for i in 0..c.len() {
                out[i] = weights[i] * c[i];
            }
            for i in 0..e.len() {
                out[c.len() + i] = s * e[i];
            }
            Ok(out)
        };
        x = levenberg_marquardt(penalized, &x, cfg.max_iter, 0.0)?;
    }
    for _ in 0..10 {
        let e = endpoint(&x)?;
        if e.norm() < 1e-3 * cfg.gap_tol {
            break;
        }
        let cols: Vec<DVector<f64>> = (0..x.len())
            .into_par_iter()
            .map(|i| {
                let d = 1e-7 * (1.0 + x[i].abs());
                let mut xp = x.clone();
                xp[i] += d;
                endpoint(&xp).map(|ep| (ep - &e) / d)
            })
            .collect::<Result<_>>()?;
        let j = DMatrix::from_columns(&cols);
        let step = j.svd(true, true).solve(&(-e), 1e-10).map_err(|e| Error::Unsupported(e.to_string()))?;
        x += step;
    }
    let ctl = FourierControls::from_vec(r, k, &x);
    let path = integrate_controls(dist, p, &ctl, cfg.steps, &bbox, false)?;
    let gap = endpoint_gap(dist, &path, &target);
    if gap >= cfg.gap_tol {
        // the relaxation lost the endpoint; fall back to the connecting curve
        let path = connection.path.clone().expect("connected path");
        return Ok(CcEstimate {
            length: control_length(&ctl0),
            gap: connection.gap,
            path: Some(path),
            connection,
        });
    }
    Ok(CcEstimate {
        length: control_length(&ctl),
        gap,
        path: Some(path.to_path()),
        connection,
    })
}

// Frames are orthonormal, so the speed is |w(t)|; trapezoidal rule.
fn control_length(ctl: &FourierControls) -> f64 {
    let n = 4000;
    let speeds: Vec<f64> = (0..=n).map(|i| ctl.eval(i as f64 / n as f64).norm()).collect();
    let inner: f64 = speeds[1..n].iter().sum();
    (inner + 0.5 * (speeds[0] + speeds[n])) / n as f64
}

fn polyline_length(path: &HorizontalPath) -> f64 {
    path.nodes
        .windows(2)
        .map(|w| {
            let a = DVector::from_column_slice(&w[0].point);
            let b = DVector::from_column_slice(&w[1].point);
            (b - a).norm()
        })
        .sum()
}

/// A parameter-space vector field.
pub type Field<'a> = Arc<dyn Fn(&DVector<f64>) -> Result<DVector<f64>> + Send + Sync + 'a>;

/// `[X, Y](u) = DY·X − DX·Y` by central differences.
pub fn lie_bracket(x: &Field<'_>, y: &Field<'_>, u: &DVector<f64>, delta: f64) -> Result<DVector<f64>> {
    let xu = x(u)?;
    let yu = y(u)?;
    let directional = |f: &Field<'_>, v: &DVector<f64>| -> Result<DVector<f64>> {
        let n = v.norm();
        if n == 0.0 {
            return Ok(DVector::zeros(u.len()));
        }
        let d = delta / n;
        Ok((f(&(u + v * d))? - f(&(u - v * d))?) / (2.0 * d))
    };
    Ok(directional(y, &xu)? - directional(x, &yu)?)
}

/// Growth of the span of iterated brackets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BracketReport {
    /// Span dimension after brackets of length `1..=depth`.
    pub dimensions: Vec<usize>,
    /// The span reached the full parameter dimension.
    pub generating: bool,
    /// Largest new component seen at each bracket length above 1.
    pub residuals: Vec<f64>,
}

/// Threshold above which a bracket counts as a new direction.
pub const BRACKET_TOL: f64 = 1e-4;

/// Span of the fields and their iterated brackets at `u`, measured with
/// the metric `metric` on parameter vectors.
pub fn bracket_span<'a>(fields: &[Field<'a>], u: &DVector<f64>, depth: usize, delta: f64, metric: &DMatrix<f64>) -> Result<BracketReport> {
    let m = u.len();
    let inner = |a: &DVector<f64>, b: &DVector<f64>| (a.transpose() * metric * b)[(0, 0)];
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let add = |v: &DVector<f64>, basis: &mut Vec<DVector<f64>>| -> f64 {
        let scale = inner(v, v).sqrt();
        let mut w = v.clone();
        for b in basis.iter() {
            w -= b * inner(&w, b);
        }
        let n = inner(&w, &w).max(0.0).sqrt();
        if n > BRACKET_TOL && n > 1e-8 * scale && basis.len() < m {
            basis.push(w / n);
        }
        n
    };
    for f in fields {
        add(&f(u)?, &mut basis);
    }
    let mut dimensions = vec![basis.len()];
    let mut residuals = Vec::new();
    let mut layer: Vec<Field<'a>> = fields.to_vec();
    for _ in 1..depth {
        let mut next: Vec<Field<'a>> = Vec::new();
        let mut worst: f64 = 0.0;
        for a in fields {
            for b in &layer {
                let (a, b) = (a.clone(), b.clone());
                let field: Field<'a> = Arc::new(move |x: &DVector<f64>| lie_bracket(&a, &b, x, delta));
                worst = worst.max(add(&field(u)?, &mut basis));
                next.push(field);
            }
        }
        dimensions.push(basis.len());
        residuals.push(worst);
        layer = next;
        if basis.len() == m {
            break;
        }
    }
    Ok(BracketReport {
        generating: basis.len() == m,
        dimensions,
        residuals,
    })
}

/// Bracket generation of the horizontal distribution at `u`, with the
/// horizontal frame continued from its value at `u`.
pub fn bracket_generation<D: Distribution + ?Sized>(dist: &D, u: &DVector<f64>, depth: usize) -> Result<BracketReport> {
    let imm = dist.immersion();
    let s = checked_split(dist, u, None)?;
    let kdim = s.kernel_param.len();
    let m = u.len();
    if kdim == 0 || kdim == m {
        return Err(Error::Unsupported("bracket test needs 0 < μ < m".into()));
    }
    let reference = s.horizontal_ambient.clone();
    let fields: Vec<Field<'_>> = (0..reference.len())
        .map(|a| {
            let reference = reference.clone();
            let field: Field<'_> = Arc::new(move |x: &DVector<f64>| {
                let (_, p, _) = frame(dist, x, kdim, Some(&reference))?;
                Ok(p[a].clone())
            });
            field
        })
        .collect();
    let shape = ShapeData::at(imm, u)?;
    bracket_span(&fields, u, depth, 1e-3, &shape.g)
}


/// Settings for [`equivalence_class_probe`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub paths: usize,
    pub steps: usize,
    pub harmonics: usize,
    /// Scale of the random control coefficients.
    pub amplitude: f64,
    pub seed: u64,
    /// Neighbourhood radii (parameter units) for the dimension estimate;
    /// the estimate must agree across all of them.
    pub radii: Vec<f64>,
    pub ratio: f64,
    pub min_gap: f64,
    /// Displacement along the nullity for the parallel-foliation check.
    pub foliation_offset: f64,
    pub foliation_tol: f64,
    /// Paths used by the foliation check, and the node stride along each.
    pub foliation_paths: usize,
    pub foliation_stride: usize,
    pub tau: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            paths: 24,
            steps: 100,
            harmonics: 3,
            amplitude: 0.5,
            seed: 0,
            radii: vec![0.1, 0.2],
            ratio: 0.1,
            min_gap: 3.0,
            foliation_offset: 0.3,
            foliation_tol: 1e-4,
            foliation_paths: 6,
            foliation_stride: 10,
            tau: DEFAULT_TAU,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassKind {
    /// The class contains a neighbourhood of the base point.
    OpenClass,
    /// The class is a proper submanifold; nearby classes are checked to be
    /// parallel to it.
    ProperSubmanifold,
    Undetermined,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DimensionSample {
    pub radius: f64,
    pub neighbours: usize,
    pub dimension: usize,
    pub gap: f64,
}

/// Parallel-foliation check: points of the class pushed along a nullity
/// direction must stay on `M` and trace a horizontal set again.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoliationCheck {
    pub offset: f64,
    pub checked_points: usize,
    /// Largest distance of a displaced point from `M`.
    pub off_manifold: f64,
    /// Largest kernel component of the displaced curves' unit tangents.
    pub kernel_component: f64,
    pub failures: usize,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReachabilityReport {
    pub base: Vec<f64>,
    /// Path endpoints, each joined to the base by the matching path.
    pub class_points: Vec<Vec<f64>>,
    pub paths: Vec<HorizontalPath>,
    pub dimension: Option<usize>,
    pub samples: Vec<DimensionSample>,
    pub classification: ClassKind,
    pub foliation: Option<FoliationCheck>,
    pub max_horizontality: f64,
    pub truncated_paths: usize,
}

/// Grow the horizontal class of `u` inside `bbox` from seeded random
/// controls and classify it.
pub fn equivalence_class_probe<D: Distribution + ?Sized>(dist: &D, u: &DVector<f64>, bbox: &ParamBox, cfg: &ProbeConfig) -> Result<ReachabilityReport> {
    let m = u.len();
    let s0 = checked_split(dist, u, None)?;
    let r = s0.horizontal_param.len();
    let paths: Vec<ControlPath> = if r == 0 {
        Vec::new()
    } else {
        (0..cfg.paths)
            .into_par_iter()
            .map(|i| {
                let ctl = FourierControls::random(r, cfg.harmonics, cfg.amplitude, &mut restart_rng(cfg.seed, i));
                integrate_controls(dist, u, &ctl, cfg.steps, bbox, true)
            })
            .collect::<Result<_>>()?
    };
    let mut cloud: Vec<DVector<f64>> = vec![u.clone()];
    for p in &paths {
        cloud.extend(p.params.iter().skip(1).cloned());
    }
    let samples: Vec<DimensionSample> = cfg
        .radii
        .iter()
        .map(|&radius| {
            let near: Vec<DVector<f64>> = cloud.iter().filter(|x| (*x - u).norm() <= radius).cloned().collect();
            let (dimension, gap) = if near.len() < m + 2 {
                (0, f64::INFINITY)
            } else {
                Pca::fit(&near).expect("non-empty").dimension(cfg.ratio)
            };
            DimensionSample {
                radius,
                neighbours: near.len(),
                dimension,
                gap: gap.min(crate::nullity::GAP_CAP),
            }
        })
        .collect();
    let stable = !samples.is_empty()
        && samples.iter().all(|s| s.dimension == samples[0].dimension && s.gap >= cfg.min_gap);
    let dimension = stable.then(|| samples[0].dimension);
    let classification = match dimension {
        None => ClassKind::Undetermined,
        Some(d) if d == m => ClassKind::OpenClass,
        Some(_) => ClassKind::ProperSubmanifold,
    };
    let foliation = if classification == ClassKind::ProperSubmanifold && !s0.kernel_param.is_empty() && r > 0 {
        Some(foliation_check(dist, &paths, &s0, cfg))
    } else {
        None
    };
    Ok(ReachabilityReport {
        base: u.iter().copied().collect(),
        class_points: paths.iter().map(|p| p.end_param().iter().copied().collect()).collect(),
        max_horizontality: paths.iter().map(|p| p.horizontality).fold(0.0, f64::max),
        truncated_paths: paths.iter().filter(|p| p.truncated).count(),
        paths: paths.iter().map(|p| p.to_path()).collect(),
        dimension,
        samples,
        classification,
        foliation,
    })
}

// Point pushed along the (aligned) first nullity vector at `x`.
fn displaced<D: Distribution + ?Sized>(dist: &D, x: &DVector<f64>, reference: &DVector<f64>, offset: f64) -> Result<(DVector<f64>, DVector<f64>)> {
    let imm = dist.immersion();
    let s = checked_split(dist, x, None)?;
    let (_, k) = align_basis(imm, &s.kernel_param[..1], &s.kernel_ambient[..1], std::slice::from_ref(reference))?;
    let y = imm.space.geodesic_unchecked(&imm.point(x)?, &k[0], offset);
    Ok((y, k[0].clone()))
}

fn foliation_check<D: Distribution + ?Sized>(dist: &D, paths: &[ControlPath], s0: &Split, cfg: &ProbeConfig) -> FoliationCheck {
    let imm = dist.immersion();
    let opts = ProjectionOptions::default();
    let results: Vec<Vec<Option<(f64, f64)>>> = paths
        .par_iter()
        .take(cfg.foliation_paths)
        .map(|path| {
            let mut xi = s0.kernel_ambient[0].clone();
            let mut seed = &path.params[0] + &s0.kernel_param[0] * cfg.foliation_offset;
            let mut out = Vec::new();
            for (k, u) in path.params.iter().enumerate() {
                let step = (|| -> Result<Option<(f64, f64)>> {
                    let (y, n) = displaced(dist, u, &xi, cfg.foliation_offset)?;
                    xi = n;
                    if k % cfg.foliation_stride.max(1) != 0 {
                        return Ok(None);
                    }
                    let proj = project(imm, &y, &seed, &opts)?;
                    seed = proj.param.clone();
                    // tangent of the displaced curve by differentiating along u'
                    let shape = ShapeData::at(imm, u)?;
                    let du = shape.tangent_coords(&path.velocities[k]);
                    let speed = du.norm();
                    if speed < 1e-8 {
                        return Ok(Some((proj.distance, 0.0)));
                    }
                    let d = 1e-5 / speed;
                    let (yp, _) = displaced(dist, &(u + &du * d), &xi, cfg.foliation_offset)?;
                    let (ym, _) = displaced(dist, &(u - &du * d), &xi, cfg.foliation_offset)?;
                    let dy = (yp - ym) / (2.0 * d);
                    let s = checked_split(dist, &proj.param, None)?;
                    let comp = s.kernel_component(&dy, imm) / imm.space.norm(&dy).max(1e-300);
                    Ok(Some((proj.distance, comp)))
                })();
                match step {
                    Ok(Some(v)) => out.push(Some(v)),
                    Ok(None) => {}
                    Err(_) => out.push(None),
                }
            }
            out
        })
        .collect();
    let mut check = FoliationCheck {
        offset: cfg.foliation_offset,
        checked_points: 0,
        off_manifold: 0.0,
        kernel_component: 0.0,
        failures: 0,
        pass: false,
    };
    for r in results.into_iter().flatten() {
        match r {
            Some((d, c)) => {
                check.checked_points += 1;
                check.off_manifold = check.off_manifold.max(d);
                check.kernel_component = check.kernel_component.max(c);
            }
            None => check.failures += 1,
        }
    }
    check.pass = check.failures == 0
        && check.checked_points > 0
        && check.off_manifold < cfg.foliation_tol
        && check.kernel_component < cfg.foliation_tol;
    check
}
