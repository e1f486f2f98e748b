//! Parametrized immersions `f: U ⊂ R^m -> Q` with second-order jets.
//!
//! Entries either carry closed-form derivatives or are differentiated
//! numerically with fourth-order central differences.

use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Matrix3, Matrix4, Vector4};
use serde::{Deserialize, Serialize};

use crate::ambient::{SpaceForm, SpaceKind};
use crate::error::{Error, Result};
use crate::expr::Expr;

/// Relative singular-value threshold for the immersion (rank) test.
const RANK_TOL: f64 = 1e-10;

/// Point of `M` together with first and second partial derivatives of `f`.
#[derive(Debug, Clone)]
pub struct ImmersionJet {
    pub param: DVector<f64>,
    pub point: DVector<f64>,
    /// `embed_dim x m`, column `i` is `∂_i f`.
    pub first: DMatrix<f64>,
    /// Row-major `m x m` block of ambient vectors `∂_i ∂_j f`.
    pub second: Vec<DVector<f64>>,
    /// Richardson half-step estimate for numerically differentiated jets.
    pub truncation_error: Option<f64>,
}

impl ImmersionJet {
    pub fn param_dim(&self) -> usize {
        self.first.ncols()
    }

    pub fn second(&self, i: usize, j: usize) -> &DVector<f64> {
        &self.second[i * self.param_dim() + j]
    }

    pub fn tangent(&self, i: usize) -> DVector<f64> {
        self.first.column(i).into_owned()
    }

    /// Ambient image `df(x)` of a parameter-space vector.
    pub fn push_forward(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.first * x
    }
}

/// Axis-aligned box; bounds may be infinite for domains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl ParamBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Self {
        assert_eq!(lower.len(), upper.len());
        Self { lower, upper }
    }

    pub fn unbounded(m: usize) -> Self {
        Self::new(vec![f64::NEG_INFINITY; m], vec![f64::INFINITY; m])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, u: &DVector<f64>) -> bool {
        self.contains_slack(u, 0.0)
    }

    pub fn contains_slack(&self, u: &DVector<f64>, slack: f64) -> bool {
        u.len() == self.dim()
            && (0..self.dim()).all(|i| u[i] >= self.lower[i] - slack && u[i] <= self.upper[i] + slack)
    }

    /// Strict interior test, used for open domains.
    pub fn contains_open(&self, u: &DVector<f64>) -> bool {
        u.len() == self.dim() && (0..self.dim()).all(|i| u[i] > self.lower[i] && u[i] < self.upper[i])
    }

    /// Uniform grid with `n` points per axis (inclusive of the bounds).
    pub fn grid(&self, n: usize) -> Vec<DVector<f64>> {
        let m = self.dim();
        let axis = |i: usize, k: usize| {
            if n == 1 {
                0.5 * (self.lower[i] + self.upper[i])
            } else {
                self.lower[i] + (self.upper[i] - self.lower[i]) * k as f64 / (n - 1) as f64
            }
        };
        let total = n.pow(m as u32);
        (0..total)
            .map(|mut idx| {
                let mut u = DVector::zeros(m);
                // last axis varies fastest
                for i in (0..m).rev() {
                    u[i] = axis(i, idx % n);
                    idx /= n;
                }
                u
            })
            .collect()
    }
}

type ValueFn = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
type JetFn = Arc<dyn Fn(&DVector<f64>) -> (DVector<f64>, DMatrix<f64>, Vec<DVector<f64>>) + Send + Sync>;
type NormalFn = Arc<dyn Fn(&DVector<f64>) -> Vec<DVector<f64>> + Send + Sync>;

#[derive(Clone)]
enum JetSource {
    Analytic { value: ValueFn, jet: JetFn },
    Numeric(ValueFn),
}

/// A parametrized immersion into a space form.
#[derive(Clone)]
pub struct ChartedImmersion {
    pub name: String,
    pub space: SpaceForm,
    pub param_dim: usize,
    /// Open parameter domain (bounds may be infinite).
    pub domain: ParamBox,
    /// Closed box on which jets may be evaluated.
    pub eval_box: ParamBox,
    /// Period of each parameter, when `f` is periodic in it.
    pub periods: Vec<Option<f64>>,
    /// Set when the immersed manifold is known to be incomplete.
    pub incomplete: bool,
    source: JetSource,
    normal_frame: Option<NormalFn>,
}

impl std::fmt::Debug for ChartedImmersion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ChartedImmersion")
            .field("name", &self.name)
            .field("space", &self.space)
            .field("param_dim", &self.param_dim)
            .field("eval_box", &self.eval_box)
            .field("analytic_jet", &self.analytic_jet())
            .finish()
    }
}

impl ChartedImmersion {
    /// Immersion with closed-form derivatives. `jet` returns
    /// `(f, ∂f, ∂²f)` with `∂²f` row-major.
    pub fn analytic<V, J>(name: &str, space: SpaceForm, domain: ParamBox, eval_box: ParamBox, value: V, jet: J) -> Self
    where
        V: Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        J: Fn(&DVector<f64>) -> (DVector<f64>, DMatrix<f64>, Vec<DVector<f64>>) + Send + Sync + 'static,
    {
        let m = eval_box.dim();
        Self {
            name: name.to_string(),
            space,
            param_dim: m,
            domain,
            eval_box,
            periods: vec![None; m],
            incomplete: false,
            source: JetSource::Analytic {
                value: Arc::new(value),
                jet: Arc::new(jet),
            },
            normal_frame: None,
        }
    }

    /// Immersion differentiated numerically.
    pub fn numeric<V>(name: &str, space: SpaceForm, domain: ParamBox, eval_box: ParamBox, value: V) -> Self
    where
        V: Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    {
        let m = eval_box.dim();
        Self {
            name: name.to_string(),
            space,
            param_dim: m,
            domain,
            eval_box,
            periods: vec![None; m],
            incomplete: false,
            source: JetSource::Numeric(Arc::new(value)),
            normal_frame: None,
        }
    }

    pub fn with_periods(mut self, periods: Vec<Option<f64>>) -> Self {
        assert_eq!(periods.len(), self.param_dim);
        self.periods = periods;
        self
    }

    pub fn with_incomplete(mut self, incomplete: bool) -> Self {
        self.incomplete = incomplete;
        self
    }

    /// Attach a closed-form smooth orthonormal normal frame.
    pub fn with_normal_frame<N>(mut self, frame: N) -> Self
    where
        N: Fn(&DVector<f64>) -> Vec<DVector<f64>> + Send + Sync + 'static,
    {
        self.normal_frame = Some(Arc::new(frame));
        self
    }

    pub fn analytic_jet(&self) -> bool {
        matches!(self.source, JetSource::Analytic { .. })
    }

    pub fn codimension(&self) -> usize {
        self.space.dim - self.param_dim
    }

    pub fn has_closed_form_normals(&self) -> bool {
        self.normal_frame.is_some()
    }

    /// Closed-form normal frame at `u`, when the entry provides one.
    pub fn closed_form_normals(&self, u: &DVector<f64>) -> Option<Vec<DVector<f64>>> {
        self.normal_frame.as_ref().map(|n| n(u))
    }

    /// `f(u)`, without derivatives. Only the domain is checked.
    pub fn point(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        if !self.domain.contains_open(u) {
            return Err(Error::OutsideBox {
                param: u.iter().copied().collect(),
            });
        }
        Ok(self.value_unchecked(u))
    }

    pub(crate) fn value_unchecked(&self, u: &DVector<f64>) -> DVector<f64> {
        match &self.source {
            JetSource::Analytic { value, .. } => value(u),
            JetSource::Numeric(value) => value(u),
        }
    }

    /// Second-order jet at `u`.
    pub fn jet2(&self, u: &DVector<f64>) -> Result<ImmersionJet> {
        self.jet2_with(u, true)
    }

    /// Jet without the Richardson estimate for numerically differentiated
    /// entries (half the evaluations).
    pub fn jet2_fast(&self, u: &DVector<f64>) -> Result<ImmersionJet> {
        self.jet2_with(u, false)
    }

    fn jet2_with(&self, u: &DVector<f64>, estimate: bool) -> Result<ImmersionJet> {
        if u.len() != self.param_dim {
            return Err(Error::DimensionMismatch {
                expected: self.param_dim,
                got: u.len(),
            });
        }
        if !self.eval_box.contains_slack(u, 1e-12) || !self.domain.contains_open(u) {
            return Err(Error::OutsideBox {
                param: u.iter().copied().collect(),
            });
        }
        let jet = match &self.source {
            JetSource::Analytic { jet, .. } => {
                let (point, first, second) = jet(u);
                ImmersionJet {
                    param: u.clone(),
                    point,
                    first,
                    second,
                    truncation_error: None,
                }
            }
            JetSource::Numeric(value) => numeric_jet(value.as_ref(), u, estimate),
        };
        let sv = jet.first.singular_values();
        let smax = sv.max();
        let rank = sv.iter().filter(|&&s| s > RANK_TOL * smax.max(1e-300)).count();
        if smax == 0.0 || rank < self.param_dim {
            return Err(Error::NotImmersive {
                param: u.iter().copied().collect(),
                rank: if smax == 0.0 { 0 } else { rank },
                expected: self.param_dim,
            });
        }
        Ok(jet)
    }

    /// First derivatives by finite differences, regardless of the jet source.
    /// Used to cross-check closed-form jets.
    pub fn numeric_first(&self, u: &DVector<f64>) -> DMatrix<f64> {
        let f = |x: &DVector<f64>| self.value_unchecked(x);
        numeric_jet(&f, u, false).first
    }

    /// Check the model constraint and tangency to the position vector.
    pub fn check_on_model(&self, jet: &ImmersionJet, tol: f64) -> Result<()> {
        self.space.check_point(&jet.point, tol)?;
        if self.space.is_curved() {
            for i in 0..self.param_dim {
                let d = self.space.inner(&jet.point, &jet.tangent(i)).abs();
                if d > tol {
                    return Err(Error::NotTangent { defect: d });
                }
            }
        }
        Ok(())
    }
}

const FD_WEIGHTS: [(f64, f64); 4] = [(-2.0, 1.0), (-1.0, -8.0), (1.0, 8.0), (2.0, -1.0)];

fn first_step(x: f64) -> f64 {
    (1e-4 * x.abs()).max(1e-4)
}

// Second derivatives divide by h^2; a wider stencil keeps rounding near 1e-10.
fn second_step(x: f64) -> f64 {
    (1e-3 * x.abs()).max(1e-3)
}

fn numeric_derivs<F>(f: &F, u: &DVector<f64>, scale: f64) -> (DVector<f64>, DMatrix<f64>, Vec<DVector<f64>>)
where
    F: Fn(&DVector<f64>) -> DVector<f64> + ?Sized,
{
    let m = u.len();
    let f0 = f(u);
    let n = f0.len();
    let shifted = |i: usize, a: f64, j: usize, b: f64| {
        let mut x = u.clone();
        x[i] += a;
        x[j] += b;
        f(&x)
    };
    let mut first = DMatrix::zeros(n, m);
    for i in 0..m {
        let h = first_step(u[i]) * scale;
        let mut d = DVector::zeros(n);
        for (a, w) in FD_WEIGHTS {
            d.axpy(w, &shifted(i, a * h, i, 0.0), 1.0);
        }
        first.set_column(i, &(d / (12.0 * h)));
    }
    let mut second = vec![DVector::zeros(n); m * m];
    for i in 0..m {
        let h = second_step(u[i]) * scale;
        let mut d = f0.clone() * -30.0;
        for (a, w) in [(-2.0, -1.0), (-1.0, 16.0), (1.0, 16.0), (2.0, -1.0)] {
            d.axpy(w, &shifted(i, a * h, i, 0.0), 1.0);
        }
        second[i * m + i] = d / (12.0 * h * h);
        for j in (i + 1)..m {
            let hj = second_step(u[j]) * scale;
            let mut d = DVector::zeros(n);
            for (a, wa) in FD_WEIGHTS {
                for (b, wb) in FD_WEIGHTS {
                    d.axpy(wa * wb, &shifted(i, a * h, j, b * hj), 1.0);
                }
            }
            let v = d / (144.0 * h * hj);
            second[i * m + j] = v.clone();
            second[j * m + i] = v;
        }
    }
    (f0, first, second)
}

fn numeric_jet<F>(f: &F, u: &DVector<f64>, estimate: bool) -> ImmersionJet
where
    F: Fn(&DVector<f64>) -> DVector<f64> + ?Sized,
{
    let (point, first, second) = numeric_derivs(f, u, 1.0);
    let truncation_error = if estimate {
        let (_, f2, s2) = numeric_derivs(f, u, 0.5);
        let mut err: f64 = (&first - &f2).amax();
        for (a, b) in second.iter().zip(s2.iter()) {
            err = err.max((a - b).amax());
        }
        Some(err)
    } else {
        None
    };
    ImmersionJet {
        param: u.clone(),
        point,
        first,
        second,
        truncation_error,
    }
}

/// The nilpotent element of `so_1(4)` used for the hyperbolic counterexample.
#[derive(Debug, Clone, PartialEq)]
pub struct NilpotentKilling {
    pub a: Matrix4<f64>,
    pub b: Matrix3<f64>,
    pub v: [f64; 3],
    pub w: [f64; 3],
    pub c: f64,
}

/// Lorentz metric `diag(1,1,1,-1)`.
pub fn lorentz_eta() -> Matrix4<f64> {
    Matrix4::from_diagonal(&Vector4::new(1.0, 1.0, 1.0, -1.0))
}

impl NilpotentKilling {
    /// `e^{tA} = I + tA + t²/2 A²`, exact because `A³ = 0`.
    pub fn flow(&self, t: f64) -> Matrix4<f64> {
        Matrix4::identity() + self.a * t + self.a * self.a * (0.5 * t * t)
    }

    /// `d/dt e^{tA} = A + tA²`.
    pub fn flow_derivative(&self, t: f64) -> Matrix4<f64> {
        self.a + self.a * self.a * t
    }

    /// Defect of `Aᵀη + ηA = 0`.
    pub fn lorentz_skew_defect(&self) -> f64 {
        let eta = lorentz_eta();
        (self.a.transpose() * eta + eta * self.a).amax()
    }

    pub fn cube_defect(&self) -> f64 {
        (self.a * self.a * self.a).amax()
    }
}

/// Build `A = [[B, w], [wᵀ, 0]]` with `B = c [v]_×` and verify `A³ = 0`.
pub fn make_h3_matrix(v: [f64; 3], w: [f64; 3], c: f64) -> Result<NilpotentKilling> {
    let vv = nalgebra::Vector3::from(v);
    let ww = nalgebra::Vector3::from(w);
    for x in [&vv, &ww] {
        let n2 = x.norm_squared();
        if (n2 - 1.0).abs() > 1e-12 {
            return Err(Error::NotUnit { norm_sq: n2 });
        }
    }
    let d = vv.dot(&ww).abs();
    if d > 1e-12 {
        return Err(Error::NotTangent { defect: d });
    }
    if c == 0.0 {
        return Err(Error::Config("scale c must be nonzero".into()));
    }
    let b = vv.cross_matrix() * c;
    let mut a = Matrix4::zeros();
    a.fixed_view_mut::<3, 3>(0, 0).copy_from(&b);
    for i in 0..3 {
        a[(i, 3)] = w[i];
        a[(3, i)] = w[i];
    }
    let k = NilpotentKilling { a, b, v, w, c };
    let max_entry = k.cube_defect();
    if max_entry >= 1e-12 {
        return Err(Error::NotNilpotent { max_entry });
    }
    Ok(k)
}

fn v4(x: Vector4<f64>) -> DVector<f64> {
    DVector::from_column_slice(x.as_slice())
}

/// `f(t,s) = e^{tA}(sinh(s) v + cosh(s) e₄)` into `H³`.
pub fn make_h3_counterexample(k: &NilpotentKilling) -> ChartedImmersion {
    let v = Vector4::new(k.v[0], k.v[1], k.v[2], 0.0);
    let e4 = Vector4::new(0.0, 0.0, 0.0, 1.0);
    let kv = k.clone();
    let value = move |u: &DVector<f64>| {
        let (t, s) = (u[0], u[1]);
        v4(kv.flow(t) * (v * s.sinh() + e4 * s.cosh()))
    };
    let kj = k.clone();
    let jet = move |u: &DVector<f64>| {
        let (t, s) = (u[0], u[1]);
        let sig = v * s.sinh() + e4 * s.cosh();
        let dsig = v * s.cosh() + e4 * s.sinh();
        let phi = kj.flow(t);
        let dphi = kj.flow_derivative(t);
        let a2 = kj.a * kj.a;
        let point = v4(phi * sig);
        let first = DMatrix::from_columns(&[v4(dphi * sig), v4(phi * dsig)]);
        let ts = v4(dphi * dsig);
        let second = vec![v4(a2 * sig), ts.clone(), ts, v4(phi * sig)];
        (point, first, second)
    };
    ChartedImmersion::analytic(
        "h3_counterexample",
        SpaceForm::hyperbolic(3),
        ParamBox::unbounded(2),
        ParamBox::new(vec![-8.0, -4.0], vec![8.0, 4.0]),
        value,
        jet,
    )
}

fn dv(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

pub fn plane() -> ChartedImmersion {
    ChartedImmersion::analytic(
        "plane",
        SpaceForm::euclidean(3),
        ParamBox::unbounded(2),
        ParamBox::new(vec![-10.0, -10.0], vec![10.0, 10.0]),
        |u| dv(&[u[0], u[1], 0.0]),
        |u| {
            let first = DMatrix::from_column_slice(3, 2, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
            (dv(&[u[0], u[1], 0.0]), first, vec![DVector::zeros(3); 4])
        },
    )
    .with_normal_frame(|_| vec![dv(&[0.0, 0.0, 1.0])])
}

/// Unit cylinder `(cos θ, sin θ, z)` with parameters `(θ, z)`.
pub fn cylinder() -> ChartedImmersion {
    ChartedImmersion::analytic(
        "cylinder",
        SpaceForm::euclidean(3),
        ParamBox::unbounded(2),
        ParamBox::new(vec![-4.0 * PI, -20.0], vec![4.0 * PI, 20.0]),
        |u| dv(&[u[0].cos(), u[0].sin(), u[1]]),
        |u| {
            let (c, s) = (u[0].cos(), u[0].sin());
            let first = DMatrix::from_column_slice(3, 2, &[-s, c, 0.0, 0.0, 0.0, 1.0]);
            let z = DVector::zeros(3);
            (dv(&[c, s, u[1]]), first, vec![dv(&[-c, -s, 0.0]), z.clone(), z.clone(), z])
        },
    )
    .with_periods(vec![Some(2.0 * PI), None])
    .with_normal_frame(|u| vec![dv(&[u[0].cos(), u[0].sin(), 0.0])])
}

/// Right circular cone without its apex, parameters `(r, θ)` with `r`
/// the distance from the apex.
pub fn cone() -> ChartedImmersion {
    let k = std::f64::consts::FRAC_1_SQRT_2;
    ChartedImmersion::analytic(
        "cone",
        SpaceForm::euclidean(3),
        ParamBox::new(vec![0.0, f64::NEG_INFINITY], vec![f64::INFINITY, f64::INFINITY]),
        ParamBox::new(vec![1e-2, -4.0 * PI], vec![20.0, 4.0 * PI]),
        move |u| dv(&[k * u[0] * u[1].cos(), k * u[0] * u[1].sin(), k * u[0]]),
        move |u| {
            let (r, c, s) = (u[0], u[1].cos(), u[1].sin());
            let first = DMatrix::from_column_slice(3, 2, &[k * c, k * s, k, -k * r * s, k * r * c, 0.0]);
            let rt = dv(&[-k * s, k * c, 0.0]);
            let second = vec![DVector::zeros(3), rt.clone(), rt, dv(&[-k * r * c, -k * r * s, 0.0])];
            (dv(&[k * r * c, k * r * s, k * r]), first, second)
        },
    )
    .with_periods(vec![None, Some(2.0 * PI)])
    .with_incomplete(true)
    .with_normal_frame(move |u| vec![dv(&[k * u[1].cos(), k * u[1].sin(), -k])])
}

/// Unit sphere in `R³` with polar parameters `(θ, φ)`.
pub fn round_sphere() -> ChartedImmersion {
    let value = |u: &DVector<f64>| {
        let (st, ct, sp, cp) = (u[0].sin(), u[0].cos(), u[1].sin(), u[1].cos());
        dv(&[st * cp, st * sp, ct])
    };
    ChartedImmersion::analytic(
        "sphere",
        SpaceForm::euclidean(3),
        ParamBox::new(vec![0.0, f64::NEG_INFINITY], vec![PI, f64::INFINITY]),
        ParamBox::new(vec![0.05, -4.0 * PI], vec![PI - 0.05, 4.0 * PI]),
        value,
        move |u| {
            let (st, ct, sp, cp) = (u[0].sin(), u[0].cos(), u[1].sin(), u[1].cos());
            let p = dv(&[st * cp, st * sp, ct]);
            let first = DMatrix::from_columns(&[dv(&[ct * cp, ct * sp, -st]), dv(&[-st * sp, st * cp, 0.0])]);
            let tp = dv(&[-ct * sp, ct * cp, 0.0]);
            let second = vec![-p.clone(), tp.clone(), tp, dv(&[-st * cp, -st * sp, 0.0])];
            (p, first, second)
        },
    )
    .with_periods(vec![None, Some(2.0 * PI)])
    .with_normal_frame(move |u| vec![value(u)])
}

/// Totally geodesic `S²` inside `S³`.
pub fn great_sphere() -> ChartedImmersion {
    let s2 = round_sphere();
    let pad = |v: DVector<f64>| dv(&[v[0], v[1], v[2], 0.0]);
    let s2v = s2.clone();
    ChartedImmersion::analytic(
        "great_sphere",
        SpaceForm::sphere(3),
        s2.domain.clone(),
        s2.eval_box.clone(),
        move |u| pad(s2v.value_unchecked(u)),
        move |u| {
            let j = s2.jet2(u).expect("inside box");
            let first = DMatrix::from_columns(&(0..2).map(|i| pad(j.tangent(i))).collect::<Vec<_>>());
            (pad(j.point), first, j.second.into_iter().map(pad).collect())
        },
    )
    .with_periods(vec![None, Some(2.0 * PI)])
    .with_normal_frame(|_| vec![dv(&[0.0, 0.0, 0.0, 1.0])])
}

/// Circle of radius `r` in the `xy`-plane of `R³`.
pub fn circle(r: f64) -> ChartedImmersion {
    ChartedImmersion::analytic(
        "circle",
        SpaceForm::euclidean(3),
        ParamBox::unbounded(1),
        ParamBox::new(vec![-4.0 * PI], vec![4.0 * PI]),
        move |u| dv(&[r * u[0].cos(), r * u[0].sin(), 0.0]),
        move |u| {
            let (c, s) = (u[0].cos(), u[0].sin());
            (
                dv(&[r * c, r * s, 0.0]),
                DMatrix::from_column_slice(3, 1, &[-r * s, r * c, 0.0]),
                vec![dv(&[-r * c, -r * s, 0.0])],
            )
        },
    )
    .with_periods(vec![Some(2.0 * PI)])
    .with_normal_frame(|u| vec![dv(&[u[0].cos(), u[0].sin(), 0.0]), dv(&[0.0, 0.0, 1.0])])
}

/// Skew generator `R₁₂ + 2R₃₄` of the sphere-orbit surface and its flow.
fn orbit_flow(t: f64) -> Matrix4<f64> {
    let (c1, s1) = (t.cos(), t.sin());
    let (c2, s2) = ((2.0 * t).cos(), (2.0 * t).sin());
    Matrix4::new(
        c1, -s1, 0.0, 0.0, //
        s1, c1, 0.0, 0.0, //
        0.0, 0.0, c2, -s2, //
        0.0, 0.0, s2, c2,
    )
}

fn orbit_generator() -> Matrix4<f64> {
    Matrix4::new(
        0.0, -1.0, 0.0, 0.0, //
        1.0, 0.0, 0.0, 0.0, //
        0.0, 0.0, 0.0, -2.0, //
        0.0, 0.0, 2.0, 0.0,
    )
}

/// Surface `f(t,s) = e^{tA'} σ(s)` in `S³`, where `A' = R₁₂ + 2R₃₄` and
/// `σ` is the great circle tangent to the `A'`-orbit of `(e₁+e₃)/√2`.
///
/// The rulings are great circles; `s = 0, π` is the edge of regression, so
/// the chart covers `s ∈ (0, π)`. The flow is `2π`-periodic in `t`.
pub fn sphere_orbit() -> ChartedImmersion {
    let x0 = Vector4::new(1.0, 0.0, 1.0, 0.0) / 2f64.sqrt();
    let ax0 = orbit_generator() * x0;
    let u0 = ax0 / ax0.norm();
    let normal0 = Vector4::new(0.0, 2.0, 0.0, -1.0) / 5f64.sqrt();
    let sig = move |s: f64| x0 * s.cos() + u0 * s.sin();
    let dsig = move |s: f64| -x0 * s.sin() + u0 * s.cos();
    let value = move |u: &DVector<f64>| v4(orbit_flow(u[0]) * sig(u[1]));
    ChartedImmersion::analytic(
        "sphere_orbit",
        SpaceForm::sphere(3),
        ParamBox::new(vec![f64::NEG_INFINITY, 0.0], vec![f64::INFINITY, PI]),
        ParamBox::new(vec![-6.0 * PI, 0.2], vec![6.0 * PI, PI - 0.2]),
        value,
        move |u| {
            let (t, s) = (u[0], u[1]);
            let e = orbit_flow(t);
            let a = orbit_generator();
            let (sg, dsg) = (sig(s), dsig(s));
            let first = DMatrix::from_columns(&[v4(e * a * sg), v4(e * dsg)]);
            let ts = v4(e * a * dsg);
            let second = vec![v4(e * a * a * sg), ts.clone(), ts, v4(-(e * sg))];
            (v4(e * sg), first, second)
        },
    )
    .with_periods(vec![Some(2.0 * PI), None])
    .with_normal_frame(move |u| vec![v4(orbit_flow(u[0]) * normal0)])
}

/// Canonical counterexample, `v = e₁`, `w = e₂`, `c = 1`.
pub fn h3_counterexample() -> ChartedImmersion {
    let k = make_h3_matrix([1.0, 0.0, 0.0], [0.0, 1.0, 0.0], 1.0).expect("c = 1 is nilpotent");
    make_h3_counterexample(&k)
}

pub const CATALOG_NAMES: [&str; 8] = [
    "plane",
    "cylinder",
    "cone",
    "sphere",
    "great_sphere",
    "circle",
    "sphere_orbit",
    "h3_counterexample",
];

/// All built-in immersions.
pub fn catalog() -> Vec<ChartedImmersion> {
    CATALOG_NAMES.iter().map(|n| lookup(n).expect("catalog name")).collect()
}

pub fn lookup(name: &str) -> Result<ChartedImmersion> {
    Ok(match name {
        "plane" => plane(),
        "cylinder" => cylinder(),
        "cone" => cone(),
        "sphere" => round_sphere(),
        "great_sphere" => great_sphere(),
        "circle" => circle(2.0),
        "sphere_orbit" => sphere_orbit(),
        "h3_counterexample" => h3_counterexample(),
        _ => return Err(Error::UnknownManifold(name.to_string())),
    })
}

/// Declarative description of a user immersion.
///
/// ```toml
/// name = "saddle"
/// space = "euclidean"
/// dim = 3
/// params = ["u", "v"]
/// lower = [-1.0, -1.0]
/// upper = [1.0, 1.0]
/// components = ["u", "v", "u*u - v*v"]
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImmersionSpec {
    pub name: String,
    pub space: SpaceKind,
    /// Intrinsic dimension of the space form.
    pub dim: usize,
    pub params: Vec<String>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub components: Vec<String>,
    #[serde(default)]
    pub periods: Option<Vec<f64>>,
}

impl ImmersionSpec {
    pub fn build(&self) -> Result<ChartedImmersion> {
        let space = SpaceForm {
            kind: self.space,
            dim: self.dim,
        };
        if self.components.len() != space.embed_dim() {
            return Err(Error::DimensionMismatch {
                expected: space.embed_dim(),
                got: self.components.len(),
            });
        }
        let m = self.params.len();
        if self.lower.len() != m || self.upper.len() != m {
            return Err(Error::Config("box bounds must match the parameter count".into()));
        }
        let exprs = self
            .components
            .iter()
            .map(|c| Expr::parse(c, &self.params))
            .collect::<Result<Vec<_>>>()?;
        let value = move |u: &DVector<f64>| {
            let vars = u.as_slice();
            DVector::from_iterator(exprs.len(), exprs.iter().map(|e| e.eval(vars)))
        };
        let mut imm = ChartedImmersion::numeric(
            &self.name,
            space,
            ParamBox::unbounded(m),
            ParamBox::new(self.lower.clone(), self.upper.clone()),
            value,
        );
        if let Some(p) = &self.periods {
            if p.len() != m {
                return Err(Error::Config("periods must match the parameter count".into()));
            }
            imm = imm.with_periods(p.iter().map(|&x| if x > 0.0 { Some(x) } else { None }).collect());
        }
        // the model constraint is part of the contract for curved targets
        if space.is_curved() {
            for u in imm.eval_box.grid(3) {
                let jet = imm.jet2_fast(&u)?;
                imm.check_on_model(&jet, 1e-8)?;
            }
        }
        Ok(imm)
    }
}

/// Load a user immersion from a TOML file.
pub fn load_immersion_file(path: &Path) -> Result<ChartedImmersion> {
    let text = std::fs::read_to_string(path)?;
    let spec: ImmersionSpec = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
    spec.build()
}
