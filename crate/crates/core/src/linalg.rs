//! Small dense linear-algebra helpers shared by the geometry modules.

use nalgebra::{DMatrix, DVector};

/// Metric-weighted Gram–Schmidt. Returns the vectors that survive with norm
/// above `tol` after orthogonalization against `against` and each other.
///
/// `inner` must be positive on the span being orthonormalized.
pub fn gram_schmidt<F>(
    candidates: &[DVector<f64>],
    against: &[DVector<f64>],
    inner: F,
    tol: f64,
    want: usize,
) -> Vec<DVector<f64>>
where
    F: Fn(&DVector<f64>, &DVector<f64>) -> f64,
{
    let mut out: Vec<DVector<f64>> = Vec::with_capacity(want);
    for c in candidates {
        if out.len() == want {
            break;
        }
        let mut v = c.clone();
        // two passes for stability
        for _ in 0..2 {
            for b in against.iter().chain(out.iter()) {
                let bb = inner(b, b);
                let coef = inner(&v, b) / bb;
                v.axpy(-coef, b, 1.0);
            }
        }
        let n2 = inner(&v, &v);
        if n2 > tol * tol {
            out.push(v / n2.sqrt());
        }
    }
    out
}

/// Columns of `m` as vectors.
pub fn columns(m: &DMatrix<f64>) -> Vec<DVector<f64>> {
    (0..m.ncols()).map(|j| m.column(j).into_owned()).collect()
}

pub fn from_columns(cols: &[DVector<f64>], nrows: usize) -> DMatrix<f64> {
    if cols.is_empty() {
        return DMatrix::zeros(nrows, 0);
    }
    DMatrix::from_columns(cols)
}

/// Largest distance from a unit vector of span(`a`) to span(`b`), with both
/// families assumed orthonormal for the Euclidean inner product.
/// Zero when `a` is contained in `b`.
pub fn containment_defect(a: &[DVector<f64>], b: &[DVector<f64>]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    let n = a[0].len();
    let am = from_columns(a, n);
    let bm = from_columns(b, n);
    let resid = &am - &bm * (bm.transpose() * &am);
    if resid.ncols() == 0 {
        return 0.0;
    }
    resid.singular_values().max()
}

/// Euclidean orthonormal basis of the column span, dropping directions whose
/// singular value is below `rel_tol * sigma_max`.
pub fn orthonormal_span(vectors: &[DVector<f64>], rel_tol: f64) -> Vec<DVector<f64>> {
    if vectors.is_empty() {
        return Vec::new();
    }
    let n = vectors[0].len();
    let m = from_columns(vectors, n);
    let svd = m.svd(true, false);
    let u = svd.u.expect("u requested");
    let smax = svd.singular_values.max();
    if smax == 0.0 {
        return Vec::new();
    }
    (0..svd.singular_values.len())
        .filter(|&i| svd.singular_values[i] > rel_tol * smax)
        .map(|i| u.column(i).into_owned())
        .collect()
}

/// Least-squares slope of `log(y)` against `log(x)`.
pub fn fitted_order(h: &[f64], r: &[f64]) -> f64 {
    let n = h.len() as f64;
    let lx: Vec<f64> = h.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = r.iter().map(|v| v.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for i in 0..h.len() {
        sxy += (lx[i] - mx) * (ly[i] - my);
        sxx += (lx[i] - mx) * (lx[i] - mx);
    }
    sxy / sxx
}

/// Principal-component spread of a point cloud.
#[derive(Debug, Clone)]
pub struct Pca {
    pub center: DVector<f64>,
    /// Singular values of the centred cloud, descending.
    pub singular_values: Vec<f64>,
    /// Principal directions (Euclidean orthonormal), same order.
    pub directions: Vec<DVector<f64>>,
}

impl Pca {
    pub fn fit(points: &[DVector<f64>]) -> Option<Pca> {
        if points.is_empty() {
            return None;
        }
        let n = points[0].len();
        let mut center = DVector::zeros(n);
        for p in points {
            center += p;
        }
        center /= points.len() as f64;
        let mut m = DMatrix::zeros(n, points.len());
        for (j, p) in points.iter().enumerate() {
            m.set_column(j, &(p - &center));
        }
        let svd = m.svd(true, false);
        let u = svd.u.expect("u requested");
        let mut idx: Vec<usize> = (0..svd.singular_values.len()).collect();
        idx.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        let mut singular_values: Vec<f64> = idx.iter().map(|&i| svd.singular_values[i]).collect();
        let mut directions: Vec<DVector<f64>> = idx.iter().map(|&i| u.column(i).into_owned()).collect();
        // pad when there are fewer points than dimensions
        while singular_values.len() < n {
            singular_values.push(0.0);
            let extra = gram_schmidt(
                &(0..n)
                    .map(|i| {
                        let mut e = DVector::zeros(n);
                        e[i] = 1.0;
                        e
                    })
                    .collect::<Vec<_>>(),
                &directions,
                |a, b| a.dot(b),
                1e-8,
                1,
            );
            directions.extend(extra);
        }
        Some(Pca {
            center,
            singular_values,
            directions,
        })
    }

    /// Number of components whose singular value exceeds `ratio * sigma_max`,
    /// together with the ratio across the cut (retained / discarded).
    pub fn dimension(&self, ratio: f64) -> (usize, f64) {
        let smax = self.singular_values.first().copied().unwrap_or(0.0);
        if smax <= 0.0 {
            return (0, f64::INFINITY);
        }
        let d = self
            .singular_values
            .iter()
            .take_while(|&&s| s > ratio * smax)
            .count();
        let lo = self.singular_values[d - 1];
        let hi = self.singular_values.get(d).copied().unwrap_or(0.0);
        let gap = if hi > 0.0 { lo / hi } else { f64::INFINITY };
        (d, gap)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gram_schmidt_skips_dependent() {
        let c = vec![
            DVector::from_vec(vec![1.0, 0.0, 0.0]),
            DVector::from_vec(vec![2.0, 0.0, 0.0]),
            DVector::from_vec(vec![1.0, 1.0, 0.0]),
        ];
        let out = gram_schmidt(&c, &[], |a, b| a.dot(b), 1e-10, 3);
        assert_eq!(out.len(), 2);
        assert!(out[0].dot(&out[1]).abs() < 1e-15);
    }

    #[test]
    fn order_fit_recovers_slope() {
        let h = [1e-2, 5e-3, 2.5e-3];
        let r: Vec<f64> = h.iter().map(|x| 3.0 * x * x).collect();
        assert!((fitted_order(&h, &r) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn pca_of_segment_is_one_dimensional() {
        let pts: Vec<_> = (0..20)
            .map(|i| DVector::from_vec(vec![i as f64 * 0.1, 2.0 * i as f64 * 0.1, 1.0]))
            .collect();
        let pca = Pca::fit(&pts).unwrap();
        assert_eq!(pca.dimension(1e-6).0, 1);
    }

    #[test]
    fn containment() {
        let e1 = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        let e2 = DVector::from_vec(vec![0.0, 1.0, 0.0]);
        assert!(containment_defect(&[e1.clone()], &[e1.clone(), e2.clone()]) < 1e-15);
        assert!((containment_defect(&[e1], &[e2]) - 1.0).abs() < 1e-15);
    }
}
