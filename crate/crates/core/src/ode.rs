//! Fixed-step classical Runge–Kutta integration.

use nalgebra::DVector;

/// One RK4 step of `y' = f(t, y)`.
pub fn rk4_step<F>(f: &mut F, t: f64, y: &DVector<f64>, h: f64) -> DVector<f64>
where
    F: FnMut(f64, &DVector<f64>) -> DVector<f64>,
{
    let k1 = f(t, y);
    let k2 = f(t + 0.5 * h, &(y + &k1 * (0.5 * h)));
    let k3 = f(t + 0.5 * h, &(y + &k2 * (0.5 * h)));
    let k4 = f(t + h, &(y + &k3 * h));
    y + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

/// Integrate over `[t0, t1]` with `n` equal steps; returns the `n + 1` nodes.
pub fn rk4<F>(mut f: F, y0: &DVector<f64>, t0: f64, t1: f64, n: usize) -> Vec<(f64, DVector<f64>)>
where
    F: FnMut(f64, &DVector<f64>) -> DVector<f64>,
{
    let h = (t1 - t0) / n as f64;
    let mut out = Vec::with_capacity(n + 1);
    let mut y = y0.clone();
    out.push((t0, y.clone()));
    for k in 0..n {
        let t = t0 + k as f64 * h;
        y = rk4_step(&mut f, t, &y, h);
        out.push((t0 + (k + 1) as f64 * h, y.clone()));
    }
    out
}

/// Fourth-order finite-difference derivatives of equally spaced samples
/// (one-sided stencils at the ends).
pub fn sample_derivative(ys: &[DVector<f64>], h: f64) -> Vec<DVector<f64>> {
    let n = ys.len();
    assert!(n >= 5, "need at least five samples");
    (0..n)
        .map(|i| {
            let c: [f64; 5];
            let s: usize;
            if i < 2 {
                s = 0;
                c = if i == 0 {
                    [-25.0, 48.0, -36.0, 16.0, -3.0]
                } else {
                    [-3.0, -10.0, 18.0, -6.0, 1.0]
                };
            } else if i + 2 >= n {
                s = n - 5;
                c = if i == n - 1 {
                    [3.0, -16.0, 36.0, -48.0, 25.0]
                } else {
                    [-1.0, 6.0, -18.0, 10.0, 3.0]
                };
            } else {
                s = i - 2;
                c = [1.0, -8.0, 0.0, 8.0, -1.0];
            }
            let mut d = DVector::zeros(ys[0].len());
            for (j, w) in c.iter().enumerate() {
                d.axpy(*w, &ys[s + j], 1.0);
            }
            d / (12.0 * h)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rk4_is_fourth_order_on_exponential() {
        let err = |n: usize| {
            let out = rk4(|_, y| y.clone(), &DVector::from_element(1, 1.0), 0.0, 1.0, n);
            (out.last().unwrap().1[0] - 1f64.exp()).abs()
        };
        let ratio = err(20) / err(40);
        assert!((ratio.log2() - 4.0).abs() < 0.2, "ratio {ratio}");
    }

    #[test]
    fn sample_derivative_of_cubic_is_exact() {
        let h = 0.1;
        let ys: Vec<_> = (0..9)
            .map(|i| {
                let t = i as f64 * h;
                DVector::from_element(1, t * t * t - t)
            })
            .collect();
        let d = sample_derivative(&ys, h);
        for (i, v) in d.iter().enumerate() {
            let t = i as f64 * h;
            assert!((v[0] - (3.0 * t * t - 1.0)).abs() < 1e-12);
        }
    }
}
