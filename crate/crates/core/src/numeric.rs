//! Quadrature, log-space helpers, compensated sums and bracketing roots.

use crate::error::{Error, Result};

pub fn ln_gamma(x: f64) -> f64 {
    statrs::function::gamma::ln_gamma(x)
}

/// Gauss-Legendre nodes and weights on [-1, 1], via Newton on P_n.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "need at least one node");
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (p, dp) = legendre_with_derivative(n, z);
            let dz = p / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        let (_, dp) = legendre_with_derivative(n, z);
        x[i] = -z;
        x[n - 1 - i] = z;
        let wi = 2.0 / ((1.0 - z * z) * dp * dp);
        w[i] = wi;
        w[n - 1 - i] = wi;
    }
    if n % 2 == 1 {
        x[n / 2] = 0.0;
    }
    (x, w)
}

fn legendre_with_derivative(n: usize, z: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, 0.0);
    for j in 0..n {
        let p2 = p1;
        p1 = p0;
        p0 = ((2 * j + 1) as f64 * z * p1 - j as f64 * p2) / (j + 1) as f64;
    }
    (p0, n as f64 * (z * p0 - p1) / (z * z - 1.0))
}

/// Nodes and weights mapped to [a, b].
pub fn gl_nodes(a: f64, b: f64, n: usize) -> Vec<(f64, f64)> {
    let (x, w) = gauss_legendre(n);
    let h = 0.5 * (b - a);
    let c = 0.5 * (a + b);
    x.iter().zip(&w).map(|(&xi, &wi)| (c + h * xi, h * wi)).collect()
}

pub fn gl_integrate(f: impl FnMut(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let mut f = f;
    let mut s = Neumaier::default();
    for (x, w) in gl_nodes(a, b, n) {
        s.add(w * f(x));
    }
    s.value()
}

/// Composite Gauss-Legendre over [0, inf) using q = t/(1-t).
pub fn half_line_nodes(panels: usize, per_panel: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(panels * per_panel);
    for p in 0..panels {
        let a = p as f64 / panels as f64;
        let b = (p + 1) as f64 / panels as f64;
        for (t, w) in gl_nodes(a, b, per_panel) {
            let q = t / (1.0 - t);
            out.push((q, w / ((1.0 - t) * (1.0 - t))));
        }
    }
    out
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Neumaier compensated summation.
#[derive(Clone, Copy, Debug, Default)]
pub struct Neumaier {
    sum: f64,
    comp: f64,
}

impl Neumaier {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn merge(&mut self, other: &Neumaier) {
        self.add(other.sum);
        self.add(other.comp);
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Bisection for a sign change of `f` on [lo, hi] to absolute tolerance `tol`.
pub fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> Result<f64> {
    let mut flo = f(lo);
    let fhi = f(hi);
    if flo == 0.0 {
        return Ok(lo);
    }
    if fhi == 0.0 {
        return Ok(hi);
    }
    if flo.signum() == fhi.signum() {
        return Err(Error::NoSignChange(format!("f({lo}) = {flo}, f({hi}) = {fhi}")));
    }
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        let fm = f(mid);
        if fm == 0.0 {
            return Ok(mid);
        }
        if fm.signum() == flo.signum() {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}
