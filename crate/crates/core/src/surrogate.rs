//! The random function
//!
//! `h(w) = Σ X_{i_1…i_H} w_{i_1}⋯w_{i_H} + Σ_ℓ ρ_ℓ N^{−ℓ/2} (Σ_i w_i)^{H−ℓ}`
//!
//! on the unit sphere, its derivatives, and the conditional Hessian law.

use crate::error::{domain, invalid, Error, Result};
use crate::mc::{map_chunks, Moments};
use crate::rmt::sample_goe;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub const DEFAULT_CAP: u128 = 10_000_000;
const UNIT_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurrogateSpec {
    pub h: usize,
    pub n: usize,
    /// ρ_1..ρ_H before the `N^{−ℓ/2}` scaling.
    pub rho: Vec<f64>,
}

impl SurrogateSpec {
    pub fn new(h: usize, n: usize, rho: Vec<f64>) -> Result<Self> {
        if h < 2 {
            return Err(invalid("H must be at least 2"));
        }
        if n < 2 {
            return Err(invalid("N must be at least 2"));
        }
        if rho.len() != h {
            return Err(invalid(format!("need {h} rho values, got {}", rho.len())));
        }
        if rho.iter().any(|r| !r.is_finite()) {
            return Err(invalid("rho values must be finite"));
        }
        Ok(SurrogateSpec { h, n, rho })
    }

    /// Pure spin glass: every ρ_ℓ = 0.
    pub fn pure(h: usize, n: usize) -> Result<Self> {
        SurrogateSpec::new(h, n, vec![0.0; h])
    }

    pub fn is_pure(&self) -> bool {
        self.rho.iter().all(|&r| r == 0.0)
    }

    /// `ρ_ℓ^{(N)} = ρ_ℓ N^{−ℓ/2}` for 1-based `l`.
    pub fn rho_n(&self, l: usize) -> f64 {
        self.rho[l - 1] * (self.n as f64).powf(-(l as f64) / 2.0)
    }

    /// `E h(w)` as a function of `s = Σ w_i`, with first and second derivatives in `s`.
    pub fn mean_term(&self, s: f64) -> (f64, f64, f64) {
        let (mut m, mut d1, mut d2) = (0.0, 0.0, 0.0);
        for l in 1..=self.h {
            let r = self.rho_n(l);
            if r == 0.0 {
                continue;
            }
            let p = (self.h - l) as i32;
            m += r * s.powi(p);
            if p >= 1 {
                d1 += r * p as f64 * s.powi(p - 1);
            }
            if p >= 2 {
                d2 += r * (p * (p - 1)) as f64 * s.powi(p - 2);
            }
        }
        (m, d1, d2)
    }

    /// Parses `H=…`, `N=…`, `rho=…` lines (or `;`-separated pairs).
    pub fn parse_kv(text: &str) -> Result<Self> {
        let (mut h, mut n, mut rho) = (None, None, None);
        for item in text.split(['\n', ';']) {
            let item = item.trim();
            if item.is_empty() || item.starts_with('#') {
                continue;
            }
            let (k, v) = item.split_once('=').ok_or_else(|| invalid(format!("expected key=value, got `{item}`")))?;
            let v = v.trim();
            match k.trim() {
                "H" => h = Some(v.parse::<usize>().map_err(|e| invalid(format!("H: {e}")))?),
                "N" => n = Some(v.parse::<usize>().map_err(|e| invalid(format!("N: {e}")))?),
                "rho" => {
                    rho = Some(
                        v.split(',')
                            .filter(|t| !t.trim().is_empty())
                            .map(|t| t.trim().parse::<f64>().map_err(|e| invalid(format!("rho: {e}"))))
                            .collect::<Result<Vec<_>>>()?,
                    )
                }
                other => return Err(invalid(format!("unknown key `{other}`"))),
            }
        }
        let h = h.ok_or_else(|| invalid("missing H"))?;
        let n = n.ok_or_else(|| invalid("missing N"))?;
        SurrogateSpec::new(h, n, rho.unwrap_or_else(|| vec![0.0; h]))
    }

    pub fn to_kv(&self) -> String {
        let rho: Vec<String> = self.rho.iter().map(|r| format!("{r}")).collect();
        format!("H={}\nN={}\nrho={}\n", self.h, self.n, rho.join(","))
    }

    fn entries(&self) -> u128 {
        (self.n as u128).saturating_pow(self.h as u32)
    }
}

/// A draw of the coefficient tensor. Index `(i_1, …, i_H)` is stored at
/// `Σ_k i_k N^{H−k}`.
#[derive(Clone, Debug)]
pub struct SurrogateSample {
    spec: SurrogateSpec,
    x: Vec<f64>,
}

/// Riemannian derivatives at a point of the sphere.
#[derive(Clone, Debug)]
pub struct Riemannian {
    /// `P ∇h` with `P = I − wwᵀ`, in ambient coordinates.
    pub grad: DVector<f64>,
    /// `λ = w·∇h`.
    pub lagrange: f64,
    /// `Bᵀ(∇²h − λI)B` in the tangent basis `B`.
    pub hess: DMatrix<f64>,
    /// Orthonormal tangent basis, `N × (N−1)`.
    pub basis: DMatrix<f64>,
}

impl SurrogateSample {
    pub fn build(spec: &SurrogateSpec, seed: u64) -> Result<Self> {
        SurrogateSample::build_with_cap(spec, seed, DEFAULT_CAP)
    }

    pub fn build_with_cap(spec: &SurrogateSpec, seed: u64, cap: u128) -> Result<Self> {
        let entries = spec.entries();
        if entries > cap {
            return Err(Error::CapExceeded { entries, cap });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = (0..entries).map(|_| rng.sample(StandardNormal)).collect();
        Ok(SurrogateSample { spec: spec.clone(), x })
    }

    /// Uses the given coefficients, e.g. all zeros for a deterministic-only `h`.
    pub fn from_coefficients(spec: &SurrogateSpec, x: Vec<f64>) -> Result<Self> {
        if x.len() as u128 != spec.entries() {
            return Err(Error::Shape(format!("expected {} coefficients, got {}", spec.entries(), x.len())));
        }
        Ok(SurrogateSample { spec: spec.clone(), x })
    }

    pub fn spec(&self) -> &SurrogateSpec {
        &self.spec
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.x
    }

    fn check_unit(&self, w: &[f64]) -> Result<()> {
        check_unit(w, self.spec.n)
    }

    pub fn eval(&self, w: &[f64]) -> Result<f64> {
        self.check_unit(w)?;
        Ok(self.eval_any(w))
    }

    pub fn grad(&self, w: &[f64]) -> Result<DVector<f64>> {
        self.check_unit(w)?;
        Ok(self.derivatives(w, false).1)
    }

    pub fn hess(&self, w: &[f64]) -> Result<DMatrix<f64>> {
        self.check_unit(w)?;
        Ok(self.derivatives(w, true).2)
    }

    pub fn riemannian(&self, w: &[f64]) -> Result<Riemannian> {
        self.check_unit(w)?;
        Ok(self.riemannian_any(w))
    }

    /// Polynomial value at any `w`, not necessarily on the sphere.
    pub fn eval_any(&self, w: &[f64]) -> f64 {
        let n = self.spec.n;
        // contract the last index repeatedly
        let mut cur: Vec<f64> = self.x.clone();
        while cur.len() > 1 {
            cur = cur.chunks_exact(n).map(|row| row.iter().zip(w).map(|(a, b)| a * b).sum()).collect();
        }
        let s: f64 = w.iter().sum();
        cur[0] + self.spec.mean_term(s).0
    }

    /// Value, Euclidean gradient and (optionally) Hessian at any `w`.
    pub fn derivatives(&self, w: &[f64], with_hess: bool) -> (f64, DVector<f64>, DMatrix<f64>) {
        let n = self.spec.n;
        let h = self.spec.h;
        let mut grad = DVector::zeros(n);
        let mut hess = DMatrix::zeros(n, if with_hess { n } else { 0 });
        let mut value = 0.0;
        let mut idx = vec![0usize; h];
        let mut prefix = vec![1.0; h + 1];
        let mut suffix = vec![1.0; h + 1];
        for &c in &self.x {
            if c != 0.0 {
                for k in 0..h {
                    prefix[k + 1] = prefix[k] * w[idx[k]];
                }
                for k in (0..h).rev() {
                    suffix[k] = suffix[k + 1] * w[idx[k]];
                }
                value += c * prefix[h];
                for p in 0..h {
                    grad[idx[p]] += c * prefix[p] * suffix[p + 1];
                }
                if with_hess {
                    for p in 0..h {
                        let mut mid = 1.0;
                        for q in p + 1..h {
                            // product over positions strictly between p and q
                            let v = c * prefix[p] * mid * suffix[q + 1];
                            hess[(idx[p], idx[q])] += v;
                            hess[(idx[q], idx[p])] += v;
                            mid *= w[idx[q]];
                        }
                    }
                }
            }
            // odometer increment, last index fastest
            for k in (0..h).rev() {
                idx[k] += 1;
                if idx[k] < n {
                    break;
                }
                idx[k] = 0;
            }
        }
        let s: f64 = w.iter().sum();
        let (m, d1, d2) = self.spec.mean_term(s);
        value += m;
        grad.add_scalar_mut(d1);
        if with_hess {
            hess.add_scalar_mut(d2);
        }
        (value, grad, hess)
    }

    pub(crate) fn riemannian_any(&self, w: &[f64]) -> Riemannian {
        let n = self.spec.n;
        let (_, g, hm) = self.derivatives(w, true);
        let wv = DVector::from_column_slice(w);
        let lagrange = wv.dot(&g);
        let grad = &g - &wv * lagrange;
        let basis = tangent_basis(w);
        let shifted = hm - DMatrix::identity(n, n) * lagrange;
        let hess = basis.transpose() * shifted * &basis;
        let hess = (&hess + hess.transpose()) * 0.5;
        Riemannian { grad, lagrange, hess, basis }
    }
}

fn check_unit(w: &[f64], n: usize) -> Result<()> {
    if w.len() != n {
        return Err(Error::Shape(format!("w has {} entries, N = {n}", w.len())));
    }
    let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > UNIT_TOL {
        return Err(domain(format!("w must be a unit vector, |w| = {norm}")));
    }
    Ok(())
}

/// Columns 2..N of the Householder reflection mapping `e_1` to `w`.
pub fn tangent_basis(w: &[f64]) -> DMatrix<f64> {
    let n = w.len();
    let wv = DVector::from_column_slice(w);
    let mut v = -wv.clone();
    v[0] += 1.0;
    let vv = v.dot(&v);
    let q =
        if vv < 1e-30 { DMatrix::identity(n, n) } else { DMatrix::identity(n, n) - (&v * v.transpose()) * (2.0 / vv) };
    q.columns(1, n - 1).into_owned()
}

/// Monte-Carlo estimate of `Cov(h(w), h(w′))` over fresh coefficient tensors.
///
/// The mean of `h` is known exactly, so each sample contributes
/// `(h(w) − E h(w))(h(w′) − E h(w′))`.
pub fn covariance_mc(spec: &SurrogateSpec, w: &[f64], w2: &[f64], samples: usize, seed: u64) -> Result<(f64, f64)> {
    if samples < 1000 {
        return Err(invalid("need at least 1000 samples"));
    }
    if spec.entries() > DEFAULT_CAP {
        return Err(Error::CapExceeded { entries: spec.entries(), cap: DEFAULT_CAP });
    }
    check_unit(w, spec.n)?;
    check_unit(w2, spec.n)?;
    let monomials = |w: &[f64]| {
        let mut out = vec![1.0];
        for _ in 0..spec.h {
            out = out.iter().flat_map(|&a| w.iter().map(move |&b| a * b)).collect();
        }
        out
    };
    let (p1, p2) = (monomials(w), monomials(w2));
    let parts = map_chunks(seed, samples, |rng, _, count| {
        let mut m = Moments::default();
        for _ in 0..count {
            let (mut a, mut b) = (0.0, 0.0);
            for (m1, m2) in p1.iter().zip(&p2) {
                let x: f64 = rng.sample(StandardNormal);
                a += x * m1;
                b += x * m2;
            }
            m.push(a * b);
        }
        m
    });
    let m = Moments::reduce(&parts);
    Ok((m.mean(), m.stderr()))
}

/// How the ξ coefficients are scaled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum XiConvention {
    /// ξ sums over `ρ_ℓ^{(N)} = ρ_ℓ N^{−ℓ/2}`.
    #[default]
    Standard,
    /// Applies a second `N^{−ℓ/2}` on top of the one already in `ρ_ℓ^{(N)}`.
    DoubleScaled,
}

/// Conditional law of the Hessian given `h(w) = x` at the reference point.
#[derive(Clone, Debug, Serialize)]
pub struct HessianModel {
    pub h: usize,
    pub n: usize,
    pub xi0: f64,
    pub xi1: f64,
    pub xi2: f64,
    pub xi3: f64,
    /// Mean gradient, `N−1` entries.
    pub nu: Vec<f64>,
    /// `(a, b, c) = (ξ₁+2ξ₂+ξ₃, ξ₂+ξ₃, ξ₃)` before the prefactor.
    pub s_quad: (f64, f64, f64),
    /// `(2(N−1)H(H−1))^{−1/2}`.
    pub prefactor: f64,
    /// Larger-magnitude eigenvalue of S.
    pub s1: f64,
    /// Smaller-magnitude nonzero eigenvalue of S.
    pub lambda_small: f64,
    /// `√N · lambda_small`.
    pub s2_scaled: f64,
}

impl HessianModel {
    pub fn nu_sq(&self) -> f64 {
        self.nu.iter().map(|v| v * v).sum()
    }

    /// The `(N−1) × (N−1)` matrix S: first row `(a, b, …, b)`, other rows `(b, c, …, c)`, times the prefactor.
    pub fn s_matrix(&self) -> DMatrix<f64> {
        let d = self.n - 1;
        let (a, b, c) = self.s_quad;
        DMatrix::from_fn(d, d, |i, j| {
            let v = match (i == 0, j == 0) {
                (true, true) => a,
                (true, false) | (false, true) => b,
                _ => c,
            };
            v * self.prefactor
        })
    }

    /// Roots of `λ² − (a + (N−2)c)λ + (N−2)(ac − b²) = 0`, scaled by the
    /// prefactor, larger magnitude first.
    pub fn s_eigs(&self) -> (f64, f64) {
        let (a, b, c) = self.s_quad;
        let m = (self.n - 2) as f64;
        let r = quadratic_roots(a + m * c, m * (a * c - b * b));
        (r.0 * self.prefactor, r.1 * self.prefactor)
    }

    /// Roots of the quadratic in its printed form
    /// `λ² − (a − c(N−1))λ + (N−1)(ca − b²) = 0`, scaled by the prefactor.
    /// Kept for comparison only; see `s_eigs`.
    pub fn s_eigs_printed(&self) -> (f64, f64) {
        let (a, b, c) = self.s_quad;
        let m = (self.n - 1) as f64;
        let r = quadratic_roots(a - m * c, m * (c * a - b * b));
        (r.0 * self.prefactor, r.1 * self.prefactor)
    }

    /// `H(x − ξ₀)/√(2(N−1)H(H−1))`, the shift of the GOE part given `h = x`.
    pub fn goe_shift(&self, x: f64) -> f64 {
        self.h as f64 * (x - self.xi0) * self.prefactor
    }

    /// Conditional mean of the Hessian entry `(i, j)` given `h = x`.
    pub fn conditional_mean(&self, i: usize, j: usize, x: f64) -> f64 {
        let d = |k: usize| if k == 0 { 1.0 } else { 0.0 };
        self.xi3 + self.xi2 * (d(i) + d(j)) + self.xi1 * d(i) * d(j)
            - if i == j { self.h as f64 * (x - self.xi0) } else { 0.0 }
    }
}

/// Roots of `λ² − tλ + d`, larger magnitude first; always real here since
/// the discriminant is a sum of squares for the S matrices we build.
fn quadratic_roots(t: f64, d: f64) -> (f64, f64) {
    let disc = (t * t - 4.0 * d).max(0.0).sqrt();
    let q = 0.5 * (t + if t >= 0.0 { disc } else { -disc });
    if q == 0.0 {
        return (0.0, 0.0);
    }
    let (r1, r2) = (q, d / q);
    if r1.abs() >= r2.abs() {
        (r1, r2)
    } else {
        (r2, r1)
    }
}

pub fn conditional_hessian_params(spec: &SurrogateSpec) -> HessianModel {
    conditional_hessian_params_with(spec, XiConvention::Standard)
}

pub fn conditional_hessian_params_with(spec: &SurrogateSpec, conv: XiConvention) -> HessianModel {
    let (h, n) = (spec.h, spec.n);
    let nf = n as f64;
    let r = |l: usize| match conv {
        XiConvention::Standard => spec.rho_n(l),
        XiConvention::DoubleScaled => spec.rho_n(l) * nf.powf(-(l as f64) / 2.0),
    };
    let xi0: f64 = (1..=h).map(r).sum();
    let (mut xi1, mut xi2, mut xi3) = (0.0, 0.0, 0.0);
    for l in 1..=h.saturating_sub(2) {
        let hl = (h - l) as f64;
        xi1 += r(l) * (hl * (hl - 1.0) + 1.0);
        xi2 += r(l) * (hl - 2.0);
        xi3 += r(l);
    }
    let nu = (0..n - 1)
        .map(|i| {
            (1..h)
                .map(|l| {
                    let hl = (h - l) as f64;
                    r(l) * (hl + if i == 0 { hl - 1.0 } else { 0.0 })
                })
                .sum()
        })
        .collect();
    let s_quad = (xi1 + 2.0 * xi2 + xi3, xi2 + xi3, xi3);
    let prefactor = 1.0 / (2.0 * (nf - 1.0) * (h * (h - 1)) as f64).sqrt();
    let mut model =
        HessianModel { h, n, xi0, xi1, xi2, xi3, nu, s_quad, prefactor, s1: 0.0, lambda_small: 0.0, s2_scaled: 0.0 };
    let (s1, small) = model.s_eigs();
    model.s1 = s1;
    model.lambda_small = small;
    model.s2_scaled = nf.sqrt() * small;
    model
}

/// `√(2(N−1)H(H−1)) (M − H(x−ξ₀)/√(2(N−1)H(H−1)) I + S)` with `M ~ GOE^{N−1}`.
pub fn sample_conditional_hessian<R: Rng + ?Sized>(model: &HessianModel, x: f64, rng: &mut R) -> DMatrix<f64> {
    let d = model.n - 1;
    let m = sample_goe(d, rng);
    let shifted = m - DMatrix::identity(d, d) * model.goe_shift(x) + model.s_matrix();
    shifted / model.prefactor
}
