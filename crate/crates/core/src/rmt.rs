//! GOE Monte Carlo: sampling, expected absolute determinants with and without
//! index conditioning, interlacing under low-rank updates, the perturbed
//! Gaussian integral identity and the two-point Selberg-type integrals.

use crate::error::{invalid, Result};
use crate::mc::{map_chunks, stream_rng, LogMoments, Moments};
use crate::numeric::{gl_nodes, half_line_nodes, ln_gamma};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use std::f64::consts::PI;

/// Symmetric Gaussian matrix with `E M_ij² = (1 + δ_ij)/(2N)`.
pub fn sample_goe<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DMatrix<f64> {
    let off = (1.0 / (2.0 * n as f64)).sqrt();
    let diag = (1.0 / n as f64).sqrt();
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        let d: f64 = rng.sample(StandardNormal);
        m[(i, i)] = d * diag;
        for j in i + 1..n {
            let v: f64 = rng.sample(StandardNormal);
            m[(i, j)] = v * off;
            m[(j, i)] = v * off;
        }
    }
    m
}

/// GOE draw from stream 0 of `seed`.
pub fn goe(n: usize, seed: u64) -> DMatrix<f64> {
    sample_goe(n, &mut stream_rng(seed, 0))
}

/// `M − xI + S` for `M ~ GOE^N`.
#[derive(Clone, Debug)]
pub struct DeformedEnsemble {
    pub n: usize,
    pub x: f64,
    pub s: Option<DMatrix<f64>>,
}

impl DeformedEnsemble {
    pub fn new(n: usize, x: f64, s: Option<DMatrix<f64>>) -> Result<Self> {
        if n == 0 {
            return Err(invalid("N must be positive"));
        }
        if let Some(s) = &s {
            if s.nrows() != n || s.ncols() != n {
                return Err(invalid(format!("S is {}x{}, expected {n}x{n}", s.nrows(), s.ncols())));
            }
            if (s - s.transpose()).amax() > 1e-12 {
                return Err(invalid("S must be symmetric"));
            }
        }
        Ok(DeformedEnsemble { n, x, s })
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> DMatrix<f64> {
        let m = sample_goe(self.n, rng);
        match &self.s {
            Some(s) => m + s,
            None => m,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GoeStats {
    #[serde(rename = "N")]
    pub n: usize,
    pub x: f64,
    pub samples: usize,
    pub mean_log: f64,
    pub stderr_log: f64,
    pub seed: u64,
}

impl GoeStats {
    fn from_log(e: &DeformedEnsemble, samples: usize, seed: u64, m: &LogMoments) -> Self {
        GoeStats { n: e.n, x: e.x, samples, mean_log: m.log_mean(), stderr_log: m.rel_stderr(), seed }
    }

    pub fn mean(&self) -> f64 {
        self.mean_log.exp()
    }

    pub fn stderr(&self) -> f64 {
        self.mean() * self.stderr_log
    }
}

/// `log |det A|` from an LU factorisation.
pub fn log_abs_det(a: DMatrix<f64>) -> f64 {
    let lu = a.lu();
    let u = lu.u();
    (0..u.nrows()).map(|i| u[(i, i)].abs().ln()).sum()
}

/// Monte-Carlo `E|det(M − xI + S)|`, accumulated in log space.
pub fn expected_abs_det(e: &DeformedEnsemble, samples: usize, seed: u64) -> Result<GoeStats> {
    if samples < 100 {
        return Err(invalid("need at least 100 samples"));
    }
    let n = e.n;
    let parts = map_chunks(seed, samples, |rng, _, count| {
        let mut acc = LogMoments::default();
        for _ in 0..count {
            let a = e.draw(rng) - DMatrix::identity(n, n) * e.x;
            acc.push(log_abs_det(a));
        }
        acc
    });
    Ok(GoeStats::from_log(e, samples, seed, &LogMoments::reduce(&parts)))
}

/// Which matrix the index condition looks at.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub enum IndexTarget {
    /// Eigenvalues of `M + S`.
    #[default]
    Deformed,
    /// Eigenvalues of `M` alone.
    Undeformed,
}

/// As [`expected_abs_det`] but a sample only counts when the number of
/// eigenvalues below `x` lies in `k_set`.
pub fn expected_abs_det_indexed(
    e: &DeformedEnsemble,
    k_set: &[usize],
    samples: usize,
    seed: u64,
    target: IndexTarget,
) -> Result<GoeStats> {
    if samples < 100 {
        return Err(invalid("need at least 100 samples"));
    }
    let parts = map_chunks(seed, samples, |rng, _, count| {
        let mut acc = LogMoments::default();
        for _ in 0..count {
            let m = sample_goe(e.n, rng);
            let (deformed, base) = match &e.s {
                Some(s) => {
                    let d = &m + s;
                    (d, Some(m))
                }
                None => (m, None),
            };
            let ev = SymmetricEigen::new(deformed).eigenvalues;
            let idx = match (target, base) {
                (IndexTarget::Undeformed, Some(m)) => index_of(&m, e.x),
                _ => ev.iter().filter(|&&l| l < e.x).count(),
            };
            if k_set.contains(&idx) {
                acc.push(ev.iter().map(|l| (l - e.x).abs().ln()).sum());
            } else {
                acc.push(f64::NEG_INFINITY);
            }
        }
        acc
    });
    Ok(GoeStats::from_log(e, samples, seed, &LogMoments::reduce(&parts)))
}

/// Number of eigenvalues strictly below `x`.
pub fn index_of(m: &DMatrix<f64>, x: f64) -> usize {
    SymmetricEigen::new(m.clone()).eigenvalues.iter().filter(|&&l| l < x).count()
}

fn sorted_eigs(m: &DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = SymmetricEigen::new(m.clone()).eigenvalues.iter().cloned().collect();
    ev.sort_by(|a, b| a.partial_cmp(b).expect("finite eigenvalues"));
    ev
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct InterlacingReport {
    /// Rank-one steps whose eigenvalues failed to interlace.
    pub interlacing_violations: usize,
    /// Largest |ind_x(M) − ind_x(M+S)| seen.
    pub max_index_shift: usize,
    /// Rank-r updates whose index moved by more than r.
    pub index_bound_violations: usize,
}

/// Adds the rank-one pieces `s_j e_j e_jᵀ` one at a time and checks that
/// each step interlaces: `λ_i(A) ≤ λ_i(A + s eeᵀ) ≤ λ_{i+1}(A)` for `s > 0`,
/// mirrored for `s < 0`. Also checks that the index at `x` moves by at most
/// the rank of the total update.
pub fn interlacing_check(m: &DMatrix<f64>, components: &[(f64, DVector<f64>)], x: f64) -> InterlacingReport {
    let tol = 1e-10 * (1.0 + m.amax() + components.iter().map(|(s, _)| s.abs()).sum::<f64>());
    let mut report = InterlacingReport::default();
    let mut a = m.clone();
    let mut before = sorted_eigs(&a);
    for (s, e) in components {
        let b = &a + e * e.transpose() * *s;
        let after = sorted_eigs(&b);
        let n = before.len();
        let ok = (0..n).all(|i| {
            if *s >= 0.0 {
                after[i] >= before[i] - tol && (i + 1 == n || after[i] <= before[i + 1] + tol)
            } else {
                after[i] <= before[i] + tol && (i == 0 || after[i] >= before[i - 1] - tol)
            }
        });
        if !ok {
            report.interlacing_violations += 1;
        }
        a = b;
        before = after;
    }
    let k0 = index_of(m, x);
    let k1 = index_of(&a, x);
    let shift = k0.abs_diff(k1);
    report.max_index_shift = shift;
    if shift > components.len() {
        report.index_bound_violations += 1;
    }
    report
}

/// Per-Haar factor used in the Gaussian-integral identity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub enum HaarFactor {
    /// `(1 + 2i N^α Q_ii s_j)^{−1/2}`, the large-N Gaussian average over a Haar row.
    #[default]
    Asymptotic,
    /// `(1 + i N^α Q_ii s_j)` exactly as printed in the final display.
    Printed,
}

/// Low-rank S written as `Σ_j N^α s_j e_j e_jᵀ`.
#[derive(Clone, Debug)]
pub struct LowRank {
    pub alpha: f64,
    pub components: Vec<(f64, DVector<f64>)>,
}

impl LowRank {
    pub fn zero() -> Self {
        LowRank { alpha: 0.0, components: Vec::new() }
    }

    fn quad(&self, n: usize, x: &DVector<f64>) -> f64 {
        let scale = (n as f64).powf(self.alpha);
        self.components.iter().map(|(s, e)| scale * s * e.dot(x).powi(2)).sum()
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ComplexEstimate {
    pub re: f64,
    pub im: f64,
    pub stderr_re: f64,
    pub stderr_im: f64,
    /// True when `|estimate|` is below three combined standard errors.
    pub noise_dominated: bool,
}

impl ComplexEstimate {
    pub fn value(&self) -> Complex64 {
        Complex64::new(self.re, self.im)
    }
}

/// Monte-Carlo `J_{N,m}(F; S) = ∫ dx_1…dx_m F(Q) e^{−iN Σ x_iᵀ S x_i}` with
/// `Q_ij = x_i·x_j`. The `x_i` are drawn from `N(0, σ²I)` and reweighted.
pub fn fyodorov_lhs_mc(
    n: usize,
    m: usize,
    f: &(dyn Fn(&DMatrix<f64>) -> f64 + Sync),
    s: &LowRank,
    sigma2: f64,
    samples: usize,
    seed: u64,
) -> Result<ComplexEstimate> {
    if !(1..=2).contains(&m) {
        return Err(invalid("only m = 1 and m = 2 are supported"));
    }
    let sd = sigma2.sqrt();
    let log_norm = 0.5 * (n * m) as f64 * (2.0 * PI * sigma2).ln();
    let parts = map_chunks(seed, samples, |rng, _, count| {
        let (mut re, mut im) = (Moments::default(), Moments::default());
        for _ in 0..count {
            let xs: Vec<DVector<f64>> =
                (0..m).map(|_| DVector::from_fn(n, |_, _| sd * rng.sample::<f64, _>(StandardNormal))).collect();
            let q = DMatrix::from_fn(m, m, |i, j| xs[i].dot(&xs[j]));
            let sq: f64 = xs.iter().map(|v| v.norm_squared()).sum();
            let weight = f(&q) * (log_norm + sq / (2.0 * sigma2)).exp();
            let phase: f64 = -(n as f64) * xs.iter().map(|v| s.quad(n, v)).sum::<f64>();
            re.push(weight * phase.cos());
            im.push(weight * phase.sin());
        }
        (re, im)
    });
    let re = Moments::reduce(parts.iter().map(|p| &p.0));
    let im = Moments::reduce(parts.iter().map(|p| &p.1));
    let (mr, mi, sr, si) = (re.mean(), im.mean(), re.stderr(), im.stderr());
    Ok(ComplexEstimate {
        re: mr,
        im: mi,
        stderr_re: sr,
        stderr_im: si,
        noise_dominated: mr.hypot(mi) < 3.0 * sr.hypot(si),
    })
}

/// Right side of the identity:
///
/// `π^{(m/2)(N−(m−1)/2)} / ∏_{k<m} Γ((N−k)/2) · ∫_{Q⪰0} dQ det(Q)^{(N−m−1)/2} F(Q) ∏_i ∏_j φ(Q_ii s_j)`
///
/// with `φ` chosen by `factor`. The Q integral uses tensor Gauss-Legendre
/// quadrature on `q = (t/(1−t))²` and, for `m = 2`, `Q_12 = τ√(Q_11 Q_22)`.
pub fn fyodorov_rhs_quad(
    n: usize,
    m: usize,
    f: &(dyn Fn(&DMatrix<f64>) -> f64 + Sync),
    s: &LowRank,
    factor: HaarFactor,
) -> Result<Complex64> {
    if !(1..=2).contains(&m) {
        return Err(invalid("only m = 1 and m = 2 are supported"));
    }
    if n <= m {
        return Err(invalid("need N > m"));
    }
    let nf = n as f64;
    let mf = m as f64;
    let scale = nf.powf(s.alpha);
    let phi = |qii: f64| -> Complex64 {
        s.components.iter().fold(Complex64::new(1.0, 0.0), |acc, (sj, _)| {
            let z = match factor {
                HaarFactor::Asymptotic => Complex64::new(1.0, 2.0 * scale * qii * sj).powf(-0.5),
                HaarFactor::Printed => Complex64::new(1.0, scale * qii * sj),
            };
            acc * z
        })
    };
    let log_pref =
        0.5 * mf * (nf - 0.5 * (mf - 1.0)) * PI.ln() - (0..m).map(|k| ln_gamma((nf - k as f64) / 2.0)).sum::<f64>();
    let expo = 0.5 * (nf - mf - 1.0);
    // q = p² keeps the q^{(N−2)/2} endpoint behaviour polynomial for odd N
    let squared = |panels, per| -> Vec<(f64, f64)> {
        half_line_nodes(panels, per).into_iter().map(|(p, w)| (p * p, 2.0 * p * w)).collect()
    };
    let q_nodes = squared(128, 16);
    let integral = if m == 1 {
        let mut acc = Complex64::new(0.0, 0.0);
        for &(q, w) in &q_nodes {
            if q <= 0.0 {
                continue;
            }
            let qm = DMatrix::from_element(1, 1, q);
            let fv = f(&qm);
            if fv == 0.0 {
                continue;
            }
            acc += phi(q) * (w * (expo * q.ln() + log_pref).exp() * fv);
        }
        acc
    } else {
        let q_nodes = squared(48, 8);
        let tau_nodes = gl_nodes(-1.0, 1.0, 48);
        let mut acc = Complex64::new(0.0, 0.0);
        for &(q1, w1) in &q_nodes {
            for &(q2, w2) in &q_nodes {
                if q1 <= 0.0 || q2 <= 0.0 {
                    continue;
                }
                let g = (q1 * q2).sqrt();
                let ph = phi(q1) * phi(q2);
                for &(t, wt) in &tau_nodes {
                    let q12 = t * g;
                    let qm = DMatrix::from_row_slice(2, 2, &[q1, q12, q12, q2]);
                    let fv = f(&qm);
                    if fv == 0.0 {
                        continue;
                    }
                    let det = q1 * q2 * (1.0 - t * t);
                    let lw = expo * det.ln() + g.ln() + log_pref;
                    acc += ph * (w1 * w2 * wt * lw.exp() * fv);
                }
            }
        }
        acc
    };
    Ok(integral)
}

/// `(2π)^{n/2} E|y_1 − y_2|^β` for i.i.d. standard normals (n = 2).
pub fn y_integral_mc(n: usize, beta: f64, samples: usize, seed: u64) -> Result<(f64, f64)> {
    if n != 2 {
        return Err(invalid("only n = 2 is implemented"));
    }
    let parts = map_chunks(seed, samples, |rng, _, count| {
        let mut m = Moments::default();
        for _ in 0..count {
            let a: f64 = rng.sample(StandardNormal);
            let b: f64 = rng.sample(StandardNormal);
            m.push((a - b).abs().powf(beta));
        }
        m
    });
    let m = Moments::reduce(&parts);
    let c = 2.0 * PI;
    Ok((c * m.mean(), c * m.stderr()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn goe_is_symmetric() {
        let m = goe(7, 3);
        assert_eq!(m, m.transpose());
    }

    #[test]
    fn index_examples() {
        assert_eq!(index_of(&DMatrix::identity(3, 3), 0.0), 0);
        assert_eq!(index_of(&DMatrix::from_diagonal(&DVector::from_vec(vec![-1.0, 1.0])), 0.0), 1);
    }

    #[test]
    fn log_abs_det_matches_determinant() {
        let a = DMatrix::from_row_slice(3, 3, &[2.0, 1.0, 0.0, -1.0, 3.0, 1.0, 0.5, 0.0, -4.0]);
        assert!((log_abs_det(a.clone()) - a.determinant().abs().ln()).abs() < 1e-13);
    }

    #[test]
    fn ensemble_rejects_asymmetric_s() {
        let s = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        assert!(DeformedEnsemble::new(2, 0.0, Some(s)).is_err());
    }

    #[test]
    fn rhs_unperturbed_is_gaussian_volume() {
        let f = |q: &DMatrix<f64>| (-q.trace()).exp();
        for n in [3usize, 6, 10] {
            let r = fyodorov_rhs_quad(n, 1, &f, &LowRank::zero(), HaarFactor::Asymptotic).unwrap();
            let want = PI.powf(n as f64 / 2.0);
            assert!((r.re - want).abs() < 1e-9 * want && r.im.abs() < 1e-12, "n={n}: {r}");
        }
        assert!(fyodorov_rhs_quad(6, 3, &f, &LowRank::zero(), HaarFactor::Asymptotic).is_err());
    }
}
