//! Closed-form complexity asymptotics: the GOE rate function I₁, Θ_H and
//! Θ_{H,k}, the band thresholds E_k, the sharp leading term and its
//! auxiliary functions, and the constants that appear in its derivation.

use crate::error::{domain, invalid, Error, Result};
use crate::numeric::{bisect, gl_integrate, ln_gamma};
use crate::surrogate::{conditional_hessian_params_with, SurrogateSpec, XiConvention};
use num_complex::Complex64;
use serde::Serialize;
use std::f64::consts::{LN_2, PI, SQRT_2};

const ROOT_TOL: f64 = 1e-10;

/// `E_∞ = 2√((H−1)/H)`.
pub fn e_infinity(h: usize) -> f64 {
    2.0 * ((h as f64 - 1.0) / h as f64).sqrt()
}

fn check_i1_domain(u: f64, e: f64) -> Result<()> {
    if !(e > 0.0) {
        return Err(domain(format!("E must be positive, got {e}")));
    }
    if u > -e {
        return Err(domain(format!("I1 needs u <= -E, got u = {u}, E = {e}")));
    }
    Ok(())
}

/// `I₁(u;E) = −(u/E²)√(u²−E²) − log(−u+√(u²−E²)) + log E` for `u ≤ −E`.
pub fn i1(u: f64, e: f64) -> Result<f64> {
    check_i1_domain(u, e)?;
    let r = (u * u - e * e).max(0.0).sqrt();
    Ok(-(u / (e * e)) * r - (-u + r).ln() + e.ln())
}

/// `I₁′(u;E) = −(2/E²)√(u²−E²)`.
pub fn i1_prime(u: f64, e: f64) -> Result<f64> {
    check_i1_domain(u, e)?;
    Ok(-(2.0 / (e * e)) * (u * u - e * e).max(0.0).sqrt())
}

fn check_h(h: usize) -> Result<()> {
    if h < 3 {
        return Err(invalid(format!("H must be at least 3, got {h}")));
    }
    Ok(())
}

/// Θ_H(u): three branches split at `−E_∞` and `0`.
pub fn theta_h(h: usize, u: f64) -> Result<f64> {
    check_h(h)?;
    let hf = h as f64;
    let base = 0.5 * (hf - 1.0).ln();
    let einf = e_infinity(h);
    let quad = (hf - 2.0) / (4.0 * (hf - 1.0)) * u * u;
    Ok(if u <= -einf {
        base - quad - i1(u, einf)?
    } else if u < 0.0 {
        base - quad
    } else {
        base
    })
}

/// Θ_{H,k}(u): `(k+1) I₁` below `−E_∞`, constant above.
pub fn theta_hk(h: usize, k: usize, u: f64) -> Result<f64> {
    check_h(h)?;
    let hf = h as f64;
    let base = 0.5 * (hf - 1.0).ln();
    let einf = e_infinity(h);
    Ok(if u <= -einf {
        base - (hf - 2.0) / (4.0 * (hf - 1.0)) * u * u - (k as f64 + 1.0) * i1(u, einf)?
    } else {
        base - (hf - 2.0) / hf
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct BandTable {
    #[serde(rename = "H")]
    pub h: usize,
    pub e_inf: f64,
    /// E_0 > E_1 > … > E_{k_max}.
    pub thresholds: Vec<f64>,
}

/// Roots `E_k` of `Θ_{H,k}(−E) = 0` on `E > E_∞` by bracketed bisection.
pub fn band_thresholds(h: usize, k_max: usize) -> Result<BandTable> {
    check_h(h)?;
    let einf = e_infinity(h);
    let mut thresholds = Vec::with_capacity(k_max + 1);
    for k in 0..=k_max {
        let g = |e: f64| theta_hk(h, k, -e).expect("E >= E_inf keeps u in domain");
        if g(einf) <= 0.0 {
            return Err(Error::NoSignChange(format!("Θ_{{{h},{k}}}(−E_∞) is not positive")));
        }
        let mut hi = 2.0 * einf;
        let mut tries = 0;
        while g(hi) >= 0.0 {
            hi *= 2.0;
            tries += 1;
            if tries > 60 {
                return Err(Error::NoSignChange(format!("Θ_{{{h},{k}}} stays nonnegative")));
            }
        }
        thresholds.push(bisect(g, einf, hi, ROOT_TOL)?);
    }
    Ok(BandTable { h, e_inf: einf, thresholds })
}

/// Which coefficient is used in q(θ′).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub enum QForm {
    /// `½ sin²2θ′ + ¼(3 + cos 4θ′)`.
    #[default]
    Corrected,
    /// `½ sin²2θ′ + ¼(3 + 4 cos 4θ′)`, as printed.
    Printed,
}

pub fn q_theta(theta: f64, form: QForm) -> f64 {
    let s = (2.0 * theta).sin();
    let c4 = (4.0 * theta).cos();
    match form {
        QForm::Corrected => 0.5 * s * s + 0.25 * (3.0 + c4),
        QForm::Printed => 0.5 * s * s + 0.25 * (3.0 + 4.0 * c4),
    }
}

/// `h(v) = (|v−√2|/|v+√2|)^{1/4} + (|v+√2|/|v−√2|)^{1/4}` for `v > √2`.
/// The alternative form `2|−v+√(v²−2)|^{−1/2}|v²−2|^{−1/4}` is evaluated
/// alongside and must agree to 1e−12 relative.
pub fn h_aux(v: f64) -> Result<f64> {
    if !(v > SQRT_2) || !v.is_finite() {
        return Err(domain(format!("h(v) needs v > √2, got {v}")));
    }
    let quarter = h_aux_quarter(v);
    let alt = h_aux_alt(v);
    if (quarter - alt).abs() > 1e-12 * quarter {
        return Err(domain(format!("h(v) forms disagree at v = {v}: {quarter} vs {alt}")));
    }
    Ok(quarter)
}

// v² − 2 with a single rounding; both forms of h are evaluated from it so
// that neither loses digits to cancellation near the branch point.
fn v_sq_minus_2(v: f64) -> f64 {
    v.mul_add(v, -2.0)
}

pub fn h_aux_quarter(v: f64) -> f64 {
    let p = v + SQRT_2;
    // |v − √2| / |v + √2| = |v² − 2| / (v + √2)²
    let r = (v_sq_minus_2(v).abs() / (p * p)).powf(0.25);
    r + 1.0 / r
}

pub fn h_aux_alt(v: f64) -> f64 {
    let d = v_sq_minus_2(v);
    // −v + √(v²−2) = −2/(v + √(v²−2)), written without cancellation
    let a = 2.0 / (v + d.sqrt());
    2.0 * a.powf(-0.5) * d.abs().powf(-0.25)
}

/// `j(x, s₁, θ′) = 1 + ¼ s₁ √(x²−2) h(x)² − ¼ s₁² q(θ′) |x²−2| h(x)²`.
/// `h` is even, so it is evaluated at `|x|`.
pub fn j_func(x: f64, s1: f64, theta: f64, form: QForm) -> Result<f64> {
    if !(x.abs() > SQRT_2) {
        return Err(domain(format!("j needs |x| > √2, got {x}")));
    }
    let h2 = h_aux(x.abs())?.powi(2);
    let d = x * x - 2.0;
    Ok(1.0 + 0.25 * s1 * d.sqrt() * h2 - 0.25 * s1 * s1 * q_theta(theta, form) * d.abs() * h2)
}

/// `T(v, s₁) = (2/π) ∫₀^{π/2} j(−v, s₁, θ′) dθ′` by Gauss-Legendre.
pub fn t_of_v_s1(v: f64, s1: f64, nodes: usize, form: QForm) -> Result<f64> {
    if !(v > SQRT_2) {
        return Err(domain(format!("T needs v > √2, got {v}")));
    }
    if s1 == 0.0 {
        return Ok(1.0);
    }
    // validate once so the quadrature closure cannot fail
    j_func(-v, s1, 0.0, form)?;
    let integral = gl_integrate(|t| j_func(-v, s1, t, form).expect("checked"), 0.0, PI / 2.0, nodes);
    Ok(2.0 / PI * integral)
}

#[derive(Clone, Debug, Serialize)]
pub struct ExactTermReport {
    pub u: f64,
    pub v: f64,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "H")]
    pub h: usize,
    pub h_of_v: f64,
    pub t_value: f64,
    pub nu_sq: f64,
    pub s1: f64,
    pub theta_h_u: f64,
    pub i1: f64,
    pub i1_prime: f64,
    /// `Θ_H′(u) = −(H−2)u/(2(H−1)) − I₁′(u)`, the positive rate in the denominator.
    pub rate: f64,
    /// The individual log terms, in the order they are summed.
    pub log_terms: LogTerms,
    pub log_leading: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct LogTerms {
    pub half_log_n: f64,
    pub half_log_2pi_h: f64,
    pub nu_term: f64,
    pub log_t: f64,
    pub log_h: f64,
    pub n_theta: f64,
    pub i1: f64,
    pub half_u_i1_prime: f64,
    pub log_rate: f64,
}

/// Natural log of the sharp leading-order expected count of critical points
/// below `√N u`, for `u < −E_∞`.
///
/// The last factor is `log Θ_H′(u)`; see the crate README for why its sign is
/// the negative of `(H−2)u/(2(H−1)) + I₁′`.
pub fn exact_leading_complexity(spec: &SurrogateSpec, u: f64, form: QForm) -> Result<ExactTermReport> {
    exact_leading_complexity_with(spec, u, form, XiConvention::Standard)
}

/// As [`exact_leading_complexity`] with ν and s₁ taken under `conv`.
pub fn exact_leading_complexity_with(
    spec: &SurrogateSpec,
    u: f64,
    form: QForm,
    conv: XiConvention,
) -> Result<ExactTermReport> {
    let h = spec.h;
    check_h(h)?;
    let hf = h as f64;
    let nf = spec.n as f64;
    let einf = e_infinity(h);
    if !(u < -einf) {
        return Err(domain(format!("need u < −E_∞ = {}, got {u}", -einf)));
    }
    let v = -SQRT_2 * u / einf;
    let model = conditional_hessian_params_with(spec, conv);
    let nu_sq = model.nu_sq();
    let s1 = model.s1;
    let h_of_v = h_aux(v)?;
    let t_value = t_of_v_s1(v, s1, 64, form)?;
    if !(t_value > 0.0) {
        return Err(domain(format!("T(v, s1) = {t_value} is not positive")));
    }
    let theta = theta_h(h, u)?;
    let i1v = i1(u, einf)?;
    let i1p = i1_prime(u, einf)?;
    let rate = -((hf - 2.0) * u / (2.0 * (hf - 1.0)) + i1p);
    if !(rate > 0.0) {
        return Err(domain(format!("rate {rate} is not positive")));
    }
    let terms = LogTerms {
        half_log_n: -0.5 * nf.ln(),
        half_log_2pi_h: -0.5 * (2.0 * PI * hf).ln(),
        nu_term: -nu_sq / (2.0 * hf),
        log_t: t_value.ln(),
        log_h: h_of_v.ln(),
        n_theta: nf * theta,
        i1: i1v,
        half_u_i1_prime: -0.5 * u * i1p,
        log_rate: -rate.ln(),
    };
    let log_leading = terms.half_log_n
        + terms.half_log_2pi_h
        + terms.nu_term
        + terms.log_t
        + terms.log_h
        + terms.n_theta
        + terms.i1
        + terms.half_u_i1_prime
        + terms.log_rate;
    Ok(ExactTermReport {
        u,
        v,
        n: spec.n,
        h,
        h_of_v,
        t_value,
        nu_sq,
        s1,
        theta_h_u: theta,
        i1: i1v,
        i1_prime: i1p,
        rate,
        log_terms: terms,
        log_leading,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct KnConstants {
    pub log_kn_exact: f64,
    pub log_kn_asymptotic: f64,
    pub log_cnh_asymptotic: f64,
}

/// `log|K_N|` exactly and asymptotically, and `log|c_{N,H}|` asymptotically.
pub fn k_n_constants(n: usize, h: usize, nu_sq: f64) -> Result<KnConstants> {
    if n < 3 {
        return Err(invalid("N must be at least 3"));
    }
    check_h(h)?;
    let nf = n as f64;
    let hf = h as f64;
    let log_kn_exact = (nf + 3.0) * nf.ln() - ln_gamma(nf / 2.0) - ln_gamma((nf - 1.0) / 2.0) - 1.5 * PI.ln();
    let log_kn_asymptotic = 4.5 * nf.ln() + nf * (2.0f64.ln() + 1.0) - (4.0 * SQRT_2).ln() - 2.5 * PI.ln();
    let log_cnh_asymptotic = 5.0 * nf.ln() + 1.5 * (nf - 1.0) * (2.0f64.ln() + 1.0) + 0.5 * nf * (hf - 1.0).ln()
        - nu_sq / (2.0 * hf)
        - (4.0 * PI.powi(3) * hf.sqrt()).ln();
    Ok(KnConstants { log_kn_exact, log_kn_asymptotic, log_cnh_asymptotic })
}

/// `log Z_N` for `Z_N = (1/N!)(2√2)^N N^{−N(N+1)/4} ∏_{i≤N} Γ(1+i/2)`.
pub fn log_selberg_z(n: usize) -> f64 {
    let nf = n as f64;
    let mut acc = -ln_gamma(nf + 1.0) + nf * (2.0 * SQRT_2).ln() - nf * (nf + 1.0) / 4.0 * nf.ln();
    for i in 1..=n {
        acc += ln_gamma(1.0 + i as f64 / 2.0);
    }
    acc
}

/// `N^{−1} log T_{N,k}` with `T_{N,k} = Z_{N−k}/(k! Z_N) · ((N−k)/N)^{(N + N(N+1)/2)/2}`.
pub fn selberg_t(n: usize, k: usize) -> Result<f64> {
    if k >= n {
        return Err(invalid(format!("need k < N, got k = {k}, N = {n}")));
    }
    if k == 0 {
        return Ok(0.0);
    }
    let nf = n as f64;
    let ratio = ((nf - k as f64) / nf).ln();
    let log_t =
        log_selberg_z(n - k) - ln_gamma(k as f64 + 1.0) - log_selberg_z(n) + 0.5 * (nf + nf * (nf + 1.0) / 2.0) * ratio;
    Ok(log_t / nf)
}

#[derive(Clone, Debug, Serialize)]
pub struct PsiDiagnostics {
    pub x: f64,
    /// `|ψ′(z)|` at the (+) and (−) saddles.
    pub grad_residual_plus: f64,
    pub grad_residual_minus: f64,
    /// `|ψ″(z) − i√(x²−2)/z|` at the two saddles.
    pub second_residual_plus: f64,
    pub second_residual_minus: f64,
    /// `4ψ⁺(z⁺) + 2ψ⁻(z⁻) − (H+1)x²/H`.
    pub phi4: (f64, f64),
    /// `|Φ₍₄₎ − [(3/2)(1+log 2) + ((H−2)/2H)x² + I₁(x;√2) − log i]|`.
    pub phi4_residual: f64,
}

/// `ψ^{(±)}(z) = ½z² ± ixz − ½ log z` with the principal logarithm.
pub fn psi(z: Complex64, x: f64, sign: f64) -> Complex64 {
    0.5 * z * z + sign * Complex64::i() * x * z - 0.5 * z.ln()
}

/// Saddle `z^{(±)} = (∓ix + i√(x²−2))/2` for `x < −√2`.
///
/// For `x < −√2` the saddles sit on the imaginary axis, `z⁺` above the
/// origin and `z⁻` below, so neither touches the principal cut of `log z`
/// on the negative real axis.
pub fn psi_saddle(x: f64, sign: f64) -> Complex64 {
    let r = (x * x - 2.0).sqrt();
    Complex64::new(0.0, 0.5 * (-sign * x + r))
}

pub fn psi_saddle_check(x: f64, h: usize) -> Result<PsiDiagnostics> {
    if !(x < -SQRT_2) {
        return Err(domain(format!("saddle analysis needs x < −√2, got {x}")));
    }
    check_h(h)?;
    let hf = h as f64;
    let i = Complex64::i();
    let r = (x * x - 2.0).sqrt();
    let zp = psi_saddle(x, 1.0);
    let zm = psi_saddle(x, -1.0);
    let dpsi = |z: Complex64, s: f64| z + s * i * x - 0.5 / z;
    let d2psi = |z: Complex64| 1.0 + 0.5 / (z * z);
    let phi4 = 4.0 * psi(zp, x, 1.0) + 2.0 * psi(zm, x, -1.0) - (hf + 1.0) / hf * x * x;
    let target = Complex64::new(1.5 * (1.0 + LN_2) + (hf - 2.0) / (2.0 * hf) * x * x + i1(x, SQRT_2)?, 0.0) - i.ln();
    Ok(PsiDiagnostics {
        x,
        grad_residual_plus: dpsi(zp, 1.0).norm(),
        grad_residual_minus: dpsi(zm, -1.0).norm(),
        second_residual_plus: (d2psi(zp) - i * r / zp).norm(),
        second_residual_minus: (d2psi(zm) - i * r / zm).norm(),
        phi4: (phi4.re, phi4.im),
        phi4_residual: (phi4 - target).norm(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn e_infinity_values() {
        assert!((e_infinity(2) - SQRT_2).abs() < 1e-15);
        assert!((e_infinity(3) - 1.632993).abs() < 1e-6);
        assert!((e_infinity(20) - 1.949359).abs() < 1e-6);
    }

    #[test]
    fn i1_examples() {
        assert_eq!(i1(-2.0, 2.0).unwrap(), 0.0);
        assert!((i1(-2.0, SQRT_2).unwrap() - 0.532839).abs() < 1e-6);
        assert!((i1_prime(-2.0, SQRT_2).unwrap() + SQRT_2).abs() < 1e-12);
        assert!(i1(-1.0, SQRT_2).is_err());
    }

    #[test]
    fn theta_plateau_and_continuity() {
        let e = e_infinity(20);
        assert_eq!(theta_h(20, 0.3).unwrap(), 0.5 * 19f64.ln());
        let below = theta_h(20, -e).unwrap();
        let above = theta_h(20, -e + 1e-12).unwrap();
        assert!((below - above).abs() < 1e-10);
        for k in 0..4 {
            let a = theta_hk(20, k, -e).unwrap();
            let want = 0.5 * 19f64.ln() - 18.0 / 20.0;
            assert!((a - want).abs() < 1e-12);
        }
        assert!(theta_h(2, 0.0).is_err());
    }

    #[test]
    fn h_aux_examples() {
        assert!((h_aux(2.0).unwrap() - 2.197368).abs() < 1e-6);
        assert!((h_aux(1e6).unwrap() - 2.0).abs() < 1e-6);
        assert!(h_aux(SQRT_2).is_err());
    }

    #[test]
    fn q_theta_forms() {
        assert!((q_theta(0.0, QForm::Corrected) - 1.0).abs() < 1e-15);
        assert!((q_theta(PI / 4.0, QForm::Corrected) - 1.0).abs() < 1e-15);
        assert!((q_theta(0.0, QForm::Printed) - 1.75).abs() < 1e-15);
    }

    #[test]
    fn t_is_one_without_deformation() {
        assert_eq!(t_of_v_s1(2.0, 0.0, 64, QForm::Corrected).unwrap(), 1.0);
        let a = t_of_v_s1(2.3, 0.2, 64, QForm::Printed).unwrap();
        let b = t_of_v_s1(2.3, 0.2, 128, QForm::Printed).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn selberg_trivial_k() {
        assert_eq!(selberg_t(10, 0).unwrap(), 0.0);
        assert!(selberg_t(10, 10).is_err());
    }
}
