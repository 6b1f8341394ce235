//! Fast invariant suite: identities, trivial cases and small oracles.

use spinscape::complexity::{band_thresholds, e_infinity, h_aux, h_aux_alt, h_aux_quarter, i1};
use spinscape::kacrice::{enumerate_critical_points, kacrice_indexed, kacrice_total, EnumConfig, KacRiceConfig};
use spinscape::netprobe::{gaussian_data, probe_counts, ChiDenominator};
use spinscape::piecewise::{path_expand, Mlp, PiecewiseLinear};
use spinscape::rmt::{
    expected_abs_det, fyodorov_rhs_quad, goe, interlacing_check, y_integral_mc, DeformedEnsemble, HaarFactor, LowRank,
};
use spinscape::surrogate::{covariance_mc, SurrogateSample, SurrogateSpec};
use std::f64::consts::PI;
use std::time::Instant;

type Check = fn() -> Result<String, String>;

const CHECKS: &[(&str, Check)] = &[
    ("band thresholds at H=20", thresholds),
    ("auxiliary h forms agree", h_forms),
    ("rate function vanishes at the edge", rate_edge),
    ("Y integral at zero power", y_zero),
    ("1x1 determinant is folded normal", folded_normal),
    ("unit variance of the surrogate", unit_variance),
    ("Gaussian integral without deformation", rhs_plain),
    ("interlacing under rank-2 updates", interlacing),
    ("path expansion equals forward pass", paths),
    ("index partition sums to total", partition),
    ("deterministic part has two critical points", deterministic_only),
    ("piece ratios stay in [0, 1]", ratios),
];

pub struct Outcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

pub fn run() -> Vec<Outcome> {
    CHECKS
        .iter()
        .map(|&(name, f)| {
            let t = Instant::now();
            let r = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
            let (passed, detail) = match r {
                Ok(d) => (true, d),
                Err(d) => (false, d),
            };
            Outcome { name, passed, detail, seconds: t.elapsed().as_secs_f64() }
        })
        .collect()
}

fn ensure(ok: bool, detail: String) -> Result<String, String> {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

fn thresholds() -> Result<String, String> {
    let want = [2.3406789983, 2.2674297330, 2.2223086641, 2.1910094644];
    let t = band_thresholds(20, 3).map_err(e)?;
    let worst = t.thresholds.iter().zip(want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let ordered = t.thresholds.windows(2).all(|w| w[0] > w[1]) && t.thresholds[3] > t.e_inf;
    ensure(worst < 1e-8 && ordered, format!("max deviation {worst:.1e}"))
}

fn h_forms() -> Result<String, String> {
    let mut worst = 0.0f64;
    for v in [1.5, 2.0, 3.0, 7.5] {
        let a = h_aux(v).map_err(e)?;
        worst = worst.max((a - h_aux_quarter(v)).abs() / a).max((a - h_aux_alt(v)).abs() / a);
    }
    ensure(worst < 1e-12, format!("max relative gap {worst:.1e}"))
}

fn rate_edge() -> Result<String, String> {
    let einf = e_infinity(5);
    let v = i1(-einf, einf).map_err(e)?;
    ensure(v.abs() < 1e-14, format!("I1(-E_inf) = {v:.1e}"))
}

fn y_zero() -> Result<String, String> {
    let (y, _) = y_integral_mc(2, 0.0, 500, 1).map_err(e)?;
    ensure((y - 2.0 * PI).abs() < 1e-12, format!("{y}"))
}

fn folded_normal() -> Result<String, String> {
    let s = expected_abs_det(&DeformedEnsemble::new(1, 0.0, None).map_err(e)?, 40_000, 7).map_err(e)?;
    let z = (s.mean() - (2.0 / PI).sqrt()) / s.stderr();
    ensure(z.abs() < 4.0, format!("z = {z:.2}"))
}

fn unit_variance() -> Result<String, String> {
    let spec = SurrogateSpec::new(3, 4, vec![0.3, 0.1, 0.0]).map_err(e)?;
    let w = [0.5; 4];
    let (c, se) = covariance_mc(&spec, &w, &w, 4000, 3).map_err(e)?;
    let z = (c - 1.0) / se;
    ensure(z.abs() < 4.0, format!("{c:.4} ± {se:.4}"))
}

fn rhs_plain() -> Result<String, String> {
    let f = |q: &nalgebra::DMatrix<f64>| (-q.trace()).exp();
    let r = fyodorov_rhs_quad(6, 1, &f, &LowRank::zero(), HaarFactor::Asymptotic).map_err(e)?;
    let rel = (r.re / PI.powi(3) - 1.0).abs();
    ensure(rel < 1e-8, format!("relative error {rel:.1e}"))
}

fn interlacing() -> Result<String, String> {
    let n = 30;
    let m = goe(n, 5);
    let u = nalgebra::DVector::from_fn(n, |i, _| ((i + 1) as f64).sin()).normalize();
    let v = nalgebra::DVector::from_fn(n, |i, _| ((i + 2) as f64).cos()).normalize();
    let r = interlacing_check(&m, &[(2.0, u), (-1.5, v)], 0.1);
    ensure(r.interlacing_violations == 0 && r.index_bound_violations == 0, format!("{r:?}"))
}

fn paths() -> Result<String, String> {
    let net = Mlp::random(&[3, 4, 2], PiecewiseLinear::hard_tanh(), 9).map_err(e)?;
    let x = [0.3, -0.7, 1.1];
    let a = path_expand(&net, &x).map_err(e)?;
    let b = net.forward(&x).map_err(e)?.output;
    let gap = a.iter().zip(&b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
    ensure(gap < 1e-12, format!("max gap {gap:.1e}"))
}

fn partition() -> Result<String, String> {
    let mut cfg = KacRiceConfig::new(SurrogateSpec::new(3, 4, vec![0.2, 0.1, 0.0]).map_err(e)?, 0.5);
    cfg.samples = 400;
    cfg.nodes = 32;
    let total = kacrice_total(&cfg).map_err(e)?.estimate;
    let mut sum = 0.0;
    for k in 0..4 {
        sum += kacrice_indexed(&cfg, &[k]).map_err(e)?.estimate;
    }
    ensure((sum - total).abs() <= 1e-10 * total, format!("total {total:.4}, sum {sum:.4}"))
}

fn deterministic_only() -> Result<String, String> {
    let spec = SurrogateSpec::new(3, 3, vec![0.1, 1.0, 0.0]).map_err(e)?;
    let sample = SurrogateSample::from_coefficients(&spec, vec![0.0; 27]).map_err(e)?;
    let cfg = EnumConfig { grid_density: 60, check_stability: false, ..Default::default() };
    let found = enumerate_critical_points(&sample, &cfg).map_err(e)?.points.len();
    ensure(found == 2, format!("{found} points"))
}

fn ratios() -> Result<String, String> {
    let net = Mlp::random(&[5, 7, 3], PiecewiseLinear::hard_tanh(), 4).map_err(e)?;
    let data = gaussian_data(64, 5, 8).map_err(e)?;
    let r = probe_counts(&net, &data, ChiDenominator::AllPieces, "gaussian").map_err(e)?;
    // pieces 2..L only, so per-datum sums are at most 1
    let sums: Vec<f64> = (0..data.nrows()).map(|i| r.neuron_averaged.iter().map(|s| s.values[i]).sum()).collect();
    let ok = r.neuron_averaged.len() == 2 && sums.iter().all(|s| (0.0..=1.0 + 1e-12).contains(s));
    ensure(
        ok,
        format!(
            "{} ratio sets, largest sum {:.3}",
            r.neuron_averaged.len(),
            sums.iter().fold(0.0f64, |a, b| a.max(*b))
        ),
    )
}
