//! Finite-N Kac-Rice counts for the surrogate, and a Newton enumerator of
//! critical points on the spheres S² and S³ that checks them.

use crate::complexity::band_thresholds;
use crate::error::{invalid, Error, Result};
use crate::mc::{map_chunks, LogMoments};
use crate::numeric::{gl_nodes, ln_gamma, log_sum_exp};
use crate::rmt::sample_goe;
use crate::surrogate::{conditional_hessian_params_with, HessianModel, SurrogateSample, SurrogateSpec, XiConvention};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;
use std::f64::consts::PI;

/// The energy window is split into this many equal panels.
const PANELS: usize = 8;
/// Half-width of the energy window in standard deviations.
const WINDOW: f64 = 8.0;

#[derive(Clone, Debug, Serialize)]
pub struct KacRiceConfig {
    pub spec: SurrogateSpec,
    /// Count critical points with `h ≤ √N u`.
    pub u: f64,
    /// Total Gauss-Legendre nodes over the energy window.
    pub nodes: usize,
    /// Monte-Carlo matrices; every matrix is reused at every node.
    pub samples: usize,
    pub seed: u64,
    pub xi: XiConvention,
}

impl KacRiceConfig {
    pub fn new(spec: SurrogateSpec, u: f64) -> Self {
        KacRiceConfig { spec, u, nodes: 64, samples: 4000, seed: 0, xi: XiConvention::Standard }
    }

    fn validate(&self) -> Result<()> {
        if self.spec.n < 3 {
            return Err(invalid("Kac-Rice needs N >= 3"));
        }
        if self.spec.h < 2 {
            return Err(invalid("Kac-Rice needs H >= 2"));
        }
        if self.nodes < 16 {
            return Err(invalid("need at least 16 quadrature nodes"));
        }
        if self.samples < 100 {
            return Err(invalid("need at least 100 Monte-Carlo samples"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct NodeDiagnostic {
    /// Raw energy `h` at the node.
    pub y: f64,
    /// Shift of the GOE part at this energy.
    pub shift: f64,
    pub log_weight: f64,
    /// `log E|det(M − shift·I + S)|` (restricted to the index set, if any).
    pub log_mean_det: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct KacRiceReport {
    pub config: KacRiceConfig,
    pub index_set: Option<Vec<usize>>,
    pub log_omega: f64,
    pub log_estimate: f64,
    pub estimate: f64,
    pub stderr: f64,
    pub nodes: Vec<NodeDiagnostic>,
}

/// `log ω_N = log(2π^{N/2}/Γ(N/2))`, the area of the unit sphere in ℝ^N.
pub fn log_sphere_area(n: usize) -> f64 {
    (2.0f64).ln() + 0.5 * n as f64 * PI.ln() - ln_gamma(n as f64 / 2.0)
}

/// `log Ω_N` with `Ω_N = (2(N−1)H(H−1))^{(N−1)/2} ω_N e^{−‖ν‖²/2H}/(2πH)^{(N−1)/2}`.
pub fn log_omega(model: &HessianModel) -> f64 {
    let d = (model.n - 1) as f64;
    let hf = model.h as f64;
    -d * model.prefactor.ln() + log_sphere_area(model.n) - model.nu_sq() / (2.0 * hf) - 0.5 * d * (2.0 * PI * hf).ln()
}

/// Composite Gauss-Legendre nodes on `[lo, hi]` as `(y, log(w φ(y − mean)))`
/// with `φ` the standard normal density.
fn energy_nodes(lo: f64, hi: f64, mean: f64, nodes: usize) -> Vec<(f64, f64)> {
    if !(hi > lo) {
        return Vec::new();
    }
    let per = nodes.div_ceil(PANELS);
    let width = (hi - lo) / PANELS as f64;
    (0..PANELS)
        .flat_map(|p| gl_nodes(lo + p as f64 * width, lo + (p + 1) as f64 * width, per))
        .map(|(y, w)| (y, w.ln() - 0.5 * (y - mean).powi(2) - 0.5 * (2.0 * PI).ln()))
        .collect()
}

/// Energy window for a Gaussian of unit variance centred at `mean`, cut at `cut`.
fn window(mean: f64, cut: f64) -> (f64, f64) {
    (mean.min(cut) - WINDOW, cut.min(mean + WINDOW))
}

/// Per-sample node terms `log(w_j φ_j) + Σ log|λ_i − x_j|`, with `−∞` where
/// the index `#{λ_i < x_j}` falls outside `k_set`.
fn node_terms(
    eigs: &[f64],
    nodes: &[(f64, f64)],
    shift: impl Fn(f64) -> f64,
    k_set: Option<&[usize]>,
    out: &mut Vec<f64>,
) {
    out.clear();
    for &(y, lw) in nodes {
        let x = shift(y);
        if let Some(k) = k_set {
            let idx = eigs.iter().filter(|&&l| l < x).count();
            if !k.contains(&idx) {
                out.push(f64::NEG_INFINITY);
                continue;
            }
        }
        out.push(lw + eigs.iter().map(|l| (l - x).abs().ln()).sum::<f64>());
    }
}

struct Accum {
    total: LogMoments,
    per_node: Vec<LogMoments>,
}

impl Accum {
    fn new(nodes: usize) -> Self {
        Accum { total: LogMoments::default(), per_node: vec![LogMoments::default(); nodes] }
    }

    fn push(&mut self, terms: &[f64], extra: f64) {
        for (m, &t) in self.per_node.iter_mut().zip(terms) {
            m.push(t + extra);
        }
        self.total.push(if terms.is_empty() { f64::NEG_INFINITY } else { log_sum_exp(terms) + extra });
    }

    fn reduce(parts: Vec<Accum>, nodes: usize) -> Accum {
        let mut out = Accum::new(nodes);
        for p in parts {
            out.total.merge(&p.total);
            for (a, b) in out.per_node.iter_mut().zip(&p.per_node) {
                a.merge(b);
            }
        }
        out
    }
}

fn run(cfg: &KacRiceConfig, k_set: Option<&[usize]>) -> Result<KacRiceReport> {
    cfg.validate()?;
    let model = conditional_hessian_params_with(&cfg.spec, cfg.xi);
    let d = cfg.spec.n - 1;
    let cut = (cfg.spec.n as f64).sqrt() * cfg.u;
    let (lo, hi) = window(model.xi0, cut);
    let nodes = energy_nodes(lo, hi, model.xi0, cfg.nodes);
    let s = model.s_matrix();
    let shift = |y: f64| model.goe_shift(y);
    let parts = map_chunks(cfg.seed, cfg.samples, |rng, _, count| {
        let mut acc = Accum::new(nodes.len());
        let mut terms = Vec::with_capacity(nodes.len());
        for _ in 0..count {
            let m = sample_goe(d, rng) + &s;
            let ev = SymmetricEigen::new(m).eigenvalues;
            node_terms(ev.as_slice(), &nodes, shift, k_set, &mut terms);
            acc.push(&terms, 0.0);
        }
        acc
    });
    let acc = Accum::reduce(parts, nodes.len());
    let log_omega = log_omega(&model);
    let log_estimate = log_omega + acc.total.log_mean();
    let estimate = log_estimate.exp();
    let diagnostics = nodes
        .iter()
        .zip(&acc.per_node)
        .map(|(&(y, lw), m)| NodeDiagnostic { y, shift: shift(y), log_weight: lw, log_mean_det: m.log_mean() - lw })
        .collect();
    Ok(KacRiceReport {
        config: cfg.clone(),
        index_set: k_set.map(|k| k.to_vec()),
        log_omega,
        log_estimate,
        estimate,
        stderr: estimate * acc.total.rel_stderr(),
        nodes: diagnostics,
    })
}

/// Expected number of critical points with `h ≤ √N u`.
///
/// The energy integral runs over the raw value `y ~ N(ξ₀, 1)` at the
/// reference point; `y` maps to the GOE shift `H(y − ξ₀)/√(2(N−1)H(H−1))`.
/// Each sampled matrix is diagonalised once and reused at every node.
pub fn kacrice_total(cfg: &KacRiceConfig) -> Result<KacRiceReport> {
    run(cfg, None)
}

/// As [`kacrice_total`], restricted to critical points whose index lies in `k_set`.
pub fn kacrice_indexed(cfg: &KacRiceConfig, k_set: &[usize]) -> Result<KacRiceReport> {
    run(cfg, Some(k_set))
}

/// Kac-Rice count averaged over the whole sphere instead of factored at one
/// reference point.
///
/// The deterministic part of `h` depends on `Σ w_i`, so the integrand varies
/// over the sphere. Here `w` is drawn uniformly and the mean gradient, mean
/// Riemannian Hessian and mean value are taken at `w` itself. For `ρ ≡ 0` it
/// coincides with [`kacrice_total`].
pub fn kacrice_sphere(cfg: &KacRiceConfig, k_set: Option<&[usize]>) -> Result<KacRiceReport> {
    cfg.validate()?;
    let spec = &cfg.spec;
    let (n, d) = (spec.n, spec.n - 1);
    let hf = spec.h as f64;
    let c = (2.0 * d as f64 * hf * (hf - 1.0)).sqrt();
    let cut = (n as f64).sqrt() * cfg.u;
    let log_gauss_norm = -0.5 * d as f64 * (2.0 * PI * hf).ln();
    let parts = map_chunks(cfg.seed, cfg.samples, |rng, _, count| {
        let mut acc = Accum::new(0);
        let mut terms = Vec::new();
        for _ in 0..count {
            let w = uniform_sphere(n, rng);
            let s: f64 = w.iter().sum();
            let (m0, d1, d2) = spec.mean_term(s);
            let wv = DVector::from_column_slice(&w);
            let ones = DVector::from_element(n, 1.0);
            let grad = &ones * d1;
            let lagrange = wv.dot(&grad);
            let g = &grad - &wv * lagrange;
            let basis = crate::surrogate::tangent_basis(&w);
            let hm = DMatrix::from_element(n, n, d2) - DMatrix::identity(n, n) * lagrange;
            let hm = basis.transpose() * hm * &basis;
            // scaled so that the shift takes the same form as in `run`
            let a = sample_goe(d, rng) + (&hm + hm.transpose()) * (0.5 / c);
            let ev = SymmetricEigen::new(a).eigenvalues;
            let (lo, hi) = window(0.0, cut - m0);
            let nodes = energy_nodes(lo, hi, 0.0, cfg.nodes);
            node_terms(ev.as_slice(), &nodes, |y| hf * y / c, k_set, &mut terms);
            acc.push(&terms, log_gauss_norm - g.norm_squared() / (2.0 * hf));
        }
        acc
    });
    let acc = Accum::reduce(parts, 0);
    let log_omega = d as f64 * c.ln() + log_sphere_area(n);
    let log_estimate = log_omega + acc.total.log_mean();
    let estimate = log_estimate.exp();
    Ok(KacRiceReport {
        config: cfg.clone(),
        index_set: k_set.map(|k| k.to_vec()),
        log_omega,
        log_estimate,
        estimate,
        stderr: estimate * acc.total.rel_stderr(),
        nodes: Vec::new(),
    })
}

fn uniform_sphere<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CriticalPoint {
    pub w: Vec<f64>,
    pub value: f64,
    pub lagrange: f64,
    pub index: usize,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct EnumConfig {
    /// Seed points on the sphere before adding antipodes.
    pub grid_density: usize,
    /// Riemannian gradient norm a point must reach to be kept.
    pub newton_tol: f64,
    pub max_iter: usize,
    /// Also run at twice the grid density and flag a count change.
    pub check_stability: bool,
}

impl Default for EnumConfig {
    fn default() -> Self {
        EnumConfig { grid_density: 200, newton_tol: 1e-10, max_iter: 100, check_stability: true }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Enumeration {
    pub points: Vec<CriticalPoint>,
    /// Count at the base density and at twice the density (if checked).
    pub counts: (usize, Option<usize>),
    pub stable: bool,
}

const DEDUP_TOL: f64 = 1e-6;

/// Quasi-uniform points: a Fibonacci lattice on S², Hopf coordinates driven by
/// an additive recurrence on S³.
pub fn sphere_grid(n: usize, count: usize) -> Result<Vec<Vec<f64>>> {
    match n {
        3 => {
            let golden = PI * (3.0 - 5f64.sqrt());
            Ok((0..count)
                .map(|i| {
                    let z = 1.0 - (2.0 * i as f64 + 1.0) / count as f64;
                    let r = (1.0 - z * z).sqrt();
                    let t = golden * i as f64;
                    vec![r * t.cos(), r * t.sin(), z]
                })
                .collect())
        }
        4 => {
            // 1/φ₃^k for the root φ₃ of x⁴ = x + 1
            let phi = 1.220_744_084_605_759_5_f64;
            let alpha = [1.0 / phi, 1.0 / (phi * phi), 1.0 / phi.powi(3)];
            Ok((0..count)
                .map(|i| {
                    let u: Vec<f64> = alpha.iter().map(|a| (0.5 + a * (i + 1) as f64).fract()).collect();
                    let eta = u[0].sqrt().asin();
                    let (x1, x2) = (2.0 * PI * u[1], 2.0 * PI * u[2]);
                    vec![eta.sin() * x1.cos(), eta.sin() * x1.sin(), eta.cos() * x2.cos(), eta.cos() * x2.sin()]
                })
                .collect())
        }
        _ => Err(invalid(format!("enumeration supports N in {{3, 4}}, got {n}"))),
    }
}

fn residual(sample: &SurrogateSample, w: &DVector<f64>, lambda: f64) -> (DVector<f64>, DMatrix<f64>) {
    let n = w.len();
    let (_, g, hm) = sample.derivatives(w.as_slice(), true);
    let mut f = DVector::zeros(n + 1);
    f.rows_mut(0, n).copy_from(&(g - w * lambda));
    f[n] = 0.5 * (w.dot(w) - 1.0);
    let mut j = DMatrix::zeros(n + 1, n + 1);
    j.view_mut((0, 0), (n, n)).copy_from(&(hm - DMatrix::identity(n, n) * lambda));
    for i in 0..n {
        j[(i, n)] = -w[i];
        j[(n, i)] = w[i];
    }
    (f, j)
}

/// Damped Newton on `∇h(w) = λw, |w|² = 1` from one seed.
fn newton(sample: &SurrogateSample, seed: &[f64], cfg: &EnumConfig) -> Option<CriticalPoint> {
    let n = seed.len();
    let mut w = DVector::from_column_slice(seed);
    let (_, g, _) = sample.derivatives(seed, false);
    let mut lambda = w.dot(&g);
    let (mut f, mut j) = residual(sample, &w, lambda);
    for _ in 0..cfg.max_iter {
        let fnorm = f.norm();
        if fnorm < 1e-14 {
            break;
        }
        let step = j.clone().lu().solve(&(-&f))?;
        let mut t = 1.0;
        loop {
            let w_new = &w + step.rows(0, n) * t;
            let l_new = lambda + step[n] * t;
            let (f_new, j_new) = residual(sample, &w_new, l_new);
            if f_new.norm() <= (1.0 - 1e-4 * t) * fnorm || t < 1e-8 {
                w = w_new;
                lambda = l_new;
                f = f_new;
                j = j_new;
                break;
            }
            t *= 0.5;
        }
    }
    let norm = w.norm();
    if !norm.is_finite() || norm < 1e-8 {
        return None;
    }
    w /= norm;
    let r = sample.riemannian(w.as_slice()).ok()?;
    let grad_norm = r.grad.norm();
    if grad_norm > cfg.newton_tol {
        return None;
    }
    let index = SymmetricEigen::new(r.hess).eigenvalues.iter().filter(|&&l| l < 0.0).count();
    Some(CriticalPoint {
        w: w.as_slice().to_vec(),
        value: sample.eval(w.as_slice()).ok()?,
        lagrange: r.lagrange,
        index,
        grad_norm,
    })
}

fn dedup(points: impl IntoIterator<Item = CriticalPoint>, into: &mut Vec<CriticalPoint>) {
    for p in points {
        let seen =
            into.iter().any(|q| q.w.iter().zip(&p.w).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() < DEDUP_TOL);
        if !seen {
            into.push(p);
        }
    }
}

fn enumerate_at(sample: &SurrogateSample, density: usize, cfg: &EnumConfig) -> Result<Vec<CriticalPoint>> {
    let grid = sphere_grid(sample.spec().n, density)?;
    let seeds: Vec<Vec<f64>> = grid.iter().flat_map(|p| [p.clone(), p.iter().map(|x| -x).collect()]).collect();
    let found: Vec<Option<CriticalPoint>> = seeds.par_iter().map(|s| newton(sample, s, cfg)).collect();
    let mut out = Vec::new();
    dedup(found.into_iter().flatten(), &mut out);
    Ok(out)
}

/// All critical points of `h` on the unit sphere reachable by Newton from a
/// quasi-uniform seed grid, sorted by value.
pub fn enumerate_critical_points(sample: &SurrogateSample, cfg: &EnumConfig) -> Result<Enumeration> {
    if cfg.grid_density == 0 {
        return Err(invalid("grid density must be positive"));
    }
    let mut points = enumerate_at(sample, cfg.grid_density, cfg)?;
    let base = points.len();
    let doubled = if cfg.check_stability {
        let more = enumerate_at(sample, 2 * cfg.grid_density, cfg)?;
        let count = more.len();
        dedup(more, &mut points);
        Some(count)
    } else {
        None
    };
    points.sort_by(|a, b| {
        a.value
            .total_cmp(&b.value)
            .then_with(|| a.w.iter().zip(&b.w).fold(std::cmp::Ordering::Equal, |o, (x, y)| o.then(x.total_cmp(y))))
    });
    let stable = doubled.is_none_or(|c| c == base && points.len() == base);
    Ok(Enumeration { points, counts: (base, doubled), stable })
}

#[derive(Clone, Debug, Serialize)]
pub struct Band {
    pub lo: f64,
    pub hi: f64,
    /// `counts[i]` critical points of index `i`.
    pub counts: Vec<u64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct CensusTable {
    #[serde(rename = "H")]
    pub h: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub samples: usize,
    pub unstable_samples: usize,
    pub bands: Vec<Band>,
}

impl CensusTable {
    /// Long format, header `band_lo,band_hi,index,count`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("band_lo,band_hi,index,count\n");
        for b in &self.bands {
            for (i, c) in b.counts.iter().enumerate() {
                s.push_str(&format!("{},{},{},{}\n", b.lo, b.hi, i, c));
            }
        }
        s
    }
}

/// Index distribution of enumerated critical points, binned by `h/√N`
/// against the band edges `−E_0 < −E_1 < … < −E_{k_max} < −E_∞`.
pub fn band_census(
    samples: usize,
    spec: &SurrogateSpec,
    cfg: &EnumConfig,
    k_max: usize,
    seed: u64,
) -> Result<CensusTable> {
    let table = band_thresholds(spec.h, k_max)?;
    let mut edges = vec![f64::NEG_INFINITY];
    edges.extend(table.thresholds.iter().map(|e| -e));
    edges.push(-table.e_inf);
    edges.push(f64::INFINITY);
    let n = spec.n;
    let runs: Vec<Result<Enumeration>> = (0..samples)
        .into_par_iter()
        .map(|i| {
            let sample = SurrogateSample::build(spec, seed.wrapping_add(i as u64))?;
            enumerate_critical_points(&sample, cfg)
        })
        .collect();
    let mut bands: Vec<Band> = edges.windows(2).map(|e| Band { lo: e[0], hi: e[1], counts: vec![0; n] }).collect();
    let mut unstable = 0;
    let scale = (n as f64).sqrt();
    for run in runs {
        let run = run?;
        if !run.stable {
            unstable += 1;
        }
        for p in run.points {
            let u = p.value / scale;
            let b = bands
                .iter_mut()
                .find(|b| u > b.lo && u <= b.hi)
                .ok_or_else(|| Error::Domain(format!("value {u} not binned")))?;
            b.counts[p.index] += 1;
        }
    }
    Ok(CensusTable { h: spec.h, n, samples, unstable_samples: unstable, bands })
}
