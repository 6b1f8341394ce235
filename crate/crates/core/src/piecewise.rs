//! Piecewise-linear activations, MLP forward passes with piece tracking, the
//! path-sum expansion of a network, and the activation moments ρ, ρ_ℓ.

use crate::error::{invalid, Error, Result};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

const CONTINUITY_RTOL: f64 = 1e-12;

/// Continuous piecewise-linear function with `L` pieces. Piece `i` (1-based)
/// covers `(a_{i-1}, a_i]` with `a_0 = -inf` and `a_L = +inf`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseLinear {
    slopes: Vec<f64>,
    intercepts: Vec<f64>,
    breakpoints: Vec<f64>,
}

impl PiecewiseLinear {
    /// Validates a full set of slopes, intercepts and breakpoints.
    pub fn new(slopes: Vec<f64>, intercepts: Vec<f64>, breakpoints: Vec<f64>) -> Result<Self> {
        check_lengths(slopes.len(), intercepts.len(), breakpoints.len())?;
        check_breakpoints(&breakpoints)?;
        if slopes.iter().chain(&intercepts).any(|v| !v.is_finite()) {
            return Err(invalid("slopes and intercepts must be finite"));
        }
        for (i, &a) in breakpoints.iter().enumerate() {
            let left = slopes[i] * a + intercepts[i];
            let right = slopes[i + 1] * a + intercepts[i + 1];
            let jump = (left - right).abs();
            let scale = 1.0f64.max(left.abs()).max(right.abs());
            if jump > CONTINUITY_RTOL * scale {
                return Err(Error::Continuity { index: i + 1, jump });
            }
        }
        Ok(PiecewiseLinear { slopes, intercepts, breakpoints })
    }

    /// Builds the pieces from `β_1` alone, recovering the other intercepts from
    /// continuity: `β_{i+1} = β_i + (α_i − α_{i+1}) a_i`.
    pub fn from_first_intercept(slopes: Vec<f64>, beta1: f64, breakpoints: Vec<f64>) -> Result<Self> {
        check_lengths(slopes.len(), slopes.len(), breakpoints.len())?;
        check_breakpoints(&breakpoints)?;
        let mut intercepts = Vec::with_capacity(slopes.len());
        intercepts.push(beta1);
        for (i, &a) in breakpoints.iter().enumerate() {
            let next = intercepts[i] + (slopes[i] - slopes[i + 1]) * a;
            intercepts.push(next);
        }
        PiecewiseLinear::new(slopes, intercepts, breakpoints)
    }

    pub fn relu() -> Self {
        PiecewiseLinear::new(vec![0.0, 1.0], vec![0.0, 0.0], vec![0.0]).expect("valid")
    }

    pub fn hard_tanh() -> Self {
        PiecewiseLinear::new(vec![0.0, 1.0, 0.0], vec![-1.0, 0.0, 1.0], vec![-1.0, 1.0]).expect("valid")
    }

    /// Identity split at 0 into two pieces, so that piece indices record the sign.
    pub fn identity_split() -> Self {
        PiecewiseLinear::new(vec![1.0, 1.0], vec![0.0, 0.0], vec![0.0]).expect("valid")
    }

    /// Single affine piece `αx + β`.
    pub fn affine(alpha: f64, beta: f64) -> Self {
        PiecewiseLinear::new(vec![alpha], vec![beta], vec![]).expect("valid")
    }

    pub fn pieces(&self) -> usize {
        self.slopes.len()
    }

    pub fn slopes(&self) -> &[f64] {
        &self.slopes
    }

    pub fn intercepts(&self) -> &[f64] {
        &self.intercepts
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn max_abs_slope(&self) -> f64 {
        self.slopes.iter().fold(0.0, |m, s| m.max(s.abs()))
    }

    /// 1-based index of the piece containing `x`.
    pub fn piece_index(&self, x: f64) -> usize {
        // first breakpoint with x <= a_i; intervals are closed on the right
        self.breakpoints.partition_point(|&a| a < x) + 1
    }

    pub fn eval(&self, x: f64) -> f64 {
        let j = self.piece_index(x) - 1;
        self.slopes[j] * x + self.intercepts[j]
    }

    /// Parses `slopes=…`, `intercepts=…`, `breakpoints=…` lines. When the
    /// intercept list has a single entry and more than one piece is given,
    /// the remaining intercepts are recovered from continuity.
    pub fn parse_config(text: &str) -> Result<Self> {
        let mut slopes = None;
        let mut intercepts = None;
        let mut breakpoints = None;
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) =
                line.split_once('=').ok_or_else(|| invalid(format!("expected key=value, got `{line}`")))?;
            let list = parse_list(value)?;
            match key.trim() {
                "slopes" => slopes = Some(list),
                "intercepts" => intercepts = Some(list),
                "breakpoints" => breakpoints = Some(list),
                other => return Err(invalid(format!("unknown key `{other}`"))),
            }
        }
        let slopes = slopes.ok_or_else(|| invalid("missing slopes"))?;
        let intercepts = intercepts.ok_or_else(|| invalid("missing intercepts"))?;
        let breakpoints = breakpoints.unwrap_or_default();
        if intercepts.len() == 1 && slopes.len() > 1 {
            PiecewiseLinear::from_first_intercept(slopes, intercepts[0], breakpoints)
        } else {
            PiecewiseLinear::new(slopes, intercepts, breakpoints)
        }
    }
}

fn parse_list(value: &str) -> Result<Vec<f64>> {
    let value = value.trim();
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|t| t.trim().parse::<f64>().map_err(|e| invalid(format!("bad number `{t}`: {e}")))).collect()
}

fn check_lengths(slopes: usize, intercepts: usize, breakpoints: usize) -> Result<()> {
    if slopes == 0 || intercepts != slopes || breakpoints + 1 != slopes {
        return Err(invalid(format!(
            "need L slopes, L intercepts and L-1 breakpoints; got {slopes}, {intercepts}, {breakpoints}"
        )));
    }
    Ok(())
}

fn check_breakpoints(b: &[f64]) -> Result<()> {
    if b.iter().any(|v| !v.is_finite()) || b.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::NonMonotoneBreakpoints);
    }
    Ok(())
}

/// Piece probabilities π_1..π_L.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PieceDistribution {
    probabilities: Vec<f64>,
}

impl PieceDistribution {
    pub fn new(probabilities: Vec<f64>) -> Result<Self> {
        if probabilities.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(invalid("probabilities must be nonnegative"));
        }
        let total: f64 = probabilities.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(invalid(format!("probabilities sum to {total}, not 1")));
        }
        Ok(PieceDistribution { probabilities })
    }

    pub fn uniform(pieces: usize) -> Self {
        PieceDistribution { probabilities: vec![1.0 / pieces as f64; pieces] }
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationMoments {
    pub rho: f64,
    /// ρ_1..ρ_H after division by ρ.
    pub rho_l: Vec<f64>,
    pub h: usize,
}

/// `ρ = (Σπα)^H` and `ρ_ℓ = (Σπβ)(Σπα)^{H−ℓ} / ρ` under i.i.d. piece selection.
pub fn activation_moments(p: &PiecewiseLinear, d: &PieceDistribution, h: usize) -> Result<ActivationMoments> {
    if h < 2 {
        return Err(invalid("H must be at least 2"));
    }
    if d.probabilities.len() != p.pieces() {
        return Err(Error::Shape(format!("{} probabilities for {} pieces", d.probabilities.len(), p.pieces())));
    }
    let ea: f64 = d.probabilities.iter().zip(&p.slopes).map(|(pi, a)| pi * a).sum();
    let eb: f64 = d.probabilities.iter().zip(&p.intercepts).map(|(pi, b)| pi * b).sum();
    if ea == 0.0 {
        return Err(Error::DegenerateMoments);
    }
    let rho = ea.powi(h as i32);
    let rho_l = (1..=h).map(|l| eb * ea.powi((h - l) as i32) / rho).collect();
    Ok(ActivationMoments { rho, rho_l, h })
}

/// Result of fitting a piecewise-linear approximation.
#[derive(Clone, Debug)]
pub struct PiecewiseFit {
    pub pieces: PiecewiseLinear,
    /// Sup-norm error over the sample grid.
    pub error: f64,
    pub within_tolerance: bool,
}

const FIT_GRID: usize = 4001;

/// Fits an `L`-piece continuous approximation to `f` on `[lo, hi]`.
///
/// Knots start either uniform or at quantiles of the discrete curvature mass
/// of `f`. Knot positions and knot values are then refined by a pattern
/// search on the sup-norm error over a dense grid.
pub fn fit_piecewise(f: impl Fn(f64) -> f64, l: usize, domain: (f64, f64), eps: f64) -> Result<PiecewiseFit> {
    if l < 2 {
        return Err(invalid("need at least two pieces"));
    }
    let (lo, hi) = domain;
    if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
        return Err(invalid("empty domain"));
    }
    let grid: Vec<f64> = (0..FIT_GRID).map(|i| lo + (hi - lo) * i as f64 / (FIT_GRID - 1) as f64).collect();
    let fv: Vec<f64> = grid.iter().map(|&x| f(x)).collect();

    let uniform: Vec<f64> = (0..=l).map(|i| lo + (hi - lo) * i as f64 / l as f64).collect();
    let mut best_knots = uniform.clone();
    let mut best_err = sup_error(&best_knots, &knot_values(&f, &best_knots), &grid, &fv);
    if let Some(curv) = curvature_knots(&grid, &fv, l) {
        let e = sup_error(&curv, &knot_values(&f, &curv), &grid, &fv);
        if e < best_err {
            best_knots = curv;
            best_err = e;
        }
    }
    let mut knots = best_knots;
    let mut values = knot_values(&f, &knots);
    let mut err = best_err;

    let fmin = fv.iter().cloned().fold(f64::INFINITY, f64::min);
    let fmax = fv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut kstep = (hi - lo) / (4.0 * l as f64);
    let mut vstep = ((fmax - fmin) / 8.0).max(1e-3);
    let min_gap = (hi - lo) * 1e-6;
    let floor = (hi - lo) * 1e-12;
    let mut sweeps = 0;
    while err > 0.0 && (kstep > floor || vstep > 1e-14) && sweeps < 20_000 {
        sweeps += 1;
        let mut improved = false;
        for i in 1..l {
            for dir in [-1.0, 1.0] {
                let cand = knots[i] + dir * kstep;
                if cand <= knots[i - 1] + min_gap || cand >= knots[i + 1] - min_gap {
                    continue;
                }
                let old = knots[i];
                knots[i] = cand;
                let e = sup_error(&knots, &values, &grid, &fv);
                if e < err {
                    err = e;
                    improved = true;
                } else {
                    knots[i] = old;
                }
            }
        }
        for i in 0..=l {
            for dir in [-1.0, 1.0] {
                let old = values[i];
                values[i] = old + dir * vstep;
                let e = sup_error(&knots, &values, &grid, &fv);
                if e < err {
                    err = e;
                    improved = true;
                } else {
                    values[i] = old;
                }
            }
        }
        if !improved {
            kstep *= 0.5;
            vstep *= 0.5;
        }
    }

    let pieces = pieces_from_knots(&knots, &values)?;
    let err = fv.iter().zip(&grid).fold(0.0f64, |m, (&y, &x)| m.max((pieces.eval(x) - y).abs()));
    Ok(PiecewiseFit { pieces, error: err, within_tolerance: err <= eps })
}

fn knot_values(f: &impl Fn(f64) -> f64, knots: &[f64]) -> Vec<f64> {
    knots.iter().map(|&t| f(t)).collect()
}

fn sup_error(knots: &[f64], values: &[f64], grid: &[f64], fv: &[f64]) -> f64 {
    let mut seg = 0;
    let mut worst = 0.0f64;
    for (&x, &y) in grid.iter().zip(fv) {
        while seg + 2 < knots.len() && x > knots[seg + 1] {
            seg += 1;
        }
        let (x0, x1) = (knots[seg], knots[seg + 1]);
        let t = (x - x0) / (x1 - x0);
        let g = values[seg] + t * (values[seg + 1] - values[seg]);
        worst = worst.max((g - y).abs());
    }
    worst
}

/// Interior knots at quantiles of the absolute second difference of `f`.
fn curvature_knots(grid: &[f64], fv: &[f64], l: usize) -> Option<Vec<f64>> {
    let n = grid.len();
    let mass: Vec<f64> = (1..n - 1).map(|i| (fv[i + 1] - 2.0 * fv[i] + fv[i - 1]).abs()).collect();
    let total: f64 = mass.iter().sum();
    if !(total > 1e-12) {
        return None;
    }
    let mut knots = vec![grid[0]];
    let mut acc = 0.0;
    let mut next = 1;
    for (k, m) in mass.iter().enumerate() {
        acc += m;
        while next < l && acc >= total * (next as f64 - 0.5) / (l as f64 - 1.0) {
            knots.push(grid[k + 1]);
            next += 1;
        }
    }
    knots.push(grid[n - 1]);
    if knots.len() != l + 1 || knots.windows(2).any(|w| w[1] <= w[0]) {
        return None;
    }
    Some(knots)
}

fn pieces_from_knots(knots: &[f64], values: &[f64]) -> Result<PiecewiseLinear> {
    let l = knots.len() - 1;
    let slopes: Vec<f64> = (0..l).map(|i| (values[i + 1] - values[i]) / (knots[i + 1] - knots[i])).collect();
    let beta1 = values[0] - slopes[0] * knots[0];
    PiecewiseLinear::from_first_intercept(slopes, beta1, knots[1..l].to_vec())
}

/// Multi-layer perceptron `y = f(W_H f(… f(W_1 x)))` without biases.
#[derive(Clone, Debug)]
pub struct Mlp {
    weights: Vec<DMatrix<f64>>,
    activation: PiecewiseLinear,
}

/// Output of a forward pass plus, per layer and neuron, the 1-based index of
/// the active piece (ι in the path-sum notation).
#[derive(Clone, Debug, PartialEq)]
pub struct Forward {
    pub output: Vec<f64>,
    pub pieces: Vec<Vec<usize>>,
}

impl Mlp {
    pub fn new(weights: Vec<DMatrix<f64>>, activation: PiecewiseLinear) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Shape("network needs at least one layer".into()));
        }
        for (i, pair) in weights.windows(2).enumerate() {
            if pair[1].ncols() != pair[0].nrows() {
                return Err(Error::Shape(format!(
                    "layer {} has {} outputs but layer {} expects {} inputs",
                    i + 1,
                    pair[0].nrows(),
                    i + 2,
                    pair[1].ncols()
                )));
            }
        }
        if weights.iter().any(|w| !w.norm().is_finite()) {
            return Err(invalid("weights must be finite"));
        }
        Ok(Mlp { weights, activation })
    }

    /// Random weights, i.i.d. `N(0, 1/fan_in)`. `arch` lists the input width
    /// followed by every layer width.
    pub fn random(arch: &[usize], activation: PiecewiseLinear, seed: u64) -> Result<Self> {
        if arch.len() < 2 || arch.contains(&0) {
            return Err(Error::Shape("architecture needs an input and at least one layer".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = arch
            .windows(2)
            .map(|p| {
                let normal = Normal::new(0.0, 1.0 / (p[0] as f64).sqrt()).expect("positive sd");
                DMatrix::from_fn(p[1], p[0], |_, _| normal.sample(&mut rng))
            })
            .collect();
        Mlp::new(weights, activation)
    }

    pub fn weights(&self) -> &[DMatrix<f64>] {
        &self.weights
    }

    pub fn activation(&self) -> &PiecewiseLinear {
        &self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].ncols()
    }

    pub fn layer_widths(&self) -> Vec<usize> {
        self.weights.iter().map(|w| w.nrows()).collect()
    }

    pub fn neuron_count(&self) -> usize {
        self.weights.iter().map(|w| w.nrows()).sum()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Forward> {
        if x.len() != self.input_dim() {
            return Err(Error::Shape(format!("input has {} entries, network expects {}", x.len(), self.input_dim())));
        }
        let mut a = nalgebra::DVector::from_column_slice(x);
        let mut pieces = Vec::with_capacity(self.weights.len());
        for w in &self.weights {
            let z = w * &a;
            pieces.push(z.iter().map(|&v| self.activation.piece_index(v)).collect());
            a = z.map(|v| self.activation.eval(v));
        }
        Ok(Forward { output: a.as_slice().to_vec(), pieces })
    }

    /// Forward pass over the columns of `batch` (inputs as columns). Returns
    /// the piece index matrix of each layer (neurons × batch).
    pub fn forward_batch_pieces(&self, batch: &DMatrix<f64>) -> Result<Vec<DMatrix<u8>>> {
        if batch.nrows() != self.input_dim() {
            return Err(Error::Shape(format!("batch rows {} != input dim {}", batch.nrows(), self.input_dim())));
        }
        if self.activation.pieces() > u8::MAX as usize {
            return Err(invalid("too many pieces for batch tracking"));
        }
        let mut a = batch.clone();
        let mut out = Vec::with_capacity(self.weights.len());
        for w in &self.weights {
            let z = w * &a;
            out.push(z.map(|v| self.activation.piece_index(v) as u8));
            a = z.map(|v| self.activation.eval(v));
        }
        Ok(out)
    }
}

const PATH_LIMIT: u128 = 1_000_000;

/// Network output recomputed as an explicit sum over input-to-output paths.
///
/// Each output is the sum of data-path terms `x_j ∏ w ∏ α_ι` over all paths
/// from input `j`, plus bias-path terms `β_ι(n) ∏ w ∏ α_ι` over all paths
/// starting at a hidden neuron `n`. The piece indices come from the forward
/// pass.
pub fn path_expand(net: &Mlp, x: &[f64]) -> Result<Vec<f64>> {
    let widths = net.layer_widths();
    let paths = widths.iter().fold(net.input_dim() as u128, |acc, &w| acc.saturating_mul(w as u128));
    if paths > PATH_LIMIT {
        return Err(Error::PathOverflow(paths));
    }
    let fwd = net.forward(x)?;
    let depth = widths.len();
    let out = (0..widths[depth - 1])
        .map(|i| {
            let mut acc = crate::numeric::Neumaier::default();
            descend(net, &fwd.pieces, x, depth, i, 1.0, &mut acc);
            acc.value()
        })
        .collect();
    Ok(out)
}

fn descend(
    net: &Mlp,
    pieces: &[Vec<usize>],
    x: &[f64],
    layer: usize,
    neuron: usize,
    coef: f64,
    acc: &mut crate::numeric::Neumaier,
) {
    let act = &net.activation;
    let piece = pieces[layer - 1][neuron] - 1;
    acc.add(coef * act.intercepts[piece]);
    let c = coef * act.slopes[piece];
    let w = &net.weights[layer - 1];
    if layer == 1 {
        for (j, &xj) in x.iter().enumerate() {
            acc.add(c * w[(neuron, j)] * xj);
        }
    } else {
        for m in 0..w.ncols() {
            descend(net, pieces, x, layer - 1, m, c * w[(neuron, m)], acc);
        }
    }
}

/// Pearson correlation of two label sequences over `1..=c`, computed from the
/// empirical joint counts.
pub fn classifier_correlation(z1: &[usize], z2: &[usize], c: usize) -> Result<f64> {
    if z1.len() != z2.len() {
        return Err(Error::Shape(format!("label sequences of length {} and {}", z1.len(), z2.len())));
    }
    if z1.is_empty() {
        return Err(invalid("empty label sequences"));
    }
    if z1.iter().chain(z2).any(|&z| z == 0 || z > c) {
        return Err(invalid(format!("labels must lie in 1..={c}")));
    }
    let mut joint = vec![0u64; c * c];
    for (&a, &b) in z1.iter().zip(z2) {
        joint[(a - 1) * c + (b - 1)] += 1;
    }
    let n = z1.len() as f64;
    let mut p1 = vec![0.0; c];
    let mut p2 = vec![0.0; c];
    let mut e12 = 0.0;
    for i in 0..c {
        for j in 0..c {
            let p = joint[i * c + j] as f64 / n;
            p1[i] += p;
            p2[j] += p;
            e12 += ((i + 1) * (j + 1)) as f64 * p;
        }
    }
    let moment = |p: &[f64], k: i32| p.iter().enumerate().map(|(i, q)| ((i + 1) as f64).powi(k) * q).sum::<f64>();
    let (m1, m2) = (moment(&p1, 1), moment(&p2, 1));
    let v1 = moment(&p1, 2) - m1 * m1;
    let v2 = moment(&p2, 2) - m2 * m2;
    if v1 <= 1e-15 {
        return Err(Error::ZeroVariance("first classifier"));
    }
    if v2 <= 1e-15 {
        return Err(Error::ZeroVariance("second classifier"));
    }
    Ok((e12 - m1 * m2) / (v1 * v2).sqrt())
}
