//! Piece-occupancy statistics of random-weight networks: how often each
//! neuron lands on each linear piece across a dataset (data averaging), and
//! how the pieces are shared across neurons for one input (neuron averaging).

use crate::error::{invalid, Error, Result};
use crate::mc::stream_rng;
use crate::piecewise::Mlp;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;
use std::path::Path;

/// Rows are data points.
pub type Dataset = DMatrix<f64>;

/// Standard-normal `n × d` matrix from the seed.
pub fn gaussian_data(n: usize, d: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || d == 0 {
        return Err(invalid("dataset dimensions must be positive"));
    }
    // one stream per row keeps rows independent of n
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, i as u64);
            (0..d).map(|_| rng.sample(StandardNormal)).collect()
        })
        .collect();
    Ok(DMatrix::from_row_slice(n, d, &rows.concat()))
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

/// Reads an IDX image file (magic `0x00000803`) into an `n × (rows·cols)`
/// matrix with pixels scaled by `1/255`.
pub fn load_idx(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    parse_idx_images(&bytes)
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Idx("truncated header".into()))
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<Dataset> {
    let magic = be_u32(bytes, 0)?;
    match magic {
        IDX_IMAGES => {}
        IDX_LABELS => return Err(Error::Idx("label file (magic 0x00000801) where images were expected".into())),
        m => return Err(Error::Idx(format!("bad magic 0x{m:08x}"))),
    }
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let d = rows * cols;
    let body = &bytes[16..];
    if body.len() < n * d {
        return Err(Error::Idx(format!("truncated data: expected {} bytes, found {}", n * d, body.len())));
    }
    Ok(DMatrix::from_fn(n, d, |i, j| body[i * d + j] as f64 / 255.0))
}

/// Reads an IDX label file (magic `0x00000801`).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS {
        return Err(Error::Idx(format!("bad magic 0x{magic:08x}, expected 0x00000801")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(Error::Idx(format!("truncated data: expected {n} bytes, found {}", body.len())));
    }
    Ok(body[..n].to_vec())
}

/// Denominator of the occupancy ratios.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub enum ChiDenominator {
    /// `Σ_i χ_i`, the count over all pieces.
    #[default]
    AllPieces,
    /// `Σ_i χ_1`, i.e. `L · χ_1`, as printed.
    FirstPiece,
}

#[derive(Clone, Debug, Serialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

/// Freedman-Diaconis histogram; one bin when the spread is zero.
pub fn histogram(values: &[f64]) -> Histogram {
    let finite: Vec<f64> = values.iter().cloned().filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        return Histogram { edges: vec![0.0, 1.0], counts: vec![0] };
    }
    let mut sorted = finite.clone();
    sorted.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (sorted.len() - 1) as f64;
        let (i, f) = (pos.floor() as usize, pos.fract());
        sorted[i] + f * (sorted[(i + 1).min(sorted.len() - 1)] - sorted[i])
    };
    let (lo, hi) = (sorted[0], sorted[sorted.len() - 1]);
    let width = 2.0 * (q(0.75) - q(0.25)) / (sorted.len() as f64).cbrt();
    let bins = if hi > lo && width > 0.0 { (((hi - lo) / width).ceil() as usize).clamp(1, 1000) } else { 1 };
    let step = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let edges: Vec<f64> = (0..=bins).map(|i| lo + i as f64 * step).collect();
    let mut counts = vec![0u64; bins];
    for v in finite {
        let b = (((v - lo) / step) as usize).min(bins - 1);
        counts[b] += 1;
    }
    Histogram { edges, counts }
}

#[derive(Clone, Debug, Serialize)]
pub struct RatioSet {
    /// Piece index `j` (1-based).
    pub piece: usize,
    pub values: Vec<f64>,
    pub mean: f64,
    pub variance: f64,
    pub histogram: Histogram,
}

impl RatioSet {
    fn new(piece: usize, values: Vec<f64>) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let variance =
            if values.len() > 1 { values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
        let histogram = histogram(&values);
        RatioSet { piece, values, mean, variance, histogram }
    }

    pub fn std(&self) -> f64 {
        self.variance.sqrt()
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ProbeReport {
    pub dataset: String,
    pub network: String,
    pub data_points: usize,
    pub neurons: usize,
    pub denominator: ChiDenominator,
    /// Data averaging: `R_j`, one ratio per neuron, for `j = 2..L`.
    pub data_averaged: Vec<RatioSet>,
    /// Neuron averaging: `R̄_j`, one ratio per datum, for `j = 2..L`.
    pub neuron_averaged: Vec<RatioSet>,
}

impl ProbeReport {
    /// Raw ratios as CSV `scenario,piece,item,ratio`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("scenario,piece,item,ratio\n");
        for (name, sets) in [("data", &self.data_averaged), ("neuron", &self.neuron_averaged)] {
            for set in sets {
                for (i, v) in set.values.iter().enumerate() {
                    s.push_str(&format!("{name},{},{i},{v}\n", set.piece));
                }
            }
        }
        s
    }
}

/// Per-neuron and per-datum piece counts.
pub type PieceCounts = (Vec<Vec<u64>>, Vec<Vec<u64>>);

/// Piece counts `χ[n][j]` per neuron (over data) and `χ̄[x][j]` per datum
/// (over neurons). Rows of `data` are inputs.
pub fn piece_counts(net: &Mlp, data: &Dataset) -> Result<PieceCounts> {
    if data.nrows() == 0 {
        return Err(invalid("dataset is empty"));
    }
    let l = net.activation().pieces();
    let neurons = net.neuron_count();
    const BATCH: usize = 256;
    let starts: Vec<usize> = (0..data.nrows()).step_by(BATCH).collect();
    let parts: Vec<Result<PieceCounts>> = starts
        .par_iter()
        .map(|&start| {
            let rows = BATCH.min(data.nrows() - start);
            let batch = data.rows(start, rows).transpose();
            let layers = net.forward_batch_pieces(&batch)?;
            let mut per_neuron = vec![vec![0u64; l]; neurons];
            let mut per_datum = vec![vec![0u64; l]; rows];
            let mut offset = 0;
            for layer in &layers {
                for (r, c) in (0..layer.nrows()).flat_map(|r| (0..layer.ncols()).map(move |c| (r, c))) {
                    let j = layer[(r, c)] as usize - 1;
                    per_neuron[offset + r][j] += 1;
                    per_datum[c][j] += 1;
                }
                offset += layer.nrows();
            }
            Ok((per_neuron, per_datum))
        })
        .collect();
    let mut chi = vec![vec![0u64; l]; neurons];
    let mut chi_bar = Vec::with_capacity(data.nrows());
    for p in parts {
        let (a, b) = p?;
        for (dst, src) in chi.iter_mut().zip(a) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
        chi_bar.extend(b);
    }
    Ok((chi, chi_bar))
}

fn ratio(counts: &[u64], j: usize, denom: ChiDenominator) -> f64 {
    let d = match denom {
        ChiDenominator::AllPieces => counts.iter().sum::<u64>() as f64,
        ChiDenominator::FirstPiece => (counts.len() as u64 * counts[0]) as f64,
    };
    if d == 0.0 {
        // literal reading with an empty first piece; keep ratios finite
        0.0
    } else {
        counts[j] as f64 / d
    }
}

pub fn probe_counts(net: &Mlp, data: &Dataset, denom: ChiDenominator, dataset_name: &str) -> Result<ProbeReport> {
    let l = net.activation().pieces();
    if l < 2 {
        return Err(invalid("probe needs an activation with at least two pieces"));
    }
    let (chi, chi_bar) = piece_counts(net, data)?;
    let sets = |counts: &[Vec<u64>]| {
        (1..l).map(|j| RatioSet::new(j + 1, counts.iter().map(|c| ratio(c, j, denom)).collect())).collect()
    };
    let widths: Vec<String> =
        std::iter::once(net.input_dim()).chain(net.layer_widths()).map(|w| w.to_string()).collect();
    Ok(ProbeReport {
        dataset: format!("{dataset_name} ({}x{})", data.nrows(), data.ncols()),
        network: format!("mlp {} with {}-piece activation", widths.join("-"), l),
        data_points: data.nrows(),
        neurons: net.neuron_count(),
        denominator: denom,
        data_averaged: sets(&chi),
        neuron_averaged: sets(&chi_bar),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct VarianceScaling {
    pub layer: usize,
    pub neuron: usize,
    pub sizes: Vec<usize>,
    pub resamples: usize,
    pub variances: Vec<f64>,
    /// Least-squares slope of `log Var` against `log |D|`; `None` when any
    /// variance is zero.
    pub slope: Option<f64>,
}

/// `Var(ρ₂ⁿ)` of one neuron across fresh Gaussian datasets of each size.
///
/// Only the pre-activation of the chosen neuron is computed, so the neuron
/// must sit in a layer whose inputs are all cheap to recompute; `layer`
/// counts from 0.
pub fn variance_scaling_check(
    net: &Mlp,
    layer: usize,
    neuron: usize,
    sizes: &[usize],
    resamples: usize,
    seed: u64,
) -> Result<VarianceScaling> {
    if sizes.is_empty() || sizes.windows(2).any(|w| w[1] <= w[0]) || sizes[0] == 0 {
        return Err(invalid("sizes must be positive and strictly increasing"));
    }
    if resamples < 2 {
        return Err(invalid("need at least two resamples"));
    }
    let weights = net.weights();
    if layer >= weights.len() || neuron >= weights[layer].nrows() {
        return Err(invalid(format!("no neuron {neuron} in layer {layer}")));
    }
    let act = net.activation();
    if act.pieces() < 2 {
        return Err(invalid("need at least two pieces"));
    }
    let d = net.input_dim();
    let mut variances = Vec::with_capacity(sizes.len());
    for (si, &size) in sizes.iter().enumerate() {
        let ratios: Vec<f64> = (0..resamples)
            .into_par_iter()
            .map(|r| {
                let mut rng = stream_rng(seed ^ ((si as u64) << 32), r as u64);
                let mut hits = 0u64;
                for _ in 0..size {
                    let mut a = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
                    for w in &weights[..layer] {
                        a = (w * a).map(|v| act.eval(v));
                    }
                    let z = weights[layer].row(neuron).transpose().dot(&a);
                    if act.piece_index(z) == 2 {
                        hits += 1;
                    }
                }
                hits as f64 / size as f64
            })
            .collect();
        let m = ratios.iter().sum::<f64>() / resamples as f64;
        variances.push(ratios.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (resamples as f64 - 1.0));
    }
    let slope = if variances.iter().all(|&v| v > 0.0) && sizes.len() >= 2 {
        let xs: Vec<f64> = sizes.iter().map(|&s| (s as f64).ln()).collect();
        let ys: Vec<f64> = variances.iter().map(|v| v.ln()).collect();
        let mx = xs.iter().sum::<f64>() / xs.len() as f64;
        let my = ys.iter().sum::<f64>() / ys.len() as f64;
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
        Some(sxy / sxx)
    } else {
        None
    };
    Ok(VarianceScaling { layer, neuron, sizes: sizes.to_vec(), resamples, variances, slope })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::piecewise::PiecewiseLinear;

    #[test]
    fn gaussian_data_is_deterministic() {
        let a = gaussian_data(5, 3, 9).unwrap();
        let b = gaussian_data(5, 3, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), (5, 3));
        assert!(gaussian_data(0, 3, 1).is_err());
    }

    #[test]
    fn idx_round_trip() {
        let mut bytes = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2];
        bytes.extend([0, 255, 51, 102, 255, 0, 0, 0]);
        let d = parse_idx_images(&bytes).unwrap();
        assert_eq!(d.shape(), (2, 4));
        assert_eq!(d[(0, 1)], 1.0);
        assert!((d[(0, 2)] - 0.2).abs() < 1e-15);
        assert!(parse_idx_images(&bytes[..20]).is_err());
        let labels = [0u8, 0, 8, 1, 0, 0, 0, 2, 7, 3];
        assert!(matches!(parse_idx_images(&labels), Err(Error::Idx(_))));
        assert_eq!(parse_idx_labels(&labels).unwrap(), vec![7, 3]);
    }

    #[test]
    fn counts_sum_to_totals() {
        let net = Mlp::random(&[6, 5, 4], PiecewiseLinear::hard_tanh(), 3).unwrap();
        let data = gaussian_data(40, 6, 1).unwrap();
        let (chi, chi_bar) = piece_counts(&net, &data).unwrap();
        assert!(chi.iter().all(|c| c.iter().sum::<u64>() == 40));
        assert!(chi_bar.iter().all(|c| c.iter().sum::<u64>() == 9));
    }

    #[test]
    fn antisymmetric_pair_splits_neurons() {
        // one hidden layer: x and −x put every neuron on opposite sides of 0
        let net = Mlp::random(&[5, 7], PiecewiseLinear::relu(), 2).unwrap();
        let base = gaussian_data(10, 5, 4).unwrap();
        let data = DMatrix::from_fn(20, 5, |i, j| if i < 10 { base[(i, j)] } else { -base[(i - 10, j)] });
        let r = probe_counts(&net, &data, ChiDenominator::AllPieces, "pairs").unwrap();
        let v = &r.neuron_averaged[0].values;
        for i in 0..10 {
            assert!((0.5 * (v[i] + v[i + 10]) - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn single_piece_rejected() {
        let net = Mlp::random(&[3, 2], PiecewiseLinear::affine(1.0, 0.0), 1).unwrap();
        let data = gaussian_data(4, 3, 1).unwrap();
        assert!(probe_counts(&net, &data, ChiDenominator::AllPieces, "g").is_err());
    }

    #[test]
    fn fd_histogram_counts_everything() {
        let v: Vec<f64> = (0..1000).map(|i| (i as f64).sin()).collect();
        let h = histogram(&v);
        assert_eq!(h.counts.iter().sum::<u64>(), 1000);
        assert_eq!(h.edges.len(), h.counts.len() + 1);
        assert_eq!(histogram(&[2.0, 2.0]).counts, vec![2]);
    }
}
