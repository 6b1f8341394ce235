mod output;
mod selfcheck;
mod svg;

use clap::{Args, Parser, Subcommand};
use output::Outputs;
use rayon::prelude::*;
use serde_json::{json, Value};
use spinscape::complexity::{band_thresholds, exact_leading_complexity_with, theta_h, theta_hk, QForm};
use spinscape::kacrice::{
    band_census, enumerate_critical_points, kacrice_indexed, kacrice_sphere, kacrice_total, EnumConfig, KacRiceConfig,
};
use spinscape::netprobe::{gaussian_data, load_idx, probe_counts, variance_scaling_check, ChiDenominator};
use spinscape::piecewise::{Mlp, PiecewiseLinear};
use spinscape::surrogate::{SurrogateSample, SurrogateSpec, XiConvention};
use std::fmt::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(
    name = "spinscape",
    version,
    about = "Loss-landscape complexity of the piecewise-linear spin-glass surrogate"
)]
struct Cli {
    /// Directory for every output file, including the run manifest.
    #[arg(long, global = true, env = "SPINSCAPE_OUT_DIR", default_value = "out")]
    out_dir: PathBuf,
    /// Cap on worker threads. Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Band thresholds E_0 > E_1 > … > E_∞ as `k,E_k` CSV.
    Thresholds {
        #[arg(long = "H")]
        h: usize,
        #[arg(long, default_value_t = 3)]
        kmax: usize,
    },
    /// Θ_H and Θ_{H,k} on a grid of u, as CSV and SVG.
    Curves {
        #[arg(long = "H")]
        h: usize,
        #[arg(long, default_value_t = -2.5, allow_hyphen_values = true)]
        u_min: f64,
        #[arg(long, default_value_t = 0.5, allow_hyphen_values = true)]
        u_max: f64,
        #[arg(long, default_value_t = 301)]
        points: usize,
        #[arg(long, default_value_t = 3)]
        kmax: usize,
    },
    /// Sharp leading-order complexity below −E_∞.
    ExactTerm {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, allow_hyphen_values = true)]
        u: f64,
        /// Use the angular coefficient exactly as printed.
        #[arg(long)]
        q_literal: bool,
    },
    /// Monte-Carlo finite-N Kac-Rice count, optionally compared with the enumerator.
    McKacrice {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, allow_hyphen_values = true)]
        u: f64,
        #[arg(long, default_value_t = 4000)]
        samples: usize,
        #[arg(long, default_value_t = 64)]
        nodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Comma-separated Hessian indices to count; all indices if absent.
        #[arg(long, value_delimiter = ',')]
        index: Option<Vec<usize>>,
        /// Average over the sphere instead of conditioning at one point.
        #[arg(long)]
        sphere: bool,
        /// Enumerated surrogate draws to compare against (0 skips the comparison).
        #[arg(long, default_value_t = 0)]
        trials: usize,
        #[arg(long, default_value_t = 200)]
        grid: usize,
    },
    /// Brute-force critical points of sampled surrogates (N ≤ 4).
    Enumerate {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        grid: usize,
        /// Also bin points by energy band up to this k.
        #[arg(long)]
        kmax: Option<usize>,
    },
    /// Piece-occupancy ratios of a random MLP.
    Probe {
        /// Input width followed by layer widths, e.g. 784,1000,500.
        #[arg(long, value_delimiter = ',', required = true)]
        arch: Vec<usize>,
        /// `relu`, `hard-tanh`, or a key=value activation file.
        #[arg(long, default_value = "relu")]
        act: String,
        /// `gaussian` or the path of an IDX image file.
        #[arg(long, default_value = "gaussian")]
        data: String,
        /// Rows of Gaussian data (ignored for IDX files).
        #[arg(long, default_value_t = 10_000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Divide by the first-piece count as printed.
        #[arg(long)]
        chi_literal: bool,
        /// Also measure how the variance of R_2 at the first neuron scales with n.
        #[arg(long)]
        variance_check: bool,
    },
    /// Fast invariant suite; exits nonzero on any failure.
    Selfcheck,
}

#[derive(Args, Debug)]
struct ModelArgs {
    #[arg(long = "H")]
    h: usize,
    #[arg(long = "N")]
    n: usize,
    /// Comma-separated ρ_1..ρ_H; zeros if absent.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    rho: Option<Vec<f64>>,
    /// Scale ξ with a second N^{−ℓ/2} factor.
    #[arg(long)]
    xi_literal: bool,
}

impl ModelArgs {
    fn spec(&self) -> Result<SurrogateSpec, Failure> {
        let rho = self.rho.clone().unwrap_or_else(|| vec![0.0; self.h]);
        Ok(SurrogateSpec::new(self.h, self.n, rho)?)
    }

    fn resolved(&self) -> Value {
        let rho = self.rho.clone().unwrap_or_else(|| vec![0.0; self.h]);
        json!({ "H": self.h, "N": self.n, "rho": rho, "xi_literal": self.xi_literal })
    }

    fn xi(&self) -> XiConvention {
        if self.xi_literal {
            XiConvention::DoubleScaled
        } else {
            XiConvention::Standard
        }
    }
}

#[derive(Debug)]
struct Failure {
    kind: &'static str,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure { kind: "usage", message: message.into() }
    }
}

impl From<spinscape::Error> for Failure {
    fn from(e: spinscape::Error) -> Self {
        let kind = match e {
            spinscape::Error::InvalidArgument(_)
            | spinscape::Error::Shape(_)
            | spinscape::Error::CapExceeded { .. } => "invalid_argument",
            spinscape::Error::Io(_) => "io",
            _ => "numeric",
        };
        Failure { kind, message: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure { kind: "io", message: e.to_string() }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return report(Failure::usage(e.to_string().trim_end())),
    };
    if let Some(t) = cli.threads {
        if t == 0 {
            return report(Failure::usage("--threads must be positive"));
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            return report(Failure { kind: "runtime", message: e.to_string() });
        }
    }
    match run(&cli) {
        Ok(code) => code,
        Err(f) => report(f),
    }
}

fn report(f: Failure) -> ExitCode {
    eprintln!("{}", json!({ "error": { "kind": f.kind, "message": f.message } }));
    ExitCode::from(if f.kind == "usage" || f.kind == "invalid_argument" { 2 } else { 1 })
}

fn run(cli: &Cli) -> Result<ExitCode, Failure> {
    let mut out = Outputs::new(&cli.out_dir)?;
    let (name, config, seed, code) = match &cli.command {
        Command::Thresholds { h, kmax } => {
            let t = band_thresholds(*h, *kmax)?;
            let mut csv = String::from("k,E_k\n");
            for (k, e) in t.thresholds.iter().enumerate() {
                let _ = writeln!(csv, "{k},{e:.12}");
            }
            out.write("thresholds.csv", csv.as_bytes())?;
            out.write_json("thresholds.json", &t)?;
            println!("{}", json!({ "H": h, "E_inf": t.e_inf, "thresholds": t.thresholds }));
            ("thresholds", json!({ "H": h, "kmax": kmax }), None, ExitCode::SUCCESS)
        }
        Command::Curves { h, u_min, u_max, points, kmax } => {
            if *points < 2 || u_min.partial_cmp(u_max) != Some(std::cmp::Ordering::Less) {
                return Err(Failure::usage("need points >= 2 and u_min < u_max"));
            }
            let bands = band_thresholds(*h, *kmax)?;
            let us: Vec<f64> =
                (0..*points).map(|i| u_min + (u_max - u_min) * i as f64 / (*points - 1) as f64).collect();
            let mut header = String::from("u,theta_H");
            for k in 0..=*kmax {
                let _ = write!(header, ",theta_H_{k}");
            }
            let mut csv = header + "\n";
            let mut series: Vec<svg::Series> = std::iter::once("Θ_H".to_string())
                .chain((0..=*kmax).map(|k| format!("Θ_H,{k}")))
                .map(|label| svg::Series { label, points: Vec::new() })
                .collect();
            for &u in &us {
                let mut row = vec![theta_h(*h, u)?];
                for k in 0..=*kmax {
                    row.push(theta_hk(*h, k, u)?);
                }
                let _ = write!(csv, "{u:.6}");
                for (s, v) in series.iter_mut().zip(&row) {
                    let _ = write!(csv, ",{v:.10}");
                    s.points.push((u, *v));
                }
                csv.push('\n');
            }
            let markers: Vec<f64> = bands.thresholds.iter().map(|e| -e).chain(std::iter::once(-bands.e_inf)).collect();
            out.write("curves.csv", csv.as_bytes())?;
            out.write("curves.svg", svg::line_plot(&format!("H = {h}"), &series, &markers).as_bytes())?;
            println!("{}", json!({ "H": h, "points": points, "markers": markers }));
            (
                "curves",
                json!({ "H": h, "u_min": u_min, "u_max": u_max, "points": points, "kmax": kmax }),
                None,
                ExitCode::SUCCESS,
            )
        }
        Command::ExactTerm { model, u, q_literal } => {
            let spec = model.spec()?;
            let form = if *q_literal { QForm::Printed } else { QForm::Corrected };
            let r = exact_leading_complexity_with(&spec, *u, form, model.xi())?;
            out.write_json("exact_term.json", &r)?;
            println!("{}", json!({ "log_leading": r.log_leading, "v": r.v, "T": r.t_value }));
            (
                "exact-term",
                json!({ "model": model.resolved(), "u": u, "q_literal": q_literal }),
                None,
                ExitCode::SUCCESS,
            )
        }
        Command::McKacrice { model, u, samples, nodes, seed, index, sphere, trials, grid } => {
            let spec = model.spec()?;
            let mut cfg = KacRiceConfig::new(spec.clone(), *u);
            cfg.samples = *samples;
            cfg.nodes = *nodes;
            cfg.seed = *seed;
            cfg.xi = model.xi();
            let r = match (sphere, index) {
                (true, k) => kacrice_sphere(&cfg, k.as_deref())?,
                (false, Some(k)) => kacrice_indexed(&cfg, k)?,
                (false, None) => kacrice_total(&cfg)?,
            };
            let mut summary = json!({ "estimate": r.estimate, "stderr": r.stderr, "log_estimate": r.log_estimate });
            let mut report =
                serde_json::to_value(&r).map_err(|e| Failure { kind: "runtime", message: e.to_string() })?;
            if *trials > 0 {
                let cmp =
                    compare_with_enumerator(&spec, *u, index.as_deref(), *trials, *seed, *grid, r.estimate, r.stderr)?;
                summary["enumerator"] = cmp.clone();
                report["enumerator"] = cmp;
            }
            out.write_json("mc_kacrice.json", &report)?;
            println!("{summary}");
            let config = json!({
                "model": model.resolved(), "u": u, "samples": samples, "nodes": nodes, "index": index,
                "sphere": sphere, "trials": trials, "grid": grid,
            });
            ("mc-kacrice", config, Some(*seed), ExitCode::SUCCESS)
        }
        Command::Enumerate { model, trials, seed, grid, kmax } => {
            let spec = model.spec()?;
            let cfg = EnumConfig { grid_density: *grid, ..Default::default() };
            let runs = (0..*trials)
                .into_par_iter()
                .map(|i| {
                    let sample = SurrogateSample::build(&spec, seed.wrapping_add(i as u64))?;
                    enumerate_critical_points(&sample, &cfg)
                })
                .collect::<Result<Vec<_>, _>>()?;
            let mut csv = String::from("trial,index,value,lagrange,grad_norm,w\n");
            for (t, run) in runs.iter().enumerate() {
                for p in &run.points {
                    let w: Vec<String> = p.w.iter().map(|x| format!("{x:.12}")).collect();
                    let _ = writeln!(
                        csv,
                        "{t},{},{:.12},{:.12},{:.3e},{}",
                        p.index,
                        p.value,
                        p.lagrange,
                        p.grad_norm,
                        w.join(";")
                    );
                }
            }
            out.write("critical_points.csv", csv.as_bytes())?;
            let counts: Vec<f64> = runs.iter().map(|r| r.points.len() as f64).collect();
            let (mean, se) = mean_stderr(&counts);
            let unstable = runs.iter().filter(|r| !r.stable).count();
            let mut summary =
                json!({ "trials": trials, "mean_count": mean, "stderr": se, "unstable_trials": unstable });
            if let Some(k) = kmax {
                let table = band_census(*trials, &spec, &cfg, *k, *seed)?;
                out.write("census.csv", table.to_csv().as_bytes())?;
                summary["census_unstable"] = json!(table.unstable_samples);
            }
            out.write_json("enumerate.json", &summary)?;
            println!("{summary}");
            (
                "enumerate",
                json!({ "model": model.resolved(), "trials": trials, "grid": grid, "kmax": kmax }),
                Some(*seed),
                ExitCode::SUCCESS,
            )
        }
        Command::Probe { arch, act, data, n, seed, chi_literal, variance_check } => {
            let activation = match act.as_str() {
                "relu" => PiecewiseLinear::relu(),
                "hard-tanh" => PiecewiseLinear::hard_tanh(),
                path => PiecewiseLinear::parse_config(&std::fs::read_to_string(path)?)?,
            };
            let net = Mlp::random(arch, activation, *seed)?;
            let (dataset, name) = if data == "gaussian" {
                (gaussian_data(*n, arch[0], seed.wrapping_add(1))?, "gaussian".to_string())
            } else {
                (load_idx(std::path::Path::new(data))?, data.clone())
            };
            let denom = if *chi_literal { ChiDenominator::FirstPiece } else { ChiDenominator::AllPieces };
            let r = probe_counts(&net, &dataset, denom, &name)?;
            out.write("probe.csv", r.to_csv().as_bytes())?;
            let mut report =
                serde_json::to_value(&r).map_err(|e| Failure { kind: "runtime", message: e.to_string() })?;
            let mut summary = json!({
                "neurons": r.neurons,
                "data_points": r.data_points,
                "data_averaged_mean": r.data_averaged.iter().map(|s| s.mean).collect::<Vec<_>>(),
                "neuron_averaged_mean": r.neuron_averaged.iter().map(|s| s.mean).collect::<Vec<_>>(),
                "neuron_averaged_std": r.neuron_averaged.iter().map(|s| s.std()).collect::<Vec<_>>(),
            });
            if *variance_check {
                let v = variance_scaling_check(&net, 0, 0, &[100, 1000, 10_000], 100, seed.wrapping_add(2))?;
                summary["variance_slope"] = json!(v.slope);
                report["variance_scaling"] =
                    serde_json::to_value(&v).map_err(|e| Failure { kind: "runtime", message: e.to_string() })?;
            }
            out.write_json("probe.json", &report)?;
            println!("{summary}");
            let config = json!({
                "arch": arch, "act": act, "data": data, "n": n, "chi_literal": chi_literal, "variance_check": variance_check,
            });
            ("probe", config, Some(*seed), ExitCode::SUCCESS)
        }
        Command::Selfcheck => {
            let results = selfcheck::run();
            let mut failed = 0;
            for r in &results {
                println!("{} {}: {} ({:.2} s)", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail, r.seconds);
                failed += usize::from(!r.passed);
            }
            let rows: Vec<Value> = results
                .iter()
                .map(|r| json!({ "name": r.name, "passed": r.passed, "detail": r.detail, "seconds": r.seconds }))
                .collect();
            out.write_json("selfcheck.json", &rows)?;
            let code = if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE };
            ("selfcheck", json!({}), None, code)
        }
    };
    out.finish(name, config, seed, cli.threads)?;
    Ok(code)
}

#[allow(clippy::too_many_arguments)]
fn compare_with_enumerator(
    spec: &SurrogateSpec,
    u: f64,
    index: Option<&[usize]>,
    trials: usize,
    seed: u64,
    grid: usize,
    estimate: f64,
    stderr: f64,
) -> Result<Value, Failure> {
    if spec.n > 4 {
        return Err(Failure::usage("the enumerator supports N <= 4"));
    }
    let cfg = EnumConfig { grid_density: grid, ..Default::default() };
    let cut = (spec.n as f64).sqrt() * u;
    let counts = (0..trials)
        .into_par_iter()
        .map(|i| {
            let sample = SurrogateSample::build(spec, seed.wrapping_add(1_000_000 + i as u64))?;
            let e = enumerate_critical_points(&sample, &cfg)?;
            Ok(e.points.iter().filter(|p| p.value <= cut && index.is_none_or(|k| k.contains(&p.index))).count() as f64)
        })
        .collect::<Result<Vec<f64>, spinscape::Error>>()?;
    let (mean, se) = mean_stderr(&counts);
    let z = (estimate - mean) / stderr.hypot(se);
    Ok(json!({ "trials": trials, "mean": mean, "stderr": se, "z": z, "agree_2sigma": z.abs() <= 2.0 }))
}

fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}
