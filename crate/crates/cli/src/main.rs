use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hetlmm::dataset::{load_manifest, load_series_manifest, write_numeric_csv, LmmDataset};
use hetlmm::graph::{
    downsample_series, fit_graph, graph_summary_json, write_adjacency_csv, write_edges_csv, GraphConfig,
};
use hetlmm::inference::{infer, write_inference_csv, InferenceConfig, Method};
use hetlmm::lasso::{fit_cv, CvConfig, CvFit};
use hetlmm::mevar::{fit_mevar, MevarConfig};
use hetlmm::sim::{run_monte_carlo, write_report, SimConfig};
use hetlmm::varcomp::{run_varcomp_pipeline, varcomp_summary_json, write_varcomp_csv, VarCompConfig};
use hetlmm::{parse_config, Error, Result};
use nalgebra::DMatrix;

#[derive(Parser, Debug)]
#[command(
    name = "hetlmm",
    version,
    about = "Doubly high-dimensional mixed models: fitting, inference, graphs, VAR, simulation"
)]
struct Cli {
    /// Output directory.
    #[arg(long, global = true, default_value = "hetlmm_out")]
    out: PathBuf,
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true, env = "HETLMM_THREADS")]
    threads: Option<usize>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Manifest JSON listing subject files.
    #[arg(long)]
    manifest: PathBuf,
    /// JSON config for the subcommand.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Decorrelation constant: "cv" or a nonnegative number.
    #[arg(long)]
    a: Option<String>,
    /// Comma-separated a candidates for cross-validation.
    #[arg(long, conflicts_with = "a")]
    a_grid: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    alpha: Option<f64>,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum MethodArg {
    Proposed,
    Baseline,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Cross-validated LASSO fit: beta.csv, cv_report.csv.
    Fit(Common),
    /// De-biased inference on selected coordinates.
    Infer {
        #[command(flatten)]
        common: Common,
        /// Comma-separated coordinates (default: all).
        #[arg(long)]
        coords: Option<String>,
        #[arg(long, value_enum, default_value = "proposed")]
        method: MethodArg,
    },
    /// Random-effect and noise variance estimation.
    Varcomp(Common),
    /// Mixed graphical model from per-subject series.
    Graph {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        downsample: Option<usize>,
        /// Also estimate the edge heterogeneity layer.
        #[arg(long)]
        heterogeneity: bool,
    },
    /// Mixed-effects VAR(1) from per-subject series.
    Mevar {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        downsample: Option<usize>,
    },
    /// Monte Carlo study from a JSON config.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long)]
        alpha: Option<f64>,
    },
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.to_path_buf(), source }
}

fn read_config<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => parse_config(&fs::read_to_string(p).map_err(io_err(p))?),
    }
}

fn parse_list<T: std::str::FromStr>(flag: &str, text: &str) -> Result<Vec<T>> {
    text.split(',')
        .map(|s| s.trim().parse::<T>().map_err(|_| Error::InvalidInput(format!("--{flag}: cannot parse {s:?}"))))
        .collect()
}

/// Applies --a / --a-grid / --seed to a CV config.
fn apply_common(cv: &mut CvConfig, c: &Common) -> Result<()> {
    if let Some(a) = &c.a {
        if a != "cv" {
            let v: f64 =
                a.parse().map_err(|_| Error::InvalidInput(format!("--a: expected \"cv\" or a number, got {a:?}")))?;
            cv.a_grid = vec![v];
        }
    }
    if let Some(g) = &c.a_grid {
        cv.a_grid = parse_list("a-grid", g)?;
    }
    if cv.a_grid.iter().any(|&a| !(a >= 0.0)) {
        return Err(Error::InvalidInput("a values must be nonnegative".into()));
    }
    if let Some(s) = c.seed {
        cv.seed = s;
    }
    Ok(())
}

fn check_alpha(alpha: f64) -> Result<f64> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(alpha)
    } else {
        Err(Error::InvalidInput(format!("--alpha must lie in (0, 1), got {alpha}")))
    }
}

fn write_json(path: &Path, v: &serde_json::Value) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)? + "\n").map_err(io_err(path))
}

fn write_fit(out: &Path, ds: &LmmDataset, fit: &CvFit) -> Result<()> {
    let beta = DMatrix::from_fn(ds.p(), 2, |j, c| if c == 0 { j as f64 } else { fit.fit.beta[j] });
    write_numeric_csv(&out.join("beta.csv"), Some(&["coord".into(), "beta".into()]), &beta)?;
    let r = &fit.report;
    let rows = DMatrix::from_fn(r.grid.len(), 3, |i, c| match c {
        0 => r.grid[i].0,
        1 => r.grid[i].1,
        _ => r.cv_mse[i],
    });
    write_numeric_csv(&out.join("cv_report.csv"), Some(&["a".into(), "lambda".into(), "cv_mse".into()]), &rows)?;
    write_json(
        &out.join("fit.json"),
        &serde_json::json!({
            "a": fit.fit.a,
            "lambda": fit.fit.lambda,
            "objective": fit.fit.objective,
            "active_set": fit.fit.active_set,
            "converged": fit.fit.converged,
            "kkt_residual": fit.fit.kkt_residual,
            "subjects": ds.n(),
            "p": ds.p(),
            "q": ds.q(),
        }),
    )
}

fn load_series(c: &Common, downsample: Option<usize>) -> Result<Vec<DMatrix<f64>>> {
    let series = load_series_manifest(&c.manifest)?;
    match downsample {
        Some(f) => series.iter().map(|s| downsample_series(s, f)).collect(),
        None => Ok(series),
    }
}

fn run(cli: &Cli) -> Result<()> {
    let out = &cli.out;
    fs::create_dir_all(out).map_err(io_err(out))?;
    match &cli.cmd {
        Command::Fit(c) => {
            let mut cv: CvConfig = read_config(c.config.as_deref())?;
            apply_common(&mut cv, c)?;
            let ds = load_manifest(&c.manifest)?;
            let fit = fit_cv(&ds, &cv)?;
            if !fit.fit.converged {
                return Err(Error::NoConvergence(format!("LASSO at λ = {:.3e}", fit.fit.lambda)));
            }
            write_fit(out, &ds, &fit)?;
        }
        Command::Infer { common: c, coords, method } => {
            let mut cfg: InferenceConfig = match c.config {
                Some(_) => read_config(c.config.as_deref())?,
                None => InferenceConfig::for_method(
                    match method {
                        MethodArg::Proposed => Method::Proposed,
                        MethodArg::Baseline => Method::Baseline,
                    },
                    0,
                ),
            };
            apply_common(&mut cfg.cv, c)?;
            if let Some(a) = c.alpha {
                cfg.debias.alpha = check_alpha(a)?;
            }
            let ds = load_manifest(&c.manifest)?;
            let coords: Vec<usize> = match coords {
                Some(s) => parse_list("coords", s)?,
                None => (0..ds.p()).collect(),
            };
            let run = infer(&ds, &coords, &cfg)?;
            write_fit(out, &ds, &run.cv)?;
            write_inference_csv(&out.join("inference.csv"), &run.records)?;
            for (c, why) in &run.failures {
                log::warn!("coordinate {c}: {why}");
            }
            if !run.failures.is_empty() && run.records.is_empty() {
                return Err(Error::Simulation(format!("inference failed for every coordinate: {}", run.failures[0].1)));
            }
        }
        Command::Varcomp(c) => {
            let mut cfg: VarCompConfig = read_config(c.config.as_deref())?;
            apply_common(&mut cfg.cv, c)?;
            let ds = load_manifest(&c.manifest)?;
            let est = run_varcomp_pipeline(&ds, c.seed.unwrap_or(cfg.cv.seed), &cfg)?;
            write_varcomp_csv(&out.join("varcomp.csv"), &est)?;
            write_json(&out.join("summary.json"), &varcomp_summary_json(&est))?;
        }
        Command::Graph { common: c, downsample, heterogeneity } => {
            let mut cfg: GraphConfig = read_config(c.config.as_deref())?;
            apply_common(&mut cfg.inference.cv, c)?;
            if let Some(a) = c.alpha {
                cfg.alpha = check_alpha(a)?;
            }
            cfg.with_heterogeneity |= *heterogeneity;
            let series = load_series(c, *downsample)?;
            let g = fit_graph(&series, &cfg)?;
            write_edges_csv(&out.join("edges.csv"), &g)?;
            write_adjacency_csv(&out.join("adjacency.csv"), &g)?;
            write_json(&out.join("summary.json"), &graph_summary_json(&g))?;
        }
        Command::Mevar { common: c, downsample } => {
            let mut cfg: MevarConfig = read_config(c.config.as_deref())?;
            apply_common(&mut cfg.inference.cv, c)?;
            if let Some(a) = c.alpha {
                cfg.inference.debias.alpha = check_alpha(a)?;
            }
            let series = load_series(c, *downsample)?;
            let fit = fit_mevar(&series, &cfg)?;
            write_numeric_csv(&out.join("phi_hat.csv"), None, &fit.phi_hat)?;
            write_numeric_csv(&out.join("phi_lasso.csv"), None, &fit.phi_lasso)?;
            let path = out.join("entries.csv");
            let mut f = std::io::BufWriter::new(fs::File::create(&path).map_err(io_err(&path))?);
            writeln!(f, "row,col,beta_hat,beta_db,se,ci_low,ci_high,p_value").map_err(io_err(&path))?;
            for e in &fit.entries {
                let r = &e.record;
                writeln!(
                    f,
                    "{},{},{},{},{},{},{},{}",
                    e.row,
                    r.coord,
                    r.beta_hat,
                    r.beta_db,
                    r.se(),
                    r.ci_low,
                    r.ci_high,
                    r.p_value
                )
                .map_err(io_err(&path))?;
            }
            f.flush().map_err(io_err(&path))?;
            write_json(
                &out.join("summary.json"),
                &serde_json::json!({
                    "p": fit.phi_hat.nrows(),
                    "subjects": series.len(),
                    "spectral_norm": fit.spectral_norm,
                    "entries": fit.entries.len(),
                    "failures": fit.failures,
                }),
            )?;
        }
        Command::Simulate { config, seed, reps, alpha } => {
            let mut cfg = SimConfig::from_path(config)?;
            if let Some(s) = seed {
                cfg.seed = *s;
            }
            if let Some(r) = reps {
                cfg.reps = *r;
            }
            if let Some(a) = alpha {
                cfg.alpha = *a;
            }
            cfg.validate()?;
            let report = run_monte_carlo(&cfg)?;
            write_report(&report, out)?;
            if !report.failures.is_empty() {
                log::warn!("{} replicate failures, see failures.csv", report.failures.len());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(t) = cli.threads {
        if t == 0 {
            eprintln!("error: --threads must be positive");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            log::warn!("thread pool: {e}");
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_data_error() { 2 } else { 3 })
        }
    }
}
