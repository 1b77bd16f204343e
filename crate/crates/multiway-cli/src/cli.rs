//! Argument parsing and subcommand dispatch.
//!
//! Exit codes: 0 success, 1 usage error (bad flags or configuration
//! values), 2 data error (unreadable or malformed input, numerical failure).

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use multiway::als::{als_fit, AlsConfig};
use multiway::extensions::{means_fit, probit_fit, CrossTabData, MeansConfig, OrdinalPanel, ProbitConfig};
use multiway::hbayes::{dic, ess, run_chain, ChainConfig, ChainMode, PsiScatter};
use multiway::io::{read_long_path, write_long_path};
use multiway::{Error, FactorSet, RngStream};
use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::files::{cell_levels, numbered, write_crosstab_csv, write_matrix_csv, write_panel_csv};
use crate::report::{render, verify};
use crate::sim::{crosstab_sample, panel_sample, simulate_replicate, SimSpec};
use crate::study::{run_known_rank_study, run_misspec_study, run_rank_selection, StudyConfig};

#[derive(Debug, Parser)]
#[command(name = "multiway", version, about = "Reduced-rank multilinear models for multiway arrays")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// Random seed (overrides the configuration file)
    #[arg(long)]
    pub seed: Option<u64>,
    /// JSON configuration; command-line flags take precedence
    #[arg(long, value_name = "JSON")]
    pub config: Option<PathBuf>,
    /// Output directory
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Least-squares CP decomposition of a long-format array file
    Decompose(DecomposeArgs),
    /// Gibbs sampler (hierarchical or flat prior) on a long-format array file
    Bayes(BayesArgs),
    /// Simulate data: study arrays, cross-classified data or an ordinal panel
    Simulate(SimulateArgs),
    /// Simulation studies
    Study(StudyArgs),
    /// Multiway means model for cross-classified multivariate data
    MeansFit(MeansArgs),
    /// Symmetric ordered-probit model for longitudinal relational data
    ProbitFit(ProbitArgs),
    /// Summarize (and optionally verify) a study output directory
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct DecomposeArgs {
    pub input: PathBuf,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub starts: Option<usize>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub max_sweeps: Option<usize>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct BayesArgs {
    pub input: PathBuf,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub burn: Option<usize>,
    #[arg(long)]
    pub iter: Option<usize>,
    #[arg(long)]
    pub thin: Option<usize>,
    /// Independent normal(0, tau2) factor entries instead of the hierarchical prior
    #[arg(long)]
    pub flat: bool,
    #[arg(long)]
    pub tau2: Option<f64>,
    #[arg(long, value_enum)]
    pub scatter: Option<Scatter>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Scatter {
    Centered,
    Uncentered,
}

impl From<Scatter> for PsiScatter {
    fn from(s: Scatter) -> Self {
        match s {
            Scatter::Centered => PsiScatter::Centered,
            Scatter::Uncentered => PsiScatter::Uncentered,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, ValueEnum)]
pub enum SimKind {
    #[default]
    Array,
    Crosstab,
    Panel,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, value_enum, default_value_t = SimKind::Array)]
    pub kind: SimKind,
    /// Array dims, or the category level counts for `--kind crosstab`
    #[arg(long, value_delimiter = ',')]
    pub dims: Option<Vec<usize>>,
    #[arg(long)]
    pub rank: Option<usize>,
    /// Error variance relative to the mean square of theta
    #[arg(long)]
    pub noise: Option<f64>,
    /// Responses per observation (crosstab)
    #[arg(long, default_value_t = 3)]
    pub responses: usize,
    /// Largest cell sample size (crosstab)
    #[arg(long, default_value_t = 30)]
    pub max_count: usize,
    /// Countries (panel)
    #[arg(long, default_value_t = 10)]
    pub countries: usize,
    /// Time points (panel)
    #[arg(long, default_value_t = 3)]
    pub times: usize,
    /// Regression coefficients (panel)
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "1,-0.5")]
    pub beta: Vec<f64>,
    /// Category cutoffs (panel)
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "-1,0,1")]
    pub cutoffs: Vec<f64>,
    /// Label of the lowest category (panel)
    #[arg(long, default_value_t = -2, allow_hyphen_values = true)]
    pub min_label: i64,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum StudyName {
    KnownRank,
    Misspec,
    RankSelect,
}

#[derive(Debug, Args)]
pub struct StudyArgs {
    #[arg(value_enum)]
    pub study: StudyName,
    #[arg(long)]
    pub replicates: Option<usize>,
    /// Generating rank(s); rank selection accepts a list
    #[arg(long, value_delimiter = ',')]
    pub true_rank: Option<Vec<usize>>,
    /// Fitted rank grid
    #[arg(long, value_delimiter = ',')]
    pub ranks: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub dims: Option<Vec<usize>>,
    #[arg(long)]
    pub burn: Option<usize>,
    #[arg(long)]
    pub iter: Option<usize>,
    #[arg(long)]
    pub starts: Option<usize>,
    /// 100 replicates, 1000 burn-in, 10000 iterations
    #[arg(long)]
    pub full_scale: bool,
    /// Skip writing the per-fit arrays needed by `report --verify`
    #[arg(long)]
    pub no_artifacts: bool,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct MeansArgs {
    pub input: PathBuf,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub burn: Option<usize>,
    #[arg(long)]
    pub iter: Option<usize>,
    #[arg(long)]
    pub thin: Option<usize>,
    /// Fit on the raw response scale
    #[arg(long)]
    pub no_standardize: bool,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct ProbitArgs {
    pub input: PathBuf,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub burn: Option<usize>,
    #[arg(long)]
    pub iter: Option<usize>,
    #[arg(long)]
    pub thin: Option<usize>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    pub dir: PathBuf,
    /// Recompute every ratio from the saved arrays and compare
    #[arg(long)]
    pub verify: bool,
    #[arg(long, default_value_t = 1e-10)]
    pub tol: f64,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Data(e.to_string())
    }
}

type CliResult<T = ()> = std::result::Result<T, CliError>;

fn usage(e: Error) -> CliError {
    CliError::Usage(e.to_string())
}

fn data_err(path: &Path, e: Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            if code == 0 {
                let _ = write!(out, "{text}");
            } else {
                let _ = write!(err, "{text}");
            }
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let (CliError::Usage(msg) | CliError::Data(msg)) = &e;
            let kind = if e.code() == 1 { "usage error" } else { "error" };
            let _ = writeln!(err, "{kind}: {msg}");
            e.code()
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> CliResult {
    match cmd {
        Command::Decompose(a) => decompose(a, out),
        Command::Bayes(a) => bayes(a, out),
        Command::Simulate(a) => simulate(a, out),
        Command::Study(a) => study(a, out),
        Command::MeansFit(a) => means(a, out),
        Command::ProbitFit(a) => probit(a, out),
        Command::Report(a) => report(a, out),
    }
}

fn load_config<T: DeserializeOwned + Default>(common: &Common) -> CliResult<T> {
    match &common.config {
        None => Ok(T::default()),
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| data_err(path, e.into()))?;
            serde_json::from_str(&text).map_err(|e| data_err(path, e.into()))
        }
    }
}

fn out_dir(common: &Common) -> CliResult<Option<&Path>> {
    if let Some(d) = &common.out {
        fs::create_dir_all(d).map_err(|e| data_err(d, e.into()))?;
    }
    Ok(common.out.as_deref())
}

fn write_json<T: Serialize>(path: PathBuf, value: &T) -> CliResult {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)? + "\n";
    fs::write(&path, text).map_err(|e| data_err(&path, e.into()))
}

fn say(out: &mut dyn Write, text: std::fmt::Arguments) -> CliResult {
    out.write_fmt(text).map_err(|e| CliError::Data(e.to_string()))
}

fn write_factors(dir: &Path, prefix: &str, f: &FactorSet) -> CliResult {
    for (k, u) in f.factors().iter().enumerate() {
        write_matrix_csv(dir.join(format!("{prefix}{}.csv", k + 1)), Some("row"), &numbered("r", f.rank()), u)?;
    }
    Ok(())
}

fn decompose(a: DecomposeArgs, out: &mut dyn Write) -> CliResult {
    let mut cfg: AlsConfig = load_config(&a.common)?;
    if let Some(r) = a.rank {
        cfg.rank = r;
    }
    if let Some(s) = a.starts {
        cfg.n_starts = s;
    }
    if let Some(t) = a.tol {
        cfg.rel_tol = t;
    }
    if let Some(m) = a.max_sweeps {
        cfg.max_sweeps = m;
    }
    if let Some(s) = a.common.seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(usage)?;
    let y = read_long_path(&a.input).map_err(|e| data_err(&a.input, e))?;
    let fit = als_fit(&y, &cfg)?;
    let rel = fit.rss / y.sq_norm().max(f64::MIN_POSITIVE);
    say(
        out,
        format_args!(
            "rank {} rss {:.6e} residual ratio {:.3e} sweeps {} converged {}\n",
            cfg.rank, fit.rss, rel, fit.sweeps, fit.converged
        ),
    )?;
    if let Some(dir) = out_dir(&a.common)? {
        write_long_path(&fit.theta(), dir.join("theta_hat.txt"))?;
        write_factors(dir, "factor_", &fit.factors)?;
        write_json(
            dir.join("fit.json"),
            &serde_json::json!({
                "config": cfg,
                "rss": fit.rss,
                "relative_residual": rel,
                "sweeps": fit.sweeps,
                "converged": fit.converged,
                "start": fit.start,
            }),
        )?;
    }
    Ok(())
}

fn bayes(a: BayesArgs, out: &mut dyn Write) -> CliResult {
    let mut cfg: ChainConfig = load_config(&a.common)?;
    if let Some(r) = a.rank {
        cfg.rank = r;
    }
    if let Some(v) = a.burn {
        cfg.n_burn = v;
    }
    if let Some(v) = a.iter {
        cfg.n_iter = v;
    }
    if let Some(v) = a.thin {
        cfg.thin = v;
    }
    if a.flat {
        cfg.mode = ChainMode::Flat;
    }
    if let Some(v) = a.tau2 {
        cfg.flat_tau2 = v;
    }
    if let Some(s) = a.scatter {
        cfg.psi_scatter = s.into();
    }
    if let Some(s) = a.common.seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(usage)?;
    let y = read_long_path(&a.input).map_err(|e| data_err(&a.input, e))?;
    let chain = run_chain(&y, &cfg)?;
    let d = dic(&chain, &y)?;
    let mean = chain.posterior_theta()?;
    let s2 = chain.sigma2_trace();
    let s2_mean = s2.iter().sum::<f64>() / s2.len() as f64;
    let norms: Vec<f64> = chain.trace.iter().map(|t| t.theta_norm2).collect();
    let ess_norm = if norms.len() >= 10 { ess(&norms)? } else { f64::NAN };
    say(
        out,
        format_args!(
            "rank {} saved {} DIC {:.4} pD {:.3} sigma2 {:.5} ess(|theta|^2) {:.0}\n",
            cfg.rank,
            chain.count(),
            d.dic,
            d.p_d,
            s2_mean,
            ess_norm
        ),
    )?;
    if let Some(dir) = out_dir(&a.common)? {
        write_long_path(&mean, dir.join("theta_mean.txt"))?;
        write_long_path(&chain.posterior_var()?, dir.join("theta_var.txt"))?;
        let trace_path = dir.join("trace.csv");
        let f = fs::File::create(&trace_path).map_err(|e| data_err(&trace_path, e.into()))?;
        chain.write_trace_csv(std::io::BufWriter::new(f))?;
        let point = als_fit(&mean, &AlsConfig::new(cfg.rank).with_seed(cfg.seed))?;
        write_factors(dir, "point_factor_", &point.factors)?;
        let meta: serde_json::Value = serde_json::from_str(&chain.metadata_json()?).map_err(Error::from)?;
        write_json(
            dir.join("chain.json"),
            &serde_json::json!({ "config": cfg, "chain": meta, "dic": d, "ess_theta_norm2": ess_norm }),
        )?;
    }
    Ok(())
}

fn simulate(a: SimulateArgs, out: &mut dyn Write) -> CliResult {
    let mut spec: SimSpec = load_config(&a.common)?;
    if let Some(d) = a.dims {
        spec.dims = d;
    }
    if let Some(r) = a.rank {
        spec.rank = r;
    }
    if let Some(n) = a.noise {
        spec.noise = n;
    }
    if let Some(s) = a.common.seed {
        spec.seed = s;
    }
    let dir = a
        .common
        .out
        .clone()
        .ok_or_else(|| CliError::Usage("simulate needs --out".into()))?;
    match a.kind {
        SimKind::Array => {
            spec.validate().map_err(usage)?;
            let (theta, y) = simulate_replicate(&spec, 0)?;
            out_dir(&a.common)?;
            write_long_path(&theta, dir.join("theta.txt"))?;
            write_long_path(&y, dir.join("y.txt"))?;
            write_json(dir.join("sim.json"), &spec)?;
            say(out, format_args!("wrote theta.txt and y.txt to {}\n", dir.display()))?;
        }
        SimKind::Crosstab => {
            if spec.dims.is_empty() || spec.dims.contains(&0) || spec.rank == 0 || a.responses == 0 {
                return Err(CliError::Usage("crosstab needs positive level counts, rank and responses".into()));
            }
            let mut rng = RngStream::new(spec.seed).substream(&[0x6374]);
            let s = crosstab_sample(&spec.dims, a.responses, spec.rank, 0.1, spec.noise, a.max_count, &mut rng)?;
            out_dir(&a.common)?;
            write_crosstab_csv(dir.join("crosstab.csv"), &s.data)?;
            let cols = numbered("y", a.responses);
            write_matrix_csv(dir.join("true_beta.csv"), Some("cell"), &cols, &s.beta)?;
            write_json(dir.join("sim.json"), &spec)?;
            say(out, format_args!("wrote crosstab.csv ({} observations) to {}\n", s.data.n(), dir.display()))?;
        }
        SimKind::Panel => {
            let rank = a.rank.unwrap_or(1);
            if a.countries < 2 || a.times == 0 || a.beta.is_empty() || !a.cutoffs.windows(2).all(|w| w[0] < w[1]) {
                return Err(CliError::Usage(
                    "panel needs >= 2 countries, >= 1 time, >= 1 coefficient and increasing cutoffs".into(),
                ));
            }
            let mut rng = RngStream::new(spec.seed).substream(&[0x0070_616e]);
            let s = panel_sample(a.countries, a.times, rank, &a.beta, &a.cutoffs, a.min_label, 1.0, &mut rng)?;
            out_dir(&a.common)?;
            write_panel_csv(dir.join("panel.csv"), &s.panel)?;
            write_json(
                dir.join("sim.json"),
                &serde_json::json!({
                    "seed": spec.seed,
                    "rank": rank,
                    "beta": a.beta,
                    "cutoffs": a.cutoffs,
                    "min_label": a.min_label,
                    "u": s.u.row_iter().map(|r| r.iter().copied().collect::<Vec<_>>()).collect::<Vec<_>>(),
                    "v": s.v.row_iter().map(|r| r.iter().copied().collect::<Vec<_>>()).collect::<Vec<_>>(),
                }),
            )?;
            say(out, format_args!("wrote panel.csv ({} cells) to {}\n", s.panel.cells().len(), dir.display()))?;
        }
    }
    Ok(())
}

fn study(a: StudyArgs, out: &mut dyn Write) -> CliResult {
    let mut cfg: StudyConfig = load_config(&a.common)?;
    if a.full_scale {
        cfg = cfg.full_scale();
    }
    if let Some(v) = a.replicates {
        cfg.replicates = v;
    }
    if let Some(d) = a.dims {
        cfg.sim.dims = d;
    }
    if let Some(v) = a.burn {
        cfg.n_burn = v;
    }
    if let Some(v) = a.iter {
        cfg.n_iter = v;
    }
    if let Some(v) = a.starts {
        cfg.als_starts = v;
    }
    if let Some(r) = a.ranks {
        cfg.ranks = r;
    }
    if let Some(t) = a.true_rank {
        match a.study {
            StudyName::RankSelect => cfg.true_ranks = t,
            _ if t.len() == 1 => cfg.sim.rank = t[0],
            _ => return Err(CliError::Usage("this study takes a single --true-rank".into())),
        }
    }
    if let Some(s) = a.common.seed {
        cfg.sim.seed = s;
    }
    cfg.validate().map_err(usage)?;
    let dir = out_dir(&a.common)?;
    let artifacts = if a.no_artifacts { None } else { dir };
    let rep = match a.study {
        StudyName::KnownRank => run_known_rank_study(&cfg, artifacts)?,
        StudyName::Misspec => run_misspec_study(&cfg, artifacts)?,
        StudyName::RankSelect => run_rank_selection(&cfg, artifacts)?,
    };
    if let Some(d) = dir {
        rep.write(d)?;
    }
    say(out, format_args!("{}", render(&rep)))
}

fn means(a: MeansArgs, out: &mut dyn Write) -> CliResult {
    let mut cfg: MeansConfig = load_config(&a.common)?;
    if let Some(v) = a.rank {
        cfg.rank = v;
    }
    if let Some(v) = a.burn {
        cfg.n_burn = v;
    }
    if let Some(v) = a.iter {
        cfg.n_iter = v;
    }
    if let Some(v) = a.thin {
        cfg.thin = v;
    }
    if a.no_standardize {
        cfg.standardize = false;
    }
    if let Some(s) = a.common.seed {
        cfg.seed = s;
    }
    if cfg.rank == 0 || cfg.thin == 0 || cfg.n_iter < cfg.thin || !(cfg.tau0_sq > 0.0) {
        return Err(CliError::Usage(
            "means-fit needs rank >= 1, thin >= 1, iter >= thin and tau0_sq > 0".into(),
        ));
    }
    let data = CrossTabData::read_csv_path(&a.input).map_err(|e| data_err(&a.input, e))?;
    let fit = means_fit(&data, &cfg)?;
    let occupied = fit.counts.iter().filter(|&&n| n > 0).count();
    say(
        out,
        format_args!(
            "{} observations, {} of {} cells occupied, {} saved draws, B fit loss {:.2e}\n",
            data.n(),
            occupied,
            fit.counts.len(),
            fit.count,
            fit.b_fit_loss
        ),
    )?;
    if let Some(dir) = out_dir(&a.common)? {
        let p = data.p();
        let k = data.levels().len();
        let mut cols = numbered("x", k);
        cols.push("n".into());
        for prefix in ["ybar_", "mu_hat_", "beta_hat_"] {
            cols.extend(data.y_names().iter().map(|s| format!("{prefix}{s}")));
        }
        let b_hat = fit.b_hat.compose();
        let cells = fit.counts.len();
        let b_mat = DMatrix::from_column_slice(cells, p, b_hat.data());
        let table = DMatrix::from_fn(cells, k + 1 + 3 * p, |c, j| {
            if j < k {
                (cell_levels(data.levels(), c)[j] + 1) as f64
            } else if j == k {
                fit.counts[c] as f64
            } else {
                let (block, col) = ((j - k - 1) / p, (j - k - 1) % p);
                match block {
                    0 => fit.cell_means[(c, col)],
                    1 => fit.mu_hat[(c, col)],
                    _ => b_mat[(c, col)],
                }
            }
        });
        write_matrix_csv(dir.join("cells.csv"), Some("cell"), &cols, &table)?;
        for kk in 0..k {
            write_matrix_csv(
                dir.join(format!("u{}.csv", kk + 1)),
                Some("level"),
                &numbered("r", cfg.rank),
                fit.u_hat(kk),
            )?;
        }
        write_matrix_csv(dir.join("v.csv"), Some("response"), &numbered("r", cfg.rank), fit.v_hat())?;
        crate::study::write_csv(dir.join("shrinkage.csv"), &fit.shrinkage)?;
        crate::study::write_csv(dir.join("trace.csv"), &fit.trace)?;
        write_json(
            dir.join("fit.json"),
            &serde_json::json!({
                "config": cfg,
                "saved": fit.count,
                "b_fit_loss": fit.b_fit_loss,
                "responses": data.y_names(),
                "center": fit.center.iter().copied().collect::<Vec<_>>(),
                "scale": fit.scale.iter().copied().collect::<Vec<_>>(),
            }),
        )?;
    }
    Ok(())
}

fn probit(a: ProbitArgs, out: &mut dyn Write) -> CliResult {
    let mut cfg: ProbitConfig = load_config(&a.common)?;
    if let Some(v) = a.rank {
        cfg.rank = v;
    }
    if let Some(v) = a.burn {
        cfg.n_burn = v;
    }
    if let Some(v) = a.iter {
        cfg.n_iter = v;
    }
    if let Some(v) = a.thin {
        cfg.thin = v;
    }
    if let Some(s) = a.common.seed {
        cfg.seed = s;
    }
    if cfg.thin == 0 || cfg.n_iter < cfg.thin || !(cfg.beta_var > 0.0) || !(cfg.cutoff_bound > 0.0) {
        return Err(CliError::Usage(
            "probit-fit needs thin >= 1, iter >= thin, beta_var > 0 and cutoff_bound > 0".into(),
        ));
    }
    let panel = OrdinalPanel::read_csv_path(&a.input).map_err(|e| data_err(&a.input, e))?;
    let fit = probit_fit(&panel, &cfg)?;
    say(out, format_args!("{} cells, {} saved draws\n", panel.cells().len(), fit.count))?;
    say(out, format_args!("{:>6} {:>9} {:>8} {:>9} {:>9} {:>7}\n", "coef", "mean", "sd", "2.5%", "97.5%", "ess"))?;
    let q = panel.q();
    let mut table = DMatrix::zeros(q, 5);
    for j in 0..q {
        let (lo, hi) = fit.beta_interval[j];
        say(
            out,
            format_args!(
                "{:>6} {:>9.4} {:>8.4} {:>9.4} {:>9.4} {:>7.0}\n",
                format!("x{}", j + 1),
                fit.beta_mean[j],
                fit.beta_sd[j],
                lo,
                hi,
                fit.beta_ess[j]
            ),
        )?;
        table.set_row(
            j,
            &nalgebra::RowDVector::from_vec(vec![fit.beta_mean[j], fit.beta_sd[j], lo, hi, fit.beta_ess[j]]),
        );
    }
    if let Some(dir) = out_dir(&a.common)? {
        let cols: Vec<String> = ["mean", "sd", "lower", "upper", "ess"].iter().map(|s| s.to_string()).collect();
        write_matrix_csv(dir.join("beta.csv"), Some("coef"), &cols, &table)?;
        write_matrix_csv(dir.join("u_hat.csv"), Some("country"), &numbered("r", cfg.rank), &fit.u_hat)?;
        write_matrix_csv(dir.join("v_hat.csv"), Some("time"), &numbered("r", cfg.rank), &fit.v_hat)?;
        let cut = DMatrix::from_column_slice(fit.cutoffs_mean.len(), 1, &fit.cutoffs_mean);
        write_matrix_csv(dir.join("cutoffs.csv"), Some("cutoff"), &["mean".to_string()], &cut)?;
        write_matrix_csv(dir.join("beta_draws.csv"), None, &numbered("x", q), &fit.beta_draws)?;
        write_json(dir.join("fit.json"), &serde_json::json!({ "config": cfg, "saved": fit.count }))?;
    }
    Ok(())
}

fn report(a: ReportArgs, out: &mut dyn Write) -> CliResult {
    let rep = crate::study::ExperimentReport::read(&a.dir).map_err(|e| data_err(&a.dir, e))?;
    say(out, format_args!("{}", render(&rep)))?;
    if a.verify {
        let v = verify(&a.dir, a.tol).map_err(|e| data_err(&a.dir, e))?;
        say(
            out,
            format_args!(
                "verified {} records, max relative difference {:.3e}, {} mismatches\n",
                v.checked,
                v.max_rel_diff,
                v.mismatches.len()
            ),
        )?;
        if !v.ok() {
            return Err(CliError::Data(format!(
                "{} ratios differ from their artifacts",
                v.mismatches.len()
            )));
        }
    }
    Ok(())
}
