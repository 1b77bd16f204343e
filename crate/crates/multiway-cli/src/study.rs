//! Simulation studies: estimation at the true rank, over a grid of
//! misspecified ranks, and DIC rank selection.
//!
//! Every fit draws from a substream keyed by `(true rank, replicate, fitted
//! rank, method)`, so results do not depend on the thread count or on which
//! other fits run.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use multiway::als::{als_fit, AlsConfig, AlsResult};
use multiway::hbayes::{dic, ess, prepare_chain, run_chain_from, ChainConfig, ChainMode, PsiScatter};
use multiway::io::write_long_path;
use multiway::{Error, MultiwayArray, Result, RngStream};
use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::sim::{simulate_replicate, SimSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "LS")]
    Ls,
    #[serde(rename = "HB")]
    Hb,
    /// Rank-R least-squares approximation of the hierarchical posterior mean.
    #[serde(rename = "HB-point")]
    HbPoint,
    #[serde(rename = "FLAT")]
    Flat,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Ls, Method::Hb, Method::HbPoint, Method::Flat];

    pub fn name(self) -> &'static str {
        match self {
            Method::Ls => "LS",
            Method::Hb => "HB",
            Method::HbPoint => "HB-point",
            Method::Flat => "FLAT",
        }
    }

    fn key(self) -> u64 {
        self as u64 + 1
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidParameter(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StudyKind {
    KnownRank,
    Misspec,
    RankSelect,
}

impl StudyKind {
    pub fn name(self) -> &'static str {
        match self {
            StudyKind::KnownRank => "known-rank",
            StudyKind::Misspec => "misspec",
            StudyKind::RankSelect => "rank-select",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub sim: SimSpec,
    pub replicates: usize,
    pub n_burn: usize,
    pub n_iter: usize,
    pub thin: usize,
    /// Fitted ranks for the misspecification and rank-selection studies.
    pub ranks: Vec<usize>,
    /// Generating ranks for rank selection.
    pub true_ranks: Vec<usize>,
    pub als_starts: usize,
    pub flat_tau2: f64,
    pub psi_scatter: PsiScatter,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            sim: SimSpec::default(),
            replicates: 20,
            n_burn: 500,
            n_iter: 2000,
            thin: 1,
            ranks: (1..=8).collect(),
            true_ranks: vec![2, 4, 6],
            als_starts: 20,
            flat_tau2: 100.0,
            psi_scatter: PsiScatter::default(),
        }
    }
}

impl StudyConfig {
    /// Full-length schedule: 100 replicates, 1000 burn-in and
    /// 10000 saved iterations.
    pub fn full_scale(mut self) -> Self {
        self.replicates = 100;
        self.n_burn = 1000;
        self.n_iter = 10_000;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        if self.replicates == 0 {
            return Err(Error::InvalidParameter("need at least one replicate".into()));
        }
        if self.ranks.is_empty() || self.ranks.contains(&0) || self.true_ranks.contains(&0) {
            return Err(Error::InvalidParameter("ranks must be positive and the rank grid nonempty".into()));
        }
        self.chain(1, ChainMode::Hierarchical).validate()?;
        AlsConfig {
            n_starts: self.als_starts,
            ..AlsConfig::new(1)
        }
        .validate()
    }

    fn chain(&self, rank: usize, mode: ChainMode) -> ChainConfig {
        ChainConfig {
            rank,
            n_burn: self.n_burn,
            n_iter: self.n_iter,
            thin: self.thin,
            mode,
            flat_tau2: self.flat_tau2,
            psi_scatter: self.psi_scatter,
            als_starts: self.als_starts,
            ..ChainConfig::default()
        }
    }
}

/// One fitted estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub true_rank: usize,
    pub replicate: usize,
    pub fitted_rank: usize,
    pub method: Method,
    /// `||theta_hat - theta||^2 / ||y - theta||^2`.
    pub mse_ratio: f64,
    /// `||y - theta_hat||^2 / ||y||^2`.
    pub rss_ratio: f64,
    pub dic: Option<f64>,
    pub p_d: Option<f64>,
    /// ESS of the `||theta||^2` trace.
    pub ess: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRow {
    pub true_rank: usize,
    pub replicate: usize,
    pub selected_rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankTableRow {
    pub true_rank: usize,
    pub selected_rank: usize,
    pub count: usize,
    pub frequency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub true_rank: usize,
    pub fitted_rank: usize,
    pub method: Method,
    pub n: usize,
    pub mean_mse_ratio: f64,
    pub median_mse_ratio: f64,
    pub mean_rss_ratio: f64,
    pub median_ess: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub study: StudyKind,
    pub config: StudyConfig,
    pub records: Vec<Record>,
    pub selections: Vec<SelectionRow>,
}

pub fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        f64::NAN
    }
}

pub fn mse_ratio(theta_hat: &MultiwayArray, theta: &MultiwayArray, y: &MultiwayArray) -> Result<f64> {
    Ok(ratio(theta_hat.sq_dist(theta)?, y.sq_dist(theta)?))
}

pub fn rss_ratio(theta_hat: &MultiwayArray, y: &MultiwayArray) -> Result<f64> {
    Ok(ratio(y.sq_dist(theta_hat)?, y.sq_norm()))
}

pub fn artifact_dir(out: &Path) -> PathBuf {
    out.join("artifacts")
}

pub fn truth_file(dir: &Path, true_rank: usize, replicate: usize) -> PathBuf {
    dir.join(format!("theta_t{true_rank}_r{replicate}.txt"))
}

pub fn data_file(dir: &Path, true_rank: usize, replicate: usize) -> PathBuf {
    dir.join(format!("y_t{true_rank}_r{replicate}.txt"))
}

pub fn estimate_file(dir: &Path, r: &Record) -> PathBuf {
    dir.join(format!(
        "est_t{}_r{}_R{}_{}.txt",
        r.true_rank, r.replicate, r.fitted_rank, r.method
    ))
}

/// Runs `f` on a pool sized by `MULTIWAY_THREADS` when that is set.
pub fn with_pool<T: Send>(f: impl FnOnce() -> T + Send) -> Result<T> {
    match std::env::var("MULTIWAY_THREADS") {
        Ok(v) => {
            let n: usize = v
                .trim()
                .parse()
                .map_err(|_| Error::InvalidParameter(format!("MULTIWAY_THREADS must be a count, got {v:?}")))?;
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::InvalidParameter(e.to_string()))?;
            Ok(pool.install(f))
        }
        Err(_) => Ok(f()),
    }
}

struct Fits<'a> {
    cfg: &'a StudyConfig,
    root: RngStream,
    artifacts: Option<PathBuf>,
}

struct Case<'a> {
    true_rank: usize,
    replicate: usize,
    theta: &'a MultiwayArray,
    y: &'a MultiwayArray,
}

impl Fits<'_> {
    fn rng(&self, c: &Case, rank: usize, method: Method) -> RngStream {
        self.root
            .substream(&[c.true_rank as u64, c.replicate as u64, rank as u64, method.key()])
    }

    fn record(&self, c: &Case, rank: usize, method: Method, est: &MultiwayArray) -> Result<Record> {
        let r = Record {
            true_rank: c.true_rank,
            replicate: c.replicate,
            fitted_rank: rank,
            method,
            mse_ratio: mse_ratio(est, c.theta, c.y)?,
            rss_ratio: rss_ratio(est, c.y)?,
            dic: None,
            p_d: None,
            ess: None,
        };
        if let Some(dir) = &self.artifacts {
            write_long_path(est, estimate_file(dir, &r))?;
        }
        Ok(r)
    }

    fn least_squares(&self, c: &Case, rank: usize) -> Result<AlsResult> {
        let cfg = AlsConfig {
            n_starts: self.cfg.als_starts,
            ..AlsConfig::new(rank).with_seed(self.rng(c, rank, Method::Ls).next_u64())
        };
        als_fit(c.y, &cfg)
    }

    /// Chain initialized at the least-squares fit; returns the record and
    /// the posterior mean.
    fn chain(&self, c: &Case, fit: &AlsResult, rank: usize, method: Method) -> Result<(Record, MultiwayArray)> {
        let mode = if method == Method::Flat {
            ChainMode::Flat
        } else {
            ChainMode::Hierarchical
        };
        let cfg = self.cfg.chain(rank, mode);
        let (sampler, init) = prepare_chain(c.y, &cfg, fit)?;
        let mut rng = self.rng(c, rank, method);
        let out = run_chain_from(c.y, &cfg, &sampler, init, &mut rng)?;
        let mean = out.posterior_theta()?;
        let d = dic(&out, c.y)?;
        let norms: Vec<f64> = out.trace.iter().map(|t| t.theta_norm2).collect();
        let mut r = self.record(c, rank, method, &mean)?;
        r.dic = Some(d.dic);
        r.p_d = Some(d.p_d);
        r.ess = if norms.len() >= 10 { Some(ess(&norms)?) } else { None };
        Ok((r, mean))
    }

    fn fit(&self, c: &Case, rank: usize, methods: &[Method]) -> Result<Vec<Record>> {
        let fit = self.least_squares(c, rank)?;
        let mut out = Vec::new();
        if methods.contains(&Method::Ls) {
            out.push(self.record(c, rank, Method::Ls, &fit.theta())?);
        }
        if methods.contains(&Method::Hb) || methods.contains(&Method::HbPoint) {
            let (r, mean) = self.chain(c, &fit, rank, Method::Hb)?;
            if methods.contains(&Method::Hb) {
                out.push(r);
            }
            if methods.contains(&Method::HbPoint) {
                let cfg = AlsConfig {
                    n_starts: self.cfg.als_starts,
                    ..AlsConfig::new(rank).with_seed(self.rng(c, rank, Method::HbPoint).next_u64())
                };
                let point = als_fit(&mean, &cfg)?.theta();
                out.push(self.record(c, rank, Method::HbPoint, &point)?);
            }
        }
        if methods.contains(&Method::Flat) {
            out.push(self.chain(c, &fit, rank, Method::Flat)?.0);
        }
        Ok(out)
    }
}

fn run(
    kind: StudyKind,
    cfg: &StudyConfig,
    true_ranks: &[usize],
    ranks: &[usize],
    methods: &[Method],
    out: Option<&Path>,
) -> Result<ExperimentReport> {
    cfg.validate()?;
    let artifacts = out.map(artifact_dir);
    if let Some(dir) = &artifacts {
        fs::create_dir_all(dir)?;
    }
    let fits = Fits {
        cfg,
        root: RngStream::new(cfg.sim.seed).substream(&[0x6669_7473]),
        artifacts,
    };
    let jobs: Vec<(usize, usize)> = true_ranks
        .iter()
        .flat_map(|&t| (0..cfg.replicates).map(move |r| (t, r)))
        .collect();
    let per_case: Vec<Result<Vec<Record>>> = with_pool(|| {
        jobs.par_iter()
            .map(|&(t, rep)| {
                let spec = SimSpec {
                    rank: t,
                    ..cfg.sim.clone()
                };
                let (theta, y) = simulate_replicate(&spec, rep as u64)?;
                if let Some(dir) = &fits.artifacts {
                    write_long_path(&theta, truth_file(dir, t, rep))?;
                    write_long_path(&y, data_file(dir, t, rep))?;
                }
                let case = Case {
                    true_rank: t,
                    replicate: rep,
                    theta: &theta,
                    y: &y,
                };
                let grid: Vec<Result<Vec<Record>>> =
                    ranks.par_iter().map(|&rank| fits.fit(&case, rank, methods)).collect();
                let mut all = Vec::new();
                for g in grid {
                    all.extend(g?);
                }
                Ok(all)
            })
            .collect()
    })?;
    let mut records = Vec::new();
    for c in per_case {
        records.extend(c?);
    }
    let selections = if kind == StudyKind::RankSelect {
        select_ranks(&records)
    } else {
        Vec::new()
    };
    Ok(ExperimentReport {
        study: kind,
        config: cfg.clone(),
        records,
        selections,
    })
}

/// Each method at the generating rank `cfg.sim.rank`.
pub fn run_known_rank_study(cfg: &StudyConfig, out: Option<&Path>) -> Result<ExperimentReport> {
    let r = cfg.sim.rank;
    run(StudyKind::KnownRank, cfg, &[r], &[r], &Method::ALL, out)
}

/// Least squares and the hierarchical posterior mean at every rank in `cfg.ranks`.
pub fn run_misspec_study(cfg: &StudyConfig, out: Option<&Path>) -> Result<ExperimentReport> {
    run(
        StudyKind::Misspec,
        cfg,
        &[cfg.sim.rank],
        &cfg.ranks,
        &[Method::Ls, Method::Hb],
        out,
    )
}

/// For each generating rank in `cfg.true_ranks`, the rank in `cfg.ranks`
/// with the smallest DIC.
pub fn run_rank_selection(cfg: &StudyConfig, out: Option<&Path>) -> Result<ExperimentReport> {
    run(StudyKind::RankSelect, cfg, &cfg.true_ranks, &cfg.ranks, &[Method::Hb], out)
}

fn select_ranks(records: &[Record]) -> Vec<SelectionRow> {
    let mut best: std::collections::BTreeMap<(usize, usize), (f64, usize)> = Default::default();
    for r in records.iter().filter(|r| r.method == Method::Hb) {
        let Some(d) = r.dic else { continue };
        let e = best.entry((r.true_rank, r.replicate)).or_insert((f64::INFINITY, 0));
        if d < e.0 || (d == e.0 && r.fitted_rank < e.1) {
            *e = (d, r.fitted_rank);
        }
    }
    best.into_iter()
        .map(|((true_rank, replicate), (_, selected_rank))| SelectionRow {
            true_rank,
            replicate,
            selected_rank,
        })
        .collect()
}

fn median(mut xs: Vec<f64>) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Known-rank comparisons across replicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnownRankComparison {
    pub replicates: usize,
    pub hb_beats_ls_mse: usize,
    /// Mean over replicates of `1 - mse(HB) / mse(LS)`.
    pub mean_hb_reduction: f64,
    pub ls_rss_not_above_hb: usize,
    pub hb_beats_flat_mse: usize,
    pub ls_beats_raw: usize,
    pub hb_point_beats_ls_mse: usize,
}

impl ExperimentReport {
    pub fn get(&self, true_rank: usize, replicate: usize, rank: usize, method: Method) -> Option<&Record> {
        self.records.iter().find(|r| {
            r.true_rank == true_rank && r.replicate == replicate && r.fitted_rank == rank && r.method == method
        })
    }

    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut keys: Vec<(usize, usize, Method)> = self
            .records
            .iter()
            .map(|r| (r.true_rank, r.fitted_rank, r.method))
            .collect();
        keys.sort();
        keys.dedup();
        keys.into_iter()
            .map(|(t, f, m)| {
                let rs: Vec<&Record> = self
                    .records
                    .iter()
                    .filter(|r| r.true_rank == t && r.fitted_rank == f && r.method == m)
                    .collect();
                let n = rs.len();
                let mse: Vec<f64> = rs.iter().map(|r| r.mse_ratio).collect();
                let ess: Vec<f64> = rs.iter().filter_map(|r| r.ess).collect();
                SummaryRow {
                    true_rank: t,
                    fitted_rank: f,
                    method: m,
                    n,
                    mean_mse_ratio: mse.iter().sum::<f64>() / n as f64,
                    median_mse_ratio: median(mse),
                    mean_rss_ratio: rs.iter().map(|r| r.rss_ratio).sum::<f64>() / n as f64,
                    median_ess: (!ess.is_empty()).then(|| median(ess)),
                }
            })
            .collect()
    }

    pub fn mean_mse(&self, rank: usize, method: Method) -> f64 {
        let xs: Vec<f64> = self
            .records
            .iter()
            .filter(|r| r.fitted_rank == rank && r.method == method)
            .map(|r| r.mse_ratio)
            .collect();
        xs.iter().sum::<f64>() / xs.len() as f64
    }

    /// Frequency of each selected rank per generating rank; zero-count cells
    /// over `cfg.ranks` are included so rows sum to the replicate count.
    pub fn rank_table(&self) -> Vec<RankTableRow> {
        let mut rows = Vec::new();
        for &t in &self.config.true_ranks {
            let sel: Vec<usize> = self
                .selections
                .iter()
                .filter(|s| s.true_rank == t)
                .map(|s| s.selected_rank)
                .collect();
            if sel.is_empty() {
                continue;
            }
            for &r in &self.config.ranks {
                let count = sel.iter().filter(|&&s| s == r).count();
                rows.push(RankTableRow {
                    true_rank: t,
                    selected_rank: r,
                    count,
                    frequency: count as f64 / sel.len() as f64,
                });
            }
        }
        rows
    }

    pub fn known_rank_comparison(&self) -> Option<KnownRankComparison> {
        let rank = self.config.sim.rank;
        let t = rank;
        let mut c = KnownRankComparison {
            replicates: 0,
            hb_beats_ls_mse: 0,
            mean_hb_reduction: 0.0,
            ls_rss_not_above_hb: 0,
            hb_beats_flat_mse: 0,
            ls_beats_raw: 0,
            hb_point_beats_ls_mse: 0,
        };
        for rep in 0..self.config.replicates {
            let ls = self.get(t, rep, rank, Method::Ls)?;
            let hb = self.get(t, rep, rank, Method::Hb)?;
            c.replicates += 1;
            c.hb_beats_ls_mse += (hb.mse_ratio < ls.mse_ratio) as usize;
            c.mean_hb_reduction += 1.0 - hb.mse_ratio / ls.mse_ratio;
            c.ls_rss_not_above_hb += (ls.rss_ratio <= hb.rss_ratio) as usize;
            c.ls_beats_raw += (ls.mse_ratio < 1.0) as usize;
            if let Some(flat) = self.get(t, rep, rank, Method::Flat) {
                c.hb_beats_flat_mse += (hb.mse_ratio < flat.mse_ratio) as usize;
            }
            if let Some(p) = self.get(t, rep, rank, Method::HbPoint) {
                c.hb_point_beats_ls_mse += (p.mse_ratio < ls.mse_ratio) as usize;
            }
        }
        c.mean_hb_reduction /= c.replicates.max(1) as f64;
        Some(c)
    }

    /// Writes `records.csv`, `summary.csv`, `rank_table.csv` (rank selection
    /// only) and the `report.json` sidecar into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_csv(dir.join("records.csv"), &self.records)?;
        write_csv(dir.join("summary.csv"), &self.summary())?;
        if self.study == StudyKind::RankSelect {
            write_csv(dir.join("rank_table.csv"), &self.rank_table())?;
            write_csv(dir.join("selections.csv"), &self.selections)?;
        }
        let side = Sidecar {
            study: self.study,
            config: &self.config,
            files: self.files(),
            comparison: self.known_rank_comparison(),
        };
        fs::write(dir.join("report.json"), serde_json::to_string_pretty(&side)? + "\n")?;
        Ok(())
    }

    fn files(&self) -> Vec<&'static str> {
        let mut f = vec!["records.csv", "summary.csv"];
        if self.study == StudyKind::RankSelect {
            f.extend(["rank_table.csv", "selections.csv"]);
        }
        f
    }

    /// Reads a report written by [`ExperimentReport::write`].
    pub fn read(dir: &Path) -> Result<Self> {
        let side: SidecarOwned = serde_json::from_str(&fs::read_to_string(dir.join("report.json"))?)?;
        let records = read_csv(dir.join("records.csv"))?;
        let selections = if side.study == StudyKind::RankSelect {
            read_csv(dir.join("selections.csv"))?
        } else {
            Vec::new()
        };
        Ok(ExperimentReport {
            study: side.study,
            config: side.config,
            records,
            selections,
        })
    }
}

#[derive(Serialize)]
struct Sidecar<'a> {
    study: StudyKind,
    config: &'a StudyConfig,
    files: Vec<&'static str>,
    comparison: Option<KnownRankComparison>,
}

#[derive(Deserialize)]
struct SidecarOwned {
    study: StudyKind,
    config: StudyConfig,
}

pub fn write_csv<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_io)?;
    for r in rows {
        w.serialize(r).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: serde::de::DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let mut rdr = csv::Reader::from_path(path).map_err(csv_io)?;
    let mut out = Vec::new();
    for (n, row) in rdr.deserialize().enumerate() {
        out.push(row.map_err(|e| Error::Parse {
            line: n + 2,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

fn csv_io(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        kind => Error::InvalidParameter(format!("{kind:?}")),
    }
}
