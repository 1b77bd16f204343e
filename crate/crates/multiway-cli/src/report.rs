//! Text rendering of study reports and recomputation of their ratios from
//! saved artifacts.

use std::fmt::Write as _;
use std::path::Path;

use multiway::io::read_long_path;
use multiway::Result;
use serde::Serialize;

use crate::study::{artifact_dir, data_file, estimate_file, mse_ratio, rss_ratio, truth_file, ExperimentReport};

pub fn render(rep: &ExperimentReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "study {}: {} replicates, dims {:?}, chains {} burn-in + {} iterations",
        rep.study.name(),
        rep.config.replicates,
        rep.config.sim.dims,
        rep.config.n_burn,
        rep.config.n_iter
    );
    let _ = writeln!(
        s,
        "{:>9} {:>6} {:>9} {:>10} {:>10} {:>10} {:>10}",
        "true_rank", "rank", "method", "mean_mse", "median_mse", "mean_rss", "median_ess"
    );
    for r in rep.summary() {
        let ess = r.median_ess.map(|e| format!("{e:.0}")).unwrap_or_else(|| "-".into());
        let _ = writeln!(
            s,
            "{:>9} {:>6} {:>9} {:>10.4} {:>10.4} {:>10.4} {:>10}",
            r.true_rank, r.fitted_rank, r.method, r.mean_mse_ratio, r.median_mse_ratio, r.mean_rss_ratio, ess
        );
    }
    if let Some(c) = rep.known_rank_comparison() {
        let n = c.replicates;
        let _ = writeln!(s, "HB mse below LS: {}/{n}", c.hb_beats_ls_mse);
        let _ = writeln!(s, "mean additional reduction of HB over LS: {:.1}%", 100.0 * c.mean_hb_reduction);
        let _ = writeln!(s, "LS rss not above HB: {}/{n}", c.ls_rss_not_above_hb);
        if rep.records.iter().any(|r| r.method == crate::study::Method::Flat) {
            let _ = writeln!(s, "HB mse below FLAT: {}/{n}", c.hb_beats_flat_mse);
        }
    }
    let table = rep.rank_table();
    if !table.is_empty() {
        let ranks = &rep.config.ranks;
        let _ = write!(s, "DIC-selected rank frequencies\n{:>9}", "true_rank");
        for r in ranks {
            let _ = write!(s, " {r:>5}");
        }
        s.push('\n');
        for &t in &rep.config.true_ranks {
            let row: Vec<_> = table.iter().filter(|r| r.true_rank == t).collect();
            if row.is_empty() {
                continue;
            }
            let _ = write!(s, "{t:>9}");
            for r in row {
                let _ = write!(s, " {:>5.2}", r.frequency);
            }
            s.push('\n');
        }
    }
    s
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct Verification {
    pub checked: usize,
    pub max_rel_diff: f64,
    /// `(record index, reported, recomputed)` of ratios off by more than the tolerance.
    pub mismatches: Vec<(usize, f64, f64)>,
}

impl Verification {
    pub fn ok(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// Recomputes every record's ratios from the artifacts under `dir` and
/// compares them with the reported values at relative tolerance `tol`.
pub fn verify(dir: &Path, tol: f64) -> Result<Verification> {
    let rep = ExperimentReport::read(dir)?;
    let art = artifact_dir(dir);
    let mut v = Verification::default();
    for (n, r) in rep.records.iter().enumerate() {
        let theta = read_long_path(truth_file(&art, r.true_rank, r.replicate))?;
        let y = read_long_path(data_file(&art, r.true_rank, r.replicate))?;
        let est = read_long_path(estimate_file(&art, r))?;
        for (reported, fresh) in [
            (r.mse_ratio, mse_ratio(&est, &theta, &y)?),
            (r.rss_ratio, rss_ratio(&est, &y)?),
        ] {
            let rel = (reported - fresh).abs() / fresh.abs().max(f64::MIN_POSITIVE);
            v.max_rel_diff = v.max_rel_diff.max(rel);
            if !(rel <= tol) {
                v.mismatches.push((n, reported, fresh));
            }
        }
        v.checked += 1;
    }
    Ok(v)
}
