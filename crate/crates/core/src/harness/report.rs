//! Plot-ready percentile curves across seeds.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::config::Algorithm;
use super::run::{read_metrics_csv, RoundRecord, RunSummary};
use crate::error::{Error, Result};

/// Grid resolution of the emitted curves.
pub const GRID_POINTS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurvePoint {
    pub x: f64,
    pub median: f64,
    pub p10: f64,
    pub p90: f64,
}

/// Metrics of one seed.
#[derive(Debug, Clone)]
pub struct SeedSeries {
    pub summary: RunSummary,
    pub records: Vec<RoundRecord>,
}

/// Nearest-rank quantile of sorted data: element `ceil(q n)` (1-based).
pub fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty data");
    let rank = (q * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

/// `(p10, median, p90)` by nearest rank.
pub fn percentiles(values: &[f64]) -> (f64, f64, f64) {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    (nearest_rank(&sorted, 0.1), nearest_rank(&sorted, 0.5), nearest_rank(&sorted, 0.9))
}

/// `Regret(T) / sqrt(M T)` with `T = H * episodes`.
pub fn normalized_regret(record: &RoundRecord, agents: usize, horizon: usize) -> f64 {
    let scale = agents as f64 * horizon as f64 * record.cumulative_episodes;
    if scale > 0.0 {
        record.cumulative_regret / scale.sqrt()
    } else {
        0.0
    }
}

/// Last record whose cumulative episodes do not exceed `at`.
pub fn record_at(records: &[RoundRecord], at: f64) -> Option<&RoundRecord> {
    let end = records.partition_point(|r| r.cumulative_episodes <= at + 1e-9);
    end.checked_sub(1).map(|i| &records[i])
}

fn check_compatible(runs: &[SeedSeries]) -> Result<()> {
    let first = &runs
        .first()
        .ok_or_else(|| Error::InvalidArgument("no runs to summarize".into()))?
        .summary;
    for run in runs {
        let s = &run.summary;
        if (s.agents, s.horizon, s.states, s.actions, s.episode_budget)
            != (first.agents, first.horizon, first.states, first.actions, first.episode_budget)
        {
            return Err(Error::Config(format!(
                "seed {} of {} was run with a different grid (M, H, S, A or J) than seed {}",
                s.seed, s.algorithm, first.seed
            )));
        }
        if run.records.is_empty() {
            return Err(Error::InvalidArgument(format!("seed {} has no records", s.seed)));
        }
    }
    Ok(())
}

/// Per-agent episode grid shared by all seeds.
pub fn episode_grid(runs: &[SeedSeries], points: usize) -> Result<Vec<f64>> {
    check_compatible(runs)?;
    let end = runs
        .iter()
        .map(|r| r.records.last().map_or(0.0, |l| l.cumulative_episodes))
        .fold(f64::INFINITY, f64::min);
    Ok((1..=points).map(|i| end * i as f64 / points as f64).collect())
}

fn curve<F>(runs: &[SeedSeries], points: usize, x_scale: f64, value: F) -> Result<Vec<CurvePoint>>
where
    F: Fn(Option<&RoundRecord>, &RunSummary) -> f64,
{
    let grid = episode_grid(runs, points)?;
    Ok(grid
        .iter()
        .map(|&e| {
            let values: Vec<f64> = runs.iter().map(|r| value(record_at(&r.records, e), &r.summary)).collect();
            let (p10, median, p90) = percentiles(&values);
            CurvePoint {
                x: e * x_scale,
                median,
                p10,
                p90,
            }
        })
        .collect())
}

/// `MT/H` against `Regret / sqrt(MT)`.
pub fn regret_curve(runs: &[SeedSeries], points: usize) -> Result<Vec<CurvePoint>> {
    check_compatible(runs)?;
    let agents = runs[0].summary.agents;
    curve(runs, points, agents as f64, |rec, s| {
        rec.map_or(0.0, |r| normalized_regret(r, s.agents, s.horizon))
    })
}

/// `T/H` against rounds completed.
pub fn rounds_curve(runs: &[SeedSeries], points: usize) -> Result<Vec<CurvePoint>> {
    curve(runs, points, 1.0, |rec, _| rec.map_or(0.0, |r| r.round as f64))
}

fn collect_summaries(dir: &Path, found: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_summaries(&path, found)?;
        } else if path.file_name().is_some_and(|n| n == "summary.json") {
            found.push(path);
        }
    }
    Ok(())
}

/// Loads every seed under `dir`, grouped by algorithm and sorted by seed.
pub fn load_runs(dir: &Path) -> Result<BTreeMap<Algorithm, Vec<SeedSeries>>> {
    let mut paths = Vec::new();
    collect_summaries(dir, &mut paths)?;
    paths.sort();
    let mut groups: BTreeMap<Algorithm, Vec<SeedSeries>> = BTreeMap::new();
    for path in paths {
        let summary: RunSummary = serde_json::from_str(&fs::read_to_string(&path)?)?;
        let metrics = path.with_file_name("metrics.csv");
        let records = read_metrics_csv(&metrics)?;
        groups.entry(summary.algorithm).or_default().push(SeedSeries { summary, records });
    }
    for runs in groups.values_mut() {
        runs.sort_by_key(|r| r.summary.seed);
    }
    Ok(groups)
}

fn write_curve(path: &Path, x_name: &str, curve: &[CurvePoint]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record([x_name, "median", "p10", "p90"])?;
    for p in curve {
        writer.write_record([p.x.to_string(), p.median.to_string(), p.p10.to_string(), p.p90.to_string()])?;
    }
    writer.flush()?;
    Ok(())
}

/// Writes `<algorithm>_regret.csv` and `<algorithm>_rounds.csv` for every
/// algorithm found under `runs_dir`.
pub fn emit_plot_data(runs_dir: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let groups = load_runs(runs_dir)?;
    if groups.is_empty() {
        return Err(Error::InvalidArgument(format!("no runs found under {}", runs_dir.display())));
    }
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    for (algorithm, runs) in &groups {
        let regret = out_dir.join(format!("{algorithm}_regret.csv"));
        write_curve(&regret, "mt_over_h", &regret_curve(runs, GRID_POINTS)?)?;
        let rounds = out_dir.join(format!("{algorithm}_rounds.csv"));
        write_curve(&rounds, "t_over_h", &rounds_curve(runs, GRID_POINTS)?)?;
        written.push(regret);
        written.push(rounds);
    }
    Ok(written)
}
