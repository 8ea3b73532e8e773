//! Runs every (policy, seed) cell of an experiment and writes the per-cell
//! regret curves, their metadata sidecars and the across-seed summary.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use lbl_core::env::LatentModel;
use lbl_core::numfmt::g17;
use lbl_core::policies::{self, PolicySpec, RunResult};
use lbl_core::moments::InteractionRecord;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::CliError;

pub const CURVE_HEADER: &str = "t,cumulative_regret";
pub const SUMMARY_HEADER: &str = "policy,t,mean_regret,std_regret";
pub const SUMMARY_FILE: &str = "summary.csv";

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const GIT_DESCRIBE: &str = env!("LBL_GIT_DESCRIBE");

/// Contents of the JSON file written next to every cell CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellMetadata {
    pub policy: PolicySpec,
    pub label: String,
    pub seed: u64,
    pub sessions: u64,
    pub steps: usize,
    pub final_regret: f64,
    /// SHA-256 of the model's JSON serialization.
    pub model_hash: String,
    /// `explore_on_one` (explore with probability γ) or `explore_on_zero`.
    pub gate_polarity: String,
    pub version: String,
    pub git_describe: String,
}

#[derive(Debug)]
pub struct CellFailure {
    pub label: String,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Default)]
pub struct Report {
    pub cells: usize,
    pub failures: Vec<CellFailure>,
    pub output_dir: PathBuf,
}

pub fn model_hash(model: &LatentModel) -> String {
    let json = serde_json::to_vec(model).expect("model serializes");
    hex::encode(Sha256::digest(&json))
}

pub fn gate_polarity(spec: &PolicySpec) -> &'static str {
    if spec.literal_gate { "explore_on_zero" } else { "explore_on_one" }
}

pub fn curve_path(dir: &Path, label: &str, seed: u64) -> PathBuf {
    dir.join(format!("{label}_seed{seed}.csv"))
}

pub fn sidecar_path(dir: &Path, label: &str, seed: u64) -> PathBuf {
    dir.join(format!("{label}_seed{seed}.json"))
}

pub fn records_path(dir: &Path, label: &str, seed: u64) -> PathBuf {
    dir.join(format!("{label}_seed{seed}_records.csv"))
}

/// Runs the whole grid. Failed cells are reported, not fatal; the summary
/// covers the cells that finished.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Report, CliError> {
    let model = cfg.resolve_model()?;
    let dir = cfg.output_dir.clone();
    fs::create_dir_all(&dir)?;
    write_json(&dir.join("model.json"), &model)?;
    write_json(&dir.join("config.json"), cfg)?;
    let hash = model_hash(&model);

    let cells: Vec<(usize, u64)> = (0..cfg.policies.len())
        .flat_map(|p| cfg.seeds.iter().map(move |&s| (p, s)))
        .collect();
    let threads = cfg
        .parallelism
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Other(e.to_string()))?;
    log::info!("{} cells on {threads} threads into {}", cells.len(), dir.display());

    let outcomes: Vec<Result<Vec<f64>, String>> = pool.install(|| {
        cells
            .par_iter()
            .map(|&(p, seed)| {
                let spec = &cfg.policies[p];
                let out = run_cell(cfg, &model, &hash, spec, seed, &dir).map_err(|e| e.to_string());
                match &out {
                    Ok(curve) => log::info!(
                        "{} seed {seed}: final regret {}",
                        spec.label(),
                        curve.last().copied().unwrap_or(0.0)
                    ),
                    Err(e) => log::error!("{} seed {seed} failed: {e}", spec.label()),
                }
                out
            })
            .collect()
    });

    let mut failures = Vec::new();
    let mut curves: Vec<Vec<Vec<f64>>> = vec![Vec::new(); cfg.policies.len()];
    for (&(p, seed), outcome) in cells.iter().zip(outcomes) {
        match outcome {
            Ok(curve) => curves[p].push(curve),
            Err(error) => failures.push(CellFailure { label: cfg.policies[p].label(), seed, error }),
        }
    }
    let labeled: Vec<(String, Vec<Vec<f64>>)> =
        cfg.policies.iter().map(|p| p.label()).zip(curves).collect();
    write_summary(&dir.join(SUMMARY_FILE), &labeled)?;
    Ok(Report { cells: cells.len(), failures, output_dir: dir })
}

fn run_cell(
    cfg: &ExperimentConfig,
    model: &LatentModel,
    hash: &str,
    spec: &PolicySpec,
    seed: u64,
    dir: &Path,
) -> Result<Vec<f64>, CliError> {
    let label = spec.label();
    let result: RunResult = policies::run(model, cfg.sessions, spec, seed)?;
    let curve = result.ledger.cumulative;
    write_curve(&curve_path(dir, &label, seed), &curve)?;
    if cfg.write_records {
        let mut w = BufWriter::new(fs::File::create(records_path(dir, &label, seed))?);
        writeln!(w, "{}", InteractionRecord::CSV_HEADER)?;
        for r in &result.records {
            writeln!(w, "{}", r.to_csv_row())?;
        }
        w.flush()?;
    }
    let meta = CellMetadata {
        policy: spec.clone(),
        label: label.clone(),
        seed,
        sessions: cfg.sessions,
        steps: curve.len(),
        final_regret: curve.last().copied().unwrap_or(0.0),
        model_hash: hash.to_string(),
        gate_polarity: gate_polarity(spec).to_string(),
        version: VERSION.to_string(),
        git_describe: GIT_DESCRIBE.to_string(),
    };
    write_json(&sidecar_path(dir, &label, seed), &meta)?;
    Ok(curve)
}

pub fn write_curve(path: &Path, curve: &[f64]) -> Result<(), CliError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "{CURVE_HEADER}")?;
    for (t, r) in curve.iter().enumerate() {
        writeln!(w, "{},{}", t + 1, g17(*r))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_curve(path: &Path) -> Result<Vec<f64>, CliError> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(CURVE_HEADER) {
        return Err(CliError::Other(format!("{}: missing header", path.display())));
    }
    lines
        .map(|line| {
            let (_, value) = line
                .split_once(',')
                .ok_or_else(|| CliError::Other(format!("{}: bad row `{line}`", path.display())))?;
            value
                .parse::<f64>()
                .map_err(|e| CliError::Other(format!("{}: {e}", path.display())))
        })
        .collect()
}

/// Mean and sample standard deviation across curves at every step. One
/// curve gives a standard deviation of 0.
pub fn mean_std(curves: &[Vec<f64>]) -> Vec<(f64, f64)> {
    let Some(len) = curves.iter().map(Vec::len).min() else { return Vec::new() };
    let k = curves.len() as f64;
    (0..len)
        .map(|t| {
            let mean = curves.iter().map(|c| c[t]).sum::<f64>() / k;
            let var = if curves.len() > 1 {
                curves.iter().map(|c| (c[t] - mean).powi(2)).sum::<f64>() / (k - 1.0)
            } else {
                0.0
            };
            (mean, var.sqrt())
        })
        .collect()
}

fn write_summary(path: &Path, curves: &[(String, Vec<Vec<f64>>)]) -> Result<(), CliError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "{SUMMARY_HEADER}")?;
    for (label, runs) in curves {
        for (t, (mean, std)) in mean_std(runs).into_iter().enumerate() {
            writeln!(w, "{label},{},{},{}", t + 1, g17(mean), g17(std))?;
        }
    }
    w.flush()?;
    Ok(())
}

/// One parsed row of `summary.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub policy: String,
    pub t: usize,
    pub mean: f64,
    pub std: f64,
}

pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>, CliError> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(SUMMARY_HEADER) {
        return Err(CliError::Other(format!("{}: missing header", path.display())));
    }
    let bad = |line: &str| CliError::Other(format!("{}: bad row `{line}`", path.display()));
    lines
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(bad(line));
            }
            Ok(SummaryRow {
                policy: f[0].to_string(),
                t: f[1].parse().map_err(|_| bad(line))?,
                mean: f[2].parse().map_err(|_| bad(line))?,
                std: f[3].parse().map_err(|_| bad(line))?,
            })
        })
        .collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Other(e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_by_hand() {
        let curves = vec![vec![1.0, 2.0], vec![3.0, 6.0]];
        let s = mean_std(&curves);
        assert_eq!(s[0].0, 2.0);
        assert!((s[0].1 - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(s[1].0, 4.0);
        assert!((s[1].1 - 8f64.sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[vec![5.0]]), vec![(5.0, 0.0)]);
    }

    #[test]
    fn curve_round_trip() {
        let dir = std::env::temp_dir().join(format!("lbl-curve-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("c.csv");
        let curve = vec![0.1, 0.30000000000000004, 1e-300, 12345.678];
        write_curve(&path, &curve).unwrap();
        assert_eq!(read_curve(&path).unwrap(), curve);
        fs::remove_dir_all(&dir).unwrap();
    }
}
