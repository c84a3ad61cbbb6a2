//! Batch runner: executes the configured experiments, writes per-cell CSVs,
//! combined metric tables and a manifest, and derives plot series from a
//! finished run.
//!
//! Layout of a run directory:
//!
//! ```text
//! config.json          effective configuration
//! results.csv          one row per run, gaps against M+Q
//! table.csv            seed means per cell
//! per_vehicle.csv
//! cells/<cell>/trajectory.csv
//! cells/<cell>/metrics.csv     (or failure.json)
//! manifest.json        hashes of everything above
//! ```

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::HarnessConfig;
use crate::error::{Error, Result};
use crate::metrics::{compute_metrics, write_per_vehicle_csv, write_results_csv, write_table_csv, MetricReport};
use crate::scenario::{run_experiment, ExperimentConfig, TrajectoryLog};

pub const MANIFEST: &str = "manifest.json";
pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const TIME_SPACE_FILE: &str = "time_space.csv";
pub const VELOCITY_ERROR_FILE: &str = "velocity_error.csv";

const TRAJECTORY_HEADER: &str = "step,time,vehicle,p_ref,p,v_ref,v,a,u_p,u_r,u_a,infeasible_flag";

/// Directory name of one run, e.g. `variable_affine_mpc_q_seed7`.
pub fn cell_name(cfg: &ExperimentConfig) -> String {
    format!(
        "{}_{}_{}_seed{}",
        cfg.scenario.kind.as_str(),
        cfg.disturbance.kind.as_str(),
        cfg.controller.as_str(),
        cfg.seed
    )
}

pub fn write_trajectory_csv<W: Write>(mut w: W, log: &TrajectoryLog) -> Result<()> {
    writeln!(w, "{TRAJECTORY_HEADER}")?;
    for r in &log.records {
        for i in 0..r.state.len() {
            writeln!(
                w,
                "{},{:.2},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
                r.k,
                r.time,
                i,
                r.reference.positions[i],
                r.state.positions[i],
                r.reference.velocities[i],
                r.state.velocities[i],
                r.state.accelerations[i],
                r.u_p[i],
                r.u_r[i],
                r.u_a[i],
                u8::from(r.infeasible)
            )?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellEntry {
    pub name: String,
    pub scenario: String,
    pub error: String,
    pub controller: String,
    pub seed: u64,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub config_sha256: String,
    pub seeds: Vec<u64>,
    pub cells: Vec<CellEntry>,
    pub files: Vec<FileEntry>,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub manifest: Manifest,
    pub reports: Vec<MetricReport>,
}

impl RunSummary {
    pub fn failures(&self) -> impl Iterator<Item = &CellEntry> {
        self.manifest.cells.iter().filter(|c| !c.ok)
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_file(dir: &Path, rel: &str, bytes: &[u8]) -> Result<()> {
    let path = dir.join(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn to_bytes(f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

struct CellOutput {
    entry: CellEntry,
    report: Option<MetricReport>,
    files: Vec<String>,
}

fn run_cell(out: &Path, cfg: &ExperimentConfig) -> Result<CellOutput> {
    let name = cell_name(cfg);
    let dir = format!("cells/{name}");
    let mut entry = CellEntry {
        name,
        scenario: cfg.scenario.kind.as_str().into(),
        error: cfg.disturbance.kind.as_str().into(),
        controller: cfg.controller.as_str().into(),
        seed: cfg.seed,
        ok: true,
        failure: None,
    };
    let outcome = run_experiment(cfg).and_then(|log| compute_metrics(&log).map(|m| (log, m)));
    match outcome {
        Ok((log, report)) => {
            let traj = format!("{dir}/{TRAJECTORY_FILE}");
            let metrics = format!("{dir}/metrics.csv");
            write_file(out, &traj, &to_bytes(|b| write_trajectory_csv(b, &log))?)?;
            write_file(
                out,
                &metrics,
                &to_bytes(|b| write_results_csv(b, std::slice::from_ref(&report)))?,
            )?;
            Ok(CellOutput {
                entry,
                report: Some(report),
                files: vec![traj, metrics],
            })
        }
        Err(e) => {
            entry.ok = false;
            entry.failure = Some(e.to_string());
            let failure = format!("{dir}/failure.json");
            let mut text = serde_json::to_string_pretty(&entry)?;
            text.push('\n');
            write_file(out, &failure, text.as_bytes())?;
            Ok(CellOutput {
                entry,
                report: None,
                files: vec![failure],
            })
        }
    }
}

/// Run every experiment of `cfg` into `out`. Failing cells leave a
/// `failure.json` and are marked in the manifest; the other cells are still
/// written. Errors are returned only for invalid configuration and I/O.
pub fn run_harness(cfg: &HarnessConfig, out: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    let stored = HarnessConfig {
        output_dir: None,
        ..cfg.clone()
    };
    let config_text = stored.to_json()?;
    write_file(out, "config.json", config_text.as_bytes())?;

    let cells: Vec<CellOutput> = cfg
        .experiments()
        .par_iter()
        .map(|e| run_cell(out, e))
        .collect::<Result<_>>()?;

    let reports: Vec<MetricReport> = cells.iter().filter_map(|c| c.report.clone()).collect();
    let mut files = vec!["config.json".to_string()];
    for (rel, bytes) in [
        ("results.csv", to_bytes(|b| write_results_csv(b, &reports))?),
        ("table.csv", to_bytes(|b| write_table_csv(b, &reports))?),
        ("per_vehicle.csv", to_bytes(|b| write_per_vehicle_csv(b, &reports))?),
    ] {
        write_file(out, rel, &bytes)?;
        files.push(rel.to_string());
    }
    files.extend(cells.iter().flat_map(|c| c.files.iter().cloned()));

    let files = files
        .into_iter()
        .map(|rel| {
            let bytes = fs::read(out.join(&rel))?;
            Ok(FileEntry {
                sha256: sha256_hex(&bytes),
                bytes: bytes.len() as u64,
                path: rel,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config_sha256: sha256_hex(config_text.as_bytes()),
        seeds: cfg.seeds.clone(),
        cells: cells.into_iter().map(|c| c.entry).collect(),
        files,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    write_file(out, MANIFEST, text.as_bytes())?;
    Ok(RunSummary {
        out_dir: out.to_path_buf(),
        manifest,
        reports,
    })
}

#[derive(Debug, Deserialize)]
struct TrajectoryRow {
    step: usize,
    time: f64,
    vehicle: usize,
    p_ref: f64,
    p: f64,
    v_ref: f64,
    v: f64,
}

fn read_trajectory(path: &Path) -> Result<Vec<TrajectoryRow>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?;
    rdr.deserialize()
        .enumerate()
        .map(|(i, row)| {
            row.map_err(|e| Error::Parse {
                line: i + 2,
                message: format!("{}: {e}", path.display()),
            })
        })
        .collect()
}

/// Derive plot series from a finished run directory into `run_dir/plots`:
/// `time_space.csv` (reference and realized position per vehicle) and
/// `velocity_error.csv` (platoon-mean `v − v*` per run). Returns the written
/// paths.
pub fn export_plot_data(run_dir: &Path) -> Result<Vec<PathBuf>> {
    let manifest_path = run_dir.join(MANIFEST);
    if !manifest_path.is_file() {
        return Err(Error::MissingArtifacts(vec![manifest_path.display().to_string()]));
    }
    let manifest: Manifest = serde_json::from_slice(&fs::read(&manifest_path)?)?;
    let cells: Vec<&CellEntry> = manifest.cells.iter().filter(|c| c.ok).collect();
    let missing: Vec<String> = cells
        .iter()
        .map(|c| run_dir.join("cells").join(&c.name).join(TRAJECTORY_FILE))
        .filter(|p| !p.is_file())
        .map(|p| p.display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingArtifacts(missing));
    }
    if cells.is_empty() {
        return Err(Error::MissingArtifacts(vec![format!(
            "{}/cells/*/{TRAJECTORY_FILE}",
            run_dir.display()
        )]));
    }

    let mut ts = BufWriter::new(Vec::new());
    let mut ve = BufWriter::new(Vec::new());
    writeln!(ts, "scenario,error_kind,controller,seed,time,vehicle,p_ref,p")?;
    writeln!(ve, "scenario,error_kind,controller,seed,time,mean_v_error,mean_abs_v_error")?;
    for c in cells {
        let rows = read_trajectory(&run_dir.join("cells").join(&c.name).join(TRAJECTORY_FILE))?;
        let prefix = format!("{},{},{},{}", c.scenario, c.error, c.controller, c.seed);
        for r in &rows {
            writeln!(ts, "{prefix},{:.2},{},{:.6},{:.6}", r.time, r.vehicle, r.p_ref, r.p)?;
        }
        for step in rows.chunk_by(|a, b| a.step == b.step) {
            let n = step.len() as f64;
            let mean = step.iter().map(|r| r.v - r.v_ref).sum::<f64>() / n;
            let mean_abs = step.iter().map(|r| (r.v - r.v_ref).abs()).sum::<f64>() / n;
            writeln!(ve, "{prefix},{:.2},{mean:.6},{mean_abs:.6}", step[0].time)?;
        }
    }
    let plots = run_dir.join("plots");
    fs::create_dir_all(&plots)?;
    let mut written = Vec::new();
    for (name, buf) in [(TIME_SPACE_FILE, ts), (VELOCITY_ERROR_FILE, ve)] {
        let path = plots.join(name);
        fs::write(&path, buf.into_inner().map_err(|e| e.into_error())?)?;
        written.push(path);
    }
    Ok(written)
}
