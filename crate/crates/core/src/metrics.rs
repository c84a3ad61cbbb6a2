//! Tracking-error metrics and percentage gaps between controllers.
//!
//! Errors are realized minus reference. CAE sums `|error|` over every vehicle
//! and step; MAE is the largest single `|error|`.

use std::io::Write;

use serde::Serialize;

use crate::disturbance::DisturbanceKind;
use crate::error::{Error, Result};
use crate::scenario::{ControllerKind, ScenarioKind, TrajectoryLog};

/// CAE/MAE for position and velocity.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct ErrorSummary {
    pub cae_p: f64,
    pub cae_v: f64,
    pub mae_p: f64,
    pub mae_v: f64,
}

impl ErrorSummary {
    fn accumulate(&mut self, e_p: f64, e_v: f64) {
        let (e_p, e_v) = (e_p.abs(), e_v.abs());
        self.cae_p += e_p;
        self.cae_v += e_v;
        self.mae_p = self.mae_p.max(e_p);
        self.mae_v = self.mae_v.max(e_v);
    }

    /// Combine summaries of disjoint segments.
    pub fn merge(&self, other: &ErrorSummary) -> ErrorSummary {
        ErrorSummary {
            cae_p: self.cae_p + other.cae_p,
            cae_v: self.cae_v + other.cae_v,
            mae_p: self.mae_p.max(other.mae_p),
            mae_v: self.mae_v.max(other.mae_v),
        }
    }

    pub fn get(&self, metric: Metric) -> f64 {
        match metric {
            Metric::CaeP => self.cae_p,
            Metric::CaeV => self.cae_v,
            Metric::MaeP => self.mae_p,
            Metric::MaeV => self.mae_v,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    CaeP,
    CaeV,
    MaeP,
    MaeV,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Self::CaeP, Self::CaeV, Self::MaeP, Self::MaeV];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::CaeP => "cae_p",
            Self::CaeV => "cae_v",
            Self::MaeP => "mae_p",
            Self::MaeV => "mae_v",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub scenario: ScenarioKind,
    pub error: DisturbanceKind,
    pub controller: ControllerKind,
    pub seed: u64,
    pub steps: usize,
    pub total: ErrorSummary,
    pub per_vehicle: Vec<ErrorSummary>,
}

pub fn compute_metrics(log: &TrajectoryLog) -> Result<MetricReport> {
    if log.records.is_empty() {
        return Err(Error::InvalidInput("cannot compute metrics of an empty log".into()));
    }
    let n = log.n_vehicles();
    let mut total = ErrorSummary::default();
    let mut per_vehicle = vec![ErrorSummary::default(); n];
    for r in &log.records {
        for i in 0..n {
            let e_p = r.state.positions[i] - r.reference.positions[i];
            let e_v = r.state.velocities[i] - r.reference.velocities[i];
            total.accumulate(e_p, e_v);
            per_vehicle[i].accumulate(e_p, e_v);
        }
    }
    Ok(MetricReport {
        scenario: log.scenario,
        error: log.error,
        controller: log.controller,
        seed: log.seed,
        steps: log.records.len(),
        total,
        per_vehicle,
    })
}

/// Percentage reduction of `reference` relative to `baseline`; `None` when the
/// baseline is not positive.
pub fn compute_gap(baseline: f64, reference: f64) -> Option<f64> {
    (baseline > 0.0).then(|| 100.0 * (baseline - reference) / baseline)
}

/// Per-metric mean over several reports of the same cell.
pub fn mean_summary(reports: &[&MetricReport]) -> Option<ErrorSummary> {
    if reports.is_empty() {
        return None;
    }
    let k = reports.len() as f64;
    let mut out = ErrorSummary::default();
    for r in reports {
        out.cae_p += r.total.cae_p / k;
        out.cae_v += r.total.cae_v / k;
        out.mae_p += r.total.mae_p / k;
        out.mae_v += r.total.mae_v / k;
    }
    Some(out)
}

fn fmt_gap(gap: Option<f64>) -> String {
    gap.map_or_else(|| "NA".to_string(), |g| format!("{g:.4}"))
}

/// Results table: one row per report, with gaps of the M+Q run of the same
/// (scenario, error, seed) against each row.
pub fn write_results_csv<W: Write>(mut w: W, reports: &[MetricReport]) -> Result<()> {
    write!(w, "scenario,error_kind,controller,seed,cae_p,cae_v,mae_p,mae_v")?;
    for m in Metric::ALL {
        write!(w, ",gap_{}", m.as_str())?;
    }
    writeln!(w)?;
    for r in reports {
        let ours = reports.iter().find(|o| {
            o.controller == ControllerKind::MpcQ && o.scenario == r.scenario && o.error == r.error && o.seed == r.seed
        });
        write!(
            w,
            "{},{},{},{},{:.6},{:.6},{:.6},{:.6}",
            r.scenario.as_str(),
            r.error.as_str(),
            r.controller.as_str(),
            r.seed,
            r.total.cae_p,
            r.total.cae_v,
            r.total.mae_p,
            r.total.mae_v
        )?;
        for m in Metric::ALL {
            let gap = match ours {
                Some(o) if r.controller != ControllerKind::MpcQ => compute_gap(r.total.get(m), o.total.get(m)),
                _ => None,
            };
            write!(w, ",{}", fmt_gap(gap))?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Seed-averaged table: one row per (scenario, error, controller) in order of
/// first appearance, with gaps of the M+Q mean against each row.
pub fn write_table_csv<W: Write>(mut w: W, reports: &[MetricReport]) -> Result<()> {
    let mut cells: Vec<(ScenarioKind, DisturbanceKind, ControllerKind)> = Vec::new();
    for r in reports {
        let key = (r.scenario, r.error, r.controller);
        if !cells.contains(&key) {
            cells.push(key);
        }
    }
    let cell_mean = |key: (ScenarioKind, DisturbanceKind, ControllerKind)| {
        let members: Vec<&MetricReport> = reports
            .iter()
            .filter(|r| (r.scenario, r.error, r.controller) == key)
            .collect();
        (members.len(), mean_summary(&members))
    };
    write!(w, "scenario,error_kind,controller,seeds,cae_p,cae_v,mae_p,mae_v")?;
    for m in Metric::ALL {
        write!(w, ",gap_{}", m.as_str())?;
    }
    writeln!(w)?;
    for &(scenario, error, controller) in &cells {
        let (n, mean) = cell_mean((scenario, error, controller));
        let mean = mean.unwrap_or_default();
        let ours = (controller != ControllerKind::MpcQ)
            .then(|| cell_mean((scenario, error, ControllerKind::MpcQ)).1)
            .flatten();
        write!(
            w,
            "{},{},{},{},{:.6},{:.6},{:.6},{:.6}",
            scenario.as_str(),
            error.as_str(),
            controller.as_str(),
            n,
            mean.cae_p,
            mean.cae_v,
            mean.mae_p,
            mean.mae_v
        )?;
        for m in Metric::ALL {
            let gap = ours.and_then(|o| compute_gap(mean.get(m), o.get(m)));
            write!(w, ",{}", fmt_gap(gap))?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Per-vehicle breakdown, one row per (report, vehicle).
pub fn write_per_vehicle_csv<W: Write>(mut w: W, reports: &[MetricReport]) -> Result<()> {
    writeln!(w, "scenario,error_kind,controller,seed,vehicle,cae_p,cae_v,mae_p,mae_v")?;
    for r in reports {
        for (i, s) in r.per_vehicle.iter().enumerate() {
            writeln!(
                w,
                "{},{},{},{},{},{:.6},{:.6},{:.6},{:.6}",
                r.scenario.as_str(),
                r.error.as_str(),
                r.controller.as_str(),
                r.seed,
                i,
                s.cae_p,
                s.cae_v,
                s.mae_p,
                s.mae_v
            )?;
        }
    }
    Ok(())
}
