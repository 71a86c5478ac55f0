//! report.csv, report.json, verdicts.csv and plan.json.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Experiment, MetricsReport, Mode, ProtocolPlan, SegmentRow};
use crate::error::{Error, Result};
use crate::faults::FaultSpec;
use crate::runtime::verdicts_csv;

pub const REPORT_CSV_HEADER: &str =
    "segment_id,copy,mode,injected_sensors,flagged_sensors,tp,fp,fn,first_correct_delay_min";

/// One line per segment copy; sensor lists are `;`-separated.
pub fn report_csv(rows: &[SegmentRow]) -> String {
    let mut out = String::from(REPORT_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let delay = r.first_correct_delay_min.map(|d| d.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.segment_id,
            r.copy,
            r.mode,
            r.injected.join(";"),
            r.flagged.join(";"),
            r.tp,
            r.fp,
            r.fn_,
            delay
        )
        .expect("string write");
    }
    out
}

/// Wall-clock costs; kept out of the CSV so that it stays reproducible.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub train_secs: f64,
    pub eval_secs: f64,
}

/// Shape of report.json.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportJson {
    pub mode: Mode,
    pub seed: u64,
    pub scaled: bool,
    pub protocol: ProtocolPlan,
    pub metrics: MetricsReport,
    pub segments: Vec<SegmentRow>,
    pub timing: Timing,
}

impl ReportJson {
    pub fn new(experiment: &Experiment, timing: Timing) -> Self {
        ReportJson {
            mode: experiment.mode,
            seed: experiment.seed,
            scaled: experiment.plan.scaled,
            protocol: experiment.plan.clone(),
            metrics: experiment.metrics.clone(),
            segments: experiment.rows.clone(),
            timing,
        }
    }
}

/// The injection plan as written to plan.json and read back by `inject`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanFile {
    pub mode: Mode,
    pub seed: u64,
    pub faults: Vec<FaultSpec>,
}

impl PlanFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes report.json, report.csv, verdicts.csv and plan.json into `dir`.
pub fn write_reports(dir: &Path, experiment: &Experiment, timing: Timing) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = serde_json::to_string_pretty(&ReportJson::new(experiment, timing))?;
    write(&dir.join("report.json"), &json)?;
    write(&dir.join("report.csv"), &report_csv(&experiment.rows))?;
    let logs = experiment.logs.iter().map(|(label, log)| (label.as_str(), log));
    write(&dir.join("verdicts.csv"), &verdicts_csv(logs))?;
    let plan = PlanFile {
        mode: experiment.mode,
        seed: experiment.seed,
        faults: experiment.faults.clone(),
    };
    write(&dir.join("plan.json"), &serde_json::to_string_pretty(&plan)?)
}
