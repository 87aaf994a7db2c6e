//! Ablation sweeps over one config axis, and run reports.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::drift::PolicyMode;
use crate::engine::{read_rounds, Engine, RoundRecord, Summary, ROUNDS_FILE, SUMMARY_FILE};
use crate::error::{Error, Result};
use crate::representations::{Metric, RepresentationKind};
use crate::simulation::{time_to_accuracy, SharedLevel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    TauGrid,
    PolicyModes,
    Representation,
    Metric,
    MaliciousFraction,
    SharedLevel,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 6] = [
        AblationAxis::TauGrid,
        AblationAxis::PolicyModes,
        AblationAxis::Representation,
        AblationAxis::Metric,
        AblationAxis::MaliciousFraction,
        AblationAxis::SharedLevel,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::TauGrid => "tau_grid",
            AblationAxis::PolicyModes => "policy_modes",
            AblationAxis::Representation => "representation",
            AblationAxis::Metric => "metric",
            AblationAxis::MaliciousFraction => "malicious_fraction",
            AblationAxis::SharedLevel => "shared_level",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }

    /// One labeled config per axis value; seeds are shared with `base`.
    pub fn cells(self, base: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
        let with = |label: String, f: &dyn Fn(&mut ExperimentConfig)| {
            let mut c = base.clone();
            f(&mut c);
            (label, c)
        };
        match self {
            AblationAxis::TauGrid => [(0.0, "0"), (1.0 / 6.0, "1/6"), (1.0 / 3.0, "1/3"), (0.5, "1/2"), (2.0 / 3.0, "2/3")]
                .into_iter()
                .map(|(t, label)| with(label.to_string(), &|c| c.policy.tau_fraction = t))
                .collect(),
            AblationAxis::PolicyModes => PolicyMode::ALL
                .into_iter()
                .map(|m| with(m.name().to_string(), &|c| c.policy.mode = m))
                .collect(),
            AblationAxis::Representation => [RepresentationKind::LabelHistogram, RepresentationKind::Embedding, RepresentationKind::Gradient]
                .into_iter()
                .map(|k| {
                    with(k.name().to_string(), &|c| {
                        c.representation.kind = k;
                        // Histogram metrics do not apply to real-valued vectors.
                        if k != RepresentationKind::LabelHistogram && c.representation.metric == Metric::JensenShannon {
                            c.representation.metric = Metric::SquaredEuclidean;
                        }
                    })
                })
                .collect(),
            AblationAxis::Metric => [Metric::L1, Metric::JensenShannon, Metric::SquaredEuclidean]
                .into_iter()
                .map(|m| with(m.name().to_string(), &|c| c.representation.metric = m))
                .collect(),
            AblationAxis::MaliciousFraction => [0.0, 0.1, 0.2, 0.3]
                .into_iter()
                .map(|f| with(f.to_string(), &|c| c.trace.malicious_fraction = f))
                .collect(),
            AblationAxis::SharedLevel => [None, Some(SharedLevel::Half), Some(SharedLevel::One), Some(SharedLevel::Two)]
                .into_iter()
                .map(|l| with(l.map_or("none", |l| l.name()).to_string(), &|c| c.trace.shared_level = l))
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: String,
    pub value: String,
    pub status: String,
    pub summary: Option<Summary>,
    pub error: Option<String>,
}

/// One run per axis value, each in `<base run dir>/<axis>/<index>`. A
/// failing cell is recorded and the sweep continues. Writes
/// `ablation_<axis>.csv` next to the cells.
pub fn run_ablation(base: &ExperimentConfig, axis: AblationAxis) -> Result<(PathBuf, Vec<AblationRow>)> {
    base.validate()?;
    let root = base.run_dir().join(axis.name());
    fs::create_dir_all(&root)?;
    let mut rows = Vec::new();
    for (i, (label, mut cfg)) in axis.cells(base).into_iter().enumerate() {
        let dir = root.join(format!("cell_{i:02}"));
        cfg.output.dir = Some(dir.clone());
        cfg.name = format!("{}-{}-{}", base.name, axis.name(), label);
        let result = Engine::with_output(cfg, &dir).and_then(|mut e| e.run());
        rows.push(match result {
            Ok(s) => AblationRow {
                axis: axis.name().into(),
                value: label,
                status: "ok".into(),
                summary: Some(s),
                error: None,
            },
            Err(e) => AblationRow {
                axis: axis.name().into(),
                value: label,
                status: "failed".into(),
                summary: None,
                error: Some(e.to_string()),
            },
        });
    }
    let path = root.join(format!("ablation_{}.csv", axis.name()));
    write_ablation_csv(&path, base, &rows)?;
    Ok((path, rows))
}

pub fn write_ablation_csv(path: &Path, base: &ExperimentConfig, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec![
        "axis".to_string(),
        "value".into(),
        "status".into(),
        "final_mean_accuracy".into(),
        "final_k".into(),
        "global_reclusters".into(),
        "total_moves".into(),
        "final_mean_client_distance".into(),
    ];
    header.extend(base.output.tta_targets.iter().map(|t| format!("tta_{t}")));
    header.push("error".into());
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.axis.clone(), r.value.clone(), r.status.clone()];
        match &r.summary {
            Some(s) => {
                rec.push(s.final_mean_accuracy.to_string());
                rec.push(s.final_k.to_string());
                rec.push(s.global_reclusters.to_string());
                rec.push(s.total_moves.to_string());
                rec.push(s.final_mean_client_distance.to_string());
                rec.extend(s.tta.iter().map(|t| t.seconds.map_or(String::new(), |v| v.to_string())));
            }
            None => rec.extend(std::iter::repeat(String::new()).take(5 + base.output.tta_targets.len())),
        }
        rec.push(r.error.clone().unwrap_or_default());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Accuracy and heterogeneity series plus TTA per target, as CSV text.
/// Also written to `report.csv` and `tta.csv` in the run directory.
pub fn report(run_dir: &Path) -> Result<String> {
    let records: Vec<RoundRecord> = read_rounds(&run_dir.join(ROUNDS_FILE))?;
    if records.is_empty() {
        return Err(Error::InvalidInput(format!("{} has no rounds", run_dir.display())));
    }
    let mut series = csv::Writer::from_writer(Vec::new());
    series.write_record(["round", "sim_time_s", "mean_accuracy", "mean_client_distance", "baseline_distance", "k"])?;
    for r in &records {
        series.write_record([
            r.round.to_string(),
            r.sim_time_s.to_string(),
            r.mean_accuracy.to_string(),
            r.mean_client_distance.to_string(),
            r.baseline_distance.to_string(),
            r.k.to_string(),
        ])?;
    }
    let text = String::from_utf8(series.into_inner().map_err(|e| Error::InvalidInput(e.to_string()))?)
        .expect("csv output is utf-8");
    fs::write(run_dir.join("report.csv"), &text)?;

    let targets: Vec<f64> = match fs::read(run_dir.join(SUMMARY_FILE)) {
        Ok(bytes) => serde_json::from_slice::<Summary>(&bytes)?.tta.iter().map(|t| t.target).collect(),
        Err(_) => vec![0.4, 0.5, 0.6, 0.7],
    };
    let pts: Vec<(f64, f64)> = records.iter().map(|r| (r.sim_time_s, r.mean_accuracy)).collect();
    let mut tta = csv::Writer::from_path(run_dir.join("tta.csv"))?;
    tta.write_record(["target", "seconds"])?;
    for t in targets {
        tta.write_record([t.to_string(), time_to_accuracy(&pts, t).map_or(String::new(), |v| v.to_string())])?;
    }
    tta.flush()?;
    Ok(text)
}
