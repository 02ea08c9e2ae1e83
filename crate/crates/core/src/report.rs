//! Run, energy and T-sweep reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::archive::Dataset;
use crate::convert::SnnGraph;
use crate::energy::{ann_cost, energy_ratio_by_class, AnnCost, EnergyModel, EnergyRatio, OpClass, Ops, OpsLedger};
use crate::error::{Error, Result};
use crate::model::ann_forward;
use crate::runtime::{compare_to_reference, spike_statistics, BoundSummary, PreparedSnn, RunMode, SpikeTable};
use crate::tensor::Tensor;

pub const REPORT_VERSION: u32 = 1;
pub const RUN_REPORT_FILE: &str = "run_report.json";
pub const ENERGY_REPORT_FILE: &str = "energy_report.json";
pub const TSWEEP_FILE: &str = "tsweep.csv";

/// Settings echoed into every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSettings {
    pub mode: RunMode,
    pub timesteps: usize,
    pub samples: usize,
    pub seed: u64,
    pub n: usize,
    pub percentile: f64,
    pub energy: EnergyModel,
    /// Headline energy figure uses the strict ratio instead of ACs only.
    pub strict_energy: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub t: usize,
    pub agreement: f64,
    pub mean_logit_error: f64,
    pub max_logit_error: f64,
    /// Ratio of the SNN's cumulative cost after `t` steps to one ANN pass.
    pub energy: EnergyRatio,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub format_version: u32,
    pub config: RunSettings,
    pub steps: Vec<StepRow>,
    pub spikes: SpikeTable,
    /// Operation counts summed over all samples.
    pub ledger: OpsLedger,
    pub ann: AnnCost,
    pub energy: EnergyRatio,
    pub headline_energy: f64,
    pub bounds: BoundSummary,
    /// Label accuracy of the exact model, when labels are present.
    pub ann_accuracy: Option<f64>,
    pub snn_accuracy: Option<f64>,
}

/// Runs `data` through `snn` and compares every step with the exact model.
pub fn build_run_report(snn: &SnnGraph, data: &Dataset, settings: &RunSettings) -> Result<RunReport> {
    if data.is_empty() {
        return Err(Error::Validation("dataset is empty".into()));
    }
    let samples: Vec<Tensor<f64>> = data.samples.iter().map(|s| s.cast()).collect();
    let reference: Vec<Vec<f64>> = samples
        .iter()
        .map(|s| Ok(ann_forward::<f64>(&snn.model, s, false)?.logits.into_data()))
        .collect::<Result<_>>()?;
    let prepared = PreparedSnn::<f64>::new(snn, settings.mode)?;
    let runs = prepared.run_batch(&samples, settings.timesteps)?;
    let summary = compare_to_reference(&runs, &reference)?;

    let ann = ann_cost(&snn.model.config)?;
    let ann_macs = ann.total_macs as f64 * runs.len() as f64;
    let mut ledger = OpsLedger::new();
    let mut bounds = BoundSummary::default();
    let mut cumulative: Vec<BTreeMap<OpClass, Ops>> = vec![BTreeMap::new(); settings.timesteps];
    for r in &runs {
        ledger.merge(&r.ledger);
        bounds.merge(&r.bounds);
        for (acc, snap) in cumulative.iter_mut().zip(&r.step_ops) {
            for (class, ops) in snap {
                *acc.entry(*class).or_default() += *ops;
            }
        }
    }
    let steps = summary
        .iter()
        .zip(&cumulative)
        .map(|(s, c)| {
            Ok(StepRow {
                t: s.t,
                agreement: s.agreement,
                mean_logit_error: s.mean_logit_error,
                max_logit_error: s.max_logit_error,
                energy: energy_ratio_by_class(c, ann_macs, &settings.energy)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let energy = energy_ratio_by_class(&ledger.by_class(), ann_macs, &settings.energy)?;

    let accuracy = |pred: &mut dyn Iterator<Item = usize>| -> Option<f64> {
        if data.labels.len() != runs.len() {
            return None;
        }
        let hits = pred.zip(&data.labels).filter(|(p, l)| *p == **l).count();
        Some(hits as f64 / runs.len() as f64)
    };
    let ann_accuracy = accuracy(&mut reference.iter().map(|l| argmax(l)));
    let snn_accuracy = accuracy(&mut runs.iter().map(|r| *r.predictions.last().unwrap_or(&0)));

    Ok(RunReport {
        format_version: REPORT_VERSION,
        config: settings.clone(),
        steps,
        spikes: spike_statistics(&runs),
        ledger,
        ann,
        energy,
        headline_energy: if settings.strict_energy {
            energy.strict
        } else {
            energy.acs_only
        },
        bounds,
        ann_accuracy,
        snn_accuracy,
    })
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub format_version: u32,
    pub config: RunSettings,
    pub ann: AnnCost,
    pub snn_ledger: OpsLedger,
    pub by_class: BTreeMap<OpClass, Ops>,
    pub ratio: EnergyRatio,
    pub per_step: Vec<(usize, EnergyRatio)>,
    pub bounds: BoundSummary,
}

pub fn energy_report(run: &RunReport) -> EnergyReport {
    EnergyReport {
        format_version: REPORT_VERSION,
        config: run.config.clone(),
        ann: run.ann.clone(),
        snn_ledger: run.ledger.clone(),
        by_class: run.ledger.by_class(),
        ratio: run.energy,
        per_step: run.steps.iter().map(|s| (s.t, s.energy)).collect(),
        bounds: run.bounds,
    }
}

/// T-sweep table: one column per step, one row per metric.
pub fn tsweep_csv(run: &RunReport) -> String {
    let mut out = String::from("metric");
    for s in &run.steps {
        let _ = write!(out, ",T={}", s.t);
    }
    out.push('\n');
    type Metric = fn(&StepRow) -> f64;
    let rows: [(&str, Metric); 6] = [
        ("agreement", |s| s.agreement),
        ("mean_logit_error", |s| s.mean_logit_error),
        ("max_logit_error", |s| s.max_logit_error),
        ("energy_strict", |s| s.energy.strict),
        ("energy_acs_only", |s| s.energy.acs_only),
        ("energy_nonlinear_kept", |s| s.energy.nonlinear_kept),
    ];
    for (name, get) in rows {
        out.push_str(name);
        for s in &run.steps {
            let _ = write!(out, ",{:.6}", get(s));
        }
        out.push('\n');
    }
    out
}

pub fn parse_run_report(bytes: &[u8]) -> Result<RunReport> {
    let r: RunReport = serde_json::from_slice(bytes)?;
    if r.format_version != REPORT_VERSION {
        return Err(Error::Format(format!(
            "unsupported report version {}",
            r.format_version
        )));
    }
    if r.steps.len() != r.config.timesteps {
        return Err(Error::Validation(format!(
            "report has {} steps, config says {}",
            r.steps.len(),
            r.config.timesteps
        )));
    }
    Ok(r)
}
