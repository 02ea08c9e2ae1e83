use std::path::Path;

use log::warn;
use serde_json::json;
use vitsnn::archive::{self, load_dataset, load_model, save_dataset, save_model, Dataset};
use vitsnn::calibrate::{calibrate as calibrate_model, ThresholdSet};
use vitsnn::convert::{check_invariants, convert as convert_model, load_snn, save_snn, ConvertConfig};
use vitsnn::energy::EnergyModel;
use vitsnn::model::{ann_forward, ModelConfig, ModelGraph};
use vitsnn::neuron::MAX_THRESHOLD_COUNT;
use vitsnn::report::{
    build_run_report, energy_report, parse_run_report, tsweep_csv, RunSettings, ENERGY_REPORT_FILE, RUN_REPORT_FILE,
    TSWEEP_FILE,
};
use vitsnn::runtime::RunMode;
use vitsnn::verify::{run_suites, Suite};
use vitsnn::Error;

use crate::{CalibrateArgs, ConvertArgs, OracleArgs, RunArgs, VerifyArgs};

pub const THRESHOLDS_FILE: &str = "thresholds.json";
pub const VERDICT_FILE: &str = "verdict.json";
pub const ORACLE_FILE: &str = "oracle.json";

/// A failed command and the exit code it maps to.
#[derive(Debug)]
pub enum Failure {
    Io(String),
    Usage(String),
    Invariant(String),
    Verification(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Io(_) => 1,
            Failure::Usage(_) => 2,
            Failure::Invariant(_) => 3,
            Failure::Verification(_) => 4,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Io(m) | Failure::Usage(m) | Failure::Invariant(m) | Failure::Verification(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Io { .. } => Failure::Io(e.to_string()),
            _ => Failure::Usage(e.to_string()),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn write_json<S: serde::Serialize>(path: &Path, value: &S) -> CmdResult {
    archive::write(path, &archive::to_json_bytes(value)?)?;
    Ok(())
}

fn check_n(n: usize) -> CmdResult {
    if n == 0 || n > MAX_THRESHOLD_COUNT {
        return Err(usage(format!("n must be in 1..={MAX_THRESHOLD_COUNT}, got {n}")));
    }
    Ok(())
}

fn take_samples(data: Dataset, samples: Option<usize>) -> Result<Dataset, Failure> {
    match samples {
        Some(0) => Err(usage("--samples must be at least 1")),
        Some(k) => Ok(data.take(k)),
        None => Ok(data),
    }
}

pub fn gen_toy(out: &Path, seed: u64, samples: usize) -> CmdResult {
    if samples == 0 {
        return Err(usage("--samples must be at least 1"));
    }
    let model = ModelGraph::random(ModelConfig::toy(), seed)?;
    let data = Dataset::synthetic(&model, samples, seed.wrapping_add(1))?;
    save_model(&model, &out.join("model"))?;
    save_dataset(&data, &out.join("data"))?;
    println!(
        "wrote {} and {} ({samples} samples)",
        out.join("model").display(),
        out.join("data").display()
    );
    Ok(())
}

pub fn calibrate(out: &Path, a: &CalibrateArgs) -> CmdResult {
    if !(a.percentile > 50.0 && a.percentile <= 100.0) {
        return Err(usage(format!("percentile must be in (50, 100], got {}", a.percentile)));
    }
    check_n(a.n)?;
    let model = load_model(&a.model)?;
    let data = load_dataset(&a.data)?;
    data.check_model(&model.config)?;
    let max = a.max_samples.unwrap_or(data.len());
    if max == 0 {
        return Err(usage("--max-samples must be at least 1"));
    }
    let (set, warnings) = calibrate_model(&model, &data, max, a.percentile, a.n)?;
    for w in &warnings {
        warn!("{}: {}", w.site_id, w.message);
    }
    let missing = set.missing_sites(&model);
    if !missing.is_empty() {
        return Err(usage(format!("no statistics for sites: {}", missing.join(", "))));
    }
    let path = a.out.clone().unwrap_or_else(|| out.join(THRESHOLDS_FILE));
    set.save(&path)?;
    let th1 = set.sites.values().map(|s| s.theta1);
    let (lo, hi) = th1.fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(v), hi.max(v)));
    println!(
        "{} sites, theta1 in [{lo:.4e}, {hi:.4e}], {} warnings -> {}",
        set.sites.len(),
        warnings.len(),
        path.display()
    );
    Ok(())
}

pub fn convert(out: &Path, a: &ConvertArgs) -> CmdResult {
    if let Some(n) = a.n {
        check_n(n)?;
    }
    let model = load_model(&a.model)?;
    let thresholds = ThresholdSet::load(&a.thresholds)?;
    let missing = thresholds.missing_sites(&model);
    if !missing.is_empty() {
        return Err(Failure::Invariant(format!(
            "thresholds missing for sites: {}",
            missing.join(", ")
        )));
    }
    let snn =
        convert_model(&model, &thresholds, &ConvertConfig { n: a.n }).map_err(|e| Failure::Invariant(e.to_string()))?;
    let problems = check_invariants(&snn);
    if !problems.is_empty() {
        return Err(Failure::Invariant(problems.join("; ")));
    }
    let dir = a.out.clone().unwrap_or_else(|| out.join("snn"));
    save_snn(&snn, &dir)?;
    println!("{} layers -> {}", snn.manifest.layers.len(), dir.display());
    Ok(())
}

pub fn run(out: &Path, a: &RunArgs) -> CmdResult {
    let mode: RunMode = a.mode.parse()?;
    if a.timesteps == 0 {
        return Err(usage("--timesteps must be at least 1"));
    }
    let energy = EnergyModel::new(a.e_mac, a.e_ac)?;
    let snn = load_snn(&a.snn)?;
    let data = take_samples(load_dataset(&a.data)?, a.samples)?;
    data.check_model(&snn.model.config)?;
    let settings = RunSettings {
        mode,
        timesteps: a.timesteps,
        samples: data.len(),
        seed: a.seed,
        n: snn.manifest.n,
        percentile: snn.manifest.percentile,
        energy,
        strict_energy: a.strict_energy,
    };
    let report = build_run_report(&snn, &data, &settings)?;
    write_json(&out.join(RUN_REPORT_FILE), &report)?;
    archive::write(&out.join(TSWEEP_FILE), tsweep_csv(&report).as_bytes())?;
    for s in &report.steps {
        println!(
            "T={:<3} agreement {:.4}  mean logit error {:.4e}  energy {:.4}",
            s.t,
            s.agreement,
            s.mean_logit_error,
            if a.strict_energy {
                s.energy.strict
            } else {
                s.energy.acs_only
            }
        );
    }
    if report.bounds.violations > 0 {
        warn!(
            "{} product steps exceeded their op-count bound",
            report.bounds.violations
        );
    }
    println!("-> {}", out.join(RUN_REPORT_FILE).display());
    Ok(())
}

pub fn oracle(out: &Path, a: &OracleArgs) -> CmdResult {
    let model = load_model(&a.model)?;
    let data = take_samples(load_dataset(&a.data)?, a.samples)?;
    data.check_model(&model.config)?;
    let mut logits = Vec::with_capacity(data.len());
    for s in &data.samples {
        logits.push(ann_forward::<f64>(&model, &s.cast(), false)?.logits.into_data());
    }
    let predictions: Vec<usize> = logits.iter().map(|l: &Vec<f64>| argmax(l)).collect();
    let hits = predictions.iter().zip(&data.labels).filter(|(p, l)| p == l).count();
    let accuracy = hits as f64 / data.len() as f64;
    let report = json!({
        "format_version": vitsnn::report::REPORT_VERSION,
        "samples": data.len(),
        "accuracy": accuracy,
        "predictions": predictions,
        "logits": logits,
    });
    write_json(&out.join(ORACLE_FILE), &report)?;
    println!(
        "{} samples, label accuracy {accuracy:.4} -> {}",
        data.len(),
        out.join(ORACLE_FILE).display()
    );
    Ok(())
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

pub fn verify(out: &Path, a: &VerifyArgs) -> CmdResult {
    let suites = a
        .suite
        .iter()
        .map(|s| s.parse::<Suite>())
        .collect::<Result<Vec<_>, _>>()?;
    if a.cases == Some(0) {
        return Err(usage("--cases must be at least 1"));
    }
    let verdict = run_suites(&suites, a.cases, a.seed);
    for s in &verdict.suites {
        println!(
            "{:<14} {} ({} cases, worst {:.2e})",
            s.suite.name(),
            if s.passed { "PASS" } else { "FAIL" },
            s.cases,
            s.worst
        );
        for f in &s.failures {
            println!("    {f}");
        }
    }
    write_json(&out.join(VERDICT_FILE), &verdict)?;
    if !verdict.passed {
        return Err(Failure::Verification(format!(
            "failing suites: {}",
            verdict.failing().join(", ")
        )));
    }
    Ok(())
}

pub fn report(out: &Path, run: &Path) -> CmdResult {
    let report = parse_run_report(&archive::read(run)?)?;
    let energy = energy_report(&report);
    write_json(&out.join(ENERGY_REPORT_FILE), &energy)?;
    let csv = tsweep_csv(&report);
    archive::write(&out.join(TSWEEP_FILE), csv.as_bytes())?;
    print!("{csv}");
    println!(
        "energy ratio: strict {:.4}, ACs only {:.4}, nonlinear kept {:.4}",
        energy.ratio.strict, energy.ratio.acs_only, energy.ratio.nonlinear_kept
    );
    Ok(())
}
