//! Base-threshold calibration: run data through the exact model, pool the
//! activations seen at every calibration site and read the base thresholds
//! off the percentiles of that pool.

use std::collections::BTreeMap;
use std::path::Path;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::archive::{self, Dataset};
use crate::error::{Error, Result};
use crate::model::{ann_forward, LayerKind, ModelGraph};
use crate::neuron::MAX_THRESHOLD_COUNT;
use crate::tensor::{percentile_sorted, Tensor};

/// Smallest base-threshold magnitude handed to a neuron.
pub const EPS_THETA: f64 = 1e-6;
/// Pool size above which a site switches to reservoir sampling.
pub const RESERVOIR_TRIGGER: usize = 10_000_000;
pub const RESERVOIR_SIZE: usize = 1 << 20;
pub const DEFAULT_PERCENTILE: f64 = 99.0;
pub const DEFAULT_THRESHOLD_COUNT: usize = 8;

/// Base thresholds for neurons fed by a GELU.
pub const GELU_OVERRIDE: (f64, f64) = (0.5, 0.08);
/// Base thresholds for neurons fed by a softmax.
pub const SOFTMAX_OVERRIDE: (f64, f64) = (0.0125, 0.0125);

/// Pooled activation values observed at one calibration site.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteStats {
    pub site_id: String,
    pub values: Vec<f64>,
    /// Scalars observed, including any dropped by reservoir sampling.
    pub count: u64,
}

impl SiteStats {
    pub fn new(site_id: impl Into<String>) -> Self {
        Self {
            site_id: site_id.into(),
            values: Vec::new(),
            count: 0,
        }
    }

    /// Concatenating merge; associative and, up to ordering, commutative.
    pub fn merge(&mut self, other: SiteStats) {
        self.values.extend(other.values);
        self.count += other.count;
    }

    pub fn sorted_values(&self) -> Vec<f64> {
        let mut v = self.values.clone();
        v.sort_by(f64::total_cmp);
        v
    }
}

/// Streams tapped values into per-site pools, falling back to a seeded
/// uniform reservoir once a pool grows past the trigger size.
pub struct StatsCollector {
    trigger: usize,
    reservoir: usize,
    rng: ChaCha8Rng,
    sites: BTreeMap<String, SiteStats>,
}

impl StatsCollector {
    pub fn new(seed: u64) -> Self {
        Self::with_limits(RESERVOIR_TRIGGER, RESERVOIR_SIZE, seed)
    }

    pub fn with_limits(trigger: usize, reservoir: usize, seed: u64) -> Self {
        assert!(reservoir <= trigger && reservoir > 0);
        Self {
            trigger,
            reservoir,
            rng: ChaCha8Rng::seed_from_u64(seed),
            sites: BTreeMap::new(),
        }
    }

    pub fn push(&mut self, site: &str, values: &[f64]) {
        let stats = self
            .sites
            .entry(site.to_string())
            .or_insert_with(|| SiteStats::new(site));
        let sampling = stats.values.len() == self.reservoir && stats.count > self.reservoir as u64;
        if !sampling {
            stats.values.extend_from_slice(values);
            stats.count += values.len() as u64;
            if stats.values.len() > self.trigger {
                // partial Fisher-Yates: a uniform subset of what we have so far
                let len = stats.values.len();
                for i in 0..self.reservoir {
                    let j = self.rng.random_range(i..len);
                    stats.values.swap(i, j);
                }
                stats.values.truncate(self.reservoir);
            }
            return;
        }
        for &v in values {
            stats.count += 1;
            let j = self.rng.random_range(0..stats.count);
            if (j as usize) < self.reservoir {
                stats.values[j as usize] = v;
            }
        }
    }

    pub fn finish(self) -> BTreeMap<String, SiteStats> {
        self.sites
    }
}

/// Runs up to `max_samples` samples through the model and pools the
/// activations at every calibration site.
pub fn collect_stats(model: &ModelGraph, dataset: &Dataset, max_samples: usize) -> Result<BTreeMap<String, SiteStats>> {
    collect_stats_seeded(model, dataset, max_samples, 0)
}

pub fn collect_stats_seeded(
    model: &ModelGraph,
    dataset: &Dataset,
    max_samples: usize,
    seed: u64,
) -> Result<BTreeMap<String, SiteStats>> {
    let n = dataset.len().min(max_samples);
    if n == 0 {
        return Err(Error::Domain("calibration needs at least one sample".into()));
    }
    dataset.check_model(&model.config)?;
    let mut collector = StatsCollector::new(seed);
    // bounded chunks keep the tap buffers small; merge order is sample order
    for chunk in dataset.samples[..n].chunks(64) {
        let taps = chunk
            .par_iter()
            .map(|s| ann_forward::<f64>(model, &s.cast(), true).map(|o| o.activations))
            .collect::<Result<Vec<_>>>()?;
        for sample in taps {
            for (site, t) in sample {
                collector.push(&site, t.data());
            }
        }
    }
    Ok(collector.finish())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Percentile,
    Override,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteThreshold {
    pub theta1: f64,
    pub theta2: f64,
    pub n: usize,
    pub provenance: Provenance,
}

/// Per-site base thresholds, as stored in `thresholds.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSet {
    pub format_version: u32,
    pub percentile: f64,
    pub sites: BTreeMap<String, SiteThreshold>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationWarning {
    pub site_id: String,
    pub message: String,
}

impl ThresholdSet {
    pub fn get(&self, site: &str) -> Result<&SiteThreshold> {
        self.sites
            .get(site)
            .ok_or_else(|| Error::Validation(format!("no threshold for calibration site '{site}'")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != archive::FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported thresholds format_version {}",
                self.format_version
            )));
        }
        for (site, t) in &self.sites {
            let ok = |v: f64| v.is_finite() && v > 0.0;
            if !ok(t.theta1) || !ok(t.theta2) || t.n == 0 || t.n > MAX_THRESHOLD_COUNT {
                return Err(Error::Validation(format!(
                    "site '{site}': thresholds must be finite and positive with 1 <= n <= {MAX_THRESHOLD_COUNT}"
                )));
            }
        }
        Ok(())
    }

    /// Sites of `model` with no entry here.
    pub fn missing_sites(&self, model: &ModelGraph) -> Vec<String> {
        model
            .calibration_sites()
            .into_iter()
            .filter(|s| !self.sites.contains_key(s))
            .collect()
    }

    pub fn from_json_bytes(bytes: &[u8]) -> Result<Self> {
        let set: ThresholdSet = serde_json::from_slice(bytes).map_err(|e| Error::Format(format!("thresholds: {e}")))?;
        set.validate()?;
        Ok(set)
    }

    pub fn to_json_bytes(&self) -> Result<Vec<u8>> {
        archive::to_json_bytes(self)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        archive::write(path, &self.to_json_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_bytes(&bytes)
    }
}

/// Fixed thresholds for sites whose input comes straight out of a GELU or a
/// softmax, where the percentile rule picks poor values.
pub fn default_overrides(model: &ModelGraph) -> BTreeMap<String, (f64, f64)> {
    let mut out = BTreeMap::new();
    for layer in &model.layers {
        for (site, value) in layer.sites.iter().zip(layer.inputs()) {
            match model.producer_of(value).map(|p| &p.kind) {
                Some(LayerKind::Gelu { .. }) => {
                    out.insert(site.clone(), GELU_OVERRIDE);
                }
                Some(LayerKind::Softmax { .. }) => {
                    out.insert(site.clone(), SOFTMAX_OVERRIDE);
                }
                _ => {}
            }
        }
    }
    out
}

/// Turns pooled statistics into base thresholds.
///
/// `percent` is in `(50, 100]`. `θ1` is the `percent` percentile, `θ2` the
/// negated `100 − percent` percentile; both are clamped below at
/// [`EPS_THETA`]. Sites listed in `overrides` take the given pair verbatim.
pub fn derive_thresholds(
    stats: &BTreeMap<String, SiteStats>,
    percent: f64,
    n: usize,
    overrides: &BTreeMap<String, (f64, f64)>,
) -> Result<(ThresholdSet, Vec<CalibrationWarning>)> {
    if !(percent > 50.0 && percent <= 100.0) {
        return Err(Error::Domain(format!("percentile {percent} outside (50, 100]")));
    }
    if n == 0 {
        return Err(Error::Domain("threshold count n must be >= 1".into()));
    }
    let mut sites = BTreeMap::new();
    let mut warnings = Vec::new();
    for (site, s) in stats {
        if let Some(&(theta1, theta2)) = overrides.get(site) {
            if !(theta1 > 0.0 && theta2 > 0.0) {
                return Err(Error::Domain(format!("override for '{site}' must be positive")));
            }
            sites.insert(
                site.clone(),
                SiteThreshold {
                    theta1,
                    theta2,
                    n,
                    provenance: Provenance::Override,
                },
            );
            continue;
        }
        if s.values.is_empty() {
            return Err(Error::Domain(format!("site '{site}' has no samples")));
        }
        let sorted = s.sorted_values();
        let hi = percentile_sorted(&sorted, percent / 100.0)?;
        let lo = percentile_sorted(&sorted, 1.0 - percent / 100.0)?;
        let mut theta1 = hi;
        if theta1 < EPS_THETA {
            let message = format!("upper percentile {hi} is below {EPS_THETA}; using the floor");
            warn!("site {site}: {message}");
            warnings.push(CalibrationWarning {
                site_id: site.clone(),
                message,
            });
            theta1 = EPS_THETA;
        }
        let theta2 = if lo >= 0.0 { EPS_THETA } else { (-lo).max(EPS_THETA) };
        sites.insert(
            site.clone(),
            SiteThreshold {
                theta1,
                theta2,
                n,
                provenance: Provenance::Percentile,
            },
        );
    }
    Ok((
        ThresholdSet {
            format_version: archive::FORMAT_VERSION,
            percentile: percent,
            sites,
        },
        warnings,
    ))
}

/// Convenience: statistics plus thresholds with the default overrides.
pub fn calibrate(
    model: &ModelGraph,
    dataset: &Dataset,
    max_samples: usize,
    percent: f64,
    n: usize,
) -> Result<(ThresholdSet, Vec<CalibrationWarning>)> {
    let stats = collect_stats(model, dataset, max_samples)?;
    derive_thresholds(&stats, percent, n, &default_overrides(model))
}

/// Flat view of a site's values, handy for reports and tests.
pub fn stats_tensor(s: &SiteStats) -> Tensor<f64> {
    Tensor::from_fn(&[s.values.len().max(1)], |i| s.values.get(i).copied().unwrap_or(0.0))
}
