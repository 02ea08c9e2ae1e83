//! Self-checking property suites.
//!
//! Each suite generates its own fixtures from a seed, checks a library
//! component against a direct computation, and reports the worst deviation
//! it saw. [`run_suites`] collects the outcomes into a [`Verdict`].

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::Dataset;
use crate::calibrate::calibrate;
use crate::convert::{convert, normalize_weights, spike_linear, ConvertConfig};
use crate::ec::{matmul_ec_opcount, EcState, MatMulEcState};
use crate::energy::{ann_complexity, matmul_ec_bounds, Ops};
use crate::error::{Error, Result};
use crate::model::{ann_forward, ModelConfig, ModelGraph};
use crate::neuron::{build_ladder, decode_spikes, MtNeuronState, ThresholdLadder};
use crate::runtime::{naive_nonlinear_demo, PreparedSnn, RunMode};
use crate::tensor::{matmul, Nonlinearity, Tensor};

pub const VERDICT_VERSION: u32 = 1;

/// Published per-module MAC counts, in millions, for `N=577, C=1408,
/// Nh=16, Ch=6144`, in [`ann_complexity`] row order.
pub const REFERENCE_TABLE: [f64; 10] = [
    0.81, 3431.65, 71.49, 5.33, 468.76, 1143.88, 0.81, 4991.48, 3.54, 4991.48,
];

/// Failure messages kept per suite.
const MAX_FAILURES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    EcIdentity,
    ProductEc,
    Bounds,
    Complexity,
    Neuron,
    Normalization,
    Lossless,
    Conservation,
    Naive,
}

impl Suite {
    pub const ALL: [Suite; 9] = [
        Suite::EcIdentity,
        Suite::ProductEc,
        Suite::Bounds,
        Suite::Complexity,
        Suite::Neuron,
        Suite::Normalization,
        Suite::Lossless,
        Suite::Conservation,
        Suite::Naive,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::EcIdentity => "ec_identity",
            Suite::ProductEc => "product_ec",
            Suite::Bounds => "bounds",
            Suite::Complexity => "complexity",
            Suite::Neuron => "neuron",
            Suite::Normalization => "normalization",
            Suite::Lossless => "lossless",
            Suite::Conservation => "conservation",
            Suite::Naive => "naive",
        }
    }

    pub fn default_cases(self) -> usize {
        match self {
            Suite::EcIdentity => 1000,
            Suite::ProductEc | Suite::Bounds => 500,
            Suite::Neuron => 2000,
            Suite::Normalization => 100,
            Suite::Lossless => 16,
            Suite::Conservation => 4,
            Suite::Complexity | Suite::Naive => 1,
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let canonical = match s {
            "theorem1" => "ec_identity",
            "theorem2" => "product_ec",
            "table3" => "complexity",
            other => other,
        };
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == canonical)
            .ok_or_else(|| Error::Validation(format!("unknown suite {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteOutcome {
    pub suite: Suite,
    pub cases: usize,
    pub passed: bool,
    /// Largest deviation observed, in the suite's own units.
    pub worst: f64,
    pub failures: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub format_version: u32,
    pub seed: u64,
    pub passed: bool,
    pub suites: Vec<SuiteOutcome>,
}

impl Verdict {
    pub fn failing(&self) -> Vec<&'static str> {
        self.suites
            .iter()
            .filter(|s| !s.passed)
            .map(|s| s.suite.name())
            .collect()
    }
}

struct Tally {
    worst: f64,
    failures: Vec<String>,
    failed: usize,
}

impl Tally {
    fn new() -> Self {
        Self {
            worst: 0.0,
            failures: Vec::new(),
            failed: 0,
        }
    }

    fn check(&mut self, err: f64, tol: f64, what: impl FnOnce() -> String) {
        if err.is_nan() || err > self.worst {
            self.worst = if err.is_nan() { f64::INFINITY } else { err };
        }
        if err.is_nan() || err > tol {
            self.fail(format!("{} (error {err:e}, tolerance {tol:e})", what()));
        }
    }

    fn fail(&mut self, msg: String) {
        self.failed += 1;
        if self.failures.len() < MAX_FAILURES {
            self.failures.push(msg);
        }
    }

    fn finish(self, suite: Suite, cases: usize) -> SuiteOutcome {
        SuiteOutcome {
            suite,
            cases,
            passed: self.failed == 0,
            worst: self.worst,
            failures: self.failures,
        }
    }
}

/// Runs `suites` (all of them when empty) with `cases` overriding each
/// suite's default count.
pub fn run_suites(suites: &[Suite], cases: Option<usize>, seed: u64) -> Verdict {
    let list: Vec<Suite> = if suites.is_empty() {
        Suite::ALL.to_vec()
    } else {
        suites.to_vec()
    };
    let outcomes: Vec<SuiteOutcome> = list
        .iter()
        .map(|&s| run_suite(s, cases.unwrap_or_else(|| s.default_cases()), seed))
        .collect();
    Verdict {
        format_version: VERDICT_VERSION,
        seed,
        passed: outcomes.iter().all(|o| o.passed),
        suites: outcomes,
    }
}

pub fn run_suite(suite: Suite, cases: usize, seed: u64) -> SuiteOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (suite as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut tally = Tally::new();
    let res = match suite {
        Suite::EcIdentity => ec_identity(&mut rng, cases, &mut tally),
        Suite::ProductEc => product_ec(&mut rng, cases, &mut tally),
        Suite::Bounds => bounds(&mut rng, cases, &mut tally),
        Suite::Complexity => complexity(&mut tally),
        Suite::Neuron => neuron(&mut rng, cases, &mut tally),
        Suite::Normalization => normalization(&mut rng, cases, &mut tally),
        Suite::Lossless => lossless(seed, cases, &mut tally),
        Suite::Conservation => conservation(seed, cases, &mut tally),
        Suite::Naive => naive(&mut tally),
    };
    if let Err(e) = res {
        tally.fail(format!("aborted: {e}"));
    }
    tally.finish(suite, cases)
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn random_ladder(rng: &mut ChaCha8Rng, n: usize) -> Result<ThresholdLadder> {
    build_ladder(rng.random_range(0.05..1.0), rng.random_range(0.05..1.0), n)
}

fn random_spikes(rng: &mut ChaCha8Rng, len: usize, n: usize, rate: f64) -> Vec<u8> {
    (0..len)
        .map(|_| {
            if rng.random_bool(rate) {
                rng.random_range(1..=2 * n as u8)
            } else {
                0
            }
        })
        .collect()
}

fn ec_identity(rng: &mut ChaCha8Rng, cases: usize, tally: &mut Tally) -> Result<()> {
    for case in 0..cases {
        let cols = rng.random_range(1..=8);
        let rows = rng.random_range(1..=64 / cols);
        let f = match case % 3 {
            0 => Nonlinearity::Gelu,
            1 => Nonlinearity::Softmax {
                scale: rng.random_range(0.1..2.0),
            },
            _ => Nonlinearity::LayerNorm {
                gamma: random_tensor(rng, &[cols], 0.5, 1.5),
                beta: random_tensor(rng, &[cols], -0.5, 0.5),
                eps: 1e-6,
            },
        };
        let mut st = EcState::new();
        let mut sum_in = Tensor::zeros(&[rows, cols]);
        let mut sum_out = Tensor::zeros(&[rows, cols]);
        for t in 1..=rng.random_range(1..=16) {
            let x = random_tensor(rng, &[rows, cols], -3.0, 3.0);
            sum_out.add_assign(&st.step(&x, &f)?)?;
            sum_in.add_assign(&x)?;
            let k = 1.0 / t as f64;
            let want = f.eval(&sum_in.scale(k))?;
            let err = sum_out.scale(k).max_abs_diff(&want)?;
            tally.check(err, 1e-9, || format!("case {case} ({}) step {t}", f.name()));
        }
    }
    Ok(())
}

fn product_ec(rng: &mut ChaCha8Rng, cases: usize, tally: &mut Tally) -> Result<()> {
    for case in 0..cases {
        let (n, p, m) = (
            rng.random_range(1..=16),
            rng.random_range(1..=16),
            rng.random_range(1..=16),
        );
        let (na, nb) = (rng.random_range(1..=3), rng.random_range(1..=3));
        let (la, lb) = (random_ladder(rng, na)?, random_ladder(rng, nb)?);
        let (ra, rb) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        let mut st = MatMulEcState::<f64>::new(n, p, m, &la, &lb);
        let mut sa = Tensor::zeros(&[n, p]);
        let mut sb = Tensor::zeros(&[p, m]);
        let mut out_sum = Tensor::zeros(&[n, m]);
        for t in 1..=8 {
            let a = random_spikes(rng, n * p, na, ra);
            let b = random_spikes(rng, p * m, nb, rb);
            let da = decode_spikes::<f64>(&a, la.values(), &[n, p]);
            let db = decode_spikes::<f64>(&b, lb.values(), &[p, m]);
            let mut k = matmul(&da, &db)?;
            k.add_assign(&matmul(&da, &sb)?)?;
            k.add_assign(&matmul(&sa, &db)?)?;
            let (o, _) = st.step(&a, &b)?;
            sa.add_assign(&da)?;
            sb.add_assign(&db)?;
            out_sum.add_assign(&o)?;
            let sk = st.sum_k();
            tally.check(st.last_k().max_abs_diff(&k)?, 1e-12, || {
                format!("case {case} step {t}: K")
            });
            tally.check(sk.max_abs_diff(&matmul(&sa, &sb)?)?, 1e-9, || {
                format!("case {case} step {t}: S_K")
            });
            tally.check(out_sum.max_abs_diff(&sk.scale(1.0 / t as f64))?, 1e-9, || {
                format!("case {case} step {t}: output sum")
            });
        }
    }
    Ok(())
}

/// Worst excess of measured additions over `bound + 3nm`; multiplications
/// must stay within their bound outright.
fn bounds(rng: &mut ChaCha8Rng, cases: usize, tally: &mut Tally) -> Result<()> {
    let mut worst = f64::NEG_INFINITY;
    for case in 0..cases {
        let (n, p, m) = (
            rng.random_range(1..=16),
            rng.random_range(1..=16),
            rng.random_range(1..=16),
        );
        let (na, nb) = (rng.random_range(1..=3), rng.random_range(1..=3));
        let (la, lb) = (random_ladder(rng, na)?, random_ladder(rng, nb)?);
        let (ra, rb) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        let mut st = MatMulEcState::<f64>::new(n, p, m, &la, &lb);
        for t in 1..=8 {
            let a = random_spikes(rng, n * p, na, ra);
            let b = random_spikes(rng, p * m, nb, rb);
            let (_, rec) = st.step(&a, &b)?;
            let eta1 = rec.a_spikes as f64 / (n * p) as f64;
            let eta2 = rec.b_spikes as f64 / (p * m) as f64;
            let (acs_max, macs_max) = matmul_ec_bounds(eta1, eta2, n, p, m)?;
            let (adds, muls) = matmul_ec_opcount(&rec);
            let excess = adds as f64 - acs_max - 3.0 * (n * m) as f64;
            worst = worst.max(excess);
            if excess > 0.0 || muls as f64 > macs_max {
                tally.fail(format!("case {case} step {t}: {adds} adds, {muls} muls over bound"));
            }
        }
    }
    tally.worst = worst.max(0.0);
    Ok(())
}

fn complexity(tally: &mut Tally) -> Result<()> {
    let rows = ann_complexity(577, 1408, 16, 6144)?;
    for (row, want) in rows.iter().zip(REFERENCE_TABLE) {
        let ours = (row.macs as f64 / 1e4).round();
        let theirs = (want * 100.0).round();
        tally.check((ours - theirs).abs() / 100.0, 0.01 + 1e-9, || {
            format!("{}: {:.2}M vs {want}M", row.module, ours / 100.0)
        });
    }
    Ok(())
}

fn neuron(rng: &mut ChaCha8Rng, cases: usize, tally: &mut Tally) -> Result<()> {
    for case in 0..cases {
        let n = rng.random_range(1..=8);
        let ladder = random_ladder(rng, n)?;
        let width = rng.random_range(1..=8);
        let mut st = MtNeuronState::<f64>::new(&[width], ladder.clone());
        let mut sum_in = Tensor::zeros(&[width]);
        let mut sum_out = Tensor::zeros(&[width]);
        for _ in 0..rng.random_range(1..=24) {
            let x = random_tensor(rng, &[width], -20.0, 20.0);
            let (out, spikes) = st.mt_step(&x)?;
            for (&s, &v) in spikes.iter().zip(out.data()) {
                if s as usize > 2 * n || v != ladder.value(s) {
                    tally.fail(format!("case {case}: index {s} emitted {v}"));
                }
            }
            sum_in.add_assign(&x)?;
            sum_out.add_assign(&out)?;
        }
        for j in 0..width {
            let (i, o, v) = (sum_in.data()[j], sum_out.data()[j], st.v.data()[j]);
            let scale = 1.0 + i.abs().max(o.abs());
            tally.check((o + v - i).abs() / scale, 1e-12, || format!("case {case}: charge"));
        }
    }
    Ok(())
}

fn normalization(rng: &mut ChaCha8Rng, cases: usize, tally: &mut Tally) -> Result<()> {
    for case in 0..cases {
        let (fan_in, fan_out, rows) = (
            rng.random_range(1..=12),
            rng.random_range(1..=12),
            rng.random_range(1..=4),
        );
        let n_prev = rng.random_range(1..=4);
        let prev = random_ladder(rng, n_prev)?;
        let lambda1 = rng.random_range(0.05..1.0);
        let w = random_tensor(rng, &[fan_in, fan_out], -1.0, 1.0);
        let b = random_tensor(rng, &[fan_out], -0.2, 0.2);
        let banks = normalize_weights(&w, &b, &prev, lambda1)?;
        for _ in 0..8 {
            let spikes: Vec<u8> = (0..rows * fan_in)
                .map(|_| rng.random_range(0..=2 * n_prev as u8))
                .collect();
            let x = decode_spikes::<f64>(&spikes, prev.values(), &[rows, fan_in]);
            let mut dense = matmul(&x, &w)?;
            dense.add_row_bias(&b)?;
            let (got, ops) = spike_linear(&banks, &spikes, rows)?;
            tally.check(got.max_abs_diff(&dense.scale(1.0 / lambda1))?, 1e-12, || {
                format!("case {case}: banked current")
            });
            if ops.macs != 0 {
                tally.fail(format!("case {case}: {} multiplications on the spike path", ops.macs));
            }
        }
    }
    Ok(())
}

fn toy_fixture(seed: u64, samples: usize) -> Result<(ModelGraph, Dataset, crate::convert::SnnGraph)> {
    let model = ModelGraph::random(ModelConfig::toy(), seed)?;
    let data = Dataset::synthetic(&model, samples.max(1), seed.wrapping_add(1))?;
    let (thresholds, _) = calibrate(&model, &data, samples.max(1), 99.0, 8)?;
    let snn = convert(&model, &thresholds, &ConvertConfig::default())?;
    Ok((model, data, snn))
}

fn lossless(seed: u64, cases: usize, tally: &mut Tally) -> Result<()> {
    let (model, data, snn) = toy_fixture(seed, cases)?;
    let prepared = PreparedSnn::<f32>::new(&snn, RunMode::AnalogEcOnly)?;
    let runs = prepared.run_batch(&data.samples, 8)?;
    for (i, (s, r)) in data.samples.iter().zip(&runs).enumerate() {
        let want = ann_forward::<f32>(&model, s, false)?.logits;
        for t in [1, 2, 4, 8] {
            let err = r.logits[t - 1]
                .iter()
                .zip(want.data())
                .map(|(g, w)| (g - f64::from(*w)).abs())
                .fold(0.0, f64::max);
            tally.check(err, 1e-6, || format!("sample {i} T={t}"));
        }
    }
    Ok(())
}

/// Per-step cumulative counts must be monotone and end at the ledger total.
fn conservation(seed: u64, cases: usize, tally: &mut Tally) -> Result<()> {
    let (_, data, snn) = toy_fixture(seed, cases)?;
    let prepared = PreparedSnn::<f64>::new(&snn, RunMode::Mt)?;
    let samples: Vec<Tensor<f64>> = data.samples.iter().map(|s| s.cast()).collect();
    for (i, r) in prepared.run_batch(&samples, 6)?.iter().enumerate() {
        let mut prev = Ops::default();
        for (t, snap) in r.step_ops.iter().enumerate() {
            let tot: Ops = snap.values().copied().sum();
            if tot.acs < prev.acs || tot.macs < prev.macs {
                tally.fail(format!("sample {i}: counts decreased at step {}", t + 1));
            }
            prev = tot;
        }
        if r.step_ops.last() != Some(&r.ledger.by_class()) {
            tally.fail(format!("sample {i}: final snapshot differs from the ledger"));
        }
        if r.ledger.total() != r.ledger.modules.values().map(|e| e.ops).sum() {
            tally.fail(format!("sample {i}: ledger total is not the sum of its modules"));
        }
    }
    Ok(())
}

fn naive(tally: &mut Tally) -> Result<()> {
    let x = |v: f64| Tensor::scalar(v);
    let d = naive_nonlinear_demo(&Nonlinearity::Gelu, &[x(2.0), x(-2.0)])?;
    let (naive, ec, reference) = (d.naive.data()[0], d.ec.data()[0], d.reference.data()[0]);
    tally.check((ec - reference).abs(), 1e-9, || "EC mean vs F(mean)".into());
    if (naive - reference).abs() < 0.1 {
        tally.fail(format!("naive gap only {:.4}", (naive - reference).abs()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_round_trip() {
        for s in Suite::ALL {
            assert_eq!(s.name().parse::<Suite>().unwrap(), s);
        }
        assert_eq!("table3".parse::<Suite>().unwrap(), Suite::Complexity);
        assert_eq!("theorem2".parse::<Suite>().unwrap(), Suite::ProductEc);
        assert!("bogus".parse::<Suite>().is_err());
    }

    #[test]
    fn small_runs_pass() {
        let v = run_suites(
            &[Suite::EcIdentity, Suite::ProductEc, Suite::Bounds, Suite::Complexity],
            Some(20),
            3,
        );
        assert!(v.passed, "{:?}", v.suites);
        assert_eq!(v.suites.len(), 4);
    }

    #[test]
    fn tally_records_nan_as_failure() {
        let mut t = Tally::new();
        t.check(f64::NAN, 1.0, || "nan".into());
        let out = t.finish(Suite::Naive, 1);
        assert!(!out.passed);
        assert!(out.worst.is_infinite());
    }
}
