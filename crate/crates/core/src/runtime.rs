//! Time-stepped execution of a converted network.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::convert::{normalize_weights_parts, spike_linear, EcFunction, NormalizedWeights, SnnGraph, SnnLayerKind};
use crate::ec::{ec_step_ops, AnalogMatMulEc, EcState, MatMulEcRecord, MatMulEcState};
use crate::energy::{matmul_ec_bounds, OpClass, Ops, OpsLedger};
use crate::error::{Error, Result};
use crate::model::{head_slice, linear, prepend_row, split_cols, AttnProduct, INPUT_VALUE};
use crate::neuron::{MtNeuronState, ThresholdLadder};
use crate::tensor::{Nonlinearity, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    /// Full spiking dynamics.
    Mt,
    /// Neurons pass their input through; only the EC modules act.
    AnalogEcOnly,
}

impl FromStr for RunMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mt" => Ok(RunMode::Mt),
            "analog_ec_only" => Ok(RunMode::AnalogEcOnly),
            other => Err(Error::Validation(format!("unknown mode '{other}'"))),
        }
    }
}

impl fmt::Display for RunMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RunMode::Mt => "mt",
            RunMode::AnalogEcOnly => "analog_ec_only",
        })
    }
}

/// Firing counts of one neuron layer over a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronStats {
    pub layer: String,
    pub site: String,
    pub neurons: u64,
    pub steps: u64,
    /// Entry `i` counts fires of channel `i + 1`.
    pub counts: Vec<u64>,
    pub saturated: u64,
}

impl NeuronStats {
    fn merge(&mut self, o: &NeuronStats) {
        self.steps += o.steps;
        self.saturated += o.saturated;
        for (a, b) in self.counts.iter_mut().zip(&o.counts) {
            *a += b;
        }
    }
}

/// How the spiking products compared with their operation bounds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BoundSummary {
    pub steps: u64,
    pub violations: u64,
    /// Largest `measured − bound` seen, in additions (negative when all fit).
    pub worst_margin: f64,
}

impl BoundSummary {
    pub fn merge(&mut self, o: &BoundSummary) {
        if self.steps == 0 {
            *self = *o;
            return;
        }
        if o.steps > 0 {
            self.worst_margin = self.worst_margin.max(o.worst_margin);
        }
        self.steps += o.steps;
        self.violations += o.violations;
    }

    /// Records one step; the bound gets `3nm` of slack for the merge.
    pub fn check(&mut self, rec: &MatMulEcRecord, n: usize, p: usize, m: usize) -> Result<bool> {
        let eta1 = rec.a_spikes as f64 / (n * p) as f64;
        let eta2 = rec.b_spikes as f64 / (p * m) as f64;
        let (acs, macs) = matmul_ec_bounds(eta1, eta2, n, p, m)?;
        let (adds, muls) = crate::ec::matmul_ec_opcount(rec);
        let slack = 3.0 * (n * m) as f64;
        let margin = adds as f64 - acs - slack;
        let ok = margin <= 0.0 && muls as f64 <= macs;
        self.worst_margin = if self.steps == 0 {
            margin
        } else {
            self.worst_margin.max(margin)
        };
        self.steps += 1;
        if !ok {
            self.violations += 1;
        }
        Ok(ok)
    }
}

/// Outcome of running one sample for `T` steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub mode: RunMode,
    /// Logits after each step, from the running mean of the head's input.
    pub logits: Vec<Vec<f64>>,
    pub predictions: Vec<usize>,
    pub neurons: Vec<NeuronStats>,
    pub ledger: OpsLedger,
    /// Cumulative operation counts per class after each step.
    pub step_ops: Vec<BTreeMap<OpClass, Ops>>,
    pub bounds: BoundSummary,
}

impl RunResult {
    pub fn steps(&self) -> usize {
        self.logits.len()
    }

    pub fn saturated(&self) -> u64 {
        self.neurons.iter().map(|s| s.saturated).sum()
    }
}

enum Value<T: Scalar> {
    Analog(Tensor<T>),
    Spikes(Vec<u8>),
}

enum Prepared<T: Scalar> {
    Neuron {
        input: usize,
        output: usize,
        shape: Vec<usize>,
        run_ladder: ThresholdLadder,
        site: String,
    },
    Linear {
        input: usize,
        outputs: Vec<usize>,
        banks: NormalizedWeights<T>,
        w: Tensor<T>,
        b: Tensor<T>,
        cls: Option<Tensor<T>>,
    },
    PosAdd {
        input: usize,
        output: usize,
        pos: Tensor<T>,
    },
    Ec {
        input: usize,
        output: usize,
        f: Nonlinearity<T>,
    },
    MatMul {
        a: usize,
        b: usize,
        output: usize,
        product: AttnProduct,
        la: ThresholdLadder,
        lb: ThresholdLadder,
    },
    Residual {
        a: usize,
        b: usize,
        output: usize,
    },
    Head {
        input: usize,
        w: Tensor<T>,
        b: Tensor<T>,
    },
}

enum State<T: Scalar> {
    Stateless,
    Neuron(MtNeuronState<T>),
    Ec(EcState<T>),
    Spiking(Vec<MatMulEcState<T>>),
    Analog(Vec<AnalogMatMulEc<T>>),
    Head(Vec<T>),
}

/// A converted network with weight banks materialized at precision `T`.
/// Immutable; shareable across worker threads.
pub struct PreparedSnn<T: Scalar> {
    names: Vec<String>,
    layers: Vec<Prepared<T>>,
    slots: usize,
    input_slot: usize,
    input_shape: [usize; 2],
    heads: usize,
    mode: RunMode,
}

impl<T: Scalar> PreparedSnn<T> {
    pub fn new(snn: &SnnGraph, mode: RunMode) -> Result<Self> {
        let model = &snn.model;
        let mut slot_of: HashMap<String, usize> = HashMap::new();
        slot_of.insert(INPUT_VALUE.to_string(), 0);
        let slot = |name: &str, slot_of: &mut HashMap<String, usize>| -> usize {
            let next = slot_of.len();
            *slot_of.entry(name.to_string()).or_insert(next)
        };
        let mut neuron_ladders: HashMap<String, ThresholdLadder> = HashMap::new();
        let mut names = Vec::new();
        let mut layers = Vec::new();
        for l in &snn.manifest.layers {
            names.push(l.name.clone());
            let p = match &l.kind {
                SnnLayerKind::Neuron {
                    site,
                    input,
                    output,
                    shape,
                    ladder,
                    normalized,
                } => {
                    neuron_ladders.insert(output.clone(), ladder.clone());
                    Prepared::Neuron {
                        input: slot(input, &mut slot_of),
                        output: slot(output, &mut slot_of),
                        shape: shape.clone(),
                        run_ladder: if *normalized {
                            ladder.normalized()
                        } else {
                            ladder.clone()
                        },
                        site: site.clone(),
                    }
                }
                SnnLayerKind::SpikeLinear {
                    input,
                    outputs,
                    weight,
                    bias,
                    lambda1,
                    cls,
                    ..
                } => {
                    let prev = neuron_ladders
                        .get(input)
                        .ok_or_else(|| Error::Validation(format!("{}: input is not spiking", l.name)))?;
                    let w = model.weight_as::<T>(weight)?;
                    let b = model.weight_as::<T>(bias)?;
                    let banks = normalize_weights_parts(&w, &b, prev, lambda1)?;
                    Prepared::Linear {
                        input: slot(input, &mut slot_of),
                        outputs: outputs.iter().map(|o| slot(o, &mut slot_of)).collect(),
                        banks,
                        w,
                        b,
                        cls: cls.as_ref().map(|c| model.weight_as::<T>(c)).transpose()?,
                    }
                }
                SnnLayerKind::PosAdd { input, output, pos } => Prepared::PosAdd {
                    input: slot(input, &mut slot_of),
                    output: slot(output, &mut slot_of),
                    pos: model.weight_as(pos)?,
                },
                SnnLayerKind::Ec {
                    input,
                    output,
                    function,
                } => {
                    let f = match function {
                        EcFunction::Gelu => Nonlinearity::Gelu,
                        EcFunction::Softmax { scale } => Nonlinearity::Softmax { scale: T::lit(*scale) },
                        EcFunction::LayerNorm { gamma, beta } => Nonlinearity::LayerNorm {
                            gamma: model.weight_as(gamma)?,
                            beta: model.weight_as(beta)?,
                            eps: T::lit(model.config.ln_eps),
                        },
                    };
                    Prepared::Ec {
                        input: slot(input, &mut slot_of),
                        output: slot(output, &mut slot_of),
                        f,
                    }
                }
                SnnLayerKind::MatMulEc { a, b, output, product } => {
                    let ladder = |v: &str| {
                        neuron_ladders
                            .get(v)
                            .cloned()
                            .ok_or_else(|| Error::Validation(format!("{}: operand '{v}' is not spiking", l.name)))
                    };
                    Prepared::MatMul {
                        la: ladder(a)?,
                        lb: ladder(b)?,
                        a: slot(a, &mut slot_of),
                        b: slot(b, &mut slot_of),
                        output: slot(output, &mut slot_of),
                        product: *product,
                    }
                }
                SnnLayerKind::ResidualAdd { a, b, output } => Prepared::Residual {
                    a: slot(a, &mut slot_of),
                    b: slot(b, &mut slot_of),
                    output: slot(output, &mut slot_of),
                },
                SnnLayerKind::ClsHead {
                    input, weight, bias, ..
                } => Prepared::Head {
                    input: slot(input, &mut slot_of),
                    w: model.weight_as(weight)?,
                    b: model.weight_as(bias)?,
                },
            };
            layers.push(p);
        }
        Ok(Self {
            names,
            layers,
            slots: slot_of.len(),
            input_slot: 0,
            input_shape: model.input_shape(),
            heads: model.config.heads,
            mode,
        })
    }

    pub fn mode(&self) -> RunMode {
        self.mode
    }

    /// Runs one sample for `steps` time steps.
    pub fn run(&self, tokens: &Tensor<T>, steps: usize) -> Result<RunResult> {
        if steps == 0 {
            return Err(Error::Domain("T must be >= 1".into()));
        }
        if tokens.shape() != self.input_shape {
            return Err(Error::Dimension(format!(
                "input tokens {:?}, network expects {:?}",
                tokens.shape(),
                self.input_shape
            )));
        }
        tokens.check_finite("input tokens")?;
        let mut states: Vec<State<T>> = self
            .layers
            .iter()
            .map(|l| match l {
                Prepared::Neuron { shape, run_ladder, .. } if self.mode == RunMode::Mt => {
                    State::Neuron(MtNeuronState::new(shape, run_ladder.clone()))
                }
                Prepared::Ec { .. } => State::Ec(EcState::new()),
                Prepared::MatMul { .. } if self.mode == RunMode::Mt => State::Spiking(Vec::new()),
                Prepared::MatMul { .. } => State::Analog((0..self.heads).map(|_| AnalogMatMulEc::new()).collect()),
                Prepared::Head { w, .. } => State::Head(vec![T::zero(); w.shape()[0]]),
                _ => State::Stateless,
            })
            .collect();
        let mut slots: Vec<Option<Value<T>>> = (0..self.slots).map(|_| None).collect();
        let mut ledger = OpsLedger::new();
        let mut bounds = BoundSummary::default();
        let mut logits = Vec::with_capacity(steps);
        let mut step_ops = Vec::with_capacity(steps);

        for t in 1..=steps {
            slots[self.input_slot] = Some(Value::Analog(tokens.clone()));
            for (idx, (layer, state)) in self.layers.iter().zip(states.iter_mut()).enumerate() {
                let name = &self.names[idx];
                let out = self.step_layer(layer, state, &slots, name, t, &mut ledger, &mut bounds)?;
                match out {
                    Step::One(slot, v) => slots[slot] = Some(v),
                    Step::Many(vs) => {
                        for (slot, v) in vs {
                            slots[slot] = Some(v);
                        }
                    }
                    Step::Logits(l) => logits.push(l),
                }
            }
            step_ops.push(ledger.by_class());
        }

        let mut neurons = Vec::new();
        for ((layer, state), name) in self.layers.iter().zip(&states).zip(&self.names) {
            if let Prepared::Neuron {
                site,
                shape,
                run_ladder,
                ..
            } = layer
            {
                let (counts, saturated, steps) = match state {
                    State::Neuron(s) => (s.spike_counts.clone(), s.saturated, s.steps),
                    _ => (vec![0; 2 * run_ladder.n()], 0, steps as u64),
                };
                neurons.push(NeuronStats {
                    layer: name.clone(),
                    site: site.clone(),
                    neurons: shape.iter().product::<usize>() as u64,
                    steps,
                    counts,
                    saturated,
                });
            }
        }
        let predictions = logits.iter().map(|l: &Vec<f64>| argmax(l)).collect();
        Ok(RunResult {
            mode: self.mode,
            logits,
            predictions,
            neurons,
            ledger,
            step_ops,
            bounds,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn step_layer(
        &self,
        layer: &Prepared<T>,
        state: &mut State<T>,
        slots: &[Option<Value<T>>],
        name: &str,
        t: usize,
        ledger: &mut OpsLedger,
        bounds: &mut BoundSummary,
    ) -> Result<Step<T>> {
        let analog = |s: usize| -> Result<&Tensor<T>> {
            match slots[s].as_ref() {
                Some(Value::Analog(x)) => Ok(x),
                Some(Value::Spikes(_)) => Err(Error::State(format!("{name}: expected an analog input"))),
                None => Err(Error::State(format!("{name}: input not computed"))),
            }
        };
        let value = |s: usize| -> Result<&Value<T>> {
            slots[s]
                .as_ref()
                .ok_or_else(|| Error::State(format!("{name}: input not computed")))
        };
        Ok(match layer {
            Prepared::Neuron { input, output, .. } => {
                let x = analog(*input)?;
                match state {
                    State::Neuron(st) => {
                        let mut spikes = vec![0u8; x.len()];
                        st.step_into(x.data(), &mut spikes)?;
                        let fired = spikes.iter().filter(|&&s| s != 0).count() as u64;
                        ledger.record(
                            name,
                            OpClass::Neuron,
                            Ops {
                                acs: x.len() as u64 + fired,
                                macs: 0,
                            },
                        );
                        Step::One(*output, Value::Spikes(spikes))
                    }
                    _ => Step::One(*output, Value::Analog(x.clone())),
                }
            }
            Prepared::Linear {
                input,
                outputs,
                banks,
                w,
                b,
                cls,
            } => {
                let (y, ops) = match value(*input)? {
                    Value::Spikes(s) => {
                        let rows = s.len() / w.shape()[0];
                        spike_linear(banks, s, rows)?
                    }
                    Value::Analog(x) => {
                        let (rows, fan_in) = x.dims2()?;
                        let fan_out = w.shape()[1];
                        let ops = Ops {
                            acs: (rows * fan_out) as u64,
                            macs: (rows * fan_in * fan_out) as u64,
                        };
                        (linear(x, w, b)?, ops)
                    }
                };
                ledger.record(name, OpClass::Linear, ops);
                let y = match cls {
                    Some(c) => prepend_row(c, &y)?,
                    None => y,
                };
                y.check_finite(name)?;
                let parts = split_cols(y, outputs.len())?;
                Step::Many(
                    outputs
                        .iter()
                        .copied()
                        .zip(parts.into_iter().map(Value::Analog))
                        .collect(),
                )
            }
            Prepared::PosAdd { input, output, pos } => {
                let y = analog(*input)?.add(pos)?;
                ledger.record(
                    name,
                    OpClass::Elementwise,
                    Ops {
                        acs: y.len() as u64,
                        macs: 0,
                    },
                );
                Step::One(*output, Value::Analog(y))
            }
            Prepared::Residual { a, b, output } => {
                let y = analog(*a)?.add(analog(*b)?)?;
                y.check_finite(name)?;
                ledger.record(
                    name,
                    OpClass::Elementwise,
                    Ops {
                        acs: y.len() as u64,
                        macs: 0,
                    },
                );
                Step::One(*output, Value::Analog(y))
            }
            Prepared::Ec { input, output, f } => {
                let State::Ec(st) = state else { unreachable!() };
                let x = analog(*input)?;
                let y = st.step(x, f)?;
                ledger.record(name, OpClass::Nonlinear, ec_step_ops(x.len() as u64, x.len() as u64));
                Step::One(*output, Value::Analog(y))
            }
            Prepared::MatMul {
                a,
                b,
                output,
                product,
                la,
                lb,
            } => {
                let y = match state {
                    State::Spiking(heads) => {
                        let (Value::Spikes(sa), Value::Spikes(sb)) = (value(*a)?, value(*b)?) else {
                            return Err(Error::State(format!("{name}: operands must be spikes")));
                        };
                        self.spiking_product(*product, sa, sb, la, lb, heads, name, ledger, bounds)?
                    }
                    State::Analog(heads) => {
                        let (x, z) = (analog(*a)?, analog(*b)?);
                        self.analog_product(*product, x, z, heads, name, ledger)?
                    }
                    _ => unreachable!(),
                };
                Step::One(*output, Value::Analog(y))
            }
            Prepared::Head { input, w, b } => {
                let State::Head(mean) = state else { unreachable!() };
                let x = analog(*input)?;
                let inv = T::one() / T::lit(t as f64);
                for (m, &v) in mean.iter_mut().zip(x.row(0)) {
                    *m += (v - *m) * inv;
                }
                let y = linear(&Tensor::from_raw(vec![1, mean.len()], mean.clone())?, w, b)?;
                y.check_finite(name)?;
                let (c, k) = (mean.len() as u64, w.shape()[1] as u64);
                ledger.record(
                    name,
                    OpClass::Linear,
                    Ops {
                        acs: c + k,
                        macs: c + c * k,
                    },
                );
                Step::Logits(y.data().iter().map(|v| v.as_f64()).collect())
            }
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn spiking_product(
        &self,
        product: AttnProduct,
        sa: &[u8],
        sb: &[u8],
        la: &ThresholdLadder,
        lb: &ThresholdLadder,
        heads: &mut Vec<MatMulEcState<T>>,
        name: &str,
        ledger: &mut OpsLedger,
        bounds: &mut BoundSummary,
    ) -> Result<Tensor<T>> {
        let nh = self.heads;
        let n = self.input_shape[0] + 1;
        let (rows, inner, cols, out_shape) = match product {
            AttnProduct::Scores => {
                let c = sa.len() / n;
                (n, c / nh, n, vec![nh, n, n])
            }
            AttnProduct::Context => {
                let c = sb.len() / n;
                (n, n, c / nh, vec![n, c])
            }
        };
        if heads.is_empty() {
            heads.extend((0..nh).map(|_| MatMulEcState::new(rows, inner, cols, la, lb)));
        }
        let mut out = Tensor::zeros(&out_shape);
        let mut a = vec![0u8; rows * inner];
        let mut b = vec![0u8; inner * cols];
        for (h, st) in heads.iter_mut().enumerate() {
            match product {
                AttnProduct::Scores => {
                    let c = inner * nh;
                    for i in 0..rows {
                        a[i * inner..(i + 1) * inner].copy_from_slice(&sa[i * c + h * inner..i * c + (h + 1) * inner]);
                    }
                    for j in 0..cols {
                        for r in 0..inner {
                            b[r * cols + j] = sb[j * c + h * inner + r];
                        }
                    }
                }
                AttnProduct::Context => {
                    let c = cols * nh;
                    a.copy_from_slice(&sa[h * rows * inner..(h + 1) * rows * inner]);
                    for r in 0..inner {
                        b[r * cols..(r + 1) * cols].copy_from_slice(&sb[r * c + h * cols..r * c + (h + 1) * cols]);
                    }
                }
            }
            let (o, rec) = st.step(&a, &b)?;
            bounds.check(&rec, rows, inner, cols)?;
            ledger.record(name, OpClass::MatMul, rec.total());
            place_head(&mut out, &o, product, h, nh)?;
        }
        out.check_finite(name)?;
        Ok(out)
    }

    fn analog_product(
        &self,
        product: AttnProduct,
        x: &Tensor<T>,
        z: &Tensor<T>,
        heads: &mut [AnalogMatMulEc<T>],
        name: &str,
        ledger: &mut OpsLedger,
    ) -> Result<Tensor<T>> {
        let nh = self.heads;
        let out_shape = match product {
            AttnProduct::Scores => {
                let (n, _) = x.dims2()?;
                vec![nh, n, n]
            }
            AttnProduct::Context => z.shape().to_vec(),
        };
        let mut out = Tensor::zeros(&out_shape);
        for (h, st) in heads.iter_mut().enumerate() {
            let a = head_slice(x, h, nh)?;
            let b = match product {
                AttnProduct::Scores => head_slice(z, h, nh)?.transpose2()?,
                AttnProduct::Context => head_slice(z, h, nh)?,
            };
            let (o, ops) = st.step(&a, &b)?;
            ledger.record(name, OpClass::MatMul, ops);
            place_head(&mut out, &o, product, h, nh)?;
        }
        Ok(out)
    }

    /// Runs every sample in parallel; results come back in input order.
    pub fn run_batch(&self, samples: &[Tensor<T>], steps: usize) -> Result<Vec<RunResult>> {
        samples.par_iter().map(|s| self.run(s, steps)).collect()
    }
}

enum Step<T: Scalar> {
    One(usize, Value<T>),
    Many(Vec<(usize, Value<T>)>),
    Logits(Vec<f64>),
}

fn place_head<T: Scalar>(out: &mut Tensor<T>, o: &Tensor<T>, product: AttnProduct, h: usize, nh: usize) -> Result<()> {
    match product {
        AttnProduct::Scores => {
            let len = o.len();
            out.data_mut()[h * len..(h + 1) * len].copy_from_slice(o.data());
        }
        AttnProduct::Context => {
            let (n, d) = o.dims2()?;
            let c = d * nh;
            for i in 0..n {
                out.data_mut()[i * c + h * d..i * c + (h + 1) * d].copy_from_slice(o.row(i));
            }
        }
    }
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

/// Prepares and runs a single sample.
pub fn snn_run<T: Scalar>(snn: &SnnGraph, tokens: &Tensor<T>, steps: usize, mode: RunMode) -> Result<RunResult> {
    PreparedSnn::new(snn, mode)?.run(tokens, steps)
}

/// Firing rates per channel for each neuron layer and in aggregate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpikeTable {
    pub layers: Vec<LayerRates>,
    /// Fraction of all neuron-steps firing each channel.
    pub aggregate: Vec<f64>,
    pub saturated: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRates {
    pub layer: String,
    pub site: String,
    pub rates: Vec<f64>,
}

/// Pools neuron statistics of one or more runs into firing rates.
pub fn spike_statistics<'a>(results: impl IntoIterator<Item = &'a RunResult>) -> SpikeTable {
    let mut merged: Vec<NeuronStats> = Vec::new();
    for r in results {
        if merged.is_empty() {
            merged = r.neurons.clone();
        } else {
            for (m, s) in merged.iter_mut().zip(&r.neurons) {
                m.merge(s);
            }
        }
    }
    let width = merged.first().map_or(0, |s| s.counts.len());
    let mut total_counts = vec![0u64; width];
    let mut total_steps = 0u64;
    let mut saturated = 0;
    let layers = merged
        .iter()
        .map(|s| {
            let denom = (s.neurons * s.steps).max(1) as f64;
            for (t, c) in total_counts.iter_mut().zip(&s.counts) {
                *t += c;
            }
            total_steps += s.neurons * s.steps;
            saturated += s.saturated;
            LayerRates {
                layer: s.layer.clone(),
                site: s.site.clone(),
                rates: s.counts.iter().map(|&c| c as f64 / denom).collect(),
            }
        })
        .collect();
    SpikeTable {
        layers,
        aggregate: total_counts
            .iter()
            .map(|&c| c as f64 / total_steps.max(1) as f64)
            .collect(),
        saturated,
    }
}

/// Agreement with the exact model after each step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSummary {
    pub t: usize,
    /// Fraction of samples whose prediction matches the exact model.
    pub agreement: f64,
    /// Mean absolute logit difference over samples and classes.
    pub mean_logit_error: f64,
    pub max_logit_error: f64,
}

pub fn compare_to_reference(results: &[RunResult], reference: &[Vec<f64>]) -> Result<Vec<StepSummary>> {
    if results.len() != reference.len() || results.is_empty() {
        return Err(Error::Validation(format!(
            "{} runs vs {} reference outputs",
            results.len(),
            reference.len()
        )));
    }
    let steps = results[0].steps();
    let mut out = Vec::with_capacity(steps);
    for t in 0..steps {
        let (mut agree, mut sum, mut max, mut count) = (0usize, 0.0, 0.0f64, 0usize);
        for (r, want) in results.iter().zip(reference) {
            let got = &r.logits[t];
            if argmax(got) == argmax(want) {
                agree += 1;
            }
            for (g, w) in got.iter().zip(want) {
                let d = (g - w).abs();
                sum += d;
                max = max.max(d);
                count += 1;
            }
        }
        out.push(StepSummary {
            t: t + 1,
            agreement: agree as f64 / results.len() as f64,
            mean_logit_error: sum / count.max(1) as f64,
            max_logit_error: max,
        });
    }
    Ok(out)
}

/// Mean outputs of the three ways of pushing a sequence through `F`.
#[derive(Debug, Clone, PartialEq)]
pub struct NaiveDemo {
    /// Mean of `F(x(t))`.
    pub naive: Tensor<f64>,
    /// Mean of the EC module's outputs.
    pub ec: Tensor<f64>,
    /// `F` of the mean input.
    pub reference: Tensor<f64>,
}

pub fn naive_nonlinear_demo(f: &Nonlinearity<f64>, inputs: &[Tensor<f64>]) -> Result<NaiveDemo> {
    if inputs.len() < 2 {
        return Err(Error::Domain("demonstration needs at least two steps".into()));
    }
    let k = 1.0 / inputs.len() as f64;
    let mut naive = Tensor::zeros(inputs[0].shape());
    let mut ec_sum = Tensor::zeros(inputs[0].shape());
    let mut in_sum = Tensor::zeros(inputs[0].shape());
    let mut st = EcState::new();
    for x in inputs {
        naive.add_assign(&f.eval(x)?)?;
        ec_sum.add_assign(&st.step(x, f)?)?;
        in_sum.add_assign(x)?;
    }
    Ok(NaiveDemo {
        naive: naive.scale(k),
        ec: ec_sum.scale(k),
        reference: f.eval(&in_sum.scale(k))?,
    })
}
