//! Rewriting an encoder into its spiking counterpart.
//!
//! Every linear layer except the classifier gets a multi-threshold neuron in
//! front of it, both operands of every activation product get one, and the
//! remaining nonlinear layers become expectation-compensation modules. When a
//! linear output feeds a product operand directly, its weights are expanded
//! into per-channel banks scaled by the operand's base threshold, so that
//! neuron runs with base thresholds `1` and `η`.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::archive::{self, FORMAT_VERSION};
use crate::calibrate::ThresholdSet;
use crate::energy::Ops;
use crate::error::{Error, Result};
use crate::model::{AttnProduct, LayerKind, ModelGraph, INPUT_VALUE};
use crate::neuron::ThresholdLadder;
use crate::tensor::{Scalar, Tensor};

pub const SNN_FILE: &str = "snn.json";

/// Function wrapped by an EC module.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "function", rename_all = "snake_case")]
pub enum EcFunction {
    Gelu,
    Softmax { scale: f64 },
    LayerNorm { gamma: String, beta: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SnnLayerKind {
    /// Multi-threshold neuron turning an analog current into spikes.
    Neuron {
        site: String,
        input: String,
        output: String,
        shape: Vec<usize>,
        /// Ladder used to decode the spikes downstream.
        ladder: ThresholdLadder,
        /// The incoming current is pre-divided by `θ1`; the neuron fires
        /// against the normalized ladder.
        normalized: bool,
    },
    /// Linear layer driven by spikes through per-channel weight banks.
    SpikeLinear {
        input: String,
        outputs: Vec<String>,
        weight: String,
        bias: String,
        /// Divisor of each output part (1 unless a normalized neuron follows).
        lambda1: Vec<f64>,
        /// `bank_scales[part][c]`: factor applied to the weights for input
        /// channel `c + 1`.
        bank_scales: Vec<Vec<f64>>,
        /// CLS parameter prepended to the rows (patch embedding only).
        #[serde(default, skip_serializing_if = "Option::is_none")]
        cls: Option<String>,
    },
    PosAdd {
        input: String,
        output: String,
        pos: String,
    },
    Ec {
        input: String,
        output: String,
        #[serde(flatten)]
        function: EcFunction,
    },
    MatMulEc {
        a: String,
        b: String,
        output: String,
        product: AttnProduct,
    },
    ResidualAdd {
        a: String,
        b: String,
        output: String,
    },
    ClsHead {
        input: String,
        output: String,
        weight: String,
        bias: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnnLayerSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: SnnLayerKind,
}

impl SnnLayerSpec {
    pub fn inputs(&self) -> Vec<&str> {
        match &self.kind {
            SnnLayerKind::Neuron { input, .. }
            | SnnLayerKind::SpikeLinear { input, .. }
            | SnnLayerKind::PosAdd { input, .. }
            | SnnLayerKind::Ec { input, .. }
            | SnnLayerKind::ClsHead { input, .. } => vec![input],
            SnnLayerKind::MatMulEc { a, b, .. } | SnnLayerKind::ResidualAdd { a, b, .. } => vec![a, b],
        }
    }

    pub fn outputs(&self) -> Vec<&str> {
        match &self.kind {
            SnnLayerKind::SpikeLinear { outputs, .. } => outputs.iter().map(String::as_str).collect(),
            SnnLayerKind::Neuron { output, .. }
            | SnnLayerKind::PosAdd { output, .. }
            | SnnLayerKind::Ec { output, .. }
            | SnnLayerKind::MatMulEc { output, .. }
            | SnnLayerKind::ResidualAdd { output, .. }
            | SnnLayerKind::ClsHead { output, .. } => vec![output],
        }
    }

    pub fn is_neuron(&self) -> bool {
        matches!(self.kind, SnnLayerKind::Neuron { .. })
    }
}

/// Everything stored in `snn.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnnManifest {
    pub format_version: u32,
    pub n: usize,
    pub percentile: f64,
    pub layers: Vec<SnnLayerSpec>,
}

impl SnnManifest {
    pub fn from_json_bytes(bytes: &[u8]) -> Result<Self> {
        let m: SnnManifest = serde_json::from_slice(bytes).map_err(|e| Error::Format(format!("{SNN_FILE}: {e}")))?;
        if m.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported {SNN_FILE} format_version {}",
                m.format_version
            )));
        }
        Ok(m)
    }

    pub fn neurons(&self) -> impl Iterator<Item = (&str, &ThresholdLadder)> {
        self.layers.iter().filter_map(|l| match &l.kind {
            SnnLayerKind::Neuron { site, ladder, .. } => Some((site.as_str(), ladder)),
            _ => None,
        })
    }
}

/// A converted network: the spiking layer list plus the source weights.
#[derive(Debug, Clone, PartialEq)]
pub struct SnnGraph {
    pub manifest: SnnManifest,
    pub model: ModelGraph,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConvertConfig {
    /// Replaces the per-site threshold count when set.
    pub n: Option<usize>,
}

/// Rewrites `model` using `thresholds` for every calibration site.
pub fn convert(model: &ModelGraph, thresholds: &ThresholdSet, cfg: &ConvertConfig) -> Result<SnnGraph> {
    let ladder_for = |site: &str| -> Result<ThresholdLadder> {
        let t = thresholds.get(site)?;
        ThresholdLadder::new(t.theta1, t.theta2, cfg.n.unwrap_or(t.n))
    };
    let missing = thresholds.missing_sites(model);
    if !missing.is_empty() {
        return Err(Error::Validation(format!(
            "thresholds missing for sites: {}",
            missing.join(", ")
        )));
    }
    let n = match cfg.n {
        Some(n) => n,
        None => {
            let counts: std::collections::BTreeSet<usize> = thresholds.sites.values().map(|t| t.n).collect();
            if counts.len() > 1 {
                return Err(Error::Validation(format!("mixed threshold counts {counts:?}")));
            }
            counts.into_iter().next().unwrap_or(1)
        }
    };
    let shapes = value_shapes(model)?;

    // Linear outputs read only by one product operand get fused neurons.
    let mut operand_site: HashMap<&str, (&str, usize)> = HashMap::new();
    let mut readers: HashMap<&str, usize> = HashMap::new();
    for layer in &model.layers {
        for v in layer.inputs() {
            *readers.entry(v).or_default() += 1;
        }
        if let LayerKind::MatMul { a, b, .. } = &layer.kind {
            operand_site.insert(a, (&layer.sites[0], 0));
            operand_site.insert(b, (&layer.sites[1], 1));
        }
    }

    let mut layers = Vec::new();
    let mut spiking: HashMap<String, String> = HashMap::new();
    let neuron = |name: String, site: &str, input: String, output: String, normalized: bool| -> Result<SnnLayerSpec> {
        let shape = shapes
            .get(input.trim_end_matches(".cur"))
            .cloned()
            .ok_or_else(|| Error::Validation(format!("unknown value '{input}'")))?;
        Ok(SnnLayerSpec {
            name,
            kind: SnnLayerKind::Neuron {
                site: site.to_string(),
                input,
                output,
                shape,
                ladder: ladder_for(site)?,
                normalized,
            },
        })
    };

    for layer in &model.layers {
        let name = layer.name.clone();
        match &layer.kind {
            LayerKind::EmbedLinear {
                input,
                output,
                weight,
                bias,
                cls,
            } => {
                let site = &layer.sites[0];
                let s = format!("{input}.s");
                layers.push(neuron(format!("{name}.neuron"), site, input.clone(), s.clone(), false)?);
                let prev = ladder_for(site)?;
                layers.push(SnnLayerSpec {
                    name,
                    kind: SnnLayerKind::SpikeLinear {
                        input: s,
                        outputs: vec![output.clone()],
                        weight: weight.clone(),
                        bias: bias.clone(),
                        lambda1: vec![1.0],
                        bank_scales: vec![prev.values().to_vec()],
                        cls: Some(cls.clone()),
                    },
                });
            }
            LayerKind::Linear {
                input,
                outputs,
                weight,
                bias,
            } => {
                let site = &layer.sites[0];
                let s = format!("{input}.s");
                layers.push(neuron(format!("{name}.neuron"), site, input.clone(), s.clone(), false)?);
                let prev = ladder_for(site)?;
                let mut lambda1 = Vec::new();
                let mut fused = Vec::new();
                let mut outs = Vec::new();
                for o in outputs {
                    match operand_site.get(o.as_str()) {
                        Some(&(osite, _)) if readers.get(o.as_str()) == Some(&1) => {
                            let l = ladder_for(osite)?;
                            lambda1.push(l.theta1());
                            let cur = format!("{o}.cur");
                            fused.push((osite, cur.clone(), o.clone()));
                            outs.push(cur);
                        }
                        _ => {
                            lambda1.push(1.0);
                            outs.push(o.clone());
                        }
                    }
                }
                let bank_scales = lambda1
                    .iter()
                    .map(|l1| prev.values().iter().map(|lp| lp / l1).collect())
                    .collect();
                layers.push(SnnLayerSpec {
                    name: name.clone(),
                    kind: SnnLayerKind::SpikeLinear {
                        input: s,
                        outputs: outs,
                        weight: weight.clone(),
                        bias: bias.clone(),
                        lambda1,
                        bank_scales,
                        cls: None,
                    },
                });
                for (osite, cur, o) in fused {
                    let s = format!("{o}.s");
                    layers.push(neuron(format!("{o}.neuron"), osite, cur, s.clone(), true)?);
                    spiking.insert(o, s);
                }
            }
            LayerKind::MatMul { a, b, output, product } => {
                let mut operand = |v: &String, site: &str| -> Result<String> {
                    if let Some(s) = spiking.get(v) {
                        return Ok(s.clone());
                    }
                    let s = format!("{v}.s");
                    layers.push(neuron(format!("{v}.neuron"), site, v.clone(), s.clone(), false)?);
                    Ok(s)
                };
                let a = operand(a, &layer.sites[0])?;
                let b = operand(b, &layer.sites[1])?;
                layers.push(SnnLayerSpec {
                    name,
                    kind: SnnLayerKind::MatMulEc {
                        a,
                        b,
                        output: output.clone(),
                        product: *product,
                    },
                });
            }
            LayerKind::PosAdd { input, output, pos } => layers.push(SnnLayerSpec {
                name,
                kind: SnnLayerKind::PosAdd {
                    input: input.clone(),
                    output: output.clone(),
                    pos: pos.clone(),
                },
            }),
            LayerKind::LayerNorm {
                input,
                output,
                gamma,
                beta,
            } => layers.push(ec_layer(
                name,
                input,
                output,
                EcFunction::LayerNorm {
                    gamma: gamma.clone(),
                    beta: beta.clone(),
                },
            )),
            LayerKind::Softmax { input, output, scale } => {
                layers.push(ec_layer(name, input, output, EcFunction::Softmax { scale: *scale }))
            }
            LayerKind::Gelu { input, output } => layers.push(ec_layer(name, input, output, EcFunction::Gelu)),
            LayerKind::ResidualAdd { a, b, output } => layers.push(SnnLayerSpec {
                name,
                kind: SnnLayerKind::ResidualAdd {
                    a: a.clone(),
                    b: b.clone(),
                    output: output.clone(),
                },
            }),
            LayerKind::ClsHead {
                input,
                output,
                weight,
                bias,
            } => layers.push(SnnLayerSpec {
                name,
                kind: SnnLayerKind::ClsHead {
                    input: input.clone(),
                    output: output.clone(),
                    weight: weight.clone(),
                    bias: bias.clone(),
                },
            }),
        }
    }
    let graph = SnnGraph {
        manifest: SnnManifest {
            format_version: FORMAT_VERSION,
            n,
            percentile: thresholds.percentile,
            layers,
        },
        model: model.clone(),
    };
    let violations = check_invariants(&graph);
    if !violations.is_empty() {
        return Err(Error::Validation(format!(
            "converted graph violates invariants: {}",
            violations.join("; ")
        )));
    }
    Ok(graph)
}

fn ec_layer(name: String, input: &str, output: &str, function: EcFunction) -> SnnLayerSpec {
    SnnLayerSpec {
        name,
        kind: SnnLayerKind::Ec {
            input: input.to_string(),
            output: output.to_string(),
            function,
        },
    }
}

/// Shape of every value in the encoder graph.
pub fn value_shapes(model: &ModelGraph) -> Result<HashMap<String, Vec<usize>>> {
    let cfg = &model.config;
    let (n, c) = (cfg.num_tokens, cfg.dim);
    let mut shapes: HashMap<String, Vec<usize>> = HashMap::new();
    shapes.insert(INPUT_VALUE.to_string(), model.input_shape().to_vec());
    for layer in &model.layers {
        let get = |v: &str| -> Result<Vec<usize>> {
            shapes
                .get(v)
                .cloned()
                .ok_or_else(|| Error::Validation(format!("value '{v}' used before definition")))
        };
        let out: Vec<usize> = match &layer.kind {
            LayerKind::EmbedLinear { .. } => vec![n, c],
            LayerKind::Linear {
                weight, outputs, input, ..
            } => {
                let rows = get(input)?[0];
                let w = model.weight(weight)?.shape()[1];
                vec![rows, w / outputs.len()]
            }
            LayerKind::MatMul { product, .. } => match product {
                AttnProduct::Scores => vec![cfg.heads, n, n],
                AttnProduct::Context => vec![n, c],
            },
            LayerKind::ClsHead { .. } => vec![cfg.num_classes],
            LayerKind::PosAdd { input, .. }
            | LayerKind::LayerNorm { input, .. }
            | LayerKind::Softmax { input, .. }
            | LayerKind::Gelu { input, .. } => get(input)?,
            LayerKind::ResidualAdd { a, .. } => get(a)?,
        };
        for o in layer.outputs() {
            shapes.insert(o.to_string(), out.clone());
        }
    }
    Ok(shapes)
}

/// Structural checks on a converted graph; returns one message per violation.
pub fn check_invariants(graph: &SnnGraph) -> Vec<String> {
    let mut bad = Vec::new();
    let layers = &graph.manifest.layers;
    let mut producer: HashMap<&str, &SnnLayerSpec> = HashMap::new();
    for l in layers {
        for v in l.inputs() {
            if v != INPUT_VALUE && !producer.contains_key(v) {
                bad.push(format!("{}: input '{v}' used before definition", l.name));
            }
        }
        for v in l.outputs() {
            if producer.insert(v, l).is_some() {
                bad.push(format!("{}: value '{v}' produced twice", l.name));
            }
        }
    }
    let is_spiking = |v: &str| producer.get(v).is_some_and(|p| p.is_neuron());
    let mut readers: HashMap<&str, usize> = HashMap::new();
    for l in layers {
        for v in l.inputs() {
            *readers.entry(v).or_default() += 1;
        }
    }

    for l in layers {
        match &l.kind {
            SnnLayerKind::Neuron {
                input,
                output,
                ladder,
                normalized,
                ..
            } => {
                if is_spiking(input) {
                    bad.push(format!("{}: neuron fed by spikes", l.name));
                }
                if readers.get(output.as_str()).copied().unwrap_or(0) != 1 {
                    bad.push(format!("{}: spikes must have exactly one reader", l.name));
                }
                if ladder.n() != graph.manifest.n {
                    bad.push(format!(
                        "{}: ladder has n={} not {}",
                        l.name,
                        ladder.n(),
                        graph.manifest.n
                    ));
                }
                if *normalized {
                    match producer.get(input.as_str()).map(|p| &p.kind) {
                        Some(SnnLayerKind::SpikeLinear { outputs, lambda1, .. }) => {
                            let part = outputs.iter().position(|o| o == input);
                            if part.map(|p| lambda1[p]) != Some(ladder.theta1()) {
                                bad.push(format!("{}: current not divided by the neuron's θ1", l.name));
                            }
                        }
                        _ => bad.push(format!("{}: normalized neuron not fed by a spiking linear", l.name)),
                    }
                }
            }
            SnnLayerKind::SpikeLinear {
                input,
                outputs,
                lambda1,
                bank_scales,
                weight,
                bias,
                ..
            } => {
                let prev = match producer.get(input.as_str()).map(|p| &p.kind) {
                    Some(SnnLayerKind::Neuron {
                        ladder,
                        normalized: false,
                        ..
                    }) => Some(ladder),
                    _ => {
                        bad.push(format!("{}: linear layer not preceded by a neuron", l.name));
                        None
                    }
                };
                if lambda1.len() != outputs.len() || bank_scales.len() != outputs.len() {
                    bad.push(format!("{}: one normalization factor per output required", l.name));
                } else if let Some(prev) = prev {
                    for (l1, scales) in lambda1.iter().zip(bank_scales) {
                        let ok = *l1 > 0.0
                            && scales.len() == prev.values().len()
                            && scales
                                .iter()
                                .zip(prev.values())
                                .all(|(s, lp)| (s - lp / l1).abs() <= 1e-12 * (lp / l1).abs());
                        if !ok {
                            bad.push(format!("{}: weight banks disagree with the input ladder", l.name));
                        }
                    }
                }
                for name in [weight, bias] {
                    if graph.model.weight(name).is_err() {
                        bad.push(format!("{}: unknown tensor '{name}'", l.name));
                    }
                }
            }
            SnnLayerKind::MatMulEc { a, b, .. } => {
                if !is_spiking(a) || !is_spiking(b) {
                    bad.push(format!("{}: product operands must both be spikes", l.name));
                }
            }
            SnnLayerKind::ClsHead { input, .. } => {
                if is_spiking(input) {
                    bad.push(format!("{}: classifier input must stay analog", l.name));
                }
            }
            SnnLayerKind::Ec { input, .. } | SnnLayerKind::PosAdd { input, .. } => {
                if is_spiking(input) {
                    bad.push(format!("{}: analog module fed by spikes", l.name));
                }
            }
            SnnLayerKind::ResidualAdd { a, b, .. } => {
                if is_spiking(a) || is_spiking(b) {
                    bad.push(format!("{}: analog module fed by spikes", l.name));
                }
            }
        }
    }

    // One-to-one correspondence with the encoder's layers.
    let count = |f: &dyn Fn(&LayerKind) -> bool| graph.model.layers.iter().filter(|l| f(&l.kind)).count();
    let linears = count(&|k| matches!(k, LayerKind::Linear { .. } | LayerKind::EmbedLinear { .. }));
    let products = count(&|k| matches!(k, LayerKind::MatMul { .. }));
    let nonlinear = count(&|k| {
        matches!(
            k,
            LayerKind::Gelu { .. } | LayerKind::Softmax { .. } | LayerKind::LayerNorm { .. }
        )
    });
    let snn_count = |f: &dyn Fn(&SnnLayerKind) -> bool| layers.iter().filter(|l| f(&l.kind)).count();
    if snn_count(&|k| matches!(k, SnnLayerKind::SpikeLinear { .. })) != linears {
        bad.push("spiking linear count differs from the encoder".into());
    }
    if snn_count(&|k| matches!(k, SnnLayerKind::MatMulEc { .. })) != products {
        bad.push("product module count differs from the encoder".into());
    }
    if snn_count(&|k| matches!(k, SnnLayerKind::Ec { .. })) != nonlinear {
        bad.push("EC module count differs from the encoder".into());
    }
    let sites: Vec<&str> = graph.manifest.neurons().map(|(s, _)| s).collect();
    let mut expected = graph.model.calibration_sites();
    expected.sort();
    let mut got: Vec<String> = sites.iter().map(|s| s.to_string()).collect();
    got.sort();
    if got != expected {
        bad.push("neurons do not cover each calibration site exactly once".into());
    }
    bad
}

/// `2n` weight banks of one linear layer plus its rescaled bias.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedWeights<T: Scalar = f64> {
    /// Bank `c` serves input channel `c + 1`; each is `[in × out]`.
    pub banks: Vec<Tensor<T>>,
    /// `bias / λ1`, per output column.
    pub bias: Tensor<T>,
    /// Divisor of each column block.
    pub lambda1: Vec<f64>,
    /// `θ2/θ1` of the downstream neuron, when there is one.
    pub eta: Option<f64>,
}

/// Banks `W·λ_c/λ1` for every channel `c` of the upstream ladder.
pub fn normalize_weights<T: Scalar>(
    w: &Tensor<T>,
    bias: &Tensor<T>,
    lambda_prev: &ThresholdLadder,
    lambda1_this: f64,
) -> Result<NormalizedWeights<T>> {
    normalize_weights_parts(w, bias, lambda_prev, &[lambda1_this])
}

/// As [`normalize_weights`], with a separate divisor per equal column block.
pub fn normalize_weights_parts<T: Scalar>(
    w: &Tensor<T>,
    bias: &Tensor<T>,
    lambda_prev: &ThresholdLadder,
    lambda1: &[f64],
) -> Result<NormalizedWeights<T>> {
    let (rows, cols) = w.dims2()?;
    if bias.len() != cols {
        return Err(Error::Dimension(format!("bias {} vs {cols} outputs", bias.len())));
    }
    if lambda1.is_empty() || cols % lambda1.len() != 0 {
        return Err(Error::Dimension(format!(
            "{cols} outputs do not split into {} parts",
            lambda1.len()
        )));
    }
    if let Some(l) = lambda1.iter().find(|l| !(l.is_finite() && **l > 0.0)) {
        return Err(Error::Domain(format!("normalization factor {l} must be positive")));
    }
    let width = cols / lambda1.len();
    let banks = lambda_prev
        .values()
        .iter()
        .map(|&lp| {
            let scales: Vec<T> = lambda1.iter().map(|l1| T::lit(lp / l1)).collect();
            let mut b = w.clone();
            for r in 0..rows {
                for (j, v) in b.data_mut()[r * cols..(r + 1) * cols].iter_mut().enumerate() {
                    *v *= scales[j / width];
                }
            }
            b
        })
        .collect();
    let inv: Vec<T> = lambda1.iter().map(|l1| T::one() / T::lit(*l1)).collect();
    let bias = Tensor::from_fn(&[cols], |j| bias.data()[j] * inv[j / width]);
    Ok(NormalizedWeights {
        banks,
        bias,
        lambda1: lambda1.to_vec(),
        eta: None,
    })
}

/// Spike-driven linear layer over `rows` rows of spike indices.
///
/// Starts every row from the rescaled bias and adds one bank row per fired
/// input; no multiplications. Every addition, bias included, is an AC.
pub fn spike_linear<T: Scalar>(w: &NormalizedWeights<T>, spikes: &[u8], rows: usize) -> Result<(Tensor<T>, Ops)> {
    let (fan_in, fan_out) = w.banks[0].dims2()?;
    if spikes.len() != rows * fan_in {
        return Err(Error::Dimension(format!(
            "spike matrix has {} entries, expected {rows}×{fan_in}",
            spikes.len()
        )));
    }
    let channels = w.banks.len();
    let mut out = Tensor::zeros(&[rows, fan_out]);
    let mut fired = 0u64;
    for r in 0..rows {
        let orow = &mut out.data_mut()[r * fan_out..(r + 1) * fan_out];
        orow.copy_from_slice(w.bias.data());
        for (i, &s) in spikes[r * fan_in..(r + 1) * fan_in].iter().enumerate() {
            if s == 0 {
                continue;
            }
            if s as usize > channels {
                return Err(Error::Validation(format!("spike index {s} exceeds {channels} banks")));
            }
            for (o, &v) in orow.iter_mut().zip(w.banks[s as usize - 1].row(i)) {
                *o += v;
            }
            fired += 1;
        }
    }
    let ops = Ops {
        acs: fired * fan_out as u64 + (rows * fan_out) as u64,
        macs: 0,
    };
    Ok((out, ops))
}

pub fn encode_snn(graph: &SnnGraph) -> Result<Vec<u8>> {
    archive::to_json_bytes(&graph.manifest)
}

/// Reassembles a converted network from its three files' contents.
pub fn parse_snn(manifest: &[u8], blob: &[u8], snn_json: &[u8]) -> Result<SnnGraph> {
    let model = archive::parse_model(manifest, blob)?;
    let graph = SnnGraph {
        manifest: SnnManifest::from_json_bytes(snn_json)?,
        model,
    };
    let violations = check_invariants(&graph);
    if !violations.is_empty() {
        return Err(Error::Validation(format!(
            "{SNN_FILE} violates invariants: {}",
            violations.join("; ")
        )));
    }
    Ok(graph)
}

/// Writes the weight archive plus `snn.json` into `dir`.
pub fn save_snn(graph: &SnnGraph, dir: &Path) -> Result<()> {
    let snn = encode_snn(graph)?;
    archive::save_model(&graph.model, dir)?;
    archive::write(&dir.join(SNN_FILE), &snn)
}

pub fn load_snn(dir: &Path) -> Result<SnnGraph> {
    let read = |name: &str| {
        let p = dir.join(name);
        std::fs::read(&p).map_err(|e| Error::io(&p, e))
    };
    parse_snn(
        &read(archive::MANIFEST_FILE)?,
        &read(archive::WEIGHTS_FILE)?,
        &read(SNN_FILE)?,
    )
}

/// Count of each layer kind, for summaries.
pub fn layer_census(graph: &SnnGraph) -> BTreeMap<&'static str, usize> {
    let mut out = BTreeMap::new();
    for l in &graph.manifest.layers {
        let k = match l.kind {
            SnnLayerKind::Neuron { .. } => "neuron",
            SnnLayerKind::SpikeLinear { .. } => "spike_linear",
            SnnLayerKind::PosAdd { .. } => "pos_add",
            SnnLayerKind::Ec { .. } => "ec",
            SnnLayerKind::MatMulEc { .. } => "matmul_ec",
            SnnLayerKind::ResidualAdd { .. } => "residual_add",
            SnnLayerKind::ClsHead { .. } => "cls_head",
        };
        *out.entry(k).or_default() += 1;
    }
    out
}
